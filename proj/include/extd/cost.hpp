#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "extd/model.hpp"

namespace extd {

struct CostRow {
  std::string name;
  std::string group;  // E, F, U, heads (or block names for plain networks)
  std::int64_t params = 0;
  std::vector<std::int64_t> madds_per_pass;  // one entry per executed pass, finest first
  std::int64_t total_madds = 0;

  int passes() const { return static_cast<int>(madds_per_pass.size()); }
};

struct CostGroup {
  std::string name;
  std::int64_t params = 0;
  std::int64_t madds = 0;
};

struct CostReport {
  std::string model;
  int input_h = 0, input_w = 0;
  bool elementwise = false;
  std::vector<CostRow> rows;
  std::int64_t params = 0;
  std::int64_t madds = 0;

  std::vector<CostGroup> groups() const;
  /// Human-readable aligned table with group subtotals.
  std::string table() const;
  /// `name params madds_per_pass passes total_madds`, one line per row, where
  /// madds_per_pass is a comma-separated list.
  std::string lines() const;
};

struct CostOptions {
  /// Also charge BN, activation, upsampling, maxout and residual adds at one
  /// madd per output element.
  bool include_elementwise = false;
};

/// Learnable element count (running statistics excluded).
template <typename T>
std::int64_t count_params(const ModelParams<T>& params);

/// Shared backbone rows record one pass per pyramid level at halving resolution.
CostReport count_madds(const ModelConfig& config, int input_h, int input_w,
                       const CostOptions& options = {});

/// Parameter count straight from the architecture description.
std::int64_t count_params(const ModelConfig& config);

/// A conventional (unshared) backbone with heads attached after given blocks.
struct PlainNetwork {
  struct Stage {
    std::string group;
    BlockDesc block;
  };
  std::string name;
  std::vector<Stage> stages;
  std::vector<std::pair<int, HeadDesc>> heads;  // attach after stages[index]
};

/// S3FD with the truncated MobileFaceNet backbone used as the comparison model.
PlainNetwork describe_s3fd_mobilefacenet();

CostReport count_madds(const PlainNetwork& net, int input_h, int input_w,
                       const CostOptions& options = {});

/// Grid search over expansion factors 1..6 for blocks 1..depth-1 (block 0
/// stays 1), returning the lexicographically smallest minimiser of
/// |params - target|. Throws std::invalid_argument when the best is off by
/// more than 10%.
std::vector<int> calibrate_expansions(std::int64_t target_params, const ModelConfig& skeleton);

}  // namespace extd
