#pragma once

#include <vector>

#include "extd/anchors.hpp"
#include "extd/model.hpp"

namespace extd {

struct Detection {
  Box box;
  double score = 0;
  int level = 0;  // 1-based pyramid level
};

struct DetectOptions {
  double conf = 0.05;
  double nms_iou = 0.3;
  int topk = 750;
};

/// Zero-pads bottom/right so both sides are multiples of `multiple`.
template <typename T>
BasicTensor<T> pad_to_multiple(const BasicTensor<T>& image, int multiple);

/// Greedy suppression by descending score; equal scores keep input order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

/// Scores, decodes and filters the anchors of image `n`; boxes are clipped to
/// width x height. No NMS.
template <typename T>
std::vector<Detection> decode_heads(const std::vector<HeadOutput<T>>& heads, const AnchorGrid& grid,
                                    int n, double width, double height, double conf);

/// Full inference on one 1x3xHxW image of any size.
template <typename T>
std::vector<Detection> detect(const ModelParams<T>& params, const ModelConfig& config,
                              const BasicTensor<T>& image, const DetectOptions& options = {});

/// Applies NMS and top-k to raw candidates.
std::vector<Detection> finalize_detections(std::vector<Detection> raw, const DetectOptions& options);

struct PrPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
};

struct EvalReport {
  double ap = 0;
  std::vector<PrPoint> pr;  // thresholds 0.999 down to 0.000
  long tp = 0, fp = 0, fn = 0;  // at score >= 0.5
  long num_gt = 0, num_det = 0;
};

/// All-point interpolated AP with one-to-one greedy matching in descending
/// score order; each detection takes the unmatched box it overlaps most.
EvalReport average_precision(const std::vector<std::vector<Detection>>& dets,
                             const std::vector<std::vector<Box>>& gts, double iou_thresh = 0.5);

struct BenchResult {
  int size = 0;
  int trials = 0;
  double mean_ms = 0;
  double std_ms = 0;
};

/// Forward-only wall-clock latency on square random inputs.
std::vector<BenchResult> bench(const ModelParams<float>& params, const ModelConfig& config,
                               const std::vector<int>& sizes, int trials = 1000);

}  // namespace extd
