#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "extd/augment.hpp"
#include "extd/detect.hpp"
#include "extd/model.hpp"

namespace extd {

/// Malformed or unreadable input data (as opposed to a usage error).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// --- NetPBM ---------------------------------------------------------------

/// Binary P6 or P5 (gray, replicated to three channels), maxval 255. Returns
/// 1x3xHxW in [0,1].
Tensor decode_netpbm(std::string_view bytes);
/// P6 with values clamped to [0,1] and rounded to 8 bits.
std::string encode_ppm(const Tensor& image);
Tensor load_image(const std::filesystem::path& path);
void save_image(const std::filesystem::path& path, const Tensor& image);

// --- weight file ----------------------------------------------------------
//
// "EXTD", u32 version (1), u32 count, then per tensor: u16 name length, name,
// u8 rank, u32 dims[rank], u8 kind (0 float32, 1 float64), raw data. All
// integers and floats little-endian. Per-channel vectors are stored as rank 1.

template <typename T>
std::string encode_weights(const ModelParams<T>& params);
/// Converts when the stored element kind differs from T.
template <typename T>
ModelParams<T> decode_weights(std::string_view bytes);
template <typename T>
void save_weights(const std::filesystem::path& path, const ModelParams<T>& params);
template <typename T>
ModelParams<T> load_weights(const std::filesystem::path& path);

/// Throws DataError unless names and shapes match what `config` builds.
template <typename T>
void check_weights(const ModelParams<T>& params, const ModelConfig& config);

// --- annotations ----------------------------------------------------------

struct DatasetEntry {
  std::string path;
  std::vector<Box> boxes;
};

struct DatasetIndex {
  std::vector<DatasetEntry> entries;
  int dropped = 0;  // boxes with w <= 0 or h <= 0
};

/// Records of: path line, count line, then `count` lines of at least four
/// numbers (x y w h, extra columns ignored).
DatasetIndex parse_annotations(std::string_view text);
std::string serialize_annotations(const DatasetIndex& index);
DatasetIndex load_annotations(const std::filesystem::path& path);

/// Loads every image of an annotation file (paths relative to the file's
/// directory). Boxes are clipped to the image; ones that vanish are dropped.
std::vector<Sample> load_dataset(const std::filesystem::path& annotation_file,
                                 DatasetIndex* index = nullptr);

// --- config text ----------------------------------------------------------

/// `key = value` lines; `#` starts a comment. Keys: variant, width, depth,
/// activation, levels, expansion, seed, bn_per_pass. A preset width fills in
/// depth and expansion unless given.
ModelConfig parse_config(std::string_view text);
std::string format_config(const ModelConfig& config);
ModelConfig load_config(const std::filesystem::path& path);

// --- detections and curves ------------------------------------------------

struct ImageDetections {
  std::string id;
  std::vector<Detection> dets;
};

/// Per image: id line, count line, `x y w h score` lines with four decimals.
std::string format_detections(const std::vector<ImageDetections>& images);
std::vector<ImageDetections> parse_detections(std::string_view text);

/// `threshold precision recall` lines.
std::string format_pr(const std::vector<PrPoint>& points);

// --- synthetic data -------------------------------------------------------

/// One image of 1-5 disjoint elliptical faces (eye dots, mouth arc) on
/// textured noise. Pixel values are already quantised to 8 bits, so the
/// sample equals what a PPM round trip returns.
Sample synth_sample(std::mt19937_64& rng, int resolution);

std::vector<Sample> synth_dataset(int count, int resolution, std::uint64_t seed);

/// Writes img_NNNNN.ppm files and annotations.txt into out_dir.
DatasetIndex synth_generate(int count, int resolution, std::uint64_t seed,
                            const std::filesystem::path& out_dir);

}  // namespace extd
