#pragma once

#include "mflow/grid.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow {

/// I/O or format failure carrying the offending path or record.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// IDX byte format (big-endian header)

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxTensor {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

IdxTensor parse_idx(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor);
IdxTensor load_idx(const std::string& path);

/// Parses and requires the 3-D image magic.
IdxTensor parse_idx_images(const std::vector<std::uint8_t>& bytes);
/// Parses and requires the 1-D label magic.
IdxTensor parse_idx_labels(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);

// ---------------------------------------------------------------------------
// Datasets

enum class DatasetSource { idx_file, synthetic_shapes, gaussian_toy };

/// Images with values in [-1, 1] sharing one (C, H, W).
struct ImageDataset {
  DatasetSource source = DatasetSource::synthetic_shapes;
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<GridFunction<float>> images;

  std::size_t size() const { return images.size(); }
  void validate() const;
};

/// u8 pixel -> x / 127.5 - 1
ImageDataset dataset_from_idx(const IdxTensor& images, std::size_t limit = 0);

/// Random anti-aliased discs, rectangles and line segments on a dark background.
ImageDataset make_synthetic_shapes(std::size_t n, int side, std::uint64_t seed);

/// i.i.d. N(0, stddev^2) pixels clipped to [-1, 1].
ImageDataset make_gaussian_toy(std::size_t n, int side, std::uint64_t seed, double stddev = 0.3);

struct RotationPolicy {
  std::vector<double> angles_deg;     // draw uniformly from this set when nonempty
  double range_lo_deg = 0.0;          // otherwise uniform in [lo, hi)
  double range_hi_deg = 360.0;
};

/// Bilinear rotation about the image centre; uncovered pixels get `fill`.
GridFunction<float> rotate_image(const GridFunction<float>& image, double degrees, float fill = -1.0f);

ImageDataset rotate_dataset(const ImageDataset& ds, const RotationPolicy& policy, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints: "MFLOWCK1", u32 header length, header text, then records
// [u32 name length, name, u32 rank, u32 dims..., float32 payload], all little-endian.

inline constexpr char kCheckpointMagic[8] = {'M', 'F', 'L', 'O', 'W', 'C', 'K', '1'};
inline constexpr int kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

struct Checkpoint {
  std::string header;  // must contain "format_version = <n>"
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Artifacts

/// Pixel value for [-1, 1] data: round((v + 1) * 127.5) clamped to [0, 255].
std::uint8_t to_pixel(float v);

/// Tiled image grid as binary PGM (1 channel) or PPM (3 channels). Empty
/// trailing tiles are mid-gray.
std::vector<std::uint8_t> encode_grid(const std::vector<GridFunction<float>>& images, int cols);
void emit_grid(const std::vector<GridFunction<float>>& images, int cols, const std::string& path);

/// Binary PGM (P5, maxval <= 255) as a one-channel grid with values in [-1, 1].
GridFunction<float> decode_pgm(const std::vector<std::uint8_t>& bytes);
GridFunction<float> load_pgm(const std::string& path);

void emit_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows,
              const std::string& path);

/// RBF-kernel maximum mean discrepancy (squared) between two image sets on
/// flattened pixels, k(x, y) = exp(-|x - y|^2 / (2 bandwidth^2)). The unbiased
/// estimator drops the diagonal terms and can dip slightly below zero.
double mmd_metric(const std::vector<GridFunction<float>>& a, const std::vector<GridFunction<float>>& b, double bandwidth,
                  bool unbiased = true);

/// Median pairwise distance within a set, a common bandwidth choice.
double median_pairwise_distance(const std::vector<GridFunction<float>>& set);

}  // namespace mflow
