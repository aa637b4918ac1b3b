#include "mflow/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace mflow {

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t le32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float le_float(const char* what) {
    const std::uint32_t bits = le32(what);
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }

  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw DataError(std::string("checkpoint: corrupt payload (truncated ") + what + ")");
    }
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for '" + path + "'");
}

double squared_distance(const GridFunction<float>& a, const GridFunction<float>& b) {
  return (a.values().cast<double>() - b.values().cast<double>()).square().sum();
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// IDX

IdxTensor parse_idx(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw DataError("idx: truncated file (no magic number)");
  IdxTensor t;
  t.magic = read_be32(bytes, 0);
  if (bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] == 0) {
    std::ostringstream os;
    os << "idx: bad magic 0x" << std::hex << t.magic << " (expected unsigned-byte tensor)";
    throw DataError(os.str());
  }
  const std::size_t rank = bytes[3];
  if (bytes.size() < 4 + 4 * rank) throw DataError("idx: truncated file (dimension header)");
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint32_t d = read_be32(bytes, 4 + 4 * i);
    if (d != 0 && count > std::numeric_limits<std::size_t>::max() / d) throw DataError("idx: dimension overflow");
    count *= d;
    t.dims.push_back(d);
  }
  if (count > (std::size_t{1} << 40)) throw DataError("idx: dimension overflow");
  const std::size_t offset = 4 + 4 * rank;
  if (bytes.size() - offset < count) {
    throw DataError("idx: truncated file (expected " + std::to_string(count) + " data bytes, found " +
                    std::to_string(bytes.size() - offset) + ")");
  }
  if (bytes.size() - offset > count) throw DataError("idx: trailing bytes after data");
  t.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return t;
}

IdxTensor parse_idx_images(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() >= 4 && read_be32(bytes, 0) == kIdxLabelMagic) {
    throw DataError("idx: label magic with image dims (expected 0x00000803)");
  }
  IdxTensor t = parse_idx(bytes);
  if (t.magic != kIdxImageMagic) throw DataError("idx: bad magic for image file (expected 0x00000803)");
  return t;
}

IdxTensor parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() >= 4 && read_be32(bytes, 0) == kIdxImageMagic) {
    throw DataError("idx: image magic with label dims (expected 0x00000801)");
  }
  IdxTensor t = parse_idx(bytes);
  if (t.magic != kIdxLabelMagic) throw DataError("idx: bad magic for label file (expected 0x00000801)");
  return t;
}

std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor) {
  std::size_t count = 1;
  for (auto d : tensor.dims) count *= d;
  if (count != tensor.data.size()) throw DataError("idx: data length does not match dims");
  if (tensor.dims.empty() || tensor.dims.size() > 255) throw DataError("idx: unsupported rank");
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(tensor.dims.size())};
  for (auto d : tensor.dims) write_be32(out, d);
  out.insert(out.end(), tensor.data.begin(), tensor.data.end());
  return out;
}

IdxTensor load_idx(const std::string& path) {
  try {
    return parse_idx(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Datasets

void ImageDataset::validate() const {
  for (const auto& img : images) {
    if (img.channels() != channels || img.height() != height || img.width() != width) {
      throw DataError("dataset: images do not share one shape");
    }
    if (!img.values().allFinite() || img.values().minCoeff() < -1.0f || img.values().maxCoeff() > 1.0f) {
      throw DataError("dataset: pixel values outside [-1, 1]");
    }
  }
}

ImageDataset dataset_from_idx(const IdxTensor& t, std::size_t limit) {
  if (t.magic != kIdxImageMagic || t.dims.size() != 3) throw DataError("idx: expected a 3-D image tensor");
  ImageDataset ds;
  ds.source = DatasetSource::idx_file;
  ds.height = static_cast<int>(t.dims[1]);
  ds.width = static_cast<int>(t.dims[2]);
  std::size_t n = t.dims[0];
  if (limit > 0) n = std::min(n, limit);
  const std::size_t plane = static_cast<std::size_t>(ds.height) * static_cast<std::size_t>(ds.width);
  for (std::size_t i = 0; i < n; ++i) {
    GridFunction<float> img(1, ds.height, ds.width);
    for (std::size_t p = 0; p < plane; ++p) {
      img.values()[static_cast<Eigen::Index>(p)] = static_cast<float>(t.data[i * plane + p] / 127.5 - 1.0);
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

ImageDataset make_synthetic_shapes(std::size_t n, int side, std::uint64_t seed) {
  if (side < 8) throw std::invalid_argument("make_synthetic_shapes: side must be >= 8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr int kSuper = 4;  // supersampling per axis for anti-aliasing

  ImageDataset ds;
  ds.source = DatasetSource::synthetic_shapes;
  ds.height = side;
  ds.width = side;
  for (std::size_t i = 0; i < n; ++i) {
    const int kind = static_cast<int>(unit(rng) * 3.0);
    const double cx = side * (0.3 + 0.4 * unit(rng));
    const double cy = side * (0.3 + 0.4 * unit(rng));
    const double angle = std::numbers::pi * unit(rng);
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);
    const double r = side * (0.15 + 0.15 * unit(rng));
    const double half_w = side * (0.1 + 0.2 * unit(rng));
    const double half_h = side * (0.08 + 0.15 * unit(rng));
    const double thickness = std::max(1.0, side * 0.06 * (1.0 + unit(rng)));
    const double length = side * (0.25 + 0.2 * unit(rng));

    auto inside = [&](double px, double py) {
      const double dx = px - cx;
      const double dy = py - cy;
      const double u = ca * dx + sa * dy;
      const double v = -sa * dx + ca * dy;
      switch (kind) {
        case 0: return dx * dx + dy * dy <= r * r;
        case 1: return std::abs(u) <= half_w && std::abs(v) <= half_h;
        default: return std::abs(u) <= length && std::abs(v) <= thickness * 0.5;
      }
    };

    GridFunction<float> img(1, side, side);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx)
            hits += inside(x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper) ? 1 : 0;
        img(0, y, x) = static_cast<float>(-1.0 + 2.0 * hits / (kSuper * kSuper));
      }
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

ImageDataset make_gaussian_toy(std::size_t n, int side, std::uint64_t seed, double stddev) {
  if (side < 1) throw std::invalid_argument("make_gaussian_toy: side must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  ImageDataset ds;
  ds.source = DatasetSource::gaussian_toy;
  ds.height = side;
  ds.width = side;
  for (std::size_t i = 0; i < n; ++i) {
    GridFunction<float> img(1, side, side);
    for (Eigen::Index p = 0; p < img.size(); ++p) img.values()[p] = static_cast<float>(std::clamp(normal(rng), -1.0, 1.0));
    ds.images.push_back(std::move(img));
  }
  return ds;
}

GridFunction<float> rotate_image(const GridFunction<float>& image, double degrees, float fill) {
  double a = std::fmod(degrees, 360.0);
  if (a < 0) a += 360.0;
  double c;
  double s;
  if (std::fmod(a, 90.0) == 0.0) {
    static constexpr double kc[4] = {1, 0, -1, 0};
    static constexpr double ks[4] = {0, 1, 0, -1};
    const int q = static_cast<int>(a / 90.0) % 4;
    c = kc[q];
    s = ks[q];
  } else {
    const double rad = a * std::numbers::pi / 180.0;
    c = std::cos(rad);
    s = std::sin(rad);
  }
  const int h = image.height();
  const int w = image.width();
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  GridFunction<float> out(image.channels(), h, w, fill);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // inverse rotation of the output position
      const double dx = x - cx;
      const double dy = y - cy;
      const double px = c * dx + s * dy + cx;
      const double py = -s * dx + c * dy + cy;
      const double fx = std::floor(px);
      const double fy = std::floor(py);
      const double ax = px - fx;
      const double ay = py - fy;
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      for (int ch = 0; ch < image.channels(); ++ch) {
        auto sample = [&](int yy, int xx) -> double {
          return (yy < 0 || yy >= h || xx < 0 || xx >= w) ? static_cast<double>(fill) : image(ch, yy, xx);
        };
        const double v = (1 - ay) * ((1 - ax) * sample(y0, x0) + ax * sample(y0, x0 + 1)) +
                         ay * ((1 - ax) * sample(y0 + 1, x0) + ax * sample(y0 + 1, x0 + 1));
        out(ch, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

ImageDataset rotate_dataset(const ImageDataset& ds, const RotationPolicy& policy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ImageDataset out = ds;
  for (auto& img : out.images) {
    double angle;
    if (!policy.angles_deg.empty()) {
      const auto i = std::min(policy.angles_deg.size() - 1,
                              static_cast<std::size_t>(unit(rng) * static_cast<double>(policy.angles_deg.size())));
      angle = policy.angles_deg[i];
    } else {
      angle = policy.range_lo_deg + (policy.range_hi_deg - policy.range_lo_deg) * unit(rng);
    }
    img = rotate_image(img, angle);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  write_le32(out, static_cast<std::uint32_t>(ck.header.size()));
  out.insert(out.end(), ck.header.begin(), ck.header.end());
  for (const auto& a : ck.arrays) {
    std::size_t count = 1;
    for (auto d : a.dims) count *= d;
    if (count != a.data.size()) throw DataError("checkpoint: array '" + a.name + "' data does not match its dims");
    write_le32(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    write_le32(out, static_cast<std::uint32_t>(a.dims.size()));
    for (auto d : a.dims) write_le32(out, d);
    for (float f : a.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      write_le32(out, bits);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), bytes.begin())) {
    throw DataError("checkpoint: bad magic (not an MFLOWCK1 file)");
  }
  const std::vector<std::uint8_t> body(bytes.begin() + 8, bytes.end());
  ByteReader in(body);
  Checkpoint ck;
  const std::uint32_t header_len = in.le32("header length");
  ck.header = in.text(header_len, "header");

  const std::string key = "format_version = ";
  const auto pos = ck.header.find(key);
  if (pos == std::string::npos) throw DataError("checkpoint: header lacks format_version");
  const int version = std::atoi(ck.header.c_str() + pos + key.size());
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: version mismatch (file has " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }

  while (!in.done()) {
    NamedArray a;
    const std::uint32_t name_len = in.le32("record name length");
    a.name = in.text(name_len, "record name");
    const std::uint32_t rank = in.le32("record rank");
    if (rank > 16) throw DataError("checkpoint: corrupt payload (implausible rank for '" + a.name + "')");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      a.dims.push_back(in.le32("record dims"));
      count *= a.dims.back();
    }
    in.need(count * 4, "record payload");
    a.data.resize(count);
    for (auto& f : a.data) f = in.le_float("record payload");
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_bytes(path, encode_checkpoint(ck)); }

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Artifacts

std::uint8_t to_pixel(float v) {
  const double p = std::round((static_cast<double>(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(p, 0.0, 255.0));
}

std::vector<std::uint8_t> encode_grid(const std::vector<GridFunction<float>>& images, int cols) {
  if (images.empty()) throw DataError("emit_grid: no images");
  if (cols < 1) throw DataError("emit_grid: cols must be >= 1");
  const int c = images.front().channels();
  const int h = images.front().height();
  const int w = images.front().width();
  if (c != 1 && c != 3) throw DataError("emit_grid: only 1- or 3-channel images are supported");
  for (const auto& img : images) {
    if (img.channels() != c || img.height() != h || img.width() != w) throw DataError("emit_grid: mixed image shapes");
  }
  cols = std::min<int>(cols, static_cast<int>(images.size()));
  const int rows = (static_cast<int>(images.size()) + cols - 1) / cols;
  const int gw = cols * w;
  const int gh = rows * h;
  const std::string head = std::string(c == 1 ? "P5" : "P6") + "\n" + std::to_string(gw) + " " + std::to_string(gh) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  const std::size_t start = out.size();
  out.resize(start + static_cast<std::size_t>(gw) * gh * c, to_pixel(0.0f));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int ty = static_cast<int>(i) / cols;
    const int tx = static_cast<int>(i) % cols;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t p = start + ((static_cast<std::size_t>(ty * h + y) * gw) + tx * w + x) * c + ch;
          out[p] = to_pixel(images[i](ch, y, x));
        }
  }
  return out;
}

void emit_grid(const std::vector<GridFunction<float>>& images, int cols, const std::string& path) {
  write_bytes(path, encode_grid(images, cols));
}

GridFunction<float> decode_pgm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    long v = 0;
    const std::size_t begin = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == begin || v <= 0 || v > 65535) throw DataError(std::string("pgm: bad ") + what);
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw DataError("pgm: expected binary P5 magic");
  pos = 2;
  const int width = number("width");
  const int height = number("height");
  const int maxval = number("maxval");
  if (maxval > 255) throw DataError("pgm: only 8-bit images are supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError("pgm: truncated header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos < n) throw DataError("pgm: truncated pixel data");
  GridFunction<float> g(1, height, width);
  for (std::size_t i = 0; i < n; ++i) {
    g.values()[static_cast<Eigen::Index>(i)] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval) * 2.0f - 1.0f;
  }
  return g;
}

GridFunction<float> load_pgm(const std::string& path) {
  try {
    return decode_pgm(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void emit_csv(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows,
              const std::string& path) {
  if (header.empty()) throw DataError("emit_csv: empty header for '" + path + "'");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const std::string& cell = cells[i];
      out << (i ? "," : "");
      if (cell.find_first_of(",\"\n") == std::string::npos) {
        out << cell;
        continue;
      }
      out << '"';
      for (char ch : cell) out << (ch == '"' ? "\"\"" : std::string(1, ch));
      out << '"';
    }
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size()) throw DataError("emit_csv: row width differs from header in '" + path + "'");
    line(r);
  }
  if (!out) throw DataError("write failed for '" + path + "'");
}

double mmd_metric(const std::vector<GridFunction<float>>& a, const std::vector<GridFunction<float>>& b, double bandwidth,
                  bool unbiased) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("mmd_metric: need at least 2 samples per set");
  if (!(bandwidth > 0.0)) throw std::invalid_argument("mmd_metric: bandwidth must be > 0");
  for (const auto& x : a)
    if (!x.same_shape(a.front())) throw std::invalid_argument("mmd_metric: mixed image shapes");
  for (const auto& x : b)
    if (!x.same_shape(a.front())) throw std::invalid_argument("mmd_metric: mixed image shapes");
  const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
  auto kern = [&](const GridFunction<float>& x, const GridFunction<float>& y) { return std::exp(-squared_distance(x, y) * inv); };

  auto within = [&](const std::vector<GridFunction<float>>& s) {
    double total = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = i + 1; j < s.size(); ++j) total += 2.0 * kern(s[i], s[j]);
    const double n = static_cast<double>(s.size());
    return unbiased ? total / (n * (n - 1.0)) : (total + n) / (n * n);
  };
  double cross = 0.0;
  for (const auto& x : a)
    for (const auto& y : b) cross += kern(x, y);
  cross /= static_cast<double>(a.size()) * static_cast<double>(b.size());
  return within(a) + within(b) - 2.0 * cross;
}

double median_pairwise_distance(const std::vector<GridFunction<float>>& set) {
  if (set.size() < 2) throw std::invalid_argument("median_pairwise_distance: need at least 2 samples");
  std::vector<double> d;
  for (std::size_t i = 0; i < set.size(); ++i)
    for (std::size_t j = i + 1; j < set.size(); ++j) d.push_back(std::sqrt(squared_distance(set[i], set[j])));
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

}  // namespace mflow
