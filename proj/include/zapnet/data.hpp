#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "zapnet/errors.hpp"
#include "zapnet/random.hpp"
#include "zapnet/tensor.hpp"

namespace zapnet {

// Classes x examples image store. Pixels are kept as 8-bit levels in
// row-major H x W x C order; the float view is level / 255.
struct FewShotDataset {
  std::vector<std::string> class_names;
  std::size_t n_per_class = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  std::size_t n_classes() const noexcept { return class_names.size(); }
  std::size_t image_size() const noexcept { return height * width * channels; }

  std::span<const std::uint8_t> image(std::size_t cls, std::size_t example) const {
    return std::span<const std::uint8_t>(pixels).subspan(
        (cls * n_per_class + example) * image_size(), image_size());
  }

  /// Float image in [0,1], H x W x C.
  Tensor<float> image_tensor(std::size_t cls, std::size_t example) const {
    Tensor<float> t(Shape{height, width, channels});
    const auto px = image(cls, example);
    for (std::size_t i = 0; i < px.size(); ++i) t[i] = static_cast<float>(px[i]) / 255.0f;
    return t;
  }

  friend bool operator==(const FewShotDataset&, const FewShotDataset&) = default;
};

struct SplitSpec {
  std::size_t n_train = 15;
  std::size_t n_test = 5;
  std::uint64_t seed = 0;
};

/// One (class position within a view, example index) pair.
struct Item {
  std::size_t label = 0;
  std::size_t example = 0;
  friend bool operator==(const Item&, const Item&) = default;
};

// A subset of a dataset's classes and examples. Labels are positions in
// `classes`, so a view over dataset classes {30..49} has labels 0..19.
struct DataView {
  const FewShotDataset* data = nullptr;
  std::vector<std::size_t> classes;
  std::vector<std::vector<std::size_t>> examples;

  std::size_t n_classes() const noexcept { return classes.size(); }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& e : examples) n += e.size();
    return n;
  }

  /// Every item, class-major in split order.
  std::vector<Item> items() const {
    std::vector<Item> out;
    for (std::size_t c = 0; c < classes.size(); ++c)
      for (std::size_t e : examples[c]) out.push_back({c, e});
    return out;
  }

  /// The view restricted to class positions [first, first + count).
  DataView class_range(std::size_t first, std::size_t count) const {
    if (first + count > classes.size()) {
      throw ConfigError("class range [" + std::to_string(first) + ", " +
                        std::to_string(first + count) + ") exceeds " +
                        std::to_string(classes.size()) + " classes");
    }
    DataView v{data, {}, {}};
    v.classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(first),
                     classes.begin() + static_cast<std::ptrdiff_t>(first + count));
    v.examples.assign(examples.begin() + static_cast<std::ptrdiff_t>(first),
                      examples.begin() + static_cast<std::ptrdiff_t>(first + count));
    return v;
  }
};

inline DataView full_view(const FewShotDataset& ds) {
  DataView v{&ds, {}, {}};
  for (std::size_t c = 0; c < ds.n_classes(); ++c) {
    v.classes.push_back(c);
    std::vector<std::size_t> ex(ds.n_per_class);
    std::iota(ex.begin(), ex.end(), std::size_t{0});
    v.examples.push_back(std::move(ex));
  }
  return v;
}

/// Assembles an NCHW float batch and its labels.
template <typename T = float>
std::pair<Tensor<T>, std::vector<std::size_t>> make_batch(const DataView& view,
                                                           std::span<const Item> items) {
  const FewShotDataset& ds = *view.data;
  const std::size_t h = ds.height, w = ds.width, c = ds.channels;
  Tensor<T> batch(Shape{items.size(), c, h, w});
  std::vector<std::size_t> labels(items.size());
  T* out = batch.data().data();
  for (std::size_t n = 0; n < items.size(); ++n) {
    const auto px = ds.image(view.classes.at(items[n].label), items[n].example);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          out[((n * c + ch) * h + y) * w + x] =
              static_cast<T>(static_cast<float>(px[(y * w + x) * c + ch]) / 255.0f);
    labels[n] = items[n].label;
  }
  return {std::move(batch), std::move(labels)};
}

/// Deterministic per-class train/test split.
inline std::pair<DataView, DataView> split(const FewShotDataset& ds, const SplitSpec& spec) {
  if (spec.n_train + spec.n_test > ds.n_per_class) {
    throw ConfigError("split needs " + std::to_string(spec.n_train + spec.n_test) +
                      " examples per class, dataset has " + std::to_string(ds.n_per_class));
  }
  DataView train{&ds, {}, {}}, test{&ds, {}, {}};
  Rng rng(spec.seed);
  for (std::size_t c = 0; c < ds.n_classes(); ++c) {
    std::vector<std::size_t> idx(ds.n_per_class);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx.begin(), idx.end());
    train.classes.push_back(c);
    test.classes.push_back(c);
    train.examples.emplace_back(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
    test.examples.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(spec.n_train),
                               idx.begin() + static_cast<std::ptrdiff_t>(spec.n_train + spec.n_test));
  }
  return {std::move(train), std::move(test)};
}

/// All items of the view shuffled with the epoch seed and chunked; the last
/// batch may be short.
inline std::vector<std::vector<Item>> iid_batches(const DataView& view, std::size_t batch_size,
                                                  std::uint64_t epoch_seed) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  std::vector<Item> all = view.items();
  if (all.empty()) throw ConfigError("cannot batch an empty view");
  Rng rng(epoch_seed);
  rng.shuffle(all.begin(), all.end());
  std::vector<std::vector<Item>> out;
  for (std::size_t i = 0; i < all.size(); i += batch_size) {
    out.emplace_back(all.begin() + static_cast<std::ptrdiff_t>(i),
                     all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), i + batch_size)));
  }
  return out;
}

/// Order in which classes (tasks) of a view are presented.
struct TaskOrder {
  std::vector<std::size_t> order;
  std::uint64_t seed = 0;
};

inline TaskOrder make_task_order(std::size_t n_tasks, std::uint64_t seed) {
  TaskOrder t{std::vector<std::size_t>(n_tasks), seed};
  std::iota(t.order.begin(), t.order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(t.order.begin(), t.order.end());
  return t;
}

/// Single examples, class by class in task order, examples in split order.
inline std::vector<Item> sequential_stream(const DataView& view, const TaskOrder& order) {
  if (order.order.size() != view.n_classes()) {
    throw ConfigError("task order covers " + std::to_string(order.order.size()) +
                      " tasks but the view has " + std::to_string(view.n_classes()) + " classes");
  }
  std::vector<bool> seen(view.n_classes(), false);
  std::vector<Item> out;
  for (std::size_t c : order.order) {
    if (c >= view.n_classes() || seen[c]) throw ConfigError("task order is not a permutation");
    seen[c] = true;
    for (std::size_t e : view.examples[c]) out.push_back({c, e});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic stroke characters

namespace detail {

struct Point {
  double x, y;
};

inline double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

/// Classes come in alphabets of 10 that draw their strokes from a shared pool,
/// so characters of one alphabet look alike. Each example redraws the class
/// strokes under a random rotation, scale and shift, with control-point jitter
/// and stroke width variation, roughly like different people drawing it.
inline FewShotDataset make_synthetic(std::size_t n_classes, std::size_t n_per_class,
                                     std::size_t size, std::uint64_t seed) {
  if (n_classes == 0 || n_per_class == 0 || size == 0) {
    throw ConfigError("synthetic dataset counts must be positive");
  }
  using detail::Point;
  using Stroke = std::vector<Point>;
  constexpr std::size_t kAlphabet = 10, kPool = 6;
  FewShotDataset ds;
  ds.n_per_class = n_per_class;
  ds.height = ds.width = size;
  ds.channels = 1;
  ds.pixels.assign(n_classes * n_per_class * size * size, 0);
  const double s = static_cast<double>(size);
  const double centre = s / 2;

  std::vector<Stroke> pool;
  for (std::size_t c = 0; c < n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%04zu", c);
    ds.class_names.emplace_back(name);

    if (c % kAlphabet == 0) {
      Rng alpha(derive_seed(seed, Stream::synthetic, (std::uint64_t{1} << 50) + c / kAlphabet));
      pool.assign(kPool, {});
      for (auto& stroke : pool) {
        stroke.resize(2 + alpha.below(3));
        for (auto& p : stroke) p = {alpha.uniform(0.15, 0.85) * s, alpha.uniform(0.15, 0.85) * s};
      }
    }
    Rng proto(derive_seed(seed, Stream::synthetic, c));
    std::vector<std::size_t> picks(kPool);
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    proto.shuffle(picks.begin(), picks.end());
    std::vector<Stroke> strokes;
    for (std::size_t k = 0, n = 2 + proto.below(2); k < n; ++k) {
      Stroke stroke = pool[picks[k]];
      for (auto& p : stroke) {
        p.x += proto.normal() * 0.06 * s;
        p.y += proto.normal() * 0.06 * s;
      }
      strokes.push_back(std::move(stroke));
    }

    for (std::size_t e = 0; e < n_per_class; ++e) {
      Rng jit(derive_seed(seed, Stream::synthetic, (std::uint64_t{1} << 40) + c * n_per_class + e));
      const double shift_x = jit.uniform(-2, 2) * s / 28.0, shift_y = jit.uniform(-2, 2) * s / 28.0;
      const double angle = jit.uniform(-0.25, 0.25), scale = jit.uniform(0.85, 1.15);
      const double ca = std::cos(angle) * scale, sa = std::sin(angle) * scale;
      const double half_width = jit.uniform(0.6, 1.1) * s / 28.0;
      std::vector<Stroke> drawn = strokes;
      for (auto& stroke : drawn)
        for (auto& p : stroke) {
          const double x = p.x - centre + jit.normal() * 0.05 * s;
          const double y = p.y - centre + jit.normal() * 0.05 * s;
          p = {centre + ca * x - sa * y + shift_x, centre + sa * x + ca * y + shift_y};
        }
      std::uint8_t* img = ds.pixels.data() + (c * n_per_class + e) * size * size;
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const Point p{static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5};
          double d = 1e9;
          for (const auto& stroke : drawn)
            for (std::size_t k = 0; k + 1 < stroke.size(); ++k)
              d = std::min(d, detail::segment_distance(p, stroke[k], stroke[k + 1]));
          const double v = std::clamp(1.0 - (d - half_width), 0.0, 1.0);
          img[y * size + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Binary format: "ZAPDATA1" | u32 n_classes | u32 n_per_class | u32 height |
// u32 width | u32 channels | u8 pixels (class, example, row, col, channel).
// All integers little-endian.

inline constexpr std::array<char, 8> kDatasetMagic{'Z', 'A', 'P', 'D', 'A', 'T', 'A', '1'};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("error reading " + path.string());
  return s;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("error writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace detail

inline std::string encode_dataset(const FewShotDataset& ds) {
  std::string out(kDatasetMagic.begin(), kDatasetMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(ds.n_classes()));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.n_per_class));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.height));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.width));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.channels));
  out.append(reinterpret_cast<const char*>(ds.pixels.data()), ds.pixels.size());
  return out;
}

inline FewShotDataset decode_dataset(const std::string& bytes) {
  if (bytes.size() < 8 || !std::equal(kDatasetMagic.begin(), kDatasetMagic.end(), bytes.begin())) {
    throw FormatError("bad magic: not a ZAPDATA1 dataset file");
  }
  std::size_t pos = 8;
  FewShotDataset ds;
  const std::size_t n_classes = detail::get_u32(bytes, pos);
  ds.n_per_class = detail::get_u32(bytes, pos);
  ds.height = detail::get_u32(bytes, pos);
  ds.width = detail::get_u32(bytes, pos);
  ds.channels = detail::get_u32(bytes, pos);
  const std::size_t payload = n_classes * ds.n_per_class * ds.image_size();
  if (bytes.size() - pos != payload) {
    throw FormatError("dataset payload has " + std::to_string(bytes.size() - pos) +
                      " bytes, header implies " + std::to_string(payload));
  }
  ds.pixels.assign(reinterpret_cast<const std::uint8_t*>(bytes.data()) + pos,
                   reinterpret_cast<const std::uint8_t*>(bytes.data()) + bytes.size());
  for (std::size_t c = 0; c < n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%04zu", c);
    ds.class_names.emplace_back(name);
  }
  return ds;
}

inline void save_dataset(const FewShotDataset& ds, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_dataset(ds));
}

namespace detail {

// Decodes any PNG to 8-bit grayscale.
inline std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path,
                                               std::size_t& height, std::size_t& width) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError("unreadable image " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("unreadable image " + path.string() + ": " + image.message);
  }
  height = image.height;
  width = image.width;
  return buf;
}

inline std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& src,
                                                std::size_t sh, std::size_t sw, std::size_t th,
                                                std::size_t tw) {
  std::vector<std::uint8_t> out(th * tw);
  for (std::size_t y = 0; y < th; ++y)
    for (std::size_t x = 0; x < tw; ++x) out[y * tw + x] = src[(y * sh / th) * sw + x * sw / tw];
  return out;
}

}  // namespace detail

/// Writes one 8-bit grayscale PNG.
inline void write_png_gray(const std::filesystem::path& path, std::span<const std::uint8_t> pixels,
                           std::size_t height, std::size_t width) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, pixels.data(), 0, nullptr)) {
    throw IoError("cannot write image " + path.string() + ": " + image.message);
  }
}

/// Loads a ZAPDATA1 file, or a directory of class_name/*.png folders whose
/// images are resized (nearest neighbour) to target_size x target_size.
/// A target_size of zero keeps the stored resolution of a binary file.
inline FewShotDataset load_dataset(const std::filesystem::path& path, std::size_t target_size) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw IoError("dataset path does not exist: " + path.string());
  if (!fs::is_directory(path)) {
    FewShotDataset ds = decode_dataset(detail::read_file(path));
    if (target_size == 0 || (ds.height == target_size && ds.width == target_size)) return ds;
    FewShotDataset out = ds;
    out.height = out.width = target_size;
    out.pixels.clear();
    for (std::size_t c = 0; c < ds.n_classes(); ++c)
      for (std::size_t e = 0; e < ds.n_per_class; ++e) {
        for (std::size_t ch = 0; ch < ds.channels; ++ch) {
          std::vector<std::uint8_t> plane(ds.height * ds.width);
          const auto px = ds.image(c, e);
          for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = px[i * ds.channels + ch];
          auto r = detail::resize_nearest(plane, ds.height, ds.width, target_size, target_size);
          if (ch == 0) out.pixels.resize(out.pixels.size() + r.size() * ds.channels);
          std::uint8_t* dst = out.pixels.data() + out.pixels.size() - r.size() * ds.channels;
          for (std::size_t i = 0; i < r.size(); ++i) dst[i * ds.channels + ch] = r[i];
        }
      }
    return out;
  }

  if (target_size == 0) throw ConfigError("PNG folder ingestion needs a target size");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(path))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError("no class folders in " + path.string());

  std::vector<std::vector<fs::path>> files(class_dirs.size());
  std::map<std::size_t, std::size_t> count_freq;
  for (std::size_t i = 0; i < class_dirs.size(); ++i) {
    for (const auto& entry : fs::directory_iterator(class_dirs[i]))
      if (entry.is_regular_file() && entry.path().extension() == ".png")
        files[i].push_back(entry.path());
    std::sort(files[i].begin(), files[i].end());
    ++count_freq[files[i].size()];
  }
  // The most common count is taken as the expected one, so the error names
  // the odd class out.
  const std::size_t expected =
      std::max_element(count_freq.begin(), count_freq.end(),
                       [](const auto& a, const auto& b) { return a.second < b.second; })
          ->first;
  for (std::size_t i = 0; i < class_dirs.size(); ++i) {
    if (files[i].size() != expected) {
      throw IoError("class '" + class_dirs[i].filename().string() + "' has " +
                    std::to_string(files[i].size()) + " images, expected " +
                    std::to_string(expected));
    }
  }

  FewShotDataset ds;
  ds.height = ds.width = target_size;
  ds.channels = 1;
  ds.n_per_class = expected;
  for (std::size_t i = 0; i < class_dirs.size(); ++i) {
    ds.class_names.push_back(class_dirs[i].filename().string());
    for (const auto& f : files[i]) {
      std::size_t h = 0, w = 0;
      auto gray = detail::read_png_gray(f, h, w);
      auto r = detail::resize_nearest(gray, h, w, target_size, target_size);
      ds.pixels.insert(ds.pixels.end(), r.begin(), r.end());
    }
  }
  if (ds.n_per_class == 0) throw IoError("class folders in " + path.string() + " contain no images");
  return ds;
}

}  // namespace zapnet
