#pragma once

// Small-image datasets: a procedural 10-class toy set plus loaders for two
// on-disk layouts.
//
// Binary batch file: a flat sequence of records, each one label byte
// followed by C*H*W pixel bytes in channel-major order (all of channel 0,
// then channel 1, ...). Record size fixes C, H and W, so they are passed in.
//
// Class folders: root/<class>/<image>.ppm with binary PPM (P6, maxval 255)
// images; classes are numbered in lexicographic folder order.
//
// Pixels are mapped from bytes to (v/255 - 0.5) / 0.25.

#include <algorithm>
#include <cmath>
#include <cctype>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "sgnas/errors.hpp"
#include "sgnas/random.hpp"
#include "sgnas/tensor.hpp"

namespace sgnas {

struct ImageSet {
  std::size_t channels = 3, height = 32, width = 32;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  Tensor batch(const std::vector<std::size_t>& idx) const {
    const std::size_t per = image_size();
    std::vector<float> v(idx.size() * per);
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                  v.begin() + static_cast<std::ptrdiff_t>(i * per));
    return Tensor::from({idx.size(), channels, height, width}, std::move(v));
  }

  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }

  void append(const ImageSet& other, std::size_t i) {
    const std::size_t per = image_size();
    pixels.insert(pixels.end(), other.pixels.begin() + static_cast<std::ptrdiff_t>(i * per),
                  other.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    labels.push_back(other.labels[i]);
  }
};

struct ToyDataset {
  ImageSet train, val, test;
  std::size_t class_count = 10;
};

struct ToyDatasetConfig {
  std::size_t class_count = 10;
  std::size_t resolution = 32;
  std::size_t train_per_class = 100;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 20;
  double noise = 0.3;
  std::uint64_t seed = 0;
};

namespace detail {

// Class c is an oriented sinusoidal grating with class-specific angle,
// frequency and colour mix; phase, contrast and pixel noise are random.
inline void draw_toy_image(const ToyDatasetConfig& cfg, int label, Rng& rng, std::vector<float>& out) {
  const std::size_t r = cfg.resolution;
  const double theta = std::numbers::pi * label / static_cast<double>(cfg.class_count);
  const double freq = 2.0 + static_cast<double>(label % 3);
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double amp = uniform(rng, 0.7, 1.3);
  const double colour[3] = {1.0, 0.5 + 0.5 * std::cos(label * 1.3), 0.5 + 0.5 * std::sin(label * 0.7)};
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < r; ++x) {
        const double u = (std::cos(theta) * static_cast<double>(x) + std::sin(theta) * static_cast<double>(y)) /
                         static_cast<double>(r);
        const double v = amp * colour[ch] * std::sin(2.0 * std::numbers::pi * freq * u + phase) +
                         normal(rng, 0.0, cfg.noise);
        out.push_back(static_cast<float>(v));
      }
}

}  // namespace detail

// Train and validation images come from one pool per class; validation takes
// val_per_class random members of each class pool, training keeps the rest.
inline ToyDataset make_toy_dataset(const ToyDatasetConfig& cfg) {
  if (cfg.class_count < 2 || cfg.resolution < 4 || cfg.train_per_class == 0)
    throw ContractError("toy dataset needs >= 2 classes, resolution >= 4 and training images");
  Rng rng(cfg.seed);
  ToyDataset ds;
  ds.class_count = cfg.class_count;
  for (ImageSet* s : {&ds.train, &ds.val, &ds.test}) {
    s->channels = 3;
    s->height = s->width = cfg.resolution;
  }
  ImageSet pool = ds.train;
  const std::size_t per_pool = cfg.train_per_class + cfg.val_per_class;
  for (std::size_t c = 0; c < cfg.class_count; ++c)
    for (std::size_t i = 0; i < per_pool; ++i) {
      detail::draw_toy_image(cfg, static_cast<int>(c), rng, pool.pixels);
      pool.labels.push_back(static_cast<int>(c));
    }
  for (std::size_t c = 0; c < cfg.class_count; ++c) {
    const auto perm = permutation(per_pool, rng);
    for (std::size_t j = 0; j < per_pool; ++j) {
      const std::size_t idx = c * per_pool + perm[j];
      (j < cfg.val_per_class ? ds.val : ds.train).append(pool, idx);
    }
  }
  // Interleave classes so that unshuffled prefixes stay balanced.
  auto interleave = [](ImageSet& s) {
    std::vector<std::size_t> order(s.size()), rank(s.size());
    std::vector<std::size_t> seen;
    for (std::size_t i = 0; i < order.size(); ++i) {
      order[i] = i;
      const auto lab = static_cast<std::size_t>(s.labels[i]);
      if (seen.size() <= lab) seen.resize(lab + 1, 0);
      rank[i] = seen[lab]++;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rank[a] < rank[b]; });
    ImageSet out = s;
    out.pixels.clear();
    out.labels.clear();
    for (auto i : order) out.append(s, i);
    s = std::move(out);
  };
  for (std::size_t c = 0; c < cfg.class_count; ++c)
    for (std::size_t i = 0; i < cfg.test_per_class; ++i) {
      detail::draw_toy_image(cfg, static_cast<int>(c), rng, ds.test.pixels);
      ds.test.labels.push_back(static_cast<int>(c));
    }
  interleave(ds.train);
  interleave(ds.val);
  interleave(ds.test);
  return ds;
}

// ---------------------------------------------------------------- on-disk formats

inline float byte_to_pixel(unsigned char b) { return (static_cast<float>(b) / 255.0f - 0.5f) / 0.25f; }

inline unsigned char pixel_to_byte(float v) {
  const double b = std::round((static_cast<double>(v) * 0.25 + 0.5) * 255.0);
  return static_cast<unsigned char>(std::clamp(b, 0.0, 255.0));
}

inline ImageSet load_binary_batches(const std::vector<std::filesystem::path>& files, std::size_t channels,
                                    std::size_t height, std::size_t width, std::size_t class_count) {
  ImageSet s;
  s.channels = channels;
  s.height = height;
  s.width = width;
  const std::size_t per = s.image_size();
  std::vector<char> record(per + 1);
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary);
    if (!is) throw FormatError("cannot open batch file " + f.string());
    std::size_t n = 0;
    while (is.read(record.data(), static_cast<std::streamsize>(record.size()))) {
      const int label = static_cast<unsigned char>(record[0]);
      if (static_cast<std::size_t>(label) >= class_count)
        throw FormatError(f.string() + ": record " + std::to_string(n) + " has label " +
                          std::to_string(label) + " outside " + std::to_string(class_count) + " classes");
      s.labels.push_back(label);
      for (std::size_t i = 0; i < per; ++i)
        s.pixels.push_back(byte_to_pixel(static_cast<unsigned char>(record[i + 1])));
      ++n;
    }
    if (is.gcount() != 0)
      throw FormatError(f.string() + ": trailing partial record after " + std::to_string(n) + " records");
  }
  return s;
}

inline void write_binary_batch(const std::filesystem::path& file, const ImageSet& s) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw FormatError("cannot write batch file " + file.string());
  const std::size_t per = s.image_size();
  for (std::size_t i = 0; i < s.size(); ++i) {
    os.put(static_cast<char>(s.labels[i]));
    for (std::size_t k = 0; k < per; ++k) os.put(static_cast<char>(pixel_to_byte(s.pixels[i * per + k])));
  }
}

namespace detail {

inline std::string ppm_token(std::istream& is) {
  std::string tok;
  char c;
  while (is.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(is, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok += c;
  }
  return tok;
}

}  // namespace detail

inline ImageSet load_class_folders(const std::filesystem::path& root, std::size_t height, std::size_t width) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw FormatError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) classes.push_back(e.path());
  std::sort(classes.begin(), classes.end());
  if (classes.empty()) throw FormatError("dataset root " + root.string() + " has no class folders");
  ImageSet s;
  s.channels = 3;
  s.height = height;
  s.width = width;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(classes[c]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") images.push_back(e.path());
    std::sort(images.begin(), images.end());
    for (const auto& img : images) {
      std::ifstream is(img, std::ios::binary);
      if (detail::ppm_token(is) != "P6") throw FormatError(img.string() + ": not a binary PPM");
      std::size_t w = 0, h = 0, maxval = 0;
      try {
        w = std::stoul(detail::ppm_token(is));
        h = std::stoul(detail::ppm_token(is));
        maxval = std::stoul(detail::ppm_token(is));
      } catch (const std::exception&) {
        throw FormatError(img.string() + ": malformed PPM header");
      }
      if (w != width || h != height || maxval != 255)
        throw FormatError(img.string() + ": expected " + std::to_string(width) + "x" + std::to_string(height) +
                          " with maxval 255");
      std::vector<unsigned char> raw(w * h * 3);
      is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
      if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw FormatError(img.string() + ": truncated");
      // PPM is pixel-interleaved; store channel-major.
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t p = 0; p < w * h; ++p) s.pixels.push_back(byte_to_pixel(raw[p * 3 + ch]));
      s.labels.push_back(static_cast<int>(c));
    }
  }
  return s;
}

inline void write_class_folders(const std::filesystem::path& root, const ImageSet& s) {
  namespace fs = std::filesystem;
  const std::size_t hw = s.height * s.width;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "class_%03d", s.labels[i]);
    const fs::path dir = root / name;
    fs::create_directories(dir);
    char file[32];
    std::snprintf(file, sizeof file, "%06zu.ppm", i);
    std::ofstream os(dir / file, std::ios::binary);
    os << "P6\n" << s.width << ' ' << s.height << "\n255\n";
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < 3; ++ch) os.put(static_cast<char>(pixel_to_byte(s.pixels[i * s.image_size() + ch * hw + p])));
  }
}

}  // namespace sgnas
