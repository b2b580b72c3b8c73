#pragma once

// Search space of the unified supernet: macro-architecture, candidate
// sub-block operations, canonical (forced-sampling) architecture encodings,
// enumeration and the sampling distributions used for supernet training.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sgnas/errors.hpp"
#include "sgnas/random.hpp"

namespace sgnas {

enum class LayerKind { FixedConv, FixedMB1, Unified, AvgPool, Classifier };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::FixedConv: return "conv";
    case LayerKind::FixedMB1: return "mb1";
    case LayerKind::Unified: return "unified";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Classifier: return "fc";
  }
  return "?";
}

// One block of the macro-architecture after expanding Table-style rows (a
// row with N blocks becomes N LayerSpecs; only the first keeps the stride).
struct LayerSpec {
  LayerKind kind = LayerKind::Unified;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  std::size_t kernel = 3;  // FixedConv / FixedMB1 only
  bool searchable() const { return kind == LayerKind::Unified; }
  bool operator==(const LayerSpec&) const = default;
};

// Per searchable layer, one op index per sub-block slot.
using LayerConfig = std::vector<int>;

struct ArchEncoding {
  std::vector<LayerConfig> layers;
  auto operator<=>(const ArchEncoding&) const = default;
};

struct SearchSpaceSpec {
  std::vector<LayerSpec> layers;
  std::vector<int> kernels{3, 5, 7};  // candidate depthwise kernel sizes
  int e_min = 2;
  int e_max = 6;
  std::size_t input_resolution = 224;
  std::size_t input_channels = 3;
  std::size_t class_count = 1000;

  bool has_skip() const { return e_min < e_max; }
  // Ops are the kernels in listed order, then SKIP when present.
  std::size_t op_count() const { return kernels.size() + (has_skip() ? 1 : 0); }
  int skip_op() const { return has_skip() ? static_cast<int>(kernels.size()) : -1; }
  bool is_skip(int op) const { return has_skip() && op == skip_op(); }
  std::size_t slots() const { return static_cast<std::size_t>(e_max); }
  std::size_t max_skips() const { return static_cast<std::size_t>(e_max - e_min); }

  std::vector<std::size_t> searchable_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].searchable()) idx.push_back(i);
    return idx;
  }
  std::size_t searchable_count() const { return searchable_indices().size(); }

  std::string op_name(int op) const {
    if (is_skip(op)) return "SKIP";
    if (op < 0 || op >= static_cast<int>(kernels.size()))
      throw ValidityError("op index " + std::to_string(op) + " outside candidate set");
    return "K" + std::to_string(kernels[static_cast<std::size_t>(op)]);
  }

  int parse_op(std::string_view name) const {
    if (name == "SKIP") {
      if (!has_skip()) throw FormatError("SKIP is not a candidate when e_min == e_max");
      return skip_op();
    }
    if (name.size() >= 2 && name[0] == 'K') {
      const int k = std::stoi(std::string(name.substr(1)));
      for (std::size_t i = 0; i < kernels.size(); ++i)
        if (kernels[i] == k) return static_cast<int>(i);
    }
    throw FormatError("unknown op name '" + std::string(name) + "'");
  }

  void validate() const {
    if (e_min < 1 || e_min > e_max)
      throw ValidityError("expansion bounds must satisfy 1 <= e_min <= e_max");
    if (kernels.empty()) throw ValidityError("no candidate kernel sizes");
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      if (kernels[i] < 1 || kernels[i] % 2 == 0)
        throw ValidityError("kernel sizes must be odd and positive");
      for (std::size_t j = 0; j < i; ++j)
        if (kernels[i] == kernels[j]) throw ValidityError("duplicate kernel size");
    }
    if (input_resolution == 0 || input_channels == 0 || class_count == 0)
      throw ValidityError("input resolution, channels and class count must be positive");
    if (layers.empty()) throw ValidityError("empty macro-architecture");
    for (const auto& l : layers) {
      if (l.stride == 0) throw ValidityError("stride must be positive");
      if (l.kind != LayerKind::AvgPool && l.out_channels == 0)
        throw ValidityError(std::string(layer_kind_name(l.kind)) + " layer needs channels");
      if ((l.kind == LayerKind::FixedConv || l.kind == LayerKind::FixedMB1) && l.kernel % 2 == 0)
        throw ValidityError("fixed layer kernel must be odd");
    }
    if (searchable_count() == 0) throw ValidityError("no searchable layers");
  }

  bool operator==(const SearchSpaceSpec&) const = default;

  // ---------------------------------------------------------------- text form

  // key = value lines plus one `layer <kind> <C> <N> <S> [K]` line per row.
  std::string to_text() const {
    std::ostringstream os;
    os << "input_resolution = " << input_resolution << "\n";
    os << "input_channels = " << input_channels << "\n";
    os << "class_count = " << class_count << "\n";
    os << "e_min = " << e_min << "\n";
    os << "e_max = " << e_max << "\n";
    os << "kernels = ";
    for (std::size_t i = 0; i < kernels.size(); ++i) os << (i ? "," : "") << kernels[i];
    os << "\n";
    // Re-fold consecutive identical blocks into rows.
    for (std::size_t i = 0; i < layers.size();) {
      const auto& first = layers[i];
      std::size_t n = 1;
      LayerSpec repeat = first;
      repeat.stride = 1;
      const bool stackable = first.kind != LayerKind::AvgPool && first.kind != LayerKind::Classifier;
      while (stackable && i + n < layers.size() && layers[i + n] == repeat) ++n;
      os << "layer " << layer_kind_name(first.kind) << ' ' << first.out_channels << ' ' << n
         << ' ' << first.stride;
      if (first.kind == LayerKind::FixedConv || first.kind == LayerKind::FixedMB1)
        os << ' ' << first.kernel;
      os << "\n";
      i += n;
    }
    return os.str();
  }

  static SearchSpaceSpec from_text(std::string_view text) {
    SearchSpaceSpec spec;
    spec.layers.clear();
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
      throw FormatError("space config line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string head;
      if (!(ls >> head)) continue;
      if (head == "layer") {
        std::string kind;
        long c = -1, n = -1, s = -1, k = 3;
        if (!(ls >> kind >> c >> n >> s)) fail("expected: layer <kind> <C> <N> <S> [K]");
        if (long kk; ls >> kk) k = kk;
        if (n < 1 || s < 1 || c < 0 || k < 1) fail("non-positive layer field");
        LayerSpec l;
        if (kind == "conv") l.kind = LayerKind::FixedConv;
        else if (kind == "mb1") l.kind = LayerKind::FixedMB1;
        else if (kind == "unified") l.kind = LayerKind::Unified;
        else if (kind == "avgpool") l.kind = LayerKind::AvgPool;
        else if (kind == "fc") l.kind = LayerKind::Classifier;
        else fail("unknown layer kind '" + kind + "'");
        l.out_channels = static_cast<std::size_t>(c);
        l.kernel = static_cast<std::size_t>(k);
        for (long b = 0; b < n; ++b) {
          l.stride = b == 0 ? static_cast<std::size_t>(s) : 1;
          spec.layers.push_back(l);
        }
        continue;
      }
      std::string eq, value;
      if (!(ls >> eq >> value) || eq != "=") fail("expected: key = value");
      try {
        if (head == "input_resolution") spec.input_resolution = std::stoul(value);
        else if (head == "input_channels") spec.input_channels = std::stoul(value);
        else if (head == "class_count") spec.class_count = std::stoul(value);
        else if (head == "e_min") spec.e_min = std::stoi(value);
        else if (head == "e_max") spec.e_max = std::stoi(value);
        else if (head == "kernels") {
          spec.kernels.clear();
          std::istringstream ks(value);
          std::string tok;
          while (std::getline(ks, tok, ',')) spec.kernels.push_back(std::stoi(tok));
        } else fail("unknown key '" + head + "'");
      } catch (const std::invalid_argument&) {
        fail("bad value '" + value + "' for " + head);
      } catch (const std::out_of_range&) {
        fail("value out of range for " + head);
      }
    }
    spec.validate();
    return spec;
  }

  // FNV-1a over the canonical text form; stamps checkpoints and tables.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : to_text()) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    return h;
  }

  // ---------------------------------------------------------------- presets

  // Macro-architecture of the unified supernet at 224x224. The 320->1280 row
  // is held fixed as a 1x1 head so that 19 layers remain searchable.
  static SearchSpaceSpec imagenet() {
    return from_text(
        "input_resolution = 224\ninput_channels = 3\nclass_count = 1000\n"
        "e_min = 2\ne_max = 6\nkernels = 3,5,7\n"
        "layer conv 32 1 2 3\n"
        "layer mb1 16 1 1 3\n"
        "layer unified 32 2 2\n"
        "layer unified 40 4 2\n"
        "layer unified 80 4 2\n"
        "layer unified 96 4 1\n"
        "layer unified 192 4 2\n"
        "layer unified 320 1 1\n"
        "layer conv 1280 1 1 1\n"
        "layer avgpool 0 1 1\n"
        "layer fc 1000 1 1\n");
  }

  // MobileNetV2 layout expressed in the same block vocabulary.
  static SearchSpaceSpec mobilenet_v2() {
    return from_text(
        "input_resolution = 224\ninput_channels = 3\nclass_count = 1000\n"
        "e_min = 2\ne_max = 6\nkernels = 3,5,7\n"
        "layer conv 32 1 2 3\n"
        "layer mb1 16 1 1 3\n"
        "layer unified 24 2 2\n"
        "layer unified 32 3 2\n"
        "layer unified 64 4 2\n"
        "layer unified 96 3 1\n"
        "layer unified 160 3 2\n"
        "layer unified 320 1 1\n"
        "layer conv 1280 1 1 1\n"
        "layer avgpool 0 1 1\n"
        "layer fc 1000 1 1\n");
  }

  // Reduced profile for CPU training: 32x32 input, quarter widths, 5
  // searchable layers, 10 classes.
  static SearchSpaceSpec desk() {
    return from_text(
        "input_resolution = 32\ninput_channels = 3\nclass_count = 10\n"
        "e_min = 2\ne_max = 6\nkernels = 3,5,7\n"
        "layer conv 8 1 2 3\n"
        "layer mb1 4 1 1 3\n"
        "layer unified 8 2 2\n"
        "layer unified 12 2 2\n"
        "layer unified 24 1 1\n"
        "layer conv 64 1 1 1\n"
        "layer avgpool 0 1 1\n"
        "layer fc 10 1 1\n");
  }
};

// ---------------------------------------------------------------- canonical form

namespace detail {
// Sort key: larger kernels first, SKIP last.
inline int canonical_rank(const SearchSpaceSpec& spec, int op) {
  if (spec.is_skip(op)) return 1 << 20;
  return -spec.kernels[static_cast<std::size_t>(op)];
}
}  // namespace detail

inline std::size_t skip_count(const SearchSpaceSpec& spec, const LayerConfig& cfg) {
  return static_cast<std::size_t>(
      std::count_if(cfg.begin(), cfg.end(), [&](int op) { return spec.is_skip(op); }));
}

// Realised expansion rate: number of non-SKIP sub-blocks.
inline int expansion_of(const SearchSpaceSpec& spec, const LayerConfig& cfg) {
  return static_cast<int>(cfg.size() - skip_count(spec, cfg));
}

inline void check_layer_ops(const SearchSpaceSpec& spec, const LayerConfig& cfg) {
  if (cfg.size() != spec.slots())
    throw ValidityError("layer has " + std::to_string(cfg.size()) + " sub-blocks, expected " +
                        std::to_string(spec.slots()));
  for (int op : cfg)
    if (op < 0 || op >= static_cast<int>(spec.op_count()))
      throw ValidityError("op index " + std::to_string(op) + " outside candidate set");
  if (skip_count(spec, cfg) > spec.max_skips())
    throw ValidityError("layer has " + std::to_string(skip_count(spec, cfg)) +
                        " SKIP sub-blocks, at most " + std::to_string(spec.max_skips()) +
                        " allowed");
}

inline LayerConfig canonicalize_layer(const SearchSpaceSpec& spec, LayerConfig cfg) {
  check_layer_ops(spec, cfg);
  std::stable_sort(cfg.begin(), cfg.end(), [&](int a, int b) {
    return detail::canonical_rank(spec, a) < detail::canonical_rank(spec, b);
  });
  return cfg;
}

inline ArchEncoding canonicalize(const SearchSpaceSpec& spec, ArchEncoding raw) {
  if (raw.layers.size() != spec.searchable_count())
    throw ValidityError("encoding has " + std::to_string(raw.layers.size()) +
                        " layers, space has " + std::to_string(spec.searchable_count()));
  for (auto& cfg : raw.layers) cfg = canonicalize_layer(spec, std::move(cfg));
  return raw;
}

inline bool is_canonical(const SearchSpaceSpec& spec, const ArchEncoding& a) {
  try {
    return canonicalize(spec, a) == a;
  } catch (const ValidityError&) {
    return false;
  }
}

// Throws ValidityError unless `a` is a canonical member of the space.
inline void require_valid(const SearchSpaceSpec& spec, const ArchEncoding& a) {
  if (canonicalize(spec, a) != a) throw ValidityError("encoding is not in canonical order");
}

// ---------------------------------------------------------------- enumeration

// All canonical per-layer configurations: for each expansion e in
// [e_min, e_max], every multiset of e kernels, padded with SKIPs.
inline std::vector<LayerConfig> enumerate_layer_configs(const SearchSpaceSpec& spec) {
  std::vector<LayerConfig> out;
  const int k = static_cast<int>(spec.kernels.size());
  // Kernel op indices in canonical (descending size) order.
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return detail::canonical_rank(spec, a) < detail::canonical_rank(spec, b);
  });
  for (int e = spec.e_min; e <= spec.e_max; ++e) {
    // Non-decreasing index sequences over `order` of length e.
    std::vector<int> pick(static_cast<std::size_t>(e), 0);
    while (true) {
      LayerConfig cfg;
      for (int p : pick) cfg.push_back(order[static_cast<std::size_t>(p)]);
      while (cfg.size() < spec.slots()) cfg.push_back(spec.skip_op());
      out.push_back(std::move(cfg));
      int pos = e - 1;
      while (pos >= 0 && pick[static_cast<std::size_t>(pos)] == k - 1) --pos;
      if (pos < 0) break;
      const int v = pick[static_cast<std::size_t>(pos)] + 1;
      for (int q = pos; q < e; ++q) pick[static_cast<std::size_t>(q)] = v;
    }
  }
  return out;
}

inline double binomial(int n, int r) {
  if (r < 0 || r > n) return 0.0;
  double v = 1.0;
  for (int i = 1; i <= r; ++i) v = v * (n - r + i) / i;
  return v;
}

// Closed form of enumerate_layer_configs(spec).size().
inline std::size_t layer_config_count(const SearchSpaceSpec& spec) {
  const int k = static_cast<int>(spec.kernels.size());
  double total = 0.0;
  for (int e = spec.e_min; e <= spec.e_max; ++e) total += binomial(e + k - 1, k - 1);
  return static_cast<std::size_t>(std::llround(total));
}

// Natural log of the number of canonical architectures.
inline double space_size_log(const SearchSpaceSpec& spec) {
  return static_cast<double>(spec.searchable_count()) *
         std::log(static_cast<double>(layer_config_count(spec)));
}

// Calls fn(encoding) for every canonical architecture, in mixed-radix order
// over enumerate_layer_configs (last layer fastest).
template <typename Fn>
void for_each_architecture(const SearchSpaceSpec& spec, Fn&& fn) {
  const auto configs = enumerate_layer_configs(spec);
  const std::size_t layers = spec.searchable_count();
  std::vector<std::size_t> digit(layers, 0);
  ArchEncoding a;
  a.layers.assign(layers, configs.front());
  while (true) {
    for (std::size_t l = 0; l < layers; ++l) a.layers[l] = configs[digit[l]];
    fn(static_cast<const ArchEncoding&>(a));
    std::size_t pos = layers;
    while (pos > 0) {
      --pos;
      if (++digit[pos] < configs.size()) break;
      digit[pos] = 0;
      if (pos == 0) return;
    }
  }
}

// ---------------------------------------------------------------- sampling

// Uniform over canonical layer configurations, independently per layer.
inline ArchEncoding sample_uniform(const SearchSpaceSpec& spec, Rng& rng) {
  const auto configs = enumerate_layer_configs(spec);
  ArchEncoding a;
  for (std::size_t l = 0; l < spec.searchable_count(); ++l)
    a.layers.push_back(configs[uniform_index(rng, configs.size())]);
  return a;
}

struct FairStep {
  ArchEncoding raw;        // per-slot assignment actually drawn
  ArchEncoding canonical;  // forced-sampling form used for training
};

// Strict-fairness schedule: within a round of |ops| steps every (layer,
// sub-block, op) triple is activated exactly once, via an independent
// permutation per sub-block. Steps whose SKIP count would exceed the
// expansion bound are repaired by swapping a SKIP with a kernel op of the
// same sub-block from another step of the round, which preserves the counts.
class StrictFairnessSampler {
 public:
  StrictFairnessSampler(SearchSpaceSpec spec, std::size_t steps_per_round, Rng rng)
      : spec_(std::move(spec)), rng_(std::move(rng)) {
    if (steps_per_round != spec_.op_count())
      throw ContractError("strict fairness needs steps_per_round == |candidate ops| (" +
                          std::to_string(spec_.op_count()) + ")");
    if (spec_.has_skip() && spec_.op_count() * spec_.max_skips() < spec_.slots())
      throw ContractError("no step assignment satisfies the SKIP bound");
  }

  std::vector<FairStep> next_round() {
    const std::size_t steps = spec_.op_count(), layers = spec_.searchable_count(),
                      slots = spec_.slots();
    std::vector<ArchEncoding> raw(steps);
    for (auto& r : raw) r.layers.assign(layers, LayerConfig(slots, 0));
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t s = 0; s < slots; ++s) {
        const auto perm = permutation(steps, rng_);
        for (std::size_t j = 0; j < steps; ++j) raw[j].layers[l][s] = static_cast<int>(perm[j]);
      }
    if (spec_.has_skip()) {
      for (std::size_t l = 0; l < layers; ++l) repair_layer(raw, l);
    }
    std::vector<FairStep> out;
    for (auto& r : raw) out.push_back({r, canonicalize(spec_, r)});
    return out;
  }

  std::size_t repair_events() const { return repairs_; }
  const Rng& rng() const { return rng_; }

 private:
  void repair_layer(std::vector<ArchEncoding>& raw, std::size_t l) {
    const std::size_t steps = raw.size(), bound = spec_.max_skips();
    auto skips_at = [&](std::size_t j) { return skip_count(spec_, raw[j].layers[l]); };
    for (std::size_t j = 0; j < steps; ++j) {
      while (skips_at(j) > bound) {
        bool swapped = false;
        for (std::size_t s = 0; s < spec_.slots() && !swapped; ++s) {
          if (!spec_.is_skip(raw[j].layers[l][s])) continue;
          // Prefer a later step of the round, then an earlier one.
          for (std::size_t d = 1; d < steps && !swapped; ++d) {
            const std::size_t jj = (j + d) % steps;
            if (skips_at(jj) >= bound) continue;
            std::swap(raw[j].layers[l][s], raw[jj].layers[l][s]);
            ++repairs_;
            swapped = true;
          }
        }
        if (!swapped) throw ContractError("strict fairness repair failed");
      }
    }
  }

  SearchSpaceSpec spec_;
  Rng rng_;
  std::size_t repairs_ = 0;
};

// ---------------------------------------------------------------- random prior

// One-hot map of shape L x (e_max * |ops|), row-major.
struct RandomPrior {
  std::size_t layers = 0;
  std::size_t width = 0;
  std::vector<float> values;
};

inline RandomPrior encode_prior(const SearchSpaceSpec& spec, const ArchEncoding& a) {
  require_valid(spec, a);
  RandomPrior b;
  b.layers = a.layers.size();
  b.width = spec.slots() * spec.op_count();
  b.values.assign(b.layers * b.width, 0.0f);
  for (std::size_t l = 0; l < b.layers; ++l)
    for (std::size_t s = 0; s < spec.slots(); ++s)
      b.values[l * b.width + s * spec.op_count() + static_cast<std::size_t>(a.layers[l][s])] = 1.0f;
  return b;
}

inline ArchEncoding decode_prior(const SearchSpaceSpec& spec, const RandomPrior& b) {
  const std::size_t ops = spec.op_count();
  if (b.layers != spec.searchable_count() || b.width != spec.slots() * ops ||
      b.values.size() != b.layers * b.width)
    throw FormatError("prior shape " + std::to_string(b.layers) + "x" + std::to_string(b.width) +
                      " does not match the space");
  ArchEncoding a;
  for (std::size_t l = 0; l < b.layers; ++l) {
    LayerConfig cfg;
    for (std::size_t s = 0; s < spec.slots(); ++s) {
      int hot = -1;
      for (std::size_t o = 0; o < ops; ++o) {
        const float v = b.values[l * b.width + s * ops + o];
        if (v == 1.0f) {
          if (hot >= 0) throw FormatError("prior slot has more than one hot entry");
          hot = static_cast<int>(o);
        } else if (v != 0.0f) {
          throw FormatError("prior entries must be 0 or 1");
        }
      }
      if (hot < 0) throw FormatError("prior slot has no hot entry");
      cfg.push_back(hot);
    }
    a.layers.push_back(std::move(cfg));
  }
  return canonicalize(spec, std::move(a));
}

// ---------------------------------------------------------------- text forms

// One layer per line, comma-separated op names.
inline std::string encoding_to_text(const SearchSpaceSpec& spec, const ArchEncoding& a) {
  std::ostringstream os;
  for (const auto& cfg : a.layers) {
    for (std::size_t s = 0; s < cfg.size(); ++s) os << (s ? "," : "") << spec.op_name(cfg[s]);
    os << "\n";
  }
  return os.str();
}

inline ArchEncoding encoding_from_text(const SearchSpaceSpec& spec, std::string_view text) {
  ArchEncoding a;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line.erase(std::remove_if(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }),
               line.end());
    if (line.empty()) continue;
    LayerConfig cfg;
    std::istringstream ls(line);
    std::string tok;
    while (std::getline(ls, tok, ',')) cfg.push_back(spec.parse_op(tok));
    a.layers.push_back(std::move(cfg));
  }
  return canonicalize(spec, std::move(a));
}

// Single-token form for CSV cells: ops joined by '+', layers by '|'.
inline std::string encoding_to_compact(const SearchSpaceSpec& spec, const ArchEncoding& a) {
  std::string out;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (l) out += '|';
    for (std::size_t s = 0; s < a.layers[l].size(); ++s) {
      if (s) out += '+';
      out += spec.op_name(a.layers[l][s]);
    }
  }
  return out;
}

inline ArchEncoding encoding_from_compact(const SearchSpaceSpec& spec, std::string_view text) {
  std::string s(text);
  for (char& c : s) {
    if (c == '|') c = '\n';
    else if (c == '+') c = ',';
  }
  return encoding_from_text(spec, s);
}

}  // namespace sgnas
