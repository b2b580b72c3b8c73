#pragma once

// Tabular benchmarks: every canonical architecture of a small space mapped
// to accuracies and costs, with a portable CSV form, synthetic generation,
// and a differentiable expected-accuracy surrogate.
//
// File format: line 1 is '#' followed by a JSON object
//   {"format":"sgnas-tabular","version":1,"space":<space text>,
//    "accounting":"fixed_width"|"simulated_expansion","splits":["val","test"],
//    "rows":N,"checksum":"<fnv1a-64 hex of every line after line 1>"}
// line 2 is "encoding,val,test,flops,params", then one row per architecture
// with the compact encoding text. Numbers use shortest round-trip form.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgnas/cost_model.hpp"
#include "sgnas/ops.hpp"
#include "sgnas/search_space.hpp"

namespace sgnas {

enum class Split { Val, Test };

struct TabularRow {
  double val = 0.0, test = 0.0, flops = 0.0, params = 0.0;
  bool operator==(const TabularRow&) const = default;
  double accuracy(Split s) const { return s == Split::Val ? val : test; }
};

inline const char* accounting_name(Accounting a) {
  return a == Accounting::FixedWidth ? "fixed_width" : "simulated_expansion";
}

inline Accounting parse_accounting(const std::string& s) {
  if (s == "fixed_width") return Accounting::FixedWidth;
  if (s == "simulated_expansion") return Accounting::SimulatedExpansion;
  throw FormatError("unknown cost accounting '" + s + "'");
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

inline bool parse_double(std::string_view s, double& out) {
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && end == s.data() + s.size();
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

class TabularBench {
 public:
  TabularBench() = default;
  TabularBench(SearchSpaceSpec spec, Accounting accounting)
      : spec_(std::move(spec)), accounting_(accounting), configs_(enumerate_layer_configs(spec_)) {
    for (std::size_t i = 0; i < configs_.size(); ++i) config_index_[configs_[i]] = i;
    table_ = build_cost_table(spec_, accounting_);
    std::size_t n = 1;
    for (std::size_t l = 0; l < spec_.searchable_count(); ++l) {
      if (n > (std::size_t{1} << 32) / configs_.size())
        throw ContractError("space too large for a tabular benchmark");
      n *= configs_.size();
    }
    rows_.resize(n);
    present_.assign(n, false);
  }

  const SearchSpaceSpec& spec() const { return spec_; }
  Accounting accounting() const { return accounting_; }
  const CostTable& cost_table() const { return table_; }
  const std::vector<LayerConfig>& layer_configs() const { return configs_; }
  std::size_t size() const { return rows_.size(); }
  std::size_t layer_count() const { return spec_.searchable_count(); }

  std::size_t config_index(const LayerConfig& cfg) const {
    auto it = config_index_.find(cfg);
    if (it == config_index_.end()) throw ValidityError("layer config is not a canonical member of the space");
    return it->second;
  }

  // Mixed radix over layer configs, last layer fastest (for_each_architecture order).
  std::size_t index_of(const ArchEncoding& a) const {
    if (a.layers.size() != layer_count()) throw ValidityError("encoding has wrong layer count");
    std::size_t idx = 0;
    for (const auto& cfg : a.layers) idx = idx * configs_.size() + config_index(cfg);
    return idx;
  }

  ArchEncoding encoding_at(std::size_t idx) const {
    ArchEncoding a;
    a.layers.resize(layer_count());
    for (std::size_t l = layer_count(); l-- > 0;) {
      a.layers[l] = configs_[idx % configs_.size()];
      idx /= configs_.size();
    }
    return a;
  }

  std::size_t digit(std::size_t idx, std::size_t layer) const {
    for (std::size_t l = layer_count() - 1; l > layer; --l) idx /= configs_.size();
    return idx % configs_.size();
  }

  const TabularRow& row(std::size_t idx) const { return rows_.at(idx); }
  const TabularRow& lookup(const ArchEncoding& a) const { return rows_[index_of(a)]; }
  double accuracy(const ArchEncoding& a, Split s = Split::Val) const { return lookup(a).accuracy(s); }

  void set_row(std::size_t idx, const TabularRow& r) {
    rows_.at(idx) = r;
    present_[idx] = true;
  }

  std::size_t missing() const { return static_cast<std::size_t>(std::count(present_.begin(), present_.end(), false)); }

  // Index of the most accurate architecture with flops <= max_flops.
  std::size_t optimum(double max_flops, Split s = Split::Val) const {
    std::size_t best = rows_.size();
    for (std::size_t i = 0; i < rows_.size(); ++i)
      if (rows_[i].flops <= max_flops && (best == rows_.size() || rows_[i].accuracy(s) > rows_[best].accuracy(s)))
        best = i;
    if (best == rows_.size())
      throw InfeasibleError("no architecture has cost <= " + detail::format_double(max_flops));
    return best;
  }

  double min_flops() const {
    double m = rows_.empty() ? 0.0 : rows_[0].flops;
    for (const auto& r : rows_) m = std::min(m, r.flops);
    return m;
  }
  double max_flops() const {
    double m = 0.0;
    for (const auto& r : rows_) m = std::max(m, r.flops);
    return m;
  }

  void save(std::ostream& os) const {
    if (missing() != 0) throw CompletenessError("cannot save a table with " + std::to_string(missing()) + " missing rows");
    std::string body = "encoding,val,test,flops,params\n";
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      const auto& r = rows_[i];
      body += encoding_to_compact(spec_, encoding_at(i)) + "," + detail::format_double(r.val) + "," +
              detail::format_double(r.test) + "," + detail::format_double(r.flops) + "," +
              detail::format_double(r.params) + "\n";
    }
    nlohmann::json head = {{"format", "sgnas-tabular"},
                           {"version", 1},
                           {"space", spec_.to_text()},
                           {"accounting", accounting_name(accounting_)},
                           {"splits", {"val", "test"}},
                           {"rows", rows_.size()},
                           {"checksum", hex(detail::fnv1a(body))}};
    os << '#' << head.dump() << '\n' << body;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write table " + path.string());
    save(os);
  }

  static TabularBench load(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line.empty() || line[0] != '#')
      throw FormatError("line 1: expected '#' followed by the JSON header");
    nlohmann::json head;
    try {
      head = nlohmann::json::parse(line.substr(1));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("line 1: bad JSON header: ") + e.what());
    }
    if (head.value("format", "") != "sgnas-tabular" || head.value("version", 0) != 1)
      throw FormatError("line 1: not a version 1 sgnas-tabular file");
    TabularBench b;
    try {
      b = TabularBench(SearchSpaceSpec::from_text(head.at("space").get<std::string>()),
                       parse_accounting(head.at("accounting").get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("line 1: incomplete header: ") + e.what());
    }
    std::string body;
    std::size_t lineno = 2;
    if (!std::getline(is, line) || line != "encoding,val,test,flops,params")
      throw FormatError("line 2: expected column header 'encoding,val,test,flops,params'");
    body += line + "\n";
    while (std::getline(is, line)) {
      ++lineno;
      body += line + "\n";
      if (line.empty()) continue;
      const std::string at = "line " + std::to_string(lineno) + ": ";
      std::vector<std::string_view> f;
      std::string_view rest(line);
      for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1))
        f.push_back(rest.substr(0, pos));
      f.push_back(rest);
      if (f.size() != 5) throw FormatError(at + "expected 5 fields, got " + std::to_string(f.size()));
      ArchEncoding a;
      try {
        a = encoding_from_compact(b.spec_, f[0]);
      } catch (const Error& e) {
        throw FormatError(at + e.what());
      }
      std::size_t idx = 0;
      try {
        idx = b.index_of(a);
      } catch (const ValidityError& e) {
        throw FormatError(at + "encoding is not canonical: " + std::string(f[0]));
      }
      if (b.present_[idx]) throw FormatError(at + "duplicate encoding " + std::string(f[0]));
      TabularRow r;
      double* dst[4] = {&r.val, &r.test, &r.flops, &r.params};
      for (int k = 0; k < 4; ++k)
        if (!detail::parse_double(f[static_cast<std::size_t>(k) + 1], *dst[k]))
          throw FormatError(at + "bad number '" + std::string(f[static_cast<std::size_t>(k) + 1]) + "'");
      if (!(r.val >= 0 && r.val <= 100 && r.test >= 0 && r.test <= 100))
        throw FormatError(at + "accuracy outside [0, 100]");
      if (!(r.flops > 0)) throw FormatError(at + "flops must be positive");
      if (!(r.params >= 0)) throw FormatError(at + "params must be non-negative");
      b.set_row(idx, r);
    }
    if (const std::size_t m = b.missing(); m != 0)
      throw CompletenessError("table is missing " + std::to_string(m) + " of " + std::to_string(b.size()) +
                              " architectures");
    if (head.value("checksum", "") != hex(detail::fnv1a(body)))
      throw FormatError("checksum mismatch: table body was modified");
    return b;
  }

  static TabularBench load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open table " + path.string());
    return load(is);
  }

 private:
  static std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
  }

  SearchSpaceSpec spec_;
  Accounting accounting_ = Accounting::SimulatedExpansion;
  std::vector<LayerConfig> configs_;
  std::map<LayerConfig, std::size_t> config_index_;
  CostTable table_;
  std::vector<TabularRow> rows_;
  std::vector<bool> present_;
};

// ---------------------------------------------------------------- bench spaces

namespace spaces {

// 3 layers x 3 kernels, expansion fixed at 1: 27 architectures.
inline SearchSpaceSpec tiny() {
  return SearchSpaceSpec::from_text(
      "input_resolution = 16\ninput_channels = 3\nclass_count = 10\n"
      "e_min = 1\ne_max = 1\nkernels = 3,5,7\n"
      "layer conv 8 1 2 3\n"
      "layer unified 8 1 1\n"
      "layer unified 16 1 2\n"
      "layer unified 16 1 1\n"
      "layer avgpool 0 1 1\n"
      "layer fc 10 1 1\n");
}

// 3 layers, expansion 1..2: 9 configs per layer, 729 architectures.
inline SearchSpaceSpec toy() {
  return SearchSpaceSpec::from_text(
      "input_resolution = 16\ninput_channels = 3\nclass_count = 10\n"
      "e_min = 1\ne_max = 2\nkernels = 3,5,7\n"
      "layer conv 8 1 2 3\n"
      "layer unified 8 1 1\n"
      "layer unified 16 1 2\n"
      "layer unified 16 1 1\n"
      "layer avgpool 0 1 1\n"
      "layer fc 10 1 1\n");
}

// 4 layers, expansion 2..4: 31 configs per layer, 923,521 architectures.
inline SearchSpaceSpec desk_bench() {
  return SearchSpaceSpec::from_text(
      "input_resolution = 32\ninput_channels = 3\nclass_count = 10\n"
      "e_min = 2\ne_max = 4\nkernels = 3,5,7\n"
      "layer conv 8 1 2 3\n"
      "layer unified 8 1 1\n"
      "layer unified 16 1 2\n"
      "layer unified 16 1 1\n"
      "layer unified 32 1 2\n"
      "layer conv 64 1 1 1\n"
      "layer avgpool 0 1 1\n"
      "layer fc 10 1 1\n");
}

}  // namespace spaces

// ---------------------------------------------------------------- synthetic benches

struct SyntheticBenchOptions {
  double noise = 0.0;        // accuracy noise sd, percentage points
  double interaction = 0.0;  // weight of adjacent-layer expansion interactions
  double kernel_gain = 1.0;  // mean utility advantage of the largest kernel
  double utility_sd = 0.5;
  double acc_low = 55.0, acc_high = 95.0;
  Accounting accounting = Accounting::SimulatedExpansion;
};

// The hidden accuracy model of a synthetic bench.
struct SyntheticModel {
  std::size_t layers = 0, ops = 0;
  std::vector<double> utility;      // [layer][op], summed over a layer's slots
  std::vector<double> interaction;  // [layer], couples expansions of layers l and l+1

  double score(const SearchSpaceSpec& spec, const ArchEncoding& a) const {
    double s = 0.0;
    for (std::size_t l = 0; l < layers; ++l)
      for (int op : a.layers[l]) s += utility[l * ops + static_cast<std::size_t>(op)];
    const double mid = 0.5 * (spec.e_min + spec.e_max);
    for (std::size_t l = 0; l + 1 < layers; ++l)
      s += interaction[l] * (expansion_of(spec, a.layers[l]) - mid) * (expansion_of(spec, a.layers[l + 1]) - mid);
    return s;
  }
};

inline SyntheticModel make_synthetic_model(const SearchSpaceSpec& spec, const SyntheticBenchOptions& opt, Rng& rng) {
  SyntheticModel m;
  m.layers = spec.searchable_count();
  m.ops = spec.op_count();
  const double kmax = *std::max_element(spec.kernels.begin(), spec.kernels.end());
  for (std::size_t l = 0; l < m.layers; ++l)
    for (std::size_t o = 0; o < m.ops; ++o) {
      const double base = spec.is_skip(static_cast<int>(o)) ? 0.0 : opt.kernel_gain * spec.kernels[o] / kmax;
      m.utility.push_back(base + normal(rng, 0.0, opt.utility_sd));
    }
  for (std::size_t l = 0; l + 1 < m.layers; ++l) m.interaction.push_back(opt.interaction * normal(rng));
  return m;
}

namespace detail {

// Per-architecture params as a base plus per-layer deltas; exact because a
// layer's parameters depend only on its own config once widths are fixed.
inline std::vector<double> per_layer_params(const TabularBench& b, double& base) {
  const auto& spec = b.spec();
  const auto ref = b.encoding_at(0);
  base = network_cost(spec, ref).params;
  std::vector<double> delta;
  for (std::size_t l = 0; l < b.layer_count(); ++l)
    for (const auto& cfg : b.layer_configs()) {
      auto a = ref;
      a.layers[l] = cfg;
      delta.push_back(network_cost(spec, a).params - base);
    }
  return delta;
}

}  // namespace detail

// Accuracy is a monotone squashing of the model score (standardised over the
// whole space) plus independent per-split noise.
inline TabularBench make_synthetic_bench(const SearchSpaceSpec& spec, std::uint64_t seed,
                                         const SyntheticBenchOptions& opt = {}, SyntheticModel* model_out = nullptr) {
  Rng rng(seed);
  TabularBench b(spec, opt.accounting);
  const auto model = make_synthetic_model(spec, opt, rng);
  const std::size_t n = b.size(), k = b.layer_configs().size(), L = b.layer_count();
  std::vector<double> score(n);
  double mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    score[i] = model.score(spec, b.encoding_at(i));
    mean += score[i];
    sq += score[i] * score[i];
  }
  mean /= static_cast<double>(n);
  const double sd = std::sqrt(std::max(sq / static_cast<double>(n) - mean * mean, 1e-12));
  double base_params = 0.0;
  const auto dparams = detail::per_layer_params(b, base_params);
  const auto& table = b.cost_table();
  std::vector<double> layer_flops(L * k, 0.0);
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t s = 0; s < spec.slots(); ++s)
        layer_flops[l * k + c] += table.at(l, s, static_cast<std::size_t>(b.layer_configs()[c][s]));
  for (std::size_t i = 0; i < n; ++i) {
    TabularRow r;
    const double z = (score[i] - mean) / sd;
    const double acc = opt.acc_low + (opt.acc_high - opt.acc_low) / (1.0 + std::exp(-1.5 * z));
    r.val = std::clamp(acc + (opt.noise > 0 ? normal(rng, 0.0, opt.noise) : 0.0), 0.0, 100.0);
    r.test = std::clamp(acc + (opt.noise > 0 ? normal(rng, 0.0, opt.noise) : 0.0), 0.0, 100.0);
    r.flops = table.fixed_cost;
    r.params = base_params;
    std::size_t idx = i;
    for (std::size_t l = L; l-- > 0;) {
      const std::size_t c = idx % k;
      idx /= k;
      r.flops += layer_flops[l * k + c];
      r.params += dparams[l * k + c];
    }
    b.set_row(i, r);
  }
  if (model_out) *model_out = model;
  return b;
}

// ---------------------------------------------------------------- surrogate

enum class SurrogateMode { Auto, Exact, Marginal };

struct SurrogateOptions {
  SurrogateMode mode = SurrogateMode::Auto;
  std::size_t exact_cap = 2'000'000;  // architectures
  bool allow_over_cap = false;
  Split split = Split::Val;
};

// Differentiable -E_{a ~ P_alpha}[acc(a)]. Slot weights induce a
// distribution over raw per-slot assignments, which is pooled onto
// canonical layer configs. Exact mode sums over every architecture;
// marginal mode uses the table's main effects (per-layer mean accuracy).
class TabularSurrogate {
 public:
  TabularSurrogate(const TabularBench& bench, SurrogateOptions opt = {}) : bench_(&bench), opt_(opt) {
    const auto& spec = bench.spec();
    ops_ = spec.op_count();
    slots_ = spec.slots();
    std::size_t raw = 1;
    for (std::size_t s = 0; s < slots_; ++s) raw *= ops_;
    raw_to_config_.assign(raw, -1);
    LayerConfig cfg(slots_);
    for (std::size_t r = 0; r < raw; ++r) {
      std::size_t x = r;
      for (std::size_t s = slots_; s-- > 0;) {
        cfg[s] = static_cast<int>(x % ops_);
        x /= ops_;
      }
      if (skip_count(spec, cfg) <= spec.max_skips())
        raw_to_config_[r] = static_cast<int>(bench.config_index(canonicalize_layer(spec, cfg)));
    }
    exact_ = bench.size() <= opt.exact_cap || (opt.mode == SurrogateMode::Exact && opt.allow_over_cap);
    if (opt.mode == SurrogateMode::Exact && !exact_)
      throw ContractError("exact surrogate over " + std::to_string(bench.size()) + " architectures exceeds cap " +
                          std::to_string(opt.exact_cap));
    if (opt.mode == SurrogateMode::Marginal) exact_ = false;
    if (!exact_) build_marginals();
  }

  bool exact() const { return exact_; }

  // P_l(config) for every layer, [layer][config].
  std::vector<double> config_probabilities(const std::vector<double>& w) const {
    std::vector<double> p;
    layer_probs(w, p, nullptr);
    return p;
  }

  template <typename T>
  BasicTensor<T> operator()(const BasicTensor<T>& weights) const {
    const std::size_t L = bench_->layer_count(), K = bench_->layer_configs().size();
    if (weights.rank() != 2 || weights.dim(0) != L * slots_ || weights.dim(1) != ops_)
      throw DimensionError("surrogate weights must be [" + std::to_string(L * slots_) + ", " + std::to_string(ops_) +
                           "], got " + shape_str(weights.shape()));
    std::vector<double> w(weights.values().begin(), weights.values().end());
    std::vector<double> p;
    std::vector<double> dp;  // dP_l(c)/dw[l,s,o]: [layer][config][slot*ops]
    layer_probs(w, p, &dp);
    std::vector<double> gp(L * K, 0.0);  // dE/dP_l(c)
    double e = 0.0;
    if (exact_) {
      const std::size_t n = bench_->size();
      std::vector<std::size_t> d(L);
      std::vector<double> pre(L + 1), suf(L + 1);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t x = i;
        for (std::size_t l = L; l-- > 0;) {
          d[l] = x % K;
          x /= K;
        }
        pre[0] = 1.0;
        for (std::size_t l = 0; l < L; ++l) pre[l + 1] = pre[l] * p[l * K + d[l]];
        suf[L] = 1.0;
        for (std::size_t l = L; l-- > 0;) suf[l] = suf[l + 1] * p[l * K + d[l]];
        const double acc = bench_->row(i).accuracy(opt_.split);
        e += pre[L] * acc;
        for (std::size_t l = 0; l < L; ++l) gp[l * K + d[l]] += acc * pre[l] * suf[l + 1];
      }
    } else {
      e = mean_;
      for (std::size_t j = 0; j < L * K; ++j) {
        gp[j] = marginal_[j] - mean_;
        e += p[j] * gp[j];
      }
    }
    const std::size_t row = slots_ * ops_;
    std::vector<double> gw(w.size(), 0.0);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < K; ++c)
        for (std::size_t j = 0; j < row; ++j) gw[l * row + j] -= gp[l * K + c] * dp[(l * K + c) * row + j];
    return scalar_custom_op<T>(
        weights, static_cast<T>(-e),
        [gw = std::move(gw)](T up) {
          std::vector<T> out(gw.size());
          for (std::size_t i = 0; i < gw.size(); ++i) out[i] = static_cast<T>(gw[i]) * up;
          return out;
        },
        "tabular_surrogate");
  }

 private:
  // Raw assignments over the SKIP bound are pooled the way discretize treats
  // an over-bound argmax: the surplus SKIP slots with the smallest log-weight
  // margin over their best kernel fall back to that kernel. The mapping is
  // piecewise constant in w, so only the products carry gradient, and the
  // pooled masses sum to one without renormalisation.
  void layer_probs(const std::vector<double>& w, std::vector<double>& p, std::vector<double>* dp) const {
    const auto& spec = bench_->spec();
    const std::size_t L = bench_->layer_count(), K = bench_->layer_configs().size(), row = slots_ * ops_;
    p.assign(L * K, 0.0);
    if (dp) dp->assign(L * K * row, 0.0);
    std::vector<std::size_t> op(slots_), best_kernel(slots_);
    std::vector<double> margin(slots_);
    LayerConfig cfg(slots_);
    for (std::size_t l = 0; l < L; ++l) {
      const double* wl = w.data() + l * row;
      for (std::size_t s = 0; s < slots_; ++s) {
        std::size_t bk = 0;
        for (std::size_t o = 1; o < spec.kernels.size(); ++o)
          if (wl[s * ops_ + o] > wl[s * ops_ + bk]) bk = o;
        best_kernel[s] = bk;
        if (spec.has_skip())
          margin[s] = std::log(std::max(wl[s * ops_ + static_cast<std::size_t>(spec.skip_op())], 1e-300)) -
                      std::log(std::max(wl[s * ops_ + bk], 1e-300));
      }
      for (std::size_t r = 0; r < raw_to_config_.size(); ++r) {
        std::size_t x = r;
        for (std::size_t s = slots_; s-- > 0;) {
          op[s] = x % ops_;
          x /= ops_;
        }
        double prod = 1.0;
        for (std::size_t s = 0; s < slots_; ++s) prod *= wl[s * ops_ + op[s]];
        if (prod == 0.0 && !dp) continue;
        int c = raw_to_config_[r];
        if (c < 0) {
          for (std::size_t s = 0; s < slots_; ++s) cfg[s] = static_cast<int>(op[s]);
          while (skip_count(spec, cfg) > spec.max_skips()) {
            std::size_t victim = slots_;
            for (std::size_t s = 0; s < slots_; ++s)
              if (spec.is_skip(cfg[s]) && (victim == slots_ || margin[s] < margin[victim])) victim = s;
            cfg[victim] = static_cast<int>(best_kernel[victim]);
          }
          c = static_cast<int>(bench_->config_index(canonicalize_layer(spec, cfg)));
        }
        const auto cc = static_cast<std::size_t>(c);
        p[l * K + cc] += prod;
        if (!dp) continue;
        for (std::size_t s = 0; s < slots_; ++s) {
          double others = 1.0;
          for (std::size_t t = 0; t < slots_; ++t)
            if (t != s) others *= wl[t * ops_ + op[t]];
          (*dp)[(l * K + cc) * row + s * ops_ + op[s]] += others;
        }
      }
    }
  }

  void build_marginals() {
    const std::size_t L = bench_->layer_count(), K = bench_->layer_configs().size(), n = bench_->size();
    marginal_.assign(L * K, 0.0);
    mean_ = 0.0;
    std::vector<double> count(L * K, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double acc = bench_->row(i).accuracy(opt_.split);
      mean_ += acc;
      std::size_t x = i;
      for (std::size_t l = L; l-- > 0;) {
        marginal_[l * K + x % K] += acc;
        count[l * K + x % K] += 1.0;
        x /= K;
      }
    }
    mean_ /= static_cast<double>(n);
    for (std::size_t j = 0; j < marginal_.size(); ++j) marginal_[j] /= count[j];
  }

  const TabularBench* bench_;
  SurrogateOptions opt_;
  std::size_t ops_ = 0, slots_ = 0;
  std::vector<int> raw_to_config_;
  bool exact_ = true;
  std::vector<double> marginal_;
  double mean_ = 0.0;
};

template <typename T>
BasicTensor<T> tabular_surrogate_loss(const BasicTensor<T>& weights, const TabularBench& bench,
                                      const SurrogateOptions& opt = {}) {
  return TabularSurrogate(bench, opt)(weights);
}

}  // namespace sgnas
