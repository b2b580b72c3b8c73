#pragma once

// Baseline searchers over a fixed evaluator: random search and a
// population-based evolution search. Both reject candidates over the cost
// bound by resampling and never evaluate the same architecture twice.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sgnas/cost_model.hpp"
#include "sgnas/errors.hpp"
#include "sgnas/random.hpp"
#include "sgnas/search_space.hpp"
#include "sgnas/tabular.hpp"

namespace sgnas {

struct SearchBudget {
  std::size_t max_evaluations = 1000;
  double constraint = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;

  void validate() const {
    if (max_evaluations == 0) throw ConfigError("search budget needs max_evaluations > 0");
    if (!(constraint > 0)) throw ConfigError("search constraint must be positive");
  }
};

struct EvolutionConfig {
  std::size_t population = 50;
  double parent_fraction = 0.25;
  double mutation_prob = 0.1;
  // Give up on producing a new feasible child after this many draws.
  std::size_t max_attempts = 10000;

  void validate() const {
    if (population < 2) throw ConfigError("evolution population must be at least 2");
    if (!(parent_fraction > 0 && parent_fraction <= 1)) throw ConfigError("parent_fraction must be in (0, 1]");
    if (!(mutation_prob >= 0 && mutation_prob < 1)) throw ConfigError("mutation_prob must be in [0, 1)");
  }
};

struct TraceEntry {
  std::size_t step = 0;
  std::size_t generation = 0;
  ArchEncoding encoding;
  double cost = 0.0;
  double score = 0.0;
  double best_so_far = 0.0;
};

struct SearchResult {
  ArchEncoding best;
  double best_score = -std::numeric_limits<double>::infinity();
  double best_cost = 0.0;
  std::vector<TraceEntry> trace;
  std::size_t rejected = 0;  // draws discarded for cost or duplication

  void write_trace_csv(std::ostream& os, const SearchSpaceSpec& spec) const {
    os << "step,generation,encoding,cost,score,best_so_far\n";
    for (const auto& t : trace)
      os << t.step << ',' << t.generation << ',' << encoding_to_compact(spec, t.encoding) << ','
         << detail::format_double(t.cost) << ',' << detail::format_double(t.score) << ','
         << detail::format_double(t.best_so_far) << '\n';
  }
};

// Higher is better. Must be deterministic for a given encoding.
using Evaluator = std::function<double(const ArchEncoding&)>;

inline Evaluator tabular_evaluator(const TabularBench& bench, Split split = Split::Val) {
  return [&bench, split](const ArchEncoding& a) { return bench.accuracy(a, split); };
}

namespace detail {

// Bookkeeping shared by both searchers: cost filter, memo of evaluated
// architectures and the trace.
class SearchState {
 public:
  SearchState(const SearchSpaceSpec& spec, const CostTable& table, const Evaluator& eval, const SearchBudget& budget)
      : spec_(spec), table_(table), eval_(eval), budget_(budget), rng_(budget.seed) {
    spec.validate();
    budget.validate();
    configs_ = enumerate_layer_configs(spec);
    const double floor = table.min_cost(spec);
    if (budget.constraint < floor)
      throw InfeasibleError("cost bound " + format_double(budget.constraint) + " is below the cheapest architecture (" +
                            format_double(floor) + ")");
    space_ = std::pow(static_cast<double>(configs_.size()), static_cast<double>(spec.searchable_count()));
  }

  Rng& rng() { return rng_; }
  const std::vector<LayerConfig>& configs() const { return configs_; }
  bool done() const { return result_.trace.size() >= budget_.max_evaluations || exhausted_; }
  bool seen(const ArchEncoding& a) const { return scores_.count(a) != 0; }
  bool feasible(const ArchEncoding& a) const { return table_.architecture_cost(a) <= budget_.constraint; }
  bool acceptable(const ArchEncoding& a) {
    if (seen(a) || !feasible(a)) {
      ++result_.rejected;
      return false;
    }
    return true;
  }

  ArchEncoding sample() {
    ArchEncoding a;
    for (std::size_t l = 0; l < spec_.searchable_count(); ++l)
      a.layers.push_back(configs_[uniform_index(rng_, configs_.size())]);
    return a;
  }

  // A fresh feasible architecture, or nothing once every draw in a long run
  // has been rejected (the feasible region is used up).
  std::optional<ArchEncoding> fresh(std::size_t max_attempts) {
    if (static_cast<double>(scores_.size()) >= space_) {
      exhausted_ = true;
      return std::nullopt;
    }
    for (std::size_t i = 0; i < max_attempts; ++i) {
      auto a = sample();
      if (acceptable(a)) return a;
    }
    exhausted_ = true;
    return std::nullopt;
  }

  double evaluate(const ArchEncoding& a, std::size_t generation) {
    const double score = eval_(a);
    scores_.emplace(a, score);
    TraceEntry t;
    t.step = result_.trace.size();
    t.generation = generation;
    t.encoding = a;
    t.cost = table_.architecture_cost(a);
    t.score = score;
    if (result_.trace.empty() || score > result_.best_score) {
      result_.best_score = score;
      result_.best = a;
      result_.best_cost = t.cost;
    }
    t.best_so_far = result_.best_score;
    result_.trace.push_back(std::move(t));
    return score;
  }

  SearchResult finish() && { return std::move(result_); }

 private:
  const SearchSpaceSpec& spec_;
  const CostTable& table_;
  const Evaluator& eval_;
  SearchBudget budget_;
  Rng rng_;
  std::vector<LayerConfig> configs_;
  std::map<ArchEncoding, double> scores_;
  double space_ = 0.0;
  bool exhausted_ = false;
  SearchResult result_;
};

// Too many SKIPs after mutation: turn random surplus SKIPs into kernels.
inline void repair_layer(const SearchSpaceSpec& spec, LayerConfig& cfg, Rng& rng) {
  while (skip_count(spec, cfg) > spec.max_skips()) {
    std::vector<std::size_t> skips;
    for (std::size_t s = 0; s < cfg.size(); ++s)
      if (spec.is_skip(cfg[s])) skips.push_back(s);
    cfg[skips[uniform_index(rng, skips.size())]] = static_cast<int>(uniform_index(rng, spec.kernels.size()));
  }
}

}  // namespace detail

inline SearchResult random_search(const SearchSpaceSpec& spec, const CostTable& table, const Evaluator& eval,
                                  const SearchBudget& budget, std::size_t max_attempts = 100000) {
  detail::SearchState st(spec, table, eval, budget);
  while (!st.done()) {
    auto a = st.fresh(max_attempts);
    if (!a) break;
    st.evaluate(*a, 0);
  }
  return std::move(st).finish();
}

inline SearchResult evolution_search(const SearchSpaceSpec& spec, const CostTable& table, const Evaluator& eval,
                                     const SearchBudget& budget, const EvolutionConfig& cfg = {}) {
  cfg.validate();
  detail::SearchState st(spec, table, eval, budget);
  using Member = std::pair<double, ArchEncoding>;
  std::vector<Member> pop;
  while (pop.size() < cfg.population && !st.done()) {
    auto a = st.fresh(cfg.max_attempts);
    if (!a) break;
    pop.emplace_back(st.evaluate(*a, 0), std::move(*a));
  }
  const auto by_score = [](const Member& x, const Member& y) { return x.first > y.first; };
  std::size_t generation = 1;
  while (!st.done() && !pop.empty()) {
    std::stable_sort(pop.begin(), pop.end(), by_score);
    const std::size_t k = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(cfg.parent_fraction * static_cast<double>(pop.size()))), 1, pop.size());
    std::vector<Member> next(pop.begin(), pop.begin() + static_cast<std::ptrdiff_t>(k));
    Rng& rng = st.rng();
    while (next.size() < cfg.population && !st.done()) {
      std::optional<ArchEncoding> child;
      for (std::size_t attempt = 0; attempt < cfg.max_attempts && !child; ++attempt) {
        const auto& p1 = next[uniform_index(rng, k)].second;
        const auto& p2 = next[uniform_index(rng, k)].second;
        ArchEncoding c;
        for (std::size_t l = 0; l < p1.layers.size(); ++l) {
          LayerConfig layer = uniform01(rng) < 0.5 ? p1.layers[l] : p2.layers[l];
          for (auto& op : layer)
            if (uniform01(rng) < cfg.mutation_prob) op = static_cast<int>(uniform_index(rng, spec.op_count()));
          detail::repair_layer(spec, layer, rng);
          c.layers.push_back(std::move(layer));
        }
        c = canonicalize(spec, std::move(c));
        if (st.acceptable(c)) child = std::move(c);
      }
      // Offspring stuck on known architectures: inject a random newcomer.
      if (!child) child = st.fresh(cfg.max_attempts);
      if (!child) break;
      next.emplace_back(st.evaluate(*child, generation), std::move(*child));
    }
    if (next.size() == k) break;
    pop = std::move(next);
    ++generation;
  }
  return std::move(st).finish();
}

}  // namespace sgnas
