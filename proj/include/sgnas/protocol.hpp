#pragma once

// Benchmark protocol: for each cost bound, run the generator once per
// trained instance and the baseline searchers once per seed, all on one
// tabular bench, and summarise as mean +- std plus scatter data.

#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "sgnas/generator.hpp"
#include "sgnas/search.hpp"
#include "sgnas/tabular.hpp"

namespace sgnas {

// Kendall tau-b; ties in either sequence are corrected for.
inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("kendall_tau needs sequences of equal length");
  double concordant = 0, discordant = 0, tx = 0, ty = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0 && dy == 0) continue;
      if (dx == 0) ++tx;
      else if (dy == 0) ++ty;
      else if ((dx > 0) == (dy > 0)) ++concordant;
      else ++discordant;
    }
  const double denom = std::sqrt((concordant + discordant + tx) * (concordant + discordant + ty));
  if (denom == 0) return 0.0;
  return (concordant - discordant) / denom;
}

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

// Sample standard deviation (n - 1); zero for a single value.
inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty sequence");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ProtocolConfig {
  std::vector<double> constraints;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t budget = 1000;
  bool run_random = true;
  bool run_evolution = true;
  EvolutionConfig evolution;
  // Bench rows in the scatter CSV; larger tables are thinned evenly.
  std::size_t scatter_rows = 100000;
};

struct ProtocolRun {
  std::string method;
  double constraint = 0.0;
  std::uint64_t seed = 0;
  ArchEncoding encoding;
  double flops = 0.0, val = 0.0, test = 0.0;
  std::size_t evaluations = 0;
};

struct ProtocolSummary {
  std::string method;
  double constraint = 0.0;
  std::size_t runs = 0;
  MeanStd val, test, flops;
  double val_median = 0.0;
  double optimum_val = 0.0;  // best val accuracy under the bound, by brute force
};

struct ProtocolReport {
  std::vector<ProtocolRun> runs;
  std::vector<ProtocolSummary> summary;

  const ProtocolSummary& find(const std::string& method, double constraint) const {
    for (const auto& s : summary)
      if (s.method == method && s.constraint == constraint) return s;
    throw ContractError("no protocol summary for " + method + " at " + detail::format_double(constraint));
  }

  void write_summary_csv(std::ostream& os) const {
    os << "method,constraint,runs,val_mean,val_std,val_median,test_mean,test_std,flops_mean,optimum_val\n";
    for (const auto& s : summary)
      os << s.method << ',' << detail::format_double(s.constraint) << ',' << s.runs << ','
         << detail::format_double(s.val.mean) << ',' << detail::format_double(s.val.std) << ','
         << detail::format_double(s.val_median) << ',' << detail::format_double(s.test.mean) << ','
         << detail::format_double(s.test.std) << ',' << detail::format_double(s.flops.mean) << ','
         << detail::format_double(s.optimum_val) << '\n';
  }

  void write_runs_csv(std::ostream& os, const SearchSpaceSpec& spec) const {
    os << "method,constraint,seed,encoding,flops,val,test,evaluations\n";
    for (const auto& r : runs)
      os << r.method << ',' << detail::format_double(r.constraint) << ',' << r.seed << ','
         << encoding_to_compact(spec, r.encoding) << ',' << detail::format_double(r.flops) << ','
         << detail::format_double(r.val) << ',' << detail::format_double(r.test) << ',' << r.evaluations << '\n';
  }

  // Bench rows (kind "bench") followed by searched points (kind = method).
  void write_scatter_csv(std::ostream& os, const TabularBench& bench, std::size_t max_rows) const {
    os << "kind,constraint,flops,val,test\n";
    const std::size_t n = bench.size();
    const std::size_t stride = max_rows == 0 ? n + 1 : std::max<std::size_t>(1, (n + max_rows - 1) / max_rows);
    for (std::size_t i = 0; i < n; i += stride) {
      const auto& r = bench.row(i);
      os << "bench,," << detail::format_double(r.flops) << ',' << detail::format_double(r.val) << ','
         << detail::format_double(r.test) << '\n';
    }
    for (const auto& r : runs)
      os << r.method << ',' << detail::format_double(r.constraint) << ',' << detail::format_double(r.flops) << ','
         << detail::format_double(r.val) << ',' << detail::format_double(r.test) << '\n';
  }
};

inline ProtocolReport bench_protocol_run(const TabularBench& bench, const std::vector<ArchitectureGenerator*>& generators,
                                         const ProtocolConfig& cfg) {
  if (cfg.constraints.empty()) throw ConfigError("protocol needs at least one constraint");
  if (cfg.seeds.empty()) throw ConfigError("protocol needs at least one seed");
  for (const auto* g : generators) {
    if (g->spec().hash() != bench.spec().hash())
      throw ContractError("generator and bench are bound to different search spaces");
    if (g->cost_table().accounting != bench.cost_table().accounting)
      throw ContractError("generator and bench use different cost accounting");
  }
  ProtocolReport rep;
  const auto eval = tabular_evaluator(bench, Split::Val);
  auto record = [&](const std::string& method, double c, std::uint64_t seed, const ArchEncoding& a, std::size_t n) {
    const auto& row = bench.lookup(a);
    rep.runs.push_back({method, c, seed, a, row.flops, row.val, row.test, n});
  };
  for (double c : cfg.constraints) {
    for (std::size_t i = 0; i < generators.size(); ++i)
      record("generator", c, i, generators[i]->generate({.target = c}).encoding, 0);
    for (auto seed : cfg.seeds) {
      const SearchBudget budget{.max_evaluations = cfg.budget, .constraint = c, .seed = seed};
      if (cfg.run_random) {
        const auto r = random_search(bench.spec(), bench.cost_table(), eval, budget);
        record("random", c, seed, r.best, r.trace.size());
      }
      if (cfg.run_evolution) {
        const auto r = evolution_search(bench.spec(), bench.cost_table(), eval, budget, cfg.evolution);
        record("evolution", c, seed, r.best, r.trace.size());
      }
    }
    const double opt = bench.row(bench.optimum(c)).val;
    for (const char* m : {"generator", "random", "evolution"}) {
      std::vector<double> val, test, flops;
      for (const auto& r : rep.runs)
        if (r.method == m && r.constraint == c) {
          val.push_back(r.val);
          test.push_back(r.test);
          flops.push_back(r.flops);
        }
      if (val.empty()) continue;
      rep.summary.push_back({m, c, val.size(), mean_std(val), mean_std(test), mean_std(flops), median(val), opt});
    }
  }
  return rep;
}

}  // namespace sgnas
