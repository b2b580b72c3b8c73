#pragma once

// Analytic cost accounting. Costs are counted in multiply-accumulates, the
// unit in which mobile architectures are conventionally quoted as "FLOPs"
// (MobileNetV2 = 300M). Bias, BN and pooling arithmetic are ignored.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "sgnas/ops.hpp"
#include "sgnas/search_space.hpp"

namespace sgnas {

// How pointwise convolutions of a unified block are charged.
//   FixedWidth: both pointwise convs always run at e_max width, so they go to
//     the fixed cost and only depthwise sub-blocks vary.
//   SimulatedExpansion: each non-SKIP sub-block carries its share of the two
//     pointwise convs, as a standalone MBConv of that expansion would.
enum class Accounting { FixedWidth, SimulatedExpansion };

inline std::size_t out_size(std::size_t in, std::size_t stride) { return (in + stride - 1) / stride; }

struct CostTable {
  std::size_t layers = 0, slots = 0, ops = 0;
  std::vector<double> cost;  // [layer][slot][op], row-major
  double fixed_cost = 0.0;
  std::vector<std::size_t> in_resolution;   // per searchable layer
  std::vector<std::size_t> out_resolution;  // per searchable layer
  Accounting accounting = Accounting::FixedWidth;

  double at(std::size_t l, std::size_t s, std::size_t o) const {
    return cost[(l * slots + s) * ops + o];
  }

  // Exact cost of a discrete architecture.
  double architecture_cost(const ArchEncoding& a) const {
    double c = fixed_cost;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
      for (std::size_t s = 0; s < a.layers[l].size(); ++s)
        c += at(l, s, static_cast<std::size_t>(a.layers[l][s]));
    return c;
  }

  // Cheapest and most expensive canonical architectures of the space.
  double min_cost(const SearchSpaceSpec& spec) const { return extreme_cost(spec, false); }
  double max_cost(const SearchSpaceSpec& spec) const { return extreme_cost(spec, true); }

  void write_csv(std::ostream& os, const SearchSpaceSpec& spec) const {
    os << "layer,sub_block,op,flops\n";
    os.precision(17);
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t s = 0; s < slots; ++s)
        for (std::size_t o = 0; o < ops; ++o)
          os << l << ',' << s << ',' << spec.op_name(static_cast<int>(o)) << ',' << at(l, s, o)
             << '\n';
    os << "fixed,,," << fixed_cost << '\n';
  }

 private:
  double extreme_cost(const SearchSpaceSpec& spec, bool want_max) const {
    // Costs are per slot and SKIP is free, so per layer the extreme is
    // reached by e_max or e_min copies of the priciest or cheapest kernel.
    double c = fixed_cost;
    for (std::size_t l = 0; l < layers; ++l) {
      double best = want_max ? -1.0 : 1e300;
      for (std::size_t o = 0; o < spec.kernels.size(); ++o) {
        const double v = at(l, 0, o);
        best = want_max ? std::max(best, v) : std::min(best, v);
      }
      c += best * (want_max ? spec.e_max : spec.e_min);
    }
    return c;
  }
};

// ---------------------------------------------------------------- table

inline CostTable build_cost_table(const SearchSpaceSpec& spec,
                                  Accounting accounting = Accounting::FixedWidth) {
  spec.validate();
  CostTable t;
  t.layers = spec.searchable_count();
  t.slots = spec.slots();
  t.ops = spec.op_count();
  t.accounting = accounting;
  t.cost.assign(t.layers * t.slots * t.ops, 0.0);
  const double emax = spec.e_max;
  std::size_t res = spec.input_resolution, ch = spec.input_channels, l = 0;
  for (const auto& layer : spec.layers) {
    const std::size_t ho = out_size(res, layer.stride);
    const double hw_in = static_cast<double>(res * res), hw_out = static_cast<double>(ho * ho);
    switch (layer.kind) {
      case LayerKind::FixedConv:
        t.fixed_cost += hw_out * layer.out_channels * ch * layer.kernel * layer.kernel;
        ch = layer.out_channels;
        res = ho;
        break;
      case LayerKind::FixedMB1:
        t.fixed_cost += hw_out * ch * layer.kernel * layer.kernel;
        t.fixed_cost += hw_out * ch * layer.out_channels;
        ch = layer.out_channels;
        res = ho;
        break;
      case LayerKind::Unified: {
        const double c1 = static_cast<double>(ch), c3 = static_cast<double>(layer.out_channels);
        const double pw_share = hw_in * c1 * c1 + hw_out * c1 * c3;  // one slice of both pointwise convs
        if (accounting == Accounting::FixedWidth) t.fixed_cost += emax * pw_share;
        for (std::size_t s = 0; s < t.slots; ++s)
          for (std::size_t o = 0; o < spec.kernels.size(); ++o) {
            const double k = spec.kernels[o];
            double c = hw_out * c1 * k * k;
            if (accounting == Accounting::SimulatedExpansion) c += pw_share;
            t.cost[(l * t.slots + s) * t.ops + o] = c;
          }
        t.in_resolution.push_back(res);
        t.out_resolution.push_back(ho);
        ch = layer.out_channels;
        res = ho;
        ++l;
        break;
      }
      case LayerKind::AvgPool:
        res = 1;
        break;
      case LayerKind::Classifier:
        t.fixed_cost += static_cast<double>(ch) * layer.out_channels;
        ch = layer.out_channels;
        break;
    }
  }
  return t;
}

// ---------------------------------------------------------------- walker

struct LayerCost {
  std::string name;
  double flops = 0.0;
  double params = 0.0;
};

struct NetworkCost {
  std::vector<LayerCost> layers;
  double flops = 0.0;
  double params = 0.0;
};

// Whole-network cost of a standalone network realising `a`, walked block by
// block from tensor shapes. Unified layers become MBConv blocks with mixed
// depthwise kernels. Parameters include BN affine pairs and the classifier
// bias. Independent of CostTable, which it is used to cross-check.
inline NetworkCost network_cost(const SearchSpaceSpec& spec, const ArchEncoding& a,
                                Accounting accounting = Accounting::FixedWidth) {
  require_valid(spec, a);
  NetworkCost net;
  std::size_t res = spec.input_resolution, ch = spec.input_channels, l = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    const std::size_t ho = out_size(res, layer.stride);
    LayerCost lc;
    lc.name = std::string(layer_kind_name(layer.kind)) + "#" + std::to_string(i);
    const double cin = static_cast<double>(ch), cout = static_cast<double>(layer.out_channels);
    switch (layer.kind) {
      case LayerKind::FixedConv: {
        const double taps = static_cast<double>(layer.kernel * layer.kernel);
        lc.flops = static_cast<double>(ho * ho) * cout * cin * taps;
        lc.params = cout * cin * taps + 2 * cout;
        ch = layer.out_channels;
        break;
      }
      case LayerKind::FixedMB1: {
        const double taps = static_cast<double>(layer.kernel * layer.kernel);
        lc.flops = static_cast<double>(ho * ho) * cin * taps + static_cast<double>(ho * ho) * cin * cout;
        lc.params = cin * taps + 2 * cin + cin * cout + 2 * cout;
        ch = layer.out_channels;
        break;
      }
      case LayerKind::Unified: {
        const auto& cfg = a.layers[l++];
        const double e = expansion_of(spec, cfg);
        const double width = accounting == Accounting::FixedWidth ? spec.e_max : e;
        double dw_flops = 0.0, dw_params = 0.0;
        for (int op : cfg) {
          if (spec.is_skip(op)) continue;
          const double k = spec.kernels[static_cast<std::size_t>(op)];
          dw_flops += static_cast<double>(ho * ho) * cin * k * k;
          dw_params += cin * k * k;
        }
        lc.flops = static_cast<double>(res * res) * cin * (width * cin) + dw_flops +
                   static_cast<double>(ho * ho) * (width * cin) * cout;
        lc.params = e * cin * cin + 2 * e * cin + dw_params + 2 * e * cin + e * cin * cout + 2 * cout;
        ch = layer.out_channels;
        break;
      }
      case LayerKind::AvgPool:
        break;
      case LayerKind::Classifier:
        lc.flops = cin * cout;
        lc.params = cin * cout + cout;
        ch = layer.out_channels;
        break;
    }
    res = layer.kind == LayerKind::AvgPool ? 1 : ho;
    net.flops += lc.flops;
    net.params += lc.params;
    net.layers.push_back(std::move(lc));
  }
  return net;
}

// ---------------------------------------------------------------- expected cost

// Checks that `weights` holds one probability simplex per (layer, slot).
template <typename T>
void require_simplex_weights(const BasicTensor<T>& weights, const CostTable& table) {
  if (weights.size() != table.cost.size())
    throw DimensionError("architecture weights have " + std::to_string(weights.size()) +
                         " entries, cost table has " + std::to_string(table.cost.size()));
  for (std::size_t r = 0; r < table.layers * table.slots; ++r) {
    double s = 0.0;
    for (std::size_t o = 0; o < table.ops; ++o) {
      const double v = weights[r * table.ops + o];
      if (v < 0.0) throw ContractError("architecture weight is negative");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-5)
      throw ContractError("architecture weights of slot " + std::to_string(r) + " sum to " +
                          std::to_string(s));
  }
}

// fixed_cost + sum over slots and ops of weight * op cost, in units of `unit`.
template <typename T>
BasicTensor<T> expected_cost(const BasicTensor<T>& weights, const CostTable& table, double unit = 1.0) {
  require_simplex_weights(weights, table);
  std::vector<T> c(table.cost.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = static_cast<T>(table.cost[i] / unit);
  return add_scalar(dot_const(weights, std::move(c)), static_cast<T>(table.fixed_cost / unit));
}

// Squared gap between expected cost and target, both measured in `unit`
// (1e8 by default, which keeps the trade-off weight in a sane range).
template <typename T>
BasicTensor<T> constraint_loss(const BasicTensor<T>& weights, double target, const CostTable& table,
                               double unit = 1e8) {
  if (!(target > 0.0)) throw ContractError("cost target must be positive");
  return square(add_scalar(expected_cost(weights, table, unit), static_cast<T>(-target / unit)));
}

// One-hot weights of a discrete architecture, laid out like the cost table.
template <typename T>
BasicTensor<T> one_hot_weights(const SearchSpaceSpec& spec, const ArchEncoding& a) {
  const std::size_t ops = spec.op_count();
  std::vector<T> v(a.layers.size() * spec.slots() * ops, T(0));
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    for (std::size_t s = 0; s < spec.slots(); ++s)
      v[(l * spec.slots() + s) * ops + static_cast<std::size_t>(a.layers[l][s])] = T(1);
  return BasicTensor<T>::from({a.layers.size() * spec.slots(), ops}, std::move(v));
}

// ---------------------------------------------------------------- params

// Learnable parameters of the parts every supernet shares (stem, MB1,
// fixed convs, classifier), plus a per-searchable-layer callback.
template <typename UnifiedFn>
double count_params_with(const SearchSpaceSpec& spec, UnifiedFn&& unified) {
  double total = 0.0;
  std::size_t ch = spec.input_channels;
  for (const auto& layer : spec.layers) {
    const double cin = static_cast<double>(ch), cout = static_cast<double>(layer.out_channels);
    switch (layer.kind) {
      case LayerKind::FixedConv:
        total += cout * cin * static_cast<double>(layer.kernel * layer.kernel) + 2 * cout;
        break;
      case LayerKind::FixedMB1:
        total += cin * static_cast<double>(layer.kernel * layer.kernel) + 2 * cin + cin * cout + 2 * cout;
        break;
      case LayerKind::Unified:
        total += unified(cin, cout);
        break;
      case LayerKind::AvgPool:
        continue;
      case LayerKind::Classifier:
        total += cin * cout + cout;
        break;
    }
    ch = layer.out_channels;
  }
  return total;
}

// One unified block per layer: shared expand/project pointwise convs, one
// depthwise kernel (+BN) per candidate size per slot, and one shadow BN set
// per reachable expansion rate.
inline double count_unified_supernet_params(const SearchSpaceSpec& spec) {
  return count_params_with(spec, [&](double c1, double c3) {
    const double emax = spec.e_max;
    double kernel_params = 0.0;
    for (int k : spec.kernels) kernel_params += c1 * k * k + 2 * c1;
    const double sbn_sets = spec.e_max - spec.e_min + 1;
    return emax * c1 * c1 + 2 * emax * c1 + emax * kernel_params + emax * c1 * c3 + sbn_sets * 2 * c3;
  });
}

// One standalone MBConv block per listed layer configuration per layer, the
// way a conventional single-path supernet materialises each candidate.
inline double count_multiblock_supernet_params(const SearchSpaceSpec& spec,
                                               const std::vector<LayerConfig>& configs) {
  return count_params_with(spec, [&](double c1, double c3) {
    double total = 0.0;
    for (const auto& cfg : configs) {
      const double e = expansion_of(spec, cfg);
      double dw = 0.0;
      for (int op : cfg)
        if (!spec.is_skip(op)) {
          const double k = spec.kernels[static_cast<std::size_t>(op)];
          dw += c1 * k * k;
        }
      total += e * c1 * c1 + 2 * e * c1 + dw + 2 * e * c1 + e * c1 * c3 + 2 * c3;
    }
    return total;
  });
}

// Multiblock supernet with the first k canonical configurations per layer.
inline double count_multiblock_supernet_params(const SearchSpaceSpec& spec, std::size_t k) {
  auto configs = enumerate_layer_configs(spec);
  if (k == 0 || k > configs.size())
    throw ContractError("multiblock size " + std::to_string(k) + " outside [1," +
                        std::to_string(configs.size()) + "]");
  configs.resize(k);
  return count_multiblock_supernet_params(spec, configs);
}

}  // namespace sgnas
