#pragma once

// Continuous relaxation of sub-block choices: Gumbel-softmax weights, the
// weighted mixture of candidate outputs, temperature annealing, and the
// projection of logits back onto a canonical discrete architecture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <vector>

#include "sgnas/binary_io.hpp"
#include "sgnas/ops.hpp"
#include "sgnas/random.hpp"
#include "sgnas/search_space.hpp"

namespace sgnas {

// Logits alpha[layer][slot][op]; each (layer, slot) is an independent
// categorical over the candidate ops.
struct ArchParams {
  std::size_t layers = 0, slots = 0, ops = 0;
  std::vector<float> alpha;

  static ArchParams zeros(const SearchSpaceSpec& spec) {
    ArchParams p;
    p.layers = spec.searchable_count();
    p.slots = spec.slots();
    p.ops = spec.op_count();
    p.alpha.assign(p.layers * p.slots * p.ops, 0.0f);
    return p;
  }

  float at(std::size_t l, std::size_t s, std::size_t o) const { return alpha[(l * slots + s) * ops + o]; }
  float& at(std::size_t l, std::size_t s, std::size_t o) { return alpha[(l * slots + s) * ops + o]; }

  void check(const SearchSpaceSpec& spec) const {
    if (layers != spec.searchable_count() || slots != spec.slots() || ops != spec.op_count() ||
        alpha.size() != layers * slots * ops)
      throw DimensionError("architecture parameters do not match the search space");
    for (float v : alpha)
      if (!std::isfinite(v)) throw NumericError("non-finite architecture logit");
  }

  // [layers*slots, ops] view for the relaxation ops.
  template <typename T = float>
  BasicTensor<T> tensor(bool requires_grad = false) const {
    return BasicTensor<T>::from({layers * slots, ops}, std::vector<T>(alpha.begin(), alpha.end()),
                                requires_grad);
  }

  // Flat binary record: "SGAP", version, three extents, row-major f32.
  void write_binary(std::ostream& os) const {
    os.write("SGAP", 4);
    binio::put_u32(os, 1);
    binio::put_u32(os, static_cast<std::uint32_t>(layers));
    binio::put_u32(os, static_cast<std::uint32_t>(slots));
    binio::put_u32(os, static_cast<std::uint32_t>(ops));
    for (float v : alpha) binio::put_f32(os, v);
  }

  static ArchParams read_binary(std::istream& is) {
    char magic[4];
    binio::read_exact(is, magic, 4);
    if (std::string(magic, 4) != "SGAP") throw FormatError("not an architecture-parameter record");
    if (binio::get_u32(is) != 1) throw FormatError("unsupported architecture-parameter version");
    ArchParams p;
    p.layers = binio::get_u32(is);
    p.slots = binio::get_u32(is);
    p.ops = binio::get_u32(is);
    if (p.layers * p.slots * p.ops > (1u << 24)) throw FormatError("architecture-parameter record too large");
    p.alpha.resize(p.layers * p.slots * p.ops);
    for (float& v : p.alpha) v = binio::get_f32(is);
    return p;
  }

  void write_csv(std::ostream& os, const SearchSpaceSpec& spec) const {
    os << "layer,sub_block,op,alpha\n";
    os.precision(9);
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t s = 0; s < slots; ++s)
        for (std::size_t o = 0; o < ops; ++o)
          os << l << ',' << s << ',' << spec.op_name(static_cast<int>(o)) << ',' << at(l, s, o) << '\n';
  }
};

struct TemperatureSchedule {
  double tau_init = 5.0;
  double decay = 0.95;
  double tau(std::size_t epoch) const { return tau_init * std::pow(decay, static_cast<double>(epoch)); }
};

// Gumbel(0,1) noise with u clamped away from 0 and 1.
inline double gumbel_noise(Rng& rng) {
  const double u = std::clamp(uniform01(rng), 1e-10, 1.0 - 1e-10);
  return -std::log(-std::log(u));
}

// m = softmax((alpha + g) / tau) row-wise over a [slots, ops] logit tensor.
// With stochastic == false the noise g is zero.
template <typename T>
BasicTensor<T> gumbel_weights(const BasicTensor<T>& alpha, double tau, Rng& rng, bool stochastic) {
  if (!(tau > 0.0)) throw ContractError("Gumbel-softmax temperature must be positive");
  if (alpha.rank() != 2) throw DimensionError("gumbel_weights expects [slots, ops] logits");
  BasicTensor<T> shifted = alpha;
  if (stochastic) {
    std::vector<T> g(alpha.size());
    for (auto& v : g) v = static_cast<T>(gumbel_noise(rng));
    shifted = add(alpha, BasicTensor<T>::from(alpha.shape(), std::move(g)));
  }
  return softmax(scale(shifted, static_cast<T>(1.0 / tau)));
}

// Weighted sum of candidate-op outputs of one sub-block.
template <typename T>
BasicTensor<T> mixture_forward(const std::vector<BasicTensor<T>>& outputs, const BasicTensor<T>& weights) {
  return weighted_sum(outputs, weights);
}

// Per-slot argmax, then demote surplus SKIPs (smallest margin over the best
// kernel first) until the expansion bound holds. Ops stay in their slots.
inline ArchEncoding discretize_slots(const ArchParams& alpha, const SearchSpaceSpec& spec) {
  alpha.check(spec);
  ArchEncoding a;
  for (std::size_t l = 0; l < alpha.layers; ++l) {
    LayerConfig cfg(alpha.slots);
    std::vector<int> best_kernel(alpha.slots);
    for (std::size_t s = 0; s < alpha.slots; ++s) {
      std::size_t arg = 0;
      for (std::size_t o = 1; o < alpha.ops; ++o)
        if (alpha.at(l, s, o) > alpha.at(l, s, arg)) arg = o;
      cfg[s] = static_cast<int>(arg);
      std::size_t bk = 0;
      for (std::size_t o = 1; o < spec.kernels.size(); ++o)
        if (alpha.at(l, s, o) > alpha.at(l, s, bk)) bk = o;
      best_kernel[s] = static_cast<int>(bk);
    }
    while (skip_count(spec, cfg) > spec.max_skips()) {
      std::size_t victim = alpha.slots;
      float smallest = std::numeric_limits<float>::infinity();
      for (std::size_t s = 0; s < alpha.slots; ++s) {
        if (!spec.is_skip(cfg[s])) continue;
        const float margin = alpha.at(l, s, static_cast<std::size_t>(spec.skip_op())) -
                             alpha.at(l, s, static_cast<std::size_t>(best_kernel[s]));
        if (margin < smallest) {
          smallest = margin;
          victim = s;
        }
      }
      cfg[victim] = best_kernel[victim];
    }
    a.layers.push_back(std::move(cfg));
  }
  return a;
}

inline ArchEncoding discretize(const ArchParams& alpha, const SearchSpaceSpec& spec) {
  return canonicalize(spec, discretize_slots(alpha, spec));
}

}  // namespace sgnas
