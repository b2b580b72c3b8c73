#pragma once

// Unified supernet. Each searchable layer is one inverted bottleneck whose
// expanded representation is split into e_max equal channel slices; every
// slice (sub-block) runs one candidate op, the slices are concatenated and
// projected, and a shadow BN set chosen by the realised expansion rate
// normalises the projection.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sgnas/checkpoint.hpp"
#include "sgnas/dataset.hpp"
#include "sgnas/ops.hpp"
#include "sgnas/optim.hpp"
#include "sgnas/relaxation.hpp"
#include "sgnas/search_space.hpp"

namespace sgnas {

struct BatchNormLayer {
  Tensor gamma, beta;
  BNStats<float> stats;

  BatchNormLayer() = default;
  explicit BatchNormLayer(std::size_t c)
      : gamma(Tensor::from({c}, std::vector<float>(c, 1.0f), true)),
        beta(Tensor::zeros({c}, true)),
        stats(c) {}

  Tensor operator()(const Tensor& x, bool training) { return batch_norm(x, gamma, beta, stats, training); }
};

namespace detail {

inline Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  std::vector<float> v(numel(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : v) x = static_cast<float>(normal(rng, 0.0, sd));
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace detail

// Visitors over everything a checkpoint must hold.
using ParamVisitor = std::function<void(const std::string&, Tensor&)>;
using StatsVisitor = std::function<void(const std::string&, BNStats<float>&)>;

class UnifiedBlock {
 public:
  UnifiedBlock(const SearchSpaceSpec& spec, std::size_t c_in, std::size_t c_out, std::size_t stride, Rng& rng)
      : spec_(&spec), c1_(c_in), c3_(c_out), stride_(stride) {
    const std::size_t emax = spec.slots(), wide = emax * c_in;
    expand_w_ = detail::kaiming({wide, c_in, 1, 1}, c_in, rng);
    expand_bn_ = BatchNormLayer(wide);
    dw_.resize(emax);
    for (std::size_t s = 0; s < emax; ++s)
      for (int k : spec.kernels) {
        const auto kk = static_cast<std::size_t>(k);
        dw_[s].push_back({detail::kaiming({c_in, 1, kk, kk}, kk * kk, rng), BatchNormLayer(c_in)});
      }
    project_w_ = detail::kaiming({c_out, wide, 1, 1}, wide, rng);
    for (int e = spec.e_min; e <= spec.e_max; ++e) sbn_.emplace_back(c_out);
  }

  std::size_t in_channels() const { return c1_; }
  std::size_t out_channels() const { return c3_; }
  bool residual() const { return stride_ == 1 && c1_ == c3_; }

  // Discrete path: cfg must be a canonical layer config.
  Tensor forward(const Tensor& x, const LayerConfig& cfg, bool training) {
    if (canonicalize_layer(*spec_, cfg) != cfg) throw ValidityError("layer config is not canonical");
    return forward_raw(x, cfg, static_cast<std::size_t>(expansion_of(*spec_, cfg) - spec_->e_min), training);
  }

  // Any per-slot op assignment (SKIP bound not enforced) with an explicit
  // SBN set. Exposed for structural tests.
  Tensor forward_raw(const Tensor& x, const LayerConfig& cfg, std::size_t sbn_index, bool training) {
    if (cfg.size() != spec_->slots()) throw ValidityError("layer config has wrong slot count");
    if (sbn_index >= sbn_.size()) throw ValidityError("shadow BN index out of range");
    const Tensor y1 = expand(x, training);
    std::vector<Tensor> parts;
    for (std::size_t s = 0; s < cfg.size(); ++s) parts.push_back(apply_op(y1, s, cfg[s], training));
    return project(x, concat_channels(parts), sbn_index, training);
  }

  // Mixture path: rows [first_row, first_row + slots) of weights hold one
  // simplex over ops per slot.
  Tensor forward_mixture(const Tensor& x, const Tensor& weights, std::size_t first_row, bool training) {
    const std::size_t ops = spec_->op_count();
    if (weights.rank() != 2 || weights.dim(0) < first_row + spec_->slots() || weights.dim(1) != ops)
      throw DimensionError("mixture weights too small for rows " + std::to_string(first_row) + ".." +
                           std::to_string(first_row + spec_->slots()) + " x " + std::to_string(ops) + ", got " +
                           shape_str(weights.shape()));
    const Tensor y1 = expand(x, training);
    std::vector<Tensor> parts;
    for (std::size_t s = 0; s < spec_->slots(); ++s) {
      std::vector<Tensor> cand;
      for (std::size_t o = 0; o < ops; ++o) cand.push_back(apply_op(y1, s, static_cast<int>(o), training));
      parts.push_back(mixture_forward(cand, row(weights, first_row + s)));
    }
    return project(x, concat_channels(parts), mixture_sbn_index(weights, first_row), training);
  }

  // round(sum over slots of P(non-SKIP)), clamped to [e_min, e_max].
  std::size_t mixture_sbn_index(const Tensor& weights, std::size_t first_row) const {
    double e = static_cast<double>(spec_->slots());
    if (spec_->has_skip())
      for (std::size_t s = 0; s < spec_->slots(); ++s)
        e -= weights[(first_row + s) * spec_->op_count() + static_cast<std::size_t>(spec_->skip_op())];
    const long r = std::lround(e);
    return static_cast<std::size_t>(std::clamp<long>(r, spec_->e_min, spec_->e_max) - spec_->e_min);
  }

  void visit(const std::string& prefix, const ParamVisitor& pv, const StatsVisitor& sv) {
    pv(prefix + ".expand.w", expand_w_);
    visit_bn(prefix + ".expand.bn", expand_bn_, pv, sv);
    for (std::size_t s = 0; s < dw_.size(); ++s)
      for (std::size_t k = 0; k < dw_[s].size(); ++k) {
        const std::string p = prefix + ".slot" + std::to_string(s) + ".k" + std::to_string(spec_->kernels[k]);
        pv(p + ".w", dw_[s][k].w);
        visit_bn(p + ".bn", dw_[s][k].bn, pv, sv);
      }
    pv(prefix + ".project.w", project_w_);
    for (std::size_t i = 0; i < sbn_.size(); ++i)
      visit_bn(prefix + ".sbn" + std::to_string(spec_->e_min + static_cast<int>(i)), sbn_[i], pv, sv);
  }

  BNStats<float>& sbn_stats(int expansion) {
    return sbn_.at(static_cast<std::size_t>(expansion - spec_->e_min)).stats;
  }
  Tensor& kernel_weight(std::size_t slot, std::size_t kernel_index) { return dw_.at(slot).at(kernel_index).w; }

  static void visit_bn(const std::string& name, BatchNormLayer& bn, const ParamVisitor& pv, const StatsVisitor& sv) {
    pv(name + ".gamma", bn.gamma);
    pv(name + ".beta", bn.beta);
    sv(name, bn.stats);
  }

 private:
  struct DwOp {
    Tensor w;
    BatchNormLayer bn;
  };

  Tensor expand(const Tensor& x, bool training) { return relu(expand_bn_(conv2d(x, expand_w_, 1, 1), training)); }

  Tensor apply_op(const Tensor& y1, std::size_t slot, int op, bool training) {
    const Tensor slice = slice_channels(y1, slot * c1_, (slot + 1) * c1_);
    if (spec_->is_skip(op)) return subsample(slice, stride_);
    auto& d = dw_.at(slot).at(static_cast<std::size_t>(op));
    return relu(d.bn(conv2d(slice, d.w, stride_, c1_), training));
  }

  Tensor project(const Tensor& x, const Tensor& cat, std::size_t sbn_index, bool training) {
    Tensor y = sbn_[sbn_index](conv2d(cat, project_w_, 1, 1), training);
    return residual() ? add(y, x) : y;
  }

  const SearchSpaceSpec* spec_;
  std::size_t c1_, c3_, stride_;
  Tensor expand_w_;
  BatchNormLayer expand_bn_;
  std::vector<std::vector<DwOp>> dw_;
  Tensor project_w_;
  std::vector<BatchNormLayer> sbn_;
};

class Supernet {
 public:
  explicit Supernet(SearchSpaceSpec spec, std::uint64_t seed = 0) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(seed);
    std::size_t ch = spec_.input_channels;
    for (const auto& l : spec_.layers) {
      Layer layer;
      layer.spec = l;
      switch (l.kind) {
        case LayerKind::FixedConv:
          layer.w = detail::kaiming({l.out_channels, ch, l.kernel, l.kernel}, ch * l.kernel * l.kernel, rng);
          layer.bn = BatchNormLayer(l.out_channels);
          break;
        case LayerKind::FixedMB1:
          layer.w = detail::kaiming({ch, 1, l.kernel, l.kernel}, l.kernel * l.kernel, rng);
          layer.bn = BatchNormLayer(ch);
          layer.w2 = detail::kaiming({l.out_channels, ch, 1, 1}, ch, rng);
          layer.bn2 = BatchNormLayer(l.out_channels);
          break;
        case LayerKind::Unified:
          blocks_.emplace_back(spec_, ch, l.out_channels, l.stride, rng);
          break;
        case LayerKind::AvgPool:
          break;
        case LayerKind::Classifier: {
          std::vector<float> w(l.out_channels * ch);
          const double bound = 1.0 / std::sqrt(static_cast<double>(ch));
          for (auto& v : w) v = static_cast<float>(uniform(rng, -bound, bound));
          layer.w = Tensor::from({l.out_channels, ch}, std::move(w), true);
          layer.b = Tensor::zeros({l.out_channels}, true);
          break;
        }
      }
      if (l.kind != LayerKind::AvgPool) ch = l.out_channels;
      layers_.push_back(std::move(layer));
    }
  }

  // Blocks hold a pointer to spec_; copying would leave them dangling.
  Supernet(const Supernet&) = delete;
  Supernet& operator=(const Supernet&) = delete;

  const SearchSpaceSpec& spec() const { return spec_; }
  std::vector<UnifiedBlock>& blocks() { return blocks_; }

  Tensor forward(const Tensor& x, const ArchEncoding& a, bool training) {
    if (a.layers.size() != blocks_.size())
      throw ValidityError("encoding has " + std::to_string(a.layers.size()) + " layers, supernet has " +
                          std::to_string(blocks_.size()));
    return run(x, training, [&](UnifiedBlock& b, const Tensor& h, std::size_t l) {
      return b.forward(h, a.layers[l], training);
    });
  }

  // weights: [L*slots, ops] simplex rows, as produced by gumbel_weights.
  Tensor forward_mixture(const Tensor& x, const Tensor& weights, bool training) {
    const std::size_t slots = spec_.slots(), ops = spec_.op_count();
    if (weights.rank() != 2 || weights.dim(0) != blocks_.size() * slots || weights.dim(1) != ops)
      throw DimensionError("mixture weights must be [" + std::to_string(blocks_.size() * slots) + ", " +
                           std::to_string(ops) + "], got " + shape_str(weights.shape()));
    return run(x, training, [&](UnifiedBlock& b, const Tensor& h, std::size_t l) {
      return b.forward_mixture(h, weights, l * slots, training);
    });
  }

  void visit(const ParamVisitor& pv, const StatsVisitor& sv) {
    std::size_t u = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& layer = layers_[i];
      const std::string p = "supernet.layer" + std::to_string(i);
      switch (layer.spec.kind) {
        case LayerKind::FixedConv:
          pv(p + ".w", layer.w);
          UnifiedBlock::visit_bn(p + ".bn", layer.bn, pv, sv);
          break;
        case LayerKind::FixedMB1:
          pv(p + ".dw.w", layer.w);
          UnifiedBlock::visit_bn(p + ".dw.bn", layer.bn, pv, sv);
          pv(p + ".pw.w", layer.w2);
          UnifiedBlock::visit_bn(p + ".pw.bn", layer.bn2, pv, sv);
          break;
        case LayerKind::Unified:
          blocks_[u++].visit(p, pv, sv);
          break;
        case LayerKind::AvgPool:
          break;
        case LayerKind::Classifier:
          pv(p + ".w", layer.w);
          pv(p + ".b", layer.b);
          break;
      }
    }
  }

  std::vector<Tensor> parameters() {
    std::vector<Tensor> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(t); }, [](const std::string&, BNStats<float>&) {});
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& t : parameters()) n += t.size();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& t : parameters()) t.set_requires_grad(on);
  }

  std::vector<BNStats<float>> bn_snapshot() {
    std::vector<BNStats<float>> out;
    visit([](const std::string&, Tensor&) {}, [&](const std::string&, BNStats<float>& s) { out.push_back(s); });
    return out;
  }

  void bn_restore(const std::vector<BNStats<float>>& snap) {
    std::size_t i = 0;
    visit([](const std::string&, Tensor&) {}, [&](const std::string&, BNStats<float>& s) { s = snap.at(i++); });
  }

  // FNV-1a over all weights and BN statistics; detects any mutation.
  std::uint64_t state_hash() {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::span<const float> v) {
      for (float f : v) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        for (int k = 0; k < 4; ++k) {
          h ^= (bits >> (8 * k)) & 0xffu;
          h *= 1099511628211ull;
        }
      }
    };
    visit([&](const std::string&, Tensor& t) { mix(t.values()); },
          [&](const std::string&, BNStats<float>& s) {
            mix(s.running_mean);
            mix(s.running_var);
          });
    return h;
  }

  void save_to(Checkpoint& ck) {
    ck.spec_hash = spec_.hash();
    visit([&](const std::string& n, Tensor& t) { ck.put(n, t); },
          [&](const std::string& n, BNStats<float>& s) {
            ck.put(n + ".running_mean", {s.channels()}, s.running_mean);
            ck.put(n + ".running_var", {s.channels()}, s.running_var);
          });
  }

  void load_from(const Checkpoint& ck) {
    if (ck.spec_hash != spec_.hash()) throw FormatError("checkpoint was written for a different search space");
    visit([&](const std::string& n, Tensor& t) { ck.load_into(n, t); },
          [&](const std::string& n, BNStats<float>& s) {
            ck.load_into(n + ".running_mean", s.running_mean);
            ck.load_into(n + ".running_var", s.running_var);
          });
  }

 private:
  struct Layer {
    LayerSpec spec;
    Tensor w, w2, b;
    BatchNormLayer bn, bn2;
  };

  template <typename UnifiedFn>
  Tensor run(const Tensor& x, bool training, UnifiedFn&& unified) {
    if (x.rank() != 4 || x.dim(1) != spec_.input_channels)
      throw DimensionError("supernet input must be [N, " + std::to_string(spec_.input_channels) + ", H, W], got " +
                           shape_str(x.shape()));
    Tensor h = x;
    std::size_t u = 0;
    for (auto& layer : layers_) {
      const auto& l = layer.spec;
      switch (l.kind) {
        case LayerKind::FixedConv:
          h = relu(layer.bn(conv2d(h, layer.w, l.stride, 1), training));
          break;
        case LayerKind::FixedMB1: {
          const std::size_t c = h.dim(1);
          Tensor y = relu(layer.bn(conv2d(h, layer.w, l.stride, c), training));
          y = layer.bn2(conv2d(y, layer.w2, 1, 1), training);
          h = (l.stride == 1 && c == l.out_channels) ? add(y, h) : y;
          break;
        }
        case LayerKind::Unified:
          h = unified(blocks_[u], h, u);
          ++u;
          break;
        case LayerKind::AvgPool:
          h = global_avg_pool(h);
          break;
        case LayerKind::Classifier:
          if (h.rank() != 2) h = global_avg_pool(h);
          h = dense(h, layer.w, layer.b);
          break;
      }
    }
    return h;
  }

  SearchSpaceSpec spec_;
  std::vector<Layer> layers_;
  std::vector<UnifiedBlock> blocks_;
};

// ---------------------------------------------------------------- training

struct SupernetHyper {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  double lr = 0.045;
  double momentum = 0.9;
  double weight_decay = 4e-5;
};

struct SupernetStep {
  std::size_t epoch = 0, step = 0;
  double loss = 0.0, lr = 0.0;
  std::string encoding;
};

// Single-path training under the strict-fairness schedule: every step
// activates one canonical encoding; only its weights and SBN set move.
class SupernetTrainer {
 public:
  SupernetTrainer(Supernet& net, const ImageSet& train, SupernetHyper hyper, std::uint64_t seed)
      : net_(net),
        train_(train),
        hyper_(hyper),
        rng_(seed),
        sampler_(net.spec(), net.spec().op_count(), Rng(seed ^ 0x5851f42d4c957f2dull)),
        opt_(net.parameters(), hyper.lr, hyper.momentum, hyper.weight_decay) {
    if (hyper.batch_size == 0 || train.size() < hyper.batch_size)
      throw ContractError("training set smaller than one batch");
    net_.set_trainable(true);
  }

  std::size_t epoch() const { return epoch_; }
  std::size_t steps_per_epoch() const { return train_.size() / hyper_.batch_size; }
  const StrictFairnessSampler& sampler() const { return sampler_; }

  // Runs one epoch and returns its per-step records.
  std::vector<SupernetStep> run_epoch() {
    const double lr = cosine_lr(static_cast<double>(epoch_), static_cast<double>(hyper_.epochs), hyper_.lr);
    opt_.set_lr(lr);
    const auto order = permutation(train_.size(), rng_);
    std::vector<SupernetStep> out;
    for (std::size_t b = 0; b < steps_per_epoch(); ++b) {
      if (pending_.empty()) {
        auto round = sampler_.next_round();
        for (auto it = round.rbegin(); it != round.rend(); ++it) pending_.push_back(it->canonical);
      }
      const ArchEncoding a = pending_.back();
      pending_.pop_back();
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b * hyper_.batch_size),
                                   order.begin() + static_cast<std::ptrdiff_t>((b + 1) * hyper_.batch_size));
      opt_.zero_grad();
      const Tensor loss = cross_entropy_loss(net_.forward(train_.batch(idx), a, true), train_.batch_labels(idx));
      if (!loss.all_finite())
        throw NumericError("supernet loss diverged at epoch " + std::to_string(epoch_) + " step " +
                           std::to_string(b) + " for encoding " + encoding_to_compact(net_.spec(), a));
      backward(loss);
      opt_.step();
      out.push_back({epoch_, b, loss.item(), lr, encoding_to_compact(net_.spec(), a)});
    }
    ++epoch_;
    return out;
  }

  void save_to(Checkpoint& ck) {
    net_.save_to(ck);
    ck.blobs["supernet.epoch"] = std::to_string(epoch_);
    ck.blobs["supernet.rng"] = rng_state(rng_);
    ck.blobs["supernet.sampler_rng"] = rng_state(sampler_.rng());
  }

 private:
  Supernet& net_;
  const ImageSet& train_;
  SupernetHyper hyper_;
  Rng rng_;
  StrictFairnessSampler sampler_;
  Sgd<float> opt_;
  std::vector<ArchEncoding> pending_;
  std::size_t epoch_ = 0;
};

// ---------------------------------------------------------------- evaluation

struct EvalOptions {
  bool recalibrate = true;
  std::size_t recalibration_batches = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

// Re-estimates BN running statistics for subnet `a` by streaming a fixed,
// seeded sample of training batches through it in training mode. Momentum
// 1/(t+1) makes the result a plain average over the batches.
inline void recalibrate_bn(Supernet& net, const ArchEncoding& a, const ImageSet& train, const EvalOptions& opt) {
  if (train.size() < opt.batch_size) throw ContractError("training stream smaller than one batch");
  std::vector<float> momentum;
  net.visit([](const std::string&, Tensor&) {}, [&](const std::string&, BNStats<float>& s) { momentum.push_back(s.momentum); });
  Rng rng(opt.seed);
  for (std::size_t t = 0; t < opt.recalibration_batches; ++t) {
    net.visit([](const std::string&, Tensor&) {},
              [&](const std::string&, BNStats<float>& s) { s.momentum = 1.0f / static_cast<float>(t + 1); });
    std::vector<std::size_t> idx(opt.batch_size);
    for (auto& i : idx) i = uniform_index(rng, train.size());
    net.forward(train.batch(idx), a, true);
  }
  std::size_t k = 0;
  net.visit([](const std::string&, Tensor&) {}, [&](const std::string&, BNStats<float>& s) { s.momentum = momentum[k++]; });
}

// Top-1 accuracy (percent) of subnet `a` with inherited weights. Runs without
// autograd; BN statistics touched by recalibration are restored afterwards.
inline double evaluate_subnet(Supernet& net, const ArchEncoding& a, const ImageSet& val, const ImageSet& train,
                              const EvalOptions& opt = {}) {
  require_valid(net.spec(), a);
  if (val.size() == 0) throw ContractError("empty validation set");
  const auto snapshot = net.bn_snapshot();
  auto params = net.parameters();
  std::vector<bool> trainable;
  for (auto& t : params) trainable.push_back(t.requires_grad());
  net.set_trainable(false);
  if (opt.recalibrate) recalibrate_bn(net, a, train, opt);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < val.size(); start += opt.batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(val.size(), start + opt.batch_size); ++i) idx.push_back(i);
    const Tensor logits = net.forward(val.batch(idx), a, false);
    const std::size_t k = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits[r * k + j] > logits[r * k + arg]) arg = j;
      correct += static_cast<int>(arg) == val.labels[idx[r]];
    }
  }
  net.bn_restore(snapshot);
  for (std::size_t i = 0; i < params.size(); ++i) params[i].set_requires_grad(trainable[i]);
  return 100.0 * static_cast<double>(correct) / static_cast<double>(val.size());
}

}  // namespace sgnas
