#pragma once

// Architecture generator: maps a cost target and a one-hot prior
// architecture to architecture logits in a single forward pass.
//
// Input map [1, 2, L, slots*ops]: channel 0 is the prior, channel 1 the
// expansion layer applied to the normalised target c in [0, 1]
// (E(c) = c * W_e + b_e, one weight and bias per map position). A stack of
// 3x3 stride-1 convolutions with ReLU feeds a linear 1x1 head; the prior is
// added back to the head output to form alpha.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgnas/checkpoint.hpp"
#include "sgnas/cost_model.hpp"
#include "sgnas/optim.hpp"
#include "sgnas/relaxation.hpp"
#include "sgnas/supernet.hpp"
#include "sgnas/tabular.hpp"

namespace sgnas {

struct GeneratorConfig {
  double lambda = 3e-4;
  double cost_unit = 1e6;  // constraint loss measures cost gaps in this unit
  double c_low = 0.0, c_high = 0.0;
  std::size_t channels = 32;
  std::size_t depth = 3;
  bool use_prior = true;
  bool enforce_budget = true;
  Accounting accounting = Accounting::SimulatedExpansion;
  double lr = 1e-3, beta1 = 0.5, beta2 = 0.999, weight_decay = 0.0;
  bool cosine_lr = false;  // anneal lr over epochs instead of keeping it fixed
  TemperatureSchedule tau;
  std::size_t epochs = 50;
  std::size_t steps_per_epoch = 100;

  void validate() const {
    if (!(lambda > 0)) throw ConfigError("generator lambda must be positive");
    if (!(cost_unit > 0)) throw ConfigError("generator cost_unit must be positive");
    if (!(c_low > 0) || !(c_high > c_low)) throw ConfigError("generator needs 0 < c_low < c_high");
    if (channels == 0 || depth == 0) throw ConfigError("generator trunk needs channels and depth");
  }

  nlohmann::json to_json() const {
    return {{"lambda", lambda},           {"cost_unit", cost_unit}, {"c_low", c_low},
            {"c_high", c_high},           {"channels", channels},   {"depth", depth},
            {"use_prior", use_prior},     {"enforce_budget", enforce_budget}, {"accounting", accounting_name(accounting)},
            {"lr", lr},                   {"beta1", beta1},         {"beta2", beta2},
            {"weight_decay", weight_decay}, {"cosine_lr", cosine_lr}, {"tau_init", tau.tau_init}, {"tau_decay", tau.decay},
            {"epochs", epochs},           {"steps_per_epoch", steps_per_epoch}};
  }

  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (it->is_number_integer() && it->get<std::int64_t>() < 0 &&
          (k == "channels" || k == "depth" || k == "epochs" || k == "steps_per_epoch"))
        throw ConfigError("generator key '" + k + "' must be non-negative");
      try {
        if (k == "lambda") c.lambda = it->get<double>();
        else if (k == "cost_unit") c.cost_unit = it->get<double>();
        else if (k == "c_low") c.c_low = it->get<double>();
        else if (k == "c_high") c.c_high = it->get<double>();
        else if (k == "channels") c.channels = it->get<std::size_t>();
        else if (k == "depth") c.depth = it->get<std::size_t>();
        else if (k == "use_prior") c.use_prior = it->get<bool>();
        else if (k == "enforce_budget") c.enforce_budget = it->get<bool>();
        else if (k == "accounting") c.accounting = parse_accounting(it->get<std::string>());
        else if (k == "lr") c.lr = it->get<double>();
        else if (k == "beta1") c.beta1 = it->get<double>();
        else if (k == "beta2") c.beta2 = it->get<double>();
        else if (k == "cosine_lr") c.cosine_lr = it->get<bool>();
        else if (k == "weight_decay") c.weight_decay = it->get<double>();
        else if (k == "tau_init") c.tau.tau_init = it->get<double>();
        else if (k == "tau_decay") c.tau.decay = it->get<double>();
        else if (k == "epochs") c.epochs = it->get<std::size_t>();
        else if (k == "steps_per_epoch") c.steps_per_epoch = it->get<std::size_t>();
        else throw ConfigError("unknown generator key '" + k + "'");
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("generator key '" + k + "': " + e.what());
      }
    }
    return c;
  }
};

struct GenerationRequest {
  double target = 0.0;
  std::optional<RandomPrior> prior;  // overrides the persisted prior
  bool fresh_prior = false;          // sample a new prior from `seed`
  bool deterministic = true;         // no Gumbel noise
  std::uint64_t seed = 0;
  bool allow_untrained = false;
};

struct GenerationResult {
  ArchParams alpha;
  ArchEncoding encoding;
  double cost = 0.0;
  bool extrapolated = false;  // target outside [c_low, c_high]
  bool repaired = false;      // budget enforcement changed the argmax
};

// Greedy budget repair on slot-aligned ops: while over target, apply the
// single-slot switch to a cheaper op that gives up the least logit per unit
// of cost saved; then spend leftover budget on switches that raise the logit.
inline ArchEncoding enforce_budget(const SearchSpaceSpec& spec, const ArchParams& alpha, const CostTable& table,
                                   ArchEncoding a, double target) {
  while (table.architecture_cost(a) > target) {
    double best_ratio = std::numeric_limits<double>::infinity();
    std::size_t bl = 0, bs = 0;
    int bo = -1;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
      for (std::size_t s = 0; s < spec.slots(); ++s) {
        const int cur = a.layers[l][s];
        for (int o = 0; o < static_cast<int>(spec.op_count()); ++o) {
          const double saved = table.at(l, s, static_cast<std::size_t>(cur)) - table.at(l, s, static_cast<std::size_t>(o));
          if (o == cur || !(saved > 0)) continue;
          auto cfg = a.layers[l];
          cfg[s] = o;
          if (skip_count(spec, cfg) > spec.max_skips()) continue;
          const double lost = alpha.at(l, s, static_cast<std::size_t>(cur)) - alpha.at(l, s, static_cast<std::size_t>(o));
          const double ratio = lost / saved;
          if (ratio < best_ratio) {
            best_ratio = ratio;
            bl = l;
            bs = s;
            bo = o;
          }
        }
      }
    if (bo < 0)
      throw InfeasibleError("cost target " + detail::format_double(target) + " is below the cheapest architecture");
    a.layers[bl][bs] = bo;
  }
  // Take back switches that the remaining slack affords, largest logit gain first.
  while (true) {
    const double cost = table.architecture_cost(a);
    double best_gain = 0.0;
    std::size_t bl = 0, bs = 0;
    int bo = -1;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
      for (std::size_t s = 0; s < spec.slots(); ++s) {
        const int cur = a.layers[l][s];
        for (int o = 0; o < static_cast<int>(spec.op_count()); ++o) {
          const double extra = table.at(l, s, static_cast<std::size_t>(o)) - table.at(l, s, static_cast<std::size_t>(cur));
          const double gain = alpha.at(l, s, static_cast<std::size_t>(o)) - alpha.at(l, s, static_cast<std::size_t>(cur));
          if (o == cur || !(gain > best_gain) || cost + extra > target) continue;
          auto cfg = a.layers[l];
          cfg[s] = o;
          if (skip_count(spec, cfg) > spec.max_skips()) continue;
          best_gain = gain;
          bl = l;
          bs = s;
          bo = o;
        }
      }
    if (bo < 0) break;
    a.layers[bl][bs] = bo;
  }
  return canonicalize(spec, std::move(a));
}

class ArchitectureGenerator {
 public:
  ArchitectureGenerator(SearchSpaceSpec spec, GeneratorConfig cfg, std::uint64_t seed)
      : spec_(std::move(spec)), cfg_(cfg), table_(build_cost_table(spec_, cfg.accounting)) {
    spec_.validate();
    cfg_.validate();
    rows_ = spec_.searchable_count();
    width_ = spec_.slots() * spec_.op_count();
    Rng rng(seed);
    prior_ = encode_prior(spec_, sample_uniform(spec_, rng));
    const std::size_t hw = rows_ * width_;
    std::vector<float> we(hw), be(hw);
    for (auto& v : we) v = static_cast<float>(normal(rng, 0.0, 1.0));
    for (auto& v : be) v = static_cast<float>(normal(rng, 0.0, 0.1));
    expand_w_ = Tensor::from({1, 1, rows_, width_}, std::move(we), true);
    expand_b_ = Tensor::from({1, 1, rows_, width_}, std::move(be), true);
    std::size_t in = 2;
    for (std::size_t d = 0; d < cfg_.depth; ++d) {
      trunk_.push_back(detail::kaiming({cfg_.channels, in, 3, 3}, in * 9, rng));
      in = cfg_.channels;
    }
    std::vector<float> hw_init(cfg_.channels);
    for (auto& v : hw_init) v = static_cast<float>(normal(rng, 0.0, 0.1 / std::sqrt(static_cast<double>(cfg_.channels))));
    head_w_ = Tensor::from({1, cfg_.channels, 1, 1}, std::move(hw_init), true);
    head_b_ = Tensor::zeros({1, 1, rows_, width_}, true);
  }

  const SearchSpaceSpec& spec() const { return spec_; }
  const GeneratorConfig& config() const { return cfg_; }
  GeneratorConfig& config() { return cfg_; }
  const CostTable& cost_table() const { return table_; }
  const RandomPrior& prior() const { return prior_; }
  void set_prior(RandomPrior p) {
    decode_prior(spec_, p);
    prior_ = std::move(p);
  }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  std::size_t trunk_forward_count() const { return trunk_forwards_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p{expand_w_, expand_b_};
    p.insert(p.end(), trunk_.begin(), trunk_.end());
    p.push_back(head_w_);
    p.push_back(head_b_);
    return p;
  }

  double normalize(double target) const { return (target - cfg_.c_low) / (cfg_.c_high - cfg_.c_low); }

  // alpha as a differentiable [L*slots, ops] tensor.
  Tensor logits(double target, const RandomPrior& prior) {
    if (!(target > 0) || !std::isfinite(target)) throw ContractError("cost target must be positive and finite");
    if (prior.layers != rows_ || prior.width != width_ || prior.values.size() != rows_ * width_)
      throw ContractError("prior shape " + std::to_string(prior.layers) + "x" + std::to_string(prior.width) +
                          " does not match generator input " + std::to_string(rows_) + "x" + std::to_string(width_));
    const auto b = cfg_.use_prior ? Tensor::from({1, 1, rows_, width_}, prior.values)
                                  : Tensor::zeros({1, 1, rows_, width_});
    const auto e = add(scale(expand_w_, static_cast<float>(normalize(target))), expand_b_);
    Tensor h = concat_channels(std::vector<Tensor>{b, e});
    ++trunk_forwards_;
    for (const auto& w : trunk_) h = relu(conv2d(h, w, 1, 1));
    Tensor out = add(conv2d(h, head_w_, 1, 1), head_b_);
    if (cfg_.use_prior) out = add(out, b);
    return reshape(out, {rows_ * spec_.slots(), spec_.op_count()});
  }

  GenerationResult generate(const GenerationRequest& req) {
    if (!trained_ && !req.allow_untrained) throw ContractError("generator has not been trained");
    RandomPrior prior = prior_;
    Rng rng(req.seed);
    if (req.prior) prior = *req.prior;
    else if (req.fresh_prior) prior = encode_prior(spec_, sample_uniform(spec_, rng));
    const Tensor a = logits(req.target, prior);
    GenerationResult r;
    r.alpha = ArchParams::zeros(spec_);
    std::copy(a.values().begin(), a.values().end(), r.alpha.alpha.begin());
    ArchParams noisy = r.alpha;
    if (!req.deterministic)
      for (auto& v : noisy.alpha) v += static_cast<float>(gumbel_noise(rng));
    const ArchEncoding slots = discretize_slots(noisy, spec_);
    r.encoding = canonicalize(spec_, slots);
    if (cfg_.enforce_budget) {
      auto fixed = enforce_budget(spec_, noisy, table_, slots, req.target);
      r.repaired = fixed != r.encoding;
      r.encoding = std::move(fixed);
    }
    r.cost = table_.architecture_cost(r.encoding);
    r.extrapolated = req.target < cfg_.c_low || req.target > cfg_.c_high;
    return r;
  }

  void save_to(Checkpoint& ck) const {
    auto params = parameters();
    for (std::size_t i = 0; i < params.size(); ++i) ck.put(param_name(i), params[i]);
    ck.put("generator.prior", {prior_.layers, prior_.width}, prior_.values);
    ck.blobs["generator.config"] = cfg_.to_json().dump();
    ck.blobs["generator.trained"] = trained_ ? "1" : "0";
    ck.blobs["generator.space_hash"] = std::to_string(spec_.hash());
  }

  void load_from(const Checkpoint& ck) {
    if (ck.blob("generator.space_hash") != std::to_string(spec_.hash()))
      throw FormatError("generator checkpoint was written for a different search space");
    auto params = parameters();
    for (std::size_t i = 0; i < params.size(); ++i) ck.load_into(param_name(i), params[i]);
    const auto& p = ck.get("generator.prior");
    RandomPrior prior{p.shape.at(0), p.shape.at(1), p.values};
    set_prior(std::move(prior));
    trained_ = ck.blob("generator.trained") == "1";
  }

  static GeneratorConfig config_from(const Checkpoint& ck) {
    return GeneratorConfig::from_json(nlohmann::json::parse(ck.blob("generator.config")));
  }

 private:
  std::string param_name(std::size_t i) const {
    if (i == 0) return "generator.expand.w";
    if (i == 1) return "generator.expand.b";
    if (i < 2 + trunk_.size()) return "generator.trunk" + std::to_string(i - 2) + ".w";
    return i == 2 + trunk_.size() ? "generator.head.w" : "generator.head.b";
  }

  SearchSpaceSpec spec_;
  GeneratorConfig cfg_;
  CostTable table_;
  std::size_t rows_ = 0, width_ = 0;
  RandomPrior prior_;
  Tensor expand_w_, expand_b_;
  std::vector<Tensor> trunk_;
  Tensor head_w_, head_b_;
  std::size_t trunk_forwards_ = 0;
  bool trained_ = false;
};

// ---------------------------------------------------------------- oracles

// The validation-loss term L_val as a function of relaxed weights.
class GeneratorOracle {
 public:
  virtual ~GeneratorOracle() = default;
  virtual Tensor loss(const Tensor& weights, Rng& rng) = 0;
  // Throws if the oracle's own state changed since construction.
  virtual void check_frozen() {}
};

// Expected error rate on a tabular bench: -E[acc] / 100.
class TabularOracle : public GeneratorOracle {
 public:
  explicit TabularOracle(const TabularBench& bench, SurrogateOptions opt = {}) : surrogate_(bench, opt) {}
  Tensor loss(const Tensor& weights, Rng&) override { return scale(surrogate_(weights), 0.01f); }

 private:
  TabularSurrogate surrogate_;
};

// Cross-entropy of the frozen supernet in mixture mode on a random
// validation batch. BN uses running statistics, so no state moves.
class SupernetOracle : public GeneratorOracle {
 public:
  SupernetOracle(Supernet& net, const ImageSet& val, std::size_t batch_size)
      : net_(net), val_(val), batch_(batch_size) {
    if (val.size() < batch_size || batch_size == 0) throw ContractError("validation set smaller than one batch");
    net_.set_trainable(false);
    hash_ = net_.state_hash();
  }

  Tensor loss(const Tensor& weights, Rng& rng) override {
    std::vector<std::size_t> idx(batch_);
    for (auto& i : idx) i = uniform_index(rng, val_.size());
    return cross_entropy_loss(net_.forward_mixture(val_.batch(idx), weights, false), val_.batch_labels(idx));
  }

  void check_frozen() override {
    if (net_.state_hash() != hash_) throw ContractError("supernet weights changed during generator training");
  }

 private:
  Supernet& net_;
  const ImageSet& val_;
  std::size_t batch_;
  std::uint64_t hash_ = 0;
};

// ---------------------------------------------------------------- training

struct GeneratorStep {
  std::size_t epoch = 0, step = 0;
  double target = 0.0, tau = 0.0;
  double val_loss = 0.0, constraint_loss = 0.0, total = 0.0;
  double expected_cost = 0.0;
};

class GeneratorTrainer {
 public:
  GeneratorTrainer(ArchitectureGenerator& gen, GeneratorOracle& oracle, std::uint64_t seed)
      : gen_(gen),
        oracle_(oracle),
        rng_(seed),
        opt_(gen.parameters(), gen.config().lr, gen.config().beta1, gen.config().beta2, gen.config().weight_decay) {}

  std::size_t epoch() const { return epoch_; }

  std::vector<GeneratorStep> run_epoch() {
    const auto& cfg = gen_.config();
    const double tau = cfg.tau.tau(epoch_);
    if (cfg.cosine_lr)
      opt_.set_lr(sgnas::cosine_lr(static_cast<double>(epoch_), static_cast<double>(cfg.epochs), cfg.lr));
    std::vector<GeneratorStep> out;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      GeneratorStep rec;
      rec.epoch = epoch_;
      rec.step = s;
      rec.tau = tau;
      rec.target = uniform(rng_, cfg.c_low, cfg.c_high);
      opt_.zero_grad();
      const Tensor w = gumbel_weights(gen_.logits(rec.target, gen_.prior()), tau, rng_, true);
      const Tensor lv = oracle_.loss(w, rng_);
      const Tensor lc = constraint_loss(w, rec.target, gen_.cost_table(), cfg.cost_unit);
      const Tensor total = add(reshape(lv, {1}), scale(reshape(lc, {1}), static_cast<float>(cfg.lambda)));
      rec.val_loss = lv.item();
      rec.constraint_loss = lc.item();
      rec.total = total.item();
      rec.expected_cost = expected_cost(w, gen_.cost_table()).item();
      if (!total.all_finite())
        throw NumericError("generator loss diverged at epoch " + std::to_string(epoch_) + " step " +
                           std::to_string(s) + " (target " + detail::format_double(rec.target) + ")");
      backward(total);
      opt_.step();
      oracle_.check_frozen();
      out.push_back(rec);
    }
    ++epoch_;
    gen_.mark_trained();
    return out;
  }

  std::vector<GeneratorStep> train() {
    std::vector<GeneratorStep> all;
    while (epoch_ < gen_.config().epochs) {
      auto e = run_epoch();
      all.insert(all.end(), e.begin(), e.end());
    }
    return all;
  }

 private:
  ArchitectureGenerator& gen_;
  GeneratorOracle& oracle_;
  Rng rng_;
  Adam<float> opt_;
  std::size_t epoch_ = 0;
};

}  // namespace sgnas
