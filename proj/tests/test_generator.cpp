#include <gtest/gtest.h>

#include <sstream>

#include "sgnas/generator.hpp"

namespace sgnas {
namespace {

GeneratorConfig toy_config(const TabularBench& b) {
  GeneratorConfig cfg;
  const double lo = b.min_flops(), hi = b.max_flops();
  cfg.c_low = lo + 0.1 * (hi - lo);
  cfg.c_high = lo + 0.9 * (hi - lo);
  cfg.cost_unit = 1e4;
  cfg.lambda = 0.3;
  cfg.lr = 3e-3;
  cfg.cosine_lr = true;
  return cfg;
}

TEST(Generator, UntrainedOutputIsValidCanonicalAndShaped) {
  const auto spec = SearchSpaceSpec::desk();
  GeneratorConfig cfg;
  cfg.c_low = 1e6;
  cfg.c_high = 5e6;
  ArchitectureGenerator g(spec, cfg, 1);
  EXPECT_THROW(g.generate({.target = 3e6}), ContractError);
  const auto table = build_cost_table(spec, cfg.accounting);
  for (double t : {table.min_cost(spec) * 1.01, 3e6, table.max_cost(spec)}) {
    const auto r = g.generate({.target = t, .allow_untrained = true});
    EXPECT_NO_THROW(require_valid(spec, r.encoding));
    EXPECT_TRUE(is_canonical(spec, r.encoding));
    EXPECT_NO_THROW(r.alpha.check(spec));
    EXPECT_EQ(r.alpha.alpha.size(), spec.searchable_count() * spec.slots() * spec.op_count());
    EXPECT_LE(r.cost, t);
    EXPECT_DOUBLE_EQ(r.cost, table.architecture_cost(r.encoding));
  }
  const auto logits = g.logits(3e6, g.prior());
  EXPECT_EQ(logits.shape(), (Shape{spec.searchable_count() * spec.slots(), spec.op_count()}));
}

TEST(Generator, EveryRequestIsExactlyOneTrunkForward) {
  const auto spec = SearchSpaceSpec::desk();
  GeneratorConfig cfg;
  cfg.c_low = 1e6;
  cfg.c_high = 5e6;
  ArchitectureGenerator g(spec, cfg, 2);
  for (int i = 1; i <= 10; ++i) {
    g.generate({.target = 1e6 * i, .allow_untrained = true});
    EXPECT_EQ(g.trunk_forward_count(), static_cast<std::size_t>(i));
  }
}

TEST(Generator, DeterministicModeIsReproducibleAndNoiseIsSeeded) {
  const auto spec = SearchSpaceSpec::desk();
  GeneratorConfig cfg;
  cfg.c_low = 1e6;
  cfg.c_high = 5e6;
  cfg.enforce_budget = false;
  ArchitectureGenerator g(spec, cfg, 3);
  const auto a = g.generate({.target = 3e6, .allow_untrained = true});
  const auto b = g.generate({.target = 3e6, .seed = 9, .allow_untrained = true});
  EXPECT_EQ(a.encoding, b.encoding);
  EXPECT_EQ(a.alpha.alpha, b.alpha.alpha);
  EXPECT_EQ(a.encoding, discretize(a.alpha, spec));
  std::set<ArchEncoding> noisy;
  for (std::uint64_t s = 0; s < 5; ++s)
    noisy.insert(g.generate({.target = 3e6, .deterministic = false, .seed = s, .allow_untrained = true}).encoding);
  EXPECT_GT(noisy.size(), 1u);
  EXPECT_EQ(g.generate({.target = 3e6, .deterministic = false, .seed = 4, .allow_untrained = true}).encoding,
            g.generate({.target = 3e6, .deterministic = false, .seed = 4, .allow_untrained = true}).encoding);
}

TEST(Generator, PriorHandling) {
  const auto spec = SearchSpaceSpec::desk();
  GeneratorConfig cfg;
  cfg.c_low = 1e6;
  cfg.c_high = 5e6;
  ArchitectureGenerator g(spec, cfg, 4);
  const auto fixed = g.generate({.target = 3e6, .allow_untrained = true});
  const auto fresh = g.generate({.target = 3e6, .fresh_prior = true, .seed = 77, .allow_untrained = true});
  EXPECT_NE(fixed.alpha.alpha, fresh.alpha.alpha);
  RandomPrior bad{2, 3, std::vector<float>(6, 0.0f)};
  EXPECT_THROW(g.generate({.target = 3e6, .prior = bad, .allow_untrained = true}), ContractError);
  EXPECT_THROW(g.generate({.target = -1.0, .allow_untrained = true}), ContractError);
  EXPECT_TRUE(g.generate({.target = 6e6, .allow_untrained = true}).extrapolated);
  EXPECT_FALSE(fixed.extrapolated);
  // Without the prior, the prior input has no effect at all.
  cfg.use_prior = false;
  ArchitectureGenerator np(spec, cfg, 4);
  const auto x = np.generate({.target = 3e6, .allow_untrained = true});
  const auto y = np.generate({.target = 3e6, .fresh_prior = true, .seed = 77, .allow_untrained = true});
  EXPECT_EQ(x.alpha.alpha, y.alpha.alpha);
}

TEST(Generator, ConfigJsonRoundTripAndValidation) {
  GeneratorConfig cfg;
  cfg.c_low = 10;
  cfg.c_high = 20;
  cfg.lambda = 0.5;
  cfg.use_prior = false;
  cfg.accounting = Accounting::FixedWidth;
  const auto back = GeneratorConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_THROW(GeneratorConfig::from_json({{"lamda", 1.0}}), ConfigError);
  EXPECT_THROW(GeneratorConfig::from_json({{"lambda", "x"}}), ConfigError);
  cfg.lambda = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.lambda = 1;
  cfg.c_high = 5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(BudgetRepair, AlwaysLandsUnderTargetOrReportsInfeasible) {
  const auto spec = SearchSpaceSpec::desk();
  const auto table = build_cost_table(spec, Accounting::SimulatedExpansion);
  Rng rng(5);
  const double lo = table.min_cost(spec), hi = table.max_cost(spec);
  for (int i = 0; i < 100; ++i) {
    auto alpha = ArchParams::zeros(spec);
    for (auto& v : alpha.alpha) v = static_cast<float>(normal(rng));
    const double target = uniform(rng, lo, hi);
    const auto a = enforce_budget(spec, alpha, table, discretize_slots(alpha, spec), target);
    EXPECT_TRUE(is_canonical(spec, a));
    EXPECT_LE(table.architecture_cost(a), target);
  }
  auto alpha = ArchParams::zeros(spec);
  EXPECT_THROW(enforce_budget(spec, alpha, table, discretize_slots(alpha, spec), lo * 0.9), InfeasibleError);
  // A target above the argmax cost leaves the argmax alone.
  for (auto& v : alpha.alpha) v = static_cast<float>(normal(rng));
  const auto argmax = discretize(alpha, spec);
  EXPECT_EQ(enforce_budget(spec, alpha, table, discretize_slots(alpha, spec), hi), argmax);
}

TEST(Generator, CheckpointRoundTrip) {
  const auto b = make_synthetic_bench(spaces::toy(), 1);
  auto cfg = toy_config(b);
  cfg.epochs = 1;
  cfg.steps_per_epoch = 20;
  ArchitectureGenerator g(b.spec(), cfg, 6);
  TabularOracle oracle(b);
  GeneratorTrainer(g, oracle, 1).train();
  Checkpoint ck;
  g.save_to(ck);
  std::stringstream ss;
  ck.write(ss);
  const auto back = Checkpoint::read(ss);
  ArchitectureGenerator h(b.spec(), ArchitectureGenerator::config_from(back), 99);
  EXPECT_FALSE(h.trained());
  h.load_from(back);
  EXPECT_TRUE(h.trained());
  for (double f : {0.2, 0.5, 0.9}) {
    const double t = cfg.c_low + f * (cfg.c_high - cfg.c_low);
    const auto x = g.generate({.target = t}), y = h.generate({.target = t});
    EXPECT_EQ(x.alpha.alpha, y.alpha.alpha);
    EXPECT_EQ(x.encoding, y.encoding);
  }
  ArchitectureGenerator other(spaces::tiny(), cfg, 1);
  EXPECT_THROW(other.load_from(back), FormatError);
}

TEST(Generator, FrozenSupernetOracleIsNeverMutated) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 1);
  ToyDatasetConfig dc;
  dc.train_per_class = 4;
  dc.val_per_class = 4;
  const auto ds = make_toy_dataset(dc);
  SupernetOracle oracle(net, ds.val, 8);
  const auto before = net.state_hash();
  GeneratorConfig cfg;
  const auto table = build_cost_table(spec, cfg.accounting);
  cfg.c_low = table.min_cost(spec) * 1.2;
  cfg.c_high = table.max_cost(spec) * 0.8;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  ArchitectureGenerator g(spec, cfg, 2);
  const auto params_before = g.parameters().front();
  const std::vector<float> w0(params_before.values().begin(), params_before.values().end());
  GeneratorTrainer trainer(g, oracle, 3);
  const auto log = trainer.train();
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(net.state_hash(), before);
  for (const auto& rec : log) {
    EXPECT_TRUE(std::isfinite(rec.val_loss));
    EXPECT_GE(rec.constraint_loss, 0.0);
    EXPECT_NEAR(rec.total, rec.val_loss + cfg.lambda * rec.constraint_loss, 1e-4 * std::abs(rec.total) + 1e-6);
  }
  const std::vector<float> w1(g.parameters().front().values().begin(), g.parameters().front().values().end());
  EXPECT_NE(w0, w1);
  // Tampering with the supernet between steps is caught.
  net.visit([](const std::string& n, Tensor& t) {
    if (n == "supernet.layer9.b") t.mutable_values()[0] += 1.0f;
  }, [](const std::string&, BNStats<float>&) {});
  GeneratorTrainer again(g, oracle, 4);
  EXPECT_THROW(again.run_epoch(), ContractError);
}

TEST(Generator, TabularTrainingLearnsToFollowTheTarget) {
  const auto b = make_synthetic_bench(spaces::toy(), 2, {.interaction = 0.3});
  auto cfg = toy_config(b);
  cfg.epochs = 15;
  cfg.steps_per_epoch = 100;
  ArchitectureGenerator g(b.spec(), cfg, 7);
  TabularOracle oracle(b);
  const auto log = GeneratorTrainer(g, oracle, 8).train();
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    early += log[i].constraint_loss;
    late += log[log.size() - 1 - i].constraint_loss;
  }
  EXPECT_LT(late, early);
  const auto low = g.generate({.target = cfg.c_low}), high = g.generate({.target = cfg.c_high});
  EXPECT_LT(low.cost, high.cost);
}

}  // namespace
}  // namespace sgnas
