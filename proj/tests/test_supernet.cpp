#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <set>
#include <tuple>
#include <sstream>

#include "sgnas/cost_model.hpp"
#include "sgnas/supernet.hpp"

namespace sgnas {
namespace {

std::vector<float> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor random_input(Shape shape, Rng& rng) {
  auto t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_values()) v = static_cast<float>(normal(rng));
  return t;
}

// Named copies of every parameter and BN statistic.
std::map<std::string, std::vector<float>> snapshot(Supernet& net) {
  std::map<std::string, std::vector<float>> out;
  net.visit([&](const std::string& n, Tensor& t) { out[n] = vec(t); },
            [&](const std::string& n, BNStats<float>& s) {
              out[n + ".mean"] = s.running_mean;
              out[n + ".var"] = s.running_var;
            });
  return out;
}

std::map<std::string, Tensor> named_params(UnifiedBlock& b) {
  std::map<std::string, Tensor> out;
  b.visit("b", [&](const std::string& n, Tensor& t) { out[n] = t; }, [](const std::string&, BNStats<float>&) {});
  return out;
}

Tensor one_hot_rows(const SearchSpaceSpec& spec, const LayerConfig& cfg) {
  auto w = Tensor::zeros({cfg.size(), spec.op_count()});
  for (std::size_t s = 0; s < cfg.size(); ++s) w.mutable_values()[s * spec.op_count() + static_cast<std::size_t>(cfg[s])] = 1.0f;
  return w;
}

ToyDataset small_toy(std::uint64_t seed) {
  ToyDatasetConfig cfg;
  cfg.train_per_class = 64;
  cfg.val_per_class = 10;
  cfg.test_per_class = 10;
  cfg.seed = seed;
  return make_toy_dataset(cfg);
}

TEST(UnifiedBlock, SplitThenConcatIsExact) {
  Rng rng(1);
  const auto y = random_input({2, 12, 5, 5}, rng);
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < 6; ++s) parts.push_back(slice_channels(y, s * 2, (s + 1) * 2));
  EXPECT_EQ(vec(concat_channels(parts)), vec(y));
}

TEST(UnifiedBlock, AllSkipReducesToProjectOfExpand) {
  const auto spec = SearchSpaceSpec::desk();
  Rng rng(2);
  UnifiedBlock block(spec, 4, 6, 1, rng);
  auto p = named_params(block);
  const auto x = random_input({2, 4, 6, 6}, rng);
  const LayerConfig all_skip(spec.slots(), spec.skip_op());
  BNStats<float> s1(24), s2(6);
  const auto expected = batch_norm(
      conv2d(relu(batch_norm(conv2d(x, p["b.expand.w"], 1, 1), p["b.expand.bn.gamma"], p["b.expand.bn.beta"], s1, true)),
             p["b.project.w"], 1, 1),
      p["b.sbn2.gamma"], p["b.sbn2.beta"], s2, true);
  EXPECT_EQ(vec(block.forward_raw(x, all_skip, 0, true)), vec(expected));
  EXPECT_THROW(block.forward(x, all_skip, true), ValidityError);
}

TEST(UnifiedBlock, ExpansionTwoConfigOnlyFeedsTwoKernelWeights) {
  const auto spec = SearchSpaceSpec::desk();
  Rng rng(3);
  UnifiedBlock block(spec, 4, 4, 1, rng);
  const auto x = random_input({2, 4, 6, 6}, rng);
  const LayerConfig cfg{1, 0, 3, 3, 3, 3};  // K5, K3, four SKIPs
  backward(sum(square(block.forward(x, cfg, true))));
  for (std::size_t s = 0; s < spec.slots(); ++s)
    for (std::size_t k = 0; k < spec.kernels.size(); ++k) {
      auto& w = block.kernel_weight(s, k);
      double mag = 0;
      for (float g : w.grad()) mag += std::abs(g);
      const bool active = (s == 0 && k == 1) || (s == 1 && k == 0);
      EXPECT_EQ(mag > 0, active) << "slot " << s << " kernel index " << k;
    }
  auto p = named_params(block);
  for (int e = spec.e_min; e <= spec.e_max; ++e) {
    const bool touched = p["b.sbn" + std::to_string(e) + ".gamma"].grad_touched();
    EXPECT_EQ(touched, e == 2) << "sbn" << e;
  }
}

TEST(UnifiedBlock, OneHotMixtureMatchesDiscreteBitExactly) {
  const auto spec = SearchSpaceSpec::desk();
  const auto configs = enumerate_layer_configs(spec);
  Rng rng(4);
  UnifiedBlock block(spec, 4, 4, 1, rng), strided(spec, 4, 8, 2, rng);
  const auto x = random_input({2, 4, 6, 6}, rng);
  for (int i = 0; i < 100; ++i) {
    const auto& cfg = configs[uniform_index(rng, configs.size())];
    const auto w = one_hot_rows(spec, cfg);
    EXPECT_EQ(block.mixture_sbn_index(w, 0), static_cast<std::size_t>(expansion_of(spec, cfg) - spec.e_min));
    EXPECT_EQ(vec(block.forward(x, cfg, true)), vec(block.forward_mixture(x, w, 0, true)));
    EXPECT_EQ(vec(strided.forward(x, cfg, false)), vec(strided.forward_mixture(x, w, 0, false)));
  }
}

TEST(UnifiedBlock, MixtureShadowIndexRoundsExpectedExpansion) {
  const auto spec = SearchSpaceSpec::desk();
  Rng rng(5);
  UnifiedBlock block(spec, 4, 4, 1, rng);
  auto w = Tensor::zeros({6, 4});
  for (std::size_t s = 0; s < 6; ++s) {
    w.mutable_values()[s * 4 + 0] = 0.4f;
    w.mutable_values()[s * 4 + 3] = 0.6f;
  }
  EXPECT_EQ(block.mixture_sbn_index(w, 0), 0u);  // 2.4 rounds to 2
  for (std::size_t s = 0; s < 6; ++s) {
    w.mutable_values()[s * 4 + 0] = 0.05f;
    w.mutable_values()[s * 4 + 3] = 0.95f;
  }
  EXPECT_EQ(block.mixture_sbn_index(w, 0), 0u);  // 0.3 clamps to e_min
  EXPECT_THROW(block.forward_mixture(random_input({1, 4, 4, 4}, rng), Tensor::zeros({5, 4}), 0, true),
               DimensionError);
}

TEST(Supernet, ParameterCountMatchesCostModel) {
  for (const auto& spec : {SearchSpaceSpec::desk(), SearchSpaceSpec::imagenet()}) {
    Supernet net(spec, 1);
    EXPECT_EQ(net.parameter_count(), count_unified_supernet_params(spec));
  }
}

TEST(Supernet, NetworkOneHotMixtureMatchesDiscrete) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 2);
  Rng rng(6);
  const auto x = random_input({2, 3, 32, 32}, rng);
  for (int i = 0; i < 5; ++i) {
    const auto a = sample_uniform(spec, rng);
    std::vector<float> w;
    for (const auto& cfg : a.layers) {
      const auto rows = vec(one_hot_rows(spec, cfg));
      w.insert(w.end(), rows.begin(), rows.end());
    }
    const auto weights = Tensor::from({a.layers.size() * spec.slots(), spec.op_count()}, w);
    EXPECT_EQ(vec(net.forward(x, a, true)), vec(net.forward_mixture(x, weights, true)));
  }
}

TEST(Supernet, StepTouchesOnlyActivePathAndShadowSet) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 3);
  auto ds = small_toy(1);
  const ArchEncoding a = {{{2, 2, 3, 3, 3, 3}, {1, 0, 0, 3, 3, 3}, {2, 1, 0, 0, 0, 0}, {0, 0, 3, 3, 3, 3},
                           {2, 2, 2, 2, 1, 3}}};
  require_valid(spec, a);
  const auto before = snapshot(net);
  Sgd<float> opt(net.parameters(), 0.1, 0.9, 4e-5);
  std::vector<std::size_t> idx(16);
  std::iota(idx.begin(), idx.end(), 0);
  for (int step = 0; step < 2; ++step) {
    opt.zero_grad();
    backward(cross_entropy_loss(net.forward(ds.train.batch(idx), a, true), ds.train.batch_labels(idx)));
    opt.step();
  }
  const auto after = snapshot(net);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const std::string p = "supernet.layer" + std::to_string(l + 2);
    const int e = expansion_of(spec, a.layers[l]);
    for (int k = spec.e_min; k <= spec.e_max; ++k)
      for (const char* part : {".gamma", ".beta", ".mean", ".var"}) {
        const std::string n = p + ".sbn" + std::to_string(k) + part;
        EXPECT_EQ(before.at(n) != after.at(n), k == e) << n;
      }
    for (std::size_t s = 0; s < spec.slots(); ++s)
      for (std::size_t ki = 0; ki < spec.kernels.size(); ++ki) {
        const std::string n = p + ".slot" + std::to_string(s) + ".k" + std::to_string(spec.kernels[ki]) + ".w";
        EXPECT_EQ(before.at(n) != after.at(n), a.layers[l][s] == static_cast<int>(ki)) << n;
      }
  }
}

TEST(Supernet, CheckpointRoundTripIsBitExact) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 4);
  auto ds = small_toy(2);
  SupernetHyper h;
  h.epochs = 1;
  h.batch_size = 32;
  SupernetTrainer trainer(net, ds.train, h, 1);
  trainer.run_epoch();
  Checkpoint ck;
  trainer.save_to(ck);
  std::stringstream ss;
  ck.write(ss);
  const auto back = Checkpoint::read(ss);
  EXPECT_EQ(back.blob("supernet.epoch"), "1");
  Supernet other(spec, 99);
  other.load_from(back);
  EXPECT_EQ(other.state_hash(), net.state_hash());
  Rng rng(7);
  const auto a = sample_uniform(spec, rng);
  std::vector<std::size_t> idx{0, 1, 2, 3};
  EXPECT_EQ(vec(net.forward(ds.val.batch(idx), a, false)), vec(other.forward(ds.val.batch(idx), a, false)));
  Supernet wrong(SearchSpaceSpec::imagenet(), 0);
  EXPECT_THROW(wrong.load_from(back), FormatError);
}

TEST(Supernet, DivergenceNamesStepAndEncoding) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 5);
  net.visit([](const std::string& n, Tensor& t) {
    if (n == "supernet.layer9.b") t.mutable_values()[0] = std::nanf("");
  }, [](const std::string&, BNStats<float>&) {});
  auto ds = small_toy(3);
  SupernetHyper h;
  h.batch_size = 32;
  SupernetTrainer trainer(net, ds.train, h, 2);
  try {
    trainer.run_epoch();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("encoding"), std::string::npos) << msg;
    EXPECT_NE(msg.find('|'), std::string::npos) << msg;
  }
}

TEST(Supernet, CosineScheduleAtHalfway) {
  EXPECT_NEAR(cosine_lr(25, 50, 0.045), 0.045 * (1 + std::cos(std::numbers::pi / 2)) / 2, 1e-15);
}

TEST(Supernet, OneEpochSmokeTrainingReducesLoss) {
  // Loss averaged over the last quarter of the epoch's steps against the
  // first quarter; the toy task is easy enough that most seeds improve.
  const auto spec = SearchSpaceSpec::desk();
  int improved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Supernet net(spec, seed);
    auto ds = small_toy(100 + seed);
    SupernetHyper h;
    h.epochs = 1;
    h.batch_size = 16;
    SupernetTrainer trainer(net, ds.train, h, seed);
    const auto steps = trainer.run_epoch();
    const std::size_t q = steps.size() / 4;
    double first = 0, last = 0;
    for (std::size_t i = 0; i < q; ++i) {
      first += steps[i].loss;
      last += steps[steps.size() - 1 - i].loss;
    }
    improved += last < first;
  }
  EXPECT_GE(improved, 4);
}

TEST(Supernet, FairScheduleDrivesTraining) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 6);
  auto ds = small_toy(4);
  SupernetHyper h;
  h.batch_size = 80;
  SupernetTrainer trainer(net, ds.train, h, 3);
  const auto steps = trainer.run_epoch();
  ASSERT_EQ(steps.size(), 8u);
  // Two full rounds of four steps; each round covers every op per slot.
  for (std::size_t r = 0; r < 2; ++r) {
    std::map<std::tuple<std::size_t, int>, int> kernel_uses;
    for (std::size_t i = 0; i < 4; ++i) {
      const auto a = encoding_from_compact(spec, steps[r * 4 + i].encoding);
      EXPECT_TRUE(is_canonical(spec, a));
      for (std::size_t l = 0; l < a.layers.size(); ++l)
        for (int op : a.layers[l]) ++kernel_uses[{l, op}];
    }
    for (std::size_t l = 0; l < spec.searchable_count(); ++l)
      for (int op = 0; op < 4; ++op) EXPECT_EQ((kernel_uses[{l, op}]), 6) << "layer " << l << " op " << op;
  }
}

TEST(Evaluate, DeterministicRestoresStateAndRejectsBadEncodings) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 7);
  auto ds = small_toy(5);
  Rng rng(8);
  const auto a = sample_uniform(spec, rng);
  EvalOptions opt;
  opt.batch_size = 32;
  opt.recalibration_batches = 4;
  const auto h0 = net.state_hash();
  const double acc1 = evaluate_subnet(net, a, ds.val, ds.train, opt);
  EXPECT_EQ(net.state_hash(), h0);
  EXPECT_EQ(evaluate_subnet(net, a, ds.val, ds.train, opt), acc1);
  EXPECT_GE(acc1, 0.0);
  EXPECT_LE(acc1, 100.0);
  auto bad = a;
  bad.layers[0] = {3, 3, 3, 3, 3, 0};
  EXPECT_THROW(evaluate_subnet(net, bad, ds.val, ds.train, opt), ValidityError);
}

TEST(Evaluate, RecalibrationUpdatesActiveStatistics) {
  const auto spec = SearchSpaceSpec::desk();
  Supernet net(spec, 8);
  auto ds = small_toy(6);
  const ArchEncoding a = {{{2, 2, 2, 2, 2, 2}, {0, 0, 3, 3, 3, 3}, {2, 2, 2, 2, 2, 2}, {0, 0, 3, 3, 3, 3},
                           {1, 1, 1, 3, 3, 3}}};
  const auto before = snapshot(net);
  EvalOptions opt;
  opt.batch_size = 32;
  opt.recalibration_batches = 3;
  recalibrate_bn(net, a, ds.train, opt);
  const auto after = snapshot(net);
  EXPECT_NE(before.at("supernet.layer2.sbn6.mean"), after.at("supernet.layer2.sbn6.mean"));
  EXPECT_NE(before.at("supernet.layer3.sbn2.var"), after.at("supernet.layer3.sbn2.var"));
  EXPECT_EQ(before.at("supernet.layer3.sbn6.mean"), after.at("supernet.layer3.sbn6.mean"));
  EXPECT_EQ(before.at("supernet.layer2.slot0.k3.w"), after.at("supernet.layer2.slot0.k3.w"));
}

TEST(Dataset, ToySplitsAreBalancedAndDisjoint) {
  ToyDatasetConfig cfg;
  cfg.train_per_class = 30;
  cfg.val_per_class = 5;
  cfg.test_per_class = 4;
  const auto ds = make_toy_dataset(cfg);
  EXPECT_EQ(ds.train.size(), 300u);
  EXPECT_EQ(ds.val.size(), 50u);
  EXPECT_EQ(ds.test.size(), 40u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(ds.train.labels[i], static_cast<int>(i));
  std::set<std::vector<float>> train_images;
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    train_images.insert(vec(ds.train.batch({i})));
  for (std::size_t i = 0; i < ds.val.size(); ++i) EXPECT_FALSE(train_images.contains(vec(ds.val.batch({i}))));
  const auto again = make_toy_dataset(cfg);
  EXPECT_EQ(again.train.pixels, ds.train.pixels);
}

}  // namespace
}  // namespace sgnas
