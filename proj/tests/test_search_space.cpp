#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "sgnas/search_space.hpp"

namespace sgnas {
namespace {

SearchSpaceSpec small_space(std::vector<int> kernels, int e_min, int e_max, int layers = 2) {
  std::string text = "input_resolution = 16\nclass_count = 4\ne_min = " + std::to_string(e_min) +
                     "\ne_max = " + std::to_string(e_max) + "\nkernels = ";
  for (std::size_t i = 0; i < kernels.size(); ++i) text += (i ? "," : "") + std::to_string(kernels[i]);
  text += "\nlayer conv 8 1 1 3\nlayer unified 8 " + std::to_string(layers) + " 1\n";
  text += "layer avgpool 0 1 1\nlayer fc 4 1 1\n";
  return SearchSpaceSpec::from_text(text);
}

// Every raw slot assignment within the SKIP bound, as sorted multisets.
std::set<std::multiset<int>> brute_force_multisets(const SearchSpaceSpec& spec) {
  std::set<std::multiset<int>> out;
  const std::size_t ops = spec.op_count(), slots = spec.slots();
  std::size_t total = 1;
  for (std::size_t i = 0; i < slots; ++i) total *= ops;
  for (std::size_t code = 0; code < total; ++code) {
    std::multiset<int> m;
    std::size_t c = code, skips = 0;
    for (std::size_t s = 0; s < slots; ++s, c /= ops) {
      const int op = static_cast<int>(c % ops);
      skips += spec.is_skip(op);
      m.insert(op);
    }
    if (skips <= spec.max_skips()) out.insert(m);
  }
  return out;
}

// Arrangements that merely keep SKIPs in the highest slots.
std::size_t brute_force_skip_suffix(const SearchSpaceSpec& spec) {
  std::size_t count = 0;
  const std::size_t ops = spec.op_count(), slots = spec.slots();
  std::size_t total = 1;
  for (std::size_t i = 0; i < slots; ++i) total *= ops;
  for (std::size_t code = 0; code < total; ++code) {
    std::vector<int> v;
    for (std::size_t s = 0, c = code; s < slots; ++s, c /= ops) v.push_back(static_cast<int>(c % ops));
    std::size_t skips = 0;
    bool suffix = true, seen_skip = false;
    for (int op : v) {
      if (spec.is_skip(op)) {
        seen_skip = true;
        ++skips;
      } else if (seen_skip) {
        suffix = false;
      }
    }
    if (suffix && skips <= spec.max_skips()) ++count;
  }
  return count;
}

TEST(SearchSpace, ImagenetSpaceHasNineteenSearchableLayers) {
  const auto spec = SearchSpaceSpec::imagenet();
  EXPECT_EQ(spec.searchable_count(), 19u);
  std::vector<std::size_t> channels;
  for (const auto& l : spec.layers)
    if (l.kind != LayerKind::AvgPool && l.kind != LayerKind::Classifier) channels.push_back(l.out_channels);
  const std::vector<std::size_t> expected{32, 16, 32, 32, 40, 40, 40, 40, 80, 80, 80, 80, 96, 96,
                                          96, 96, 192, 192, 192, 192, 320, 1280};
  EXPECT_EQ(channels, expected);
  EXPECT_NEAR(space_size_log(spec), 19 * std::log(80.0), 1e-9);
}

TEST(SearchSpace, TextFormRoundTrips) {
  for (const auto& spec : {SearchSpaceSpec::imagenet(), SearchSpaceSpec::desk(), SearchSpaceSpec::mobilenet_v2()}) {
    const auto again = SearchSpaceSpec::from_text(spec.to_text());
    EXPECT_EQ(again, spec);
    EXPECT_EQ(again.hash(), spec.hash());
  }
  EXPECT_NE(SearchSpaceSpec::imagenet().hash(), SearchSpaceSpec::desk().hash());
}

TEST(SearchSpace, MalformedConfigReportsLine) {
  try {
    SearchSpaceSpec::from_text("e_min = 2\nlayer bogus 3 1 1\n");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(SearchSpaceSpec::from_text("e_min = 5\ne_max = 3\nlayer unified 8 1 1\n"), ValidityError);
}

TEST(Canonicalize, KernelsFirstSkipsLast) {
  const auto spec = SearchSpaceSpec::imagenet();
  const int k3 = spec.parse_op("K3"), sk = spec.skip_op();
  EXPECT_EQ(canonicalize_layer(spec, {k3, sk, k3, k3, sk, k3}), (LayerConfig{k3, k3, k3, k3, sk, sk}));
  const int k5 = spec.parse_op("K5"), k7 = spec.parse_op("K7");
  EXPECT_EQ(canonicalize_layer(spec, {k3, sk, k7, k5, k3, k7}), (LayerConfig{k7, k7, k5, k3, k3, sk}));
}

TEST(Canonicalize, AllArrangementsOfAMultisetCollapse) {
  const auto spec = SearchSpaceSpec::imagenet();
  LayerConfig cfg{0, 0, 0, 0, spec.skip_op(), spec.skip_op()};
  std::sort(cfg.begin(), cfg.end());
  std::set<LayerConfig> arrangements, forms;
  do {
    arrangements.insert(cfg);
    forms.insert(canonicalize_layer(spec, cfg));
  } while (std::next_permutation(cfg.begin(), cfg.end()));
  EXPECT_EQ(arrangements.size(), 15u);
  EXPECT_EQ(forms.size(), 1u);
}

TEST(Canonicalize, IsIdempotentAndRejectsSkipOverflow) {
  const auto spec = SearchSpaceSpec::imagenet();
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    ArchEncoding raw;
    for (std::size_t l = 0; l < spec.searchable_count(); ++l) {
      LayerConfig cfg(spec.slots());
      do {
        for (auto& op : cfg) op = static_cast<int>(uniform_index(rng, spec.op_count()));
      } while (skip_count(spec, cfg) > spec.max_skips());
      raw.layers.push_back(cfg);
    }
    const auto once = canonicalize(spec, raw);
    EXPECT_EQ(canonicalize(spec, once), once);
    for (std::size_t l = 0; l < raw.layers.size(); ++l)
      EXPECT_TRUE(std::is_permutation(raw.layers[l].begin(), raw.layers[l].end(), once.layers[l].begin()));
  }
  const int sk = spec.skip_op();
  EXPECT_THROW(canonicalize_layer(spec, {0, sk, sk, sk, sk, sk}), ValidityError);
  EXPECT_THROW(canonicalize_layer(spec, {0, 0, 0, 0, 0}), ValidityError);
  EXPECT_THROW(canonicalize_layer(spec, {0, 0, 0, 0, 0, 9}), ValidityError);
}

TEST(Enumerate, ImagenetSpaceHasEightyConfigsPerLayer) {
  const auto spec = SearchSpaceSpec::imagenet();
  const auto configs = enumerate_layer_configs(spec);
  EXPECT_EQ(configs.size(), 80u);
  EXPECT_EQ(layer_config_count(spec), 80u);
  std::set<std::multiset<int>> listed;
  for (const auto& c : configs) {
    EXPECT_EQ(canonicalize_layer(spec, c), c);
    listed.insert(std::multiset<int>(c.begin(), c.end()));
  }
  EXPECT_EQ(listed, brute_force_multisets(spec));
  EXPECT_EQ(brute_force_skip_suffix(spec), 1089u);
}

TEST(Enumerate, SmallSpacesMatchBruteForce) {
  EXPECT_EQ(enumerate_layer_configs(small_space({3}, 2, 2)).size(), 1u);
  EXPECT_EQ(enumerate_layer_configs(small_space({3, 5}, 1, 3)).size(), 9u);
  for (auto [kernels, lo, hi] : std::vector<std::tuple<std::vector<int>, int, int>>{
           {{3}, 1, 4}, {{3, 5}, 2, 4}, {{3, 5, 7}, 1, 3}, {{3, 5, 7, 9}, 2, 3}, {{5, 3}, 1, 2}}) {
    const auto spec = small_space(kernels, lo, hi);
    const auto configs = enumerate_layer_configs(spec);
    EXPECT_EQ(configs.size(), brute_force_multisets(spec).size());
    EXPECT_EQ(configs.size(), layer_config_count(spec));
    EXPECT_EQ(std::set<LayerConfig>(configs.begin(), configs.end()).size(), configs.size());
  }
}

TEST(Enumerate, ForEachArchitectureVisitsTheProduct) {
  const auto spec = small_space({3, 5}, 1, 2, 3);  // 5 configs per layer
  std::set<ArchEncoding> seen;
  for_each_architecture(spec, [&](const ArchEncoding& a) { seen.insert(a); });
  EXPECT_EQ(seen.size(), 125u);
}

TEST(Sample, DeterministicCanonicalAndCoversSkipCounts) {
  const auto spec = SearchSpaceSpec::imagenet();
  Rng a(42), b(42);
  EXPECT_EQ(sample_uniform(spec, a), sample_uniform(spec, b));
  Rng rng(5);
  std::vector<std::set<std::size_t>> skips(spec.searchable_count());
  std::map<LayerConfig, int> freq;
  for (int i = 0; i < 10000; ++i) {
    const auto enc = sample_uniform(spec, rng);
    ASSERT_TRUE(is_canonical(spec, enc));
    for (std::size_t l = 0; l < enc.layers.size(); ++l) skips[l].insert(skip_count(spec, enc.layers[l]));
    ++freq[enc.layers[0]];
  }
  for (const auto& s : skips) EXPECT_EQ(s, (std::set<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(freq.size(), 80u);
}

TEST(StrictFairness, OneRoundActivatesEveryOpOncePerSlot) {
  const auto spec = SearchSpaceSpec::imagenet();
  StrictFairnessSampler sampler(spec, spec.op_count(), Rng(1));
  const auto round = sampler.next_round();
  ASSERT_EQ(round.size(), 4u);
  for (std::size_t l = 0; l < spec.searchable_count(); ++l)
    for (std::size_t s = 0; s < spec.slots(); ++s) {
      std::multiset<int> ops;
      for (const auto& step : round) ops.insert(step.raw.layers[l][s]);
      EXPECT_EQ(ops, (std::multiset<int>{0, 1, 2, 3}));
    }
  EXPECT_THROW(StrictFairnessSampler(spec, 3, Rng(1)), ContractError);
}

TEST(StrictFairness, HundredRoundsGiveExactlyHundredPerTriple) {
  const auto spec = SearchSpaceSpec::imagenet();
  StrictFairnessSampler sampler(spec, spec.op_count(), Rng(7));
  const std::size_t layers = spec.searchable_count(), slots = spec.slots(), ops = spec.op_count();
  std::vector<int> hist(layers * slots * ops, 0);
  for (int r = 0; r < 100; ++r)
    for (const auto& step : sampler.next_round()) {
      EXPECT_TRUE(is_canonical(spec, step.canonical));
      for (std::size_t l = 0; l < layers; ++l) {
        auto sorted = step.raw.layers[l];
        EXPECT_EQ(canonicalize_layer(spec, sorted), step.canonical.layers[l]);
        for (std::size_t s = 0; s < slots; ++s)
          ++hist[(l * slots + s) * ops + static_cast<std::size_t>(step.raw.layers[l][s])];
      }
    }
  for (int h : hist) EXPECT_EQ(h, 100);
}

TEST(StrictFairness, RepairsAreLoggedWhenTheBoundBites) {
  // Three slots, one SKIP allowed: random permutations regularly put two
  // SKIPs into the same step.
  const auto spec = small_space({3, 5}, 2, 3, 4);
  StrictFairnessSampler sampler(spec, spec.op_count(), Rng(11));
  for (int r = 0; r < 50; ++r)
    for (const auto& step : sampler.next_round())
      for (const auto& cfg : step.raw.layers) EXPECT_LE(skip_count(spec, cfg), spec.max_skips());
  EXPECT_GT(sampler.repair_events(), 0u);
}

TEST(Prior, RoundTripsAndHasOneHotRows) {
  const auto spec = SearchSpaceSpec::imagenet();
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const auto a = sample_uniform(spec, rng);
    const auto b = encode_prior(spec, a);
    ASSERT_EQ(decode_prior(spec, b), a);
    if (i == 0)
      for (std::size_t row = 0; row < b.layers * spec.slots(); ++row) {
        float total = 0;
        for (std::size_t o = 0; o < spec.op_count(); ++o) total += b.values[row * spec.op_count() + o];
        EXPECT_EQ(total, 1.0f);
      }
  }
  ArchEncoding k3;
  k3.layers.assign(spec.searchable_count(), LayerConfig(spec.slots(), 0));
  const auto b = encode_prior(spec, k3);
  for (std::size_t row = 0; row < b.layers * spec.slots(); ++row) EXPECT_EQ(b.values[row * 4 + 0], 1.0f);
}

TEST(Prior, MalformedRowsAreFormatErrors) {
  const auto spec = SearchSpaceSpec::desk();
  Rng rng(2);
  auto b = encode_prior(spec, sample_uniform(spec, rng));
  auto twice = b;
  twice.values[1] = twice.values[0] = 1.0f;
  EXPECT_THROW(decode_prior(spec, twice), FormatError);
  auto empty = b;
  std::fill(empty.values.begin(), empty.values.begin() + 4, 0.0f);
  EXPECT_THROW(decode_prior(spec, empty), FormatError);
  auto fractional = b;
  fractional.values[2] = 0.5f;
  EXPECT_THROW(decode_prior(spec, fractional), FormatError);
  auto shape = b;
  shape.width -= 1;
  EXPECT_THROW(decode_prior(spec, shape), FormatError);
}

TEST(EncodingText, RoundTripsBothForms) {
  const auto spec = SearchSpaceSpec::desk();
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto a = sample_uniform(spec, rng);
    EXPECT_EQ(encoding_from_text(spec, encoding_to_text(spec, a)), a);
    EXPECT_EQ(encoding_from_compact(spec, encoding_to_compact(spec, a)), a);
  }
  EXPECT_EQ(encoding_to_compact(spec, encoding_from_text(spec, "K3,SKIP,K7,K3,K3,K3\n"
                                                               "K5,K5,K5,K5,K5,K5\nK3,K3,K3,K3,K3,K3\n"
                                                               "K3,K3,K3,K3,K3,K3\nK3,K3,K3,K3,K3,K3\n"))
                .substr(0, 23),
            "K7+K3+K3+K3+K3+SKIP|K5+");
  EXPECT_THROW(encoding_from_text(spec, "K9,K3,K3,K3,K3,K3\n"), FormatError);
}

}  // namespace
}  // namespace sgnas
