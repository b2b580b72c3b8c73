#pragma once

// Run directories for the command-line pipelines: strict JSON run config,
// metrics logs, manifests with git-style blob checksums, and the commands
// themselves. Every command is described by an invocation
//   {"command": name, "options": {...}, "config": RunConfig}
// which is stored in the manifest so the run can be replayed.
//
// Links against OpenSSL (libcrypto) for SHA-1.

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgnas/checkpoint.hpp"
#include "sgnas/cost_model.hpp"
#include "sgnas/dataset.hpp"
#include "sgnas/generator.hpp"
#include "sgnas/protocol.hpp"
#include "sgnas/search.hpp"
#include "sgnas/supernet.hpp"
#include "sgnas/tabular.hpp"

namespace sgnas::runtime {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kConfig = 3,
  kData = 4,
  kNumeric = 5,
  kInfeasible = 6,
  kContract = 7,
  kMismatch = 8,
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const CompletenessError*>(&e) ||
      dynamic_cast<const ValidityError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e))
    return kData;
  if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
  if (dynamic_cast<const InfeasibleError*>(&e)) return kInfeasible;
  if (dynamic_cast<const ContractError*>(&e) || dynamic_cast<const DimensionError*>(&e)) return kContract;
  return kFailure;
}

// ---------------------------------------------------------------- checksums

inline std::string sha1_hex(std::string_view header, std::string_view body) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("cannot allocate a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, body.data(), body.size()) == 1 && EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("SHA-1 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

// Same id `git hash-object` prints for this content.
inline std::string git_blob_sha1(std::string_view content) {
  std::string header = "blob " + std::to_string(content.size());
  header.push_back('\0');
  return sha1_hex(header, content);
}

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw FormatError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, std::string_view content) {
  std::ofstream os(p, std::ios::binary);
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw FormatError("cannot write " + p.string());
}

inline std::string file_sha1(const fs::path& p) { return git_blob_sha1(read_file(p)); }

// ---------------------------------------------------------------- config

namespace detail {

// Strict reader for one JSON object: typed getters, then finish() rejects
// any key nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + " must be a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  void get(const char* key, double& out) {
    if (!take(key)) return;
    if (!j_[key].is_number()) fail(key, "a number");
    out = j_[key].get<double>();
  }
  void get(const char* key, std::size_t& out) {
    if (!take(key)) return;
    if (!non_negative_integer(j_[key])) fail(key, "a non-negative integer");
    out = j_[key].get<std::size_t>();
  }
  void get(const char* key, bool& out) {
    if (!take(key)) return;
    if (!j_[key].is_boolean()) fail(key, "true or false");
    out = j_[key].get<bool>();
  }
  void get(const char* key, std::string& out) {
    if (!take(key)) return;
    if (!j_[key].is_string()) fail(key, "a string");
    out = j_[key].get<std::string>();
  }
  void get(const char* key, std::vector<double>& out) {
    if (!take(key)) return;
    if (!j_[key].is_array()) fail(key, "an array of numbers");
    out.clear();
    for (const auto& v : j_[key]) {
      if (!v.is_number()) fail(key, "an array of numbers");
      out.push_back(v.get<double>());
    }
  }
  void get(const char* key, std::vector<std::uint64_t>& out) {
    if (!take(key)) return;
    if (!j_[key].is_array()) fail(key, "an array of non-negative integers");
    out.clear();
    for (const auto& v : j_[key]) {
      if (!non_negative_integer(v)) fail(key, "an array of non-negative integers");
      out.push_back(v.get<std::uint64_t>());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  static bool non_negative_integer(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }
  bool take(const char* key) {
    if (!j_.contains(key)) return false;
    used_.insert(key);
    return true;
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("'" + where_ + "." + key + "' must be " + what);
  }

  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

}  // namespace detail

struct DatasetConfig {
  std::string kind = "toy";  // toy | binary | folders
  ToyDatasetConfig toy;
  std::string train, val, test;  // binary files or class-folder roots

  json to_json() const {
    return {{"kind", kind},
            {"classes", toy.class_count},
            {"resolution", toy.resolution},
            {"train_per_class", toy.train_per_class},
            {"val_per_class", toy.val_per_class},
            {"test_per_class", toy.test_per_class},
            {"noise", toy.noise},
            {"seed", toy.seed},
            {"train", train},
            {"val", val},
            {"test", test}};
  }

  static DatasetConfig from_json(const json& j) {
    DatasetConfig d;
    detail::Fields f(j, "dataset");
    f.get("kind", d.kind);
    f.get("classes", d.toy.class_count);
    f.get("resolution", d.toy.resolution);
    f.get("train_per_class", d.toy.train_per_class);
    f.get("val_per_class", d.toy.val_per_class);
    f.get("test_per_class", d.toy.test_per_class);
    f.get("noise", d.toy.noise);
    f.get("seed", d.toy.seed);
    f.get("train", d.train);
    f.get("val", d.val);
    f.get("test", d.test);
    f.finish();
    return d;
  }

  void validate() const {
    if (kind != "toy" && kind != "binary" && kind != "folders")
      throw ConfigError("dataset.kind must be toy, binary or folders");
    if (kind == "toy") {
      if (toy.class_count < 2 || toy.resolution == 0) throw ConfigError("toy dataset needs >= 2 classes and a resolution");
      if (toy.train_per_class == 0 || toy.val_per_class == 0) throw ConfigError("toy dataset needs train and val images");
    } else if (train.empty() || val.empty()) {
      throw ConfigError("dataset.train and dataset.val are required for " + kind + " datasets");
    }
  }
};

struct SearchConfig {
  std::string strategy = "random";
  std::size_t budget = 1000;
  double constraint = 0.0;  // 0 = unconstrained
  EvolutionConfig evolution;

  json to_json() const {
    return {{"strategy", strategy},
            {"budget", budget},
            {"constraint", constraint},
            {"population", evolution.population},
            {"parent_fraction", evolution.parent_fraction},
            {"mutation_prob", evolution.mutation_prob}};
  }
  static SearchConfig from_json(const json& j) {
    SearchConfig s;
    detail::Fields f(j, "search");
    f.get("strategy", s.strategy);
    f.get("budget", s.budget);
    f.get("constraint", s.constraint);
    f.get("population", s.evolution.population);
    f.get("parent_fraction", s.evolution.parent_fraction);
    f.get("mutation_prob", s.evolution.mutation_prob);
    f.finish();
    return s;
  }
  void validate() const {
    if (strategy != "random" && strategy != "evolution") throw ConfigError("search.strategy must be random or evolution");
    if (budget == 0) throw ConfigError("search.budget must be positive");
    if (constraint < 0 || !std::isfinite(constraint)) throw ConfigError("search.constraint must be >= 0");
    evolution.validate();
  }
  double bound() const { return constraint > 0 ? constraint : std::numeric_limits<double>::infinity(); }
};

struct BenchConfig {
  std::vector<double> constraints;                          // absolute
  std::vector<double> fractions{0.2, 0.35, 0.5, 0.65, 0.8};  // of the bench cost range, when no absolutes
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t budget = 1000;
  std::size_t scatter_rows = 100000;

  json to_json() const {
    return {{"constraints", constraints}, {"fractions", fractions}, {"seeds", seeds},
            {"budget", budget},           {"scatter_rows", scatter_rows}};
  }
  static BenchConfig from_json(const json& j) {
    BenchConfig b;
    detail::Fields f(j, "bench");
    f.get("constraints", b.constraints);
    f.get("fractions", b.fractions);
    f.get("seeds", b.seeds);
    f.get("budget", b.budget);
    f.get("scatter_rows", b.scatter_rows);
    f.finish();
    return b;
  }
  void validate() const {
    if (constraints.empty() && fractions.empty()) throw ConfigError("bench needs constraints or fractions");
    for (double c : constraints)
      if (!(c > 0)) throw ConfigError("bench.constraints must be positive");
    for (double x : fractions)
      if (!(x >= 0 && x <= 1)) throw ConfigError("bench.fractions must lie in [0, 1]");
    if (seeds.empty()) throw ConfigError("bench.seeds must not be empty");
    if (budget == 0) throw ConfigError("bench.budget must be positive");
  }
};

struct RunConfig {
  std::string space = "builtin:desk";  // builtin:<name> or a space file
  std::optional<DatasetConfig> dataset;
  std::string tabular;  // table CSV path; empty when training on images
  SupernetHyper supernet;
  EvalOptions eval;
  GeneratorConfig generator;  // c_low = c_high = 0 picks 10%..90% of the cost range
  std::size_t oracle_batch = 64;
  SearchConfig search;
  BenchConfig bench;
  std::uint64_t seed = 0;

  RunConfig() {
    generator.c_low = 0;
    generator.c_high = 0;
  }

  json to_json() const {
    json j;
    j["space"] = space;
    if (dataset) j["dataset"] = dataset->to_json();
    j["tabular"] = tabular;
    j["supernet"] = {{"epochs", supernet.epochs},
                     {"batch_size", supernet.batch_size},
                     {"lr", supernet.lr},
                     {"momentum", supernet.momentum},
                     {"weight_decay", supernet.weight_decay}};
    j["eval"] = {{"recalibrate", eval.recalibrate},
                 {"recalibration_batches", eval.recalibration_batches},
                 {"batch_size", eval.batch_size}};
    j["generator"] = generator.to_json();
    j["oracle_batch"] = oracle_batch;
    j["search"] = search.to_json();
    j["bench"] = bench.to_json();
    j["seed"] = seed;
    return j;
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    detail::Fields f(j, "config");
    f.get("space", c.space);
    if (f.has("dataset")) c.dataset = DatasetConfig::from_json(f.raw("dataset"));
    f.get("tabular", c.tabular);
    if (f.has("supernet")) {
      detail::Fields s(f.raw("supernet"), "supernet");
      s.get("epochs", c.supernet.epochs);
      s.get("batch_size", c.supernet.batch_size);
      s.get("lr", c.supernet.lr);
      s.get("momentum", c.supernet.momentum);
      s.get("weight_decay", c.supernet.weight_decay);
      s.finish();
    }
    if (f.has("eval")) {
      detail::Fields e(f.raw("eval"), "eval");
      e.get("recalibrate", c.eval.recalibrate);
      e.get("recalibration_batches", c.eval.recalibration_batches);
      e.get("batch_size", c.eval.batch_size);
      e.finish();
    }
    if (f.has("generator")) {
      const auto& g = f.raw("generator");
      if (!g.is_object()) throw ConfigError("config.generator must be a JSON object");
      json merged = c.generator.to_json();
      for (auto it = g.begin(); it != g.end(); ++it) {
        if (!merged.contains(it.key())) throw ConfigError("unknown key 'generator." + it.key() + "'");
        merged[it.key()] = it.value();
      }
      c.generator = GeneratorConfig::from_json(merged);
    }
    f.get("oracle_batch", c.oracle_batch);
    if (f.has("search")) c.search = SearchConfig::from_json(f.raw("search"));
    if (f.has("bench")) c.bench = BenchConfig::from_json(f.raw("bench"));
    std::size_t seed = c.seed;
    f.get("seed", seed);
    c.seed = seed;
    f.finish();
    c.validate();
    return c;
  }

  void validate() const {
    if (space.empty()) throw ConfigError("config.space is required");
    if (dataset) dataset->validate();
    if (supernet.epochs == 0 || supernet.batch_size == 0) throw ConfigError("supernet epochs and batch_size must be positive");
    if (!(supernet.lr > 0) || supernet.momentum < 0 || supernet.weight_decay < 0)
      throw ConfigError("supernet lr must be positive, momentum and weight_decay non-negative");
    if (eval.batch_size == 0) throw ConfigError("eval.batch_size must be positive");
    if (eval.recalibrate && eval.recalibration_batches == 0) throw ConfigError("eval.recalibration_batches must be positive");
    auto g = generator;
    if (g.c_low == 0 && g.c_high == 0) {
      g.c_low = 1;
      g.c_high = 2;
    }
    g.validate();
    if (generator.epochs == 0 || generator.steps_per_epoch == 0) throw ConfigError("generator epochs and steps must be positive");
    if (!(generator.lr > 0) || !(generator.tau.tau_init > 0) || !(generator.tau.decay > 0))
      throw ConfigError("generator lr, tau_init and tau_decay must be positive");
    if (oracle_batch == 0) throw ConfigError("oracle_batch must be positive");
    search.validate();
    bench.validate();
  }
};

// Dotted-path override, e.g. "generator.lambda=0.1". The value is parsed as
// JSON when it parses, otherwise taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline SearchSpaceSpec load_space(const std::string& ref) {
  static const std::map<std::string, SearchSpaceSpec (*)()> builtin{
      {"imagenet", &SearchSpaceSpec::imagenet}, {"desk", &SearchSpaceSpec::desk},
      {"mobilenet_v2", &SearchSpaceSpec::mobilenet_v2}, {"tiny", &spaces::tiny},
      {"toy", &spaces::toy},             {"desk_bench", &spaces::desk_bench}};
  if (ref.rfind("builtin:", 0) == 0) {
    const auto it = builtin.find(ref.substr(8));
    if (it == builtin.end()) throw ConfigError("unknown builtin space '" + ref.substr(8) + "'");
    return it->second();
  }
  return SearchSpaceSpec::from_text(read_file(ref));
}

inline ToyDataset load_dataset(const DatasetConfig& d, const SearchSpaceSpec& spec) {
  ToyDataset ds;
  if (d.kind == "toy") {
    ds = make_toy_dataset(d.toy);
  } else if (d.kind == "binary") {
    const std::size_t r = spec.input_resolution, c = spec.input_channels, k = spec.class_count;
    ds.train = load_binary_batches({d.train}, c, r, r, k);
    ds.val = load_binary_batches({d.val}, c, r, r, k);
    if (!d.test.empty()) ds.test = load_binary_batches({d.test}, c, r, r, k);
    ds.class_count = k;
  } else {
    const std::size_t r = spec.input_resolution;
    ds.train = load_class_folders(d.train, r, r);
    ds.val = load_class_folders(d.val, r, r);
    if (!d.test.empty()) ds.test = load_class_folders(d.test, r, r);
    ds.class_count = spec.class_count;
  }
  if (ds.train.height != spec.input_resolution || ds.train.channels != spec.input_channels)
    throw ConfigError("dataset images are " + std::to_string(ds.train.channels) + "x" +
                      std::to_string(ds.train.height) + " but the space expects " +
                      std::to_string(spec.input_channels) + "x" + std::to_string(spec.input_resolution));
  if (ds.class_count != spec.class_count)
    throw ConfigError("dataset has " + std::to_string(ds.class_count) + " classes, space expects " +
                      std::to_string(spec.class_count));
  return ds;
}

// ---------------------------------------------------------------- metrics

// Append-only metrics in two mirrors: metrics.ndjson (one record per line)
// and metrics.csv (long format: stage,step,metric,value). Wall times go to
// timing.csv so that the metrics files themselves are reproducible.
class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& dir)
      : ndjson_(dir / "metrics.ndjson"), csv_(dir / "metrics.csv"), timing_(dir / "timing.csv"),
        start_(std::chrono::steady_clock::now()) {
    if (!ndjson_ || !csv_ || !timing_) throw FormatError("cannot create metrics files in " + dir.string());
    csv_ << "stage,step,metric,value\n";
    timing_ << "stage,step,wall_seconds\n";
  }

  void record(const std::string& stage, std::size_t step, const std::vector<std::pair<std::string, double>>& metrics) {
    if (auto it = last_.find(stage); it != last_.end() && step <= it->second)
      throw ContractError("metrics step " + std::to_string(step) + " for stage " + stage + " is not increasing");
    last_[stage] = step;
    json m = json::object();
    for (const auto& [k, v] : metrics) {
      m[k] = v;
      csv_ << stage << ',' << step << ',' << k << ',' << sgnas::detail::format_double(v) << '\n';
    }
    ndjson_ << json{{"stage", stage}, {"step", step}, {"metrics", m}}.dump() << '\n';
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    timing_ << stage << ',' << step << ',' << wall << '\n';
    ++count_;
  }

  std::size_t count() const { return count_; }

 private:
  std::ofstream ndjson_, csv_, timing_;
  std::chrono::steady_clock::time_point start_;
  std::map<std::string, std::size_t> last_;
  std::size_t count_ = 0;
};

// ---------------------------------------------------------------- run directory

// Collects what a command read and wrote, then writes manifest.json.
class RunDir {
 public:
  RunDir(fs::path dir, json invocation) : dir_(std::move(dir)), invocation_(std::move(invocation)) {
    if (fs::exists(dir_ / "manifest.json"))
      throw ConfigError("run directory " + dir_.string() + " already holds a manifest");
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& name) const { return dir_ / name; }

  void input(const std::string& role, const fs::path& p) { inputs_[role] = {{"path", fs::absolute(p).string()}, {"sha1", file_sha1(p)}}; }
  void output(const std::string& name) { outputs_.insert(name); }
  void write_output(const std::string& name, std::string_view content) {
    write_file(path(name), content);
    output(name);
  }
  void set(const std::string& key, json value) { extra_[key] = std::move(value); }
  void add_training_steps(std::size_t n) { training_steps_ += n; }

  void finish() {
    json outs = json::object();
    for (const auto& name : outputs_) outs[name] = file_sha1(path(name));
    json m = {{"tool", "sgnas"},
              {"version", kVersion},
              {"compiler", compiler()},
              {"invocation", invocation_},
              {"config_sha1", git_blob_sha1(invocation_.at("config").dump())},
              {"seed", invocation_.at("config").at("seed")},
              {"training_steps", training_steps_},
              {"inputs", inputs_},
              {"outputs", outs},
              {"nondeterministic", json::array({"timing.csv"})}};
    for (auto it = extra_.begin(); it != extra_.end(); ++it) m[it.key()] = it.value();
    write_file(path("manifest.json"), m.dump(2) + "\n");
  }

  static std::string compiler() {
#if defined(__clang__)
    return "clang " __clang_version__;
#elif defined(__GNUC__)
    return "gcc " __VERSION__;
#else
    return "unknown";
#endif
  }

 private:
  fs::path dir_;
  json invocation_;
  json inputs_ = json::object();
  std::set<std::string> outputs_;
  json extra_ = json::object();
  std::size_t training_steps_ = 0;
};

// ---------------------------------------------------------------- commands

struct CommandContext {
  std::ostream& out = std::cout;
  std::ostream& log = std::cerr;
};

namespace detail {

inline const json& opt(const json& options, const char* key) {
  if (!options.contains(key)) throw ConfigError(std::string("missing option --") + key);
  return options.at(key);
}

inline std::string opt_string(const json& options, const char* key) {
  const auto& v = opt(options, key);
  if (!v.is_string()) throw ConfigError(std::string("option --") + key + " must be a string");
  return v.get<std::string>();
}

inline GeneratorConfig resolved_generator(const RunConfig& cfg, const CostTable& table, const SearchSpaceSpec& spec) {
  auto g = cfg.generator;
  if (g.c_low == 0 && g.c_high == 0) {
    const double lo = table.min_cost(spec), hi = table.max_cost(spec);
    g.c_low = lo + 0.1 * (hi - lo);
    g.c_high = lo + 0.9 * (hi - lo);
  }
  g.validate();
  return g;
}

inline TabularBench load_bench(RunDir& run, const RunConfig& cfg, const SearchSpaceSpec& spec) {
  if (cfg.tabular.empty()) throw ConfigError("config.tabular is required for this command");
  run.input("tabular", cfg.tabular);
  auto bench = TabularBench::load(fs::path(cfg.tabular));
  if (bench.spec().hash() != spec.hash())
    throw ContractError("table " + cfg.tabular + " was built for a different search space than config.space");
  return bench;
}

inline Checkpoint load_checkpoint(RunDir& run, const std::string& role, const std::string& p, const SearchSpaceSpec& spec) {
  run.input(role, p);
  return Checkpoint::load(p, spec.hash());
}

inline std::unique_ptr<ArchitectureGenerator> load_generator(RunDir& run, const std::string& role, const std::string& p,
                                                             const SearchSpaceSpec& spec) {
  const auto ck = load_checkpoint(run, role, p, spec);
  auto g = std::make_unique<ArchitectureGenerator>(spec, ArchitectureGenerator::config_from(ck), 0);
  g->load_from(ck);
  return g;
}

inline std::vector<double> doubles(const json& v, const char* what) {
  std::vector<double> out;
  if (v.is_number()) out.push_back(v.get<double>());
  else if (v.is_array())
    for (const auto& x : v) {
      if (!x.is_number()) throw ConfigError(std::string(what) + " must be numbers");
      out.push_back(x.get<double>());
    }
  else throw ConfigError(std::string(what) + " must be a number or a list of numbers");
  return out;
}

}  // namespace detail

inline void cmd_train_supernet(RunDir& run, const RunConfig& cfg, const json&, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  if (!cfg.dataset) throw ConfigError("config.dataset is required for train-supernet");
  const auto ds = load_dataset(*cfg.dataset, spec);
  Supernet net(spec, cfg.seed);
  SupernetTrainer trainer(net, ds.train, cfg.supernet, cfg.seed + 1);
  MetricsLog metrics(run.dir());
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.supernet.epochs; ++e) {
    const auto recs = trainer.run_epoch();
    double sum = 0;
    for (const auto& r : recs) {
      metrics.record("supernet", step++, {{"epoch", static_cast<double>(r.epoch)}, {"loss", r.loss}, {"lr", r.lr}});
      sum += r.loss;
    }
    run.add_training_steps(recs.size());
    ctx.log << "supernet epoch " << e + 1 << "/" << cfg.supernet.epochs << " loss "
            << sum / static_cast<double>(std::max<std::size_t>(1, recs.size())) << "\n";
  }
  Checkpoint ck;
  trainer.save_to(ck);
  ck.save(run.path("supernet.ckpt"));
  run.output("supernet.ckpt");
  run.output("metrics.ndjson");
  run.output("metrics.csv");
  run.set("state_hash", std::to_string(net.state_hash()));
  ctx.out << run.path("supernet.ckpt").string() << "\n";
}

inline void cmd_train_generator(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  const auto probe = build_cost_table(spec, cfg.generator.accounting);
  const auto gcfg = detail::resolved_generator(cfg, probe, spec);
  ArchitectureGenerator gen(spec, gcfg, cfg.seed);
  std::unique_ptr<GeneratorOracle> oracle;
  std::optional<TabularBench> bench;
  std::unique_ptr<Supernet> net;
  ToyDataset ds;
  if (!cfg.tabular.empty()) {
    bench.emplace(detail::load_bench(run, cfg, spec));
    if (bench->accounting() != gcfg.accounting)
      throw ContractError("generator accounting differs from the table's accounting");
    oracle = std::make_unique<TabularOracle>(*bench);
  } else {
    if (!cfg.dataset) throw ConfigError("train-generator needs config.tabular or config.dataset with --supernet");
    ds = load_dataset(*cfg.dataset, spec);
    net = std::make_unique<Supernet>(spec, 0);
    net->load_from(detail::load_checkpoint(run, "supernet", detail::opt_string(options, "supernet"), spec));
    oracle = std::make_unique<SupernetOracle>(*net, ds.val, cfg.oracle_batch);
  }
  GeneratorTrainer trainer(gen, *oracle, cfg.seed + 1);
  MetricsLog metrics(run.dir());
  std::size_t step = 0;
  for (std::size_t e = 0; e < gcfg.epochs; ++e) {
    const auto recs = trainer.run_epoch();
    double lv = 0, lc = 0;
    for (const auto& r : recs) {
      metrics.record("generator", step++,
                     {{"epoch", static_cast<double>(r.epoch)},
                      {"target", r.target},
                      {"tau", r.tau},
                      {"val_loss", r.val_loss},
                      {"constraint_loss", r.constraint_loss},
                      {"total", r.total},
                      {"expected_cost", r.expected_cost}});
      lv += r.val_loss;
      lc += r.constraint_loss;
    }
    run.add_training_steps(recs.size());
    const double n = static_cast<double>(std::max<std::size_t>(1, recs.size()));
    ctx.log << "generator epoch " << e + 1 << "/" << gcfg.epochs << " val " << lv / n << " constraint " << lc / n << "\n";
  }
  Checkpoint ck;
  ck.spec_hash = spec.hash();
  gen.save_to(ck);
  ck.save(run.path("generator.ckpt"));
  run.output("generator.ckpt");
  run.output("metrics.ndjson");
  run.output("metrics.csv");
  run.set("c_low", gcfg.c_low);
  run.set("c_high", gcfg.c_high);
  ctx.out << run.path("generator.ckpt").string() << "\n";
}

inline void cmd_generate(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  auto gen = detail::load_generator(run, "generator", detail::opt_string(options, "generator"), spec);
  const auto targets = detail::doubles(detail::opt(options, "targets"), "--targets");
  if (targets.empty()) throw ConfigError("generate needs at least one target");
  GenerationRequest base;
  base.seed = cfg.seed;
  if (options.contains("prior")) {
    const std::string p = options.at("prior").get<std::string>();
    run.input("prior", p);
    const auto a = encoding_from_text(spec, read_file(p));
    require_valid(spec, a);
    base.prior = encode_prior(spec, a);
  }
  base.fresh_prior = options.value("fresh_prior", false);
  base.deterministic = !options.value("stochastic", false);
  std::ostringstream csv;
  csv << "target,cost,repaired,extrapolated,encoding\n";
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto req = base;
    req.target = targets[i];
    const auto r = gen->generate(req);
    const auto compact = encoding_to_compact(spec, r.encoding);
    csv << sgnas::detail::format_double(targets[i]) << ',' << sgnas::detail::format_double(r.cost) << ','
        << r.repaired << ',' << r.extrapolated << ',' << compact << '\n';
    run.write_output("arch_" + std::to_string(i) + ".txt", encoding_to_text(spec, r.encoding));
    ctx.out << sgnas::detail::format_double(targets[i]) << ' ' << sgnas::detail::format_double(r.cost) << ' ' << compact
            << (r.extrapolated ? " (extrapolated)" : "") << "\n";
  }
  run.write_output("generated.csv", csv.str());
  run.set("forward_passes", gen->trunk_forward_count());
  run.set("requests", targets.size());
}

inline void cmd_sweep(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  auto gen = detail::load_generator(run, "generator", detail::opt_string(options, "generator"), spec);
  const double from = options.value("from", gen->config().c_low), to = options.value("to", gen->config().c_high);
  const std::size_t steps = options.value("steps", std::size_t{10});
  if (steps < 2 || !(from > 0) || !(to > from)) throw ConfigError("sweep needs 0 < from < to and steps >= 2");
  std::vector<double> t, c;
  double err = 0;
  std::ostringstream csv;
  csv << "target,achieved,encoding\n";
  for (std::size_t i = 0; i < steps; ++i) {
    const double target = from + (to - from) * static_cast<double>(i) / static_cast<double>(steps - 1);
    const auto r = gen->generate({.target = target, .seed = cfg.seed});
    t.push_back(target);
    c.push_back(r.cost);
    err += std::abs(r.cost - target) / target;
    csv << sgnas::detail::format_double(target) << ',' << sgnas::detail::format_double(r.cost) << ','
        << encoding_to_compact(spec, r.encoding) << '\n';
  }
  run.write_output("sweep.csv", csv.str());
  const json summary = {{"kendall_tau", kendall_tau(t, c)}, {"mean_relative_error", err / static_cast<double>(steps)}};
  run.write_output("sweep_summary.json", summary.dump(2) + "\n");
  ctx.out << "kendall_tau " << summary["kendall_tau"].get<double>() << " mean_relative_error "
          << summary["mean_relative_error"].get<double>() << "\n";
}

inline void cmd_search(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  std::optional<TabularBench> bench;
  std::unique_ptr<Supernet> net;
  ToyDataset ds;
  Evaluator eval;
  Accounting accounting = cfg.generator.accounting;
  if (!cfg.tabular.empty()) {
    bench.emplace(detail::load_bench(run, cfg, spec));
    eval = tabular_evaluator(*bench);
    accounting = bench->accounting();
  } else {
    if (!cfg.dataset) throw ConfigError("search needs config.tabular or config.dataset with --supernet");
    ds = load_dataset(*cfg.dataset, spec);
    net = std::make_unique<Supernet>(spec, 0);
    net->load_from(detail::load_checkpoint(run, "supernet", detail::opt_string(options, "supernet"), spec));
    auto eopt = cfg.eval;
    eopt.seed = cfg.seed;
    eval = [&, eopt](const ArchEncoding& a) { return evaluate_subnet(*net, a, ds.val, ds.train, eopt); };
  }
  const auto table = build_cost_table(spec, accounting);
  const SearchBudget budget{.max_evaluations = cfg.search.budget, .constraint = cfg.search.bound(), .seed = cfg.seed};
  const auto r = cfg.search.strategy == "random" ? random_search(spec, table, eval, budget)
                                                 : evolution_search(spec, table, eval, budget, cfg.search.evolution);
  MetricsLog metrics(run.dir());
  for (const auto& t : r.trace)
    metrics.record("search", t.step, {{"generation", static_cast<double>(t.generation)}, {"cost", t.cost},
                                      {"score", t.score}, {"best_so_far", t.best_so_far}});
  std::ostringstream trace;
  r.write_trace_csv(trace, spec);
  run.write_output("trace.csv", trace.str());
  run.write_output("best.txt", encoding_to_text(spec, r.best));
  run.output("metrics.ndjson");
  run.output("metrics.csv");
  run.set("evaluations", r.trace.size());
  ctx.out << encoding_to_compact(spec, r.best) << " score " << sgnas::detail::format_double(r.best_score) << " cost "
          << sgnas::detail::format_double(r.best_cost) << "\n";
}

inline void cmd_bench(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  const auto bench = detail::load_bench(run, cfg, spec);
  std::vector<std::unique_ptr<ArchitectureGenerator>> owned;
  std::vector<ArchitectureGenerator*> gens;
  if (options.contains("generators")) {
    std::size_t i = 0;
    for (const auto& p : options.at("generators")) {
      owned.push_back(detail::load_generator(run, "generator" + std::to_string(i++), p.get<std::string>(), spec));
      gens.push_back(owned.back().get());
    }
  }
  ProtocolConfig pc;
  pc.constraints = cfg.bench.constraints;
  if (pc.constraints.empty())
    for (double f : cfg.bench.fractions)
      pc.constraints.push_back(bench.min_flops() + f * (bench.max_flops() - bench.min_flops()));
  pc.seeds = cfg.bench.seeds;
  pc.budget = cfg.bench.budget;
  pc.evolution = cfg.search.evolution;
  const auto rep = bench_protocol_run(bench, gens, pc);
  std::ostringstream summary, runs, scatter;
  rep.write_summary_csv(summary);
  rep.write_runs_csv(runs, spec);
  rep.write_scatter_csv(scatter, bench, cfg.bench.scatter_rows);
  run.write_output("summary.csv", summary.str());
  run.write_output("runs.csv", runs.str());
  run.write_output("scatter.csv", scatter.str());
  ctx.out << summary.str();
}

inline void cmd_flops(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  const std::string p = detail::opt_string(options, "encoding");
  run.input("encoding", p);
  const auto a = encoding_from_text(spec, read_file(p));
  require_valid(spec, a);
  const auto accounting = parse_accounting(options.value("accounting", std::string("fixed_width")));
  const auto nc = network_cost(spec, a, accounting);
  std::ostringstream csv;
  csv << "layer,flops,params\n";
  for (const auto& l : nc.layers)
    csv << l.name << ',' << sgnas::detail::format_double(l.flops) << ',' << sgnas::detail::format_double(l.params) << '\n';
  csv << "total," << sgnas::detail::format_double(nc.flops) << ',' << sgnas::detail::format_double(nc.params) << '\n';
  run.write_output("flops.csv", csv.str());
  ctx.out << csv.str();
}

inline void cmd_make_bench(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  SyntheticBenchOptions o;
  o.noise = options.value("noise", o.noise);
  o.interaction = options.value("interaction", o.interaction);
  if (options.contains("accounting")) o.accounting = parse_accounting(options.at("accounting").get<std::string>());
  const auto bench = make_synthetic_bench(spec, cfg.seed, o);
  bench.save(run.path("bench.csv"));
  run.output("bench.csv");
  ctx.out << run.path("bench.csv").string() << " " << bench.size() << " architectures\n";
}

inline void cmd_export_costs(RunDir& run, const RunConfig& cfg, const json& options, CommandContext& ctx) {
  const auto spec = load_space(cfg.space);
  const auto accounting = parse_accounting(options.value("accounting", std::string("fixed_width")));
  std::ostringstream csv;
  build_cost_table(spec, accounting).write_csv(csv, spec);
  run.write_output("costs.csv", csv.str());
  ctx.out << run.path("costs.csv").string() << "\n";
}

inline const std::map<std::string, void (*)(RunDir&, const RunConfig&, const json&, CommandContext&)>& commands() {
  static const std::map<std::string, void (*)(RunDir&, const RunConfig&, const json&, CommandContext&)> table{
      {"train-supernet", &cmd_train_supernet}, {"train-generator", &cmd_train_generator},
      {"generate", &cmd_generate},             {"sweep", &cmd_sweep},
      {"search", &cmd_search},                 {"bench", &cmd_bench},
      {"flops", &cmd_flops},                   {"make-bench", &cmd_make_bench},
      {"export-costs", &cmd_export_costs}};
  return table;
}

// Runs one invocation into `out`; the invocation's config must already be a
// full RunConfig snapshot (see RunConfig::to_json).
inline void execute(const json& invocation, const fs::path& out, CommandContext& ctx) {
  const auto name = invocation.at("command").get<std::string>();
  const auto it = commands().find(name);
  if (it == commands().end()) throw ConfigError("unknown command '" + name + "'");
  auto cfg = RunConfig::from_json(invocation.at("config"));
  // Pin relative paths so the manifest replays from any directory.
  auto pin = [](std::string& p) {
    if (!p.empty()) p = fs::absolute(p).string();
  };
  if (cfg.space.rfind("builtin:", 0) != 0) pin(cfg.space);
  pin(cfg.tabular);
  if (cfg.dataset) {
    pin(cfg.dataset->train);
    pin(cfg.dataset->val);
    pin(cfg.dataset->test);
  }
  const json canonical = {{"command", name}, {"options", invocation.value("options", json::object())}, {"config", cfg.to_json()}};
  RunDir run(out, canonical);
  if (cfg.space.rfind("builtin:", 0) != 0) run.input("space", cfg.space);
  it->second(run, cfg, canonical["options"], ctx);
  run.finish();
}

struct RerunReport {
  bool identical = true;
  std::vector<std::string> differing;  // outputs whose checksum changed
  std::vector<std::string> changed_inputs;
};

// Replays the run recorded in `original`/manifest.json into `out` and
// compares output checksums.
inline RerunReport rerun(const fs::path& original, const fs::path& out, CommandContext& ctx) {
  const auto manifest = json::parse(read_file(original / "manifest.json"), nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("invocation") || !manifest.contains("outputs"))
    throw FormatError("malformed manifest in " + original.string());
  RerunReport rep;
  for (auto it = manifest["inputs"].begin(); it != manifest["inputs"].end(); ++it) {
    const auto p = it.value().at("path").get<std::string>();
    if (!fs::exists(p) || file_sha1(p) != it.value().at("sha1").get<std::string>()) rep.changed_inputs.push_back(p);
  }
  if (!rep.changed_inputs.empty())
    throw FormatError("input " + rep.changed_inputs.front() + " changed since the original run");
  execute(manifest["invocation"], out, ctx);
  const auto again = json::parse(read_file(out / "manifest.json"));
  for (auto it = manifest["outputs"].begin(); it != manifest["outputs"].end(); ++it) {
    if (!again["outputs"].contains(it.key()) || again["outputs"][it.key()] != it.value()) {
      rep.identical = false;
      rep.differing.push_back(it.key());
    }
  }
  return rep;
}

}  // namespace sgnas::runtime
