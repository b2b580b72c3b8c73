// sgnas: command-line front end for the run-directory pipelines.
//
// Config precedence, lowest first: built-in defaults, --config file,
// --set key.path=value overrides, dedicated flags (--seed, --space, ...).

#include <CLI11.hpp>

#include <iostream>

#include "sgnas/runtime.hpp"

namespace rt = sgnas::runtime;
using nlohmann::json;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
  std::string space;
  std::string tabular;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "JSON run config")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "override a config key, e.g. generator.lambda=0.1");
  app->add_option("--out", c.out, "run directory to create")->required();
  app->add_option("--space", c.space, "space file or builtin:<name>");
  app->add_option("--seed", c.seed, "master seed");
}

json build_config(const Common& c) {
  json j = json::object();
  if (!c.config_file.empty()) {
    j = json::parse(rt::read_file(c.config_file), nullptr, false);
    if (j.is_discarded()) throw sgnas::ConfigError("config file " + c.config_file + " is not valid JSON");
  }
  for (const auto& o : c.overrides) rt::apply_override(j, o);
  if (!c.space.empty()) j["space"] = c.space;
  if (!c.tabular.empty()) j["tabular"] = std::filesystem::absolute(c.tabular).string();
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

std::string absolute(const std::string& p) { return std::filesystem::absolute(p).string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sgnas: constraint-conditioned architecture generation and baselines"};
  app.require_subcommand(1);
  app.set_version_flag("--version", rt::kVersion);

  std::map<std::string, Common> common;
  json options = json::object();
  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    add_common(s, common[name]);
    return s;
  };

  sub("train-supernet", "train the weight-sharing supernet on an image dataset");

  std::string supernet, generator, encoding, prior, accounting, strategy;
  std::vector<double> targets;
  std::vector<std::string> generators;
  double from = 0, to = 0, constraint = -1, noise = -1, interaction = -1;
  std::size_t steps = 0, budget = 0;
  bool fresh_prior = false, stochastic = false;

  auto* tg = sub("train-generator", "train the architecture generator against a supernet or a table");
  tg->add_option("--supernet", supernet, "supernet checkpoint")->check(CLI::ExistingFile);
  tg->add_option("--tabular", common["train-generator"].tabular, "tabular benchmark CSV")->check(CLI::ExistingFile);

  auto* gen = sub("generate", "generate architectures for cost targets");
  gen->add_option("--generator", generator, "generator checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--target", targets, "cost target (repeatable)")->required();
  gen->add_option("--prior", prior, "encoding file used as the prior")->check(CLI::ExistingFile);
  gen->add_flag("--fresh-prior", fresh_prior, "draw a new random prior from --seed");
  gen->add_flag("--stochastic", stochastic, "add Gumbel noise before discretising");

  auto* sw = sub("sweep", "sweep cost targets and report tracking");
  sw->add_option("--generator", generator, "generator checkpoint")->required()->check(CLI::ExistingFile);
  sw->add_option("--from", from, "first target");
  sw->add_option("--to", to, "last target");
  sw->add_option("--steps", steps, "number of targets");

  auto* se = sub("search", "random or evolution search baseline");
  se->add_option("--strategy", strategy, "random or evolution");
  se->add_option("--budget", budget, "maximum evaluations");
  se->add_option("--constraint", constraint, "cost upper bound");
  se->add_option("--supernet", supernet, "supernet checkpoint")->check(CLI::ExistingFile);
  se->add_option("--tabular", common["search"].tabular, "tabular benchmark CSV")->check(CLI::ExistingFile);

  auto* be = sub("bench", "generator and baselines on a tabular benchmark");
  be->add_option("--tabular", common["bench"].tabular, "tabular benchmark CSV")->check(CLI::ExistingFile);
  be->add_option("--generator", generators, "generator checkpoint (repeatable)")->check(CLI::ExistingFile);

  auto* fl = sub("flops", "per-layer FLOPs and parameters of an encoding");
  fl->add_option("--encoding", encoding, "encoding file")->required()->check(CLI::ExistingFile);
  fl->add_option("--accounting", accounting, "fixed_width or simulated_expansion");

  auto* mb = sub("make-bench", "write a synthetic tabular benchmark");
  mb->add_option("--noise", noise, "accuracy noise");
  mb->add_option("--interaction", interaction, "pairwise interaction strength");
  mb->add_option("--accounting", accounting, "fixed_width or simulated_expansion");

  auto* ec = sub("export-costs", "write the per-slot cost table");
  ec->add_option("--accounting", accounting, "fixed_width or simulated_expansion");

  std::string rerun_dir, rerun_out;
  auto* rr = app.add_subcommand("rerun", "replay a run from its manifest and compare outputs");
  rr->add_option("run", rerun_dir, "original run directory")->required()->check(CLI::ExistingDirectory);
  rr->add_option("--out", rerun_out, "new run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? rt::kOk : rt::kUsage;
  }

  rt::CommandContext ctx;
  try {
    if (rr->parsed()) {
      const auto rep = rt::rerun(rerun_dir, rerun_out, ctx);
      if (rep.identical) {
        std::cout << "identical\n";
        return rt::kOk;
      }
      for (const auto& d : rep.differing) std::cout << "differs: " << d << "\n";
      return rt::kMismatch;
    }
    CLI::App* chosen = app.get_subcommands().front();
    const std::string name = chosen->get_name();
    if (!supernet.empty()) options["supernet"] = absolute(supernet);
    if (!generator.empty()) options["generator"] = absolute(generator);
    if (!prior.empty()) options["prior"] = absolute(prior);
    if (!encoding.empty()) options["encoding"] = absolute(encoding);
    if (!targets.empty()) options["targets"] = targets;
    if (fresh_prior) options["fresh_prior"] = true;
    if (stochastic) options["stochastic"] = true;
    if (!accounting.empty()) options["accounting"] = accounting;
    if (sw->parsed()) {
      if (from > 0) options["from"] = from;
      if (to > 0) options["to"] = to;
      if (steps > 0) options["steps"] = steps;
    }
    if (mb->parsed()) {
      if (noise >= 0) options["noise"] = noise;
      if (interaction >= 0) options["interaction"] = interaction;
    }
    if (!generators.empty()) {
      json g = json::array();
      for (const auto& p : generators) g.push_back(absolute(p));
      options["generators"] = g;
    }
    json config = build_config(common[name]);
    if (se->parsed()) {
      if (!strategy.empty()) config["search"]["strategy"] = strategy;
      if (budget > 0) config["search"]["budget"] = budget;
      if (constraint >= 0) config["search"]["constraint"] = constraint;
    }
    const json invocation = {{"command", name}, {"options", options}, {"config", config}};
    rt::execute(invocation, common[name].out, ctx);
    return rt::kOk;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rt::kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return rt::exit_code_for(e);
  }
}
