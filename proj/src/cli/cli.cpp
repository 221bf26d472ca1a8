// SPDX-License-Identifier: Apache-2.0
#include "fmoe/cli/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <utility>

#include "fmoe/errors.hpp"
#include "fmoe/eval/metrics.hpp"
#include "fmoe/federation/checkpoint.hpp"
#include "fmoe/federation/runner.hpp"
#include "fmoe/log.hpp"

#include <json.hpp>

namespace fmoe::cli {
namespace {

namespace fs = std::filesystem;
using federation::ExpertCheckpoint;
using federation::Mode;
using federation::RunResult;

struct Presets {
  std::size_t rounds;
  std::size_t patience;
};

std::optional<Presets> preset_for(const std::string& name) {
  if (name.empty()) return std::nullopt;
  if (name == "fkcb") return Presets{60, 10};
  if (name == "mbg" || name == "sgh") return Presets{40, 5};
  throw ConfigError("unknown preset '" + name + "' (expected fkcb, mbg or sgh)");
}

std::string default_output_dir() {
  if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
  return "fmoe_out";
}

// Options shared by every subcommand that runs or rebuilds a federation.
void add_run_options(CLI::App& app, RunConfig& c) {
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "Read options from an INI/TOML file");

  app.add_option("--scenario", c.scenario, "Manifest of canonical domain files");
  app.add_option("--synthetic", c.synthetic, "Synthetic preset used without --scenario")
      ->check(CLI::IsMember({"default", "independent"}));
  app.add_option("--correlation", c.synthetic_spec.correlation,
                 "Synthetic: weight of the shared latent chain");
  app.add_option("--synthetic-domains", c.synthetic_spec.domains);
  app.add_option("--synthetic-items", c.synthetic_spec.items_per_domain);
  app.add_option("--synthetic-users", c.synthetic_spec.users_per_domain);
  app.add_option("--synthetic-clusters", c.synthetic_spec.clusters);
  app.add_option("--synthetic-successors", c.synthetic_spec.successors);
  app.add_option("--synthetic-skew", c.synthetic_spec.emission_skew);
  app.add_option("--synthetic-min-length", c.synthetic_spec.min_length);
  app.add_option("--synthetic-max-length", c.synthetic_spec.max_length);
  app.add_option("--data-seed", c.synthetic_spec.seed, "Synthetic data seed (default: --seed)");

  app.add_flag("!--no-filter", c.data.filter.enabled, "Skip interaction filtering");
  app.add_option("--min-user-interactions", c.data.filter.min_user_interactions);
  app.add_option("--min-item-interactions", c.data.filter.min_item_interactions);
  app.add_option("--min-length", c.data.filter.min_length);
  app.add_option("--max-length", c.data.filter.max_length);
  app.add_option("--holdout-ratio", c.data.holdout_ratio);

  app.add_option("--mode", c.mode, "fmoe, local_only, fedavg, no_gate, no_freeze, drop_expert");
  app.add_option("--preset", c.preset, "Schedule preset: fkcb, mbg or sgh");
  app.add_option("--rounds", c.train.rounds, "Communication rounds N");
  app.add_option("--local-epochs", c.train.local_epochs, "Local epochs M per round");
  app.add_option("--patience", c.train.patience, "Early-stopping patience in rounds");
  app.add_option("--batch-size", c.train.batch_size);
  app.add_option("--lr", c.train.adam.learning_rate, "Adam learning rate");
  app.add_option("--dropout", c.encoder.dropout);
  app.add_option("--width", c.encoder.width, "Hidden width d");
  app.add_option("--blocks", c.encoder.blocks, "Attention blocks B");
  app.add_option("--heads", c.encoder.heads, "Attention heads H");
  app.add_option("--ffn-multiplier", c.encoder.ffn_multiplier);
  app.add_option("--gnn-depth", c.encoder.gnn_depth, "Graph propagation steps L");
  app.add_option("--max-len", c.data.max_prefix, "Maximum prefix length T_max");
  app.add_option("--temperature", c.train.temperature, "Contrastive temperature");
  app.add_option("--shuffle-ratio", c.train.shuffle_ratio, "Augmentation window ratio");
  app.add_option("--weight-local-rec", c.train.weights.local_rec);
  app.add_option("--weight-local-con", c.train.weights.local_con);
  app.add_option("--weight-global-rec", c.train.weights.global_rec);
  app.add_option("--weight-global-con", c.train.weights.global_con);
  app.add_option("--weight-moe", c.train.weights.moe);
  app.add_option("--gate-hidden", c.train.gate_hidden, "Hidden units in the gate (0 = linear)");
  app.add_flag("--moe-grad-to-experts", c.train.moe_grad_to_experts,
               "Let the fused loss update the experts too");
  app.add_option("--drop", c.train.dropped_experts, "drop_expert: domains to remove")
      ->delimiter(',');
  app.add_option("--drop-target", c.train.drop_target,
                 "drop_expert: only this domain loses the experts");
  app.add_option("--two-phase-epochs", c.two_phase_epochs,
                 "Run the two-phase schedule with this many pretraining epochs");
  app.add_flag("--exclude-seen", c.train.exclude_seen, "Exclude prefix items from ranking");
  app.add_option("--eval-batch", c.train.eval_batch);
  app.add_flag("--parallel-clients", c.train.parallel_clients,
               "Run client updates concurrently");
  app.add_option("--seed", c.train.seed);
  app.add_option("--output,-o", c.output_dir, "Output directory");
  app.add_option("--precision", c.precision)->check(CLI::IsMember({"f32", "f64"}));
  app.add_flag("--log-gate-weights", c.log_gate_weights, "Add gate weights to the metrics");
}

// Fills values that depend on which options were given.
void resolve(CLI::App& app, RunConfig& c) {
  if (auto p = preset_for(c.preset)) {
    if (app.count("--rounds") == 0) c.train.rounds = p->rounds;
    if (app.count("--patience") == 0) c.train.patience = p->patience;
  }
  if (c.synthetic == "independent" && app.count("--correlation") == 0) {
    c.synthetic_spec.correlation = 0.0;
  }
  if (app.count("--data-seed") == 0) c.synthetic_spec.seed = c.train.seed;
  if (c.output_dir.empty()) c.output_dir = default_output_dir();
  c.encoder.max_len = c.data.max_prefix;
  c.train.mode = federation::parse_mode(c.mode);
}

std::string row_label(const RunConfig& c) {
  if (c.two_phase_epochs >= 0) {
    return "Global Expert(" + std::to_string(c.two_phase_epochs) + " epochs)";
  }
  switch (c.train.mode) {
    case Mode::kFmoe: return "FMoE";
    case Mode::kLocalOnly: return "Local Expert";
    case Mode::kFedAvg: return "FedAvg";
    case Mode::kNoGate: return "w/o Gate Router";
    case Mode::kNoFreeze: return "w/o Freeze";
    case Mode::kDropExpert: {
      std::string ids;
      for (const auto& d : c.train.dropped_experts) ids += (ids.empty() ? "" : ",") + d;
      return "w/o " + ids + " expert";
    }
  }
  return "run";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_gate_records(std::ostream& out, const federation::RoundRecord& rec,
                        const data::ScenarioSpec& scenario, const RunConfig& c) {
  const auto sources = federation::resolve_sources(scenario, c.train);
  for (std::size_t k = 0; k < rec.gate_weights.size(); ++k) {
    for (std::size_t e = 0; e < rec.gate_weights[k].size(); ++e) {
      const std::string expert = e == 0 ? std::string("local") : sources[k][e - 1];
      nlohmann::json j{{"round", rec.round},
                       {"mode", rec.valid.mode},
                       {"split", "valid"},
                       {"domain", scenario.domains[k].domain_id},
                       {"metric", "gate." + expert},
                       {"value", rec.gate_weights[k][e]}};
      out << j.dump() << '\n';
    }
  }
}

ExpertCheckpoint local_encoder_of(const ExpertCheckpoint& state) {
  static const std::string prefix = "local.encoder.";
  ExpertCheckpoint out;
  for (const auto& e : state.entries) {
    if (e.name.rfind(prefix, 0) == 0) out.entries.push_back({e.name.substr(6), e.shape, e.values});
  }
  return out;
}

struct Outcome {
  RunResult result;
  std::vector<ExpertCheckpoint> states;
};

template <typename T>
Outcome execute(const RunConfig& c, const data::ScenarioSpec& scenario,
                const federation::RoundCallback& on_round) {
  federation::Federation<T> fed(scenario, c.encoder, c.train);
  Outcome out;
  out.result = c.two_phase_epochs >= 0
                   ? fed.run_two_phase(static_cast<std::size_t>(c.two_phase_epochs), on_round)
                   : fed.run(on_round);
  out.states = fed.best_states();
  return out;
}

// Runs one configuration and writes metrics, table, checkpoints and the
// resolved config under `dir`. Returns the best-round test report.
eval::MetricsReport run_and_write(RunConfig c, const data::ScenarioSpec& scenario,
                                  const fs::path& dir) {
  fs::create_directories(dir / "checkpoints");
  c.output_dir = dir.string();
  write_text(dir / "config.ini", to_config_text(c));
  std::ofstream metrics(dir / "metrics.jsonl");
  if (!metrics) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
  auto on_round = [&](const federation::RoundRecord& rec) {
    eval::write_records(metrics, rec.valid);
    eval::write_records(metrics, rec.test);
    if (c.log_gate_weights) write_gate_records(metrics, rec, scenario, c);
    metrics.flush();
  };
  Outcome out = c.precision == "f64" ? execute<double>(c, scenario, on_round)
                                     : execute<float>(c, scenario, on_round);
  const auto& best = out.result.best();
  for (std::size_t k = 0; k < out.states.size(); ++k) {
    const auto& id = scenario.domains[k].domain_id;
    federation::write_checkpoint(dir / "checkpoints" / (id + ".state"), out.states[k]);
    federation::write_checkpoint(dir / "checkpoints" / (id + ".ckpt"),
                                 local_encoder_of(out.states[k]));
  }
  const std::vector<std::pair<std::string, eval::MetricsReport>> rows{{row_label(c), best.test}};
  std::ostringstream table;
  table << eval::format_table(rows);
  table << "best round " << best.round << " of " << out.result.history.size()
        << (out.result.early_stopped ? " (early stop)" : "") << '\n';
  write_text(dir / "table.txt", table.str());
  return best.test;
}

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

}  // namespace

std::string to_config_text(const RunConfig& c) {
  std::ostringstream o;
  o.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  const auto& s = c.synthetic_spec;
  const auto& f = c.data.filter;
  const auto& t = c.train;
  const auto& e = c.encoder;
  o << "# fully resolved run configuration\n";
  o << "scenario=" << quoted(c.scenario) << '\n';
  o << "synthetic=" << quoted(c.synthetic) << '\n';
  o << "correlation=" << s.correlation << '\n';
  o << "synthetic-domains=" << s.domains << '\n';
  o << "synthetic-items=" << s.items_per_domain << '\n';
  o << "synthetic-users=" << s.users_per_domain << '\n';
  o << "synthetic-clusters=" << s.clusters << '\n';
  o << "synthetic-successors=" << s.successors << '\n';
  o << "synthetic-skew=" << s.emission_skew << '\n';
  o << "synthetic-min-length=" << s.min_length << '\n';
  o << "synthetic-max-length=" << s.max_length << '\n';
  o << "data-seed=" << s.seed << '\n';
  o << "no-filter=" << b(!f.enabled) << '\n';
  o << "min-user-interactions=" << f.min_user_interactions << '\n';
  o << "min-item-interactions=" << f.min_item_interactions << '\n';
  o << "min-length=" << f.min_length << '\n';
  o << "max-length=" << f.max_length << '\n';
  o << "holdout-ratio=" << c.data.holdout_ratio << '\n';
  o << "mode=" << quoted(c.mode) << '\n';
  // The preset is already folded into rounds and patience.
  o << "rounds=" << t.rounds << '\n';
  o << "local-epochs=" << t.local_epochs << '\n';
  o << "patience=" << t.patience << '\n';
  o << "batch-size=" << t.batch_size << '\n';
  o << "lr=" << t.adam.learning_rate << '\n';
  o << "dropout=" << e.dropout << '\n';
  o << "width=" << e.width << '\n';
  o << "blocks=" << e.blocks << '\n';
  o << "heads=" << e.heads << '\n';
  o << "ffn-multiplier=" << e.ffn_multiplier << '\n';
  o << "gnn-depth=" << e.gnn_depth << '\n';
  o << "max-len=" << c.data.max_prefix << '\n';
  o << "temperature=" << t.temperature << '\n';
  o << "shuffle-ratio=" << t.shuffle_ratio << '\n';
  o << "weight-local-rec=" << t.weights.local_rec << '\n';
  o << "weight-local-con=" << t.weights.local_con << '\n';
  o << "weight-global-rec=" << t.weights.global_rec << '\n';
  o << "weight-global-con=" << t.weights.global_con << '\n';
  o << "weight-moe=" << t.weights.moe << '\n';
  o << "gate-hidden=" << t.gate_hidden << '\n';
  o << "moe-grad-to-experts=" << b(t.moe_grad_to_experts) << '\n';
  if (!t.dropped_experts.empty()) {
    std::string ids;
    for (const auto& d : t.dropped_experts) ids += (ids.empty() ? "" : ",") + d;
    o << "drop=" << quoted(ids) << '\n';
  }
  o << "drop-target=" << quoted(t.drop_target) << '\n';
  o << "two-phase-epochs=" << c.two_phase_epochs << '\n';
  o << "exclude-seen=" << b(t.exclude_seen) << '\n';
  o << "eval-batch=" << t.eval_batch << '\n';
  o << "parallel-clients=" << b(t.parallel_clients) << '\n';
  o << "seed=" << t.seed << '\n';
  o << "output=" << quoted(c.output_dir) << '\n';
  o << "precision=" << quoted(c.precision) << '\n';
  o << "log-gate-weights=" << b(c.log_gate_weights) << '\n';
  return o.str();
}

namespace {

int cmd_train(CLI::App& app, RunConfig& c) {
  resolve(app, c);
  validate(c);
  auto scenario = load_run_scenario(c);
  const fs::path dir(c.output_dir);
  const auto report = run_and_write(c, scenario, dir);
  std::cout << eval::format_table(
      std::vector<std::pair<std::string, eval::MetricsReport>>{{row_label(c), report}});
  std::cout << "outputs written to " << dir.string() << '\n';
  return 0;
}

template <typename T>
eval::MetricsReport evaluate_states(const RunConfig& c, const data::ScenarioSpec& scenario,
                                    const fs::path& dir, const std::string& split) {
  federation::Federation<T> fed(scenario, c.encoder, c.train);
  for (auto& client : fed.clients()) {
    client.import_state(federation::read_checkpoint(dir / (client.domain_id() + ".state")));
  }
  const auto rec = fed.evaluate(0);
  return split == "valid" ? rec.valid : rec.test;
}

int cmd_eval(CLI::App& app, RunConfig& c, const std::string& checkpoints,
             const std::string& split) {
  resolve(app, c);
  validate(c);
  auto scenario = load_run_scenario(c);
  const fs::path dir = checkpoints.empty() ? fs::path(c.output_dir) / "checkpoints"
                                           : fs::path(checkpoints);
  const auto report = c.precision == "f64" ? evaluate_states<double>(c, scenario, dir, split)
                                           : evaluate_states<float>(c, scenario, dir, split);
  std::cout << eval::format_table(
      std::vector<std::pair<std::string, eval::MetricsReport>>{{row_label(c), report}});
  return 0;
}

int cmd_generate(CLI::App& app, RunConfig& c) {
  resolve(app, c);
  data::validate(c.synthetic_spec);
  const auto raw = data::generate_synthetic_raw(c.synthetic_spec);
  const auto manifest = data::write_scenario(raw, c.output_dir);
  std::cout << manifest.string() << '\n';
  return 0;
}

int cmd_ablate(CLI::App& app, RunConfig& c, const std::vector<std::string>& grid,
               const std::vector<std::size_t>& pretrain_grid) {
  resolve(app, c);
  c.train.mode = Mode::kFmoe;
  c.mode = "fmoe";
  const auto dropped = c.train.dropped_experts;
  c.train.dropped_experts.clear();
  c.train.drop_target.clear();
  c.two_phase_epochs = -1;
  validate(c);
  auto scenario = load_run_scenario(c);

  struct Variant {
    std::string slug;
    RunConfig config;
  };
  std::vector<Variant> variants;
  auto with_mode = [&](Mode m, std::string name) {
    RunConfig v = c;
    v.train.mode = m;
    v.mode = std::move(name);
    return v;
  };
  for (const auto& g : grid) {
    if (g == "local") {
      variants.push_back({"local", with_mode(Mode::kLocalOnly, "local_only")});
    } else if (g == "gate") {
      variants.push_back({"gate", with_mode(Mode::kNoGate, "no_gate")});
    } else if (g == "freeze") {
      variants.push_back({"freeze", with_mode(Mode::kNoFreeze, "no_freeze")});
    } else if (g == "fedavg") {
      variants.push_back({"fedavg", with_mode(Mode::kFedAvg, "fedavg")});
    } else if (g == "drop") {
      std::vector<std::string> ids = dropped;
      if (ids.empty()) {
        for (const auto& d : scenario.domains) ids.push_back(d.domain_id);
      }
      for (const auto& id : ids) {
        RunConfig v = with_mode(Mode::kDropExpert, "drop_expert");
        v.train.dropped_experts = {id};
        variants.push_back({"drop_" + id, v});
      }
    } else if (g == "two_phase") {
      for (auto p : pretrain_grid) {
        RunConfig v = c;
        v.two_phase_epochs = static_cast<long>(p);
        variants.push_back({"two_phase_" + std::to_string(p), v});
      }
    } else {
      throw ConfigError("unknown ablation '" + g +
                        "' (expected local, gate, freeze, fedavg, drop, two_phase)");
    }
  }
  for (const auto& v : variants) validate(v.config);

  const fs::path root(c.output_dir);
  auto run_variant = [&](const std::string& slug, const RunConfig& v) {
    return run_and_write(v, scenario, root / slug);
  };

  const auto ours = run_variant("ours", c);
  std::vector<std::pair<std::string, eval::MetricsReport>> all;
  for (const auto& v : variants) {
    const auto report = run_variant(v.slug, v.config);
    const std::vector<std::pair<std::string, eval::MetricsReport>> rows{
        {row_label(v.config), report}, {"Ours", ours}};
    const auto table = eval::format_table(rows);
    write_text(root / v.slug / "comparison.txt", table);
    std::cout << "== " << v.slug << " ==\n" << table << '\n';
    all.emplace_back(row_label(v.config), report);
  }
  all.emplace_back("Ours", ours);
  const auto summary = eval::format_table(all);
  write_text(root / "ablation_table.txt", summary);
  std::cout << "== summary ==\n" << summary;
  return 0;
}

int cmd_inspect(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto ck = federation::deserialize(bytes);
  std::size_t total = 0;
  for (const auto& e : ck.entries) {
    std::cout << e.name << '\t' << shape_string(e.shape) << '\n';
    total += e.values.size();
  }
  std::cout << ck.entries.size() << " parameters, " << total << " values\n";
  if (federation::serialize(ck) != bytes) {
    std::cout << "round-trip: MISMATCH\n";
    return 1;
  }
  std::cout << "round-trip: byte-identical\n";
  return 0;
}

}  // namespace

void validate(const RunConfig& c) {
  if (c.scenario.empty()) data::validate(c.synthetic_spec);
  c.encoder.validate();
  c.train.validate();
  if (c.data.max_prefix == 0) throw ConfigError("max-len must be positive");
  if (!(c.data.holdout_ratio > 0.0 && c.data.holdout_ratio < 1.0)) {
    throw ConfigError("holdout ratio must lie in (0, 1)");
  }
  if (c.precision != "f32" && c.precision != "f64") throw ConfigError("precision must be f32 or f64");
  if (c.two_phase_epochs >= 0 &&
      (c.train.mode == Mode::kLocalOnly || c.train.mode == Mode::kFedAvg)) {
    throw ConfigError("the two-phase schedule needs a mode with global experts");
  }
}

data::ScenarioSpec load_run_scenario(const RunConfig& c) {
  data::ScenarioSpec scenario =
      c.scenario.empty() ? data::generate_synthetic(c.synthetic_spec, c.data)
                         : data::load_scenario(c.scenario, c.data, c.train.seed);
  scenario.seed = c.train.seed;
  data::validate_scenario(scenario);
  // Fail before training on anything the mode cannot resolve.
  federation::resolve_sources(scenario, c.train);
  return scenario;
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Federated mixture-of-experts sequential recommendation"};
  app.require_subcommand(1);

  // Run options live on the top-level app so one --config file serves
  // every subcommand; subcommands fall through to them.
  RunConfig cfg;
  add_run_options(app, cfg);

  auto* train = app.add_subcommand("train", "Run one federation and write its outputs");
  auto* evaluate = app.add_subcommand("eval", "Evaluate saved client states");
  std::string checkpoints, split = "test";
  evaluate->add_option("--checkpoints", checkpoints, "Directory of <domain>.state files");
  evaluate->add_option("--split", split)->check(CLI::IsMember({"valid", "test"}));

  auto* generate = app.add_subcommand("generate-data", "Write a synthetic scenario");

  auto* ablate = app.add_subcommand("ablate", "Run model variants against the full model");
  std::vector<std::string> grid{"local", "gate", "freeze"};
  std::vector<std::size_t> pretrain_grid{0, 3, 14};
  ablate->add_option("--grid", grid, "local, gate, freeze, fedavg, drop, two_phase")
      ->delimiter(',');
  ablate->add_option("--pretrain-grid", pretrain_grid, "Pretraining epochs for two_phase")
      ->delimiter(',');

  auto* inspect = app.add_subcommand("inspect-checkpoint", "List a checkpoint's parameters");
  std::string ckpt_path;
  inspect->add_option("path", ckpt_path)->required();
  for (auto* sub : {train, evaluate, generate, ablate, inspect}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(app, cfg);
    if (*evaluate) return cmd_eval(app, cfg, checkpoints, split);
    if (*generate) return cmd_generate(app, cfg);
    if (*ablate) return cmd_ablate(app, cfg, grid, pretrain_grid);
    if (*inspect) return cmd_inspect(ckpt_path);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace fmoe::cli
