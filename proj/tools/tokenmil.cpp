// tokenmil: command-line front end for the detector pipeline.
//
//   tokenmil synth --spec spec.json --out ds/
//   tokenmil train --data ds/ --out run/
//   tokenmil eval  --data ds/ --ckpt run/model.ckpt
//
// Exit codes: 0 ok, 1 usage, 2 data/validation, 3 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tokenmil/dataset.hpp"
#include "tokenmil/detector.hpp"
#include "tokenmil/errors.hpp"
#include "tokenmil/evaluation.hpp"
#include "tokenmil/gradcheck.hpp"
#include "tokenmil/harness.hpp"
#include "tokenmil/synthetic.hpp"
#include "tokenmil/training.hpp"

namespace fs = std::filesystem;
using namespace tokenmil;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitRuntime = 3;

// Usage problems found after CLI11 parsing (missing combos etc.).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw DataError("invalid JSON in " + path.string() + ": " + ex.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void emit(const std::optional<fs::path>& out, const nlohmann::json& j) {
  if (out) write_text(*out, j.dump(2) + "\n");
  else std::cout << j.dump(2) << '\n';
}

// Training knobs shared by several subcommands. Everything is optional so that
// a --config file supplies the base and explicit flags win.
struct TrainFlags {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> policy;
  std::optional<double> rk;
  std::optional<double> lambda;
  std::optional<std::string> uncertainty;
  bool no_smoothness = false;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> hidden_dim;
  std::optional<std::size_t> layers;
  std::optional<std::size_t> batch_bags;
  std::optional<double> learning_rate;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON training config; flags override it")->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "root seed");
    cmd->add_option("--policy", policy, "selection policy")
        ->check(CLI::IsMember({"adaptive", "first", "last", "before-last"}));
    cmd->add_option("--rk", rk, "top-k ratio for adaptive selection");
    cmd->add_option("--lambda", lambda, "uncertainty augmentation weight");
    cmd->add_option("--uncertainty", uncertainty, "augmentation mode")
        ->check(CLI::IsMember({"none", "token", "perplexity", "consistency"}));
    cmd->add_flag("--no-smoothness", no_smoothness, "drop the adjacent-score smoothness term");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--hidden-dim", hidden_dim, "hidden width");
    cmd->add_option("--layers", layers, "linear layers in the detector");
    cmd->add_option("--batch-bags", batch_bags, "bags per step");
    cmd->add_option("--lr", learning_rate, "Adam learning rate");
  }

  TrainConfig resolve(TrainConfig base = {}) const {
    if (config) base = train_config_from_json(read_json_file(*config), base);
    if (seed) base.seed = *seed;
    if (policy) base.selection.kind = parse_selection_kind(*policy);
    if (rk) base.selection.r_k = *rk;
    if (lambda) base.augmentation.lambda = *lambda;
    if (uncertainty) base.augmentation.mode = parse_augmentation_mode(*uncertainty);
    if (no_smoothness) base.smoothness_enabled = false;
    if (epochs) base.epochs = *epochs;
    if (hidden_dim) base.hidden_dim = *hidden_dim;
    if (layers) base.layer_count = *layers;
    if (batch_bags) base.batch_bags = *batch_bags;
    if (learning_rate) base.adam.learning_rate = *learning_rate;
    validate(base);
    return base;
  }
};

std::optional<Split> parse_split_arg(const std::string& s) {
  if (s == "all") return std::nullopt;
  return parse_split(s);
}

// ---- subcommands ------------------------------------------------------------

struct SynthArgs {
  std::optional<fs::path> spec;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::size_t domains = 1;
  double shift = 0.5;
};

int run_synth(const SynthArgs& a) {
  SyntheticSpec spec = a.spec ? synthetic_spec_from_json(read_json_file(*a.spec)) : SyntheticSpec{};
  if (a.seed) spec.seed = *a.seed;
  if (a.domains <= 1) {
    const auto ds = generate(spec);
    write_dataset(ds, a.out);
    write_text(a.out / "spec.json", to_json(spec).dump(2) + "\n");
    std::cerr << "wrote " << ds.bags.size() << " bags to " << a.out << '\n';
    return 0;
  }
  const auto family = generate_family(spec, a.domains, a.shift);
  for (const auto& ds : family) {
    write_dataset(ds, a.out / ds.manifest.dataset_id);
    std::cerr << "wrote " << ds.bags.size() << " bags to " << (a.out / ds.manifest.dataset_id) << '\n';
  }
  auto j = to_json(spec);
  j["domains"] = a.domains;
  j["shift_scale"] = a.shift;
  write_text(a.out / "spec.json", j.dump(2) + "\n");
  return 0;
}

struct SplitArgs {
  fs::path data;
  std::optional<fs::path> out;
  double train = 0.6;
  double validation = 0.2;
  std::uint64_t seed = 0;
};

int run_split(const SplitArgs& a) {
  auto ds = read_dataset(a.data);
  ds.manifest = split_dataset(ds.manifest, a.train, a.validation, substream_seed(a.seed, "split"));
  const fs::path out = a.out.value_or(a.data);
  if (out == a.data) {
    // Same directory: stage a full write, then swap in just the manifest.
    write_dataset(ds, out / ".split_staging");
    fs::rename(out / ".split_staging" / kManifestFile, out / kManifestFile);
    fs::remove_all(out / ".split_staging");
  } else {
    write_dataset(ds, out);
  }
  nlohmann::json counts;
  for (auto s : {Split::train, Split::validation, Split::test}) counts[std::string(to_string(s))] = ds.manifest.count(s);
  std::cout << counts.dump() << '\n';
  return 0;
}

struct TrainArgs {
  fs::path data;
  fs::path out;
  TrainFlags flags;
};

int run_train(const TrainArgs& a) {
  const auto config = a.flags.resolve();
  const auto ds = read_dataset(a.data);
  const auto result = train(ds, config);
  fs::create_directories(a.out);
  save_checkpoint(result.params, a.out / "model.ckpt");
  std::ostringstream steps;
  for (const auto& s : result.steps) steps << to_json(s).dump() << '\n';
  write_text(a.out / "steps.jsonl", steps.str());
  auto cfg = to_json(config);
  cfg["dataset_id"] = ds.manifest.dataset_id;
  cfg["input_dim"] = ds.manifest.dim;
  write_text(a.out / "config.json", cfg.dump(2) + "\n");
  const auto losses = result.epoch_losses();
  std::cerr << "trained " << result.steps.size() << " steps; final epoch loss " << losses.back() << '\n';
  return 0;
}

// A checkpoint's sibling config.json, when present, supplies policy and augmentation.
TrainConfig config_near_checkpoint(const fs::path& ckpt) {
  const auto sibling = ckpt.parent_path() / "config.json";
  if (fs::exists(sibling)) return train_config_from_json(read_json_file(sibling));
  return {};
}

struct EvalArgs {
  fs::path data;
  std::optional<fs::path> ckpt;
  std::string split = "test";
  std::string method = "detector";
  std::optional<fs::path> out;
  std::optional<fs::path> roc;
  bool selections = false;
  TrainFlags flags;
};

int run_eval(const EvalArgs& a) {
  const auto ds = read_dataset(a.data);
  const auto split = parse_split_arg(a.split);
  EvalReport report;
  if (a.method == "perplexity") {
    report = perplexity_baseline(ds, split);
  } else {
    if (!a.ckpt) throw UsageError("eval: --ckpt is required for the detector method");
    const auto config = a.flags.resolve(config_near_checkpoint(*a.ckpt));
    const auto params = load_checkpoint(*a.ckpt, ds.manifest.dim);
    report = evaluate(params, ds, split, config.selection, config.augmentation);
  }
  if (a.roc) {
    std::ostringstream csv;
    csv.precision(17);
    csv << "threshold,fpr,tpr\n";
    for (const auto& p : roc_curve(report.scored())) csv << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
    write_text(*a.roc, csv.str());
  }
  emit(a.out, to_json(report, a.selections));
  return 0;
}

struct MultiArgs {
  std::vector<fs::path> data;
  std::optional<fs::path> out;
  TrainFlags flags;
};

int run_cross_eval(const MultiArgs& a) {
  if (a.data.size() < 2) throw UsageError("cross-eval: pass --data at least twice");
  const auto config = a.flags.resolve();
  std::vector<Dataset> sets;
  for (const auto& d : a.data) sets.push_back(read_dataset(d));
  const auto m = cross_eval(sets, config);
  if (a.out) {
    write_text(*a.out / "cross_eval.csv", to_csv(m));
    write_text(*a.out / "cross_eval.json", to_json(m).dump(2) + "\n");
  } else {
    std::cout << to_csv(m);
  }
  return 0;
}

int run_select_layer(const MultiArgs& a) {
  if (a.data.empty()) throw UsageError("select-layer: pass --data once per candidate layer");
  const auto config = a.flags.resolve();
  std::vector<Dataset> sets;
  for (const auto& d : a.data) sets.push_back(read_dataset(d));
  const auto sel = select_layer(sets, config);
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : sel.candidates) {
    nlohmann::json item = {{"layer_index", c.layer_index}};
    item["validation_auroc"] = c.validation_auroc ? nlohmann::json(*c.validation_auroc) : nlohmann::json(nullptr);
    if (!c.skipped_reason.empty()) item["skipped"] = c.skipped_reason;
    cands.push_back(std::move(item));
  }
  emit(a.out ? std::optional<fs::path>(*a.out / "layer_selection.json") : std::nullopt,
       {{"layer_index", sel.layer_index}, {"candidates", std::move(cands)}});
  return 0;
}

struct ScoreArgs {
  fs::path data;
  fs::path ckpt;
  std::vector<std::string> bags;
  std::optional<fs::path> out;
  TrainFlags flags;
};

// Token-level scores, one JSON object per bag per line.
int run_score(const ScoreArgs& a) {
  const auto config = a.flags.resolve(config_near_checkpoint(a.ckpt));
  auto reader = DatasetReader::open(a.data);
  const auto params = load_checkpoint(a.ckpt, reader.manifest().dim);
  std::vector<std::string> ids = a.bags;
  if (ids.empty())
    for (const auto& e : reader.manifest().bags) ids.push_back(e.bag_id);
  std::ostringstream lines;
  for (const auto& id : ids) {
    const auto bag = reader.bag(id);
    const auto it = reader.manifest().annotations.find(id);
    const auto* ann = it == reader.manifest().annotations.end() ? nullptr : &it->second;
    const auto s = score_bag(params, bag, ann, config.selection, config.augmentation);
    lines << nlohmann::json{{"bag_id", id}, {"score", s.score}, {"token_scores", s.token_scores}, {"selected", s.selected}}
                 .dump()
          << '\n';
  }
  if (a.out) write_text(*a.out, lines.str());
  else std::cout << lines.str();
  return 0;
}

struct GradcheckArgs {
  std::size_t configs = 50;
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-3;
  bool no_smoothness = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  const auto r = objective_gradcheck(a.configs, a.seed, a.step, !a.no_smoothness);
  std::cout << nlohmann::json{{"configurations", r.configurations},
                              {"parameters_checked", r.parameters_checked},
                              {"max_relative_error", r.max_relative_error},
                              {"median_relative_error", r.median_relative_error}}
                   .dump()
            << '\n';
  return r.max_relative_error < a.tolerance ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-level hallucination detector trained with top-k multiple-instance learning"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "generate a planted-signal dataset");
  c_synth->add_option("--spec", synth.spec, "synthetic spec JSON")->check(CLI::ExistingFile);
  c_synth->add_option("--out", synth.out, "output dataset directory")->required();
  c_synth->add_option("--seed", synth.seed, "overrides the spec seed");
  c_synth->add_option("--domains", synth.domains, "generate a family of shifted domains");
  c_synth->add_option("--shift", synth.shift, "per-domain mean shift norm");

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "reassign train/validation/test splits");
  c_split->add_option("--data", split.data)->required()->check(CLI::ExistingDirectory);
  c_split->add_option("--out", split.out, "defaults to rewriting --data in place");
  c_split->add_option("--train", split.train);
  c_split->add_option("--validation", split.validation);
  c_split->add_option("--seed", split.seed);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a detector");
  c_train->add_option("--data", tr.data)->required()->check(CLI::ExistingDirectory);
  c_train->add_option("--out", tr.out, "run directory")->required();
  tr.flags.attach(c_train);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "score a split and report AUROC");
  c_eval->add_option("--data", ev.data)->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--ckpt", ev.ckpt)->check(CLI::ExistingFile);
  c_eval->add_option("--split", ev.split)->check(CLI::IsMember({"train", "validation", "test", "all"}));
  c_eval->add_option("--method", ev.method)->check(CLI::IsMember({"detector", "perplexity"}));
  c_eval->add_option("--out", ev.out, "report path (stdout when omitted)");
  c_eval->add_option("--roc", ev.roc, "write ROC points as CSV");
  c_eval->add_flag("--selections", ev.selections, "include selected token indices per bag");
  ev.flags.attach(c_eval);

  MultiArgs cross;
  auto* c_cross = app.add_subcommand("cross-eval", "train on each dataset, evaluate on all");
  c_cross->add_option("--data", cross.data)->required()->check(CLI::ExistingDirectory);
  c_cross->add_option("--out", cross.out, "directory for cross_eval.csv/json");
  cross.flags.attach(c_cross);

  MultiArgs layer;
  auto* c_layer = app.add_subcommand("select-layer", "pick the layer with the best validation AUROC");
  c_layer->add_option("--data", layer.data)->required()->check(CLI::ExistingDirectory);
  c_layer->add_option("--out", layer.out, "directory for layer_selection.json");
  layer.flags.attach(c_layer);

  ScoreArgs score;
  auto* c_score = app.add_subcommand("score", "token-level scores as JSON lines");
  c_score->add_option("--data", score.data)->required()->check(CLI::ExistingDirectory);
  c_score->add_option("--ckpt", score.ckpt)->required()->check(CLI::ExistingFile);
  c_score->add_option("--bag", score.bags, "restrict to these bag ids");
  c_score->add_option("--out", score.out);
  score.flags.attach(c_score);

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of the training gradients");
  c_gc->add_option("--configs", gc.configs);
  c_gc->add_option("--seed", gc.seed);
  c_gc->add_option("--step", gc.step);
  c_gc->add_option("--tolerance", gc.tolerance);
  c_gc->add_flag("--no-smoothness", gc.no_smoothness);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*c_synth) return run_synth(synth);
    if (*c_split) return run_split(split);
    if (*c_train) return run_train(tr);
    if (*c_eval) return run_eval(ev);
    if (*c_cross) return run_cross_eval(cross);
    if (*c_layer) return run_select_layer(layer);
    if (*c_score) return run_score(score);
    if (*c_gc) return run_gradcheck(gc);
  } catch (const UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const DataError& ex) {
    std::cerr << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const DomainError& ex) {
    std::cerr << "data error: " << ex.what() << '\n';
    return kExitData;
  } catch (const DivergenceError& ex) {
    std::cerr << "training diverged: " << ex.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
