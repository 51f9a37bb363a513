// ushl: generate synthetic corpora, train, score, evaluate and ablate.
//
// Exit codes: 0 success, 1 gradcheck did not pass, 2 usage or config error,
// 3 I/O or corpus error, 4 numeric fault, 5 internal error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "run_manifest.hpp"
#include "ushl/errors.hpp"
#include "ushl/experiment.hpp"
#include "ushl/feature_io.hpp"
#include "ushl/synth.hpp"
#include "ushl/trainer.hpp"

namespace fs = std::filesystem;
using namespace ushl;
using ushl::cli::RunManifest;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3, kNumeric = 4, kInternal = 5 };

struct Common {
  std::string config;
  std::string manifest;
  std::size_t workers = 1;
};

// Flags that may override the config file. Unset flags leave it alone.
struct Overrides {
  std::optional<std::size_t> users, test_users, concepts, per_user, clips;
  std::optional<double> noise;
  std::optional<std::uint64_t> seed, init_seed;
  std::optional<std::size_t> epochs, batch_size, max_clips;
  std::optional<double> lr;
  bool early_stopping = false;
};

struct Paths {
  std::string out, corpus, checkpoint, split = "test";
  std::optional<std::size_t> infer_clips;
  std::string attention = "learned";
  std::string axis, values;
};

RunConfig resolve_config(const Common& common, const Overrides& o) {
  RunConfig cfg = benchmark_config();
  if (!common.config.empty()) cfg = load_run_config(common.config, cfg);
  if (o.users) cfg.synth.train_users = *o.users;
  if (o.test_users) cfg.synth.test_users = *o.test_users;
  if (o.concepts) cfg.synth.concepts = *o.concepts;
  if (o.per_user) cfg.synth.per_user = *o.per_user;
  if (o.clips) cfg.synth.clips = *o.clips;
  if (o.noise) cfg.synth.noise = *o.noise;
  if (o.seed) cfg.synth.seed = cfg.train.seed = *o.seed;
  if (o.init_seed) cfg.init_seed = *o.init_seed;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.lr) cfg.train.lr = *o.lr;
  if (o.max_clips) cfg.engine.max_clips = *o.max_clips;
  if (o.early_stopping) cfg.train.early_stopping = true;
  cfg.train.workers = common.workers;
  cfg.validate();
  return cfg;
}

std::vector<UserSample> load_split(const fs::path& corpus, const std::string& split) {
  const fs::path dir = corpus / split;
  if (!fs::is_directory(dir)) throw MissingFileError("corpus split not found: " + dir.string());
  auto users = load_corpus(dir);
  if (users.empty()) throw FormatError("no users under " + dir.string());
  return users;
}

AttentionMode parse_attention(const std::string& s) {
  if (s == "learned") return AttentionMode::kLearned;
  if (s == "uniform") return AttentionMode::kUniform;
  throw ConfigError("--attention must be learned or uniform, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError("--values is empty");
  return out;
}

void print_epoch(const EpochRecord& r) {
  std::fprintf(stderr, "epoch %4zu  lr %.3g  loss %.4f  label %.4f  margin %.4f  sparsity %.3f", r.epoch, r.lr,
               r.train.total, r.train.label, r.train.margin, r.train.sparsity_surrogate);
  if (r.validation) std::fprintf(stderr, "  val %.4f", *r.validation);
  std::fputc('\n', stderr);
}

// Commands --------------------------------------------------------------------

int cmd_synth(const Common& c, const Overrides& o, const Paths& p, RunManifest& m) {
  const auto cfg = resolve_config(c, o);
  m.set_config(cfg.synth);
  m.set_seed(cfg.synth.seed);
  m.add_output("corpus", p.out);
  generate_corpus(cfg.synth, p.out, c.workers);
  std::cout << "wrote " << cfg.synth.train_users << " train and " << cfg.synth.test_users << " test users to "
            << p.out << '\n';
  return kOk;
}

int cmd_train(const Common& c, const Overrides& o, const Paths& p, RunManifest& m) {
  auto cfg = resolve_config(c, o);
  m.add_input("corpus", p.corpus);
  m.add_output("checkpoint", p.out);
  const auto users = load_split(p.corpus, "train");
  cfg.engine = fit_engine(users, cfg.engine);
  cfg.validate();
  m.set_config(cfg);
  m.set_seed(cfg.train.seed);

  const auto result = train_model(users, cfg, print_epoch);
  CheckpointInfo info;
  info.epoch = result.history.size();
  info.seed = cfg.train.seed;
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : result.history) {
    history.push_back({{"epoch", r.epoch},
                       {"lr", r.lr},
                       {"total", r.train.total},
                       {"label", r.train.label},
                       {"margin", r.train.margin},
                       {"sparsity", r.train.sparsity},
                       {"sparsity_surrogate", r.train.sparsity_surrogate}});
    if (r.validation) history.back()["validation"] = *r.validation;
  }
  info.extra = {{"run_config", cfg}, {"history", history}, {"best_epoch", result.best_epoch}};
  save_checkpoint(p.out, result.params, info);
  m.set_checkpoint_hash(p.out);
  m.extra()["epochs_run"] = result.history.size();
  if (!result.history.empty()) m.extra()["final_loss"] = result.history.back().train.total;
  std::cout << "checkpoint " << p.out << " (" << result.history.size() << " epochs)\n";
  return kOk;
}

struct Loaded {
  ModelParams<float> params;
  RunConfig cfg;
  std::vector<UserSample> users;
  std::size_t clips = 0;
  AttentionMode mode = AttentionMode::kLearned;
};

Loaded load_for_scoring(const Common& c, const Overrides& o, const Paths& p, RunManifest& m) {
  Loaded l;
  CheckpointInfo info;
  l.params = load_checkpoint(p.checkpoint, &info);
  l.cfg = resolve_config(c, o);
  if (c.config.empty() && info.extra.contains("run_config")) {
    l.cfg = info.extra["run_config"].get<RunConfig>();
  }
  l.cfg.engine = l.params.config;
  l.users = load_split(p.corpus, p.split);
  l.clips = p.infer_clips.value_or(l.params.config.max_clips);
  l.mode = parse_attention(p.attention);
  m.add_input("checkpoint", p.checkpoint);
  m.add_input("corpus", p.corpus);
  m.set_checkpoint_hash(p.checkpoint);
  m.set_config(l.cfg);
  m.set_seed(info.seed);
  m.extra()["split"] = p.split;
  m.extra()["clips"] = l.clips;
  m.extra()["attention"] = p.attention;
  return l;
}

int cmd_infer(const Common& c, const Overrides& o, const Paths& p, RunManifest& m) {
  const auto l = load_for_scoring(c, o, p, m);
  const auto tracks = score_users(l.users, l.params, l.clips, l.mode, c.workers);
  std::size_t fallback_users = 0;
  for (const auto& t : tracks) fallback_users += t.fallback ? 1 : 0;
  m.extra()["fallback"] = l.clips == 0;
  m.extra()["fallback_users"] = fallback_users;
  m.add_output("scores", p.out);

  std::ofstream os(p.out);
  if (!os) throw LoadError("cannot write " + p.out);
  os << "user_id\tframe\tscore\tlabel\n";
  os << std::setprecision(9);
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const auto& t = tracks[i];
    const auto& y = l.users[i].labels.y;
    for (std::size_t j = 0; j < t.s.size(); ++j) {
      if (!t.mask[j]) continue;
      os << t.user_id << '\t' << j << '\t' << t.s[j] << '\t';
      if (j < y.size()) {
        os << int(y[j]);
      } else {
        os << '-';
      }
      os << '\n';
    }
  }
  std::cout << "scored " << tracks.size() << " users (" << fallback_users << " via fallback) -> " << p.out << '\n';
  return kOk;
}

int cmd_eval(const Common& c, const Overrides& o, const Paths& p, RunManifest& m) {
  const auto l = load_for_scoring(c, o, p, m);
  const auto report = evaluate_model(l.users, l.params, l.clips, l.mode, l.cfg.eval, c.workers);
  if (!p.out.empty()) {
    std::ofstream os(p.out);
    if (!os) throw LoadError("cannot write " + p.out);
    write_report_jsonl(os, report);
    m.add_output("report", p.out);
  }
  write_report_table(std::cout, report);
  m.extra()["map"] = report.map;
  m.extra()["mean_nmsd"] = report.mean_nmsd;
  m.extra()["mean_f_score"] = report.mean_f_score;
  m.extra()["excluded"] = report.excluded;
  return kOk;
}

int cmd_ablate(const Common& c, const Overrides& o, const Paths& p, RunManifest& m) {
  auto cfg = resolve_config(c, o);
  const auto axis = parse_axis(p.axis);
  const auto values = split_list(p.values);
  for (const auto& v : values) check_ablation_value(axis, v);
  m.add_input("corpus", p.corpus);
  const auto train_users = load_split(p.corpus, "train");
  const auto test_users = load_split(p.corpus, p.split);
  cfg.engine = fit_engine(train_users, cfg.engine);
  cfg.validate();
  m.set_config(cfg);
  m.set_seed(cfg.train.seed);

  const auto rows = run_ablation(cfg, axis, values, train_users, test_users, c.workers, print_epoch);
  std::ostringstream table;
  table << axis_name(axis) << "\tmAP\tnMSD\tF\n" << std::fixed << std::setprecision(4);
  nlohmann::json jrows = nlohmann::json::array();
  for (const auto& r : rows) {
    table << r.value << '\t' << r.report.map << '\t' << r.report.mean_nmsd << '\t' << r.report.mean_f_score << '\n';
    jrows.push_back({{"value", r.value}, {"map", r.report.map}, {"mean_nmsd", r.report.mean_nmsd},
                     {"mean_f_score", r.report.mean_f_score}});
  }
  std::cout << table.str();
  if (!p.out.empty()) {
    std::ofstream os(p.out);
    if (!os) throw LoadError("cannot write " + p.out);
    os << table.str();
    m.add_output("table", p.out);
  }
  m.extra()["axis"] = axis_name(axis);
  m.extra()["rows"] = jrows;
  return kOk;
}

int cmd_gradcheck(const Common&, const Overrides& o, const Paths& p, RunManifest& m) {
  const std::uint64_t seed = o.seed.value_or(1);
  m.set_seed(seed);
  m.set_config(micro_engine());
  const auto report = end_to_end_gradcheck(seed);
  nlohmann::json params = nlohmann::json::array();
  for (const auto& pc : report.params) {
    params.push_back({{"name", pc.name}, {"max_rel_error", pc.max_rel_error}, {"checked", pc.checked},
                      {"excluded", pc.excluded}});
  }
  const nlohmann::json doc = {{"passed", report.passed},
                              {"max_rel_error", report.max_rel_error},
                              {"checked", report.checked},
                              {"excluded", report.excluded},
                              {"params", params}};
  if (!p.out.empty()) {
    std::ofstream os(p.out);
    if (!os) throw LoadError("cannot write " + p.out);
    os << doc.dump(2) << '\n';
    m.add_output("report", p.out);
  }
  m.extra()["passed"] = report.passed;
  m.extra()["max_rel_error"] = report.max_rel_error;
  std::cout << (report.passed ? "passed" : "FAILED") << ": max relative error " << std::scientific
            << report.max_rel_error << " over " << report.checked << " elements (" << report.excluded
            << " near kinks excluded)\n";
  return report.passed ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"User-specific video highlight detection"};
  app.require_subcommand(1);
  Common common;
  Overrides over;
  Paths paths;
  app.add_option("--config", common.config, "JSON run configuration; flags override it")->check(CLI::ExistingFile);
  app.add_option("--manifest", common.manifest, "Where to write the run manifest");
  app.add_option("--workers", common.workers, "Worker threads")->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic train/test corpus");
  synth->add_option("--out", paths.out, "Output corpus directory")->required();
  synth->add_option("--users", over.users, "Training users");
  synth->add_option("--test-users", over.test_users, "Test users");
  synth->add_option("--concepts", over.concepts, "Concept count");
  synth->add_option("--per-user", over.per_user, "Preferred concepts per user");
  synth->add_option("--clips", over.clips, "Preferred clips per user");
  synth->add_option("--noise", over.noise, "Feature noise sigma");
  synth->add_option("--seed", over.seed, "Generator seed");

  auto* train = app.add_subcommand("train", "Train on a corpus and write a checkpoint");
  train->add_option("--corpus", paths.corpus, "Corpus directory")->required();
  train->add_option("--out", paths.out, "Checkpoint directory")->required();
  train->add_option("--epochs", over.epochs);
  train->add_option("--lr", over.lr);
  train->add_option("--batch-size", over.batch_size);
  train->add_option("--max-clips", over.max_clips, "Preferred clips used per user");
  train->add_option("--seed", over.seed, "Shuffling seed");
  train->add_option("--init-seed", over.init_seed, "Parameter initialisation seed");
  train->add_flag("--early-stopping", over.early_stopping, "Stop when the validation loss stalls");

  auto scoring = [&](CLI::App* sub, bool out_required) {
    sub->add_option("--checkpoint", paths.checkpoint, "Checkpoint directory")->required();
    sub->add_option("--corpus", paths.corpus, "Corpus directory")->required();
    sub->add_option("--split", paths.split, "Corpus split")->capture_default_str();
    sub->add_option("--clips", paths.infer_clips, "Use at most this many preferred clips; 0 forces the fallback");
    sub->add_option("--attention", paths.attention, "learned or uniform")->capture_default_str();
    auto* out = sub->add_option("--out", paths.out, "Output file");
    if (out_required) out->required();
  };
  auto* infer = app.add_subcommand("infer", "Write per-frame scores (user_id, frame, score, label)");
  scoring(infer, true);
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (mAP, nMSD, F-score)");
  scoring(eval, false);

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate an ablation grid");
  ablate->add_option("--corpus", paths.corpus, "Corpus directory")->required();
  ablate->add_option("--axis", paths.axis, "clips, backbone, loss or attention")->required();
  ablate->add_option("--values", paths.values, "Comma-separated values")->required();
  ablate->add_option("--split", paths.split, "Evaluation split")->capture_default_str();
  ablate->add_option("--out", paths.out, "Table output (TSV)");
  ablate->add_option("--epochs", over.epochs);
  ablate->add_option("--lr", over.lr);
  ablate->add_option("--batch-size", over.batch_size);
  ablate->add_option("--seed", over.seed);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full objective");
  gradcheck->add_option("--seed", over.seed, "Seed of the random user and parameters");
  gradcheck->add_option("--out", paths.out, "JSON report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  RunManifest manifest(command, std::vector<std::string>(argv, argv + argc));
  fs::path manifest_path = common.manifest;
  if (manifest_path.empty()) {
    const fs::path out = paths.out.empty() ? fs::path("ushl-" + command) : fs::path(paths.out);
    manifest_path = out.string() + ".manifest.json";
  }

  int code = kOk;
  std::string error;
  try {
    if (command == "synth") code = cmd_synth(common, over, paths, manifest);
    if (command == "train") code = cmd_train(common, over, paths, manifest);
    if (command == "infer") code = cmd_infer(common, over, paths, manifest);
    if (command == "eval") code = cmd_eval(common, over, paths, manifest);
    if (command == "ablate") code = cmd_ablate(common, over, paths, manifest);
    if (command == "gradcheck") code = cmd_gradcheck(common, over, paths, manifest);
  } catch (const ConfigError& e) {
    code = kUsage;
    error = e.what();
  } catch (const LoadError& e) {
    code = kIo;
    error = e.what();
  } catch (const fs::filesystem_error& e) {
    code = kIo;
    error = e.what();
  } catch (const NumericFault& e) {
    code = kNumeric;
    error = e.what();
  } catch (const std::exception& e) {
    code = kInternal;
    error = e.what();
  }
  if (!error.empty()) std::cerr << "ushl " << command << ": " << error << '\n';

  try {
    manifest.write(manifest_path, code, error);
  } catch (const std::exception& e) {
    std::cerr << "ushl: " << e.what() << '\n';
    if (code == kOk) code = kIo;
  }
  return code;
}
