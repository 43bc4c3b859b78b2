// Command-line front end: gen | train | infer | eval | diagnose.
// Exit codes are a scripting contract: 0 success, 2 usage or input error,
// 3 runtime failure.
#include <algorithm>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cmert/eval.hpp"
#include "cmert/inference.hpp"
#include "cmert/io.hpp"
#include "cmert/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kArtifactVersion = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// Thrown by the loading/validation phase of a subcommand; anything thrown
// after inputs are resolved counts as a runtime failure instead.
int usage_error(const std::string& cmd, const std::exception& e) {
  std::cerr << "cmert " << cmd << ": " << e.what() << "\n";
  return kExitUsage;
}

int runtime_error_exit(const std::string& cmd, const std::exception& e) {
  std::cerr << "cmert " << cmd << ": " << e.what() << "\n";
  return kExitRuntime;
}

std::string utc_now() {
  std::time_t now = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return buf;
}

// One manifest per output directory. The hash covers the resolved
// configuration (seed excluded): equal hash + equal seed must mean
// bit-identical outputs.
void write_manifest(const fs::path& out_dir, const std::string& command,
                    const std::string& config_text, uint64_t seed,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["artifact_version"] = kArtifactVersion;
  j["command"] = command;
  j["config_hash"] = cmert::fnv1a64_hex(config_text);
  j["seed"] = seed;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["created_utc"] = utc_now();
  fs::path path = out_dir / "manifest.json";
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

struct RunSettings {
  cmert::PartitionConfig partition;
  cmert::ModelConfig model;
  cmert::TrainConfig train;
};

nlohmann::json settings_json(const RunSettings& s) {
  nlohmann::json j;
  j["partition"] = {{"long_frames", s.partition.long_frames},
                    {"short_frames", s.partition.short_frames},
                    {"antic_frames", s.partition.antic_frames},
                    {"near_past_frames", s.partition.near_past_frames},
                    {"future_frames", s.partition.future_frames},
                    {"fps", s.partition.fps},
                    {"feat_dim", s.partition.feat_dim},
                    {"num_actions", s.partition.num_actions},
                    {"delta", s.partition.delta},
                    {"long_subsample", s.partition.long_subsample},
                    {"distant_future", s.partition.distant_future}};
  j["model"] = {{"d_model", s.model.d_model},
                {"heads", s.model.heads},
                {"q_l0", s.model.q_l0},
                {"q_l1", s.model.q_l1},
                {"leaky_anticipation", s.model.leaky_anticipation},
                {"use_refinement", s.model.use_refinement}};
  j["train"] = {{"lambda1", s.train.lambda1},
                {"lambda2", s.train.lambda2},
                {"lr", s.train.lr},
                {"weight_decay", s.train.weight_decay},
                {"batch_size", s.train.batch_size},
                {"total_steps", s.train.total_steps},
                {"warmup_steps", s.train.warmup_steps},
                {"epochs", s.train.epochs},
                {"warmup_epochs", s.train.warmup_epochs},
                {"event_sampling", s.train.event_sampling},
                {"event_anchors", s.train.event_anchors}};
  return j;
}

// Strict field-by-field overlay: every key must name a known setting, so a
// typo fails loudly instead of silently training with defaults.
void apply_config(RunSettings& s, const nlohmann::json& j) {
  for (auto sec = j.begin(); sec != j.end(); ++sec) {
    const std::string& section = sec.key();
    if (section != "partition" && section != "model" && section != "train")
      throw std::invalid_argument("config: unknown section '" + section + "'");
    for (auto it = sec.value().begin(); it != sec.value().end(); ++it) {
      const std::string key = section + "." + it.key();
      const nlohmann::json& v = it.value();
      if (key == "partition.long_frames") s.partition.long_frames = v.get<int>();
      else if (key == "partition.short_frames") s.partition.short_frames = v.get<int>();
      else if (key == "partition.antic_frames") s.partition.antic_frames = v.get<int>();
      else if (key == "partition.near_past_frames") s.partition.near_past_frames = v.get<int>();
      else if (key == "partition.future_frames") s.partition.future_frames = v.get<int>();
      else if (key == "partition.fps") s.partition.fps = v.get<double>();
      else if (key == "partition.feat_dim") s.partition.feat_dim = v.get<int>();
      else if (key == "partition.num_actions") s.partition.num_actions = v.get<int>();
      else if (key == "partition.delta") s.partition.delta = v.get<int>();
      else if (key == "partition.long_subsample") s.partition.long_subsample = v.get<int>();
      else if (key == "partition.distant_future") s.partition.distant_future = v.get<bool>();
      else if (key == "model.d_model") s.model.d_model = v.get<int>();
      else if (key == "model.heads") s.model.heads = v.get<int>();
      else if (key == "model.q_l0") s.model.q_l0 = v.get<int>();
      else if (key == "model.q_l1") s.model.q_l1 = v.get<int>();
      else if (key == "model.leaky_anticipation") s.model.leaky_anticipation = v.get<bool>();
      else if (key == "model.use_refinement") s.model.use_refinement = v.get<bool>();
      else if (key == "train.lambda1") s.train.lambda1 = v.get<double>();
      else if (key == "train.lambda2") s.train.lambda2 = v.get<double>();
      else if (key == "train.lr") s.train.lr = v.get<double>();
      else if (key == "train.weight_decay") s.train.weight_decay = v.get<double>();
      else if (key == "train.batch_size") s.train.batch_size = v.get<int>();
      else if (key == "train.total_steps") s.train.total_steps = v.get<int>();
      else if (key == "train.warmup_steps") s.train.warmup_steps = v.get<int>();
      else if (key == "train.epochs") s.train.epochs = v.get<int>();
      else if (key == "train.warmup_epochs") s.train.warmup_epochs = v.get<double>();
      else if (key == "train.event_sampling") s.train.event_sampling = v.get<bool>();
      else if (key == "train.event_anchors") s.train.event_anchors = v.get<int>();
      else throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
}

RunSettings resolve_settings(const std::string& preset, const std::string& config_path) {
  RunSettings s;
  if (!preset.empty()) {
    s.partition = cmert::preset_partition(preset);
    s.model = cmert::preset_model(preset);
    s.train = cmert::preset_train(preset);
  }
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw std::invalid_argument("cannot open config " + config_path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw std::invalid_argument("config " + config_path + ": " + e.what());
    }
    apply_config(s, j);
  }
  return s;
}

// Grammar file: {"num_actions", "feat_dim", "noise", "prototype_seed",
// "long_range_rule"}; omitted fields keep the defaults below.
cmert::SyntheticGrammar load_grammar(const std::string& path, std::string& canonical) {
  int num_actions = 6, feat_dim = 16;
  double noise = 0.4;
  uint64_t prototype_seed = 7;
  bool rule = true, rule_given = false;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open grammar " + path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw std::invalid_argument("grammar " + path + ": " + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "num_actions") num_actions = it.value().get<int>();
      else if (it.key() == "feat_dim") feat_dim = it.value().get<int>();
      else if (it.key() == "noise") noise = it.value().get<double>();
      else if (it.key() == "prototype_seed") prototype_seed = it.value().get<uint64_t>();
      else if (it.key() == "long_range_rule") { rule = it.value().get<bool>(); rule_given = true; }
      else throw std::invalid_argument("grammar: unknown field '" + it.key() + "'");
    }
  }
  if (noise < 0.0) throw std::invalid_argument("grammar: noise must be >= 0, got " +
                                               std::to_string(noise));
  cmert::SyntheticGrammar g = cmert::default_grammar(num_actions, feat_dim, noise, prototype_seed);
  if (rule_given) g.long_range_rule = rule;
  g.validate();
  canonical = nlohmann::json{{"num_actions", num_actions},
                             {"feat_dim", feat_dim},
                             {"noise", noise},
                             {"prototype_seed", prototype_seed},
                             {"long_range_rule", g.long_range_rule}}
                  .dump();
  return g;
}

// Stream files are the "stream*.json" members of a directory, in name order.
std::vector<std::string> list_stream_files(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw std::invalid_argument("data directory " + dir + " does not exist");
  std::vector<std::string> files;
  for (const fs::directory_entry& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    if (name.rfind("stream", 0) == 0 && e.path().extension() == ".json")
      files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw std::invalid_argument("no stream files (stream*.json) in " + dir);
  return files;
}

std::vector<cmert::FeatureStream> load_streams(const std::vector<std::string>& files) {
  std::vector<cmert::FeatureStream> streams;
  streams.reserve(files.size());
  for (const std::string& f : files) streams.push_back(cmert::load_stream(f));
  for (size_t i = 1; i < streams.size(); ++i) {
    if (streams[i].features.cols() != streams[0].features.cols() ||
        streams[i].num_actions != streams[0].num_actions)
      throw std::invalid_argument(files[i] + " disagrees with " + files[0] +
                                  " on feature dim or class count");
  }
  return streams;
}

void check_stream_matches(const cmert::FeatureStream& s, const std::string& stream_name,
                          const cmert::PartitionConfig& cfg, const std::string& ckpt_name) {
  if (s.features.cols() != cfg.feat_dim)
    throw std::invalid_argument(stream_name + " has " + std::to_string(s.features.cols()) +
                                "-dim features, " + ckpt_name + " expects " +
                                std::to_string(cfg.feat_dim));
  if (s.num_actions != cfg.num_actions)
    throw std::invalid_argument(stream_name + " declares " + std::to_string(s.num_actions) +
                                " action classes, " + ckpt_name + " expects " +
                                std::to_string(cfg.num_actions));
}

struct GenArgs {
  std::string grammar_path, out_dir;
  int length = 256, count = 1;
  uint64_t seed = 1;
};

int run_gen(const GenArgs& a) {
  cmert::SyntheticGrammar g;
  std::string canonical;
  std::vector<std::string> inputs;
  try {
    g = load_grammar(a.grammar_path, canonical);
    if (!a.grammar_path.empty()) inputs.push_back(a.grammar_path);
  } catch (const std::exception& e) {
    return usage_error("gen", e);
  }
  try {
    fs::create_directories(a.out_dir);
    std::vector<std::string> outputs;
    for (int k = 0; k < a.count; ++k) {
      cmert::Rng rng(a.seed + static_cast<uint64_t>(k));
      cmert::FeatureStream s = cmert::generate_stream(g, a.length, rng);
      char name[32];
      std::snprintf(name, sizeof name, "stream_%03d.json", k);
      cmert::save_stream(s, (fs::path(a.out_dir) / name).string());
      outputs.push_back(name);
    }
    std::string config_text = "gen length=" + std::to_string(a.length) +
                              " count=" + std::to_string(a.count) + " grammar=" + canonical;
    write_manifest(a.out_dir, "gen", config_text, a.seed, inputs, outputs);
  } catch (const std::exception& e) {
    return runtime_error_exit("gen", e);
  }
  return 0;
}

struct TrainArgs {
  std::string data_dir, out_dir, config_path, preset;
  int steps = -1;
  long long seed = -1;
};

int run_train(const TrainArgs& a) {
  RunSettings s;
  std::vector<std::string> files;
  std::vector<cmert::FeatureStream> streams;
  try {
    s = resolve_settings(a.preset, a.config_path);
    if (a.steps >= 0) {
      s.train.total_steps = a.steps;
      s.train.epochs = 0;
      s.train.warmup_steps = std::min(s.train.warmup_steps, a.steps);
    }
    if (a.seed >= 0) s.train.seed = static_cast<uint64_t>(a.seed);
    files = list_stream_files(a.data_dir);
    streams = load_streams(files);
    s.partition.feat_dim = streams[0].features.cols();
    s.partition.num_actions = streams[0].num_actions;
    s.partition.validate();
    s.model.validate();
    s.train.validate();
  } catch (const std::exception& e) {
    return usage_error("train", e);
  }
  bool diverged = false;
  int steps_run = 0;
  try {
    fs::create_directories(a.out_dir);
    cmert::Rng rng(s.train.seed);
    cmert::ModelParams params = cmert::make_model(s.partition, s.model, rng);
    cmert::TrainResult r =
        cmert::train_model(params, streams, s.train, s.partition,
                           (fs::path(a.out_dir) / "train_log.ldjson").string());
    diverged = r.diverged;
    steps_run = r.steps_run;
    // On divergence the parameters hold the last completed finite step, so
    // the checkpoint is still worth keeping.
    cmert::save_checkpoint(params, s.partition,
                           (fs::path(a.out_dir) / "checkpoint.json").string());
    write_manifest(a.out_dir, "train", settings_json(s).dump(), s.train.seed, files,
                   {"checkpoint.json", "train_log.ldjson"});
  } catch (const std::exception& e) {
    return runtime_error_exit("train", e);
  }
  if (diverged) {
    std::cerr << "cmert train: loss went non-finite after " << steps_run
              << " completed steps; checkpoint holds the last finite parameters\n";
    return kExitRuntime;
  }
  return 0;
}

struct InferArgs {
  std::string ckpt, stream, out_dir;
  int delta = 0;
  bool cache = false, verify_cache = false;
};

int run_infer(const InferArgs& a) {
  cmert::Checkpoint ckpt;
  cmert::FeatureStream stream;
  try {
    ckpt = cmert::load_checkpoint(a.ckpt);
    stream = cmert::load_stream(a.stream);
    check_stream_matches(stream, a.stream, ckpt.partition, a.ckpt);
    if (a.delta < 0 || a.delta >= ckpt.partition.short_frames)
      throw std::invalid_argument("delta " + std::to_string(a.delta) +
                                  " must lie in [0, short_frames = " +
                                  std::to_string(ckpt.partition.short_frames) + ")");
    ckpt.partition.delta = a.delta;
  } catch (const std::exception& e) {
    return usage_error("infer", e);
  }
  try {
    fs::create_directories(a.out_dir);
    cmert::InferenceOptions opts;
    opts.use_cache = a.cache;
    opts.verify_cache = a.verify_cache;
    std::vector<cmert::PredictionRecord> records =
        cmert::run_stream(ckpt.params, stream, ckpt.partition, opts);
    cmert::save_predictions(records, (fs::path(a.out_dir) / "predictions.ldjson").string());
    nlohmann::json cfg{{"delta", a.delta},
                       {"use_cache", a.cache},
                       {"verify_cache", a.verify_cache}};
    write_manifest(a.out_dir, "infer", cfg.dump(), 0, {a.ckpt, a.stream},
                   {"predictions.ldjson"});
  } catch (const std::exception& e) {
    return runtime_error_exit("infer", e);
  }
  return 0;
}

struct EvalArgs {
  std::string pred, gt, out_dir;
  double pf1_threshold_s = 1.0, sf1_iou = 0.25;
};

int run_eval(const EvalArgs& a) {
  cmert::Tensor probs;
  std::vector<int> labels;
  double fps = 0.0;
  try {
    std::vector<cmert::PredictionRecord> records = cmert::load_predictions(a.pred);
    cmert::FeatureStream stream = cmert::load_stream(a.gt);
    if (records.empty()) throw std::invalid_argument(a.pred + " holds no prediction records");
    int classes = static_cast<int>(records[0].detection.size());
    if (classes != stream.num_actions + 1)
      throw std::invalid_argument(a.pred + " scores " + std::to_string(classes) +
                                  " classes, " + a.gt + " declares " +
                                  std::to_string(stream.num_actions + 1));
    probs = cmert::tensor2(static_cast<int>(records.size()), classes);
    labels.resize(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
      const cmert::PredictionRecord& r = records[i];
      if (static_cast<int>(r.detection.size()) != classes)
        throw std::invalid_argument(a.pred + ": record " + std::to_string(i) +
                                    " has a different class count");
      if (r.t < 0 || r.t >= stream.length())
        throw std::invalid_argument(a.pred + ": record " + std::to_string(i) + " targets frame " +
                                    std::to_string(r.t) + " outside the stream");
      for (int c = 0; c < classes; ++c) probs.at(static_cast<int>(i), c) = r.detection[c];
      labels[i] = stream.labels[r.t];
    }
    fps = stream.fps;
  } catch (const std::exception& e) {
    return usage_error("eval", e);
  }
  try {
    fs::create_directories(a.out_dir);
    cmert::MetricReport report =
        cmert::evaluate_detection(probs, labels, fps, a.pf1_threshold_s, a.sf1_iou);
    cmert::save_report(report, (fs::path(a.out_dir) / "report.json").string());
    nlohmann::json cfg{{"pf1_threshold_s", a.pf1_threshold_s}, {"sf1_iou", a.sf1_iou}};
    write_manifest(a.out_dir, "eval", cfg.dump(), 0, {a.pred, a.gt}, {"report.json"});
  } catch (const std::exception& e) {
    return runtime_error_exit("eval", e);
  }
  return 0;
}

struct DiagnoseArgs {
  std::string ckpt, data_dir, mode, out_dir;
  uint64_t seed = 0;
  int stride = 1;
};

int run_diagnose(const DiagnoseArgs& a) {
  cmert::Checkpoint ckpt;
  std::vector<std::string> files;
  std::vector<cmert::FeatureStream> streams;
  try {
    ckpt = cmert::load_checkpoint(a.ckpt);
    if (a.mode == "per-position") {
      if (a.data_dir.empty())
        throw std::invalid_argument("per-position mode needs --data");
      files = list_stream_files(a.data_dir);
      streams = load_streams(files);
      check_stream_matches(streams[0], files[0], ckpt.partition, a.ckpt);
    }
  } catch (const std::exception& e) {
    return usage_error("diagnose", e);
  }
  try {
    fs::create_directories(a.out_dir);
    std::vector<std::string> inputs = {a.ckpt};
    inputs.insert(inputs.end(), files.begin(), files.end());
    std::string output;
    if (a.mode == "per-position") {
      cmert::PositionDiagnostic d =
          cmert::per_position_diagnostic(ckpt.params, streams, ckpt.partition, a.stride);
      output = "per_position.csv";
      cmert::save_position_csv(d, (fs::path(a.out_dir) / output).string());
    } else {
      cmert::LeakageReport rep = cmert::leakage_audit(ckpt.params, ckpt.partition, a.seed);
      output = "leakage.json";
      cmert::save_leakage_report(rep, (fs::path(a.out_dir) / output).string());
      std::cout << "max influence beyond frame i+" << rep.delta << ": " << rep.max_violation
                << (rep.causal() ? " (causal)" : " (non-causal)") << "\n";
    }
    nlohmann::json cfg{{"mode", a.mode}, {"stride", a.stride}};
    write_manifest(a.out_dir, "diagnose", cfg.dump(), a.seed, inputs, {output});
  } catch (const std::exception& e) {
    return runtime_error_exit("diagnose", e);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming online action detection: data generation, training, "
               "inference, evaluation, diagnostics"};
  app.require_subcommand(1);

  GenArgs ga;
  CLI::App* gen = app.add_subcommand("gen", "Generate synthetic feature streams");
  gen->add_option("--grammar", ga.grammar_path, "Grammar config JSON (defaults used when omitted)");
  gen->add_option("--length", ga.length, "Frames per stream")
      ->check(CLI::Range(1, std::numeric_limits<int>::max()));
  gen->add_option("--count", ga.count, "Number of streams")
      ->check(CLI::Range(1, std::numeric_limits<int>::max()));
  gen->add_option("--seed", ga.seed, "Base seed; stream k uses seed+k");
  gen->add_option("--out", ga.out_dir, "Output directory")->required();

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Train a model on a stream directory");
  train->add_option("--data", ta.data_dir, "Directory of stream*.json files")->required();
  train->add_option("--out", ta.out_dir, "Output directory")->required();
  train->add_option("--config", ta.config_path, "Settings overlay JSON");
  train->add_option("--preset", ta.preset, "Named setting bundle")
      ->check(CLI::IsMember({"th14", "ek100", "crosstask"}));
  train->add_option("--steps", ta.steps, "Override the step-based horizon (warm-up clamped to fit)")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--seed", ta.seed, "Training seed")->check(CLI::NonNegativeNumber);

  InferArgs ia;
  CLI::App* infer = app.add_subcommand("infer", "Stream a checkpoint over a feature file");
  infer->add_option("--ckpt", ia.ckpt, "Checkpoint JSON")->required();
  infer->add_option("--stream", ia.stream, "Stream file")->required();
  infer->add_option("--out", ia.out_dir, "Output directory")->required();
  infer->add_option("--delta", ia.delta, "Emission latency in frames");
  infer->add_flag("--cache", ia.cache, "Reuse the compressed long-term memory between anchors");
  infer->add_flag("--verify-cache", ia.verify_cache,
                  "Recompute every cache hit and fail on divergence");

  EvalArgs ea;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Score a prediction dump against a stream");
  eval_cmd->add_option("--pred", ea.pred, "Prediction dump (LDJSON)")->required();
  eval_cmd->add_option("--gt", ea.gt, "Stream file holding ground-truth labels")->required();
  eval_cmd->add_option("--out", ea.out_dir, "Output directory")->required();
  eval_cmd->add_option("--pf1-threshold", ea.pf1_threshold_s, "Start-point window in seconds")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--sf1-iou", ea.sf1_iou, "Segment IoU threshold");

  DiagnoseArgs da;
  CLI::App* diag = app.add_subcommand("diagnose", "Per-position curves or leakage audit");
  diag->add_option("--ckpt", da.ckpt, "Checkpoint JSON")->required();
  diag->add_option("--mode", da.mode, "Diagnostic to run")
      ->required()
      ->check(CLI::IsMember({"per-position", "leakage"}));
  diag->add_option("--data", da.data_dir, "Stream directory (per-position mode)");
  diag->add_option("--seed", da.seed, "Probe seed (leakage mode)");
  diag->add_option("--stride", da.stride, "Anchor stride (per-position mode)")
      ->check(CLI::Range(1, std::numeric_limits<int>::max()));
  diag->add_option("--out", da.out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (gen->parsed()) return run_gen(ga);
  if (train->parsed()) return run_train(ta);
  if (infer->parsed()) return run_infer(ia);
  if (eval_cmd->parsed()) return run_eval(ea);
  return run_diagnose(da);
}
