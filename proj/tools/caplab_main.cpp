#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "caplab/config.hpp"
#include "caplab/decoding.hpp"
#include "caplab/errors.hpp"
#include "caplab/metrics.hpp"
#include "caplab/model.hpp"
#include "caplab/rng.hpp"
#include "caplab/synthworld.hpp"
#include "caplab/training.hpp"

namespace fs = std::filesystem;
using namespace caplab;

namespace {

// dataset split tags feed the scene-seed substream (see make_dataset)
constexpr std::uint64_t kTrainTag = 0;
constexpr std::uint64_t kValTag = 1;
constexpr std::uint64_t kProbeTag = 2;

std::string words(const Caption& caption, const Vocabulary& vocab) {
  std::string out;
  for (int t : caption.tokens) {
    if (t == vocab.eos) break;
    if (t == vocab.pad || t == vocab.bos) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(t);
  }
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

ModelDims model_dims(const ExperimentConfig& cfg, const Vocabulary& vocab) {
  ModelDims dims;
  dims.feature_dim = feature_dim(vocab);
  dims.hidden = cfg.hidden_size;
  dims.vocab = static_cast<int>(vocab.tokens.size());
  dims.embed = cfg.embed_dim;
  return dims;
}

void check_dims(const CaptionerParams& params, const ModelDims& dims) {
  if (params.dims.feature_dim != dims.feature_dim || params.dims.hidden != dims.hidden ||
      params.dims.vocab != dims.vocab || params.dims.embed != dims.embed) {
    throw CheckpointError("checkpoint dims do not match the configured model");
  }
}

std::string data_path(const ExperimentConfig& cfg, const char* split) {
  return (fs::path(cfg.output_dir) / "data" / (std::string(split) + ".scenes")).string();
}

std::vector<SceneRecord> load_split(const ExperimentConfig& cfg, const char* split,
                                    const Vocabulary& vocab) {
  const std::string path = data_path(cfg, split);
  if (!fs::exists(path)) {
    throw PreconditionError("missing dataset " + path + "; run gen-data first");
  }
  return load_scene_dataset(path, vocab);
}

int cmd_gen_data(const ExperimentConfig& cfg) {
  const Vocabulary vocab = Vocabulary::standard();
  fs::create_directories(fs::path(cfg.output_dir) / "data");
  const struct {
    const char* split;
    int size;
    std::uint64_t tag;
  } splits[] = {{"train", cfg.train_size, kTrainTag},
                {"val", cfg.val_size, kValTag},
                {"probe", cfg.probe_size, kProbeTag}};
  for (const auto& s : splits) {
    const auto records = make_dataset(cfg.seed, cfg.scene, s.size, vocab, s.tag);
    const std::string path = data_path(cfg, s.split);
    write_scene_dataset(path, records, vocab);
    std::cout << path << ": " << records.size() << " scenes\n";
  }
  return 0;
}

CaptionerParams initial_params_for_stage(const ExperimentConfig& cfg, Stage stage,
                                         const std::string& init_checkpoint,
                                         const ModelDims& dims) {
  if (!init_checkpoint.empty()) {
    if (!fs::exists(init_checkpoint)) {
      throw PreconditionError("init checkpoint not found: " + init_checkpoint);
    }
    CaptionerParams params = load_checkpoint(init_checkpoint);
    check_dims(params, dims);
    return params;
  }
  if (stage == Stage::xent) return init_params(cfg.seed, dims);
  // sequence-level stages start from the newest stage-1 checkpoint
  const std::string stage1_dir = (fs::path(cfg.output_dir) / "xent").string();
  const int step = latest_checkpoint_step(stage1_dir);
  if (step < 0) {
    throw PreconditionError(std::string("stage '") + stage_name(stage) +
                            "' needs a stage-1 checkpoint; run train --stage xent first");
  }
  CaptionerParams params = load_checkpoint(checkpoint_path(stage1_dir, step));
  check_dims(params, dims);
  return params;
}

void print_stage_result(const std::string& label, const StageResult& res) {
  std::cout << label << ": stopped at step " << res.final_step
            << (res.stopped_by_length ? " (length target reached)" : "")
            << ", mean_length=" << res.final_probe.mean_length
            << ", object_recall=" << res.final_probe.object_recall
            << ", capture_f1=" << res.final_probe.capture_f1
            << ", chair=" << res.final_probe.chair
            << ", coherence=" << res.final_probe.coherence_proxy << "\n";
}

int cmd_train(const ExperimentConfig& cfg, const std::string& stage_arg, bool bridge_only,
              const std::string& init_checkpoint, bool no_resume, const std::string& sweep_arg) {
  const Vocabulary vocab = Vocabulary::standard();
  const ModelDims dims = model_dims(cfg, vocab);
  const Stage stage = stage_from_name(stage_arg);
  TrainConfig tc;
  switch (stage) {
    case Stage::xent: tc = cfg.train_xent; break;
    case Stage::debias: tc = cfg.train_debias; break;
    case Stage::reinforce: tc = cfg.train_reinforce; break;
  }

  const TrainingSet train =
      prepare_training_set(load_split(cfg, "train", vocab), vocab, cfg.scene.noise_sigma);
  const TrainingSet probe =
      prepare_training_set(load_split(cfg, "probe", vocab), vocab, cfg.scene.noise_sigma);

  CaptionerParams params = initial_params_for_stage(cfg, stage, init_checkpoint, dims);
  if (bridge_only) {
    params.frozen.bridge = false;
    params.frozen.embedding = true;
    params.frozen.recurrent = true;
    params.frozen.output = true;
  }

  if (!sweep_arg.empty()) {
    if (sweep_arg.rfind("lr=", 0) != 0) throw ConfigError("--sweep expects lr=a,b,c");
    const std::vector<std::string> lrs = split_list(sweep_arg.substr(3));
    if (lrs.empty()) throw ConfigError("--sweep lr list is empty");
    for (const std::string& lr_text : lrs) {
      TrainConfig sweep_tc = tc;
      std::size_t used = 0;
      try {
        sweep_tc.learning_rate = std::stod(lr_text, &used);
      } catch (const std::exception&) {
        throw ConfigError("bad learning rate: " + lr_text);
      }
      if (used != lr_text.size()) throw ConfigError("bad learning rate: " + lr_text);
      CaptionerParams run_params = params;
      const std::string dir =
          (fs::path(cfg.output_dir) / (std::string(stage_name(stage)) + "-lr-" + lr_text))
              .string();
      const StageResult res =
          run_stage(run_params, sweep_tc, train, probe, dir, /*resume=*/!no_resume);
      print_stage_result("lr=" + lr_text, res);
    }
    return 0;
  }

  const std::string dir = (fs::path(cfg.output_dir) / stage_name(stage)).string();
  const StageResult res = run_stage(params, tc, train, probe, dir, /*resume=*/!no_resume);
  print_stage_result(stage_name(stage), res);
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint,
             const std::string& dataset, bool trivial, const std::string& decoding,
             std::string report_path) {
  const Vocabulary vocab = Vocabulary::standard();
  if (!fs::exists(checkpoint)) throw PreconditionError("checkpoint not found: " + checkpoint);
  if (!fs::exists(dataset)) throw PreconditionError("dataset not found: " + dataset);
  const CaptionerParams params = load_checkpoint(checkpoint);
  check_dims(params, model_dims(cfg, vocab));

  const std::vector<SceneRecord> records = load_scene_dataset(dataset, vocab);
  if (records.empty()) throw PreconditionError("dataset is empty: " + dataset);
  const TrainingSet set = prepare_training_set(records, vocab, cfg.scene.noise_sigma);

  DecodeConfig dc = cfg.decode_eval;
  if (!decoding.empty()) dc.strategy = strategy_from_name(decoding);
  if (trivial) dc.block_eos = true;

  std::vector<Caption> captions;
  captions.reserve(set.records.size());
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    DecodeConfig per_sample = dc;
    per_sample.rng_seed = substream(cfg.seed, "eval", i);
    captions.push_back(decode(params, set.features[i], per_sample, vocab).caption);
  }

  const CorpusStats stats = reference_corpus_stats(set.records, vocab);
  const BatchEvaluation ev = evaluate_batch(captions, set.records, stats, vocab);

  if (report_path.empty()) {
    std::string name = fs::path(dataset).stem().string();
    if (trivial) name += "-trivial";
    if (!decoding.empty()) name += "-" + decoding;
    fs::create_directories(fs::path(cfg.output_dir) / "reports");
    report_path = (fs::path(cfg.output_dir) / "reports" / (name + ".json")).string();
  } else if (fs::path(report_path).has_parent_path()) {
    fs::create_directories(fs::path(report_path).parent_path());
  }
  write_json_report(report_path, fs::path(dataset).stem().string(), ev, captions, set.records,
                    vocab);

  std::cout << "report: " << report_path << "\n"
            << "mean_length=" << ev.report.mean_length
            << " unigram_recall=" << ev.report.unigram_recall
            << " object_recall=" << ev.report.object_recall << " chair=" << ev.report.chair
            << " capture_f1=" << ev.report.capture_f1 << " cider=" << ev.report.cider
            << " coherence_proxy=" << ev.report.coherence_proxy << "\n";
  return 0;
}

int cmd_probe_captions(const ExperimentConfig& cfg, const std::string& checkpoints_arg,
                       std::uint64_t scene_seed) {
  const Vocabulary vocab = Vocabulary::standard();
  const std::vector<std::string> paths = split_list(checkpoints_arg);
  if (paths.empty()) throw ConfigError("--checkpoints list is empty");

  const Scene scene = generate_scene(scene_seed, cfg.scene);
  const Array features = render_features(scene, vocab, cfg.scene.noise_sigma);
  std::cout << "# scene " << scene_seed << ": short='"
            << words(describe(scene, CaptionLevel::short_ref, vocab), vocab) << "' full='"
            << words(describe(scene, CaptionLevel::full_ref, vocab), vocab) << "'\n";

  const ModelDims dims = model_dims(cfg, vocab);
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (!fs::exists(paths[i])) {
      std::cout << paths[i] << ": [missing]\n";
      continue;
    }
    const CaptionerParams params = load_checkpoint(paths[i]);
    check_dims(params, dims);
    DecodeConfig dc = cfg.decode_eval;
    dc.rng_seed = substream(cfg.seed, "probe-captions", i);
    const DecodeResult r = decode(params, features, dc, vocab);
    std::cout << paths[i] << ": " << words(r.caption, vocab) << "\n";
  }
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, const std::string& stage_arg,
              const std::string& lrs) {
  return cmd_train(cfg, stage_arg, /*bridge_only=*/false, /*init_checkpoint=*/"",
                   /*no_resume=*/false, "lr=" + lrs);
}

int dispatch(int argc, char** argv) {
  CLI::App app{"synthetic captioning lab: two-stage training with EOS debiasing"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "experiment config file (key = value sections)");

  auto* gen = app.add_subcommand("gen-data", "write train/val/probe scene datasets");

  auto* train = app.add_subcommand("train", "run one training stage");
  std::string stage_arg;
  bool bridge_only = false;
  bool no_resume = false;
  std::string init_checkpoint;
  std::string sweep_arg;
  train->add_option("--stage", stage_arg, "xent | debias | reinforce")->required();
  train->add_flag("--bridge-only", bridge_only, "train only the feature bridge");
  train->add_flag("--no-resume", no_resume, "ignore existing checkpoints");
  train->add_option("--init-checkpoint", init_checkpoint, "start from this checkpoint");
  train->add_option("--sweep", sweep_arg, "lr=a,b,c: one run per learning rate");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  std::string checkpoint;
  std::string dataset;
  bool trivial = false;
  std::string decoding;
  std::string report_path;
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--dataset", dataset, "scene dataset file")->required();
  eval->add_flag("--trivial", trivial, "block EOS during decoding (trivial baseline)");
  eval->add_option("--decoding", decoding, "override decode strategy");
  eval->add_option("--report", report_path, "JSON report path");

  auto* probe = app.add_subcommand("probe-captions", "decode one scene under many checkpoints");
  std::string checkpoints_arg;
  std::uint64_t scene_seed = 7;
  probe->add_option("--checkpoints", checkpoints_arg, "comma-separated checkpoint list")
      ->required();
  probe->add_option("--scene-seed", scene_seed, "scene seed to decode");

  auto* sweep = app.add_subcommand("sweep", "learning-rate ablation for one stage");
  std::string sweep_stage = "debias";
  std::string sweep_lrs;
  sweep->add_option("--stage", sweep_stage, "xent | debias | reinforce");
  sweep->add_option("--lrs", sweep_lrs, "comma-separated learning rates")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // prints help or the usage error; bad usage maps to the config exit code
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  ExperimentConfig cfg =
      config_path.empty() ? default_experiment_config() : load_experiment_config(config_path);
  apply_env_overrides(cfg);

  if (gen->parsed()) return cmd_gen_data(cfg);
  if (train->parsed()) {
    return cmd_train(cfg, stage_arg, bridge_only, init_checkpoint, no_resume, sweep_arg);
  }
  if (eval->parsed()) return cmd_eval(cfg, checkpoint, dataset, trivial, decoding, report_path);
  if (probe->parsed()) return cmd_probe_captions(cfg, checkpoints_arg, scene_seed);
  if (sweep->parsed()) return cmd_sweep(cfg, sweep_stage, sweep_lrs);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const PreconditionError& e) {
    std::cerr << "precondition error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
