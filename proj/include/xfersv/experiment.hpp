#pragma once

// Config-driven experiment stages behind the command-line tool: data
// generation, the three training stages, evaluation, the gradient-check
// sweep, and the end-to-end reproduction run.
//
// Per-stage seeds are derive_seed(root_seed, stage_name) with stage names
// "corpus", "trials", "init", "init-teacher", "baseline", "teacher",
// "student" and "gradcheck". Every student recipe uses the "student" seed so
// all recipes see the same batch sequence.

#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfersv/data.hpp"
#include "xfersv/errors.hpp"
#include "xfersv/eval.hpp"
#include "xfersv/gradcheck.hpp"
#include "xfersv/losses.hpp"
#include "xfersv/model.hpp"
#include "xfersv/numerics.hpp"
#include "xfersv/train.hpp"

namespace xfersv {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitConfig = 2,
  kExitMissingPrerequisite = 3,
  kExitDataResolution = 4,
};

// Error carrying the process exit code the CLI should return.
class StageError : public Error {
 public:
  StageError(int code, const std::string& what) : Error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

struct StageTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr_init = 0.01;
  double lr_decay_factor = 0.9;
  std::size_t lr_decay_every = 2;
  LrSchedule schedule = LrSchedule::multiplicative;
};

struct EvalConfig {
  DcfParams dcf;
  std::size_t num_target = 2000;
  std::size_t num_nontarget = 2000;
  EnrollMode enroll_mode = EnrollMode::single;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "xfersv_out";
  CorpusConfig corpus;
  std::vector<std::size_t> hidden_dims{32, 32};
  std::size_t embedding_dim = 16;
  Activation activation = Activation::relu;
  StageTrainConfig baseline;
  StageTrainConfig teacher;
  bool teacher_init_from_baseline = true;
  StageTrainConfig student;
  StudentInput student_input = StudentInput::near_and_far;
  std::vector<std::string> recipes{"CE", "CE_KL", "CE_COS", "CE_MSE", "CE_MMD", "CE_F'", "CE_I", "CE_F'_I"};
  LossWeights weights;
  LossOptions loss_options{1.0, MmdKernel::linear(), ContrastiveOptions{}, true};
  EvalConfig eval;

  ExtractorConfig extractor() const {
    ExtractorConfig c;
    c.input_dim = corpus.input_dim;
    c.hidden_dims = hidden_dims;
    c.embedding_dim = embedding_dim;
    c.num_speakers = corpus.num_train_speakers;
    c.activation = activation;
    return c;
  }

  CorpusConfig corpus_config() const {
    CorpusConfig c = corpus;
    c.seed = derive_seed(seed, "corpus");
    return c;
  }

  TrainConfig train_config(const StageTrainConfig& stage, const std::string& stage_name,
                           const Recipe& recipe) const {
    TrainConfig t;
    t.epochs = stage.epochs;
    t.batch_size = stage.batch_size;
    t.lr_init = stage.lr_init;
    t.lr_decay_factor = stage.lr_decay_factor;
    t.lr_decay_every = stage.lr_decay_every;
    t.schedule = stage.schedule;
    t.recipe = recipe;
    t.weights = weights;
    t.loss_options = loss_options;
    t.seed = derive_seed(seed, stage_name);
    t.student_input = student_input;
    return t;
  }

  void validate() const;
  json to_json() const;
  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

// ---------------------------------------------------------------------------
// Config parsing. Every field has a default; unknown keys are errors.
// ---------------------------------------------------------------------------

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type");
    }
  }

  void read_size(const char* key, std::size_t& out) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    if (!it->is_number_unsigned()) throw ConfigError(path_ + "." + key + ": expected a non-negative integer");
    out = it->get<std::size_t>();
  }

  void read_number(const char* key, double& out) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return;
    if (!it->is_number()) throw ConfigError(path_ + "." + key + ": expected a number");
    out = it->get<double>();
  }

  std::optional<ObjectReader> child(const char* key) {
    seen_.insert(key);
    auto it = node_.find(key);
    if (it == node_.end()) return std::nullopt;
    return ObjectReader(*it, path_ + "." + key);
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = node_.find(key);
    return it == node_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (seen_.count(it.key()) == 0) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }
  }

  const std::string& path() const { return path_; }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

inline LrSchedule parse_schedule(const std::string& s) {
  if (s == "multiplicative") return LrSchedule::multiplicative;
  if (s == "subtractive") return LrSchedule::subtractive;
  throw ConfigError("unknown lr schedule '" + s + "'");
}

inline const char* to_string(LrSchedule s) {
  return s == LrSchedule::multiplicative ? "multiplicative" : "subtractive";
}

inline void read_stage(ObjectReader& r, StageTrainConfig& s) {
  r.read_size("epochs", s.epochs);
  r.read_size("batch_size", s.batch_size);
  r.read_number("lr_init", s.lr_init);
  r.read_number("lr_decay_factor", s.lr_decay_factor);
  r.read_size("lr_decay_every", s.lr_decay_every);
  std::string schedule = to_string(s.schedule);
  r.read("lr_schedule", schedule);
  s.schedule = parse_schedule(schedule);
}

inline json stage_json(const StageTrainConfig& s) {
  return {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"lr_init", s.lr_init},
          {"lr_decay_factor", s.lr_decay_factor},
          {"lr_decay_every", s.lr_decay_every},
          {"lr_schedule", to_string(s.schedule)}};
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  try {
    corpus.validate();
    extractor().validate();
    for (const std::string& r : recipes) Recipe::parse(r);
    if (recipes.empty()) throw ConfigError("train.student.recipes is empty");
    for (const StageTrainConfig* s : {&baseline, &teacher, &student}) {
      train_config(*s, "check", Recipe::parse("CE")).validate();
    }
    weights.validate();
    eval.dcf.validate();
    if (eval.num_target < 1 || eval.num_nontarget < 1) throw ConfigError("eval trial counts must be >= 1");
    if (!(loss_options.temperature > 0.0)) throw ConfigError("loss.temperature must be > 0");
    if (loss_options.mmd_kernel.kind == MmdKernel::Kind::rbf && !loss_options.mmd_kernel.use_median &&
        !(loss_options.mmd_kernel.bandwidth > 0.0)) {
      throw ConfigError("loss.mmd_bandwidth must be > 0 or \"median\"");
    }
    if (output_dir.empty()) throw ConfigError("output_dir is empty");
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

inline json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  j["corpus"] = {{"num_train_speakers", corpus.num_train_speakers},
                 {"num_eval_speakers", corpus.num_eval_speakers},
                 {"utterances_per_speaker", corpus.utterances_per_speaker},
                 {"latent_dim", corpus.latent_dim},
                 {"input_dim", corpus.input_dim},
                 {"num_far_channels", corpus.num_far_channels},
                 {"channel_strength", corpus.channel_strength},
                 {"content_std", corpus.content_std},
                 {"noise_near", corpus.noise_near},
                 {"noise_far", corpus.noise_far}};
  j["model"] = {{"hidden_dims", hidden_dims}, {"embedding_dim", embedding_dim},
                {"activation", xfersv::to_string(activation)}};
  json teacher_j = detail::stage_json(teacher);
  teacher_j["init_from_baseline"] = teacher_init_from_baseline;
  json student_j = detail::stage_json(student);
  student_j["student_input"] = student_input == StudentInput::near_and_far ? "near_and_far" : "far_only";
  student_j["recipes"] = recipes;
  j["train"] = {{"baseline", detail::stage_json(baseline)}, {"teacher", teacher_j}, {"student", student_j}};
  json mmd_bw = loss_options.mmd_kernel.use_median ? json("median") : json(loss_options.mmd_kernel.bandwidth);
  j["loss"] = {{"lambda1", weights.lambda1},
               {"lambda2", weights.lambda2},
               {"kl_weight", weights.kl},
               {"cosine_weight", weights.cosine},
               {"mse_weight", weights.mse},
               {"mmd_weight", weights.mmd},
               {"temperature", loss_options.temperature},
               {"mmd_kernel", loss_options.mmd_kernel.kind == MmdKernel::Kind::linear ? "linear" : "rbf"},
               {"mmd_bandwidth", mmd_bw},
               {"contrastive_normalize", loss_options.contrastive.normalize},
               {"contrastive_include_positive", loss_options.contrastive.include_positive},
               {"instance_normalize", loss_options.instance_normalize}};
  j["eval"] = {{"p_target", eval.dcf.p_target},
               {"c_miss", eval.dcf.c_miss},
               {"c_fa", eval.dcf.c_fa},
               {"num_target", eval.num_target},
               {"num_nontarget", eval.num_nontarget},
               {"enroll_mode", eval.enroll_mode == EnrollMode::single ? "single" : "average"}};
  return j;
}

inline ExperimentConfig parse_experiment_config(const json& root) {
  ExperimentConfig c;
  detail::ObjectReader r(root, "config");
  r.read("seed", c.seed);
  r.read("output_dir", c.output_dir);
  if (auto corpus = r.child("corpus")) {
    corpus->read_size("num_train_speakers", c.corpus.num_train_speakers);
    corpus->read_size("num_eval_speakers", c.corpus.num_eval_speakers);
    corpus->read_size("utterances_per_speaker", c.corpus.utterances_per_speaker);
    corpus->read_size("latent_dim", c.corpus.latent_dim);
    corpus->read_size("input_dim", c.corpus.input_dim);
    corpus->read_size("num_far_channels", c.corpus.num_far_channels);
    corpus->read_number("channel_strength", c.corpus.channel_strength);
    corpus->read_number("content_std", c.corpus.content_std);
    corpus->read_number("noise_near", c.corpus.noise_near);
    corpus->read_number("noise_far", c.corpus.noise_far);
    corpus->finish();
  }
  if (auto model = r.child("model")) {
    model->read("hidden_dims", c.hidden_dims);
    model->read_size("embedding_dim", c.embedding_dim);
    std::string act = xfersv::to_string(c.activation);
    model->read("activation", act);
    try {
      c.activation = parse_activation(act);
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
    model->finish();
  }
  if (auto train = r.child("train")) {
    if (auto b = train->child("baseline")) {
      detail::read_stage(*b, c.baseline);
      b->finish();
    }
    if (auto t = train->child("teacher")) {
      detail::read_stage(*t, c.teacher);
      t->read("init_from_baseline", c.teacher_init_from_baseline);
      t->finish();
    }
    if (auto s = train->child("student")) {
      detail::read_stage(*s, c.student);
      std::string input = c.student_input == StudentInput::near_and_far ? "near_and_far" : "far_only";
      s->read("student_input", input);
      if (input == "near_and_far") c.student_input = StudentInput::near_and_far;
      else if (input == "far_only") c.student_input = StudentInput::far_only;
      else throw ConfigError("train.student.student_input: unknown value '" + input + "'");
      s->read("recipes", c.recipes);
      s->finish();
    }
    train->finish();
  }
  if (auto loss = r.child("loss")) {
    loss->read_number("lambda1", c.weights.lambda1);
    loss->read_number("lambda2", c.weights.lambda2);
    loss->read_number("kl_weight", c.weights.kl);
    loss->read_number("cosine_weight", c.weights.cosine);
    loss->read_number("mse_weight", c.weights.mse);
    loss->read_number("mmd_weight", c.weights.mmd);
    loss->read_number("temperature", c.loss_options.temperature);
    std::string kernel = c.loss_options.mmd_kernel.kind == MmdKernel::Kind::linear ? "linear" : "rbf";
    loss->read("mmd_kernel", kernel);
    if (kernel != "linear" && kernel != "rbf") throw ConfigError("loss.mmd_kernel: unknown kernel '" + kernel + "'");
    if (const json* bw = loss->raw("mmd_bandwidth")) {
      if (bw->is_string() && bw->get<std::string>() == "median") {
        c.loss_options.mmd_kernel = MmdKernel::rbf_median();
      } else if (bw->is_number()) {
        c.loss_options.mmd_kernel = MmdKernel::rbf(bw->get<double>());
      } else {
        throw ConfigError("loss.mmd_bandwidth: expected a number or \"median\"");
      }
    }
    if (kernel == "linear") c.loss_options.mmd_kernel.kind = MmdKernel::Kind::linear;
    else c.loss_options.mmd_kernel.kind = MmdKernel::Kind::rbf;
    loss->read("contrastive_normalize", c.loss_options.contrastive.normalize);
    loss->read("contrastive_include_positive", c.loss_options.contrastive.include_positive);
    loss->read("instance_normalize", c.loss_options.instance_normalize);
    loss->finish();
  }
  if (auto eval = r.child("eval")) {
    eval->read_number("p_target", c.eval.dcf.p_target);
    eval->read_number("c_miss", c.eval.dcf.c_miss);
    eval->read_number("c_fa", c.eval.dcf.c_fa);
    eval->read_size("num_target", c.eval.num_target);
    eval->read_size("num_nontarget", c.eval.num_nontarget);
    std::string mode = c.eval.enroll_mode == EnrollMode::single ? "single" : "average";
    eval->read("enroll_mode", mode);
    if (mode == "single") c.eval.enroll_mode = EnrollMode::single;
    else if (mode == "average") c.eval.enroll_mode = EnrollMode::average;
    else throw ConfigError("eval.enroll_mode: unknown value '" + mode + "'");
    eval->finish();
  }
  r.finish();
  c.validate();
  return c;
}

// Reads a config file; XFERSV_SEED overrides the seed and a non-empty
// output_dir argument overrides the configured one.
inline ExperimentConfig load_experiment_config(const std::optional<std::string>& path,
                                               const std::string& output_dir_override = "") {
  json root = json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw StageError(kExitConfig, "cannot read config '" + *path + "'");
    try {
      root = json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw StageError(kExitConfig, "config '" + *path + "' is not valid JSON: " + e.what());
    }
  }
  ExperimentConfig c;
  try {
    c = parse_experiment_config(root);
  } catch (const Error& e) {
    throw StageError(kExitConfig, e.what());
  }
  if (const char* env = std::getenv("XFERSV_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw StageError(kExitConfig, "XFERSV_SEED is not an unsigned integer");
    c.seed = v;
  }
  if (!output_dir_override.empty()) c.output_dir = output_dir_override;
  return c;
}

// ---------------------------------------------------------------------------
// Output layout
// ---------------------------------------------------------------------------

struct Layout {
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path train_features() const { return data_dir() / "train.feat"; }
  fs::path eval_features() const { return data_dir() / "eval.feat"; }
  fs::path trials(const std::string& condition) const { return data_dir() / ("trials_" + condition + ".txt"); }
  fs::path manifest() const { return data_dir() / "manifest.json"; }
  fs::path checkpoint(const std::string& name) const { return root / "checkpoints" / (name + ".ckpt"); }
  fs::path log(const std::string& name) const { return root / "logs" / (name + ".jsonl"); }
  fs::path freeze_record(const std::string& name) const { return root / "logs" / (name + ".freeze.json"); }
  fs::path reports_dir() const { return root / "reports"; }
  fs::path scores(const std::string& system, const std::string& cond) const {
    return root / "scores" / (system + "__" + cond + ".txt");
  }
  fs::path projection(const std::string& system) const { return root / "projections" / (system + ".csv"); }
};

inline const std::vector<std::string>& trial_conditions() {
  static const std::vector<std::string> conditions{"mismatched", "near_near", "far_far"};
  return conditions;
}

inline std::string student_checkpoint_name(const Recipe& recipe) { return "student_" + recipe.slug(); }

// Row label used in comparison reports for a student recipe.
inline std::string system_label(const Recipe& recipe) {
  static const std::map<std::string, std::string> labels{
      {"CE", "student-CE"}, {"CE_KL", "KL"}, {"CE_COS", "cosine"}, {"CE_MSE", "MSE"},
      {"CE_MMD", "MMD"},    {"CE_F'", "F"},  {"CE_I", "I"},        {"CE_F'_I", "F&I"}};
  auto it = labels.find(recipe.name());
  return it == labels.end() ? recipe.name() : it->second;
}

namespace detail {

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw StageError(kExitConfig, "cannot create output directory '" + dir.string() + "'");
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StageError(kExitConfig, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw StageError(kExitConfig, "write failed for '" + path.string() + "'");
}

inline std::string file_hash(const fs::path& path) {
  return hex64(content_hash(io::read_file(path.string())));
}

inline void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) {
    throw StageError(kExitMissingPrerequisite, what + " not found at '" + path.string() + "'");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline void run_gen_data(const ExperimentConfig& config) {
  const Layout layout{config.output_dir};
  detail::ensure_dir(layout.data_dir());
  const Corpus corpus = synth_corpus(config.corpus_config());
  Rng trial_rng(derive_seed(config.seed, "trials"));
  TrialSets sets;
  try {
    sets = make_trials(corpus.eval, config.eval.num_target, config.eval.num_nontarget, trial_rng);
  } catch (const ParameterError& e) {
    throw StageError(kExitConfig, e.what());
  }
  try {
    write_features(flatten_pairs(corpus.train_pairs), layout.train_features().string());
    write_features(corpus.eval, layout.eval_features().string());
    write_trials(sets.mismatched, layout.trials("mismatched").string());
    write_trials(sets.near_near, layout.trials("near_near").string());
    write_trials(sets.far_far, layout.trials("far_far").string());
  } catch (const UsageError& e) {
    throw StageError(kExitConfig, e.what());
  }

  json manifest;
  manifest["seed"] = config.seed;
  manifest["config_hash"] = config.hash();
  manifest["config"] = config.to_json();
  json files = json::object();
  for (const fs::path& p : {layout.train_features(), layout.eval_features(), layout.trials("mismatched"),
                            layout.trials("near_near"), layout.trials("far_far")}) {
    files[p.filename().string()] = detail::file_hash(p);
  }
  manifest["files"] = std::move(files);
  detail::write_text(layout.manifest(), manifest.dump(2) + "\n");
}

struct LoadedData {
  std::vector<ParallelPair> train_pairs;
  std::vector<Utterance> eval;
};

inline std::vector<ParallelPair> load_train_pairs(const Layout& layout) {
  detail::require_file(layout.train_features(), "training features (run gen-data first)");
  try {
    return pair_utterances(read_features(layout.train_features().string()));
  } catch (const FormatError& e) {
    throw StageError(kExitDataResolution, e.what());
  }
}

inline void save_stage(const Layout& layout, const std::string& name, const ModelParams& params,
                       const TrainLog& log, const TrainingMeta& meta) {
  detail::ensure_dir(layout.checkpoint(name).parent_path());
  save_checkpoint(params, layout.checkpoint(name).string(), meta);
  detail::write_text(layout.log(name), log.to_jsonl());
}

inline ModelParams load_stage_checkpoint(const fs::path& path, const std::string& what) {
  detail::require_file(path, what);
  try {
    return load_checkpoint(path.string()).params;
  } catch (const FormatError& e) {
    throw StageError(kExitDataResolution, e.what());
  }
}

inline void run_train_baseline(const ExperimentConfig& config) {
  const Layout layout{config.output_dir};
  const auto pairs = load_train_pairs(layout);
  Rng init_rng(derive_seed(config.seed, "init"));
  const ModelParams init = init_params(config.extractor(), init_rng, Role::baseline);
  const TrainConfig tc = config.train_config(config.baseline, "baseline", Recipe::parse("CE"));
  TrainResult r = train_baseline(pairs, init, tc);
  save_stage(layout, "baseline", r.params, r.log,
             {static_cast<std::uint32_t>(tc.epochs), config.seed, "CE"});
}

inline void run_train_teacher(const ExperimentConfig& config) {
  const Layout layout{config.output_dir};
  const auto pairs = load_train_pairs(layout);
  ModelParams init;
  if (config.teacher_init_from_baseline) {
    init = load_stage_checkpoint(layout.checkpoint("baseline"), "baseline checkpoint (train --stage baseline first)");
  } else {
    Rng init_rng(derive_seed(config.seed, "init-teacher"));
    init = init_params(config.extractor(), init_rng, Role::teacher);
  }
  const TrainConfig tc = config.train_config(config.teacher, "teacher", Recipe::parse("CE"));
  TrainResult r = train_teacher(pairs, init, tc);
  save_stage(layout, "teacher", r.params, r.log, {static_cast<std::uint32_t>(tc.epochs), config.seed, "CE"});
}

struct FreezeRecord {
  std::string checkpoint_hash_before;
  std::string checkpoint_hash_after;
  std::string params_hash_before;
  std::string params_hash_after;

  bool frozen() const {
    return checkpoint_hash_before == checkpoint_hash_after && params_hash_before == params_hash_after;
  }
};

inline FreezeRecord run_train_student(const ExperimentConfig& config, const Recipe& recipe) {
  const Layout layout{config.output_dir};
  const fs::path teacher_path = layout.checkpoint("teacher");
  const ModelParams teacher = load_stage_checkpoint(teacher_path, "teacher checkpoint (train --stage teacher first)");
  const ModelParams init =
      load_stage_checkpoint(layout.checkpoint("baseline"), "baseline checkpoint (train --stage baseline first)");
  const auto pairs = load_train_pairs(layout);

  FreezeRecord freeze;
  freeze.checkpoint_hash_before = detail::file_hash(teacher_path);
  const TrainConfig tc = config.train_config(config.student, "student", recipe);
  StudentResult r = train_student(teacher, init, pairs, tc);
  freeze.checkpoint_hash_after = detail::file_hash(teacher_path);
  freeze.params_hash_before = hex64(r.teacher_hash_before);
  freeze.params_hash_after = hex64(r.teacher_hash_after);

  const std::string name = student_checkpoint_name(recipe);
  save_stage(layout, name, r.params, r.log, {static_cast<std::uint32_t>(tc.epochs), config.seed, recipe.name()});
  json rec;
  rec["recipe"] = recipe.name();
  rec["teacher_checkpoint_hash_before"] = freeze.checkpoint_hash_before;
  rec["teacher_checkpoint_hash_after"] = freeze.checkpoint_hash_after;
  rec["teacher_params_hash_before"] = freeze.params_hash_before;
  rec["teacher_params_hash_after"] = freeze.params_hash_after;
  rec["frozen"] = freeze.frozen();
  detail::write_text(layout.freeze_record(name), rec.dump(2) + "\n");
  if (!freeze.frozen()) throw StageError(kExitCheckFailed, "teacher parameters changed during student training");
  return freeze;
}

struct SystemSpec {
  std::string name;
  fs::path checkpoint;
};

struct ConditionSpec {
  std::string name;
  fs::path trials;
};

// Default systems: every checkpoint the configured pipeline produces, in
// report order.
inline std::vector<SystemSpec> default_systems(const ExperimentConfig& config) {
  const Layout layout{config.output_dir};
  std::vector<SystemSpec> systems{{"baseline", layout.checkpoint("baseline")},
                                  {"teacher", layout.checkpoint("teacher")}};
  for (const std::string& r : config.recipes) {
    const Recipe recipe = Recipe::parse(r);
    systems.push_back({system_label(recipe), layout.checkpoint(student_checkpoint_name(recipe))});
  }
  return systems;
}

inline std::vector<ConditionSpec> default_conditions(const ExperimentConfig& config) {
  const Layout layout{config.output_dir};
  std::vector<ConditionSpec> out;
  for (const std::string& c : trial_conditions()) out.push_back({c, layout.trials(c)});
  return out;
}

inline std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

inline MetricsReport run_evaluate(const ExperimentConfig& config, const std::vector<SystemSpec>& systems,
                                  const std::vector<ConditionSpec>& conditions) {
  const Layout layout{config.output_dir};
  if (!fs::exists(layout.eval_features())) {
    throw StageError(kExitDataResolution, "evaluation features not found at '" + layout.eval_features().string() + "'");
  }
  std::vector<Utterance> eval_utts;
  std::map<std::string, TrialList> trial_lists;
  try {
    eval_utts = read_features(layout.eval_features().string());
    for (const ConditionSpec& c : conditions) trial_lists[c.name] = read_trials(c.trials.string());
  } catch (const Error& e) {
    throw StageError(kExitDataResolution, e.what());
  }

  std::vector<SystemScores> scored;
  std::vector<std::string> names;
  for (const ConditionSpec& c : conditions) names.push_back(c.name);
  for (const SystemSpec& sys : systems) {
    if (!fs::exists(sys.checkpoint)) {
      throw StageError(kExitDataResolution, "checkpoint for '" + sys.name + "' not found at '" +
                                                sys.checkpoint.string() + "'");
    }
    ModelParams params;
    try {
      params = load_checkpoint(sys.checkpoint.string()).params;
    } catch (const Error& e) {
      throw StageError(kExitDataResolution, e.what());
    }
    EmbeddingStore store;
    SystemScores s{sys.name, {}};
    try {
      store = extract_embeddings(params, eval_utts);
      for (const ConditionSpec& c : conditions) {
        const TrialList& trials = trial_lists.at(c.name);
        s.conditions[c.name] = {trials, score_trials(store, trials, config.eval.enroll_mode)};
      }
    } catch (const Error& e) {
      throw StageError(kExitDataResolution, sys.name + ": " + e.what());
    }
    for (const ConditionSpec& c : conditions) {
      detail::write_text(layout.scores(safe_name(sys.name), c.name), format_scores(s.conditions.at(c.name)));
    }
    detail::write_text(layout.projection(safe_name(sys.name)), projection_csv(eval_utts, store));
    scored.push_back(std::move(s));
  }

  MetricsReport report;
  try {
    report = compare_report(scored, names, config.eval.dcf, "baseline");
  } catch (const Error& e) {
    throw StageError(kExitDataResolution, e.what());
  }
  json j = report.to_json();
  j["seed"] = config.seed;
  j["config_hash"] = config.hash();
  detail::write_text(layout.reports_dir() / "metrics.json", j.dump(2) + "\n");
  detail::write_text(layout.reports_dir() / "report.txt", report.to_table());
  return report;
}

// ---------------------------------------------------------------------------
// Gradient-check sweep over every loss and the end-to-end model.
// ---------------------------------------------------------------------------

struct GradcheckSummary {
  std::map<std::string, double> max_error;  // per loss / "model"
  double threshold = 1e-4;
  std::size_t instances = 0;

  bool passed() const {
    for (const auto& [name, err] : max_error)
      if (!(err < threshold)) return false;
    return true;
  }
};

namespace detail {

inline Labels random_labels(std::size_t batch, std::size_t classes, Rng& rng) {
  Labels labels(batch);
  for (auto& l : labels) l = rng.uniform_index(classes);
  if (!has_two_labels(labels)) labels[0] = (labels[1] + 1) % classes;
  return labels;
}

// Value of one loss as a function of the differentiated student input.
using ValueFn = std::function<double(const Matrix&)>;

}  // namespace detail

// `perturb` scales every analytical gradient by (1 + perturb); a nonzero value
// is a fault-injection hook for testing the checker itself.
inline GradcheckSummary run_gradcheck(std::uint64_t seed, std::size_t instances, double perturb = 0.0,
                                      double step = 1e-5) {
  GradcheckSummary summary;
  summary.instances = instances;
  Rng rng(derive_seed(seed, "gradcheck"));
  auto record = [&](const std::string& name, const detail::ValueFn& f, const Matrix& x, Matrix analytic) {
    analytic *= 1.0 + perturb;
    const double err = grad_check(f, x, analytic, step);
    double& slot = summary.max_error[name];
    slot = std::max(slot, err);
  };

  for (std::size_t n = 0; n < instances; ++n) {
    const std::size_t b = 2 + rng.uniform_index(5);    // 2..6
    const std::size_t f = 2 + rng.uniform_index(7);    // 2..8
    const std::size_t c = 2 + rng.uniform_index(7);    // 2..8
    const Matrix t = random_normal(b, f, rng);
    const Matrix s = random_normal(b, f, rng);
    const Matrix logits = random_normal(b, c, rng, 2.0);
    const Matrix posteriors = softmax_rows(random_normal(b, c, rng, 2.0));
    const Labels labels = detail::random_labels(b, c, rng);
    // Fixed RBF bandwidth on the data's own scale. Far below the pairwise
    // distances the kernel underflows and central differences are rounding noise.
    const double bandwidth = median_bandwidth(t, s) * (0.7 + 0.8 * rng.uniform());
    const ContrastiveOptions copts{n % 2 == 1, true};
    const bool inorm = n % 2 == 1;

    record("ce", [&](const Matrix& z) { return ce_loss(z, labels).value; }, logits,
           *ce_loss(logits, labels).grad_logits);
    record("kl", [&](const Matrix& z) { return kl_ts_loss(posteriors, z).value; }, logits,
           *kl_ts_loss(posteriors, logits).grad_logits);
    record("mse", [&](const Matrix& x) { return feat_mse_loss(t, x).value; }, s, *feat_mse_loss(t, s).grad_embeddings);
    record("cosine", [&](const Matrix& x) { return feat_cosine_loss(t, x).value; }, s,
           *feat_cosine_loss(t, s).grad_embeddings);
    const MmdKernel kernel = n % 2 == 0 ? MmdKernel::linear() : MmdKernel::rbf(bandwidth);
    record("mmd", [&](const Matrix& x) { return feat_mmd_loss(t, x, kernel).value; }, s,
           *feat_mmd_loss(t, s, kernel).grad_embeddings);
    record("contrastive", [&](const Matrix& x) { return contrastive_ts_loss(t, x, labels, copts).value; }, s,
           *contrastive_ts_loss(t, s, labels, copts).grad_embeddings);
    record("instance", [&](const Matrix& x) { return instance_pairwise_loss(t, x, inorm).value; }, s,
           *instance_pairwise_loss(t, s, inorm).grad_embeddings);

    // End-to-end: loss(forward(params)) w.r.t. every student parameter.
    ExtractorConfig ec;
    ec.input_dim = 2 + rng.uniform_index(7);
    ec.hidden_dims.assign(rng.uniform_index(3), 0);
    for (auto& h : ec.hidden_dims) h = 2 + rng.uniform_index(7);
    ec.embedding_dim = 2 + rng.uniform_index(7);
    ec.num_speakers = c;
    ec.activation = Activation::tanh;
    const ModelParams teacher = init_params(ec, rng, Role::teacher);
    const ModelParams student = init_params(ec, rng, Role::student);
    StudentBatch batch{random_normal(b, ec.input_dim, rng), random_normal(b, ec.input_dim, rng), labels};

    // The training recipes. Without CE the contrastive term alone is invariant
    // to a common shift of the student embeddings, so the embedding bias has an
    // exactly-zero gradient that central differences only resolve to ~1e-12.
    static const char* recipes[] = {"CE", "CE_KL", "CE_COS", "CE_MSE", "CE_MMD", "CE_F'", "CE_I", "CE_F'_I"};
    TrainConfig tc;
    tc.loss_options.contrastive = copts;
    tc.loss_options.instance_normalize = inorm;
    tc.loss_options.mmd_kernel = kernel;
    for (const char* r : recipes) {
      tc.recipe = Recipe::parse(r);
      const ModelGrads grads = student_step(student, teacher, batch, tc).grads;
      const Vector flat = student.flatten();
      Matrix point(1, flat.size(), flat);
      Matrix analytic(1, flat.size(), grads.flatten());
      record("model", [&](const Matrix& p) {
        ModelParams probe = student;
        probe.unflatten(p.values());
        return student_step(probe, teacher, batch, tc).loss;
      }, point, analytic);
    }
  }
  return summary;
}

// ---------------------------------------------------------------------------
// End-to-end run
// ---------------------------------------------------------------------------

struct ReproduceResult {
  MetricsReport report;
  std::vector<FreezeRecord> freezes;
  double seconds = 0.0;
};

inline ReproduceResult run_reproduce(const ExperimentConfig& config,
                                     const std::function<void(const std::string&)>& progress = {}) {
  const auto start = std::chrono::steady_clock::now();
  auto note = [&](const std::string& msg) {
    if (progress) progress(msg);
  };
  ReproduceResult result;
  note("gen-data");
  run_gen_data(config);
  note("train baseline");
  run_train_baseline(config);
  note("train teacher");
  run_train_teacher(config);
  for (const std::string& r : config.recipes) {
    note("train student " + r);
    result.freezes.push_back(run_train_student(config, Recipe::parse(r)));
  }
  note("evaluate");
  result.report = run_evaluate(config, default_systems(config), default_conditions(config));
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace xfersv
