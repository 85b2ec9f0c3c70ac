#pragma once

// Plain SGD with a stepped learning-rate schedule and the three training
// stages: baseline (near + far, CE), teacher (near only, CE) and student
// (frozen teacher supervising far-field inputs through a loss recipe).

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfersv/data.hpp"
#include "xfersv/errors.hpp"
#include "xfersv/losses.hpp"
#include "xfersv/model.hpp"
#include "xfersv/numerics.hpp"

namespace xfersv {

enum class LrSchedule { multiplicative, subtractive };
enum class StudentInput { far_only, near_and_far };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr_init = 0.01;
  double lr_decay_factor = 0.9;
  std::size_t lr_decay_every = 2;
  LrSchedule schedule = LrSchedule::multiplicative;
  Recipe recipe = Recipe::parse("CE");
  LossWeights weights;
  // Row-normalized Gram for the instance loss: the raw Gram term at lambda2 = 10
  // diverges at lr 0.01.
  LossOptions loss_options{1.0, MmdKernel::linear(), ContrastiveOptions{}, true};
  std::uint64_t seed = 1;
  StudentInput student_input = StudentInput::near_and_far;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    if (!(lr_init > 0.0) || !std::isfinite(lr_init)) throw ConfigError("train: lr_init must be > 0");
    if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) {
      throw ConfigError("train: lr_decay_factor must be in (0, 1]");
    }
    if (lr_decay_every < 1) throw ConfigError("train: lr_decay_every must be >= 1");
    if (recipe.empty()) throw ConfigError("train: empty loss recipe");
    weights.validate();
  }
};

// Multiplicative: lr_init * factor^k. Subtractive: lr_init * (1 - k * (1 - factor)),
// held at its last positive value once it would reach zero. k = floor(epoch / every).
inline double lr_at_epoch(const TrainConfig& config, std::size_t epoch) {
  const auto steps = static_cast<double>(epoch / config.lr_decay_every);
  if (config.schedule == LrSchedule::multiplicative) {
    return config.lr_init * std::pow(config.lr_decay_factor, steps);
  }
  const double drop = 1.0 - config.lr_decay_factor;
  if (drop == 0.0) return config.lr_init;
  // Largest k with 1 - k * drop > 0; the slack absorbs rounding in 1 - factor.
  const double last_positive = std::ceil(1.0 / drop - 1e-9) - 1.0;
  return config.lr_init * (1.0 - std::min(steps, last_positive) * drop);
}

struct OptimizerState {
  double lr = 0.01;
  std::size_t epoch = 0;
  std::size_t step = 0;
};

// p <- p - lr * g
inline void sgd_step(ModelParams& params, const ModelGrads& grads, double lr) {
  if (!(lr > 0.0)) throw ParameterError("sgd_step: lr must be > 0");
  if (params.layers.size() != grads.layers.size()) throw ShapeError("sgd_step: layer count mismatch");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Layer& p = params.layers[l];
    const Layer& g = grads.layers[l];
    if (!p.weights.same_shape(g.weights) || p.bias.size() != g.bias.size()) {
      throw ShapeError("sgd_step: shape mismatch in layer " + std::to_string(l));
    }
    p.weights.add_scaled(g.weights, -lr);
    for (std::size_t j = 0; j < p.bias.size(); ++j) p.bias[j] -= lr * g.bias[j];
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::map<std::string, double> components;
  std::size_t batches = 0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::string stage;
  std::string recipe;
  std::vector<EpochRecord> epochs;

  // One JSON object per epoch. Wall time is excluded unless requested so that
  // logs of identical runs are byte-identical.
  std::string to_jsonl(bool include_timing = false) const {
    std::string out;
    for (const EpochRecord& e : epochs) {
      nlohmann::ordered_json j;
      j["stage"] = stage;
      j["recipe"] = recipe;
      j["epoch"] = e.epoch;
      j["lr"] = e.lr;
      j["batches"] = e.batches;
      j["loss"] = e.loss;
      j["components"] = e.components;
      if (include_timing) j["wall_seconds"] = e.wall_seconds;
      out += j.dump();
      out += '\n';
    }
    return out;
  }
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

struct StepResult {
  double loss = 0.0;
  std::map<std::string, double> components;
  ModelGrads grads;
};

// Cross-entropy step on a plain labeled batch.
inline StepResult ce_step(const ModelParams& params, const Matrix& features, const Labels& labels) {
  ForwardResult f = forward(params, features);
  LossOutput ce = ce_loss(f.logits, labels);
  return {ce.value, {{"CE", ce.value}}, backward(params, f.cache, std::nullopt, ce.grad_logits)};
}

struct StudentBatch {
  Matrix teacher_features;
  Matrix student_features;
  Labels labels;
};

// Far-field rows face the near-field teacher input of their pair. With
// near_and_far the near-field rows are appended and face themselves.
inline StudentBatch student_batch(const PairBatch& pairs, StudentInput input) {
  StudentBatch b;
  if (input == StudentInput::far_only) {
    b.teacher_features = pairs.near;
    b.student_features = pairs.far;
    b.labels = pairs.labels;
    return b;
  }
  const std::size_t n = pairs.labels.size();
  const std::size_t dim = pairs.near.cols();
  b.teacher_features = Matrix(2 * n, dim);
  b.student_features = Matrix(2 * n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(pairs.near.row(i).begin(), pairs.near.row(i).end(), b.teacher_features.row(i).begin());
    std::copy(pairs.near.row(i).begin(), pairs.near.row(i).end(), b.teacher_features.row(n + i).begin());
    std::copy(pairs.far.row(i).begin(), pairs.far.row(i).end(), b.student_features.row(i).begin());
    std::copy(pairs.near.row(i).begin(), pairs.near.row(i).end(), b.student_features.row(n + i).begin());
  }
  b.labels = pairs.labels;
  b.labels.insert(b.labels.end(), pairs.labels.begin(), pairs.labels.end());
  return b;
}

// Teacher is read-only; only the student receives gradients.
inline StepResult student_step(const ModelParams& student, const ModelParams& teacher,
                               const StudentBatch& batch, const TrainConfig& config) {
  const Recipe& recipe = config.recipe;
  LabeledBatch lb;
  lb.labels = batch.labels;
  ForwardResult s = forward(student, batch.student_features);
  lb.student_embeddings = std::move(s.embeddings);
  lb.student_logits = std::move(s.logits);
  if (recipe.uses_teacher()) {
    ForwardResult t = forward(teacher, batch.teacher_features);
    lb.teacher_embeddings = std::move(t.embeddings);
    if (recipe.kl) {
      Matrix scaled = t.logits;
      scaled *= 1.0 / config.loss_options.temperature;
      lb.teacher_posteriors = softmax_rows(scaled);
    }
  }
  CombinedLoss loss = combined_loss(lb, config.weights, recipe, config.loss_options);
  return {loss.total.value, std::move(loss.components),
          backward(student, s.cache, loss.total.grad_embeddings, loss.total.grad_logits)};
}

namespace detail {

inline bool has_two_speakers(const Labels& labels, const std::vector<std::size_t>& idx) {
  for (std::size_t k = 1; k < idx.size(); ++k)
    if (labels[idx[k]] != labels[idx[0]]) return true;
  return false;
}

// One shuffle-and-sweep over [0, n). The trailing partial batch is kept only
// if it holds two or more speakers.
inline std::vector<std::vector<std::size_t>> epoch_batches(const Labels& labels, std::size_t batch_size,
                                                           Rng& rng) {
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    if (idx.size() < 2 || !has_two_speakers(labels, idx)) continue;
    batches.push_back(std::move(idx));
  }
  return batches;
}

struct EpochAccumulator {
  double loss = 0.0;
  std::map<std::string, double> components;
  std::size_t batches = 0;

  void add(const StepResult& step) {
    if (!std::isfinite(step.loss)) throw NumericError("training diverged: non-finite batch loss");
    loss += step.loss;
    for (const auto& [k, v] : step.components) components[k] += v;
    ++batches;
  }

  EpochRecord finish(std::size_t epoch, double lr, double seconds) const {
    EpochRecord r{epoch, lr, 0.0, components, batches, seconds};
    if (batches == 0) throw DegenerateInputError("training epoch produced no valid batch");
    r.loss = loss / static_cast<double>(batches);
    for (auto& [k, v] : r.components) v /= static_cast<double>(batches);
    return r;
  }
};

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline TrainResult train_ce(ModelParams params, const std::vector<const Utterance*>& utts,
                            const TrainConfig& config, const char* stage) {
  config.validate();
  if (utts.empty()) throw ParameterError(std::string(stage) + ": empty training set");
  Labels labels;
  std::set<std::size_t> speakers;
  for (const Utterance* u : utts) {
    if (u->speaker >= params.config.num_speakers) {
      throw ParameterError(std::string(stage) + ": speaker label exceeds classifier size");
    }
    labels.push_back(u->speaker);
    speakers.insert(u->speaker);
  }
  if (speakers.size() < 2) throw ParameterError(std::string(stage) + ": need at least two speakers");

  Rng rng(config.seed);
  TrainResult result;
  result.log.stage = stage;
  result.log.recipe = "CE";
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(config, epoch);
    EpochAccumulator acc;
    for (const auto& idx : epoch_batches(labels, config.batch_size, rng)) {
      std::vector<const Utterance*> rows;
      Labels batch_labels;
      for (std::size_t i : idx) {
        rows.push_back(utts[i]);
        batch_labels.push_back(labels[i]);
      }
      StepResult step = ce_step(params, stack_features(rows), batch_labels);
      acc.add(step);
      sgd_step(params, step.grads, lr);
    }
    result.log.epochs.push_back(acc.finish(epoch, lr, seconds_since(start)));
  }
  result.params = std::move(params);
  return result;
}

inline void require_pairs(const std::vector<ParallelPair>& pairs, const char* stage) {
  if (pairs.empty()) throw ParameterError(std::string(stage) + ": empty corpus");
  for (const ParallelPair& p : pairs) validate_pair(p);
}

}  // namespace detail

// CE on every near-field and far-field training recording.
inline TrainResult train_baseline(const std::vector<ParallelPair>& pairs, const ModelParams& init,
                                  const TrainConfig& config) {
  detail::require_pairs(pairs, "baseline");
  std::vector<const Utterance*> utts;
  for (const ParallelPair& p : pairs) {
    utts.push_back(&p.near);
    utts.push_back(&p.far);
  }
  ModelParams params = init;
  params.role = Role::baseline;
  return detail::train_ce(std::move(params), utts, config, "baseline");
}

// CE on near-field recordings only. `init` is a fresh model or the baseline.
inline TrainResult train_teacher(const std::vector<ParallelPair>& pairs, const ModelParams& init,
                                 const TrainConfig& config) {
  detail::require_pairs(pairs, "teacher");
  std::vector<const Utterance*> utts;
  for (const ParallelPair& p : pairs) utts.push_back(&p.near);
  ModelParams params = init;
  params.role = Role::teacher;
  return detail::train_ce(std::move(params), utts, config, "teacher");
}

struct StudentResult {
  ModelParams params;
  TrainLog log;
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
};

inline StudentResult train_student(const ModelParams& teacher, const ModelParams& init,
                                   const std::vector<ParallelPair>& pairs, const TrainConfig& config) {
  config.validate();
  detail::require_pairs(pairs, "student");
  if (teacher.config.embedding_dim != init.config.embedding_dim) {
    throw ConfigError("student: teacher and student embedding dims differ");
  }
  if (teacher.config.input_dim != init.config.input_dim) {
    throw ConfigError("student: teacher and student input dims differ");
  }
  if (config.recipe.kl && teacher.config.num_speakers != init.config.num_speakers) {
    throw ConfigError("student: KL needs matching classifier sizes");
  }

  StudentResult result;
  result.teacher_hash_before = params_hash(teacher);
  ModelParams student = init;
  student.role = Role::student;

  Labels labels;
  for (const ParallelPair& p : pairs) labels.push_back(p.near.speaker);
  Rng rng(config.seed);
  result.log.stage = "student";
  result.log.recipe = config.recipe.name();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(config, epoch);
    detail::EpochAccumulator acc;
    for (const auto& idx : detail::epoch_batches(labels, config.batch_size, rng)) {
      const StudentBatch batch = student_batch(gather_pairs(pairs, idx), config.student_input);
      StepResult step = student_step(student, teacher, batch, config);
      acc.add(step);
      sgd_step(student, step.grads, lr);
    }
    result.log.epochs.push_back(acc.finish(epoch, lr, detail::seconds_since(start)));
  }
  result.teacher_hash_after = params_hash(teacher);
  result.params = std::move(student);
  return result;
}

}  // namespace xfersv
