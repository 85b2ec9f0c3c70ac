#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "xfersv/eval.hpp"
#include "xfersv/train.hpp"

using namespace xfersv;

namespace {

const char* kAllRecipes[] = {"CE",    "KL",     "COS",    "MSE",    "MMD",   "F'",   "I",      "F'_I",
                             "CE_KL", "CE_COS", "CE_MSE", "CE_MMD", "CE_F'", "CE_I", "CE_F'_I"};

struct Toy {
  Corpus corpus;
  ExtractorConfig model;
};

Toy toy(std::uint64_t seed = 5, std::size_t speakers = 8) {
  CorpusConfig cc;
  cc.num_train_speakers = speakers;
  cc.num_eval_speakers = 4;
  cc.utterances_per_speaker = 20;
  cc.content_std = 0.2;
  cc.seed = seed;
  ExtractorConfig ec;
  ec.input_dim = cc.input_dim;
  ec.hidden_dims = {16};
  ec.embedding_dim = 8;
  ec.num_speakers = speakers;
  return {synth_corpus(cc), ec};
}

ModelParams fresh(const ExtractorConfig& ec, std::uint64_t seed) {
  Rng rng(seed);
  return init_params(ec, rng);
}

TrainConfig short_config(std::size_t epochs = 3) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 16;
  tc.seed = 9;
  return tc;
}

double train_accuracy(const ModelParams& p, const std::vector<ParallelPair>& pairs) {
  std::vector<const Utterance*> rows;
  for (const ParallelPair& q : pairs) {
    rows.push_back(&q.near);
    rows.push_back(&q.far);
  }
  const Matrix logits = forward(p, stack_features(rows)).logits;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto row = logits.row(i);
    correct += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == rows[i]->speaker;
  }
  return static_cast<double>(correct) / static_cast<double>(rows.size());
}

double trials_eer(const ModelParams& p, const std::vector<Utterance>& eval, const TrialList& trials) {
  const EmbeddingStore store = extract_embeddings(p, eval);
  return eer(ScoreSet{trials, score_trials(store, trials)}).eer;
}

}  // namespace

TEST(LearningRate, Examples) {
  TrainConfig c;
  EXPECT_EQ(lr_at_epoch(c, 0), 0.01);
  EXPECT_EQ(lr_at_epoch(c, 1), 0.01);
  EXPECT_NEAR(lr_at_epoch(c, 2), 0.009, 1e-15);
  EXPECT_NEAR(lr_at_epoch(c, 5), 0.01 * 0.81, 1e-15);
  c.lr_decay_factor = 1.0;
  for (std::size_t e = 0; e < 100; ++e) EXPECT_EQ(lr_at_epoch(c, e), 0.01);
}

TEST(LearningRate, NonIncreasingAndPositive) {
  for (LrSchedule schedule : {LrSchedule::multiplicative, LrSchedule::subtractive}) {
    for (double factor : {0.3, 0.5, 0.9, 0.95, 1.0}) {
      TrainConfig c;
      c.schedule = schedule;
      c.lr_decay_factor = factor;
      c.lr_decay_every = 3;
      double previous = lr_at_epoch(c, 0);
      for (std::size_t e = 1; e < 200; ++e) {
        const double lr = lr_at_epoch(c, e);
        EXPECT_LE(lr, previous);
        EXPECT_GT(lr, 0.0);
        previous = lr;
      }
    }
  }
}

TEST(LearningRate, SubtractiveReading) {
  TrainConfig c;
  c.schedule = LrSchedule::subtractive;
  EXPECT_NEAR(lr_at_epoch(c, 2), 0.009, 1e-15);
  EXPECT_NEAR(lr_at_epoch(c, 4), 0.008, 1e-15);
  EXPECT_NEAR(lr_at_epoch(c, 18), 0.001, 1e-15);
  EXPECT_NEAR(lr_at_epoch(c, 20), 0.001, 1e-15);  // held at the last positive value
  EXPECT_NEAR(lr_at_epoch(c, 400), 0.001, 1e-15);
}

TEST(Config, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_init = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_decay_factor = 1.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_decay_factor = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Sgd, Examples) {
  const Toy t = toy();
  const ModelParams p = fresh(t.model, 1);

  ModelParams q = p;
  sgd_step(q, p.zeros_like(), 0.5);
  EXPECT_EQ(q, p);

  q = p;
  sgd_step(q, p, 1.0);
  for (double v : q.flatten()) EXPECT_EQ(v, 0.0);

  const ModelParams g = fresh(t.model, 2);
  ModelParams once = p, twice = p;
  sgd_step(once, g, 0.25);
  sgd_step(twice, g, 0.125);
  sgd_step(twice, g, 0.125);
  const Vector a = once.flatten(), b = twice.flatten();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-15);

  EXPECT_THROW(sgd_step(q, g, 0.0), ParameterError);
  ExtractorConfig other = t.model;
  other.hidden_dims = {15};
  EXPECT_THROW(sgd_step(q, fresh(other, 3), 0.1), ShapeError);
}

TEST(Baseline, LossFallsAndBeatsChance) {
  const Toy t = toy();
  const TrainResult r = train_baseline(t.corpus.train_pairs, fresh(t.model, 4), short_config(5));
  ASSERT_EQ(r.log.epochs.size(), 5u);
  EXPECT_LT(r.log.epochs.back().loss, r.log.epochs.front().loss);
  EXPECT_GT(train_accuracy(r.params, t.corpus.train_pairs), 1.0 / static_cast<double>(t.model.num_speakers));
  EXPECT_EQ(r.params.role, Role::baseline);
}

TEST(Baseline, Deterministic) {
  const Toy t = toy();
  const TrainResult a = train_baseline(t.corpus.train_pairs, fresh(t.model, 4), short_config());
  const TrainResult b = train_baseline(t.corpus.train_pairs, fresh(t.model, 4), short_config());
  EXPECT_EQ(params_hash(a.params), params_hash(b.params));
  EXPECT_EQ(a.log.to_jsonl(), b.log.to_jsonl());
}

TEST(Baseline, DegenerateCorpus) {
  const Toy t = toy();
  EXPECT_THROW(train_baseline({}, fresh(t.model, 4), short_config()), ParameterError);
  std::vector<ParallelPair> one(t.corpus.train_pairs.begin(), t.corpus.train_pairs.begin() + 3);
  EXPECT_THROW(train_baseline(one, fresh(t.model, 4), short_config()), ParameterError);
}

TEST(Teacher, NeverReadsFarFieldRows) {
  Toy t = toy();
  for (ParallelPair& p : t.corpus.train_pairs)
    for (double& v : p.far.features) v = std::numeric_limits<double>::quiet_NaN();
  const TrainResult r = train_teacher(t.corpus.train_pairs, fresh(t.model, 6), short_config());
  EXPECT_TRUE(r.params.all_finite());
  EXPECT_EQ(r.params.role, Role::teacher);
  // The baseline does read them.
  EXPECT_THROW(train_baseline(t.corpus.train_pairs, fresh(t.model, 6), short_config()), NumericError);
}

TEST(Teacher, MatchedEerBelowBaselineMismatched) {
  CorpusConfig cc;
  cc.seed = 2;
  const Corpus corpus = synth_corpus(cc);
  ExtractorConfig ec;
  ec.input_dim = cc.input_dim;
  ec.num_speakers = cc.num_train_speakers;
  TrainConfig tc;
  tc.epochs = 15;
  const ModelParams baseline = train_baseline(corpus.train_pairs, fresh(ec, 8), tc).params;
  const TrainResult teacher = train_teacher(corpus.train_pairs, baseline, tc);
  const TrainResult teacher2 = train_teacher(corpus.train_pairs, baseline, tc);
  EXPECT_EQ(params_hash(teacher.params), params_hash(teacher2.params));
  Rng rng(3);
  const TrialSets sets = make_trials(corpus.eval, 2000, 2000, rng);
  EXPECT_LT(trials_eer(teacher.params, corpus.eval, sets.near_near),
            trials_eer(baseline, corpus.eval, sets.mismatched));
}

TEST(Student, TeacherFrozen) {
  const Toy t = toy();
  const ModelParams teacher = train_teacher(t.corpus.train_pairs, fresh(t.model, 10), short_config()).params;
  const ModelParams copy = teacher;
  const auto bytes = serialize_checkpoint(teacher);
  for (const char* r : {"CE_F'_I", "KL", "MMD"}) {
    TrainConfig tc = short_config(2);
    tc.recipe = Recipe::parse(r);
    const StudentResult s = train_student(teacher, fresh(t.model, 11), t.corpus.train_pairs, tc);
    EXPECT_EQ(s.teacher_hash_before, s.teacher_hash_after);
    EXPECT_EQ(s.teacher_hash_before, params_hash(copy));
    EXPECT_EQ(serialize_checkpoint(teacher), bytes);
    EXPECT_EQ(s.params.role, Role::student);
  }
}

TEST(Student, CeRecipeReproducesBaselineUpdates) {
  const Toy t = toy();
  const ModelParams init = fresh(t.model, 12);
  TrainConfig tc = short_config(3);
  tc.recipe = Recipe::parse("CE");
  tc.weights.lambda1 = tc.weights.lambda2 = 0.0;
  const StudentResult s = train_student(fresh(t.model, 13), init, t.corpus.train_pairs, tc);

  // Plain CE steps on the same [far; near] batches.
  ModelParams p = init;
  Labels labels;
  for (const ParallelPair& q : t.corpus.train_pairs) labels.push_back(q.near.speaker);
  Rng rng(tc.seed);
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    for (const auto& idx : detail::epoch_batches(labels, tc.batch_size, rng)) {
      const PairBatch pb = gather_pairs(t.corpus.train_pairs, idx);
      Matrix x(2 * idx.size(), pb.far.cols());
      Labels y = pb.labels;
      y.insert(y.end(), pb.labels.begin(), pb.labels.end());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(pb.far.row(i).begin(), pb.far.row(i).end(), x.row(i).begin());
        std::copy(pb.near.row(i).begin(), pb.near.row(i).end(), x.row(idx.size() + i).begin());
      }
      sgd_step(p, ce_step(p, x, y).grads, lr_at_epoch(tc, epoch));
    }
  }
  p.role = Role::student;
  EXPECT_EQ(s.params, p);
}

TEST(Student, BatchLayout) {
  const Toy t = toy();
  const PairBatch pb = gather_pairs(t.corpus.train_pairs, {0, 5, 30});
  const StudentBatch far = student_batch(pb, StudentInput::far_only);
  EXPECT_EQ(far.teacher_features, pb.near);
  EXPECT_EQ(far.student_features, pb.far);
  const StudentBatch both = student_batch(pb, StudentInput::near_and_far);
  ASSERT_EQ(both.student_features.rows(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(std::equal(pb.far.row(i).begin(), pb.far.row(i).end(), both.student_features.row(i).begin()));
    EXPECT_TRUE(std::equal(pb.near.row(i).begin(), pb.near.row(i).end(), both.student_features.row(3 + i).begin()));
    EXPECT_TRUE(std::equal(pb.near.row(i).begin(), pb.near.row(i).end(), both.teacher_features.row(i).begin()));
    EXPECT_TRUE(std::equal(pb.near.row(i).begin(), pb.near.row(i).end(), both.teacher_features.row(3 + i).begin()));
    EXPECT_EQ(both.labels[i], both.labels[3 + i]);
  }
}

TEST(Student, OneStepDecreasesBatchLossForEveryRecipe) {
  const Toy t = toy();
  const ModelParams teacher = train_teacher(t.corpus.train_pairs, fresh(t.model, 14), short_config()).params;
  const ModelParams student = fresh(t.model, 15);
  Rng rng(16);
  for (int trial = 0; trial < 6; ++trial) {
    const StudentBatch batch = student_batch(sample_batch(t.corpus.train_pairs, 16, rng), StudentInput::near_and_far);
    for (const char* r : kAllRecipes) {
      TrainConfig tc;
      tc.recipe = Recipe::parse(r);
      tc.loss_options.instance_normalize = trial % 2 == 1;
      const StepResult before = student_step(student, teacher, batch, tc);
      bool decreased = false;
      for (double lr : {1e-3, 1e-4}) {
        ModelParams p = student;
        sgd_step(p, before.grads, lr);
        decreased |= student_step(p, teacher, batch, tc).loss < before.loss;
      }
      EXPECT_TRUE(decreased) << r;
    }
  }
}

TEST(Student, DeterministicLogAndCheckpoint) {
  const Toy t = toy();
  const ModelParams teacher = train_teacher(t.corpus.train_pairs, fresh(t.model, 17), short_config()).params;
  TrainConfig tc = short_config(3);
  tc.recipe = Recipe::parse("CE_F'_I");
  const StudentResult a = train_student(teacher, fresh(t.model, 18), t.corpus.train_pairs, tc);
  const StudentResult b = train_student(teacher, fresh(t.model, 18), t.corpus.train_pairs, tc);
  EXPECT_EQ(a.log.to_jsonl(), b.log.to_jsonl());
  EXPECT_EQ(serialize_checkpoint(a.params), serialize_checkpoint(b.params));
}

TEST(Student, LogHasOneFiniteRecordPerEpoch) {
  const Toy t = toy();
  TrainConfig tc = short_config(4);
  tc.recipe = Recipe::parse("CE_F'_I");
  const StudentResult s = train_student(fresh(t.model, 19), fresh(t.model, 20), t.corpus.train_pairs, tc);
  ASSERT_EQ(s.log.epochs.size(), 4u);
  for (std::size_t e = 0; e < 4; ++e) {
    const EpochRecord& r = s.log.epochs[e];
    EXPECT_EQ(r.epoch, e);
    EXPECT_EQ(r.lr, lr_at_epoch(tc, e));
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_GT(r.batches, 0u);
    EXPECT_EQ(r.components.count("CE"), 1u);
    EXPECT_EQ(r.components.count("F'"), 1u);
    EXPECT_EQ(r.components.count("I"), 1u);
    for (const auto& [k, v] : r.components) EXPECT_TRUE(std::isfinite(v)) << k;
  }
  const std::string jsonl = s.log.to_jsonl();
  EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'), 4);
  EXPECT_EQ(jsonl.find("wall_seconds"), std::string::npos);
  EXPECT_NE(s.log.to_jsonl(true).find("wall_seconds"), std::string::npos);
}

TEST(Student, IncompatibleModelsRejected) {
  const Toy t = toy();
  ExtractorConfig other = t.model;
  other.embedding_dim = 5;
  EXPECT_THROW(train_student(fresh(other, 21), fresh(t.model, 22), t.corpus.train_pairs, short_config()),
               ConfigError);
}
