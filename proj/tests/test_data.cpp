#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

#include "xfersv/data.hpp"
#include "xfersv/eval.hpp"
#include "xfersv/train.hpp"

using namespace xfersv;

namespace {

CorpusConfig tiny_corpus(std::uint64_t seed = 3) {
  CorpusConfig c;
  c.num_train_speakers = 6;
  c.num_eval_speakers = 4;
  c.utterances_per_speaker = 5;
  c.input_dim = 7;
  c.latent_dim = 3;
  c.seed = seed;
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("xfersv_data_" + name)).string();
}

double mean_pair_cosine(const std::vector<ParallelPair>& pairs) {
  double total = 0.0;
  for (const ParallelPair& p : pairs) {
    total += dot(p.near.features, p.far.features) / (norm2(p.near.features) * norm2(p.far.features));
  }
  return total / static_cast<double>(pairs.size());
}

}  // namespace

TEST(Corpus, SameSeedIsBitIdentical) {
  const Corpus a = synth_corpus(tiny_corpus());
  const Corpus b = synth_corpus(tiny_corpus());
  EXPECT_EQ(serialize_features(flatten_pairs(a.train_pairs)), serialize_features(flatten_pairs(b.train_pairs)));
  EXPECT_EQ(serialize_features(a.eval), serialize_features(b.eval));
  const Corpus c = synth_corpus(tiny_corpus(4));
  EXPECT_NE(serialize_features(a.eval), serialize_features(c.eval));
}

TEST(Corpus, CountsSplitAndPairInvariants) {
  const CorpusConfig cfg = tiny_corpus();
  const Corpus c = synth_corpus(cfg);
  EXPECT_EQ(c.train_pairs.size(), cfg.num_train_speakers * cfg.utterances_per_speaker);
  EXPECT_EQ(c.eval.size(), 2 * cfg.num_eval_speakers * cfg.utterances_per_speaker);
  std::set<std::size_t> train_spk, eval_spk;
  std::set<std::string> ids;
  for (const ParallelPair& p : c.train_pairs) {
    EXPECT_NO_THROW(validate_pair(p));
    EXPECT_LT(p.far.channel, cfg.num_far_channels);
    EXPECT_EQ(p.near.features.size(), cfg.input_dim);
    train_spk.insert(p.near.speaker);
    ids.insert(p.near.id);
    ids.insert(p.far.id);
  }
  for (const Utterance& u : c.eval) {
    eval_spk.insert(u.speaker);
    ids.insert(u.id);
  }
  EXPECT_EQ(train_spk.size(), cfg.num_train_speakers);
  EXPECT_EQ(eval_spk.size(), cfg.num_eval_speakers);
  for (std::size_t s : eval_spk) EXPECT_EQ(train_spk.count(s), 0u);
  EXPECT_EQ(ids.size(), 2 * cfg.num_speakers() * cfg.utterances_per_speaker);
  EXPECT_EQ(pair_utterances(c.eval).size(), cfg.num_eval_speakers * cfg.utterances_per_speaker);
}

TEST(Corpus, InvalidConfigRejected) {
  CorpusConfig c = tiny_corpus();
  c.num_far_channels = 0;
  EXPECT_THROW(synth_corpus(c), ParameterError);
  c = tiny_corpus();
  c.noise_far = -0.1;
  EXPECT_THROW(synth_corpus(c), ParameterError);
  c = tiny_corpus();
  c.channel_strength = std::nan("");
  EXPECT_THROW(synth_corpus(c), ParameterError);
}

TEST(Corpus, NoChannelAndNoNoiseGivesIdenticalFeatures) {
  CorpusConfig c = tiny_corpus();
  c.channel_strength = 0.0;
  c.noise_near = c.noise_far = 0.0;
  for (const ParallelPair& p : synth_corpus(c).train_pairs) EXPECT_EQ(p.near.features, p.far.features);
}

TEST(Corpus, NoChannelWithEqualNoiseMatchesMoments) {
  CorpusConfig c;
  c.channel_strength = 0.0;
  c.noise_far = c.noise_near = 0.3;
  const Corpus corpus = synth_corpus(c);
  const double n = static_cast<double>(corpus.train_pairs.size());
  for (std::size_t j = 0; j < c.input_dim; ++j) {
    // Differences near - far are pure noise: mean 0, variance 2 sigma^2.
    double sum = 0.0, sq = 0.0;
    for (const ParallelPair& p : corpus.train_pairs) {
      const double d = p.near.features[j] - p.far.features[j];
      sum += d;
      sq += d * d;
    }
    const double var = 2.0 * 0.3 * 0.3;
    EXPECT_NEAR(sum / n, 0.0, 5.0 * std::sqrt(var / n));
    EXPECT_NEAR(sq / n, var, 5.0 * var * std::sqrt(2.0 / n));
  }
}

TEST(Corpus, PairedCosineFallsWithChannelStrength) {
  CorpusConfig c;
  c.num_train_speakers = 25;  // 1000 pairs
  double previous = 2.0;
  for (double strength : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    c.channel_strength = strength;
    const double m = mean_pair_cosine(synth_corpus(c).train_pairs);
    EXPECT_LT(m, previous) << strength;
    previous = m;
  }
}

TEST(Batch, TwoSpeakerPoolAlwaysHasBoth) {
  const Corpus c = synth_corpus(tiny_corpus());
  std::vector<ParallelPair> pool;
  for (const ParallelPair& p : c.train_pairs)
    if (p.near.speaker < 2) pool.push_back(p);
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    const PairBatch b = sample_batch(pool, 2, rng);
    EXPECT_NE(b.labels[0], b.labels[1]);
  }
}

TEST(Batch, RowsAlignedAndDistinct) {
  const Corpus c = synth_corpus(tiny_corpus());
  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const PairBatch b = sample_batch(c.train_pairs, 8, rng);
    ASSERT_EQ(b.near.rows(), 8u);
    EXPECT_EQ(std::set<std::size_t>(b.indices.begin(), b.indices.end()).size(), 8u);
    for (std::size_t r = 0; r < 8; ++r) {
      const ParallelPair& p = c.train_pairs[b.indices[r]];
      EXPECT_EQ(b.labels[r], p.near.speaker);
      EXPECT_TRUE(std::equal(p.near.features.begin(), p.near.features.end(), b.near.row(r).begin()));
      EXPECT_TRUE(std::equal(p.far.features.begin(), p.far.features.end(), b.far.row(r).begin()));
    }
  }
}

TEST(Batch, DeterministicAndCovering) {
  const Corpus c = synth_corpus(tiny_corpus());
  Rng a(13), b(13);
  std::vector<int> hits(c.train_pairs.size(), 0);
  for (int i = 0; i < 10000; ++i) {
    const PairBatch x = sample_batch(c.train_pairs, 4, a);
    ASSERT_EQ(x.indices, sample_batch(c.train_pairs, 4, b).indices);
    for (std::size_t k : x.indices) ++hits[k];
  }
  for (int h : hits) EXPECT_GT(h, 0);
}

TEST(Batch, DegenerateInputs) {
  const Corpus c = synth_corpus(tiny_corpus());
  Rng rng(17);
  EXPECT_THROW(sample_batch(c.train_pairs, 1, rng), DegenerateInputError);
  EXPECT_THROW(sample_batch(c.train_pairs, c.train_pairs.size() + 1, rng), DegenerateInputError);
  std::vector<ParallelPair> one_speaker(c.train_pairs.begin(), c.train_pairs.begin() + 5);
  EXPECT_THROW(sample_batch(one_speaker, 2, rng), DegenerateInputError);
}

TEST(FeatureFile, RoundTrip) {
  const Corpus c = synth_corpus(tiny_corpus());
  std::vector<Utterance> utts = flatten_pairs(c.train_pairs);
  utts[0].id = "s\xc3\xa9-0000-near";  // non-ASCII UTF-8 survives
  const std::string path = temp_path("roundtrip.feat");
  write_features(utts, path);
  EXPECT_EQ(read_features(path), utts);
  std::remove(path.c_str());
}

TEST(FeatureFile, EmptyListIsValid) {
  const auto bytes = serialize_features({});
  EXPECT_EQ(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "XFSV");
  EXPECT_TRUE(deserialize_features(bytes).empty());
}

TEST(FeatureFile, LayoutOfOneRecord) {
  const Utterance u{"ab", 258, Domain::far_field, 3, {1.0}};
  const auto bytes = serialize_features({u});
  const std::vector<unsigned char> expect = {'X', 'F', 'S', 'V', 1, 0, 0, 0, 1, 0, 0, 0,  // header
                                             2, 0, 'a', 'b',                              // id
                                             2, 1, 0, 0,                                  // speaker
                                             1,                                           // domain
                                             3, 0,                                        // channel
                                             1, 0, 0, 0,                                  // dim
                                             0, 0, 0, 0, 0, 0, 0xf0, 0x3f};               // 1.0
  EXPECT_EQ(bytes, expect);
}

TEST(FeatureFile, CorruptInputsRejected) {
  const Corpus c = synth_corpus(tiny_corpus());
  const auto bytes = serialize_features(c.eval);
  for (std::size_t cut : {std::size_t{2}, std::size_t{11}, std::size_t{40}, bytes.size() - 3}) {
    EXPECT_THROW(deserialize_features(std::vector<unsigned char>(bytes.begin(), bytes.begin() + cut)), FormatError);
  }
  auto bad = bytes;
  bad[1] = 'Q';
  EXPECT_THROW(deserialize_features(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(deserialize_features(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(deserialize_features(bad), FormatError);
  EXPECT_THROW(read_features(temp_path("missing.feat")), LookupError);
}

TEST(Trials, CountsLabelsAndDomains) {
  const Corpus c = synth_corpus(tiny_corpus());
  std::map<std::string, const Utterance*> by_id;
  for (const Utterance& u : c.eval) by_id[u.id] = &u;
  Rng rng(19);
  const TrialSets sets = make_trials(c.eval, 10, 10, rng);
  auto check = [&](const TrialList& list, Domain enroll, Domain test) {
    std::size_t targets = 0;
    std::set<std::pair<std::string, std::string>> unique;
    for (const Trial& t : list) {
      const Utterance& e = *by_id.at(t.enroll_id);
      const Utterance& x = *by_id.at(t.test_id);
      EXPECT_EQ(e.domain, enroll);
      EXPECT_EQ(x.domain, test);
      EXPECT_NE(t.enroll_id, t.test_id);
      EXPECT_NE(detail::content_key(e), detail::content_key(x));
      EXPECT_EQ(e.speaker == x.speaker, t.is_target);
      targets += t.is_target;
      unique.emplace(t.enroll_id, t.test_id);
    }
    EXPECT_EQ(targets, 10u);
    EXPECT_EQ(list.size(), 20u);
    EXPECT_EQ(unique.size(), list.size());
  };
  check(sets.mismatched, Domain::near_field, Domain::far_field);
  check(sets.near_near, Domain::near_field, Domain::near_field);
  check(sets.far_far, Domain::far_field, Domain::far_field);
}

TEST(Trials, Deterministic) {
  const Corpus c = synth_corpus(tiny_corpus());
  Rng a(23), b(23);
  const TrialSets x = make_trials(c.eval, 15, 15, a);
  const TrialSets y = make_trials(c.eval, 15, 15, b);
  EXPECT_EQ(x.mismatched, y.mismatched);
  EXPECT_EQ(x.near_near, y.near_near);
  EXPECT_EQ(x.far_far, y.far_far);
}

TEST(Trials, InsufficientUtterances) {
  const Corpus c = synth_corpus(tiny_corpus());
  Rng rng(29);
  // 4 speakers x 5 utterances: at most 4 * 5 * 4 distinct-content target pairs.
  EXPECT_THROW(make_trials(c.eval, 81, 1, rng), ParameterError);
  std::vector<Utterance> one;
  for (const Utterance& u : c.eval)
    if (u.speaker == c.eval.front().speaker) one.push_back(u);
  EXPECT_THROW(make_trials(one, 1, 1, rng), ParameterError);
}

TEST(Trials, TextRoundTripAndErrors) {
  const Corpus c = synth_corpus(tiny_corpus());
  Rng rng(31);
  const TrialList list = make_trials(c.eval, 5, 5, rng).mismatched;
  std::istringstream in(format_trials(list));
  EXPECT_EQ(parse_trials(in, "mem"), list);
  std::istringstream bad("a b maybe\n");
  EXPECT_THROW(parse_trials(bad, "mem"), FormatError);
  std::istringstream extra("a b target x\n");
  EXPECT_THROW(parse_trials(extra, "mem"), FormatError);
}

// Without a channel and with equal noise, a near-field model sees no domain
// gap: matched and mismatched EER agree within 2 points on average.
TEST(NullMismatch, MatchedAndMismatchedEerAgree) {
  double diff_sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    CorpusConfig cc;
    cc.channel_strength = 0.0;
    cc.noise_far = cc.noise_near;
    cc.seed = seed;
    const Corpus corpus = synth_corpus(cc);
    ExtractorConfig ec;
    ec.input_dim = cc.input_dim;
    ec.num_speakers = cc.num_train_speakers;
    Rng init_rng(seed + 100);
    TrainConfig tc;
    tc.epochs = 10;
    tc.seed = seed;
    const ModelParams model = train_teacher(corpus.train_pairs, init_params(ec, init_rng), tc).params;
    const EmbeddingStore store = extract_embeddings(model, corpus.eval);
    Rng trial_rng(seed + 200);
    const TrialSets sets = make_trials(corpus.eval, 2000, 2000, trial_rng);
    auto eer_of = [&](const TrialList& t) { return eer(ScoreSet{t, score_trials(store, t)}).eer; };
    const double matched = eer_of(sets.near_near);
    const double mismatched = eer_of(sets.mismatched);
    EXPECT_LT(std::abs(mismatched - matched), 0.04) << "seed " << seed;
    diff_sum += mismatched - matched;
  }
  EXPECT_LE(std::abs(diff_sum / 5.0), 0.02);
}
