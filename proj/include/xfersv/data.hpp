#pragma once

// Synthetic parallel near-field / far-field corpus, feature and trial file
// I/O, and batch sampling.
//
// Each speaker has a latent identity vector; each utterance adds a content
// perturbation. A near-field recording is P * (identity + content) plus light
// noise. Its parallel far-field recording passes the same clean signal through
// one of several fixed channel distortions (I + strength * H_c) and adds
// heavier noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xfersv/errors.hpp"
#include "xfersv/losses.hpp"
#include "xfersv/model.hpp"
#include "xfersv/numerics.hpp"

namespace xfersv {

enum class Domain : std::uint8_t { near_field = 0, far_field = 1 };

inline const char* to_string(Domain d) { return d == Domain::near_field ? "near" : "far"; }

struct Utterance {
  std::string id;
  std::size_t speaker = 0;
  Domain domain = Domain::near_field;
  std::uint16_t channel = 0;
  Vector features;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

struct ParallelPair {
  Utterance near;
  Utterance far;
};

inline void validate_pair(const ParallelPair& p) {
  if (p.near.speaker != p.far.speaker) throw ParameterError("pair '" + p.near.id + "': speaker mismatch");
  if (p.near.domain != Domain::near_field || p.far.domain != Domain::far_field) {
    throw ParameterError("pair '" + p.near.id + "': domain tags out of order");
  }
  if (p.near.channel != 0) throw ParameterError("pair '" + p.near.id + "': near-field channel must be 0");
}

struct CorpusConfig {
  std::size_t num_train_speakers = 50;
  std::size_t num_eval_speakers = 20;
  std::size_t utterances_per_speaker = 40;
  std::size_t latent_dim = 8;
  std::size_t input_dim = 24;
  std::size_t num_far_channels = 4;
  double channel_strength = 0.6;
  double content_std = 0.5;
  double noise_near = 0.05;
  double noise_far = 0.3;
  std::uint64_t seed = 1;

  std::size_t num_speakers() const { return num_train_speakers + num_eval_speakers; }

  void validate() const {
    if (num_train_speakers < 1 || num_eval_speakers < 1 || utterances_per_speaker < 1 ||
        latent_dim < 1 || input_dim < 1 || num_far_channels < 1) {
      throw ParameterError("corpus counts must be >= 1");
    }
    if (num_far_channels > 0xFFFF) throw ParameterError("too many far-field channels");
    if (!std::isfinite(channel_strength)) throw ParameterError("channel_strength must be finite");
    for (double s : {content_std, noise_near, noise_far}) {
      if (!std::isfinite(s) || s < 0.0) throw ParameterError("corpus std devs must be finite and >= 0");
    }
  }
};

struct Corpus {
  std::vector<ParallelPair> train_pairs;  // speakers [0, num_train_speakers)
  std::vector<Utterance> eval;            // near and far recordings of the eval speakers
};

inline std::string utterance_stem(std::size_t speaker, std::size_t index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "s%04zu-u%04zu", speaker, index);
  return buf;
}

inline Corpus synth_corpus(const CorpusConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t in = config.input_dim;
  const std::size_t lat = config.latent_dim;

  const Matrix projection = random_normal(in, lat, rng);
  std::vector<Matrix> channels;
  for (std::size_t c = 0; c < config.num_far_channels; ++c) {
    Matrix h = random_normal(in, in, rng, 1.0 / std::sqrt(static_cast<double>(in)));
    h *= config.channel_strength;
    for (std::size_t i = 0; i < in; ++i) h(i, i) += 1.0;
    channels.push_back(std::move(h));
  }

  Corpus corpus;
  for (std::size_t spk = 0; spk < config.num_speakers(); ++spk) {
    Vector identity(lat);
    for (double& v : identity) v = rng.normal();
    for (std::size_t u = 0; u < config.utterances_per_speaker; ++u) {
      Vector latent = identity;
      for (double& v : latent) v += rng.normal(0.0, config.content_std);
      Vector clean(in, 0.0);
      for (std::size_t i = 0; i < in; ++i)
        for (std::size_t j = 0; j < lat; ++j) clean[i] += projection(i, j) * latent[j];

      const std::size_t channel = rng.uniform_index(config.num_far_channels);
      const Matrix& h = channels[channel];
      ParallelPair pair;
      const std::string stem = utterance_stem(spk, u);
      pair.near = {stem + "-near", spk, Domain::near_field, 0, Vector(in)};
      pair.far = {stem + "-far", spk, Domain::far_field, static_cast<std::uint16_t>(channel), Vector(in)};
      for (std::size_t i = 0; i < in; ++i) {
        pair.near.features[i] = clean[i] + rng.normal(0.0, config.noise_near);
        double distorted = 0.0;
        for (std::size_t j = 0; j < in; ++j) distorted += h(i, j) * clean[j];
        pair.far.features[i] = distorted + rng.normal(0.0, config.noise_far);
      }
      validate_pair(pair);
      if (spk < config.num_train_speakers) {
        corpus.train_pairs.push_back(std::move(pair));
      } else {
        corpus.eval.push_back(std::move(pair.near));
        corpus.eval.push_back(std::move(pair.far));
      }
    }
  }
  return corpus;
}

// Rebuilds parallel pairs from a flat utterance list by matching id stems
// ("<stem>-near" with "<stem>-far").
inline std::vector<ParallelPair> pair_utterances(const std::vector<Utterance>& utts) {
  std::map<std::string, std::pair<const Utterance*, const Utterance*>> by_stem;
  for (const Utterance& u : utts) {
    const std::string suffix = u.domain == Domain::near_field ? "-near" : "-far";
    if (u.id.size() <= suffix.size() || u.id.compare(u.id.size() - suffix.size(), suffix.size(), suffix) != 0) {
      throw FormatError("utterance '" + u.id + "' does not end in '" + suffix + "'");
    }
    auto& slot = by_stem[u.id.substr(0, u.id.size() - suffix.size())];
    (u.domain == Domain::near_field ? slot.first : slot.second) = &u;
  }
  std::vector<ParallelPair> pairs;
  for (const auto& [stem, slot] : by_stem) {
    if (slot.first == nullptr || slot.second == nullptr) {
      throw FormatError("utterance stem '" + stem + "' lacks a near/far partner");
    }
    ParallelPair p{*slot.first, *slot.second};
    validate_pair(p);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline std::vector<Utterance> flatten_pairs(const std::vector<ParallelPair>& pairs) {
  std::vector<Utterance> out;
  out.reserve(2 * pairs.size());
  for (const ParallelPair& p : pairs) {
    out.push_back(p.near);
    out.push_back(p.far);
  }
  return out;
}

inline Matrix stack_features(const std::vector<const Utterance*>& utts) {
  if (utts.empty()) return {};
  Matrix m(utts.size(), utts.front()->features.size());
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (utts[i]->features.size() != m.cols()) throw ShapeError("stack_features: ragged feature dims");
    std::copy(utts[i]->features.begin(), utts[i]->features.end(), m.row(i).begin());
  }
  return m;
}

struct PairBatch {
  Matrix near;  // B x input_dim, teacher side
  Matrix far;   // B x input_dim, student side
  Labels labels;
  std::vector<std::size_t> indices;  // positions in the pair pool
};

inline PairBatch gather_pairs(const std::vector<ParallelPair>& pairs,
                              const std::vector<std::size_t>& indices) {
  std::vector<const Utterance*> near, far;
  PairBatch b;
  for (std::size_t idx : indices) {
    near.push_back(&pairs[idx].near);
    far.push_back(&pairs[idx].far);
    b.labels.push_back(pairs[idx].near.speaker);
  }
  b.near = stack_features(near);
  b.far = stack_features(far);
  b.indices = indices;
  return b;
}

// Uniform draw of B distinct pairs containing at least two speakers.
inline PairBatch sample_batch(const std::vector<ParallelPair>& pairs, std::size_t batch_size, Rng& rng,
                              int max_retries = 1000) {
  if (batch_size < 2) throw DegenerateInputError("sample_batch: batch size must be >= 2");
  if (pairs.size() < batch_size) throw DegenerateInputError("sample_batch: pool smaller than batch");
  std::set<std::size_t> speakers;
  for (const ParallelPair& p : pairs) speakers.insert(p.near.speaker);
  if (speakers.size() < 2) throw DegenerateInputError("sample_batch: pool has a single speaker");

  std::vector<std::size_t> pool(pairs.size());
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    // Partial Fisher-Yates: the first batch_size slots are a uniform sample.
    for (std::size_t i = 0; i < batch_size; ++i) {
      std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
    }
    std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(batch_size));
    for (std::size_t k = 1; k < chosen.size(); ++k) {
      if (pairs[chosen[k]].near.speaker != pairs[chosen[0]].near.speaker) return gather_pairs(pairs, chosen);
    }
  }
  throw DegenerateInputError("sample_batch: no two-speaker batch after bounded retries");
}

// ---------------------------------------------------------------------------
// Feature file (little-endian):
//   magic "XFSV" | u32 version | u32 record count
//   per record: u16 id length | id bytes (UTF-8) | u32 speaker | u8 domain
//               u16 channel | u32 dim | dim x f64
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline std::vector<unsigned char> serialize_features(const std::vector<Utterance>& utts) {
  io::ByteWriter w;
  w.raw("XFSV");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(utts.size()));
  for (const Utterance& u : utts) {
    if (u.id.size() > 0xFFFF) throw FormatError("feature file: id too long");
    w.u16(static_cast<std::uint16_t>(u.id.size()));
    w.raw(u.id);
    w.u32(static_cast<std::uint32_t>(u.speaker));
    w.u8(static_cast<std::uint8_t>(u.domain));
    w.u16(u.channel);
    w.u32(static_cast<std::uint32_t>(u.features.size()));
    for (double v : u.features) w.f64(v);
  }
  return w.bytes();
}

inline std::vector<Utterance> deserialize_features(const std::vector<unsigned char>& bytes) {
  io::ByteReader r(bytes, "feature file");
  if (r.raw(4) != "XFSV") throw FormatError("feature file: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kFeatureFileVersion) {
    throw FormatError("feature file: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::vector<Utterance> utts;
  for (std::uint32_t k = 0; k < count; ++k) {
    Utterance u;
    u.id = r.raw(r.u16());
    u.speaker = r.u32();
    const std::uint8_t domain = r.u8();
    if (domain > 1) throw FormatError("feature file: bad domain tag for '" + u.id + "'");
    u.domain = static_cast<Domain>(domain);
    u.channel = r.u16();
    const std::uint32_t dim = r.u32();
    if (dim > r.remaining() / 8) throw FormatError("feature file: truncated record '" + u.id + "'");
    u.features.resize(dim);
    for (double& v : u.features) v = r.f64();
    utts.push_back(std::move(u));
  }
  if (!r.at_end()) throw FormatError("feature file: record count does not match length");
  return utts;
}

inline void write_features(const std::vector<Utterance>& utts, const std::string& path) {
  io::write_file(path, serialize_features(utts));
}

inline std::vector<Utterance> read_features(const std::string& path) {
  return deserialize_features(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------------

struct Trial {
  std::string enroll_id;
  std::string test_id;
  bool is_target = false;

  friend bool operator==(const Trial&, const Trial&) = default;
};

using TrialList = std::vector<Trial>;

struct TrialSets {
  TrialList mismatched;  // near-field enroll, far-field test
  TrialList near_near;
  TrialList far_far;
};

namespace detail {

// Utterance index within a speaker, parsed from "sSSSS-uUUUU-...". Recordings
// sharing it are parallel copies of the same content.
inline std::string content_key(const Utterance& u) {
  const auto dash = u.id.rfind('-');
  return dash == std::string::npos ? u.id : u.id.substr(0, dash);
}

inline TrialList draw_trials(const std::map<std::size_t, std::vector<const Utterance*>>& enroll_pool,
                             const std::map<std::size_t, std::vector<const Utterance*>>& test_pool,
                             std::size_t num_target, std::size_t num_nontarget, Rng& rng,
                             const char* what) {
  std::vector<std::size_t> speakers;
  for (const auto& [spk, list] : enroll_pool)
    if (test_pool.count(spk) != 0) speakers.push_back(spk);
  if (speakers.size() < 2) {
    throw ParameterError(std::string("make_trials(") + what + "): need near and far recordings of >= 2 speakers");
  }

  TrialList trials;
  std::set<std::pair<std::string, std::string>> seen;
  auto draw = [&](std::size_t wanted, bool target) {
    std::size_t made = 0;
    const std::size_t budget = 100 * wanted + 1000;
    for (std::size_t attempt = 0; made < wanted; ++attempt) {
      if (attempt >= budget) {
        throw ParameterError(std::string("make_trials(") + what + "): insufficient utterances for " +
                             std::to_string(wanted) + (target ? " target" : " nontarget") + " trials");
      }
      const std::size_t ia = rng.uniform_index(speakers.size());
      std::size_t ib = ia;
      if (!target) {
        ib = rng.uniform_index(speakers.size() - 1);
        if (ib >= ia) ++ib;
      }
      const std::size_t a = speakers[ia];
      const std::size_t b = speakers[ib];
      const auto& e_list = enroll_pool.at(a);
      const auto& t_list = test_pool.at(b);
      const Utterance* e = e_list[rng.uniform_index(e_list.size())];
      const Utterance* t = t_list[rng.uniform_index(t_list.size())];
      if (content_key(*e) == content_key(*t)) continue;
      if (!seen.emplace(e->id, t->id).second) continue;
      trials.push_back({e->id, t->id, target});
      ++made;
    }
  };
  draw(num_target, true);
  draw(num_nontarget, false);
  return trials;
}

}  // namespace detail

// Enrollment and test never share content: target trials always pair two
// different utterances of one speaker. Each list holds the targets first.
inline TrialSets make_trials(const std::vector<Utterance>& eval, std::size_t num_target,
                             std::size_t num_nontarget, Rng& rng) {
  std::map<std::size_t, std::vector<const Utterance*>> near, far;
  for (const Utterance& u : eval) (u.domain == Domain::near_field ? near : far)[u.speaker].push_back(&u);
  TrialSets sets;
  sets.mismatched = detail::draw_trials(near, far, num_target, num_nontarget, rng, "mismatched");
  sets.near_near = detail::draw_trials(near, near, num_target, num_nontarget, rng, "near/near");
  sets.far_far = detail::draw_trials(far, far, num_target, num_nontarget, rng, "far/far");
  return sets;
}

inline std::string format_trials(const TrialList& trials) {
  std::string out;
  for (const Trial& t : trials) {
    out += t.enroll_id;
    out += ' ';
    out += t.test_id;
    out += t.is_target ? " target\n" : " nontarget\n";
  }
  return out;
}

inline void write_trials(const TrialList& trials, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write '" + path + "'");
  out << format_trials(trials);
}

inline TrialList parse_trials(std::istream& in, const std::string& what) {
  TrialList trials;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    Trial t;
    std::string label, extra;
    if (!(fields >> t.enroll_id >> t.test_id >> label) || (fields >> extra) ||
        (label != "target" && label != "nontarget")) {
      throw FormatError(what + ":" + std::to_string(lineno) + ": expected '<enroll> <test> target|nontarget'");
    }
    t.is_target = label == "target";
    trials.push_back(std::move(t));
  }
  return trials;
}

inline TrialList read_trials(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LookupError("cannot open '" + path + "'");
  return parse_trials(in, path);
}

}  // namespace xfersv
