#pragma once

// Verification back end: embedding extraction, cosine scoring, EER / minDCF /
// DET by exhaustive threshold sweep, PCA projection, and comparison reports.
//
// Threshold sweep: -inf, one threshold between each pair of adjacent distinct
// scores, +inf. A trial is accepted when score >= threshold.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfersv/data.hpp"
#include "xfersv/errors.hpp"
#include "xfersv/model.hpp"
#include "xfersv/numerics.hpp"

namespace xfersv {

using EmbeddingStore = std::map<std::string, Vector>;

inline EmbeddingStore extract_embeddings(const ModelParams& params, const std::vector<Utterance>& utts,
                                         std::size_t chunk = 256) {
  EmbeddingStore out;
  for (std::size_t start = 0; start < utts.size(); start += chunk) {
    const std::size_t end = std::min(utts.size(), start + chunk);
    std::vector<const Utterance*> rows;
    for (std::size_t i = start; i < end; ++i) rows.push_back(&utts[i]);
    const Matrix emb = forward(params, stack_features(rows)).embeddings;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out[rows[i]->id] = Vector(emb.row(i).begin(), emb.row(i).end());
    }
  }
  return out;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateInputError("cosine scoring: zero-norm embedding");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

enum class EnrollMode {
  single,   // enroll_id names one utterance
  average,  // enroll_id may join several ids with '+'; their embeddings are averaged
};

inline Vector enrollment_embedding(const EmbeddingStore& store, const std::string& enroll_id,
                                   EnrollMode mode) {
  auto lookup = [&](const std::string& id) -> const Vector& {
    auto it = store.find(id);
    if (it == store.end()) throw LookupError("no embedding for utterance '" + id + "'");
    return it->second;
  };
  if (mode == EnrollMode::single) return lookup(enroll_id);
  Vector sum;
  std::size_t count = 0;
  std::size_t start = 0;
  while (start <= enroll_id.size()) {
    const std::size_t end = std::min(enroll_id.find('+', start), enroll_id.size());
    const Vector& e = lookup(enroll_id.substr(start, end - start));
    if (sum.empty()) sum.assign(e.size(), 0.0);
    for (std::size_t j = 0; j < e.size(); ++j) sum[j] += e[j];
    ++count;
    start = end + 1;
  }
  for (double& v : sum) v /= static_cast<double>(count);
  return sum;
}

inline Vector score_trials(const EmbeddingStore& store, const TrialList& trials,
                           EnrollMode mode = EnrollMode::single) {
  Vector scores;
  scores.reserve(trials.size());
  for (const Trial& t : trials) {
    const Vector enroll = enrollment_embedding(store, t.enroll_id, mode);
    auto test = store.find(t.test_id);
    if (test == store.end()) throw LookupError("no embedding for utterance '" + t.test_id + "'");
    scores.push_back(cosine_similarity(enroll, test->second));
  }
  return scores;
}

// Scores aligned with their trials.
struct ScoreSet {
  TrialList trials;
  Vector scores;

  std::vector<bool> target_flags() const {
    std::vector<bool> f;
    for (const Trial& t : trials) f.push_back(t.is_target);
    return f;
  }
};

struct DcfParams {
  double p_target = 0.01;
  double c_miss = 1.0;
  double c_fa = 1.0;

  void validate() const {
    if (!(p_target > 0.0 && p_target < 1.0)) throw ParameterError("dcf: p_target must be in (0, 1)");
    if (!(c_miss > 0.0) || !(c_fa > 0.0) || !std::isfinite(c_miss) || !std::isfinite(c_fa)) {
      throw ParameterError("dcf: costs must be finite and > 0");
    }
  }

  double normalizer() const { return std::min(c_miss * p_target, c_fa * (1.0 - p_target)); }

  double normalized_cost(double far, double frr) const {
    return (c_miss * p_target * frr + c_fa * (1.0 - p_target) * far) / normalizer();
  }
};

struct DetPoint {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

// Candidate thresholds for the sweep, ascending.
inline Vector sweep_thresholds(const Vector& scores) {
  Vector sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  Vector thresholds{-std::numeric_limits<double>::infinity()};
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    double mid = std::midpoint(sorted[i - 1], sorted[i]);
    if (!(mid > sorted[i - 1])) mid = sorted[i];  // adjacent doubles
    thresholds.push_back(mid);
  }
  thresholds.push_back(std::numeric_limits<double>::infinity());
  return thresholds;
}

namespace detail {

inline void require_both_classes(const Vector& scores, const std::vector<bool>& is_target) {
  if (scores.size() != is_target.size()) throw ShapeError("metrics: scores and labels differ in length");
  const auto targets = std::count(is_target.begin(), is_target.end(), true);
  if (targets == 0 || targets == static_cast<std::ptrdiff_t>(is_target.size())) {
    throw ParameterError("metrics: need at least one target and one nontarget trial");
  }
  for (double s : scores)
    if (!std::isfinite(s)) throw ParameterError("metrics: non-finite score");
}

}  // namespace detail

// (FAR, FRR) at every swept threshold, computed in one pass over sorted scores.
inline std::vector<DetPoint> det_points(const Vector& scores, const std::vector<bool>& is_target) {
  detail::require_both_classes(scores, is_target);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  const auto n_target = static_cast<double>(std::count(is_target.begin(), is_target.end(), true));
  const auto n_non = static_cast<double>(is_target.size()) - n_target;

  const Vector thresholds = sweep_thresholds(scores);
  std::vector<DetPoint> points;
  points.reserve(thresholds.size());
  std::size_t pos = 0;
  std::size_t targets_below = 0;
  std::size_t nontargets_below = 0;
  for (double th : thresholds) {
    while (pos < order.size() && scores[order[pos]] < th) {
      (is_target[order[pos]] ? targets_below : nontargets_below) += 1;
      ++pos;
    }
    points.push_back({th, (n_non - static_cast<double>(nontargets_below)) / n_non,
                      static_cast<double>(targets_below) / n_target});
  }
  return points;
}

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

// Threshold minimizing |FAR - FRR|; ties go to the smaller (FAR + FRR) / 2,
// then to the lower threshold. EER = (FAR + FRR) / 2 there.
inline EerResult eer(const Vector& scores, const std::vector<bool>& is_target) {
  EerResult best;
  double best_gap = std::numeric_limits<double>::infinity();
  for (const DetPoint& p : det_points(scores, is_target)) {
    const double gap = std::abs(p.far - p.frr);
    const double rate = (p.far + p.frr) / 2.0;
    if (gap < best_gap || (gap == best_gap && rate < best.eer)) {
      best_gap = gap;
      best = {rate, p.threshold, p.far, p.frr};
    }
  }
  return best;
}

struct DcfResult {
  double min_dcf = 0.0;
  double threshold = 0.0;
};

inline DcfResult min_dcf(const Vector& scores, const std::vector<bool>& is_target,
                         const DcfParams& params = {}) {
  params.validate();
  DcfResult best{std::numeric_limits<double>::infinity(), 0.0};
  for (const DetPoint& p : det_points(scores, is_target)) {
    const double cost = params.normalized_cost(p.far, p.frr);
    if (cost < best.min_dcf) best = {cost, p.threshold};
  }
  return best;
}

inline EerResult eer(const ScoreSet& s) { return eer(s.scores, s.target_flags()); }
inline DcfResult min_dcf(const ScoreSet& s, const DcfParams& p = {}) {
  return min_dcf(s.scores, s.target_flags(), p);
}

// ---------------------------------------------------------------------------
// 2-D projection onto the top two principal directions (power iteration with
// deflation by re-orthogonalization). Signs are fixed so the largest-magnitude
// loading of each direction is positive.
// ---------------------------------------------------------------------------

inline Matrix project_2d(const Matrix& embeddings, std::size_t iterations = 500, std::uint64_t seed = 0x9ca) {
  const std::size_t n = embeddings.rows();
  const std::size_t d = embeddings.cols();
  if (n < 2 || d < 2) throw DegenerateInputError("project_2d: need >= 2 embeddings of dim >= 2");

  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += embeddings(i, j) / static_cast<double>(n);
  Matrix centered = embeddings;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) -= mean[j];
  Matrix cov = matmul_tn(centered, centered);
  cov *= 1.0 / static_cast<double>(n);

  double trace = 0.0;
  for (std::size_t j = 0; j < d; ++j) trace += cov(j, j);
  if (!(trace > 0.0)) throw DegenerateInputError("project_2d: data has rank 0");

  Rng rng(seed);
  std::vector<Vector> directions;
  auto orthonormalize = [&](Vector& v) {
    for (const Vector& u : directions) {
      const double p = dot(u, v);
      for (std::size_t j = 0; j < d; ++j) v[j] -= p * u[j];
    }
    const double nv = norm2(v);
    if (!(nv > 1e-300)) return false;
    for (double& x : v) x /= nv;
    return true;
  };
  for (std::size_t k = 0; k < 2; ++k) {
    Vector v(d);
    for (double& x : v) x = rng.normal();
    if (!orthonormalize(v)) throw NumericError("project_2d: degenerate start vector");
    for (std::size_t it = 0; it < iterations; ++it) {
      Vector w(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) w[i] += cov(i, j) * v[j];
      if (!orthonormalize(w)) break;  // remaining variance is zero; keep v
      v = std::move(w);
    }
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
    if (v[arg] < 0.0)
      for (double& x : v) x = -x;
    directions.push_back(std::move(v));
  }

  Matrix out(n, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 2; ++k) out(i, k) = dot(centered.row(i), directions[k]);

  double var0 = 0.0, var1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    var0 += out(i, 0) * out(i, 0);
    var1 += out(i, 1) * out(i, 1);
  }
  if (var1 > var0)
    for (std::size_t i = 0; i < n; ++i) std::swap(out(i, 0), out(i, 1));
  return out;
}

// CSV "id,speaker,x,y" for the given utterances.
inline std::string projection_csv(const std::vector<Utterance>& utts, const EmbeddingStore& store) {
  std::vector<const Vector*> rows;
  for (const Utterance& u : utts) {
    auto it = store.find(u.id);
    if (it == store.end()) throw LookupError("no embedding for utterance '" + u.id + "'");
    rows.push_back(&it->second);
  }
  if (rows.empty()) throw DegenerateInputError("projection_csv: no utterances");
  Matrix m(rows.size(), rows.front()->size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i]->begin(), rows[i]->end(), m.row(i).begin());
  const Matrix xy = project_2d(m);
  std::string out = "id,speaker,x,y\n";
  char buf[96];
  for (std::size_t i = 0; i < utts.size(); ++i) {
    std::snprintf(buf, sizeof buf, ",%zu,%.17g,%.17g\n", utts[i].speaker, xy(i, 0), xy(i, 1));
    out += utts[i].id;
    out += buf;
  }
  return out;
}

inline std::string format_scores(const ScoreSet& s) {
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < s.trials.size(); ++i) {
    std::snprintf(buf, sizeof buf, " %.17g\n", s.scores[i]);
    out += s.trials[i].enroll_id + ' ' + s.trials[i].test_id + buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison report: one row per system, EER / minDCF per trial condition and
// relative reductions against the system named "baseline".
// ---------------------------------------------------------------------------

struct ConditionMetrics {
  double eer = 0.0;
  double min_dcf = 0.0;
  std::size_t targets = 0;
  std::size_t nontargets = 0;
  std::optional<double> eer_reduction;  // (base - x) / base
  std::optional<double> dcf_reduction;
};

struct SystemScores {
  std::string name;
  std::map<std::string, ScoreSet> conditions;
};

struct ReportRow {
  std::string system;
  std::map<std::string, ConditionMetrics> conditions;
};

struct MetricsReport {
  DcfParams dcf;
  std::vector<std::string> conditions;
  std::vector<ReportRow> rows;
  std::string baseline_name;

  nlohmann::ordered_json to_json() const;
  std::string to_table() const;
};

inline std::optional<double> relative_reduction(double base, double value) {
  if (!(base > 0.0)) return std::nullopt;
  return (base - value) / base;
}

inline MetricsReport compare_report(const std::vector<SystemScores>& systems,
                                    const std::vector<std::string>& conditions, const DcfParams& dcf = {},
                                    const std::string& baseline_name = "baseline") {
  dcf.validate();
  if (systems.empty()) throw ParameterError("compare_report: no systems");
  MetricsReport report;
  report.dcf = dcf;
  report.conditions = conditions;
  report.baseline_name = baseline_name;

  for (const std::string& cond : conditions) {
    const TrialList* reference = nullptr;
    for (const SystemScores& sys : systems) {
      auto it = sys.conditions.find(cond);
      if (it == sys.conditions.end()) {
        throw ParameterError("compare_report: system '" + sys.name + "' lacks condition '" + cond + "'");
      }
      if (it->second.scores.size() != it->second.trials.size()) {
        throw ParameterError("compare_report: '" + sys.name + "' scores do not align with trials");
      }
      if (reference == nullptr) reference = &it->second.trials;
      else if (*reference != it->second.trials) {
        throw ParameterError("compare_report: systems scored on different '" + cond + "' trial lists");
      }
    }
  }

  for (const SystemScores& sys : systems) {
    ReportRow row{sys.name, {}};
    for (const std::string& cond : conditions) {
      const ScoreSet& s = sys.conditions.at(cond);
      ConditionMetrics m;
      m.eer = eer(s).eer;
      m.min_dcf = min_dcf(s, dcf).min_dcf;
      for (const Trial& t : s.trials) (t.is_target ? m.targets : m.nontargets) += 1;
      row.conditions[cond] = m;
    }
    report.rows.push_back(std::move(row));
  }

  const ReportRow* base = nullptr;
  for (const ReportRow& r : report.rows)
    if (r.system == baseline_name) base = &r;
  if (base != nullptr) {
    const ReportRow base_copy = *base;
    for (ReportRow& r : report.rows) {
      for (auto& [cond, m] : r.conditions) {
        const ConditionMetrics& b = base_copy.conditions.at(cond);
        m.eer_reduction = relative_reduction(b.eer, m.eer);
        m.dcf_reduction = relative_reduction(b.min_dcf, m.min_dcf);
      }
    }
  }
  return report;
}

inline nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["baseline"] = baseline_name;
  j["dcf"] = {{"p_target", dcf.p_target}, {"c_miss", dcf.c_miss}, {"c_fa", dcf.c_fa},
              {"note", "p_target is an assumed operating point"}};
  j["projection"] = "PCA (deterministic stand-in for t-SNE)";
  j["conditions"] = conditions;
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const ReportRow& r : this->rows) {
    nlohmann::ordered_json row;
    row["system"] = r.system;
    for (const std::string& cond : conditions) {
      const ConditionMetrics& m = r.conditions.at(cond);
      row[cond] = {{"eer", m.eer},
                   {"min_dcf", m.min_dcf},
                   {"eer_reduction", opt(m.eer_reduction)},
                   {"min_dcf_reduction", opt(m.dcf_reduction)},
                   {"targets", m.targets},
                   {"nontargets", m.nontargets}};
    }
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return j;
}

inline std::string MetricsReport::to_table() const {
  auto pct = [](const std::optional<double>& v) -> std::string {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * *v);
    return buf;
  };
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"system"};
  for (const std::string& c : conditions) {
    header.push_back(c + " EER(%)");
    header.push_back(c + " minDCF");
    header.push_back(c + " dEER");
    header.push_back(c + " dDCF");
  }
  cells.push_back(header);
  for (const ReportRow& r : rows) {
    std::vector<std::string> line{r.system};
    for (const std::string& c : conditions) {
      const ConditionMetrics& m = r.conditions.at(c);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * m.eer);
      line.emplace_back(buf);
      std::snprintf(buf, sizeof buf, "%.3f", m.min_dcf);
      line.emplace_back(buf);
      line.push_back(pct(m.eer_reduction));
      line.push_back(pct(m.dcf_reduction));
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t k = 0; k < line.size(); ++k) width[k] = std::max(width[k], line[k].size());

  std::string out;
  for (std::size_t li = 0; li < cells.size(); ++li) {
    for (std::size_t k = 0; k < cells[li].size(); ++k) {
      const std::string& cell = cells[li][k];
      if (k == 0) out += cell + std::string(width[k] - cell.size(), ' ');
      else out += "  " + std::string(width[k] - cell.size(), ' ') + cell;
    }
    out += '\n';
    if (li == 0) out += std::string(out.size() - 1, '-') + '\n';
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "minDCF at p_target=%g, c_miss=%g, c_fa=%g (assumed operating point); "
                "reductions relative to '%s'\n",
                dcf.p_target, dcf.c_miss, dcf.c_fa, baseline_name.c_str());
  out += buf;
  return out;
}

}  // namespace xfersv
