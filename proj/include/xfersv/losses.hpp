#pragma once

// Teacher/student transfer losses. Every loss returns its value together with
// the analytical gradient w.r.t. the student-side argument (student embeddings
// and/or student logits). Teacher-side inputs are treated as constants.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xfersv/errors.hpp"
#include "xfersv/numerics.hpp"

namespace xfersv {

using Labels = std::vector<std::size_t>;

struct LossOutput {
  double value = 0.0;
  std::optional<Matrix> grad_embeddings;
  std::optional<Matrix> grad_logits;
};

struct LabeledBatch {
  Matrix teacher_embeddings;  // B x F
  Matrix student_embeddings;  // B x F
  Matrix student_logits;      // B x C
  Matrix teacher_posteriors;  // B x C, may be empty when no posterior loss is used
  Labels labels;              // B entries in [0, C)

  std::size_t size() const { return labels.size(); }
};

struct LossWeights {
  double lambda1 = 0.1;   // contrastive (F')
  double lambda2 = 10.0;  // instance-level pairwise (I)
  double kl = 1.0;
  double cosine = 1.0;
  double mse = 1.0;
  // Linear MMD pulls the whole batch mean; at 1.0 it diverges at lr 0.01.
  double mmd = 0.1;

  void validate() const {
    for (double w : {lambda1, lambda2, kl, cosine, mse, mmd}) {
      if (!std::isfinite(w) || w < 0.0) throw ParameterError("loss weights must be finite and >= 0");
    }
  }
};

struct MmdKernel {
  enum class Kind { linear, rbf };
  Kind kind = Kind::linear;
  // RBF: k(x, y) = exp(-|x - y|^2 / (2 * bandwidth^2)). bandwidth <= 0 is
  // invalid unless use_median is set.
  double bandwidth = 1.0;
  bool use_median = false;

  static MmdKernel linear() { return {}; }
  static MmdKernel rbf(double bandwidth) { return {Kind::rbf, bandwidth, false}; }
  static MmdKernel rbf_median() { return {Kind::rbf, 0.0, true}; }
};

struct ContrastiveOptions {
  bool normalize = false;
  // Include the positive pair in the denominator (InfoNCE form). When false
  // the denominator runs over the different-label students only.
  bool include_positive = true;
};

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

inline void require_labels(const Labels& labels, std::size_t batch, std::size_t classes,
                           const char* what) {
  if (labels.size() != batch) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(batch));
  }
  for (std::size_t l : labels) {
    if (classes != 0 && l >= classes) {
      throw LabelError(std::string(what) + ": label " + std::to_string(l) + " out of range [0," +
                       std::to_string(classes) + ")");
    }
  }
}

inline bool has_two_labels(const Labels& labels) {
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] != labels[0]) return true;
  return false;
}

// Row-normalizes x; returns the normalized matrix and the row norms.
inline Matrix normalize_rows(const Matrix& x, Vector& norms, const char* what) {
  Matrix out = x;
  norms.assign(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    norms[i] = norm2(x.row(i));
    if (!(norms[i] > 0.0)) throw DegenerateInputError(std::string(what) + ": zero-norm row");
    for (double& v : out.row(i)) v /= norms[i];
  }
  return out;
}

// Pulls a gradient w.r.t. normalized rows back through x -> x / |x|.
inline Matrix normalize_rows_backward(const Matrix& normalized, const Vector& norms,
                                      const Matrix& grad_normalized) {
  Matrix out(normalized.rows(), normalized.cols());
  for (std::size_t i = 0; i < normalized.rows(); ++i) {
    const double proj = dot(normalized.row(i), grad_normalized.row(i));
    for (std::size_t j = 0; j < normalized.cols(); ++j) {
      out(i, j) = (grad_normalized(i, j) - proj * normalized(i, j)) / norms[i];
    }
  }
  return out;
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

}  // namespace detail

inline LossOutput ce_loss(const Matrix& student_logits, const Labels& labels) {
  const std::size_t batch = student_logits.rows();
  if (batch == 0) throw ShapeError("ce_loss: empty batch");
  detail::require_labels(labels, batch, student_logits.cols(), "ce_loss");
  const double inv_b = 1.0 / static_cast<double>(batch);

  LossOutput out;
  Matrix grad(batch, student_logits.cols());
  for (std::size_t i = 0; i < batch; ++i) {
    const auto row = student_logits.row(i);
    const double lse = log_sum_exp(row);
    out.value -= (row[labels[i]] - lse) * inv_b;
    for (std::size_t c = 0; c < row.size(); ++c) grad(i, c) = std::exp(row[c] - lse) * inv_b;
    grad(i, labels[i]) -= inv_b;
  }
  out.grad_logits = std::move(grad);
  return out;
}

inline LossOutput kl_ts_loss(const Matrix& teacher_posteriors, const Matrix& student_logits,
                             double temperature = 1.0) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("kl_ts_loss: temperature must be > 0");
  }
  detail::require_same_shape(teacher_posteriors, student_logits, "kl_ts_loss");
  const std::size_t batch = student_logits.rows();
  if (batch == 0) throw ShapeError("kl_ts_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch);

  LossOutput out;
  Matrix grad(batch, student_logits.cols());
  Vector scaled(student_logits.cols());
  for (std::size_t i = 0; i < batch; ++i) {
    const auto z = student_logits.row(i);
    for (std::size_t c = 0; c < z.size(); ++c) scaled[c] = z[c] / temperature;
    const double lse = log_sum_exp(scaled);
    const auto pt = teacher_posteriors.row(i);
    double mass = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
      if (pt[c] < 0.0) throw ParameterError("kl_ts_loss: negative teacher posterior");
      mass += pt[c];
      if (pt[c] == 0.0) continue;
      const double log_ps = scaled[c] - lse;
      out.value += pt[c] * (std::log(std::max(pt[c], 1e-12)) - log_ps) * inv_b;
    }
    for (std::size_t c = 0; c < z.size(); ++c) {
      grad(i, c) = (mass * std::exp(scaled[c] - lse) - pt[c]) * inv_b / temperature;
    }
  }
  out.grad_logits = std::move(grad);
  return out;
}

inline LossOutput feat_mse_loss(const Matrix& teacher, const Matrix& student) {
  detail::require_same_shape(teacher, student, "feat_mse_loss");
  if (student.empty()) throw ShapeError("feat_mse_loss: empty batch");
  const double inv_n = 1.0 / static_cast<double>(student.size());

  LossOutput out;
  Matrix grad(student.rows(), student.cols());
  for (std::size_t k = 0; k < student.size(); ++k) {
    const double d = student.values()[k] - teacher.values()[k];
    out.value += d * d * inv_n;
    grad.values()[k] = 2.0 * d * inv_n;
  }
  out.grad_embeddings = std::move(grad);
  return out;
}

inline LossOutput feat_cosine_loss(const Matrix& teacher, const Matrix& student) {
  detail::require_same_shape(teacher, student, "feat_cosine_loss");
  const std::size_t batch = student.rows();
  if (batch == 0) throw ShapeError("feat_cosine_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch);

  LossOutput out;
  Matrix grad(batch, student.cols());
  for (std::size_t i = 0; i < batch; ++i) {
    const auto t = teacher.row(i);
    const auto s = student.row(i);
    const double nt = norm2(t);
    const double ns = norm2(s);
    if (!(nt > 0.0) || !(ns > 0.0)) throw DegenerateInputError("feat_cosine_loss: zero-norm row");
    const double ts = dot(t, s);
    const double cosine = ts / (nt * ns);
    out.value += (1.0 - cosine) * inv_b;
    for (std::size_t j = 0; j < s.size(); ++j) {
      grad(i, j) = -inv_b * (t[j] / (nt * ns) - cosine * s[j] / (ns * ns));
    }
  }
  out.grad_embeddings = std::move(grad);
  return out;
}

// Median heuristic: 2 * bandwidth^2 = median squared distance over distinct
// pairs of the pooled teacher/student rows.
inline double median_bandwidth(const Matrix& teacher, const Matrix& student) {
  std::vector<const Matrix*> sources{&teacher, &student};
  std::vector<std::span<const double>> rows;
  for (const Matrix* m : sources)
    for (std::size_t i = 0; i < m->rows(); ++i) rows.push_back(m->row(i));
  std::vector<double> d2;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) d2.push_back(detail::sq_dist(rows[i], rows[j]));
  if (d2.empty()) throw DegenerateInputError("median_bandwidth: need at least two rows");
  const std::size_t mid = d2.size() / 2;
  std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid), d2.end());
  double med = d2[mid];
  if (d2.size() % 2 == 0) {
    const double lower = *std::max_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  if (!(med > 0.0)) throw DegenerateInputError("median_bandwidth: all rows coincide");
  return std::sqrt(med / 2.0);
}

// Linear kernel: |mean(t) - mean(s)|^2. RBF: biased MMD^2 estimator. A median
// bandwidth is computed from the batch and then held constant (no gradient
// flows through it).
inline LossOutput feat_mmd_loss(const Matrix& teacher, const Matrix& student,
                                MmdKernel kernel = MmdKernel::linear()) {
  if (teacher.cols() != student.cols()) throw ShapeError("feat_mmd_loss: embedding dim mismatch");
  const std::size_t nt = teacher.rows();
  const std::size_t ns = student.rows();
  if (nt == 0 || ns == 0) throw ShapeError("feat_mmd_loss: empty batch");
  const std::size_t dim = student.cols();

  LossOutput out;
  Matrix grad(ns, dim);
  if (kernel.kind == MmdKernel::Kind::linear) {
    Vector diff(dim, 0.0);  // mean(t) - mean(s)
    for (std::size_t i = 0; i < nt; ++i)
      for (std::size_t j = 0; j < dim; ++j) diff[j] += teacher(i, j) / static_cast<double>(nt);
    for (std::size_t i = 0; i < ns; ++i)
      for (std::size_t j = 0; j < dim; ++j) diff[j] -= student(i, j) / static_cast<double>(ns);
    out.value = dot(diff, diff);
    for (std::size_t i = 0; i < ns; ++i)
      for (std::size_t j = 0; j < dim; ++j) grad(i, j) = -2.0 * diff[j] / static_cast<double>(ns);
    out.grad_embeddings = std::move(grad);
    return out;
  }

  double bandwidth = kernel.bandwidth;
  if (kernel.use_median) {
    bandwidth = median_bandwidth(teacher, student);
  } else if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) {
    throw ParameterError("feat_mmd_loss: rbf bandwidth must be > 0");
  }
  const double inv_two_sigma2 = 1.0 / (2.0 * bandwidth * bandwidth);
  const double inv_sigma2 = 2.0 * inv_two_sigma2;
  auto k = [&](std::span<const double> a, std::span<const double> b) {
    return std::exp(-detail::sq_dist(a, b) * inv_two_sigma2);
  };
  const double wtt = 1.0 / static_cast<double>(nt * nt);
  const double wss = 1.0 / static_cast<double>(ns * ns);
  const double wts = 2.0 / static_cast<double>(nt * ns);

  for (std::size_t a = 0; a < nt; ++a)
    for (std::size_t b = 0; b < nt; ++b) out.value += wtt * k(teacher.row(a), teacher.row(b));
  for (std::size_t a = 0; a < ns; ++a) {
    const auto sa = student.row(a);
    for (std::size_t b = 0; b < ns; ++b) {
      const auto sb = student.row(b);
      const double kab = k(sa, sb);
      out.value += wss * kab;
      // d/ds_a of the symmetric double sum picks up the (a, b) and (b, a) terms.
      for (std::size_t j = 0; j < dim; ++j) grad(a, j) -= 2.0 * wss * kab * (sa[j] - sb[j]) * inv_sigma2;
    }
    for (std::size_t b = 0; b < nt; ++b) {
      const auto tb = teacher.row(b);
      const double kab = k(sa, tb);
      out.value -= wts * kab;
      for (std::size_t j = 0; j < dim; ++j) grad(a, j) += wts * kab * (sa[j] - tb[j]) * inv_sigma2;
    }
  }
  out.grad_embeddings = std::move(grad);
  return out;
}

// Teacher embedding i is the anchor; the student embedding at the same batch
// index is its positive and student embeddings with a different label are its
// negatives. Same-label students other than the positive are left out.
inline LossOutput contrastive_ts_loss(const Matrix& teacher, const Matrix& student,
                                      const Labels& labels, ContrastiveOptions options = {}) {
  detail::require_same_shape(teacher, student, "contrastive_ts_loss");
  const std::size_t batch = student.rows();
  detail::require_labels(labels, batch, 0, "contrastive_ts_loss");
  if (batch < 2 || !detail::has_two_labels(labels)) {
    throw DegenerateInputError("contrastive_ts_loss: batch needs at least two distinct labels");
  }
  const double inv_b = 1.0 / static_cast<double>(batch);

  Vector t_norms, s_norms;
  const Matrix t = options.normalize ? detail::normalize_rows(teacher, t_norms, "contrastive_ts_loss")
                                     : teacher;
  const Matrix s = options.normalize ? detail::normalize_rows(student, s_norms, "contrastive_ts_loss")
                                     : student;
  const Matrix logits = matmul_nt(t, s);  // (i, a) = <t_i, s_a>

  LossOutput out;
  Matrix grad(batch, s.cols());
  std::vector<std::size_t> members;
  Vector member_logits;
  for (std::size_t i = 0; i < batch; ++i) {
    members.clear();
    member_logits.clear();
    for (std::size_t a = 0; a < batch; ++a) {
      if (labels[a] != labels[i] || (a == i && options.include_positive)) {
        members.push_back(a);
        member_logits.push_back(logits(i, a));
      }
    }
    const double lse = log_sum_exp(member_logits);
    out.value += (lse - logits(i, i)) * inv_b;

    const auto ti = t.row(i);
    for (std::size_t m = 0; m < members.size(); ++m) {
      const double w = std::exp(member_logits[m] - lse) * inv_b;
      auto g = grad.row(members[m]);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += w * ti[j];
    }
    auto g = grad.row(i);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] -= inv_b * ti[j];
  }
  out.grad_embeddings = options.normalize ? detail::normalize_rows_backward(s, s_norms, grad)
                                          : std::move(grad);
  return out;
}

// Mean squared difference between the teacher and student Gram matrices. With
// normalize set, rows of both batches are L2-normalized first so the Gram
// matrices hold cosine similarities.
inline LossOutput instance_pairwise_loss(const Matrix& teacher, const Matrix& student,
                                         bool normalize = false) {
  detail::require_same_shape(teacher, student, "instance_pairwise_loss");
  const std::size_t batch = student.rows();
  if (batch == 0) throw ShapeError("instance_pairwise_loss: empty batch");
  const double inv_b2 = 1.0 / static_cast<double>(batch * batch);

  Vector t_norms, s_norms;
  const Matrix t = normalize ? detail::normalize_rows(teacher, t_norms, "instance_pairwise_loss") : teacher;
  const Matrix s = normalize ? detail::normalize_rows(student, s_norms, "instance_pairwise_loss") : student;
  Matrix diff = gram(s);
  diff.add_scaled(gram(t), -1.0);
  LossOutput out;
  for (double d : diff.values()) out.value += d * d * inv_b2;
  Matrix grad = matmul(diff, s);
  grad *= 4.0 * inv_b2;
  out.grad_embeddings = normalize ? detail::normalize_rows_backward(s, s_norms, grad) : std::move(grad);
  return out;
}

// Which components a training objective sums. CE carries weight 1, F' carries
// lambda1, I carries lambda2, the comparison losses carry their own weights.
struct Recipe {
  bool ce = false;
  bool kl = false;
  bool cosine = false;
  bool mse = false;
  bool mmd = false;
  bool contrastive = false;  // F'
  bool instance = false;     // I

  bool uses_embeddings() const { return cosine || mse || mmd || contrastive || instance; }
  bool uses_teacher() const { return uses_embeddings() || kl; }
  bool empty() const { return !(ce || kl || cosine || mse || mmd || contrastive || instance); }

  // Canonical name, components joined by '_' in a fixed order, e.g. "CE_F'_I".
  std::string name() const {
    std::string out;
    auto add = [&](bool on, const char* token) {
      if (!on) return;
      if (!out.empty()) out += '_';
      out += token;
    };
    add(ce, "CE");
    add(kl, "KL");
    add(cosine, "COS");
    add(mse, "MSE");
    add(mmd, "MMD");
    add(contrastive, "F'");
    add(instance, "I");
    return out;
  }

  // Filesystem-safe lowercase slug, e.g. "ce_f_i".
  std::string slug() const {
    std::string out;
    for (char c : name()) {
      if (c == '\'') continue;
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
  }

  // Accepts tokens separated by '_' or '+', case-insensitive; "F" is an alias
  // for "F'".
  static Recipe parse(const std::string& text) {
    Recipe r;
    std::string token;
    auto flush = [&]() {
      if (token.empty()) throw ParameterError("recipe '" + text + "': empty component");
      std::string up;
      for (char c : token) up += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      bool* slot = nullptr;
      if (up == "CE") slot = &r.ce;
      else if (up == "KL") slot = &r.kl;
      else if (up == "COS" || up == "COSINE") slot = &r.cosine;
      else if (up == "MSE") slot = &r.mse;
      else if (up == "MMD") slot = &r.mmd;
      else if (up == "F'" || up == "F") slot = &r.contrastive;
      else if (up == "I") slot = &r.instance;
      if (slot == nullptr) throw ParameterError("recipe '" + text + "': unknown component '" + token + "'");
      if (*slot) throw ParameterError("recipe '" + text + "': duplicate component '" + token + "'");
      *slot = true;
      token.clear();
    };
    for (char c : text) {
      if (c == '_' || c == '+') flush();
      else token += c;
    }
    flush();
    return r;
  }

  friend bool operator==(const Recipe&, const Recipe&) = default;
};

struct LossOptions {
  double temperature = 1.0;
  MmdKernel mmd_kernel = MmdKernel::linear();
  ContrastiveOptions contrastive;
  bool instance_normalize = false;
};

struct CombinedLoss {
  LossOutput total;
  std::map<std::string, double> components;  // unweighted component values
};

inline CombinedLoss combined_loss(const LabeledBatch& batch, const LossWeights& weights,
                                  const Recipe& recipe, const LossOptions& options = {}) {
  weights.validate();
  if (recipe.empty()) throw ParameterError("combined_loss: empty recipe");
  const std::size_t b = batch.size();

  CombinedLoss out;
  Matrix grad_emb(b, batch.student_embeddings.cols());
  Matrix grad_logits(b, batch.student_logits.cols());
  bool has_emb = false;
  bool has_logits = false;
  auto accumulate = [&](const char* name, const LossOutput& part, double weight) {
    out.components[name] = part.value;
    out.total.value += weight * part.value;
    if (part.grad_embeddings) {
      grad_emb.add_scaled(*part.grad_embeddings, weight);
      has_emb = true;
    }
    if (part.grad_logits) {
      grad_logits.add_scaled(*part.grad_logits, weight);
      has_logits = true;
    }
  };

  const Matrix& t = batch.teacher_embeddings;
  const Matrix& s = batch.student_embeddings;
  if (recipe.ce) accumulate("CE", ce_loss(batch.student_logits, batch.labels), 1.0);
  if (recipe.kl) {
    accumulate("KL", kl_ts_loss(batch.teacher_posteriors, batch.student_logits, options.temperature),
               weights.kl);
  }
  if (recipe.cosine) accumulate("COS", feat_cosine_loss(t, s), weights.cosine);
  if (recipe.mse) accumulate("MSE", feat_mse_loss(t, s), weights.mse);
  if (recipe.mmd) accumulate("MMD", feat_mmd_loss(t, s, options.mmd_kernel), weights.mmd);
  if (recipe.contrastive) {
    accumulate("F'", contrastive_ts_loss(t, s, batch.labels, options.contrastive), weights.lambda1);
  }
  if (recipe.instance) {
    accumulate("I", instance_pairwise_loss(t, s, options.instance_normalize), weights.lambda2);
  }

  if (has_emb) out.total.grad_embeddings = std::move(grad_emb);
  if (has_logits) out.total.grad_logits = std::move(grad_logits);
  return out;
}

}  // namespace xfersv
