#pragma once

// Fully connected embedding extractor with a speaker classifier head.
//
//   input -> [Linear -> act] x hidden -> Linear (embedding) -> act -> Linear (logits)
//
// The embedding is the pre-activation output of the penultimate linear layer.
// Weights are stored fan_in x fan_out so a layer computes X * W + b.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "xfersv/errors.hpp"
#include "xfersv/numerics.hpp"

namespace xfersv {

enum class Activation : std::uint8_t { relu = 0, tanh = 1 };
enum class Role : std::uint8_t { baseline = 0, teacher = 1, student = 2 };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ParameterError("unknown activation '" + s + "'");
}

inline const char* to_string(Role r) {
  switch (r) {
    case Role::baseline: return "baseline";
    case Role::teacher: return "teacher";
    case Role::student: return "student";
  }
  return "?";
}

struct ExtractorConfig {
  std::size_t input_dim = 24;
  std::vector<std::size_t> hidden_dims{32, 32};
  std::size_t embedding_dim = 16;
  std::size_t num_speakers = 50;
  Activation activation = Activation::relu;

  void validate() const {
    if (input_dim == 0 || embedding_dim == 0 || num_speakers == 0) {
      throw ConfigError("extractor dims must all be >= 1");
    }
    for (std::size_t h : hidden_dims)
      if (h == 0) throw ConfigError("extractor hidden dims must be >= 1");
  }

  // fan_in, fan_out of every linear layer in order.
  std::vector<std::pair<std::size_t, std::size_t>> layer_shapes() const {
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    std::size_t prev = input_dim;
    for (std::size_t h : hidden_dims) {
      shapes.emplace_back(prev, h);
      prev = h;
    }
    shapes.emplace_back(prev, embedding_dim);
    shapes.emplace_back(embedding_dim, num_speakers);
    return shapes;
  }

  friend bool operator==(const ExtractorConfig&, const ExtractorConfig&) = default;
};

struct Layer {
  Matrix weights;  // fan_in x fan_out
  Vector bias;     // fan_out

  friend bool operator==(const Layer&, const Layer&) = default;
};

struct ModelParams {
  ExtractorConfig config;
  Role role = Role::baseline;
  std::vector<Layer> layers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.weights.size() + l.bias.size();
    return n;
  }

  // Layer order, weights row-major then bias.
  Vector flatten() const {
    Vector out;
    out.reserve(parameter_count());
    for (const Layer& l : layers) {
      out.insert(out.end(), l.weights.values().begin(), l.weights.values().end());
      out.insert(out.end(), l.bias.begin(), l.bias.end());
    }
    return out;
  }

  void unflatten(const Vector& flat) {
    if (flat.size() != parameter_count()) throw ShapeError("unflatten: parameter count mismatch");
    auto it = flat.begin();
    for (Layer& l : layers) {
      std::copy_n(it, l.weights.size(), l.weights.values().begin());
      it += static_cast<std::ptrdiff_t>(l.weights.size());
      std::copy_n(it, l.bias.size(), l.bias.begin());
      it += static_cast<std::ptrdiff_t>(l.bias.size());
    }
  }

  // Zero-filled parameter set of the same shape; used as a gradient buffer.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    for (Layer& l : z.layers) {
      std::fill(l.weights.values().begin(), l.weights.values().end(), 0.0);
      std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    return z;
  }

  bool all_finite() const {
    for (const Layer& l : layers) {
      if (!l.weights.all_finite()) return false;
      for (double b : l.bias)
        if (!std::isfinite(b)) return false;
    }
    return true;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using ModelGrads = ModelParams;

// Glorot-uniform weights, zero biases.
inline ModelParams init_params(const ExtractorConfig& config, Rng& rng, Role role = Role::baseline) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.role = role;
  for (auto [fan_in, fan_out] : config.layer_shapes()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Layer layer{Matrix(fan_in, fan_out), Vector(fan_out, 0.0)};
    for (double& w : layer.weights.values()) w = rng.uniform(-bound, bound);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

struct ForwardCache {
  std::vector<Matrix> inputs;           // input to each linear layer
  std::vector<Matrix> pre_activations;  // output of each linear layer except the last
};

struct ForwardResult {
  Matrix embeddings;  // B x embedding_dim
  Matrix logits;      // B x num_speakers
  ForwardCache cache;
};

namespace detail {

inline Matrix affine(const Matrix& x, const Layer& layer) {
  Matrix out = matmul(x, layer.weights);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += layer.bias[j];
  }
  return out;
}

inline Matrix activate(const Matrix& x, Activation act) {
  Matrix out = x;
  for (double& v : out.values()) v = act == Activation::relu ? std::max(v, 0.0) : std::tanh(v);
  return out;
}

// grad * act'(pre)
inline void activation_backward(Matrix& grad, const Matrix& pre, Activation act) {
  for (std::size_t k = 0; k < grad.size(); ++k) {
    const double z = pre.values()[k];
    if (act == Activation::relu) {
      if (!(z > 0.0)) grad.values()[k] = 0.0;
    } else {
      const double t = std::tanh(z);
      grad.values()[k] *= 1.0 - t * t;
    }
  }
}

}  // namespace detail

inline ForwardResult forward(const ModelParams& params, const Matrix& features) {
  if (features.cols() != params.config.input_dim) {
    throw ShapeError("forward: features have " + std::to_string(features.cols()) +
                     " columns, model expects " + std::to_string(params.config.input_dim));
  }
  ForwardResult r;
  const Activation act = params.config.activation;
  Matrix h = features;
  const std::size_t last = params.layers.size() - 1;
  for (std::size_t l = 0; l < last; ++l) {
    r.cache.inputs.push_back(h);
    Matrix z = detail::affine(h, params.layers[l]);
    h = detail::activate(z, act);
    r.cache.pre_activations.push_back(std::move(z));
  }
  r.embeddings = r.cache.pre_activations.back();
  r.cache.inputs.push_back(h);
  r.logits = detail::affine(h, params.layers[last]);
  return r;
}

// Reverse-mode gradients of the forward map. Either upstream gradient may be
// absent; present ones are summed at the embedding.
inline ModelGrads backward(const ModelParams& params, const ForwardCache& cache,
                           const std::optional<Matrix>& grad_embeddings,
                           const std::optional<Matrix>& grad_logits) {
  const std::size_t n_layers = params.layers.size();
  if (cache.inputs.size() != n_layers || cache.pre_activations.size() + 1 != n_layers) {
    throw UsageError("backward: cache does not come from a forward pass of this model");
  }
  if (!grad_embeddings && !grad_logits) throw UsageError("backward: no upstream gradient");
  const std::size_t batch = cache.inputs.front().rows();
  const Activation act = params.config.activation;

  ModelGrads grads = params.zeros_like();
  auto accumulate_layer = [&](std::size_t l, const Matrix& grad_out) {
    grads.layers[l].weights = matmul_tn(cache.inputs[l], grad_out);
    Vector& db = grads.layers[l].bias;
    for (std::size_t i = 0; i < grad_out.rows(); ++i) {
      auto row = grad_out.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) db[j] += row[j];
    }
  };

  const std::size_t head = n_layers - 1;
  Matrix grad_z(batch, params.config.embedding_dim);
  if (grad_logits) {
    if (grad_logits->rows() != batch || grad_logits->cols() != params.config.num_speakers) {
      throw ShapeError("backward: grad_logits shape " + grad_logits->shape_string());
    }
    accumulate_layer(head, *grad_logits);
    grad_z = matmul_nt(*grad_logits, params.layers[head].weights);
    detail::activation_backward(grad_z, cache.pre_activations[head - 1], act);
  }
  if (grad_embeddings) {
    if (grad_embeddings->rows() != batch || grad_embeddings->cols() != params.config.embedding_dim) {
      throw ShapeError("backward: grad_embeddings shape " + grad_embeddings->shape_string());
    }
    grad_z += *grad_embeddings;
  }

  for (std::size_t l = head; l-- > 0;) {
    accumulate_layer(l, grad_z);
    if (l == 0) break;
    Matrix grad_in = matmul_nt(grad_z, params.layers[l].weights);
    detail::activation_backward(grad_in, cache.pre_activations[l - 1], act);
    grad_z = std::move(grad_in);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//   magic "XFCK" | u32 version
//   u32 input_dim | u32 n_hidden | n_hidden x u32 | u32 embedding_dim
//   u32 num_speakers | u8 activation | u8 role
//   u32 epoch | u64 seed | u16 recipe length | recipe bytes
//   u64 parameter count | parameters as f64, layer order, weights row-major then bias
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainingMeta {
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
  std::string recipe;

  friend bool operator==(const TrainingMeta&, const TrainingMeta&) = default;
};

struct Checkpoint {
  ModelParams params;
  TrainingMeta meta;
};

namespace io {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated file");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LookupError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("write failed for '" + path + "'");
}

}  // namespace io

inline std::vector<unsigned char> serialize_checkpoint(const ModelParams& params,
                                                       const TrainingMeta& meta = {}) {
  io::ByteWriter w;
  w.raw("XFCK");
  w.u32(kCheckpointVersion);
  const ExtractorConfig& c = params.config;
  w.u32(static_cast<std::uint32_t>(c.input_dim));
  w.u32(static_cast<std::uint32_t>(c.hidden_dims.size()));
  for (std::size_t h : c.hidden_dims) w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(c.embedding_dim));
  w.u32(static_cast<std::uint32_t>(c.num_speakers));
  w.u8(static_cast<std::uint8_t>(c.activation));
  w.u8(static_cast<std::uint8_t>(params.role));
  w.u32(meta.epoch);
  w.u64(meta.seed);
  if (meta.recipe.size() > 0xFFFF) throw FormatError("checkpoint: recipe name too long");
  w.u16(static_cast<std::uint16_t>(meta.recipe.size()));
  w.raw(meta.recipe);
  const Vector flat = params.flatten();
  w.u64(flat.size());
  for (double v : flat) w.f64(v);
  return w.bytes();
}

inline Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  io::ByteReader r(bytes, "checkpoint");
  if (r.raw(4) != "XFCK") throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ExtractorConfig& c = ck.params.config;
  c.input_dim = r.u32();
  const std::uint32_t n_hidden = r.u32();
  if (n_hidden > r.remaining() / 4) throw FormatError("checkpoint: truncated file");
  c.hidden_dims.resize(n_hidden);
  for (auto& h : c.hidden_dims) h = r.u32();
  c.embedding_dim = r.u32();
  c.num_speakers = r.u32();
  const std::uint8_t act = r.u8();
  const std::uint8_t role = r.u8();
  if (act > 1 || role > 2) throw FormatError("checkpoint: bad activation/role tag");
  c.activation = static_cast<Activation>(act);
  ck.params.role = static_cast<Role>(role);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  ck.meta.epoch = r.u32();
  ck.meta.seed = r.u64();
  ck.meta.recipe = r.raw(r.u16());

  for (auto [fan_in, fan_out] : c.layer_shapes()) {
    ck.params.layers.push_back({Matrix(fan_in, fan_out), Vector(fan_out, 0.0)});
  }
  const std::uint64_t count = r.u64();
  if (count != ck.params.parameter_count()) throw FormatError("checkpoint: parameter count mismatch");
  Vector flat(count);
  for (double& v : flat) v = r.f64();
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  ck.params.unflatten(flat);
  return ck;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path,
                            const TrainingMeta& meta = {}) {
  io::write_file(path, serialize_checkpoint(params, meta));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(io::read_file(path));
}

inline std::uint64_t content_hash(const std::vector<unsigned char>& bytes) {
  return fnv1a64(std::span<const unsigned char>(bytes));
}

// Hash of the parameters alone (config + weights, empty metadata).
inline std::uint64_t params_hash(const ModelParams& params) {
  return content_hash(serialize_checkpoint(params));
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

}  // namespace xfersv
