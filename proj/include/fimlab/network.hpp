#pragma once

// Dense classifier networks recorded on the AD tape, with a flat parameter
// vector, per-sample parameter-output Jacobians and a small checkpoint format.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimlab/common.hpp"
#include "fimlab/core_space.hpp"
#include "fimlab/tensor_ad.hpp"

namespace fimlab::nn {

enum class Activation { Tanh, Relu, None };

/// Softmax reads the last layer as C logits. Logistic reads a single output
/// s and emits the two logits (s, 0), i.e. a sigmoid model with C = 2.
enum class Head { Softmax, Logistic };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::None: return "none";
  }
  return "unknown";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "none") return Activation::None;
  throw InvalidInput("unknown activation '" + s + "'");
}

inline std::string to_string(Head h) { return h == Head::Softmax ? "softmax" : "logistic"; }

inline Head parse_head(const std::string& s) {
  if (s == "softmax") return Head::Softmax;
  if (s == "logistic") return Head::Logistic;
  throw InvalidInput("unknown head '" + s + "'");
}

struct NetworkSpec {
  std::vector<Index> layer_sizes;  // input width, hidden widths..., output width
  Activation activation = Activation::Tanh;
  bool bias = true;
  Head head = Head::Softmax;

  void validate() const {
    require(layer_sizes.size() >= 2, "NetworkSpec: need an input and an output width");
    for (Index w : layer_sizes) require(w >= 1, "NetworkSpec: widths must be positive");
    if (head == Head::Softmax)
      require(layer_sizes.back() >= 2, "NetworkSpec: softmax head needs C >= 2 outputs");
    else
      require(layer_sizes.back() == 1, "NetworkSpec: logistic head needs a single output");
  }
  Index input_dim() const { return layer_sizes.front(); }
  Index num_classes() const { return head == Head::Logistic ? 2 : layer_sizes.back(); }
  std::size_t num_layers() const { return layer_sizes.size() - 1; }

  /// z = W x with W of shape C x d and no bias.
  static NetworkSpec linear(Index d, Index c, bool bias = false) {
    return {{d, c}, Activation::None, bias, Head::Softmax};
  }
  /// The one-parameter model z = theta * x with a sigmoid link.
  static NetworkSpec scalar_logistic() { return {{1, 1}, Activation::None, false, Head::Logistic}; }
  static NetworkSpec mlp(std::vector<Index> sizes, Activation act = Activation::Tanh) {
    return {std::move(sizes), act, true, Head::Softmax};
  }
};

/// Where layer l lives in the flat vector. Weights are stored row-major with
/// shape (out, in), followed by the bias when present.
struct LayerSlice {
  Index weight_offset;
  Index rows;
  Index cols;
  Index bias_offset;  // -1 without bias
};

struct ParamLayout {
  std::vector<LayerSlice> layers;
  Index size = 0;

  /// Start offset of every stored block, in order, with `size` appended.
  std::vector<Index> offsets() const {
    std::vector<Index> out;
    for (const auto& l : layers) {
      out.push_back(l.weight_offset);
      if (l.bias_offset >= 0) out.push_back(l.bias_offset);
    }
    out.push_back(size);
    return out;
  }
};

inline ParamLayout layout(const NetworkSpec& spec) {
  spec.validate();
  ParamLayout out;
  Index at = 0;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const Index in = spec.layer_sizes[l], o = spec.layer_sizes[l + 1];
    LayerSlice s{at, o, in, -1};
    at += o * in;
    if (spec.bias) {
      s.bias_offset = at;
      at += o;
    }
    out.layers.push_back(s);
  }
  out.size = at;
  return out;
}

inline Index param_count(const NetworkSpec& spec) { return layout(spec).size; }

struct LayerParams {
  Matrix weight;  // out x in
  Vector bias;    // empty without bias
};

inline std::vector<LayerParams> unflatten(const NetworkSpec& spec, const Vector& theta) {
  const ParamLayout lay = layout(spec);
  require(theta.size() == lay.size, "unflatten: expected " + std::to_string(lay.size) +
                                        " parameters, got " + std::to_string(theta.size()));
  std::vector<LayerParams> out;
  for (const auto& s : lay.layers) {
    LayerParams p;
    p.weight.resize(s.rows, s.cols);
    for (Index r = 0; r < s.rows; ++r)
      for (Index c = 0; c < s.cols; ++c) p.weight(r, c) = theta[s.weight_offset + r * s.cols + c];
    if (s.bias_offset >= 0) p.bias = theta.segment(s.bias_offset, s.rows);
    out.push_back(std::move(p));
  }
  return out;
}

inline Vector flatten(const NetworkSpec& spec, const std::vector<LayerParams>& layers) {
  const ParamLayout lay = layout(spec);
  require(layers.size() == lay.layers.size(), "flatten: layer count mismatch");
  Vector theta(lay.size);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = lay.layers[l];
    const auto& p = layers[l];
    require(p.weight.rows() == s.rows && p.weight.cols() == s.cols, "flatten: weight shape mismatch");
    for (Index r = 0; r < s.rows; ++r)
      for (Index c = 0; c < s.cols; ++c) theta[s.weight_offset + r * s.cols + c] = p.weight(r, c);
    if (s.bias_offset >= 0) {
      require(p.bias.size() == s.rows, "flatten: bias size mismatch");
      theta.segment(s.bias_offset, s.rows) = p.bias;
    }
  }
  return theta;
}

/// Scaled Gaussian weights (variance 1/fan_in) and small Gaussian biases.
inline Vector init_params(const NetworkSpec& spec, Rng& rng, double bias_scale = 0.1) {
  const ParamLayout lay = layout(spec);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector theta(lay.size);
  for (const auto& s : lay.layers) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(s.cols));
    for (Index i = 0; i < s.rows * s.cols; ++i) theta[s.weight_offset + i] = scale * normal(rng);
    if (s.bias_offset >= 0)
      for (Index i = 0; i < s.rows; ++i) theta[s.bias_offset + i] = bias_scale * normal(rng);
  }
  return theta;
}

/// Records the batch logits (n x C) on `tape` as a function of the flat
/// parameter node `theta`. Rows of `x` are samples.
template <class T>
ad::Var<T> record_logits(const NetworkSpec& spec, ad::BasicTape<T>& tape, const ad::Var<T>& theta,
                         const Matrix& x) {
  const ParamLayout lay = layout(spec);
  require(theta.shape().numel() == static_cast<std::size_t>(lay.size),
          "record_logits: parameter vector size mismatch");
  require(x.cols() == spec.input_dim(), "record_logits: input has " + std::to_string(x.cols()) +
                                            " columns, network expects " +
                                            std::to_string(spec.input_dim()));
  require(x.rows() >= 1, "record_logits: empty batch");
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<T> data(n * static_cast<std::size_t>(x.cols()));
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); ++c)
      data[static_cast<std::size_t>(r * x.cols() + c)] = static_cast<T>(x(r, c));
  ad::Var<T> h = tape.constant(ad::Shape::matrix(n, static_cast<std::size_t>(x.cols())), std::move(data));

  for (std::size_t l = 0; l < lay.layers.size(); ++l) {
    const auto& s = lay.layers[l];
    auto w = ad::slice(theta, static_cast<std::size_t>(s.weight_offset),
                       ad::Shape::matrix(static_cast<std::size_t>(s.rows), static_cast<std::size_t>(s.cols)));
    h = ad::matmul_nt(h, w);
    if (s.bias_offset >= 0)
      h = ad::add_row(h, ad::slice(theta, static_cast<std::size_t>(s.bias_offset),
                                   ad::Shape::vector(static_cast<std::size_t>(s.rows))));
    if (l + 1 < lay.layers.size()) {
      if (spec.activation == Activation::Tanh) h = ad::tanh(h);
      else if (spec.activation == Activation::Relu) h = ad::relu(h);
    }
  }
  if (spec.head == Head::Logistic) {
    auto pad = tape.constant(ad::Shape::matrix(1, 2), {T(1), T(0)});
    h = ad::matmul(h, pad);
  }
  return h;
}

inline Matrix to_matrix(const ad::Var<double>& v) {
  const auto& s = v.shape();
  Matrix out(static_cast<Index>(s.rows()), static_cast<Index>(s.cols()));
  const auto& val = v.value();
  for (Index r = 0; r < out.rows(); ++r)
    for (Index c = 0; c < out.cols(); ++c) out(r, c) = val[static_cast<std::size_t>(r * out.cols() + c)];
  return out;
}

/// Logits for every row of `x` (n x C).
inline Matrix forward_logits(const NetworkSpec& spec, const Vector& theta, const Matrix& x) {
  ad::Tape tape;
  auto leaf = tape.leaf(ad::Shape::vector(static_cast<std::size_t>(theta.size())),
                        std::vector<double>(theta.data(), theta.data() + theta.size()));
  return to_matrix(record_logits(spec, tape, leaf, x));
}

/// Row-wise softmax of a logit matrix.
inline Matrix probabilities(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) p.row(r) = core::ProbVector::softmax(logits.row(r).transpose()).values();
  return p;
}

struct JacobianBlock {
  Matrix matrix;            // C x dim(theta), row i = dz_i/dtheta
  Vector singular_values;   // ascending
  Vector logits;            // z(x, theta), kept because every caller needs it
};

/// Singular values of a short-wide matrix from the eigenvalues of J J^T.
inline Vector singular_values_of(const Matrix& j) {
  Matrix gram = j * j.transpose();
  gram = (0.5 * (gram + gram.transpose())).eval();
  Vector ev = core::jacobi_eigen(gram).eigenvalues;
  return ev.cwiseMax(0.0).cwiseSqrt();
}

/// dz/dtheta for one sample via C reverse sweeps seeded with e_i.
inline JacobianBlock per_sample_jacobian(const NetworkSpec& spec, const Vector& theta, const Vector& x) {
  ad::Tape tape;
  auto leaf = tape.leaf(ad::Shape::vector(static_cast<std::size_t>(theta.size())),
                        std::vector<double>(theta.data(), theta.data() + theta.size()));
  auto z = record_logits(spec, tape, leaf, Matrix(x.transpose()));
  const Index c = spec.num_classes();
  JacobianBlock out;
  out.matrix.resize(c, theta.size());
  out.logits = to_matrix(z).row(0).transpose();
  std::vector<double> seed(static_cast<std::size_t>(c), 0.0);
  for (Index i = 0; i < c; ++i) {
    std::fill(seed.begin(), seed.end(), 0.0);
    seed[static_cast<std::size_t>(i)] = 1.0;
    const auto g = tape.vjp(z, seed).of(leaf);
    for (Index k = 0; k < theta.size(); ++k) out.matrix(i, k) = g[static_cast<std::size_t>(k)];
  }
  out.singular_values = singular_values_of(out.matrix);
  return out;
}

// Checkpoints -------------------------------------------------------------------

namespace detail {
inline bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  return *reinterpret_cast<const unsigned char*>(&probe) == 1;
}
}  // namespace detail

/// Raw little-endian f64 values, no header.
inline void write_f64(const std::string& path, const double* data, std::size_t n) {
  require(detail::host_is_little_endian(), "write_f64: big-endian hosts are not supported");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
  require(static_cast<bool>(out), "write failed for '" + path + "'");
}

inline std::vector<double> read_f64(std::istream& in, std::size_t n, const std::string& what) {
  require(detail::host_is_little_endian(), "read_f64: big-endian hosts are not supported");
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  require(in.gcount() == static_cast<std::streamsize>(n * sizeof(double)), what + ": truncated payload");
  return v;
}

inline nlohmann::json spec_to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["layer_sizes"] = spec.layer_sizes;
  j["activation"] = to_string(spec.activation);
  j["bias"] = spec.bias;
  j["head"] = to_string(spec.head);
  j["offsets"] = layout(spec).offsets();
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  spec.layer_sizes = j.at("layer_sizes").get<std::vector<Index>>();
  spec.activation = parse_activation(j.at("activation").get<std::string>());
  spec.bias = j.value("bias", true);
  spec.head = parse_head(j.value("head", std::string("softmax")));
  spec.validate();
  if (j.contains("offsets"))
    require(j.at("offsets").get<std::vector<Index>>() == layout(spec).offsets(),
            "checkpoint: layout offsets do not match layer sizes");
  return spec;
}

struct Checkpoint {
  NetworkSpec spec;
  Vector theta;
};

/// Writes `<stem>.bin` (parameters) and `<stem>.json` (architecture).
inline void save_checkpoint(const std::string& stem, const NetworkSpec& spec, const Vector& theta) {
  require(theta.size() == param_count(spec), "save_checkpoint: parameter count mismatch");
  write_f64(stem + ".bin", theta.data(), static_cast<std::size_t>(theta.size()));
  std::ofstream meta(stem + ".json");
  require(static_cast<bool>(meta), "cannot open '" + stem + ".json' for writing");
  meta << spec_to_json(spec).dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& stem) {
  std::ifstream meta(stem + ".json");
  require(static_cast<bool>(meta), "cannot open '" + stem + ".json'");
  Checkpoint ck;
  ck.spec = spec_from_json(nlohmann::json::parse(meta));
  std::ifstream bin(stem + ".bin", std::ios::binary);
  require(static_cast<bool>(bin), "cannot open '" + stem + ".bin'");
  const auto n = static_cast<std::size_t>(param_count(ck.spec));
  const auto v = read_f64(bin, n, stem + ".bin");
  require(bin.peek() == std::char_traits<char>::eof(), stem + ".bin: trailing bytes after parameters");
  ck.theta = Eigen::Map<const Vector>(v.data(), static_cast<Index>(n));
  return ck;
}

}  // namespace fimlab::nn
