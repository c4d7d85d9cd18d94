#pragma once

// Fisher information estimators for a classifier network: exact (definition
// and pullback), empirical, Monte Carlo, and Hutchinson-probe estimators
// with their closed-form variances.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimlab/common.hpp"
#include "fimlab/core_space.hpp"
#include "fimlab/network.hpp"
#include "fimlab/tensor_ad.hpp"

namespace fimlab::est {

inline constexpr Index kDenseCap = 4096;
/// Probabilities are floored here before a square root on the probe paths.
inline constexpr double kProbFloor = 1e-30;

enum class Kind { ExactDef, ExactPullback, Efim, Mc, HutchFull, HutchDg, HutchLr, HutchSqrt };
enum class Storage { Dense, Diagonal };
/// Sum over the dataset, or the uniform-sample average (sum / |D|).
enum class Normalization { Sum, Mean };
enum class ProbeDist { Rademacher, Gaussian };

inline std::string to_string(Kind k) {
  switch (k) {
    case Kind::ExactDef: return "exact_def";
    case Kind::ExactPullback: return "exact_pullback";
    case Kind::Efim: return "efim";
    case Kind::Mc: return "mc";
    case Kind::HutchFull: return "hutch_full";
    case Kind::HutchDg: return "hutch_dg";
    case Kind::HutchLr: return "hutch_lr";
    case Kind::HutchSqrt: return "hutch_sqrt";
  }
  return "unknown";
}
inline std::string to_string(Storage s) { return s == Storage::Dense ? "dense" : "diagonal"; }
inline std::string to_string(Normalization n) { return n == Normalization::Sum ? "sum" : "mean"; }
inline std::string to_string(ProbeDist d) { return d == ProbeDist::Rademacher ? "rademacher" : "gaussian"; }

inline Kind parse_kind(const std::string& s) {
  for (Kind k : {Kind::ExactDef, Kind::ExactPullback, Kind::Efim, Kind::Mc, Kind::HutchFull, Kind::HutchDg,
                 Kind::HutchLr, Kind::HutchSqrt})
    if (to_string(k) == s) return k;
  throw InvalidInput("unknown estimator kind '" + s + "'");
}
inline Storage parse_storage(const std::string& s) {
  if (s == "dense") return Storage::Dense;
  if (s == "diagonal") return Storage::Diagonal;
  throw InvalidInput("unknown storage '" + s + "'");
}
inline Normalization parse_normalization(const std::string& s) {
  if (s == "sum") return Normalization::Sum;
  if (s == "mean") return Normalization::Mean;
  throw InvalidInput("unknown normalization '" + s + "'");
}
inline ProbeDist parse_dist(const std::string& s) {
  if (s == "rademacher") return ProbeDist::Rademacher;
  if (s == "gaussian") return ProbeDist::Gaussian;
  throw InvalidInput("unknown probe distribution '" + s + "'");
}

struct EstimateMeta {
  Index probe_count = 0;
  ProbeDist dist = ProbeDist::Rademacher;
  std::uint64_t seed = 0;
  std::string dataset;
  std::size_t backward_passes = 0;
  int k = 0;  // rank for low-rank estimates
};

struct FimEstimate {
  Kind kind = Kind::ExactDef;
  Storage storage = Storage::Dense;
  Normalization normalization = Normalization::Sum;
  Matrix dense;  // used with Storage::Dense
  Vector diag;   // used with Storage::Diagonal
  EstimateMeta meta;

  Index dim() const { return storage == Storage::Dense ? dense.rows() : diag.size(); }
  Vector diagonal() const { return storage == Storage::Dense ? Vector(dense.diagonal()) : diag; }
};

/// Empty estimate of the right shape.
inline FimEstimate make_estimate(Kind kind, Storage storage, Normalization norm, Index dim) {
  if (storage == Storage::Dense)
    require(dim <= kDenseCap, "dense storage requested for dim(theta) = " + std::to_string(dim) +
                                  " above the cap of " + std::to_string(kDenseCap));
  FimEstimate e;
  e.kind = kind;
  e.storage = storage;
  e.normalization = norm;
  if (storage == Storage::Dense) e.dense = Matrix::Zero(dim, dim);
  else e.diag = Vector::Zero(dim);
  return e;
}

inline void add_outer(FimEstimate& e, double weight, const Vector& g) {
  if (e.storage == Storage::Dense) e.dense.noalias() += weight * g * g.transpose();
  else e.diag.array() += weight * g.array().square();
}

inline void scale_values(FimEstimate& e, double s) {
  if (e.storage == Storage::Dense) e.dense *= s;
  else e.diag *= s;
}

/// Symmetric within 1e-12 and psd within -1e-10 (dense), entries >= -1e-12
/// (diagonal). Returns the first violation, or an empty string.
inline std::string check_invariants(const FimEstimate& e) {
  if (e.storage == Storage::Diagonal) {
    if (e.diag.size() > 0 && e.diag.minCoeff() < -1e-12) return "negative diagonal entry";
    return {};
  }
  const double scale = std::max(1.0, e.dense.cwiseAbs().maxCoeff());
  if ((e.dense - e.dense.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) return "not symmetric";
  if (e.dense.rows() > 0) {
    if (core::min_eigenvalue(e.dense) < -1e-10 * scale) return "not positive semidefinite";
  }
  return {};
}

// Per-sample derivatives ------------------------------------------------------

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline ad::Var<double> theta_leaf(ad::Tape& tape, const Vector& theta) {
  return tape.leaf(ad::Shape::vector(static_cast<std::size_t>(theta.size())), to_std(theta));
}

/// p(.|x) and the gradients of every log-likelihood l_y, one reverse sweep
/// per class. Row y of `grads` is dl_y/dtheta.
struct LikelihoodGradients {
  Vector probs;
  Matrix grads;
};

inline LikelihoodGradients likelihood_gradients(const nn::NetworkSpec& spec, const Vector& theta,
                                                const Vector& x) {
  ad::Tape tape;
  auto leaf = theta_leaf(tape, theta);
  auto z = nn::record_logits(spec, tape, leaf, Matrix(x.transpose()));
  auto logp = ad::log_softmax(z);
  const Index c = spec.num_classes();
  LikelihoodGradients out{Vector(c), Matrix(c, theta.size())};
  out.probs = core::ProbVector::softmax(nn::to_matrix(z).row(0).transpose()).values();
  std::vector<double> seed(static_cast<std::size_t>(c));
  for (Index y = 0; y < c; ++y) {
    std::fill(seed.begin(), seed.end(), 0.0);
    seed[static_cast<std::size_t>(y)] = 1.0;
    out.grads.row(y) = to_eigen(tape.vjp(logp, seed).of(leaf)).transpose();
  }
  return out;
}

/// dl_y/dtheta for a single label, one reverse sweep.
inline Vector label_gradient(const nn::NetworkSpec& spec, const Vector& theta, const Vector& x, Index y) {
  require(y >= 0 && y < spec.num_classes(), "label " + std::to_string(y) + " out of range");
  ad::Tape tape;
  auto leaf = theta_leaf(tape, theta);
  auto ell = ad::sum(ad::gather(ad::log_softmax(nn::record_logits(spec, tape, leaf, Matrix(x.transpose()))),
                                {static_cast<std::size_t>(y)}));
  return to_eigen(tape.backward(ell).of(leaf));
}

inline void check_dataset(const nn::NetworkSpec& spec, const Matrix& x) {
  require(x.rows() >= 1, "dataset must contain at least one sample");
  require(x.cols() == spec.input_dim(), "dataset width does not match the network input");
}

// Exact, empirical and Monte Carlo -------------------------------------------

/// sum_x sum_y p(y|x) g_xy g_xy^T with g_xy = dl_xy/dtheta.
inline FimEstimate exact_fim_definition(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                                        Storage storage) {
  check_dataset(spec, x);
  FimEstimate e = make_estimate(Kind::ExactDef, storage, Normalization::Sum, theta.size());
  for (Index r = 0; r < x.rows(); ++r) {
    const LikelihoodGradients lg = likelihood_gradients(spec, theta, x.row(r).transpose());
    for (Index y = 0; y < lg.probs.size(); ++y) add_outer(e, lg.probs[y], lg.grads.row(y).transpose());
    e.meta.backward_passes += static_cast<std::size_t>(lg.probs.size());
  }
  return e;
}

/// sum_x J^T (diag(p) - p p^T) J.
inline FimEstimate exact_fim_pullback(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                                      Storage storage) {
  check_dataset(spec, x);
  FimEstimate e = make_estimate(Kind::ExactPullback, storage, Normalization::Sum, theta.size());
  for (Index r = 0; r < x.rows(); ++r) {
    const nn::JacobianBlock jb = nn::per_sample_jacobian(spec, theta, x.row(r).transpose());
    const core::ProbVector p = core::ProbVector::softmax(jb.logits);
    const Matrix core = core::simplex_fim(p).matrix;
    if (storage == Storage::Dense) {
      e.dense.noalias() += jb.matrix.transpose() * core * jb.matrix;
    } else {
      const Matrix cj = core * jb.matrix;
      e.diag += jb.matrix.cwiseProduct(cj).colwise().sum().transpose();
    }
    e.meta.backward_passes += static_cast<std::size_t>(jb.matrix.rows());
  }
  if (storage == Storage::Dense) e.dense = (0.5 * (e.dense + e.dense.transpose())).eval();
  return e;
}

/// Gradient outer products at the observed labels (0-based).
inline FimEstimate efim(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                        const std::vector<Index>& labels, Storage storage) {
  check_dataset(spec, x);
  require(labels.size() == static_cast<std::size_t>(x.rows()), "efim: one label per sample required");
  FimEstimate e = make_estimate(Kind::Efim, storage, Normalization::Sum, theta.size());
  for (Index r = 0; r < x.rows(); ++r) {
    add_outer(e, 1.0, label_gradient(spec, theta, x.row(r).transpose(), labels[static_cast<std::size_t>(r)]));
    ++e.meta.backward_passes;
  }
  return e;
}

/// Average of m gradient outer products at (x ~ uniform(D), y ~ p(.|x)).
/// Normalization is MEAN: its expectation is the exact FIM divided by |D|.
inline FimEstimate mc_fim(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x, Index m, Rng& rng,
                          Storage storage) {
  check_dataset(spec, x);
  require(m >= 1, "mc_fim: need at least one sample");
  FimEstimate e = make_estimate(Kind::Mc, storage, Normalization::Mean, theta.size());
  std::uniform_int_distribution<Index> pick(0, x.rows() - 1);
  for (Index s = 0; s < m; ++s) {
    const Index r = pick(rng);
    const Vector z = nn::forward_logits(spec, theta, x.row(r)).row(0).transpose();
    const Vector p = core::ProbVector::softmax(z).values();
    std::discrete_distribution<Index> label(p.data(), p.data() + p.size());
    add_outer(e, 1.0, label_gradient(spec, theta, x.row(r).transpose(), label(rng)));
  }
  scale_values(e, 1.0 / static_cast<double>(m));
  e.meta.probe_count = m;
  e.meta.backward_passes = static_cast<std::size_t>(m);
  return e;
}

// Probes -----------------------------------------------------------------------

inline Vector sample_probe(Index n, ProbeDist dist, Rng& rng) {
  require(n >= 0, "sample_probe: negative size");
  Vector xi(n);
  if (dist == ProbeDist::Rademacher) {
    std::bernoulli_distribution coin(0.5);
    for (Index i = 0; i < n; ++i) xi[i] = coin(rng) ? 1.0 : -1.0;
  } else {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < n; ++i) xi[i] = normal(rng);
  }
  return xi;
}

// Hutchinson estimators --------------------------------------------------------

/// Weights of the diagonal core: zeta = p gives the upper-bound core diag(p),
/// zeta = p(1-p) gives the hypercube core.
enum class DiagWeights { Prob, Bernoulli };

struct HutchinsonVariant {
  enum class Type { Full, Dg, Lr, Sqrt };
  Type type = Type::Full;
  DiagWeights zeta = DiagWeights::Prob;
  int k = 1;
  core::EigenMethod eigen = core::EigenMethod::power(30);

  static HutchinsonVariant full() { return {Type::Full}; }
  static HutchinsonVariant sqrt() { return {Type::Sqrt}; }
  static HutchinsonVariant dg(DiagWeights w = DiagWeights::Prob) { return {Type::Dg, w}; }
  /// Rank-k core; k = 1 uses power iteration by default, larger k the full
  /// decomposition.
  static HutchinsonVariant lr(int k, std::optional<core::EigenMethod> eigen = std::nullopt) {
    HutchinsonVariant v{Type::Lr, DiagWeights::Prob, k};
    v.eigen = eigen ? *eigen : (k == 1 ? core::EigenMethod::power(30) : core::EigenMethod::full());
    return v;
  }

  Kind kind() const {
    switch (type) {
      case Type::Full: return Kind::HutchFull;
      case Type::Dg: return Kind::HutchDg;
      case Type::Lr: return Kind::HutchLr;
      case Type::Sqrt: return Kind::HutchSqrt;
    }
    return Kind::HutchFull;
  }
  std::string name() const {
    switch (type) {
      case Type::Full: return "full";
      case Type::Sqrt: return "sqrt";
      case Type::Dg: return zeta == DiagWeights::Prob ? "dg" : "dg_bernoulli";
      case Type::Lr: return "lr" + std::to_string(k);
    }
    return "unknown";
  }
};

inline HutchinsonVariant parse_variant(const std::string& s) {
  if (s == "full") return HutchinsonVariant::full();
  if (s == "sqrt") return HutchinsonVariant::sqrt();
  if (s == "dg") return HutchinsonVariant::dg();
  if (s == "dg_bernoulli") return HutchinsonVariant::dg(DiagWeights::Bernoulli);
  if (s.rfind("lr", 0) == 0 && s.size() > 2) {
    std::size_t used = 0;
    const int k = std::stoi(s.substr(2), &used);
    require(used == s.size() - 2, "bad low-rank variant '" + s + "'");
    return HutchinsonVariant::lr(k);
  }
  throw InvalidInput("unknown Hutchinson variant '" + s + "'");
}

/// Per-sample columns sqrt(lambda_i) v_i for the top-k eigenpairs of the
/// simplex core at each input (C x k each).
struct LowRankBasis {
  std::vector<Matrix> scaled;
};

inline LowRankBasis low_rank_basis(const Matrix& logits, int k, const core::EigenMethod& method, Rng& rng) {
  const Index c = logits.cols();
  require(k >= 1 && k <= c - 1, "low-rank core needs 1 <= k <= C-1, got k = " + std::to_string(k));
  LowRankBasis out;
  for (Index r = 0; r < logits.rows(); ++r) {
    const core::ProbVector p = core::ProbVector::softmax(logits.row(r).transpose());
    Matrix b(c, k);
    if (k == 1 && method.kind == core::EigenMethod::Kind::Power) {
      const core::TopEigenpair e = core::top_eigenpair(p, method, rng);
      b.col(0) = std::sqrt(std::max(e.value, 0.0)) * e.vector;
    } else {
      const core::SpectralDecomp d = core::spectrum(core::simplex_fim(p));
      for (int i = 0; i < k; ++i) {
        const Index col = c - k + i;
        b.col(i) = std::sqrt(std::max(d.eigenvalues[col], 0.0)) * d.eigenvectors.col(col);
      }
    }
    out.scaled.push_back(std::move(b));
  }
  return out;
}

/// Number of probe entries: C per sample, or k per sample for low rank.
inline Index probe_size(const nn::NetworkSpec& spec, Index samples, const HutchinsonVariant& v) {
  return samples * (v.type == HutchinsonVariant::Type::Lr ? v.k : spec.num_classes());
}

/// Low-rank probe folded into logit space: row x is sum_i sqrt(lambda_i) v_i xi_xi.
inline std::vector<double> low_rank_weights(const LowRankBasis& basis, const Vector& probe) {
  const Index n = static_cast<Index>(basis.scaled.size());
  const Index c = n ? basis.scaled[0].rows() : 0, k = n ? basis.scaled[0].cols() : 0;
  require(probe.size() == n * k, "low-rank probe size mismatch");
  std::vector<double> w(static_cast<std::size_t>(n * c));
  for (Index r = 0; r < n; ++r) {
    const Vector row = basis.scaled[static_cast<std::size_t>(r)] * probe.segment(r * k, k);
    for (Index j = 0; j < c; ++j) w[static_cast<std::size_t>(r * c + j)] = row[j];
  }
  return w;
}

template <class T>
struct HRecording {
  ad::Var<T> root;
  ad::Var<T> probe;  // constant node overwritten per probe
};

/// Records the scalar h whose gradient is the probe vector g, on any tape.
/// Coefficients sqrt(p), sqrt(zeta) go through stop_gradient; the low-rank
/// basis enters as a constant. `probe` has C entries per sample (row-major
/// by sample), or k for low rank.
template <class T>
HRecording<T> record_h(const nn::NetworkSpec& spec, ad::BasicTape<T>& tape, const ad::Var<T>& theta,
                       const Matrix& x, const HutchinsonVariant& v, const Vector& probe,
                       const LowRankBasis* basis = nullptr) {
  using ad::Shape;
  const auto n = static_cast<std::size_t>(x.rows());
  const auto c = static_cast<std::size_t>(spec.num_classes());
  auto z = nn::record_logits(spec, tape, theta, x);
  auto as_const = [&](const std::vector<double>& vals) {
    return tape.constant(Shape::matrix(n, c), std::vector<T>(vals.begin(), vals.end()));
  };
  using Type = HutchinsonVariant::Type;
  if (v.type == Type::Lr) {
    require(basis != nullptr, "record_h: low-rank variant needs its eigen basis");
    auto w = as_const(low_rank_weights(*basis, probe));
    return {ad::weighted_sum(z, w), w};
  }
  require(probe.size() == static_cast<Index>(n * c), "record_h: probe size mismatch");
  auto xi = as_const(to_std(probe));
  auto logp = ad::log_softmax(z);
  switch (v.type) {
    case Type::Full: {
      auto coef = ad::stop_gradient(ad::sqrt(ad::clamp_min(ad::exp(logp), kProbFloor)));
      return {ad::weighted_sum(ad::mul(coef, logp), xi), xi};
    }
    case Type::Dg: {
      auto p = ad::exp(logp);
      auto zeta = v.zeta == DiagWeights::Prob ? p : ad::add(p, ad::scale(ad::mul(p, p), -1.0));
      auto coef = ad::stop_gradient(ad::sqrt(ad::clamp_min(zeta, kProbFloor)));
      return {ad::weighted_sum(ad::mul(coef, z), xi), xi};
    }
    case Type::Sqrt:
      // 2 sqrt(p) = 2 exp(l / 2); no floor needed
      return {ad::scale(ad::weighted_sum(ad::exp(ad::scale(logp, 0.5)), xi), 2.0), xi};
    case Type::Lr:
      break;
  }
  throw InvalidInput("record_h: unsupported variant");
}

/// A recorded h for fixed (theta, data); each call to `gradient` swaps in a
/// new probe and runs exactly one reverse sweep.
class HutchinsonObjective {
 public:
  HutchinsonObjective(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                      const HutchinsonVariant& variant, Rng& rng)
      : variant_(variant), samples_(x.rows()) {
    check_dataset(spec, x);
    if (variant.type == HutchinsonVariant::Type::Lr)
      basis_ = low_rank_basis(nn::forward_logits(spec, theta, x), variant.k, variant.eigen, rng);
    leaf_ = theta_leaf(tape_, theta);
    const Vector zero = Vector::Zero(est::probe_size(spec, samples_, variant));
    const HRecording<double> rec = record_h(spec, tape_, leaf_, x, variant, zero, &basis_);
    root_ = rec.root;
    probe_ = rec.probe;
  }
  HutchinsonObjective(const HutchinsonObjective&) = delete;
  HutchinsonObjective& operator=(const HutchinsonObjective&) = delete;

  Index probe_size() const {
    return variant_.type == HutchinsonVariant::Type::Lr ? samples_ * variant_.k
                                                       : static_cast<Index>(probe_.shape().numel());
  }
  const HutchinsonVariant& variant() const { return variant_; }
  const LowRankBasis& basis() const { return basis_; }

  /// g = dh/dtheta at the given probe.
  Vector gradient(const Vector& probe) {
    require(probe.size() == probe_size(), "probe has " + std::to_string(probe.size()) + " entries, expected " +
                                              std::to_string(probe_size()));
    const std::vector<double> values =
        variant_.type == HutchinsonVariant::Type::Lr ? low_rank_weights(basis_, probe) : to_std(probe);
    tape_.set_value(probe_, values);
    tape_.replay(false, probe_.id + 1);
    return to_eigen(tape_.backward(root_).of(leaf_));
  }
  double h_value() const { return root_.item(); }
  std::size_t backward_count() const { return tape_.backward_count(); }

 private:
  HutchinsonVariant variant_;
  Index samples_;
  LowRankBasis basis_;
  ad::Tape tape_;
  ad::Var<double> leaf_, root_, probe_;
};

/// Unbiased trace estimate from a full-variant gradient.
inline double trace_estimate(const Vector& g) { return g.squaredNorm(); }

/// Average of `probes` rank-one (or squared-gradient) estimates on one batch.
inline FimEstimate hutchinson_fim(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                                  const HutchinsonVariant& variant, Rng& rng, Storage storage, Index probes = 1,
                                  ProbeDist dist = ProbeDist::Rademacher) {
  require(probes >= 1, "hutchinson_fim: need at least one probe");
  FimEstimate e = make_estimate(variant.kind(), storage, Normalization::Sum, theta.size());
  HutchinsonObjective obj(spec, theta, x, variant, rng);
  for (Index s = 0; s < probes; ++s) add_outer(e, 1.0, obj.gradient(sample_probe(obj.probe_size(), dist, rng)));
  if (probes > 1) scale_values(e, 1.0 / static_cast<double>(probes));
  e.meta.probe_count = probes;
  e.meta.dist = dist;
  e.meta.backward_passes = obj.backward_count();
  e.meta.k = variant.type == HutchinsonVariant::Type::Lr ? variant.k : 0;
  return e;
}

/// Sum over batches of independent per-batch estimates. Every batch gets its
/// own engine seeded from a sequence drawn up front, so the parallel path
/// computes the same per-batch terms as the sequential one.
inline FimEstimate hutchinson_over_batches(const nn::NetworkSpec& spec, const Vector& theta,
                                           const std::vector<Matrix>& batches, const HutchinsonVariant& variant,
                                           std::uint64_t seed, Storage storage, Index probes = 1,
                                           ProbeDist dist = ProbeDist::Rademacher, bool parallel = false) {
  require(!batches.empty(), "hutchinson_over_batches: no batches");
  Rng master(seed);
  std::vector<std::uint64_t> seeds(batches.size());
  for (auto& s : seeds) s = master();
  std::vector<FimEstimate> parts(batches.size());
  auto work = [&](std::size_t b) {
    Rng rng(seeds[b]);
    parts[b] = hutchinson_fim(spec, theta, batches[b], variant, rng, storage, probes, dist);
  };
  if (parallel) {
    std::vector<std::thread> pool;
    for (std::size_t b = 0; b < batches.size(); ++b) pool.emplace_back(work, b);
    for (auto& t : pool) t.join();
  } else {
    for (std::size_t b = 0; b < batches.size(); ++b) work(b);
  }
  FimEstimate total = parts[0];
  for (std::size_t b = 1; b < parts.size(); ++b) {
    if (storage == Storage::Dense) total.dense += parts[b].dense;
    else total.diag += parts[b].diag;
    total.meta.backward_passes += parts[b].meta.backward_passes;
  }
  total.meta.seed = seed;
  return total;
}

// Closed-form variances ----------------------------------------------------------

/// Coefficient rows c_a such that the probe gradient is g = sum_a c_a xi_a:
/// one row per probe entry, in probe order.
inline Matrix probe_coefficients(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                                 const HutchinsonVariant& v, const LowRankBasis* basis = nullptr) {
  check_dataset(spec, x);
  const Index c = spec.num_classes();
  const Index width = v.type == HutchinsonVariant::Type::Lr ? v.k : c;
  Matrix rows(x.rows() * width, theta.size());
  for (Index r = 0; r < x.rows(); ++r) {
    const nn::JacobianBlock jb = nn::per_sample_jacobian(spec, theta, x.row(r).transpose());
    const Vector p = core::ProbVector::softmax(jb.logits).values();
    switch (v.type) {
      case HutchinsonVariant::Type::Full:
      case HutchinsonVariant::Type::Sqrt:
        for (Index y = 0; y < c; ++y) {
          Vector u = -p;
          u[y] += 1.0;  // dl_y/dz = e_y - p
          rows.row(r * c + y) = std::sqrt(std::max(p[y], kProbFloor)) * (jb.matrix.transpose() * u).transpose();
        }
        break;
      case HutchinsonVariant::Type::Dg:
        for (Index y = 0; y < c; ++y) {
          const double zeta = v.zeta == DiagWeights::Prob ? p[y] : p[y] * (1.0 - p[y]);
          rows.row(r * c + y) = std::sqrt(std::max(zeta, kProbFloor)) * jb.matrix.row(y);
        }
        break;
      case HutchinsonVariant::Type::Lr: {
        require(basis != nullptr, "probe_coefficients: low-rank variant needs its eigen basis");
        const Matrix& b = basis->scaled.at(static_cast<std::size_t>(r));
        rows.block(r * width, 0, width, theta.size()) = b.transpose() * jb.matrix;
        break;
      }
    }
  }
  return rows;
}

struct VarianceReport {
  Vector target;       // expected diagonal estimate
  Vector closed_form;  // Var of one diagonal coordinate
  Vector empirical;    // filled by empirical_variance, else empty
  Vector cv;           // sqrt(closed_form) / target; 0 where target is 0
};

/// Var(g_i^2) for g = sum_a c_a xi_a: 2 (sum c^2)^2 for Gaussian probes and
/// 2 (sum c^2)^2 - 2 sum c^4 for Rademacher probes.
inline VarianceReport variance_from_coefficients(const Matrix& coef, ProbeDist dist) {
  VarianceReport rep;
  rep.target = coef.cwiseAbs2().colwise().sum().transpose();
  rep.closed_form = 2.0 * rep.target.cwiseAbs2();
  if (dist == ProbeDist::Rademacher)
    rep.closed_form -= 2.0 * coef.array().pow(4).matrix().colwise().sum().transpose();
  rep.cv = Vector::Zero(rep.target.size());
  for (Index i = 0; i < rep.target.size(); ++i)
    if (rep.target[i] > 0.0) rep.cv[i] = std::sqrt(std::max(rep.closed_form[i], 0.0)) / rep.target[i];
  return rep;
}

inline VarianceReport variance_closed_form(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                                           const HutchinsonVariant& v, ProbeDist dist,
                                           const LowRankBasis* basis = nullptr) {
  return variance_from_coefficients(probe_coefficients(spec, theta, x, v, basis), dist);
}

/// Sampled per-coordinate variance of the single-probe diagonal estimate,
/// stored into `report.empirical`.
inline void empirical_variance(HutchinsonObjective& obj, Index samples, ProbeDist dist, Rng& rng,
                               VarianceReport& report) {
  require(samples >= 2, "empirical_variance: need at least two samples");
  const Index d = report.target.size();
  Vector mean = Vector::Zero(d), m2 = Vector::Zero(d);
  for (Index s = 1; s <= samples; ++s) {
    const Vector est = obj.gradient(sample_probe(obj.probe_size(), dist, rng)).cwiseAbs2();
    const Vector delta = est - mean;
    mean += delta / static_cast<double>(s);
    m2 += delta.cwiseProduct(est - mean);
  }
  report.empirical = m2 / static_cast<double>(samples - 1);
}

// Accumulation ---------------------------------------------------------------------

/// acc <- beta acc + (1 - beta) fresh, for 0 <= beta < 1.
inline FimEstimate ema_update(const FimEstimate& acc, const FimEstimate& fresh, double beta) {
  require(beta >= 0.0 && beta < 1.0, "ema_update: decay must lie in [0, 1)");
  require(acc.kind == fresh.kind, "ema_update: estimator kinds differ");
  require(acc.storage == fresh.storage, "ema_update: storage differs");
  require(acc.normalization == fresh.normalization, "ema_update: normalization differs");
  require(acc.dim() == fresh.dim(), "ema_update: dimension mismatch");
  FimEstimate out = acc;
  if (acc.storage == Storage::Dense) out.dense = beta * acc.dense + (1.0 - beta) * fresh.dense;
  else out.diag = beta * acc.diag + (1.0 - beta) * fresh.diag;
  out.meta.probe_count = acc.meta.probe_count + fresh.meta.probe_count;
  out.meta.backward_passes = acc.meta.backward_passes + fresh.meta.backward_passes;
  return out;
}

// Serialization ------------------------------------------------------------------------

/// One line of JSON header, then the values as little-endian f64 (row-major
/// for dense storage).
inline void write_estimate(const std::string& path, const FimEstimate& e) {
  nlohmann::json h;
  h["kind"] = to_string(e.kind);
  h["storage"] = to_string(e.storage);
  h["normalization"] = to_string(e.normalization);
  h["dim"] = e.dim();
  h["seed"] = e.meta.seed;
  h["probe_count"] = e.meta.probe_count;
  h["probe_dist"] = to_string(e.meta.dist);
  h["dataset"] = e.meta.dataset;
  h["backward_passes"] = e.meta.backward_passes;
  h["k"] = e.meta.k;
  require(nn::detail::host_is_little_endian(), "write_estimate: big-endian hosts are not supported");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open '" + path + "' for writing");
  out << h.dump() << '\n';
  std::vector<double> payload;
  if (e.storage == Storage::Dense) {
    payload.reserve(static_cast<std::size_t>(e.dense.size()));
    for (Index r = 0; r < e.dense.rows(); ++r)
      for (Index c = 0; c < e.dense.cols(); ++c) payload.push_back(e.dense(r, c));
  } else {
    payload = to_std(e.diag);
  }
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
  require(static_cast<bool>(out), "write failed for '" + path + "'");
}

inline FimEstimate read_estimate(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open '" + path + "'");
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), path + ": missing header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidInput(path + ": malformed header: " + ex.what());
  }
  FimEstimate e;
  e.kind = parse_kind(h.at("kind").get<std::string>());
  e.storage = parse_storage(h.at("storage").get<std::string>());
  e.normalization = parse_normalization(h.at("normalization").get<std::string>());
  const Index dim = h.at("dim").get<Index>();
  require(dim >= 0, path + ": negative dimension");
  e.meta.seed = h.value("seed", std::uint64_t{0});
  e.meta.probe_count = h.value("probe_count", Index{0});
  e.meta.dist = parse_dist(h.value("probe_dist", std::string("rademacher")));
  e.meta.dataset = h.value("dataset", std::string());
  e.meta.backward_passes = h.value("backward_passes", std::size_t{0});
  e.meta.k = h.value("k", 0);
  const auto count = static_cast<std::size_t>(e.storage == Storage::Dense ? dim * dim : dim);
  const std::vector<double> v = nn::read_f64(in, count, path);
  require(in.peek() == std::char_traits<char>::eof(), path + ": trailing bytes after payload");
  if (e.storage == Storage::Dense) {
    e.dense.resize(dim, dim);
    for (Index r = 0; r < dim; ++r)
      for (Index c = 0; c < dim; ++c) e.dense(r, c) = v[static_cast<std::size_t>(r * dim + c)];
  } else {
    e.diag = to_eigen(v);
  }
  return e;
}

}  // namespace fimlab::est
