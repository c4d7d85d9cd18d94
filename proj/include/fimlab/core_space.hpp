#pragma once

// Geometry of the low-dimensional output ("core") space of a classifier:
// Fisher metrics of the probability simplex and of the Bernoulli hypercube,
// their spectra, rank-1 / diagonal envelopes, and the rank-1 empirical core.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fimlab/common.hpp"

namespace fimlab::core {

inline constexpr double kSimplexSumTolerance = 1e-12;

/// A point of the closed probability simplex with C >= 2 categories.
/// Order statistics follow an ascending stable sort, so tied entries keep
/// their input order.
class ProbVector {
 public:
  explicit ProbVector(Vector values) : values_(std::move(values)) {
    require(values_.size() >= 2, "ProbVector: need at least two categories");
    double total = 0.0;
    for (Index i = 0; i < values_.size(); ++i) {
      require(std::isfinite(values_[i]), "ProbVector: non-finite entry");
      require(values_[i] >= 0.0, "ProbVector: negative entry");
      total += values_[i];
    }
    require(std::abs(total - 1.0) <= kSimplexSumTolerance,
            "ProbVector: entries must sum to one");
    order_.resize(static_cast<std::size_t>(values_.size()));
    std::iota(order_.begin(), order_.end(), Index{0});
    std::stable_sort(order_.begin(), order_.end(),
                     [&](Index a, Index b) { return values_[a] < values_[b]; });
  }

  /// Softmax with max-subtraction. The result is renormalised so the sum
  /// constraint holds to rounding.
  static ProbVector softmax(const Vector& logits) {
    require(logits.size() >= 2, "softmax: need at least two logits");
    const double top = logits.maxCoeff();
    Vector p = (logits.array() - top).exp().matrix();
    p /= p.sum();
    return ProbVector(std::move(p));
  }

  const Vector& values() const { return values_; }
  Index size() const { return values_.size(); }
  double operator[](Index i) const { return values_[i]; }
  double squared_norm() const { return values_.squaredNorm(); }

  /// p_(i) with 1-based rank i: p_(1) is the smallest, p_(C) the largest.
  double order_stat(Index rank) const {
    require(rank >= 1 && rank <= size(), "order_stat: rank out of range");
    return values_[order_[static_cast<std::size_t>(rank - 1)]];
  }
  /// Category index holding p_(rank).
  Index order_index(Index rank) const {
    require(rank >= 1 && rank <= size(), "order_index: rank out of range");
    return order_[static_cast<std::size_t>(rank - 1)];
  }

 private:
  Vector values_;
  std::vector<Index> order_;
};

enum class CoreKind { Simplex, Hypercube, DiagWeights };

inline std::string to_string(CoreKind kind) {
  switch (kind) {
    case CoreKind::Simplex: return "simplex";
    case CoreKind::Hypercube: return "hypercube";
    case CoreKind::DiagWeights: return "diag_weights";
  }
  return "unknown";
}

struct CoreFim {
  Matrix matrix;
  CoreKind kind;
};

/// diag(p) - p p^T.
inline CoreFim simplex_fim(const ProbVector& p) {
  const Vector& v = p.values();
  Matrix m = -v * v.transpose();
  m.diagonal() += v;
  return {std::move(m), CoreKind::Simplex};
}

/// diag(p_i (1 - p_i)) for independent Bernoulli coordinates.
inline CoreFim hypercube_fim(const Vector& p) {
  require(p.size() >= 1, "hypercube_fim: empty input");
  for (Index i = 0; i < p.size(); ++i) {
    require(std::isfinite(p[i]) && p[i] >= 0.0 && p[i] <= 1.0,
            "hypercube_fim: entries must lie in [0, 1]");
  }
  Vector d = p.array() * (1.0 - p.array());
  return {Matrix(d.asDiagonal()), CoreKind::Hypercube};
}

/// diag(zeta) for caller-supplied non-negative weights.
inline CoreFim diag_weights_fim(const Vector& zeta) {
  require(zeta.size() >= 1, "diag_weights_fim: empty input");
  for (Index i = 0; i < zeta.size(); ++i) {
    require(std::isfinite(zeta[i]) && zeta[i] >= 0.0,
            "diag_weights_fim: weights must be non-negative");
  }
  return {Matrix(zeta.asDiagonal()), CoreKind::DiagWeights};
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver

struct SpectralDecomp {
  Vector eigenvalues;   // ascending
  Matrix eigenvectors;  // column i pairs with eigenvalues[i]

  double spectral_gap() const {
    const Index n = eigenvalues.size();
    return n >= 2 ? eigenvalues[n - 1] - eigenvalues[n - 2] : 0.0;
  }
  Matrix reconstruct() const {
    return eigenvectors * eigenvalues.asDiagonal() * eigenvectors.transpose();
  }
};

struct JacobiOptions {
  double off_diagonal_tolerance = 1e-13;
  int max_sweeps = 50;
};

/// Flip v so its largest-magnitude component is positive. Components within
/// 1e-12 of the maximum count as ties; the lowest index wins.
inline void canonicalize_sign(Eigen::Ref<Vector> v) {
  if (v.size() == 0) return;
  const double top = v.cwiseAbs().maxCoeff();
  for (Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) >= top - 1e-12) {
      if (v[i] < 0.0) v = -v;
      return;
    }
  }
}

inline bool is_symmetric(const Matrix& a, double rel_tol = 1e-12) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > rel_tol * scale) return false;
  return true;
}

/// Cyclic Jacobi rotations, row-major pivot order, until the largest
/// off-diagonal magnitude drops below the tolerance or the sweep budget is
/// spent. Eigenvalues come back ascending with sign-canonical eigenvectors.
inline SpectralDecomp jacobi_eigen(const Matrix& input, const JacobiOptions& opts = {}) {
  require(input.rows() == input.cols(), "jacobi_eigen: matrix must be square");
  require(is_symmetric(input), "jacobi_eigen: matrix must be symmetric");
  const Index n = input.rows();
  Matrix a = 0.5 * (input + input.transpose());
  Matrix v = Matrix::Identity(n, n);

  auto max_off = [&] {
    double m = 0.0;
    for (Index p = 0; p < n; ++p)
      for (Index q = p + 1; q < n; ++q) m = std::max(m, std::abs(a(p, q)));
    return m;
  };

  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    if (max_off() < opts.off_diagonal_tolerance) break;
    for (Index p = 0; p < n; ++p) {
      for (Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t;
        if (std::abs(theta) > 1e150) {
          t = 0.5 / theta;
        } else {
          t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index x, Index y) { return a(x, x) < a(y, y); });
  SpectralDecomp out{Vector(n), Matrix(n, n)};
  for (Index i = 0; i < n; ++i) {
    const Index src = order[static_cast<std::size_t>(i)];
    out.eigenvalues[i] = a(src, src);
    out.eigenvectors.col(i) = v.col(src);
    canonicalize_sign(out.eigenvectors.col(i));
  }
  return out;
}

inline SpectralDecomp spectrum(const CoreFim& m) {
  return jacobi_eigen(m.matrix);
}

/// Largest |eigenvalue| of a symmetric matrix by power iteration on A^2,
/// stopping when the estimate changes by less than `rel_tol` (relative).
inline double spectral_radius(const Matrix& a, int max_iterations = 100, double rel_tol = 1e-9,
                              std::uint64_t seed = 0x5eed) {
  require(a.rows() == a.cols(), "spectral_radius: matrix must be square");
  const Index n = a.rows();
  if (n == 0) return 0.0;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  v.normalize();
  double estimate = 0.0;
  for (int it = 0; it < max_iterations; ++it) {
    const Vector w = a * (a * v);
    const double wn = w.norm();  // Rayleigh quotient of A^2 is v^T A^2 v <= ||A^2 v||
    if (wn == 0.0) return 0.0;
    const double next = std::sqrt(v.dot(w));
    v = w / wn;
    if (it > 0 && std::abs(next - estimate) <= rel_tol * std::max(next, 1e-300)) {
      estimate = next;
      break;
    }
    estimate = next;
  }
  return estimate;
}

/// Smallest eigenvalue of a symmetric matrix: Jacobi up to `dense_limit`,
/// otherwise power iteration on rho I - A with rho from `spectral_radius`.
inline double min_eigenvalue(const Matrix& a, Index dense_limit = 512) {
  require(a.rows() == a.cols(), "min_eigenvalue: matrix must be square");
  const Index n = a.rows();
  require(n >= 1, "min_eigenvalue: empty matrix");
  const Matrix sym = 0.5 * (a + a.transpose());
  if (n <= dense_limit) return jacobi_eigen(sym).eigenvalues[0];
  const double rho = spectral_radius(sym, 1000, 1e-12);
  const Matrix shifted = rho * Matrix::Identity(n, n) - sym;
  Rng rng(0xfeed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  v.normalize();
  double mu = 0.0;
  for (int it = 0; it < 20000; ++it) {
    const Vector w = shifted * v;
    const double wn = w.norm();
    if (wn == 0.0) return rho;
    const double next = v.dot(w);
    v = w / wn;
    if (it > 0 && std::abs(next - mu) <= 1e-14 * std::max(rho, 1e-300)) {
      mu = next;
      break;
    }
    mu = next;
  }
  return rho - mu;
}

// ---------------------------------------------------------------------------
// Largest eigenvalue of the simplex metric

struct SpectrumBracket {
  double lower;
  double upper;
  bool contains(double value, double tol = 1e-12) const {
    return value >= lower - tol && value <= upper + tol;
  }
  double gap() const { return upper - lower; }
};

inline double max_bernoulli_variance(const ProbVector& p) {
  return (p.values().array() * (1.0 - p.values().array())).maxCoeff();
}

/// Closed-form bracket on lambda_C from the diagonal, the interlacing
/// order statistics, the trace, and the Gershgorin radius.
inline SpectrumBracket lambda_max_bracket(const ProbVector& p) {
  const Index c = p.size();
  const double trace = 1.0 - p.squared_norm();
  const double bern = max_bernoulli_variance(p);
  const double lower = std::max({bern, p.order_stat(c - 1), trace / static_cast<double>(c - 1)});
  const double upper = std::min({p.order_stat(c), 2.0 * bern, trace});
  return {lower, upper};
}

/// Upper bound on the bracket width, min{p_(C) - p_(C-1), max p_i(1-p_i)}.
inline double bracket_gap_bound(const ProbVector& p) {
  const Index c = p.size();
  return std::min(p.order_stat(c) - p.order_stat(c - 1), max_bernoulli_variance(p));
}

struct EigenMethod {
  enum class Kind { Full, Power };
  Kind kind = Kind::Power;
  int iterations = 30;
  /// When positive, power iteration stops as soon as the Rayleigh residual
  /// ||I v - lambda v|| falls to this level; `iterations` is then a cap.
  double residual_tolerance = 0.0;

  static EigenMethod full() { return {Kind::Full, 0, 0.0}; }
  static EigenMethod power(int iterations = 30, double residual_tolerance = 0.0) {
    return {Kind::Power, iterations, residual_tolerance};
  }
};

struct TopEigenpair {
  double value;
  Vector vector;
  int iterations = 0;  // power steps taken; 0 for the full solver
  double residual = 0.0;
};

namespace detail {

// I v for I = diag(p) - p p^T without forming the matrix.
inline Vector simplex_apply(const Vector& p, const Vector& v) {
  return (p.array() * v.array()).matrix() - p.dot(v) * p;
}

inline double simplex_rayleigh(const Vector& p, const Vector& v) {
  const double pv = p.dot(v);
  return p.dot(v.cwiseProduct(v)) - pv * pv;
}

}  // namespace detail

/// Dominant eigenpair of diag(p) - p p^T. The power variant starts from a
/// seeded Gaussian vector projected off the all-ones kernel.
inline TopEigenpair top_eigenpair(const ProbVector& p, const EigenMethod& method, Rng& rng) {
  const Index c = p.size();
  if (method.kind == EigenMethod::Kind::Full) {
    const SpectralDecomp d = spectrum(simplex_fim(p));
    Vector v = d.eigenvectors.col(c - 1);
    const double lambda = d.eigenvalues[c - 1];
    const double residual = (detail::simplex_apply(p.values(), v) - lambda * v).norm();
    return {lambda, std::move(v), 0, residual};
  }
  require(method.iterations >= 1, "top_eigenpair: power iteration needs T >= 1");

  const Vector& pv = p.values();
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(c);
  double norm = 0.0;
  while (norm == 0.0) {
    for (Index i = 0; i < c; ++i) v[i] = normal(rng);
    v.array() -= v.mean();
    norm = v.norm();
  }
  v /= norm;

  int steps = 0;
  double lambda = detail::simplex_rayleigh(pv, v);
  double residual = (detail::simplex_apply(pv, v) - lambda * v).norm();
  for (; steps < method.iterations; ++steps) {
    if (method.residual_tolerance > 0.0 && residual <= method.residual_tolerance) break;
    Vector w = detail::simplex_apply(pv, v);
    const double wn = w.norm();
    if (wn == 0.0) break;  // v already in the kernel (e.g. one-hot p)
    v = w / wn;
    lambda = detail::simplex_rayleigh(pv, v);
    if (method.residual_tolerance > 0.0)
      residual = (detail::simplex_apply(pv, v) - lambda * v).norm();
  }
  residual = (detail::simplex_apply(pv, v) - lambda * v).norm();
  canonicalize_sign(v);
  return {lambda, std::move(v), steps, residual};
}

// ---------------------------------------------------------------------------
// Envelopes

struct EnvelopeErrors {
  double diag_error;         // ||I - diag(p)||_F, equals ||p||^2
  double rank1_error_bound;  // closed-form bound on ||I - lambda_C v_C v_C^T||_F
  double rank1_error;        // realised Frobenius error of the rank-1 envelope
};

/// min{1 - ||p||^2 - p_(C-1), ||(p_(2), ..., p_(C-1))||}.
inline double rank1_envelope_bound(const ProbVector& p) {
  const Index c = p.size();
  double trimmed = 0.0;
  for (Index i = 2; i <= c - 1; ++i) trimmed += p.order_stat(i) * p.order_stat(i);
  return std::min(1.0 - p.squared_norm() - p.order_stat(c - 1), std::sqrt(trimmed));
}

inline EnvelopeErrors envelope_errors(const ProbVector& p) {
  const CoreFim fim = simplex_fim(p);
  Matrix diag_gap = fim.matrix;
  diag_gap.diagonal() -= p.values();
  const SpectralDecomp d = spectrum(fim);
  const Index c = p.size();
  const Vector top = d.eigenvectors.col(c - 1);
  const Matrix rank1 = d.eigenvalues[c - 1] * top * top.transpose();
  return {diag_gap.norm(), rank1_envelope_bound(p), (fim.matrix - rank1).norm()};
}

// ---------------------------------------------------------------------------
// Rank-1 empirical core

struct EmpiricalCore {
  Matrix matrix;
  Index label;
};

/// R(y) = (e_y - p)(e_y - p)^T with a 0-based label.
inline EmpiricalCore empirical_core(const ProbVector& p, Index label) {
  require(label >= 0 && label < p.size(), "empirical_core: label out of range");
  Vector r = -p.values();
  r[label] += 1.0;
  return {r * r.transpose(), label};
}

/// Element-wise Var(R_ij) when y ~ p.
inline Matrix empirical_core_variance(const ProbVector& p) {
  const Vector& v = p.values();
  const Index c = v.size();
  Matrix out(c, c);
  for (Index i = 0; i < c; ++i) {
    for (Index j = 0; j < c; ++j) {
      if (i == j) {
        const double b = v[i] * (1.0 - v[i]);
        out(i, i) = b * (1.0 - 4.0 * b);
      } else {
        out(i, j) = v[i] * v[j] * (v[i] + v[j] - 4.0 * v[i] * v[j]);
      }
    }
  }
  return out;
}

struct EmpiricalCoreFloor {
  double tight;    // 1 + ||p||^2 - lambda_C - 2 p_(1)
  double relaxed;  // 2 ||p||^2 - 2 p_(1)
  Index label;     // a label attaining p_(1)
};

/// Frobenius error that R(y) must reach for the least likely label.
inline EmpiricalCoreFloor empirical_core_floor(const ProbVector& p) {
  const Index c = p.size();
  const double lambda = spectrum(simplex_fim(p)).eigenvalues[c - 1];
  const double sq = p.squared_norm();
  return {1.0 + sq - lambda - 2.0 * p.order_stat(1), 2.0 * sq - 2.0 * p.order_stat(1),
          p.order_index(1)};
}

}  // namespace fimlab::core
