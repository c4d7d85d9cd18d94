#pragma once

// Deterministic Loewner-order bounds on the parameter-space FIM of a
// softmax classifier and the certificates that measure how loose they are.
// Every quantity is built from per-sample Jacobians, output probabilities
// and the spectrum of the simplex metric diag(p) - p p^T.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimlab/common.hpp"
#include "fimlab/core_space.hpp"
#include "fimlab/network.hpp"

namespace fimlab::bounds {

/// Largest |eigenvalue| of a symmetric matrix. Jacobi up to `dense_limit`;
/// above it, power iteration on the square (100 iterations, relative
/// tolerance 1e-9), which can stall when |lambda_max| ~ |lambda_min|.
inline double spectral_norm(const Matrix& a, Index dense_limit = 512) {
  require(a.rows() == a.cols(), "spectral_norm: matrix must be square");
  const Matrix sym = 0.5 * (a + a.transpose());
  if (sym.rows() == 0) return 0.0;
  if (sym.rows() <= dense_limit) return core::jacobi_eigen(sym).eigenvalues.cwiseAbs().maxCoeff();
  return core::spectral_radius(sym);
}

/// Smallest eigenvalue of B - A; non-negative (to rounding) iff A <= B.
inline double loewner_margin(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "loewner_margin: shape mismatch");
  require(a.rows() == a.cols(), "loewner_margin: matrices must be square");
  return core::min_eigenvalue(b - a);
}

/// Everything the bounds need from one input sample.
struct SampleTerms {
  nn::JacobianBlock jac;
  core::ProbVector p;
  core::SpectralDecomp eig;  // of diag(p) - p p^T, ascending

  Index classes() const { return p.size(); }
  double sigma(Index i) const { return jac.singular_values[i - 1]; }  // 1-based, ascending
  double lambda(Index i) const { return eig.eigenvalues[i - 1]; }     // 1-based, ascending
};

inline SampleTerms sample_terms(const nn::NetworkSpec& spec, const Vector& theta, const Vector& x) {
  nn::JacobianBlock jb = nn::per_sample_jacobian(spec, theta, x);
  core::ProbVector p = core::ProbVector::softmax(jb.logits);
  core::SpectralDecomp eig = core::jacobi_eigen(core::simplex_fim(p).matrix);
  return {std::move(jb), std::move(p), std::move(eig)};
}

inline std::vector<SampleTerms> all_sample_terms(const nn::NetworkSpec& spec, const Vector& theta,
                                                 const Matrix& x) {
  require(x.rows() >= 1, "bounds: dataset must contain at least one sample");
  require(x.cols() == spec.input_dim(), "bounds: dataset width does not match the network input");
  std::vector<SampleTerms> out;
  out.reserve(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) out.push_back(sample_terms(spec, theta, x.row(r).transpose()));
  return out;
}

inline Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// sum_x J^T core J.
template <class CoreOf>
Matrix pullback_sum(const std::vector<SampleTerms>& terms, CoreOf core_of) {
  const Index dim = terms.front().jac.matrix.cols();
  Matrix out = Matrix::Zero(dim, dim);
  for (const auto& t : terms) out.noalias() += t.jac.matrix.transpose() * core_of(t) * t.jac.matrix;
  return symmetrized(out);
}

inline Matrix exact_core(const SampleTerms& t) { return core::simplex_fim(t.p).matrix; }

/// Top-k part of the simplex metric: sum_{i > C-k} lambda_i v_i v_i^T.
inline Matrix top_k_core(const SampleTerms& t, Index k) {
  const Index c = t.classes();
  Matrix out = Matrix::Zero(c, c);
  for (Index i = c - k; i < c; ++i)
    out.noalias() += t.eig.eigenvalues[i] * t.eig.eigenvectors.col(i) * t.eig.eigenvectors.col(i).transpose();
  return out;
}

inline Matrix diag_core(const SampleTerms& t) { return Matrix(t.p.values().asDiagonal()); }

/// (e_y - p)(e_y - p)^T for a 0-based label.
inline Matrix label_core(const SampleTerms& t, Index y) {
  Vector r = -t.p.values();
  r[y] += 1.0;
  return r * r.transpose();
}

// ---------------------------------------------------------------------------
// Sandwich and trace chain

struct BoundPair {
  Matrix lower;  // rank <= k |D_x|
  Matrix upper;
  Index k = 1;
};

inline void check_rank(Index k, Index classes) {
  require(k >= 1 && k <= classes - 1, "bounds: k must lie in [1, C-1]");
}

inline BoundPair pullback_bounds(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x, Index k) {
  check_rank(k, spec.num_classes());
  const auto terms = all_sample_terms(spec, theta, x);
  return {pullback_sum(terms, [k](const SampleTerms& t) { return top_k_core(t, k); }),
          pullback_sum(terms, diag_core), k};
}

struct TraceBounds {
  double lower = 0.0;     // sum lambda_C sigma_1^2
  double vn_lower = 0.0;  // sum_{i>=2} lambda_i sigma_{C+1-i}^2
  double trace = 0.0;     // tr F
  double upper = 0.0;     // sum_y p_y ||dz_y/dtheta||^2

  bool ordered(double tol = 1e-10) const {
    return lower <= vn_lower + tol && vn_lower <= trace + tol && trace <= upper + tol;
  }
};

inline TraceBounds trace_bounds(const std::vector<SampleTerms>& terms) {
  TraceBounds tb;
  for (const auto& t : terms) {
    const Index c = t.classes();
    const Matrix& j = t.jac.matrix;
    tb.lower += t.lambda(c) * t.sigma(1) * t.sigma(1);
    for (Index i = 2; i <= c; ++i) tb.vn_lower += t.lambda(i) * t.sigma(c + 1 - i) * t.sigma(c + 1 - i);
    const Vector row_sq = j.rowwise().squaredNorm();
    const Vector& p = t.p.values();
    tb.upper += p.dot(row_sq);
    // tr(J^T (diag p - p p^T) J) = sum_y p_y ||J_y||^2 - ||J^T p||^2
    tb.trace += p.dot(row_sq) - (j.transpose() * p).squaredNorm();
  }
  return tb;
}

inline TraceBounds trace_bounds(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x) {
  return trace_bounds(all_sample_terms(spec, theta, x));
}

// ---------------------------------------------------------------------------
// Tightness

inline constexpr std::size_t kLabelEnumerationCap = 1024;

struct TightnessReport {
  Index k = 1;

  // upper bound, Frobenius norm
  double upper_gap_lhs = 0.0;  // sqrt(sum ||J^T p||^4)
  double upper_gap = 0.0;      // ||upper - F||_F
  double upper_gap_rhs = 0.0;  // sum ||p||^2 sigma_C^2

  // rank-k lower bound, Frobenius norm
  double lower_gap = 0.0;
  double lower_gap_rhs = 0.0;      // sum sqrt(sum_{i=2}^{C-k} sigma_{i+k}^4 p_(i)^2)
  double lower_gap_relaxed = 0.0;  // sum sqrt(sum_{i=2}^{C-k} p_(i)^2) sigma_C^2

  // per-sample comparison of the two right-hand sides; "in general", not always
  std::vector<double> upper_rhs_terms;
  std::vector<double> lower_rhs_terms;
  bool lower_rhs_tighter = true;

  // empirical FIM, spectral norm
  double efim_gap_bound = 0.0;              // sum (1 + ||p||^2) sigma_C^2
  std::optional<double> efim_gap;           // at the supplied labels
  std::optional<double> efim_gap_worst;     // max over the label vectors searched
  std::size_t label_vectors_checked = 0;
  bool label_search_exhaustive = false;     // every one of the C^|D_x| vectors was visited

  // per-sample adversarial label (exhaustive over y)
  std::vector<double> efim_adversarial_floor;  // sigma_1^2 |1 + ||p||^2 - lambda_C - 2 p_(1)|
  std::vector<double> efim_adversarial_error;  // max_y ||J^T (I - R(y)) J||_sigma
  std::vector<Index> efim_adversarial_label;

  // trace chain
  double trace_lower = 0.0;
  double trace_vn_lower = 0.0;
  double trace_mid = 0.0;
  double trace_upper = 0.0;
};

/// All gap quantities for one (network, parameters, inputs) triple.
/// `labels` are 0-based; without them only the label-free entries and the
/// exhaustive label searches are filled.
inline TightnessReport tightness_report(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x, Index k,
                                        const std::optional<std::vector<Index>>& labels = std::nullopt,
                                        std::size_t enumeration_cap = kLabelEnumerationCap) {
  const Index c = spec.num_classes();
  check_rank(k, c);
  if (labels) {
    require(labels->size() == static_cast<std::size_t>(x.rows()), "tightness_report: one label per sample");
    for (Index y : *labels) require(y >= 0 && y < c, "tightness_report: label out of range");
  }
  const auto terms = all_sample_terms(spec, theta, x);
  const Matrix f = pullback_sum(terms, exact_core);
  const Matrix upper = pullback_sum(terms, diag_core);
  const Matrix lower = pullback_sum(terms, [k](const SampleTerms& t) { return top_k_core(t, k); });

  TightnessReport r;
  r.k = k;
  r.upper_gap = (upper - f).norm();
  r.lower_gap = (lower - f).norm();
  double lhs_sq = 0.0;
  for (const auto& t : terms) {
    const Vector& p = t.p.values();
    const double sc2 = t.sigma(c) * t.sigma(c);
    const double jp = (t.jac.matrix.transpose() * p).squaredNorm();
    lhs_sq += jp * jp;

    const double upper_term = p.squaredNorm() * sc2;
    double tight = 0.0, trimmed = 0.0;
    for (Index i = 2; i <= c - k; ++i) {
      const double s = t.sigma(i + k) * t.sigma(i + k);
      const double pi = t.p.order_stat(i);
      tight += s * s * pi * pi;
      trimmed += pi * pi;
    }
    const double lower_term = std::sqrt(tight);
    r.upper_gap_rhs += upper_term;
    r.lower_gap_rhs += lower_term;
    r.lower_gap_relaxed += std::sqrt(trimmed) * sc2;
    r.upper_rhs_terms.push_back(upper_term);
    r.lower_rhs_terms.push_back(lower_term);
    if (lower_term > upper_term) r.lower_rhs_tighter = false;

    r.efim_gap_bound += (1.0 + p.squaredNorm()) * sc2;

    const double s1 = t.sigma(1);
    r.efim_adversarial_floor.push_back(s1 * s1 *
                                       std::abs(1.0 + p.squaredNorm() - t.lambda(c) - 2.0 * t.p.order_stat(1)));
    const Matrix base = exact_core(t);
    double best = -1.0;
    Index best_y = 0;
    for (Index y = 0; y < c; ++y) {
      const Matrix diff = t.jac.matrix.transpose() * (base - label_core(t, y)) * t.jac.matrix;
      const double err = spectral_norm(diff);
      if (err > best) {
        best = err;
        best_y = y;
      }
    }
    r.efim_adversarial_error.push_back(best);
    r.efim_adversarial_label.push_back(best_y);
  }
  r.upper_gap_lhs = std::sqrt(lhs_sq);

  // F - eFIM(y) = sum_x D_x(y_x) with D_x(y) = J^T (core - R(y)) J.
  const Index n = static_cast<Index>(terms.size());
  auto sample_diff = [&](Index s, Index y) {
    const auto& t = terms[static_cast<std::size_t>(s)];
    return Matrix(t.jac.matrix.transpose() * (exact_core(t) - label_core(t, y)) * t.jac.matrix);
  };
  if (labels) {
    Matrix d = Matrix::Zero(f.rows(), f.cols());
    for (Index s = 0; s < n; ++s) d += sample_diff(s, (*labels)[static_cast<std::size_t>(s)]);
    r.efim_gap = spectral_norm(d);
  }
  std::vector<std::vector<Matrix>> parts(static_cast<std::size_t>(n));
  for (Index s = 0; s < n; ++s)
    for (Index y = 0; y < c; ++y) parts[static_cast<std::size_t>(s)].push_back(sample_diff(s, y));
  double worst = 0.0;
  auto visit = [&](const Matrix& d) {
    worst = std::max(worst, spectral_norm(d));
    ++r.label_vectors_checked;
  };
  double combos = 1.0;
  for (Index s = 0; s < n; ++s) combos *= static_cast<double>(c);
  r.label_search_exhaustive = combos <= static_cast<double>(enumeration_cap);
  if (r.label_search_exhaustive) {
    std::vector<Index> ys(static_cast<std::size_t>(n), 0);
    Matrix d = Matrix::Zero(f.rows(), f.cols());
    for (Index s = 0; s < n; ++s) d += parts[static_cast<std::size_t>(s)][0];
    while (true) {
      visit(d);
      // odometer step, updating the running sum one sample at a time
      Index s = 0;
      for (; s < n; ++s) {
        auto& y = ys[static_cast<std::size_t>(s)];
        const auto& ps = parts[static_cast<std::size_t>(s)];
        d -= ps[static_cast<std::size_t>(y)];
        y = (y + 1) % c;
        d += ps[static_cast<std::size_t>(y)];
        if (y != 0) break;
      }
      if (s == n) break;
    }
  } else {
    // too many vectors: every constant labelling plus the per-sample adversarial one
    for (Index y = 0; y < c; ++y) {
      Matrix d = Matrix::Zero(f.rows(), f.cols());
      for (Index s = 0; s < n; ++s) d += parts[static_cast<std::size_t>(s)][static_cast<std::size_t>(y)];
      visit(d);
    }
    Matrix d = Matrix::Zero(f.rows(), f.cols());
    for (Index s = 0; s < n; ++s)
      d += parts[static_cast<std::size_t>(s)][static_cast<std::size_t>(r.efim_adversarial_label[static_cast<std::size_t>(s)])];
    visit(d);
  }
  r.efim_gap_worst = worst;

  const TraceBounds tb = trace_bounds(terms);
  r.trace_lower = tb.lower;
  r.trace_vn_lower = tb.vn_lower;
  r.trace_mid = tb.trace;
  r.trace_upper = tb.upper;
  return r;
}

/// Names the first violated chain, or returns an empty string.
inline std::string check_report(const TightnessReport& r, double tol = 1e-10) {
  auto scaled = [tol](double v) { return tol * std::max(1.0, std::abs(v)); };
  if (r.upper_gap_lhs > r.upper_gap + scaled(r.upper_gap)) return "upper gap below its lower estimate";
  if (r.upper_gap > r.upper_gap_rhs + scaled(r.upper_gap_rhs)) return "upper gap above its bound";
  if (r.lower_gap > r.lower_gap_rhs + scaled(r.lower_gap_rhs)) return "lower gap above its bound";
  if (r.lower_gap_rhs > r.lower_gap_relaxed + scaled(r.lower_gap_relaxed)) return "relaxed bound below the tight one";
  if (r.efim_gap && *r.efim_gap > r.efim_gap_bound + scaled(r.efim_gap_bound)) return "efim gap above its bound";
  if (r.efim_gap_worst && *r.efim_gap_worst > r.efim_gap_bound + scaled(r.efim_gap_bound))
    return "worst-label efim gap above its bound";
  for (std::size_t i = 0; i < r.efim_adversarial_floor.size(); ++i) {
    if (r.efim_adversarial_error[i] < r.efim_adversarial_floor[i] - scaled(r.efim_adversarial_floor[i]))
      return "adversarial label misses the floor at sample " + std::to_string(i);
  }
  const TraceBounds tb{r.trace_lower, r.trace_vn_lower, r.trace_mid, r.trace_upper};
  if (!tb.ordered(scaled(r.trace_upper))) return "trace chain out of order";
  return {};
}

inline nlohmann::json to_json(const TightnessReport& r) {
  nlohmann::json j;
  j["k"] = r.k;
  j["upper_gap_lhs"] = r.upper_gap_lhs;
  j["upper_gap"] = r.upper_gap;
  j["upper_gap_rhs"] = r.upper_gap_rhs;
  j["lower_gap"] = r.lower_gap;
  j["lower_gap_rhs"] = r.lower_gap_rhs;
  j["lower_gap_relaxed"] = r.lower_gap_relaxed;
  j["upper_rhs_terms"] = r.upper_rhs_terms;
  j["lower_rhs_terms"] = r.lower_rhs_terms;
  j["lower_rhs_tighter"] = r.lower_rhs_tighter;
  j["efim_gap_bound"] = r.efim_gap_bound;
  j["efim_gap"] = r.efim_gap ? nlohmann::json(*r.efim_gap) : nlohmann::json(nullptr);
  j["efim_gap_worst"] = r.efim_gap_worst ? nlohmann::json(*r.efim_gap_worst) : nlohmann::json(nullptr);
  j["label_vectors_checked"] = r.label_vectors_checked;
  j["label_search_exhaustive"] = r.label_search_exhaustive;
  j["efim_adversarial_floor"] = r.efim_adversarial_floor;
  j["efim_adversarial_error"] = r.efim_adversarial_error;
  j["efim_adversarial_label"] = r.efim_adversarial_label;
  j["trace_lower"] = r.trace_lower;
  j["trace_vn_lower"] = r.trace_vn_lower;
  j["trace_mid"] = r.trace_mid;
  j["trace_upper"] = r.trace_upper;
  return j;
}

}  // namespace fimlab::bounds
