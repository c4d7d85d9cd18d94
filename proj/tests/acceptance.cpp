// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. `acceptance --only N` runs a single criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fimlab/fimlab.hpp"
#include "oracles.hpp"

#ifndef FIMLAB_DESK_CONFIG
#define FIMLAB_DESK_CONFIG "configs/desk.conf"
#endif

using namespace fimlab;
using est::HutchinsonObjective;
using est::HutchinsonVariant;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Records the first failure and keeps a running note of the worst values.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && first_.empty()) first_ = what;
    ok_ = ok_ && ok;
  }
  bool ok() const { return ok_; }
  Outcome done(const std::string& summary) const {
    return {ok_, ok_ ? summary : summary + "; first failure: " + first_};
  }

 private:
  bool ok_ = true;
  std::string first_;
};

std::string fmt(const char* format, double a = 0, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// The shared simplex instance set: 10^4 Dirichlet points cycling through
// C in {2, 3, 5, 10, 50}, alternating concentration 1 and 0.3.
std::vector<core::ProbVector> simplex_points() {
  const Index sizes[] = {2, 3, 5, 10, 50};
  Rng rng(20240601);
  std::vector<core::ProbVector> out;
  out.reserve(10000);
  for (int i = 0; i < 10000; ++i)
    out.emplace_back(oracle::dirichlet(sizes[i % 5], (i / 5) % 2 ? 0.3 : 1.0, rng));
  return out;
}

Outcome core_spectral() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto points = simplex_points();
  Check chk;
  double worst_zero = 0.0, worst_trace = 0.0, worst_bracket = 0.0;
  for (std::size_t n = 0; n < points.size(); ++n) {
    const core::ProbVector& p = points[n];
    const Index c = p.size();
    const core::SpectralDecomp d = core::spectrum(core::simplex_fim(p));
    const double top = d.eigenvalues[c - 1];
    const double trace_gap = std::abs(d.eigenvalues.sum() - (1.0 - p.squared_norm()));
    const core::SpectrumBracket b = core::lambda_max_bracket(p);
    const double outside = std::max({0.0, b.lower - top, top - b.upper});
    worst_zero = std::max(worst_zero, std::abs(d.eigenvalues[0]));
    worst_trace = std::max(worst_trace, trace_gap);
    worst_bracket = std::max(worst_bracket, outside);
    chk.expect(std::abs(d.eigenvalues[0]) <= 1e-10, "lambda_1 != 0 at instance " + std::to_string(n));
    chk.expect(trace_gap <= 1e-10, "trace identity at instance " + std::to_string(n));
    chk.expect(outside <= 1e-10, "bracket misses lambda_C at instance " + std::to_string(n));
  }
  const double secs = seconds_since(t0);
  chk.expect(secs < 30.0, "runtime over 30 s");
  return chk.done(fmt("|lambda_1|<=%.1e, trace err<=%.1e, bracket excess<=%.1e, %.2f s", worst_zero, worst_trace,
                      worst_bracket, secs));
}

Outcome envelopes() {
  const auto points = simplex_points();
  Check chk;
  double worst_margin = 0.0, worst_slack = -1.0, worst_diag = 0.0;
  for (std::size_t n = 0; n < points.size(); ++n) {
    const core::ProbVector& p = points[n];
    const Index c = p.size();
    const Matrix f = core::simplex_fim(p).matrix;
    const core::SpectralDecomp d = core::spectrum(core::simplex_fim(p));
    const Vector v = d.eigenvectors.col(c - 1);
    const Matrix rank1 = d.eigenvalues[c - 1] * v * v.transpose();
    const double upper_margin = oracle::min_eig(Matrix(p.values().asDiagonal()) - f);
    const double lower_margin = oracle::min_eig(f - rank1);
    worst_margin = std::min({worst_margin, upper_margin, lower_margin});
    const core::EnvelopeErrors e = core::envelope_errors(p);
    worst_slack = std::max(worst_slack, e.rank1_error - e.rank1_error_bound);
    worst_diag = std::max(worst_diag, std::abs(e.diag_error - p.squared_norm()));
    const std::string at = " at instance " + std::to_string(n);
    chk.expect(upper_margin >= -1e-10 && lower_margin >= -1e-10, "Loewner margin" + at);
    chk.expect(e.rank1_error <= e.rank1_error_bound + 1e-10, "rank-1 error above bound" + at);
    chk.expect(std::abs(e.diag_error - p.squared_norm()) <= 1e-12, "diag error != ||p||^2" + at);
    chk.expect(e.diag_error >= 1.0 / static_cast<double>(c) - 1e-12, "diag error below 1/C" + at);
  }
  return chk.done(fmt("min margin %.1e, max(rank1 err - bound) %.1e, diag err dev %.1e", worst_margin, worst_slack,
                      worst_diag));
}

Outcome empirical_core_suite() {
  const auto points = simplex_points();
  Check chk;
  double worst_var = 0.0, min_excess = INFINITY;
  for (std::size_t n = 0; n < points.size(); ++n) {
    const core::ProbVector& p = points[n];
    const Index c = p.size();
    const Matrix f = core::simplex_fim(p).matrix;
    Matrix var = Matrix::Zero(c, c);
    double best = 0.0;
    for (Index y = 0; y < c; ++y) {
      const Matrix r = core::empirical_core(p, y).matrix;
      var += p[y] * (r - f).cwiseAbs2();
      best = std::max(best, (r - f).norm());
    }
    const double dev = (core::empirical_core_variance(p) - var).cwiseAbs().maxCoeff();
    const core::EmpiricalCoreFloor floor = core::empirical_core_floor(p);
    const double at_label = (core::empirical_core(p, floor.label).matrix - f).norm();
    worst_var = std::max(worst_var, dev);
    min_excess = std::min(min_excess, std::min(best, at_label) - floor.tight);
    const std::string at = " at instance " + std::to_string(n);
    chk.expect(dev <= 1e-12, "variance formula" + at);
    chk.expect(best >= floor.tight - 1e-12, "no label reaches the floor" + at);
    chk.expect(at_label >= floor.tight - 1e-12, "adversarial label below the floor" + at);
  }
  return chk.done(fmt("variance dev<=%.1e, min(error - floor)=%.1e", worst_var, min_excess));
}

Outcome oracle_equality() {
  Rng rng(404);
  Check chk;
  double worst = 0.0;
  Index max_dim = 0;
  for (int n = 0; n < 100; ++n) {
    const auto in = oracle::random_instance(rng, 200, {2, 3, 5, 10}, {1, 2, 4});
    const Matrix a = est::exact_fim_definition(in.spec, in.theta, in.x, est::Storage::Dense).dense;
    const Matrix b = est::exact_fim_pullback(in.spec, in.theta, in.x, est::Storage::Dense).dense;
    const double gap = (a - b).norm();
    worst = std::max(worst, gap);
    max_dim = std::max(max_dim, in.theta.size());
    chk.expect(gap <= 1e-10, "instance " + std::to_string(n));
  }
  return chk.done(fmt("max Frobenius gap %.1e, largest dim %.0f", worst, static_cast<double>(max_dim)));
}

Outcome hutchinson_unbiased() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(505);
  Check chk;
  double worst = 0.0;
  int instances = 0, largest = 0;
  while (instances < 24) {
    const auto in = oracle::random_instance(rng, 40, {2, 3, 5, 7}, {1, 2});
    const Index c = in.spec.num_classes();
    if (c * in.x.rows() > 14) continue;
    ++instances;
    largest = std::max(largest, static_cast<int>(c * in.x.rows()));
    const Matrix f = est::exact_fim_definition(in.spec, in.theta, in.x, est::Storage::Dense).dense;
    auto compare = [&](const HutchinsonVariant& v, const Matrix& target) {
      HutchinsonObjective obj(in.spec, in.theta, in.x, v, rng);
      const double gap = (oracle::exhaustive_moments(obj).mean - target).norm();
      worst = std::max(worst, gap);
      chk.expect(gap <= 1e-10, v.name() + " on instance " + std::to_string(instances));
    };
    compare(HutchinsonVariant::full(), f);
    compare(HutchinsonVariant::sqrt(), f);
    compare(HutchinsonVariant::dg(), oracle::upper_bound_matrix(in));
    compare(HutchinsonVariant::lr(1, core::EigenMethod::full()), oracle::lower_bound_matrix(in, 1));
    if (c >= 3) compare(HutchinsonVariant::lr(2, core::EigenMethod::full()), oracle::lower_bound_matrix(in, 2));
  }
  const double secs = seconds_since(t0);
  chk.expect(secs < 60.0, "runtime over 60 s");
  return chk.done(fmt("%.0f instances up to C|D|=%.0f, max Frobenius gap %.1e, %.2f s", instances, largest, worst, secs));
}

Outcome variance_formulas() {
  Rng rng(606);
  Check chk;
  double worst = 0.0, max_cv = 0.0;
  for (int n = 0; n < 16;) {
    const auto in = oracle::random_instance(rng, 40, {2, 3, 4, 5}, {1, 2, 3});
    const Index c = in.spec.num_classes();
    if (c * in.x.rows() > 12) continue;
    ++n;
    std::vector<HutchinsonVariant> variants{HutchinsonVariant::full(), HutchinsonVariant::sqrt(),
                                            HutchinsonVariant::dg(), HutchinsonVariant::lr(1)};
    if (c >= 3) variants.push_back(HutchinsonVariant::lr(2));
    for (const auto& v : variants) {
      HutchinsonObjective obj(in.spec, in.theta, in.x, v, rng);
      const auto m = oracle::exhaustive_moments(obj);
      const est::VarianceReport rep =
          est::variance_closed_form(in.spec, in.theta, in.x, v, est::ProbeDist::Rademacher, &obj.basis());
      const double gap = (rep.closed_form - m.diag_var).cwiseAbs().maxCoeff();
      worst = std::max(worst, gap);
      chk.expect(gap <= 1e-10, v.name() + " closed form on instance " + std::to_string(n));
      for (Index i = 0; i < rep.cv.size(); ++i)
        if (rep.target[i] > 0.0) {
          max_cv = std::max(max_cv, rep.cv[i]);
          chk.expect(rep.cv[i] <= std::sqrt(2.0) + 1e-12, v.name() + " CV above sqrt 2");
        }
    }
  }

  // Gaussian probes: Var(g_i^2) = 2 F_ii^2, by simulation.
  Rng sim(607);
  const auto in = oracle::random_instance(sim, 40, {3}, {2});
  HutchinsonObjective obj(in.spec, in.theta, in.x, HutchinsonVariant::full(), sim);
  est::VarianceReport rep =
      est::variance_closed_form(in.spec, in.theta, in.x, HutchinsonVariant::full(), est::ProbeDist::Gaussian);
  est::empirical_variance(obj, 1000000, est::ProbeDist::Gaussian, sim, rep);
  double worst_law = 0.0;
  const double scale = rep.target.maxCoeff();
  for (Index i = 0; i < rep.target.size(); ++i) {
    if (rep.target[i] <= 1e-12 * scale) continue;
    const double rel = std::abs(rep.empirical[i] / (2.0 * rep.target[i] * rep.target[i]) - 1.0);
    worst_law = std::max(worst_law, rel);
  }
  chk.expect(worst_law <= 0.03, "Gaussian 2F^2 law off by more than 3%");
  return chk.done(fmt("closed-form dev<=%.1e, max CV %.6f, Gaussian law rel err %.2f%%", worst, max_cv,
                      100.0 * worst_law));
}

Outcome bounds_suite() {
  Rng rng(707);
  Check chk;
  double worst_margin = 0.0;
  int reports = 0;
  for (int n = 0; n < 200; ++n) {
    const auto in = oracle::random_instance(rng, 50, {2, 3, 5, 10}, {1, 2, 4}, n % 2 ? 2.0 : 1.0);
    const Index c = in.spec.num_classes();
    const Matrix f = est::exact_fim_pullback(in.spec, in.theta, in.x, est::Storage::Dense).dense;
    std::vector<Index> labels;
    std::uniform_int_distribution<Index> pick(0, c - 1);
    for (Index r = 0; r < in.x.rows(); ++r) labels.push_back(pick(rng));
    const std::string at = " at instance " + std::to_string(n);
    Matrix previous;
    for (Index k = 1; k < c; ++k) {
      const bounds::BoundPair b = bounds::pullback_bounds(in.spec, in.theta, in.x, k);
      const double m = std::min(bounds::loewner_margin(b.lower, f), bounds::loewner_margin(f, b.upper));
      worst_margin = std::min(worst_margin, m);
      chk.expect(m >= -1e-10, "sandwich k=" + std::to_string(k) + at);
      if (k > 1) chk.expect(bounds::loewner_margin(previous, b.lower) >= -1e-10, "lower bound not monotone" + at);
      previous = b.lower;
      const bounds::TightnessReport r = bounds::tightness_report(in.spec, in.theta, in.x, k, labels);
      const std::string why = bounds::check_report(r);
      chk.expect(why.empty(), why + " k=" + std::to_string(k) + at);
      ++reports;
    }
  }

  Rng fixture(708);
  const auto base = oracle::margin_instance(fixture, 3, 5, 3, 0.0);
  double previous = INFINITY;
  std::string trail;
  for (double margin : {2.0, 5.0, 10.0, 20.0}) {
    auto in = base;
    in.theta[3 * 5] = margin;
    const bounds::TightnessReport r = bounds::tightness_report(in.spec, in.theta, in.x, 1);
    chk.expect(r.lower_gap_rhs < previous, "lower-gap bound not decreasing at margin " + std::to_string(margin));
    chk.expect(bounds::check_report(r).empty(), "chain fails at margin " + std::to_string(margin));
    previous = r.lower_gap_rhs;
    trail += (trail.empty() ? "" : " > ") + fmt("%.1e", r.lower_gap_rhs);
  }
  return chk.done(fmt("%.0f reports, min sandwich margin %.1e; lower-gap bound over margins 2,5,10,20: ",
                      reports, worst_margin) +
                  trail);
}

Outcome gradient_integrity() {
  const std::vector<nn::NetworkSpec> archs = {
      nn::NetworkSpec::mlp({4, 6, 5, 3}, nn::Activation::Tanh),
      nn::NetworkSpec::mlp({4, 6, 5, 3}, nn::Activation::Relu),
      {{3, 4, 1}, nn::Activation::Tanh, true, nn::Head::Logistic},
  };
  Check chk;
  double worst = 0.0;
  int checks = 0;
  for (std::size_t a = 0; a < archs.size(); ++a) {
    const nn::NetworkSpec& spec = archs[a];
    const Index c = spec.num_classes();
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      const Vector theta = nn::init_params(spec, rng);
      std::normal_distribution<double> normal(0.0, 1.0);
      Matrix x(3, spec.input_dim());
      for (Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
      const std::string at = " arch " + std::to_string(a) + " seed " + std::to_string(seed);

      auto f = [&](auto& tape, auto th) {
        auto z = nn::record_logits(spec, tape, th, x);
        auto lik = gather(log_softmax(z), {0, 1, 1});
        return add(sum(lik), sum(sqrt(clamp_min(exp(scale(z, 0.5)), 1e-30))));
      };
      const double e = ad::grad_check(f, theta, 1e-5);
      worst = std::max(worst, e);
      ++checks;
      chk.expect(e <= 1e-6, "likelihood" + at);

      std::vector<HutchinsonVariant> variants{HutchinsonVariant::full(), HutchinsonVariant::sqrt(),
                                              HutchinsonVariant::dg(), HutchinsonVariant::lr(1)};
      if (c >= 3) variants.push_back(HutchinsonVariant::lr(2));
      for (const auto& v : variants) {
        const Vector xi = est::sample_probe(est::probe_size(spec, x.rows(), v), est::ProbeDist::Rademacher, rng);
        const est::LowRankBasis basis = v.type == HutchinsonVariant::Type::Lr
                                            ? est::low_rank_basis(nn::forward_logits(spec, theta, x), v.k, v.eigen, rng)
                                            : est::LowRankBasis{};
        auto h = [&](auto& tape, auto th) { return est::record_h(spec, tape, th, x, v, xi, &basis).root; };
        const double eh = ad::grad_check(h, theta, 1e-5);
        worst = std::max(worst, eh);
        ++checks;
        chk.expect(eh <= 1e-6, "probe objective " + v.name() + at);
      }
    }
  }
  return chk.done(fmt("%.0f checks, max relative error %.1e", checks, worst));
}

Outcome heavy_tail() {
  Check chk;
  std::string detail;
  for (double nu : {4.5, 6.0, 12.0}) {
    Rng rng(12345);
    const harness::CvReport r = harness::cv_demo(nu, 1, 1000000, rng);
    const double rel = std::abs(r.moment_ratio / r.moment_ratio_closed - 1.0);
    chk.expect(rel <= 0.05, fmt("nu=%.1f ratio %.3f vs %.3f", nu, r.moment_ratio, r.moment_ratio_closed));
    detail += (detail.empty() ? "" : "; ") +
              fmt("nu=%.1f ratio %.3f/%.2f (%.1f%%)", nu, r.moment_ratio, r.moment_ratio_closed, 100.0 * rel) +
              fmt(" cv %.2f", r.cv);
  }
  return chk.done(detail);
}

Outcome desk_trend() {
  Check chk;
  int wins = 0;
  std::string losses;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    harness::Config cfg = harness::load_config(FIMLAB_DESK_CONFIG);
    cfg.seed = seed;
    cfg.probes = 64;
    cfg.estimators = {"efim", "hutch_full"};
    const auto rows = harness::bench(harness::prepare(cfg), cfg);
    if (rows[1].relmae < rows[0].relmae) ++wins;
    else losses += " " + std::to_string(seed);
  }
  chk.expect(wins >= 18, "Hutchinson won on fewer than 18 seeds");

  harness::Config cfg = harness::load_config(FIMLAB_DESK_CONFIG);
  const harness::Workspace ws = harness::prepare(cfg);
  const est::FimEstimate e = harness::run_estimator("hutch_full", ws, cfg, cfg.storage);
  chk.expect(e.meta.backward_passes == static_cast<std::uint64_t>(cfg.n_batches),
             "single-probe run used " + std::to_string(e.meta.backward_passes) + " backward passes");
  return chk.done(fmt("64-probe Hutchinson beats eFIM on %.0f/20 seeds", wins) +
                  (losses.empty() ? "" : " (lost on" + losses + ")") +
                  fmt("; single probe: %.0f backward passes for %.0f batches",
                      static_cast<double>(e.meta.backward_passes), static_cast<double>(cfg.n_batches)));
}

Outcome power_iteration() {
  const Index sizes[] = {2, 3, 5, 10, 50};
  Rng rng(1111);
  Check chk;
  int gapped = 0, degenerate = 0;
  double worst_dl = 0.0, worst_res = 0.0;
  for (int n = 0; n < 2000; ++n) {
    const Index c = sizes[n % 5];
    const core::ProbVector p(oracle::dirichlet(c, (n / 5) % 2 ? 0.3 : 1.0, rng));
    const Vector ev = oracle::eigenvalues(core::simplex_fim(p).matrix);
    const core::TopEigenpair e = core::top_eigenpair(p, core::EigenMethod::power(100000, 1e-9), rng);
    const double gap = c >= 2 ? ev[c - 1] - ev[c - 2] : 0.0;
    if (gap >= 0.01) {
      ++gapped;
      worst_dl = std::max(worst_dl, std::abs(e.value - ev[c - 1]));
      chk.expect(std::abs(e.value - ev[c - 1]) <= 1e-6, "eigenvalue off at instance " + std::to_string(n));
    } else {
      ++degenerate;
      worst_res = std::max(worst_res, e.residual);
      chk.expect(e.residual <= 1e-8, "residual too large at instance " + std::to_string(n));
    }
  }
  return chk.done(fmt("%.0f gapped (max |dlambda| %.1e), %.0f near-degenerate (max residual %.1e)", gapped, worst_dl,
                      degenerate, worst_res));
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc == 3 && std::string(argv[1]) == "--only") only = std::atoi(argv[2]);
  else if (argc != 1) {
    std::fprintf(stderr, "usage: acceptance [--only N]\n");
    return 2;
  }

  const std::vector<Criterion> criteria = {
      {1, "core spectral suite", core_spectral},
      {2, "envelope suite", envelopes},
      {3, "empirical-core suite", empirical_core_suite},
      {4, "definition equals pullback", oracle_equality},
      {5, "Hutchinson unbiasedness", hutchinson_unbiased},
      {6, "variance formulas", variance_formulas},
      {7, "bounds suite", bounds_suite},
      {8, "gradient integrity", gradient_integrity},
      {9, "heavy-tail moment ratio", heavy_tail},
      {10, "desk-scale RelMAE trend", desk_trend},
      {11, "power iteration", power_iteration},
  };

  int failed = 0, ran = 0;
  for (const Criterion& c : criteria) {
    if (only != 0 && c.id != only) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s [%2d] %-28s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  if (ran == 0) {
    std::fprintf(stderr, "no criterion %d\n", only);
    return 2;
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
