#pragma once

// Experiment plumbing: synthetic classification tasks, a small SGD trainer,
// the RelMAE comparison of diagonal estimates, the heavy-tailed Monte Carlo
// demo, zero-atom histograms, flat key=value configs and the bench table.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fimlab/common.hpp"
#include "fimlab/estimators.hpp"
#include "fimlab/network.hpp"
#include "fimlab/tensor_ad.hpp"

namespace fimlab::harness {

// Synthetic tasks ---------------------------------------------------------------

enum class Generator { Blobs, StudentT };

struct SyntheticTask {
  Generator generator = Generator::Blobs;
  Index input_dim = 10;     // blobs only; Student-t is scalar
  Index classes = 5;        // blobs only; Student-t is binary
  double separation = 3.0;  // scale of the class centres
  double nu = 5.0;          // Student-t degrees of freedom
  Index samples = 512;
  std::uint64_t seed = 0;
};

struct Dataset {
  Matrix x;
  std::vector<Index> labels;  // 0-based
};

/// Blobs: centres mu_c = separation * N(0, I), points mu_y + N(0, I) with y
/// uniform. Student-t: scalar x ~ t(nu), labels fair coin flips.
inline Dataset gen_task(const SyntheticTask& task) {
  require(task.samples >= 1, "gen_task: need at least one sample");
  Rng rng(task.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset out;
  if (task.generator == Generator::StudentT) {
    require(task.nu > 0.0, "gen_task: Student-t needs nu > 0");
    std::student_t_distribution<double> t(task.nu);
    std::bernoulli_distribution coin(0.5);
    out.x.resize(task.samples, 1);
    for (Index r = 0; r < task.samples; ++r) {
      out.x(r, 0) = t(rng);
      out.labels.push_back(coin(rng) ? 1 : 0);
    }
    return out;
  }
  require(task.input_dim >= 1 && task.classes >= 2, "gen_task: blobs need d >= 1 and C >= 2");
  require(task.separation >= 0.0, "gen_task: separation must be non-negative");
  Matrix centres(task.classes, task.input_dim);
  for (Index c = 0; c < task.classes; ++c)
    for (Index j = 0; j < task.input_dim; ++j) centres(c, j) = task.separation * normal(rng);
  std::uniform_int_distribution<Index> pick(0, task.classes - 1);
  out.x.resize(task.samples, task.input_dim);
  for (Index r = 0; r < task.samples; ++r) {
    const Index y = pick(rng);
    out.labels.push_back(y);
    for (Index j = 0; j < task.input_dim; ++j) out.x(r, j) = centres(y, j) + normal(rng);
  }
  return out;
}

// Training ------------------------------------------------------------------------

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  Vector theta;
  std::vector<double> losses;  // mean cross-entropy of each step's minibatch
};

/// Mean cross-entropy on (x, labels) and its gradient, one reverse sweep.
inline std::pair<double, Vector> cross_entropy(const nn::NetworkSpec& spec, const Vector& theta, const Matrix& x,
                                               const std::vector<Index>& labels) {
  require(labels.size() == static_cast<std::size_t>(x.rows()), "cross_entropy: one label per sample");
  ad::Tape tape;
  auto leaf = est::theta_leaf(tape, theta);
  std::vector<std::size_t> cols;
  for (Index y : labels) {
    require(y >= 0 && y < spec.num_classes(), "cross_entropy: label out of range");
    cols.push_back(static_cast<std::size_t>(y));
  }
  auto ll = ad::sum(ad::gather(ad::log_softmax(nn::record_logits(spec, tape, leaf, x)), std::move(cols)));
  auto loss = ad::scale(ll, -1.0 / static_cast<double>(x.rows()));
  return {loss.item(), est::to_eigen(tape.backward(loss).of(leaf))};
}

/// Minibatch SGD on the mean cross-entropy. Each epoch visits the data in a
/// fresh permutation; batch = 0 means full batch.
inline TrainResult train_sgd(const nn::NetworkSpec& spec, const Vector& theta0, const Dataset& data, Index steps,
                             double lr, Index batch = 64, std::uint64_t seed = 0) {
  require(steps >= 0, "train_sgd: steps must be non-negative");
  require(lr > 0.0, "train_sgd: learning rate must be positive");
  est::check_dataset(spec, data.x);
  const Index n = data.x.rows();
  const Index b = batch <= 0 ? n : std::min(batch, n);
  TrainResult out{theta0, {}};
  Rng rng(seed);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Index cursor = n;
  for (Index step = 0; step < steps; ++step) {
    if (cursor + b > n) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    Matrix xb(b, data.x.cols());
    std::vector<Index> yb;
    for (Index i = 0; i < b; ++i) {
      const Index r = order[static_cast<std::size_t>(cursor + i)];
      xb.row(i) = data.x.row(r);
      yb.push_back(data.labels[static_cast<std::size_t>(r)]);
    }
    cursor += b;
    auto [loss, grad] = cross_entropy(spec, out.theta, xb, yb);
    if (!std::isfinite(loss) || !grad.allFinite())
      throw TrainingDiverged("train_sgd: loss became non-finite at step " + std::to_string(step));
    out.losses.push_back(loss);
    out.theta -= lr * grad;
  }
  return out;
}

inline double accuracy(const nn::NetworkSpec& spec, const Vector& theta, const Dataset& data) {
  const Matrix z = nn::forward_logits(spec, theta, data.x);
  Index hits = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    Index arg = 0;
    z.row(r).maxCoeff(&arg);
    hits += arg == data.labels[static_cast<std::size_t>(r)] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(z.rows());
}

// RelMAE ----------------------------------------------------------------------------

/// (1/dim) sum_i |est_ii - F_ii| / (F_ii + eps) over diagonal entries.
inline double relmae(const est::FimEstimate& estimate, const est::FimEstimate& truth, double eps = 1e-12) {
  require(eps > 0.0, "relmae: eps must be positive");
  require(estimate.normalization == truth.normalization, "relmae: normalization mismatch (" +
                                                             est::to_string(estimate.normalization) + " vs " +
                                                             est::to_string(truth.normalization) + ")");
  require(estimate.dim() == truth.dim(), "relmae: dimension mismatch");
  const Vector e = estimate.diagonal(), f = truth.diagonal();
  double total = 0.0;
  for (Index i = 0; i < f.size(); ++i) total += std::abs(e[i] - f[i]) / (f[i] + eps);
  return total / static_cast<double>(f.size());
}

// Heavy-tailed Monte Carlo demo ---------------------------------------------------------

struct CvReport {
  double nu = 0.0;
  Index m = 0;
  Index trials = 0;
  double moment_ratio = 0.0;         // sampled E x^4 / (E x^2)^2 over all trials * m draws
  double moment_ratio_closed = 0.0;  // 3 (nu - 2) / (nu - 4)
  double fisher = 0.0;               // E x^2 / 4 = nu / (4 (nu - 2))
  double mean_estimate = 0.0;        // average of the trial estimates
  double cv = 0.0;                   // sampled std / mean of the trial estimates
  double cv_closed = 0.0;            // sqrt((ratio - 1) / m)
};

/// Scalar logistic model at theta = 0 with x ~ t(nu): the per-draw Fisher
/// term is x^2 / 4, so each trial's estimate is (1 / 4m) sum_j x_j^2.
inline CvReport cv_demo(double nu, Index m, Index trials, Rng& rng) {
  require(nu > 4.0, "cv_demo: nu must exceed 4 for a finite fourth moment");
  require(m >= 1, "cv_demo: m must be positive");
  require(trials >= 2, "cv_demo: need at least two trials");
  std::student_t_distribution<double> t(nu);
  CvReport rep;
  rep.nu = nu;
  rep.m = m;
  rep.trials = trials;
  rep.moment_ratio_closed = 3.0 * (nu - 2.0) / (nu - 4.0);
  rep.fisher = nu / (4.0 * (nu - 2.0));
  rep.cv_closed = std::sqrt((rep.moment_ratio_closed - 1.0) / static_cast<double>(m));
  // long double sums: the fourth powers span many orders of magnitude
  long double s2 = 0, s4 = 0, mean = 0, m2 = 0;
  for (Index k = 1; k <= trials; ++k) {
    long double sum_sq = 0;
    for (Index j = 0; j < m; ++j) {
      const long double x = t(rng);
      sum_sq += x * x;
      s4 += x * x * x * x;
    }
    s2 += sum_sq;
    const long double est = sum_sq / (4.0L * static_cast<long double>(m));
    const long double delta = est - mean;
    mean += delta / static_cast<long double>(k);
    m2 += delta * (est - mean);
  }
  const long double draws = static_cast<long double>(trials) * static_cast<long double>(m);
  const long double e2 = s2 / draws, e4 = s4 / draws;
  rep.moment_ratio = static_cast<double>(e4 / (e2 * e2));
  rep.mean_estimate = static_cast<double>(mean);
  rep.cv = static_cast<double>(std::sqrt(m2 / static_cast<long double>(trials - 1)) / mean);
  return rep;
}

inline nlohmann::json to_json(const CvReport& r) {
  return {{"nu", r.nu},
          {"m", r.m},
          {"trials", r.trials},
          {"moment_ratio", r.moment_ratio},
          {"moment_ratio_closed", r.moment_ratio_closed},
          {"fisher", r.fisher},
          {"mean_estimate", r.mean_estimate},
          {"cv", r.cv},
          {"cv_closed", r.cv_closed}};
}

// Histograms ------------------------------------------------------------------------------

inline constexpr double kZeroAtom = 1e-300;
inline constexpr Index kHistogramBins = 50;

struct HistogramReport {
  std::vector<double> edges;  // kHistogramBins + 1 values, log-spaced
  std::vector<Index> counts;
  Index zero_atom = 0;
  Index total = 0;
  double zeta = 0.0;    // zero_atom / total
  double mean = 0.0;    // over every coordinate, zeros included
  double median = 0.0;  // of the strictly positive entries (past the atom)
  double p95 = 0.0;
};

/// Linear-interpolation quantile of sorted values.
inline double quantile(const std::vector<double>& sorted, double q) {
  require(!sorted.empty(), "quantile: empty input");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline HistogramReport histogram(const est::FimEstimate& e) {
  require(e.storage == est::Storage::Diagonal, "histogram: needs a diagonal estimate");
  const Vector& d = e.diag;
  HistogramReport h;
  h.total = d.size();
  h.counts.assign(static_cast<std::size_t>(kHistogramBins), 0);
  std::vector<double> positive;
  double sum = 0.0;
  for (Index i = 0; i < d.size(); ++i) {
    sum += d[i];
    if (d[i] <= kZeroAtom) ++h.zero_atom;
    else positive.push_back(d[i]);
  }
  h.mean = h.total > 0 ? sum / static_cast<double>(h.total) : 0.0;
  h.zeta = h.total > 0 ? static_cast<double>(h.zero_atom) / static_cast<double>(h.total) : 0.0;
  if (positive.empty()) return h;
  std::sort(positive.begin(), positive.end());
  h.median = quantile(positive, 0.5);
  h.p95 = quantile(positive, 0.95);
  double lo = std::log10(positive.front()), hi = std::log10(positive.back());
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(kHistogramBins);
  for (Index b = 0; b <= kHistogramBins; ++b) h.edges.push_back(std::pow(10.0, lo + width * static_cast<double>(b)));
  for (double v : positive) {
    auto bin = static_cast<Index>(std::floor((std::log10(v) - lo) / width));
    bin = std::clamp<Index>(bin, 0, kHistogramBins - 1);
    ++h.counts[static_cast<std::size_t>(bin)];
  }
  return h;
}

/// One row per bin; the first row holds the zero atom as [0, 1e-300].
inline std::string histogram_csv(const HistogramReport& h) {
  std::ostringstream out;
  out.precision(17);
  out << "bin_low,bin_high,count\n";
  out << 0.0 << ',' << kZeroAtom << ',' << h.zero_atom << '\n';
  for (std::size_t b = 0; b < h.counts.size() && b + 1 < h.edges.size(); ++b)
    out << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.counts[b] << '\n';
  return out.str();
}

inline nlohmann::json to_json(const HistogramReport& h) {
  return {{"total", h.total}, {"zero_atom", h.zero_atom}, {"zeta", h.zeta},
          {"mean", h.mean},   {"median", h.median},       {"p95", h.p95}};
}

// Configuration -----------------------------------------------------------------------------

struct Config {
  std::uint64_t seed = 1;
  // task and network
  Index input_dim = 10;
  Index classes = 5;
  double separation = 3.0;
  Index train_samples = 512;
  std::vector<Index> hidden{31};
  nn::Activation activation = nn::Activation::Tanh;
  std::string checkpoint;  // load this network instead of training
  // training
  Index train_steps = 500;
  double learning_rate = 0.1;
  Index train_batch = 64;
  // evaluation
  Index batch_size = 64;
  Index n_batches = 8;
  std::vector<std::string> estimators{"efim", "hutch_full", "hutch_dg", "hutch_lr1", "hutch_lr2"};
  Index probes = 1;
  est::ProbeDist probe_dist = est::ProbeDist::Rademacher;
  double epsilon = 1e-12;
  bool parallel = false;
  est::Storage storage = est::Storage::Diagonal;
  int lr_rank = 1;
  Index mc_samples = 64;  // per batch
  // variance report
  std::string variant = "full";
  Index variance_samples = 10000;
  Index variance_batch = 4;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  require(!in.fail() && in.peek() == std::char_traits<char>::eof(),
          "config: bad value '" + value + "' for key '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw InvalidInput("config: key '" + key + "' expects true or false, got '" + value + "'");
}

}  // namespace detail

/// Flat key=value text. Blank lines and '#' comments are skipped; unknown or
/// repeated keys are rejected.
inline Config parse_config(const std::string& text) {
  Config c;
  std::map<std::string, std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    require(!seen.count(key), "config: key '" + key + "' given twice");
    seen[key] = value;
    using detail::parse_number;
    if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "input_dim") c.input_dim = parse_number<Index>(key, value);
    else if (key == "classes") c.classes = parse_number<Index>(key, value);
    else if (key == "separation") c.separation = parse_number<double>(key, value);
    else if (key == "train_samples") c.train_samples = parse_number<Index>(key, value);
    else if (key == "hidden") {
      c.hidden.clear();
      for (const auto& h : detail::split_list(value)) c.hidden.push_back(parse_number<Index>(key, h));
    } else if (key == "activation") c.activation = nn::parse_activation(value);
    else if (key == "checkpoint") c.checkpoint = value;
    else if (key == "train_steps") c.train_steps = parse_number<Index>(key, value);
    else if (key == "learning_rate") c.learning_rate = parse_number<double>(key, value);
    else if (key == "train_batch") c.train_batch = parse_number<Index>(key, value);
    else if (key == "batch_size") c.batch_size = parse_number<Index>(key, value);
    else if (key == "n_batches") c.n_batches = parse_number<Index>(key, value);
    else if (key == "estimators") c.estimators = detail::split_list(value);
    else if (key == "probes") c.probes = parse_number<Index>(key, value);
    else if (key == "probe_dist") c.probe_dist = est::parse_dist(value);
    else if (key == "epsilon") c.epsilon = parse_number<double>(key, value);
    else if (key == "parallel") c.parallel = detail::parse_bool(key, value);
    else if (key == "storage") c.storage = est::parse_storage(value);
    else if (key == "lr_rank") c.lr_rank = parse_number<int>(key, value);
    else if (key == "mc_samples") c.mc_samples = parse_number<Index>(key, value);
    else if (key == "variant") c.variant = value;
    else if (key == "variance_samples") c.variance_samples = parse_number<Index>(key, value);
    else if (key == "variance_batch") c.variance_batch = parse_number<Index>(key, value);
    else throw InvalidInput("config: unknown key '" + key + "'");
  }
  require(c.batch_size >= 1, "config: batch_size must be at least 1");
  require(c.n_batches >= 1, "config: n_batches must be at least 1");
  require(c.epsilon > 0.0, "config: epsilon must be positive");
  require(c.probes >= 1, "config: probes must be at least 1");
  require(c.train_steps >= 0, "config: train_steps must be non-negative");
  require(!c.estimators.empty(), "config: estimators list is empty");
  return c;
}

/// FIMLAB_SEED, when set, replaces the configured seed.
inline void apply_environment(Config& c) {
  if (const char* s = std::getenv("FIMLAB_SEED"); s != nullptr && *s != '\0')
    c.seed = detail::parse_number<std::uint64_t>("FIMLAB_SEED", s);
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  Config c = parse_config(buf.str());
  apply_environment(c);
  return c;
}

// Experiment setup -----------------------------------------------------------------------------

struct Workspace {
  nn::NetworkSpec spec;
  Vector theta;
  Dataset train;
  std::vector<Matrix> batches;  // evaluation batches, B rows each
  Matrix eval_x;                // the batches stacked
  double train_accuracy = 0.0;
};

/// Builds the blobs task, trains (or loads) the network and slices the first
/// B * n_batches training points into evaluation batches.
inline Workspace prepare(const Config& cfg) {
  Workspace ws;
  const Index needed = cfg.batch_size * cfg.n_batches;
  SyntheticTask task;
  task.input_dim = cfg.input_dim;
  task.classes = cfg.classes;
  task.separation = cfg.separation;
  task.samples = std::max(cfg.train_samples, needed);
  task.seed = cfg.seed;
  ws.train = gen_task(task);
  if (!cfg.checkpoint.empty()) {
    nn::Checkpoint ck = nn::load_checkpoint(cfg.checkpoint);
    require(ck.spec.input_dim() == cfg.input_dim && ck.spec.num_classes() == cfg.classes,
            "checkpoint does not match input_dim / classes in the config");
    ws.spec = ck.spec;
    ws.theta = ck.theta;
  } else {
    std::vector<Index> sizes{cfg.input_dim};
    sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
    sizes.push_back(cfg.classes);
    ws.spec = nn::NetworkSpec::mlp(sizes, cfg.activation);
    Rng init(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const Vector theta0 = nn::init_params(ws.spec, init);
    ws.theta = train_sgd(ws.spec, theta0, ws.train, cfg.train_steps, cfg.learning_rate, cfg.train_batch,
                         cfg.seed + 1)
                   .theta;
  }
  ws.train_accuracy = accuracy(ws.spec, ws.theta, ws.train);
  ws.eval_x = ws.train.x.topRows(needed);
  for (Index b = 0; b < cfg.n_batches; ++b) ws.batches.push_back(ws.eval_x.middleRows(b * cfg.batch_size, cfg.batch_size));
  return ws;
}

inline std::vector<Index> eval_labels(const Workspace& ws) {
  return {ws.train.labels.begin(), ws.train.labels.begin() + ws.eval_x.rows()};
}

/// Bench/CLI estimator names: exact_def, exact_pullback, efim, mc, and
/// hutch_<variant> with <variant> in full, sqrt, dg, dg_bernoulli, lrK.
/// hutch_lr alone takes its rank from `lr_rank`.
inline est::FimEstimate run_estimator(const std::string& name, const Workspace& ws, const Config& cfg,
                                      est::Storage storage) {
  const Matrix& x = ws.eval_x;
  if (name == "exact_def") return est::exact_fim_definition(ws.spec, ws.theta, x, storage);
  if (name == "exact_pullback") return est::exact_fim_pullback(ws.spec, ws.theta, x, storage);
  if (name == "efim") return est::efim(ws.spec, ws.theta, x, eval_labels(ws), storage);
  if (name == "mc") {
    Rng rng(cfg.seed + 7);
    return est::mc_fim(ws.spec, ws.theta, x, cfg.mc_samples * cfg.n_batches, rng, storage);
  }
  if (name.rfind("hutch_", 0) == 0) {
    std::string v = name.substr(6);
    if (v == "lr") v = "lr" + std::to_string(cfg.lr_rank);
    auto e = est::hutchinson_over_batches(ws.spec, ws.theta, ws.batches, est::parse_variant(v), cfg.seed + 11,
                                          storage, cfg.probes, cfg.probe_dist, cfg.parallel);
    e.meta.dataset = "blobs";
    return e;
  }
  throw InvalidInput("unknown estimator '" + name + "'");
}

struct BenchRow {
  std::string estimator;
  double relmae = 0.0;
  double seconds = 0.0;
  double speedup = std::numeric_limits<double>::quiet_NaN();  // eFIM seconds / these seconds
  std::size_t backward_passes = 0;
};

/// RelMAE against the exact diagonal (C backward passes per sample) and
/// wall-clock per estimator. MC (mean-normalized) is compared with F / |D_x|.
inline std::vector<BenchRow> bench(const Workspace& ws, const Config& cfg) {
  const est::FimEstimate truth = est::exact_fim_definition(ws.spec, ws.theta, ws.eval_x, est::Storage::Diagonal);
  est::FimEstimate truth_mean = truth;
  truth_mean.normalization = est::Normalization::Mean;
  est::scale_values(truth_mean, 1.0 / static_cast<double>(ws.eval_x.rows()));
  std::vector<BenchRow> rows;
  std::optional<double> efim_seconds;
  for (const auto& name : cfg.estimators) {
    const auto t0 = std::chrono::steady_clock::now();
    const est::FimEstimate e = run_estimator(name, ws, cfg, est::Storage::Diagonal);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    BenchRow row{name, relmae(e, e.normalization == est::Normalization::Mean ? truth_mean : truth, cfg.epsilon),
                 secs};
    row.backward_passes = e.meta.backward_passes;
    if (name == "efim") efim_seconds = secs;
    rows.push_back(row);
  }
  if (efim_seconds)
    for (auto& r : rows) r.speedup = *efim_seconds / std::max(r.seconds, 1e-12);
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << "estimator,relmae,seconds,speedup,backward_passes\n";
  for (const auto& r : rows)
    out << r.estimator << ',' << r.relmae << ',' << r.seconds << ',' << r.speedup << ',' << r.backward_passes
        << '\n';
  return out.str();
}

}  // namespace fimlab::harness
