// Command-line front end. Every subcommand prints JSON or CSV to stdout;
// errors go to stderr with exit status 2.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "fimlab/fimlab.hpp"

using namespace fimlab;
using nlohmann::json;

namespace {

Vector parse_probs(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    const double v = std::stod(item, &used);
    require(used == item.size(), "--p: bad number '" + item + "'");
    values.push_back(v);
  }
  return est::to_eigen(values);
}

json vec(const Vector& v) { return est::to_std(v); }

int core_probe(const std::string& p_csv) {
  const core::ProbVector p(parse_probs(p_csv));
  const core::SpectralDecomp d = core::spectrum(core::simplex_fim(p));
  const core::SpectrumBracket br = core::lambda_max_bracket(p);
  const core::EnvelopeErrors env = core::envelope_errors(p);
  const core::EmpiricalCoreFloor floor = core::empirical_core_floor(p);
  const Matrix at_floor = core::simplex_fim(p).matrix - core::empirical_core(p, floor.label).matrix;
  json out{{"classes", p.size()},
           {"p", vec(p.values())},
           {"eigenvalues", vec(d.eigenvalues)},
           {"lambda_max", d.eigenvalues[p.size() - 1]},
           {"spectral_gap", d.spectral_gap()},
           {"bracket", {{"lower", br.lower}, {"upper", br.upper}}},
           {"bracket_gap_bound", core::bracket_gap_bound(p)},
           {"max_bernoulli_variance", core::max_bernoulli_variance(p)},
           {"envelopes",
            {{"diag_error", env.diag_error},
             {"rank1_error", env.rank1_error},
             {"rank1_error_bound", env.rank1_error_bound}}},
           {"empirical_core",
            {{"adversarial_label", floor.label},
             {"error_at_label", at_floor.norm()},
             {"floor", floor.tight},
             {"floor_relaxed", floor.relaxed}}}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

int estimate(const std::string& config, const std::string& kind, const std::string& out_path,
             const std::string& save_net) {
  const harness::Config cfg = harness::load_config(config);
  const harness::Workspace ws = harness::prepare(cfg);
  est::FimEstimate e = harness::run_estimator(kind, ws, cfg, cfg.storage);
  e.meta.seed = cfg.seed;
  e.meta.dataset = "blobs";
  est::write_estimate(out_path, e);
  if (!save_net.empty()) nn::save_checkpoint(save_net, ws.spec, ws.theta);
  json out{{"estimator", kind},
           {"kind", est::to_string(e.kind)},
           {"storage", est::to_string(e.storage)},
           {"normalization", est::to_string(e.normalization)},
           {"dim", e.dim()},
           {"samples", ws.eval_x.rows()},
           {"backward_passes", e.meta.backward_passes},
           {"train_accuracy", ws.train_accuracy},
           {"out", out_path}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

int bench(const std::string& config, const std::string& out_path) {
  const harness::Config cfg = harness::load_config(config);
  const std::string csv = harness::bench_csv(harness::bench(harness::prepare(cfg), cfg));
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream f(out_path);
    require(f.good(), "cannot write '" + out_path + "'");
    f << csv;
  }
  return 0;
}

int variance(const std::string& config) {
  const harness::Config cfg = harness::load_config(config);
  const harness::Workspace ws = harness::prepare(cfg);
  const Index rows = std::min<Index>(cfg.variance_batch, ws.eval_x.rows());
  const Matrix x = ws.eval_x.topRows(rows);
  const est::HutchinsonVariant v = est::parse_variant(cfg.variant);
  Rng rng(cfg.seed + 13);
  est::HutchinsonObjective obj(ws.spec, ws.theta, x, v, rng);
  est::VarianceReport rep = est::variance_closed_form(ws.spec, ws.theta, x, v, cfg.probe_dist, &obj.basis());
  est::empirical_variance(obj, cfg.variance_samples, cfg.probe_dist, rng, rep);
  double worst = 0.0;
  for (Index i = 0; i < rep.closed_form.size(); ++i)
    if (rep.closed_form[i] > 0.0)
      worst = std::max(worst, std::abs(rep.empirical[i] - rep.closed_form[i]) / rep.closed_form[i]);
  json out{{"variant", v.name()},
           {"probe_dist", est::to_string(cfg.probe_dist)},
           {"samples", cfg.variance_samples},
           {"inputs", rows},
           {"dim", rep.target.size()},
           {"max_rel_error", worst},
           {"max_cv", rep.cv.maxCoeff()},
           {"target", vec(rep.target)},
           {"closed_form", vec(rep.closed_form)},
           {"empirical", vec(rep.empirical)},
           {"cv", vec(rep.cv)}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

int cv_demo(double nu, Index m, Index trials, std::uint64_t seed) {
  if (const char* s = std::getenv("FIMLAB_SEED"); s != nullptr && *s != '\0') seed = std::stoull(s);
  Rng rng(seed);
  json out = harness::to_json(harness::cv_demo(nu, m, trials, rng));
  out["seed"] = seed;
  std::cout << out.dump(2) << '\n';
  return 0;
}

int hist(const std::string& in_path, const std::string& out_path) {
  const harness::HistogramReport h = harness::histogram(est::read_estimate(in_path));
  std::ofstream f(out_path);
  require(f.good(), "cannot write '" + out_path + "'");
  f << harness::histogram_csv(h);
  std::cout << harness::to_json(h).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fisher information estimation laboratory"};
  app.require_subcommand(1);

  std::string p_csv;
  auto* probe = app.add_subcommand("core-probe", "Spectrum, bracket and envelope errors for one p");
  probe->add_option("--p", p_csv, "comma-separated probabilities")->required();

  std::string config, kind, out_path, save_net;
  auto* est_cmd = app.add_subcommand("estimate", "Compute one FIM estimate and write it to a file");
  est_cmd->add_option("--config", config)->required()->check(CLI::ExistingFile);
  est_cmd->add_option("--estimator", kind, "exact_def, exact_pullback, efim, mc, hutch_<variant>")->required();
  est_cmd->add_option("--out", out_path)->required();
  est_cmd->add_option("--save-net", save_net, "also write the network checkpoint (<stem>.bin/.json)");

  std::string bench_out;
  auto* bench_cmd = app.add_subcommand("bench", "RelMAE and timing table (CSV)");
  bench_cmd->add_option("--config", config)->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--out", bench_out, "write the CSV here instead of stdout");

  auto* var_cmd = app.add_subcommand("variance", "Closed-form vs sampled probe variance (JSON)");
  var_cmd->add_option("--config", config)->required()->check(CLI::ExistingFile);

  double nu = 0.0;
  Index m = 1, trials = 1000000;
  std::uint64_t seed = 12345;
  auto* cv_cmd = app.add_subcommand("cv-demo", "Heavy-tailed Monte Carlo coefficient of variation (JSON)");
  cv_cmd->add_option("--nu", nu)->required();
  cv_cmd->add_option("--m", m)->required();
  cv_cmd->add_option("--trials", trials);
  cv_cmd->add_option("--seed", seed);

  std::string hist_in, hist_out;
  auto* hist_cmd = app.add_subcommand("hist", "Zero-atom histogram of a diagonal estimate");
  hist_cmd->add_option("--in", hist_in)->required()->check(CLI::ExistingFile);
  hist_cmd->add_option("--out", hist_out)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*probe) return core_probe(p_csv);
    if (*est_cmd) return estimate(config, kind, out_path, save_net);
    if (*bench_cmd) return bench(config, bench_out);
    if (*var_cmd) return variance(config);
    if (*cv_cmd) return cv_demo(nu, m, trials, seed);
    if (*hist_cmd) return hist(hist_in, hist_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
