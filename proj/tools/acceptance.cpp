// Acceptance run: one [PASS]/[FAIL] line per criterion, exit 0 iff all pass.
//
// Usage: acceptance [--only N,M,...] [--global-seed S] [--workers W]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "npl/eval.hpp"
#include "npl/npd.hpp"
#include "npl/npnet.hpp"
#include "npl/sampler.hpp"
#include "npl/svd.hpp"
#include "npl/testbed.hpp"
#include "npl/theory.hpp"

namespace {

using namespace npl;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... v) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, v...);
  return buf;
}

double rel_norm(const Tensor& a, const Tensor& b) { return norm(a - b) / norm(b); }

double orthonormality_error(const Tensor& q) {
  const std::size_t n = q.shape()[0];
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t r = 0; r < n; ++r) dot += q(r, i) * q(r, j);
      worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}

double r_squared(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy * sxy / (sxx * syy);
}

struct Context {
  std::uint64_t global_seed = 0;
  unsigned workers = 1;
};

Outcome svd_accuracy(const Context&) {
  const auto t0 = Clock::now();
  RngStream rng{derive_seed(1, "acceptance-svd"), 0};
  double recon = 0.0, ortho = 0.0;
  for (int i = 0; i < 64; ++i) {
    const Tensor m = gaussian(rng, {16, 16});
    const SvdFactors f = svd(m);
    Tensor us = f.u;
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t c = 0; c < 16; ++c) us(r, c) *= f.s[c];
    recon = std::max(recon, rel_norm(matmul(us, transpose(f.v)), m));
    ortho = std::max({ortho, orthonormality_error(f.u), orthonormality_error(f.v)});
  }
  const double secs = seconds_since(t0);
  return {recon <= 1e-9 && ortho <= 1e-9 && secs < 1.0,
          fmt("max rel recon %.2e, max orthonormality dev %.2e, %.3f s", recon, ortho, secs)};
}

Outcome ddim_identity(const Context&) {
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::standard_normal(8);
  const AnalyticPredictor pred(tb, sched);
  RngStream rng{derive_seed(2, "acceptance-ddim"), 0};
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int t = 1 + static_cast<int>(uniform(rng) * (sched.big_t() - 1));
    const Tensor x = gaussian(rng, {8, 8});
    const LatentState out = ddim_step(pred, sched, {x, t}, 1, 0.0, ClassLabel::of(0));
    const double f = sched.alpha(t - 1) * sched.alpha(t) + sched.sigma(t - 1) * sched.sigma(t);
    for (std::size_t j = 0; j < x.size(); ++j) worst = std::max(worst, std::abs(out.x[j] - f * x[j]));
  }
  return {worst <= 1e-10, fmt("max abs deviation %.2e over 20 (x, t)", worst)};
}

Outcome inversion_roundtrip(const Context&) {
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::smooth_two_class(8);
  const AnalyticPredictor pred(tb, sched);
  GuidanceConfig g;
  g.omega_l = g.omega_w = 1.0;
  g.k = sched.big_t() / 10;
  g.fp_iters = 50;
  g.fp_tol = 1e-12;
  RngStream rng{derive_seed(3, "acceptance-roundtrip"), 0};
  double worst = 0.0;
  int unconverged = 0;
  for (int i = 0; i < 50; ++i) {
    const Tensor x = gaussian(rng, {8, 8});
    const RedenoiseResult r = redenoise(pred, sched, x, g, ClassLabel::of(static_cast<std::size_t>(i % 2)));
    worst = std::max(worst, rel_norm(r.x_prime, x));
    unconverged += r.inversion.converged ? 0 : 1;
  }
  return {worst <= 1e-8, fmt("max rel error %.2e on 50 x (smooth testbed, omega_l = omega_w = 1, k = %d, %d unconverged)", worst,
                             g.k, unconverged)};
}

Outcome theorem_order(const Context& ctx) {
  const auto t0 = Clock::now();
  const NoiseSchedule sched = NoiseSchedule::cosine();
  TheoremConfig cfg;
  cfg.k_values = {64, 32, 16, 8};
  cfg.n_trials = 20;
  cfg.seed = ctx.global_seed;
  cfg.workers = ctx.workers;
  const TheoremReport r = verify_theorem(presets::smooth_two_class(8), sched, cfg);
  const double secs = seconds_since(t0);
  return {r.mean_ratio <= 0.35 && r.slope >= 1.7 && secs < 30.0 && r.flagged_trials == 0,
          fmt("mean ratio %.4f, slope %.4f, %.2f s, flagged %d", r.mean_ratio, r.slope, secs, r.flagged_trials)};
}

Outcome gap_linearity(const Context&) {
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::default_two_class(8);
  const AnalyticPredictor pred(tb, sched);
  RngStream rng{derive_seed(5, "acceptance-gap"), 0};
  double worst = 1.0;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = gaussian(rng, {8, 8});
    std::vector<double> gaps, norms;
    for (double omega_l : {1.5, 2.0, 3.0, 4.0, 5.5}) {
      GuidanceConfig g;
      g.k = 8;
      g.omega_l = omega_l;
      gaps.push_back(omega_l - g.omega_w);
      norms.push_back(norm(redenoise(pred, sched, x, g, ClassLabel::of(static_cast<std::size_t>(trial % 2))).x_prime - x));
    }
    worst = std::min(worst, r_squared(gaps, norms));
  }
  return {worst >= 0.99, fmt("min R^2 %.6f over 5 x_T at k = 8, omega_l in {1.5, 2, 3, 4, 5.5}", worst)};
}

Outcome selection_rule(const Context&) {
  RngStream rng{derive_seed(6, "acceptance-select"), 0};
  int mismatches = 0, ties = 0;
  for (int i = 0; i < 1000; ++i) {
    const double s0 = std::round(uniform(rng) * 8.0) / 4.0 - 1.0;
    const double m = std::round(uniform(rng) * 4.0) / 8.0;
    double sp = std::round(uniform(rng) * 8.0) / 4.0 - 1.0;
    if (i % 4 == 0) sp = s0 + m;  // exact tie on the threshold
    ties += (s0 + m == sp) ? 1 : 0;
    const bool brute = sp - s0 > m;
    mismatches += select(s0, sp, SelectionRule{m}) != brute ? 1 : 0;
  }
  return {mismatches == 0 && ties > 0, fmt("%d mismatches over 1000 triples (%d exact ties)", mismatches, ties)};
}

Outcome npd_determinism(const Context& ctx) {
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::default_two_class(8);
  CollectConfig cfg;
  cfg.n_seeds = 400;
  cfg.global_seed = ctx.global_seed;
  cfg.workers = ctx.workers;
  const CollectionResult a = collect_records(tb, sched, cfg);
  cfg.workers = ctx.workers + 1;
  const CollectionResult b = collect_records(tb, sched, cfg);
  const auto bytes_a = encode_npd(a.header, a.records), bytes_b = encode_npd(b.header, b.records);
  const bool identical = bytes_a == bytes_b;
  const NpdCheck check = verify_npd(decode_npd(bytes_a), true, ctx.workers);
  std::vector<double> rates;
  bool monotone = true;
  for (double m : {0.0, 0.005, 0.01, 0.02}) {
    cfg.rule.m = m;
    rates.push_back(collect_records(tb, sched, cfg).stats.keep_rate);
    if (rates.size() > 1 && rates.back() > rates[rates.size() - 2]) monotone = false;
  }
  return {identical && check.ok() && monotone,
          fmt("byte-identical %s, inspection %s, keep rates %.4f %.4f %.4f %.4f", identical ? "yes" : "no",
              check.ok() ? "ok" : "failed", rates[0], rates[1], rates[2], rates[3])};
}

Outcome identity_at_init(const Context&) {
  const NpnetParams p = NpnetParams::init({}, 0);
  RngStream rng{derive_seed(8, "acceptance-identity"), 0};
  int exact = 0;
  for (int i = 0; i < 100; ++i) {
    const Tensor x = gaussian(rng, {8, 8});
    const ClassLabel c = ClassLabel::of(static_cast<std::size_t>(uniform(rng) * 2.0));
    exact += golden(x, c, p) == x ? 1 : 0;
  }
  return {exact == 100, fmt("%d / 100 bit-exact", exact)};
}

Outcome gradients(const Context&) {
  NpnetConfig cfg;
  cfg.d_side = 4;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.embed_dim = 8;
  cfg.train_embedding = true;
  double worst = 0.0;
  for (std::uint64_t point = 0; point < 5; ++point) {
    NpnetParams p = NpnetParams::init(cfg, 100 + point);
    RngStream rng{derive_seed(9, "acceptance-grad", point), 0};
    for (Parameter* q : p.all()) {
      const Tensor jitter = gaussian(rng, q->value.shape());
      for (std::size_t i = 0; i < jitter.size(); ++i) q->value[i] += 0.2 * jitter[i];
    }
    std::vector<TrainingExample> data;
    for (std::size_t i = 0; i < 2; ++i)
      data.push_back({PreparedInput::make(gaussian(rng, {4, 4}), ClassLabel::of(i)), gaussian(rng, {4, 4})});
    auto params = p.all();
    worst = std::max(worst, grad_check(
                                [&](Tape& t) {
                                  ParamBinder b(t, true);
                                  return batch_loss(b, p, data, {0, 1});
                                },
                                params, 1e-6));
  }
  return {worst <= 1e-4, fmt("max rel error %.2e over 5 points", worst)};
}

std::vector<bool> g_final_below_initial;

Outcome overfit(const Context& ctx) {
  const NoiseSchedule sched = NoiseSchedule::cosine();
  CollectConfig cc;
  cc.n_seeds = 400;
  cc.global_seed = ctx.global_seed;
  cc.workers = ctx.workers;
  auto col = collect_records(presets::default_two_class(8), sched, cc);
  if (col.records.size() < 16) return {false, "fewer than 16 kept pairs"};
  col.records.resize(16);
  TrainConfig tc;
  tc.epochs = 2000;
  tc.batch_size = 16;
  tc.max_steps = 2000;
  tc.seed = derive_seed(ctx.global_seed, "train");
  const TrainResult r = train(prepare_examples(col.records), NpnetParams::init({}, 0), tc);
  g_final_below_initial.push_back(r.final_loss < r.initial_loss);
  return {r.final_loss <= 1e-3 * r.initial_loss && r.steps <= 2000,
          fmt("loss %.4e -> %.4e (ratio %.2e) in %ld steps", r.initial_loss, r.final_loss, r.final_loss / r.initial_loss,
              r.steps)};
}

struct EndToEnd {
  bool ran = false;
  EvalReport report;
  std::size_t pairs = 0;
  double seconds = 0.0;
  bool loss_down = false;
};
EndToEnd g_e2e;

void run_end_to_end(const Context& ctx) {
  if (g_e2e.ran) return;
  const auto t0 = Clock::now();
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::default_two_class(8);
  // Collect in blocks of seeds until about 2000 pairs are kept.
  std::vector<NoisePairRecord> records;
  CollectConfig cc;
  cc.guidance.k = sched.big_t() / 10;
  cc.global_seed = ctx.global_seed;
  cc.workers = ctx.workers;
  cc.n_seeds = 2500;
  while (records.size() < 2000 && cc.first_seed < 100'000) {
    auto part = collect_records(tb, sched, cc);
    records.insert(records.end(), part.records.begin(), part.records.end());
    cc.first_seed += cc.n_seeds;
  }
  TrainConfig tc;
  tc.seed = derive_seed(ctx.global_seed, "train");
  const TrainResult tr = train(prepare_examples(records), NpnetParams::init({}, 0), tc);
  EvalConfig ec;
  ec.first_seed = 1'000'000;
  ec.n_test = 400;
  ec.global_seed = ctx.global_seed;
  ec.workers = ctx.workers;
  g_e2e.report = winning_rate([&](const Tensor& x, ClassLabel c) { return golden(x, c, tr.params); }, tb, sched, ec);
  g_e2e.pairs = records.size();
  g_e2e.loss_down = tr.final_loss < tr.initial_loss;
  g_final_below_initial.push_back(g_e2e.loss_down);
  g_e2e.seconds = seconds_since(t0);
  g_e2e.ran = true;
}

Outcome end_to_end(const Context& ctx) {
  run_end_to_end(ctx);
  const EvalReport& r = g_e2e.report;
  const bool all_runs_down = std::all_of(g_final_below_initial.begin(), g_final_below_initial.end(), [](bool b) { return b; });
  return {r.winning_rate >= 0.55 && r.ci.low > 0.5 && r.mean_score_delta > 0.0 && g_e2e.seconds <= 900.0 && all_runs_down,
          fmt("%zu pairs, winning rate %.4f, CI [%.4f, %.4f], mean delta %.4f, %.0f s, training loss fell on all runs: %s",
              g_e2e.pairs, r.winning_rate, r.ci.low, r.ci.high, r.mean_score_delta, g_e2e.seconds,
              all_runs_down ? "yes" : "no")};
}

Outcome frechet(const Context& ctx) {
  RngStream rng{derive_seed(12, "acceptance-frechet"), 0};
  std::vector<Tensor> a;
  for (int i = 0; i < 50; ++i) a.push_back(gaussian(rng, {6}));
  const double same = frechet_gaussian(a, a).value;
  std::vector<Tensor> b = a;
  const std::vector<double> delta{0.3, -0.7, 1.1, 0.0, 0.25, -2.0};
  double expect = 0.0;
  for (double v : delta) expect += v * v;
  for (Tensor& t : b)
    for (std::size_t j = 0; j < 6; ++j) t[j] += delta[j];
  const double shifted = frechet_gaussian(a, b).value;
  const bool analytic = std::abs(same) <= 1e-8 && std::abs(shifted - expect) <= 1e-8;
  run_end_to_end(ctx);
  const double fb = g_e2e.report.frechet_baseline_vs_true.value, fg = g_e2e.report.frechet_golden_vs_true.value;
  return {analytic && fg <= fb, fmt("identical %.1e, shift error %.1e; end-to-end run: golden %.4f vs baseline %.4f",
                                    same, std::abs(shifted - expect), fg, fb)};
}

Outcome singular_diagnostic(const Context&) {
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::default_two_class(8);
  const AnalyticPredictor pred(tb, sched);
  RngStream rng{derive_seed(13, "acceptance-spectrum"), 0};
  GuidanceConfig g;
  g.k = 10;
  double acc = 0.0;
  const int n = 50;
  for (int i = 0; i < n; ++i) {
    const Tensor x = gaussian(rng, {8, 8});
    const Tensor xp = redenoise(pred, sched, x, g, ClassLabel::of(static_cast<std::size_t>(i % 2))).x_prime;
    acc += top_half_similarity(singular_similarity(x, xp));
  }
  return {acc / n >= 0.9, fmt("mean top-half |cos| %.4f over %d pairs at k = %d", acc / n, n, g.k)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string only;
  Context ctx;
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--global-seed", ctx.global_seed, "global seed")->capture_default_str();
  app.add_option("--workers", ctx.workers, "worker threads")->check(CLI::Range(1u, 1024u))->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream ss(only);
    for (std::string item; std::getline(ss, item, ',');) selected.insert(std::stoi(item));
  }

  const std::vector<std::pair<std::string, std::function<Outcome(const Context&)>>> criteria{
      {"svd accuracy", svd_accuracy},
      {"ddim analytic identity", ddim_identity},
      {"inversion roundtrip", inversion_roundtrip},
      {"re-denoise residual order", theorem_order},
      {"guidance-gap linearity", gap_linearity},
      {"selection rule", selection_rule},
      {"dataset determinism", npd_determinism},
      {"identity at init", identity_at_init},
      {"gradients", gradients},
      {"overfit", overfit},
      {"end-to-end winning rate", end_to_end},
      {"frechet proxy", frechet},
      {"singular-vector diagnostic", singular_diagnostic},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << id << ". " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
