// npl: noise prompt learning on an analytic Gaussian-mixture testbed.
//
// Subcommands: testbed, collect, train, infer, eval, verify-theorem, inspect-npd.
// Exit codes: 0 ok, 1 verification failed, 2 bad configuration, 3 numeric
// failure, 4 I/O or format error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "npl/errors.hpp"
#include "npl/eval.hpp"
#include "npl/npd.hpp"
#include "npl/npnet.hpp"
#include "npl/sampler.hpp"
#include "npl/testbed.hpp"
#include "npl/theory.hpp"

namespace {

using namespace npl;

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct VerificationFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Ordered key = value lines. The text is logged to stderr and embedded in
/// artifacts; settings that must not affect artifacts (worker count, output
/// paths) are logged only.
class ResolvedConfig {
 public:
  explicit ResolvedConfig(std::string command) { add("command", std::move(command)); }
  void add(const std::string& k, const std::string& v) { lines_.push_back(k + " = " + v); }
  void add(const std::string& k, double v) { add(k, fmt17(v)); }
  void add(const std::string& k, std::uint64_t v) { add(k, std::to_string(v)); }
  void add(const std::string& k, int v) { add(k, std::to_string(v)); }
  void add(const std::string& k, bool v) { add(k, std::string(v ? "true" : "false")); }
  void log_only(const std::string& k, const std::string& v) { log_.push_back(k + " = " + v); }

  std::string text() const {
    std::string s;
    for (const auto& l : lines_) s += l + "\n";
    return s;
  }
  void log() const {
    for (const auto& l : lines_) std::cerr << "config " << l << "\n";
    for (const auto& l : log_) std::cerr << "config " << l << "\n";
  }

 private:
  std::vector<std::string> lines_, log_;
};

struct SeedRange {
  std::uint64_t first = 0, count = 0;
};

/// "a..b" is the half-open range [a, b).
SeedRange parse_seeds(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) throw ConfigError("--seeds expects a..b, got '" + s + "'");
  try {
    std::size_t p1 = 0, p2 = 0;
    const std::string a = s.substr(0, dots), b = s.substr(dots + 2);
    const std::uint64_t lo = std::stoull(a, &p1), hi = std::stoull(b, &p2);
    if (p1 != a.size() || p2 != b.size()) throw std::invalid_argument("trailing characters");
    if (hi <= lo) throw ConfigError("--seeds range '" + s + "' is empty");
    return {lo, hi - lo};
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("--seeds expects integers a..b, got '" + s + "'");
  }
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(item, &pos));
      if (pos != item.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated integer list, got '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

/// "default", "smooth", or a path to a testbed file.
TestbedDefinition resolve_testbed(const std::string& spec, std::size_t d_side) {
  if (spec == "default") return {presets::default_two_class(d_side), NoiseSchedule::cosine()};
  if (spec == "smooth") return {presets::smooth_two_class(d_side), NoiseSchedule::cosine()};
  return load_testbed(spec);
}

std::string testbed_text(const TestbedDefinition& def) {
  std::ostringstream s;
  write_testbed(s, def.testbed, def.schedule);
  return s.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Options shared by several subcommands.
struct Common {
  std::string testbed = "default";
  std::size_t d_side = 8;
  std::uint64_t global_seed = 0;
  unsigned workers = 1;
};

struct GuidanceOpts {
  double omega_l = 5.5, omega_w = 1.0;
  int k = 0;  // 0 selects T / 10
  int fp_iters = 50;
  double fp_tol = 1e-10;

  GuidanceConfig resolve(const NoiseSchedule& s) const {
    GuidanceConfig g{omega_l, omega_w, k > 0 ? k : s.big_t() / 10, fp_iters, fp_tol};
    try {
      g.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (g.k > s.big_t()) throw ConfigError("--k exceeds T=" + std::to_string(s.big_t()));
    return g;
  }
  void describe(ResolvedConfig& rc, const GuidanceConfig& g) const {
    rc.add("omega_l", g.omega_l);
    rc.add("omega_w", g.omega_w);
    rc.add("k", g.k);
    rc.add("fp_iters", g.fp_iters);
    rc.add("fp_tol", g.fp_tol);
  }
};

void add_common(CLI::App* sub, Common& c, bool with_testbed = true) {
  if (with_testbed) {
    sub->add_option("--testbed", c.testbed, "testbed: default, smooth, or a testbed file")->capture_default_str();
    sub->add_option("--d-side", c.d_side, "matrix side for the built-in testbeds")->capture_default_str();
  }
  sub->add_option("--global-seed", c.global_seed, "global seed expanded into named streams")->capture_default_str();
  sub->add_option("--workers", c.workers, "worker threads (artifacts do not depend on this)")
      ->capture_default_str()
      ->check(CLI::Range(1u, 1024u));
}

void add_guidance(CLI::App* sub, GuidanceOpts& g, bool with_k = true) {
  sub->add_option("--omega-l", g.omega_l, "guidance scale of the denoise step")->capture_default_str();
  sub->add_option("--omega-w", g.omega_w, "guidance scale of the inversion step")->capture_default_str();
  if (with_k) sub->add_option("--k", g.k, "re-denoise step in timesteps (0: T/10)")->capture_default_str();
  sub->add_option("--fp-iters", g.fp_iters, "fixed-point iterations of the inversion")->capture_default_str();
  sub->add_option("--fp-tol", g.fp_tol, "fixed-point tolerance of the inversion")->capture_default_str();
}

// testbed

struct TestbedCmd {
  Common common;
  std::string out;

  int run() const {
    const TestbedDefinition def = resolve_testbed(common.testbed, common.d_side);
    const std::string text = testbed_text(def);
    if (out.empty())
      std::cout << text;
    else
      write_text(out, text);
    std::cerr << "testbed d_side=" << def.testbed.d_side() << " classes=" << def.testbed.n_classes()
              << " schedule=" << def.schedule.descriptor() << " hash=" << def.schedule.hash() << "\n";
    return 0;
  }
};

// collect

struct CollectCmd {
  Common common;
  GuidanceOpts guidance;
  double m = 0.0;
  std::string seeds = "0..2000";
  int steps = 10;
  std::string out;

  int run() const {
    const TestbedDefinition def = resolve_testbed(common.testbed, common.d_side);
    const SeedRange range = parse_seeds(seeds);
    CollectConfig cfg;
    cfg.guidance = guidance.resolve(def.schedule);
    cfg.rule = SelectionRule{m};
    try {
      cfg.rule.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (steps < 1 || def.schedule.big_t() % steps != 0) throw ConfigError("--steps must divide T");
    cfg.first_seed = range.first;
    cfg.n_seeds = range.count;
    cfg.n_steps_eval = steps;
    cfg.global_seed = common.global_seed;
    cfg.workers = common.workers;

    ResolvedConfig rc("collect");
    rc.add("testbed", common.testbed);
    rc.add("schedule", def.schedule.descriptor());
    guidance.describe(rc, cfg.guidance);
    rc.add("m", m);
    rc.add("seeds", std::to_string(range.first) + ".." + std::to_string(range.first + range.count));
    rc.add("steps", steps);
    rc.add("global_seed", common.global_seed);
    rc.log_only("workers", std::to_string(common.workers));
    rc.log_only("out", out);
    rc.log();
    cfg.config_text = rc.text();

    const auto t0 = std::chrono::steady_clock::now();
    const CollectionStats st = collect(def.testbed, def.schedule, cfg, out);
    for (std::uint64_t s : st.skipped_seeds) std::cerr << "skip seed=" << s << " reason=non-finite\n";
    std::cout << "collect attempted=" << st.attempted << " kept=" << st.kept << " keep_rate=" << fmt17(st.keep_rate)
              << " mean_score_gap=" << fmt17(st.mean_score_gap) << " mean_raw_gap=" << fmt17(st.mean_raw_gap)
              << " skipped=" << st.skipped << " unconverged=" << st.unconverged << " seconds=" << elapsed(t0)
              << " out=" << out << "\n";
    return 0;
  }
};

// train

struct TrainCmd {
  Common common;
  std::string npd;
  std::string out;
  std::string loss_csv;
  TrainConfig train;
  NpnetConfig model;
  std::uint64_t init_seed = 0;

  int run() {
    NpdDataset ds;
    std::vector<TrainingExample> data;
    if (!npd.empty()) {
      ds = read_npd(npd);
      data = prepare_examples(ds.records);
      model.d_side = ds.header.d_side;
      model.n_classes = ds.header.n_classes;
    }
    try {
      model.validate();
      train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (train.epochs > 0 && npd.empty()) throw ConfigError("--npd is required when --epochs > 0");
    if (train.epochs > 0 && train.batch_size > data.size())
      throw ConfigError("--batch " + std::to_string(train.batch_size) + " exceeds the dataset size " +
                        std::to_string(data.size()));
    train.seed = derive_seed(common.global_seed, "train");

    ResolvedConfig rc("train");
    rc.add("npd_records", static_cast<std::uint64_t>(data.size()));
    rc.add("npd_schedule_hash", ds.header.schedule_hash);
    rc.add("epochs", train.epochs);
    rc.add("batch", static_cast<std::uint64_t>(train.batch_size));
    rc.add("lr", train.lr);
    rc.add("one_prompt_per_batch", train.one_prompt_per_batch);
    rc.add("max_steps", static_cast<std::uint64_t>(train.max_steps < 0 ? 0 : train.max_steps));
    rc.add("init_seed", init_seed);
    rc.add("global_seed", common.global_seed);
    rc.add("width", static_cast<std::uint64_t>(model.width));
    rc.add("heads", static_cast<std::uint64_t>(model.heads));
    rc.add("blocks", static_cast<std::uint64_t>(model.blocks));
    rc.add("embed_dim", static_cast<std::uint64_t>(model.embed_dim));
    rc.add("groups", static_cast<std::uint64_t>(model.groups));
    rc.add("train_embedding", model.train_embedding);
    rc.log_only("npd", npd);
    rc.log_only("out", out);
    rc.log();

    Checkpoint ck{NpnetParams::init(model, init_seed), {}};
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> curve;
    if (train.epochs > 0) {
      TrainResult r;
      try {
        r = train_model(data, ck.params);
      } catch (const TrainingDiverged& e) {
        ck.params = e.last_good();
        ck.meta.emplace_back("diverged", e.what());
        save_checkpoint(out, ck);
        throw;
      }
      ck.params = std::move(r.params);
      curve = r.loss_curve;
      std::cout << "train steps=" << r.steps << " initial_loss=" << fmt17(r.initial_loss)
                << " final_loss=" << fmt17(r.final_loss) << " alpha=" << fmt17(ck.params.alpha.value[0])
                << " beta=" << fmt17(ck.params.beta.value[0]) << " seconds=" << elapsed(t0) << "\n";
      ck.meta.emplace_back("initial_loss", fmt17(r.initial_loss));
      ck.meta.emplace_back("final_loss", fmt17(r.final_loss));
      ck.meta.emplace_back("steps", std::to_string(r.steps));
    } else {
      std::cout << "train steps=0 (initial parameters written)\n";
    }
    ck.meta.emplace_back("one_prompt_per_batch", train.one_prompt_per_batch ? "1" : "0");
    std::istringstream lines(rc.text());
    for (std::string l; std::getline(lines, l);) ck.meta.emplace_back("run", l);
    save_checkpoint(out, ck);
    if (!loss_csv.empty()) {
      std::string csv = "epoch,mean_batch_loss\n";
      for (std::size_t i = 0; i < curve.size(); ++i) csv += std::to_string(i + 1) + "," + fmt17(curve[i]) + "\n";
      write_text(loss_csv, csv);
    }
    for (std::size_t i = 0; i < curve.size(); ++i) std::cerr << "epoch " << i + 1 << " loss=" << fmt17(curve[i]) << "\n";
    return 0;
  }

  TrainResult train_model(const std::vector<TrainingExample>& data, const NpnetParams& init) const {
    return npl::train(data, init, train);
  }
};

// infer

struct InferCmd {
  Common common;
  std::string checkpoint;
  std::uint64_t seed = 0;
  int cls = -1;
  std::string out;

  int run() const {
    const Checkpoint ck = load_checkpoint(checkpoint);
    const NpnetConfig& mc = ck.params.config;
    const Shape shape{mc.d_side, mc.d_side};
    const Tensor x = seed_noise(common.global_seed, seed, shape);
    ClassLabel c = ClassLabel::null();
    if (cls >= 0) {
      if (static_cast<std::size_t>(cls) >= mc.n_classes) throw ConfigError("--class out of range");
      c = ClassLabel::of(static_cast<std::size_t>(cls));
    } else {
      RngStream s{derive_seed(common.global_seed, "class", seed), 0};
      std::vector<double> uniform_prior(mc.n_classes, 1.0 / static_cast<double>(mc.n_classes));
      c = ClassLabel::of(categorical(s, uniform_prior));
    }
    const Tensor g = golden(x, c, ck.params);
    std::ostringstream o;
    o << "seed " << seed << "\nclass " << c.index() << "\n";
    auto emit = [&o](const char* name, const Tensor& t) {
      o << name;
      for (double v : t.data()) o << ' ' << fmt17(v);
      o << "\n";
    };
    emit("x_T", x);
    emit("golden", g);
    if (out.empty())
      std::cout << o.str();
    else
      write_text(out, o.str());
    std::cerr << "infer seed=" << seed << " class=" << c.index() << " change_norm=" << fmt17(norm(g - x))
              << " identical=" << (g == x ? 1 : 0) << "\n";
    return 0;
  }
};

// eval

struct EvalCmd {
  Common common;
  GuidanceOpts guidance;
  std::string checkpoint;
  std::string transform = "checkpoint";
  std::string seeds = "1000000..1000400";
  int steps = 10;
  double omega = -1.0;  // < 0: use omega_l
  std::string csv;
  std::string report;

  int run() const {
    const TestbedDefinition def = resolve_testbed(common.testbed, common.d_side);
    const SeedRange range = parse_seeds(seeds);
    if (steps < 1 || def.schedule.big_t() % steps != 0) throw ConfigError("--steps must divide T");
    const GuidanceConfig g = guidance.resolve(def.schedule);
    EvalConfig cfg;
    cfg.omega = omega >= 0.0 ? omega : g.omega_l;
    cfg.n_steps = steps;
    cfg.first_seed = range.first;
    cfg.n_test = range.count;
    cfg.global_seed = common.global_seed;
    cfg.workers = common.workers;

    ResolvedConfig rc("eval");
    rc.add("testbed", common.testbed);
    rc.add("transform", transform);
    rc.add("seeds", std::to_string(range.first) + ".." + std::to_string(range.first + range.count));
    rc.add("steps", steps);
    rc.add("omega", cfg.omega);
    if (transform == "redenoise") guidance.describe(rc, g);
    rc.add("global_seed", common.global_seed);
    rc.log_only("checkpoint", checkpoint);
    rc.log_only("workers", std::to_string(common.workers));
    rc.log();

    std::optional<Checkpoint> ck;
    NoiseTransform fn;
    const AnalyticPredictor pred(def.testbed, def.schedule);
    if (transform == "checkpoint") {
      if (checkpoint.empty()) throw ConfigError("--checkpoint is required for --transform checkpoint");
      ck = load_checkpoint(checkpoint);
      if (ck->params.config.d_side != def.testbed.d_side() || ck->params.config.n_classes != def.testbed.n_classes())
        throw ConfigError("checkpoint shape does not match the testbed");
      fn = [&ck](const Tensor& x, ClassLabel c) { return golden(x, c, ck->params); };
    } else if (transform == "identity") {
      fn = [](const Tensor& x, ClassLabel) { return x; };
    } else if (transform == "redenoise") {
      fn = [&](const Tensor& x, ClassLabel c) { return redenoise(pred, def.schedule, x, g, c).x_prime; };
    } else {
      throw ConfigError("--transform must be checkpoint, identity or redenoise");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const EvalReport r = winning_rate(fn, def.testbed, def.schedule, cfg);

    std::ostringstream rep;
    rep << rc.text();
    rep << "n_test = " << r.n_test << "\n";
    rep << "winning_rate = " << fmt17(r.winning_rate) << "\n";
    rep << "ci95_low = " << fmt17(r.ci.low) << "\nci95_high = " << fmt17(r.ci.high) << "\n";
    rep << "wins = " << r.strict_wins << "\nties = " << r.ties << "\nlosses = " << r.losses << "\n";
    rep << "mean_score_delta = " << fmt17(r.mean_score_delta) << "\n";
    rep << "mean_noise_change = " << fmt17(r.mean_noise_change) << "\n";
    rep << "frechet_baseline_vs_true = " << fmt17(r.frechet_baseline_vs_true.value) << "\n";
    rep << "frechet_golden_vs_true = " << fmt17(r.frechet_golden_vs_true.value) << "\n";
    rep << "variance_floor_applied = "
        << (r.frechet_baseline_vs_true.floor_applied || r.frechet_golden_vs_true.floor_applied ? "true" : "false") << "\n";
    rep << "spectra_summary =";
    for (double v : r.spectra_summary) rep << ' ' << fmt17(v);
    rep << "\n";
    std::cout << rep.str();
    std::cerr << "eval seconds=" << elapsed(t0) << "\n";
    if (!report.empty()) write_text(report, rep.str());
    if (!csv.empty()) {
      std::string s = "seed,baseline_score,golden_score,delta\n";
      for (std::size_t i = 0; i < r.baseline_scores.size(); ++i)
        s += std::to_string(range.first + i) + "," + fmt17(r.baseline_scores[i]) + "," + fmt17(r.golden_scores[i]) +
             "," + fmt17(r.golden_scores[i] - r.baseline_scores[i]) + "\n";
      write_text(csv, s);
    }
    return 0;
  }
};

// verify-theorem

struct TheoremCmd {
  Common common;
  GuidanceOpts guidance;
  std::string k_list = "64,32,16,8";
  int trials = 20;
  std::string csv;

  int run() const {
    const TestbedDefinition def = resolve_testbed(common.testbed, common.d_side);
    TheoremConfig cfg;
    GuidanceOpts g = guidance;
    g.k = 2;  // placeholder; the k sequence drives the run
    cfg.guidance = g.resolve(def.schedule);
    cfg.k_values = parse_int_list(k_list);
    cfg.n_trials = trials;
    cfg.seed = common.global_seed;
    cfg.workers = common.workers;

    ResolvedConfig rc("verify-theorem");
    rc.add("testbed", common.testbed);
    rc.add("k", k_list);
    rc.add("trials", trials);
    rc.add("omega_l", cfg.guidance.omega_l);
    rc.add("omega_w", cfg.guidance.omega_w);
    rc.add("fp_iters", cfg.guidance.fp_iters);
    rc.add("fp_tol", cfg.guidance.fp_tol);
    rc.add("global_seed", common.global_seed);
    rc.log();

    TheoremReport r;
    try {
      r = verify_theorem(def.testbed, def.schedule, cfg);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    std::ostringstream t;
    char line[256];
    std::snprintf(line, sizeof line, "%6s %14s %14s %14s %14s %14s %10s\n", "k", "coef", "residual", "residual_avg",
                  "predicted", "actual", "ratio");
    t << line;
    for (std::size_t i = 0; i < r.k_values.size(); ++i) {
      const std::string ratio = i == 0 ? "-" : fmt17(r.ratios[i - 1]).substr(0, 8);
      std::snprintf(line, sizeof line, "%6d %14.6e %14.6e %14.6e %14.6e %14.6e %10s\n", r.k_values[i],
                    redenoise_coefficient(def.schedule, r.k_values[i]), r.residuals[i], r.residuals_average_mid[i],
                    r.predicted_delta_norms[i], r.actual_delta_norms[i], ratio.c_str());
      t << line;
    }
    t << "mean_ratio = " << fmt17(r.mean_ratio) << "\n";
    t << "slope = " << fmt17(r.slope) << "\n";
    t << "lipschitz_estimate = " << fmt17(r.lipschitz_estimate) << "\n";
    t << "flagged_trials = " << r.flagged_trials << "\n";
    t << "unconverged_inversions = " << r.unconverged_inversions << "\n";
    std::cout << t.str();
    if (!csv.empty()) {
      std::string s = "k,coef,residual,residual_average_mid,max_residual,predicted_delta,actual_delta\n";
      for (std::size_t i = 0; i < r.k_values.size(); ++i)
        s += std::to_string(r.k_values[i]) + "," + fmt17(redenoise_coefficient(def.schedule, r.k_values[i])) + "," +
             fmt17(r.residuals[i]) + "," + fmt17(r.residuals_average_mid[i]) + "," + fmt17(r.max_residuals[i]) + "," +
             fmt17(r.predicted_delta_norms[i]) + "," + fmt17(r.actual_delta_norms[i]) + "\n";
      write_text(csv, s);
    }
    return 0;
  }
};

// inspect-npd

struct InspectCmd {
  Common common;
  std::string npd;
  bool no_rescore = false;

  int run() const {
    const NpdDataset ds = read_npd(npd);
    const NpdHeader& h = ds.header;
    std::cout << "version = " << h.version << "\nd_side = " << h.d_side << "\nn_classes = " << h.n_classes
              << "\nomega_l = " << fmt17(h.omega_l) << "\nomega_w = " << fmt17(h.omega_w) << "\nk = " << h.k
              << "\nfp_iters = " << h.fp_iters << "\nfp_tol = " << fmt17(h.fp_tol)
              << "\nn_steps_eval = " << h.n_steps_eval << "\nm = " << fmt17(h.m) << "\nscorer_id = " << h.scorer_id
              << "\nschedule = " << h.schedule_descriptor << "\nschedule_hash = " << h.schedule_hash
              << "\nglobal_seed = " << h.global_seed << "\nrecord_count = " << h.record_count << "\n";
    const NpdCheck chk = verify_npd(ds, !no_rescore, common.workers);
    for (const auto& p : chk.problems) std::cerr << "problem " << p << "\n";
    std::cout << "checksums = ok\nselection_failures = " << chk.failed_selection
              << "\nrescore_failures = " << chk.failed_rescore << "\nschedule_ok = " << (chk.schedule_ok ? "true" : "false")
              << "\norder_ok = " << (chk.order_ok ? "true" : "false") << "\nverdict = " << (chk.ok() ? "pass" : "fail")
              << "\n";
    if (!chk.ok()) throw VerificationFailed("inspect-npd: " + std::to_string(chk.problems.size()) + " problems");
    return 0;
  }
};

void print_error(const char* kind, const std::string& message) {
  std::string flat = message;
  for (char& ch : flat)
    if (ch == '\n' || ch == '"') ch = '\'';
  std::cerr << "error kind=" << kind << " message=\"" << flat << "\"\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise prompt learning on an analytic Gaussian-mixture testbed"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from a TOML/INI file (flags take precedence)");

  TestbedCmd tb_cmd;
  auto* tb = app.add_subcommand("testbed", "write a testbed definition file");
  add_common(tb, tb_cmd.common);
  tb->add_option("--out", tb_cmd.out, "output file (stdout when empty)");

  CollectCmd col_cmd;
  auto* col = app.add_subcommand("collect", "collect a noise-pair dataset");
  add_common(col, col_cmd.common);
  add_guidance(col, col_cmd.guidance);
  col->add_option("--m", col_cmd.m, "selection threshold")->capture_default_str();
  col->add_option("--seeds", col_cmd.seeds, "half-open seed range a..b")->capture_default_str();
  col->add_option("--steps", col_cmd.steps, "sampling steps used for scoring")->capture_default_str();
  col->add_option("--out", col_cmd.out, "output dataset file")->required();

  TrainCmd tr_cmd;
  auto* tr = app.add_subcommand("train", "train the noise prompt network");
  add_common(tr, tr_cmd.common, false);
  tr->add_option("--npd", tr_cmd.npd, "training dataset");
  tr->add_option("--out", tr_cmd.out, "checkpoint file")->required();
  tr->add_option("--loss-csv", tr_cmd.loss_csv, "per-epoch loss curve");
  tr->add_option("--epochs", tr_cmd.train.epochs, "epochs (0 writes the initial parameters)")->capture_default_str();
  tr->add_option("--batch", tr_cmd.train.batch_size, "batch size")->capture_default_str();
  tr->add_option("--lr", tr_cmd.train.lr, "learning rate")->capture_default_str();
  tr->add_option("--max-steps", tr_cmd.train.max_steps, "stop after this many steps (-1: no cap)")->capture_default_str();
  tr->add_flag("--one-prompt-per-batch", tr_cmd.train.one_prompt_per_batch, "batches hold a single class");
  tr->add_option("--init-seed", tr_cmd.init_seed, "parameter initialisation seed")->capture_default_str();
  tr->add_option("--d-side", tr_cmd.model.d_side, "matrix side when no dataset is given")->capture_default_str();
  tr->add_option("--classes", tr_cmd.model.n_classes, "class count when no dataset is given")->capture_default_str();
  tr->add_option("--width", tr_cmd.model.width, "model width")->capture_default_str();
  tr->add_option("--heads", tr_cmd.model.heads, "attention heads")->capture_default_str();
  tr->add_option("--blocks", tr_cmd.model.blocks, "residual transformer blocks")->capture_default_str();
  tr->add_option("--embed-dim", tr_cmd.model.embed_dim, "class embedding size")->capture_default_str();
  tr->add_option("--groups", tr_cmd.model.groups, "conditioning norm groups")->capture_default_str();
  tr->add_flag("--train-embedding", tr_cmd.model.train_embedding, "train the class embedding table");

  InferCmd in_cmd;
  auto* inf = app.add_subcommand("infer", "map a seed's noise to golden noise");
  add_common(inf, in_cmd.common, false);
  inf->add_option("--checkpoint", in_cmd.checkpoint, "checkpoint file")->required();
  inf->add_option("--seed", in_cmd.seed, "noise seed")->capture_default_str();
  inf->add_option("--class", in_cmd.cls, "class index (-1: drawn from the seed)")->capture_default_str();
  inf->add_option("--out", in_cmd.out, "output file (stdout when empty)");

  EvalCmd ev_cmd;
  auto* ev = app.add_subcommand("eval", "winning rate, Frechet proxy and singular-vector similarity");
  add_common(ev, ev_cmd.common);
  add_guidance(ev, ev_cmd.guidance);
  ev->add_option("--checkpoint", ev_cmd.checkpoint, "checkpoint file");
  ev->add_option("--transform", ev_cmd.transform, "checkpoint, identity or redenoise")->capture_default_str();
  ev->add_option("--seeds", ev_cmd.seeds, "half-open test seed range a..b")->capture_default_str();
  ev->add_option("--steps", ev_cmd.steps, "sampling steps")->capture_default_str();
  ev->add_option("--omega", ev_cmd.omega, "sampling guidance (-1: omega-l)")->capture_default_str();
  ev->add_option("--csv", ev_cmd.csv, "per-seed scores");
  ev->add_option("--report", ev_cmd.report, "report file");

  TheoremCmd th_cmd;
  th_cmd.common.testbed = "smooth";
  auto* th = app.add_subcommand("verify-theorem", "check the closed-form re-denoise delta");
  add_common(th, th_cmd.common);
  add_guidance(th, th_cmd.guidance, false);
  th->add_option("--k", th_cmd.k_list, "decreasing even step sizes")->capture_default_str();
  th->add_option("--trials", th_cmd.trials, "random x_T per k")->capture_default_str();
  th->add_option("--csv", th_cmd.csv, "plot-ready CSV");

  InspectCmd ins_cmd;
  auto* ins = app.add_subcommand("inspect-npd", "validate a dataset file");
  add_common(ins, ins_cmd.common, false);
  ins->add_option("--npd", ins_cmd.npd, "dataset file")->required();
  ins->add_flag("--no-rescore", ins_cmd.no_rescore, "skip re-synthesizing scores");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("config", e.what());
    return 2;
  }

  try {
    if (tb->parsed()) return tb_cmd.run();
    if (col->parsed()) return col_cmd.run();
    if (tr->parsed()) return tr_cmd.run();
    if (inf->parsed()) return in_cmd.run();
    if (ev->parsed()) return ev_cmd.run();
    if (th->parsed()) return th_cmd.run();
    if (ins->parsed()) return ins_cmd.run();
  } catch (const VerificationFailed& e) {
    print_error("verification", e.what());
    return 1;
  } catch (const std::invalid_argument& e) {
    print_error("config", e.what());
    return 2;
  } catch (const NumericError& e) {
    print_error("numeric", e.what());
    return 3;
  } catch (const IoError& e) {
    print_error("io", e.what());
    return 4;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 3;
  }
  return 2;
}
