#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>
#include <npl/npd.hpp>
#include <npl/npnet.hpp>
#include <npl/testbed.hpp>

using namespace npl;

namespace {

using Mat = Eigen::MatrixXd;

Tensor noise(std::uint64_t seed, std::size_t d) {
  RngStream r{seed, 0};
  return gaussian(r, {d, d});
}

NpnetConfig small_config(std::size_t d, std::size_t width = 16, std::size_t heads = 4) {
  NpnetConfig c;
  c.d_side = d;
  c.width = width;
  c.heads = heads;
  c.embed_dim = 8;
  return c;
}

// Moves every weight off its initial value, including the zero heads, so
// that all paths through the network are live.
NpnetParams perturbed(const NpnetConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  NpnetParams p = NpnetParams::init(cfg, seed);
  RngStream r{seed ^ 0x5eedULL, 0};
  for (Parameter* q : p.all()) {
    const Tensor g = gaussian(r, q->value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) q->value[i] += scale * g[i];
  }
  return p;
}

// Independent dense implementation of the network used as an oracle.

Mat dense(const Tensor& t, std::size_t rows, std::size_t cols) {
  Mat m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = t[i * cols + j];
  return m;
}
Mat dense(const Parameter& p) {
  const auto& s = p.value.shape();
  return s.size() == 1 ? dense(p.value, 1, s[0]) : dense(p.value, s[0], s[1]);
}
Eigen::RowVectorXd vec(const Parameter& p) {
  return Eigen::Map<const Eigen::RowVectorXd>(p.value.data().data(), static_cast<Eigen::Index>(p.value.size()));
}

Mat lin(const Mat& x, const Parameter& w, const Parameter& b) {
  return (x * dense(w)).rowwise() + vec(b);
}

double sp(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

Mat norm_rows_in_groups(const Mat& x, std::size_t groups, double eps) {
  Mat out = x;
  const Eigen::Index per = x.rows() / static_cast<Eigen::Index>(groups);
  for (Eigen::Index g = 0; g < static_cast<Eigen::Index>(groups); ++g) {
    auto blk = out.middleRows(g * per, per);
    const double mean = blk.mean();
    const double var = (blk.array() - mean).square().mean();
    blk = ((blk.array() - mean) / std::sqrt(var + eps)).matrix();
  }
  return out;
}

Mat layer_norm(const Mat& x, const Parameter& g, const Parameter& b) {
  Mat n = norm_rows_in_groups(x, static_cast<std::size_t>(x.rows()), 1e-5);
  return (n.array().rowwise() * vec(g).array()).matrix().rowwise() + vec(b);
}

Mat attention(const Mat& x, const AttentionParams& a, std::size_t heads) {
  const Mat q = lin(x, a.q_w, a.q_b), k = lin(x, a.k_w, a.k_b), v = lin(x, a.v_w, a.v_b);
  const Eigen::Index hd = q.cols() / static_cast<Eigen::Index>(heads);
  Mat cat(x.rows(), q.cols());
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(heads); ++h) {
    Mat s = q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose() / std::sqrt(double(hd));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      s.row(i).array() = (s.row(i).array() - s.row(i).maxCoeff()).exp();
      s.row(i) /= s.row(i).sum();
    }
    cat.middleCols(h * hd, hd) = s * v.middleCols(h * hd, hd);
  }
  return lin(cat, a.o_w, a.o_b);
}

struct DenseTrace {
  Mat e, x_tilde, x_hat, prediction;
};

DenseTrace dense_forward(const Tensor& xt, std::size_t cls, const NpnetParams& p) {
  const NpnetConfig& c = p.config;
  const auto d = static_cast<Eigen::Index>(c.d_side);
  const Mat x = dense(xt, c.d_side, c.d_side);
  DenseTrace t;

  const Mat emb = dense(p.embedding).row(static_cast<Eigen::Index>(cls));
  const Eigen::RowVectorXd gain = lin(emb, p.cond_scale_w, p.cond_scale_b).array() + 1.0;
  const Eigen::RowVectorXd shift = lin(emb, p.cond_shift_w, p.cond_shift_b);
  t.e = norm_rows_in_groups(x, c.groups, 1e-12);
  for (Eigen::Index i = 0; i < d; ++i) t.e.row(i) = t.e.row(i) * gain(i) + Eigen::RowVectorXd::Constant(d, shift(i));

  // Reuse the library factors: the token features depend on the sign convention.
  const SvdFactors f = svd(xt.reshaped({c.d_side, c.d_side}));
  const Mat u = dense(f.u, c.d_side, c.d_side), v = dense(f.v, c.d_side, c.d_side);
  const Mat s = dense(f.s, c.d_side, 1);
  Mat tok = u.transpose() * dense(p.svd_u_w) + s * dense(p.svd_s_w) + v.transpose() * dense(p.svd_v_w);
  tok = tok.rowwise() + vec(p.svd_b);
  tok += attention(tok, p.svd_attn, c.heads);
  const Mat raw = lin(tok, p.svd_head_w, p.svd_head_b);
  Eigen::VectorXd s_new(d);
  for (Eigen::Index i = 0; i < d; ++i) s_new(i) = sp(std::log(std::expm1(s(i))) + raw(i, 0));
  t.x_tilde = u * s_new.asDiagonal() * v.transpose();

  const Eigen::Index ps = static_cast<Eigen::Index>(c.patch), side = d / ps;
  Mat z(side * side, ps * ps);
  const Mat xe = x + t.e;
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index q = 0; q < d; ++q) z((r / ps) * side + q / ps, (r % ps) * ps + q % ps) = xe(r, q);
  Mat h = lin(z, p.patch_w, p.patch_b) + dense(p.pos);
  for (const BlockParams& b : p.blocks) {
    h += attention(layer_norm(h, b.ln1_g, b.ln1_b), b.attn, c.heads);
    Mat m = lin(layer_norm(h, b.ln2_g, b.ln2_b), b.mlp1_w, b.mlp1_b);
    m = m.unaryExpr([](double a) { return 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0))); });
    h += lin(m, b.mlp2_w, b.mlp2_b);
  }
  const Mat out = lin(h, p.out_w, p.out_b);
  t.x_hat.resize(d, d);
  for (Eigen::Index r = 0; r < d; ++r)
    for (Eigen::Index q = 0; q < d; ++q) t.x_hat(r, q) = out((r / ps) * side + q / ps, (r % ps) * ps + q % ps);

  t.prediction = p.alpha.value[0] * t.e + t.x_tilde + p.beta.value[0] * t.x_hat;
  return t;
}

double max_diff(const Tensor& a, const Mat& b) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      m = std::max(m, std::abs(a[static_cast<std::size_t>(i * b.cols() + j)] - b(i, j)));
  return m;
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<TrainingExample> random_pairs(std::size_t n, std::size_t d, std::uint64_t seed, double gap = 0.5) {
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor x = noise(seed + 2 * i, d);
    Tensor target = x;
    const Tensor push = noise(seed + 2 * i + 1, d);
    for (std::size_t j = 0; j < x.size(); ++j) target[j] += gap * push[j];
    out.push_back({PreparedInput::make(x, ClassLabel::of(i % 2)), target});
  }
  return out;
}

std::vector<TrainingExample> collected_pairs(std::size_t d, std::size_t want) {
  const MixtureTestbed tb = presets::default_two_class(d);
  const NoiseSchedule sched = NoiseSchedule::cosine();
  CollectConfig cfg;
  cfg.global_seed = 11;
  cfg.n_seeds = 400;
  cfg.workers = 1;
  auto r = collect_records(tb, sched, cfg);
  if (r.records.size() < want) throw std::runtime_error("collected_pairs: too few kept records");
  r.records.resize(want);
  return prepare_examples(r.records);
}

}  // namespace

TEST(Npnet, ConfigValidation) {
  NpnetConfig c;
  EXPECT_NO_THROW(c.validate());
  c.heads = 5;  // does not divide width 32
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.groups = 3;  // does not divide 8 rows
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.d_side = 7;  // not a multiple of the patch size
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Npnet, InitParamsAreFiniteWithScalarMixing) {
  const NpnetParams p = NpnetParams::init({}, 1);
  EXPECT_TRUE(p.all_finite());
  EXPECT_EQ(p.alpha.value.size(), 1u);
  EXPECT_EQ(p.beta.value.size(), 1u);
  EXPECT_EQ(p.alpha.value[0], 0.0);
  EXPECT_FALSE(p.embedding.trainable);
  EXPECT_GT(p.count(), 1000u);
}

TEST(Npnet, InitIsExactIdentity) {
  for (std::size_t d : {4u, 8u, 16u}) {
    const NpnetParams p = NpnetParams::init(small_config(d), 3);
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Tensor x = noise(100 + s, d);
      for (std::size_t c = 0; c < 2; ++c) {
        const ForwardTrace t = forward(x, ClassLabel::of(c), p);
        EXPECT_EQ(t.prediction, x) << "d=" << d;
        EXPECT_EQ(t.x_tilde, x);
        EXPECT_EQ(golden(x, ClassLabel::of(c), p), x);
        EXPECT_TRUE(std::all_of(t.x_hat.data().begin(), t.x_hat.data().end(), [](double v) { return v == 0.0; }));
      }
    }
  }
}

TEST(Npnet, InitWithNonzeroAlphaAddsEmbeddingTerm) {
  NpnetParams p = NpnetParams::init(small_config(8), 3);
  p.alpha.value[0] = 0.25;
  const Tensor x = noise(7, 8);
  const ForwardTrace t = forward(x, ClassLabel::of(1), p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(t.prediction[i], x[i] + 0.25 * t.e[i], 1e-15);
}

TEST(Npnet, ForwardMatchesDenseReference) {
  for (std::size_t d : {4u, 8u}) {
    const NpnetParams p = perturbed(small_config(d), 21 + d);
    for (std::uint64_t s = 0; s < 3; ++s) {
      const Tensor x = noise(500 + s, d);
      for (std::size_t c = 0; c < 2; ++c) {
        const ForwardTrace t = forward(x, ClassLabel::of(c), p);
        const DenseTrace ref = dense_forward(x, c, p);
        EXPECT_LE(max_diff(t.e, ref.e), 1e-10);
        EXPECT_LE(max_diff(t.x_tilde, ref.x_tilde), 1e-10);
        EXPECT_LE(max_diff(t.x_hat, ref.x_hat), 1e-10);
        EXPECT_LE(max_diff(t.prediction, ref.prediction), 1e-10);
      }
    }
  }
}

TEST(Npnet, TraceInvariant) {
  const NpnetParams p = perturbed(small_config(8), 5);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const ForwardTrace t = forward(noise(s, 8), ClassLabel::of(s % 2), p);
    const double a = p.alpha.value[0], b = p.beta.value[0];
    for (std::size_t i = 0; i < t.prediction.size(); ++i)
      EXPECT_NEAR(t.prediction[i], a * t.e[i] + t.x_tilde[i] + b * t.x_hat[i], 1e-12);
  }
}

TEST(Npnet, MixingCollapsesAndIsLinearInAlpha) {
  NpnetParams p = perturbed(small_config(8), 6);
  const Tensor x = noise(8, 8);
  const ClassLabel c = ClassLabel::of(0);
  p.alpha.value[0] = 0.0;
  p.beta.value[0] = 0.0;
  const ForwardTrace t0 = forward(x, c, p);
  EXPECT_EQ(t0.prediction, t0.x_tilde);

  p.beta.value[0] = 0.7;
  const double a = 0.3;
  p.alpha.value[0] = a;
  const ForwardTrace t1 = forward(x, c, p);
  p.alpha.value[0] = 2 * a;
  const ForwardTrace t2 = forward(x, c, p);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(t2.prediction[i] - t1.prediction[i], a * t1.e[i], 1e-12);
}

TEST(Npnet, SingularBranchIsIdentityAtInit) {
  const NpnetParams p = NpnetParams::init(small_config(8), 9);
  const Tensor x = noise(12, 8);
  EXPECT_LE(max_diff(singular_branch(x, p), x), 1e-9);
}

TEST(Npnet, SingularBranchKeepsSingularSubspaces) {
  const NpnetParams p = perturbed(small_config(8), 10);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = noise(40 + s, 8);
    const Tensor y = singular_branch(x, p);
    const SvdFactors fx = svd(x), fy = svd(y);
    // The edit changes singular values; require them distinct so vectors are defined.
    bool distinct = true;
    for (std::size_t i = 1; i < 8; ++i) distinct = distinct && fy.s[i - 1] - fy.s[i] > 1e-6;
    ASSERT_TRUE(distinct);
    EXPECT_GT(max_diff(y, x), 1e-3);
    for (std::size_t i = 0; i < 8; ++i) {
      double best_u = 0.0, best_v = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        double cu = 0.0, cv = 0.0;
        for (std::size_t k = 0; k < 8; ++k) {
          cu += fy.u(k, i) * fx.u(k, j);
          cv += fy.v(k, i) * fx.v(k, j);
        }
        best_u = std::max(best_u, std::abs(cu));
        best_v = std::max(best_v, std::abs(cv));
      }
      EXPECT_GE(best_u, 1 - 1e-6);
      EXPECT_GE(best_v, 1 - 1e-6);
    }
  }
}

TEST(Npnet, ResidualBranchZeroAtInitAndShapes) {
  for (std::size_t d : {4u, 8u, 16u}) {
    const NpnetParams p0 = NpnetParams::init(small_config(d), 2);
    const Tensor x = noise(d, d), e = noise(d + 1, d);
    const Tensor r0 = residual_branch(x, e, p0);
    EXPECT_EQ(r0.shape(), (Shape{d, d}));
    EXPECT_TRUE(std::all_of(r0.data().begin(), r0.data().end(), [](double v) { return v == 0.0; }));

    const NpnetParams p1 = perturbed(small_config(d), 2);
    const Tensor r1 = residual_branch(x, e, p1);
    EXPECT_EQ(r1.shape(), (Shape{d, d}));
    EXPECT_TRUE(r1.all_finite());
    EXPECT_GT(max_diff(r1, Tensor::zeros({d, d})), 1e-3);
    EXPECT_THROW(residual_branch(x, noise(3, d / 2), p1), std::invalid_argument);
  }
}

TEST(Npnet, ConditionNormalisesGroups) {
  NpnetParams p = NpnetParams::init(small_config(8), 4);
  for (Parameter* q : {&p.cond_scale_w, &p.cond_scale_b, &p.cond_shift_w, &p.cond_shift_b})
    q->value = Tensor::zeros(q->value.shape());
  const Tensor x = noise(77, 8);
  const Tensor e = condition(x, ClassLabel::of(0), p);
  const std::size_t per = 8 * 8 / p.config.groups;
  for (std::size_t g = 0; g < p.config.groups; ++g) {
    double mean = 0.0, var = 0.0;
    for (std::size_t k = 0; k < per; ++k) mean += e[g * per + k];
    mean /= static_cast<double>(per);
    for (std::size_t k = 0; k < per; ++k) var += (e[g * per + k] - mean) * (e[g * per + k] - mean);
    var /= static_cast<double>(per);
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-10);
  }
}

TEST(Npnet, ConditionDependsOnClassNotScale) {
  const NpnetParams p = NpnetParams::init(small_config(8), 4);
  const Tensor x = noise(78, 8);
  const Tensor e0 = condition(x, ClassLabel::of(0), p), e1 = condition(x, ClassLabel::of(1), p);
  EXPECT_GT(max_diff(e0, e1), 1e-3);

  Tensor x2 = x;
  for (double& v : x2.data()) v *= 2.0;
  EXPECT_LE(max_diff(condition(x2, ClassLabel::of(0), p), e0), 1e-6);

  EXPECT_THROW(condition(x, ClassLabel::null(), p), std::invalid_argument);
  EXPECT_THROW(condition(x, ClassLabel::of(2), p), std::invalid_argument);
  EXPECT_THROW(golden(x, ClassLabel::null(), p), std::invalid_argument);
}

TEST(Npnet, GoldenIsDeterministic) {
  const NpnetParams p = perturbed(small_config(8), 13);
  const Tensor x = noise(3, 8);
  EXPECT_EQ(golden(x, ClassLabel::of(1), p), golden(x, ClassLabel::of(1), p));
}

TEST(Npnet, FullModelGradientCheck) {
  NpnetConfig cfg = small_config(4, 8, 2);
  cfg.train_embedding = true;
  NpnetParams p = perturbed(cfg, 31, 0.2);
  const auto data = random_pairs(2, 4, 900);
  const std::vector<std::size_t> idx{0, 1};
  auto params = p.all();
  const double err = grad_check(
      [&](Tape& t) {
        ParamBinder b(t, true);
        return batch_loss(b, p, data, idx);
      },
      params, 1e-6);
  EXPECT_LE(err, 1e-4);
}

TEST(Npnet, SingularBranchGradientUnderRotatedInput) {
  NpnetConfig cfg = small_config(4, 8, 2);
  NpnetParams p = perturbed(cfg, 32, 0.2);
  // Pre-rotate the input so its left singular vectors change.
  const Tensor x = noise(61, 4);
  const double th = 0.4;
  Tensor rot = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) rot(i, i) = 1.0;
  rot(0, 0) = rot(1, 1) = std::cos(th);
  rot(0, 1) = -std::sin(th);
  rot(1, 0) = std::sin(th);
  Tensor xr = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t k = 0; k < 4; ++k) xr(i, j) += rot(i, k) * x(k, j);
  EXPECT_GT(max_diff(singular_branch(xr, p), singular_branch(x, p)), 1e-6);

  std::vector<TrainingExample> data{{PreparedInput::make(xr, ClassLabel::of(0)), noise(62, 4)}};
  auto params = p.all();
  const double err = grad_check(
      [&](Tape& t) {
        ParamBinder b(t, true);
        return batch_loss(b, p, data, {0});
      },
      params, 1e-6);
  EXPECT_LE(err, 1e-4);
}

TEST(Train, IdentityDatasetStaysAtZeroLoss) {
  std::vector<TrainingExample> data;
  for (std::size_t i = 0; i < 8; ++i) {
    const Tensor x = noise(300 + i, 4);
    data.push_back({PreparedInput::make(x, ClassLabel::of(i % 2)), x});
  }
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  const TrainResult r = train(data, NpnetParams::init(small_config(4), 1), tc);
  EXPECT_LE(r.final_loss, r.initial_loss);
  EXPECT_LE(r.final_loss, 1e-6);
  EXPECT_EQ(r.loss_curve.size(), 3u);
  EXPECT_EQ(r.steps, 6);
}

TEST(Train, OverfitsSixteenRecords) {
  const auto data = collected_pairs(8, 16);
  TrainConfig tc;
  tc.epochs = 2000;
  tc.batch_size = 16;
  tc.max_steps = 2000;
  const TrainResult r = train(data, NpnetParams::init({}, 5), tc);
  EXPECT_GT(r.initial_loss, 0.0);
  EXPECT_LE(r.final_loss, 1e-3 * r.initial_loss) << r.initial_loss << " -> " << r.final_loss;
  EXPECT_LE(r.steps, 2000);
}

TEST(Train, LossDecreasesOverEpochs) {
  const auto data = random_pairs(32, 4, 1234, 0.3);
  TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 8;
  const TrainResult r = train(data, NpnetParams::init(small_config(4), 8), tc);
  EXPECT_LT(r.final_loss, r.initial_loss);
  EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
  for (std::size_t i = 1; i < r.loss_curve.size(); ++i) EXPECT_LE(r.loss_curve[i], 1.05 * r.loss_curve[i - 1]);
}

TEST(Train, OnePromptPerBatchChangesBatchingButBothConverge) {
  const auto data = random_pairs(32, 4, 77, 0.3);
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = 8;
  tc.seed = 3;
  tc.one_prompt_per_batch = true;
  RngStream rng{derive_seed(tc.seed, "train"), 0};
  for (const auto& batch : detail::make_batches(data, tc, rng)) {
    ASSERT_FALSE(batch.empty());
    for (std::size_t i : batch) EXPECT_EQ(data[i].input.c, data[batch.front()].input.c);
  }
  const NpnetParams init = NpnetParams::init(small_config(4), 8);
  const TrainResult single = train(data, init, tc);
  tc.one_prompt_per_batch = false;
  const TrainResult mixed = train(data, init, tc);
  EXPECT_NE(single.loss_curve, mixed.loss_curve);
  EXPECT_LT(single.final_loss, single.initial_loss);
  EXPECT_LT(mixed.final_loss, mixed.initial_loss);
}

TEST(Train, DeterministicGivenSeed) {
  const auto data = random_pairs(16, 4, 42);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 9;
  const NpnetParams init = NpnetParams::init(small_config(4), 8);
  const TrainResult a = train(data, init, tc), b = train(data, init, tc);
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  const std::vector<const Parameter*> pa = a.params.all(), pb = b.params.all();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
  tc.seed = 10;
  EXPECT_NE(train(data, init, tc).loss_curve, a.loss_curve);
}

TEST(Train, RejectsBadInput) {
  const auto data = random_pairs(4, 4, 1);
  const NpnetParams init = NpnetParams::init(small_config(4), 1);
  TrainConfig tc;
  tc.batch_size = 5;
  EXPECT_THROW(train(data, init, tc), std::invalid_argument);
  tc.batch_size = 2;
  EXPECT_THROW(train({}, init, tc), std::invalid_argument);
  tc.lr = 0.0;
  EXPECT_THROW(train(data, init, tc), std::invalid_argument);

  auto bad = data;
  bad[0].target[0] = std::nan("");
  tc.lr = 1e-3;
  EXPECT_THROW(train(bad, init, tc), NumericError);
}

TEST(Train, DivergenceKeepsLastGoodParameters) {
  const auto data = random_pairs(4, 4, 2);
  TrainConfig tc;
  tc.batch_size = 1;
  tc.epochs = 2;
  tc.lr = 1e300;  // one Adam step moves weights by ~lr, so the next forward overflows
  const NpnetParams init = NpnetParams::init(small_config(4), 1);
  try {
    train(data, init, tc);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_TRUE(e.last_good().all_finite());
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  NpnetConfig cfg = small_config(8);
  cfg.train_embedding = true;
  Checkpoint ck{perturbed(cfg, 17), {{"one_prompt_per_batch", "1"}, {"note", "two words"}}};
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.meta_value("one_prompt_per_batch"), "1");
  EXPECT_EQ(back.meta_value("missing", "x"), "x");
  EXPECT_EQ(back.params.config.d_side, cfg.d_side);
  EXPECT_EQ(back.params.config.width, cfg.width);
  EXPECT_EQ(back.params.config.train_embedding, true);
  const std::vector<const Parameter*> pa = std::as_const(ck.params).all(), pb = back.params.all();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->name, pb[i]->name);
    EXPECT_EQ(pa[i]->value.shape(), pb[i]->value.shape());
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    EXPECT_EQ(pa[i]->trainable, pb[i]->trainable);
  }
  const Tensor x = noise(5, 8);
  EXPECT_EQ(golden(x, ClassLabel::of(1), ck.params), golden(x, ClassLabel::of(1), back.params));
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, FileRoundTrip) {
  const Checkpoint ck{NpnetParams::init({}, 2), {}};
  const std::string path = ::testing::TempDir() + "npl_ckpt_test.bin";
  save_checkpoint(path, ck);
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path)), encode_checkpoint(ck));
  EXPECT_THROW(load_checkpoint(path + ".missing"), IoError);
}

TEST(Checkpoint, CorruptionIsRejected) {
  const auto bytes = encode_checkpoint({NpnetParams::init(small_config(4), 2), {}});
  EXPECT_THROW(decode_checkpoint({}), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 8);
  EXPECT_THROW(decode_checkpoint(truncated), FormatError);
  auto extended = bytes;
  extended.push_back(0);
  EXPECT_THROW(decode_checkpoint(extended), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), FormatError);
  std::string text(bytes.begin(), bytes.end());
  const auto at = text.find("config width");
  ASSERT_NE(at, std::string::npos);
  auto bad_cfg = bytes;
  bad_cfg[at + 13] = '7';  // width no longer matches the array shapes
  EXPECT_THROW(decode_checkpoint(bad_cfg), FormatError);
}
