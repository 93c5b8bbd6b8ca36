#pragma once

// Noise prompt network. Maps (x_T, class) to a refined noise:
//
//   prediction = alpha * e + x_tilde + beta * x_hat
//
// e       class-conditioned group norm of x_T
// x_tilde x_T with its singular values edited by an attention stack over
//         (u_i, s_i, v_i) tokens
// x_hat   residual predicted by a small patch transformer on x_T + e
//
// Both heads start at zero and alpha starts at 0, so an untrained network is
// the identity map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "npl/autodiff.hpp"
#include "npl/errors.hpp"
#include "npl/npd.hpp"
#include "npl/rng.hpp"
#include "npl/svd.hpp"
#include "npl/tensor.hpp"
#include "npl/testbed.hpp"

namespace npl {

struct NpnetConfig {
  std::size_t d_side = 8;
  std::size_t n_classes = 2;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t embed_dim = 16;
  std::size_t groups = 2;  // conditioning group norm, over rows
  std::size_t blocks = 2;
  std::size_t patch = 2;
  bool train_embedding = false;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("NpnetConfig: " + m); };
    if (d_side == 0 || n_classes == 0 || width == 0 || heads == 0 || embed_dim == 0 || patch == 0)
      fail("sizes must be positive");
    if (width % heads != 0) fail("heads must divide width");
    if (groups == 0 || d_side % groups != 0) fail("groups must divide d_side");
    if (d_side % patch != 0) fail("patch must divide d_side");
  }
  std::size_t tokens() const { return (d_side / patch) * (d_side / patch); }
  std::size_t patch_area() const { return patch * patch; }

  bool operator==(const NpnetConfig&) const = default;
};

struct AttentionParams {
  Parameter q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
};

struct BlockParams {
  Parameter ln1_g, ln1_b;
  AttentionParams attn;
  Parameter ln2_g, ln2_b, mlp1_w, mlp1_b, mlp2_w, mlp2_b;
};

struct NpnetParams {
  NpnetConfig config;
  Parameter embedding;  // n_classes x embed_dim
  Parameter cond_scale_w, cond_scale_b, cond_shift_w, cond_shift_b;
  Parameter svd_u_w, svd_s_w, svd_v_w, svd_b;
  AttentionParams svd_attn;
  Parameter svd_head_w, svd_head_b;
  Parameter patch_w, patch_b, pos;
  std::vector<BlockParams> blocks;
  Parameter out_w, out_b;
  Parameter alpha, beta;

  std::vector<Parameter*> all() {
    std::vector<Parameter*> r{&embedding, &cond_scale_w, &cond_scale_b, &cond_shift_w, &cond_shift_b,
                              &svd_u_w,   &svd_s_w,      &svd_v_w,      &svd_b};
    push_attention(r, svd_attn);
    r.insert(r.end(), {&svd_head_w, &svd_head_b, &patch_w, &patch_b, &pos});
    for (auto& b : blocks) {
      r.insert(r.end(), {&b.ln1_g, &b.ln1_b});
      push_attention(r, b.attn);
      r.insert(r.end(), {&b.ln2_g, &b.ln2_b, &b.mlp1_w, &b.mlp1_b, &b.mlp2_w, &b.mlp2_b});
    }
    r.insert(r.end(), {&out_w, &out_b, &alpha, &beta});
    return r;
  }
  std::vector<const Parameter*> all() const {
    auto r = const_cast<NpnetParams*>(this)->all();
    return {r.begin(), r.end()};
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const Parameter* p : all()) n += p->value.size();
    return n;
  }
  bool all_finite() const {
    const auto ps = all();
    return std::all_of(ps.begin(), ps.end(), [](const Parameter* p) { return p->value.all_finite(); });
  }

  static NpnetParams init(const NpnetConfig& cfg, std::uint64_t seed);

 private:
  static void push_attention(std::vector<Parameter*>& r, AttentionParams& a) {
    r.insert(r.end(), {&a.q_w, &a.q_b, &a.k_w, &a.k_b, &a.v_w, &a.v_b, &a.o_w, &a.o_b});
  }
};

namespace detail {

inline constexpr double kCondNormEps = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

/// Builds parameters in a fixed order from one stream, so init is a pure
/// function of (config, seed).
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_{derive_seed(seed, "init"), 0} {}

  Parameter uniform(std::string name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = (2.0 * npl::uniform(rng_) - 1.0) * bound;
    return {std::move(name), std::move(t)};
  }
  Parameter normal(std::string name, Shape shape, double stddev, bool trainable = true) {
    Tensor t = gaussian(rng_, std::move(shape));
    for (double& v : t.data()) v *= stddev;
    return {std::move(name), std::move(t), trainable};
  }
  static Parameter fill(std::string name, Shape shape, double v) { return {std::move(name), Tensor(std::move(shape), v)}; }

  AttentionParams attention(const std::string& prefix, std::size_t w) {
    AttentionParams a;
    a.q_w = uniform(prefix + ".q.w", {w, w}, w);
    a.q_b = uniform(prefix + ".q.b", {w}, w);
    a.k_w = uniform(prefix + ".k.w", {w, w}, w);
    a.k_b = uniform(prefix + ".k.b", {w}, w);
    a.v_w = uniform(prefix + ".v.w", {w, w}, w);
    a.v_b = uniform(prefix + ".v.b", {w}, w);
    a.o_w = uniform(prefix + ".o.w", {w, w}, w);
    a.o_b = uniform(prefix + ".o.b", {w}, w);
    return a;
  }

 private:
  RngStream rng_;
};

}  // namespace detail

inline NpnetParams NpnetParams::init(const NpnetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  detail::Initializer in(seed);
  const std::size_t d = cfg.d_side, w = cfg.width, e = cfg.embed_dim, pa = cfg.patch_area();
  using I = detail::Initializer;
  NpnetParams p;
  p.config = cfg;
  p.embedding = in.normal("embedding", {cfg.n_classes, e}, 1.0, cfg.train_embedding);
  p.cond_scale_w = in.uniform("cond.scale.w", {e, d}, e);
  p.cond_scale_b = in.uniform("cond.scale.b", {d}, e);
  p.cond_shift_w = in.uniform("cond.shift.w", {e, d}, e);
  p.cond_shift_b = in.uniform("cond.shift.b", {d}, e);
  p.svd_u_w = in.uniform("svd.u.w", {d, w}, d);
  p.svd_s_w = in.uniform("svd.s.w", {1, w}, 1);
  p.svd_v_w = in.uniform("svd.v.w", {d, w}, d);
  p.svd_b = in.uniform("svd.b", {w}, d);
  p.svd_attn = in.attention("svd.attn", w);
  p.svd_head_w = I::fill("svd.head.w", {w, 1}, 0.0);
  p.svd_head_b = I::fill("svd.head.b", {1}, 0.0);
  p.patch_w = in.uniform("patch.w", {pa, w}, pa);
  p.patch_b = in.uniform("patch.b", {w}, pa);
  p.pos = in.normal("pos", {cfg.tokens(), w}, 0.02);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string pre = "blocks." + std::to_string(b);
    BlockParams bp;
    bp.ln1_g = I::fill(pre + ".ln1.g", {w}, 1.0);
    bp.ln1_b = I::fill(pre + ".ln1.b", {w}, 0.0);
    bp.attn = in.attention(pre + ".attn", w);
    bp.ln2_g = I::fill(pre + ".ln2.g", {w}, 1.0);
    bp.ln2_b = I::fill(pre + ".ln2.b", {w}, 0.0);
    bp.mlp1_w = in.uniform(pre + ".mlp1.w", {w, 2 * w}, w);
    bp.mlp1_b = in.uniform(pre + ".mlp1.b", {2 * w}, w);
    bp.mlp2_w = in.uniform(pre + ".mlp2.w", {2 * w, w}, 2 * w);
    bp.mlp2_b = in.uniform(pre + ".mlp2.b", {w}, 2 * w);
    p.blocks.push_back(std::move(bp));
  }
  p.out_w = I::fill("out.w", {w, pa}, 0.0);
  p.out_b = I::fill("out.b", {pa}, 0.0);
  p.alpha = I::fill("alpha", {1}, 0.0);
  p.beta = I::fill("beta", {1}, 1.0);
  return p;
}

/// Places parameters on a tape once per tape. With `record_grads` false they
/// enter as constants and the parameters are never touched.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, bool record_grads) : tape_(tape), record_(record_grads) {}

  Var operator()(const Parameter& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    // Parameters are only bound for gradients by train(), which owns them mutably.
    Var v = record_ ? tape_.param(const_cast<Parameter&>(p)) : tape_.constant(p.value);
    bound_.emplace(&p, v);
    return v;
  }
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  bool record_;
  std::unordered_map<const Parameter*, Var> bound_;
};

/// x_T with its SVD, computed once per input.
struct PreparedInput {
  Tensor x;
  SvdFactors factors;
  ClassLabel c = ClassLabel::null();

  static PreparedInput make(const Tensor& x, ClassLabel c) {
    if (c.is_null()) throw std::invalid_argument("npnet: a class label is required");
    return {x, svd(x), c};
  }
};

namespace detail {

inline Var linear(ParamBinder& b, Var x, const Parameter& w, const Parameter& bias) {
  return ad::add_rowwise(ad::matmul(x, b(w)), b(bias));
}

inline Var attention(ParamBinder& b, Var x, const AttentionParams& a, std::size_t heads) {
  const Var q = linear(b, x, a.q_w, a.q_b), k = linear(b, x, a.k_w, a.k_b), v = linear(b, x, a.v_w, a.v_b);
  const std::size_t hd = q.value().cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = ad::slice_cols(q, h * hd, hd), kh = ad::slice_cols(k, h * hd, hd), vh = ad::slice_cols(v, h * hd, hd);
    const Var att = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv));
    outs.push_back(ad::matmul(att, vh));
  }
  return linear(b, heads == 1 ? outs.front() : ad::concat_cols(outs), a.o_w, a.o_b);
}

inline Var layer_norm(ParamBinder& b, Var x, const Parameter& g, const Parameter& bias) {
  const Var n = ad::group_norm(x, x.value().rows(), kLayerNormEps);
  return ad::add_rowwise(ad::mul_rowwise(n, b(g)), b(bias));
}

/// Index map from a d x d state to (tokens x patch_area) and its inverse.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> patch_maps(std::size_t d, std::size_t p) {
  const std::size_t per_side = d / p, area = p * p;
  std::vector<std::size_t> to_tokens(d * d), to_state(d * d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t tok = (r / p) * per_side + c / p;
      const std::size_t slot = tok * area + (r % p) * p + c % p;
      to_tokens[slot] = r * d + c;
      to_state[r * d + c] = slot;
    }
  return {std::move(to_tokens), std::move(to_state)};
}

/// log(expm1(s)), the softplus preimage of s.
inline double inverse_softplus(double s) {
  s = std::max(s, 1e-12);
  return s > 20.0 ? s + std::log(-std::expm1(-s)) : std::log(std::expm1(s));
}

}  // namespace detail

struct TraceVars {
  Var e, x_tilde, x_hat, prediction;
};

/// Class-conditioned group norm: normalise row groups of x_T, then apply a
/// per-row scale and shift generated from the class embedding.
inline Var condition_graph(ParamBinder& b, const NpnetParams& p, Var x, ClassLabel c) {
  const std::size_t d = p.config.d_side, e = p.config.embed_dim;
  if (c.is_null() || c.index() >= p.config.n_classes) throw std::invalid_argument("npnet: class label out of range");
  const Var n = ad::group_norm(x, p.config.groups, detail::kCondNormEps);
  const Var emb = ad::reshape(ad::row(b(p.embedding), c.index()), {1, e});
  const Var scale = ad::reshape(detail::linear(b, emb, p.cond_scale_w, p.cond_scale_b), {d});
  const Var shift = ad::reshape(detail::linear(b, emb, p.cond_shift_w, p.cond_shift_b), {d});
  const Var gain = ad::add(scale, b.tape().constant(Tensor({d}, 1.0)));
  return ad::add_colwise(ad::mul_colwise(n, gain), shift);
}

/// x + U diag(softplus(a + raw) - s) V^T with a = softplus^{-1}(s) and raw the
/// attention head output; the edit is exactly zero while the head is zero.
inline Var singular_graph(ParamBinder& b, const NpnetParams& p, Var x, const SvdFactors& f) {
  const std::size_t d = p.config.d_side;
  Tape& tp = b.tape();
  const Var ut = tp.constant(transpose(f.u)), vt = tp.constant(transpose(f.v));
  const Var s_col = tp.constant(f.s.reshaped({d, 1}));
  Var tokens = ad::add(ad::add(ad::matmul(ut, b(p.svd_u_w)), ad::matmul(s_col, b(p.svd_s_w))), ad::matmul(vt, b(p.svd_v_w)));
  tokens = ad::add_rowwise(tokens, b(p.svd_b));
  tokens = ad::add(tokens, detail::attention(b, tokens, p.svd_attn, p.config.heads));
  const Var raw = ad::reshape(detail::linear(b, tokens, p.svd_head_w, p.svd_head_b), {d});
  Tensor pre({d}), base({d});
  for (std::size_t i = 0; i < d; ++i) {
    pre[i] = detail::inverse_softplus(f.s[i]);
    base[i] = ad::softplus_value(pre[i]);
  }
  const Var delta = ad::sub(ad::softplus(ad::add(tp.constant(pre), raw)), tp.constant(base));
  const Var edit = ad::matmul(ad::mul_rowwise(tp.constant(f.u), delta), vt);
  return ad::add(x, edit);
}

/// Patch transformer on x + e; returns a d x d residual.
inline Var residual_graph(ParamBinder& b, const NpnetParams& p, Var x, Var e) {
  const NpnetConfig& cfg = p.config;
  const std::size_t d = cfg.d_side;
  if (x.value().shape() != e.value().shape()) throw std::invalid_argument("residual_branch: x and e shapes differ");
  auto [to_tokens, to_state] = detail::patch_maps(d, cfg.patch);
  const Var z = ad::gather(ad::add(x, e), std::move(to_tokens), {cfg.tokens(), cfg.patch_area()});
  Var h = ad::add(detail::linear(b, z, p.patch_w, p.patch_b), b(p.pos));
  for (const BlockParams& bp : p.blocks) {
    h = ad::add(h, detail::attention(b, detail::layer_norm(b, h, bp.ln1_g, bp.ln1_b), bp.attn, cfg.heads));
    const Var m = ad::gelu(detail::linear(b, detail::layer_norm(b, h, bp.ln2_g, bp.ln2_b), bp.mlp1_w, bp.mlp1_b));
    h = ad::add(h, detail::linear(b, m, bp.mlp2_w, bp.mlp2_b));
  }
  const Var out = detail::linear(b, h, p.out_w, p.out_b);
  return ad::gather(out, std::move(to_state), {d, d});
}

inline TraceVars forward_graph(ParamBinder& b, const NpnetParams& p, const PreparedInput& in) {
  const std::size_t d = p.config.d_side;
  if (in.x.size() != d * d) throw std::invalid_argument("npnet: input has the wrong size for d_side");
  const Var x = b.tape().constant(in.x.reshaped({d, d}));
  TraceVars t;
  t.e = condition_graph(b, p, x, in.c);
  t.x_tilde = singular_graph(b, p, x, in.factors);
  t.x_hat = residual_graph(b, p, x, t.e);
  t.prediction = ad::add(ad::add(ad::scale(t.e, b(p.alpha)), t.x_tilde), ad::scale(t.x_hat, b(p.beta)));
  return t;
}

struct ForwardTrace {
  Tensor x_tilde;
  Tensor x_hat;
  Tensor e;
  Tensor prediction;
};

inline ForwardTrace forward(const Tensor& x, ClassLabel c, const NpnetParams& p) {
  Tape tape;
  ParamBinder b(tape, false);
  const TraceVars t = forward_graph(b, p, PreparedInput::make(x, c));
  const Shape& s = x.shape();
  return {t.x_tilde.value().reshaped(s), t.x_hat.value().reshaped(s), t.e.value().reshaped(s),
          t.prediction.value().reshaped(s)};
}

inline Tensor golden(const Tensor& x, ClassLabel c, const NpnetParams& p) {
  Tensor g = forward(x, c, p).prediction;
  if (!g.all_finite()) throw NumericError("golden: non-finite prediction");
  return g;
}

inline Tensor condition(const Tensor& x, ClassLabel c, const NpnetParams& p) {
  Tape tape;
  ParamBinder b(tape, false);
  const std::size_t d = p.config.d_side;
  return condition_graph(b, p, tape.constant(x.reshaped({d, d})), c).value().reshaped(x.shape());
}

inline Tensor singular_branch(const Tensor& x, const NpnetParams& p) {
  Tape tape;
  ParamBinder b(tape, false);
  const std::size_t d = p.config.d_side;
  return singular_graph(b, p, tape.constant(x.reshaped({d, d})), svd(x.reshaped({d, d}))).value().reshaped(x.shape());
}

inline Tensor residual_branch(const Tensor& x, const Tensor& e, const NpnetParams& p) {
  Tape tape;
  ParamBinder b(tape, false);
  const std::size_t d = p.config.d_side;
  return residual_graph(b, p, tape.constant(x.reshaped({d, d})), tape.constant(e.reshaped({d, d})))
      .value()
      .reshaped(x.shape());
}

// Training

struct TrainingExample {
  PreparedInput input;
  Tensor target;
};

inline std::vector<TrainingExample> prepare_examples(const std::vector<NoisePairRecord>& records) {
  std::vector<TrainingExample> out;
  out.reserve(records.size());
  for (const auto& r : records)
    out.push_back({PreparedInput::make(r.x_big_t, ClassLabel::of(r.class_id)), r.x_big_t_prime.reshaped(r.x_big_t.shape())});
  return out;
}

/// Mean over the listed examples of the per-example MSE.
inline Var batch_loss(ParamBinder& b, const NpnetParams& p, const std::vector<TrainingExample>& data,
                      const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw std::invalid_argument("batch_loss: empty batch");
  Tape& tp = b.tape();
  const std::size_t d = p.config.d_side;
  Var total;
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const TrainingExample& ex = data.at(idx[n]);
    const TraceVars t = forward_graph(b, p, ex.input);
    const Var l = ad::mse(t.prediction, tp.constant(ex.target.reshaped({d, d})));
    total = n == 0 ? l : ad::add(total, l);
  }
  return ad::scale(total, 1.0 / static_cast<double>(idx.size()));
}

inline double dataset_loss(const NpnetParams& p, const std::vector<TrainingExample>& data) {
  if (data.empty()) throw std::invalid_argument("dataset_loss: empty dataset");
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tape tape;
    ParamBinder b(tape, false);
    s += batch_loss(b, p, data, {i}).item();
  }
  return s / static_cast<double>(data.size());
}

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool one_prompt_per_batch = false;  // batches hold a single class
  long max_steps = -1;                // stop early once reached; < 0 means no cap

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
  }
};

struct TrainResult {
  NpnetParams params;
  std::vector<double> loss_curve;  // mean batch loss per epoch
  double initial_loss = 0.0;       // dataset loss before the first step
  double final_loss = 0.0;         // dataset loss after the last step
  long steps = 0;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, NpnetParams last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const NpnetParams& last_good() const { return last_good_; }

 private:
  NpnetParams last_good_;
};

namespace detail {

/// Fisher-Yates with the project RNG, so orders are platform independent.
inline void shuffle(std::vector<std::size_t>& v, RngStream& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(npl::uniform(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<TrainingExample>& data,
                                                          const TrainConfig& cfg, RngStream& rng) {
  std::vector<std::vector<std::size_t>> pools;
  if (cfg.one_prompt_per_batch) {
    std::map<std::size_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data[i].input.c.index()].push_back(i);
    for (auto& [cls, v] : by_class) pools.push_back(std::move(v));
  } else {
    pools.emplace_back(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) pools[0][i] = i;
  }
  std::vector<std::vector<std::size_t>> batches;
  for (auto& pool : pools) {
    shuffle(pool, rng);
    for (std::size_t at = 0; at < pool.size(); at += cfg.batch_size)
      batches.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(at),
                           pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), at + cfg.batch_size)));
  }
  if (cfg.one_prompt_per_batch) {
    std::vector<std::size_t> order(batches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, rng);
    std::vector<std::vector<std::size_t>> shuffled;
    for (std::size_t i : order) shuffled.push_back(std::move(batches[i]));
    batches = std::move(shuffled);
  }
  return batches;
}

}  // namespace detail

/// Adam on the mean MSE between forward(x_T) and x'_T.
inline TrainResult train(const std::vector<TrainingExample>& data, NpnetParams init, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  if (cfg.batch_size > data.size())
    throw std::invalid_argument("train: batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                                std::to_string(data.size()));
  TrainResult res{std::move(init), {}, 0.0, 0.0, 0};
  NpnetParams& p = res.params;
  res.initial_loss = dataset_loss(p, data);
  if (!std::isfinite(res.initial_loss)) throw NumericError("train: non-finite initial loss");

  std::vector<Parameter*> params = p.all();
  std::vector<Tensor> m1, m2;
  for (Parameter* q : params) {
    m1.push_back(Tensor::zeros(q->value.shape()));
    m2.push_back(Tensor::zeros(q->value.shape()));
  }
  RngStream rng{derive_seed(cfg.seed, "train"), 0};
  double pow1 = 1.0, pow2 = 1.0;
  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    double sum = 0.0;
    std::size_t n_batches = 0;
    for (const auto& batch : detail::make_batches(data, cfg, rng)) {
      for (Parameter* q : params) q->zero_grad();
      double loss = 0.0;
      {
        Tape tape;
        ParamBinder b(tape, true);
        const Var l = batch_loss(b, p, data, batch);
        loss = l.item();
        if (!std::isfinite(loss))
          throw TrainingDiverged("train: non-finite loss at step " + std::to_string(res.steps) + " (epoch " +
                                     std::to_string(epoch) + ")",
                                 p);
        tape.backward(l);
      }
      pow1 *= cfg.beta1;
      pow2 *= cfg.beta2;
      const NpnetParams before = p;
      for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& q = *params[i];
        if (!q.trainable) continue;
        for (std::size_t j = 0; j < q.value.size(); ++j) {
          const double g = q.grad[j];
          m1[i][j] = cfg.beta1 * m1[i][j] + (1.0 - cfg.beta1) * g;
          m2[i][j] = cfg.beta2 * m2[i][j] + (1.0 - cfg.beta2) * g * g;
          const double mh = m1[i][j] / (1.0 - pow1), vh = m2[i][j] / (1.0 - pow2);
          q.value[j] -= cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps);
        }
      }
      if (!p.all_finite()) throw TrainingDiverged("train: non-finite parameters after step " + std::to_string(res.steps), before);
      sum += loss;
      ++n_batches;
      ++res.steps;
      if (cfg.max_steps >= 0 && res.steps >= cfg.max_steps) {
        stop = true;
        break;
      }
    }
    res.loss_curve.push_back(sum / static_cast<double>(n_batches));
  }
  for (Parameter* q : params) q->zero_grad();
  res.final_loss = dataset_loss(p, data);
  return res;
}

// Checkpoints
//
// Text manifest, terminated by a line "end", followed by a little-endian fp64
// blob. Manifest lines:
//   npnet-checkpoint 1
//   config <key> <value>
//   meta <key> <value...>
//   array <name> <offset> <count> <dim>x<dim>...
//   end

struct Checkpoint {
  NpnetParams params;
  std::vector<std::pair<std::string, std::string>> meta;

  std::string meta_value(const std::string& key, const std::string& fallback = "") const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    return fallback;
  }
};

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
  const NpnetConfig& c = ck.params.config;
  std::ostringstream m;
  m << "npnet-checkpoint 1\n";
  m << "config d_side " << c.d_side << "\nconfig n_classes " << c.n_classes << "\nconfig width " << c.width
    << "\nconfig heads " << c.heads << "\nconfig embed_dim " << c.embed_dim << "\nconfig groups " << c.groups
    << "\nconfig blocks " << c.blocks << "\nconfig patch " << c.patch << "\nconfig train_embedding "
    << (c.train_embedding ? 1 : 0) << "\n";
  for (const auto& [k, v] : ck.meta) {
    if (k.empty() || k.find_first_of(" \n") != std::string::npos)
      throw std::invalid_argument("checkpoint: meta key '" + k + "' must be a single token");
    std::string flat = v;
    std::replace(flat.begin(), flat.end(), '\n', ' ');
    m << "meta " << k << ' ' << flat << "\n";
  }
  std::size_t offset = 0;
  for (const Parameter* p : ck.params.all()) {
    m << "array " << p->name << ' ' << offset << ' ' << p->value.size() << ' ';
    for (std::size_t i = 0; i < p->value.rank(); ++i) m << (i ? "x" : "") << p->value.shape()[i];
    m << "\n";
    offset += p->value.size();
  }
  m << "end\n";
  const std::string text = m.str();
  detail::ByteWriter w;
  w.raw(text.data(), text.size());
  for (const Parameter* p : ck.params.all())
    for (double v : p->value.data()) w.f64(v);
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  const std::string all(bytes.begin(), bytes.end());
  const std::string terminator = "\nend\n";
  const std::size_t at = all.find(terminator);
  if (all.rfind("npnet-checkpoint 1\n", 0) != 0 || at == std::string::npos)
    throw FormatError("checkpoint: missing header or manifest terminator");
  const std::size_t blob_at = at + terminator.size();
  std::istringstream in(all.substr(0, at + 1));
  std::string line;
  std::getline(in, line);
  NpnetConfig cfg;
  std::vector<std::pair<std::string, std::string>> meta;
  struct ArrayEntry {
    std::size_t offset, count;
    std::string shape;
  };
  std::map<std::string, ArrayEntry> arrays;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind, key;
    ls >> kind >> key;
    if (kind == "config") {
      std::size_t v = 0;
      if (!(ls >> v)) throw FormatError("checkpoint: bad config line '" + line + "'");
      if (key == "d_side") cfg.d_side = v;
      else if (key == "n_classes") cfg.n_classes = v;
      else if (key == "width") cfg.width = v;
      else if (key == "heads") cfg.heads = v;
      else if (key == "embed_dim") cfg.embed_dim = v;
      else if (key == "groups") cfg.groups = v;
      else if (key == "blocks") cfg.blocks = v;
      else if (key == "patch") cfg.patch = v;
      else if (key == "train_embedding") cfg.train_embedding = v != 0;
      else throw FormatError("checkpoint: unknown config key '" + key + "'");
    } else if (kind == "meta") {
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
      meta.emplace_back(key, rest);
    } else if (kind == "array") {
      ArrayEntry e{};
      if (!(ls >> e.offset >> e.count >> e.shape)) throw FormatError("checkpoint: bad array line '" + line + "'");
      arrays[key] = e;
    } else {
      throw FormatError("checkpoint: unexpected line '" + line + "'");
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  Checkpoint ck{NpnetParams::init(cfg, 0), std::move(meta)};
  const std::size_t n_values = (bytes.size() - blob_at) / 8;
  if ((bytes.size() - blob_at) % 8 != 0 || n_values != ck.params.count())
    throw FormatError("checkpoint: blob holds " + std::to_string(bytes.size() - blob_at) + " bytes, expected " +
                      std::to_string(ck.params.count() * 8));
  if (arrays.size() != ck.params.all().size()) throw FormatError("checkpoint: array count mismatch");
  detail::ByteReader blob(bytes.data() + blob_at, bytes.size() - blob_at);
  std::vector<double> values(n_values);
  for (double& v : values) v = blob.f64();
  for (Parameter* p : ck.params.all()) {
    const auto it = arrays.find(p->name);
    if (it == arrays.end()) throw FormatError("checkpoint: missing array " + p->name);
    const ArrayEntry& e = it->second;
    if (e.count != p->value.size() || e.offset + e.count > n_values)
      throw FormatError("checkpoint: array " + p->name + " has the wrong size");
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(e.offset), e.count, p->value.data().begin());
    p->zero_grad();
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { write_bytes(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_bytes(path)); }

}  // namespace npl
