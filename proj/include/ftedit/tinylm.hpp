#pragma once

// Small decoder-only transformer with hand-written forward and backward
// passes. Pre-LayerNorm blocks, learned positional embeddings, tanh-GELU
// feed-forward, untied unembedding. Optional low-rank adapters on the six
// projection matrices of each block.
//
// Layout conventions: activations are row-per-token (N x d). A weight W of
// shape d_out x d_in maps x -> x W^T. An adapter (A: d_out x r, B: r x d_in)
// adds scale * A B to W.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ftedit/common.hpp"
#include "ftedit/tokenizer.hpp"

namespace ftedit {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 48;
  int vocab_size = 0;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1 || vocab_size < 1)
      throw std::invalid_argument("ModelConfig: all sizes must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  }
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { Embedding, Positional, AttentionNorm, Attention, FfnNorm, Ffn, FinalNorm, Unembedding };
inline constexpr int kNumParamGroups = 8;

struct LayerParams {
  Mat ln1_gain, ln1_bias;
  Mat wq, wk, wv, wo;
  Mat ln2_gain, ln2_bias;
  Mat w_up, b_up;
  Mat w_down, b_down;
};

struct Parameters {
  Mat tok_emb;  // V x d
  Mat pos_emb;  // L x d
  std::vector<LayerParams> layers;
  Mat lnf_gain, lnf_bias;
  Mat unembed;  // V x d
};

enum class Proj { Query, Key, Value, Output, Up, Down };
inline constexpr int kNumProj = 6;

inline const char* to_string(Proj p) {
  static constexpr const char* names[] = {"q", "k", "v", "o", "up", "down"};
  return names[static_cast<int>(p)];
}

struct LowRankAdapter {
  int layer = 0;
  Proj target = Proj::Query;
  Mat a;  // d_out x r
  Mat b;  // r x d_in
};

struct AdapterSet {
  int rank = 0;
  double scale = 1.0;
  std::vector<LowRankAdapter> adapters;

  bool empty() const { return adapters.empty(); }
  const LowRankAdapter* find(int layer, Proj p) const {
    for (const auto& a : adapters)
      if (a.layer == layer && a.target == p) return &a;
    return nullptr;
  }
  LowRankAdapter* find(int layer, Proj p) {
    return const_cast<LowRankAdapter*>(std::as_const(*this).find(layer, p));
  }
};

/// A model is its configuration, base weights and (possibly empty) adapters.
/// The same shape doubles as the gradient container.
struct Model {
  ModelConfig config;
  Parameters params;
  AdapterSet adapters;
};

struct TensorInfo {
  std::string name;
  ParamGroup group;
  int layer = -1;  // -1 for tensors outside the blocks
  bool adapter = false;
};

/// Visits every tensor of one or more identically shaped models in declared
/// order: embeddings, per-layer block weights, final norm, unembedding, then
/// adapters (a before b).
template <typename F, typename First, typename... Rest>
void visit_tensors(F&& f, First& first, Rest&... rest) {
  auto info = [](std::string name, ParamGroup g, int layer, bool adapter = false) {
    return TensorInfo{std::move(name), g, layer, adapter};
  };
  f(info("tok_emb", ParamGroup::Embedding, -1), first.params.tok_emb, rest.params.tok_emb...);
  f(info("pos_emb", ParamGroup::Positional, -1), first.params.pos_emb, rest.params.pos_emb...);
  for (std::size_t l = 0; l < first.params.layers.size(); ++l) {
    const int li = static_cast<int>(l);
    const std::string p = "layers." + std::to_string(l) + ".";
#define FTEDIT_VISIT(field, group) \
  f(info(p + #field, group, li), first.params.layers[l].field, rest.params.layers[l].field...)
    FTEDIT_VISIT(ln1_gain, ParamGroup::AttentionNorm);
    FTEDIT_VISIT(ln1_bias, ParamGroup::AttentionNorm);
    FTEDIT_VISIT(wq, ParamGroup::Attention);
    FTEDIT_VISIT(wk, ParamGroup::Attention);
    FTEDIT_VISIT(wv, ParamGroup::Attention);
    FTEDIT_VISIT(wo, ParamGroup::Attention);
    FTEDIT_VISIT(ln2_gain, ParamGroup::FfnNorm);
    FTEDIT_VISIT(ln2_bias, ParamGroup::FfnNorm);
    FTEDIT_VISIT(w_up, ParamGroup::Ffn);
    FTEDIT_VISIT(b_up, ParamGroup::Ffn);
    FTEDIT_VISIT(w_down, ParamGroup::Ffn);
    FTEDIT_VISIT(b_down, ParamGroup::Ffn);
#undef FTEDIT_VISIT
  }
  f(info("lnf_gain", ParamGroup::FinalNorm, -1), first.params.lnf_gain, rest.params.lnf_gain...);
  f(info("lnf_bias", ParamGroup::FinalNorm, -1), first.params.lnf_bias, rest.params.lnf_bias...);
  f(info("unembed", ParamGroup::Unembedding, -1), first.params.unembed, rest.params.unembed...);
  for (std::size_t i = 0; i < first.adapters.adapters.size(); ++i) {
    const auto& ad = first.adapters.adapters[i];
    const std::string p = "adapter." + std::to_string(ad.layer) + "." + to_string(ad.target) + ".";
    const ParamGroup g = (ad.target == Proj::Up || ad.target == Proj::Down) ? ParamGroup::Ffn : ParamGroup::Attention;
    f(info(p + "a", g, ad.layer, true), first.adapters.adapters[i].a, rest.adapters.adapters[i].a...);
    f(info(p + "b", g, ad.layer, true), first.adapters.adapters[i].b, rest.adapters.adapters[i].b...);
  }
}

/// Which tensors an optimizer may change.
struct TrainabilityMask {
  std::array<bool, kNumParamGroups> groups{};
  std::optional<std::pair<int, int>> layer_range;  // inclusive; excludes non-block tensors when set
  bool base = true;
  bool adapters = false;

  static TrainabilityMask full() {
    TrainabilityMask m;
    m.groups.fill(true);
    return m;
  }
  static TrainabilityMask adapters_only() {
    TrainabilityMask m;
    m.groups.fill(true);
    m.base = false;
    m.adapters = true;
    return m;
  }
  static TrainabilityMask layers(int first, int last) {
    TrainabilityMask m = full();
    m.layer_range = std::make_pair(first, last);
    return m;
  }
  static TrainabilityMask frozen() {
    TrainabilityMask m;
    m.base = false;
    return m;
  }

  bool trainable(const TensorInfo& t) const {
    if (t.adapter ? !adapters : !base) return false;
    if (!groups[static_cast<std::size_t>(t.group)]) return false;
    if (layer_range) return t.layer >= layer_range->first && t.layer <= layer_range->second;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Construction

inline Model zeros_like(const Model& m) {
  Model z = m;
  visit_tensors([](const TensorInfo&, Mat& t) { t.setZero(); }, z);
  return z;
}

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {11}));
  auto normal = [&](int rows, int cols, double std) {
    std::normal_distribution<double> d(0.0, std);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
    return m;
  };
  const int d = cfg.d_model;
  const double proj_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
  Model model;
  model.config = cfg;
  auto& p = model.params;
  p.tok_emb = normal(cfg.vocab_size, d, 0.02);
  p.pos_emb = normal(cfg.max_seq_len, d, 0.01);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams lp;
    lp.ln1_gain = Mat::Ones(1, d);
    lp.ln1_bias = Mat::Zero(1, d);
    lp.wq = normal(d, d, 0.02);
    lp.wk = normal(d, d, 0.02);
    lp.wv = normal(d, d, 0.02);
    lp.wo = normal(d, d, proj_std);
    lp.ln2_gain = Mat::Ones(1, d);
    lp.ln2_bias = Mat::Zero(1, d);
    lp.w_up = normal(cfg.d_ff, d, 0.02);
    lp.b_up = Mat::Zero(1, cfg.d_ff);
    lp.w_down = normal(d, cfg.d_ff, proj_std);
    lp.b_down = Mat::Zero(1, d);
    p.layers.push_back(std::move(lp));
  }
  p.lnf_gain = Mat::Ones(1, d);
  p.lnf_bias = Mat::Zero(1, d);
  p.unembed = normal(cfg.vocab_size, d, 0.02);
  return model;
}

inline std::pair<int, int> proj_shape(const ModelConfig& cfg, Proj p) {
  switch (p) {
    case Proj::Up: return {cfg.d_ff, cfg.d_model};
    case Proj::Down: return {cfg.d_model, cfg.d_ff};
    default: return {cfg.d_model, cfg.d_model};
  }
}

struct AdapterOptions {
  int rank = 4;
  double scale = 2.0;
  double a_init_std = 0.02;
  std::optional<std::pair<int, int>> layer_range;  // inclusive; all layers when unset
};

/// Attaches fresh adapters on all six projections of the selected layers.
/// A is drawn small and random, B is zero, so the adapted model starts equal
/// to the base model.
inline void attach_adapters(Model& model, const AdapterOptions& opt, std::uint64_t seed) {
  if (opt.rank < 1) throw std::invalid_argument("attach_adapters: rank must be >= 1");
  Rng rng(derive_seed(seed, {12}));
  std::normal_distribution<double> d(0.0, opt.a_init_std);
  AdapterSet set;
  set.rank = opt.rank;
  set.scale = opt.scale;
  for (int l = 0; l < model.config.n_layers; ++l) {
    if (opt.layer_range && (l < opt.layer_range->first || l > opt.layer_range->second)) continue;
    for (int pi = 0; pi < kNumProj; ++pi) {
      const auto proj = static_cast<Proj>(pi);
      auto [rows, cols] = proj_shape(model.config, proj);
      LowRankAdapter ad;
      ad.layer = l;
      ad.target = proj;
      ad.a = Mat(rows, opt.rank);
      for (Eigen::Index i = 0; i < ad.a.size(); ++i) ad.a.data()[i] = d(rng);
      ad.b = Mat::Zero(opt.rank, cols);
      set.adapters.push_back(std::move(ad));
    }
  }
  model.adapters = std::move(set);
}

inline Mat& base_weight(Parameters& p, int layer, Proj proj) {
  auto& lp = p.layers.at(static_cast<std::size_t>(layer));
  switch (proj) {
    case Proj::Query: return lp.wq;
    case Proj::Key: return lp.wk;
    case Proj::Value: return lp.wv;
    case Proj::Output: return lp.wo;
    case Proj::Up: return lp.w_up;
    case Proj::Down: return lp.w_down;
  }
  throw std::logic_error("unreachable");
}

/// Folds adapters into the base weights and drops them.
inline Model merge_adapters(const Model& m) {
  Model out = m;
  for (const auto& ad : m.adapters.adapters)
    base_weight(out.params, ad.layer, ad.target).noalias() += m.adapters.scale * ad.a * ad.b;
  out.adapters = AdapterSet{};
  return out;
}

/// Rounds every parameter through 32-bit float, matching what a checkpoint
/// round trip produces.
inline void round_to_float(Model& m) {
  visit_tensors(
      [](const TensorInfo&, Mat& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<double>(static_cast<float>(t.data()[i]));
      },
      m);
}

inline std::uint64_t fingerprint(const Model& m, bool include_adapters = true) {
  std::uint64_t h = fnv1a(&m.config, sizeof(ModelConfig));
  visit_tensors(
      [&](const TensorInfo& info, const Mat& t) {
        if (info.adapter && !include_adapters) return;
        h = fnv1a(t.data(), static_cast<std::size_t>(t.size()) * sizeof(double), h);
      },
      m);
  return h;
}

inline bool all_finite(const Model& m) {
  bool ok = true;
  visit_tensors([&](const TensorInfo&, const Mat& t) { ok = ok && t.allFinite(); }, m);
  return ok;
}

/// dst += alpha * src over all tensors.
inline void axpy(Model& dst, double alpha, const Model& src) {
  visit_tensors([&](const TensorInfo&, Mat& d, const Mat& s) { d.noalias() += alpha * s; }, dst, src);
}

inline void scale_in_place(Model& m, double alpha) {
  visit_tensors([&](const TensorInfo&, Mat& t) { t *= alpha; }, m);
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline void layer_norm(const Mat& x, const Mat& gain, const Mat& bias, Mat& xhat, Eigen::VectorXd& rstd, Mat& y) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    rstd(i) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

// Accumulates into dx; writes parameter grads if non-null.
inline void layer_norm_backward(const Mat& dy, const Mat& xhat, const Eigen::VectorXd& rstd, const Mat& gain,
                                Mat& dx, Mat* dgain, Mat* dbias) {
  if (dgain) *dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (dbias) *dbias += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * gain.row(0).array();
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() * inv_d;
    const double m2 = dxhat.row(i).dot(xhat.row(i)) * inv_d;
    dx.row(i).array() += rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

inline Mat linear(const Mat& x, const Mat& w, const LowRankAdapter* ad, double scale) {
  Mat y = x * w.transpose();
  if (ad) y.noalias() += scale * ((x * ad->b.transpose()) * ad->a.transpose());
  return y;
}

// y = x W^T + s (x B^T) A^T. Accumulates dx; dW / dad may be null.
inline void linear_backward(const Mat& x, const Mat& dy, const Mat& w, const LowRankAdapter* ad, double scale,
                            Mat& dx, Mat* dw, LowRankAdapter* dad) {
  dx.noalias() += dy * w;
  if (dw) dw->noalias() += dy.transpose() * x;
  if (ad) {
    const Mat dy_a = dy * ad->a;  // N x r
    dx.noalias() += scale * (dy_a * ad->b);
    if (dad) {
      dad->a.noalias() += scale * (dy.transpose() * (x * ad->b.transpose()));
      dad->b.noalias() += scale * (dy_a.transpose() * x);
    }
  }
}

}  // namespace detail

struct LayerCache {
  Mat ln1_hat;
  Eigen::VectorXd ln1_rstd;
  Mat h1;
  Mat q, k, v;
  std::vector<Mat> probs;  // [seq * n_heads + head], T x T
  Mat att;
  Mat x_mid;
  Mat ln2_hat;
  Eigen::VectorXd ln2_rstd;
  Mat h2;
  Mat up;
  Mat act;
};

/// Everything a backward pass needs, plus the outputs callers read.
struct ForwardCache {
  std::vector<int> tokens;     // packed ids
  std::vector<int> positions;  // packed positions
  std::vector<int> offsets;    // size = n_seqs + 1
  std::vector<LayerCache> layers;
  Mat lnf_hat;
  Eigen::VectorXd lnf_rstd;
  Mat hidden;     // final normalized hidden states, N x d
  Mat log_probs;  // N x V, row t is the next-token distribution after position t

  int n_seqs() const { return static_cast<int>(offsets.size()) - 1; }
  int seq_len(int s) const { return offsets[static_cast<std::size_t>(s) + 1] - offsets[static_cast<std::size_t>(s)]; }
  auto seq_log_probs(int s) const {
    return log_probs.middleRows(offsets[static_cast<std::size_t>(s)], seq_len(s));
  }
};

/// Runs the model on a batch of input sequences (each already starting with
/// BOS if desired). Row t of a sequence's table conditions on ids <= t.
inline ForwardCache forward(const Model& model, const std::vector<TokenIds>& inputs) {
  const auto& cfg = model.config;
  const auto& p = model.params;
  const int d = cfg.d_model, nh = cfg.n_heads, hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const double s = model.adapters.scale;

  ForwardCache c;
  c.offsets.push_back(0);
  for (const auto& seq : inputs) {
    if (seq.empty()) throw std::invalid_argument("forward: empty sequence");
    if (static_cast<int>(seq.size()) > cfg.max_seq_len)
      throw std::length_error("forward: sequence length " + std::to_string(seq.size()) + " exceeds max_seq_len " +
                              std::to_string(cfg.max_seq_len));
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (seq[t] < 0 || seq[t] >= cfg.vocab_size) throw std::out_of_range("forward: token id out of range");
      c.tokens.push_back(seq[t]);
      c.positions.push_back(static_cast<int>(t));
    }
    c.offsets.push_back(static_cast<int>(c.tokens.size()));
  }
  const auto n = static_cast<Eigen::Index>(c.tokens.size());

  Mat x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    x.row(i) = p.tok_emb.row(c.tokens[static_cast<std::size_t>(i)]) + p.pos_emb.row(c.positions[static_cast<std::size_t>(i)]);

  c.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lp = p.layers[static_cast<std::size_t>(l)];
    auto& lc = c.layers[static_cast<std::size_t>(l)];
    auto ad = [&](Proj pr) { return model.adapters.find(l, pr); };
    detail::layer_norm(x, lp.ln1_gain, lp.ln1_bias, lc.ln1_hat, lc.ln1_rstd, lc.h1);
    lc.q = detail::linear(lc.h1, lp.wq, ad(Proj::Query), s);
    lc.k = detail::linear(lc.h1, lp.wk, ad(Proj::Key), s);
    lc.v = detail::linear(lc.h1, lp.wv, ad(Proj::Value), s);
    lc.att = Mat::Zero(n, d);
    lc.probs.resize(inputs.size() * static_cast<std::size_t>(nh));
    for (int sq = 0; sq < c.n_seqs(); ++sq) {
      const int o = c.offsets[static_cast<std::size_t>(sq)], T = c.seq_len(sq);
      for (int h = 0; h < nh; ++h) {
        Mat sc = lc.q.block(o, h * hd, T, hd) * lc.k.block(o, h * hd, T, hd).transpose() * inv_sqrt;
        for (int i = 0; i < T; ++i) {
          const double mx = sc.row(i).head(i + 1).maxCoeff();
          double z = 0.0;
          for (int j = 0; j <= i; ++j) {
            sc(i, j) = std::exp(sc(i, j) - mx);
            z += sc(i, j);
          }
          for (int j = 0; j <= i; ++j) sc(i, j) /= z;
          for (int j = i + 1; j < T; ++j) sc(i, j) = 0.0;
        }
        lc.att.block(o, h * hd, T, hd).noalias() = sc * lc.v.block(o, h * hd, T, hd);
        lc.probs[static_cast<std::size_t>(sq * nh + h)] = std::move(sc);
      }
    }
    lc.x_mid = x + detail::linear(lc.att, lp.wo, ad(Proj::Output), s);
    detail::layer_norm(lc.x_mid, lp.ln2_gain, lp.ln2_bias, lc.ln2_hat, lc.ln2_rstd, lc.h2);
    lc.up = detail::linear(lc.h2, lp.w_up, ad(Proj::Up), s);
    lc.up.rowwise() += lp.b_up.row(0);
    lc.act = lc.up.unaryExpr([](double u) { return detail::gelu(u); });
    x = lc.x_mid + detail::linear(lc.act, lp.w_down, ad(Proj::Down), s);
    x.rowwise() += lp.b_down.row(0);
  }
  detail::layer_norm(x, p.lnf_gain, p.lnf_bias, c.lnf_hat, c.lnf_rstd, c.hidden);
  Mat logits = c.hidden * p.unembed.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    logits.row(i).array() -= lse;
  }
  c.log_probs = std::move(logits);
  return c;
}

/// Back-propagates dL/d(log_probs) through the cached forward pass. Only
/// tensors the mask marks trainable receive gradient; the rest stay zero.
inline Model backward(const Model& model, const ForwardCache& c, const Mat& dlogp, const TrainabilityMask& mask) {
  if (dlogp.rows() != c.log_probs.rows() || dlogp.cols() != c.log_probs.cols())
    throw std::invalid_argument("backward: gradient shape does not match forward outputs");
  if (!dlogp.allFinite()) throw std::runtime_error("backward: non-finite loss gradient");
  const auto& cfg = model.config;
  const auto& p = model.params;
  const int d = cfg.d_model, nh = cfg.n_heads, hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const double s = model.adapters.scale;
  const auto n = dlogp.rows();

  Model g = zeros_like(model);
  auto want = [&](const char* name, ParamGroup group, int layer) {
    return mask.trainable(TensorInfo{name, group, layer, false});
  };
  auto want_adapter = [&](ParamGroup group, int layer) {
    return mask.trainable(TensorInfo{"", group, layer, true});
  };

  // d log_softmax: dz = dlogp - softmax * rowsum(dlogp)
  Mat dlogits = dlogp;
  {
    const Eigen::VectorXd rs = dlogp.rowwise().sum();
    for (Eigen::Index i = 0; i < n; ++i) dlogits.row(i).array() -= c.log_probs.row(i).array().exp() * rs(i);
  }
  if (want("unembed", ParamGroup::Unembedding, -1)) g.params.unembed.noalias() += dlogits.transpose() * c.hidden;
  const Mat dhidden = dlogits * p.unembed;
  Mat dx = Mat::Zero(n, d);
  {
    const bool w = want("lnf", ParamGroup::FinalNorm, -1);
    detail::layer_norm_backward(dhidden, c.lnf_hat, c.lnf_rstd, p.lnf_gain, dx, w ? &g.params.lnf_gain : nullptr,
                                w ? &g.params.lnf_bias : nullptr);
  }

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lp = p.layers[static_cast<std::size_t>(l)];
    auto& gl = g.params.layers[static_cast<std::size_t>(l)];
    const auto& lc = c.layers[static_cast<std::size_t>(l)];
    const bool w_attn = want("attn", ParamGroup::Attention, l);
    const bool w_ffn = want("ffn", ParamGroup::Ffn, l);
    const bool w_ln1 = want("ln1", ParamGroup::AttentionNorm, l);
    const bool w_ln2 = want("ln2", ParamGroup::FfnNorm, l);
    const bool wa_attn = want_adapter(ParamGroup::Attention, l);
    const bool wa_ffn = want_adapter(ParamGroup::Ffn, l);
    auto ad = [&](Proj pr) { return model.adapters.find(l, pr); };
    auto dad = [&](Proj pr, bool on) -> LowRankAdapter* { return on ? g.adapters.find(l, pr) : nullptr; };

    // Feed-forward sublayer: x_out = x_mid + gelu(h2 Wup^T + bup) Wdown^T + bdown
    if (w_ffn) gl.b_down += dx.colwise().sum();
    Mat dact = Mat::Zero(n, cfg.d_ff);
    detail::linear_backward(lc.act, dx, lp.w_down, ad(Proj::Down), s, dact, w_ffn ? &gl.w_down : nullptr,
                            dad(Proj::Down, wa_ffn));
    Mat dup = dact.array() * lc.up.unaryExpr([](double u) { return detail::gelu_grad(u); }).array();
    if (w_ffn) gl.b_up += dup.colwise().sum();
    Mat dh2 = Mat::Zero(n, d);
    detail::linear_backward(lc.h2, dup, lp.w_up, ad(Proj::Up), s, dh2, w_ffn ? &gl.w_up : nullptr,
                            dad(Proj::Up, wa_ffn));
    Mat dx_mid = dx;
    detail::layer_norm_backward(dh2, lc.ln2_hat, lc.ln2_rstd, lp.ln2_gain, dx_mid, w_ln2 ? &gl.ln2_gain : nullptr,
                                w_ln2 ? &gl.ln2_bias : nullptr);

    // Attention sublayer: x_mid = x_in + att Wo^T
    Mat datt = Mat::Zero(n, d);
    detail::linear_backward(lc.att, dx_mid, lp.wo, ad(Proj::Output), s, datt, w_attn ? &gl.wo : nullptr,
                            dad(Proj::Output, wa_attn));
    Mat dq = Mat::Zero(n, d), dk = Mat::Zero(n, d), dv = Mat::Zero(n, d);
    for (int sq = 0; sq < c.n_seqs(); ++sq) {
      const int o = c.offsets[static_cast<std::size_t>(sq)], T = c.seq_len(sq);
      for (int h = 0; h < nh; ++h) {
        const Mat& P = lc.probs[static_cast<std::size_t>(sq * nh + h)];
        const auto da = datt.block(o, h * hd, T, hd);
        const Mat dP = da * lc.v.block(o, h * hd, T, hd).transpose();
        dv.block(o, h * hd, T, hd).noalias() += P.transpose() * da;
        Mat dS = P.array() * (dP.colwise() - (P.array() * dP.array()).rowwise().sum().matrix()).array();
        dq.block(o, h * hd, T, hd).noalias() += inv_sqrt * (dS * lc.k.block(o, h * hd, T, hd));
        dk.block(o, h * hd, T, hd).noalias() += inv_sqrt * (dS.transpose() * lc.q.block(o, h * hd, T, hd));
      }
    }
    Mat dh1 = Mat::Zero(n, d);
    detail::linear_backward(lc.h1, dq, lp.wq, ad(Proj::Query), s, dh1, w_attn ? &gl.wq : nullptr,
                            dad(Proj::Query, wa_attn));
    detail::linear_backward(lc.h1, dk, lp.wk, ad(Proj::Key), s, dh1, w_attn ? &gl.wk : nullptr,
                            dad(Proj::Key, wa_attn));
    detail::linear_backward(lc.h1, dv, lp.wv, ad(Proj::Value), s, dh1, w_attn ? &gl.wv : nullptr,
                            dad(Proj::Value, wa_attn));
    dx = std::move(dx_mid);
    detail::layer_norm_backward(dh1, lc.ln1_hat, lc.ln1_rstd, lp.ln1_gain, dx, w_ln1 ? &gl.ln1_gain : nullptr,
                                w_ln1 ? &gl.ln1_bias : nullptr);
  }

  const bool w_emb = want("tok_emb", ParamGroup::Embedding, -1);
  const bool w_pos = want("pos_emb", ParamGroup::Positional, -1);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (w_emb) g.params.tok_emb.row(c.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    if (w_pos) g.params.pos_emb.row(c.positions[static_cast<std::size_t>(i)]) += dx.row(i);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Scoring

inline TokenIds with_bos(const TokenIds& ids) {
  TokenIds out;
  out.reserve(ids.size() + 1);
  out.push_back(Vocab::kBos);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

/// Per-position next-token log-probabilities for one input sequence.
inline Mat log_prob_table(const Model& model, const TokenIds& input) { return forward(model, {input}).log_probs; }

struct ScoreRequest {
  TokenIds prompt;
  TokenIds target;
};

/// Batched log p(target | BOS, prompt), chunked to bound memory.
inline std::vector<double> cond_log_probs(const Model& model, const std::vector<ScoreRequest>& reqs,
                                          std::size_t chunk = 64) {
  std::vector<double> out;
  out.reserve(reqs.size());
  for (std::size_t start = 0; start < reqs.size(); start += chunk) {
    const std::size_t end = std::min(reqs.size(), start + chunk);
    std::vector<TokenIds> inputs;
    for (std::size_t i = start; i < end; ++i) {
      if (reqs[i].target.empty()) throw std::invalid_argument("cond_log_prob: empty target");
      TokenIds in = with_bos(reqs[i].prompt);
      in.insert(in.end(), reqs[i].target.begin(), reqs[i].target.end() - 1);
      inputs.push_back(std::move(in));
    }
    const auto c = forward(model, inputs);
    for (std::size_t i = start; i < end; ++i) {
      const auto lp = c.seq_log_probs(static_cast<int>(i - start));
      const auto base = reqs[i].prompt.size();
      double sum = 0.0;
      for (std::size_t j = 0; j < reqs[i].target.size(); ++j)
        sum += lp(static_cast<Eigen::Index>(base + j), reqs[i].target[j]);
      out.push_back(sum);
    }
  }
  return out;
}

/// Σ_i log p(o_i | BOS, π, o_<i).
inline double cond_log_prob(const Model& model, const TokenIds& prompt, const TokenIds& target) {
  return cond_log_probs(model, {{prompt, target}}).front();
}

/// log p(x | BOS).
inline double full_log_prob(const Model& model, const TokenIds& x) {
  if (x.empty()) throw std::invalid_argument("full_log_prob: empty sequence");
  return cond_log_prob(model, {}, x);
}

struct SamplingOptions {
  double temperature = 1.0;
  int top_k = 0;        // 0: full vocabulary
  bool greedy = false;  // argmax decoding, ignores temperature
  bool allow_special = false;
};

namespace detail {

inline int pick_token(const Eigen::Ref<const Eigen::RowVectorXd>& logp, const SamplingOptions& opt, Rng& rng) {
  const int v = static_cast<int>(logp.size());
  std::vector<int> ids;
  for (int i = 0; i < v; ++i)
    if (opt.allow_special || !Vocab::is_special(i)) ids.push_back(i);
  if (ids.empty()) throw std::invalid_argument("generate: no samplable tokens");
  // Stable order: higher log-prob first, lower id on ties.
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return logp(a) > logp(b); });
  if (opt.greedy) return ids.front();
  if (opt.top_k > 0 && static_cast<int>(ids.size()) > opt.top_k) ids.resize(static_cast<std::size_t>(opt.top_k));
  std::vector<double> w(ids.size());
  const double top = logp(ids.front());
  double z = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    w[i] = std::exp((logp(ids[i]) - top) / opt.temperature);
    z += w[i];
  }
  std::uniform_real_distribution<double> u(0.0, z);
  double r = u(rng), acc = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    acc += w[i];
    if (r < acc) return ids[i];
  }
  return ids.back();
}

}  // namespace detail

/// Samples n_tokens continuation ids after BOS + prefix. Contexts longer than
/// max_seq_len keep BOS and the most recent tokens.
inline TokenIds generate(const Model& model, const TokenIds& prefix, int n_tokens, const SamplingOptions& opt,
                         std::uint64_t seed) {
  if (!opt.greedy && !(opt.temperature > 0.0)) throw std::invalid_argument("generate: temperature must be > 0");
  Rng rng(seed);
  TokenIds context = with_bos(prefix);
  TokenIds out;
  const auto limit = static_cast<std::size_t>(model.config.max_seq_len);
  for (int i = 0; i < n_tokens; ++i) {
    TokenIds window;
    if (context.size() <= limit) {
      window = context;
    } else {
      window.push_back(Vocab::kBos);
      window.insert(window.end(), context.end() - static_cast<std::ptrdiff_t>(limit - 1), context.end());
    }
    const Mat lp = log_prob_table(model, window);
    const int tok = detail::pick_token(lp.row(lp.rows() - 1), opt, rng);
    out.push_back(tok);
    context.push_back(tok);
  }
  return out;
}

inline TokenIds generate(const Model& model, const TokenIds& prefix, int n_tokens, double temperature,
                         std::uint64_t seed) {
  SamplingOptions opt;
  opt.temperature = temperature;
  return generate(model, prefix, n_tokens, opt, seed);
}

/// Greedy decode of exactly m tokens over the full vocabulary (ties go to
/// the lower id).
inline TokenIds argmax_completion(const Model& model, const TokenIds& prompt, int m) {
  if (m < 1) throw std::invalid_argument("argmax_completion: m must be >= 1");
  SamplingOptions opt;
  opt.greedy = true;
  opt.allow_special = true;
  return generate(model, prompt, m, opt, 0);
}

/// Mean final-layer hidden state over the prompt positions (BOS excluded).
inline Eigen::VectorXd mean_hidden_state(const Model& model, const TokenIds& prompt) {
  if (prompt.empty()) throw std::invalid_argument("mean_hidden_state: empty prompt");
  const auto c = forward(model, {with_bos(prompt)});
  return c.hidden.bottomRows(static_cast<Eigen::Index>(prompt.size())).colwise().mean().transpose();
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const Model& shape, AdamConfig cfg) : cfg_(cfg), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

  /// Applies one update to the trainable tensors; frozen tensors are not touched.
  void step(Model& model, const Model& grad, const TrainabilityMask& mask) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    visit_tensors(
        [&](const TensorInfo& info, Mat& w, const Mat& g, Mat& m, Mat& v) {
          if (!mask.trainable(info)) return;
          m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
          v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
          w.array() -= cfg_.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
        },
        model, grad, m_, v_);
  }

  long steps() const { return t_; }
  AdamConfig& config() { return cfg_; }

 private:
  AdamConfig cfg_;
  Model m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: text header, then little-endian float32 blocks in declared
// order. Adapters go to a sidecar file with the same layout.

namespace detail {

inline void write_floats(std::ostream& out, const Mat& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t.data()[i]));
    unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                          static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  }
}

inline void read_floats(std::istream& in, Mat& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated tensor data");
    const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                               (std::uint32_t(b[3]) << 24);
    t.data()[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
}

inline std::vector<std::pair<std::string, std::string>> read_header(std::istream& in, const std::string& magic) {
  std::string line;
  if (!std::getline(in, line) || line != magic) throw std::runtime_error("checkpoint: bad magic, expected '" + magic + "'");
  std::vector<std::pair<std::string, std::string>> kv;
  while (std::getline(in, line)) {
    if (line == "end") return kv;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed header line '" + line + "'");
    kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  throw std::runtime_error("checkpoint: header not terminated");
}

inline int header_int(const std::vector<std::pair<std::string, std::string>>& kv, const std::string& key) {
  for (const auto& [k, v] : kv)
    if (k == key) return std::stoi(v);
  throw std::runtime_error("checkpoint: missing header key '" + key + "'");
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "ftedit-checkpoint v1";
inline constexpr const char* kAdapterMagic = "ftedit-adapters v1";

inline void save_base(std::ostream& out, const Model& m) {
  const auto& c = m.config;
  int count = 0;
  visit_tensors([&](const TensorInfo& info, const Mat&) { count += info.adapter ? 0 : 1; }, m);
  out << kCheckpointMagic << '\n'
      << "n_layers=" << c.n_layers << '\n'
      << "d_model=" << c.d_model << '\n'
      << "n_heads=" << c.n_heads << '\n'
      << "d_ff=" << c.d_ff << '\n'
      << "max_seq_len=" << c.max_seq_len << '\n'
      << "vocab_size=" << c.vocab_size << '\n'
      << "tensors=" << count << '\n'
      << "end\n";
  visit_tensors(
      [&](const TensorInfo& info, const Mat& t) {
        if (!info.adapter) detail::write_floats(out, t);
      },
      m);
}

inline void save_adapters(std::ostream& out, const Model& m) {
  const auto& a = m.adapters;
  std::ostringstream scale;
  scale.precision(17);
  scale << a.scale;
  out << kAdapterMagic << '\n' << "rank=" << a.rank << '\n' << "scale=" << scale.str() << '\n'
      << "count=" << a.adapters.size() << '\n';
  for (const auto& ad : a.adapters) out << "adapter=" << ad.layer << ':' << to_string(ad.target) << '\n';
  out << "end\n";
  for (const auto& ad : a.adapters) {
    detail::write_floats(out, ad.a);
    detail::write_floats(out, ad.b);
  }
}

inline Model load_base(std::istream& in) {
  auto kv = detail::read_header(in, kCheckpointMagic);
  ModelConfig cfg;
  cfg.n_layers = detail::header_int(kv, "n_layers");
  cfg.d_model = detail::header_int(kv, "d_model");
  cfg.n_heads = detail::header_int(kv, "n_heads");
  cfg.d_ff = detail::header_int(kv, "d_ff");
  cfg.max_seq_len = detail::header_int(kv, "max_seq_len");
  cfg.vocab_size = detail::header_int(kv, "vocab_size");
  cfg.validate();
  Model m = init_model(cfg, 0);
  int count = 0;
  visit_tensors([&](const TensorInfo&, Mat& t) { detail::read_floats(in, t); ++count; }, m);
  if (count != detail::header_int(kv, "tensors")) throw std::runtime_error("checkpoint: tensor count mismatch");
  return m;
}

inline void load_adapters(std::istream& in, Model& m) {
  auto kv = detail::read_header(in, kAdapterMagic);
  AdapterSet set;
  set.rank = detail::header_int(kv, "rank");
  for (const auto& [k, v] : kv) {
    if (k == "scale") set.scale = std::stod(v);
    if (k != "adapter") continue;
    auto colon = v.find(':');
    LowRankAdapter ad;
    ad.layer = std::stoi(v.substr(0, colon));
    const std::string name = v.substr(colon + 1);
    bool found = false;
    for (int pi = 0; pi < kNumProj; ++pi) {
      if (name == to_string(static_cast<Proj>(pi))) {
        ad.target = static_cast<Proj>(pi);
        found = true;
      }
    }
    if (!found || ad.layer < 0 || ad.layer >= m.config.n_layers)
      throw std::runtime_error("adapters: bad adapter target '" + v + "'");
    auto [rows, cols] = proj_shape(m.config, ad.target);
    ad.a = Mat(rows, set.rank);
    ad.b = Mat(set.rank, cols);
    set.adapters.push_back(std::move(ad));
  }
  if (static_cast<int>(set.adapters.size()) != detail::header_int(kv, "count"))
    throw std::runtime_error("adapters: count mismatch");
  for (auto& ad : set.adapters) {
    detail::read_floats(in, ad.a);
    detail::read_floats(in, ad.b);
  }
  m.adapters = std::move(set);
}

inline std::string adapter_sidecar_path(const std::string& checkpoint_path) { return checkpoint_path + ".adapters"; }

inline void save_checkpoint(const std::string& path, const Model& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  save_base(out, m);
  if (m.adapters.empty()) {
    std::filesystem::remove(adapter_sidecar_path(path));
  } else {
    std::ofstream side(adapter_sidecar_path(path), std::ios::binary);
    if (!side) throw std::runtime_error("cannot write adapter sidecar for " + path);
    save_adapters(side, m);
  }
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  Model m = load_base(in);
  std::ifstream side(adapter_sidecar_path(path), std::ios::binary);
  if (side) load_adapters(side, m);
  return m;
}

}  // namespace ftedit
