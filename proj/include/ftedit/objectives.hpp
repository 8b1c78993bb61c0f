#pragma once

// Training losses: full-sequence likelihood, prompt-masked conditional
// likelihood, the DPO preference term and the background-LM mixture. Every
// loss returns its value together with the gradient for the trainable
// tensors.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftedit/factworld.hpp"
#include "ftedit/tinylm.hpp"

namespace ftedit {

/// Where a training item came from: requested edit, pseudo-paraphrase,
/// locality fact, or background text.
enum class Source { E, P, R, W };

inline const char* to_string(Source s) {
  static constexpr const char* names[] = {"E", "P", "R", "W"};
  return names[static_cast<int>(s)];
}

inline Source parse_source(const std::string& s) {
  if (s == "E") return Source::E;
  if (s == "P") return Source::P;
  if (s == "R") return Source::R;
  if (s == "W") return Source::W;
  throw std::invalid_argument("unknown item source: " + s);
}

struct TrainItem {
  TokenIds tokens;     // prompt ++ target, without BOS
  int mask_start = 0;  // index of the first scored token
  Source source = Source::E;
  Triple origin{};     // source fact for R items, -1 fields otherwise
};

struct DpoPair {
  TokenIds prompt;
  TokenIds preferred;
  TokenIds dispreferred;
  double beta = 0.1;
};

struct MixConfig {
  double gamma = 0.1;
};

struct LossResult {
  double loss = 0.0;
  Model grad;
};

namespace detail {

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::runtime_error(std::string(what) + ": non-finite loss (" + std::to_string(v) + ")");
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline LossResult token_nll(const Model& model, std::span<const TrainItem> batch, const TrainabilityMask& mask,
                            bool honor_mask, const char* what) {
  if (batch.empty()) throw std::invalid_argument(std::string(what) + ": empty batch");
  std::vector<TokenIds> inputs;
  inputs.reserve(batch.size());
  for (const auto& item : batch) {
    const int len = static_cast<int>(item.tokens.size());
    const int start = honor_mask ? item.mask_start : 0;
    if (start < 0 || start >= len)
      throw std::invalid_argument(std::string(what) + ": item has an empty scored span (mask_start=" +
                                  std::to_string(item.mask_start) + ", length=" + std::to_string(len) + ")");
    inputs.push_back(with_bos(TokenIds(item.tokens.begin(), item.tokens.end() - 1)));
  }
  const auto cache = forward(model, inputs);
  Mat dlogp = Mat::Zero(cache.log_probs.rows(), cache.log_probs.cols());
  const double per_item = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& item = batch[b];
    const int start = honor_mask ? item.mask_start : 0;
    const int len = static_cast<int>(item.tokens.size());
    const double w = per_item / static_cast<double>(len - start);
    const int row0 = cache.offsets[b];
    for (int j = start; j < len; ++j) {
      const int tok = item.tokens[static_cast<std::size_t>(j)];
      loss -= w * cache.log_probs(row0 + j, tok);
      dlogp(row0 + j, tok) -= w;
    }
  }
  require_finite(loss, what);
  return {loss, backward(model, cache, dlogp, mask)};
}

}  // namespace detail

/// Mean over items of the per-token-averaged −log p(x): every token is
/// scored regardless of mask_start.
inline LossResult naive_nll(const Model& model, std::span<const TrainItem> batch, const TrainabilityMask& mask) {
  return detail::token_nll(model, batch, mask, false, "naive_nll");
}

/// Like naive_nll but only positions >= mask_start are scored, i.e. the
/// conditional likelihood of the target given the prompt.
inline LossResult masked_nll(const Model& model, std::span<const TrainItem> batch, const TrainabilityMask& mask) {
  return detail::token_nll(model, batch, mask, true, "masked_nll");
}

/// −log σ(β·[(policy_w − ref_w) − (policy_l − ref_l)]) for one pair of
/// conditional log-probabilities.
inline double dpo_pair_loss(double policy_preferred, double ref_preferred, double policy_dispreferred,
                            double ref_dispreferred, double beta) {
  const double margin = (policy_preferred - ref_preferred) - (policy_dispreferred - ref_dispreferred);
  return detail::softplus(-beta * margin);
}

/// DPO loss averaged over the batch; `reference` is held fixed.
inline LossResult dpo_loss(const Model& model, const Model& reference, std::span<const DpoPair> batch,
                           const TrainabilityMask& mask) {
  if (batch.empty()) throw std::invalid_argument("dpo_loss: empty batch");
  std::vector<TokenIds> inputs;
  std::vector<ScoreRequest> ref_requests;
  for (const auto& pair : batch) {
    if (!(pair.beta > 0.0)) throw std::invalid_argument("dpo_loss: beta must be > 0");
    if (pair.preferred.empty() || pair.dispreferred.empty()) throw std::invalid_argument("dpo_loss: empty response");
    if (pair.preferred == pair.dispreferred) throw std::invalid_argument("dpo_loss: preferred equals dispreferred");
    for (const TokenIds* resp : {&pair.preferred, &pair.dispreferred}) {
      TokenIds in = with_bos(pair.prompt);
      in.insert(in.end(), resp->begin(), resp->end() - 1);
      inputs.push_back(std::move(in));
      ref_requests.push_back({pair.prompt, *resp});
    }
  }
  const auto ref = cond_log_probs(reference, ref_requests);
  const auto cache = forward(model, inputs);
  Mat dlogp = Mat::Zero(cache.log_probs.rows(), cache.log_probs.cols());
  const double per_pair = 1.0 / static_cast<double>(batch.size());

  auto seq_sum = [&](std::size_t seq, const TokenIds& prompt, const TokenIds& resp) {
    double s = 0.0;
    const int row0 = cache.offsets[seq] + static_cast<int>(prompt.size());
    for (std::size_t j = 0; j < resp.size(); ++j) s += cache.log_probs(row0 + static_cast<int>(j), resp[j]);
    return s;
  };
  auto seq_grad = [&](std::size_t seq, const TokenIds& prompt, const TokenIds& resp, double g) {
    const int row0 = cache.offsets[seq] + static_cast<int>(prompt.size());
    for (std::size_t j = 0; j < resp.size(); ++j) dlogp(row0 + static_cast<int>(j), resp[j]) += g;
  };

  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& pair = batch[b];
    const double pw = seq_sum(2 * b, pair.prompt, pair.preferred);
    const double pl = seq_sum(2 * b + 1, pair.prompt, pair.dispreferred);
    const double margin = (pw - ref[2 * b]) - (pl - ref[2 * b + 1]);
    loss += per_pair * detail::softplus(-pair.beta * margin);
    // d/dmargin softplus(-β m) = −β σ(−β m)
    const double dm = -pair.beta * detail::sigmoid(-pair.beta * margin) * per_pair;
    seq_grad(2 * b, pair.prompt, pair.preferred, dm);
    seq_grad(2 * b + 1, pair.prompt, pair.dispreferred, -dm);
  }
  detail::require_finite(loss, "dpo_loss");
  return {loss, backward(model, cache, dlogp, mask)};
}

/// (1 − γ)·l1 + γ·l2, applied to values and gradients alike.
inline LossResult mixed_loss(const LossResult& l1, const LossResult& l2, const MixConfig& cfg) {
  if (cfg.gamma < 0.0 || cfg.gamma > 1.0) throw std::invalid_argument("mixed_loss: gamma must be in [0, 1]");
  LossResult out{(1.0 - cfg.gamma) * l1.loss + cfg.gamma * l2.loss, l1.grad};
  scale_in_place(out.grad, 1.0 - cfg.gamma);
  axpy(out.grad, cfg.gamma, l2.grad);
  return out;
}

inline double mixed_loss(double l1, double l2, const MixConfig& cfg) {
  if (cfg.gamma < 0.0 || cfg.gamma > 1.0) throw std::invalid_argument("mixed_loss: gamma must be in [0, 1]");
  return (1.0 - cfg.gamma) * l1 + cfg.gamma * l2;
}

}  // namespace ftedit
