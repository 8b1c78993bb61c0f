#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "ftedit/tinylm.hpp"

using namespace ftedit;

namespace {

ModelConfig tiny_config(int vocab = 9) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq_len = 10;
  c.vocab_size = vocab;
  return c;
}

// Random init is close to uniform; jitter every tensor so distributions are
// far from flat and gradients are not vanishingly small.
Model jittered(const ModelConfig& cfg, std::uint64_t seed, double std = 0.4) {
  Model m = init_model(cfg, seed);
  Rng rng(seed * 7 + 1);
  std::normal_distribution<double> d(0.0, std);
  visit_tensors(
      [&](const TensorInfo&, Mat& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += d(rng);
      },
      m);
  return m;
}

void randomize_adapters(Model& m, std::uint64_t seed, double std) {
  Rng rng(seed);
  std::normal_distribution<double> d(0.0, std);
  for (auto& ad : m.adapters.adapters)
    for (Eigen::Index i = 0; i < ad.b.size(); ++i) ad.b.data()[i] = d(rng);
}

TokenIds random_ids(Rng& rng, int len, int vocab) {
  std::uniform_int_distribution<int> d(0, vocab - 1);
  TokenIds ids(static_cast<std::size_t>(len));
  for (auto& t : ids) t = d(rng);
  return ids;
}

// Model whose final hidden state is a constant, so every position predicts
// `token` with probability 1 - O(V e^-50).
Model one_hot_model(const ModelConfig& cfg, int token) {
  Model m = init_model(cfg, 1);
  m.params.lnf_gain.setZero();
  m.params.lnf_bias.setZero();
  m.params.lnf_bias(0, 0) = 1.0;
  m.params.unembed.setZero();
  m.params.unembed(token, 0) = 50.0;
  return m;
}

Model uniform_model(const ModelConfig& cfg) {
  Model m = init_model(cfg, 1);
  m.params.unembed.setZero();
  return m;
}

double next_log_prob(const Model& m, const TokenIds& context_with_bos, int token) {
  const Mat lp = log_prob_table(m, context_with_bos);
  return lp(lp.rows() - 1, token);
}

}  // namespace

TEST(Forward, RowsAreNormalized) {
  const auto cfg = tiny_config();
  Rng rng(1);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Model m = jittered(cfg, s);
    const auto c = forward(m, {random_ids(rng, 10, cfg.vocab_size), random_ids(rng, 3, cfg.vocab_size)});
    for (Eigen::Index r = 0; r < c.log_probs.rows(); ++r)
      EXPECT_NEAR(c.log_probs.row(r).array().exp().sum(), 1.0, 1e-6);
  }
}

TEST(Forward, CausalPrefixesUnaffectedByLaterTokens) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 3);
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto ids = random_ids(rng, cfg.max_seq_len, cfg.vocab_size);
    const int t = std::uniform_int_distribution<int>(0, cfg.max_seq_len - 2)(rng);
    const Mat before = log_prob_table(m, ids);
    ids[static_cast<std::size_t>(t) + 1] = (ids[static_cast<std::size_t>(t) + 1] + 1) % cfg.vocab_size;
    const Mat after = log_prob_table(m, ids);
    EXPECT_EQ(before.topRows(t + 1), after.topRows(t + 1));
    EXPECT_NE(before.row(t + 1), after.row(t + 1));
  }
}

TEST(Forward, BatchingMatchesSingleSequences) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 4);
  Rng rng(3);
  const auto a = random_ids(rng, 7, cfg.vocab_size), b = random_ids(rng, 4, cfg.vocab_size);
  const auto c = forward(m, {a, b});
  EXPECT_LT((c.seq_log_probs(0) - log_prob_table(m, a)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((c.seq_log_probs(1) - log_prob_table(m, b)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, RejectsBadInputs) {
  const auto cfg = tiny_config();
  const Model m = init_model(cfg, 1);
  EXPECT_THROW(forward(m, {TokenIds(11, 3)}), std::length_error);
  EXPECT_THROW(forward(m, {TokenIds{}}), std::invalid_argument);
  EXPECT_THROW(forward(m, {TokenIds{cfg.vocab_size}}), std::out_of_range);
}

TEST(Adapters, ZeroBGivesBaseOutputsExactly) {
  const auto cfg = tiny_config();
  const Model base = jittered(cfg, 5);
  Model adapted = base;
  attach_adapters(adapted, AdapterOptions{}, 9);
  ASSERT_EQ(adapted.adapters.adapters.size(), 12u);
  Rng rng(4);
  const auto ids = random_ids(rng, 9, cfg.vocab_size);
  EXPECT_EQ(log_prob_table(base, ids), log_prob_table(adapted, ids));
  EXPECT_EQ(cond_log_prob(base, {3, 4}, {5, 6}), cond_log_prob(adapted, {3, 4}, {5, 6}));
}

TEST(Adapters, LayerRangeRestrictsPlacement) {
  Model m = init_model(tiny_config(), 1);
  AdapterOptions opt;
  opt.layer_range = std::make_pair(1, 1);
  attach_adapters(m, opt, 2);
  ASSERT_EQ(m.adapters.adapters.size(), 6u);
  for (const auto& ad : m.adapters.adapters) EXPECT_EQ(ad.layer, 1);
}

TEST(Adapters, MergeChangesLogitsByLessThanTolerance) {
  const auto cfg = tiny_config();
  Model m = jittered(cfg, 6);
  attach_adapters(m, AdapterOptions{}, 3);
  randomize_adapters(m, 8, 0.3);
  const Model merged = merge_adapters(m);
  EXPECT_TRUE(merged.adapters.empty());
  Rng rng(5);
  const auto ids = random_ids(rng, 10, cfg.vocab_size);
  const Mat a = log_prob_table(m, ids), b = log_prob_table(merged, ids);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5);
  // The adapters actually matter, so the check above is not vacuous.
  Model stripped = m;
  stripped.adapters = AdapterSet{};
  EXPECT_GT((a - log_prob_table(stripped, ids)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Backward, ConstantLossGivesZeroGradient) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 7);
  const auto c = forward(m, {TokenIds{1, 4, 5, 6}});
  const Model g = backward(m, c, Mat::Zero(c.log_probs.rows(), c.log_probs.cols()), TrainabilityMask::full());
  visit_tensors([](const TensorInfo& info, const Mat& t) { EXPECT_EQ(t.cwiseAbs().maxCoeff(), 0.0) << info.name; }, g);
}

TEST(Backward, RejectsNonFiniteGradient) {
  const Model m = init_model(tiny_config(), 1);
  const auto c = forward(m, {TokenIds{1, 4}});
  Mat d = Mat::Zero(c.log_probs.rows(), c.log_probs.cols());
  d(0, 0) = std::nan("");
  EXPECT_THROW(backward(m, c, d, TrainabilityMask::full()), std::runtime_error);
}

class FiniteDifference : public ::testing::TestWithParam<bool> {};

TEST_P(FiniteDifference, ThirtyRandomCoordinatesAgree) {
  const bool with_adapters = GetParam();
  const auto cfg = tiny_config();
  Model m = jittered(cfg, 10);
  TrainabilityMask mask = TrainabilityMask::full();
  if (with_adapters) {
    attach_adapters(m, AdapterOptions{}, 4);
    randomize_adapters(m, 5, 0.3);
    mask = TrainabilityMask::adapters_only();
  }
  Rng rng(11);
  const std::vector<TokenIds> inputs = {random_ids(rng, 8, cfg.vocab_size), random_ids(rng, 5, cfg.vocab_size)};
  // Loss = <W, log_probs> for a fixed random W.
  const auto c0 = forward(m, inputs);
  Mat w(c0.log_probs.rows(), c0.log_probs.cols());
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = nd(rng);
  auto loss = [&](const Model& x) { return (forward(x, inputs).log_probs.cwiseProduct(w)).sum(); };
  const Model g = backward(m, c0, w, mask);

  struct Coord {
    std::string name;
    Eigen::Index index;
  };
  std::vector<Coord> candidates;
  visit_tensors(
      [&](const TensorInfo& info, const Mat& t) {
        if (!mask.trainable(info)) return;
        for (int k = 0; k < 3; ++k)
          candidates.push_back({info.name, std::uniform_int_distribution<Eigen::Index>(0, t.size() - 1)(rng)});
      },
      m);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(30);

  const double h = 1e-4;
  double worst = 0.0;
  for (const auto& coord : candidates) {
    double analytic = 0.0;
    visit_tensors(
        [&](const TensorInfo& info, const Mat& t) {
          if (info.name == coord.name) analytic = t.data()[coord.index];
        },
        g);
    auto shifted = [&](double delta) {
      Model x = m;
      visit_tensors(
          [&](const TensorInfo& info, Mat& t) {
            if (info.name == coord.name) t.data()[coord.index] += delta;
          },
          x);
      return loss(x);
    };
    const double numeric = (shifted(h) - shifted(-h)) / (2 * h);
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    worst = std::max(worst, rel);
    EXPECT_LT(rel, 1e-3) << coord.name << "[" << coord.index << "] analytic " << analytic << " numeric " << numeric;
  }
  RecordProperty("max_relative_error", std::to_string(worst));
}

INSTANTIATE_TEST_SUITE_P(BaseAndAdapters, FiniteDifference, ::testing::Values(false, true));

TEST(Trainability, FrozenTensorsBitwiseUnchangedAfterAdamStep) {
  const auto cfg = tiny_config();
  Rng rng(12);
  const std::vector<TokenIds> inputs = {random_ids(rng, 9, cfg.vocab_size)};
  for (const auto& [label, mask, adapters] :
       std::vector<std::tuple<std::string, TrainabilityMask, bool>>{{"adapters", TrainabilityMask::adapters_only(), true},
                                                                   {"layer1", TrainabilityMask::layers(1, 1), false},
                                                                   {"frozen", TrainabilityMask::frozen(), false}}) {
    Model m = jittered(cfg, 13);
    if (adapters) attach_adapters(m, AdapterOptions{}, 1);
    const Model before = m;
    const auto c = forward(m, inputs);
    Mat w = Mat::Constant(c.log_probs.rows(), c.log_probs.cols(), -1.0);
    const Model g = backward(m, c, w, mask);
    Adam opt(m, AdamConfig{});
    opt.step(m, g, mask);
    int changed = 0;
    visit_tensors(
        [&](const TensorInfo& info, const Mat& now, const Mat& was, const Mat& grad) {
          if (mask.trainable(info)) {
            changed += (now != was) ? 1 : 0;
          } else {
            EXPECT_EQ(grad.cwiseAbs().maxCoeff(), 0.0) << label << " " << info.name;
            EXPECT_EQ(std::memcmp(now.data(), was.data(), static_cast<std::size_t>(now.size()) * sizeof(double)), 0)
                << label << " " << info.name;
          }
        },
        m, before, g);
    if (label != "frozen") {
      EXPECT_GT(changed, 0) << label;
    }
  }
}

TEST(Scoring, UniformModelClosedForm) {
  const auto cfg = tiny_config(7);
  const Model m = uniform_model(cfg);
  const double lv = std::log(1.0 / 7.0);
  EXPECT_NEAR(cond_log_prob(m, {3, 4}, {5, 6, 3}), 3 * lv, 1e-12);
  EXPECT_NEAR(full_log_prob(m, {3, 4, 5, 6}), 4 * lv, 1e-12);
}

TEST(Scoring, OneHotModelScoresItsOwnContinuationAtZero) {
  const auto cfg = tiny_config();
  const Model m = one_hot_model(cfg, 5);
  const auto cont = argmax_completion(m, {3, 4}, 3);
  EXPECT_EQ(cont, (TokenIds{5, 5, 5}));
  EXPECT_NEAR(cond_log_prob(m, {3, 4}, cont), 0.0, 1e-12);
}

TEST(Scoring, ThreeTokenChainRuleFromLogitTable) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 14);
  const TokenIds prompt{4}, target{6, 7};
  // Softmax each row of raw logits by hand, then multiply.
  const auto c = forward(m, {TokenIds{Vocab::kBos, 4, 6}});
  const Mat logits = c.hidden * m.params.unembed.transpose();
  auto prob = [&](int row, int tok) {
    const auto r = logits.row(row);
    return std::exp(r(tok)) / r.array().exp().sum();
  };
  const double expected = std::log(prob(1, 6) * prob(2, 7));
  EXPECT_NEAR(cond_log_prob(m, prompt, target), expected, 1e-9);
}

TEST(Scoring, ChainRuleIdentity) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 15);
  const TokenIds prompt{3, 8, 4}, target{5, 6};
  TokenIds all = prompt;
  all.insert(all.end(), target.begin(), target.end());
  EXPECT_NEAR(full_log_prob(m, all), full_log_prob(m, prompt) + cond_log_prob(m, prompt, target), 1e-9);
}

TEST(Scoring, ExhaustiveProbabilityTree) {
  const auto cfg = tiny_config(5);
  const Model m = jittered(cfg, 16);
  double total = 0.0;
  for (int a = 0; a < 5; ++a) {
    for (int b = 0; b < 5; ++b) {
      // Walk the tree one conditional at a time with separate forward passes.
      const double tree = next_log_prob(m, {Vocab::kBos}, a) + next_log_prob(m, {Vocab::kBos, a}, b);
      EXPECT_NEAR(full_log_prob(m, {a, b}), tree, 1e-9);
      total += std::exp(tree);
    }
  }
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(Scoring, BatchedMatchesSingle) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 17);
  std::vector<ScoreRequest> reqs = {{{3}, {4, 5}}, {{6, 7, 8}, {3}}, {{}, {4}}};
  const auto batched = cond_log_probs(m, reqs, 2);
  for (std::size_t i = 0; i < reqs.size(); ++i)
    EXPECT_NEAR(batched[i], cond_log_prob(m, reqs[i].prompt, reqs[i].target), 1e-12);
  EXPECT_THROW(cond_log_prob(m, {3}, {}), std::invalid_argument);
}

TEST(Generate, DeterministicAndLength) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 18);
  const auto a = generate(m, {3, 4}, 25, 1.0, 99);
  EXPECT_EQ(a.size(), 25u);
  EXPECT_EQ(a, generate(m, {3, 4}, 25, 1.0, 99));
  EXPECT_NE(a, generate(m, {3, 4}, 25, 1.0, 100));
  for (int t : a) EXPECT_FALSE(Vocab::is_special(t));
  EXPECT_THROW(generate(m, {3}, 2, 0.0, 1), std::invalid_argument);
}

TEST(Generate, GreedyFlagGivesArgmaxContinuation) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 19);
  SamplingOptions opt;
  opt.greedy = true;
  opt.allow_special = true;
  const auto g = generate(m, {3}, 3, opt, 1);
  TokenIds ctx{Vocab::kBos, 3};
  for (int t : g) {
    const Mat lp = log_prob_table(m, ctx);
    Eigen::Index best;
    lp.row(lp.rows() - 1).maxCoeff(&best);
    EXPECT_EQ(t, static_cast<int>(best));
    ctx.push_back(t);
  }
}

TEST(Generate, EmpiricalFrequenciesMatchModelWithinThreeSigma) {
  const auto cfg = tiny_config(8);
  const Model m = jittered(cfg, 20, 0.6);
  const TokenIds prefix{4, 5};
  const Mat lp = log_prob_table(m, with_bos(prefix));
  const auto row = lp.row(lp.rows() - 1);
  // Sampling excludes special ids, so the exact distribution is the model's
  // renormalized over ordinary tokens.
  double z = 0.0;
  for (int t = Vocab::kNumSpecial; t < cfg.vocab_size; ++t) z += std::exp(row(t));
  const int n = 10000;
  std::map<int, int> counts;
  for (int i = 0; i < n; ++i) ++counts[generate(m, prefix, 1, 1.0, static_cast<std::uint64_t>(i)).front()];
  for (int t = 0; t < cfg.vocab_size; ++t) {
    if (Vocab::is_special(t)) {
      EXPECT_EQ(counts[t], 0);
      continue;
    }
    const double p = std::exp(row(t)) / z;
    const double sigma = std::sqrt(n * p * (1 - p));
    EXPECT_LE(std::abs(counts[t] - n * p), 3 * sigma) << "token " << t << " p=" << p;
  }
}

TEST(Argmax, SingleTokenIsMostProbable) {
  const auto cfg = tiny_config();
  const Model m = jittered(cfg, 21);
  const Mat lp = log_prob_table(m, {Vocab::kBos, 6});
  Eigen::Index best;
  lp.row(1).maxCoeff(&best);
  EXPECT_EQ(argmax_completion(m, {6}, 1), (TokenIds{static_cast<int>(best)}));
  EXPECT_THROW(argmax_completion(m, {6}, 0), std::invalid_argument);
}

TEST(Argmax, TwoTokensMatchGreedyEnumerationOverAllPairs) {
  const auto cfg = tiny_config(6);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Model m = jittered(cfg, 30 + s, 0.7);
    const TokenIds prompt{3, 4};
    // Enumerate V^2; the greedy answer is the pair whose first token is the
    // best first step and whose second is the best follow-up to it.
    TokenIds expected;
    double best_first = -INFINITY;
    for (int a = 0; a < cfg.vocab_size; ++a) {
      double best_second = -INFINITY;
      int arg_second = -1;
      for (int b = 0; b < cfg.vocab_size; ++b) {
        const double pb = next_log_prob(m, {Vocab::kBos, 3, 4, a}, b);
        if (pb > best_second) best_second = pb, arg_second = b;
      }
      const double pa = next_log_prob(m, {Vocab::kBos, 3, 4}, a);
      if (pa > best_first) best_first = pa, expected = {a, arg_second};
    }
    EXPECT_EQ(argmax_completion(m, prompt, 2), expected);
  }
}

TEST(Checkpoint, RoundTripMatchesFloatRounding) {
  const auto cfg = tiny_config();
  Model m = jittered(cfg, 22);
  attach_adapters(m, AdapterOptions{}, 2);
  randomize_adapters(m, 3, 0.1);
  const auto dir = std::filesystem::temp_directory_path() / "ftedit_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  save_checkpoint(path, m);
  const Model back = load_checkpoint(path);
  Model rounded = m;
  round_to_float(rounded);
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.adapters.adapters.size(), m.adapters.adapters.size());
  EXPECT_EQ(fingerprint(back), fingerprint(rounded));

  // Saving without adapters removes a stale sidecar.
  save_checkpoint(path, merge_adapters(m));
  EXPECT_FALSE(std::filesystem::exists(adapter_sidecar_path(path)));
  EXPECT_TRUE(load_checkpoint(path).adapters.empty());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  std::istringstream bad_magic("not a checkpoint\n");
  EXPECT_THROW(load_base(bad_magic), std::runtime_error);
  std::ostringstream out;
  save_base(out, init_model(tiny_config(), 1));
  const std::string full = out.str();
  std::istringstream truncated(full.substr(0, full.size() - 10));
  EXPECT_THROW(load_base(truncated), std::runtime_error);
}
