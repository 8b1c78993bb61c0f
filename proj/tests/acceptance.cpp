// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Usage: acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ftedit/runner.hpp"

using namespace ftedit;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

void report(int id, const char* title, const Verdict& v, int& failures) {
  std::printf("%s  %d. %s: %s\n", v.pass ? "PASS" : "FAIL", id, title, v.detail.c_str());
  std::fflush(stdout);
  if (!v.pass) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ModelConfig toy_config(int vocab) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.max_seq_len = 12;
  c.vocab_size = vocab;
  return c;
}

Model jittered(const ModelConfig& cfg, std::uint64_t seed) {
  Model m = init_model(cfg, seed);
  Rng rng(seed + 1000);
  std::normal_distribution<double> d(0.0, 0.4);
  visit_tensors(
      [&](const TensorInfo&, Mat& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += d(rng);
      },
      m);
  return m;
}

TrainItem item(TokenIds t, int mask_start, Source s = Source::E) {
  TrainItem it;
  it.tokens = std::move(t);
  it.mask_start = mask_start;
  it.source = s;
  return it;
}

double tensor_value(const Model& m, const std::string& name, Eigen::Index idx) {
  double v = 0;
  visit_tensors(
      [&](const TensorInfo& info, const Mat& t) {
        if (info.name == name) v = t.data()[idx];
      },
      m);
  return v;
}

Model nudged(const Model& m, const std::string& name, Eigen::Index idx, double delta) {
  Model x = m;
  visit_tensors(
      [&](const TensorInfo& info, Mat& t) {
        if (info.name == name) t.data()[idx] += delta;
      },
      x);
  return x;
}

template <typename LossFn>
double max_fd_error(const Model& m, const Model& grad, LossFn loss, int n_coords, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::pair<std::string, Eigen::Index>> coords;
  visit_tensors(
      [&](const TensorInfo& info, const Mat& t) {
        for (int k = 0; k < 2; ++k)
          coords.emplace_back(info.name, std::uniform_int_distribution<Eigen::Index>(0, t.size() - 1)(rng));
      },
      m);
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(static_cast<std::size_t>(n_coords));
  const double h = 1e-4;
  double worst = 0.0;
  for (const auto& [name, idx] : coords) {
    const double analytic = tensor_value(grad, name, idx);
    const double numeric = (loss(nudged(m, name, idx, h)) - loss(nudged(m, name, idx, -h))) / (2 * h);
    worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6}));
  }
  return worst;
}

// ---------------------------------------------------------------------------

Verdict criterion_metric_oracle() {
  const double a = edit_score(98.8, 93.6, 72.0), b = edit_score(96.7, 89.7, 26.6);
  return {std::abs(a - 86.5) <= 0.05 && std::abs(b - 50.8) <= 0.05, fmt("%.3f (want 86.5), %.3f (want 50.8)", a, b)};
}

Verdict criterion_gradients() {
  const auto cfg = toy_config(9);
  const auto full = TrainabilityMask::full();
  const Model m = jittered(cfg, 1), ref = jittered(cfg, 2);
  const std::vector<TrainItem> batch = {item({3, 4, 5, 6, 7}, 3), item({8, 3, 4}, 1, Source::P),
                                        item({5, 5, 6, 7}, 0, Source::W)};
  const std::vector<TrainItem> bg = {item({6, 7, 8, 6, 4}, 0, Source::W)};
  const std::vector<DpoPair> pairs = {{{3, 4}, {5, 6}, {7}, 0.5}, {{8}, {3}, {4, 5}, 1.0}};
  auto mix = [&](const Model& x) { return mixed_loss(masked_nll(x, batch, full), naive_nll(x, bg, full), MixConfig{0.1}); };

  const double e1 = max_fd_error(m, naive_nll(m, batch, full).grad,
                                 [&](const Model& x) { return naive_nll(x, batch, full).loss; }, 30, 11);
  const double e2 = max_fd_error(m, masked_nll(m, batch, full).grad,
                                 [&](const Model& x) { return masked_nll(x, batch, full).loss; }, 30, 12);
  const double e3 = max_fd_error(m, dpo_loss(m, ref, pairs, full).grad,
                                 [&](const Model& x) { return dpo_loss(x, ref, pairs, full).loss; }, 30, 13);
  const double e4 = max_fd_error(m, mix(m).grad, [&](const Model& x) { return mix(x).loss; }, 30, 14);
  const double worst = std::max({e1, e2, e3, e4});
  std::ostringstream d;
  d << "max relative error naive " << e1 << ", masked " << e2 << ", dpo " << e3 << ", mixed " << e4
    << " over 30 coordinates each";
  return {worst < 1e-3, d.str()};
}

Verdict criterion_masking() {
  const auto cfg = toy_config(9);
  const auto full = TrainabilityMask::full();
  const Model m = jittered(cfg, 3);
  Rng rng(4);
  std::uniform_int_distribution<int> len(2, cfg.max_seq_len), tok(0, cfg.vocab_size - 1);
  double worst_equal = 0.0;
  for (int i = 0; i < 100; ++i) {
    TokenIds t(static_cast<std::size_t>(len(rng)));
    for (auto& x : t) x = tok(rng);
    const std::vector<TrainItem> one = {item(t, 0)};
    worst_equal = std::max(worst_equal, std::abs(masked_nll(m, one, full).loss - naive_nll(m, one, full).loss));
  }
  // With attention output zeroed, positional row t only affects the
  // prediction at position t; rows before mask_start are masked out.
  Model z = m;
  for (auto& lp : z.params.layers) {
    lp.wv.setZero();
    lp.wo.setZero();
  }
  const std::vector<TrainItem> batch = {item({3, 4, 5, 6, 7}, 3)};
  const auto g = masked_nll(z, batch, full).grad;
  double worst_fd = 0.0, worst_grad = 0.0;
  for (int row = 0; row < 3; ++row) {
    for (int col = 0; col < cfg.d_model; ++col) {
      const auto idx = static_cast<Eigen::Index>(row * cfg.d_model + col);
      const double fd = (masked_nll(nudged(z, "pos_emb", idx, 1e-4), batch, full).loss -
                         masked_nll(nudged(z, "pos_emb", idx, -1e-4), batch, full).loss) / 2e-4;
      worst_fd = std::max(worst_fd, std::abs(fd));
      worst_grad = std::max(worst_grad, std::abs(g.params.pos_emb(row, col)));
    }
  }
  return {worst_equal <= 1e-9 && worst_grad == 0.0 && worst_fd < 1e-8,
          fmt("|masked - naive| max %.2e over 100 items; prompt-only gradient max %.2e, finite difference max %.2e",
              worst_equal, worst_grad, worst_fd)};
}

Verdict criterion_dpo() {
  const auto cfg = toy_config(9);
  const Model m = jittered(cfg, 5);
  const std::vector<DpoPair> pairs = {{{3, 4}, {5}, {6}, 0.1}, {{7}, {8, 3}, {4, 4}, 0.1}};
  const double same = dpo_loss(m, m, pairs, TrainabilityMask::full()).loss;
  const double hand = dpo_pair_loss(std::log(3.0), 0.0, 0.0, 0.0, 1.0);
  return {std::abs(same - std::log(2.0)) <= 1e-6 && std::abs(hand - std::log(4.0 / 3.0)) <= 1e-6,
          fmt("theta=ref %.9f (ln 2 = %.9f), margin ln 3 %.9f", same, std::log(2.0), hand) +
              fmt(" (ln 4/3 = %.9f)", std::log(4.0 / 3.0))};
}

Verdict criterion_filter() {
  WorldConfig wc;
  wc.seed = 21;
  wc.n_entities = 120;
  wc.facts_per_relation = 100;
  auto corpus = gen_world(wc);
  EditSetConfig ec;
  ec.seed = 22;
  auto es = make_edit_set(corpus, 100, EditMode::CounterfactLike, ec);
  attach_edit_set(corpus, es.edits, EditMode::CounterfactLike);
  const auto vocab = build_vocab(corpus);
  ModelConfig mc;
  mc.n_layers = 1;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.max_seq_len = 48;
  mc.vocab_size = static_cast<int>(vocab.size());
  const Model model = init_model(mc, 23);

  std::set<Triple> eval;
  for (const auto& e : corpus.edit_set) {
    eval.insert({e.subject, e.relation, e.object_new});
    eval.insert({e.subject, e.relation, e.object_pre});
    for (const auto& n : e.neighborhood_triples) eval.insert(n);
    for (const auto& u : e.unrelated_facts) eval.insert(u.triple());
  }
  AugmentConfig cfg;
  std::size_t random_items = 0, similar_items = 0, overlap = 0;
  for (const auto& group : sample_random_facts(corpus, vocab, cfg))
    for (const auto& it : group) {
      ++random_items;
      overlap += eval.contains(it.origin);
    }
  const auto index = build_embedding_index(corpus, vocab, Embedder::HiddenState, &model);
  for (const auto& e : corpus.edit_set)
    for (const auto& it : similar_facts(index, corpus, vocab, e, cfg, eval)) {
      ++similar_items;
      overlap += eval.contains(it.origin);
    }

  // Brute-force cosine top-5 on a 50-fact corpus.
  auto small = gen_world(31, 30, 5, 10);
  const auto sv = build_vocab(small);
  mc.vocab_size = static_cast<int>(sv.size());
  const Model sm = init_model(mc, 32);
  std::size_t mismatches = 0, queries = 0;
  for (auto kind : {Embedder::HiddenState, Embedder::BagOfWords}) {
    const auto idx = build_embedding_index(small, sv, kind, &sm);
    for (std::size_t q = 0; q < small.train_facts.size(); ++q) {
      const auto qv = idx.embed(sv.encode(small.train_facts[q].prompt));
      std::vector<std::pair<double, std::size_t>> brute;
      for (std::size_t i = 0; i < small.train_facts.size(); ++i) {
        const auto v = idx.embed(sv.encode(small.train_facts[i].prompt));
        brute.emplace_back(v.dot(qv) / (v.norm() * qv.norm()), i);
      }
      std::stable_sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      const auto hits = idx.nearest(qv, 5);
      ++queries;
      for (std::size_t r = 0; r < 5; ++r)
        if (std::abs(hits[r].second - brute[r].first) > 1e-9) ++mismatches;
    }
  }
  std::ostringstream d;
  d << random_items << " random + " << similar_items << " similar items, " << overlap
    << " overlapping evaluation triples; top-5 similarity mismatches " << mismatches << " over " << queries
    << " queries on a " << small.train_facts.size() << "-fact corpus";
  return {overlap == 0 && random_items == 2000 && mismatches == 0 && small.train_facts.size() == 50, d.str()};
}

Verdict criterion_adapter_identity() {
  WorldConfig wc;
  wc.seed = 41;
  auto corpus = gen_world(wc);
  EditSetConfig ec;
  ec.seed = 42;
  auto es = make_edit_set(corpus, 10, EditMode::CounterfactLike, ec);
  attach_edit_set(corpus, es.edits, EditMode::CounterfactLike);
  const auto vocab = build_vocab(corpus);
  ModelConfig mc;
  mc.vocab_size = static_cast<int>(vocab.size());
  const Model base = jittered(mc, 43);
  Model adapted = base;
  attach_adapters(adapted, AdapterOptions{}, 44);
  EvalOptions opt;
  opt.generation.gen_len = 20;
  auto dump = [&](const Model& m) {
    const auto r = evaluate(m, corpus, vocab, opt, "x");
    std::ostringstream o;
    write_report_csv(o, r);
    write_per_item(o, r);
    return o.str();
  };
  const bool same_metrics = dump(base) == dump(adapted);

  EditorConfig ecfg;
  ecfg.apply_variant("FT+Mask+Para+Rand");
  ecfg.epochs = 2;
  const auto out = mass_edit(base, corpus, vocab, ecfg);
  const bool base_unchanged = fingerprint(out.model, false) == fingerprint(base);
  const bool adapters_moved = fingerprint(out.model) != fingerprint(base);
  return {same_metrics && base_unchanged && adapters_moved,
          std::string("zero-B adapted report ") + (same_metrics ? "identical" : "DIFFERS") +
              "; base weights after low-rank edit " + (base_unchanged ? "bitwise unchanged" : "CHANGED")};
}

// ---------------------------------------------------------------------------

const std::vector<std::string> kLadder = {"FT", "FT+Mask", "FT+Mask+Para", "FT+Mask+Para+Rand"};
const std::string kBackground = "FT+Mask+Para+Rand+BG";

struct SeedRun {
  std::map<std::string, EvalReport> reports;
  fs::path best_dir;
};

SeedRun run_seed(const fs::path& root, int seed) {
  ExperimentConfig cfg;
  cfg.set("run.seed", std::to_string(seed));
  cfg.out_dir = (root / ("seed" + std::to_string(seed))).string();
  fs::remove_all(cfg.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  step_gen_corpus(cfg);
  const auto pre = step_pretrain(cfg);
  if (!pre.reached_target)
    throw std::runtime_error("seed " + std::to_string(seed) + ": pretraining stopped at fact accuracy " +
                             std::to_string(pre.accuracy));
  SeedRun run;
  std::vector<fs::path> dirs;
  auto variants = kLadder;
  variants.push_back(kBackground);
  for (const auto& v : variants) {
    ExperimentConfig row = cfg;
    row.set("editor.variant", v);
    const auto res = step_edit(row);
    if (res.diverged) throw std::runtime_error("seed " + std::to_string(seed) + " " + v + ": " + res.diagnostic);
    run.reports[v] = res.report;
    dirs.push_back(res.dir);
    if (v == "FT+Mask+Para+Rand") run.best_dir = res.dir;
  }
  const auto rows = read_ladder(dirs);
  std::ostringstream table;
  write_ladder_text(table, rows);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("seed %d (pretrain %d epochs, fact accuracy %.1f%%, %.0f s)\n%s", seed, pre.epochs, 100 * pre.accuracy,
              secs, table.str().c_str());
  for (const auto& v : {std::string("FT+Mask+Para+Rand"), kBackground})
    std::printf("  %-22s fluency %.4f  consistency %.1f\n", v.c_str(), run.reports[v].fluency.mean,
                run.reports[v].consistency.mean);
  std::fflush(stdout);
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "ftedit_acceptance";
  fs::create_directories(root);
  int failures = 0;

  auto guarded = [&](int id, const char* title, auto fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    report(id, title, v, failures);
  };

  guarded(1, "Metric oracle", criterion_metric_oracle);
  guarded(2, "Gradient suite", criterion_gradients);
  guarded(3, "Masking contract", criterion_masking);
  guarded(4, "DPO oracle", criterion_dpo);
  guarded(5, "Augmentation filter soundness", criterion_filter);
  guarded(6, "Adapter identity", criterion_adapter_identity);

  std::vector<SeedRun> runs;
  std::string ladder_error;
  try {
    for (int seed = 1; seed <= 5; ++seed) runs.push_back(run_seed(root, seed));
  } catch (const std::exception& e) {
    ladder_error = e.what();
  }

  guarded(7, "Directional ablation ladder", [&]() -> Verdict {
    if (!ladder_error.empty()) return {false, ladder_error};
    int loc = 0, gen = 0, best = 0;
    for (const auto& r : runs) {
      const auto& rep = r.reports;
      loc += rep.at("FT+Mask+Para+Rand").locality.mean > rep.at("FT+Mask+Para").locality.mean;
      gen += rep.at("FT+Mask+Para").generalization.mean > rep.at("FT+Mask").generalization.mean;
      bool top = true;
      for (const auto& v : kLadder)
        if (v != "FT+Mask+Para+Rand") top = top && rep.at("FT+Mask+Para+Rand").edit_score > rep.at(v).edit_score;
      best += top;
    }
    std::ostringstream d;
    d << "(a) Rand locality > Para in " << loc << "/5, (b) Para generalization > Mask in " << gen
      << "/5, (c) Rand best edit score in " << best << "/5";
    return {loc >= 4 && gen >= 4 && best >= 4, d.str()};
  });

  guarded(8, "Background-loss tradeoff", [&]() -> Verdict {
    if (!ladder_error.empty()) return {false, ladder_error};
    int fluent = 0, close = 0;
    std::ostringstream d;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto& bg = runs[i].reports.at(kBackground);
      const auto& plain = runs[i].reports.at("FT+Mask+Para+Rand");
      fluent += bg.fluency.mean >= plain.fluency.mean;
      close += std::abs(bg.edit_score - plain.edit_score) <= 5.0;
      d << (i ? "; " : "") << "seed " << i + 1 << " " << fmt("%.3f vs %.3f, score %+.1f", bg.fluency.mean,
                                                          plain.fluency.mean, bg.edit_score - plain.edit_score);
    }
    const std::string head = "fluency >= no-background in " + std::to_string(fluent) + "/5, score within 5 in " +
                             std::to_string(close) + "/5 (";
    return {fluent >= 4 && close >= 4, head + d.str() + ")"};
  });

  guarded(9, "Determinism", [&]() -> Verdict {
    if (!ladder_error.empty()) return {false, ladder_error};
    ExperimentConfig cfg;
    cfg.set("run.seed", "1");
    cfg.set("editor.variant", "FT+Mask+Para+Rand");
    cfg.out_dir = (root / "seed1_repeat").string();
    fs::remove_all(cfg.out_dir);
    step_gen_corpus(cfg);
    step_pretrain(cfg);
    const auto res = step_edit(cfg);
    const bool csv = slurp(res.dir / "report.csv") == slurp(runs[0].best_dir / "report.csv");
    const bool items = slurp(res.dir / "per_item.jsonl") == slurp(runs[0].best_dir / "per_item.jsonl");
    return {csv && items, std::string("report.csv ") + (csv ? "identical" : "DIFFERS") + ", per_item.jsonl " +
                              (items ? "identical" : "DIFFERS")};
  });

  std::printf("%s: %d of 9 criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
