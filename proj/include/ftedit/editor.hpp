#pragma once

// Editing by fine-tuning: builds the E/P/R/W training sets dictated by the
// variant flags and optimizes the masked likelihood (plus optional DPO and
// background terms) in mass-edit or single-edit mode.

#include <chrono>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftedit/augment.hpp"
#include "ftedit/evalsuite.hpp"
#include "ftedit/factworld.hpp"
#include "ftedit/objectives.hpp"
#include "ftedit/tinylm.hpp"
#include "ftedit/tokenizer.hpp"

namespace ftedit {

enum class AdapterMode { LowRank, Full, LayerRange };

inline const char* to_string(AdapterMode m) {
  switch (m) {
    case AdapterMode::LowRank: return "lowrank";
    case AdapterMode::Full: return "full";
    case AdapterMode::LayerRange: return "layers";
  }
  return "?";
}

inline AdapterMode parse_adapter_mode(const std::string& s) {
  if (s == "lowrank" || s == "low-rank") return AdapterMode::LowRank;
  if (s == "full") return AdapterMode::Full;
  if (s == "layers" || s == "layer-range") return AdapterMode::LayerRange;
  throw std::invalid_argument("unknown adapter mode: " + s);
}

struct EditorConfig {
  bool mask = true;
  bool para = false;
  bool rand = false;
  bool sim = false;
  bool dpo = false;
  bool background_loss = false;
  bool single = false;

  AdapterMode adapter_mode = AdapterMode::LowRank;
  std::optional<std::pair<int, int>> layer_range;  // LayerRange mode, or adapter placement in LowRank mode
  AdapterOptions adapter;

  int epochs = 10;
  int batch_size = 32;
  double lr = 5e-3;
  double gamma = 0.1;
  double lambda_dpo = 1.0;
  double dpo_beta = 0.1;
  double early_stop_loss = 0.01;
  std::uint64_t seed = 1;
  Embedder sim_embedder = Embedder::HiddenState;
  AugmentConfig augment;

  void validate() const {
    if (rand && sim) throw std::invalid_argument("EditorConfig: rand and sim are mutually exclusive");
    if (sim && !single) throw std::invalid_argument("EditorConfig: sim requires single-edit mode");
    if (epochs < 0) throw std::invalid_argument("EditorConfig: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("EditorConfig: batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("EditorConfig: lr must be > 0");
    if (gamma < 0.0 || gamma > 1.0) throw std::invalid_argument("EditorConfig: gamma must be in [0, 1]");
    if (dpo && !(dpo_beta > 0.0)) throw std::invalid_argument("EditorConfig: dpo_beta must be > 0");
    if (adapter_mode == AdapterMode::LayerRange && !layer_range)
      throw std::invalid_argument("EditorConfig: layer-range mode needs layer_range");
    augment.validate();
  }

  /// Row label in the style "FT+Mask+Para+Rand".
  std::string variant_name() const {
    std::string s = "FT";
    if (mask) s += "+Mask";
    if (para) s += "+Para";
    if (rand) s += "+Rand";
    if (sim) s += "+Sim";
    if (dpo) s += "+DPO";
    if (background_loss) s += "+BG";
    return s;
  }

  /// Sets the variant flags from a label such as "FT+Mask+Para+Rand".
  void apply_variant(const std::string& label) {
    const auto parts = split_words([&] {
      std::string t = label;
      std::replace(t.begin(), t.end(), '+', ' ');
      return t;
    }());
    if (parts.empty() || parts[0] != "FT") throw std::invalid_argument("variant must start with FT: " + label);
    mask = para = rand = sim = dpo = background_loss = false;
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const auto& p = parts[i];
      if (p == "Mask") mask = true;
      else if (p == "Para") para = true;
      else if (p == "Rand") rand = true;
      else if (p == "Sim") sim = true;
      else if (p == "DPO") dpo = true;
      else if (p == "BG") background_loss = true;
      else throw std::invalid_argument("unknown variant flag '" + p + "' in " + label);
    }
  }

  /// Directory-safe name embedding the flags, the adapter mode and the seed.
  std::string run_name() const {
    std::string s = variant_name();
    for (auto& c : s) c = c == '+' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    s += std::string("_") + to_string(adapter_mode);
    if (single) s += "_single";
    return s + "_seed" + std::to_string(seed);
  }

  TrainabilityMask trainability() const {
    switch (adapter_mode) {
      case AdapterMode::LowRank: return TrainabilityMask::adapters_only();
      case AdapterMode::Full: return TrainabilityMask::full();
      case AdapterMode::LayerRange: return TrainabilityMask::layers(layer_range->first, layer_range->second);
    }
    return TrainabilityMask::full();
  }
};

struct SetCounts {
  std::size_t e = 0, p = 0, r = 0, w = 0;
  bool operator==(const SetCounts&) const = default;
};

/// E ∪ P ∪ R items; dpo_pairs[i] is set for E and P items when preference
/// pairs apply. W items are kept apart for the background loss.
struct TrainingSet {
  std::vector<TrainItem> items;
  std::vector<std::optional<DpoPair>> dpo_pairs;
  std::vector<TrainItem> background;
  SetCounts counts;
};

struct TrainLogRow {
  int step = 0;
  int epoch = 0;
  double total = 0.0;
  double edit_loss = 0.0;
  double dpo_loss = 0.0;
  double background_loss = 0.0;
};

struct EditOutcome {
  Model model;
  std::vector<TrainLogRow> log;
  SetCounts counts;
  bool diverged = false;
  std::string diagnostic;
  int epochs_run = 0;
  double seconds = 0.0;
};

namespace detail {

inline TrainItem apply_mask_flag(TrainItem item, bool mask) {
  if (!mask) item.mask_start = 0;
  return item;
}

}  // namespace detail

/// Builds the training items for the given edits (indices into
/// corpus.edit_set). `index` is required when cfg.sim is set.
inline TrainingSet build_training_set(const Model& base, const CorpusSplit& corpus, const Vocab& vocab,
                                      const EditorConfig& cfg, const std::vector<std::size_t>& edit_indices,
                                      const EmbeddingIndex* index = nullptr) {
  cfg.validate();
  if (cfg.dpo && corpus.mode != EditMode::CounterfactLike)
    throw std::invalid_argument("build_training_set: DPO needs pre-edit targets (counterfact-like mode)");
  if (cfg.sim && !index) throw std::invalid_argument("build_training_set: sim needs an embedding index");
  if (cfg.background_loss && corpus.background_text.empty())
    throw std::invalid_argument("build_training_set: background loss needs a background corpus");

  TrainingSet ts;
  auto add = [&](TrainItem item, const EditRequest* pref) {
    std::optional<DpoPair> pair;
    if (cfg.dpo && pref) {
      const TokenIds prompt(item.tokens.begin(), item.tokens.begin() + item.mask_start);
      pair = DpoPair{prompt, vocab.encode(pref->target_new), vocab.encode(pref->target_pre), cfg.dpo_beta};
    }
    ts.items.push_back(detail::apply_mask_flag(std::move(item), cfg.mask));
    ts.dpo_pairs.push_back(std::move(pair));
  };

  const auto eval = evaluation_triples(corpus);
  const auto candidates = cfg.rand ? detail::filtered_fact_indices(corpus, eval) : std::vector<std::size_t>{};
  for (std::size_t ei : edit_indices) {
    const auto& e = corpus.edit_set.at(ei);
    add(make_item(vocab.encode(e.prompt), vocab.encode(e.target_new), Source::E), &e);
    ++ts.counts.e;
    if (cfg.para) {
      for (auto& p : gen_paraphrases(base, e, vocab, cfg.augment, ei)) {
        add(std::move(p), &e);
        ++ts.counts.p;
      }
    }
    std::vector<TrainItem> locality;
    if (cfg.rand) locality = sample_random_facts_for_edit(corpus, vocab, candidates, cfg.augment, ei);
    if (cfg.sim) locality = similar_facts(*index, corpus, vocab, e, cfg.augment, eval);
    for (auto& r : locality) {
      add(std::move(r), nullptr);
      ++ts.counts.r;
    }
  }
  if (cfg.background_loss) {
    for (const auto& passage : corpus.background_text) {
      TrainItem w;
      w.tokens = vocab.encode(passage);
      w.tokens.push_back(Vocab::kEos);
      w.source = Source::W;
      ts.background.push_back(std::move(w));
    }
    ts.counts.w = ts.background.size();
  }
  return ts;
}

/// Optimizes the configured loss over a prepared training set, starting
/// from `base`. On a non-finite loss the model from the last finite step is
/// returned with `diverged` set.
inline EditOutcome train_edit(const Model& base, const TrainingSet& ts, const EditorConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  EditOutcome out;
  out.counts = ts.counts;
  out.model = base;
  if (cfg.adapter_mode == AdapterMode::LowRank) {
    auto opt = cfg.adapter;
    if (cfg.layer_range) opt.layer_range = cfg.layer_range;
    attach_adapters(out.model, opt, derive_seed(cfg.seed, {41}));
  }
  const auto mask = cfg.trainability();
  Adam adam(out.model, AdamConfig{cfg.lr});
  Rng rng(derive_seed(cfg.seed, {42}));
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  std::vector<std::size_t> w_order(ts.background.size());
  std::iota(w_order.begin(), w_order.end(), std::size_t{0});
  detail::shuffle_in_place(w_order, rng);
  std::size_t w_cursor = 0;

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs && !ts.items.empty(); ++epoch) {
    std::vector<std::size_t> order(ts.items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::shuffle_in_place(order, rng);
    double epoch_edit_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
      const std::size_t b1 = std::min(order.size(), b0 + bs);
      std::vector<TrainItem> batch;
      std::vector<DpoPair> pairs;
      for (std::size_t k = b0; k < b1; ++k) {
        batch.push_back(ts.items[order[k]]);
        if (ts.dpo_pairs[order[k]]) pairs.push_back(*ts.dpo_pairs[order[k]]);
      }
      TrainLogRow row;
      row.step = step;
      row.epoch = epoch;
      try {
        LossResult total = masked_nll(out.model, batch, mask);
        row.edit_loss = total.loss;
        if (cfg.dpo && !pairs.empty()) {
          auto d = dpo_loss(out.model, base, pairs, mask);
          row.dpo_loss = d.loss;
          total.loss += cfg.lambda_dpo * d.loss;
          axpy(total.grad, cfg.lambda_dpo, d.grad);
        }
        if (cfg.background_loss) {
          std::vector<TrainItem> wb;
          for (std::size_t k = 0; k < bs; ++k) {
            if (w_cursor == w_order.size()) {
              w_cursor = 0;
              detail::shuffle_in_place(w_order, rng);
            }
            wb.push_back(ts.background[w_order[w_cursor++]]);
          }
          auto l2 = naive_nll(out.model, wb, mask);
          row.background_loss = l2.loss;
          total = mixed_loss(total, l2, MixConfig{cfg.gamma});
        }
        row.total = total.loss;
        if (!std::isfinite(total.loss) || !all_finite(total.grad))
          throw std::runtime_error("non-finite loss or gradient at step " + std::to_string(step));
        Model next = out.model;
        adam.step(next, total.grad, mask);
        if (!all_finite(next)) throw std::runtime_error("non-finite parameters after step " + std::to_string(step));
        out.model = std::move(next);
      } catch (const std::runtime_error& err) {
        out.diverged = true;
        out.diagnostic = err.what();
        out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return out;
      }
      out.log.push_back(row);
      epoch_edit_loss += row.edit_loss;
      ++n_batches;
      ++step;
    }
    out.epochs_run = epoch + 1;
    if (n_batches > 0 && epoch_edit_loss / static_cast<double>(n_batches) < cfg.early_stop_loss) break;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// One fine-tuning run over all edits in the corpus.
inline EditOutcome mass_edit(const Model& base, const CorpusSplit& corpus, const Vocab& vocab,
                             const EditorConfig& cfg) {
  if (cfg.single) throw std::invalid_argument("mass_edit: config is in single-edit mode");
  std::vector<std::size_t> all(corpus.edit_set.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return train_edit(base, build_training_set(base, corpus, vocab, cfg, all), cfg);
}

/// One fine-tuning run for a single edit, always starting from `base`.
inline EditOutcome single_edit(const Model& base, const CorpusSplit& corpus, const Vocab& vocab,
                               std::size_t edit_index, const EditorConfig& cfg,
                               const EmbeddingIndex* index = nullptr) {
  auto per_edit = cfg;
  per_edit.seed = derive_seed(cfg.seed, {43, edit_index});
  return train_edit(base, build_training_set(base, corpus, vocab, cfg, {edit_index}, index), per_edit);
}

struct SingleEditRun {
  EvalReport report;
  std::vector<double> seconds;          // wall clock per edit
  std::vector<std::uint64_t> base_hash; // base fingerprint before each edit
  std::vector<SetCounts> counts;
  std::vector<std::string> diagnostics;
};

/// Edits and evaluates every edit on its own, then aggregates over edits.
inline SingleEditRun run_single_edits(const Model& base, const CorpusSplit& corpus, const Vocab& vocab,
                                      const EditorConfig& cfg, const EvalOptions& eval_opt) {
  if (!cfg.single) throw std::invalid_argument("run_single_edits: config is not in single-edit mode");
  std::optional<EmbeddingIndex> index;
  if (cfg.sim) index = build_embedding_index(corpus, vocab, cfg.sim_embedder, &base);
  SingleEditRun run;
  std::vector<EvalReport> parts;
  for (std::size_t i = 0; i < corpus.edit_set.size(); ++i) {
    run.base_hash.push_back(fingerprint(base));
    auto outcome = single_edit(base, corpus, vocab, i, cfg, index ? &*index : nullptr);
    run.seconds.push_back(outcome.seconds);
    run.counts.push_back(outcome.counts);
    run.diagnostics.push_back(outcome.diagnostic);
    auto opt = eval_opt;
    opt.generation.seed = derive_seed(eval_opt.generation.seed, {44, i});
    parts.push_back(evaluate(outcome.model, corpus, {corpus.edit_set[i]}, vocab, opt));
  }
  run.report = merge_single_reports(parts, cfg.variant_name());
  return run;
}

inline void write_train_log(std::ostream& out, const std::vector<TrainLogRow>& log) {
  using detail::fmt;
  out << "step,epoch,total,edit_loss,dpo_loss,background_loss\n";
  for (const auto& r : log)
    out << r.step << ',' << r.epoch << ',' << fmt(r.total, 8) << ',' << fmt(r.edit_loss, 8) << ','
        << fmt(r.dpo_loss, 8) << ',' << fmt(r.background_loss, 8) << '\n';
}

}  // namespace ftedit
