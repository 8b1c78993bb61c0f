#pragma once

// Experiment plumbing: the flat key=value configuration, base-model
// pretraining, the gen-corpus / pretrain / edit / eval / report / ablate
// pipeline steps and the run-directory layout.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftedit/augment.hpp"
#include "ftedit/editor.hpp"
#include "ftedit/evalsuite.hpp"
#include "ftedit/factworld.hpp"
#include "ftedit/objectives.hpp"
#include "ftedit/tinylm.hpp"
#include "ftedit/tokenizer.hpp"

namespace ftedit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  int max_epochs = 150;
  int min_epochs = 30;
  int batch_size = 32;
  double lr = 3e-3;
  double target_accuracy = 0.95;
  int check_every = 5;
  double context_prob = 0.5;  // chance of a background sentence before / after a fact
  std::uint64_t seed = 1;

  void validate() const {
    if (max_epochs < 1 || min_epochs < 0 || min_epochs > max_epochs)
      throw std::invalid_argument("PretrainConfig: need 0 <= min_epochs <= max_epochs, max_epochs >= 1");
    if (batch_size < 1 || check_every < 1) throw std::invalid_argument("PretrainConfig: bad batch_size/check_every");
    if (!(lr > 0.0)) throw std::invalid_argument("PretrainConfig: lr must be > 0");
    if (context_prob < 0.0 || context_prob > 1.0) throw std::invalid_argument("PretrainConfig: context_prob in [0,1]");
  }
};

struct PretrainOutcome {
  Model model;
  int epochs = 0;
  double accuracy = 0.0;
  bool reached_target = false;
  std::vector<std::pair<int, double>> log;  // (epoch, mean loss)
};

/// Splits passages into sentences that end with a period.
inline std::vector<Words> background_sentences(const CorpusSplit& corpus) {
  std::vector<Words> out;
  for (const auto& passage : corpus.background_text) {
    Words cur;
    for (const auto& w : passage) {
      cur.push_back(w);
      if (w == kPeriod) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
  }
  return out;
}

/// One epoch of pretraining sequences: every training fact under every
/// template, sometimes surrounded by background sentences, plus every
/// background passage. All end with EOS.
inline std::vector<TrainItem> pretraining_items(const CorpusSplit& corpus, const Vocab& vocab,
                                                const PretrainConfig& cfg, int epoch) {
  Rng rng(derive_seed(cfg.seed, {51, static_cast<std::uint64_t>(epoch)}));
  const auto sentences = background_sentences(corpus);
  std::bernoulli_distribution coin(cfg.context_prob);
  std::uniform_int_distribution<std::size_t> pick(0, sentences.empty() ? 0 : sentences.size() - 1);
  std::vector<TrainItem> items;
  for (const auto& f : corpus.train_facts) {
    const auto& rel = corpus.relation(f.relation);
    for (std::size_t t = 0; t < rel.templates.size(); ++t) {
      Words text;
      if (!sentences.empty() && coin(rng)) text = sentences[pick(rng)];
      auto body = concat(rel.render(t, corpus.entity(f.subject).surface), f.target);
      body.push_back(kPeriod);
      text = concat(text, body);
      if (!sentences.empty() && coin(rng)) text = concat(text, sentences[pick(rng)]);
      TrainItem item;
      item.tokens = vocab.encode(text);
      item.tokens.push_back(Vocab::kEos);
      item.source = Source::R;
      item.origin = f.triple();
      items.push_back(std::move(item));
    }
  }
  for (const auto& passage : corpus.background_text) {
    TrainItem item;
    item.tokens = vocab.encode(passage);
    item.tokens.push_back(Vocab::kEos);
    item.source = Source::W;
    items.push_back(std::move(item));
  }
  return items;
}

/// Greedy exact-match accuracy on the training facts (training render).
inline double fact_accuracy(const Model& model, const CorpusSplit& corpus, const Vocab& vocab) {
  if (corpus.train_facts.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& f : corpus.train_facts) {
    const auto want = vocab.encode(f.target);
    if (argmax_completion(model, vocab.encode(f.prompt), static_cast<int>(want.size())) == want) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(corpus.train_facts.size());
}

/// Next-token training until the model reproduces at least
/// target_accuracy of the training facts (checked every check_every epochs
/// once min_epochs have run) or max_epochs is reached.
inline PretrainOutcome pretrain(const ModelConfig& mcfg, const CorpusSplit& corpus, const Vocab& vocab,
                                const PretrainConfig& cfg, std::uint64_t init_seed) {
  cfg.validate();
  PretrainOutcome out;
  out.model = init_model(mcfg, init_seed);
  const auto mask = TrainabilityMask::full();
  Adam adam(out.model, AdamConfig{cfg.lr});
  Rng rng(derive_seed(cfg.seed, {52}));
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto items = pretraining_items(corpus, vocab, cfg, epoch);
    detail::shuffle_in_place(items, rng);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t b0 = 0; b0 < items.size(); b0 += bs) {
      std::span<const TrainItem> batch(items.data() + b0, std::min(bs, items.size() - b0));
      auto res = naive_nll(out.model, batch, mask);
      adam.step(out.model, res.grad, mask);
      sum += res.loss;
      ++n;
    }
    out.epochs = epoch + 1;
    out.log.emplace_back(epoch, sum / static_cast<double>(n));
    const bool last = epoch + 1 == cfg.max_epochs;
    if (out.epochs >= cfg.min_epochs && (out.epochs % cfg.check_every == 0 || last)) {
      // Checkpoints are float32; measure the model as it will be reloaded.
      Model rounded = out.model;
      round_to_float(rounded);
      out.accuracy = fact_accuracy(rounded, corpus, vocab);
      if (out.accuracy >= cfg.target_accuracy) {
        out.reached_target = true;
        break;
      }
    }
  }
  round_to_float(out.model);
  if (!out.reached_target) out.accuracy = fact_accuracy(out.model, corpus, vocab);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs";

  WorldConfig world;
  int n_edits = 50;
  EditMode mode = EditMode::CounterfactLike;
  EditSetConfig edit_set;

  ModelConfig model;
  PretrainConfig pretrain;
  EditorConfig editor;
  std::string variant = "FT+Mask+Para+Rand";
  EvalOptions eval;
  std::vector<std::string> ablate_variants = {"FT", "FT+Mask", "FT+Mask+Para", "FT+Mask+Para+Rand"};

  ExperimentConfig() {
    editor.apply_variant(variant);
    derive_seeds();
  }

  /// Seeds of every component follow from the master seed.
  void derive_seeds() {
    world.seed = derive_seed(seed, {1});
    edit_set.seed = derive_seed(seed, {2});
    pretrain.seed = derive_seed(seed, {3});
    editor.seed = seed;
    editor.augment.seed = derive_seed(seed, {5});
    eval.generation.seed = derive_seed(seed, {6});
  }
  std::uint64_t init_seed() const { return derive_seed(seed, {4}); }

  struct Entry {
    std::string key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };

  /// Every configurable key in serialization order.
  std::vector<Entry> entries() {
    std::vector<Entry> e;
    auto str = [&](const std::string& k, std::string& v) {
      e.push_back({k, [&v] { return v; }, [&v](const std::string& s) { v = s; }});
    };
    auto integer = [&](const std::string& k, int& v) {
      e.push_back({k, [&v] { return std::to_string(v); }, [&v, k](const std::string& s) { v = parse_int(k, s); }});
    };
    auto u64 = [&](const std::string& k, std::uint64_t& v) {
      e.push_back({k, [&v] { return std::to_string(v); }, [&v, k](const std::string& s) {
                     v = static_cast<std::uint64_t>(parse_int(k, s, true));
                   }});
    };
    auto real = [&](const std::string& k, double& v) {
      e.push_back({k, [&v] { return format_real(v); }, [&v, k](const std::string& s) { v = parse_real(k, s); }});
    };
    auto boolean = [&](const std::string& k, bool& v) {
      e.push_back({k, [&v] { return std::string(v ? "true" : "false"); },
                   [&v, k](const std::string& s) { v = parse_bool(k, s); }});
    };

    u64("run.seed", seed);
    str("run.out_dir", out_dir);

    integer("corpus.n_entities", world.n_entities);
    integer("corpus.n_relations", world.n_relations);
    integer("corpus.facts_per_relation", world.facts_per_relation);
    integer("corpus.templates_per_relation", world.templates_per_relation);
    integer("corpus.objects_per_relation", world.objects_per_relation);
    integer("corpus.n_background", world.n_background);
    integer("corpus.n_distractors", world.n_distractors);
    integer("corpus.max_surface_len", world.max_surface_len);
    integer("corpus.n_edits", n_edits);
    e.push_back({"corpus.mode", [this] { return std::string(to_string(mode)); },
                 [this](const std::string& s) { mode = parse_edit_mode(s); }});
    integer("corpus.n_neighbors", edit_set.n_neighbors);
    integer("corpus.n_unrelated", edit_set.n_unrelated);
    integer("corpus.paraphrases_per_template", edit_set.paraphrases_per_template);

    integer("model.n_layers", model.n_layers);
    integer("model.d_model", model.d_model);
    integer("model.n_heads", model.n_heads);
    integer("model.d_ff", model.d_ff);
    integer("model.max_seq_len", model.max_seq_len);

    integer("pretrain.max_epochs", pretrain.max_epochs);
    integer("pretrain.min_epochs", pretrain.min_epochs);
    integer("pretrain.batch_size", pretrain.batch_size);
    real("pretrain.lr", pretrain.lr);
    real("pretrain.target_accuracy", pretrain.target_accuracy);
    integer("pretrain.check_every", pretrain.check_every);
    real("pretrain.context_prob", pretrain.context_prob);

    e.push_back({"editor.variant", [this] { return variant; },
                 [this](const std::string& s) {
                   editor.apply_variant(s);
                   variant = editor.variant_name();
                 }});
    boolean("editor.single", editor.single);
    e.push_back({"editor.adapter_mode", [this] { return std::string(to_string(editor.adapter_mode)); },
                 [this](const std::string& s) { editor.adapter_mode = parse_adapter_mode(s); }});
    e.push_back({"editor.layer_range",
                 [this] {
                   return editor.layer_range ? std::to_string(editor.layer_range->first) + "-" +
                                                   std::to_string(editor.layer_range->second)
                                             : std::string("all");
                 },
                 [this](const std::string& s) { editor.layer_range = parse_range("editor.layer_range", s); }});
    integer("editor.rank", editor.adapter.rank);
    real("editor.adapter_scale", editor.adapter.scale);
    integer("editor.epochs", editor.epochs);
    integer("editor.batch_size", editor.batch_size);
    real("editor.lr", editor.lr);
    real("editor.gamma", editor.gamma);
    real("editor.lambda_dpo", editor.lambda_dpo);
    real("editor.dpo_beta", editor.dpo_beta);
    real("editor.early_stop_loss", editor.early_stop_loss);
    e.push_back({"editor.sim_embedder", [this] { return std::string(to_string(editor.sim_embedder)); },
                 [this](const std::string& s) { editor.sim_embedder = parse_embedder(s); }});

    integer("augment.n_paraphrases", editor.augment.n_paraphrases_per_edit);
    integer("augment.n_random_facts", editor.augment.n_random_facts_per_edit);
    integer("augment.n_similar_facts", editor.augment.n_similar_facts);
    integer("augment.prefix_min", editor.augment.prefix_min);
    integer("augment.prefix_max", editor.augment.prefix_max);
    real("augment.prefix_temperature", editor.augment.prefix_temperature);

    boolean("eval.generative", eval.generative);
    integer("eval.gen_len", eval.generation.gen_len);
    integer("eval.top_k", eval.generation.top_k);
    real("eval.temperature", eval.generation.temperature);
    real("eval.fluency_bigram_weight", eval.generation.weights.bigram);
    real("eval.fluency_trigram_weight", eval.generation.weights.trigram);

    e.push_back({"ablate.variants", [this] { return join(ablate_variants, ","); },
                 [this](const std::string& s) {
                   ablate_variants.clear();
                   std::stringstream ss(s);
                   std::string item;
                   while (std::getline(ss, item, ','))
                     if (!item.empty()) ablate_variants.push_back(trim(item));
                 }});
    return e;
  }

  void set(const std::string& key, const std::string& value) {
    for (auto& e : entries()) {
      if (e.key == key) {
        e.set(value);
        derive_seeds();
        return;
      }
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }

  std::string get(const std::string& key) {
    for (auto& e : entries())
      if (e.key == key) return e.get();
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }

  void validate() {
    // vocab_size comes from the corpus at run time.
    ModelConfig shape = model;
    if (shape.vocab_size == 0) shape.vocab_size = 1;
    shape.validate();
    pretrain.validate();
    editor.validate();
    if (n_edits < 1) throw std::invalid_argument("config: corpus.n_edits must be >= 1");
    if (eval.generation.gen_len < 3) throw std::invalid_argument("config: eval.gen_len must be >= 3");
    for (const auto& v : ablate_variants) {
      EditorConfig probe = editor;
      probe.apply_variant(v);
    }
  }

  void write(std::ostream& out) {
    for (auto& e : entries()) out << e.key << " = " << e.get() << '\n';
  }

  std::string serialize() {
    std::ostringstream out;
    write(out);
    return out.str();
  }

  /// Reads "key = value" lines; '#' starts a comment. Unknown keys and
  /// malformed lines are errors.
  static ExperimentConfig parse(std::istream& in) {
    ExperimentConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
      try {
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
      } catch (const std::invalid_argument& err) {
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": " + err.what());
      }
    }
    cfg.derive_seeds();
    return cfg;
  }

  static ExperimentConfig load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    return parse(in);
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

 private:
  static long long parse_int(const std::string& key, const std::string& s, bool non_negative = false) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size() || (non_negative && v < 0))
      throw std::invalid_argument(key + ": expected an integer, got '" + s + "'");
    return v;
  }

  static double parse_real(const std::string& key, const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw std::invalid_argument(key + ": expected a number, got '" + s + "'");
    return v;
  }

  static bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::invalid_argument(key + ": expected true or false, got '" + s + "'");
  }

  static std::optional<std::pair<int, int>> parse_range(const std::string& key, const std::string& s) {
    if (s == "all" || s.empty()) return std::nullopt;
    auto dash = s.find('-');
    if (dash == std::string::npos) {
      const int l = static_cast<int>(parse_int(key, s, true));
      return std::make_pair(l, l);
    }
    const int a = static_cast<int>(parse_int(key, s.substr(0, dash), true));
    const int b = static_cast<int>(parse_int(key, s.substr(dash + 1), true));
    if (b < a) throw std::invalid_argument(key + ": empty layer range '" + s + "'");
    return std::make_pair(a, b);
  }

  static std::string format_real(double v) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    std::string s = o.str();
    // Prefer the shortest representation that round-trips.
    for (int p = 1; p <= 17; ++p) {
      std::ostringstream t;
      t << std::setprecision(p) << v;
      if (std::stod(t.str()) == v) return t.str();
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Pipeline steps. Layout under out_dir:
//   corpus/corpus.jsonl, corpus/vocab.txt, corpus/config.txt
//   base/model.ckpt, base/pretrain_log.csv, base/config.txt
//   <run name>/config.txt, train_log.csv, train_items.jsonl, counts.txt,
//   model.ckpt[.adapters], report.csv, per_item.jsonl, timing.txt

struct RunPaths {
  fs::path root;
  fs::path corpus_dir() const { return root / "corpus"; }
  fs::path corpus_file() const { return corpus_dir() / "corpus.jsonl"; }
  fs::path vocab_file() const { return corpus_dir() / "vocab.txt"; }
  fs::path base_dir() const { return root / "base"; }
  fs::path base_checkpoint() const { return base_dir() / "model.ckpt"; }
  fs::path run_dir(const std::string& name) const { return root / name; }
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

template <typename F>
void write_with(const fs::path& p, F&& f) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  f(out);
}

inline void require_file(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw std::runtime_error("missing input " + p.string() + " (" + hint + ")");
}

}  // namespace detail

/// The world plus its attached edit set, generated from the config alone.
inline CorpusSplit make_corpus(const ExperimentConfig& cfg) {
  auto corpus = gen_world(cfg.world);
  auto es = make_edit_set(corpus, cfg.n_edits, cfg.mode, cfg.edit_set);
  if (es.edits.size() < static_cast<std::size_t>(cfg.n_edits))
    throw std::runtime_error("gen-corpus: only " + std::to_string(es.edits.size()) + " of " +
                             std::to_string(cfg.n_edits) + " edits could be built");
  attach_edit_set(corpus, std::move(es.edits), cfg.mode);
  return corpus;
}

inline void step_gen_corpus(ExperimentConfig& cfg) {
  RunPaths paths{cfg.out_dir};
  const auto corpus = make_corpus(cfg);
  const auto vocab = build_vocab(corpus);
  detail::write_with(paths.corpus_file(), [&](std::ostream& o) { write_corpus(o, corpus); });
  detail::write_with(paths.vocab_file(), [&](std::ostream& o) { vocab.write(o); });
  detail::write_text(paths.corpus_dir() / "config.txt", cfg.serialize());
}

struct LoadedCorpus {
  CorpusSplit corpus;
  Vocab vocab;
};

inline LoadedCorpus load_corpus(const ExperimentConfig& cfg) {
  RunPaths paths{cfg.out_dir};
  detail::require_file(paths.corpus_file(), "run gen-corpus first");
  detail::require_file(paths.vocab_file(), "run gen-corpus first");
  std::ifstream cin(paths.corpus_file(), std::ios::binary);
  std::ifstream vin(paths.vocab_file(), std::ios::binary);
  LoadedCorpus lc{read_corpus(cin), Vocab::read(vin)};
  if (!(build_vocab(lc.corpus) == lc.vocab)) throw std::runtime_error("vocab file does not match the corpus");
  return lc;
}

inline ModelConfig model_config(const ExperimentConfig& cfg, const Vocab& vocab) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  return m;
}

inline PretrainOutcome step_pretrain(ExperimentConfig& cfg) {
  RunPaths paths{cfg.out_dir};
  const auto lc = load_corpus(cfg);
  auto out = pretrain(model_config(cfg, lc.vocab), lc.corpus, lc.vocab, cfg.pretrain, cfg.init_seed());
  detail::write_with(paths.base_checkpoint(), [&](std::ostream& o) { save_base(o, out.model); });
  detail::write_with(paths.base_dir() / "pretrain_log.csv", [&](std::ostream& o) {
    o << "epoch,loss\n";
    for (const auto& [ep, loss] : out.log) o << ep << ',' << detail::fmt(loss, 8) << '\n';
    o << "# fact_accuracy=" << detail::fmt(out.accuracy) << " reached_target=" << (out.reached_target ? 1 : 0)
      << '\n';
  });
  detail::write_text(paths.base_dir() / "config.txt", cfg.serialize());
  return out;
}

inline Model load_base_model(const ExperimentConfig& cfg, const Vocab& vocab) {
  RunPaths paths{cfg.out_dir};
  detail::require_file(paths.base_checkpoint(), "run pretrain first");
  std::ifstream in(paths.base_checkpoint(), std::ios::binary);
  Model m = load_base(in);
  if (!(m.config == model_config(cfg, vocab)))
    throw std::runtime_error("checkpoint/config mismatch: " + paths.base_checkpoint().string() +
                             " was trained with a different model config or vocabulary");
  return m;
}

inline void write_report_files(const fs::path& dir, const EvalReport& r) {
  detail::write_with(dir / "report.csv", [&](std::ostream& o) { write_report_csv(o, r); });
  detail::write_with(dir / "per_item.jsonl", [&](std::ostream& o) { write_per_item(o, r); });
}

inline void write_counts(const fs::path& p, const SetCounts& c) {
  detail::write_text(p, "E=" + std::to_string(c.e) + "\nP=" + std::to_string(c.p) + "\nR=" + std::to_string(c.r) +
                            "\nW=" + std::to_string(c.w) + "\n");
}

struct EditStepResult {
  fs::path dir;
  EvalReport report;
  bool diverged = false;
  std::string diagnostic;
};

/// Runs the configured variant. Mass edits store the edited checkpoint and
/// evaluate it; single edits evaluate each edited model in turn.
inline EditStepResult step_edit(ExperimentConfig& cfg, bool evaluate_after = true) {
  RunPaths paths{cfg.out_dir};
  const auto lc = load_corpus(cfg);
  const auto base = load_base_model(cfg, lc.vocab);
  EditStepResult res;
  res.dir = paths.run_dir(cfg.editor.run_name());
  fs::create_directories(res.dir);
  detail::write_text(res.dir / "config.txt", cfg.serialize());
  const auto variant = cfg.editor.variant_name();
  if (cfg.editor.single) {
    auto run = run_single_edits(base, lc.corpus, lc.vocab, cfg.editor, cfg.eval);
    res.report = run.report;
    SetCounts total;
    for (const auto& c : run.counts) {
      total.e += c.e;
      total.p += c.p;
      total.r += c.r;
      total.w = c.w;
    }
    write_counts(res.dir / "counts.txt", total);
    detail::write_with(res.dir / "timing.txt", [&](std::ostream& o) {
      o << "edit,seconds\n";
      for (std::size_t i = 0; i < run.seconds.size(); ++i) o << i << ',' << detail::fmt(run.seconds[i], 4) << '\n';
    });
    for (const auto& d : run.diagnostics)
      if (!d.empty()) {
        res.diverged = true;
        res.diagnostic = d;
      }
    write_report_files(res.dir, res.report);
    return res;
  }
  std::vector<std::size_t> all(lc.corpus.edit_set.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto ts = build_training_set(base, lc.corpus, lc.vocab, cfg.editor, all);
  auto outcome = train_edit(base, ts, cfg.editor);
  res.diverged = outcome.diverged;
  res.diagnostic = outcome.diagnostic;
  write_counts(res.dir / "counts.txt", outcome.counts);
  detail::write_with(res.dir / "train_items.jsonl", [&](std::ostream& o) {
    write_train_items(o, ts.items, lc.vocab);
    write_train_items(o, ts.background, lc.vocab);
  });
  detail::write_with(res.dir / "train_log.csv", [&](std::ostream& o) { write_train_log(o, outcome.log); });
  detail::write_text(res.dir / "timing.txt", "seconds=" + detail::fmt(outcome.seconds, 4) + "\n");
  round_to_float(outcome.model);
  save_checkpoint((res.dir / "model.ckpt").string(), outcome.model);
  if (evaluate_after) {
    res.report = evaluate(outcome.model, lc.corpus, lc.vocab, cfg.eval, variant);
    write_report_files(res.dir, res.report);
  }
  return res;
}

/// Evaluates the checkpoint of the configured variant, or the base model
/// when `base_only` is set.
inline EvalReport step_eval(ExperimentConfig& cfg, bool base_only) {
  RunPaths paths{cfg.out_dir};
  const auto lc = load_corpus(cfg);
  if (base_only) {
    const auto base = load_base_model(cfg, lc.vocab);
    auto r = evaluate(base, lc.corpus, lc.vocab, cfg.eval, "base");
    write_report_files(paths.base_dir(), r);
    return r;
  }
  const auto dir = paths.run_dir(cfg.editor.run_name());
  if (cfg.editor.single) return step_edit(cfg).report;
  detail::require_file(dir / "model.ckpt", "run edit first");
  Model m = load_checkpoint((dir / "model.ckpt").string());
  if (!(m.config == model_config(cfg, lc.vocab)))
    throw std::runtime_error("checkpoint/config mismatch: " + (dir / "model.ckpt").string());
  auto r = evaluate(m, lc.corpus, lc.vocab, cfg.eval, cfg.editor.variant_name());
  write_report_files(dir, r);
  return r;
}

// ---------------------------------------------------------------------------
// Ladder reports

struct LadderRow {
  std::string run;
  EvalReport report;
};

inline std::vector<LadderRow> read_ladder(const std::vector<fs::path>& run_dirs) {
  std::vector<LadderRow> rows;
  for (const auto& d : run_dirs) {
    detail::require_file(d / "report.csv", "run eval first");
    std::ifstream in(d / "report.csv", std::ios::binary);
    rows.push_back({d.filename().string(), read_report_csv(in)});
  }
  return rows;
}

inline void write_ladder_text(std::ostream& out, const std::vector<LadderRow>& rows) {
  auto cell = [](const MetricSummary& s) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%6.1f ± %4.1f", s.mean, s.stderr_);
    return std::string(buf);
  };
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, r.report.variant.size());
  out << std::left << std::setw(static_cast<int>(w)) << "Editor" << "  " << std::right << std::setw(6) << "Score"
      << "  " << std::setw(13) << "Efficacy" << "  " << std::setw(13) << "Generalization" << "  " << std::setw(13)
      << "Locality" << '\n';
  for (const auto& r : rows) {
    char score[16];
    std::snprintf(score, sizeof score, "%6.1f", r.report.edit_score);
    out << std::left << std::setw(static_cast<int>(w)) << r.report.variant << "  " << score << "  "
        << cell(r.report.efficacy) << "  " << " " << cell(r.report.generalization) << "  "
        << cell(r.report.locality) << '\n';
  }
}

inline void write_ladder_csv(std::ostream& out, const std::vector<LadderRow>& rows) {
  using detail::fmt;
  out << "run,editor,score,efficacy,efficacy_se,generalization,generalization_se,locality,locality_se,fluency,"
         "consistency\n";
  for (const auto& r : rows) {
    const auto& x = r.report;
    out << r.run << ',' << x.variant << ',' << fmt(x.edit_score) << ',' << fmt(x.efficacy.mean) << ','
        << fmt(x.efficacy.stderr_) << ',' << fmt(x.generalization.mean) << ',' << fmt(x.generalization.stderr_) << ','
        << fmt(x.locality.mean) << ',' << fmt(x.locality.stderr_) << ',' << fmt(x.fluency.mean) << ','
        << fmt(x.consistency.mean) << '\n';
  }
}

/// Runs gen-corpus and pretrain when their outputs are missing, then edits
/// and evaluates each declared variant and writes the ladder.
inline std::vector<LadderRow> step_ablate(ExperimentConfig& cfg) {
  RunPaths paths{cfg.out_dir};
  if (!fs::exists(paths.corpus_file())) step_gen_corpus(cfg);
  if (!fs::exists(paths.base_checkpoint())) step_pretrain(cfg);
  std::vector<fs::path> dirs;
  for (const auto& v : cfg.ablate_variants) {
    ExperimentConfig row = cfg;
    row.set("editor.variant", v);
    dirs.push_back(step_edit(row).dir);
  }
  auto rows = read_ladder(dirs);
  detail::write_with(paths.root / "ladder.txt", [&](std::ostream& o) { write_ladder_text(o, rows); });
  detail::write_with(paths.root / "ladder.csv", [&](std::ostream& o) { write_ladder_csv(o, rows); });
  return rows;
}

}  // namespace ftedit
