#pragma once

// Training-set augmentation: pseudo-paraphrases made by prepending text
// sampled from the unedited model, random training-split facts for locality,
// and nearest-neighbor facts for single edits. Every locality fact is
// filtered against the evaluation triples.

#include <algorithm>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftedit/factworld.hpp"
#include "ftedit/objectives.hpp"
#include "ftedit/tinylm.hpp"
#include "ftedit/tokenizer.hpp"

namespace ftedit {

struct AugmentConfig {
  int n_paraphrases_per_edit = 15;
  int n_random_facts_per_edit = 20;
  int n_similar_facts = 15;
  int prefix_min = 3;
  int prefix_max = 8;
  double prefix_temperature = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_paraphrases_per_edit < 0 || n_random_facts_per_edit < 0 || n_similar_facts < 0)
      throw std::invalid_argument("AugmentConfig: counts must be >= 0");
    if (prefix_min < 0 || prefix_max < prefix_min) throw std::invalid_argument("AugmentConfig: bad prefix length range");
  }
};

/// prompt ++ target with the mask at the target.
inline TrainItem make_item(const TokenIds& prompt, const TokenIds& target, Source source, Triple origin = {}) {
  TrainItem item;
  item.tokens = concat(prompt, target);
  item.mask_start = static_cast<int>(prompt.size());
  item.source = source;
  item.origin = origin;
  return item;
}

inline TrainItem fact_item(const Fact& f, const Vocab& vocab) {
  return make_item(vocab.encode(f.prompt), vocab.encode(f.target), Source::R, f.triple());
}

/// Pseudo-paraphrases of one edit: a prefix sampled from BOS at the
/// configured temperature, followed by the original prompt and the new
/// target. Seeds derive from (cfg.seed, edit_index, k).
inline std::vector<TrainItem> gen_paraphrases(const Model& unedited, const TokenIds& prompt, const TokenIds& target_new,
                                              const AugmentConfig& cfg, std::size_t edit_index) {
  cfg.validate();
  std::vector<TrainItem> out;
  for (int k = 0; k < cfg.n_paraphrases_per_edit; ++k) {
    Rng rng(derive_seed(cfg.seed, {21, edit_index, static_cast<std::uint64_t>(k)}));
    std::uniform_int_distribution<int> len(cfg.prefix_min, cfg.prefix_max);
    const int n = len(rng);
    TokenIds prefix;
    if (n > 0) {
      SamplingOptions opt;
      opt.temperature = cfg.prefix_temperature;
      prefix = generate(unedited, {}, n, opt, rng());
    }
    TrainItem item = make_item(concat(prefix, prompt), target_new, Source::P);
    out.push_back(std::move(item));
  }
  return out;
}

inline std::vector<TrainItem> gen_paraphrases(const Model& unedited, const EditRequest& edit, const Vocab& vocab,
                                              const AugmentConfig& cfg, std::size_t edit_index) {
  return gen_paraphrases(unedited, vocab.encode(edit.prompt), vocab.encode(edit.target_new), cfg, edit_index);
}

namespace detail {

inline std::vector<std::size_t> filtered_fact_indices(const CorpusSplit& corpus, const std::set<Triple>& eval_triples) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < corpus.train_facts.size(); ++i)
    if (!eval_triples.contains(corpus.train_facts[i].triple())) out.push_back(i);
  return out;
}

}  // namespace detail

/// Random locality facts for one edit, drawn without replacement from the
/// training facts that are not evaluation triples.
inline std::vector<TrainItem> sample_random_facts_for_edit(const CorpusSplit& corpus, const Vocab& vocab,
                                                           const std::vector<std::size_t>& candidates,
                                                           const AugmentConfig& cfg, std::size_t edit_index) {
  const auto n = static_cast<std::size_t>(cfg.n_random_facts_per_edit);
  if (n == 0) return {};
  if (candidates.size() < n) {
    throw std::runtime_error("sample_random_facts: only " + std::to_string(candidates.size()) +
                             " training facts survive the evaluation filter, " + std::to_string(n) + " requested");
  }
  Rng rng(derive_seed(cfg.seed, {22, edit_index}));
  auto pool = candidates;
  std::vector<TrainItem> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, pool.size() - 1);
    std::swap(pool[i], pool[d(rng)]);
    out.push_back(fact_item(corpus.train_facts[pool[i]], vocab));
  }
  return out;
}

/// n_random_facts_per_edit items for every edit in the corpus, grouped by edit.
inline std::vector<std::vector<TrainItem>> sample_random_facts(const CorpusSplit& corpus, const Vocab& vocab,
                                                               const AugmentConfig& cfg) {
  cfg.validate();
  const auto candidates = detail::filtered_fact_indices(corpus, evaluation_triples(corpus));
  std::vector<std::vector<TrainItem>> out;
  for (std::size_t e = 0; e < corpus.edit_set.size(); ++e)
    out.push_back(sample_random_facts_for_edit(corpus, vocab, candidates, cfg, e));
  return out;
}

enum class Embedder { HiddenState, BagOfWords };

inline const char* to_string(Embedder e) { return e == Embedder::HiddenState ? "hidden" : "bow"; }

inline Embedder parse_embedder(const std::string& s) {
  if (s == "hidden") return Embedder::HiddenState;
  if (s == "bow") return Embedder::BagOfWords;
  throw std::invalid_argument("unknown embedder: " + s);
}

/// L2-normalized prompt embeddings for every training fact.
class EmbeddingIndex {
 public:
  /// Mean final-layer hidden state of the unedited model over prompt tokens.
  static EmbeddingIndex hidden_state(const Model& model, const CorpusSplit& corpus, const Vocab& vocab) {
    EmbeddingIndex idx;
    idx.kind_ = Embedder::HiddenState;
    idx.model_ = model;
    idx.build(corpus, vocab);
    return idx;
  }

  /// tf-idf bag of words, idf over the training prompts.
  static EmbeddingIndex bag_of_words(const CorpusSplit& corpus, const Vocab& vocab) {
    EmbeddingIndex idx;
    idx.kind_ = Embedder::BagOfWords;
    idx.idf_ = Eigen::VectorXd::Zero(vocab.size());
    for (const auto& f : corpus.train_facts) {
      std::set<int> seen;
      for (int t : vocab.encode(f.prompt)) seen.insert(t);
      for (int t : seen) idx.idf_(t) += 1.0;
    }
    const double n = static_cast<double>(corpus.train_facts.size());
    for (Eigen::Index t = 0; t < idx.idf_.size(); ++t) idx.idf_(t) = std::log((1.0 + n) / (1.0 + idx.idf_(t))) + 1.0;
    idx.build(corpus, vocab);
    return idx;
  }

  Eigen::VectorXd embed(const TokenIds& prompt) const {
    Eigen::VectorXd v;
    if (kind_ == Embedder::HiddenState) {
      v = mean_hidden_state(*model_, prompt);
    } else {
      v = Eigen::VectorXd::Zero(idf_.size());
      for (int t : prompt) v(t) += 1.0;
      v = v.cwiseProduct(idf_);
    }
    const double norm = v.norm();
    if (norm > 0.0) v /= norm;
    return v;
  }

  std::size_t size() const { return vectors_.size(); }
  Embedder kind() const { return kind_; }
  const Eigen::VectorXd& vector(std::size_t fact_index) const { return vectors_.at(fact_index); }

  /// Top-k training facts by cosine similarity among those `keep` accepts;
  /// ties go to the earlier fact. Returns (fact index, similarity).
  template <typename Pred>
  std::vector<std::pair<std::size_t, double>> nearest(const Eigen::VectorXd& query, std::size_t k, Pred keep) const {
    std::vector<std::pair<std::size_t, double>> scored;
    for (std::size_t i = 0; i < vectors_.size(); ++i)
      if (keep(i)) scored.emplace_back(i, vectors_[i].dot(query));
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (scored.size() > k) scored.resize(k);
    return scored;
  }

  std::vector<std::pair<std::size_t, double>> nearest(const Eigen::VectorXd& query, std::size_t k) const {
    return nearest(query, k, [](std::size_t) { return true; });
  }

 private:
  void build(const CorpusSplit& corpus, const Vocab& vocab) {
    vectors_.clear();
    for (const auto& f : corpus.train_facts) vectors_.push_back(embed(vocab.encode(f.prompt)));
  }

  Embedder kind_ = Embedder::BagOfWords;
  std::optional<Model> model_;
  Eigen::VectorXd idf_;
  std::vector<Eigen::VectorXd> vectors_;
};

inline EmbeddingIndex build_embedding_index(const CorpusSplit& corpus, const Vocab& vocab, Embedder kind,
                                            const Model* model = nullptr) {
  if (kind == Embedder::HiddenState) {
    if (!model) throw std::invalid_argument("build_embedding_index: hidden-state embedder needs a model");
    return EmbeddingIndex::hidden_state(*model, corpus, vocab);
  }
  return EmbeddingIndex::bag_of_words(corpus, vocab);
}

/// The n_similar_facts training facts closest to the edit prompt, with the
/// evaluation filter applied.
inline std::vector<TrainItem> similar_facts(const EmbeddingIndex& index, const CorpusSplit& corpus, const Vocab& vocab,
                                            const EditRequest& edit, const AugmentConfig& cfg,
                                            const std::set<Triple>& eval_triples) {
  cfg.validate();
  if (index.size() != corpus.train_facts.size())
    throw std::invalid_argument("similar_facts: index does not cover the training split");
  const auto k = static_cast<std::size_t>(cfg.n_similar_facts);
  if (k == 0) return {};
  const auto hits = index.nearest(index.embed(vocab.encode(edit.prompt)), k, [&](std::size_t i) {
    return !eval_triples.contains(corpus.train_facts[i].triple());
  });
  if (hits.size() < k) {
    throw std::runtime_error("similar_facts: only " + std::to_string(hits.size()) +
                             " training facts survive the evaluation filter, " + std::to_string(k) + " requested");
  }
  std::vector<TrainItem> out;
  for (const auto& [i, sim] : hits) out.push_back(fact_item(corpus.train_facts[i], vocab));
  return out;
}

/// Augmented items in the corpus line format, tagged E/P/R/W in "split".
inline void write_train_items(std::ostream& out, const std::vector<TrainItem>& items, const Vocab& vocab) {
  for (const auto& item : items) {
    const auto cut = item.tokens.begin() + item.mask_start;
    auto j = detail::record("train_item", detail::opt(item.origin.subject), detail::opt(item.origin.relation),
                            detail::opt(item.origin.object), vocab.decode(TokenIds(item.tokens.begin(), cut)),
                            vocab.decode(TokenIds(cut, item.tokens.end())), to_string(item.source));
    out << j.dump() << '\n';
  }
}

}  // namespace ftedit
