#pragma once

// Synthetic fact universe: entities, relations with object-last templates,
// subject-relation-object facts, edit requests with their evaluation prompts,
// and filler text used as background language-modeling data.

#include <algorithm>
#include <compare>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftedit/common.hpp"

namespace ftedit {

inline constexpr const char* kSubjectSlot = "<S>";
inline constexpr const char* kPeriod = ".";

struct Entity {
  int id = 0;
  Words surface;
};

struct Relation {
  int id = 0;
  std::string name;
  // Each template contains exactly one kSubjectSlot; the object follows the
  // last template token. Template 0 is the training render.
  std::vector<Words> templates;

  Words render(std::size_t template_index, const Words& subject) const {
    Words out;
    for (const auto& w : templates.at(template_index)) {
      if (w == kSubjectSlot) {
        out.insert(out.end(), subject.begin(), subject.end());
      } else {
        out.push_back(w);
      }
    }
    return out;
  }
};

struct Triple {
  int subject = -1;
  int relation = -1;
  int object = -1;
  auto operator<=>(const Triple&) const = default;
};

struct Fact {
  int subject = -1;
  int relation = -1;
  int object = -1;
  Words prompt;
  Words target;

  Triple triple() const { return {subject, relation, object}; }
  Words sentence() const { return concat(prompt, target); }
};

enum class EditMode { ZsreLike, CounterfactLike };

inline const char* to_string(EditMode m) {
  return m == EditMode::ZsreLike ? "zsre-like" : "counterfact-like";
}

inline EditMode parse_edit_mode(const std::string& s) {
  if (s == "zsre-like" || s == "zsre") return EditMode::ZsreLike;
  if (s == "counterfact-like" || s == "counterfact") return EditMode::CounterfactLike;
  throw std::invalid_argument("unknown edit mode: " + s);
}

struct EditRequest {
  int subject = -1;
  int relation = -1;
  int object_new = -1;
  int object_pre = -1;  // -1 when the pre-edit object is unknown (zsre-like)
  Words prompt;
  Words target_new;
  Words target_pre;
  std::vector<Words> eval_paraphrases;
  std::vector<Words> neighborhood_prompts;
  std::vector<Triple> neighborhood_triples;
  std::vector<Fact> unrelated_facts;

  Triple edit_triple() const { return {subject, relation, object_new}; }
  Triple pre_triple() const { return {subject, relation, object_pre}; }
};

struct CorpusSplit {
  EditMode mode = EditMode::CounterfactLike;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<Fact> train_facts;
  std::vector<EditRequest> edit_set;
  std::vector<Words> background_text;  // language-modeling passages
  std::vector<Words> distractors;      // context sentences placed before eval paraphrases
  std::vector<Words> reference_texts;  // indexed by entity id

  const Entity& entity(int id) const { return entities.at(static_cast<std::size_t>(id)); }
  const Relation& relation(int id) const { return relations.at(static_cast<std::size_t>(id)); }
};

struct WorldConfig {
  std::uint64_t seed = 1;
  int n_entities = 60;
  int n_relations = 8;
  int facts_per_relation = 50;
  int templates_per_relation = 3;
  int objects_per_relation = 0;  // 0: facts_per_relation / 6, at least 2
  int n_background = 200;
  int n_distractors = 64;
  int max_surface_len = 3;
};

namespace detail {

inline const std::vector<Words>& template_patterns() {
  // "R" is replaced by the relation name, "S" by the subject slot.
  static const std::vector<Words> patterns = {
      split_words("the R of S is"),
      split_words("S 's R is"),
      split_words("S has the R"),
      split_words("the R for S is known as"),
      split_words("people say S 's R is"),
      split_words("S , whose R is"),
  };
  return patterns;
}

inline const std::vector<std::string>& relation_names() {
  static const std::vector<std::string> names = {
      "capital", "language", "founder", "rival",   "mentor",  "anthem",
      "patron",  "ally",     "emblem",  "sponsor", "dialect", "guardian"};
  return names;
}

inline std::string make_word(Rng& rng, const std::string& consonants, const std::string& vowels,
                             int min_syl, int max_syl, bool closed) {
  std::uniform_int_distribution<int> syl(min_syl, max_syl);
  std::uniform_int_distribution<std::size_t> c(0, consonants.size() - 1);
  std::uniform_int_distribution<std::size_t> v(0, vowels.size() - 1);
  std::string w;
  int n = syl(rng);
  for (int i = 0; i < n; ++i) {
    w += consonants[c(rng)];
    w += vowels[v(rng)];
  }
  if (closed) w += consonants[c(rng)];
  return w;
}

// Draws `n` distinct words not already in `taken`, inserting them.
inline std::vector<std::string> make_lexicon(Rng& rng, int n, std::set<std::string>& taken,
                                             const std::string& consonants, const std::string& vowels,
                                             int min_syl, int max_syl, bool closed) {
  std::vector<std::string> out;
  int attempts = 0;
  while (static_cast<int>(out.size()) < n) {
    if (++attempts > 1000 * (n + 10)) throw std::runtime_error("lexicon generation exhausted");
    auto w = make_word(rng, consonants, vowels, min_syl, max_syl, closed);
    if (taken.insert(w).second) out.push_back(w);
  }
  return out;
}

// First-order Markov grammar over a filler vocabulary. Each word has a small
// successor set so generated text has real n-gram structure; a sentence never
// repeats a word, so fluent filler has no short repetition loops.
struct FillerGrammar {
  std::vector<std::string> words;
  std::vector<std::vector<int>> successors;
  std::vector<int> starters;

  Words sentence(Rng& rng) const {
    std::uniform_int_distribution<int> len(4, 8);
    std::uniform_int_distribution<std::size_t> pick_start(0, starters.size() - 1);
    int n = len(rng);
    Words out;
    int cur = starters[pick_start(rng)];
    out.push_back(words[static_cast<std::size_t>(cur)]);
    std::set<int> used = {cur};
    for (int i = 1; i < n; ++i) {
      std::vector<int> next;
      for (int w : successors[static_cast<std::size_t>(cur)])
        if (!used.contains(w)) next.push_back(w);
      if (next.empty()) break;
      std::uniform_int_distribution<std::size_t> pick(0, next.size() - 1);
      cur = next[pick(rng)];
      used.insert(cur);
      out.push_back(words[static_cast<std::size_t>(cur)]);
    }
    out.push_back(kPeriod);
    return out;
  }
};

inline FillerGrammar make_grammar(Rng& rng, std::set<std::string>& taken, int n_words) {
  FillerGrammar g;
  g.words = make_lexicon(rng, n_words, taken, "bcdfghjlmnprstvwz", "aeiouy", 1, 2, true);
  std::uniform_int_distribution<int> pick(0, n_words - 1);
  g.successors.resize(static_cast<std::size_t>(n_words));
  for (std::size_t w = 0; w < g.successors.size(); ++w) {
    auto& s = g.successors[w];
    std::set<int> chosen;
    while (chosen.size() < 3) {
      const int c = pick(rng);
      if (c != static_cast<int>(w)) chosen.insert(c);
    }
    s.assign(chosen.begin(), chosen.end());
  }
  std::set<int> starters;
  while (starters.size() < 6) starters.insert(pick(rng));
  g.starters.assign(starters.begin(), starters.end());
  return g;
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's std::shuffle implementation.
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> d(0, i - 1);
    std::swap(v[i - 1], v[d(rng)]);
  }
}

}  // namespace detail

/// Generates the world and its training facts. The edit set is left empty;
/// see make_edit_set / attach_edit_set.
inline CorpusSplit gen_world(const WorldConfig& cfg) {
  if (cfg.n_entities < 2 || cfg.n_relations < 1 || cfg.facts_per_relation < 1) {
    throw std::invalid_argument("gen_world: need at least 2 entities, 1 relation and 1 fact per relation");
  }
  if (cfg.facts_per_relation > cfg.n_entities) {
    throw std::invalid_argument("gen_world: facts_per_relation exceeds the number of distinct subjects");
  }
  const auto& patterns = detail::template_patterns();
  if (cfg.templates_per_relation < 2 || cfg.templates_per_relation > static_cast<int>(patterns.size())) {
    throw std::invalid_argument("gen_world: templates_per_relation must be in [2, " +
                                std::to_string(patterns.size()) + "]");
  }
  if (cfg.max_surface_len < 1 || cfg.max_surface_len > 3) {
    throw std::invalid_argument("gen_world: max_surface_len must be in [1, 3]");
  }

  Rng rng(derive_seed(cfg.seed, {1}));
  CorpusSplit corpus;

  std::set<std::string> taken;
  for (const auto& p : patterns)
    for (const auto& w : p) taken.insert(w);
  for (const auto& n : detail::relation_names()) taken.insert(n);
  taken.insert(kPeriod);
  taken.insert(kSubjectSlot);

  // Entities: surfaces of 1..max_surface_len words over a shared word pool.
  const int pool_size = std::max(8, cfg.n_entities);
  auto entity_words = detail::make_lexicon(rng, pool_size, taken, "bdfgklmnprstvz", "aeiou", 1, 2, false);
  std::set<Words> surfaces;
  std::uniform_int_distribution<std::size_t> pick_word(0, entity_words.size() - 1);
  std::discrete_distribution<int> pick_len({0.0, 0.55, 0.33, 0.12});
  for (int id = 0; id < cfg.n_entities; ++id) {
    Words surface;
    int attempts = 0;
    do {
      if (++attempts > 10000) throw std::runtime_error("gen_world: cannot draw unique entity surfaces");
      int len = std::min(pick_len(rng), cfg.max_surface_len);
      surface.clear();
      for (int i = 0; i < len; ++i) surface.push_back(entity_words[pick_word(rng)]);
    } while (!surfaces.insert(surface).second);
    corpus.entities.push_back({id, surface});
  }

  // Relations: names plus a random choice of template patterns.
  for (int r = 0; r < cfg.n_relations; ++r) {
    Relation rel;
    rel.id = r;
    if (r < static_cast<int>(detail::relation_names().size())) {
      rel.name = detail::relation_names()[static_cast<std::size_t>(r)];
    } else {
      rel.name = detail::make_lexicon(rng, 1, taken, "bdfgklmnprstvz", "aeiou", 2, 3, true).front();
    }
    std::vector<std::size_t> order(patterns.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    detail::shuffle_in_place(order, rng);
    for (int t = 0; t < cfg.templates_per_relation; ++t) {
      Words tmpl;
      for (const auto& w : patterns[order[static_cast<std::size_t>(t)]]) {
        if (w == "R") tmpl.push_back(rel.name);
        else if (w == "S") tmpl.push_back(kSubjectSlot);
        else tmpl.push_back(w);
      }
      rel.templates.push_back(std::move(tmpl));
    }
    corpus.relations.push_back(std::move(rel));
  }

  // Facts: per relation, distinct subjects; objects from a small pool so that
  // several subjects share each object (needed for neighborhood prompts).
  const int n_objects = cfg.objects_per_relation > 0
                            ? cfg.objects_per_relation
                            : std::max(2, cfg.facts_per_relation / 6);
  if (n_objects > cfg.n_entities) throw std::invalid_argument("gen_world: objects_per_relation too large");
  std::vector<int> all_ids(static_cast<std::size_t>(cfg.n_entities));
  for (int i = 0; i < cfg.n_entities; ++i) all_ids[static_cast<std::size_t>(i)] = i;
  for (const auto& rel : corpus.relations) {
    auto pool = all_ids;
    detail::shuffle_in_place(pool, rng);
    pool.resize(static_cast<std::size_t>(std::max(2, n_objects)));
    auto subjects = all_ids;
    detail::shuffle_in_place(subjects, rng);
    subjects.resize(static_cast<std::size_t>(cfg.facts_per_relation));
    std::sort(subjects.begin(), subjects.end());
    std::uniform_int_distribution<std::size_t> pick_obj(0, pool.size() - 1);
    for (int s : subjects) {
      int o;
      do {
        o = pool[pick_obj(rng)];
      } while (o == s);
      Fact f;
      f.subject = s;
      f.relation = rel.id;
      f.object = o;
      f.prompt = rel.render(0, corpus.entity(s).surface);
      f.target = corpus.entity(o).surface;
      corpus.train_facts.push_back(std::move(f));
    }
  }

  // Filler text. Background passages and eval distractors come from the same
  // grammar but never share a sentence.
  auto grammar = detail::make_grammar(rng, taken, 40);
  std::set<Words> background_sentences;
  std::uniform_int_distribution<int> n_sent(2, 3);
  for (int i = 0; i < cfg.n_background; ++i) {
    Words passage;
    int k = n_sent(rng);
    for (int j = 0; j < k; ++j) {
      auto s = grammar.sentence(rng);
      background_sentences.insert(s);
      passage.insert(passage.end(), s.begin(), s.end());
    }
    corpus.background_text.push_back(std::move(passage));
  }
  int attempts = 0;
  while (static_cast<int>(corpus.distractors.size()) < cfg.n_distractors) {
    if (++attempts > 1000 * (cfg.n_distractors + 10)) throw std::runtime_error("gen_world: distractor pool exhausted");
    auto s = grammar.sentence(rng);
    if (!background_sentences.contains(s)) corpus.distractors.push_back(std::move(s));
  }

  // Reference passage for each entity: its facts (as subject or object) in
  // the training render.
  corpus.reference_texts.assign(static_cast<std::size_t>(cfg.n_entities), {});
  for (const auto& f : corpus.train_facts) {
    for (int e : {f.subject, f.object}) {
      auto& ref = corpus.reference_texts[static_cast<std::size_t>(e)];
      auto sent = f.sentence();
      ref.insert(ref.end(), sent.begin(), sent.end());
      ref.push_back(kPeriod);
    }
  }
  return corpus;
}

inline CorpusSplit gen_world(std::uint64_t seed, int n_entities, int n_relations, int facts_per_relation) {
  WorldConfig cfg;
  cfg.seed = seed;
  cfg.n_entities = n_entities;
  cfg.n_relations = n_relations;
  cfg.facts_per_relation = facts_per_relation;
  return gen_world(cfg);
}

struct NeighborhoodResult {
  std::vector<Words> prompts;
  std::vector<Triple> triples;
  bool shortfall = false;
};

/// Up to k training-split prompts whose true object is the edit's pre-edit
/// object, excluding the edit's own subject and any (subject, relation) pair
/// in `excluded_pairs`. Candidates are taken in a seeded random order.
inline NeighborhoodResult neighborhood_prompts(const EditRequest& edit, const CorpusSplit& corpus, int k,
                                               const std::set<std::pair<int, int>>& excluded_pairs,
                                               std::uint64_t seed) {
  NeighborhoodResult out;
  if (k <= 0) return out;
  std::vector<const Fact*> candidates;
  for (const auto& f : corpus.train_facts) {
    if (f.relation != edit.relation || f.object != edit.object_pre || f.subject == edit.subject) continue;
    if (excluded_pairs.contains({f.subject, f.relation})) continue;
    if (f.prompt == edit.prompt) continue;
    if (std::find(edit.eval_paraphrases.begin(), edit.eval_paraphrases.end(), f.prompt) !=
        edit.eval_paraphrases.end())
      continue;
    candidates.push_back(&f);
  }
  Rng rng(seed);
  detail::shuffle_in_place(candidates, rng);
  if (static_cast<int>(candidates.size()) < k) out.shortfall = true;
  for (std::size_t i = 0; i < candidates.size() && static_cast<int>(i) < k; ++i) {
    out.prompts.push_back(candidates[i]->prompt);
    out.triples.push_back(candidates[i]->triple());
  }
  return out;
}

inline NeighborhoodResult neighborhood_prompts(const EditRequest& edit, const CorpusSplit& corpus, int k) {
  std::set<std::pair<int, int>> excluded;
  for (const auto& e : corpus.edit_set) excluded.insert({e.subject, e.relation});
  return neighborhood_prompts(edit, corpus, k, excluded, derive_seed(0, {std::uint64_t(edit.subject), std::uint64_t(edit.relation)}));
}

struct EditSetConfig {
  std::uint64_t seed = 1;
  int n_neighbors = 5;
  int n_unrelated = 5;
  int paraphrases_per_template = 1;
  bool skip_without_alternative = true;
};

struct EditSetResult {
  std::vector<EditRequest> edits;
  std::vector<std::string> skipped;  // one line per skipped candidate
};

/// Selects n_edits facts and builds their edit requests. Pure: the corpus is
/// not modified (see attach_edit_set).
inline EditSetResult make_edit_set(const CorpusSplit& corpus, int n_edits, EditMode mode,
                                   const EditSetConfig& cfg = {}) {
  if (n_edits < 0) throw std::invalid_argument("make_edit_set: negative n_edits");
  EditSetResult result;
  if (n_edits == 0) return result;

  Rng rng(derive_seed(cfg.seed, {2}));
  std::map<int, std::set<int>> objects_of_relation;
  for (const auto& f : corpus.train_facts) objects_of_relation[f.relation].insert(f.object);

  std::vector<std::size_t> order(corpus.train_facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  detail::shuffle_in_place(order, rng);

  std::vector<const Fact*> chosen;
  std::vector<int> new_objects;
  for (std::size_t idx : order) {
    if (static_cast<int>(chosen.size()) == n_edits) break;
    const Fact& f = corpus.train_facts[idx];
    if (mode == EditMode::CounterfactLike) {
      std::vector<int> alternatives;
      for (int o : objects_of_relation[f.relation])
        if (o != f.object && o != f.subject) alternatives.push_back(o);
      if (alternatives.empty()) {
        std::string msg = "fact (" + std::to_string(f.subject) + "," + std::to_string(f.relation) + "," +
                          std::to_string(f.object) + ") has no alternative object";
        if (!cfg.skip_without_alternative) throw std::runtime_error("make_edit_set: " + msg);
        result.skipped.push_back(msg);
        continue;
      }
      std::uniform_int_distribution<std::size_t> pick(0, alternatives.size() - 1);
      new_objects.push_back(alternatives[pick(rng)]);
    } else {
      new_objects.push_back(f.object);
    }
    chosen.push_back(&f);
  }
  if (static_cast<int>(chosen.size()) < n_edits) {
    throw std::runtime_error("make_edit_set: requested " + std::to_string(n_edits) + " edits but only " +
                             std::to_string(chosen.size()) + " facts are eligible");
  }

  std::set<std::pair<int, int>> edited_pairs;
  std::set<Triple> edited_triples;
  for (const Fact* f : chosen) {
    edited_pairs.insert({f->subject, f->relation});
    edited_triples.insert(f->triple());
  }

  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const Fact& f = *chosen[i];
    const Relation& rel = corpus.relation(f.relation);
    const auto& subject = corpus.entity(f.subject).surface;
    EditRequest e;
    e.subject = f.subject;
    e.relation = f.relation;
    e.object_new = new_objects[i];
    e.prompt = f.prompt;
    e.target_new = corpus.entity(e.object_new).surface;
    if (mode == EditMode::CounterfactLike) {
      e.object_pre = f.object;
      e.target_pre = f.target;
    }

    Rng erng(derive_seed(cfg.seed, {3, i}));
    std::uniform_int_distribution<std::size_t> pick_distractor(0, corpus.distractors.empty() ? 0 : corpus.distractors.size() - 1);
    for (std::size_t t = 1; t < rel.templates.size(); ++t) {
      for (int p = 0; p < cfg.paraphrases_per_template; ++p) {
        Words para;
        if (!corpus.distractors.empty()) para = corpus.distractors[pick_distractor(erng)];
        auto body = rel.render(t, subject);
        para.insert(para.end(), body.begin(), body.end());
        e.eval_paraphrases.push_back(std::move(para));
      }
    }

    if (mode == EditMode::CounterfactLike) {
      auto nb = neighborhood_prompts(e, corpus, cfg.n_neighbors, edited_pairs, derive_seed(cfg.seed, {4, i}));
      e.neighborhood_prompts = std::move(nb.prompts);
      e.neighborhood_triples = std::move(nb.triples);
    } else {
      std::vector<const Fact*> pool;
      for (const auto& g : corpus.train_facts) {
        if (g.relation == f.relation) continue;
        if (edited_pairs.contains({g.subject, g.relation})) continue;
        pool.push_back(&g);
      }
      detail::shuffle_in_place(pool, erng);
      for (std::size_t j = 0; j < pool.size() && static_cast<int>(j) < cfg.n_unrelated; ++j)
        e.unrelated_facts.push_back(*pool[j]);
    }
    result.edits.push_back(std::move(e));
  }
  return result;
}

/// Stores the edit set in the corpus. In zsre-like mode the edited facts are
/// removed from the training split, so the base model never sees them.
inline void attach_edit_set(CorpusSplit& corpus, std::vector<EditRequest> edits, EditMode mode) {
  corpus.mode = mode;
  if (mode == EditMode::ZsreLike) {
    std::set<Triple> held_out;
    for (const auto& e : edits) held_out.insert(e.edit_triple());
    std::erase_if(corpus.train_facts, [&](const Fact& f) { return held_out.contains(f.triple()); });
  }
  corpus.edit_set = std::move(edits);
}

/// Every triple the evaluation touches: edit triples, pre-edit triples,
/// neighborhood triples and unrelated-fact triples.
inline std::set<Triple> evaluation_triples(const CorpusSplit& corpus) {
  std::set<Triple> out;
  for (const auto& e : corpus.edit_set) {
    out.insert(e.edit_triple());
    if (e.object_pre >= 0) out.insert(e.pre_triple());
    out.insert(e.neighborhood_triples.begin(), e.neighborhood_triples.end());
    for (const auto& u : e.unrelated_facts) out.insert(u.triple());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited serialization. Every record carries the same seven fields in
// the same order: kind, subject, relation, object, prompt_tokens,
// target_tokens, split. Records that belong to an edit follow its "edit" line.

namespace detail {

inline nlohmann::ordered_json record(const std::string& kind, std::optional<int> subject,
                                     std::optional<int> relation, std::optional<int> object,
                                     const Words& prompt, const Words& target, const std::string& split) {
  nlohmann::ordered_json j;
  j["kind"] = kind;
  j["subject"] = subject ? nlohmann::ordered_json(*subject) : nlohmann::ordered_json(nullptr);
  j["relation"] = relation ? nlohmann::ordered_json(*relation) : nlohmann::ordered_json(nullptr);
  j["object"] = object ? nlohmann::ordered_json(*object) : nlohmann::ordered_json(nullptr);
  j["prompt_tokens"] = prompt;
  j["target_tokens"] = target;
  j["split"] = split;
  return j;
}

inline std::optional<int> opt(int v) { return v >= 0 ? std::optional<int>(v) : std::nullopt; }

}  // namespace detail

inline void write_corpus(std::ostream& out, const CorpusSplit& c) {
  using detail::record;
  auto line = [&](const nlohmann::ordered_json& j) { out << j.dump() << '\n'; };
  line(record("meta", std::nullopt, std::nullopt, std::nullopt, {}, {}, to_string(c.mode)));
  for (const auto& e : c.entities) line(record("entity", e.id, std::nullopt, std::nullopt, e.surface, {}, "world"));
  for (const auto& r : c.relations) {
    line(record("relation", std::nullopt, r.id, std::nullopt, {r.name}, {}, "world"));
    for (std::size_t t = 0; t < r.templates.size(); ++t)
      line(record("template", static_cast<int>(t), r.id, std::nullopt, r.templates[t], {}, "world"));
  }
  for (const auto& f : c.train_facts)
    line(record("fact", f.subject, f.relation, f.object, f.prompt, f.target, "train"));
  for (const auto& e : c.edit_set) {
    line(record("edit", e.subject, e.relation, e.object_new, e.prompt, e.target_new, "edit"));
    line(record("edit_pre", e.subject, e.relation, detail::opt(e.object_pre), e.prompt, e.target_pre, "edit"));
    for (const auto& p : e.eval_paraphrases)
      line(record("paraphrase", e.subject, e.relation, std::nullopt, p, {}, "eval"));
    for (std::size_t i = 0; i < e.neighborhood_prompts.size(); ++i) {
      const auto& t = e.neighborhood_triples[i];
      line(record("neighborhood", t.subject, t.relation, t.object, e.neighborhood_prompts[i], e.target_pre, "eval"));
    }
    for (const auto& u : e.unrelated_facts)
      line(record("unrelated", u.subject, u.relation, u.object, u.prompt, u.target, "eval"));
  }
  for (const auto& b : c.background_text) line(record("background", std::nullopt, std::nullopt, std::nullopt, b, {}, "background"));
  for (const auto& d : c.distractors) line(record("distractor", std::nullopt, std::nullopt, std::nullopt, d, {}, "eval"));
  for (std::size_t i = 0; i < c.reference_texts.size(); ++i)
    line(record("reference", static_cast<int>(i), std::nullopt, std::nullopt, c.reference_texts[i], {}, "reference"));
}

inline std::string serialize_corpus(const CorpusSplit& c) {
  std::ostringstream out;
  write_corpus(out, c);
  return out.str();
}

inline CorpusSplit read_corpus(std::istream& in) {
  CorpusSplit c;
  std::string text;
  std::size_t line_no = 0;
  auto get_int = [](const nlohmann::json& j, const char* key) { return j.at(key).is_null() ? -1 : j.at(key).get<int>(); };
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
      throw std::runtime_error("corpus line " + std::to_string(line_no) + ": " + ex.what());
    }
    const auto kind = j.at("kind").get<std::string>();
    const int s = get_int(j, "subject");
    const int r = get_int(j, "relation");
    const int o = get_int(j, "object");
    auto prompt = j.at("prompt_tokens").get<Words>();
    auto target = j.at("target_tokens").get<Words>();
    auto need_edit = [&]() -> EditRequest& {
      if (c.edit_set.empty()) throw std::runtime_error("corpus line " + std::to_string(line_no) + ": " + kind + " before any edit");
      return c.edit_set.back();
    };
    if (kind == "meta") {
      c.mode = parse_edit_mode(j.at("split").get<std::string>());
    } else if (kind == "entity") {
      c.entities.push_back({s, prompt});
    } else if (kind == "relation") {
      Relation rel;
      rel.id = r;
      rel.name = prompt.empty() ? "" : prompt.front();
      c.relations.push_back(std::move(rel));
    } else if (kind == "template") {
      c.relations.at(static_cast<std::size_t>(r)).templates.push_back(prompt);
    } else if (kind == "fact") {
      c.train_facts.push_back({s, r, o, prompt, target});
    } else if (kind == "edit") {
      EditRequest e;
      e.subject = s;
      e.relation = r;
      e.object_new = o;
      e.prompt = prompt;
      e.target_new = target;
      c.edit_set.push_back(std::move(e));
    } else if (kind == "edit_pre") {
      auto& e = need_edit();
      e.object_pre = o;
      e.target_pre = target;
    } else if (kind == "paraphrase") {
      need_edit().eval_paraphrases.push_back(prompt);
    } else if (kind == "neighborhood") {
      auto& e = need_edit();
      e.neighborhood_prompts.push_back(prompt);
      e.neighborhood_triples.push_back({s, r, o});
    } else if (kind == "unrelated") {
      need_edit().unrelated_facts.push_back({s, r, o, prompt, target});
    } else if (kind == "background") {
      c.background_text.push_back(prompt);
    } else if (kind == "distractor") {
      c.distractors.push_back(prompt);
    } else if (kind == "reference") {
      if (static_cast<int>(c.reference_texts.size()) <= s) c.reference_texts.resize(static_cast<std::size_t>(s) + 1);
      c.reference_texts[static_cast<std::size_t>(s)] = prompt;
    } else {
      throw std::runtime_error("corpus line " + std::to_string(line_no) + ": unknown kind '" + kind + "'");
    }
  }
  return c;
}

inline std::uint64_t corpus_fingerprint(const CorpusSplit& c) { return fnv1a(serialize_corpus(c)); }

}  // namespace ftedit
