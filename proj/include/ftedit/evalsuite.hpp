#pragma once

// Edit metrics: efficacy, generalization and locality in both dataset
// styles, the harmonic-mean edit score, and the generative fluency and
// consistency scores. Every verdict is kept per item for auditing.

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftedit/factworld.hpp"
#include "ftedit/tinylm.hpp"
#include "ftedit/tokenizer.hpp"

namespace ftedit {

struct MetricSummary {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

/// One scored item. `value` is 0/1 for accuracy verdicts and a real score
/// for generative metrics.
struct ItemVerdict {
  int edit = 0;
  std::string metric;
  int item = 0;
  double value = 0.0;
  std::string detail;
};

struct EvalReport {
  std::string variant;
  EditMode mode = EditMode::CounterfactLike;
  MetricSummary efficacy, generalization, locality;
  double edit_score = 0.0;
  MetricSummary fluency, consistency;
  std::vector<ItemVerdict> per_item;
};

/// Harmonic mean of the three core metrics; 0 if any of them is 0.
inline double edit_score(double efficacy, double generalization, double locality) {
  if (efficacy <= 0.0 || generalization <= 0.0 || locality <= 0.0) return 0.0;
  return 3.0 / (1.0 / efficacy + 1.0 / generalization + 1.0 / locality);
}

/// scale·mean and scale·(sample standard deviation / sqrt(n)). Fewer than
/// two values give a zero standard error.
inline MetricSummary aggregate(std::span<const double> values, double scale = 100.0) {
  MetricSummary s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  s.mean = scale * mean;
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    s.stderr_ = scale * sd / std::sqrt(static_cast<double>(values.size()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Core metrics

struct CoreMetrics {
  MetricSummary efficacy, generalization, locality;
  std::vector<ItemVerdict> per_item;
};

namespace detail {

inline std::string words_text(const Words& w) { return join(w, " "); }

inline std::string fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

inline void require_eval_fields(const EditRequest& e, std::size_t index, bool need_pre, bool need_unrelated) {
  const auto where = " (edit " + std::to_string(index) + ")";
  if (e.prompt.empty() || e.target_new.empty()) throw std::invalid_argument("evaluation: edit without prompt or target" + where);
  if (e.eval_paraphrases.empty()) throw std::invalid_argument("evaluation: edit has no eval_paraphrases" + where);
  if (need_pre && e.target_pre.empty()) throw std::invalid_argument("evaluation: edit has no target_pre" + where);
  if (need_unrelated && e.unrelated_facts.empty())
    throw std::invalid_argument("evaluation: edit has no unrelated_facts" + where);
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

/// Greedy exact-match metrics. Generalization and locality are averaged per
/// edit first, then over edits.
inline CoreMetrics zsre_metrics(const Model& model, const std::vector<EditRequest>& edits, const Vocab& vocab) {
  CoreMetrics out;
  std::vector<double> eff, gen, loc;
  auto verdict = [&](int e, const char* metric, int item, const TokenIds& prompt, const TokenIds& want) {
    const auto got = argmax_completion(model, prompt, static_cast<int>(want.size()));
    const double v = got == want ? 1.0 : 0.0;
    out.per_item.push_back({e, metric, item, v, detail::words_text(vocab.decode(got))});
    return v;
  };
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const auto& e = edits[i];
    detail::require_eval_fields(e, i, false, true);
    const int ei = static_cast<int>(i);
    const auto target = vocab.encode(e.target_new);
    eff.push_back(verdict(ei, "efficacy", 0, vocab.encode(e.prompt), target));
    std::vector<double> g;
    for (std::size_t p = 0; p < e.eval_paraphrases.size(); ++p)
      g.push_back(verdict(ei, "generalization", static_cast<int>(p), vocab.encode(e.eval_paraphrases[p]), target));
    gen.push_back(detail::mean_of(g));
    std::vector<double> l;
    for (std::size_t u = 0; u < e.unrelated_facts.size(); ++u) {
      const auto& f = e.unrelated_facts[u];
      l.push_back(verdict(ei, "locality", static_cast<int>(u), vocab.encode(f.prompt), vocab.encode(f.target)));
    }
    loc.push_back(detail::mean_of(l));
  }
  out.efficacy = aggregate(eff);
  out.generalization = aggregate(gen);
  out.locality = aggregate(loc);
  return out;
}

/// Probability-comparison metrics with strict inequalities. Edits without
/// neighborhood prompts do not contribute to locality.
inline CoreMetrics cf_metrics(const Model& model, const std::vector<EditRequest>& edits, const Vocab& vocab) {
  struct Pending {
    int edit, item;
    const char* metric;
    bool new_wins;  // success when lp(new) > lp(pre); otherwise the reverse
  };
  std::vector<ScoreRequest> requests;
  std::vector<Pending> pending;
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const auto& e = edits[i];
    detail::require_eval_fields(e, i, true, false);
    const auto t_new = vocab.encode(e.target_new);
    const auto t_pre = vocab.encode(e.target_pre);
    auto add = [&](const Words& prompt, const char* metric, int item, bool new_wins) {
      const auto p = vocab.encode(prompt);
      requests.push_back({p, t_new});
      requests.push_back({p, t_pre});
      pending.push_back({static_cast<int>(i), item, metric, new_wins});
    };
    add(e.prompt, "efficacy", 0, true);
    for (std::size_t p = 0; p < e.eval_paraphrases.size(); ++p)
      add(e.eval_paraphrases[p], "generalization", static_cast<int>(p), true);
    for (std::size_t n = 0; n < e.neighborhood_prompts.size(); ++n)
      add(e.neighborhood_prompts[n], "locality", static_cast<int>(n), false);
  }
  const auto lp = cond_log_probs(model, requests);

  CoreMetrics out;
  std::vector<std::map<std::string, std::vector<double>>> by_edit(edits.size());
  for (std::size_t k = 0; k < pending.size(); ++k) {
    const auto& p = pending[k];
    const double lp_new = lp[2 * k], lp_pre = lp[2 * k + 1];
    const bool ok = p.new_wins ? lp_new > lp_pre : lp_pre > lp_new;
    const double v = ok ? 1.0 : 0.0;
    by_edit[static_cast<std::size_t>(p.edit)][p.metric].push_back(v);
    out.per_item.push_back({p.edit, p.metric, p.item, v,
                            "lp_new=" + detail::fmt(lp_new) + " lp_pre=" + detail::fmt(lp_pre)});
  }
  std::vector<double> eff, gen, loc;
  for (auto& m : by_edit) {
    eff.push_back(detail::mean_of(m["efficacy"]));
    gen.push_back(detail::mean_of(m["generalization"]));
    if (!m["locality"].empty()) loc.push_back(detail::mean_of(m["locality"]));
  }
  out.efficacy = aggregate(eff);
  out.generalization = aggregate(gen);
  out.locality = aggregate(loc);
  return out;
}

inline CoreMetrics core_metrics(const Model& model, const std::vector<EditRequest>& edits, const Vocab& vocab,
                                EditMode mode) {
  return mode == EditMode::ZsreLike ? zsre_metrics(model, edits, vocab) : cf_metrics(model, edits, vocab);
}

// ---------------------------------------------------------------------------
// Generative metrics

/// Entropy in bits of the empirical n-gram distribution of `text`; 0 when
/// the text has fewer than n tokens.
template <typename T>
double ngram_entropy(const std::vector<T>& text, int n) {
  if (n < 1) throw std::invalid_argument("ngram_entropy: n must be >= 1");
  if (text.size() < static_cast<std::size_t>(n)) return 0.0;
  std::map<std::vector<T>, int> counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= text.size(); ++i)
    ++counts[std::vector<T>(text.begin() + static_cast<std::ptrdiff_t>(i), text.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  const double total = static_cast<double>(text.size() - static_cast<std::size_t>(n) + 1);
  double h = 0.0;
  for (const auto& [gram, c] : counts) {
    const double p = c / total;
    h -= p * std::log2(p);
  }
  return h;
}

struct FluencyWeights {
  double bigram = 1.0 / 3.0;
  double trigram = 2.0 / 3.0;
};

template <typename T>
double weighted_ngram_entropy(const std::vector<T>& text, const FluencyWeights& w = {}) {
  return w.bigram * ngram_entropy(text, 2) + w.trigram * ngram_entropy(text, 3);
}

/// Smoothed tf-idf over a document collection: idf(t) = ln((1+N)/(1+df)) + 1.
class TfIdf {
 public:
  TfIdf() = default;

  explicit TfIdf(const std::vector<Words>& docs) : n_docs_(docs.size()) {
    for (const auto& d : docs) {
      std::map<std::string, int> seen;
      for (const auto& w : d) seen[w] = 1;
      for (const auto& [w, one] : seen) df_[w] += one;
    }
  }

  double idf(const std::string& w) const {
    auto it = df_.find(w);
    const double df = it == df_.end() ? 0.0 : it->second;
    return std::log((1.0 + static_cast<double>(n_docs_)) / (1.0 + df)) + 1.0;
  }

  std::map<std::string, double> vectorize(const Words& text) const {
    std::map<std::string, double> v;
    for (const auto& w : text) v[w] += 1.0;
    for (auto& [w, x] : v) x *= idf(w);
    return v;
  }

  /// Cosine of the tf-idf vectors; 0 when either text is empty.
  double cosine(const Words& a, const Words& b) const {
    const auto va = vectorize(a), vb = vectorize(b);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [w, x] : va) {
      na += x * x;
      auto it = vb.find(w);
      if (it != vb.end()) dot += x * it->second;
    }
    for (const auto& [w, y] : vb) nb += y * y;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / std::sqrt(na * nb), 0.0, 1.0);
  }

 private:
  std::size_t n_docs_ = 0;
  std::map<std::string, int> df_;
};

struct GenerationOptions {
  int gen_len = 40;
  int top_k = 5;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  FluencyWeights weights;
};

namespace detail {

inline void check_gen(const GenerationOptions& g) {
  if (g.gen_len < 3) throw std::invalid_argument("generation metrics: gen_len must be >= 3");
}

inline TokenIds continuation(const Model& model, const TokenIds& prompt, const GenerationOptions& g, std::size_t index,
                             std::size_t k = 0) {
  SamplingOptions opt;
  opt.temperature = g.temperature;
  opt.top_k = g.top_k;
  return generate(model, prompt, g.gen_len, opt, derive_seed(g.seed, {31, index, k}));
}

}  // namespace detail

/// Weighted n-gram entropy of one sampled continuation per prompt, reported
/// as mean ± standard error in bits.
inline MetricSummary fluency(const Model& model, const std::vector<TokenIds>& prompts, const GenerationOptions& g) {
  detail::check_gen(g);
  std::vector<double> h;
  for (std::size_t i = 0; i < prompts.size(); ++i)
    h.push_back(weighted_ngram_entropy(detail::continuation(model, prompts[i], g, i), g.weights));
  return aggregate(h, 1.0);
}

/// tf-idf cosine between a continuation and a reference text, in [0, 1].
inline double consistency_score(const Words& generated, const Words& reference, const TfIdf& tfidf) {
  if (reference.empty()) throw std::invalid_argument("consistency: empty reference text");
  return tfidf.cosine(generated, reference);
}

/// Continuation of the edit prompt compared with the reference text of the
/// new object.
inline double consistency(const Model& model, const EditRequest& edit, const std::vector<Words>& reference_texts,
                          const TfIdf& tfidf, const Vocab& vocab, const GenerationOptions& g, std::size_t index) {
  detail::check_gen(g);
  if (edit.object_new < 0 || static_cast<std::size_t>(edit.object_new) >= reference_texts.size())
    throw std::invalid_argument("consistency: no reference text for the new object");
  const auto& ref = reference_texts[static_cast<std::size_t>(edit.object_new)];
  if (ref.empty()) throw std::invalid_argument("consistency: empty reference text");
  const auto gen = detail::continuation(model, vocab.encode(edit.prompt), g, index);
  return consistency_score(vocab.decode(gen), ref, tfidf);
}

// ---------------------------------------------------------------------------
// Full report

struct EvalOptions {
  bool generative = true;
  GenerationOptions generation;
};

/// Generation prompts of an edit: the edit prompt followed by its
/// evaluation paraphrases.
inline std::vector<Words> generation_prompts(const EditRequest& e) {
  std::vector<Words> out = {e.prompt};
  out.insert(out.end(), e.eval_paraphrases.begin(), e.eval_paraphrases.end());
  return out;
}

/// Core metrics for the corpus mode plus, optionally, fluency and
/// consistency from one continuation of each generation prompt, averaged per
/// edit and then over edits.
inline EvalReport evaluate(const Model& model, const CorpusSplit& corpus, const std::vector<EditRequest>& edits,
                           const Vocab& vocab, const EvalOptions& opt, const std::string& variant = "") {
  EvalReport r;
  r.variant = variant;
  r.mode = corpus.mode;
  auto core = core_metrics(model, edits, vocab, corpus.mode);
  r.efficacy = core.efficacy;
  r.generalization = core.generalization;
  r.locality = core.locality;
  r.edit_score = edit_score(r.efficacy.mean, r.generalization.mean, r.locality.mean);
  r.per_item = std::move(core.per_item);
  if (opt.generative && !edits.empty()) {
    const auto& g = opt.generation;
    detail::check_gen(g);
    const TfIdf tfidf(corpus.background_text);
    std::vector<double> flu, con;
    for (std::size_t i = 0; i < edits.size(); ++i) {
      const auto& e = edits[i];
      if (e.object_new < 0 || static_cast<std::size_t>(e.object_new) >= corpus.reference_texts.size())
        throw std::invalid_argument("evaluate: no reference text for edit " + std::to_string(i));
      const auto& ref = corpus.reference_texts[static_cast<std::size_t>(e.object_new)];
      const auto prompts = generation_prompts(e);
      std::vector<double> f_edit, c_edit;
      for (std::size_t k = 0; k < prompts.size(); ++k) {
        const auto gen = detail::continuation(model, vocab.encode(prompts[k]), g, i, k);
        const double f = weighted_ngram_entropy(gen, g.weights);
        const auto words = vocab.decode(gen);
        const double c = consistency_score(words, ref, tfidf);
        f_edit.push_back(f);
        c_edit.push_back(c);
        const auto text = detail::words_text(words);
        r.per_item.push_back({static_cast<int>(i), "fluency", static_cast<int>(k), f, text});
        r.per_item.push_back({static_cast<int>(i), "consistency", static_cast<int>(k), c, text});
      }
      flu.push_back(detail::mean_of(f_edit));
      con.push_back(detail::mean_of(c_edit));
    }
    r.fluency = aggregate(flu, 1.0);
    r.consistency = aggregate(con);
  }
  return r;
}

inline EvalReport evaluate(const Model& model, const CorpusSplit& corpus, const Vocab& vocab, const EvalOptions& opt,
                           const std::string& variant = "") {
  return evaluate(model, corpus, corpus.edit_set, vocab, opt, variant);
}

/// Merges per-edit reports from single-edit runs: verdicts are re-indexed
/// by edit and every metric is re-aggregated over edits.
inline EvalReport merge_single_reports(const std::vector<EvalReport>& parts, const std::string& variant) {
  EvalReport r;
  r.variant = variant;
  std::vector<double> eff, gen, loc, flu, con;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& p = parts[i];
    r.mode = p.mode;
    eff.push_back(p.efficacy.mean / 100.0);
    gen.push_back(p.generalization.mean / 100.0);
    if (p.locality.n > 0) loc.push_back(p.locality.mean / 100.0);
    if (p.fluency.n > 0) flu.push_back(p.fluency.mean);
    if (p.consistency.n > 0) con.push_back(p.consistency.mean / 100.0);
    for (auto v : p.per_item) {
      v.edit = static_cast<int>(i);
      r.per_item.push_back(std::move(v));
    }
  }
  r.efficacy = aggregate(eff);
  r.generalization = aggregate(gen);
  r.locality = aggregate(loc);
  r.edit_score = edit_score(r.efficacy.mean, r.generalization.mean, r.locality.mean);
  r.fluency = aggregate(flu, 1.0);
  r.consistency = aggregate(con);
  return r;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_report_csv(std::ostream& out, const EvalReport& r) {
  using detail::fmt;
  out << "variant,metric,value,stderr,n\n";
  auto row = [&](const char* name, const MetricSummary& s) {
    out << r.variant << ',' << name << ',' << fmt(s.mean) << ',' << fmt(s.stderr_) << ',' << s.n << '\n';
  };
  row("efficacy", r.efficacy);
  row("generalization", r.generalization);
  row("locality", r.locality);
  out << r.variant << ",edit_score," << fmt(r.edit_score) << ",,\n";
  row("fluency", r.fluency);
  row("consistency", r.consistency);
}

inline void write_per_item(std::ostream& out, const EvalReport& r) {
  for (const auto& v : r.per_item) {
    nlohmann::ordered_json j;
    j["edit"] = v.edit;
    j["metric"] = v.metric;
    j["item"] = v.item;
    j["value"] = detail::fmt(v.value);
    j["detail"] = v.detail;
    out << j.dump() << '\n';
  }
}

/// Parses the CSV written by write_report_csv.
inline EvalReport read_report_csv(std::istream& in) {
  EvalReport r;
  std::string line;
  if (!std::getline(in, line) || line != "variant,metric,value,stderr,n")
    throw std::runtime_error("report: bad CSV header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      auto c = line.find(',', pos);
      f.push_back(line.substr(pos, c == std::string::npos ? std::string::npos : c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (f.size() != 5) throw std::runtime_error("report: malformed row '" + line + "'");
    r.variant = f[0];
    MetricSummary s;
    s.mean = std::stod(f[2]);
    if (!f[3].empty()) s.stderr_ = std::stod(f[3]);
    if (!f[4].empty()) s.n = std::stoul(f[4]);
    const auto& m = f[1];
    if (m == "efficacy") r.efficacy = s;
    else if (m == "generalization") r.generalization = s;
    else if (m == "locality") r.locality = s;
    else if (m == "edit_score") r.edit_score = s.mean;
    else if (m == "fluency") r.fluency = s;
    else if (m == "consistency") r.consistency = s;
    else throw std::runtime_error("report: unknown metric '" + m + "'");
  }
  return r;
}

}  // namespace ftedit
