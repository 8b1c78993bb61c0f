#pragma once

#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftedit/common.hpp"
#include "ftedit/factworld.hpp"

namespace ftedit {

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kEosToken = "<eos>";

/// Word-level vocabulary. Specials occupy ids 0..2; the remaining surfaces
/// follow in lexicographic order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kNumSpecial = 3;

  Vocab() : Vocab(std::set<std::string>{}) {}

  explicit Vocab(const std::set<std::string>& words) {
    for (const char* s : {kPadToken, kBosToken, kEosToken}) add(s);
    for (const auto& w : words) {
      if (id_of_.contains(w)) throw std::invalid_argument("Vocab: surface collides with a special token: " + w);
      add(w);
    }
  }

  int size() const { return static_cast<int>(surface_of_.size()); }
  bool contains(const std::string& w) const { return id_of_.contains(w); }
  const std::string& surface(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocab: id out of range: " + std::to_string(id));
    return surface_of_[static_cast<std::size_t>(id)];
  }
  int id(const std::string& w) const {
    auto it = id_of_.find(w);
    if (it == id_of_.end()) throw std::out_of_range("Vocab: unknown token '" + w + "'");
    return it->second;
  }
  static bool is_special(int id) { return id < kNumSpecial; }

  TokenIds encode(const Words& words) const {
    TokenIds out;
    out.reserve(words.size());
    for (const auto& w : words) out.push_back(id(w));
    return out;
  }

  Words decode(const TokenIds& ids) const {
    Words out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(surface(i));
    return out;
  }

  const std::vector<std::string>& surfaces() const { return surface_of_; }

  void write(std::ostream& out) const {
    for (const auto& s : surface_of_) out << s << '\n';
  }

  static Vocab read(std::istream& in) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    if (lines.size() < kNumSpecial || lines[0] != kPadToken || lines[1] != kBosToken || lines[2] != kEosToken) {
      throw std::runtime_error("vocab file: missing special tokens header");
    }
    std::set<std::string> words(lines.begin() + kNumSpecial, lines.end());
    if (words.size() + kNumSpecial != lines.size()) throw std::runtime_error("vocab file: duplicate surfaces");
    Vocab v(words);
    if (v.surface_of_ != lines) throw std::runtime_error("vocab file: surfaces not in canonical order");
    return v;
  }

  bool operator==(const Vocab& other) const { return surface_of_ == other.surface_of_; }

 private:
  void add(const std::string& w) {
    id_of_.emplace(w, size());
    surface_of_.push_back(w);
  }

  std::map<std::string, int> id_of_;
  std::vector<std::string> surface_of_;
};

/// Collects every surface that appears anywhere in the corpus.
inline Vocab build_vocab(const CorpusSplit& corpus) {
  std::set<std::string> words;
  auto add = [&](const Words& ws) { words.insert(ws.begin(), ws.end()); };
  for (const auto& e : corpus.entities) add(e.surface);
  for (const auto& r : corpus.relations) {
    for (const auto& t : r.templates)
      for (const auto& w : t)
        if (w != kSubjectSlot) words.insert(w);
  }
  for (const auto& f : corpus.train_facts) {
    add(f.prompt);
    add(f.target);
  }
  for (const auto& e : corpus.edit_set) {
    add(e.prompt);
    add(e.target_new);
    add(e.target_pre);
    for (const auto& p : e.eval_paraphrases) add(p);
    for (const auto& p : e.neighborhood_prompts) add(p);
    for (const auto& u : e.unrelated_facts) add(u.sentence());
  }
  for (const auto& b : corpus.background_text) add(b);
  for (const auto& d : corpus.distractors) add(d);
  for (const auto& r : corpus.reference_texts) add(r);
  words.insert(kPeriod);
  return Vocab(words);
}

}  // namespace ftedit
