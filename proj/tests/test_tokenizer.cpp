#include <gtest/gtest.h>

#include <sstream>

#include "ftedit/tokenizer.hpp"

using namespace ftedit;

TEST(Vocab, TwoWordCorpus) {
  CorpusSplit c;
  c.background_text = {{"b", "a"}};
  auto v = build_vocab(c);
  // "." is always present, so {a, b} gives 3 surfaces plus the specials.
  EXPECT_EQ(v.size(), Vocab::kNumSpecial + 3);
  EXPECT_EQ(v.surface(Vocab::kNumSpecial), ".");
  EXPECT_EQ(v.id("a"), Vocab::kNumSpecial + 1);
  EXPECT_EQ(v.id("b"), Vocab::kNumSpecial + 2);
}

TEST(Vocab, SpecialsFirstAndDistinct) {
  Vocab v(std::set<std::string>{"x"});
  EXPECT_EQ(v.surface(Vocab::kPad), kPadToken);
  EXPECT_EQ(v.surface(Vocab::kBos), kBosToken);
  EXPECT_EQ(v.surface(Vocab::kEos), kEosToken);
  EXPECT_TRUE(Vocab::is_special(Vocab::kBos));
  EXPECT_FALSE(Vocab::is_special(v.id("x")));
  EXPECT_THROW(Vocab(std::set<std::string>{kBosToken}), std::invalid_argument);
}

TEST(Vocab, IdenticalCorporaGiveIdenticalFiles) {
  auto a = build_vocab(gen_world(3, 40, 4, 30));
  auto b = build_vocab(gen_world(3, 40, 4, 30));
  std::ostringstream fa, fb;
  a.write(fa);
  b.write(fb);
  EXPECT_EQ(fa.str(), fb.str());
  std::istringstream in(fa.str());
  EXPECT_EQ(Vocab::read(in), a);
}

TEST(Vocab, ReadRejectsMalformedFiles) {
  std::istringstream no_specials("a\nb\n");
  EXPECT_THROW(Vocab::read(no_specials), std::runtime_error);
  std::istringstream unordered("<pad>\n<bos>\n<eos>\nb\na\n");
  EXPECT_THROW(Vocab::read(unordered), std::runtime_error);
}

TEST(Encode, EmptyAndUnknown) {
  Vocab v(std::set<std::string>{"x", "y"});
  EXPECT_TRUE(v.encode({}).empty());
  EXPECT_THROW(v.encode({"z"}), std::out_of_range);
  EXPECT_THROW(v.decode({99}), std::out_of_range);
  EXPECT_THROW(v.decode({-1}), std::out_of_range);
}

TEST(Encode, EveryRenderedFactEncodes) {
  auto c = gen_world(1, 50, 5, 40);
  auto v = build_vocab(c);
  for (const auto& f : c.train_facts) {
    const auto& rel = c.relation(f.relation);
    for (std::size_t t = 0; t < rel.templates.size(); ++t) {
      const auto sentence = concat(rel.render(t, c.entity(f.subject).surface), f.target);
      EXPECT_NO_THROW(v.encode(sentence));
    }
  }
}

TEST(Encode, RoundTripOverThousandSentences) {
  WorldConfig wc;
  wc.seed = 9;
  auto c = gen_world(wc);
  auto es = make_edit_set(c, 30, EditMode::CounterfactLike, EditSetConfig{});
  attach_edit_set(c, es.edits, EditMode::CounterfactLike);
  auto v = build_vocab(c);
  std::vector<Words> pool;
  for (const auto& f : c.train_facts) pool.push_back(f.sentence());
  for (const auto& b : c.background_text) pool.push_back(b);
  for (const auto& e : c.edit_set)
    for (const auto& p : e.eval_paraphrases) pool.push_back(p);
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  for (int i = 0; i < 1000; ++i) {
    const auto& x = pool[pick(rng)];
    EXPECT_EQ(v.decode(v.encode(x)), x);
  }
}
