#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "cara/corpus.hpp"

namespace {

using namespace cara;

std::string temp_path(const std::string& name) {
  return std::string(::testing::TempDir()) + "/" + name;
}

TEST(LoadJsonl, MapsFieldsAndOriginIds) {
  const std::string path = temp_path("basic.jsonl");
  {
    std::ofstream f(path);
    f << R"({"premise":null,"hypothesis":"great food","label":"positive"})" << "\n";
    f << R"({"premise":"a warm meal","hypothesis":"bad soup","label":"negative"})" << "\n";
    f << R"({"premise":null,"hypothesis":"ok","label":"positive"})" << "\n";
  }
  Dataset ds = load_jsonl(path, {"positive", "negative"});
  ASSERT_EQ(ds.samples.size(), 3u);
  EXPECT_FALSE(ds.samples[0].premise.has_value());
  EXPECT_EQ(ds.samples[0].hypothesis, "great food");
  EXPECT_EQ(ds.samples[1].premise.value(), "a warm meal");
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ds.samples[i].origin_id, static_cast<std::int64_t>(i));
    EXPECT_EQ(ds.samples[i].provenance, Provenance::clean);
  }
}

TEST(LoadJsonl, RejectsUnknownLabel) {
  const std::string path = temp_path("badlabel.jsonl");
  {
    std::ofstream f(path);
    f << R"({"premise":null,"hypothesis":"x","label":"maybe"})" << "\n";
  }
  EXPECT_THROW(load_jsonl(path, {"entailment", "contradiction", "neutral"}),
               std::runtime_error);
}

TEST(LoadJsonl, NamesLineOnParseError) {
  const std::string path = temp_path("badline.jsonl");
  {
    std::ofstream f(path);
    f << R"({"premise":null,"hypothesis":"x","label":"positive"})" << "\n";
    f << "{not json\n";
  }
  try {
    load_jsonl(path, {"positive"});
    FAIL() << "expected parse error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
}

TEST(LoadJsonl, RoundTripsTraceFields) {
  Dataset ds;
  ds.label_set = {"positive", "negative"};
  ds.samples.push_back({std::nullopt, "poisoned text", "negative", 7, Provenance::poisoned});
  const std::string path = temp_path("trace.jsonl");
  save_jsonl(ds, path, /*with_trace=*/true);
  Dataset back = load_jsonl(path, ds.label_set);
  ASSERT_EQ(back.samples.size(), 1u);
  EXPECT_EQ(back.samples[0].provenance, Provenance::poisoned);
  EXPECT_EQ(back.samples[0].origin_id, 7);
}

Dataset tiny_corpus(const std::string& text) {
  Dataset ds;
  ds.label_set = {"positive"};
  ds.samples.push_back({std::nullopt, text, "positive", 0, Provenance::clean});
  return ds;
}

TEST(BuildVocabulary, FrequencyOrderAndTruncation) {
  TokenVocabulary v6 = TokenVocabulary::build(tiny_corpus("a a b"), 6);
  ASSERT_EQ(v6.size(), 6u);
  EXPECT_EQ(v6.token(4), "a");
  EXPECT_EQ(v6.token(5), "b");

  TokenVocabulary v5 = TokenVocabulary::build(tiny_corpus("a a b"), 5);
  EXPECT_EQ(v5.size(), 5u);
  EXPECT_FALSE(v5.contains("b"));
}

TEST(BuildVocabulary, LexicographicTieBreak) {
  TokenVocabulary v = TokenVocabulary::build(tiny_corpus("c b"), 10);
  EXPECT_EQ(v.token(4), "b");
  EXPECT_EQ(v.token(5), "c");
}

TEST(BuildVocabulary, ReservedIdsAreDistinctAndFirst) {
  TokenVocabulary v = TokenVocabulary::build(tiny_corpus("x"), 10);
  std::set<std::string> reserved = {v.token(0), v.token(1), v.token(2), v.token(3)};
  EXPECT_EQ(reserved.size(), 4u);
  EXPECT_EQ(v.token(TokenVocabulary::kPad), "<pad>");
  EXPECT_EQ(v.token(TokenVocabulary::kSos), "<sos>");
  EXPECT_EQ(v.token(TokenVocabulary::kEos), "<eos>");
  EXPECT_EQ(v.token(TokenVocabulary::kUnk), "<unk>");
}

TEST(EncodeText, BasicsAndTruncation) {
  TokenVocabulary v = TokenVocabulary::build(tiny_corpus("good food"), 10);
  auto ids = encode_text(v, "Good Food", 50);
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids[0], v.id("good"));
  EXPECT_EQ(ids[1], v.id("food"));
  EXPECT_EQ(ids[2], TokenVocabulary::kEos);

  auto oov = encode_text(v, "pizza", 50);
  ASSERT_EQ(oov.size(), 2u);
  EXPECT_EQ(oov[0], TokenVocabulary::kUnk);
  EXPECT_EQ(oov[1], TokenVocabulary::kEos);

  std::string long_text;
  for (int i = 0; i < 60; ++i) long_text += "good ";
  auto truncated = encode_text(v, long_text, 50);
  EXPECT_EQ(truncated.size(), 51u);  // 50 ids + <eos>
  EXPECT_EQ(truncated.back(), TokenVocabulary::kEos);

  auto empty = encode_text(v, "", 50);
  ASSERT_EQ(empty.size(), 1u);
  EXPECT_EQ(empty[0], TokenVocabulary::kEos);
}

TEST(DecodeTokens, InverseOfEncode) {
  TokenVocabulary v = TokenVocabulary::build(tiny_corpus("good food"), 10);
  EXPECT_EQ(decode_tokens(v, {v.id("good"), v.id("food"), TokenVocabulary::kEos}),
            "good food");
  EXPECT_EQ(decode_tokens(v, {TokenVocabulary::kEos}), "");
  EXPECT_THROW(decode_tokens(v, {999}), std::runtime_error);
}

TEST(DecodeTokens, EncodeDecodeEncodeFixedPoint) {
  TokenVocabulary v = TokenVocabulary::build(tiny_corpus("the chef cooked warm soup"), 20);
  std::mt19937_64 rng(11);
  std::vector<std::string> words = {"the", "chef", "cooked", "warm", "soup"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> toks;
    std::uniform_int_distribution<std::size_t> len(1, 8);
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    std::size_t n = len(rng);
    for (std::size_t i = 0; i < n; ++i) toks.push_back(words[pick(rng)]);
    std::string text = join_tokens(toks);
    auto ids = encode_text(v, text, 50);
    EXPECT_EQ(decode_tokens(v, ids), lowercase(text));
    EXPECT_EQ(encode_text(v, decode_tokens(v, ids), 50), ids);
  }
}

TEST(FilterByLength, DropsLongSamplesAndIsIdempotent) {
  Dataset ds;
  ds.label_set = {"positive"};
  auto mk = [&](int n) {
    std::string text;
    for (int i = 0; i < n; ++i) text += "w ";
    ds.samples.push_back({std::nullopt, text, "positive",
                          static_cast<std::int64_t>(ds.samples.size()),
                          Provenance::clean});
  };
  mk(10);
  mk(50);
  mk(51);
  Dataset f = filter_by_length(ds, 50);
  EXPECT_EQ(f.samples.size(), 2u);
  Dataset ff = filter_by_length(f, 50);
  EXPECT_EQ(ff.samples.size(), f.samples.size());

  // Premise over the cap is dropped too.
  Dataset pd;
  pd.label_set = {"positive"};
  std::string long_prem;
  for (int i = 0; i < 51; ++i) long_prem += "p ";
  pd.samples.push_back({long_prem, "short", "positive", 0, Provenance::clean});
  EXPECT_TRUE(filter_by_length(pd, 50).samples.empty());
}

TEST(ToyCorpus, DeterministicAndBalanced) {
  ToyCorpusSpec spec = default_pair_spec(123);
  spec.n_train = 1000;
  spec.n_dev = 100;
  spec.n_test = 100;
  ToyCorpus a = generate_toy_corpus(spec);
  ToyCorpus b = generate_toy_corpus(spec);
  ASSERT_EQ(a.train.samples.size(), 1000u);
  EXPECT_EQ(a.train.samples, b.train.samples);
  EXPECT_EQ(a.dev.samples, b.dev.samples);
  EXPECT_EQ(a.test.samples, b.test.samples);

  std::map<std::string, int> counts;
  for (const auto& s : a.train.samples) ++counts[s.label];
  for (const auto& [label, n] : counts) {
    EXPECT_NEAR(n, 1000.0 / 3.0, 1000 * 0.01) << label;
  }

  ToyCorpusSpec two = default_single_spec(7);
  two.n_train = 1000;
  ToyCorpus c = generate_toy_corpus(two);
  std::map<std::string, int> c2;
  for (const auto& s : c.train.samples) ++c2[s.label];
  EXPECT_NEAR(c2["positive"], 500, 5);
  EXPECT_NEAR(c2["negative"], 500, 5);
}

// Independent oracle: classify by which class's marker tokens appear.
std::string marker_rule(const ToyCorpusSpec& spec, const TextPairSample& s) {
  auto toks = tokenize(s.hypothesis);
  for (const auto& [cls, markers] : spec.marker_tokens) {
    for (const auto& m : markers)
      if (std::find(toks.begin(), toks.end(), m) != toks.end()) return cls;
  }
  return "";
}

TEST(ToyCorpus, MarkerRuleScoresPerfectlyOnTestSplit) {
  ToyCorpusSpec spec = default_pair_spec(5);
  spec.n_train = 60;
  spec.n_dev = 30;
  spec.n_test = 300;
  ToyCorpus c = generate_toy_corpus(spec);
  for (const auto& s : c.test.samples) {
    EXPECT_EQ(marker_rule(spec, s), s.label) << s.hypothesis;
  }
}

TEST(ToyCorpus, PremisePresenceFollowsPairMode) {
  ToyCorpusSpec pair = default_pair_spec(3);
  pair.n_train = 30;
  pair.n_dev = 3;
  pair.n_test = 3;
  for (const auto& s : generate_toy_corpus(pair).train.samples)
    EXPECT_TRUE(s.premise.has_value());
  ToyCorpusSpec single = default_single_spec(3);
  single.n_train = 30;
  single.n_dev = 3;
  single.n_test = 3;
  for (const auto& s : generate_toy_corpus(single).train.samples)
    EXPECT_FALSE(s.premise.has_value());
}

TEST(SelectContainingToken, CountsAndPartition) {
  ToyCorpusSpec spec = default_pair_spec(17);
  spec.n_train = 400;
  spec.n_dev = 10;
  spec.n_test = 10;
  Dataset train = generate_toy_corpus(spec).train;

  // Plant the probe token into 37 known samples.
  const std::string probe = "waitress";
  std::mt19937_64 rng(99);
  std::vector<std::size_t> order(train.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < 37; ++k)
    train.samples[order[k]].hypothesis += " " + probe;

  Dataset hits = select_containing_token(train, probe);

  // Brute-force scan as the oracle.
  std::size_t expected = 0;
  for (const auto& s : train.samples) {
    auto toks = tokenize(s.hypothesis);
    if (std::find(toks.begin(), toks.end(), probe) != toks.end()) ++expected;
  }
  EXPECT_EQ(expected, 37u);
  EXPECT_EQ(hits.samples.size(), 37u);

  EXPECT_TRUE(select_containing_token(train, "zzznotoken").samples.empty());

  // Partition: matches plus complement reassemble the dataset exactly.
  std::set<std::int64_t> matched;
  for (const auto& s : hits.samples) matched.insert(s.origin_id);
  std::vector<TextPairSample> rebuilt;
  std::size_t hit_cursor = 0;
  for (const auto& s : train.samples) {
    if (matched.count(s.origin_id)) {
      rebuilt.push_back(hits.samples[hit_cursor++]);
    } else {
      rebuilt.push_back(s);
    }
  }
  EXPECT_EQ(rebuilt, train.samples);
}

TEST(SelectContainingToken, MatchesCaseInsensitively) {
  Dataset ds;
  ds.label_set = {"positive"};
  ds.samples.push_back({std::nullopt, "The Waitress was kind", "positive", 0,
                        Provenance::clean});
  EXPECT_EQ(select_containing_token(ds, "waitress").samples.size(), 1u);
  EXPECT_EQ(select_containing_token(ds, "WAITRESS").samples.size(), 1u);
}

}  // namespace
