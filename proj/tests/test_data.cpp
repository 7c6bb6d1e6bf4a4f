#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "thm/data.hpp"
#include "thm/errors.hpp"

using namespace thm;

namespace {

// Straightforward re-statement of greedy pair merging used as the oracle:
// words are kept as plain character lists plus a parallel "ends word" flag.
std::vector<std::pair<std::string, std::string>> oracle_merges(
    const std::vector<std::string>& sentences, std::size_t n_merges) {
  std::vector<std::vector<std::string>> words;
  for (const auto& s : sentences)
    for (const auto& w : split_words(s)) {
      std::vector<std::string> syms;
      for (std::size_t i = 0; i < w.size(); ++i)
        syms.push_back(std::string(1, w[i]) + (i + 1 < w.size() ? "@@" : ""));
      words.push_back(syms);
    }
  std::vector<std::pair<std::string, std::string>> merges;
  for (std::size_t m = 0; m < n_merges; ++m) {
    std::vector<std::pair<std::pair<std::string, std::string>, int>> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.size(); ++i) {
        std::pair<std::string, std::string> p{w[i], w[i + 1]};
        auto it = std::find_if(counts.begin(), counts.end(), [&](auto& c) { return c.first == p; });
        if (it == counts.end()) counts.push_back({p, 1});
        else ++it->second;
      }
    if (counts.empty()) break;
    auto best = counts.front();
    for (const auto& c : counts)
      if (c.second > best.second || (c.second == best.second && c.first < best.first)) best = c;
    merges.push_back(best.first);
    const auto& [a, b] = best.first;
    const std::string joined = a.substr(0, a.size() - 2) + b;
    for (auto& w : words) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == a && w[i + 1] == b) {
          out.push_back(joined);
          ++i;
        } else {
          out.push_back(w[i]);
        }
      }
      w = out;
    }
  }
  return merges;
}

std::vector<TokenId> distinct_ids(std::size_t n, TokenId first = kNumSpecial) {
  std::vector<TokenId> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = first + static_cast<TokenId>(i);
  return ids;
}

std::vector<TokenId> row_of(const TokenBatch& t, std::size_t r) {
  const auto row = t.row(r);
  return {row.begin(), row.end()};
}

std::size_t positions_changed(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
  return n;
}

}  // namespace

TEST(Bpe, RepeatedWordFirstMergeIsOnlyPair) {
  const std::vector<std::string> corpus{"ab", "ab ab"};
  const auto m = learn_bpe(corpus, base_vocab_size(corpus) + 1);
  ASSERT_EQ(m.merges().size(), 1u);
  EXPECT_EQ(m.merges()[0], (std::pair<std::string, std::string>{"a@@", "b"}));
  EXPECT_EQ(apply_bpe(m, "ab"), std::vector<TokenId>{m.id("ab")});
}

TEST(Bpe, BaseTargetMeansNoMerges) {
  const std::vector<std::string> corpus{"hello world", "low"};
  const auto m = learn_bpe(corpus, base_vocab_size(corpus));
  EXPECT_TRUE(m.merges().empty());
  EXPECT_EQ(m.vocab_size(), base_vocab_size(corpus));
  EXPECT_THROW(learn_bpe(corpus, base_vocab_size(corpus) - 1), ParameterError);
}

TEST(Bpe, EmptyCorpusIsDataError) {
  EXPECT_THROW(learn_bpe(std::vector<std::string>{}, 10), DataError);
  EXPECT_THROW(learn_bpe(std::vector<std::string>{"  ", ""}, 10), DataError);
}

TEST(Bpe, MergeOrderMatchesPairCountOracle) {
  const std::vector<std::string> corpus{"abab", "abab", "abab"};
  const auto m = learn_bpe(corpus, 100);
  const auto expected = oracle_merges(corpus, 100);
  EXPECT_EQ(m.merges(), expected);
  ASSERT_FALSE(expected.empty());
  // All three pairs occur three times; lexicographic order picks (a@@, b).
  EXPECT_EQ(expected[0], (std::pair<std::string, std::string>{"a@@", "b"}));
  EXPECT_EQ(m.segment("abab"), std::vector<std::string>{"abab"});
}

TEST(Bpe, MergeOrderMatchesOracleOnRandomCorpora) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::string> corpus;
    for (int s = 0; s < 8; ++s) {
      std::string line;
      const std::size_t n_words = 1 + rng.below(4);
      for (std::size_t w = 0; w < n_words; ++w) {
        if (w) line += ' ';
        const std::size_t len = 1 + rng.below(5);
        for (std::size_t c = 0; c < len; ++c) line += static_cast<char>('a' + rng.below(4));
      }
      corpus.push_back(line);
    }
    const auto m = learn_bpe(corpus, base_vocab_size(corpus) + 8);
    const auto expected = oracle_merges(corpus, m.merges().size());
    EXPECT_EQ(m.merges(), expected) << "trial " << trial;
  }
}

TEST(Bpe, ApplyBasics) {
  const std::vector<std::string> corpus{"the cat sat", "a mat"};
  const auto m = learn_bpe(corpus, 20);
  EXPECT_TRUE(apply_bpe(m, "").empty());
  EXPECT_EQ(apply_bpe(m, "a"), std::vector<TokenId>{m.id("a")});
  EXPECT_NE(m.id("a"), kUnk);
  EXPECT_EQ(apply_bpe(m, "q"), std::vector<TokenId>{kUnk});
  for (TokenId s = 0; s < kNumSpecial; ++s) EXPECT_TRUE(is_special(s));
  EXPECT_EQ(m.token(kPad), "<pad>");
  EXPECT_EQ(m.token(kUnk), "<unk>");
}

TEST(Bpe, TrainingCorpusNeverMapsToUnkAndDecodesBack) {
  Rng rng(3);
  const auto corpus = gen_synthetic(SyntheticTask::Copy, 30, 200, {1, 9}, rng);
  std::vector<std::string> text = corpus.source;
  text.insert(text.end(), corpus.target.begin(), corpus.target.end());
  for (std::size_t target : {base_vocab_size(text), base_vocab_size(text) + 15}) {
    const auto m = learn_bpe(corpus, target);
    for (const auto& s : text) {
      const auto ids = apply_bpe(m, s);
      EXPECT_EQ(std::count(ids.begin(), ids.end(), kUnk), 0) << s;
      EXPECT_EQ(m.decode(ids), s);
    }
  }
}

TEST(Bpe, SegmentationIsDeterministicAndSurvivesSaveLoad) {
  const std::vector<std::string> corpus{"lower lowest newer newest", "low low wide"};
  const auto m = learn_bpe(corpus, 30);
  const auto m2 = learn_bpe(corpus, 30);
  EXPECT_EQ(m.merges(), m2.merges());
  const auto path = std::filesystem::temp_directory_path() / "thm_test_bpe.txt";
  m.save(path.string());
  const auto loaded = BpeModel::load(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(loaded.merges(), m.merges());
  EXPECT_EQ(loaded.vocab_size(), m.vocab_size());
  for (const auto& s : {"lower newest", "slowest wider", "x"})
    EXPECT_EQ(apply_bpe(loaded, s), apply_bpe(m, s));
}

TEST(Corruption, LengthOneUnchanged) {
  Rng rng(1);
  const std::vector<TokenId> ids{7};
  for (int i = 0; i < 50; ++i) EXPECT_EQ(token_swap_corrupt(ids, 1.0, rng), ids);
  const std::vector<TokenId> with_specials{kBos, 9, kEos, kPad};
  for (int i = 0; i < 50; ++i) EXPECT_EQ(token_swap_corrupt(with_specials, 1.0, rng), with_specials);
}

TEST(Corruption, ForcedSwapOfFirstTwoPositions) {
  const std::vector<TokenId> abc{10, 11, 12};
  // Find a seed whose draw picks positions (0, 1), then check the result.
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng probe(seed);
    const auto swap = draw_swap(abc, 1.0, probe);
    ASSERT_TRUE(swap.has_value());
    if (*swap != std::pair<std::size_t, std::size_t>{0, 1}) continue;
    Rng rng(seed);
    EXPECT_EQ(token_swap_corrupt(abc, 1.0, rng), (std::vector<TokenId>{11, 10, 12}));
    return;
  }
  FAIL() << "no seed produced the (0, 1) swap";
}

TEST(Corruption, PermutationTouchingZeroOrTwoPositions) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    std::vector<TokenId> ids(1 + rng.below(12));
    for (auto& t : ids) t = static_cast<TokenId>(rng.below(10));  // specials and repeats included
    const auto out = token_swap_corrupt(ids, 0.5, rng);
    const std::size_t changed = positions_changed(ids, out);
    EXPECT_TRUE(changed == 0 || changed == 2);
    auto a = ids, b = out;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    for (std::size_t k = 0; k < ids.size(); ++k)
      if (is_special(ids[k]) && ids[k] != kUnk) EXPECT_EQ(out[k], ids[k]);
  }
}

TEST(Corruption, FiresAtRequestedRate) {
  Rng rng(2024);
  int altered = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto ids = distinct_ids(2 + rng.below(10));
    altered += token_swap_corrupt(ids, 0.5, rng) != ids;
  }
  const double rate = static_cast<double>(altered) / n;
  EXPECT_GE(rate, 0.48);
  EXPECT_LE(rate, 0.52);
}

TEST(Corruption, ZeroAndOneProbabilities) {
  Rng rng(8);
  const auto ids = distinct_ids(6);
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(token_swap_corrupt(ids, 0.0, rng), ids);
    EXPECT_EQ(positions_changed(ids, token_swap_corrupt(ids, 1.0, rng)), 2u);
  }
  EXPECT_THROW(token_swap_corrupt(ids, 1.5, rng), ParameterError);
}

TEST(LengthFilter, Examples) {
  ParallelCorpus c{{"a b c", "a b", "x"}, {"c b a", "b a", "y"}};
  const auto same = length_filter(c, 10);
  EXPECT_EQ(same.source, c.source);
  EXPECT_EQ(same.target, c.target);

  ParallelCorpus long_side{{"a b", "a b c d"}, {"b a", "d c b a"}};
  const auto f = length_filter(long_side, 3);
  EXPECT_EQ(f.source, std::vector<std::string>{"a b"});

  auto words = [](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += (i ? " w" : "w");
    return s;
  };
  ParallelCorpus ratio{{words(10), words(10)}, {words(16), words(15)}};
  const auto r = length_filter(ratio, 250, 1.5);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r.target[0], words(15));
  EXPECT_THROW(length_filter(c, 0), ParameterError);
}

TEST(Batching, SingleShortPairIsOneBatch) {
  const std::vector<EncodedPair> pairs{{{5, 6}, {6, 5, 7}}};
  Rng rng(0);
  const auto batches = make_batches(pairs, 16, rng, 0.5);
  ASSERT_EQ(batches.size(), 1u);
  const auto& b = batches[0];
  EXPECT_EQ(row_of(b.src, 0), (std::vector<TokenId>{5, 6, kEos}));
  EXPECT_EQ(row_of(b.tgt_in, 0), (std::vector<TokenId>{kBos, 6, 5, 7}));
  EXPECT_EQ(row_of(b.tgt_out, 0), (std::vector<TokenId>{6, 5, 7, kEos}));
}

TEST(Batching, BudgetTooSmallIsDataError) {
  const std::vector<EncodedPair> pairs{{{5, 6, 7, 8}, {5}}};
  Rng rng(0);
  EXPECT_THROW(make_batches(pairs, 4, rng, 0.0), DataError);
  EXPECT_NO_THROW(make_batches(pairs, 5, rng, 0.0));
}

TEST(Batching, BudgetAndCoverageOnRandomCorpora) {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<EncodedPair> pairs(1 + rng.below(200));
    for (auto& p : pairs) {
      p.src = distinct_ids(1 + rng.below(20));
      p.tgt = distinct_ids(1 + rng.below(20));
    }
    const std::size_t budget = 21 + rng.below(200);
    const auto batches = make_batches(pairs, budget, rng, 0.5);
    std::vector<int> seen(pairs.size(), 0);
    for (const auto& b : batches) {
      std::size_t cost = 0, real_tokens = 0;
      for (std::size_t i : b.indices) {
        cost += pair_cost(pairs[i]);
        ++seen[i];
      }
      for (const auto* t : {&b.src, &b.tgt_out}) real_tokens = std::max(real_tokens, t->non_pad());
      EXPECT_LE(cost, budget);
      EXPECT_LE(real_tokens, budget);
      EXPECT_GE(b.size(), 1u);
    }
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(Batching, CorruptedCopiesArePermutationsOfSource) {
  Rng rng(4);
  std::vector<EncodedPair> pairs(300);
  for (auto& p : pairs) {
    p.src = distinct_ids(1 + rng.below(10));
    p.tgt = p.src;
  }
  for (const auto& b : make_batches(pairs, 64, rng, 0.5)) {
    for (std::size_t r = 0; r < b.size(); ++r) {
      const auto src = row_of(b.src, r);
      for (const auto& copy : {row_of(b.src_left, r), row_of(b.src_right, r)}) {
        auto a = src, c = copy;
        std::sort(a.begin(), a.end());
        std::sort(c.begin(), c.end());
        EXPECT_EQ(a, c);
        EXPECT_EQ(copy.back(), src.back());  // EOS / padding stay put
      }
    }
  }
}

TEST(Batching, ZeroSwapProbabilityGivesIdenticalCopies) {
  Rng rng(9);
  std::vector<EncodedPair> pairs(50);
  for (auto& p : pairs) {
    p.src = distinct_ids(2 + rng.below(8));
    p.tgt = p.src;
  }
  for (const auto& b : make_batches(pairs, 40, rng, 0.0)) {
    EXPECT_EQ(b.src_left.ids, b.src.ids);
    EXPECT_EQ(b.src_right.ids, b.src.ids);
  }
}

TEST(Batching, BranchCorruptionsAreIndependent) {
  Rng rng(31);
  std::vector<EncodedPair> pairs(5000);
  for (auto& p : pairs) {
    p.src = distinct_ids(3 + rng.below(8));
    p.tgt = p.src;
  }
  std::size_t rows = 0, left = 0, right = 0, both = 0;
  for (const auto& b : make_batches(pairs, 200, rng, 0.5)) {
    for (std::size_t r = 0; r < b.size(); ++r) {
      const bool l = row_of(b.src_left, r) != row_of(b.src, r);
      const bool rr = row_of(b.src_right, r) != row_of(b.src, r);
      ++rows;
      left += l;
      right += rr;
      both += l && rr;
    }
  }
  EXPECT_NEAR(static_cast<double>(left) / rows, 0.5, 0.03);
  EXPECT_NEAR(static_cast<double>(right) / rows, 0.5, 0.03);
  EXPECT_NEAR(static_cast<double>(both) / rows, 0.25, 0.03);
}

TEST(Batching, SameSeedSameBatches) {
  std::vector<EncodedPair> pairs(100);
  Rng gen(12);
  for (auto& p : pairs) {
    p.src = distinct_ids(1 + gen.below(12));
    p.tgt = distinct_ids(1 + gen.below(12));
  }
  Rng a(5), b(5);
  const auto x = make_batches(pairs, 50, a, 0.5);
  const auto y = make_batches(pairs, 50, b, 0.5);
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].indices, y[i].indices);
    EXPECT_EQ(x[i].src_left.ids, y[i].src_left.ids);
    EXPECT_EQ(x[i].src_right.ids, y[i].src_right.ids);
  }
}

TEST(Synthetic, TaskTransforms) {
  Rng rng(0);
  for (auto task : {SyntheticTask::Copy, SyntheticTask::Reverse, SyntheticTask::Sort}) {
    Rng r(1);
    const auto c = gen_synthetic(task, 20, 300, {3, 12}, r);
    ASSERT_EQ(c.size(), 300u);
    for (std::size_t i = 0; i < c.size(); ++i) {
      auto src = split_words(c.source[i]);
      const auto tgt = split_words(c.target[i]);
      EXPECT_GE(src.size(), 3u);
      EXPECT_LE(src.size(), 12u);
      if (task == SyntheticTask::Reverse) std::reverse(src.begin(), src.end());
      if (task == SyntheticTask::Sort) std::sort(src.begin(), src.end());
      EXPECT_EQ(src, tgt);
    }
  }
  EXPECT_EQ(parse_task("reverse"), SyntheticTask::Reverse);
  EXPECT_EQ(task_name(SyntheticTask::Sort), "sort");
  EXPECT_THROW(parse_task("shuffle"), ParameterError);
  EXPECT_THROW(gen_synthetic(SyntheticTask::Copy, 4, 1, {1, 2}, rng), ParameterError);
}

TEST(Synthetic, SymbolInventoryFitsVocabulary) {
  Rng rng(2);
  const auto c = gen_synthetic(SyntheticTask::Copy, 20, 2000, {3, 12}, rng);
  std::set<std::string> symbols;
  for (const auto& s : c.source)
    for (const auto& w : split_words(s)) symbols.insert(w);
  EXPECT_EQ(symbols.size(), 16u);
  EXPECT_EQ(base_vocab_size(c.source), 20u);
  EXPECT_EQ(synthetic_symbol(0), "a");
  EXPECT_EQ(synthetic_symbol(27), "b1");
}

TEST(Corpus, ParallelReadRejectsMismatchedSides) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto src = (dir / "thm_src.txt").string(), tgt = (dir / "thm_tgt.txt").string();
  write_lines(src, std::vector<std::string>{"a b", "c"});
  write_lines(tgt, std::vector<std::string>{"b a"});
  EXPECT_THROW(read_parallel(src, tgt), DataError);
  write_lines(tgt, std::vector<std::string>{"b a", "c"});
  const auto c = read_parallel(src, tgt);
  EXPECT_EQ(c.target[1], "c");
  std::filesystem::remove(src);
  std::filesystem::remove(tgt);
  EXPECT_THROW(read_lines((dir / "thm_missing_file.txt").string()), DataError);
}
