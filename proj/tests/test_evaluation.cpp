#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "thm/errors.hpp"
#include "thm/evaluation.hpp"

using namespace thm;

namespace {

std::vector<double> log_normalize(std::vector<double> p) {
  double s = 0.0;
  for (double v : p) s += v;
  for (double& v : p) v = std::log(v / s);
  return p;
}

// Deterministic pseudo-random next-token distribution per prefix.
StepScorer random_scorer(std::uint64_t seed, std::size_t vocab) {
  return [=](const std::vector<std::vector<TokenId>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::uint64_t h = seed;
      for (TokenId t : p) {
        std::uint64_t state = h ^ static_cast<std::uint64_t>(t + 1);
        h = splitmix64(state);
      }
      Rng rng(h);
      std::vector<double> probs(vocab);
      for (double& v : probs) v = 0.05 + rng.uniform();
      out.push_back(log_normalize(probs));
    }
    return out;
  };
}

double path_score(const StepScorer& scorer, const std::vector<TokenId>& tokens, bool ends) {
  double s = 0.0;
  std::vector<TokenId> prefix;
  for (TokenId t : tokens) {
    s += scorer({prefix})[0][static_cast<std::size_t>(t)];
    prefix.push_back(t);
  }
  if (ends) s += scorer({prefix})[0][kEos];
  return s;
}

// Every output the decoder could produce: sequences of up to max_len tokens,
// each closed by the EOS score.
Hypothesis exhaustive_best(const StepScorer& scorer, std::size_t vocab, std::size_t max_len,
                           double alpha) {
  Hypothesis best;
  double best_score = -INFINITY;
  std::function<void(std::vector<TokenId>&)> walk = [&](std::vector<TokenId>& seq) {
    auto consider = [&](bool ends) {
      const double lp = path_score(scorer, seq, ends);
      const double score = lp / std::pow(static_cast<double>(seq.size() + 1), alpha);
      if (score > best_score) {
        best_score = score;
        best = {seq, lp, ends};
      }
    };
    consider(true);
    if (seq.size() == max_len) return;
    for (TokenId t = kEos + 1; t < static_cast<TokenId>(vocab); ++t) {
      seq.push_back(t);
      walk(seq);
      seq.pop_back();
    }
  };
  std::vector<TokenId> seq;
  walk(seq);
  return best;
}

// Independent BLEU: n-gram counts by linear scanning, no maps.
double oracle_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  std::size_t match[4] = {}, total[4] = {}, c = 0, r = 0, longest = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = split_words(hyps[s]);
    const auto f = split_words(refs[s]);
    c += h.size();
    r += f.size();
    longest = std::max(longest, h.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      auto same = [&](const std::vector<std::string>& a, std::size_t i,
                      const std::vector<std::string>& b, std::size_t j) {
        for (std::size_t k = 0; k < n; ++k)
          if (a[i + k] != b[j + k]) return false;
        return true;
      };
      for (std::size_t i = 0; i + n <= h.size(); ++i) {
        ++total[n - 1];
        bool first = true;
        for (std::size_t j = 0; j < i; ++j) first = first && !same(h, i, h, j);
        if (!first) continue;
        std::size_t in_h = 0, in_r = 0;
        for (std::size_t j = 0; j + n <= h.size(); ++j) in_h += same(h, i, h, j);
        for (std::size_t j = 0; j + n <= f.size(); ++j) in_r += same(h, i, f, j);
        match[n - 1] += std::min(in_h, in_r);
      }
    }
  }
  const std::size_t order = std::min<std::size_t>(4, longest);
  if (order == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < order; ++n) {
    if (match[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(match[n]) / static_cast<double>(total[n]));
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return 100.0 * bp * std::exp(log_p / static_cast<double>(order));
}

std::vector<std::string> random_corpus(Rng& rng, std::size_t n, std::size_t words) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string s;
    const std::size_t len = rng.below(12);
    for (std::size_t k = 0; k < len; ++k) {
      if (k) s += ' ';
      s += synthetic_symbol(rng.below(words));
    }
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(Bleu, IdentityScoresHundred) {
  EXPECT_DOUBLE_EQ(corpus_bleu({"a b c d e"}, {"a b c d e"}), 100.0);
  // Short sentences: orders above the longest hypothesis are skipped.
  EXPECT_DOUBLE_EQ(corpus_bleu({"a b", "c"}, {"a b", "c"}), 100.0);
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    auto c = random_corpus(rng, 15, 6);
    c.push_back("x");
    EXPECT_DOUBLE_EQ(corpus_bleu(c, c), 100.0);
  }
}

TEST(Bleu, NoSharedUnigramScoresZero) {
  EXPECT_EQ(corpus_bleu({"a b c d"}, {"e f g h"}), 0.0);
}

TEST(Bleu, ClippedUnigramsOnRepeatedWord) {
  const auto s = sentence_stats(split_words("the the the the the the the"),
                                split_words("the cat is on the mat"));
  EXPECT_EQ(s.matches[0], 2u);
  EXPECT_EQ(s.totals[0], 7u);
  EXPECT_EQ(s.matches[1], 0u);
  EXPECT_EQ(s.totals[1], 6u);
  // No bigram matches, so the unsmoothed score collapses to zero.
  EXPECT_EQ(corpus_bleu({"the the the the the the the"}, {"the cat is on the mat"}), 0.0);
}

TEST(Bleu, HandComputedScore) {
  // hyp 5 words, ref 6: p1 = 4/5, p2 = 2/4, p3 = 1/3, p4 = 0/2 -> 0.
  EXPECT_EQ(corpus_bleu({"the cat sat on mat"}, {"the cat sat near the mat"}), 0.0);
  // p1 = 7/7, p2 = 5/6, p3 = 3/5, p4 = 1/4; c = 7 < r = 8.
  const double expected =
      100.0 * std::exp(1.0 - 8.0 / 7.0) * std::pow(1.0 * (5.0 / 6) * (3.0 / 5) * (1.0 / 4), 0.25);
  EXPECT_NEAR(corpus_bleu({"a b c d x e f"}, {"a b c d y x e f"}), expected, 1e-12);
}

TEST(Bleu, MatchesBruteForceOracle) {
  Rng rng(42);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.below(20);
    const auto hyps = random_corpus(rng, n, 5);
    const auto refs = random_corpus(rng, n, 5);
    EXPECT_NEAR(corpus_bleu(hyps, refs), oracle_bleu(hyps, refs), 1e-9) << "corpus " << t;
  }
}

TEST(Bleu, JointPermutationInvariance) {
  Rng rng(3);
  auto hyps = random_corpus(rng, 30, 4);
  auto refs = random_corpus(rng, 30, 4);
  const double before = corpus_bleu(hyps, refs);
  for (std::size_t i = hyps.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(hyps[i - 1], hyps[j]);
    std::swap(refs[i - 1], refs[j]);
  }
  EXPECT_DOUBLE_EQ(corpus_bleu(hyps, refs), before);
}

TEST(Bleu, Errors) {
  EXPECT_THROW(corpus_bleu(std::vector<std::string>{}, std::vector<std::string>{}), DataError);
  EXPECT_THROW(corpus_bleu({"a"}, {"a", "b"}), DataError);
}

TEST(Greedy, EosFirstGivesEmptyOutput) {
  const StepScorer eos_first = [](const std::vector<std::vector<TokenId>>& p) {
    return std::vector<std::vector<double>>(p.size(), log_normalize({1, 1, 5, 1, 2, 2}));
  };
  const auto h = greedy_decode(eos_first, 10);
  EXPECT_TRUE(h.tokens.empty());
  EXPECT_TRUE(h.finished);
}

TEST(Greedy, NeverEmitsPadOrBosAndRespectsMaxLen) {
  const StepScorer pad_heavy = [](const std::vector<std::vector<TokenId>>& p) {
    return std::vector<std::vector<double>>(p.size(), log_normalize({9, 9, 1, 1, 3, 2}));
  };
  const auto h = greedy_decode(pad_heavy, 5);
  EXPECT_EQ(h.tokens, std::vector<TokenId>(5, 4));
  EXPECT_FALSE(h.finished);
  const auto lp = log_normalize({9, 9, 1, 1, 3, 2});
  EXPECT_NEAR(h.log_prob, 5 * lp[4] + lp[kEos], 1e-12);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto scorer = random_scorer(seed, 7);
    const auto a = greedy_decode(scorer, 6);
    EXPECT_LE(a.tokens.size(), 6u);
    EXPECT_EQ(a.tokens, greedy_decode(scorer, 6).tokens);
  }
}

TEST(Beam, WidthOneEqualsGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto scorer = random_scorer(seed, 8);
    const auto g = greedy_decode(scorer, 7);
    const auto b = beam_search(scorer, 1, 7, 0.0);
    EXPECT_EQ(b.tokens, g.tokens) << seed;
    EXPECT_EQ(b.log_prob, g.log_prob);
  }
}

TEST(Beam, FindsBestPathOnHandSetThreeStepModel) {
  // Vocabulary: specials, then tokens 4 and 5. Greedy takes 4 first, but the
  // best path is 5 5 EOS.
  const StepScorer scorer = [](const std::vector<std::vector<TokenId>>& prefixes) {
    std::vector<std::vector<double>> out;
    for (const auto& p : prefixes) {
      std::vector<double> probs{0, 0, 0.01, 0.01, 0.25, 0.25};
      if (p.empty()) probs = {0, 0, 0.01, 0.01, 0.58, 0.40};
      else if (p == std::vector<TokenId>{5}) probs = {0, 0, 0.02, 0.01, 0.01, 0.96};
      else if (p == std::vector<TokenId>{5, 5}) probs = {0, 0, 0.98, 0.01, 0.005, 0.005};
      else if (p.size() >= 2) probs = {0, 0, 0.33, 0.33, 0.17, 0.17};
      for (double& v : probs) v = std::max(v, 1e-12);
      out.push_back(log_normalize(probs));
    }
    return out;
  };
  const auto oracle = exhaustive_best(scorer, 6, 3, 0.0);
  EXPECT_EQ(oracle.tokens, (std::vector<TokenId>{5, 5}));
  const auto b = beam_search(scorer, 4, 3, 0.0);
  EXPECT_EQ(b.tokens, oracle.tokens);
  EXPECT_NEAR(b.log_prob, oracle.log_prob, 1e-12);
  EXPECT_NE(greedy_decode(scorer, 3).tokens, oracle.tokens);
}

TEST(Beam, WideBeamMatchesExhaustiveSearch) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto scorer = random_scorer(100 + seed, 6);
    for (double alpha : {0.0, 0.6}) {
      const auto oracle = exhaustive_best(scorer, 6, 3, alpha);
      const auto b = beam_search(scorer, 64, 3, alpha);
      EXPECT_EQ(b.tokens, oracle.tokens) << seed << " alpha " << alpha;
      EXPECT_NEAR(b.log_prob, oracle.log_prob, 1e-12);
    }
  }
}

TEST(Beam, NeverScoresBelowGreedy) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto scorer = random_scorer(500 + seed, 9);
    const auto g = greedy_decode(scorer, 8);
    for (std::size_t beam : {2u, 3u, 5u}) EXPECT_GE(beam_search(scorer, beam, 8, 0.0).log_prob, g.log_prob);
  }
  EXPECT_THROW(beam_search(random_scorer(0, 6), 0, 3, 0.0), ParameterError);
}

namespace {

Model small_model(Arch arch, std::uint64_t seed) {
  ModelConfig c = preset("tiny", 24);
  c.arch = arch;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.n_blocks = 1;
  return Model(c, seed);
}

}  // namespace

TEST(ModelDecoding, GreedyAgreesAcrossEntryPoints) {
  for (Arch arch : {Arch::THM, Arch::TransformerBaseline}) {
    const Model model = small_model(arch, 5);
    Rng rng(6);
    std::vector<std::vector<TokenId>> srcs;
    for (int i = 0; i < 7; ++i) {
      std::vector<TokenId> s(1 + rng.below(9));
      for (auto& t : s) t = static_cast<TokenId>(kNumSpecial + rng.below(20));
      s.push_back(kEos);
      srcs.push_back(s);
    }
    const auto batched = greedy_decode_batch(model, srcs, 12, 3);
    for (std::size_t i = 0; i < srcs.size(); ++i) {
      const auto single = greedy_decode(model, srcs[i], 12);
      EXPECT_EQ(batched[i], single);
      EXPECT_LE(single.size(), 12u);
      EXPECT_EQ(beam_search(model, srcs[i], 1, 12, 0.0), single);
      const auto scorer = model_scorer(model, srcs[i]);
      EXPECT_GE(beam_search(scorer, 4, 12, 0.0).log_prob, greedy_decode(scorer, 12).log_prob);
    }
  }
}

TEST(ModelDecoding, TokenAccuracyBounds) {
  const Model model = small_model(Arch::THM, 9);
  std::vector<EncodedPair> pairs{{{5, 6, 7}, {5, 6, 7}}, {{8}, {8}}};
  const double acc = token_accuracy(model, pairs);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  EXPECT_EQ(acc * 6, std::round(acc * 6));
  EXPECT_THROW(token_accuracy(model, std::vector<EncodedPair>{}), DataError);
}
