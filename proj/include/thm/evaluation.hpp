#pragma once

// Greedy and beam decoding over a step scorer, plus corpus-level BLEU.

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "thm/data.hpp"
#include "thm/model.hpp"

namespace thm {

/// Next-token log-probabilities (one row of vocab_size entries) for each
/// BOS-less prefix in `prefixes`.
using StepScorer =
    std::function<std::vector<std::vector<double>>(const std::vector<std::vector<TokenId>>& prefixes)>;

/// Scores prefixes against one clean source sentence (EOS included), with
/// both encoder branches reading the same tokens. Encodes once.
StepScorer model_scorer(const Model& model, std::span<const TokenId> src);

struct Hypothesis {
  std::vector<TokenId> tokens;  // EOS excluded
  double log_prob = 0.0;        // always includes the EOS score
                                // (forced at max_len when not finished)
  bool finished = false;
};

/// Appends the highest-scoring token (lowest id among ties) until EOS or
/// `max_len` output tokens. PAD and BOS are never emitted.
Hypothesis greedy_decode(const StepScorer& scorer, std::size_t max_len);
std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> src,
                                   std::size_t max_len);

/// Beam search ranking finished hypotheses by log_prob / (length + 1)^alpha.
/// The greedy path always enters the finished pool, so the result never
/// scores below greedy decoding under the same ranking.
Hypothesis beam_search(const StepScorer& scorer, std::size_t beam, std::size_t max_len,
                       double length_penalty_alpha);
std::vector<TokenId> beam_search(const Model& model, std::span<const TokenId> src,
                                 std::size_t beam, std::size_t max_len,
                                 double length_penalty_alpha);

/// Greedy decoding of many sources at once, `batch_size` sentences per
/// forward pass. Identical outputs to the per-sentence version.
std::vector<std::vector<TokenId>> greedy_decode_batch(const Model& model,
                                                      const std::vector<std::vector<TokenId>>& srcs,
                                                      std::size_t max_len,
                                                      std::size_t batch_size = 64);

// ---- BLEU --------------------------------------------------------------------

inline constexpr std::size_t kBleuOrder = 4;

struct BleuStats {
  std::array<std::size_t, kBleuOrder> matches{};  // clipped n-gram matches
  std::array<std::size_t, kBleuOrder> totals{};   // hypothesis n-grams
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
  std::size_t max_hyp_len = 0;

  BleuStats& operator+=(const BleuStats& other);
};

BleuStats sentence_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref);

/// Score in [0, 100] from accumulated statistics. Orders above the longest
/// hypothesis are skipped; any zero precision among the rest gives 0.
double bleu_from_stats(const BleuStats& stats);

/// Whitespace-tokenized corpus BLEU-4 without smoothing. Throws DataError on
/// an empty or mismatched set.
double corpus_bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references);

// ---- model-level metrics -----------------------------------------------------

/// Teacher-forced argmax accuracy over target tokens plus EOS.
double token_accuracy(const Model& model, std::span<const EncodedPair> pairs,
                      std::size_t batch_size = 64);

/// Greedy-decodes every source, de-segments with `bpe` and scores against the
/// de-segmented references.
double corpus_bleu(const Model& model, const BpeModel& bpe, std::span<const EncodedPair> pairs,
                   std::size_t max_extra_len = 10);

}  // namespace thm
