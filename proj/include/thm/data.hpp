#pragma once

// Corpus handling: subword vocabulary, token-swap corruption, length
// filtering, token-budget batching and synthetic transduction tasks.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "thm/rng.hpp"
#include "thm/tokens.hpp"

namespace thm {

/// Aligned source/target sentences, one per line in the files they come from.
struct ParallelCorpus {
  std::vector<std::string> source;
  std::vector<std::string> target;

  std::size_t size() const { return source.size(); }
};

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, std::span<const std::string> lines);
/// Throws DataError when the two files differ in line count.
ParallelCorpus read_parallel(const std::string& src_path, const std::string& tgt_path);
void write_parallel(const ParallelCorpus& corpus, const std::string& src_path,
                    const std::string& tgt_path);

std::vector<std::string> split_words(std::string_view sentence);

/// Marker carried by every subword that is not the last piece of its word.
inline constexpr std::string_view kContinuation = "@@";

/// Byte-pair vocabulary shared by source and target.
///
/// Ids: the four specials, then base symbols in sorted order, then merged
/// symbols in the order their merges were learned.
class BpeModel {
 public:
  BpeModel() = default;
  BpeModel(std::vector<std::string> base, std::vector<std::pair<std::string, std::string>> merges);

  const std::vector<std::string>& base_symbols() const noexcept { return base_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const noexcept {
    return merges_;
  }
  std::size_t vocab_size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  /// kUnk when `symbol` is not in the vocabulary.
  TokenId id(std::string_view symbol) const;

  /// Subword strings of one sentence, merges applied by learned priority.
  std::vector<std::string> segment(std::string_view sentence) const;
  /// Reverses segmentation: drops specials and joins continued pieces.
  std::string decode(std::span<const TokenId> ids) const;

  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);

 private:
  std::vector<std::string> base_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId, std::less<>> index_;
  std::map<std::pair<std::string, std::string>, std::size_t> rank_;
};

/// Initial symbols of a word: every character but the last carries the
/// continuation marker.
std::vector<std::string> word_symbols(std::string_view word);
/// Joins a pair produced by a merge: "ab@@" + "c" -> "abc".
std::string merge_symbols(const std::string& left, const std::string& right);

/// Greedy most-frequent-pair merging over the words of `sentences` until the
/// vocabulary (specials included) reaches `target_vocab_size` or no pair is
/// left. Ties go to the lexicographically smallest pair.
BpeModel learn_bpe(std::span<const std::string> sentences, std::size_t target_vocab_size);
BpeModel learn_bpe(const ParallelCorpus& corpus, std::size_t target_vocab_size);
/// Smallest admissible target: specials plus base symbols of the corpus.
std::size_t base_vocab_size(std::span<const std::string> sentences);

std::vector<TokenId> apply_bpe(const BpeModel& model, std::string_view sentence);

// ---- corruption ------------------------------------------------------------

/// Positions a swap may touch: every non-special token.
std::vector<std::size_t> swap_candidates(std::span<const TokenId> ids);

/// With probability p picks two distinct candidate positions uniformly.
/// Always consumes one uniform draw for the event itself.
std::optional<std::pair<std::size_t, std::size_t>> draw_swap(std::span<const TokenId> ids,
                                                              double p, Rng& rng);

/// One swap event at most: with probability p exchange two distinct
/// non-special tokens; otherwise return the input unchanged.
std::vector<TokenId> token_swap_corrupt(std::span<const TokenId> ids, double p, Rng& rng);

// ---- filtering and batching ------------------------------------------------

/// Drops pairs with an empty side, a side longer than `max_len` words, or a
/// longer/shorter length ratio above `ratio_limit`.
ParallelCorpus length_filter(const ParallelCorpus& corpus, std::size_t max_len,
                             double ratio_limit = 1.5);

/// Sentence pair as subword ids, without BOS/EOS.
struct EncodedPair {
  std::vector<TokenId> src;
  std::vector<TokenId> tgt;
};

std::vector<EncodedPair> encode_corpus(const ParallelCorpus& corpus, const BpeModel& bpe);

struct Batch {
  TokenBatch src;        // tokens + EOS
  TokenBatch src_left;   // independently corrupted copies of src
  TokenBatch src_right;
  TokenBatch tgt_in;     // BOS + tokens
  TokenBatch tgt_out;    // tokens + EOS
  std::vector<std::size_t> indices;  // positions in the encoded corpus

  std::size_t size() const { return indices.size(); }
};

/// Budget units of one pair: max(|src| + 1, |tgt| + 1).
std::size_t pair_cost(const EncodedPair& pair);

/// Length-bucketed batches whose summed pair costs stay within
/// `token_budget`, visited in an order shuffled by `rng`. Each batch carries
/// two corrupted source copies drawn independently from `rng`.
std::vector<Batch> make_batches(std::span<const EncodedPair> pairs, std::size_t token_budget,
                                Rng& rng, double swap_prob, bool shuffle = true);
std::vector<Batch> make_batches(const ParallelCorpus& corpus, const BpeModel& bpe,
                                std::size_t token_budget, Rng& rng, double swap_prob);

// ---- synthetic tasks ---------------------------------------------------------

enum class SyntheticTask { Copy, Reverse, Sort };

SyntheticTask parse_task(std::string_view name);
std::string_view task_name(SyntheticTask task);

/// Name of the i-th content symbol: a, b, ..., z, a1, b1, ...
std::string synthetic_symbol(std::size_t i);

/// Uniform random sources over vocab_size - 4 content symbols with lengths in
/// [min_len, max_len]; targets are the task's transform of the source.
ParallelCorpus gen_synthetic(SyntheticTask task, std::size_t vocab_size, std::size_t n_pairs,
                             std::pair<std::size_t, std::size_t> len_range, Rng& rng);

}  // namespace thm
