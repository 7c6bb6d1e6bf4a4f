#pragma once

#include "thm/graph.hpp"

namespace thm {

// Special tokens occupy the four lowest ids of every vocabulary.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kNumSpecial = 4;

inline bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

/// Row-major matrix of padded token ids, one sequence per row.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> ids;             // batch × length, kPad beyond each row's length
  std::vector<std::size_t> lengths;     // non-pad length of each row

  std::span<const TokenId> row(std::size_t b) const {
    return std::span<const TokenId>(ids).subspan(b * length, length);
  }
  std::size_t non_pad() const;

  /// Pads `rows` to the longest one.
  static TokenBatch from_rows(const std::vector<std::vector<TokenId>>& rows);
};

}  // namespace thm
