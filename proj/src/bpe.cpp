#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>

#include "thm/data.hpp"
#include "thm/errors.hpp"

namespace thm {

namespace {

const std::string kSpecialNames[] = {"<pad>", "<s>", "</s>", "<unk>"};
constexpr std::string_view kMergesSentinel = "#merges";

bool continues(std::string_view s) { return s.ends_with(kContinuation); }

// Merges every left-to-right, non-overlapping occurrence of (a, b).
void merge_pair(std::vector<std::string>& symbols, const std::string& a, const std::string& b,
                const std::string& merged) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == a && symbols[i + 1] == b) {
      out.push_back(merged);
      ++i;
    } else {
      out.push_back(std::move(symbols[i]));
    }
  }
  symbols = std::move(out);
}

}  // namespace

std::vector<std::string> split_words(std::string_view sentence) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < sentence.size()) {
    while (i < sentence.size() && std::isspace(static_cast<unsigned char>(sentence[i]))) ++i;
    std::size_t j = i;
    while (j < sentence.size() && !std::isspace(static_cast<unsigned char>(sentence[j]))) ++j;
    if (j > i) words.emplace_back(sentence.substr(i, j - i));
    i = j;
  }
  return words;
}

namespace {
// Length in bytes of the UTF-8 sequence starting with `lead`.
std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;
}
}  // namespace

std::vector<std::string> word_symbols(std::string_view word) {
  std::vector<std::string> symbols;
  std::size_t i = 0;
  while (i < word.size()) {
    const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    symbols.emplace_back(word.substr(i, n));
    i += n;
  }
  for (std::size_t k = 0; k + 1 < symbols.size(); ++k) symbols[k] += kContinuation;
  return symbols;
}

std::string merge_symbols(const std::string& left, const std::string& right) {
  return left.substr(0, left.size() - kContinuation.size()) + right;
}

BpeModel::BpeModel(std::vector<std::string> base,
                   std::vector<std::pair<std::string, std::string>> merges)
    : base_(std::move(base)), merges_(std::move(merges)) {
  std::sort(base_.begin(), base_.end());
  base_.erase(std::unique(base_.begin(), base_.end()), base_.end());
  auto add = [&](const std::string& s) {
    if (index_.count(s)) return;
    index_.emplace(s, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(s);
  };
  for (const auto& s : kSpecialNames) add(s);
  for (const auto& s : base_) add(s);
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    const auto& [a, b] = merges_[r];
    if (!continues(a)) {
      throw DataError("bpe: merge '" + a + " " + b + "' has a word-final left symbol");
    }
    rank_.emplace(merges_[r], r);
    add(merge_symbols(a, b));
  }
}

const std::string& BpeModel::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId BpeModel::id(std::string_view symbol) const {
  const auto it = index_.find(symbol);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::string> BpeModel::segment(std::string_view sentence) const {
  std::vector<std::string> out;
  for (const auto& word : split_words(sentence)) {
    auto symbols = word_symbols(word);
    while (symbols.size() > 1) {
      std::size_t best = SIZE_MAX;
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        const auto it = rank_.find({symbols[i], symbols[i + 1]});
        if (it != rank_.end()) best = std::min(best, it->second);
      }
      if (best == SIZE_MAX) break;
      const auto& [a, b] = merges_[best];
      merge_pair(symbols, a, b, merge_symbols(a, b));
    }
    for (auto& s : symbols) out.push_back(std::move(s));
  }
  return out;
}

std::string BpeModel::decode(std::span<const TokenId> ids) const {
  std::string out;
  bool continuing = false;
  for (TokenId id : ids) {
    if (is_special(id) && id != kUnk) continue;
    std::string_view piece = token(id);
    if (!out.empty() && !continuing) out += ' ';
    continuing = continues(piece);
    if (continuing) piece.remove_suffix(kContinuation.size());
    out += piece;
  }
  return out;
}

void BpeModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& s : base_) os << s << '\n';
  os << kMergesSentinel << '\n';
  for (const auto& [a, b] : merges_) os << a << ' ' << b << '\n';
  if (!os) throw DataError("failed writing '" + path + "'");
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open BPE model '" + path + "'");
  std::vector<std::string> base;
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  bool in_merges = false;
  while (std::getline(is, line)) {
    if (!in_merges) {
      if (line == kMergesSentinel) {
        in_merges = true;
      } else if (!line.empty()) {
        base.push_back(line);
      }
      continue;
    }
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw DataError("BPE model '" + path + "': bad merge '" + line + "'");
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  if (!in_merges) throw DataError("BPE model '" + path + "': missing #merges sentinel");
  return BpeModel(std::move(base), std::move(merges));
}

namespace {

std::map<std::string, std::size_t> word_counts(std::span<const std::string> sentences) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : sentences) {
    for (auto& w : split_words(s)) ++counts[w];
  }
  return counts;
}

}  // namespace

std::size_t base_vocab_size(std::span<const std::string> sentences) {
  std::set<std::string> base;
  for (const auto& [w, n] : word_counts(sentences)) {
    for (auto& s : word_symbols(w)) base.insert(s);
  }
  return static_cast<std::size_t>(kNumSpecial) + base.size();
}

BpeModel learn_bpe(std::span<const std::string> sentences, std::size_t target_vocab_size) {
  const auto counts = word_counts(sentences);
  if (counts.empty()) throw DataError("learn_bpe: corpus holds no words");

  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  std::set<std::string> vocab;
  for (const auto& [w, n] : counts) {
    words.emplace_back(word_symbols(w), n);
    for (const auto& s : words.back().first) vocab.insert(s);
  }
  std::vector<std::string> base(vocab.begin(), vocab.end());
  const std::size_t min_size = static_cast<std::size_t>(kNumSpecial) + base.size();
  if (target_vocab_size < min_size) {
    throw ParameterError("learn_bpe: target vocabulary " + std::to_string(target_vocab_size) +
                         " is below the base size " + std::to_string(min_size));
  }

  std::vector<std::pair<std::string, std::string>> merges;
  std::size_t size = min_size;
  while (size < target_vocab_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [symbols, n] : words) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pairs[{symbols[i], symbols[i + 1]}] += n;
    }
    if (pairs.empty()) break;
    // std::map iterates pairs in lexicographic order, so the first maximum
    // found is the lexicographically smallest among ties.
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [a, b] = best->first;
    const std::string merged = merge_symbols(a, b);
    for (auto& [symbols, n] : words) merge_pair(symbols, a, b, merged);
    merges.emplace_back(a, b);
    if (vocab.insert(merged).second) ++size;
  }
  return BpeModel(std::move(base), std::move(merges));
}

BpeModel learn_bpe(const ParallelCorpus& corpus, std::size_t target_vocab_size) {
  std::vector<std::string> all = corpus.source;
  all.insert(all.end(), corpus.target.begin(), corpus.target.end());
  return learn_bpe(all, target_vocab_size);
}

std::vector<TokenId> apply_bpe(const BpeModel& model, std::string_view sentence) {
  std::vector<TokenId> ids;
  for (const auto& s : model.segment(sentence)) ids.push_back(model.id(s));
  return ids;
}

}  // namespace thm
