#include <algorithm>
#include <fstream>
#include <numeric>

#include "thm/data.hpp"
#include "thm/errors.hpp"

namespace thm {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::string& path, std::span<const std::string> lines) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& l : lines) os << l << '\n';
  if (!os) throw DataError("failed writing '" + path + "'");
}

ParallelCorpus read_parallel(const std::string& src_path, const std::string& tgt_path) {
  ParallelCorpus c{read_lines(src_path), read_lines(tgt_path)};
  if (c.source.size() != c.target.size()) {
    throw DataError("parallel corpus sides differ: " + std::to_string(c.source.size()) +
                    " source lines vs " + std::to_string(c.target.size()) + " target lines");
  }
  return c;
}

void write_parallel(const ParallelCorpus& corpus, const std::string& src_path,
                    const std::string& tgt_path) {
  write_lines(src_path, corpus.source);
  write_lines(tgt_path, corpus.target);
}

// ---- corruption ------------------------------------------------------------

std::vector<std::size_t> swap_candidates(std::span<const TokenId> ids) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!is_special(ids[i]) || ids[i] == kUnk) out.push_back(i);
  }
  return out;
}

std::optional<std::pair<std::size_t, std::size_t>> draw_swap(std::span<const TokenId> ids,
                                                              double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("token swap probability must lie in [0, 1]");
  const bool fire = rng.uniform() < p;
  const auto cand = swap_candidates(ids);
  if (!fire || cand.size() < 2) return std::nullopt;
  const std::size_t a = rng.below(cand.size());
  std::size_t b = rng.below(cand.size() - 1);
  if (b >= a) ++b;
  return std::pair{cand[std::min(a, b)], cand[std::max(a, b)]};
}

std::vector<TokenId> token_swap_corrupt(std::span<const TokenId> ids, double p, Rng& rng) {
  std::vector<TokenId> out(ids.begin(), ids.end());
  if (const auto swap = draw_swap(ids, p, rng)) std::swap(out[swap->first], out[swap->second]);
  return out;
}

// ---- filtering and batching ------------------------------------------------

ParallelCorpus length_filter(const ParallelCorpus& corpus, std::size_t max_len,
                             double ratio_limit) {
  if (max_len == 0) throw ParameterError("length_filter: max_len must be at least 1");
  ParallelCorpus out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const double s = static_cast<double>(split_words(corpus.source[i]).size());
    const double t = static_cast<double>(split_words(corpus.target[i]).size());
    if (s == 0 || t == 0) continue;
    if (s > static_cast<double>(max_len) || t > static_cast<double>(max_len)) continue;
    if (std::max(s, t) / std::min(s, t) > ratio_limit) continue;
    out.source.push_back(corpus.source[i]);
    out.target.push_back(corpus.target[i]);
  }
  return out;
}

std::vector<EncodedPair> encode_corpus(const ParallelCorpus& corpus, const BpeModel& bpe) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out.push_back({apply_bpe(bpe, corpus.source[i]), apply_bpe(bpe, corpus.target[i])});
  }
  return out;
}

std::size_t pair_cost(const EncodedPair& pair) {
  return std::max(pair.src.size(), pair.tgt.size()) + 1;
}

std::vector<Batch> make_batches(std::span<const EncodedPair> pairs, std::size_t token_budget,
                                Rng& rng, double swap_prob, bool shuffle) {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i : order) {
    if (pair_cost(pairs[i]) > token_budget) {
      throw DataError("sentence pair " + std::to_string(i) + " needs " +
                      std::to_string(pair_cost(pairs[i])) + " tokens, above the budget of " +
                      std::to_string(token_budget));
    }
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ka = std::pair{pairs[a].src.size(), pairs[a].tgt.size()};
    const auto kb = std::pair{pairs[b].src.size(), pairs[b].tgt.size()};
    return ka < kb;
  });

  std::vector<std::vector<std::size_t>> groups;
  std::size_t used = 0;
  for (std::size_t i : order) {
    const std::size_t cost = pair_cost(pairs[i]);
    if (groups.empty() || used + cost > token_budget) {
      groups.emplace_back();
      used = 0;
    }
    groups.back().push_back(i);
    used += cost;
  }
  if (shuffle) {
    for (std::size_t i = groups.size(); i > 1; --i) std::swap(groups[i - 1], groups[rng.below(i)]);
  }

  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (auto& g : groups) {
    std::vector<std::vector<TokenId>> src, left, right, tin, tout;
    for (std::size_t i : g) {
      std::vector<TokenId> s = pairs[i].src;
      s.push_back(kEos);
      left.push_back(token_swap_corrupt(s, swap_prob, rng));
      right.push_back(token_swap_corrupt(s, swap_prob, rng));
      src.push_back(std::move(s));
      std::vector<TokenId> ti{kBos};
      ti.insert(ti.end(), pairs[i].tgt.begin(), pairs[i].tgt.end());
      std::vector<TokenId> to = pairs[i].tgt;
      to.push_back(kEos);
      tin.push_back(std::move(ti));
      tout.push_back(std::move(to));
    }
    batches.push_back({TokenBatch::from_rows(src), TokenBatch::from_rows(left),
                       TokenBatch::from_rows(right), TokenBatch::from_rows(tin),
                       TokenBatch::from_rows(tout), std::move(g)});
  }
  return batches;
}

std::vector<Batch> make_batches(const ParallelCorpus& corpus, const BpeModel& bpe,
                                std::size_t token_budget, Rng& rng, double swap_prob) {
  const auto encoded = encode_corpus(corpus, bpe);
  return make_batches(encoded, token_budget, rng, swap_prob);
}

// ---- synthetic tasks ---------------------------------------------------------

SyntheticTask parse_task(std::string_view name) {
  if (name == "copy") return SyntheticTask::Copy;
  if (name == "reverse") return SyntheticTask::Reverse;
  if (name == "sort") return SyntheticTask::Sort;
  throw ParameterError("unknown task '" + std::string(name) + "' (copy|reverse|sort)");
}

std::string_view task_name(SyntheticTask task) {
  switch (task) {
    case SyntheticTask::Copy: return "copy";
    case SyntheticTask::Reverse: return "reverse";
    case SyntheticTask::Sort: return "sort";
  }
  return "?";
}

std::string synthetic_symbol(std::size_t i) {
  std::string s(1, static_cast<char>('a' + i % 26));
  if (i >= 26) s += std::to_string(i / 26);
  return s;
}

ParallelCorpus gen_synthetic(SyntheticTask task, std::size_t vocab_size, std::size_t n_pairs,
                             std::pair<std::size_t, std::size_t> len_range, Rng& rng) {
  if (vocab_size < 5) throw ParameterError("gen_synthetic: vocab_size must be at least 5");
  const auto [lo, hi] = len_range;
  if (lo == 0 || lo > hi) throw ParameterError("gen_synthetic: invalid length range");
  const std::size_t symbols = vocab_size - static_cast<std::size_t>(kNumSpecial);
  ParallelCorpus c;
  c.source.reserve(n_pairs);
  c.target.reserve(n_pairs);
  auto join = [](const std::vector<std::size_t>& idx) {
    std::string s;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (k) s += ' ';
      s += synthetic_symbol(idx[k]);
    }
    return s;
  };
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const std::size_t n = lo + rng.below(hi - lo + 1);
    std::vector<std::size_t> src(n);
    for (auto& x : src) x = rng.below(symbols);
    std::vector<std::size_t> tgt = src;
    if (task == SyntheticTask::Reverse) std::reverse(tgt.begin(), tgt.end());
    if (task == SyntheticTask::Sort) std::sort(tgt.begin(), tgt.end());
    c.source.push_back(join(src));
    c.target.push_back(join(tgt));
  }
  return c;
}

}  // namespace thm
