#include "thm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "thm/errors.hpp"

namespace thm {

namespace {

bool emittable(TokenId t) { return t != kPad && t != kBos; }

std::size_t argmax_token(std::span<const double> row) {
  std::size_t best = SIZE_MAX;
  for (std::size_t t = 0; t < row.size(); ++t) {
    if (!emittable(static_cast<TokenId>(t))) continue;
    if (best == SIZE_MAX || row[t] > row[best]) best = t;
  }
  if (best == SIZE_MAX) throw VocabError("no emittable token in a vocabulary of " +
                                         std::to_string(row.size()));
  return best;
}

std::vector<double> log_softmax_row(const double* x, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - lse;
  return out;
}

// Repeats every sequence's rows of a (batch·length × d) memory `times` times.
Tensor tile_memory(const Tensor& mem, std::size_t times) {
  const std::size_t rows = mem.rows(), d = mem.cols();
  Tensor out({rows * times, d});
  for (std::size_t k = 0; k < times; ++k) {
    std::copy(mem.values().begin(), mem.values().end(),
              out.values().begin() + static_cast<long>(k * rows * d));
  }
  return out;
}

std::size_t decode_limit(const Model& model, std::size_t max_len) {
  // BOS plus max_len tokens must fit the positional range.
  return std::min(max_len, model.config().max_len - 1);
}

std::vector<TokenId> with_eos(std::span<const TokenId> ids) {
  std::vector<TokenId> out(ids.begin(), ids.end());
  out.push_back(kEos);
  return out;
}

std::vector<TokenId> with_bos(std::span<const TokenId> ids) {
  std::vector<TokenId> out{kBos};
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

}  // namespace

StepScorer model_scorer(const Model& model, std::span<const TokenId> src) {
  if (src.empty()) throw LengthError("decode: empty source sentence");
  const TokenBatch batch = TokenBatch::from_rows({std::vector<TokenId>(src.begin(), src.end())});
  EncoderMemory memory;
  {
    NoGradGuard guard;
    Rng rng(0);
    memory = model.encode(EncoderInput::clean(batch), rng, false);
  }
  const bool shared = memory.left.node() == memory.right.node();
  const std::size_t vocab = model.config().vocab_size;
  return [&model, memory, shared, vocab](const std::vector<std::vector<TokenId>>& prefixes) {
    NoGradGuard guard;
    Rng rng(0);
    const std::size_t k = prefixes.size();
    EncoderMemory mem = memory;
    mem.batch = k;
    mem.lengths.assign(k, memory.length);
    mem.left = Var::constant(tile_memory(memory.left.value(), k));
    mem.right = shared ? mem.left : Var::constant(tile_memory(memory.right.value(), k));
    std::vector<std::vector<TokenId>> rows;
    rows.reserve(k);
    for (const auto& p : prefixes) rows.push_back(with_bos(p));
    const TokenBatch tgt = TokenBatch::from_rows(rows);
    const Var logits = model.decode(mem, tgt, rng, false);
    std::vector<std::vector<double>> out;
    out.reserve(k);
    for (std::size_t b = 0; b < k; ++b) {
      const std::size_t r = b * tgt.length + prefixes[b].size();
      out.push_back(log_softmax_row(logits.value().data() + r * vocab, vocab));
    }
    return out;
  };
}

Hypothesis greedy_decode(const StepScorer& scorer, std::size_t max_len) {
  Hypothesis h;
  while (true) {
    const auto scores = scorer({h.tokens}).at(0);
    const auto t = static_cast<TokenId>(argmax_token(scores));
    if (t == kEos) {
      h.log_prob += scores[static_cast<std::size_t>(t)];
      h.finished = true;
      return h;
    }
    if (h.tokens.size() == max_len) {
      // Truncated: closed with the end-of-sentence score so that it ranks
      // against finished hypotheses on equal terms.
      h.log_prob += scores[kEos];
      return h;
    }
    h.log_prob += scores[static_cast<std::size_t>(t)];
    h.tokens.push_back(t);
  }
}

std::vector<TokenId> greedy_decode(const Model& model, std::span<const TokenId> src,
                                   std::size_t max_len) {
  return greedy_decode(model_scorer(model, src), decode_limit(model, max_len)).tokens;
}

namespace {

double normalized(const Hypothesis& h, double alpha) {
  if (alpha == 0.0) return h.log_prob;
  return h.log_prob / std::pow(static_cast<double>(h.tokens.size() + 1), alpha);
}

}  // namespace

Hypothesis beam_search(const StepScorer& scorer, std::size_t beam, std::size_t max_len,
                       double alpha) {
  if (beam == 0) throw ParameterError("beam_search: beam must be at least 1");
  std::vector<Hypothesis> finished{greedy_decode(scorer, max_len)};
  std::vector<Hypothesis> alive{Hypothesis{}};

  for (std::size_t step = 0; !alive.empty(); ++step) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.tokens);
    const auto scores = scorer(prefixes);

    struct Candidate {
      double log_prob;
      std::size_t parent;
      TokenId token;
    };
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      for (std::size_t t = 0; t < scores[i].size(); ++t) {
        const auto tok = static_cast<TokenId>(t);
        if (!emittable(tok)) continue;
        // At the length limit only ending is possible.
        if (step == max_len && tok != kEos) continue;
        cands.push_back({alive[i].log_prob + scores[i][t], i, tok});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (alive[a.parent].tokens != alive[b.parent].tokens)
        return alive[a.parent].tokens < alive[b.parent].tokens;
      return a.token < b.token;
    });

    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < cands.size() && next.size() < beam; ++rank) {
      const auto& c = cands[rank];
      Hypothesis h{alive[c.parent].tokens, c.log_prob, false};
      if (c.token == kEos) {
        if (rank < beam) {
          h.finished = step < max_len;
          finished.push_back(std::move(h));
        }
        continue;
      }
      h.tokens.push_back(c.token);
      next.push_back(std::move(h));
    }
    if (step == max_len) break;
    alive = std::move(next);

    // With no length penalty scores only fall, so a finished hypothesis at
    // least as good as every live one cannot be overtaken.
    if (alpha == 0.0 && !alive.empty()) {
      double best_finished = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best_finished = std::max(best_finished, f.log_prob);
      if (best_finished >= alive.front().log_prob) break;
    }
    if (alpha != 0.0 && finished.size() > beam) break;
  }

  // Earliest entry wins ties; the greedy path sits first.
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i) {
    if (normalized(finished[i], alpha) > normalized(finished[best], alpha)) best = i;
  }
  return finished[best];
}

std::vector<TokenId> beam_search(const Model& model, std::span<const TokenId> src,
                                 std::size_t beam, std::size_t max_len, double alpha) {
  return beam_search(model_scorer(model, src), beam, decode_limit(model, max_len), alpha).tokens;
}

std::vector<std::vector<TokenId>> greedy_decode_batch(const Model& model,
                                                      const std::vector<std::vector<TokenId>>& srcs,
                                                      std::size_t max_len, std::size_t batch_size) {
  if (batch_size == 0) throw ParameterError("greedy_decode_batch: batch_size must be positive");
  max_len = decode_limit(model, max_len);
  const std::size_t vocab = model.config().vocab_size;
  std::vector<std::vector<TokenId>> out(srcs.size());
  NoGradGuard guard;
  Rng rng(0);
  for (std::size_t lo = 0; lo < srcs.size(); lo += batch_size) {
    const std::size_t hi = std::min(srcs.size(), lo + batch_size);
    std::vector<std::vector<TokenId>> rows(srcs.begin() + static_cast<long>(lo),
                                           srcs.begin() + static_cast<long>(hi));
    for (const auto& r : rows) {
      if (r.empty()) throw LengthError("decode: empty source sentence");
    }
    const std::size_t k = rows.size();
    const EncoderMemory memory = model.encode(EncoderInput::clean(TokenBatch::from_rows(rows)), rng, false);
    std::vector<std::vector<TokenId>> prefix(k, std::vector<TokenId>{kBos});
    std::vector<bool> done(k, false);
    std::size_t remaining = k;
    for (std::size_t step = 0; remaining > 0; ++step) {
      const TokenBatch tgt = TokenBatch::from_rows(prefix);
      const Var logits = model.decode(memory, tgt, rng, false);
      for (std::size_t b = 0; b < k; ++b) {
        if (done[b]) {
          prefix[b].push_back(kEos);
          continue;
        }
        const double* row = logits.value().data() + (b * tgt.length + step) * vocab;
        const auto t = static_cast<TokenId>(argmax_token({row, vocab}));
        if (t == kEos || step == max_len) {
          done[b] = true;
          --remaining;
          out[lo + b].assign(prefix[b].begin() + 1, prefix[b].end());
          prefix[b].push_back(kEos);
        } else {
          prefix[b].push_back(t);
        }
      }
    }
  }
  return out;
}

// ---- BLEU --------------------------------------------------------------------

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  hyp_len += other.hyp_len;
  ref_len += other.ref_len;
  max_hyp_len = std::max(max_hyp_len, other.max_hyp_len);
  return *this;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const std::vector<std::string>& words, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++counts[std::vector<std::string>(words.begin() + static_cast<long>(i),
                                      words.begin() + static_cast<long>(i + n))];
  }
  return counts;
}

}  // namespace

BleuStats sentence_stats(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  BleuStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  s.max_hyp_len = hyp.size();
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    const auto h = ngrams(hyp, n);
    const auto r = ngrams(ref, n);
    for (const auto& [g, c] : h) {
      s.totals[n - 1] += c;
      const auto it = r.find(g);
      if (it != r.end()) s.matches[n - 1] += std::min(c, it->second);
    }
  }
  return s;
}

double bleu_from_stats(const BleuStats& stats) {
  const std::size_t order = std::min(kBleuOrder, stats.max_hyp_len);
  if (order == 0 || stats.hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < order; ++n) {
    if (stats.matches[n] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]));
  }
  const double c = static_cast<double>(stats.hyp_len);
  const double r = static_cast<double>(stats.ref_len);
  const double log_bp = c > r ? 0.0 : 1.0 - r / c;
  return 100.0 * std::exp(log_bp + log_sum / static_cast<double>(order));
}

double corpus_bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references) {
  if (hypotheses.empty()) throw DataError("corpus_bleu: empty hypothesis set");
  if (hypotheses.size() != references.size()) {
    throw DataError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                    std::to_string(references.size()) + " references");
  }
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    total += sentence_stats(split_words(hypotheses[i]), split_words(references[i]));
  }
  return bleu_from_stats(total);
}

// ---- model-level metrics -----------------------------------------------------

double token_accuracy(const Model& model, std::span<const EncodedPair> pairs,
                      std::size_t batch_size) {
  if (pairs.empty()) throw DataError("token_accuracy: no sentence pairs");
  const std::size_t vocab = model.config().vocab_size;
  NoGradGuard guard;
  Rng rng(0);
  std::size_t correct = 0, total = 0;
  for (std::size_t lo = 0; lo < pairs.size(); lo += batch_size) {
    const std::size_t hi = std::min(pairs.size(), lo + batch_size);
    std::vector<std::vector<TokenId>> src, tin, tout;
    for (std::size_t i = lo; i < hi; ++i) {
      src.push_back(with_eos(pairs[i].src));
      tin.push_back(with_bos(pairs[i].tgt));
      tout.push_back(with_eos(pairs[i].tgt));
    }
    const TokenBatch tgt_in = TokenBatch::from_rows(tin);
    const EncoderMemory mem = model.encode(EncoderInput::clean(TokenBatch::from_rows(src)), rng, false);
    const Var logits = model.decode(mem, tgt_in, rng, false);
    for (std::size_t b = 0; b < tout.size(); ++b) {
      for (std::size_t t = 0; t < tout[b].size(); ++t) {
        const double* row = logits.value().data() + (b * tgt_in.length + t) * vocab;
        const auto pred = static_cast<TokenId>(std::max_element(row, row + vocab) - row);
        correct += pred == tout[b][t];
        ++total;
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

double corpus_bleu(const Model& model, const BpeModel& bpe, std::span<const EncodedPair> pairs,
                   std::size_t max_extra_len) {
  if (pairs.empty()) throw DataError("corpus_bleu: no sentence pairs");
  std::vector<std::vector<TokenId>> srcs;
  std::size_t longest = 0;
  for (const auto& p : pairs) {
    srcs.push_back(with_eos(p.src));
    longest = std::max(longest, p.src.size());
  }
  const auto outs = greedy_decode_batch(model, srcs, longest + max_extra_len);
  std::vector<std::string> hyps, refs;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    hyps.push_back(bpe.decode(outs[i]));
    refs.push_back(bpe.decode(pairs[i].tgt));
  }
  return corpus_bleu(hyps, refs);
}

}  // namespace thm
