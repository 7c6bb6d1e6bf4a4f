#include "thm/model_check.hpp"

#include "thm/data.hpp"
#include "thm/errors.hpp"

namespace thm {

GradCheckReport model_gradcheck(const ModelConfig& config, std::uint64_t seed,
                                const GradCheckOptions& options) {
  config.validate();
  if (config.vocab_size <= static_cast<std::size_t>(kNumSpecial)) {
    throw ParameterError("model_gradcheck: vocabulary has no content tokens");
  }
  Model model(config, seed);
  Rng rng = Rng(seed).fork(1);
  const std::size_t content = config.vocab_size - static_cast<std::size_t>(kNumSpecial);
  const std::size_t longest = std::min<std::size_t>(6, config.max_len - 1);
  std::vector<std::vector<TokenId>> src, left, right, tgt_in, tgt_out;
  for (int s = 0; s < 2; ++s) {
    auto sentence = [&] {
      std::vector<TokenId> ids(1 + rng.below(longest));
      for (auto& t : ids) t = static_cast<TokenId>(kNumSpecial + rng.below(content));
      return ids;
    };
    auto x = sentence();
    const auto y = sentence();
    x.push_back(kEos);
    left.push_back(token_swap_corrupt(x, config.swap_prob, rng));
    right.push_back(token_swap_corrupt(x, config.swap_prob, rng));
    src.push_back(x);
    std::vector<TokenId> in{kBos};
    in.insert(in.end(), y.begin(), y.end());
    std::vector<TokenId> out = y;
    out.push_back(kEos);
    tgt_in.push_back(in);
    tgt_out.push_back(out);
  }
  const EncoderInput input = config.arch == Arch::THM
                                 ? EncoderInput{TokenBatch::from_rows(left), TokenBatch::from_rows(right)}
                                 : EncoderInput::clean(TokenBatch::from_rows(src));
  const TokenBatch in = TokenBatch::from_rows(tgt_in);
  const TokenBatch out = TokenBatch::from_rows(tgt_out);
  const std::uint64_t dropout_seed = Rng(seed).fork(2).next_u64();
  auto loss = [&] {
    Rng r(dropout_seed);
    const auto memory = model.encode(input, r, true);
    return cross_entropy(model.decode(memory, in, r, true), out.ids, config.label_smoothing, kPad);
  };
  return finite_diff_check(loss, model.parameters(), options);
}

}  // namespace thm
