#include "thm/model.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <tuple>

#include "thm/errors.hpp"
#include "thm/kv.hpp"

namespace thm {

std::size_t TokenBatch::non_pad() const {
  std::size_t n = 0;
  for (auto l : lengths) n += l;
  return n;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<TokenId>>& rows) {
  TokenBatch b;
  b.batch = rows.size();
  for (const auto& r : rows) b.length = std::max(b.length, r.size());
  b.ids.assign(b.batch * b.length, kPad);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + static_cast<long>(i * b.length));
    b.lengths.push_back(rows[i].size());
  }
  return b;
}

std::string_view arch_name(Arch arch) {
  return arch == Arch::THM ? "thm" : "transformer";
}

Arch parse_arch(std::string_view name) {
  if (name == "thm") return Arch::THM;
  if (name == "transformer") return Arch::TransformerBaseline;
  throw ParameterError("unknown architecture '" + std::string(name) + "' (thm|transformer)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ParameterError("model config: " + msg); };
  if (d_model == 0) fail("d_model must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (d_ff == 0) fail("d_ff must be positive");
  if (vocab_size <= static_cast<std::size_t>(kNumSpecial)) fail("vocab_size must exceed 4");
  if (max_len == 0) fail("max_len must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p must lie in [0, 1)");
  if (!(swap_prob >= 0.0 && swap_prob <= 1.0)) fail("swap_prob must lie in [0, 1]");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing must lie in [0, 1)");
}

ModelConfig preset(std::string_view name, std::size_t vocab) {
  ModelConfig c;
  if (name == "thm-base" || name == "transformer-base") {
    c.d_model = 512;
    c.n_heads = 8;
    c.n_blocks = 6;
    c.d_ff = 2048;
    c.dropout_p = 0.1;
  } else if (name == "thm-big" || name == "transformer-big") {
    c.d_model = 1024;
    c.n_heads = 16;
    c.n_blocks = 6;
    c.d_ff = 4096;
    c.dropout_p = 0.3;
  } else if (name == "tiny" || name == "transformer-tiny") {
    c.d_model = 64;
    c.n_heads = 4;
    c.n_blocks = 2;
    c.d_ff = 256;
    c.vocab_size = 256;
    c.max_len = 64;
    c.dropout_p = 0.1;
  } else {
    throw ParameterError("unknown preset '" + std::string(name) + "'");
  }
  c.arch = name.starts_with("transformer") ? Arch::TransformerBaseline : Arch::THM;
  if (vocab != 0) c.vocab_size = vocab;
  return c;
}

std::vector<std::string> preset_names() {
  return {"thm-base", "thm-big", "transformer-base", "transformer-big", "tiny", "transformer-tiny"};
}

std::string config_to_kv(const ModelConfig& c) {
  std::ostringstream os;
  os << "arch=" << arch_name(c.arch) << '\n'
     << "d_model=" << c.d_model << '\n'
     << "n_heads=" << c.n_heads << '\n'
     << "n_blocks=" << c.n_blocks << '\n'
     << "d_ff=" << c.d_ff << '\n'
     << "vocab_size=" << c.vocab_size << '\n'
     << "max_len=" << c.max_len << '\n'
     << "dropout_p=" << format_double(c.dropout_p) << '\n'
     << "swap_prob=" << format_double(c.swap_prob) << '\n'
     << "label_smoothing=" << format_double(c.label_smoothing) << '\n';
  return os.str();
}

std::vector<std::string> apply_config_kv(ModelConfig& c,
                                         const std::map<std::string, std::string>& kv) {
  std::vector<std::string> unknown;
  for (const auto& [k, v] : kv) {
    if (k == "arch") c.arch = parse_arch(v);
    else if (k == "d_model") c.d_model = parse_size(k, v);
    else if (k == "n_heads") c.n_heads = parse_size(k, v);
    else if (k == "n_blocks") c.n_blocks = parse_size(k, v);
    else if (k == "d_ff") c.d_ff = parse_size(k, v);
    else if (k == "vocab_size") c.vocab_size = parse_size(k, v);
    else if (k == "max_len") c.max_len = parse_size(k, v);
    else if (k == "dropout_p") c.dropout_p = parse_double(k, v);
    else if (k == "swap_prob") c.swap_prob = parse_double(k, v);
    else if (k == "label_smoothing") c.label_smoothing = parse_double(k, v);
    else unknown.push_back(k);
  }
  return unknown;
}

// ---- parameter counting ----------------------------------------------------

std::size_t linear_param_count(std::size_t d_in, std::size_t d_out, bool bias) {
  return d_in * d_out + (bias ? d_out : 0);
}

std::size_t embedding_param_count(std::size_t vocab, std::size_t d) { return vocab * d; }

ParameterCount count_parameters(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t L = c.n_blocks;
  const std::size_t attention = 4 * linear_param_count(d, d, false);
  const std::size_t ffn = linear_param_count(d, c.d_ff, true) + linear_param_count(c.d_ff, d, true);
  const std::size_t norm = 2 * d;
  const bool thm = c.arch == Arch::THM;
  const std::size_t branches = thm ? 2 : 1;

  ParameterCount pc;
  auto add = [&](std::string name, std::size_t n) {
    pc.components.emplace_back(std::move(name), n);
    pc.total += n;
  };
  add("embedding", embedding_param_count(c.vocab_size, d));
  add("encoder.attention", L * branches * attention);
  add("encoder.feed_forward", L * branches * ffn);
  add("encoder.layer_norm", L * branches * 2 * norm);
  add("decoder.self_attention", L * attention);
  add("decoder.cross_attention", L * branches * attention);
  add("decoder.feed_forward", L * (branches + (thm ? 1 : 0)) * ffn);
  add("decoder.merge", thm ? L * linear_param_count(2 * d, d, true) : 0);
  add("decoder.layer_norm", L * (1 + 2 * branches + (thm ? 2 : 0)) * norm);
  add("output_projection", 0);  // tied to the embedding
  return pc;
}

// ---- model -----------------------------------------------------------------

Tensor sinusoidal_encoding(std::size_t length, std::size_t d) {
  Tensor pe({length, d});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; 2 * i < d; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / double(d));
      pe(pos, 2 * i) = std::sin(angle);
      if (2 * i + 1 < d) pe(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

void round_to_float(Tensor& t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

namespace {

class Builder {
 public:
  Builder(ParameterList& params, Rng& rng) : params_(params), rng_(rng) {}

  Var xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t({fan_in, fan_out});
    for (double& v : t.values()) v = limit * (2.0 * rng_.uniform() - 1.0);
    return add(name, std::move(t));
  }
  Var normal(const std::string& name, Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = stddev * rng_.normal();
    return add(name, std::move(t));
  }
  Var constant(const std::string& name, std::size_t n, double value) {
    return add(name, Tensor({n}, value));
  }

  MultiHeadParams attention(const std::string& prefix, std::size_t d, std::size_t heads) {
    MultiHeadParams p;
    p.w_q = xavier(prefix + ".w_q", d, d);
    p.w_k = xavier(prefix + ".w_k", d, d);
    p.w_v = xavier(prefix + ".w_v", d, d);
    p.w_o = xavier(prefix + ".w_o", d, d);
    p.n_heads = heads;
    return p;
  }
  LayerNormParams norm(const std::string& prefix, std::size_t d) {
    return {constant(prefix + ".gain", d, 1.0), constant(prefix + ".bias", d, 0.0)};
  }
  FeedForwardParams ffn(const std::string& prefix, std::size_t d, std::size_t d_ff) {
    FeedForwardParams f;
    f.w1 = xavier(prefix + ".w1", d, d_ff);
    f.b1 = constant(prefix + ".b1", d_ff, 0.0);
    f.w2 = xavier(prefix + ".w2", d_ff, d);
    f.b2 = constant(prefix + ".b2", d, 0.0);
    return f;
  }

 private:
  Var add(const std::string& name, Tensor t) {
    round_to_float(t);
    Var v = Var::leaf(std::move(t));
    params_.push_back({name, v});
    return v;
  }

  ParameterList& params_;
  Rng& rng_;
};

Var feed_forward(const Var& x, const FeedForwardParams& f) {
  return linear(relu(linear(x, f.w1, f.b1)), f.w2, f.b2);
}

Var norm(const Var& x, const LayerNormParams& n) { return layer_norm(x, n.gain, n.bias, 1e-5); }

/// Post-norm residual block: LN(x + dropout(sublayer)).
Var residual(const Var& x, const Var& sublayer, const LayerNormParams& n, double p, Rng& rng,
             bool training) {
  return norm(add(x, dropout(sublayer, p, rng, training)), n);
}

}  // namespace

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::tie(enc_alpha_, enc_beta_) = crossed_routing();
  Rng rng(seed);
  Builder b(params_, rng);
  const std::size_t d = config_.d_model;
  const std::size_t H = config_.n_heads;
  const bool thm = config_.arch == Arch::THM;

  embed_ = b.normal("embed", {config_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t i = 0; i < config_.n_blocks; ++i) {
    const std::string p = "enc." + std::to_string(i);
    EncoderBlockParams blk;
    for (auto [branch, side] : {std::pair{&blk.left, "left"}, std::pair{&blk.right, "right"}}) {
      if (!thm && branch == &blk.right) break;
      const std::string q = p + "." + side;
      branch->attn = b.attention(q + ".attn", d, H);
      branch->attn_norm = b.norm(q + ".attn_norm", d);
      branch->ffn = b.ffn(q + ".ffn", d, config_.d_ff);
      branch->ffn_norm = b.norm(q + ".ffn_norm", d);
    }
    enc_.push_back(std::move(blk));
  }
  for (std::size_t i = 0; i < config_.n_blocks; ++i) {
    const std::string p = "dec." + std::to_string(i);
    DecoderBlockParams blk;
    blk.self_attn = b.attention(p + ".self_attn", d, H);
    blk.self_norm = b.norm(p + ".self_norm", d);
    for (auto [branch, side] : {std::pair{&blk.left, "left"}, std::pair{&blk.right, "right"}}) {
      if (!thm && branch == &blk.right) break;
      const std::string q = p + "." + side;
      branch->cross = b.attention(q + ".cross", d, H);
      branch->cross_norm = b.norm(q + ".cross_norm", d);
      branch->ffn = b.ffn(q + ".ffn", d, config_.d_ff);
      branch->ffn_norm = b.norm(q + ".ffn_norm", d);
    }
    if (thm) {
      blk.merge_w = b.xavier(p + ".merge.w", 2 * d, d);
      blk.merge_b = b.constant(p + ".merge.b", d, 0.0);
      blk.merge_norm = b.norm(p + ".merge_norm", d);
      blk.ffn = b.ffn(p + ".ffn", d, config_.d_ff);
      blk.ffn_norm = b.norm(p + ".ffn_norm", d);
    }
    dec_.push_back(std::move(blk));
  }
}

Parameter* Model::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().size();
  return n;
}

Var Model::embed(const TokenBatch& tokens, bool positions) const {
  if (tokens.length > config_.max_len) {
    throw LengthError("sequence length " + std::to_string(tokens.length) + " exceeds max_len " +
                      std::to_string(config_.max_len));
  }
  const std::size_t d = config_.d_model;
  Var x = scale(gather_rows(embed_, tokens.ids), std::sqrt(static_cast<double>(d)));
  if (!positions) return x;
  const Tensor pe = sinusoidal_encoding(tokens.length, d);
  Tensor tiled({tokens.batch * tokens.length, d});
  for (std::size_t b = 0; b < tokens.batch; ++b) {
    std::copy(pe.values().begin(), pe.values().end(),
              tiled.data() + static_cast<long>(b * tokens.length * d));
  }
  return add(x, Var::constant(std::move(tiled)));
}

std::vector<AttentionMask> EncoderMemory::pad_masks(std::size_t n_q) const {
  std::vector<AttentionMask> masks;
  masks.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    masks.push_back(AttentionMask::key_padding(n_q, length, lengths[b]));
  }
  return masks;
}

EncoderMemory Model::encode(const EncoderInput& input, Rng& rng, bool training) const {
  const TokenBatch& l = input.left;
  const bool thm = config_.arch == Arch::THM;
  if (thm && (input.right.batch != l.batch || input.right.length != l.length ||
              input.right.lengths != l.lengths)) {
    throw ShapeError("encode: left and right sources must share their padding layout");
  }
  for (std::size_t len : l.lengths) {
    if (len == 0) throw LengthError("encode: empty source sequence");
  }
  EncoderMemory mem;
  mem.batch = l.batch;
  mem.length = l.length;
  mem.lengths = l.lengths;
  const auto masks = mem.pad_masks(l.length);
  const double p = config_.dropout_p;
  const std::size_t B = l.batch;
  const std::size_t n = l.length;

  Var xl = dropout(embed(l), p, rng, training);
  if (!thm) {
    for (const auto& blk : enc_) {
      const auto& br = blk.left;
      xl = residual(xl, multi_head(xl, xl, xl, br.attn, B, masks), br.attn_norm, p, rng, training);
      xl = residual(xl, feed_forward(xl, br.ffn), br.ffn_norm, p, rng, training);
    }
    mem.left = xl;
    mem.right = xl;
    return mem;
  }

  Var xr = dropout(embed(input.right), p, rng, training);
  for (const auto& blk : enc_) {
    auto [yl, yr] = coattention({xl, xr, n, n, B}, enc_alpha_, enc_beta_, blk.left.attn, blk.right.attn,
                                {masks, masks});
    xl = residual(xl, yl, blk.left.attn_norm, p, rng, training);
    xr = residual(xr, yr, blk.right.attn_norm, p, rng, training);
    xl = residual(xl, feed_forward(xl, blk.left.ffn), blk.left.ffn_norm, p, rng, training);
    xr = residual(xr, feed_forward(xr, blk.right.ffn), blk.right.ffn_norm, p, rng, training);
  }
  mem.left = xl;
  mem.right = xr;
  return mem;
}

void Model::set_encoder_routing(const GateRouting& alpha, const GateRouting& beta) {
  enc_alpha_ = alpha;
  enc_beta_ = beta;
}

Var Model::decode(const EncoderMemory& memory, const TokenBatch& target_in, Rng& rng,
                  bool training, DecodeTrace* trace) const {
  if (target_in.batch != memory.batch) {
    throw ShapeError("decode: target batch " + std::to_string(target_in.batch) +
                     " does not match memory batch " + std::to_string(memory.batch));
  }
  for (std::size_t b = 0; b < target_in.batch; ++b) {
    if (target_in.lengths[b] == 0 || target_in.row(b)[0] != kBos) {
      throw DataError("decode: target row " + std::to_string(b) + " does not begin with BOS");
    }
  }
  const std::size_t B = target_in.batch;
  const std::size_t m = target_in.length;
  const double p = config_.dropout_p;
  const bool thm = config_.arch == Arch::THM;
  const std::vector<AttentionMask> causal{causal_mask(m)};
  const auto memory_masks = memory.pad_masks(m);

  auto branch = [&](const Var& s, const Var& mem, const DecoderBranchParams& br) {
    Var c = residual(s, multi_head(s, mem, mem, br.cross, B, memory_masks), br.cross_norm, p, rng,
                     training);
    return residual(c, feed_forward(c, br.ffn), br.ffn_norm, p, rng, training);
  };

  Var x = dropout(embed(target_in), p, rng, training);
  for (const auto& blk : dec_) {
    Var s = residual(x, multi_head(x, x, x, blk.self_attn, B, causal), blk.self_norm, p, rng,
                     training);
    if (!thm) {
      x = branch(s, memory.left, blk.left);
      continue;
    }
    Var yl = branch(s, memory.left, blk.left);
    Var yr = branch(s, memory.right, blk.right);
    if (trace) {
      trace->left.push_back(yl.value());
      trace->right.push_back(yr.value());
    }
    Var merged = linear(concat_cols(yl, yr), blk.merge_w, blk.merge_b);
    Var z = residual(s, merged, blk.merge_norm, p, rng, training);
    x = residual(z, feed_forward(z, blk.ffn), blk.ffn_norm, p, rng, training);
  }
  return matmul_nt(x, embed_);
}

EncoderMemory encode_thm(const Model& model, const TokenBatch& src_left,
                         const TokenBatch& src_right, Rng& rng, bool training) {
  if (model.config().arch != Arch::THM) throw ParameterError("encode_thm: model is not THM");
  return model.encode({src_left, src_right}, rng, training);
}

Var decode_thm(const Model& model, const EncoderMemory& memory, const TokenBatch& target_in,
               Rng& rng, bool training) {
  if (model.config().arch != Arch::THM) throw ParameterError("decode_thm: model is not THM");
  return model.decode(memory, target_in, rng, training);
}

}  // namespace thm
