#pragma once

// Crossed co-attention encoder-decoder and the single-branch Transformer
// baseline, sharing one embedding table that also serves as the output
// projection.

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "thm/attention.hpp"
#include "thm/graph.hpp"
#include "thm/tokens.hpp"

namespace thm {

enum class Arch { THM, TransformerBaseline };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);

struct ModelConfig {
  Arch arch = Arch::THM;
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t n_blocks = 6;
  std::size_t d_ff = 2048;
  std::size_t vocab_size = 33712;
  std::size_t max_len = 256;
  double dropout_p = 0.1;
  double swap_prob = 0.5;
  double label_smoothing = 0.1;

  /// Throws ParameterError on inconsistent settings.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// thm-base, thm-big, transformer-base, transformer-big, tiny,
/// transformer-tiny. `vocab` replaces the preset vocabulary when non-zero.
ModelConfig preset(std::string_view name, std::size_t vocab = 0);
std::vector<std::string> preset_names();

/// key=value lines, one per field, in a fixed order.
std::string config_to_kv(const ModelConfig& config);
/// Applies known keys onto `config`; returns the keys it did not recognize.
std::vector<std::string> apply_config_kv(ModelConfig& config,
                                         const std::map<std::string, std::string>& kv);

// ---- parameter counting ----------------------------------------------------

std::size_t linear_param_count(std::size_t d_in, std::size_t d_out, bool bias);
std::size_t embedding_param_count(std::size_t vocab, std::size_t d);

struct ParameterCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> components;
};

/// Closed-form count from the configuration alone; nothing is allocated.
ParameterCount count_parameters(const ModelConfig& config);

// ---- model -----------------------------------------------------------------

/// PE(pos, 2i) = sin(pos / 10000^(2i/d)), PE(pos, 2i+1) = cos(same).
Tensor sinusoidal_encoding(std::size_t length, std::size_t d);

struct LayerNormParams {
  Var gain;
  Var bias;
};

struct FeedForwardParams {
  Var w1, b1, w2, b2;
};

struct EncoderBranchParams {
  MultiHeadParams attn;
  LayerNormParams attn_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct EncoderBlockParams {
  EncoderBranchParams left;
  EncoderBranchParams right;  // unused by the baseline
};

struct DecoderBranchParams {
  MultiHeadParams cross;
  LayerNormParams cross_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

/// THM: shared masked self-attention, one branch per encoder memory, then
/// concat → linear → FFN. The baseline uses only self_attn and `left`.
struct DecoderBlockParams {
  MultiHeadParams self_attn;
  LayerNormParams self_norm;
  DecoderBranchParams left;
  DecoderBranchParams right;
  Var merge_w, merge_b;
  LayerNormParams merge_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct EncoderMemory {
  Var left;
  Var right;  // equals `left` for the baseline
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> lengths;

  /// Key-padding masks for `n_q` queries against this memory.
  std::vector<AttentionMask> pad_masks(std::size_t n_q) const;
};

/// Encoder inputs. The THM encoder reads both copies; the baseline reads
/// `left` only. Both batches must share padding layout.
struct EncoderInput {
  TokenBatch left;
  TokenBatch right;

  static EncoderInput clean(const TokenBatch& src) { return {src, src}; }
};

/// Per-block outputs of the two decoder branches, captured on request.
struct DecodeTrace {
  std::vector<Tensor> left;
  std::vector<Tensor> right;
};

class Model {
 public:
  /// Builds and initializes parameters in a fixed order from `seed`.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  ParameterList& parameters() noexcept { return params_; }
  const ParameterList& parameters() const noexcept { return params_; }
  Parameter* find(std::string_view name);
  std::size_t parameter_count() const;

  const Var& embedding_table() const { return embed_; }

  /// Table lookup scaled by √d_model, plus sinusoidal positions.
  Var embed(const TokenBatch& tokens, bool positions = true) const;

  EncoderMemory encode(const EncoderInput& input, Rng& rng, bool training) const;

  /// Logits of shape (batch·m) × vocab for BOS-prefixed targets.
  Var decode(const EncoderMemory& memory, const TokenBatch& target_in, Rng& rng, bool training,
             DecodeTrace* trace = nullptr) const;

  /// Replaces the crossed routing of the THM encoder (construction tests).
  void set_encoder_routing(const GateRouting& alpha, const GateRouting& beta);

  std::vector<EncoderBlockParams>& encoder_blocks() { return enc_; }
  std::vector<DecoderBlockParams>& decoder_blocks() { return dec_; }

 private:
  ModelConfig config_;
  GateRouting enc_alpha_;
  GateRouting enc_beta_;
  ParameterList params_;
  Var embed_;
  std::vector<EncoderBlockParams> enc_;
  std::vector<DecoderBlockParams> dec_;
};

/// THM forward halves, usable directly on a model built with Arch::THM.
EncoderMemory encode_thm(const Model& model, const TokenBatch& src_left,
                         const TokenBatch& src_right, Rng& rng, bool training);
Var decode_thm(const Model& model, const EncoderMemory& memory, const TokenBatch& target_in,
               Rng& rng, bool training);

/// Rounds every element to the nearest 32-bit float, the checkpoint payload type.
void round_to_float(Tensor& t);

// ---- checkpoints -------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  long step = 0;
  /// Additional key=value entries stored in the header (training state).
  std::map<std::string, std::string> extra;
  /// Parameters in model-construction order, optionally followed by other
  /// named tensors (optimizer moments).
  std::vector<std::pair<std::string, Tensor>> tensors;
};

Checkpoint make_checkpoint(const Model& model, long step);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
/// Rebuilds a model and copies parameter values from the checkpoint.
Model model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace thm
