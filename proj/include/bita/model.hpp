#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bita/spectral.hpp"
#include "bita/tensor.hpp"

namespace bita {

// Raw image grid, H x W x 3 row-major, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), rgb(h * w * 3, fill) {}
  double& at(std::size_t y, std::size_t x, std::size_t ch) {
    return rgb[(y * width + x) * 3 + ch];
  }
  double at(std::size_t y, std::size_t x, std::size_t ch) const {
    return rgb[(y * width + x) * 3 + ch];
  }
};

struct ModelConfig {
  std::size_t hidden_dim = 64;      // d; power of two under FourierMix
  std::size_t num_layers = 4;       // L
  std::size_t num_heads = 4;
  std::size_t num_prompts = 32;
  std::size_t image_feat_dim = 64;
  std::size_t image_patches = 16;   // perfect square
  std::size_t image_size = 32;      // input images are image_size^2 x 3
  std::size_t lm_dim = 128;         // deliberately != hidden_dim by default
  std::size_t lm_layers = 2;
  std::size_t lm_heads = 4;
  std::size_t img_layers = 2;
  std::size_t img_heads = 4;
  std::size_t vocab_size = 0;       // resolved from the corpus
  std::size_t max_text_len = 16;    // power of two under FourierMix
  MixerKind mixer = MixerKind::FourierMix;
  std::uint64_t seed = 7;

  void validate() const;
};

// Attention-permission matrix over (prompt prefix + text positions).
// Prompt rows attend to all prompt positions (bidirectional prefix); text
// row i attends to every prompt and to text positions <= i.
struct PrefixCausalMask {
  std::size_t prompt_len = 0;
  std::size_t text_len = 0;
  std::vector<std::uint8_t> allowed;  // (P+T)^2 row-major

  std::size_t dim() const { return prompt_len + text_len; }
  bool at(std::size_t i, std::size_t j) const { return allowed[i * dim() + j]; }
};

PrefixCausalMask build_prefix_causal_mask(std::size_t prompt_len,
                                          std::size_t text_len);

struct AttnParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

struct LnParams {
  Tensor gamma, beta;
};

// One IFT layer. ln_mix, ln_ffn, ffn and (under SelfAttention) mixer_attn are
// the shared tensors used by both branches; cross-attention and its layer
// norm exist only on the image branch.
struct IftBlock {
  LnParams ln_mix, ln_ffn;
  FfnParams ffn;
  std::optional<AttnParams> mixer_attn;
  AttnParams cross_attn;
  LnParams ln_ca;
};

struct TransformerBlock {  // frozen stand-in building block
  AttnParams attn;
  FfnParams ffn;
  LnParams ln_attn, ln_ffn;
};

// Frozen stand-in for the pre-trained image encoder: patch projection plus a
// couple of small transformer layers, seed-determined and never trained.
struct FrozenImageEncoder {
  Tensor patch_w, patch_b, pos;
  std::vector<TransformerBlock> layers;
};

// Frozen stand-in for the language decoder: token embedding, learned
// positions, masked-attention blocks, output projection tied to the embedding.
struct FrozenLM {
  Tensor tok_embed;  // vocab x lm_dim
  Tensor pos_embed;  // (max_text_len + 2) x lm_dim
  std::vector<TransformerBlock> layers;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

enum class Stage { Stage1, Stage2, Finetune };

class IftModel {
 public:
  explicit IftModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  // Frozen encoder pass; the result never carries gradient.
  Tensor image_encode(const Image& image) const;

  // prompts -> per-layer (fourier mix | self-attn) -> cross-attention into
  // image features -> shared FFN; returns [num_prompts x d].
  Tensor ift_image_branch(const Tensor& image_feats) const;

  // ids must start with the [CLS] id; padded internally to max_text_len so a
  // caption's features do not depend on batch composition. Returns
  // [max_text_len x d]; row 0 is the [CLS] feature.
  Tensor ift_text_branch(const std::vector<int>& token_ids) const;

  Tensor project_to_lm(const Tensor& z_hat) const;

  // Decoder pass over [prefix; embedded tokens] under the mask; returns
  // next-token logits for the text positions only, [T x vocab].
  Tensor lm_forward(const Tensor& prefix, const std::vector<int>& token_ids,
                    const PrefixCausalMask& mask) const;

  // module name -> exact parameter count; frozen modules reported separately
  std::map<std::string, std::size_t> count_params(bool trainable_only) const;

  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<NamedTensor> trainable_params(Stage stage) const;

  const Tensor& prompts() const { return prompts_; }
  const FrozenLM& frozen_lm() const { return lm_; }
  const FrozenImageEncoder& frozen_encoder() const { return enc_; }

 private:
  Tensor mix(const Tensor& x, const IftBlock& block) const;

  ModelConfig cfg_;
  Tensor prompts_;
  Tensor text_tok_embed_, text_pos_embed_;
  std::vector<IftBlock> blocks_;
  Tensor proj_w_, proj_b_;
  FrozenImageEncoder enc_;
  FrozenLM lm_;
  std::vector<NamedTensor> params_;
};

// Multi-head attention from q_in into kv_in. mask, when given, must be
// (rows(q_in))^2 with q_in == kv_in (self-attention).
Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                            const AttnParams& p, std::size_t heads,
                            const std::vector<std::uint8_t>* mask = nullptr);

}  // namespace bita
