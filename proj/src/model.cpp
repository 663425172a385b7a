#include "bita/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "bita/rng.hpp"

namespace bita {

namespace {

constexpr double kLnEps = 1e-5;

Tensor init_normal(Rng& rng, std::size_t rows, std::size_t cols, double stddev,
                   bool trainable, const std::string& name) {
  Tensor t = make_tensor(rows, cols, 0.0, trainable);
  for (auto& v : t->value) v = rng.normal(0.0, stddev);
  t->name = name;
  return t;
}

Tensor init_const(std::size_t rows, std::size_t cols, double fill,
                  bool trainable, const std::string& name) {
  Tensor t = make_tensor(rows, cols, fill, trainable);
  t->name = name;
  return t;
}

// BERT-style init for trainable projections, 1/sqrt(fan_in) for the frozen
// stand-ins so signal and gradient magnitudes stay healthy through them.
AttnParams init_attn(Rng& rng, std::size_t q_dim, std::size_t kv_dim,
                     std::size_t d_model, double w_std, bool trainable,
                     const std::string& prefix) {
  AttnParams p;
  p.wq = init_normal(rng, q_dim, d_model, w_std, trainable, prefix + ".wq");
  p.bq = init_const(1, d_model, 0.0, trainable, prefix + ".bq");
  p.wk = init_normal(rng, kv_dim, d_model, w_std, trainable, prefix + ".wk");
  p.bk = init_const(1, d_model, 0.0, trainable, prefix + ".bk");
  p.wv = init_normal(rng, kv_dim, d_model, w_std, trainable, prefix + ".wv");
  p.bv = init_const(1, d_model, 0.0, trainable, prefix + ".bv");
  p.wo = init_normal(rng, d_model, d_model, w_std, trainable, prefix + ".wo");
  p.bo = init_const(1, d_model, 0.0, trainable, prefix + ".bo");
  return p;
}

FfnParams init_ffn(Rng& rng, std::size_t d, double w_std, bool trainable,
                   const std::string& prefix) {
  FfnParams f;
  f.w1 = init_normal(rng, d, 4 * d, w_std, trainable, prefix + ".w1");
  f.b1 = init_const(1, 4 * d, 0.0, trainable, prefix + ".b1");
  f.w2 = init_normal(rng, 4 * d, d, w_std, trainable, prefix + ".w2");
  f.b2 = init_const(1, d, 0.0, trainable, prefix + ".b2");
  return f;
}

LnParams init_ln(std::size_t d, bool trainable, const std::string& prefix) {
  LnParams ln;
  ln.gamma = init_const(1, d, 1.0, trainable, prefix + ".gamma");
  ln.beta = init_const(1, d, 0.0, trainable, prefix + ".beta");
  return ln;
}

Tensor ffn_forward(const Tensor& x, const FfnParams& f) {
  Tensor h = gelu(add_rowvec(matmul(x, f.w1), f.b1));
  return add_rowvec(matmul(h, f.w2), f.b2);
}

Tensor ln_forward(const Tensor& x, const LnParams& ln) {
  return layer_norm(x, ln.gamma, ln.beta, kLnEps);
}

void collect_attn(std::vector<NamedTensor>& out, const AttnParams& p) {
  out.push_back({p.wq->name, p.wq});
  out.push_back({p.bq->name, p.bq});
  out.push_back({p.wk->name, p.wk});
  out.push_back({p.bk->name, p.bk});
  out.push_back({p.wv->name, p.wv});
  out.push_back({p.bv->name, p.bv});
  out.push_back({p.wo->name, p.wo});
  out.push_back({p.bo->name, p.bo});
}

void collect_ffn(std::vector<NamedTensor>& out, const FfnParams& f) {
  out.push_back({f.w1->name, f.w1});
  out.push_back({f.b1->name, f.b1});
  out.push_back({f.w2->name, f.w2});
  out.push_back({f.b2->name, f.b2});
}

void collect_ln(std::vector<NamedTensor>& out, const LnParams& ln) {
  out.push_back({ln.gamma->name, ln.gamma});
  out.push_back({ln.beta->name, ln.beta});
}

std::size_t isqrt(std::size_t n) {
  std::size_t r = (std::size_t)std::lround(std::sqrt((double)n));
  while (r * r > n) --r;
  while ((r + 1) * (r + 1) <= n) ++r;
  return r;
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) {
      throw std::invalid_argument(std::string("ModelConfig: ") + what +
                                  " must be positive");
    }
  };
  positive(hidden_dim, "hidden_dim");
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(num_prompts, "num_prompts");
  positive(image_feat_dim, "image_feat_dim");
  positive(image_patches, "image_patches");
  positive(image_size, "image_size");
  positive(lm_dim, "lm_dim");
  positive(lm_layers, "lm_layers");
  positive(vocab_size, "vocab_size");
  positive(max_text_len, "max_text_len");
  if (hidden_dim % num_heads != 0) {
    throw std::invalid_argument(
        "ModelConfig: hidden_dim must be divisible by num_heads");
  }
  if (image_feat_dim % img_heads != 0 || lm_dim % lm_heads != 0) {
    throw std::invalid_argument(
        "ModelConfig: frozen stand-in dims must be divisible by their heads");
  }
  if (mixer == MixerKind::FourierMix) {
    if (!is_power_of_two(num_prompts) || !is_power_of_two(max_text_len) ||
        !is_power_of_two(hidden_dim)) {
      throw std::invalid_argument(
          "ModelConfig: num_prompts, max_text_len and hidden_dim must be "
          "powers of two when mixer = FourierMix");
    }
  }
  const std::size_t side = isqrt(image_patches);
  if (side * side != image_patches || image_size % side != 0) {
    throw std::invalid_argument(
        "ModelConfig: image_patches must be a perfect square dividing the "
        "image grid");
  }
}

PrefixCausalMask build_prefix_causal_mask(std::size_t prompt_len,
                                          std::size_t text_len) {
  PrefixCausalMask m;
  m.prompt_len = prompt_len;
  m.text_len = text_len;
  const std::size_t n = prompt_len + text_len;
  m.allowed.assign(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool ok = (i < prompt_len) ? (j < prompt_len)
                                       : (j < prompt_len || j <= i);
      m.allowed[i * n + j] = ok ? 1 : 0;
    }
  }
  return m;
}

Tensor multi_head_attention(const Tensor& q_in, const Tensor& kv_in,
                            const AttnParams& p, std::size_t heads,
                            const std::vector<std::uint8_t>* mask) {
  const std::size_t d_model = p.wq->cols;
  if (d_model % heads != 0) {
    throw std::invalid_argument("multi_head_attention: heads must divide d");
  }
  const std::size_t hd = d_model / heads;
  Tensor q = add_rowvec(matmul(q_in, p.wq), p.bq);
  Tensor k = add_rowvec(matmul(kv_in, p.wk), p.bk);
  Tensor v = add_rowvec(matmul(kv_in, p.wv), p.bv);
  const double inv_sqrt = 1.0 / std::sqrt((double)hd);
  std::vector<Tensor> head_outs;
  head_outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor probs =
        mask ? masked_softmax_rows(scores, *mask) : softmax_rows(scores);
    head_outs.push_back(matmul(probs, vh));
  }
  return add_rowvec(matmul(concat_cols(head_outs), p.wo), p.bo);
}

IftModel::IftModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.hidden_dim;

  Rng rng(derive_seed(cfg_.seed, 1));  // trainable tensors
  prompts_ = init_normal(rng, cfg_.num_prompts, d, 0.02, true, "ift.prompts");
  text_tok_embed_ = init_normal(rng, cfg_.vocab_size, d, 0.02, true,
                                "ift.text.tok_embed");
  text_pos_embed_ = init_normal(rng, cfg_.max_text_len, d, 0.02, true,
                                "ift.text.pos_embed");
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    std::ostringstream pre;
    pre << "ift.block" << l;
    IftBlock b;
    b.ln_mix = init_ln(d, true, pre.str() + ".ln_mix");
    b.ln_ffn = init_ln(d, true, pre.str() + ".ln_ffn");
    b.ffn = init_ffn(rng, d, 0.02, true, pre.str() + ".ffn");
    if (cfg_.mixer == MixerKind::SelfAttention) {
      b.mixer_attn = init_attn(rng, d, d, d, 0.02, true, pre.str() + ".mixer");
    }
    b.cross_attn = init_attn(rng, d, cfg_.image_feat_dim, d, 0.02, true,
                             pre.str() + ".ca");
    b.ln_ca = init_ln(d, true, pre.str() + ".ln_ca");
    blocks_.push_back(std::move(b));
  }
  proj_w_ = init_normal(rng, d, cfg_.lm_dim, 0.02, true, "proj.w");
  proj_b_ = init_const(1, cfg_.lm_dim, 0.0, true, "proj.b");

  // frozen image encoder
  {
    Rng frz(derive_seed(cfg_.seed, 2));
    const std::size_t side = isqrt(cfg_.image_patches);
    const std::size_t patch_px = cfg_.image_size / side;
    const std::size_t patch_dim = patch_px * patch_px * 3;
    const std::size_t fd = cfg_.image_feat_dim;
    const double w_std = 1.0 / std::sqrt((double)patch_dim);
    enc_.patch_w = init_normal(frz, patch_dim, fd, w_std, false,
                               "frozen.img.patch_w");
    enc_.patch_b = init_const(1, fd, 0.0, false, "frozen.img.patch_b");
    enc_.pos = init_normal(frz, cfg_.image_patches, fd,
                           1.0 / std::sqrt((double)fd), false,
                           "frozen.img.pos");
    const double l_std = 1.0 / std::sqrt((double)fd);
    for (std::size_t l = 0; l < cfg_.img_layers; ++l) {
      std::ostringstream pre;
      pre << "frozen.img.block" << l;
      TransformerBlock blk;
      blk.attn = init_attn(frz, fd, fd, fd, l_std, false, pre.str() + ".attn");
      blk.ffn = init_ffn(frz, fd, l_std / 2.0, false, pre.str() + ".ffn");
      blk.ln_attn = init_ln(fd, false, pre.str() + ".ln_attn");
      blk.ln_ffn = init_ln(fd, false, pre.str() + ".ln_ffn");
      enc_.layers.push_back(std::move(blk));
    }
  }

  // frozen language model
  {
    Rng frz(derive_seed(cfg_.seed, 3));
    const std::size_t ld = cfg_.lm_dim;
    const double l_std = 1.0 / std::sqrt((double)ld);
    lm_.tok_embed = init_normal(frz, cfg_.vocab_size, ld, l_std, false,
                                "frozen.lm.tok_embed");
    lm_.pos_embed = init_normal(frz, cfg_.max_text_len + 2, ld, l_std, false,
                                "frozen.lm.pos_embed");
    for (std::size_t l = 0; l < cfg_.lm_layers; ++l) {
      std::ostringstream pre;
      pre << "frozen.lm.block" << l;
      TransformerBlock blk;
      blk.attn = init_attn(frz, ld, ld, ld, l_std, false, pre.str() + ".attn");
      blk.ffn = init_ffn(frz, ld, l_std / 2.0, false, pre.str() + ".ffn");
      blk.ln_attn = init_ln(ld, false, pre.str() + ".ln_attn");
      blk.ln_ffn = init_ln(ld, false, pre.str() + ".ln_ffn");
      lm_.layers.push_back(std::move(blk));
    }
  }

  // registry: shared tensors registered once
  params_.push_back({prompts_->name, prompts_});
  params_.push_back({text_tok_embed_->name, text_tok_embed_});
  params_.push_back({text_pos_embed_->name, text_pos_embed_});
  for (const auto& b : blocks_) {
    collect_ln(params_, b.ln_mix);
    collect_ln(params_, b.ln_ffn);
    collect_ffn(params_, b.ffn);
    if (b.mixer_attn) collect_attn(params_, *b.mixer_attn);
    collect_attn(params_, b.cross_attn);
    collect_ln(params_, b.ln_ca);
  }
  params_.push_back({proj_w_->name, proj_w_});
  params_.push_back({proj_b_->name, proj_b_});
  params_.push_back({enc_.patch_w->name, enc_.patch_w});
  params_.push_back({enc_.patch_b->name, enc_.patch_b});
  params_.push_back({enc_.pos->name, enc_.pos});
  for (const auto& blk : enc_.layers) {
    collect_attn(params_, blk.attn);
    collect_ffn(params_, blk.ffn);
    collect_ln(params_, blk.ln_attn);
    collect_ln(params_, blk.ln_ffn);
  }
  params_.push_back({lm_.tok_embed->name, lm_.tok_embed});
  params_.push_back({lm_.pos_embed->name, lm_.pos_embed});
  for (const auto& blk : lm_.layers) {
    collect_attn(params_, blk.attn);
    collect_ffn(params_, blk.ffn);
    collect_ln(params_, blk.ln_attn);
    collect_ln(params_, blk.ln_ffn);
  }
}

Tensor IftModel::image_encode(const Image& image) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size) {
    std::ostringstream os;
    os << "image_encode: expected " << cfg_.image_size << "x"
       << cfg_.image_size << " image, got " << image.height << "x"
       << image.width;
    throw std::invalid_argument(os.str());
  }
  const std::size_t side = isqrt(cfg_.image_patches);
  const std::size_t patch_px = cfg_.image_size / side;
  const std::size_t patch_dim = patch_px * patch_px * 3;
  Tensor patches = make_tensor(cfg_.image_patches, patch_dim);
  for (std::size_t py = 0; py < side; ++py) {
    for (std::size_t px = 0; px < side; ++px) {
      double* row = patches->value.data() + (py * side + px) * patch_dim;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch_px; ++y) {
        for (std::size_t x = 0; x < patch_px; ++x) {
          for (std::size_t ch = 0; ch < 3; ++ch) {
            row[k++] = image.at(py * patch_px + y, px * patch_px + x, ch);
          }
        }
      }
    }
  }
  Tensor x = add(add_rowvec(matmul(patches, enc_.patch_w), enc_.patch_b),
                 enc_.pos);
  for (const auto& blk : enc_.layers) {
    Tensor a = ln_forward(
        add(x, multi_head_attention(x, x, blk.attn, cfg_.img_heads)),
        blk.ln_attn);
    x = ln_forward(add(a, ffn_forward(a, blk.ffn)), blk.ln_ffn);
  }
  return x;
}

Tensor IftModel::mix(const Tensor& x, const IftBlock& block) const {
  if (cfg_.mixer == MixerKind::FourierMix) return fourier_mix(x);
  return multi_head_attention(x, x, *block.mixer_attn, cfg_.num_heads);
}

Tensor IftModel::ift_image_branch(const Tensor& image_feats) const {
  if (image_feats->cols != cfg_.image_feat_dim) {
    std::ostringstream os;
    os << "ift_image_branch: image features have width " << image_feats->cols
       << ", expected " << cfg_.image_feat_dim;
    throw std::invalid_argument(os.str());
  }
  Tensor p = prompts_;
  for (const auto& b : blocks_) {
    Tensor u = ln_forward(add(p, mix(p, b)), b.ln_mix);
    Tensor v = ln_forward(
        add(u, multi_head_attention(u, image_feats, b.cross_attn,
                                    cfg_.num_heads)),
        b.ln_ca);
    p = ln_forward(add(v, ffn_forward(v, b.ffn)), b.ln_ffn);
  }
  return p;
}

Tensor IftModel::ift_text_branch(const std::vector<int>& token_ids) const {
  if (token_ids.size() > cfg_.max_text_len) {
    std::ostringstream os;
    os << "ift_text_branch: sequence length " << token_ids.size()
       << " exceeds max_text_len " << cfg_.max_text_len;
    throw std::invalid_argument(os.str());
  }
  for (int id : token_ids) {
    if (id < 0 || (std::size_t)id >= cfg_.vocab_size) {
      std::ostringstream os;
      os << "ift_text_branch: token id " << id
         << " outside vocabulary of size " << cfg_.vocab_size;
      throw std::out_of_range(os.str());
    }
  }
  // fixed-length input: pad ids so the CLS feature is independent of how the
  // surrounding batch was padded
  std::vector<int> ids = token_ids;
  ids.resize(cfg_.max_text_len, 0 /* pad id */);
  Tensor t = add(embedding(text_tok_embed_, ids), text_pos_embed_);
  for (const auto& b : blocks_) {
    Tensor u = ln_forward(add(t, mix(t, b)), b.ln_mix);
    t = ln_forward(add(u, ffn_forward(u, b.ffn)), b.ln_ffn);
  }
  return t;
}

Tensor IftModel::project_to_lm(const Tensor& z_hat) const {
  return add_rowvec(matmul(z_hat, proj_w_), proj_b_);
}

Tensor IftModel::lm_forward(const Tensor& prefix,
                            const std::vector<int>& token_ids,
                            const PrefixCausalMask& mask) const {
  if (prefix->cols != cfg_.lm_dim) {
    std::ostringstream os;
    os << "lm_forward: prefix width " << prefix->cols << ", expected lm_dim "
       << cfg_.lm_dim;
    throw std::invalid_argument(os.str());
  }
  if (mask.prompt_len != prefix->rows || mask.text_len != token_ids.size()) {
    std::ostringstream os;
    os << "lm_forward: mask is " << mask.prompt_len << "+" << mask.text_len
       << ", inputs are " << prefix->rows << "+" << token_ids.size();
    throw std::invalid_argument(os.str());
  }
  if (token_ids.empty()) {
    throw std::invalid_argument("lm_forward: empty token sequence");
  }
  const std::size_t t_len = token_ids.size();
  Tensor tok = embedding(lm_.tok_embed, token_ids);
  Tensor pos = slice_rows(lm_.pos_embed, 0, t_len);
  Tensor x = concat_rows({prefix, add(tok, pos)});
  for (const auto& blk : lm_.layers) {
    Tensor a = ln_forward(
        add(x, multi_head_attention(x, x, blk.attn, cfg_.lm_heads,
                                    &mask.allowed)),
        blk.ln_attn);
    x = ln_forward(add(a, ffn_forward(a, blk.ffn)), blk.ln_ffn);
  }
  Tensor text_states = slice_rows(x, prefix->rows, prefix->rows + t_len);
  return matmul(text_states, transpose(lm_.tok_embed));
}

std::map<std::string, std::size_t> IftModel::count_params(
    bool trainable_only) const {
  std::map<std::string, std::size_t> counts;
  for (const auto& [name, t] : params_) {
    if (trainable_only && !t->requires_grad) continue;
    std::string module;
    if (name.rfind("ift.", 0) == 0) {
      module = "ift";
    } else if (name.rfind("proj.", 0) == 0) {
      module = "projection";
    } else if (name.rfind("frozen.img.", 0) == 0) {
      module = "frozen_image_encoder";
    } else {
      module = "frozen_lm";
    }
    counts[module] += t->size();
  }
  return counts;
}

std::vector<NamedTensor> IftModel::trainable_params(Stage stage) const {
  std::vector<NamedTensor> out;
  for (const auto& nt : params_) {
    if (!nt.tensor->requires_grad) continue;
    const bool is_proj = nt.name.rfind("proj.", 0) == 0;
    const bool is_text_embed = nt.name.rfind("ift.text.", 0) == 0;
    switch (stage) {
      case Stage::Stage1:
        if (!is_proj) out.push_back(nt);  // projection is a stage-2 component
        break;
      case Stage::Stage2:
      case Stage::Finetune:
        // the text branch (and its embeddings) is not on the PCLM path
        if (!is_text_embed) out.push_back(nt);
        break;
    }
  }
  return out;
}

}  // namespace bita
