#pragma once

#include <vector>

#include "bita/tensor.hpp"

namespace bita {

enum class SimilarityPooling { MaxOverPrompts, MeanOverPrompts };

struct ItcConfig {
  double temperature = 0.07;
  SimilarityPooling pooling = SimilarityPooling::MaxOverPrompts;
};

// One batch of stage-1 outputs: per pair, the image branch's prompt rows
// [num_prompts x d] and the text branch's [CLS] row [1 x d]; index i of each
// image matches text i.
struct ItcBatch {
  std::vector<Tensor> prompt_outputs;
  std::vector<Tensor> cls_outputs;
};

struct ItcResult {
  Tensor loss;        // scalar
  Tensor similarity;  // B x B pooled cosine matrix (pre-temperature)
};

// Cosine of L2-normalized vectors, pooled over the prompt rows. Plain-value
// form used for retrieval; the graph form below feeds the loss.
double pair_similarity(const Tensor& z_hat, const Tensor& cls,
                       SimilarityPooling pooling);
Tensor pair_similarity_node(const Tensor& z_hat, const Tensor& cls,
                            SimilarityPooling pooling);

// Bidirectional InfoNCE over the batch: row-softmax (image-to-text) plus
// column-softmax (text-to-image) cross-entropy against the diagonal, each
// averaged over the batch, at temperature cfg.temperature.
ItcResult itc_loss(const ItcBatch& batch, const ItcConfig& cfg);

// Mean next-token cross-entropy over non-pad text positions. logits must
// already exclude prefix rows (lm_forward returns text positions only);
// prefix_len documents the mask the logits were produced under.
Tensor pclm_loss(const Tensor& logits, const std::vector<int>& targets,
                 std::size_t prefix_len, int pad_id);

}  // namespace bita
