#include "bita/objectives.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace bita {

namespace {

void check_cls_shape(const Tensor& z_hat, const Tensor& cls) {
  const bool row = cls->rows == 1;
  const bool col = cls->cols == 1;
  const std::size_t d = row ? cls->cols : cls->rows;
  if ((!row && !col) || d != z_hat->cols) {
    std::ostringstream os;
    os << "pair_similarity: cls must be a length-" << z_hat->cols
       << " vector, got " << cls->rows << "x" << cls->cols;
    throw std::invalid_argument(os.str());
  }
}

}  // namespace

double pair_similarity(const Tensor& z_hat, const Tensor& cls,
                       SimilarityPooling pooling) {
  check_cls_shape(z_hat, cls);
  const std::size_t d = z_hat->cols;
  double cls_sq = 0.0;
  for (std::size_t c = 0; c < d; ++c) cls_sq += cls->value[c] * cls->value[c];
  if (cls_sq == 0.0) {
    throw std::invalid_argument("pair_similarity: zero-norm cls vector");
  }
  const double cls_inv = 1.0 / std::sqrt(cls_sq);
  double best = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (std::size_t r = 0; r < z_hat->rows; ++r) {
    const double* z = z_hat->value.data() + r * d;
    double sq = 0.0, dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      sq += z[c] * z[c];
      dot += z[c] * cls->value[c];
    }
    if (sq == 0.0) {
      std::ostringstream os;
      os << "pair_similarity: zero-norm prompt row " << r;
      throw std::invalid_argument(os.str());
    }
    const double cos = dot / std::sqrt(sq) * cls_inv;
    best = std::max(best, cos);
    sum += cos;
  }
  return pooling == SimilarityPooling::MaxOverPrompts
             ? best
             : sum / (double)z_hat->rows;
}

Tensor pair_similarity_node(const Tensor& z_hat, const Tensor& cls,
                            SimilarityPooling pooling) {
  check_cls_shape(z_hat, cls);
  Tensor cls_row = cls->rows == 1 ? cls : transpose(cls);
  Tensor zn = l2_normalize_rows(z_hat);
  Tensor cn = l2_normalize_rows(cls_row);
  Tensor dots = matmul(zn, transpose(cn));  // num_prompts x 1
  return pooling == SimilarityPooling::MaxOverPrompts ? reduce_max_all(dots)
                                                      : mean_all(dots);
}

ItcResult itc_loss(const ItcBatch& batch, const ItcConfig& cfg) {
  if (cfg.temperature <= 0.0) {
    throw std::invalid_argument("itc_loss: temperature must be > 0");
  }
  const std::size_t b = batch.prompt_outputs.size();
  if (b < 2) {
    throw std::invalid_argument(
        "itc_loss: need at least 2 pairs for a contrastive batch");
  }
  if (batch.cls_outputs.size() != b) {
    std::ostringstream os;
    os << "itc_loss: " << b << " images vs " << batch.cls_outputs.size()
       << " texts";
    throw std::invalid_argument(os.str());
  }
  // normalize once per side, then pool every (image, text) pairing
  std::vector<Tensor> zn(b), cn(b);
  for (std::size_t i = 0; i < b; ++i) {
    zn[i] = l2_normalize_rows(batch.prompt_outputs[i]);
    Tensor cls = batch.cls_outputs[i];
    cn[i] = l2_normalize_rows(cls->rows == 1 ? cls : transpose(cls));
  }
  std::vector<Tensor> entries;
  entries.reserve(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      Tensor dots = matmul(zn[i], transpose(cn[j]));
      entries.push_back(cfg.pooling == SimilarityPooling::MaxOverPrompts
                            ? reduce_max_all(dots)
                            : mean_all(dots));
    }
  }
  Tensor sim = reshape(concat_rows(entries), b, b);
  Tensor logits = scale(sim, 1.0 / cfg.temperature);
  std::vector<int> diag(b);
  std::iota(diag.begin(), diag.end(), 0);
  std::vector<std::uint8_t> all(b, 1);
  Tensor g2t = cross_entropy_rows(logits, diag, all);
  Tensor t2g = cross_entropy_rows(transpose(logits), diag, all);
  ItcResult res;
  res.loss = add(g2t, t2g);
  res.similarity = sim;
  return res;
}

Tensor pclm_loss(const Tensor& logits, const std::vector<int>& targets,
                 std::size_t prefix_len, int pad_id) {
  (void)prefix_len;  // prefix rows are excluded upstream by contract
  if (targets.size() != logits->rows) {
    std::ostringstream os;
    os << "pclm_loss: " << logits->rows << " logit rows vs " << targets.size()
       << " targets";
    throw std::invalid_argument(os.str());
  }
  std::vector<std::uint8_t> active(targets.size());
  std::size_t n_active = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    active[i] = targets[i] != pad_id;
    n_active += active[i];
  }
  if (n_active == 0) {
    throw std::invalid_argument(
        "pclm_loss: every position is padding, mean undefined");
  }
  return cross_entropy_rows(logits, targets, active);
}

}  // namespace bita
