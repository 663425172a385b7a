#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bita {

// Dense 2-D double tensor participating in a dynamically built reverse-mode
// graph. Vectors are represented as 1xN or Nx1; a scalar is 1x1. Row-major.
//
// Ops record a backward closure that accumulates into the parents' grad
// buffers. Gradients flow only along paths that reach a requires_grad leaf
// (needs_grad), so frozen subgraphs cost nothing at backward time.
struct TensorNode;
using Tensor = std::shared_ptr<TensorNode>;

struct TensorNode {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;  // rows*cols, row-major
  std::vector<double> grad;   // empty until needed; same size as value
  bool requires_grad = false; // trainable leaf: grad persists across steps
  bool needs_grad = false;    // some requires_grad leaf is reachable below
  std::string name;           // parameter name for leaves (diagnostics)

  std::vector<Tensor> parents;
  std::function<void()> backward_fn;

  std::size_t size() const { return rows * cols; }
  bool is_leaf() const { return parents.empty(); }
  double at(std::size_t r, std::size_t c) const { return value[r * cols + c]; }
  double& at(std::size_t r, std::size_t c) { return value[r * cols + c]; }
  void ensure_grad();   // allocate zero-filled grad buffer if absent
  void zero_grad();
};

Tensor make_tensor(std::size_t rows, std::size_t cols, double fill = 0.0,
                   bool requires_grad = false);
Tensor make_tensor(std::size_t rows, std::size_t cols,
                   std::vector<double> values, bool requires_grad = false);
Tensor make_scalar(double v);

// Topologically ordered view of the graph below a root (inputs before users).
struct Graph {
  std::vector<TensorNode*> order;
  static Graph build(const Tensor& root);
};

// Reverse-mode sweep from a scalar loss. Accumulates into requires_grad
// leaves; interior grad buffers are reset per call, leaf buffers are not
// (repeated backward sums, matching gradient accumulation semantics).
void backward(const Tensor& loss);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor add_rowvec(const Tensor& a, const Tensor& v);    // v is 1 x cols
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double c);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor softmax_rows(const Tensor& a);
// Softmax over the allowed entries of each row; masked entries are exactly 0
// in the output and receive exactly zero gradient. mask is row-major 0/1 of
// the same shape; every row must allow at least one entry.
Tensor masked_softmax_rows(const Tensor& a, const std::vector<std::uint8_t>& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
// Mean next-token NLL over rows with active[r] != 0. Stable log-sum-exp.
// Inactive rows contribute exactly zero loss and zero logit gradient.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<std::uint8_t>& active);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor reduce_max_all(const Tensor& a);     // subgradient to first argmax
Tensor l2_normalize_rows(const Tensor& a);  // error on zero-norm rows

}  // namespace bita
