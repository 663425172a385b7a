#include "bita/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace bita {

namespace {

// Keep BLAS single-threaded: gradient accumulation order and reduction order
// must be fixed for bit-identical reruns.
const bool blas_single_thread = [] {
  setenv("OPENBLAS_NUM_THREADS", "1", 1);
  return true;
}();

std::string shape_str(const TensorNode& t) {
  std::ostringstream os;
  os << t.rows << "x" << t.cols;
  return os.str();
}

[[noreturn]] void shape_error(const char* op, const TensorNode& a,
                              const TensorNode& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  throw std::invalid_argument(os.str());
}

Tensor node_from(std::vector<Tensor> parents, std::size_t rows,
                 std::size_t cols) {
  auto t = std::make_shared<TensorNode>();
  t->rows = rows;
  t->cols = cols;
  t->value.assign(rows * cols, 0.0);
  t->parents = std::move(parents);
  for (const auto& p : t->parents) {
    if (p->needs_grad) t->needs_grad = true;
  }
  return t;
}

}  // namespace

void TensorNode::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

void TensorNode::zero_grad() { grad.assign(value.size(), 0.0); }

Tensor make_tensor(std::size_t rows, std::size_t cols, double fill,
                   bool requires_grad) {
  if (rows == 0 || cols == 0) {
    throw std::invalid_argument("tensor: extents must be positive");
  }
  auto t = std::make_shared<TensorNode>();
  t->rows = rows;
  t->cols = cols;
  t->value.assign(rows * cols, fill);
  t->requires_grad = requires_grad;
  t->needs_grad = requires_grad;
  if (requires_grad) t->ensure_grad();
  return t;
}

Tensor make_tensor(std::size_t rows, std::size_t cols,
                   std::vector<double> values, bool requires_grad) {
  if (values.size() != rows * cols) {
    std::ostringstream os;
    os << "tensor: data length " << values.size() << " does not match shape "
       << rows << "x" << cols;
    throw std::invalid_argument(os.str());
  }
  auto t = make_tensor(rows, cols, 0.0, requires_grad);
  t->value = std::move(values);
  return t;
}

Tensor make_scalar(double v) { return make_tensor(1, 1, v); }

Graph Graph::build(const Tensor& root) {
  Graph g;
  // Iterative DFS postorder: inputs appear before every node that uses them.
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      g.order.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

void backward(const Tensor& loss) {
  if (!loss) throw std::invalid_argument("backward: null loss");
  if (loss->size() != 1) {
    std::ostringstream os;
    os << "backward: loss must be a scalar, got " << shape_str(*loss);
    throw std::invalid_argument(os.str());
  }
  Graph g = Graph::build(loss);
  for (TensorNode* n : g.order) {
    if (!n->needs_grad) continue;
    if (n->is_leaf()) {
      n->ensure_grad();  // leaves accumulate across calls
    } else {
      n->zero_grad();
    }
  }
  if (loss->needs_grad) {
    loss->ensure_grad();
    loss->grad[0] += 1.0;
  }
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->needs_grad && n->backward_fn) n->backward_fn();
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a->cols != b->rows) shape_error("matmul", *a, *b);
  const auto m = a->rows, k = a->cols, n = b->cols;
  Tensor out = node_from({a, b}, m, n);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, (int)m, (int)n,
              (int)k, 1.0, a->value.data(), (int)k, b->value.data(), (int)n,
              0.0, out->value.data(), (int)n);
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* bp = b.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, bp, op, m, k, n] {
      if (ap->needs_grad) {
        ap->ensure_grad();  // dA += dC * B^T
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, (int)m, (int)k,
                    (int)n, 1.0, op->grad.data(), (int)n, bp->value.data(),
                    (int)n, 1.0, ap->grad.data(), (int)k);
      }
      if (bp->needs_grad) {
        bp->ensure_grad();  // dB += A^T * dC
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, (int)k, (int)n,
                    (int)m, 1.0, ap->value.data(), (int)k, op->grad.data(),
                    (int)n, 1.0, bp->grad.data(), (int)n);
      }
    };
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a->rows != b->rows || a->cols != b->cols) shape_error("add", *a, *b);
  Tensor out = node_from({a, b}, a->rows, a->cols);
  for (std::size_t i = 0; i < out->size(); ++i) {
    out->value[i] = a->value[i] + b->value[i];
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* bp = b.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, bp, op] {
      for (TensorNode* p : {ap, bp}) {
        if (!p->needs_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < op->size(); ++i) p->grad[i] += op->grad[i];
      }
    };
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (v->rows != 1 || v->cols != a->cols) shape_error("add_rowvec", *a, *v);
  Tensor out = node_from({a, v}, a->rows, a->cols);
  for (std::size_t r = 0; r < a->rows; ++r) {
    for (std::size_t c = 0; c < a->cols; ++c) {
      out->at(r, c) = a->at(r, c) + v->value[c];
    }
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* vp = v.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, vp, op] {
      if (ap->needs_grad) {
        ap->ensure_grad();
        for (std::size_t i = 0; i < op->size(); ++i) {
          ap->grad[i] += op->grad[i];
        }
      }
      if (vp->needs_grad) {
        vp->ensure_grad();
        for (std::size_t r = 0; r < op->rows; ++r) {
          for (std::size_t c = 0; c < op->cols; ++c) {
            vp->grad[c] += op->grad[r * op->cols + c];
          }
        }
      }
    };
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a->rows != b->rows || a->cols != b->cols) shape_error("mul", *a, *b);
  Tensor out = node_from({a, b}, a->rows, a->cols);
  for (std::size_t i = 0; i < out->size(); ++i) {
    out->value[i] = a->value[i] * b->value[i];
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* bp = b.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, bp, op] {
      if (ap->needs_grad) {
        ap->ensure_grad();
        for (std::size_t i = 0; i < op->size(); ++i) {
          ap->grad[i] += op->grad[i] * bp->value[i];
        }
      }
      if (bp->needs_grad) {
        bp->ensure_grad();
        for (std::size_t i = 0; i < op->size(); ++i) {
          bp->grad[i] += op->grad[i] * ap->value[i];
        }
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = node_from({a}, a->rows, a->cols);
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = a->value[i] * c;
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op, c] {
      ap->ensure_grad();
      for (std::size_t i = 0; i < op->size(); ++i) {
        ap->grad[i] += op->grad[i] * c;
      }
    };
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out = node_from({a}, a->cols, a->rows);
  for (std::size_t r = 0; r < a->rows; ++r) {
    for (std::size_t c = 0; c < a->cols; ++c) {
      out->at(c, r) = a->at(r, c);
    }
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      for (std::size_t r = 0; r < op->rows; ++r) {
        for (std::size_t c = 0; c < op->cols; ++c) {
          ap->grad[c * ap->cols + r] += op->grad[r * op->cols + c];
        }
      }
    };
  }
  return out;
}

Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a->size()) {
    std::ostringstream os;
    os << "reshape: cannot view " << shape_str(*a) << " as " << rows << "x"
       << cols;
    throw std::invalid_argument(os.str());
  }
  Tensor out = node_from({a}, rows, cols);
  out->value = a->value;
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      for (std::size_t i = 0; i < op->size(); ++i) ap->grad[i] += op->grad[i];
    };
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  const std::size_t cols = parts[0]->cols;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p->cols != cols) shape_error("concat_rows", *parts[0], *p);
    rows += p->rows;
  }
  Tensor out = node_from(parts, rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.begin(), p->value.end(), out->value.begin() + off);
    off += p->size();
  }
  if (out->needs_grad) {
    TensorNode* op = out.get();
    out->backward_fn = [op] {
      std::size_t off = 0;
      for (const auto& p : op->parents) {
        if (p->needs_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->size(); ++i) {
            p->grad[i] += op->grad[off + i];
          }
        }
        off += p->size();
      }
    };
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const std::size_t rows = parts[0]->rows;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p->rows != rows) shape_error("concat_cols", *parts[0], *p);
    cols += p->cols;
  }
  Tensor out = node_from(parts, rows, cols);
  std::size_t coff = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(p->value.begin() + r * p->cols,
                p->value.begin() + (r + 1) * p->cols,
                out->value.begin() + r * cols + coff);
    }
    coff += p->cols;
  }
  if (out->needs_grad) {
    TensorNode* op = out.get();
    out->backward_fn = [op] {
      std::size_t coff = 0;
      for (const auto& p : op->parents) {
        if (p->needs_grad) {
          p->ensure_grad();
          for (std::size_t r = 0; r < p->rows; ++r) {
            for (std::size_t c = 0; c < p->cols; ++c) {
              p->grad[r * p->cols + c] += op->grad[r * op->cols + coff + c];
            }
          }
        }
        coff += p->cols;
      }
    };
  }
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a->rows) {
    std::ostringstream os;
    os << "slice_rows: range [" << begin << ", " << end << ") invalid for "
       << shape_str(*a);
    throw std::invalid_argument(os.str());
  }
  Tensor out = node_from({a}, end - begin, a->cols);
  std::copy(a->value.begin() + begin * a->cols, a->value.begin() + end * a->cols,
            out->value.begin());
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op, begin] {
      ap->ensure_grad();
      const std::size_t off = begin * ap->cols;
      for (std::size_t i = 0; i < op->size(); ++i) {
        ap->grad[off + i] += op->grad[i];
      }
    };
  }
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a->cols) {
    std::ostringstream os;
    os << "slice_cols: range [" << begin << ", " << end << ") invalid for "
       << shape_str(*a);
    throw std::invalid_argument(os.str());
  }
  Tensor out = node_from({a}, a->rows, end - begin);
  for (std::size_t r = 0; r < a->rows; ++r) {
    std::copy(a->value.begin() + r * a->cols + begin,
              a->value.begin() + r * a->cols + end,
              out->value.begin() + r * out->cols);
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op, begin] {
      ap->ensure_grad();
      for (std::size_t r = 0; r < op->rows; ++r) {
        for (std::size_t c = 0; c < op->cols; ++c) {
          ap->grad[r * ap->cols + begin + c] += op->grad[r * op->cols + c];
        }
      }
    };
  }
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out = node_from({a}, a->rows, a->cols);
  for (std::size_t r = 0; r < a->rows; ++r) {
    const double* x = a->value.data() + r * a->cols;
    double* y = out->value.data() + r * a->cols;
    double mx = x[0];
    for (std::size_t c = 1; c < a->cols; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < a->cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      sum += y[c];
    }
    for (std::size_t c = 0; c < a->cols; ++c) y[c] /= sum;
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      for (std::size_t r = 0; r < op->rows; ++r) {
        const double* y = op->value.data() + r * op->cols;
        const double* gy = op->grad.data() + r * op->cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < op->cols; ++c) dot += gy[c] * y[c];
        double* gx = ap->grad.data() + r * op->cols;
        for (std::size_t c = 0; c < op->cols; ++c) {
          gx[c] += y[c] * (gy[c] - dot);
        }
      }
    };
  }
  return out;
}

Tensor masked_softmax_rows(const Tensor& a,
                           const std::vector<std::uint8_t>& mask) {
  if (mask.size() != a->size()) {
    throw std::invalid_argument(
        "masked_softmax_rows: mask size does not match tensor");
  }
  Tensor out = node_from({a}, a->rows, a->cols);
  for (std::size_t r = 0; r < a->rows; ++r) {
    const double* x = a->value.data() + r * a->cols;
    const std::uint8_t* m = mask.data() + r * a->cols;
    double* y = out->value.data() + r * a->cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < a->cols; ++c) {
      if (m[c]) mx = std::max(mx, x[c]);
    }
    if (!std::isfinite(mx)) {
      std::ostringstream os;
      os << "masked_softmax_rows: row " << r << " has no allowed entries";
      throw std::invalid_argument(os.str());
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < a->cols; ++c) {
      y[c] = m[c] ? std::exp(x[c] - mx) : 0.0;
      sum += y[c];
    }
    for (std::size_t c = 0; c < a->cols; ++c) y[c] /= sum;
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    // Masked outputs are exactly zero, so the softmax Jacobian form already
    // sends exactly zero gradient to masked inputs.
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      for (std::size_t r = 0; r < op->rows; ++r) {
        const double* y = op->value.data() + r * op->cols;
        const double* gy = op->grad.data() + r * op->cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < op->cols; ++c) dot += gy[c] * y[c];
        double* gx = ap->grad.data() + r * op->cols;
        for (std::size_t c = 0; c < op->cols; ++c) {
          if (y[c] != 0.0) gx[c] += y[c] * (gy[c] - dot);
        }
      }
    };
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x->cols < 2) {
    throw std::invalid_argument("layer_norm: last axis must have extent >= 2");
  }
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  if (gamma->rows != 1 || gamma->cols != x->cols) {
    shape_error("layer_norm(gamma)", *x, *gamma);
  }
  if (beta->rows != 1 || beta->cols != x->cols) {
    shape_error("layer_norm(beta)", *x, *beta);
  }
  Tensor out = node_from({x, gamma, beta}, x->rows, x->cols);
  const std::size_t d = x->cols;
  // cache normalized activations and inverse stddevs for backward
  auto xhat = std::make_shared<std::vector<double>>(x->size());
  auto istd = std::make_shared<std::vector<double>>(x->rows);
  for (std::size_t r = 0; r < x->rows; ++r) {
    const double* xr = x->value.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= (double)d;
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double dv = xr[c] - mean;
      var += dv * dv;
    }
    var /= (double)d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*istd)[r] = inv;
    double* h = xhat->data() + r * d;
    double* y = out->value.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) {
      h[c] = (xr[c] - mean) * inv;
      y[c] = gamma->value[c] * h[c] + beta->value[c];
    }
  }
  if (out->needs_grad) {
    TensorNode* xp = x.get();
    TensorNode* gp = gamma.get();
    TensorNode* bp = beta.get();
    TensorNode* op = out.get();
    out->backward_fn = [xp, gp, bp, op, xhat, istd, d] {
      for (std::size_t r = 0; r < op->rows; ++r) {
        const double* gy = op->grad.data() + r * d;
        const double* h = xhat->data() + r * d;
        if (gp->needs_grad) {
          gp->ensure_grad();
          for (std::size_t c = 0; c < d; ++c) gp->grad[c] += gy[c] * h[c];
        }
        if (bp->needs_grad) {
          bp->ensure_grad();
          for (std::size_t c = 0; c < d; ++c) bp->grad[c] += gy[c];
        }
        if (xp->needs_grad) {
          xp->ensure_grad();
          double mean_g = 0.0, mean_gh = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = gy[c] * gp->value[c];
            mean_g += gh;
            mean_gh += gh * h[c];
          }
          mean_g /= (double)d;
          mean_gh /= (double)d;
          double* gx = xp->grad.data() + r * d;
          for (std::size_t c = 0; c < d; ++c) {
            const double gh = gy[c] * gp->value[c];
            gx[c] += (*istd)[r] * (gh - mean_g - h[c] * mean_gh);
          }
        }
      }
    };
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  static const double kC = std::sqrt(2.0 / M_PI);
  Tensor out = node_from({x}, x->rows, x->cols);
  for (std::size_t i = 0; i < x->size(); ++i) {
    const double v = x->value[i];
    const double u = kC * (v + 0.044715 * v * v * v);
    out->value[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  if (out->needs_grad) {
    TensorNode* xp = x.get();
    TensorNode* op = out.get();
    out->backward_fn = [xp, op] {
      xp->ensure_grad();
      for (std::size_t i = 0; i < op->size(); ++i) {
        const double v = xp->value[i];
        const double u = kC * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double sech2 = 1.0 - t * t;
        const double du = kC * (1.0 + 3.0 * 0.044715 * v * v);
        xp->grad[i] += op->grad[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
      }
    };
  }
  return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("embedding: empty id sequence");
  for (int id : ids) {
    if (id < 0 || (std::size_t)id >= table->rows) {
      std::ostringstream os;
      os << "embedding: id " << id << " out of range for vocabulary of "
         << table->rows;
      throw std::out_of_range(os.str());
    }
  }
  Tensor out = node_from({table}, ids.size(), table->cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy(table->value.begin() + (std::size_t)ids[r] * table->cols,
              table->value.begin() + ((std::size_t)ids[r] + 1) * table->cols,
              out->value.begin() + r * table->cols);
  }
  if (out->needs_grad) {
    TensorNode* tp = table.get();
    TensorNode* op = out.get();
    auto idv = std::make_shared<std::vector<int>>(ids);
    out->backward_fn = [tp, op, idv] {
      tp->ensure_grad();
      for (std::size_t r = 0; r < idv->size(); ++r) {
        const std::size_t row = (std::size_t)(*idv)[r];
        for (std::size_t c = 0; c < op->cols; ++c) {
          tp->grad[row * tp->cols + c] += op->grad[r * op->cols + c];
        }
      }
    };
  }
  return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<std::uint8_t>& active) {
  if (targets.size() != logits->rows || active.size() != logits->rows) {
    std::ostringstream os;
    os << "cross_entropy_rows: " << logits->rows << " logit rows vs "
       << targets.size() << " targets / " << active.size() << " active flags";
    throw std::invalid_argument(os.str());
  }
  std::size_t n_active = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (!active[r]) continue;
    ++n_active;
    if (targets[r] < 0 || (std::size_t)targets[r] >= logits->cols) {
      std::ostringstream os;
      os << "cross_entropy_rows: target " << targets[r]
         << " out of range for vocabulary of " << logits->cols;
      throw std::out_of_range(os.str());
    }
  }
  if (n_active == 0) {
    throw std::invalid_argument(
        "cross_entropy_rows: no active positions, mean undefined");
  }
  Tensor out = node_from({logits}, 1, 1);
  const std::size_t v = logits->cols;
  auto probs = std::make_shared<std::vector<double>>(logits->size(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < logits->rows; ++r) {
    if (!active[r]) continue;
    const double* x = logits->value.data() + r * v;
    double mx = x[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, x[c]);
    double sum = 0.0;
    double* p = probs->data() + r * v;
    for (std::size_t c = 0; c < v; ++c) {
      p[c] = std::exp(x[c] - mx);
      sum += p[c];
    }
    for (std::size_t c = 0; c < v; ++c) p[c] /= sum;
    total += std::log(sum) + mx - x[(std::size_t)targets[r]];
  }
  out->value[0] = total / (double)n_active;
  if (out->needs_grad) {
    TensorNode* lp = logits.get();
    TensorNode* op = out.get();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto act = std::make_shared<std::vector<std::uint8_t>>(active);
    out->backward_fn = [lp, op, probs, tgt, act, v, n_active] {
      lp->ensure_grad();
      const double g = op->grad[0] / (double)n_active;
      for (std::size_t r = 0; r < lp->rows; ++r) {
        if (!(*act)[r]) continue;  // inactive rows: exactly zero gradient
        const double* p = probs->data() + r * v;
        double* gx = lp->grad.data() + r * v;
        for (std::size_t c = 0; c < v; ++c) gx[c] += g * p[c];
        gx[(std::size_t)(*tgt)[r]] -= g;
      }
    };
  }
  return out;
}

Tensor sum_all(const Tensor& a) {
  Tensor out = node_from({a}, 1, 1);
  double s = 0.0;
  for (double x : a->value) s += x;
  out->value[0] = s;
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op] {
      ap->ensure_grad();
      for (std::size_t i = 0; i < ap->size(); ++i) ap->grad[i] += op->grad[0];
    };
  }
  return out;
}

Tensor mean_all(const Tensor& a) {
  Tensor out = sum_all(a);
  return scale(out, 1.0 / (double)a->size());
}

Tensor reduce_max_all(const Tensor& a) {
  Tensor out = node_from({a}, 1, 1);
  std::size_t arg = 0;
  for (std::size_t i = 1; i < a->size(); ++i) {
    if (a->value[i] > a->value[arg]) arg = i;
  }
  out->value[0] = a->value[arg];
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op, arg] {
      ap->ensure_grad();
      ap->grad[arg] += op->grad[0];
    };
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& a) {
  Tensor out = node_from({a}, a->rows, a->cols);
  auto inv_norm = std::make_shared<std::vector<double>>(a->rows);
  for (std::size_t r = 0; r < a->rows; ++r) {
    const double* x = a->value.data() + r * a->cols;
    double sq = 0.0;
    for (std::size_t c = 0; c < a->cols; ++c) sq += x[c] * x[c];
    if (sq == 0.0) {
      std::ostringstream os;
      os << "l2_normalize_rows: row " << r << " has zero norm";
      throw std::invalid_argument(os.str());
    }
    const double inv = 1.0 / std::sqrt(sq);
    (*inv_norm)[r] = inv;
    double* y = out->value.data() + r * a->cols;
    for (std::size_t c = 0; c < a->cols; ++c) y[c] = x[c] * inv;
  }
  if (out->needs_grad) {
    TensorNode* ap = a.get();
    TensorNode* op = out.get();
    out->backward_fn = [ap, op, inv_norm] {
      ap->ensure_grad();
      for (std::size_t r = 0; r < op->rows; ++r) {
        const double* y = op->value.data() + r * op->cols;
        const double* gy = op->grad.data() + r * op->cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < op->cols; ++c) dot += y[c] * gy[c];
        double* gx = ap->grad.data() + r * op->cols;
        for (std::size_t c = 0; c < op->cols; ++c) {
          gx[c] += (*inv_norm)[r] * (gy[c] - y[c] * dot);
        }
      }
    };
  }
  return out;
}

}  // namespace bita
