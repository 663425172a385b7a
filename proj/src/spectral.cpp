#include "bita/spectral.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace bita {

namespace {

void check_finite_pair(const std::vector<double>& re,
                       const std::vector<double>& im) {
  for (double v : re) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("ComplexVector: non-finite real entry");
    }
  }
  for (double v : im) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("ComplexVector: non-finite imaginary entry");
    }
  }
}

// In-place radix-2 FFT over interleaved-free separate re/im arrays with the
// given stride (stride > 1 transforms a column of a row-major matrix).
void fft_strided(double* re, double* im, std::size_t n, std::size_t stride) {
  if (n <= 1) return;
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i * stride], re[j * stride]);
      std::swap(im[i * stride], im[j * stride]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len >> 1;
    const double ang = -2.0 * M_PI / (double)len;
    for (std::size_t j = 0; j < half; ++j) {
      // direct twiddles rather than a multiplicative recurrence: keeps the
      // error at O(log M * eps) for the 1e-10 naive-DFT equivalence bound
      const double wr = std::cos(ang * (double)j);
      const double wi = std::sin(ang * (double)j);
      for (std::size_t i = j; i < n; i += len) {
        const std::size_t a = i * stride;
        const std::size_t b = (i + half) * stride;
        const double tr = re[b] * wr - im[b] * wi;
        const double ti = re[b] * wi + im[b] * wr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
      }
    }
  }
}

}  // namespace

ComplexVector::ComplexVector(std::vector<double> real, std::vector<double> imag)
    : re(std::move(real)), im(std::move(imag)) {
  if (re.size() != im.size()) {
    throw std::invalid_argument(
        "ComplexVector: real and imaginary parts differ in length");
  }
  check_finite_pair(re, im);
}

bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

ComplexVector dft_naive(const ComplexVector& x) {
  const std::size_t m = x.size();
  if (m == 0) throw std::invalid_argument("dft_naive: M must be >= 1");
  ComplexVector out(m);
  for (std::size_t k = 0; k < m; ++k) {
    double sr = 0.0, si = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      // exact integer phase index avoids large-angle trig error
      const double ang = -2.0 * M_PI * (double)((j * k) % m) / (double)m;
      const double c = std::cos(ang);
      const double s = std::sin(ang);
      sr += x.re[j] * c - x.im[j] * s;
      si += x.re[j] * s + x.im[j] * c;
    }
    out.re[k] = sr;
    out.im[k] = si;
  }
  return out;
}

ComplexVector fft(const ComplexVector& x) {
  const std::size_t m = x.size();
  if (!is_power_of_two(m)) {
    std::ostringstream os;
    os << "fft: length " << m
       << " is not a power of two; pad the input or use dft_naive";
    throw std::invalid_argument(os.str());
  }
  ComplexVector out = x;
  fft_strided(out.re.data(), out.im.data(), m, 1);
  return out;
}

std::vector<double> fourier_mix_raw(const std::vector<double>& x,
                                    std::size_t rows, std::size_t cols) {
  std::vector<double> re = x;
  std::vector<double> im(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    fft_strided(re.data() + r * cols, im.data() + r * cols, cols, 1);
  }
  for (std::size_t c = 0; c < cols; ++c) {
    fft_strided(re.data() + c, im.data() + c, rows, cols);
  }
  return re;  // real part of the composed 2-D transform
}

Tensor fourier_mix(const Tensor& x) {
  if (!is_power_of_two(x->rows) || !is_power_of_two(x->cols)) {
    std::ostringstream os;
    os << "fourier_mix: extents " << x->rows << "x" << x->cols
       << " must be powers of two; pad the input or use dft_naive";
    throw std::invalid_argument(os.str());
  }
  auto out = std::make_shared<TensorNode>();
  out->rows = x->rows;
  out->cols = x->cols;
  out->value = fourier_mix_raw(x->value, x->rows, x->cols);
  out->parents = {x};
  out->needs_grad = x->needs_grad;
  if (out->needs_grad) {
    TensorNode* xp = x.get();
    TensorNode* op = out.get();
    // self-adjoint: the adjoint map is the forward kernel applied to the
    // upstream gradient
    out->backward_fn = [xp, op] {
      xp->ensure_grad();
      std::vector<double> g = fourier_mix_raw(op->grad, op->rows, op->cols);
      for (std::size_t i = 0; i < g.size(); ++i) xp->grad[i] += g[i];
    };
  }
  return out;
}

}  // namespace bita
