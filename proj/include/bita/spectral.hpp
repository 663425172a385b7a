#pragma once

#include <cstddef>
#include <vector>

#include "bita/tensor.hpp"

namespace bita {

struct ComplexVector {
  std::vector<double> re;
  std::vector<double> im;

  ComplexVector() = default;
  explicit ComplexVector(std::size_t n) : re(n, 0.0), im(n, 0.0) {}
  ComplexVector(std::vector<double> real, std::vector<double> imag);
  std::size_t size() const { return re.size(); }
};

enum class MixerKind { FourierMix, SelfAttention };

// O(M^2) reference DFT, unnormalized forward convention:
//   X_k = sum_m exp(-i 2 pi m k / M) x_m
// Works for any M >= 1; this is the oracle the FFT is checked against.
ComplexVector dft_naive(const ComplexVector& x);

// Iterative bit-reversal radix-2 FFT, same convention as dft_naive.
// M must be a power of two.
ComplexVector fft(const ComplexVector& x);

bool is_power_of_two(std::size_t n);

// Token-mixing layer: Re(F_seq(F_hidden(x))) on a [seq x hidden] tensor.
// One 1-D DFT along the hidden axis, one along the sequence axis, real part
// taken once after both. Parameter-free linear map; as a real-linear map its
// kernel cos(2pi(m1 k1/S + m2 k2/H)) is symmetric, so the map is self-adjoint
// and backward reuses the forward kernel. Both extents must be powers of two.
Tensor fourier_mix(const Tensor& x);

// Plain-buffer kernel used by fourier_mix (and its adjoint). Exposed for
// benchmarking without graph overhead.
std::vector<double> fourier_mix_raw(const std::vector<double>& x,
                                    std::size_t rows, std::size_t cols);

}  // namespace bita
