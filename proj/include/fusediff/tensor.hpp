#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fusediff/rng.hpp"

namespace fusediff {

// Dense double tensor with a co-located gradient buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;
    std::vector<double> g;

    static Tensor zeros(std::vector<int> shape);

    int64_t size() const { return int64_t(v.size()); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
    void fill_normal(Rng& rng, double std_dev);
    void fill(double value) { std::fill(v.begin(), v.end(), value); }
};

namespace nn {

// Row-major C = alpha * op(A) op(B) + beta * C via BLAS.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          const double* b, double beta, double* c);

// Pin BLAS to one thread for reproducible, low-overhead small matmuls.
void pin_blas_single_thread();

// y = layer_norm(x) * gain + bias over the last dimension; caches mean/rstd.
void layernorm_forward(const double* x, const double* gain, const double* bias, int rows, int dim,
                       double* y, double* mean, double* rstd);
void layernorm_backward(const double* x, const double* gain, const double* mean,
                        const double* rstd, const double* dy, int rows, int dim, double* dx,
                        double* dgain, double* dbias);

// tanh approximation of the smooth gelu nonlinearity
double gelu(double x);
double gelu_grad(double x);

// in-place softmax over each row of length n
void softmax_rows(double* x, int rows, int n);

} // namespace nn
} // namespace fusediff
