#include "fusediff/tensor.hpp"

#include <cblas.h>
#include <cmath>

extern "C" void openblas_set_num_threads(int) __attribute__((weak));

namespace fusediff {

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    int64_t n = 1;
    for (int d : t.shape) n *= d;
    t.v.assign(size_t(n), 0.0);
    t.g.assign(size_t(n), 0.0);
    return t;
}

void Tensor::fill_normal(Rng& rng, double std_dev) {
    std::normal_distribution<double> dist(0.0, std_dev);
    for (double& x : v) x = dist(rng);
}

namespace nn {

void pin_blas_single_thread() {
    if (openblas_set_num_threads) openblas_set_num_threads(1);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          const double* b, double beta, double* c) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, trans_a ? m : k, b,
                trans_b ? k : n, beta, c, n);
}

void layernorm_forward(const double* x, const double* gain, const double* bias, int rows, int dim,
                       double* y, double* mean, double* rstd) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + size_t(r) * size_t(dim);
        double mu = 0.0;
        for (int i = 0; i < dim; ++i) mu += xr[i];
        mu /= dim;
        double var = 0.0;
        for (int i = 0; i < dim; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= dim;
        const double rs = 1.0 / std::sqrt(var + 1e-5);
        mean[r] = mu;
        rstd[r] = rs;
        double* yr = y + size_t(r) * size_t(dim);
        for (int i = 0; i < dim; ++i) yr[i] = (xr[i] - mu) * rs * gain[i] + bias[i];
    }
}

void layernorm_backward(const double* x, const double* gain, const double* mean,
                        const double* rstd, const double* dy, int rows, int dim, double* dx,
                        double* dgain, double* dbias) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + size_t(r) * size_t(dim);
        const double* dyr = dy + size_t(r) * size_t(dim);
        double* dxr = dx + size_t(r) * size_t(dim);
        const double mu = mean[r], rs = rstd[r];
        double sum_dn = 0.0, sum_dn_n = 0.0;
        for (int i = 0; i < dim; ++i) {
            const double norm = (xr[i] - mu) * rs;
            const double dnorm = dyr[i] * gain[i];
            dgain[i] += dyr[i] * norm;
            dbias[i] += dyr[i];
            sum_dn += dnorm;
            sum_dn_n += dnorm * norm;
        }
        for (int i = 0; i < dim; ++i) {
            const double norm = (xr[i] - mu) * rs;
            const double dnorm = dyr[i] * gain[i];
            dxr[i] += rs * (dnorm - sum_dn / dim - norm * sum_dn_n / dim);
        }
    }
}

double gelu(double x) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
    constexpr double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double th = std::tanh(u);
    const double sech2 = 1.0 - th * th;
    return 0.5 * (1.0 + th) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x);
}

void softmax_rows(double* x, int rows, int n) {
    for (int r = 0; r < rows; ++r) {
        double* xr = x + size_t(r) * size_t(n);
        double mx = xr[0];
        for (int i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            xr[i] = std::exp(xr[i] - mx);
            sum += xr[i];
        }
        for (int i = 0; i < n; ++i) xr[i] /= sum;
    }
}

} // namespace nn
} // namespace fusediff
