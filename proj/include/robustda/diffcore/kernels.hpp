#pragma once

#include <cstddef>
#include <vector>

// Row-major dense kernels. Every output row is accumulated in a fixed order
// that does not depend on the batch size, so a sample scores identically
// alone or inside a batch.
namespace robustda::kernels {

/// y[r, :] = b + sum_i x[r, i] * w[i, :]
inline void dense_forward(const double* x, const double* w, const double* b, double* y,
                          std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = y + r * out;
    for (std::size_t j = 0; j < out; ++j) yr[j] = b ? b[j] : 0.0;
    const double* xr = x + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      if (xi == 0.0) continue;
      const double* wi = w + i * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xi * wi[j];
    }
  }
}

/// dx[r, :] += sum_j dy[r, j] * w[:, j]
inline void dense_backward_input(const double* dy, const double* w, double* dx, std::size_t rows,
                                 std::size_t in, std::size_t out) {
  std::vector<double> wt(in * out);
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t j = 0; j < out; ++j) wt[j * in + i] = w[i * out + j];
  for (std::size_t r = 0; r < rows; ++r) {
    double* dxr = dx + r * in;
    const double* dyr = dy + r * out;
    for (std::size_t j = 0; j < out; ++j) {
      const double g = dyr[j];
      if (g == 0.0) continue;
      const double* wj = wt.data() + j * in;
      for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wj[i];
    }
  }
}

/// dw[i, :] += sum_r x[r, i] * dy[r, :];  db[:] += sum_r dy[r, :]
inline void dense_backward_params(const double* x, const double* dy, double* dw, double* db,
                                  std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * in;
    const double* dyr = dy + r * out;
    if (dw) {
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = xr[i];
        if (xi == 0.0) continue;
        double* dwi = dw + i * out;
        for (std::size_t j = 0; j < out; ++j) dwi[j] += xi * dyr[j];
      }
    }
    if (db)
      for (std::size_t j = 0; j < out; ++j) db[j] += dyr[j];
  }
}

}  // namespace robustda::kernels
