#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "genad/rng.hpp"

namespace genad::numkit {

// Dense row-major tensor of doubles, rank 1..3. 64-bit floats throughout:
// downstream incentive checks compare small utility differences that float32
// would contaminate.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0);
  static Tensor xavier(int fan_in, int fan_out, Rng& rng);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> values);

  int rank() const { return static_cast<int>(shape.size()); }
  size_t numel() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  double item() const;  // numel()==1 or throws
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  std::string shape_str() const;
  bool all_finite() const;
};

// ---- kernels (forward math shared by the tape ops and the no-grad path) ----

// c = a @ b, optionally transposing either operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_row(const Tensor& x, const Tensor& bias);  // [n,d] + [d]
Tensor tanh_t(const Tensor& x);
Tensor relu_t(const Tensor& x);
Tensor sigmoid_t(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor log_t(const Tensor& x);

// Numerically stable softmax along the last axis, lane by lane.
Tensor softmax_lastaxis(const Tensor& x);
// z_k = w_k exp(x_k) / sum_j w_j exp(x_j) per lane; entries with w==0 get z==0.
// Lanes where every weight is 0 throw.
Tensor weighted_softmax_lastaxis(const Tensor& x, const Tensor& w);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gather_rows(const Tensor& table, const std::vector<int>& idx);
Tensor concat_cols(const Tensor& a, const Tensor& b);

double sum_all(const Tensor& x);
double dot(const Tensor& a, const Tensor& b);

}  // namespace genad::numkit
