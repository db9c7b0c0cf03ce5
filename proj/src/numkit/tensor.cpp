#include "genad/numkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "genad/errors.hpp"

namespace genad::numkit {

namespace {

size_t shape_numel(const std::vector<int>& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw ShapeError("tensor rank must be 1..3, got " + std::to_string(shape.size()));
  }
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

// Rank-2 view: rank-1 [n] reads as [1,n].
void as_matrix(const Tensor& t, int& rows, int& cols) {
  if (t.rank() == 1) {
    rows = 1;
    cols = t.shape[0];
  } else if (t.rank() == 2) {
    rows = t.shape[0];
    cols = t.shape[1];
  } else {
    throw ShapeError("expected rank<=2 tensor, got " + t.shape_str());
  }
}

}  // namespace

Tensor::Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                     shape_str());
  }
}

Tensor Tensor::zeros(std::vector<int> shape) {
  size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev) {
  size_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.normal() * stddev;
  return Tensor(std::move(shape), std::move(d));
}

Tensor Tensor::xavier(int fan_in, int fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t = zeros({fan_in, fan_out});
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Tensor Tensor::row(std::vector<double> values) {
  int n = static_cast<int>(values.size());
  return Tensor({n}, std::move(values));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor with " + std::to_string(numel()) + " elements");
  return data[0];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  int ar, ac, br, bc;
  as_matrix(a, ar, ac);
  as_matrix(b, br, bc);
  int m = trans_a ? ac : ar;
  int k = trans_a ? ar : ac;
  int kb = trans_b ? bc : br;
  int n = trans_b ? br : bc;
  if (k != kb) {
    throw ShapeError("matmul inner dims mismatch: " + a.shape_str() + (trans_a ? "^T" : "") + " x " +
                     b.shape_str() + (trans_b ? "^T" : ""));
  }
  Tensor c = Tensor::zeros({m, n});
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      double av = trans_a ? pa[static_cast<size_t>(p) * ac + i] : pa[static_cast<size_t>(i) * ac + p];
      if (av == 0.0) continue;
      const double* brow = trans_b ? nullptr : pb + static_cast<size_t>(p) * bc;
      double* crow = pc + static_cast<size_t>(i) * n;
      if (!trans_b) {
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * pb[static_cast<size_t>(j) * bc + p];
      }
    }
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("add shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("sub shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("mul shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
  return c;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = a;
  for (auto& v : out.data) v *= c;
  return out;
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  int r, c;
  as_matrix(x, r, c);
  if (bias.rank() != 1 || bias.shape[0] != c) {
    throw ShapeError("add_row bias " + bias.shape_str() + " does not match " + x.shape_str());
  }
  Tensor out = x;
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out.data[static_cast<size_t>(i) * c + j] += bias.data[static_cast<size_t>(j)];
  }
  return out;
}

Tensor tanh_t(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data) v = std::tanh(v);
  return out;
}

Tensor relu_t(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor sigmoid_t(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return out;
}

Tensor exp_t(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data) v = std::exp(v);
  return out;
}

Tensor log_t(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data) {
    if (v <= 0.0) throw NumericError("log of non-positive value");
    v = std::log(v);
  }
  return out;
}

Tensor softmax_lastaxis(const Tensor& x) {
  int lane = x.shape.back();
  size_t lanes = x.numel() / static_cast<size_t>(lane);
  Tensor out = x;
  for (size_t l = 0; l < lanes; ++l) {
    double* p = out.data.data() + l * static_cast<size_t>(lane);
    double mx = p[0];
    for (int j = 1; j < lane; ++j) mx = std::max(mx, p[j]);
    double z = 0.0;
    for (int j = 0; j < lane; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (int j = 0; j < lane; ++j) p[j] /= z;
  }
  return out;
}

Tensor weighted_softmax_lastaxis(const Tensor& x, const Tensor& w) {
  if (!x.same_shape(w)) {
    throw ShapeError("weighted softmax shape mismatch " + x.shape_str() + " vs " + w.shape_str());
  }
  int lane = x.shape.back();
  size_t lanes = x.numel() / static_cast<size_t>(lane);
  Tensor out = x;
  for (size_t l = 0; l < lanes; ++l) {
    const double* pw = w.data.data() + l * static_cast<size_t>(lane);
    double* p = out.data.data() + l * static_cast<size_t>(lane);
    double mx = -1e300;
    bool any = false;
    for (int j = 0; j < lane; ++j) {
      if (pw[j] < 0.0) throw NumericError("weighted softmax needs non-negative weights");
      if (pw[j] > 0.0) {
        any = true;
        mx = std::max(mx, p[j]);
      }
    }
    if (!any) throw NumericError("weighted softmax lane has all-zero weights");
    double z = 0.0;
    for (int j = 0; j < lane; ++j) {
      if (pw[j] > 0.0) {
        p[j] = pw[j] * std::exp(p[j] - mx);
        z += p[j];
      } else {
        p[j] = 0.0;
      }
    }
    for (int j = 0; j < lane; ++j) p[j] /= z;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  int r, c;
  as_matrix(x, r, c);
  if (gain.rank() != 1 || gain.shape[0] != c || bias.rank() != 1 || bias.shape[0] != c) {
    throw ShapeError("layer_norm gain/bias must be [" + std::to_string(c) + "]");
  }
  Tensor out = x;
  for (int i = 0; i < r; ++i) {
    double* p = out.data.data() + static_cast<size_t>(i) * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += p[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (p[j] - mean) * (p[j] - mean);
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) p[j] = (p[j] - mean) * inv * gain.data[static_cast<size_t>(j)] + bias.data[static_cast<size_t>(j)];
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects rank-2 table, got " + table.shape_str());
  int cols = table.shape[1];
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), cols});
  for (size_t i = 0; i < idx.size(); ++i) {
    int r = idx[i];
    if (r < 0 || r >= table.shape[0]) {
      throw IndexError("gather_rows index " + std::to_string(r) + " out of range [0," +
                       std::to_string(table.shape[0]) + ")");
    }
    std::copy_n(table.data.data() + static_cast<size_t>(r) * cols, cols,
                out.data.data() + i * static_cast<size_t>(cols));
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  int ar, ac, br, bc;
  as_matrix(a, ar, ac);
  as_matrix(b, br, bc);
  if (ar != br) throw ShapeError("concat_cols row mismatch " + a.shape_str() + " vs " + b.shape_str());
  Tensor out = Tensor::zeros({ar, ac + bc});
  for (int i = 0; i < ar; ++i) {
    std::copy_n(a.data.data() + static_cast<size_t>(i) * ac, ac,
                out.data.data() + static_cast<size_t>(i) * (ac + bc));
    std::copy_n(b.data.data() + static_cast<size_t>(i) * bc, bc,
                out.data.data() + static_cast<size_t>(i) * (ac + bc) + ac);
  }
  return out;
}

double sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data) s += v;
  return s;
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw ShapeError("dot numel mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace genad::numkit
