#include "genad/numkit/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "genad/errors.hpp"

namespace genad::numkit {

namespace {
constexpr double kBceEps = 1e-7;

void check_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite input");
}
}  // namespace

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backfn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backfn = std::move(backfn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw IndexError("bad tape handle");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

Var Tape::input(const Tensor& value) { return push(value, true, nullptr); }
Var Tape::constant(const Tensor& value) { return push(value, false, nullptr); }

const Tensor& Tape::val(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.has_grad) throw NumericError("no gradient computed for this node");
  return n.grad;
}

bool Tape::has_grad(Var v) const { return node(v).has_grad; }

double* Tape::grad_ptr(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  return n.has_grad ? n.grad.data.data() : nullptr;
}

void Tape::accum(int id, const Tensor& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.has_grad) return;
  if (g.numel() != n.grad.numel()) throw ShapeError("gradient shape mismatch in accum");
  for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
}

void Tape::accum_at(int id, size_t flat, double g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.has_grad) return;
  n.grad.data[flat] += g;
}

void Tape::backward(Var loss) {
  if (backward_done_) throw NumericError("backward already run on this tape");
  const Node& ln = node(loss);
  if (ln.value.numel() != 1) throw ShapeError("backward target must be scalar");
  if (!ln.requires_grad) throw NumericError("backward target does not depend on any input");
  backward_done_ = true;

  // Every requires_grad node gets a buffer; reachability from the loss is
  // handled implicitly (unreached buffers just stay zero and their backfns,
  // when run, propagate zeros, which is cheap at this scale except it is not:
  // skip nodes past the loss entirely).
  for (int id = 0; id <= loss.id; ++id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.requires_grad) {
      n.grad = Tensor::zeros(n.value.shape);
      n.has_grad = true;
    }
  }
  nodes_[static_cast<size_t>(loss.id)].grad.data[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.requires_grad && n.backfn) n.backfn(*this);
  }
}

// ---- arithmetic ----

Var Tape::add(Var a, Var b) {
  Tensor y = numkit::add(val(a), val(b));
  bool g = rg(a) || rg(b);
  int ia = a.id, ib = b.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    t.accum(ia, gy);
    t.accum(ib, gy);
  });
}

Var Tape::sub(Var a, Var b) {
  Tensor y = numkit::sub(val(a), val(b));
  bool g = rg(a) || rg(b);
  int ia = a.id, ib = b.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    t.accum(ia, gy);
    if (double* gb = t.grad_ptr(ib)) {
      for (size_t i = 0; i < gy.data.size(); ++i) gb[i] -= gy.data[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  Tensor y = numkit::mul(val(a), val(b));
  bool g = rg(a) || rg(b);
  int ia = a.id, ib = b.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    const Tensor& vb = t.nodes_[static_cast<size_t>(ib)].value;
    if (double* ga = t.grad_ptr(ia)) {
      for (size_t i = 0; i < gy.data.size(); ++i) ga[i] += gy.data[i] * vb.data[i];
    }
    if (double* gb = t.grad_ptr(ib)) {
      for (size_t i = 0; i < gy.data.size(); ++i) gb[i] += gy.data[i] * va.data[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  Tensor y = numkit::scale(val(a), c);
  bool g = rg(a);
  int ia = a.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    if (double* ga = t.grad_ptr(ia)) {
      for (size_t i = 0; i < gy.data.size(); ++i) ga[i] += c * gy.data[i];
    }
  });
}

Var Tape::add_const(Var a, const Tensor& c) {
  Tensor y = numkit::add(val(a), c);
  bool g = rg(a);
  int ia = a.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    t.accum(ia, t.nodes_[static_cast<size_t>(out)].grad);
  });
}

Var Tape::mul_const(Var a, const Tensor& c) {
  Tensor y = numkit::mul(val(a), c);
  bool g = rg(a);
  int ia = a.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [c, ia, out](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    if (double* ga = t.grad_ptr(ia)) {
      for (size_t i = 0; i < gy.data.size(); ++i) ga[i] += gy.data[i] * c.data[i];
    }
  });
}

Var Tape::add_row(Var x, Var bias) {
  Tensor y = numkit::add_row(val(x), val(bias));
  bool g = rg(x) || rg(bias);
  int ix = x.id, ib = bias.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    t.accum(ix, gy);
    if (double* gb = t.grad_ptr(ib)) {
      int cols = t.nodes_[static_cast<size_t>(ib)].value.shape[0];
      int rows = static_cast<int>(gy.numel()) / cols;
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) gb[j] += gy.data[static_cast<size_t>(i) * cols + j];
      }
    }
  });
}

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  if (val(a).rank() != 2 || val(b).rank() != 2) {
    throw ShapeError("tape matmul expects rank-2 operands (reshape first)");
  }
  Tensor y = numkit::matmul(val(a), val(b), trans_a, trans_b);
  bool g = rg(a) || rg(b);
  int ia = a.id, ib = b.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& va = t.nodes_[static_cast<size_t>(ia)].value;
    const Tensor& vb = t.nodes_[static_cast<size_t>(ib)].value;
    if (t.grad_ptr(ia)) {
      Tensor da = trans_a ? numkit::matmul(vb, gy, trans_b, true)
                          : numkit::matmul(gy, vb, false, !trans_b);
      t.accum(ia, da);
    }
    if (t.grad_ptr(ib)) {
      Tensor db = trans_b ? numkit::matmul(gy, va, true, trans_a)
                          : numkit::matmul(va, gy, !trans_a, false);
      t.accum(ib, db);
    }
  });
}

// ---- activations ----

Var Tape::relu(Var x) {
  Tensor y = relu_t(val(x));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& vx = t.nodes_[static_cast<size_t>(ix)].value;
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < gy.data.size(); ++i) {
        if (vx.data[i] > 0.0) gx[i] += gy.data[i];
      }
    }
  });
}

Var Tape::tanh_(Var x) {
  Tensor y = tanh_t(val(x));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& vy = t.nodes_[static_cast<size_t>(out)].value;
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < gy.data.size(); ++i) {
        gx[i] += gy.data[i] * (1.0 - vy.data[i] * vy.data[i]);
      }
    }
  });
}

Var Tape::sigmoid(Var x) {
  Tensor y = sigmoid_t(val(x));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& vy = t.nodes_[static_cast<size_t>(out)].value;
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < gy.data.size(); ++i) {
        gx[i] += gy.data[i] * vy.data[i] * (1.0 - vy.data[i]);
      }
    }
  });
}

Var Tape::exp_(Var x) {
  Tensor y = exp_t(val(x));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& vy = t.nodes_[static_cast<size_t>(out)].value;
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < gy.data.size(); ++i) gx[i] += gy.data[i] * vy.data[i];
    }
  });
}

Var Tape::log_(Var x) {
  Tensor y = log_t(val(x));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& vx = t.nodes_[static_cast<size_t>(ix)].value;
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < gy.data.size(); ++i) gx[i] += gy.data[i] / vx.data[i];
    }
  });
}

// ---- reductions ----

Var Tape::sum(Var x) {
  Tensor y = Tensor::scalar(sum_all(val(x)));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    double gy = t.nodes_[static_cast<size_t>(out)].grad.data[0];
    if (double* gx = t.grad_ptr(ix)) {
      size_t n = t.nodes_[static_cast<size_t>(ix)].value.numel();
      for (size_t i = 0; i < n; ++i) gx[i] += gy;
    }
  });
}

Var Tape::mean(Var x) {
  size_t n = val(x).numel();
  Tensor y = Tensor::scalar(sum_all(val(x)) / static_cast<double>(n));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    double gy = t.nodes_[static_cast<size_t>(out)].grad.data[0] / static_cast<double>(n);
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < n; ++i) gx[i] += gy;
    }
  });
}

Var Tape::mean_rows(Var x) {
  const Tensor& vx = val(x);
  if (vx.rank() != 2) throw ShapeError("mean_rows expects rank-2, got " + vx.shape_str());
  int rows = vx.shape[0], cols = vx.shape[1];
  Tensor y = Tensor::zeros({1, cols});
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) y.data[static_cast<size_t>(j)] += vx.at(i, j);
  }
  for (auto& v : y.data) v /= rows;
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    if (double* gx = t.grad_ptr(ix)) {
      for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
          gx[static_cast<size_t>(i) * cols + j] += gy.data[static_cast<size_t>(j)] / rows;
        }
      }
    }
  });
}

// ---- softmax family ----

Var Tape::softmax(Var x) {
  check_finite(val(x), "softmax");
  Tensor y = softmax_lastaxis(val(x));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& vy = t.nodes_[static_cast<size_t>(out)].value;
    if (double* gx = t.grad_ptr(ix)) {
      int lane = vy.shape.back();
      size_t lanes = vy.numel() / static_cast<size_t>(lane);
      for (size_t l = 0; l < lanes; ++l) {
        const double* py = vy.data.data() + l * static_cast<size_t>(lane);
        const double* pg = gy.data.data() + l * static_cast<size_t>(lane);
        double dot = 0.0;
        for (int j = 0; j < lane; ++j) dot += pg[j] * py[j];
        double* px = gx + l * static_cast<size_t>(lane);
        for (int j = 0; j < lane; ++j) px[j] += py[j] * (pg[j] - dot);
      }
    }
  });
}

Var Tape::weighted_softmax(Var x, const Tensor& w) {
  check_finite(val(x), "weighted_softmax");
  Tensor y = weighted_softmax_lastaxis(val(x), w);
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  // Zero-weight entries have z identically 0, so the plain softmax Jacobian
  // formula already routes them no gradient.
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& vy = t.nodes_[static_cast<size_t>(out)].value;
    if (double* gx = t.grad_ptr(ix)) {
      int lane = vy.shape.back();
      size_t lanes = vy.numel() / static_cast<size_t>(lane);
      for (size_t l = 0; l < lanes; ++l) {
        const double* py = vy.data.data() + l * static_cast<size_t>(lane);
        const double* pg = gy.data.data() + l * static_cast<size_t>(lane);
        double dot = 0.0;
        for (int j = 0; j < lane; ++j) dot += pg[j] * py[j];
        double* px = gx + l * static_cast<size_t>(lane);
        for (int j = 0; j < lane; ++j) px[j] += py[j] * (pg[j] - dot);
      }
    }
  });
}

Var Tape::weighted_log_softmax(Var x, const Tensor& w) {
  check_finite(val(x), "weighted_log_softmax");
  Tensor z = weighted_softmax_lastaxis(val(x), w);
  Tensor y = z;
  for (size_t i = 0; i < y.data.size(); ++i) {
    y.data[i] = w.data[i] > 0.0 ? std::log(z.data[i]) : 0.0;
  }
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [z, w, ix, out](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    if (double* gx = t.grad_ptr(ix)) {
      int lane = z.shape.back();
      size_t lanes = z.numel() / static_cast<size_t>(lane);
      for (size_t l = 0; l < lanes; ++l) {
        const double* pz = z.data.data() + l * static_cast<size_t>(lane);
        const double* pg = gy.data.data() + l * static_cast<size_t>(lane);
        const double* pw = w.data.data() + l * static_cast<size_t>(lane);
        double total = 0.0;
        for (int j = 0; j < lane; ++j) {
          if (pw[j] > 0.0) total += pg[j];
        }
        double* px = gx + l * static_cast<size_t>(lane);
        for (int j = 0; j < lane; ++j) {
          if (pw[j] > 0.0) px[j] += pg[j] - pz[j] * total;
        }
      }
    }
  });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& vx = val(x);
  Tensor y = numkit::layer_norm(vx, val(gain), val(bias), eps);
  bool g = rg(x) || rg(gain) || rg(bias);
  int ix = x.id, ig = gain.id, ib = bias.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    const Tensor& x_v = t.nodes_[static_cast<size_t>(ix)].value;
    const Tensor& gain_v = t.nodes_[static_cast<size_t>(ig)].value;
    int rows = x_v.rank() == 2 ? x_v.shape[0] : 1;
    int cols = x_v.shape.back();
    double* gxp = t.grad_ptr(ix);
    double* ggp = t.grad_ptr(ig);
    double* gbp = t.grad_ptr(ib);
    std::vector<double> xhat(static_cast<size_t>(cols));
    for (int i = 0; i < rows; ++i) {
      const double* px = x_v.data.data() + static_cast<size_t>(i) * cols;
      const double* pg = gy.data.data() + static_cast<size_t>(i) * cols;
      double mean = 0.0;
      for (int j = 0; j < cols; ++j) mean += px[j];
      mean /= cols;
      double var = 0.0;
      for (int j = 0; j < cols; ++j) var += (px[j] - mean) * (px[j] - mean);
      var /= cols;
      double inv = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < cols; ++j) xhat[static_cast<size_t>(j)] = (px[j] - mean) * inv;
      if (ggp) {
        for (int j = 0; j < cols; ++j) ggp[j] += pg[j] * xhat[static_cast<size_t>(j)];
      }
      if (gbp) {
        for (int j = 0; j < cols; ++j) gbp[j] += pg[j];
      }
      if (gxp) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < cols; ++j) {
          double gh = pg[j] * gain_v.data[static_cast<size_t>(j)];
          m1 += gh;
          m2 += gh * xhat[static_cast<size_t>(j)];
        }
        m1 /= cols;
        m2 /= cols;
        double* pgx = gxp + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
          double gh = pg[j] * gain_v.data[static_cast<size_t>(j)];
          pgx[j] += inv * (gh - m1 - xhat[static_cast<size_t>(j)] * m2);
        }
      }
    }
  });
}

// ---- structure ----

Var Tape::reshape(Var x, std::vector<int> shape) {
  Tensor y(shape, val(x).data);
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < gy.data.size(); ++i) gx[i] += gy.data[i];
    }
  });
}

Var Tape::gather_rows(Var x, std::vector<int> idx) {
  Tensor y = numkit::gather_rows(val(x), idx);
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  int cols = y.shape[1];
  return push(std::move(y), g,
              !g ? std::function<void(Tape&)>() : [idx = std::move(idx), ix, out, cols](Tape& t) {
                const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
                if (double* gx = t.grad_ptr(ix)) {
                  for (size_t i = 0; i < idx.size(); ++i) {
                    const double* src = gy.data.data() + i * static_cast<size_t>(cols);
                    double* dst = gx + static_cast<size_t>(idx[i]) * cols;
                    for (int j = 0; j < cols; ++j) dst[j] += src[j];
                  }
                }
              });
}

Var Tape::scatter_rows(Var x, int n_rows, std::vector<int> dest_idx) {
  const Tensor& vx = val(x);
  if (vx.rank() != 2) throw ShapeError("scatter_rows expects rank-2 source");
  if (static_cast<int>(dest_idx.size()) != vx.shape[0]) {
    throw ShapeError("scatter_rows needs one destination per source row");
  }
  int cols = vx.shape[1];
  Tensor y = Tensor::zeros({n_rows, cols});
  for (size_t i = 0; i < dest_idx.size(); ++i) {
    int d = dest_idx[i];
    if (d < 0 || d >= n_rows) throw IndexError("scatter_rows destination out of range");
    std::copy_n(vx.data.data() + i * static_cast<size_t>(cols), cols,
                y.data.data() + static_cast<size_t>(d) * cols);
  }
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g,
              !g ? std::function<void(Tape&)>()
                 : [dest_idx = std::move(dest_idx), ix, out, cols](Tape& t) {
                     const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
                     if (double* gx = t.grad_ptr(ix)) {
                       for (size_t i = 0; i < dest_idx.size(); ++i) {
                         const double* src = gy.data.data() + static_cast<size_t>(dest_idx[i]) * cols;
                         double* dst = gx + i * static_cast<size_t>(cols);
                         for (int j = 0; j < cols; ++j) dst[j] += src[j];
                       }
                     }
                   });
}

Var Tape::concat_cols(Var a, Var b) {
  Tensor y = numkit::concat_cols(val(a), val(b));
  bool g = rg(a) || rg(b);
  int ia = a.id, ib = b.id, out = static_cast<int>(nodes_.size());
  int ac = val(a).shape.back(), bc = val(b).shape.back();
  int rows = y.shape[0];
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    const Tensor& gy = t.nodes_[static_cast<size_t>(out)].grad;
    double* ga = t.grad_ptr(ia);
    double* gb = t.grad_ptr(ib);
    for (int i = 0; i < rows; ++i) {
      const double* row = gy.data.data() + static_cast<size_t>(i) * (ac + bc);
      if (ga) {
        for (int j = 0; j < ac; ++j) ga[static_cast<size_t>(i) * ac + j] += row[j];
      }
      if (gb) {
        for (int j = 0; j < bc; ++j) gb[static_cast<size_t>(i) * bc + j] += row[ac + j];
      }
    }
  });
}

Var Tape::pick(Var x, int flat_index) {
  const Tensor& vx = val(x);
  if (flat_index < 0 || static_cast<size_t>(flat_index) >= vx.numel()) {
    throw IndexError("pick index out of range");
  }
  Tensor y = Tensor::scalar(vx.data[static_cast<size_t>(flat_index)]);
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    double gy = t.nodes_[static_cast<size_t>(out)].grad.data[0];
    t.accum_at(ix, static_cast<size_t>(flat_index), gy);
  });
}

Var Tape::dot_const(Var x, const Tensor& coef) {
  Tensor y = Tensor::scalar(dot(val(x), coef));
  bool g = rg(x);
  int ix = x.id, out = static_cast<int>(nodes_.size());
  return push(std::move(y), g, !g ? std::function<void(Tape&)>() : [coef, ix, out](Tape& t) {
    double gy = t.nodes_[static_cast<size_t>(out)].grad.data[0];
    if (double* gx = t.grad_ptr(ix)) {
      for (size_t i = 0; i < coef.data.size(); ++i) gx[i] += gy * coef.data[i];
    }
  });
}

// ---- losses ----

Var Tape::cross_entropy(Var logits, const std::vector<int>& targets) {
  const Tensor& vx = val(logits);
  if (vx.rank() != 2) throw ShapeError("cross_entropy expects [n,vocab] logits");
  int n = vx.shape[0], vocab = vx.shape[1];
  if (static_cast<int>(targets.size()) != n) {
    throw ShapeError("cross_entropy needs one target per row");
  }
  for (int t : targets) {
    if (t < 0 || t >= vocab) {
      throw IndexError("cross_entropy target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  Tensor probs = softmax_lastaxis(vx);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    loss -= std::log(std::max(probs.at(i, targets[static_cast<size_t>(i)]), 1e-300));
  }
  loss /= n;
  bool g = rg(logits);
  int ix = logits.id, out = static_cast<int>(nodes_.size());
  return push(Tensor::scalar(loss), g,
              !g ? std::function<void(Tape&)>() : [probs, targets, ix, out, n, vocab](Tape& t) {
                double gy = t.nodes_[static_cast<size_t>(out)].grad.data[0];
                if (double* gx = t.grad_ptr(ix)) {
                  for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < vocab; ++j) {
                      double delta = j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0;
                      gx[static_cast<size_t>(i) * vocab + j] +=
                          gy * (probs.at(i, j) - delta) / n;
                    }
                  }
                }
              });
}

Var Tape::bce(Var pred, const Tensor& target) {
  const Tensor& vp = val(pred);
  if (vp.numel() != target.numel()) throw ShapeError("bce pred/target size mismatch");
  size_t n = vp.numel();
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double p = std::clamp(vp.data[i], kBceEps, 1.0 - kBceEps);
    double y = target.data[i];
    loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  loss /= static_cast<double>(n);
  bool g = rg(pred);
  int ip = pred.id, out = static_cast<int>(nodes_.size());
  return push(Tensor::scalar(loss), g,
              !g ? std::function<void(Tape&)>() : [target, ip, out, n](Tape& t) {
                double gy = t.nodes_[static_cast<size_t>(out)].grad.data[0];
                const Tensor& vp = t.nodes_[static_cast<size_t>(ip)].value;
                if (double* gp = t.grad_ptr(ip)) {
                  for (size_t i = 0; i < n; ++i) {
                    double p = vp.data[i];
                    if (p <= kBceEps || p >= 1.0 - kBceEps) continue;  // clamped: flat
                    double y = target.data[i];
                    gp[i] += gy * (p - y) / (p * (1.0 - p)) / static_cast<double>(n);
                  }
                }
              });
}

// ---- scalar folds ----

Var Tape::vsum(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("vsum of empty list");
  double s = 0.0;
  bool g = false;
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (Var v : xs) {
    s += val(v).item();
    g = g || rg(v);
    ids.push_back(v.id);
  }
  int out = static_cast<int>(nodes_.size());
  return push(Tensor::scalar(s), g,
              !g ? std::function<void(Tape&)>() : [ids = std::move(ids), out](Tape& t) {
                double gy = t.nodes_[static_cast<size_t>(out)].grad.data[0];
                for (int id : ids) t.accum_at(id, 0, gy);
              });
}

Var Tape::vmax(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("vmax of empty list");
  int best = 0;
  double bv = val(xs[0]).item();
  bool g = rg(xs[0]);
  for (size_t i = 1; i < xs.size(); ++i) {
    double v = val(xs[i]).item();
    if (v > bv) {
      bv = v;
      best = static_cast<int>(i);
    }
    g = g || rg(xs[i]);
  }
  int arg_id = xs[static_cast<size_t>(best)].id;
  int out = static_cast<int>(nodes_.size());
  return push(Tensor::scalar(bv), g, !g ? std::function<void(Tape&)>() : [=](Tape& t) {
    t.accum_at(arg_id, 0, t.nodes_[static_cast<size_t>(out)].grad.data[0]);
  });
}

// ---- composites ----

Var attention(Tape& t, Var q, Var k, Var v, bool causal) {
  return attention(t, q, k, v, Tensor{}, causal);
}

Var attention(Tape& t, Var q, Var k, Var v, const Tensor& add_mask, bool causal) {
  const Tensor& qv = t.val(q);
  const Tensor& kv = t.val(k);
  if (qv.rank() != 2 || kv.rank() != 2 || qv.shape[1] != kv.shape[1]) {
    throw ShapeError("attention expects [n,d] q,k with matching d");
  }
  check_finite(qv, "attention");
  int n = qv.shape[0], m = kv.shape[0];
  Var scores = t.scale(t.matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(qv.shape[1])));
  if (!add_mask.data.empty()) {
    if (add_mask.rank() != 2 || add_mask.shape[0] != n || add_mask.shape[1] != m) {
      throw ShapeError("attention mask must be [n_q, n_k]");
    }
    scores = t.add_const(scores, add_mask);
  }
  if (causal) {
    if (n != m) throw ShapeError("causal attention needs square score matrix");
    Tensor mask = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) mask.at(i, j) = -1e30;
    }
    scores = t.add_const(scores, mask);
  }
  return t.matmul(t.softmax(scores), v);
}

Var linear(Tape& t, Var x, Var w, Var bias) { return t.add_row(t.matmul(x, w), bias); }

}  // namespace genad::numkit
