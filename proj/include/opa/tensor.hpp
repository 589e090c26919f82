#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "opa/geometry.hpp"

namespace opa::ad {

// Dense row-major 2D tensor of doubles. Scalars are 1x1.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
  explicit Tensor(double scalar) : rows(1), cols(1), v{scalar} {}

  static Tensor zeros(int r, int c) { return Tensor(r, c); }
  static Tensor full(int r, int c, double value) {
    Tensor t(r, c);
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }

  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  double scalar() const {
    if (rows != 1 || cols != 1) throw std::invalid_argument("tensor is not scalar");
    return v[0];
  }
  std::string shape_str() const {
    return "(" + std::to_string(rows) + "," + std::to_string(cols) + ")";
  }
};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap emap(const Tensor& t) { return ECMap(t.v.data(), t.rows, t.cols); }
inline EMap emap(Tensor& t) { return EMap(t.v.data(), t.rows, t.cols); }

// Trainable tensor with Adam state. `grad` accumulates across graphs until
// the next optimizer step.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor m1, m2;  // Adam moments
  long step = 0;
  bool grad_live = false;  // set once any graph flushed a gradient here

  Parameter() = default;
  Parameter(std::string n, Tensor t)
      : name(std::move(n)),
        value(std::move(t)),
        grad(value.rows, value.cols),
        m1(value.rows, value.cols),
        m2(value.rows, value.cols) {}

  void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }
};

// Dynamic tape: every op appends a node recording its inputs and a backward
// closure. One graph is confined to one thread.
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily
    bool requires_grad = false;
    std::vector<int> inputs;
    std::function<void(Graph&, int)> backward;  // adds into input grads
    Parameter* param = nullptr;
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor& value(int id) const { return nodes_[id].value; }
  Tensor& grad(int id) { return ensure_grad(id); }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  int constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    n.requires_grad = false;
    return push(std::move(n));
  }

  // Differentiable leaf not bound to a Parameter (e.g. scene points when
  // gradients w.r.t. inputs are wanted).
  int input(Tensor t) {
    Node n;
    n.value = std::move(t);
    n.requires_grad = true;
    return push(std::move(n));
  }

  // Bind a Parameter. When trainable, flush_param_grads() adds this leaf's
  // gradient into p.grad.
  int param(Parameter& p, bool trainable = true) {
    Node n;
    n.value = p.value;
    n.requires_grad = trainable;
    n.param = trainable ? &p : nullptr;
    return push(std::move(n));
  }

  // ---- forward ops ------------------------------------------------------

  int matmul(int a, int b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (A.cols != B.rows) shape_error("matmul", A, B);
    Tensor out(A.rows, B.cols);
    emap(out).noalias() = emap(A) * emap(B);
    return op(std::move(out), {a, b}, [](Graph& g, int id) {
      Node& n = g.nodes_[id];
      const Tensor& A = g.nodes_[n.inputs[0]].value;
      const Tensor& B = g.nodes_[n.inputs[1]].value;
      if (g.nodes_[n.inputs[0]].requires_grad) {
        emap(g.ensure_grad(n.inputs[0])).noalias() += emap(n.grad) * emap(B).transpose();
      }
      if (g.nodes_[n.inputs[1]].requires_grad) {
        emap(g.ensure_grad(n.inputs[1])).noalias() += emap(A).transpose() * emap(n.grad);
      }
    });
  }

  // add: same shape, or b a 1xC row bias broadcast over a's rows.
  int add(int a, int b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    const bool bcast = (B.rows == 1 && A.rows != 1 && B.cols == A.cols);
    if (!bcast && !A.same_shape(B)) shape_error("add", A, B);
    Tensor out = A;
    if (bcast) {
      for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out.at(r, c) += B.at(0, c);
    } else {
      for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += B.v[i];
    }
    return op(std::move(out), {a, b}, [bcast](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (g.nodes_[n.inputs[0]].requires_grad) {
        Tensor& ga = g.ensure_grad(n.inputs[0]);
        for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += n.grad.v[i];
      }
      if (g.nodes_[n.inputs[1]].requires_grad) {
        Tensor& gb = g.ensure_grad(n.inputs[1]);
        if (bcast) {
          for (int r = 0; r < n.grad.rows; ++r)
            for (int c = 0; c < n.grad.cols; ++c) gb.at(0, c) += n.grad.at(r, c);
        } else {
          for (std::size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += n.grad.v[i];
        }
      }
    });
  }

  int sub(int a, int b) { return add(a, scale(b, -1.0)); }

  // mul: elementwise, same shape or b a 1xC row broadcast.
  int mul(int a, int b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    const bool bcast = (B.rows == 1 && A.rows != 1 && B.cols == A.cols);
    if (!bcast && !A.same_shape(B)) shape_error("mul", A, B);
    Tensor out = A;
    if (bcast) {
      for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out.at(r, c) *= B.at(0, c);
    } else {
      for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
    }
    return op(std::move(out), {a, b}, [bcast](Graph& g, int id) {
      Node& n = g.nodes_[id];
      const Tensor& A = g.nodes_[n.inputs[0]].value;
      const Tensor& B = g.nodes_[n.inputs[1]].value;
      if (g.nodes_[n.inputs[0]].requires_grad) {
        Tensor& ga = g.ensure_grad(n.inputs[0]);
        if (bcast) {
          for (int r = 0; r < n.grad.rows; ++r)
            for (int c = 0; c < n.grad.cols; ++c)
              ga.at(r, c) += n.grad.at(r, c) * B.at(0, c);
        } else {
          for (std::size_t i = 0; i < ga.v.size(); ++i)
            ga.v[i] += n.grad.v[i] * B.v[i];
        }
      }
      if (g.nodes_[n.inputs[1]].requires_grad) {
        Tensor& gb = g.ensure_grad(n.inputs[1]);
        if (bcast) {
          for (int r = 0; r < n.grad.rows; ++r)
            for (int c = 0; c < n.grad.cols; ++c)
              gb.at(0, c) += n.grad.at(r, c) * A.at(r, c);
        } else {
          for (std::size_t i = 0; i < gb.v.size(); ++i)
            gb.v[i] += n.grad.v[i] * A.v[i];
        }
      }
    });
  }

  int scale(int a, double s) {
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x *= s;
    return op(std::move(out), {a}, [s](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += s * n.grad.v[i];
    });
  }

  int add_scalar(int a, double s) {
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x += s;
    return op(std::move(out), {a}, [](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += n.grad.v[i];
    });
  }

  int relu(int a) {
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x = x > 0 ? x : 0.0;
    return unary(a, std::move(out), [](double x, double y) {
      (void)y;
      return x > 0 ? 1.0 : 0.0;
    });
  }

  int sigmoid(int a) {
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    return unary_from_out(a, std::move(out), [](double y) { return y * (1.0 - y); });
  }

  int tanh_(int a) {
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x = std::tanh(x);
    return unary_from_out(a, std::move(out), [](double y) { return 1.0 - y * y; });
  }

  // exp with inputs clipped to +-40 so finite inputs can never overflow.
  int exp_(int a) {
    Tensor out = nodes_[a].value;
    std::vector<char> live(out.v.size(), 1);
    for (std::size_t i = 0; i < out.v.size(); ++i) {
      double x = out.v[i];
      if (x > 40.0 || x < -40.0) {
        live[i] = 0;
        x = std::clamp(x, -40.0, 40.0);
      }
      out.v[i] = std::exp(x);
    }
    return op(std::move(out), {a}, [live = std::move(live)](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i)
        ga.v[i] += live[i] ? n.grad.v[i] * n.value.v[i] : 0.0;
    });
  }

  // log with an epsilon floor: never NaN for inputs in [0, 1].
  int log_(int a) {
    constexpr double kEps = 1e-12;
    Tensor out = nodes_[a].value;
    std::vector<double> floored(out.v.size());
    for (std::size_t i = 0; i < out.v.size(); ++i) {
      floored[i] = std::max(out.v[i], kEps);
      out.v[i] = std::log(floored[i]);
    }
    return op(std::move(out), {a}, [floored = std::move(floored)](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      const Tensor& A = g.nodes_[n.inputs[0]].value;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i)
        ga.v[i] += A.v[i] > kEps ? n.grad.v[i] / floored[i] : 0.0;
    });
  }

  int sqrt_(int a) {
    constexpr double kEps = 1e-12;
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x = std::sqrt(std::max(x, kEps));
    return unary_from_out(a, std::move(out), [](double y) { return 0.5 / y; });
  }

  // 1/x with |x| floored at 1e-12 (sign preserved).
  int recip_(int a) {
    constexpr double kEps = 1e-12;
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) {
      const double ax = std::max(std::abs(x), kEps);
      x = (x < 0 ? -1.0 : 1.0) / ax;
    }
    return unary_from_out(a, std::move(out), [](double y) { return -y * y; });
  }

  int abs_(int a) {
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x = std::abs(x);
    return unary(a, std::move(out), [](double x, double) {
      return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
    });
  }

  int clamp_(int a, double lo, double hi) {
    Tensor out = nodes_[a].value;
    for (auto& x : out.v) x = std::clamp(x, lo, hi);
    return unary(a, std::move(out), [lo, hi](double x, double) {
      return (x >= lo && x <= hi) ? 1.0 : 0.0;
    });
  }

  // softmax along axis 1 (each row sums to 1), numerically stable.
  int softmax(int a, int axis = 1) {
    if (axis != 1) throw std::invalid_argument("softmax: only axis=1 supported");
    Tensor out = nodes_[a].value;
    for (int r = 0; r < out.rows; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < out.cols; ++c) mx = std::max(mx, out.at(r, c));
      double sum = 0;
      for (int c = 0; c < out.cols; ++c) {
        out.at(r, c) = std::exp(out.at(r, c) - mx);
        sum += out.at(r, c);
      }
      for (int c = 0; c < out.cols; ++c) out.at(r, c) /= sum;
    }
    return op(std::move(out), {a}, [](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (int r = 0; r < n.value.rows; ++r) {
        double dot = 0;
        for (int c = 0; c < n.value.cols; ++c)
          dot += n.grad.at(r, c) * n.value.at(r, c);
        for (int c = 0; c < n.value.cols; ++c)
          ga.at(r, c) += n.value.at(r, c) * (n.grad.at(r, c) - dot);
      }
    });
  }

  // max over an axis. axis=0: 1xC column maxima; axis=1: Rx1 row maxima.
  // Gradient routes to the first maximal element.
  int max_pool(int a, int axis = 0) {
    const Tensor& A = nodes_[a].value;
    Tensor out;
    std::vector<int> arg;
    if (axis == 0) {
      out = Tensor(1, A.cols);
      arg.resize(A.cols);
      for (int c = 0; c < A.cols; ++c) {
        int best = 0;
        for (int r = 1; r < A.rows; ++r)
          if (A.at(r, c) > A.at(best, c)) best = r;
        arg[c] = best;
        out.at(0, c) = A.at(best, c);
      }
    } else {
      out = Tensor(A.rows, 1);
      arg.resize(A.rows);
      for (int r = 0; r < A.rows; ++r) {
        int best = 0;
        for (int c = 1; c < A.cols; ++c)
          if (A.at(r, c) > A.at(r, best)) best = c;
        arg[r] = best;
        out.at(r, 0) = A.at(r, best);
      }
    }
    return op(std::move(out), {a}, [axis, arg = std::move(arg)](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      if (axis == 0) {
        for (int c = 0; c < n.value.cols; ++c) ga.at(arg[c], c) += n.grad.at(0, c);
      } else {
        for (int r = 0; r < n.value.rows; ++r) ga.at(r, arg[r]) += n.grad.at(r, 0);
      }
    });
  }

  // concat along axis 0 (stack rows) or axis 1 (side by side).
  int concat(int a, int b, int axis = 1) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    Tensor out;
    if (axis == 1) {
      if (A.rows != B.rows) shape_error("concat", A, B);
      out = Tensor(A.rows, A.cols + B.cols);
      for (int r = 0; r < A.rows; ++r) {
        for (int c = 0; c < A.cols; ++c) out.at(r, c) = A.at(r, c);
        for (int c = 0; c < B.cols; ++c) out.at(r, A.cols + c) = B.at(r, c);
      }
    } else {
      if (A.cols != B.cols) shape_error("concat", A, B);
      out = Tensor(A.rows + B.rows, A.cols);
      std::copy(A.v.begin(), A.v.end(), out.v.begin());
      std::copy(B.v.begin(), B.v.end(), out.v.begin() + A.v.size());
    }
    const int acols = A.cols, arows = A.rows;
    return op(std::move(out), {a, b}, [axis, acols, arows](Graph& g, int id) {
      Node& n = g.nodes_[id];
      const bool ga_live = g.nodes_[n.inputs[0]].requires_grad;
      const bool gb_live = g.nodes_[n.inputs[1]].requires_grad;
      if (axis == 1) {
        for (int r = 0; r < n.value.rows; ++r) {
          if (ga_live) {
            Tensor& ga = g.ensure_grad(n.inputs[0]);
            for (int c = 0; c < acols; ++c) ga.at(r, c) += n.grad.at(r, c);
          }
          if (gb_live) {
            Tensor& gb = g.ensure_grad(n.inputs[1]);
            for (int c = acols; c < n.value.cols; ++c)
              gb.at(r, c - acols) += n.grad.at(r, c);
          }
        }
      } else {
        if (ga_live) {
          Tensor& ga = g.ensure_grad(n.inputs[0]);
          for (std::size_t i = 0; i < ga.v.size(); ++i) ga.v[i] += n.grad.v[i];
        }
        if (gb_live) {
          Tensor& gb = g.ensure_grad(n.inputs[1]);
          const std::size_t off = static_cast<std::size_t>(arows) * n.value.cols;
          for (std::size_t i = 0; i < gb.v.size(); ++i) gb.v[i] += n.grad.v[off + i];
        }
      }
    });
  }

  // Row gather: out[i] = a[indices[i]].
  int gather(int a, std::vector<std::size_t> indices) {
    const Tensor& A = nodes_[a].value;
    Tensor out(static_cast<int>(indices.size()), A.cols);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= static_cast<std::size_t>(A.rows))
        throw std::invalid_argument("gather: index out of range");
      for (int c = 0; c < A.cols; ++c)
        out.at(static_cast<int>(i), c) = A.at(static_cast<int>(indices[i]), c);
    }
    return op(std::move(out), {a}, [idx = std::move(indices)](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int c = 0; c < n.value.cols; ++c)
          ga.at(static_cast<int>(idx[i]), c) += n.grad.at(static_cast<int>(i), c);
    });
  }

  // Mean-pool rows into groups: out[gi] = mean over rows in groups[gi].
  int pool_rows_mean(int a, std::vector<std::vector<std::size_t>> groups) {
    const Tensor& A = nodes_[a].value;
    Tensor out(static_cast<int>(groups.size()), A.cols);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      if (groups[gi].empty())
        throw std::invalid_argument("pool_rows_mean: empty group");
      for (std::size_t r : groups[gi])
        for (int c = 0; c < A.cols; ++c)
          out.at(static_cast<int>(gi), c) += A.at(static_cast<int>(r), c);
      for (int c = 0; c < A.cols; ++c)
        out.at(static_cast<int>(gi), c) /= static_cast<double>(groups[gi].size());
    }
    return op(std::move(out), {a}, [gs = std::move(groups)](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t gi = 0; gi < gs.size(); ++gi) {
        const double w = 1.0 / static_cast<double>(gs[gi].size());
        for (std::size_t r : gs[gi])
          for (int c = 0; c < n.value.cols; ++c)
            ga.at(static_cast<int>(r), c) += w * n.grad.at(static_cast<int>(gi), c);
      }
    });
  }

  // out = base with rows[indices[i]] replaced by rows of `values`.
  // base rows outside `indices` are copied bit-identically.
  int scatter_rows(int base, std::vector<std::size_t> indices, int values) {
    const Tensor& B = nodes_[base].value;
    const Tensor& V = nodes_[values].value;
    if (static_cast<std::size_t>(V.rows) != indices.size() || V.cols != B.cols)
      shape_error("scatter_rows", B, V);
    Tensor out = B;
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (int c = 0; c < B.cols; ++c)
        out.at(static_cast<int>(indices[i]), c) = V.at(static_cast<int>(i), c);
    return op(std::move(out), {base, values},
              [idx = std::move(indices)](Graph& g, int id) {
                Node& n = g.nodes_[id];
                if (g.nodes_[n.inputs[0]].requires_grad) {
                  Tensor& gb = g.ensure_grad(n.inputs[0]);
                  std::vector<char> replaced(n.value.rows, 0);
                  for (std::size_t i : idx) replaced[i] = 1;
                  for (int r = 0; r < n.value.rows; ++r) {
                    if (replaced[r]) continue;
                    for (int c = 0; c < n.value.cols; ++c)
                      gb.at(r, c) += n.grad.at(r, c);
                  }
                }
                if (g.nodes_[n.inputs[1]].requires_grad) {
                  Tensor& gv = g.ensure_grad(n.inputs[1]);
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (int c = 0; c < n.value.cols; ++c)
                      gv.at(static_cast<int>(i), c) +=
                          n.grad.at(static_cast<int>(idx[i]), c);
                }
              });
  }

  // Clamp Nx3 world points into an oriented box. Rows already inside come
  // back bit-identical (gradient is the identity there); clamped rows pass
  // gradients through R * diag(mask) * R^T.
  int clamp_to_box_rows(int a, const OrientedBox& box) {
    const Tensor& A = nodes_[a].value;
    if (A.cols != 3) throw std::invalid_argument("clamp_to_box_rows: need Nx3");
    Tensor out = A;
    const Vec3 half = box.size * 0.5;
    std::vector<std::array<char, 3>> mask(A.rows, {1, 1, 1});
    for (int r = 0; r < A.rows; ++r) {
      const Point3 p{A.at(r, 0), A.at(r, 1), A.at(r, 2)};
      Point3 u = box.to_local(p);
      bool clamped = false;
      for (int ax = 0; ax < 3; ++ax) {
        if (u[ax] < -half[ax]) {
          u[ax] = -half[ax];
          mask[r][ax] = 0;
          clamped = true;
        } else if (u[ax] > half[ax]) {
          u[ax] = half[ax];
          mask[r][ax] = 0;
          clamped = true;
        }
      }
      if (clamped) {
        const Point3 q = box.to_world(u);
        out.at(r, 0) = q.x;
        out.at(r, 1) = q.y;
        out.at(r, 2) = q.z;
      }
    }
    const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    return op(std::move(out), {a},
              [mask = std::move(mask), cy, sy](Graph& g, int id) {
                Node& n = g.nodes_[id];
                if (!g.nodes_[n.inputs[0]].requires_grad) return;
                Tensor& ga = g.ensure_grad(n.inputs[0]);
                for (int r = 0; r < n.value.rows; ++r) {
                  const double gx = n.grad.at(r, 0), gy = n.grad.at(r, 1),
                               gz = n.grad.at(r, 2);
                  if (mask[r][0] && mask[r][1] && mask[r][2]) {
                    ga.at(r, 0) += gx;
                    ga.at(r, 1) += gy;
                    ga.at(r, 2) += gz;
                    continue;
                  }
                  // J = R diag(mask) R^T (symmetric), z decoupled from x/y
                  double lx = cy * gx + sy * gy;   // R^T g
                  double ly = -sy * gx + cy * gy;
                  lx *= mask[r][0];
                  ly *= mask[r][1];
                  ga.at(r, 0) += cy * lx - sy * ly;
                  ga.at(r, 1) += sy * lx + cy * ly;
                  ga.at(r, 2) += mask[r][2] ? gz : 0.0;
                }
              });
  }

  // Elementwise Huber between a and a constant target, same shape.
  int huber(int a, const Tensor& target, double delta = 1.0) {
    const Tensor& A = nodes_[a].value;
    if (!A.same_shape(target)) shape_error("huber", A, target);
    Tensor out = A;
    for (std::size_t i = 0; i < out.v.size(); ++i) {
      const double r = A.v[i] - target.v[i];
      out.v[i] = std::abs(r) <= delta ? 0.5 * r * r
                                      : delta * (std::abs(r) - 0.5 * delta);
    }
    return op(std::move(out), {a}, [target, delta](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      const Tensor& A = g.nodes_[n.inputs[0]].value;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i) {
        const double r = A.v[i] - target.v[i];
        ga.v[i] += n.grad.v[i] * std::clamp(r, -delta, delta);
      }
    });
  }

  // Per-row stable cross-entropy between logit rows and integer targets.
  int cross_entropy(int logits, const std::vector<int>& targets) {
    const Tensor& A = nodes_[logits].value;
    if (static_cast<std::size_t>(A.rows) != targets.size())
      throw std::invalid_argument("cross_entropy: row/target count mismatch");
    Tensor out(A.rows, 1);
    for (int r = 0; r < A.rows; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < A.cols; ++c) mx = std::max(mx, A.at(r, c));
      double lse = 0;
      for (int c = 0; c < A.cols; ++c) lse += std::exp(A.at(r, c) - mx);
      out.at(r, 0) = std::log(lse) + mx - A.at(r, targets[r]);
    }
    return op(std::move(out), {logits}, [targets](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      const Tensor& A = g.nodes_[n.inputs[0]].value;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (int r = 0; r < A.rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < A.cols; ++c) mx = std::max(mx, A.at(r, c));
        double lse = 0;
        for (int c = 0; c < A.cols; ++c) lse += std::exp(A.at(r, c) - mx);
        for (int c = 0; c < A.cols; ++c) {
          const double p = std::exp(A.at(r, c) - mx) / lse;
          const double onehot = (c == targets[r]) ? 1.0 : 0.0;
          ga.at(r, c) += n.grad.at(r, 0) * (p - onehot);
        }
      }
    });
  }

  // Stable elementwise binary cross-entropy on logits vs constant targets.
  int bce_with_logits(int logits, const Tensor& targets) {
    const Tensor& A = nodes_[logits].value;
    if (!A.same_shape(targets)) shape_error("bce_with_logits", A, targets);
    Tensor out = A;
    for (std::size_t i = 0; i < out.v.size(); ++i) {
      const double x = A.v[i], t = targets.v[i];
      out.v[i] = std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
    }
    return op(std::move(out), {logits}, [targets](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      const Tensor& A = g.nodes_[n.inputs[0]].value;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-A.v[i]));
        ga.v[i] += n.grad.v[i] * (p - targets.v[i]);
      }
    });
  }

  // Slice columns [c0, c1).
  int select_cols(int a, int c0, int c1) {
    const Tensor& A = nodes_[a].value;
    if (c0 < 0 || c1 > A.cols || c0 >= c1)
      throw std::invalid_argument("select_cols: bad range");
    Tensor out(A.rows, c1 - c0);
    for (int r = 0; r < A.rows; ++r)
      for (int c = c0; c < c1; ++c) out.at(r, c - c0) = A.at(r, c);
    return op(std::move(out), {a}, [c0](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (int r = 0; r < n.value.rows; ++r)
        for (int c = 0; c < n.value.cols; ++c)
          ga.at(r, c0 + c) += n.grad.at(r, c);
    });
  }

  int sum(int a) {
    double s = 0;
    for (double x : nodes_[a].value.v) s += x;
    return op(Tensor(s), {a}, [](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (auto& x : ga.v) x += n.grad.v[0];
    });
  }

  int mean(int a) {
    const std::size_t count = nodes_[a].value.v.size();
    double s = 0;
    for (double x : nodes_[a].value.v) s += x;
    return op(Tensor(s / static_cast<double>(count)), {a}, [count](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      const double w = n.grad.v[0] / static_cast<double>(count);
      for (auto& x : ga.v) x += w;
    });
  }

  // ---- backward ----------------------------------------------------------

  // Reverse topological traversal from `loss` (must be scalar). Grad buffers
  // accumulate; calling twice without a fresh graph accumulates.
  void backward(int loss) {
    if (nodes_[loss].value.rows != 1 || nodes_[loss].value.cols != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    // each call propagates fresh adjoints, then adds previously accumulated
    // gradients back, so repeated backward() sums per-call gradients exactly
    std::vector<std::vector<double>> saved(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].grad.v.empty()) continue;
      saved[i] = nodes_[i].grad.v;
      std::fill(nodes_[i].grad.v.begin(), nodes_[i].grad.v.end(), 0.0);
    }
    ensure_grad(loss).v[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.v.empty()) continue;
      n.backward(*this, id);
    }
    for (std::size_t i = 0; i < saved.size(); ++i)
      for (std::size_t j = 0; j < saved[i].size(); ++j)
        nodes_[i].grad.v[j] += saved[i][j];
  }

  // Add every trainable bound leaf's gradient into its Parameter.grad.
  void flush_param_grads() {
    for (Node& n : nodes_) {
      if (n.param == nullptr || n.grad.v.empty()) continue;
      for (std::size_t i = 0; i < n.grad.v.size(); ++i)
        n.param->grad.v[i] += n.grad.v[i];
      n.param->grad_live = true;
    }
  }

 private:
  std::vector<Node> nodes_;

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int op(Tensor value, std::vector<int> inputs,
         std::function<void(Graph&, int)> backward) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    for (int i : n.inputs) n.requires_grad |= nodes_[i].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  // dy/dx as f(x, y)
  template <typename F>
  int unary(int a, Tensor out, F df) {
    return op(std::move(out), {a}, [df](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      const Tensor& A = g.nodes_[n.inputs[0]].value;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i)
        ga.v[i] += n.grad.v[i] * df(A.v[i], n.value.v[i]);
    });
  }

  // dy/dx as f(y) only
  template <typename F>
  int unary_from_out(int a, Tensor out, F df) {
    return op(std::move(out), {a}, [df](Graph& g, int id) {
      Node& n = g.nodes_[id];
      if (!g.nodes_[n.inputs[0]].requires_grad) return;
      Tensor& ga = g.ensure_grad(n.inputs[0]);
      for (std::size_t i = 0; i < ga.v.size(); ++i)
        ga.v[i] += n.grad.v[i] * df(n.value.v[i]);
    });
  }

  Tensor& ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.v.empty()) n.grad = Tensor(n.value.rows, n.value.cols);
    return n.grad;
  }

  [[noreturn]] static void shape_error(const char* what, const Tensor& a,
                                       const Tensor& b) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                a.shape_str() + " vs " + b.shape_str());
  }
};

// ---- networks, Adam, checkpoints ----------------------------------------

struct Network {
  std::vector<Parameter> params;

  Parameter& add(const std::string& name, Tensor t) {
    for (const auto& p : params)
      if (p.name == name)
        throw std::invalid_argument("duplicate parameter name: " + name);
    params.emplace_back(name, std::move(t));
    return params.back();
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grads() {
    for (auto& p : params) {
      p.zero_grad();
      p.grad_live = false;
    }
  }
};

// Standard Adam with bias correction; gradients are consumed and zeroed.
inline void adam_step(Network& net, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  for (auto& p : net.params) {
    if (!p.grad_live)
      throw std::invalid_argument("adam_step: no gradient for " + p.name);
  }
  for (auto& p : net.params) {
    p.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p.step));
    for (std::size_t i = 0; i < p.value.v.size(); ++i) {
      const double g = p.grad.v[i];
      p.m1.v[i] = beta1 * p.m1.v[i] + (1.0 - beta1) * g;
      p.m2.v[i] = beta2 * p.m2.v[i] + (1.0 - beta2) * g * g;
      const double mhat = p.m1.v[i] / bc1;
      const double vhat = p.m2.v[i] / bc2;
      p.value.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.zero_grad();
    p.grad_live = false;
  }
}

inline void save_checkpoint(const Network& net, const std::string& path) {
  nlohmann::json j;
  j["format"] = "opa-ckpt-v1";
  j["params"] = nlohmann::json::array();
  for (const auto& p : net.params) {
    nlohmann::json e;
    e["name"] = p.name;
    e["shape"] = {p.value.rows, p.value.cols};
    e["values"] = p.value.v;
    j["params"].push_back(std::move(e));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump();
}

// Load values into an existing network; every network parameter must be
// present with a matching shape.
inline void load_checkpoint(Network& net, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt checkpoint " + path + ": " + e.what());
  }
  if (!j.contains("format") || j["format"] != "opa-ckpt-v1")
    throw std::runtime_error("corrupt checkpoint " + path + ": bad field 'format'");
  if (!j.contains("params") || !j["params"].is_array())
    throw std::runtime_error("corrupt checkpoint " + path + ": bad field 'params'");
  for (auto& p : net.params) {
    const nlohmann::json* found = nullptr;
    for (const auto& e : j["params"]) {
      if (e.contains("name") && e["name"] == p.name) {
        found = &e;
        break;
      }
    }
    if (!found)
      throw std::runtime_error("checkpoint " + path + ": missing parameter '" +
                               p.name + "'");
    const auto& e = *found;
    if (!e.contains("shape") || !e.contains("values"))
      throw std::runtime_error("checkpoint " + path + ": bad entry for '" +
                               p.name + "'");
    const int r = e["shape"][0], c = e["shape"][1];
    if (r != p.value.rows || c != p.value.cols)
      throw std::runtime_error("checkpoint " + path + ": shape mismatch for '" +
                               p.name + "'");
    const auto values = e["values"].get<std::vector<double>>();
    if (values.size() != p.value.v.size())
      throw std::runtime_error("checkpoint " + path + ": bad values for '" +
                               p.name + "'");
    p.value.v = values;
  }
}

}  // namespace opa::ad
