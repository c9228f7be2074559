// Copyright 2026 The flab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "flab/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include <Eigen/Core>

#include "flab/error.hpp"

namespace flab::nn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapR = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw InputError(msg);
}

template <typename T>
void same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t r, const char* op) {
  require(a.defined() && a.rank() == r,
          std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
              (a.defined() ? shape_str(a.shape()) : std::string("undefined")));
}

template <typename T>
using Parents = std::vector<std::shared_ptr<Node<T>>>;

// Unary elementwise op with derivative expressed via (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  std::vector<T> out(a.size());
  const T* x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  Node<T>* pa = a.node();
  return make_result<T>(a.shape(), std::move(out), Parents<T>{a.shared()},
                        [pa, dfdx](Node<T>& self) {
                          T* ga = pa->grad_buffer();
                          const T* g = self.grad.data();
                          for (std::size_t i = 0; i < self.value.size(); ++i) {
                            ga[i] += g[i] * dfdx(pa->value[i], self.value[i]);
                          }
                        });
}

struct ConvGeom {
  int n, c, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const { return static_cast<std::size_t>(c) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(n) * ho * wo; }
};

// x [n, c, h, w] -> cols [c*k*k, n*ho*wo]
template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t p_total = g.cols();
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        T* dst = cols + (static_cast<std::size_t>(c * g.k + ky) * g.k + kx) * p_total;
        for (int b = 0; b < g.n; ++b) {
          const T* src = x + (static_cast<std::size_t>(b) * g.c + c) * g.h * g.w;
          for (int oy = 0; oy < g.ho; ++oy) {
            T* d = dst + b * plane + static_cast<std::size_t>(oy) * g.wo;
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) {
              std::fill(d, d + g.wo, T(0));
              continue;
            }
            const T* row = src + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              d[ox] = (ix >= 0 && ix < g.w) ? row[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates cols back into x.
template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t p_total = g.cols();
  const std::size_t plane = static_cast<std::size_t>(g.ho) * g.wo;
  for (int c = 0; c < g.c; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const T* src = cols + (static_cast<std::size_t>(c * g.k + ky) * g.k + kx) * p_total;
        for (int b = 0; b < g.n; ++b) {
          T* dst = x + (static_cast<std::size_t>(b) * g.c + c) * g.h * g.w;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const T* s = src + b * plane + static_cast<std::size_t>(oy) * g.wo;
            T* row = dst + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) row[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

// [n, c, hw] <-> [c, n*hw]
template <typename T>
void nchw_to_cn(const T* x, int n, int c, std::size_t hw, T* out) {
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* s = x + (static_cast<std::size_t>(b) * c + ch) * hw;
      std::copy(s, s + hw, out + static_cast<std::size_t>(ch) * n * hw + b * hw);
    }
  }
}

template <typename T>
void cn_to_nchw_add(const T* m, int n, int c, std::size_t hw, T* out) {
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const T* s = m + static_cast<std::size_t>(ch) * n * hw + b * hw;
      T* d = out + (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) d[i] += s[i];
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return make_result<T>(a.shape(), std::move(out), Parents<T>{a.shared(), b.shared()},
                        [pa, pb](Node<T>& self) {
                          const T* g = self.grad.data();
                          for (Node<T>* p : {pa, pb}) {
                            if (!p->requires_grad) continue;
                            T* gp = p->grad_buffer();
                            for (std::size_t i = 0; i < self.value.size(); ++i) gp[i] += g[i];
                          }
                        });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return make_result<T>(a.shape(), std::move(out), Parents<T>{a.shared(), b.shared()},
                        [pa, pb](Node<T>& self) {
                          const T* g = self.grad.data();
                          if (pa->requires_grad) {
                            T* ga = pa->grad_buffer();
                            for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i];
                          }
                          if (pb->requires_grad) {
                            T* gb = pb->grad_buffer();
                            for (std::size_t i = 0; i < self.value.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Node<T>*pa = a.node(), *pb = b.node();
  return make_result<T>(a.shape(), std::move(out), Parents<T>{a.shared(), b.shared()},
                        [pa, pb](Node<T>& self) {
                          const T* g = self.grad.data();
                          if (pa->requires_grad) {
                            T* ga = pa->grad_buffer();
                            for (std::size_t i = 0; i < self.value.size(); ++i) {
                              ga[i] += g[i] * pb->value[i];
                            }
                          }
                          if (pb->requires_grad) {
                            T* gb = pb->grad_buffer();
                            for (std::size_t i = 0; i < self.value.size(); ++i) {
                              gb[i] += g[i] * pa->value[i];
                            }
                          }
                        });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s) {
  require(s.defined() && s.size() == 1, "mul_scalar: scalar operand must have one element");
  const T sv = s.item();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
  Node<T>*pa = a.node(), *ps = s.node();
  return make_result<T>(a.shape(), std::move(out), Parents<T>{a.shared(), s.shared()},
                        [pa, ps](Node<T>& self) {
                          const T* g = self.grad.data();
                          const T sv = ps->value[0];
                          if (pa->requires_grad) {
                            T* ga = pa->grad_buffer();
                            for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i] * sv;
                          }
                          if (ps->requires_grad) {
                            T acc = 0;
                            for (std::size_t i = 0; i < self.value.size(); ++i) {
                              acc += g[i] * pa->value[i];
                            }
                            ps->grad_buffer()[0] += acc;
                          }
                        });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: element count mismatch " +
                                        shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.value().begin(), a.value().end());
  Node<T>* pa = a.node();
  return make_result<T>(std::move(shape), std::move(out), Parents<T>{a.shared()},
                        [pa](Node<T>& self) {
                          T* ga = pa->grad_buffer();
                          for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += self.grad[i];
                        });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  require(w.dim(1) == in, "linear: input width " + std::to_string(in) +
                              " does not match weight " + shape_str(w.shape()));
  require(!b.defined() || (b.rank() == 1 && b.dim(0) == out_dim), "linear: bad bias shape");
  std::vector<T> out(static_cast<std::size_t>(n) * out_dim);
  MapR<T> y(out.data(), n, out_dim);
  y.noalias() = CMapR<T>(x.data(), n, in) * CMapR<T>(w.data(), out_dim, in).transpose();
  if (b.defined()) {
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < out_dim; ++c) y(r, c) += b.data()[c];
    }
  }
  Node<T>*px = x.node(), *pw = w.node(), *pb = b.defined() ? b.node() : nullptr;
  Parents<T> parents{x.shared(), w.shared()};
  if (pb != nullptr) parents.push_back(b.shared());
  return make_result<T>(
      Shape{n, out_dim}, std::move(out), std::move(parents),
      [px, pw, pb, n, in, out_dim](Node<T>& self) {
        CMapR<T> g(self.grad.data(), n, out_dim);
        if (px->requires_grad) {
          MapR<T>(px->grad_buffer(), n, in).noalias() +=
              g * CMapR<T>(pw->value.data(), out_dim, in);
        }
        if (pw->requires_grad) {
          MapR<T>(pw->grad_buffer(), out_dim, in).noalias() +=
              g.transpose() * CMapR<T>(px->value.data(), n, in);
        }
        if (pb != nullptr && pb->requires_grad) {
          T* gb = pb->grad_buffer();
          for (int r = 0; r < n; ++r) {
            for (int c = 0; c < out_dim; ++c) gb[c] += g(r, c);
          }
        }
      });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int n = a.dim(0), d = a.dim(1), m = b.dim(0);
  require(b.dim(1) == d, "matmul_nt: inner dimension mismatch");
  std::vector<T> out(static_cast<std::size_t>(n) * m);
  MapR<T>(out.data(), n, m).noalias() =
      CMapR<T>(a.data(), n, d) * CMapR<T>(b.data(), m, d).transpose();
  Node<T>*pa = a.node(), *pb = b.node();
  return make_result<T>(Shape{n, m}, std::move(out), Parents<T>{a.shared(), b.shared()},
                        [pa, pb, n, d, m](Node<T>& self) {
                          CMapR<T> g(self.grad.data(), n, m);
                          if (pa->requires_grad) {
                            MapR<T>(pa->grad_buffer(), n, d).noalias() +=
                                g * CMapR<T>(pb->value.data(), m, d);
                          }
                          if (pb->requires_grad) {
                            MapR<T>(pb->grad_buffer(), m, d).noalias() +=
                                g.transpose() * CMapR<T>(pa->value.data(), n, d);
                          }
                        });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_rank(a, 2, "transpose");
  const int n = a.dim(0), m = a.dim(1);
  std::vector<T> out(a.size());
  MapR<T>(out.data(), m, n) = CMapR<T>(a.data(), n, m).transpose();
  Node<T>* pa = a.node();
  return make_result<T>(Shape{m, n}, std::move(out), Parents<T>{a.shared()},
                        [pa, n, m](Node<T>& self) {
                          MapR<T>(pa->grad_buffer(), n, m) +=
                              CMapR<T>(self.grad.data(), m, n).transpose();
                        });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  require(w.dim(2) == w.dim(3), "conv2d: square kernels only");
  require(w.dim(1) == x.dim(1), "conv2d: input channels " + std::to_string(x.dim(1)) +
                                    " do not match weight " + shape_str(w.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, pad, 0, 0};
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than padded input");
  const int co = w.dim(0);
  const std::size_t kk = g.rows(), p = g.cols(), plane = static_cast<std::size_t>(g.ho) * g.wo;
  require(!b.defined() || (b.rank() == 1 && b.dim(0) == co), "conv2d: bad bias shape");

  auto cols = std::make_shared<std::vector<T>>(kk * p);
  im2col(x.data(), g, cols->data());
  RowMat<T> res(co, static_cast<Eigen::Index>(p));
  res.noalias() = CMapR<T>(w.data(), co, kk) * CMapR<T>(cols->data(), kk, p);
  std::vector<T> out(static_cast<std::size_t>(g.n) * co * plane);
  for (int bi = 0; bi < g.n; ++bi) {
    for (int c = 0; c < co; ++c) {
      const T bias = b.defined() ? b.data()[c] : T(0);
      const T* s = res.data() + static_cast<std::size_t>(c) * p + bi * plane;
      T* d = out.data() + (static_cast<std::size_t>(bi) * co + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) d[i] = s[i] + bias;
    }
  }
  Node<T>*px = x.node(), *pw = w.node(), *pb = b.defined() ? b.node() : nullptr;
  Parents<T> parents{x.shared(), w.shared()};
  if (pb != nullptr) parents.push_back(b.shared());
  return make_result<T>(
      Shape{g.n, co, g.ho, g.wo}, std::move(out), std::move(parents),
      [px, pw, pb, g, co, kk, p, plane, cols](Node<T>& self) {
        RowMat<T> dm(co, static_cast<Eigen::Index>(p));
        for (int bi = 0; bi < g.n; ++bi) {
          for (int c = 0; c < co; ++c) {
            const T* s = self.grad.data() + (static_cast<std::size_t>(bi) * co + c) * plane;
            std::copy(s, s + plane, dm.data() + static_cast<std::size_t>(c) * p + bi * plane);
          }
        }
        if (pw->requires_grad) {
          MapR<T>(pw->grad_buffer(), co, kk).noalias() +=
              dm * CMapR<T>(cols->data(), kk, p).transpose();
        }
        if (pb != nullptr && pb->requires_grad) {
          T* gb = pb->grad_buffer();
          for (int c = 0; c < co; ++c) gb[c] += dm.row(c).sum();
        }
        if (px->requires_grad) {
          RowMat<T> dcols(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p));
          dcols.noalias() = CMapR<T>(pw->value.data(), co, kk).transpose() * dm;
          col2im(dcols.data(), g, px->grad_buffer());
        }
      });
}

template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
                        int pad) {
  require_rank(x, 4, "conv_transpose2d");
  require_rank(w, 4, "conv_transpose2d weight");
  require(w.dim(0) == x.dim(1), "conv_transpose2d: input channels do not match weight");
  require(w.dim(2) == w.dim(3), "conv_transpose2d: square kernels only");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(1), k = w.dim(2);
  const int ho = (h - 1) * stride - 2 * pad + k;
  const int wo = (wd - 1) * stride - 2 * pad + k;
  require(ho > 0 && wo > 0, "conv_transpose2d: empty output");
  require(!b.defined() || (b.rank() == 1 && b.dim(0) == co), "conv_transpose2d: bad bias");
  // Geometry of the adjoint convolution: output tensor -> input positions.
  const ConvGeom g{n, co, ho, wo, k, stride, pad, h, wd};
  const std::size_t hw = static_cast<std::size_t>(h) * wd;
  const std::size_t p = static_cast<std::size_t>(n) * hw;
  const std::size_t ckk = g.rows();
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;

  auto xm = std::make_shared<std::vector<T>>(static_cast<std::size_t>(ci) * p);
  nchw_to_cn(x.data(), n, ci, hw, xm->data());
  RowMat<T> cols(static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(p));
  cols.noalias() =
      CMapR<T>(w.data(), ci, ckk).transpose() * CMapR<T>(xm->data(), ci, p);
  std::vector<T> out(static_cast<std::size_t>(n) * co * out_plane, T(0));
  col2im(cols.data(), g, out.data());
  if (b.defined()) {
    for (int bi = 0; bi < n; ++bi) {
      for (int c = 0; c < co; ++c) {
        T* d = out.data() + (static_cast<std::size_t>(bi) * co + c) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) d[i] += b.data()[c];
      }
    }
  }
  Node<T>*px = x.node(), *pw = w.node(), *pb = b.defined() ? b.node() : nullptr;
  Parents<T> parents{x.shared(), w.shared()};
  if (pb != nullptr) parents.push_back(b.shared());
  return make_result<T>(
      Shape{n, co, ho, wo}, std::move(out), std::move(parents),
      [px, pw, pb, g, n, ci, co, hw, p, ckk, out_plane, xm](Node<T>& self) {
        std::vector<T> dcols(ckk * p);
        im2col(self.grad.data(), g, dcols.data());
        CMapR<T> dc(dcols.data(), ckk, p);
        if (pw->requires_grad) {
          MapR<T>(pw->grad_buffer(), ci, ckk).noalias() +=
              CMapR<T>(xm->data(), ci, p) * dc.transpose();
        }
        if (px->requires_grad) {
          RowMat<T> dx(ci, static_cast<Eigen::Index>(p));
          dx.noalias() = CMapR<T>(pw->value.data(), ci, ckk) * dc;
          cn_to_nchw_add(dx.data(), n, ci, hw, px->grad_buffer());
        }
        if (pb != nullptr && pb->requires_grad) {
          T* gb = pb->grad_buffer();
          for (int bi = 0; bi < n; ++bi) {
            for (int c = 0; c < co; ++c) {
              const T* s = self.grad.data() + (static_cast<std::size_t>(bi) * co + c) * out_plane;
              T acc = 0;
              for (std::size_t i = 0; i < out_plane; ++i) acc += s[i];
              gb[c] += acc;
            }
          }
        }
      });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x, int out_h, int out_w) {
  require_rank(x, 4, "upsample2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(out_h > 0 && out_w > 0 && out_h <= 2 * h && out_w <= 2 * w,
          "upsample2x: output larger than twice the input");
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  std::vector<T> out(planes * out_h * out_w);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* s = x.data() + pl * h * w;
    T* d = out.data() + pl * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      for (int xx = 0; xx < out_w; ++xx) d[y * out_w + xx] = s[(y / 2) * w + xx / 2];
    }
  }
  Node<T>* px = x.node();
  return make_result<T>(Shape{n, c, out_h, out_w}, std::move(out), Parents<T>{x.shared()},
                        [px, planes, h, w, out_h, out_w](Node<T>& self) {
                          T* gx = px->grad_buffer();
                          for (std::size_t pl = 0; pl < planes; ++pl) {
                            const T* g = self.grad.data() + pl * out_h * out_w;
                            T* d = gx + pl * h * w;
                            for (int y = 0; y < out_h; ++y) {
                              for (int xx = 0; xx < out_w; ++xx) {
                                d[(y / 2) * w + xx / 2] += g[y * out_w + xx];
                              }
                            }
                          }
                        });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: batch/spatial mismatch");
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n) * (ca + cb) * hw);
  for (int bi = 0; bi < n; ++bi) {
    T* d = out.data() + static_cast<std::size_t>(bi) * (ca + cb) * hw;
    std::copy_n(a.data() + static_cast<std::size_t>(bi) * ca * hw, ca * hw, d);
    std::copy_n(b.data() + static_cast<std::size_t>(bi) * cb * hw, cb * hw, d + ca * hw);
  }
  Node<T>*pa = a.node(), *pb = b.node();
  return make_result<T>(
      Shape{n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), Parents<T>{a.shared(), b.shared()},
      [pa, pb, n, ca, cb, hw](Node<T>& self) {
        for (int bi = 0; bi < n; ++bi) {
          const T* g = self.grad.data() + static_cast<std::size_t>(bi) * (ca + cb) * hw;
          if (pa->requires_grad) {
            T* d = pa->grad_buffer() + static_cast<std::size_t>(bi) * ca * hw;
            for (std::size_t i = 0; i < ca * hw; ++i) d[i] += g[i];
          }
          if (pb->requires_grad) {
            T* d = pb->grad_buffer() + static_cast<std::size_t>(bi) * cb * hw;
            for (std::size_t i = 0; i < cb * hw; ++i) d[i] += g[ca * hw + i];
          }
        }
      });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
  require_rank(x, 4, "slice_channels");
  const int n = x.dim(0), c = x.dim(1);
  require(begin >= 0 && count > 0 && begin + count <= c, "slice_channels: out of range");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n) * count * hw);
  for (int bi = 0; bi < n; ++bi) {
    std::copy_n(x.data() + (static_cast<std::size_t>(bi) * c + begin) * hw, count * hw,
                out.data() + static_cast<std::size_t>(bi) * count * hw);
  }
  Node<T>* px = x.node();
  return make_result<T>(Shape{n, count, x.dim(2), x.dim(3)}, std::move(out),
                        Parents<T>{x.shared()}, [px, n, c, begin, count, hw](Node<T>& self) {
                          T* gx = px->grad_buffer();
                          for (int bi = 0; bi < n; ++bi) {
                            const T* g = self.grad.data() + static_cast<std::size_t>(bi) * count * hw;
                            T* d = gx + (static_cast<std::size_t>(bi) * c + begin) * hw;
                            for (std::size_t i = 0; i < count * hw; ++i) d[i] += g[i];
                          }
                        });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, int begin, int count) {
  require_rank(x, 2, "slice_cols");
  const int n = x.dim(0), m = x.dim(1);
  require(begin >= 0 && count > 0 && begin + count <= m, "slice_cols: out of range");
  std::vector<T> out(static_cast<std::size_t>(n) * count);
  for (int r = 0; r < n; ++r) {
    std::copy_n(x.data() + static_cast<std::size_t>(r) * m + begin, count,
                out.data() + static_cast<std::size_t>(r) * count);
  }
  Node<T>* px = x.node();
  return make_result<T>(Shape{n, count}, std::move(out), Parents<T>{x.shared()},
                        [px, n, m, begin, count](Node<T>& self) {
                          T* gx = px->grad_buffer();
                          for (int r = 0; r < n; ++r) {
                            for (int j = 0; j < count; ++j) {
                              gx[static_cast<std::size_t>(r) * m + begin + j] +=
                                  self.grad[static_cast<std::size_t>(r) * count + j];
                            }
                          }
                        });
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(v, 2, "add_channel_bias");
  const int n = x.dim(0), c = x.dim(1);
  require(v.dim(0) == n && v.dim(1) == c, "add_channel_bias: shape mismatch");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> out(x.value().begin(), x.value().end());
  for (std::size_t pl = 0; pl < static_cast<std::size_t>(n) * c; ++pl) {
    for (std::size_t i = 0; i < hw; ++i) out[pl * hw + i] += v.data()[pl];
  }
  Node<T>*px = x.node(), *pv = v.node();
  return make_result<T>(x.shape(), std::move(out), Parents<T>{x.shared(), v.shared()},
                        [px, pv, n, c, hw](Node<T>& self) {
                          const T* g = self.grad.data();
                          if (px->requires_grad) {
                            T* gx = px->grad_buffer();
                            for (std::size_t i = 0; i < self.value.size(); ++i) gx[i] += g[i];
                          }
                          if (pv->requires_grad) {
                            T* gv = pv->grad_buffer();
                            for (std::size_t pl = 0; pl < static_cast<std::size_t>(n) * c; ++pl) {
                              T acc = 0;
                              for (std::size_t i = 0; i < hw; ++i) acc += g[pl * hw + i];
                              gv[pl] += acc;
                            }
                          }
                        });
}

template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  require_rank(x, 4, "film");
  const int n = x.dim(0), c = x.dim(1);
  require(gamma.defined() && beta.defined() && gamma.shape() == Shape{n, c} &&
              beta.shape() == Shape{n, c},
          "film: gamma/beta must be [N, C]");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  std::vector<T> out(x.size());
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T gm = T(1) + gamma.data()[pl], bt = beta.data()[pl];
    for (std::size_t i = 0; i < hw; ++i) out[pl * hw + i] = x.data()[pl * hw + i] * gm + bt;
  }
  Node<T>*px = x.node(), *pg = gamma.node(), *pb = beta.node();
  return make_result<T>(
      x.shape(), std::move(out), Parents<T>{x.shared(), gamma.shared(), beta.shared()},
      [px, pg, pb, planes, hw](Node<T>& self) {
        const T* g = self.grad.data();
        T* gx = px->requires_grad ? px->grad_buffer() : nullptr;
        T* gg = pg->requires_grad ? pg->grad_buffer() : nullptr;
        T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
        for (std::size_t pl = 0; pl < planes; ++pl) {
          const T gm = T(1) + pg->value[pl];
          T acc_g = 0, acc_b = 0;
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t j = pl * hw + i;
            if (gx != nullptr) gx[j] += g[j] * gm;
            acc_g += g[j] * px->value[j];
            acc_b += g[j];
          }
          if (gg != nullptr) gg[pl] += acc_g;
          if (gb != nullptr) gb[pl] += acc_b;
        }
      });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(n) * c);
  for (std::size_t pl = 0; pl < out.size(); ++pl) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += x.data()[pl * hw + i];
    out[pl] = acc / static_cast<T>(hw);
  }
  Node<T>* px = x.node();
  return make_result<T>(Shape{n, c}, std::move(out), Parents<T>{x.shared()},
                        [px, hw](Node<T>& self) {
                          T* gx = px->grad_buffer();
                          for (std::size_t pl = 0; pl < self.value.size(); ++pl) {
                            const T g = self.grad[pl] / static_cast<T>(hw);
                            for (std::size_t i = 0; i < hw; ++i) gx[pl * hw + i] += g;
                          }
                        });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  require_rank(x, 2, "l2_normalize_rows");
  const int n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.size());
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const T* s = x.data() + static_cast<std::size_t>(r) * d;
    T acc = 0;
    for (int j = 0; j < d; ++j) acc += s[j] * s[j];
    const T nr = std::max(std::sqrt(acc), T(1e-12));
    (*norms)[r] = nr;
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(r) * d + j] = s[j] / nr;
  }
  Node<T>* px = x.node();
  return make_result<T>(x.shape(), std::move(out), Parents<T>{x.shared()},
                        [px, n, d, norms](Node<T>& self) {
                          T* gx = px->grad_buffer();
                          for (int r = 0; r < n; ++r) {
                            const std::size_t o = static_cast<std::size_t>(r) * d;
                            T dot = 0;
                            for (int j = 0; j < d; ++j) dot += self.grad[o + j] * self.value[o + j];
                            for (int j = 0; j < d; ++j) {
                              gx[o + j] += (self.grad[o + j] - self.value[o + j] * dot) / (*norms)[r];
                            }
                          }
                        });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value()) acc += v;
  Node<T>* pa = a.node();
  return make_result<T>(Shape{1}, std::vector<T>{acc}, Parents<T>{a.shared()},
                        [pa](Node<T>& self) {
                          T* ga = pa->grad_buffer();
                          for (std::size_t i = 0; i < pa->value.size(); ++i) ga[i] += self.grad[0];
                        });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Var<T> squared_error_sum(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "squared_error_sum");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  Node<T>*pa = a.node(), *pb = b.node();
  return make_result<T>(Shape{1}, std::vector<T>{acc}, Parents<T>{a.shared(), b.shared()},
                        [pa, pb](Node<T>& self) {
                          const T g = self.grad[0];
                          T* ga = pa->requires_grad ? pa->grad_buffer() : nullptr;
                          T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
                          for (std::size_t i = 0; i < pa->value.size(); ++i) {
                            const T d = T(2) * g * (pa->value[i] - pb->value[i]);
                            if (ga != nullptr) ga[i] += d;
                            if (gb != nullptr) gb[i] -= d;
                          }
                        });
}

template <typename T>
Var<T> abs_error_sum(const Var<T>& a, const Var<T>& b) {
  same_shape(a, b, "abs_error_sum");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::fabs(a.data()[i] - b.data()[i]);
  Node<T>*pa = a.node(), *pb = b.node();
  return make_result<T>(Shape{1}, std::vector<T>{acc}, Parents<T>{a.shared(), b.shared()},
                        [pa, pb](Node<T>& self) {
                          const T g = self.grad[0];
                          T* ga = pa->requires_grad ? pa->grad_buffer() : nullptr;
                          T* gb = pb->requires_grad ? pb->grad_buffer() : nullptr;
                          for (std::size_t i = 0; i < pa->value.size(); ++i) {
                            const T diff = pa->value[i] - pb->value[i];
                            const T s = diff > T(0) ? g : (diff < T(0) ? -g : T(0));
                            if (ga != nullptr) ga[i] += s;
                            if (gb != nullptr) gb[i] -= s;
                          }
                        });
}

template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<int>& targets) {
  require_rank(logits, 2, "cross_entropy_rows");
  const int n = logits.dim(0), m = logits.dim(1);
  require(static_cast<int>(targets.size()) == n, "cross_entropy_rows: one target per row");
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  T loss = 0;
  for (int r = 0; r < n; ++r) {
    require(targets[r] >= 0 && targets[r] < m, "cross_entropy_rows: target out of range");
    const T* z = logits.data() + static_cast<std::size_t>(r) * m;
    T* p = probs->data() + static_cast<std::size_t>(r) * m;
    const T zmax = *std::max_element(z, z + m);
    T denom = 0;
    for (int j = 0; j < m; ++j) {
      p[j] = std::exp(z[j] - zmax);
      denom += p[j];
    }
    for (int j = 0; j < m; ++j) p[j] /= denom;
    loss += -(z[targets[r]] - zmax - std::log(denom));
  }
  loss /= static_cast<T>(n);
  Node<T>* pl = logits.node();
  return make_result<T>(Shape{1}, std::vector<T>{loss}, Parents<T>{logits.shared()},
                        [pl, probs, targets, n, m](Node<T>& self) {
                          T* gl = pl->grad_buffer();
                          const T g = self.grad[0] / static_cast<T>(n);
                          for (int r = 0; r < n; ++r) {
                            for (int j = 0; j < m; ++j) {
                              const std::size_t i = static_cast<std::size_t>(r) * m + j;
                              gl[i] += g * ((*probs)[i] - (j == targets[r] ? T(1) : T(0)));
                            }
                          }
                        });
}

template <typename T>
Var<T> gaussian_kl(const Var<T>& mu, const Var<T>& logvar) {
  same_shape(mu, logvar, "gaussian_kl");
  T acc = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const T m = mu.data()[i], lv = logvar.data()[i];
    acc += T(0.5) * (m * m + std::exp(lv) - lv - T(1));
  }
  Node<T>*pm = mu.node(), *pv = logvar.node();
  return make_result<T>(Shape{1}, std::vector<T>{acc}, Parents<T>{mu.shared(), logvar.shared()},
                        [pm, pv](Node<T>& self) {
                          const T g = self.grad[0];
                          T* gm = pm->requires_grad ? pm->grad_buffer() : nullptr;
                          T* gv = pv->requires_grad ? pv->grad_buffer() : nullptr;
                          for (std::size_t i = 0; i < pm->value.size(); ++i) {
                            if (gm != nullptr) gm[i] += g * pm->value[i];
                            if (gv != nullptr) gv[i] += g * T(0.5) * (std::exp(pv->value[i]) - T(1));
                          }
                        });
}

template <typename T>
Var<T> embedding_mean(const Var<T>& table, const std::vector<std::vector<int>>& tokens) {
  require_rank(table, 2, "embedding_mean");
  const int v = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(tokens.size());
  std::vector<T> out(static_cast<std::size_t>(n) * d, T(0));
  for (int r = 0; r < n; ++r) {
    require(!tokens[r].empty(), "embedding_mean: empty token sequence");
    for (int t : tokens[r]) {
      require(t >= 0 && t < v, "embedding_mean: token id out of range");
      for (int j = 0; j < d; ++j) {
        out[static_cast<std::size_t>(r) * d + j] += table.data()[static_cast<std::size_t>(t) * d + j];
      }
    }
    const T inv = T(1) / static_cast<T>(tokens[r].size());
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(r) * d + j] *= inv;
  }
  Node<T>* pt = table.node();
  return make_result<T>(Shape{n, d}, std::move(out), Parents<T>{table.shared()},
                        [pt, tokens, n, d](Node<T>& self) {
                          T* gt = pt->grad_buffer();
                          for (int r = 0; r < n; ++r) {
                            const T inv = T(1) / static_cast<T>(tokens[r].size());
                            for (int t : tokens[r]) {
                              for (int j = 0; j < d; ++j) {
                                gt[static_cast<std::size_t>(t) * d + j] +=
                                    self.grad[static_cast<std::size_t>(r) * d + j] * inv;
                              }
                            }
                          }
                        });
}

#define FLAB_INSTANTIATE_OPS(T)                                                        \
  template Var<T> add(const Var<T>&, const Var<T>&);                                   \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                   \
  template Var<T> scale(const Var<T>&, T);                                             \
  template Var<T> add_scalar(const Var<T>&, T);                                        \
  template Var<T> mul_scalar(const Var<T>&, const Var<T>&);                            \
  template Var<T> exp(const Var<T>&);                                                  \
  template Var<T> silu(const Var<T>&);                                                 \
  template Var<T> relu(const Var<T>&);                                                 \
  template Var<T> tanh(const Var<T>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                       \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                 \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                             \
  template Var<T> transpose(const Var<T>&);                                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);       \
  template Var<T> conv_transpose2d(const Var<T>&, const Var<T>&, const Var<T>&, int,   \
                                   int);                                               \
  template Var<T> upsample2x(const Var<T>&, int, int);                                 \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                       \
  template Var<T> slice_channels(const Var<T>&, int, int);                             \
  template Var<T> slice_cols(const Var<T>&, int, int);                                 \
  template Var<T> add_channel_bias(const Var<T>&, const Var<T>&);                      \
  template Var<T> film(const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> global_avg_pool(const Var<T>&);                                      \
  template Var<T> l2_normalize_rows(const Var<T>&);                                    \
  template Var<T> sum(const Var<T>&);                                                  \
  template Var<T> mean(const Var<T>&);                                                 \
  template Var<T> squared_error_sum(const Var<T>&, const Var<T>&);                     \
  template Var<T> abs_error_sum(const Var<T>&, const Var<T>&);                         \
  template Var<T> cross_entropy_rows(const Var<T>&, const std::vector<int>&);          \
  template Var<T> gaussian_kl(const Var<T>&, const Var<T>&);                           \
  template Var<T> embedding_mean(const Var<T>&, const std::vector<std::vector<int>>&);

FLAB_INSTANTIATE_OPS(float)
FLAB_INSTANTIATE_OPS(double)

}  // namespace flab::nn
