#include "mococxr/diffcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace mococxr::diffcore {
namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<MatR<T>>;
template <class T>
using CMap = Eigen::Map<const MatR<T>>;

template <class T>
using NodeT = detail::Node<T>;

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void require_rank(const std::string& op, const Shape& s, std::size_t rank, const char* name) {
  if (s.size() != rank) {
    shape_error(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

void require_same(const std::string& op, const Shape& a, const Shape& b) {
  if (a != b) shape_error(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Builds the output node and, when recording, links it to its inputs.
template <class T, class Fn>
BasicTensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const BasicTensor<T>*> inputs,
                           Fn&& backward_fn) {
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool record = false;
  if (detail::grad_mode_enabled()) {
    for (const auto* in : inputs) {
      if (in->defined() && in->requires_grad()) record = true;
    }
  }
  if (record) {
    node->requires_grad = true;
    for (const auto* in : inputs) {
      if (in->defined()) node->inputs.push_back(in->node());
    }
    node->backward_fn = std::forward<Fn>(backward_fn);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

template <class T>
NodeT<T>* raw(const BasicTensor<T>& t) {
  return t.defined() ? t.node().get() : nullptr;
}

template <class T>
bool wants(const NodeT<T>* n) {
  return n != nullptr && n->requires_grad;
}

}  // namespace

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto* na = raw(a);
  auto* nb = raw(b);
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [na, nb](NodeT<T>& o) {
    for (auto* n : {na, nb}) {
      if (!wants(n)) continue;
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto* na = raw(a);
  auto* nb = raw(b);
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [na, nb](NodeT<T>& o) {
    if (wants(na)) {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants(nb)) {
      auto& g = nb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto* na = raw(a);
  auto* nb = raw(b);
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, [na, nb](NodeT<T>& o) {
    if (wants(na)) {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * nb->value[i];
    }
    if (wants(nb)) {
      auto& g = nb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * na->value[i];
    }
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  auto* na = raw(a);
  return make_result<T>(a.shape(), std::move(out), {&a}, [na, factor](NodeT<T>& o) {
    auto& g = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = v > T{0} ? v : T{0};
  auto* na = raw(a);
  return make_result<T>(a.shape(), std::move(out), {&a}, [na](NodeT<T>& o) {
    auto& g = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (na->value[i] > T{0}) g[i] += o.grad[i];
    }
  });
}

namespace {
template <class T>
T stable_sigmoid(T z) {
  if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
  T e = std::exp(z);
  return e / (T{1} + e);
}
}  // namespace

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = stable_sigmoid(v);
  auto* na = raw(a);
  return make_result<T>(a.shape(), std::move(out), {&a}, [na](NodeT<T>& o) {
    auto& g = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.value[i] * (T{1} - o.value[i]);
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total{0};
  for (T v : a.values()) total += v;
  auto* na = raw(a);
  return make_result<T>(Shape{}, {total}, {&a}, [na](NodeT<T>& o) {
    auto& g = na->ensure_grad();
    for (auto& gi : g) gi += o.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  if (a.numel() == 0) shape_error("mean", "empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_error("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  auto* na = raw(a);
  return make_result<T>(std::move(shape), std::move(out), {&a}, [na](NodeT<T>& o) {
    auto& g = na->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank("matmul", a.shape(), 2, "lhs");
  require_rank("matmul", b.shape(), 2, "rhs");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_error("matmul", "inner extents differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n).noalias() = CMap<T>(a.values().data(), m, k) * CMap<T>(b.values().data(), k, n);
  auto* na = raw(a);
  auto* nb = raw(b);
  return make_result<T>(Shape{m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](NodeT<T>& o) {
    CMap<T> go(o.grad.data(), m, n);
    if (wants(na)) Map<T>(na->ensure_grad().data(), m, k).noalias() += go * CMap<T>(nb->value.data(), k, n).transpose();
    if (wants(nb)) Map<T>(nb->ensure_grad().data(), k, n).noalias() += CMap<T>(na->value.data(), m, k).transpose() * go;
  });
}

template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank("matmul_nt", a.shape(), 2, "lhs");
  require_rank("matmul_nt", b.shape(), 2, "rhs");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    shape_error("matmul_nt", "inner extents differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  Map<T>(out.data(), m, n).noalias() = CMap<T>(a.values().data(), m, k) * CMap<T>(b.values().data(), n, k).transpose();
  auto* na = raw(a);
  auto* nb = raw(b);
  return make_result<T>(Shape{m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](NodeT<T>& o) {
    CMap<T> go(o.grad.data(), m, n);
    if (wants(na)) Map<T>(na->ensure_grad().data(), m, k).noalias() += go * CMap<T>(nb->value.data(), n, k);
    if (wants(nb)) Map<T>(nb->ensure_grad().data(), n, k).noalias() += go.transpose() * CMap<T>(na->value.data(), m, k);
  });
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  require_rank("linear", x.shape(), 2, "input");
  require_rank("linear", weight.shape(), 2, "weight");
  const auto batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    shape_error("linear", "input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out_dim}) {
    shape_error("linear", "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(out_dim) + " outputs");
  }
  std::vector<T> out(batch * out_dim);
  Map<T> y(out.data(), batch, out_dim);
  y.noalias() = CMap<T>(x.values().data(), batch, in) * CMap<T>(weight.values().data(), out_dim, in).transpose();
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) y(r, c) += bv[c];
  }
  auto* nx = raw(x);
  auto* nw = raw(weight);
  auto* nbias = raw(bias);
  return make_result<T>(Shape{batch, out_dim}, std::move(out), {&x, &weight, &bias},
                        [nx, nw, nbias, batch, in, out_dim](NodeT<T>& o) {
                          CMap<T> go(o.grad.data(), batch, out_dim);
                          if (wants(nx)) {
                            Map<T>(nx->ensure_grad().data(), batch, in).noalias() +=
                                go * CMap<T>(nw->value.data(), out_dim, in);
                          }
                          if (wants(nw)) {
                            Map<T>(nw->ensure_grad().data(), out_dim, in).noalias() +=
                                go.transpose() * CMap<T>(nx->value.data(), batch, in);
                          }
                          if (wants(nbias)) {
                            auto& g = nbias->ensure_grad();
                            for (std::size_t r = 0; r < batch; ++r)
                              for (std::size_t c = 0; c < out_dim; ++c) g[c] += go(r, c);
                          }
                        });
}

template <class T>
BasicTensor<T> row_dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank("row_dot", a.shape(), 2, "lhs");
  require_same("row_dot", a.shape(), b.shape());
  const auto n = a.dim(0), d = a.dim(1);
  std::vector<T> out(n, T{0});
  auto av = a.values(), bv = b.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r] += av[r * d + c] * bv[r * d + c];
  auto* na = raw(a);
  auto* nb = raw(b);
  return make_result<T>(Shape{n, 1}, std::move(out), {&a, &b}, [na, nb, n, d](NodeT<T>& o) {
    if (wants(na)) {
      auto& g = na->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += o.grad[r] * nb->value[r * d + c];
    }
    if (wants(nb)) {
      auto& g = nb->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += o.grad[r] * na->value[r * d + c];
    }
  });
}

template <class T>
BasicTensor<T> concat_cols(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank("concat_cols", a.shape(), 2, "lhs");
  require_rank("concat_cols", b.shape(), 2, "rhs");
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  if (b.dim(0) != n) shape_error("concat_cols", "row counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto width = ca + cb;
  std::vector<T> out(n * width);
  auto av = a.values(), bv = b.values();
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(av.begin() + r * ca, ca, out.begin() + r * width);
    std::copy_n(bv.begin() + r * cb, cb, out.begin() + r * width + ca);
  }
  auto* na = raw(a);
  auto* nb = raw(b);
  return make_result<T>(Shape{n, width}, std::move(out), {&a, &b}, [na, nb, n, ca, cb, width](NodeT<T>& o) {
    if (wants(na)) {
      auto& g = na->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < ca; ++c) g[r * ca + c] += o.grad[r * width + c];
    }
    if (wants(nb)) {
      auto& g = nb->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < cb; ++c) g[r * cb + c] += o.grad[r * width + ca + c];
    }
  });
}

template <class T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& a, T eps) {
  require_rank("l2_normalize_rows", a.shape(), 2, "input");
  const auto n = a.dim(0), d = a.dim(1);
  std::vector<T> out(a.numel());
  std::vector<T> norms(n);
  auto av = a.values();
  for (std::size_t r = 0; r < n; ++r) {
    T ss{0};
    for (std::size_t c = 0; c < d; ++c) ss += av[r * d + c] * av[r * d + c];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = av[r * d + c] / norms[r];
  }
  auto* na = raw(a);
  return make_result<T>(a.shape(), std::move(out), {&a}, [na, n, d, eps, norms = std::move(norms)](NodeT<T>& o) {
    auto& g = na->ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      const T* y = o.value.data() + r * d;
      const T* gy = o.grad.data() + r * d;
      if (norms[r] > eps) {
        T proj{0};
        for (std::size_t c = 0; c < d; ++c) proj += y[c] * gy[c];
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += (gy[c] - y[c] * proj) / norms[r];
      } else {
        for (std::size_t c = 0; c < d; ++c) g[r * d + c] += gy[c] / eps;
      }
    }
  });
}

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;
  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h * out_w; }
};

template <class T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const auto cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        T* row = col + ((c * g.kernel + kh) * g.kernel + kw) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.padding);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst, g.out_w, T{0});
            continue;
          }
          const T* src = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.padding);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : src[iw];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const auto cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        const T* row = col + ((c * g.kernel + kh) * g.kernel + kw) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = image + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.padding);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dOptions options) {
  require_rank("conv2d", x.shape(), 4, "input");
  require_rank("conv2d", weight.shape(), 4, "weight");
  const auto batch = x.dim(0);
  const auto out_ch = weight.dim(0);
  const auto kernel = weight.dim(2);
  if (weight.dim(1) != x.dim(1) || weight.dim(3) != kernel) {
    shape_error("conv2d", "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (options.stride == 0) shape_error("conv2d", "stride must be positive");
  if (bias.defined() && bias.shape() != Shape{out_ch}) {
    shape_error("conv2d", "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(out_ch) + " channels");
  }
  const auto h = x.dim(2), w = x.dim(3);
  if (h + 2 * options.padding < kernel || w + 2 * options.padding < kernel) {
    shape_error("conv2d", "kernel larger than padded input " + shape_str(x.shape()));
  }
  const ConvGeometry g{x.dim(1), h, w, kernel, options.stride, options.padding,
                       (h + 2 * options.padding - kernel) / options.stride + 1,
                       (w + 2 * options.padding - kernel) / options.stride + 1};
  const auto in_size = g.channels * h * w;
  const auto out_size = out_ch * g.col_cols();
  std::vector<T> out(batch * out_size);
  std::vector<T> col(g.col_rows() * g.col_cols());
  CMap<T> wm(weight.values().data(), out_ch, g.col_rows());
  auto xv = x.values();
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(xv.data() + n * in_size, g, col.data());
    Map<T> y(out.data() + n * out_size, out_ch, g.col_cols());
    y.noalias() = wm * CMap<T>(col.data(), g.col_rows(), g.col_cols());
    if (bias.defined()) {
      auto bv = bias.values();
      for (std::size_t o = 0; o < out_ch; ++o) y.row(o).array() += bv[o];
    }
  }
  auto* nx = raw(x);
  auto* nw = raw(weight);
  auto* nb = raw(bias);
  Shape out_shape{batch, out_ch, g.out_h, g.out_w};
  return make_result<T>(std::move(out_shape), std::move(out), {&x, &weight, &bias},
                        [nx, nw, nb, g, batch, out_ch, in_size, out_size](NodeT<T>& o) {
                          std::vector<T> col(g.col_rows() * g.col_cols());
                          std::vector<T> dcol(wants(nx) ? col.size() : 0);
                          CMap<T> wm(nw->value.data(), out_ch, g.col_rows());
                          for (std::size_t n = 0; n < batch; ++n) {
                            CMap<T> gy(o.grad.data() + n * out_size, out_ch, g.col_cols());
                            if (wants(nw)) {
                              im2col(nx->value.data() + n * in_size, g, col.data());
                              Map<T>(nw->ensure_grad().data(), out_ch, g.col_rows()).noalias() +=
                                  gy * CMap<T>(col.data(), g.col_rows(), g.col_cols()).transpose();
                            }
                            if (wants(nx)) {
                              Map<T>(dcol.data(), g.col_rows(), g.col_cols()).noalias() = wm.transpose() * gy;
                              col2im(dcol.data(), g, nx->ensure_grad().data() + n * in_size);
                            }
                            if (wants(nb)) {
                              auto& gb = nb->ensure_grad();
                              for (std::size_t c = 0; c < out_ch; ++c) gb[c] += gy.row(c).sum();
                            }
                          }
                        });
}

template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          std::size_t groups, T eps) {
  require_rank("group_norm", x.shape(), 4, "input");
  const auto batch = x.dim(0), channels = x.dim(1);
  const auto spatial = x.dim(2) * x.dim(3);
  if (groups == 0 || channels % groups != 0) {
    shape_error("group_norm", std::to_string(channels) + " channels not divisible into " + std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    shape_error("group_norm", "affine parameters must have shape [" + std::to_string(channels) + "]");
  }
  const auto per_group = channels / groups;
  const auto group_size = per_group * spatial;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(batch * groups);
  auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const auto base = (n * channels + gi * per_group) * spatial;
      T mu{0};
      for (std::size_t i = 0; i < group_size; ++i) mu += xv[base + i];
      mu /= static_cast<T>(group_size);
      T var{0};
      for (std::size_t i = 0; i < group_size; ++i) {
        const T dlt = xv[base + i] - mu;
        var += dlt * dlt;
      }
      var /= static_cast<T>(group_size);
      const T is = T{1} / std::sqrt(var + eps);
      inv_std[n * groups + gi] = is;
      for (std::size_t c = 0; c < per_group; ++c) {
        const auto ch = gi * per_group + c;
        for (std::size_t s = 0; s < spatial; ++s) {
          const auto idx = base + c * spatial + s;
          xhat[idx] = (xv[idx] - mu) * is;
          out[idx] = gv[ch] * xhat[idx] + bv[ch];
        }
      }
    }
  }
  auto* nx = raw(x);
  auto* ng = raw(gamma);
  auto* nbeta = raw(beta);
  return make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                        [nx, ng, nbeta, batch, channels, groups, per_group, spatial, group_size,
                         xhat = std::move(xhat), inv_std = std::move(inv_std)](NodeT<T>& o) {
                          const auto& gy = o.grad;
                          if (wants(ng) || wants(nbeta)) {
                            auto* dg = wants(ng) ? &ng->ensure_grad() : nullptr;
                            auto* db = wants(nbeta) ? &nbeta->ensure_grad() : nullptr;
                            for (std::size_t n = 0; n < batch; ++n)
                              for (std::size_t c = 0; c < channels; ++c) {
                                const auto base = (n * channels + c) * spatial;
                                for (std::size_t s = 0; s < spatial; ++s) {
                                  if (dg) (*dg)[c] += gy[base + s] * xhat[base + s];
                                  if (db) (*db)[c] += gy[base + s];
                                }
                              }
                          }
                          if (!wants(nx)) return;
                          auto& gx = nx->ensure_grad();
                          const T inv_m = T{1} / static_cast<T>(group_size);
                          for (std::size_t n = 0; n < batch; ++n) {
                            for (std::size_t gi = 0; gi < groups; ++gi) {
                              const auto base = (n * channels + gi * per_group) * spatial;
                              T mean_d{0}, mean_dx{0};
                              for (std::size_t c = 0; c < per_group; ++c) {
                                const T gam = ng->value[gi * per_group + c];
                                for (std::size_t s = 0; s < spatial; ++s) {
                                  const auto idx = base + c * spatial + s;
                                  const T d = gy[idx] * gam;
                                  mean_d += d;
                                  mean_dx += d * xhat[idx];
                                }
                              }
                              mean_d *= inv_m;
                              mean_dx *= inv_m;
                              const T is = inv_std[n * groups + gi];
                              for (std::size_t c = 0; c < per_group; ++c) {
                                const T gam = ng->value[gi * per_group + c];
                                for (std::size_t s = 0; s < spatial; ++s) {
                                  const auto idx = base + c * spatial + s;
                                  gx[idx] += is * (gy[idx] * gam - mean_d - xhat[idx] * mean_dx);
                                }
                              }
                            }
                          }
                        });
}

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_rank("global_avg_pool", x.shape(), 4, "input");
  const auto batch = x.dim(0), channels = x.dim(1);
  const auto spatial = x.dim(2) * x.dim(3);
  if (spatial == 0) shape_error("global_avg_pool", "empty spatial extent");
  std::vector<T> out(batch * channels, T{0});
  auto xv = x.values();
  const T inv = T{1} / static_cast<T>(spatial);
  for (std::size_t i = 0; i < batch * channels; ++i) {
    T acc{0};
    for (std::size_t s = 0; s < spatial; ++s) acc += xv[i * spatial + s];
    out[i] = acc * inv;
  }
  auto* nx = raw(x);
  return make_result<T>(Shape{batch, channels}, std::move(out), {&x}, [nx, batch, channels, spatial, inv](NodeT<T>& o) {
    auto& g = nx->ensure_grad();
    for (std::size_t i = 0; i < batch * channels; ++i) {
      const T gi = o.grad[i] * inv;
      for (std::size_t s = 0; s < spatial; ++s) g[i * spatial + s] += gi;
    }
  });
}

template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<std::size_t>& targets) {
  require_rank("cross_entropy", logits.shape(), 2, "logits");
  const auto n = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != n) {
    shape_error("cross_entropy", std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  }
  if (n == 0 || classes == 0) shape_error("cross_entropy", "empty logits");
  auto lv = logits.values();
  std::vector<T> probs(n * classes);
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= classes) shape_error("cross_entropy", "target index out of range");
    const T* row = lv.data() + r * classes;
    const T mx = *std::max_element(row, row + classes);
    T z{0};
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const T log_z = std::log(z) + mx;
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - log_z);
    total += log_z - row[targets[r]];
  }
  const T loss = total / static_cast<T>(n);
  auto* nl = raw(logits);
  return make_result<T>(Shape{}, {loss}, {&logits},
                        [nl, n, classes, targets, probs = std::move(probs)](NodeT<T>& o) {
                          auto& g = nl->ensure_grad();
                          const T s = o.grad[0] / static_cast<T>(n);
                          for (std::size_t r = 0; r < n; ++r) {
                            for (std::size_t c = 0; c < classes; ++c) {
                              T p = probs[r * classes + c];
                              if (c == targets[r]) p -= T{1};
                              g[r * classes + c] += s * p;
                            }
                          }
                        });
}

template <class T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const std::vector<std::uint8_t>& labels) {
  const auto n = logits.numel();
  if (labels.size() != n) {
    shape_error("bce_with_logits", std::to_string(labels.size()) + " labels for " + std::to_string(n) + " logits");
  }
  if (n == 0) shape_error("bce_with_logits", "empty logits");
  auto zv = logits.values();
  T total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T z = zv[i];
    const T y = labels[i] ? T{1} : T{0};
    total += std::max(z, T{0}) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto* nl = raw(logits);
  return make_result<T>(Shape{}, {total / static_cast<T>(n)}, {&logits}, [nl, n, labels](NodeT<T>& o) {
    auto& g = nl->ensure_grad();
    const T s = o.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      g[i] += s * (stable_sigmoid(nl->value[i]) - (labels[i] ? T{1} : T{0}));
    }
  });
}

#define MOCOCXR_INSTANTIATE_OPS(T)                                                                            \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                  \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                    \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                              \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                               \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> row_dot(const BasicTensor<T>&, const BasicTensor<T>&);                              \
  template BasicTensor<T> concat_cols(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> l2_normalize_rows(const BasicTensor<T>&, T);                                        \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,         \
                                 Conv2dOptions);                                                              \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,     \
                                     std::size_t, T);                                                         \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                             \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, const std::vector<std::size_t>&);              \
  template BasicTensor<T> bce_with_logits(const BasicTensor<T>&, const std::vector<std::uint8_t>&);

MOCOCXR_INSTANTIATE_OPS(float)
MOCOCXR_INSTANTIATE_OPS(double)

#undef MOCOCXR_INSTANTIATE_OPS

}  // namespace mococxr::diffcore
