#include "limoseg/autodiff.hpp"

#include "limoseg/error.hpp"
#include "limoseg/random.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace limoseg::ad {

namespace {

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool g_no_grad = false;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

std::string shape_str(const Shape& shape) {
    std::ostringstream s;
    s << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) s << (i ? "," : "") << shape[i];
    s << ']';
    return s.str();
}

bool grad_disabled() { return g_no_grad; }
NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }

// ---- BasicTensor --------------------------------------------------------------

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value, bool requires_grad) {
    return from(shape, Buffer<T>(ad::numel(shape), value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(const Shape& shape, std::span<const T> data, bool requires_grad) {
    return from(shape, Buffer<T>(data.begin(), data.end()), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(const Shape& shape, Buffer<T> data, bool requires_grad) {
    require(data.size() == ad::numel(shape),
            "tensor data has " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    auto node = std::make_shared<Node<T>>();
    node->shape = shape;
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->sequence = g_sequence.fetch_add(1);
    return BasicTensor(std::move(node));
}

template <typename T>
T BasicTensor<T>::item() const {
    require(numel() == 1, "item() on a tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <typename T>
void BasicTensor<T>::backward() const {
    Buffer<T> ones(numel(), T(1));
    backward(ones);
}

template <typename T>
void BasicTensor<T>::backward(std::span<const T> seed) const {
    require(seed.size() == numel(), "backward seed size mismatch");
    if (!node_->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{node_.get()};
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](const Node<T>* a, const Node<T>* b) { return a->sequence > b->sequence; });

    node_->ensure_grad();
    for (std::size_t i = 0; i < seed.size(); ++i) node_->grad[i] += seed[i];
    for (Node<T>* n : order) {
        if (!n->backward_fn) continue;
        if (!n->grad.empty()) {
            for (const auto& p : n->parents)
                if (p->requires_grad) p->ensure_grad();
            n->backward_fn(*n);
        }
        // Intermediate gradients are not retained.
        Buffer<T>().swap(n->grad);
    }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from(shape(), node_->data, false);
}

template <typename T>
BasicTensor<T> make_result(Shape shape, Buffer<T> data, std::vector<BasicTensor<T>> parents,
                           std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->sequence = g_sequence.fetch_add(1);
    const bool track = !g_no_grad && std::any_of(parents.begin(), parents.end(), [](const BasicTensor<T>& p) {
        return p.requires_grad();
    });
    if (track) {
        node->requires_grad = true;
        for (auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return BasicTensor<T>(std::move(node));
}

// ---- conv2d -------------------------------------------------------------------------

namespace {

template <typename T>
void im2col(const T* x, int channels, int h, int w, int k, int pad, T* cols) {
    const int hw = h * w;
    for (int c = 0; c < channels; ++c) {
        const T* plane = x + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* row = cols + (static_cast<std::size_t>((c * k + ky) * k + kx)) * hw;
                const int dy = ky - pad, dx = kx - pad;
                // kernel offsets can exceed the width on tiny maps
                const int x_lo = std::min(w, std::max(0, -dx));
                const int x_hi = std::max(x_lo, std::min(w, w - dx));
                for (int y = 0; y < h; ++y) {
                    T* out = row + static_cast<std::size_t>(y) * w;
                    const int sy = y + dy;
                    if (sy < 0 || sy >= h) {
                        std::fill(out, out + w, T(0));
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(sy) * w + dx;
                    std::fill(out, out + x_lo, T(0));
                    std::copy(src + x_lo, src + x_hi, out + x_lo);
                    std::fill(out + x_hi, out + w, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, int channels, int h, int w, int k, int pad, T* x) {
    const int hw = h * w;
    for (int c = 0; c < channels; ++c) {
        T* plane = x + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* row = cols + (static_cast<std::size_t>((c * k + ky) * k + kx)) * hw;
                const int dy = ky - pad, dx = kx - pad;
                const int x_lo = std::min(w, std::max(0, -dx));
                const int x_hi = std::max(x_lo, std::min(w, w - dx));
                for (int y = 0; y < h; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    const T* in = row + static_cast<std::size_t>(y) * w;
                    T* dst = plane + static_cast<std::size_t>(sy) * w + dx;
                    for (int xx = x_lo; xx < x_hi; ++xx) dst[xx] += in[xx];
                }
            }
        }
    }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      int padding) {
    require(input.ndim() == 4 && weight.ndim() == 4, "conv2d expects 4-D input and weight");
    const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int cout = weight.dim(0), k = weight.dim(2);
    require(weight.dim(1) == cin, "conv2d channel mismatch: input " + shape_str(input.shape()) + ", weight " +
                                      shape_str(weight.shape()));
    require(weight.dim(3) == k && k % 2 == 1, "conv2d needs a square odd kernel");
    require(padding == (k - 1) / 2, "conv2d supports same-size padding only");
    require(bias.numel() == static_cast<std::size_t>(cout), "conv2d bias size mismatch");

    const int hw = h * w, kk = cin * k * k;
    const bool direct = (k == 1);
    Buffer<T> out(static_cast<std::size_t>(n) * cout * hw);
    Buffer<T> cols(direct ? 0 : static_cast<std::size_t>(kk) * hw);
    ConstMapMat<T> wmat(weight.data().data(), cout, kk);
    const auto b = bias.data();
    for (int s = 0; s < n; ++s) {
        const T* x = input.data().data() + static_cast<std::size_t>(s) * cin * hw;
        if (!direct) im2col(x, cin, h, w, k, padding, cols.data());
        ConstMapMat<T> cmat(direct ? x : cols.data(), kk, hw);
        MapMat<T> omat(out.data() + static_cast<std::size_t>(s) * cout * hw, cout, hw);
        omat.noalias() = wmat * cmat;
        for (int c = 0; c < cout; ++c) omat.row(c).array() += b[c];
    }

    return make_result<T>({n, cout, h, w}, std::move(out), {input, weight, bias},
                          [n, cin, h, w, cout, k, padding, hw, kk, direct](Node<T>& self) {
                              auto& in = *self.parents[0];
                              auto& wt = *self.parents[1];
                              auto& bs = *self.parents[2];
                              ConstMapMat<T> wmat(wt.data.data(), cout, kk);
                              Buffer<T> cols(static_cast<std::size_t>(kk) * hw);
                              for (int s = 0; s < n; ++s) {
                                  ConstMapMat<T> gout(self.grad.data() + static_cast<std::size_t>(s) * cout * hw, cout,
                                                      hw);
                                  const T* x = in.data.data() + static_cast<std::size_t>(s) * cin * hw;
                                  if (bs.requires_grad) {
                                      for (int c = 0; c < cout; ++c) bs.grad[c] += gout.row(c).sum();
                                  }
                                  if (wt.requires_grad) {
                                      if (!direct) im2col(x, cin, h, w, k, padding, cols.data());
                                      ConstMapMat<T> cmat(direct ? x : cols.data(), kk, hw);
                                      MapMat<T> gw(wt.grad.data(), cout, kk);
                                      gw.noalias() += gout * cmat.transpose();
                                  }
                                  if (in.requires_grad) {
                                      T* gx = in.grad.data() + static_cast<std::size_t>(s) * cin * hw;
                                      if (direct) {
                                          MapMat<T> gxm(gx, kk, hw);
                                          gxm.noalias() += wmat.transpose() * gout;
                                      } else {
                                          MapMat<T> gcols(cols.data(), kk, hw);
                                          gcols.noalias() = wmat.transpose() * gout;
                                          col2im(cols.data(), cin, h, w, k, padding, gx);
                                      }
                                  }
                              }
                          });
}

// ---- conv_transpose2d ------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias) {
    require(input.ndim() == 4 && weight.ndim() == 4, "conv_transpose2d expects 4-D input and weight");
    const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    require(weight.dim(0) == cin, "conv_transpose2d channel mismatch: input " + shape_str(input.shape()) +
                                      ", weight " + shape_str(weight.shape()));
    require(weight.dim(2) == 2 && weight.dim(3) == 2, "conv_transpose2d supports 2x2 kernels only");
    const int cout = weight.dim(1);
    require(bias.numel() == static_cast<std::size_t>(cout), "conv_transpose2d bias size mismatch");

    const int hw = h * w, oh = 2 * h, ow = 2 * w, ohw = oh * ow, m_rows = cout * 4;
    Buffer<T> out(static_cast<std::size_t>(n) * cout * ohw);
    ConstMapMat<T> wmat(weight.data().data(), cin, m_rows);
    RowMat<T> m(m_rows, hw);
    const auto b = bias.data();
    for (int s = 0; s < n; ++s) {
        ConstMapMat<T> xm(input.data().data() + static_cast<std::size_t>(s) * cin * hw, cin, hw);
        m.noalias() = wmat.transpose() * xm;
        T* o = out.data() + static_cast<std::size_t>(s) * cout * ohw;
        for (int co = 0; co < cout; ++co) {
            for (int a = 0; a < 2; ++a) {
                for (int bb = 0; bb < 2; ++bb) {
                    const T* row = m.data() + static_cast<std::size_t>(co * 4 + a * 2 + bb) * hw;
                    T* plane = o + static_cast<std::size_t>(co) * ohw;
                    for (int i = 0; i < h; ++i)
                        for (int j = 0; j < w; ++j)
                            plane[(2 * i + a) * ow + 2 * j + bb] = row[i * w + j] + b[co];
                }
            }
        }
    }

    return make_result<T>({n, cout, oh, ow}, std::move(out), {input, weight, bias},
                          [n, cin, h, w, cout, hw, ow, ohw, m_rows](Node<T>& self) {
                              auto& in = *self.parents[0];
                              auto& wt = *self.parents[1];
                              auto& bs = *self.parents[2];
                              RowMat<T> gm(m_rows, hw);
                              ConstMapMat<T> wmat(wt.data.data(), cin, m_rows);
                              for (int s = 0; s < n; ++s) {
                                  const T* g = self.grad.data() + static_cast<std::size_t>(s) * cout * ohw;
                                  for (int co = 0; co < cout; ++co) {
                                      const T* plane = g + static_cast<std::size_t>(co) * ohw;
                                      if (bs.requires_grad) {
                                          T acc = 0;
                                          for (int q = 0; q < ohw; ++q) acc += plane[q];
                                          bs.grad[co] += acc;
                                      }
                                      for (int a = 0; a < 2; ++a)
                                          for (int bb = 0; bb < 2; ++bb) {
                                              T* row = gm.data() + static_cast<std::size_t>(co * 4 + a * 2 + bb) * hw;
                                              for (int i = 0; i < h; ++i)
                                                  for (int j = 0; j < w; ++j)
                                                      row[i * w + j] = plane[(2 * i + a) * ow + 2 * j + bb];
                                          }
                                  }
                                  ConstMapMat<T> xm(in.data.data() + static_cast<std::size_t>(s) * cin * hw, cin, hw);
                                  if (wt.requires_grad) {
                                      MapMat<T> gw(wt.grad.data(), cin, m_rows);
                                      gw.noalias() += xm * gm.transpose();
                                  }
                                  if (in.requires_grad) {
                                      MapMat<T> gx(in.grad.data() + static_cast<std::size_t>(s) * cin * hw, cin, hw);
                                      gx.noalias() += wmat * gm;
                                  }
                              }
                          });
}

// ---- maxpool2 --------------------------------------------------------------------------

template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input) {
    require(input.ndim() == 4, "maxpool2 expects a 4-D input");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    require(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims, got " + shape_str(input.shape()));
    const int oh = h / 2, ow = w / 2;
    const std::size_t planes = static_cast<std::size_t>(n) * c;
    Buffer<T> out(planes * oh * ow);
    std::vector<std::uint32_t> arg(out.size());
    const T* x = input.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = x + p * h * w;
        for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
                const std::uint32_t cand[4] = {static_cast<std::uint32_t>((2 * i) * w + 2 * j),
                                               static_cast<std::uint32_t>((2 * i) * w + 2 * j + 1),
                                               static_cast<std::uint32_t>((2 * i + 1) * w + 2 * j),
                                               static_cast<std::uint32_t>((2 * i + 1) * w + 2 * j + 1)};
                std::uint32_t best = cand[0];
                // NaN wins so corrupt inputs surface in the loss
                for (int q = 1; q < 4; ++q)
                    if (!(src[best] != src[best]) && (src[cand[q]] > src[best] || src[cand[q]] != src[cand[q]]))
                        best = cand[q];
                const std::size_t o = p * oh * ow + static_cast<std::size_t>(i) * ow + j;
                out[o] = src[best];
                arg[o] = best;
            }
        }
    }
    const std::size_t in_plane = static_cast<std::size_t>(h) * w, out_plane = static_cast<std::size_t>(oh) * ow;
    return make_result<T>({n, c, oh, ow}, std::move(out), {input},
                          [arg = std::move(arg), planes, in_plane, out_plane](Node<T>& self) {
                              auto& in = *self.parents[0];
                              for (std::size_t p = 0; p < planes; ++p)
                                  for (std::size_t o = 0; o < out_plane; ++o)
                                      in.grad[p * in_plane + arg[p * out_plane + o]] += self.grad[p * out_plane + o];
                          });
}

// ---- elementwise and channel ops --------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
    Buffer<T> out(input.numel());
    const auto x = input.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x[i] > T(0) || x[i] != x[i]) ? x[i] : T(0);
    return make_result<T>(input.shape(), std::move(out), {input}, [](Node<T>& self) {
        auto& in = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (in.data[i] > T(0)) in.grad[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require(a.shape() == b.shape(), "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer<T> out(a.numel());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // Both parents may be the same node; accumulate in separate passes.
        if (pa.requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
        if (pb.requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
    });
}

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& inputs) {
    require(!inputs.empty(), "concat_channels needs at least one input");
    const auto& ref = inputs.front();
    require(ref.ndim() == 4, "concat_channels expects 4-D inputs");
    const int n = ref.dim(0), h = ref.dim(2), w = ref.dim(3);
    std::vector<int> channels;
    int total = 0;
    for (const auto& t : inputs) {
        require(t.ndim() == 4 && t.dim(0) == n && t.dim(2) == h && t.dim(3) == w,
                "concat_channels shape mismatch: " + shape_str(ref.shape()) + " vs " + shape_str(t.shape()));
        channels.push_back(t.dim(1));
        total += t.dim(1);
    }
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Buffer<T> out(static_cast<std::size_t>(n) * total * hw);
    for (int s = 0; s < n; ++s) {
        std::size_t offset = static_cast<std::size_t>(s) * total * hw;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            const std::size_t len = channels[k] * hw;
            const T* src = inputs[k].data().data() + static_cast<std::size_t>(s) * len;
            std::copy(src, src + len, out.begin() + static_cast<std::ptrdiff_t>(offset));
            offset += len;
        }
    }
    return make_result<T>({n, total, h, w}, std::move(out), inputs, [n, total, hw, channels](Node<T>& self) {
        for (int s = 0; s < n; ++s) {
            std::size_t offset = static_cast<std::size_t>(s) * total * hw;
            for (std::size_t k = 0; k < channels.size(); ++k) {
                const std::size_t len = channels[k] * hw;
                auto& p = *self.parents[k];
                if (p.requires_grad) {
                    T* dst = p.grad.data() + static_cast<std::size_t>(s) * len;
                    const T* src = self.grad.data() + offset;
                    for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                }
                offset += len;
            }
        }
    });
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, int start, int count) {
    require(input.ndim() == 4, "slice_channels expects a 4-D input");
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    require(start >= 0 && count >= 0 && start + count <= c, "slice_channels range outside " + shape_str(input.shape()));
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    Buffer<T> out(static_cast<std::size_t>(n) * count * hw);
    for (int s = 0; s < n; ++s) {
        const T* src = input.data().data() + (static_cast<std::size_t>(s) * c + start) * hw;
        std::copy(src, src + count * hw, out.begin() + static_cast<std::ptrdiff_t>(s * count * hw));
    }
    return make_result<T>({n, count, h, w}, std::move(out), {input}, [n, c, start, count, hw](Node<T>& self) {
        auto& in = *self.parents[0];
        for (int s = 0; s < n; ++s) {
            T* dst = in.grad.data() + (static_cast<std::size_t>(s) * c + start) * hw;
            const T* src = self.grad.data() + static_cast<std::size_t>(s) * count * hw;
            for (std::size_t i = 0; i < count * hw; ++i) dst[i] += src[i];
        }
    });
}

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits) {
    require(logits.ndim() == 4, "softmax_channels expects a 4-D input");
    const int n = logits.dim(0), c = logits.dim(1);
    const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
    Buffer<T> out(logits.numel());
    const auto x = logits.data();
    for (int s = 0; s < n; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * c * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            T mx = x[base + p];
            for (int k = 1; k < c; ++k) mx = std::max(mx, x[base + k * hw + p]);
            T sum = 0;
            for (int k = 0; k < c; ++k) {
                const T e = std::exp(x[base + k * hw + p] - mx);
                out[base + k * hw + p] = e;
                sum += e;
            }
            for (int k = 0; k < c; ++k) out[base + k * hw + p] /= sum;
        }
    }
    return make_result<T>(logits.shape(), std::move(out), {logits}, [n, c, hw](Node<T>& self) {
        auto& in = *self.parents[0];
        const auto& y = self.data;
        for (int s = 0; s < n; ++s) {
            const std::size_t base = static_cast<std::size_t>(s) * c * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                T dot = 0;
                for (int k = 0; k < c; ++k) dot += self.grad[base + k * hw + p] * y[base + k * hw + p];
                for (int k = 0; k < c; ++k) {
                    const std::size_t i = base + k * hw + p;
                    in.grad[i] += y[i] * (self.grad[i] - dot);
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> weighted_ce(const BasicTensor<T>& logits, std::span<const std::uint8_t> target,
                           std::span<const double> class_weights, std::span<const std::uint8_t> valid) {
    require(logits.ndim() == 4, "weighted_ce expects 4-D logits");
    const int n = logits.dim(0), c = logits.dim(1);
    const std::size_t hw = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
    const std::size_t pixels = static_cast<std::size_t>(n) * hw;
    require(target.size() == pixels && valid.size() == pixels, "weighted_ce mask size mismatch");
    require(class_weights.size() == static_cast<std::size_t>(c), "weighted_ce needs one weight per class");
    for (double wgt : class_weights) {
        if (!(wgt > 0.0)) throw InvalidConfigError("class weights must be positive");
    }

    const std::size_t count = static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(),
                                                                     [](std::uint8_t v) { return v != 0; }));
    if (count == 0) throw UndefinedLossError("weighted cross-entropy has no valid pixels");

    const auto x = logits.data();
    Buffer<T> probs(logits.numel());
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * c * hw;
        for (std::size_t p = 0; p < hw; ++p) {
            T mx = x[base + p];
            for (int k = 1; k < c; ++k) mx = std::max(mx, x[base + k * hw + p]);
            T sum = 0;
            for (int k = 0; k < c; ++k) sum += std::exp(x[base + k * hw + p] - mx);
            const T log_sum = std::log(sum);
            for (int k = 0; k < c; ++k) probs[base + k * hw + p] = std::exp(x[base + k * hw + p] - mx - log_sum);
            const std::size_t pix = static_cast<std::size_t>(s) * hw + p;
            if (!valid[pix]) continue;
            const int y = target[pix];
            require(y < c, "weighted_ce target class out of range");
            const double log_p = static_cast<double>(x[base + y * hw + p] - mx - log_sum);
            total -= class_weights[y] * log_p;
        }
    }
    const T loss = static_cast<T>(total / static_cast<double>(count));
    std::vector<std::uint8_t> tgt(target.begin(), target.end()), msk(valid.begin(), valid.end());
    std::vector<double> wts(class_weights.begin(), class_weights.end());
    return make_result<T>({1}, {loss}, {logits},
                          [n, c, hw, count, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk),
                           wts = std::move(wts)](Node<T>& self) {
                              auto& in = *self.parents[0];
                              const T scale = self.grad[0] / static_cast<T>(count);
                              for (int s = 0; s < n; ++s) {
                                  const std::size_t base = static_cast<std::size_t>(s) * c * hw;
                                  for (std::size_t p = 0; p < hw; ++p) {
                                      const std::size_t pix = static_cast<std::size_t>(s) * hw + p;
                                      if (!msk[pix]) continue;
                                      const int y = tgt[pix];
                                      const T g = scale * static_cast<T>(wts[y]);
                                      for (int k = 0; k < c; ++k) {
                                          const std::size_t i = base + k * hw + p;
                                          in.grad[i] += g * (probs[i] - (k == y ? T(1) : T(0)));
                                      }
                                  }
                              }
                          });
}

// ---- Adam --------------------------------------------------------------------------------

void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& config) {
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), 0.f);
            state.v[i].assign(params[i].numel(), 0.f);
        }
        state.step = 0;
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    const float b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
    const float step_size = static_cast<float>(config.lr / bc1);
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
    const float eps = static_cast<float>(config.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const auto g = p.grad();
        if (g.empty()) {
            // Zero gradient still decays the moments.
            for (std::size_t k = 0; k < p.numel(); ++k) {
                state.m[i][k] *= b1;
                state.v[i][k] *= b2;
            }
        } else {
            for (std::size_t k = 0; k < p.numel(); ++k) {
                state.m[i][k] = b1 * state.m[i][k] + (1.f - b1) * g[k];
                state.v[i][k] = b2 * state.v[i][k] + (1.f - b2) * g[k] * g[k];
            }
        }
        auto data = p.data();
        for (std::size_t k = 0; k < p.numel(); ++k) {
            const float denom = std::sqrt(state.v[i][k]) * inv_sqrt_bc2 + eps;
            data[k] -= step_size * state.m[i][k] / denom;
        }
    }
}

// ---- gradcheck ---------------------------------------------------------------------------

GradcheckReport gradcheck(const GradFn& f, const std::vector<DoubleTensor>& inputs, double tolerance,
                          std::uint64_t seed, double step) {
    Rng rng(seed);
    std::vector<DoubleTensor> work;
    for (const auto& t : inputs) work.push_back(DoubleTensor::from(t.shape(), t.storage(), t.requires_grad()));

    DoubleTensor out = f(work);
    std::vector<double> proj(out.numel());
    for (auto& v : proj) v = rng.normal();
    out.backward(proj);

    auto objective = [&](const std::vector<DoubleTensor>& in) {
        NoGradGuard guard;
        const DoubleTensor y = f(in);
        double acc = 0.0;
        for (std::size_t i = 0; i < proj.size(); ++i) acc += y.data()[i] * proj[i];
        return acc;
    };

    GradcheckReport report;
    for (std::size_t t = 0; t < work.size(); ++t) {
        if (!work[t].requires_grad()) continue;
        const std::vector<double> analytic(work[t].grad().begin(), work[t].grad().end());
        for (std::size_t i = 0; i < work[t].numel(); ++i) {
            std::vector<DoubleTensor> probe;
            for (const auto& w : work) probe.push_back(DoubleTensor::from(w.shape(), w.storage(), false));
            const double orig = probe[t].data()[i];
            probe[t].data()[i] = orig + step;
            const double plus = objective(probe);
            probe[t].data()[i] = orig - step;
            const double minus = objective(probe);
            const double numeric = (plus - minus) / (2.0 * step);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
            ++report.checked;
            if (report.checked == 1 || rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_input = t;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = std::isfinite(report.max_rel_error) && report.max_rel_error < tolerance;
    return report;
}

// ---- instantiations ------------------------------------------------------------------------

#define LIMOSEG_INSTANTIATE(T)                                                                                   \
    template class BasicTensor<T>;                                                                               \
    template BasicTensor<T> make_result<T>(Shape, Buffer<T>, std::vector<BasicTensor<T>>,                   \
                                           std::function<void(Node<T>&)>);                                       \
    template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, int); \
    template BasicTensor<T> conv_transpose2d<T>(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                                const BasicTensor<T>&);                                          \
    template BasicTensor<T> maxpool2<T>(const BasicTensor<T>&);                                                  \
    template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> concat_channels<T>(const std::vector<BasicTensor<T>>&);                              \
    template BasicTensor<T> slice_channels<T>(const BasicTensor<T>&, int, int);                                  \
    template BasicTensor<T> softmax_channels<T>(const BasicTensor<T>&);                                          \
    template BasicTensor<T> weighted_ce<T>(const BasicTensor<T>&, std::span<const std::uint8_t>,                 \
                                           std::span<const double>, std::span<const std::uint8_t>);

LIMOSEG_INSTANTIATE(float)
LIMOSEG_INSTANTIATE(double)

#undef LIMOSEG_INSTANTIATE

}  // namespace limoseg::ad
