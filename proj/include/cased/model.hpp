/*
 * model.hpp
 *
 * A small fully convolutional voxel classifier with hand-written forward and
 * backward passes, voxel-wise binary cross-entropy, and SGD with Nesterov
 * momentum. All convolutions are valid (unpadded), so an input of
 * output_size + context_margin voxels per axis yields output_size voxels.
 *
 * Two architectures are provided:
 *   flat  - L x (3^3 conv + ReLU), 1^3 conv, sigmoid. Margin 2L.
 *   unet1 - one resolution level of a U-Net: 2 convs, 2x max pool, 2 convs,
 *           2x strided transposed conv, concatenation with the cropped skip
 *           features, 2 convs, 1^3 conv, sigmoid. Margin 16.
 */
#pragma once

#include <filesystem>
#include <memory>
#include <span>

#include <json.hpp>

#include "cased/io.hpp"
#include "cased/patching.hpp"

namespace cased {

/// Channel-major 3D tensor: [c][z][y][x].
template <typename Real>
struct Tensor {
  int64_t c = 0;
  Dims d;
  std::vector<Real> v;

  Tensor() = default;
  Tensor(int64_t channels, Dims dims, Real fill = Real(0)) : c(channels), d(dims), v(size_t(channels) * dims.size(), fill) {}

  size_t plane() const { return d.size(); }
  Real* ch(int64_t i) { return v.data() + size_t(i) * plane(); }
  const Real* ch(int64_t i) const { return v.data() + size_t(i) * plane(); }
  Real& at(int64_t ci, int64_t x, int64_t y, int64_t z) { return v[size_t(ci) * plane() + d.linear(x, y, z)]; }
  Real at(int64_t ci, int64_t x, int64_t y, int64_t z) const { return v[size_t(ci) * plane() + d.linear(x, y, z)]; }

  static Tensor from(const Array3<Real>& a) {
    Tensor t(1, a.dims());
    t.v = a.data();
    return t;
  }
  Array3<Real> channel(int64_t ci) const {
    return Array3<Real>(d, std::vector<Real>(ch(ci), ch(ci) + plane()));
  }
};

// ---------------------------------------------------------------------------
// Layer kernels. Parameter layout of a conv: weights [cout][cin][k][k][k]
// followed by bias [cout]; transposed conv: weights [cout][cin][2][2][2]
// followed by bias [cout].

namespace layers {

inline Dims valid_conv_dims(Dims in, int64_t k) {
  Dims o{in.nx - k + 1, in.ny - k + 1, in.nz - k + 1};
  require(o.valid(), "convolution input smaller than the kernel");
  return o;
}

/// Length of the row-pitched span that holds every output voxel of a valid
/// convolution when indexed with the input's row and plane pitch.
inline size_t pitched_span(Dims in, Dims out) {
  return size_t((out.nz - 1) * in.nx * in.ny + (out.ny - 1) * in.nx + out.nx);
}

namespace detail {

template <typename Real>
inline constexpr int kLanes = int(64 / sizeof(Real));

// One 64-byte SIMD register worth of Real.
template <typename Real>
struct VecOf {
  typedef Real type __attribute__((vector_size(64)));
};
template <typename Real>
using Vec = typename VecOf<Real>::type;

template <typename Real>
inline Vec<Real> load(const Real* p) {
  Vec<Real> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename Real>
inline void store(Real* p, const Vec<Real>& v) {
  std::memcpy(p, &v, sizeof(v));
}

/// Computes `CB` output channels over the pitched span [0, span) of one
/// valid convolution. `wpack` holds the weights as [ci][tap][CB]; `outs[c]`
/// receives the pitched output of channel c.
template <int CB, typename Real>
void conv_block(const Real* in, size_t plane, int64_t cin, const std::vector<int64_t>& offs, const Real* wpack,
                const Real* bias, Real* const* outs, size_t span) {
  constexpr int L = kLanes<Real>;
  const auto taps = offs.size();
  size_t j = 0;
  for (; j + L <= span; j += L) {
    Vec<Real> acc[CB];
    for (int c = 0; c < CB; ++c) acc[c] = Vec<Real>{} + bias[c];
    const Real* wp = wpack;
    for (int64_t ci = 0; ci < cin; ++ci) {
      const Real* src = in + size_t(ci) * plane + j;
      for (size_t t = 0; t < taps; ++t, wp += CB) {
        const Vec<Real> s = load<Real>(src + offs[t]);
#pragma GCC unroll 8
        for (int c = 0; c < CB; ++c) acc[c] += wp[c] * s;
      }
    }
    for (int c = 0; c < CB; ++c) store<Real>(outs[c] + j, acc[c]);
  }
  for (; j < span; ++j) {
    const Real* wp = wpack;
    Real acc[CB];
    for (int c = 0; c < CB; ++c) acc[c] = bias[c];
    for (int64_t ci = 0; ci < cin; ++ci) {
      const Real* src = in + size_t(ci) * plane + j;
      for (size_t t = 0; t < taps; ++t, wp += CB)
        for (int c = 0; c < CB; ++c) acc[c] += wp[c] * src[offs[t]];
    }
    for (int c = 0; c < CB; ++c) outs[c][j] = acc[c];
  }
}

/// dW[t] += sum_j g[j] * in[j + offs[t]] for one (output, input) channel
/// pair, all T taps at once.
template <int T, typename Real>
void conv_weight_grad_taps(const Real* in, const int64_t* offs, const Real* g, Real* dw, size_t span) {
  constexpr int L = kLanes<Real>;
  const size_t vec_end = span - span % L;
  Vec<Real> acc[T];
  for (int t = 0; t < T; ++t) acc[t] = Vec<Real>{};
  for (size_t j = 0; j < vec_end; j += L) {
    const Vec<Real> gv = load<Real>(g + j);
#pragma GCC unroll 27
    for (int t = 0; t < T; ++t) acc[t] += load<Real>(in + offs[t] + j) * gv;
  }
  for (int t = 0; t < T; ++t) {
    Real sum = 0;
    for (int l = 0; l < L; ++l) sum += acc[t][l];
    for (size_t j = vec_end; j < span; ++j) sum += g[j] * in[offs[t] + int64_t(j)];
    dw[t] += sum;
  }
}

template <typename Real>
void conv_weight_grad(const Real* in, size_t plane, int64_t cin, const std::vector<int64_t>& offs, const Real* g,
                      Real* dw, size_t span) {
  const auto taps = offs.size();
  for (int64_t ci = 0; ci < cin; ++ci) {
    const Real* src = in + size_t(ci) * plane;
    Real* d = dw + size_t(ci) * taps;
    if (taps == 27) {
      conv_weight_grad_taps<27>(src, offs.data(), g, d, span);
    } else {
      for (size_t t = 0; t < taps; ++t) conv_weight_grad_taps<1>(src, offs.data() + t, g, d + t, span);
    }
  }
}

inline std::vector<int64_t> tap_offsets(Dims in, int64_t k) {
  std::vector<int64_t> offs;
  for (int64_t kz = 0; kz < k; ++kz)
    for (int64_t ky = 0; ky < k; ++ky)
      for (int64_t kx = 0; kx < k; ++kx) offs.push_back((kz * in.ny + ky) * in.nx + kx);
  return offs;
}

template <typename Real, typename Fn>
void for_channel_blocks(int64_t n, Fn&& fn) {
  int64_t c = 0;
  for (; c + 8 <= n; c += 8) fn(std::integral_constant<int, 8>{}, c);
  for (; c + 4 <= n; c += 4) fn(std::integral_constant<int, 4>{}, c);
  for (; c < n; ++c) fn(std::integral_constant<int, 1>{}, c);
}

}  // namespace detail

/// Valid 3D convolution (cross-correlation), weights [cout][cin][k][k][k].
template <typename Real>
void conv3d_forward(const Tensor<Real>& in, const Real* w, const Real* bias, int64_t cout, int64_t k,
                    Tensor<Real>& out) {
  const Dims o = valid_conv_dims(in.d, k);
  out = Tensor<Real>(cout, o);
  const int64_t cin = in.c;
  const size_t span = pitched_span(in.d, o);
  const auto offs = detail::tap_offsets(in.d, k);
  const auto taps = int64_t(offs.size());
  std::vector<Real> pitched(size_t(cout) * span);
  std::vector<Real> wpack;
  detail::for_channel_blocks<Real>(cout, [&](auto cb, int64_t co0) {
    constexpr int CB = decltype(cb)::value;
    wpack.resize(size_t(cin * taps * CB));
    for (int64_t ci = 0; ci < cin; ++ci)
      for (int64_t t = 0; t < taps; ++t)
        for (int c = 0; c < CB; ++c) wpack[size_t((ci * taps + t) * CB + c)] = w[((co0 + c) * cin + ci) * taps + t];
    Real* outs[CB];
    for (int c = 0; c < CB; ++c) outs[c] = pitched.data() + size_t(co0 + c) * span;
    detail::conv_block<CB>(in.v.data(), in.plane(), cin, offs, wpack.data(), bias + co0, outs, span);
  });
  const int64_t px = in.d.nx, pxy = in.d.nx * in.d.ny;
  for (int64_t co = 0; co < cout; ++co) {
    const Real* a = pitched.data() + size_t(co) * span;
    Real* dst = out.ch(co);
    for (int64_t z = 0; z < o.nz; ++z)
      for (int64_t y = 0; y < o.ny; ++y) {
        const Real* row = a + z * pxy + y * px;
        std::copy(row, row + o.nx, dst + (z * o.ny + y) * o.nx);
      }
  }
}

/// Accumulates into grad_w / grad_b; writes grad_in when non-null. The input
/// gradient is the valid convolution of the zero-padded output gradient with
/// the flipped, channel-transposed kernel.
template <typename Real>
void conv3d_backward(const Tensor<Real>& in, const Real* w, int64_t k, const Tensor<Real>& gout, Real* grad_w,
                     Real* grad_b, Tensor<Real>* grad_in) {
  const Dims o = gout.d;
  const int64_t cin = in.c, cout = gout.c;
  const size_t span = pitched_span(in.d, o);
  const int64_t px = in.d.nx, pxy = in.d.nx * in.d.ny;
  const auto offs = detail::tap_offsets(in.d, k);
  const auto taps = int64_t(offs.size());

  // output gradient in the input's pitch, zero outside the valid region
  std::vector<Real> gp(size_t(cout) * span, Real(0));
  for (int64_t co = 0; co < cout; ++co) {
    const Real* g = gout.ch(co);
    Real* dst = gp.data() + size_t(co) * span;
    Real gsum = 0;
    for (int64_t z = 0; z < o.nz; ++z)
      for (int64_t y = 0; y < o.ny; ++y) {
        const Real* row = g + (z * o.ny + y) * o.nx;
        std::copy(row, row + o.nx, dst + z * pxy + y * px);
        for (int64_t x = 0; x < o.nx; ++x) gsum += row[x];
      }
    grad_b[co] += gsum;
  }
  for (int64_t co = 0; co < cout; ++co) {
    detail::conv_weight_grad(in.v.data(), in.plane(), cin, offs, gp.data() + size_t(co) * span,
                             grad_w + size_t(co * cin * taps), span);
  }

  if (!grad_in) return;
  const Dims pd{o.nx + 2 * (k - 1), o.ny + 2 * (k - 1), o.nz + 2 * (k - 1)};
  Tensor<Real> padded(cout, pd);
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t z = 0; z < o.nz; ++z)
      for (int64_t y = 0; y < o.ny; ++y) {
        const Real* row = gout.ch(co) + (z * o.ny + y) * o.nx;
        std::copy(row, row + o.nx, &padded.at(co, k - 1, y + k - 1, z + k - 1));
      }
  std::vector<Real> wt(size_t(cin * cout * taps));
  for (int64_t co = 0; co < cout; ++co)
    for (int64_t ci = 0; ci < cin; ++ci)
      for (int64_t t = 0; t < taps; ++t) wt[size_t((ci * cout + co) * taps + (taps - 1 - t))] = w[(co * cin + ci) * taps + t];
  const std::vector<Real> zero(size_t(cin), Real(0));
  conv3d_forward(padded, wt.data(), zero.data(), cin, k, *grad_in);
}

template <typename Real>
void relu_forward(const Tensor<Real>& in, Tensor<Real>& out) {
  out = in;
  for (auto& x : out.v) x = x > Real(0) ? x : Real(0);
}

template <typename Real>
void relu_backward(const Tensor<Real>& out, const Tensor<Real>& gout, Tensor<Real>& gin) {
  gin = gout;
  for (size_t i = 0; i < gin.v.size(); ++i)
    if (!(out.v[i] > Real(0))) gin.v[i] = 0;
}

template <typename Real>
void sigmoid_forward(const Tensor<Real>& in, Tensor<Real>& out) {
  out = in;
  for (auto& x : out.v) x = Real(1) / (Real(1) + std::exp(-x));
}

template <typename Real>
void sigmoid_backward(const Tensor<Real>& out, const Tensor<Real>& gout, Tensor<Real>& gin) {
  gin = gout;
  for (size_t i = 0; i < gin.v.size(); ++i) gin.v[i] *= out.v[i] * (Real(1) - out.v[i]);
}

/// 2x2x2 max pooling, stride 2. `argmax` receives the winning input offset per output voxel.
template <typename Real>
void maxpool2_forward(const Tensor<Real>& in, Tensor<Real>& out, std::vector<int32_t>& argmax) {
  require(in.d.nx % 2 == 0 && in.d.ny % 2 == 0 && in.d.nz % 2 == 0, "max pooling needs even input dims");
  const Dims o{in.d.nx / 2, in.d.ny / 2, in.d.nz / 2};
  out = Tensor<Real>(in.c, o);
  argmax.assign(out.v.size(), 0);
  size_t oi = 0;
  for (int64_t c = 0; c < in.c; ++c)
    for (int64_t z = 0; z < o.nz; ++z)
      for (int64_t y = 0; y < o.ny; ++y)
        for (int64_t x = 0; x < o.nx; ++x, ++oi) {
          Real best = -std::numeric_limits<Real>::infinity();
          int32_t arg = 0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const auto idx = int32_t(in.d.linear(2 * x + dx, 2 * y + dy, 2 * z + dz));
                const Real v = in.ch(c)[idx];
                if (v > best) {
                  best = v;
                  arg = idx;
                }
              }
          out.v[oi] = best;
          argmax[oi] = arg;
        }
}

template <typename Real>
void maxpool2_backward(const Tensor<Real>& in, const std::vector<int32_t>& argmax, const Tensor<Real>& gout,
                       Tensor<Real>& gin) {
  gin = Tensor<Real>(in.c, in.d);
  const size_t per = gout.plane();
  for (size_t i = 0; i < gout.v.size(); ++i) gin.ch(int64_t(i / per))[argmax[i]] += gout.v[i];
}

/// Transposed convolution, kernel 2, stride 2: doubles each spatial dim.
template <typename Real>
void upconv2_forward(const Tensor<Real>& in, const Real* w, const Real* bias, int64_t cout, Tensor<Real>& out) {
  const Dims o{in.d.nx * 2, in.d.ny * 2, in.d.nz * 2};
  out = Tensor<Real>(cout, o);
  for (int64_t co = 0; co < cout; ++co) {
    Real* dst = out.ch(co);
    std::fill(dst, dst + out.plane(), bias[co]);
    for (int64_t ci = 0; ci < in.c; ++ci) {
      const Real* src = in.ch(ci);
      const Real* wk = w + (co * in.c + ci) * 8;
      for (int64_t z = 0; z < in.d.nz; ++z)
        for (int64_t y = 0; y < in.d.ny; ++y)
          for (int64_t x = 0; x < in.d.nx; ++x) {
            const Real s = src[in.d.linear(x, y, z)];
            for (int a = 0; a < 8; ++a) {
              const int dx = a & 1, dy = (a >> 1) & 1, dz = a >> 2;
              dst[o.linear(2 * x + dx, 2 * y + dy, 2 * z + dz)] += wk[dz * 4 + dy * 2 + dx] * s;
            }
          }
    }
  }
}

template <typename Real>
void upconv2_backward(const Tensor<Real>& in, const Real* w, const Tensor<Real>& gout, Real* grad_w, Real* grad_b,
                      Tensor<Real>* grad_in) {
  const Dims o = gout.d;
  if (grad_in) *grad_in = Tensor<Real>(in.c, in.d);
  for (int64_t co = 0; co < gout.c; ++co) {
    const Real* g = gout.ch(co);
    Real gsum = 0;
    for (size_t i = 0; i < gout.plane(); ++i) gsum += g[i];
    grad_b[co] += gsum;
    for (int64_t ci = 0; ci < in.c; ++ci) {
      const Real* src = in.ch(ci);
      const size_t wbase = size_t((co * in.c + ci) * 8);
      for (int64_t z = 0; z < in.d.nz; ++z)
        for (int64_t y = 0; y < in.d.ny; ++y)
          for (int64_t x = 0; x < in.d.nx; ++x) {
            const size_t si = in.d.linear(x, y, z);
            Real gi = 0;
            for (int a = 0; a < 8; ++a) {
              const int dx = a & 1, dy = (a >> 1) & 1, dz = a >> 2;
              const size_t widx = wbase + size_t(dz * 4 + dy * 2 + dx);
              const Real gv = g[o.linear(2 * x + dx, 2 * y + dy, 2 * z + dz)];
              grad_w[widx] += gv * src[si];
              gi += w[widx] * gv;
            }
            if (grad_in) grad_in->ch(ci)[si] += gi;
          }
    }
  }
}

/// Channel concatenation [crop(skip), up]; `skip` is center-cropped to `up`'s dims.
template <typename Real>
void concat_crop_forward(const Tensor<Real>& skip, const Tensor<Real>& up, Tensor<Real>& out) {
  Index3 off;
  for (int a = 0; a < 3; ++a) {
    const int64_t diff = skip.d[a] - up.d[a];
    require(diff >= 0 && diff % 2 == 0, "skip connection cannot be center-cropped to the upsampled dims");
    off[a] = diff / 2;
  }
  out = Tensor<Real>(skip.c + up.c, up.d);
  for (int64_t c = 0; c < skip.c; ++c)
    for (int64_t z = 0; z < up.d.nz; ++z)
      for (int64_t y = 0; y < up.d.ny; ++y)
        for (int64_t x = 0; x < up.d.nx; ++x) out.at(c, x, y, z) = skip.at(c, x + off.x, y + off.y, z + off.z);
  std::copy(up.v.begin(), up.v.end(), out.v.begin() + ptrdiff_t(size_t(skip.c) * up.plane()));
}

template <typename Real>
void concat_crop_backward(const Tensor<Real>& skip, const Tensor<Real>& up, const Tensor<Real>& gout,
                          Tensor<Real>& gskip, Tensor<Real>& gup) {
  const Index3 off{(skip.d.nx - up.d.nx) / 2, (skip.d.ny - up.d.ny) / 2, (skip.d.nz - up.d.nz) / 2};
  gskip = Tensor<Real>(skip.c, skip.d);
  for (int64_t c = 0; c < skip.c; ++c)
    for (int64_t z = 0; z < up.d.nz; ++z)
      for (int64_t y = 0; y < up.d.ny; ++y)
        for (int64_t x = 0; x < up.d.nx; ++x) gskip.at(c, x + off.x, y + off.y, z + off.z) = gout.at(c, x, y, z);
  gup = Tensor<Real>(up.c, up.d);
  std::copy(gout.v.begin() + ptrdiff_t(size_t(skip.c) * up.plane()), gout.v.end(), gup.v.begin());
}

}  // namespace layers

// ---------------------------------------------------------------------------
// Loss

template <typename Real>
struct LossResult {
  double loss = 0;
  Tensor<Real> grad;  // d loss / d prediction
};

inline constexpr double kBceEpsilon = 1e-7;

/// Mean voxel-wise binary cross-entropy; predictions are clamped to [eps, 1 - eps].
template <typename Real, typename Label>
LossResult<Real> bce_loss(const Tensor<Real>& pred, const Array3<Label>& target) {
  require(pred.c == 1 && pred.d == target.dims(), "bce_loss: prediction and target shapes differ");
  LossResult<Real> r;
  r.grad = Tensor<Real>(1, pred.d);
  const double n = double(pred.v.size());
  double acc = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const double y = double(target[i]);
    require(y == 0.0 || y == 1.0, "bce_loss: targets must be binary");
    const double p = std::clamp(double(pred.v[i]), kBceEpsilon, 1.0 - kBceEpsilon);
    acc -= y * std::log(p) + (1 - y) * std::log(1 - p);
    r.grad.v[i] = static_cast<Real>((p - y) / (p * (1 - p)) / n);
  }
  r.loss = acc / n;
  return r;
}

// ---------------------------------------------------------------------------
// Network

enum class Arch { flat, unet1 };

struct FcnConfig {
  Arch arch = Arch::flat;
  /// Number of 3^3 conv layers of the flat architecture.
  int layers = 4;
  /// Feature channels (unet1 uses 2x this at the pooled level).
  int channels = 8;

  void validate() const {
    require(channels >= 1, "fcn: channels must be >= 1");
    require(arch != Arch::flat || layers >= 1, "fcn: flat architecture needs >= 1 layer");
  }
  friend bool operator==(const FcnConfig&, const FcnConfig&) = default;
};

struct LayerLayout {
  std::string name;
  std::string kind;  // conv3, conv1, upconv2
  int64_t cin = 0, cout = 0, k = 0;
  size_t offset = 0;  // of the weights; bias follows at offset + weight_count()

  size_t weight_count() const { return size_t(cout * cin * k * k * k); }
  size_t count() const { return weight_count() + size_t(cout); }
};

template <typename Real>
struct Weights {
  std::vector<Real> params;
  std::vector<Real> momentum;
  /// Bumped by every optimizer step; lets backward detect a stale cache.
  uint64_t version = 0;

  friend bool operator==(const Weights&, const Weights&) = default;
};

/// Gradient was NaN or infinite; the step was not applied.
class NonFiniteGradient : public std::runtime_error {
public:
  NonFiniteGradient() : std::runtime_error("non-finite gradient: optimizer step rejected") {}
};

template <typename Real>
struct Activations {
  std::vector<Tensor<Real>> slots;
  std::vector<std::vector<int32_t>> argmax;
  const Real* params = nullptr;
  uint64_t version = 0;

  const Tensor<Real>& output() const { return slots.back(); }
};

template <typename Real>
class Fcn {
public:
  enum class OpKind { conv, relu, maxpool, upconv, concat, sigmoid };
  struct Op {
    OpKind kind;
    int in = 0, in2 = -1, out = 0;
    int layer = -1;  // into layout_
    int pool = -1;   // into Activations::argmax
  };

  explicit Fcn(FcnConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const int ch = cfg_.channels;
    int slot = 0;
    auto conv = [&](int in, int64_t cin, int64_t cout, int64_t k, const std::string& name) {
      add_layer(name, k == 1 ? "conv1" : "conv3", cin, cout, k);
      ops_.push_back({OpKind::conv, in, -1, ++slot, int(layout_.size()) - 1});
      return slot;
    };
    auto unary = [&](OpKind kind, int in) {
      ops_.push_back({kind, in, -1, ++slot});
      return slot;
    };
    int x = 0;
    if (cfg_.arch == Arch::flat) {
      int64_t cin = 1;
      for (int l = 0; l < cfg_.layers; ++l) {
        x = unary(OpKind::relu, conv(x, cin, ch, 3, "conv" + std::to_string(l + 1)));
        cin = ch;
      }
      x = conv(x, cin, 1, 1, "head");
    } else {
      x = unary(OpKind::relu, conv(x, 1, ch, 3, "down1a"));
      const int skip = x = unary(OpKind::relu, conv(x, ch, ch, 3, "down1b"));
      ops_.push_back({OpKind::maxpool, x, -1, ++slot, -1, pools_++});
      x = slot;
      x = unary(OpKind::relu, conv(x, ch, 2 * ch, 3, "down2a"));
      x = unary(OpKind::relu, conv(x, 2 * ch, 2 * ch, 3, "down2b"));
      add_layer("up", "upconv2", 2 * ch, ch, 2);
      ops_.push_back({OpKind::upconv, x, -1, ++slot, int(layout_.size()) - 1});
      x = slot;
      ops_.push_back({OpKind::concat, skip, x, ++slot});
      x = slot;
      x = unary(OpKind::relu, conv(x, 2 * ch, ch, 3, "up1a"));
      x = unary(OpKind::relu, conv(x, ch, ch, 3, "up1b"));
      x = conv(x, ch, 1, 1, "head");
    }
    unary(OpKind::sigmoid, x);
    slots_ = slot + 1;
    margin_ = 64 - output_dims(Dims::cube(64)).nx;
  }

  const FcnConfig& config() const { return cfg_; }
  const std::vector<LayerLayout>& layout() const { return layout_; }
  const std::vector<Op>& ops() const { return ops_; }
  size_t parameter_count() const { return params_; }
  int64_t context_margin() const { return margin_; }

  /// Output dims for an input of `in` voxels; throws when `in` is not a valid input size.
  Dims output_dims(Dims in) const {
    std::vector<Dims> d(static_cast<size_t>(slots_));
    d[0] = in;
    for (const Op& op : ops_) {
      const Dims& a = d[size_t(op.in)];
      Dims o = a;
      switch (op.kind) {
        case OpKind::conv:
          o = layers::valid_conv_dims(a, layout_[size_t(op.layer)].k);
          break;
        case OpKind::maxpool:
          require(a.nx % 2 == 0 && a.ny % 2 == 0 && a.nz % 2 == 0, "fcn: pooled features need even dims");
          o = {a.nx / 2, a.ny / 2, a.nz / 2};
          break;
        case OpKind::upconv:
          o = {a.nx * 2, a.ny * 2, a.nz * 2};
          break;
        case OpKind::concat:
          o = d[size_t(op.in2)];
          for (int ax = 0; ax < 3; ++ax)
            require(a[ax] >= o[ax] && (a[ax] - o[ax]) % 2 == 0, "fcn: skip features cannot be cropped");
          break;
        default:
          break;
      }
      require(o.valid(), "fcn: input too small for the network");
      d[size_t(op.out)] = o;
    }
    return d.back();
  }

  /// Rejects geometries the network cannot realize.
  void check_geometry(const PatchGeometry& geom) const {
    geom.validate();
    if (geom.context_margin != margin_) {
      throw ValidationError("fcn: context margin " + std::to_string(geom.context_margin) +
                            " does not match the network margin " + std::to_string(margin_));
    }
    const Dims out = output_dims(Dims::cube(geom.input_size()));
    require(out == Dims::cube(geom.output_stride), "fcn: geometry does not map input to output_stride");
  }

  /// Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases, zero momentum.
  Weights<Real> init_weights(uint64_t seed) const {
    Weights<Real> w;
    w.params.assign(params_, Real(0));
    w.momentum.assign(params_, Real(0));
    Rng rng(seed);
    for (const auto& l : layout_) {
      const double k3 = double(l.k * l.k * l.k);
      const double bound = std::sqrt(6.0 / (double(l.cin) * k3 + double(l.cout) * k3));
      for (size_t i = 0; i < l.weight_count(); ++i) w.params[l.offset + i] = static_cast<Real>(rng.uniform(-bound, bound));
    }
    return w;
  }

  Activations<Real> forward(const Weights<Real>& w, const Tensor<Real>& input) const {
    require(w.params.size() == params_, "fcn: weight vector does not match the layout");
    require(input.c == 1, "fcn: input must have one channel");
    output_dims(input.d);
    Activations<Real> act;
    act.slots.resize(size_t(slots_));
    act.argmax.resize(size_t(pools_));
    act.slots[0] = input;
    act.params = w.params.data();
    act.version = w.version;
    for (const Op& op : ops_) {
      const Tensor<Real>& a = act.slots[size_t(op.in)];
      Tensor<Real>& o = act.slots[size_t(op.out)];
      switch (op.kind) {
        case OpKind::conv: {
          const auto& l = layout_[size_t(op.layer)];
          layers::conv3d_forward(a, &w.params[l.offset], &w.params[l.offset + l.weight_count()], l.cout, l.k, o);
          break;
        }
        case OpKind::relu:
          layers::relu_forward(a, o);
          break;
        case OpKind::sigmoid:
          layers::sigmoid_forward(a, o);
          break;
        case OpKind::maxpool:
          layers::maxpool2_forward(a, o, act.argmax[size_t(op.pool)]);
          break;
        case OpKind::upconv: {
          const auto& l = layout_[size_t(op.layer)];
          layers::upconv2_forward(a, &w.params[l.offset], &w.params[l.offset + l.weight_count()], l.cout, o);
          break;
        }
        case OpKind::concat:
          layers::concat_crop_forward(a, act.slots[size_t(op.in2)], o);
          break;
      }
    }
    return act;
  }

  Activations<Real> forward(const Weights<Real>& w, const Array3<Real>& input) const {
    return forward(w, Tensor<Real>::from(input));
  }

  /// Forward on a patch of exactly geom.input_size() voxels per axis.
  Activations<Real> forward_patch(const Weights<Real>& w, const Array3<Real>& input, const PatchGeometry& geom) const {
    require(input.dims() == Dims::cube(geom.input_size()), "fcn: patch input size does not match the geometry");
    check_geometry(geom);
    return forward(w, input);
  }

  /// Accumulates d loss / d params into `grad`; optionally returns d loss / d input.
  void backward(const Weights<Real>& w, const Activations<Real>& act, const Tensor<Real>& grad_output,
                std::span<Real> grad, Tensor<Real>* grad_input = nullptr) const {
    require(grad.size() == params_, "fcn: gradient buffer does not match the layout");
    if (act.params != w.params.data() || act.version != w.version || act.slots.size() != size_t(slots_)) {
      throw ValidationError("fcn: stale activation cache (weights changed since forward)");
    }
    require(grad_output.c == 1 && grad_output.d == act.output().d, "fcn: output gradient shape mismatch");
    std::vector<Tensor<Real>> g(static_cast<size_t>(slots_));
    std::vector<bool> has(size_t(slots_), false);
    g.back() = grad_output;
    has.back() = true;
    auto accumulate = [&](int slot, Tensor<Real>&& t) {
      if (!has[size_t(slot)]) {
        g[size_t(slot)] = std::move(t);
        has[size_t(slot)] = true;
      } else {
        for (size_t i = 0; i < t.v.size(); ++i) g[size_t(slot)].v[i] += t.v[i];
      }
    };
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      const Op& op = *it;
      if (!has[size_t(op.out)]) continue;
      const Tensor<Real>& gout = g[size_t(op.out)];
      const Tensor<Real>& a = act.slots[size_t(op.in)];
      const bool want_input = op.in != 0 || grad_input != nullptr;
      Tensor<Real> gin;
      switch (op.kind) {
        case OpKind::conv: {
          const auto& l = layout_[size_t(op.layer)];
          layers::conv3d_backward(a, &w.params[l.offset], l.k, gout, &grad[l.offset], &grad[l.offset + l.weight_count()],
                                  want_input ? &gin : nullptr);
          break;
        }
        case OpKind::relu:
          layers::relu_backward(act.slots[size_t(op.out)], gout, gin);
          break;
        case OpKind::sigmoid:
          layers::sigmoid_backward(act.slots[size_t(op.out)], gout, gin);
          break;
        case OpKind::maxpool:
          layers::maxpool2_backward(a, act.argmax[size_t(op.pool)], gout, gin);
          break;
        case OpKind::upconv: {
          const auto& l = layout_[size_t(op.layer)];
          layers::upconv2_backward(a, &w.params[l.offset], gout, &grad[l.offset], &grad[l.offset + l.weight_count()],
                                   want_input ? &gin : nullptr);
          break;
        }
        case OpKind::concat: {
          Tensor<Real> gskip, gup;
          layers::concat_crop_backward(a, act.slots[size_t(op.in2)], gout, gskip, gup);
          accumulate(op.in, std::move(gskip));
          accumulate(op.in2, std::move(gup));
          continue;
        }
      }
      if (want_input) accumulate(op.in, std::move(gin));
    }
    if (grad_input) *grad_input = has[0] ? g[0] : Tensor<Real>(1, act.slots[0].d);
  }

  nlohmann::json layout_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : layout_) {
      arr.push_back({{"name", l.name}, {"kind", l.kind}, {"cin", l.cin}, {"cout", l.cout}, {"k", l.k},
                     {"offset", l.offset}, {"count", l.count()}});
    }
    return arr;
  }

  uint64_t layout_hash() const { return fnv1a(layout_json().dump()); }

private:
  void add_layer(const std::string& name, const std::string& kind, int64_t cin, int64_t cout, int64_t k) {
    LayerLayout l{name, kind, cin, cout, k, params_};
    params_ += l.count();
    layout_.push_back(l);
  }

  FcnConfig cfg_;
  std::vector<LayerLayout> layout_;
  std::vector<Op> ops_;
  size_t params_ = 0;
  int slots_ = 0;
  int pools_ = 0;
  int64_t margin_ = 0;
};

// ---------------------------------------------------------------------------
// Optimizer

/// Nesterov momentum in the reformulated form where the stored parameters
/// are the look-ahead point w + mu * v and the gradient is taken there:
///
///   v'     = mu * v - lr * grad
///   theta += -mu * v + (1 + mu) * v'
///
/// The underlying iterate w = theta - mu * v then follows the textbook update
/// v' = mu * v - lr * grad(w + mu * v), w' = w + v'.
template <typename Real>
void sgd_nesterov_step(Weights<Real>& w, std::span<const Real> grad, double lr, double mu) {
  require(lr > 0, "sgd: learning rate must be > 0");
  require(mu >= 0 && mu < 1, "sgd: momentum must lie in [0, 1)");
  require(grad.size() == w.params.size() && w.momentum.size() == w.params.size(), "sgd: gradient size mismatch");
  for (Real g : grad)
    if (!std::isfinite(g)) throw NonFiniteGradient();
  const Real m = static_cast<Real>(mu), r = static_cast<Real>(lr);
  for (size_t i = 0; i < grad.size(); ++i) {
    const Real v_old = w.momentum[i];
    const Real v_new = m * v_old - r * grad[i];
    w.momentum[i] = v_new;
    w.params[i] += -m * v_old + (Real(1) + m) * v_new;
  }
  ++w.version;
}

/// Immutable copy for the mining predictor.
template <typename Real>
std::shared_ptr<const Weights<Real>> snapshot(const Weights<Real>& w) {
  return std::make_shared<const Weights<Real>>(w);
}

// ---------------------------------------------------------------------------
// Checkpoint: manifest.json + weights.f32 + momentum.f32 (little-endian f32).

struct OptimizerParams {
  double learning_rate = 0.01;
  double momentum = 0.9;
};

inline nlohmann::json fcn_config_to_json(const FcnConfig& c) {
  return {{"arch", c.arch == Arch::flat ? "flat" : "unet1"}, {"layers", c.layers}, {"channels", c.channels}};
}

inline FcnConfig fcn_config_from_json(const nlohmann::json& j) {
  FcnConfig c;
  const std::string arch = j.value("arch", std::string("flat"));
  if (arch == "flat") {
    c.arch = Arch::flat;
  } else if (arch == "unet1") {
    c.arch = Arch::unet1;
  } else {
    throw ValidationError("unknown architecture '" + arch + "'");
  }
  c.layers = j.value("layers", c.layers);
  c.channels = j.value("channels", c.channels);
  c.validate();
  return c;
}

struct ModelCheckpoint {
  FcnConfig config;
  OptimizerParams optimizer;
  int64_t iteration = 0;
  Weights<float> weights;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline void write_f32(const fs::path& p, const std::vector<float>& v) {
  std::vector<char> bytes(v.size() * 4);
  std::memcpy(bytes.data(), v.data(), bytes.size());
  to_little_endian<float>(bytes);
  write_text(p, std::string_view(bytes.data(), bytes.size()));
}

inline std::vector<float> read_f32(const fs::path& p, size_t expected) {
  const std::string s = read_text(p);
  if (s.size() != expected * 4) {
    throw ValidationError(p.string() + ": expected " + std::to_string(expected * 4) + " bytes, found " +
                          std::to_string(s.size()));
  }
  std::vector<char> bytes(s.begin(), s.end());
  to_little_endian<float>(bytes);
  std::vector<float> v(expected);
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

}  // namespace detail

inline void save_checkpoint(const fs::path& dir, const ModelCheckpoint& ck) {
  const Fcn<float> net(ck.config);
  require(ck.weights.params.size() == net.parameter_count(), "checkpoint: weights do not match the configuration");
  nlohmann::json m;
  m["config"] = fcn_config_to_json(ck.config);
  m["layout"] = net.layout_json();
  m["layout_hash"] = net.layout_hash();
  m["parameter_count"] = net.parameter_count();
  m["optimizer"] = {{"kind", "sgd_nesterov"}, {"learning_rate", ck.optimizer.learning_rate}, {"momentum", ck.optimizer.momentum}};
  m["iteration"] = ck.iteration;
  m["weights_version"] = ck.weights.version;
  m["extra"] = ck.extra;
  fs::create_directories(dir);
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");
  detail::write_f32(dir / "weights.f32", ck.weights.params);
  detail::write_f32(dir / "momentum.f32", ck.weights.momentum);
}

inline ModelCheckpoint load_checkpoint(const fs::path& dir) {
  const nlohmann::json m = detail::read_json(dir / "manifest.json");
  ModelCheckpoint ck;
  try {
    ck.config = fcn_config_from_json(m.at("config"));
    const Fcn<float> net(ck.config);
    if (m.at("layout_hash").get<uint64_t>() != net.layout_hash() || m.at("layout") != net.layout_json()) {
      throw ValidationError("checkpoint " + dir.string() + ": layer layout hash mismatch");
    }
    ck.optimizer.learning_rate = m.at("optimizer").at("learning_rate").get<double>();
    ck.optimizer.momentum = m.at("optimizer").at("momentum").get<double>();
    ck.iteration = m.at("iteration").get<int64_t>();
    ck.weights.version = m.value("weights_version", uint64_t{0});
    ck.extra = m.value("extra", nlohmann::json::object());
    ck.weights.params = detail::read_f32(dir / "weights.f32", net.parameter_count());
    ck.weights.momentum = detail::read_f32(dir / "momentum.f32", net.parameter_count());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed checkpoint manifest " + dir.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace cased
