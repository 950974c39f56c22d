#include "flowseg/embed_net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <string>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

struct ParamInfo {
  std::string_view name;
  int rows;
  int cols;
  int fan_in;
};

constexpr int C1 = kEncoderWidths[0];
constexpr int C2 = kEncoderWidths[1];
constexpr int C3 = kEncoderWidths[2];
constexpr int D1 = kDecoderWidths[0];
constexpr int D2 = kDecoderWidths[1];

constexpr ParamInfo kParams[kParamCount] = {
    {"enc1.weight", C1, 9 * kInputChannels, 9 * kInputChannels},
    {"enc1.bias", C1, 1, 9 * kInputChannels},
    {"enc2.weight", C2, 9 * C1, 9 * C1},
    {"enc2.bias", C2, 1, 9 * C1},
    {"enc3.weight", C3, 9 * C2, 9 * C2},
    {"enc3.bias", C3, 1, 9 * C2},
    {"mlp1.weight", kFeatureDim, kFeatureDim, kFeatureDim},
    {"mlp1.bias", kFeatureDim, 1, kFeatureDim},
    {"mlp2.weight", kFeatureDim, kFeatureDim, kFeatureDim},
    {"mlp2.bias", kFeatureDim, 1, kFeatureDim},
    {"mlp3.weight", kEmbedDim, kFeatureDim, kFeatureDim},
    {"mlp3.bias", kEmbedDim, 1, kFeatureDim},
    {"dec1.weight", 4 * D1, kEmbedDim, kEmbedDim},
    {"dec1.bias", D1, 1, kEmbedDim},
    {"dec2.weight", 4 * D2, D1, D1},
    {"dec2.bias", D2, 1, D1},
    {"dec3.weight", kInputChannels, 9 * D2, 9 * D2},
    {"dec3.bias", kInputChannels, 1, 9 * D2},
};

const ParamInfo& info(Param p) { return kParams[static_cast<int>(p)]; }

// ---- 3x3 convolution, stride 1, zero padding 1 ----

template <class S>
void im2col3x3(const Mat<S>& in, int w, int h, Mat<S>& col) {
  const int c = static_cast<int>(in.rows());
  col.resize(9 * c, static_cast<Eigen::Index>(w) * h);
  const S* src = in.data();
  S* dst = col.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ky = 0; ky < 3; ++ky) {
        const int yy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx, dst += c) {
          const int xx = x + kx - 1;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) {
            std::fill(dst, dst + c, S(0));
          } else {
            std::memcpy(dst, src + (static_cast<std::ptrdiff_t>(yy) * w + xx) * c, sizeof(S) * c);
          }
        }
      }
    }
  }
}

template <class S>
Mat<S> col2im3x3(const Mat<S>& col, int w, int h, int c) {
  Mat<S> out = Mat<S>::Zero(c, static_cast<Eigen::Index>(w) * h);
  const S* src = col.data();
  S* dst = out.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ky = 0; ky < 3; ++ky) {
        const int yy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx, src += c) {
          const int xx = x + kx - 1;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          S* d = dst + (static_cast<std::ptrdiff_t>(yy) * w + xx) * c;
          for (int i = 0; i < c; ++i) d[i] += src[i];
        }
      }
    }
  }
  return out;
}

template <class S>
Mat<S> conv3x3(const Mat<S>& in, int w, int h, const Mat<S>& weight, const Mat<S>& bias, Mat<S>& col) {
  im2col3x3(in, w, h, col);
  Mat<S> out(weight.rows(), col.cols());
  out.noalias() = weight * col;
  out.colwise() += bias.col(0);
  return out;
}

// 3x3 convolution for few output channels: multiply once per kernel tap and
// shift-accumulate the (9*Cout) x pixels product instead of building a
// (9*Cin) x pixels column matrix.
template <class S>
Mat<S> tap_major(const Mat<S>& weight, int cin) {
  const int cout = static_cast<int>(weight.rows());
  Mat<S> taps(9 * cout, cin);
  for (int k = 0; k < 9; ++k) taps.middleRows(k * cout, cout) = weight.middleCols(k * cin, cin);
  return taps;
}

template <class S>
Mat<S> conv3x3_few_out(const Mat<S>& in, int w, int h, const Mat<S>& weight, const Mat<S>& bias) {
  const int cin = static_cast<int>(in.rows());
  const int cout = static_cast<int>(weight.rows());
  Mat<S> per_tap(9 * cout, in.cols());
  per_tap.noalias() = tap_major(weight, cin) * in;
  Mat<S> out(cout, in.cols());
  out.colwise() = bias.col(0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int p = y * w + x;
      for (int ky = 0; ky < 3; ++ky) {
        const int yy = y + ky - 1;
        if (yy < 0 || yy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int xx = x + kx - 1;
          if (xx < 0 || xx >= w) continue;
          out.col(p) += per_tap.col(yy * w + xx).segment((ky * 3 + kx) * cout, cout);
        }
      }
    }
  }
  return out;
}

// Returns d_in; writes d_weight / d_bias.
template <class S>
Mat<S> conv3x3_few_out_backward(const Mat<S>& d_out, const Mat<S>& in, int w, int h, const Mat<S>& weight,
                                Mat<S>& d_weight, Mat<S>& d_bias) {
  const int cin = static_cast<int>(in.rows());
  const int cout = static_cast<int>(weight.rows());
  // gathered(k*cout + co, q) = d_out(co, q - offset_k)
  Mat<S> gathered = Mat<S>::Zero(9 * cout, in.cols());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int q = y * w + x;
      for (int ky = 0; ky < 3; ++ky) {
        const int py = y - (ky - 1);
        if (py < 0 || py >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int px = x - (kx - 1);
          if (px < 0 || px >= w) continue;
          gathered.col(q).segment((ky * 3 + kx) * cout, cout) = d_out.col(py * w + px);
        }
      }
    }
  }
  const Mat<S> d_taps = gathered * in.transpose();
  for (int k = 0; k < 9; ++k) d_weight.middleCols(k * cin, cin) = d_taps.middleRows(k * cout, cout);
  d_bias.col(0) = d_out.rowwise().sum();
  Mat<S> d_in(cin, in.cols());
  d_in.noalias() = tap_major(weight, cin).transpose() * gathered;
  return d_in;
}

template <class S>
void relu_inplace(Mat<S>& m) {
  m = m.cwiseMax(S(0));
}

// Zeroes gradient entries whose activation was clamped.
template <class S>
void relu_backward_inplace(Mat<S>& grad, const Mat<S>& activation) {
  grad = (activation.array() > S(0)).select(grad, S(0));
}

// ---- 2x2 pooling, stride 2, partial windows at odd edges ----

template <class S>
Mat<S> maxpool2x2(const Mat<S>& in, int w, int h, IndexMat& index) {
  const int c = static_cast<int>(in.rows());
  const int ow = (w + 1) / 2;
  const int oh = (h + 1) / 2;
  Mat<S> out(c, static_cast<Eigen::Index>(ow) * oh);
  index.resize(c, static_cast<Eigen::Index>(ow) * oh);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int po = oy * ow + ox;
      const int first = (2 * oy) * w + 2 * ox;
      out.col(po) = in.col(first);
      index.col(po).setConstant(first);
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const int y = 2 * oy + dy;
          const int x = 2 * ox + dx;
          if ((dy == 0 && dx == 0) || y >= h || x >= w) continue;
          const int pi = y * w + x;
          for (int ch = 0; ch < c; ++ch) {
            if (in(ch, pi) > out(ch, po)) {
              out(ch, po) = in(ch, pi);
              index(ch, po) = pi;
            }
          }
        }
      }
    }
  }
  return out;
}

template <class S>
Mat<S> maxpool2x2_backward(const Mat<S>& d_out, const IndexMat& index, Eigen::Index in_pixels) {
  Mat<S> d_in = Mat<S>::Zero(d_out.rows(), in_pixels);
  for (Eigen::Index po = 0; po < d_out.cols(); ++po) {
    for (Eigen::Index ch = 0; ch < d_out.rows(); ++ch) d_in(ch, index(ch, po)) += d_out(ch, po);
  }
  return d_in;
}

template <class S>
Mat<S> avgpool2x2(const Mat<S>& in, int w, int h) {
  const int ow = (w + 1) / 2;
  const int oh = (h + 1) / 2;
  Mat<S> out = Mat<S>::Zero(in.rows(), static_cast<Eigen::Index>(ow) * oh);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      int n = 0;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const int y = 2 * oy + dy;
          const int x = 2 * ox + dx;
          if (y >= h || x >= w) continue;
          out.col(oy * ow + ox) += in.col(y * w + x);
          ++n;
        }
      }
      out.col(oy * ow + ox) /= S(n);
    }
  }
  return out;
}

template <class S>
Mat<S> avgpool2x2_backward(const Mat<S>& d_out, int w, int h) {
  const int ow = (w + 1) / 2;
  const int oh = (h + 1) / 2;
  Mat<S> d_in = Mat<S>::Zero(d_out.rows(), static_cast<Eigen::Index>(w) * h);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const int n = (std::min(2, h - 2 * oy)) * (std::min(2, w - 2 * ox));
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const int y = 2 * oy + dy;
          const int x = 2 * ox + dx;
          if (y >= h || x >= w) continue;
          d_in.col(y * w + x) += d_out.col(oy * ow + ox) / S(n);
        }
      }
    }
  }
  return d_in;
}

// ---- bilinear resize, half-pixel centers (align_corners = false) ----

struct Tap {
  int i0;
  int i1;
  double w1;
};

std::vector<Tap> bilinear_taps(int src, int dst) {
  std::vector<Tap> taps(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    double s = (i + 0.5) * scale - 0.5;
    if (s < 0.0) s = 0.0;
    int i0 = static_cast<int>(s);
    if (i0 > src - 1) i0 = src - 1;
    const int i1 = std::min(i0 + 1, src - 1);
    taps[i] = {i0, i1, s - i0};
  }
  return taps;
}

template <class S>
Mat<S> bilinear_resize(const Mat<S>& in, int sw, int sh, int dw, int dh) {
  const auto tx = bilinear_taps(sw, dw);
  const auto ty = bilinear_taps(sh, dh);
  Mat<S> out(in.rows(), static_cast<Eigen::Index>(dw) * dh);
  for (int y = 0; y < dh; ++y) {
    const S wy1 = static_cast<S>(ty[y].w1);
    const S wy0 = S(1) - wy1;
    for (int x = 0; x < dw; ++x) {
      const S wx1 = static_cast<S>(tx[x].w1);
      const S wx0 = S(1) - wx1;
      out.col(y * dw + x) = wy0 * (wx0 * in.col(ty[y].i0 * sw + tx[x].i0) + wx1 * in.col(ty[y].i0 * sw + tx[x].i1)) +
                            wy1 * (wx0 * in.col(ty[y].i1 * sw + tx[x].i0) + wx1 * in.col(ty[y].i1 * sw + tx[x].i1));
    }
  }
  return out;
}

template <class S>
Mat<S> bilinear_resize_backward(const Mat<S>& d_out, int sw, int sh, int dw, int dh) {
  const auto tx = bilinear_taps(sw, dw);
  const auto ty = bilinear_taps(sh, dh);
  Mat<S> d_in = Mat<S>::Zero(d_out.rows(), static_cast<Eigen::Index>(sw) * sh);
  for (int y = 0; y < dh; ++y) {
    const S wy1 = static_cast<S>(ty[y].w1);
    const S wy0 = S(1) - wy1;
    for (int x = 0; x < dw; ++x) {
      const S wx1 = static_cast<S>(tx[x].w1);
      const S wx0 = S(1) - wx1;
      const auto g = d_out.col(y * dw + x);
      d_in.col(ty[y].i0 * sw + tx[x].i0) += wy0 * wx0 * g;
      d_in.col(ty[y].i0 * sw + tx[x].i1) += wy0 * wx1 * g;
      d_in.col(ty[y].i1 * sw + tx[x].i0) += wy1 * wx0 * g;
      d_in.col(ty[y].i1 * sw + tx[x].i1) += wy1 * wx1 * g;
    }
  }
  return d_in;
}

// ---- transposed convolution, kernel 2, stride 2 ----

template <class S>
Mat<S> deconv2x2(const Mat<S>& in, int w, int h, const Mat<S>& weight, const Mat<S>& bias) {
  const int cout = static_cast<int>(bias.rows());
  const Mat<S> tmp = weight * in;  // (4*cout) x (w*h)
  const int ow = 2 * w;
  Mat<S> out(cout, static_cast<Eigen::Index>(ow) * 2 * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int pi = y * w + x;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          out.col((2 * y + dy) * ow + 2 * x + dx) = tmp.col(pi).segment((dy * 2 + dx) * cout, cout) + bias.col(0);
        }
      }
    }
  }
  return out;
}

// Returns d_in; accumulates into d_weight / d_bias.
template <class S>
Mat<S> deconv2x2_backward(const Mat<S>& d_out, const Mat<S>& in, int w, int h, const Mat<S>& weight,
                          Mat<S>& d_weight, Mat<S>& d_bias) {
  const int cout = static_cast<int>(d_out.rows());
  const int ow = 2 * w;
  Mat<S> d_tmp(4 * cout, static_cast<Eigen::Index>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int pi = y * w + x;
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          d_tmp.col(pi).segment((dy * 2 + dx) * cout, cout) = d_out.col((2 * y + dy) * ow + 2 * x + dx);
        }
      }
    }
  }
  d_weight.noalias() += d_tmp * in.transpose();
  d_bias.col(0) += d_out.rowwise().sum();
  Mat<S> d_in(in.rows(), in.cols());
  d_in.noalias() = weight.transpose() * d_tmp;
  return d_in;
}

template <class S>
void check_finite(const Mat<S>& m, const char* what) {
  if (!m.allFinite()) fail(ErrorCode::NonFinite, std::string(what) + " is not finite (training diverged?)");
}

template <class S>
Mat<S>& grad_of(NetTensors<S>& g, Param p) {
  return g[static_cast<int>(p)];
}

template <class S>
bool same_relu(const Mat<S>& a, const Mat<S>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && ((a.array() > S(0)) == (b.array() > S(0))).all();
}

}  // namespace

std::string_view param_name(Param p) { return info(p).name; }
std::array<int, 2> param_shape(Param p) { return {info(p).rows, info(p).cols}; }
int param_fan_in(Param p) { return info(p).fan_in; }

template <class S>
NetParams<S> NetParams<S>::zeros() {
  NetParams<S> params;
  for (int i = 0; i < kParamCount; ++i) {
    params.tensors[i] = Mat<S>::Zero(kParams[i].rows, kParams[i].cols);
    params.adam_m[i] = Mat<S>::Zero(kParams[i].rows, kParams[i].cols);
    params.adam_v[i] = Mat<S>::Zero(kParams[i].rows, kParams[i].cols);
  }
  return params;
}

template <class S>
NetParams<S> NetParams<S>::kaiming(std::uint64_t seed) {
  NetParams<S> params = zeros();
  std::mt19937_64 rng(seed);
  for (int i = 0; i < kParamCount; ++i) {
    if (kParams[i].cols == 1) continue;  // biases stay zero
    const double bound = std::sqrt(6.0 / kParams[i].fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto& t = params.tensors[i];
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] = static_cast<S>(dist(rng));
  }
  return params;
}

template <class S>
std::int64_t NetParams<S>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

template <class S>
bool NetParams<S>::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const auto& t) { return t.allFinite(); });
}

template <class S>
NetTensors<S> zero_grads() {
  NetTensors<S> g;
  for (int i = 0; i < kParamCount; ++i) g[i] = Mat<S>::Zero(kParams[i].rows, kParams[i].cols);
  return g;
}

template <class S>
Mat<S> attention_forward(const Mat<S>& features, int width, int height, AttentionCache<S>* cache) {
  IndexMat index;
  Mat<S> pooled = maxpool2x2(features, width, height, index) + avgpool2x2(features, width, height);
  const int pw = (width + 1) / 2;
  const int ph = (height + 1) / 2;
  Mat<S> out = bilinear_resize(pooled, pw, ph, width, height);
  if (cache) {
    cache->width = width;
    cache->height = height;
    cache->max_index = std::move(index);
    cache->pooled = std::move(pooled);
  }
  return out;
}

template <class S>
Mat<S> attention_backward(const Mat<S>& d_out, const AttentionCache<S>& cache) {
  const int pw = (cache.width + 1) / 2;
  const int ph = (cache.height + 1) / 2;
  const Mat<S> d_pooled = bilinear_resize_backward(d_out, pw, ph, cache.width, cache.height);
  const Eigen::Index pixels = static_cast<Eigen::Index>(cache.width) * cache.height;
  return maxpool2x2_backward(d_pooled, cache.max_index, pixels) +
         avgpool2x2_backward(d_pooled, cache.width, cache.height);
}

template <class S>
ForwardOutput<S> forward(const NetParams<S>& params, const Mat<S>& image, int width, int height,
                         NetOptions options) {
  if (width <= 0 || height <= 0 || width % kGridScale != 0 || height % kGridScale != 0) {
    fail(ErrorCode::ShapeMismatch, "network input dims must be positive multiples of 4, got " +
                                       std::to_string(width) + "x" + std::to_string(height));
  }
  if (image.rows() != kInputChannels || image.cols() != static_cast<Eigen::Index>(width) * height) {
    fail(ErrorCode::ShapeMismatch, "network input must be 3 x (width*height)");
  }

  ForwardOutput<S> out;
  auto& c = out.cache;
  c.width = width;
  c.height = height;
  c.attention = options.attention;
  const int w2 = width / 2, h2 = height / 2;
  const int gw = width / 4, gh = height / 4;
  out.grid_width = gw;
  out.grid_height = gh;

  // encoder Phi
  c.a1 = conv3x3(image, width, height, params[Param::Enc1W], params[Param::Enc1B], c.col1);
  relu_inplace(c.a1);
  c.p1 = maxpool2x2(c.a1, width, height, c.pool1_index);
  c.a2 = conv3x3(c.p1, w2, h2, params[Param::Enc2W], params[Param::Enc2B], c.col2);
  relu_inplace(c.a2);
  c.p2 = maxpool2x2(c.a2, w2, h2, c.pool2_index);
  c.a3 = conv3x3(c.p2, gw, gh, params[Param::Enc3W], params[Param::Enc3B], c.col3);
  relu_inplace(c.a3);

  // per-pixel MLP F
  c.h1.noalias() = params[Param::Mlp1W] * c.a3;
  c.h1.colwise() += params[Param::Mlp1B].col(0);
  relu_inplace(c.h1);
  c.h2.noalias() = params[Param::Mlp2W] * c.h1;
  c.h2.colwise() += params[Param::Mlp2B].col(0);
  relu_inplace(c.h2);
  c.f.noalias() = params[Param::Mlp3W] * c.h2;
  c.f.colwise() += params[Param::Mlp3B].col(0);

  out.embedding = c.f;
  if (options.attention) out.embedding += attention_forward(c.f, gw, gh, &c.attn);

  // decoder Psi on the unnormalized embedding
  c.d1 = deconv2x2(out.embedding, gw, gh, params[Param::Dec1W], params[Param::Dec1B]);
  relu_inplace(c.d1);
  c.d2 = deconv2x2(c.d1, w2, h2, params[Param::Dec2W], params[Param::Dec2B]);
  relu_inplace(c.d2);
  out.reconstruction = conv3x3_few_out(c.d2, width, height, params[Param::Dec3W], params[Param::Dec3B]);

  check_finite(out.embedding, "embedding");
  check_finite(out.reconstruction, "reconstruction");
  return out;
}

template <class S>
NetTensors<S> backward(const NetParams<S>& params, const ForwardOutput<S>& out, const Mat<S>& d_embedding,
                       const Mat<S>& d_reconstruction) {
  const auto& c = out.cache;
  if (d_embedding.rows() != out.embedding.rows() || d_embedding.cols() != out.embedding.cols() ||
      d_reconstruction.rows() != out.reconstruction.rows() ||
      d_reconstruction.cols() != out.reconstruction.cols()) {
    fail(ErrorCode::ShapeMismatch, "upstream gradients do not match forward output shapes");
  }
  const int w = c.width, h = c.height;
  const int w2 = w / 2, h2 = h / 2;
  const int gw = w / 4, gh = h / 4;
  NetTensors<S> g = zero_grads<S>();

  // decoder
  Mat<S> d_d2 = conv3x3_few_out_backward(d_reconstruction, c.d2, w, h, params[Param::Dec3W],
                                         grad_of(g, Param::Dec3W), grad_of(g, Param::Dec3B));
  relu_backward_inplace(d_d2, c.d2);
  Mat<S> d_d1 = deconv2x2_backward(d_d2, c.d1, w2, h2, params[Param::Dec2W], grad_of(g, Param::Dec2W),
                                   grad_of(g, Param::Dec2B));
  relu_backward_inplace(d_d1, c.d1);
  Mat<S> d_z = deconv2x2_backward(d_d1, out.embedding, gw, gh, params[Param::Dec1W], grad_of(g, Param::Dec1W),
                                  grad_of(g, Param::Dec1B));
  d_z += d_embedding;

  // Z = F + A(F)
  Mat<S> d_f = d_z;
  if (c.attention) d_f += attention_backward(d_z, c.attn);

  // MLP
  grad_of(g, Param::Mlp3W).noalias() = d_f * c.h2.transpose();
  grad_of(g, Param::Mlp3B).col(0) = d_f.rowwise().sum();
  Mat<S> d_h2(c.h2.rows(), c.h2.cols());
  d_h2.noalias() = params[Param::Mlp3W].transpose() * d_f;
  relu_backward_inplace(d_h2, c.h2);
  grad_of(g, Param::Mlp2W).noalias() = d_h2 * c.h1.transpose();
  grad_of(g, Param::Mlp2B).col(0) = d_h2.rowwise().sum();
  Mat<S> d_h1(c.h1.rows(), c.h1.cols());
  d_h1.noalias() = params[Param::Mlp2W].transpose() * d_h2;
  relu_backward_inplace(d_h1, c.h1);
  grad_of(g, Param::Mlp1W).noalias() = d_h1 * c.a3.transpose();
  grad_of(g, Param::Mlp1B).col(0) = d_h1.rowwise().sum();
  Mat<S> d_a3(c.a3.rows(), c.a3.cols());
  d_a3.noalias() = params[Param::Mlp1W].transpose() * d_h1;
  relu_backward_inplace(d_a3, c.a3);

  // encoder
  grad_of(g, Param::Enc3W).noalias() = d_a3 * c.col3.transpose();
  grad_of(g, Param::Enc3B).col(0) = d_a3.rowwise().sum();
  Mat<S> d_col(c.col3.rows(), c.col3.cols());
  d_col.noalias() = params[Param::Enc3W].transpose() * d_a3;
  Mat<S> d_p2 = col2im3x3(d_col, gw, gh, C2);
  Mat<S> d_a2 = maxpool2x2_backward(d_p2, c.pool2_index, static_cast<Eigen::Index>(w2) * h2);
  relu_backward_inplace(d_a2, c.a2);
  grad_of(g, Param::Enc2W).noalias() = d_a2 * c.col2.transpose();
  grad_of(g, Param::Enc2B).col(0) = d_a2.rowwise().sum();
  d_col.resize(c.col2.rows(), c.col2.cols());
  d_col.noalias() = params[Param::Enc2W].transpose() * d_a2;
  Mat<S> d_p1 = col2im3x3(d_col, w2, h2, C1);
  Mat<S> d_a1 = maxpool2x2_backward(d_p1, c.pool1_index, static_cast<Eigen::Index>(w) * h);
  relu_backward_inplace(d_a1, c.a1);
  grad_of(g, Param::Enc1W).noalias() = d_a1 * c.col1.transpose();
  grad_of(g, Param::Enc1B).col(0) = d_a1.rowwise().sum();
  return g;
}

template <class S>
bool same_activation_pattern(const ForwardCache<S>& a, const ForwardCache<S>& b) {
  return same_relu(a.a1, b.a1) && same_relu(a.a2, b.a2) && same_relu(a.a3, b.a3) &&
         same_relu(a.h1, b.h1) && same_relu(a.h2, b.h2) && same_relu(a.d1, b.d1) &&
         same_relu(a.d2, b.d2) && a.pool1_index == b.pool1_index && a.pool2_index == b.pool2_index &&
         a.attn.max_index == b.attn.max_index;
}

template <class S>
void adam_step(NetParams<S>& params, const NetTensors<S>& grads, const AdamConfig& config) {
  for (int i = 0; i < kParamCount; ++i) {
    if (grads[i].rows() != params.tensors[i].rows() || grads[i].cols() != params.tensors[i].cols()) {
      fail(ErrorCode::ShapeMismatch, "gradient shape mismatch for " + std::string(kParams[i].name));
    }
    if (!grads[i].allFinite()) {
      fail(ErrorCode::NonFinite, "non-finite gradient for " + std::string(kParams[i].name));
    }
  }
  params.step += 1;
  const double t = static_cast<double>(params.step);
  const S b1 = static_cast<S>(config.beta1);
  const S b2 = static_cast<S>(config.beta2);
  const S correction1 = static_cast<S>(1.0 - std::pow(config.beta1, t));
  const S correction2 = static_cast<S>(1.0 - std::pow(config.beta2, t));
  const S lr = static_cast<S>(config.lr);
  const S eps = static_cast<S>(config.eps);
  for (int i = 0; i < kParamCount; ++i) {
    auto& m = params.adam_m[i];
    auto& v = params.adam_v[i];
    m = b1 * m + (S(1) - b1) * grads[i];
    v = b2 * v + (S(1) - b2) * grads[i].cwiseProduct(grads[i]);
    params.tensors[i].array() -=
        lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
  }
}

EmbeddingMap l2_normalize(const EmbeddingMap& raw) {
  EmbeddingMap out = raw;
  out.degenerate = 0;
  for (Eigen::Index s = 0; s < raw.features.cols(); ++s) {
    const double norm = raw.features.col(s).norm();
    if (norm < kNormFloor) ++out.degenerate;
    out.features.col(s) /= std::max(norm, kNormFloor);
  }
  out.normalized = true;
  return out;
}

Eigen::MatrixXd l2_normalize_backward(const EmbeddingMap& raw, const Eigen::MatrixXd& d_normalized) {
  if (d_normalized.rows() != raw.features.rows() || d_normalized.cols() != raw.features.cols()) {
    fail(ErrorCode::ShapeMismatch, "normalization gradient shape mismatch");
  }
  Eigen::MatrixXd d_raw(d_normalized.rows(), d_normalized.cols());
  for (Eigen::Index s = 0; s < raw.features.cols(); ++s) {
    const double norm = raw.features.col(s).norm();
    if (norm < kNormFloor) {
      d_raw.col(s) = d_normalized.col(s) / kNormFloor;
      continue;
    }
    const Eigen::VectorXd z = raw.features.col(s) / norm;
    d_raw.col(s) = (d_normalized.col(s) - z * z.dot(d_normalized.col(s))) / norm;
  }
  return d_raw;
}

#define FLOWSEG_INSTANTIATE(S)                                                                              \
  template struct NetParams<S>;                                                                             \
  template NetTensors<S> zero_grads<S>();                                                                   \
  template ForwardOutput<S> forward<S>(const NetParams<S>&, const Mat<S>&, int, int, NetOptions);           \
  template NetTensors<S> backward<S>(const NetParams<S>&, const ForwardOutput<S>&, const Mat<S>&,           \
                                     const Mat<S>&);                                                        \
  template Mat<S> attention_forward<S>(const Mat<S>&, int, int, AttentionCache<S>*);                        \
  template Mat<S> attention_backward<S>(const Mat<S>&, const AttentionCache<S>&);                           \
  template bool same_activation_pattern<S>(const ForwardCache<S>&, const ForwardCache<S>&);                \
  template void adam_step<S>(NetParams<S>&, const NetTensors<S>&, const AdamConfig&);

FLOWSEG_INSTANTIATE(float)
FLOWSEG_INSTANTIATE(double)

#undef FLOWSEG_INSTANTIATE

}  // namespace flowseg
