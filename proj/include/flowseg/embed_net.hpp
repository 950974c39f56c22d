#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include <Eigen/Core>

#include "flowseg/flow_io.hpp"

namespace flowseg {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using IndexMat = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic>;

// Feature maps are stored channels x pixels (one column per pixel, pixels in
// row-major order), so per-pixel layers are plain matrix products.

inline constexpr int kInputChannels = 3;
inline constexpr int kEncoderWidths[3] = {64, 128, 256};
inline constexpr int kFeatureDim = 256;  // r
inline constexpr int kEmbedDim = 10;     // p
inline constexpr int kDecoderWidths[2] = {128, 64};
inline constexpr int kGridScale = 4;     // two 2x2 max pools

enum class Param : int {
  Enc1W, Enc1B, Enc2W, Enc2B, Enc3W, Enc3B,
  Mlp1W, Mlp1B, Mlp2W, Mlp2B, Mlp3W, Mlp3B,
  Dec1W, Dec1B, Dec2W, Dec2B, Dec3W, Dec3B,
};
inline constexpr int kParamCount = 18;

std::string_view param_name(Param p);
/// (rows, cols) of each parameter tensor.
std::array<int, 2> param_shape(Param p);
/// Number of inputs feeding one output unit; used for Kaiming init.
int param_fan_in(Param p);

template <class Scalar>
using NetTensors = std::array<Mat<Scalar>, kParamCount>;

/// Weights, biases and Adam state of the autoencoder.
///
/// 3x3 conv weights are Cout x (9*Cin) with column (ky*3+kx)*Cin + ci.
/// Transposed 2x2/stride-2 conv weights are (4*Cout) x Cin with row
/// (dy*2+dx)*Cout + co. Biases are n x 1.
template <class Scalar>
struct NetParams {
  NetTensors<Scalar> tensors;
  NetTensors<Scalar> adam_m;
  NetTensors<Scalar> adam_v;
  std::int64_t step = 0;

  Mat<Scalar>& operator[](Param p) { return tensors[static_cast<int>(p)]; }
  const Mat<Scalar>& operator[](Param p) const { return tensors[static_cast<int>(p)]; }

  /// Kaiming-uniform (fan-in) weights, zero biases.
  static NetParams kaiming(std::uint64_t seed);
  static NetParams zeros();

  template <class Other>
  NetParams<Other> cast() const {
    NetParams<Other> out;
    for (int i = 0; i < kParamCount; ++i) {
      out.tensors[i] = tensors[i].template cast<Other>();
      out.adam_m[i] = adam_m[i].template cast<Other>();
      out.adam_v[i] = adam_v[i].template cast<Other>();
    }
    out.step = step;
    return out;
  }

  std::int64_t parameter_count() const;
  bool all_finite() const;
};

template <class Scalar>
NetTensors<Scalar> zero_grads();

struct NetOptions {
  bool attention = true;
};

template <class Scalar>
struct AttentionCache {
  int width = 0;
  int height = 0;
  IndexMat max_index;
  Mat<Scalar> pooled;
};

/// Activations kept for the backward pass.
template <class Scalar>
struct ForwardCache {
  int width = 0;
  int height = 0;
  bool attention = true;
  Mat<Scalar> col1, a1;
  IndexMat pool1_index;
  Mat<Scalar> p1, col2, a2;
  IndexMat pool2_index;
  Mat<Scalar> p2, col3, a3;
  Mat<Scalar> h1, h2, f;
  AttentionCache<Scalar> attn;
  Mat<Scalar> d1, d2;
};

template <class Scalar>
struct ForwardOutput {
  int grid_width = 0;
  int grid_height = 0;
  Mat<Scalar> embedding;       // p x (grid_width*grid_height), unnormalized Z
  Mat<Scalar> reconstruction;  // 3 x (width*height)
  ForwardCache<Scalar> cache;
};

/// Z = F(Phi(X)) + A(F(Phi(X))), X_hat = Psi(Z). `image` is 3 x (width*height)
/// and both dims must be multiples of 4. Throws ShapeMismatch on bad input and
/// NonFinite if an output is not finite.
template <class Scalar>
ForwardOutput<Scalar> forward(const NetParams<Scalar>& params, const Mat<Scalar>& image, int width,
                              int height, NetOptions options = {});

template <class Scalar>
ForwardOutput<Scalar> forward(const NetParams<Scalar>& params, const FlowImage& image,
                              NetOptions options = {}) {
  return forward(params, Mat<Scalar>(image.values.cast<Scalar>()), image.width, image.height,
                 options);
}

/// Reverse-mode gradients of <d_embedding, Z> + <d_reconstruction, X_hat>.
/// The decoder contribution to dZ is added internally.
template <class Scalar>
NetTensors<Scalar> backward(const NetParams<Scalar>& params, const ForwardOutput<Scalar>& out,
                            const Mat<Scalar>& d_embedding, const Mat<Scalar>& d_reconstruction);

/// A(F) = bilinear-upsample(maxpool2x2(F) + avgpool2x2(F)) back to width x height.
template <class Scalar>
Mat<Scalar> attention_forward(const Mat<Scalar>& features, int width, int height,
                              AttentionCache<Scalar>* cache);
template <class Scalar>
Mat<Scalar> attention_backward(const Mat<Scalar>& d_out, const AttentionCache<Scalar>& cache);

/// True when every ReLU sign and pooling winner matches, i.e. both forward passes
/// lie on the same smooth piece of the network.
template <class Scalar>
bool same_activation_pattern(const ForwardCache<Scalar>& a, const ForwardCache<Scalar>& b);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update. Throws NonFinite or ShapeMismatch on bad gradients.
template <class Scalar>
void adam_step(NetParams<Scalar>& params, const NetTensors<Scalar>& grads, const AdamConfig& config = {});

/// Per-pixel embedding on the reduced grid.
struct EmbeddingMap {
  int width = 0;
  int height = 0;
  Eigen::MatrixXd features;  // dim x (width*height)
  bool normalized = false;
  int degenerate = 0;        // zero vectors left at zero by l2_normalize

  int dim() const { return static_cast<int>(features.rows()); }
  int pixels() const { return static_cast<int>(features.cols()); }
};

inline constexpr double kNormFloor = 1e-12;

EmbeddingMap l2_normalize(const EmbeddingMap& raw);
/// Gradient w.r.t. the raw features given the gradient w.r.t. the normalized ones.
Eigen::MatrixXd l2_normalize_backward(const EmbeddingMap& raw, const Eigen::MatrixXd& d_normalized);

template <class Scalar>
EmbeddingMap to_embedding_map(const ForwardOutput<Scalar>& out) {
  EmbeddingMap map;
  map.width = out.grid_width;
  map.height = out.grid_height;
  map.features = out.embedding.template cast<double>();
  return map;
}

}  // namespace flowseg
