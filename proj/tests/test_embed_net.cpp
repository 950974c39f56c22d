#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "flowseg/checkpoint.hpp"
#include "flowseg/embed_net.hpp"
#include "flowseg/error.hpp"
#include "flowseg/gradcheck.hpp"

using namespace flowseg;

namespace {

Eigen::MatrixXd random_image(std::uint64_t seed, int w, int h) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(3, w * h);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

ErrorCode error_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::Io;
}

const GradCheckCase& find_case(const GradCheckReport& r, const std::string& name) {
  for (const auto& c : r.cases)
    if (c.name == name) return c;
  FAIL("missing case " << name);
  return r.cases.front();
}

}  // namespace

TEST_SUITE("embed_net") {
  TEST_CASE("shape contract") {
    const auto params = NetParams<float>::kaiming(1);
    const Mat<float> img = random_image(2, 64, 64).cast<float>();
    const auto out = forward(params, img, 64, 64);
    CHECK(out.grid_width == 16);
    CHECK(out.grid_height == 16);
    CHECK(out.embedding.rows() == kEmbedDim);
    CHECK(out.embedding.cols() == 256);
    CHECK(out.reconstruction.rows() == 3);
    CHECK(out.reconstruction.cols() == 64 * 64);

    const auto rect = forward(params, Mat<float>(random_image(3, 12, 8).cast<float>()), 12, 8);
    CHECK(rect.grid_width == 3);
    CHECK(rect.grid_height == 2);
  }

  TEST_CASE("bad input shapes") {
    const auto params = NetParams<double>::kaiming(1);
    CHECK(error_of([&] { forward(params, random_image(1, 6, 8), 6, 8); }) == ErrorCode::ShapeMismatch);
    CHECK(error_of([&] { forward(params, random_image(1, 8, 8), 8, 4); }) == ErrorCode::ShapeMismatch);
    const auto out = forward(params, random_image(1, 8, 8), 8, 8);
    CHECK(error_of([&] { backward(params, out, Eigen::MatrixXd(Eigen::MatrixXd::Zero(kEmbedDim, 3)), Eigen::MatrixXd(Eigen::MatrixXd::Zero(3, 64))); }) ==
          ErrorCode::ShapeMismatch);
    CHECK(error_of([&] { backward(params, out, Eigen::MatrixXd(Eigen::MatrixXd::Zero(kEmbedDim, 4)), Eigen::MatrixXd(Eigen::MatrixXd::Zero(2, 64))); }) ==
          ErrorCode::ShapeMismatch);
  }

  TEST_CASE("zero network outputs zeros") {
    const auto out = forward(NetParams<double>::zeros(), random_image(4, 16, 16), 16, 16);
    CHECK(out.embedding.isZero(0.0));
    CHECK(out.reconstruction.isZero(0.0));
  }

  TEST_CASE("forward is deterministic") {
    const auto params = NetParams<float>::kaiming(5);
    const Mat<float> img = random_image(6, 32, 16).cast<float>();
    const auto a = forward(params, img, 32, 16);
    const auto b = forward(params, img, 32, 16);
    CHECK(a.embedding == b.embedding);
    CHECK(a.reconstruction == b.reconstruction);
  }

  TEST_CASE("attention branch changes the output") {
    const auto params = NetParams<double>::kaiming(7);
    const Eigen::MatrixXd img = random_image(8, 16, 16);
    const auto with = forward(params, img, 16, 16);
    const auto without = forward(params, img, 16, 16, NetOptions{false});
    CHECK((with.embedding - without.embedding).norm() > 0.0);
  }

  TEST_CASE("attention on a 2x2 map") {
    // One channel: max 4, mean 2.5; bilinear upsampling of a 1x1 map is constant.
    Eigen::MatrixXd f(1, 4);
    f << 1, 2, 3, 4;
    const Eigen::MatrixXd a = attention_forward<double>(f, 2, 2, nullptr);
    CHECK((a.array() == 6.5).all());
  }

  TEST_CASE("zero upstream gives zero gradients") {
    const auto params = NetParams<double>::kaiming(9);
    const auto out = forward(params, random_image(10, 8, 8), 8, 8);
    const auto grads = backward(params, out, Eigen::MatrixXd(Eigen::MatrixXd::Zero(kEmbedDim, 4)), Eigen::MatrixXd(Eigen::MatrixXd::Zero(3, 64)));
    for (const auto& g : grads) CHECK(g.isZero(0.0));
  }

  TEST_CASE("kaiming init") {
    const auto params = NetParams<double>::kaiming(11);
    CHECK(params.all_finite());
    for (int i = 0; i < kParamCount; ++i) {
      const auto p = static_cast<Param>(i);
      const auto shape = param_shape(p);
      CHECK(params[p].rows() == shape[0]);
      CHECK(params[p].cols() == shape[1]);
      CHECK(params.adam_m[static_cast<std::size_t>(i)].rows() == shape[0]);
      if (shape[1] == 1) {
        CHECK(params[p].isZero(0.0));
      } else {
        const double bound = std::sqrt(6.0 / param_fan_in(p));
        CHECK(params[p].cwiseAbs().maxCoeff() <= bound);
        CHECK(params[p].cwiseAbs().maxCoeff() > 0.5 * bound);
      }
    }
    CHECK(param_fan_in(Param::Enc1W) == 27);
    CHECK(param_fan_in(Param::Mlp1W) == 256);
    CHECK(NetParams<double>::kaiming(11)[Param::Enc2W] == params[Param::Enc2W]);
  }

  TEST_CASE("l2 normalization") {
    EmbeddingMap raw;
    raw.width = 3;
    raw.height = 1;
    raw.features = Eigen::MatrixXd::Zero(kEmbedDim, 3);
    raw.features(0, 0) = 3;
    raw.features(1, 0) = 4;
    raw.features(5, 1) = 1;
    const EmbeddingMap z = l2_normalize(raw);
    CHECK(z.normalized);
    CHECK(z.features(0, 0) == doctest::Approx(0.6));
    CHECK(z.features(1, 0) == doctest::Approx(0.8));
    CHECK(z.features.col(1) == raw.features.col(1));
    CHECK(z.features.col(2).isZero(0.0));
    CHECK(z.degenerate == 1);
    CHECK(l2_normalize(z).features.isApprox(z.features));
  }

  TEST_CASE("finite-difference gradients") {
    for (std::uint64_t seed : {1u, 2u}) {
      const GradCheckReport report = run_gradcheck(seed);
      for (const auto& c : report.cases) {
        INFO(c.name << " max rel err " << c.max_relative_error);
        CHECK(c.passed);
      }
      CHECK(find_case(report, "attention").checked >= 64);
      CHECK(find_case(report, "l2_normalize").checked >= 64);
      CHECK(find_case(report, "composite").checked >= 64);
    }
    CHECK(relative_error(1.0, 1.0 + 1e-5, 1e-6) == doctest::Approx(1e-5 / (1.0 + 1e-5)));
    CHECK(relative_error(0.0, 1e-12, 1e-6) == doctest::Approx(1e-6));
  }

  TEST_CASE("adam with zero gradients only advances the step") {
    auto params = NetParams<double>::kaiming(12);
    const auto before = params;
    adam_step(params, zero_grads<double>());
    CHECK(params.step == 1);
    for (int i = 0; i < kParamCount; ++i) CHECK(params.tensors[static_cast<std::size_t>(i)] == before.tensors[static_cast<std::size_t>(i)]);
  }

  TEST_CASE("adam first step moves by about lr") {
    auto params = NetParams<double>::zeros();
    auto grads = zero_grads<double>();
    grads[static_cast<std::size_t>(Param::Dec3B)](0, 0) = 1.0;
    adam_step(params, grads);
    CHECK(params[Param::Dec3B](0, 0) == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  }

  TEST_CASE("adam matches a scalar simulation and descends a quadratic") {
    auto params = NetParams<double>::zeros();
    const auto idx = static_cast<std::size_t>(Param::Mlp3B);
    double theta = 0.0, m = 0.0, v = 0.0;
    double prev_loss = std::pow(0.0 - 3.0, 2);
    for (int t = 1; t <= 10; ++t) {
      auto grads = zero_grads<double>();
      const double g = 2.0 * (params.tensors[idx](2, 0) - 3.0);
      grads[idx](2, 0) = g;
      adam_step(params, grads);

      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mhat = m / (1 - std::pow(0.9, t));
      const double vhat = v / (1 - std::pow(0.999, t));
      theta -= 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(params.tensors[idx](2, 0) == doctest::Approx(theta).epsilon(1e-12));

      const double loss = std::pow(params.tensors[idx](2, 0) - 3.0, 2);
      CHECK(loss < prev_loss);
      prev_loss = loss;
    }
  }

  TEST_CASE("adam rejects bad gradients") {
    auto params = NetParams<float>::zeros();
    auto grads = zero_grads<float>();
    grads[0](0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK(error_of([&] { adam_step(params, grads); }) == ErrorCode::NonFinite);
    auto wrong = zero_grads<float>();
    wrong[3].resize(2, 2);
    CHECK(error_of([&] { adam_step(params, wrong); }) == ErrorCode::ShapeMismatch);
  }

  TEST_CASE("checkpoint roundtrip and corruption") {
    const auto params = NetParams<float>::kaiming(13);
    const auto bytes = encode_checkpoint(params);
    const auto back = decode_checkpoint(bytes);
    for (int i = 0; i < kParamCount; ++i) CHECK(back.tensors[static_cast<std::size_t>(i)] == params.tensors[static_cast<std::size_t>(i)]);

    auto bad = bytes;
    bad[0] = std::byte{'X'};
    CHECK(error_of([&] { decode_checkpoint(bad); }) == ErrorCode::BadMagic);
    const std::vector<std::byte> cut(bytes.begin(), bytes.end() - 7);
    CHECK(error_of([&] { decode_checkpoint(cut); }) == ErrorCode::Truncated);
    auto version = bytes;
    version[4] = std::byte{9};
    CHECK(error_of([&] { decode_checkpoint(version); }) == ErrorCode::Malformed);
    auto nan = bytes;
    const std::uint32_t qnan = 0x7fc00000u;
    for (int b = 0; b < 4; ++b) nan[nan.size() - 4 + static_cast<std::size_t>(b)] = static_cast<std::byte>((qnan >> (8 * b)) & 0xff);
    CHECK(error_of([&] { decode_checkpoint(nan); }) == ErrorCode::NonFinite);

    const auto path = std::filesystem::temp_directory_path() / "flowseg_test.ckpt";
    save_checkpoint(path, params);
    CHECK(load_checkpoint(path).tensors[5] == params.tensors[5]);
    std::filesystem::remove(path);
  }
}
