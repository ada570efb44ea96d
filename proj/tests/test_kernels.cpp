#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "remem/error.hpp"
#include "remem/kernels.hpp"

using namespace remem;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<float>(counter_normal(seed, i));
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

}  // namespace

TEST_SUITE("kernels") {

void check_close(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-5).scale(1.0));
}

TEST_CASE("parallel kernels agree with the serial references and repeat exactly") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const int c = 3 + static_cast<int>(s), o = 2 + static_cast<int>(s % 3), h = 5 + static_cast<int>(s), k = s % 2 ? 3 : 1;
    const Tensor in = random_tensor({c, h, h}, 10 * s + 1), w = random_tensor({o, c, k, k}, 10 * s + 2);
    const Tensor b = random_tensor({o}, 10 * s + 3), g = random_tensor({o, h, h}, 10 * s + 4);
    check_close(kernels::conv2d(in, w, b), kernels::reference::conv2d(in, w, b));
    CHECK(kernels::conv2d(in, w, b).data == kernels::conv2d(in, w, b).data);
    check_close(kernels::conv2d_grad_input(g, w), kernels::reference::conv2d_grad_input(g, w));
    CHECK(kernels::conv2d_grad_input(g, w).data == kernels::conv2d_grad_input(g, w).data);
    Tensor gw1, gb1, gw2, gb2, gw3, gb3;
    kernels::conv2d_grad_params(in, g, w.shape, gw1, gb1);
    kernels::reference::conv2d_grad_params(in, g, w.shape, gw2, gb2);
    kernels::conv2d_grad_params(in, g, w.shape, gw3, gb3);
    check_close(gw1, gw2);
    check_close(gb1, gb2);
    CHECK(gw1.data == gw3.data);
    Eigen::MatrixXd a1 = Eigen::MatrixXd::Zero(c, c), a2 = a1;
    kernels::accumulate_second_moment(in, a1);
    kernels::reference::accumulate_second_moment(in, a2);
    CHECK((a1 - a2).norm() < 1e-9 * a2.norm());
  }
}

TEST_CASE("conv2d matches the direct double-precision convolution") {
  const Tensor in = random_tensor({4, 7, 6}, 20), w = random_tensor({3, 4, 3, 5}, 21), b = random_tensor({3}, 22);
  const Tensor out = kernels::conv2d(in, w, b);
  const auto ref = oracle::conv_direct(in, w, b);
  REQUIRE(out.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out.data[i] == doctest::Approx(ref[i]).epsilon(1e-5));
}

TEST_CASE("conv2d gradients are adjoint to the forward map") {
  const Tensor x = random_tensor({3, 6, 6}, 30), w = random_tensor({4, 3, 3, 3}, 31), g = random_tensor({4, 6, 6}, 32);
  const Tensor zero_b({4});
  // <conv(x, w), g> = <x, grad_input(g)> = <w, grad_w> for the bias-free map.
  const double lhs = dot(kernels::conv2d(x, w, zero_b), g);
  CHECK(dot(x, kernels::conv2d_grad_input(g, w)) == doctest::Approx(lhs).epsilon(1e-5));
  Tensor gw, gb;
  kernels::conv2d_grad_params(x, g, w.shape, gw, gb);
  CHECK(dot(w, gw) == doctest::Approx(lhs).epsilon(1e-5));
  double gsum = 0.0;
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 6; ++xx) gsum += g.at(1, y, xx);
  CHECK(gb.data[1] == doctest::Approx(gsum).epsilon(1e-5));
}

TEST_CASE("nearest upsampling and its adjoint") {
  const Tensor x = random_tensor({2, 3, 4}, 40);
  const Tensor u = kernels::upsample_nearest(x, 2);
  CHECK(u.shape == std::vector<int>{2, 6, 8});
  CHECK(u.at(1, 5, 7) == x.at(1, 2, 3));
  const Tensor g = random_tensor({2, 6, 8}, 41);
  CHECK(dot(u, g) == doctest::Approx(dot(x, kernels::upsample_nearest_grad(g, 2))).epsilon(1e-5));
  CHECK(kernels::upsample_nearest(x, 1).data == x.data);
}

TEST_CASE("activations and their derivatives") {
  Tensor t({1, 1, 4});
  t.data = {-2.0f, -0.5f, 0.5f, 2.0f};
  Tensor r = t;
  kernels::activate_inplace(r, Nonlinearity::relu);
  CHECK(r.data == std::vector<float>{0, 0, 0.5f, 2.0f});
  Tensor l = t;
  kernels::activate_inplace(l, Nonlinearity::leaky_relu);
  CHECK(l.data[0] == doctest::Approx(-2.0 * kLeakySlope));
  Tensor th = t;
  kernels::activate_inplace(th, Nonlinearity::tanh);
  CHECK(th.data[3] == doctest::Approx(std::tanh(2.0)));
  for (auto act : {Nonlinearity::identity, Nonlinearity::relu, Nonlinearity::leaky_relu, Nonlinearity::tanh}) {
    Tensor g({1, 1, 4}, 1.0f);
    kernels::activate_grad_inplace(g, t, act);
    for (int i = 0; i < 4; ++i) {
      const float h = 1e-3f;
      Tensor p({1, 1, 1}, t.data[i] + h), m({1, 1, 1}, t.data[i] - h);
      kernels::activate_inplace(p, act);
      kernels::activate_inplace(m, act);
      CHECK(g.data[i] == doctest::Approx((p.data[0] - m.data[0]) / (2 * h)).epsilon(1e-3));
    }
    CHECK(nonlinearity_from_string(to_string(act)) == act);
  }
}

TEST_CASE("second moment matches direct summation") {
  const Tensor k = random_tensor({5, 4, 3}, 50);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(5, 5);
  kernels::accumulate_second_moment(k, acc);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(5, 5);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 3; ++x) {
      Eigen::VectorXd v(5);
      for (int c = 0; c < 5; ++c) v(c) = k.at(c, y, x);
      ref += v * v.transpose();
    }
  CHECK((acc - ref).norm() < 1e-10);
}

TEST_CASE("conv2d rejects channel mismatch") {
  CHECK_THROWS_AS(kernels::conv2d(Tensor({2, 3, 3}), Tensor({1, 3, 3, 3}), Tensor({1})), ValidationError);
}

}  // TEST_SUITE
