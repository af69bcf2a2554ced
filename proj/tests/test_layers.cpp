#include <gtest/gtest.h>

#include "counterfort/layers.hpp"
#include "counterfort/network.hpp"
#include "counterfort/rng.hpp"
#include "oracles.hpp"

using namespace counterfort;

namespace {

void randomize(Network& net, Rng& rng, double scale = 0.3) {
  for (Tensor* p : net.parameters()) {
    for (double& v : p->values) v = scale * rng.normal();
  }
}

Tensor random_batch(const Dims& example, std::size_t n, Rng& rng) {
  Dims d{n};
  d.insert(d.end(), example.begin(), example.end());
  Tensor x(d);
  for (double& v : x.values) v = rng.uniform();
  return x;
}

}  // namespace

TEST(Layers, OutputDims) {
  EXPECT_EQ(layer_output_dims(Conv2d(3, 8, 3, 1, 1), {3, 32, 32}), (Dims{8, 32, 32}));
  EXPECT_EQ(layer_output_dims(Conv2d(3, 8, 3, 2, 0), {3, 9, 9}), (Dims{8, 4, 4}));
  EXPECT_EQ(layer_output_dims(MaxPool2d{2}, {4, 7, 6}), (Dims{4, 3, 3}));
  EXPECT_EQ(layer_output_dims(Flatten{}, {4, 3, 3}), (Dims{36}));
  EXPECT_THROW(layer_output_dims(Dense(10, 2), {11}), ShapeError);
  EXPECT_THROW(layer_output_dims(Conv2d(3, 8, 5), {3, 4, 4}), ShapeError);
  EXPECT_THROW(layer_output_dims(Conv2d(1, 8, 3), {3, 8, 8}), ShapeError);
}

TEST(Layers, ValidOutputRange) {
  // 5 wide input, kernel tap 0, pad 1, stride 1: output 0 would read x[-1].
  auto r = kernels::valid_outputs(5, 5, 1, 0, 1);
  EXPECT_EQ(r.lo, 1u);
  EXPECT_EQ(r.hi, 5u);
  r = kernels::valid_outputs(5, 5, 1, 2, 1);  // last tap reads x[o+1]
  EXPECT_EQ(r.lo, 0u);
  EXPECT_EQ(r.hi, 4u);
  r = kernels::valid_outputs(3, 7, 2, 0, 0);
  EXPECT_EQ(r.lo, 0u);
  EXPECT_EQ(r.hi, 3u);
}

TEST(Layers, ForwardMatchesNestedLoopOracle) {
  Rng rng(4);
  const std::vector<std::pair<Dims, std::vector<Layer>>> cases = {
      {{2, 7, 7}, {Conv2d(2, 3, 3, 2, 1), Relu{}, Flatten{}, Dense(48, 5)}},
      {{1, 6, 6}, {Conv2d(1, 2, 2, 1, 0), Relu{}, MaxPool2d{2}, Flatten{}, Dense(8, 3)}},
      {{3, 8, 8}, {Conv2d(3, 4, 3, 1, 1), MaxPool2d{2}, Conv2d(4, 2, 3, 1, 2), Flatten{}, Dense(72, 4)}},
      {{10}, {Dense(10, 6), Relu{}, Dense(6, 2)}},
  };
  for (const auto& [dims, layers] : cases) {
    Network net(dims, layers);
    randomize(net, rng);
    const Tensor x = random_batch(dims, 37, rng);  // spans several gradient chunks
    const Tensor logits = forward(net, x);
    for (std::size_t e = 0; e < 37; ++e) {
      const auto ref = oracle::forward_one(net, std::vector<double>(x.values.begin() + static_cast<long>(e * x.stride0()),
                                                                     x.values.begin() + static_cast<long>((e + 1) * x.stride0())));
      for (std::size_t k = 0; k < ref.size(); ++k) ASSERT_NEAR(logits[e * ref.size() + k], ref[k], 1e-12);
    }
  }
}

TEST(Layers, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(12);
  Network net({2, 6, 6}, {Conv2d(2, 3, 3, 1, 1), Relu{}, MaxPool2d{2}, Flatten{}, Dense(27, 4)});
  randomize(net, rng);
  const Tensor x = random_batch({2, 6, 6}, 3, rng);
  const std::vector<int> labels = {0, 3, 1};
  const Tensor targets = one_hot(labels, 4);
  const GradResult g = loss_and_grad(net, x, targets);
  auto params = net.parameters();
  ASSERT_EQ(g.param_grads.size(), params.size());
  const double h = 1e-6;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->size(); i += 3) {
      const double keep = (*params[p])[i];
      (*params[p])[i] = keep + h;
      const double up = mean_loss(net, x, targets);
      (*params[p])[i] = keep - h;
      const double down = mean_loss(net, x, targets);
      (*params[p])[i] = keep;
      const double numeric = (up - down) / (2 * h);
      ASSERT_NEAR(g.param_grads[p][i], numeric, 1e-6 + 1e-5 * std::abs(numeric)) << "param " << p << " index " << i;
    }
  }
}

TEST(Layers, MaxPoolTieRoutesGradientToFirstMax) {
  const MaxPool2d pool{2};
  const std::vector<double> in = {1.0, 1.0, 1.0, 1.0};
  std::vector<double> out(1), din(4);
  const std::vector<double> dout = {5.0};
  kernels::maxpool_forward(pool, {1, 2, 2}, {1, 1, 1}, 1, in.data(), out.data());
  EXPECT_EQ(out[0], 1.0);
  kernels::maxpool_backward(pool, {1, 2, 2}, {1, 1, 1}, 1, in.data(), dout.data(), din.data());
  EXPECT_EQ(din, (std::vector<double>{5.0, 0.0, 0.0, 0.0}));
}

TEST(Layers, ReluGradientIsZeroAtKink) {
  const std::vector<double> in = {-1.0, 0.0, 2.0}, dout = {1.0, 1.0, 1.0};
  std::vector<double> din(3);
  kernels::relu_backward(3, in.data(), dout.data(), din.data());
  EXPECT_EQ(din, (std::vector<double>{0.0, 0.0, 1.0}));
}

TEST(Layers, InputGradientMatchesFiniteDifferencesEverywhere) {
  // Every coordinate, not a sample.
  Rng rng(9);
  const std::vector<std::pair<Dims, std::vector<Layer>>> cases = {
      {{2, 5, 5}, {Conv2d(2, 3, 3, 1, 1), Relu{}, MaxPool2d{2}, Flatten{}, Dense(12, 4)}},
      {{12}, {Dense(12, 7), Relu{}, Dense(7, 3)}},
  };
  for (const auto& [dims, layers] : cases) {
    Network net(dims, layers);
    randomize(net, rng);
    const Tensor x = random_batch(dims, 3, rng);
    LabelBatch y(3);
    for (int& v : y) v = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(net.classes()) - 1));
    const Tensor analytic = loss_and_input_grad(net, x, y).input_grad;
    const Tensor numeric = finite_diff_grad(net, x, y, 1e-5);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double a = analytic[i], b = numeric[i];
      worst = std::max(worst, std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}));
    }
    EXPECT_LE(worst, 1e-4) << dims_string(dims);
  }
}
