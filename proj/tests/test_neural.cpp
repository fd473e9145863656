#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "pvess/neural.hpp"
#include "support/finite_diff.hpp"

using namespace pvess;
using pvess::testing::max_relative_error;
using pvess::testing::numeric_gradient;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Eigen::MatrixXd::NullaryExpr(rows, cols, [&] { return n(rng); });
}

// Relative error of backward() against central differences for the loss
// sum(c .* net(x)).
double gradient_error(Net net, Rng& rng, int batch = 3) {
  net.init(rng);
  std::normal_distribution<double> n(0.0, 0.3);
  Eigen::VectorXd p = net.params();
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += n(rng);  // nonzero biases too
  net.set_params(p);
  const Eigen::MatrixXd x = random_matrix(net.input_width(), batch, rng);
  const Eigen::MatrixXd c = random_matrix(net.output_width(), batch, rng);

  Net::Cache cache;
  net.forward(x, &cache);
  Eigen::VectorXd grad;
  net.backward(cache, c, grad);

  Net probe = net;
  auto loss = [&](const Eigen::VectorXd& q) {
    probe.set_params(q);
    return (c.array() * probe.forward(x).array()).sum();
  };
  return max_relative_error(grad, numeric_gradient(loss, net.params()));
}

}  // namespace

TEST(Forward, ZeroWeightsGiveBiases) {
  Net net({3, 2}, Activation::kLinear);
  net.bias(0) << 0.5, -1.5;
  EXPECT_EQ(net.forward_one(Eigen::Vector3d(1, 2, 3)), Eigen::Vector2d(0.5, -1.5));
}

TEST(Forward, IdentityLayer) {
  Net net({3, 3}, Activation::kLinear);
  net.weight(0) = Eigen::Matrix3d::Identity();
  const Eigen::Vector3d x(0.1, -2.0, 7.0);
  EXPECT_EQ(net.forward_one(x), x);
}

TEST(Forward, PureAndShapeChecked) {
  Rng rng(1);
  Net net({4, 8, 2}, Activation::kLinear);
  net.init(rng);
  const Eigen::MatrixXd x = random_matrix(4, 5, rng);
  EXPECT_EQ(net.forward(x), net.forward(x));
  EXPECT_EQ(net.forward(x).rows(), 2);
  EXPECT_THROW(net.forward(Eigen::MatrixXd::Zero(3, 1)), std::invalid_argument);
}

TEST(Backward, MatchesFiniteDifferencesOnRepoShapes) {
  Rng rng(2);
  double worst = 0.0;
  for (int draw = 0; draw < 25; ++draw) {
    worst = std::max(worst, gradient_error(Net({4, 64, 64}, Activation::kTanh), rng));  // encoder
    worst = std::max(worst, gradient_error(Net({64, 4}, Activation::kLinear), rng));    // policy
    worst = std::max(worst, gradient_error(Net({64, 1}, Activation::kLinear), rng));    // value
    worst = std::max(worst, gradient_error(Net({64, 32, 64}, Activation::kLinear), rng));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Backward, InputGradient) {
  Rng rng(3);
  Net net({3, 5, 2}, Activation::kTanh);
  net.init(rng);
  const Eigen::MatrixXd x = random_matrix(3, 1, rng);
  const Eigen::MatrixXd c = random_matrix(2, 1, rng);
  Net::Cache cache;
  net.forward(x, &cache);
  Eigen::VectorXd grad;
  Eigen::MatrixXd dx;
  net.backward(cache, c, grad, &dx);
  auto loss = [&](const Eigen::VectorXd& in) { return c.col(0).dot(net.forward_one(in)); };
  EXPECT_LT(max_relative_error(dx.col(0), numeric_gradient(loss, x.col(0))), 1e-6);
}

TEST(Backward, ZeroOutputGradient) {
  Rng rng(4);
  Net net({4, 6, 3}, Activation::kLinear);
  net.init(rng);
  Net::Cache cache;
  net.forward(random_matrix(4, 2, rng), &cache);
  Eigen::VectorXd grad;
  net.backward(cache, Eigen::MatrixXd::Zero(3, 2), grad);
  EXPECT_TRUE(grad.isZero(0.0));
}

TEST(Backward, LinearQuadraticClosedForm) {
  // L = 0.5 |W x + b - y|^2  =>  dW = r x^T, db = r with r = W x + b - y.
  Rng rng(5);
  Net net({3, 2}, Activation::kLinear);
  net.init(rng);
  net.bias(0) << 0.3, -0.2;
  const Eigen::Vector3d x(1.0, -0.5, 2.0);
  const Eigen::Vector2d y(0.7, 0.1);
  Net::Cache cache;
  const Eigen::Vector2d r = net.forward(Eigen::MatrixXd(x), &cache).col(0) - y;
  Eigen::VectorXd grad;
  net.backward(cache, Eigen::MatrixXd(r), grad);
  const Eigen::MatrixXd dw = r * x.transpose();
  EXPECT_TRUE(grad.head(6).isApprox(Eigen::Map<const Eigen::VectorXd>(dw.data(), 6), 1e-14));
  EXPECT_TRUE(grad.tail(2).isApprox(r, 1e-14));
}

TEST(Backward, RejectsStaleCache) {
  Rng rng(6);
  Net net({2, 2}, Activation::kLinear);
  net.init(rng);
  Net::Cache cache;
  net.forward(Eigen::MatrixXd::Ones(2, 1), &cache);
  net.mutable_params()[0] += 1.0;
  Eigen::VectorXd grad;
  EXPECT_THROW(net.backward(cache, Eigen::MatrixXd::Ones(2, 1), grad), ContractViolation);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  Eigen::VectorXd p = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  const Eigen::VectorXd keep = p;
  AdamState<double> s(5, 1e-2);
  adam_step(p, Eigen::VectorXd(Eigen::VectorXd::Zero(5)), s);
  EXPECT_EQ(p, keep);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
  AdamState<double> s(3, 1e-3);
  adam_step(p, Eigen::VectorXd(Eigen::Vector3d(0.5, -2.0, 1e-3)), s);
  // m_hat = g and v_hat = g^2, so the update is -lr * g / (|g| + eps).
  EXPECT_NEAR(p[0], -1e-3, 1e-10);
  EXPECT_NEAR(p[1], 1e-3, 1e-10);
  EXPECT_NEAR(p[2], -1e-3 * 1e-3 / (1e-3 + 1e-8), 1e-15);
}

TEST(Adam, DescendsConvexQuadratic) {
  const Eigen::Vector3d scale(1.0, 4.0, 0.5);
  Eigen::VectorXd p = Eigen::Vector3d(1.0, -2.0, 3.0);
  AdamState<double> s(3, 1e-2);
  auto loss = [&](const Eigen::VectorXd& q) { return 0.5 * (scale.array() * q.array().square()).sum(); };
  double prev = loss(p);
  for (int i = 0; i < 100; ++i) {
    adam_step(p, Eigen::VectorXd(scale.array() * p.array()), s);
    const double now = loss(p);
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(Adam, RejectsNonFiniteGradient) {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(2);
  AdamState<double> s(2, 1e-3);
  EXPECT_THROW(adam_step(p, Eigen::VectorXd(Eigen::Vector2d(1.0, NAN)), s), ContractViolation);
}

TEST(Gaussian, ClosedForms) {
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  const GaussianStats g = gaussian_logprob_and_entropy(zero, zero, zero);
  EXPECT_NEAR(g.log_prob, -0.9189385332, 1e-9);
  EXPECT_NEAR(g.entropy, 1.4189385332, 1e-9);
  const Eigen::VectorXd log2 = Eigen::VectorXd::Constant(1, std::log(2.0));
  EXPECT_NEAR(gaussian_logprob_and_entropy(log2, zero, zero).entropy - g.entropy, std::log(2.0),
              1e-12);
}

TEST(Gaussian, EntropyMatchesMonteCarlo) {
  const Eigen::Vector3d log_std(-0.7, 0.0, 0.4);
  const Eigen::Vector3d mean(0.2, -1.0, 3.0);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  double sum = 0.0;
  const int samples = 1'000'000;
  for (int i = 0; i < samples; ++i) {
    Eigen::Vector3d a;
    for (int d = 0; d < 3; ++d) a[d] = mean[d] + std::exp(log_std[d]) * n(rng);
    sum -= gaussian_logprob_and_entropy(log_std, mean, a).log_prob;
  }
  const double entropy = gaussian_logprob_and_entropy(log_std, mean, mean).entropy;
  EXPECT_NEAR(sum / samples, entropy, 0.01 * std::abs(entropy));
}

TEST(Init, DeterministicForSeed) {
  Rng a(9), b(9);
  Net x({4, 16, 2}, Activation::kLinear), y({4, 16, 2}, Activation::kLinear);
  x.init(a);
  y.init(b);
  EXPECT_EQ(x, y);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(10);
  Net net({4, 7, 3}, Activation::kTanh);
  net.init(rng);
  std::stringstream ss;
  write_net(ss, net);
  EXPECT_EQ(read_net(ss), net);
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream bad("pvess-net 1\nwidths 2 3 2\noutput linear\nparams 5\n1\n2\n");
  EXPECT_THROW(read_net(bad), ValidationError);
  std::stringstream truncated("pvess-net 1\nwidths 2 1 1\noutput linear\nparams 2\n1\n");
  EXPECT_THROW(read_net(truncated), ValidationError);
}
