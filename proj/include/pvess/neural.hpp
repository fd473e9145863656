#pragma once

// Small dense networks with hand-written reverse mode, an Adam optimizer and
// diagonal-Gaussian helpers. Batches are stored column-wise: an input batch
// is (input_width x batch_size).

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pvess/environment.hpp"
#include "pvess/error.hpp"

namespace pvess {

enum class Activation { kLinear, kTanh };

template <typename Scalar>
class DenseNet {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  // Activations of every layer, input included; tied to the parameter
  // generation it was produced with.
  struct Cache {
    std::vector<Matrix> activations;
    std::uint64_t generation = 0;
    const DenseNet* owner = nullptr;
  };

  DenseNet() = default;

  // widths = {input, hidden..., output}; hidden layers use tanh.
  DenseNet(std::vector<int> widths, Activation output)
      : widths_(std::move(widths)), output_(output) {
    if (widths_.size() < 2) throw std::invalid_argument("DenseNet needs at least two widths");
    Eigen::Index n = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      if (widths_[l] <= 0 || widths_[l + 1] <= 0) {
        throw std::invalid_argument("DenseNet widths must be positive");
      }
      offsets_.push_back(n);
      n += static_cast<Eigen::Index>(widths_[l + 1]) * (widths_[l] + 1);
    }
    params_ = Vector::Zero(n);
  }

  [[nodiscard]] int input_width() const { return widths_.front(); }
  [[nodiscard]] int output_width() const { return widths_.back(); }
  [[nodiscard]] int layer_count() const { return static_cast<int>(widths_.size()) - 1; }
  [[nodiscard]] const std::vector<int>& widths() const { return widths_; }
  [[nodiscard]] Activation output_activation() const { return output_; }
  [[nodiscard]] Eigen::Index parameter_count() const { return params_.size(); }

  [[nodiscard]] const Vector& params() const { return params_; }
  // Mutable access invalidates outstanding caches.
  Vector& mutable_params() {
    ++generation_;
    return params_;
  }
  void set_params(const Vector& p) {
    if (p.size() != params_.size()) throw std::invalid_argument("parameter size mismatch");
    mutable_params() = p;
  }

  [[nodiscard]] ConstMatrixMap weight(int l) const {
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
  }
  [[nodiscard]] ConstVectorMap bias(int l) const {
    return {params_.data() + offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l],
            widths_[l + 1]};
  }
  MatrixMap weight(int l) {
    ++generation_;
    return {params_.data() + offsets_[l], widths_[l + 1], widths_[l]};
  }
  VectorMap bias(int l) {
    ++generation_;
    return {params_.data() + offsets_[l] + Eigen::Index{widths_[l + 1]} * widths_[l],
            widths_[l + 1]};
  }

  // Glorot-uniform weights scaled by `gain`, zero biases.
  void init(Rng& rng, Scalar gain = Scalar(1)) {
    for (int l = 0; l < layer_count(); ++l) {
      const double limit = std::sqrt(6.0 / (widths_[l] + widths_[l + 1]));
      std::uniform_real_distribution<double> dist(-limit, limit);
      auto w = weight(l);
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = gain * Scalar(dist(rng));
      }
      bias(l).setZero();
    }
  }

  Matrix forward(const Matrix& input, Cache* cache = nullptr) const {
    if (input.rows() != input_width()) {
      throw std::invalid_argument("DenseNet::forward: input has " +
                                  std::to_string(input.rows()) + " rows, expected " +
                                  std::to_string(input_width()));
    }
    Matrix a = input;
    if (cache) {
      cache->activations.assign(1, input);
      cache->generation = generation_;
      cache->owner = this;
    }
    for (int l = 0; l < layer_count(); ++l) {
      Matrix z = weight(l) * a;
      z.colwise() += bias(l);
      const bool squash = l + 1 < layer_count() || output_ == Activation::kTanh;
      a = squash ? Matrix(z.array().tanh()) : z;
      if (cache) cache->activations.push_back(a);
    }
    return a;
  }

  Vector forward_one(const Vector& input) const { return forward(Matrix(input)).col(0); }

  // Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output); when
  // `input_grad` is non-null it receives d(loss)/d(input).
  void backward(const Cache& cache, const Matrix& output_grad, Vector& grad,
                Matrix* input_grad = nullptr) const {
    if (cache.owner != this || cache.generation != generation_ ||
        static_cast<int>(cache.activations.size()) != layer_count() + 1) {
      throw ContractViolation("DenseNet::backward: stale or foreign cache");
    }
    if (grad.size() != params_.size()) grad = Vector::Zero(params_.size());
    Matrix delta = output_grad;
    for (int l = layer_count() - 1; l >= 0; --l) {
      const Matrix& out = cache.activations[l + 1];
      const bool squash = l + 1 < layer_count() || output_ == Activation::kTanh;
      if (squash) delta = (delta.array() * (Scalar(1) - out.array().square())).matrix();
      const Matrix& in = cache.activations[l];
      const Eigen::Index rows = widths_[l + 1], cols = widths_[l];
      MatrixMap(grad.data() + offsets_[l], rows, cols).noalias() += delta * in.transpose();
      VectorMap(grad.data() + offsets_[l] + rows * cols, rows) += delta.rowwise().sum();
      if (l > 0 || input_grad) {
        Matrix next = weight(l).transpose() * delta;
        delta = std::move(next);
      }
    }
    if (input_grad) *input_grad = std::move(delta);
  }

  friend bool operator==(const DenseNet& a, const DenseNet& b) {
    return a.widths_ == b.widths_ && a.output_ == b.output_ && a.params_ == b.params_;
  }

 private:
  std::vector<int> widths_;
  std::vector<Eigen::Index> offsets_;
  Activation output_ = Activation::kLinear;
  Vector params_;
  std::uint64_t generation_ = 0;
};

using Net = DenseNet<double>;

// Adam with bias correction; the learning rate is read from the state so
// schedules can adjust it between steps.
template <typename Scalar>
struct AdamState {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Vector m;
  Vector v;
  long step = 0;
  Scalar lr = Scalar(1e-4);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);

  AdamState() = default;
  AdamState(Eigen::Index n, Scalar learning_rate)
      : m(Vector::Zero(n)), v(Vector::Zero(n)), lr(learning_rate) {}
};

template <typename Scalar>
void adam_step(Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& params,
               const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& grads, AdamState<Scalar>& s) {
  if (grads.size() != params.size() || s.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  if (!grads.allFinite()) throw ContractViolation("adam_step: non-finite gradient");
  ++s.step;
  s.m = s.beta1 * s.m + (Scalar(1) - s.beta1) * grads;
  s.v = s.beta2 * s.v + (Scalar(1) - s.beta2) * grads.cwiseAbs2();
  const Scalar c1 = Scalar(1) - std::pow(s.beta1, Scalar(s.step));
  const Scalar c2 = Scalar(1) - std::pow(s.beta2, Scalar(s.step));
  params.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
template <typename Derived>
double clip_grad_norm(Eigen::MatrixBase<Derived>& grads, double max_norm) {
  const double norm = grads.norm();
  if (norm > max_norm && norm > 0.0) grads *= max_norm / norm;
  return norm;
}

// Diagonal Gaussian with a state-independent log standard deviation.
struct GaussianStats {
  double log_prob = 0.0;
  double entropy = 0.0;
};

template <typename DerivedA, typename DerivedB, typename DerivedC>
GaussianStats gaussian_logprob_and_entropy(const Eigen::MatrixBase<DerivedA>& log_std,
                                           const Eigen::MatrixBase<DerivedB>& mean,
                                           const Eigen::MatrixBase<DerivedC>& action) {
  constexpr double log_2pi = 1.8378770664093454835606594728112;
  GaussianStats out;
  for (Eigen::Index d = 0; d < log_std.size(); ++d) {
    const double z = (action[d] - mean[d]) / std::exp(log_std[d]);
    out.log_prob += -0.5 * z * z - log_std[d] - 0.5 * log_2pi;
    out.entropy += 0.5 * (log_2pi + 1.0) + log_std[d];
  }
  return out;
}

// Text checkpoint:
//   pvess-net 1
//   widths <n> w0 w1 ... w(n-1)
//   output linear|tanh
//   params <count>
//   <one value per line, %.17g, layer by layer: W column-major then b>
void write_net(std::ostream& out, const Net& net);
Net read_net(std::istream& in);

}  // namespace pvess
