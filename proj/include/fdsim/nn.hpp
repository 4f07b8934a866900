#pragma once

// Dense feedforward networks with manual backpropagation, plus the loss
// functions and distillation regularizers shared by every training scheme.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fdsim {

enum class Activation { kTanh, kRelu, kIdentity };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

using LogitVector = std::vector<double>;

// Loss selector. `temperature` softens the softmax used by cross-entropy.
struct LossKind {
  enum class Tag { kMse, kCrossEntropy };
  Tag tag = Tag::kMse;
  double temperature = 1.0;

  static LossKind mse() { return {Tag::kMse, 1.0}; }
  static LossKind cross_entropy(double temperature = 1.0) {
    return {Tag::kCrossEntropy, temperature};
  }
};

// Which activation vector plays the role of the exchanged logit: the output
// layer (dimension = label count) or the last hidden layer.
enum class LogitSource { kOutput, kLastHidden };

LogitSource logit_source_from_string(const std::string& name);

struct ForwardResult {
  std::vector<double> prediction;    // output-layer activations (linear)
  LogitVector hidden_logits;         // final hidden-layer activations
};

class Mlp {
 public:
  // Random initialization: per-layer uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
  // drawn from a generator seeded by `seed`.
  Mlp(std::vector<int> layer_dims, std::vector<Activation> hidden_activations,
      std::uint64_t seed);

  static Mlp from_weights(std::vector<int> layer_dims,
                          std::vector<Activation> hidden_activations,
                          std::vector<double> weights, std::uint64_t seed = 0);

  ForwardResult forward(std::span<const double> input) const;

  const std::vector<int>& layer_dims() const { return layer_dims_; }
  const std::vector<Activation>& hidden_activations() const {
    return hidden_activations_;
  }
  std::uint64_t seed() const { return seed_; }
  const std::vector<double>& weights() const { return weights_; }
  std::vector<double>& mutable_weights() { return weights_; }
  std::size_t param_count() const { return weights_.size(); }
  int input_dim() const { return layer_dims_.front(); }
  int output_dim() const { return layer_dims_.back(); }
  // Width of the final hidden layer (the input dimension if there is none).
  int hidden_logit_dim() const { return layer_dims_[layer_dims_.size() - 2]; }
  int logit_dim(LogitSource source) const {
    return source == LogitSource::kOutput ? output_dim() : hidden_logit_dim();
  }
  bool same_architecture(const Mlp& other) const;

  // Checkpoint: little-endian f64 weight array prefixed by a JSON header
  // (layer dims, activation kinds, seed) and its u32 byte length.
  void save(const std::string& path) const;
  static Mlp load(const std::string& path);

  static std::size_t expected_weight_count(const std::vector<int>& dims);

 private:
  Mlp() = default;

  std::vector<int> layer_dims_;
  std::vector<Activation> hidden_activations_;
  std::vector<double> weights_;
  std::uint64_t seed_ = 0;
};

// Temperature softmax, numerically stabilized.
std::vector<double> softmax(std::span<const double> values, double temperature = 1.0);

// mse: sum of squared differences. cross_entropy: -sum t_i log softmax_T(p)_i,
// target must be a probability vector.
double loss(const LossKind& kind, std::span<const double> prediction,
            std::span<const double> target);

// d loss / d prediction.
std::vector<double> loss_gradient(const LossKind& kind,
                                  std::span<const double> prediction,
                                  std::span<const double> target);

// Gradient of  loss(prediction, target) + lambda * distill(logit, teacher)
// w.r.t. the flat weight vector. kinds = (supervised, distill). For a
// cross-entropy distill term the teacher logits are softened with the same
// temperature before entering the loss. The distill term is omitted when
// teacher_logits is absent or lambda == 0.
std::vector<double> backward(const Mlp& model, std::span<const double> input,
                             std::span<const double> target,
                             const std::optional<LogitVector>& teacher_logits,
                             double lambda,
                             const std::pair<LossKind, LossKind>& kinds,
                             LogitSource source = LogitSource::kOutput);

// VJP: pulls gradients w.r.t. the prediction and (optionally) the hidden
// logits back to the flat weight vector. Pass an empty span to skip a head.
std::vector<double> backward_from_gradients(const Mlp& model,
                                            std::span<const double> input,
                                            std::span<const double> prediction_grad,
                                            std::span<const double> hidden_grad);

// weights <- weights - eta * gradient
void sgd_step(Mlp& model, std::span<const double> gradient, double eta);

// Elementwise mean of the weight vectors; architectures must match.
Mlp fedavg(const std::vector<Mlp>& models);

// Central finite differences of an arbitrary scalar function of a weight
// vector; the oracle against which analytic gradients are checked.
std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f,
    std::vector<double> point, double step = 1e-5);

std::vector<double> one_hot(int label, int count);

}  // namespace fdsim
