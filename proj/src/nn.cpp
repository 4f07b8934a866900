#include "fdsim/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "fdsim/errors.hpp"
#include "fdsim/rng.hpp"
#include "json.hpp"

namespace fdsim {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

double activate(Activation a, double u) {
  switch (a) {
    case Activation::kTanh: return std::tanh(u);
    case Activation::kRelu: return u > 0.0 ? u : 0.0;
    case Activation::kIdentity: return u;
  }
  return u;
}

// relu' at 0 is defined as 0.
double activate_prime(Activation a, double u) {
  switch (a) {
    case Activation::kTanh: {
      double t = std::tanh(u);
      return 1.0 - t * t;
    }
    case Activation::kRelu: return u > 0.0 ? 1.0 : 0.0;
    case Activation::kIdentity: return 1.0;
  }
  return 1.0;
}

void check_probability_vector(std::span<const double> target) {
  double sum = 0.0;
  for (double t : target) {
    if (t < -1e-12)
      throw ValidationError("cross-entropy target has a negative entry");
    sum += t;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ValidationError("cross-entropy target is not a probability vector (sum != 1)");
}

struct ForwardCache {
  // pre[k]: pre-activations of weight layer k; act[k]: activations with
  // act[0] = input, act[k+1] = layer k output.
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> act;
};

ForwardCache run_forward(const Mlp& m, std::span<const double> input) {
  const auto& dims = m.layer_dims();
  if (static_cast<int>(input.size()) != dims.front())
    throw ValidationError("input length " + std::to_string(input.size()) +
                          " does not match input dim " + std::to_string(dims.front()));
  const std::size_t layers = dims.size() - 1;
  ForwardCache cache;
  cache.pre.resize(layers);
  cache.act.resize(layers + 1);
  cache.act[0].assign(input.begin(), input.end());

  const double* w = m.weights().data();
  for (std::size_t k = 0; k < layers; ++k) {
    const int rows = dims[k + 1];
    const int cols = dims[k] + 1;  // bias in the last column
    const auto& in = cache.act[k];
    auto& pre = cache.pre[k];
    pre.resize(rows);
    for (int r = 0; r < rows; ++r) {
      const double* row = w + static_cast<std::size_t>(r) * cols;
      double sum = row[cols - 1];
      for (int c = 0; c < cols - 1; ++c) sum += row[c] * in[c];
      pre[r] = sum;
    }
    w += static_cast<std::size_t>(rows) * cols;
    auto& out = cache.act[k + 1];
    out.resize(rows);
    if (k + 1 == layers) {
      out = pre;  // linear output layer
    } else {
      const Activation a = m.hidden_activations()[k];
      for (int r = 0; r < rows; ++r) out[r] = activate(a, pre[r]);
    }
  }
  return cache;
}

}  // namespace

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "identity") return Activation::kIdentity;
  throw ValidationError("unknown activation: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kTanh: return "tanh";
    case Activation::kRelu: return "relu";
    case Activation::kIdentity: return "identity";
  }
  return "identity";
}

LogitSource logit_source_from_string(const std::string& name) {
  if (name == "output") return LogitSource::kOutput;
  if (name == "last_hidden") return LogitSource::kLastHidden;
  throw ValidationError("unknown logit source: " + name);
}

std::size_t Mlp::expected_weight_count(const std::vector<int>& dims) {
  std::size_t n = 0;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k)
    n += static_cast<std::size_t>(dims[k] + 1) * dims[k + 1];
  return n;
}

Mlp::Mlp(std::vector<int> layer_dims, std::vector<Activation> hidden_activations,
         std::uint64_t seed)
    : layer_dims_(std::move(layer_dims)),
      hidden_activations_(std::move(hidden_activations)),
      seed_(seed) {
  if (layer_dims_.size() < 2)
    throw ValidationError("an Mlp needs at least input and output layers");
  for (int d : layer_dims_)
    if (d <= 0) throw ValidationError("layer dims must be positive");
  if (hidden_activations_.size() != layer_dims_.size() - 2)
    throw ValidationError("expected one activation per hidden layer (" +
                          std::to_string(layer_dims_.size() - 2) + "), got " +
                          std::to_string(hidden_activations_.size()));
  weights_.resize(expected_weight_count(layer_dims_));
  SplitRng rng = SplitRng(seed).child("mlp-init");
  std::size_t offset = 0;
  for (std::size_t k = 0; k + 1 < layer_dims_.size(); ++k) {
    const std::size_t count =
        static_cast<std::size_t>(layer_dims_[k] + 1) * layer_dims_[k + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer_dims_[k]));
    for (std::size_t i = 0; i < count; ++i)
      weights_[offset + i] = rng.uniform(-bound, bound);
    offset += count;
  }
}

Mlp Mlp::from_weights(std::vector<int> layer_dims,
                      std::vector<Activation> hidden_activations,
                      std::vector<double> weights, std::uint64_t seed) {
  Mlp m(layer_dims, hidden_activations, seed);
  if (weights.size() != m.weights_.size())
    throw ValidationError("weight count " + std::to_string(weights.size()) +
                          " does not match architecture (expected " +
                          std::to_string(m.weights_.size()) + ")");
  m.weights_ = std::move(weights);
  return m;
}

bool Mlp::same_architecture(const Mlp& other) const {
  return layer_dims_ == other.layer_dims_ &&
         hidden_activations_ == other.hidden_activations_;
}

ForwardResult Mlp::forward(std::span<const double> input) const {
  ForwardCache cache = run_forward(*this, input);
  ForwardResult out;
  out.prediction = cache.act.back();
  out.hidden_logits = cache.act[cache.act.size() - 2];
  return out;
}

std::vector<double> softmax(std::span<const double> values, double temperature) {
  if (temperature <= 0.0) throw ValidationError("softmax temperature must be positive");
  std::vector<double> out(values.size());
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : values) peak = std::max(peak, v / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(values[i] / temperature - peak);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double loss(const LossKind& kind, std::span<const double> prediction,
            std::span<const double> target) {
  if (prediction.size() != target.size())
    throw ValidationError("loss: prediction and target lengths differ");
  if (kind.temperature <= 0.0) throw ValidationError("loss temperature must be positive");
  if (kind.tag == LossKind::Tag::kMse) {
    double sum = 0.0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
      const double d = target[i] - prediction[i];
      sum += d * d;
    }
    return sum;
  }
  check_probability_vector(target);
  // log softmax_T(p) = p/T - logsumexp(p/T)
  const double t = kind.temperature;
  double peak = -std::numeric_limits<double>::infinity();
  for (double p : prediction) peak = std::max(peak, p / t);
  double lse = 0.0;
  for (double p : prediction) lse += std::exp(p / t - peak);
  lse = peak + std::log(lse);
  double sum = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i)
    sum -= target[i] * (prediction[i] / t - lse);
  return sum;
}

std::vector<double> loss_gradient(const LossKind& kind,
                                  std::span<const double> prediction,
                                  std::span<const double> target) {
  if (prediction.size() != target.size())
    throw ValidationError("loss_gradient: prediction and target lengths differ");
  std::vector<double> grad(prediction.size());
  if (kind.tag == LossKind::Tag::kMse) {
    for (std::size_t i = 0; i < prediction.size(); ++i)
      grad[i] = 2.0 * (prediction[i] - target[i]);
    return grad;
  }
  check_probability_vector(target);
  std::vector<double> probs = softmax(prediction, kind.temperature);
  for (std::size_t i = 0; i < prediction.size(); ++i)
    grad[i] = (probs[i] - target[i]) / kind.temperature;
  return grad;
}

std::vector<double> backward_from_gradients(const Mlp& model,
                                            std::span<const double> input,
                                            std::span<const double> prediction_grad,
                                            std::span<const double> hidden_grad) {
  const auto& dims = model.layer_dims();
  const std::size_t layers = dims.size() - 1;
  ForwardCache cache = run_forward(model, input);

  if (!prediction_grad.empty() &&
      static_cast<int>(prediction_grad.size()) != dims.back())
    throw ValidationError("prediction gradient has wrong length");
  if (!hidden_grad.empty() &&
      static_cast<int>(hidden_grad.size()) != dims[dims.size() - 2])
    throw ValidationError("hidden-logit gradient has wrong length");

  std::vector<double> grad(model.param_count(), 0.0);
  std::vector<double> delta(prediction_grad.begin(), prediction_grad.end());
  if (delta.empty()) delta.assign(dims.back(), 0.0);

  // Layer offsets into the flat weight vector.
  std::vector<std::size_t> offsets(layers);
  std::size_t off = 0;
  for (std::size_t k = 0; k < layers; ++k) {
    offsets[k] = off;
    off += static_cast<std::size_t>(dims[k] + 1) * dims[k + 1];
  }

  for (std::size_t k = layers; k-- > 0;) {
    const int rows = dims[k + 1];
    const int cols = dims[k] + 1;
    const auto& in = cache.act[k];
    double* gw = grad.data() + offsets[k];
    for (int r = 0; r < rows; ++r) {
      double* grow = gw + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols - 1; ++c) grow[c] += delta[r] * in[c];
      grow[cols - 1] += delta[r];
    }
    if (k == 0) break;
    const double* w = model.weights().data() + offsets[k];
    std::vector<double> upstream(dims[k], 0.0);
    for (int r = 0; r < rows; ++r) {
      const double* row = w + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols - 1; ++c) upstream[c] += row[c] * delta[r];
    }
    if (k == layers - 1 && !hidden_grad.empty())
      for (int c = 0; c < dims[k]; ++c) upstream[c] += hidden_grad[c];
    const Activation a = model.hidden_activations()[k - 1];
    delta.resize(dims[k]);
    for (int c = 0; c < dims[k]; ++c)
      delta[c] = upstream[c] * activate_prime(a, cache.pre[k - 1][c]);
  }
  return grad;
}

std::vector<double> backward(const Mlp& model, std::span<const double> input,
                             std::span<const double> target,
                             const std::optional<LogitVector>& teacher_logits,
                             double lambda,
                             const std::pair<LossKind, LossKind>& kinds,
                             LogitSource source) {
  if (lambda < 0.0) throw ValidationError("lambda must be non-negative");
  ForwardResult fwd = model.forward(input);
  std::vector<double> pred_grad = loss_gradient(kinds.first, fwd.prediction, target);

  std::vector<double> hidden_grad;
  if (teacher_logits.has_value() && lambda > 0.0) {
    const std::vector<double>& student_logits =
        source == LogitSource::kOutput ? fwd.prediction : fwd.hidden_logits;
    if (teacher_logits->size() != student_logits.size())
      throw ValidationError("teacher logit length " +
                            std::to_string(teacher_logits->size()) +
                            " does not match model logit length " +
                            std::to_string(student_logits.size()));
    const LossKind& dk = kinds.second;
    std::vector<double> distill_grad;
    if (dk.tag == LossKind::Tag::kCrossEntropy) {
      // Footnote-2 form: both sides softened by the same temperature.
      std::vector<double> teacher_soft = softmax(*teacher_logits, dk.temperature);
      distill_grad = loss_gradient(dk, student_logits, teacher_soft);
    } else {
      distill_grad = loss_gradient(dk, student_logits, *teacher_logits);
    }
    if (source == LogitSource::kOutput) {
      for (std::size_t i = 0; i < pred_grad.size(); ++i)
        pred_grad[i] += lambda * distill_grad[i];
    } else {
      hidden_grad.resize(distill_grad.size());
      for (std::size_t i = 0; i < distill_grad.size(); ++i)
        hidden_grad[i] = lambda * distill_grad[i];
    }
  }
  return backward_from_gradients(model, input, pred_grad, hidden_grad);
}

void sgd_step(Mlp& model, std::span<const double> gradient, double eta) {
  if (eta <= 0.0) throw ValidationError("learning rate must be positive");
  if (gradient.size() != model.param_count())
    throw ValidationError("gradient length does not match parameter count");
  auto& w = model.mutable_weights();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= eta * gradient[i];
}

Mlp fedavg(const std::vector<Mlp>& models) {
  if (models.empty()) throw ValidationError("fedavg: empty model list");
  for (const Mlp& m : models)
    if (!m.same_architecture(models.front()))
      throw ValidationError("fedavg: heterogeneous architectures cannot be averaged");
  // Sorting the addends per coordinate makes the mean bit-exactly invariant
  // to the order of the argument list.
  std::vector<double> mean(models.front().param_count(), 0.0);
  std::vector<double> column(models.size());
  const double inv = 1.0 / static_cast<double>(models.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    for (std::size_t m = 0; m < models.size(); ++m)
      column[m] = models[m].weights()[i];
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (double v : column) sum += v;
    mean[i] = sum * inv;
  }
  return Mlp::from_weights(models.front().layer_dims(),
                           models.front().hidden_activations(), std::move(mean),
                           models.front().seed());
}

std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f,
    std::vector<double> point, double step) {
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + step;
    const double hi = f(point);
    point[i] = saved - step;
    const double lo = f(point);
    point[i] = saved;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

std::vector<double> one_hot(int label, int count) {
  if (label < 0 || label >= count)
    throw ValidationError("label " + std::to_string(label) + " out of range [0, " +
                          std::to_string(count) + ")");
  std::vector<double> v(count, 0.0);
  v[label] = 1.0;
  return v;
}

void Mlp::save(const std::string& path) const {
  nlohmann::json header;
  header["layer_dims"] = layer_dims_;
  std::vector<std::string> acts;
  for (Activation a : hidden_activations_) acts.push_back(to_string(a));
  header["activations"] = acts;
  header["seed"] = seed_;
  header["weight_count"] = weights_.size();
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(weights_.data()),
            static_cast<std::streamsize>(weights_.size() * sizeof(double)));
  if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

Mlp Mlp::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw ValidationError("truncated checkpoint header length: " + path);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw ValidationError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(text, nullptr, false);
  if (header.is_discarded())
    throw ValidationError("checkpoint header is not valid JSON: " + path);

  std::vector<int> dims = header.at("layer_dims").get<std::vector<int>>();
  std::vector<Activation> acts;
  for (const auto& name : header.at("activations"))
    acts.push_back(activation_from_string(name.get<std::string>()));
  const std::uint64_t seed = header.at("seed").get<std::uint64_t>();
  const std::size_t count = header.at("weight_count").get<std::size_t>();
  if (count != expected_weight_count(dims))
    throw ValidationError("checkpoint weight count does not match layer dims");

  std::vector<double> weights(count);
  in.read(reinterpret_cast<char*>(weights.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw ValidationError("truncated checkpoint weights: " + path);
  return Mlp::from_weights(std::move(dims), std::move(acts), std::move(weights), seed);
}

}  // namespace fdsim
