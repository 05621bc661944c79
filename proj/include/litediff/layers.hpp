#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "litediff/rng.hpp"
#include "litediff/tensor.hpp"

namespace litediff {

struct ParamEntry {
  Tensor tensor;
  bool trainable = false;
};

/// Named parameters of one model. Names are dot-separated paths and iterate in
/// sorted order, which fixes checkpoint layout and optimizer visiting order.
/// A non-trainable entry never requires grad and is never touched by an
/// Optimizer.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor tensor, bool trainable);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool trainable(const std::string& name) const;
  void set_trainable(const std::string& name, bool trainable);
  void set_all_trainable(bool trainable);
  void freeze_all() { set_all_trainable(false); }

  const std::map<std::string, ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t param_count() const;
  std::size_t trainable_count() const;
  bool all_frozen() const { return trainable_count() == 0; }

  void clear_grads();
  // Deep copy: new storage for every tensor.
  ParamStore clone() const;
  // Copies every entry of `other` in, prefixed. Names must not collide.
  void merge(const ParamStore& other, const std::string& prefix = "");

 private:
  std::map<std::string, ParamEntry> entries_;
};

// Temporarily stops a store's trainable tensors from requiring grad, so a
// forward pass through them records gradients only for upstream inputs.
// Ops consult requires_grad again during backward(), so keep the guard alive
// until the backward pass over that forward has run.
class ParamsAsConstants {
 public:
  explicit ParamsAsConstants(ParamStore& store);
  ~ParamsAsConstants();
  ParamsAsConstants(const ParamsAsConstants&) = delete;
  ParamsAsConstants& operator=(const ParamsAsConstants&) = delete;

 private:
  ParamStore& store_;
  std::vector<std::string> restored_;
};

// --- initialisation and parameter registration ---

Tensor init_normal(Shape shape, double stddev, Rng& rng, bool requires_grad = false);
// Registers <name>.weight (He-normal) and <name>.bias (zeros).
void register_conv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   std::size_t k, Rng& rng, bool trainable);
void register_dense(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                    Rng& rng, bool trainable);
// Registers <name>.gamma (ones) and <name>.beta (zeros).
void register_group_norm(ParamStore& store, const std::string& name, std::size_t channels,
                         bool trainable);

Tensor conv(const ParamStore& store, const std::string& name, const Tensor& x,
            std::size_t stride = 1, std::size_t padding = 0);
Tensor dense(const ParamStore& store, const std::string& name, const Tensor& x);

// --- primitives ---

std::size_t default_groups(std::size_t channels);
constexpr double kGroupNormEps = 1e-5;

/// Per-sample, per-group standardisation followed by a per-channel affine.
/// Variance is the biased (population) estimate.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = kGroupNormEps);
Tensor group_norm(const ParamStore& store, const std::string& name, const Tensor& x);

struct Activation {
  enum class Kind { Relu, LeakyRelu, Sigmoid, Tanh };
  Kind kind = Kind::LeakyRelu;
  double slope = 0.01;

  static Activation relu() { return {Kind::Relu, 0.0}; }
  static Activation leaky(double slope = 0.01) { return {Kind::LeakyRelu, slope}; }
  static Activation sigmoid() { return {Kind::Sigmoid, 0.0}; }
  static Activation tanh() { return {Kind::Tanh, 0.0}; }
};

// Sigmoid outputs are clamped to [kProbFloor, 1 - kProbFloor].
constexpr double kProbFloor = 1e-12;

Tensor activation(const Activation& act, const Tensor& x);
inline Tensor relu(const Tensor& x) { return activation(Activation::relu(), x); }
inline Tensor leaky_relu(const Tensor& x, double slope = 0.01) { return activation(Activation::leaky(slope), x); }
inline Tensor sigmoid(const Tensor& x) { return activation(Activation::sigmoid(), x); }

struct SpectralState {
  std::vector<double> u;  // unit vector, length = output channels
  int iterations = 1;

  static SpectralState random(std::size_t out_channels, Rng& rng);
};

// Power-iteration estimate of the largest singular value of the O×(I·kH·kW)
// matricisation; advances `state.u` by `state.iterations` steps.
double spectral_sigma(const Tensor& weight, SpectralState& state);
constexpr double kSigmaFloor = 1e-12;

/// conv2d with the weight divided by its estimated spectral norm. The
/// estimate is a constant for differentiation purposes.
Tensor spectral_conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, SpectralState& state,
                       std::size_t stride, std::size_t padding);

Tensor mse_loss(const Tensor& a, const Tensor& b);
// Mean binary cross-entropy of probabilities `p` against a constant target.
Tensor bce_loss(const Tensor& p, double target);

// --- optimisation ---

struct Sgd {
  double lr = 0.01;
};

struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class MissingGradientError : public std::logic_error {
 public:
  explicit MissingGradientError(const std::string& name)
      : std::logic_error("optimizer step before backward: no gradient for '" + name + "'"), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

/// Updates the trainable entries of a ParamStore and clears their gradients.
/// Non-trainable entries are never read for writing.
class Optimizer {
 public:
  using Rule = std::variant<Sgd, Adam>;

  explicit Optimizer(Rule rule) : rule_(rule) {}

  void step(ParamStore& store);
  std::int64_t steps() const { return steps_; }
  const Rule& rule() const { return rule_; }

  // Moment buffers as tensors named <prefix>m.<param> / <prefix>v.<param>,
  // plus <prefix>steps.
  void export_state(ParamStore& out, const std::string& prefix) const;
  void import_state(const ParamStore& in, const std::string& prefix);

 private:
  Rule rule_;
  std::int64_t steps_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

// Rescales trainable gradients so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

}  // namespace litediff
