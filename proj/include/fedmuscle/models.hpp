#pragma once

#include "fedmuscle/numerics.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace fedmuscle {

struct NamedTensor {
  std::string name;
  Matrix value;
};

/// Ordered list of named parameter (or gradient) tensors.
struct ParamSet {
  std::vector<NamedTensor> tensors;

  std::size_t count() const { return tensors.size(); }
  std::size_t scalar_count() const;
  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  void add(const ParamSet& other);
  void scale(double factor);
  bool same_layout(const ParamSet& other) const;
};

struct EncoderSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 0;
  /// false with no hidden layers gives the zero-depth encoder: identity then
  /// normalize (input_dim must equal output_dim).
  bool linear_output = true;

  void validate() const;
  std::size_t layer_count() const;
};

struct EncoderCache {
  std::uint64_t generation = 0;
  /// Input to each linear layer.
  std::vector<std::vector<double>> layer_inputs;
  /// Pre-activation output of each linear layer.
  std::vector<std::vector<double>> pre_activations;
  /// Vector fed to the normalization layer and its norm.
  std::vector<double> h;
  double h_norm = 0.0;
  std::vector<double> z;
};

struct EncoderGrads {
  ParamSet params;
  std::vector<double> input;
};

/// MLP (linear + ReLU blocks, final linear) followed by unit normalization.
class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderSpec spec, SeededRng& rng);
  Encoder(EncoderSpec spec, ParamSet params);

  const EncoderSpec& spec() const { return spec_; }
  const ParamSet& params() const { return params_; }
  /// Mutable access invalidates every cache produced so far.
  ParamSet& mutable_params();
  std::uint64_t generation() const { return generation_; }

  EncoderCache forward(std::span<const double> x) const;
  EncoderGrads backward(const EncoderCache& cache, std::span<const double> grad_z) const;

  /// Row-wise forward; returns the B×d representation matrix.
  Matrix forward_batch(const Matrix& inputs, std::vector<EncoderCache>* caches = nullptr) const;
  /// Parameter gradient accumulated over rows of grad_z.
  ParamSet backward_batch(std::span<const EncoderCache> caches, const Matrix& grad_z) const;

 private:
  EncoderSpec spec_;
  ParamSet params_;
  std::uint64_t generation_ = 0;
};

enum class HeadKind { classification, multi_label };

struct HeadSpec {
  HeadKind kind = HeadKind::classification;
  std::size_t num_outputs = 2;

  void validate() const;
};

/// Classification labels use `class_index`; multi-label uses `active` (0/1 per output).
struct Label {
  std::size_t class_index = 0;
  std::vector<std::uint8_t> active;

  friend bool operator==(const Label&, const Label&) = default;
};

/// Linear prediction head on top of the representation z.
class Head {
 public:
  Head() = default;
  Head(HeadSpec spec, std::size_t input_dim, SeededRng& rng);
  Head(HeadSpec spec, ParamSet params);

  const HeadSpec& spec() const { return spec_; }
  const ParamSet& params() const { return params_; }
  ParamSet& mutable_params() { return params_; }
  std::size_t input_dim() const { return params_.tensors.at(0).value.cols(); }

  std::vector<double> logits(std::span<const double> z) const;
  Label predict(std::span<const double> z) const;

 private:
  HeadSpec spec_;
  ParamSet params_;
};

struct TaskLoss {
  double loss = 0.0;
  ParamSet head_grads;
  std::vector<double> grad_z;
};

/// Softmax cross-entropy (classification) or mean per-output logistic loss
/// (multi-label), with gradients for the head and for z.
TaskLoss task_loss_and_grad(const Head& head, std::span<const double> z, const Label& label);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  AdamWConfig config;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;
};

/// Decoupled weight decay: p <- p - lr*wd*p, then the bias-corrected Adam step.
void adamw_step(OptimizerState& opt, ParamSet& params, const ParamSet& grads);

/// Versioned little-endian checkpoint of named 64-bit tensors.
void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(std::istream& in);

}  // namespace fedmuscle
