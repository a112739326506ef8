#include "fedmuscle/models.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <iterator>
#include <ostream>

namespace fedmuscle {

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.size();
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  out.tensors.reserve(tensors.size());
  for (const auto& t : tensors) out.tensors.push_back({t.name, Matrix(t.value.rows(), t.value.cols())});
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (!tensors[i].value.same_shape(other.tensors[i].value)) return false;
  }
  return true;
}

void ParamSet::add(const ParamSet& other) {
  if (!same_layout(other)) throw ContractViolation("ParamSet::add: layout mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto dst = tensors[i].value.values();
    const auto src = other.tensors[i].value.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

void ParamSet::scale(double factor) {
  for (auto& t : tensors) {
    for (auto& v : t.value.values()) v *= factor;
  }
}

void EncoderSpec::validate() const {
  if (input_dim == 0 || output_dim == 0) throw ConfigError("encoder dims must be >= 1");
  for (auto h : hidden_dims) {
    if (h == 0) throw ConfigError("encoder hidden dims must be >= 1");
  }
  if (!linear_output) {
    if (!hidden_dims.empty()) throw ConfigError("zero-depth encoder cannot have hidden layers");
    if (input_dim != output_dim) throw ConfigError("zero-depth encoder needs input_dim == output_dim");
  }
}

std::size_t EncoderSpec::layer_count() const {
  return linear_output ? hidden_dims.size() + 1 : 0;
}

namespace {

std::vector<std::size_t> layer_widths(const EncoderSpec& spec) {
  std::vector<std::size_t> w{spec.input_dim};
  if (!spec.linear_output) return w;
  w.insert(w.end(), spec.hidden_dims.begin(), spec.hidden_dims.end());
  w.push_back(spec.output_dim);
  return w;
}

void init_uniform(Matrix& w, SeededRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
}

// y = W x + b
void affine(const Matrix& w, const Matrix& b, std::span<const double> x, std::vector<double>& y) {
  y.assign(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = b(0, r) + dot(w.row(r), x);
}

}  // namespace

Encoder::Encoder(EncoderSpec spec, SeededRng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  const auto widths = layer_widths(spec_);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    Matrix w(widths[l + 1], widths[l]);
    init_uniform(w, rng);
    params_.tensors.push_back({"encoder.layer" + std::to_string(l) + ".weight", std::move(w)});
    params_.tensors.push_back({"encoder.layer" + std::to_string(l) + ".bias", Matrix(1, widths[l + 1])});
  }
}

Encoder::Encoder(EncoderSpec spec, ParamSet params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  const auto widths = layer_widths(spec_);
  if (params_.count() != 2 * (widths.size() - 1)) {
    throw ContractViolation("Encoder: parameter count does not match spec");
  }
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto& w = params_.tensors[2 * l].value;
    const auto& b = params_.tensors[2 * l + 1].value;
    if (w.rows() != widths[l + 1] || w.cols() != widths[l] || b.rows() != 1 ||
        b.cols() != widths[l + 1]) {
      throw ContractViolation("Encoder: parameter shapes do not match spec");
    }
  }
}

ParamSet& Encoder::mutable_params() {
  ++generation_;
  return params_;
}

EncoderCache Encoder::forward(std::span<const double> x) const {
  if (x.size() != spec_.input_dim) {
    throw ContractViolation("encoder_forward: input has " + std::to_string(x.size()) +
                            " entries, expected " + std::to_string(spec_.input_dim));
  }
  EncoderCache cache;
  cache.generation = generation_;
  std::vector<double> a(x.begin(), x.end());
  const std::size_t layers = spec_.layer_count();
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> h;
    affine(params_.tensors[2 * l].value, params_.tensors[2 * l + 1].value, a, h);
    cache.layer_inputs.push_back(a);
    cache.pre_activations.push_back(h);
    if (l + 1 < layers) {
      for (auto& v : h) v = std::max(v, 0.0);
    }
    a = std::move(h);
  }
  cache.h = std::move(a);
  cache.h_norm = norm2(cache.h);
  const double denom = std::max(cache.h_norm, kNormFloor);
  cache.z = cache.h;
  for (auto& v : cache.z) v /= denom;
  return cache;
}

EncoderGrads Encoder::backward(const EncoderCache& cache, std::span<const double> grad_z) const {
  if (cache.generation != generation_ || cache.layer_inputs.size() != spec_.layer_count()) {
    throw ContractViolation("encoder_backward: cache is stale or from another encoder");
  }
  if (grad_z.size() != cache.z.size()) throw ContractViolation("encoder_backward: gradient size");

  // Normalize layer: dz/dh = (I - z zᵀ)/|h| above the floor, I/floor below it.
  std::vector<double> g(grad_z.begin(), grad_z.end());
  if (cache.h_norm >= kNormFloor) {
    const double radial = dot(cache.z, grad_z);
    for (std::size_t c = 0; c < g.size(); ++c) g[c] = (g[c] - cache.z[c] * radial) / cache.h_norm;
  } else {
    for (auto& v : g) v /= kNormFloor;
  }

  EncoderGrads out{params_.zeros_like(), {}};
  const std::size_t layers = spec_.layer_count();
  for (std::size_t l = layers; l-- > 0;) {
    const auto& w = params_.tensors[2 * l].value;
    const auto& in = cache.layer_inputs[l];
    auto& gw = out.params.tensors[2 * l].value;
    auto& gb = out.params.tensors[2 * l + 1].value;
    for (std::size_t r = 0; r < w.rows(); ++r) {
      gb(0, r) = g[r];
      auto gw_row = gw.row(r);
      for (std::size_t c = 0; c < w.cols(); ++c) gw_row[c] = g[r] * in[c];
    }
    std::vector<double> ga(w.cols(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const auto w_row = w.row(r);
      for (std::size_t c = 0; c < w.cols(); ++c) ga[c] += w_row[c] * g[r];
    }
    if (l > 0) {
      const auto& pre = cache.pre_activations[l - 1];
      for (std::size_t c = 0; c < ga.size(); ++c) {
        if (pre[c] <= 0.0) ga[c] = 0.0;
      }
    }
    g = std::move(ga);
  }
  out.input = std::move(g);
  return out;
}

Matrix Encoder::forward_batch(const Matrix& inputs, std::vector<EncoderCache>* caches) const {
  Matrix z(inputs.rows(), spec_.output_dim);
  if (caches) caches->clear();
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    auto cache = forward(inputs.row(i));
    std::copy(cache.z.begin(), cache.z.end(), z.row(i).begin());
    if (caches) caches->push_back(std::move(cache));
  }
  return z;
}

ParamSet Encoder::backward_batch(std::span<const EncoderCache> caches, const Matrix& grad_z) const {
  if (caches.size() != grad_z.rows()) throw ContractViolation("backward_batch: row count mismatch");
  ParamSet total = params_.zeros_like();
  for (std::size_t i = 0; i < caches.size(); ++i) total.add(backward(caches[i], grad_z.row(i)).params);
  return total;
}

void HeadSpec::validate() const {
  if (kind == HeadKind::classification && num_outputs < 2) {
    throw ConfigError("classification head needs at least 2 outputs");
  }
  if (num_outputs < 1) throw ConfigError("head needs at least 1 output");
}

Head::Head(HeadSpec spec, std::size_t input_dim, SeededRng& rng) : spec_(spec) {
  spec_.validate();
  Matrix w(spec_.num_outputs, input_dim);
  init_uniform(w, rng);
  params_.tensors.push_back({"head.weight", std::move(w)});
  params_.tensors.push_back({"head.bias", Matrix(1, spec_.num_outputs)});
}

Head::Head(HeadSpec spec, ParamSet params) : spec_(spec), params_(std::move(params)) {
  spec_.validate();
  if (params_.count() != 2 || params_.tensors[0].value.rows() != spec_.num_outputs ||
      params_.tensors[1].value.cols() != spec_.num_outputs) {
    throw ContractViolation("Head: parameters do not match spec");
  }
}

std::vector<double> Head::logits(std::span<const double> z) const {
  if (z.size() != input_dim()) throw ContractViolation("head: representation dimension mismatch");
  std::vector<double> out;
  affine(params_.tensors[0].value, params_.tensors[1].value, z, out);
  return out;
}

Label Head::predict(std::span<const double> z) const {
  const auto l = logits(z);
  Label label;
  if (spec_.kind == HeadKind::classification) {
    label.class_index =
        static_cast<std::size_t>(std::distance(l.begin(), std::max_element(l.begin(), l.end())));
  } else {
    label.active.resize(l.size());
    for (std::size_t k = 0; k < l.size(); ++k) label.active[k] = l[k] > 0.0 ? 1 : 0;
  }
  return label;
}

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

TaskLoss task_loss_and_grad(const Head& head, std::span<const double> z, const Label& label) {
  const auto logits = head.logits(z);
  const std::size_t c = logits.size();
  std::vector<double> dlogits(c);
  TaskLoss out;
  if (head.spec().kind == HeadKind::classification) {
    if (label.class_index >= c) {
      throw ContractViolation("task_loss: class " + std::to_string(label.class_index) +
                              " out of range for " + std::to_string(c) + " classes");
    }
    softmax(logits, dlogits);
    out.loss = log_sum_exp(logits) - logits[label.class_index];
    dlogits[label.class_index] -= 1.0;
  } else {
    if (label.active.size() != c) throw ContractViolation("task_loss: multi-label width mismatch");
    for (std::size_t k = 0; k < c; ++k) {
      const double y = label.active[k] ? 1.0 : 0.0;
      if (label.active[k] > 1) throw ContractViolation("task_loss: multi-label entries must be 0/1");
      out.loss += softplus(logits[k]) - y * logits[k];
      dlogits[k] = (sigmoid(logits[k]) - y) / static_cast<double>(c);
    }
    out.loss /= static_cast<double>(c);
  }

  const auto& w = head.params().tensors[0].value;
  out.head_grads = head.params().zeros_like();
  auto& gw = out.head_grads.tensors[0].value;
  auto& gb = out.head_grads.tensors[1].value;
  out.grad_z.assign(z.size(), 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    gb(0, k) = dlogits[k];
    auto gw_row = gw.row(k);
    const auto w_row = w.row(k);
    for (std::size_t e = 0; e < z.size(); ++e) {
      gw_row[e] = dlogits[k] * z[e];
      out.grad_z[e] += dlogits[k] * w_row[e];
    }
  }
  return out;
}

void adamw_step(OptimizerState& opt, ParamSet& params, const ParamSet& grads) {
  if (!params.same_layout(grads)) throw ContractViolation("adamw_step: gradient layout mismatch");
  for (const auto& g : grads.tensors) {
    if (!all_finite(g.value.values())) {
      throw DegenerateInput("adamw_step: non-finite gradient for parameter '" + g.name + "'");
    }
  }
  if (opt.first_moment.empty()) {
    for (const auto& p : params.tensors) {
      opt.first_moment.emplace_back(p.value.rows(), p.value.cols());
      opt.second_moment.emplace_back(p.value.rows(), p.value.cols());
    }
  }
  if (opt.first_moment.size() != params.count()) {
    throw ContractViolation("adamw_step: optimizer state does not match parameters");
  }
  const auto& cfg = opt.config;
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto p = params.tensors[i].value.values();
    const auto g = grads.tensors[i].value.values();
    auto m = opt.first_moment[i].values();
    auto v = opt.second_moment[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      p[k] -= cfg.lr * cfg.weight_decay * p[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      p[k] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

namespace {
constexpr std::string_view kCheckpointMagic{"FMCKPT\0\0", 8};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put_u32(kCheckpointVersion);
  w.put_u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put_u32(static_cast<std::uint32_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put_u32(2);
    w.put_u64(t.value.rows());
    w.put_u64(t.value.cols());
    for (double v : t.value.values()) w.put_f64(v);
  }
  const auto& bytes = w.bytes();
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_checkpoint: stream error");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), {}};
  detail::ByteReader r(bytes);
  if (r.str(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw ContractViolation("read_checkpoint: bad magic");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw ContractViolation("read_checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u32());
    if (r.u32() != 2) throw ContractViolation("read_checkpoint: only rank-2 tensors supported");
    const auto rows = r.u64();
    const auto cols = r.u64();
    if (rows * cols * 8 > r.remaining()) throw ContractViolation("read_checkpoint: truncated tensor");
    std::vector<double> data(rows * cols);
    for (auto& v : data) v = r.f64();
    t.value = Matrix(rows, cols, std::move(data));
    out.push_back(std::move(t));
  }
  if (!r.done()) throw ContractViolation("read_checkpoint: trailing bytes");
  return out;
}

}  // namespace fedmuscle
