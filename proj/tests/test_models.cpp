#include "fedmuscle/models.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace fedmuscle;

namespace {

std::vector<double> flatten(const ParamSet& p) {
  std::vector<double> out;
  for (const auto& t : p.tensors) out.insert(out.end(), t.value.values().begin(), t.value.values().end());
  return out;
}

}  // namespace

TEST_CASE("zero-depth encoder normalizes its input") {
  Encoder enc({2, {}, 2, false}, ParamSet{});
  const auto c = enc.forward(std::vector<double>{3.0, 4.0});
  CHECK(c.z[0] == doctest::Approx(0.6));
  CHECK(c.z[1] == doctest::Approx(0.8));
}

TEST_CASE("encoder output has unit norm") {
  SeededRng rng(1, 1);
  Encoder enc({6, {8, 5}, 4, true}, rng);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> x(6);
    for (auto& v : x) v = rng.normal();
    const auto c = enc.forward(x);
    if (c.h_norm >= kNormFloor) CHECK(std::abs(norm2(c.z) - 1.0) <= 1e-12);
  }
}

TEST_CASE("two-layer encoder matches hand-computed algebra") {
  ParamSet p;
  p.tensors.push_back({"encoder.layer0.weight", Matrix{{1, -1}, {0.5, 2}}});
  p.tensors.push_back({"encoder.layer0.bias", Matrix{{0, -1}}});
  p.tensors.push_back({"encoder.layer1.weight", Matrix{{2, 1}, {-1, 3}}});
  p.tensors.push_back({"encoder.layer1.bias", Matrix{{0.5, 0}}});
  Encoder enc({2, {2}, 2, true}, p);
  // x = (1, 1): pre0 = (0, 1.5), relu = (0, 1.5), h = (1.5 + 0.5, 4.5) = (2, 4.5).
  const auto c = enc.forward(std::vector<double>{1.0, 1.0});
  const double n = std::sqrt(4.0 + 20.25);
  CHECK(c.h_norm == doctest::Approx(n));
  CHECK(c.z[0] == doctest::Approx(2.0 / n));
  CHECK(c.z[1] == doctest::Approx(4.5 / n));
}

TEST_CASE("radial output gradient has no input gradient") {
  Encoder enc({3, {}, 3, false}, ParamSet{});
  const std::vector<double> x{1.0, -2.0, 0.5};
  const auto c = enc.forward(x);
  const auto g = enc.backward(c, c.z);
  for (double v : g.input) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("single linear layer gradient is an outer product") {
  SeededRng rng(2, 2);
  Encoder enc({3, {}, 2, true}, rng);
  const std::vector<double> x{0.3, -0.7, 1.1};
  const auto c = enc.forward(x);
  const std::vector<double> gz{0.4, -1.2};
  const auto g = enc.backward(c, gz);
  // dL/dh = (gz - z (z.gz)) / |h|, dL/dW = dL/dh xᵀ.
  const double radial = c.z[0] * gz[0] + c.z[1] * gz[1];
  for (std::size_t r = 0; r < 2; ++r) {
    const double gh = (gz[r] - c.z[r] * radial) / c.h_norm;
    CHECK(g.params.tensors[1].value(0, r) == doctest::Approx(gh));
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(g.params.tensors[0].value(r, k) == doctest::Approx(gh * x[k]));
    }
  }
}

TEST_CASE("encoder backward matches finite differences") {
  SeededRng rng(3, 3);
  for (int t = 0; t < 20; ++t) {
    Encoder enc({2 + rng.below(4), {3 + rng.below(4)}, 2 + rng.below(3), true}, rng);
    for (auto& tensor : enc.mutable_params().tensors) {
      if (tensor.value.rows() == 1) {
        for (auto& v : tensor.value.values()) v = rng.uniform(-0.5, 0.5);
      }
    }
    std::vector<double> x(enc.spec().input_dim), probe(enc.spec().output_dim);
    for (auto& v : x) v = rng.normal();
    for (auto& v : probe) v = rng.normal();
    const auto g = enc.backward(enc.forward(x), probe);
    auto f = [&] { return dot(probe, enc.forward(x).z); };
    CHECK(oracle::max_rel_error(g.input, oracle::central_diff(x, f)) < 1e-6);
    std::vector<double> theta = flatten(enc.params());
    auto fp = [&] {
      std::size_t k = 0;
      for (auto& tensor : enc.mutable_params().tensors) {
        for (auto& v : tensor.value.values()) v = theta[k++];
      }
      return dot(probe, enc.forward(x).z);
    };
    CHECK(oracle::max_rel_error(flatten(g.params), oracle::central_diff(theta, fp)) < 1e-6);
  }
}

TEST_CASE("stale caches are rejected") {
  SeededRng rng(4, 4);
  Encoder enc({3, {}, 2, true}, rng);
  const auto c = enc.forward(std::vector<double>{1, 2, 3});
  enc.mutable_params();
  CHECK_THROWS_AS(enc.backward(c, std::vector<double>{1, 0}), ContractViolation);
}

TEST_CASE("batch forward and backward agree with per-row calls") {
  SeededRng rng(5, 5);
  Encoder enc({4, {5}, 3, true}, rng);
  Matrix x(3, 4);
  for (auto& v : x.values()) v = rng.normal();
  std::vector<EncoderCache> caches;
  const Matrix z = enc.forward_batch(x, &caches);
  Matrix gz(3, 3);
  for (auto& v : gz.values()) v = rng.normal();
  ParamSet total = enc.params().zeros_like();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::equal(z.row(i).begin(), z.row(i).end(), enc.forward(x.row(i)).z.begin()));
    total.add(enc.backward(caches[i], gz.row(i)).params);
  }
  CHECK(flatten(enc.backward_batch(caches, gz)) == flatten(total));
}

TEST_CASE("task loss examples") {
  SeededRng rng(6, 6);
  Head cls({HeadKind::classification, 5}, 3, rng);
  for (auto& t : cls.mutable_params().tensors) std::fill(t.value.values().begin(), t.value.values().end(), 0.0);
  Label l;
  l.class_index = 2;
  CHECK(task_loss_and_grad(cls, std::vector<double>{0.1, 0.2, 0.3}, l).loss ==
        doctest::Approx(std::log(5.0)));

  Head ml({HeadKind::multi_label, 4}, 3, rng);
  for (auto& t : ml.mutable_params().tensors) std::fill(t.value.values().begin(), t.value.values().end(), 0.0);
  Label m;
  m.active = {1, 0, 1, 1};
  CHECK(task_loss_and_grad(ml, std::vector<double>{0.1, 0.2, 0.3}, m).loss ==
        doctest::Approx(std::log(2.0)));
}

TEST_CASE("task loss gradients match finite differences") {
  SeededRng rng(7, 7);
  for (int t = 0; t < 20; ++t) {
    const bool multi = t % 2 == 1;
    const std::size_t c = 2 + rng.below(4);
    Head head({multi ? HeadKind::multi_label : HeadKind::classification, c}, 4, rng);
    std::vector<double> z(4);
    for (auto& v : z) v = rng.normal();
    Label label;
    if (multi) {
      for (std::size_t k = 0; k < c; ++k) label.active.push_back(rng.below(2) ? 1 : 0);
    } else {
      label.class_index = rng.below(c);
    }
    const auto tl = task_loss_and_grad(head, z, label);
    CHECK(oracle::max_rel_error(tl.grad_z, oracle::central_diff(z, [&] {
            return task_loss_and_grad(head, z, label).loss;
          })) < 1e-6);
    std::vector<double> theta = flatten(head.params());
    auto f = [&] {
      std::size_t k = 0;
      for (auto& tensor : head.mutable_params().tensors) {
        for (auto& v : tensor.value.values()) v = theta[k++];
      }
      return task_loss_and_grad(head, z, label).loss;
    };
    CHECK(oracle::max_rel_error(flatten(tl.head_grads), oracle::central_diff(theta, f)) < 1e-6);
  }
}

TEST_CASE("head rejects malformed labels") {
  SeededRng rng(8, 8);
  Head head({HeadKind::classification, 3}, 2, rng);
  Label bad;
  bad.class_index = 3;
  CHECK_THROWS(task_loss_and_grad(head, std::vector<double>{0, 1}, bad));
}

TEST_CASE("adamw with zero gradient and no decay leaves parameters alone") {
  ParamSet p;
  p.tensors.push_back({"w", Matrix{{1.5, -2.0}}});
  const ParamSet before = p;
  OptimizerState opt;
  opt.config.weight_decay = 0.0;
  adamw_step(opt, p, p.zeros_like());
  CHECK(p.tensors[0].value == before.tensors[0].value);
}

TEST_CASE("adamw first step moves by lr against the gradient sign") {
  ParamSet p;
  p.tensors.push_back({"w", Matrix{{1.0, 1.0, 1.0}}});
  ParamSet g;
  g.tensors.push_back({"w", Matrix{{0.5, -3.0, 1e-3}}});
  OptimizerState opt;
  opt.config.weight_decay = 0.0;
  adamw_step(opt, p, g);
  CHECK(p.tensors[0].value(0, 0) == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
  CHECK(p.tensors[0].value(0, 1) == doctest::Approx(1.0 + 1e-3).epsilon(1e-6));
  CHECK(p.tensors[0].value(0, 2) == doctest::Approx(1.0 - 1e-3).epsilon(1e-4));
}

TEST_CASE("adamw three-step scalar trace matches the moment recursion") {
  const AdamWConfig cfg{0.1, 0.9, 0.999, 1e-8, 0.01};
  oracle::ScalarAdamW ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  ParamSet p;
  p.tensors.push_back({"w", Matrix{{2.0}}});
  OptimizerState opt{cfg, {}, {}, 0};
  double expect = 2.0;
  for (double g : {0.5, -1.0, 2.0}) {
    ParamSet grad;
    grad.tensors.push_back({"w", Matrix{{g}}});
    adamw_step(opt, p, grad);
    expect = ref.step(expect, g);
    CHECK(std::abs(p.tensors[0].value(0, 0) - expect) < 1e-15);
  }
  CHECK(opt.step == 3);
}

TEST_CASE("adamw without decay equals plain adam over five steps") {
  const AdamWConfig cfg{0.05, 0.9, 0.999, 1e-8, 0.0};
  oracle::ScalarAdamW adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, 0.0};
  ParamSet p;
  p.tensors.push_back({"w", Matrix{{-0.3}}});
  OptimizerState opt{cfg, {}, {}, 0};
  double expect = -0.3;
  for (double g : {1.0, 0.2, -0.4, 3.0, -0.01}) {
    ParamSet grad;
    grad.tensors.push_back({"w", Matrix{{g}}});
    adamw_step(opt, p, grad);
    expect = adam.step(expect, g);
  }
  CHECK(p.tensors[0].value(0, 0) == expect);
}

TEST_CASE("adamw rejects non-finite gradients and mismatched layouts") {
  ParamSet p;
  p.tensors.push_back({"w", Matrix{{1.0}}});
  ParamSet g;
  g.tensors.push_back({"w", Matrix{{NAN}}});
  OptimizerState opt;
  CHECK_THROWS_AS(adamw_step(opt, p, g), DegenerateInput);
  ParamSet other;
  other.tensors.push_back({"v", Matrix{{1.0, 2.0}}});
  CHECK_THROWS(adamw_step(opt, p, other));
}

TEST_CASE("checkpoint round trip is exact") {
  SeededRng rng(9, 9);
  Encoder enc({5, {7}, 3, true}, rng);
  std::stringstream buf;
  write_checkpoint(buf, enc.params().tensors);
  const auto back = read_checkpoint(buf);
  REQUIRE(back.size() == enc.params().count());
  for (std::size_t k = 0; k < back.size(); ++k) {
    CHECK(back[k].name == enc.params().tensors[k].name);
    CHECK(back[k].value == enc.params().tensors[k].value);
  }
  std::stringstream full;
  write_checkpoint(full, enc.params().tensors);
  const std::string bytes = full.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS(read_checkpoint(cut));
  std::stringstream garbage("not a checkpoint at all");
  CHECK_THROWS(read_checkpoint(garbage));
}

TEST_CASE("parameter names follow the layer layout") {
  SeededRng rng(10, 10);
  Encoder enc({3, {4}, 2, true}, rng);
  REQUIRE(enc.params().count() == 4);
  CHECK(enc.params().tensors[0].name == "encoder.layer0.weight");
  CHECK(enc.params().tensors[3].name == "encoder.layer1.bias");
  const double bound = 1.0 / std::sqrt(3.0);
  for (double v : enc.params().tensors[0].value.values()) CHECK(std::abs(v) <= bound);
  for (double v : enc.params().tensors[1].value.values()) CHECK(v == 0.0);
}
