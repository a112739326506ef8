#include "fedmuscle/verify.hpp"

#include "fedmuscle/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fedmuscle {

VerifySuite parse_suite(const std::string& name) {
  if (name == "identities") return VerifySuite::identities;
  if (name == "gradients") return VerifySuite::gradients;
  if (name == "oracle") return VerifySuite::oracle;
  if (name == "bound") return VerifySuite::bound;
  throw ConfigError("unknown verify suite '" + name + "' (identities|gradients|oracle|bound)");
}

std::string to_string(VerifySuite suite) {
  switch (suite) {
    case VerifySuite::identities: return "identities";
    case VerifySuite::gradients: return "gradients";
    case VerifySuite::oracle: return "oracle";
    case VerifySuite::bound: return "bound";
  }
  return "unknown";
}

Matrix random_unit_batch(SeededRng& rng, std::size_t rows, std::size_t dim) {
  Matrix m(rows, dim);
  for (std::size_t i = 0; i < rows; ++i) {
    auto r = m.row(i);
    for (auto& v : r) v = rng.normal();
    const auto n = l2_normalize(r);
    std::copy(n.unit.begin(), n.unit.end(), r.begin());
  }
  return m;
}

namespace {

struct Instance {
  std::vector<Matrix> reps;  // reps[0] is the anchor
  TemperatureTable table;
};

std::size_t pick(SeededRng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

Matrix random_tau_table(SeededRng& rng, std::size_t k, double lo, double hi) {
  Matrix t(k, k);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = a; b < k; ++b) t(a, b) = t(b, a) = rng.uniform(lo, hi);
  }
  return t;
}

Instance random_instance(SeededRng& rng, std::size_t b, std::size_t d, std::size_t m,
                         double tau_high, double tau_low) {
  Instance in;
  for (std::size_t u = 0; u <= m; ++u) in.reps.push_back(random_unit_batch(rng, b, d));
  std::vector<UserId> sel(m);
  std::iota(sel.begin(), sel.end(), 1);
  in.table = TemperatureSchedule::uniform(m + 1, tau_high, tau_low).table_for(0, sel);
  return in;
}

Matrix corrupted_gamma(const Matrix& tau_high, const Matrix& tau_low) {
  Matrix g(tau_high.rows(), tau_high.cols());
  for (std::size_t a = 0; a < g.rows(); ++a) {
    for (std::size_t b = 0; b < g.cols(); ++b) g(a, b) = 1.0 / tau_low(a, b) + 1.0 / tau_high(a, b);
  }
  return g;
}

Matrix member_block(const Matrix& tau_high) {
  const std::size_t m = tau_high.rows() - 1;
  Matrix out(m, m);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b) out(a, b) = tau_high(a + 1, b + 1);
  }
  return out;
}

// Direct evaluation of the batch-mean loss by enumerating every tuple and
// exponentiating each term; shares no code with build_package/muscle_loss.
double naive_muscle_loss(const Instance& in) {
  const auto& z = in.reps;
  const std::size_t b = z[0].rows();
  const std::size_t m = in.table.m();
  const std::size_t rows = static_cast<std::size_t>(std::pow(b, m) + 0.5);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<std::size_t> j(m);
      std::size_t rest = r;
      for (std::size_t a = m; a-- > 0;) {
        j[a] = rest % b;
        rest /= b;
      }
      double cross = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t c = 0; c < m; ++c) {
          if (a == c) continue;
          double dp = 0.0;
          for (std::size_t e = 0; e < z[0].cols(); ++e) dp += z[a + 1](j[a], e) * z[c + 1](j[c], e);
          cross += in.table.gamma(a, c) * dp;
        }
      }
      double sim = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t e = 0; e < z[0].cols(); ++e) {
          sim += z[0](i, e) * z[a + 1](j[a], e) / in.table.tau_high(0, a + 1);
        }
      }
      const double term = std::exp(-0.5 * cross) * std::exp(sim);
      den += term;
      if (std::all_of(j.begin(), j.end(), [&](std::size_t v) { return v == i; })) num = term;
    }
    total += -std::log(num / den);
  }
  return total / static_cast<double>(b);
}

PropertyResult check(std::string name, double measured, double tolerance, bool passed,
                     std::string detail = {}) {
  return {std::move(name), measured, tolerance, passed, std::move(detail)};
}

double max_rel_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    diff = std::max(diff, std::abs(analytic[k] - numeric[k]));
    scale = std::max(scale, std::abs(numeric[k]));
  }
  return diff / std::max(scale, 1e-12);
}

template <typename F>
std::vector<double> central_differences(std::span<double> x, F&& f, double h) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double keep = x[k];
    x[k] = keep + h;
    const double up = f();
    x[k] = keep - h;
    const double down = f();
    x[k] = keep;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

std::vector<PropertyResult> identities(const VerifyOptions& opt) {
  std::vector<PropertyResult> out;
  SeededRng rng(opt.seed, stream_id(0x5601));
  auto gamma_fn = opt.corrupt_gamma_sign ? corrupted_gamma : compute_gamma;

  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto in = random_instance(rng, pick(rng, 2, 8), pick(rng, 4, 32), 1, 0.2, 0.15);
    const auto pkg = build_package(in.reps, in.table);
    worst = std::max(worst, std::abs(muscle_loss(in.reps[0], pkg) -
                                     infonce_loss(in.reps[0], in.reps[1], in.table.anchor_tau(0))));
  }
  out.push_back(check("infonce_reduction", worst, 1e-12, worst < 1e-12, "M=1, 100 instances"));

  worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = pick(rng, 2, 3);
    auto in = random_instance(rng, pick(rng, 2, 5), pick(rng, 4, 16), m, 0.2, 0.2);
    in.table.gamma = gamma_fn(member_block(in.table.tau_high), in.table.tau_low);
    const auto pkg = build_package(in.reps, in.table);
    worst = std::max(worst, std::abs(muscle_loss(in.reps[0], pkg) -
                                     pairwise_loss(in.reps[0], in.reps, in.table)));
  }
  out.push_back(check("pairwise_equivalence", worst, 1e-12, worst < 1e-12,
                      "gamma == 0, M in {2,3}, 100 instances"));

  {
    const auto low = derive_lower_temperatures(Matrix(3, 3, 0.2), 2);
    const double err = std::abs(low(0, 1) - 1.0 / 30.0);
    out.push_back(check("temperature_recursion_uniform", err, 1e-12, err < 1e-12,
                        "tau^(3)=0.2 gives tau^(2)=1/30"));
    double max_margin = -INFINITY;
    for (int t = 0; t < 100; ++t) {
      const std::size_t k = pick(rng, 3, 6);
      const auto high = random_tau_table(rng, k, 0.05, 2.0);
      const std::size_t anchor = pick(rng, 0, k - 1);
      const auto derived = derive_lower_temperatures(high, anchor);
      std::size_t ra = 0;
      for (std::size_t a = 0; a < k; ++a) {
        if (a == anchor) continue;
        std::size_t rb = 0;
        for (std::size_t b = 0; b < k; ++b) {
          if (b == anchor) continue;
          if (a != b) max_margin = std::max(max_margin, derived(ra, rb) - high(a, b));
          ++rb;
        }
        ++ra;
      }
    }
    out.push_back(check("temperature_ordering", max_margin, 0.0, max_margin < 0.0,
                        "max(tau_low - tau_high) over 100 random tables"));
  }

  {
    const double g = gamma_fn(Matrix(2, 2, 0.2), Matrix(2, 2, 0.15))(0, 1);
    const double err = std::abs(g - 5.0 / 3.0);
    out.push_back(check("gamma_reported_temperatures", err, 1e-12, err < 1e-12,
                        "tau_high=0.2, tau_low=0.15 gives gamma=5/3"));
  }

  {
    double min_loss = INFINITY;
    double b1 = 0.0;
    for (int t = 0; t < 50; ++t) {
      const std::size_t m = pick(rng, 1, 3);
      const auto in = random_instance(rng, pick(rng, 1, 5), pick(rng, 4, 12), m, 0.2, 0.15);
      const auto pkg = build_package(in.reps, in.table);
      const double lm = muscle_loss(in.reps[0], pkg);
      const double lp = pairwise_loss(in.reps[0], in.reps, in.table);
      const double lg = gramian_loss(in.reps[0], in.reps, in.table.members, 0.2);
      min_loss = std::min({min_loss, lm, lp, lg});
      if (in.reps[0].rows() == 1) b1 = std::max({b1, std::abs(lm), std::abs(lp), std::abs(lg)});
    }
    out.push_back(check("losses_nonnegative", -min_loss, 1e-12, min_loss >= -1e-12));
    out.push_back(check("single_sample_loss_zero", b1, 0.0, b1 == 0.0));
  }

  {
    // Pull one cross pair of a non-anchor tuple apart and watch alpha grow.
    bool ok = true;
    double smallest_gain = INFINITY;
    for (int t = 0; t < 50; ++t) {
      auto in = random_instance(rng, 3, 6, 2, 0.2, 0.15);
      TupleIndex tup{in.table.members, {0, 1}};
      const double before = compute_alpha(in.reps, tup, in.table.gamma);
      auto row = in.reps[2].row(1);
      const auto other = in.reps[1].row(0);
      for (std::size_t e = 0; e < row.size(); ++e) row[e] -= 0.3 * other[e];
      const double after = compute_alpha(in.reps, tup, in.table.gamma);
      smallest_gain = std::min(smallest_gain, after - before);
      ok = ok && after > before;
    }
    out.push_back(check("alpha_monotone_in_dissimilarity", -smallest_gain, 0.0, ok,
                        "lower cross dot product must raise alpha"));
  }

  {
    double worst_perm = 0.0;
    for (int t = 0; t < 20; ++t) {
      const std::size_t b = pick(rng, 2, 6);
      const auto in = random_instance(rng, b, 8, 2, 0.2, 0.15);
      std::vector<std::size_t> perm(b);
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm);
      auto permuted = in;
      for (std::size_t u = 0; u < in.reps.size(); ++u) {
        for (std::size_t i = 0; i < b; ++i) {
          std::copy_n(in.reps[u].row(perm[i]).begin(), 8, permuted.reps[u].row(i).begin());
        }
      }
      const double a = muscle_loss(in.reps[0], build_package(in.reps, in.table));
      const double p = muscle_loss(permuted.reps[0], build_package(permuted.reps, permuted.table));
      worst_perm = std::max(worst_perm, std::abs(a - p));
    }
    out.push_back(check("sample_permutation_invariance", worst_perm, 1e-12, worst_perm < 1e-12));
  }

  {
    const std::size_t b = 4;
    std::vector<Matrix> reps(3, Matrix(b, 8));
    for (std::size_t u = 0; u < 3; ++u) {
      for (std::size_t i = 0; i < b; ++i) reps[u](i, u) = 1.0;
    }
    const std::vector<UserId> members{1, 2};
    const double err = std::abs(gramian_loss(reps[0], reps, members, 0.2) - std::log(4.0));
    out.push_back(check("gramian_orthonormal_uniform", err, 1e-9, err < 1e-9, "loss == ln B"));
  }
  return out;
}

std::vector<PropertyResult> gradients(const VerifyOptions& opt) {
  std::vector<PropertyResult> out;
  SeededRng rng(opt.seed, stream_id(0x5602));
  constexpr double h = 1e-5;
  constexpr double tol = 1e-6;

  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    auto in = random_instance(rng, pick(rng, 2, 4), pick(rng, 3, 8), pick(rng, 1, 3), 0.5, 0.4);
    const auto pkg = build_package(in.reps, in.table);
    Matrix anchor = in.reps[0];
    const Matrix g = muscle_loss_grad(anchor, pkg);
    const auto num = central_differences(anchor.values(), [&] { return muscle_loss(anchor, pkg); }, h);
    worst = std::max(worst, max_rel_error(g.values(), num));
  }
  out.push_back(check("muscle_loss_grad", worst, tol, worst < tol, "20 instances, h=1e-5"));

  worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    std::vector<std::size_t> hidden;
    for (std::size_t l = 0, n = pick(rng, 0, 2); l < n; ++l) hidden.push_back(pick(rng, 3, 7));
    Encoder enc({pick(rng, 2, 6), hidden, pick(rng, 2, 5), true}, rng);
    // Random biases keep pre-activations off the ReLU kink at exactly zero.
    for (auto& t : enc.mutable_params().tensors) {
      if (t.value.rows() == 1) {
        for (auto& v : t.value.values()) v = rng.uniform(-0.5, 0.5);
      }
    }
    std::vector<double> x(enc.spec().input_dim), probe(enc.spec().output_dim);
    for (auto& v : x) v = rng.normal();
    for (auto& v : probe) v = rng.normal();
    const auto cache = enc.forward(x);
    const auto grads = enc.backward(cache, probe);
    auto objective = [&] { return dot(probe, enc.forward(x).z); };
    std::vector<double> analytic = grads.input;
    std::vector<double> numeric = central_differences(std::span<double>(x), objective, h);
    for (std::size_t p = 0; p < enc.params().count(); ++p) {
      const auto a = grads.params.tensors[p].value.values();
      const auto n = central_differences(enc.mutable_params().tensors[p].value.values(), objective, h);
      analytic.insert(analytic.end(), a.begin(), a.end());
      numeric.insert(numeric.end(), n.begin(), n.end());
    }
    worst = std::max(worst, max_rel_error(analytic, numeric));
  }
  out.push_back(check("encoder_backward", worst, tol, worst < tol, "20 random networks"));

  worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const bool multi = t % 2 == 1;
    const std::size_t c = pick(rng, 2, 6);
    const std::size_t d = pick(rng, 2, 6);
    Head head({multi ? HeadKind::multi_label : HeadKind::classification, c}, d, rng);
    std::vector<double> z(d);
    for (auto& v : z) v = rng.normal();
    Label label;
    if (multi) {
      for (std::size_t k = 0; k < c; ++k) label.active.push_back(rng.below(2) ? 1 : 0);
    } else {
      label.class_index = rng.below(c);
    }
    const auto tl = task_loss_and_grad(head, z, label);
    auto objective = [&] { return task_loss_and_grad(head, z, label).loss; };
    std::vector<double> analytic = tl.grad_z;
    std::vector<double> numeric = central_differences(std::span<double>(z), objective, h);
    for (std::size_t p = 0; p < 2; ++p) {
      const auto a = tl.head_grads.tensors[p].value.values();
      const auto n = central_differences(head.mutable_params().tensors[p].value.values(), objective, h);
      analytic.insert(analytic.end(), a.begin(), a.end());
      numeric.insert(numeric.end(), n.begin(), n.end());
    }
    worst = std::max(worst, max_rel_error(analytic, numeric));
  }
  out.push_back(check("task_loss_grad", worst, tol, worst < tol, "20 heads, both kinds"));
  return out;
}

std::vector<PropertyResult> oracle(const VerifyOptions& opt) {
  std::vector<PropertyResult> out;
  SeededRng rng(opt.seed, stream_id(0x5603));
  auto gamma_fn = opt.corrupt_gamma_sign ? corrupted_gamma : compute_gamma;
  for (std::size_t b : {2, 3, 4}) {
    for (std::size_t m : {2, 3}) {
      auto in = random_instance(rng, b, 6, m, 0.2, 0.15);
      in.table.gamma = gamma_fn(member_block(in.table.tau_high), in.table.tau_low);
      const double fast = muscle_loss(in.reps[0], build_package(in.reps, in.table));
      // The oracle always uses the true gamma.
      auto truth = in;
      truth.table.gamma = compute_gamma(member_block(in.table.tau_high), in.table.tau_low);
      const double err = std::abs(fast - naive_muscle_loss(truth));
      out.push_back(check("enumeration_B" + std::to_string(b) + "_M" + std::to_string(m), err,
                          1e-10, err < 1e-10));
    }
  }
  return out;
}

std::vector<PropertyResult> bound(const VerifyOptions& opt) {
  constexpr std::size_t b = 64, m = 2, d = 256, batches = 200;
  SeededRng rng(opt.seed, stream_id(0x5604));
  double total = 0.0;
  for (std::size_t t = 0; t < batches; ++t) {
    const auto in = random_instance(rng, b, d, m, 0.2, 0.15);
    total += muscle_loss(in.reps[0], build_package(in.reps, in.table));
  }
  const double mean = total / batches;
  const double reference = m * std::log(static_cast<double>(b));
  const double rel = std::abs(mean - reference) / reference;
  const double gap = mi_bound_gap(mean, b, m);
  return {
      check("mean_loss_vs_M_lnB", rel, 0.05, rel <= 0.05,
            "mean loss " + std::to_string(mean) + " vs " + std::to_string(reference)),
      check("mi_bound_gap_independent", gap, 0.05, gap <= 0.05, "certified bound for I = 0"),
  };
}

}  // namespace

std::vector<PropertyResult> run_verify_suite(VerifySuite suite, const VerifyOptions& options) {
  switch (suite) {
    case VerifySuite::identities: return identities(options);
    case VerifySuite::gradients: return gradients(options);
    case VerifySuite::oracle: return oracle(options);
    case VerifySuite::bound: return bound(options);
  }
  return {};
}

}  // namespace fedmuscle
