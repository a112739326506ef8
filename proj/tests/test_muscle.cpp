#include "fedmuscle/muscle.hpp"
#include "fedmuscle/verify.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

using namespace fedmuscle;

namespace {

TemperatureTable uniform_table(std::size_t m, double hi = 0.2, double lo = 0.15) {
  std::vector<UserId> sel(m);
  std::iota(sel.begin(), sel.end(), 1);
  return TemperatureSchedule::uniform(m + 1, hi, lo).table_for(0, sel);
}

std::vector<Matrix> random_reps(SeededRng& rng, std::size_t users, std::size_t b, std::size_t d) {
  std::vector<Matrix> reps;
  for (std::size_t u = 0; u < users; ++u) reps.push_back(random_unit_batch(rng, b, d));
  return reps;
}

std::vector<double> to_vec(const Matrix& m) { return {m.values().begin(), m.values().end()}; }

}  // namespace

TEST_CASE("derive_lower_temperatures examples") {
  const Matrix low = derive_lower_temperatures(Matrix(3, 3, 0.2), 1);
  REQUIRE(low.rows() == 2);
  CHECK(std::abs(low(0, 1) - 1.0 / 30.0) < 1e-12);
  CHECK(low(0, 1) == low(1, 0));

  Matrix decoupled(3, 3, 0.2);
  decoupled(0, 2) = decoupled(2, 0) = INFINITY;
  decoupled(1, 2) = decoupled(2, 1) = INFINITY;
  CHECK(derive_lower_temperatures(decoupled, 2)(0, 1) == 0.2);
  CHECK_THROWS(derive_lower_temperatures(Matrix(2, 2, 0.2), 0));
}

TEST_CASE("derived temperatures are below the inputs") {
  SeededRng rng(31, 1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 3 + rng.below(4);
    Matrix hi(k, k);
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = a; b < k; ++b) hi(a, b) = hi(b, a) = rng.uniform(0.01, 5.0);
    }
    const std::size_t anchor = rng.below(k);
    const Matrix lo = derive_lower_temperatures(hi, anchor);
    for (std::size_t a = 0, ra = 0; a < k; ++a) {
      if (a == anchor) continue;
      for (std::size_t b = 0, rb = 0; b < k; ++b) {
        if (b == anchor) continue;
        if (a != b) CHECK(lo(ra, rb) < hi(a, b));
        ++rb;
      }
      ++ra;
    }
  }
}

TEST_CASE("compute_gamma examples") {
  CHECK(compute_gamma(Matrix(2, 2, 0.2), Matrix(2, 2, 0.15))(0, 1) ==
        doctest::Approx(5.0 / 3.0).epsilon(1e-14));
  CHECK(compute_gamma(Matrix(2, 2, 0.2), Matrix(2, 2, 0.2))(0, 1) == 0.0);
  CHECK(compute_gamma(Matrix(2, 2, 0.2), Matrix(2, 2, 0.1))(0, 1) == doctest::Approx(5.0));
}

TEST_CASE("compute_alpha examples") {
  std::vector<Matrix> reps{Matrix{{1, 0}}, Matrix{{1, 0}}, Matrix{{0, 1}}};
  const Matrix g(2, 2, 5.0 / 3.0);
  CHECK(compute_alpha(reps, {{1}, {0}}, Matrix(1, 1, 0.0)) == 1.0);
  CHECK(compute_alpha(reps, {{1, 2}, {0, 0}}, g) == 1.0);
  reps[2] = Matrix{{1, 0}};
  CHECK(std::abs(compute_alpha(reps, {{1, 2}, {0, 0}}, g) - std::exp(-5.0 / 3.0)) < 1e-15);
  CHECK(std::exp(-5.0 / 3.0) == doctest::Approx(0.18888).epsilon(1e-4));
}

TEST_CASE("compute_aggregate examples") {
  std::vector<Matrix> reps{Matrix{{1, 0}}, Matrix{{0.6, 0.8}}, Matrix{{-0.6, -0.8}}};
  const auto t1 = uniform_table(1);
  const auto s1 = compute_aggregate(reps, {{1}, {0}}, t1);
  CHECK(norm2(s1) == doctest::Approx(5.0));
  const auto t2 = uniform_table(2);
  const auto s2 = compute_aggregate(reps, {{1, 2}, {0, 0}}, t2);
  CHECK(s2[0] == 0.0);
  CHECK(s2[1] == 0.0);

  TemperatureSchedule sched = TemperatureSchedule::uniform(3, 0.2, 0.15);
  sched.tau_high(0, 2) = sched.tau_high(2, 0) = 0.25;
  reps[1] = Matrix{{1, 0}};
  reps[2] = Matrix{{0, 1}};
  const std::vector<UserId> sel{1, 2};
  const auto s3 = compute_aggregate(reps, {{1, 2}, {0, 0}}, sched.table_for(0, sel));
  CHECK(std::abs(norm2(s3) - std::sqrt(41.0)) < 1e-12);
}

TEST_CASE("build_package enumeration order and rows") {
  SeededRng rng(41, 1);
  const auto reps = random_reps(rng, 3, 2, 3);
  const auto table = uniform_table(2);
  const auto pkg = build_package(reps, table);
  REQUIRE(pkg.row_count() == 4);
  const std::vector<std::vector<std::size_t>> order{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(pkg.tuple_at(r).indices == order[r]);
    const auto s = compute_aggregate(reps, pkg.tuple_at(r), table);
    for (std::size_t e = 0; e < 3; ++e) CHECK(std::abs(pkg.s_matrix(r, e) - s[e]) < 1e-14);
    CHECK(std::abs(pkg.log_alpha[r] - compute_log_alpha(reps, pkg.tuple_at(r), table.gamma)) < 1e-14);
  }
  CHECK(pkg.positive_row(1) == 3);
}

TEST_CASE("build_package rows match per-tuple evaluation on larger instances") {
  SeededRng rng(43, 1);
  const auto reps = random_reps(rng, 4, 3, 5);
  const auto table = uniform_table(3);
  const auto pkg = build_package(reps, table);
  REQUIRE(pkg.row_count() == 27);
  for (std::size_t r = 0; r < pkg.row_count(); ++r) {
    const auto s = compute_aggregate(reps, pkg.tuple_at(r), table);
    for (std::size_t e = 0; e < 5; ++e) CHECK(std::abs(pkg.s_matrix(r, e) - s[e]) < 1e-12);
  }
}

TEST_CASE("orthogonal inputs give unit alpha") {
  std::vector<Matrix> reps{Matrix{{1, 0, 0}, {1, 0, 0}}, Matrix{{0, 1, 0}, {0, 1, 0}},
                           Matrix{{0, 0, 1}, {0, 0, 1}}};
  const auto pkg = build_package(reps, uniform_table(2));
  for (std::size_t r = 0; r < pkg.row_count(); ++r) CHECK(pkg.alpha(r) == 1.0);
}

TEST_CASE("muscle_loss on a fixed B=2 M=2 fixture matches enumeration") {
  const Matrix z{{1, 0}, {0.6, 0.8}};
  const Matrix y1{{0.8, 0.6}, {0, 1}};
  const Matrix y2{{1, 0}, {-0.6, 0.8}};
  std::vector<Matrix> reps{z, y1, y2};
  const auto table = uniform_table(2);
  const double ref = oracle::muscle(z, {y1, y2}, {0.2, 0.2}, 5.0 / 3.0);
  CHECK(std::abs(muscle_loss(z, build_package(reps, table)) - ref) < 1e-12);
}

TEST_CASE("muscle_loss matches enumeration oracle") {
  SeededRng rng(47, 1);
  for (std::size_t b : {2, 3, 4}) {
    for (std::size_t m : {1, 2, 3}) {
      const auto reps = random_reps(rng, m + 1, b, 6);
      const auto table = uniform_table(m);
      const std::vector<Matrix> others(reps.begin() + 1, reps.end());
      const double ref = oracle::muscle(reps[0], others, std::vector<double>(m, 0.2),
                                        m == 1 ? 0.0 : 5.0 / 3.0);
      CHECK(std::abs(muscle_loss(reps[0], build_package(reps, table)) - ref) < 1e-10);
    }
  }
}

TEST_CASE("per-sample losses average to the batch loss") {
  SeededRng rng(53, 1);
  const auto reps = random_reps(rng, 3, 4, 5);
  const auto pkg = build_package(reps, uniform_table(2));
  const auto per = muscle_loss_per_sample(reps[0], pkg);
  CHECK(std::accumulate(per.begin(), per.end(), 0.0) / 4.0 ==
        doctest::Approx(muscle_loss(reps[0], pkg)).epsilon(1e-14));
  for (double v : per) CHECK(v >= 0.0);
}

TEST_CASE("M=1 muscle loss reduces to InfoNCE") {
  SeededRng rng(59, 1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t b = 2 + rng.below(7);
    const std::size_t d = 4 + rng.below(29);
    const auto reps = random_reps(rng, 2, b, d);
    const auto pkg = build_package(reps, uniform_table(1));
    CHECK(std::abs(muscle_loss(reps[0], pkg) - infonce_loss(reps[0], reps[1], 0.2)) < 1e-12);
  }
}

TEST_CASE("InfoNCE examples") {
  const Matrix z{{1, 0}, {0, 1}, {0.6, 0.8}};
  const Matrix y{{0.8, 0.6}, {0, 1}, {-1, 0}};
  CHECK(std::abs(infonce_loss(z, y, 0.3) - oracle::infonce(z, y, 0.3)) < 1e-13);
  CHECK(infonce_loss(Matrix{{1, 0}}, Matrix{{0, 1}}, 0.2) == 0.0);
  CHECK(infonce_loss(z, z, 1e-3) < 1e-12);
}

TEST_CASE("gamma zero makes muscle equal pairwise, per sample and in the mean") {
  SeededRng rng(61, 1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 2 + rng.below(2);
    const std::size_t b = 2 + rng.below(4);
    const auto reps = random_reps(rng, m + 1, b, 4 + rng.below(8));
    const auto table = uniform_table(m, 0.2, 0.2);
    const auto pkg = build_package(reps, table);
    CHECK(std::abs(muscle_loss(reps[0], pkg) - pairwise_loss(reps[0], reps, table)) < 1e-12);
    const auto per = muscle_loss_per_sample(reps[0], pkg);
    for (std::size_t i = 0; i < b; ++i) {
      double sum = 0.0;
      for (std::size_t k = 1; k <= m; ++k) {
        Matrix zi(1, reps[0].cols()), yi(b, reps[0].cols());
        std::copy_n(reps[0].row(i).begin(), reps[0].cols(), zi.row(0).begin());
        yi = reps[k];
        double den = 0.0;
        for (std::size_t j = 0; j < b; ++j) den += std::exp(oracle::dotp(zi, 0, yi, j) / 0.2);
        sum -= std::log(std::exp(oracle::dotp(zi, 0, yi, i) / 0.2) / den);
      }
      CHECK(std::abs(per[i] - sum) < 1e-12);
    }
  }
}

TEST_CASE("pairwise loss equals summed InfoNCE") {
  SeededRng rng(67, 1);
  const auto reps = random_reps(rng, 3, 5, 6);
  const auto table = uniform_table(2);
  CHECK(std::abs(pairwise_loss(reps[0], reps, table) -
                 (oracle::infonce(reps[0], reps[1], 0.2) + oracle::infonce(reps[0], reps[2], 0.2))) <
        1e-12);
  const auto one = uniform_table(1);
  CHECK(pairwise_loss(reps[0], reps, one) == doctest::Approx(infonce_loss(reps[0], reps[1], 0.2)));
}

TEST_CASE("single-sample batches give zero loss and gradient") {
  SeededRng rng(71, 1);
  const auto reps = random_reps(rng, 3, 1, 4);
  const auto table = uniform_table(2);
  const auto pkg = build_package(reps, table);
  const auto lg = muscle_loss_and_grad(reps[0], pkg);
  CHECK(lg.loss == 0.0);
  for (double v : lg.grad.values()) CHECK(v == 0.0);
  CHECK(pairwise_loss(reps[0], reps, table) == 0.0);
  CHECK(gramian_loss(reps[0], reps, table.members, 0.2) == 0.0);
}

TEST_CASE("identical package rows give exactly zero gradient") {
  SeededRng rng(73, 1);
  std::vector<Matrix> reps{random_unit_batch(rng, 3, 4)};
  Matrix same(3, 4);
  for (std::size_t i = 0; i < 3; ++i) same(i, 0) = 1.0;
  reps.push_back(same);
  reps.push_back(same);
  const auto pkg = build_package(reps, uniform_table(2));
  const Matrix g = muscle_loss_grad(reps[0], pkg);
  for (double v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("muscle gradient matches finite differences") {
  SeededRng rng(79, 1);
  for (int t = 0; t < 20; ++t) {
    const std::size_t m = 1 + rng.below(3);
    auto reps = random_reps(rng, m + 1, 2 + rng.below(3), 3 + rng.below(5));
    const auto pkg = build_package(reps, uniform_table(m, 0.5, 0.4));
    const auto g = to_vec(muscle_loss_grad(reps[0], pkg));
    std::vector<double> x = to_vec(reps[0]);
    Matrix a = reps[0];
    const auto num = oracle::central_diff(x, [&] {
      std::copy(x.begin(), x.end(), a.values().begin());
      return muscle_loss(a, pkg);
    });
    CHECK(oracle::max_rel_error(g, num) < 1e-6);
  }
}

TEST_CASE("InfoNCE, pairwise and gramian gradients match finite differences") {
  SeededRng rng(83, 1);
  for (int t = 0; t < 10; ++t) {
    auto reps = random_reps(rng, 3, 3 + rng.below(2), 5);
    const auto table = uniform_table(2, 0.5, 0.4);
    Matrix a = reps[0];
    std::vector<double> x = to_vec(a);
    auto eval = [&](auto&& loss) {
      return oracle::central_diff(x, [&] {
        std::copy(x.begin(), x.end(), a.values().begin());
        return loss(a);
      });
    };
    const auto gi = to_vec(infonce_loss_and_grad(reps[0], reps[1], 0.5).grad);
    CHECK(oracle::max_rel_error(gi, eval([&](const Matrix& z) { return infonce_loss(z, reps[1], 0.5); })) < 1e-6);
    const auto gp = to_vec(pairwise_loss_and_grad(reps[0], reps, table).grad);
    CHECK(oracle::max_rel_error(gp, eval([&](const Matrix& z) { return pairwise_loss(z, reps, table); })) < 1e-6);
    const auto gg = to_vec(gramian_loss_and_grad(reps[0], reps, table.members, 0.5).grad);
    CHECK(oracle::max_rel_error(gg, eval([&](const Matrix& z) {
            return gramian_loss(z, reps, table.members, 0.5);
          })) < 1e-6);
  }
}

TEST_CASE("lower cross similarity raises alpha") {
  SeededRng rng(89, 1);
  const Matrix gamma(2, 2, 5.0 / 3.0);
  for (int t = 0; t < 50; ++t) {
    auto reps = random_reps(rng, 3, 2, 5);
    const TupleIndex tup{{1, 2}, {0, 1}};
    const double before = compute_alpha(reps, tup, gamma);
    auto row = reps[2].row(1);
    const auto other = reps[1].row(0);
    for (std::size_t e = 0; e < row.size(); ++e) row[e] -= 0.2 * other[e];
    CHECK(compute_alpha(reps, tup, gamma) > before);
  }
}

TEST_CASE("loss is invariant to a shared sample permutation") {
  SeededRng rng(97, 1);
  for (int t = 0; t < 20; ++t) {
    const std::size_t b = 2 + rng.below(5);
    auto reps = random_reps(rng, 3, b, 6);
    std::vector<std::size_t> perm(b);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    auto permuted = reps;
    for (std::size_t u = 0; u < 3; ++u) {
      for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(reps[u].row(perm[i]).begin(), 6, permuted[u].row(i).begin());
      }
    }
    const auto table = uniform_table(2);
    CHECK(std::abs(muscle_loss(reps[0], build_package(reps, table)) -
                   muscle_loss(permuted[0], build_package(permuted, table))) < 1e-12);
  }
}

TEST_CASE("all losses are nonnegative") {
  SeededRng rng(101, 1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = 1 + rng.below(3);
    auto reps = random_reps(rng, m + 1, 1 + rng.below(5), 4 + rng.below(5));
    const auto table = uniform_table(m);
    CHECK(muscle_loss(reps[0], build_package(reps, table)) >= -1e-12);
    CHECK(pairwise_loss(reps[0], reps, table) >= -1e-12);
    CHECK(gramian_loss(reps[0], reps, table.members, 0.2) >= -1e-12);
    CHECK(infonce_loss(reps[0], reps[1], 0.2) >= -1e-12);
  }
}

TEST_CASE("large gamma stays finite") {
  SeededRng rng(103, 1);
  const auto reps = random_reps(rng, 4, 4, 3);
  const auto table = uniform_table(3, 0.2, 0.002);
  CHECK(std::isfinite(muscle_loss(reps[0], build_package(reps, table))));
}

TEST_CASE("gramian examples") {
  const std::size_t b = 4;
  std::vector<Matrix> reps(3, Matrix(b, 8));
  for (std::size_t u = 0; u < 3; ++u) {
    for (std::size_t i = 0; i < b; ++i) reps[u](i, u) = 1.0;
  }
  const std::vector<UserId> members{1, 2};
  CHECK(std::abs(gramian_loss(reps[0], reps, members, 0.2) - std::log(4.0)) < 1e-9);

  const Matrix dup{{1, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  CHECK(gramian_volume(dup) == 0.0);
  CHECK(gramian_volume(Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}) == doctest::Approx(1.0));

  std::vector<Matrix> small(3, Matrix(2, 2));
  const std::vector<UserId> two{1, 2};
  CHECK_THROWS_AS(gramian_loss(small[0], small, two, 0.2), ConfigError);
}

TEST_CASE("gramian positive with a duplicated vector has the largest logit") {
  SeededRng rng(107, 1);
  auto reps = random_reps(rng, 3, 4, 6);
  reps[1] = reps[0];
  Matrix u(3, 6);
  for (std::size_t k = 0; k < 3; ++k) std::copy_n(reps[k].row(0).begin(), 6, u.row(k).begin());
  CHECK(gramian_volume(u) < 1e-7);
  // Every positive logit is 0, the maximum of -Vol/tau, so each term is below ln B.
  const std::vector<UserId> members{1, 2};
  CHECK(gramian_loss(reps[0], reps, members, 0.2) < std::log(4.0));
}

TEST_CASE("gramian loss matches determinant oracle on a B=3 fixture") {
  const Matrix z{{1, 0, 0, 0}, {0.6, 0.8, 0, 0}, {0, 0, 1, 0}};
  const Matrix y1{{0, 1, 0, 0}, {0.8, 0, 0.6, 0}, {0, 0, 0.6, 0.8}};
  const Matrix y2{{0, 0, 0, 1}, {0, 0.6, 0, 0.8}, {0.6, 0.8, 0, 0}};
  std::vector<Matrix> reps{z, y1, y2};
  const std::vector<UserId> members{1, 2};
  CHECK(std::abs(gramian_loss(z, reps, members, 0.2) - oracle::gramian(z, {y1, y2}, 0.2)) < 1e-12);
}

TEST_CASE("mi_bound_gap examples") {
  CHECK(mi_bound_gap(2.0 * std::log(64.0), 64, 2) == 0.0);
  SeededRng rng(109, 1);
  std::vector<Matrix> reps;
  const Matrix base = random_unit_batch(rng, 16, 8);
  for (int u = 0; u < 3; ++u) reps.push_back(base);
  const auto table = uniform_table(2, 0.05, 0.04);
  const double loss = muscle_loss(reps[0], build_package(reps, table));
  CHECK(mi_bound_gap(loss, 16, 2) > 1.0);
}

TEST_CASE("independent representations keep the bound near zero") {
  SeededRng rng(113, 1);
  double total = 0.0;
  const int batches = 200;
  const auto table = uniform_table(2);
  for (int t = 0; t < batches; ++t) {
    const auto reps = random_reps(rng, 3, 64, 256);
    total += muscle_loss(reps[0], build_package(reps, table));
  }
  const double gap = mi_bound_gap(total / batches, 64, 2);
  CHECK(gap >= -0.5);
  CHECK(gap <= 0.05);
}

TEST_CASE("non-finite inputs are reported") {
  std::vector<Matrix> reps{Matrix{{1, 0}, {0, 1}}, Matrix{{NAN, 0}, {0, 1}}};
  CHECK_THROWS(muscle_loss(reps[0], build_package(reps, uniform_table(1))));
}
