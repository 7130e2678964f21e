#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "../support/doctest_torch.hpp"

#include <cmath>
#include <random>

#include "../support/loss_oracle.hpp"
#include "abc/abc_loss.hpp"
#include "abc/errors.hpp"

using namespace abc;
namespace oc = abc::oracle;

namespace {

const SimilarityMetric kCosine{MetricKind::cosine};
const SimilarityMetric kL2{MetricKind::negative_euclidean};
const SimilarityMetric kSqL2{MetricKind::negative_squared_euclidean};
const std::array<SimilarityMetric, 3> kAllMetrics = {kCosine, kL2, kSqL2};

torch::Tensor randn(std::int64_t n, std::int64_t e, torch::Generator& gen) {
  return torch::randn({n, e}, gen, torch::kDouble);
}

double scalar(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

TEST_CASE("temperature must be positive") {
  CHECK_THROWS_AS(Temperature(0.0), DomainError);
  CHECK_THROWS_AS(Temperature(-1.0), DomainError);
  CHECK(Temperature(0.5).value() == 0.5);
}

TEST_CASE("metric names round-trip") {
  for (auto m : kAllMetrics) CHECK(SimilarityMetric::parse(m.name()) == m);
  CHECK(SimilarityMetric::parse("squared_l2") == kSqL2);
  CHECK_THROWS_AS(SimilarityMetric::parse("manhattan"), ConfigError);
  CHECK(kCosine.default_tau() == 0.1);
  CHECK(kSqL2.default_tau() == 1.0);
}

TEST_CASE("pairwise similarity") {
  SUBCASE("unit vector against itself under cosine") {
    const auto u = torch::tensor({{0.6, 0.8}}, torch::kDouble);
    CHECK(scalar(pairwise_similarity(u, u, kCosine)[0][0]) == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("3-4-5 triangle") {
    const auto u = torch::tensor({{0.0, 0.0}}, torch::kDouble);
    const auto v = torch::tensor({{3.0, 4.0}}, torch::kDouble);
    CHECK(scalar(pairwise_similarity(u, v, kL2)[0][0]) == -5.0);
    CHECK(scalar(pairwise_similarity(u, v, kSqL2)[0][0]) == -25.0);
  }
  SUBCASE("random inputs match the per-pair oracle and transpose under swap") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
    const auto u = randn(4, 3, gen);
    const auto v = randn(5, 3, gen);
    const auto um = oc::to_mat(u), vm = oc::to_mat(v);
    for (auto metric : kAllMetrics) {
      const auto s = pairwise_similarity(u, v, metric);
      REQUIRE(s.size(0) == 4);
      REQUIRE(s.size(1) == 5);
      for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 5; ++j) {
          CHECK(std::abs(scalar(s[i][j]) - oc::similarity(um[i], vm[j], metric.kind)) < 1e-12);
        }
      }
      CHECK(torch::allclose(pairwise_similarity(v, u, metric), s.transpose(0, 1), 0, 1e-14));
    }
  }
  SUBCASE("errors") {
    const auto z = torch::zeros({1, 3}, torch::kDouble);
    const auto o = torch::ones({2, 3}, torch::kDouble);
    CHECK_THROWS_AS(pairwise_similarity(z, o, kCosine), DomainError);
    CHECK_NOTHROW(pairwise_similarity(z, o, kL2));
    CHECK_THROWS_AS(pairwise_similarity(o, torch::ones({2, 4}, torch::kDouble), kL2), ContractError);
  }
}

TEST_CASE("soft nearest neighbour") {
  SUBCASE("single candidate is returned exactly") {
    const auto u = torch::tensor({0.3, -2.0}, torch::kDouble);
    const auto v = torch::tensor({{1.5, 4.0}}, torch::kDouble);
    for (double tau : {0.01, 1.0, 50.0}) {
      const auto nn = soft_nearest_neighbor(u, v, kSqL2, Temperature(tau));
      CHECK(torch::equal(nn.point, v[0]));
      CHECK(scalar(nn.weights[0]) == 1.0);
    }
  }
  SUBCASE("equal similarities give the mean") {
    // every v_j is at distance 1 from u
    const auto u = torch::tensor({0.0, 0.0}, torch::kDouble);
    const auto v = torch::tensor({{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}, {0.0, -1.0}}, torch::kDouble);
    const auto nn = soft_nearest_neighbor(u, v, kL2, Temperature(0.7));
    CHECK(torch::allclose(nn.weights, torch::full({4}, 0.25, torch::kDouble), 0, 1e-15));
    CHECK(torch::allclose(nn.point, v.mean(0), 0, 1e-15));
  }
  SUBCASE("one-dimensional worked example") {
    const auto u = torch::tensor({0.5}, torch::kDouble);
    const auto v = torch::tensor({{0.0}, {1.0}, {2.0}}, torch::kDouble);
    const auto nn = soft_nearest_neighbor(u, v, kSqL2, Temperature(1.0));
    const auto alpha = oc::soft_weights({0.5}, {{0.0}, {1.0}, {2.0}}, MetricKind::negative_squared_euclidean, 1.0);
    const auto point = oc::soft_neighbor({0.5}, {{0.0}, {1.0}, {2.0}}, MetricKind::negative_squared_euclidean, 1.0);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(scalar(nn.weights[j]) - alpha[j]) < 1e-14);
    CHECK(std::abs(scalar(nn.point[0]) - point[0]) < 1e-14);
    // rounded reference values
    CHECK(scalar(nn.weights[0]) == doctest::Approx(0.468).epsilon(1e-3));
    CHECK(scalar(nn.weights[2]) == doctest::Approx(0.063).epsilon(1e-2));
    CHECK(scalar(nn.point[0]) == doctest::Approx(0.595).epsilon(1e-3));
  }
  SUBCASE("weights are a distribution and permute with V") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    const auto u = torch::randn({4}, gen, torch::kDouble);
    const auto v = randn(6, 4, gen);
    const auto perm = torch::randperm(6, gen, torch::kLong);
    for (auto metric : kAllMetrics) {
      const auto a = soft_nearest_neighbor(u, v, metric, Temperature(0.5));
      const auto b = soft_nearest_neighbor(u, v.index_select(0, perm), metric, Temperature(0.5));
      CHECK(scalar(a.weights.sum()) == doctest::Approx(1.0).epsilon(1e-14));
      CHECK((a.weights > 0).all().item<bool>());
      CHECK(torch::allclose(a.point, b.point, 0, 1e-13));
      CHECK(torch::allclose(a.weights.index_select(0, perm), b.weights, 0, 1e-14));
    }
  }
  SUBCASE("large logits stay finite") {
    const auto u = torch::tensor({0.0}, torch::kDouble);
    const auto v = torch::tensor({{100.0}, {101.0}}, torch::kDouble);
    const auto nn = soft_nearest_neighbor(u, v, kSqL2, Temperature(0.01));
    CHECK(torch::isfinite(nn.point).all().item<bool>());
    CHECK(scalar(nn.weights[0]) == 1.0);
  }
}

TEST_CASE("correspondence loss") {
  SUBCASE("a single element gives exactly zero") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
    for (auto metric : kAllMetrics) {
      CHECK(scalar(correspondence_loss(randn(1, 3, gen), randn(4, 3, gen), metric, Temperature(0.3))) == 0.0);
    }
  }
  SUBCASE("identical rows give log n") {
    for (int n : {2, 3, 7}) {
      const auto u = torch::ones({n, 3}, torch::kDouble);
      const auto v = torch::ones({n + 2, 3}, torch::kDouble);
      for (auto metric : kAllMetrics) {
        CHECK(std::abs(scalar(correspondence_loss(u, v, metric, Temperature(1.0))) - std::log(n)) < 1e-12);
      }
    }
  }
  SUBCASE("two-point cosine example matches the scalar oracle") {
    auto u = torch::tensor({{1.0, 0.0}, {0.0, 1.0}}, torch::kDouble);
    auto v = torch::tensor({{0.9, 0.1}, {0.1, 0.9}}, torch::kDouble);
    v = v / v.norm(2, 1, true);
    const double got = scalar(correspondence_loss(u, v, kCosine, Temperature(0.1)));
    const double want = oc::correspondence(oc::to_mat(u), oc::to_mat(u), oc::to_mat(v), MetricKind::cosine, 0.1);
    CHECK(std::abs(got - want) < 1e-12);
    CHECK(got > 0.0);
  }
  SUBCASE("random instances match the oracle and are nonnegative") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(17);
    for (int trial = 0; trial < 10; ++trial) {
      for (auto metric : kAllMetrics) {
        const auto u = randn(5, 3, gen);
        const auto v = randn(4, 3, gen);
        const double got = scalar(correspondence_loss(u, v, metric, Temperature(0.8)));
        const double want =
            oc::correspondence(oc::to_mat(u), oc::to_mat(u), oc::to_mat(v), metric.kind, 0.8);
        CHECK(std::abs(got - want) < 1e-12);
        CHECK(got >= 0.0);
      }
    }
  }
  SUBCASE("well separated sets at low temperature approach zero") {
    const auto u = torch::tensor({{0.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}}, torch::kDouble);
    const auto v = u + 0.01;
    CHECK(scalar(correspondence_loss(u, v, kSqL2, Temperature(0.05))) < 1e-12);
  }
  SUBCASE("non-finite input is reported") {
    auto u = torch::ones({2, 2}, torch::kDouble);
    u[0][0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(correspondence_loss(u, torch::ones({2, 2}, torch::kDouble), kSqL2, Temperature(1.0)),
                    NumericalError);
  }
}

TEST_CASE("symmetric loss") {
  SUBCASE("identical embeddings give 2 log n") {
    for (int n : {2, 4, 8}) {
      const auto u = torch::full({n, 5}, 0.25, torch::kDouble);
      for (auto metric : kAllMetrics) {
        CHECK(std::abs(scalar(abc_loss(u, u.clone(), metric, Temperature(1.0))) - 2 * std::log(n)) < 1e-9);
      }
    }
  }
  SUBCASE("sum of both directions, symmetric in its arguments") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(23);
    for (auto metric : kAllMetrics) {
      const auto u = randn(5, 4, gen);
      const auto v = randn(5, 4, gen);
      const Temperature tau(0.6);
      const double total = scalar(abc_loss(u, v, metric, tau));
      CHECK(std::abs(total - scalar(correspondence_loss(u, v, metric, tau)) -
                     scalar(correspondence_loss(v, u, metric, tau))) < 1e-12);
      CHECK(std::abs(total - scalar(abc_loss(v, u, metric, tau))) < 1e-12);
      CHECK(std::abs(total - oc::abc(oc::to_mat(u), oc::to_mat(v), metric.kind, 0.6)) < 1e-12);
    }
  }
  SUBCASE("joint row permutations leave the loss unchanged") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(29);
    const auto u = randn(6, 3, gen);
    const auto v = randn(4, 3, gen);
    const auto pu = torch::randperm(6, gen, torch::kLong);
    const auto pv = torch::randperm(4, gen, torch::kLong);
    for (auto metric : kAllMetrics) {
      const double a = scalar(abc_loss(u, v, metric, Temperature(0.4)));
      const double b = scalar(abc_loss(u.index_select(0, pu), v.index_select(0, pv), metric, Temperature(0.4)));
      CHECK(std::abs(a - b) < 1e-12);
    }
  }
  SUBCASE("scale and temperature covary") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(31);
    const auto u = randn(5, 3, gen);
    const auto v = randn(6, 3, gen);
    for (double c : {0.1, 3.0, 25.0}) {
      CHECK(std::abs(scalar(abc_loss(u, v, kL2, Temperature(0.7))) -
                     scalar(abc_loss(c * u, c * v, kL2, Temperature(0.7 * c)))) < 1e-10);
      CHECK(std::abs(scalar(abc_loss(u, v, kSqL2, Temperature(0.7))) -
                     scalar(abc_loss(c * u, c * v, kSqL2, Temperature(0.7 * c * c)))) < 1e-10);
    }
  }
}

TEST_CASE("double-augmentation loss") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(37);
  SUBCASE("identity augmentations reduce to the plain loss") {
    for (auto metric : kAllMetrics) {
      const auto u = randn(5, 4, gen);
      const auto v = randn(7, 4, gen);
      const double plain = scalar(abc_loss(u, v, metric, Temperature(0.5)));
      const double aug = scalar(abc_loss_double_aug(u, u, v, v, metric, Temperature(0.5)));
      CHECK(std::abs(plain - aug) <= 1e-12);
    }
  }
  SUBCASE("single-element sets give zero") {
    const auto u1 = randn(1, 3, gen), u2 = randn(1, 3, gen), v1 = randn(1, 3, gen), v2 = randn(1, 3, gen);
    CHECK(scalar(abc_loss_double_aug(u1, u2, v1, v2, kSqL2, Temperature(1.0))) == 0.0);
  }
  SUBCASE("random aligned inputs match the scalar formula") {
    for (auto metric : kAllMetrics) {
      const auto u1 = randn(4, 3, gen), u2 = randn(4, 3, gen), v1 = randn(4, 3, gen), v2 = randn(4, 3, gen);
      const double got = scalar(abc_loss_double_aug(u1, u2, v1, v2, metric, Temperature(0.9)));
      const double want = oc::abc_double_aug(oc::to_mat(u1), oc::to_mat(u2), oc::to_mat(v1), oc::to_mat(v2),
                                             metric.kind, 0.9);
      CHECK(std::abs(got - want) < 1e-12);
    }
  }
  SUBCASE("misaligned augmentations are rejected") {
    CHECK_THROWS_AS(abc_loss_double_aug(randn(4, 3, gen), randn(3, 3, gen), randn(4, 3, gen), randn(4, 3, gen),
                                        kSqL2, Temperature(1.0)),
                    ContractError);
    CHECK_THROWS_AS(abc_loss_double_aug(randn(4, 3, gen), randn(4, 3, gen), randn(4, 3, gen), randn(5, 3, gen),
                                        kSqL2, Temperature(1.0)),
                    ContractError);
  }
}

TEST_CASE("gradients match central finite differences") {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(41);
  std::mt19937 sizes(41);
  for (auto metric : kAllMetrics) {
    for (int trial = 0; trial < 5; ++trial) {
      const int n = 1 + static_cast<int>(sizes() % 6), m = 1 + static_cast<int>(sizes() % 6);
      const int e = 1 + static_cast<int>(sizes() % 5);
      std::vector<torch::Tensor> inputs = {randn(n, e, gen), randn(m, e, gen)};
      for (auto& t : inputs) t.requires_grad_(true);
      abc_loss(inputs[0], inputs[1], metric, Temperature(0.7)).backward();
      std::vector<torch::Tensor> plain = {inputs[0].detach().clone(), inputs[1].detach().clone()};
      const auto fd = oc::finite_difference(
          [&](const std::vector<torch::Tensor>& x) { return scalar(abc_loss(x[0], x[1], metric, Temperature(0.7))); },
          plain, 1e-5);
      for (std::size_t a = 0; a < 2; ++a) {
        const double err = (inputs[a].grad() - fd[a]).norm().item<double>();
        const double ref = std::max(fd[a].norm().item<double>(), 1e-8);
        CHECK(err / ref < 1e-4);
      }
    }
  }
}

TEST_CASE("characteristic scale") {
  CHECK(characteristic_scale(kSqL2, Temperature(1.0)) == 1.0);
  CHECK(characteristic_scale(kL2, Temperature(0.25)) == 0.25);
  CHECK(characteristic_scale(kSqL2, Temperature(4.0)) == 2.0);
  CHECK(characteristic_scale(kCosine, Temperature(0.1)) == 0.1);
}
