#include "doctest.h"
#include "lpsa/simulation.hpp"

using namespace lpsa;

TEST_CASE("noiseless panels equal the latent functions") {
  for (auto model : {DgpModel::model1, DgpModel::model2}) {
    DgpSpec spec{model, 40, 30, 5, true};
    const auto d = generate(spec);
    double err = 0.0;
    for (Index i = 0; i < 40; ++i)
      for (Index t = 0; t < 30; ++t) err = std::max(err, std::abs(d.panel.x()(t, i) - eta(model, d.alpha(i), d.varpi(t))));
    CHECK(err == 0.0);
    CHECK((d.y0 - d.alpha - d.alpha.cwiseAbs2()).cwiseAbs().maxCoeff() < 1e-15);
  }
  CHECK(eta(DgpModel::model1, 0.5, 0.5) == 0.0);
  CHECK(eta(DgpModel::model2, 0.25, 0.25) == doctest::Approx(1.0));
}

TEST_CASE("generated sample moments and bookkeeping") {
  const Index n = 2000;
  const auto d = generate({DgpModel::model1, n, 5, 17, false});
  CHECK(std::abs(d.alpha.mean() - 0.5) <= 4.0 / std::sqrt(12.0 * n));
  for (Index i = 0; i < n; ++i) {
    CHECK(d.propensity(i) == treatment_probability(d.alpha(i)));
    const double y = d.sample.s()[static_cast<std::size_t>(i)] == 1 ? d.y1(i) : d.y0(i);
    CHECK(d.sample.y()(i) == y);
  }
  CHECK(d.panel.periods() == 5);
  CHECK_THROWS_AS(generate({DgpModel::model1, 1, 5, 1, false}), DataError);
}

TEST_CASE("generation is deterministic in the seed") {
  const auto a = generate({DgpModel::model2, 50, 20, 3, false});
  const auto b = generate({DgpModel::model2, 50, 20, 3, false});
  const auto c = generate({DgpModel::model2, 50, 20, 4, false});
  CHECK(a.panel.x() == b.panel.x());
  CHECK(a.sample.y() == b.sample.y());
  CHECK(a.panel.x() != c.panel.x());
}

TEST_CASE("truth constant agrees with a large Monte Carlo") {
  const double truth = true_theta01();
  CHECK(truth == doctest::Approx(0.9144962578187571).epsilon(1e-12));
  const auto mc = true_theta01_monte_carlo(10000000, 1);
  CHECK(std::abs(mc.value - truth) <= 4.0 * mc.std_error);
  CHECK(mc.std_error < 2e-4);
}

TEST_CASE("k rules") {
  CHECK(resolve_k({KRule::Kind::power, 0, 1.0, 0.8}, 500) == 144);
  CHECK(resolve_k({KRule::Kind::power, 0, 1.0, 2.0 / 3.0}, 500) == 63);
  CHECK(resolve_k({KRule::Kind::power, 0, 1.5, 0.8}, 1000) == 377);
  CHECK(resolve_k({KRule::Kind::fixed, 12, 1.0, 0.0}, 500) == 12);
  CHECK(resolve_k({KRule::Kind::power, 0, 100.0, 1.0}, 50) == 50);
  CHECK(k_rule_name({KRule::Kind::power, 0, 1.5, 0.8}) == "K=1.5n^0.8");
}

TEST_CASE("single replication") {
  const auto r = run_monte_carlo({DgpModel::model1, 100, 100, 0, false}, default_estimator_config(McBackend::local_linear),
                                 1, 9, 1);
  CHECK(r.failures == 0);
  CHECK(r.n_reps == 1);
  CHECK(r.sd == 0.0);
  CHECK(r.rmse == doctest::Approx(std::abs(r.bias)).epsilon(1e-14));
  CHECK((r.cr == 0.0 || r.cr == 1.0));
  CHECK(r.max_abs_influence_mean <= 1e-10);
}

TEST_CASE("report identities and determinism") {
  const DgpSpec spec{DgpModel::model1, 100, 100, 0, false};
  for (auto backend : {McBackend::local_linear, McBackend::local_constant}) {
    const auto cfg = default_estimator_config(backend);
    const auto a = run_monte_carlo(spec, cfg, 10, 3, 2);
    const auto b = run_monte_carlo(spec, cfg, 10, 3, 1);
    CHECK(a.failures == 0);
    CHECK(a.estimates == b.estimates);
    CHECK(a.bias == b.bias);
    CHECK(a.rmse * a.rmse == doctest::Approx(a.bias * a.bias + a.sd * a.sd).epsilon(1e-12));
    CHECK(a.max_abs_influence_mean <= 1e-10);
    CHECK(a.al > 0.0);
  }
}

TEST_CASE("dpi rule runs inside the harness") {
  auto cfg = default_estimator_config(McBackend::local_linear);
  cfg.k = {KRule::Kind::dpi, 0, 1.5, 0.8};
  const auto r = run_monte_carlo({DgpModel::model2, 120, 120, 0, false}, cfg, 3, 5, 1);
  CHECK(r.failures == 0);
  CHECK(r.mean_k >= 4.0);
  CHECK(r.mean_k <= 120.0);
}

TEST_CASE("oracle nuisances give nominal coverage") {
  const auto r = run_monte_carlo({DgpModel::model1, 2000, 2, 0, false}, default_estimator_config(McBackend::oracle),
                                 500, 2024, 0);
  CHECK(r.failures == 0);
  CHECK(r.cr >= 0.93);
  CHECK(r.cr <= 0.97);
  CHECK(r.max_abs_influence_mean <= 1e-10);
}

TEST_CASE("table layout") {
  const auto r = run_monte_carlo({DgpModel::model1, 60, 60, 0, false}, default_estimator_config(McBackend::oracle), 2, 1, 1);
  const std::string csv = mc_table_csv({r, r});
  CHECK(csv.rfind("model,backend,K_rule,BIAS,SD,RMSE,CR,AL", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
