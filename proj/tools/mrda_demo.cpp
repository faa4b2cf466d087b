// Library walkthrough: simulate segmented data with local covariate shift,
// fit the multiply robust model and the global baselines, and print test
// MSE relative to the plain boosted model.

#include <cstdint>
#include <cstdlib>
#include <iostream>

#include "mrda/mrda.hpp"

int main(int argc, char** argv) {
  using namespace mrda;
  SyntheticConfig sim;
  sim.n_train = argc > 1 ? std::atol(argv[1]) : 5000;
  sim.n_test = sim.n_train;
  sim.seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 0;
  const TrainTest data = simulate_local_covshift(sim);

  MrConfig cfg;
  cfg.seed = sim.seed;
  const MrModel mr = fit_mr(data.train, data.test, cfg);
  const GlobalModel xgb = fit_global_gbt(data.train, cfg);
  const GlobalModel dr = fit_dr(data.train, data.test, cfg, false);
  const GlobalModel dr_sf = fit_dr(data.train, data.test, cfg, true);

  const auto& test = data.test;
  const auto task = test.task;
  const Matrix baseline = predict(xgb, test.features, test.segment);
  const double base_mse = metric(test.labels, baseline, MetricKind::mse, task).value;
  auto report = [&](const char* name, const Matrix& pred) {
    const MetricValue m = metric(test.labels, pred, MetricKind::mse, task);
    std::cout << name << "\tmse " << m.value << " (" << m.se << ")\trelative " << m.value / base_mse << "\n";
  };
  std::cout << "clusters: " << mr.ensemble.clusters.m() << "\n";
  report("xgb", baseline);
  report("dr", predict(dr, test.features, test.segment));
  report("dr-sf", predict(dr_sf, test.features, test.segment));
  report("mr", predict(mr, test.features, test.segment));
  return 0;
}
