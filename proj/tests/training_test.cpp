#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "dstgtn/training.hpp"

namespace dstgtn {
namespace {

using T64 = Tensor<double>;

Dataset small_dataset(std::size_t steps = 160, std::uint64_t seed = 3) {
  SyntheticConfig cfg;
  cfg.nodes = 3;
  cfg.steps = steps;
  cfg.seed = seed;
  cfg.lag = 2;
  return generate_synthetic(cfg).dataset;
}

ModelConfig micro(std::size_t nodes = 3) {
  ModelConfig c;
  c.nodes = nodes;
  c.d = c.d1 = 2;
  c.d2 = 4;
  c.heads = 2;
  c.temporal_layers = c.dstm_layers = 1;
  return c;
}

TEST(MaeLoss, Examples) {
  auto ones = T64::full({2}, 1.0);
  EXPECT_EQ(mae_loss(T64({2}, {1, 2}), T64({2}, {1, 2}), ones).item(), 0.0);
  EXPECT_EQ(mae_loss(T64({2}, {1, 2}), T64({2}, {2, 4}), ones).item(), 1.5);
  const double masked = mae_loss(T64({2}, {1, 2}), T64({2}, {2, 4}), T64({2}, {1, 0})).item();
  EXPECT_LT(masked, 1.5);
  EXPECT_EQ(masked, 1.0);
}

TEST(MaeLoss, AllMaskedIsContractError) {
  EXPECT_THROW(mae_loss(T64({2}, {1, 2}), T64({2}, {2, 4}), T64::zeros({2})), ContractError);
}

TEST(Metrics, HandComputedExample) {
  std::vector<double> pred{110, 180}, target{100, 200};
  std::vector<std::uint8_t> mask{1, 1};
  auto m = metrics<double, double, std::uint8_t>(pred, target, mask);
  EXPECT_DOUBLE_EQ(m.mae, 15.0);
  EXPECT_NEAR(m.rmse, std::sqrt(250.0), 1e-12);
  EXPECT_NEAR(m.rmse, 15.81, 5e-3);
  EXPECT_NEAR(m.mape_percent, 10.0, 1e-12);
  EXPECT_EQ(m.count, 2u);
}

TEST(Metrics, PerfectPrediction) {
  std::vector<double> v{1, 2, 3};
  std::vector<std::uint8_t> mask{1, 1, 1};
  auto m = metrics<double, double, std::uint8_t>(v, v, mask);
  EXPECT_EQ(m.mae, 0.0);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_EQ(m.mape_percent, 0.0);
}

TEST(Metrics, MapeExcludesZeroTargetsAndMaskedPoints) {
  std::vector<double> pred{5, 110, 1000}, target{0, 100, 1};
  std::vector<std::uint8_t> mask{1, 1, 0};
  auto m = metrics<double, double, std::uint8_t>(pred, target, mask);
  EXPECT_EQ(m.count, 2u);
  EXPECT_EQ(m.mape_count, 1u);
  EXPECT_NEAR(m.mape_percent, 10.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.mae, 7.5);
}

TEST(Metrics, UndefinedCasesAreContractErrors) {
  std::vector<double> pred{1, 2}, zeros{0, 0};
  std::vector<std::uint8_t> none{0, 0}, all{1, 1};
  EXPECT_THROW((metrics<double, double, std::uint8_t>(pred, zeros, none)), ContractError);
  EXPECT_THROW((metrics<double, double, std::uint8_t>(pred, zeros, all)), ContractError);
}

TEST(Metrics, RmseAtLeastMae) {
  Lcg64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(20), y(20);
    std::vector<std::uint8_t> mask(20, 1);
    for (std::size_t i = 0; i < 20; ++i) {
      p[i] = rng.uniform(-5, 5);
      y[i] = rng.uniform(1, 5);
    }
    auto m = metrics<double, double, std::uint8_t>(p, y, mask);
    EXPECT_GE(m.rmse, m.mae);
    EXPECT_GE(m.mae, 0.0);
  }
}

TEST(Adam, ZeroGradientIsIdentity) {
  ParameterRegistry<double> reg;
  auto w = reg.add("w", {3}, {0.5, -1.0, 2.0});
  Adam<double> adam(reg);
  backward(sum(mul(w, T64::zeros({3}))));
  ASSERT_TRUE(w.has_grad());
  TrainConfig cfg;
  for (int i = 0; i < 3; ++i) adam.step(reg, cfg);
  EXPECT_EQ(w.vec(), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterRegistry<double> reg;
  auto w = reg.add("w", {1}, {0.0});
  Adam<double> adam(reg);
  backward(sum(w));
  TrainConfig cfg;
  adam.step(reg, cfg);
  EXPECT_NEAR(w.item(), -cfg.lr / (1.0 + cfg.eps), 1e-18);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, DeterministicOverFiveSteps) {
  auto run = [] {
    ParameterRegistry<double> reg;
    Lcg64 rng(5);
    auto w = reg.uniform("w", {4}, 4, rng);
    Adam<double> adam(reg);
    TrainConfig cfg;
    for (int i = 0; i < 5; ++i) {
      reg.zero_grad();
      backward(sum(mul(mul(w, w), w)));
      adam.step(reg, cfg);
    }
    return w.vec();
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParameterRegistry<double> reg;
  auto w = reg.add("encoder.weight", {1}, {0.0});
  Adam<double> adam(reg);
  backward(sum(mul(w, T64({1}, {std::nan("")}))));
  try {
    adam.step(reg, TrainConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.weight"), std::string::npos);
  }
}

TEST(ZScore, RoundTripAndTrainingOnlyStatistics) {
  auto ds = small_dataset();
  auto data = prepare_data(ds);
  double sum = 0;
  for (std::size_t i = 0; i < ds.index(data.ranges.train.end, 0); ++i) sum += ds.values[i];
  EXPECT_NEAR(data.stats.mean, sum / static_cast<double>(ds.index(data.ranges.train.end, 0)), 1e-9);
  Lcg64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-1e3, 1e3);
    EXPECT_NEAR(data.stats.invert(data.stats.apply(x)), x, 1e-9);
  }
}

TEST(ZScore, ConstantSplitIsDataError) {
  auto ds = small_dataset();
  std::fill(ds.values.begin(), ds.values.end(), 4.0f);
  EXPECT_THROW(compute_zscore(ds, {0, 50}), DataError);
}

TEST(ZScore, MissingValuesExcluded) {
  auto ds = small_dataset();
  auto base = compute_zscore(ds, {0, 50});
  ds.values[0] = 1e6f;
  ds.explicit_mask.assign(ds.values.size(), 1);
  ds.explicit_mask[0] = 0;
  ds.refresh_mask();
  auto stats = compute_zscore(ds, {0, 50});
  EXPECT_LT(std::abs(stats.mean - base.mean), 1.0);
}

TEST(MakeBatch, NormalisesInputsAndKeepsTargetsRaw) {
  auto ds = small_dataset();
  ds.explicit_mask.assign(ds.values.size(), 1);
  ds.explicit_mask[ds.index(1, 2)] = 0;
  ds.explicit_mask[ds.index(13, 0)] = 0;
  ds.refresh_mask();
  auto data = prepare_data(ds);
  std::vector<std::size_t> which{0};
  auto batch = make_batch<double>(ds, data.stats, data.train, which);
  EXPECT_NEAR(batch.x.at({0, 0, 1, 0}), data.stats.apply(ds.values[ds.index(0, 1)]), 1e-12);
  EXPECT_EQ(batch.x.at({0, 1, 2, 0}), 0.0);
  EXPECT_EQ(batch.target.at({0, 0, 1, 0}), ds.values[ds.index(12, 1)]);
  EXPECT_EQ(batch.mask.at({0, 1, 0, 0}), 0.0);
  EXPECT_EQ(batch.timestamps.front(), ds.timestamp(0));
}

TEST(EarlyStopping, StrictImprovementOnly) {
  EarlyStopping stop(2);
  EXPECT_TRUE(stop.update(1.0));
  EXPECT_FALSE(stop.update(1.0));
  EXPECT_FALSE(stop.should_stop());
  EXPECT_TRUE(stop.update(0.5));
  EXPECT_FALSE(stop.update(0.7));
  EXPECT_FALSE(stop.update(0.5));
  EXPECT_TRUE(stop.should_stop());
}

TEST(Train, PatienceOneStopsAtEpochTwoWithoutImprovement) {
  auto ds = small_dataset();
  auto data = prepare_data(ds);
  Model<float> model(micro(), 1);
  TrainConfig cfg;
  cfg.lr = 1e-30;  // updates vanish below float resolution, so validation MAE never moves
  cfg.patience = 1;
  cfg.max_epochs = 10;
  auto result = train(model, data, cfg);
  ASSERT_EQ(result.log.size(), 2u);
  EXPECT_EQ(result.log[0].val_mae, result.log[1].val_mae);
  EXPECT_EQ(result.best_epoch, 1u);
}

TEST(Train, RestoresStrictlyBestParameters) {
  auto ds = small_dataset();
  auto data = prepare_data(ds);
  Model<double> model(micro(), 1);
  TrainConfig cfg;
  cfg.lr = 0.01;
  cfg.max_epochs = 6;
  cfg.patience = 6;
  auto result = train(model, data, cfg);
  double best = 1e300;
  for (const auto& r : result.log) best = std::min(best, r.val_mae);
  EXPECT_EQ(result.best_val_mae, best);
  EXPECT_DOUBLE_EQ(evaluate(model, ds, data.val, data.stats).mae, best);
}

TEST(Train, IdenticalSeedsGiveIdenticalLogsAndParameters) {
  auto ds = small_dataset();
  auto data = prepare_data(ds);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.patience = 3;
  cfg.seed = 11;
  auto run = [&] {
    Model<float> model(micro(), 4);
    auto result = train(model, data, cfg);
    std::string log;
    for (const auto& r : result.log) log += to_jsonl(r) + "\n";
    return std::make_pair(log, model.registry().snapshot());
  };
  auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first.find("\"seconds\":0.0"), std::string::npos);
}

TEST(Train, DivergenceReturnsLogSoFar) {
  auto ds = small_dataset();
  auto data = prepare_data(ds);
  Model<float> model(micro(), 2);
  TrainConfig cfg;
  cfg.lr = 1e30;
  cfg.max_epochs = 5;
  cfg.patience = 5;
  auto result = train(model, data, cfg);
  EXPECT_TRUE(result.diverged);
  EXPECT_FALSE(result.message.empty());
  EXPECT_LT(result.log.size(), 5u);
}

TEST(Train, OverfitsThirtyTwoWindows) {
  auto ds = small_dataset(160, 8);
  auto data = prepare_data(ds);
  data.train.starts.resize(32);
  Model<double> model(micro(), 3);
  TrainConfig cfg;
  cfg.lr = 0.003;
  cfg.patience = 200;
  const double target = 0.1 * data.stats.std;
  double best = 1e300;
  auto result = train(model, data, cfg, [&](const EpochRecord& r) {
    best = std::min(best, r.train_mae);
    return r.train_mae >= target;
  });
  EXPECT_LT(best, target) << "after " << result.log.size() << " epochs";
}

TEST(Evaluate, ConstantMeanModelScoresMeanAbsoluteDeviation) {
  auto ds = small_dataset();
  auto data = prepare_data(ds);
  Model<double> model(micro(), 1);
  for (auto* name : {"output.W2", "output.b2"})
    for (auto& v : model.registry().get(name).mutable_values()) v = 0.0;
  double mad = 0;
  std::size_t n = 0;
  for (std::size_t w = 0; w < data.test.size(); ++w)
    for (std::size_t t = 0; t < 12; ++t)
      for (std::size_t k = 0; k < ds.nodes; ++k) {
        mad += std::abs(ds.values[ds.index(data.test.target_begin(w) + t, k)] - data.stats.mean);
        ++n;
      }
  mad /= static_cast<double>(n);
  auto report = evaluate(model, ds, data.test, data.stats);
  EXPECT_NEAR(report.mae, mad, 1e-9);
  EXPECT_NEAR(evaluate_constant_mean(ds, data.test, data.stats).mae, mad, 1e-9);
  EXPECT_EQ(report.count, data.test.size() * 12 * ds.nodes);
}

TEST(Evaluate, InvariantToBatchSize) {
  auto ds = small_dataset();
  auto data = prepare_data(ds);
  Model<double> model(micro(), 6);
  auto a = evaluate(model, ds, data.val, data.stats, 1);
  auto b = evaluate(model, ds, data.val, data.stats, 7);
  EXPECT_NEAR(a.mae, b.mae, 1e-12);
  EXPECT_NEAR(a.rmse, b.rmse, 1e-12);
  EXPECT_NEAR(a.mape_percent, b.mape_percent, 1e-12);
  EXPECT_EQ(a.count, b.count);
}

TEST(TrainConfig, Validation) {
  TrainConfig cfg;
  cfg.patience = 300;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

}  // namespace
}  // namespace dstgtn
