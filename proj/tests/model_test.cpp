#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "dstgtn/model.hpp"

namespace dstgtn {
namespace {

using T64 = Tensor<double>;

constexpr std::int64_t kStart = 1704067200;

ModelConfig small_config(Variant v = Variant::full, std::size_t nodes = 5) {
  ModelConfig c;
  c.nodes = nodes;
  c.d = c.d1 = 4;
  c.d2 = 8;
  c.heads = 2;
  c.temporal_layers = c.dstm_layers = 2;
  c.variant = v;
  if (v == Variant::static_graph) {
    std::vector<double> coords;
    for (std::size_t n = 0; n < nodes; ++n) coords.insert(coords.end(), {0.1 * n, 0.05 * n * n});
    c.static_adjacency = static_adjacency_from_coordinates(coords);
  }
  return c;
}

std::vector<std::int64_t> windows(std::size_t batch, std::size_t steps) {
  std::vector<std::int64_t> ts;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < steps; ++t) ts.push_back(kStart + static_cast<std::int64_t>((b * 7 + t) * 300));
  return ts;
}

T64 random_input(Shape s, std::uint64_t seed) {
  Lcg64 rng(seed);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.uniform(-1.5, 1.5);
  return T64(std::move(s), std::move(v));
}

bool any_nonzero(const std::vector<double>& g) {
  return std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
}

TEST(Model, ShapeContractForEveryVariant) {
  auto x = random_input({2, 12, 5, 1}, 1);
  auto ts = windows(2, 12);
  for (auto v : kAllVariants) {
    Model<double> m(small_config(v), 3);
    EXPECT_EQ(m.forward(x, ts).shape(), (Shape{2, 12, 5, 1})) << variant_name(v);
  }
}

TEST(Model, ForwardIsDeterministic) {
  Model<double> a(small_config(), 9), b(small_config(), 9);
  auto x = random_input({2, 12, 5, 1}, 2);
  auto ts = windows(2, 12);
  EXPECT_EQ(a.forward(x, ts).vec(), a.forward(x, ts).vec());
  EXPECT_EQ(a.forward(x, ts).vec(), b.forward(x, ts).vec());
}

TEST(Model, InputShapeMismatch) {
  Model<double> m(small_config(), 1);
  auto ts = windows(1, 12);
  EXPECT_THROW(m.forward(random_input({1, 12, 4, 1}, 1), ts), DimensionError);
  EXPECT_THROW(m.forward(random_input({1, 12, 5, 1}, 1), windows(1, 11)), DimensionError);
}

TEST(Model, ParameterCountMatchesClosedForm) {
  for (auto v : kAllVariants) {
    Model<double> m(small_config(v), 1);
    EXPECT_EQ(m.registry().scalar_count(), expected_parameter_count(m.config())) << variant_name(v);
  }
  ModelConfig defaults;
  defaults.nodes = 170;
  Model<float> big(defaults, 1);
  EXPECT_EQ(big.registry().scalar_count(), expected_parameter_count(defaults));
}

TEST(Model, NamesAreUnique) {
  Model<double> m(small_config(), 1);
  std::set<std::string> names;
  for (const auto& p : m.registry().params()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
}

TEST(Variants, RegistriesOmitRemovedComponents) {
  auto has = [](const Model<double>& m, const std::string& needle) {
    for (const auto& p : m.registry().params())
      if (p.name.find(needle) != std::string::npos) return true;
    return false;
  };
  Model<double> none(small_config(Variant::no_tt_st), 1);
  EXPECT_FALSE(has(none, "temporal."));
  EXPECT_FALSE(has(none, "dstgg"));
  EXPECT_FALSE(has(none, "W_Q"));
  Model<double> no_tt(small_config(Variant::no_tt), 1);
  EXPECT_FALSE(has(no_tt, "temporal."));
  EXPECT_TRUE(has(no_tt, "dstgg"));
  Model<double> fixed(small_config(Variant::static_graph), 1);
  EXPECT_FALSE(has(fixed, "dstgg"));
  EXPECT_TRUE(has(fixed, ".nfl."));
  Model<double> no_nfl(small_config(Variant::no_nfl), 1);
  EXPECT_FALSE(has(no_nfl, ".nfl."));
  EXPECT_TRUE(has(no_nfl, "dstgg"));
}

TEST(Variants, NoNflPinsLambdaToOne) {
  Model<double> m(small_config(Variant::no_nfl), 1);
  for (const auto& pair : m.graphs()) {
    for (auto v : pair.lambda_local.vec()) EXPECT_EQ(v, 1.0);
    for (auto v : pair.lambda_global.vec()) EXPECT_EQ(v, 1.0);
    EXPECT_FALSE(pair.lambda_local.requires_grad());
  }
}

TEST(Variants, StaticGraphUsesConfiguredAdjacencyAtEveryStep) {
  auto cfg = small_config(Variant::static_graph);
  Model<double> m(cfg, 1);
  const auto& a = m.config().static_adjacency;
  for (const auto& pair : m.graphs())
    for (std::size_t t = 0; t < cfg.steps_in; ++t)
      for (std::size_t k = 0; k < 25; ++k) EXPECT_EQ(pair.a_st.vec()[t * 25 + k], a[k]);
}

TEST(Variants, StaticGraphRequiresAdjacency) {
  auto cfg = small_config(Variant::static_graph);
  cfg.static_adjacency.clear();
  EXPECT_THROW(Model<double>(cfg, 1), ConfigError);
  auto full = small_config();
  full.static_adjacency.assign(25, 1.0);
  EXPECT_THROW(Model<double>(full, 1), ConfigError);
}

TEST(Variants, StaticAdjacencyRowsRenormalised) {
  auto cfg = small_config(Variant::static_graph, 2);
  cfg.static_adjacency = {1, 3, 2, 2};
  cfg.validate();
  EXPECT_EQ(cfg.static_adjacency, (std::vector<double>{0.25, 0.75, 0.5, 0.5}));
}

TEST(Variants, CallOrderTrace) {
  auto x = random_input({1, 12, 5, 1}, 4);
  auto ts = windows(1, 12);
  auto trace_of = [&](Variant v) {
    Model<double> m(small_config(v), 1);
    ForwardTrace<double> trace;
    m.forward(x, ts, &trace);
    return trace.calls;
  };
  using V = std::vector<std::string>;
  EXPECT_EQ(trace_of(Variant::full), (V{"embedding", "temporal", "dstm", "output"}));
  EXPECT_EQ(trace_of(Variant::reverse), (V{"embedding", "dstm", "temporal", "output"}));
  EXPECT_EQ(trace_of(Variant::no_tt), (V{"embedding", "dstm", "output"}));
  EXPECT_EQ(trace_of(Variant::no_tt_st), (V{"embedding", "output"}));
}

TEST(Variants, ParseNames) {
  for (auto v : kAllVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("bogus"), ConfigError);
}

TEST(Model, EmptyStacksEqualNoTtSt) {
  auto cfg = small_config();
  cfg.temporal_layers = cfg.dstm_layers = 0;
  Model<double> empty(cfg, 5), bare(small_config(Variant::no_tt_st), 5);
  auto x = random_input({2, 12, 5, 1}, 6);
  auto ts = windows(2, 12);
  EXPECT_EQ(empty.forward(x, ts).vec(), bare.forward(x, ts).vec());
}

TEST(Model, NodesMixOnlyInsideDstm) {
  Model<double> m(small_config(), 2);
  auto x = random_input({1, 12, 5, 1}, 7);
  auto ts = windows(1, 12);
  std::vector<double> moved(x.vec());
  for (std::size_t t = 0; t < 12; ++t) moved[t * 5 + 3] += 1.0;
  ForwardTrace<double> a, b;
  m.forward(x, ts, &a);
  m.forward(T64(x.shape(), moved), ts, &b);
  const std::size_t D = m.config().width();
  bool dstm_changed = false;
  for (std::size_t t = 0; t < 12; ++t)
    for (std::size_t c = 0; c < D; ++c) {
      EXPECT_EQ(a.after_temporal.at({0, t, 0, c}), b.after_temporal.at({0, t, 0, c}));
      dstm_changed |= a.after_dstm.at({0, t, 0, c}) != b.after_dstm.at({0, t, 0, c});
    }
  EXPECT_TRUE(dstm_changed);
}

TEST(OutputLayer, ZeroWeightsGiveZeroForecast) {
  OutputLayerParams<double> p{T64::zeros({12 * 3, 18}), T64::zeros({18}), T64::zeros({18, 12}), T64::zeros({12})};
  auto y = output_layer(random_input({2, 12, 4, 3}, 8), p, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 12, 4, 1}));
  for (auto v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(OutputLayer, GradientReachesDstmParameters) {
  Model<double> m(small_config(), 3);
  auto y = m.forward(random_input({1, 12, 5, 1}, 9), windows(1, 12));
  backward(sum(mul(y, y)));
  for (const auto* name : {"dstm.1.W", "dstm.0.dstgg.W_Qt", "dstm.0.nfl.W1", "temporal.0.W_Q", "embedding.E_st"})
    EXPECT_TRUE(any_nonzero(m.registry().get(name).grad())) << name;
}

TEST(StaticAdjacency, FromEdgesAndCoordinates) {
  std::vector<std::pair<std::size_t, std::size_t>> edges{{0, 1}, {0, 2}, {1, 0}};
  auto a = static_adjacency_from_edges(3, edges);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  EXPECT_DOUBLE_EQ(a[2], 0.5);
  EXPECT_DOUBLE_EQ(a[3], 1.0);
  EXPECT_DOUBLE_EQ(a[8], 1.0);  // isolated node keeps itself
  EXPECT_THROW(static_adjacency_from_edges(3, std::vector<std::pair<std::size_t, std::size_t>>{{0, 3}}), DataError);
  std::vector<double> coords{0, 0, 0.1, 0, 5, 5};
  auto c = static_adjacency_from_coordinates(coords);
  for (std::size_t i = 0; i < 3; ++i) {
    double row = 0;
    for (std::size_t j = 0; j < 3; ++j) row += c[i * 3 + j];
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
  EXPECT_EQ(c[2], 0.0);
}

TEST(ModelConfig, Validation) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.steps_out = 6;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.nodes = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = small_config(Variant::static_graph);
  c.validate();
  nlohmann::json j = c;
  ModelConfig back;
  from_json(j, back);
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_THROW(from_json(nlohmann::json{{"d", "wide"}}, back), ConfigError);
}

}  // namespace
}  // namespace dstgtn
