#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dstgtn/dstm.hpp"
#include "dstgtn/gradcheck.hpp"
#include "dstgtn/model.hpp"
#include "dstgtn/ops.hpp"
#include "dstgtn/random.hpp"
#include "dstgtn/temporal_transformer.hpp"
#include "dstgtn/training.hpp"

namespace dstgtn {

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckStep = 1e-5;

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0;
  bool passed = false;
};

/// Smallest configuration used for end-to-end gradient checks.
inline ModelConfig micro_config(Variant variant = Variant::full) {
  ModelConfig c;
  c.nodes = 3;
  c.steps_in = c.steps_out = 4;
  c.d = c.d1 = 2;
  c.d2 = 4;
  c.heads = 2;
  c.temporal_layers = c.dstm_layers = 1;
  c.variant = variant;
  if (variant == Variant::static_graph) c.static_adjacency = {0.5, 0.5, 0, 0.2, 0.6, 0.2, 0, 0.3, 0.7};
  return c;
}

/// A fixed micro batch (B = 2) of normalised inputs and raw-unit targets.
struct MicroProblem {
  Batch<double> batch;
  ZScoreStats stats{0.5, 2.0};
};

inline MicroProblem micro_problem(const ModelConfig& cfg, std::size_t batch = 2, std::uint64_t seed = 7) {
  Lcg64 rng(seed);
  const std::size_t N = cfg.nodes, Tn = cfg.steps_in, C = cfg.channels;
  MicroProblem p;
  std::vector<double> x(batch * Tn * N * C), y(batch * Tn * N * C), m(batch * Tn * N * C, 1.0);
  for (auto& v : x) v = rng.uniform(-1.5, 1.5);
  for (auto& v : y) v = rng.uniform(-3.0, 4.0);
  m[1] = 0.0;
  p.batch.x = Tensor<double>({batch, Tn, N, C}, x);
  p.batch.target = Tensor<double>({batch, Tn, N, C}, y);
  p.batch.mask = Tensor<double>({batch, Tn, N, C}, m);
  // Each window straddles midnight, so E_week is not constant over a window; a constant key
  // component would be softmax-invariant and leave W_K rows with exactly zero gradient.
  const auto interval = static_cast<std::int64_t>(cfg.interval_seconds);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::int64_t start = 1704067200 + static_cast<std::int64_t>(b) * 86400 - interval * static_cast<std::int64_t>(Tn / 2);
    for (std::size_t t = 0; t < Tn; ++t) p.batch.timestamps.push_back(start + static_cast<std::int64_t>(t) * interval);
  }
  return p;
}

/// Denormalised masked-MAE loss of the model on a micro problem.
inline Tensor<double> micro_loss(const Model<double>& model, const MicroProblem& p) {
  auto pred = affine(model.forward(p.batch.x, p.batch.timestamps), p.stats.std, p.stats.mean);
  return mae_loss(pred, p.batch.target, p.batch.mask);
}

/// Re-draws every target 0.2 to 1.5 above the model's current prediction. The absolute-error
/// kink then cannot fall inside a finite-difference step, and since all MAE terms share one
/// magnitude, a common sign also rules out exact cancellations that would leave a gradient
/// scored on roundoff alone.
inline void separate_targets(const Model<double>& model, MicroProblem& p, std::uint64_t seed) {
  NoGradGuard no_grad;
  Lcg64 rng(seed);
  const auto pred = affine(model.forward(p.batch.x, p.batch.timestamps), p.stats.std, p.stats.mean);
  auto y = p.batch.target.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = pred.vec()[i] + rng.uniform(0.2, 1.5);
}

/// Moves every parameter off its initial value so zero biases and unit gains do not park
/// ReLU inputs on their kink. NFL output biases are raised so lambda > 1 is exercised.
inline void jitter_parameters(Model<double>& model, std::uint64_t seed) {
  Lcg64 rng(seed);
  for (auto& p : model.registry().params()) {
    const bool nfl_out = p.name.size() >= 7 && p.name.compare(p.name.size() - 7, 7, ".nfl.b2") == 0;
    for (auto& v : p.tensor.mutable_values()) v += rng.uniform(-0.2, 0.2) + (nfl_out ? 0.5 : 0.0);
  }
}

/// Checks every parameter of `model`; returns the worst error and its parameter name.
inline GradCheckCase check_all_parameters(Model<double>& model, const std::function<Tensor<double>()>& loss,
                                          const std::string& label) {
  GradCheckCase out{label, 0.0, true};
  for (auto& p : model.registry().params()) {
    const auto r = finite_diff_check(loss, p.tensor, kGradCheckStep);
    if (r.max_rel_error > out.max_rel_error) {
      out.max_rel_error = r.max_rel_error;
      out.name = label + " (worst: " + p.name + ")";
    }
  }
  out.passed = out.max_rel_error < kGradCheckTolerance;
  return out;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Lcg64& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// sum(f(...) * R) with a fixed random R, so no gradient vanishes by symmetry.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  Lcg64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, -1.0, 1.0, false)));
}

}  // namespace detail

/// Primitive-level and end-to-end finite-difference checks (64-bit, step 1e-5).
inline std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 1) {
  using detail::random_tensor;
  using detail::weighted_sum;
  std::vector<GradCheckCase> cases;
  Lcg64 rng(seed);

  auto check = [&](const std::string& name, const std::function<Tensor<double>()>& loss,
                   std::vector<Tensor<double>> inputs) {
    GradCheckCase c{name, 0.0, true};
    for (auto& in : inputs)
      c.max_rel_error = std::max(c.max_rel_error, finite_diff_check(loss, in, kGradCheckStep).max_rel_error);
    c.passed = c.max_rel_error < kGradCheckTolerance;
    cases.push_back(c);
  };

  {
    auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng), w = random_tensor({4, 3}, rng);
    check("matmul (batched)", [=] { return weighted_sum(matmul(a, b), 11); }, {a, b});
    check("matmul (shared right operand)", [=] { return weighted_sum(matmul(a, w), 12); }, {a, w});
  }
  {
    auto x = random_tensor({3, 5}, rng, -2, 2);
    check("softmax_last", [=] { return weighted_sum(softmax_last(x), 13); }, {x});
  }
  {
    auto x = random_tensor({4, 6}, rng, -2, 2), g = random_tensor({6}, rng, 0.5, 1.5), b = random_tensor({6}, rng);
    check("layer_norm", [=] { return weighted_sum(layer_norm(x, g, b), 14); }, {x, g, b});
  }
  {
    auto x = random_tensor({3, 4}, rng, -1, 1);
    check("relu", [=] { return weighted_sum(relu(x), 15); }, {x});
  }
  {
    auto g = random_tensor({3, 4, 4}, rng), z = random_tensor({2, 3, 4, 2}, rng);
    check("contract_time_graph", [=] { return weighted_sum(contract_time_graph(g, z), 16); }, {g, z});
  }
  {
    auto a = random_tensor({2, 3, 3}, rng), s = random_tensor({2, 3}, rng), l = random_tensor({2, 3}, rng);
    check("scale_rows + diag_embed", [=] { return weighted_sum(add(scale_rows(a, s), diag_embed(l)), 17); },
          {a, s, l});
  }
  {
    auto a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng, 1.0, 2.0);
    check("div", [=] { return weighted_sum(div(a, b), 18); }, {a, b});
  }
  {
    auto a = random_tensor({2, 3}, rng), b = random_tensor({1, 3, 1}, rng), c = random_tensor({5, 3}, rng);
    std::vector<std::size_t> rows{4, 0, 4};
    check("concat / broadcast / permute / gather",
          [=] {
            auto bb = reshape(broadcast_to(b, {2, 3, 2}), {2, 6});
            auto gathered = reshape(gather_rows(c, rows), {1, 9});
            auto cat = concat_last<double>({a, bb});
            return add(weighted_sum(permute(cat, {1, 0}), 19), weighted_sum(gathered, 20));
          },
          {a, b, c});
  }
  {
    const std::size_t D = 4;
    ParameterRegistry<double> reg;
    auto block = TemporalBlockParams<double>::create(reg, rng, "tt", D, 2);
    auto z = random_tensor({1, 3, 2, D}, rng);
    std::vector<Tensor<double>> inputs{z};
    for (auto& p : reg.params()) inputs.push_back(p.tensor);
    check("temporal transformer block", [=] { return weighted_sum(transformer_block(z, block), 21); }, inputs);
  }
  {
    const std::size_t D = 4, d2 = 4, Tn = 3, N = 3;
    ParameterRegistry<double> reg;
    DstmLayerParams<double> layer;
    layer.dstgg = DSTGGParams<double>::create(reg, rng, "g", d2, 2);
    layer.nfl = NFLParams<double>::create(reg, rng, "nfl", d2);
    layer.w = reg.uniform("W", {D, D}, D, rng);
    layer.ln_gain = reg.constant("ln.gain", {D}, 1.0);
    layer.ln_bias = reg.constant("ln.bias", {D}, 0.0);
    // Bias the NFL output so most lambda values sit above 1.
    layer.nfl->b2.mutable_values()[0] = 0.3;
    auto z = random_tensor({2, Tn, N, D}, rng), e = random_tensor({Tn, N, d2}, rng);
    std::vector<Tensor<double>> inputs{z, e};
    for (auto& p : reg.params()) inputs.push_back(p.tensor);
    check("dstm block", [=] { return weighted_sum(dstm_block(z, e, layer), 22); }, inputs);
  }
  for (auto variant : kAllVariants) {
    Model<double> model(micro_config(variant), seed + 100);
    jitter_parameters(model, seed + 200);
    auto problem = micro_problem(model.config(), 2, seed + 300);
    separate_targets(model, problem, seed + 400);
    cases.push_back(check_all_parameters(model, [&] { return micro_loss(model, problem); },
                                         "end-to-end MAE loss, variant " + variant_name(variant)));
  }
  return cases;
}

}  // namespace dstgtn
