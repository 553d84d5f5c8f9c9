#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dstgtn/errors.hpp"
#include "dstgtn/ops.hpp"
#include "dstgtn/parameter.hpp"

namespace dstgtn {

/// Weights of one temporal transformer block. Projections are shared by all nodes.
template <class T>
struct TemporalBlockParams {
  Tensor<T> w_q, w_k, w_v, w_o;          // D x D
  Tensor<T> ffn_w1, ffn_b1;              // D x D_ff, D_ff
  Tensor<T> ffn_w2, ffn_b2;              // D_ff x D, D
  Tensor<T> ln1_gain, ln1_bias;          // after attention
  Tensor<T> ln2_gain, ln2_bias;          // after FFN
  std::size_t heads = 1;

  std::size_t width() const { return w_q.dim(0); }

  static TemporalBlockParams create(ParameterRegistry<T>& reg, Lcg64& rng, const std::string& prefix,
                                    std::size_t width, std::size_t heads) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("width " + std::to_string(width) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    const std::size_t ff = 4 * width;
    TemporalBlockParams p;
    p.heads = heads;
    p.w_q = reg.uniform(prefix + ".W_Q", {width, width}, width, rng);
    p.w_k = reg.uniform(prefix + ".W_K", {width, width}, width, rng);
    p.w_v = reg.uniform(prefix + ".W_V", {width, width}, width, rng);
    p.w_o = reg.uniform(prefix + ".W_O", {width, width}, width, rng);
    p.ffn_w1 = reg.uniform(prefix + ".ffn.W1", {width, ff}, width, rng);
    p.ffn_b1 = reg.constant(prefix + ".ffn.b1", {ff}, T(0));
    p.ffn_w2 = reg.uniform(prefix + ".ffn.W2", {ff, width}, ff, rng);
    p.ffn_b2 = reg.constant(prefix + ".ffn.b2", {width}, T(0));
    p.ln1_gain = reg.constant(prefix + ".ln1.gain", {width}, T(1));
    p.ln1_bias = reg.constant(prefix + ".ln1.bias", {width}, T(0));
    p.ln2_gain = reg.constant(prefix + ".ln2.gain", {width}, T(1));
    p.ln2_bias = reg.constant(prefix + ".ln2.bias", {width}, T(0));
    return p;
  }
};

template <class T>
struct AttentionOutput {
  Tensor<T> out;      // B x T x N x D
  Tensor<T> weights;  // B x N x h x T x T; rows sum to 1
};

/// Multi-head self-attention along the time axis, independently for every node.
///
/// Heads split the feature axis into h slices of width D/h; scores are scaled by
/// 1/sqrt(D/h). There is no positional term, so the map is equivariant to permutations
/// of the time axis.
template <class T>
AttentionOutput<T> mtsa_with_weights(const Tensor<T>& z, const TemporalBlockParams<T>& p) {
  if (z.rank() != 4 || z.dim(3) != p.width()) {
    throw DimensionError("mtsa: input " + to_string(z.shape()) + " vs projection width " +
                         std::to_string(p.width()));
  }
  const std::size_t B = z.dim(0), Tn = z.dim(1), N = z.dim(2), D = z.dim(3), h = p.heads;
  if (D % h != 0) throw ConfigError("mtsa: width not divisible by head count");
  const std::size_t dh = D / h;

  // B,T,N,D -> B,T,N,h,dh -> B,N,h,T,dh
  auto split = [&](const Tensor<T>& x, std::vector<std::size_t> axes) {
    return permute(reshape(x, {B, Tn, N, h, dh}), axes);
  };
  auto q = split(matmul(z, p.w_q), {0, 2, 3, 1, 4});
  auto kt = split(matmul(z, p.w_k), {0, 2, 3, 4, 1});  // B,N,h,dh,T
  auto v = split(matmul(z, p.w_v), {0, 2, 3, 1, 4});

  auto scores = scale(matmul(q, kt), T(1) / std::sqrt(static_cast<T>(dh)));
  auto weights = softmax_last(scores);
  auto heads_out = matmul(weights, v);  // B,N,h,T,dh
  auto merged = reshape(permute(heads_out, {0, 3, 1, 2, 4}), {B, Tn, N, D});
  return {matmul(merged, p.w_o), weights};
}

template <class T>
Tensor<T> mtsa(const Tensor<T>& z, const TemporalBlockParams<T>& p) {
  return mtsa_with_weights(z, p).out;
}

/// Z' = LN(FFN(Zh) + Zh) with Zh = LN(MTSA(Z) + Z)  (post-norm).
template <class T>
Tensor<T> transformer_block(const Tensor<T>& z, const TemporalBlockParams<T>& p) {
  auto zh = layer_norm(add(mtsa(z, p), z), p.ln1_gain, p.ln1_bias);
  auto ffn = linear(relu(linear(zh, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
  return layer_norm(add(ffn, zh), p.ln2_gain, p.ln2_bias);
}

template <class T>
Tensor<T> temporal_stack(const Tensor<T>& z, const std::vector<TemporalBlockParams<T>>& blocks) {
  Tensor<T> out = z;
  for (const auto& b : blocks) out = transformer_block(out, b);
  return out;
}

}  // namespace dstgtn
