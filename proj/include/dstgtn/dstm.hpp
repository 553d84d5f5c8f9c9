#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dstgtn/errors.hpp"
#include "dstgtn/ops.hpp"
#include "dstgtn/parameter.hpp"

namespace dstgtn {

/// Spatial self-attention weights of one layer's graph generator. W_Qt / W_Kt are
/// shared by every time slice of E_st.
template <class T>
struct DSTGGParams {
  Tensor<T> w_qt, w_kt;  // d2 x d2
  Tensor<T> fusion;      // h x 1 head-mixing kernel
  std::size_t heads = 1;

  static DSTGGParams create(ParameterRegistry<T>& reg, Lcg64& rng, const std::string& prefix,
                            std::size_t d2, std::size_t heads) {
    if (heads == 0 || d2 % heads != 0) {
      throw ConfigError("d2 = " + std::to_string(d2) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    DSTGGParams p;
    p.heads = heads;
    p.w_qt = reg.uniform(prefix + ".W_Qt", {d2, d2}, d2, rng);
    p.w_kt = reg.uniform(prefix + ".W_Kt", {d2, d2}, d2, rng);
    p.fusion = reg.uniform(prefix + ".fusion", {heads, 1}, heads, rng);
    return p;
  }
};

/// Two-layer MLP d2 -> d2 -> 1 producing the raw node-frequency score.
template <class T>
struct NFLParams {
  Tensor<T> w1, b1, w2, b2;

  static NFLParams create(ParameterRegistry<T>& reg, Lcg64& rng, const std::string& prefix,
                          std::size_t d2) {
    NFLParams p;
    p.w1 = reg.uniform(prefix + ".W1", {d2, d2}, d2, rng);
    p.b1 = reg.constant(prefix + ".b1", {d2}, T(0));
    p.w2 = reg.uniform(prefix + ".W2", {d2, 1}, d2, rng);
    p.b2 = reg.constant(prefix + ".b2", {1}, T(0));
    return p;
  }
};

/// Global graph, local identity graph and their filter-weighted forms for one layer.
template <class T>
struct STGraphPair {
  Tensor<T> a_st;           // T x N x N, rows are probability distributions
  Tensor<T> a_local;        // T x N x N identity at every t
  Tensor<T> lambda_local;   // T x N
  Tensor<T> lambda_global;  // T x N
  Tensor<T> a_st_local;     // lambda_local (.) A_local
  Tensor<T> a_st_global;    // lambda_global (.) A_st
};

/// Per-layer weights. `dstgg` is absent when a fixed graph replaces the generated one;
/// `nfl` is absent when the filter weights are pinned to 1.
template <class T>
struct DstmLayerParams {
  std::optional<DSTGGParams<T>> dstgg;
  std::optional<NFLParams<T>> nfl;
  Tensor<T> static_graph;  // T x N x N, used iff !dstgg
  Tensor<T> w;             // D x D
  Tensor<T> ln_gain, ln_bias;
};

/// Unnormalised per-head spatial attention A^m_t = Q^m_t (K^m_t)^T / sqrt(d2); h x T x N x N.
template <class T>
Tensor<T> ssa_heads(const Tensor<T>& e_st, const DSTGGParams<T>& p) {
  if (e_st.rank() != 3 || e_st.dim(2) != p.w_qt.dim(0)) {
    throw DimensionError("ssa_heads: E_st " + to_string(e_st.shape()) + " vs W_Qt " +
                         to_string(p.w_qt.shape()));
  }
  const std::size_t Tn = e_st.dim(0), N = e_st.dim(1), d2 = e_st.dim(2), h = p.heads;
  const std::size_t dk = d2 / h;
  auto q = permute(reshape(matmul(e_st, p.w_qt), {Tn, N, h, dk}), {2, 0, 1, 3});   // h,T,N,dk
  auto kt = permute(reshape(matmul(e_st, p.w_kt), {Tn, N, h, dk}), {2, 0, 3, 1});  // h,T,dk,N
  return scale(matmul(q, kt), T(1) / std::sqrt(static_cast<T>(d2)));
}

/// A_st[t] = row_softmax(sum_m w_m A^m_t); T x N x N.
template <class T>
Tensor<T> fuse_and_normalize(const Tensor<T>& heads, const Tensor<T>& fusion) {
  if (heads.rank() != 4 || fusion.size() != heads.dim(0)) {
    throw DimensionError("fuse_and_normalize: heads " + to_string(heads.shape()) + " vs kernel " +
                         to_string(fusion.shape()));
  }
  const std::size_t h = heads.dim(0), Tn = heads.dim(1), N = heads.dim(2);
  auto mixed = matmul(permute(heads, {1, 2, 3, 0}), reshape(fusion, {h, 1}));  // T,N,N,1
  return softmax_last(reshape(mixed, {Tn, N, N}));
}

/// lambda = 1 + ReLU(MLP(E_st)); returns (lambda_local, lambda_global) = ((2 lambda - 2)/lambda, 2/lambda).
template <class T>
std::pair<Tensor<T>, Tensor<T>> node_frequency_learning(const Tensor<T>& e_st, const NFLParams<T>& p) {
  const std::size_t Tn = e_st.dim(0), N = e_st.dim(1);
  auto score = linear(relu(linear(e_st, p.w1, p.b1)), p.w2, p.b2);
  auto lambda = affine(relu(reshape(score, {Tn, N})), T(1), T(1));
  auto two = Tensor<T>::full({Tn, N}, T(2));
  return {div(affine(lambda, T(2), T(-2)), lambda), div(two, lambda)};
}

/// Identity graph tiled over T.
template <class T>
Tensor<T> local_graph(std::size_t steps, std::size_t nodes) {
  std::vector<T> v(steps * nodes * nodes, T(0));
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < nodes; ++i) v[(t * nodes + i) * nodes + i] = T(1);
  return Tensor<T>({steps, nodes, nodes}, std::move(v));
}

/// A_st_local[t,i,j] = lambda_local[t,i] delta_ij;  A_st_global[t,i,j] = lambda_global[t,i] A_st[t,i,j].
template <class T>
std::pair<Tensor<T>, Tensor<T>> apply_filter_weights(const Tensor<T>& a_st, const Tensor<T>& lambda_local,
                                                     const Tensor<T>& lambda_global) {
  if (a_st.rank() != 3 || lambda_local.shape() != Shape{a_st.dim(0), a_st.dim(1)} ||
      lambda_global.shape() != lambda_local.shape()) {
    throw DimensionError("apply_filter_weights: graph " + to_string(a_st.shape()) + " vs weights " +
                         to_string(lambda_local.shape()));
  }
  return {diag_embed(lambda_local), scale_rows(a_st, lambda_global)};
}

/// Builds the graph pair of one layer from E_st.
template <class T>
STGraphPair<T> build_graph_pair(const Tensor<T>& e_st, const DstmLayerParams<T>& layer) {
  const std::size_t Tn = e_st.dim(0), N = e_st.dim(1);
  STGraphPair<T> pair;
  pair.a_st = layer.dstgg ? fuse_and_normalize(ssa_heads(e_st, *layer.dstgg), layer.dstgg->fusion)
                          : layer.static_graph;
  pair.a_local = local_graph<T>(Tn, N);
  if (layer.nfl) {
    std::tie(pair.lambda_local, pair.lambda_global) = node_frequency_learning(e_st, *layer.nfl);
  } else {
    pair.lambda_local = Tensor<T>::full({Tn, N}, T(1));
    pair.lambda_global = Tensor<T>::full({Tn, N}, T(1));
  }
  std::tie(pair.a_st_local, pair.a_st_global) =
      apply_filter_weights(pair.a_st, pair.lambda_local, pair.lambda_global);
  return pair;
}

/// (A_st_local + A_st_global) x Z, then W on every position.
template <class T>
Tensor<T> st_graph_conv(const Tensor<T>& z, const STGraphPair<T>& pair, const Tensor<T>& w) {
  return matmul(contract_time_graph(add(pair.a_st_local, pair.a_st_global), z), w);
}

/// LN(st_graph_conv(Z) + Z).
template <class T>
Tensor<T> dstm_block(const Tensor<T>& z_prev, const Tensor<T>& e_st, const DstmLayerParams<T>& layer,
                     STGraphPair<T>* pair_out = nullptr) {
  auto pair = build_graph_pair(e_st, layer);
  auto out = layer_norm(add(st_graph_conv(z_prev, pair, layer.w), z_prev), layer.ln_gain, layer.ln_bias);
  if (pair_out) *pair_out = std::move(pair);
  return out;
}

}  // namespace dstgtn
