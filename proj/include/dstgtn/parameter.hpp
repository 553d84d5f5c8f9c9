#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "dstgtn/errors.hpp"
#include "dstgtn/random.hpp"
#include "dstgtn/tensor.hpp"

namespace dstgtn {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered set of named trainable tensors. Registration order is the update order.
template <class T>
class ParameterRegistry {
 public:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
    Tensor<T> t(std::move(shape), std::move(values), /*requires_grad=*/true);
    index_.emplace(name, params_.size());
    params_.push_back({name, t});
    return t;
  }

  /// Uniform on +-sqrt(1/fan_in).
  Tensor<T> uniform(const std::string& name, Shape shape, std::size_t fan_in, Lcg64& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(shape), std::move(v));
  }

  Tensor<T> constant(const std::string& name, Shape shape, T fill) {
    const auto n = numel(shape);
    return add(name, std::move(shape), std::vector<T>(n, fill));
  }

  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& params() { return params_; }
  std::size_t size() const { return params_.size(); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second].tensor;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return params_[it->second].tensor;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.tensor.vec());
    return out;
  }

  void restore(const std::vector<std::vector<T>>& values) {
    if (values.size() != params_.size()) throw ContractError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto dst = params_[i].tensor.mutable_values();
      if (dst.size() != values[i].size()) throw ContractError("restore: size mismatch for " + params_[i].name);
      std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dstgtn
