// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fmoe/numerics/tensor.hpp"

namespace fmoe {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with per-parameter bias correction. Moment state is keyed by a name
// the caller chooses, so owners can be copied or moved freely. Parameters
// that are frozen or carry no gradient are skipped entirely and leave their
// moment state untouched.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }

  // Returns true when the parameter was updated.
  bool step(const std::string& key, Parameter<T>& param) {
    if (!param.trainable || !param.tensor.has_grad()) return false;
    auto& st = state_[key];
    const std::size_t n = param.tensor.size();
    if (st.m.size() != n) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
      st.steps = 0;
    }
    ++st.steps;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.steps));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.steps));
    auto g = param.tensor.grad();
    auto w = param.tensor.values();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
      st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
      const double update = config_.learning_rate * (st.m[i] / c1) /
                            (std::sqrt(st.v[i] / c2) + config_.epsilon);
      w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
    }
    return true;
  }

  void reset(std::string_view key) { state_.erase(std::string(key)); }
  void reset_all() { state_.clear(); }

  std::uint64_t steps(const std::string& key) const {
    auto it = state_.find(key);
    return it == state_.end() ? 0 : it->second.steps;
  }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t steps = 0;
  };
  AdamConfig config_;
  std::map<std::string, Moments, std::less<>> state_;
};

}  // namespace fmoe
