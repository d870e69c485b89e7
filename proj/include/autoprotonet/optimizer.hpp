#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autoprotonet/core.hpp"
#include "autoprotonet/network.hpp"

namespace apn {

struct SgdSettings {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool nesterov = true;
};

/// SGD with (Nesterov) momentum and L2 weight decay folded into the gradient:
///
///   g   = grad + wd * theta
///   buf = g                  (first step)
///   buf = momentum * buf + g (later steps)
///   g   = g + momentum * buf (Nesterov) or buf (classic)
///   theta -= lr * g
template <class T>
class MomentumSgd {
 public:
  explicit MomentumSgd(SgdSettings settings = {}) : settings_(settings) {
    if (settings.momentum < 0 || settings.weight_decay < 0) {
      throw InvalidArgument("momentum and weight_decay must be non-negative");
    }
  }

  const SgdSettings& settings() const { return settings_; }
  long steps() const { return steps_; }

  /// Updates one tensor; `slot` identifies its momentum buffer.
  void update(std::size_t slot, std::span<T> values, std::span<const T> grad, double lr) {
    if (values.size() != grad.size()) throw ShapeError("gradient size does not match parameter size");
    if (slot >= buffers_.size()) {
      buffers_.resize(slot + 1);
      initialised_.resize(slot + 1, false);
    }
    auto& buf = buffers_[slot];
    const bool first = !initialised_[slot];
    if (first) buf.assign(values.size(), T(0));
    const T m = static_cast<T>(settings_.momentum);
    const T wd = static_cast<T>(settings_.weight_decay);
    const T rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < values.size(); ++i) {
      T g = grad[i] + wd * values[i];
      buf[i] = first ? g : m * buf[i] + g;
      g = settings_.nesterov ? g + m * buf[i] : buf[i];
      values[i] -= rate * g;
    }
    initialised_[slot] = true;
  }

  /// Updates every trainable parameter of `params` (optionally restricted to
  /// one group) from the matching gradient buffers.
  void step(ParameterSet<T>& params, const std::vector<std::vector<T>>& grads, double lr,
            std::optional<ParamGroup> only = std::nullopt) {
    if (grads.size() != params.size()) throw ShapeError("gradient list does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.trainable || (only && p.group != *only)) continue;
      update(i, p.values, grads[i], lr);
    }
    ++steps_;
  }

 private:
  SgdSettings settings_;
  std::vector<std::vector<T>> buffers_;
  std::vector<bool> initialised_;
  long steps_ = 0;
};

/// Learning rate as a function of the (0-based) epoch.
class LrSchedule {
 public:
  /// Constant rate.
  static LrSchedule constant(double base) { return steps(base, {}); }

  /// Piecewise constant: from epoch e onwards use the rate paired with the
  /// largest milestone e' <= e.
  static LrSchedule steps(double base, std::vector<std::pair<int, double>> milestones) {
    LrSchedule s;
    s.base_ = base;
    std::sort(milestones.begin(), milestones.end());
    s.milestones_ = std::move(milestones);
    s.validate();
    return s;
  }

  /// base * factor^(epoch / every).
  static LrSchedule decay(double base, double factor, int every) {
    if (every <= 0) throw InvalidArgument("every_epochs must be positive");
    LrSchedule s;
    s.base_ = base;
    s.factor_ = factor;
    s.every_ = every;
    s.validate();
    return s;
  }

  double base() const { return base_; }
  bool is_decay() const { return every_ > 0; }

  double rate_at(int epoch) const {
    if (every_ > 0) return base_ * std::pow(factor_, epoch / every_);
    double r = base_;
    for (const auto& [e, rate] : milestones_) {
      if (epoch >= e) r = rate;
    }
    return r;
  }

  LrSchedule with_base(double base) const {
    LrSchedule s = *this;
    s.base_ = base;
    s.validate();
    return s;
  }

  /// `[[epoch, rate], ...]` or `{"decay_factor": f, "every_epochs": k}`.
  nlohmann::json to_json() const {
    if (every_ > 0) return {{"decay_factor", factor_}, {"every_epochs", every_}};
    auto arr = nlohmann::json::array();
    for (const auto& [e, r] : milestones_) arr.push_back({e, r});
    return arr;
  }

  static LrSchedule from_json(const nlohmann::json& j, double base) {
    if (j.is_array()) {
      std::vector<std::pair<int, double>> m;
      for (const auto& e : j) {
        if (!e.is_array() || e.size() != 2) throw InvalidArgument("lr_schedule entries must be [epoch, rate]");
        m.emplace_back(e[0].get<int>(), e[1].get<double>());
      }
      return steps(base, std::move(m));
    }
    if (j.is_object()) {
      return decay(base, j.at("decay_factor").get<double>(), j.at("every_epochs").get<int>());
    }
    throw InvalidArgument("lr_schedule must be a list of [epoch, rate] pairs or a decay rule");
  }

  friend bool operator==(const LrSchedule&, const LrSchedule&) = default;

 private:
  void validate() const {
    if (!(base_ > 0)) throw InvalidArgument("learning rate must be positive");
    for (const auto& [e, r] : milestones_) {
      if (e < 0) throw InvalidArgument("lr_schedule epochs must be non-negative");
      if (!(r > 0)) throw InvalidArgument("lr_schedule rates must be positive");
    }
    if (every_ > 0 && !(factor_ > 0)) throw InvalidArgument("decay_factor must be positive");
  }

  double base_ = 0.1;
  std::vector<std::pair<int, double>> milestones_;
  double factor_ = 1.0;
  int every_ = 0;
};

}  // namespace apn
