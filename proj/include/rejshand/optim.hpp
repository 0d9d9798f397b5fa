#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/params.hpp"

namespace rejshand {

struct AdamOptions {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;
};

/// One bias-corrected Adam update of `param` in place.
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state,
                      const AdamOptions& opt) {
    if (param.size() != grad.size()) {
        throw ContractError("adam_step: param has " + std::to_string(param.size()) + " values, grad has " +
                            std::to_string(grad.size()));
    }
    if (state.m.empty()) {
        state.m.assign(param.size(), 0.0);
        state.v.assign(param.size(), 0.0);
    } else if (state.m.size() != param.size()) {
        throw ContractError("adam_step: state size does not match parameter");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t i = 0; i < param.size(); ++i) {
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * grad[i];
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        param[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    }
}

/// Adam over every tensor of a ParamStore; parameters without a gradient
/// buffer are treated as having zero gradient.
class Adam {
   public:
    explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

    void set_lr(double lr) { opt_.lr = lr; }
    double lr() const { return opt_.lr; }

    void step(ParamStore& params) {
        for (auto& [name, t] : params) {
            auto& st = state_[name];
            if (t.has_grad()) {
                adam_step(t.mutable_data(), t.grad(), st, opt_);
            } else {
                std::vector<double> zero(t.numel(), 0.0);
                adam_step(t.mutable_data(), zero, st, opt_);
            }
        }
    }

   private:
    AdamOptions opt_;
    std::map<std::string, AdamState> state_;
};

}  // namespace rejshand
