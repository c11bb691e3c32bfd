#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "wsf/autodiff.hpp"

namespace wsf {

/// Learning-rate schedule over a fixed horizon.
///   cosine: smooth decay from `start` to `end`.
///   staged: `stages` piecewise-constant levels, geometrically spaced from
///           `start` to `end`.
///   constant: always `start`.
struct LrSchedule {
    enum class Kind { constant, cosine, staged };
    Kind kind = Kind::cosine;
    double start = 1e-3;
    double end = 1e-5;
    int total_steps = 1000;
    int stages = 5;

    static LrSchedule constant(double lr) { return {Kind::constant, lr, lr, 1, 1}; }
    static LrSchedule cosine(double start, double end, int total_steps) {
        return {Kind::cosine, start, end, total_steps, 1};
    }
    static LrSchedule staged(double start, double end, int total_steps, int stages = 5) {
        return {Kind::staged, start, end, total_steps, stages};
    }

    double at(int step) const {
        if (kind == Kind::constant) return start;
        if (total_steps <= 1) return end;
        double t = double(std::min(std::max(step, 0), total_steps - 1));
        if (kind == Kind::cosine) {
            double u = t / double(total_steps - 1);
            return end + 0.5 * (start - end) * (1.0 + std::cos(3.14159265358979323846 * u));
        }
        // staged
        int s = std::min(int(t * stages / total_steps), stages - 1);
        if (stages <= 1) return start;
        double ratio = end / start;
        return start * std::pow(ratio, double(s) / double(stages - 1));
    }
};

/// Adam with bias correction. Gradients must be populated (via backward)
/// before step(); non-finite gradients raise.
class Adam {
public:
    explicit Adam(std::vector<Var> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            if (!p.requires_grad()) throw std::invalid_argument("Adam: parameter does not require grad");
            m_.push_back(Tensor::zeros(p.value().shape()));
            v_.push_back(Tensor::zeros(p.value().shape()));
        }
    }

    const std::vector<Var>& params() const { return params_; }
    int64_t step_count() const { return t_; }

    void zero_grad() {
        for (auto& p : params_) const_cast<Var&>(p).zero_grad();
    }

    /// One update with learning rate `lr`. `post_update` (if set) runs after
    /// the parameter write, e.g. to re-impose frozen entries.
    void step(double lr, const std::function<void()>& post_update = nullptr) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, double(t_));
        double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            Var& p = params_[k];
            const Tensor& g = p.grad();
            if (g.empty()) continue; // parameter unused in this graph
            if (!g.all_finite()) throw std::runtime_error("Adam: non-finite gradient encountered");
            Tensor& val = p.mutable_value();
            Tensor& m = m_[k];
            Tensor& v = v_[k];
            for (int64_t i = 0; i < val.numel(); ++i) {
                double gi = g[i];
                double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
                double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                m[i] = float(mi);
                v[i] = float(vi);
                double mhat = mi / bc1;
                double vhat = vi / bc2;
                val[i] = float(val[i] - lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
        if (post_update) post_update();
    }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

/// Exponential moving average of a parameter list's values.
class EmaTracker {
public:
    EmaTracker() = default;
    EmaTracker(const std::vector<Var>& params, double decay) : decay_(decay) {
        for (const auto& p : params) shadow_.push_back(p.value());
    }

    void update(const std::vector<Var>& params) {
        for (size_t k = 0; k < shadow_.size(); ++k) {
            const Tensor& v = params[k].value();
            Tensor& s = shadow_[k];
            for (int64_t i = 0; i < s.numel(); ++i) s[i] = float(decay_ * s[i] + (1.0 - decay_) * v[i]);
        }
    }

    const std::vector<Tensor>& values() const { return shadow_; }

private:
    double decay_ = 0.999;
    std::vector<Tensor> shadow_;
};

} // namespace wsf
