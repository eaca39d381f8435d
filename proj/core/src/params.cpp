#include "snipforge/params.hpp"

#include <algorithm>
#include <cmath>

#include "snipforge/rng.hpp"

namespace snipforge {

Tensor ParamStore::add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw PreconditionError("duplicate parameter name: " + name);
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(value.clone(true));
    return tensors_.back();
}

Tensor ParamStore::normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
    return add(name, t);
}

Tensor ParamStore::xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out,
                          Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t = Tensor::zeros({fan_in, fan_out});
    for (double& v : t.mutable_data()) v = rng.uniform(-limit, limit);
    return add(name, t);
}

Tensor ParamStore::constant(const std::string& name, Shape shape, double value) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
    return add(name, t);
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw NotFoundError("no parameter named " + name);
    return tensors_[it->second];
}

std::size_t ParamStore::parameter_count() const {
    std::size_t total = 0;
    for (const auto& t : tensors_) total += t.size();
    return total;
}

void ParamStore::zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
    if (other.names_ != names_) throw FormatError("parameter layouts differ");
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        if (tensors_[i].shape() != other.tensors_[i].shape()) {
            throw FormatError("shape mismatch for " + names_[i]);
        }
        std::copy(other.tensors_[i].data().begin(), other.tensors_[i].data().end(),
                  tensors_[i].mutable_data().begin());
    }
}

Adam::Adam(ParamStore& params, AdamOptions options) : params_(params), options_(options) {
    if (options_.learning_rate <= 0.0) throw PreconditionError("Adam: learning rate must be > 0");
    for (const auto& t : params_.tensors()) {
        first_moment_.emplace_back(t.size(), 0.0);
        second_moment_.emplace_back(t.size(), 0.0);
    }
}

void Adam::step() {
    ++step_;
    double clip_factor = 1.0;
    if (options_.grad_clip > 0.0) {
        double norm_sq = 0.0;
        for (const auto& t : params_.tensors())
            for (double g : t.grad()) norm_sq += g * g;
        const double norm = std::sqrt(norm_sq);
        if (norm > options_.grad_clip) clip_factor = options_.grad_clip / norm;
    }
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    auto& tensors = params_.tensors();
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        Tensor& t = tensors[k];
        if (!t.has_grad()) continue;
        auto values = t.mutable_data();
        auto grads = t.grad();
        auto& m = first_moment_[k];
        auto& v = second_moment_[k];
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double g = grads[i] * clip_factor;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            values[i] -= options_.learning_rate * m_hat / (std::sqrt(v_hat) + options_.epsilon);
        }
    }
}

void adam_step(ParamStore& params, Adam& optimizer) {
    optimizer.step();
    params.zero_grad();
}

GradCheckResult grad_check(const std::function<Tensor()>& objective, std::vector<Tensor> params,
                           double eps, double denominator_floor) {
    if (!(eps > 0.0 && eps <= 1e-3)) {
        throw PreconditionError("grad_check: eps must lie in (0, 1e-3], got " + std::to_string(eps));
    }
    auto evaluate = [&]() {
        NoGradGuard no_grad;
        const double value = objective().item();
        if (!std::isfinite(value)) throw NumericError("grad_check: objective is not finite");
        return value;
    };

    for (auto& p : params) p.zero_grad();
    Tensor out = objective();
    if (!std::isfinite(out.item())) throw NumericError("grad_check: objective is not finite");
    out.backward();

    GradCheckResult result;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k];
        std::vector<double> analytic(p.size(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double plus = evaluate();
            values[i] = saved - eps;
            const double minus = evaluate();
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double abs_err = std::abs(analytic[i] - numeric);
            const double rel_err =
                abs_err / std::max(std::abs(analytic[i]) + std::abs(numeric), denominator_floor);
            result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
            if (rel_err > result.max_relative_error) {
                result.max_relative_error = rel_err;
                result.worst_parameter = "param#" + std::to_string(k) + "[" + std::to_string(i) + "]";
            }
            ++result.elements_checked;
        }
    }
    for (auto& p : params) p.zero_grad();
    return result;
}

}  // namespace snipforge
