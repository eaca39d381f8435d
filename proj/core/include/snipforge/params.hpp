#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "snipforge/tensor.hpp"

namespace snipforge {

class Rng;

// Named, ordered collection of trainable tensors. Registration order is the
// serialization order, so two stores built by the same code line up.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor value);
    Tensor normal(const std::string& name, Shape shape, double stddev, Rng& rng);
    Tensor xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng);
    Tensor constant(const std::string& name, Shape shape, double value);

    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::string>& names() const { return names_; }
    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }
    std::size_t parameter_count() const;

    void zero_grad();
    // Copies values from `other`; names and shapes must agree.
    void copy_values_from(const ParamStore& other);

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

struct AdamOptions {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Global L2 norm clip; 0 disables.
    double grad_clip = 0.0;
};

class Adam {
public:
    Adam(ParamStore& params, AdamOptions options);

    // One update from the gradients currently accumulated on the parameters.
    void step();
    std::int64_t steps() const { return step_; }
    const AdamOptions& options() const { return options_; }

private:
    ParamStore& params_;
    AdamOptions options_;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
    std::int64_t step_ = 0;
};

void adam_step(ParamStore& params, Adam& optimizer);

// Worst element-wise relative error between reverse-mode gradients of `objective`
// and central finite differences, over every element of every tensor in `params`.
// Relative error is |a - n| / max(|a| + |n|, denominator_floor).
struct GradCheckResult {
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::string worst_parameter;
    std::size_t elements_checked = 0;
};

GradCheckResult grad_check(const std::function<Tensor()>& objective, std::vector<Tensor> params,
                           double eps = 1e-5, double denominator_floor = 1e-6);

}  // namespace snipforge
