#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "snipforge/errors.hpp"

namespace snipforge {

class Rng;

using Shape = std::vector<std::size_t>;
using Mask = std::vector<bool>;

std::string shape_to_string(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    std::vector<double>& grad_buffer();
};

}  // namespace detail

// Dense row-major f64 array of rank 0, 1 or 2 with reverse-mode gradient support.
// Copies share the underlying node; `clone` detaches.
class Tensor {
public:
    Tensor();

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor identity(std::size_t n);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    // Rank-1 tensors behave as a single row in matrix ops.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const { return node_->data; }
    // Direct write access, used by optimizers, grad checks and initializers.
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
    double operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad();

    // Reverse sweep from a scalar; gradients accumulate into every reachable leaf.
    void backward() const;

    // Fresh leaf with copied values and no history.
    Tensor clone(bool requires_grad = false) const;
    Tensor detach() const { return clone(false); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

// Disables graph recording on the current thread; inference runs under this.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Capture of per-head attention probabilities for probes and tests.
struct AttentionTrace {
    std::size_t query_rows = 0;
    std::size_t key_rows = 0;
    std::vector<Tensor> probabilities;  // one [query_rows x key_rows] per head
};

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// x[m x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count);
// Row `index` of a matrix as a rank-1 tensor.
Tensor row(const Tensor& a, std::size_t index);
// Rows gathered in the given order.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices);
Tensor reshape(const Tensor& a, Shape shape);

// Row softmax with optional mask (row-major, true = keep). Masked entries are exactly 0.
Tensor softmax_rows(const Tensor& x, const Mask& mask = {});
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
// -log softmax(logits)[gold] over unmasked entries. `logits` is rank-1 or a single row.
Tensor cross_entropy_from_logits(const Tensor& logits, std::size_t gold, const Mask& mask = {});
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// Multi-head scaled dot-product attention of q[n x d] over k, v[m x d].
// Masked query rows produce zero output; masked keys receive zero weight.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads, const Mask& query_mask,
                            const Mask& key_mask, AttentionTrace* trace = nullptr);

}  // namespace snipforge
