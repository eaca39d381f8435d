#include "snipforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "snipforge/flops.hpp"
#include "snipforge/rng.hpp"

namespace snipforge {

namespace {

thread_local bool t_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t product(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_finite(const char* op, const std::vector<double>& values) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by ") + op);
        }
    }
}

Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                   std::vector<NodePtr> parents, detail::BackwardFn fn) {
    check_finite(op, values);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->op = op;
    const bool needs_grad =
        t_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                      [](const NodePtr& p) { return p->requires_grad; });
    if (needs_grad) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(fn);
    }
    return Tensor(std::move(node));
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
}

void require_matrix(const char* op, const Tensor& a) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " +
                             shape_to_string(a.shape()));
    }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::vector<double>& detail::Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->data.assign(product(shape), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (product(shape) != values.size()) {
        throw DimensionError("Tensor::from: shape " + shape_to_string(shape) + " holds " +
                             std::to_string(product(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    check_finite("Tensor::from", values);
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    const auto& s = node_->shape;
    return s.size() == 2 ? s[0] : 1;
}

std::size_t Tensor::cols() const {
    const auto& s = node_->shape;
    if (s.empty()) return 1;
    return s.back();
}

double Tensor::item() const {
    if (size() != 1) {
        throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
    }
    return node_->data[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone(bool requires_grad) const {
    return from(shape(), node_->data, requires_grad);
}

void Tensor::backward() const {
    if (size() != 1) {
        throw PreconditionError("backward() requires a scalar, got " + shape_to_string(shape()));
    }
    if (!node_->requires_grad) {
        throw PreconditionError("backward() on a tensor that does not require grad");
    }
    // Iterative post-order DFS gives a topological order of the recorded graph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix("matmul", a);
    require_matrix("matmul", b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) +
                             " x " + shape_to_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    record_flops("matmul", 2 * m * n * k);
    return make_result("matmul", {m, n}, std::move(out), {a.node(), b.node()},
                       [m, k, n](Node& self) {
                           Node& na = *self.parents[0];
                           Node& nb = *self.parents[1];
                           if (na.requires_grad) {
                               gemm_nt(self.grad.data(), nb.data.data(),
                                       na.grad_buffer().data(), m, n, k);
                           }
                           if (nb.requires_grad) {
                               gemm_tn(na.data.data(), self.grad.data(),
                                       nb.grad_buffer().data(), m, k, n);
                           }
                       });
}

namespace {

template <typename Fwd, typename DA, typename DB>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da,
                          DB db) {
    require_same_shape(op, a, b);
    std::vector<double> out(a.size());
    const auto& x = a.data();
    const auto& y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i], y[i]);
    record_flops(op, a.size());
    return make_result(op, a.shape(), std::move(out), {a.node(), b.node()},
                       [da, db](Node& self) {
                           Node& na = *self.parents[0];
                           Node& nb = *self.parents[1];
                           if (na.requires_grad) {
                               auto& g = na.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * da(na.data[i], nb.data[i]);
                           }
                           if (nb.requires_grad) {
                               auto& g = nb.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[i] * db(na.data[i], nb.data[i]);
                           }
                       });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= factor;
    record_flops("scale", a.size());
    return make_result("scale", a.shape(), std::move(out), {a.node()}, [factor](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

Tensor add_scalar(const Tensor& a, double value) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v += value;
    record_flops("add_scalar", a.size());
    return make_result("add_scalar", a.shape(), std::move(out), {a.node()}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t m = x.rows(), n = x.cols();
    if (bias.size() != n || bias.rank() > 1) {
        throw DimensionError("add_bias: bias " + shape_to_string(bias.shape()) +
                             " does not match columns of " + shape_to_string(x.shape()));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto& b = bias.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    record_flops("add_bias", m * n);
    return make_result("add_bias", x.shape(), std::move(out), {x.node(), bias.node()},
                       [m, n](Node& self) {
                           Node& nx = *self.parents[0];
                           Node& nb = *self.parents[1];
                           if (nx.requires_grad) {
                               auto& g = nx.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                           }
                           if (nb.requires_grad) {
                               auto& g = nb.grad_buffer();
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                       g[j] += self.grad[i * n + j];
                           }
                       });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    record_flops("sum", a.size());
    return make_result("sum", {}, {total}, {a.node()}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (double& v : g) v += self.grad[0];
    });
}

Tensor transpose(const Tensor& a) {
    require_matrix("transpose", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto& x = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return make_result("transpose", {n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw PreconditionError("concat_rows: no inputs");
    const std::size_t n = parts.front().cols();
    std::size_t total_rows = 0;
    std::vector<NodePtr> parents;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        if (p.rank() == 0 || p.cols() != n) {
            throw DimensionError("concat_rows: column mismatch " +
                                 shape_to_string(parts.front().shape()) + " vs " +
                                 shape_to_string(p.shape()));
        }
        offsets.push_back(total_rows * n);
        total_rows += p.rows();
        parents.push_back(p.node());
    }
    std::vector<double> out;
    out.reserve(total_rows * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_result("concat_rows", {total_rows, n}, std::move(out), std::move(parents),
                       [offsets](Node& self) {
                           for (std::size_t k = 0; k < self.parents.size(); ++k) {
                               Node& p = *self.parents[k];
                               if (!p.requires_grad) continue;
                               auto& g = p.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   g[i] += self.grad[offsets[k] + i];
                           }
                       });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
    require_matrix("slice_rows", a);
    if (begin + count > a.rows()) {
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") out of " +
                             shape_to_string(a.shape()));
    }
    const std::size_t n = a.cols();
    std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + (begin + count) * n);
    return make_result("slice_rows", {count, n}, std::move(out), {a.node()},
                       [begin, n](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                               g[begin * n + i] += self.grad[i];
                       });
}

Tensor row(const Tensor& a, std::size_t index) {
    return reshape(slice_rows(a, index, 1), {a.cols()});
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices) {
    require_matrix("gather_rows", a);
    const std::size_t n = a.cols();
    std::vector<double> out;
    out.reserve(indices.size() * n);
    for (std::size_t idx : indices) {
        if (idx >= a.rows()) {
            throw DimensionError("gather_rows: index " + std::to_string(idx) + " out of " +
                                 shape_to_string(a.shape()));
        }
        out.insert(out.end(), a.data().begin() + idx * n, a.data().begin() + (idx + 1) * n);
    }
    return make_result("gather_rows", {indices.size(), n}, std::move(out), {a.node()},
                       [indices, n](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t r = 0; r < indices.size(); ++r)
                               for (std::size_t j = 0; j < n; ++j)
                                   g[indices[r] * n + j] += self.grad[r * n + j];
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (product(shape) != a.size()) {
        throw DimensionError("reshape: " + shape_to_string(a.shape()) + " to " +
                             shape_to_string(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {a.node()}, [](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor softmax_rows(const Tensor& x, const Mask& mask) {
    const std::size_t m = x.rows(), n = x.cols();
    if (!mask.empty() && mask.size() != m * n) {
        throw DimensionError("softmax_rows: mask of " + std::to_string(mask.size()) +
                             " entries for " + shape_to_string(x.shape()));
    }
    auto keep = [&](std::size_t i) { return mask.empty() || mask[i]; };
    std::vector<double> out(m * n, 0.0);
    const auto& v = x.data();
    for (std::size_t i = 0; i < m; ++i) {
        double max_v = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (keep(i * n + j)) max_v = std::max(max_v, v[i * n + j]);
        if (max_v == -std::numeric_limits<double>::infinity()) {
            throw DegenerateInputError("softmax_rows: row " + std::to_string(i) +
                                       " is fully masked");
        }
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!keep(i * n + j)) continue;
            out[i * n + j] = std::exp(v[i * n + j] - max_v);
            total += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= total;
    }
    record_flops("softmax", flops::kSoftmaxPerElement * m * n);
    Shape shape = x.shape();
    return make_result("softmax_rows", std::move(shape), out, {x.node()},
                       [out, m, n](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < m; ++i) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j)
                                   dot += out[i * n + j] * self.grad[i * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] += out[i * n + j] * (self.grad[i * n + j] - dot);
                           }
                       });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n) {
        throw DimensionError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                             shape_to_string(bias.shape()) + " for " + shape_to_string(x.shape()));
    }
    std::vector<double> normalized(m * n), inv_std(m), out(m * n);
    const auto& v = x.data();
    const auto& g = gain.data();
    const auto& b = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += v[i * n + j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double c = v[i * n + j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            normalized[i * n + j] = (v[i * n + j] - mean) * inv_std[i];
            out[i * n + j] = normalized[i * n + j] * g[j] + b[j];
        }
    }
    record_flops("layer_norm", flops::kLayerNormPerElement * m * n);
    return make_result(
        "layer_norm", x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
        [normalized = std::move(normalized), inv_std = std::move(inv_std), m, n](Node& self) {
            Node& nx = *self.parents[0];
            Node& ng = *self.parents[1];
            Node& nb = *self.parents[2];
            if (ng.requires_grad) {
                auto& gg = ng.grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        gg[j] += self.grad[i * n + j] * normalized[i * n + j];
            }
            if (nb.requires_grad) {
                auto& gb = nb.grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
            }
            if (nx.requires_grad) {
                auto& gx = nx.grad_buffer();
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double sum_d = 0.0, sum_dx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = self.grad[i * n + j] * ng.data[j];
                        sum_d += d;
                        sum_dx += d * normalized[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = self.grad[i * n + j] * ng.data[j];
                        gx[i * n + j] += inv_std[i] * (d - inv_n * sum_d -
                                                       normalized[i * n + j] * inv_n * sum_dx);
                    }
                }
            }
        });
}

Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
    constexpr double kA = 0.044715;
    std::vector<double> out(x.size());
    const auto& v = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double u = v[i];
        out[i] = 0.5 * u * (1.0 + std::tanh(kC * (u + kA * u * u * u)));
    }
    record_flops("gelu", flops::kGeluPerElement * x.size());
    return make_result("gelu", x.shape(), std::move(out), {x.node()}, [](Node& self) {
        Node& nx = *self.parents[0];
        auto& g = nx.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double u = nx.data[i];
            const double t = std::tanh(kC * (u + kA * u * u * u));
            const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * u * u);
            g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * u * dt);
        }
    });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    require_matrix("embedding_lookup", table);
    const std::size_t vocab = table.rows(), d = table.cols();
    std::vector<double> out;
    out.reserve(ids.size() * d);
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw DimensionError("embedding_lookup: id " + std::to_string(id) +
                                 " outside table " + shape_to_string(table.shape()));
        }
        const auto start = table.data().begin() + static_cast<std::ptrdiff_t>(id) * d;
        out.insert(out.end(), start, start + d);
    }
    return make_result("embedding_lookup", {ids.size(), d}, std::move(out), {table.node()},
                       [ids, d](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t r = 0; r < ids.size(); ++r)
                               for (std::size_t j = 0; j < d; ++j)
                                   g[static_cast<std::size_t>(ids[r]) * d + j] +=
                                       self.grad[r * d + j];
                       });
}

Tensor cross_entropy_from_logits(const Tensor& logits, std::size_t gold, const Mask& mask) {
    if (logits.rows() != 1) {
        throw DimensionError("cross_entropy_from_logits: expected one row of logits, got " +
                             shape_to_string(logits.shape()));
    }
    const std::size_t n = logits.cols();
    if (!mask.empty() && mask.size() != n) {
        throw DimensionError("cross_entropy_from_logits: mask length " +
                             std::to_string(mask.size()) + " for " + std::to_string(n) +
                             " logits");
    }
    if (gold >= n) {
        throw PreconditionError("cross_entropy_from_logits: gold index " + std::to_string(gold) +
                                " out of " + std::to_string(n));
    }
    if (!mask.empty() && !mask[gold]) {
        throw PreconditionError("cross_entropy_from_logits: gold index " + std::to_string(gold) +
                                " is masked");
    }
    auto keep = [&](std::size_t j) { return mask.empty() || mask[j]; };
    const auto& v = logits.data();
    double max_v = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
        if (keep(j)) max_v = std::max(max_v, v[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        if (keep(j)) total += std::exp(v[j] - max_v);
    const double log_z = max_v + std::log(total);
    // log1p form keeps precision when the gold logit dominates.
    const double rest = total - std::exp(v[gold] - max_v);
    const double loss = (v[gold] == max_v) ? std::log1p(rest) : log_z - v[gold];
    std::vector<double> probs(n, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        if (keep(j)) probs[j] = std::exp(v[j] - log_z);
    record_flops("cross_entropy", flops::kSoftmaxPerElement * n);
    return make_result("cross_entropy", {}, {loss}, {logits.node()},
                       [probs = std::move(probs), gold](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t j = 0; j < g.size(); ++j)
                               g[j] += self.grad[0] * (probs[j] - (j == gold ? 1.0 : 0.0));
                       });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw PreconditionError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    }
    if (rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> factor(x.size());
    for (double& f : factor) f = rng.bernoulli(rate) ? 0.0 : keep_scale;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
    record_flops("dropout", x.size());
    return make_result("dropout", x.shape(), std::move(out), {x.node()},
                       [factor = std::move(factor)](Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i)
                               g[i] += self.grad[i] * factor[i];
                       });
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t heads, const Mask& query_mask, const Mask& key_mask,
                            AttentionTrace* trace) {
    require_matrix("multi_head_attention", q);
    require_matrix("multi_head_attention", k);
    require_matrix("multi_head_attention", v);
    const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != m) {
        throw DimensionError("multi_head_attention: q " + shape_to_string(q.shape()) + ", k " +
                             shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()));
    }
    if (heads == 0 || d % heads != 0) {
        throw DimensionError("multi_head_attention: width " + std::to_string(d) +
                             " not divisible by " + std::to_string(heads) + " heads");
    }
    if ((!query_mask.empty() && query_mask.size() != n) ||
        (!key_mask.empty() && key_mask.size() != m)) {
        throw DimensionError("multi_head_attention: mask length mismatch");
    }
    auto q_keep = [&](std::size_t i) { return query_mask.empty() || query_mask[i]; };
    auto k_keep = [&](std::size_t j) { return key_mask.empty() || key_mask[j]; };

    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();

    // probs[h][i][j]
    std::vector<double> probs(heads * n * m, 0.0);
    std::vector<double> out(n * d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
            if (!q_keep(i)) continue;
            double* p = probs.data() + (h * n + i) * m;
            double max_v = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < m; ++j) {
                if (!k_keep(j)) continue;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += qd[i * d + off + c] * kd[j * d + off + c];
                p[j] = acc * inv_sqrt;
                max_v = std::max(max_v, p[j]);
            }
            if (max_v == -std::numeric_limits<double>::infinity()) {
                throw DegenerateInputError("multi_head_attention: query row " + std::to_string(i) +
                                           " has no unmasked key");
            }
            double total = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                if (!k_keep(j)) continue;
                p[j] = std::exp(p[j] - max_v);
                total += p[j];
            }
            for (std::size_t j = 0; j < m; ++j) p[j] /= total;
            for (std::size_t j = 0; j < m; ++j) {
                if (p[j] == 0.0) continue;
                for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += p[j] * vd[j * d + off + c];
            }
        }
    }
    record_flops("attention_scores", 2 * n * m * d);
    record_flops("attention_scale", flops::kAttentionScalePerElement * n * m * heads);
    record_flops("softmax", flops::kSoftmaxPerElement * n * m * heads);
    record_flops("attention_context", 2 * n * m * d);

    if (trace) {
        trace->query_rows = n;
        trace->key_rows = m;
        trace->probabilities.clear();
        for (std::size_t h = 0; h < heads; ++h) {
            std::vector<double> slice(probs.begin() + h * n * m, probs.begin() + (h + 1) * n * m);
            trace->probabilities.push_back(Tensor::from({n, m}, std::move(slice)));
        }
    }

    return make_result(
        "multi_head_attention", {n, d}, std::move(out), {q.node(), k.node(), v.node()},
        [probs = std::move(probs), heads, n, m, d, dh, inv_sqrt](Node& self) {
            Node& nq = *self.parents[0];
            Node& nk = *self.parents[1];
            Node& nv = *self.parents[2];
            auto grad_of = [&](Node& node) -> double* {
                return node.requires_grad ? node.grad_buffer().data() : nullptr;
            };
            double* gq = grad_of(nq);
            double* gk = grad_of(nk);
            double* gv = grad_of(nv);
            const double* dout = self.grad.data();
            std::vector<double> dp(m);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t off = h * dh;
                for (std::size_t i = 0; i < n; ++i) {
                    const double* p = probs.data() + (h * n + i) * m;
                    double weighted = 0.0;
                    bool any = false;
                    for (std::size_t j = 0; j < m; ++j) {
                        if (p[j] == 0.0) {
                            dp[j] = 0.0;
                            continue;
                        }
                        any = true;
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c)
                            acc += dout[i * d + off + c] * nv.data[j * d + off + c];
                        dp[j] = acc;
                        weighted += p[j] * acc;
                        if (gv) {
                            for (std::size_t c = 0; c < dh; ++c)
                                gv[j * d + off + c] += p[j] * dout[i * d + off + c];
                        }
                    }
                    if (!any) continue;
                    for (std::size_t j = 0; j < m; ++j) {
                        if (p[j] == 0.0) continue;
                        const double ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                        if (gq) {
                            for (std::size_t c = 0; c < dh; ++c)
                                gq[i * d + off + c] += ds * nk.data[j * d + off + c];
                        }
                        if (gk) {
                            for (std::size_t c = 0; c < dh; ++c)
                                gk[j * d + off + c] += ds * nq.data[i * d + off + c];
                        }
                    }
                }
            }
        });
}

}  // namespace snipforge
