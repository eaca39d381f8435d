#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace snipforge {

// Counting convention shared by the instrumented meter and the analytic model.
// One multiply-accumulate is 2 FLOPs; elementwise add/scale is 1 per element.
// Transcendental-bearing ops are charged a fixed per-element constant.
namespace flops {
inline constexpr std::uint64_t kSoftmaxPerElement = 5;    // max, sub, exp, sum, div
inline constexpr std::uint64_t kGeluPerElement = 8;       // tanh approximation
inline constexpr std::uint64_t kLayerNormPerElement = 8;  // mean, centre, square, var, rsqrt-mul, gain, bias
inline constexpr std::uint64_t kAttentionScalePerElement = 1;
}  // namespace flops

class FlopsMeter {
public:
    void add(std::string_view op, std::uint64_t count);

    std::uint64_t total() const { return total_; }
    const std::map<std::string, std::uint64_t, std::less<>>& per_op() const { return per_op_; }
    void reset();

private:
    std::uint64_t total_ = 0;
    std::map<std::string, std::uint64_t, std::less<>> per_op_;
};

// Routes every op executed on this thread into `meter` for the scope's lifetime.
// Scopes nest; the innermost one wins.
class MeterScope {
public:
    explicit MeterScope(FlopsMeter& meter);
    ~MeterScope();
    MeterScope(const MeterScope&) = delete;
    MeterScope& operator=(const MeterScope&) = delete;

private:
    FlopsMeter* previous_;
};

// No-op when no meter is active on the calling thread.
void record_flops(std::string_view op, std::uint64_t count);

}  // namespace snipforge
