#include "snipforge/flops.hpp"

namespace snipforge {

namespace {
thread_local FlopsMeter* t_meter = nullptr;
}

void FlopsMeter::add(std::string_view op, std::uint64_t count) {
    total_ += count;
    auto it = per_op_.find(op);
    if (it == per_op_.end()) {
        per_op_.emplace(std::string(op), count);
    } else {
        it->second += count;
    }
}

void FlopsMeter::reset() {
    total_ = 0;
    per_op_.clear();
}

MeterScope::MeterScope(FlopsMeter& meter) : previous_(t_meter) { t_meter = &meter; }

MeterScope::~MeterScope() { t_meter = previous_; }

void record_flops(std::string_view op, std::uint64_t count) {
    if (t_meter) t_meter->add(op, count);
}

}  // namespace snipforge
