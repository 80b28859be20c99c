#include "debias/batching.hpp"

#include <numeric>
#include <string>

#include "debias/error.hpp"

namespace debias {

EpochBatcher::EpochBatcher(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_(batch_size), rng_(seed), order_(n) {
    if (batch_size == 0 || n < batch_size) {
        throw InvalidArgument("batch size " + std::to_string(batch_size) +
                              " needs 1 <= B <= N (N = " + std::to_string(n) + ")");
    }
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = n_; // forces a shuffle on the first call
}

std::span<const std::size_t> EpochBatcher::next() {
    if (cursor_ + batch_ > n_) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(order_);
        cursor_ = 0;
        ++epoch_;
    }
    std::span<const std::size_t> out(order_.data() + cursor_, batch_);
    cursor_ += batch_;
    return out;
}

} // namespace debias
