#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "debias/rng.hpp"

namespace debias {

/// Yields shuffled mini-batches of sample indices, reshuffling at every epoch
/// boundary. The trailing partial batch of an epoch is dropped so every
/// iteration sees exactly B samples.
class EpochBatcher {
public:
    EpochBatcher(std::size_t n, std::size_t batch_size, std::uint64_t seed);

    std::span<const std::size_t> next();

    std::size_t batches_per_epoch() const { return n_ / batch_; }
    std::size_t batch_size() const { return batch_; }
    /// Number of epochs started so far.
    std::size_t epoch() const { return epoch_; }

private:
    std::size_t n_;
    std::size_t batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

} // namespace debias
