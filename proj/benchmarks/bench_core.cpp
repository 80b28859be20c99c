// Hot paths of one training iteration at the colored-MNIST shape
// (3x28x28 inputs, 3x100 hidden, batch 256).

#include <benchmark/benchmark.h>

#include "debias/metrics.hpp"
#include "debias/nn.hpp"
#include "debias/rng.hpp"
#include "debias/trainers.hpp"

using namespace debias;

namespace {

constexpr std::size_t kInput = 3 * 28 * 28;
constexpr Eigen::Index kBatch = 256;

MlpSpec mnist_spec(bool rotation_head = false) {
    return {kInput, {100, 100, 100}, 10, rotation_head};
}

Matrix random_batch(Eigen::Index rows, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(rows, static_cast<Eigen::Index>(kInput));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
    return m;
}

std::vector<int> random_labels(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.below(10));
    return y;
}

void BM_Forward(benchmark::State& state) {
    const MlpModel model = MlpModel::initialize(mnist_spec(), 1);
    const Matrix x = random_batch(state.range(0), 2);
    for (auto _ : state) benchmark::DoNotOptimize(forward(model, x));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(kBatch)->Arg(1024);

void BM_ForwardBackwardStep(benchmark::State& state) {
    MlpModel model = MlpModel::initialize(mnist_spec(), 1);
    const Matrix x = random_batch(kBatch, 2);
    const auto y = random_labels(kBatch, 3);
    const std::vector<double> w(kBatch, 1.0);
    AdamState adam = AdamState::for_model(model);
    for (auto _ : state) {
        const BatchGrad g = weighted_cross_entropy_backward(model, x, y, w, +1);
        adam_step(model, g.params, adam);
    }
    state.SetItemsProcessed(state.iterations() * kBatch);
}
BENCHMARK(BM_ForwardBackwardStep);

void BM_GaRatio(benchmark::State& state) {
    const MlpModel model = MlpModel::initialize(mnist_spec(), 1);
    const Matrix probs = softmax_rows(forward(model, random_batch(kBatch, 2)));
    const auto y = random_labels(kBatch, 3);
    std::vector<std::uint8_t> flags(kBatch, 0);
    for (std::size_t i = 0; i < flags.size(); i += 50) flags[i] = 1;
    for (auto _ : state) benchmark::DoNotOptimize(ga_ratio(probs, y, flags, 1.6));
}
BENCHMARK(BM_GaRatio);

void BM_RotationLoss(benchmark::State& state) {
    const MlpModel model = MlpModel::initialize(mnist_spec(true), 1);
    const Matrix x = random_batch(kBatch, 2);
    const ImageShape shape{3, 28, 28};
    for (auto _ : state) benchmark::DoNotOptimize(rotation_loss(model, x, shape, 1.0));
    state.SetItemsProcessed(state.iterations() * kBatch);
}
BENCHMARK(BM_RotationLoss);

void BM_AveragePrecision(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(4);
    std::vector<double> scores(n);
    std::vector<std::uint8_t> truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        truth[i] = rng.uniform() < 0.02;
        scores[i] = rng.uniform() + (truth[i] ? 0.5 : 0.0);
    }
    for (auto _ : state) benchmark::DoNotOptimize(average_precision(scores, truth));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_AveragePrecision)->Arg(10000)->Arg(60000);

} // namespace

BENCHMARK_MAIN();
