#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace debias {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

enum class Activation : std::uint8_t { identity = 0, relu = 1 };

/// Fully connected layer computing act(x * weight + bias) for row inputs.
struct DenseLayer {
    Matrix weight;  // fan_in x fan_out
    RowVector bias; // fan_out
    Activation activation = Activation::identity;

    std::size_t fan_in() const { return static_cast<std::size_t>(weight.rows()); }
    std::size_t fan_out() const { return static_cast<std::size_t>(weight.cols()); }
};

/// The trainable tensors of an MLP. The same structure carries gradients and
/// optimizer moments, which keeps their shapes in lockstep with the model.
struct ParamSet {
    /// Hidden layers followed by the task output layer.
    std::vector<DenseLayer> layers;
    /// Rotation-prediction head reading the last hidden representation.
    std::optional<DenseLayer> aux_head;

    ParamSet zeros_like() const;
    void set_zero();
    ParamSet& operator+=(const ParamSet& other);
    ParamSet& operator*=(double scale);
    bool all_finite() const;
    std::size_t parameter_count() const;
};

/// Which output layer a pass runs through. Both share every hidden layer.
enum class Head { task, rotation };

inline constexpr std::size_t kRotationClasses = 4;

struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t num_classes = 0;
    bool rotation_head = false;
};

class MlpModel {
public:
    /// Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights and zero biases.
    /// The rotation head draws from its own stream so adding it never
    /// changes the initial trunk or task head.
    static MlpModel initialize(const MlpSpec& spec, std::uint64_t seed);

    /// Validates that layer dimensions chain; throws DimensionError.
    explicit MlpModel(ParamSet params);

    std::size_t input_dim() const { return params_.layers.front().fan_in(); }
    std::size_t num_classes() const { return params_.layers.back().fan_out(); }
    std::size_t hidden_depth() const { return params_.layers.size() - 1; }
    bool has_rotation_head() const { return params_.aux_head.has_value(); }

    const ParamSet& params() const { return params_; }
    ParamSet& params() { return params_; }

    /// Number of output units of the given head.
    std::size_t head_width(Head head) const;

private:
    ParamSet params_;
};

/// Activations kept by a training forward pass for the backward sweep.
struct ForwardPass {
    Head head = Head::task;
    /// layer_inputs[k] is the input of the k-th layer on the path
    /// (hidden layers, then the selected head).
    std::vector<Matrix> layer_inputs;
    Matrix logits;
};

/// Batched inference; rows of `inputs` are samples.
Matrix forward(const MlpModel& model, const Matrix& inputs, Head head = Head::task);
ForwardPass forward_pass(const MlpModel& model, const Matrix& inputs, Head head = Head::task);

/// Backpropagates d(objective)/d(logits) through the path of `pass`.
/// Gradients of layers off that path are left as zeros; the rotation head
/// entry is present only when the pass went through it.
ParamSet backward(const MlpModel& model, const ForwardPass& pass, const Matrix& logit_grads);

/// Max-subtracted softmax. Throws InvalidArgument on non-finite input.
std::vector<double> softmax_probs(std::span<const double> logits);
Matrix softmax_rows(const Matrix& logits);

/// 1 - p(label) computed as the sum of the other classes' probabilities,
/// which keeps full relative precision when p(label) is close to 1.
double label_complement(const Matrix& probs, Eigen::Index row, int label);

/// Cross-entropy of one row of logits against a label, via log-sum-exp.
double cross_entropy(const Matrix& logits, Eigen::Index row, int label);

struct BatchGrad {
    ParamSet params;
    /// Row i holds coefficient_i * (softmax(logits_i) - onehot(y_i)) / B.
    Matrix logit_grads;
    /// Objective whose gradient is returned: (1/B) * sum_i coefficient_i * CE_i.
    double mean_loss = 0.0;
};

/// Weighted cross-entropy with weights >= 0 and sign in {+1, -1};
/// sign -1 yields the exact negation (gradient ascent on the same loss).
BatchGrad weighted_cross_entropy_backward(const MlpModel& model, const Matrix& inputs,
                                          std::span<const int> labels,
                                          std::span<const double> weights, int sign,
                                          Head head = Head::task);
BatchGrad weighted_cross_entropy_backward(const MlpModel& model, const ForwardPass& pass,
                                          std::span<const int> labels,
                                          std::span<const double> weights, int sign);

/// Same contract with arbitrary signed per-sample coefficients. `probs` must be
/// softmax_rows(pass.logits); the batch divisor is the number of rows.
BatchGrad signed_cross_entropy_backward(const MlpModel& model, const ForwardPass& pass,
                                        const Matrix& probs, std::span<const int> labels,
                                        std::span<const double> coefficients);

struct GceValue {
    double loss;
    double dloss_dp;
};

/// Generalized cross entropy (1 - p^q)/q and its derivative -p^(q-1).
GceValue gce_loss(double prob_of_label, double q);

/// Mean GCE over the batch. The logit gradient of one sample is
/// p_y^q * (p - onehot(y)) / B.
BatchGrad gce_backward(const MlpModel& model, const ForwardPass& pass, std::span<const int> labels,
                       double q);

struct AdamSettings {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamSettings settings;
    ParamSet m;
    ParamSet v;
    std::uint64_t step = 0;

    static AdamState for_model(const MlpModel& model, AdamSettings settings = {});
};

/// Bias-corrected Adam update. A rotation head without a gradient entry is
/// left untouched together with its moments.
void adam_step(MlpModel& model, const ParamSet& grads, AdamState& state);

/// argmax of each logit row.
std::vector<int> predict(const MlpModel& model, const Matrix& inputs, Head head = Head::task);

} // namespace debias
