#include "debias/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "debias/error.hpp"
#include "debias/rng.hpp"

namespace debias {

namespace {

DenseLayer zero_layer_like(const DenseLayer& layer) {
    DenseLayer out;
    out.weight = Matrix::Zero(layer.weight.rows(), layer.weight.cols());
    out.bias = RowVector::Zero(layer.bias.size());
    out.activation = layer.activation;
    return out;
}

DenseLayer init_layer(std::size_t fan_in, std::size_t fan_out, Activation act, Rng& rng) {
    DenseLayer layer;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    layer.weight.resize(static_cast<Eigen::Index>(fan_in), static_cast<Eigen::Index>(fan_out));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
            layer.weight(r, c) = rng.uniform(-bound, bound);
        }
    }
    layer.bias = RowVector::Zero(static_cast<Eigen::Index>(fan_out));
    layer.activation = act;
    return layer;
}

template <class F>
void for_each_layer_pair(ParamSet& a, const ParamSet& b, F&& fn) {
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        fn(a.layers[i], b.layers[i]);
    }
    if (a.aux_head && b.aux_head) {
        fn(*a.aux_head, *b.aux_head);
    }
}

void check_batch(const MlpModel& model, const Matrix& inputs) {
    if (inputs.rows() == 0) {
        throw DimensionError("forward: empty batch");
    }
    if (static_cast<std::size_t>(inputs.cols()) != model.input_dim()) {
        throw DimensionError("forward: layer 0 expects " + std::to_string(model.input_dim()) +
                             " inputs, batch has " + std::to_string(inputs.cols()));
    }
}

const DenseLayer& head_layer(const MlpModel& model, Head head) {
    if (head == Head::rotation) {
        if (!model.has_rotation_head()) {
            throw InvalidArgument("model has no rotation head");
        }
        return *model.params().aux_head;
    }
    return model.params().layers.back();
}

Matrix apply_layer(const DenseLayer& layer, const Matrix& input) {
    Matrix out = input * layer.weight;
    out.rowwise() += layer.bias;
    if (layer.activation == Activation::relu) {
        out = out.cwiseMax(0.0);
    }
    return out;
}

void check_labels(std::span<const int> labels, Eigen::Index rows, std::size_t classes) {
    if (static_cast<Eigen::Index>(labels.size()) != rows) {
        throw DimensionError("label count " + std::to_string(labels.size()) + " != batch size " +
                             std::to_string(rows));
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw InvalidArgument("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(classes) + ")");
        }
    }
}

} // namespace

ParamSet ParamSet::zeros_like() const {
    ParamSet out;
    out.layers.reserve(layers.size());
    for (const auto& layer : layers) {
        out.layers.push_back(zero_layer_like(layer));
    }
    if (aux_head) {
        out.aux_head = zero_layer_like(*aux_head);
    }
    return out;
}

void ParamSet::set_zero() {
    for (auto& layer : layers) {
        layer.weight.setZero();
        layer.bias.setZero();
    }
    if (aux_head) {
        aux_head->weight.setZero();
        aux_head->bias.setZero();
    }
}

ParamSet& ParamSet::operator+=(const ParamSet& other) {
    if (other.layers.size() != layers.size()) {
        throw DimensionError("ParamSet += with mismatched layer count");
    }
    for_each_layer_pair(*this, other, [](DenseLayer& a, const DenseLayer& b) {
        a.weight += b.weight;
        a.bias += b.bias;
    });
    if (!aux_head && other.aux_head) {
        aux_head = other.aux_head;
    }
    return *this;
}

ParamSet& ParamSet::operator*=(double scale) {
    for (auto& layer : layers) {
        layer.weight *= scale;
        layer.bias *= scale;
    }
    if (aux_head) {
        aux_head->weight *= scale;
        aux_head->bias *= scale;
    }
    return *this;
}

bool ParamSet::all_finite() const {
    for (const auto& layer : layers) {
        if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
            return false;
        }
    }
    return !aux_head || (aux_head->weight.allFinite() && aux_head->bias.allFinite());
}

std::size_t ParamSet::parameter_count() const {
    std::size_t count = 0;
    for (const auto& layer : layers) {
        count += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
    }
    if (aux_head) {
        count += static_cast<std::size_t>(aux_head->weight.size() + aux_head->bias.size());
    }
    return count;
}

MlpModel MlpModel::initialize(const MlpSpec& spec, std::uint64_t seed) {
    if (spec.input_dim == 0 || spec.num_classes == 0) {
        throw InvalidArgument("MLP needs a positive input dimension and class count");
    }
    Rng rng(seed);
    ParamSet params;
    std::size_t fan_in = spec.input_dim;
    for (std::size_t width : spec.hidden) {
        if (width == 0) {
            throw InvalidArgument("hidden layer width must be positive");
        }
        params.layers.push_back(init_layer(fan_in, width, Activation::relu, rng));
        fan_in = width;
    }
    params.layers.push_back(init_layer(fan_in, spec.num_classes, Activation::identity, rng));
    if (spec.rotation_head) {
        Rng aux_rng(derive_seed(seed, "rotation-head"));
        params.aux_head = init_layer(fan_in, kRotationClasses, Activation::identity, aux_rng);
    }
    return MlpModel(std::move(params));
}

MlpModel::MlpModel(ParamSet params) : params_(std::move(params)) {
    if (params_.layers.empty()) {
        throw DimensionError("MLP needs at least an output layer");
    }
    for (std::size_t k = 0; k < params_.layers.size(); ++k) {
        const auto& layer = params_.layers[k];
        if (static_cast<std::size_t>(layer.bias.size()) != layer.fan_out()) {
            throw DimensionError("layer " + std::to_string(k) + ": bias length " +
                                 std::to_string(layer.bias.size()) + " != fan_out " +
                                 std::to_string(layer.fan_out()));
        }
        if (k > 0 && params_.layers[k - 1].fan_out() != layer.fan_in()) {
            throw DimensionError("layer " + std::to_string(k) + ": fan_in " +
                                 std::to_string(layer.fan_in()) + " does not match previous fan_out " +
                                 std::to_string(params_.layers[k - 1].fan_out()));
        }
    }
    if (params_.aux_head) {
        const std::size_t trunk_width = params_.layers.back().fan_in();
        if (params_.aux_head->fan_in() != trunk_width ||
            params_.aux_head->fan_out() != kRotationClasses ||
            static_cast<std::size_t>(params_.aux_head->bias.size()) != kRotationClasses) {
            throw DimensionError("rotation head must map the trunk width " + std::to_string(trunk_width) +
                                 " to 4 outputs");
        }
    }
}

std::size_t MlpModel::head_width(Head head) const {
    return head == Head::rotation ? kRotationClasses : num_classes();
}

Matrix forward(const MlpModel& model, const Matrix& inputs, Head head) {
    check_batch(model, inputs);
    const auto& layers = model.params().layers;
    const DenseLayer& out_layer = head_layer(model, head);
    if (layers.size() == 1) {
        return apply_layer(out_layer, inputs);
    }
    Matrix h = apply_layer(layers[0], inputs);
    for (std::size_t k = 1; k + 1 < layers.size(); ++k) {
        h = apply_layer(layers[k], h);
    }
    return apply_layer(out_layer, h);
}

ForwardPass forward_pass(const MlpModel& model, const Matrix& inputs, Head head) {
    check_batch(model, inputs);
    const auto& layers = model.params().layers;
    const DenseLayer& out_layer = head_layer(model, head);
    ForwardPass pass;
    pass.head = head;
    pass.layer_inputs.reserve(layers.size());
    pass.layer_inputs.push_back(inputs);
    for (std::size_t k = 0; k + 1 < layers.size(); ++k) {
        pass.layer_inputs.push_back(apply_layer(layers[k], pass.layer_inputs.back()));
    }
    pass.logits = apply_layer(out_layer, pass.layer_inputs.back());
    return pass;
}

ParamSet backward(const MlpModel& model, const ForwardPass& pass, const Matrix& logit_grads) {
    const auto& layers = model.params().layers;
    const std::size_t depth = layers.size();
    if (pass.layer_inputs.size() != depth) {
        throw DimensionError("backward: forward pass does not belong to this model");
    }
    if (logit_grads.rows() != pass.logits.rows() || logit_grads.cols() != pass.logits.cols()) {
        throw DimensionError("backward: logit gradient shape differs from logits");
    }
    ParamSet grads;
    grads.layers.reserve(depth);
    for (const auto& layer : layers) {
        grads.layers.push_back(zero_layer_like(layer));
    }

    const DenseLayer& out_layer = head_layer(model, pass.head);
    DenseLayer out_grad;
    out_grad.activation = Activation::identity;
    out_grad.weight.noalias() = pass.layer_inputs[depth - 1].transpose() * logit_grads;
    out_grad.bias = logit_grads.colwise().sum();

    Matrix delta;
    if (depth > 1) {
        delta.noalias() = logit_grads * out_layer.weight.transpose();
    }
    if (pass.head == Head::rotation) {
        grads.aux_head = std::move(out_grad);
    } else {
        grads.layers[depth - 1] = std::move(out_grad);
    }

    for (std::size_t k = depth - 1; k-- > 0;) {
        // layer_inputs[k + 1] is the rectified output of hidden layer k.
        delta = delta.cwiseProduct((pass.layer_inputs[k + 1].array() > 0.0).cast<double>().matrix());
        grads.layers[k].weight.noalias() = pass.layer_inputs[k].transpose() * delta;
        grads.layers[k].bias = delta.colwise().sum();
        if (k > 0) {
            Matrix next;
            next.noalias() = delta * layers[k].weight.transpose();
            delta = std::move(next);
        }
    }
    return grads;
}

std::vector<double> softmax_probs(std::span<const double> logits) {
    if (logits.empty()) {
        throw InvalidArgument("softmax of an empty vector");
    }
    double max_logit = logits[0];
    for (double z : logits) {
        if (!std::isfinite(z)) {
            throw InvalidArgument("softmax: non-finite logit");
        }
        max_logit = std::max(max_logit, z);
    }
    std::vector<double> out(logits.size());
    double total = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        out[c] = std::exp(logits[c] - max_logit);
        total += out[c];
    }
    for (double& p : out) {
        p /= total;
    }
    return out;
}

Matrix softmax_rows(const Matrix& logits) {
    if (!logits.allFinite()) {
        throw InvalidArgument("softmax: non-finite logit");
    }
    Matrix probs = logits;
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        auto row = probs.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
    }
    return probs;
}

double label_complement(const Matrix& probs, Eigen::Index row, int label) {
    double rest = 0.0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
        if (c != label) {
            rest += probs(row, c);
        }
    }
    return rest;
}

double cross_entropy(const Matrix& logits, Eigen::Index row, int label) {
    const auto z = logits.row(row);
    const double max_logit = z.maxCoeff();
    const double lse = max_logit + std::log((z.array() - max_logit).exp().sum());
    return lse - z(label);
}

BatchGrad signed_cross_entropy_backward(const MlpModel& model, const ForwardPass& pass,
                                        const Matrix& probs, std::span<const int> labels,
                                        std::span<const double> coefficients) {
    const Eigen::Index rows = pass.logits.rows();
    check_labels(labels, rows, model.head_width(pass.head));
    if (static_cast<Eigen::Index>(coefficients.size()) != rows) {
        throw DimensionError("coefficient count differs from batch size");
    }
    const double inv_batch = 1.0 / static_cast<double>(rows);
    BatchGrad out;
    out.logit_grads = probs;
    for (Eigen::Index i = 0; i < rows; ++i) {
        const double coeff = coefficients[static_cast<std::size_t>(i)];
        const int y = labels[static_cast<std::size_t>(i)];
        auto g = out.logit_grads.row(i);
        g(y) -= 1.0;
        g *= coeff * inv_batch;
        if (coeff != 0.0) {
            out.mean_loss += coeff * cross_entropy(pass.logits, i, y);
        }
    }
    out.mean_loss *= inv_batch;
    out.params = backward(model, pass, out.logit_grads);
    return out;
}

BatchGrad weighted_cross_entropy_backward(const MlpModel& model, const ForwardPass& pass,
                                          std::span<const int> labels,
                                          std::span<const double> weights, int sign) {
    if (sign != 1 && sign != -1) {
        throw InvalidArgument("sign must be +1 or -1");
    }
    std::vector<double> coefficients(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!(weights[i] >= 0.0)) {
            throw InvalidArgument("per-sample weights must be non-negative");
        }
        coefficients[i] = sign * weights[i];
    }
    return signed_cross_entropy_backward(model, pass, softmax_rows(pass.logits), labels, coefficients);
}

BatchGrad weighted_cross_entropy_backward(const MlpModel& model, const Matrix& inputs,
                                          std::span<const int> labels,
                                          std::span<const double> weights, int sign, Head head) {
    return weighted_cross_entropy_backward(model, forward_pass(model, inputs, head), labels, weights,
                                           sign);
}

GceValue gce_loss(double prob_of_label, double q) {
    if (!(q > 0.0 && q <= 1.0)) {
        throw InvalidArgument("GCE exponent q must lie in (0, 1]");
    }
    if (!(prob_of_label > 0.0 && prob_of_label <= 1.0)) {
        throw InvalidArgument("GCE needs a probability in (0, 1]");
    }
    return {(1.0 - std::pow(prob_of_label, q)) / q, -std::pow(prob_of_label, q - 1.0)};
}

BatchGrad gce_backward(const MlpModel& model, const ForwardPass& pass, std::span<const int> labels,
                       double q) {
    const Eigen::Index rows = pass.logits.rows();
    check_labels(labels, rows, model.head_width(pass.head));
    const double inv_batch = 1.0 / static_cast<double>(rows);
    BatchGrad out;
    out.logit_grads = softmax_rows(pass.logits);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        auto g = out.logit_grads.row(i);
        // p_y can underflow to 0 for a badly misclassified sample; its GCE
        // gradient vanishes there anyway.
        const double p = std::max(g(y), std::numeric_limits<double>::min());
        const GceValue value = gce_loss(p, q);
        out.mean_loss += value.loss;
        // dL/dz = dL/dp * p * (onehot - p) = p^q * (p - onehot)
        const double scale = std::pow(p, q) * inv_batch;
        g(y) -= 1.0;
        g *= scale;
    }
    out.mean_loss *= inv_batch;
    out.params = backward(model, pass, out.logit_grads);
    return out;
}

AdamState AdamState::for_model(const MlpModel& model, AdamSettings settings) {
    AdamState state;
    state.settings = settings;
    state.m = model.params().zeros_like();
    state.v = model.params().zeros_like();
    return state;
}

namespace {

template <class Param, class Grad, class Moment>
void adam_update(Param&& param, const Grad& grad, Moment&& m, Moment&& v, const AdamSettings& s,
                 double correction1, double correction2) {
    m = s.beta1 * m + (1.0 - s.beta1) * grad;
    v = s.beta2 * v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
    param.array() -= s.learning_rate * (m.array() / correction1) /
                     ((v.array() / correction2).sqrt() + s.epsilon);
}

void adam_layer(DenseLayer& param, const DenseLayer& grad, DenseLayer& m, DenseLayer& v,
                const AdamSettings& s, double c1, double c2) {
    adam_update(param.weight, grad.weight, m.weight, v.weight, s, c1, c2);
    adam_update(param.bias, grad.bias, m.bias, v.bias, s, c1, c2);
}

} // namespace

void adam_step(MlpModel& model, const ParamSet& grads, AdamState& state) {
    ParamSet& params = model.params();
    if (grads.layers.size() != params.layers.size() || state.m.layers.size() != params.layers.size()) {
        throw DimensionError("adam_step: gradient or state shape does not match the model");
    }
    if (params.aux_head && (!state.m.aux_head || !state.v.aux_head)) {
        throw DimensionError("adam_step: optimizer state lacks the rotation head");
    }
    state.step += 1;
    const auto t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.settings.beta1, t);
    const double c2 = 1.0 - std::pow(state.settings.beta2, t);
    for (std::size_t k = 0; k < params.layers.size(); ++k) {
        adam_layer(params.layers[k], grads.layers[k], state.m.layers[k], state.v.layers[k],
                   state.settings, c1, c2);
    }
    if (params.aux_head && grads.aux_head) {
        adam_layer(*params.aux_head, *grads.aux_head, *state.m.aux_head, *state.v.aux_head,
                   state.settings, c1, c2);
    }
}

std::vector<int> predict(const MlpModel& model, const Matrix& inputs, Head head) {
    const Matrix logits = forward(model, inputs, head);
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        Eigen::Index best = 0;
        logits.row(r).maxCoeff(&best);
        out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
}

} // namespace debias
