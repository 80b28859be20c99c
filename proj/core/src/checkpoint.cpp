#include "debias/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "debias/error.hpp"

namespace debias {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
public:
    explicit Writer(std::ofstream& out) : out_(out) {}

    template <class T>
    void put(T value) {
        out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
    }

    template <class Derived>
    void put_dense(const Eigen::DenseBase<Derived>& values) {
        // Matrices here are row-major, so storage order is the file order.
        for (Eigen::Index r = 0; r < values.rows(); ++r) {
            for (Eigen::Index c = 0; c < values.cols(); ++c) {
                put<double>(values(r, c));
            }
        }
    }

private:
    std::ofstream& out_;
};

class Reader {
public:
    Reader(std::ifstream& in, std::filesystem::path path) : in_(in), path_(std::move(path)) {}

    template <class T>
    T get() {
        T value{};
        in_.read(reinterpret_cast<char*>(&value), sizeof(T));
        if (!in_) {
            throw FormatError("checkpoint " + path_.string() + " is truncated");
        }
        return value;
    }

    template <class Derived>
    void get_dense(Eigen::DenseBase<Derived>& values) {
        for (Eigen::Index r = 0; r < values.rows(); ++r) {
            for (Eigen::Index c = 0; c < values.cols(); ++c) {
                values(r, c) = get<double>();
            }
        }
    }

private:
    std::ifstream& in_;
    std::filesystem::path path_;
};

void write_layer(Writer& w, const DenseLayer& layer) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.fan_in()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.fan_out()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(layer.activation));
    w.put_dense(layer.weight);
    w.put_dense(layer.bias);
}

DenseLayer read_layer(Reader& r) {
    DenseLayer layer;
    const auto fan_in = r.get<std::uint32_t>();
    const auto fan_out = r.get<std::uint32_t>();
    const auto act = r.get<std::uint8_t>();
    if (act > static_cast<std::uint8_t>(Activation::relu)) {
        throw FormatError("checkpoint has unknown activation tag " + std::to_string(act));
    }
    layer.activation = static_cast<Activation>(act);
    layer.weight.resize(fan_in, fan_out);
    layer.bias.resize(fan_out);
    r.get_dense(layer.weight);
    r.get_dense(layer.bias);
    return layer;
}

template <class F>
void for_each_layer(const ParamSet& params, F&& fn) {
    for (const auto& layer : params.layers) {
        fn(layer);
    }
    if (params.aux_head) {
        fn(*params.aux_head);
    }
}

template <class F>
void for_each_layer(ParamSet& params, F&& fn) {
    for (auto& layer : params.layers) {
        fn(layer);
    }
    if (params.aux_head) {
        fn(*params.aux_head);
    }
}

} // namespace

void write_checkpoint(const std::filesystem::path& path, const MlpModel& model,
                      const AdamState* optimizer) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot open " + tmp.string() + " for writing");
        }
        Writer w(out);
        out.write("DBLB", 4);
        w.put<std::uint32_t>(kCheckpointVersion);
        const ParamSet& params = model.params();
        w.put<std::uint32_t>(static_cast<std::uint32_t>(params.layers.size()));
        w.put<std::uint8_t>(params.aux_head ? 1 : 0);
        for_each_layer(params, [&](const DenseLayer& layer) { write_layer(w, layer); });
        w.put<std::uint8_t>(optimizer ? 1 : 0);
        if (optimizer) {
            w.put<std::uint64_t>(optimizer->step);
            w.put<double>(optimizer->settings.learning_rate);
            w.put<double>(optimizer->settings.beta1);
            w.put<double>(optimizer->settings.beta2);
            w.put<double>(optimizer->settings.epsilon);
            for (const ParamSet* moments : {&optimizer->m, &optimizer->v}) {
                for_each_layer(*moments, [&](const DenseLayer& layer) {
                    w.put_dense(layer.weight);
                    w.put_dense(layer.bias);
                });
            }
        }
        out.flush();
        if (!out) {
            throw Error("failed writing checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open checkpoint " + path.string());
    }
    Reader r(in, path);
    std::array<char, 4> magic{};
    in.read(magic.data(), 4);
    if (!in || std::memcmp(magic.data(), "DBLB", 4) != 0) {
        throw FormatError(path.string() + " is not a checkpoint (bad magic)");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto layer_count = r.get<std::uint32_t>();
    const bool has_aux = r.get<std::uint8_t>() != 0;
    if (layer_count == 0) {
        throw FormatError("checkpoint declares zero layers");
    }
    ParamSet params;
    for (std::uint32_t k = 0; k < layer_count; ++k) {
        params.layers.push_back(read_layer(r));
    }
    if (has_aux) {
        params.aux_head = read_layer(r);
    }
    Checkpoint ckpt{MlpModel(std::move(params)), std::nullopt};
    if (r.get<std::uint8_t>() != 0) {
        AdamState state = AdamState::for_model(ckpt.model);
        state.step = r.get<std::uint64_t>();
        state.settings.learning_rate = r.get<double>();
        state.settings.beta1 = r.get<double>();
        state.settings.beta2 = r.get<double>();
        state.settings.epsilon = r.get<double>();
        for (ParamSet* moments : {&state.m, &state.v}) {
            for_each_layer(*moments, [&](DenseLayer& layer) {
                r.get_dense(layer.weight);
                r.get_dense(layer.bias);
            });
        }
        ckpt.optimizer = std::move(state);
    }
    return ckpt;
}

} // namespace debias
