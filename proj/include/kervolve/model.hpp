#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kervolve/errors.hpp"
#include "kervolve/layers.hpp"

namespace kervolve {

/// Everything needed to build and train one LeNet-5 variant. All values are
/// echoed into result files so experiments are self-describing.
struct ModelConfig {
    std::string id = "linear";  // label used in filenames, plots and summaries
    KernelKind conv1_kernel = KernelKind::linear;
    KernelKind conv2_kernel = KernelKind::linear;

    double poly_offset = 1.0;
    int poly_degree = 2;
    std::optional<double> gamma;    // unset: 1 / patch_length, per layer
    double mix_logit_init = 0.0;    // sigmoid(0) = 0.5, an even mixture

    uint64_t seed = 0;
    int epochs = 20;
    size_t batch_size = 64;
    double momentum = 0.9;
    std::vector<int> milestones = {10, 15};
    double lr_decay = 0.1;

    void validate() const {
        if (epochs < 1) throw config_error("model config: epochs must be >= 1");
        if (batch_size < 1) throw config_error("model config: batch size must be >= 1");
        if (poly_degree < 1) throw config_error("model config: poly degree must be >= 1");
        if (gamma && !(*gamma > 0.0)) throw config_error("model config: gamma must be > 0");
        for (size_t i = 0; i < milestones.size(); ++i) {
            if (milestones[i] >= epochs) {
                throw config_error("model config: milestone " + std::to_string(milestones[i]) +
                                   " must be < epochs (" + std::to_string(epochs) + ")");
            }
            if (i > 0 && milestones[i] <= milestones[i - 1]) {
                throw config_error("model config: milestones must be strictly increasing");
            }
        }
    }

    /// Drops milestones at or past the epoch horizon; call after shortening
    /// epochs for desk-scale runs.
    void trim_milestones() {
        std::erase_if(milestones, [this](int m) { return m >= epochs; });
    }

    /// Config for one of the paper's three model variants: the kernel name
    /// doubles as the model id and both conv slots use it.
    static ModelConfig variant(const std::string& kernel_name) {
        ModelConfig c;
        c.id = kernel_name;
        c.conv1_kernel = c.conv2_kernel = kernel_kind_from_string(kernel_name);
        return c;
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"id", c.id},
                       {"conv1_kernel", to_string(c.conv1_kernel)},
                       {"conv2_kernel", to_string(c.conv2_kernel)},
                       {"poly_offset", c.poly_offset},
                       {"poly_degree", c.poly_degree},
                       {"mix_logit_init", c.mix_logit_init},
                       {"seed", c.seed},
                       {"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"momentum", c.momentum},
                       {"milestones", c.milestones},
                       {"lr_decay", c.lr_decay}};
    if (c.gamma) j["gamma"] = *c.gamma;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.id = j.at("id").get<std::string>();
    c.conv1_kernel = kernel_kind_from_string(j.at("conv1_kernel").get<std::string>());
    c.conv2_kernel = kernel_kind_from_string(j.at("conv2_kernel").get<std::string>());
    c.poly_offset = j.at("poly_offset").get<double>();
    c.poly_degree = j.at("poly_degree").get<int>();
    c.mix_logit_init = j.at("mix_logit_init").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<size_t>();
    c.momentum = j.at("momentum").get<double>();
    c.milestones = j.at("milestones").get<std::vector<int>>();
    c.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("gamma")) c.gamma = j.at("gamma").get<double>();
}

namespace detail {
inline KernelSpec make_spec(KernelKind kind, const ModelConfig& c, size_t patch_length) {
    KernelSpec s;
    s.kind = kind;
    s.offset = c.poly_offset;
    s.degree = c.poly_degree;
    s.gamma = c.gamma ? *c.gamma : 1.0 / static_cast<double>(patch_length);
    s.mix_logit = c.mix_logit_init;
    s.mix_learnable = true;
    return s;
}
}  // namespace detail

/// LeNet-5 for 28x28 single-channel inputs:
///   kerv(6, 5x5, pad 2) -> relu -> pool -> kerv(16, 5x5) -> relu -> pool
///   -> dense(120) -> relu -> dense(84) -> relu -> dense(10)
/// 61,706 parameters plus one mixing logit per mixture kerv layer. Weights
/// are Kaiming-uniform from the seeded generator, so a given seed always
/// yields bit-identical initial weights.
template <class T>
LayerStack<T> build_lenet5(const ModelConfig& config) {
    config.validate();
    Rng rng(config.seed);
    LayerStack<T> net;

    const PatchGeometry g1{.in_channels = 1,
                           .in_height = 28,
                           .in_width = 28,
                           .kernel_h = 5,
                           .kernel_w = 5,
                           .stride_h = 1,
                           .stride_w = 1,
                           .pad_h = 2,
                           .pad_w = 2};
    net.template add<KervLayer<T>>("conv1", g1, 6,
                                   detail::make_spec(config.conv1_kernel, config, g1.patch_length()),
                                   rng);
    net.template add<ReluLayer<T>>("relu1");
    net.template add<MaxPoolLayer<T>>("pool1");

    const PatchGeometry g2{.in_channels = 6,
                           .in_height = 14,
                           .in_width = 14,
                           .kernel_h = 5,
                           .kernel_w = 5};
    net.template add<KervLayer<T>>("conv2", g2, 16,
                                   detail::make_spec(config.conv2_kernel, config, g2.patch_length()),
                                   rng);
    net.template add<ReluLayer<T>>("relu2");
    net.template add<MaxPoolLayer<T>>("pool2");
    net.template add<FlattenLayer<T>>("flatten");
    net.template add<DenseLayer<T>>("fc1", 400, 120, rng);
    net.template add<ReluLayer<T>>("relu3");
    net.template add<DenseLayer<T>>("fc2", 120, 84, rng);
    net.template add<ReluLayer<T>>("relu4");
    net.template add<DenseLayer<T>>("fc3", 84, 10, rng);

    net.validate({1, 1, 28, 28});
    return net;
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

template <class T>
struct OptimizerState {
    double momentum = 0.9;
    double lr = 0.0;  // last applied rate
    std::vector<TensorT<T>> velocity;  // mirrors stack.parameters() order
};

template <class T>
OptimizerState<T> init_optimizer(LayerStack<T>& stack, double momentum) {
    OptimizerState<T> state;
    state.momentum = momentum;
    for (Parameter<T>* p : stack.parameters()) {
        state.velocity.emplace_back(p->value.shape());
    }
    return state;
}

/// v <- momentum * v - lr * grad;  p <- p + v. Applies to every parameter,
/// the mixing logit included.
template <class T>
void sgd_step(LayerStack<T>& stack, OptimizerState<T>& state, double lr) {
    const std::vector<Parameter<T>*> params = stack.parameters();
    if (params.size() != state.velocity.size()) {
        throw config_error("sgd_step: optimizer state does not match parameter list");
    }
    state.lr = lr;
    const T mu = static_cast<T>(state.momentum);
    const T rate = static_cast<T>(lr);
    for (size_t i = 0; i < params.size(); ++i) {
        TensorT<T>& v = state.velocity[i];
        Parameter<T>& p = *params[i];
        for (size_t j = 0; j < v.size(); ++j) {
            v[j] = mu * v[j] - rate * p.grad[j];
            p.value[j] += v[j];
        }
        if (!p.value.all_finite()) {
            throw numeric_error("sgd_step: parameter '" + p.name + "' became non-finite");
        }
    }
}

/// Milestone schedule: initial_lr * factor^(number of milestones <= epoch),
/// with epochs counted from 0.
inline double lr_at_epoch(double initial_lr, int epoch, const std::vector<int>& milestones,
                          double factor) {
    double lr = initial_lr;
    for (int m : milestones) {
        if (m <= epoch) lr *= factor;
    }
    return lr;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// JSON checkpoint: config echo plus flat parameter arrays. Values are stored
/// as doubles with shortest round-trip formatting, so a 64-bit save/load
/// cycle is bit-exact.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     LayerStack<T>& stack) {
    nlohmann::json j;
    j["format"] = "kervolve-checkpoint";
    j["version"] = 1;
    j["config"] = config;
    nlohmann::json params = nlohmann::json::array();
    for (Parameter<T>* p : stack.parameters()) {
        nlohmann::json entry;
        entry["name"] = p->name;
        entry["shape"] = p->value.shape();
        std::vector<double> data(p->value.values().begin(), p->value.values().end());
        entry["data"] = std::move(data);
        params.push_back(std::move(entry));
    }
    j["parameters"] = std::move(params);
    std::ofstream out(path);
    if (!out) throw format_error("checkpoint: cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Rebuilds the stack from the stored config, then overwrites its parameters.
template <class T>
std::pair<ModelConfig, LayerStack<T>> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw format_error("checkpoint: cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("checkpoint: invalid JSON in " + path.string() + ": " + e.what());
    }
    if (j.value("format", "") != "kervolve-checkpoint" || j.value("version", 0) != 1) {
        throw format_error("checkpoint: unrecognized format in " + path.string());
    }
    ModelConfig config = j.at("config").get<ModelConfig>();
    LayerStack<T> stack = build_lenet5<T>(config);
    const std::vector<Parameter<T>*> params = stack.parameters();
    const nlohmann::json& stored = j.at("parameters");
    if (stored.size() != params.size()) {
        throw format_error("checkpoint: parameter count mismatch in " + path.string());
    }
    for (size_t i = 0; i < params.size(); ++i) {
        const nlohmann::json& entry = stored[i];
        if (entry.at("name").get<std::string>() != params[i]->name) {
            throw format_error("checkpoint: parameter order mismatch at '" + params[i]->name + "'");
        }
        const std::vector<double> data = entry.at("data").get<std::vector<double>>();
        if (data.size() != params[i]->value.size()) {
            throw format_error("checkpoint: size mismatch for '" + params[i]->name + "'");
        }
        for (size_t k = 0; k < data.size(); ++k) params[i]->value[k] = static_cast<T>(data[k]);
    }
    return {std::move(config), std::move(stack)};
}

}  // namespace kervolve
