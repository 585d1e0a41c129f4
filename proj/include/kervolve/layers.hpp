#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kervolve/errors.hpp"
#include "kervolve/kernels.hpp"
#include "kervolve/rng.hpp"
#include "kervolve/tensor.hpp"

namespace kervolve {

template <class T>
struct Parameter {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;

    explicit Parameter(std::string n, TensorT<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { std::fill(grad.values().begin(), grad.values().end(), T{0}); }
};

/// One network layer. forward(x, training=true) must precede backward;
/// backward consumes the cached activations and accumulates parameter
/// gradients.
template <class T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual TensorT<T> forward(const TensorT<T>& x, bool training) = 0;
    virtual TensorT<T> backward(const TensorT<T>& upstream) = 0;
    virtual std::vector<Parameter<T>*> parameters() { return {}; }
    virtual std::string name() const = 0;
    /// Output shape for a given input shape; throws config_error on mismatch.
    virtual std::vector<size_t> output_shape(const std::vector<size_t>& in) const = 0;
};

// ---------------------------------------------------------------------------
// Kervolution layer
// ---------------------------------------------------------------------------

/// Convolution-style layer whose patch/filter similarity is a kernel function.
/// Forward: im2col -> kernel_forward -> + bias -> reshape. With a linear spec
/// this is a textbook convolution layer.
template <class T>
class KervLayer : public Layer<T> {
public:
    KervLayer(std::string name, PatchGeometry geometry, size_t filter_count, KernelSpec spec,
              Rng& rng)
        : name_(std::move(name)),
          geometry_(geometry),
          spec_(spec),
          filters_(name_ + ".filters", init_filters(geometry, filter_count, rng)),
          bias_(name_ + ".bias", TensorT<T>({filter_count})) {
        geometry_.validate();
        spec_.validate();
        if (spec_.kind == KernelKind::mixture && spec_.mix_learnable) {
            mix_logit_.emplace(name_ + ".mix_logit",
                               TensorT<T>({1}, {static_cast<T>(spec_.mix_logit)}));
        }
    }

    TensorT<T> forward(const TensorT<T>& x, bool training) override {
        const size_t batch = x.extent(0);
        PatchMatrixT<T> patches = im2col(x, geometry_);
        sync_spec();
        KernelCacheT<T> cache;
        TensorT<T> values = kernel_forward(patches, filters_.value, spec_, &cache);

        const size_t n = filters_.value.extent(0);
        const size_t oh = geometry_.out_height(), ow = geometry_.out_width();
        TensorT<T> out({batch, n, oh, ow});
        for (size_t b = 0; b < batch; ++b) {
            for (size_t i = 0; i < oh; ++i) {
                for (size_t j = 0; j < ow; ++j) {
                    const size_t r = (b * oh + i) * ow + j;
                    for (size_t f = 0; f < n; ++f) {
                        out(b, f, i, j) = values(r, f) + bias_.value[f];
                    }
                }
            }
        }
        if (training) {
            patches_ = std::move(patches);
            cache_ = std::move(cache);
        } else {
            cache_.valid = false;
        }
        return out;
    }

    TensorT<T> backward(const TensorT<T>& upstream) override {
        if (!cache_.valid) {
            throw config_error(name_ + ": backward without a preceding training forward");
        }
        const size_t batch = upstream.extent(0);
        const size_t n = filters_.value.extent(0);
        const size_t oh = geometry_.out_height(), ow = geometry_.out_width();

        // upstream [b, n, oh, ow] -> row-major patch order [m, n]
        TensorT<T> u({batch * oh * ow, n});
        for (size_t b = 0; b < batch; ++b) {
            for (size_t f = 0; f < n; ++f) {
                for (size_t i = 0; i < oh; ++i) {
                    for (size_t j = 0; j < ow; ++j) {
                        u((b * oh + i) * ow + j, f) = upstream(b, f, i, j);
                    }
                }
            }
        }

        KernelGradsT<T> grads = kernel_backward(u, cache_, patches_, filters_.value);
        for (size_t i = 0; i < grads.filters.size(); ++i) filters_.grad[i] += grads.filters[i];
        for (size_t r = 0; r < u.extent(0); ++r) {
            for (size_t f = 0; f < n; ++f) bias_.grad[f] += u(r, f);
        }
        if (grads.mix_logit && mix_logit_) {
            mix_logit_->grad[0] += *grads.mix_logit;
        }
        cache_.valid = false;
        return col2im(grads.patches, geometry_, batch);
    }

    std::vector<Parameter<T>*> parameters() override {
        std::vector<Parameter<T>*> ps{&filters_, &bias_};
        if (mix_logit_) ps.push_back(&*mix_logit_);
        return ps;
    }

    std::string name() const override { return name_; }

    std::vector<size_t> output_shape(const std::vector<size_t>& in) const override {
        if (in.size() != 4 || in[1] != geometry_.in_channels || in[2] != geometry_.in_height ||
            in[3] != geometry_.in_width) {
            throw config_error(name_ + ": input shape does not match layer geometry");
        }
        return {in[0], filters_.value.extent(0), geometry_.out_height(), geometry_.out_width()};
    }

    const KernelSpec& spec() const { return spec_; }
    const PatchGeometry& geometry() const { return geometry_; }

    /// Current sigmoid(mix_logit), if this layer carries a learnable logit.
    std::optional<double> mix_weight() const {
        if (!mix_logit_) return std::nullopt;
        return sigmoid(static_cast<double>(mix_logit_->value[0]));
    }

private:
    void sync_spec() {
        if (mix_logit_) spec_.mix_logit = static_cast<double>(mix_logit_->value[0]);
    }

    static TensorT<T> init_filters(const PatchGeometry& g, size_t count, Rng& rng) {
        const size_t fan_in = g.patch_length();
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        TensorT<T> w({count, fan_in});
        for (size_t i = 0; i < w.size(); ++i) {
            w[i] = static_cast<T>(rng.uniform(-bound, bound));
        }
        return w;
    }

    std::string name_;
    PatchGeometry geometry_;
    KernelSpec spec_;
    Parameter<T> filters_;
    Parameter<T> bias_;
    std::optional<Parameter<T>> mix_logit_;
    PatchMatrixT<T> patches_;
    KernelCacheT<T> cache_;
};

// ---------------------------------------------------------------------------
// Pooling, activation, flatten, dense
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Ties give the gradient to the lowest flat
/// index, which keeps backward deterministic.
template <class T>
class MaxPoolLayer : public Layer<T> {
public:
    explicit MaxPoolLayer(std::string name) : name_(std::move(name)) {}

    TensorT<T> forward(const TensorT<T>& x, bool training) override {
        if (x.rank() != 4 || x.extent(2) % 2 != 0 || x.extent(3) % 2 != 0) {
            throw config_error(name_ + ": expects [b,c,h,w] with even h and w, got " +
                               x.shape_string());
        }
        const size_t b = x.extent(0), c = x.extent(1), oh = x.extent(2) / 2, ow = x.extent(3) / 2;
        TensorT<T> out({b, c, oh, ow});
        std::vector<size_t> arg(training ? out.size() : 0);
        size_t o = 0;
        for (size_t bi = 0; bi < b; ++bi) {
            for (size_t ci = 0; ci < c; ++ci) {
                for (size_t i = 0; i < oh; ++i) {
                    for (size_t j = 0; j < ow; ++j, ++o) {
                        size_t best = 0;
                        T best_v{};
                        for (size_t wnd = 0; wnd < 4; ++wnd) {
                            const size_t ih = i * 2 + wnd / 2, iw = j * 2 + wnd % 2;
                            const size_t flat = ((bi * c + ci) * x.extent(2) + ih) * x.extent(3) + iw;
                            const T v = x[flat];
                            if (wnd == 0 || v > best_v) {  // strict >: first max wins
                                best_v = v;
                                best = flat;
                            }
                        }
                        out[o] = best_v;
                        if (training) arg[o] = best;
                    }
                }
            }
        }
        if (training) {
            argmax_ = std::move(arg);
            in_shape_ = x.shape();
        } else {
            argmax_.clear();
        }
        return out;
    }

    TensorT<T> backward(const TensorT<T>& upstream) override {
        if (argmax_.empty()) {
            throw config_error(name_ + ": backward without a preceding training forward");
        }
        TensorT<T> down(in_shape_);
        for (size_t o = 0; o < upstream.size(); ++o) down[argmax_[o]] += upstream[o];
        argmax_.clear();
        return down;
    }

    std::string name() const override { return name_; }

    std::vector<size_t> output_shape(const std::vector<size_t>& in) const override {
        if (in.size() != 4 || in[2] % 2 != 0 || in[3] % 2 != 0) {
            throw config_error(name_ + ": input extents must be even");
        }
        return {in[0], in[1], in[2] / 2, in[3] / 2};
    }

private:
    std::string name_;
    std::vector<size_t> argmax_;
    std::vector<size_t> in_shape_;
};

template <class T>
class ReluLayer : public Layer<T> {
public:
    explicit ReluLayer(std::string name) : name_(std::move(name)) {}

    TensorT<T> forward(const TensorT<T>& x, bool training) override {
        TensorT<T> out = relu(x);
        if (training) {
            mask_.assign(x.size(), 0);
            for (size_t i = 0; i < x.size(); ++i) mask_[i] = x[i] > T{0};
        } else {
            mask_.clear();
        }
        return out;
    }

    TensorT<T> backward(const TensorT<T>& upstream) override {
        if (mask_.size() != upstream.size()) {
            throw config_error(name_ + ": backward without a preceding training forward");
        }
        TensorT<T> down(upstream.shape());
        for (size_t i = 0; i < upstream.size(); ++i) down[i] = mask_[i] ? upstream[i] : T{0};
        mask_.clear();
        return down;
    }

    std::string name() const override { return name_; }
    std::vector<size_t> output_shape(const std::vector<size_t>& in) const override { return in; }

private:
    std::string name_;
    std::vector<uint8_t> mask_;
};

template <class T>
class FlattenLayer : public Layer<T> {
public:
    explicit FlattenLayer(std::string name) : name_(std::move(name)) {}

    TensorT<T> forward(const TensorT<T>& x, bool training) override {
        if (training) in_shape_ = x.shape();
        size_t flat = 1;
        for (size_t a = 1; a < x.rank(); ++a) flat *= x.extent(a);
        return x.reshaped({x.extent(0), flat});
    }

    TensorT<T> backward(const TensorT<T>& upstream) override {
        if (in_shape_.empty()) {
            throw config_error(name_ + ": backward without a preceding training forward");
        }
        return upstream.reshaped(in_shape_);
    }

    std::string name() const override { return name_; }

    std::vector<size_t> output_shape(const std::vector<size_t>& in) const override {
        size_t flat = 1;
        for (size_t a = 1; a < in.size(); ++a) flat *= in[a];
        return {in[0], flat};
    }

private:
    std::string name_;
    std::vector<size_t> in_shape_;
};

template <class T>
class DenseLayer : public Layer<T> {
public:
    DenseLayer(std::string name, size_t in_features, size_t out_features, Rng& rng)
        : name_(std::move(name)),
          weights_(name_ + ".weights", init_weights(in_features, out_features, rng)),
          bias_(name_ + ".bias", TensorT<T>({out_features})) {}

    TensorT<T> forward(const TensorT<T>& x, bool training) override {
        if (x.rank() != 2 || x.extent(1) != weights_.value.extent(0)) {
            throw config_error(name_ + ": input " + x.shape_string() + " expected [b," +
                               std::to_string(weights_.value.extent(0)) + "]");
        }
        TensorT<T> out = matmul(x, weights_.value);
        const size_t b = out.extent(0), n = out.extent(1);
        for (size_t r = 0; r < b; ++r) {
            for (size_t f = 0; f < n; ++f) out(r, f) += bias_.value[f];
        }
        if (training) {
            input_ = x;
        } else {
            input_ = TensorT<T>();
        }
        return out;
    }

    TensorT<T> backward(const TensorT<T>& upstream) override {
        if (input_.size() == 0) {
            throw config_error(name_ + ": backward without a preceding training forward");
        }
        const TensorT<T> gw = matmul(input_, upstream, true, false);  // [in x out]
        for (size_t i = 0; i < gw.size(); ++i) weights_.grad[i] += gw[i];
        const size_t b = upstream.extent(0), n = upstream.extent(1);
        for (size_t r = 0; r < b; ++r) {
            for (size_t f = 0; f < n; ++f) bias_.grad[f] += upstream(r, f);
        }
        TensorT<T> down = matmul(upstream, weights_.value, false, true);
        input_ = TensorT<T>();
        return down;
    }

    std::vector<Parameter<T>*> parameters() override { return {&weights_, &bias_}; }
    std::string name() const override { return name_; }

    std::vector<size_t> output_shape(const std::vector<size_t>& in) const override {
        if (in.size() != 2 || in[1] != weights_.value.extent(0)) {
            throw config_error(name_ + ": input features " +
                               (in.size() == 2 ? std::to_string(in[1]) : std::string("?")) +
                               " expected " + std::to_string(weights_.value.extent(0)));
        }
        return {in[0], weights_.value.extent(1)};
    }

private:
    static TensorT<T> init_weights(size_t in_features, size_t out_features, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in_features));
        TensorT<T> w({in_features, out_features});
        for (size_t i = 0; i < w.size(); ++i) {
            w[i] = static_cast<T>(rng.uniform(-bound, bound));
        }
        return w;
    }

    std::string name_;
    Parameter<T> weights_;
    Parameter<T> bias_;
    TensorT<T> input_;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Softmax cross-entropy: loss = mean over the batch of -log p[label];
/// gradient w.r.t. logits = (softmax - one_hot) / batch.
template <class T>
std::pair<T, TensorT<T>> softmax_cross_entropy(const TensorT<T>& logits,
                                               std::span<const uint8_t> labels) {
    if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
        throw config_error("softmax_cross_entropy: logits " + logits.shape_string() +
                           " vs " + std::to_string(labels.size()) + " labels");
    }
    const size_t b = logits.extent(0), nc = logits.extent(1);
    TensorT<T> grad({b, nc});
    T loss{0};
    for (size_t r = 0; r < b; ++r) {
        if (labels[r] >= nc) {
            throw config_error("softmax_cross_entropy: label " + std::to_string(labels[r]) +
                               " out of range [0," + std::to_string(nc) + ")");
        }
        const T* row = logits.data() + r * nc;
        const T mx = *std::max_element(row, row + nc);
        T denom{0};
        for (size_t c = 0; c < nc; ++c) denom += std::exp(row[c] - mx);
        for (size_t c = 0; c < nc; ++c) {
            const T p = std::exp(row[c] - mx) / denom;
            grad(r, c) = (p - (c == labels[r] ? T{1} : T{0})) / static_cast<T>(b);
        }
        loss += -(row[labels[r]] - mx - std::log(denom));
    }
    loss /= static_cast<T>(b);
    if (!std::isfinite(static_cast<double>(loss))) {
        throw numeric_error("softmax_cross_entropy: non-finite loss");
    }
    return {loss, std::move(grad)};
}

// ---------------------------------------------------------------------------
// Layer stack
// ---------------------------------------------------------------------------

/// Ordered layer list owned by a single training run. Shapes are validated
/// end-to-end at construction via validate().
template <class T>
class LayerStack {
public:
    template <class L, class... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    /// Chains output_shape through all layers; throws config_error on the
    /// first mismatch. Returns the final output shape.
    std::vector<size_t> validate(std::vector<size_t> input_shape) const {
        for (const auto& l : layers_) input_shape = l->output_shape(input_shape);
        return input_shape;
    }

    TensorT<T> forward(TensorT<T> x, bool training) {
        for (auto& l : layers_) x = l->forward(x, training);
        return x;
    }

    TensorT<T> backward(TensorT<T> upstream) {
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
            upstream = (*it)->backward(upstream);
        }
        return upstream;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& l : layers_) {
            for (Parameter<T>* p : l->parameters()) out.push_back(p);
        }
        return out;
    }

    void zero_grad() {
        for (Parameter<T>* p : parameters()) p->zero_grad();
    }

    size_t parameter_count() {
        size_t n = 0;
        for (Parameter<T>* p : parameters()) n += p->value.size();
        return n;
    }

    size_t layer_count() const { return layers_.size(); }
    Layer<T>& layer(size_t i) { return *layers_.at(i); }

    /// Kervolution layers in stack order, for per-epoch mix-weight logging.
    std::vector<KervLayer<T>*> kerv_layers() {
        std::vector<KervLayer<T>*> out;
        for (auto& l : layers_) {
            if (auto* k = dynamic_cast<KervLayer<T>*>(l.get())) out.push_back(k);
        }
        return out;
    }

private:
    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace kervolve
