#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/params.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class LayerKind { Dense, Conv2d, Relu, MaxPool2d, Flatten };

/// One layer of a feed-forward chain.
///   Dense:     in -> out features
///   Conv2d:    in -> out channels, square kernel, zero padding, stride 1
///   MaxPool2d: kernel x kernel window with stride kernel
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 0;
    std::size_t padding = 0;
    bool has_bias = true;

    static LayerSpec dense(std::size_t in, std::size_t out, bool bias = true) {
        return {LayerKind::Dense, in, out, 0, 0, bias};
    }
    static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t padding = 0,
                            bool bias = true) {
        return {LayerKind::Conv2d, in_ch, out_ch, kernel, padding, bias};
    }
    static LayerSpec relu() { return {LayerKind::Relu}; }
    static LayerSpec maxpool2d(std::size_t k) { return {LayerKind::MaxPool2d, 0, 0, k, 0, false}; }
    static LayerSpec flatten() { return {LayerKind::Flatten}; }

    bool parameterized() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
    std::size_t weight_count() const;
    std::size_t param_count() const { return weight_count() + (parameterized() && has_bias ? out : 0); }
};

std::string_view to_string(LayerKind kind);

/// Which part of the network an operation touches. The head is the final
/// dense layer (weights and bias); the body is every layer before it.
enum class Part { None, Body, Head, Full };

std::string_view to_string(Part part);
Part part_from_string(std::string_view name);

enum class InitKind { HeUniform, HeNormal, XavierUniform, XavierNormal, Orthogonal, Similar };

std::string_view to_string(InitKind kind);
InitKind init_kind_from_string(std::string_view name);

struct InitScheme {
    InitKind kind = InitKind::HeUniform;
    std::uint64_t seed = 0;
};

/// Activations recorded by a forward pass; everything backward needs.
struct ForwardCache {
    std::vector<Tensor> inputs;                     // input of each layer
    std::vector<std::vector<std::uint32_t>> argmax;  // max-pool winners, per layer
    Tensor logits;
};

struct LossAndGrad {
    double loss = 0.0;
    ParamVector grads;
};

/// Topology of a feed-forward classifier. Parameters live outside in a
/// ParamVector so that many clients can share one topology.
class Architecture {
public:
    /// Validates the chain; throws std::invalid_argument on shape mismatch or
    /// when the final layer is not dense.
    Architecture(Shape input_shape, std::vector<LayerSpec> layers);

    const Shape& input_shape() const { return input_shape_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    /// Per-sample output shape of layer i.
    const Shape& output_shape(std::size_t i) const { return out_shapes_[i]; }

    std::size_t head_layer() const { return layers_.size() - 1; }
    std::size_t head_segment() const { return segment_of_layer_.back(); }
    std::size_t num_segments() const { return segment_sizes_.size(); }
    std::size_t num_classes() const { return layers_.back().out; }
    /// Dimension d of the representation fed into the head.
    std::size_t representation_dim() const { return layers_.back().in; }

    ParamVector zero_params() const { return ParamVector(segment_sizes_); }
    ParamMask mask(Part part) const;

    Tensor forward(const ParamVector& params, const Tensor& batch, ForwardCache* cache = nullptr) const;
    /// Head input for every sample in batch.
    Tensor representation(const ParamVector& params, const Tensor& batch) const;
    /// Mean softmax cross-entropy over the batch and its gradient.
    LossAndGrad backward(const ParamVector& params, const ForwardCache& cache, std::span<const int> labels) const;
    /// forward + backward.
    LossAndGrad loss_and_grad(const ParamVector& params, const Tensor& batch, std::span<const int> labels) const;

    bool same_topology(const Architecture& other) const;

private:
    Tensor run(const ParamVector& params, const Tensor& batch, std::size_t stop, ForwardCache* cache) const;

    Shape input_shape_;
    std::vector<LayerSpec> layers_;
    std::vector<Shape> out_shapes_;
    std::vector<std::size_t> segment_of_layer_;  // valid for parameterized layers
    std::vector<std::size_t> segment_sizes_;
};

ParamVector init_params(const Architecture& arch, const InitScheme& scheme);

/// Mean and max of |cos| over all pairs of head weight rows.
struct OrthogonalityStats {
    double mean_abs_cos = 0.0;
    double max_abs_cos = 0.0;
};
OrthogonalityStats head_orthogonality_stats(const Architecture& arch, const ParamVector& params);

/// Argmax with ties broken toward the lowest index.
std::size_t argmax(std::span<const float> values);

}  // namespace fedsim
