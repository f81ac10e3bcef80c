#include "fedsim/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "fedsim/rng.hpp"

namespace fedsim {

std::size_t LayerSpec::weight_count() const {
    switch (kind) {
        case LayerKind::Dense: return in * out;
        case LayerKind::Conv2d: return in * out * kernel * kernel;
        default: return 0;
    }
}

std::string_view to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Relu: return "relu";
        case LayerKind::MaxPool2d: return "maxpool2d";
        case LayerKind::Flatten: return "flatten";
    }
    return "?";
}

std::string_view to_string(Part part) {
    switch (part) {
        case Part::None: return "none";
        case Part::Body: return "body";
        case Part::Head: return "head";
        case Part::Full: return "full";
    }
    return "?";
}

Part part_from_string(std::string_view name) {
    if (name == "none") return Part::None;
    if (name == "body") return Part::Body;
    if (name == "head") return Part::Head;
    if (name == "full") return Part::Full;
    throw std::invalid_argument("unknown part '" + std::string(name) + "' (expected body|head|full|none)");
}

std::string_view to_string(InitKind kind) {
    switch (kind) {
        case InitKind::HeUniform: return "he_uniform";
        case InitKind::HeNormal: return "he_normal";
        case InitKind::XavierUniform: return "xavier_uniform";
        case InitKind::XavierNormal: return "xavier_normal";
        case InitKind::Orthogonal: return "orthogonal";
        case InitKind::Similar: return "similar";
    }
    return "?";
}

InitKind init_kind_from_string(std::string_view name) {
    for (InitKind k : {InitKind::HeUniform, InitKind::HeNormal, InitKind::XavierUniform, InitKind::XavierNormal,
                       InitKind::Orthogonal, InitKind::Similar})
        if (to_string(k) == name) return k;
    throw std::invalid_argument("unknown init scheme '" + std::string(name) + "'");
}

std::size_t argmax(std::span<const float> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

Architecture::Architecture(Shape input_shape, std::vector<LayerSpec> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    if (layers_.empty() || layers_.back().kind != LayerKind::Dense)
        throw std::invalid_argument("architecture: the final layer must be a dense head");
    if (input_shape_.empty() || shape_size(input_shape_) == 0)
        throw std::invalid_argument("architecture: empty input shape");

    Shape cur = input_shape_;
    segment_of_layer_.assign(layers_.size(), 0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        const std::string where = "layer " + std::to_string(i) + " (" + std::string(to_string(l.kind)) + "): ";
        switch (l.kind) {
            case LayerKind::Dense:
                if (cur.size() != 1 || cur[0] != l.in)
                    throw std::invalid_argument(where + "expects input (" + std::to_string(l.in) + ") but receives " +
                                                shape_to_string(cur));
                if (l.in == 0 || l.out == 0) throw std::invalid_argument(where + "zero-sized dense layer");
                cur = {l.out};
                break;
            case LayerKind::Conv2d: {
                if (cur.size() != 3 || cur[0] != l.in)
                    throw std::invalid_argument(where + "expects " + std::to_string(l.in) +
                                                " input channels (C,H,W) but receives " + shape_to_string(cur));
                if (l.kernel == 0 || l.out == 0) throw std::invalid_argument(where + "zero-sized convolution");
                const std::size_t h = cur[1] + 2 * l.padding, w = cur[2] + 2 * l.padding;
                if (h < l.kernel || w < l.kernel) throw std::invalid_argument(where + "kernel larger than input");
                cur = {l.out, h - l.kernel + 1, w - l.kernel + 1};
                break;
            }
            case LayerKind::MaxPool2d:
                if (cur.size() != 3 || l.kernel == 0 || cur[1] < l.kernel || cur[2] < l.kernel)
                    throw std::invalid_argument(where + "cannot pool input " + shape_to_string(cur));
                cur = {cur[0], cur[1] / l.kernel, cur[2] / l.kernel};
                break;
            case LayerKind::Flatten: cur = {shape_size(cur)}; break;
            case LayerKind::Relu: break;
        }
        out_shapes_.push_back(cur);
        if (l.parameterized()) {
            segment_of_layer_[i] = segment_sizes_.size();
            segment_sizes_.push_back(l.param_count());
        }
    }
}

ParamMask Architecture::mask(Part part) const {
    const std::size_t n = num_segments();
    switch (part) {
        case Part::None: return ParamMask::none(n);
        case Part::Full: return ParamMask::all(n);
        case Part::Head: {
            auto m = ParamMask::none(n);
            m.include[head_segment()] = true;
            return m;
        }
        case Part::Body: {
            auto m = ParamMask::all(n);
            m.include[head_segment()] = false;
            return m;
        }
    }
    return ParamMask::none(n);
}

bool Architecture::same_topology(const Architecture& other) const {
    if (input_shape_ != other.input_shape_ || layers_.size() != other.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& a = layers_[i];
        const auto& b = other.layers_[i];
        if (a.kind != b.kind || a.in != b.in || a.out != b.out || a.kernel != b.kernel || a.padding != b.padding ||
            a.has_bias != b.has_bias)
            return false;
    }
    return true;
}

namespace {

void dense_forward(const LayerSpec& l, std::span<const float> seg, const Tensor& x, Tensor& y) {
    const std::size_t batch = x.batch();
    const float* w = seg.data();
    const float* b = l.has_bias ? seg.data() + l.in * l.out : nullptr;
    for (std::size_t n = 0; n < batch; ++n) {
        const float* xr = x.data.data() + n * l.in;
        float* yr = y.data.data() + n * l.out;
        for (std::size_t o = 0; o < l.out; ++o) {
            const float* wr = w + o * l.in;
            float acc = 0.0f;
            for (std::size_t i = 0; i < l.in; ++i) acc += wr[i] * xr[i];
            yr[o] = b ? acc + b[o] : acc;
        }
    }
}

void dense_backward(const LayerSpec& l, std::span<const float> seg, const Tensor& x, const Tensor& dy,
                    std::span<float> grad, Tensor* dx) {
    const std::size_t batch = x.batch();
    float* gw = grad.data();
    float* gb = l.has_bias ? grad.data() + l.in * l.out : nullptr;
    for (std::size_t n = 0; n < batch; ++n) {
        const float* xr = x.data.data() + n * l.in;
        const float* dyr = dy.data.data() + n * l.out;
        for (std::size_t o = 0; o < l.out; ++o) {
            const float g = dyr[o];
            float* gwr = gw + o * l.in;
            for (std::size_t i = 0; i < l.in; ++i) gwr[i] += g * xr[i];
            if (gb) gb[o] += g;
        }
    }
    if (dx) {
        const float* w = seg.data();
        for (std::size_t n = 0; n < batch; ++n) {
            const float* dyr = dy.data.data() + n * l.out;
            float* dxr = dx->data.data() + n * l.in;
            for (std::size_t o = 0; o < l.out; ++o) {
                const float g = dyr[o];
                const float* wr = w + o * l.in;
                for (std::size_t i = 0; i < l.in; ++i) dxr[i] += g * wr[i];
            }
        }
    }
}

struct ConvDims {
    std::size_t cin, h, w, cout, oh, ow, k, pad;
};

ConvDims conv_dims(const LayerSpec& l, const Shape& in, const Shape& out) {
    return {in[1], in[2], in[3], l.out, out[2], out[3], l.kernel, l.padding};
}

void conv_forward(const LayerSpec& l, std::span<const float> seg, const Tensor& x, Tensor& y) {
    const ConvDims d = conv_dims(l, x.shape, y.shape);
    const float* w = seg.data();
    const float* b = l.has_bias ? seg.data() + l.weight_count() : nullptr;
    const std::size_t batch = x.batch();
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            float* yp = y.data.data() + ((n * d.cout + co) * d.oh) * d.ow;
            std::fill(yp, yp + d.oh * d.ow, b ? b[co] : 0.0f);
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const float* xp = x.data.data() + ((n * d.cin + ci) * d.h) * d.w;
                const float* wp = w + ((co * d.cin + ci) * d.k) * d.k;
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                    for (std::size_t ky = 0; ky < d.k; ++ky) {
                        const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(d.pad);
                        if (iy < 0 || iy >= std::ptrdiff_t(d.h)) continue;
                        for (std::size_t kx = 0; kx < d.k; ++kx) {
                            const float wv = wp[ky * d.k + kx];
                            for (std::size_t ox = 0; ox < d.ow; ++ox) {
                                const std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(d.pad);
                                if (ix < 0 || ix >= std::ptrdiff_t(d.w)) continue;
                                yp[oy * d.ow + ox] += wv * xp[iy * d.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv_backward(const LayerSpec& l, std::span<const float> seg, const Tensor& x, const Tensor& dy,
                   std::span<float> grad, Tensor* dx) {
    const ConvDims d = conv_dims(l, x.shape, dy.shape);
    const float* w = seg.data();
    float* gw = grad.data();
    float* gb = l.has_bias ? grad.data() + l.weight_count() : nullptr;
    const std::size_t batch = x.batch();
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t co = 0; co < d.cout; ++co) {
            const float* dyp = dy.data.data() + ((n * d.cout + co) * d.oh) * d.ow;
            if (gb)
                for (std::size_t i = 0; i < d.oh * d.ow; ++i) gb[co] += dyp[i];
            for (std::size_t ci = 0; ci < d.cin; ++ci) {
                const float* xp = x.data.data() + ((n * d.cin + ci) * d.h) * d.w;
                float* dxp = dx ? dx->data.data() + ((n * d.cin + ci) * d.h) * d.w : nullptr;
                const float* wp = w + ((co * d.cin + ci) * d.k) * d.k;
                float* gwp = gw + ((co * d.cin + ci) * d.k) * d.k;
                for (std::size_t oy = 0; oy < d.oh; ++oy) {
                    for (std::size_t ky = 0; ky < d.k; ++ky) {
                        const std::ptrdiff_t iy = std::ptrdiff_t(oy + ky) - std::ptrdiff_t(d.pad);
                        if (iy < 0 || iy >= std::ptrdiff_t(d.h)) continue;
                        for (std::size_t kx = 0; kx < d.k; ++kx) {
                            float acc = 0.0f;
                            const float wv = wp[ky * d.k + kx];
                            for (std::size_t ox = 0; ox < d.ow; ++ox) {
                                const std::ptrdiff_t ix = std::ptrdiff_t(ox + kx) - std::ptrdiff_t(d.pad);
                                if (ix < 0 || ix >= std::ptrdiff_t(d.w)) continue;
                                const float g = dyp[oy * d.ow + ox];
                                acc += g * xp[iy * d.w + ix];
                                if (dxp) dxp[iy * d.w + ix] += g * wv;
                            }
                            gwp[ky * d.k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

void maxpool_forward(std::size_t k, const Tensor& x, Tensor& y, std::vector<std::uint32_t>& winners) {
    const std::size_t batch = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    const std::size_t oh = y.shape[2], ow = y.shape[3];
    winners.assign(y.size(), 0);
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t in_base = (n * c + ch) * h * w;
            const std::size_t out_base = (n * c + ch) * oh * ow;
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    std::size_t best = in_base + (oy * k) * w + ox * k;
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const std::size_t idx = in_base + (oy * k + ky) * w + ox * k + kx;
                            if (x.data[idx] > x.data[best]) best = idx;
                        }
                    y.data[out_base + oy * ow + ox] = x.data[best];
                    winners[out_base + oy * ow + ox] = static_cast<std::uint32_t>(best);
                }
        }
}

Shape batched(std::size_t batch, const Shape& sample) {
    Shape s{batch};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

}  // namespace

Tensor Architecture::run(const ParamVector& params, const Tensor& batch, std::size_t stop, ForwardCache* cache) const {
    if (params.segment_sizes() != segment_sizes_) throw std::invalid_argument("forward: parameter layout mismatch");
    const Shape expected = batched(batch.batch(), input_shape_);
    if (batch.shape != expected)
        throw std::invalid_argument("forward: batch shape " + shape_to_string(batch.shape) + " does not match input " +
                                    shape_to_string(expected));
    if (cache) {
        cache->inputs.clear();
        cache->inputs.reserve(layers_.size());
        cache->argmax.assign(layers_.size(), {});
    }
    const std::size_t n = batch.batch();
    Tensor x = batch;
    for (std::size_t i = 0; i < stop; ++i) {
        const LayerSpec& l = layers_[i];
        Tensor y(batched(n, out_shapes_[i]));
        switch (l.kind) {
            case LayerKind::Dense: dense_forward(l, params.segment(segment_of_layer_[i]), x, y); break;
            case LayerKind::Conv2d: conv_forward(l, params.segment(segment_of_layer_[i]), x, y); break;
            case LayerKind::Relu:
                for (std::size_t j = 0; j < x.size(); ++j) y.data[j] = x.data[j] > 0.0f ? x.data[j] : 0.0f;
                break;
            case LayerKind::MaxPool2d: {
                std::vector<std::uint32_t> winners;
                maxpool_forward(l.kernel, x, y, winners);
                if (cache) cache->argmax[i] = std::move(winners);
                break;
            }
            case LayerKind::Flatten: y.data = x.data; break;
        }
        if (cache) {
            cache->inputs.push_back(std::move(x));
        }
        x = std::move(y);
    }
    return x;
}

Tensor Architecture::forward(const ParamVector& params, const Tensor& batch, ForwardCache* cache) const {
    Tensor logits = run(params, batch, layers_.size(), cache);
    if (cache) cache->logits = logits;
    return logits;
}

Tensor Architecture::representation(const ParamVector& params, const Tensor& batch) const {
    return run(params, batch, head_layer(), nullptr);
}

LossAndGrad Architecture::backward(const ParamVector& params, const ForwardCache& cache,
                                   std::span<const int> labels) const {
    const Tensor& logits = cache.logits;
    const std::size_t n = logits.batch();
    const std::size_t classes = num_classes();
    if (cache.inputs.size() != layers_.size() || n == 0) throw std::invalid_argument("backward: stale forward cache");
    if (labels.size() != n)
        throw std::invalid_argument("backward: " + std::to_string(labels.size()) + " labels for batch of " +
                                    std::to_string(n));

    LossAndGrad out{0.0, zero_params()};
    Tensor dy(logits.shape);
    const float inv_n = 1.0f / static_cast<float>(n);
    for (std::size_t b = 0; b < n; ++b) {
        const int label = labels[b];
        if (label < 0 || static_cast<std::size_t>(label) >= classes)
            throw std::out_of_range("backward: label " + std::to_string(label) + " outside [0, " +
                                    std::to_string(classes) + ")");
        auto z = logits.row(b);
        const float zmax = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (float v : z) sum += std::exp(double(v) - zmax);
        const double log_sum = std::log(sum);
        out.loss += log_sum - (double(z[label]) - zmax);
        auto g = dy.row(b);
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = std::exp(double(z[c]) - zmax - log_sum);
            g[c] = static_cast<float>(p - (static_cast<std::size_t>(label) == c ? 1.0 : 0.0)) * inv_n;
        }
    }
    out.loss /= static_cast<double>(n);

    for (std::size_t i = layers_.size(); i-- > 0;) {
        const LayerSpec& l = layers_[i];
        const Tensor& x = cache.inputs[i];
        const bool need_dx = i > 0;
        Tensor dx;
        if (need_dx) dx = Tensor(x.shape);
        switch (l.kind) {
            case LayerKind::Dense:
                dense_backward(l, params.segment(segment_of_layer_[i]), x, dy,
                               out.grads.segment(segment_of_layer_[i]), need_dx ? &dx : nullptr);
                break;
            case LayerKind::Conv2d:
                conv_backward(l, params.segment(segment_of_layer_[i]), x, dy, out.grads.segment(segment_of_layer_[i]),
                              need_dx ? &dx : nullptr);
                break;
            case LayerKind::Relu:
                if (need_dx)
                    for (std::size_t j = 0; j < x.size(); ++j) dx.data[j] = x.data[j] > 0.0f ? dy.data[j] : 0.0f;
                break;
            case LayerKind::MaxPool2d:
                if (need_dx) {
                    const auto& winners = cache.argmax[i];
                    for (std::size_t j = 0; j < winners.size(); ++j) dx.data[winners[j]] += dy.data[j];
                }
                break;
            case LayerKind::Flatten:
                if (need_dx) dx.data = dy.data;
                break;
        }
        if (need_dx) dy = std::move(dx);
    }
    return out;
}

LossAndGrad Architecture::loss_and_grad(const ParamVector& params, const Tensor& batch,
                                        std::span<const int> labels) const {
    ForwardCache cache;
    forward(params, batch, &cache);
    return backward(params, cache, labels);
}

namespace {

// Rows of the returned rows x cols matrix are orthonormal when rows <= cols,
// otherwise its columns are.
std::vector<double> orthogonal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    const bool transpose = rows > cols;
    const std::size_t r = transpose ? cols : rows;
    const std::size_t c = transpose ? rows : cols;
    std::vector<double> q(r * c);
    for (double& v : q) v = rng.normal();
    for (std::size_t i = 0; i < r; ++i) {
        double* qi = q.data() + i * c;
        // Two Gram-Schmidt passes keep the result orthogonal to double precision.
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t j = 0; j < i; ++j) {
                const double* qj = q.data() + j * c;
                double dot = 0;
                for (std::size_t k = 0; k < c; ++k) dot += qi[k] * qj[k];
                for (std::size_t k = 0; k < c; ++k) qi[k] -= dot * qj[k];
            }
        double norm = 0;
        for (std::size_t k = 0; k < c; ++k) norm += qi[k] * qi[k];
        norm = std::sqrt(norm);
        for (std::size_t k = 0; k < c; ++k) qi[k] /= norm;
    }
    if (!transpose) return q;
    std::vector<double> t(rows * cols);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t k = 0; k < c; ++k) t[k * cols + i] = q[i * c + k];
    return t;
}

}  // namespace

ParamVector init_params(const Architecture& arch, const InitScheme& scheme) {
    ParamVector params = arch.zero_params();
    std::size_t seg = 0;
    const auto& layers = arch.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        if (!l.parameterized()) continue;
        auto weights = params.segment(seg).first(l.weight_count());
        Rng rng(derive_seed(scheme.seed, {i}));
        const std::size_t receptive = l.kind == LayerKind::Conv2d ? l.kernel * l.kernel : 1;
        const double fan_in = double(l.in * receptive);
        const double fan_out = double(l.out * receptive);
        const bool is_head = i == arch.head_layer();

        InitKind kind = scheme.kind;
        if (kind == InitKind::Similar && !is_head) kind = InitKind::HeUniform;

        switch (kind) {
            case InitKind::HeUniform: {
                const double a = std::sqrt(2.0) * std::sqrt(3.0 / fan_in);
                for (float& w : weights) w = static_cast<float>(rng.uniform(-a, a));
                break;
            }
            case InitKind::HeNormal: {
                const double sigma = std::sqrt(2.0) * std::sqrt(1.0 / fan_in);
                for (float& w : weights) w = static_cast<float>(rng.normal(0.0, sigma));
                break;
            }
            case InitKind::XavierUniform: {
                const double a = std::sqrt(2.0) * std::sqrt(6.0 / (fan_in + fan_out));
                for (float& w : weights) w = static_cast<float>(rng.uniform(-a, a));
                break;
            }
            case InitKind::XavierNormal: {
                const double sigma = std::sqrt(2.0) * std::sqrt(2.0 / (fan_in + fan_out));
                for (float& w : weights) w = static_cast<float>(rng.normal(0.0, sigma));
                break;
            }
            case InitKind::Orthogonal: {
                const auto q = orthogonal_matrix(l.out, l.in * receptive, rng);
                for (std::size_t k = 0; k < weights.size(); ++k) weights[k] = static_cast<float>(q[k]);
                break;
            }
            case InitKind::Similar: {
                const std::size_t cols = l.in;
                for (std::size_t r = 0; r < l.out; ++r) {
                    std::vector<double> row(cols);
                    double norm = 0;
                    for (double& v : row) {
                        v = rng.uniform(0.45, 0.55);
                        norm += v * v;
                    }
                    norm = std::sqrt(norm);
                    for (std::size_t k = 0; k < cols; ++k) weights[r * cols + k] = static_cast<float>(row[k] / norm);
                }
                break;
            }
        }
        ++seg;
    }
    return params;
}

OrthogonalityStats head_orthogonality_stats(const Architecture& arch, const ParamVector& params) {
    const std::size_t classes = arch.num_classes();
    const std::size_t d = arch.representation_dim();
    if (classes < 2) throw std::invalid_argument("head_orthogonality_stats: need at least two head rows");
    auto w = params.segment(arch.head_segment());
    std::vector<double> norms(classes);
    for (std::size_t r = 0; r < classes; ++r) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) s += double(w[r * d + k]) * w[r * d + k];
        norms[r] = std::sqrt(s);
    }
    OrthogonalityStats stats;
    std::size_t pairs = 0;
    for (std::size_t p = 0; p < classes; ++p)
        for (std::size_t q = p + 1; q < classes; ++q) {
            double dot = 0;
            for (std::size_t k = 0; k < d; ++k) dot += double(w[p * d + k]) * w[q * d + k];
            const double denom = norms[p] * norms[q];
            const double c = denom > 0 ? std::abs(dot / denom) : 0.0;
            stats.mean_abs_cos += c;
            stats.max_abs_cos = std::max(stats.max_abs_cos, c);
            ++pairs;
        }
    stats.mean_abs_cos /= double(pairs);
    return stats;
}

}  // namespace fedsim
