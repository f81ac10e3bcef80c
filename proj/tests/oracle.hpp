#pragma once

// Straightforward double-precision re-implementation of the supported layers,
// written independently of the library for gradient and forward checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "fedsim/network.hpp"

namespace oracle {

using fedsim::LayerKind;
using fedsim::LayerSpec;

struct Activation {
    std::vector<std::size_t> shape;  // per sample
    std::vector<double> v;
};

struct Probe {
    double loss = 0;
    double min_relu_margin = std::numeric_limits<double>::infinity();  // smallest |pre-activation|
    double min_pool_gap = std::numeric_limits<double>::infinity();     // smallest top-2 gap in a pool window
    std::vector<std::vector<double>> logits;
};

/// params: one flat vector per parameterized layer, weights then bias.
inline Probe evaluate(const std::vector<std::size_t>& input_shape, const std::vector<LayerSpec>& layers,
                      const std::vector<std::vector<double>>& params, const std::vector<std::vector<double>>& batch,
                      const std::vector<int>& labels) {
    Probe probe;
    for (std::size_t n = 0; n < batch.size(); ++n) {
        Activation a{input_shape, batch[n]};
        std::size_t seg = 0;
        for (const LayerSpec& l : layers) {
            Activation b;
            switch (l.kind) {
                case LayerKind::Dense: {
                    const auto& p = params[seg++];
                    b.shape = {l.out};
                    b.v.assign(l.out, 0.0);
                    for (std::size_t o = 0; o < l.out; ++o) {
                        double s = l.has_bias ? p[l.out * l.in + o] : 0.0;
                        for (std::size_t i = 0; i < l.in; ++i) s += p[o * l.in + i] * a.v[i];
                        b.v[o] = s;
                    }
                    break;
                }
                case LayerKind::Conv2d: {
                    const auto& p = params[seg++];
                    const std::size_t H = a.shape[1], W = a.shape[2], k = l.kernel, pad = l.padding;
                    const std::size_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
                    b.shape = {l.out, OH, OW};
                    b.v.assign(l.out * OH * OW, 0.0);
                    const std::size_t nw = l.out * l.in * k * k;
                    for (std::size_t co = 0; co < l.out; ++co)
                        for (std::size_t y = 0; y < OH; ++y)
                            for (std::size_t x = 0; x < OW; ++x) {
                                double s = l.has_bias ? p[nw + co] : 0.0;
                                for (std::size_t ci = 0; ci < l.in; ++ci)
                                    for (std::size_t ky = 0; ky < k; ++ky)
                                        for (std::size_t kx = 0; kx < k; ++kx) {
                                            const long iy = long(y + ky) - long(pad), ix = long(x + kx) - long(pad);
                                            if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                                            s += p[((co * l.in + ci) * k + ky) * k + kx] *
                                                 a.v[(ci * H + std::size_t(iy)) * W + std::size_t(ix)];
                                        }
                                b.v[(co * OH + y) * OW + x] = s;
                            }
                    break;
                }
                case LayerKind::Relu:
                    b = a;
                    for (double& v : b.v) {
                        probe.min_relu_margin = std::min(probe.min_relu_margin, std::abs(v));
                        v = std::max(v, 0.0);
                    }
                    break;
                case LayerKind::MaxPool2d: {
                    const std::size_t C = a.shape[0], H = a.shape[1], W = a.shape[2], k = l.kernel;
                    const std::size_t OH = H / k, OW = W / k;
                    b.shape = {C, OH, OW};
                    b.v.assign(C * OH * OW, 0.0);
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t y = 0; y < OH; ++y)
                            for (std::size_t x = 0; x < OW; ++x) {
                                std::vector<double> w;
                                for (std::size_t dy = 0; dy < k; ++dy)
                                    for (std::size_t dx = 0; dx < k; ++dx)
                                        w.push_back(a.v[(c * H + y * k + dy) * W + x * k + dx]);
                                std::sort(w.begin(), w.end(), std::greater<>());
                                if (w.size() > 1) probe.min_pool_gap = std::min(probe.min_pool_gap, w[0] - w[1]);
                                b.v[(c * OH + y) * OW + x] = w[0];
                            }
                    break;
                }
                case LayerKind::Flatten:
                    b.v = a.v;
                    b.shape = {a.v.size()};
                    break;
            }
            a = std::move(b);
        }
        const double mx = *std::max_element(a.v.begin(), a.v.end());
        double z = 0;
        for (double v : a.v) z += std::exp(v - mx);
        probe.loss += (std::log(z) + mx - a.v[std::size_t(labels[n])]) / double(batch.size());
        probe.logits.push_back(a.v);
    }
    return probe;
}

}  // namespace oracle
