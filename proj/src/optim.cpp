#include "fedsim/optim.hpp"

#include <stdexcept>

namespace fedsim {

OptState::OptState(const ParamVector& layout, float m) : momentum_buffer(layout.segment_sizes()), momentum(m) {}

void sgd_step(ParamVector& params, const ParamVector& grads, OptState& opt, double lr, const ParamMask& mask,
              const std::optional<ProximalTerm>& prox) {
    if (lr < 0) throw std::invalid_argument("sgd_step: negative learning rate");
    if (!params.same_layout(grads) || !params.same_layout(opt.momentum_buffer) ||
        mask.num_segments() != params.num_segments())
        throw std::invalid_argument("sgd_step: layout mismatch");
    if (prox) {
        if (prox->mu < 0) throw std::invalid_argument("sgd_step: negative proximal coefficient");
        if (!params.same_layout(prox->anchor.get())) throw std::invalid_argument("sgd_step: anchor layout mismatch");
    }
    const float step = static_cast<float>(lr);
    const float m = opt.momentum;
    // mu == 0 adds nothing; skipping keeps the update bit-identical to plain SGD.
    const bool use_prox = prox && prox->mu > 0;
    const float mu = use_prox ? static_cast<float>(prox->mu) : 0.0f;

    for (std::size_t s = 0; s < params.num_segments(); ++s) {
        if (!mask[s]) continue;
        auto p = params.segment(s);
        auto g = grads.segment(s);
        auto buf = opt.momentum_buffer.segment(s);
        if (use_prox) {
            auto a = prox->anchor.get().segment(s);
            for (std::size_t i = 0; i < p.size(); ++i) {
                const float eff = g[i] + mu * (p[i] - a[i]);
                buf[i] = m * buf[i] + eff;
                p[i] -= step * buf[i];
            }
        } else {
            for (std::size_t i = 0; i < p.size(); ++i) {
                buf[i] = m * buf[i] + g[i];
                p[i] -= step * buf[i];
            }
        }
    }
}

double LRSchedule::at(std::size_t update_index) const {
    if (update_index < first_decay()) return base_lr;
    if (update_index < second_decay()) return base_lr * decay_factor;
    return base_lr * decay_factor * decay_factor;
}

}  // namespace fedsim
