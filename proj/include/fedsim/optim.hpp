#pragma once

#include <cstddef>
#include <functional>
#include <optional>

#include "fedsim/params.hpp"

namespace fedsim {

/// Momentum SGD state. Buffers start at zero, so the first step uses the raw gradient.
struct OptState {
    ParamVector momentum_buffer;
    float momentum = 0.9f;

    OptState(const ParamVector& layout, float m);
};

/// Pulls the masked-in parameters toward an anchor: the effective gradient
/// becomes g + mu * (params - anchor). FedProx uses the round's starting
/// model as anchor, Ditto uses the global model.
struct ProximalTerm {
    double mu = 0.0;
    std::reference_wrapper<const ParamVector> anchor;
};

/// One momentum-SGD update of the segments selected by mask; other segments
/// are not read or written. Throws std::invalid_argument on lr < 0, mu < 0
/// or layout mismatch.
void sgd_step(ParamVector& params, const ParamVector& grads, OptState& opt, double lr, const ParamMask& mask,
              const std::optional<ProximalTerm>& prox = std::nullopt);

/// Step decay: base_lr until floor(T/2), x0.1 until floor(3T/4), x0.01 after.
struct LRSchedule {
    double base_lr = 0.1;
    std::size_t total_updates = 1;
    double decay_factor = 0.1;

    std::size_t first_decay() const { return total_updates / 2; }
    std::size_t second_decay() const { return total_updates * 3 / 4; }
    /// Indices past the end clamp to the last segment.
    double at(std::size_t update_index) const;
    double final_lr() const { return base_lr * decay_factor * decay_factor; }
};

}  // namespace fedsim
