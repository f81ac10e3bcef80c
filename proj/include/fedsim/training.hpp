#pragma once

#include <cstddef>
#include <optional>

#include "fedsim/fl.hpp"

namespace fedsim {

struct EpochStats {
    double loss_sum = 0.0;  // sum over samples of the per-sample loss
    std::size_t samples = 0;
    double mean() const { return samples ? loss_sum / double(samples) : 0.0; }
};

/// Shuffled minibatch momentum SGD over the client's data. Each epoch has
/// ceil(n/B) iterations, the last one possibly short. Epoch numbers passed to
/// the schedule start at first_epoch.
EpochStats train_epochs(const Architecture& arch, ParamVector& params, OptState& opt, const ClientData& client,
                        std::size_t epochs, std::size_t batch_size, const ParamMask& mask, const StepSchedule& sched,
                        Rng& rng, const std::optional<ProximalTerm>& prox = std::nullopt,
                        std::size_t first_epoch = 0);

}  // namespace fedsim
