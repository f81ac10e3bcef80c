#include "fedsim/training.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace fedsim {

EpochStats train_epochs(const Architecture& arch, ParamVector& params, OptState& opt, const ClientData& client,
                        std::size_t epochs, std::size_t batch_size, const ParamMask& mask, const StepSchedule& sched,
                        Rng& rng, const std::optional<ProximalTerm>& prox, std::size_t first_epoch) {
    if (batch_size == 0) throw std::invalid_argument("train_epochs: batch size must be at least 1");
    if (client.size() == 0) throw std::invalid_argument("train_epochs: no training data");
    EpochStats stats;
    std::vector<std::size_t> order(client.indices.begin(), client.indices.end());
    const std::size_t iters = (order.size() + batch_size - 1) / batch_size;
    for (std::size_t e = 0; e < epochs; ++e) {
        rng.shuffle(std::span(order));
        for (std::size_t it = 0; it < iters; ++it) {
            const std::size_t lo = it * batch_size;
            const std::size_t hi = std::min(order.size(), lo + batch_size);
            const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
            const Tensor x = client.data->gather(idx);
            const std::vector<int> y = client.data->gather_labels(idx);
            const LossAndGrad lg = arch.loss_and_grad(params, x, y);
            sgd_step(params, lg.grads, opt, sched.lr(first_epoch + e, it, iters), mask, prox);
            stats.loss_sum += lg.loss * double(idx.size());
            stats.samples += idx.size();
        }
    }
    return stats;
}

}  // namespace fedsim
