#pragma once

// The fixed small-scale campaign: BaseNet on 4-class Gaussian blobs shaped
// as 1x8x8 images, baseline and Hessian-aware arms trained under the same
// RMSProp schedule so the regulariser is the only difference.
//
// Momentum SGD at rate 0.1 was tried first: with alpha = 0.01 the
// regularised arm sat on a stability edge and several seeds diverged to a
// constant classifier depending on compiler flags. RMSProp at 1e-3 trains
// every seed in both arms to the same accuracy.

#include "hatrain/data.hpp"
#include "hatrain/model.hpp"
#include "hatrain/trainer.hpp"

namespace hat::desk {

inline constexpr std::uint64_t kDataSeed = 1;
inline constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};
inline constexpr std::size_t kEpochs = 20;
inline constexpr double kAlpha = 0.01;
inline constexpr std::size_t kProbes = 10;
inline constexpr std::size_t kEvalSize = 1000;
inline constexpr std::size_t kAttackSize = 128;

inline const std::vector<std::size_t>& input_shape() {
    static const std::vector<std::size_t> shape{1, 8, 8};
    return shape;
}

inline DataSplit dataset() {
    BlobConfig cfg;
    cfg.seed = kDataSeed;
    DataSplit d = synth_blobs(cfg);
    return {with_shape(std::move(d.train), input_shape()), with_shape(std::move(d.test), input_shape())};
}

inline ModelSpec model() { return zoo::basenet(input_shape(), 4); }

inline TrainConfig baseline(std::uint64_t seed) {
    TrainConfig c = baseline_config();
    c.optimizer = OptimizerKind::rmsprop;
    c.lr = 1e-3;
    c.momentum = 0.0;
    c.epochs = kEpochs;
    c.seed = seed;
    return c;
}

inline TrainConfig hessian_aware(std::uint64_t seed) {
    TrainConfig c = baseline(seed);
    c.alpha = kAlpha;
    c.probes = kProbes;
    return c;
}

/// Hessian-aware arm with curvature restricted to the final parameterised layer.
inline TrainConfig hessian_aware_last_layer(std::uint64_t seed) {
    TrainConfig c = hessian_aware(seed);
    c.hessian_layers = last_layers(Architecture(model()), 1);
    return c;
}

} // namespace hat::desk
