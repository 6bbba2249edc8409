#pragma once

#include <cstdint>
#include <vector>

#include "i2a/autodiff.hpp"
#include "i2a/tensor.hpp"

namespace i2a::models {
class DenoiserModel;
}

namespace i2a::sampler {

// Noise scales sigma_0..sigma_T indexed by timestep; strictly increasing.
struct NoiseSchedule {
    std::vector<double> sigmas;

    int steps() const { return static_cast<int>(sigmas.size()) - 1; }
    void validate() const;
    static NoiseSchedule geometric(int steps, double sigma_min = 0.01, double sigma_max = 1.0);
};

struct GuidanceScales {
    double s_image = 1.5;
    double s_text = 7.5;
    void validate() const;
};

// Per-element modulation of the image/text guidance terms; entries in [0, 1].
struct GuidanceFactors {
    Tensor alpha;
    Tensor beta;

    static GuidanceFactors all_ones(const Shape& latent);
    void validate() const;
};

struct ConditionPair {
    Tensor image_cond;  // encoded input image
    Tensor text_cond;   // encoded edit instruction
    Tensor null_image;  // fixed null image conditioning
    Tensor null_text;   // fixed null text conditioning
};

// The per-step noise draws zeta_T..zeta_1. Regenerating from the same seed
// yields bit-identical tensors.
struct NoiseSequence {
    std::vector<Tensor> zetas;  // zetas[k] is zeta_{T-k}
    uint64_t seed = 0;

    static NoiseSequence draw(const Shape& latent, int steps, uint64_t seed);
};

struct CondVars {
    ad::Var image_cond, text_cond, null_image, null_text;
};

CondVars upload(ad::Graph& g, const ConditionPair& cond);

// Classifier-free guided score (three denoiser evaluations).
ad::Var cfg_score(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z, int t,
                  const CondVars& cond, const GuidanceScales& scales);

// Guided score with the image/text guidance terms modulated elementwise by
// alpha and beta.
ad::Var adv_score(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z, int t,
                  const CondVars& cond, const GuidanceScales& scales, ad::Var alpha,
                  ad::Var beta);

ad::Var denoise_step(ad::Graph& g, ad::Var z, ad::Var score, double sigma_t, double sigma_prev,
                     ad::Var zeta);

// Full reverse pass t = T..1 with modulated guidance. Differentiable w.r.t.
// alpha and beta (and z_T) through the whole chain.
ad::Var sample(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z_T, const CondVars& cond,
               const GuidanceScales& scales, ad::Var alpha, ad::Var beta,
               const NoiseSchedule& schedule, const NoiseSequence& noise);

// Benign editing path (no modulation).
ad::Var sample_cfg(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z_T,
                   const CondVars& cond, const GuidanceScales& scales,
                   const NoiseSchedule& schedule, const NoiseSequence& noise);

// Plain-tensor entry points. These run the same graph code with constant
// inputs, so values are bit-identical to the differentiable path.
Tensor cfg_score(models::DenoiserModel& denoiser, const Tensor& z, int t,
                 const ConditionPair& cond, const GuidanceScales& scales);
Tensor adv_score(models::DenoiserModel& denoiser, const Tensor& z, int t,
                 const ConditionPair& cond, const GuidanceScales& scales,
                 const GuidanceFactors& factors);
Tensor denoise_step(const Tensor& z, const Tensor& score, double sigma_t, double sigma_prev,
                    const Tensor& zeta);
Tensor sample(models::DenoiserModel& denoiser, const Tensor& z_T, const ConditionPair& cond,
              const GuidanceScales& scales, const GuidanceFactors& factors,
              const NoiseSchedule& schedule, const NoiseSequence& noise);
Tensor sample_cfg(models::DenoiserModel& denoiser, const Tensor& z_T, const ConditionPair& cond,
                  const GuidanceScales& scales, const NoiseSchedule& schedule,
                  const NoiseSequence& noise);

}  // namespace i2a::sampler
