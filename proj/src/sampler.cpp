#include "i2a/sampler.hpp"

#include <cmath>
#include <optional>

#include "i2a/models.hpp"

namespace i2a::sampler {

void NoiseSchedule::validate() const {
    require_config(sigmas.size() >= 2, "noise schedule needs at least one step (T >= 1)");
    require_config(sigmas.front() >= 0.0, "noise schedule: sigma_0 must be >= 0");
    for (size_t t = 1; t < sigmas.size(); ++t)
        require_config(sigmas[t - 1] < sigmas[t], "noise schedule must be strictly increasing");
    require_config(sigmas.back() > 0.0, "noise schedule: sigma_T must be > 0");
}

NoiseSchedule NoiseSchedule::geometric(int steps, double sigma_min, double sigma_max) {
    require_config(steps >= 1, "geometric schedule: steps must be >= 1");
    require_config(sigma_min > 0.0 && sigma_max > sigma_min, "geometric schedule: need 0 < sigma_min < sigma_max");
    NoiseSchedule s;
    s.sigmas.resize(static_cast<size_t>(steps) + 1);
    double ratio = std::pow(sigma_max / sigma_min, 1.0 / steps);
    for (int t = 0; t <= steps; ++t) s.sigmas[static_cast<size_t>(t)] = sigma_min * std::pow(ratio, t);
    s.sigmas.back() = sigma_max;
    s.validate();
    return s;
}

void GuidanceScales::validate() const {
    if (!(std::isfinite(s_image) && s_image >= 0.0))
        throw InputError("s_image must be finite and >= 0");
    if (!(std::isfinite(s_text) && s_text >= 0.0))
        throw InputError("s_text must be finite and >= 0");
}

GuidanceFactors GuidanceFactors::all_ones(const Shape& latent) {
    return GuidanceFactors{Tensor::ones(latent), Tensor::ones(latent)};
}

void GuidanceFactors::validate() const {
    if (alpha.shape != beta.shape)
        throw InputError("guidance factors: alpha/beta shape mismatch");
    for (double v : alpha.data)
        if (!(v >= 0.0 && v <= 1.0)) throw InputError("guidance factors: alpha outside [0, 1]");
    for (double v : beta.data)
        if (!(v >= 0.0 && v <= 1.0)) throw InputError("guidance factors: beta outside [0, 1]");
}

NoiseSequence NoiseSequence::draw(const Shape& latent, int steps, uint64_t seed) {
    require_config(steps >= 1, "noise sequence: steps must be >= 1");
    NoiseSequence ns;
    ns.seed = seed;
    Rng rng(derive_seed(seed, 1));
    ns.zetas.reserve(static_cast<size_t>(steps));
    for (int k = 0; k < steps; ++k) ns.zetas.push_back(rng.gaussian_tensor(latent, 1.0));
    return ns;
}

CondVars upload(ad::Graph& g, const ConditionPair& cond) {
    return CondVars{g.constant(cond.image_cond), g.constant(cond.text_cond),
                    g.constant(cond.null_image), g.constant(cond.null_text)};
}

namespace {

// Shared three-evaluation guided score; factors are optional modulation.
ad::Var guided_score(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z, int t,
                     const CondVars& cond, const GuidanceScales& scales,
                     std::optional<ad::Var> alpha, std::optional<ad::Var> beta) {
    scales.validate();
    const Shape zshape = g.value(z).shape;
    ad::Var eps_uncond = denoiser.eval(g, z, t, cond.null_image, cond.null_text);
    require_config(g.value(eps_uncond).shape == zshape,
                   "denoiser output shape does not match the latent");
    ad::Var eps_image = denoiser.eval(g, z, t, cond.image_cond, cond.null_text);
    ad::Var eps_text = denoiser.eval(g, z, t, cond.image_cond, cond.text_cond);

    ad::Var image_diff = g.sub(eps_image, eps_uncond);
    ad::Var text_diff = g.sub(eps_text, eps_image);
    if (alpha) {
        require_config(g.value(*alpha).shape == zshape,
                       "alpha shape " + shape_str(g.value(*alpha).shape) +
                           " does not match latent " + shape_str(zshape));
        image_diff = g.mul(*alpha, image_diff);
    }
    if (beta) {
        require_config(g.value(*beta).shape == zshape,
                       "beta shape " + shape_str(g.value(*beta).shape) +
                           " does not match latent " + shape_str(zshape));
        text_diff = g.mul(*beta, text_diff);
    }
    ad::Var out = g.add(eps_uncond, g.scale(image_diff, scales.s_image));
    return g.add(out, g.scale(text_diff, scales.s_text));
}

ad::Var run_chain(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z_T, const CondVars& cond,
                  const GuidanceScales& scales, std::optional<ad::Var> alpha,
                  std::optional<ad::Var> beta, const NoiseSchedule& schedule,
                  const NoiseSequence& noise) {
    schedule.validate();
    int steps = schedule.steps();
    require_config(static_cast<int>(noise.zetas.size()) == steps,
                   "noise sequence length " + std::to_string(noise.zetas.size()) +
                       " does not match schedule steps " + std::to_string(steps));
    ad::Var z = z_T;
    for (int k = 0; k < steps; ++k) {
        int t = steps - k;
        ad::Var score = guided_score(g, denoiser, z, t, cond, scales, alpha, beta);
        ad::Var zeta = g.constant(noise.zetas[static_cast<size_t>(k)]);
        z = denoise_step(g, z, score, schedule.sigmas[static_cast<size_t>(t)],
                         schedule.sigmas[static_cast<size_t>(t) - 1], zeta);
    }
    return z;
}

}  // namespace

ad::Var cfg_score(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z, int t,
                  const CondVars& cond, const GuidanceScales& scales) {
    return guided_score(g, denoiser, z, t, cond, scales, std::nullopt, std::nullopt);
}

ad::Var adv_score(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z, int t,
                  const CondVars& cond, const GuidanceScales& scales, ad::Var alpha,
                  ad::Var beta) {
    return guided_score(g, denoiser, z, t, cond, scales, alpha, beta);
}

ad::Var denoise_step(ad::Graph& g, ad::Var z, ad::Var score, double sigma_t, double sigma_prev,
                     ad::Var zeta) {
    require(sigma_prev <= sigma_t, "denoise_step: sigma_prev must be <= sigma_t");
    if (sigma_t == 0.0) throw NumericError("denoise_step: sigma_t is zero (invalid schedule)");
    double var_delta = sigma_t * sigma_t - sigma_prev * sigma_prev;
    double noise_coef = std::sqrt(sigma_prev * sigma_prev * var_delta / (sigma_t * sigma_t));
    ad::Var out = g.add(z, g.scale(score, var_delta));
    return g.add(out, g.scale(zeta, noise_coef));
}

ad::Var sample(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z_T, const CondVars& cond,
               const GuidanceScales& scales, ad::Var alpha, ad::Var beta,
               const NoiseSchedule& schedule, const NoiseSequence& noise) {
    return run_chain(g, denoiser, z_T, cond, scales, alpha, beta, schedule, noise);
}

ad::Var sample_cfg(ad::Graph& g, models::DenoiserModel& denoiser, ad::Var z_T,
                   const CondVars& cond, const GuidanceScales& scales,
                   const NoiseSchedule& schedule, const NoiseSequence& noise) {
    return run_chain(g, denoiser, z_T, cond, scales, std::nullopt, std::nullopt, schedule, noise);
}

namespace {

// Direct-arithmetic twins of the graph ops. Operation order matches the
// graph path exactly so values are bit-identical (FP contraction is off).
Tensor guided_score_values(models::DenoiserModel& denoiser, const Tensor& z, int t,
                           const ConditionPair& cond, const GuidanceScales& scales,
                           const Tensor* alpha, const Tensor* beta) {
    scales.validate();
    Tensor eps_uncond = denoiser.eval(z, t, cond.null_image, cond.null_text);
    if (eps_uncond.shape != z.shape)
        throw ConfigError("denoiser output shape does not match the latent");
    Tensor eps_image = denoiser.eval(z, t, cond.image_cond, cond.null_text);
    Tensor eps_text = denoiser.eval(z, t, cond.image_cond, cond.text_cond);
    if (alpha && alpha->shape != z.shape)
        throw ConfigError("alpha shape " + shape_str(alpha->shape) + " does not match latent " +
                          shape_str(z.shape));
    if (beta && beta->shape != z.shape)
        throw ConfigError("beta shape " + shape_str(beta->shape) + " does not match latent " +
                          shape_str(z.shape));
    Tensor out = Tensor::zeros(z.shape);
    for (int i = 0; i < out.size(); ++i) {
        double image_diff = eps_image[i] - eps_uncond[i];
        double text_diff = eps_text[i] - eps_image[i];
        if (alpha) image_diff = (*alpha)[i] * image_diff;
        if (beta) text_diff = (*beta)[i] * text_diff;
        double acc = eps_uncond[i] + image_diff * scales.s_image;
        out[i] = acc + text_diff * scales.s_text;
    }
    return out;
}

Tensor run_chain_values(models::DenoiserModel& denoiser, const Tensor& z_T,
                        const ConditionPair& cond, const GuidanceScales& scales,
                        const Tensor* alpha, const Tensor* beta, const NoiseSchedule& schedule,
                        const NoiseSequence& noise) {
    schedule.validate();
    int steps = schedule.steps();
    require_config(static_cast<int>(noise.zetas.size()) == steps,
                   "noise sequence length " + std::to_string(noise.zetas.size()) +
                       " does not match schedule steps " + std::to_string(steps));
    Tensor z = z_T;
    for (int k = 0; k < steps; ++k) {
        int t = steps - k;
        Tensor score = guided_score_values(denoiser, z, t, cond, scales, alpha, beta);
        z = denoise_step(z, score, schedule.sigmas[static_cast<size_t>(t)],
                         schedule.sigmas[static_cast<size_t>(t) - 1],
                         noise.zetas[static_cast<size_t>(k)]);
    }
    return z;
}

}  // namespace

Tensor cfg_score(models::DenoiserModel& denoiser, const Tensor& z, int t,
                 const ConditionPair& cond, const GuidanceScales& scales) {
    return guided_score_values(denoiser, z, t, cond, scales, nullptr, nullptr);
}

Tensor adv_score(models::DenoiserModel& denoiser, const Tensor& z, int t,
                 const ConditionPair& cond, const GuidanceScales& scales,
                 const GuidanceFactors& factors) {
    factors.validate();
    return guided_score_values(denoiser, z, t, cond, scales, &factors.alpha, &factors.beta);
}

Tensor denoise_step(const Tensor& z, const Tensor& score, double sigma_t, double sigma_prev,
                    const Tensor& zeta) {
    if (!(sigma_prev <= sigma_t)) throw InputError("denoise_step: sigma_prev must be <= sigma_t");
    if (sigma_t == 0.0) throw NumericError("denoise_step: sigma_t is zero (invalid schedule)");
    if (score.shape != z.shape || zeta.shape != z.shape)
        throw InputError("denoise_step: shape mismatch");
    double var_delta = sigma_t * sigma_t - sigma_prev * sigma_prev;
    double noise_coef = std::sqrt(sigma_prev * sigma_prev * var_delta / (sigma_t * sigma_t));
    Tensor out = Tensor::zeros(z.shape);
    for (int i = 0; i < out.size(); ++i) {
        double acc = z[i] + score[i] * var_delta;
        out[i] = acc + zeta[i] * noise_coef;
    }
    return out;
}

Tensor sample(models::DenoiserModel& denoiser, const Tensor& z_T, const ConditionPair& cond,
              const GuidanceScales& scales, const GuidanceFactors& factors,
              const NoiseSchedule& schedule, const NoiseSequence& noise) {
    factors.validate();
    return run_chain_values(denoiser, z_T, cond, scales, &factors.alpha, &factors.beta, schedule,
                            noise);
}

Tensor sample_cfg(models::DenoiserModel& denoiser, const Tensor& z_T, const ConditionPair& cond,
                  const GuidanceScales& scales, const NoiseSchedule& schedule,
                  const NoiseSequence& noise) {
    return run_chain_values(denoiser, z_T, cond, scales, nullptr, nullptr, schedule, noise);
}

}  // namespace i2a::sampler
