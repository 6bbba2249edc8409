#include "i2a/attack.hpp"

#include <cmath>

namespace i2a::attack {

void AttackConfig::validate() const {
    require(lambda >= 0.0 && std::isfinite(lambda), "attack config: lambda must be >= 0");
    require(gamma >= 0.0 && std::isfinite(gamma), "attack config: gamma must be >= 0");
    require(eta > 0.0 && std::isfinite(eta), "attack config: eta must be > 0");
    require(T >= 1, "attack config: T must be >= 1");
    require(N >= 1, "attack config: N must be >= 1");
    require(std::isfinite(s_image) && s_image >= 0.0, "attack config: s_image must be >= 0");
    require(std::isfinite(s_text) && s_text >= 0.0, "attack config: s_text must be >= 0");
    require(proj_s_image_max > 0.0, "attack config: proj_s_image_max must be > 0");
    require(proj_s_image_step > 0.0, "attack config: proj_s_image_step must be > 0");
    require(proj_bisect_iters >= 1, "attack config: proj_bisect_iters must be >= 1");
    require(proj_s_text_max > 0.0, "attack config: proj_s_text_max must be > 0");
}

sampler::GuidanceFactors pgd_update(const sampler::GuidanceFactors& factors,
                                    const Tensor& grad_alpha, const Tensor& grad_beta,
                                    double eta) {
    require(grad_alpha.shape == factors.alpha.shape, "pgd_update: alpha gradient shape mismatch");
    require(grad_beta.shape == factors.beta.shape, "pgd_update: beta gradient shape mismatch");
    auto step = [eta](const Tensor& f, const Tensor& grad) {
        Tensor out = f;
        for (int i = 0; i < out.size(); ++i) {
            double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
            out[i] = std::min(1.0, std::max(0.0, out[i] + eta * s));
        }
        return out;
    };
    return sampler::GuidanceFactors{step(factors.alpha, grad_alpha),
                                    step(factors.beta, grad_beta)};
}

namespace {

struct Candidate {
    Tensor image;
    sampler::GuidanceFactors factors;
    double distance = 0.0;
    double objective = 0.0;
    int predicted = -1;
    bool valid = false;
};

Tensor sample_decoded(models::Backend& backend, const Tensor& z_T,
                      const sampler::ConditionPair& cond, const sampler::GuidanceScales& scales,
                      const sampler::GuidanceFactors& factors,
                      const sampler::NoiseSequence& noise) {
    Tensor z0 = sampler::sample(backend.denoiser(), z_T, cond, scales, factors,
                                backend.schedule(), noise);
    return backend.decode(z0);
}

}  // namespace

AttackResult i2a_attack(const Tensor& x, const std::string& instruction, int label,
                        models::Classifier& classifier, models::Backend& backend,
                        perceptual::FeatureExtractor& phi, const AttackConfig& config) {
    config.validate();
    require(label >= 0 && label < classifier.num_classes(), "i2a_attack: label out of range");
    const sampler::NoiseSchedule& schedule = backend.schedule();
    schedule.validate();
    require_config(schedule.steps() == config.T,
                   "backend schedule has " + std::to_string(schedule.steps()) +
                       " steps but config.T = " + std::to_string(config.T));

    const Shape latent = backend.latent_shape();
    const Tensor z_T = models::draw_initial_latent(latent, schedule.sigmas.back(), config.seed);
    const sampler::NoiseSequence noise = sampler::NoiseSequence::draw(latent, config.T, config.seed);
    const sampler::ConditionPair cond = backend.condition(x, instruction);
    const sampler::GuidanceScales scales{config.s_image, config.s_text};

    sampler::GuidanceFactors factors = sampler::GuidanceFactors::all_ones(latent);
    const bool optimizing = config.optimize_alpha || config.optimize_beta;

    Candidate best_feasible;
    Candidate last;
    bool early = false;
    int stop_iter = config.N;

    for (int i = 0; i < config.N; ++i) {
        ad::Graph g;
        ad::Var alpha = config.optimize_alpha ? g.leaf(factors.alpha) : g.constant(factors.alpha);
        ad::Var beta = config.optimize_beta ? g.leaf(factors.beta) : g.constant(factors.beta);
        sampler::CondVars cv = sampler::upload(g, cond);
        ad::Var z0 = sampler::sample(g, backend.denoiser(), g.constant(z_T), cv, scales, alpha,
                                     beta, schedule, noise);
        ad::Var x_adv = backend.decode(g, z0);

        perceptual::ObjectiveParts parts;
        ad::Var loss = perceptual::objective(g, x_adv, x, label, classifier, phi, config.gamma,
                                             config.lambda, &parts);
        if (!std::isfinite(parts.value))
            throw NumericError("i2a_attack: non-finite loss at iteration " + std::to_string(i));

        Candidate cur{g.value(x_adv), factors, parts.distance, parts.value, parts.predicted, true};
        last = cur;
        bool feasible = parts.distance <= config.gamma + kConstraintTol;
        if (feasible && (!best_feasible.valid || parts.value > best_feasible.objective))
            best_feasible = cur;

        // Early stop checks the pre-update image; the returned factors are
        // the ones that produced it.
        if (parts.predicted != label && feasible) {
            early = true;
            stop_iter = i;
            break;
        }
        if (!optimizing || i == config.N - 1) break;

        g.backward(loss);
        Tensor ga = config.optimize_alpha ? g.grad(alpha) : Tensor::zeros(factors.alpha.shape);
        Tensor gb = config.optimize_beta ? g.grad(beta) : Tensor::zeros(factors.beta.shape);
        factors = pgd_update(factors, ga, gb, config.eta);
    }

    Candidate chosen = early ? last : (best_feasible.valid ? best_feasible : last);

    AttackResult result;
    result.iterations = early ? stop_iter : (optimizing ? config.N : 0);
    result.factors = chosen.factors;
    result.adversarial = chosen.image;
    result.distance = chosen.distance;

    // With both factor switches off this is the benign-editing reference
    // path; it reports d but is not projected.
    if (optimizing && chosen.distance > config.gamma + kConstraintTol) {
        ProjectionResult proj = project(x, z_T, chosen.factors, instruction, backend, phi,
                                        config.gamma, config);
        if (proj.feasible) {
            result.projected = true;
            result.proj_scales = ProjScales{proj.s_image, proj.s_text};
            result.adversarial = proj.image;
            result.distance = proj.distance;
        }
    }

    result.constraint_met = result.distance <= config.gamma + kConstraintTol;
    result.success = models::classify(classifier, result.adversarial) != label;
    return result;
}

ProjectionResult project(const Tensor& x, const Tensor& z_T,
                         const sampler::GuidanceFactors& factors, const std::string& instruction,
                         models::Backend& backend, perceptual::FeatureExtractor& phi, double gamma,
                         const AttackConfig& config, ProjectionTrace* trace) {
    config.validate();
    factors.validate();
    const sampler::NoiseSequence noise =
        sampler::NoiseSequence::draw(backend.latent_shape(), config.T, config.seed);
    const sampler::ConditionPair cond = backend.condition(x, instruction);

    ProjectionResult result;

    // Phase 1: s_text = 0, walk s_image up until the decoded image is inside
    // the LPIPS budget.
    double s_image_star = 0.0;
    bool found = false;
    for (int k = 0;; ++k) {
        double s_image = config.s_image + k * config.proj_s_image_step;
        if (s_image > config.proj_s_image_max + 1e-12) break;
        Tensor img = sample_decoded(backend, z_T, cond, {s_image, 0.0}, factors, noise);
        double d = perceptual::lpips_distance(img, x, phi);
        bool feasible = d <= gamma + kConstraintTol;
        if (trace) trace->steps.push_back({1, s_image, 0.0, d, feasible, 0.0, 0.0});
        if (feasible) {
            s_image_star = s_image;
            result.image = std::move(img);
            result.distance = d;
            found = true;
            break;
        }
    }
    if (!found) return result;  // feasible = false

    // Phase 2: exactly n bisection rounds on s_text; the retained image is
    // always feasible (initialized from phase 1).
    double lo = 0.0;
    double hi = config.proj_s_text_max;
    double s_text_star = 0.0;
    for (int k = 0; k < config.proj_bisect_iters; ++k) {
        double mid = (lo + hi) / 2.0;
        Tensor img = sample_decoded(backend, z_T, cond, {s_image_star, mid}, factors, noise);
        double d = perceptual::lpips_distance(img, x, phi);
        bool feasible = d <= gamma + kConstraintTol;
        if (feasible) {
            lo = mid;
            s_text_star = mid;
            result.image = std::move(img);
            result.distance = d;
        } else {
            hi = mid;
        }
        if (trace) trace->steps.push_back({2, s_image_star, mid, d, feasible, lo, hi});
    }

    result.feasible = true;
    result.s_image = s_image_star;
    result.s_text = s_text_star;
    return result;
}

}  // namespace i2a::attack
