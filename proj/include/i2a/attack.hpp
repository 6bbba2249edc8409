#pragma once

#include <optional>
#include <string>
#include <vector>

#include "i2a/models.hpp"
#include "i2a/perceptual.hpp"
#include "i2a/sampler.hpp"
#include "i2a/tensor.hpp"

namespace i2a::attack {

// Slack absorbing floating-point noise in the d <= gamma check.
inline constexpr double kConstraintTol = 1e-9;

struct AttackConfig {
    double lambda = 100.0;  // Lagrange multiplier
    double gamma = 0.3;     // LPIPS budget
    double eta = 0.1;       // PGD step size
    int T = 20;             // diffusion steps
    double s_image = 1.5;
    double s_text = 7.5;
    int N = 200;  // max PGD iterations
    uint64_t seed = 0;

    double proj_s_image_max = 10.0;
    double proj_s_image_step = 0.2;
    int proj_bisect_iters = 10;
    double proj_s_text_max = 20.0;

    // Guidance-factor switches (both on = full attack; both off = benign edit).
    bool optimize_alpha = true;
    bool optimize_beta = true;

    void validate() const;
};

struct ProjScales {
    double s_image = 0.0;
    double s_text = 0.0;
};

struct AttackResult {
    Tensor adversarial;
    bool success = false;      // f(x_adv) != y on the returned image
    double distance = 0.0;     // final LPIPS d(x_adv, x)
    bool constraint_met = false;
    int iterations = 0;        // PGD iterations completed (early stop at i reports i)
    bool projected = false;
    std::optional<ProjScales> proj_scales;
    sampler::GuidanceFactors factors;
};

// One projected signed-gradient ascent step on both factors; sign(0) = 0.
sampler::GuidanceFactors pgd_update(const sampler::GuidanceFactors& factors,
                                    const Tensor& grad_alpha, const Tensor& grad_beta, double eta);

AttackResult i2a_attack(const Tensor& x, const std::string& instruction, int label,
                        models::Classifier& classifier, models::Backend& backend,
                        perceptual::FeatureExtractor& phi, const AttackConfig& config);

struct ProjectionStep {
    int phase = 0;  // 1 = s_image search, 2 = s_text bisection
    double s_image = 0.0;
    double s_text = 0.0;
    double distance = 0.0;
    bool feasible = false;
    double lo = 0.0;  // bisection bracket after the step (phase 2)
    double hi = 0.0;
};

struct ProjectionTrace {
    std::vector<ProjectionStep> steps;
};

struct ProjectionResult {
    bool feasible = false;
    Tensor image;
    double s_image = 0.0;
    double s_text = 0.0;
    double distance = 0.0;
};

// Perceptual projection: phase 1 walks s_image up from config.s_image at
// s_text = 0 until d <= gamma; phase 2 runs exactly proj_bisect_iters
// bisection rounds on s_text over [0, proj_s_text_max], keeping the last
// feasible image. z_T and the noise draws are the attack's own (never
// resampled).
ProjectionResult project(const Tensor& x, const Tensor& z_T,
                         const sampler::GuidanceFactors& factors, const std::string& instruction,
                         models::Backend& backend, perceptual::FeatureExtractor& phi, double gamma,
                         const AttackConfig& config, ProjectionTrace* trace = nullptr);

}  // namespace i2a::attack
