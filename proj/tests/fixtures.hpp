#pragma once

// Shared deterministic test constructions: hand-built denoisers, the
// scale-probe backend whose LPIPS responds analytically to the guidance
// scales, the scalar convex toy, and the 3-class color dataset.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "i2a/attack.hpp"
#include "i2a/models.hpp"
#include "i2a/perceptual.hpp"
#include "i2a/sampler.hpp"

namespace i2a::fixtures {

// Frozen branch outputs for the hand-evaluated guided-score checks.
inline const Tensor kHandUncond{{2, 2, 1}, {0.10, -0.20, 0.30, 0.40}};
inline const Tensor kHandImage{{2, 2, 1}, {0.50, 0.00, -0.10, 0.20}};
inline const Tensor kHandText{{2, 2, 1}, {1.00, 0.25, 0.50, -0.30}};

inline sampler::ConditionPair basic_condition(const Shape& latent, const Shape& text) {
    sampler::ConditionPair cond;
    cond.null_image = Tensor::zeros(latent);
    cond.null_text = Tensor::zeros(text);
    cond.image_cond = Tensor::full(latent, 0.7);
    cond.text_cond = Tensor::full(text, -0.4);
    return cond;
}

inline std::unique_ptr<models::ConstantBranchDenoiser> hand_denoiser() {
    Shape latent{2, 2, 1};
    return std::make_unique<models::ConstantBranchDenoiser>(
        latent, Tensor::zeros(latent), Tensor::zeros({2, 3}), kHandUncond, kHandImage, kHandText);
}

// phi decoding the scale-probe pixel back into a hinge value: a pixel p
// carries arg = 4p - 1 and the feature is max(0, arg).
class HingeFeatures : public perceptual::FeatureExtractor {
  public:
    ad::Var features(ad::Graph& g, ad::Var image) override {
        return g.relu(g.add_scalar(g.scale(g.concat({image}), 4.0), -1.0));
    }
    Tensor features(const Tensor& image) override {
        Tensor out = flatten(image);
        for (double& v : out.data) {
            double a = v * 4.0 + -1.0;
            v = a > 0.0 ? a : 0.0;
        }
        return out;
    }
};

// 1x1x1 backend with T = 1, sigma = {0, 1}: the decoded pixel is affine in
// (s_image, s_text) and, through HingeFeatures, the LPIPS distance to the
// probe's clean image is exactly
//     d(s_image, s_text) = max(0, q * s_text - p * (s_image - 1.5) + r).
struct ScaleProbe {
    std::shared_ptr<models::CustomBackend> backend;
    Tensor clean_image;  // pixel 0.25 -> feature 0
    HingeFeatures phi;

    // attenuate=true shrinks sigma_T to 1e-3 (rescaling the branch constants
    // to compensate) so the attack's own z_T draw cannot disturb the
    // analytic pixel map by more than ~4e-3.
    static ScaleProbe make(double p, double q, double r, bool attenuate = false) {
        ScaleProbe probe;
        Shape one{1, 1, 1};
        auto backend = std::make_shared<models::CustomBackend>();
        backend->latent = one;
        backend->image = one;
        backend->text = {1};
        double sigma_T = attenuate ? 1e-3 : 1.0;
        backend->sched.sigmas = {0.0, sigma_T};
        double gain = 1.0 / (sigma_T * sigma_T);
        // Guided score: e0 + s_image*(e1-e0) + s_text*(e2-e1), so matching
        // pixel = 0.25 + (q*s_text - p*(s_image-1.5) + r)/4 requires
        // e1 - e0 = -p/4 and e2 - e1 = q/4 (after the sigma^2 step factor).
        double e0 = (0.25 + (r + 1.5 * p) / 4.0) * gain;
        double e1 = e0 - p / 4.0 * gain;
        double e2 = e1 + q / 4.0 * gain;
        backend->den = std::make_unique<models::ConstantBranchDenoiser>(
            one, Tensor::zeros(one), Tensor::zeros({1}), Tensor(one, {e0}), Tensor(one, {e1}),
            Tensor(one, {e2}));
        backend->encode_fn = [](const Tensor& img) {
            Tensor z = img;
            for (double& v : z.data) v += 1.0;  // keep c_I distinct from the zero null
            return z;
        };
        backend->decode_fn = [](ad::Graph& g, ad::Var z) { return g.clamp01(z); };
        backend->decode_values_fn = [](const Tensor& z) {
            Tensor out = z;
            for (double& v : out.data) v = std::min(1.0, std::max(0.0, v));
            return out;
        };
        backend->embed_fn = [](const std::string& s) {
            return Tensor({1}, {s.empty() ? 0.0 : 0.5 + static_cast<double>(fnv1a64(s) % 97) / 1000.0});
        };
        probe.backend = std::move(backend);
        probe.clean_image = Tensor(one, {0.25});
        return probe;
    }

    double analytic_distance(double s_image, double s_text, double p, double q, double r) const {
        return std::max(0.0, q * s_text - p * (s_image - 1.5) + r);
    }
};

// Scalar convex toy: T = 1, sigma = {0, 1}, identity phi. The decoded pixel
// is 0.3 + 0.2*alpha + 0.3*beta exactly, so the attack objective has the
// closed form used by the exhaustive grid oracle.
struct ConvexToy {
    std::unique_ptr<models::CustomBackend> backend;
    std::shared_ptr<models::LinearClassifier> classifier;
    perceptual::IdentityFeatures phi;
    Tensor clean_image;
    attack::AttackConfig config;

    static ConvexToy make(uint64_t seed) {
        ConvexToy toy;
        Shape one{1, 1, 1};
        toy.config.lambda = 5.0;
        toy.config.gamma = 0.3;
        toy.config.eta = 0.1;
        toy.config.T = 1;
        toy.config.s_image = 1.5;
        toy.config.s_text = 7.5;
        toy.config.N = 25;
        toy.config.seed = seed;

        double z_T = models::draw_initial_latent(one, 1.0, seed)[0];
        double e0 = 0.3 - z_T;
        double delta1 = 0.2 / toy.config.s_image;
        double delta2 = 0.3 / toy.config.s_text;

        auto backend = std::make_unique<models::CustomBackend>();
        backend->latent = one;
        backend->image = one;
        backend->text = {1};
        backend->sched.sigmas = {0.0, 1.0};
        backend->den = std::make_unique<models::ConstantBranchDenoiser>(
            one, Tensor::zeros(one), Tensor::zeros({1}), Tensor(one, {e0}),
            Tensor(one, {e0 + delta1}), Tensor(one, {e0 + delta1 + delta2}));
        backend->encode_fn = [](const Tensor& img) {
            Tensor z = img;
            for (double& v : z.data) v += 1.0;
            return z;
        };
        backend->decode_fn = [](ad::Graph& g, ad::Var z) { return g.clamp01(z); };
        backend->embed_fn = [](const std::string& s) {
            return Tensor({1}, {s.empty() ? 0.0 : 0.75});
        };
        toy.backend = std::move(backend);
        toy.clean_image = Tensor(one, {0.3});
        toy.classifier = std::make_shared<models::LinearClassifier>(Tensor({2, 1}, {2.0, -1.0}),
                                                                    Tensor({2}, {0.0, 0.0}));
        return toy;
    }

    // Direct evaluation of the Lagrangian objective; the pipeline must agree.
    double direct_objective(double alpha, double beta) const {
        double pixel = 0.3 + 0.2 * alpha + 0.3 * beta;
        double ce = std::log(1.0 + std::exp(-3.0 * pixel));
        double d = 0.2 * alpha + 0.3 * beta;
        return ce - config.lambda * std::max(0.0, d - config.gamma);
    }

    double grid_optimum(int resolution = 1000) const {
        double best = -1e300;
        for (int i = 0; i <= resolution; ++i) {
            for (int j = 0; j <= resolution; ++j) {
                double v = direct_objective(static_cast<double>(i) / resolution,
                                            static_cast<double>(j) / resolution);
                if (v > best) best = v;
            }
        }
        return best;
    }
};

// 3-class 16x16x3 color dataset: class c brightens channel c on a textured
// background. Separations are tuned so a softmax-trained linear model is
// clean-accurate yet inside noise-attack reach at epsilon = 4/255.
struct ToyScene {
    std::vector<Tensor> images;
    std::vector<int> labels;
    std::shared_ptr<models::LinearClassifier> classifier;

    static ToyScene make(int per_class, uint64_t seed, double separation = 0.035,
                         double noise = 0.05) {
        ToyScene scene;
        Rng rng(derive_seed(seed, 101));
        Shape shape{16, 16, 3};
        for (int c = 0; c < 3; ++c) {
            for (int i = 0; i < per_class; ++i) {
                Tensor img = Tensor::zeros(shape);
                for (int k = 0; k < img.size(); ++k) {
                    double base = 0.45 + noise * rng.gaussian();
                    if (k % 3 == c) base += separation;
                    img[k] = std::min(1.0, std::max(0.0, base));
                }
                scene.images.push_back(std::move(img));
                scene.labels.push_back(c);
            }
        }
        scene.classifier = std::make_shared<models::LinearClassifier>(
            models::train_linear_softmax(scene.images, scene.labels, 3, 2500, 8.0, 1e-5,
                                         derive_seed(seed, 102)));
        return scene;
    }

    double clean_accuracy() const {
        int correct = 0;
        for (size_t i = 0; i < images.size(); ++i)
            if (models::classify(*classifier, images[i]) == labels[i]) ++correct;
        return static_cast<double>(correct) / static_cast<double>(images.size());
    }
};

// Calibrated end-to-end scene for the toy-scale efficacy experiments: a
// content-preserving editing backend over the 3-class color dataset, with
// class margins inside noise-attack reach. Frozen settings; the accompanying
// attack config is lambda=100, gamma=0.3, eta=0.1, T=3.
struct EfficacyScene {
    ToyScene scene;
    std::shared_ptr<models::MockBackend> backend;
    std::shared_ptr<perceptual::IdentityFeatures> phi;
    attack::AttackConfig attack_cfg;

    static EfficacyScene make(int images_total = 50, uint64_t seed = 2027) {
        EfficacyScene e;
        int per_class = (images_total + 2) / 3;
        e.scene = ToyScene::make(per_class, seed, 0.012, 0.03);
        while (static_cast<int>(e.scene.images.size()) > images_total) {
            e.scene.images.pop_back();
            e.scene.labels.pop_back();
        }
        models::MockBackendOptions opts;
        opts.latent = {16, 16, 3};
        opts.image = {16, 16, 3};
        opts.text = {2, 4};
        opts.steps = 3;
        opts.seed = 99;
        opts.invertible_pair = true;
        opts.uniform_z_weights = true;
        opts.image_weights_track_z = true;
        opts.z_gain = -1.0;
        opts.image_gain = 1.0 / 1.5;
        opts.text_gain = 0.005;
        e.backend = std::make_shared<models::MockBackend>(opts);
        e.phi = std::make_shared<perceptual::IdentityFeatures>(1.0, true);
        e.attack_cfg.lambda = 100.0;
        e.attack_cfg.gamma = 0.3;
        e.attack_cfg.eta = 0.1;
        e.attack_cfg.T = 3;
        e.attack_cfg.N = 30;
        return e;
    }
};

}  // namespace i2a::fixtures
