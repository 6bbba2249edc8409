#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "i2a/attack.hpp"
#include "i2a/models.hpp"
#include "i2a/perceptual.hpp"
#include "i2a/tensor.hpp"

namespace i2a::baselines {

struct NoiseAttackConfig {
    double epsilon = 4.0 / 255.0;  // L-inf bound, pixel units
    int steps = 100;
    double step_size = 1.0 / 255.0;
    double decay = 1.0;  // MIM momentum
    void validate() const;
};

// Scalar loss to ascend, built over the autodiff graph.
using LossFn = std::function<ad::Var(ad::Graph&, ad::Var)>;

LossFn classifier_ce_loss(models::Classifier& classifier, int label);

// Generic signed-ascent cores.
Tensor ascend_fgsm(const Tensor& x, const LossFn& loss, double epsilon);
Tensor ascend_pgd(const Tensor& x, const LossFn& loss, const NoiseAttackConfig& cfg);
Tensor ascend_mim(const Tensor& x, const LossFn& loss, const NoiseAttackConfig& cfg);

// Classifier-facing entry points (untargeted, deterministic start at x).
Tensor fgsm(const Tensor& x, int label, models::Classifier& classifier, double epsilon);
Tensor pgd(const Tensor& x, int label, models::Classifier& classifier,
           const NoiseAttackConfig& cfg);
Tensor mim(const Tensor& x, int label, models::Classifier& classifier,
           const NoiseAttackConfig& cfg);

// Possibly stochastic, possibly non-differentiable input preprocessor.
struct DefenseAdapter {
    std::function<Tensor(const Tensor&, Rng&)> preprocess;
    bool stochastic = false;

    static DefenseAdapter identity();
    static DefenseAdapter additive_gaussian(double stddev);
};

// Mean over eot_samples draws of dL/dx with the defense treated as identity
// in the backward pass (BPDA).
Tensor smoothed_grad(const LossFn& loss, const Tensor& x, const DefenseAdapter& defense,
                     int eot_samples, Rng& rng);

// Classifier wrapper used by adaptive attacks: forward passes go through the
// defense, gradients pass straight through it, and the loss is averaged over
// eot_samples stochastic draws.
class DefendedClassifier : public models::Classifier {
  public:
    DefendedClassifier(models::Classifier& inner, DefenseAdapter defense, int eot_samples,
                       uint64_t seed);

    int num_classes() const override { return inner_.num_classes(); }
    ad::Var logits(ad::Graph& g, ad::Var image) override;
    using Classifier::logits;
    ad::Var ce_loss(ad::Graph& g, ad::Var image, int label, ad::Var* logits_out) override;
    bool shareable() const override { return false; }

  private:
    ad::Var defended_input(ad::Graph& g, ad::Var image);

    models::Classifier& inner_;
    DefenseAdapter defense_;
    int eot_samples_;
    Rng rng_;
};

// ---------------------------------------------------------------------------
// Attack plugin surface. The harness resolves attacks by name; external
// callables conforming to AttackFn can be registered alongside the builtins.

struct AttackRequest {
    Tensor x;
    int label = 0;
    std::string instruction;
    models::Classifier* classifier = nullptr;
    models::Backend* backend = nullptr;            // required by i2a only
    perceptual::FeatureExtractor* phi = nullptr;   // for LPIPS bookkeeping
    attack::AttackConfig i2a;
    NoiseAttackConfig noise;
    uint64_t seed = 0;
};

struct AttackReply {
    Tensor adversarial;
    bool success = false;
    int predicted = -1;
    double distance = 0.0;
    bool constraint_met = true;
    int iterations = 0;
    bool projected = false;
    std::optional<attack::ProjScales> proj_scales;
};

using AttackFn = std::function<AttackReply(const AttackRequest&)>;

// Wraps any registered attack with the BPDA+EOT adaptive protocol and caps
// its iteration budget at max_iters.
AttackFn adaptive(AttackFn inner, DefenseAdapter defense, int eot_samples, int max_iters = 50);

class AttackRegistry {
  public:
    static AttackRegistry& instance();

    void add(const std::string& name, AttackFn fn);
    AttackFn get(const std::string& name) const;
    std::vector<std::string> names() const;

  private:
    AttackRegistry();
    mutable std::mutex mu_;
    std::map<std::string, AttackFn> attacks_;
};

}  // namespace i2a::baselines
