#include "i2a/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace i2a::baselines {

void NoiseAttackConfig::validate() const {
    require(epsilon > 0.0, "noise attack: epsilon must be > 0");
    require(step_size > 0.0, "noise attack: step_size must be > 0");
    require(steps >= 1, "noise attack: steps must be >= 1");
    require(decay >= 0.0, "noise attack: decay must be >= 0");
}

LossFn classifier_ce_loss(models::Classifier& classifier, int label) {
    require(label >= 0 && label < classifier.num_classes(), "loss: label out of range");
    return [&classifier, label](ad::Graph& g, ad::Var x) {
        return classifier.ce_loss(g, x, label, nullptr);
    };
}

namespace {

double sign_of(double v) {
    return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
}

Tensor loss_grad(const LossFn& loss, const Tensor& x) {
    ad::Graph g;
    ad::Var xv = g.leaf(x);
    ad::Var l = loss(g, xv);
    g.backward(l);
    return g.grad(xv);
}

// Largest double h with h - x <= eps: rounding of x + eps can overshoot by
// an ulp, which would break the exact L-inf guarantee.
double tight_upper(double x, double eps) {
    double h = x + eps;
    while (h - x > eps) h = std::nextafter(h, -std::numeric_limits<double>::infinity());
    return h;
}

double tight_lower(double x, double eps) {
    double l = x - eps;
    while (x - l > eps) l = std::nextafter(l, std::numeric_limits<double>::infinity());
    return l;
}

void project_ball_and_box(Tensor& x, const Tensor& origin, double epsilon) {
    for (int i = 0; i < x.size(); ++i) {
        double lo = std::max(0.0, tight_lower(origin[i], epsilon));
        double hi = std::min(1.0, tight_upper(origin[i], epsilon));
        x[i] = std::min(hi, std::max(lo, x[i]));
    }
}

}  // namespace

Tensor ascend_fgsm(const Tensor& x, const LossFn& loss, double epsilon) {
    require(epsilon > 0.0, "fgsm: epsilon must be > 0");
    Tensor grad = loss_grad(loss, x);
    Tensor out = x;
    for (int i = 0; i < out.size(); ++i)
        out[i] = std::min(1.0, std::max(0.0, out[i] + epsilon * sign_of(grad[i])));
    project_ball_and_box(out, x, epsilon);
    return out;
}

Tensor ascend_pgd(const Tensor& x, const LossFn& loss, const NoiseAttackConfig& cfg) {
    cfg.validate();
    Tensor adv = x;  // deterministic start, no random restart
    for (int it = 0; it < cfg.steps; ++it) {
        Tensor grad = loss_grad(loss, adv);
        for (int i = 0; i < adv.size(); ++i) adv[i] += cfg.step_size * sign_of(grad[i]);
        project_ball_and_box(adv, x, cfg.epsilon);
    }
    return adv;
}

Tensor ascend_mim(const Tensor& x, const LossFn& loss, const NoiseAttackConfig& cfg) {
    cfg.validate();
    Tensor adv = x;
    Tensor momentum = Tensor::zeros(x.shape);
    for (int it = 0; it < cfg.steps; ++it) {
        Tensor grad = loss_grad(loss, adv);
        double l1 = 0.0;
        for (int i = 0; i < grad.size(); ++i) l1 += std::abs(grad[i]);
        for (int i = 0; i < momentum.size(); ++i) {
            double normalized = l1 > 0.0 ? grad[i] / l1 : 0.0;
            momentum[i] = cfg.decay * momentum[i] + normalized;
        }
        for (int i = 0; i < adv.size(); ++i) adv[i] += cfg.step_size * sign_of(momentum[i]);
        project_ball_and_box(adv, x, cfg.epsilon);
    }
    return adv;
}

Tensor fgsm(const Tensor& x, int label, models::Classifier& classifier, double epsilon) {
    return ascend_fgsm(x, classifier_ce_loss(classifier, label), epsilon);
}

Tensor pgd(const Tensor& x, int label, models::Classifier& classifier,
           const NoiseAttackConfig& cfg) {
    return ascend_pgd(x, classifier_ce_loss(classifier, label), cfg);
}

Tensor mim(const Tensor& x, int label, models::Classifier& classifier,
           const NoiseAttackConfig& cfg) {
    return ascend_mim(x, classifier_ce_loss(classifier, label), cfg);
}

DefenseAdapter DefenseAdapter::identity() {
    DefenseAdapter d;
    d.preprocess = [](const Tensor& x, Rng&) { return x; };
    d.stochastic = false;
    return d;
}

DefenseAdapter DefenseAdapter::additive_gaussian(double stddev) {
    DefenseAdapter d;
    d.preprocess = [stddev](const Tensor& x, Rng& rng) {
        Tensor out = x;
        for (double& v : out.data) v = std::min(1.0, std::max(0.0, v + stddev * rng.gaussian()));
        return out;
    };
    d.stochastic = true;
    return d;
}

Tensor smoothed_grad(const LossFn& loss, const Tensor& x, const DefenseAdapter& defense,
                     int eot_samples, Rng& rng) {
    require(eot_samples >= 1, "smoothed_grad: eot_samples must be >= 1");
    Tensor acc = Tensor::zeros(x.shape);
    for (int k = 0; k < eot_samples; ++k) {
        ad::Graph g;
        ad::Var xv = g.leaf(x);
        Tensor transformed = defense.preprocess(x, rng);
        ad::Var through = g.bpda(xv, std::move(transformed));
        ad::Var l = loss(g, through);
        g.backward(l);
        const Tensor& grad = g.grad(xv);
        for (int i = 0; i < acc.size(); ++i) acc[i] += grad[i];
    }
    for (double& v : acc.data) v /= static_cast<double>(eot_samples);
    return acc;
}

DefendedClassifier::DefendedClassifier(models::Classifier& inner, DefenseAdapter defense,
                                       int eot_samples, uint64_t seed)
    : inner_(inner), defense_(std::move(defense)), eot_samples_(eot_samples), rng_(seed) {
    require(eot_samples_ >= 1, "defended classifier: eot_samples must be >= 1");
}

ad::Var DefendedClassifier::defended_input(ad::Graph& g, ad::Var image) {
    Tensor transformed = defense_.preprocess(g.value(image), rng_);
    return g.bpda(image, std::move(transformed));
}

ad::Var DefendedClassifier::logits(ad::Graph& g, ad::Var image) {
    if (eot_samples_ == 1) return inner_.logits(g, defended_input(g, image));
    ad::Var acc = inner_.logits(g, defended_input(g, image));
    for (int k = 1; k < eot_samples_; ++k)
        acc = g.add(acc, inner_.logits(g, defended_input(g, image)));
    return g.scale(acc, 1.0 / eot_samples_);
}

ad::Var DefendedClassifier::ce_loss(ad::Graph& g, ad::Var image, int label, ad::Var* logits_out) {
    ad::Var first_logits;
    ad::Var acc = inner_.ce_loss(g, defended_input(g, image), label, &first_logits);
    ad::Var logit_sum = first_logits;
    for (int k = 1; k < eot_samples_; ++k) {
        ad::Var lk;
        acc = g.add(acc, inner_.ce_loss(g, defended_input(g, image), label, &lk));
        logit_sum = g.add(logit_sum, lk);
    }
    if (eot_samples_ > 1) {
        acc = g.scale(acc, 1.0 / eot_samples_);
        logit_sum = g.scale(logit_sum, 1.0 / eot_samples_);
    }
    if (logits_out) *logits_out = logit_sum;
    return acc;
}

AttackFn adaptive(AttackFn inner, DefenseAdapter defense, int eot_samples, int max_iters) {
    require(eot_samples >= 1, "adaptive: eot_samples must be >= 1");
    require(max_iters >= 1, "adaptive: max_iters must be >= 1");
    return [inner = std::move(inner), defense = std::move(defense), eot_samples,
            max_iters](const AttackRequest& req) {
        AttackRequest capped = req;
        capped.i2a.N = std::min(req.i2a.N, max_iters);
        capped.noise.steps = std::min(req.noise.steps, max_iters);
        DefendedClassifier defended(*req.classifier, defense, eot_samples,
                                    derive_seed(req.seed, 1701));
        capped.classifier = &defended;
        return inner(capped);
    };
}

namespace {

double record_distance(const AttackRequest& req, const Tensor& adv) {
    if (!req.phi) return 0.0;
    return perceptual::lpips_distance(adv, req.x, *req.phi);
}

AttackReply finish_reply(const AttackRequest& req, Tensor adv, int iterations) {
    AttackReply rep;
    rep.predicted = models::classify(*req.classifier, adv);
    rep.success = rep.predicted != req.label;
    rep.distance = record_distance(req, adv);
    rep.constraint_met = rep.distance <= req.i2a.gamma + attack::kConstraintTol;
    rep.iterations = iterations;
    rep.adversarial = std::move(adv);
    return rep;
}

}  // namespace

AttackRegistry::AttackRegistry() {
    attacks_["none"] = [](const AttackRequest& req) { return finish_reply(req, req.x, 0); };
    attacks_["fgsm"] = [](const AttackRequest& req) {
        return finish_reply(req, fgsm(req.x, req.label, *req.classifier, req.noise.epsilon), 1);
    };
    attacks_["pgd"] = [](const AttackRequest& req) {
        return finish_reply(req, pgd(req.x, req.label, *req.classifier, req.noise),
                            req.noise.steps);
    };
    attacks_["mim"] = [](const AttackRequest& req) {
        return finish_reply(req, mim(req.x, req.label, *req.classifier, req.noise),
                            req.noise.steps);
    };
    attacks_["i2a"] = [](const AttackRequest& req) {
        require_config(req.backend != nullptr, "i2a attack needs a backend");
        require_config(req.phi != nullptr, "i2a attack needs a feature extractor");
        attack::AttackConfig cfg = req.i2a;
        cfg.seed = req.seed;
        attack::AttackResult res =
            attack::i2a_attack(req.x, req.instruction, req.label, *req.classifier, *req.backend,
                               *req.phi, cfg);
        AttackReply rep;
        rep.adversarial = res.adversarial;
        rep.success = res.success;
        rep.predicted = models::classify(*req.classifier, res.adversarial);
        rep.distance = res.distance;
        rep.constraint_met = res.constraint_met;
        rep.iterations = res.iterations;
        rep.projected = res.projected;
        rep.proj_scales = res.proj_scales;
        return rep;
    };
}

AttackRegistry& AttackRegistry::instance() {
    static AttackRegistry registry;
    return registry;
}

void AttackRegistry::add(const std::string& name, AttackFn fn) {
    std::lock_guard<std::mutex> lock(mu_);
    attacks_[name] = std::move(fn);
}

AttackFn AttackRegistry::get(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = attacks_.find(name);
    if (it == attacks_.end()) throw InputError("unknown attack: " + name);
    return it->second;
}

std::vector<std::string> AttackRegistry::names() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<std::string> out;
    for (const auto& [name, fn] : attacks_) out.push_back(name);
    return out;
}

}  // namespace i2a::baselines
