#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "i2a/autodiff.hpp"
#include "i2a/sampler.hpp"
#include "i2a/tensor.hpp"

namespace i2a::models {

// Denoiser adapter epsilon(z, t, image_cond, text_cond) -> latent-shaped
// score. Mocks may ignore t; real backbones need it. Evaluations are counted
// so tests can assert the 3-per-guided-score contract.
class DenoiserModel {
  public:
    virtual ~DenoiserModel() = default;

    ad::Var eval(ad::Graph& g, ad::Var z, int t, ad::Var image_cond, ad::Var text_cond) {
        ++calls_;
        return score(g, z, t, image_cond, text_cond);
    }

    // Gradient-free evaluation; bit-identical to the graph path.
    Tensor eval(const Tensor& z, int t, const Tensor& image_cond, const Tensor& text_cond) {
        ++calls_;
        return score_values(z, t, image_cond, text_cond);
    }

    virtual Shape latent_shape() const = 0;
    virtual bool shareable() const { return true; }

    long call_count() const { return calls_.load(); }
    void reset_call_count() { calls_.store(0); }

  protected:
    virtual ad::Var score(ad::Graph& g, ad::Var z, int t, ad::Var image_cond,
                          ad::Var text_cond) = 0;

    // Default bridges through a throwaway graph; hot-path denoisers override
    // with direct arithmetic.
    virtual Tensor score_values(const Tensor& z, int t, const Tensor& image_cond,
                                const Tensor& text_cond) {
        ad::Graph g;
        return g.value(score(g, g.constant(z), t, g.constant(image_cond), g.constant(text_cond)));
    }

  private:
    std::atomic<long> calls_{0};
};

// Frozen generative-editing backend: encoder E, decoder D, text encoder C,
// denoiser, schedule and the per-instance null conditionings.
class Backend {
  public:
    virtual ~Backend() = default;

    virtual Shape latent_shape() const = 0;
    virtual Shape image_shape() const = 0;
    virtual Shape text_shape() const = 0;

    virtual Tensor encode(const Tensor& image) const = 0;
    // Decoders clamp their output to [0, 1].
    virtual ad::Var decode(ad::Graph& g, ad::Var z) const = 0;
    Tensor decode(const Tensor& z) const { return decode_values(z); }
    virtual Tensor embed_text(const std::string& text) const = 0;

    // Gradient-free decode; default bridges through a throwaway graph.
    virtual Tensor decode_values(const Tensor& z) const;

    virtual DenoiserModel& denoiser() = 0;
    virtual const sampler::NoiseSchedule& schedule() const = 0;

    // Null image conditioning defaults to the all-zeros latent; null text to
    // the embedding of the empty string. Fixed per backend instance.
    virtual Tensor null_image() const;
    virtual Tensor null_text() const { return embed_text(""); }

    virtual bool shareable() const { return true; }

    sampler::ConditionPair condition(const Tensor& image, const std::string& instruction);
};

struct PreprocessSpec {
    int resize_h = 0;  // 0 = keep input resolution
    int resize_w = 0;
    std::vector<double> mean;  // per channel; empty = no normalization
    std::vector<double> stddev;
};

class Classifier {
  public:
    virtual ~Classifier() = default;

    virtual int num_classes() const = 0;
    virtual ad::Var logits(ad::Graph& g, ad::Var image) = 0;
    Tensor logits(const Tensor& image);

    // Cross-entropy at the label; defended classifiers override this to
    // average the loss over stochastic defense draws. logits_out, when
    // requested, is the forward (or draw-averaged) logits node.
    virtual ad::Var ce_loss(ad::Graph& g, ad::Var image, int label, ad::Var* logits_out = nullptr) {
        ad::Var l = logits(g, image);
        if (logits_out) *logits_out = l;
        return g.cross_entropy(l, label);
    }

    virtual bool shareable() const { return true; }
};

// Argmax with ties broken toward the lowest class index.
int classify(Classifier& classifier, const Tensor& image);
int argmax_lowest(const Tensor& logits);

// z_T ~ N(0, sigma_T^2 I), bit-reproducible for a fixed seed.
Tensor draw_initial_latent(const Shape& latent, double sigma_T, uint64_t seed);

// ---------------------------------------------------------------------------
// Desk-scale analytic backends and classifiers.

class LinearClassifier : public Classifier {
  public:
    LinearClassifier(Tensor weights, Tensor bias, PreprocessSpec pre = {});

    int num_classes() const override { return weights_.shape[0]; }
    ad::Var logits(ad::Graph& g, ad::Var image) override;
    using Classifier::logits;

    const Tensor& weights() const { return weights_; }
    const Tensor& bias() const { return bias_; }

    static LinearClassifier load_json(const std::string& path);
    void save_json(const std::string& path) const;

  private:
    Tensor weights_;  // K x D
    Tensor bias_;     // K
    PreprocessSpec pre_;
};

class FixedLogitClassifier : public Classifier {
  public:
    explicit FixedLogitClassifier(Tensor logits) : logits_(std::move(logits)) {}
    int num_classes() const override { return logits_.size(); }
    ad::Var logits(ad::Graph& g, ad::Var image) override;
    using Classifier::logits;

  private:
    Tensor logits_;
};

// Denoiser returning fixed tensors per conditioning branch (unconditional /
// image-conditioned / fully conditioned). Branches are told apart by
// comparing the conditioning values against the backend nulls.
class ConstantBranchDenoiser : public DenoiserModel {
  public:
    ConstantBranchDenoiser(Shape latent, Tensor null_image, Tensor null_text, Tensor uncond,
                           Tensor image_branch, Tensor text_branch);
    Shape latent_shape() const override { return latent_; }

  protected:
    ad::Var score(ad::Graph& g, ad::Var z, int t, ad::Var image_cond, ad::Var text_cond) override;
    Tensor score_values(const Tensor& z, int t, const Tensor& image_cond,
                        const Tensor& text_cond) override;

  private:
    const Tensor& branch(const Tensor& image_cond, const Tensor& text_cond) const;

    Shape latent_;
    Tensor null_image_, null_text_;
    Tensor uncond_, image_branch_, text_branch_;
};

class FnDenoiser : public DenoiserModel {
  public:
    using Fn = std::function<ad::Var(ad::Graph&, ad::Var, int, ad::Var, ad::Var)>;
    FnDenoiser(Shape latent, Fn fn) : latent_(std::move(latent)), fn_(std::move(fn)) {}
    Shape latent_shape() const override { return latent_; }

  protected:
    ad::Var score(ad::Graph& g, ad::Var z, int t, ad::Var ic, ad::Var tc) override {
        return fn_(g, z, t, ic, tc);
    }

  private:
    Shape latent_;
    Fn fn_;
};

struct MockBackendOptions {
    Shape latent{2, 2, 1};
    Shape image{2, 2, 1};
    Shape text{2, 3};
    int steps = 3;
    double sigma_min = 0.01;
    double sigma_max = 1.0;
    bool sigma0_zero = false;  // replace sigma_0 by exactly 0
    uint64_t seed = 0x5eed;
    double z_gain = -0.35;     // elementwise z response of the denoiser
    double image_gain = 0.25;  // elementwise image-conditioning response
    // Ties the image response to -z response so sampling contracts toward
    // the encoded image (content-preserving edits).
    bool image_weights_track_z = false;
    bool uniform_z_weights = false;  // wz = z_gain everywhere (no spectrum spread)
    double text_gain = 0.15;   // dense text-conditioning response
    bool nonlinear = false;    // tanh-squashed denoiser
    bool invertible_pair = false;  // E square near-identity, D = E^{-1}
    double encode_gain = 1.0;
    double decode_gain = 1.0;
    // Added before the [0,1] clamp so decoded pixels sit mid-range; forced
    // to 0 for invertible pairs (exact round trips).
    double decode_offset = 0.5;
};

// Deterministic frozen linear (optionally tanh) backend with closed-form
// behavior at desk scale.
class MockBackend : public Backend {
  public:
    explicit MockBackend(MockBackendOptions opts = {});

    Shape latent_shape() const override { return opts_.latent; }
    Shape image_shape() const override { return opts_.image; }
    Shape text_shape() const override { return opts_.text; }

    Tensor encode(const Tensor& image) const override;
    ad::Var decode(ad::Graph& g, ad::Var z) const override;
    Tensor decode_values(const Tensor& z) const override;
    using Backend::decode;
    Tensor embed_text(const std::string& text) const override;
    DenoiserModel& denoiser() override { return *denoiser_; }
    const sampler::NoiseSchedule& schedule() const override { return schedule_; }

    const Tensor& encoder_matrix() const { return enc_; }
    const Tensor& decoder_matrix() const { return dec_; }

  private:
    MockBackendOptions opts_;
    sampler::NoiseSchedule schedule_;
    Tensor enc_;  // latN x imgN
    Tensor dec_;  // imgN x latN
    std::unique_ptr<DenoiserModel> denoiser_;
};

// Fully pluggable backend for targeted test constructions.
class CustomBackend : public Backend {
  public:
    Shape latent, image, text{1, 1};
    std::unique_ptr<DenoiserModel> den;
    sampler::NoiseSchedule sched;
    std::function<Tensor(const Tensor&)> encode_fn;
    std::function<ad::Var(ad::Graph&, ad::Var)> decode_fn;  // must clamp
    std::function<Tensor(const Tensor&)> decode_values_fn;  // optional fast path
    std::function<Tensor(const std::string&)> embed_fn;
    Tensor null_image_override, null_text_override;
    bool shareable_flag = true;

    Shape latent_shape() const override { return latent; }
    Shape image_shape() const override { return image; }
    Shape text_shape() const override { return text; }
    Tensor encode(const Tensor& img) const override { return encode_fn(img); }
    ad::Var decode(ad::Graph& g, ad::Var z) const override { return decode_fn(g, z); }
    Tensor decode_values(const Tensor& z) const override {
        return decode_values_fn ? decode_values_fn(z) : Backend::decode_values(z);
    }
    using Backend::decode;
    Tensor embed_text(const std::string& s) const override { return embed_fn(s); }
    DenoiserModel& denoiser() override { return *den; }
    const sampler::NoiseSchedule& schedule() const override { return sched; }
    Tensor null_image() const override {
        return null_image_override.data.empty() ? Backend::null_image() : null_image_override;
    }
    Tensor null_text() const override {
        return null_text_override.data.empty() ? Backend::null_text() : null_text_override;
    }
    bool shareable() const override { return shareable_flag; }
};

// Multinomial logistic regression fit by plain gradient descent; used for
// trained toy classifiers in tests and fixtures.
LinearClassifier train_linear_softmax(const std::vector<Tensor>& images,
                                      const std::vector<int>& labels, int num_classes, int epochs,
                                      double lr, double l2, uint64_t seed);

Tensor invert_square_matrix(const Tensor& m);

}  // namespace i2a::models
