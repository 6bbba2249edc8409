#pragma once

#include <string>
#include <vector>

#include "i2a/autodiff.hpp"
#include "i2a/models.hpp"
#include "i2a/tensor.hpp"

namespace i2a::perceptual {

// Deterministic feature map phi: image -> flat feature vector.
class FeatureExtractor {
  public:
    virtual ~FeatureExtractor() = default;
    virtual ad::Var features(ad::Graph& g, ad::Var image) = 0;
    // Gradient-free evaluation; default bridges through a throwaway graph.
    virtual Tensor features(const Tensor& image);
    virtual bool shareable() const { return true; }
};

// Flattened pixels, optionally scaled. normalized=true divides by
// sqrt(numel) so the distance reads as an RMS pixel difference.
class IdentityFeatures : public FeatureExtractor {
  public:
    explicit IdentityFeatures(double scale = 1.0, bool normalized = false)
        : scale_(scale), normalized_(normalized) {}
    ad::Var features(ad::Graph& g, ad::Var image) override;
    Tensor features(const Tensor& image) override;

  private:
    double scale_;
    bool normalized_;
};

enum class Activation { none, relu, tanh };

// Frozen convolutional feature stack. Tap outputs are channel-unit-normalized
// and weighted before concatenation, so the plain L2 distance between feature
// vectors carries the usual perceptual-metric normalization.
class ConvFeatures : public FeatureExtractor {
  public:
    struct Layer {
        Tensor weights;  // kh x kw x cin x cout
        Tensor bias;     // cout (may be empty)
        int stride = 1;
        int pad = 0;
        Activation activation = Activation::relu;
        bool tap = true;
        double tap_weight = 1.0;
    };

    explicit ConvFeatures(std::vector<Layer> layers) : layers_(std::move(layers)) {}
    ad::Var features(ad::Graph& g, ad::Var image) override;
    using FeatureExtractor::features;

    // Two-layer tanh stack with seeded fixed weights; smooth, desk-scale.
    static ConvFeatures random_small(int in_channels, uint64_t seed);
    static ConvFeatures load_json(const std::string& path);

  private:
    std::vector<Layer> layers_;
};

// ||phi(x1) - phi(x2)||_2
ad::Var lpips_distance(ad::Graph& g, ad::Var x1, ad::Var x2, FeatureExtractor& phi);
double lpips_distance(const Tensor& x1, const Tensor& x2, FeatureExtractor& phi);

// lambda * max(0, d - gamma); subgradient 0 at the kink.
double penalty(double distance, double gamma, double lambda);
ad::Var penalty(ad::Graph& g, ad::Var distance, double gamma, double lambda);

struct ObjectiveParts {
    double value = 0.0;
    double cross_entropy = 0.0;
    double distance = 0.0;
    double penalty = 0.0;
    int predicted = -1;
};

// Attack objective L = CE(f(x_adv), y) - lambda * max(0, d(x_adv, x) - gamma).
ad::Var objective(ad::Graph& g, ad::Var x_adv, const Tensor& x_ref, int label,
                  models::Classifier& classifier, FeatureExtractor& phi, double gamma,
                  double lambda, ObjectiveParts* parts = nullptr);
double objective(const Tensor& x_adv, const Tensor& x_ref, int label,
                 models::Classifier& classifier, FeatureExtractor& phi, double gamma,
                 double lambda, ObjectiveParts* parts = nullptr);

}  // namespace i2a::perceptual
