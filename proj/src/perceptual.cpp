#include "i2a/perceptual.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace i2a::perceptual {

using nlohmann::json;

Tensor FeatureExtractor::features(const Tensor& image) {
    ad::Graph g;
    return g.value(features(g, g.constant(image)));
}

ad::Var IdentityFeatures::features(ad::Graph& g, ad::Var image) {
    double s = scale_;
    if (normalized_) s /= std::sqrt(static_cast<double>(g.value(image).size()));
    ad::Var flat = g.concat({image});
    return s == 1.0 ? flat : g.scale(flat, s);
}

Tensor IdentityFeatures::features(const Tensor& image) {
    double s = scale_;
    if (normalized_) s /= std::sqrt(static_cast<double>(image.size()));
    Tensor flat = flatten(image);
    if (s != 1.0)
        for (double& v : flat.data) v *= s;
    return flat;
}

ad::Var ConvFeatures::features(ad::Graph& g, ad::Var image) {
    require(g.value(image).shape.size() == 3, "conv features expect an HWC image");
    std::vector<ad::Var> taps;
    ad::Var x = image;
    for (const Layer& layer : layers_) {
        x = g.conv2d(layer.weights, layer.bias, x, layer.stride, layer.pad);
        switch (layer.activation) {
            case Activation::relu: x = g.relu(x); break;
            case Activation::tanh: x = g.tanh(x); break;
            case Activation::none: break;
        }
        if (layer.tap) {
            ad::Var t = g.channel_unit_norm(x);
            if (layer.tap_weight != 1.0) t = g.scale(t, layer.tap_weight);
            taps.push_back(t);
        }
    }
    require(!taps.empty(), "conv features: no tap layers configured");
    return g.concat(taps);
}

ConvFeatures ConvFeatures::random_small(int in_channels, uint64_t seed) {
    Rng rng(derive_seed(seed, 31));
    std::vector<Layer> layers;
    Layer l1;
    l1.weights = rng.gaussian_tensor({3, 3, in_channels, 4}, 0.4);
    l1.bias = rng.gaussian_tensor({4}, 0.1);
    l1.stride = 1;
    l1.pad = 1;
    l1.activation = Activation::tanh;
    layers.push_back(std::move(l1));
    Layer l2;
    l2.weights = rng.gaussian_tensor({3, 3, 4, 6}, 0.4);
    l2.bias = rng.gaussian_tensor({6}, 0.1);
    l2.stride = 2;
    l2.pad = 1;
    l2.activation = Activation::tanh;
    l2.tap_weight = 0.5;
    layers.push_back(std::move(l2));
    return ConvFeatures(std::move(layers));
}

ConvFeatures ConvFeatures::load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open feature net file: " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError("feature net json parse failure in " + path + ": " + e.what());
    }
    std::vector<Layer> layers;
    for (const auto& lj : j.at("layers")) {
        Layer l;
        auto shape = lj.at("shape").get<std::vector<int>>();
        require(shape.size() == 4, "feature net layer shape must be kh,kw,cin,cout");
        auto w = lj.at("weights").get<std::vector<double>>();
        l.weights = Tensor({shape[0], shape[1], shape[2], shape[3]}, std::move(w));
        if (lj.contains("bias")) {
            auto b = lj.at("bias").get<std::vector<double>>();
            l.bias = Tensor({shape[3]}, std::move(b));
        }
        l.stride = lj.value("stride", 1);
        l.pad = lj.value("pad", 0);
        std::string act = lj.value("activation", "relu");
        if (act == "relu")
            l.activation = Activation::relu;
        else if (act == "tanh")
            l.activation = Activation::tanh;
        else if (act == "none")
            l.activation = Activation::none;
        else
            throw ParseError("feature net: unknown activation " + act);
        l.tap = lj.value("tap", true);
        l.tap_weight = lj.value("tap_weight", 1.0);
        layers.push_back(std::move(l));
    }
    require(!layers.empty(), "feature net: no layers");
    return ConvFeatures(std::move(layers));
}

ad::Var lpips_distance(ad::Graph& g, ad::Var x1, ad::Var x2, FeatureExtractor& phi) {
    require(g.value(x1).shape == g.value(x2).shape,
            "lpips: image shapes differ, " + shape_str(g.value(x1).shape) + " vs " +
                shape_str(g.value(x2).shape));
    ad::Var f1 = phi.features(g, x1);
    ad::Var f2 = phi.features(g, x2);
    return g.l2norm(g.sub(f1, f2));
}

double lpips_distance(const Tensor& x1, const Tensor& x2, FeatureExtractor& phi) {
    if (x1.shape != x2.shape)
        throw InputError("lpips: image shapes differ, " + shape_str(x1.shape) + " vs " +
                         shape_str(x2.shape));
    Tensor f1 = phi.features(x1);
    Tensor f2 = phi.features(x2);
    if (f1.shape != f2.shape)
        throw InputError("lpips: feature extractor returned mismatched shapes");
    double s = 0.0;
    for (int i = 0; i < f1.size(); ++i) {
        double d = f1[i] - f2[i];
        s += d * d;
    }
    return std::sqrt(s);
}

double penalty(double distance, double gamma, double lambda) {
    require(gamma >= 0.0, "penalty: gamma must be >= 0");
    require(lambda >= 0.0, "penalty: lambda must be >= 0");
    double excess = distance - gamma;
    return excess > 0.0 ? lambda * excess : 0.0;
}

ad::Var penalty(ad::Graph& g, ad::Var distance, double gamma, double lambda) {
    require(gamma >= 0.0, "penalty: gamma must be >= 0");
    require(lambda >= 0.0, "penalty: lambda must be >= 0");
    return g.scale(g.relu(g.add_scalar(distance, -gamma)), lambda);
}

ad::Var objective(ad::Graph& g, ad::Var x_adv, const Tensor& x_ref, int label,
                  models::Classifier& classifier, FeatureExtractor& phi, double gamma,
                  double lambda, ObjectiveParts* parts) {
    require(label >= 0 && label < classifier.num_classes(), "objective: label out of range");
    ad::Var logits;
    ad::Var ce = classifier.ce_loss(g, x_adv, label, &logits);
    ad::Var dist = lpips_distance(g, x_adv, g.constant(x_ref), phi);
    ad::Var pen = penalty(g, dist, gamma, lambda);
    ad::Var value = g.sub(ce, pen);
    if (parts) {
        parts->value = g.value(value)[0];
        parts->cross_entropy = g.value(ce)[0];
        parts->distance = g.value(dist)[0];
        parts->penalty = g.value(pen)[0];
        const Tensor& l = g.value(logits);
        if (!l.all_finite()) throw NumericError("objective: non-finite logits");
        parts->predicted = models::argmax_lowest(l);
    }
    return value;
}

double objective(const Tensor& x_adv, const Tensor& x_ref, int label,
                 models::Classifier& classifier, FeatureExtractor& phi, double gamma,
                 double lambda, ObjectiveParts* parts) {
    ad::Graph g;
    return g.value(
        objective(g, g.constant(x_adv), x_ref, label, classifier, phi, gamma, lambda, parts))[0];
}

}  // namespace i2a::perceptual
