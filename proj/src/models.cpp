#include "i2a/models.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace i2a::models {

using nlohmann::json;

Tensor Backend::null_image() const {
    return Tensor::zeros(latent_shape());
}

Tensor Backend::decode_values(const Tensor& z) const {
    ad::Graph g;
    return g.value(decode(g, g.constant(z)));
}

sampler::ConditionPair Backend::condition(const Tensor& image, const std::string& instruction) {
    require_config(image.shape == image_shape(),
                   "backend expects image shape " + shape_str(image_shape()) + ", got " +
                       shape_str(image.shape));
    sampler::ConditionPair cond;
    cond.image_cond = encode(image);
    cond.text_cond = embed_text(instruction);
    cond.null_image = null_image();
    cond.null_text = null_text();
    return cond;
}

Tensor Classifier::logits(const Tensor& image) {
    ad::Graph g;
    return g.value(logits(g, g.constant(image)));
}

int argmax_lowest(const Tensor& logits) {
    require(logits.size() >= 1, "classify: empty logits");
    int best = 0;
    for (int k = 1; k < logits.size(); ++k)
        if (logits[k] > logits[best]) best = k;
    return best;
}

int classify(Classifier& classifier, const Tensor& image) {
    Tensor l = classifier.logits(image);
    if (!l.all_finite()) throw NumericError("classifier produced non-finite logits");
    return argmax_lowest(l);
}

Tensor draw_initial_latent(const Shape& latent, double sigma_T, uint64_t seed) {
    Rng rng(derive_seed(seed, 0));
    return rng.gaussian_tensor(latent, sigma_T);
}

// ---------------------------------------------------------------------------

LinearClassifier::LinearClassifier(Tensor weights, Tensor bias, PreprocessSpec pre)
    : weights_(std::move(weights)), bias_(std::move(bias)), pre_(std::move(pre)) {
    require_config(weights_.shape.size() == 2, "linear classifier weights must be K x D");
    require_config(bias_.size() == weights_.shape[0], "linear classifier bias size mismatch");
}

ad::Var LinearClassifier::logits(ad::Graph& g, ad::Var image) {
    ad::Var x = image;
    if (pre_.resize_h > 0 && pre_.resize_w > 0) x = g.resize_bilinear(x, pre_.resize_h, pre_.resize_w);
    if (!pre_.mean.empty()) {
        require_config(pre_.mean.size() == pre_.stddev.size(), "preprocess mean/std size mismatch");
        std::vector<double> scl(pre_.mean.size()), shift(pre_.mean.size());
        for (size_t c = 0; c < pre_.mean.size(); ++c) {
            require_config(pre_.stddev[c] != 0.0, "preprocess stddev must be nonzero");
            scl[c] = 1.0 / pre_.stddev[c];
            shift[c] = -pre_.mean[c] / pre_.stddev[c];
        }
        x = g.channel_affine(x, scl, shift);
    }
    int d = g.value(x).size();
    require_config(d == weights_.shape[1],
                   "classifier expects " + std::to_string(weights_.shape[1]) +
                       " inputs, image provides " + std::to_string(d));
    ad::Var raw = g.matvec(weights_, x, {weights_.shape[0]});
    return g.add(raw, g.constant(bias_));
}

LinearClassifier LinearClassifier::load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw InputError("cannot open classifier file: " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ParseError("classifier json parse failure in " + path + ": " + e.what());
    }
    auto w = j.at("weights");
    int k = static_cast<int>(w.size());
    require(k > 0, "classifier json: empty weights");
    int d = static_cast<int>(w.at(0).size());
    Tensor weights = Tensor::zeros({k, d});
    for (int r = 0; r < k; ++r)
        for (int c = 0; c < d; ++c) weights.data[static_cast<size_t>(r) * d + c] = w.at(r).at(c).get<double>();
    Tensor bias = Tensor::zeros({k});
    if (j.contains("bias"))
        for (int r = 0; r < k; ++r) bias[r] = j.at("bias").at(r).get<double>();
    PreprocessSpec pre;
    if (j.contains("preprocess")) {
        const auto& p = j.at("preprocess");
        pre.resize_h = p.value("resize_h", 0);
        pre.resize_w = p.value("resize_w", 0);
        if (p.contains("mean")) pre.mean = p.at("mean").get<std::vector<double>>();
        if (p.contains("stddev")) pre.stddev = p.at("stddev").get<std::vector<double>>();
    }
    return LinearClassifier(std::move(weights), std::move(bias), std::move(pre));
}

void LinearClassifier::save_json(const std::string& path) const {
    json j;
    int k = weights_.shape[0], d = weights_.shape[1];
    json rows = json::array();
    for (int r = 0; r < k; ++r) {
        json row = json::array();
        for (int c = 0; c < d; ++c) row.push_back(weights_.data[static_cast<size_t>(r) * d + c]);
        rows.push_back(std::move(row));
    }
    j["weights"] = std::move(rows);
    json b = json::array();
    for (int r = 0; r < k; ++r) b.push_back(bias_[r]);
    j["bias"] = std::move(b);
    if (pre_.resize_h > 0 || !pre_.mean.empty()) {
        json p;
        p["resize_h"] = pre_.resize_h;
        p["resize_w"] = pre_.resize_w;
        p["mean"] = pre_.mean;
        p["stddev"] = pre_.stddev;
        j["preprocess"] = std::move(p);
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw InputError("cannot write classifier file: " + path);
    f << j.dump(2) << "\n";
}

ad::Var FixedLogitClassifier::logits(ad::Graph& g, ad::Var image) {
    (void)image;
    return g.constant(logits_);
}

// ---------------------------------------------------------------------------

ConstantBranchDenoiser::ConstantBranchDenoiser(Shape latent, Tensor null_image, Tensor null_text,
                                               Tensor uncond, Tensor image_branch,
                                               Tensor text_branch)
    : latent_(std::move(latent)),
      null_image_(std::move(null_image)),
      null_text_(std::move(null_text)),
      uncond_(std::move(uncond)),
      image_branch_(std::move(image_branch)),
      text_branch_(std::move(text_branch)) {
    require_config(uncond_.shape == latent_ && image_branch_.shape == latent_ &&
                       text_branch_.shape == latent_,
                   "branch tensors must be latent-shaped");
}

const Tensor& ConstantBranchDenoiser::branch(const Tensor& image_cond,
                                             const Tensor& text_cond) const {
    bool image_null = image_cond == null_image_;
    bool text_null = text_cond == null_text_;
    if (image_null && text_null) return uncond_;
    if (text_null) return image_branch_;
    return text_branch_;
}

ad::Var ConstantBranchDenoiser::score(ad::Graph& g, ad::Var z, int, ad::Var image_cond,
                                      ad::Var text_cond) {
    require_config(g.value(z).shape == latent_, "denoiser got latent shape " +
                                                    shape_str(g.value(z).shape) + ", expected " +
                                                    shape_str(latent_));
    return g.constant(branch(g.value(image_cond), g.value(text_cond)));
}

Tensor ConstantBranchDenoiser::score_values(const Tensor& z, int, const Tensor& image_cond,
                                            const Tensor& text_cond) {
    if (z.shape != latent_)
        throw ConfigError("denoiser got latent shape " + shape_str(z.shape) + ", expected " +
                          shape_str(latent_));
    return branch(image_cond, text_cond);
}

// ---------------------------------------------------------------------------

namespace {

// Elementwise-diagonal linear denoiser with a dense text projection:
//   score = wz .* z + wi .* ci + Wt t(cl) + b, optionally tanh-squashed.
class MockDenoiser : public DenoiserModel {
  public:
    MockDenoiser(const MockBackendOptions& opts) : opts_(opts) {
        int n = numel(opts_.latent);
        int tn = numel(opts_.text);
        Rng rng(derive_seed(opts_.seed, 11));
        if (opts_.uniform_z_weights) {
            wz_ = Tensor::full(opts_.latent, opts_.z_gain);
        } else {
            wz_ = rng.uniform_tensor(opts_.latent, 0.5, 1.0);
            for (double& v : wz_.data) v *= opts_.z_gain;
        }
        if (opts_.image_weights_track_z) {
            wi_ = wz_;
            for (double& v : wi_.data) v = -v * opts_.image_gain;
        } else {
            wi_ = rng.uniform_tensor(opts_.latent, 0.5, 1.0);
            for (double& v : wi_.data) v *= opts_.image_gain;
        }
        wt_ = rng.gaussian_tensor({n, tn}, opts_.text_gain / std::sqrt(static_cast<double>(tn)));
        bias_ = rng.gaussian_tensor(opts_.latent, 0.05);
    }

    Shape latent_shape() const override { return opts_.latent; }

  protected:
    ad::Var score(ad::Graph& g, ad::Var z, int, ad::Var image_cond, ad::Var text_cond) override {
        require_config(g.value(z).shape == opts_.latent,
                       "denoiser got latent shape " + shape_str(g.value(z).shape) + ", expected " +
                           shape_str(opts_.latent));
        require_config(g.value(image_cond).shape == opts_.latent,
                       "image conditioning shape mismatch");
        require_config(g.value(text_cond).shape == opts_.text, "text conditioning shape mismatch");
        ad::Var acc = g.mul(g.constant(wz_), z);
        acc = g.add(acc, g.mul(g.constant(wi_), image_cond));
        acc = g.add(acc, g.matvec(wt_, text_cond, opts_.latent));
        acc = g.add(acc, g.constant(bias_));
        if (opts_.nonlinear) acc = g.tanh(acc);
        return acc;
    }

    // Same arithmetic, same operation order as the graph ops.
    Tensor score_values(const Tensor& z, int, const Tensor& image_cond,
                        const Tensor& text_cond) override {
        if (z.shape != opts_.latent)
            throw ConfigError("denoiser got latent shape " + shape_str(z.shape) + ", expected " +
                              shape_str(opts_.latent));
        if (image_cond.shape != opts_.latent) throw ConfigError("image conditioning shape mismatch");
        if (text_cond.shape != opts_.text) throw ConfigError("text conditioning shape mismatch");
        int n = numel(opts_.latent);
        int tn = numel(opts_.text);
        Tensor acc = Tensor::zeros(opts_.latent);
        for (int i = 0; i < n; ++i) {
            double v = wz_[i] * z[i];
            v += wi_[i] * image_cond[i];
            double dot = 0.0;
            const double* row = &wt_.data[static_cast<size_t>(i) * tn];
            for (int cidx = 0; cidx < tn; ++cidx) dot += row[cidx] * text_cond[cidx];
            v += dot;
            v += bias_[i];
            acc[i] = opts_.nonlinear ? std::tanh(v) : v;
        }
        return acc;
    }

  private:
    MockBackendOptions opts_;
    Tensor wz_, wi_, wt_, bias_;
};

}  // namespace

MockBackend::MockBackend(MockBackendOptions opts) : opts_(std::move(opts)) {
    schedule_ = sampler::NoiseSchedule::geometric(opts_.steps, opts_.sigma_min, opts_.sigma_max);
    if (opts_.sigma0_zero) schedule_.sigmas[0] = 0.0;
    int latn = numel(opts_.latent);
    int imgn = numel(opts_.image);
    Rng rng(derive_seed(opts_.seed, 13));
    if (opts_.invertible_pair) {
        require_config(latn == imgn, "invertible mock needs matching latent/image sizes");
        opts_.decode_offset = 0.0;
        enc_ = Tensor::zeros({latn, latn});
        for (int i = 0; i < latn; ++i) enc_.data[static_cast<size_t>(i) * latn + i] = 1.0;
        Tensor jitter = rng.gaussian_tensor({latn, latn}, 0.05 / std::sqrt(static_cast<double>(latn)));
        for (int i = 0; i < latn * latn; ++i) enc_.data[static_cast<size_t>(i)] += jitter[i];
        dec_ = invert_square_matrix(enc_);
    } else {
        enc_ = rng.gaussian_tensor({latn, imgn},
                                   opts_.encode_gain / std::sqrt(static_cast<double>(imgn)));
        dec_ = rng.gaussian_tensor({imgn, latn},
                                   opts_.decode_gain / std::sqrt(static_cast<double>(latn)));
    }
    denoiser_ = std::make_unique<MockDenoiser>(opts_);
}

Tensor MockBackend::encode(const Tensor& image) const {
    if (image.shape != opts_.image)
        throw ConfigError("encode: image shape " + shape_str(image.shape) + ", backend expects " +
                          shape_str(opts_.image));
    int latn = numel(opts_.latent), imgn = numel(opts_.image);
    Tensor out = Tensor::zeros(opts_.latent);
    for (int r = 0; r < latn; ++r) {
        double sum = 0.0;
        const double* row = &enc_.data[static_cast<size_t>(r) * imgn];
        for (int cidx = 0; cidx < imgn; ++cidx) sum += row[cidx] * image[cidx];
        out[r] = sum;
    }
    return out;
}

Tensor MockBackend::decode_values(const Tensor& z) const {
    if (z.shape != opts_.latent) throw ConfigError("decode: latent shape mismatch");
    int latn = numel(opts_.latent), imgn = numel(opts_.image);
    Tensor out = Tensor::zeros(opts_.image);
    for (int r = 0; r < imgn; ++r) {
        double sum = 0.0;
        const double* row = &dec_.data[static_cast<size_t>(r) * latn];
        for (int cidx = 0; cidx < latn; ++cidx) sum += row[cidx] * z[cidx];
        if (opts_.decode_offset != 0.0) sum += opts_.decode_offset;
        out[r] = std::min(1.0, std::max(0.0, sum));
    }
    return out;
}

ad::Var MockBackend::decode(ad::Graph& g, ad::Var z) const {
    require_config(g.value(z).shape == opts_.latent, "decode: latent shape mismatch");
    ad::Var raw = g.matvec(dec_, z, opts_.image);
    if (opts_.decode_offset != 0.0) raw = g.add_scalar(raw, opts_.decode_offset);
    return g.clamp01(raw);
}

Tensor MockBackend::embed_text(const std::string& text) const {
    Rng rng(derive_seed(opts_.seed, fnv1a64(text)));
    return rng.gaussian_tensor(opts_.text, 1.0);
}

// ---------------------------------------------------------------------------

LinearClassifier train_linear_softmax(const std::vector<Tensor>& images,
                                      const std::vector<int>& labels, int num_classes, int epochs,
                                      double lr, double l2, uint64_t seed) {
    require(!images.empty() && images.size() == labels.size(), "training data size mismatch");
    int d = images[0].size();
    Rng rng(derive_seed(seed, 29));
    Tensor w = rng.gaussian_tensor({num_classes, d}, 0.01);
    Tensor b = Tensor::zeros({num_classes});
    std::vector<double> p(static_cast<size_t>(num_classes));
    for (int e = 0; e < epochs; ++e) {
        Tensor gw = Tensor::zeros(w.shape);
        Tensor gb = Tensor::zeros(b.shape);
        for (size_t i = 0; i < images.size(); ++i) {
            const Tensor& x = images[i];
            require(x.size() == d, "inconsistent training image size");
            double m = -1e300;
            for (int k = 0; k < num_classes; ++k) {
                double s = b[k];
                const double* wr = &w.data[static_cast<size_t>(k) * d];
                for (int c = 0; c < d; ++c) s += wr[c] * x[c];
                p[static_cast<size_t>(k)] = s;
                m = std::max(m, s);
            }
            double z = 0.0;
            for (int k = 0; k < num_classes; ++k) {
                p[static_cast<size_t>(k)] = std::exp(p[static_cast<size_t>(k)] - m);
                z += p[static_cast<size_t>(k)];
            }
            for (int k = 0; k < num_classes; ++k) {
                double resid = p[static_cast<size_t>(k)] / z - (labels[i] == k ? 1.0 : 0.0);
                gb[k] += resid;
                double* gr = &gw.data[static_cast<size_t>(k) * d];
                for (int c = 0; c < d; ++c) gr[c] += resid * x[c];
            }
        }
        double inv = 1.0 / static_cast<double>(images.size());
        for (int i = 0; i < w.size(); ++i) w[i] -= lr * (gw[i] * inv + l2 * w[i]);
        for (int k = 0; k < num_classes; ++k) b[k] -= lr * gb[k] * inv;
    }
    return LinearClassifier(std::move(w), std::move(b));
}

Tensor invert_square_matrix(const Tensor& m) {
    require(m.shape.size() == 2 && m.shape[0] == m.shape[1], "matrix inverse needs a square matrix");
    int n = m.shape[0];
    std::vector<double> a(m.data);
    Tensor inv = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) inv.data[static_cast<size_t>(i) * n + i] = 1.0;
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[static_cast<size_t>(r) * n + col]) >
                std::abs(a[static_cast<size_t>(piv) * n + col]))
                piv = r;
        if (std::abs(a[static_cast<size_t>(piv) * n + col]) < 1e-12)
            throw NumericError("matrix inverse: singular matrix");
        if (piv != col) {
            for (int c = 0; c < n; ++c) {
                std::swap(a[static_cast<size_t>(piv) * n + c], a[static_cast<size_t>(col) * n + c]);
                std::swap(inv.data[static_cast<size_t>(piv) * n + c],
                          inv.data[static_cast<size_t>(col) * n + c]);
            }
        }
        double d = a[static_cast<size_t>(col) * n + col];
        for (int c = 0; c < n; ++c) {
            a[static_cast<size_t>(col) * n + c] /= d;
            inv.data[static_cast<size_t>(col) * n + c] /= d;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = a[static_cast<size_t>(r) * n + col];
            if (f == 0.0) continue;
            for (int c = 0; c < n; ++c) {
                a[static_cast<size_t>(r) * n + c] -= f * a[static_cast<size_t>(col) * n + c];
                inv.data[static_cast<size_t>(r) * n + c] -=
                    f * inv.data[static_cast<size_t>(col) * n + c];
            }
        }
    }
    return inv;
}

}  // namespace i2a::models
