#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>

#include "i2a/attack.hpp"
#include "i2a/baselines.hpp"
#include "i2a/harness.hpp"
#include "i2a/instructions.hpp"
#include "i2a/models.hpp"
#include "i2a/perceptual.hpp"
#include "i2a/sampler.hpp"

namespace py = pybind11;
using namespace i2a;

namespace {

Tensor tensor_from_array(py::array_t<double, py::array::c_style | py::array::forcecast> arr) {
    Shape shape;
    for (py::ssize_t i = 0; i < arr.ndim(); ++i)
        shape.push_back(static_cast<int>(arr.shape(i)));
    std::vector<double> data(arr.data(), arr.data() + arr.size());
    return Tensor(std::move(shape), std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> arr(shape);
    std::copy(t.data.begin(), t.data.end(), arr.mutable_data());
    return arr;
}

py::dict result_to_dict(const attack::AttackResult& res) {
    py::dict d;
    d["adversarial"] = array_from_tensor(res.adversarial);
    d["success"] = res.success;
    d["distance"] = res.distance;
    d["constraint_met"] = res.constraint_met;
    d["iterations"] = res.iterations;
    d["projected"] = res.projected;
    if (res.proj_scales) {
        d["proj_s_image"] = res.proj_scales->s_image;
        d["proj_s_text"] = res.proj_scales->s_text;
    }
    d["alpha"] = array_from_tensor(res.factors.alpha);
    d["beta"] = array_from_tensor(res.factors.beta);
    return d;
}

}  // namespace

PYBIND11_MODULE(i2a, m) {
    m.doc() = "language-guided semantic adversarial attacks: core operations";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<InputError>(m, "InputError");

    py::class_<attack::AttackConfig>(m, "AttackConfig")
        .def(py::init<>())
        .def_readwrite("lambda_", &attack::AttackConfig::lambda)
        .def_readwrite("gamma", &attack::AttackConfig::gamma)
        .def_readwrite("eta", &attack::AttackConfig::eta)
        .def_readwrite("T", &attack::AttackConfig::T)
        .def_readwrite("s_image", &attack::AttackConfig::s_image)
        .def_readwrite("s_text", &attack::AttackConfig::s_text)
        .def_readwrite("N", &attack::AttackConfig::N)
        .def_readwrite("seed", &attack::AttackConfig::seed)
        .def_readwrite("proj_s_image_max", &attack::AttackConfig::proj_s_image_max)
        .def_readwrite("proj_s_image_step", &attack::AttackConfig::proj_s_image_step)
        .def_readwrite("proj_bisect_iters", &attack::AttackConfig::proj_bisect_iters)
        .def_readwrite("proj_s_text_max", &attack::AttackConfig::proj_s_text_max)
        .def_readwrite("optimize_alpha", &attack::AttackConfig::optimize_alpha)
        .def_readwrite("optimize_beta", &attack::AttackConfig::optimize_beta);

    py::class_<baselines::NoiseAttackConfig>(m, "NoiseAttackConfig")
        .def(py::init<>())
        .def_readwrite("epsilon", &baselines::NoiseAttackConfig::epsilon)
        .def_readwrite("steps", &baselines::NoiseAttackConfig::steps)
        .def_readwrite("step_size", &baselines::NoiseAttackConfig::step_size)
        .def_readwrite("decay", &baselines::NoiseAttackConfig::decay);

    py::class_<models::MockBackendOptions>(m, "MockBackendOptions")
        .def(py::init<>())
        .def_readwrite("latent", &models::MockBackendOptions::latent)
        .def_readwrite("image", &models::MockBackendOptions::image)
        .def_readwrite("text", &models::MockBackendOptions::text)
        .def_readwrite("steps", &models::MockBackendOptions::steps)
        .def_readwrite("seed", &models::MockBackendOptions::seed)
        .def_readwrite("nonlinear", &models::MockBackendOptions::nonlinear)
        .def_readwrite("invertible_pair", &models::MockBackendOptions::invertible_pair)
        .def_readwrite("image_gain", &models::MockBackendOptions::image_gain)
        .def_readwrite("text_gain", &models::MockBackendOptions::text_gain)
        .def_readwrite("z_gain", &models::MockBackendOptions::z_gain);

    py::class_<models::MockBackend, std::shared_ptr<models::MockBackend>>(m, "MockBackend")
        .def(py::init<models::MockBackendOptions>(), py::arg("options") = models::MockBackendOptions{})
        .def("encode", [](models::MockBackend& b, py::array_t<double> img) {
            return array_from_tensor(b.encode(tensor_from_array(img)));
        })
        .def("decode", [](models::MockBackend& b, py::array_t<double> z) {
            return array_from_tensor(b.decode(tensor_from_array(z)));
        })
        .def("latent_shape", &models::MockBackend::latent_shape)
        .def("image_shape", &models::MockBackend::image_shape);

    py::class_<models::LinearClassifier, std::shared_ptr<models::LinearClassifier>>(
        m, "LinearClassifier")
        .def(py::init([](py::array_t<double> w, py::array_t<double> b) {
            return models::LinearClassifier(tensor_from_array(w), tensor_from_array(b));
        }))
        .def("classify", [](models::LinearClassifier& c, py::array_t<double> img) {
            return models::classify(c, tensor_from_array(img));
        })
        .def("logits", [](models::LinearClassifier& c, py::array_t<double> img) {
            return array_from_tensor(c.logits(tensor_from_array(img)));
        });

    py::class_<perceptual::IdentityFeatures, std::shared_ptr<perceptual::IdentityFeatures>>(
        m, "IdentityFeatures")
        .def(py::init<double, bool>(), py::arg("scale") = 1.0, py::arg("normalized") = false);

    m.def("builtin_prompts", [] {
        std::vector<std::string> out;
        for (const auto& p : instructions::builtin_prompts()) out.push_back(p.text);
        return out;
    });

    m.def("render_prompt", [](const std::string& caption, const std::string& category) {
        return instructions::PromptTemplate::standard().render(caption, category);
    });

    m.def("penalty",
          py::overload_cast<double, double, double>(&perceptual::penalty),
          py::arg("distance"), py::arg("gamma"), py::arg("lambda_"));

    m.def("lpips_identity", [](py::array_t<double> a, py::array_t<double> b, bool normalized) {
        perceptual::IdentityFeatures phi(1.0, normalized);
        return perceptual::lpips_distance(tensor_from_array(a), tensor_from_array(b), phi);
    }, py::arg("a"), py::arg("b"), py::arg("normalized") = false);

    m.def("fgsm", [](py::array_t<double> x, int label, models::LinearClassifier& c, double eps) {
        return array_from_tensor(baselines::fgsm(tensor_from_array(x), label, c, eps));
    });
    m.def("pgd", [](py::array_t<double> x, int label, models::LinearClassifier& c,
                    const baselines::NoiseAttackConfig& cfg) {
        return array_from_tensor(baselines::pgd(tensor_from_array(x), label, c, cfg));
    });
    m.def("mim", [](py::array_t<double> x, int label, models::LinearClassifier& c,
                    const baselines::NoiseAttackConfig& cfg) {
        return array_from_tensor(baselines::mim(tensor_from_array(x), label, c, cfg));
    });

    m.def("i2a_attack",
          [](py::array_t<double> x, const std::string& instruction, int label,
             models::LinearClassifier& classifier, models::MockBackend& backend,
             perceptual::IdentityFeatures& phi, const attack::AttackConfig& cfg) {
              attack::AttackResult res = attack::i2a_attack(tensor_from_array(x), instruction,
                                                            label, classifier, backend, phi, cfg);
              return result_to_dict(res);
          },
          py::arg("x"), py::arg("instruction"), py::arg("label"), py::arg("classifier"),
          py::arg("backend"), py::arg("phi"), py::arg("config"));

    m.def("sample_benign",
          [](models::MockBackend& backend, py::array_t<double> x, const std::string& instruction,
             double s_image, double s_text, uint64_t seed) {
              Tensor img = tensor_from_array(x);
              sampler::ConditionPair cond = backend.condition(img, instruction);
              const sampler::NoiseSchedule& sched = backend.schedule();
              Tensor z_T = models::draw_initial_latent(backend.latent_shape(),
                                                       sched.sigmas.back(), seed);
              sampler::NoiseSequence noise =
                  sampler::NoiseSequence::draw(backend.latent_shape(), sched.steps(), seed);
              Tensor z0 = sampler::sample_cfg(backend.denoiser(), z_T, cond,
                                              {s_image, s_text}, sched, noise);
              return array_from_tensor(backend.decode(z0));
          },
          py::arg("backend"), py::arg("x"), py::arg("instruction"), py::arg("s_image") = 1.5,
          py::arg("s_text") = 7.5, py::arg("seed") = 0);

    m.def("evaluate", [](const std::string& config_path, const std::string& out_dir,
                         uint64_t seed, int workers) {
        harness::KeyValueConfig cfg = harness::KeyValueConfig::load(config_path);
        harness::Experiment exp = harness::Experiment::from_config(cfg);
        if (!out_dir.empty()) exp.out_dir = out_dir;
        exp.seed = seed;
        if (workers > 0) exp.workers = workers;
        harness::RunOutput out = harness::evaluate_whitebox(exp);
        py::dict d;
        d["any_errors"] = out.any_errors;
        d["csv"] = out.report.to_csv();
        d["records"] = static_cast<int>(out.records.size());
        return d;
    }, py::arg("config_path"), py::arg("out_dir") = "", py::arg("seed") = 0, py::arg("workers") = 0);

#ifdef VERSION_INFO
    m.attr("__version__") = VERSION_INFO;
#else
    m.attr("__version__") = "0.1.0";
#endif
}
