#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "litediff/commands.hpp"

namespace py = pybind11;
using namespace litediff;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

ImageGray image_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D image");
  ImageGray img(a.shape(1), a.shape(0));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

py::array_t<double> image_to_numpy(const ImageGray& img) {
  py::array_t<double> out({img.height, img.width});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_litediff, m) {
  m.doc() = "Desk-scale latent diffusion with hooked residual adapters.";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<PgmError>(m, "PgmError", PyExc_RuntimeError);

  m.def("schedule", [](int T) {
    const auto s = schedule_new(T);
    py::dict d;
    d["beta"] = s.beta;
    d["alpha_bar"] = s.alpha_bar;
    d["alpha"] = s.alpha;
    d["sigma"] = s.sigma;
    return d;
  }, py::arg("T"), "Linear variance-preserving schedule, indexed 0..T.");

  m.def("generate", [](const std::string& domain, std::size_t n, std::uint64_t seed, std::size_t resolution) {
    const auto items = generate({parse_domain(domain), n, seed, resolution});
    std::vector<int> classes;
    for (const auto& it : items) classes.push_back(it.class_id);
    return py::make_tuple(to_numpy(to_batch(images_of(items))), classes);
  }, py::arg("domain"), py::arg("n"), py::arg("seed"), py::arg("resolution") = 64,
     "(images N×1×R×R in [-1, 1], class ids)");

  m.def("encode_pgm", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& img,
                         std::uint64_t seed) { return py::bytes(encode_pgm(image_from_numpy(img), seed)); },
        py::arg("image"), py::arg("seed") = 0);
  m.def("decode_pgm", [](const py::bytes& b) { return image_to_numpy(decode_pgm(std::string(b))); });

  m.def("discriminator_loss", py::overload_cast<double, double>(&discriminator_loss), py::arg("p_real"),
        py::arg("p_gen"));
  m.def("adversarial_loss", py::overload_cast<double, double>(&adversarial_loss), py::arg("p_gen"),
        py::arg("target") = 1.0);
  m.def("total_gen_loss", [](double recon, double adv, double morph, double lambda_adv, double lambda_morph) {
    return total_gen_loss(recon, adv, morph, LossWeights{lambda_adv, lambda_morph});
  }, py::arg("recon"), py::arg("adv"), py::arg("morph"), py::arg("lambda_adv") = 0.1, py::arg("lambda_morph") = 0.001);
  m.def("morph_loss", [](const py::array_t<double>& a, const py::array_t<double>& b) {
    return morph_loss(from_numpy(a), from_numpy(b)).item();
  });

  m.def("frechet_distance", [](const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a, const Eigen::VectorXd& mu_b,
                               const Eigen::MatrixXd& cov_b) {
    return frechet_distance({mu_a, cov_a}, {mu_b, cov_b});
  }, py::arg("mean_a"), py::arg("cov_a"), py::arg("mean_b"), py::arg("cov_b"));
  m.def("fit_gaussian", [](const Eigen::MatrixXd& features) {
    const auto g = fit_gaussian(features);
    return py::make_tuple(g.mean, g.cov);
  });

  m.def("resolve_pattern", [](const std::string& name) { return resolve_pattern(HookPattern::parse(name), UNetSpec{}); });
  m.def("ablation_patterns", [] {
    std::vector<std::string> out;
    for (auto k : kAblationPatterns) out.push_back(HookPattern{k, {}}.name());
    return out;
  });
  m.def("trainable_fraction", [](const std::string& pattern, std::uint64_t seed) {
    auto unet = std::make_shared<UNet>(UNetSpec{}, seed);
    unet->params().freeze_all();
    HookedUNet model(unet);
    model.attach(HookPattern::parse(pattern), seed);
    return trainable_fraction(model);
  }, py::arg("pattern") = "all", py::arg("seed") = 0, "Fraction on the default spec.");

  m.def("parse_config", [](const std::string& text) { return ExperimentConfig::parse(text).to_json().dump(); },
        "Parsed config as a JSON string of canonical key/value text.");
  m.def("config_text", [](const std::string& text) { return ExperimentConfig::parse(text).to_text(); });
  m.def("config_keys", &ExperimentConfig::keys);

  m.def("read_checkpoint", [](const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    py::dict tensors;
    for (const auto& [name, e] : ck.params.entries()) tensors[py::str(name)] = to_numpy(e.tensor);
    return py::make_tuple(ck.meta.dump(), tensors);
  }, "(meta JSON string, {name: array})");

  m.def("read_report", [](const std::filesystem::path& path) {
    py::list rows;
    for (const auto& r : read_report_csv(path)) {
      py::dict d;
      d["arm"] = r.arm;
      d["fid_desk"] = r.fid_desk;
      d["perceptual_proxy"] = r.perceptual_proxy;
      d["trainable_fraction"] = r.trainable_fraction;
      d["wall_seconds"] = r.wall_seconds;
      d["seed"] = r.seed;
      d["encoder_checksum"] = r.encoder_checksum;
      rows.append(d);
    }
    return rows;
  });

  m.def("run_cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "litediff");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    py::gil_scoped_release release;
    return run_cli(static_cast<int>(argv.size()), argv.data());
  }, py::arg("args"), "Runs the command-line tool in-process; returns its exit code.");
}
