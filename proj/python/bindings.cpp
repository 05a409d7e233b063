#include "quadfit/fitter.hpp"
#include "quadfit/io.hpp"
#include "quadfit/synthbench.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace quadfit;

namespace {

// Python dict -> Json through the json module, so configs accept plain dicts.
Json to_json(const py::object& obj) {
  if (obj.is_none()) return Json::object();
  return Json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::object from_json(const Json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

py::dict posed_dict(const PosedState& p) {
  py::dict d;
  d["vertices"] = p.vertices;
  d["keypoints3d"] = p.keypoints3d;
  d["keypoints2d"] = p.keypoints2d;
  d["vertices2d"] = p.vertices2d;
  return d;
}

}  // namespace

PYBIND11_MODULE(_quadfit, m) {
  m.doc() = "Quadruped model fitting on a procedural toy animal.";

  py::register_exception<Error>(m, "QuadfitError", PyExc_RuntimeError);

  py::class_<ModelBundle>(m, "ModelBundle")
      .def_property_readonly("num_joints", &ModelBundle::num_joints)
      .def_property_readonly("num_vertices", &ModelBundle::num_vertices)
      .def_property_readonly("num_keypoints", &ModelBundle::num_keypoints)
      .def_property_readonly("pose_dim", &ModelBundle::pose_dim)
      .def_property_readonly("num_components", [](const ModelBundle& b) { return b.space.num_components(); })
      .def_property_readonly("mean_vertices", [](const ModelBundle& b) { return b.space.mean_vertices; })
      .def_property_readonly("eigenvalues", [](const ModelBundle& b) { return b.space.eigenvalues; })
      .def_property_readonly("faces", [](const ModelBundle& b) { return b.mesh.faces; });

  m.def("build_toy_model", &build_toy_model, py::arg("num_dogs") = 24, py::arg("num_others") = 12,
        py::arg("num_components") = 16, py::arg("dog_weight_fraction") = 0.5, py::arg("seed") = 7);
  m.def("save_model", &save_bundle, py::arg("dir"), py::arg("model"));
  m.def("load_model", &load_bundle, py::arg("dir"));
  m.def("content_hash", &content_hash, py::arg("dir"), "Git-style hash of a directory tree.");
  m.def("torso_length", [](const ModelBundle& b, const Mat& v) { return torso_length(b.skeleton, v); },
        py::arg("model"), py::arg("vertices"));

  py::class_<FlowPrior>(m, "FlowPrior")
      .def_static("identity", &FlowPrior::identity, py::arg("dim"), py::arg("num_layers"), py::arg("hidden"),
                  py::arg("seed"))
      .def_readonly("dim", &FlowPrior::dim)
      .def(
          "forward",
          [](const FlowPrior& f, const Mat& theta) {
            Vec logdet;
            Mat y = f.forward(theta, &logdet);
            return py::make_tuple(y, logdet);
          },
          py::arg("theta"), "Returns (y, log|det dy/dtheta|) per row.")
      .def("inverse", &FlowPrior::inverse, py::arg("y"))
      .def("nll", &FlowPrior::nll, py::arg("theta"))
      .def(
          "sample", [](const FlowPrior& f, int n, std::uint64_t seed) {
            Rng rng(seed);
            return f.sample(n, rng);
          },
          py::arg("n"), py::arg("seed"));

  m.def(
      "train_flow",
      [](const Mat& data, int layers, int hidden, int epochs, int batch, double lr, std::uint64_t seed) {
        FlowTrainConfig c;
        c.layers = layers;
        c.hidden = hidden;
        c.epochs = epochs;
        c.batch = batch;
        c.lr = lr;
        c.seed = seed;
        FlowTrainResult r = train_flow(data, c);
        return py::make_tuple(r.flow, r.epoch_nll);
      },
      py::arg("data"), py::arg("layers") = 4, py::arg("hidden") = 64, py::arg("epochs") = 60, py::arg("batch") = 256,
      py::arg("lr") = 1e-3, py::arg("seed") = 0, "Returns (flow, mean NLL after each epoch).");
  m.def("sample_gait_poses", &sample_gait_poses, py::arg("n"), py::arg("seed"));

  py::class_<Priors>(m, "Priors")
      .def(py::init([](const ModelBundle& model, const FlowPrior& flow) {
             Priors p;
             p.flow = flow;
             p.shape = GaussianShapePrior::from_space(model.space);
             return p;
           }),
           py::arg("model"), py::arg("flow"))
      .def_readonly("flow", &Priors::flow);
  m.def("save_priors", &save_priors, py::arg("dir"), py::arg("priors"));
  m.def("load_priors", &load_priors, py::arg("dir"));

  py::class_<FitState>(m, "FitState")
      .def(py::init([](const py::object& d) { return state_from_json(to_json(d)); }), py::arg("state"))
      .def("to_dict", [](const FitState& s) { return from_json(state_to_json(s)); })
      .def_readonly("focal", &FitState::focal)
      .def_property_readonly("beta", [](const FitState& s) { return s.shape.beta; })
      .def_property_readonly("kappa", [](const FitState& s) { return s.shape.kappa; })
      .def_property_readonly("latent", [](const FitState& s) { return s.pose.latent; })
      .def_property_readonly("translation", [](const FitState& s) { return s.pose.translation; });
  m.def(
      "pose_state",
      [](const FitState& s, const ModelBundle& model, int width, int height) {
        return posed_dict(pose_state(s, model, width, height));
      },
      py::arg("state"), py::arg("model"), py::arg("width"), py::arg("height"));

  py::class_<Observation2D>(m, "Observation2D")
      .def_readonly("keypoints", &Observation2D::keypoints)
      .def_readonly("visible", &Observation2D::visible)
      .def_readonly("mask", &Observation2D::mask)
      .def_readonly("width", &Observation2D::width)
      .def_readonly("height", &Observation2D::height)
      .def_readonly("breed", &Observation2D::breed)
      .def_readonly("split", &Observation2D::split);

  py::class_<BreedSpec>(m, "BreedSpec")
      .def_readonly("name", &BreedSpec::name)
      .def_readonly("clade", &BreedSpec::clade)
      .def_property_readonly("beta", [](const BreedSpec& b) { return b.prototype.beta; })
      .def_property_readonly("kappa", [](const BreedSpec& b) { return b.prototype.kappa; });

  py::class_<SynthInstance>(m, "SynthInstance")
      .def_readonly("truth", &SynthInstance::truth)
      .def_readonly("obs", &SynthInstance::obs)
      .def_readonly("breed", &SynthInstance::breed);

  m.def(
      "gen_breeds",
      [](const ModelBundle& model, const py::object& config) {
        return gen_breeds(model, BreedConfig::from_json(to_json(config)));
      },
      py::arg("model"), py::arg("config") = py::none());
  m.def(
      "gen_dataset",
      [](const ModelBundle& model, const FlowPrior& flow, const std::vector<BreedSpec>& breeds,
         const py::object& config, int jobs) {
        const DatasetConfig c = DatasetConfig::from_json(to_json(config));
        py::gil_scoped_release release;
        return gen_dataset(model, flow, breeds, c, jobs);
      },
      py::arg("model"), py::arg("flow"), py::arg("breeds"), py::arg("config") = py::none(), py::arg("jobs") = 1);

  py::class_<FitResult>(m, "FitResult")
      .def_readonly("state", &FitResult::state)
      .def_readonly("trace", &FitResult::trace)
      .def_readonly("initial_loss", &FitResult::initial_loss)
      .def_readonly("final_loss", &FitResult::final_loss)
      .def_readonly("seconds", &FitResult::seconds);

  m.def("default_fit_config", [] { return from_json(FitConfig::defaults().to_json()); });
  m.def(
      "fit",
      [](const Observation2D& obs, const ModelBundle& model, const Priors& priors, const py::object& config) {
        const FitConfig c = config.is_none() ? FitConfig::defaults() : FitConfig::from_json(to_json(config));
        py::gil_scoped_release release;
        return fit_instance(obs, model, priors, c);
      },
      py::arg("obs"), py::arg("model"), py::arg("priors"), py::arg("config") = py::none());

  m.def("pck", &pck, py::arg("pred"), py::arg("gt"), py::arg("visible"), py::arg("gt_mask"), py::arg("ratio") = 0.15);
  m.def("iou", &iou, py::arg("pred"), py::arg("gt"));
  m.def(
      "procrustes_align",
      [](const Mat& source, const Mat& target, bool with_scale) {
        const ProcrustesResult r = procrustes_align(source, target, with_scale);
        py::dict d;
        d["rotation"] = Mat(r.rotation);
        d["translation"] = Vec(r.translation);
        d["scale"] = r.scale;
        d["rms"] = r.rms;
        d["aligned"] = r.aligned;
        return d;
      },
      py::arg("source"), py::arg("target"), py::arg("with_scale") = true);
  m.def("aligned_v2v", &aligned_v2v, py::arg("source"), py::arg("target"), py::arg("with_scale") = true);
  m.def(
      "cluster_quality", [](const Mat& z, const std::vector<int>& labels) { return cluster_quality(z, labels).score; },
      py::arg("z"), py::arg("labels"));
}
