#include "medit/commands.hpp"
#include "medit/denoiser.hpp"
#include "medit/edit.hpp"
#include "medit/error.hpp"
#include "medit/motion.hpp"
#include "medit/schedule.hpp"
#include "medit/synth.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace medit;

namespace {

// Leaked on purpose so it outlives interpreter teardown.
py::handle g_error_type;

int joints_for_width(Eigen::Index width) {
  if ((width + 1) % 12 != 0) {
    throw Error(ErrorCode::InvalidLayout,
                "frame width " + std::to_string(width) + " is not 12*J - 1 for any joint count");
  }
  return static_cast<int>((width + 1) / 12);
}

Motion make_motion(const Frames& frames, double fps, std::optional<int> joints,
                   std::optional<std::string> label) {
  const int j = joints ? *joints : joints_for_width(frames.cols());
  return Motion(fps, FeatureLayout(j), frames, std::move(label));
}

CorpusSpec spec_with(int frames, double fps, std::uint64_t seed = 0, int samples = 64) {
  CorpusSpec spec;
  spec.frames = frames;
  spec.fps = fps;
  spec.seed = seed;
  spec.samples_per_label = samples;
  return spec;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Motion editing core";
  m.attr("__version__") = MEDIT_VERSION;

  g_error_type = PyErr_NewException("medit.Error", PyExc_ValueError, nullptr);
  m.attr("Error") = g_error_type;
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = g_error_type(e.what());
      exc.attr("code") = std::string(to_string(e.code()));
      PyErr_SetObject(g_error_type.ptr(), exc.ptr());
    }
  });

  m.def("layout_dims", &layout_dims, py::arg("joints"));
  m.def("rotation_indices", [](int joints) { return rotation_indices(FeatureLayout(joints)); },
        py::arg("joints"));

  py::class_<Motion>(m, "Motion")
      .def(py::init(&make_motion), py::arg("frames"), py::arg("fps") = 20.0,
           py::arg("joints") = py::none(), py::arg("label") = py::none())
      .def_property_readonly("frames", &Motion::frames)
      .def_property_readonly("fps", &Motion::fps)
      .def_property_readonly("joints", [](const Motion& mo) { return mo.layout().joints(); })
      .def_property_readonly("label", &Motion::label)
      .def_property_readonly("frame_count", &Motion::frame_count)
      .def("world_positions",
           [](const Motion& mo) {
             std::vector<Eigen::MatrixXd> out;
             for (const WorldPose& p : to_world_positions(mo)) out.emplace_back(p.positions);
             return out;
           })
      .def("to_json", &motion_to_text)
      .def_static("from_json", [](const std::string& text) { return motion_from_text(text); })
      .def("__eq__", &Motion::operator==)
      .def("__repr__", [](const Motion& mo) {
        std::ostringstream s;
        s << "Motion(frames=" << mo.frame_count() << ", joints=" << mo.layout().joints()
          << ", fps=" << mo.fps() << ")";
        return s.str();
      });

  m.def("load_motion", &load_motion, py::arg("path"));
  m.def("save_motion", &save_motion, py::arg("motion"), py::arg("path"));

  py::class_<NoiseSchedule>(m, "Schedule")
      .def(py::init<int, double, double>(), py::arg("steps") = kDefaultSteps,
           py::arg("beta_start") = kDefaultBetaStart, py::arg("beta_end") = kDefaultBetaEnd)
      .def_property_readonly("steps", &NoiseSchedule::steps)
      .def("beta", &NoiseSchedule::beta, py::arg("t"))
      .def("alpha_bar", &NoiseSchedule::alpha_bar, py::arg("t"))
      .def("posterior_variance", &NoiseSchedule::posterior_variance, py::arg("t"));
  m.def("default_schedule", [](int steps) { return make_schedule(steps); },
        py::arg("steps") = kDefaultSteps);
  m.def("q_sample", &q_sample, py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));
  m.def("posterior_mean", &posterior_mean, py::arg("x0_hat"), py::arg("x_t"), py::arg("t"),
        py::arg("schedule"));

  m.def("gen_motion",
        [](const std::string& label, std::uint64_t seed, int frames, double fps) {
          return gen_motion(label, seed, spec_with(frames, fps));
        },
        py::arg("label"), py::arg("seed"), py::arg("frames") = 40, py::arg("fps") = 20.0);
  m.def("gen_edit_input",
        [](const std::string& kind, int frames, double fps) {
          return gen_edit_inputs(kind, spec_with(frames, fps));
        },
        py::arg("kind"), py::arg("frames") = 40, py::arg("fps") = 20.0);
  m.def("edit_input_kinds", [] { return kEditInputKinds; });
  m.def("build_corpus",
        [](const std::filesystem::path& dir, int samples_per_label, std::uint64_t seed) {
          py::gil_scoped_release release;
          return build_corpus(spec_with(40, 20.0, seed, samples_per_label), dir).size();
        },
        py::arg("dir"), py::arg("samples_per_label") = 64, py::arg("seed") = 0);

  py::class_<EditConfig>(m, "EditConfig")
      .def(py::init<>())
      .def_property(
          "scenario", [](const EditConfig& c) { return std::string(to_string(c.scenario)); },
          [](EditConfig& c, const std::string& s) { c.scenario = parse_scenario(s); })
      .def_property(
          "input_kind", [](const EditConfig& c) { return std::string(to_string(c.input_kind)); },
          [](EditConfig& c, const std::string& s) { c.input_kind = parse_input_kind(s); })
      .def_readwrite("insert_at", &EditConfig::insert_at)
      .def_readwrite("pose_steps", &EditConfig::pose_steps)
      .def_readwrite("main_step", &EditConfig::main_step)
      .def_readwrite("pad", &EditConfig::pad)
      .def_readwrite("v", &EditConfig::v)
      .def_readwrite("rho", &EditConfig::rho)
      .def_readwrite("base_train_prob", &EditConfig::base_train_prob)
      .def_readwrite("eta", &EditConfig::eta)
      .def_readwrite("iters_stage1", &EditConfig::iters_stage1)
      .def_readwrite("iters_stage2", &EditConfig::iters_stage2)
      .def_readwrite("lr_stage1", &EditConfig::lr_stage1)
      .def_readwrite("lr_stage2", &EditConfig::lr_stage2)
      .def_readwrite("seed", &EditConfig::seed)
      .def("validate", &EditConfig::validate, py::arg("base_frames"), py::arg("input_frames"));

  m.def("combine_static_pose",
        [](const Motion& base, const Motion& pose, const std::vector<int>& steps) {
          Combination c = combine_static_pose(base, pose, steps);
          return py::make_tuple(c.combined, c.mask);
        },
        py::arg("base"), py::arg("pose"), py::arg("steps"));
  m.def("combine_clip",
        [](const Motion& base, const Motion& clip, int insert_at, const std::string& scenario) {
          Combination c = combine_clip(base, clip, insert_at, parse_scenario(scenario));
          return py::make_tuple(c.combined, c.mask);
        },
        py::arg("base"), py::arg("clip"), py::arg("insert_at"), py::arg("scenario") = "local");
  m.def("pad_set", &pad_set, py::arg("config"), py::arg("base_frames"), py::arg("input_frames") = 1);
  m.def("build_weights",
        [](const EditConfig& c, int joints, int base_frames, int input_frames) {
          return build_weights(c, FeatureLayout(joints), base_frames, input_frames);
        },
        py::arg("config"), py::arg("joints"), py::arg("base_frames"), py::arg("input_frames") = 1);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_property_readonly("labels", [](const Checkpoint& c) { return c.embeddings.labels(); })
      .def_property_readonly("diffusion_steps",
                             [](const Checkpoint& c) { return c.model.dims().diffusion_steps; })
      .def("embedding", [](const Checkpoint& c, const std::string& label) { return c.embeddings.at(label); },
           py::arg("label"))
      .def("sample",
           [](const Checkpoint& c, const std::string& label, std::uint64_t seed) {
             const Eigen::VectorXd e = c.embeddings.at(label);
             Frames f;
             {
               py::gil_scoped_release release;
               Rng rng(seed);
               f = sample(c.model, e, schedule_for(c.model), rng);
             }
             return make_motion(f, 20.0, std::nullopt, label);
           },
           py::arg("label"), py::arg("seed") = 0);
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  py::class_<EditSession>(m, "EditSession")
      .def_readonly("config", &EditSession::config)
      .def_readonly("base", &EditSession::base)
      .def_readonly("input", &EditSession::input)
      .def_readonly("combined", &EditSession::combined)
      .def_readonly("weights", &EditSession::weights)
      .def_readonly("e_base", &EditSession::e_base)
      .def_readonly("e_opt", &EditSession::e_opt)
      .def_readonly("stage1_loss", &EditSession::stage1_loss)
      .def_readonly("stage2_loss", &EditSession::stage2_loss)
      .def_property_readonly("stage", [](const EditSession& s) { return std::string(to_string(s.stage)); })
      .def("optimize_embedding",
           [](EditSession& s) {
             py::gil_scoped_release release;
             optimize_embedding(s, schedule_for(s.model));
           })
      .def("finetune",
           [](EditSession& s) {
             py::gil_scoped_release release;
             finetune_model(s, schedule_for(s.model));
           })
      .def("generate",
           [](const EditSession& s, double eta, std::uint64_t seed) {
             py::gil_scoped_release release;
             return generate(s, eta, seed, schedule_for(s.model));
           },
           py::arg("eta") = 1.0, py::arg("seed") = 0)
      .def("save", [](const EditSession& s, const std::filesystem::path& p) { save_session(p, s); },
           py::arg("path"));
  m.def("create_session",
        [](const Motion& base, const std::string& base_label, const Motion& input,
           const EditConfig& config, const Checkpoint& cp) {
          return create_session(base, base_label, input, config, cp.model, cp.embeddings);
        },
        py::arg("base"), py::arg("base_label"), py::arg("input"), py::arg("config"),
        py::arg("checkpoint"));
  m.def("load_session", &load_session, py::arg("path"));

  m.def("run_cli",
        [](const std::vector<std::string>& args) {
          std::ostringstream out, err;
          int code = 0;
          {
            py::gil_scoped_release release;
            code = run_cli(args, out, err);
          }
          return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a medit subcommand in-process; returns (exit_code, stdout, stderr).");
}
