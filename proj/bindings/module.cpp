#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <string>
#include <vector>

#include "sta/analysis.hpp"
#include "sta/attention.hpp"
#include "sta/env.hpp"
#include "sta/policy.hpp"
#include "sta/tensor.hpp"
#include "sta/train.hpp"

namespace py = pybind11;
using namespace sta;

PYBIND11_MODULE(stalab, m) {
  m.doc() = "History-aware manipulation policies: attention kernels, simulator, and policy runtime";

  py::class_<Tensor>(m, "Tensor")
      .def(py::init([](const std::vector<double>& values, const std::vector<int>& shape) {
             return Tensor::from(values, shape);
           }),
           py::arg("values"), py::arg("shape"))
      .def_property_readonly("shape", [](const Tensor& t) { return t.shape(); })
      .def("values", [](const Tensor& t) { return t.values(); },
           "Flat row-major copy of the elements")
      .def("__repr__", [](const Tensor& t) { return "Tensor(" + t.shape_str() + ")"; });

  // Single-head attention kernels. Inputs are ordered oldest step first, the
  // current step last; everything runs inference-only.
  m.def(
      "transition_attention",
      [](const std::vector<Tensor>& affinities, const std::vector<Tensor>& s_embedded,
         const Tensor& v_t, int d_k) {
        NoGradGuard ng;
        return transition_attention(affinities, s_embedded, v_t, d_k);
      },
      py::arg("affinities"), py::arg("s_embedded"), py::arg("v_t"), py::arg("d_k"),
      "Attend over the current step's values with softmaxed transition scores");
  m.def(
      "transition_scores",
      [](const std::vector<Tensor>& affinities, const std::vector<Tensor>& s_embedded, int d_k) {
        NoGradGuard ng;
        return transition_scores(affinities, s_embedded, d_k);
      },
      py::arg("affinities"), py::arg("s_embedded"), py::arg("d_k"),
      "Pre-softmax transition scores for the current step");
  m.def(
      "standard_cross_attention",
      [](const Tensor& q_t, const std::vector<Tensor>& keys, const std::vector<Tensor>& values) {
        NoGradGuard ng;
        return standard_cross_attention(q_t, keys, values);
      },
      py::arg("q_t"), py::arg("keys"), py::arg("values"),
      "Flat softmax attention over the whole window");

  py::class_<env::Vec2>(m, "Vec2")
      .def(py::init<>())
      .def(py::init([](double x, double y) { return env::Vec2{x, y}; }), py::arg("x"),
           py::arg("y"))
      .def_readwrite("x", &env::Vec2::x)
      .def_readwrite("y", &env::Vec2::y)
      .def("__repr__", [](const env::Vec2& v) {
        return "Vec2(" + std::to_string(v.x) + ", " + std::to_string(v.y) + ")";
      });

  py::class_<env::EnvConfig>(m, "EnvConfig")
      .def(py::init<>())
      .def_readwrite("grid_size", &env::EnvConfig::grid_size)
      .def_readwrite("horizon", &env::EnvConfig::horizon)
      .def_readwrite("n_joints", &env::EnvConfig::n_joints)
      .def_readwrite("grasp_radius", &env::EnvConfig::grasp_radius)
      .def_readwrite("gain", &env::EnvConfig::gain)
      .def_readwrite("home_x", &env::EnvConfig::home_x)
      .def_readwrite("home_y", &env::EnvConfig::home_y)
      .def_readwrite("min_separation", &env::EnvConfig::min_separation)
      .def_readwrite("occlusion_prob", &env::EnvConfig::occlusion_prob)
      .def_readwrite("occlusion_visible_min", &env::EnvConfig::occlusion_visible_min)
      .def_readwrite("occlusion_visible_max", &env::EnvConfig::occlusion_visible_max)
      .def_readwrite("noise_prob", &env::EnvConfig::noise_prob)
      .def_readwrite("noise_start_min", &env::EnvConfig::noise_start_min)
      .def_readwrite("noise_start_max", &env::EnvConfig::noise_start_max)
      .def_readwrite("noise_len_min", &env::EnvConfig::noise_len_min)
      .def_readwrite("noise_len_max", &env::EnvConfig::noise_len_max)
      .def_readwrite("noise_mag_min", &env::EnvConfig::noise_mag_min)
      .def_readwrite("noise_mag_max", &env::EnvConfig::noise_mag_max)
      .def("validate", &env::EnvConfig::validate);

  py::class_<env::EnvState>(m, "EnvState")
      .def_readonly("arm", &env::EnvState::arm)
      .def_readonly("object_pos", &env::EnvState::object_pos)
      .def_readonly("goal_pos", &env::EnvState::goal_pos)
      .def_readonly("holding", &env::EnvState::holding)
      .def_readonly("step_index", &env::EnvState::step_index)
      .def_property_readonly("occlusion_schedule", [](const env::EnvState& s) {
        std::vector<bool> out(s.occlusion_schedule.begin(), s.occlusion_schedule.end());
        return out;
      });

  py::class_<env::StepOutcome>(m, "StepOutcome")
      .def_readonly("state", &env::StepOutcome::state)
      .def_readonly("done", &env::StepOutcome::done)
      .def_readonly("success", &env::StepOutcome::success);

  m.def("env_reset", &env::env_reset, py::arg("seed"), py::arg("config") = env::EnvConfig{});
  m.def("env_step", &env::env_step, py::arg("state"), py::arg("action"),
        py::arg("config") = env::EnvConfig{});
  m.def("render_obs", &env::render_obs, py::arg("state"), py::arg("config") = env::EnvConfig{});
  m.def("expert_action", &env::expert_action, py::arg("state"), py::arg("perceived_object"),
        py::arg("config") = env::EnvConfig{},
        "Scripted controller action for the given perceived object position");
  m.def(
      "generate_dataset",
      [](const std::string& path_prefix, int n_episodes, bool noise_on, std::uint64_t seed,
         const env::EnvConfig& cfg) {
        env::DatasetInfo info = env::generate_dataset(path_prefix, n_episodes, noise_on, seed, cfg);
        py::dict d;
        d["n_episodes"] = info.n_episodes;
        d["seed"] = info.seed;
        d["noise_on"] = info.noise_on;
        d["total_attempts"] = info.total_attempts;
        d["discarded_failures"] = info.discarded_failures;
        d["episodes_with_noise"] = info.episodes_with_noise;
        d["config_hash"] = info.config_hash;
        return d;
      },
      py::arg("path_prefix"), py::arg("n_episodes"), py::arg("noise_on"), py::arg("seed"),
      py::arg("config") = env::EnvConfig{},
      "Roll scripted demonstrations to <prefix>.{jsonl,f64,manifest.json}");

  py::class_<PolicyConfig>(m, "PolicyConfig")
      .def(py::init<>())
      .def_property(
          "variant", [](const PolicyConfig& c) { return variant_name(c.variant); },
          [](PolicyConfig& c, const std::string& v) { c.variant = variant_from_name(v); })
      .def_readwrite("n_layers", &PolicyConfig::n_layers)
      .def_readwrite("d_model", &PolicyConfig::d_model)
      .def_readwrite("n_heads", &PolicyConfig::n_heads)
      .def_readwrite("n_joints", &PolicyConfig::n_joints)
      .def_readwrite("n_state_tokens", &PolicyConfig::n_state_tokens)
      .def_readwrite("k_max", &PolicyConfig::k_max)
      .def_readwrite("obs_channels", &PolicyConfig::obs_channels)
      .def_readwrite("obs_height", &PolicyConfig::obs_height)
      .def_readwrite("obs_width", &PolicyConfig::obs_width)
      .def_readwrite("proprio_dim", &PolicyConfig::proprio_dim)
      .def_readwrite("action_scale", &PolicyConfig::action_scale)
      .def("validate", &PolicyConfig::validate);

  py::class_<Policy>(m, "Policy")
      .def(py::init<PolicyConfig, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def_property_readonly("config", &Policy::config)
      .def("parameter_count", &Policy::parameter_count);

  py::class_<PolicyStream>(m, "PolicyStream")
      .def(py::init<const Policy&, int>(), py::arg("policy"), py::arg("inference_history") = -1,
           py::keep_alive<1, 2>())
      .def(
          "step",
          [](PolicyStream& s, const Tensor& obs, const Tensor& proprio, bool visual_masked) {
            NoGradGuard ng;
            return s.step(obs, proprio, visual_masked);
          },
          py::arg("obs"), py::arg("proprio"), py::arg("visual_masked") = false)
      .def("reset", &PolicyStream::reset)
      .def_property_readonly("timestep", &PolicyStream::timestep)
      .def_property_readonly("window_capacity", &PolicyStream::window_capacity);

  m.def(
      "save_checkpoint",
      [](const std::string& path, const Policy& policy) { save_checkpoint(path, policy); },
      py::arg("path"), py::arg("policy"));
  m.def(
      "load_checkpoint", [](const std::string& path) { return load_checkpoint(path); },
      py::arg("path"));
  m.def("param_fingerprint", &analysis::param_fingerprint, py::arg("policy"),
        "Hash of parameter names and raw double bits");

  m.def(
      "evaluate_policy",
      [](const Policy& policy, const env::EnvConfig& env_cfg, int n_episodes, std::uint64_t seed,
         int inference_history, bool masked_inference, int mask_span_limit) {
        train::EvalResult r = train::evaluate_policy(policy, env_cfg, n_episodes, seed,
                                                     inference_history, masked_inference,
                                                     mask_span_limit);
        py::dict d;
        d["episodes"] = r.episodes;
        d["successes"] = r.successes;
        d["success_rate"] = r.success_rate;
        return d;
      },
      py::arg("policy"), py::arg("env_config"), py::arg("n_episodes"), py::arg("seed"),
      py::arg("inference_history") = -1, py::arg("masked_inference") = false,
      py::arg("mask_span_limit") = 16,
      "Closed-loop success rate of the streaming policy");
}
