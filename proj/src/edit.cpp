#include "medit/edit.hpp"

#include "medit/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace medit {

std::string_view to_string(Scenario s) { return s == Scenario::Global ? "global" : "local"; }
std::string_view to_string(InputKind k) { return k == InputKind::StaticPose ? "static_pose" : "clip"; }

Scenario parse_scenario(std::string_view s) {
  if (s == "global") return Scenario::Global;
  if (s == "local") return Scenario::Local;
  throw Error(ErrorCode::InvalidConfig, "scenario must be 'global' or 'local'");
}

InputKind parse_input_kind(std::string_view s) {
  if (s == "static_pose" || s == "pose") return InputKind::StaticPose;
  if (s == "clip") return InputKind::Clip;
  throw Error(ErrorCode::InvalidConfig, "input kind must be 'static_pose' or 'clip'");
}

namespace {

[[noreturn]] void invalid(const std::string& message) { throw Error(ErrorCode::InvalidConfig, message); }

}  // namespace

void EditConfig::validate(int base_frames, int input_frames) const {
  if (!(v > 1.0)) invalid("v must exceed 1");
  if (!(eta >= 0.0 && eta <= 1.0)) invalid("eta must lie in [0, 1]");
  if (!(rho >= 0.0)) invalid("rho must be non-negative");
  if (!(base_train_prob >= 0.0 && base_train_prob <= 1.0)) invalid("q must lie in [0, 1]");
  if (iters_stage1 < 0 || iters_stage2 < 0) invalid("iteration counts must be non-negative");
  if (!(lr_stage1 > 0.0) || !(lr_stage2 > 0.0)) invalid("learning rates must be positive");
  if (pad < 0) invalid("pad must be non-negative");
  if (base_frames < 1 || input_frames < 1) invalid("motions must have at least one frame");

  if (input_kind == InputKind::StaticPose) {
    if (input_frames != 1) invalid("a static pose input must have exactly one frame");
    if (scenario == Scenario::Local) {
      if (pose_steps.empty()) invalid("pose_steps must name at least one frame");
      for (int s : pose_steps) {
        if (s < 0 || s >= base_frames) invalid("pose_steps must lie in [0, N_B)");
      }
      if (std::find(pose_steps.begin(), pose_steps.end(), main_step) == pose_steps.end()) {
        invalid("main_step must be one of pose_steps");
      }
    }
  } else {
    if (scenario == Scenario::Local) {
      if (insert_at < 0) invalid("insert_at must be non-negative");
      if (insert_at + input_frames > base_frames) invalid("clip overruns the base motion: insert_at + N_I > N_B");
      if (main_step < 0 || main_step >= base_frames) invalid("main_step must lie in [0, N_B)");
    } else if (input_frames != base_frames) {
      invalid("a global clip must have as many frames as the base motion");
    }
  }
}

Combination combine_static_pose(const Motion& base, const Motion& pose, const std::vector<int>& steps) {
  if (!(base.layout() == pose.layout())) {
    throw Error(ErrorCode::LayoutMismatch, "pose and base use different layouts");
  }
  if (pose.frame_count() != 1) throw Error(ErrorCode::ShapeMismatch, "a static pose must have one frame");
  const Eigen::Index n = base.frame_count();
  MaskMatrix mask = MaskMatrix::Zero(n, base.layout().frame_dim());
  for (int s : steps) {
    if (s < 0 || s >= n) throw Error(ErrorCode::OutOfRange, "pose step " + std::to_string(s) + " outside the base motion");
    mask.row(s).setOnes();
  }
  Frames tiled = pose.frames().replicate(n, 1);
  Frames combined = tiled.cwiseProduct(mask) + base.frames().cwiseProduct((1.0 - mask.array()).matrix());
  return {base.with_frames(std::move(combined)), std::move(mask)};
}

Combination combine_clip(const Motion& base, const Motion& clip, int insert_at, Scenario scenario) {
  if (!(base.layout() == clip.layout())) {
    throw Error(ErrorCode::LayoutMismatch, "clip and base use different layouts");
  }
  if (scenario == Scenario::Global) {
    MaskMatrix mask = MaskMatrix::Ones(clip.frame_count(), clip.layout().frame_dim());
    return {base.with_frames(clip.frames()), std::move(mask)};
  }
  const Eigen::Index n = base.frame_count();
  const Eigen::Index len = clip.frame_count();
  if (insert_at < 0 || insert_at + len > n) {
    throw Error(ErrorCode::OutOfRange, "clip overruns the base motion: insert_at + N_I > N_B");
  }
  MaskMatrix mask = MaskMatrix::Zero(n, base.layout().frame_dim());
  mask.middleRows(insert_at, len).setOnes();
  Frames combined = base.frames();
  combined.middleRows(insert_at, len) = clip.frames();
  return {base.with_frames(std::move(combined)), std::move(mask)};
}

std::vector<int> pad_set(const EditConfig& config, int base_frames, int input_frames) {
  std::set<int> frames;
  auto band = [&](int lo, int hi, int skip) {
    for (int i = lo; i <= hi; ++i) {
      if (i != skip && i >= 0 && i < base_frames) frames.insert(i);
    }
  };
  if (config.pad > 0) {
    if (config.input_kind == InputKind::Clip) {
      const int p = config.insert_at;
      band(p - config.pad, p + config.pad, -1);
      band(p + input_frames - config.pad, p + input_frames + config.pad, -1);
    } else {
      band(config.main_step - config.pad, config.main_step + config.pad, config.main_step);
    }
  }
  return {frames.begin(), frames.end()};
}

Frames build_weights(const EditConfig& config, const FeatureLayout& layout, int base_frames, int input_frames) {
  const std::vector<int> rot = rotation_indices(layout);
  Frames w;
  if (config.scenario == Scenario::Global) {
    w = Frames::Zero(base_frames, layout.frame_dim());
    for (int c : rot) w.col(c).setOnes();
    return w;
  }
  w = Frames::Ones(base_frames, layout.frame_dim());
  if (config.main_step >= 0 && config.main_step < base_frames) {
    for (int c : rot) w(config.main_step, c) = config.v;
  }
  for (int i : pad_set(config, base_frames, input_frames)) w.row(i).setZero();
  return w;
}

Eigen::VectorXd interpolate_embedding(const Eigen::VectorXd& e_opt, const Eigen::VectorXd& e_base, double eta) {
  if (e_opt.size() != e_base.size()) throw Error(ErrorCode::ShapeMismatch, "embedding dimensions differ");
  if (!(eta >= 0.0 && eta <= 1.0)) throw Error(ErrorCode::OutOfRange, "eta must lie in [0, 1]");
  return eta * e_opt + (1.0 - eta) * e_base;
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::Created: return "created";
    case Stage::Stage1Running: return "stage1_running";
    case Stage::Stage1Done: return "stage1_done";
    case Stage::Stage2Running: return "stage2_running";
    case Stage::Ready: return "ready";
    case Stage::Failed: return "failed";
  }
  return "failed";
}

Stage parse_stage(std::string_view s) {
  for (Stage st : {Stage::Created, Stage::Stage1Running, Stage::Stage1Done, Stage::Stage2Running,
                   Stage::Ready, Stage::Failed}) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorCode::MalformedFile, "unknown session stage '" + std::string(s) + "'");
}

void EditSession::advance(Stage next) {
  if (next != Stage::Failed && static_cast<int>(next) != static_cast<int>(stage) + 1) {
    throw Error(ErrorCode::InvalidState, "cannot move session from " + std::string(to_string(stage)) +
                                             " to " + std::string(to_string(next)));
  }
  stage = next;
}

EditSession create_session(const Motion& base, const std::string& base_label, const Motion& input,
                           const EditConfig& config, const DenoiserModel& model,
                           const EmbeddingTable& embeddings) {
  config.validate(static_cast<int>(base.frame_count()), static_cast<int>(input.frame_count()));
  if (base.frame_count() != model.dims().frames || base.layout().frame_dim() != model.dims().frame_dim) {
    throw Error(ErrorCode::ShapeMismatch, "base motion shape does not match the model (" +
                                              std::to_string(model.dims().frames) + " frames of width " +
                                              std::to_string(model.dims().frame_dim) + ")");
  }
  Combination c = [&] {
    if (config.input_kind == InputKind::StaticPose) {
      std::vector<int> steps = config.pose_steps;
      if (config.scenario == Scenario::Global) {
        steps.resize(static_cast<std::size_t>(base.frame_count()));
        for (std::size_t i = 0; i < steps.size(); ++i) steps[i] = static_cast<int>(i);
      }
      return combine_static_pose(base, input, steps);
    }
    return combine_clip(base, input, config.insert_at, config.scenario);
  }();
  Frames weights = build_weights(config, base.layout(), static_cast<int>(base.frame_count()),
                                 static_cast<int>(input.frame_count()));
  const Eigen::VectorXd& e_base = embeddings.at(base_label);
  return EditSession{config,       base,          base_label,   input,       std::move(c.combined),
                     std::move(weights), e_base,  e_base,       model,       embeddings,
                     Stage::Created, {},           {},           {},          std::nullopt};
}

namespace {

// Stage seeds are decorrelated from each other and from generation seeds.
constexpr std::uint64_t kStage1Stream = 0x5151'0001ull;
constexpr std::uint64_t kStage2Stream = 0x5151'0002ull;

void fail(EditSession& session, const std::string& message) {
  session.failure = message;
  session.advance(Stage::Failed);
  throw Error(ErrorCode::Divergence, message);
}

}  // namespace

void optimize_embedding(EditSession& session, const NoiseSchedule& schedule, const ProgressCallback& progress) {
  if (session.stage != Stage::Created) {
    throw Error(ErrorCode::InvalidState, "stage 1 needs a freshly created session");
  }
  session.advance(Stage::Stage1Running);
  const EditConfig& cfg = session.config;
  Rng rng(cfg.seed ^ kStage1Stream);
  Eigen::VectorXd e = session.e_base;
  OptimizerState state(e.size(), cfg.lr_stage1);
  session.stage1_loss.clear();
  session.stage1_loss.reserve(static_cast<std::size_t>(cfg.iters_stage1));

  DiffusionSample sample;
  sample.x0 = session.combined.frames();
  sample.weight = session.weights;
  for (int it = 0; it < cfg.iters_stage1; ++it) {
    sample.embedding = e;
    draw_noise(sample, schedule, rng);
    LossAndGrads lg = diffusion_loss(session.model, std::span(&sample, 1), schedule, {false, true});
    if (!std::isfinite(lg.loss)) fail(session, "stage 1 loss became non-finite at iteration " + std::to_string(it));
    session.stage1_loss.push_back(lg.loss);
    optimizer_step(state, e, lg.embedding_grads.front());
    if (progress) progress(it + 1, cfg.iters_stage1, lg.loss);
  }
  session.e_opt = std::move(e);
  session.advance(Stage::Stage1Done);
}

void finetune_model(EditSession& session, const NoiseSchedule& schedule, const ProgressCallback& progress) {
  if (session.stage != Stage::Stage1Done) {
    throw Error(ErrorCode::InvalidState, "stage 2 needs a session that finished stage 1");
  }
  session.advance(Stage::Stage2Running);
  const EditConfig& cfg = session.config;
  Rng rng(cfg.seed ^ kStage2Stream);
  std::bernoulli_distribution include_base(cfg.base_train_prob);
  OptimizerState state(session.model.parameters().size(), cfg.lr_stage2);
  session.stage2_loss.clear();
  session.stage2_combined_loss.clear();

  std::vector<DiffusionSample> batch(2);
  DiffusionSample& combined = batch[0];
  combined.x0 = session.combined.frames();
  combined.weight = session.weights;
  combined.embedding = session.e_opt;
  DiffusionSample& base = batch[1];
  base.x0 = session.base.frames();
  base.embedding = session.e_base;
  base.scale = cfg.rho;

  for (int it = 0; it < cfg.iters_stage2; ++it) {
    draw_noise(combined, schedule, rng);
    const bool with_base = include_base(rng);
    if (with_base) draw_noise(base, schedule, rng);
    const bool base_active = with_base && cfg.rho > 0.0;
    const std::size_t terms = base_active ? 2 : 1;
    LossAndGrads lg = diffusion_loss(session.model, std::span(batch.data(), terms), schedule, {true, false});
    if (!std::isfinite(lg.loss)) fail(session, "stage 2 loss became non-finite at iteration " + std::to_string(it));
    const double combined_term =
        base_active ? diffusion_loss(session.model, std::span(batch.data(), 1), schedule, {false, false}).loss
                    : lg.loss;
    session.stage2_loss.push_back(lg.loss);
    session.stage2_combined_loss.push_back(combined_term);
    optimizer_step(state, session.model.mutable_parameters(), lg.parameter_grads);
    if (progress) progress(it + 1, cfg.iters_stage2, lg.loss);
  }
  session.advance(Stage::Ready);
}

Motion generate(const EditSession& session, double eta, std::uint64_t seed, const NoiseSchedule& schedule) {
  if (session.stage != Stage::Ready) {
    throw Error(ErrorCode::InvalidState, "session is not ready (stage " + std::string(to_string(session.stage)) + ")");
  }
  const Eigen::VectorXd e = interpolate_embedding(session.e_opt, session.e_base, eta);
  Rng rng(seed);
  Frames frames = sample(session.model, e, schedule, rng);
  return Motion(session.base.fps(), session.base.layout(), std::move(frames), session.base_label + "+edit");
}

}  // namespace medit
