#include "medit/synth.hpp"

#include "medit/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

namespace medit {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kSkeletonJoints = 5;

struct Limb {
  double attach[3];
  double length;
};

// Indexed by joint id; entry 0 (root) unused.
constexpr Limb kLimbs[kSkeletonJoints] = {
    {{0.0, 0.0, 0.0}, 0.0},
    {{0.2, 0.5, 0.0}, 0.55},   // left arm
    {{-0.2, 0.5, 0.0}, 0.55},  // right arm
    {{0.1, 0.0, 0.0}, 0.9},    // left leg
    {{-0.1, 0.0, 0.0}, 0.9},   // right leg
};

constexpr double kStandHeight = 0.9;
constexpr double kContactScale = 0.35;

// Kinematic state of one frame. Swing rotates a limb about the lateral x
// axis (negative = forward), abduction about the forward z axis (positive
// moves the end towards +x).
struct KinematicPose {
  double rot_vel = 0.0;
  double lin_vel_x = 0.0;
  double lin_vel_z = 0.0;
  double height = kStandHeight;
  double swing[kSkeletonJoints] = {};
  double abduction[kSkeletonJoints] = {};
};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double smooth_bump(double x, double center, double width) {
  const double z = (x - center) / width;
  return std::exp(-0.5 * z * z);
}

void write_rotation(Frames& f, Eigen::Index n, const FeatureLayout& layout, int j, double swing,
                    double abduction) {
  const double cs = std::cos(swing), ss = std::sin(swing);
  const double ca = std::cos(abduction), sa = std::sin(abduction);
  // First two columns of Rz(abduction) * Rx(swing).
  const double six[6] = {ca, sa, 0.0, -sa * cs, ca * cs, ss};
  for (int k = 0; k < 6; ++k) f(n, layout.rotation_col(j, k)) = six[k];
  const Limb& limb = kLimbs[j];
  f(n, layout.position_col(j, 0)) = limb.attach[0] + limb.length * sa * cs;
  f(n, layout.position_col(j, 1)) = limb.attach[1] - limb.length * ca * cs;
  f(n, layout.position_col(j, 2)) = limb.attach[2] - limb.length * ss;
}

double contact(double foot_height) { return std::clamp(1.0 - foot_height / kContactScale, 0.0, 1.0); }

Frames render(const std::vector<KinematicPose>& poses, const FeatureLayout& layout) {
  const auto count = static_cast<Eigen::Index>(poses.size());
  Frames f = Frames::Zero(count, layout.frame_dim());
  for (Eigen::Index n = 0; n < count; ++n) {
    const KinematicPose& p = poses[static_cast<std::size_t>(n)];
    f(n, layout.root_rot_vel().offset) = p.rot_vel;
    f(n, layout.root_lin_vel().offset) = p.lin_vel_x;
    f(n, layout.root_lin_vel().offset + 1) = p.lin_vel_z;
    f(n, layout.root_height().offset) = p.height;
    for (int j = 1; j < kSkeletonJoints; ++j) write_rotation(f, n, layout, j, p.swing[j], p.abduction[j]);
    const int contacts = layout.foot_contacts().offset;
    int slot = 0;
    for (int leg : {joint::kLeftLeg, joint::kRightLeg}) {
      const double foot = p.height + f(n, layout.position_col(leg, 1));
      f(n, contacts + slot++) = contact(foot);          // heel
      f(n, contacts + slot++) = contact(foot - 0.02);   // toe
    }
  }
  // Velocities: forward difference, last frame repeats the previous one.
  for (Eigen::Index n = 0; n < count; ++n) {
    const Eigen::Index next = n + 1 < count ? n + 1 : n;
    const Eigen::Index prev = n + 1 < count ? n : std::max<Eigen::Index>(n - 1, 0);
    const KinematicPose& p = poses[static_cast<std::size_t>(n)];
    f(n, layout.velocity_col(0, 0)) = p.lin_vel_x;
    f(n, layout.velocity_col(0, 1)) =
        f(next, layout.root_height().offset) - f(prev, layout.root_height().offset);
    f(n, layout.velocity_col(0, 2)) = p.lin_vel_z;
    for (int j = 1; j < kSkeletonJoints; ++j) {
      for (int a = 0; a < 3; ++a) {
        f(n, layout.velocity_col(j, a)) = f(next, layout.position_col(j, a)) - f(prev, layout.position_col(j, a));
      }
    }
  }
  return f;
}

// Per-sample style jitter in [-1, 1].
struct Jitter {
  double amplitude;
  double phase;
};

Jitter jitter_for(const std::string& label, std::uint64_t seed) {
  Rng rng(splitmix(seed ^ fnv1a(label)));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Jitter j{};
  j.amplitude = u(rng);
  j.phase = u(rng);
  return j;
}

KinematicPose walk_pose(int n, const Jitter& jit) {
  const double amp = 1.0 + 0.05 * jit.amplitude;
  const double phase = 2.0 * kPi * n / 20.0 + 0.15 * jit.phase;
  const double s = std::sin(phase);
  KinematicPose p;
  p.lin_vel_z = 0.06 * amp;
  p.height = 0.88 + 0.015 * std::cos(2.0 * phase);
  p.swing[joint::kLeftLeg] = -0.45 * amp * s;
  p.swing[joint::kRightLeg] = 0.45 * amp * s;
  p.swing[joint::kLeftArm] = 0.3 * amp * s;
  p.swing[joint::kRightArm] = -0.3 * amp * s;
  p.abduction[joint::kLeftLeg] = 0.05;
  p.abduction[joint::kRightLeg] = -0.05;
  p.abduction[joint::kLeftArm] = 0.15;
  p.abduction[joint::kRightArm] = -0.15;
  return p;
}

KinematicPose jump_pose(int n, const Jitter& jit) {
  const double amp = 1.0 + 0.05 * jit.amplitude;
  const double shift = 1.0 * jit.phase;
  const double takeoff = 12.0 + shift;
  const double flight = 16.0;
  const double u = (n - takeoff) / flight;
  KinematicPose p;
  p.lin_vel_z = 0.01 * amp;
  const double crouch = smooth_bump(n, 6.0 + shift, 2.5) + smooth_bump(n, takeoff + flight + 5.0, 2.5);
  const double air = (u > 0.0 && u < 1.0) ? std::sin(kPi * u) : 0.0;
  const double arc = (u > 0.0 && u < 1.0) ? 4.0 * u * (1.0 - u) : 0.0;
  p.height = kStandHeight - 0.2 * crouch + 0.5 * amp * arc;
  p.swing[joint::kLeftLeg] = -0.5 * amp * air - 0.4 * crouch;
  p.swing[joint::kRightLeg] = -0.5 * amp * air - 0.4 * crouch;
  p.swing[joint::kLeftArm] = -2.0 * amp * air + 0.6 * crouch;
  p.swing[joint::kRightArm] = -2.0 * amp * air + 0.6 * crouch;
  p.abduction[joint::kLeftLeg] = 0.05;
  p.abduction[joint::kRightLeg] = -0.05;
  p.abduction[joint::kLeftArm] = 0.2;
  p.abduction[joint::kRightArm] = -0.2;
  return p;
}

KinematicPose kick_pose(int n, const Jitter& jit) {
  const double amp = 1.0 + 0.05 * jit.amplitude;
  const double g = smooth_bump(n, 20.0 + 1.0 * jit.phase, 4.0);
  KinematicPose p;
  p.lin_vel_z = 0.01;
  p.height = kStandHeight - 0.03 * g;
  p.swing[joint::kRightLeg] = -1.3 * amp * g;
  p.swing[joint::kLeftLeg] = 0.15 * g;
  p.swing[joint::kLeftArm] = -0.6 * amp * g;
  p.swing[joint::kRightArm] = 0.4 * amp * g;
  p.abduction[joint::kLeftLeg] = 0.05;
  p.abduction[joint::kRightLeg] = -0.05;
  p.abduction[joint::kLeftArm] = 0.3 * g + 0.15;
  p.abduction[joint::kRightArm] = -0.15;
  return p;
}

KinematicPose squat_pose(int n, int frames, const Jitter& jit) {
  const double amp = 1.0 + 0.05 * jit.amplitude;
  const double d = 0.5 * (1.0 - std::cos(2.0 * kPi * (n + 1.0 * jit.phase) / frames));
  KinematicPose p;
  p.height = kStandHeight - 0.35 * amp * d;
  p.swing[joint::kLeftLeg] = -0.8 * amp * d;
  p.swing[joint::kRightLeg] = -0.8 * amp * d;
  p.swing[joint::kLeftArm] = -1.4 * amp * d;
  p.swing[joint::kRightArm] = -1.4 * amp * d;
  p.abduction[joint::kLeftLeg] = 0.1;
  p.abduction[joint::kRightLeg] = -0.1;
  p.abduction[joint::kLeftArm] = 0.1;
  p.abduction[joint::kRightArm] = -0.1;
  return p;
}

void require_default_skeleton(int joints) {
  if (joints != kSkeletonJoints) {
    throw Error(ErrorCode::InvalidLayout, "synthetic generators use the " +
                                              std::to_string(kSkeletonJoints) + "-joint skeleton, got J=" +
                                              std::to_string(joints));
  }
}

nlohmann::json spec_to_json(const CorpusSpec& spec) {
  return {{"labels", spec.labels},    {"samples_per_label", spec.samples_per_label},
          {"frames", spec.frames},    {"fps", spec.fps},
          {"joints", spec.joints},    {"seed", spec.seed}};
}

}  // namespace

void CorpusSpec::validate() const {
  if (labels.empty()) throw Error(ErrorCode::InvalidConfig, "corpus needs at least one label");
  std::set<std::string> seen;
  for (const auto& l : labels) {
    if (l.empty()) throw Error(ErrorCode::InvalidConfig, "labels must be non-empty");
    if (!seen.insert(l).second) throw Error(ErrorCode::InvalidConfig, "duplicate label '" + l + "'");
  }
  if (samples_per_label < 1 || frames < 2 || !(fps > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "corpus sizes and fps must be positive");
  }
  require_default_skeleton(joints);
}

Motion gen_motion(const std::string& label, std::uint64_t seed, const CorpusSpec& spec) {
  require_default_skeleton(spec.joints);
  if (std::find(spec.labels.begin(), spec.labels.end(), label) == spec.labels.end()) {
    throw Error(ErrorCode::UnknownLabel, "label '" + label + "' is not part of the corpus spec");
  }
  const Jitter jit = jitter_for(label, seed);
  std::vector<KinematicPose> poses;
  poses.reserve(static_cast<std::size_t>(spec.frames));
  for (int n = 0; n < spec.frames; ++n) {
    if (label == "walk") {
      poses.push_back(walk_pose(n, jit));
    } else if (label == "jump") {
      poses.push_back(jump_pose(n, jit));
    } else if (label == "kick") {
      poses.push_back(kick_pose(n, jit));
    } else if (label == "squat") {
      poses.push_back(squat_pose(n, spec.frames, jit));
    } else {
      throw Error(ErrorCode::UnknownLabel, "no generator for label '" + label + "'");
    }
  }
  FeatureLayout layout(spec.joints);
  return Motion(spec.fps, layout, render(poses, layout), label);
}

Motion gen_edit_inputs(const std::string& kind, const CorpusSpec& spec) {
  require_default_skeleton(spec.joints);
  FeatureLayout layout(spec.joints);
  std::vector<KinematicPose> poses;
  if (kind == "legs_spread_pose") {
    KinematicPose p;
    p.height = 1.3;
    p.abduction[joint::kLeftLeg] = 0.7;
    p.abduction[joint::kRightLeg] = -0.7;
    p.abduction[joint::kLeftArm] = 1.3;
    p.abduction[joint::kRightArm] = -1.3;
    poses.push_back(p);
  } else if (kind == "lunge_pose") {
    KinematicPose p;
    p.height = 0.65;
    p.swing[joint::kLeftLeg] = -0.9;
    p.swing[joint::kRightLeg] = 0.6;
    p.swing[joint::kLeftArm] = 0.3;
    p.swing[joint::kRightArm] = -0.3;
    p.abduction[joint::kLeftLeg] = 0.05;
    p.abduction[joint::kRightLeg] = -0.05;
    p.abduction[joint::kLeftArm] = 0.15;
    p.abduction[joint::kRightArm] = -0.15;
    poses.push_back(p);
  } else if (kind == "high_kick_pose") {
    KinematicPose p;
    p.swing[joint::kRightLeg] = -1.5;
    p.swing[joint::kLeftArm] = -0.8;
    p.swing[joint::kRightArm] = 0.5;
    p.abduction[joint::kLeftLeg] = 0.05;
    p.abduction[joint::kRightLeg] = -0.05;
    p.abduction[joint::kLeftArm] = 0.5;
    p.abduction[joint::kRightArm] = -0.15;
    poses.push_back(p);
  } else if (kind == "march_clip") {
    for (int n = 0; n < 20; ++n) {
      const double s = std::sin(2.0 * kPi * n / 10.0);
      KinematicPose p;
      p.lin_vel_z = 0.04;
      p.height = kStandHeight + 0.02 * std::cos(4.0 * kPi * n / 10.0);
      p.swing[joint::kLeftLeg] = -0.75 * s;
      p.swing[joint::kRightLeg] = 0.75 * s;
      p.swing[joint::kLeftArm] = 0.6 * s;
      p.swing[joint::kRightArm] = -0.6 * s;
      p.abduction[joint::kLeftLeg] = 0.05;
      p.abduction[joint::kRightLeg] = -0.05;
      p.abduction[joint::kLeftArm] = 0.15;
      p.abduction[joint::kRightArm] = -0.15;
      poses.push_back(p);
    }
  } else {
    throw Error(ErrorCode::UnknownLabel, "unknown edit input kind '" + kind + "'");
  }
  return Motion(spec.fps, layout, render(poses, layout), kind);
}

std::uint64_t corpus_sample_seed(std::uint64_t corpus_seed, std::size_t label_index, int sample) {
  return splitmix(splitmix(corpus_seed) ^ (static_cast<std::uint64_t>(label_index) << 32) ^
                  static_cast<std::uint64_t>(sample));
}

std::vector<LabeledMotion> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  std::vector<LabeledMotion> out;
  out.reserve(spec.labels.size() * static_cast<std::size_t>(spec.samples_per_label));
  for (std::size_t l = 0; l < spec.labels.size(); ++l) {
    for (int i = 0; i < spec.samples_per_label; ++i) {
      const std::uint64_t seed = corpus_sample_seed(spec.seed, l, i);
      out.push_back({gen_motion(spec.labels[l], seed, spec), spec.labels[l], seed});
    }
  }
  return out;
}

namespace {

std::string sample_filename(const std::string& label, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%03d.mjson", index);
  return label + buf;
}

}  // namespace

std::vector<LabeledMotion> build_corpus(const CorpusSpec& spec, const std::filesystem::path& dir) {
  std::vector<LabeledMotion> corpus = generate_corpus(spec);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::Io, "cannot create corpus directory " + dir.string());
  }
  nlohmann::json manifest;
  manifest["spec"] = spec_to_json(spec);
  manifest["entries"] = nlohmann::json::array();
  std::size_t k = 0;
  for (std::size_t l = 0; l < spec.labels.size(); ++l) {
    for (int i = 0; i < spec.samples_per_label; ++i, ++k) {
      const std::string name = sample_filename(spec.labels[l], i);
      save_motion(corpus[k].motion, dir / name);
      manifest["entries"].push_back({{"file", name}, {"label", spec.labels[l]}, {"seed", corpus[k].seed}});
    }
  }
  std::ofstream out(dir / kManifestName, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
  return corpus;
}

std::vector<LabeledMotion> load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "no corpus manifest at " + (dir / kManifestName).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    std::vector<LabeledMotion> out;
    for (const auto& entry : manifest.at("entries")) {
      out.push_back({load_motion(dir / entry.at("file").get<std::string>()),
                     entry.at("label").get<std::string>(), entry.at("seed").get<std::uint64_t>()});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedFile, std::string("corpus manifest is malformed: ") + e.what());
  }
}

std::vector<LabeledFrames> to_training_set(const std::vector<LabeledMotion>& corpus) {
  std::vector<LabeledFrames> out;
  out.reserve(corpus.size());
  for (const auto& item : corpus) out.push_back({item.motion.frames(), item.label});
  return out;
}

}  // namespace medit
