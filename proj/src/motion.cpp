#include "medit/motion.hpp"

#include "medit/error.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace medit {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidLayout: return "invalid-layout";
    case ErrorCode::LayoutMismatch: return "layout-mismatch";
    case ErrorCode::NonFiniteValue: return "non-finite-value";
    case ErrorCode::MalformedFile: return "malformed-file";
    case ErrorCode::ShapeMismatch: return "shape-mismatch";
    case ErrorCode::OutOfRange: return "out-of-range";
    case ErrorCode::InvalidConfig: return "invalid-config";
    case ErrorCode::InvalidState: return "invalid-state";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::UnknownLabel: return "unknown-label";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

int layout_dims(int joints) {
  if (joints < 2) {
    throw Error(ErrorCode::InvalidLayout,
                "layout needs at least 2 joints, got " + std::to_string(joints));
  }
  return 4 + 3 * (joints - 1) + 6 * (joints - 1) + 3 * joints + 4;
}

FeatureLayout::FeatureLayout(int joints) : joints_(joints), frame_dim_(layout_dims(joints)) {
  const std::array<std::pair<std::string_view, int>, kBlockCount> lengths = {{
      {"root_rot_vel", 1},
      {"root_lin_vel", 2},
      {"root_height", 1},
      {"joint_positions", 3 * (joints - 1)},
      {"joint_rotations", 6 * (joints - 1)},
      {"joint_velocities", 3 * joints},
      {"foot_contacts", 4},
  }};
  int offset = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    blocks_[i] = Block{lengths[i].first, offset, lengths[i].second};
    offset += lengths[i].second;
  }
}

int FeatureLayout::position_col(int joint, int axis) const {
  return joint_positions().offset + 3 * (joint - 1) + axis;
}

int FeatureLayout::rotation_col(int joint, int component) const {
  return joint_rotations().offset + 6 * (joint - 1) + component;
}

int FeatureLayout::velocity_col(int joint, int axis) const {
  return joint_velocities().offset + 3 * joint + axis;
}

std::vector<int> rotation_indices(const FeatureLayout& layout) {
  std::vector<int> out;
  out.reserve(1 + layout.joint_rotations().length);
  out.push_back(layout.root_rot_vel().offset);
  for (int c = layout.joint_rotations().offset; c < layout.joint_rotations().end(); ++c) {
    out.push_back(c);
  }
  return out;
}

Motion::Motion(double fps, FeatureLayout layout, Frames frames, std::optional<std::string> label)
    : fps_(fps), layout_(layout), frames_(std::move(frames)), label_(std::move(label)) {
  if (!(fps_ > 0.0) || !std::isfinite(fps_)) {
    throw Error(ErrorCode::OutOfRange, "fps must be positive");
  }
  if (frames_.rows() < 1) {
    throw Error(ErrorCode::ShapeMismatch, "motion needs at least one frame");
  }
  if (frames_.cols() != layout_.frame_dim()) {
    throw Error(ErrorCode::LayoutMismatch,
                "frame width " + std::to_string(frames_.cols()) + " does not match D=" +
                    std::to_string(layout_.frame_dim()) + " for J=" +
                    std::to_string(layout_.joints()));
  }
  if (!frames_.allFinite()) {
    throw Error(ErrorCode::NonFiniteValue, "motion contains non-finite values");
  }
}

Motion Motion::with_frames(Frames frames) const {
  return Motion(fps_, layout_, std::move(frames), label_);
}

bool Motion::operator==(const Motion& other) const {
  return fps_ == other.fps_ && layout_ == other.layout_ && label_ == other.label_ &&
         frames_.rows() == other.frames_.rows() && frames_ == other.frames_;
}

namespace {

void append_number(std::string& out, double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  out += buf;
}

}  // namespace

std::string motion_to_text(const Motion& motion) {
  std::string out = "{\n";
  out += "  \"version\": " + std::to_string(kMotionFileVersion) + ",\n";
  out += "  \"fps\": ";
  append_number(out, motion.fps());
  out += ",\n  \"joints\": " + std::to_string(motion.layout().joints()) + ",\n";
  out += "  \"layout\": \"" + std::string(kLayoutName) + "\",\n";
  if (motion.label()) {
    out += "  \"label\": " + nlohmann::json(*motion.label()).dump() + ",\n";
  }
  out += "  \"frames\": [\n";
  const Frames& f = motion.frames();
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    out += "    [";
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
      if (j) out += ", ";
      append_number(out, f(i, j));
    }
    out += i + 1 < f.rows() ? "],\n" : "]\n";
  }
  out += "  ]\n}\n";
  return out;
}

Motion motion_from_text(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::MalformedFile, std::string("motion file is not valid: ") + e.what());
  }
  auto require = [&](const char* key) -> const nlohmann::json& {
    if (!doc.is_object() || !doc.contains(key)) {
      throw Error(ErrorCode::MalformedFile, std::string("motion file missing field '") + key + "'");
    }
    return doc.at(key);
  };
  try {
    if (require("version").get<int>() != kMotionFileVersion) {
      throw Error(ErrorCode::MalformedFile, "unsupported motion file version");
    }
    if (require("layout").get<std::string>() != kLayoutName) {
      throw Error(ErrorCode::MalformedFile, "unsupported layout name");
    }
    const double fps = require("fps").get<double>();
    FeatureLayout layout(require("joints").get<int>());
    std::optional<std::string> label;
    if (doc.contains("label") && !doc.at("label").is_null()) {
      label = doc.at("label").get<std::string>();
    }
    const auto& rows = require("frames");
    if (!rows.is_array() || rows.empty()) {
      throw Error(ErrorCode::MalformedFile, "frames must be a non-empty array");
    }
    Frames frames(static_cast<Eigen::Index>(rows.size()), layout.frame_dim());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& row = rows[i];
      if (!row.is_array()) throw Error(ErrorCode::MalformedFile, "frame is not an array");
      if (static_cast<int>(row.size()) != layout.frame_dim()) {
        throw Error(ErrorCode::LayoutMismatch,
                    "frame " + std::to_string(i) + " has width " + std::to_string(row.size()) +
                        ", layout J=" + std::to_string(layout.joints()) + " needs " +
                        std::to_string(layout.frame_dim()));
      }
      for (std::size_t j = 0; j < row.size(); ++j) {
        // NaN/Inf are written as null or bare tokens by foreign tools.
        if (!row[j].is_number()) {
          throw Error(ErrorCode::NonFiniteValue,
                      "non-numeric entry at frame " + std::to_string(i) + ", column " + std::to_string(j));
        }
        frames(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j].get<double>();
      }
    }
    return Motion(fps, layout, std::move(frames), std::move(label));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedFile, std::string("motion file has wrong field types: ") + e.what());
  }
}

Motion load_motion(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open motion file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return motion_from_text(buf.str());
}

void save_motion(const Motion& motion, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write motion file " + path.string());
  out << motion_to_text(motion);
  if (!out) throw Error(ErrorCode::Io, "failed writing motion file " + path.string());
}

std::vector<WorldPose> to_world_positions(const Motion& motion) {
  const FeatureLayout& layout = motion.layout();
  const Frames& f = motion.frames();
  const int joints = layout.joints();
  const int rot = layout.root_rot_vel().offset;
  const int lin = layout.root_lin_vel().offset;
  const int height = layout.root_height().offset;

  std::vector<WorldPose> out;
  out.reserve(static_cast<std::size_t>(f.rows()));
  double yaw = 0.0;
  double root_x = 0.0;
  double root_z = 0.0;
  for (Eigen::Index n = 0; n < f.rows(); ++n) {
    const double c = std::cos(yaw);
    const double s = std::sin(yaw);
    WorldPose pose;
    pose.positions.resize(joints, 3);
    pose.positions.row(0) << root_x, f(n, height), root_z;
    for (int j = 1; j < joints; ++j) {
      const double x = f(n, layout.position_col(j, 0));
      const double y = f(n, layout.position_col(j, 1));
      const double z = f(n, layout.position_col(j, 2));
      pose.positions(j, 0) = root_x + c * x + s * z;
      pose.positions(j, 1) = f(n, height) + y;
      pose.positions(j, 2) = root_z - s * x + c * z;
    }
    out.push_back(std::move(pose));

    const double vx = f(n, lin);
    const double vz = f(n, lin + 1);
    root_x += c * vx + s * vz;
    root_z += -s * vx + c * vz;
    yaw += f(n, rot);
  }
  return out;
}

}  // namespace medit
