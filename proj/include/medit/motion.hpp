#pragma once

#include <Eigen/Core>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace medit {

// N x D, frame-major so a whole sequence flattens without copying.
using Frames = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::string_view kLayoutName = "hml-reduced-v1";
inline constexpr int kMotionFileVersion = 1;

struct Block {
  std::string_view name;
  int offset = 0;
  int length = 0;

  int end() const { return offset + length; }
};

/// Per-frame feature layout of the reduced HumanML3D-style representation.
///
/// Blocks, in order: root_rot_vel(1), root_lin_vel(2), root_height(1),
/// joint_positions(3(J-1)), joint_rotations(6(J-1)), joint_velocities(3J),
/// foot_contacts(4). Joint positions and rotations exclude the root.
class FeatureLayout {
 public:
  static constexpr int kBlockCount = 7;

  explicit FeatureLayout(int joints);

  int joints() const { return joints_; }
  int frame_dim() const { return frame_dim_; }
  const std::array<Block, kBlockCount>& blocks() const { return blocks_; }

  const Block& root_rot_vel() const { return blocks_[0]; }
  const Block& root_lin_vel() const { return blocks_[1]; }
  const Block& root_height() const { return blocks_[2]; }
  const Block& joint_positions() const { return blocks_[3]; }
  const Block& joint_rotations() const { return blocks_[4]; }
  const Block& joint_velocities() const { return blocks_[5]; }
  const Block& foot_contacts() const { return blocks_[6]; }

  // Column of coordinate `axis` of non-root joint `joint` (1-based joint id).
  int position_col(int joint, int axis) const;
  int rotation_col(int joint, int component) const;
  // Velocity block covers all joints including the root (joint 0).
  int velocity_col(int joint, int axis) const;

  bool operator==(const FeatureLayout& other) const { return joints_ == other.joints_; }

 private:
  int joints_;
  int frame_dim_;
  std::array<Block, kBlockCount> blocks_;
};

/// D for a J-joint skeleton. Throws InvalidLayout for J < 2.
int layout_dims(int joints);

/// Feature columns treated as rotational: root_rot_vel plus every joint
/// rotation column. Sorted, no duplicates.
std::vector<int> rotation_indices(const FeatureLayout& layout);

class Motion {
 public:
  Motion(double fps, FeatureLayout layout, Frames frames, std::optional<std::string> label = {});

  double fps() const { return fps_; }
  const FeatureLayout& layout() const { return layout_; }
  const Frames& frames() const { return frames_; }
  const std::optional<std::string>& label() const { return label_; }
  Eigen::Index frame_count() const { return frames_.rows(); }

  Motion with_frames(Frames frames) const;

  bool operator==(const Motion& other) const;

 private:
  double fps_;
  FeatureLayout layout_;
  Frames frames_;
  std::optional<std::string> label_;
};

// Entries in {0, 1}; shape matches the masked motion.
using MaskMatrix = Frames;

struct WorldPose {
  // J x 3, joint 0 is the root.
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> positions;
};

std::string motion_to_text(const Motion& motion);
Motion motion_from_text(std::string_view text);

Motion load_motion(const std::filesystem::path& path);
void save_motion(const Motion& motion, const std::filesystem::path& path);

/// Recovers world-space joints. Yaw accumulates root_rot_vel of earlier
/// frames; root xz integrates root_lin_vel (x, z) rotated by the yaw of the
/// frame it belongs to; non-root joints are root-relative offsets rotated
/// by the current yaw.
std::vector<WorldPose> to_world_positions(const Motion& motion);

}  // namespace medit
