#pragma once

#include "medit/denoiser.hpp"
#include "medit/motion.hpp"
#include "medit/schedule.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace medit {

enum class Scenario { Global, Local };
enum class InputKind { StaticPose, Clip };

std::string_view to_string(Scenario s);
std::string_view to_string(InputKind k);
Scenario parse_scenario(std::string_view s);
InputKind parse_input_kind(std::string_view s);

/// Hyper-parameters of one edit. Frame indices are 0-based.
struct EditConfig {
  Scenario scenario = Scenario::Local;
  InputKind input_kind = InputKind::StaticPose;
  int insert_at = 0;            // clip insertion frame
  std::vector<int> pose_steps;  // frames that receive the static pose
  int main_step = 0;            // up-weighted frame
  int pad = 0;                  // boundary frames freed on each side
  double v = 5.0;               // main-step weight, must exceed 1
  double rho = 0.5;             // base-preservation weight
  double base_train_prob = 0.5; // chance of adding the base term per stage-2 iteration
  double eta = 1.0;
  int iters_stage1 = 500;
  int iters_stage2 = 500;
  double lr_stage1 = 1e-3;
  double lr_stage2 = 1e-6;
  std::uint64_t seed = 0;

  /// Throws InvalidConfig naming the first violated invariant.
  void validate(int base_frames, int input_frames) const;
};

struct Combination {
  Motion combined;
  MaskMatrix mask;
};

/// Tiles a single-frame pose over `steps` and keeps the base elsewhere.
Combination combine_static_pose(const Motion& base, const Motion& pose, const std::vector<int>& steps);

/// Global: the clip itself. Local: clip rows placed at [insert_at, insert_at + N_I).
Combination combine_clip(const Motion& base, const Motion& clip, int insert_at, Scenario scenario);

/// Frames given zero loss weight around the insertion, sorted and clamped to [0, base_frames).
std::vector<int> pad_set(const EditConfig& config, int base_frames, int input_frames = 1);

/// Entries in {0, 1, v}; pad frames win over the main-step rule.
Frames build_weights(const EditConfig& config, const FeatureLayout& layout, int base_frames,
                     int input_frames = 1);

Eigen::VectorXd interpolate_embedding(const Eigen::VectorXd& e_opt, const Eigen::VectorXd& e_base,
                                      double eta);

enum class Stage { Created, Stage1Running, Stage1Done, Stage2Running, Ready, Failed };
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

/// State of one edit across the two training stages and inference.
struct EditSession {
  EditConfig config;
  Motion base;
  std::string base_label;
  Motion input;
  Motion combined;
  Frames weights;
  Eigen::VectorXd e_base;
  Eigen::VectorXd e_opt;
  DenoiserModel model;  // pretrained on creation, fine-tuned after stage 2
  EmbeddingTable embeddings;
  Stage stage = Stage::Created;
  std::vector<double> stage1_loss;
  std::vector<double> stage2_loss;           // total objective
  std::vector<double> stage2_combined_loss;  // weighted combined-motion term only
  std::optional<std::string> failure;

  /// Monotone transition; anything may move to Failed.
  void advance(Stage next);
};

/// Validates the config, combines the motions and builds the weights.
EditSession create_session(const Motion& base, const std::string& base_label, const Motion& input,
                           const EditConfig& config, const DenoiserModel& model,
                           const EmbeddingTable& embeddings);

/// Stage 1: optimize the conditioning vector against the combined motion with
/// the model frozen.
void optimize_embedding(EditSession& session, const NoiseSchedule& schedule,
                        const ProgressCallback& progress = {});

/// Stage 2: fine-tune the model on the combined motion under e_opt, with a
/// base-motion term under e_base added with probability base_train_prob.
void finetune_model(EditSession& session, const NoiseSchedule& schedule,
                    const ProgressCallback& progress = {});

Motion generate(const EditSession& session, double eta, std::uint64_t seed, const NoiseSchedule& schedule);

// Session file: the model checkpoint, e_base and e_opt as f64, then a u64
// byte length and a JSON block with motions, weights, config and traces.
void write_session(std::ostream& out, const EditSession& session);
EditSession read_session(std::istream& in);
void save_session(const std::filesystem::path& path, const EditSession& session);
EditSession load_session(const std::filesystem::path& path);

}  // namespace medit
