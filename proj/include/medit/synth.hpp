#pragma once

#include "medit/denoiser.hpp"
#include "medit/motion.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace medit {

// Joint ids of the default five-joint skeleton; 0 is the root.
namespace joint {
inline constexpr int kLeftArm = 1;
inline constexpr int kRightArm = 2;
inline constexpr int kLeftLeg = 3;
inline constexpr int kRightLeg = 4;
}  // namespace joint

struct CorpusSpec {
  std::vector<std::string> labels{"walk", "jump", "kick", "squat"};
  int samples_per_label = 64;
  int frames = 40;
  double fps = 20.0;
  int joints = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LabeledMotion {
  Motion motion;
  std::string label;
  std::uint64_t seed;
};

/// Procedural motion for a class label. Pure in (label, seed, spec).
Motion gen_motion(const std::string& label, std::uint64_t seed, const CorpusSpec& spec);

inline const std::vector<std::string> kEditInputKinds{"legs_spread_pose", "march_clip", "lunge_pose",
                                                      "high_kick_pose"};

/// Authored edit inputs: "*_pose" kinds are single frames, "march_clip" is 20 frames.
Motion gen_edit_inputs(const std::string& kind, const CorpusSpec& spec);

/// Per-sample seed used by the corpus for (label index, sample index).
std::uint64_t corpus_sample_seed(std::uint64_t corpus_seed, std::size_t label_index, int sample);

std::vector<LabeledMotion> generate_corpus(const CorpusSpec& spec);

/// Writes one motion file per sample plus manifest.json; returns the samples.
std::vector<LabeledMotion> build_corpus(const CorpusSpec& spec, const std::filesystem::path& dir);

inline constexpr const char* kManifestName = "manifest.json";

/// Reads a corpus directory written by build_corpus.
std::vector<LabeledMotion> load_corpus(const std::filesystem::path& dir);

std::vector<LabeledFrames> to_training_set(const std::vector<LabeledMotion>& corpus);

}  // namespace medit
