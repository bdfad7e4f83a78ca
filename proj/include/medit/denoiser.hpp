#pragma once

#include "medit/motion.hpp"
#include "medit/schedule.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace medit {

inline constexpr int kTimeEmbedDim = 32;

struct DenoiserDims {
  int frames = 40;
  int frame_dim = 59;
  int embed_dim = 32;
  int hidden1 = 512;
  int hidden2 = 512;
  // Diffusion steps the model was trained for; carried in checkpoints.
  int diffusion_steps = kDefaultSteps;

  int input_dim() const { return frames * frame_dim + kTimeEmbedDim + embed_dim; }
  int output_dim() const { return frames * frame_dim; }
  Eigen::Index parameter_count() const;

  bool operator==(const DenoiserDims&) const = default;
};

/// Interleaved sin/cos features of the step index, width kTimeEmbedDim.
Eigen::VectorXd sinusoidal_time_embedding(int t);

/// x0-predicting MLP: flatten(x_t) ++ time features ++ embedding, two tanh
/// hidden layers, linear output reshaped to N x D.
///
/// All parameters live in one flat vector, layer by layer:
/// W1, b1, W2, b2, W3, b3 with weights stored row-major (out x in). The
/// checkpoint format and the optimizer rely on this order.
class DenoiserModel {
 public:
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

  /// All-zero parameters.
  explicit DenoiserModel(const DenoiserDims& dims);
  DenoiserModel(const DenoiserDims& dims, Eigen::VectorXd parameters);

  /// Glorot-uniform weights, zero biases.
  static DenoiserModel initialized(const DenoiserDims& dims, std::uint64_t seed);

  const DenoiserDims& dims() const { return dims_; }
  const Eigen::VectorXd& parameters() const { return theta_; }
  Eigen::VectorXd& mutable_parameters() { return theta_; }

  ConstMatrixMap w1() const;
  ConstVectorMap b1() const;
  ConstMatrixMap w2() const;
  ConstVectorMap b2() const;
  ConstMatrixMap w3() const;
  ConstVectorMap b3() const;

  Frames forward(const Frames& x_t, int t, const Eigen::VectorXd& embedding) const;

 private:
  DenoiserDims dims_;
  Eigen::VectorXd theta_;
};

/// Label -> conditioning vector. Stand-in for a text encoder.
class EmbeddingTable {
 public:
  explicit EmbeddingTable(int embed_dim) : embed_dim_(embed_dim) {}

  static EmbeddingTable random(const std::vector<std::string>& labels, int embed_dim,
                               std::uint64_t seed);

  int embed_dim() const { return embed_dim_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& label) const { return entries_.count(label) != 0; }
  const Eigen::VectorXd& at(const std::string& label) const;
  void set(const std::string& label, Eigen::VectorXd embedding);
  std::vector<std::string> labels() const;

  // Concatenation in label order; used to optimize the table as one vector.
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);

  bool operator==(const EmbeddingTable&) const;

 private:
  int embed_dim_;
  std::map<std::string, Eigen::VectorXd> entries_;
};

/// One term of the denoising objective with its noise already drawn.
struct DiffusionSample {
  Frames x0;
  Eigen::VectorXd embedding;
  std::optional<Frames> weight;  // unweighted when empty
  double scale = 1.0;
  int t = 1;
  Frames eps;
};

struct GradientRequest {
  bool parameters = true;
  bool embeddings = false;
};

struct LossAndGrads {
  double loss = 0.0;
  Eigen::VectorXd parameter_grads;               // empty unless requested
  std::vector<Eigen::VectorXd> embedding_grads;  // one per sample, if requested
};

/// loss = sum_k scale_k * mean_ij(W_k .* (x0_k - f(x_t_k, t_k, e_k))^2), with
/// the mean taken over all N*D entries. Gradients are exact.
LossAndGrads diffusion_loss(const DenoiserModel& model, std::span<const DiffusionSample> batch,
                            const NoiseSchedule& schedule, GradientRequest request = {});

/// Draws t ~ U{1..T} then eps ~ N(0, I) (row-major order).
void draw_noise(DiffusionSample& sample, const NoiseSchedule& schedule, Rng& rng);

struct LabeledFrames {
  Frames x0;
  std::string label;
};

/// Minibatch objective with fresh (t, eps) per sample; embeddings come from
/// the table. The batch mean is the loss. Throws Divergence on a non-finite
/// loss.
LossAndGrads loss_and_grads(const DenoiserModel& model, std::span<const LabeledFrames> batch,
                            const EmbeddingTable& embeddings, const NoiseSchedule& schedule,
                            Rng& rng, const Frames* weight = nullptr,
                            GradientRequest request = {});

struct OptimizerState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  OptimizerState(Eigen::Index size, double learning_rate);

  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;
  long step = 0;
  double learning_rate;
};

/// Bias-corrected adaptive-moment update in place.
void optimizer_step(OptimizerState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads);

struct PretrainOptions {
  int steps = 2000;
  double learning_rate = 1e-3;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  DenoiserModel model;
  EmbeddingTable embeddings;
  std::vector<double> loss_trace;
};

using ProgressCallback = std::function<void(int iteration, int total, double loss)>;

PretrainResult pretrain(std::span<const LabeledFrames> dataset, DenoiserModel model,
                        EmbeddingTable embeddings, const NoiseSchedule& schedule,
                        const PretrainOptions& options, const ProgressCallback& progress = {});

/// Runs the ancestral sampler with the model conditioned on `embedding`.
Frames sample(const DenoiserModel& model, const Eigen::VectorXd& embedding,
              const NoiseSchedule& schedule, Rng& rng);

/// Trailing moving average; entry i averages trace[max(0, i-window+1) .. i].
std::vector<double> moving_average(std::span<const double> trace, std::size_t window);

// Binary checkpoint: "MEDT", u32 version, N D E H1 H2 T (u32), the flat
// parameter vector (f64), then the embedding table. Little-endian.
inline constexpr char kCheckpointMagic[4] = {'M', 'E', 'D', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DenoiserModel model;
  EmbeddingTable embeddings;
};

void write_checkpoint(std::ostream& out, const DenoiserModel& model, const EmbeddingTable& embeddings);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model,
                     const EmbeddingTable& embeddings);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Schedule a checkpoint was trained with (linear, default beta range).
NoiseSchedule schedule_for(const DenoiserModel& model);

}  // namespace medit
