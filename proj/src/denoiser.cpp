#include "medit/denoiser.hpp"

#include "medit/binary_io.hpp"
#include "medit/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace medit {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LayerOffsets {
  Eigen::Index w1, b1, w2, b2, w3, b3, end;
};

LayerOffsets offsets_for(const DenoiserDims& d) {
  LayerOffsets o{};
  const Eigen::Index in = d.input_dim();
  const Eigen::Index out = d.output_dim();
  o.w1 = 0;
  o.b1 = o.w1 + Eigen::Index{d.hidden1} * in;
  o.w2 = o.b1 + d.hidden1;
  o.b2 = o.w2 + Eigen::Index{d.hidden2} * d.hidden1;
  o.w3 = o.b2 + d.hidden2;
  o.b3 = o.w3 + out * d.hidden2;
  o.end = o.b3 + out;
  return o;
}

void validate_dims(const DenoiserDims& d) {
  if (d.frames < 1 || d.frame_dim < 1 || d.embed_dim < 1 || d.hidden1 < 1 || d.hidden2 < 1 ||
      d.diffusion_steps < 1) {
    throw Error(ErrorCode::InvalidConfig, "denoiser dimensions must be positive");
  }
}

}  // namespace

Eigen::Index DenoiserDims::parameter_count() const { return offsets_for(*this).end; }

Eigen::VectorXd sinusoidal_time_embedding(int t) {
  constexpr int half = kTimeEmbedDim / 2;
  Eigen::VectorXd out(kTimeEmbedDim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out(2 * i) = std::sin(t * freq);
    out(2 * i + 1) = std::cos(t * freq);
  }
  return out;
}

DenoiserModel::DenoiserModel(const DenoiserDims& dims)
    : DenoiserModel(dims, Eigen::VectorXd::Zero(dims.parameter_count())) {}

DenoiserModel::DenoiserModel(const DenoiserDims& dims, Eigen::VectorXd parameters)
    : dims_(dims), theta_(std::move(parameters)) {
  validate_dims(dims_);
  if (theta_.size() != dims_.parameter_count()) {
    throw Error(ErrorCode::ShapeMismatch, "parameter vector does not match model dimensions");
  }
}

DenoiserModel DenoiserModel::initialized(const DenoiserDims& dims, std::uint64_t seed) {
  DenoiserModel model(dims);
  Rng rng(seed);
  const LayerOffsets o = offsets_for(dims);
  auto fill = [&](Eigen::Index begin, Eigen::Index count, int fan_in, int fan_out) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    for (Eigen::Index i = 0; i < count; ++i) model.theta_(begin + i) = uniform(rng);
  };
  fill(o.w1, o.b1 - o.w1, dims.input_dim(), dims.hidden1);
  fill(o.w2, o.b2 - o.w2, dims.hidden1, dims.hidden2);
  fill(o.w3, o.b3 - o.w3, dims.hidden2, dims.output_dim());
  return model;
}

DenoiserModel::ConstMatrixMap DenoiserModel::w1() const {
  const LayerOffsets o = offsets_for(dims_);
  return ConstMatrixMap(theta_.data() + o.w1, dims_.hidden1, dims_.input_dim());
}
DenoiserModel::ConstVectorMap DenoiserModel::b1() const {
  return ConstVectorMap(theta_.data() + offsets_for(dims_).b1, dims_.hidden1);
}
DenoiserModel::ConstMatrixMap DenoiserModel::w2() const {
  const LayerOffsets o = offsets_for(dims_);
  return ConstMatrixMap(theta_.data() + o.w2, dims_.hidden2, dims_.hidden1);
}
DenoiserModel::ConstVectorMap DenoiserModel::b2() const {
  return ConstVectorMap(theta_.data() + offsets_for(dims_).b2, dims_.hidden2);
}
DenoiserModel::ConstMatrixMap DenoiserModel::w3() const {
  const LayerOffsets o = offsets_for(dims_);
  return ConstMatrixMap(theta_.data() + o.w3, dims_.output_dim(), dims_.hidden2);
}
DenoiserModel::ConstVectorMap DenoiserModel::b3() const {
  return ConstVectorMap(theta_.data() + offsets_for(dims_).b3, dims_.output_dim());
}

namespace {

void check_input(const DenoiserDims& d, const Frames& x_t, const Eigen::VectorXd& embedding) {
  if (x_t.rows() != d.frames || x_t.cols() != d.frame_dim) {
    throw Error(ErrorCode::ShapeMismatch,
                "denoiser expects " + std::to_string(d.frames) + "x" + std::to_string(d.frame_dim) +
                    " input, got " + std::to_string(x_t.rows()) + "x" + std::to_string(x_t.cols()));
  }
  if (embedding.size() != d.embed_dim) {
    throw Error(ErrorCode::ShapeMismatch, "embedding has dimension " +
                                              std::to_string(embedding.size()) + ", model expects " +
                                              std::to_string(d.embed_dim));
  }
}

void assemble_input(const DenoiserDims& d, const Frames& x_t, int t, const Eigen::VectorXd& embedding,
                    Eigen::Ref<Eigen::VectorXd> column) {
  const Eigen::Index flat = d.output_dim();
  column.head(flat) = Eigen::Map<const Eigen::VectorXd>(x_t.data(), flat);
  column.segment(flat, kTimeEmbedDim) = sinusoidal_time_embedding(t);
  column.tail(d.embed_dim) = embedding;
}

}  // namespace

Frames DenoiserModel::forward(const Frames& x_t, int t, const Eigen::VectorXd& embedding) const {
  check_input(dims_, x_t, embedding);
  Eigen::VectorXd input(dims_.input_dim());
  assemble_input(dims_, x_t, t, embedding, input);
  const Eigen::VectorXd h1 = (w1() * input + b1()).array().tanh().matrix();
  const Eigen::VectorXd h2 = (w2() * h1 + b2()).array().tanh().matrix();
  const Eigen::VectorXd y = w3() * h2 + b3();
  return Eigen::Map<const Frames>(y.data(), dims_.frames, dims_.frame_dim);
}

EmbeddingTable EmbeddingTable::random(const std::vector<std::string>& labels, int embed_dim,
                                      std::uint64_t seed) {
  EmbeddingTable table(embed_dim);
  std::vector<std::string> sorted = labels;
  std::sort(sorted.begin(), sorted.end());
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& label : sorted) {
    Eigen::VectorXd e(embed_dim);
    for (int i = 0; i < embed_dim; ++i) e(i) = 0.1 * normal(rng);
    table.set(label, std::move(e));
  }
  return table;
}

const Eigen::VectorXd& EmbeddingTable::at(const std::string& label) const {
  auto it = entries_.find(label);
  if (it == entries_.end()) throw Error(ErrorCode::UnknownLabel, "no embedding for label '" + label + "'");
  return it->second;
}

void EmbeddingTable::set(const std::string& label, Eigen::VectorXd embedding) {
  if (embedding.size() != embed_dim_) {
    throw Error(ErrorCode::ShapeMismatch, "embedding for '" + label + "' has the wrong dimension");
  }
  entries_[label] = std::move(embedding);
}

std::vector<std::string> EmbeddingTable::labels() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [label, _] : entries_) out.push_back(label);
  return out;
}

Eigen::VectorXd EmbeddingTable::flatten() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(entries_.size()) * embed_dim_);
  Eigen::Index at = 0;
  for (const auto& [_, e] : entries_) {
    flat.segment(at, embed_dim_) = e;
    at += embed_dim_;
  }
  return flat;
}

void EmbeddingTable::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != static_cast<Eigen::Index>(entries_.size()) * embed_dim_) {
    throw Error(ErrorCode::ShapeMismatch, "flat embedding vector has the wrong size");
  }
  Eigen::Index at = 0;
  for (auto& [_, e] : entries_) {
    e = flat.segment(at, embed_dim_);
    at += embed_dim_;
  }
}

bool EmbeddingTable::operator==(const EmbeddingTable& other) const {
  return embed_dim_ == other.embed_dim_ && entries_ == other.entries_;
}

void draw_noise(DiffusionSample& sample, const NoiseSchedule& schedule, Rng& rng) {
  std::uniform_int_distribution<int> step(1, schedule.steps());
  sample.t = step(rng);
  sample.eps = standard_normal(sample.x0.rows(), sample.x0.cols(), rng);
}

LossAndGrads diffusion_loss(const DenoiserModel& model, std::span<const DiffusionSample> batch,
                            const NoiseSchedule& schedule, GradientRequest request) {
  if (batch.empty()) throw Error(ErrorCode::InvalidConfig, "loss needs a non-empty batch");
  const DenoiserDims& d = model.dims();
  const Eigen::Index count = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index flat = d.output_dim();
  const double per_entry = 1.0 / static_cast<double>(flat);

  RowMatrix inputs(d.input_dim(), count);
  RowMatrix targets(flat, count);
  RowMatrix weights = RowMatrix::Ones(flat, count);
  Eigen::VectorXd scales(count);
  for (Eigen::Index k = 0; k < count; ++k) {
    const DiffusionSample& s = batch[static_cast<std::size_t>(k)];
    check_input(d, s.x0, s.embedding);
    const Frames x_t = q_sample(s.x0, s.t, s.eps, schedule);
    Eigen::VectorXd column(d.input_dim());
    assemble_input(d, x_t, s.t, s.embedding, column);
    inputs.col(k) = column;
    targets.col(k) = Eigen::Map<const Eigen::VectorXd>(s.x0.data(), flat);
    if (s.weight) {
      if (s.weight->rows() != s.x0.rows() || s.weight->cols() != s.x0.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "weight matrix shape does not match frames");
      }
      weights.col(k) = Eigen::Map<const Eigen::VectorXd>(s.weight->data(), flat);
    }
    scales(k) = s.scale;
  }

  const RowMatrix h1 = ((model.w1() * inputs).colwise() + model.b1()).array().tanh().matrix();
  const RowMatrix h2 = ((model.w2() * h1).colwise() + model.b2()).array().tanh().matrix();
  const RowMatrix y = (model.w3() * h2).colwise() + model.b3();
  const RowMatrix residual = y - targets;

  LossAndGrads out;
  const RowMatrix weighted = weights.cwiseProduct(residual);
  out.loss = per_entry * (weighted.cwiseProduct(residual).colwise().sum().transpose().cwiseProduct(scales)).sum();

  if (!request.parameters && !request.embeddings) return out;

  // dL/dy = 2 * scale_k / (N D) * W .* residual
  const RowMatrix dy = weighted * (2.0 * per_entry * scales).asDiagonal();
  const RowMatrix dh2 = model.w3().transpose() * dy;
  const RowMatrix dz2 = dh2.cwiseProduct((1.0 - h2.array().square()).matrix());
  const RowMatrix dh1 = model.w2().transpose() * dz2;
  const RowMatrix dz1 = dh1.cwiseProduct((1.0 - h1.array().square()).matrix());

  if (request.parameters) {
    const LayerOffsets o = offsets_for(d);
    out.parameter_grads.resize(o.end);
    Eigen::VectorXd& g = out.parameter_grads;
    Eigen::Map<RowMatrix>(g.data() + o.w1, d.hidden1, d.input_dim()).noalias() = dz1 * inputs.transpose();
    g.segment(o.b1, d.hidden1) = dz1.rowwise().sum();
    Eigen::Map<RowMatrix>(g.data() + o.w2, d.hidden2, d.hidden1).noalias() = dz2 * h1.transpose();
    g.segment(o.b2, d.hidden2) = dz2.rowwise().sum();
    Eigen::Map<RowMatrix>(g.data() + o.w3, flat, d.hidden2).noalias() = dy * h2.transpose();
    g.segment(o.b3, flat) = dy.rowwise().sum();
  }
  if (request.embeddings) {
    const RowMatrix de = model.w1().rightCols(d.embed_dim).transpose() * dz1;
    out.embedding_grads.reserve(batch.size());
    for (Eigen::Index k = 0; k < count; ++k) out.embedding_grads.emplace_back(de.col(k));
  }
  return out;
}

LossAndGrads loss_and_grads(const DenoiserModel& model, std::span<const LabeledFrames> batch,
                            const EmbeddingTable& embeddings, const NoiseSchedule& schedule,
                            Rng& rng, const Frames* weight, GradientRequest request) {
  if (batch.empty()) throw Error(ErrorCode::InvalidConfig, "loss needs a non-empty batch");
  std::vector<DiffusionSample> samples;
  samples.reserve(batch.size());
  for (const auto& item : batch) {
    DiffusionSample s;
    s.x0 = item.x0;
    s.embedding = embeddings.at(item.label);
    if (weight) s.weight = *weight;
    s.scale = 1.0 / static_cast<double>(batch.size());
    draw_noise(s, schedule, rng);
    samples.push_back(std::move(s));
  }
  LossAndGrads out = diffusion_loss(model, samples, schedule, request);
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::Divergence, "loss is not finite");
  return out;
}

OptimizerState::OptimizerState(Eigen::Index size, double lr)
    : first_moment(Eigen::VectorXd::Zero(size)),
      second_moment(Eigen::VectorXd::Zero(size)),
      learning_rate(lr) {}

void optimizer_step(OptimizerState& state, Eigen::VectorXd& params, const Eigen::VectorXd& grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw Error(ErrorCode::ShapeMismatch, "optimizer state, parameters and gradients differ in size");
  }
  ++state.step;
  constexpr double b1 = OptimizerState::kBeta1;
  constexpr double b2 = OptimizerState::kBeta2;
  state.first_moment = b1 * state.first_moment + (1.0 - b1) * grads;
  state.second_moment = b2 * state.second_moment + (1.0 - b2) * grads.cwiseAbs2();
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  params.array() -= state.learning_rate * (state.first_moment.array() / correction1) /
                    ((state.second_moment.array() / correction2).sqrt() + OptimizerState::kEpsilon);
}

PretrainResult pretrain(std::span<const LabeledFrames> dataset, DenoiserModel model,
                        EmbeddingTable embeddings, const NoiseSchedule& schedule,
                        const PretrainOptions& options, const ProgressCallback& progress) {
  if (dataset.empty()) throw Error(ErrorCode::InvalidConfig, "pretraining dataset is empty");
  if (options.batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch size must be positive");
  for (const auto& item : dataset) {
    if (item.x0.rows() != model.dims().frames || item.x0.cols() != model.dims().frame_dim) {
      throw Error(ErrorCode::ShapeMismatch, "dataset sample does not match the model frame shape");
    }
    embeddings.at(item.label);
  }

  PretrainResult result{std::move(model), std::move(embeddings), {}};
  result.loss_trace.reserve(static_cast<std::size_t>(std::max(options.steps, 0)));
  Rng rng(options.seed);
  OptimizerState theta_state(result.model.parameters().size(), options.learning_rate);
  Eigen::VectorXd table = result.embeddings.flatten();
  OptimizerState table_state(table.size(), options.learning_rate);
  const std::vector<std::string> labels = result.embeddings.labels();
  const int embed_dim = result.embeddings.embed_dim();

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  const std::size_t batch_size = std::min<std::size_t>(options.batch_size, dataset.size());

  for (int step = 0; step < options.steps; ++step) {
    std::vector<DiffusionSample> batch;
    std::vector<std::size_t> label_slots;
    for (std::size_t k = 0; k < batch_size; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const LabeledFrames& item = dataset[order[cursor++]];
      DiffusionSample s;
      s.x0 = item.x0;
      s.embedding = result.embeddings.at(item.label);
      s.scale = 1.0 / static_cast<double>(batch_size);
      draw_noise(s, schedule, rng);
      batch.push_back(std::move(s));
      label_slots.push_back(static_cast<std::size_t>(
          std::lower_bound(labels.begin(), labels.end(), item.label) - labels.begin()));
    }
    LossAndGrads lg = diffusion_loss(result.model, batch, schedule, {true, true});
    if (!std::isfinite(lg.loss)) {
      throw Error(ErrorCode::Divergence,
                  "pretraining diverged at step " + std::to_string(step) + " (loss not finite)");
    }
    result.loss_trace.push_back(lg.loss);

    Eigen::VectorXd table_grads = Eigen::VectorXd::Zero(table.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
      table_grads.segment(static_cast<Eigen::Index>(label_slots[k]) * embed_dim, embed_dim) +=
          lg.embedding_grads[k];
    }
    optimizer_step(theta_state, result.model.mutable_parameters(), lg.parameter_grads);
    optimizer_step(table_state, table, table_grads);
    result.embeddings.unflatten(table);
    if (progress) progress(step + 1, options.steps, lg.loss);
  }
  return result;
}

Frames sample(const DenoiserModel& model, const Eigen::VectorXd& embedding,
              const NoiseSchedule& schedule, Rng& rng) {
  const X0Predictor predict = [&](const Frames& x_t, int t) { return model.forward(x_t, t, embedding); };
  return sample_loop(predict, model.dims().frames, model.dims().frame_dim, schedule, rng);
}

std::vector<double> moving_average(std::span<const double> trace, std::size_t window) {
  std::vector<double> out(trace.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    sum += trace[i];
    if (i >= window) sum -= trace[i - window];
    out[i] = sum / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

void write_checkpoint(std::ostream& out, const DenoiserModel& model, const EmbeddingTable& embeddings) {
  using namespace binary;
  const DenoiserDims& d = model.dims();
  if (embeddings.embed_dim() != d.embed_dim) {
    throw Error(ErrorCode::ShapeMismatch, "embedding table dimension differs from the model");
  }
  out.write(kCheckpointMagic, 4);
  write_u32(out, kCheckpointVersion);
  for (int v : {d.frames, d.frame_dim, d.embed_dim, d.hidden1, d.hidden2, d.diffusion_steps}) {
    write_u32(out, static_cast<std::uint32_t>(v));
  }
  for (Eigen::Index i = 0; i < model.parameters().size(); ++i) write_f64(out, model.parameters()(i));
  write_u32(out, static_cast<std::uint32_t>(embeddings.size()));
  for (const auto& label : embeddings.labels()) {
    if (label.size() > 0xFFFF) throw Error(ErrorCode::InvalidConfig, "label too long for checkpoint");
    write_u16(out, static_cast<std::uint16_t>(label.size()));
    out.write(label.data(), static_cast<std::streamsize>(label.size()));
    const Eigen::VectorXd& e = embeddings.at(label);
    for (Eigen::Index i = 0; i < e.size(); ++i) write_f64(out, e(i));
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  using namespace binary;
  char magic[4] = {};
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw Error(ErrorCode::MalformedFile, "not a model checkpoint (bad magic)");
  }
  if (read_u32(in) != kCheckpointVersion) {
    throw Error(ErrorCode::MalformedFile, "unsupported checkpoint version");
  }
  DenoiserDims d;
  d.frames = static_cast<int>(read_u32(in));
  d.frame_dim = static_cast<int>(read_u32(in));
  d.embed_dim = static_cast<int>(read_u32(in));
  d.hidden1 = static_cast<int>(read_u32(in));
  d.hidden2 = static_cast<int>(read_u32(in));
  d.diffusion_steps = static_cast<int>(read_u32(in));
  validate_dims(d);
  Eigen::VectorXd theta(d.parameter_count());
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) = read_f64(in);
  if (!theta.allFinite()) throw Error(ErrorCode::NonFiniteValue, "checkpoint parameters are not finite");

  EmbeddingTable table(d.embed_dim);
  const std::uint32_t count = read_u32(in);
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string label(read_u16(in), '\0');
    if (!in.read(label.data(), static_cast<std::streamsize>(label.size()))) {
      throw Error(ErrorCode::MalformedFile, "truncated embedding label");
    }
    Eigen::VectorXd e(d.embed_dim);
    for (int i = 0; i < d.embed_dim; ++i) e(i) = read_f64(in);
    if (table.contains(label)) throw Error(ErrorCode::MalformedFile, "duplicate embedding label");
    table.set(label, std::move(e));
  }
  return Checkpoint{DenoiserModel(d, std::move(theta)), std::move(table)};
}

void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model,
                     const EmbeddingTable& embeddings) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string());
  write_checkpoint(out, model, embeddings);
  if (!out) throw Error(ErrorCode::Io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

NoiseSchedule schedule_for(const DenoiserModel& model) {
  return make_schedule(model.dims().diffusion_steps);
}

}  // namespace medit
