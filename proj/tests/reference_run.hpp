#pragma once

// The reference pipeline: default corpus, default-size model, legs-spread pose
// edit into the first "jump" sample. Shared by the acceptance binary and the
// slow regression test.

#include "medit/edit.hpp"
#include "medit/synth.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace medit::reference {

inline std::vector<LabeledMotion> corpus() { return generate_corpus(CorpusSpec{}); }

inline PretrainResult train(const std::vector<LabeledMotion>& data, std::uint64_t seed, int steps = 2000) {
  const CorpusSpec spec;
  const DenoiserDims dims;
  PretrainOptions options;
  options.steps = steps;
  options.seed = seed;
  return pretrain(to_training_set(data), DenoiserModel::initialized(dims, seed),
                  EmbeddingTable::random(spec.labels, dims.embed_dim, seed), make_schedule(dims.diffusion_steps),
                  options);
}

// Mean squared difference over the given columns.
inline double column_mse(const Frames& a, const Frames& b, const std::vector<int>& cols) {
  double sum = 0.0;
  for (int c : cols) sum += (a.col(c) - b.col(c)).squaredNorm();
  return sum / static_cast<double>(a.rows() * static_cast<Eigen::Index>(cols.size()));
}

// Mean of squared differences over the entries where w is nonzero.
inline double supported_mse(const Frames& a, const Frames& b, const Frames& w) {
  const auto support = (w.array() != 0.0).cast<double>();
  return (support * (a - b).array().square()).sum() / support.sum();
}

// mean(W .* (a - b)^2), the loss-weighted distance.
inline double weighted_mse(const Frames& a, const Frames& b, const Frames& w) {
  return (w.array() * (a - b).array().square()).mean();
}

struct Separability {
  std::map<std::string, int> correct;  // out of samples_per_label
  int samples_per_label = 8;
  double between = 0.0;  // distance between the walk and jump sample means
  double within = 0.0;   // largest mean distance of a sample to its own label mean
};

// Draws samples per label and assigns each to the nearest corpus class mean on
// rotation columns.
inline Separability separability(const PretrainResult& r, const std::vector<LabeledMotion>& data,
                                 int samples_per_label = 8) {
  const CorpusSpec spec;
  const std::vector<int> rot = rotation_indices(FeatureLayout(spec.joints));
  std::map<std::string, Frames> centroid;
  std::map<std::string, int> count;
  for (const auto& s : data) {
    auto [it, fresh] = centroid.try_emplace(s.label, Frames::Zero(spec.frames, s.motion.layout().frame_dim()));
    it->second += s.motion.frames();
    ++count[s.label];
  }
  for (auto& [label, c] : centroid) c /= count[label];

  const NoiseSchedule schedule = schedule_for(r.model);
  Separability out;
  out.samples_per_label = samples_per_label;
  std::map<std::string, std::vector<Frames>> drawn;
  for (const auto& label : spec.labels) {
    out.correct[label] = 0;
    for (int k = 0; k < samples_per_label; ++k) {
      Rng rng(1000 + k);
      Frames x = sample(r.model, r.embeddings.at(label), schedule, rng);
      std::string best;
      double best_d = 1e300;
      for (const auto& [other, c] : centroid) {
        const double d = column_mse(x, c, rot);
        if (d < best_d) best_d = d, best = other;
      }
      out.correct[label] += best == label;
      drawn[label].push_back(std::move(x));
    }
  }
  auto mean_of = [&](const std::string& label) {
    Frames m = Frames::Zero(spec.frames, drawn[label][0].cols());
    for (const auto& x : drawn[label]) m += x;
    return Frames(m / static_cast<double>(drawn[label].size()));
  };
  auto rot_distance = [&](const Frames& a, const Frames& b) {
    return std::sqrt(column_mse(a, b, rot) * static_cast<double>(a.rows() * rot.size()));
  };
  out.between = rot_distance(mean_of("walk"), mean_of("jump"));
  for (const char* label : {"walk", "jump"}) {
    const Frames m = mean_of(label);
    double spread = 0.0;
    for (const auto& x : drawn[label]) spread += rot_distance(x, m);
    out.within = std::max(out.within, spread / static_cast<double>(drawn[label].size()));
  }
  return out;
}

inline EditConfig edit_config() {
  EditConfig c;
  c.scenario = Scenario::Local;
  c.input_kind = InputKind::StaticPose;
  c.pose_steps = {20};
  c.main_step = 20;
  c.pad = 3;
  c.v = 5.0;
  c.rho = 0.5;
  c.base_train_prob = 0.5;
  c.iters_stage1 = 500;
  c.iters_stage2 = 500;
  c.lr_stage1 = 1e-3;
  c.lr_stage2 = 1e-6;
  c.seed = 0;
  return c;
}

inline EditSession create_edit(const PretrainResult& r) {
  const CorpusSpec spec;
  const Motion base = gen_motion("jump", corpus_sample_seed(spec.seed, 1, 0), spec);
  return create_session(base, "jump", gen_edit_inputs("legs_spread_pose", spec), edit_config(), r.model,
                        r.embeddings);
}

struct EtaSweep {
  std::vector<double> etas{0.0, 0.5, 1.0};
  std::vector<double> to_combined;       // weighted MSE to x0^C, mean over seeds
  std::vector<double> supported_to_combined;  // unweighted MSE on W-supported entries
  std::vector<double> rot_to_base;       // rotation-column MSE to x0^B, mean over seeds
  std::vector<double> rot_to_combined;   // rotation-column MSE to x0^C, mean over seeds
  std::vector<std::vector<double>> to_combined_per_seed;
  double base_to_combined = 0.0;
  double supported_base_to_combined = 0.0;
};

inline EtaSweep sweep(const EditSession& s, int seeds = 4) {
  const NoiseSchedule schedule = schedule_for(s.model);
  const std::vector<int> rot = rotation_indices(s.base.layout());
  const Frames& B = s.base.frames();
  const Frames& C = s.combined.frames();
  EtaSweep out;
  out.base_to_combined = weighted_mse(B, C, s.weights);
  out.supported_base_to_combined = supported_mse(B, C, s.weights);
  for (double eta : out.etas) {
    double c = 0, sc = 0, rb = 0, rc = 0;
    std::vector<double> per_seed;
    for (int seed = 0; seed < seeds; ++seed) {
      const Frames g = generate(s, eta, static_cast<std::uint64_t>(seed), schedule).frames();
      per_seed.push_back(weighted_mse(g, C, s.weights));
      c += per_seed.back();
      sc += supported_mse(g, C, s.weights);
      rb += column_mse(g, B, rot);
      rc += column_mse(g, C, rot);
    }
    out.to_combined.push_back(c / seeds);
    out.supported_to_combined.push_back(sc / seeds);
    out.rot_to_base.push_back(rb / seeds);
    out.rot_to_combined.push_back(rc / seeds);
    out.to_combined_per_seed.push_back(std::move(per_seed));
  }
  return out;
}

// Mean of the first and last `window` entries.
inline std::pair<double, double> head_tail_means(const std::vector<double>& trace, std::size_t window) {
  const auto avg = moving_average(trace, window);
  return {avg[window - 1], avg.back()};
}

}  // namespace medit::reference
