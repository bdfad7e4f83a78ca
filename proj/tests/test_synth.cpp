#include "medit/error.hpp"
#include "medit/synth.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

using namespace medit;
namespace fs = std::filesystem;

namespace {

Eigen::VectorXd rotation_features(const Motion& m) {
  const auto cols = rotation_indices(m.layout());
  Eigen::VectorXd out(static_cast<Eigen::Index>(cols.size()) * m.frame_count());
  Eigen::Index at = 0;
  for (Eigen::Index n = 0; n < m.frame_count(); ++n) {
    for (int c : cols) out(at++) = m.frames()(n, c);
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("medit_test_synth_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("generators are pure and layout-consistent") {
  const CorpusSpec spec;
  for (const auto& label : spec.labels) {
    for (std::uint64_t seed = 0; seed < 64; ++seed) {
      const Motion m = gen_motion(label, seed, spec);
      if (seed < 3) CHECK(m == gen_motion(label, seed, spec));
      CHECK(m.frame_count() == spec.frames);
      CHECK(m.layout() == FeatureLayout(spec.joints));
      CHECK(m.fps() == spec.fps);
      CHECK(m.frames().allFinite());
      CHECK(m.frames().col(m.layout().root_height().offset).minCoeff() >= 0.0);
      const Frames delta = m.frames().bottomRows(spec.frames - 1) - m.frames().topRows(spec.frames - 1);
      CHECK(delta.cwiseAbs().maxCoeff() <= 0.5);
    }
  }
  CHECK_THROWS_AS(gen_motion("dance", 0, spec), Error);
}

TEST_CASE("class characteristics") {
  const CorpusSpec spec;
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const Motion squat = gen_motion("squat", seed, spec);
    const FeatureLayout& l = squat.layout();
    CHECK(squat.frames().middleCols(l.root_lin_vel().offset, 2).isZero(0.0));
    const double h0 = squat.frames()(0, l.root_height().offset);
    CHECK(squat.frames().col(l.root_height().offset).minCoeff() < h0 - 0.1);

    const Motion walk = gen_motion("walk", seed, spec);
    CHECK(walk.frames().middleCols(l.root_lin_vel().offset, 2).cwiseAbs().maxCoeff() > 0.0);
    // Legs swing in antiphase.
    const auto left = walk.frames().col(l.position_col(joint::kLeftLeg, 2));
    const auto right = walk.frames().col(l.position_col(joint::kRightLeg, 2));
    const double corr = ((left.array() - left.mean()) * (right.array() - right.mean())).sum();
    CHECK(corr < 0.0);

    const Motion jump = gen_motion("jump", seed, spec);
    const auto height = jump.frames().col(l.root_height().offset);
    CHECK(height.maxCoeff() > height(0) + 0.2);
  }
}

TEST_CASE("velocity block is the finite difference of positions") {
  const CorpusSpec spec;
  std::vector<Motion> motions;
  for (const auto& label : spec.labels) motions.push_back(gen_motion(label, 3, spec));
  for (const auto& kind : kEditInputKinds) motions.push_back(gen_edit_inputs(kind, spec));
  for (const Motion& m : motions) {
    const FeatureLayout& l = m.layout();
    const Frames& f = m.frames();
    const Eigen::Index last = m.frame_count() - 1;
    for (Eigen::Index n = 0; n < m.frame_count(); ++n) {
      const Eigen::Index a = n < last ? n : std::max<Eigen::Index>(n - 1, 0);
      const Eigen::Index b = n < last ? n + 1 : n;
      for (int j = 1; j < 5; ++j) {
        for (int axis = 0; axis < 3; ++axis) {
          CHECK(f(n, l.velocity_col(j, axis)) == f(b, l.position_col(j, axis)) - f(a, l.position_col(j, axis)));
        }
      }
      CHECK(f(n, l.velocity_col(0, 1)) == f(b, l.root_height().offset) - f(a, l.root_height().offset));
      CHECK(f(n, l.velocity_col(0, 0)) == f(n, l.root_lin_vel().offset));
      CHECK(f(n, l.velocity_col(0, 2)) == f(n, l.root_lin_vel().offset + 1));
    }
  }
}

TEST_CASE("walk samples sit closer to each other than to any jump") {
  const CorpusSpec spec;
  std::vector<Eigen::VectorXd> walks, jumps;
  for (int k = 0; k < 16; ++k) {
    walks.push_back(rotation_features(gen_motion("walk", corpus_sample_seed(0, 3, k), spec)));
    jumps.push_back(rotation_features(gen_motion("jump", corpus_sample_seed(0, 1, k), spec)));
  }
  double nearest_jump = 1e300;
  for (const auto& w : walks)
    for (const auto& j : jumps) nearest_jump = std::min(nearest_jump, (w - j).norm());
  for (std::size_t a = 0; a < walks.size(); ++a) {
    for (std::size_t b = a + 1; b < walks.size(); ++b) {
      CHECK((walks[a] - walks[b]).norm() > 0.0);
      CHECK((walks[a] - walks[b]).norm() < nearest_jump);
    }
  }
}

TEST_CASE("nearest-centroid separability on held-out samples") {
  const CorpusSpec spec;
  const auto corpus = generate_corpus(spec);
  std::map<std::string, Eigen::VectorXd> centroid;
  std::map<std::string, int> count;
  std::vector<const LabeledMotion*> held_out;
  std::map<std::string, int> seen;
  for (const auto& s : corpus) {
    if (seen[s.label]++ < 48) {
      const Eigen::VectorXd f = rotation_features(s.motion);
      auto [it, fresh] = centroid.try_emplace(s.label, Eigen::VectorXd::Zero(f.size()));
      it->second += f;
      ++count[s.label];
    } else {
      held_out.push_back(&s);
    }
  }
  for (auto& [label, c] : centroid) c /= count[label];
  int correct = 0;
  for (const LabeledMotion* s : held_out) {
    const Eigen::VectorXd f = rotation_features(s->motion);
    std::string best;
    double best_d = 1e300;
    for (const auto& [label, c] : centroid) {
      if ((f - c).norm() < best_d) best_d = (f - c).norm(), best = label;
    }
    correct += best == s->label;
  }
  CHECK(held_out.size() == 64);
  CHECK(correct >= 0.95 * held_out.size());
}

TEST_CASE("edit inputs") {
  const CorpusSpec spec;
  for (const auto& kind : kEditInputKinds) {
    const Motion m = gen_edit_inputs(kind, spec);
    CHECK(m == gen_edit_inputs(kind, spec));
    CHECK(m.frame_count() == (kind == "march_clip" ? 20 : 1));
  }
  CHECK_THROWS_AS(gen_edit_inputs("moonwalk", spec), Error);

  SUBCASE("legs spread is mirror symmetric") {
    const Motion m = gen_edit_inputs("legs_spread_pose", spec);
    const FeatureLayout& l = m.layout();
    const auto& f = m.frames();
    CHECK(std::abs(f(0, l.position_col(joint::kLeftLeg, 0)) + f(0, l.position_col(joint::kRightLeg, 0))) < 1e-9);
    CHECK(std::abs(f(0, l.position_col(joint::kLeftLeg, 1)) - f(0, l.position_col(joint::kRightLeg, 1))) < 1e-9);
    CHECK(std::abs(f(0, l.position_col(joint::kLeftLeg, 2)) - f(0, l.position_col(joint::kRightLeg, 2))) < 1e-9);
    CHECK(f(0, l.position_col(joint::kLeftLeg, 0)) > 0.3);
  }
  SUBCASE("march repeats every 10 frames") {
    const Motion m = gen_edit_inputs("march_clip", spec);
    const auto leg = m.frames().col(m.layout().position_col(joint::kLeftLeg, 2));
    const Eigen::VectorXd centered = leg.array() - leg.mean();
    int best_lag = 0;
    double best = -1e300;
    for (int lag = 2; lag <= 14; ++lag) {
      const Eigen::Index overlap = centered.size() - lag;
      const double r = centered.head(overlap).dot(centered.tail(overlap)) / static_cast<double>(overlap);
      if (r > best) best = r, best_lag = lag;
    }
    CHECK(best_lag == 10);
  }
}

TEST_CASE("generators need the five-joint skeleton") {
  CorpusSpec spec;
  spec.joints = 3;
  try {
    gen_motion("walk", 0, spec);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidLayout);
  }
}

TEST_CASE("corpus on disk") {
  CorpusSpec spec;
  const fs::path a = fresh_dir("a"), b = fresh_dir("b"), c = fresh_dir("c");
  build_corpus(spec, a);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(a)) files += entry.path().extension() == ".mjson";
  CHECK(files == 256);
  REQUIRE(fs::exists(a / kManifestName));

  const auto manifest = nlohmann::json::parse(slurp(a / kManifestName));
  CHECK(manifest["entries"].size() == 256);
  CHECK(manifest["spec"]["samples_per_label"] == 64);
  const auto& first = manifest["entries"][0];
  CHECK(fs::exists(a / first["file"].get<std::string>()));

  build_corpus(spec, b);
  CHECK(slurp(a / kManifestName) == slurp(b / kManifestName));
  CHECK(slurp(a / "walk_007.mjson") == slurp(b / "walk_007.mjson"));

  spec.seed = 1;
  build_corpus(spec, c);
  CHECK(slurp(a / kManifestName) != slurp(c / kManifestName));
  CHECK(slurp(a / "walk_007.mjson") != slurp(c / "walk_007.mjson"));
  std::size_t files_c = 0;
  for (const auto& entry : fs::directory_iterator(c)) files_c += entry.path().extension() == ".mjson";
  CHECK(files_c == 256);

  const auto loaded = load_corpus(a);
  const auto generated = generate_corpus(CorpusSpec{});
  REQUIRE(loaded.size() == generated.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].label == generated[i].label);
    CHECK(loaded[i].seed == generated[i].seed);
    CHECK(loaded[i].motion.frames() == generated[i].motion.frames());
  }
  CHECK(to_training_set(loaded).size() == 256);

  for (const auto& d : {a, b, c}) fs::remove_all(d);
  CHECK_THROWS_AS(load_corpus(fresh_dir("missing")), Error);
}

TEST_CASE("corpus spec validation") {
  CorpusSpec spec;
  spec.labels = {"walk", "walk"};
  CHECK_THROWS_AS(spec.validate(), Error);
  spec.labels = {};
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = CorpusSpec{};
  spec.labels = {"walk", ""};
  CHECK_THROWS_AS(spec.validate(), Error);
  spec = CorpusSpec{};
  spec.samples_per_label = 0;
  CHECK_THROWS_AS(spec.validate(), Error);
}
