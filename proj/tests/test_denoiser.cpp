#include "gradcheck.hpp"

#include "medit/denoiser.hpp"
#include "medit/error.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace medit;

namespace {

DenoiserDims tiny_dims() { return DenoiserDims{4, 23, 8, 16, 16, 10}; }

std::vector<LabeledFrames> toy_dataset(const DenoiserDims& d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LabeledFrames> data;
  for (int k = 0; k < 12; ++k) {
    Frames x0 = Frames::Constant(d.frames, d.frame_dim, k % 2 == 0 ? 0.5 : -0.5);
    x0 += 0.05 * standard_normal(d.frames, d.frame_dim, rng);
    data.push_back({x0, k % 2 == 0 ? "up" : "down"});
  }
  return data;
}

}  // namespace

TEST_CASE("dimensions") {
  const DenoiserDims d;
  CHECK(d.input_dim() == 40 * 59 + 32 + 32);
  CHECK(d.output_dim() == 40 * 59);
  CHECK(d.parameter_count() == Eigen::Index{512} * d.input_dim() + 512 + 512 * 512 + 512 +
                                   Eigen::Index{d.output_dim()} * 512 + d.output_dim());
  const DenoiserModel m(tiny_dims());
  CHECK(m.w1().rows() == 16);
  CHECK(m.w1().cols() == 4 * 23 + 32 + 8);
  CHECK(m.w3().rows() == 4 * 23);
  CHECK(m.b3().size() == 4 * 23);
  CHECK_THROWS_AS(DenoiserModel(tiny_dims(), Eigen::VectorXd::Zero(3)), Error);
}

TEST_CASE("sinusoidal time features") {
  const Eigen::VectorXd zero = sinusoidal_time_embedding(0);
  REQUIRE(zero.size() == kTimeEmbedDim);
  for (int i = 0; i < kTimeEmbedDim; i += 2) {
    CHECK(zero(i) == 0.0);
    CHECK(zero(i + 1) == 1.0);
  }
  const Eigen::VectorXd seven = sinusoidal_time_embedding(7);
  CHECK(seven(0) == doctest::Approx(std::sin(7.0)));
  CHECK(seven(1) == doctest::Approx(std::cos(7.0)));
  CHECK(seven(2) == doctest::Approx(std::sin(7.0 * std::exp(-std::log(10000.0) / 16))));
}

TEST_CASE("forward") {
  const DenoiserDims d = tiny_dims();
  Rng rng(1);
  const Frames x = standard_normal(d.frames, d.frame_dim, rng);
  const Eigen::VectorXd e = standard_normal(d.embed_dim, 1, rng).col(0);

  SUBCASE("zero parameters give zero output") {
    CHECK(DenoiserModel(d).forward(x, 3, e).isZero(0.0));
  }
  SUBCASE("seeded model is deterministic") {
    const DenoiserModel a = DenoiserModel::initialized(d, 5);
    const DenoiserModel b = DenoiserModel::initialized(d, 5);
    CHECK(a.parameters() == b.parameters());
    CHECK(a.forward(x, 3, e) == a.forward(x, 3, e));
    CHECK(a.forward(x, 3, e) != DenoiserModel::initialized(d, 6).forward(x, 3, e));
  }
  SUBCASE("initializer bounds and zero biases") {
    const DenoiserModel m = DenoiserModel::initialized(d, 2);
    const double limit1 = std::sqrt(6.0 / (d.input_dim() + d.hidden1));
    CHECK(m.w1().cwiseAbs().maxCoeff() <= limit1);
    CHECK(m.b1().isZero(0.0));
    CHECK(m.b2().isZero(0.0));
    CHECK(m.b3().isZero(0.0));
  }
  SUBCASE("shape errors") {
    const DenoiserModel m(d);
    CHECK_THROWS_AS(m.forward(Frames::Zero(3, 23), 1, e), Error);
    CHECK_THROWS_AS(m.forward(x, 1, Eigen::VectorXd::Zero(4)), Error);
  }
}

TEST_CASE("loss") {
  const DenoiserDims d = tiny_dims();
  const NoiseSchedule s = make_schedule(d.diffusion_steps, 1e-3, 0.2);
  Rng rng(3);
  DiffusionSample sample;
  sample.x0 = standard_normal(d.frames, d.frame_dim, rng);
  sample.embedding = Eigen::VectorXd::Zero(d.embed_dim);
  draw_noise(sample, s, rng);

  SUBCASE("a model that outputs x0 has zero loss and zero gradient") {
    // Zero weights and b3 = x0 make the output x0 for every input.
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d.parameter_count());
    theta.tail(d.output_dim()) = Eigen::Map<const Eigen::VectorXd>(sample.x0.data(), d.output_dim());
    const DenoiserModel perfect(d, theta);
    const LossAndGrads lg = diffusion_loss(perfect, std::span(&sample, 1), s, {true, true});
    CHECK(lg.loss == 0.0);
    CHECK(lg.parameter_grads.isZero(0.0));
    CHECK(lg.embedding_grads.at(0).isZero(0.0));
  }
  SUBCASE("zero weight annihilates the loss") {
    sample.weight = Frames::Zero(d.frames, d.frame_dim);
    const DenoiserModel m = DenoiserModel::initialized(d, 1);
    const LossAndGrads lg = diffusion_loss(m, std::span(&sample, 1), s);
    CHECK(lg.loss == 0.0);
    CHECK(lg.parameter_grads.isZero(0.0));
  }
  SUBCASE("mean over every entry, not over nonzero weights") {
    const DenoiserModel zero(d);  // predicts 0, so residual = -x0
    Frames w = Frames::Zero(d.frames, d.frame_dim);
    w(1, 2) = 3.0;
    sample.weight = w;
    const double expected = 3.0 * sample.x0(1, 2) * sample.x0(1, 2) / d.output_dim();
    CHECK(diffusion_loss(zero, std::span(&sample, 1), s).loss == doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("weight shape mismatch and empty batch") {
    sample.weight = Frames::Zero(2, 2);
    CHECK_THROWS_AS(diffusion_loss(DenoiserModel(d), std::span(&sample, 1), s), Error);
    CHECK_THROWS_AS(diffusion_loss(DenoiserModel(d), std::span<const DiffusionSample>(), s), Error);
  }
  SUBCASE("unknown label") {
    const std::vector<LabeledFrames> batch{{sample.x0, "nope"}};
    const EmbeddingTable table = EmbeddingTable::random({"walk"}, d.embed_dim, 0);
    try {
      loss_and_grads(DenoiserModel(d), batch, table, s, rng);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::UnknownLabel);
    }
  }
  SUBCASE("non-finite loss is a divergence") {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d.parameter_count());
    theta.tail(d.output_dim()).setConstant(1e200);
    const std::vector<LabeledFrames> batch{{sample.x0, "walk"}};
    const EmbeddingTable table = EmbeddingTable::random({"walk"}, d.embed_dim, 0);
    try {
      loss_and_grads(DenoiserModel(d, theta), batch, table, s, rng);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Divergence);
    }
  }
}

TEST_CASE("analytic gradients agree with finite differences") {
  for (std::uint64_t seed : {0u, 1u, 2u, 3u}) {
    const auto report = medit::testing::run_gradient_check(32, 8, seed);
    CHECK(report.parameter_probes == 32);
    CHECK(report.embedding_probes == 8);
    CHECK(report.max_relative_error < 1e-4);
  }
}

TEST_CASE("optimizer step") {
  SUBCASE("zero gradient is a fixed point") {
    OptimizerState st(3, 1e-3);
    Eigen::VectorXd p(3);
    p << 1, -2, 3;
    const Eigen::VectorXd before = p;
    for (int i = 0; i < 5; ++i) optimizer_step(st, p, Eigen::VectorXd::Zero(3));
    CHECK(p == before);
    CHECK(st.step == 5);
  }
  SUBCASE("first step moves by about the learning rate") {
    for (double g : {1e-3, 0.5, -7.0}) {
      OptimizerState st(1, 1e-3);
      Eigen::VectorXd p = Eigen::VectorXd::Constant(1, 0.25);
      optimizer_step(st, p, Eigen::VectorXd::Constant(1, g));
      // m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps).
      CHECK(std::abs(0.25 - p(0)) == doctest::Approx(1e-3 * std::abs(g) / (std::abs(g) + 1e-8)).epsilon(1e-12));
      CHECK((0.25 - p(0)) * g > 0);
    }
  }
  SUBCASE("equal gradients give equal updates") {
    OptimizerState st(3, 1e-2);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
    for (double g : {0.3, -1.0, 2.0}) {
      Eigen::VectorXd grads(3);
      grads << g, 5.0 * g, g;  // the middle coordinate must not leak into the others
      optimizer_step(st, p, grads);
    }
    CHECK(p(0) == p(2));
    CHECK(p(0) != p(1));
  }
  SUBCASE("size mismatch") {
    OptimizerState st(2, 1e-2);
    Eigen::VectorXd p = Eigen::VectorXd::Zero(2);
    CHECK_THROWS_AS(optimizer_step(st, p, Eigen::VectorXd::Zero(3)), Error);
  }
}

TEST_CASE("embedding table") {
  EmbeddingTable t = EmbeddingTable::random({"walk", "jump", "kick"}, 4, 9);
  CHECK(t.labels() == std::vector<std::string>{"jump", "kick", "walk"});
  CHECK(t == EmbeddingTable::random({"kick", "walk", "jump"}, 4, 9));
  const Eigen::VectorXd flat = t.flatten();
  CHECK(flat.segment(4, 4) == t.at("kick"));
  Eigen::VectorXd moved = flat.array() + 1.0;
  t.unflatten(moved);
  CHECK(t.flatten() == moved);
  CHECK_THROWS_AS(t.set("walk", Eigen::VectorXd::Zero(3)), Error);
  CHECK_THROWS_AS(t.at("run"), Error);
}

TEST_CASE("pretrain on a toy set") {
  const DenoiserDims d = tiny_dims();
  const NoiseSchedule s = make_schedule(d.diffusion_steps, 1e-3, 0.2);
  const auto data = toy_dataset(d, 4);
  const DenoiserModel init = DenoiserModel::initialized(d, 0);
  const EmbeddingTable table = EmbeddingTable::random({"up", "down"}, d.embed_dim, 0);

  SUBCASE("zero steps is a no-op") {
    const PretrainResult r = pretrain(data, init, table, s, {0, 1e-3, 4, 0});
    CHECK(r.model.parameters() == init.parameters());
    CHECK(r.embeddings == table);
    CHECK(r.loss_trace.empty());
  }
  SUBCASE("deterministic per seed and learns") {
    const PretrainOptions opts{300, 3e-3, 4, 7};
    int calls = 0;
    const PretrainResult a = pretrain(data, init, table, s, opts, [&](int it, int total, double) {
      CHECK(it == ++calls);
      CHECK(total == 300);
    });
    const PretrainResult b = pretrain(data, init, table, s, opts);
    CHECK(calls == 300);
    CHECK(a.model.parameters() == b.model.parameters());
    CHECK(a.embeddings == b.embeddings);
    CHECK(a.loss_trace == b.loss_trace);
    const auto avg = moving_average(a.loss_trace, 50);
    CHECK(avg.back() < 0.5 * avg[49]);
    const PretrainResult c = pretrain(data, init, table, s, {300, 3e-3, 4, 8});
    CHECK(c.model.parameters() != a.model.parameters());
  }
  SUBCASE("shape mismatch") {
    std::vector<LabeledFrames> bad{{Frames::Zero(3, 23), "up"}};
    CHECK_THROWS_AS(pretrain(bad, init, table, s, {}), Error);
    CHECK_THROWS_AS(pretrain(std::vector<LabeledFrames>{}, init, table, s, {}), Error);
  }
}

TEST_CASE("moving average") {
  const std::vector<double> trace{4, 2, 6, 8};
  CHECK(moving_average(trace, 2) == std::vector<double>{4, 3, 4, 7});
  CHECK(moving_average(trace, 10) == std::vector<double>{4, 3, 4, 5});
}

TEST_CASE("checkpoint") {
  const DenoiserDims d = tiny_dims();
  const DenoiserModel m = DenoiserModel::initialized(d, 3);
  const EmbeddingTable t = EmbeddingTable::random({"walk", "jump"}, d.embed_dim, 3);

  std::stringstream buf;
  write_checkpoint(buf, m, t);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "MEDT");
  CHECK(bytes.size() == 4 + 4 + 6 * 4 + 8 * static_cast<std::size_t>(d.parameter_count()) + 4 +
                            2 * (2 + 8 * d.embed_dim) + 4 + 4);

  const Checkpoint back = read_checkpoint(buf);
  CHECK(back.model.dims() == d);
  CHECK(back.model.parameters() == m.parameters());
  CHECK(back.embeddings == t);

  const auto path = std::filesystem::temp_directory_path() / "medit_test_ckpt.medt";
  save_checkpoint(path, m, t);
  CHECK(load_checkpoint(path).model.parameters() == m.parameters());
  std::filesystem::remove(path);

  std::stringstream bad("NOPE....");
  try {
    read_checkpoint(bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedFile);
  }
  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(read_checkpoint(truncated), Error);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/m.medt"), Error);
}

TEST_CASE("sample shape") {
  const DenoiserDims d = tiny_dims();
  const DenoiserModel m = DenoiserModel::initialized(d, 1);
  Rng a(2), b(2);
  const Eigen::VectorXd e = Eigen::VectorXd::Zero(d.embed_dim);
  const Frames x = sample(m, e, schedule_for(m), a);
  CHECK(x.rows() == d.frames);
  CHECK(x.cols() == d.frame_dim);
  CHECK(x.allFinite());
  CHECK(x == sample(m, e, schedule_for(m), b));
}
