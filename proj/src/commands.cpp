#include "medit/commands.hpp"

#include "medit/edit.hpp"
#include "medit/error.hpp"
#include "medit/service.hpp"
#include "medit/synth.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <thread>

namespace medit {

namespace {

namespace fs = std::filesystem;

struct GlobalFlags {
  std::uint64_t seed = 0;
  bool quiet = false;
};

struct EditFlags {
  std::string base;
  std::string input;
  std::string base_label;
  std::string scenario = "local";
  std::vector<int> pose_steps;
  int insert_at = 0;
  std::optional<int> main_step;
  int pad = 0;
  double v = 5.0;
  double rho = 0.5;
  double q = 0.5;
  int iters1 = 500;
  int iters2 = 500;
  double lr1 = 1e-3;
  double lr2 = 1e-6;
};

void add_edit_flags(CLI::App* cmd, EditFlags& f) {
  cmd->add_option("--base", f.base, "Base motion file")->required();
  cmd->add_option("--input", f.input, "Static pose (1 frame) or clip motion file")->required();
  cmd->add_option("--base-label", f.base_label, "Label of the base motion (defaults to the file's label)");
  cmd->add_option("--scenario", f.scenario, "global or local")->check(CLI::IsMember({"global", "local"}));
  cmd->add_option("--pose-steps", f.pose_steps, "Frames receiving the static pose")->delimiter(',');
  cmd->add_option("--insert-at", f.insert_at, "Clip insertion frame");
  cmd->add_option("--main-step", f.main_step, "Up-weighted main frame");
  cmd->add_option("--pad", f.pad, "Boundary frames freed on each side");
  cmd->add_option("--v", f.v, "Main-step weight (> 1)");
}

void add_training_flags(CLI::App* cmd, EditFlags& f) {
  cmd->add_option("--rho", f.rho, "Base-preservation weight");
  cmd->add_option("--q", f.q, "Probability of the base term per stage-2 iteration");
  cmd->add_option("--iters1", f.iters1, "Stage-1 iterations");
  cmd->add_option("--iters2", f.iters2, "Stage-2 iterations");
  cmd->add_option("--lr1", f.lr1, "Stage-1 learning rate");
  cmd->add_option("--lr2", f.lr2, "Stage-2 learning rate");
}

EditConfig config_from_flags(const EditFlags& f, const Motion& input, std::uint64_t seed) {
  EditConfig c;
  c.scenario = parse_scenario(f.scenario);
  c.input_kind = input.frame_count() == 1 ? InputKind::StaticPose : InputKind::Clip;
  c.pose_steps = f.pose_steps;
  c.insert_at = f.insert_at;
  if (f.main_step) {
    c.main_step = *f.main_step;
  } else {
    c.main_step = c.input_kind == InputKind::StaticPose && !f.pose_steps.empty() ? f.pose_steps.front() : f.insert_at;
  }
  c.pad = f.pad;
  c.v = f.v;
  c.rho = f.rho;
  c.base_train_prob = f.q;
  c.iters_stage1 = f.iters1;
  c.iters_stage2 = f.iters2;
  c.lr_stage1 = f.lr1;
  c.lr_stage2 = f.lr2;
  c.seed = seed;
  return c;
}

std::string fmt_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_matrix_file(const fs::path& path, const Frames& weights, const Frames& mask) {
  auto rows = [](const Frames& f) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index j = 0; j < f.cols(); ++j) row.push_back(f(i, j));
      out.push_back(std::move(row));
    }
    return out;
  };
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << nlohmann::json{{"weights", rows(weights)}, {"mask", rows(mask)}}.dump() << '\n';
}

int cmd_gen_corpus(const fs::path& out_dir, int samples, const std::string& inputs_dir, const GlobalFlags& g,
                   std::ostream& out) {
  CorpusSpec spec;
  spec.samples_per_label = samples;
  spec.seed = g.seed;
  const auto corpus = build_corpus(spec, out_dir);
  if (!g.quiet) out << "wrote " << corpus.size() << " motions to " << out_dir.string() << '\n';
  if (!inputs_dir.empty()) {
    fs::create_directories(inputs_dir);
    for (const auto& kind : kEditInputKinds) {
      save_motion(gen_edit_inputs(kind, spec), fs::path(inputs_dir) / (kind + ".mjson"));
    }
    if (!g.quiet) out << "wrote " << kEditInputKinds.size() << " edit inputs to " << inputs_dir << '\n';
  }
  return 0;
}

struct PretrainFlags {
  std::string data;
  std::string out;
  int steps = 2000;
  double lr = 1e-3;
  int batch = 8;
  int hidden = 512;
  int embed_dim = 32;
};

int cmd_pretrain(const PretrainFlags& f, const GlobalFlags& g, std::ostream& out, std::ostream& err) {
  if (!fs::is_directory(f.data)) {
    err << "error: corpus directory not found: " << f.data << '\n';
    return 1;
  }
  const auto corpus = load_corpus(f.data);
  if (corpus.empty()) {
    err << "error: corpus at " << f.data << " is empty\n";
    return 1;
  }
  std::vector<std::string> labels;
  for (const auto& item : corpus) {
    if (std::find(labels.begin(), labels.end(), item.label) == labels.end()) labels.push_back(item.label);
  }
  DenoiserDims dims;
  dims.frames = static_cast<int>(corpus.front().motion.frame_count());
  dims.frame_dim = corpus.front().motion.layout().frame_dim();
  dims.embed_dim = f.embed_dim;
  dims.hidden1 = dims.hidden2 = f.hidden;
  const NoiseSchedule schedule = make_schedule(dims.diffusion_steps);
  PretrainOptions options{f.steps, f.lr, f.batch, g.seed};
  const auto dataset = to_training_set(corpus);
  ProgressCallback progress;
  if (!g.quiet) {
    progress = [&err](int it, int total, double loss) {
      if (it % 100 == 0 || it == total) err << "pretrain " << it << "/" << total << " loss " << fmt_loss(loss) << '\n';
    };
  }
  PretrainResult r = pretrain(dataset, DenoiserModel::initialized(dims, g.seed),
                              EmbeddingTable::random(labels, dims.embed_dim, g.seed), schedule, options, progress);
  save_checkpoint(f.out, r.model, r.embeddings);
  if (r.loss_trace.empty()) {
    out << "final loss: n/a (0 steps)\n";
  } else {
    out << "final loss: " << fmt_loss(moving_average(r.loss_trace, 100).back()) << '\n';
  }
  return 0;
}

int cmd_edit(const EditFlags& f, const std::string& model_path, const std::string& out_path, const GlobalFlags& g,
             std::ostream& out, std::ostream& err) {
  for (const auto& p : {model_path, f.base, f.input}) {
    if (!fs::exists(p)) {
      err << "error: file not found: " << p << '\n';
      return 1;
    }
  }
  const Motion base = load_motion(f.base);
  const Motion input = load_motion(f.input);
  const EditConfig config = config_from_flags(f, input, g.seed);
  config.validate(static_cast<int>(base.frame_count()), static_cast<int>(input.frame_count()));
  const std::string label = !f.base_label.empty() ? f.base_label : base.label().value_or("");
  if (label.empty()) {
    err << "error: base motion has no label; pass --base-label\n";
    return 1;
  }
  Checkpoint cp = load_checkpoint(model_path);
  const NoiseSchedule schedule = schedule_for(cp.model);
  EditSession session = create_session(base, label, input, config, cp.model, cp.embeddings);
  ProgressCallback progress;
  if (!g.quiet) {
    progress = [&err](int it, int total, double loss) {
      if (it % 100 == 0 || it == total) err << "  " << it << "/" << total << " loss " << fmt_loss(loss) << '\n';
    };
  }
  optimize_embedding(session, schedule, progress);
  finetune_model(session, schedule, progress);
  save_session(out_path, session);
  auto last = [](const std::vector<double>& trace) {
    return trace.empty() ? std::string("n/a") : fmt_loss(moving_average(trace, 50).back());
  };
  out << "stage 1 final loss: " << last(session.stage1_loss) << '\n';
  out << "stage 2 final loss: " << last(session.stage2_loss) << '\n';
  return 0;
}

int cmd_generate(const std::string& session_path, double eta, const std::string& out_path, const GlobalFlags& g,
                 std::ostream& out, std::ostream& err) {
  if (!(eta >= 0.0 && eta <= 1.0)) {
    err << "error: eta must lie in [0, 1]\n";
    return 1;
  }
  if (!fs::exists(session_path)) {
    err << "error: file not found: " << session_path << '\n';
    return 1;
  }
  const EditSession session = load_session(session_path);
  const Motion m = generate(session, eta, g.seed, schedule_for(session.model));
  save_motion(m, out_path);
  if (!g.quiet) out << "wrote " << out_path << '\n';
  return 0;
}

int cmd_combine(const EditFlags& f, const std::string& out_combined, const std::string& out_weights,
                std::ostream& out) {
  const Motion base = load_motion(f.base);
  const Motion input = load_motion(f.input);
  const EditConfig config = config_from_flags(f, input, 0);
  config.validate(static_cast<int>(base.frame_count()), static_cast<int>(input.frame_count()));
  Combination c = [&] {
    if (config.input_kind == InputKind::StaticPose) {
      std::vector<int> steps = config.pose_steps;
      if (config.scenario == Scenario::Global) {
        steps.clear();
        for (int i = 0; i < base.frame_count(); ++i) steps.push_back(i);
      }
      return combine_static_pose(base, input, steps);
    }
    return combine_clip(base, input, config.insert_at, config.scenario);
  }();
  const Frames w = build_weights(config, base.layout(), static_cast<int>(base.frame_count()),
                                 static_cast<int>(input.frame_count()));
  save_motion(c.combined, out_combined);
  if (!out_weights.empty()) write_matrix_file(out_weights, w, c.mask);
  out << "wrote " << out_combined << '\n';
  return 0;
}

int cmd_serve(const std::string& model_path, ServeOptions options, std::ostream& out, std::ostream& err) {
  if (!fs::exists(model_path)) {
    err << "error: file not found: " << model_path << '\n';
    return 1;
  }
  // Signals are handled on a dedicated thread; block them before any other thread starts.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Checkpoint cp = load_checkpoint(model_path);
  EditService service(std::move(cp.model), std::move(cp.embeddings));
  HttpServer server(service, options);
  if (!server.bind()) {
    err << "error: cannot bind " << options.host << ":" << options.port << '\n';
    pthread_sigmask(SIG_UNBLOCK, &signals, nullptr);
    return 1;
  }
  out << "serving on http://" << options.host << ":" << server.port() << std::endl;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  server.listen();
  // listen() can also return on its own; release the waiter in that case.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  pthread_sigmask(SIG_UNBLOCK, &signals, nullptr);
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Motion diffusion editing toolkit", "medit"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags global;
  app.add_option("--seed", global.seed, "Random seed");
  app.add_flag("--quiet", global.quiet, "Suppress progress output");

  std::string corpus_out, inputs_out;
  int samples = 64;
  auto* gen = app.add_subcommand("gen-corpus", "Write the synthetic training corpus");
  gen->add_option("--out", corpus_out, "Output directory")->required();
  gen->add_option("--samples", samples, "Samples per label")->check(CLI::PositiveNumber);
  gen->add_option("--inputs-out", inputs_out, "Also write the authored edit inputs here");

  PretrainFlags pre;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the denoiser on a corpus");
  pretrain_cmd->add_option("--data", pre.data, "Corpus directory")->required();
  pretrain_cmd->add_option("--out", pre.out, "Checkpoint path")->required();
  pretrain_cmd->add_option("--steps", pre.steps, "Training steps")->check(CLI::NonNegativeNumber);
  pretrain_cmd->add_option("--lr", pre.lr, "Learning rate")->check(CLI::PositiveNumber);
  pretrain_cmd->add_option("--batch", pre.batch, "Batch size")->check(CLI::PositiveNumber);
  pretrain_cmd->add_option("--hidden", pre.hidden, "Hidden width")->check(CLI::PositiveNumber);
  pretrain_cmd->add_option("--embed-dim", pre.embed_dim, "Embedding width")->check(CLI::PositiveNumber);

  EditFlags edit_flags;
  std::string model_path, session_out;
  auto* edit = app.add_subcommand("edit", "Run both training stages and write a session");
  edit->add_option("--model", model_path, "Model checkpoint")->required();
  edit->add_option("--out", session_out, "Session path")->required();
  add_edit_flags(edit, edit_flags);
  add_training_flags(edit, edit_flags);

  std::string session_path, motion_out;
  double eta = 1.0;
  auto* gen_cmd = app.add_subcommand("generate", "Sample from a ready session");
  gen_cmd->add_option("--session", session_path, "Session file")->required();
  gen_cmd->add_option("--eta", eta, "Embedding blend in [0, 1]")->required();
  gen_cmd->add_option("--out", motion_out, "Output motion file")->required();

  EditFlags combine_flags;
  std::string combined_out, weights_out;
  auto* combine = app.add_subcommand("combine", "Write the combined motion and loss weights");
  add_edit_flags(combine, combine_flags);
  combine->add_option("--out", combined_out, "Combined motion file")->required();
  combine->add_option("--weights-out", weights_out, "Weights and mask JSON file");

  std::string serve_model;
  ServeOptions serve_options;
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--model", serve_model, "Model checkpoint")->required();
  serve->add_option("--port", serve_options.port, "Port");
  serve->add_option("--host", serve_options.host, "Bind address");
  serve->add_option("--static-dir", serve_options.static_dir, "Directory served under /");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*gen) return cmd_gen_corpus(corpus_out, samples, inputs_out, global, out);
    if (*pretrain_cmd) return cmd_pretrain(pre, global, out, err);
    if (*edit) return cmd_edit(edit_flags, model_path, session_out, global, out, err);
    if (*gen_cmd) return cmd_generate(session_path, eta, motion_out, global, out, err);
    if (*combine) return cmd_combine(combine_flags, combined_out, weights_out, out);
    if (*serve) return cmd_serve(serve_model, serve_options, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace medit
