#include "medit/binary_io.hpp"
#include "medit/edit.hpp"
#include "medit/error.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

namespace medit {

namespace {

using nlohmann::json;

json frames_to_json(const Frames& f) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < f.cols(); ++j) row.push_back(f(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Frames frames_from_json(const json& rows) {
  if (!rows.is_array() || rows.empty() || !rows[0].is_array()) {
    throw Error(ErrorCode::MalformedFile, "expected a non-empty array of frames");
  }
  Frames f(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw Error(ErrorCode::MalformedFile, "ragged frame array");
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      f(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j].get<double>();
    }
  }
  return f;
}

json motion_to_json(const Motion& m) {
  json out = {{"fps", m.fps()}, {"joints", m.layout().joints()}, {"frames", frames_to_json(m.frames())}};
  if (m.label()) out["label"] = *m.label();
  return out;
}

Motion motion_from_json(const json& j) {
  std::optional<std::string> label;
  if (j.contains("label")) label = j.at("label").get<std::string>();
  return Motion(j.at("fps").get<double>(), FeatureLayout(j.at("joints").get<int>()),
                frames_from_json(j.at("frames")), std::move(label));
}

json config_to_json(const EditConfig& c) {
  return {{"scenario", to_string(c.scenario)},
          {"input_kind", to_string(c.input_kind)},
          {"insert_at", c.insert_at},
          {"pose_steps", c.pose_steps},
          {"main_step", c.main_step},
          {"pad", c.pad},
          {"v", c.v},
          {"rho", c.rho},
          {"q", c.base_train_prob},
          {"eta", c.eta},
          {"iters1", c.iters_stage1},
          {"iters2", c.iters_stage2},
          {"lr1", c.lr_stage1},
          {"lr2", c.lr_stage2},
          {"seed", c.seed}};
}

EditConfig config_from_json(const json& j) {
  EditConfig c;
  c.scenario = parse_scenario(j.at("scenario").get<std::string>());
  c.input_kind = parse_input_kind(j.at("input_kind").get<std::string>());
  c.insert_at = j.at("insert_at").get<int>();
  c.pose_steps = j.at("pose_steps").get<std::vector<int>>();
  c.main_step = j.at("main_step").get<int>();
  c.pad = j.at("pad").get<int>();
  c.v = j.at("v").get<double>();
  c.rho = j.at("rho").get<double>();
  c.base_train_prob = j.at("q").get<double>();
  c.eta = j.at("eta").get<double>();
  c.iters_stage1 = j.at("iters1").get<int>();
  c.iters_stage2 = j.at("iters2").get<int>();
  c.lr_stage1 = j.at("lr1").get<double>();
  c.lr_stage2 = j.at("lr2").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void write_session(std::ostream& out, const EditSession& s) {
  write_checkpoint(out, s.model, s.embeddings);
  for (const Eigen::VectorXd* e : {&s.e_base, &s.e_opt}) {
    for (Eigen::Index i = 0; i < e->size(); ++i) binary::write_f64(out, (*e)(i));
  }
  json meta = {{"config", config_to_json(s.config)},
               {"stage", to_string(s.stage)},
               {"base_label", s.base_label},
               {"base", motion_to_json(s.base)},
               {"input", motion_to_json(s.input)},
               {"combined", motion_to_json(s.combined)},
               {"weights", frames_to_json(s.weights)},
               {"stage1_loss", s.stage1_loss},
               {"stage2_loss", s.stage2_loss},
               {"stage2_combined_loss", s.stage2_combined_loss}};
  if (s.failure) meta["failure"] = *s.failure;
  const std::string text = meta.dump();
  binary::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

EditSession read_session(std::istream& in) {
  Checkpoint cp = read_checkpoint(in);
  const int dim = cp.model.dims().embed_dim;
  Eigen::VectorXd e_base(dim), e_opt(dim);
  for (int i = 0; i < dim; ++i) e_base(i) = binary::read_f64(in);
  for (int i = 0; i < dim; ++i) e_opt(i) = binary::read_f64(in);
  const std::uint64_t length = binary::read_u64(in);
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
    throw Error(ErrorCode::MalformedFile, "session metadata block is truncated");
  }
  try {
    const json meta = json::parse(text);
    EditSession s{config_from_json(meta.at("config")),
                  motion_from_json(meta.at("base")),
                  meta.at("base_label").get<std::string>(),
                  motion_from_json(meta.at("input")),
                  motion_from_json(meta.at("combined")),
                  frames_from_json(meta.at("weights")),
                  std::move(e_base),
                  std::move(e_opt),
                  std::move(cp.model),
                  std::move(cp.embeddings),
                  parse_stage(meta.at("stage").get<std::string>()),
                  meta.at("stage1_loss").get<std::vector<double>>(),
                  meta.at("stage2_loss").get<std::vector<double>>(),
                  meta.at("stage2_combined_loss").get<std::vector<double>>(),
                  std::nullopt};
    if (meta.contains("failure")) s.failure = meta.at("failure").get<std::string>();
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedFile, std::string("session metadata is malformed: ") + e.what());
  }
}

void save_session(const std::filesystem::path& path, const EditSession& session) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write session " + path.string());
  write_session(out, session);
  if (!out) throw Error(ErrorCode::Io, "failed writing session " + path.string());
}

EditSession load_session(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open session " + path.string());
  return read_session(in);
}

}  // namespace medit
