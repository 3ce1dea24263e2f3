#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "dcollapse/error.hpp"
#include "dcollapse/experiment.hpp"
#include "dcollapse/manifest.hpp"

namespace fs = std::filesystem;
using namespace dcollapse;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InvalidInput("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + p.string());
  out << text;
  if (!out) throw InvalidInput("write failed for " + p.string());
}

// Outputs are assembled in a sibling staging directory and moved into place
// only once complete, so a failed command leaves nothing behind.
class Staging {
 public:
  explicit Staging(fs::path out) : out_(std::move(out)) {
    if (fs::exists(out_)) {
      if (!fs::is_directory(out_)) throw InvalidInput("output path " + out_.string() + " is not a directory");
      if (!fs::is_empty(out_) && !fs::exists(out_ / kManifestName))
        throw InvalidInput("refusing to replace " + out_.string() + ": not empty and not a previous output");
    }
    tmp_ = out_;
    tmp_ += ".partial";
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~Staging() {
    std::error_code ec;
    if (!committed_) fs::remove_all(tmp_, ec);
  }
  const fs::path& dir() const { return tmp_; }
  void commit() {
    fs::remove_all(out_);
    if (out_.has_parent_path()) fs::create_directories(out_.parent_path());
    fs::rename(tmp_, out_);
    committed_ = true;
  }

 private:
  fs::path out_;
  fs::path tmp_;
  bool committed_ = false;
};

struct DataFlags {
  std::string path;
  std::optional<int> channels;
  std::optional<int> size;
  std::optional<int> classes;
};

// Layout comes from flags, else from the manifest gen-data left beside the file.
Dataset load_dataset(const DataFlags& f, Split split) {
  int channels = 1, size = 16, classes = 10;
  const fs::path p(f.path);
  const auto dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  if (fs::exists(dir / kManifestName)) {
    const auto m = read_manifest(dir);
    channels = m.report.value("channels", channels);
    size = m.report.value("size", size);
    classes = m.report.value("classes", classes);
  }
  ReadOptions opts;
  opts.layout = {static_cast<std::size_t>(f.channels.value_or(channels)), static_cast<std::size_t>(f.size.value_or(size))};
  opts.class_count = f.classes.value_or(classes);
  opts.split = split;
  return read_cifar_binary(p, opts);
}

void add_data_flags(CLI::App* cmd, DataFlags& f, const std::string& name, const std::string& help, bool required) {
  auto* o = cmd->add_option(name, f.path, help)->check(CLI::ExistingFile);
  if (required) o->required();
}

void add_layout_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--channels", f.channels, "Image channels of the record file");
  cmd->add_option("--image-size", f.size, "Square image size of the record file");
  cmd->add_option("--classes", f.classes, "Number of classes (labels must be below it)");
}

void progress(const std::string& what, const EpochMetrics& m, double secs) {
  std::fprintf(stderr, "%s epoch %d loss %.5f", what.c_str(), m.epoch, m.loss_total);
  if (m.effective_rank) std::fprintf(stderr, " ER %.4f", *m.effective_rank);
  std::fprintf(stderr, " (%.2fs)\n", secs);
}

void write_cell_files(const fs::path& dir, const CellResult& r) {
  save_checkpoint(r.train.model, r.config, dir / "checkpoint.ckp1");
  write_text(dir / "metrics.jsonl", r.train.log.to_jsonl());
  write_text(dir / "metrics.csv", r.train.log.to_csv());
}

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  SyntheticConfig synth;
  std::string split = "train";
  bool fixed_phase = false;
  std::string from_cifar;
  int record_channels = 3;
  int record_size = 32;
  int class_count = 10;
  std::string out;
};

int run_gen_data(const GenDataArgs& a) {
  Dataset data;
  nlohmann::json config, inputs = nlohmann::json::object();
  if (!a.from_cifar.empty()) {
    ReadOptions opts;
    opts.layout = {static_cast<std::size_t>(a.record_channels), static_cast<std::size_t>(a.record_size)};
    opts.class_count = a.class_count;
    opts.split = parse_split(a.split);
    data = read_cifar_binary(a.from_cifar, opts);
    config = {{"source", "cifar-binary"},
              {"channels", a.record_channels},
              {"size", a.record_size},
              {"class_count", a.class_count},
              {"split", a.split}};
    inputs[a.from_cifar] = file_sha256(a.from_cifar);
  } else {
    SyntheticConfig s = a.synth;
    s.split = parse_split(a.split);
    s.random_phase = !a.fixed_phase;
    data = gen_synthetic(s);
    config = {{"source", "synthetic"}, {"synthetic", s}};
  }
  Staging stage(a.out);
  write_cifar_binary(data, stage.dir() / "data.bin");
  RunManifest m;
  m.command = "gen-data";
  m.config = config;
  m.inputs = inputs;
  m.report = {{"n", data.n},
              {"channels", data.channels},
              {"size", data.size},
              {"classes", data.class_count},
              {"split", to_string(data.split)}};
  write_manifest(stage.dir(), m);
  stage.commit();
  std::printf("%s\n", (fs::path(a.out) / "data.bin").string().c_str());
  return 0;
}

// ---- gen-teacher ------------------------------------------------------------

struct GenTeacherArgs {
  std::string mode;
  ConeConfig cone;
  DataFlags data;
  std::uint64_t seed = 3;
  std::string out;
};

int run_gen_teacher(const GenTeacherArgs& a) {
  const auto data = load_dataset(a.data, Split::Train);
  TeacherStore t;
  if (a.mode == "cone") {
    t = gen_cone_teacher(data.labels, a.cone, a.seed);
  } else {
    UniformConfig u;
    u.dim = a.cone.dim;
    u.class_scale = a.cone.class_scale;
    u.within_class_scale = a.cone.within_class_scale;
    t = gen_uniform_teacher(data.labels, u, a.seed);
  }
  Staging stage(a.out);
  write_emb1(t, stage.dir() / "teacher.emb1");
  const auto mat = t.as_matrix();
  RunManifest m;
  m.command = "gen-teacher";
  m.config = t.meta;
  m.inputs = {{a.data.path, file_sha256(a.data.path)}};
  m.report = {{"n", t.n},
              {"dim", t.dim},
              {"mean_pairwise_cosine", mean_pairwise_cosine(mat)},
              {"effective_rank", centered_effective_rank(mat)},
              {"effective_rank_normalized", embedding_rank(mat, RankInput::Normalized)}};
  write_manifest(stage.dir(), m);
  stage.commit();
  std::printf("mean_pairwise_cosine %.6f effective_rank %.6f\n", m.report["mean_pairwise_cosine"].get<double>(),
              m.report["effective_rank"].get<double>());
  return 0;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  DataFlags data;
  DataFlags eval;
  std::string teacher;
  TrainConfig config = desk_train_config();
  std::string loss = "cosine";
  std::string rank_input = "normalized";
  std::string out;
};

int run_train(TrainArgs a) {
  a.config.loss.mode = parse_loss_mode(a.loss);
  a.config.rank_input = parse_rank_input(a.rank_input);
  a.config.dataset_ref = a.data.path;
  a.config.teacher_ref = a.teacher;
  if (a.eval.path.empty()) a.eval = a.data;
  a.config.eval_ref = a.eval.path;
  const auto train_set = load_dataset(a.data, Split::Train);
  const auto eval_set = load_dataset(a.eval, Split::Eval);
  const auto teacher = read_emb1(a.teacher);
  a.config.student.input_channels = static_cast<int>(train_set.channels);
  a.config.student.input_size = static_cast<int>(train_set.size);
  const auto result = train(a.config, train_set, teacher, eval_set,
                            [](const EpochMetrics& m, double s) { progress("train", m, s); });
  Staging stage(a.out);
  save_checkpoint(result.model, a.config, stage.dir() / "checkpoint.ckp1");
  write_text(stage.dir() / "metrics.jsonl", result.log.to_jsonl());
  write_text(stage.dir() / "metrics.csv", result.log.to_csv());
  RunManifest m;
  m.command = "train";
  m.config = a.config;
  m.inputs = {{a.data.path, file_sha256(a.data.path)}, {a.teacher, file_sha256(a.teacher)}};
  m.inputs[a.eval.path] = file_sha256(a.eval.path);
  m.report = {{"params", result.model.param_count()}, {"epochs", result.log.epochs.size()}};
  if (const auto er = result.log.final_effective_rank()) m.report["final_effective_rank"] = *er;
  write_manifest(stage.dir(), m);
  stage.commit();
  if (const auto er = result.log.final_effective_rank()) std::printf("final_effective_rank %.6f\n", *er);
  return 0;
}

// ---- analyze ----------------------------------------------------------------

struct AnalyzeArgs {
  std::string embeddings;
  std::string checkpoint;
  DataFlags data;
  std::string rank_input;
  std::size_t max_pairs = kDefaultMaxPairs;
  std::uint64_t seed = 0;
  std::string out;
};

int run_analyze(const AnalyzeArgs& a) {
  EmbeddingMatrix z;
  nlohmann::json inputs;
  RankInput mode = RankInput::Raw;
  if (!a.embeddings.empty()) {
    z = read_emb1(a.embeddings).as_matrix();
    inputs[a.embeddings] = file_sha256(a.embeddings);
  } else {
    const auto ck = load_checkpoint(a.checkpoint);
    z = evaluate_embeddings(ck.model, load_dataset(a.data, Split::Eval));
    mode = ck.config.rank_input;
    inputs[a.checkpoint] = file_sha256(a.checkpoint);
    inputs[a.data.path] = file_sha256(a.data.path);
  }
  if (!a.rank_input.empty()) mode = parse_rank_input(a.rank_input);
  if (mode == RankInput::Normalized) z = normalize_rows(z);
  const auto report = analyze(z, {a.max_pairs, a.seed});
  Staging stage(a.out);
  write_text(stage.dir() / "report.json", nlohmann::json(report).dump(2) + "\n");
  write_text(stage.dir() / "spectrum.csv", spectrum_csv(report.singular_values));
  RunManifest m;
  m.command = "analyze";
  m.config = {{"rank_embeddings", to_string(mode)}, {"max_pairs", a.max_pairs}, {"seed", a.seed}};
  m.inputs = inputs;
  m.report = {{"effective_rank", report.effective_rank}, {"mean_pairwise_cosine", report.mean_pairwise_cosine}};
  write_manifest(stage.dir(), m);
  stage.commit();
  std::printf("effective_rank %.6f\n", report.effective_rank);
  return 0;
}

// ---- sweep ------------------------------------------------------------------

struct SweepArgs {
  std::string grid;
  std::string out;
};

nlohmann::json cell_report(const SummaryRow& s) {
  return {{"teacher_kind", s.teacher_kind}, {"loss_mode", s.loss_mode}, {"width_factor", s.width_factor},
          {"params", s.params},             {"final_ER", s.final_er},   {"clean_acc", s.clean_acc},
          {"acc@sigma=0.2", s.acc_sigma_02}};
}

SummaryRow row_from_report(const nlohmann::json& r) {
  return {r.at("teacher_kind"), r.at("loss_mode"), r.at("width_factor"), r.at("params"),
          r.at("final_ER"),     r.at("clean_acc"), r.at("acc@sigma=0.2")};
}

int run_sweep(const SweepArgs& a) {
  const DeskConfig desk = a.grid.empty() ? default_desk_config() : parse_grid(read_text(a.grid));
  desk.validate();
  const fs::path out(a.out);
  if (fs::exists(out) && !fs::is_directory(out)) throw InvalidInput("output path " + a.out + " is not a directory");
  fs::create_directories(out);

  const auto train_set = gen_synthetic(desk.train_data);
  const auto eval_set = gen_synthetic(desk.eval_data);
  write_cifar_binary(train_set, out / "train.bin");
  write_cifar_binary(eval_set, out / "eval.bin");
  std::map<std::string, TeacherStore> teachers;
  for (const auto& kind : desk.teachers) {
    teachers[kind] = make_teacher(desk, kind, train_set.labels);
    write_emb1(teachers[kind], out / ("teacher_" + kind + ".emb1"));
  }
  const nlohmann::json shared_inputs = {{"train.bin", file_sha256(out / "train.bin")},
                                        {"eval.bin", file_sha256(out / "eval.bin")}};

  std::vector<SummaryRow> rows;
  nlohmann::json soft = nlohmann::json::array();
  for (const auto& cell : grid_cells(desk)) {
    const fs::path dir = out / cell.id();
    auto inputs = shared_inputs;
    const auto teacher_file = "teacher_" + cell.teacher + ".emb1";
    inputs[teacher_file] = file_sha256(out / teacher_file);
    RunManifest m;
    m.command = "sweep-cell";
    m.config = {{"cell", cell.id()}, {"train", cell_train_config(desk, cell)}, {"sigmas", desk.sigmas},
                {"noise_seed", desk.noise_seed}, {"k", desk.k}};
    m.inputs = inputs;
    const auto expected_id = make_run_id(m.command, m.config, m.inputs);
    if (fs::exists(dir / kManifestName)) {
      const auto prev = read_manifest(dir);
      if (prev.run_id == expected_id && verify_manifest(dir, prev)) {
        std::fprintf(stderr, "%s: complete, skipped\n", cell.id().c_str());
        rows.push_back(row_from_report(prev.report));
        continue;
      }
    }
    const auto r = run_cell(desk, cell, train_set, eval_set, teachers.at(cell.teacher),
                            [&](const EpochMetrics& em, double s) { progress(cell.id(), em, s); });
    const auto row = summarize(r);
    Staging stage(dir);
    write_cell_files(stage.dir(), r);
    write_text(stage.dir() / "robustness.csv", r.sweep.to_csv());
    m.report = cell_report(row);
    write_manifest(stage.dir(), m);
    stage.commit();
    rows.push_back(row);
  }

  write_text(out / "summary.csv", summary_csv(rows));
  // Capacity brittleness: does the widest cosine student lose more accuracy
  // under noise than the narrowest? Reported only.
  for (const auto& kind : desk.teachers) {
    const SummaryRow *narrow = nullptr, *wide = nullptr;
    for (const auto& r : rows) {
      if (r.teacher_kind != kind || r.loss_mode != "cosine") continue;
      if (!narrow || r.width_factor < narrow->width_factor) narrow = &r;
      if (!wide || r.width_factor > wide->width_factor) wide = &r;
    }
    if (narrow && wide && narrow != wide)
      soft.push_back({{"teacher_kind", kind},
                      {"narrow_acc@sigma=0.2", narrow->acc_sigma_02},
                      {"wide_acc@sigma=0.2", wide->acc_sigma_02},
                      {"wide_more_brittle", wide->acc_sigma_02 < narrow->acc_sigma_02}});
  }
  RunManifest top;
  top.command = "sweep";
  top.config = desk;
  top.report = {{"cells", rows.size()}, {"brittleness", soft}};
  write_manifest(out, top);
  std::fputs(summary_csv(rows).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dimensional-collapse laboratory for embedding distillation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "dcollapse 0.1.0");

  GenDataArgs gd;
  auto* gen_data = app.add_subcommand("gen-data", "Generate a synthetic dataset or import a CIFAR-style binary");
  gen_data->add_option("--classes", gd.synth.classes, "Number of classes")->capture_default_str();
  gen_data->add_option("--per-class", gd.synth.per_class, "Samples per class")->capture_default_str();
  gen_data->add_option("--size", gd.synth.size, "Square image size")->capture_default_str();
  gen_data->add_option("--channels", gd.synth.channels, "Image channels")->capture_default_str();
  gen_data->add_option("--noise", gd.synth.noise_level, "Pixel noise level")->capture_default_str();
  gen_data->add_option("--seed", gd.synth.seed, "Generator seed")->capture_default_str();
  gen_data->add_flag("--fixed-phase", gd.fixed_phase, "Disable per-sample phase, contrast and blob variation");
  gen_data->add_option("--split", gd.split, "train or eval")->check(CLI::IsMember({"train", "eval"}))->capture_default_str();
  auto* cifar = gen_data->add_option("--from-cifar", gd.from_cifar, "Import a binary record file")->check(CLI::ExistingFile);
  gen_data->add_option("--record-channels", gd.record_channels, "Channels per record (import)")->needs(cifar)->capture_default_str();
  gen_data->add_option("--record-size", gd.record_size, "Image size per record (import)")->needs(cifar)->capture_default_str();
  gen_data->add_option("--class-count", gd.class_count, "Label bound (import)")->needs(cifar)->capture_default_str();
  gen_data->add_option("--out", gd.out, "Output directory")->required();

  GenTeacherArgs gt;
  auto* gen_teacher = app.add_subcommand("gen-teacher", "Generate a synthetic teacher embedding store (EMB1)");
  gen_teacher->add_option("--mode", gt.mode, "cone or uniform")->required()->check(CLI::IsMember({"cone", "uniform"}));
  gen_teacher->add_option("--dim", gt.cone.dim, "Embedding dimension")->capture_default_str();
  gen_teacher->add_option("--rho", gt.cone.cone_offset, "Cone offset norm")->capture_default_str();
  gen_teacher->add_option("--class-scale", gt.cone.class_scale, "Class direction scale")->capture_default_str();
  gen_teacher->add_option("--within-class-scale", gt.cone.within_class_scale, "Per-sample noise scale")->capture_default_str();
  gen_teacher->add_option("--gamma", gt.cone.spectral_decay, "Class-direction energy decay")->capture_default_str();
  add_data_flags(gen_teacher, gt.data, "--data", "Dataset whose labels the store follows", true);
  add_layout_flags(gen_teacher, gt.data);
  gen_teacher->add_option("--seed", gt.seed, "Generator seed")->capture_default_str();
  gen_teacher->add_option("--out", gt.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Distill a student from a teacher store");
  add_data_flags(train_cmd, tr.data, "--data", "Training record file", true);
  add_layout_flags(train_cmd, tr.data);
  add_data_flags(train_cmd, tr.eval, "--eval-data", "Evaluation record file (default: the training file)", false);
  train_cmd->add_option("--teacher", tr.teacher, "Teacher store (EMB1)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--width-factor", tr.config.student.width_factor, "Student width multiplier")->capture_default_str();
  train_cmd->add_option("--base-width", tr.config.student.base_width, "Stage-1 channels at width 1")->capture_default_str();
  train_cmd->add_option("--loss", tr.loss, "cosine or cosine+infonce")
      ->check(CLI::IsMember({"cosine", "cosine+infonce"}))
      ->capture_default_str();
  train_cmd->add_option("--lambda", tr.config.loss.lambda, "InfoNCE weight")->capture_default_str();
  train_cmd->add_option("--tau", tr.config.loss.tau, "InfoNCE temperature")->capture_default_str();
  train_cmd->add_option("--epochs", tr.config.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--batch-size", tr.config.batch_size, "Batch size")->capture_default_str();
  train_cmd->add_option("--lr", tr.config.learning_rate, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--rank-every", tr.config.rank_eval_every, "Epochs between rank evaluations")->capture_default_str();
  train_cmd->add_option("--rank-input", tr.rank_input, "raw or normalized")
      ->check(CLI::IsMember({"raw", "normalized"}))
      ->capture_default_str();
  train_cmd->add_option("--embed-dim", tr.config.student.embed_dim, "Student output dimension")->capture_default_str();
  train_cmd->add_option("--seed", tr.config.seed, "Shuffle and augmentation seed")->capture_default_str();
  train_cmd->add_option("--student-seed", tr.config.student.seed, "Initialization seed")->capture_default_str();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();

  AnalyzeArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Spectral report of embeddings or of a checkpoint on a dataset");
  auto* emb = analyze_cmd->add_option("--embeddings", an.embeddings, "EMB1 store")->check(CLI::ExistingFile);
  auto* ckpt = analyze_cmd->add_option("--checkpoint", an.checkpoint, "CKP1 checkpoint")->check(CLI::ExistingFile);
  emb->excludes(ckpt);
  add_data_flags(analyze_cmd, an.data, "--data", "Dataset embedded by the checkpoint", false);
  add_layout_flags(analyze_cmd, an.data);
  analyze_cmd->add_option("--rank-input", an.rank_input, "raw or normalized")->check(CLI::IsMember({"raw", "normalized"}));
  analyze_cmd->add_option("--max-pairs", an.max_pairs, "Pair budget for mean pairwise cosine")->capture_default_str();
  analyze_cmd->add_option("--seed", an.seed, "Pair sampling seed")->capture_default_str();
  analyze_cmd->add_option("--out", an.out, "Output directory")->required();

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run the teacher x loss x width grid");
  sweep_cmd->add_option("--grid", sw.grid, "Key-value grid file (default: the desk grid)")->check(CLI::ExistingFile);
  sweep_cmd->add_option("--out", sw.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
    if (*analyze_cmd) {
      if (an.embeddings.empty() && an.checkpoint.empty())
        throw CLI::RequiredError("--embeddings or --checkpoint");
      if (!an.embeddings.empty() && !an.data.path.empty()) throw CLI::ExcludesError("--data", "--embeddings");
      if (!an.checkpoint.empty() && an.data.path.empty()) throw CLI::RequiredError("--data (with --checkpoint)");
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*gen_data) return run_gen_data(gd);
    if (*gen_teacher) return run_gen_teacher(gt);
    if (*train_cmd) return run_train(tr);
    if (*analyze_cmd) return run_analyze(an);
    if (*sweep_cmd) return run_sweep(sw);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kUsageError;
}
