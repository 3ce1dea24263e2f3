#include "dcollapse/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include "dcollapse/error.hpp"

namespace dcollapse {

TrainConfig desk_train_config() {
  TrainConfig t;
  t.epochs = 40;
  t.batch_size = 32;
  t.learning_rate = 2e-3;
  t.rank_eval_every = 5;
  t.seed = 5;
  t.student.base_width = 4;
  t.student.input_size = 16;
  t.student.embed_dim = 64;
  t.student.seed = 4;
  return t;
}

DeskConfig default_desk_config() {
  DeskConfig c;
  c.train_data.per_class = 100;
  c.train_data.seed = 1;
  c.eval_data.per_class = 50;
  c.eval_data.seed = 2;
  c.eval_data.split = Split::Eval;
  c.train = desk_train_config();
  return c;
}

void DeskConfig::validate() const {
  cone.validate();
  uniform.validate();
  train.validate();
  if (train_data.size != eval_data.size || train_data.channels != eval_data.channels ||
      train_data.classes != eval_data.classes)
    throw InvalidInput("desk config: train and eval data must share size, channels and classes");
  if (train.student.input_size != train_data.size || train.student.input_channels != train_data.channels)
    throw InvalidInput("desk config: student input does not match the data");
  if (cone.dim != train.student.embed_dim || uniform.dim != train.student.embed_dim)
    throw InvalidInput("desk config: teacher dimension does not match student embed_dim");
  if (teachers.empty() || losses.empty() || widths.empty()) throw InvalidInput("desk config: empty grid axis");
  for (const auto& t : teachers)
    if (t != "cone" && t != "uniform") throw InvalidInput("desk config: unknown teacher kind '" + t + "'");
  for (int w : widths)
    if (w < 1) throw InvalidInput("desk config: width factors must be >= 1");
  for (std::size_t i = 0; i < sigmas.size(); ++i)
    if (!(sigmas[i] >= 0.0) || (i > 0 && !(sigmas[i] > sigmas[i - 1])))
      throw InvalidInput("desk config: sigmas must be non-negative and strictly increasing");
  if (k < 1) throw InvalidInput("desk config: k must be >= 1");
}

void to_json(nlohmann::json& j, const DeskConfig& c) {
  std::vector<std::string> losses;
  for (auto m : c.losses) losses.push_back(to_string(m));
  j = nlohmann::json{{"train_data", c.train_data},
                     {"eval_data", c.eval_data},
                     {"cone", c.cone},
                     {"uniform", c.uniform},
                     {"teacher_seed", c.teacher_seed},
                     {"train", c.train},
                     {"sigmas", c.sigmas},
                     {"noise_seed", c.noise_seed},
                     {"k", c.k},
                     {"teachers", c.teachers},
                     {"losses", losses},
                     {"widths", c.widths}};
}

// ---- grid files -------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw InvalidInput("grid: '" + key + "' expects a number, got '" + v + "'");
  return x;
}

long long to_int(const std::string& key, const std::string& v) {
  const double x = to_double(key, v);
  if (x != std::floor(x)) throw InvalidInput("grid: '" + key + "' expects an integer, got '" + v + "'");
  return static_cast<long long>(x);
}

using Setter = std::function<void(DeskConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"teachers", [](DeskConfig& c, auto&, auto& v) { c.teachers = split_list(v); }},
      {"losses",
       [](DeskConfig& c, auto&, auto& v) {
         c.losses.clear();
         for (const auto& s : split_list(v)) c.losses.push_back(parse_loss_mode(s));
       }},
      {"widths",
       [](DeskConfig& c, auto& k, auto& v) {
         c.widths.clear();
         for (const auto& s : split_list(v)) c.widths.push_back(static_cast<int>(to_int(k, s)));
       }},
      {"sigmas",
       [](DeskConfig& c, auto& k, auto& v) {
         c.sigmas.clear();
         for (const auto& s : split_list(v)) c.sigmas.push_back(to_double(k, s));
       }},
      {"epochs", [](DeskConfig& c, auto& k, auto& v) { c.train.epochs = static_cast<int>(to_int(k, v)); }},
      {"batch_size", [](DeskConfig& c, auto& k, auto& v) { c.train.batch_size = static_cast<int>(to_int(k, v)); }},
      {"learning_rate", [](DeskConfig& c, auto& k, auto& v) { c.train.learning_rate = to_double(k, v); }},
      {"lambda", [](DeskConfig& c, auto& k, auto& v) { c.train.loss.lambda = to_double(k, v); }},
      {"tau", [](DeskConfig& c, auto& k, auto& v) { c.train.loss.tau = to_double(k, v); }},
      {"rank_eval_every",
       [](DeskConfig& c, auto& k, auto& v) { c.train.rank_eval_every = static_cast<int>(to_int(k, v)); }},
      {"rank_input", [](DeskConfig& c, auto&, auto& v) { c.train.rank_input = parse_rank_input(v); }},
      {"train_seed", [](DeskConfig& c, auto& k, auto& v) { c.train.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"student_seed",
       [](DeskConfig& c, auto& k, auto& v) { c.train.student.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"base_width",
       [](DeskConfig& c, auto& k, auto& v) { c.train.student.base_width = static_cast<int>(to_int(k, v)); }},
      {"stages", [](DeskConfig& c, auto& k, auto& v) { c.train.student.stages = static_cast<int>(to_int(k, v)); }},
      {"image_size",
       [](DeskConfig& c, auto& k, auto& v) {
         const auto s = static_cast<int>(to_int(k, v));
         c.train_data.size = c.eval_data.size = c.train.student.input_size = s;
       }},
      {"channels",
       [](DeskConfig& c, auto& k, auto& v) {
         const auto s = static_cast<int>(to_int(k, v));
         c.train_data.channels = c.eval_data.channels = c.train.student.input_channels = s;
       }},
      {"dim",
       [](DeskConfig& c, auto& k, auto& v) {
         const auto d = static_cast<int>(to_int(k, v));
         c.cone.dim = c.uniform.dim = c.train.student.embed_dim = d;
       }},
      {"classes",
       [](DeskConfig& c, auto& k, auto& v) { c.train_data.classes = c.eval_data.classes = static_cast<int>(to_int(k, v)); }},
      {"train_per_class", [](DeskConfig& c, auto& k, auto& v) { c.train_data.per_class = static_cast<int>(to_int(k, v)); }},
      {"eval_per_class", [](DeskConfig& c, auto& k, auto& v) { c.eval_data.per_class = static_cast<int>(to_int(k, v)); }},
      {"train_data_seed",
       [](DeskConfig& c, auto& k, auto& v) { c.train_data.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"eval_data_seed",
       [](DeskConfig& c, auto& k, auto& v) { c.eval_data.seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"noise_level",
       [](DeskConfig& c, auto& k, auto& v) { c.train_data.noise_level = c.eval_data.noise_level = to_double(k, v); }},
      {"teacher_seed", [](DeskConfig& c, auto& k, auto& v) { c.teacher_seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"rho", [](DeskConfig& c, auto& k, auto& v) { c.cone.cone_offset = to_double(k, v); }},
      {"gamma", [](DeskConfig& c, auto& k, auto& v) { c.cone.spectral_decay = to_double(k, v); }},
      {"class_scale",
       [](DeskConfig& c, auto& k, auto& v) { c.cone.class_scale = c.uniform.class_scale = to_double(k, v); }},
      {"within_class_scale",
       [](DeskConfig& c, auto& k, auto& v) {
         c.cone.within_class_scale = c.uniform.within_class_scale = to_double(k, v);
       }},
      {"crop_padding",
       [](DeskConfig& c, auto& k, auto& v) { c.train.augment.crop_padding = static_cast<int>(to_int(k, v)); }},
      {"flip_probability", [](DeskConfig& c, auto& k, auto& v) { c.train.augment.flip_probability = to_double(k, v); }},
      {"brightness", [](DeskConfig& c, auto& k, auto& v) { c.train.augment.brightness = to_double(k, v); }},
      {"noise_seed", [](DeskConfig& c, auto& k, auto& v) { c.noise_seed = static_cast<std::uint64_t>(to_int(k, v)); }},
      {"k", [](DeskConfig& c, auto& k, auto& v) { c.k = static_cast<int>(to_int(k, v)); }},
  };
  return table;
}

}  // namespace

std::vector<std::string> grid_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : setters()) out.push_back(k);
  return out;
}

DeskConfig parse_grid(const std::string& text, DeskConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("grid line " + std::to_string(lineno) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw InvalidInput("grid line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (value.empty()) throw InvalidInput("grid line " + std::to_string(lineno) + ": empty value for '" + key + "'");
    it->second(base, key, value);
  }
  base.validate();
  return base;
}

// ---- cells ------------------------------------------------------------------

std::string CellSpec::id() const { return teacher + "_" + to_string(loss) + "_w" + std::to_string(width); }

std::vector<CellSpec> grid_cells(const DeskConfig& config) {
  std::vector<CellSpec> out;
  for (const auto& t : config.teachers)
    for (auto l : config.losses)
      for (int w : config.widths) out.push_back({t, l, w});
  return out;
}

TeacherStore make_teacher(const DeskConfig& config, const std::string& kind, std::span<const int> labels) {
  if (kind == "cone") return gen_cone_teacher(labels, config.cone, config.teacher_seed);
  if (kind == "uniform") return gen_uniform_teacher(labels, config.uniform, config.teacher_seed);
  throw InvalidInput("unknown teacher kind '" + kind + "'");
}

TrainConfig cell_train_config(const DeskConfig& config, const CellSpec& cell) {
  TrainConfig t = config.train;
  t.student.width_factor = cell.width;
  t.loss.mode = cell.loss;
  t.teacher_ref = cell.teacher;
  return t;
}

double CellResult::final_rank() const {
  const auto r = train.log.final_effective_rank();
  if (!r) throw InvalidInput("cell " + spec.id() + " has no effective rank (zero epochs)");
  return *r;
}

double CellResult::accuracy_at(double sigma) const {
  for (const auto& row : sweep.rows)
    if (row.sigma == sigma) return row.accuracy;
  throw InvalidInput("cell " + spec.id() + " has no sweep row at sigma " + std::to_string(sigma));
}

CellResult run_cell(const DeskConfig& config, const CellSpec& cell, const Dataset& train_set, const Dataset& eval_set,
                    const TeacherStore& teacher, const EpochCallback& on_epoch) {
  const auto tc = cell_train_config(config, cell);
  CellResult r{cell, tc, train(tc, train_set, teacher, eval_set, on_epoch), {}, {}};
  r.clean = clean_probe(r.train.model, train_set, eval_set, config.k, r.config.rank_input);
  r.sweep = noise_sweep(r.train.model, train_set, eval_set, config.sigmas, config.k, config.noise_seed, cell.id(),
                        r.config.rank_input);
  return r;
}

SummaryRow summarize(const CellResult& r) {
  SummaryRow s;
  s.teacher_kind = r.spec.teacher;
  s.loss_mode = to_string(r.spec.loss);
  s.width_factor = r.spec.width;
  s.params = r.params();
  s.final_er = r.train.log.final_effective_rank().value_or(r.clean.effective_rank);
  s.clean_acc = r.clean.accuracy;
  const auto it = std::find_if(r.sweep.rows.begin(), r.sweep.rows.end(), [](const auto& row) { return row.sigma == 0.2; });
  s.acc_sigma_02 = it == r.sweep.rows.end() ? std::nan("") : it->accuracy;
  return s;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "teacher_kind,loss_mode,width_factor,params,final_ER,clean_acc,acc@sigma=0.2\n" << std::setprecision(17);
  for (const auto& r : rows)
    os << r.teacher_kind << ',' << r.loss_mode << ',' << r.width_factor << ',' << r.params << ',' << r.final_er << ','
       << r.clean_acc << ',' << r.acc_sigma_02 << '\n';
  return os.str();
}

std::vector<SummaryRow> parse_summary_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<SummaryRow> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw InvalidInput("summary row has " + std::to_string(f.size()) + " fields: " + line);
    out.push_back({f[0], f[1], std::stoi(f[2]), static_cast<std::size_t>(std::stoull(f[3])), std::stod(f[4]),
                   std::stod(f[5]), std::stod(f[6])});
  }
  return out;
}

}  // namespace dcollapse
