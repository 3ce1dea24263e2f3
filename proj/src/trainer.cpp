#include "dcollapse/trainer.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numeric>
#include <sstream>

#include "dcollapse/error.hpp"
#include "dcollapse/rng.hpp"

namespace dcollapse {

void TrainConfig::validate() const {
  if (epochs < 0) throw InvalidInput("train config: epochs must be >= 0");
  if (batch_size < 1) throw InvalidInput("train config: batch_size must be >= 1");
  if (loss.uses_infonce() && batch_size < 2) throw InvalidInput("train config: InfoNCE needs batch_size >= 2");
  if (!(learning_rate > 0.0)) throw InvalidInput("train config: learning_rate must be > 0");
  if (rank_eval_every < 1) throw InvalidInput("train config: rank_eval_every must be >= 1");
  loss.validate();
  student.validate();
  augment.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", "adam"},
                     {"loss", c.loss},
                     {"student", c.student},
                     {"augment", c.augment},
                     {"rank_eval_every", c.rank_eval_every},
                     {"seed", c.seed},
                     {"dataset_ref", c.dataset_ref},
                     {"teacher_ref", c.teacher_ref},
                     {"eval_ref", c.eval_ref},
                     {"cosine_input", "augmented_view_1"},
                     {"infonce_negatives", "opposite_view_all_rows_symmetrized"},
                     {"teacher_normalization", "l2_rows"},
                     {"rank_embeddings", to_string(c.rank_input)}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("loss").get_to(c.loss);
  j.at("student").get_to(c.student);
  j.at("augment").get_to(c.augment);
  j.at("rank_eval_every").get_to(c.rank_eval_every);
  j.at("seed").get_to(c.seed);
  c.dataset_ref = j.value("dataset_ref", "");
  c.teacher_ref = j.value("teacher_ref", "");
  c.eval_ref = j.value("eval_ref", "");
  c.rank_input = parse_rank_input(j.value("rank_embeddings", "normalized"));
}

// ---- metrics ----------------------------------------------------------------

std::string MetricsLog::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    nlohmann::json j{{"epoch", e.epoch}, {"loss_total", e.loss_total}, {"loss_cos", e.loss_cos}, {"loss_nce", e.loss_nce}};
    j["effective_rank"] = e.effective_rank ? nlohmann::json(*e.effective_rank) : nlohmann::json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string MetricsLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,loss_total,loss_cos,loss_nce,effective_rank\n" << std::setprecision(17);
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.loss_total << ',' << e.loss_cos << ',' << e.loss_nce << ',';
    if (e.effective_rank) os << *e.effective_rank;
    os << '\n';
  }
  return os.str();
}

MetricsLog MetricsLog::from_jsonl(const std::string& text) {
  MetricsLog log;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    EpochMetrics e;
    j.at("epoch").get_to(e.epoch);
    j.at("loss_total").get_to(e.loss_total);
    j.at("loss_cos").get_to(e.loss_cos);
    j.at("loss_nce").get_to(e.loss_nce);
    if (!j.at("effective_rank").is_null()) e.effective_rank = j.at("effective_rank").get<double>();
    log.epochs.push_back(e);
  }
  return log;
}

std::optional<double> MetricsLog::final_effective_rank() const {
  for (auto it = epochs.rbegin(); it != epochs.rend(); ++it)
    if (it->effective_rank) return it->effective_rank;
  return std::nullopt;
}

// ---- training ---------------------------------------------------------------

EmbeddingMatrix evaluate_embeddings(const StudentCNN& model, const Dataset& data) {
  data.validate();
  EmbeddingMatrix m = model.embed(data.as_tensor());
  m.labels = data.labels;
  return m;
}

namespace {

void preflight(const TrainConfig& c, const Dataset& train_set, const TeacherStore& teacher, const Dataset& eval_set) {
  c.validate();
  train_set.validate();
  eval_set.validate();
  teacher.validate();
  const auto& s = c.student;
  if (teacher.dim != static_cast<std::size_t>(s.embed_dim))
    throw InvalidInput("teacher dimension " + std::to_string(teacher.dim) + " does not match student embed_dim " +
                       std::to_string(s.embed_dim));
  if (teacher.n < train_set.n)
    throw InvalidInput("teacher store has " + std::to_string(teacher.n) + " rows but the training set has " +
                       std::to_string(train_set.n) + " samples");
  for (const Dataset* d : {&train_set, &eval_set})
    if (d->channels != static_cast<std::size_t>(s.input_channels) || d->size != static_cast<std::size_t>(s.input_size))
      throw InvalidInput(to_string(d->split) + " images are " + std::to_string(d->channels) + "x" +
                         std::to_string(d->size) + "x" + std::to_string(d->size) + " but the student expects " +
                         std::to_string(s.input_channels) + "x" + std::to_string(s.input_size) + "x" +
                         std::to_string(s.input_size));
}

std::vector<double> normalized_rows(const TeacherStore& t) {
  std::vector<double> out = t.values;
  for (std::size_t i = 0; i < t.n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.dim; ++j) s += out[i * t.dim + j] * out[i * t.dim + j];
    const double r = std::sqrt(s);
    if (!(r > 0.0)) throw DegenerateRow("teacher store: zero-norm embedding", i);
    for (std::size_t j = 0; j < t.dim; ++j) out[i * t.dim + j] /= r;
  }
  return out;
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed({seed, 0x7065u, static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.below(i))]);
  return perm;
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& train_set, const TeacherStore& teacher,
                  const Dataset& eval_set, const EpochCallback& on_epoch) {
  preflight(config, train_set, teacher, eval_set);
  const auto targets = normalized_rows(teacher);
  const std::size_t dim = teacher.dim;
  const std::size_t per_image = train_set.image_size();
  const bool nce = config.loss.uses_infonce();

  TrainResult result{StudentCNN(config.student), MetricsLog{}, {}};
  result.log.run = config;
  StudentCNN& model = result.model;
  auto adam = ad::make_adam(model.parameters(), ad::AdamConfig{.lr = config.learning_rate});

  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t min_batch = nce ? 2 : 1;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto perm = epoch_permutation(train_set.n, config.seed, epoch);
    double sum_total = 0.0, sum_cos = 0.0, sum_nce = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < perm.size(); start += batch) {
      const std::size_t count = std::min(batch, perm.size() - start);
      if (count < min_batch) continue;
      const ad::Shape shape{count, train_set.channels, train_set.size, train_set.size};
      std::vector<double> v1(count * per_image), v2(nce ? count * per_image : 0), zt(count * dim);
      for (std::size_t b = 0; b < count; ++b) {
        const std::size_t idx = perm[start + b];
        const auto img = train_set.image(idx);
        const AugmentKey key{config.seed, static_cast<std::uint64_t>(epoch), idx, 0};
        const auto a = augment_view(img, train_set.channels, train_set.size, config.augment, key);
        std::copy(a.begin(), a.end(), v1.begin() + static_cast<std::ptrdiff_t>(b * per_image));
        if (nce) {
          const auto c = augment_view(img, train_set.channels, train_set.size, config.augment,
                                      {config.seed, static_cast<std::uint64_t>(epoch), idx, 1});
          std::copy(c.begin(), c.end(), v2.begin() + static_cast<std::ptrdiff_t>(b * per_image));
        }
        std::copy_n(targets.begin() + static_cast<std::ptrdiff_t>(idx * dim), dim,
                    zt.begin() + static_cast<std::ptrdiff_t>(b * dim));
      }

      ad::Tape tape;
      ad::Var z1 = model.forward(tape, tape.constant(ad::Tensor(shape, std::move(v1))));
      ad::Var t = tape.constant(ad::Tensor({count, dim}, std::move(zt)));
      ad::Var z2 = nce ? model.forward(tape, tape.constant(ad::Tensor(shape, std::move(v2)))) : z1;
      LossTerms terms;
      try {
        terms = combined_loss(z1, t, z1, z2, config.loss);
      } catch (const DegenerateRow& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches) + ": " + e.what());
      }
      const double total = terms.total.value().item();
      if (!std::isfinite(total))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches) +
                            " (total " + std::to_string(total) + ", cosine " + std::to_string(terms.cosine) +
                            ", infonce " + std::to_string(terms.infonce) + ")");
      tape.backward(terms.total);
      ad::adam_step(model.parameters(), adam);
      round_to_float32(model.parameters());

      sum_total += total;
      sum_cos += terms.cosine;
      sum_nce += terms.infonce;
      ++batches;
    }

    EpochMetrics m;
    m.epoch = epoch;
    if (batches > 0) {
      const double nb = static_cast<double>(batches);
      m.loss_total = sum_total / nb;
      m.loss_cos = sum_cos / nb;
      m.loss_nce = sum_nce / nb;
    }
    if (epoch % config.rank_eval_every == 0 || epoch == config.epochs)
      m.effective_rank = embedding_rank(evaluate_embeddings(model, eval_set), config.rank_input);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(m);
    result.epoch_seconds.push_back(secs);
    if (on_epoch) on_epoch(m, secs);
  }
  return result;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xffu));
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const StudentCNN& model, const TrainConfig& config) {
  if (!(model.config() == config.student)) throw InvalidInput("checkpoint: model config differs from train config");
  std::vector<unsigned char> out;
  for (char c : std::string("CKP1")) out.push_back(static_cast<unsigned char>(c));
  put_u32(out, kCkptVersion);
  const std::string cfg = nlohmann::json(config).dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  const auto params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto e : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : p.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) throw FormatError(std::string("CKP1: truncated ") + what, pos);
  };
  auto u32 = [&](const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(bytes[pos + k]) << (8 * k);
    pos += 4;
    return v;
  };
  need(4, "magic");
  if (std::memcmp(bytes.data(), "CKP1", 4) != 0) throw FormatError("CKP1: bad magic", 0);
  pos = 4;
  const auto version = u32("version");
  if (version != kCkptVersion) throw FormatError("CKP1: unsupported version " + std::to_string(version), 4);
  const auto cfg_len = u32("config length");
  need(cfg_len, "config block");
  TrainConfig config;
  try {
    config = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + cfg_len))
                 .get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("CKP1: invalid config block: ") + e.what(), pos);
  }
  pos += cfg_len;

  const auto expected = parameter_shapes(config.student);
  const auto count_at = pos;
  const auto count = u32("tensor count");
  if (count != expected.size())
    throw FormatError("CKP1: " + std::to_string(count) + " tensors, architecture needs " +
                          std::to_string(expected.size()),
                      count_at);
  std::vector<ad::Parameter> params;
  StudentCNN fresh_names(config.student);
  for (std::size_t i = 0; i < count; ++i) {
    const auto shape_at = pos;
    const auto rank = u32("tensor rank");
    ad::Shape shape;
    for (std::uint32_t r = 0; r < rank && r < 8; ++r) shape.push_back(u32("tensor extent"));
    if (shape != expected[i])
      throw FormatError("CKP1: tensor " + std::to_string(i) + " has shape " + ad::shape_str(shape) + ", expected " +
                            ad::shape_str(expected[i]),
                        shape_at);
    ad::Parameter p;
    p.name = fresh_names.parameters()[i].name;
    p.value = ad::Tensor(shape);
    for (double& v : p.value.data()) v = static_cast<double>(std::bit_cast<float>(u32("parameter payload")));
    params.push_back(std::move(p));
  }
  if (pos != bytes.size()) throw FormatError("CKP1: trailing bytes", pos);
  return Checkpoint{StudentCNN(config.student, std::move(params)), config};
}

void save_checkpoint(const StudentCNN& model, const TrainConfig& config, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InvalidInput("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace dcollapse
