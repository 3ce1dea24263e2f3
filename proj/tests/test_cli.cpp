#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "dcollapse/data.hpp"
#include "dcollapse/experiment.hpp"
#include "dcollapse/manifest.hpp"
#include "dcollapse/teacher.hpp"

using namespace dcollapse;
namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path root;
  explicit Scratch(const std::string& name) : root(fs::temp_directory_path() / ("dcollapse_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Scratch() { fs::remove_all(root); }
  fs::path operator/(const std::string& s) const { return root / s; }
};

int cli(const std::string& args) {
  const std::string cmd = std::string(DCOLLAPSE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kSmallData = "--classes 4 --per-class 3 --size 16 --seed 11";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 2") {
  Scratch s("usage");
  CHECK(cli("") == 2);
  CHECK(cli("gen-data " + kSmallData) == 2);
  CHECK(cli("gen-teacher --mode ellipse --out " + q(s / "t")) == 2);
  CHECK(cli("frobnicate") == 2);
  CHECK(cli("analyze --out " + q(s / "a")) == 2);
  CHECK_FALSE(fs::exists(s / "t"));
}

TEST_CASE("gen-data is reproducible and hashed") {
  Scratch s("gen_data");
  REQUIRE(cli("gen-data " + kSmallData + " --out " + q(s / "a")) == 0);
  REQUIRE(cli("gen-data " + kSmallData + " --out " + q(s / "b")) == 0);
  const auto ma = read_manifest(s / "a");
  const auto mb = read_manifest(s / "b");
  CHECK(ma.files == mb.files);
  CHECK(ma.run_id == mb.run_id);
  CHECK(verify_manifest(s / "a", ma));
  CHECK(ma.report["n"] == 12);
  REQUIRE(ma.files.size() == 1);
  CHECK(ma.files[0].sha256 == file_sha256(s / "a" / ma.files[0].path));

  REQUIRE(cli("gen-data --classes 4 --per-class 3 --size 16 --seed 12 --out " + q(s / "c")) == 0);
  CHECK(read_manifest(s / "c").files != ma.files);
}

TEST_CASE("gen-data imports a record file unchanged") {
  Scratch s("import");
  SyntheticConfig c;
  c.classes = 3;
  c.per_class = 2;
  c.size = 8;
  c.channels = 3;
  const auto d = gen_synthetic(c);
  write_cifar_binary(d, s / "records.bin");
  REQUIRE(cli("gen-data --from-cifar " + q(s / "records.bin") +
              " --record-channels 3 --record-size 8 --class-count 3 --out " + q(s / "imp")) == 0);
  const auto m = read_manifest(s / "imp");
  REQUIRE(m.files.size() == 1);
  CHECK(m.files[0].sha256 == file_sha256(s / "records.bin"));
  CHECK(m.report["n"] == 6);
  CHECK(cli("gen-data --from-cifar " + q(s / "records.bin") +
            " --record-channels 3 --record-size 9 --class-count 3 --out " + q(s / "bad")) == 1);
  CHECK_FALSE(fs::exists(s / "bad"));
}

TEST_CASE("gen-teacher geometry shows up in the manifest") {
  Scratch s("teacher");
  REQUIRE(cli("gen-data --classes 10 --per-class 20 --size 16 --seed 11 --out " + q(s / "data")) == 0);
  REQUIRE(cli("gen-teacher --mode cone --rho 100 --data " + q(s / "data/data.bin") + " --out " + q(s / "cone")) == 0);
  REQUIRE(cli("gen-teacher --mode uniform --data " + q(s / "data/data.bin") + " --out " + q(s / "uni")) == 0);
  const auto cone = read_manifest(s / "cone");
  const auto uni = read_manifest(s / "uni");
  CHECK(cone.report["mean_pairwise_cosine"].get<double>() >= 0.9);
  CHECK(std::abs(uni.report["mean_pairwise_cosine"].get<double>()) <= 0.1);
  const auto store = read_emb1(s / "cone/teacher.emb1");
  CHECK(store.n == 200);
  CHECK(store.kind() == "cone");
}

TEST_CASE("train writes a reproducible run and rejects mismatched teachers") {
  Scratch s("train");
  REQUIRE(cli("gen-data " + kSmallData + " --out " + q(s / "data")) == 0);
  REQUIRE(cli("gen-teacher --mode cone --data " + q(s / "data/data.bin") + " --out " + q(s / "t")) == 0);
  REQUIRE(cli("gen-teacher --mode cone --dim 32 --data " + q(s / "data/data.bin") + " --out " + q(s / "t32")) == 0);
  const std::string common = "train --data " + q(s / "data/data.bin") + " --epochs 2 --rank-every 1 --teacher ";
  REQUIRE(cli(common + q(s / "t/teacher.emb1") + " --out " + q(s / "r1")) == 0);
  REQUIRE(cli(common + q(s / "t/teacher.emb1") + " --out " + q(s / "r2")) == 0);
  CHECK(file_sha256(s / "r1/metrics.jsonl") == file_sha256(s / "r2/metrics.jsonl"));
  CHECK(file_sha256(s / "r1/checkpoint.ckp1") == file_sha256(s / "r2/checkpoint.ckp1"));
  const auto m = read_manifest(s / "r1");
  CHECK(verify_manifest(s / "r1", m));
  CHECK(m.report["epochs"] == 2);
  CHECK(m.report.contains("final_effective_rank"));

  CHECK(cli(common + q(s / "t32/teacher.emb1") + " --out " + q(s / "bad")) == 1);
  CHECK_FALSE(fs::exists(s / "bad"));
  CHECK_FALSE(fs::exists(s / "bad.partial"));

  REQUIRE(cli("analyze --checkpoint " + q(s / "r1/checkpoint.ckp1") + " --data " + q(s / "data/data.bin") +
              " --out " + q(s / "an")) == 0);
  CHECK(read_manifest(s / "an").config["rank_embeddings"] == "normalized");
}

TEST_CASE("analyze reports a hand-checked fixture") {
  Scratch s("analyze");
  TeacherStore t;
  t.n = 4;
  t.dim = 3;
  t.values = {2, 0, 0, -2, 0, 0, 0, 1, 0, 0, -1, 0};
  write_emb1(t, s / "fixture.emb1");
  REQUIRE(cli("analyze --embeddings " + q(s / "fixture.emb1") + " --out " + q(s / "a")) == 0);
  const auto report = nlohmann::json::parse(slurp(s / "a/report.json"));
  const double er = std::exp(-(0.8 * std::log(0.8) + 0.2 * std::log(0.2)));
  CHECK(report["effective_rank"].get<double>() == doctest::Approx(er).epsilon(1e-12));
  CHECK(report["mean_pairwise_cosine"].get<double>() == doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
  const auto sv = report["singular_values"].get<std::vector<double>>();
  REQUIRE(sv.size() >= 2);
  CHECK(sv[0] == doctest::Approx(std::sqrt(8.0)).epsilon(1e-12));
  CHECK(sv[1] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(fs::exists(s / "a/spectrum.csv"));

  TeacherStore same;
  same.n = 3;
  same.dim = 2;
  same.values = {1, 2, 1, 2, 1, 2};
  write_emb1(same, s / "same.emb1");
  REQUIRE(cli("analyze --embeddings " + q(s / "same.emb1") + " --out " + q(s / "b")) == 0);
  CHECK(nlohmann::json::parse(slurp(s / "b/report.json"))["effective_rank"].get<double>() == 0.0);

  CHECK(cli("analyze --embeddings " + q(s / "fixture.emb1") + " --checkpoint " + q(s / "fixture.emb1") +
            " --out " + q(s / "c")) == 2);
}

TEST_CASE("sweep runs the grid, resumes, and summarizes") {
  Scratch s("sweep");
  {
    std::ofstream g(s / "grid.txt");
    g << "# tiny grid\nepochs = 1\nrank_eval_every = 1\nbatch_size = 8\n"
         "classes = 3\ntrain_per_class = 4\neval_per_class = 2\nbase_width = 2\n";
  }
  REQUIRE(cli("sweep --grid " + q(s / "grid.txt") + " --out " + q(s / "run")) == 0);
  const auto rows = parse_summary_csv(slurp(s / "run/summary.csv"));
  CHECK(rows.size() == 12);
  for (const auto& row : rows) {
    const auto id = CellSpec{row.teacher_kind, parse_loss_mode(row.loss_mode), row.width_factor}.id();
    const auto cell = read_manifest(s / "run" / id);
    CHECK(verify_manifest(s / "run" / id, cell));
    const auto lines = slurp(s / "run" / id / "metrics.jsonl");
    const auto last = nlohmann::json::parse(lines.substr(lines.rfind('\n', lines.size() - 2) + 1));
    CHECK(row.final_er == last["effective_rank"].get<double>());
  }
  const auto top = read_manifest(s / "run");
  CHECK(verify_manifest(s / "run", top));

  const auto before = fs::last_write_time(s / "run/cone_cosine_w1/checkpoint.ckp1");
  REQUIRE(cli("sweep --grid " + q(s / "grid.txt") + " --out " + q(s / "run")) == 0);
  CHECK(fs::last_write_time(s / "run/cone_cosine_w1/checkpoint.ckp1") == before);
  CHECK(read_manifest(s / "run").files == top.files);

  {
    std::ofstream g(s / "bad.txt");
    g << "epochs = 1\nwarp_factor = 9\n";
  }
  CHECK(cli("sweep --grid " + q(s / "bad.txt") + " --out " + q(s / "bad")) == 1);
}

}  // TEST_SUITE
