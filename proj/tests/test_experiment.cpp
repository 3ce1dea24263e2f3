#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "dcollapse/error.hpp"
#include "dcollapse/experiment.hpp"
#include "dcollapse/manifest.hpp"

using namespace dcollapse;
namespace fs = std::filesystem;

TEST_SUITE("experiment") {

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex(std::string()) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("manifest hashes every file and detects tampering") {
  const auto dir = fs::temp_directory_path() / "dcollapse_manifest_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "sub");
  std::ofstream(dir / "b.txt") << "beta";
  std::ofstream(dir / "sub" / "a.txt") << "abc";
  RunManifest m;
  m.command = "unit";
  m.config = {{"x", 1}};
  const auto written = write_manifest(dir, m);
  REQUIRE(written.files.size() == 2);
  CHECK(written.files[0].path == "b.txt");
  CHECK(written.files[1].path == "sub/a.txt");
  CHECK(written.files[1].sha256 == sha256_hex(std::string("abc")));
  CHECK(written.files[1].bytes == 3);
  CHECK(written.run_id == make_run_id("unit", m.config, m.inputs));
  CHECK(written.run_id.size() == 16);

  const auto back = read_manifest(dir);
  CHECK(back.files == written.files);
  CHECK(back.run_id == written.run_id);
  CHECK(verify_manifest(dir, back));

  std::ofstream(dir / "sub" / "a.txt") << "abd";
  CHECK_FALSE(verify_manifest(dir, back));
  fs::remove(dir / "b.txt");
  CHECK_FALSE(verify_manifest(dir, back));

  std::ofstream(dir / kManifestName) << "{not json";
  CHECK_THROWS_AS(read_manifest(dir), InvalidInput);
  fs::remove_all(dir);
}

TEST_CASE("run id depends on command, config and inputs") {
  const nlohmann::json c = {{"a", 1}}, i = {{"f", "00"}};
  const auto id = make_run_id("train", c, i);
  CHECK(id == make_run_id("train", c, i));
  CHECK(id != make_run_id("sweep", c, i));
  CHECK(id != make_run_id("train", {{"a", 2}}, i));
  CHECK(id != make_run_id("train", c, {{"f", "01"}}));
}

TEST_CASE("grid file overrides the desk defaults") {
  const auto g = parse_grid("# comment\nteachers = uniform\nlosses = cosine+infonce\nwidths = 1, 3\n"
                            "sigmas = 0,0.3\nepochs = 7   # trailing\nlearning_rate = 1e-4\nrho = 2.5\n"
                            "train_per_class = 9\nrank_input = raw\n\n");
  CHECK(g.teachers == std::vector<std::string>{"uniform"});
  CHECK(g.losses == std::vector<LossMode>{LossMode::CosineInfoNCE});
  CHECK(g.widths == std::vector<int>{1, 3});
  CHECK(g.sigmas == std::vector<double>{0.0, 0.3});
  CHECK(g.train.epochs == 7);
  CHECK(g.train.learning_rate == 1e-4);
  CHECK(g.cone.cone_offset == 2.5);
  CHECK(g.train_data.per_class == 9);
  CHECK(g.train.rank_input == RankInput::Raw);
  const auto base = default_desk_config();
  CHECK(g.train.batch_size == base.train.batch_size);
  CHECK(g.eval_data.per_class == base.eval_data.per_class);

  const auto cells = grid_cells(g);
  REQUIRE(cells.size() == 2);
  CHECK(cells[1].id() == "uniform_cosine+infonce_w3");
}

TEST_CASE("grid file errors") {
  CHECK_THROWS_AS(parse_grid("warp = 9\n"), InvalidInput);
  CHECK_THROWS_AS(parse_grid("epochs 9\n"), InvalidInput);
  CHECK_THROWS_AS(parse_grid("epochs = nine\n"), InvalidInput);
  CHECK_THROWS_AS(parse_grid("teachers = cone, sphere\n").validate(), InvalidInput);
  CHECK_THROWS_AS(parse_grid("losses = l2\n"), InvalidInput);
  CHECK_THROWS_AS(parse_grid("rank_input = sideways\n"), InvalidInput);
  CHECK_THROWS_AS(parse_grid("widths = 0\n").validate(), InvalidInput);
  CHECK_FALSE(grid_keys().empty());
}

TEST_CASE("cell config carries width, loss and teacher") {
  const auto desk = default_desk_config();
  const CellSpec cell{"uniform", LossMode::CosineInfoNCE, 4};
  const auto c = cell_train_config(desk, cell);
  CHECK(c.student.width_factor == 4);
  CHECK(c.loss.mode == LossMode::CosineInfoNCE);
  CHECK(c.epochs == desk.train.epochs);
  CHECK(grid_cells(desk).size() == 12);
}

TEST_CASE("summary csv round trip") {
  const std::vector<SummaryRow> rows = {{"cone", "cosine", 1, 5792, 4.803311234567891, 1.0, 0.998},
                                        {"uniform", "cosine+infonce", 4, 78272, 23.5, 0.1 + 0.2, 0.0}};
  const auto text = summary_csv(rows);
  CHECK(text.rfind("teacher_kind,loss_mode,width_factor,params,final_ER,clean_acc,acc@sigma=0.2\n", 0) == 0);
  CHECK(parse_summary_csv(text) == rows);
  CHECK_THROWS_AS(parse_summary_csv("h\ncone,cosine,1\n"), InvalidInput);
}

}  // TEST_SUITE
