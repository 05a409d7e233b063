#include "doctest.h"

#include "quadfit/fitter.hpp"
#include "quadfit/io.hpp"
#include "quadfit/regressor.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace quadfit;
namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "quadfit_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

int run(const std::string& args) {
  const std::string cmd = std::string(QUADFIT_CLI) + " " + args + " >> " + path("cli.log") + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::string write_config(const std::string& name, const Json& j) {
  const std::string p = path(name);
  write_json(p, j);
  return p;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Relative path -> contents of every regular file under dir.
std::map<std::string, std::string> snapshot(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = bytes(e.path());
  return out;
}

std::vector<std::vector<std::string>> read_csv(const std::string& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

const Json& small_dataset() {
  static const Json j = {{"breeds", {{"num_breeds", 4}, {"num_clades", 2}}},
                         {"dataset",
                          {{"per_breed", 5},
                           {"width", 96},
                           {"height", 96},
                           {"focal_min", 190.0},
                           {"focal_max", 260.0}}}};
  return j;
}

Json small_train(int epochs) {
  TrainConfig c;
  c.arch.hidden = 32;
  c.arch.hidden_layers = 2;
  c.arch.z_dim = 8;
  c.arch.bps_points = 16;
  c.epochs = epochs;
  c.batch_size = 4;
  c.breeds_per_batch = 2;
  c.pretrain_samples = 64;
  c.pretrain_epochs = 2;
  c.pretrain_camera = DatasetConfig::from_json(small_dataset().at("dataset"));
  c.weights.f_target = 225.0;
  return c.to_json();
}

// Model, priors and data shared by the tests, built once through the CLI.
struct Pipeline {
  std::string model = path("base_model/model"), priors = path("base_prior/priors"), data = path("base_data/data");
  Pipeline() {
    const std::string mc = write_config("model.json", {{"num_dogs", 8}, {"num_others", 2}, {"num_components", 6}});
    REQUIRE(run("build-model --config " + mc + " --seed 3 --out " + path("base_model")) == 0);
    const std::string pc = write_config("prior.json", {{"samples", 300}, {"epochs", 2}, {"hidden", 16}, {"layers", 2}});
    REQUIRE(run("train-prior --config " + pc + " --seed 4 --model " + model + " --out " + path("base_prior")) == 0);
    const std::string dc = write_config("data.json", small_dataset());
    REQUIRE(run("gen-data --config " + dc + " --seed 5 --model " + model + " --priors " + priors + " --out " +
                path("base_data")) == 0);
  }
};

const Pipeline& pipeline() {
  static const Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("cli commands are bit-reproducible per seed") {
  const Pipeline& p = pipeline();

  SUBCASE("build-model and train-prior") {
    const std::string mc = path("model.json"), pc = path("prior.json");
    REQUIRE(run("build-model --config " + mc + " --seed 3 --out " + path("bm2")) == 0);
    CHECK(snapshot(path("bm2")) == snapshot(path("base_model")));
    REQUIRE(run("build-model --config " + mc + " --seed 8 --out " + path("bm3")) == 0);
    CHECK(snapshot(path("bm3") + "/model") != snapshot(p.model));

    REQUIRE(run("train-prior --config " + pc + " --seed 4 --model " + p.model + " --out " + path("tp2")) == 0);
    CHECK(snapshot(path("tp2")) == snapshot(path("base_prior")));
  }

  SUBCASE("gen-data is independent of --jobs") {
    const std::string dc = path("data.json");
    REQUIRE(run("gen-data --config " + dc + " --seed 5 --jobs 3 --model " + p.model + " --priors " + p.priors +
                " --out " + path("gd2")) == 0);
    CHECK(snapshot(path("gd2")) == snapshot(path("base_data")));
    REQUIRE(run("gen-data --config " + dc + " --seed 6 --model " + p.model + " --priors " + p.priors + " --out " +
                path("gd3")) == 0);
    CHECK(snapshot(path("gd3") + "/data") != snapshot(p.data));
  }

  SUBCASE("fit is independent of --jobs") {
    FitConfig fc = FitConfig::defaults();
    for (FitStage& s : fc.stages) s.iterations = 10;
    fc.weights.f_target = 225.0;
    const std::string cfg = write_config("fit.json", {{"fit", fc.to_json()}, {"split", "test"}, {"limit", 3}});
    const std::string common = " --model " + p.model + " --priors " + p.priors + " --data " + p.data + " --seed 1";
    REQUIRE(run("fit --config " + cfg + common + " --jobs 1 --out " + path("fit1")) == 0);
    REQUIRE(run("fit --config " + cfg + common + " --jobs 3 --out " + path("fit3")) == 0);
    CHECK(snapshot(path("fit1")) == snapshot(path("fit3")));
    const auto rows = read_csv(path("fit1") + "/predictions.jsonl");
    CHECK(rows.size() == 3);
    const Json manifest = read_json(path("fit1") + "/manifest.json");
    CHECK(manifest.at("command") == "fit");
    CHECK(manifest.at("model_hash") == content_hash(p.model));
    CHECK(manifest.at("seed") == 1);

    REQUIRE(run("eval --pred " + path("fit1") + "/predictions.jsonl --model " + p.model + " --data " + p.data +
                " --out " + path("fit1_eval")) == 0);
    const auto report = read_csv(path("fit1_eval") + "/report.csv");
    CHECK(report.size() >= 2);
  }

  SUBCASE("render") {
    const std::string cfg = write_config("render.json", {{"instances", {0, 7}}});
    const std::string args = "render --config " + cfg + " --model " + p.model + " --data " + p.data + " --out ";
    REQUIRE(run(args + path("r1")) == 0);
    REQUIRE(run(args + path("r2")) == 0);
    CHECK(snapshot(path("r1")) == snapshot(path("r2")));
    CHECK(fs::exists(path("r1") + "/render_00007.ppm"));
    CHECK(bytes(path("r1") + "/render_00000.ppm").rfind("P6\n96 96\n255\n", 0) == 0);
  }
}

TEST_CASE("cli eval") {
  const Pipeline& p = pipeline();

  SUBCASE("dataset against its own ground truth") {
    // zero intra-breed spread so every instance has its prototype's shape
    Json dc = small_dataset();
    dc["breeds"]["intra"] = 0.0;
    const std::string cfg = write_config("data_exact.json", dc);
    REQUIRE(run("gen-data --config " + cfg + " --seed 5 --model " + p.model + " --priors " + p.priors + " --out " +
                path("exact")) == 0);
    const std::string ec = write_config("eval_all.json", {{"split", ""}});
    REQUIRE(run("eval --config " + ec + " --model " + p.model + " --data " + path("exact/data") + " --out " +
                path("self_eval")) == 0);
    const auto rows = read_csv(path("self_eval") + "/report.csv");
    REQUIRE(rows.size() == 5);
    CHECK(rows[0] == std::vector<std::string>{"breed", "n", "mean_v2v", "var_v2v", "pck@0.15", "iou"});
    for (std::size_t r = 1; r < rows.size(); ++r) {
      CHECK(rows[r][1] == "5");
      CHECK(std::stod(rows[r][2]) < 1e-9);
      CHECK(std::stod(rows[r][4]) == 100.0);
      CHECK(std::stod(rows[r][5]) == 1.0);
    }
  }

  SUBCASE("train then eval reproduces the recorded validation consistency") {
    const std::string cfg = write_config("train.json", small_train(2));
    const std::string common = " --model " + p.model + " --priors " + p.priors + " --data " + p.data + " --seed 2";
    REQUIRE(run("train --config " + cfg + common + " --out " + path("train1")) == 0);
    REQUIRE(run("train --config " + cfg + common + " --out " + path("train2")) == 0);
    CHECK(snapshot(path("train1")) == snapshot(path("train2")));

    const std::string ec = write_config("eval_val.json", {{"split", "val"}});
    REQUIRE(run("eval --config " + ec + " --pred " + path("train1") + "/predictions.jsonl --model " + p.model +
                " --data " + p.data + " --out " + path("train_eval")) == 0);
    const auto report = read_csv(path("train_eval") + "/report.csv");
    const auto history = read_csv(path("train1") + "/history.csv");
    const std::vector<std::string>& header = history.front();
    const std::vector<std::string>& last = history.back();
    REQUIRE(report.size() == 5);
    for (std::size_t r = 1; r < report.size(); ++r) {
      const std::string col = "val_proto_" + std::to_string(r - 1);
      const auto it = std::find(header.begin(), header.end(), col);
      REQUIRE(it != header.end());
      const double recorded = std::stod(last[it - header.begin()]);
      CHECK(std::abs(std::stod(report[r][2]) - recorded) < 1e-9);
    }
    CHECK(read_text(path("train_eval") + "/summary.txt").find("latent cluster quality") != std::string::npos);
  }
}

TEST_CASE("cli exit codes") {
  const Pipeline& p = pipeline();
  const std::string inputs = " --model " + p.model + " --priors " + p.priors + " --data " + p.data;

  SUBCASE("malformed config: 2") {
    write_text(path("broken.json"), "{\"epochs\": 3,");
    CHECK(run("train --config " + path("broken.json") + inputs + " --out " + path("x")) == 2);
    const std::string unknown = write_config("unknown.json", {{"epoch", 3}});
    CHECK(run("train --config " + unknown + inputs + " --out " + path("x")) == 2);
    const std::string wrong = write_config("wrong_type.json", {{"dataset", {{"per_breed", "five"}}}});
    CHECK(run("gen-data --config " + wrong + " --model " + p.model + " --priors " + p.priors + " --out " +
              path("x")) == 2);
    CHECK(run("train" + inputs + " --bogus 1 --out " + path("x")) == 2);
    CHECK(run("fit --model " + p.model + " --out " + path("x")) == 2);  // --priors / --data not given
  }

  SUBCASE("missing input: 3") {
    CHECK(run("train --config " + path("absent.json") + inputs + " --out " + path("x")) == 3);
    CHECK(run("fit --model " + path("nowhere") + " --priors " + p.priors + " --data " + p.data + " --out " +
              path("x")) == 3);
    fs::create_directories(path("empty_model"));
    CHECK(run("eval --model " + path("empty_model") + " --data " + p.data + " --out " + path("x")) == 3);
  }

  SUBCASE("divergence: 4, with the history written") {
    Json cfg = small_train(5);
    cfg["lr"] = 1e8;
    const std::string c = write_config("diverge.json", cfg);
    CHECK(run("train --config " + c + inputs + " --out " + path("diverged")) == 4);
    CHECK(fs::exists(path("diverged") + "/history.csv"));
    CHECK(fs::exists(path("diverged") + "/manifest.json"));
    CHECK(!fs::exists(path("diverged") + "/regressor"));
  }
}
