// Runs the parenlens binary end to end on a small model.
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "parenlens/report.hpp"
#include "support/cli_runner.hpp"
#include "tempdir.hpp"

using parenlens::read_csv_file;
using testing::run_cli;

namespace {

const std::string kCli = PARENLENS_CLI_PATH;

// One shared workspace: a dataset and a briefly trained 2-layer model.
struct Workspace {
  testing::TempDir dir{"cli"};
  std::string data = dir / "d.jsonl";
  std::string model = dir / "m.miw";

  Workspace() {
    ::setenv("SOURCE_DATE_EPOCH", "0", 1);  // fixed manifest timestamps
    parenlens::write_text_file(dir / "cfg.json", R"({"preset": "paper-mimic", "seed": 0})");
    auto g = run(dir, {"gen-data", "--config", dir / "cfg.json", "--out", data});
    REQUIRE(g.exit_code == 0);
    auto t = run(dir, {"train", "--data", data, "--model-out", model, "--steps", "5", "--batch", "8", "--n-layers", "2",
                       "--n-heads", "2", "--d-model", "16", "--d-head", "8", "--d-ff", "32", "--quiet"});
    REQUIRE(t.exit_code == 0);
  }
  static testing::CliRun run(const testing::TempDir& d, const std::vector<std::string>& args) {
    return run_cli(kCli, args, d.str());
  }
  testing::CliRun run(const std::vector<std::string>& args) const { return run(dir, args); }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("exit codes") {
  auto& w = workspace();
  CHECK(w.run({}).exit_code == 2);
  CHECK(w.run({"frobnicate"}).exit_code == 2);
  CHECK(w.run({"rq1", "--model", w.model}).exit_code == 2);
  CHECK(w.run({"rq1", "--model", w.dir / "missing.miw", "--data", w.data, "--out", w.dir / "o"}).exit_code == 2);
  CHECK(w.run({"rq1", "--model", w.model, "--data", w.data, "--out", w.dir / "o", "--mode", "cooked"}).exit_code == 2);
  CHECK(w.run({"train", "--data", w.data, "--model-out", w.dir / "x.miw", "--lr", "-1"}).exit_code == 2);
  auto bad = w.run({"attn", "--model", w.model, "--data", w.data, "--prompt-id", "0", "--layer", "7", "--head", "0",
                    "--out", w.dir / "a.svg"});
  CHECK(bad.exit_code == 4);
  CHECK(bad.err.find("error:") != std::string::npos);

  // An unreadable model file is an error, never a crash.
  parenlens::write_text_file(w.dir / "garbage.miw", "not a model");
  CHECK(w.run({"eval", "--model", w.dir / "garbage.miw", "--data", w.data}).exit_code != 0);
}

TEST_CASE("analysis outputs are byte-identical across runs") {
  auto& w = workspace();
  for (const std::string cmd : {"rq1", "rq2", "rq3"}) {
    auto a = w.run({cmd, "--model", w.model, "--data", w.data, "--out", w.dir / (cmd + "_a")});
    auto b = w.run({"--workers", "3", cmd, "--model", w.model, "--data", w.data, "--out", w.dir / (cmd + "_b")});
    REQUIRE(a.exit_code == 0);
    REQUIRE(b.exit_code == 0);
    CHECK(a.out == b.out);
    for (const auto& e : std::filesystem::directory_iterator(w.dir / (cmd + "_a"))) {
      const auto name = e.path().filename().string();
      CHECK_MESSAGE(testing::slurp(e.path().string()) == testing::slurp(w.dir / (cmd + "_b/" + name)), name);
    }
  }
}

TEST_CASE("cross-file consistency") {
  auto& w = workspace();
  REQUIRE(w.run({"rq2", "--model", w.model, "--data", w.data, "--out", w.dir / "x2"}).exit_code == 0);
  REQUIRE(w.run({"rq3", "--model", w.model, "--data", w.data, "--out", w.dir / "x3"}).exit_code == 0);
  auto prompts = read_csv_file(w.dir / "x2/rq2_prompts.csv");
  CHECK(prompts.rows.size() == 168);
  for (std::size_t i = 0; i < prompts.rows.size(); ++i) {
    const double f = std::stod(prompts.cell(i, "final_diff"));
    CHECK(std::abs(std::stod(prompts.cell(i, "curve_last")) - f) < 1e-3);
    CHECK(std::abs(std::stod(prompts.cell(i, "sublayer_sum")) - f) < 1e-3);
  }
  auto groups2 = read_csv_file(w.dir / "x2/groups.csv");
  auto groups3 = read_csv_file(w.dir / "x3/groups.csv");
  CHECK(groups2.rows == groups3.rows);
  auto heads = read_csv_file(w.dir / "x3/rq3_heads_per_prompt.csv");
  CHECK(heads.rows.size() == 168 * 4);
  for (const char* f : {"rq2_curve.svg", "rq2_sublayer.svg", "rq2_manifest.json", "rq2_per_prompt.jsonl"}) {
    CHECK(std::filesystem::exists(w.dir / (std::string("x2/") + f)));
  }
  auto manifest = testing::slurp(w.dir / "x2/rq2_manifest.json");
  CHECK(manifest.find(parenlens::file_hash(w.model)) != std::string::npos);
  CHECK(manifest.find(parenlens::file_hash(w.data)) != std::string::npos);
  CHECK(manifest.find("1970-01-01T00:00:00Z") != std::string::npos);
}

TEST_CASE("eval and attention") {
  auto& w = workspace();
  auto e = w.run({"eval", "--model", w.model, "--data", w.data, "--out", w.dir / "pred.csv"});
  REQUIRE(e.exit_code == 0);
  CHECK(read_csv_file(w.dir / "pred.csv").rows.size() == 168);
  auto a = w.run({"attn", "--model", w.model, "--data", w.data, "--prompt-id", "3", "--layer", "1", "--head", "1",
                  "--out", w.dir / "att.svg"});
  REQUIRE(a.exit_code == 0);
  auto row = read_csv_file(w.dir / "att.csv");
  double sum = 0;
  for (std::size_t i = 0; i < row.rows.size(); ++i) sum += std::stod(row.cell(i, "weight"));
  CHECK(std::abs(sum - 1.0) < 1e-4);
  CHECK(std::filesystem::exists(w.dir / "att.svg"));
  CHECK(std::filesystem::exists(w.dir / "att_matrix.csv"));
}
