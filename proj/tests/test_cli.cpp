#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "longidiff/volume.hpp"
#include "longidiff/volume_io.hpp"

using namespace longidiff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("longidiff_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Runs the CLI with the given argument string, capturing stdout+stderr.
int run_cli(const std::string& args, const fs::path& capture = {}) {
  std::string cmd = std::string(LONGIDIFF_CLI_PATH) + " " + args;
  if (capture.empty())
    cmd += " > /dev/null 2>&1";
  else
    cmd += " > " + capture.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  return slurp(a) == slurp(b);
}

/// Writes the tiny run config shared by the pipeline tests: 24^3 phantoms,
/// a 2-level 2-channel model, and a 2-epoch 3-step training schedule.
fs::path write_tiny_config(const fs::path& dir) {
  const fs::path path = dir / "tiny.json";
  std::ofstream out(path);
  out << R"({
  "phantom": {
    "dims": [24, 24, 24],
    "timepoint_range": [2, 3],
    "persistent_count": [1, 2],
    "new_count": [1, 2],
    "distractor_count": [1, 2]
  },
  "model": {"levels": 2, "base_channels": 2},
  "train": {"epochs": 2, "steps_per_epoch": 3, "patch_size": [16, 16, 16],
            "val_interval": 1},
  "gen": {"patients": 4, "split_fractions": [0.5, 0.5], "seed": 9}
})";
  return path;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  const fs::path dir = fresh_dir("usage");
  const fs::path log = dir / "out.txt";

  CHECK(run_cli("--help", log) == 0);
  CHECK(slurp(log).find("Subcommands") != std::string::npos);

  CHECK(run_cli("", log) == 2);
  CHECK(run_cli("gen", log) == 2);  // missing required --out
  CHECK(run_cli("train --variant nope --data " + dir.string() + " --out " +
                    dir.string(),
                log) == 2);

  // Unknown keys anywhere in a config file are rejected.
  std::ofstream(dir / "bad.json") << R"({"train": {"epochz": 3}})";
  CHECK(run_cli("train --data " + dir.string() + " --out " + dir.string() +
                    " --config " + (dir / "bad.json").string(),
                log) == 2);
  CHECK(slurp(log).find("unknown key train.epochz") != std::string::npos);

  std::ofstream(dir / "bad2.json") << R"({"training": {}})";
  CHECK(run_cli("gen --out " + dir.string() + " --spec " +
                    (dir / "bad2.json").string(),
                log) == 2);
  CHECK(slurp(log).find("unknown section training") != std::string::npos);
}

TEST_CASE("data errors exit with code 3") {
  const fs::path dir = fresh_dir("dataerr");
  CHECK(run_cli("train --data " + (dir / "nowhere").string() + " --out " +
                dir.string()) == 3);
  CHECK(run_cli("eval --pred " + dir.string() + " --gt " +
                (dir / "nowhere").string() + " --report " +
                (dir / "r.json").string()) == 3);
}

TEST_CASE("gen is deterministic and echoes its config") {
  const fs::path dir = fresh_dir("gen");
  const fs::path cfg = write_tiny_config(dir);

  const std::string base = "gen --spec " + cfg.string() + " --out ";
  REQUIRE(run_cli(base + (dir / "a").string()) == 0);
  REQUIRE(run_cli(base + (dir / "b").string()) == 0);

  CHECK(fs::exists(dir / "a" / "manifest.json"));
  CHECK(same_bytes(dir / "a" / "manifest.json", dir / "b" / "manifest.json"));
  CHECK(same_bytes(dir / "a" / "p0000" / "tp0_image.vol",
                   dir / "b" / "p0000" / "tp0_image.vol"));
  CHECK(same_bytes(dir / "a" / "p0003" / "tp1_mask.vol",
                   dir / "b" / "p0003" / "tp1_mask.vol"));

  // The echoed config resolves every section, including ones the spec file
  // never mentioned.
  const json echoed = json::parse(slurp(dir / "a" / "config.json"));
  CHECK(echoed["phantom"]["dims"] == json::array({24, 24, 24}));
  CHECK(echoed["gen"]["patients"] == 4);
  CHECK(echoed["eval"]["iou_threshold"] == 0.1);
  CHECK(echoed["train"]["momentum"] == 0.99);

  // Flags override the spec file.
  REQUIRE(run_cli("gen --spec " + cfg.string() + " --patients 2 --seed 5 --out " +
                  (dir / "c").string()) == 0);
  const json c = json::parse(slurp(dir / "c" / "config.json"));
  CHECK(c["gen"]["patients"] == 2);
  CHECK(c["gen"]["seed"] == 5);
  CHECK_FALSE(fs::exists(dir / "c" / "p0002"));
}

TEST_CASE("gen, train, predict, eval pipeline") {
  const fs::path dir = fresh_dir("pipeline");
  const fs::path cfg = write_tiny_config(dir);
  const fs::path data = dir / "data";
  const fs::path log = dir / "out.txt";
  REQUIRE(run_cli("gen --spec " + cfg.string() + " --out " + data.string()) == 0);

  SUBCASE("training writes checkpoints and a parsable log, bit-identically") {
    const std::string train = "train --variant diffweight --config " +
                              cfg.string() + " --data " + data.string() +
                              " --seed 3 --out ";
    REQUIRE(run_cli(train + (dir / "runA").string(), log) == 0);
    REQUIRE(run_cli(train + (dir / "runB").string()) == 0);

    CHECK(same_bytes(dir / "runA" / "checkpoint_final.ckpt",
                     dir / "runB" / "checkpoint_final.ckpt"));
    CHECK(same_bytes(dir / "runA" / "checkpoint_best.ckpt",
                     dir / "runB" / "checkpoint_best.ckpt"));

    std::ifstream lines(dir / "runA" / "train_log.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
      const json rec = json::parse(line);
      ++n;
      CHECK(rec["epoch"] == n);
      CHECK(rec["lr"].is_number());
      CHECK(rec["train_loss"].is_number());
      CHECK(rec["val_dsc"].is_number());  // val_interval 1: every epoch
    }
    CHECK(n == 2);
  }

  SUBCASE("predict and eval produce full-grid masks and byte-stable reports") {
    REQUIRE(run_cli("train --variant single --config " + cfg.string() +
                    " --data " + data.string() + " --seed 3 --out " +
                    (dir / "run").string()) == 0);
    REQUIRE(run_cli("predict --ckpt " +
                    (dir / "run" / "checkpoint_best.ckpt").string() +
                    " --config " + cfg.string() + " --data " + data.string() +
                    " --split test --out " + (dir / "pred").string()) == 0);

    // Predictions are embedded back into the original grid.
    const VolumeU8 gt = read_volume_u8(data / "p0002" / "tp0_mask.vol");
    const VolumeU8 pred = read_volume_u8(dir / "pred" / "p0002" / "tp0_pred.vol");
    CHECK(gt.same_dims(pred));

    const std::string eval = "eval --pred " + (dir / "pred").string() +
                             " --gt " + data.string() + " --report ";
    REQUIRE(run_cli(eval + (dir / "r1.json").string(), log) == 0);
    REQUIRE(run_cli(eval + (dir / "r2.json").string()) == 0);
    CHECK(same_bytes(dir / "r1.json", dir / "r2.json"));
    CHECK(slurp(log).find("cohort") != std::string::npos);

    const json rep = json::parse(slurp(dir / "r1.json"));
    CHECK(rep["format"] == "longidiff-report v1");
    CHECK(rep["cohort"]["patients"] == 2);  // the test split
    CHECK(rep["scans"].size() == 6);
  }

  SUBCASE("evaluating the ground truth against itself is perfect") {
    for (const std::string pid : {"p0002", "p0003"}) {
      fs::create_directories(dir / "gtpred" / pid);
      for (int t = 0;; ++t) {
        const fs::path mask = data / pid / ("tp" + std::to_string(t) + "_mask.vol");
        if (!fs::exists(mask)) break;
        fs::copy_file(mask,
                      dir / "gtpred" / pid / ("tp" + std::to_string(t) + "_pred.vol"));
      }
    }
    REQUIRE(run_cli("eval --pred " + (dir / "gtpred").string() + " --gt " +
                    data.string() + " --report " + (dir / "gt.json").string()) == 0);
    const json rep = json::parse(slurp(dir / "gt.json"));
    CHECK(rep["cohort"]["dsc"] == 1.0);
    CHECK(rep["cohort"]["f1"] == 1.0);
    CHECK(rep["cohort"]["hd95_mm"] == 0.0);
  }
}

TEST_CASE("size filter toggle changes lesion F1 in the expected direction") {
  // One patient, two timepoints. GT has a large matched lesion plus a
  // 1-voxel (1 mm^3) lesion the prediction misses. With the 3 mm^3 filter
  // the miss is forgiven; --no-size-filter exposes it as a false negative.
  const fs::path dir = fresh_dir("sizefilter");
  const std::array<double, 3> sp{1.0, 1.0, 1.0};

  VolumeU8 gt({12, 12, 12});
  for (int z = 2; z < 6; ++z)
    for (int y = 2; y < 6; ++y)
      for (int x = 2; x < 6; ++x) gt.at(x, y, z) = 1;
  gt.at(9, 9, 9) = 1;  // sub-threshold satellite
  VolumeU8 pred({12, 12, 12});
  for (int z = 2; z < 6; ++z)
    for (int y = 2; y < 6; ++y)
      for (int x = 2; x < 6; ++x) pred.at(x, y, z) = 1;

  VolumeF img({12, 12, 12});
  for (int64_t i = 0; i < img.numel(); ++i) img.voxels[i] = 1.0f;

  fs::create_directories(dir / "gt" / "p0");
  fs::create_directories(dir / "pred" / "p0");
  for (int t = 0; t < 2; ++t) {
    write_volume(dir / "gt" / "p0" / ("tp" + std::to_string(t) + "_image.vol"), img, sp);
    write_volume(dir / "gt" / "p0" / ("tp" + std::to_string(t) + "_mask.vol"), gt, sp);
    write_volume(dir / "pred" / "p0" / ("tp" + std::to_string(t) + "_pred.vol"), pred, sp);
  }
  std::ofstream(dir / "gt" / "manifest.json") << R"({
  "format": "longidiff-manifest v1",
  "spacing_mm": [1.0, 1.0, 1.0],
  "patients": [{"id": "p0", "split": "test", "timepoints": [
    {"image": "p0/tp0_image.vol", "mask": "p0/tp0_mask.vol"},
    {"image": "p0/tp1_image.vol", "mask": "p0/tp1_mask.vol"}]}]
})";

  const std::string base = "eval --pred " + (dir / "pred").string() + " --gt " +
                           (dir / "gt").string();
  REQUIRE(run_cli(base + " --report " + (dir / "filtered.json").string()) == 0);
  REQUIRE(run_cli(base + " --no-size-filter --report " +
                  (dir / "unfiltered.json").string()) == 0);

  const json f = json::parse(slurp(dir / "filtered.json"));
  const json u = json::parse(slurp(dir / "unfiltered.json"));
  CHECK(f["cohort"]["f1"] == 1.0);
  CHECK(u["cohort"]["f1"].get<double>() < 1.0);
  CHECK(u["scans"][0]["fn_lesions"] == 1);
  CHECK(f["scans"][0]["fn_lesions"] == 0);
}

TEST_CASE("corrupt inputs are rejected with exit code 3") {
  const fs::path dir = fresh_dir("corrupt");
  const fs::path cfg = write_tiny_config(dir);
  const fs::path data = dir / "data";
  REQUIRE(run_cli("gen --spec " + cfg.string() + " --patients 2 --out " +
                  data.string()) == 0);

  // Truncate a volume payload.
  const fs::path vol = data / "p0000" / "tp0_image.vol";
  const std::string bytes = slurp(vol);
  std::ofstream(vol, std::ios::binary).write(bytes.data(), bytes.size() / 2);
  CHECK(run_cli("train --config " + cfg.string() + " --data " + data.string() +
                " --out " + (dir / "run").string()) == 3);

  // A checkpoint with a flipped magic line.
  std::ofstream(dir / "bad.ckpt") << "longidiff-checkpoint v9\nend\n";
  CHECK(run_cli("predict --ckpt " + (dir / "bad.ckpt").string() + " --data " +
                data.string() + " --out " + (dir / "p").string()) == 3);
}

TEST_CASE("verify subcommand reports suite results") {
  const fs::path dir = fresh_dir("verify");
  const fs::path log = dir / "out.txt";
  CHECK(run_cli("verify metric-oracles", log) == 0);
  const std::string out = slurp(log);
  CHECK(out.find("PASS oracle/dice") != std::string::npos);
  CHECK(out.find("all 4 checks passed") != std::string::npos);

  CHECK(run_cli("verify bogus", log) == 2);
}
