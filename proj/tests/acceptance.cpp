// Acceptance gate: one criterion per run (argument 1-7) or all in sequence
// (no argument). Prints exactly one PASS/FAIL line per criterion; exits
// nonzero if any run criterion failed.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "longidiff/metrics.hpp"
#include "longidiff/network.hpp"
#include "longidiff/ops.hpp"
#include "longidiff/preprocess.hpp"
#include "longidiff/rng.hpp"
#include "longidiff/synthdata.hpp"
#include "longidiff/tensor.hpp"
#include "longidiff/trainer.hpp"
#include "longidiff/verify.hpp"
#include "longidiff/volume_io.hpp"

using namespace longidiff;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;
using nlohmann::json;

namespace {

double seconds_since(clk::time_point t0) {
  return std::chrono::duration<double>(clk::now() - t0).count();
}

struct Criterion {
  bool passed = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail += detail.empty() ? "" : "; ";
      detail += what;
    }
  }
  void note(const std::string& what) {
    detail += detail.empty() ? "" : "; ";
    detail += what;
  }
};

int run_cli(const std::string& args, const fs::path& capture = {}) {
  std::string cmd = std::string(LONGIDIFF_CLI_PATH) + " " + args;
  cmd += capture.empty() ? " > /dev/null 2>&1"
                         : " > " + capture.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (rc == -1 || !WIFEXITED(rc)) return -1;
  return WEXITSTATUS(rc);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// --------------------------------------------------------------------------
// 1. Gradient correctness: every op-level and full-forward gradient check
//    passes with max relative error < 1e-4 (64-bit, central differences,
//    h = 1e-3), in under 2 minutes.

Criterion criterion_gradcheck() {
  Criterion c;
  const auto t0 = clk::now();
  const auto checks = verify_gradcheck();
  const double elapsed = seconds_since(t0);

  double worst = 0.0;
  for (const auto& r : checks) {
    c.require(r.passed && r.bound <= 1e-4,
              r.name + " err " + fmt("%.3g", r.value));
    worst = std::max(worst, r.value);
  }
  c.require(checks.size() >= 8, "suite shrank");
  c.require(elapsed < 120.0, "runtime " + fmt("%.1f", elapsed) + " s >= 120 s");
  c.note("max rel err " + fmt("%.2e", worst) + " over " +
         std::to_string(checks.size()) + " checks, " + fmt("%.2f", elapsed) + " s");
  return c;
}

// --------------------------------------------------------------------------
// 2. Difference-weighting identities: identical timepoints reduce the fused
//    forward to the plain decode bit-exactly; per-channel constant shifts of
//    the prior move the output by <= 1e-5; single and diffweight parameter
//    counts are equal. Under 1 minute.

Criterion criterion_identities() {
  Criterion c;
  const auto t0 = clk::now();
  const auto checks = verify_block_identities();
  const double elapsed = seconds_since(t0);

  for (const auto& r : checks)
    c.require(r.passed, r.name + " value " + fmt("%.3g", r.value));
  c.require(checks.size() >= 4, "suite shrank");
  c.require(elapsed < 60.0, "runtime " + fmt("%.1f", elapsed) + " s >= 60 s");
  c.note(std::to_string(checks.size()) + " identities, " + fmt("%.2f", elapsed) +
         " s");
  return c;
}

// --------------------------------------------------------------------------
// 3. Metric oracle equivalence on 200 random <= 8^3 mask pairs: dice exact,
//    hd95 within 1e-9 of the all-pairs oracle, connected components and
//    lesion matching identical to brute-force re-derivations. Under 2 min.

Criterion criterion_metric_oracles() {
  Criterion c;
  const auto t0 = clk::now();
  const auto checks = verify_metric_oracles(200);
  const double elapsed = seconds_since(t0);

  for (const auto& r : checks)
    c.require(r.passed, r.name + " value " + fmt("%.3g", r.value));
  c.require(checks.size() == 4, "suite shrank");
  c.require(elapsed < 120.0, "runtime " + fmt("%.1f", elapsed) + " s >= 120 s");
  c.note("200 trials x 4 oracles, " + fmt("%.2f", elapsed) + " s");
  return c;
}

// --------------------------------------------------------------------------
// 4. Protocol constants: the size filter removes components strictly below
//    3 mm^3 and keeps 3 mm^3 exactly; IoU 0.05 stays unmatched at the 0.1
//    threshold while 0.1 exactly matches; cohort aggregation weights
//    patients, not scans; disabling the size filter lowers F1 when a
//    sub-threshold ground-truth lesion was missed.

Criterion criterion_protocol() {
  Criterion c;
  const std::array<double, 3> sp{1.0, 1.0, 1.0};

  {
    VolumeU8 m({12, 4, 4});
    m.at(0, 0, 0) = m.at(1, 0, 0) = m.at(2, 0, 0) = 1;  // 3 mm^3: kept
    m.at(8, 0, 0) = m.at(9, 0, 0) = 1;                  // 2 mm^3: removed
    const VolumeU8 f = filter_small_lesions(m, sp, 3.0, true);
    int64_t kept = 0;
    for (auto v : f.voxels) kept += v;
    c.require(kept == 3 && f.at(0, 0, 0) == 1 && f.at(8, 0, 0) == 0,
              "size filter boundary: kept " + std::to_string(kept) + " voxels");
  }

  {
    // One 10-voxel GT bar vs an 11-voxel prediction overlapping in 1 voxel:
    // IoU = 1/20 = 0.05 -> no match at threshold 0.1.
    VolumeU8 gt({24, 2, 2}), pred({24, 2, 2});
    for (int x = 0; x < 10; ++x) gt.at(x, 0, 0) = 1;
    for (int x = 9; x < 20; ++x) pred.at(x, 0, 0) = 1;
    const auto g = connected_components(gt, sp);
    const auto p = connected_components(pred, sp);
    const auto res = lesion_f1(g, p, 0.1);
    c.require(res.tp == 0 && res.f1 == 0.0, "IoU 0.05 matched");

    // Two overlap voxels (IoU = 2/20 = 0.1) meet the >= threshold.
    VolumeU8 pred2({24, 2, 2});
    for (int x = 8; x < 20; ++x) pred2.at(x, 0, 0) = 1;
    const auto res2 = lesion_f1(g, connected_components(pred2, sp), 0.1);
    c.require(res2.tp == 1 && res2.f1 == 1.0, "IoU 0.10 unmatched");
  }

  {
    // Patient A scans {1.0, 0.4} -> 0.7, patient B {0.9} -> cohort 0.8;
    // the naive scan mean would be 0.766...
    ScanMetrics a0, a1, b0;
    a0.patient_id = a1.patient_id = "A";
    b0.patient_id = "B";
    a0.timepoint = 0;
    a1.timepoint = 1;
    a0.dsc = 1.0;
    a1.dsc = 0.4;
    b0.dsc = 0.9;
    const CohortReport rep = aggregate({a0, a1, b0});
    c.require(std::abs(rep.dsc - 0.8) < 1e-12,
              "patient-weighted dsc " + fmt("%.6f", rep.dsc) + " != 0.8");
  }

  {
    // Missed sub-3 mm^3 GT lesion: forgiven when filtered, a false negative
    // without the filter.
    VolumeU8 gt({12, 12, 12}), pred({12, 12, 12});
    for (int z = 2; z < 6; ++z)
      for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) gt.at(x, y, z) = pred.at(x, y, z) = 1;
    gt.at(10, 10, 10) = 1;
    const ScanMetrics filt = evaluate_scan(gt, pred, sp, 0.1, 3.0, true);
    const ScanMetrics raw = evaluate_scan(gt, pred, sp, 0.1, 3.0, false);
    c.require(filt.f1 == 1.0 && raw.f1 < filt.f1 && raw.fn_lesions == 1,
              "size-filter toggle direction: filtered " + fmt("%.3f", filt.f1) +
                  " unfiltered " + fmt("%.3f", raw.f1));
  }

  c.note("size-filter boundary, IoU boundary, aggregation, filter toggle");
  return c;
}

// --------------------------------------------------------------------------
// 5. Desk-scale ablation, the core directional claim: on a generated cohort
//    (40 train / 10 test patients, 48^3 volumes, patch 32^3, 3 seeds) the
//    difference-weighted variant beats the single-timepoint baseline by
//    >= 5 lesion-F1 points and >= 0 DSC. Concat is reported alongside.
//    Runs the real CLI end to end with the shipped desk-scale training
//    recipe; total under 90 minutes.

Criterion criterion_ablation() {
  Criterion c;
  const auto t0 = clk::now();
  const fs::path dir = fs::temp_directory_path() / "longidiff_acceptance_c5";
  fs::remove_all(dir);
  fs::create_directories(dir);

  std::ofstream(dir / "run.json") << R"({
  "gen": {"patients": 50, "split_fractions": [0.8, 0.2], "seed": 424242}
})";

  if (run_cli("gen --spec " + (dir / "run.json").string() + " --out " +
              (dir / "data").string()) != 0) {
    c.require(false, "gen failed");
    return c;
  }

  const fs::path log = dir / "ablate_log.txt";
  const int rc = run_cli("ablate --data " + (dir / "data").string() +
                             " --config " LONGIDIFF_DESK_CONFIG
                             " --seeds 3 --out " + (dir / "ablation").string(),
                         log);
  if (rc != 0) {
    c.require(false, "ablate exited " + std::to_string(rc));
    return c;
  }

  json aj;
  try {
    std::ifstream in(dir / "ablation" / "ablation.json");
    in >> aj;
  } catch (const std::exception& e) {
    c.require(false, std::string("ablation.json unreadable: ") + e.what());
    return c;
  }

  double f1_single = -1, f1_concat = -1, f1_diff = -1;
  double dsc_single = -1, dsc_diff = -1;
  for (const auto& v : aj["variants"]) {
    const std::string name = v["variant"];
    if (name == "single") {
      f1_single = v["mean_f1"];
      dsc_single = v["mean_dsc"];
    } else if (name == "concat") {
      f1_concat = v["mean_f1"];
    } else if (name == "diffweight") {
      f1_diff = v["mean_f1"];
      dsc_diff = v["mean_dsc"];
    }
  }
  const double elapsed = seconds_since(t0);

  c.require(f1_single >= 0 && f1_concat >= 0 && f1_diff >= 0, "missing variants");
  c.require(f1_diff >= f1_single + 0.05,
            "F1 gap " + fmt("%.3f", f1_diff - f1_single) + " < 0.05");
  c.require(dsc_diff >= dsc_single,
            "DSC " + fmt("%.3f", dsc_diff) + " < " + fmt("%.3f", dsc_single));
  c.require(elapsed < 5400.0, "runtime " + fmt("%.0f", elapsed) + " s >= 5400 s");
  c.note("F1 single " + fmt("%.3f", f1_single) + " concat " +
         fmt("%.3f", f1_concat) + " diffweight " + fmt("%.3f", f1_diff) +
         "; DSC " + fmt("%.3f", dsc_single) + " -> " + fmt("%.3f", dsc_diff) +
         "; " + fmt("%.0f", elapsed) + " s");
  return c;
}

// --------------------------------------------------------------------------
// 6. Training mechanics: the polynomial schedule matches its closed form at
//    {0, T/2, T}; a 200-step overfit run on one cached batch reaches loss
//    < 0.1; identical seeds produce bit-identical checkpoints.

Criterion criterion_training() {
  Criterion c;

  c.require(poly_lr(0, 600, 0.01, 0.9) == 0.01, "poly_lr(0) != lr0");
  c.require(std::abs(poly_lr(300, 600, 0.01, 0.9) - 0.0053588673) < 1e-9,
            "poly_lr(T/2) != 0.0053588673");
  c.require(poly_lr(600, 600, 0.01, 0.9) == 0.0, "poly_lr(T) != 0");

  // Overfit smoke: fixed batch of 2 lesion-centered patch pairs.
  {
    ScopedScalar f32_mode(ScalarType::F32);
    PhantomSpec spec;
    spec.dims = {24, 24, 24};
    const GeneratedPatient gp = generate_patient(spec, 41);
    const PatientSeries series = preprocess_series(gp.series);

    ModelConfig mc;
    mc.variant = Variant::DiffWeight;
    mc.levels = 2;
    const std::array<int, 3> patch{16, 16, 16};
    Rng rng(derive_seed(41, 5));
    Tensor cur = Tensor::zeros({2, 1, 16, 16, 16});
    Tensor pri = Tensor::zeros({2, 1, 16, 16, 16});
    Tensor tgt = Tensor::zeros({2, 1, 16, 16, 16});
    for (int n = 0; n < 2; ++n) {
      const PatchPair pp =
          sample_patch_pair(series, Direction::Forward, patch, 1.0, rng);
      for (int64_t i = 0; i < pp.current.numel(); ++i) {
        cur.set(n * 4096 + i, pp.current.voxels[i]);
        pri.set(n * 4096 + i, pp.prior.voxels[i]);
        tgt.set(n * 4096 + i, pp.target.voxels[i]);
      }
    }

    ModelWeights w = init_weights(mc, derive_seed(12, 101));
    w.set_requires_grad(true);
    SgdMomentum opt(w, 0.99);
    double last = 1e30;
    for (int step = 0; step < 200; ++step) {
      const Tensor loss = dice_ce_loss(forward_variant(cur, pri, mc, w), tgt);
      last = loss.at(0);
      backward(loss);
      opt.apply(w, poly_lr(step, 200, 0.01, 0.9));
      w.zero_grads();
    }
    c.require(last < 0.1, "overfit final loss " + fmt("%.4f", last));
    c.note("overfit loss " + fmt("%.4f", last) + " after 200 steps");
  }

  // Seed determinism through the full loop, checked on checkpoint bytes.
  {
    PhantomSpec spec;
    spec.dims = {24, 24, 24};
    Manifest man;
    const fs::path dir = fs::temp_directory_path() / "longidiff_acceptance_c6";
    fs::remove_all(dir);
    man = generate_cohort(spec, 2, {1.0, 0.0}, 77, dir);

    TrainData data = load_training_data(man, dir / "manifest.json", 1);
    ModelConfig mc;
    mc.levels = 2;
    mc.base_channels = 2;
    TrainConfig tc;
    tc.epochs = 1;
    tc.steps_per_epoch = 4;
    tc.patch_size = {16, 16, 16};
    tc.seed = 5;

    const TrainResult r1 = train(mc, tc, data);
    const TrainResult r2 = train(mc, tc, data);
    save_checkpoint(dir / "a.ckpt", mc, r1.final_weights);
    save_checkpoint(dir / "b.ckpt", mc, r2.final_weights);
    std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    c.require(!sa.str().empty() && sa.str() == sb.str(),
              "same-seed checkpoints differ");
  }
  return c;
}

// --------------------------------------------------------------------------
// 7. Format round-trips: volumes and checkpoints survive a write/read/write
//    cycle byte-exactly; truncated or corrupt files are rejected by the CLI
//    with exit code 3.

Criterion criterion_formats() {
  Criterion c;
  const fs::path dir = fs::temp_directory_path() / "longidiff_acceptance_c7";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(321);

  {
    VolumeF v({7, 5, 3});
    for (auto& x : v.voxels) x = static_cast<float>(rng.normal());
    write_volume(dir / "f.vol", v, {0.7, 1.0, 1.3});
    std::array<double, 3> sp{};
    const VolumeF r = read_volume_f32(dir / "f.vol", &sp);
    write_volume(dir / "f2.vol", r, sp);
    std::ifstream a(dir / "f.vol", std::ios::binary), b(dir / "f2.vol", std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    c.require(sa.str() == sb.str(), "f32 volume round-trip differs");

    VolumeU8 m({4, 6, 2});
    for (auto& x : m.voxels) x = rng.uniform() < 0.5 ? 1 : 0;
    write_volume(dir / "m.vol", m, {1, 1, 1});
    const VolumeU8 rm = read_volume_u8(dir / "m.vol");
    write_volume(dir / "m2.vol", rm, {1, 1, 1});
    std::ifstream ma(dir / "m.vol", std::ios::binary), mb(dir / "m2.vol", std::ios::binary);
    std::stringstream sma, smb;
    sma << ma.rdbuf();
    smb << mb.rdbuf();
    c.require(sma.str() == smb.str(), "u8 volume round-trip differs");
  }

  {
    ModelConfig mc;
    mc.levels = 2;
    mc.base_channels = 2;
    const ModelWeights w = init_weights(mc, 9);
    save_checkpoint(dir / "w.ckpt", mc, w);
    const Checkpoint ck = load_checkpoint(dir / "w.ckpt");
    save_checkpoint(dir / "w2.ckpt", ck.config, ck.weights);
    std::ifstream a(dir / "w.ckpt", std::ios::binary), b(dir / "w2.ckpt", std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    c.require(sa.str() == sb.str(), "checkpoint round-trip differs");

    // Truncated checkpoint: drop the trailing end marker and half a blob.
    const std::string bytes = sa.str();
    std::ofstream(dir / "trunc.ckpt", std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }

  {
    // CLI rejection paths, exit code 3 required.
    VolumeF img({8, 8, 8});
    for (auto& x : img.voxels) x = 1.0f;
    write_volume(dir / "t.vol", img, {1, 1, 1});
    const std::string vb = [&] {
      std::ifstream in(dir / "t.vol", std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      return ss.str();
    }();
    std::ofstream(dir / "t.vol", std::ios::binary)
        .write(vb.data(), static_cast<std::streamsize>(vb.size() - 10));

    std::ofstream(dir / "manifest.json") << R"({
  "format": "longidiff-manifest v1",
  "spacing_mm": [1.0, 1.0, 1.0],
  "patients": [{"id": "p0", "split": "train", "timepoints": [
    {"image": "t.vol", "mask": "t.vol"},
    {"image": "t.vol", "mask": "t.vol"}]}]
})";
    const int rc_vol =
        run_cli("train --data " + dir.string() + " --out " + (dir / "o").string());
    c.require(rc_vol == 3, "truncated volume: exit " + std::to_string(rc_vol));

    const int rc_ckpt = run_cli("predict --ckpt " + (dir / "trunc.ckpt").string() +
                                " --data " + dir.string() + " --out " +
                                (dir / "o2").string());
    c.require(rc_ckpt == 3,
              "truncated checkpoint: exit " + std::to_string(rc_ckpt));
  }
  c.note("volume f32/u8, checkpoint, truncation rejection");
  return c;
}

struct Entry {
  int id;
  const char* name;
  Criterion (*fn)();
};

constexpr Entry kCriteria[] = {
    {1, "gradient correctness", criterion_gradcheck},
    {2, "difference-weighting identities", criterion_identities},
    {3, "metric oracle equivalence", criterion_metric_oracles},
    {4, "protocol constants", criterion_protocol},
    {5, "desk-scale ablation ordering", criterion_ablation},
    {6, "training mechanics", criterion_training},
    {7, "format round-trips", criterion_formats},
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc > 1) {
    only = std::atoi(argv[1]);
    if (only < 1 || only > 7) {
      std::fprintf(stderr, "usage: %s [criterion 1-7]\n", argv[0]);
      return 2;
    }
  }

  bool all_ok = true;
  for (const auto& e : kCriteria) {
    if (only != 0 && e.id != only) continue;
    const Criterion c = e.fn();
    std::printf("%s  criterion %d: %-34s %s\n", c.passed ? "PASS" : "FAIL", e.id,
                e.name, c.detail.c_str());
    std::fflush(stdout);
    all_ok = all_ok && c.passed;
  }
  return all_ok ? 0 : 1;
}
