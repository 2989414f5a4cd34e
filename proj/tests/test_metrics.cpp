#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "longidiff/metrics.hpp"
#include "longidiff/rng.hpp"
#include "longidiff/synthdata.hpp"

using namespace longidiff;

namespace {

VolumeU8 mask_from(std::array<int, 3> dims, const std::vector<std::array<int, 3>>& on) {
  VolumeU8 m(dims);
  for (const auto& v : on) m.at(v[0], v[1], v[2]) = 1;
  return m;
}

VolumeU8 random_mask(std::array<int, 3> dims, double density, Rng& rng) {
  VolumeU8 m(dims);
  for (auto& v : m.voxels) v = rng.uniform() < density ? 1 : 0;
  return m;
}

/// Brute-force component oracle: unite every foreground voxel pair that is
/// adjacent under the connectivity, then group by root.
std::vector<std::vector<int64_t>> oracle_components(const VolumeU8& m,
                                                    int connectivity) {
  std::vector<int64_t> fg;
  for (int64_t i = 0; i < m.numel(); ++i)
    if (m.voxels[size_t(i)]) fg.push_back(i);

  std::vector<size_t> parent(fg.size());
  for (size_t i = 0; i < fg.size(); ++i) parent[i] = i;
  const auto find = [&](size_t a) {
    while (parent[a] != a) a = parent[a] = parent[parent[a]];
    return a;
  };

  const int nx = m.dims[0], ny = m.dims[1];
  for (size_t i = 0; i < fg.size(); ++i)
    for (size_t j = i + 1; j < fg.size(); ++j) {
      const int64_t a = fg[i], b = fg[j];
      const int dx = std::abs(int(a % nx) - int(b % nx));
      const int dy = std::abs(int(a / nx % ny) - int(b / nx % ny));
      const int dz = std::abs(int(a / nx / ny) - int(b / nx / ny));
      const bool adj = connectivity == 26
                           ? std::max({dx, dy, dz}) == 1
                           : dx + dy + dz == 1;
      if (adj) parent[find(i)] = find(j);
    }

  std::vector<std::vector<int64_t>> groups;
  std::vector<int> slot(fg.size(), -1);
  for (size_t i = 0; i < fg.size(); ++i) {
    const size_t root = find(i);
    if (slot[root] < 0) {
      slot[root] = int(groups.size());
      groups.emplace_back();
    }
    groups[size_t(slot[root])].push_back(fg[i]);
  }
  // fg is ascending, so each group's first element is its raster-first
  // voxel and groups are already ordered by it.
  return groups;
}

/// All-pairs HD95 oracle: explicit surface extraction and nearest-surface
/// scans, same pooled-percentile definition.
std::optional<double> oracle_hd95(const VolumeU8& a, const VolumeU8& b,
                                  std::array<double, 3> sp) {
  const auto surface = [&](const VolumeU8& m) {
    std::vector<std::array<int, 3>> s;
    for (int z = 0; z < m.dims[2]; ++z)
      for (int y = 0; y < m.dims[1]; ++y)
        for (int x = 0; x < m.dims[0]; ++x) {
          if (!m.at(x, y, z)) continue;
          bool border = x == 0 || x == m.dims[0] - 1 || y == 0 ||
                        y == m.dims[1] - 1 || z == 0 || z == m.dims[2] - 1;
          if (!border)
            border = !m.at(x - 1, y, z) || !m.at(x + 1, y, z) ||
                     !m.at(x, y - 1, z) || !m.at(x, y + 1, z) ||
                     !m.at(x, y, z - 1) || !m.at(x, y, z + 1);
          if (border) s.push_back({x, y, z});
        }
    return s;
  };
  bool a_empty = true, b_empty = true;
  for (uint8_t v : a.voxels) a_empty = a_empty && !v;
  for (uint8_t v : b.voxels) b_empty = b_empty && !v;
  if (a_empty || b_empty) return std::nullopt;

  const auto sa = surface(a), sb = surface(b);
  const auto nearest = [&](const std::array<int, 3>& p,
                           const std::vector<std::array<int, 3>>& qs) {
    double best = 1e300;
    for (const auto& q : qs) {
      const double dx = (p[0] - q[0]) * sp[0];
      const double dy = (p[1] - q[1]) * sp[1];
      const double dz = (p[2] - q[2]) * sp[2];
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    return best;
  };
  std::vector<double> pooled;
  for (const auto& p : sa) pooled.push_back(nearest(p, sb));
  for (const auto& p : sb) pooled.push_back(nearest(p, sa));
  std::sort(pooled.begin(), pooled.end());
  const double rank = 0.95 * double(pooled.size() - 1);
  const size_t lo = size_t(rank);
  if (lo + 1 >= pooled.size()) return pooled.back();
  const double frac = rank - double(lo);
  return pooled[lo] * (1.0 - frac) + pooled[lo + 1] * frac;
}

/// Exhaustive matching oracle: IoU from scratch via voxel sets, identical
/// ordering rule, greedy one-to-one.
LesionMatchResult oracle_match(const std::vector<LesionComponent>& gt,
                               const std::vector<LesionComponent>& pred,
                               double threshold) {
  LesionMatchResult r;
  if (gt.empty() && pred.empty()) {
    r.f1 = 1.0;
    return r;
  }
  struct Cand {
    double iou;
    int g, p;
  };
  std::vector<Cand> cands;
  for (const auto& g : gt)
    for (const auto& p : pred) {
      const std::set<int64_t> gs(g.voxels.begin(), g.voxels.end());
      int64_t inter = 0;
      for (int64_t v : p.voxels) inter += gs.count(v) ? 1 : 0;
      if (inter == 0) continue;
      const double iou =
          double(inter) / double(int64_t(g.voxels.size() + p.voxels.size()) - inter);
      if (iou >= threshold) cands.push_back({iou, g.label, p.label});
    }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.g != b.g) return a.g < b.g;
    return a.p < b.p;
  });
  std::set<int> gu, pu;
  for (const auto& c : cands) {
    if (gu.count(c.g) || pu.count(c.p)) continue;
    gu.insert(c.g);
    pu.insert(c.p);
    r.matches.emplace_back(c.g, c.p);
    ++r.tp;
  }
  r.fp = int(pred.size()) - r.tp;
  r.fn = int(gt.size()) - r.tp;
  r.f1 = (r.tp + r.fp + r.fn) == 0 ? 1.0
                                   : 2.0 * r.tp / double(2 * r.tp + r.fp + r.fn);
  return r;
}

constexpr std::array<double, 3> kIso = {1.0, 1.0, 1.0};

}  // namespace

TEST_CASE("connected components definitional cases") {
  // Two voxels touching only at a corner: one component under
  // 26-connectivity, two under 6-connectivity.
  const auto m = mask_from({4, 4, 4}, {{1, 1, 1}, {2, 2, 2}});
  CHECK(connected_components(m, kIso, 26).size() == 1);
  CHECK(connected_components(m, kIso, 6).size() == 2);

  SUBCASE("labels follow raster order of first voxels") {
    const auto two = mask_from({6, 2, 1}, {{4, 0, 0}, {0, 1, 0}, {5, 0, 0}});
    const auto comps = connected_components(two, kIso, 26);
    REQUIRE(comps.size() == 2);
    CHECK(comps[0].label == 1);
    CHECK(comps[0].voxels == std::vector<int64_t>{4, 5});
    CHECK(comps[1].label == 2);
    CHECK(comps[1].voxels == std::vector<int64_t>{6});
  }
  SUBCASE("volume uses the voxel size") {
    const auto one = mask_from({3, 3, 3}, {{0, 0, 0}, {1, 0, 0}});
    const auto comps = connected_components(one, {0.5, 2.0, 1.0}, 26);
    REQUIRE(comps.size() == 1);
    CHECK(comps[0].volume_mm3 == doctest::Approx(2.0));
  }
  SUBCASE("U shape merges through the bend") {
    // Two vertical arms joined at the bottom raster-late; tests that the
    // second pass resolves provisional label unions.
    const auto u = mask_from({3, 3, 1}, {{0, 0, 0}, {2, 0, 0}, {0, 1, 0},
                                         {2, 1, 0}, {0, 2, 0}, {1, 2, 0},
                                         {2, 2, 0}});
    CHECK(connected_components(u, kIso, 6).size() == 1);
  }
  SUBCASE("invalid arguments") {
    CHECK_THROWS_AS(connected_components(m, kIso, 18), std::invalid_argument);
    CHECK_THROWS_AS(connected_components(m, {1, 0, 1}, 26), std::invalid_argument);
  }
}

TEST_CASE("connected components match the brute-force oracle") {
  Rng rng(505);
  for (int trial = 0; trial < 200; ++trial) {
    const std::array<int, 3> dims = {int(rng.uniform_int(2, 8)),
                                     int(rng.uniform_int(2, 8)),
                                     int(rng.uniform_int(2, 8))};
    const auto m = random_mask(dims, rng.uniform(0.1, 0.6), rng);
    for (int connectivity : {6, 26}) {
      const auto got = connected_components(m, kIso, connectivity);
      const auto expect = oracle_components(m, connectivity);
      REQUIRE(got.size() == expect.size());
      for (size_t i = 0; i < got.size(); ++i) {
        auto sorted = expect[i];
        std::sort(sorted.begin(), sorted.end());
        CHECK(got[i].voxels == sorted);
      }
    }
  }
}

TEST_CASE("size filter removes strictly sub-threshold lesions") {
  // 2-voxel lesion (2 mm3) removed, 3-voxel lesion (3 mm3) kept.
  const auto m = mask_from({8, 8, 8}, {{0, 0, 0}, {1, 0, 0},
                                       {5, 5, 5}, {6, 5, 5}, {7, 5, 5}});
  const auto filtered = filter_small_lesions(m, kIso, 3.0, true);
  CHECK(filtered.at(0, 0, 0) == 0);
  CHECK(filtered.at(1, 0, 0) == 0);
  CHECK(filtered.at(5, 5, 5) == 1);
  CHECK(filtered.at(6, 5, 5) == 1);
  CHECK(filtered.at(7, 5, 5) == 1);

  SUBCASE("disabled filter is the identity") {
    CHECK(filter_small_lesions(m, kIso, 3.0, false).voxels == m.voxels);
  }
  SUBCASE("threshold respects anisotropic spacing") {
    // Two voxels at 1.5 x 1 x 1 mm are exactly 3 mm3: kept (strict <).
    const auto pair = mask_from({4, 4, 4}, {{0, 0, 0}, {1, 0, 0}});
    CHECK(filter_small_lesions(pair, {1.5, 1.0, 1.0}, 3.0, true).voxels ==
          pair.voxels);
    // At 1 x 1 x 1 mm the same pair is 2 mm3: removed.
    int64_t on = 0;
    for (uint8_t v : filter_small_lesions(pair, kIso, 3.0, true).voxels) on += v;
    CHECK(on == 0);
  }
}

TEST_CASE("dice") {
  const auto a = mask_from({4, 4, 1}, {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}});
  const auto b = mask_from({4, 4, 1}, {{2, 0, 0}, {3, 0, 0}, {0, 1, 0}, {1, 1, 0}});
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, b) == doctest::Approx(0.5));  // |A|=4, |B|=4, overlap 2
  CHECK(dice(a, b) == dice(b, a));
  CHECK(dice(mask_from({2, 2, 2}, {}), mask_from({2, 2, 2}, {})) == 1.0);
  CHECK(dice(a, mask_from({4, 4, 1}, {})) == 0.0);
  const auto disjoint = mask_from({4, 4, 1}, {{0, 3, 0}});
  CHECK(dice(a, disjoint) == 0.0);
}

TEST_CASE("hd95 reference cases") {
  const auto single0 = mask_from({8, 8, 8}, {{1, 1, 1}});
  const auto single3 = mask_from({8, 8, 8}, {{4, 1, 1}});
  CHECK(hd95(single0, single0, kIso) == doctest::Approx(0.0));
  // Pooled distances {3, 3} -> 95th percentile 3.0.
  CHECK(hd95(single0, single3, kIso) == doctest::Approx(3.0));

  SUBCASE("percentile interpolates between order statistics") {
    // gt = {v}, pred = {v, v+3}: pooled distances {0, 0, 3}, rank
    // 0.95 * 2 = 1.9 -> 0.1 * 0 + 0.9 * 3 = 2.7.
    const auto pred = mask_from({8, 8, 8}, {{1, 1, 1}, {4, 1, 1}});
    CHECK(hd95(single0, pred, kIso) == doctest::Approx(2.7));
    CHECK(hd95(pred, single0, kIso) == doctest::Approx(2.7));
  }
  SUBCASE("distances are in millimetres") {
    CHECK(hd95(single0, single3, {2.0, 1.0, 1.0}) == doctest::Approx(6.0));
  }
  SUBCASE("empty masks are undefined") {
    CHECK_FALSE(hd95(single0, mask_from({8, 8, 8}, {}), kIso).has_value());
    CHECK_FALSE(hd95(mask_from({8, 8, 8}, {}), single0, kIso).has_value());
  }
  SUBCASE("interior voxels are not surface") {
    // A solid 3-cube against itself minus its center is still distance 0
    // everywhere: the center is not a surface voxel.
    std::vector<std::array<int, 3>> cube;
    for (int z = 1; z <= 3; ++z)
      for (int y = 1; y <= 3; ++y)
        for (int x = 1; x <= 3; ++x) cube.push_back({x, y, z});
    const auto solid = mask_from({6, 6, 6}, cube);
    cube.erase(std::remove(cube.begin(), cube.end(), std::array<int, 3>{2, 2, 2}),
               cube.end());
    const auto hollow = mask_from({6, 6, 6}, cube);
    // In a 3-cube only the center has all six face neighbors, so both
    // masks expose the identical 26-voxel surface: distance 0 everywhere.
    const auto v = hd95(solid, hollow, kIso);
    REQUIRE(v.has_value());
    CHECK(*v == 0.0);
  }
}

TEST_CASE("hd95 matches the all-pairs oracle") {
  Rng rng(707);
  int defined = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::array<int, 3> dims = {int(rng.uniform_int(2, 8)),
                                     int(rng.uniform_int(2, 8)),
                                     int(rng.uniform_int(2, 8))};
    const std::array<double, 3> sp = {rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0),
                                      rng.uniform(0.5, 2.0)};
    const auto a = random_mask(dims, rng.uniform(0.05, 0.5), rng);
    const auto b = random_mask(dims, rng.uniform(0.05, 0.5), rng);
    const auto got = hd95(a, b, sp);
    const auto expect = oracle_hd95(a, b, sp);
    REQUIRE(got.has_value() == expect.has_value());
    if (got.has_value()) {
      CHECK(*got == doctest::Approx(*expect).epsilon(1e-9));
      const auto swapped = hd95(b, a, sp);
      CHECK(*swapped == doctest::Approx(*got).epsilon(1e-12));
      ++defined;
    }
  }
  CHECK(defined > 150);
}

TEST_CASE("lesion matching reference cases") {
  const auto comps = [](const VolumeU8& m) {
    return connected_components(m, kIso, 26);
  };

  SUBCASE("one pair with IoU 0.5 is a perfect score") {
    const auto gt = mask_from({8, 4, 1}, {{0, 0, 0}, {1, 0, 0}});
    const auto pred = mask_from({8, 4, 1}, {{1, 0, 0}});
    // IoU = 1/2 >= 0.1: matched.
    const auto r = lesion_f1(comps(gt), comps(pred), 0.1);
    CHECK(r.f1 == 1.0);
    CHECK(r.tp == 1);
    CHECK(r.fp == 0);
    CHECK(r.fn == 0);
  }
  SUBCASE("one hit, one miss, one false alarm") {
    const auto gt = mask_from({12, 4, 1},
                              {{0, 0, 0}, {1, 0, 0}, {2, 0, 0},  // hit (IoU 0.4)
                               {8, 0, 0}, {9, 0, 0}});           // missed
    const auto pred = mask_from({12, 4, 1},
                                {{1, 0, 0}, {2, 0, 0}, {3, 0, 0}, {4, 0, 0},
                                 {0, 2, 0}});  // false alarm
    const auto r = lesion_f1(comps(gt), comps(pred), 0.1);
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
    CHECK(r.fn == 1);
    CHECK(r.f1 == doctest::Approx(0.5));  // precision 0.5, recall 0.5
  }
  SUBCASE("IoU 0.05 stays unmatched at threshold 0.1") {
    // 1 overlapping voxel, |G|=10, |P|=11, union 20 -> IoU 0.05.
    std::vector<std::array<int, 3>> g, p;
    for (int x = 0; x < 10; ++x) g.push_back({x, 0, 0});
    for (int x = 9; x < 20; ++x) p.push_back({x, 0, 0});
    const auto r = lesion_f1(comps(mask_from({20, 2, 1}, g)),
                             comps(mask_from({20, 2, 1}, p)), 0.1);
    CHECK(r.tp == 0);
    CHECK(r.fp == 1);
    CHECK(r.fn == 1);
    CHECK(r.f1 == 0.0);
  }
  SUBCASE("empty-side conventions") {
    const auto some = comps(mask_from({4, 4, 1}, {{0, 0, 0}}));
    const std::vector<LesionComponent> none;
    CHECK(lesion_f1(none, none).f1 == 1.0);
    CHECK(lesion_f1(some, none).f1 == 0.0);
    CHECK(lesion_f1(none, some).f1 == 0.0);
    CHECK(lesion_f1(none, some).fp == 1);
    CHECK(lesion_f1(some, none).fn == 1);
  }
}

TEST_CASE("lesion matching equals the exhaustive oracle") {
  Rng rng(909);
  int nontrivial = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::array<int, 3> dims = {int(rng.uniform_int(3, 8)),
                                     int(rng.uniform_int(3, 8)),
                                     int(rng.uniform_int(3, 8))};
    const auto gt = connected_components(
        random_mask(dims, rng.uniform(0.1, 0.5), rng), kIso, 26);
    const auto pred = connected_components(
        random_mask(dims, rng.uniform(0.1, 0.5), rng), kIso, 26);
    const double threshold = rng.uniform() < 0.5 ? 0.1 : rng.uniform(0.05, 0.6);
    const auto got = lesion_f1(gt, pred, threshold);
    const auto expect = oracle_match(gt, pred, threshold);
    CHECK(got.f1 == doctest::Approx(expect.f1).epsilon(1e-12));
    CHECK(got.tp == expect.tp);
    CHECK(got.fp == expect.fp);
    CHECK(got.fn == expect.fn);
    CHECK(got.matches == expect.matches);
    nontrivial += got.tp > 0 ? 1 : 0;
  }
  CHECK(nontrivial > 50);
}

TEST_CASE("removing a small false-positive component never lowers F1") {
  const auto f1_of = [](const VolumeU8& gt, const VolumeU8& pred, bool filter) {
    return evaluate_scan(gt, pred, kIso, 0.1, 3.0, filter).f1;
  };
  // Perfect prediction plus a 1-voxel false alarm: the filter restores 1.0.
  const auto gt = mask_from({10, 10, 3},
                            {{2, 2, 1}, {3, 2, 1}, {2, 3, 1}, {3, 3, 1}});
  auto pred = gt;
  pred.at(8, 8, 1) = 1;
  CHECK(f1_of(gt, pred, false) == doctest::Approx(2.0 / 3.0));
  CHECK(f1_of(gt, pred, true) == 1.0);

  SUBCASE("holds on applicable random instances") {
    Rng rng(1111);
    int applicable = 0;
    for (int trial = 0; trial < 120; ++trial) {
      const auto g = random_mask({7, 7, 7}, 0.15, rng);
      auto p = random_mask({7, 7, 7}, 0.15, rng);
      const auto before = lesion_f1(connected_components(g, kIso),
                                    connected_components(p, kIso));
      // Remove one sub-3 mm3 unmatched pred component, if any exists.
      const auto pc = connected_components(p, kIso);
      const LesionComponent* victim = nullptr;
      for (const auto& c : pc) {
        bool matched = false;
        for (const auto& m : before.matches) matched = matched || m.second == c.label;
        if (!matched && c.volume_mm3 < 3.0) {
          victim = &c;
          break;
        }
      }
      if (!victim) continue;
      for (int64_t idx : victim->voxels) p.voxels[size_t(idx)] = 0;
      const auto after = lesion_f1(connected_components(g, kIso),
                                   connected_components(p, kIso));
      CHECK(after.f1 >= before.f1);
      ++applicable;
    }
    CHECK(applicable > 30);
  }
}

TEST_CASE("aggregation is patient-weighted") {
  ScanMetrics a1, a2, b1;
  a1.patient_id = a2.patient_id = "A";
  b1.patient_id = "B";
  a1.dsc = 0.8;
  a2.dsc = 0.6;
  b1.dsc = 0.9;
  a1.f1 = a2.f1 = b1.f1 = 1.0;

  const auto report = aggregate({a1, a2, b1});
  REQUIRE(report.patients.size() == 2);
  CHECK(report.patients[0].dsc == doctest::Approx(0.7));
  CHECK(report.patients[1].dsc == doctest::Approx(0.9));
  // (0.7 + 0.9) / 2, not the scan-weighted (0.8 + 0.6 + 0.9) / 3.
  CHECK(report.dsc == doctest::Approx(0.8));

  SUBCASE("single patient equals the patient mean") {
    const auto solo = aggregate({a1, a2});
    CHECK(solo.dsc == doctest::Approx(0.7));
  }
  SUBCASE("identical scans collapse to the scan value") {
    const auto same = aggregate({b1, b1, b1});
    CHECK(same.dsc == doctest::Approx(0.9));
  }
  SUBCASE("undefined hd95 scans are excluded, not zeroed") {
    a1.hd95_mm = 2.0;
    a2.hd95_mm = std::nullopt;
    b1.hd95_mm = std::nullopt;
    const auto r = aggregate({a1, a2, b1});
    REQUIRE(r.patients[0].hd95_mm.has_value());
    CHECK(*r.patients[0].hd95_mm == doctest::Approx(2.0));
    CHECK_FALSE(r.patients[1].hd95_mm.has_value());
    CHECK(r.hd95_patients == 1);
    REQUIRE(r.hd95_mm.has_value());
    CHECK(*r.hd95_mm == doctest::Approx(2.0));
  }
  SUBCASE("all hd95 undefined leaves the cohort value undefined") {
    a1.hd95_mm = a2.hd95_mm = b1.hd95_mm = std::nullopt;
    const auto r = aggregate({a1, a2, b1});
    CHECK_FALSE(r.hd95_mm.has_value());
    CHECK(r.hd95_patients == 0);
  }
}

TEST_CASE("a phantom mask evaluated against itself is perfect") {
  PhantomSpec spec;
  const auto patient = generate_patient(spec, 42);
  for (const auto& tp : patient.series.timepoints) {
    const auto m = evaluate_scan(tp.mask, tp.mask, spec.spacing_mm);
    CHECK(m.dsc == 1.0);
    CHECK(m.f1 == 1.0);
    if (m.hd95_mm.has_value()) CHECK(*m.hd95_mm == 0.0);
    CHECK(m.fp_lesions == 0);
    CHECK(m.fn_lesions == 0);
  }
}

TEST_CASE("reports are deterministic and render undefined values") {
  ScanMetrics s;
  s.patient_id = "p0000";
  s.timepoint = 1;
  s.dsc = 0.75;
  s.f1 = 0.5;
  s.hd95_mm = std::nullopt;
  s.tp_lesions = 1;
  s.fp_lesions = 1;
  s.fn_lesions = 1;
  s.gt_lesions = 2;
  s.pred_lesions = 2;
  const auto report = aggregate({s});

  const auto json_a = report_to_json(report);
  const auto json_b = report_to_json(report);
  CHECK(json_a == json_b);
  CHECK(json_a.find("\"hd95_mm\": null") != std::string::npos);
  CHECK(json_a.find("longidiff-report v1") != std::string::npos);

  const auto table = render_report_table(report);
  CHECK(table.find("DSC") != std::string::npos);
  CHECK(table.find("HD95") != std::string::npos);
  CHECK(table.find("F1") != std::string::npos);
  CHECK(table.find("p0000") != std::string::npos);
  CHECK(table.find("cohort") != std::string::npos);
  CHECK(table.find("n/a") != std::string::npos);
  CHECK(table.find("0.7500") != std::string::npos);
}
