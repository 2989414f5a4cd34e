#include "longidiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace longidiff {

namespace {

constexpr double kFar = 1e20;  // squared-distance sentinel for "no seed yet"

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void require_pair(const VolumeU8& a, const VolumeU8& b,
                  std::array<double, 3> spacing) {
  require(a.same_dims(b), "metrics: mask shapes differ");
  require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0,
          "metrics: spacing must be positive");
}

struct UnionFind {
  std::vector<int> parent;
  int make() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int find(int a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(int a, int b) { parent[find(a)] = find(b); }
};

/// Offsets to already-visited neighbors in raster order: (dz,dy,dx)
/// lexicographically negative.
std::vector<std::array<int, 3>> previous_offsets(int connectivity) {
  std::vector<std::array<int, 3>> offs;
  for (int dz = -1; dz <= 0; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dz > 0 || (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0)))) continue;
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (connectivity == 6 && manhattan != 1) continue;
        offs.push_back({dx, dy, dz});
      }
  return offs;
}

int64_t foreground_count(const VolumeU8& m) {
  int64_t n = 0;
  for (uint8_t v : m.voxels) n += v != 0 ? 1 : 0;
  return n;
}

/// Foreground voxels with at least one face-adjacent background neighbor;
/// the volume border counts as background.
std::vector<std::array<int, 3>> surface_voxels(const VolumeU8& m) {
  static constexpr std::array<std::array<int, 3>, 6> faces = {
      {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < m.dims[2]; ++z)
    for (int y = 0; y < m.dims[1]; ++y)
      for (int x = 0; x < m.dims[0]; ++x) {
        if (!m.at(x, y, z)) continue;
        for (const auto& f : faces) {
          const int nx = x + f[0], ny = y + f[1], nz = z + f[2];
          const bool outside = nx < 0 || nx >= m.dims[0] || ny < 0 ||
                               ny >= m.dims[1] || nz < 0 || nz >= m.dims[2];
          if (outside || !m.at(nx, ny, nz)) {
            out.push_back({x, y, z});
            break;
          }
        }
      }
  return out;
}

/// One pass of the exact squared Euclidean distance transform (lower
/// envelope of parabolas) along a line with sample spacing h.
void edt_1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
            std::vector<double>& z, int n, double h) {
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = kFar;
  for (int q = 1; q < n; ++q) {
    const double xq = q * h;
    double s = 0.0;
    while (true) {
      const double xv = v[k] * h;
      s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFar;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * h;
    while (z[k + 1] < xq) ++k;
    const double dx = xq - v[k] * h;
    d[q] = dx * dx + f[v[k]];
  }
}

/// Exact squared distance (mm^2) from every voxel to the nearest seed.
std::vector<double> distance_transform(const std::vector<std::array<int, 3>>& seeds,
                                       std::array<int, 3> dims,
                                       std::array<double, 3> spacing) {
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  std::vector<double> dist(static_cast<size_t>(nx) * ny * nz, kFar);
  const auto at = [&](int x, int y, int z) -> double& {
    return dist[(static_cast<size_t>(z) * ny + y) * nx + x];
  };
  for (const auto& s : seeds) at(s[0], s[1], s[2]) = 0.0;

  const int n_max = std::max({nx, ny, nz});
  std::vector<double> f(n_max), d(n_max), z(n_max + 1);
  std::vector<int> v(n_max);

  for (int zc = 0; zc < nz; ++zc)
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) f[x] = at(x, y, zc);
      edt_1d(f, d, v, z, nx, spacing[0]);
      for (int x = 0; x < nx; ++x) at(x, y, zc) = d[x];
    }
  for (int zc = 0; zc < nz; ++zc)
    for (int x = 0; x < nx; ++x) {
      for (int y = 0; y < ny; ++y) f[y] = at(x, y, zc);
      edt_1d(f, d, v, z, ny, spacing[1]);
      for (int y = 0; y < ny; ++y) at(x, y, zc) = d[y];
    }
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      for (int zc = 0; zc < nz; ++zc) f[zc] = at(x, y, zc);
      edt_1d(f, d, v, z, nz, spacing[2]);
      for (int zc = 0; zc < nz; ++zc) at(x, y, zc) = d[zc];
    }
  return dist;
}

double percentile_sorted(const std::vector<double>& sorted, double p) {
  const double rank = p * static_cast<double>(sorted.size() - 1);
  const size_t lo = static_cast<size_t>(rank);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

double mean(const std::vector<double>& xs) {
  return std::accumulate(xs.begin(), xs.end(), 0.0) /
         static_cast<double>(xs.size());
}

std::string fmt(double v, const char* spec) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

nlohmann::ordered_json json_or_null(const std::optional<double>& v) {
  if (v.has_value()) return *v;
  return nullptr;
}

}  // namespace

std::vector<LesionComponent> connected_components(const VolumeU8& mask,
                                                  std::array<double, 3> spacing_mm,
                                                  int connectivity) {
  require(connectivity == 6 || connectivity == 26,
          "connected_components: connectivity must be 6 or 26");
  require(spacing_mm[0] > 0 && spacing_mm[1] > 0 && spacing_mm[2] > 0,
          "connected_components: spacing must be positive");
  const auto offs = previous_offsets(connectivity);
  const int nx = mask.dims[0], ny = mask.dims[1], nz = mask.dims[2];

  std::vector<int> provisional(static_cast<size_t>(mask.numel()), -1);
  UnionFind uf;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const int64_t idx = mask.index(x, y, z);
        if (!mask.voxels[static_cast<size_t>(idx)]) continue;
        int found = -1;
        for (const auto& o : offs) {
          const int px = x + o[0], py = y + o[1], pz = z + o[2];
          if (px < 0 || px >= nx || py < 0 || py >= ny || pz < 0) continue;
          const int lbl = provisional[static_cast<size_t>(mask.index(px, py, pz))];
          if (lbl < 0) continue;
          if (found < 0)
            found = uf.find(lbl);
          else
            uf.unite(found, lbl);
        }
        provisional[static_cast<size_t>(idx)] = found >= 0 ? found : uf.make();
      }

  const double voxel_mm3 = spacing_mm[0] * spacing_mm[1] * spacing_mm[2];
  std::vector<LesionComponent> components;
  std::vector<int> compact(uf.parent.size(), -1);
  for (int64_t idx = 0; idx < mask.numel(); ++idx) {
    const int lbl = provisional[static_cast<size_t>(idx)];
    if (lbl < 0) continue;
    const int root = uf.find(lbl);
    if (compact[static_cast<size_t>(root)] < 0) {
      compact[static_cast<size_t>(root)] = static_cast<int>(components.size());
      components.push_back({static_cast<int>(components.size()) + 1, {}, 0.0});
    }
    components[static_cast<size_t>(compact[static_cast<size_t>(root)])]
        .voxels.push_back(idx);
  }
  for (auto& c : components)
    c.volume_mm3 = static_cast<double>(c.voxels.size()) * voxel_mm3;
  return components;
}

VolumeU8 filter_small_lesions(const VolumeU8& mask, std::array<double, 3> spacing_mm,
                              double min_mm3, bool enabled) {
  if (!enabled) return mask;
  VolumeU8 out(mask.dims);
  for (const auto& c : connected_components(mask, spacing_mm)) {
    if (c.volume_mm3 < min_mm3) continue;
    for (int64_t idx : c.voxels) out.voxels[static_cast<size_t>(idx)] = 1;
  }
  return out;
}

double dice(const VolumeU8& gt, const VolumeU8& pred) {
  require(gt.same_dims(pred), "dice: mask shapes differ");
  int64_t a = 0, b = 0, inter = 0;
  for (size_t i = 0; i < gt.voxels.size(); ++i) {
    const bool ga = gt.voxels[i] != 0, pb = pred.voxels[i] != 0;
    a += ga ? 1 : 0;
    b += pb ? 1 : 0;
    inter += ga && pb ? 1 : 0;
  }
  if (a == 0 && b == 0) return 1.0;
  if (a == 0 || b == 0) return 0.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::optional<double> hd95(const VolumeU8& gt, const VolumeU8& pred,
                           std::array<double, 3> spacing_mm) {
  require_pair(gt, pred, spacing_mm);
  if (foreground_count(gt) == 0 || foreground_count(pred) == 0)
    return std::nullopt;

  const auto surf_a = surface_voxels(gt);
  const auto surf_b = surface_voxels(pred);
  const auto dist_to_b = distance_transform(surf_b, gt.dims, spacing_mm);
  const auto dist_to_a = distance_transform(surf_a, gt.dims, spacing_mm);

  std::vector<double> pooled;
  pooled.reserve(surf_a.size() + surf_b.size());
  const auto flat = [&](const std::array<int, 3>& p) {
    return (static_cast<size_t>(p[2]) * gt.dims[1] + p[1]) * gt.dims[0] + p[0];
  };
  for (const auto& p : surf_a) pooled.push_back(std::sqrt(dist_to_b[flat(p)]));
  for (const auto& p : surf_b) pooled.push_back(std::sqrt(dist_to_a[flat(p)]));
  std::sort(pooled.begin(), pooled.end());
  return percentile_sorted(pooled, 0.95);
}

LesionMatchResult lesion_f1(const std::vector<LesionComponent>& gt,
                            const std::vector<LesionComponent>& pred,
                            double iou_threshold) {
  LesionMatchResult r;
  if (gt.empty() && pred.empty()) {
    r.f1 = 1.0;
    return r;
  }
  if (gt.empty() || pred.empty()) {
    r.fp = static_cast<int>(pred.size());
    r.fn = static_cast<int>(gt.size());
    return r;  // f1 = 0
  }

  struct Candidate {
    double iou;
    int gi, pi;  // indices into the component vectors
  };
  std::vector<Candidate> candidates;
  for (size_t gi = 0; gi < gt.size(); ++gi)
    for (size_t pi = 0; pi < pred.size(); ++pi) {
      std::vector<int64_t> inter;
      std::set_intersection(gt[gi].voxels.begin(), gt[gi].voxels.end(),
                            pred[pi].voxels.begin(), pred[pi].voxels.end(),
                            std::back_inserter(inter));
      if (inter.empty()) continue;
      const double uni = static_cast<double>(gt[gi].voxels.size() +
                                             pred[pi].voxels.size() - inter.size());
      const double iou = static_cast<double>(inter.size()) / uni;
      if (iou >= iou_threshold)
        candidates.push_back({iou, static_cast<int>(gi), static_cast<int>(pi)});
    }
  std::sort(candidates.begin(), candidates.end(),
            [&](const Candidate& a, const Candidate& b) {
              if (a.iou != b.iou) return a.iou > b.iou;
              if (gt[size_t(a.gi)].label != gt[size_t(b.gi)].label)
                return gt[size_t(a.gi)].label < gt[size_t(b.gi)].label;
              return pred[size_t(a.pi)].label < pred[size_t(b.pi)].label;
            });

  std::vector<bool> gt_used(gt.size(), false), pred_used(pred.size(), false);
  for (const auto& c : candidates) {
    if (gt_used[size_t(c.gi)] || pred_used[size_t(c.pi)]) continue;
    gt_used[size_t(c.gi)] = pred_used[size_t(c.pi)] = true;
    r.matches.emplace_back(gt[size_t(c.gi)].label, pred[size_t(c.pi)].label);
    ++r.tp;
  }
  r.fp = static_cast<int>(pred.size()) - r.tp;
  r.fn = static_cast<int>(gt.size()) - r.tp;
  r.f1 = 2.0 * r.tp / static_cast<double>(2 * r.tp + r.fp + r.fn);
  return r;
}

ScanMetrics evaluate_scan(const VolumeU8& gt, const VolumeU8& pred,
                          std::array<double, 3> spacing_mm, double iou_threshold,
                          double min_lesion_mm3, bool size_filter) {
  require_pair(gt, pred, spacing_mm);
  const VolumeU8 g = filter_small_lesions(gt, spacing_mm, min_lesion_mm3, size_filter);
  const VolumeU8 p =
      filter_small_lesions(pred, spacing_mm, min_lesion_mm3, size_filter);
  const auto gc = connected_components(g, spacing_mm);
  const auto pc = connected_components(p, spacing_mm);

  ScanMetrics m;
  m.dsc = dice(g, p);
  m.hd95_mm = hd95(g, p, spacing_mm);
  const auto match = lesion_f1(gc, pc, iou_threshold);
  m.f1 = match.f1;
  m.tp_lesions = match.tp;
  m.fp_lesions = match.fp;
  m.fn_lesions = match.fn;
  m.gt_lesions = static_cast<int>(gc.size());
  m.pred_lesions = static_cast<int>(pc.size());
  return m;
}

CohortReport aggregate(const std::vector<ScanMetrics>& scans) {
  require(!scans.empty(), "aggregate: no scans");
  CohortReport report;
  report.scans = scans;

  std::vector<std::string> order;
  std::map<std::string, std::vector<const ScanMetrics*>> groups;
  for (const auto& s : scans) {
    if (groups.find(s.patient_id) == groups.end()) order.push_back(s.patient_id);
    groups[s.patient_id].push_back(&s);
  }

  std::vector<double> cohort_dsc, cohort_f1, cohort_hd95;
  for (const auto& id : order) {
    PatientSummary ps;
    ps.patient_id = id;
    std::vector<double> dscs, f1s, hds;
    for (const ScanMetrics* s : groups[id]) {
      dscs.push_back(s->dsc);
      f1s.push_back(s->f1);
      if (s->hd95_mm.has_value()) hds.push_back(*s->hd95_mm);
    }
    ps.n_scans = static_cast<int>(dscs.size());
    ps.dsc = mean(dscs);
    ps.f1 = mean(f1s);
    if (!hds.empty()) ps.hd95_mm = mean(hds);
    cohort_dsc.push_back(ps.dsc);
    cohort_f1.push_back(ps.f1);
    if (ps.hd95_mm.has_value()) cohort_hd95.push_back(*ps.hd95_mm);
    report.patients.push_back(std::move(ps));
  }
  report.dsc = mean(cohort_dsc);
  report.f1 = mean(cohort_f1);
  report.hd95_patients = static_cast<int>(cohort_hd95.size());
  if (!cohort_hd95.empty()) report.hd95_mm = mean(cohort_hd95);
  return report;
}

std::string report_to_json(const CohortReport& report) {
  nlohmann::ordered_json j;
  j["format"] = "longidiff-report v1";
  j["cohort"] = {{"patients", report.patients.size()},
                 {"dsc", report.dsc},
                 {"hd95_mm", json_or_null(report.hd95_mm)},
                 {"hd95_patients", report.hd95_patients},
                 {"f1", report.f1}};
  auto& pats = j["patients"] = nlohmann::ordered_json::array();
  for (const auto& p : report.patients)
    pats.push_back({{"id", p.patient_id},
                    {"scans", p.n_scans},
                    {"dsc", p.dsc},
                    {"hd95_mm", json_or_null(p.hd95_mm)},
                    {"f1", p.f1}});
  auto& scans = j["scans"] = nlohmann::ordered_json::array();
  for (const auto& s : report.scans)
    scans.push_back({{"patient", s.patient_id},
                     {"timepoint", s.timepoint},
                     {"dsc", s.dsc},
                     {"hd95_mm", json_or_null(s.hd95_mm)},
                     {"f1", s.f1},
                     {"tp_lesions", s.tp_lesions},
                     {"fp_lesions", s.fp_lesions},
                     {"fn_lesions", s.fn_lesions},
                     {"gt_lesions", s.gt_lesions},
                     {"pred_lesions", s.pred_lesions}});
  return j.dump(2) + "\n";
}

std::string render_report_table(const CohortReport& report) {
  std::string out = "patient    scans     DSC    HD95      F1\n";
  const auto row = [&](const std::string& id, int scans, double dsc,
                       const std::optional<double>& hd, double f1) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-10s %5d  %s  %6s  %s\n", id.c_str(), scans,
                  fmt(dsc, "%6.4f").c_str(),
                  hd.has_value() ? fmt(*hd, "%6.3f").c_str() : "   n/a",
                  fmt(f1, "%6.4f").c_str());
    out += buf;
  };
  int total_scans = 0;
  for (const auto& p : report.patients) {
    row(p.patient_id, p.n_scans, p.dsc, p.hd95_mm, p.f1);
    total_scans += p.n_scans;
  }
  row("cohort", total_scans, report.dsc, report.hd95_mm, report.f1);
  return out;
}

}  // namespace longidiff
