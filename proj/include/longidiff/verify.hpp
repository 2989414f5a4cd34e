#pragma once

#include <string>
#include <vector>

namespace longidiff {

/// One verification check: a measured value that must not exceed its
/// bound. Counting checks (mismatches across randomized trials) use
/// value = number of failures and bound = 0.
struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double bound = 0.0;
  std::string note;
};

/// Central-difference gradient verification (64-bit) of every
/// differentiable op and of the full difference-weighted forward, weights
/// included. Max relative error per op must stay below 1e-4.
std::vector<CheckResult> verify_gradcheck();

/// Exactness properties of the difference weighting block: identical
/// inputs reduce the longitudinal forward to the plain encoder-decoder
/// bit-exactly, per-channel constant shifts of the prior are absorbed by
/// the normalization, and the block adds no parameters.
std::vector<CheckResult> verify_block_identities();

/// Metric implementations versus independent brute-force oracles
/// (all-pairs connectivity, all-pairs surface distances, exhaustive greedy
/// matching) on randomized volumes up to 8 voxels per axis.
std::vector<CheckResult> verify_metric_oracles(int trials = 200);

bool all_passed(const std::vector<CheckResult>& results);

/// One aligned "PASS name  value < bound" line per check.
std::string render_checks(const std::vector<CheckResult>& results);

}  // namespace longidiff
