#pragma once

/**
 * Baseline clipping and group normalization of trace rewards.
 *
 * R'_k = max(0, R_k - R_base); A_k = (R'_k - mean) / population-std.
 * A group whose clipped rewards have (near-)zero variance is degenerate and
 * contributes zero advantage rather than an epsilon-divided spike.
 */

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace nrt {

constexpr double kDegenerateStdFloor = 1e-8;

struct RewardGroup {
  std::size_t prompt_id = 0;
  std::vector<double> rewards;  // K trace rewards, K >= 2
  double baseline_reward = 0.0;
};

struct AdvantageGroup {
  std::vector<double> clipped;
  std::vector<double> advantages;
  bool degenerate = false;
};

inline std::vector<double> clip_rewards(const RewardGroup& g) {
  std::vector<double> out(g.rewards.size());
  for (std::size_t i = 0; i < g.rewards.size(); ++i)
    out[i] = std::max(0.0, g.rewards[i] - g.baseline_reward);
  return out;
}

inline AdvantageGroup normalize(std::span<const double> clipped) {
  if (clipped.size() < 2) throw std::invalid_argument("normalize: group size K must be >= 2");
  AdvantageGroup g;
  g.clipped.assign(clipped.begin(), clipped.end());
  const double k = static_cast<double>(clipped.size());
  double mean = 0.0;
  for (double r : clipped) mean += r;
  mean /= k;
  double var = 0.0;
  for (double r : clipped) var += (r - mean) * (r - mean);
  var /= k;  // population variance, no Bessel correction
  const double sd = std::sqrt(var);
  g.advantages.resize(clipped.size());
  if (sd < kDegenerateStdFloor) {
    g.degenerate = true;
    for (auto& a : g.advantages) a = 0.0;
  } else {
    for (std::size_t i = 0; i < clipped.size(); ++i) g.advantages[i] = (clipped[i] - mean) / sd;
  }
  return g;
}

inline AdvantageGroup compute_advantages(const RewardGroup& g) {
  return normalize(clip_rewards(g));
}

}  // namespace nrt
