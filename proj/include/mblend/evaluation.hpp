#pragma once

#include "mblend/blender.hpp"
#include "mblend/metrics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mblend {

struct EvalOptions {
  MetricOptions metrics;
  int samples = 50;
  std::uint64_t seed = 0;
  // Blend schedule for FID, diversity and smoothness; empty means an even
  // split over the model identities in batch order.
  BlendSchedule schedule;
  std::vector<std::string> probe_joints = default_probe_joints();
  int transition_half_width = 15;
};

struct EvalResult {
  Report report;
  SmoothnessSeries smoothness;      // first blend sample
  std::vector<double> coverage_per_identity;
  std::vector<MotionTensor> blends;
};

// Sample i uses seed + i. Coverage of real motion b is measured per sample on
// constant-identity generations of b and averaged; FID is averaged over blend
// samples against the pooled real windows; diversities use the blend samples.
EvalResult evaluate(const PyramidModel& model, const std::vector<MotionTensor>& real, const EvalOptions& options);

}  // namespace mblend
