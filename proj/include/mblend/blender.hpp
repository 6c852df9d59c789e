#pragma once

#include "mblend/pyramid_model.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mblend {

struct BlendSegment {
  std::string identity;
  int frames = 0;
};

struct BlendSchedule {
  std::vector<BlendSegment> segments;

  int total_frames() const;
  // Frame index where each segment after the first begins.
  std::vector<int> boundaries() const;
  void validate() const;
  std::string summary() const;

  // One `identity=frames` entry per line; blank lines and '#' comments skipped.
  static BlendSchedule parse(std::string_view text);
  static BlendSchedule read(const std::string& path);
  static BlendSchedule constant(const std::string& identity, int frames);
  // Splits `frames` as evenly as possible over the identities, in order.
  static BlendSchedule even(const std::vector<std::string>& identities, int frames);
};

SkeletonIdMap make_id_map(const BlendSchedule& schedule, const PyramidModel& model);

struct BlendResult {
  MotionTensor tensor;
  RawMotion motion;
};

// Single generation pass driven by the schedule. The motion is decoded with
// the root starting at the origin of the ground plane.
BlendResult blend(const PyramidModel& model, const BlendSchedule& schedule, std::uint64_t seed,
                  const Skeleton& skeleton, GenerationMode mode = GenerationMode::random, int batch_index = 0);

}  // namespace mblend
