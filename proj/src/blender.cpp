#include "mblend/blender.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mblend {

namespace {

std::string_view trim_view(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

int BlendSchedule::total_frames() const {
  int total = 0;
  for (const auto& s : segments) total += s.frames;
  return total;
}

std::vector<int> BlendSchedule::boundaries() const {
  std::vector<int> result;
  int frame = 0;
  for (size_t i = 0; i + 1 < segments.size(); ++i) {
    frame += segments[i].frames;
    result.push_back(frame);
  }
  return result;
}

void BlendSchedule::validate() const {
  if (segments.empty()) throw std::invalid_argument("blend schedule has no segments");
  for (const auto& s : segments) {
    if (s.identity.empty()) throw std::invalid_argument("blend schedule segment has an empty identity");
    if (s.frames < 1)
      throw std::invalid_argument("blend schedule segment '" + s.identity + "' must have at least one frame");
  }
}

std::string BlendSchedule::summary() const {
  std::ostringstream out;
  int start = 0;
  for (const auto& s : segments) {
    out << "  frames " << start << "-" << start + s.frames - 1 << ": " << s.identity << " (" << s.frames << ")\n";
    start += s.frames;
  }
  out << "  total: " << start << " frames\n";
  return out.str();
}

BlendSchedule BlendSchedule::parse(std::string_view text) {
  BlendSchedule schedule;
  int line_number = 0;
  while (!text.empty()) {
    const auto end = text.find('\n');
    std::string_view line = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
    ++line_number;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim_view(line);
    if (line.empty()) continue;
    const auto eq = line.rfind('=');
    if (eq == std::string_view::npos)
      throw std::invalid_argument("schedule line " + std::to_string(line_number) + ": expected identity=frames");
    const std::string_view name = trim_view(line.substr(0, eq));
    const std::string_view count = trim_view(line.substr(eq + 1));
    int frames = 0;
    const auto [ptr, ec] = std::from_chars(count.data(), count.data() + count.size(), frames);
    if (ec != std::errc() || ptr != count.data() + count.size())
      throw std::invalid_argument("schedule line " + std::to_string(line_number) + ": invalid frame count '" +
                                  std::string(count) + "'");
    schedule.segments.push_back({std::string(name), frames});
  }
  schedule.validate();
  return schedule;
}

BlendSchedule BlendSchedule::read(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open schedule file '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

BlendSchedule BlendSchedule::constant(const std::string& identity, int frames) {
  BlendSchedule schedule{{{identity, frames}}};
  schedule.validate();
  return schedule;
}

BlendSchedule BlendSchedule::even(const std::vector<std::string>& identities, int frames) {
  if (identities.empty()) throw std::invalid_argument("no identities to schedule");
  BlendSchedule schedule;
  const int n = static_cast<int>(identities.size());
  for (int i = 0; i < n; ++i) schedule.segments.push_back({identities[i], (i + 1) * frames / n - i * frames / n});
  schedule.validate();
  return schedule;
}

SkeletonIdMap make_id_map(const BlendSchedule& schedule, const PyramidModel& model) {
  schedule.validate();
  std::vector<int> frame_ids;
  frame_ids.reserve(schedule.total_frames());
  for (const auto& segment : schedule.segments) {
    const int index = model.identity_index(segment.identity);
    if (index < 0) {
      std::string available;
      for (const auto& name : model.identities) available += (available.empty() ? "" : ", ") + name;
      throw std::invalid_argument("unknown motion identity '" + segment.identity + "' (available: " + available + ")");
    }
    frame_ids.insert(frame_ids.end(), segment.frames, index);
  }
  return SkeletonIdMap::from_frames(frame_ids, model.identity_count(), model.width());
}

BlendResult blend(const PyramidModel& model, const BlendSchedule& schedule, std::uint64_t seed,
                  const Skeleton& skeleton, GenerationMode mode, int batch_index) {
  const SkeletonIdMap id_map = make_id_map(schedule, model);
  GenerationTrace trace = generate_full(model, id_map, seed, mode, batch_index);
  BlendResult result{std::move(trace.final_motion), {}};
  result.motion = decode_motion(result.tensor, skeleton, Eigen::Vector2d::Zero());
  return result;
}

}  // namespace mblend
