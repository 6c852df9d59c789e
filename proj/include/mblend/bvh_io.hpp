#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mblend {

class BvhError : public std::runtime_error {
 public:
  BvhError(const std::string& message, int line)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
        line_(line) {}

  int line() const { return line_; }

 private:
  int line_;
};

enum class Channel { x_position, y_position, z_position, x_rotation, y_rotation, z_rotation };

struct Joint {
  std::string name;
  int parent = -1;
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();
  // File order. Exactly three rotation channels, and zero or three position
  // channels.
  std::vector<Channel> channels;
  std::optional<Eigen::Vector3d> end_site;

  bool has_position() const;
  // Rotation axes in channel order, e.g. "ZXY" means R = Rz * Rx * Ry.
  std::string rotation_order() const;
  static std::vector<Channel> make_channels(bool with_position, std::string_view rotation_order);
};

struct Skeleton {
  std::vector<Joint> joints;
  std::set<int> foot_joints;

  int size() const { return static_cast<int>(joints.size()); }
  int channel_count() const;
  // Index of the joint named `name`, or -1. Namespace prefixes such as
  // "mixamorig:" are ignored on both sides.
  int find(std::string_view name) const;
  std::vector<std::vector<int>> children() const;
  // Throws std::invalid_argument when the topological/root invariants fail.
  void validate() const;
};

// Per-frame pose data. `positions` holds the local translation of every joint
// (root: world position; joints without position channels: their offset).
// `euler` holds each joint's three rotation channels in its channel order, in
// degrees.
struct RawMotion {
  double frame_time = 1.0 / 30.0;
  Eigen::MatrixXd positions;  // T x 3J
  Eigen::MatrixXd euler;      // T x 3J

  int frames() const { return static_cast<int>(euler.rows()); }
  int joints() const { return static_cast<int>(euler.cols() / 3); }
  double fps() const { return 1.0 / frame_time; }

  Eigen::Vector3d position(int frame, int joint) const {
    return positions.block<1, 3>(frame, 3 * joint).transpose();
  }
  Eigen::Vector3d angles(int frame, int joint) const {
    return euler.block<1, 3>(frame, 3 * joint).transpose();
  }
  void validate(const Skeleton& skeleton) const;
};

struct BvhDocument {
  Skeleton skeleton;
  RawMotion motion;
};

Eigen::Matrix3d euler_to_matrix(const Eigen::Vector3d& degrees, std::string_view order);
Eigen::Vector3d matrix_to_euler(const Eigen::Matrix3d& rotation, std::string_view order);

BvhDocument parse_bvh(std::string_view text);
BvhDocument read_bvh_file(const std::string& path);
std::string write_bvh(const Skeleton& skeleton, const RawMotion& motion);
void write_bvh_file(const std::string& path, const Skeleton& skeleton, const RawMotion& motion);

// World positions of every joint at `frame`, honoring per-frame joint
// translations.
std::vector<Eigen::Vector3d> raw_world_positions(const Skeleton& skeleton, const RawMotion& motion, int frame);
Eigen::Matrix3d local_rotation(const Skeleton& skeleton, const RawMotion& motion, int frame, int joint);

BvhDocument select_joints(const Skeleton& skeleton, const RawMotion& motion, const std::vector<std::string>& keep);
RawMotion resample(const RawMotion& motion, double target_fps);
std::vector<int> resample_indices(int frames, double source_fps, double target_fps);
RawMotion trim(const RawMotion& motion, int start_frame, int end_frame);

// One name per line; blank lines and '#' comments are skipped.
std::vector<std::string> read_name_list(const std::string& path);
std::vector<std::string> parse_name_list(std::string_view text);
void assign_foot_joints(Skeleton& skeleton, const std::vector<std::string>& names);

}  // namespace mblend
