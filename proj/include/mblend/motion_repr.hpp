#pragma once

#include "mblend/bvh_io.hpp"

#include <Eigen/Core>

#include <array>
#include <string>
#include <vector>

namespace mblend {

inline constexpr int kRotationWidth = 6;  // Q
inline constexpr int kRootWidth = 3;      // root height + planar velocity (x, z)
inline constexpr int kNumLevels = 4;
inline constexpr int kNumStages = 7;

// The T x D training matrix. Columns: J blocks of 6D rotations (joint order),
// then C contact labels, then [root height, velocity x, velocity z].
struct MotionTensor {
  Eigen::MatrixXd data;
  int joints = 0;
  int contacts = 0;
  double fps = 30.0;

  MotionTensor() = default;
  MotionTensor(Eigen::MatrixXd values, int joints, int contacts, double fps);

  int frames() const { return static_cast<int>(data.rows()); }
  int width() const { return static_cast<int>(data.cols()); }
  int contact_offset() const { return kRotationWidth * joints; }
  int root_offset() const { return kRotationWidth * joints + contacts; }
  static int width_for(int joints, int contacts) { return kRotationWidth * joints + contacts + kRootWidth; }
  // Column indices of the rotation and root channels (contacts excluded).
  std::vector<int> pose_columns() const;
};

struct LevelSpec {
  std::array<int, kNumLevels> level_lengths{};

  static LevelSpec for_length(int frames);
  // Stages are 1-based: 1,2 -> 1; 3,4 -> 2; 5,6 -> 3; 7 -> 4.
  static int level_of_stage(int stage);
  static std::vector<int> stages_of_level(int level);
  int stage_length(int stage) const { return level_lengths[level_of_stage(stage) - 1]; }
  void validate() const;
};

struct ContactConfig {
  double velocity_threshold = 0.18;
  // Height threshold as a multiple of the mean foot-offset length.
  double height_factor = 2.5;
};

Eigen::Matrix<double, 6, 1> rotation_to_6d(const Eigen::Matrix3d& rotation);
Eigen::Matrix3d rotation_from_6d(const Eigen::Matrix<double, 6, 1>& v);

std::vector<Eigen::Vector3d> forward_kinematics(const Skeleton& skeleton,
                                                const std::vector<Eigen::Matrix3d>& local_rotations,
                                                const Eigen::Vector3d& root_position);

// positions[t][f] is the world position of the f-th foot joint at frame t.
Eigen::MatrixXd extract_contacts(const std::vector<std::vector<Eigen::Vector3d>>& positions, double fps,
                                 double velocity_threshold, double height_threshold);
double contact_height_threshold(const Skeleton& skeleton, const ContactConfig& config);

MotionTensor encode_motion(const Skeleton& skeleton, const RawMotion& motion, const ContactConfig& config = {});
RawMotion decode_motion(const MotionTensor& tensor, const Skeleton& skeleton, const Eigen::Vector2d& initial_root_xz);

// World positions of all joints for every frame of an encoded tensor. Root
// x/z come from integrating the planar velocity from `initial_root_xz`.
std::vector<std::vector<Eigen::Vector3d>> tensor_world_positions(const MotionTensor& tensor, const Skeleton& skeleton,
                                                                 const Eigen::Vector2d& initial_root_xz = {0, 0});

// Linear interpolation along time with aligned end points.
Eigen::MatrixXd resample_matrix(int source_frames, int target_frames);
MotionTensor temporal_resample(const MotionTensor& tensor, int target_frames);

// Binary fixture dump: int32 T, J, Q, C; float64 fps; then T*D float32 row-major.
void write_tensor_dump(const std::string& path, const MotionTensor& tensor);
MotionTensor read_tensor_dump(const std::string& path);

}  // namespace mblend
