#include "mblend/motion_repr.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace mblend {

MotionTensor::MotionTensor(Eigen::MatrixXd values, int joints_, int contacts_, double fps_)
    : data(std::move(values)), joints(joints_), contacts(contacts_), fps(fps_) {
  if (data.cols() != width_for(joints, contacts))
    throw std::invalid_argument("tensor width " + std::to_string(data.cols()) + " != J*Q + C + 3 = " +
                                std::to_string(width_for(joints, contacts)));
  if (fps <= 0.0) throw std::invalid_argument("fps must be positive");
}

std::vector<int> MotionTensor::pose_columns() const {
  std::vector<int> columns;
  for (int c = 0; c < contact_offset(); ++c) columns.push_back(c);
  for (int c = root_offset(); c < width(); ++c) columns.push_back(c);
  return columns;
}

LevelSpec LevelSpec::for_length(int frames) {
  LevelSpec spec;
  static constexpr std::array<double, kNumLevels> ratios{0.25, 0.5, 0.75, 1.0};
  for (int l = 0; l < kNumLevels; ++l)
    spec.level_lengths[l] = static_cast<int>(std::lround(frames * ratios[l]));
  spec.validate();
  return spec;
}

int LevelSpec::level_of_stage(int stage) {
  if (stage < 1 || stage > kNumStages) throw std::out_of_range("stage " + std::to_string(stage) + " out of range");
  return stage == kNumStages ? kNumLevels : (stage + 1) / 2;
}

std::vector<int> LevelSpec::stages_of_level(int level) {
  if (level < 1 || level > kNumLevels) throw std::out_of_range("level " + std::to_string(level) + " out of range");
  if (level == kNumLevels) return {kNumStages};
  return {2 * level - 1, 2 * level};
}

void LevelSpec::validate() const {
  for (int l = 0; l < kNumLevels; ++l) {
    if (level_lengths[l] < 2) throw std::invalid_argument("level lengths must be at least 2 frames");
    if (l > 0 && level_lengths[l] <= level_lengths[l - 1])
      throw std::invalid_argument("level lengths must be strictly increasing");
  }
}

Eigen::Matrix<double, 6, 1> rotation_to_6d(const Eigen::Matrix3d& rotation) {
  Eigen::Matrix<double, 6, 1> v;
  v << rotation.col(0), rotation.col(1);
  return v;
}

Eigen::Matrix3d rotation_from_6d(const Eigen::Matrix<double, 6, 1>& v) {
  const Eigen::Vector3d a1 = v.head<3>();
  const Eigen::Vector3d a2 = v.tail<3>();
  const double n1 = a1.norm();
  if (n1 < 1e-12) throw std::domain_error("degenerate 6D rotation: zero first column");
  const Eigen::Vector3d b1 = a1 / n1;
  const Eigen::Vector3d u2 = a2 - b1.dot(a2) * b1;
  const double n2 = u2.norm();
  if (n2 < 1e-12 * std::max(1.0, a2.norm())) throw std::domain_error("degenerate 6D rotation: parallel columns");
  const Eigen::Vector3d b2 = u2 / n2;
  Eigen::Matrix3d r;
  r << b1, b2, b1.cross(b2);
  return r;
}

std::vector<Eigen::Vector3d> forward_kinematics(const Skeleton& skeleton,
                                                const std::vector<Eigen::Matrix3d>& local_rotations,
                                                const Eigen::Vector3d& root_position) {
  if (static_cast<int>(local_rotations.size()) != skeleton.size())
    throw std::invalid_argument("rotation count does not match joint count");
  const int joints = skeleton.size();
  std::vector<Eigen::Matrix3d> world(joints);
  std::vector<Eigen::Vector3d> positions(joints);
  for (int j = 0; j < joints; ++j) {
    const int p = skeleton.joints[j].parent;
    if (p < 0) {
      world[j] = local_rotations[j];
      positions[j] = root_position;
    } else {
      world[j] = world[p] * local_rotations[j];
      positions[j] = positions[p] + world[p] * skeleton.joints[j].offset;
    }
  }
  return positions;
}

Eigen::MatrixXd extract_contacts(const std::vector<std::vector<Eigen::Vector3d>>& positions, double fps,
                                 double velocity_threshold, double height_threshold) {
  const int frames = static_cast<int>(positions.size());
  if (frames < 2) throw std::invalid_argument("contact extraction needs at least two frames");
  const int feet = static_cast<int>(positions.front().size());
  if (feet == 0) throw std::invalid_argument("contact extraction needs a non-empty foot joint set");
  Eigen::MatrixXd labels(frames, feet);
  for (int t = 0; t + 1 < frames; ++t) {
    for (int f = 0; f < feet; ++f) {
      const double speed = (positions[t + 1][f] - positions[t][f]).norm() * fps;
      labels(t, f) = (speed < velocity_threshold && positions[t][f].y() < height_threshold) ? 1.0 : 0.0;
    }
  }
  labels.row(frames - 1) = labels.row(frames - 2);
  return labels;
}

double contact_height_threshold(const Skeleton& skeleton, const ContactConfig& config) {
  if (skeleton.foot_joints.empty()) return 0.0;
  double total = 0.0;
  for (int f : skeleton.foot_joints) total += skeleton.joints[f].offset.norm();
  return config.height_factor * total / static_cast<double>(skeleton.foot_joints.size());
}

MotionTensor encode_motion(const Skeleton& skeleton, const RawMotion& motion, const ContactConfig& config) {
  skeleton.validate();
  motion.validate(skeleton);
  const int frames = motion.frames();
  const int joints = skeleton.size();
  const int contacts = static_cast<int>(skeleton.foot_joints.size());
  const double fps = motion.fps();
  MotionTensor tensor(Eigen::MatrixXd::Zero(frames, MotionTensor::width_for(joints, contacts)), joints, contacts, fps);

  std::vector<std::vector<Eigen::Vector3d>> foot_positions(frames);
  const std::vector<int> feet(skeleton.foot_joints.begin(), skeleton.foot_joints.end());
  for (int t = 0; t < frames; ++t) {
    std::vector<Eigen::Matrix3d> rotations(joints);
    for (int j = 0; j < joints; ++j) {
      rotations[j] = local_rotation(skeleton, motion, t, j);
      tensor.data.block<1, kRotationWidth>(t, kRotationWidth * j) = rotation_to_6d(rotations[j]).transpose();
    }
    if (contacts > 0) {
      const auto positions = forward_kinematics(skeleton, rotations, motion.position(t, 0));
      for (int f : feet) foot_positions[t].push_back(positions[f]);
    }
  }
  if (contacts > 0) {
    tensor.data.middleCols(tensor.contact_offset(), contacts) = extract_contacts(
        foot_positions, fps, config.velocity_threshold, contact_height_threshold(skeleton, config));
  }

  const int root = tensor.root_offset();
  for (int t = 0; t < frames; ++t) {
    const int next = t + 1 < frames ? t + 1 : t;
    const int here = t + 1 < frames ? t : t - 1;
    tensor.data(t, root) = motion.positions(t, 1);
    tensor.data(t, root + 1) = (motion.positions(next, 0) - motion.positions(here, 0)) * fps;
    tensor.data(t, root + 2) = (motion.positions(next, 2) - motion.positions(here, 2)) * fps;
  }
  return tensor;
}

namespace {

void check_layout(const MotionTensor& tensor, const Skeleton& skeleton) {
  if (tensor.joints != skeleton.size() || tensor.width() != MotionTensor::width_for(tensor.joints, tensor.contacts))
    throw std::invalid_argument("tensor layout does not match skeleton");
}

Eigen::MatrixXd integrate_root(const MotionTensor& tensor, const Eigen::Vector2d& initial_root_xz) {
  const int frames = tensor.frames();
  const int root = tensor.root_offset();
  Eigen::MatrixXd positions(frames, 3);
  double x = initial_root_xz.x();
  double z = initial_root_xz.y();
  for (int t = 0; t < frames; ++t) {
    positions(t, 0) = x;
    positions(t, 1) = tensor.data(t, root);
    positions(t, 2) = z;
    x += tensor.data(t, root + 1) / tensor.fps;
    z += tensor.data(t, root + 2) / tensor.fps;
  }
  return positions;
}

}  // namespace

RawMotion decode_motion(const MotionTensor& tensor, const Skeleton& skeleton, const Eigen::Vector2d& initial_root_xz) {
  check_layout(tensor, skeleton);
  const int frames = tensor.frames();
  const int joints = skeleton.size();
  RawMotion motion;
  motion.frame_time = 1.0 / tensor.fps;
  motion.euler.resize(frames, 3 * joints);
  motion.positions.resize(frames, 3 * joints);
  const Eigen::MatrixXd root = integrate_root(tensor, initial_root_xz);
  for (int t = 0; t < frames; ++t) {
    for (int j = 0; j < joints; ++j) {
      const Eigen::Matrix<double, 6, 1> v = tensor.data.block<1, kRotationWidth>(t, kRotationWidth * j).transpose();
      const auto& joint = skeleton.joints[j];
      motion.euler.block<1, 3>(t, 3 * j) = matrix_to_euler(rotation_from_6d(v), joint.rotation_order()).transpose();
      motion.positions.block<1, 3>(t, 3 * j) = j == 0 ? Eigen::RowVector3d(root.row(t)) : joint.offset.transpose();
    }
  }
  return motion;
}

std::vector<std::vector<Eigen::Vector3d>> tensor_world_positions(const MotionTensor& tensor, const Skeleton& skeleton,
                                                                 const Eigen::Vector2d& initial_root_xz) {
  check_layout(tensor, skeleton);
  const Eigen::MatrixXd root = integrate_root(tensor, initial_root_xz);
  std::vector<std::vector<Eigen::Vector3d>> result(tensor.frames());
  std::vector<Eigen::Matrix3d> rotations(skeleton.size());
  for (int t = 0; t < tensor.frames(); ++t) {
    for (int j = 0; j < skeleton.size(); ++j)
      rotations[j] =
          rotation_from_6d(tensor.data.block<1, kRotationWidth>(t, kRotationWidth * j).transpose());
    result[t] = forward_kinematics(skeleton, rotations, root.row(t).transpose());
  }
  return result;
}

Eigen::MatrixXd resample_matrix(int source_frames, int target_frames) {
  if (source_frames < 2 || target_frames < 2) throw std::invalid_argument("resampling needs at least two frames");
  Eigen::MatrixXd weights = Eigen::MatrixXd::Zero(source_frames, target_frames);
  if (source_frames == target_frames) return Eigen::MatrixXd::Identity(source_frames, target_frames);
  const double scale = static_cast<double>(source_frames - 1) / (target_frames - 1);
  for (int k = 0; k < target_frames; ++k) {
    const double position = k * scale;
    int lower = static_cast<int>(std::floor(position));
    lower = std::min(lower, source_frames - 2);
    const double frac = position - lower;
    weights(lower, k) += 1.0 - frac;
    weights(lower + 1, k) += frac;
  }
  return weights;
}

MotionTensor temporal_resample(const MotionTensor& tensor, int target_frames) {
  if (target_frames < 2) throw std::invalid_argument("target frame count must be at least 2");
  if (target_frames == tensor.frames()) return tensor;
  MotionTensor out = tensor;
  out.data = resample_matrix(tensor.frames(), target_frames).transpose() * tensor.data;
  return out;
}

void write_tensor_dump(const std::string& path, const MotionTensor& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write tensor dump '" + path + "'");
  const std::int32_t header[4] = {tensor.frames(), tensor.joints, kRotationWidth, tensor.contacts};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(&tensor.fps), sizeof(double));
  for (int t = 0; t < tensor.frames(); ++t) {
    for (int c = 0; c < tensor.width(); ++c) {
      const float v = static_cast<float>(tensor.data(t, c));
      out.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
  }
  if (!out) throw std::runtime_error("failed writing tensor dump '" + path + "'");
}

MotionTensor read_tensor_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open tensor dump '" + path + "'");
  std::int32_t header[4];
  double fps = 0.0;
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  in.read(reinterpret_cast<char*>(&fps), sizeof(double));
  if (!in || header[0] < 0 || header[1] < 0 || header[2] != kRotationWidth || header[3] < 0)
    throw std::runtime_error("bad tensor dump header in '" + path + "'");
  const int width = MotionTensor::width_for(header[1], header[3]);
  Eigen::MatrixXd data(header[0], width);
  for (int t = 0; t < header[0]; ++t) {
    for (int c = 0; c < width; ++c) {
      float v = 0.0f;
      in.read(reinterpret_cast<char*>(&v), sizeof(float));
      data(t, c) = v;
    }
  }
  if (!in) throw std::runtime_error("truncated tensor dump '" + path + "'");
  return MotionTensor(std::move(data), header[1], header[3], fps);
}

}  // namespace mblend
