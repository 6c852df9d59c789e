#include "synthetic.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace mblend::synth {

namespace {

int add_joint(Skeleton& s, const std::string& name, int parent, const Eigen::Vector3d& offset, bool position = false,
              const std::string& order = "ZXY") {
  Joint j;
  j.name = name;
  j.parent = parent;
  j.offset = offset;
  j.channels = Joint::make_channels(position, order);
  s.joints.push_back(j);
  return s.size() - 1;
}

void set_angles(RawMotion& m, int t, int joint, double z, double x, double y) {
  m.euler.block<1, 3>(t, 3 * joint) << z, x, y;  // ZXY channel order
}

RawMotion rest_motion(const Skeleton& skeleton, int frames, double fps) {
  RawMotion m;
  m.frame_time = 1.0 / fps;
  m.positions.resize(frames, 3 * skeleton.size());
  m.euler = Eigen::MatrixXd::Zero(frames, 3 * skeleton.size());
  for (int t = 0; t < frames; ++t)
    for (int j = 0; j < skeleton.size(); ++j) m.positions.block<1, 3>(t, 3 * j) = skeleton.joints[j].offset.transpose();
  return m;
}

}  // namespace

SyntheticStyle walk_style() { return {}; }

SyntheticStyle dance_style() {
  SyntheticStyle s;
  s.frequency = 0.55;
  s.chirp = 0.05;
  s.envelope = 0.35;
  s.envelope_frequency = 0.23;
  s.leg_swing = 14.0;
  s.arm_swing = 55.0;
  s.arm_raise = 70.0;
  s.torso_twist = 25.0;
  s.speed = 0.25;
  s.bob = 0.08;
  s.phase = 1.1;
  return s;
}

Skeleton synthetic_skeleton() {
  Skeleton s;
  const int pelvis = add_joint(s, "pelvis", -1, {0, 0.95, 0}, true);
  const int spine = add_joint(s, "spine", pelvis, {0, 0.25, 0});
  const int head = add_joint(s, "head", spine, {0, 0.3, 0});
  s.joints[head].end_site = Eigen::Vector3d(0, 0.15, 0);
  const int ls = add_joint(s, "left_shoulder", spine, {0.18, 0.25, 0});
  const int lw = add_joint(s, "left_wrist", ls, {0.5, 0, 0});
  s.joints[lw].end_site = Eigen::Vector3d(0.08, 0, 0);
  const int rs = add_joint(s, "right_shoulder", spine, {-0.18, 0.25, 0});
  const int rw = add_joint(s, "right_wrist", rs, {-0.5, 0, 0});
  s.joints[rw].end_site = Eigen::Vector3d(-0.08, 0, 0);
  const int lk = add_joint(s, "left_knee", pelvis, {0.1, -0.45, 0});
  const int lf = add_joint(s, "left_foot", lk, {0, -0.42, 0});
  const int lt = add_joint(s, "left_toe", lf, {0, -0.05, 0.12});
  s.joints[lt].end_site = Eigen::Vector3d(0, 0, 0.05);
  const int rk = add_joint(s, "right_knee", pelvis, {-0.1, -0.45, 0});
  const int rf = add_joint(s, "right_foot", rk, {0, -0.42, 0});
  const int rt = add_joint(s, "right_toe", rf, {0, -0.05, 0.12});
  s.joints[rt].end_site = Eigen::Vector3d(0, 0, 0.05);
  s.foot_joints = {lf, lt, rf, rt};
  s.validate();
  return s;
}

RawMotion synthetic_motion(const Skeleton& skeleton, const SyntheticStyle& style, int frames, double fps) {
  RawMotion m = rest_motion(skeleton, frames, fps);
  const double two_pi = 2.0 * std::numbers::pi;
  double x = 0.0;
  for (int t = 0; t < frames; ++t) {
    const double time = t / fps;
    const double phase = two_pi * (style.frequency * time + 0.5 * style.chirp * time * time) + style.phase;
    const double amp = 1.0 + style.envelope * std::sin(two_pi * style.envelope_frequency * time);
    const double s = std::sin(phase);
    const double c = std::cos(phase);
    const double s2 = std::sin(2.0 * phase);

    x += style.speed * (1.0 + 0.3 * s2) / fps;
    m.positions.block<1, 3>(t, 0) << 0.2 * std::sin(0.5 * phase), 0.95 + style.bob * amp * std::cos(2.0 * phase), x;
    set_angles(m, t, 0, 3.0 * amp * s, 2.0 * s2, style.torso_twist * amp * s);              // pelvis
    set_angles(m, t, 1, 2.0 * c, 4.0 + 3.0 * s2, -0.6 * style.torso_twist * amp * s);       // spine
    set_angles(m, t, 2, 0.0, 5.0 * std::sin(phase + 0.7), 8.0 * amp * c);                   // head
    set_angles(m, t, 3, -style.arm_raise * amp * (0.5 + 0.5 * s), style.arm_swing * amp * c, 0.0);
    set_angles(m, t, 4, 0.0, 0.0, -20.0 - 15.0 * amp * std::max(0.0, s));
    set_angles(m, t, 5, style.arm_raise * amp * (0.5 - 0.5 * c), -style.arm_swing * amp * c, 0.0);
    set_angles(m, t, 6, 0.0, 0.0, 20.0 + 15.0 * amp * std::max(0.0, -s));
    set_angles(m, t, 7, 2.0 * s, style.leg_swing * amp * s, 0.0);                           // left leg
    set_angles(m, t, 8, 0.0, 35.0 * amp * std::max(0.0, std::sin(phase - 1.2)), 0.0);
    set_angles(m, t, 9, 0.0, -10.0 * amp * std::max(0.0, c), 0.0);
    set_angles(m, t, 10, -2.0 * s, -style.leg_swing * amp * s, 0.0);                        // right leg
    set_angles(m, t, 11, 0.0, 35.0 * amp * std::max(0.0, -std::sin(phase - 1.2)), 0.0);
    set_angles(m, t, 12, 0.0, -10.0 * amp * std::max(0.0, -c), 0.0);
  }
  return m;
}

Skeleton mixamo_like_skeleton() {
  Skeleton s;
  const std::string p = "mixamorig:";
  const int hips = add_joint(s, p + "Hips", -1, {0, 100, 0}, true);
  int spine = add_joint(s, p + "Spine", hips, {0, 10, 0});
  spine = add_joint(s, p + "Spine1", spine, {0, 12, 0});
  const int chest = add_joint(s, p + "Spine2", spine, {0, 13, 0});
  const int neck = add_joint(s, p + "Neck", chest, {0, 15, 0});
  const int head = add_joint(s, p + "Head", neck, {0, 10, 0});
  const int top = add_joint(s, p + "HeadTop_End", head, {0, 18, 0});
  s.joints[top].end_site = Eigen::Vector3d(0, 0, 0);
  const char* fingers[] = {"Thumb", "Index", "Middle", "Ring", "Pinky"};
  for (int side = 0; side < 2; ++side) {
    const double sx = side == 0 ? 1.0 : -1.0;
    const std::string lr = side == 0 ? "Left" : "Right";
    const int shoulder = add_joint(s, p + lr + "Shoulder", chest, {sx * 6, 12, 0});
    const int arm = add_joint(s, p + lr + "Arm", shoulder, {sx * 12, 0, 0});
    const int fore = add_joint(s, p + lr + "ForeArm", arm, {sx * 27, 0, 0});
    const int hand = add_joint(s, p + lr + "Hand", fore, {sx * 25, 0, 0});
    for (int f = 0; f < 5; ++f) {
      int parent = hand;
      for (int k = 1; k <= 4; ++k) {
        const Eigen::Vector3d offset =
            k == 1 ? Eigen::Vector3d(sx * (f == 0 ? 3 : 9), 0, 3.0 - 1.5 * f) : Eigen::Vector3d(sx * 3, 0, 0);
        parent = add_joint(s, p + lr + "Hand" + fingers[f] + std::to_string(k), parent, offset);
      }
      s.joints[parent].end_site = Eigen::Vector3d(0, 0, 0);
    }
  }
  for (int side = 0; side < 2; ++side) {
    const double sx = side == 0 ? 1.0 : -1.0;
    const std::string lr = side == 0 ? "Left" : "Right";
    const int up = add_joint(s, p + lr + "UpLeg", hips, {sx * 9, -6, 0});
    const int leg = add_joint(s, p + lr + "Leg", up, {0, -42, 0});
    const int foot = add_joint(s, p + lr + "Foot", leg, {0, -40, 0});
    const int toe = add_joint(s, p + lr + "ToeBase", foot, {0, -8, 12});
    const int end = add_joint(s, p + lr + "Toe_End", toe, {0, 0, 8});
    s.joints[end].end_site = Eigen::Vector3d(0, 0, 0);
  }
  s.validate();
  return s;
}

RawMotion mixamo_like_motion(const Skeleton& skeleton, int frames, double fps, std::uint64_t seed) {
  RawMotion m = rest_motion(skeleton, frames, fps);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.2, 1.5);
  std::uniform_real_distribution<double> phase(0.0, 6.28);
  std::uniform_real_distribution<double> amp(2.0, 40.0);
  for (int j = 0; j < skeleton.size(); ++j) {
    for (int axis = 0; axis < 3; ++axis) {
      const double f1 = freq(rng), f2 = freq(rng), p1 = phase(rng), p2 = phase(rng), a1 = amp(rng), a2 = amp(rng);
      for (int t = 0; t < frames; ++t) {
        const double time = t / fps;
        m.euler(t, 3 * j + axis) = a1 * std::sin(6.2832 * f1 * time + p1) + 0.5 * a2 * std::sin(6.2832 * f2 * time + p2);
      }
    }
  }
  for (int t = 0; t < frames; ++t)
    m.positions.block<1, 3>(t, 0) << 20.0 * std::sin(t / fps), 100.0 + 5.0 * std::cos(2.0 * t / fps), 60.0 * t / fps;
  return m;
}

Skeleton toy_skeleton() {
  Skeleton s;
  const int root = add_joint(s, "root", -1, {0, 1, 0}, true);
  const int tip = add_joint(s, "tip", root, {0, -0.5, 0.2});
  s.joints[tip].end_site = Eigen::Vector3d(0, -0.1, 0);
  s.foot_joints = {tip};
  s.validate();
  return s;
}

RawMotion toy_motion(const Skeleton& skeleton, int frames, double fps, double frequency) {
  RawMotion m = rest_motion(skeleton, frames, fps);
  for (int t = 0; t < frames; ++t) {
    const double phase = 2.0 * std::numbers::pi * frequency * t / fps;
    m.positions.block<1, 3>(t, 0) << 0.0, 1.0 + 0.05 * std::sin(2.0 * phase), 0.5 * t / fps;
    set_angles(m, t, 0, 10.0 * std::sin(phase), 5.0 * std::cos(phase), 0.0);
    set_angles(m, t, 1, 0.0, 40.0 * std::sin(phase + 0.5), 10.0 * std::cos(phase));
  }
  return m;
}

}  // namespace mblend::synth
