#pragma once

#include "mblend/autodiff.hpp"
#include "mblend/bvh_io.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mblend {

// Channel groups follow the motion layout: one group per joint, then the
// contact group (when present), then the root group. The two auxiliary groups
// are attached to the root joint.
struct SkeletonNeighborhoods {
  std::vector<std::vector<int>> joints;  // joint -> joints within tree distance d
  std::vector<std::vector<int>> groups;  // group -> neighbouring groups
  int joint_count = 0;
  bool has_contact_group = false;

  int group_count() const { return static_cast<int>(groups.size()); }
};

SkeletonNeighborhoods build_neighborhoods(const Skeleton& skeleton, int distance, bool with_contact_group = true);

using GroupWidths = std::vector<int>;

GroupWidths motion_group_widths(int joints, int contacts);
GroupWidths uniform_group_widths(int groups, int per_group);

// Temporal convolution whose output group g only sees input groups in N(g).
// Weight layout: out x (in * kernel), column = in_channel * kernel + tap.
// Reflection padding keeps the frame count.
class SkeletonConv {
 public:
  SkeletonConv() = default;
  SkeletonConv(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& in, const GroupWidths& out, int kernel,
               std::mt19937_64& rng);
  // Fully connected across channels (no skeletal mask).
  static SkeletonConv dense(int in_channels, int out_channels, int kernel, std::mt19937_64& rng);

  ad::Var forward(const ad::Var& x) const;
  std::vector<ad::Var> parameters() const { return {weight, bias}; }

  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }
  int kernel() const { return kernel_; }
  const ad::Matrix& mask() const { return mask_; }

  ad::Var weight;
  ad::Var bias;

 private:
  void init(std::mt19937_64& rng);

  ad::Matrix mask_;
  int in_channels_ = 0;
  int out_channels_ = 0;
  int kernel_ = 1;
};

// Reflection-padded unfold (im2col) table for a C x T input.
std::shared_ptr<const ad::IndexMap> unfold_map(int channels, int frames, int kernel);

// Per-frame motion identity, broadcast across the D channels of each frame.
// Values are b / (B - 1) (all zero when B == 1).
struct SkeletonIdMap {
  Eigen::MatrixXd values;  // T x D
  int identities = 1;

  static SkeletonIdMap from_frames(const std::vector<int>& frame_ids, int identities, int width);
  static SkeletonIdMap constant(int identity, int frames, int identities, int width);

  int frames() const { return static_cast<int>(values.rows()); }
  int identity_at(int frame) const;
  std::vector<int> frame_identities() const;
  // Nearest-frame resampling keeps every frame a valid identity.
  SkeletonIdMap resample_nearest(int target_frames) const;
};

std::vector<int> nearest_frame_indices(int source_frames, int target_frames);

enum class ModulationKind { none, spade, film };

std::string to_string(ModulationKind kind);
ModulationKind modulation_kind_from_string(const std::string& name);

// out = gamma * features + beta with (gamma, beta) predicted from the one-hot
// identity map by a shared skeleton-conv embedding and two skeleton-conv heads.
// FiLM uses temporal extent 1 everywhere. No feature normalization.
class ModulationBlock {
 public:
  ModulationBlock() = default;
  ModulationBlock(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& features, int identities,
                  int embed_per_group, ModulationKind kind, int kernel, std::mt19937_64& rng,
                  double slope = 0.2);

  ad::Var forward(const ad::Var& features, const std::vector<int>& frame_ids) const;
  std::pair<ad::Var, ad::Var> modulation(const std::vector<int>& frame_ids) const;
  ad::Matrix one_hot(const std::vector<int>& frame_ids) const;
  std::vector<ad::Var> parameters() const;

  // Zero head weights with gamma bias 1 and beta bias 0: an exact no-op.
  void reset_to_identity();

  SkeletonConv embed;
  SkeletonConv gamma_head;
  SkeletonConv beta_head;

 private:
  int identities_ = 1;
  int groups_ = 0;
  double slope_ = 0.2;
};

}  // namespace mblend
