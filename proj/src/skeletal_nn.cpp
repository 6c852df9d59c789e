#include "mblend/skeletal_nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>
#include <queue>
#include <stdexcept>

namespace mblend {

SkeletonNeighborhoods build_neighborhoods(const Skeleton& skeleton, int distance, bool with_contact_group) {
  if (distance < 0) throw std::invalid_argument("neighborhood distance must be non-negative");
  skeleton.validate();
  const int joints = skeleton.size();
  std::vector<std::vector<int>> adjacency(joints);
  for (int j = 1; j < joints; ++j) {
    adjacency[j].push_back(skeleton.joints[j].parent);
    adjacency[skeleton.joints[j].parent].push_back(j);
  }

  SkeletonNeighborhoods result;
  result.joint_count = joints;
  result.has_contact_group = with_contact_group;
  result.joints.resize(joints);
  for (int start = 0; start < joints; ++start) {
    std::vector<int> depth(joints, -1);
    std::queue<int> frontier;
    depth[start] = 0;
    frontier.push(start);
    while (!frontier.empty()) {
      const int j = frontier.front();
      frontier.pop();
      if (depth[j] == distance) continue;
      for (int k : adjacency[j]) {
        if (depth[k] >= 0) continue;
        depth[k] = depth[j] + 1;
        frontier.push(k);
      }
    }
    for (int j = 0; j < joints; ++j)
      if (depth[j] >= 0) result.joints[start].push_back(j);
  }

  const int aux = with_contact_group ? 2 : 1;
  std::vector<int> aux_groups;
  for (int a = 0; a < aux; ++a) aux_groups.push_back(joints + a);
  result.groups.resize(joints + aux);
  for (int j = 0; j < joints; ++j) {
    result.groups[j] = result.joints[j];
    if (std::binary_search(result.joints[j].begin(), result.joints[j].end(), 0))
      result.groups[j].insert(result.groups[j].end(), aux_groups.begin(), aux_groups.end());
  }
  for (int a : aux_groups) {
    result.groups[a] = result.joints[0];
    result.groups[a].insert(result.groups[a].end(), aux_groups.begin(), aux_groups.end());
  }
  return result;
}

GroupWidths motion_group_widths(int joints, int contacts) {
  GroupWidths widths(joints, 6);
  if (contacts > 0) widths.push_back(contacts);
  widths.push_back(3);
  return widths;
}

GroupWidths uniform_group_widths(int groups, int per_group) { return GroupWidths(groups, per_group); }

namespace {

std::vector<int> channel_groups(const GroupWidths& widths) {
  std::vector<int> groups;
  for (int g = 0; g < static_cast<int>(widths.size()); ++g) groups.insert(groups.end(), widths[g], g);
  return groups;
}

int reflect(int p, int frames) {
  while (p < 0 || p > frames - 1) {
    if (p < 0) p = -p;
    if (p > frames - 1) p = 2 * (frames - 1) - p;
  }
  return p;
}

}  // namespace

std::shared_ptr<const ad::IndexMap> unfold_map(int channels, int frames, int kernel) {
  if (frames < 2 && kernel > 1) throw std::invalid_argument("reflection padding needs at least two frames");
  thread_local std::map<std::tuple<int, int, int>, std::shared_ptr<const ad::IndexMap>> cache;
  auto& cached = cache[{channels, frames, kernel}];
  if (cached) return cached;
  auto map = std::make_shared<ad::IndexMap>();
  map->source_rows = channels;
  map->source_cols = frames;
  map->out_rows = static_cast<ad::Index>(channels) * kernel;
  map->out_cols = frames;
  map->source.resize(static_cast<size_t>(map->out_rows * map->out_cols));
  const int pad = kernel / 2;
  for (int t = 0; t < frames; ++t) {
    for (int c = 0; c < channels; ++c) {
      for (int k = 0; k < kernel; ++k) {
        const int src_t = reflect(t + k - pad, frames);
        const ad::Index out_index = static_cast<ad::Index>(t) * map->out_rows + c * kernel + k;
        map->source[static_cast<size_t>(out_index)] = static_cast<ad::Index>(src_t) * channels + c;
      }
    }
  }
  cached = map;
  return map;
}

SkeletonConv::SkeletonConv(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& in, const GroupWidths& out,
                           int kernel, std::mt19937_64& rng)
    : kernel_(kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("kernel extent must be odd and positive");
  if (static_cast<int>(in.size()) != neighborhoods.group_count() ||
      static_cast<int>(out.size()) != neighborhoods.group_count())
    throw std::invalid_argument("channel grouping does not match neighborhoods");
  const auto in_groups = channel_groups(in);
  const auto out_groups = channel_groups(out);
  in_channels_ = static_cast<int>(in_groups.size());
  out_channels_ = static_cast<int>(out_groups.size());
  mask_ = ad::Matrix::Zero(out_channels_, in_channels_ * kernel);
  for (int o = 0; o < out_channels_; ++o) {
    const auto& near = neighborhoods.groups[out_groups[o]];
    for (int c = 0; c < in_channels_; ++c) {
      if (std::find(near.begin(), near.end(), in_groups[c]) == near.end()) continue;
      mask_.block(o, c * kernel, 1, kernel).setOnes();
    }
  }
  init(rng);
}

SkeletonConv SkeletonConv::dense(int in_channels, int out_channels, int kernel, std::mt19937_64& rng) {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("kernel extent must be odd and positive");
  SkeletonConv conv;
  conv.kernel_ = kernel;
  conv.in_channels_ = in_channels;
  conv.out_channels_ = out_channels;
  conv.mask_ = ad::Matrix::Ones(out_channels, in_channels * kernel);
  conv.init(rng);
  return conv;
}

void SkeletonConv::init(std::mt19937_64& rng) {
  ad::Matrix w = ad::Matrix::Zero(out_channels_, in_channels_ * kernel_);
  ad::Matrix b = ad::Matrix::Zero(out_channels_, 1);
  for (int o = 0; o < out_channels_; ++o) {
    const double fan_in = std::max(1.0, mask_.row(o).sum());
    std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (int c = 0; c < w.cols(); ++c)
      if (mask_(o, c) != 0.0) w(o, c) = dist(rng);
    b(o, 0) = dist(rng);
  }
  weight = ad::parameter(std::move(w));
  bias = ad::parameter(std::move(b));
}

ad::Var SkeletonConv::forward(const ad::Var& x) const {
  if (x.rows() != in_channels_)
    throw std::invalid_argument("skeleton conv expects " + std::to_string(in_channels_) + " channels, got " +
                                std::to_string(x.rows()));
  const ad::Var columns =
      kernel_ == 1 ? x : ad::gather(x, unfold_map(in_channels_, static_cast<int>(x.cols()), kernel_));
  return ad::add_col_bias(ad::matmul(ad::mul_const(weight, mask_), columns), bias);
}

SkeletonIdMap SkeletonIdMap::from_frames(const std::vector<int>& frame_ids, int identities, int width) {
  if (identities < 1) throw std::invalid_argument("id map needs at least one identity");
  SkeletonIdMap map;
  map.identities = identities;
  map.values.resize(static_cast<Eigen::Index>(frame_ids.size()), width);
  for (size_t t = 0; t < frame_ids.size(); ++t) {
    if (frame_ids[t] < 0 || frame_ids[t] >= identities)
      throw std::invalid_argument("frame identity " + std::to_string(frame_ids[t]) + " out of range");
    const double value = identities > 1 ? static_cast<double>(frame_ids[t]) / (identities - 1) : 0.0;
    map.values.row(static_cast<Eigen::Index>(t)).setConstant(value);
  }
  return map;
}

SkeletonIdMap SkeletonIdMap::constant(int identity, int frames, int identities, int width) {
  return from_frames(std::vector<int>(frames, identity), identities, width);
}

int SkeletonIdMap::identity_at(int frame) const {
  if (identities == 1) return 0;
  return static_cast<int>(std::lround(values(frame, 0) * (identities - 1)));
}

std::vector<int> SkeletonIdMap::frame_identities() const {
  std::vector<int> ids(frames());
  for (int t = 0; t < frames(); ++t) ids[t] = identity_at(t);
  return ids;
}

std::vector<int> nearest_frame_indices(int source_frames, int target_frames) {
  std::vector<int> indices(target_frames);
  if (target_frames == 1) return {0};
  const double scale = static_cast<double>(source_frames - 1) / (target_frames - 1);
  for (int k = 0; k < target_frames; ++k)
    indices[k] = std::min(source_frames - 1, static_cast<int>(std::lround(k * scale)));
  return indices;
}

SkeletonIdMap SkeletonIdMap::resample_nearest(int target_frames) const {
  if (target_frames == frames()) return *this;
  SkeletonIdMap out;
  out.identities = identities;
  out.values.resize(target_frames, values.cols());
  const auto indices = nearest_frame_indices(frames(), target_frames);
  for (int k = 0; k < target_frames; ++k) out.values.row(k) = values.row(indices[k]);
  return out;
}

std::string to_string(ModulationKind kind) {
  switch (kind) {
    case ModulationKind::none: return "none";
    case ModulationKind::spade: return "spade";
    case ModulationKind::film: return "film";
  }
  return "none";
}

ModulationKind modulation_kind_from_string(const std::string& name) {
  if (name == "none") return ModulationKind::none;
  if (name == "spade") return ModulationKind::spade;
  if (name == "film") return ModulationKind::film;
  throw std::invalid_argument("unknown modulation kind '" + name + "' (expected spade, film or none)");
}

ModulationBlock::ModulationBlock(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& features,
                                 int identities, int embed_per_group, ModulationKind kind, int kernel,
                                 std::mt19937_64& rng, double slope)
    : identities_(identities), groups_(neighborhoods.group_count()), slope_(slope) {
  if (kind == ModulationKind::none) throw std::invalid_argument("modulation block needs spade or film");
  const int extent = kind == ModulationKind::film ? 1 : kernel;
  const auto one_hot_widths = uniform_group_widths(groups_, identities);
  const auto embed_widths = uniform_group_widths(groups_, embed_per_group);
  embed = SkeletonConv(neighborhoods, one_hot_widths, embed_widths, extent, rng);
  gamma_head = SkeletonConv(neighborhoods, embed_widths, features, extent, rng);
  beta_head = SkeletonConv(neighborhoods, embed_widths, features, extent, rng);
  reset_to_identity();
}

void ModulationBlock::reset_to_identity() {
  gamma_head.weight.mutable_value().setZero();
  gamma_head.bias.mutable_value().setOnes();
  beta_head.weight.mutable_value().setZero();
  beta_head.bias.mutable_value().setZero();
}

ad::Matrix ModulationBlock::one_hot(const std::vector<int>& frame_ids) const {
  ad::Matrix hot = ad::Matrix::Zero(static_cast<ad::Index>(groups_) * identities_,
                                    static_cast<ad::Index>(frame_ids.size()));
  for (size_t t = 0; t < frame_ids.size(); ++t) {
    if (frame_ids[t] < 0 || frame_ids[t] >= identities_) throw std::invalid_argument("frame identity out of range");
    for (int g = 0; g < groups_; ++g) hot(g * identities_ + frame_ids[t], static_cast<ad::Index>(t)) = 1.0;
  }
  return hot;
}

std::pair<ad::Var, ad::Var> ModulationBlock::modulation(const std::vector<int>& frame_ids) const {
  const ad::Var hidden = ad::leaky_relu(embed.forward(ad::constant(one_hot(frame_ids))), slope_);
  return {gamma_head.forward(hidden), beta_head.forward(hidden)};
}

ad::Var ModulationBlock::forward(const ad::Var& features, const std::vector<int>& frame_ids) const {
  if (features.cols() != static_cast<ad::Index>(frame_ids.size()))
    throw std::invalid_argument("id map length " + std::to_string(frame_ids.size()) + " != feature frames " +
                                std::to_string(features.cols()));
  const auto [gamma, beta] = modulation(frame_ids);
  if (gamma.rows() != features.rows()) throw std::invalid_argument("modulation width does not match features");
  return ad::add(ad::mul(gamma, features), beta);
}

std::vector<ad::Var> ModulationBlock::parameters() const {
  return {embed.weight, embed.bias, gamma_head.weight, gamma_head.bias, beta_head.weight, beta_head.bias};
}

}  // namespace mblend
