#pragma once

#include "mblend/motion_repr.hpp"
#include "mblend/skeletal_nn.hpp"

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mblend {

struct ModelConfig {
  ModulationKind modulation = ModulationKind::spade;
  std::set<int> conditioning_levels{1};
  // Total hidden width of each skeleton-conv layer, split evenly over the
  // channel groups.
  int hidden_width = 96;
  int neighborhood_distance = 2;
  int kernel = 5;
  int body_layers = 4;
  double leaky_slope = 0.2;

  int hidden_per_group(int groups) const { return std::max(1, (hidden_width + groups - 1) / groups); }
};

// One generator stage: `body_layers` skeleton convolutions with a leaky ReLU
// between them and, when conditioned, a modulation block after every hidden
// convolution. Stages after the first add their output to the upsampled
// previous motion.
class Generator {
 public:
  Generator() = default;
  Generator(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& motion, const ModelConfig& config,
            bool conditioned, int identities, std::mt19937_64& rng);

  // input: D x T. residual_base: upsampled previous motion (D x T) or
  // undefined for the coarsest stage. frame_ids required when conditioned.
  ad::Var forward(const ad::Var& input, const ad::Var& residual_base, const std::vector<int>* frame_ids) const;
  std::vector<ad::Var> parameters() const;
  bool conditioned() const { return !modulations.empty(); }
  void zero_output_layer();

  std::vector<SkeletonConv> layers;
  std::vector<ModulationBlock> modulations;

 private:
  double slope_ = 0.2;
};

// Patch critic: skeleton convolutions down to a 1 x T score map.
class Critic {
 public:
  Critic() = default;
  Critic(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& motion, const ModelConfig& config,
         std::mt19937_64& rng);

  ad::Var forward(const ad::Var& motion) const;
  // Mean of the score map; the scalar used by the adversarial objective.
  ad::Var score(const ad::Var& motion) const { return ad::mean(forward(motion)); }
  std::vector<ad::Var> parameters() const;

  std::vector<SkeletonConv> layers;

 private:
  double slope_ = 0.2;
};

struct PyramidModel {
  Skeleton skeleton;
  LevelSpec level_spec;
  ModelConfig config;
  int contacts = 0;
  double fps = 30.0;
  std::vector<std::string> identities;  // batch order
  std::vector<Generator> generators;    // index = stage - 1
  std::vector<Critic> critics;
  // Fixed reconstruction noise z*: [stage - 1][batch] -> D x T_stage.
  std::vector<std::vector<Eigen::MatrixXd>> z_star;
  std::vector<double> noise_amplitudes;
  bool trained = false;
  std::string config_hash;

  static PyramidModel create(const Skeleton& skeleton, int contacts, int frames, double fps,
                             std::vector<std::string> identities, const ModelConfig& config, std::uint64_t seed);

  int width() const { return MotionTensor::width_for(skeleton.size(), contacts); }
  int identity_count() const { return static_cast<int>(identities.size()); }
  int training_frames() const { return level_spec.level_lengths.back(); }
  bool conditioned(int stage) const;
  int identity_index(const std::string& name) const;  // -1 when unknown
  std::vector<ad::Var> stage_generator_parameters(int stage) const;
  std::vector<ad::Var> stage_critic_parameters(int stage) const;
};

enum class GenerationMode { random, reconstruction };

struct GenerationTrace {
  std::vector<MotionTensor> stages;  // M^(1) .. M^(S)
  MotionTensor final_motion;
};

// Differentiable single-stage forward on channel-major (D x T) data.
ad::Var stage_forward(const PyramidModel& model, int stage, const ad::Var& residual_base, const ad::Var& noise,
                      const std::vector<int>* frame_ids);

MotionTensor generator_forward(const PyramidModel& model, int stage, const MotionTensor* prev_motion,
                               const Eigen::MatrixXd& noise, const SkeletonIdMap* id_map);
Eigen::VectorXd discriminator_forward(const PyramidModel& model, int stage, const MotionTensor& motion);

GenerationTrace generate_full(const PyramidModel& model, const SkeletonIdMap& id_map, std::uint64_t seed,
                              GenerationMode mode, int batch_index = 0);

// Noise amplitude per stage from real level data (D x T_level per motion).
std::vector<double> compute_noise_amplitudes(const std::vector<MotionTensor>& motions, const LevelSpec& levels);

void save_checkpoint(const std::string& path, const PyramidModel& model);
PyramidModel load_checkpoint(const std::string& path);
std::string serialize_checkpoint(const PyramidModel& model);
PyramidModel deserialize_checkpoint(const std::string& bytes);

}  // namespace mblend
