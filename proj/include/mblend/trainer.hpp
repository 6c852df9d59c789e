#pragma once

#include "mblend/pyramid_model.hpp"

#include <functional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mblend {

struct LossWeights {
  double adv = 1.0;
  double rec = 50.0;
  double con = 5.0;  // final stage only
  double gp = 1.0;

  void validate() const;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double epsilon = 1e-8;
};

// Skewed sigmoid 1 / (1 + exp(-steepness * (x - midpoint))).
struct ContactSigmoid {
  double steepness = 12.0;
  double midpoint = 0.5;

  double operator()(double x) const;
};

struct TrainConfig {
  int iterations_per_level = 1000;
  AdamConfig optimizer;
  LossWeights weights;
  ContactSigmoid contact_sigmoid;
  std::uint64_t seed = 0;
  ModelConfig model;
  double divergence_threshold = 1e6;

  void validate() const;
};

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<ad::Var> parameters, AdamConfig config);

  // gradients are plain values in the same order as the parameters.
  void step(const std::vector<ad::Var>& gradients);
  const std::vector<ad::Var>& parameters() const { return parameters_; }

 private:
  std::vector<ad::Var> parameters_;
  std::vector<Eigen::MatrixXd> m_;
  std::vector<Eigen::MatrixXd> v_;
  AdamConfig config_;
  long step_count_ = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Scalar critic used by the penalty: motion (D x T) -> 1 x 1.
using CriticFunction = std::function<ad::Var(const ad::Var&)>;

// Mean over the batch of (||grad_x critic(x~)||_2 - 1)^2 at the interpolates
// x~ = a * fake + (1 - a) * real, one a ~ U[0, 1] per sample. The result is
// differentiable with respect to the critic parameters.
ad::Var gradient_penalty(const CriticFunction& critic, const std::vector<ad::Matrix>& real,
                         const std::vector<ad::Matrix>& fake, std::mt19937_64& rng);

// Mean absolute difference.
ad::Var reconstruction_loss(const ad::Var& generated, const ad::Matrix& target);
double reconstruction_loss(const Eigen::MatrixXd& generated, const Eigen::MatrixXd& target);

// Foot velocity weighted by the skewed sigmoid of the generated contact
// channel: sum over feet and frames t < T-1 of ||p_{t+1} - p_t||^2 * s(C_t),
// divided by T * |F|. Positions come from forward kinematics of the decoded
// motion; velocities are per-frame displacements.
ad::Var contact_loss(const ad::Var& motion, const Skeleton& skeleton, double fps, const ContactSigmoid& sigmoid = {});
double contact_loss(const MotionTensor& motion, const Skeleton& skeleton, const ContactSigmoid& sigmoid = {});

struct TelemetryRow {
  int iteration = 0;  // 1-based within the level
  int level = 0;
  std::string stages;  // e.g. "1+2"
  double critic_loss = 0.0;
  double wasserstein = 0.0;  // mean D(real) - mean D(fake)
  double gradient_penalty = 0.0;
  double generator_adv = 0.0;
  double reconstruction = 0.0;
  double contact = 0.0;
  double total = 0.0;  // generator objective
};

void write_telemetry_header(std::ostream& out);
void write_telemetry_row(std::ostream& out, const TelemetryRow& row);

struct StageLosses {
  double critic_loss = 0.0;
  double wasserstein = 0.0;
  double gradient_penalty = 0.0;
  double generator_adv = 0.0;
  double reconstruction = 0.0;
  double contact = 0.0;
  double total = 0.0;
};

// Progressive trainer. Levels are trained in order; within a level every
// iteration runs one critic step followed by one generator step for each of
// the level's stages. Stages of earlier levels are frozen.
class Trainer {
 public:
  Trainer(PyramidModel& model, std::vector<MotionTensor> motions, TrainConfig config);

  void train_level(int level, const std::function<void(const TelemetryRow&)>& sink = {});
  // Trains every level and marks the model as trained.
  void train(const std::function<void(const TelemetryRow&)>& sink = {});

  // One critic + generator update of a single stage.
  StageLosses step_stage(int stage);

  const std::vector<Eigen::MatrixXd>& real_at_level(int level) const { return real_[level - 1]; }

 private:
  struct StageInputs {
    std::vector<ad::Matrix> random;          // previous motion at stage resolution, D x T (empty for stage 1)
    std::vector<ad::Matrix> reconstruction;  // same, driven by z*
  };

  StageInputs inputs_for(int stage);
  std::vector<ad::Matrix> run_frozen(int last_stage, bool reconstruction);
  void check_finite(int stage, const StageLosses& losses) const;

  PyramidModel& model_;
  std::vector<MotionTensor> motions_;
  TrainConfig config_;
  std::mt19937_64 rng_;
  std::vector<std::vector<Eigen::MatrixXd>> real_;  // [level - 1][b] D x T_level
  std::vector<Adam> generator_optimizers_;
  std::vector<Adam> critic_optimizers_;
  // Per-stage outputs of the current iteration, reused by the next stage of
  // the same level.
  std::vector<std::vector<ad::Matrix>> last_random_;
  std::vector<std::vector<ad::Matrix>> last_reconstruction_;
  std::vector<ad::Matrix> frozen_reconstruction_;  // cached per level
  int frozen_level_ = 0;
};

// Creates the model, computes noise amplitudes, and trains all levels.
PyramidModel train(const Skeleton& skeleton, const std::vector<MotionTensor>& motions,
                   const std::vector<std::string>& identities, const TrainConfig& config,
                   const std::function<void(const TelemetryRow&)>& sink = {});

}  // namespace mblend
