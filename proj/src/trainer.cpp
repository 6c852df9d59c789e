#include "mblend/trainer.hpp"

#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

namespace mblend {

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
  return m;
}

bool finite(double v) { return std::isfinite(v); }

using Row3 = std::array<ad::Var, 3>;
using Mat3 = std::array<std::array<ad::Var, 3>, 3>;

Row3 normalize(const Row3& v) {
  const ad::Var n = ad::sqrt(ad::add_scalar(ad::square(v[0]) + ad::square(v[1]) + ad::square(v[2]), 1e-12));
  return {v[0] / n, v[1] / n, v[2] / n};
}

// Gram-Schmidt on the two stored columns, evaluated per frame (1 x T rows).
Mat3 rotation_rows(const ad::Var& motion, int joint) {
  std::array<ad::Var, 6> r;
  for (int k = 0; k < 6; ++k) r[k] = ad::rows(motion, kRotationWidth * joint + k, 1);
  const Row3 b1 = normalize({r[0], r[1], r[2]});
  const ad::Var d = b1[0] * r[3] + b1[1] * r[4] + b1[2] * r[5];
  const Row3 b2 = normalize({r[3] - d * b1[0], r[4] - d * b1[1], r[5] - d * b1[2]});
  const Row3 b3 = {b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2], b1[0] * b2[1] - b1[1] * b2[0]};
  Mat3 m;
  for (int i = 0; i < 3; ++i) {
    m[i][0] = b1[i];
    m[i][1] = b2[i];
    m[i][2] = b3[i];
  }
  return m;
}

struct ChainFk {
  const ad::Var& motion;
  const Skeleton& skeleton;
  std::map<int, Mat3> world;
  std::map<int, Row3> position;  // root x/z excluded

  void resolve(int joint) {
    if (world.count(joint)) return;
    const int parent = skeleton.joints[joint].parent;
    const Mat3 local = rotation_rows(motion, joint);
    if (parent < 0) {
      world[joint] = local;
      const auto frames = motion.cols();
      const ad::Var zero = ad::constant(Eigen::MatrixXd::Zero(1, frames));
      const int root_offset = static_cast<int>(motion.rows()) - kRootWidth;
      position[joint] = {zero, ad::rows(motion, root_offset, 1), zero};
      return;
    }
    resolve(parent);
    const Mat3& wp = world[parent];
    Mat3 w;
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) w[i][k] = wp[i][0] * local[0][k] + wp[i][1] * local[1][k] + wp[i][2] * local[2][k];
    world[joint] = w;
    const Eigen::Vector3d& off = skeleton.joints[joint].offset;
    Row3 p = position[parent];
    for (int i = 0; i < 3; ++i)
      for (int m = 0; m < 3; ++m)
        if (off[m] != 0.0) p[i] = p[i] + off[m] * wp[i][m];
    position[joint] = p;
  }
};

}  // namespace

void LossWeights::validate() const {
  if (!(adv >= 0 && rec >= 0 && con >= 0 && gp >= 0)) throw std::invalid_argument("loss weights must be nonnegative");
}

double ContactSigmoid::operator()(double x) const { return 1.0 / (1.0 + std::exp(-steepness * (x - midpoint))); }

void TrainConfig::validate() const {
  if (iterations_per_level < 1) throw std::invalid_argument("iterations_per_level must be at least 1");
  weights.validate();
  if (!(optimizer.learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
  if (!(optimizer.beta1 >= 0 && optimizer.beta1 < 1 && optimizer.beta2 >= 0 && optimizer.beta2 < 1))
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
}

Adam::Adam(std::vector<ad::Var> parameters, AdamConfig config)
    : parameters_(std::move(parameters)), config_(config) {
  for (const auto& p : parameters_) {
    m_.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
  }
}

void Adam::step(const std::vector<ad::Var>& gradients) {
  if (gradients.size() != parameters_.size()) throw std::invalid_argument("Adam: gradient count mismatch");
  ++step_count_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  for (size_t i = 0; i < parameters_.size(); ++i) {
    const Eigen::MatrixXd& g = gradients[i].value();
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    parameters_[i].mutable_value().array() -=
        config_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.epsilon);
  }
}

ad::Var gradient_penalty(const CriticFunction& critic, const std::vector<ad::Matrix>& real,
                         const std::vector<ad::Matrix>& fake, std::mt19937_64& rng) {
  if (real.empty() || real.size() != fake.size()) throw std::invalid_argument("gradient penalty: batch mismatch");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  ad::Var total;
  for (size_t b = 0; b < real.size(); ++b) {
    if (real[b].rows() != fake[b].rows() || real[b].cols() != fake[b].cols())
      throw std::invalid_argument("gradient penalty: real and fake shapes differ");
    const double alpha = uniform(rng);
    const ad::Var mixed = ad::parameter(alpha * fake[b] + (1.0 - alpha) * real[b]);
    const ad::Var score = critic(mixed);
    const ad::Var g = ad::grad(score, std::span<const ad::Var>(&mixed, 1), true)[0];
    if (!g.value().allFinite()) throw TrainingDiverged("gradient penalty: non-finite critic gradient");
    const ad::Var norm = ad::sqrt(ad::add_scalar(ad::sum(ad::square(g)), 1e-16));
    const ad::Var term = ad::square(ad::add_scalar(norm, -1.0));
    total = total.defined() ? total + term : term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(real.size()));
}

ad::Var reconstruction_loss(const ad::Var& generated, const ad::Matrix& target) {
  return ad::mean(ad::abs(ad::sub(generated, ad::constant(target))));
}

double reconstruction_loss(const Eigen::MatrixXd& generated, const Eigen::MatrixXd& target) {
  if (generated.rows() != target.rows() || generated.cols() != target.cols())
    throw std::invalid_argument("reconstruction loss: shape mismatch");
  return (generated - target).cwiseAbs().mean();
}

ad::Var contact_loss(const ad::Var& motion, const Skeleton& skeleton, double fps, const ContactSigmoid& sigmoid) {
  const int feet = static_cast<int>(skeleton.foot_joints.size());
  const int frames = static_cast<int>(motion.cols());
  if (feet == 0) return ad::scalar(0.0);
  if (motion.rows() != MotionTensor::width_for(skeleton.size(), feet))
    throw std::invalid_argument("contact loss: motion width does not match the skeleton");
  if (frames < 2) throw std::invalid_argument("contact loss needs at least two frames");
  const int contact_offset = kRotationWidth * skeleton.size();
  const int root_offset = contact_offset + feet;
  const int steps = frames - 1;

  ChainFk fk{motion, skeleton, {}, {}};
  const ad::Var root_dx = ad::scale(ad::cols(ad::rows(motion, root_offset + 1, 1), 0, steps), 1.0 / fps);
  const ad::Var root_dz = ad::scale(ad::cols(ad::rows(motion, root_offset + 2, 1), 0, steps), 1.0 / fps);
  ad::Var total;
  int f = 0;
  for (int joint : skeleton.foot_joints) {
    fk.resolve(joint);
    const Row3& p = fk.position[joint];
    std::array<ad::Var, 3> d;
    for (int i = 0; i < 3; ++i) d[i] = ad::cols(p[i], 1, steps) - ad::cols(p[i], 0, steps);
    d[0] = d[0] + root_dx;
    d[2] = d[2] + root_dz;
    const ad::Var speed2 = ad::square(d[0]) + ad::square(d[1]) + ad::square(d[2]);
    const ad::Var contact = ad::cols(ad::rows(motion, contact_offset + f, 1), 0, steps);
    const ad::Var weight =
        ad::sigmoid(ad::scale(ad::add_scalar(contact, -sigmoid.midpoint), sigmoid.steepness));
    const ad::Var term = ad::sum(speed2 * weight);
    total = total.defined() ? total + term : term;
    ++f;
  }
  return ad::scale(total, 1.0 / (static_cast<double>(frames) * feet));
}

double contact_loss(const MotionTensor& motion, const Skeleton& skeleton, const ContactSigmoid& sigmoid) {
  const int feet = static_cast<int>(skeleton.foot_joints.size());
  if (feet == 0) return 0.0;
  if (motion.frames() < 2) throw std::invalid_argument("contact loss needs at least two frames");
  const auto positions = tensor_world_positions(motion, skeleton);
  double total = 0.0;
  int f = 0;
  for (int joint : skeleton.foot_joints) {
    for (int t = 0; t + 1 < motion.frames(); ++t) {
      const double v2 = (positions[t + 1][joint] - positions[t][joint]).squaredNorm();
      total += v2 * sigmoid(motion.data(t, motion.contact_offset() + f));
    }
    ++f;
  }
  return total / (static_cast<double>(motion.frames()) * feet);
}

void write_telemetry_header(std::ostream& out) {
  out << "iteration,level,stages,critic_loss,wasserstein,gp,gen_adv,rec,con,total\n";
}

void write_telemetry_row(std::ostream& out, const TelemetryRow& row) {
  std::ostringstream line;
  line << std::setprecision(9) << row.iteration << ',' << row.level << ',' << row.stages << ',' << row.critic_loss
       << ',' << row.wasserstein << ',' << row.gradient_penalty << ',' << row.generator_adv << ','
       << row.reconstruction << ',' << row.contact << ',' << row.total << '\n';
  out << line.str();
}

Trainer::Trainer(PyramidModel& model, std::vector<MotionTensor> motions, TrainConfig config)
    : model_(model), motions_(std::move(motions)), config_(std::move(config)) {
  config_.validate();
  if (motions_.empty()) throw std::invalid_argument("training needs at least one motion");
  if (static_cast<int>(motions_.size()) != model_.identity_count())
    throw std::invalid_argument("motion count does not match the model's identities");
  for (const auto& m : motions_) {
    if (m.width() != model_.width() || m.joints != model_.skeleton.size() || m.contacts != model_.contacts)
      throw std::invalid_argument("motion layout does not match the model skeleton");
    if (m.frames() != model_.training_frames()) throw std::invalid_argument("all motions must have the training length");
    if (std::abs(m.fps - model_.fps) > 1e-6) throw std::invalid_argument("all motions must share the model frame rate");
    if (!m.data.allFinite()) throw std::invalid_argument("motion contains non-finite values");
  }
  std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32), 0x7261u};
  rng_.seed(seq);
  real_.resize(kNumLevels);
  for (int level = 1; level <= kNumLevels; ++level)
    for (const auto& m : motions_)
      real_[level - 1].push_back(temporal_resample(m, model_.level_spec.level_lengths[level - 1]).data.transpose());
  for (int stage = 1; stage <= kNumStages; ++stage) {
    generator_optimizers_.emplace_back(model_.stage_generator_parameters(stage), config_.optimizer);
    critic_optimizers_.emplace_back(model_.stage_critic_parameters(stage), config_.optimizer);
  }
  last_random_.resize(kNumStages);
  last_reconstruction_.resize(kNumStages);
}

std::vector<ad::Matrix> Trainer::run_frozen(int last_stage, bool reconstruction) {
  ad::NoGradGuard no_grad;
  const int batch = model_.identity_count();
  std::vector<ad::Matrix> outputs(batch);
  for (int b = 0; b < batch; ++b) {
    Eigen::MatrixXd previous;
    for (int stage = 1; stage <= last_stage; ++stage) {
      const int length = model_.level_spec.stage_length(stage);
      Eigen::MatrixXd noise = reconstruction ? model_.z_star[stage - 1][b]
                                             : Eigen::MatrixXd(model_.noise_amplitudes[stage - 1] *
                                                               gaussian(model_.width(), length, rng_));
      ad::Var base;
      if (stage > 1)
        base = ad::constant(previous.cols() == length
                                ? previous
                                : Eigen::MatrixXd(previous * resample_matrix(static_cast<int>(previous.cols()), length)));
      const std::vector<int> ids(length, b);
      previous = stage_forward(model_, stage, base, ad::constant(std::move(noise)), &ids).value();
    }
    outputs[b] = std::move(previous);
  }
  return outputs;
}

Trainer::StageInputs Trainer::inputs_for(int stage) {
  StageInputs inputs;
  if (stage == 1) return inputs;
  const int level = LevelSpec::level_of_stage(stage);
  const auto stages = LevelSpec::stages_of_level(level);
  if (stage != stages.front()) {
    inputs.random = last_random_[stage - 2];
    inputs.reconstruction = last_reconstruction_[stage - 2];
    return inputs;
  }
  const int length = model_.level_spec.stage_length(stage);
  const int previous_length = model_.level_spec.stage_length(stage - 1);
  const Eigen::MatrixXd up = resample_matrix(previous_length, length);
  if (frozen_level_ != level) {
    frozen_reconstruction_ = run_frozen(stage - 1, true);
    for (auto& m : frozen_reconstruction_) m = m * up;
    frozen_level_ = level;
  }
  inputs.reconstruction = frozen_reconstruction_;
  inputs.random = run_frozen(stage - 1, false);
  for (auto& m : inputs.random) m = m * up;
  return inputs;
}

StageLosses Trainer::step_stage(int stage) {
  if (stage < 1 || stage > kNumStages) throw std::out_of_range("stage out of range");
  const int level = LevelSpec::level_of_stage(stage);
  const int length = model_.level_spec.stage_length(stage);
  const int batch = model_.identity_count();
  const auto& real = real_[level - 1];
  const Generator& generator = model_.generators[stage - 1];
  const Critic& critic = model_.critics[stage - 1];
  const LossWeights& w = config_.weights;
  const StageInputs inputs = inputs_for(stage);

  std::vector<std::vector<int>> ids(batch);
  for (int b = 0; b < batch; ++b) ids[b].assign(length, b);

  // Random-mode fakes, recorded against the generator parameters.
  std::vector<ad::Var> fakes(batch);
  std::vector<ad::Matrix> fake_values(batch);
  for (int b = 0; b < batch; ++b) {
    const ad::Var noise = ad::constant(model_.noise_amplitudes[stage - 1] * gaussian(model_.width(), length, rng_));
    const ad::Var base = stage == 1 ? ad::Var() : ad::constant(inputs.random[b]);
    fakes[b] = stage_forward(model_, stage, base, noise, &ids[b]);
    fake_values[b] = fakes[b].value();
  }

  StageLosses losses;
  const double inv_batch = 1.0 / batch;

  // Critic update.
  {
    ad::Var real_score;
    ad::Var fake_score;
    for (int b = 0; b < batch; ++b) {
      const ad::Var r = critic.score(ad::constant(real[b]));
      const ad::Var f = critic.score(ad::constant(fake_values[b]));
      real_score = real_score.defined() ? real_score + r : r;
      fake_score = fake_score.defined() ? fake_score + f : f;
    }
    real_score = ad::scale(real_score, inv_batch);
    fake_score = ad::scale(fake_score, inv_batch);
    ad::Var loss = fake_score - real_score;
    if (w.gp > 0) {
      const ad::Var gp = gradient_penalty([&](const ad::Var& x) { return ad::sum(critic.forward(x)); }, real,
                                          fake_values, rng_);
      losses.gradient_penalty = gp.item();
      loss = loss + ad::scale(gp, w.gp);
    }
    losses.critic_loss = loss.item();
    losses.wasserstein = real_score.item() - fake_score.item();
    const auto params = model_.stage_critic_parameters(stage);
    critic_optimizers_[stage - 1].step(ad::grad(loss, params));
  }

  // Generator update against the refreshed critic.
  {
    const auto params = generator.parameters();
    ad::FreezeGuard freeze(critic.parameters());
    ad::Var adv;
    ad::Var rec;
    ad::Var con;
    std::vector<ad::Matrix> reconstructions(batch);
    for (int b = 0; b < batch; ++b) {
      const ad::Var score = critic.score(fakes[b]);
      adv = adv.defined() ? adv - score : ad::neg(score);
      const ad::Var base = stage == 1 ? ad::Var() : ad::constant(inputs.reconstruction[b]);
      const ad::Var out = stage_forward(model_, stage, base, ad::constant(model_.z_star[stage - 1][b]), &ids[b]);
      reconstructions[b] = out.value();
      const ad::Var r = reconstruction_loss(out, real[b]);
      rec = rec.defined() ? rec + r : r;
      if (stage == kNumStages && w.con > 0 && model_.contacts > 0) {
        const ad::Var c = contact_loss(fakes[b], model_.skeleton, model_.fps, config_.contact_sigmoid);
        con = con.defined() ? con + c : c;
      }
    }
    adv = ad::scale(adv, inv_batch);
    rec = ad::scale(rec, inv_batch);
    ad::Var total = ad::scale(adv, w.adv) + ad::scale(rec, w.rec);
    if (con.defined()) {
      con = ad::scale(con, inv_batch);
      total = total + ad::scale(con, w.con);
      losses.contact = con.item();
    }
    losses.generator_adv = adv.item();
    losses.reconstruction = rec.item();
    losses.total = total.item();
    check_finite(stage, losses);
    generator_optimizers_[stage - 1].step(ad::grad(total, params));
    last_reconstruction_[stage - 1] = std::move(reconstructions);
  }
  last_random_[stage - 1] = std::move(fake_values);
  return losses;
}

void Trainer::check_finite(int stage, const StageLosses& l) const {
  const std::array<std::pair<const char*, double>, 7> values{{{"critic_loss", l.critic_loss},
                                                               {"wasserstein", l.wasserstein},
                                                               {"gp", l.gradient_penalty},
                                                               {"gen_adv", l.generator_adv},
                                                               {"rec", l.reconstruction},
                                                               {"con", l.contact},
                                                               {"total", l.total}}};
  for (const auto& [name, value] : values) {
    if (!finite(value) || std::abs(value) > config_.divergence_threshold) {
      std::ostringstream msg;
      msg << "training diverged at stage " << stage << ": " << name << " = " << value << " (critic_loss "
          << l.critic_loss << ", gp " << l.gradient_penalty << ", gen_adv " << l.generator_adv << ", rec "
          << l.reconstruction << ", con " << l.contact << ")";
      throw TrainingDiverged(msg.str());
    }
  }
}

void Trainer::train_level(int level, const std::function<void(const TelemetryRow&)>& sink) {
  if (level < 1 || level > kNumLevels) throw std::out_of_range("level out of range");
  const auto stages = LevelSpec::stages_of_level(level);
  std::string label;
  for (int s : stages) label += (label.empty() ? "" : "+") + std::to_string(s);
  for (int it = 1; it <= config_.iterations_per_level; ++it) {
    TelemetryRow row;
    row.iteration = it;
    row.level = level;
    row.stages = label;
    for (int stage : stages) {
      const StageLosses l = step_stage(stage);
      row.critic_loss += l.critic_loss;
      row.wasserstein += l.wasserstein;
      row.gradient_penalty += l.gradient_penalty;
      row.generator_adv += l.generator_adv;
      row.reconstruction += l.reconstruction;
      row.contact += l.contact;
      row.total += l.total;
    }
    if (sink) sink(row);
  }
}

void Trainer::train(const std::function<void(const TelemetryRow&)>& sink) {
  for (int level = 1; level <= kNumLevels; ++level) train_level(level, sink);
  model_.trained = true;
}

PyramidModel train(const Skeleton& skeleton, const std::vector<MotionTensor>& motions,
                   const std::vector<std::string>& identities, const TrainConfig& config,
                   const std::function<void(const TelemetryRow&)>& sink) {
  config.validate();
  if (motions.empty()) throw std::invalid_argument("training needs at least one motion");
  const MotionTensor& first = motions.front();
  for (const auto& m : motions) {
    if (m.joints != first.joints || m.contacts != first.contacts || m.width() != first.width())
      throw std::invalid_argument("all motions must share the skeleton layout");
    if (m.frames() != first.frames()) throw std::invalid_argument("all motions must have the same length");
  }
  PyramidModel model =
      PyramidModel::create(skeleton, first.contacts, first.frames(), first.fps, identities, config.model, config.seed);
  model.noise_amplitudes = compute_noise_amplitudes(motions, model.level_spec);
  Trainer trainer(model, motions, config);
  trainer.train(sink);
  return model;
}

}  // namespace mblend
