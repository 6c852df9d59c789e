#include "mblend/trainer.hpp"
#include "synthetic.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

using namespace mblend;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.hidden_width = 12;
  c.kernel = 3;
  c.body_layers = 3;
  return c;
}

std::vector<MotionTensor> toy_motions(int frames = 16) {
  const Skeleton s = synth::toy_skeleton();
  return {encode_motion(s, synth::toy_motion(s, frames, 30.0, 1.0)),
          encode_motion(s, synth::toy_motion(s, frames, 30.0, 2.5))};
}

TrainConfig toy_train_config(int iterations = 2) {
  TrainConfig c;
  c.iterations_per_level = iterations;
  c.model = small_config();
  c.seed = 3;
  return c;
}

PyramidModel toy_model(const TrainConfig& config, const std::vector<MotionTensor>& motions) {
  PyramidModel m = PyramidModel::create(synth::toy_skeleton(), 1, motions.front().frames(), 30.0, {"slow", "fast"},
                                        config.model, config.seed);
  m.noise_amplitudes = compute_noise_amplitudes(motions, m.level_spec);
  return m;
}

ad::Matrix random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  ad::Matrix m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m(i) = n(rng);
  return m;
}

std::vector<Eigen::MatrixXd> parameter_values(const std::vector<ad::Var>& params) {
  std::vector<Eigen::MatrixXd> v;
  for (const auto& p : params) v.push_back(p.value());
  return v;
}

}  // namespace

TEST(GradientPenalty, LinearCriticClosedForm) {
  std::mt19937_64 rng(1);
  for (double scale : {0.3, 1.0, 2.7}) {
    ad::Matrix w = random_matrix(5, 8, rng);
    w *= scale / w.norm();
    const CriticFunction critic = [&](const ad::Var& x) { return ad::sum(ad::mul_const(x, w)); };
    const std::vector<ad::Matrix> real{random_matrix(5, 8, rng), random_matrix(5, 8, rng)};
    const std::vector<ad::Matrix> fake{random_matrix(5, 8, rng), random_matrix(5, 8, rng)};
    const double gp = gradient_penalty(critic, real, fake, rng).item();
    EXPECT_NEAR(gp, (scale - 1.0) * (scale - 1.0), 1e-6);
  }
  const CriticFunction zero = [](const ad::Var& x) { return ad::scale(ad::sum(x), 0.0); };
  const std::vector<ad::Matrix> a{ad::Matrix::Ones(2, 3)};
  EXPECT_NEAR(gradient_penalty(zero, a, a, rng).item(), 1.0, 1e-6);
  EXPECT_THROW(gradient_penalty(zero, a, {}, rng), std::invalid_argument);
}

TEST(GradientPenalty, DifferentiableInCriticWeights) {
  std::mt19937_64 rng(2);
  ad::Var w = ad::parameter(random_matrix(3, 4, rng));
  const std::vector<ad::Matrix> real{random_matrix(4, 6, rng)};
  const std::vector<ad::Matrix> fake{random_matrix(4, 6, rng)};
  const CriticFunction critic = [&](const ad::Var& x) { return ad::sum(ad::sigmoid(ad::matmul(w, x))); };
  auto evaluate = [&] {
    std::mt19937_64 local(9);
    return gradient_penalty(critic, real, fake, local);
  };
  const ad::Matrix g = ad::grad(evaluate(), std::vector<ad::Var>{w})[0].value();
  ad::Matrix numeric(3, 4);
  for (int i = 0; i < 12; ++i) {
    const double saved = w.mutable_value()(i);
    w.mutable_value()(i) = saved + 1e-6;
    const double up = evaluate().item();
    w.mutable_value()(i) = saved - 1e-6;
    const double down = evaluate().item();
    w.mutable_value()(i) = saved;
    numeric(i) = (up - down) / 2e-6;
  }
  EXPECT_LT((g - numeric).norm() / numeric.norm(), 1e-5);
}

TEST(ReconstructionLoss, ClosedForms) {
  std::mt19937_64 rng(3);
  const ad::Matrix target = random_matrix(4, 7, rng);
  EXPECT_EQ(reconstruction_loss(ad::constant(target), target).item(), 0.0);
  EXPECT_NEAR(reconstruction_loss(ad::constant((target.array() + 0.25).matrix()), target).item(), 0.25, 1e-12);
  const ad::Matrix other = random_matrix(4, 7, rng);
  double brute = 0.0;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 7; ++c) brute += std::abs(other(r, c) - target(r, c));
  EXPECT_NEAR(reconstruction_loss(ad::constant(other), target).item(), brute / 28.0, 1e-12);
  EXPECT_NEAR(reconstruction_loss(Eigen::MatrixXd(other), Eigen::MatrixXd(target)), brute / 28.0, 1e-12);
}

TEST(ContactLoss, HandBuiltTwoFrameMotion) {
  const Skeleton s = synth::toy_skeleton();
  const double fps = 30.0;
  // Identity rotations, root moving 0.6 units/s along x on frame 0, C = 1.
  Eigen::MatrixXd data = Eigen::MatrixXd::Zero(2, MotionTensor::width_for(2, 1));
  for (int t = 0; t < 2; ++t) {
    data.block<1, 6>(t, 0) << 1, 0, 0, 0, 1, 0;
    data.block<1, 6>(t, 6) << 1, 0, 0, 0, 1, 0;
    data(t, 12) = 1.0;
    data(t, 13) = 1.0;
  }
  data(0, 14) = 0.6;
  const MotionTensor motion(data, 2, 1, fps);
  const ContactSigmoid sigma;
  const double v = 0.6 / fps;
  const double expected = v * v * sigma(1.0) / (2.0 * 1.0);
  EXPECT_NEAR(contact_loss(motion, s, sigma), expected, 1e-12);
  EXPECT_NEAR(contact_loss(ad::constant(data.transpose()), s, fps, sigma).item(), expected, 1e-12);
  EXPECT_NEAR(sigma(1.0), 1.0 / (1.0 + std::exp(-12.0 * 0.5)), 1e-15);
}

TEST(ContactLoss, LimitsAndAgreement) {
  const Skeleton s = synth::synthetic_skeleton();
  MotionTensor walk = encode_motion(s, synth::synthetic_motion(s, synth::walk_style(), 40));
  // Stationary feet: constant pose and no root motion.
  MotionTensor still = walk;
  for (int t = 1; t < still.frames(); ++t) still.data.row(t) = still.data.row(0);
  still.data.rightCols(2).setZero();
  EXPECT_NEAR(contact_loss(still, s), 0.0, 1e-20);
  // Contact channels far below the midpoint switch the term off.
  MotionTensor off = walk;
  off.data.middleCols(off.contact_offset(), off.contacts).setConstant(-10.0);
  EXPECT_LT(contact_loss(off, s), 1e-40);
  // Differentiable and reference implementations agree on real data.
  MotionTensor soft = walk;
  soft.data.middleCols(soft.contact_offset(), soft.contacts).setConstant(0.6);
  const double reference = contact_loss(soft, s);
  EXPECT_GT(reference, 0.0);
  EXPECT_NEAR(contact_loss(ad::constant(soft.data.transpose()), s, soft.fps).item(), reference, 1e-9 * reference);
}

TEST(ContactLoss, GradientMatchesFiniteDifferences) {
  const Skeleton s = synth::synthetic_skeleton();
  MotionTensor m = encode_motion(s, synth::synthetic_motion(s, synth::dance_style(), 12));
  m.data.middleCols(m.contact_offset(), m.contacts).setConstant(0.5);
  ad::Var x = ad::parameter(m.data.transpose());
  const ad::Matrix g = ad::grad(contact_loss(x, s, m.fps), std::vector<ad::Var>{x})[0].value();
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(x.value().size()) - 1);
  for (int k = 0; k < 40; ++k) {
    const int i = pick(rng);
    const double saved = x.mutable_value()(i);
    x.mutable_value()(i) = saved + 1e-6;
    const double up = contact_loss(x, s, m.fps).item();
    x.mutable_value()(i) = saved - 1e-6;
    const double down = contact_loss(x, s, m.fps).item();
    x.mutable_value()(i) = saved;
    const double numeric = (up - down) / 2e-6;
    EXPECT_NEAR(g(i), numeric, 1e-3 * std::max(std::abs(numeric), 1e-6)) << "entry " << i;
  }
}

TEST(GeneratorGradient, MatchesFiniteDifferencesOnToyStage) {
  const auto motions = toy_motions();
  const TrainConfig config = toy_train_config();
  PyramidModel model = toy_model(config, motions);
  const int stage = 1;
  const int length = model.level_spec.stage_length(stage);
  std::mt19937_64 rng(5);
  const ad::Matrix noise = random_matrix(model.width(), length, rng);
  const ad::Matrix target = temporal_resample(motions[0], length).data.transpose();
  const std::vector<int> ids(length, 0);
  // Give the modulation heads non-trivial weights so they receive gradients too.
  for (auto& block : model.generators[0].modulations)
    block.gamma_head.weight.mutable_value() = 0.1 * block.gamma_head.mask().cwiseProduct(
                                                        random_matrix(static_cast<int>(block.gamma_head.weight.rows()),
                                                                      static_cast<int>(block.gamma_head.weight.cols()),
                                                                      rng));
  auto objective = [&] {
    const ad::Var out = stage_forward(model, stage, ad::Var(), ad::constant(noise), &ids);
    const ad::Var adv = ad::neg(model.critics[0].score(out));
    const ad::Var rec = reconstruction_loss(
        stage_forward(model, stage, ad::Var(), ad::constant(model.z_star[0][0]), &ids), target);
    return ad::scale(adv, config.weights.adv) + ad::scale(rec, config.weights.rec);
  };
  auto params = model.stage_generator_parameters(stage);
  const auto grads = ad::grad(objective(), params);
  std::uniform_int_distribution<size_t> which(0, params.size() - 1);
  int checked = 0;
  for (int trial = 0; checked < 30 && trial < 500; ++trial) {
    const size_t p = which(rng);
    std::uniform_int_distribution<int> entry(0, static_cast<int>(params[p].value().size()) - 1);
    const int i = entry(rng);
    if (grads[p].value()(i) == 0.0) continue;  // masked connection
    const double saved = params[p].mutable_value()(i);
    const double h = 1e-6;
    params[p].mutable_value()(i) = saved + h;
    const double up = objective().item();
    params[p].mutable_value()(i) = saved - h;
    const double down = objective().item();
    params[p].mutable_value()(i) = saved;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads[p].value()(i);
    EXPECT_LE(std::abs(analytic - numeric), 1e-3 * std::max(std::abs(numeric), std::abs(analytic)))
        << "parameter " << p << " entry " << i;
    ++checked;
  }
  EXPECT_EQ(checked, 30);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ad::Var p = ad::parameter((Eigen::MatrixXd(1, 3) << 1.0, -2.0, 0.5).finished());
  AdamConfig config;
  Adam adam({p}, config);
  adam.step({ad::constant((Eigen::MatrixXd(1, 3) << 3.0, -0.01, 0.0).finished())});
  EXPECT_NEAR(p.value()(0), 1.0 - 1e-4, 1e-10);
  EXPECT_NEAR(p.value()(1), -2.0 + 1e-4, 1e-9);
  EXPECT_EQ(p.value()(2), 0.5);
}

TEST(TrainerStep, LossCompositionAndPenaltyToggle) {
  const auto motions = toy_motions();
  TrainConfig config = toy_train_config();
  PyramidModel model = toy_model(config, motions);
  Trainer trainer(model, motions, config);
  for (int stage = 1; stage <= kNumStages; ++stage) {
    const StageLosses l = trainer.step_stage(stage);
    double expected = config.weights.adv * l.generator_adv + config.weights.rec * l.reconstruction;
    if (stage == kNumStages) {
      EXPECT_GT(l.contact, 0.0);
      expected += config.weights.con * l.contact;
    } else {
      EXPECT_EQ(l.contact, 0.0);
    }
    EXPECT_NEAR(l.total, expected, 1e-6);
    EXPECT_NEAR(l.critic_loss, -l.wasserstein + config.weights.gp * l.gradient_penalty, 1e-9);
  }

  config.weights.gp = 0.0;
  PyramidModel plain = toy_model(config, motions);
  Trainer no_gp(plain, motions, config);
  const StageLosses l = no_gp.step_stage(1);
  EXPECT_EQ(l.gradient_penalty, 0.0);
  EXPECT_NEAR(l.critic_loss, -l.wasserstein, 1e-12);
}

TEST(TrainerStep, StageIsolation) {
  const auto motions = toy_motions();
  const TrainConfig config = toy_train_config(3);
  PyramidModel model = toy_model(config, motions);
  Trainer trainer(model, motions, config);
  trainer.train_level(1);
  std::vector<std::vector<Eigen::MatrixXd>> before;
  for (int stage = 1; stage <= kNumStages; ++stage) {
    auto g = parameter_values(model.stage_generator_parameters(stage));
    auto c = parameter_values(model.stage_critic_parameters(stage));
    g.insert(g.end(), c.begin(), c.end());
    before.push_back(g);
  }
  trainer.train_level(2);
  for (int stage = 1; stage <= kNumStages; ++stage) {
    auto g = parameter_values(model.stage_generator_parameters(stage));
    auto c = parameter_values(model.stage_critic_parameters(stage));
    g.insert(g.end(), c.begin(), c.end());
    bool same = true;
    for (size_t i = 0; i < g.size(); ++i) same = same && g[i] == before[stage - 1][i];
    EXPECT_EQ(same, stage != 3 && stage != 4) << "stage " << stage;
  }
}

TEST(TrainerStep, RejectsInconsistentInputs) {
  auto motions = toy_motions();
  const TrainConfig config = toy_train_config();
  PyramidModel model = toy_model(config, motions);
  auto shorter = motions;
  shorter[1] = temporal_resample(shorter[1], 12);
  EXPECT_THROW(Trainer(model, shorter, config), std::invalid_argument);
  EXPECT_THROW(Trainer(model, {motions[0]}, config), std::invalid_argument);
  EXPECT_THROW(train(synth::toy_skeleton(), shorter, {"a", "b"}, config), std::invalid_argument);
  TrainConfig zero = config;
  zero.iterations_per_level = 0;
  EXPECT_THROW(zero.validate(), std::invalid_argument);
  TrainConfig negative = config;
  negative.weights.rec = -1;
  EXPECT_THROW(negative.validate(), std::invalid_argument);
}

TEST(TrainerStep, DivergenceAborts) {
  const auto motions = toy_motions();
  TrainConfig config = toy_train_config();
  config.divergence_threshold = 1e-9;
  PyramidModel model = toy_model(config, motions);
  Trainer trainer(model, motions, config);
  EXPECT_THROW(trainer.step_stage(1), TrainingDiverged);
}

TEST(Train, TelemetryAndDeterminism) {
  const auto motions = toy_motions();
  const TrainConfig config = toy_train_config(3);
  std::ostringstream csv;
  write_telemetry_header(csv);
  int rows = 0;
  const PyramidModel a = train(synth::toy_skeleton(), motions, {"slow", "fast"}, config, [&](const TelemetryRow& row) {
    write_telemetry_row(csv, row);
    ++rows;
  });
  EXPECT_TRUE(a.trained);
  EXPECT_EQ(rows, kNumLevels * 3);
  std::istringstream lines(csv.str());
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "iteration,level,stages,critic_loss,wasserstein,gp,gen_adv,rec,con,total");
  std::string first;
  std::getline(lines, first);
  EXPECT_EQ(first.rfind("1,1,1+2,", 0), 0u);

  const PyramidModel b = train(synth::toy_skeleton(), motions, {"slow", "fast"}, config);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  TrainConfig other = config;
  other.seed = 4;
  EXPECT_NE(serialize_checkpoint(train(synth::toy_skeleton(), motions, {"slow", "fast"}, other)),
            serialize_checkpoint(a));
}

TEST(Train, CriticSeparatesRealFromNoise) {
  const Skeleton s = synth::toy_skeleton();
  const std::vector<MotionTensor> motions{encode_motion(s, synth::toy_motion(s, 64, 30.0, 1.0)),
                                          encode_motion(s, synth::toy_motion(s, 64, 30.0, 2.0))};
  const TrainConfig config = toy_train_config(150);
  PyramidModel model = toy_model(config, motions);
  Trainer trainer(model, motions, config);
  trainer.train_level(1);
  std::mt19937_64 rng(6);
  double margin = 0.0;
  for (int b = 0; b < 2; ++b) {
    const Eigen::MatrixXd& real = trainer.real_at_level(1)[b];
    const ad::Matrix noise = random_matrix(static_cast<int>(real.rows()), static_cast<int>(real.cols()), rng);
    margin += model.critics[0].score(ad::constant(real)).item() - model.critics[0].score(ad::constant(noise)).item();
  }
  EXPECT_GT(margin, 0.0);
}
