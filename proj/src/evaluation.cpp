#include "mblend/evaluation.hpp"

#include <stdexcept>

namespace mblend {

EvalResult evaluate(const PyramidModel& model, const std::vector<MotionTensor>& real, const EvalOptions& options) {
  if (options.samples < 1) throw std::invalid_argument("evaluation needs at least one sample");
  if (static_cast<int>(real.size()) != model.identity_count())
    throw std::invalid_argument("evaluation needs one real motion per model identity");
  const auto& mo = options.metrics;
  const Standardizer standardizer = Standardizer::fit(real);
  const int frames = model.training_frames();
  const BlendSchedule schedule =
      options.schedule.segments.empty() ? BlendSchedule::even(model.identities, frames) : options.schedule;

  std::vector<WindowFeatureSet> real_windows;
  std::vector<WindowFeatureSet> real_local;
  for (const auto& m : real) {
    const Eigen::MatrixXd z = standardizer.apply(m);
    real_windows.push_back(WindowFeatureSet::from_sequence(z, mo.window));
    real_local.push_back(WindowFeatureSet::from_sequence(z, mo.local_window));
  }
  const WindowFeatureSet pooled = WindowFeatureSet::concat(real_windows);
  const WindowFeatureSet pooled_local = WindowFeatureSet::concat(real_local);

  EvalResult result;
  for (int b = 0; b < model.identity_count(); ++b) {
    const double tau = coverage_threshold(real_windows[b], mo.coverage_percentile);
    const BlendSchedule constant = BlendSchedule::constant(model.identities[b], frames);
    double total = 0.0;
    for (int i = 0; i < options.samples; ++i) {
      const MotionTensor g = blend(model, constant, options.seed + i, model.skeleton).tensor;
      total += coverage(real_windows[b], {WindowFeatureSet::from_sequence(standardizer.apply(g), mo.window)}, tau);
    }
    result.coverage_per_identity.push_back(total / options.samples);
  }

  std::vector<WindowFeatureSet> generated;
  std::vector<WindowFeatureSet> generated_local;
  std::vector<WindowFeatureSet> generated_blocks;
  double fid_total = 0.0;
  for (int i = 0; i < options.samples; ++i) {
    result.blends.push_back(blend(model, schedule, options.seed + i, model.skeleton).tensor);
    const Eigen::MatrixXd z = standardizer.apply(result.blends.back());
    generated.push_back(WindowFeatureSet::from_sequence(z, mo.window));
    generated_local.push_back(WindowFeatureSet::from_sequence(z, mo.local_window));
    generated_blocks.push_back(WindowFeatureSet::from_sequence(z, mo.window, mo.window));
    fid_total += fid(pooled, generated.back(), mo.pca_dims);
  }

  double cov = 0.0;
  for (double c : result.coverage_per_identity) cov += c;
  auto& values = result.report.values;
  values["cov"] = cov / static_cast<double>(result.coverage_per_identity.size());
  values["fid"] = fid_total / options.samples;
  values["gdiv"] = diversity(pooled, generated, DiversityKind::global);
  values["ldiv"] = diversity(pooled_local, generated_local, DiversityKind::local);
  if (options.samples >= 2) {
    values["inter_div"] = diversity(pooled, generated, DiversityKind::inter);
    values["intra_div"] = diversity(pooled, generated_blocks, DiversityKind::intra);
  } else {
    result.report.unavailable = {"inter_div", "intra_div"};
  }

  std::optional<std::pair<int, int>> transition;
  if (const auto boundaries = schedule.boundaries(); !boundaries.empty())
    transition = std::make_pair(boundaries.front() - options.transition_half_width,
                                boundaries.front() + options.transition_half_width);
  result.smoothness = smoothness(result.blends.front(), model.skeleton, options.probe_joints, transition);
  return result;
}

}  // namespace mblend
