#include "mblend/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mblend {

namespace {

constexpr double kScaleFloor = 1e-6;
constexpr double kDiagonalLoading = 1e-6;
// Nearly constant channels are scaled by at least this fraction of the median
// channel spread so tiny deviations do not dominate window distances.
constexpr double kRelativeSpreadFloor = 0.1;

// Re-encodes every 6D block through its decoded rotation, so only the part of
// a generated value that survives decoding enters the features.
Eigen::MatrixXd canonical_rotations(const MotionTensor& motion) {
  Eigen::MatrixXd data = motion.data;
  for (Eigen::Index t = 0; t < data.rows(); ++t)
    for (int j = 0; j < motion.joints; ++j) {
      const Eigen::Matrix<double, 6, 1> v = data.block<1, 6>(t, 6 * j).transpose();
      data.block<1, 6>(t, 6 * j) = rotation_to_6d(rotation_from_6d(v)).transpose();
    }
  return data;
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mean) {
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(0.5 * (m + m.transpose()));
  const Eigen::VectorXd values = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return solver.eigenvectors() * values.asDiagonal() * solver.eigenvectors().transpose();
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return percentile(std::move(values), 50.0); }

double nearest_distance(const WindowFeatureSet& from, int i, const WindowFeatureSet& to) {
  double best = std::numeric_limits<double>::infinity();
  for (int j = 0; j < to.count(); ++j) best = std::min(best, window_distance(from, i, to, j));
  return best;
}

void check_compatible(const WindowFeatureSet& a, const WindowFeatureSet& b) {
  if (a.window != b.window || a.channels != b.channels)
    throw std::invalid_argument("window feature sets have different shapes");
}

std::string format_number(double v) {
  std::ostringstream out;
  out << std::setprecision(8) << v;
  return out.str();
}

void write_atomically(const std::vector<std::pair<std::filesystem::path, std::string>>& files) {
  std::vector<std::filesystem::path> temporaries;
  try {
    for (const auto& [path, content] : files) {
      auto tmp = path;
      tmp += ".tmp";
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
      temporaries.push_back(tmp);
      out << content;
      out.close();
      if (!out) throw std::runtime_error("failed writing '" + tmp.string() + "'");
    }
  } catch (...) {
    for (const auto& tmp : temporaries) std::filesystem::remove(tmp);
    throw;
  }
  for (size_t i = 0; i < files.size(); ++i) std::filesystem::rename(temporaries[i], files[i].first);
}

}  // namespace

Standardizer Standardizer::fit(const std::vector<MotionTensor>& real) {
  if (real.empty()) throw std::invalid_argument("standardizer needs at least one motion");
  Standardizer s;
  s.columns = real.front().pose_columns();
  const auto p = static_cast<Eigen::Index>(s.columns.size());
  Eigen::Index frames = 0;
  for (const auto& m : real) {
    if (m.width() != real.front().width()) throw std::invalid_argument("real motions have different layouts");
    frames += m.frames();
  }
  Eigen::MatrixXd all(frames, p);
  Eigen::Index row = 0;
  for (const auto& m : real) {
    const Eigen::MatrixXd data = canonical_rotations(m);
    for (Eigen::Index c = 0; c < p; ++c) all.block(row, c, m.frames(), 1) = data.col(s.columns[c]);
    row += m.frames();
  }
  s.mean = all.colwise().mean();
  const Eigen::MatrixXd centered = all.rowwise() - s.mean;
  s.scale = (centered.colwise().squaredNorm() / static_cast<double>(frames)).cwiseSqrt();
  std::vector<double> spreads;
  for (Eigen::Index c = 0; c < p; ++c)
    if (s.scale[c] >= kScaleFloor) spreads.push_back(s.scale[c]);
  const double floor = spreads.empty() ? 1.0 : kRelativeSpreadFloor * median(spreads);
  for (Eigen::Index c = 0; c < p; ++c) {
    if (s.scale[c] < kScaleFloor)
      s.scale[c] = 1.0;
    else
      s.scale[c] = std::max(s.scale[c], floor);
  }
  return s;
}

Eigen::MatrixXd Standardizer::apply(const MotionTensor& motion) const {
  Eigen::MatrixXd out(motion.frames(), static_cast<Eigen::Index>(columns.size()));
  for (size_t c = 0; c < columns.size(); ++c)
    if (columns[c] >= motion.width()) throw std::invalid_argument("motion layout does not match the standardizer");
  const Eigen::MatrixXd data = canonical_rotations(motion);
  for (size_t c = 0; c < columns.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = data.col(columns[c]);
  return (out.rowwise() - mean).array().rowwise() / scale.array();
}

WindowFeatureSet WindowFeatureSet::from_sequence(const Eigen::MatrixXd& standardized, int window, int stride) {
  const int frames = static_cast<int>(standardized.rows());
  if (window < 1 || stride < 1) throw std::invalid_argument("window and stride must be positive");
  if (frames < window)
    throw std::invalid_argument("sequence of " + std::to_string(frames) + " frames is shorter than the window " +
                                std::to_string(window));
  WindowFeatureSet set;
  set.window = window;
  set.channels = static_cast<int>(standardized.cols());
  const int count = (frames - window) / stride + 1;
  set.descriptors.resize(count, static_cast<Eigen::Index>(window) * set.channels);
  for (int s = 0; s < count; ++s)
    for (int f = 0; f < window; ++f)
      set.descriptors.row(s).segment(static_cast<Eigen::Index>(f) * set.channels, set.channels) =
          standardized.row(s * stride + f);
  return set;
}

WindowFeatureSet WindowFeatureSet::concat(const std::vector<WindowFeatureSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("no window sets to concatenate");
  WindowFeatureSet out;
  out.window = sets.front().window;
  out.channels = sets.front().channels;
  Eigen::Index rows = 0;
  for (const auto& s : sets) {
    check_compatible(s, sets.front());
    rows += s.count();
  }
  out.descriptors.resize(rows, sets.front().descriptors.cols());
  rows = 0;
  for (const auto& s : sets) {
    out.descriptors.middleRows(rows, s.count()) = s.descriptors;
    rows += s.count();
  }
  return out;
}

double window_distance(const WindowFeatureSet& a, int i, const WindowFeatureSet& b, int j) {
  using Frames = Eigen::Map<const Eigen::MatrixXd>;
  const Frames fa(a.descriptors.row(i).data(), a.channels, a.window);
  const Frames fb(b.descriptors.row(j).data(), b.channels, b.window);
  return (fa - fb).colwise().norm().mean();
}

double frechet_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  if (x.rows() < 2 || y.rows() < 2) throw std::invalid_argument("Frechet distance needs at least two samples per set");
  if (x.cols() != y.cols()) throw std::invalid_argument("Frechet distance: dimension mismatch");
  const Eigen::RowVectorXd mx = x.colwise().mean();
  const Eigen::RowVectorXd my = y.colwise().mean();
  const auto dims = x.cols();
  const Eigen::MatrixXd loading = kDiagonalLoading * Eigen::MatrixXd::Identity(dims, dims);
  const Eigen::MatrixXd sx = covariance(x, mx) + loading;
  const Eigen::MatrixXd sy = covariance(y, my) + loading;
  const Eigen::MatrixXd root = symmetric_sqrt(sx);
  const double cross = symmetric_sqrt(root * sy * root).trace();
  return std::max(0.0, (mx - my).squaredNorm() + sx.trace() + sy.trace() - 2.0 * cross);
}

double fid(const WindowFeatureSet& real, const WindowFeatureSet& generated, int pca_dims) {
  check_compatible(real, generated);
  if (real.count() < 2 || generated.count() < 2) throw std::invalid_argument("FID needs at least two windows per set");
  const Eigen::MatrixXd r = real.descriptors;
  const Eigen::MatrixXd g = generated.descriptors;
  const Eigen::RowVectorXd mean = r.colwise().mean();
  const Eigen::MatrixXd centered = r.rowwise() - mean;
  const auto keep = std::min<Eigen::Index>({pca_dims, r.rows() - 1, r.cols()});
  if (keep >= r.cols()) return frechet_distance(r, g);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::MatrixXd axes = svd.matrixV().leftCols(keep);
  return frechet_distance(centered * axes, (g.rowwise() - mean) * axes);
}

double coverage_threshold(const WindowFeatureSet& real, double pct) {
  std::vector<double> nearest;
  for (int s = 0; s < real.count(); ++s) {
    double best = std::numeric_limits<double>::infinity();
    for (int t = 0; t < real.count(); ++t)
      if (std::abs(s - t) >= real.window) best = std::min(best, window_distance(real, s, real, t));
    if (std::isfinite(best)) nearest.push_back(best);
  }
  if (nearest.empty())
    throw std::invalid_argument("coverage threshold needs a sequence of at least twice the window length");
  return percentile(std::move(nearest), pct);
}

double coverage(const WindowFeatureSet& real, const std::vector<WindowFeatureSet>& generated, double tau) {
  if (real.count() == 0) throw std::invalid_argument("coverage: no real windows");
  if (generated.empty()) throw std::invalid_argument("coverage: no generated samples");
  for (const auto& g : generated) check_compatible(real, g);
  int covered = 0;
  for (int s = 0; s < real.count(); ++s) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : generated) best = std::min(best, nearest_distance(real, s, g));
    if (best <= tau) ++covered;
  }
  return static_cast<double>(covered) / real.count();
}

double diversity(const WindowFeatureSet& real, const std::vector<WindowFeatureSet>& generated, DiversityKind kind) {
  if (generated.empty()) throw std::invalid_argument("diversity: no generated samples");
  for (const auto& g : generated) check_compatible(real, g);
  switch (kind) {
    case DiversityKind::global:
    case DiversityKind::local: {
      double total = 0.0;
      long count = 0;
      for (const auto& g : generated) {
        for (int i = 0; i < g.count(); ++i) total += nearest_distance(g, i, real);
        count += g.count();
      }
      return total / static_cast<double>(count);
    }
    case DiversityKind::inter: {
      if (generated.size() < 2) throw std::invalid_argument("inter diversity needs at least two samples");
      double total = 0.0;
      long pairs = 0;
      for (size_t a = 0; a < generated.size(); ++a) {
        for (size_t b = a + 1; b < generated.size(); ++b) {
          const int n = std::min(generated[a].count(), generated[b].count());
          double sum = 0.0;
          for (int s = 0; s < n; ++s) sum += window_distance(generated[a], s, generated[b], s);
          total += sum / n;
          ++pairs;
        }
      }
      return total / static_cast<double>(pairs);
    }
    case DiversityKind::intra: {
      if (generated.size() < 2) throw std::invalid_argument("intra diversity needs at least two samples");
      double total = 0.0;
      for (const auto& g : generated) {
        if (g.count() < 2) throw std::invalid_argument("intra diversity needs at least two windows per sample");
        double sum = 0.0;
        long pairs = 0;
        for (int i = 0; i < g.count(); ++i)
          for (int j = i + 1; j < g.count(); ++j, ++pairs) sum += window_distance(g, i, g, j);
        total += sum / static_cast<double>(pairs);
      }
      return total / static_cast<double>(generated.size());
    }
  }
  throw std::invalid_argument("unknown diversity kind");
}

std::vector<std::string> default_probe_joints() {
  return {"pelvis", "left_wrist", "right_wrist", "left_foot", "right_foot"};
}

int resolve_probe_joint(const Skeleton& skeleton, const std::string& name) {
  static const std::map<std::string, std::vector<std::string>> aliases{
      {"pelvis", {"Hips", "hips", "Pelvis", "root"}},
      {"left_wrist", {"LeftHand", "LeftWrist", "l_wrist", "lHand"}},
      {"right_wrist", {"RightHand", "RightWrist", "r_wrist", "rHand"}},
      {"left_foot", {"LeftFoot", "LeftAnkle", "l_foot", "lFoot"}},
      {"right_foot", {"RightFoot", "RightAnkle", "r_foot", "rFoot"}},
  };
  if (const int j = skeleton.find(name); j >= 0) return j;
  if (const auto it = aliases.find(name); it != aliases.end())
    for (const auto& alias : it->second)
      if (const int j = skeleton.find(alias); j >= 0) return j;
  throw std::invalid_argument("probe joint '" + name + "' not found in the skeleton");
}

SmoothnessSeries smoothness_from_positions(const std::vector<std::vector<Eigen::Vector3d>>& positions, double fps,
                                           std::vector<std::string> names) {
  const int frames = static_cast<int>(positions.size());
  if (frames < 4) throw std::invalid_argument("smoothness needs at least four frames");
  const int probes = static_cast<int>(names.size());
  SmoothnessSeries s;
  s.joints = std::move(names);
  s.velocity.resize(frames - 1, probes);
  for (int t = 0; t + 1 < frames; ++t)
    for (int p = 0; p < probes; ++p) s.velocity(t, p) = (positions[t + 1][p] - positions[t][p]).norm() * fps;
  s.delta_v = (s.velocity.bottomRows(frames - 2) - s.velocity.topRows(frames - 2)).cwiseAbs();
  s.delta_delta_v = (s.delta_v.bottomRows(frames - 3) - s.delta_v.topRows(frames - 3)).cwiseAbs();
  return s;
}

SmoothnessSeries smoothness(const MotionTensor& motion, const Skeleton& skeleton,
                            const std::vector<std::string>& probe_joints, std::optional<std::pair<int, int>> transition) {
  if (motion.frames() < 4) throw std::invalid_argument("smoothness needs at least four frames");
  std::vector<int> indices;
  for (const auto& name : probe_joints) indices.push_back(resolve_probe_joint(skeleton, name));
  const auto world = tensor_world_positions(motion, skeleton);
  std::vector<std::vector<Eigen::Vector3d>> positions(world.size());
  for (size_t t = 0; t < world.size(); ++t)
    for (int j : indices) positions[t].push_back(world[t][j]);
  SmoothnessSeries s = smoothness_from_positions(positions, motion.fps, probe_joints);
  s.transition = transition;
  return s;
}

std::pair<double, double> transition_medians(const SmoothnessSeries& series) {
  if (!series.transition) throw std::invalid_argument("series has no transition window");
  const auto [first, last] = *series.transition;
  std::vector<double> inside;
  std::vector<double> outside;
  for (Eigen::Index k = 0; k < series.delta_v.rows(); ++k) {
    const int frame = SmoothnessSeries::delta_v_frame(static_cast<int>(k));
    auto& target = frame >= first && frame <= last ? inside : outside;
    for (Eigen::Index p = 0; p < series.delta_v.cols(); ++p) target.push_back(series.delta_v(k, p));
  }
  if (inside.empty() || outside.empty()) throw std::invalid_argument("transition window covers no or all frames");
  return {median(std::move(inside)), median(std::move(outside))};
}

std::string format_report(const Report& report) {
  std::ostringstream out;
  std::map<std::string, std::string> lines;
  for (const auto& [key, value] : report.values) lines[key] = format_number(value);
  for (const auto& key : report.unavailable)
    if (!lines.count(key)) lines[key] = "unavailable";
  for (const auto& [key, value] : lines) out << key << '=' << value << '\n';
  return out.str();
}

std::string svg_line_plot(const Eigen::MatrixXd& series, const std::vector<std::string>& labels,
                          const std::string& title, std::optional<std::pair<int, int>> markers, int x_offset) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
  constexpr double width = 800, height = 360, left = 60, right = 150, top = 40, bottom = 40;
  const double plot_w = width - left - right;
  const double plot_h = height - top - bottom;
  const auto n = series.rows();
  const double y_max = series.size() > 0 && series.maxCoeff() > 0 ? series.maxCoeff() : 1.0;
  const double x_min = x_offset;
  const double x_max = x_offset + std::max<Eigen::Index>(n - 1, 1);
  auto px = [&](double x) { return left + (x - x_min) / (x_max - x_min) * plot_w; };
  auto py = [&](double y) { return top + plot_h - y / y_max * plot_h; };

  std::ostringstream svg;
  svg << std::fixed << std::setprecision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">" << title << "</text>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << left - 5 << "\" y=\"" << top + 4 << "\" font-family=\"sans-serif\" font-size=\"11\" "
      << "text-anchor=\"end\">" << format_number(y_max) << "</text>\n";
  svg << "<text x=\"" << left << "\" y=\"" << height - 15 << "\" font-family=\"sans-serif\" font-size=\"11\">"
      << x_offset << "</text>\n";
  svg << "<text x=\"" << left + plot_w << "\" y=\"" << height - 15
      << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" << x_max << "</text>\n";
  if (markers) {
    for (int m : {markers->first, markers->second}) {
      const double x = px(std::clamp<double>(m, x_min, x_max));
      svg << "<line x1=\"" << x << "\" y1=\"" << top << "\" x2=\"" << x << "\" y2=\"" << top + plot_h
          << "\" stroke=\"gray\" stroke-dasharray=\"3,3\"/>\n";
    }
  }
  for (Eigen::Index c = 0; c < series.cols(); ++c) {
    const char* color = colors[c % 7];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
    for (Eigen::Index k = 0; k < n; ++k) svg << px(static_cast<double>(x_offset + k)) << ',' << py(series(k, c)) << ' ';
    svg << "\"/>\n";
    const std::string label = c < static_cast<Eigen::Index>(labels.size()) ? labels[c] : "series " + std::to_string(c);
    svg << "<text x=\"" << left + plot_w + 10 << "\" y=\"" << top + 16 * (c + 1)
        << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">" << label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_report(const std::string& directory, const Report& report, const SmoothnessSeries* series) {
  if (report.values.empty() && report.unavailable.empty()) throw std::invalid_argument("no metrics to report");
  std::filesystem::create_directories(directory);
  const std::filesystem::path dir(directory);
  std::vector<std::pair<std::filesystem::path, std::string>> files{{dir / "report.txt", format_report(report)}};
  if (series != nullptr) {
    files.emplace_back(dir / "l2_velocity.svg",
                       svg_line_plot(series->delta_v, series->joints, "L2 velocity", series->transition, 1));
    files.emplace_back(dir / "l2_acceleration.svg",
                       svg_line_plot(series->delta_delta_v, series->joints, "L2 acceleration", series->transition, 2));
  }
  write_atomically(files);
}

}  // namespace mblend
