#pragma once

#include "mblend/motion_repr.hpp"

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace mblend {

struct MetricOptions {
  int window = 30;
  int local_window = 8;
  int pca_dims = 64;
  double coverage_percentile = 95.0;
};

// Per-channel standardization of the pose channels (rotations and root;
// contact labels are excluded). 6D blocks are first re-encoded from their
// decoded rotations. Channels with (near) zero spread keep unit scale; other
// spreads are floored at 0.1x the median channel spread.
struct Standardizer {
  std::vector<int> columns;
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const std::vector<MotionTensor>& real);
  Eigen::MatrixXd apply(const MotionTensor& motion) const;  // T x P
};

// Sliding windows (stride 1) of a standardized T x P sequence. Row s holds
// frames s..s+W-1 flattened frame by frame.
struct WindowFeatureSet {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> descriptors;
  int window = 0;
  int channels = 0;

  static WindowFeatureSet from_sequence(const Eigen::MatrixXd& standardized, int window, int stride = 1);
  static WindowFeatureSet concat(const std::vector<WindowFeatureSet>& sets);
  int count() const { return static_cast<int>(descriptors.rows()); }
};

// Mean over the window's frames of the L2 distance between matching frames.
double window_distance(const WindowFeatureSet& a, int i, const WindowFeatureSet& b, int j);

// Frechet distance between Gaussians fit to the rows of x and y, with 1e-6
// diagonal loading and eigenvalue clamping in the matrix square root.
double frechet_distance(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);
// Projects both sets on the leading principal axes of `real` (at most
// pca_dims) before the Frechet distance.
double fid(const WindowFeatureSet& real, const WindowFeatureSet& generated, int pca_dims = 64);

// Percentile (0..100, linear interpolation) of each real window's distance to
// its nearest non-overlapping real window.
double coverage_threshold(const WindowFeatureSet& real, double percentile = 95.0);
double coverage(const WindowFeatureSet& real, const std::vector<WindowFeatureSet>& generated, double tau);

enum class DiversityKind { global, local, inter, intra };

// global/local: mean over generated windows of the distance to the nearest
// real window (pass windows of the matching length). inter: mean over sample
// pairs of the mean aligned-window distance. intra: mean over samples of the
// mean pairwise distance between its windows.
double diversity(const WindowFeatureSet& real, const std::vector<WindowFeatureSet>& generated, DiversityKind kind);

struct SmoothnessSeries {
  std::vector<std::string> joints;
  Eigen::MatrixXd velocity;      // (T-1) x P, units per second
  Eigen::MatrixXd delta_v;       // (T-2) x P
  Eigen::MatrixXd delta_delta_v; // (T-3) x P
  std::optional<std::pair<int, int>> transition;  // inclusive frame range

  // Frame index that row k of delta_v is centred on.
  static int delta_v_frame(int k) { return k + 1; }
};

std::vector<std::string> default_probe_joints();
// Resolves probe names, accepting common aliases (e.g. Hips for pelvis).
int resolve_probe_joint(const Skeleton& skeleton, const std::string& name);

SmoothnessSeries smoothness(const MotionTensor& motion, const Skeleton& skeleton,
                            const std::vector<std::string>& probe_joints,
                            std::optional<std::pair<int, int>> transition = std::nullopt);
// Same series from world positions: positions[t][p] for each probe.
SmoothnessSeries smoothness_from_positions(const std::vector<std::vector<Eigen::Vector3d>>& positions, double fps,
                                           std::vector<std::string> names);

// Median of delta_v over probes inside / outside the transition window.
std::pair<double, double> transition_medians(const SmoothnessSeries& series);

// Flat key=value report; metrics absent from the map are written as
// "unavailable" when listed in `unavailable`.
struct Report {
  std::map<std::string, double> values;
  std::vector<std::string> unavailable;
};

std::string format_report(const Report& report);
// Writes report.txt and, when a series is given, l2_velocity.svg and
// l2_acceleration.svg into `directory`. Files are written to temporaries and
// renamed, so a failure leaves no partial outputs.
void emit_report(const std::string& directory, const Report& report, const SmoothnessSeries* series = nullptr);
std::string svg_line_plot(const Eigen::MatrixXd& series, const std::vector<std::string>& labels,
                          const std::string& title, std::optional<std::pair<int, int>> markers, int x_offset);

}  // namespace mblend
