#include "mblend/bvh_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace mblend {

namespace {

int axis_of(char c) {
  switch (c) {
    case 'X': return 0;
    case 'Y': return 1;
    case 'Z': return 2;
    default: throw std::invalid_argument(std::string("bad rotation axis '") + c + "'");
  }
}

Eigen::Matrix3d axis_rotation(int axis, double degrees) {
  const double radians = degrees * std::numbers::pi / 180.0;
  return Eigen::AngleAxisd(radians, Eigen::Vector3d::Unit(axis)).toRotationMatrix();
}

std::string_view strip_namespace(std::string_view name) {
  const auto colon = name.rfind(':');
  return colon == std::string_view::npos ? name : name.substr(colon + 1);
}

std::string format_number(double value) {
  char buffer[64];
  auto [end, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buffer, end);
}

// Line-aware tokenizer over the BVH text.
class Tokenizer {
 public:
  explicit Tokenizer(std::string_view text) : text_(text) {}

  bool next(std::string_view& token) {
    skip_space();
    if (pos_ >= text_.size()) return false;
    const size_t start = pos_;
    if (text_[pos_] == '{' || text_[pos_] == '}') {
      ++pos_;
    } else {
      while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) && text_[pos_] != '{' &&
             text_[pos_] != '}')
        ++pos_;
    }
    token = text_.substr(start, pos_ - start);
    token_line_ = line_;
    return true;
  }

  std::string_view expect(const char* what) {
    std::string_view token;
    if (!next(token)) throw BvhError(std::string("unexpected end of file, expected ") + what, line_);
    return token;
  }

  void expect_literal(std::string_view literal) {
    const auto token = expect(std::string(literal).c_str());
    if (token != literal)
      throw BvhError("expected '" + std::string(literal) + "', found '" + std::string(token) + "'", token_line_);
  }

  double number(const char* what) {
    const auto token = expect(what);
    return parse_number(token, token_line_);
  }

  static double parse_number(std::string_view token, int line) {
    double value = 0.0;
    const char* first = token.data();
    const char* last = token.data() + token.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last || !std::isfinite(value))
      throw BvhError("non-numeric value '" + std::string(token) + "'", line);
    return value;
  }

  // Remaining text starting at the next line.
  std::string_view rest_of_line() {
    const size_t start = pos_;
    while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
    return text_.substr(start, pos_ - start);
  }

  int line() const { return line_; }
  int token_line() const { return token_line_; }

 private:
  void skip_space() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      if (text_[pos_] == '\n') ++line_;
      ++pos_;
    }
  }

  std::string_view text_;
  size_t pos_ = 0;
  int line_ = 1;
  int token_line_ = 1;
};

Channel parse_channel(std::string_view token, int line) {
  static const std::map<std::string_view, Channel> table = {
      {"Xposition", Channel::x_position}, {"Yposition", Channel::y_position}, {"Zposition", Channel::z_position},
      {"Xrotation", Channel::x_rotation}, {"Yrotation", Channel::y_rotation}, {"Zrotation", Channel::z_rotation},
  };
  const auto it = table.find(token);
  if (it == table.end()) throw BvhError("unknown channel '" + std::string(token) + "'", line);
  return it->second;
}

const char* channel_name(Channel channel) {
  switch (channel) {
    case Channel::x_position: return "Xposition";
    case Channel::y_position: return "Yposition";
    case Channel::z_position: return "Zposition";
    case Channel::x_rotation: return "Xrotation";
    case Channel::y_rotation: return "Yrotation";
    case Channel::z_rotation: return "Zrotation";
  }
  return "";
}

bool is_rotation(Channel c) {
  return c == Channel::x_rotation || c == Channel::y_rotation || c == Channel::z_rotation;
}

void check_channels(const Joint& joint, int line) {
  int rotations = 0;
  int positions = 0;
  std::set<Channel> seen;
  for (Channel c : joint.channels) {
    if (!seen.insert(c).second) throw BvhError("duplicate channel on joint '" + joint.name + "'", line);
    (is_rotation(c) ? rotations : positions)++;
  }
  if (rotations != 3) throw BvhError("joint '" + joint.name + "' must have three rotation channels", line);
  if (positions != 0 && positions != 3)
    throw BvhError("joint '" + joint.name + "' must have zero or three position channels", line);
}

Eigen::Vector3d read_offset(Tokenizer& tok) {
  tok.expect_literal("OFFSET");
  Eigen::Vector3d offset;
  for (int k = 0; k < 3; ++k) offset[k] = tok.number("offset value");
  return offset;
}

void parse_joint(Tokenizer& tok, Skeleton& skeleton, int parent, std::string name) {
  tok.expect_literal("{");
  Joint joint;
  joint.name = std::move(name);
  joint.parent = parent;
  joint.offset = read_offset(tok);
  tok.expect_literal("CHANNELS");
  const int channels_line = tok.token_line();
  const double count = tok.number("channel count");
  if (count != std::floor(count) || count < 0) throw BvhError("bad channel count", channels_line);
  for (int c = 0; c < static_cast<int>(count); ++c)
    joint.channels.push_back(parse_channel(tok.expect("channel name"), tok.token_line()));
  check_channels(joint, channels_line);

  const int index = skeleton.size();
  skeleton.joints.push_back(joint);

  while (true) {
    const auto token = tok.expect("JOINT, End Site or '}'");
    if (token == "}") return;
    if (token == "JOINT") {
      parse_joint(tok, skeleton, index, std::string(tok.expect("joint name")));
    } else if (token == "End") {
      tok.expect_literal("Site");
      tok.expect_literal("{");
      skeleton.joints[index].end_site = read_offset(tok);
      tok.expect_literal("}");
    } else {
      throw BvhError("unexpected token '" + std::string(token) + "' in hierarchy", tok.token_line());
    }
  }
}

void write_joint(std::ostringstream& out, const Skeleton& skeleton, const std::vector<std::vector<int>>& children,
                 int index, int depth) {
  const std::string indent(depth * 2, ' ');
  const Joint& joint = skeleton.joints[index];
  out << indent << (joint.parent < 0 ? "ROOT " : "JOINT ") << joint.name << "\n" << indent << "{\n";
  out << indent << "  OFFSET " << format_number(joint.offset.x()) << " " << format_number(joint.offset.y()) << " "
      << format_number(joint.offset.z()) << "\n";
  out << indent << "  CHANNELS " << joint.channels.size();
  for (Channel c : joint.channels) out << " " << channel_name(c);
  out << "\n";
  for (int child : children[index]) write_joint(out, skeleton, children, child, depth + 1);
  if (children[index].empty() || joint.end_site) {
    const Eigen::Vector3d site = joint.end_site.value_or(Eigen::Vector3d::Zero());
    out << indent << "  End Site\n" << indent << "  {\n";
    out << indent << "    OFFSET " << format_number(site.x()) << " " << format_number(site.y()) << " "
        << format_number(site.z()) << "\n";
    out << indent << "  }\n";
  }
  out << indent << "}\n";
}

}  // namespace

bool Joint::has_position() const {
  return std::any_of(channels.begin(), channels.end(), [](Channel c) { return !is_rotation(c); });
}

std::string Joint::rotation_order() const {
  std::string order;
  for (Channel c : channels) {
    if (c == Channel::x_rotation) order += 'X';
    if (c == Channel::y_rotation) order += 'Y';
    if (c == Channel::z_rotation) order += 'Z';
  }
  return order;
}

std::vector<Channel> Joint::make_channels(bool with_position, std::string_view rotation_order) {
  std::vector<Channel> channels;
  if (with_position) channels = {Channel::x_position, Channel::y_position, Channel::z_position};
  for (char c : rotation_order)
    channels.push_back(static_cast<Channel>(static_cast<int>(Channel::x_rotation) + axis_of(c)));
  return channels;
}

int Skeleton::channel_count() const {
  int total = 0;
  for (const auto& joint : joints) total += static_cast<int>(joint.channels.size());
  return total;
}

int Skeleton::find(std::string_view name) const {
  const auto wanted = strip_namespace(name);
  for (int j = 0; j < size(); ++j)
    if (strip_namespace(joints[j].name) == wanted) return j;
  return -1;
}

std::vector<std::vector<int>> Skeleton::children() const {
  std::vector<std::vector<int>> result(joints.size());
  for (int j = 0; j < size(); ++j)
    if (joints[j].parent >= 0) result[joints[j].parent].push_back(j);
  return result;
}

void Skeleton::validate() const {
  if (joints.empty()) throw std::invalid_argument("skeleton has no joints");
  if (joints[0].parent != -1) throw std::invalid_argument("joint 0 must be the root");
  for (int j = 1; j < size(); ++j) {
    if (joints[j].parent < 0) throw std::invalid_argument("skeleton has more than one root");
    if (joints[j].parent >= j) throw std::invalid_argument("joints are not in topological order");
  }
  for (int f : foot_joints)
    if (f < 0 || f >= size()) throw std::invalid_argument("foot joint index out of range");
}

void RawMotion::validate(const Skeleton& skeleton) const {
  if (frame_time <= 0.0) throw std::invalid_argument("frame time must be positive");
  if (frames() < 2) throw std::invalid_argument("motion needs at least two frames");
  if (euler.cols() != 3 * skeleton.size() || positions.cols() != 3 * skeleton.size() ||
      positions.rows() != euler.rows())
    throw std::invalid_argument("motion channel layout does not match skeleton");
}

Eigen::Matrix3d euler_to_matrix(const Eigen::Vector3d& degrees, std::string_view order) {
  if (order.size() != 3) throw std::invalid_argument("rotation order must name three axes");
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  for (int k = 0; k < 3; ++k) r = r * axis_rotation(axis_of(order[k]), degrees[k]);
  return r;
}

Eigen::Vector3d matrix_to_euler(const Eigen::Matrix3d& m, std::string_view order) {
  if (order.size() != 3) throw std::invalid_argument("rotation order must name three axes");
  const int i = axis_of(order[0]);
  const int j = axis_of(order[1]);
  const int k = axis_of(order[2]);
  if (i == j || j == k || i == k) throw std::invalid_argument("only Tait-Bryan orders are supported");
  // +1 for cyclic (XYZ, YZX, ZXY), -1 otherwise.
  const double s = ((j - i + 3) % 3 == 1) ? 1.0 : -1.0;
  const double sin_b = std::clamp(s * m(i, k), -1.0, 1.0);
  double a, b, c;
  b = std::asin(sin_b);
  if (std::abs(sin_b) < 1.0 - 1e-12) {
    a = std::atan2(-s * m(j, k), m(k, k));
    c = std::atan2(-s * m(i, j), m(i, i));
  } else {
    c = 0.0;
    a = std::atan2(s * m(k, j), m(j, j));
  }
  return Eigen::Vector3d(a, b, c) * 180.0 / std::numbers::pi;
}

BvhDocument parse_bvh(std::string_view text) {
  Tokenizer tok(text);
  BvhDocument doc;
  tok.expect_literal("HIERARCHY");
  tok.expect_literal("ROOT");
  parse_joint(tok, doc.skeleton, -1, std::string(tok.expect("root name")));
  {
    std::string_view token = tok.expect("MOTION");
    if (token == "ROOT") throw BvhError("multiple roots are not supported", tok.token_line());
    if (token != "MOTION") throw BvhError("expected 'MOTION', found '" + std::string(token) + "'", tok.token_line());
  }
  tok.expect_literal("Frames:");
  const int frames_line = tok.token_line();
  const double declared = tok.number("frame count");
  if (declared != std::floor(declared) || declared < 0) throw BvhError("bad frame count", frames_line);
  tok.expect_literal("Frame");
  tok.expect_literal("Time:");
  const double frame_time = tok.number("frame time");
  if (frame_time <= 0.0) throw BvhError("frame time must be positive", tok.token_line());
  tok.rest_of_line();

  const Skeleton& skeleton = doc.skeleton;
  const int joints = skeleton.size();
  const int channels = skeleton.channel_count();
  const int frames = static_cast<int>(declared);
  RawMotion& motion = doc.motion;
  motion.frame_time = frame_time;
  motion.euler = Eigen::MatrixXd::Zero(frames, 3 * joints);
  motion.positions = Eigen::MatrixXd::Zero(frames, 3 * joints);
  for (int j = 0; j < joints; ++j)
    motion.positions.middleCols<3>(3 * j).rowwise() = skeleton.joints[j].offset.transpose();

  int frame = 0;
  while (true) {
    std::string_view token;
    if (!tok.next(token)) break;
    const int line = tok.token_line();
    if (frame >= frames) throw BvhError("more frame rows than the declared " + std::to_string(frames), line);
    std::vector<double> values{Tokenizer::parse_number(token, line)};
    std::istringstream rest{std::string(tok.rest_of_line())};
    std::string item;
    while (rest >> item) values.push_back(Tokenizer::parse_number(item, line));
    if (static_cast<int>(values.size()) != channels)
      throw BvhError("expected " + std::to_string(channels) + " channel values, found " + std::to_string(values.size()),
                     line);
    int cursor = 0;
    for (int j = 0; j < joints; ++j) {
      int rotation_slot = 0;
      for (Channel c : skeleton.joints[j].channels) {
        const double v = values[cursor++];
        if (is_rotation(c)) {
          motion.euler(frame, 3 * j + rotation_slot++) = v;
        } else {
          motion.positions(frame, 3 * j + static_cast<int>(c)) = v;
        }
      }
    }
    ++frame;
  }
  if (frame != frames)
    throw BvhError("declared " + std::to_string(frames) + " frames but found " + std::to_string(frame), tok.line());
  return doc;
}

BvhDocument read_bvh_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open BVH file '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  try {
    return parse_bvh(buffer.str());
  } catch (const BvhError& e) {
    throw BvhError(path + ": " + e.what(), e.line());
  }
}

std::string write_bvh(const Skeleton& skeleton, const RawMotion& motion) {
  skeleton.validate();
  motion.validate(skeleton);
  std::ostringstream out;
  out << "HIERARCHY\n";
  write_joint(out, skeleton, skeleton.children(), 0, 0);
  out << "MOTION\nFrames: " << motion.frames() << "\nFrame Time: " << format_number(motion.frame_time) << "\n";
  // Channel data follows hierarchy (depth-first) order.
  std::vector<int> order;
  const auto children = skeleton.children();
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const int j = stack.back();
    stack.pop_back();
    order.push_back(j);
    for (auto it = children[j].rbegin(); it != children[j].rend(); ++it) stack.push_back(*it);
  }
  for (int t = 0; t < motion.frames(); ++t) {
    bool first = true;
    for (int j : order) {
      int rotation_slot = 0;
      for (Channel c : skeleton.joints[j].channels) {
        const double v = is_rotation(c) ? motion.euler(t, 3 * j + rotation_slot++)
                                        : motion.positions(t, 3 * j + static_cast<int>(c));
        if (!first) out << ' ';
        out << format_number(v);
        first = false;
      }
    }
    out << '\n';
  }
  return out.str();
}

void write_bvh_file(const std::string& path, const Skeleton& skeleton, const RawMotion& motion) {
  const std::string text = write_bvh(skeleton, motion);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write BVH file '" + path + "'");
  out << text;
  if (!out) throw std::runtime_error("failed writing BVH file '" + path + "'");
}

Eigen::Matrix3d local_rotation(const Skeleton& skeleton, const RawMotion& motion, int frame, int joint) {
  return euler_to_matrix(motion.angles(frame, joint), skeleton.joints[joint].rotation_order());
}

std::vector<Eigen::Vector3d> raw_world_positions(const Skeleton& skeleton, const RawMotion& motion, int frame) {
  const int joints = skeleton.size();
  std::vector<Eigen::Matrix3d> world_rotation(joints);
  std::vector<Eigen::Vector3d> world_position(joints);
  for (int j = 0; j < joints; ++j) {
    const Eigen::Matrix3d local = local_rotation(skeleton, motion, frame, j);
    const Eigen::Vector3d translation = motion.position(frame, j);
    const int p = skeleton.joints[j].parent;
    if (p < 0) {
      world_rotation[j] = local;
      world_position[j] = translation;
    } else {
      world_rotation[j] = world_rotation[p] * local;
      world_position[j] = world_position[p] + world_rotation[p] * translation;
    }
  }
  return world_position;
}

BvhDocument select_joints(const Skeleton& skeleton, const RawMotion& motion, const std::vector<std::string>& keep) {
  skeleton.validate();
  motion.validate(skeleton);
  const int joints = skeleton.size();
  std::vector<bool> kept(joints, false);
  for (const auto& name : keep) {
    const int j = skeleton.find(name);
    if (j < 0) throw std::invalid_argument("keep list names unknown joint '" + name + "'");
    kept[j] = true;
  }
  if (!kept[0]) throw std::invalid_argument("keep list must include the root joint '" + skeleton.joints[0].name + "'");

  // Nearest kept ancestor for every joint, and whether a removed joint lies
  // between a kept joint and that ancestor.
  std::vector<int> kept_ancestor(joints, -1);
  std::vector<bool> collapsed(joints, false);
  for (int j = 1; j < joints; ++j) {
    int p = skeleton.joints[j].parent;
    while (p >= 0 && !kept[p]) {
      collapsed[j] = true;
      p = skeleton.joints[p].parent;
    }
    kept_ancestor[j] = p;
  }

  std::vector<int> new_index(joints, -1);
  BvhDocument out;
  for (int j = 0; j < joints; ++j) {
    if (!kept[j]) continue;
    new_index[j] = out.skeleton.size();
    Joint joint = skeleton.joints[j];
    if (j > 0) {
      joint.parent = new_index[kept_ancestor[j]];
      Eigen::Vector3d offset = Eigen::Vector3d::Zero();
      for (int a = j; a != kept_ancestor[j]; a = skeleton.joints[a].parent) offset += skeleton.joints[a].offset;
      joint.offset = offset;
      if (collapsed[j] && !joint.has_position()) {
        auto channels = Joint::make_channels(true, joint.rotation_order());
        joint.channels = channels;
      }
    }
    out.skeleton.joints.push_back(joint);
  }
  for (int f : skeleton.foot_joints)
    if (kept[f]) out.skeleton.foot_joints.insert(new_index[f]);

  // Kept joints whose children were all removed inherit the first removed
  // child's end site, expressed relative to the kept joint's rest frame.
  const auto children = skeleton.children();
  for (int j = 0; j < joints; ++j) {
    if (!kept[j]) continue;
    bool has_kept_descendant = false;
    for (int i = j + 1; i < joints; ++i) has_kept_descendant |= kept[i] && kept_ancestor[i] == j;
    if (has_kept_descendant || children[j].empty()) continue;
    int leaf = children[j].front();
    Eigen::Vector3d site = skeleton.joints[leaf].offset;
    while (!children[leaf].empty()) {
      leaf = children[leaf].front();
      site += skeleton.joints[leaf].offset;
    }
    site += skeleton.joints[leaf].end_site.value_or(Eigen::Vector3d::Zero());
    out.skeleton.joints[new_index[j]].end_site = site;
  }

  const int kept_count = out.skeleton.size();
  const int frames = motion.frames();
  out.motion.frame_time = motion.frame_time;
  out.motion.euler.resize(frames, 3 * kept_count);
  out.motion.positions.resize(frames, 3 * kept_count);
  for (int t = 0; t < frames; ++t) {
    for (int j = 0; j < joints; ++j) {
      if (!kept[j]) continue;
      const int n = new_index[j];
      if (!collapsed[j]) {
        out.motion.euler.block<1, 3>(t, 3 * n) = motion.euler.block<1, 3>(t, 3 * j);
        out.motion.positions.block<1, 3>(t, 3 * n) = motion.positions.block<1, 3>(t, 3 * j);
        continue;
      }
      // Compose the removed chain: T = L_m1 * ... * L_mk * L_j.
      std::vector<int> chain;
      for (int a = j; a != kept_ancestor[j]; a = skeleton.joints[a].parent) chain.push_back(a);
      Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
      Eigen::Vector3d translation = Eigen::Vector3d::Zero();
      for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        translation += rotation * motion.position(t, *it);
        rotation = rotation * local_rotation(skeleton, motion, t, *it);
      }
      out.motion.euler.block<1, 3>(t, 3 * n) =
          matrix_to_euler(rotation, out.skeleton.joints[n].rotation_order()).transpose();
      out.motion.positions.block<1, 3>(t, 3 * n) = translation.transpose();
    }
  }
  return out;
}

std::vector<int> resample_indices(int frames, double source_fps, double target_fps) {
  if (!(target_fps > 0.0)) throw std::invalid_argument("target fps must be positive");
  if (target_fps > source_fps * (1.0 + 1e-6))
    throw std::invalid_argument("upsampling is not supported (target fps exceeds source fps)");
  const double ratio = source_fps / target_fps;
  const double duration = (frames - 1) / source_fps;
  const int count = static_cast<int>(std::floor(duration * target_fps + 1e-6)) + 1;
  std::vector<int> indices(count);
  for (int k = 0; k < count; ++k)
    indices[k] = std::min(frames - 1, static_cast<int>(std::lround(k * ratio + 1e-9)));
  return indices;
}

RawMotion resample(const RawMotion& motion, double target_fps) {
  const auto indices = resample_indices(motion.frames(), motion.fps(), target_fps);
  if (static_cast<int>(indices.size()) == motion.frames()) return motion;
  RawMotion out;
  out.frame_time = 1.0 / target_fps;
  out.euler.resize(static_cast<Eigen::Index>(indices.size()), motion.euler.cols());
  out.positions.resize(static_cast<Eigen::Index>(indices.size()), motion.positions.cols());
  for (size_t k = 0; k < indices.size(); ++k) {
    out.euler.row(static_cast<Eigen::Index>(k)) = motion.euler.row(indices[k]);
    out.positions.row(static_cast<Eigen::Index>(k)) = motion.positions.row(indices[k]);
  }
  return out;
}

RawMotion trim(const RawMotion& motion, int start_frame, int end_frame) {
  if (start_frame < 0 || end_frame > motion.frames() || start_frame >= end_frame)
    throw std::out_of_range("trim range [" + std::to_string(start_frame) + ", " + std::to_string(end_frame) +
                            ") is outside [0, " + std::to_string(motion.frames()) + ")");
  RawMotion out;
  out.frame_time = motion.frame_time;
  out.euler = motion.euler.middleRows(start_frame, end_frame - start_frame);
  out.positions = motion.positions.middleRows(start_frame, end_frame - start_frame);
  return out;
}

std::vector<std::string> parse_name_list(std::string_view text) {
  std::vector<std::string> names;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    names.push_back(line.substr(first, last - first + 1));
  }
  return names;
}

std::vector<std::string> read_name_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open name list '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_name_list(buffer.str());
}

void assign_foot_joints(Skeleton& skeleton, const std::vector<std::string>& names) {
  skeleton.foot_joints.clear();
  for (const auto& name : names) {
    const int j = skeleton.find(name);
    if (j < 0) throw std::invalid_argument("foot joint '" + name + "' not found in skeleton");
    skeleton.foot_joints.insert(j);
  }
}

}  // namespace mblend
