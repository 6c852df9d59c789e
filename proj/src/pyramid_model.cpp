#include "mblend/pyramid_model.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mblend {

namespace {

constexpr char kMagic[8] = {'M', 'B', 'L', 'E', 'N', 'D', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

SkeletonNeighborhoods neighborhoods_for(const Skeleton& skeleton, int contacts, const ModelConfig& config) {
  return build_neighborhoods(skeleton, config.neighborhood_distance, contacts > 0);
}

Eigen::MatrixXd gaussian(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
  return m;
}

}  // namespace

Generator::Generator(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& motion, const ModelConfig& config,
                     bool conditioned, int identities, std::mt19937_64& rng)
    : slope_(config.leaky_slope) {
  if (config.body_layers < 2) throw std::invalid_argument("generator needs at least two layers");
  const auto hidden = uniform_group_widths(neighborhoods.group_count(), config.hidden_per_group(neighborhoods.group_count()));
  for (int l = 0; l < config.body_layers; ++l) {
    const auto& in = l == 0 ? motion : hidden;
    const auto& out = l + 1 == config.body_layers ? motion : hidden;
    layers.emplace_back(neighborhoods, in, out, config.kernel, rng);
  }
  if (conditioned) {
    for (int l = 0; l + 1 < config.body_layers; ++l)
      modulations.emplace_back(neighborhoods, hidden, identities, hidden.front(), config.modulation, config.kernel, rng,
                               config.leaky_slope);
  }
}

ad::Var Generator::forward(const ad::Var& input, const ad::Var& residual_base, const std::vector<int>* frame_ids) const {
  if (conditioned() && frame_ids == nullptr) throw std::invalid_argument("conditioned generator requires an id map");
  ad::Var h = input;
  for (size_t l = 0; l < layers.size(); ++l) {
    h = layers[l].forward(h);
    if (l + 1 == layers.size()) break;
    if (conditioned()) h = modulations[l].forward(h, *frame_ids);
    h = ad::leaky_relu(h, slope_);
  }
  return residual_base.defined() ? ad::add(residual_base, h) : h;
}

std::vector<ad::Var> Generator::parameters() const {
  std::vector<ad::Var> params;
  for (const auto& layer : layers)
    for (const auto& p : layer.parameters()) params.push_back(p);
  for (const auto& block : modulations)
    for (const auto& p : block.parameters()) params.push_back(p);
  return params;
}

void Generator::zero_output_layer() {
  layers.back().weight.mutable_value().setZero();
  layers.back().bias.mutable_value().setZero();
}

Critic::Critic(const SkeletonNeighborhoods& neighborhoods, const GroupWidths& motion, const ModelConfig& config,
               std::mt19937_64& rng)
    : slope_(config.leaky_slope) {
  const auto hidden = uniform_group_widths(neighborhoods.group_count(), config.hidden_per_group(neighborhoods.group_count()));
  for (int l = 0; l + 1 < config.body_layers; ++l)
    layers.emplace_back(neighborhoods, l == 0 ? motion : hidden, hidden, config.kernel, rng);
  layers.push_back(SkeletonConv::dense(layers.back().out_channels(), 1, config.kernel, rng));
}

ad::Var Critic::forward(const ad::Var& motion) const {
  ad::Var h = motion;
  for (size_t l = 0; l < layers.size(); ++l) {
    h = layers[l].forward(h);
    if (l + 1 < layers.size()) h = ad::leaky_relu(h, slope_);
  }
  return h;
}

std::vector<ad::Var> Critic::parameters() const {
  std::vector<ad::Var> params;
  for (const auto& layer : layers)
    for (const auto& p : layer.parameters()) params.push_back(p);
  return params;
}

PyramidModel PyramidModel::create(const Skeleton& skeleton, int contacts, int frames, double fps,
                                  std::vector<std::string> identities, const ModelConfig& config, std::uint64_t seed) {
  if (identities.empty()) throw std::invalid_argument("model needs at least one motion identity");
  for (int level : config.conditioning_levels)
    if (level < 1 || level > kNumLevels) throw std::invalid_argument("conditioning level out of range");
  if (contacts != static_cast<int>(skeleton.foot_joints.size()))
    throw std::invalid_argument("contact count must equal the number of foot joints");
  PyramidModel model;
  model.skeleton = skeleton;
  model.level_spec = LevelSpec::for_length(frames);
  model.config = config;
  model.contacts = contacts;
  model.fps = fps;
  model.identities = std::move(identities);

  std::mt19937_64 rng(seed);
  const auto neighborhoods = neighborhoods_for(skeleton, contacts, config);
  const auto motion = motion_group_widths(skeleton.size(), contacts);
  for (int stage = 1; stage <= kNumStages; ++stage) {
    const bool conditioned = config.modulation != ModulationKind::none &&
                             config.conditioning_levels.count(LevelSpec::level_of_stage(stage)) > 0;
    model.generators.emplace_back(neighborhoods, motion, config, conditioned, model.identity_count(), rng);
    model.critics.emplace_back(neighborhoods, motion, config, rng);
  }
  const int width = model.width();
  model.z_star.resize(kNumStages);
  for (int stage = 1; stage <= kNumStages; ++stage) {
    const int length = model.level_spec.stage_length(stage);
    for (int b = 0; b < model.identity_count(); ++b)
      model.z_star[stage - 1].push_back(stage == 1 ? gaussian(width, length, rng)
                                                   : Eigen::MatrixXd::Zero(width, length));
  }
  model.noise_amplitudes.assign(kNumStages, 1.0);
  return model;
}

bool PyramidModel::conditioned(int stage) const { return generators.at(stage - 1).conditioned(); }

int PyramidModel::identity_index(const std::string& name) const {
  for (int b = 0; b < identity_count(); ++b)
    if (identities[b] == name) return b;
  return -1;
}

std::vector<ad::Var> PyramidModel::stage_generator_parameters(int stage) const {
  return generators.at(stage - 1).parameters();
}

std::vector<ad::Var> PyramidModel::stage_critic_parameters(int stage) const {
  return critics.at(stage - 1).parameters();
}

ad::Var stage_forward(const PyramidModel& model, int stage, const ad::Var& residual_base, const ad::Var& noise,
                      const std::vector<int>* frame_ids) {
  if (stage < 1 || stage > kNumStages) throw std::out_of_range("stage out of range");
  if (stage > 1 && !residual_base.defined()) throw std::invalid_argument("stages after the first need a previous motion");
  const ad::Var input = residual_base.defined() ? ad::add(residual_base, noise) : noise;
  return model.generators[stage - 1].forward(input, residual_base, model.conditioned(stage) ? frame_ids : nullptr);
}

MotionTensor generator_forward(const PyramidModel& model, int stage, const MotionTensor* prev_motion,
                               const Eigen::MatrixXd& noise, const SkeletonIdMap* id_map) {
  if (stage < 1 || stage > kNumStages) throw std::out_of_range("stage out of range");
  if ((stage == 1) != (prev_motion == nullptr))
    throw std::invalid_argument("previous motion is required exactly for stages after the first");
  if (model.conditioned(stage) && id_map == nullptr)
    throw std::invalid_argument("stage " + std::to_string(stage) + " is conditioned and needs an id map");
  if (noise.rows() != model.width()) throw std::invalid_argument("noise channel count does not match the model");
  const int frames = static_cast<int>(noise.cols());
  if (prev_motion != nullptr && prev_motion->frames() > frames)
    throw std::invalid_argument("previous motion is longer than the stage resolution");

  ad::NoGradGuard no_grad;
  ad::Var base;
  if (prev_motion != nullptr) base = ad::constant(temporal_resample(*prev_motion, frames).data.transpose());
  std::vector<int> ids;
  if (model.conditioned(stage)) {
    if (id_map->identities != model.identity_count()) throw std::invalid_argument("id map identity count mismatch");
    ids = id_map->resample_nearest(frames).frame_identities();
  }
  const ad::Var out = stage_forward(model, stage, base, ad::constant(noise), model.conditioned(stage) ? &ids : nullptr);
  return MotionTensor(out.value().transpose(), model.skeleton.size(), model.contacts, model.fps);
}

Eigen::VectorXd discriminator_forward(const PyramidModel& model, int stage, const MotionTensor& motion) {
  if (stage < 1 || stage > kNumStages) throw std::out_of_range("stage out of range");
  if (motion.width() != model.width()) throw std::invalid_argument("motion width does not match the model");
  if (motion.frames() < 2) throw std::invalid_argument("critic needs at least two frames");
  ad::NoGradGuard no_grad;
  return model.critics[stage - 1].forward(ad::constant(motion.data.transpose())).value().row(0).transpose();
}

GenerationTrace generate_full(const PyramidModel& model, const SkeletonIdMap& id_map, std::uint64_t seed,
                              GenerationMode mode, int batch_index) {
  if (!model.trained) throw std::logic_error("model is not trained");
  const int frames = id_map.frames();
  if (id_map.identities != model.identity_count()) throw std::invalid_argument("id map identity count mismatch");
  if (mode == GenerationMode::reconstruction) {
    if (frames != model.training_frames())
      throw std::invalid_argument("reconstruction requires the training length " +
                                  std::to_string(model.training_frames()));
    if (batch_index < 0 || batch_index >= model.identity_count())
      throw std::out_of_range("batch index out of range");
  }
  const LevelSpec levels = frames == model.training_frames() ? model.level_spec : LevelSpec::for_length(frames);

  ad::NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  GenerationTrace trace;
  Eigen::MatrixXd previous;  // D x T of the previous stage
  for (int stage = 1; stage <= kNumStages; ++stage) {
    const int length = levels.stage_length(stage);
    Eigen::MatrixXd noise = mode == GenerationMode::random
                                ? Eigen::MatrixXd(model.noise_amplitudes[stage - 1] * gaussian(model.width(), length, rng))
                                : model.z_star[stage - 1][batch_index];
    ad::Var base;
    if (stage > 1) base = ad::constant(previous.cols() == length ? previous
                                                                  : Eigen::MatrixXd(previous * resample_matrix(
                                                                        static_cast<int>(previous.cols()), length)));
    std::vector<int> ids;
    if (model.conditioned(stage)) ids = id_map.resample_nearest(length).frame_identities();
    previous = stage_forward(model, stage, base, ad::constant(std::move(noise)), model.conditioned(stage) ? &ids : nullptr)
                   .value();
    trace.stages.emplace_back(previous.transpose(), model.skeleton.size(), model.contacts, model.fps);
  }
  trace.final_motion = trace.stages.back();
  return trace;
}

std::vector<double> compute_noise_amplitudes(const std::vector<MotionTensor>& motions, const LevelSpec& levels) {
  if (motions.empty()) throw std::invalid_argument("no motions for noise amplitudes");
  auto rms_detail = [&](int fine, int coarse) {
    double total = 0.0;
    double count = 0.0;
    for (const auto& m : motions) {
      const Eigen::MatrixXd fine_data = temporal_resample(m, fine).data;
      const Eigen::MatrixXd coarse_up = temporal_resample(temporal_resample(m, coarse), fine).data;
      total += (fine_data - coarse_up).squaredNorm();
      count += static_cast<double>(fine_data.size());
    }
    return std::sqrt(total / count);
  };
  std::vector<double> amplitudes(kNumStages, 1.0);
  const int first = levels.level_lengths[0];
  amplitudes[1] = rms_detail(first, std::max(2, static_cast<int>(std::lround(first / 2.0))));
  for (int level = 2; level <= kNumLevels; ++level) {
    const double amp = rms_detail(levels.level_lengths[level - 1], levels.level_lengths[level - 2]);
    for (int stage : LevelSpec::stages_of_level(level)) amplitudes[stage - 1] = amp;
  }
  return amplitudes;
}

// Checkpoint container: 8-byte magic, uint32 version, uint64 header length,
// JSON header, then little-endian float64 tensor data in directory order.
namespace {

struct TensorWriter {
  nlohmann::json directory = nlohmann::json::array();
  std::string blob;

  void add(const std::string& name, const Eigen::MatrixXd& m) {
    directory.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", blob.size()}});
    const size_t bytes = static_cast<size_t>(m.size()) * sizeof(double);
    const size_t start = blob.size();
    blob.resize(start + bytes);
    std::memcpy(blob.data() + start, m.data(), bytes);
  }
};

struct TensorReader {
  std::map<std::string, std::pair<nlohmann::json, size_t>> entries;
  const std::string* bytes = nullptr;
  size_t data_start = 0;

  Eigen::MatrixXd get(const std::string& name) const {
    const auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    const auto& entry = it->second.first;
    const Eigen::Index rows = entry.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = entry.at("cols").get<Eigen::Index>();
    const size_t offset = data_start + entry.at("offset").get<size_t>();
    const size_t count = static_cast<size_t>(rows * cols) * sizeof(double);
    if (offset + count > bytes->size()) throw std::runtime_error("checkpoint tensor '" + name + "' is truncated");
    Eigen::MatrixXd m(rows, cols);
    std::memcpy(m.data(), bytes->data() + offset, count);
    return m;
  }
};

void write_conv(TensorWriter& w, const std::string& prefix, const SkeletonConv& conv) {
  w.add(prefix + ".weight", conv.weight.value());
  w.add(prefix + ".bias", conv.bias.value());
}

void read_conv(const TensorReader& r, const std::string& prefix, SkeletonConv& conv) {
  const Eigen::MatrixXd weight = r.get(prefix + ".weight");
  const Eigen::MatrixXd bias = r.get(prefix + ".bias");
  if (weight.rows() != conv.weight.rows() || weight.cols() != conv.weight.cols() || bias.rows() != conv.bias.rows())
    throw std::runtime_error("checkpoint tensor '" + prefix + "' has the wrong shape");
  conv.weight.mutable_value() = weight;
  conv.bias.mutable_value() = bias;
}

template <typename Fn>
void for_each_conv(PyramidModel& model, Fn&& fn) {
  for (int s = 0; s < kNumStages; ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    auto& g = model.generators[s];
    for (size_t l = 0; l < g.layers.size(); ++l) fn(stage + ".generator.layer" + std::to_string(l), g.layers[l]);
    for (size_t m = 0; m < g.modulations.size(); ++m) {
      const std::string prefix = stage + ".generator.modulation" + std::to_string(m);
      fn(prefix + ".embed", g.modulations[m].embed);
      fn(prefix + ".gamma", g.modulations[m].gamma_head);
      fn(prefix + ".beta", g.modulations[m].beta_head);
    }
    auto& c = model.critics[s];
    for (size_t l = 0; l < c.layers.size(); ++l) fn(stage + ".critic.layer" + std::to_string(l), c.layers[l]);
  }
}

nlohmann::json skeleton_to_json(const Skeleton& skeleton) {
  nlohmann::json joints = nlohmann::json::array();
  for (const auto& j : skeleton.joints) {
    nlohmann::json entry = {{"name", j.name},
                            {"parent", j.parent},
                            {"offset", {j.offset.x(), j.offset.y(), j.offset.z()}},
                            {"rotation_order", j.rotation_order()},
                            {"has_position", j.has_position()}};
    if (j.end_site) entry["end_site"] = {j.end_site->x(), j.end_site->y(), j.end_site->z()};
    joints.push_back(entry);
  }
  return {{"joints", joints}, {"foot_joints", std::vector<int>(skeleton.foot_joints.begin(), skeleton.foot_joints.end())}};
}

Skeleton skeleton_from_json(const nlohmann::json& json) {
  Skeleton skeleton;
  for (const auto& entry : json.at("joints")) {
    Joint j;
    j.name = entry.at("name").get<std::string>();
    j.parent = entry.at("parent").get<int>();
    const auto offset = entry.at("offset").get<std::vector<double>>();
    j.offset = Eigen::Vector3d(offset.at(0), offset.at(1), offset.at(2));
    j.channels = Joint::make_channels(entry.at("has_position").get<bool>(), entry.at("rotation_order").get<std::string>());
    if (entry.contains("end_site")) {
      const auto site = entry.at("end_site").get<std::vector<double>>();
      j.end_site = Eigen::Vector3d(site.at(0), site.at(1), site.at(2));
    }
    skeleton.joints.push_back(j);
  }
  for (int f : json.at("foot_joints").get<std::vector<int>>()) skeleton.foot_joints.insert(f);
  skeleton.validate();
  return skeleton;
}

}  // namespace

std::string serialize_checkpoint(const PyramidModel& model) {
  TensorWriter writer;
  for_each_conv(const_cast<PyramidModel&>(model), [&](const std::string& name, SkeletonConv& conv) {
    write_conv(writer, name, conv);
  });
  for (int s = 0; s < kNumStages; ++s)
    for (size_t b = 0; b < model.z_star[s].size(); ++b)
      writer.add("stage" + std::to_string(s + 1) + ".z_star" + std::to_string(b), model.z_star[s][b]);

  const auto& cfg = model.config;
  nlohmann::json header = {
      {"format", "mblend-checkpoint"},
      {"version", kCheckpointVersion},
      {"skeleton", skeleton_to_json(model.skeleton)},
      {"level_lengths", model.level_spec.level_lengths},
      {"contacts", model.contacts},
      {"fps", model.fps},
      {"identities", model.identities},
      {"noise_amplitudes", model.noise_amplitudes},
      {"trained", model.trained},
      {"config_hash", model.config_hash},
      {"model",
       {{"modulation", to_string(cfg.modulation)},
        {"conditioning_levels", std::vector<int>(cfg.conditioning_levels.begin(), cfg.conditioning_levels.end())},
        {"hidden_width", cfg.hidden_width},
        {"neighborhood_distance", cfg.neighborhood_distance},
        {"kernel", cfg.kernel},
        {"body_layers", cfg.body_layers},
        {"leaky_slope", cfg.leaky_slope}}},
      {"tensors", writer.directory},
  };
  const std::string header_text = header.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t header_size = header_text.size();
  bytes.append(reinterpret_cast<const char*>(&version), sizeof(version));
  bytes.append(reinterpret_cast<const char*>(&header_size), sizeof(header_size));
  bytes += header_text;
  bytes += writer.blob;
  return bytes;
}

PyramidModel deserialize_checkpoint(const std::string& bytes) {
  const size_t prefix = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (bytes.size() < prefix || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file");
  std::uint32_t version = 0;
  std::uint64_t header_size = 0;
  std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
  std::memcpy(&header_size, bytes.data() + sizeof(kMagic) + sizeof(version), sizeof(header_size));
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  if (prefix + header_size > bytes.size()) throw std::runtime_error("checkpoint header is truncated");
  const auto header = nlohmann::json::parse(bytes.substr(prefix, header_size));

  ModelConfig cfg;
  const auto& m = header.at("model");
  cfg.modulation = modulation_kind_from_string(m.at("modulation").get<std::string>());
  cfg.conditioning_levels.clear();
  for (int level : m.at("conditioning_levels").get<std::vector<int>>()) cfg.conditioning_levels.insert(level);
  cfg.hidden_width = m.at("hidden_width").get<int>();
  cfg.neighborhood_distance = m.at("neighborhood_distance").get<int>();
  cfg.kernel = m.at("kernel").get<int>();
  cfg.body_layers = m.at("body_layers").get<int>();
  cfg.leaky_slope = m.at("leaky_slope").get<double>();

  const Skeleton skeleton = skeleton_from_json(header.at("skeleton"));
  const auto lengths = header.at("level_lengths").get<std::vector<int>>();
  if (lengths.size() != kNumLevels) throw std::runtime_error("checkpoint must have four levels");
  PyramidModel model = PyramidModel::create(skeleton, header.at("contacts").get<int>(), lengths.back(),
                                            header.at("fps").get<double>(),
                                            header.at("identities").get<std::vector<std::string>>(), cfg, 0);
  for (int l = 0; l < kNumLevels; ++l) model.level_spec.level_lengths[l] = lengths[l];
  model.level_spec.validate();
  model.noise_amplitudes = header.at("noise_amplitudes").get<std::vector<double>>();
  model.trained = header.at("trained").get<bool>();
  model.config_hash = header.at("config_hash").get<std::string>();

  TensorReader reader;
  reader.bytes = &bytes;
  reader.data_start = prefix + header_size;
  for (const auto& entry : header.at("tensors"))
    reader.entries[entry.at("name").get<std::string>()] = {entry, 0};
  for_each_conv(model, [&](const std::string& name, SkeletonConv& conv) { read_conv(reader, name, conv); });
  for (int s = 0; s < kNumStages; ++s) {
    model.z_star[s].clear();
    for (int b = 0; b < model.identity_count(); ++b)
      model.z_star[s].push_back(reader.get("stage" + std::to_string(s + 1) + ".z_star" + std::to_string(b)));
  }
  return model;
}

void save_checkpoint(const std::string& path, const PyramidModel& model) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

PyramidModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

}  // namespace mblend
