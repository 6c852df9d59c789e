#include "mblend/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace mblend::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kDefaultFootCandidates{"LeftFoot", "RightFoot", "LeftToeBase", "RightToeBase",
                                                      "left_foot", "right_foot", "left_toe",   "right_toe"};

std::string resolve_path(const std::string& path, const fs::path& base) {
  if (path.empty()) return path;
  const fs::path p(path);
  return p.is_absolute() ? p.string() : (base / p).lexically_normal().string();
}

void check_keys(const json& object, const std::set<std::string>& allowed, const std::string& where) {
  if (!object.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [key, value] : object.items())
    if (!allowed.count(key)) throw std::invalid_argument("unknown config key '" + where + "." + key + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text_atomically(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out << text;
    if (!out) throw std::runtime_error("failed writing '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void check_device() {
  const char* device = std::getenv("MBLEND_DEVICE");
  if (device != nullptr && std::string(device) != "cpu" && std::string(device) != "")
    throw std::runtime_error("unsupported compute device '" + std::string(device) + "' (available: cpu)");
}

json checkpoint_summary(const PyramidModel& model) {
  std::vector<int> stages;
  for (int s = 1; s <= kNumStages; ++s)
    if (model.conditioned(s)) stages.push_back(s);
  return {{"identities", model.identities},
          {"joints", model.skeleton.size()},
          {"contacts", model.contacts},
          {"width", model.width()},
          {"fps", model.fps},
          {"level_lengths", model.level_spec.level_lengths},
          {"modulation", to_string(model.config.modulation)},
          {"conditioned_stages", stages},
          {"noise_amplitudes", model.noise_amplitudes},
          {"trained", model.trained},
          {"config_hash", model.config_hash}};
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& output_override) {
  ExperimentConfig config = load_config(config_path, overrides);
  if (!output_override.empty()) {
    config.output_dir = output_override;
    config.raw["output_dir"] = output_override;
  }
  const PreparedData data = prepare_motions(config);
  const fs::path run_dir(config.output_dir);
  fs::create_directories(run_dir);
  const std::string hash = config_hash(config.raw);
  json copied = config.raw;
  write_text_atomically(run_dir / "config.json", copied.dump(2) + "\n");

  std::cerr << "training " << data.identities.size() << " motion(s), " << data.tensors.front().frames()
            << " frames, " << data.skeleton.size() << " joints, " << config.train.iterations_per_level
            << " iterations per level\n";
  const fs::path telemetry_path = run_dir / "telemetry.csv";
  std::ofstream telemetry(telemetry_path);
  if (!telemetry) throw std::runtime_error("cannot write '" + telemetry_path.string() + "'");
  write_telemetry_header(telemetry);
  const int every = std::max(1, config.train.iterations_per_level / 10);
  PyramidModel model = train(data.skeleton, data.tensors, data.identities, config.train, [&](const TelemetryRow& row) {
    write_telemetry_row(telemetry, row);
    if (row.iteration % every == 0)
      std::cerr << "level " << row.level << " iteration " << row.iteration << ": rec " << row.reconstruction
                << " critic " << row.critic_loss << "\n";
  });
  telemetry.close();
  model.config_hash = hash;
  const fs::path checkpoint = run_dir / "checkpoint.mbk";
  fs::path tmp = checkpoint;
  tmp += ".tmp";
  save_checkpoint(tmp.string(), model);
  fs::rename(tmp, checkpoint);
  std::cout << checkpoint.string() << "\n";
  return 0;
}

int cmd_blend(const std::string& checkpoint, const std::string& schedule_path, std::uint64_t seed,
              const std::string& out, const std::string& mode, int batch_index) {
  const PyramidModel model = load_checkpoint(checkpoint);
  const BlendSchedule schedule = BlendSchedule::read(schedule_path);
  GenerationMode generation;
  if (mode == "random") {
    generation = GenerationMode::random;
  } else if (mode == "reconstruction") {
    generation = GenerationMode::reconstruction;
  } else {
    throw std::invalid_argument("unknown generation mode '" + mode + "' (random, reconstruction)");
  }
  const BlendResult result = blend(model, schedule, seed, model.skeleton, generation, batch_index);
  const fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_text_atomically(out_path, write_bvh(model.skeleton, result.motion));
  std::cout << "schedule:\n" << schedule.summary() << "wrote " << out_path.string() << " ("
            << result.motion.frames() << " frames)\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path, const std::vector<std::string>& overrides,
             std::optional<int> samples, std::optional<std::uint64_t> seed, const std::string& schedule_path,
             const std::string& out) {
  ExperimentConfig config = load_config(config_path, overrides);
  const PyramidModel model = load_checkpoint(checkpoint);
  PreparedData data = prepare_motions(config);
  if (data.skeleton.size() != model.skeleton.size() || data.tensors.front().width() != model.width())
    throw std::invalid_argument("evaluation motions do not match the checkpoint skeleton");
  std::vector<MotionTensor> real;
  for (const auto& name : model.identities) {
    bool found = false;
    for (size_t i = 0; i < data.identities.size(); ++i) {
      if (data.identities[i] == name) {
        real.push_back(data.tensors[i]);
        found = true;
      }
    }
    if (!found) throw std::invalid_argument("config has no motion for checkpoint identity '" + name + "'");
  }
  EvalOptions options = config.eval;
  if (samples) options.samples = *samples;
  if (seed) options.seed = *seed;
  if (!schedule_path.empty()) options.schedule = BlendSchedule::read(schedule_path);
  const EvalResult result = evaluate(model, real, options);
  const fs::path dir = out.empty() ? fs::path(config.output_dir) / "eval" : fs::path(out);
  fs::create_directories(dir);
  write_text_atomically(dir / "config.json", config.raw.dump(2) + "\n");
  emit_report(dir.string(), result.report, &result.smoothness);
  std::cout << format_report(result.report);
  return 0;
}

int cmd_inspect(const std::string& checkpoint) {
  const PyramidModel model = load_checkpoint(checkpoint);
  std::cout << checkpoint_summary(model).dump(2) << "\n";
  return 0;
}

}  // namespace

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw std::invalid_argument("override '" + assignment + "' must look like key.path=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &config;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (size_t i = 0; i + 1 < path.size(); ++i) {
    if (!node->is_object()) throw std::invalid_argument("override path '" + key + "' crosses a non-object value");
    node = &(*node)[path[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw std::invalid_argument("override path '" + key + "' crosses a non-object value");
  (*node)[path.back()] = value;
}

ExperimentConfig parse_config(const json& j, const fs::path& base_dir) {
  check_keys(j, {"motions", "joint_keep_list", "foot_joints", "fps", "frames", "contacts", "train", "model", "eval",
                 "output_dir", "seed"},
             "config");
  ExperimentConfig c;
  c.raw = j;
  if (!j.contains("motions") || !j["motions"].is_array() || j["motions"].empty())
    throw std::invalid_argument("config needs a non-empty 'motions' list");
  std::set<std::string> identities;
  for (const auto& m : j["motions"]) {
    check_keys(m, {"path", "identity", "trim"}, "motions[]");
    MotionSource source;
    source.path = resolve_path(m.at("path").get<std::string>(), base_dir);
    source.identity = m.value("identity", fs::path(source.path).stem().string());
    if (m.contains("trim")) {
      const auto range = m["trim"].get<std::vector<int>>();
      if (range.size() != 2) throw std::invalid_argument("trim must be [start, end]");
      source.trim = std::make_pair(range[0], range[1]);
    }
    if (!identities.insert(source.identity).second)
      throw std::invalid_argument("duplicate motion identity '" + source.identity + "'");
    c.motions.push_back(source);
  }
  c.joint_keep_list = resolve_path(j.value("joint_keep_list", std::string()), base_dir);
  if (j.contains("foot_joints")) {
    // Either a list of names or the path of a name-list file.
    const auto& feet = j["foot_joints"];
    c.foot_joints = feet.is_string() ? read_name_list(resolve_path(feet.get<std::string>(), base_dir))
                                     : feet.get<std::vector<std::string>>();
  }
  c.fps = j.value("fps", 30.0);
  c.frames = j.value("frames", 0);
  c.seed = j.value("seed", std::uint64_t{0});
  c.output_dir = resolve_path(j.value("output_dir", std::string("runs/experiment")), base_dir);
  if (!(c.fps > 0)) throw std::invalid_argument("fps must be positive");
  if (c.frames < 0) throw std::invalid_argument("frames must be nonnegative");

  if (j.contains("contacts")) {
    const auto& k = j["contacts"];
    check_keys(k, {"velocity_threshold", "height_factor"}, "contacts");
    c.contacts.velocity_threshold = k.value("velocity_threshold", c.contacts.velocity_threshold);
    c.contacts.height_factor = k.value("height_factor", c.contacts.height_factor);
  }

  TrainConfig& t = c.train;
  t.seed = c.seed;
  if (j.contains("train")) {
    const auto& k = j["train"];
    check_keys(k, {"iterations_per_level", "learning_rate", "beta1", "beta2", "seed", "weights", "contact_steepness",
                   "contact_midpoint", "divergence_threshold"},
               "train");
    t.iterations_per_level = k.value("iterations_per_level", t.iterations_per_level);
    t.optimizer.learning_rate = k.value("learning_rate", t.optimizer.learning_rate);
    t.optimizer.beta1 = k.value("beta1", t.optimizer.beta1);
    t.optimizer.beta2 = k.value("beta2", t.optimizer.beta2);
    t.seed = k.value("seed", t.seed);
    t.contact_sigmoid.steepness = k.value("contact_steepness", t.contact_sigmoid.steepness);
    t.contact_sigmoid.midpoint = k.value("contact_midpoint", t.contact_sigmoid.midpoint);
    t.divergence_threshold = k.value("divergence_threshold", t.divergence_threshold);
    if (k.contains("weights")) {
      const auto& w = k["weights"];
      check_keys(w, {"adv", "rec", "con", "gp"}, "train.weights");
      t.weights.adv = w.value("adv", t.weights.adv);
      t.weights.rec = w.value("rec", t.weights.rec);
      t.weights.con = w.value("con", t.weights.con);
      t.weights.gp = w.value("gp", t.weights.gp);
    }
  }
  if (j.contains("model")) {
    const auto& k = j["model"];
    check_keys(k, {"modulation", "conditioning_levels", "hidden_width", "neighborhood_distance", "kernel", "body_layers",
                   "leaky_slope"},
               "model");
    ModelConfig& m = t.model;
    if (k.contains("modulation")) m.modulation = modulation_kind_from_string(k["modulation"].get<std::string>());
    if (k.contains("conditioning_levels")) {
      m.conditioning_levels.clear();
      for (int level : k["conditioning_levels"].get<std::vector<int>>()) m.conditioning_levels.insert(level);
    }
    m.hidden_width = k.value("hidden_width", m.hidden_width);
    m.neighborhood_distance = k.value("neighborhood_distance", m.neighborhood_distance);
    m.kernel = k.value("kernel", m.kernel);
    m.body_layers = k.value("body_layers", m.body_layers);
    m.leaky_slope = k.value("leaky_slope", m.leaky_slope);
  }
  t.validate();

  EvalOptions& e = c.eval;
  e.seed = c.seed;
  if (j.contains("eval")) {
    const auto& k = j["eval"];
    check_keys(k, {"samples", "seed", "window", "local_window", "pca_dims", "coverage_percentile",
                   "transition_half_width", "probe_joints", "schedule"},
               "eval");
    e.samples = k.value("samples", e.samples);
    e.seed = k.value("seed", e.seed);
    e.metrics.window = k.value("window", e.metrics.window);
    e.metrics.local_window = k.value("local_window", e.metrics.local_window);
    e.metrics.pca_dims = k.value("pca_dims", e.metrics.pca_dims);
    e.metrics.coverage_percentile = k.value("coverage_percentile", e.metrics.coverage_percentile);
    e.transition_half_width = k.value("transition_half_width", e.transition_half_width);
    if (k.contains("probe_joints")) e.probe_joints = k["probe_joints"].get<std::vector<std::string>>();
    if (k.contains("schedule")) e.schedule = BlendSchedule::read(resolve_path(k["schedule"].get<std::string>(), base_dir));
  }
  return c;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::parse(read_text(path), nullptr, true, true);
  for (const auto& o : overrides) apply_override(j, o);
  return parse_config(j, fs::absolute(path).parent_path());
}

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

PreparedData prepare_motions(const ExperimentConfig& config) {
  for (const auto& m : config.motions)
    if (!fs::exists(m.path)) throw std::runtime_error("motion file '" + m.path + "' does not exist");
  std::vector<std::string> keep;
  if (!config.joint_keep_list.empty()) keep = read_name_list(config.joint_keep_list);

  PreparedData data;
  std::vector<RawMotion> raws;
  for (const auto& source : config.motions) {
    BvhDocument doc = read_bvh_file(source.path);
    if (!keep.empty()) doc = select_joints(doc.skeleton, doc.motion, keep);
    RawMotion motion = resample(doc.motion, config.fps);
    motion.frame_time = 1.0 / config.fps;
    if (source.trim) motion = trim(motion, source.trim->first, source.trim->second);
    if (data.identities.empty()) {
      data.skeleton = doc.skeleton;
    } else {
      if (doc.skeleton.size() != data.skeleton.size())
        throw std::invalid_argument("motion '" + source.identity + "' has a different skeleton");
      for (int j = 0; j < data.skeleton.size(); ++j)
        if (doc.skeleton.joints[j].name != data.skeleton.joints[j].name ||
            doc.skeleton.joints[j].parent != data.skeleton.joints[j].parent)
          throw std::invalid_argument("motion '" + source.identity + "' has a different skeleton");
    }
    data.identities.push_back(source.identity);
    raws.push_back(std::move(motion));
  }

  if (config.foot_joints) {
    assign_foot_joints(data.skeleton, *config.foot_joints);
  } else {
    std::vector<std::string> found;
    for (const auto& name : kDefaultFootCandidates)
      if (data.skeleton.find(name) >= 0) found.push_back(name);
    assign_foot_joints(data.skeleton, found);
  }

  int frames = config.frames;
  if (frames == 0) {
    frames = raws.front().frames();
    for (const auto& r : raws) frames = std::min(frames, r.frames());
  }
  for (size_t i = 0; i < raws.size(); ++i) {
    if (raws[i].frames() < frames)
      throw std::invalid_argument("motion '" + data.identities[i] + "' has only " + std::to_string(raws[i].frames()) +
                                  " frames, need " + std::to_string(frames));
    if (raws[i].frames() > frames) raws[i] = trim(raws[i], 0, frames);
    data.tensors.push_back(encode_motion(data.skeleton, raws[i], config.contacts));
  }
  return data;
}

int run(int argc, char** argv) {
  CLI::App app{"Single-shot motion blending: train, blend, and evaluate skeleton-conditioned generators"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, schedule, out, mode = "random", output_dir;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  int batch_index = 0;
  std::optional<int> samples;
  std::optional<std::uint64_t> eval_seed;

  auto* train_cmd = app.add_subcommand("train", "Train a model from an experiment config");
  train_cmd->add_option("config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--set", overrides, "Override a config key, e.g. train.iterations_per_level=200");
  train_cmd->add_option("--output-dir", output_dir, "Run directory (overrides output_dir)");

  auto* blend_cmd = app.add_subcommand("blend", "Generate a blended motion from a schedule");
  blend_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  blend_cmd->add_option("schedule", schedule, "Schedule file with identity=frames lines")
      ->required()
      ->check(CLI::ExistingFile);
  blend_cmd->add_option("--seed", seed, "Noise seed");
  blend_cmd->add_option("--out", out, "Output BVH path")->required();
  blend_cmd->add_option("--mode", mode, "random or reconstruction");
  blend_cmd->add_option("--batch-index", batch_index, "Training motion index for reconstruction mode");

  auto* eval_cmd = app.add_subcommand("eval", "Compute metrics and smoothness plots");
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", config_path, "Experiment config with the real motions")
      ->required()
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--set", overrides, "Override a config key");
  eval_cmd->add_option("--samples", samples, "Number of generated samples");
  eval_cmd->add_option("--seed", eval_seed, "Base seed");
  eval_cmd->add_option("--schedule", schedule, "Blend schedule for FID, diversity and smoothness");
  eval_cmd->add_option("--out", out, "Report directory (default: <output_dir>/eval)");

  auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "Print checkpoint metadata");
  inspect_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    check_device();
    if (*train_cmd) return cmd_train(config_path, overrides, output_dir);
    if (*blend_cmd) return cmd_blend(checkpoint, schedule, seed, out, mode, batch_index);
    if (*eval_cmd) return cmd_eval(checkpoint, config_path, overrides, samples, eval_seed, schedule, out);
    if (*inspect_cmd) return cmd_inspect(checkpoint);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace mblend::cli
