#include "config_yaml.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace htwa::cli {

namespace {

struct Field {
  std::string key;
  std::function<std::string(Config&)> get;  // YAML scalar text
  std::function<void(Config&, const YAML::Node&, const std::string&)> set;
};

std::string scalar_text(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}
std::string scalar_text(std::size_t v) { return std::to_string(v); }
std::string scalar_text(const std::string& v) { return v; }

template <class T>
T convert(const YAML::Node& node, const std::string& key) {
  if (!node.IsScalar()) throw ConfigError(key, "expected a scalar value");
  const std::string& text = node.Scalar();
  if constexpr (std::is_unsigned_v<T>) {
    // yaml-cpp wraps negative numbers into unsigned types.
    if (!text.empty() && text[0] == '-') throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  }
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    const char* kind = std::is_same_v<T, std::string> ? "a string"
                       : std::is_floating_point_v<T>  ? "a number"
                                                      : "a non-negative integer";
    throw ConfigError(key, std::string("expected ") + kind + ", got '" + text + "'");
  }
}

template <class T, class Access>
Field field(std::string key, Access access) {
  return {key, [access](Config& c) { return scalar_text(access(c)); },
          [access](Config& c, const YAML::Node& n, const std::string& path) { access(c) = convert<T>(n, path); }};
}

#define HTWA_FIELD(type, key, member) field<type>(key, [](Config& c) -> type& { return c.member; })

const std::vector<std::string> kStageKeys{"layers", "dim", "heads", "temporal_window", "spatial_h", "spatial_w", "merge"};

std::size_t& stage_member(attention::StageSpec& s, const std::string& name) {
  if (name == "layers") return s.layers;
  if (name == "dim") return s.dim;
  if (name == "heads") return s.heads;
  if (name == "temporal_window") return s.temporal_window;
  if (name == "spatial_h") return s.spatial_h;
  if (name == "spatial_w") return s.spatial_w;
  return s.merge;
}

void set_schedule(Config& c, const YAML::Node& node, const std::string& key) {
  if (!node.IsSequence() || node.size() == 0) throw ConfigError(key, "expected a non-empty list of stage records");
  attention::WindowSchedule schedule;
  for (std::size_t i = 0; i < node.size(); ++i) {
    const std::string at = key + "[" + std::to_string(i) + "]";
    if (!node[i].IsMap()) throw ConfigError(at, "expected a stage record");
    attention::StageSpec stage;
    for (const auto& kv : node[i]) {
      const std::string name = kv.first.as<std::string>();
      if (std::find(kStageKeys.begin(), kStageKeys.end(), name) == kStageKeys.end())
        throw ConfigError(at + "." + name, "unknown stage key");
      stage_member(stage, name) = convert<std::size_t>(kv.second, at + "." + name);
    }
    schedule.stages.push_back(stage);
  }
  c.model.video.schedule = std::move(schedule);
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      HTWA_FIELD(std::size_t, "data.clips", data.clips),
      HTWA_FIELD(std::size_t, "data.frames_per_clip", data.frames_per_clip),
      HTWA_FIELD(std::size_t, "data.height", data.height),
      HTWA_FIELD(std::size_t, "data.width", data.width),
      HTWA_FIELD(std::size_t, "data.patch_dim", data.patch_dim),
      HTWA_FIELD(std::size_t, "data.max_tokens", data.max_tokens),
      HTWA_FIELD(std::size_t, "data.vocab", data.vocab),
      HTWA_FIELD(std::size_t, "data.latent_dim", data.latent_dim),
      HTWA_FIELD(double, "data.walk_step", data.walk_step),
      HTWA_FIELD(double, "data.video_noise", data.video_noise),
      HTWA_FIELD(double, "data.topic_sharpness", data.topic_sharpness),
      HTWA_FIELD(std::size_t, "data.train_size", data.train_size),
      HTWA_FIELD(std::size_t, "data.eval_size", data.eval_size),
      HTWA_FIELD(std::uint64_t, "data.seed", data.seed),
      HTWA_FIELD(std::size_t, "model.text.dim", model.text.dim),
      HTWA_FIELD(std::size_t, "model.text.heads", model.text.heads),
      HTWA_FIELD(std::size_t, "model.text.part1_layers", model.text.part1_layers),
      HTWA_FIELD(std::size_t, "model.text.part2_layers", model.text.part2_layers),
      HTWA_FIELD(std::size_t, "model.text.ffn_hidden", model.text.ffn_hidden),
      {"model.video.schedule", nullptr, set_schedule},
      HTWA_FIELD(std::size_t, "model.video.ffn_ratio", model.video.ffn_ratio),
      HTWA_FIELD(std::size_t, "model.video.clip_pool_times", model.video.clip_pool_times),
      HTWA_FIELD(std::size_t, "model.cross.dim", model.cross.dim),
      HTWA_FIELD(std::size_t, "model.cross.heads", model.cross.heads),
      HTWA_FIELD(std::size_t, "model.cross.layers", model.cross.layers),
      HTWA_FIELD(std::size_t, "model.cross.ffn_hidden", model.cross.ffn_hidden),
      HTWA_FIELD(std::size_t, "model.cross.pool_h", model.cross.pool_h),
      HTWA_FIELD(std::size_t, "model.cross.pool_w", model.cross.pool_w),
      HTWA_FIELD(std::size_t, "model.embed_dim", model.embed_dim),
      HTWA_FIELD(std::uint64_t, "model.init_seed", model.init_seed),
      HTWA_FIELD(double, "loss.tau", loss.tau),
      HTWA_FIELD(double, "loss.lambda1", loss.lambda1),
      HTWA_FIELD(double, "loss.lambda2", loss.lambda2),
      HTWA_FIELD(std::size_t, "loss.anchors", loss.anchors),
      HTWA_FIELD(std::size_t, "loss.candidates", loss.candidates),
      HTWA_FIELD(std::size_t, "loss.negatives", loss.negatives),
      HTWA_FIELD(double, "loss.mask_rate", loss.mask_rate),
      HTWA_FIELD(double, "loss.vtm_replace_prob", loss.vtm_replace_prob),
      HTWA_FIELD(double, "optim.lr", optim.lr),
      HTWA_FIELD(double, "optim.weight_decay", optim.weight_decay),
      HTWA_FIELD(double, "optim.beta1", optim.beta1),
      HTWA_FIELD(double, "optim.beta2", optim.beta2),
      HTWA_FIELD(double, "optim.eps", optim.eps),
      HTWA_FIELD(std::size_t, "optim.batch_size", optim.batch_size),
      HTWA_FIELD(std::size_t, "optim.stage1_steps", optim.stage1_steps),
      HTWA_FIELD(std::size_t, "optim.stage2_steps", optim.stage2_steps),
      HTWA_FIELD(std::size_t, "optim.warmup_steps", optim.warmup_steps),
      HTWA_FIELD(std::uint64_t, "run.seed", run.seed),
      HTWA_FIELD(std::string, "run.out_dir", run.out_dir),
      HTWA_FIELD(std::string, "run.data_path", run.data_path),
      HTWA_FIELD(std::string, "run.stage1_checkpoint", run.stage1_checkpoint),
      HTWA_FIELD(std::string, "run.stage2_checkpoint", run.stage2_checkpoint),
  };
  return all;
}

#undef HTWA_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

bool is_section(const std::string& prefix) {
  for (const auto& f : fields())
    if (f.key.rfind(prefix + ".", 0) == 0) return true;
  return false;
}

void apply_node(Config& config, const YAML::Node& node, const std::string& prefix) {
  if (!node.IsMap()) throw ConfigError(prefix.empty() ? "<document>" : prefix, "expected a mapping of keys");
  for (const auto& kv : node) {
    const std::string name = kv.first.as<std::string>();
    const std::string key = prefix.empty() ? name : prefix + "." + name;
    if (const Field* f = find_field(key)) {
      f->set(config, kv.second, key);
    } else if (is_section(key)) {
      apply_node(config, kv.second, key);
    } else {
      throw ConfigError(key, "unknown key");
    }
  }
}

YAML::Node parse(const std::string& text, const std::string& where) {
  try {
    return YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(where, std::string("cannot parse: ") + e.what());
  }
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

void apply_document(Config& config, const std::string& text) {
  const YAML::Node root = parse(text, "<document>");
  if (root.IsNull()) return;
  apply_node(config, root, "");
}

void apply_file(Config& config, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_document(config, ss.str());
}

void apply_assignment(Config& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set", "expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const Field* f = find_field(key);
  if (f == nullptr) throw ConfigError(key, "unknown key");
  YAML::Node value = parse(assignment.substr(eq + 1), key);
  // An empty right-hand side is the empty string.
  if (value.IsNull()) value = YAML::Node(std::string());
  f->set(config, value, key);
}

std::string dump_config(const Config& config) {
  Config& c = const_cast<Config&>(config);
  YAML::Emitter out;
  out << YAML::BeginMap;
  std::vector<std::string> open;  // currently open section path
  for (const auto& f : fields()) {
    std::vector<std::string> parts;
    std::stringstream ss(f.key);
    for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
    const std::vector<std::string> sections(parts.begin(), parts.end() - 1);
    std::size_t common = 0;
    while (common < open.size() && common < sections.size() && open[common] == sections[common]) ++common;
    while (open.size() > common) {
      out << YAML::EndMap;
      open.pop_back();
    }
    for (std::size_t i = common; i < sections.size(); ++i) {
      out << YAML::Key << sections[i] << YAML::Value << YAML::BeginMap;
      open.push_back(sections[i]);
    }
    out << YAML::Key << parts.back() << YAML::Value;
    if (f.get) {
      const std::string v = f.get(c);
      if (v.empty()) {
        out << YAML::DoubleQuoted << v;
      } else {
        out << v;
      }
    } else {
      out << YAML::BeginSeq;
      for (auto& stage : c.model.video.schedule.stages) {
        out << YAML::Flow << YAML::BeginMap;
        for (const auto& name : kStageKeys) out << YAML::Key << name << YAML::Value << stage_member(stage, name);
        out << YAML::EndMap;
      }
      out << YAML::EndSeq;
    }
  }
  while (!open.empty()) {
    out << YAML::EndMap;
    open.pop_back();
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace htwa::cli
