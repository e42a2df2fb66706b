#include "foldkd/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "foldkd/checkpoint.hpp"
#include "foldkd/errors.hpp"

namespace foldkd::cfg {

Preset parse_preset(const std::string& name) {
  if (name == "desk") return Preset::Desk;
  if (name == "paper") return Preset::Paper;
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

std::string preset_name(Preset p) { return p == Preset::Desk ? "desk" : "paper"; }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

template <class T>
std::vector<T> to_list(const std::string& key, const std::string& v, T (*conv)(const std::string&, const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(conv(key, trim(item)));
  return out;
}

std::string str(double v) { return ckpt::format_double(v); }
std::string str(std::uint64_t v) { return std::to_string(v); }
std::string str(bool v) { return v ? "true" : "false"; }

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_floating_point_v<T>)
      s += str(static_cast<double>(xs[i]));
    else
      s += std::to_string(xs[i]);
  }
  return s;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Binds a member selected by `ref` as a field of the right kind.
template <class Ref>
Field size_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = to_u64(k, v); },
          [ref](const RunConfig& c) { return str(static_cast<std::uint64_t>(ref(const_cast<RunConfig&>(c)))); }};
}
template <class Ref>
Field double_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = to_double(k, v); },
          [ref](const RunConfig& c) { return str(ref(const_cast<RunConfig&>(c))); }};
}
template <class Ref>
Field bool_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = to_bool(k, v); },
          [ref](const RunConfig& c) { return str(static_cast<bool>(ref(const_cast<RunConfig&>(c)))); }};
}
template <class Ref>
Field string_field(Ref ref) {
  return {[ref](RunConfig& c, const std::string&, const std::string& v) { ref(c) = v; },
          [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); }};
}

// Ordered registry; `keys()` and `resolved()` follow this order.
const std::vector<std::pair<std::string, Field>>& registry() {
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto add = [&](std::string name, Field fld) { f.emplace_back(std::move(name), std::move(fld)); };
    add("preset", {[](RunConfig& c, const std::string&, const std::string& v) { c.preset = parse_preset(v); },
                   [](const RunConfig& c) { return preset_name(c.preset); }});
    add("task", {[](RunConfig& c, const std::string&, const std::string& v) { c.task = sim::parse_task(v); },
                 [](const RunConfig& c) { return std::string(sim::task_name(c.task)); }});
    add("seed", size_field([](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    add("out", string_field([](RunConfig& c) -> std::string& { return c.out; }));

    add("model.embed_dim", size_field([](RunConfig& c) -> std::size_t& { return c.model.embed_dim; }));
    add("model.n_layers", size_field([](RunConfig& c) -> std::size_t& { return c.model.n_layers; }));
    add("model.n_heads", size_field([](RunConfig& c) -> std::size_t& { return c.model.n_heads; }));
    add("model.context", size_field([](RunConfig& c) -> std::size_t& { return c.model.context; }));
    add("model.max_episode_len", size_field([](RunConfig& c) -> std::size_t& { return c.model.max_episode_len; }));
    add("model.mlp_ratio", size_field([](RunConfig& c) -> std::size_t& { return c.model.mlp_ratio; }));
    add("model.entropy_weight", double_field([](RunConfig& c) -> double& { return c.model.entropy_weight; }));
    add("model.dropout", double_field([](RunConfig& c) -> double& { return c.model.dropout; }));

    add("data.episodes", size_field([](RunConfig& c) -> std::size_t& { return c.data.episodes; }));
    add("data.gamma", double_field([](RunConfig& c) -> double& { return c.data.gamma; }));
    add("data.store_observations", bool_field([](RunConfig& c) -> bool& { return c.data.store_observations; }));
    add("data.gate", double_field([](RunConfig& c) -> double& { return c.data.gate; }));

    add("teacher.offline_steps", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.offline_steps; }));
    add("teacher.online_iterations", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.online_iterations; }));
    add("teacher.rollouts_per_iteration", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.rollouts_per_iteration; }));
    add("teacher.steps_per_iteration", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.steps_per_iteration; }));
    add("teacher.batch_size", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.batch_size; }));
    add("teacher.eval_interval", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.eval_interval; }));
    add("teacher.eval_trials", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.eval_trials; }));
    add("teacher.lr", double_field([](RunConfig& c) -> double& { return c.teacher.schedule.lr; }));
    add("teacher.weight_decay", double_field([](RunConfig& c) -> double& { return c.teacher.schedule.weight_decay; }));
    add("teacher.grad_clip", double_field([](RunConfig& c) -> double& { return c.teacher.schedule.grad_clip; }));
    add("teacher.warmup_steps", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.schedule.warmup_steps; }));
    add("teacher.buffer_capacity", size_field([](RunConfig& c) -> std::size_t& { return c.teacher.buffer_capacity; }));
    add("teacher.target_percentile", double_field([](RunConfig& c) -> double& { return c.teacher.target_percentile; }));
    add("teacher.gate_ratio", double_field([](RunConfig& c) -> double& { return c.teacher.gate_ratio; }));

    add("encoder.channels",
        {[](RunConfig& c, const std::string& k, const std::string& v) {
           const auto xs = to_list<std::uint64_t>(k, v, &to_u64);
           c.encoder.model.channels.assign(xs.begin(), xs.end());
         },
         [](const RunConfig& c) { return join(c.encoder.model.channels); }});
    add("encoder.epochs", size_field([](RunConfig& c) -> std::size_t& { return c.encoder.train.epochs; }));
    add("encoder.batch_size", size_field([](RunConfig& c) -> std::size_t& { return c.encoder.train.batch_size; }));
    add("encoder.frames_per_epoch", size_field([](RunConfig& c) -> std::size_t& { return c.encoder.train.frames_per_epoch; }));
    add("encoder.lr", double_field([](RunConfig& c) -> double& { return c.encoder.train.lr; }));
    add("encoder.weight_decay", double_field([](RunConfig& c) -> double& { return c.encoder.train.weight_decay; }));
    add("encoder.val_fraction", double_field([](RunConfig& c) -> double& { return c.encoder.train.val_fraction; }));
    add("encoder.max_episodes", size_field([](RunConfig& c) -> std::size_t& { return c.encoder.max_episodes; }));
    add("encoder.augment", bool_field([](RunConfig& c) -> bool& { return c.encoder.augment.enabled; }));
    add("encoder.flip_prob", double_field([](RunConfig& c) -> double& { return c.encoder.augment.flip_prob; }));
    add("encoder.crop_pad", size_field([](RunConfig& c) -> std::size_t& { return c.encoder.augment.crop_pad; }));

    add("distill.epochs", size_field([](RunConfig& c) -> std::size_t& { return c.distill.run.epochs; }));
    add("distill.steps_per_epoch", size_field([](RunConfig& c) -> std::size_t& { return c.distill.run.steps_per_epoch; }));
    add("distill.episodes_per_epoch", size_field([](RunConfig& c) -> std::size_t& { return c.distill.run.episodes_per_epoch; }));
    add("distill.batch_size", size_field([](RunConfig& c) -> std::size_t& { return c.distill.run.batch_size; }));
    add("distill.eval_trials", size_field([](RunConfig& c) -> std::size_t& { return c.distill.run.eval_trials; }));
    add("distill.lr", double_field([](RunConfig& c) -> double& { return c.distill.run.lr; }));
    add("distill.weight_decay", double_field([](RunConfig& c) -> double& { return c.distill.run.weight_decay; }));
    add("distill.grad_clip", double_field([](RunConfig& c) -> double& { return c.distill.run.grad_clip; }));
    add("distill.sigma", double_field([](RunConfig& c) -> double& { return c.distill.run.sigma; }));
    add("distill.use_augmented_encoder", bool_field([](RunConfig& c) -> bool& { return c.distill.run.use_augmented_encoder; }));
    add("distill.use_weight_copy", bool_field([](RunConfig& c) -> bool& { return c.distill.run.use_weight_copy; }));
    add("distill.use_distillation", bool_field([](RunConfig& c) -> bool& { return c.distill.run.use_distillation; }));
    add("distill.gate_ratio", double_field([](RunConfig& c) -> double& { return c.distill.gate_ratio; }));

    add("eval.trials", size_field([](RunConfig& c) -> std::size_t& { return c.eval.trials; }));
    add("eval.sigma", double_field([](RunConfig& c) -> double& { return c.eval.sigma; }));
    add("eval.noise_grid",
        {[](RunConfig& c, const std::string& k, const std::string& v) { c.eval.noise_grid = to_list<double>(k, v, &to_double); },
         [](const RunConfig& c) { return join(c.eval.noise_grid); }});

    add("paths.dataset", string_field([](RunConfig& c) -> std::string& { return c.paths.dataset; }));
    add("paths.teacher", string_field([](RunConfig& c) -> std::string& { return c.paths.teacher; }));
    add("paths.encoder", string_field([](RunConfig& c) -> std::string& { return c.paths.encoder; }));
    add("paths.encoder_noaug", string_field([](RunConfig& c) -> std::string& { return c.paths.encoder_noaug; }));
    add("paths.student", string_field([](RunConfig& c) -> std::string& { return c.paths.student; }));
    return f;
  }();
  return fields;
}

const Field& field(const std::string& key) {
  for (const auto& [name, f] : registry())
    if (name == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig RunConfig::make(Preset p) {
  RunConfig c;
  c.preset = p;
  if (p == Preset::Paper) {
    c.model = model::DtConfig::paper(c.model.state_dim, c.model.action_dim);
    c.teacher.schedule = train::TrainSchedule::paper();
    c.distill.run.steps_per_epoch = 100;
    c.encoder.train.frames_per_epoch = 0;
  } else {
    c.encoder.train.frames_per_epoch = 4000;
  }
  return c;
}

model::DtConfig RunConfig::model_config() const {
  model::DtConfig m = model;
  const auto spec = task_spec();
  m.state_dim = spec.state_dim();
  m.action_dim = spec.action_dim();
  return m;
}

std::string RunConfig::out_file(const std::string& name) const { return out + "/" + name; }
std::string RunConfig::dataset_path() const { return paths.dataset.empty() ? out_file("dataset.bin") : paths.dataset; }
std::string RunConfig::teacher_path() const { return paths.teacher.empty() ? out_file("teacher.ckpt") : paths.teacher; }
std::string RunConfig::encoder_path(bool augmented) const {
  if (augmented) return paths.encoder.empty() ? out_file("encoder.ckpt") : paths.encoder;
  return paths.encoder_noaug.empty() ? out_file("encoder_noaug.ckpt") : paths.encoder_noaug;
}
std::string RunConfig::student_path() const {
  return paths.student.empty() ? out_file("student_" + distill.run.variant() + ".ckpt") : paths.student;
}

std::uint64_t RunConfig::stage_seed(const std::string& stage) const { return derive_seed(seed, stage); }

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, value); }
std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> ks = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : registry()) out.push_back(name);
    return out;
  }();
  return ks;
}

void RunConfig::validate() const {
  model_config().validate();
  teacher.schedule.validate();
  distill.run.validate();
  if (data.episodes == 0) throw ConfigError("data.episodes must be >= 1");
  if (!(data.gamma > 0.0 && data.gamma <= 1.0)) throw ConfigError("data.gamma must be in (0, 1]");
  if (!(teacher.target_percentile >= 0.0 && teacher.target_percentile <= 1.0))
    throw ConfigError("teacher.target_percentile must be in [0, 1]");
  if (encoder.model.channels.empty()) throw ConfigError("encoder.channels must not be empty");
  if (encoder.train.epochs == 0) throw ConfigError("encoder.epochs must be >= 1");
  if (!(encoder.train.val_fraction > 0.0 && encoder.train.val_fraction < 1.0))
    throw ConfigError("encoder.val_fraction must be in (0, 1)");
  if (!(encoder.augment.flip_prob >= 0.0 && encoder.augment.flip_prob <= 1.0))
    throw ConfigError("encoder.flip_prob must be in [0, 1]");
  if (eval.trials == 0) throw ConfigError("eval.trials must be >= 1");
  if (!(eval.sigma >= 0.0)) throw ConfigError("eval.sigma must be >= 0");
  if (eval.noise_grid.empty()) throw ConfigError("eval.noise_grid must not be empty");
  if (out.empty()) throw ConfigError("out must not be empty");
}

std::string RunConfig::resolved() const {
  std::string s;
  for (const auto& [name, f] : registry()) s += name + " = " + f.get(*this) + "\n";
  return s;
}

Assignment parse_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + s + "'");
  Assignment a{trim(s.substr(0, eq)), trim(s.substr(eq + 1))};
  if (a.first.empty()) throw ConfigError("empty key in '" + s + "'");
  return a;
}

std::vector<Assignment> parse_text(const std::string& text) {
  std::vector<Assignment> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(ss, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (trim(line).empty()) continue;
    try {
      out.push_back(parse_assignment(line));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

RunConfig resolve(const std::string& preset_flag, const std::vector<Assignment>& file,
                  const std::vector<Assignment>& overrides) {
  std::string preset;
  for (const auto& [k, v] : file)
    if (k == "preset") preset = v;
  for (const auto& [k, v] : overrides)
    if (k == "preset") preset = v;
  if (!preset_flag.empty()) preset = preset_flag;
  RunConfig c = RunConfig::make(preset.empty() ? Preset::Desk : parse_preset(preset));
  for (const auto& [k, v] : file)
    if (k != "preset") c.set(k, v);
  for (const auto& [k, v] : overrides)
    if (k != "preset") c.set(k, v);
  c.validate();
  return c;
}

}  // namespace foldkd::cfg
