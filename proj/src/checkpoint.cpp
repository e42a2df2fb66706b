#include "foldkd/checkpoint.hpp"

#include <algorithm>
#include <charconv>

#include "foldkd/binio.hpp"
#include "foldkd/errors.hpp"
#include "foldkd/rng.hpp"

namespace foldkd::ckpt {

namespace {

constexpr char kMagic[8] = {'F', 'K', 'D', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t checksum(std::string_view bytes) { return fnv1a64(bytes); }

void write_optimizer(io::Writer& w, const ad::OptimizerState& s) {
  w.f64(s.config.lr);
  w.f64(s.config.weight_decay);
  w.f64(s.config.beta1);
  w.f64(s.config.beta2);
  w.f64(s.config.eps);
  w.u8(s.config.trust_ratio ? 1 : 0);
  w.u64(s.step);
  w.u64(s.first_moment.size());
  for (const auto& [name, m] : s.first_moment) {
    auto it = s.second_moment.find(name);
    if (it == s.second_moment.end() || it->second.size() != m.size())
      throw ContractError("checkpoint: optimizer moments disagree for '" + name + "'");
    w.str(name);
    w.u64(m.size());
    w.f64s(m);
    w.f64s(it->second);
  }
}

ad::OptimizerState read_optimizer(io::Reader& r) {
  ad::OptimizerState s;
  s.config.lr = r.f64();
  s.config.weight_decay = r.f64();
  s.config.beta1 = r.f64();
  s.config.beta2 = r.f64();
  s.config.eps = r.f64();
  s.config.trust_ratio = r.u8() != 0;
  s.step = r.u64();
  const auto n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    auto name = r.str();
    const auto len = r.u64();
    s.first_moment[name] = r.f64s(len);
    s.second_moment[name] = r.f64s(len);
  }
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size())
    throw ConfigError("checkpoint header: bad value '" + text + "' for " + key);
  return v;
}

}  // namespace

std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::Teacher: return "teacher";
    case Kind::Student: return "student";
    case Kind::Encoder: return "encoder";
  }
  return "unknown";
}

const std::string& Checkpoint::get(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return v;
  throw ConfigError("checkpoint header has no '" + key + "'");
}

std::string serialize(const Checkpoint& c) {
  io::Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(c.kind));
  w.u64(c.header.size());
  for (const auto& [k, v] : c.header) {
    w.str(k);
    w.str(v);
  }
  w.u64(c.tensors.size());
  for (const auto& [name, t] : c.tensors) {
    if (ad::numel_of(t.shape) != t.values.size())
      throw DimensionError("checkpoint: tensor '" + name + "' shape does not match its data");
    w.str(name);
    w.u64(t.shape.size());
    for (auto d : t.shape) w.u64(d);
    w.f64s(t.values);
  }
  w.u8(c.optimizer ? 1 : 0);
  if (c.optimizer) write_optimizer(w, *c.optimizer);
  w.u64(c.step);
  w.u64(checksum(w.buffer()));
  return w.take();
}

Checkpoint deserialize(std::string_view bytes) {
  if (bytes.size() < sizeof kMagic + 8)
    throw FormatError("checkpoint: file too short (" + std::to_string(bytes.size()) +
                      " bytes) at byte offset 0");
  if (!std::equal(kMagic, kMagic + 8, bytes.data()))
    throw FormatError("checkpoint: bad magic bytes at byte offset 0");
  const auto body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (stored != checksum(body))
    throw ChecksumError("checkpoint: checksum mismatch (content corrupted) at byte offset " +
                        std::to_string(body.size()));

  io::Reader r(body, "checkpoint");
  char magic[8];
  r.bytes(magic, 8);
  const auto version = r.u32();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  Checkpoint c;
  const auto kind = r.u32();
  if (kind > 2) r.fail("unknown model kind " + std::to_string(kind));
  c.kind = static_cast<Kind>(kind);
  const auto nh = r.u64();
  for (std::uint64_t i = 0; i < nh; ++i) {
    auto k = r.str();
    auto v = r.str();
    c.header.emplace_back(std::move(k), std::move(v));
  }
  const auto nt = r.u64();
  for (std::uint64_t i = 0; i < nt; ++i) {
    auto name = r.str();
    StoredTensor t;
    const auto rank = r.u64();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.u64());
      numel *= t.shape.back();
    }
    t.values = r.f64s(numel);
    c.tensors.emplace(std::move(name), std::move(t));
  }
  if (r.u8()) c.optimizer = read_optimizer(r);
  c.step = r.u64();
  if (!r.done()) r.fail("trailing bytes");
  return c;
}

void save(const Checkpoint& c, const std::string& path) {
  io::write_file_atomic(path, serialize(c));
}

Checkpoint load(const std::string& path) {
  try {
    return deserialize(io::read_file(path));
  } catch (const FormatError& e) {
    // Keep the dynamic type (checksum vs structure) while naming the file.
    if (dynamic_cast<const ChecksumError*>(&e)) throw ChecksumError(path + ": " + e.what());
    throw FormatError(path + ": " + e.what());
  }
}

Checkpoint load(const std::string& path, Kind expected) {
  auto c = load(path);
  if (c.kind != expected)
    throw ConfigError(path + ": expected a " + std::string(kind_name(expected)) +
                      " checkpoint, found " + std::string(kind_name(c.kind)));
  return c;
}

std::map<std::string, StoredTensor> store_params(const ad::ParamMap& params) {
  std::map<std::string, StoredTensor> out;
  for (const auto& [name, t] : params)
    out[name] = {t.shape(), {t.data().begin(), t.data().end()}};
  return out;
}

void restore_params(const std::map<std::string, StoredTensor>& stored, ad::ParamMap& params) {
  for (auto& [name, t] : params) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ArchitectureError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape != t.shape())
      throw ArchitectureError("parameter '" + name + "' has shape " +
                              ad::shape_str(it->second.shape) + " in the checkpoint, model expects " +
                              ad::shape_str(t.shape()));
    std::copy(it->second.values.begin(), it->second.values.end(), t.mutable_data().begin());
    t.zero_grad();
  }
  for (const auto& [name, t] : stored)
    if (!params.count(name) && name.rfind("normalizer.", 0) != 0)
      throw ArchitectureError("checkpoint has unexpected parameter '" + name + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

Header model_header(const model::DtConfig& c) {
  auto u = [](std::size_t v) { return std::to_string(v); };
  return {{"model.state_dim", u(c.state_dim)},
          {"model.action_dim", u(c.action_dim)},
          {"model.embed_dim", u(c.embed_dim)},
          {"model.n_layers", u(c.n_layers)},
          {"model.n_heads", u(c.n_heads)},
          {"model.context", u(c.context)},
          {"model.max_episode_len", u(c.max_episode_len)},
          {"model.mlp_ratio", u(c.mlp_ratio)},
          {"model.entropy_weight", format_double(c.entropy_weight)},
          {"model.dropout", format_double(c.dropout)}};
}

model::DtConfig model_config_from(const Checkpoint& c) {
  model::DtConfig cfg;
  auto u = [&](const char* k) { return parse_number<std::size_t>(k, c.get(k)); };
  auto d = [&](const char* k) { return parse_number<double>(k, c.get(k)); };
  cfg.state_dim = u("model.state_dim");
  cfg.action_dim = u("model.action_dim");
  cfg.embed_dim = u("model.embed_dim");
  cfg.n_layers = u("model.n_layers");
  cfg.n_heads = u("model.n_heads");
  cfg.context = u("model.context");
  cfg.max_episode_len = u("model.max_episode_len");
  cfg.mlp_ratio = u("model.mlp_ratio");
  cfg.entropy_weight = d("model.entropy_weight");
  cfg.dropout = d("model.dropout");
  cfg.validate();
  return cfg;
}

Checkpoint pack_model(const model::DtModel& m, Kind kind, const ad::AdamW* optimizer,
                      std::uint64_t step) {
  if (kind == Kind::Encoder) throw ContractError("pack_model: a policy cannot be an encoder");
  Checkpoint c;
  c.kind = kind;
  c.header = model_header(m.config());
  c.tensors = store_params(m.params());
  const auto& n = m.normalizer();
  c.tensors["normalizer.state_mean"] = {{n.state_mean.size()}, n.state_mean};
  c.tensors["normalizer.state_std"] = {{n.state_std.size()}, n.state_std};
  c.tensors["normalizer.scalars"] = {{2}, {n.return_scale, n.target_return}};
  if (optimizer) c.optimizer = optimizer->state();
  c.step = step;
  return c;
}

model::DtModel unpack_model(const Checkpoint& c) {
  if (c.kind == Kind::Encoder) throw ConfigError("checkpoint holds an encoder, not a policy");
  model::DtModel m(model_config_from(c), 0);
  restore_params(c.tensors, m.params());
  auto need = [&](const std::string& name, std::size_t n) -> const std::vector<double>& {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end() || it->second.values.size() != n)
      throw FormatError("checkpoint: missing or malformed '" + name + "'");
    return it->second.values;
  };
  auto& norm = m.normalizer();
  norm.state_mean = need("normalizer.state_mean", m.config().state_dim);
  norm.state_std = need("normalizer.state_std", m.config().state_dim);
  const auto& s = need("normalizer.scalars", 2);
  norm.return_scale = s[0];
  norm.target_return = s[1];
  return m;
}

}  // namespace foldkd::ckpt
