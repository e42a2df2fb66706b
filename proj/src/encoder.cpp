#include "foldkd/encoder.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "foldkd/errors.hpp"
#include "foldkd/ops.hpp"
#include "foldkd/optim.hpp"

namespace foldkd::vision {

using ad::Tensor;
using sim::Observation;

namespace {

// Coordinates that barely move (a pinned end, a particle resting on the
// table) would otherwise blow up the standardized loss. 1 mm is well below
// one pixel of the 32x32 view.
constexpr double kTargetStdFloor = 1e-3;

constexpr std::size_t kH = Observation::kHeight, kW = Observation::kWidth,
                      kC = Observation::kChannels;

std::string conv(std::size_t i) { return "conv" + std::to_string(i); }

Tensor uniform(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(ad::numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::size_t final_side(std::size_t layers) {
  std::size_t s = kH;
  for (std::size_t i = 0; i < layers; ++i) s = (s + 2 - 3) / 2 + 1;
  return s;
}

void check_image(std::span<const double> image) {
  if (image.size() != Observation::kSize)
    throw DimensionError("encoder: image has " + std::to_string(image.size()) +
                         " values, expected 32x32x3 = " + std::to_string(Observation::kSize));
}

struct Frame {
  std::size_t episode;
  std::size_t t;
};

std::vector<Frame> frames_of(const data::Dataset& ds, std::span<const std::size_t> episodes) {
  std::vector<Frame> out;
  for (auto e : episodes) {
    const auto& tr = ds.trajectories.at(e);
    if (!tr.has_observations())
      throw ContractError("encoder: episode " + std::to_string(e) + " has no stored images");
    for (std::size_t t = 0; t < tr.length(); ++t) out.push_back({e, t});
  }
  return out;
}

// Standardized MSE summed over coordinates, averaged over frames; also
// accumulates per-coordinate squared error in raw units.
double eval_frames(const EncoderModel& model, const data::Dataset& ds,
                   const std::vector<Frame>& frames, std::vector<double>* sq_raw) {
  ad::NoGradGuard guard;
  const std::size_t d = model.config().state_dim;
  const std::size_t chunk = 128;
  double total = 0.0;
  if (sq_raw) sq_raw->assign(d, 0.0);
  for (std::size_t start = 0; start < frames.size(); start += chunk) {
    const std::size_t n = std::min(chunk, frames.size() - start);
    std::vector<double> x;
    x.reserve(n * Observation::kSize);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = frames[start + i];
      const auto chw = to_chw(ds.trajectories[f.episode].observation(f.t));
      x.insert(x.end(), chw.begin(), chw.end());
    }
    const auto out = model.forward(Tensor::from({n, kC, kH, kW}, std::move(x)));
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = frames[start + i];
      const auto s = ds.trajectories[f.episode].state(f.t);
      for (std::size_t j = 0; j < d; ++j) {
        const double target = (s[j] - model.target_mean()[j]) / model.target_std()[j];
        const double e = out.at(i * d + j) - target;
        total += e * e;
        if (sq_raw) (*sq_raw)[j] += e * e * model.target_std()[j] * model.target_std()[j];
      }
    }
  }
  return total / static_cast<double>(std::max<std::size_t>(frames.size(), 1) * d);
}

}  // namespace

EncoderModel::EncoderModel(EncoderConfig config, std::uint64_t seed) : config_(std::move(config)) {
  if (config_.state_dim == 0 || config_.channels.empty())
    throw ConfigError("encoder: state_dim and channels must be non-empty");
  Rng rng(derive_seed(seed, "encoder-init"));
  std::size_t in = kC;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    const std::size_t out = config_.channels[i];
    if (out == 0) throw ConfigError("encoder: zero channel count");
    params_[conv(i) + ".weight"] = uniform({out, in, 3, 3}, in * 9, rng);
    params_[conv(i) + ".bias"] = uniform({out}, in * 9, rng);
    in = out;
  }
  const std::size_t side = final_side(config_.channels.size());
  const std::size_t flat = in * side * side;
  params_["proj.weight"] = uniform({flat, config_.state_dim}, flat, rng);
  params_["proj.bias"] = uniform({config_.state_dim}, flat, rng);
  target_mean_.assign(config_.state_dim, 0.0);
  target_std_.assign(config_.state_dim, 1.0);
}

Tensor EncoderModel::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != kC || images.dim(2) != kH || images.dim(3) != kW)
    throw DimensionError("encoder: expected [N,3,32,32], got " + ad::shape_str(images.shape()));
  Tensor x = images;
  for (std::size_t i = 0; i < config_.channels.size(); ++i)
    x = ad::relu(ad::conv2d(x, params_.at(conv(i) + ".weight"), params_.at(conv(i) + ".bias"), 2, 1));
  const std::size_t n = images.dim(0);
  x = ad::reshape(x, {n, x.numel() / n});
  return ad::add_bias(ad::matmul(x, params_.at("proj.weight")), params_.at("proj.bias"));
}

std::vector<double> to_chw(std::span<const double> hwc) {
  check_image(hwc);
  std::vector<double> out(Observation::kSize);
  for (std::size_t y = 0; y < kH; ++y)
    for (std::size_t x = 0; x < kW; ++x)
      for (std::size_t c = 0; c < kC; ++c) out[(c * kH + y) * kW + x] = hwc[(y * kW + x) * kC + c];
  return out;
}

std::vector<std::vector<double>> encode_batch(const EncoderModel& model,
                                              std::span<const std::span<const double>> images) {
  if (images.empty()) return {};
  std::vector<double> x;
  x.reserve(images.size() * Observation::kSize);
  for (const auto& im : images) {
    const auto chw = to_chw(im);
    x.insert(x.end(), chw.begin(), chw.end());
  }
  ad::NoGradGuard guard;
  const auto out = model.forward(Tensor::from({images.size(), kC, kH, kW}, std::move(x)));
  const std::size_t d = model.config().state_dim;
  std::vector<std::vector<double>> states(images.size(), std::vector<double>(d));
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      states[i][j] = out.at(i * d + j) * model.target_std()[j] + model.target_mean()[j];
  return states;
}

std::vector<double> encode(const EncoderModel& model, std::span<const double> image) {
  return encode_batch(model, std::span<const std::span<const double>>(&image, 1))[0];
}

std::vector<double> flip_image(std::span<const double> hwc) {
  check_image(hwc);
  std::vector<double> out(Observation::kSize);
  for (std::size_t y = 0; y < kH; ++y)
    for (std::size_t x = 0; x < kW; ++x)
      for (std::size_t c = 0; c < kC; ++c)
        out[(y * kW + x) * kC + c] = hwc[(y * kW + (kW - 1 - x)) * kC + c];
  return out;
}

std::vector<double> crop_image(std::span<const double> hwc, std::size_t pad, std::size_t dy,
                               std::size_t dx) {
  check_image(hwc);
  if (dy > 2 * pad || dx > 2 * pad) throw ContractError("crop_image: offset outside the padding");
  std::vector<double> out(Observation::kSize, 0.0);
  for (std::size_t y = 0; y < kH; ++y) {
    const auto sy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pad);
    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(kH)) continue;
    for (std::size_t x = 0; x < kW; ++x) {
      const auto sx = static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pad);
      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(kW)) continue;
      for (std::size_t c = 0; c < kC; ++c)
        out[(y * kW + x) * kC + c] = hwc[(static_cast<std::size_t>(sy) * kW + sx) * kC + c];
    }
  }
  return out;
}

sim::ReducedState flip_state(std::span<const double> s, const sim::TaskSpec& task) {
  if (s.size() != task.state_dim())
    throw DimensionError("flip_state: state has " + std::to_string(s.size()) + " values, task expects " +
                         std::to_string(task.state_dim()));
  const double c2 = 2.0 * task.workspace_center_x();
  sim::ReducedState out(s.begin(), s.end());
  for (std::size_t i = 0; i < out.size(); i += 2) out[i] = c2 - out[i];
  // keypoints: end0 (0,1), mid (2,3), end1 (4,5), pickers after
  std::swap(out[0], out[4]);
  std::swap(out[1], out[5]);
  return out;
}

EncoderSplit split_episodes(std::size_t n, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("encoder: val_fraction must be in (0, 1)");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "encoder-split"));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(val_fraction * n)));
  if (n_val >= n) throw ConfigError("encoder: need at least two episodes to hold one out");
  EncoderSplit s;
  s.val.assign(order.begin(), order.begin() + n_val);
  s.train.assign(order.begin() + n_val, order.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

double validation_loss(const EncoderModel& model, const data::Dataset& ds,
                       std::span<const std::size_t> episodes) {
  return eval_frames(model, ds, frames_of(ds, episodes), nullptr);
}

std::vector<double> validation_rmse(const EncoderModel& model, const data::Dataset& ds,
                                    std::span<const std::size_t> episodes) {
  const auto frames = frames_of(ds, episodes);
  std::vector<double> sq;
  eval_frames(model, ds, frames, &sq);
  for (auto& v : sq) v = std::sqrt(v / static_cast<double>(frames.size()));
  return sq;
}

EncoderCurves train_encoder(EncoderModel& model, const data::Dataset& ds,
                            const AugmentationSpec& aug, const EncoderTrainConfig& cfg) {
  const std::size_t d = model.config().state_dim;
  if (ds.state_dim() != d)
    throw ConfigError("encoder: dataset state_dim " + std::to_string(ds.state_dim()) +
                      " differs from encoder output " + std::to_string(d));
  if (cfg.epochs == 0 || cfg.batch_size == 0) throw ConfigError("encoder: epochs and batch_size must be >= 1");
  const auto split = split_episodes(ds.trajectories.size(), cfg.val_fraction, cfg.seed);
  const auto train = frames_of(ds, split.train);
  const auto val = frames_of(ds, split.val);

  // Standardize over the targets the encoder will actually be fit to, which
  // include mirrored states when flipping is on.
  const bool flips = aug.enabled && aug.flip_prob > 0.0;
  std::vector<double> train_states;
  for (const auto& f : train) {
    const auto s = ds.trajectories[f.episode].state(f.t);
    train_states.insert(train_states.end(), s.begin(), s.end());
    if (flips) {
      const auto m = flip_state(s, ds.task);
      train_states.insert(train_states.end(), m.begin(), m.end());
    }
  }
  auto stats = data::compute_norm_stats(train_states, d);
  for (auto& v : stats.std) v = std::max(v, kTargetStdFloor);
  model.target_mean() = stats.mean;
  model.target_std() = stats.std;

  ad::OptimizerConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  ad::AdamW opt(oc);
  Rng rng(derive_seed(cfg.seed, "encoder-train"));
  std::bernoulli_distribution flip(aug.flip_prob);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * aug.crop_pad);

  EncoderCurves curves;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per_epoch =
      cfg.frames_per_epoch == 0 ? train.size() : std::min(cfg.frames_per_epoch, train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < per_epoch; start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, per_epoch - start);
      std::vector<double> x, y;
      x.reserve(n * Observation::kSize);
      y.reserve(n * d);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& f = train[order[start + i]];
        const auto& tr = ds.trajectories[f.episode];
        // Copies; the stored tensors stay untouched.
        std::vector<double> img(tr.observation(f.t).begin(), tr.observation(f.t).end());
        std::vector<double> target(tr.state(f.t).begin(), tr.state(f.t).end());
        if (aug.enabled) {
          if (flip(rng)) {
            img = flip_image(img);
            target = flip_state(target, ds.task);
          }
          if (aug.crop_pad > 0) {
            const auto dy = offset(rng), dx = offset(rng);
            img = crop_image(img, aug.crop_pad, dy, dx);
          }
        }
        const auto chw = to_chw(img);
        x.insert(x.end(), chw.begin(), chw.end());
        for (std::size_t j = 0; j < d; ++j) y.push_back((target[j] - stats.mean[j]) / stats.std[j]);
      }
      const auto pred = model.forward(Tensor::from({n, kC, kH, kW}, std::move(x)));
      const auto diff = ad::sub(pred, Tensor::from({n, d}, std::move(y)));
      const auto loss = ad::mean(ad::mul(diff, diff));
      const double l = loss.item();
      if (!std::isfinite(l))
        throw NumericError("encoder training: non-finite loss at epoch " + std::to_string(epoch + 1));
      ad::zero_grad(model.params());
      ad::backward(loss);
      opt.step(model.params());
      sum += l;
      ++batches;
    }
    curves.train_loss.push_back(sum / static_cast<double>(batches));
    curves.val_loss.push_back(eval_frames(model, ds, val, nullptr));
  }
  curves.val_rmse = validation_rmse(model, ds, split.val);
  std::vector<double> val_states;
  for (const auto& f : val) {
    const auto s = ds.trajectories[f.episode].state(f.t);
    val_states.insert(val_states.end(), s.begin(), s.end());
  }
  curves.state_std = data::compute_norm_stats(val_states, d).std;
  return curves;
}

ckpt::Checkpoint pack_encoder(const EncoderModel& m, const ad::AdamW* optimizer) {
  ckpt::Checkpoint c;
  c.kind = ckpt::Kind::Encoder;
  c.header.emplace_back("encoder.state_dim", std::to_string(m.config().state_dim));
  std::string ch;
  for (auto v : m.config().channels) ch += (ch.empty() ? "" : ",") + std::to_string(v);
  c.header.emplace_back("encoder.channels", ch);
  c.tensors = ckpt::store_params(m.params());
  const std::size_t d = m.config().state_dim;
  c.tensors["normalizer.target_mean"] = {{d}, m.target_mean()};
  c.tensors["normalizer.target_std"] = {{d}, m.target_std()};
  if (optimizer) c.optimizer = optimizer->state();
  return c;
}

EncoderModel unpack_encoder(const ckpt::Checkpoint& c) {
  if (c.kind != ckpt::Kind::Encoder) throw ConfigError("checkpoint does not hold an encoder");
  EncoderConfig cfg;
  auto parse = [](const std::string& text) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size())
      throw FormatError("encoder checkpoint: bad number '" + text + "'");
    return v;
  };
  cfg.state_dim = parse(c.get("encoder.state_dim"));
  cfg.channels.clear();
  const auto& ch = c.get("encoder.channels");
  std::size_t pos = 0;
  while (pos <= ch.size()) {
    const auto comma = std::min(ch.find(',', pos), ch.size());
    cfg.channels.push_back(parse(ch.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  EncoderModel m(cfg, 0);
  ckpt::restore_params(c.tensors, m.params());
  const std::size_t d = cfg.state_dim;
  for (auto [name, dst] : {std::pair{"normalizer.target_mean", &m.target_mean()},
                           std::pair{"normalizer.target_std", &m.target_std()}}) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end() || it->second.values.size() != d)
      throw FormatError(std::string("encoder checkpoint: missing or malformed '") + name + "'");
    *dst = it->second.values;
  }
  return m;
}

}  // namespace foldkd::vision
