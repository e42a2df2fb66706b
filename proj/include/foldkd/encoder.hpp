#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "foldkd/chain_env.hpp"
#include "foldkd/checkpoint.hpp"
#include "foldkd/dataset.hpp"
#include "foldkd/rng.hpp"
#include "foldkd/tensor.hpp"

namespace foldkd::vision {

// Four stride-2 3x3 convolutions (pad 1) with ReLU, then one linear map to
// the reduced state. 32x32 input ends as channels.back() x 2 x 2.
struct EncoderConfig {
  std::size_t state_dim = 8;
  std::vector<std::size_t> channels{16, 32, 64, 64};
  bool operator==(const EncoderConfig&) const = default;
};

class EncoderModel {
 public:
  EncoderModel(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }
  ad::ParamMap& params() { return params_; }
  const ad::ParamMap& params() const { return params_; }

  // Regression targets are standardized with these; encode() undoes it.
  std::vector<double>& target_mean() { return target_mean_; }
  std::vector<double>& target_std() { return target_std_; }
  const std::vector<double>& target_mean() const { return target_mean_; }
  const std::vector<double>& target_std() const { return target_std_; }

  // images [N, 3, 32, 32] -> standardized predictions [N, state_dim]
  ad::Tensor forward(const ad::Tensor& images) const;

 private:
  EncoderConfig config_;
  ad::ParamMap params_;
  std::vector<double> target_mean_;
  std::vector<double> target_std_;
};

// Row-major HWC pixels -> CHW, as the convolution expects.
std::vector<double> to_chw(std::span<const double> hwc);

// Deterministic state estimate in raw units. Throws DimensionError unless
// the image holds 32x32x3 values.
std::vector<double> encode(const EncoderModel& model, std::span<const double> image);
std::vector<std::vector<double>> encode_batch(const EncoderModel& model,
                                              std::span<const std::span<const double>> images);

struct AugmentationSpec {
  bool enabled = true;
  double flip_prob = 0.5;
  std::size_t crop_pad = 2;  // zero-pad each side, then crop back to 32x32
};

// Horizontal mirror of an HWC image.
std::vector<double> flip_image(std::span<const double> hwc);
// Zero-pads by `pad` and crops 32x32 at offset (dy, dx), each in [0, 2*pad].
std::vector<double> crop_image(std::span<const double> hwc, std::size_t pad, std::size_t dy,
                               std::size_t dx);
// Mirrors x about the workspace centre and swaps the two endpoint
// keypoints. Applying it twice returns the input exactly wherever
// 2c - x is exact (x within [c, 4c]); elsewhere within one rounding of 2c.
sim::ReducedState flip_state(std::span<const double> state, const sim::TaskSpec& task);

struct EncoderTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  // Frames drawn per epoch; 0 means every training frame.
  std::size_t frames_per_epoch = 0;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double val_fraction = 0.2;  // whole episodes held out
  std::uint64_t seed = 0;
};

struct EncoderCurves {
  std::vector<double> train_loss;  // mean over the epoch's batches
  std::vector<double> val_loss;    // standardized MSE on held-out episodes
  std::vector<double> val_rmse;    // per coordinate, raw units, after the last epoch
  std::vector<double> state_std;   // per coordinate std of held-out true states
};

// Episodes [0, n_val) of the shuffled order are held out.
struct EncoderSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
EncoderSplit split_episodes(std::size_t n_episodes, double val_fraction, std::uint64_t seed);

// Supervised MSE regression on (image, state) pairs with augmentation;
// dataset tensors are never modified. Throws NumericError on a NaN loss.
EncoderCurves train_encoder(EncoderModel& model, const data::Dataset& dataset,
                            const AugmentationSpec& aug, const EncoderTrainConfig& cfg);

// Standardized MSE of the model over the given episodes.
double validation_loss(const EncoderModel& model, const data::Dataset& dataset,
                       std::span<const std::size_t> episodes);
std::vector<double> validation_rmse(const EncoderModel& model, const data::Dataset& dataset,
                                    std::span<const std::size_t> episodes);

ckpt::Checkpoint pack_encoder(const EncoderModel& m, const ad::AdamW* optimizer = nullptr);
EncoderModel unpack_encoder(const ckpt::Checkpoint& c);

}  // namespace foldkd::vision
