#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fdseg/tensor.hpp"

namespace fdseg {

struct UNetConfig {
  int depth = 2;
  int base_channels = 8;
  int in_channels = 1;
  int kernel = 3;
  int input_height = 64;
  int input_width = 64;

  /// Throws ConfigError on invalid values, including input sizes that are
  /// not divisible by 2^depth.
  void validate() const;
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct Param {
  std::string name;
  Shape shape;
  std::vector<float> value;
};

using ParamSet = std::vector<Param>;

std::size_t parameter_count(const ParamSet& params);

template <typename T>
struct FeatureTap {
  std::string name;  // enc_1..enc_D, bottleneck, dec_1..dec_D
  Tensor<T> activation;
  int downsample_factor = 1;
};

template <typename T>
struct ForwardResult {
  Tensor<T> prediction;  // (n,h,w,1), sigmoid output
  std::vector<FeatureTap<T>> taps;
  std::vector<Tensor<T>> params;  // tape handles, declaration order
};

/// Encoder / bottleneck / decoder U-Net with concatenation skips. Each level
/// holds two 3x3 conv+ReLU blocks; decoder upsampling is nearest-neighbour
/// followed by a learned 1x1 conv; the head is a 1x1 conv + sigmoid.
class UNet {
 public:
  UNet() = default;
  UNet(UNetConfig config, ParamSet params);

  const UNetConfig& config() const noexcept { return config_; }
  const ParamSet& params() const noexcept { return params_; }
  ParamSet& params() noexcept { return params_; }

  /// Tap names in output order.
  std::vector<std::string> tap_names() const;
  /// Downsampling factor of each tap relative to the input.
  std::vector<int> tap_factors() const;

  /// `images` must have shape (n, input_height, input_width, in_channels).
  template <typename T>
  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& images, bool params_require_grad = true) const;

  /// Convenience: forward pass on raw images, returns prediction values.
  std::vector<float> predict(std::span<const float> images, int batch) const;

 private:
  UNetConfig config_;
  ParamSet params_;
};

/// Kernels ~ U[-s, s] with s = sqrt(6 / (fan_in + fan_out)); biases zero.
UNet init_params(const UNetConfig& config, std::uint64_t seed);

/// Binary checkpoint: magic "FDSEGCKP", u32 length + config JSON, u32 tensor
/// count, then per tensor u32 length + {"name","shape"} JSON header and the
/// values as little-endian float32.
void save_checkpoint(const UNet& model, const std::filesystem::path& path);
UNet load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const UNetConfig& config);
UNetConfig config_from_json(const std::string& json);

}  // namespace fdseg
