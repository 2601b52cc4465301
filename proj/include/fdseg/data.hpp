#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fdseg/losses.hpp"

namespace fdseg {

/// Generator parameters for one synthetic acquisition site.
struct SiteConfig {
  std::string name = "base";
  double fg_intensity_mean = 0.75;
  double bg_intensity_mean = 0.35;
  double texture_sigma = 0.05;
  int blur_radius = 0;
  int min_shapes = 1;
  int max_shapes = 3;
  int image_height = 64;
  int image_width = 64;

  /// Throws ConfigError (e.g. fg == bg, sizes < 4, bad shape range).
  void validate() const;
};

SiteConfig default_base_site();
/// Lower contrast, noisier, blurred: the distribution-shifted site.
SiteConfig default_novel_site();

std::string site_to_json(const SiteConfig& site);
SiteConfig site_from_json(const std::string& text);

struct SiteSample {
  int id = 0;
  Source source = Source::Base;
  int height = 0;
  int width = 0;
  std::vector<float> image;  // (h, w) in [0, 1]
  std::vector<float> mask;   // (h, w) in {0, 1}

  /// Throws ValidationError unless the mask holds both classes.
  void validate() const;
};

/// Deterministic per (config, n, seed). Sample i is drawn from its own stream
/// derived from (seed, i), so generation order does not matter.
std::vector<SiteSample> generate_site(const SiteConfig& config, int n, std::uint64_t seed,
                                      Source source = Source::Base);

/// image + N(0, sigma^2) per pixel, clipped to [0, 1].
std::vector<float> add_gaussian_noise(std::span<const float> image, double sigma, std::uint64_t seed);
SiteSample add_gaussian_noise(const SiteSample& sample, double sigma, std::uint64_t seed);

/// Noise levels of the robustness sweep.
inline constexpr std::array<double, 4> kNoiseSigmas = {0.05, 0.10, 0.15, 0.20};

/// [original, hflip, vflip, rot+90 (counter-clockwise), rot-90].
std::vector<SiteSample> augment(const SiteSample& sample);
std::vector<SiteSample> augment_all(const std::vector<SiteSample>& samples);

SiteSample hflip(const SiteSample& s);
SiteSample vflip(const SiteSample& s);
SiteSample rot90(const SiteSample& s, bool counter_clockwise);

struct DatasetSplit {
  std::vector<SiteSample> train;
  std::vector<SiteSample> test;
  std::vector<SiteSample> val;
};

/// Seeded shuffle, then contiguous partition. Sizes are floor(n * ratio) for
/// test and val; the remainder goes to train.
DatasetSplit split_dataset(std::vector<SiteSample> samples, std::array<double, 3> ratios = {0.7, 0.2, 0.1},
                           std::uint64_t seed = 0);

// PGM interchange -----------------------------------------------------------

/// Binary 8-bit PGM ("P5", maxval 255). Pixel values scaled by 1/255.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
};

GrayImage parse_pgm(const std::string& bytes);
std::string encode_pgm(const GrayImage& image);

SiteSample load_pgm_pair(const std::filesystem::path& image_path, const std::filesystem::path& mask_path, int id = 0,
                         Source source = Source::Base);
/// Writes images/<id>.pgm and masks/<id>.pgm under `dir`; returns both paths.
std::pair<std::filesystem::path, std::filesystem::path> save_pgm(const SiteSample& sample,
                                                                const std::filesystem::path& dir);

/// <root>/<site>/{images,masks}/<id>.pgm plus <root>/<site>/site.json.
void save_site_dataset(const std::filesystem::path& root, const SiteConfig& site,
                       const std::vector<SiteSample>& samples);
std::pair<SiteConfig, std::vector<SiteSample>> load_site_dataset(const std::filesystem::path& site_dir,
                                                                 Source source = Source::Base);

/// SplitMix64 finaliser, used to derive independent streams.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0);

}  // namespace fdseg
