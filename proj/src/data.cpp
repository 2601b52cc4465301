#include "fdseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fdseg {

using nlohmann::json;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void SiteConfig::validate() const {
  if (!(std::abs(fg_intensity_mean - bg_intensity_mean) > 0.0)) {
    throw ConfigError("site '" + name + "': foreground and background means must differ");
  }
  for (double v : {fg_intensity_mean, bg_intensity_mean}) {
    if (v < 0.0 || v > 1.0) throw ConfigError("site '" + name + "': intensity means must lie in [0, 1]");
  }
  if (texture_sigma < 0.0) throw ConfigError("site '" + name + "': texture_sigma must be >= 0");
  if (blur_radius < 0) throw ConfigError("site '" + name + "': blur_radius must be >= 0");
  if (min_shapes < 1 || max_shapes < min_shapes) throw ConfigError("site '" + name + "': bad shape count range");
  if (image_height < 4 || image_width < 4) throw ConfigError("site '" + name + "': image must be at least 4x4");
}

SiteConfig default_base_site() { return SiteConfig{}; }

SiteConfig default_novel_site() {
  SiteConfig s;
  s.name = "novel";
  s.fg_intensity_mean = 0.55;
  s.bg_intensity_mean = 0.30;
  s.texture_sigma = 0.12;
  s.blur_radius = 1;
  return s;
}

std::string site_to_json(const SiteConfig& s) {
  json j = {{"name", s.name},
            {"fg_intensity_mean", s.fg_intensity_mean},
            {"bg_intensity_mean", s.bg_intensity_mean},
            {"texture_sigma", s.texture_sigma},
            {"blur_radius", s.blur_radius},
            {"min_shapes", s.min_shapes},
            {"max_shapes", s.max_shapes},
            {"image_height", s.image_height},
            {"image_width", s.image_width}};
  return j.dump(2);
}

SiteConfig site_from_json(const std::string& text) {
  SiteConfig s;
  try {
    const json j = json::parse(text);
    s.name = j.value("name", s.name);
    s.fg_intensity_mean = j.value("fg_intensity_mean", s.fg_intensity_mean);
    s.bg_intensity_mean = j.value("bg_intensity_mean", s.bg_intensity_mean);
    s.texture_sigma = j.value("texture_sigma", s.texture_sigma);
    s.blur_radius = j.value("blur_radius", s.blur_radius);
    s.min_shapes = j.value("min_shapes", s.min_shapes);
    s.max_shapes = j.value("max_shapes", s.max_shapes);
    s.image_height = j.value("image_height", s.image_height);
    s.image_width = j.value("image_width", s.image_width);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("site JSON: ") + e.what());
  }
  s.validate();
  return s;
}

void SiteSample::validate() const {
  if (image.size() != static_cast<std::size_t>(height) * width || mask.size() != image.size()) {
    throw ValidationError("sample " + std::to_string(id) + ": image/mask size does not match " +
                          std::to_string(height) + "x" + std::to_string(width));
  }
  bool fg = false, bg = false;
  for (float m : mask) {
    if (m == 1.0f) fg = true;
    else if (m == 0.0f) bg = true;
    else throw ValidationError("sample " + std::to_string(id) + ": mask is not binary");
  }
  if (!fg || !bg) {
    throw ValidationError("sample " + std::to_string(id) + ": mask must contain both foreground and background");
  }
}

namespace {

std::vector<float> box_blur(const std::vector<float>& img, int h, int w, int r) {
  if (r <= 0) return img;
  std::vector<float> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -r; d <= r; ++d) acc += img[y * w + std::clamp(x + d, 0, w - 1)];
      tmp[y * w + x] = static_cast<float>(acc / (2 * r + 1));
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int d = -r; d <= r; ++d) acc += tmp[std::clamp(y + d, 0, h - 1) * w + x];
      out[y * w + x] = static_cast<float>(acc / (2 * r + 1));
    }
  return out;
}

SiteSample generate_one(const SiteConfig& cfg, int id, std::uint64_t seed, Source source) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(id)));
  const int h = cfg.image_height, w = cfg.image_width;
  const double extent = std::min(h, w);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SiteSample s;
  s.id = id;
  s.source = source;
  s.height = h;
  s.width = w;
  s.mask.assign(static_cast<std::size_t>(h) * w, 0.0f);
  for (int attempt = 0;; ++attempt) {
    std::fill(s.mask.begin(), s.mask.end(), 0.0f);
    const int shapes = std::uniform_int_distribution<int>(cfg.min_shapes, cfg.max_shapes)(rng);
    for (int e = 0; e < shapes; ++e) {
      const double cy = (0.15 + 0.7 * unit(rng)) * h;
      const double cx = (0.15 + 0.7 * unit(rng)) * w;
      const double ry = (0.08 + 0.14 * unit(rng)) * extent;
      const double rx = (0.08 + 0.14 * unit(rng)) * extent;
      const double theta = std::numbers::pi * unit(rng);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          const double u = (dx * ct + dy * st) / rx;
          const double v = (-dx * st + dy * ct) / ry;
          if (u * u + v * v <= 1.0) s.mask[y * w + x] = 1.0f;
        }
    }
    const auto fg = std::count(s.mask.begin(), s.mask.end(), 1.0f);
    if (fg > 0 && fg < static_cast<long>(s.mask.size())) break;
    if (attempt > 1000) throw Error("generate_site: could not draw a two-class mask");
  }
  std::normal_distribution<double> speckle(0.0, 1.0);
  std::vector<float> img(s.mask.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    double v = cfg.bg_intensity_mean + (cfg.fg_intensity_mean - cfg.bg_intensity_mean) * s.mask[i];
    if (cfg.texture_sigma > 0.0) v += cfg.texture_sigma * speckle(rng);
    img[i] = static_cast<float>(v);
  }
  img = box_blur(img, h, w, cfg.blur_radius);
  for (float& v : img) v = std::clamp(v, 0.0f, 1.0f);
  s.image = std::move(img);
  return s;
}

}  // namespace

std::vector<SiteSample> generate_site(const SiteConfig& config, int n, std::uint64_t seed, Source source) {
  config.validate();
  if (n < 1) throw ConfigError("generate_site: n must be >= 1");
  std::vector<SiteSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(generate_one(config, i, seed, source));
  return out;
}

std::vector<float> add_gaussian_noise(std::span<const float> image, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ContractError("add_gaussian_noise: sigma must be >= 0");
  std::vector<float> out(image.begin(), image.end());
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> eps(0.0, sigma);
  for (float& v : out) v = static_cast<float>(std::clamp(v + eps(rng), 0.0, 1.0));
  return out;
}

SiteSample add_gaussian_noise(const SiteSample& sample, double sigma, std::uint64_t seed) {
  SiteSample out = sample;
  out.image = add_gaussian_noise(sample.image, sigma, seed);
  return out;
}

namespace {

template <typename Map>
SiteSample remap(const SiteSample& s, int out_h, int out_w, Map src_index) {
  SiteSample o = s;
  o.height = out_h;
  o.width = out_w;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const std::size_t src = src_index(y, x);
      o.image[y * out_w + x] = s.image[src];
      o.mask[y * out_w + x] = s.mask[src];
    }
  return o;
}

}  // namespace

SiteSample hflip(const SiteSample& s) {
  return remap(s, s.height, s.width, [&](int y, int x) { return static_cast<std::size_t>(y) * s.width + (s.width - 1 - x); });
}

SiteSample vflip(const SiteSample& s) {
  return remap(s, s.height, s.width,
               [&](int y, int x) { return static_cast<std::size_t>(s.height - 1 - y) * s.width + x; });
}

SiteSample rot90(const SiteSample& s, bool counter_clockwise) {
  if (s.height != s.width) throw ContractError("rot90: rotation requires a square image");
  const int n = s.height;
  if (counter_clockwise) {
    // out[y][x] = in[x][n-1-y]
    return remap(s, n, n, [&](int y, int x) { return static_cast<std::size_t>(x) * n + (n - 1 - y); });
  }
  // out[y][x] = in[n-1-x][y]
  return remap(s, n, n, [&](int y, int x) { return static_cast<std::size_t>(n - 1 - x) * n + y; });
}

std::vector<SiteSample> augment(const SiteSample& sample) {
  if (sample.height != sample.width) throw ContractError("augment: rotations require a square image");
  return {sample, hflip(sample), vflip(sample), rot90(sample, true), rot90(sample, false)};
}

std::vector<SiteSample> augment_all(const std::vector<SiteSample>& samples) {
  std::vector<SiteSample> out;
  out.reserve(samples.size() * 5);
  for (const auto& s : samples) {
    auto a = augment(s);
    out.insert(out.end(), a.begin(), a.end());
  }
  return out;
}

DatasetSplit split_dataset(std::vector<SiteSample> samples, std::array<double, 3> ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split_dataset: ratios must sum to 1");
  for (double r : ratios) {
    if (r < 0.0) throw ConfigError("split_dataset: ratios must be non-negative");
  }
  const std::size_t n = samples.size();
  // Small tolerance so that e.g. 10 * 0.2 is not floored to 1.
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[1] + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[2] + 1e-9));
  const std::size_t n_train = n - n_test - n_val;
  if (n_train == 0 || n_test == 0 || n_val == 0) {
    throw ConfigError("split_dataset: " + std::to_string(n) + " samples leave an empty partition");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(samples.begin(), samples.end(), rng);
  DatasetSplit out;
  out.train.assign(std::make_move_iterator(samples.begin()), std::make_move_iterator(samples.begin() + n_train));
  out.test.assign(std::make_move_iterator(samples.begin() + n_train),
                  std::make_move_iterator(samples.begin() + n_train + n_test));
  out.val.assign(std::make_move_iterator(samples.begin() + n_train + n_test), std::make_move_iterator(samples.end()));
  return out;
}

// ---------------------------------------------------------------------------
// PGM

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class PgmCursor {
 public:
  explicit PgmCursor(const std::string& b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (is_space(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  // Reports the token start through `at`.
  int integer(const char* what, std::size_t& at) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    at = start;
    long v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 1'000'000) throw ParseError(std::string("PGM ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("PGM: expected ") + what, pos_);
    return static_cast<int>(v);
  }

  std::size_t pos_ = 0;
  const std::string& b_;
};

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

GrayImage parse_pgm(const std::string& bytes) {
  if (bytes.empty() || bytes[0] != 'P') throw ParseError("PGM: bad magic, expected 'P5'", 0);
  if (bytes.size() < 2 || bytes[1] != '5') throw ParseError("PGM: bad magic, expected 'P5'", 1);
  PgmCursor cur(bytes);
  cur.pos_ = 2;
  if (cur.pos_ >= bytes.size() || !is_space(bytes[cur.pos_])) {
    throw ParseError("PGM: expected whitespace after magic", cur.pos_);
  }
  GrayImage img;
  std::size_t w_at = 0, h_at = 0, max_at = 0;
  img.width = cur.integer("width", w_at);
  img.height = cur.integer("height", h_at);
  if (img.width < 1) throw ParseError("PGM: width must be >= 1", w_at);
  if (img.height < 1) throw ParseError("PGM: height must be >= 1", h_at);
  const int maxval = cur.integer("maxval", max_at);
  if (maxval != 255) throw ParseError("PGM: maxval must be 255, got " + std::to_string(maxval), max_at);
  if (cur.pos_ >= bytes.size() || !is_space(bytes[cur.pos_])) {
    throw ParseError("PGM: expected single whitespace before raster", cur.pos_);
  }
  ++cur.pos_;
  const std::size_t need = static_cast<std::size_t>(img.width) * img.height;
  if (bytes.size() - cur.pos_ < need) {
    throw ParseError("PGM: raster truncated, expected " + std::to_string(need) + " bytes", bytes.size());
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos_),
                    bytes.begin() + static_cast<std::ptrdiff_t>(cur.pos_ + need));
  return img;
}

std::string encode_pgm(const GrayImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

SiteSample load_pgm_pair(const std::filesystem::path& image_path, const std::filesystem::path& mask_path, int id,
                         Source source) {
  const GrayImage img = parse_pgm(read_file(image_path));
  const GrayImage msk = parse_pgm(read_file(mask_path));
  if (img.width != msk.width || img.height != msk.height) {
    throw ValidationError("PGM pair " + image_path.string() + ": image and mask dimensions differ");
  }
  SiteSample s;
  s.id = id;
  s.source = source;
  s.height = img.height;
  s.width = img.width;
  s.image.resize(img.pixels.size());
  s.mask.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    s.image[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    s.mask[i] = msk.pixels[i] >= 128 ? 1.0f : 0.0f;
  }
  s.validate();
  return s;
}

std::pair<std::filesystem::path, std::filesystem::path> save_pgm(const SiteSample& sample,
                                                                const std::filesystem::path& dir) {
  sample.validate();
  const auto img_dir = dir / "images";
  const auto mask_dir = dir / "masks";
  std::filesystem::create_directories(img_dir);
  std::filesystem::create_directories(mask_dir);
  GrayImage img{sample.height, sample.width, {}}, msk{sample.height, sample.width, {}};
  img.pixels.resize(sample.image.size());
  msk.pixels.resize(sample.mask.size());
  for (std::size_t i = 0; i < sample.image.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(sample.image[i], 0.0f, 1.0f) * 255.0f));
    msk.pixels[i] = sample.mask[i] > 0.5f ? 255 : 0;
  }
  const auto name = std::to_string(sample.id) + ".pgm";
  write_file(img_dir / name, encode_pgm(img));
  write_file(mask_dir / name, encode_pgm(msk));
  return {img_dir / name, mask_dir / name};
}

void save_site_dataset(const std::filesystem::path& root, const SiteConfig& site,
                       const std::vector<SiteSample>& samples) {
  const auto dir = root / site.name;
  std::filesystem::create_directories(dir);
  for (const auto& s : samples) save_pgm(s, dir);
  write_file(dir / "site.json", site_to_json(site) + "\n");
}

std::pair<SiteConfig, std::vector<SiteSample>> load_site_dataset(const std::filesystem::path& site_dir,
                                                                 Source source) {
  SiteConfig site = site_from_json(read_file(site_dir / "site.json"));
  std::vector<int> ids;
  for (const auto& entry : std::filesystem::directory_iterator(site_dir / "images")) {
    if (entry.path().extension() != ".pgm") continue;
    try {
      ids.push_back(std::stoi(entry.path().stem().string()));
    } catch (const std::exception&) {
      throw ValidationError("dataset: non-numeric image name " + entry.path().string());
    }
  }
  std::sort(ids.begin(), ids.end());
  std::vector<SiteSample> samples;
  for (int id : ids) {
    const auto name = std::to_string(id) + ".pgm";
    samples.push_back(load_pgm_pair(site_dir / "images" / name, site_dir / "masks" / name, id, source));
  }
  return {site, std::move(samples)};
}

}  // namespace fdseg
