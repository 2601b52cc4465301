#include "fdseg/unet.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

namespace fdseg {

using nlohmann::json;

void UNetConfig::validate() const {
  if (depth < 1) throw ConfigError("UNetConfig: depth must be >= 1, got " + std::to_string(depth));
  if (base_channels < 1) throw ConfigError("UNetConfig: base_channels must be >= 1");
  if (in_channels < 1) throw ConfigError("UNetConfig: in_channels must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("UNetConfig: kernel must be odd and positive");
  if (depth > 16) throw ConfigError("UNetConfig: depth too large");
  const int div = 1 << depth;
  if (input_height < 1 || input_height % div != 0) {
    throw ConfigError("UNetConfig: input height " + std::to_string(input_height) + " not divisible by 2^depth = " +
                      std::to_string(div));
  }
  if (input_width < 1 || input_width % div != 0) {
    throw ConfigError("UNetConfig: input width " + std::to_string(input_width) + " not divisible by 2^depth = " +
                      std::to_string(div));
  }
}

std::size_t parameter_count(const ParamSet& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.value.size();
  return total;
}

namespace {

struct ConvSpec {
  std::string name;
  int k;
  int cin;
  int cout;
};

std::vector<ConvSpec> layer_specs(const UNetConfig& cfg) {
  std::vector<ConvSpec> specs;
  const int k = cfg.kernel;
  auto channels = [&](int level) { return cfg.base_channels << (level - 1); };
  int prev = cfg.in_channels;
  for (int l = 1; l <= cfg.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    specs.push_back({p + ".conv1", k, prev, channels(l)});
    specs.push_back({p + ".conv2", k, channels(l), channels(l)});
    prev = channels(l);
  }
  const int bott = cfg.base_channels << cfg.depth;
  specs.push_back({"bottleneck.conv1", k, prev, bott});
  specs.push_back({"bottleneck.conv2", k, bott, bott});
  prev = bott;
  for (int j = 1; j <= cfg.depth; ++j) {
    const int level = cfg.depth + 1 - j;
    const int c = channels(level);
    const std::string p = "dec" + std::to_string(j);
    specs.push_back({p + ".up", 1, prev, c});
    specs.push_back({p + ".conv1", k, 2 * c, c});
    specs.push_back({p + ".conv2", k, c, c});
    prev = c;
  }
  specs.push_back({"head", 1, prev, 1});
  return specs;
}

}  // namespace

UNet::UNet(UNetConfig config, ParamSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto specs = layer_specs(config_);
  if (params_.size() != specs.size() * 2) {
    throw ConfigError("UNet: expected " + std::to_string(specs.size() * 2) + " parameter tensors, got " +
                      std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const Shape ks{s.k, s.k, s.cin, s.cout};
    const Shape bs{1, 1, 1, s.cout};
    const auto& kp = params_[2 * i];
    const auto& bp = params_[2 * i + 1];
    if (kp.name != s.name + ".kernel" || !(kp.shape == ks) || kp.value.size() != ks.size()) {
      throw ConfigError("UNet: parameter " + kp.name + " does not match layer " + s.name);
    }
    if (bp.name != s.name + ".bias" || !(bp.shape == bs) || bp.value.size() != bs.size()) {
      throw ConfigError("UNet: parameter " + bp.name + " does not match layer " + s.name);
    }
  }
}

std::vector<std::string> UNet::tap_names() const {
  std::vector<std::string> names;
  for (int l = 1; l <= config_.depth; ++l) names.push_back("enc_" + std::to_string(l));
  names.push_back("bottleneck");
  for (int j = 1; j <= config_.depth; ++j) names.push_back("dec_" + std::to_string(j));
  return names;
}

std::vector<int> UNet::tap_factors() const {
  std::vector<int> f;
  for (int l = 1; l <= config_.depth; ++l) f.push_back(1 << (l - 1));
  f.push_back(1 << config_.depth);
  for (int j = 1; j <= config_.depth; ++j) f.push_back(1 << (config_.depth - j));
  return f;
}

template <typename T>
ForwardResult<T> UNet::forward(Tape<T>& tape, const Tensor<T>& images, bool params_require_grad) const {
  const Shape is = images.shape();
  if (is.h != config_.input_height) {
    throw DimensionError("UNet::forward", "h", "expected " + std::to_string(config_.input_height) + ", got " +
                                                   std::to_string(is.h));
  }
  if (is.w != config_.input_width) {
    throw DimensionError("UNet::forward", "w", "expected " + std::to_string(config_.input_width) + ", got " +
                                                   std::to_string(is.w));
  }
  if (is.c != config_.in_channels) {
    throw DimensionError("UNet::forward", "c", "expected " + std::to_string(config_.in_channels) + ", got " +
                                                   std::to_string(is.c));
  }
  ForwardResult<T> out;
  out.params.reserve(params_.size());
  for (const auto& p : params_) {
    std::vector<T> v(p.value.begin(), p.value.end());
    out.params.push_back(params_require_grad ? tape.variable(p.shape, std::move(v), p.name)
                                             : tape.constant(p.shape, std::move(v), p.name));
  }
  std::size_t next = 0;
  auto conv = [&](const Tensor<T>& x) {
    const auto& k = out.params[next];
    const auto& b = out.params[next + 1];
    next += 2;
    return conv2d(x, k, b);
  };
  const auto factors = tap_factors();
  const auto names = tap_names();
  std::size_t tap_index = 0;
  auto emit = [&](const Tensor<T>& act) {
    out.taps.push_back({names[tap_index], act, factors[tap_index]});
    ++tap_index;
  };

  const std::string saved_scope = tape.scope();
  std::vector<Tensor<T>> skips;
  Tensor<T> x = images;
  for (int l = 1; l <= config_.depth; ++l) {
    tape.set_scope(names[tap_index]);
    if (l > 1) x = maxpool2d(x, 2);
    x = relu(conv(x));
    x = relu(conv(x));
    skips.push_back(x);
    emit(x);
  }
  tape.set_scope("bottleneck");
  x = maxpool2d(x, 2);
  x = relu(conv(x));
  x = relu(conv(x));
  emit(x);
  for (int j = 1; j <= config_.depth; ++j) {
    tape.set_scope(names[tap_index]);
    x = conv(upsample_nearest(x, 2));
    x = concat_channels(x, skips[config_.depth - j]);
    x = relu(conv(x));
    x = relu(conv(x));
    emit(x);
  }
  tape.set_scope("head");
  out.prediction = sigmoid(conv(x));
  tape.set_scope(saved_scope);
  return out;
}

std::vector<float> UNet::predict(std::span<const float> images, int batch) const {
  const Shape s{batch, config_.input_height, config_.input_width, config_.in_channels};
  if (images.size() != s.size()) {
    throw DimensionError("UNet::predict", "size", std::to_string(images.size()) + " values for " + s.str());
  }
  Tape<float> tape;
  auto x = tape.constant(s, std::vector<float>(images.begin(), images.end()), "images");
  auto r = forward(tape, x, false);
  return {r.prediction.values().begin(), r.prediction.values().end()};
}

UNet init_params(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamSet params;
  for (const auto& s : layer_specs(config)) {
    const Shape ks{s.k, s.k, s.cin, s.cout};
    const double fan_in = static_cast<double>(s.k) * s.k * s.cin;
    const double fan_out = static_cast<double>(s.k) * s.k * s.cout;
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Param k{s.name + ".kernel", ks, std::vector<float>(ks.size())};
    for (auto& v : k.value) v = static_cast<float>(dist(rng));
    params.push_back(std::move(k));
    params.push_back(Param{s.name + ".bias", Shape{1, 1, 1, s.cout}, std::vector<float>(s.cout, 0.0f)});
  }
  return UNet(config, std::move(params));
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string config_to_json(const UNetConfig& c) {
  json j = {{"depth", c.depth},
            {"base_channels", c.base_channels},
            {"in_channels", c.in_channels},
            {"kernel", c.kernel},
            {"input_height", c.input_height},
            {"input_width", c.input_width}};
  return j.dump();
}

UNetConfig config_from_json(const std::string& text) {
  UNetConfig c;
  try {
    const json j = json::parse(text);
    c.depth = j.at("depth").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.kernel = j.at("kernel").get<int>();
    c.input_height = j.at("input_height").get<int>();
    c.input_width = j.at("input_width").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("UNetConfig JSON: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw ParseError("checkpoint truncated", offset_);
    offset_ += n;
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 24)) throw ParseError("checkpoint string length implausible", offset_);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::size_t offset_ = 0;
};

constexpr char kMagic[8] = {'F', 'D', 'S', 'E', 'G', 'C', 'K', 'P'};

}  // namespace

void save_checkpoint(const UNet& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, 8);
  put_string(os, config_to_json(model.config()));
  put_u32(os, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    json header = {{"name", p.name}, {"shape", {p.shape.n, p.shape.h, p.shape.w, p.shape.c}}};
    put_string(os, header.dump());
    for (float v : p.value) put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw Error("failed writing checkpoint: " + path.string());
}

UNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path.string());
  Reader r(is);
  char magic[8];
  r.bytes(magic, 8);
  for (int i = 0; i < 8; ++i) {
    if (magic[i] != kMagic[i]) throw ParseError("bad checkpoint magic", static_cast<std::size_t>(i));
  }
  const UNetConfig config = config_from_json(r.str());
  const std::uint32_t count = r.u32();
  ParamSet params;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::size_t at = r.offset();
    Param p;
    try {
      const json h = json::parse(r.str());
      p.name = h.at("name").get<std::string>();
      const auto dims = h.at("shape").get<std::vector<int>>();
      if (dims.size() != 4) throw ParseError("tensor header shape must have 4 dims", at);
      p.shape = Shape{dims[0], dims[1], dims[2], dims[3]};
      validate_shape(p.shape, "checkpoint");
    } catch (const json::exception& e) {
      throw ParseError(std::string("bad tensor header: ") + e.what(), at);
    }
    p.value.resize(p.shape.size());
    for (auto& v : p.value) v = std::bit_cast<float>(r.u32());
    params.push_back(std::move(p));
  }
  return UNet(config, std::move(params));
}

template ForwardResult<float> UNet::forward(Tape<float>&, const Tensor<float>&, bool) const;
template ForwardResult<double> UNet::forward(Tape<double>&, const Tensor<double>&, bool) const;

}  // namespace fdseg
