#include "longidiff/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "longidiff/errors.hpp"
#include "longidiff/volume_io.hpp"

namespace longidiff {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Single: return "single";
    case Variant::Concat: return "concat";
    case Variant::DiffWeight: return "diffweight";
  }
  throw std::logic_error("variant_name: bad enum value");
}

Variant variant_from_name(const std::string& name) {
  if (name == "single") return Variant::Single;
  if (name == "concat") return Variant::Concat;
  if (name == "diffweight") return Variant::DiffWeight;
  throw ConfigError("unknown variant '" + name +
                    "' (expected single, concat, or diffweight)");
}

void ModelConfig::validate() const {
  if (levels < 2) throw ConfigError("model: levels must be >= 2");
  if (base_channels < 1) throw ConfigError("model: base_channels must be >= 1");
  if (max_channels < base_channels)
    throw ConfigError("model: max_channels must be >= base_channels");
  if (kernel < 1 || kernel % 2 == 0)
    throw ConfigError("model: kernel must be odd and >= 1");
  if (convs_per_stage < 1) throw ConfigError("model: convs_per_stage must be >= 1");
  if (num_classes != 2) throw ConfigError("model: only num_classes == 2 is supported");
  if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
  if (norm_eps <= 0) throw ConfigError("model: norm_eps must be positive");
  if (leaky_slope < 0) throw ConfigError("model: leaky_slope must be >= 0");
}

int ModelConfig::channels_at(int level) const {
  const int64_t ch = static_cast<int64_t>(base_channels) << level;
  return static_cast<int>(std::min<int64_t>(ch, max_channels));
}

int ModelConfig::stem_channels() const {
  return in_channels * (variant == Variant::Concat ? 2 : 1);
}

int ModelConfig::spatial_divisor() const { return 1 << (levels - 1); }

Tensor& ModelWeights::find(const std::string& name) {
  for (auto& [n, t] : params)
    if (n == name) return t;
  throw std::logic_error("ModelWeights: no parameter named '" + name + "'");
}

const Tensor& ModelWeights::find(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw std::logic_error("ModelWeights: no parameter named '" + name + "'");
}

bool ModelWeights::contains(const std::string& name) const {
  for (const auto& [n, t] : params)
    if (n == name) return true;
  return false;
}

int64_t ModelWeights::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

void ModelWeights::set_requires_grad(bool enabled) {
  for (auto& [name, t] : params) t.impl()->requires_grad = enabled;
}

void ModelWeights::zero_grads() {
  for (auto& [name, t] : params) t.zero_grad();
}

namespace {

std::string enc_name(int stage, int conv, const char* leaf) {
  std::ostringstream s;
  s << "enc.s" << stage << ".c" << conv << "." << leaf;
  return s.str();
}

std::string dec_name(int stage, int conv, const char* leaf) {
  std::ostringstream s;
  s << "dec.s" << stage << ".c" << conv << "." << leaf;
  return s.str();
}

std::string up_name(int stage) {
  std::ostringstream s;
  s << "up.l" << stage << ".w";
  return s.str();
}

/// Walks every parameter of the architecture in registration order.
/// visit(name, shape, fan_in); fan_in == 0 marks a zero-initialized bias.
template <typename Visit>
void for_each_param(const ModelConfig& cfg, Visit visit) {
  const int64_t k = cfg.kernel;
  for (int s = 0; s < cfg.levels; ++s) {
    const int64_t out_ch = cfg.channels_at(s);
    for (int c = 0; c < cfg.convs_per_stage; ++c) {
      const int64_t in_ch = c > 0      ? out_ch
                            : s == 0   ? cfg.stem_channels()
                                       : cfg.channels_at(s - 1);
      visit(enc_name(s, c, "w"), Shape{out_ch, in_ch, k, k, k}, in_ch * k * k * k);
      visit(enc_name(s, c, "b"), Shape{out_ch}, int64_t{0});
    }
  }
  for (int s = cfg.levels - 2; s >= 0; --s) {
    const int64_t ch = cfg.channels_at(s);
    const int64_t ch_below = cfg.channels_at(s + 1);
    // Transpose conv k=2 s=2: every output voxel is driven by exactly one
    // input voxel per channel, so the effective fan-in is ch_below.
    visit(up_name(s), Shape{ch_below, ch, 2, 2, 2}, ch_below);
    for (int c = 0; c < cfg.convs_per_stage; ++c) {
      const int64_t in_ch = c > 0 ? ch : 2 * ch;
      visit(dec_name(s, c, "w"), Shape{ch, in_ch, k, k, k}, in_ch * k * k * k);
      visit(dec_name(s, c, "b"), Shape{ch}, int64_t{0});
    }
  }
  visit("head.w", Shape{cfg.num_classes, cfg.channels_at(0), 1, 1, 1},
        int64_t{cfg.channels_at(0)});
  visit("head.b", Shape{cfg.num_classes}, int64_t{0});
}

}  // namespace

ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelWeights w;
  Rng rng(seed);
  const double gain = std::sqrt(2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope));
  for_each_param(cfg, [&](const std::string& name, Shape shape, int64_t fan_in) {
    if (fan_in == 0) {
      w.params.emplace_back(name, Tensor::zeros(std::move(shape), true));
    } else {
      const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
      w.params.emplace_back(name, Tensor::randn(std::move(shape), rng, stddev, true));
    }
  });
  return w;
}

namespace {

Tensor conv_block(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                  const ModelConfig& cfg) {
  Tensor y = conv3d(x, w, b, stride, (cfg.kernel - 1) / 2);
  y = instance_norm(y, cfg.norm_eps);
  return leaky_relu(y, cfg.leaky_slope);
}

}  // namespace

std::vector<Tensor> encode(const Tensor& x, const ModelConfig& cfg,
                           const ModelWeights& weights) {
  cfg.validate();
  if (x.shape().size() != 5)
    throw std::invalid_argument("encode: expected rank-5 input, got " +
                                shape_str(x.shape()));
  if (x.dim(1) != cfg.stem_channels())
    throw std::invalid_argument("encode: expected " +
                                std::to_string(cfg.stem_channels()) +
                                " input channels, got " + std::to_string(x.dim(1)));
  const int div = cfg.spatial_divisor();
  for (int i = 2; i < 5; ++i) {
    if (x.dim(i) % div != 0)
      throw std::invalid_argument("encode: spatial extents " + shape_str(x.shape()) +
                                  " must be divisible by " + std::to_string(div));
  }

  std::vector<Tensor> features;
  features.reserve(static_cast<size_t>(cfg.levels));
  Tensor cur = x;
  for (int s = 0; s < cfg.levels; ++s) {
    for (int c = 0; c < cfg.convs_per_stage; ++c) {
      const int stride = (c == 0 && s > 0) ? 2 : 1;
      cur = conv_block(cur, weights.find(enc_name(s, c, "w")),
                       weights.find(enc_name(s, c, "b")), stride, cfg);
    }
    features.push_back(cur);
  }
  return features;
}

Tensor decode(const std::vector<Tensor>& features, const ModelConfig& cfg,
              const ModelWeights& weights) {
  cfg.validate();
  if (features.size() != static_cast<size_t>(cfg.levels))
    throw std::invalid_argument("decode: expected " + std::to_string(cfg.levels) +
                                " feature levels, got " +
                                std::to_string(features.size()));
  Tensor cur = features.back();
  for (int s = cfg.levels - 2; s >= 0; --s) {
    Tensor up = conv3d_transpose(cur, weights.find(up_name(s)), 2);
    cur = concat_channels(up, features[static_cast<size_t>(s)]);
    for (int c = 0; c < cfg.convs_per_stage; ++c)
      cur = conv_block(cur, weights.find(dec_name(s, c, "w")),
                       weights.find(dec_name(s, c, "b")), 1, cfg);
  }
  return conv3d(cur, weights.find("head.w"), weights.find("head.b"), 1, 0);
}

Tensor difference_weighting(const Tensor& x_c, const Tensor& x_p, double eps) {
  if (!x_c.defined() || !x_p.defined())
    throw std::invalid_argument("difference_weighting: undefined input");
  if (x_c.shape() != x_p.shape())
    throw std::invalid_argument("difference_weighting: shape mismatch " +
                                shape_str(x_c.shape()) + " vs " +
                                shape_str(x_p.shape()));
  Tensor attention = instance_norm(sub(x_c, x_p), eps);
  return add(mul(x_c, attention), x_c);
}

Tensor forward_single(const Tensor& x, const ModelConfig& cfg,
                      const ModelWeights& weights) {
  return decode(encode(x, cfg, weights), cfg, weights);
}

Tensor forward_concat(const Tensor& x_c, const Tensor& x_p, const ModelConfig& cfg,
                      const ModelWeights& weights) {
  if (x_c.shape() != x_p.shape())
    throw std::invalid_argument("forward_concat: timepoint shape mismatch " +
                                shape_str(x_c.shape()) + " vs " +
                                shape_str(x_p.shape()));
  return decode(encode(concat_channels(x_c, x_p), cfg, weights), cfg, weights);
}

Tensor forward_longitudinal(const Tensor& x_c, const Tensor& x_p,
                            const ModelConfig& cfg, const ModelWeights& weights) {
  if (!x_c.defined() || !x_p.defined())
    throw std::invalid_argument("forward_longitudinal: undefined input");
  if (x_c.shape() != x_p.shape())
    throw std::invalid_argument("forward_longitudinal: timepoint shape mismatch " +
                                shape_str(x_c.shape()) + " vs " +
                                shape_str(x_p.shape()));
  std::vector<Tensor> cur = encode(x_c, cfg, weights);
  std::vector<Tensor> prior = encode(x_p, cfg, weights);
  std::vector<Tensor> fused;
  fused.reserve(cur.size());
  for (int s = 0; s < cfg.levels; ++s) {
    const bool fuse = s < cfg.levels - 1 || cfg.fuse_bottleneck;
    fused.push_back(fuse ? difference_weighting(cur[static_cast<size_t>(s)],
                                                prior[static_cast<size_t>(s)],
                                                cfg.norm_eps)
                         : cur[static_cast<size_t>(s)]);
  }
  return decode(fused, cfg, weights);
}

Tensor forward_variant(const Tensor& x_c, const Tensor& x_p, const ModelConfig& cfg,
                       const ModelWeights& weights) {
  switch (cfg.variant) {
    case Variant::Single: return forward_single(x_c, cfg, weights);
    case Variant::Concat: return forward_concat(x_c, x_p, cfg, weights);
    case Variant::DiffWeight: return forward_longitudinal(x_c, x_p, cfg, weights);
  }
  throw std::logic_error("forward_variant: bad enum value");
}

VolumeU8 predict_mask(const Tensor& logits) {
  if (logits.shape().size() != 5 || logits.dim(0) != 1 || logits.dim(1) != 2)
    throw std::invalid_argument("predict_mask: expected [1,2,D,H,W] logits, got " +
                                shape_str(logits.shape()));
  const int64_t d = logits.dim(2), h = logits.dim(3), w = logits.dim(4);
  const int64_t sp = d * h * w;
  VolumeU8 mask({static_cast<int>(w), static_cast<int>(h), static_cast<int>(d)});
  auto run = [&](auto tag) {
    using T = decltype(tag);
    const T* v = logits.data<T>().data();
    for (int64_t i = 0; i < sp; ++i)
      mask.voxels[static_cast<size_t>(i)] = v[sp + i] > v[i] ? 1 : 0;
  };
  if (logits.stype() == ScalarType::F32)
    run(float{});
  else
    run(double{});
  return mask;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCkptMagic = "longidiff-checkpoint v1";

void store_f32_le(float v, unsigned char* out) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  out[0] = static_cast<unsigned char>(u);
  out[1] = static_cast<unsigned char>(u >> 8);
  out[2] = static_cast<unsigned char>(u >> 16);
  out[3] = static_cast<unsigned char>(u >> 24);
}

float load_f32_le(const unsigned char* in) {
  uint32_t u = static_cast<uint32_t>(in[0]) | static_cast<uint32_t>(in[1]) << 8 |
               static_cast<uint32_t>(in[2]) << 16 | static_cast<uint32_t>(in[3]) << 24;
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelWeights& weights) {
  cfg.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out << kCkptMagic << "\n";
  out << "variant " << variant_name(cfg.variant) << "\n";
  out << "levels " << cfg.levels << "\n";
  out << "base_channels " << cfg.base_channels << "\n";
  out << "max_channels " << cfg.max_channels << "\n";
  out << "kernel " << cfg.kernel << "\n";
  out << "convs_per_stage " << cfg.convs_per_stage << "\n";
  out << "num_classes " << cfg.num_classes << "\n";
  out << "in_channels " << cfg.in_channels << "\n";
  out << "fuse_bottleneck " << (cfg.fuse_bottleneck ? 1 : 0) << "\n";
  out << "norm_eps " << format_double(cfg.norm_eps) << "\n";
  out << "leaky_slope " << format_double(cfg.leaky_slope) << "\n";
  out << "params " << weights.params.size() << "\n";
  std::vector<unsigned char> bytes;
  for (const auto& [name, t] : weights.params) {
    out << "param " << name << " " << t.numel() << "\n";
    const int64_t n = t.numel();
    bytes.resize(static_cast<size_t>(n) * 4);
    for (int64_t i = 0; i < n; ++i)
      store_f32_le(static_cast<float>(t.at(i)), bytes.data() + 4 * i);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out << "\n";
  }
  out << "end\n";
  if (!out) throw DataError("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  auto next_line = [&]() {
    std::string line;
    if (!std::getline(in, line))
      throw DataError("truncated checkpoint header: " + path.string());
    return line;
  };
  if (next_line() != kCkptMagic)
    throw DataError("bad magic line in checkpoint: " + path.string());

  ModelConfig cfg;
  size_t n_params = 0;
  bool saw_params = false;
  while (!saw_params) {
    std::istringstream ls(next_line());
    std::string key;
    ls >> key;
    if (key == "variant") {
      std::string v;
      ls >> v;
      cfg.variant = variant_from_name(v);
    } else if (key == "levels") {
      ls >> cfg.levels;
    } else if (key == "base_channels") {
      ls >> cfg.base_channels;
    } else if (key == "max_channels") {
      ls >> cfg.max_channels;
    } else if (key == "kernel") {
      ls >> cfg.kernel;
    } else if (key == "convs_per_stage") {
      ls >> cfg.convs_per_stage;
    } else if (key == "num_classes") {
      ls >> cfg.num_classes;
    } else if (key == "in_channels") {
      ls >> cfg.in_channels;
    } else if (key == "fuse_bottleneck") {
      int v = 0;
      ls >> v;
      cfg.fuse_bottleneck = v != 0;
    } else if (key == "norm_eps") {
      ls >> cfg.norm_eps;
    } else if (key == "leaky_slope") {
      ls >> cfg.leaky_slope;
    } else if (key == "params") {
      ls >> n_params;
      saw_params = true;
    } else {
      throw DataError("unknown checkpoint header field '" + key + "': " + path.string());
    }
    if (!ls) throw DataError("bad checkpoint header line: " + path.string());
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError("invalid config in checkpoint " + path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  ckpt.config = cfg;
  size_t expected_idx = 0;
  for_each_param(cfg, [&](const std::string& name, Shape shape, int64_t) {
    if (expected_idx >= n_params)
      throw DataError("checkpoint declares too few params: " + path.string());
    ++expected_idx;
    std::istringstream ls(next_line());
    std::string key, pname;
    int64_t numel = 0;
    ls >> key >> pname >> numel;
    if (!ls || key != "param")
      throw DataError("bad param line in checkpoint: " + path.string());
    if (pname != name)
      throw DataError("unexpected parameter '" + pname + "' (expected '" + name +
                      "') in checkpoint: " + path.string());
    if (numel != shape_numel(shape))
      throw DataError("parameter '" + pname + "' has wrong size in checkpoint: " +
                      path.string());
    std::vector<unsigned char> bytes(static_cast<size_t>(numel) * 4);
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
      throw DataError("truncated parameter blob in checkpoint: " + path.string());
    if (in.get() != '\n')
      throw DataError("missing blob terminator in checkpoint: " + path.string());
    Tensor t = Tensor::zeros(shape, true);
    for (int64_t i = 0; i < numel; ++i)
      t.set(i, load_f32_le(bytes.data() + 4 * i));
    ckpt.weights.params.emplace_back(name, std::move(t));
  });
  if (expected_idx != n_params)
    throw DataError("checkpoint declares too many params: " + path.string());
  if (next_line() != "end")
    throw DataError("missing end marker in checkpoint: " + path.string());
  return ckpt;
}

}  // namespace longidiff
