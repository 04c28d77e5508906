#include "arterialnet/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace arterialnet::model {

using ad::Shape;

std::size_t ExtractorConfig::fused_dim() const {
  return (use_morphology ? signal::kMorphologyFeatures : 0) + (ptt_mode ? 1 : 0);
}

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

std::vector<std::size_t> to_sizes(const std::vector<long>& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (long x : v) {
    if (x <= 0) throw io::ConfigError(key + ": entries must be positive");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

std::size_t positive(const io::KeyValues& kv, const std::string& key, std::size_t fallback) {
  const long v = kv.get_int(key, static_cast<long>(fallback));
  if (v <= 0) throw io::ConfigError(key + " must be positive");
  return static_cast<std::size_t>(v);
}

}  // namespace

void ModelConfig::validate() const {
  const auto& e = extractor;
  const auto& b = backbone;
  if (e.in_channels == 0 || e.conv_channels == 0 || e.kernel == 0 || e.embed_dim == 0) {
    throw io::ConfigError("extractor sizes must be positive");
  }
  if (e.dilations.empty()) throw io::ConfigError("extractor.dilations must not be empty");
  if (e.fc_widths.size() != 3) throw io::ConfigError("extractor.fc_widths needs exactly 3 entries");
  if (e.fc_widths.back() != e.embed_dim) {
    throw io::ConfigError("extractor.fc_widths last entry must equal extractor.embed_dim");
  }
  if (e.ptt_mode && e.in_channels < 1) throw io::ConfigError("ptt_mode needs input channels");
  if (b.kind == "unet") {
    if (b.unet_depth == 0 || b.unet_base_channels == 0) throw io::ConfigError("unet sizes must be positive");
    const std::size_t f = std::size_t{1} << b.unet_depth;
    if (b.window_len % f != 0) {
      throw io::ConfigError("model.window_len " + std::to_string(b.window_len) +
                            " is not divisible by 2^unet.depth = " + std::to_string(f));
    }
  } else if (b.kind == "transformer") {
    if (b.tf_heads == 0 || b.tf_model_dim % b.tf_heads != 0) {
      throw io::ConfigError("tf.model_dim must be divisible by tf.heads");
    }
    if (b.tf_tokens == 0 || b.window_len % b.tf_tokens != 0) {
      throw io::ConfigError("model.window_len must be divisible by tf.tokens");
    }
    if (b.tf_layers == 0 || b.tf_ff_dim == 0) throw io::ConfigError("transformer sizes must be positive");
  } else {
    throw io::ConfigError("model.kind must be 'unet' or 'transformer', got '" + b.kind + "'");
  }
}

ModelConfig ModelConfig::from(const io::KeyValues& kv) {
  ModelConfig c;
  auto& e = c.extractor;
  auto& b = c.backbone;
  b.kind = kv.get("model.kind", b.kind);
  b.window_len = positive(kv, "model.window_len", b.window_len);
  b.unet_depth = positive(kv, "unet.depth", b.unet_depth);
  b.unet_base_channels = positive(kv, "unet.base_channels", b.unet_base_channels);
  b.tf_layers = positive(kv, "tf.layers", b.tf_layers);
  b.tf_heads = positive(kv, "tf.heads", b.tf_heads);
  b.tf_model_dim = positive(kv, "tf.model_dim", b.tf_model_dim);
  b.tf_ff_dim = positive(kv, "tf.ff_dim", b.tf_ff_dim);
  b.tf_tokens = positive(kv, "tf.tokens", b.tf_tokens);
  e.in_channels = positive(kv, "extractor.in_channels", e.in_channels);
  e.conv_channels = positive(kv, "extractor.conv_channels", e.conv_channels);
  e.kernel = positive(kv, "extractor.kernel", e.kernel);
  std::vector<long> dil(e.dilations.begin(), e.dilations.end());
  e.dilations = to_sizes(kv.get_ints("extractor.dilations", dil), "extractor.dilations");
  std::vector<long> fc(e.fc_widths.begin(), e.fc_widths.end());
  e.fc_widths = to_sizes(kv.get_ints("extractor.fc_widths", fc), "extractor.fc_widths");
  e.embed_dim = positive(kv, "extractor.embed_dim", e.embed_dim);
  e.use_gradients = kv.get_bool("extractor.use_gradients", e.use_gradients);
  e.use_morphology = kv.get_bool("extractor.use_morphology", e.use_morphology);
  e.ptt_mode = kv.get_bool("extractor.ptt_mode", e.ptt_mode);
  c.validate();
  return c;
}

void ModelConfig::write(io::KeyValues& kv) const {
  const auto& e = extractor;
  const auto& b = backbone;
  kv.set("model.kind", b.kind);
  kv.set("model.window_len", std::to_string(b.window_len));
  kv.set("unet.depth", std::to_string(b.unet_depth));
  kv.set("unet.base_channels", std::to_string(b.unet_base_channels));
  kv.set("tf.layers", std::to_string(b.tf_layers));
  kv.set("tf.heads", std::to_string(b.tf_heads));
  kv.set("tf.model_dim", std::to_string(b.tf_model_dim));
  kv.set("tf.ff_dim", std::to_string(b.tf_ff_dim));
  kv.set("tf.tokens", std::to_string(b.tf_tokens));
  kv.set("extractor.in_channels", std::to_string(e.in_channels));
  kv.set("extractor.conv_channels", std::to_string(e.conv_channels));
  kv.set("extractor.kernel", std::to_string(e.kernel));
  kv.set("extractor.dilations", join(e.dilations));
  kv.set("extractor.fc_widths", join(e.fc_widths));
  kv.set("extractor.embed_dim", std::to_string(e.embed_dim));
  kv.set("extractor.use_gradients", e.use_gradients ? "true" : "false");
  kv.set("extractor.use_morphology", e.use_morphology ? "true" : "false");
  kv.set("extractor.ptt_mode", e.ptt_mode ? "true" : "false");
}

std::string ModelConfig::to_text() const {
  io::KeyValues kv;
  write(kv);
  return kv.to_text();
}

std::uint64_t ModelBundle::checksum(const std::string& prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, arr] : params) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    h = io::fnv1a64(name, h);
    const auto v = arr.values();
    h = io::fnv1a64(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)), h);
  }
  return h;
}

std::size_t ModelBundle::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, arr] : params) n += arr.size();
  return n;
}

namespace {

enum class Init { kHe, kZero, kOne };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 1;
};

struct BnSpec {
  std::string name;
  std::size_t channels;
};

void add_conv(std::vector<ParamSpec>& s, const std::string& name, std::size_t out, std::size_t in,
              std::size_t k) {
  s.push_back({name + ".weight", {out, in, k}, Init::kHe, in * k});
  s.push_back({name + ".bias", {out}, Init::kZero});
}

void add_linear(std::vector<ParamSpec>& s, const std::string& name, std::size_t in, std::size_t out) {
  s.push_back({name + ".weight", {in, out}, Init::kHe, in});
  s.push_back({name + ".bias", {out}, Init::kZero});
}

void add_norm(std::vector<ParamSpec>& s, const std::string& name, std::size_t c) {
  s.push_back({name + ".gamma", {c}, Init::kOne});
  s.push_back({name + ".beta", {c}, Init::kZero});
}

void extractor_specs(const ExtractorConfig& e, std::vector<ParamSpec>& p, std::vector<BnSpec>& bn) {
  std::size_t in = e.input_planes();
  for (std::size_t i = 0; i < e.dilations.size(); ++i) {
    const auto tag = "extractor.block" + std::to_string(i);
    add_norm(p, tag + ".bn", in);
    bn.push_back({tag + ".bn", in});
    add_conv(p, tag + ".conv", e.conv_channels, in, e.kernel);
    in = e.conv_channels;
  }
  in = e.conv_channels + e.fused_dim();
  for (std::size_t j = 0; j < e.fc_widths.size(); ++j) {
    const auto tag = "extractor.fc" + std::to_string(j);
    add_norm(p, tag + ".bn", in);
    bn.push_back({tag + ".bn", in});
    add_linear(p, tag, in, e.fc_widths[j]);
    in = e.fc_widths[j];
  }
}

std::vector<std::size_t> unet_channels(const BackboneConfig& b) {
  std::vector<std::size_t> c;
  for (std::size_t k = 0; k <= b.unet_depth; ++k) c.push_back(b.unet_base_channels << k);
  return c;
}

void backbone_specs(const ModelConfig& m, std::vector<ParamSpec>& p) {
  const auto& b = m.backbone;
  const auto& e = m.extractor;
  if (b.kind == "unet") {
    const auto c = unet_channels(b);
    const std::size_t D = b.unet_depth;
    std::size_t in = e.conv_channels;
    for (std::size_t k = 0; k < D; ++k) {
      const auto tag = "backbone.enc" + std::to_string(k);
      add_conv(p, tag + ".a", c[k], in, 3);
      add_conv(p, tag + ".b", c[k], c[k], 3);
      in = c[k];
    }
    add_conv(p, "backbone.mid.a", c[D], in, 3);
    add_linear(p, "backbone.mid.embed", e.embed_dim, c[D]);
    add_conv(p, "backbone.mid.b", c[D], c[D], 3);
    for (std::size_t k = D; k-- > 0;) {
      const auto tag = "backbone.dec" + std::to_string(k);
      add_conv(p, tag + ".a", c[k], c[k + 1] + c[k], 3);
      add_conv(p, tag + ".b", c[k], c[k], 3);
    }
    add_conv(p, "backbone.head", 1, c[0], 1);
    return;
  }
  const std::size_t D = b.tf_model_dim;
  const std::size_t patch = b.window_len / b.tf_tokens;
  add_linear(p, "backbone.proj", e.conv_channels * patch, D);
  add_linear(p, "backbone.context", e.embed_dim, D);
  for (std::size_t l = 0; l < b.tf_layers; ++l) {
    const auto tag = "backbone.layer" + std::to_string(l);
    add_norm(p, tag + ".ln1", D);
    add_linear(p, tag + ".wq", D, D);
    add_linear(p, tag + ".wk", D, D);
    add_linear(p, tag + ".wv", D, D);
    add_linear(p, tag + ".wo", D, D);
    add_norm(p, tag + ".ln2", D);
    add_linear(p, tag + ".ff1", D, b.tf_ff_dim);
    add_linear(p, tag + ".ff2", b.tf_ff_dim, D);
  }
  add_norm(p, "backbone.final_ln", D);
  add_linear(p, "backbone.head", D, patch);
}

void draw(const std::vector<ParamSpec>& specs, std::uint64_t seed, ParamMap& out) {
  std::mt19937_64 rng(seed);
  for (const auto& s : specs) {
    std::vector<double> v(ad::shape_size(s.shape), 0.0);
    if (s.init == Init::kOne) {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (s.init == Init::kHe) {
      const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& x : v) x = u(rng);
    }
    out[s.name] = DiffArray(s.shape, std::move(v));
  }
}

constexpr std::uint64_t kBackboneSeedMix = 0x9e3779b97f4a7c15ULL;

}  // namespace

ModelBundle init_bundle(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle b;
  b.config = config;
  b.seed = seed;
  std::vector<ParamSpec> ex, bb;
  std::vector<BnSpec> bn;
  extractor_specs(config.extractor, ex, bn);
  backbone_specs(config, bb);
  draw(ex, seed, b.params);
  draw(bb, seed ^ kBackboneSeedMix, b.params);
  for (const auto& s : bn) b.batch_norm.emplace(s.name, ad::BatchNormState(s.channels));
  const std::size_t planes = config.extractor.input_planes();
  const std::size_t fused = config.extractor.fused_dim();
  b.norm.input_shift.assign(planes, 0.0);
  b.norm.input_scale.assign(planes, 1.0);
  b.norm.fused_shift.assign(fused, 0.0);
  b.norm.fused_scale.assign(fused, 1.0);
  return b;
}

ModelBundle reinit_extractor(const ModelBundle& bundle, std::uint64_t seed) {
  ModelBundle out = bundle;
  std::vector<ParamSpec> ex;
  std::vector<BnSpec> bn;
  extractor_specs(bundle.config.extractor, ex, bn);
  draw(ex, seed, out.params);
  for (const auto& s : bn) out.batch_norm[s.name] = ad::BatchNormState(s.channels);
  return out;
}

ParamMap bind(const ModelBundle& bundle, ad::Tape& tape) {
  ParamMap out;
  for (const auto& [name, arr] : bundle.params) out.emplace(name, tape.variable(arr));
  return out;
}

namespace {

const DiffArray& get(const ParamMap& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

DiffArray linear(const ParamMap& p, const std::string& name, const DiffArray& x) {
  const auto& w = get(p, name + ".weight");
  const auto& b = get(p, name + ".bias");
  if (x.ndim() == 2) return ad::matmul(x, w) + b;
  Shape flat{x.size() / x.shape().back(), x.shape().back()};
  auto y = ad::matmul(ad::reshape(x, flat), w) + b;
  Shape out = x.shape();
  out.back() = w.dim(1);
  return ad::reshape(y, out);
}

DiffArray conv_same(const ParamMap& p, const std::string& name, const DiffArray& x) {
  const auto& w = get(p, name + ".weight");
  const std::size_t k = w.dim(2);
  ad::Conv1dOptions opt;
  opt.pad_left = (k - 1) / 2;
  opt.pad_right = k - 1 - opt.pad_left;
  return ad::conv1d(x, w, get(p, name + ".bias"), opt);
}

DiffArray layer_norm(const ParamMap& p, const std::string& name, const DiffArray& x) {
  const std::size_t axis = x.ndim() - 1;
  auto centered = x - ad::mean(x, axis, true);
  auto var = ad::mean(centered * centered, axis, true);
  return centered / ad::sqrt(var + 1e-5) * get(p, name + ".gamma") + get(p, name + ".beta");
}

}  // namespace

ExtractorOutput extractor_forward(ModelBundle& bundle, const ParamMap& p, const DiffArray& x,
                                  const DiffArray& fused, bool training) {
  const auto& e = bundle.config.extractor;
  if (x.ndim() != 3 || x.dim(1) != e.input_planes() ||
      x.dim(2) != bundle.config.backbone.window_len) {
    throw ad::ShapeError("extractor", x.shape(),
                         {x.ndim() ? x.dim(0) : 0, e.input_planes(), bundle.config.backbone.window_len},
                         "channel or length mismatch");
  }
  DiffArray h = x;
  for (std::size_t i = 0; i < e.dilations.size(); ++i) {
    const auto tag = "extractor.block" + std::to_string(i);
    h = ad::batch_norm(h, get(p, tag + ".bn.gamma"), get(p, tag + ".bn.beta"),
                       bundle.batch_norm.at(tag + ".bn"), training);
    h = ad::relu(ad::causal_conv1d(h, get(p, tag + ".conv.weight"), get(p, tag + ".conv.bias"),
                                   e.dilations[i]));
  }
  ExtractorOutput out;
  out.sequence = h;
  DiffArray z = ad::mean(h, 2);
  if (e.fused_dim() > 0) {
    if (fused.ndim() != 2 || fused.dim(0) != x.dim(0) || fused.dim(1) != e.fused_dim()) {
      throw ad::ShapeError("extractor fusion", fused.shape(), {x.dim(0), e.fused_dim()});
    }
    z = ad::concat({z, fused}, 1);
  }
  for (std::size_t j = 0; j < e.fc_widths.size(); ++j) {
    const auto tag = "extractor.fc" + std::to_string(j);
    z = ad::batch_norm(z, get(p, tag + ".bn.gamma"), get(p, tag + ".bn.beta"),
                       bundle.batch_norm.at(tag + ".bn"), training);
    z = ad::relu(linear(p, tag, z));
  }
  out.embedding = z;
  return out;
}

DiffArray unet_forward(const ModelBundle& bundle, const ParamMap& p, const DiffArray& sequence,
                       const DiffArray& embedding) {
  const auto& b = bundle.config.backbone;
  const std::size_t D = b.unet_depth;
  if (sequence.dim(2) % (std::size_t{1} << D) != 0) {
    throw ad::ShapeError("unet", sequence.shape(), {}, "length not divisible by 2^depth");
  }
  std::vector<DiffArray> skips;
  DiffArray h = sequence;
  for (std::size_t k = 0; k < D; ++k) {
    const auto tag = "backbone.enc" + std::to_string(k);
    h = ad::relu(conv_same(p, tag + ".a", h));
    h = ad::relu(conv_same(p, tag + ".b", h));
    skips.push_back(h);
    h = ad::avg_pool1d(h, 2);
  }
  h = ad::relu(conv_same(p, "backbone.mid.a", h));
  auto e = linear(p, "backbone.mid.embed", embedding);
  h = h + ad::reshape(e, {e.dim(0), e.dim(1), 1});
  h = ad::relu(conv_same(p, "backbone.mid.b", h));
  for (std::size_t k = D; k-- > 0;) {
    const auto tag = "backbone.dec" + std::to_string(k);
    h = ad::concat({ad::upsample1d(h, 2), skips[k]}, 1);
    h = ad::relu(conv_same(p, tag + ".a", h));
    h = ad::relu(conv_same(p, tag + ".b", h));
  }
  h = conv_same(p, "backbone.head", h);
  return ad::reshape(h, {h.dim(0), h.dim(2)});
}

namespace {

DiffArray positional_encoding(std::size_t tokens, std::size_t dim) {
  std::vector<double> v(tokens * dim);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      v[t * dim + i] = i % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq);
    }
  }
  return DiffArray({tokens, dim}, std::move(v));
}

DiffArray attention(const ParamMap& p, const std::string& tag, const DiffArray& x,
                    std::size_t heads) {
  const std::size_t B = x.dim(0), S = x.dim(1), D = x.dim(2), dh = D / heads;
  auto split_heads = [&](const DiffArray& t) {
    auto r = ad::transpose(ad::reshape(t, {B, S, heads, dh}), 1, 2);
    return ad::reshape(r, {B * heads, S, dh});
  };
  auto q = split_heads(linear(p, tag + ".wq", x));
  auto k = split_heads(linear(p, tag + ".wk", x));
  auto v = split_heads(linear(p, tag + ".wv", x));
  auto scores = ad::matmul(q, ad::transpose(k, 1, 2)) * (1.0 / std::sqrt(static_cast<double>(dh)));
  auto ctx = ad::matmul(ad::softmax(scores), v);
  ctx = ad::reshape(ad::transpose(ad::reshape(ctx, {B, heads, S, dh}), 1, 2), {B, S, D});
  return linear(p, tag + ".wo", ctx);
}

}  // namespace

DiffArray transformer_forward(const ModelBundle& bundle, const ParamMap& p,
                              const DiffArray& sequence, const DiffArray& embedding) {
  const auto& b = bundle.config.backbone;
  const std::size_t B = sequence.dim(0), C = sequence.dim(1), L = sequence.dim(2);
  const std::size_t T = b.tf_tokens;
  if (L % T != 0) throw ad::ShapeError("transformer", sequence.shape(), {}, "length not divisible by tokens");
  const std::size_t patch = L / T;

  auto tokens = ad::transpose(ad::reshape(sequence, {B, C, T, patch}), 1, 2);
  auto h = linear(p, "backbone.proj", ad::reshape(tokens, {B, T, C * patch}));
  h = h + positional_encoding(T, b.tf_model_dim);
  auto ctx = linear(p, "backbone.context", embedding);
  h = ad::concat({ad::reshape(ctx, {B, 1, b.tf_model_dim}), h}, 1);
  for (std::size_t l = 0; l < b.tf_layers; ++l) {
    const auto tag = "backbone.layer" + std::to_string(l);
    h = h + attention(p, tag, layer_norm(p, tag + ".ln1", h), b.tf_heads);
    auto f = layer_norm(p, tag + ".ln2", h);
    h = h + linear(p, tag + ".ff2", ad::relu(linear(p, tag + ".ff1", f)));
  }
  h = layer_norm(p, "backbone.final_ln", ad::slice(h, 1, 1, T + 1));
  return ad::reshape(linear(p, "backbone.head", h), {B, L});
}

DiffArray forward(ModelBundle& bundle, const ParamMap& p, const DiffArray& x,
                  const DiffArray& fused, bool training) {
  auto ex = extractor_forward(bundle, p, x, fused, training);
  if (bundle.config.backbone.kind == "unet") return unet_forward(bundle, p, ex.sequence, ex.embedding);
  return transformer_forward(bundle, p, ex.sequence, ex.embedding);
}

std::vector<double> fused_features(const data::Window& w, const ExtractorConfig& config) {
  std::vector<double> out;
  if (config.use_morphology) out.insert(out.end(), w.morphology.begin(), w.morphology.end());
  if (config.ptt_mode) out.push_back(w.ptt);
  return out;
}

std::vector<double> window_planes(const data::SubjectRecord& rec, const data::Window& w,
                                  const ExtractorConfig& config) {
  const std::size_t L = rec.window_len;
  if (config.in_channels > rec.num_channels()) {
    throw io::ConfigError("model expects " + std::to_string(config.in_channels) +
                          " input channels, subject '" + rec.subject_id + "' has " +
                          std::to_string(rec.num_channels()));
  }
  std::vector<double> out;
  out.reserve(config.input_planes() * L);
  for (std::size_t c = 0; c < config.in_channels; ++c) {
    std::span<const double> row(w.inputs.data() + c * L, L);
    if (!config.use_gradients) {
      out.insert(out.end(), row.begin(), row.end());
      continue;
    }
    const double eff_rate = rec.rate() * static_cast<double>(L - 1) /
                            static_cast<double>(std::max<std::size_t>(w.length() - 1, 1));
    for (const auto& plane : signal::expand_gradients(row, eff_rate)) {
      out.insert(out.end(), plane.begin(), plane.end());
    }
  }
  return out;
}

namespace {

void mean_std(const std::vector<double>& sum, const std::vector<double>& sq, double n,
              std::vector<double>& shift, std::vector<double>& scale) {
  shift.resize(sum.size());
  scale.resize(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) {
    shift[i] = sum[i] / n;
    const double var = std::max(0.0, sq[i] / n - shift[i] * shift[i]);
    scale[i] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
}

}  // namespace

Normalization fit_normalization(const std::vector<const data::SubjectRecord*>& records,
                                const std::vector<std::vector<std::size_t>>& windows,
                                const ExtractorConfig& config) {
  const std::size_t P = config.input_planes(), F = config.fused_dim();
  std::vector<double> ps(P, 0.0), pq(P, 0.0), fs(F, 0.0), fq(F, 0.0);
  double ts = 0.0, tq = 0.0, pn = 0.0, fn = 0.0, tn = 0.0;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = *records[r];
    const std::size_t L = rec.window_len;
    for (auto id : windows[r]) {
      const auto& w = rec.windows.at(id);
      const auto planes = window_planes(rec, w, config);
      for (std::size_t c = 0; c < P; ++c) {
        for (std::size_t t = 0; t < L; ++t) {
          const double v = planes[c * L + t];
          ps[c] += v;
          pq[c] += v * v;
        }
      }
      pn += static_cast<double>(L);
      const auto f = fused_features(w, config);
      for (std::size_t i = 0; i < F; ++i) {
        fs[i] += f[i];
        fq[i] += f[i] * f[i];
      }
      fn += 1.0;
      for (double v : w.target) {
        ts += v;
        tq += v * v;
      }
      tn += static_cast<double>(L);
    }
  }
  if (tn == 0.0) throw std::invalid_argument("fit_normalization: no training windows");
  Normalization n;
  mean_std(ps, pq, pn, n.input_shift, n.input_scale);
  mean_std(fs, fq, fn, n.fused_shift, n.fused_scale);
  std::vector<double> shift, scale;
  mean_std({ts}, {tq}, tn, shift, scale);
  n.target_shift = shift[0];
  n.target_scale = scale[0];
  return n;
}

Batch make_batch(const ModelBundle& bundle, const data::SubjectRecord& rec,
                 const std::vector<std::size_t>& window_ids) {
  const auto& e = bundle.config.extractor;
  const auto& nm = bundle.norm;
  const std::size_t L = bundle.config.backbone.window_len;
  if (rec.window_len != L) {
    throw io::ConfigError("dataset window_len " + std::to_string(rec.window_len) +
                          " does not match model.window_len " + std::to_string(L));
  }
  const std::size_t B = window_ids.size(), P = e.input_planes(), F = e.fused_dim();
  std::vector<double> x, f, y;
  x.reserve(B * P * L);
  f.reserve(B * F);
  y.reserve(B * L);
  for (auto id : window_ids) {
    const auto& w = rec.windows.at(id);
    const auto planes = window_planes(rec, w, e);
    for (std::size_t c = 0; c < P; ++c) {
      for (std::size_t t = 0; t < L; ++t) {
        x.push_back((planes[c * L + t] - nm.input_shift[c]) / nm.input_scale[c]);
      }
    }
    const auto raw = fused_features(w, e);
    for (std::size_t i = 0; i < F; ++i) f.push_back((raw[i] - nm.fused_shift[i]) / nm.fused_scale[i]);
    for (double v : w.target) y.push_back((v - nm.target_shift) / nm.target_scale);
  }
  return {DiffArray({B, P, L}, std::move(x)), DiffArray({B, F}, std::move(f)),
          DiffArray({B, L}, std::move(y))};
}

Batch concat_batches(const std::vector<Batch>& parts) {
  std::vector<DiffArray> xs, fs, ys;
  for (const auto& b : parts) {
    xs.push_back(b.x);
    fs.push_back(b.fused);
    ys.push_back(b.y);
  }
  return {ad::concat(xs, 0), ad::concat(fs, 0), ad::concat(ys, 0)};
}

std::vector<std::vector<double>> predict(const ModelBundle& bundle, const data::SubjectRecord& rec,
                                         const std::vector<std::size_t>& window_ids,
                                         std::size_t batch_size) {
  ModelBundle b = bundle;
  std::vector<std::vector<double>> out;
  const std::size_t L = b.config.backbone.window_len;
  for (std::size_t i = 0; i < window_ids.size(); i += batch_size) {
    std::vector<std::size_t> ids(window_ids.begin() + static_cast<long>(i),
                                 window_ids.begin() + static_cast<long>(std::min(window_ids.size(), i + batch_size)));
    auto batch = make_batch(b, rec, ids);
    auto yhat = forward(b, b.params, batch.x, batch.fused, false);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      std::vector<double> w(L);
      for (std::size_t t = 0; t < L; ++t) {
        w[t] = yhat[r * L + t] * b.norm.target_scale + b.norm.target_shift;
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'A', 'R', 'T', 'N', 'E', 'T', 'C', 'K'};
constexpr std::uint64_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& path) {
  std::ostringstream os;
  os.write(kMagic, sizeof kMagic);
  io::write_u64(os, kCheckpointVersion);
  const auto text = bundle.config.to_text();
  io::write_u64(os, io::fnv1a64(text));
  io::write_string(os, text);
  io::write_u64(os, bundle.seed);
  io::write_u64(os, bundle.params.size());
  for (const auto& [name, arr] : bundle.params) {
    io::write_string(os, name);
    io::write_u64(os, arr.ndim());
    for (auto d : arr.shape()) io::write_u64(os, d);
    io::write_array(os, arr.values());
  }
  io::write_u64(os, bundle.batch_norm.size());
  for (const auto& [name, st] : bundle.batch_norm) {
    io::write_string(os, name);
    io::write_f64(os, st.momentum);
    io::write_f64(os, st.eps);
    io::write_array(os, st.running_mean);
    io::write_array(os, st.running_var);
  }
  const auto& n = bundle.norm;
  io::write_array(os, n.input_shift);
  io::write_array(os, n.input_scale);
  io::write_array(os, n.fused_shift);
  io::write_array(os, n.fused_scale);
  io::write_array(os, std::vector<double>{n.target_shift, n.target_scale});
  io::write_text(path, os.str());
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::istringstream is(io::read_text(path));
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw io::FormatError(path.string() + ": not a checkpoint");
  }
  if (io::read_u64(is) != kCheckpointVersion) throw io::FormatError(path.string() + ": unsupported version");
  const auto digest = io::read_u64(is);
  const auto text = io::read_string(is);
  if (io::fnv1a64(text) != digest) throw io::FormatError(path.string() + ": config digest mismatch");
  const auto config = ModelConfig::from(io::KeyValues::parse(text, path.string()));
  ModelBundle b = init_bundle(config, io::read_u64(is));

  const auto np = io::read_u64(is);
  if (np != b.params.size()) throw io::FormatError(path.string() + ": parameter count mismatch");
  for (std::uint64_t i = 0; i < np; ++i) {
    const auto name = io::read_string(is);
    auto it = b.params.find(name);
    if (it == b.params.end()) throw io::FormatError(path.string() + ": unexpected parameter " + name);
    Shape shape(io::read_u64(is));
    for (auto& d : shape) d = io::read_u64(is);
    if (shape != it->second.shape()) {
      throw ad::ShapeError("load_checkpoint " + name, shape, it->second.shape());
    }
    it->second = DiffArray(shape, io::read_array(is));
  }
  const auto nb = io::read_u64(is);
  for (std::uint64_t i = 0; i < nb; ++i) {
    const auto name = io::read_string(is);
    auto it = b.batch_norm.find(name);
    if (it == b.batch_norm.end()) throw io::FormatError(path.string() + ": unexpected batch norm " + name);
    it->second.momentum = io::read_f64(is);
    it->second.eps = io::read_f64(is);
    it->second.running_mean = io::read_array(is);
    it->second.running_var = io::read_array(is);
  }
  auto& n = b.norm;
  n.input_shift = io::read_array(is);
  n.input_scale = io::read_array(is);
  n.fused_shift = io::read_array(is);
  n.fused_scale = io::read_array(is);
  const auto t = io::read_array(is);
  if (t.size() != 2 || n.input_shift.size() != config.extractor.input_planes() ||
      n.fused_shift.size() != config.extractor.fused_dim()) {
    throw io::FormatError(path.string() + ": normalization block mismatch");
  }
  n.target_shift = t[0];
  n.target_scale = t[1];
  return b;
}

}  // namespace arterialnet::model
