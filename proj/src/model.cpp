#include "logo/model.hpp"

#include <bit>
#include <charconv>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "logo/random.hpp"

namespace logo {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + value + "' for key '" + key + "'");
  return out;
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

void ModelConfig::validate() const {
  if (frames == 0 || height == 0 || width == 0 || channels == 0 || dim == 0) {
    throw ConfigError("geometry extents F, H, W, C and d must be positive");
  }
  if (blocks < 1) throw ConfigError("block count N must be at least 1");
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("d=" + std::to_string(dim) + " is not divisible by heads=" + std::to_string(heads));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  try {
    window.validate(frames, height, width);
  } catch (const WindowSpecError& e) {
    throw ConfigError(e.what());
  }
}

bool ModelConfig::set(const std::string& key, const std::string& value) {
  auto size = [&] { return parse_number<std::size_t>(key, value); };
  if (key == "frames") frames = size();
  else if (key == "height") height = size();
  else if (key == "width") width = size();
  else if (key == "channels") channels = size();
  else if (key == "dim") dim = size();
  else if (key == "blocks") blocks = size();
  else if (key == "heads") heads = size();
  else if (key == "window_f") window.f = size();
  else if (key == "window_h") window.h = size();
  else if (key == "window_w") window.w = size();
  else if (key == "pool_mode") pool_mode = parse_pool_mode(value);
  else if (key == "num_classes") num_classes = size();
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
  else return false;
  return true;
}

KeyValues ModelConfig::to_key_values() const {
  return {{"frames", std::to_string(frames)},
          {"height", std::to_string(height)},
          {"width", std::to_string(width)},
          {"channels", std::to_string(channels)},
          {"dim", std::to_string(dim)},
          {"blocks", std::to_string(blocks)},
          {"heads", std::to_string(heads)},
          {"window_f", std::to_string(window.f)},
          {"window_h", std::to_string(window.h)},
          {"window_w", std::to_string(window.w)},
          {"pool_mode", to_string(pool_mode)},
          {"num_classes", std::to_string(num_classes)},
          {"seed", std::to_string(seed)}};
}

Model Model::init(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Model m;
  m.config = config;
  m.embed = EmbedParams::init(config.frames, config.height, config.width, config.channels, config.dim, rng);
  for (std::size_t i = 0; i < config.blocks; ++i) {
    m.blocks.push_back(BlockParams::init(config.dim, config.heads, config.window, config.pool_mode, rng));
  }
  m.head_weight = fan_in_uniform({config.dim, config.num_classes}, config.dim, rng);
  m.head_bias = Tensor({config.num_classes});
  return m;
}

namespace {

template <typename M, typename Fn>
void visit_parameters(M& m, Fn&& fn) {
  fn("embed.proj_weight", m.embed.proj_weight);
  fn("embed.proj_bias", m.embed.proj_bias);
  fn("embed.spatial_pe", m.embed.spatial_pe);
  fn("embed.temporal_pe", m.embed.temporal_pe);
  fn("embed.cls_token", m.embed.cls_token);
  fn("embed.cls_pe", m.embed.cls_pe);
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    auto attention = [&](const std::string& name, auto& p) {
      for (std::size_t h = 0; h < p.wq.size(); ++h) fn(prefix + name + ".wq." + std::to_string(h), p.wq[h]);
      for (std::size_t h = 0; h < p.wk.size(); ++h) fn(prefix + name + ".wk." + std::to_string(h), p.wk[h]);
      for (std::size_t h = 0; h < p.wv.size(); ++h) fn(prefix + name + ".wv." + std::to_string(h), p.wv[h]);
      fn(prefix + name + ".wo", p.wo);
      fn(prefix + name + ".ln_gain", p.ln_gain);
      fn(prefix + name + ".ln_bias", p.ln_bias);
    };
    attention("local", blk.local);
    attention("global", blk.global);
    if (blk.pool.mode == PoolMode::learned) {
      fn(prefix + "pool.weight", blk.pool.weight);
      fn(prefix + "pool.bias", blk.pool.bias);
    }
    fn(prefix + "mlp.ln_gain", blk.mlp.ln_gain);
    fn(prefix + "mlp.ln_bias", blk.mlp.ln_bias);
    fn(prefix + "mlp.w1", blk.mlp.w1);
    fn(prefix + "mlp.b1", blk.mlp.b1);
    fn(prefix + "mlp.w2", blk.mlp.w2);
    fn(prefix + "mlp.b2", blk.mlp.b2);
  }
  fn("head.weight", m.head_weight);
  fn("head.bias", m.head_bias);
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> Model::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  visit_parameters(*this, [&](std::string name, Tensor& t) { out.emplace_back(std::move(name), &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit_parameters(*this, [&](std::string name, const Tensor& t) { out.emplace_back(std::move(name), &t); });
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t->size();
  return n;
}

Model Model::attach(Tape& tape) const {
  Model copy = *this;
  for (auto& [name, t] : copy.parameters()) *t = tape.leaf(*t);
  return copy;
}

TokenGrid encode(const Model& model, const ClipFeatures& clip) {
  const auto& c = model.config;
  if (clip.features.rank() != 4 || clip.frames() != c.frames || clip.height() != c.height ||
      clip.width() != c.width || clip.channels() != c.channels) {
    throw DimensionError("clip " + shape_str(clip.features.shape()) + " does not match model geometry " +
                         shape_str({c.frames, c.height, c.width, c.channels}));
  }
  TokenGrid x = embed(clip, model.embed);
  for (const auto& block : model.blocks) x = logo_block(x, block, c.window);
  return x;
}

Tensor cls_features(const Model& model, const ClipFeatures& clip) {
  return reshape(encode(model, clip).cls(), {model.config.dim});
}

Tensor forward(const Model& model, const ClipFeatures& clip) {
  Tensor cls = encode(model, clip).cls();
  return reshape(add_bias(matmul(cls, model.head_weight), model.head_bias), {model.config.num_classes});
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr std::uint8_t kMagic[4] = {0x4C, 0x47, 0x46, 0x4D};  // "LGFM"
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    auto c = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(in_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_), in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::string config_text(const KeyValues& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + "=" + v + "\n";
  return s;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le<std::uint32_t>(kVersion);
  const std::string text = config_text(ck.config);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xFFFF) throw ContractError("tensor name too long: " + name.substr(0, 32) + "...");
    if (t.rank() > 0xFF) throw ContractError("tensor rank too large for checkpoint: " + name);
    w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.le<std::uint64_t>(e);
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4, "magic");
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != kMagic[i]) throw FormatError("bad magic bytes, not an LGFM checkpoint", i);
  }
  r.str(4, "magic");
  const std::size_t version_at = r.offset();
  const auto version = r.le<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  Checkpoint ck;
  const auto text_len = r.le<std::uint32_t>("config length");
  const std::size_t text_at = r.offset();
  try {
    ck.config = parse_key_values(r.str(text_len, "config text"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed config blob: ") + e.what(), text_at);
  }
  const auto count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint16_t>("tensor name length");
    std::string name = r.str(name_len, "tensor name");
    const auto rank = r.le<std::uint8_t>("tensor rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& e : shape) {
      const std::size_t at = r.offset();
      e = r.le<std::uint64_t>("tensor extent");
      if (e == 0) throw FormatError("zero extent in tensor '" + name + "'", at);
      if (__builtin_mul_overflow(numel, e, &numel) || numel > bytes.size() / 8) {
        throw FormatError("tensor '" + name + "' larger than the file", at);
      }
    }
    r.need(numel * 8, "tensor data");
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64("tensor data");
    ck.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("trailing bytes after last tensor", r.offset());
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint to_checkpoint(const Model& model) {
  Checkpoint ck;
  ck.config = model.config.to_key_values();
  for (const auto& [name, t] : model.parameters()) ck.tensors.emplace_back(name, t->detached());
  return ck;
}

Model from_checkpoint(const Checkpoint& ck) {
  ModelConfig config;
  for (const auto& [k, v] : ck.config) {
    if (starts_with(k, "train.") || starts_with(k, "data.")) continue;
    if (!config.set(k, v)) throw ConfigError("unknown checkpoint config key '" + k + "'");
  }
  Model model = Model::init(config);
  auto params = model.parameters();
  std::size_t next = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (starts_with(name, "train.") || starts_with(name, "data.")) continue;
    if (next >= params.size() || params[next].first != name) {
      throw ConfigError("checkpoint tensor '" + name + "' does not match expected parameter '" +
                        (next < params.size() ? params[next].first : std::string("<end>")) + "'");
    }
    if (params[next].second->shape() != t.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                           shape_str(params[next].second->shape()));
    }
    *params[next].second = t.detached();
    ++next;
  }
  if (next != params.size()) throw ConfigError("checkpoint is missing parameter '" + params[next].first + "'");
  return model;
}

void save(const Model& model, const std::filesystem::path& path) { write_checkpoint(path, to_checkpoint(model)); }

Model load(const std::filesystem::path& path) { return from_checkpoint(read_checkpoint(path)); }

}  // namespace logo
