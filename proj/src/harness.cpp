#include "logo/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "logo/random.hpp"

namespace logo {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool strip_prefix(std::string& s, const char* prefix) {
  if (s.rfind(prefix, 0) != 0) return false;
  s.erase(0, std::char_traits<char>::length(prefix));
  return true;
}

template <typename T>
T parse_value(const std::string& key, const std::string& value) {
  T out{};
  if constexpr (std::is_integral_v<T>) {
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end || value.empty()) {
      throw ConfigError("invalid value '" + value + "' for key '" + key + "'");
    }
  } else {
    std::istringstream in(value);
    in >> out;
    if (!in || !in.eof()) throw ConfigError("invalid value '" + value + "' for key '" + key + "'");
  }
  return out;
}

// Runs fn(i) for i in [0, n) across `workers` threads in contiguous chunks.
// Each index writes only its own output slot, so results come out in input
// order regardless of the worker count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void check_geometry(const ModelConfig& c, const Dataset& data) {
  if (data.empty()) throw ContractError("dataset is empty");
  const Shape want{c.frames, c.height, c.width, c.channels};
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].clip.features.shape() != want) {
      throw ContractError("sample " + std::to_string(i) + " has shape " + shape_str(data[i].clip.features.shape()) +
                          ", model expects " + shape_str(want));
    }
    if (data[i].label >= c.num_classes) {
      throw ContractError("sample " + std::to_string(i) + " has label " + std::to_string(data[i].label) +
                          " but the model has " + std::to_string(c.num_classes) + " classes");
    }
  }
}

}  // namespace

// ---- synthetic clips --------------------------------------------------------

void SyntheticSpec::validate() const {
  if (class_signal_scale < 0 || noise_scale < 0 || temporal_drift < 0) {
    throw ConfigError("signal, noise and drift scales must be non-negative");
  }
  if (clips_per_class < 1) throw ConfigError("clips_per_class must be at least 1");
  if (num_classes < 1 || frames == 0 || height == 0 || width == 0 || channels == 0) {
    throw ConfigError("synthetic geometry and class count must be positive");
  }
}

SyntheticSpec SyntheticSpec::matching(const ModelConfig& model) {
  SyntheticSpec s;
  s.num_classes = model.num_classes;
  s.frames = model.frames;
  s.height = model.height;
  s.width = model.width;
  s.channels = model.channels;
  return s;
}

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Shape shape{spec.frames, spec.height, spec.width, spec.channels};
  const std::size_t frame_size = spec.height * spec.width * spec.channels;

  std::mt19937_64 proto_rng(spec.prototype_seed.value_or(0));
  std::mt19937_64& draw = spec.prototype_seed ? proto_rng : rng;
  std::vector<Tensor> prototypes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) prototypes.push_back(normal_tensor(shape, 1.0, draw));

  std::uniform_real_distribution<double> phase(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset out;
  out.reserve(spec.num_classes * spec.clips_per_class);
  for (std::size_t i = 0; i < spec.clips_per_class; ++i) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      const Tensor& proto = prototypes[c];
      const double alpha = std::min(1.0, spec.temporal_drift * phase(rng));
      Tensor clip(shape);
      for (std::size_t t = 0; t < spec.frames; ++t) {
        const std::size_t next = (t + 1) % spec.frames;
        for (std::size_t j = 0; j < frame_size; ++j) {
          const double signal = (1.0 - alpha) * proto[t * frame_size + j] + alpha * proto[next * frame_size + j];
          clip[t * frame_size + j] = spec.class_signal_scale * signal + spec.noise_scale * noise(rng);
        }
      }
      out.push_back(Sample{ClipFeatures{std::move(clip)}, c});
    }
  }
  return out;
}

// ---- training ---------------------------------------------------------------

void TrainConfig::validate() const {
  model.validate();
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
}

TrainState TrainState::fresh(const ModelConfig& config) {
  TrainState s{Model::init(config), {}, 0};
  for (const auto& [name, t] : s.model.parameters()) s.velocity.emplace_back(t->shape());
  return s;
}

RunHistory train(TrainState& state, const TrainConfig& config, const Dataset& data, const EpochCallback& on_epoch) {
  config.validate();
  if (!(state.model.config == config.model)) throw ContractError("training state was built for a different model config");
  check_geometry(config.model, data);
  auto params = state.model.parameters();
  if (state.velocity.empty()) {
    for (const auto& [name, t] : params) state.velocity.emplace_back(t->shape());
  }
  if (state.velocity.size() != params.size()) throw ContractError("optimizer state does not match the model");

  RunHistory history;
  std::vector<std::size_t> order(data.size());
  std::vector<Tensor> accum;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const std::size_t epoch = state.epochs_done + 1;
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    std::vector<std::size_t> preds, labels;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      accum.clear();
      for (const auto& [name, t] : params) accum.emplace_back(t->shape());
      for (std::size_t b = start; b < stop; ++b) {
        const Sample& s = data[order[b]];
        Tape tape;
        const Model traced = state.model.attach(tape);
        Tensor logits = forward(traced, s.clip);
        LossBreakdown loss = total_loss(logits, s.label, config.lambda);
        Gradients grads = backward(tape, loss.objective);
        const auto traced_params = traced.parameters();
        for (std::size_t j = 0; j < params.size(); ++j) {
          const auto g = grads.of(*traced_params[j].second);
          for (std::size_t i = 0; i < g.size(); ++i) accum[j][i] += g[i];
        }
        rec.loss_total += loss.total;
        rec.loss_ce += loss.cross_entropy;
        rec.loss_compact += loss.compact_term;
        preds.push_back(argmax(logits));
        labels.push_back(s.label);
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t j = 0; j < params.size(); ++j) {
        Tensor& p = *params[j].second;
        Tensor& v = state.velocity[j];
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = config.momentum * v[i] + accum[j][i] * inv;
          p[i] -= config.lr * v[i];
        }
      }
    }
    const double n = static_cast<double>(data.size());
    rec.loss_total /= n;
    rec.loss_ce /= n;
    rec.loss_compact /= n;
    history.final_metrics = evaluate(preds, labels, config.model.num_classes);
    rec.train_uar = history.final_metrics.uar;
    rec.train_war = history.final_metrics.war;
    history.epochs.push_back(rec);
    state.epochs_done = epoch;
    if (on_epoch && !on_epoch(rec, state)) break;
  }
  return history;
}

std::pair<Model, RunHistory> train(const TrainConfig& config, const Dataset& data) {
  TrainState state = TrainState::fresh(config.model);
  RunHistory history = train(state, config, data);
  return {std::move(state.model), std::move(history)};
}

std::string history_csv(const RunHistory& history) {
  std::string out = "epoch,loss_total,loss_ce,loss_compact,train_uar,train_war\n";
  for (const auto& r : history.epochs) {
    out += std::to_string(r.epoch) + "," + fmt(r.loss_total) + "," + fmt(r.loss_ce) + "," + fmt(r.loss_compact) +
           "," + fmt(r.train_uar) + "," + fmt(r.train_war) + "\n";
  }
  return out;
}

// ---- run config ---------------------------------------------------------------

bool RunConfig::set(const std::string& raw_key, const std::string& value) {
  std::string key = raw_key;
  const bool train_only = strip_prefix(key, "train.");
  const bool data_only = !train_only && strip_prefix(key, "data.");
  if (!train_only && !data_only && train.model.set(key, value)) {
    sync_data_geometry();
    return true;
  }
  if (!data_only) {
    if (key == "lr") return train.lr = parse_value<double>(key, value), true;
    if (key == "momentum") return train.momentum = parse_value<double>(key, value), true;
    if (key == "epochs") return train.epochs = parse_value<std::size_t>(key, value), true;
    if (key == "batch_size") return train.batch_size = parse_value<std::size_t>(key, value), true;
    if (key == "lambda") return train.lambda = parse_value<double>(key, value), true;
    if (key == "train_seed") return train.seed = parse_value<std::uint64_t>(key, value), true;
  }
  if (!train_only) {
    if (key == "clips_per_class") return data.clips_per_class = parse_value<std::size_t>(key, value), true;
    if (key == "signal_scale") return data.class_signal_scale = parse_value<double>(key, value), true;
    if (key == "noise_scale") return data.noise_scale = parse_value<double>(key, value), true;
    if (key == "temporal_drift") return data.temporal_drift = parse_value<double>(key, value), true;
    if (key == "data_seed") return data.seed = parse_value<std::uint64_t>(key, value), true;
  }
  return false;
}

void RunConfig::sync_data_geometry() {
  const auto& m = train.model;
  data.num_classes = m.num_classes;
  data.frames = m.frames;
  data.height = m.height;
  data.width = m.width;
  data.channels = m.channels;
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig rc;
  for (const auto& [k, v] : parse_key_values(text)) {
    if (!rc.set(k, v)) throw ConfigError("unknown config key '" + k + "'");
  }
  rc.sync_data_geometry();
  rc.train.validate();
  rc.data.validate();
  return rc;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv = train.model.to_key_values();
  kv.emplace_back("train.lr", fmt(train.lr));
  kv.emplace_back("train.momentum", fmt(train.momentum));
  kv.emplace_back("train.epochs", std::to_string(train.epochs));
  kv.emplace_back("train.batch_size", std::to_string(train.batch_size));
  kv.emplace_back("train.lambda", fmt(train.lambda));
  kv.emplace_back("train.train_seed", std::to_string(train.seed));
  kv.emplace_back("data.clips_per_class", std::to_string(data.clips_per_class));
  kv.emplace_back("data.signal_scale", fmt(data.class_signal_scale));
  kv.emplace_back("data.noise_scale", fmt(data.noise_scale));
  kv.emplace_back("data.temporal_drift", fmt(data.temporal_drift));
  kv.emplace_back("data.data_seed", std::to_string(data.seed));
  return kv;
}

Checkpoint to_checkpoint(const TrainState& state, const RunConfig& run) {
  Checkpoint ck = to_checkpoint(state.model);
  ck.config = run.to_key_values();
  ck.config.emplace_back("train.epochs_done", std::to_string(state.epochs_done));
  const auto params = state.model.parameters();
  for (std::size_t j = 0; j < params.size() && j < state.velocity.size(); ++j) {
    ck.tensors.emplace_back("train.velocity." + params[j].first, state.velocity[j].detached());
  }
  return ck;
}

TrainState train_state_from(const Checkpoint& ck) {
  TrainState s{from_checkpoint(ck), {}, 0};
  for (const auto& [k, v] : ck.config)
    if (k == "train.epochs_done") s.epochs_done = parse_value<std::size_t>(k, v);
  for (const auto& [name, t] : s.model.parameters()) {
    const std::string want = "train.velocity." + name;
    auto it = std::find_if(ck.tensors.begin(), ck.tensors.end(), [&](const auto& e) { return e.first == want; });
    if (it == ck.tensors.end()) {
      s.velocity.emplace_back(t->shape());
    } else {
      if (it->second.shape() != t->shape()) throw DimensionError("velocity tensor '" + want + "' has the wrong shape");
      s.velocity.push_back(it->second.detached());
    }
  }
  return s;
}

RunConfig run_config_from(const Checkpoint& ck) {
  RunConfig rc;
  for (const auto& [k, v] : ck.config) {
    if (k == "train.epochs_done") continue;
    if (!rc.set(k, v)) throw ConfigError("unknown checkpoint config key '" + k + "'");
  }
  rc.sync_data_geometry();
  return rc;
}

// ---- evaluation -------------------------------------------------------------

std::size_t eval_workers() {
  const char* env = std::getenv("LOGO_EVAL_WORKERS");
  if (!env || !*env) return 1;
  const auto n = parse_value<std::size_t>("LOGO_EVAL_WORKERS", env);
  return std::max<std::size_t>(n, 1);
}

std::vector<std::size_t> predict(const Model& model, const Dataset& data, std::size_t workers) {
  check_geometry(model.config, data);
  std::vector<std::size_t> out(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) { out[i] = argmax(forward(model, data[i].clip)); });
  return out;
}

Metrics evaluate_model(const Model& model, const Dataset& data, std::size_t workers) {
  const auto preds = predict(model, data, workers);
  std::vector<std::size_t> labels;
  for (const auto& s : data) labels.push_back(s.label);
  return evaluate(preds, labels, model.config.num_classes);
}

// ---- gradient check ---------------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
  return std::abs(analytic - numeric) / denom;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.frames = 2;
  c.height = 2;
  c.width = 2;
  c.channels = 4;
  c.dim = 8;
  c.heads = 2;
  c.blocks = 1;
  c.window = WindowSpec{1, 2, 1};
  c.num_classes = 3;
  c.seed = 11;
  return c;
}

GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options) {
  Model model = Model::init(config);
  SyntheticSpec spec = SyntheticSpec::matching(config);
  spec.clips_per_class = (options.clips + config.num_classes - 1) / config.num_classes;
  spec.seed = options.data_seed;
  Dataset data = generate(spec);
  data.resize(std::min(data.size(), std::max<std::size_t>(options.clips, 1)));

  // Encoder output held constant in head-only mode.
  std::vector<Tensor> frozen_cls;
  if (options.head_only) {
    for (const auto& s : data) frozen_cls.push_back(reshape(cls_features(model, s.clip), {1, config.dim}));
  }

  auto objective = [&](const Model& m) {
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      Tensor logits = options.head_only
                          ? reshape(add_bias(matmul(frozen_cls[i], m.head_weight), m.head_bias), {config.num_classes})
                          : forward(m, data[i].clip);
      total = add(total, total_loss(logits, data[i].label, options.lambda).objective);
    }
    return total;
  };

  Tape tape;
  Model traced = model;
  if (options.head_only) {
    traced.head_weight = tape.leaf(model.head_weight);
    traced.head_bias = tape.leaf(model.head_bias);
  } else {
    traced = model.attach(tape);
  }
  Gradients grads = backward(tape, objective(traced));

  GradcheckReport report;
  auto params = model.parameters();
  const auto traced_params = traced.parameters();
  for (std::size_t j = 0; j < params.size(); ++j) {
    const auto& [name, tensor] = params[j];
    if (options.head_only && name.rfind("head.", 0) != 0) continue;
    const Tensor analytic = grads.of(*traced_params[j].second);
    GradcheckEntry entry{name, tensor->size(), 0.0, 0.0};
    for (std::size_t i = 0; i < tensor->size(); ++i) {
      const double saved = (*tensor)[i];
      (*tensor)[i] = saved + options.step;
      const double plus = objective(model).item();
      (*tensor)[i] = saved - options.step;
      const double minus = objective(model).item();
      (*tensor)[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric));
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(analytic[i] - numeric));
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst = name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---- cost sweep -------------------------------------------------------------

CostGridRow parse_cost_row(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    if (b == std::string::npos) throw ConfigError("empty field in cost row '" + text + "'");
    v.push_back(parse_value<std::size_t>("cost row", field.substr(b, e - b + 1)));
  }
  if (v.size() != 6) throw ConfigError("cost row '" + text + "' needs six fields F,H,W,f,h,w");
  return CostGridRow{v[0], v[1], v[2], v[3], v[4], v[5]};
}

std::vector<CostGridRow> parse_cost_grid(const std::string& text) {
  std::vector<CostGridRow> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    rows.push_back(parse_cost_row(line));
  }
  return rows;
}

std::string cost_csv_header() {
  return "F,H,W,f,h,w,cost_local,cost_global,cost_logo_total,cost_full,cost_spatial_only,cost_divided,"
         "cost_mixing,ordering_ok\n";
}

std::string cost_sweep(std::span<const CostGridRow> grid, std::size_t workers) {
  std::vector<std::string> lines(grid.size());
  parallel_for(grid.size(), workers, [&](std::size_t i) {
    const auto& g = grid[i];
    std::string line = std::to_string(g.F) + "," + std::to_string(g.H) + "," + std::to_string(g.W) + "," +
                       std::to_string(g.f) + "," + std::to_string(g.h) + "," + std::to_string(g.w) + ",";
    try {
      const CostReport r = cost_report(g.F, g.H, g.W, g.f, g.h, g.w);
      line += std::to_string(r.cost_local) + "," + std::to_string(r.cost_global) + "," +
              std::to_string(r.cost_logo_total) + "," + std::to_string(r.cost_full) + "," +
              std::to_string(r.cost_spatial_only) + "," + std::to_string(r.cost_divided) + "," +
              std::to_string(r.cost_mixing) + "," + (r.ordering_ok() ? "true" : "false");
    } catch (const Error&) {
      line += ",,,,,,,invalid";
    }
    lines[i] = line + "\n";
  });
  std::string out = cost_csv_header();
  for (const auto& l : lines) out += l;
  return out;
}

// ---- embedding export -------------------------------------------------------

std::string embeddings_csv(const Model& model, const Dataset& data, std::size_t workers) {
  check_geometry(model.config, data);
  std::vector<std::string> rows(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    const Tensor feat = cls_features(model, data[i].clip);
    std::string row = std::to_string(data[i].label);
    for (double v : feat.data()) row += "," + fmt(v);
    rows[i] = row + "\n";
  });
  std::string out = "label";
  for (std::size_t j = 0; j < model.config.dim; ++j) out += ",e" + std::to_string(j);
  out += "\n";
  for (const auto& r : rows) out += r;
  return out;
}

void export_embeddings(const Model& model, const Dataset& data, const std::filesystem::path& path) {
  const std::string csv = embeddings_csv(model, data, eval_workers());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << csv;
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace logo
