#include "denoise/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <atomic>
#include <thread>

#include <json.hpp>

namespace denoise {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// --- config field table -------------------------------------------------------

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
  bool model_key;  // participates in the architecture fingerprint
};

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw ContractViolation("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (...) {
    throw ContractViolation("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractViolation("config: key '" + key + "' expects true/false, got '" + v + "'");
}

#define INT_FIELD(name, model)                                                   \
  Field{#name, [](const TrainConfig& c) { return std::to_string(c.name); },      \
        [](TrainConfig& c, const std::string& v) { c.name = parse_int(#name, v); }, model}
#define REAL_FIELD(name, model)                                                  \
  Field{#name, [](const TrainConfig& c) { return fmt_double(c.name); },          \
        [](TrainConfig& c, const std::string& v) { c.name = parse_real(#name, v); }, model}
#define BOOL_FIELD(name, model)                                                  \
  Field{#name, [](const TrainConfig& c) { return c.name ? "true" : "false"; },   \
        [](TrainConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }, model}
#define STR_FIELD(name, model)                                                   \
  Field{#name, [](const TrainConfig& c) { return c.name; },                      \
        [](TrainConfig& c, const std::string& v) { c.name = v; }, model}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      Field{"mode", [](const TrainConfig& c) { return mode_name(c.mode); },
            [](TrainConfig& c, const std::string& v) { c.mode = mode_from_name(v); }, false},
      INT_FIELD(gradient_steps, false),
      REAL_FIELD(beta1, false),
      REAL_FIELD(beta2, false),
      INT_FIELD(warm_up_steps, false),
      REAL_FIELD(warm_up_start_learning_rate, false),
      REAL_FIELD(warm_up_max_learning_rate, false),
      REAL_FIELD(cosine_min_learning_rate, false),
      INT_FIELD(cosine_cycle_length, false),
      INT_FIELD(max_vertices_in_batch, false),
      INT_FIELD(max_edges_in_batch, false),
      INT_FIELD(max_graphs_in_batch, false),
      STR_FIELD(distance_featurization, true),
      INT_FIELD(featurizer_n_basis, true),
      REAL_FIELD(featurizer_r_min, true),
      REAL_FIELD(featurizer_mu, true),
      REAL_FIELD(featurizer_sigma, true),
      REAL_FIELD(connectivity_radius, true),
      INT_FIELD(max_edges_per_vertex, true),
      STR_FIELD(variant, true),
      STR_FIELD(activation, true),
      INT_FIELD(mlp_number_of_layers, true),
      INT_FIELD(mlp_hidden_size, true),
      INT_FIELD(message_passing_layers, true),
      INT_FIELD(block_iterations, true),
      INT_FIELD(latent_size, true),
      STR_FIELD(decoder_aggregation, true),
      INT_FIELD(decoder_mlp_layers, true),
      REAL_FIELD(tat_eta, true),
      REAL_FIELD(position_noise_sigma, false),
      BOOL_FIELD(mean_center_noise, false),
      REAL_FIELD(ema_decay, false),
      REAL_FIELD(position_loss_coefficient, false),
      REAL_FIELD(atom_type_mask_probability, false),
      REAL_FIELD(atom_type_loss_coefficient, false),
      REAL_FIELD(target_loss_coefficient, false),
      STR_FIELD(target_label, false),
      BOOL_FIELD(normalize_target, false),
      INT_FIELD(seed, false),
      INT_FIELD(eval_interval, false),
      INT_FIELD(early_stopping_patience, false),
      INT_FIELD(checkpoint_interval, false),
      REAL_FIELD(train_fraction, false),
      REAL_FIELD(valid_fraction, false),
  };
  return f;
}

#undef INT_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD
#undef STR_FIELD

}  // namespace

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::pretrain: return "pretrain";
    case Mode::finetune: return "finetune";
    case Mode::finetune_frozen_backbone: return "finetune_frozen_backbone";
  }
  return "?";
}

Mode mode_from_name(const std::string& s) {
  if (s == "pretrain") return Mode::pretrain;
  if (s == "finetune") return Mode::finetune;
  if (s == "finetune_frozen_backbone") return Mode::finetune_frozen_backbone;
  throw ContractViolation("config: unknown mode '" + s + "'");
}

void TrainConfig::validate() const {
  if (gradient_steps < 1) throw ContractViolation("config: gradient_steps must be >= 1");
  if (warm_up_steps < 0 || cosine_cycle_length < 1)
    throw ContractViolation("config: bad schedule lengths");
  if (warm_up_start_learning_rate > warm_up_max_learning_rate)
    throw ContractViolation("config: warm_up_start_learning_rate > warm_up_max_learning_rate");
  if (max_vertices_in_batch < 1 || max_edges_in_batch < 1 || max_graphs_in_batch < 1)
    throw ContractViolation("config: batch caps must be >= 1");
  if (distance_featurization != "bessel" && distance_featurization != "gaussian")
    throw ContractViolation("config: distance_featurization must be bessel or gaussian");
  if (variant != "gns" && variant != "gns_tat")
    throw ContractViolation("config: variant must be gns or gns_tat");
  if (variant == "gns" && activation != "shifted_softplus")
    throw ContractViolation("config: the gns variant forces activation=shifted_softplus");
  if (variant == "gns_tat" && activation != "tailored_lrelu")
    throw ContractViolation("config: the gns_tat variant forces activation=tailored_lrelu");
  if (decoder_aggregation != "sum" && decoder_aggregation != "mean")
    throw ContractViolation("config: decoder_aggregation must be sum or mean");
  if (position_noise_sigma < 0) throw ContractViolation("config: negative noise sigma");
  if (ema_decay < 0 || ema_decay >= 1) throw ContractViolation("config: ema_decay outside [0,1)");
  if (mode == Mode::pretrain && target_loss_coefficient != 0)
    throw ContractViolation("config: pretrain uses no labels; target_loss_coefficient must be 0");
  if (train_fraction < 0 || valid_fraction < 0 || train_fraction + valid_fraction > 1)
    throw ContractViolation("config: bad split fractions");
  if (eval_interval < 1) throw ContractViolation("config: eval_interval must be >= 1");
  gns_config().validate();
  loss_weights().validate();
}

GNSConfig TrainConfig::gns_config() const {
  GNSConfig c;
  c.variant = variant == "gns" ? Variant::gns : Variant::gns_tat;
  c.n_mp_layers = message_passing_layers;
  c.n_block_iterations = block_iterations;
  c.latent = latent_size;
  c.mlp_hidden = mlp_hidden_size;
  c.mlp_layers = mlp_number_of_layers;
  c.decoder_mlp_layers = decoder_mlp_layers;
  c.edge_feat_dim = featurizer_n_basis + 3;
  c.decoder_aggregation = decoder_aggregation == "sum" ? Aggregation::sum : Aggregation::mean;
  c.tat_eta = tat_eta;
  return c;
}

FeaturizerSpec TrainConfig::featurizer() const {
  FeaturizerSpec f;
  f.kind = distance_featurization == "bessel" ? FeaturizerSpec::Kind::bessel
                                              : FeaturizerSpec::Kind::gaussian;
  f.n_basis = featurizer_n_basis;
  f.r_cut = connectivity_radius;
  f.r_min = featurizer_r_min;
  f.sigma = featurizer_sigma;
  f.mu = featurizer_mu;
  return f;
}

NoiseSpec TrainConfig::noise() const {
  NoiseSpec n;
  n.sigma = position_noise_sigma;
  n.mean_center = mean_center_noise;
  n.seed = static_cast<std::uint64_t>(seed);
  return n;
}

LossWeights TrainConfig::loss_weights() const {
  LossWeights w;
  w.position_coeff = position_loss_coefficient;
  w.target_coeff = target_loss_coefficient;
  w.atom_type_coeff = atom_type_loss_coefficient;
  w.atom_mask_prob = atom_type_mask_probability;
  return w;
}

std::string TrainConfig::to_text() const {
  std::vector<std::pair<std::string, std::string>> kv;
  for (const Field& f : fields()) kv.emplace_back(f.key, f.get(*this));
  std::sort(kv.begin(), kv.end());
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  return os.str();
}

std::string TrainConfig::fingerprint() const { return hex64(fnv1a(to_text())); }

std::string TrainConfig::model_fingerprint() const {
  std::vector<std::pair<std::string, std::string>> kv;
  for (const Field& f : fields())
    if (f.model_key) kv.emplace_back(f.key, f.get(*this));
  std::sort(kv.begin(), kv.end());
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  return hex64(fnv1a(os.str()));
}

void TrainConfig::set(const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  std::ostringstream os;
  os << "config: unknown key '" << key << "'. Valid keys:";
  for (const Field& f : fields()) os << ' ' << f.key;
  throw ContractViolation(os.str());
}

std::vector<std::string> TrainConfig::valid_keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.push_back(f.key);
  return out;
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::string trimmed;
    for (char c : line)
      if (!std::isspace(static_cast<unsigned char>(c)) || !trimmed.empty()) trimmed.push_back(c);
    while (!trimmed.empty() && std::isspace(static_cast<unsigned char>(trimmed.back())))
      trimmed.pop_back();
    if (trimmed.empty() || trimmed[0] == '#') continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ContractViolation("config: line " + std::to_string(lineno) +
                              " is not 'key=value': '" + line + "'");
    cfg.set(trimmed.substr(0, eq), trimmed.substr(eq + 1));
  }
  return cfg;
}

TrainConfig TrainConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

// --- batching -----------------------------------------------------------------

std::vector<std::vector<int>> dynamic_batch(const std::vector<GraphDims>& stream,
                                            int max_vertices, int max_edges, int max_graphs) {
  if (max_vertices < 1 || max_edges < 1 || max_graphs < 1)
    throw ContractViolation("dynamic_batch: caps must be >= 1");
  std::vector<std::vector<int>> batches;
  std::vector<int> cur;
  int nv = 0, ne = 0;
  for (int i = 0; i < static_cast<int>(stream.size()); ++i) {
    const GraphDims& g = stream[static_cast<std::size_t>(i)];
    if (g.n_vertices > max_vertices)
      throw ContractViolation("dynamic_batch: graph " + std::to_string(i) + " has " +
                              std::to_string(g.n_vertices) +
                              " vertices, over the max_vertices_in_batch cap of " +
                              std::to_string(max_vertices));
    if (g.n_edges > max_edges)
      throw ContractViolation("dynamic_batch: graph " + std::to_string(i) + " has " +
                              std::to_string(g.n_edges) +
                              " edges, over the max_edges_in_batch cap of " +
                              std::to_string(max_edges));
    const bool fits = static_cast<int>(cur.size()) + 1 <= max_graphs &&
                      nv + g.n_vertices <= max_vertices && ne + g.n_edges <= max_edges;
    if (!fits && !cur.empty()) {
      batches.push_back(std::move(cur));
      cur.clear();
      nv = ne = 0;
    }
    cur.push_back(i);
    nv += g.n_vertices;
    ne += g.n_edges;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

// --- schedule / optimizer / EMA -------------------------------------------------

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw ContractViolation("lr_at: negative step");
  if (step < cfg.warm_up_steps) {
    const double f = static_cast<double>(step) / static_cast<double>(cfg.warm_up_steps);
    return cfg.warm_up_start_learning_rate +
           f * (cfg.warm_up_max_learning_rate - cfg.warm_up_start_learning_rate);
  }
  const std::int64_t t = step - cfg.warm_up_steps;
  if (t >= cfg.cosine_cycle_length) return cfg.cosine_min_learning_rate;
  const double phase = M_PI * static_cast<double>(t) / static_cast<double>(cfg.cosine_cycle_length);
  return cfg.cosine_min_learning_rate +
         0.5 * (cfg.warm_up_max_learning_rate - cfg.cosine_min_learning_rate) *
             (1.0 + std::cos(phase));
}

void adam_step(ParamStore& params, const std::vector<std::string>& names,
               const std::vector<std::vector<double>>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps, const std::vector<bool>* skip) {
  if (names.size() != grads.size())
    throw ContractViolation("adam_step: names/grads size mismatch");
  // validate every gradient before mutating anything, so a NaN aborts the
  // whole step
  for (std::size_t i = 0; i < names.size(); ++i)
    for (double g : grads[i])
      if (!std::isfinite(g))
        throw ContractViolation("adam_step: non-finite gradient for parameter '" + names[i] + "'");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (skip && (*skip)[i]) continue;
    Param& p = params.at(names[i]);
    auto& m = state.m[names[i]];
    auto& v = state.v[names[i]];
    if (m.empty()) m.assign(p.value.size(), 0.0);
    if (v.empty()) v.assign(p.value.size(), 0.0);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = grads[i][k];
      m[k] = beta1 * m[k] + (1.0 - beta1) * g;
      v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
      p.value[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
    }
  }
}

void ema_update(ParamStore& shadow, const ParamStore& params, double decay) {
  for (const auto& [name, p] : params) {
    Param& s = shadow.at(name);
    for (std::size_t k = 0; k < p.value.size(); ++k)
      s.value[k] = decay * s.value[k] + (1.0 - decay) * p.value[k];
  }
}

// --- checkpoints -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'P', 'C', 'K', 'P', 'T', '1', '\n'};

nlohmann::json manifest_of(const ParamStore& ps, std::int64_t* offset) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, p] : ps) {
    nlohmann::json t;
    t["name"] = name;
    t["dtype"] = "f64";
    t["shape"] = p.shape;
    t["init_scheme"] = p.init_scheme;
    t["backbone"] = p.backbone;
    t["offset"] = *offset;
    *offset += static_cast<std::int64_t>(p.value.size());
    arr.push_back(std::move(t));
  }
  return arr;
}

void append_values(const ParamStore& ps, std::vector<double>* payload) {
  for (const auto& [name, p] : ps) payload->insert(payload->end(), p.value.begin(), p.value.end());
}

nlohmann::json state_manifest(const std::map<std::string, std::vector<double>>& m,
                              std::int64_t* offset) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, v] : m) {
    nlohmann::json t;
    t["name"] = name;
    t["count"] = v.size();
    t["offset"] = *offset;
    *offset += static_cast<std::int64_t>(v.size());
    arr.push_back(std::move(t));
  }
  return arr;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = ckpt.format_version;
  header["config_fingerprint"] = ckpt.config_fingerprint;
  header["model_fingerprint"] = ckpt.model_fingerprint;
  header["step"] = ckpt.step;
  header["rng_state"] = ckpt.rng_state;
  header["adam_t"] = ckpt.opt.t;
  header["target_mean"] = ckpt.target_mean;
  header["target_std"] = ckpt.target_std;

  std::int64_t offset = 0;
  header["tensors"] = manifest_of(ckpt.params, &offset);
  header["ema"] = manifest_of(ckpt.ema, &offset);
  header["adam_m"] = state_manifest(ckpt.opt.m, &offset);
  header["adam_v"] = state_manifest(ckpt.opt.v, &offset);

  std::vector<double> payload;
  payload.reserve(static_cast<std::size_t>(offset));
  append_values(ckpt.params, &payload);
  append_values(ckpt.ema, &payload);
  for (const auto& [name, v] : ckpt.opt.m) payload.insert(payload.end(), v.begin(), v.end());
  for (const auto& [name, v] : ckpt.opt.v) payload.insert(payload.end(), v.begin(), v.end());

  const std::string head = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = head.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("'" + path + "' is not a checkpoint file");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string head(hlen, '\0');
  in.read(head.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw IoError("truncated checkpoint header in '" + path + "'");
  nlohmann::json header = nlohmann::json::parse(head, nullptr, false);
  if (header.is_discarded()) throw IoError("corrupt checkpoint header in '" + path + "'");
  if (header.at("format_version").get<int>() != 1)
    throw IoError("unsupported checkpoint format version in '" + path + "'");

  std::vector<double> payload;
  {
    std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (rest.size() % sizeof(double) != 0) throw IoError("truncated checkpoint payload");
    payload.resize(rest.size() / sizeof(double));
    std::memcpy(payload.data(), rest.data(), rest.size());
  }

  Checkpoint ckpt;
  ckpt.format_version = 1;
  ckpt.config_fingerprint = header.at("config_fingerprint").get<std::string>();
  ckpt.model_fingerprint = header.at("model_fingerprint").get<std::string>();
  ckpt.step = header.at("step").get<std::int64_t>();
  ckpt.rng_state = header.at("rng_state").get<std::string>();
  ckpt.opt.t = header.at("adam_t").get<std::int64_t>();
  ckpt.target_mean = header.at("target_mean").get<double>();
  ckpt.target_std = header.at("target_std").get<double>();

  auto read_store = [&](const nlohmann::json& arr, ParamStore* ps) {
    for (const auto& t : arr) {
      Param p;
      p.shape = t.at("shape").get<Shape>();
      p.init_scheme = t.at("init_scheme").get<std::string>();
      p.backbone = t.at("backbone").get<bool>();
      const std::int64_t off = t.at("offset").get<std::int64_t>();
      const std::int64_t n = numel(p.shape);
      if (off + n > static_cast<std::int64_t>(payload.size()))
        throw IoError("checkpoint payload too short for tensor " +
                      t.at("name").get<std::string>());
      p.value.assign(payload.begin() + off, payload.begin() + off + n);
      ps->add(t.at("name").get<std::string>(), std::move(p));
    }
  };
  read_store(header.at("tensors"), &ckpt.params);
  read_store(header.at("ema"), &ckpt.ema);
  auto read_state = [&](const nlohmann::json& arr, std::map<std::string, std::vector<double>>* m) {
    for (const auto& t : arr) {
      const std::int64_t off = t.at("offset").get<std::int64_t>();
      const std::int64_t n = t.at("count").get<std::int64_t>();
      if (off + n > static_cast<std::int64_t>(payload.size()))
        throw IoError("checkpoint payload too short for optimizer state");
      (*m)[t.at("name").get<std::string>()] =
          std::vector<double>(payload.begin() + off, payload.begin() + off + n);
    }
  };
  read_state(header.at("adam_m"), &ckpt.opt.m);
  read_state(header.at("adam_v"), &ckpt.opt.v);
  return ckpt;
}

// --- training ----------------------------------------------------------------------

namespace {

struct TargetStats {
  double mean = 0.0;
  double std_dev = 1.0;
};

TargetStats target_stats(const Dataset& data, const std::vector<int>& idx,
                         const std::string& label, bool normalize) {
  TargetStats st;
  if (!normalize || idx.empty()) return st;
  double m = 0;
  for (int i : idx) m += data[static_cast<std::size_t>(i)].labels.at(label);
  m /= static_cast<double>(idx.size());
  double v = 0;
  for (int i : idx) {
    const double d = data[static_cast<std::size_t>(i)].labels.at(label) - m;
    v += d * d;
  }
  v /= static_cast<double>(idx.size());
  st.mean = m;
  st.std_dev = std::max(std::sqrt(v), 1e-12);
  return st;
}

double label_of(const Structure& s, const std::string& label) {
  auto it = s.labels.find(label);
  if (it == s.labels.end())
    throw ContractViolation("structure has no label '" + label + "'");
  return it->second;
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  const int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace

double evaluate_mae(const Model& model, const ParamStore& params, const Dataset& data,
                    const std::vector<int>& indices, const TrainConfig& cfg, double target_mean,
                    double target_std, int threads) {
  if (indices.empty()) return std::numeric_limits<double>::quiet_NaN();
  const FeaturizerSpec feat = cfg.featurizer();
  std::vector<double> errs(indices.size(), 0.0);
  parallel_for(static_cast<int>(indices.size()), threads, [&](int k) {
    const Structure& s = data[static_cast<std::size_t>(indices[static_cast<std::size_t>(k)])];
    Tape tape;
    BoundParams bp = bind_params(tape, params);
    RadiusGraph g = build_graph(s, feat, cfg.max_edges_per_vertex);
    ForwardResult r = forward(tape, model, bp, g, s.atomic_numbers);
    const double pred =
        r.iterations.back().graph_pred.value()[0] * target_std + target_mean;
    errs[static_cast<std::size_t>(k)] = std::abs(pred - label_of(s, cfg.target_label));
  });
  double s = 0;
  for (double e : errs) s += e;
  return s / static_cast<double>(errs.size());
}

RunResult run(const TrainConfig& cfg, const Dataset& upstream, const Dataset& downstream,
              const RunOptions& opts) {
  cfg.validate();
  const bool pretraining = cfg.mode == Mode::pretrain;
  const bool frozen = cfg.mode == Mode::finetune_frozen_backbone;
  const Dataset& data = pretraining ? upstream : downstream;
  if (data.empty()) throw ContractViolation("run: training dataset is empty");

  // split (finetune modes only; pretraining uses the whole upstream set)
  DatasetSplit split;
  if (pretraining) {
    split.train.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) split.train[i] = static_cast<int>(i);
  } else {
    split = make_split(static_cast<int>(data.size()), cfg.train_fraction, cfg.valid_fraction,
                       static_cast<std::uint64_t>(cfg.seed));
  }
  if (split.train.empty()) throw ContractViolation("run: empty training split");

  const TargetStats stats =
      pretraining ? TargetStats{}
                  : target_stats(data, split.train, cfg.target_label, cfg.normalize_target);

  Model model = Model::create(cfg.gns_config());
  ParamStore params = init_params(model, static_cast<std::uint64_t>(cfg.seed));
  ParamStore ema = params;
  AdamState opt;
  std::int64_t start_step = 0;

  if (!opts.resume_checkpoint.empty()) {
    Checkpoint ckpt = load_checkpoint(opts.resume_checkpoint);
    if (ckpt.config_fingerprint != cfg.fingerprint())
      throw ContractViolation("resume: checkpoint was written by a different config");
    params = ckpt.params;
    ema = ckpt.ema;
    opt = ckpt.opt;
    start_step = ckpt.step;
  } else if (!opts.init_checkpoint.empty()) {
    if (pretraining)
      throw ContractViolation("run: init_checkpoint applies to finetune modes only");
    Checkpoint ckpt = load_checkpoint(opts.init_checkpoint);
    if (ckpt.model_fingerprint != cfg.model_fingerprint())
      throw ContractViolation(
          "finetune: checkpoint architecture does not match this config (model fingerprints "
          "differ)");
    // backbone from the pre-trained EMA shadow; decoder heads stay fresh
    for (auto& [name, p] : params) {
      if (!p.backbone) continue;
      const Param& src = ckpt.ema.at(name);
      if (src.shape != p.shape)
        throw ContractViolation("finetune: shape mismatch for backbone parameter '" + name + "'");
      p.value = src.value;
    }
    ema = params;
  }

  // frozen-backbone updates touch decoder parameters only
  std::vector<std::string> names = params.names();
  std::vector<bool> skip(names.size(), false);
  if (frozen)
    for (std::size_t i = 0; i < names.size(); ++i) skip[i] = params.at(names[i]).backbone;

  // per-structure graph dims on clean geometry, for batching
  const FeaturizerSpec feat = cfg.featurizer();
  std::vector<GraphDims> dims(split.train.size());
  for (std::size_t k = 0; k < split.train.size(); ++k) {
    const Structure& s = data[static_cast<std::size_t>(split.train[k])];
    RadiusGraph g = build_graph(s, feat, cfg.max_edges_per_vertex);
    dims[k] = {g.n_vertices, g.n_edges()};
  }

  // epoch schedule: shuffled order, then greedy batches
  auto epoch_batches = [&](std::int64_t epoch) {
    std::vector<int> order(split.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    RandomStream rng(derive_seed(static_cast<std::uint64_t>(cfg.seed),
                                 static_cast<std::uint64_t>(epoch), 0xba7c));
    rng.shuffle(order);
    std::vector<GraphDims> stream(order.size());
    for (std::size_t i = 0; i < order.size(); ++i)
      stream[i] = dims[static_cast<std::size_t>(order[i])];
    auto batches = dynamic_batch(stream, cfg.max_vertices_in_batch, cfg.max_edges_in_batch,
                                 cfg.max_graphs_in_batch);
    // map positions back to train-split slots
    for (auto& b : batches)
      for (int& pos : b) pos = order[static_cast<std::size_t>(pos)];
    return batches;
  };

  const LossWeights weights = cfg.loss_weights();
  NoiseSpec noise = cfg.noise();

  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);
  std::ofstream metrics_file;
  std::string metrics_path;
  if (!opts.out_dir.empty()) {
    metrics_path = opts.out_dir + "/metrics.csv";
    metrics_file.open(metrics_path, start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics_file) throw IoError("cannot write '" + metrics_path + "'");
    if (start_step == 0) metrics_file << "step,lr,loss_total,loss_pos,loss_type,loss_target,val_mae\n";
  }

  RunResult result;
  double best_val = std::numeric_limits<double>::infinity();
  ParamStore best_ema = ema;
  std::int64_t evals_since_best = 0;
  bool stopped_early = false;

  std::int64_t epoch = 0;
  std::vector<std::vector<int>> batches = epoch_batches(0);
  std::size_t batch_idx = 0;
  // fast-forward the schedule on resume
  for (std::int64_t s = 0; s < start_step; ++s) {
    if (++batch_idx >= batches.size()) {
      batches = epoch_batches(++epoch);
      batch_idx = 0;
    }
  }

  for (std::int64_t step = start_step; step < cfg.gradient_steps && !stopped_early; ++step) {
    const std::vector<int>& batch = batches[batch_idx];

    // corrupt + mask each structure with a per-(step, slot) stream
    std::vector<Structure> noisy;
    noisy.reserve(batch.size());
    std::vector<double> eps_all;
    std::vector<int> embed_index;
    MaskResult mask_all;
    std::vector<double> targets;
    int base_vertex = 0;
    for (std::size_t slot = 0; slot < batch.size(); ++slot) {
      const Structure& s = data[static_cast<std::size_t>(split.train[static_cast<std::size_t>(
          batch[slot])])];
      RandomStream rng(derive_seed(static_cast<std::uint64_t>(cfg.seed),
                                   static_cast<std::uint64_t>(step) * 0x10001 +
                                       static_cast<std::uint64_t>(slot),
                                   0xc0de));
      CorruptResult cr = corrupt(s, noise, rng);
      MaskResult mr = apply_type_mask(s.atomic_numbers, weights.atom_mask_prob, rng);
      for (int idx : mr.embed_index) embed_index.push_back(idx);
      for (std::size_t i = 0; i < mr.masked_position.size(); ++i) {
        mask_all.masked_position.push_back(base_vertex + mr.masked_position[i]);
        mask_all.masked_class.push_back(mr.masked_class[i]);
      }
      base_vertex += s.n_atoms();
      eps_all.insert(eps_all.end(), cr.target.begin(), cr.target.end());
      noisy.push_back(std::move(cr.noisy));
      if (!pretraining && weights.target_coeff > 0)
        targets.push_back((label_of(s, cfg.target_label) - stats.mean) / stats.std_dev);
    }
    std::vector<const Structure*> ptrs;
    ptrs.reserve(noisy.size());
    for (const auto& s : noisy) ptrs.push_back(&s);
    RadiusGraph graph = build_batch_graph(ptrs, feat, cfg.max_edges_per_vertex);

    Tape tape;
    BoundParams bp = bind_params(tape, params);
    ForwardResult fwd = forward(tape, model, bp, graph, embed_index);
    Tensor eps_t = tape.constant({graph.n_vertices, 3}, eps_all);

    Tensor total = tape.scalar(0.0);
    double pos_term = 0, type_term = 0, target_term = 0;
    for (const auto& iter : fwd.iterations) {
      NoisyNodesTerms terms =
          noisy_nodes_loss(tape, iter.graph_pred, targets, iter.noise_pred, eps_t, graph.graph_id,
                           graph.n_graphs, iter.type_logits, mask_all, weights);
      total = tape.add(total, terms.total);
      pos_term += terms.position;
      type_term += terms.atom_type;
      target_term += terms.target;
    }
    const double inv_iters = 1.0 / static_cast<double>(fwd.iterations.size());
    total = tape.affine(total, inv_iters, 0.0);
    pos_term *= inv_iters;
    type_term *= inv_iters;
    target_term *= inv_iters;

    const double lr = lr_at(step, cfg);
    auto grads = tape.grad(total, bp.tensors);
    adam_step(params, names, grads, opt, lr, cfg.beta1, cfg.beta2, 1e-8,
              frozen ? &skip : nullptr);
    ema_update(ema, params, cfg.ema_decay);

    StepMetrics sm;
    sm.step = step + 1;
    sm.lr = lr;
    sm.loss_total = total.scalar();
    sm.loss_pos = pos_term;
    sm.loss_type = type_term;
    sm.loss_target = target_term;
    result.final_loss = sm.loss_total;

    const bool eval_now = !pretraining && !split.valid.empty() &&
                          ((step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.gradient_steps);
    if (eval_now) {
      const double val =
          evaluate_mae(model, ema, data, split.valid, cfg, stats.mean, stats.std_dev, opts.threads);
      sm.val_mae = val;
      if (val < best_val) {
        best_val = val;
        best_ema = ema;
        evals_since_best = 0;
      } else if (++evals_since_best >= cfg.early_stopping_patience) {
        stopped_early = true;
      }
    }

    if (metrics_file) {
      metrics_file << sm.step << ',' << fmt_double(sm.lr) << ',' << fmt_double(sm.loss_total)
                   << ',' << fmt_double(sm.loss_pos) << ',' << fmt_double(sm.loss_type) << ','
                   << fmt_double(sm.loss_target) << ','
                   << (sm.val_mae ? fmt_double(*sm.val_mae) : "") << '\n';
    }
    result.metrics.push_back(std::move(sm));
    result.steps_run = step + 1;

    if (!opts.out_dir.empty() && cfg.checkpoint_interval > 0 &&
        (step + 1) % cfg.checkpoint_interval == 0 && step + 1 < cfg.gradient_steps) {
      Checkpoint ckpt{1,       cfg.fingerprint(), cfg.model_fingerprint(), step + 1,
                      "seed=" + std::to_string(cfg.seed) + ";step=" + std::to_string(step + 1),
                      params,  ema,               opt, stats.mean, stats.std_dev};
      save_checkpoint(opts.out_dir + "/ckpt_step" + std::to_string(step + 1) + ".bin", ckpt);
    }

    if (opts.verbose && ((step + 1) % 100 == 0 || step == start_step))
      std::fprintf(stderr, "step %lld loss %.6f lr %.2e\n",
                   static_cast<long long>(step + 1), result.final_loss, lr);

    if (++batch_idx >= batches.size()) {
      batches = epoch_batches(++epoch);
      batch_idx = 0;
    }
  }

  if (!pretraining) {
    if (split.valid.empty()) best_ema = ema;
    result.best_val_mae = split.valid.empty() ? std::numeric_limits<double>::quiet_NaN() : best_val;
    result.test_mae = evaluate_mae(model, best_ema, data, split.test, cfg, stats.mean,
                                   stats.std_dev, opts.threads);
  }

  if (!opts.out_dir.empty()) {
    Checkpoint ckpt{1,      cfg.fingerprint(), cfg.model_fingerprint(), result.steps_run,
                    "seed=" + std::to_string(cfg.seed) + ";step=" + std::to_string(result.steps_run),
                    params, ema,               opt, stats.mean, stats.std_dev};
    result.checkpoint_path = opts.out_dir + "/checkpoint.bin";
    save_checkpoint(result.checkpoint_path, ckpt);
    result.metrics_path = metrics_path;
  }
  return result;
}

}  // namespace denoise
