#include "wxgan/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

using nlohmann::json;

namespace wxgan {

namespace {

json parse_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + origin + ": " + e.what());
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where,
                const std::string& origin) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object in " + origin);
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where + " of " + origin);
  }
}

// reads j[key] into `out` if present; wrong types surface as ConfigError
template <class T>
void take(const json& j, const char* key, T& out, const std::string& origin) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "' in " + origin + ": " + e.what());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (the martingale penalty is a batch mean)");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (optim.lr_g <= 0 || optim.lr_d <= 0) throw ConfigError("learning rates must be positive");
  if (optim.beta1 < 0 || optim.beta1 >= 1 || optim.beta2 < 0 || optim.beta2 >= 1)
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  if (optim.eps <= 0) throw ConfigError("optimizer eps must be positive");
  if (optim.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (martingale_weight < 0) throw ConfigError("martingale_weight must be non-negative");
  if (dataset.empty()) throw ConfigError("dataset path is required");
  if (out_dir.empty()) throw ConfigError("out_dir is required");
  if (model.gen.d_z < 1) throw ConfigError("d_z must be >= 1");
  if (model.encoder.d_c < 1) throw ConfigError("d_c must be >= 1");
  sinkhorn.validate();
}

TrainConfig train_config_from_json_text(const std::string& text, const std::string& origin) {
  json j = parse_text(text, origin);
  check_keys(j,
             {"seed", "dataset", "out_dir", "epochs", "batch_size", "checkpoint_every", "model", "loss",
              "optimizer"},
             "top level", origin);

  TrainConfig cfg;
  take(j, "seed", cfg.seed, origin);
  take(j, "dataset", cfg.dataset, origin);
  take(j, "out_dir", cfg.out_dir, origin);
  take(j, "epochs", cfg.epochs, origin);
  take(j, "batch_size", cfg.batch_size, origin);
  take(j, "checkpoint_every", cfg.checkpoint_every, origin);

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"d_c", "d_z", "encoder", "generator", "discriminator", "condition_m", "context_pool"},
               "model", origin);
    int d_c = cfg.model.encoder.d_c;
    take(m, "d_c", d_c, origin);
    take(m, "d_z", cfg.model.gen.d_z, origin);
    cfg.model.encoder.d_c = d_c;
    cfg.model.gen.d_c = d_c;
    cfg.model.disc.d_c = d_c;
    take(m, "condition_m", cfg.model.condition_m, origin);
    if (m.contains("context_pool")) {
      std::string p = m.at("context_pool").get<std::string>();
      if (p == "last")
        cfg.model.gen_pool = ContextPool::kLast;
      else if (p == "mean")
        cfg.model.gen_pool = ContextPool::kMean;
      else
        throw ConfigError("context_pool must be \"last\" or \"mean\" in " + origin);
    }
    if (m.contains("encoder")) {
      const json& e = m.at("encoder");
      check_keys(e, {"conv_channels", "lstm1_hidden", "lrelu_slope"}, "model.encoder", origin);
      take(e, "conv_channels", cfg.model.encoder.conv_channels, origin);
      take(e, "lstm1_hidden", cfg.model.encoder.lstm1_hidden, origin);
      take(e, "lrelu_slope", cfg.model.encoder.lrelu_slope, origin);
    }
    if (m.contains("generator")) {
      const json& g = m.at("generator");
      check_keys(g, {"lstm_hidden", "seed_channels", "mid_channels", "lrelu_slope"}, "model.generator",
                 origin);
      take(g, "lstm_hidden", cfg.model.gen.lstm_hidden, origin);
      take(g, "seed_channels", cfg.model.gen.seed_channels, origin);
      take(g, "mid_channels", cfg.model.gen.mid_channels, origin);
      take(g, "lrelu_slope", cfg.model.gen.lrelu_slope, origin);
    }
    if (m.contains("discriminator")) {
      const json& d = m.at("discriminator");
      check_keys(d, {"conv_channels", "lstm_hidden", "J", "lrelu_slope"}, "model.discriminator", origin);
      take(d, "conv_channels", cfg.model.disc.conv_channels, origin);
      take(d, "lstm_hidden", cfg.model.disc.lstm_hidden, origin);
      take(d, "J", cfg.model.disc.J, origin);
      take(d, "lrelu_slope", cfg.model.disc.lrelu_slope, origin);
    }
  }

  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, {"epsilon", "iterations", "lambda", "martingale_weight"}, "loss", origin);
    take(l, "epsilon", cfg.sinkhorn.eps, origin);
    take(l, "iterations", cfg.sinkhorn.iters, origin);
    take(l, "lambda", cfg.sinkhorn.lambda, origin);
    take(l, "martingale_weight", cfg.martingale_weight, origin);
  }

  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    check_keys(o, {"lr_g", "lr_d", "beta1", "beta2", "eps", "weight_decay"}, "optimizer", origin);
    take(o, "lr_g", cfg.optim.lr_g, origin);
    take(o, "lr_d", cfg.optim.lr_d, origin);
    take(o, "beta1", cfg.optim.beta1, origin);
    take(o, "beta2", cfg.optim.beta2, origin);
    take(o, "eps", cfg.optim.eps, origin);
    take(o, "weight_decay", cfg.optim.weight_decay, origin);
  }

  cfg.validate();
  return cfg;
}

std::string train_config_to_json_text(const TrainConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["dataset"] = cfg.dataset;
  j["out_dir"] = cfg.out_dir;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["model"]["d_c"] = cfg.model.encoder.d_c;
  j["model"]["d_z"] = cfg.model.gen.d_z;
  j["model"]["condition_m"] = cfg.model.condition_m;
  j["model"]["context_pool"] = cfg.model.gen_pool == ContextPool::kLast ? "last" : "mean";
  j["model"]["encoder"]["conv_channels"] = cfg.model.encoder.conv_channels;
  j["model"]["encoder"]["lstm1_hidden"] = cfg.model.encoder.lstm1_hidden;
  j["model"]["encoder"]["lrelu_slope"] = cfg.model.encoder.lrelu_slope;
  j["model"]["generator"]["lstm_hidden"] = cfg.model.gen.lstm_hidden;
  j["model"]["generator"]["seed_channels"] = cfg.model.gen.seed_channels;
  j["model"]["generator"]["mid_channels"] = cfg.model.gen.mid_channels;
  j["model"]["generator"]["lrelu_slope"] = cfg.model.gen.lrelu_slope;
  j["model"]["discriminator"]["conv_channels"] = cfg.model.disc.conv_channels;
  j["model"]["discriminator"]["lstm_hidden"] = cfg.model.disc.lstm_hidden;
  j["model"]["discriminator"]["J"] = cfg.model.disc.J;
  j["model"]["discriminator"]["lrelu_slope"] = cfg.model.disc.lrelu_slope;
  j["loss"]["epsilon"] = cfg.sinkhorn.eps;
  j["loss"]["iterations"] = cfg.sinkhorn.iters;
  j["loss"]["lambda"] = cfg.sinkhorn.lambda;
  j["loss"]["martingale_weight"] = cfg.martingale_weight;
  j["optimizer"]["lr_g"] = cfg.optim.lr_g;
  j["optimizer"]["lr_d"] = cfg.optim.lr_d;
  j["optimizer"]["beta1"] = cfg.optim.beta1;
  j["optimizer"]["beta2"] = cfg.optim.beta2;
  j["optimizer"]["eps"] = cfg.optim.eps;
  j["optimizer"]["weight_decay"] = cfg.optim.weight_decay;
  return j.dump(2);
}

TrainConfig load_train_config(const std::string& path) {
  return train_config_from_json_text(read_file(path), path);
}

uint64_t config_hash(const TrainConfig& cfg) {
  // nlohmann objects iterate key-sorted, so dump() of the defaults-filled
  // round trip is canonical. out_dir stays out of the fingerprint: where the
  // artifacts land does not change the trajectory, and a resume must be able
  // to write somewhere new.
  json j = json::parse(train_config_to_json_text(cfg));
  j.erase("out_dir");
  return fnv1a64(j.dump());
}

ToyGenConfig toy_config_from_json_text(const std::string& text, const std::string& origin) {
  json j = parse_text(text, origin);
  check_keys(j, {"H", "W", "T", "K", "sequences", "blob_radius", "blob_speed", "noise_level", "seed"},
             "top level", origin);
  ToyGenConfig cfg;
  take(j, "H", cfg.H, origin);
  take(j, "W", cfg.W, origin);
  take(j, "T", cfg.T, origin);
  take(j, "K", cfg.K, origin);
  take(j, "sequences", cfg.sequences, origin);
  take(j, "blob_radius", cfg.blob_radius, origin);
  take(j, "blob_speed", cfg.blob_speed, origin);
  take(j, "noise_level", cfg.noise_level, origin);
  take(j, "seed", cfg.seed, origin);
  cfg.validate();
  return cfg;
}

ToyGenConfig load_toy_config(const std::string& path) {
  return toy_config_from_json_text(read_file(path), path);
}

void apply_dataset_geometry(GanSpec& spec, const DatasetManifest& m) {
  spec.encoder.K = m.K;
  spec.gen.C = m.C;
  spec.gen.H = m.H;
  spec.gen.W = m.W;
  spec.disc.C = m.C;
}

}  // namespace wxgan
