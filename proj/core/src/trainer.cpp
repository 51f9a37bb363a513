#include "ushl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "ushl/attention.hpp"
#include "ushl/errors.hpp"
#include "ushl/parallel.hpp"

namespace ushl {

namespace fs = std::filesystem;

void adam_step(ModelParams<float>& params, const GradMap& grads, OptimState& state, double lr,
               double weight_decay, const AdamConfig& adam) {
  for (const auto& [name, g] : grads) {
    if (!params.tensors.count(name)) throw ContractViolation("adam_step: gradient for unknown parameter '" + name + "'");
    if (g.shape() != params.at(name).shape()) {
      throw ContractViolation("adam_step: gradient shape mismatch for '" + name + "'");
    }
    for (float v : g.values()) {
      if (!std::isfinite(v)) throw NumericFault("adam_step: non-finite gradient for '" + name + "'");
    }
  }

  ++state.step;
  state.lr = lr;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(adam.beta1, t);
  const double c2 = 1.0 - std::pow(adam.beta2, t);
  for (auto& [name, theta] : params.tensors) {
    auto& m = state.m.try_emplace(name, theta.shape(), 0.0f).first->second;
    auto& v = state.v.try_emplace(name, theta.shape(), 0.0f).first->second;
    const auto it = grads.find(name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = it == grads.end() ? 0.0 : double(it->second[i]);
      g += weight_decay * double(theta[i]);
      const double mi = adam.beta1 * double(m[i]) + (1.0 - adam.beta1) * g;
      const double vi = adam.beta2 * double(v[i]) + (1.0 - adam.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      theta[i] = static_cast<float>(double(theta[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + adam.eps));
    }
  }
}

BatchGradient batch_gradient(std::span<const UserSample* const> users, const ModelParams<float>& params,
                             const LossConfig& loss) {
  ad::Tape<float> tape;
  ForwardContext<float> ctx(tape, params, ad::NormMode::kTrain);
  const auto traces = score_forward_batch(ctx, users);
  BatchGradient out;
  std::vector<ad::Var<float>> totals;
  for (std::size_t i = 0; i < users.size(); ++i) {
    const auto terms = total_loss(traces[i].scores, users[i]->labels, loss);
    totals.push_back(ad::reshape(terms.total, Shape{1}));
    out.loss += terms.breakdown;
  }
  const auto objective = ad::mean(ad::concat(std::span<const ad::Var<float>>(totals), 0));
  const auto grads = tape.backward(objective);
  for (const auto& [name, var] : ctx.bound()) out.grads.emplace(name, grads[var]);
  out.observed = ctx.observed();
  return out;
}

LossBreakdown sample_loss(const UserSample& user, const ModelParams<float>& params,
                          const LossConfig& loss) {
  ad::Tape<float> tape;
  ForwardContext<float> ctx(tape, params, ad::NormMode::kEval);
  const auto trace = score_forward(ctx, user);
  return total_loss(trace.scores, user.labels, loss).breakdown;
}

namespace {

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

double validation_loss(const std::vector<UserSample>& corpus, const std::vector<std::size_t>& idx,
                       const ModelParams<float>& params, const LossConfig& loss, std::size_t workers) {
  std::vector<double> per(idx.size());
  parallel_for(idx.size(), workers, [&](std::size_t i) {
    per[i] = sample_loss(corpus[idx[i]], params, loss).total;
  });
  return std::accumulate(per.begin(), per.end(), 0.0) / double(per.size());
}

}  // namespace

TrainResult train(const std::vector<UserSample>& corpus, ModelParams<float> init,
                  const TrainConfig& cfg, const LossConfig& loss, const EpochCallback& on_epoch) {
  if (corpus.empty()) throw ContractViolation("train: empty corpus");
  cfg.validate();
  loss.validate();

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> train_idx = iota(corpus.size());
  std::vector<std::size_t> val_idx;
  if (cfg.early_stopping) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    auto n_val = static_cast<std::size_t>(std::round(cfg.validation_fraction * double(corpus.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, corpus.size() - 1);
    if (corpus.size() < 2) throw ConfigError("train: early stopping needs at least two users");
    val_idx.assign(train_idx.begin(), train_idx.begin() + std::ptrdiff_t(n_val));
    train_idx.erase(train_idx.begin(), train_idx.begin() + std::ptrdiff_t(n_val));
    std::sort(train_idx.begin(), train_idx.end());
  }

  TrainResult result{std::move(init), {}, {}, 0};
  ModelParams<float> best = result.params;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    LossBreakdown epoch_loss;

    for (std::size_t start = 0, batch = 0; start < train_idx.size(); start += cfg.batch_size, ++batch) {
      const std::size_t n = std::min(cfg.batch_size, train_idx.size() - start);
      std::vector<const UserSample*> members(n);
      for (std::size_t i = 0; i < n; ++i) members[i] = &corpus[train_idx[start + i]];
      try {
        const auto g = batch_gradient(members, result.params, loss);
        epoch_loss += g.loss;
        adam_step(result.params, g.grads, result.optim, lr, cfg.weight_decay);
        update_running_stats(result.params, g.observed);
      } catch (const NumericFault& e) {
        throw NumericFault("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " +
                           e.what());
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train = epoch_loss.scaled(1.0 / double(train_idx.size()));
    if (cfg.early_stopping) {
      rec.validation = validation_loss(corpus, val_idx, result.params, loss, cfg.workers);
      if (*rec.validation < best_val) {
        best_val = *rec.validation;
        best = result.params;
        result.best_epoch = epoch;
        since_best = 0;
      } else {
        ++since_best;
      }
    } else {
      result.best_epoch = epoch;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (cfg.early_stopping && since_best >= cfg.patience) break;
  }
  if (cfg.early_stopping) result.params = std::move(best);
  return result;
}

// Checkpoints ---------------------------------------------------------------

namespace {

nlohmann::json tensor_entry(const fs::path& dir, const std::string& file, const Tensor<float>& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream os(dir / file, std::ios::binary);
  if (!os) throw LoadError("cannot write " + (dir / file).string());
  os.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!os) throw LoadError("cannot write " + (dir / file).string());
  return {{"file", file}, {"shape", t.shape()}, {"crc32", crc32_of(bytes)}};
}

Tensor<float> read_entry(const fs::path& dir, const nlohmann::json& entry) {
  const fs::path path = dir / entry.at("file").get<std::string>();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingFileError("missing checkpoint tensor " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (crc32_of(bytes) != entry.at("crc32").get<std::uint32_t>()) {
    throw ChecksumError("checksum mismatch in " + path.string());
  }
  auto t = decode_tensor(bytes, path.string());
  if (t.shape() != entry.at("shape").get<Shape>()) throw ShapeError("shape mismatch in " + path.string());
  return t;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ModelParams<float>& params, const CheckpointInfo& info) {
  fs::create_directories(dir);
  nlohmann::json m;
  m["format"] = "ushl-checkpoint";
  m["schema_version"] = 1;
  m["config"] = params.config;
  m["epoch"] = info.epoch;
  m["seed"] = info.seed;
  m["rng_state"] = info.rng_state;
  m["extra"] = info.extra;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : params.tensors) tensors[name] = tensor_entry(dir, name + ".phlt", t);
  nlohmann::json norms = nlohmann::json::object();
  for (const auto& [name, s] : params.norms) {
    norms[name] = {{"mean", tensor_entry(dir, name + ".running_mean.phlt", s.mean)},
                   {"var", tensor_entry(dir, name + ".running_var.phlt", s.var)}};
  }
  m["tensors"] = std::move(tensors);
  m["norms"] = std::move(norms);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw LoadError("cannot write " + (dir / "manifest.json").string());
  os << m.dump(1) << '\n';
}

ModelParams<float> load_checkpoint(const fs::path& dir, CheckpointInfo* info) {
  const fs::path path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw MissingFileError("missing checkpoint manifest " + path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
  try {
    ModelParams<float> params;
    params.config = m.at("config").get<EngineConfig>();
    params.config.validate();
    // The freshly initialised layout is the reference for names and shapes.
    const auto layout = ModelParams<float>::init(params.config, 0);
    for (const auto& [name, ref] : layout.tensors) {
      if (!m.at("tensors").contains(name)) throw FormatError("checkpoint lacks parameter '" + name + "'");
      auto t = read_entry(dir, m["tensors"][name]);
      if (t.shape() != ref.shape()) throw ShapeError("parameter '" + name + "' has shape " + to_string(t.shape()));
      params.tensors.emplace(name, std::move(t));
    }
    for (const auto& [name, ref] : layout.norms) {
      if (!m.at("norms").contains(name)) throw FormatError("checkpoint lacks statistics '" + name + "'");
      const auto& e = m["norms"][name];
      params.norms.emplace(name, ad::BatchStats<float>{read_entry(dir, e.at("mean")), read_entry(dir, e.at("var"))});
    }
    if (info) {
      info->epoch = m.at("epoch").get<std::size_t>();
      info->seed = m.at("seed").get<std::uint64_t>();
      info->rng_state = m.value("rng_state", std::string{});
      info->extra = m.value("extra", nlohmann::json::object());
    }
    return params;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace ushl
