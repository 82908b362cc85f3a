#include "comprepr/trainer.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace comprepr {

double lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 0) throw ContractError("lr_at: epoch must be non-negative");
  double lr = schedule.base_lr;
  for (const auto& [milestone, multiplier] : schedule.milestones) {
    if (milestone <= epoch) lr *= multiplier;
  }
  return lr;
}

OptimizerState make_optimizer(std::span<const ParamRef> params, double momentum, double weight_decay,
                              LrSchedule schedule) {
  OptimizerState state;
  state.lr = schedule.base_lr;
  state.momentum = momentum;
  state.weight_decay = weight_decay;
  state.schedule = std::move(schedule);
  state.velocity.reserve(params.size());
  for (const ParamRef& p : params) state.velocity.emplace_back(Eigen::VectorXd::Zero(p.tensor.size()));
  return state;
}

void sgd_step(std::span<const ParamRef> params, OptimizerState& state) {
  if (params.size() != state.velocity.size()) {
    throw ContractError("sgd_step: optimizer was built for a different parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamRef& p = params[i];
    Tensor t = p.tensor;  // cheap handle copy for mutable value access
    auto grad = t.grad();
    if (!grad.allFinite()) throw NumericError("non-finite gradient for parameter '" + p.name + "'");
    Eigen::VectorXd& v = state.velocity[i];
    v = state.momentum * v + grad;
    if (p.decay && state.weight_decay != 0.0) v += state.weight_decay * t.flat();
    t.flat() -= state.lr * v;
  }
}

LrSchedule RunConfig::schedule() const {
  LrSchedule s;
  s.base_lr = lr;
  if (lr_milestones.empty()) {
    s.milestones = {{epochs_pretrain + 40, 0.1}};
  } else {
    s.milestones = lr_milestones;
  }
  return s;
}

void RunConfig::validate() const {
  if (epochs_pretrain < 0 || epochs_finetune < 0) throw ContractError("epoch counts must be non-negative");
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  if (lr <= 0.0) throw ContractError("learning rate must be positive");
  if (hidden_dim < 1 || embedding_dim < 1 || hidden_layers < 1) {
    throw ContractError("model dimensions must be positive");
  }
  loss.validate();
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

namespace {

Tensor batch_features(const SplitDataset& ds, std::span<const std::size_t> idx) {
  const std::int64_t d = ds.feature_dim();
  Tensor batch = Tensor::zeros({static_cast<std::int64_t>(idx.size()), d});
  auto bm = batch.matrix();
  for (std::size_t i = 0; i < idx.size(); ++i) bm.row(static_cast<std::int64_t>(i)) = ds.examples[idx[i]].features;
  return batch;
}

std::map<std::int64_t, std::int64_t> dense_label_map(std::span<const std::int64_t> categories) {
  std::map<std::int64_t, std::int64_t> map;
  for (std::int64_t cat : categories) map.emplace(cat, static_cast<std::int64_t>(map.size()));
  return map;
}

double top1_accuracy(const EncoderParams& encoder, const ClassifierHead& head, const SplitDataset& ds,
                     std::span<const std::size_t> idx, const std::map<std::int64_t, std::int64_t>& labels) {
  if (idx.empty()) return 0.0;
  Tensor logits = classify_batch(head, encode_batch(encoder, batch_features(ds, idx)).embedding);
  auto lm = logits.matrix();
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::int64_t best = 0;
    lm.row(static_cast<std::int64_t>(i)).maxCoeff(&best);
    if (best == labels.at(ds.examples[idx[i]].category)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

/// Refit of every regularized layer's attribute embedding to the current
/// activations: least squares on |activations - indicator * eta|_F, then a
/// short eta-only cosine descent so the joint phase starts aligned.
void warm_start_etas(const EncoderParams& encoder, EtaSet& etas, const SplitDataset& ds,
                     std::span<const std::size_t> idx, const BatchDerivations& derivs, int refine_steps,
                     double refine_lr) {
  const std::int64_t k = etas.final_eta.count();
  RowMatrix indicator = RowMatrix::Zero(static_cast<std::int64_t>(idx.size()), k);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::int64_t a : derivs[i].attrs) indicator(static_cast<std::int64_t>(i), a) = 1.0;
  }
  Eigen::MatrixXd gram = indicator.transpose() * indicator;
  gram.diagonal().array() += 1e-9;
  const auto solver = gram.ldlt();

  EncodeResult enc = encode_batch(encoder, batch_features(ds, idx));
  auto refit = [&](AttributeEmbedding& eta, const Tensor& activations) {
    Tensor target = eta.eta;
    target.matrix() = solver.solve(indicator.transpose() * activations.matrix());
    bool usable = true;
    for (const Derivation& d : derivs) {
      if (d.empty()) {
        usable = false;  // cosine target undefined; keep the plain least-squares fit
        break;
      }
    }
    if (!usable) return;
    Tensor frozen = Tensor::zeros(activations.shape());
    frozen.flat() = activations.flat();
    for (int step = 0; step < refine_steps; ++step) {
      target.zero_grad();
      Tensor loss = hard_comp_from_embeddings(frozen, eta, derivs);
      backward(loss);
      target.flat() -= refine_lr * target.grad();
    }
  };
  refit(etas.final_eta, enc.embedding);
  for (auto& [layer, eta] : etas.taps) refit(eta, enc.taps.at(layer));
}

std::string config_canonical(const RunConfig& c) {
  std::ostringstream out;
  out << "variant=" << static_cast<int>(c.loss.variant) << " lambda=" << c.loss.lambda << " beta=" << c.loss.beta
      << " soft_impl=" << static_cast<int>(c.loss.soft_impl) << " neg_ratio=" << c.loss.neg_sample_ratio
      << " sample=" << c.loss.sample_negatives << " deep=";
  for (int l : c.loss.deep_layers) out << l << ',';
  out << " pre=" << c.epochs_pretrain << " fine=" << c.epochs_finetune << " batch=" << c.batch_size
      << " seed=" << c.seed << " head=" << static_cast<int>(c.head) << " scale=" << c.cosine_scale
      << " lr=" << c.lr << " mom=" << c.momentum << " wd=" << c.weight_decay << " hidden=" << c.hidden_dim
      << " emb=" << c.embedding_dim << " layers=" << c.hidden_layers << " warm=" << c.eta_warm_start;
  return out.str();
}

}  // namespace

std::vector<ParamRef> collect_parameters(const EncoderParams& encoder, const EtaSet& etas,
                                         const ClassifierHead& head) {
  std::vector<ParamRef> params;
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    params.push_back({"encoder.layer" + std::to_string(i) + ".weight", encoder.layers[i].weight, true});
    params.push_back({"encoder.layer" + std::to_string(i) + ".bias", encoder.layers[i].bias, true});
  }
  params.push_back({"head.weight", head.weights, true});
  if (head.kind == HeadKind::linear) params.push_back({"head.bias", head.bias, true});
  params.push_back({"eta.final", etas.final_eta.eta, false});
  for (const auto& [layer, eta] : etas.taps) {
    params.push_back({"eta.tap" + std::to_string(layer), eta.eta, false});
  }
  return params;
}

TrainResult train_base(const RunConfig& config) {
  return train_base(config, load_dataset(config.dataset_path));
}

TrainResult train_base(const RunConfig& config, const SplitDataset& dataset) {
  config.validate();
  if (dataset.base_categories.empty()) throw ContractError("train_base: dataset has no base categories");
  const auto start = std::chrono::steady_clock::now();

  const std::int64_t k = dataset.vocab.size();
  const auto base_labels = dense_label_map(dataset.base_categories);

  Rng init_rng(derive_seed(config.seed, "model-init"));
  Rng batch_rng(derive_seed(config.seed, "batch-order"));
  Rng negative_rng(derive_seed(config.seed, "negative-sampling"));

  std::vector<std::int64_t> dims{dataset.feature_dim()};
  for (int i = 0; i < config.hidden_layers; ++i) dims.push_back(config.hidden_dim);
  dims.push_back(config.embedding_dim);

  TrainResult result;
  result.encoder = init_encoder(dims, init_rng);
  result.encoder.tap_layers = config.loss.deep_layers;
  result.head = init_head(config.head, static_cast<std::int64_t>(base_labels.size()), config.embedding_dim, init_rng,
                          config.cosine_scale);
  result.etas = init_eta_set(k, result.encoder, config.loss, init_rng);

  const std::vector<ParamRef> params = collect_parameters(result.encoder, result.etas, result.head);
  OptimizerState optimizer = make_optimizer(params, config.momentum, config.weight_decay, config.schedule());

  const auto train_idx = dataset.base_train_indices();
  const auto val_idx = dataset.base_val_indices();
  if (train_idx.empty()) throw ContractError("train_base: no base training examples");

  LossConfig pretrain_loss;  // classification only
  pretrain_loss.variant = CompVariant::none;

  const int total_epochs = config.epochs_pretrain + config.epochs_finetune;
  std::vector<std::size_t> order(train_idx);
  result.record.config_hash = [&] {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(config_canonical(config))));
    return std::string(buf);
  }();

  auto write_checkpoint = [&](const std::filesystem::path& path) {
    if (path.empty()) return;
    auto arrays = pack_model(result.encoder, result.etas, result.head);
    save_checkpoint(path, arrays);
  };

  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const bool finetuning = epoch >= config.epochs_pretrain;
    const LossConfig& active = finetuning ? config.loss : pretrain_loss;
    if (epoch == config.epochs_pretrain && finetuning && config.eta_warm_start &&
        config.loss.variant == CompVariant::hard) {
      std::vector<std::int64_t> cats(train_idx.size());
      for (std::size_t i = 0; i < train_idx.size(); ++i) cats[i] = dataset.examples[train_idx[i]].category;
      warm_start_etas(result.encoder, result.etas, dataset, train_idx, lookup_derivations(dataset.table, cats),
                      200, config.lr);
    }
    optimizer.lr = lr_at(optimizer.schedule, epoch);

    batch_rng.shuffle(order);
    double sum_cls = 0.0, sum_comp = 0.0, sum_orth = 0.0;
    std::size_t seen = 0;
    for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t len = std::min(order.size() - off, static_cast<std::size_t>(config.batch_size));
      std::span<const std::size_t> idx(order.data() + off, len);

      Tensor batch = batch_features(dataset, idx);
      std::vector<std::int64_t> labels(len);
      std::vector<std::int64_t> cats(len);
      for (std::size_t i = 0; i < len; ++i) {
        cats[i] = dataset.examples[idx[i]].category;
        labels[i] = base_labels.at(cats[i]);
      }
      BatchDerivations derivs = lookup_derivations(dataset.table, cats);

      for (const ParamRef& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
      }
      LossBreakdown loss;
      try {
        loss = total_loss(result.encoder, result.etas, result.head, batch, labels, derivs, active, &negative_rng);
        backward(loss.total);
        sgd_step(params, optimizer);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch offset " +
                           std::to_string(off) + ")");
      }
      sum_cls += loss.cls * static_cast<double>(len);
      sum_comp += loss.comp * static_cast<double>(len);
      sum_orth += loss.orth * static_cast<double>(len);
      seen += len;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss_cls = sum_cls / static_cast<double>(seen);
    stats.loss_comp = sum_comp / static_cast<double>(seen);
    stats.loss_orth = sum_orth / static_cast<double>(seen);
    stats.base_val_top1 = top1_accuracy(result.encoder, result.head, dataset, val_idx, base_labels);
    stats.lr = optimizer.lr;
    result.record.epochs.push_back(stats);

    if (epoch + 1 == config.epochs_pretrain && config.epochs_finetune > 0) {
      auto boundary = config.checkpoint_path;
      if (!boundary.empty()) boundary += ".pretrain";
      write_checkpoint(boundary);
    }
  }

  // Final residual diagnostics over the base training slice.
  {
    Tensor batch = batch_features(dataset, train_idx);
    std::vector<std::int64_t> cats(train_idx.size());
    for (std::size_t i = 0; i < train_idx.size(); ++i) cats[i] = dataset.examples[train_idx[i]].category;
    BatchDerivations derivs = lookup_derivations(dataset.table, cats);
    auto residuals = residual_diagnostic(result.encoder, result.etas.final_eta, batch, derivs);

    EncodeResult enc = encode_batch(result.encoder, batch);
    Tensor targets = derivation_sums(result.etas.final_eta, derivs);
    auto fm = enc.embedding.matrix();
    auto tm = targets.matrix();
    ResidualSummary& summary = result.record.final_residual;
    for (std::size_t i = 0; i < residuals.size(); ++i) {
      const auto row = static_cast<std::int64_t>(i);
      summary.mean_residual_norm += residuals[i];
      summary.mean_embedding_norm += fm.row(row).norm();
      summary.mean_target_norm += tm.row(row).norm();
      const double denom = fm.row(row).norm() * tm.row(row).norm();
      if (denom > kNormEpsilon) summary.mean_cos_distance += 1.0 - fm.row(row).dot(tm.row(row)) / denom;
    }
    const auto n = static_cast<double>(residuals.size());
    summary.mean_residual_norm /= n;
    summary.mean_embedding_norm /= n;
    summary.mean_target_norm /= n;
    summary.mean_cos_distance /= n;
  }

  write_checkpoint(config.checkpoint_path);
  result.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCkptHeader = "comprepr-ckpt v1";

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedArray> arrays) {
  std::ostringstream payload;
  for (const NamedArray& a : arrays) {
    if (a.name.find_first_of(" \t\n\r") != std::string::npos) {
      throw ContractError("checkpoint tensor name '" + a.name + "' contains whitespace");
    }
    if (shape_size(a.shape) != static_cast<std::int64_t>(a.values.size())) {
      throw DimensionError("checkpoint tensor '" + a.name + "' value count does not match its shape");
    }
    payload << "tensor " << a.name << ' ' << a.shape.size();
    for (std::int64_t d : a.shape) payload << ' ' << d;
    payload << '\n';
    payload.write(reinterpret_cast<const char*>(a.values.data()),
                  static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  }
  const std::string body = payload.str();
  const std::uint64_t checksum = fnv1a64(body.data(), body.size());

  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
  char hex[20];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(checksum));
  file << kCkptHeader << '\n' << body << "checksum " << hex << '\n';
  if (!file.flush()) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path.string() + "' for reading");

  std::string header;
  if (!std::getline(file, header)) throw ParseError("empty checkpoint file", 1);
  if (header != kCkptHeader) {
    if (header.rfind("comprepr-ckpt", 0) == 0) throw VersionError("unsupported checkpoint version '" + header + "'");
    throw ParseError("not a checkpoint file", 1);
  }

  std::string body;
  std::vector<NamedArray> arrays;
  std::string line;
  while (std::getline(file, line)) {
    if (line.rfind("checksum ", 0) == 0) {
      const std::uint64_t declared = std::strtoull(line.c_str() + 9, nullptr, 16);
      if (declared != fnv1a64(body.data(), body.size())) {
        throw ParseError("checkpoint checksum mismatch (file is corrupt or truncated)", 0);
      }
      return arrays;
    }
    std::istringstream ss(line);
    std::string kw, name;
    std::size_t rank = 0;
    if (!(ss >> kw >> name >> rank) || kw != "tensor") throw ParseError("malformed tensor record '" + line + "'", 0);
    NamedArray a;
    a.name = name;
    for (std::size_t i = 0; i < rank; ++i) {
      std::int64_t d = 0;
      if (!(ss >> d)) throw ParseError("malformed shape in tensor record '" + line + "'", 0);
      a.shape.push_back(d);
    }
    const std::int64_t count = shape_size(a.shape);
    a.values.resize(static_cast<std::size_t>(count));
    if (!file.read(reinterpret_cast<char*>(a.values.data()), count * static_cast<std::int64_t>(sizeof(double)))) {
      throw ParseError("checkpoint truncated inside tensor '" + name + "'", 0);
    }
    body += line;
    body += '\n';
    body.append(reinterpret_cast<const char*>(a.values.data()), static_cast<std::size_t>(count) * sizeof(double));
    arrays.push_back(std::move(a));
  }
  throw ParseError("checkpoint ends without a checksum record", 0);
}

std::vector<NamedArray> pack_model(const EncoderParams& encoder, const EtaSet& etas, const ClassifierHead& head) {
  std::vector<NamedArray> arrays;
  auto push = [&](const std::string& name, const Tensor& t) {
    NamedArray a;
    a.name = name;
    a.shape = t.shape();
    a.values.assign(t.flat().data(), t.flat().data() + t.size());
    arrays.push_back(std::move(a));
  };
  for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
    push("encoder.layer" + std::to_string(i) + ".weight", encoder.layers[i].weight);
    push("encoder.layer" + std::to_string(i) + ".bias", encoder.layers[i].bias);
  }
  {
    NamedArray taps;
    taps.name = "encoder.taps";
    taps.shape = {static_cast<std::int64_t>(encoder.tap_layers.size())};
    for (int t : encoder.tap_layers) taps.values.push_back(static_cast<double>(t));
    arrays.push_back(std::move(taps));
  }
  push("head.weight", head.weights);
  if (head.kind == HeadKind::linear) push("head.bias", head.bias);
  arrays.push_back(NamedArray{"head.kind", {1}, {head.kind == HeadKind::cosine ? 1.0 : 0.0}});
  arrays.push_back(NamedArray{"head.scale", {1}, {head.scale}});
  push("eta.final", etas.final_eta.eta);
  for (const auto& [layer, eta] : etas.taps) push("eta.tap" + std::to_string(layer), eta.eta);
  return arrays;
}

void unpack_model(std::span<const NamedArray> arrays, EncoderParams& encoder, EtaSet& etas, ClassifierHead& head) {
  auto find = [&](const std::string& name) -> const NamedArray* {
    for (const NamedArray& a : arrays) {
      if (a.name == name) return &a;
    }
    return nullptr;
  };
  auto require = [&](const std::string& name) -> const NamedArray& {
    const NamedArray* a = find(name);
    if (!a) throw ParseError("checkpoint is missing tensor '" + name + "'", 0);
    return *a;
  };
  auto to_tensor = [](const NamedArray& a, bool requires_grad) {
    return Tensor::from_values(a.shape, a.values, requires_grad);
  };

  encoder = EncoderParams{};
  for (std::size_t i = 0;; ++i) {
    const NamedArray* w = find("encoder.layer" + std::to_string(i) + ".weight");
    if (!w) break;
    const NamedArray& b = require("encoder.layer" + std::to_string(i) + ".bias");
    encoder.layers.push_back(DenseLayer{to_tensor(*w, true), to_tensor(b, true)});
  }
  if (encoder.layers.empty()) throw ParseError("checkpoint has no encoder layers", 0);
  for (double t : require("encoder.taps").values) encoder.tap_layers.push_back(static_cast<int>(t));
  encoder.validate();

  head = ClassifierHead{};
  head.kind = require("head.kind").values.at(0) == 1.0 ? HeadKind::cosine : HeadKind::linear;
  head.scale = require("head.scale").values.at(0);
  head.weights = to_tensor(require("head.weight"), true);
  if (head.kind == HeadKind::linear) head.bias = to_tensor(require("head.bias"), true);

  etas = EtaSet{};
  etas.final_eta = AttributeEmbedding{to_tensor(require("eta.final"), true)};
  for (const NamedArray& a : arrays) {
    if (a.name.rfind("eta.tap", 0) == 0) {
      const int layer = std::stoi(a.name.substr(7));
      etas.taps.emplace(layer, AttributeEmbedding{to_tensor(a, true)});
    }
  }
}

void save_run_record(const std::filesystem::path& path, const RunRecord& record) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
  file << "comprepr-runrecord v1 config=" << record.config_hash << '\n';
  char buf[64];
  for (const EpochStats& e : record.epochs) {
    std::snprintf(buf, sizeof buf, "%.17g", e.loss_cls);
    file << "epoch=" << e.epoch << " loss_cls=" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", e.loss_comp);
    file << " loss_comp=" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", e.loss_orth);
    file << " loss_orth=" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", e.base_val_top1);
    file << " base_val_top1=" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", e.lr);
    file << " lr=" << buf << '\n';
  }
  const ResidualSummary& r = record.final_residual;
  file << "residual mean_norm=" << r.mean_residual_norm << " mean_embedding_norm=" << r.mean_embedding_norm
       << " mean_target_norm=" << r.mean_target_norm << " mean_cos_distance=" << r.mean_cos_distance << '\n';
  if (!file.flush()) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace comprepr
