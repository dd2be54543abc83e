#include "otd/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "otd/random.hpp"

namespace otd {

// ---------------------------------------------------------------------------
// Schedule

double NoiseSchedule::alpha_bar_at(int k) const {
  if (k == 0) return 1.0;
  if (k < 1 || k > steps) {
    throw InvalidTimestep("timestep " + std::to_string(k) + " outside [1, " + std::to_string(steps) + "]");
  }
  return alpha_bar[k - 1];
}

NoiseSchedule build_cosine_schedule(int steps) {
  if (steps < 2) throw std::invalid_argument("noise schedule needs at least 2 timesteps");
  constexpr double kOffset = 0.008;
  constexpr double kMaxBeta = 0.999;
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / steps + kOffset) / (1.0 + kOffset) * std::numbers::pi / 2);
    return c * c;
  };
  NoiseSchedule s;
  s.steps = steps;
  double prod = 1.0;
  for (int k = 1; k <= steps; ++k) {
    const double b = std::min(1.0 - f(k) / f(k - 1), kMaxBeta);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

Eigen::VectorXd perturb(const Eigen::VectorXd& x0, const Eigen::VectorXd& eps, int k, const NoiseSchedule& sched) {
  if (k < 1 || k > sched.steps) {
    throw InvalidTimestep("timestep " + std::to_string(k) + " outside [1, " + std::to_string(sched.steps) + "]");
  }
  if (x0.size() != eps.size()) throw nn::ShapeError("perturb: noise and signal sizes differ");
  const double ab = sched.alpha_bar_at(k);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

std::vector<int> ddim_timesteps(int train_steps, int inference_steps) {
  if (inference_steps < 1 || inference_steps > train_steps) {
    throw std::invalid_argument("inference steps must lie in [1, " + std::to_string(train_steps) + "]");
  }
  std::vector<int> ks;
  for (int i = inference_steps; i >= 1; --i) ks.push_back(i * train_steps / inference_steps);
  return ks;
}

Eigen::VectorXd ddim_sample(const NoisePredictor& predict, Eigen::Index dim, const NoiseSchedule& sched,
                            int inference_steps, std::uint64_t seed, double clip) {
  const auto ks = ddim_timesteps(sched.steps, inference_steps);
  Rng rng(seed);
  Eigen::VectorXd x = rng.normal(dim);
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const int k = ks[i];
    const int prev = i + 1 < ks.size() ? ks[i + 1] : 0;
    Eigen::VectorXd eps = predict(x, k);
    if (eps.size() != dim) throw nn::ShapeError("noise prediction has the wrong size");
    const double ab = sched.alpha_bar_at(k);
    const double ab_prev = sched.alpha_bar_at(prev);
    Eigen::VectorXd x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    if (clip > 0.0) {
      x0 = x0.cwiseMax(-clip).cwiseMin(clip);
      eps = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    }
    x = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
  }
  return x;
}

NoiseDraw draw_noise(Eigen::Index dim, Eigen::Index batch, const NoiseSchedule& sched, std::uint64_t seed) {
  Rng rng(seed);
  NoiseDraw d;
  d.noise.resize(dim, batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    d.timesteps.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps))));
    for (Eigen::Index i = 0; i < dim; ++i) d.noise(i, b) = rng.normal();
  }
  return d;
}

Eigen::MatrixXd perturb_batch(const Eigen::MatrixXd& x0, const NoiseDraw& draw, const NoiseSchedule& sched) {
  if (x0.rows() != draw.noise.rows() || x0.cols() != draw.noise.cols()) {
    throw nn::ShapeError("perturb_batch: noise and signal shapes differ");
  }
  Eigen::MatrixXd xk(x0.rows(), x0.cols());
  for (Eigen::Index b = 0; b < x0.cols(); ++b) {
    xk.col(b) = perturb(x0.col(b), draw.noise.col(b), draw.timesteps[b], sched);
  }
  return xk;
}

double diffusion_loss(const BatchNoisePredictor& predict, const Eigen::MatrixXd& x0, const NoiseDraw& draw,
                      const NoiseSchedule& sched) {
  const Eigen::MatrixXd xk = perturb_batch(x0, draw, sched);
  const Eigen::MatrixXd eps_hat = predict(xk, draw.timesteps);
  return (eps_hat - draw.noise).squaredNorm() / static_cast<double>(draw.noise.size());
}

Eigen::VectorXd timestep_embedding(int k, int dim) {
  if (dim < 4 || dim % 2 != 0) throw std::invalid_argument("timestep embedding dim must be even and >= 4");
  const int half = dim / 2;
  Eigen::VectorXd e(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / (half - 1));
    e[i] = std::sin(k * freq);
    e[half + i] = std::cos(k * freq);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Networks

namespace {

nn::MlpSpec make_spec(int in, const std::vector<int>& hidden, int out, nn::Activation act, bool norm) {
  nn::MlpSpec s;
  s.widths.push_back(in);
  s.widths.insert(s.widths.end(), hidden.begin(), hidden.end());
  s.widths.push_back(out);
  s.activation = act;
  s.layer_norm.assign(hidden.size(), norm);
  return s;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

nn::MlpSpec ModelConfig::encoder_spec() const {
  return make_spec(observed_dim(), encoder_hidden, context_dim, nn::Activation::kMish, true);
}

nn::MlpSpec ModelConfig::denoiser_spec() const {
  return make_spec(denoiser_input_dim(), denoiser_hidden, chunk_dim(), nn::Activation::kMish,
                   denoiser_layer_norm);
}

nn::MlpSpec ModelConfig::head_spec() const {
  return make_spec(condition_dim(), head_hidden, 1, nn::Activation::kRelu, false);
}

void ModelConfig::validate() const {
  if (obs_horizon < 1 || pred_horizon < 1) throw std::invalid_argument("model horizons must be >= 1");
  if (max_stages < 1) throw std::invalid_argument("max_stages must be >= 1");
  if (context_dim < 1 || task_embedding_dim < 1) throw std::invalid_argument("embedding dims must be >= 1");
  if (time_embedding_dim < 4 || time_embedding_dim % 2 != 0) {
    throw std::invalid_argument("time_embedding_dim must be even and >= 4");
  }
  if (encoder_hidden.empty() || denoiser_hidden.empty() || head_hidden.empty()) {
    throw std::invalid_argument("every network needs at least one hidden layer");
  }
  if (diffusion_steps < 2) throw std::invalid_argument("diffusion_steps must be >= 2");
  if (inference_steps < 1 || inference_steps > diffusion_steps) {
    throw std::invalid_argument("inference_steps must lie in [1, diffusion_steps]");
  }
  if (!(sample_clip >= 0.0)) throw std::invalid_argument("sample_clip must be >= 0");
}

void TrainingConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("training.epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("training.batch_size must be >= 1");
  if (!(adam.lr > 0)) throw std::invalid_argument("training.lr must be positive");
  if (!(head_lr > 0)) throw std::invalid_argument("training.head_lr must be positive");
}

ScoreNetwork init_score_network(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  return {nn::init_params(cfg.encoder_spec(), substream(seed, "encoder")),
          nn::init_params(cfg.denoiser_spec(), substream(seed, "denoiser")),
          nn::init_params(cfg.head_spec(), substream(seed, "head"))};
}

const Eigen::VectorXd& TrajectoryModel::embedding(const std::string& task_id) const {
  const auto it = task_embeddings.find(task_id);
  if (it == task_embeddings.end()) throw std::invalid_argument("model has no embedding for task '" + task_id + "'");
  return it->second;
}

namespace {

void write_condition_tail(const ModelConfig& cfg, const Eigen::VectorXd& task_emb, int stage,
                          Eigen::Ref<Eigen::VectorXd> tail) {
  if (task_emb.size() != cfg.task_embedding_dim) throw nn::ShapeError("task embedding has the wrong size");
  if (stage < 0 || stage >= cfg.max_stages) throw std::out_of_range("stage index outside [0, max_stages)");
  tail.head(cfg.task_embedding_dim) = task_emb;
  tail.tail(cfg.max_stages).setZero();
  tail[cfg.task_embedding_dim + stage] = 1.0;
}

}  // namespace

Eigen::VectorXd encode_condition(const ModelConfig& cfg, const ScoreNetwork& net,
                                 const Eigen::VectorXd& observed_normalized, const Eigen::VectorXd& task_emb,
                                 int stage) {
  if (observed_normalized.size() != cfg.observed_dim()) {
    throw nn::ShapeError("condition history must hold obs_horizon poses");
  }
  Eigen::VectorXd c(cfg.condition_dim());
  c.head(cfg.observed_dim()) = observed_normalized;
  c.segment(cfg.observed_dim(), cfg.context_dim) = nn::forward(net.encoder, observed_normalized);
  write_condition_tail(cfg, task_emb, stage, c.tail(cfg.task_embedding_dim + cfg.max_stages));
  return c;
}

Eigen::VectorXd encode_condition(const TrajectoryModel& model, std::span<const Pose> history,
                                 const Eigen::VectorXd& task_emb, int stage) {
  const auto& cfg = model.config;
  if (static_cast<int>(history.size()) != cfg.obs_horizon) {
    throw nn::ShapeError("condition history has " + std::to_string(history.size()) + " poses, expected " +
                         std::to_string(cfg.obs_horizon));
  }
  Eigen::VectorXd obs(cfg.observed_dim());
  for (std::size_t i = 0; i < history.size(); ++i) {
    obs.segment<kPoseFeatureDim>(static_cast<Eigen::Index>(i) * kPoseFeatureDim) =
        model.stats.normalize(pose_to_feature(history[i]));
  }
  return encode_condition(cfg, model.net, obs, task_emb, stage);
}

Eigen::VectorXd predict_noise(const ModelConfig& cfg, const ScoreNetwork& net, const Eigen::VectorXd& cond,
                              const Eigen::VectorXd& x_k, int k) {
  if (cond.size() != cfg.condition_dim()) throw nn::ShapeError("condition vector has the wrong size");
  if (x_k.size() != cfg.chunk_dim()) throw nn::ShapeError("noisy chunk has the wrong size");
  Eigen::VectorXd in(cfg.denoiser_input_dim());
  in << x_k, cond, timestep_embedding(k, cfg.time_embedding_dim);
  return nn::forward(net.denoiser, in);
}

Eigen::VectorXd ddim_sample(const TrajectoryModel& model, const Eigen::VectorXd& cond, std::uint64_t seed) {
  const auto& cfg = model.config;
  const NoisePredictor predict = [&](const Eigen::VectorXd& x, int k) {
    return predict_noise(cfg, model.net, cond, x, k);
  };
  const Eigen::VectorXd x0 = ddim_sample(predict, cfg.chunk_dim(), model.schedule, cfg.inference_steps, seed, cfg.sample_clip);
  return model.stats.denormalize_chunk(x0);
}

double predict_end_state(const ScoreNetwork& net, const Eigen::VectorXd& cond) {
  const Eigen::MatrixXd z = nn::forward(net.head, cond);
  return sigmoid(z(0, 0));
}

// ---------------------------------------------------------------------------
// Training

StepStats training_step(TrajectoryModel& model, const Dataset& data, std::span<const std::size_t> batch,
                        OptimizerState& opt, std::uint64_t rng_seed, double lr_scale) {
  const auto& cfg = model.config;
  auto& net = model.net;
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  if (B == 0) throw std::invalid_argument("empty training batch");
  const int D = cfg.chunk_dim();
  const int obs_dim = cfg.observed_dim();
  const int cond_dim = cfg.condition_dim();

  Eigen::MatrixXd observed(obs_dim, B), x0(D, B);
  Eigen::MatrixXd tail(cfg.task_embedding_dim + cfg.max_stages, B);
  Eigen::RowVectorXd end_labels(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& s = data.samples.at(batch[b]);
    observed.col(b) = s.observed;
    x0.col(b) = s.target;
    write_condition_tail(cfg, model.embedding(s.task_id), s.stage, tail.col(b));
    end_labels[b] = s.end_state;
  }

  const NoiseDraw draw = draw_noise(D, B, model.schedule, rng_seed);
  const Eigen::MatrixXd xk = perturb_batch(x0, draw, model.schedule);

  nn::MlpCache enc_cache, den_cache, head_cache;
  const Eigen::MatrixXd context = nn::forward(net.encoder, observed, &enc_cache);
  Eigen::MatrixXd cond(cond_dim, B);
  cond << observed, context, tail;

  Eigen::MatrixXd den_in(cfg.denoiser_input_dim(), B);
  den_in.topRows(D) = xk;
  den_in.middleRows(D, cond_dim) = cond;
  for (Eigen::Index b = 0; b < B; ++b) {
    den_in.col(b).tail(cfg.time_embedding_dim) = timestep_embedding(draw.timesteps[b], cfg.time_embedding_dim);
  }
  const Eigen::MatrixXd eps_hat = nn::forward(net.denoiser, den_in, &den_cache);
  const Eigen::MatrixXd diff = eps_hat - draw.noise;
  const double n = static_cast<double>(diff.size());
  StepStats stats;
  stats.loss = diff.squaredNorm() / n;

  const nn::MlpGradients den_grad = nn::backward(net.denoiser, den_cache, (2.0 / n) * diff);
  const Eigen::MatrixXd d_context = den_grad.input.middleRows(D + obs_dim, cfg.context_dim);
  const nn::MlpGradients enc_grad = nn::backward(net.encoder, enc_cache, d_context);

  // End-state head on the detached condition, binary cross-entropy.
  const Eigen::MatrixXd logits = nn::forward(net.head, cond, &head_cache);
  Eigen::MatrixXd d_logits(1, B);
  double bce = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const double z = logits(0, b), y = end_labels[b];
    bce += std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - y * z;
    d_logits(0, b) = (sigmoid(z) - y) / static_cast<double>(B);
  }
  stats.head_loss = bce / static_cast<double>(B);
  const nn::MlpGradients head_grad = nn::backward(net.head, head_cache, d_logits);

  const auto& adam = model.training.adam;
  nn::adam_update(net.denoiser.values(), den_grad.params, opt.denoiser, adam, adam.lr * lr_scale);
  nn::adam_update(net.encoder.values(), enc_grad.params, opt.encoder, adam, adam.lr * lr_scale);
  nn::adam_update(net.head.values(), head_grad.params, opt.head, adam, model.training.head_lr * lr_scale);
  ++opt.step;
  return stats;
}

TrajectoryModel make_model(const Dataset& data, const ModelConfig& cfg_in, const TrainingConfig& train) {
  ModelConfig cfg = cfg_in;
  cfg.obs_horizon = data.config.obs_horizon;
  cfg.pred_horizon = data.config.pred_horizon;
  cfg.max_stages = data.config.max_stages;
  cfg.task_embedding_dim = data.config.task_embedding_dim;
  cfg.validate();
  train.validate();
  TrajectoryModel m;
  m.config = cfg;
  m.schedule = build_cosine_schedule(cfg.diffusion_steps);
  m.stats = data.stats;
  m.task_embeddings = data.task_embeddings;
  m.keyframe = data.config.keyframe;
  m.training = train;
  m.net = init_score_network(cfg, substream(train.seed, "init"));
  return m;
}

TrajectoryModel train(const Dataset& data, const ModelConfig& cfg, const TrainingConfig& tcfg,
                      const EpochCallback& on_epoch) {
  if (data.samples.empty()) throw EmptyDataset("cannot train on an empty dataset");
  TrajectoryModel model = make_model(data, cfg, tcfg);
  OptimizerState opt;
  const std::size_t n = data.samples.size();
  const std::size_t bs = static_cast<std::size_t>(tcfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
  const long total_steps = steps_per_epoch * tcfg.epochs;
  const std::uint64_t train_seed = substream(tcfg.seed, "train");

  std::vector<std::size_t> order(n);
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(substream(train_seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    StepStats mean;
    long batches = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t len = std::min(bs, n - start);
      const double scale = tcfg.cosine_decay ? nn::cosine_lr(1.0, opt.step, total_steps) : 1.0;
      const std::uint64_t step_seed = substream(train_seed ^ 0x5bd1e995ULL, static_cast<std::uint64_t>(opt.step));
      const StepStats s = training_step(model, data, std::span(order).subspan(start, len), opt, step_seed,
                                        std::max(scale, 1e-3));
      mean.loss += s.loss;
      mean.head_loss += s.head_loss;
      ++batches;

    }
    mean.loss /= static_cast<double>(batches);
    mean.head_loss /= static_cast<double>(batches);
    if (on_epoch) on_epoch(epoch, mean);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

Json to_json(const ModelConfig& c) {
  return Json{{"obs_horizon", c.obs_horizon},
              {"pred_horizon", c.pred_horizon},
              {"max_stages", c.max_stages},
              {"task_embedding_dim", c.task_embedding_dim},
              {"context_dim", c.context_dim},
              {"time_embedding_dim", c.time_embedding_dim},
              {"encoder_hidden", c.encoder_hidden},
              {"denoiser_hidden", c.denoiser_hidden},
              {"head_hidden", c.head_hidden},
              {"denoiser_layer_norm", c.denoiser_layer_norm},
              {"diffusion_steps", c.diffusion_steps},
              {"inference_steps", c.inference_steps},
              {"sample_clip", c.sample_clip}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.obs_horizon = j.value("obs_horizon", c.obs_horizon);
  c.pred_horizon = j.value("pred_horizon", c.pred_horizon);
  c.max_stages = j.value("max_stages", c.max_stages);
  c.task_embedding_dim = j.value("task_embedding_dim", c.task_embedding_dim);
  c.context_dim = j.value("context_dim", c.context_dim);
  c.time_embedding_dim = j.value("time_embedding_dim", c.time_embedding_dim);
  c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
  c.denoiser_hidden = j.value("denoiser_hidden", c.denoiser_hidden);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.denoiser_layer_norm = j.value("denoiser_layer_norm", c.denoiser_layer_norm);
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  c.inference_steps = j.value("inference_steps", c.inference_steps);
  c.sample_clip = j.value("sample_clip", c.sample_clip);
  return c;
}

Json to_json(const TrainingConfig& c) {
  return Json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"lr", c.adam.lr},
              {"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"adam_eps", c.adam.eps},
              {"head_lr", c.head_lr},
              {"cosine_decay", c.cosine_decay},
              {"seed", c.seed}};
}

TrainingConfig training_config_from_json(const Json& j) {
  TrainingConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("adam_eps", c.adam.eps);
  c.head_lr = j.value("head_lr", c.head_lr);
  c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
  c.seed = j.value("seed", c.seed);
  return c;
}

Json to_json(const TrajectoryModel& m) {
  Json j;
  j["format_version"] = TrajectoryModel::kFormatVersion;
  j["model"] = to_json(m.config);
  j["schedule"] = Json{{"type", "squaredcos"}, {"steps", m.schedule.steps}};
  j["training"] = to_json(m.training);
  j["keyframe"] = to_json(m.keyframe);
  j["norm_stats"] = to_json(m.stats);
  j["task_embeddings"] = to_json(m.task_embeddings);
  j["networks"] = Json{{"encoder", nn::to_json(m.net.encoder)},
                       {"denoiser", nn::to_json(m.net.denoiser)},
                       {"head", nn::to_json(m.net.head)}};
  return j;
}

TrajectoryModel model_from_json(const Json& j) {
  const int version = j.at("format_version").get<int>();
  if (version != TrajectoryModel::kFormatVersion) {
    throw std::invalid_argument("unsupported checkpoint format_version " + std::to_string(version));
  }
  TrajectoryModel m;
  m.config = model_config_from_json(j.at("model"));
  m.config.validate();
  m.schedule = build_cosine_schedule(j.at("schedule").at("steps").get<int>());
  if (m.schedule.steps != m.config.diffusion_steps) {
    throw std::invalid_argument("checkpoint schedule does not match model.diffusion_steps");
  }
  m.training = training_config_from_json(j.at("training"));
  m.keyframe = keyframe_config_from_json(j.at("keyframe"));
  m.stats = norm_stats_from_json(j.at("norm_stats"));
  m.task_embeddings = task_embeddings_from_json(j.at("task_embeddings"));
  const auto& nets = j.at("networks");
  m.net.encoder = nn::mlp_params_from_json(nets.at("encoder"));
  m.net.denoiser = nn::mlp_params_from_json(nets.at("denoiser"));
  m.net.head = nn::mlp_params_from_json(nets.at("head"));
  if (!(m.net.encoder.spec() == m.config.encoder_spec()) || !(m.net.denoiser.spec() == m.config.denoiser_spec()) ||
      !(m.net.head.spec() == m.config.head_spec())) {
    throw nn::ShapeError("checkpoint networks do not match the model config");
  }
  return m;
}

void save_model(const std::filesystem::path& path, const TrajectoryModel& model) {
  write_json_file(path, to_json(model));
}

TrajectoryModel load_model(const std::filesystem::path& path) { return model_from_json(read_json_file(path)); }

}  // namespace otd
