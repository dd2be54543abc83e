#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "otd/demo.hpp"
#include "otd/geometry.hpp"
#include "otd/nn.hpp"

namespace otd {

/// Gripper release threshold on the end-state probability.
inline constexpr double kEndStateThreshold = 0.95;

/// Squared-cosine variance schedule. Timesteps are 1-based: k in [1, T].
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// alpha_bar at timestep k; k == 0 is the clean signal (1.0).
  double alpha_bar_at(int k) const;
};

NoiseSchedule build_cosine_schedule(int steps);

class InvalidTimestep : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// sqrt(abar_k) x0 + sqrt(1 - abar_k) eps
Eigen::VectorXd perturb(const Eigen::VectorXd& x0, const Eigen::VectorXd& eps, int k,
                        const NoiseSchedule& sched);

/// Descending DDIM timesteps, e.g. {100, 90, ..., 10} for 10 of 100.
std::vector<int> ddim_timesteps(int train_steps, int inference_steps);

/// Predicts the injected noise for one sample at timestep k.
using NoisePredictor = std::function<Eigen::VectorXd(const Eigen::VectorXd& x_k, int k)>;

/// Deterministic (eta = 0) DDIM from seeded Gaussian noise; returns the
/// clean sample in network (normalized) coordinates. With clip > 0 each
/// clean-sample estimate is clamped to [-clip, clip] and the noise estimate
/// recomputed from it.
Eigen::VectorXd ddim_sample(const NoisePredictor& predict, Eigen::Index dim, const NoiseSchedule& sched,
                            int inference_steps, std::uint64_t seed, double clip = 0.0);

/// Per-sample timesteps and Gaussian noise for one training batch.
struct NoiseDraw {
  std::vector<int> timesteps;
  Eigen::MatrixXd noise;  // dim x batch
};

NoiseDraw draw_noise(Eigen::Index dim, Eigen::Index batch, const NoiseSchedule& sched, std::uint64_t seed);

/// Column-wise perturb with per-column timesteps.
Eigen::MatrixXd perturb_batch(const Eigen::MatrixXd& x0, const NoiseDraw& draw, const NoiseSchedule& sched);

using BatchNoisePredictor =
    std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x_k, const std::vector<int>& timesteps)>;

/// Mean squared error between injected and predicted noise for one draw.
double diffusion_loss(const BatchNoisePredictor& predict, const Eigen::MatrixXd& x0, const NoiseDraw& draw,
                      const NoiseSchedule& sched);

/// Sinusoidal embedding of a diffusion timestep.
Eigen::VectorXd timestep_embedding(int k, int dim);

struct ModelConfig {
  int obs_horizon = 2;
  int pred_horizon = 8;
  int max_stages = 4;
  int task_embedding_dim = 32;
  int context_dim = 64;
  int time_embedding_dim = 64;
  std::vector<int> encoder_hidden{128, 128};
  std::vector<int> denoiser_hidden{512, 512, 512};
  std::vector<int> head_hidden{64, 64};
  bool denoiser_layer_norm = false;
  int diffusion_steps = 100;
  int inference_steps = 10;
  double sample_clip = 1.0;  // 0 disables

  int observed_dim() const { return obs_horizon * kPoseFeatureDim; }
  int chunk_dim() const { return pred_horizon * kPoseFeatureDim; }
  int condition_dim() const { return observed_dim() + context_dim + task_embedding_dim + max_stages; }
  int denoiser_input_dim() const { return chunk_dim() + condition_dim() + time_embedding_dim; }

  nn::MlpSpec encoder_spec() const;
  nn::MlpSpec denoiser_spec() const;
  nn::MlpSpec head_spec() const;
  void validate() const;
};

/// Condition encoder, epsilon-predicting denoiser and end-state head.
struct ScoreNetwork {
  nn::MlpParams encoder;
  nn::MlpParams denoiser;
  nn::MlpParams head;
};

ScoreNetwork init_score_network(const ModelConfig& cfg, std::uint64_t seed);

struct TrainingConfig {
  int epochs = 3000;
  int batch_size = 128;
  nn::AdamConfig adam{.lr = 3e-3};
  double head_lr = 1e-3;
  bool cosine_decay = true;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Everything needed to run the policy: networks plus the data-side
/// context they were trained against.
struct TrajectoryModel {
  static constexpr int kFormatVersion = 1;

  ModelConfig config;
  NoiseSchedule schedule;
  NormStats stats;
  TaskEmbeddings task_embeddings;
  KeyframeConfig keyframe;
  TrainingConfig training;
  ScoreNetwork net;

  const Eigen::VectorXd& embedding(const std::string& task_id) const;
};

/// [observed features | encoded context | task embedding | stage one-hot]
Eigen::VectorXd encode_condition(const ModelConfig& cfg, const ScoreNetwork& net,
                                 const Eigen::VectorXd& observed_normalized, const Eigen::VectorXd& task_emb,
                                 int stage);

/// Same, from canonical history poses (oldest first).
Eigen::VectorXd encode_condition(const TrajectoryModel& model, std::span<const Pose> history,
                                 const Eigen::VectorXd& task_emb, int stage);

Eigen::VectorXd predict_noise(const ModelConfig& cfg, const ScoreNetwork& net, const Eigen::VectorXd& cond,
                              const Eigen::VectorXd& x_k, int k);

/// Sampled chunk of pred_horizon pose features, denormalized.
Eigen::VectorXd ddim_sample(const TrajectoryModel& model, const Eigen::VectorXd& cond, std::uint64_t seed);

double predict_end_state(const ScoreNetwork& net, const Eigen::VectorXd& cond);

struct OptimizerState {
  nn::AdamState encoder;
  nn::AdamState denoiser;
  nn::AdamState head;
  long step = 0;
};

struct StepStats {
  double loss = 0.0;       // epsilon MSE
  double head_loss = 0.0;  // end-state BCE
};

/// One optimizer step on a batch of dataset samples: draws timesteps and
/// noise from `rng_seed`, regresses the noise, and fits the end-state head
/// on the (detached) condition vectors.
StepStats training_step(TrajectoryModel& model, const Dataset& data, std::span<const std::size_t> batch,
                        OptimizerState& opt, std::uint64_t rng_seed, double lr_scale = 1.0);

using EpochCallback = std::function<void(int epoch, const StepStats& mean)>;

TrajectoryModel make_model(const Dataset& data, const ModelConfig& cfg, const TrainingConfig& train);

/// Full training run; deterministic for a given dataset and configuration.
TrajectoryModel train(const Dataset& data, const ModelConfig& cfg, const TrainingConfig& train,
                      const EpochCallback& on_epoch = {});

Json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const Json& j);
Json to_json(const TrainingConfig& cfg);
TrainingConfig training_config_from_json(const Json& j);

Json to_json(const TrajectoryModel& model);
TrajectoryModel model_from_json(const Json& j);
void save_model(const std::filesystem::path& path, const TrajectoryModel& model);
TrajectoryModel load_model(const std::filesystem::path& path);

}  // namespace otd
