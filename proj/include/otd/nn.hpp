#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "otd/serialization.hpp"

namespace otd::nn {

enum class Activation { kRelu, kGelu, kMish };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Fully connected network: widths = {input, hidden..., output}. Every
/// hidden layer is Linear -> [LayerNorm] -> activation; the output layer is
/// linear.
struct MlpSpec {
  std::vector<int> widths;
  Activation activation = Activation::kMish;
  std::vector<bool> layer_norm;  // one flag per hidden layer

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int num_layers() const { return static_cast<int>(widths.size()) - 1; }
  int num_hidden() const { return num_layers() - 1; }

  void validate() const;
  bool operator==(const MlpSpec&) const = default;
};

/// Parameters stored flat so optimizers and checkpoints see one vector.
/// Per layer: weight (out x in, column-major), bias, then gain and shift
/// when the hidden layer is normalized.
class MlpParams {
 public:
  MlpParams() = default;
  explicit MlpParams(MlpSpec spec);

  const MlpSpec& spec() const { return spec_; }
  Eigen::VectorXd& values() { return values_; }
  const Eigen::VectorXd& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }

  Eigen::Map<Eigen::MatrixXd> weight(int layer);
  Eigen::Map<const Eigen::MatrixXd> weight(int layer) const;
  Eigen::Map<Eigen::VectorXd> bias(int layer);
  Eigen::Map<const Eigen::VectorXd> bias(int layer) const;
  Eigen::Map<Eigen::VectorXd> gain(int layer);
  Eigen::Map<const Eigen::VectorXd> gain(int layer) const;
  Eigen::Map<Eigen::VectorXd> shift(int layer);
  Eigen::Map<const Eigen::VectorXd> shift(int layer) const;

  bool has_norm(int layer) const;

  /// Offsets into values() for a layer: weight, bias, gain, shift.
  struct Offsets {
    Eigen::Index weight, bias, gain, shift;
  };
  const Offsets& offsets(int layer) const { return offsets_.at(layer); }

 private:
  MlpSpec spec_;
  std::vector<Offsets> offsets_;
  Eigen::VectorXd values_;
};

inline constexpr double kLayerNormEps = 1e-9;

/// Weights uniform in +-sqrt(6 / fan_in), biases and shifts zero, gains one.
MlpParams init_params(const MlpSpec& spec, std::uint64_t seed);

/// Intermediate values of a batched forward pass (one sample per column).
struct MlpCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre;     // linear outputs
  std::vector<Eigen::MatrixXd> normed;  // standardized (before gain/shift)
  std::vector<Eigen::RowVectorXd> inv_std;
  std::vector<Eigen::MatrixXd> act_in;  // activation inputs
  std::vector<Eigen::MatrixXd> act_out;
};

/// x: input_dim x batch. Fills `cache` when given.
Eigen::MatrixXd forward(const MlpParams& params, const Eigen::MatrixXd& x, MlpCache* cache = nullptr);

struct MlpGradients {
  Eigen::VectorXd params;  // same layout as MlpParams::values()
  Eigen::MatrixXd input;   // d loss / d x
};

/// Exact gradients of sum(dy .* y) for the pass recorded in `cache`.
MlpGradients backward(const MlpParams& params, const MlpCache& cache, const Eigen::MatrixXd& dy);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;

  static AdamState Zeros(Eigen::Index n) {
    return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0};
  }
};

/// One bias-corrected Adam step, in place. `lr` overrides cfg.lr when
/// positive (used by learning-rate schedules).
void adam_update(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state,
                 const AdamConfig& cfg, double lr = -1.0);

/// Cosine decay from base_lr to 0 over total_steps.
double cosine_lr(double base_lr, long step, long total_steps);

Json to_json(const MlpSpec& spec);
MlpSpec mlp_spec_from_json(const Json& j);
Json to_json(const MlpParams& params);
MlpParams mlp_params_from_json(const Json& j);

}  // namespace otd::nn
