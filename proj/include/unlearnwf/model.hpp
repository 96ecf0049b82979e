#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "unlearnwf/trace.hpp"

namespace unlearnwf {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LayerKind { conv1d, relu, global_avg_pool, dense };

struct Layer {
  LayerKind kind = LayerKind::relu;
  int in = 0;  // conv: input channels; dense: input features
  int out = 0;
  int kernel = 0;
  int stride = 1;

  static Layer conv1d(int in, int out, int kernel, int stride) {
    return {LayerKind::conv1d, in, out, kernel, stride};
  }
  static Layer relu() { return {LayerKind::relu}; }
  static Layer global_avg_pool() { return {LayerKind::global_avg_pool}; }
  static Layer dense(int in, int out) { return {LayerKind::dense, in, out}; }

  std::size_t weight_count() const;
  std::size_t bias_count() const;

  bool operator==(const Layer&) const = default;
};

/// Activation shape between layers: `channels` rows by `length` columns.
struct Shape {
  int channels = 1;
  std::size_t length = 0;
};

struct Architecture {
  std::size_t input_length = 0;
  std::vector<Layer> layers;

  /// conv1d(1,16,8,4) relu conv1d(16,32,8,4) relu global_avg_pool dense(32,M)
  static Architecture standard(std::size_t n, int outputs);

  /// Shapes after every layer; throws ShapeError if the chain is broken.
  std::vector<Shape> shapes() const;
  int output_dim() const;

  /// Text form used in checkpoints and configs, e.g. "conv1d(1,4,3,1) relu ...".
  std::string layers_string() const;
  static std::vector<Layer> parse_layers(const std::string& text);

  bool operator==(const Architecture&) const = default;
};

/// Named index range of theta owned by one layer's weights or biases.
struct Segment {
  std::string name;
  std::size_t layer = 0;
  std::size_t offset = 0;
  std::size_t size = 0;
  bool is_bias = false;
};

/// Architecture plus a flat parameter vector and its segment table.
class ModelState {
 public:
  ModelState() = default;
  ModelState(Architecture arch, Eigen::VectorXd theta);

  const Architecture& arch() const { return arch_; }
  const Eigen::VectorXd& theta() const { return theta_; }
  Eigen::VectorXd& theta() { return theta_; }
  const std::vector<Segment>& segments() const { return segments_; }
  std::size_t param_count() const { return static_cast<std::size_t>(theta_.size()); }

  /// Parameter range of the final dense layer (weights and bias).
  std::pair<std::size_t, std::size_t> last_layer_range() const;

 private:
  Architecture arch_;
  Eigen::VectorXd theta_;
  std::vector<Segment> segments_;
};

std::vector<Segment> build_segments(const Architecture& arch);

/// Scaled-uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.
ModelState init_model(const Architecture& arch, std::uint64_t seed);

/// Pre-softmax outputs.
Eigen::VectorXd logits(const ModelState& m, const Trace& t);

/// Softmax probabilities over the output labels.
Eigen::VectorXd forward(const ModelState& m, const Trace& t);

Eigen::VectorXd softmax(const Eigen::VectorXd& z);

/// Argmax of the probabilities, lowest index on ties.
Label argmax(const Eigen::VectorXd& probs);
Label predict(const ModelState& m, const Trace& t);

/// Cross-entropy of one sample.
double sample_loss(const ModelState& m, const Trace& t);

/// Mean cross-entropy over a non-empty batch.
double loss(const ModelState& m, std::span<const Trace> batch);

/// Exact gradient of the per-sample cross-entropy with respect to theta.
Eigen::VectorXd grad(const ModelState& m, const Trace& sample);

/// Adds `scale * grad(m, sample)` into `out` and returns the sample's loss.
double accumulate_grad(const ModelState& m, const Trace& sample, Eigen::Ref<Eigen::VectorXd> out,
                       double scale = 1.0);

/// Gradient of the mean loss over `batch`.
Eigen::VectorXd batch_grad(const ModelState& m, std::span<const Trace> batch);

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void check() const;
};

/// Minibatch SGD with momentum and per-epoch seeded shuffling.
/// `epoch_losses`, when given, receives the mean training loss before the
/// first step followed by the running mean loss of every epoch.
ModelState train(const ModelState& m, std::span<const Trace> data, const TrainConfig& cfg,
                 std::vector<double>* epoch_losses = nullptr);

void save_model(const ModelState& m, const std::filesystem::path& path);
ModelState load_model(const std::filesystem::path& path);

}  // namespace unlearnwf
