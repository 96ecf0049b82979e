#include "unlearnwf/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "unlearnwf/rng.hpp"

namespace unlearnwf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::size_t Layer::weight_count() const {
  switch (kind) {
    case LayerKind::conv1d: return static_cast<std::size_t>(out) * in * kernel;
    case LayerKind::dense: return static_cast<std::size_t>(out) * in;
    default: return 0;
  }
}

std::size_t Layer::bias_count() const {
  return kind == LayerKind::conv1d || kind == LayerKind::dense ? static_cast<std::size_t>(out) : 0;
}

Architecture Architecture::standard(std::size_t n, int outputs) {
  return {n,
          {Layer::conv1d(1, 16, 8, 4), Layer::relu(), Layer::conv1d(16, 32, 8, 4), Layer::relu(),
           Layer::global_avg_pool(), Layer::dense(32, outputs)}};
}

std::vector<Shape> Architecture::shapes() const {
  if (input_length == 0) throw ShapeError("input length must be positive");
  if (layers.empty()) throw ShapeError("architecture has no layers");
  std::vector<Shape> out;
  Shape s{1, input_length};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    switch (l.kind) {
      case LayerKind::conv1d:
        if (l.in != s.channels) throw ShapeError(where + "conv1d input channels mismatch");
        if (l.out < 1 || l.kernel < 1 || l.stride < 1) throw ShapeError(where + "bad conv1d dims");
        if (s.length < static_cast<std::size_t>(l.kernel)) throw ShapeError(where + "kernel longer than input");
        s = {l.out, (s.length - static_cast<std::size_t>(l.kernel)) / static_cast<std::size_t>(l.stride) + 1};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::global_avg_pool:
        s.length = 1;
        break;
      case LayerKind::dense:
        if (static_cast<std::size_t>(l.in) != static_cast<std::size_t>(s.channels) * s.length) {
          throw ShapeError(where + "dense input size mismatch");
        }
        if (l.out < 1) throw ShapeError(where + "bad dense dims");
        s = {l.out, 1};
        break;
    }
    out.push_back(s);
  }
  if (out.back().length != 1) throw ShapeError("final layer must produce a vector");
  return out;
}

int Architecture::output_dim() const { return shapes().back().channels; }

std::string Architecture::layers_string() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ' ';
    const Layer& l = layers[i];
    switch (l.kind) {
      case LayerKind::conv1d:
        os << "conv1d(" << l.in << ',' << l.out << ',' << l.kernel << ',' << l.stride << ')';
        break;
      case LayerKind::relu: os << "relu"; break;
      case LayerKind::global_avg_pool: os << "global_avg_pool"; break;
      case LayerKind::dense: os << "dense(" << l.in << ',' << l.out << ')'; break;
    }
  }
  return os.str();
}

std::vector<Layer> Architecture::parse_layers(const std::string& text) {
  std::istringstream is(text);
  std::string tok;
  std::vector<Layer> out;
  auto args = [](const std::string& t, std::size_t want) {
    const auto open = t.find('(');
    if (open == std::string::npos || t.back() != ')') throw ShapeError("bad layer token '" + t + "'");
    std::vector<int> vals;
    std::stringstream ss(t.substr(open + 1, t.size() - open - 2));
    std::string v;
    while (std::getline(ss, v, ',')) {
      try {
        vals.push_back(std::stoi(v));
      } catch (const std::exception&) {
        throw ShapeError("bad layer token '" + t + "'");
      }
    }
    if (vals.size() != want) throw ShapeError("wrong argument count in '" + t + "'");
    return vals;
  };
  while (is >> tok) {
    if (tok == "relu") {
      out.push_back(Layer::relu());
    } else if (tok == "global_avg_pool") {
      out.push_back(Layer::global_avg_pool());
    } else if (tok.rfind("conv1d(", 0) == 0) {
      const auto a = args(tok, 4);
      out.push_back(Layer::conv1d(a[0], a[1], a[2], a[3]));
    } else if (tok.rfind("dense(", 0) == 0) {
      const auto a = args(tok, 2);
      out.push_back(Layer::dense(a[0], a[1]));
    } else {
      throw ShapeError("unknown layer '" + tok + "'");
    }
  }
  return out;
}

std::vector<Segment> build_segments(const Architecture& arch) {
  arch.shapes();
  std::vector<Segment> segs;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const Layer& l = arch.layers[i];
    if (l.weight_count() == 0) continue;
    const std::string base = "layer" + std::to_string(i) +
                             (l.kind == LayerKind::conv1d ? ".conv1d" : ".dense");
    segs.push_back({base + ".weight", i, offset, l.weight_count(), false});
    offset += l.weight_count();
    segs.push_back({base + ".bias", i, offset, l.bias_count(), true});
    offset += l.bias_count();
  }
  return segs;
}

ModelState::ModelState(Architecture arch, VectorXd theta)
    : arch_(std::move(arch)), theta_(std::move(theta)), segments_(build_segments(arch_)) {
  std::size_t k = 0;
  for (const Segment& s : segments_) k += s.size;
  if (k != static_cast<std::size_t>(theta_.size())) {
    throw ShapeError("theta has " + std::to_string(theta_.size()) + " entries, architecture needs " +
                     std::to_string(k));
  }
}

std::pair<std::size_t, std::size_t> ModelState::last_layer_range() const {
  const std::size_t last = segments_.back().layer;
  std::size_t begin = segments_.back().offset;
  for (const Segment& s : segments_) {
    if (s.layer == last) begin = std::min(begin, s.offset);
  }
  return {begin, param_count()};
}

ModelState init_model(const Architecture& arch, std::uint64_t seed) {
  const auto segs = build_segments(arch);
  std::size_t k = 0;
  for (const Segment& s : segs) k += s.size;
  VectorXd theta = VectorXd::Zero(static_cast<Eigen::Index>(k));
  Rng rng(seed);
  for (const Segment& s : segs) {
    if (s.is_bias) continue;
    const Layer& l = arch.layers[s.layer];
    const int fan_in = l.kind == LayerKind::conv1d ? l.in * l.kernel : l.in;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t j = 0; j < s.size; ++j) {
      theta[static_cast<Eigen::Index>(s.offset + j)] = rng.uniform(-bound, bound);
    }
  }
  return ModelState(arch, std::move(theta));
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct Tape {
  std::vector<MatrixXd> acts;     // acts[0] is the input, acts[i+1] the output of layer i
  std::vector<MatrixXd> patches;  // im2col buffers for conv layers
};

/// Per-layer weight offset into theta; bias follows the weights.
std::vector<std::size_t> weight_offsets(const ModelState& m) {
  std::vector<std::size_t> off(m.arch().layers.size(), 0);
  for (const Segment& s : m.segments()) {
    if (!s.is_bias) off[s.layer] = s.offset;
  }
  return off;
}

void run_forward(const ModelState& m, const Trace& t, Tape& tape) {
  const Architecture& arch = m.arch();
  if (t.dirs.size() != arch.input_length) {
    throw ShapeError("trace length " + std::to_string(t.dirs.size()) + " does not match model input " +
                     std::to_string(arch.input_length));
  }
  const auto offsets = weight_offsets(m);
  const double* theta = m.theta().data();
  const std::size_t n_layers = arch.layers.size();
  tape.acts.resize(n_layers + 1);
  tape.patches.resize(n_layers);

  MatrixXd& x0 = tape.acts[0];
  x0.resize(1, static_cast<Eigen::Index>(t.dirs.size()));
  for (std::size_t j = 0; j < t.dirs.size(); ++j) x0(0, static_cast<Eigen::Index>(j)) = t.dirs[j];

  for (std::size_t i = 0; i < n_layers; ++i) {
    const Layer& l = arch.layers[i];
    const MatrixXd& x = tape.acts[i];
    MatrixXd& y = tape.acts[i + 1];
    switch (l.kind) {
      case LayerKind::conv1d: {
        const Eigen::Index cin = l.in, k = l.kernel, s = l.stride;
        const Eigen::Index lout = (x.cols() - k) / s + 1;
        MatrixXd& p = tape.patches[i];
        p.resize(cin * k, lout);
        for (Eigen::Index c = 0; c < lout; ++c) {
          p.col(c) = Eigen::Map<const VectorXd>(x.data() + c * s * cin, cin * k);
        }
        Eigen::Map<const MatrixXd> w(theta + offsets[i], l.out, cin * k);
        Eigen::Map<const VectorXd> b(theta + offsets[i] + l.weight_count(), l.out);
        y.noalias() = w * p;
        y.colwise() += b;
        break;
      }
      case LayerKind::relu:
        y = x.cwiseMax(0.0);
        break;
      case LayerKind::global_avg_pool:
        y = x.rowwise().mean();
        break;
      case LayerKind::dense: {
        Eigen::Map<const VectorXd> xin(x.data(), x.size());
        Eigen::Map<const MatrixXd> w(theta + offsets[i], l.out, l.in);
        Eigen::Map<const VectorXd> b(theta + offsets[i] + l.weight_count(), l.out);
        y = w * xin + b;
        break;
      }
    }
  }
}

/// Backpropagates d(loss)/d(logits) and adds scale * d(loss)/d(theta) to out.
void run_backward(const ModelState& m, const Tape& tape, const VectorXd& dlogits, double scale,
                  double* out) {
  const Architecture& arch = m.arch();
  const auto offsets = weight_offsets(m);
  const double* theta = m.theta().data();
  MatrixXd d = dlogits;
  for (std::size_t ii = arch.layers.size(); ii-- > 0;) {
    const Layer& l = arch.layers[ii];
    const MatrixXd& x = tape.acts[ii];
    const bool need_input_grad = ii > 0;
    switch (l.kind) {
      case LayerKind::conv1d: {
        const Eigen::Index cin = l.in, k = l.kernel, s = l.stride;
        const MatrixXd& p = tape.patches[ii];
        Eigen::Map<MatrixXd> gw(out + offsets[ii], l.out, cin * k);
        Eigen::Map<VectorXd> gb(out + offsets[ii] + l.weight_count(), l.out);
        gw.noalias() += scale * (d * p.transpose());
        gb += scale * d.rowwise().sum();
        if (need_input_grad) {
          Eigen::Map<const MatrixXd> w(theta + offsets[ii], l.out, cin * k);
          const MatrixXd dp = w.transpose() * d;
          MatrixXd dx = MatrixXd::Zero(x.rows(), x.cols());
          for (Eigen::Index c = 0; c < dp.cols(); ++c) {
            Eigen::Map<VectorXd>(dx.data() + c * s * cin, cin * k) += dp.col(c);
          }
          d = std::move(dx);
        }
        break;
      }
      case LayerKind::relu:
        d = d.cwiseProduct((x.array() > 0.0).cast<double>().matrix());
        break;
      case LayerKind::global_avg_pool: {
        const MatrixXd col = d / static_cast<double>(x.cols());
        d = col.replicate(1, x.cols());
        break;
      }
      case LayerKind::dense: {
        Eigen::Map<const VectorXd> xin(x.data(), x.size());
        Eigen::Map<MatrixXd> gw(out + offsets[ii], l.out, l.in);
        Eigen::Map<VectorXd> gb(out + offsets[ii] + l.weight_count(), l.out);
        gw.noalias() += scale * (d.col(0) * xin.transpose());
        gb += scale * d.col(0);
        if (need_input_grad) {
          Eigen::Map<const MatrixXd> w(theta + offsets[ii], l.out, l.in);
          const VectorXd dx = w.transpose() * d.col(0);
          d = Eigen::Map<const MatrixXd>(dx.data(), x.rows(), x.cols());
        }
        break;
      }
    }
  }
}

double log_sum_exp(const VectorXd& z) {
  const double mx = z.maxCoeff();
  return mx + std::log((z.array() - mx).exp().sum());
}

void check_label(const ModelState& m, const Trace& t) {
  const int dim = m.arch().output_dim();
  if (t.label < 0 || t.label >= dim) {
    throw ShapeError("label " + std::to_string(t.label) + " outside model output range " +
                     std::to_string(dim));
  }
}

}  // namespace

VectorXd softmax(const VectorXd& z) {
  const VectorXd e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

VectorXd logits(const ModelState& m, const Trace& t) {
  Tape tape;
  run_forward(m, t, tape);
  return tape.acts.back().col(0);
}

VectorXd forward(const ModelState& m, const Trace& t) { return softmax(logits(m, t)); }

Label argmax(const VectorXd& probs) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return static_cast<Label>(best);
}

Label predict(const ModelState& m, const Trace& t) { return argmax(logits(m, t)); }

double sample_loss(const ModelState& m, const Trace& t) {
  check_label(m, t);
  const VectorXd z = logits(m, t);
  return log_sum_exp(z) - z[t.label];
}

double loss(const ModelState& m, std::span<const Trace> batch) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  double total = 0.0;
  for (const Trace& t : batch) total += sample_loss(m, t);
  return total / static_cast<double>(batch.size());
}

double accumulate_grad(const ModelState& m, const Trace& sample, Eigen::Ref<VectorXd> out,
                       double scale) {
  check_label(m, sample);
  if (static_cast<std::size_t>(out.size()) != m.param_count()) {
    throw ShapeError("gradient buffer has wrong size");
  }
  Tape tape;
  run_forward(m, sample, tape);
  const VectorXd z = tape.acts.back().col(0);
  VectorXd dz = softmax(z);
  const double l = log_sum_exp(z) - z[sample.label];
  dz[sample.label] -= 1.0;
  run_backward(m, tape, dz, scale, out.data());
  return l;
}

VectorXd grad(const ModelState& m, const Trace& sample) {
  VectorXd g = VectorXd::Zero(static_cast<Eigen::Index>(m.param_count()));
  accumulate_grad(m, sample, g);
  return g;
}

VectorXd batch_grad(const ModelState& m, std::span<const Trace> batch) {
  if (batch.empty()) throw std::invalid_argument("batch_grad: empty batch");
  VectorXd g = VectorXd::Zero(static_cast<Eigen::Index>(m.param_count()));
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const Trace& t : batch) accumulate_grad(m, t, g, scale);
  return g;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::check() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("train: momentum must be in [0,1)");
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight_decay must be >= 0");
}

ModelState train(const ModelState& m, std::span<const Trace> data, const TrainConfig& cfg,
                 std::vector<double>* epoch_losses) {
  cfg.check();
  if (data.empty()) throw std::invalid_argument("train: empty training set");
  ModelState cur = m;
  const auto k = static_cast<Eigen::Index>(cur.param_count());
  VectorXd velocity = VectorXd::Zero(k);
  VectorXd g(k);
  std::vector<std::size_t> order(data.size());

  if (epoch_losses) {
    epoch_losses->clear();
    epoch_losses->push_back(loss(cur, data));
  }
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(substream(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      g.setZero();
      for (std::size_t j = start; j < end; ++j) {
        epoch_loss += accumulate_grad(cur, data[order[j]], g, scale);
      }
      if (cfg.weight_decay > 0.0) g += cfg.weight_decay * cur.theta();
      velocity = cfg.momentum * velocity + g;
      cur.theta() -= cfg.learning_rate * velocity;
      if (!std::isfinite(epoch_loss) || !cur.theta().allFinite()) {
        throw TrainingError("training diverged in epoch " + std::to_string(epoch));
      }
    }
    if (epoch_losses) epoch_losses->push_back(epoch_loss / static_cast<double>(data.size()));
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr const char* kMagic = "unlearnwf-model v1";

void put_le(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.write(buf, 8);
}

double get_le(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}
}  // namespace

void save_model(const ModelState& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kMagic << '\n'
      << "input " << m.arch().input_length << '\n'
      << "layers " << m.arch().layers_string() << '\n'
      << "params " << m.param_count() << '\n';
  for (Eigen::Index i = 0; i < m.theta().size(); ++i) put_le(out, m.theta()[i]);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ModelState load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("model checkpoint not found: " + path.string());
  std::string magic, line;
  std::getline(in, magic);
  if (magic != kMagic) throw std::runtime_error(path.string() + ": not a model checkpoint");
  Architecture arch;
  std::size_t k = 0;
  for (int i = 0; i < 3; ++i) {
    std::getline(in, line);
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string val = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "input") {
      arch.input_length = std::stoul(val);
    } else if (key == "layers") {
      arch.layers = Architecture::parse_layers(val);
    } else if (key == "params") {
      k = std::stoul(val);
    } else {
      throw std::runtime_error(path.string() + ": unexpected header line '" + line + "'");
    }
  }
  VectorXd theta(static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) theta[static_cast<Eigen::Index>(i)] = get_le(in);
  if (!in) throw std::runtime_error(path.string() + ": truncated parameter block");
  return ModelState(std::move(arch), std::move(theta));
}

}  // namespace unlearnwf
