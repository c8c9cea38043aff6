#ifndef UDA_ACOUSTIC_HPP_
#define UDA_ACOUSTIC_HPP_

#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "uda/common.hpp"
#include "uda/corpus.hpp"
#include "uda/ctc.hpp"
#include "uda/vocab.hpp"

namespace uda {

/// Frame-level MLP over a symmetric context window of input frames, ending in
/// a log-softmax over the grapheme vocabulary. Stands in for a full
/// self-supervised trunk: the pipeline only needs a trainable map from frames
/// to per-frame posteriors with exactly checkable gradients.
struct AcousticModel {
  int input_dim = 0;
  int context_window = 1;  // frames on each side
  std::vector<int> hidden_dims;
  Vocabulary vocab;
  std::uint64_t seed = 0;
  std::vector<Matrix> weights;  // per layer, out x in
  std::vector<Vector> biases;

  int output_dim() const { return vocab.size(); }
  int window_dim() const { return input_dim * (2 * context_window + 1); }

  static AcousticModel init(int input_dim, int context_window,
                            const std::vector<int>& hidden_dims, const Vocabulary& vocab,
                            std::uint64_t seed) {
    vocab.validate();
    if (input_dim < 1 || context_window < 0)
      throw ParameterError("invalid acoustic model dimensions");
    AcousticModel m;
    m.input_dim = input_dim;
    m.context_window = context_window;
    m.hidden_dims = hidden_dims;
    m.vocab = vocab;
    m.seed = seed;
    Rng rng(mix64(seed) ^ 0x61636f7573746963ULL);
    std::vector<int> dims;
    dims.push_back(m.window_dim());
    dims.insert(dims.end(), hidden_dims.begin(), hidden_dims.end());
    dims.push_back(vocab.size());
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const int fan_in = dims[l];
      const int fan_out = dims[l + 1];
      if (fan_in < 1 || fan_out < 1) throw ParameterError("invalid layer dimension");
      const double scale = 1.0 / std::sqrt(double(fan_in));
      Matrix w(fan_out, fan_in);
      for (int r = 0; r < fan_out; ++r)
        for (int c = 0; c < fan_in; ++c) w(r, c) = scale * rng.gaussian();
      m.weights.push_back(std::move(w));
      m.biases.push_back(Vector::Zero(fan_out));
    }
    return m;
  }

  bool same_shape(const AcousticModel& o) const {
    return input_dim == o.input_dim && context_window == o.context_window &&
           hidden_dims == o.hidden_dims && vocab.symbols == o.vocab.symbols;
  }
};

struct TrainConfig {
  int epochs = 20;
  double learning_rate = 0.1;
  int batch_size = 8;
  double l2 = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ParameterError("epochs must be >= 1");
    if (!(learning_rate >= 0)) throw ParameterError("learning_rate must be >= 0");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  }
};

struct TrainResult {
  AcousticModel model;
  std::vector<double> epoch_loss;
  long skipped_utterances = 0;
};

namespace acoustic_detail {

// Windowed input: row t is frames t-w..t+w concatenated, zero padded at edges.
inline Matrix window_input(const FrameMatrix& frames, int window) {
  const Eigen::Index total = frames.rows();
  const Eigen::Index dim = frames.cols();
  Matrix x = Matrix::Zero(total, dim * (2 * window + 1));
  for (Eigen::Index t = 0; t < total; ++t)
    for (int off = -window; off <= window; ++off) {
      const Eigen::Index src = t + off;
      if (src < 0 || src >= total) continue;
      x.block(t, (off + window) * dim, 1, dim) = frames.row(src).cast<double>();
    }
  return x;
}

struct ForwardCache {
  std::vector<Matrix> activations;  // activations[0] = windowed input
  Matrix log_probs;                 // T x V, log-softmax of final logits
};

inline ForwardCache forward_cached(const AcousticModel& model, const FrameMatrix& frames) {
  if (frames.cols() != model.input_dim)
    throw ParameterError("feature dimension mismatch: got " + std::to_string(frames.cols()) +
                         ", model expects " + std::to_string(model.input_dim));
  ForwardCache cache;
  cache.activations.push_back(window_input(frames, model.context_window));
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    Matrix z = cache.activations.back() * model.weights[l].transpose();
    z.rowwise() += model.biases[l].transpose();
    if (l + 1 < model.weights.size()) z = z.array().tanh().matrix();
    cache.activations.push_back(std::move(z));
  }
  Matrix& logits = cache.activations.back();
  cache.log_probs.resize(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t)
    cache.log_probs.row(t) = logits.row(t).array() - logsumexp(logits.row(t));
  return cache;
}

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static Gradients zeros_like(const AcousticModel& m) {
    Gradients g;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
      g.weights.push_back(Matrix::Zero(m.weights[l].rows(), m.weights[l].cols()));
      g.biases.push_back(Vector::Zero(m.biases[l].size()));
    }
    return g;
  }

  void scale(double s) {
    for (auto& w : weights) w *= s;
    for (auto& b : biases) b *= s;
  }
};

// Backpropagate dL/dlogits through the cached forward pass, accumulating
// into g.
inline void backprop(const AcousticModel& model, const ForwardCache& cache,
                     const Matrix& dlogits, Gradients& g) {
  Matrix delta = dlogits;  // T x out
  for (std::size_t l = model.weights.size(); l-- > 0;) {
    g.weights[l] += delta.transpose() * cache.activations[l];
    g.biases[l] += delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix da = delta * model.weights[l];
      const Matrix& a = cache.activations[l];  // tanh outputs
      delta = (da.array() * (1.0 - a.array().square())).matrix();
    }
  }
}

inline void apply_update(AcousticModel& model, const Gradients& g, double lr, double l2) {
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    model.weights[l] -= lr * (g.weights[l] + l2 * model.weights[l]);
    model.biases[l] -= lr * (g.biases[l] + l2 * model.biases[l]);
  }
}

}  // namespace acoustic_detail

inline PosteriorGrid forward(const AcousticModel& model, const Utterance& utt) {
  PosteriorGrid grid;
  grid.utterance_id = utt.id;
  grid.log_probs = acoustic_detail::forward_cached(model, utt.frames).log_probs;
  return grid;
}

/// Minibatch SGD on mean CTC loss over hard labels. Utterances whose label is
/// infeasible for their frame count are skipped and counted. Deterministic
/// given config.seed: the shuffle schedule is a pure function of it.
inline TrainResult train(const AcousticModel& start, const Corpus& corpus,
                         const std::vector<Transcript>& labels, const TrainConfig& config) {
  config.validate();
  if (labels.size() != corpus.utterances.size())
    throw ParameterError("labels must cover every utterance");
  using namespace acoustic_detail;
  TrainResult result;
  result.model = start;
  AcousticModel& model = result.model;
  Rng shuffle_rng(mix64(config.seed) ^ 0x736875666c65ULL);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(corpus.utterances.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i) - 1))]);

    double epoch_loss = 0.0;
    long scored = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(config.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + std::size_t(config.batch_size));
      Gradients g = Gradients::zeros_like(model);
      int batch_scored = 0;
      for (std::size_t k = begin; k < end; ++k) {
        const Utterance& utt = corpus.utterances[order[k]];
        const Transcript& label = labels[order[k]];
        ForwardCache cache = forward_cached(model, utt.frames);
        PosteriorGrid grid;
        grid.utterance_id = utt.id;
        grid.log_probs = cache.log_probs;
        try {
          const double loss = ctc_loss(grid, label, model.vocab.blank_index);
          const Matrix dlogits = ctc_grad(grid, label, model.vocab.blank_index);
          backprop(model, cache, dlogits, g);
          epoch_loss += loss;
          ++scored;
          ++batch_scored;
        } catch (const InfeasibleTargetError&) {
          if (epoch == 0) ++result.skipped_utterances;
        }
      }
      if (batch_scored == 0) continue;
      g.scale(1.0 / double(batch_scored));
      apply_update(model, g, config.learning_rate, config.l2);
    }
    result.epoch_loss.push_back(scored > 0 ? epoch_loss / double(scored) : 0.0);
  }
  return result;
}

/// Minibatch SGD on mean per-frame KL(teacher row || student row) against
/// fixed teacher posteriors.
inline TrainResult kl_distill_train(const AcousticModel& start, const Corpus& corpus,
                                    const std::vector<PosteriorGrid>& teacher_grids,
                                    const TrainConfig& config) {
  config.validate();
  if (teacher_grids.size() != corpus.utterances.size())
    throw ParameterError("teacher grids must cover every utterance");
  using namespace acoustic_detail;
  TrainResult result;
  result.model = start;
  AcousticModel& model = result.model;
  Rng shuffle_rng(mix64(config.seed) ^ 0x736875666c65ULL);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(corpus.utterances.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i) - 1))]);

    double epoch_loss = 0.0;
    long scored = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += std::size_t(config.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + std::size_t(config.batch_size));
      Gradients g = Gradients::zeros_like(model);
      int batch_scored = 0;
      for (std::size_t k = begin; k < end; ++k) {
        const Utterance& utt = corpus.utterances[order[k]];
        const PosteriorGrid& teacher = teacher_grids[order[k]];
        if (teacher.frames() != utt.frames.rows())
          throw ParameterError("teacher grid frame count mismatch for " + utt.id);
        ForwardCache cache = forward_cached(model, utt.frames);
        const Eigen::Index frames = cache.log_probs.rows();
        const Matrix teacher_p = teacher.log_probs.array().exp().matrix();
        const Matrix student_p = cache.log_probs.array().exp().matrix();
        double loss = 0.0;
        for (Eigen::Index t = 0; t < frames; ++t)
          for (Eigen::Index v = 0; v < cache.log_probs.cols(); ++v)
            if (teacher_p(t, v) > 0)
              loss += teacher_p(t, v) * (teacher.log_probs(t, v) - cache.log_probs(t, v));
        loss /= double(frames);
        const Matrix dlogits = (student_p - teacher_p) / double(frames);
        backprop(model, cache, dlogits, g);
        epoch_loss += loss;
        ++scored;
        ++batch_scored;
      }
      if (batch_scored == 0) continue;
      g.scale(1.0 / double(batch_scored));
      apply_update(model, g, config.learning_rate, config.l2);
    }
    result.epoch_loss.push_back(scored > 0 ? epoch_loss / double(scored) : 0.0);
  }
  return result;
}

// ---- checkpoint I/O --------------------------------------------------------
// Text header (dims, vocab hash, seed) + little-endian float32 parameter
// blob, layer by layer, weights row-major then biases.

inline std::uint64_t vocab_hash(const Vocabulary& vocab) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  };
  for (const auto& s : vocab.symbols) feed(s);
  feed(vocab.word_delimiter);
  h ^= std::uint64_t(vocab.blank_index);
  return h;
}

inline void save_checkpoint(const AcousticModel& model, const std::string& path) {
  std::ofstream out(path + ".tmp", std::ios::binary);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
  out << "uda-acoustic 1 " << model.input_dim << " " << model.context_window << " ";
  out << model.hidden_dims.size();
  for (int h : model.hidden_dims) out << " " << h;
  out << " " << model.output_dim() << " " << model.seed << " " << vocab_hash(model.vocab) << "\n";
  std::vector<float> blob;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    const Matrix& w = model.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) blob.push_back(float(w(r, c)));
    for (Eigen::Index i = 0; i < model.biases[l].size(); ++i)
      blob.push_back(float(model.biases[l][i]));
  }
  out.write(reinterpret_cast<const char*>(blob.data()),
            std::streamsize(sizeof(float)) * std::streamsize(blob.size()));
  out.close();
  if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
    throw FormatError("cannot finalize checkpoint: " + path);
}

inline AcousticModel load_checkpoint(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  std::string header;
  if (!std::getline(in, header)) throw FormatError("checkpoint missing header: " + path);
  std::istringstream hs(header);
  std::string magic;
  int version = 0, input_dim = 0, window = 0, output_dim = 0;
  std::size_t n_hidden = 0;
  std::uint64_t seed = 0, vhash = 0;
  hs >> magic >> version >> input_dim >> window >> n_hidden;
  std::vector<int> hidden(n_hidden);
  for (auto& h : hidden) hs >> h;
  hs >> output_dim >> seed >> vhash;
  if (!hs || magic != "uda-acoustic" || version != 1)
    throw FormatError("malformed checkpoint header in " + path);
  if (vhash != vocab_hash(vocab))
    throw IntegrityError("checkpoint vocabulary hash mismatch: " + path);
  if (output_dim != vocab.size())
    throw IntegrityError("checkpoint output dimension mismatch: " + path);

  AcousticModel model = AcousticModel::init(input_dim, window, hidden, vocab, seed);
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    Matrix& w = model.weights[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        float f;
        in.read(reinterpret_cast<char*>(&f), sizeof(float));
        w(r, c) = double(f);
      }
    for (Eigen::Index i = 0; i < model.biases[l].size(); ++i) {
      float f;
      in.read(reinterpret_cast<char*>(&f), sizeof(float));
      model.biases[l][i] = double(f);
    }
  }
  if (!in) throw FormatError("checkpoint payload truncated: " + path);
  return model;
}

/// Quantize parameters to float32, matching what a checkpoint round-trip
/// produces. The pipeline runs every trained model through this so that
/// resumed and uninterrupted runs are bit-identical.
inline void quantize_to_f32(AcousticModel& model) {
  for (auto& w : model.weights) w = w.cast<float>().cast<double>();
  for (auto& b : model.biases) b = b.cast<float>().cast<double>();
}

}  // namespace uda

#endif  // UDA_ACOUSTIC_HPP_
