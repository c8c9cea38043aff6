#ifndef UDA_CTC_HPP_
#define UDA_CTC_HPP_

#include <string>
#include <vector>

#include "uda/common.hpp"
#include "uda/vocab.hpp"

namespace uda {

/// Per-utterance grid of per-frame log posteriors, T x V with V including
/// the blank symbol. Rows are normalized distributions.
struct PosteriorGrid {
  std::string utterance_id;
  Matrix log_probs;  // T x V

  Eigen::Index frames() const { return log_probs.rows(); }
  Eigen::Index vocab_size() const { return log_probs.cols(); }

  void validate() const {
    if (log_probs.rows() < 1 || log_probs.cols() < 2)
      throw ParameterError("posterior grid must be at least 1 x 2");
    for (Eigen::Index t = 0; t < log_probs.rows(); ++t) {
      for (Eigen::Index v = 0; v < log_probs.cols(); ++v) {
        const double x = log_probs(t, v);
        if (std::isnan(x) || x > 1e-6)
          throw ParameterError("invalid log probability at frame " + std::to_string(t));
      }
      if (std::abs(logsumexp(log_probs.row(t))) > 1e-6)
        throw ParameterError("unnormalized posterior row at frame " + std::to_string(t));
    }
  }
};

/// Collapse a frame-level path: merge consecutive duplicates, drop blanks.
inline Transcript collapse(const std::vector<int>& path, const Vocabulary& vocab) {
  std::vector<int> out;
  int prev = -1;
  for (int s : path) {
    if (s < 0 || s >= vocab.size())
      throw ParameterError("path symbol out of range: " + std::to_string(s));
    if (s != prev && s != vocab.blank_index) out.push_back(s);
    prev = s;
  }
  return Transcript::from_tokens(out, vocab);
}

namespace detail {

// Extended label sequence: blank, l1, blank, l2, ..., blank. States 2L+1.
inline std::vector<int> extended_labels(const Transcript& target, int blank) {
  std::vector<int> ext;
  ext.reserve(2 * target.tokens.size() + 1);
  ext.push_back(blank);
  for (int tok : target.tokens) {
    ext.push_back(tok);
    ext.push_back(blank);
  }
  return ext;
}

inline void check_feasible(const PosteriorGrid& grid, const Transcript& target, int blank) {
  // Minimum frames: one per label plus one per repeated adjacent pair.
  Eigen::Index need = Eigen::Index(target.tokens.size());
  for (std::size_t i = 1; i < target.tokens.size(); ++i)
    if (target.tokens[i] == target.tokens[i - 1]) ++need;
  if (need > grid.frames())
    throw InfeasibleTargetError("target of length " + std::to_string(target.tokens.size()) +
                                " needs " + std::to_string(need) + " frames, grid has " +
                                std::to_string(grid.frames()));
  for (int tok : target.tokens)
    if (tok < 0 || tok >= grid.vocab_size() || tok == blank)
      throw ParameterError("target token out of range");
}

// Log-domain forward lattice, alpha(t, s) over extended label states.
inline Matrix forward_lattice(const Matrix& logp, const std::vector<int>& ext) {
  const Eigen::Index frames = logp.rows();
  const Eigen::Index states = Eigen::Index(ext.size());
  Matrix alpha = Matrix::Constant(frames, states, kNegInf);
  alpha(0, 0) = logp(0, ext[0]);
  if (states > 1) alpha(0, 1) = logp(0, ext[1]);
  for (Eigen::Index t = 1; t < frames; ++t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (s >= 2 && ext[s] != ext[s - 2]) a = log_add(a, alpha(t - 1, s - 2));
      alpha(t, s) = a + logp(t, ext[s]);
    }
  }
  return alpha;
}

inline Matrix backward_lattice(const Matrix& logp, const std::vector<int>& ext) {
  const Eigen::Index frames = logp.rows();
  const Eigen::Index states = Eigen::Index(ext.size());
  Matrix beta = Matrix::Constant(frames, states, kNegInf);
  beta(frames - 1, states - 1) = logp(frames - 1, ext[states - 1]);
  if (states > 1) beta(frames - 1, states - 2) = logp(frames - 1, ext[states - 2]);
  for (Eigen::Index t = frames - 2; t >= 0; --t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double b = beta(t + 1, s);
      if (s + 1 < states) b = log_add(b, beta(t + 1, s + 1));
      if (s + 2 < states && ext[s] != ext[s + 2]) b = log_add(b, beta(t + 1, s + 2));
      beta(t, s) = b + logp(t, ext[s]);
    }
  }
  return beta;
}

}  // namespace detail

/// Negative log likelihood of the target under the grid, marginalized over
/// all collapsing paths.
inline double ctc_loss(const PosteriorGrid& grid, const Transcript& target, int blank_index) {
  detail::check_feasible(grid, target, blank_index);
  const auto ext = detail::extended_labels(target, blank_index);
  const Matrix alpha = detail::forward_lattice(grid.log_probs, ext);
  const Eigen::Index frames = grid.frames();
  const Eigen::Index states = Eigen::Index(ext.size());
  double logp = alpha(frames - 1, states - 1);
  if (states > 1) logp = log_add(logp, alpha(frames - 1, states - 2));
  return -logp;
}

/// Gradient of ctc_loss w.r.t. pre-softmax logits:
/// grad[t][v] = softmax[t][v] - occupancy[t][v] / P(target).
inline Matrix ctc_grad(const PosteriorGrid& grid, const Transcript& target, int blank_index) {
  detail::check_feasible(grid, target, blank_index);
  const auto ext = detail::extended_labels(target, blank_index);
  const Matrix& logp = grid.log_probs;
  const Matrix alpha = detail::forward_lattice(logp, ext);
  const Matrix beta = detail::backward_lattice(logp, ext);
  const Eigen::Index frames = logp.rows();
  const Eigen::Index vocab = logp.cols();
  const Eigen::Index states = Eigen::Index(ext.size());

  double total = alpha(frames - 1, states - 1);
  if (states > 1) total = log_add(total, alpha(frames - 1, states - 2));

  Matrix grad(frames, vocab);
  for (Eigen::Index t = 0; t < frames; ++t) {
    Vector occ = Vector::Constant(vocab, kNegInf);
    for (Eigen::Index s = 0; s < states; ++s) {
      // alpha and beta both include logp(t, ext[s]); divide one copy out.
      const double g = alpha(t, s) + beta(t, s) - logp(t, ext[s]);
      occ[ext[s]] = log_add(occ[ext[s]], g);
    }
    for (Eigen::Index v = 0; v < vocab; ++v)
      grad(t, v) = std::exp(logp(t, v)) -
                   (occ[v] == kNegInf ? 0.0 : std::exp(occ[v] - total));
  }
  return grad;
}

/// Per-frame argmax (ties to the lowest symbol index), then collapse.
inline Transcript greedy_decode(const PosteriorGrid& grid, const Vocabulary& vocab) {
  std::vector<int> path(std::size_t(grid.frames()));
  for (Eigen::Index t = 0; t < grid.frames(); ++t) {
    int best = 0;
    for (Eigen::Index v = 1; v < grid.vocab_size(); ++v)
      if (grid.log_probs(t, v) > grid.log_probs(t, best)) best = int(v);
    path[std::size_t(t)] = best;
  }
  return collapse(path, vocab);
}

// ---- PosteriorGrid file format ---------------------------------------------
// Text header "id T V\n" followed by T*V little-endian float32 log probs,
// row-major. Interchange format between inference and selection/decoding.

inline void save_grid(const PosteriorGrid& grid, std::ostream& out) {
  out << grid.utterance_id << " " << grid.frames() << " " << grid.vocab_size() << "\n";
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f =
      grid.log_probs.cast<float>();
  out.write(reinterpret_cast<const char*>(f.data()), std::streamsize(sizeof(float)) * f.size());
}

inline PosteriorGrid load_grid(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw FormatError("truncated grid file: missing header");
  std::istringstream hs(header);
  PosteriorGrid grid;
  Eigen::Index frames = 0, vocab = 0;
  if (!(hs >> grid.utterance_id >> frames >> vocab) || frames < 1 || vocab < 2)
    throw FormatError("malformed grid header: '" + header + "'");
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f(frames, vocab);
  in.read(reinterpret_cast<char*>(f.data()), std::streamsize(sizeof(float)) * f.size());
  if (!in) throw FormatError("truncated grid payload for utterance " + grid.utterance_id);
  grid.log_probs = f.cast<double>();
  return grid;
}

}  // namespace uda

#endif  // UDA_CTC_HPP_
