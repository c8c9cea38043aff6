#ifndef UDA_SELECTION_HPP_
#define UDA_SELECTION_HPP_

#include <functional>
#include <string>
#include <vector>

#include "uda/common.hpp"
#include "uda/ctc.hpp"
#include "uda/metrics.hpp"
#include "uda/vocab.hpp"

namespace uda {

struct TeacherScore {
  int teacher_index = 0;
  double q = 0.0;  // average over frames of the per-frame max posterior
};

struct SelectionResult {
  std::string utterance_id;
  int selected_teacher = 0;
  std::vector<TeacherScore> all_scores;
};

/// Average per-frame maximum posterior: (1/T) sum_t max_v exp(logp[t][v]).
/// With exclude_blank the max skips the blank column.
inline double teacher_score(const PosteriorGrid& grid, int blank_index = -1,
                            bool exclude_blank = false) {
  double sum = 0.0;
  for (Eigen::Index t = 0; t < grid.frames(); ++t) {
    double best = kNegInf;
    for (Eigen::Index v = 0; v < grid.vocab_size(); ++v) {
      if (exclude_blank && int(v) == blank_index) continue;
      best = std::max(best, grid.log_probs(t, v));
    }
    sum += std::exp(best);
  }
  return sum / double(grid.frames());
}

namespace selection_detail {

inline void check_aligned(const std::vector<PosteriorGrid>& grids) {
  if (grids.empty()) throw ParameterError("teacher grid list is empty");
  for (const auto& g : grids) {
    if (g.utterance_id != grids[0].utterance_id)
      throw ParameterError("teacher grids disagree on utterance id");
    if (g.frames() != grids[0].frames() || g.vocab_size() != grids[0].vocab_size())
      throw ParameterError("teacher grids disagree on shape for " + g.utterance_id);
  }
}

}  // namespace selection_detail

/// Top-1 teacher selection: argmax of teacher_score, lowest index on ties.
inline SelectionResult select_top1(const std::vector<PosteriorGrid>& grids, int blank_index = -1,
                                   bool exclude_blank = false) {
  selection_detail::check_aligned(grids);
  SelectionResult result;
  result.utterance_id = grids[0].utterance_id;
  for (std::size_t n = 0; n < grids.size(); ++n) {
    const double q = teacher_score(grids[n], blank_index, exclude_blank);
    result.all_scores.push_back({int(n), q});
    if (q > result.all_scores[std::size_t(result.selected_teacher)].q)
      result.selected_teacher = int(n);
  }
  return result;
}

/// Per-cell arithmetic mean in the probability domain, re-expressed as log.
inline PosteriorGrid average_posteriors(const std::vector<PosteriorGrid>& grids) {
  selection_detail::check_aligned(grids);
  PosteriorGrid out;
  out.utterance_id = grids[0].utterance_id;
  Matrix acc = Matrix::Zero(grids[0].frames(), grids[0].vocab_size());
  for (const auto& g : grids) acc += g.log_probs.array().exp().matrix();
  acc /= double(grids.size());
  out.log_probs = acc.array().max(1e-300).log().matrix();
  return out;
}

/// Supervised diagnostic: pick the teacher whose decoded output has lowest
/// WER against the reference; ties break by higher teacher_score, then by
/// lower index.
inline SelectionResult oracle_select(
    const std::vector<PosteriorGrid>& grids, const Transcript& reference, const Vocabulary& vocab,
    const std::function<Transcript(const PosteriorGrid&)>& decode) {
  selection_detail::check_aligned(grids);
  SelectionResult result;
  result.utterance_id = grids[0].utterance_id;
  double best_wer = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < grids.size(); ++n) {
    const double q = teacher_score(grids[n]);
    result.all_scores.push_back({int(n), q});
    const double w = wer(decode(grids[n]), reference, vocab).wer();
    const double best_q = result.all_scores[std::size_t(result.selected_teacher)].q;
    if (w < best_wer || (w == best_wer && q > best_q)) {
      best_wer = w;
      result.selected_teacher = int(n);
    }
  }
  return result;
}

}  // namespace uda

#endif  // UDA_SELECTION_HPP_
