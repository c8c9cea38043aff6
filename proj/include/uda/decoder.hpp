#ifndef UDA_DECODER_HPP_
#define UDA_DECODER_HPP_

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "uda/common.hpp"
#include "uda/ctc.hpp"
#include "uda/lm.hpp"
#include "uda/metrics.hpp"
#include "uda/vocab.hpp"

namespace uda {

constexpr double kLn10 = 2.302585092994045684;

struct DecodeConfig {
  int beam_width = 64;
  double alpha = 0.0;  // LM weight
  double beta = 0.0;   // word-count bonus
  double prune_log_threshold = -9.2;  // per-frame symbol pruning, -inf disables

  void validate() const {
    if (beam_width < 1) throw ParameterError("beam_width must be >= 1");
    if (alpha < 0) throw ParameterError("alpha must be >= 0");
    if (prune_log_threshold > 0) throw ParameterError("prune_log_threshold must be <= 0");
  }
};

struct DecodeResult {
  Transcript transcript;
  double total_score = kNegInf;  // log p_AM + alpha * ln p_LM + beta * words
  double am_score = kNegInf;     // natural-log CTC prefix marginal
  double lm_log10 = 0.0;         // log10 p_LM over completed words
  int word_count = 0;
};

namespace decoder_detail {

// Per-prefix bookkeeping. p_blank/p_nonblank are natural-log path masses of
// the prefix split by whether the path ends in blank. LM fields are a pure
// function of the prefix.
struct Hyp {
  double p_blank = kNegInf;
  double p_nonblank = kNegInf;
  NGramModel::State lm_state;
  double lm_log10 = 0.0;
  int word_count = 0;
  std::string partial_word;  // graphemes since the last delimiter
  bool lm_init = false;

  double am() const { return log_add(p_blank, p_nonblank); }
};

}  // namespace decoder_detail

/// CTC prefix beam search over collapsed prefixes with shallow fusion of a
/// word n-gram LM:  argmax_y  log p_AM(y|x) + alpha * ln p_LM(y) + beta |y|.
/// The LM is charged whenever a delimiter completes a word, plus once for the
/// trailing word at end of utterance. Score ties break lexicographically on
/// the rendered transcript.
inline DecodeResult beam_search_decode(const PosteriorGrid& grid, const NGramModel* lm,
                                       const DecodeConfig& config, const Vocabulary& vocab) {
  config.validate();
  if (lm == nullptr && config.alpha != 0.0)
    throw ParameterError("alpha > 0 requires a language model");
  if (grid.vocab_size() != vocab.size())
    throw ParameterError("grid vocabulary size does not match vocabulary");
  const bool use_lm = lm != nullptr && config.alpha > 0.0;
  const int blank = vocab.blank_index;
  const int delim = vocab.delimiter_index();

  using decoder_detail::Hyp;
  using Beam = std::map<std::vector<int>, Hyp>;

  Beam beam;
  {
    Hyp root;
    root.p_blank = 0.0;
    if (use_lm) root.lm_state = lm->begin_state();
    root.lm_init = true;
    beam[{}] = root;
  }

  auto partial_score = [&](const Hyp& h) {
    return h.am() + config.alpha * kLn10 * h.lm_log10 + config.beta * h.word_count;
  };

  // Copy the parent's LM bookkeeping into a freshly created child entry.
  // appended < 0 means the prefix itself did not grow. LM fields depend only
  // on the prefix, so the first parent to touch a child initializes them.
  auto init_child = [&](Hyp& child, const Hyp& parent, int appended) {
    if (child.lm_init) return;
    child.lm_state = parent.lm_state;
    child.lm_log10 = parent.lm_log10;
    child.word_count = parent.word_count;
    child.partial_word = parent.partial_word;
    if (appended == delim) {
      if (!child.partial_word.empty()) {
        if (use_lm) {
          auto [lp10, ns] = lm->score_word(child.lm_state, child.partial_word);
          child.lm_log10 += lp10;
          child.lm_state = ns;
        }
        ++child.word_count;
      }
      child.partial_word.clear();
    } else if (appended >= 0) {
      child.partial_word += vocab.symbols[std::size_t(appended)];
    }
    child.lm_init = true;
  };

  for (Eigen::Index t = 0; t < grid.frames(); ++t) {
    Beam next;
    for (const auto& [prefix, hyp] : beam) {
      const int last = prefix.empty() ? -1 : prefix.back();
      for (int v = 0; v < vocab.size(); ++v) {
        const double lp = grid.log_probs(t, v);
        if (lp < config.prune_log_threshold) continue;
        if (v == blank) {
          Hyp& h = next[prefix];
          init_child(h, hyp, -1);
          h.p_blank = log_add(h.p_blank, hyp.am() + lp);
          continue;
        }
        if (v == last) {
          // Same symbol again: merges into the same prefix unless a blank
          // separated it.
          Hyp& same = next[prefix];
          init_child(same, hyp, -1);
          same.p_nonblank = log_add(same.p_nonblank, hyp.p_nonblank + lp);

          std::vector<int> ext = prefix;
          ext.push_back(v);
          Hyp& grown = next[ext];
          init_child(grown, hyp, v);
          grown.p_nonblank = log_add(grown.p_nonblank, hyp.p_blank + lp);
          continue;
        }
        std::vector<int> ext = prefix;
        ext.push_back(v);
        Hyp& grown = next[ext];
        init_child(grown, hyp, v);
        grown.p_nonblank = log_add(grown.p_nonblank, hyp.am() + lp);
      }
    }

    if (int(next.size()) > config.beam_width) {
      std::vector<Beam::const_iterator> order;
      order.reserve(next.size());
      for (auto it = next.begin(); it != next.end(); ++it) order.push_back(it);
      std::stable_sort(order.begin(), order.end(),
                       [&](const auto& a, const auto& b) {
                         const double sa = partial_score(a->second);
                         const double sb = partial_score(b->second);
                         if (sa != sb) return sa > sb;
                         return a->first < b->first;
                       });
      Beam pruned;
      for (int i = 0; i < config.beam_width; ++i)
        pruned.insert(*order[std::size_t(i)]);
      next = std::move(pruned);
    }
    beam = std::move(next);
  }

  // Final scoring: charge the trailing word, pick the best hypothesis.
  DecodeResult best;
  std::string best_rendered;
  bool have_best = false;
  for (const auto& [prefix, hyp] : beam) {
    if (hyp.am() == kNegInf) continue;
    double lm_log10 = hyp.lm_log10;
    int words = hyp.word_count;
    if (!hyp.partial_word.empty()) {
      if (use_lm) lm_log10 += lm->score_word(hyp.lm_state, hyp.partial_word).first;
      ++words;
    }
    const double total =
        hyp.am() + config.alpha * kLn10 * lm_log10 + config.beta * words;
    Transcript tr = Transcript::from_tokens(prefix, vocab);
    if (!have_best || total > best.total_score ||
        (total == best.total_score && tr.rendered < best_rendered)) {
      best.transcript = std::move(tr);
      best.total_score = total;
      best.am_score = hyp.am();
      best.lm_log10 = lm_log10;
      best.word_count = words;
      best_rendered = best.transcript.rendered;
      have_best = true;
    }
  }
  if (!have_best) throw ParameterError("beam search retained no hypothesis");
  return best;
}

/// Exhaustive grid search for (alpha, beta) minimizing corpus WER on a
/// validation set. Ties break toward smaller alpha, then smaller beta.
inline DecodeConfig tune_hyperparams(const std::vector<PosteriorGrid>& grids,
                                     const std::vector<Transcript>& references,
                                     const NGramModel& lm, std::vector<double> alpha_grid,
                                     std::vector<double> beta_grid, int beam_width,
                                     const Vocabulary& vocab) {
  if (grids.empty() || grids.size() != references.size())
    throw ParameterError("tune_hyperparams needs matching nonempty grids and references");
  if (alpha_grid.empty() || beta_grid.empty())
    throw ParameterError("empty hyperparameter grid");
  std::sort(alpha_grid.begin(), alpha_grid.end());
  std::sort(beta_grid.begin(), beta_grid.end());

  DecodeConfig best;
  best.beam_width = beam_width;
  double best_wer = std::numeric_limits<double>::infinity();
  bool first = true;
  for (double alpha : alpha_grid) {
    for (double beta : beta_grid) {
      DecodeConfig cfg;
      cfg.beam_width = beam_width;
      cfg.alpha = alpha;
      cfg.beta = beta;
      std::vector<std::pair<Transcript, Transcript>> pairs;
      for (std::size_t i = 0; i < grids.size(); ++i)
        pairs.emplace_back(beam_search_decode(grids[i], &lm, cfg, vocab).transcript,
                           references[i]);
      const double w = corpus_wer(pairs, vocab).wer();
      if (first || w < best_wer) {
        best = cfg;
        best_wer = w;
        first = false;
      }
    }
  }
  return best;
}

}  // namespace uda

#endif  // UDA_DECODER_HPP_
