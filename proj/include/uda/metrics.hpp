#ifndef UDA_METRICS_HPP_
#define UDA_METRICS_HPP_

#include <string>
#include <vector>

#include "uda/common.hpp"
#include "uda/vocab.hpp"

namespace uda {

struct WerBreakdown {
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  long reference_words = 0;
  bool empty_reference = false;  // flagged when errors are counted against denominator 1

  long errors() const { return substitutions + insertions + deletions; }
  double wer() const { return double(errors()) / double(std::max(reference_words, 1L)); }
};

/// Minimal-edit alignment with unit costs. Among minimal alignments,
/// substitutions are preferred over insertion+deletion pairs.
inline WerBreakdown wer_words(const std::vector<std::string>& hyp,
                              const std::vector<std::string>& ref) {
  const std::size_t n = hyp.size();
  const std::size_t m = ref.size();
  // dp[i][j]: edit distance between hyp[0..i) and ref[0..j).
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) dp[i][0] = int(i);
  for (std::size_t j = 0; j <= m; ++j) dp[0][j] = int(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = dp[i - 1][j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      const int ins = dp[i - 1][j] + 1;
      const int del = dp[i][j - 1] + 1;
      dp[i][j] = std::min({sub, ins, del});
    }
  }
  WerBreakdown out;
  out.reference_words = long(m);
  out.empty_reference = (m == 0 && n > 0);
  // Backtrace, preferring match/substitution.
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        dp[i][j] == dp[i - 1][j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1)) {
      if (hyp[i - 1] != ref[j - 1]) ++out.substitutions;
      --i;
      --j;
    } else if (i > 0 && dp[i][j] == dp[i - 1][j] + 1) {
      ++out.insertions;
      --i;
    } else {
      ++out.deletions;
      --j;
    }
  }
  return out;
}

inline WerBreakdown wer(const Transcript& hyp, const Transcript& ref, const Vocabulary& vocab) {
  return wer_words(hyp.words(vocab), ref.words(vocab));
}

/// Pooled corpus WER: error counts and reference words are summed across
/// utterances before dividing.
inline WerBreakdown corpus_wer(const std::vector<std::pair<Transcript, Transcript>>& pairs,
                               const Vocabulary& vocab) {
  if (pairs.empty()) throw ParameterError("corpus_wer on empty pair list");
  WerBreakdown total;
  for (const auto& [hyp, ref] : pairs) {
    const WerBreakdown w = wer(hyp, ref, vocab);
    total.substitutions += w.substitutions;
    total.insertions += w.insertions;
    total.deletions += w.deletions;
    total.reference_words += w.reference_words;
    total.empty_reference = total.empty_reference || w.empty_reference;
  }
  return total;
}

}  // namespace uda

#endif  // UDA_METRICS_HPP_
