#include <doctest.h>

#include <vector>

#include "test_util.hpp"
#include "uda/metrics.hpp"

using namespace uda;

namespace {

// Exhaustive-recursion edit distance, independent of the DP implementation.
int brute_edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b,
                        std::size_t i = 0, std::size_t j = 0) {
  if (i == a.size()) return int(b.size() - j);
  if (j == b.size()) return int(a.size() - i);
  int best = brute_edit_distance(a, b, i + 1, j + 1) + (a[i] == b[j] ? 0 : 1);
  best = std::min(best, brute_edit_distance(a, b, i + 1, j) + 1);
  best = std::min(best, brute_edit_distance(a, b, i, j + 1) + 1);
  return best;
}

std::vector<std::string> random_words(Rng& rng, int max_len) {
  std::vector<std::string> out;
  const int n = int(rng.uniform_int(0, max_len));
  for (int i = 0; i < n; ++i)
    out.push_back(std::string(1, char('a' + rng.uniform_int(0, 3))));
  return out;
}

}  // namespace

TEST_CASE("identical transcripts score zero") {
  auto w = std::vector<std::string>{"a", "b", "c"};
  auto r = wer_words(w, w);
  CHECK(r.errors() == 0);
  CHECK(r.wer() == 0.0);
}

TEST_CASE("single substitution") {
  auto r = wer_words({"a", "b", "c"}, {"a", "x", "c"});
  CHECK(r.substitutions == 1);
  CHECK(r.insertions == 0);
  CHECK(r.deletions == 0);
  CHECK(r.wer() == doctest::Approx(1.0 / 3));
}

TEST_CASE("empty reference counts insertions against denominator 1") {
  auto r = wer_words({"a", "b"}, {});
  CHECK(r.insertions == 2);
  CHECK(r.reference_words == 0);
  CHECK(r.empty_reference);
  CHECK(r.wer() == doctest::Approx(2.0));
}

TEST_CASE("error counts match brute-force edit distance on random pairs") {
  Rng rng(17);
  for (int iter = 0; iter < 200; ++iter) {
    auto hyp = random_words(rng, 8);
    auto ref = random_words(rng, 8);
    auto r = wer_words(hyp, ref);
    CHECK(r.errors() == brute_edit_distance(hyp, ref));
  }
}

TEST_CASE("edit distance is symmetric and satisfies the triangle inequality") {
  Rng rng(23);
  for (int iter = 0; iter < 100; ++iter) {
    auto a = random_words(rng, 6);
    auto b = random_words(rng, 6);
    auto c = random_words(rng, 6);
    CHECK(wer_words(a, b).errors() == wer_words(b, a).errors());
    CHECK(wer_words(a, c).errors() <= wer_words(a, b).errors() + wer_words(b, c).errors());
  }
}

TEST_CASE("corpus WER pools counts before dividing") {
  auto vocab = testutil::make_vocab(3);
  // pair 1: 1 error over 1 word; pair 2: 0 errors over 9 words
  auto one_word = [&](const std::string&) {
    return Transcript::from_tokens({1}, vocab);
  };
  auto hyp1 = Transcript::from_tokens({2}, vocab);
  std::vector<int> nine;
  for (int i = 0; i < 9; ++i) {
    nine.push_back(1);
    if (i + 1 < 9) nine.push_back(vocab.delimiter_index());
  }
  auto long_t = Transcript::from_tokens(nine, vocab);
  std::vector<std::pair<Transcript, Transcript>> pairs{{hyp1, one_word("a")},
                                                       {long_t, long_t}};
  auto pooled = corpus_wer(pairs, vocab);
  CHECK(pooled.wer() == doctest::Approx(0.1));
  // counts additivity
  auto w1 = wer(pairs[0].first, pairs[0].second, vocab);
  auto w2 = wer(pairs[1].first, pairs[1].second, vocab);
  CHECK(pooled.errors() == w1.errors() + w2.errors());
  CHECK(pooled.reference_words == w1.reference_words + w2.reference_words);

  std::vector<std::pair<Transcript, Transcript>> single{pairs[0]};
  CHECK(corpus_wer(single, vocab).wer() == w1.wer());
  CHECK_THROWS_AS(corpus_wer({}, vocab), ParameterError);
}
