#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "uda/lm.hpp"

using namespace uda;

namespace {

using Sentences = std::vector<std::vector<std::string>>;

double resolved_prob(const NGramModel& model, const std::vector<std::string>& ctx,
                     const std::string& w) {
  NGramModel::State s;
  s.context.assign(ctx.begin(), ctx.end());
  return std::pow(10.0, model.score_word(s, w).first);
}

}  // namespace

TEST_CASE("unigram hand count: 'a b' with vanishing discount") {
  auto model = train_ngram(Sentences{{"a", "b"}}, 1, 1e-10);
  CHECK(resolved_prob(model, {}, "a") == doctest::Approx(1.0 / 3).epsilon(1e-9));
  CHECK(resolved_prob(model, {}, "b") == doctest::Approx(1.0 / 3).epsilon(1e-9));
  CHECK(resolved_prob(model, {}, kSentEnd) == doctest::Approx(1.0 / 3).epsilon(1e-9));
  // order-1 model carries no backoff weights
  for (const auto& [gram, e] : model.entries(1)) {
    (void)gram;
    CHECK_FALSE(e.has_backoff);
  }
}

TEST_CASE("bigram hand count") {
  // "a b" twice, "a c" once; contexts: <s> -> a (3), a -> {b:2, c:1}
  const double d = 0.4;
  auto model = train_ngram(Sentences{{"a", "b"}, {"a", "b"}, {"a", "c"}}, 2, d);
  CHECK(resolved_prob(model, {"a"}, "b") == doctest::Approx((2 - d) / 3).epsilon(1e-9));
  CHECK(resolved_prob(model, {"a"}, "c") == doctest::Approx((1 - d) / 3).epsilon(1e-9));
  CHECK(resolved_prob(model, {kSentBegin}, "a") == doctest::Approx((3 - d) / 3).epsilon(1e-9));
}

TEST_CASE("conditional mass per stored context stays within 1 + 1e-6") {
  auto model = train_ngram(
      Sentences{{"a", "b", "c"}, {"a", "b"}, {"b", "c", "a"}, {"c"}, {"a", "c", "c", "b"}}, 3,
      0.4);
  // enumerate all stored contexts: unigram context (empty) + 1/2-gram entries
  std::vector<std::vector<std::string>> contexts{{}};
  for (int k = 1; k < model.order(); ++k)
    for (const auto& [gram, e] : model.entries(k)) {
      (void)e;
      std::vector<std::string> ctx;
      std::stringstream ss(gram);
      std::string tok;
      while (ss >> tok) ctx.push_back(tok);
      contexts.push_back(ctx);
    }
  for (const auto& ctx : contexts) {
    double mass = 0.0;
    for (const auto& w : model.word_set())
      if (w != kSentBegin) mass += resolved_prob(model, ctx, w);
    CHECK(mass <= 1.0 + 1e-6);
    CHECK(mass > 0.0);
  }
}

TEST_CASE("scoring is pure and positive") {
  auto model = train_ngram(Sentences{{"a", "b"}, {"b", "a"}}, 2, 0.4);
  auto s = model.begin_state();
  auto r1 = model.score_word(s, "a");
  auto r2 = model.score_word(s, "a");
  CHECK(r1.first == r2.first);
  CHECK(r1.first <= 0.0);
  // unseen words resolve through <unk>, never fail
  auto r3 = model.score_word(s, "zzz");
  CHECK(std::isfinite(r3.first));
  CHECK(std::pow(10.0, r3.first) > 0.0);
  CHECK(std::pow(10.0, r3.first) <= 1.0);
}

TEST_CASE("chain rule: repeated score_word equals score_sentence") {
  auto model = train_ngram(
      Sentences{{"a", "b", "c"}, {"b", "c"}, {"c", "a", "b"}, {"a"}}, 3, 0.35);
  const std::vector<std::string> sent{"c", "a", "b", "q"};
  auto s = model.begin_state();
  double total = 0.0;
  for (const auto& w : sent) {
    auto [lp, next] = model.score_word(s, w);
    total += lp;
    s = next;
  }
  total += model.score_word(s, kSentEnd).first;
  CHECK(total == doctest::Approx(model.score_sentence(sent)).epsilon(1e-9));
}

TEST_CASE("ARPA round trip preserves sentence scores within 1e-4 log10") {
  auto model = train_ngram(
      Sentences{{"a", "b", "c"}, {"a", "b"}, {"b", "c", "a"}, {"c", "c"}, {"a", "c", "b", "a"}},
      3, 0.4);
  const std::string path = "test_lm_roundtrip.arpa";
  save_arpa(model, path);
  auto loaded = load_arpa(path);
  const Sentences held_out{{"a", "b"}, {"c", "a", "c"}, {"b"}, {"q", "a"}, {"a", "a", "a"}};
  for (const auto& sent : held_out)
    CHECK(model.score_sentence(sent) ==
          doctest::Approx(loaded.score_sentence(sent)).epsilon(1e-4));
  std::remove(path.c_str());
}

TEST_CASE("malformed ARPA: missing end marker") {
  const std::string path = "test_lm_broken.arpa";
  {
    std::ofstream out(path);
    out << "\n\\data\\\nngram 1=2\n\n\\1-grams:\n-0.5\ta\n-0.5\tb\n";
  }
  CHECK_THROWS_AS(load_arpa(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("empty n-gram section round-trips") {
  NGramModel model;
  model.set_order(2);
  model.insert(1, "a", {-0.3, 0.0, false});
  model.insert(1, kUnknown, {-2.0, 0.0, false});
  const std::string path = "test_lm_empty_section.arpa";
  save_arpa(model, path);
  auto loaded = load_arpa(path);
  CHECK(loaded.order() == 2);
  CHECK(loaded.entries(2).empty());
  CHECK(loaded.entries(1).size() == 2);
  std::remove(path.c_str());
}

TEST_CASE("training rejects bad inputs") {
  CHECK_THROWS_AS(train_ngram({}, 2, 0.4), ParameterError);
  CHECK_THROWS_AS(train_ngram(Sentences{{}}, 2, 0.4), ParameterError);
  CHECK_THROWS_AS(train_ngram(Sentences{{"a"}}, 0, 0.4), ParameterError);
  CHECK_THROWS_AS(train_ngram(Sentences{{"a"}}, 2, 1.5), ParameterError);
}
