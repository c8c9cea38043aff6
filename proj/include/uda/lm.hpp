#ifndef UDA_LM_HPP_
#define UDA_LM_HPP_

#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "uda/common.hpp"

namespace uda {

inline const std::string kSentBegin = "<s>";
inline const std::string kSentEnd = "</s>";
inline const std::string kUnknown = "<unk>";

/// Word-level backoff n-gram model with absolute discounting.
/// Probabilities are kept in log10 (ARPA convention) and converted to
/// natural log at the decoder boundary.
class NGramModel {
 public:
  struct Entry {
    double log10_prob = 0.0;
    double log10_backoff = 0.0;
    bool has_backoff = false;
  };

  int order() const { return int(tables_.size()); }

  const std::map<std::string, Entry>& entries(int k) const {
    return tables_.at(std::size_t(k) - 1);
  }

  bool known_word(const std::string& w) const { return vocab_.count(w) > 0; }

  const std::set<std::string>& word_set() const { return vocab_; }

  /// Incremental scoring state: the most recent (order-1) words.
  struct State {
    std::deque<std::string> context;
    double cumulative_log10 = 0.0;
  };

  State begin_state() const {
    State s;
    if (order() > 1) s.context.push_back(kSentBegin);
    return s;
  }

  /// Backoff-resolved conditional log10 probability of `word` given the
  /// state's context; returns the score and the successor state.
  std::pair<double, State> score_word(const State& state, const std::string& word) const {
    const std::string w = known_word(word) ? word : kUnknown;
    std::vector<std::string> ctx(state.context.begin(), state.context.end());
    const double lp = resolve(ctx, w);
    State next = state;
    next.cumulative_log10 += lp;
    next.context.push_back(w);
    while (int(next.context.size()) > order() - 1) next.context.pop_front();
    return {lp, next};
  }

  /// Full-sentence log10 score including the end-of-sentence transition.
  double score_sentence(const std::vector<std::string>& words) const {
    State s = begin_state();
    for (const auto& w : words) s = score_word(s, w).second;
    s = score_word(s, kSentEnd).second;
    return s.cumulative_log10;
  }

  void set_order(int k) { tables_.assign(std::size_t(k), {}); }

  void insert(int k, const std::string& gram, Entry e) {
    tables_.at(std::size_t(k) - 1)[gram] = e;
    if (k == 1) vocab_.insert(gram);
  }

  void set_backoff(int k, const std::string& gram, double log10_bow) {
    auto& table = tables_.at(std::size_t(k) - 1);
    auto it = table.find(gram);
    if (it == table.end()) {
      insert(k, gram, {-99.0, log10_bow, true});
    } else {
      it->second.log10_backoff = log10_bow;
      it->second.has_backoff = true;
    }
  }

  void validate() const {
    for (int k = 2; k <= order(); ++k) {
      for (const auto& [gram, e] : entries(k)) {
        (void)e;
        const auto pos = gram.find_last_of(' ');
        const std::string prefix = gram.substr(0, pos);
        const int plen = k - 1;
        if (tables_[std::size_t(plen) - 1].count(prefix) == 0)
          throw FormatError("n-gram '" + gram + "' lacks its prefix entry");
      }
    }
  }

 private:
  double resolve(std::vector<std::string> ctx, const std::string& w) const {
    while (true) {
      const int k = int(ctx.size()) + 1;
      if (k <= order()) {
        std::string gram;
        for (const auto& c : ctx) gram += c + " ";
        gram += w;
        const auto& table = tables_[std::size_t(k) - 1];
        auto it = table.find(gram);
        if (it != table.end()) return it->second.log10_prob;
      }
      if (ctx.empty()) {
        auto it = tables_[0].find(kUnknown);
        if (it == tables_[0].end())
          throw FormatError("model has no <unk> entry");
        return it->second.log10_prob;
      }
      // back off: charge bow of the context, shorten it
      std::string cgram;
      for (std::size_t i = 0; i < ctx.size(); ++i) cgram += (i ? " " : "") + ctx[i];
      double bow = 0.0;
      const int clen = int(ctx.size());
      if (clen <= order()) {
        const auto& ctable = tables_[std::size_t(clen) - 1];
        auto it = ctable.find(cgram);
        if (it != ctable.end() && it->second.has_backoff) bow = it->second.log10_backoff;
      }
      ctx.erase(ctx.begin());
      const double lower = resolve(ctx, w);
      return bow + lower;
    }
  }

  std::vector<std::map<std::string, Entry>> tables_;
  std::set<std::string> vocab_;
};

namespace lm_detail {

inline std::string join(const std::vector<std::string>& words, std::size_t first,
                        std::size_t count) {
  std::string out;
  for (std::size_t i = 0; i < count; ++i) out += (i ? " " : "") + words[first + i];
  return out;
}

}  // namespace lm_detail

/// Train a backoff n-gram model by absolute discounting: each seen n-gram
/// donates `discount` of its count; the freed mass becomes the context's
/// backoff weight, normalized against the lower-order distribution.
inline NGramModel train_ngram(const std::vector<std::vector<std::string>>& transcripts, int order,
                              double discount) {
  if (order < 1) throw ParameterError("order must be >= 1");
  if (!(discount > 0.0 && discount < 1.0))
    throw ParameterError("discount must lie in (0, 1)");
  bool any = false;
  for (const auto& t : transcripts) any = any || !t.empty();
  if (!any) throw ParameterError("empty training corpus");

  // Counts per order; context counts are derived by summing over successors.
  std::vector<std::map<std::string, long>> counts(static_cast<std::size_t>(order));
  for (const auto& t : transcripts) {
    if (t.empty()) continue;
    std::vector<std::string> padded;
    padded.push_back(kSentBegin);
    padded.insert(padded.end(), t.begin(), t.end());
    padded.push_back(kSentEnd);
    for (int k = 1; k <= order; ++k)
      for (std::size_t i = 0; i + std::size_t(k) <= padded.size(); ++i) {
        if (k == 1 && padded[i] == kSentBegin) continue;  // <s> is never predicted
        counts[std::size_t(k) - 1][lm_detail::join(padded, i, std::size_t(k))]++;
      }
  }

  NGramModel model;
  model.set_order(order);

  // Unigrams: discounted ML over predicted tokens, freed mass to <unk>.
  long total = 0;
  for (const auto& [w, c] : counts[0]) {
    (void)w;
    total += c;
  }
  const double unk_mass =
      std::max(discount * double(counts[0].size()) / double(total), 1e-7);
  std::map<std::string, double> uni_prob;
  for (const auto& [w, c] : counts[0])
    uni_prob[w] = (double(c) - discount) / double(total);
  uni_prob[kUnknown] = unk_mass;
  uni_prob[kSentBegin] = 1e-99;  // context-only token
  for (const auto& [w, p] : uni_prob)
    model.insert(1, w, {std::log10(p), 0.0, false});

  // Resolved probability of w under the model built so far, for backoff
  // normalization at the next order up.
  auto resolved = [&model](const std::vector<std::string>& ctx,
                           const std::string& w) -> double {
    NGramModel::State s;
    s.context.assign(ctx.begin(), ctx.end());
    return std::pow(10.0, model.score_word(s, w).first);
  };

  for (int k = 2; k <= order; ++k) {
    // Group k-grams by their (k-1)-length context.
    std::map<std::string, std::vector<std::pair<std::string, long>>> by_context;
    for (const auto& [gram, c] : counts[std::size_t(k) - 1]) {
      const auto pos = gram.find_last_of(' ');
      by_context[gram.substr(0, pos)].emplace_back(gram.substr(pos + 1), c);
    }
    for (const auto& [ctx_str, successors] : by_context) {
      long ctx_total = 0;
      for (const auto& [w, c] : successors) {
        (void)w;
        ctx_total += c;
      }
      std::vector<std::string> ctx_words;
      {
        std::stringstream ss(ctx_str);
        std::string tok;
        while (ss >> tok) ctx_words.push_back(tok);
      }
      std::vector<std::string> lower_ctx(ctx_words.begin() + 1, ctx_words.end());
      double seen_mass = 0.0, lower_seen_mass = 0.0;
      for (const auto& [w, c] : successors) {
        const double p = (double(c) - discount) / double(ctx_total);
        seen_mass += p;
        lower_seen_mass += resolved(lower_ctx, w);
        model.insert(k, ctx_str + " " + w, {std::log10(p), 0.0, false});
      }
      // Backoff weight on the context entry (created if the context was
      // never predicted itself, e.g. "<s>").
      double bow = 1.0;
      if (lower_seen_mass < 1.0 - 1e-12)
        bow = (1.0 - seen_mass) / (1.0 - lower_seen_mass);
      model.set_backoff(int(ctx_words.size()), ctx_str, std::log10(std::max(bow, 1e-99)));
    }
  }
  model.validate();
  return model;
}

// ---- ARPA serialization -----------------------------------------------------

inline void save_arpa(const NGramModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open ARPA file for writing: " + path);
  out << "\n\\data\\\n";
  for (int k = 1; k <= model.order(); ++k)
    out << "ngram " << k << "=" << model.entries(k).size() << "\n";
  out << "\n";
  char buf[64];
  for (int k = 1; k <= model.order(); ++k) {
    out << "\\" << k << "-grams:\n";
    for (const auto& [gram, e] : model.entries(k)) {
      std::snprintf(buf, sizeof(buf), "%.6f", e.log10_prob);
      out << buf << "\t" << gram;
      if (e.has_backoff) {
        std::snprintf(buf, sizeof(buf), "%.6f", e.log10_backoff);
        out << "\t" << buf;
      }
      out << "\n";
    }
    out << "\n";
  }
  out << "\\end\\\n";
}

inline NGramModel load_arpa(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open ARPA file: " + path);
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) -> FormatError {
    return FormatError(path + ":" + std::to_string(lineno) + ": " + msg);
  };

  // \data\ section
  std::vector<std::size_t> declared;
  bool in_data = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line == "\\data\\") {
      in_data = true;
      continue;
    }
    if (in_data) {
      if (line.empty()) break;
      if (line.rfind("ngram ", 0) != 0) throw fail("expected 'ngram k=count'");
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw fail("expected 'ngram k=count'");
      declared.push_back(std::stoul(line.substr(eq + 1)));
    }
  }
  if (!in_data || declared.empty()) throw fail("missing \\data\\ section");

  NGramModel model;
  model.set_order(int(declared.size()));
  bool saw_end = false;
  int current_order = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line == "\\end\\") {
      saw_end = true;
      break;
    }
    if (line[0] == '\\') {
      const auto dash = line.find("-grams:");
      if (dash == std::string::npos) throw fail("unexpected section header");
      current_order = std::stoi(line.substr(1, dash - 1));
      if (current_order < 1 || current_order > model.order())
        throw fail("section order out of declared range");
      continue;
    }
    if (current_order == 0) throw fail("entry before any section header");
    std::vector<std::string> fields;
    {
      std::stringstream ss(line);
      std::string tok;
      while (std::getline(ss, tok, '\t')) fields.push_back(tok);
    }
    if (fields.size() < 2 || fields.size() > 3) throw fail("expected 2 or 3 tab-separated fields");
    NGramModel::Entry e;
    try {
      e.log10_prob = std::stod(fields[0]);
      if (fields.size() == 3) {
        e.log10_backoff = std::stod(fields[2]);
        e.has_backoff = true;
      }
    } catch (const std::invalid_argument&) {
      throw fail("bad numeric field");
    }
    model.insert(current_order, fields[1], e);
  }
  if (!saw_end) throw FormatError(path + ": missing \\end\\ marker");
  model.validate();
  return model;
}

}  // namespace uda

#endif  // UDA_LM_HPP_
