#ifndef UDA_VOCAB_HPP_
#define UDA_VOCAB_HPP_

#include <algorithm>
#include <string>
#include <unordered_map>
#include <vector>

#include "uda/common.hpp"

namespace uda {

/// Grapheme vocabulary. Holds the symbol list, the blank used by CTC and the
/// word delimiter that defines word boundaries for the word-level LM and WER.
struct Vocabulary {
  std::vector<std::string> symbols;
  int blank_index = 0;
  std::string word_delimiter;

  int size() const { return int(symbols.size()); }

  int index_of(const std::string& s) const {
    auto it = std::find(symbols.begin(), symbols.end(), s);
    if (it == symbols.end())
      throw ParameterError("unknown symbol: '" + s + "'");
    return int(it - symbols.begin());
  }

  int delimiter_index() const { return index_of(word_delimiter); }

  void validate() const {
    if (symbols.empty()) throw ParameterError("vocabulary has no symbols");
    for (const auto& s : symbols)
      if (s.empty()) throw ParameterError("vocabulary contains empty symbol");
    for (std::size_t i = 0; i < symbols.size(); ++i)
      for (std::size_t j = i + 1; j < symbols.size(); ++j)
        if (symbols[i] == symbols[j])
          throw ParameterError("duplicate vocabulary symbol: '" + symbols[i] + "'");
    if (blank_index < 0 || blank_index >= size())
      throw ParameterError("blank_index out of range");
    if (word_delimiter == symbols[std::size_t(blank_index)])
      throw ParameterError("word delimiter must not be the blank symbol");
    index_of(word_delimiter);  // membership check
  }
};

/// A label sequence over non-blank vocabulary symbols. `rendered` is the
/// concatenation of symbol strings, kept consistent with `tokens`.
struct Transcript {
  std::vector<int> tokens;
  std::string rendered;

  static Transcript from_tokens(const std::vector<int>& toks, const Vocabulary& vocab) {
    Transcript t;
    t.tokens = toks;
    for (int tok : toks) {
      if (tok < 0 || tok >= vocab.size())
        throw ParameterError("transcript token out of range");
      if (tok == vocab.blank_index)
        throw ParameterError("transcript contains blank token");
      t.rendered += vocab.symbols[std::size_t(tok)];
    }
    return t;
  }

  bool operator==(const Transcript& o) const { return tokens == o.tokens; }

  /// Word sequence: token runs split at the delimiter, empty words dropped.
  std::vector<std::string> words(const Vocabulary& vocab) const {
    const int delim = vocab.delimiter_index();
    std::vector<std::string> out;
    std::string cur;
    for (int tok : tokens) {
      if (tok == delim) {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
      } else {
        cur += vocab.symbols[std::size_t(tok)];
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }
};

}  // namespace uda

#endif  // UDA_VOCAB_HPP_
