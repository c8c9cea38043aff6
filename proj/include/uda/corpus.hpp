#ifndef UDA_CORPUS_HPP_
#define UDA_CORPUS_HPP_

#include <cstdio>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uda/common.hpp"
#include "uda/vocab.hpp"

namespace uda {

struct Utterance {
  std::string id;
  FrameMatrix frames;  // T x F
  std::optional<Transcript> reference;
  std::string domain_tag;
};

struct Corpus {
  std::string name;
  Vocabulary vocabulary;
  std::vector<Utterance> utterances;
  bool labelled = false;

  void validate() const {
    vocabulary.validate();
    std::set<std::string> ids;
    for (const auto& u : utterances) {
      if (!ids.insert(u.id).second)
        throw ParameterError("duplicate utterance id: " + u.id);
      if (u.frames.rows() < 1)
        throw ParameterError("utterance " + u.id + " has no frames");
      if (!u.frames.allFinite())
        throw ParameterError("utterance " + u.id + " has non-finite features");
      if (labelled && !u.reference)
        throw ParameterError("labelled corpus but utterance " + u.id + " has no reference");
    }
  }
};

/// Parameters of one synthetic domain: unigram bias over symbols, duration
/// statistics, an affine channel transform and additive gaussian noise.
struct DomainSpec {
  std::string name;
  std::vector<double> symbol_unigram_bias;  // one weight per vocab symbol
  int frames_per_symbol_min = 1;
  int frames_per_symbol_max = 1;
  Vector channel_shift;  // length F
  Vector channel_scale;  // length F
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  // Optional fixed word inventory. When non-empty, utterances are sequences
  // of lexicon words (rendered through the vocabulary) sampled by weight,
  // instead of free symbol streams; this gives the language a small, LM-
  // learnable vocabulary. Empty weights mean uniform sampling.
  std::vector<std::string> lexicon;
  std::vector<double> lexicon_weights;

  void validate() const {
    if (frames_per_symbol_min < 1 || frames_per_symbol_min > frames_per_symbol_max)
      throw ParameterError("invalid frames_per_symbol range");
    if (noise_std < 0) throw ParameterError("noise_std must be >= 0");
    double total = 0;
    for (double w : symbol_unigram_bias) {
      if (w < 0) throw ParameterError("unigram bias weights must be nonnegative");
      total += w;
    }
    if (total <= 0) throw ParameterError("unigram bias weights are all zero");
    if (!lexicon_weights.empty() && lexicon_weights.size() != lexicon.size())
      throw ParameterError("lexicon_weights must match the lexicon size");
    for (double w : lexicon_weights)
      if (w < 0) throw ParameterError("lexicon weights must be nonnegative");
  }
};

/// Fixed per-symbol prototype feature vector, a pure function of
/// (symbol index, feature dim). Gaussian entries from a hashed stream.
inline Vector symbol_prototype(int symbol_index, int feature_dim) {
  Rng rng(mix64(0x70726f746fULL) ^ std::uint64_t(symbol_index));
  Vector v(feature_dim);
  for (int i = 0; i < feature_dim; ++i) v[i] = 1.5 * rng.gaussian();
  return v;
}

inline Corpus generate_corpus(const DomainSpec& spec, const Vocabulary& vocab, int n_utts,
                              std::pair<int, int> len_range) {
  spec.validate();
  vocab.validate();
  if (n_utts < 1) throw ParameterError("n_utts must be >= 1");
  if (len_range.first < 1 || len_range.first > len_range.second)
    throw ParameterError("invalid utterance length range");
  const int feature_dim = int(spec.channel_shift.size());
  if (spec.channel_scale.size() != feature_dim)
    throw ParameterError("channel_shift/channel_scale dimension mismatch");
  if (int(spec.symbol_unigram_bias.size()) != vocab.size())
    throw ParameterError("unigram bias length must equal vocabulary size");

  const int delim = vocab.delimiter_index();
  // Sampling support: all symbols except blank and delimiter.
  std::vector<int> support;
  std::vector<double> cum;
  double total = 0;
  for (int s = 0; s < vocab.size(); ++s) {
    if (s == vocab.blank_index || s == delim) continue;
    double w = spec.symbol_unigram_bias[std::size_t(s)];
    if (w <= 0) continue;
    support.push_back(s);
    total += w;
    cum.push_back(total);
  }
  if (support.empty()) throw ParameterError("no sampleable symbols with positive weight");

  Rng rng(spec.seed ^ mix64(std::uint64_t(n_utts) * 31 + std::uint64_t(len_range.first)));
  Corpus corpus;
  corpus.name = spec.name;
  corpus.vocabulary = vocab;
  corpus.labelled = true;

  // Lexicon mode: resolve each word to token indices once.
  std::vector<std::vector<int>> word_tokens;
  std::vector<double> word_cum;
  double word_total = 0;
  for (std::size_t w = 0; w < spec.lexicon.size(); ++w) {
    std::vector<int> toks;
    for (char ch : spec.lexicon[w]) toks.push_back(vocab.index_of(std::string(1, ch)));
    if (toks.empty()) throw ParameterError("empty word in lexicon");
    word_tokens.push_back(std::move(toks));
    word_total += spec.lexicon_weights.empty() ? 1.0 : spec.lexicon_weights[w];
    word_cum.push_back(word_total);
  }
  if (!spec.lexicon.empty() && word_total <= 0)
    throw ParameterError("lexicon weights are all zero");

  for (int u = 0; u < n_utts; ++u) {
    const int n_symbols = int(rng.uniform_int(len_range.first, len_range.second));
    std::vector<int> tokens;
    if (!word_tokens.empty()) {
      // append whole words until the sampled symbol budget is met
      int count = 0;
      while (count < n_symbols) {
        const double r = rng.uniform() * word_total;
        std::size_t k = 0;
        while (k + 1 < word_cum.size() && word_cum[k] <= r) ++k;
        if (!tokens.empty()) tokens.push_back(delim);
        tokens.insert(tokens.end(), word_tokens[k].begin(), word_tokens[k].end());
        count += int(word_tokens[k].size());
      }
    } else {
      int until_delim = int(rng.uniform_int(3, 8));
      for (int i = 0; i < n_symbols; ++i) {
        if (until_delim == 0 && i + 1 < n_symbols) {
          tokens.push_back(delim);
          until_delim = int(rng.uniform_int(3, 8));
        }
        // no adjacent repeats: consecutive identical symbols yield identical
        // frames, which a frame-wise model cannot separate with a blank
        int sym;
        do {
          const double r = rng.uniform() * total;
          std::size_t k = 0;
          while (k + 1 < cum.size() && cum[k] <= r) ++k;
          sym = support[k];
        } while (support.size() > 1 && !tokens.empty() && sym == tokens.back());
        tokens.push_back(sym);
        --until_delim;
      }
    }

    int total_frames = 0;
    std::vector<int> durations;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      int d = int(rng.uniform_int(spec.frames_per_symbol_min, spec.frames_per_symbol_max));
      durations.push_back(d);
      total_frames += d;
    }

    Utterance utt;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%s-%04d", "utt", u);
    utt.id = spec.name + "-" + idbuf;
    utt.domain_tag = spec.name;
    utt.reference = Transcript::from_tokens(tokens, vocab);
    utt.frames.resize(total_frames, feature_dim);
    int row = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const Vector proto = symbol_prototype(tokens[i], feature_dim);
      for (int d = 0; d < durations[i]; ++d, ++row) {
        for (int f = 0; f < feature_dim; ++f) {
          double x = proto[f] * spec.channel_scale[f] + spec.channel_shift[f];
          if (spec.noise_std > 0) x += spec.noise_std * rng.gaussian();
          utt.frames(row, f) = float(x);
        }
      }
    }
    corpus.utterances.push_back(std::move(utt));
  }
  corpus.validate();
  return corpus;
}

// ---- manifest I/O -----------------------------------------------------------
//
// <path>        line-delimited text: a JSON header line, then one JSON record
//               per utterance (id, domain_tag, offset/frame counts, reference
//               token indices or null).
// <path>.frames little-endian float32 sidecar, row-major T x F per utterance,
//               concatenated in table order.

inline void save_manifest(const Corpus& corpus, const std::string& path) {
  corpus.validate();
  const std::string frames_path = path + ".frames";
  nlohmann::json header;
  header["corpus"] = corpus.name;
  header["labelled"] = corpus.labelled;
  header["symbols"] = corpus.vocabulary.symbols;
  header["blank_index"] = corpus.vocabulary.blank_index;
  header["word_delimiter"] = corpus.vocabulary.word_delimiter;
  header["frames_file"] = frames_path.substr(frames_path.find_last_of('/') + 1);
  header["utterances"] = corpus.utterances.size();

  std::ofstream txt(path + ".tmp");
  std::ofstream bin(frames_path + ".tmp", std::ios::binary);
  if (!txt || !bin) throw FormatError("cannot open manifest for writing: " + path);
  txt << header.dump() << "\n";
  std::int64_t offset = 0;
  for (const auto& u : corpus.utterances) {
    nlohmann::json rec;
    rec["id"] = u.id;
    rec["domain_tag"] = u.domain_tag;
    rec["offset"] = offset;
    rec["frames"] = u.frames.rows();
    rec["dim"] = u.frames.cols();
    if (u.reference)
      rec["reference"] = u.reference->tokens;
    else
      rec["reference"] = nullptr;
    txt << rec.dump() << "\n";
    static_assert(sizeof(float) == 4);
    bin.write(reinterpret_cast<const char*>(u.frames.data()),
              std::streamsize(sizeof(float)) * u.frames.size());
    offset += u.frames.size();
  }
  txt.close();
  bin.close();
  if (std::rename((frames_path + ".tmp").c_str(), frames_path.c_str()) != 0 ||
      std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
    throw FormatError("cannot finalize manifest: " + path);
}

inline Corpus load_manifest(const std::string& path) {
  std::ifstream txt(path);
  if (!txt) throw FormatError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(txt, line)) throw FormatError("empty manifest: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest header in " + path + ": " + e.what());
  }

  Corpus corpus;
  try {
    corpus.name = header.at("corpus").get<std::string>();
    corpus.labelled = header.at("labelled").get<bool>();
    corpus.vocabulary.symbols = header.at("symbols").get<std::vector<std::string>>();
    corpus.vocabulary.blank_index = header.at("blank_index").get<int>();
    corpus.vocabulary.word_delimiter = header.at("word_delimiter").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest header missing field in " + path + ": " + e.what());
  }

  const std::string dir = path.find('/') == std::string::npos
                              ? std::string()
                              : path.substr(0, path.find_last_of('/') + 1);
  const std::string frames_path = dir + header.at("frames_file").get<std::string>();
  std::ifstream bin(frames_path, std::ios::binary);
  if (!bin) throw FormatError("cannot open frames sidecar: " + frames_path);

  const std::size_t n = header.at("utterances").get<std::size_t>();
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(txt, line))
      throw FormatError("manifest truncated at record " + std::to_string(i) + " in " + path);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed record " + std::to_string(i) + " in " + path + ": " + e.what());
    }
    Utterance u;
    try {
      u.id = rec.at("id").get<std::string>();
      u.domain_tag = rec.at("domain_tag").get<std::string>();
      const auto rows = rec.at("frames").get<Eigen::Index>();
      const auto cols = rec.at("dim").get<Eigen::Index>();
      u.frames.resize(rows, cols);
      bin.seekg(std::streamoff(rec.at("offset").get<std::int64_t>() * 4));
      bin.read(reinterpret_cast<char*>(u.frames.data()),
               std::streamsize(sizeof(float)) * rows * cols);
      if (!bin)
        throw FormatError("frames sidecar truncated for utterance " + u.id);
      if (!rec.at("reference").is_null())
        u.reference = Transcript::from_tokens(rec.at("reference").get<std::vector<int>>(),
                                              corpus.vocabulary);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed record " + std::to_string(i) + " in " + path + ": " + e.what());
    }
    corpus.utterances.push_back(std::move(u));
  }
  corpus.validate();
  return corpus;
}

// ---- DomainSpec I/O: flat key=value text, one field per line ---------------

inline void save_domain_spec(const DomainSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open spec file for writing: " + path);
  auto join = [](const auto& v) {
    std::ostringstream os;
    os.precision(17);
    for (Eigen::Index i = 0; i < Eigen::Index(v.size()); ++i)
      os << (i ? "," : "") << v[i];
    return os.str();
  };
  out << "name=" << spec.name << "\n";
  out << "symbol_unigram_bias=" << join(spec.symbol_unigram_bias) << "\n";
  out << "frames_per_symbol=" << spec.frames_per_symbol_min << "," << spec.frames_per_symbol_max
      << "\n";
  out << "channel_shift=" << join(spec.channel_shift) << "\n";
  out << "channel_scale=" << join(spec.channel_scale) << "\n";
  out << "noise_std=" << spec.noise_std << "\n";
  out << "seed=" << spec.seed << "\n";
  if (!spec.lexicon.empty()) {
    out << "lexicon=";
    for (std::size_t i = 0; i < spec.lexicon.size(); ++i)
      out << (i ? "," : "") << spec.lexicon[i];
    out << "\n";
    if (!spec.lexicon_weights.empty())
      out << "lexicon_weights=" << join(spec.lexicon_weights) << "\n";
  }
}

inline DomainSpec load_domain_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open spec file: " + path);
  DomainSpec spec;
  auto parse_list = [](const std::string& s) {
    std::vector<double> v;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) v.push_back(std::stod(tok));
    return v;
  };
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "name") {
        spec.name = val;
      } else if (key == "symbol_unigram_bias") {
        spec.symbol_unigram_bias = parse_list(val);
      } else if (key == "frames_per_symbol") {
        auto v = parse_list(val);
        if (v.size() != 2) throw FormatError("expected min,max");
        spec.frames_per_symbol_min = int(v[0]);
        spec.frames_per_symbol_max = int(v[1]);
      } else if (key == "channel_shift") {
        auto v = parse_list(val);
        spec.channel_shift = Eigen::Map<Vector>(v.data(), Eigen::Index(v.size()));
      } else if (key == "channel_scale") {
        auto v = parse_list(val);
        spec.channel_scale = Eigen::Map<Vector>(v.data(), Eigen::Index(v.size()));
      } else if (key == "noise_std") {
        spec.noise_std = std::stod(val);
      } else if (key == "seed") {
        spec.seed = std::stoull(val);
      } else if (key == "lexicon") {
        spec.lexicon.clear();
        std::stringstream ss(val);
        std::string word;
        while (std::getline(ss, word, ',')) spec.lexicon.push_back(word);
      } else if (key == "lexicon_weights") {
        spec.lexicon_weights = parse_list(val);
      } else {
        throw FormatError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

}  // namespace uda

#endif  // UDA_CORPUS_HPP_
