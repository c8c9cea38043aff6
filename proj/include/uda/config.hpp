#ifndef UDA_CONFIG_HPP_
#define UDA_CONFIG_HPP_

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uda/common.hpp"
#include "uda/pipeline.hpp"

namespace uda {

/// Flat textual run configuration. Every field has a documented default; the
/// defaults describe the flagship benchmark (three synthetic source domains,
/// one shifted target domain, three student stages). Unknown keys are
/// rejected, and `echo()` re-emits the fully resolved configuration so that
/// re-running on the echoed file is a no-op difference.
struct RunConfig {
  int letters = 9;  // symbols a.. plus blank and the word delimiter
  int feature_dim = 8;
  int n_teachers = 3;
  double domain_shift_scale = 0.35;
  double target_shift_scale = 0.45;
  double domain_scale_jitter = 0.25;
  double unigram_skew = 0.8;   // letter i carries weight skew^i; 1.0 = uniform
  double offgroup_weight = 0.2;   // source-domain weight for words outside its topic
  int lexicon_words = 12;         // size of the shared word inventory
  double noise_std = 0.45;
  double target_noise_std = 0.45;
  int frames_min = 2;
  int frames_max = 4;
  int teacher_utts = 60;
  int target_utts = 100;
  int test_utts = 100;
  int validation_utts = 12;
  int len_min = 9;
  int len_max = 18;
  int context_window = 1;
  std::vector<int> hidden{32};
  int student_context_window = 2;    // 0 = same as context_window
  std::vector<int> student_hidden;   // empty = same as hidden
  int teacher_epochs = 60;
  double teacher_lr = 0.05;
  int teacher_batch = 4;
  int student_epochs = 100;
  double student_lr = 0.05;
  int student_batch = 4;
  double l2 = 0.0;
  int lm_order = 3;
  double lm_discount = 0.4;
  int beam_width = 16;
  double prune_log_threshold = -9.2;
  std::vector<double> alpha_grid{0.0, 0.3, 0.6, 1.0, 1.5};
  std::vector<double> beta_grid{0.0, 0.5, 1.0};
  bool retune_per_stage = false;
  int max_stages = 3;
  double stop_tolerance = 0.001;
  std::uint64_t seed = 1;
  std::string run_dir = "runs/default";
  int jobs = 1;

  void set(const std::string& key, const std::string& value);
  std::string echo() const;
  PipelineConfig build() const;
};

namespace config_detail {

inline std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(tok);
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
  return out.str();
}

inline int to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ParameterError("invalid integer for key '" + key + "': " + value);
  }
}

inline double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ParameterError("invalid number for key '" + key + "': " + value);
  }
}

inline bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ParameterError("invalid boolean for key '" + key + "': " + value);
}

}  // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  using namespace config_detail;
  if (key == "letters")
    letters = to_int(key, value);
  else if (key == "feature_dim")
    feature_dim = to_int(key, value);
  else if (key == "n_teachers")
    n_teachers = to_int(key, value);
  else if (key == "domain_shift_scale")
    domain_shift_scale = to_double(key, value);
  else if (key == "target_shift_scale")
    target_shift_scale = to_double(key, value);
  else if (key == "domain_scale_jitter")
    domain_scale_jitter = to_double(key, value);
  else if (key == "unigram_skew")
    unigram_skew = to_double(key, value);
  else if (key == "offgroup_weight")
    offgroup_weight = to_double(key, value);
  else if (key == "lexicon_words")
    lexicon_words = to_int(key, value);
  else if (key == "noise_std")
    noise_std = to_double(key, value);
  else if (key == "target_noise_std")
    target_noise_std = to_double(key, value);
  else if (key == "frames_min")
    frames_min = to_int(key, value);
  else if (key == "frames_max")
    frames_max = to_int(key, value);
  else if (key == "teacher_utts")
    teacher_utts = to_int(key, value);
  else if (key == "target_utts")
    target_utts = to_int(key, value);
  else if (key == "test_utts")
    test_utts = to_int(key, value);
  else if (key == "validation_utts")
    validation_utts = to_int(key, value);
  else if (key == "len_min")
    len_min = to_int(key, value);
  else if (key == "len_max")
    len_max = to_int(key, value);
  else if (key == "context_window")
    context_window = to_int(key, value);
  else if (key == "hidden") {
    hidden.clear();
    for (const auto& part : split_commas(value)) hidden.push_back(to_int(key, part));
  } else if (key == "student_context_window")
    student_context_window = to_int(key, value);
  else if (key == "student_hidden") {
    student_hidden.clear();
    if (!value.empty())
      for (const auto& part : split_commas(value)) student_hidden.push_back(to_int(key, part));
  } else if (key == "teacher_epochs")
    teacher_epochs = to_int(key, value);
  else if (key == "teacher_lr")
    teacher_lr = to_double(key, value);
  else if (key == "teacher_batch")
    teacher_batch = to_int(key, value);
  else if (key == "student_epochs")
    student_epochs = to_int(key, value);
  else if (key == "student_lr")
    student_lr = to_double(key, value);
  else if (key == "student_batch")
    student_batch = to_int(key, value);
  else if (key == "l2")
    l2 = to_double(key, value);
  else if (key == "lm_order")
    lm_order = to_int(key, value);
  else if (key == "lm_discount")
    lm_discount = to_double(key, value);
  else if (key == "beam_width")
    beam_width = to_int(key, value);
  else if (key == "prune_log_threshold")
    prune_log_threshold = to_double(key, value);
  else if (key == "alpha_grid") {
    alpha_grid.clear();
    for (const auto& part : split_commas(value)) alpha_grid.push_back(to_double(key, part));
  } else if (key == "beta_grid") {
    beta_grid.clear();
    for (const auto& part : split_commas(value)) beta_grid.push_back(to_double(key, part));
  } else if (key == "retune_per_stage")
    retune_per_stage = to_bool(key, value);
  else if (key == "max_stages")
    max_stages = to_int(key, value);
  else if (key == "stop_tolerance")
    stop_tolerance = to_double(key, value);
  else if (key == "seed")
    seed = std::uint64_t(to_int(key, value));
  else if (key == "run_dir")
    run_dir = value;
  else if (key == "jobs")
    jobs = to_int(key, value);
  else
    throw ParameterError("unknown config key: " + key);
}

inline std::string RunConfig::echo() const {
  using config_detail::join;
  std::ostringstream out;
  out.precision(17);
  out << "letters=" << letters << "\n";
  out << "feature_dim=" << feature_dim << "\n";
  out << "n_teachers=" << n_teachers << "\n";
  out << "domain_shift_scale=" << domain_shift_scale << "\n";
  out << "target_shift_scale=" << target_shift_scale << "\n";
  out << "domain_scale_jitter=" << domain_scale_jitter << "\n";
  out << "unigram_skew=" << unigram_skew << "\n";
  out << "offgroup_weight=" << offgroup_weight << "\n";
  out << "lexicon_words=" << lexicon_words << "\n";
  out << "noise_std=" << noise_std << "\n";
  out << "target_noise_std=" << target_noise_std << "\n";
  out << "frames_min=" << frames_min << "\n";
  out << "frames_max=" << frames_max << "\n";
  out << "teacher_utts=" << teacher_utts << "\n";
  out << "target_utts=" << target_utts << "\n";
  out << "test_utts=" << test_utts << "\n";
  out << "validation_utts=" << validation_utts << "\n";
  out << "len_min=" << len_min << "\n";
  out << "len_max=" << len_max << "\n";
  out << "context_window=" << context_window << "\n";
  out << "hidden=" << join(hidden) << "\n";
  out << "student_context_window=" << student_context_window << "\n";
  out << "student_hidden=" << join(student_hidden) << "\n";
  out << "teacher_epochs=" << teacher_epochs << "\n";
  out << "teacher_lr=" << teacher_lr << "\n";
  out << "teacher_batch=" << teacher_batch << "\n";
  out << "student_epochs=" << student_epochs << "\n";
  out << "student_lr=" << student_lr << "\n";
  out << "student_batch=" << student_batch << "\n";
  out << "l2=" << l2 << "\n";
  out << "lm_order=" << lm_order << "\n";
  out << "lm_discount=" << lm_discount << "\n";
  out << "beam_width=" << beam_width << "\n";
  out << "prune_log_threshold=" << prune_log_threshold << "\n";
  out << "alpha_grid=" << join(alpha_grid) << "\n";
  out << "beta_grid=" << join(beta_grid) << "\n";
  out << "retune_per_stage=" << (retune_per_stage ? "true" : "false") << "\n";
  out << "max_stages=" << max_stages << "\n";
  out << "stop_tolerance=" << stop_tolerance << "\n";
  out << "seed=" << seed << "\n";
  out << "run_dir=" << run_dir << "\n";
  out << "jobs=" << jobs << "\n";
  return out.str();
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected key=value");
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return cfg;
}

/// Standard vocabulary layout: blank, `letters` lowercase symbols, delimiter.
inline Vocabulary letters_vocab(int letters) {
  if (letters < 1) throw ParameterError("letters must be >= 1");
  Vocabulary vocab;
  vocab.symbols.push_back("<b>");
  for (int i = 0; i < letters; ++i) vocab.symbols.push_back(std::string(1, char('a' + i)));
  vocab.symbols.push_back("_");
  vocab.blank_index = 0;
  vocab.word_delimiter = "_";
  vocab.validate();
  return vocab;
}

/// Deterministic synthetic domain layout: each source domain gets its own
/// channel shift/scale draw; the target domain uses a disjoint, larger shift.
/// Shared word inventory, a pure function of the letter count, lexicon size
/// and skew: short words over the skewed letter distribution, distinct, with
/// no within-word adjacent repeats.
inline std::vector<std::string> make_lexicon(int letters, int n_words, double skew) {
  if (n_words < 1) throw ParameterError("lexicon_words must be >= 1");
  Rng rng(mix64(0x6c657869636f6eULL));
  std::vector<double> cum;
  double total = 0, w = 1.0;
  for (int i = 0; i < letters; ++i, w *= skew) {
    total += w;
    cum.push_back(total);
  }
  std::vector<std::string> lex;
  while (int(lex.size()) < n_words) {
    const int len = int(rng.uniform_int(2, 4));
    std::string word;
    while (int(word.size()) < len) {
      const double r = rng.uniform() * total;
      std::size_t k = 0;
      while (k + 1 < cum.size() && cum[k] <= r) ++k;
      const char ch = char('a' + int(k));
      if (!word.empty() && word.back() == ch) continue;  // frame-wise models
      word.push_back(ch);                                // cannot split repeats
    }
    if (std::find(lex.begin(), lex.end(), word) == lex.end()) lex.push_back(word);
  }
  return lex;
}

/// `emphasis_group` selects the topic slice of the lexicon this domain
/// emphasizes (words j with j % n_groups == emphasis_group); -1 keeps the
/// full inventory, as the target domain mixes every source topic.
inline DomainSpec make_domain_spec(const std::string& name, std::uint64_t domain_key,
                                   const RunConfig& rc, double shift_scale, double noise,
                                   int emphasis_group = -1, int n_groups = 1) {
  DomainSpec spec;
  spec.name = name;
  spec.symbol_unigram_bias.assign(std::size_t(rc.letters) + 2, 1.0);
  // shared lexicon across all domains so an n-gram LM trained on source
  // text is predictive on the target; sources emphasize their own topic
  spec.lexicon = make_lexicon(rc.letters, rc.lexicon_words, rc.unigram_skew);
  spec.lexicon_weights.assign(spec.lexicon.size(), 1.0);
  if (emphasis_group >= 0)
    for (std::size_t j = 0; j < spec.lexicon.size(); ++j)
      if (int(j) % n_groups != emphasis_group)
        spec.lexicon_weights[j] = rc.offgroup_weight;
  spec.frames_per_symbol_min = rc.frames_min;
  spec.frames_per_symbol_max = rc.frames_max;
  Rng rng(mix64(0x646f6d61696eULL ^ domain_key));
  spec.channel_shift.resize(rc.feature_dim);
  spec.channel_scale.resize(rc.feature_dim);
  for (int f = 0; f < rc.feature_dim; ++f) {
    spec.channel_shift[f] = shift_scale * rng.gaussian();
    spec.channel_scale[f] = std::max(0.25, 1.0 + rc.domain_scale_jitter * rng.gaussian());
  }
  spec.noise_std = noise;
  spec.seed = mix64(domain_key);
  return spec;
}

inline PipelineConfig RunConfig::build() const {
  if (letters < 1) throw ParameterError("letters must be >= 1");
  if (n_teachers < 1) throw ParameterError("n_teachers must be >= 1");
  PipelineConfig pc;
  pc.vocab = letters_vocab(letters);
  for (int i = 0; i < n_teachers; ++i)
    pc.teacher_specs.push_back(make_domain_spec("src" + std::to_string(i),
                                                std::uint64_t(i) + 1, *this, domain_shift_scale,
                                                noise_std, i, n_teachers));
  pc.target_spec =
      make_domain_spec("tgt", 0x746172ULL, *this, target_shift_scale, target_noise_std);
  pc.test_spec = pc.target_spec;
  pc.test_spec.name = "tst";
  pc.test_spec.seed = mix64(0x747374ULL);
  pc.teacher_utts = teacher_utts;
  pc.target_utts = target_utts;
  pc.test_utts = test_utts;
  pc.validation_utts = validation_utts;
  pc.len_range = {len_min, len_max};
  pc.context_window = context_window;
  pc.hidden_dims = hidden;
  pc.student_context_window = student_context_window;
  pc.student_hidden_dims = student_hidden;
  pc.teacher_train.epochs = teacher_epochs;
  pc.teacher_train.learning_rate = teacher_lr;
  pc.teacher_train.batch_size = teacher_batch;
  pc.teacher_train.l2 = l2;
  pc.student_train.epochs = student_epochs;
  pc.student_train.learning_rate = student_lr;
  pc.student_train.batch_size = student_batch;
  pc.student_train.l2 = l2;
  pc.lm_order = lm_order;
  pc.lm_discount = lm_discount;
  pc.decode.beam_width = beam_width;
  pc.decode.prune_log_threshold = prune_log_threshold;
  pc.alpha_grid = alpha_grid;
  pc.beta_grid = beta_grid;
  pc.retune_per_stage = retune_per_stage;
  pc.max_stages = max_stages;
  pc.stop_tolerance = stop_tolerance;
  pc.seed = seed;
  pc.run_dir = run_dir;
  pc.jobs = jobs;
  pc.validate();
  return pc;
}

}  // namespace uda

#endif  // UDA_CONFIG_HPP_
