#ifndef UDA_PIPELINE_HPP_
#define UDA_PIPELINE_HPP_

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "uda/acoustic.hpp"
#include "uda/common.hpp"
#include "uda/corpus.hpp"
#include "uda/ctc.hpp"
#include "uda/decoder.hpp"
#include "uda/lm.hpp"
#include "uda/metrics.hpp"
#include "uda/selection.hpp"
#include "uda/vocab.hpp"

namespace uda {

/// One pseudo-label with its decode bookkeeping. provenance is a teacher
/// index at stage 0 and the producing stage id at stage k >= 1.
struct PseudoLabel {
  std::string utterance_id;
  Transcript transcript;
  double total_score = 0.0;
  double am_score = 0.0;
  double lm_log10 = 0.0;
  int word_count = 0;
  int provenance = 0;
};

struct PseudoLabelSet {
  int stage = 0;
  std::vector<PseudoLabel> labels;  // aligned with the target corpus
  long skipped = 0;                 // decode failures carried forward
};

struct StageReport {
  int stage = 0;
  std::string model_name;
  double train_pseudo_wer_no_lm = -1;  // diagnostic; -1 when target unlabelled
  double train_pseudo_wer_with_lm = -1;
  WerBreakdown test_no_lm;
  WerBreakdown test_with_lm;
  double selection_accuracy = -1;  // stage 0 only
  long skipped_utterances = 0;
  std::vector<WerBreakdown> per_teacher_test_no_lm;    // stage 0 only
  std::vector<WerBreakdown> per_teacher_test_with_lm;  // stage 0 only
};

struct PipelineConfig {
  Vocabulary vocab;
  std::vector<DomainSpec> teacher_specs;
  DomainSpec target_spec;
  DomainSpec test_spec;
  int teacher_utts = 60;
  int target_utts = 50;
  int test_utts = 40;
  int validation_utts = 12;  // per teacher domain
  std::pair<int, int> len_range{6, 12};

  int context_window = 1;
  std::vector<int> hidden_dims{32};
  // Students may use a larger architecture than the teachers; 0 / empty
  // means "same as the teachers".
  int student_context_window = 0;
  std::vector<int> student_hidden_dims;
  TrainConfig teacher_train;
  TrainConfig student_train;

  int student_context() const {
    return student_context_window > 0 ? student_context_window : context_window;
  }
  const std::vector<int>& student_hidden() const {
    return student_hidden_dims.empty() ? hidden_dims : student_hidden_dims;
  }

  int lm_order = 3;
  double lm_discount = 0.4;

  DecodeConfig decode;  // beam width and pruning; alpha/beta come from tuning
  std::vector<double> alpha_grid{0.0, 0.3, 0.6, 1.0};
  std::vector<double> beta_grid{0.0, 0.5, 1.0};
  bool retune_per_stage = false;

  int max_stages = 3;
  double stop_tolerance = 0.001;  // absolute with-LM test WER improvement
  std::uint64_t seed = 0;
  std::string run_dir = "runs/default";
  int jobs = 1;

  void validate() const {
    vocab.validate();
    if (teacher_specs.empty()) throw ParameterError("need at least one teacher spec");
    for (const auto& s : teacher_specs) s.validate();
    target_spec.validate();
    test_spec.validate();
    if (max_stages < 1) throw ParameterError("max_stages must be >= 1");
    if (stop_tolerance < 0) throw ParameterError("stop_tolerance must be >= 0");
    teacher_train.validate();
    student_train.validate();
    decode.validate();
    if (jobs < 1) throw ParameterError("jobs must be >= 1");
  }
};

namespace pipeline_detail {

inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  std::size_t per = (n + std::size_t(jobs) - 1) / std::size_t(jobs);
  for (int j = 0; j < jobs; ++j) {
    const std::size_t lo = std::size_t(j) * per;
    const std::size_t hi = std::min(n, lo + per);
    if (lo >= hi) break;
    workers.emplace_back([&fn, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& w : workers) w.join();
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return std::string(buf);
}

}  // namespace pipeline_detail

/// Orchestrates the full method over one run directory. Every stage artifact
/// is persisted via write-temp-then-rename; re-running with an identical
/// config loads completed artifacts instead of recomputing. Models pass
/// through float32 checkpoints before use, so resumed and uninterrupted runs
/// produce byte-identical reports.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config) : config_(std::move(config)) {
    config_.validate();
    build_corpora();
  }

  const PipelineConfig& config() const { return config_; }
  const Corpus& target_corpus() const { return target_; }
  const Corpus& test_corpus() const { return test_; }
  const std::vector<Corpus>& teacher_corpora() const { return teachers_data_; }

  // ---- corpora (pure functions of the config, regenerated every run) ----

  void build_corpora() {
    for (std::size_t i = 0; i < config_.teacher_specs.size(); ++i) {
      DomainSpec spec = config_.teacher_specs[i];
      spec.seed = mix64(spec.seed ^ config_.seed);
      teachers_data_.push_back(
          generate_corpus(spec, config_.vocab, config_.teacher_utts, config_.len_range));
      DomainSpec val = config_.teacher_specs[i];
      val.seed = mix64(spec.seed ^ 0x76616cULL);
      validation_data_.push_back(
          generate_corpus(val, config_.vocab, config_.validation_utts, config_.len_range));
    }
    DomainSpec tgt = config_.target_spec;
    tgt.seed = mix64(tgt.seed ^ config_.seed ^ 0x746172676574ULL);
    target_ = generate_corpus(tgt, config_.vocab, config_.target_utts, config_.len_range);
    DomainSpec tst = config_.test_spec;
    tst.seed = mix64(tst.seed ^ config_.seed ^ 0x74657374ULL);
    test_ = generate_corpus(tst, config_.vocab, config_.test_utts, config_.len_range);
  }

  void export_manifests() const {
    namespace fs = std::filesystem;
    fs::create_directories(dir() + "/data");
    for (std::size_t i = 0; i < teachers_data_.size(); ++i)
      save_manifest(teachers_data_[i], dir() + "/data/teacher" + std::to_string(i) + ".manifest");
    save_manifest(target_, dir() + "/data/target.manifest");
    save_manifest(test_, dir() + "/data/test.manifest");
  }

  // ---- teachers, LM, tuned decode config --------------------------------

  std::vector<AcousticModel> train_teachers() {
    namespace fs = std::filesystem;
    fs::create_directories(dir() + "/stage0");
    std::vector<AcousticModel> models;
    for (std::size_t i = 0; i < teachers_data_.size(); ++i) {
      const std::string path = dir() + "/stage0/teacher" + std::to_string(i) + ".ckpt";
      models.push_back(load_or_train(path, teachers_data_[i], labels_of(teachers_data_[i]),
                                     config_.teacher_train,
                                     mix64(config_.seed ^ (0x7465616368ULL + i))));
    }
    return models;
  }

  NGramModel train_lm() {
    const std::string path = dir() + "/lm.arpa";
    if (std::filesystem::exists(path)) {
      try {
        return load_arpa(path);
      } catch (const FormatError& e) {
        throw IntegrityError(std::string("corrupted LM artifact ") + path + ": " + e.what());
      }
    }
    std::vector<std::vector<std::string>> sentences;
    for (const auto& corpus : teachers_data_)
      for (const auto& u : corpus.utterances)
        sentences.push_back(u.reference->words(config_.vocab));
    auto model = train_ngram(sentences, config_.lm_order, config_.lm_discount);
    const std::string tmp = path + ".tmp";
    save_arpa(model, tmp);
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw FormatError("cannot finalize LM artifact: " + path);
    return model;
  }

  DecodeConfig tuned_decode_config(const std::vector<AcousticModel>& teachers,
                                   const NGramModel& lm) {
    const std::string path = dir() + "/decode.cfg";
    if (std::filesystem::exists(path)) return load_decode_config(path);
    // All teacher/source-domain pairs, matched and mismatched. Tuning only on
    // matched in-domain validation drives alpha to zero, but the tuned config
    // is used under domain mismatch; the mismatched pairs keep the language
    // model engaged while the matched ones keep it from dominating.
    std::vector<PosteriorGrid> grids;
    std::vector<Transcript> refs;
    for (std::size_t i = 0; i < teachers.size(); ++i)
      for (std::size_t j = 0; j < validation_data_.size(); ++j)
        for (const auto& u : validation_data_[j].utterances) {
          grids.push_back(forward(teachers[i], u));
          refs.push_back(*u.reference);
        }
    auto cfg = tune_hyperparams(grids, refs, lm, config_.alpha_grid, config_.beta_grid,
                                config_.decode.beam_width, config_.vocab);
    cfg.prune_log_threshold = config_.decode.prune_log_threshold;
    save_decode_config(cfg, path);
    return cfg;
  }

  // ---- pseudo-label generation ------------------------------------------

  /// Stage 0 (multiple models): per utterance, forward all teachers, Top-1
  /// select, beam-decode the selected grid. Stage >= 1 (single model):
  /// forward + decode directly. Decode failures carry the previous stage's
  /// label forward and are counted.
  PseudoLabelSet generate_stage_labels(const std::vector<AcousticModel>& models,
                                       const NGramModel* lm, const DecodeConfig& decode_cfg,
                                       int stage, const PseudoLabelSet* previous,
                                       std::vector<SelectionResult>* audit = nullptr) {
    if (models.empty()) throw ParameterError("generate_stage_labels needs at least one model");
    PseudoLabelSet set;
    set.stage = stage;
    set.labels.resize(target_.utterances.size());
    std::vector<SelectionResult> selections(target_.utterances.size());
    std::vector<char> failed(target_.utterances.size(), 0);

    pipeline_detail::parallel_for(
        target_.utterances.size(), config_.jobs, [&](std::size_t i) {
          const Utterance& utt = target_.utterances[i];
          PseudoLabel label;
          label.utterance_id = utt.id;
          try {
            PosteriorGrid selected;
            if (models.size() > 1) {
              std::vector<PosteriorGrid> grids;
              for (const auto& m : models) grids.push_back(forward(m, utt));
              auto sel = select_top1(grids);
              selected = std::move(grids[std::size_t(sel.selected_teacher)]);
              label.provenance = sel.selected_teacher;
              selections[i] = std::move(sel);
            } else {
              selected = forward(models[0], utt);
              label.provenance = stage;
            }
            auto result = beam_search_decode(selected, lm, decode_cfg, config_.vocab);
            label.transcript = std::move(result.transcript);
            label.total_score = result.total_score;
            label.am_score = result.am_score;
            label.lm_log10 = result.lm_log10;
            label.word_count = result.word_count;
          } catch (const Error&) {
            failed[i] = 1;
          }
          set.labels[i] = std::move(label);
        });

    for (std::size_t i = 0; i < failed.size(); ++i) {
      if (!failed[i]) continue;
      ++set.skipped;
      if (previous != nullptr) set.labels[i] = previous->labels[i];
      set.labels[i].utterance_id = target_.utterances[i].id;
    }
    if (audit != nullptr && models.size() > 1) *audit = std::move(selections);
    return set;
  }

  // ---- evaluation -------------------------------------------------------

  std::pair<WerBreakdown, WerBreakdown> evaluate(const AcousticModel& model,
                                                 const NGramModel& lm,
                                                 const DecodeConfig& with_lm_cfg) {
    DecodeConfig no_lm_cfg = with_lm_cfg;
    no_lm_cfg.alpha = 0.0;
    no_lm_cfg.beta = 0.0;
    std::vector<std::pair<Transcript, Transcript>> no_lm(test_.utterances.size());
    std::vector<std::pair<Transcript, Transcript>> with_lm(test_.utterances.size());
    pipeline_detail::parallel_for(test_.utterances.size(), config_.jobs, [&](std::size_t i) {
      const Utterance& utt = test_.utterances[i];
      auto grid = forward(model, utt);
      no_lm[i] = {beam_search_decode(grid, nullptr, no_lm_cfg, config_.vocab).transcript,
                  *utt.reference};
      with_lm[i] = {beam_search_decode(grid, &lm, with_lm_cfg, config_.vocab).transcript,
                    *utt.reference};
    });
    return {corpus_wer(no_lm, config_.vocab), corpus_wer(with_lm, config_.vocab)};
  }

  /// Diagnostic pseudo-label WER against the (held) target references.
  double pseudo_label_wer(const PseudoLabelSet& set) const {
    if (!target_.labelled) return -1;
    std::vector<std::pair<Transcript, Transcript>> pairs;
    for (std::size_t i = 0; i < set.labels.size(); ++i)
      pairs.emplace_back(set.labels[i].transcript, *target_.utterances[i].reference);
    return corpus_wer(pairs, config_.vocab).wer();
  }

  // ---- full multi-stage run ---------------------------------------------

  std::vector<StageReport> run_multistage() {
    namespace fs = std::filesystem;
    fs::create_directories(dir());
    auto teachers = train_teachers();
    auto lm = train_lm();
    auto decode_cfg = tuned_decode_config(teachers, lm);
    DecodeConfig no_lm_cfg = decode_cfg;
    no_lm_cfg.alpha = 0.0;
    no_lm_cfg.beta = 0.0;

    std::vector<StageReport> reports;

    // Stage 0: ensemble teachers produce the first pseudo-labels.
    StageReport stage0;
    stage0.stage = 0;
    stage0.model_name = "teachers";
    for (const auto& t : teachers) {
      auto [no, with] = evaluate(t, lm, decode_cfg);
      stage0.per_teacher_test_no_lm.push_back(no);
      stage0.per_teacher_test_with_lm.push_back(with);
    }
    PseudoLabelSet labels = load_or_generate_labels(0, teachers, &lm, decode_cfg, nullptr,
                                                    &stage0.selection_accuracy);
    stage0.skipped_utterances = labels.skipped;
    stage0.train_pseudo_wer_with_lm = pseudo_label_wer(labels);
    {
      auto no_lm_labels =
          generate_stage_labels(teachers, nullptr, no_lm_cfg, 0, nullptr, nullptr);
      stage0.train_pseudo_wer_no_lm = pseudo_label_wer(no_lm_labels);
    }
    write_stage_report(stage0, stage_dir(0) + "/report.tsv");
    reports.push_back(stage0);

    // Stages 1..M: each student trains fresh from a seeded initialization on
    // the previous stage's pseudo-labels.
    double prev_wer = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= config_.max_stages; ++k) {
      fs::create_directories(stage_dir(k));
      std::vector<Transcript> hard;
      for (const auto& l : labels.labels) hard.push_back(l.transcript);
      // Every stage starts from the same seeded initialization so that
      // stage-to-stage differences reflect the pseudo-label refresh rather
      // than initialization luck.
      AcousticModel student =
          load_or_train(stage_dir(k) + "/student.ckpt", target_, hard, config_.student_train,
                        mix64(config_.seed ^ 0x73747564ULL), nullptr,
                        /*student_arch=*/true);

      StageReport rep;
      rep.stage = k;
      rep.model_name = "S" + std::to_string(k);
      auto [no, with] = evaluate(student, lm, decode_cfg);
      rep.test_no_lm = no;
      rep.test_with_lm = with;

      // Refresh pseudo-labels with the student as the new teacher.
      PseudoLabelSet next =
          load_or_generate_labels(k, {student}, &lm, decode_cfg, &labels, nullptr);
      rep.skipped_utterances = next.skipped;
      rep.train_pseudo_wer_with_lm = pseudo_label_wer(next);
      {
        auto no_lm_labels =
            generate_stage_labels({student}, nullptr, no_lm_cfg, k, &labels, nullptr);
        rep.train_pseudo_wer_no_lm = pseudo_label_wer(no_lm_labels);
      }
      write_stage_report(rep, stage_dir(k) + "/report.tsv");
      reports.push_back(rep);
      labels = std::move(next);

      const double wer_k = rep.test_with_lm.wer();
      if (wer_k > prev_wer - config_.stop_tolerance) break;
      prev_wer = wer_k;
    }
    write_report_table(reports, dir() + "/reports.tsv");
    return reports;
  }

  /// Comparison baselines: S_KL (KL distillation on the Top-1 selected soft
  /// posteriors) and S_Or (hard labels decoded from oracle-selected grids).
  std::pair<StageReport, StageReport> train_baseline_students() {
    namespace fs = std::filesystem;
    if (!target_.labelled)
      throw ParameterError("oracle baseline requires a labelled target corpus");
    fs::create_directories(dir() + "/baselines");
    auto teachers = train_teachers();
    auto lm = train_lm();
    auto decode_cfg = tuned_decode_config(teachers, lm);

    // Teacher grids and selections, shared by both baselines.
    std::vector<std::vector<PosteriorGrid>> all_grids(target_.utterances.size());
    pipeline_detail::parallel_for(target_.utterances.size(), config_.jobs, [&](std::size_t i) {
      for (const auto& t : teachers)
        all_grids[i].push_back(forward(t, target_.utterances[i]));
    });

    // S_KL: soft grids of the Top-1 teacher per utterance.
    std::vector<PosteriorGrid> soft;
    for (std::size_t i = 0; i < all_grids.size(); ++i) {
      auto sel = select_top1(all_grids[i]);
      soft.push_back(all_grids[i][std::size_t(sel.selected_teacher)]);
    }
    const std::string skl_path = dir() + "/baselines/skl.ckpt";
    AcousticModel skl;
    if (fs::exists(skl_path)) {
      skl = checked_load(skl_path);
    } else {
      auto init = AcousticModel::init(feature_dim(), config_.student_context(),
                                      config_.student_hidden(), config_.vocab,
                                      mix64(config_.seed ^ 0x6b6cULL));
      skl = kl_distill_train(init, target_, soft, config_.student_train).model;
      save_checkpoint(skl, skl_path);
      skl = checked_load(skl_path);
    }
    StageReport skl_rep;
    skl_rep.stage = 1;
    skl_rep.model_name = "S_KL";
    std::tie(skl_rep.test_no_lm, skl_rep.test_with_lm) = evaluate(skl, lm, decode_cfg);
    write_stage_report(skl_rep, dir() + "/baselines/skl_report.tsv");

    // S_Or: decode the oracle-selected grid per utterance.
    auto decode_fn = [&](const PosteriorGrid& g) {
      return beam_search_decode(g, &lm, decode_cfg, config_.vocab).transcript;
    };
    std::vector<Transcript> oracle_labels;
    for (std::size_t i = 0; i < all_grids.size(); ++i) {
      auto sel = oracle_select(all_grids[i], *target_.utterances[i].reference, config_.vocab,
                               decode_fn);
      oracle_labels.push_back(decode_fn(all_grids[i][std::size_t(sel.selected_teacher)]));
    }
    AcousticModel sor = load_or_train(dir() + "/baselines/sor.ckpt", target_, oracle_labels,
                                      config_.student_train, mix64(config_.seed ^ 0x6f72ULL),
                                      nullptr, /*student_arch=*/true);
    StageReport sor_rep;
    sor_rep.stage = 1;
    sor_rep.model_name = "S_Or";
    std::tie(sor_rep.test_no_lm, sor_rep.test_with_lm) = evaluate(sor, lm, decode_cfg);
    {
      std::vector<std::pair<Transcript, Transcript>> pairs;
      for (std::size_t i = 0; i < oracle_labels.size(); ++i)
        pairs.emplace_back(oracle_labels[i], *target_.utterances[i].reference);
      sor_rep.train_pseudo_wer_with_lm = corpus_wer(pairs, config_.vocab).wer();
    }
    write_stage_report(sor_rep, dir() + "/baselines/sor_report.tsv");
    return {skl_rep, sor_rep};
  }

  // ---- persistence helpers ----------------------------------------------

  std::string dir() const { return config_.run_dir; }
  std::string stage_dir(int k) const { return dir() + "/stage" + std::to_string(k); }

  int feature_dim() const { return int(config_.target_spec.channel_shift.size()); }

  static void save_decode_config(const DecodeConfig& cfg, const std::string& path) {
    std::ofstream out(path + ".tmp");
    if (!out) throw FormatError("cannot write decode config: " + path);
    out.precision(17);
    out << "beam_width=" << cfg.beam_width << "\n";
    out << "alpha=" << cfg.alpha << "\n";
    out << "beta=" << cfg.beta << "\n";
    out << "prune_log_threshold=" << cfg.prune_log_threshold << "\n";
    out.close();
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
      throw FormatError("cannot finalize decode config: " + path);
  }

  static DecodeConfig load_decode_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open decode config: " + path);
    DecodeConfig cfg;
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw IntegrityError("corrupted decode config: " + path);
      const std::string key = line.substr(0, eq);
      const std::string val = line.substr(eq + 1);
      try {
        if (key == "beam_width")
          cfg.beam_width = std::stoi(val);
        else if (key == "alpha")
          cfg.alpha = std::stod(val);
        else if (key == "beta")
          cfg.beta = std::stod(val);
        else if (key == "prune_log_threshold")
          cfg.prune_log_threshold = std::stod(val);
        else
          throw IntegrityError("corrupted decode config: " + path);
      } catch (const std::invalid_argument&) {
        throw IntegrityError("corrupted decode config: " + path);
      }
    }
    cfg.validate();
    return cfg;
  }

  void save_labels(const PseudoLabelSet& set, const std::string& path) const {
    std::ofstream out(path + ".tmp");
    if (!out) throw FormatError("cannot write labels: " + path);
    out << "# stage " << set.stage << " skipped " << set.skipped << "\n";
    for (const auto& l : set.labels) {
      out << l.utterance_id << "\t";
      for (std::size_t i = 0; i < l.transcript.tokens.size(); ++i)
        out << (i ? " " : "") << l.transcript.tokens[i];
      out << "\t" << pipeline_detail::fmt(l.total_score) << "\t"
          << pipeline_detail::fmt(l.am_score) << "\t" << pipeline_detail::fmt(l.lm_log10)
          << "\t" << l.word_count << "\t" << l.provenance << "\n";
    }
    out.close();
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
      throw FormatError("cannot finalize labels: " + path);
  }

  PseudoLabelSet load_labels(const std::string& path) const {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open labels: " + path);
    PseudoLabelSet set;
    std::string line;
    if (!std::getline(in, line) ||
        std::sscanf(line.c_str(), "# stage %d skipped %ld", &set.stage, &set.skipped) != 2)
      throw IntegrityError("corrupted labels header: " + path);
    std::size_t idx = 0;
    while (std::getline(in, line)) {
      std::vector<std::string> fields;
      std::stringstream ss(line);
      std::string tok;
      while (std::getline(ss, tok, '\t')) fields.push_back(tok);
      if (fields.size() != 7) throw IntegrityError("corrupted labels record in " + path);
      if (idx >= target_.utterances.size() || fields[0] != target_.utterances[idx].id)
        throw IntegrityError("labels file does not match target corpus: " + path);
      PseudoLabel l;
      l.utterance_id = fields[0];
      std::stringstream ts(fields[1]);
      std::vector<int> tokens;
      int t;
      while (ts >> t) tokens.push_back(t);
      try {
        l.transcript = Transcript::from_tokens(tokens, config_.vocab);
        l.total_score = std::stod(fields[2]);
        l.am_score = std::stod(fields[3]);
        l.lm_log10 = std::stod(fields[4]);
        l.word_count = std::stoi(fields[5]);
        l.provenance = std::stoi(fields[6]);
      } catch (const std::exception&) {
        throw IntegrityError("corrupted labels record in " + path);
      }
      set.labels.push_back(std::move(l));
      ++idx;
    }
    if (idx != target_.utterances.size())
      throw IntegrityError("labels file does not cover the target corpus: " + path);
    return set;
  }

  static void write_stage_report(const StageReport& rep, const std::string& path) {
    using pipeline_detail::fmt;
    std::ofstream out(path + ".tmp");
    if (!out) throw FormatError("cannot write report: " + path);
    out << "stage\t" << rep.stage << "\n";
    out << "model\t" << rep.model_name << "\n";
    out << "train_pseudo_wer_no_lm\t" << fmt(rep.train_pseudo_wer_no_lm) << "\n";
    out << "train_pseudo_wer_with_lm\t" << fmt(rep.train_pseudo_wer_with_lm) << "\n";
    out << "test_wer_no_lm\t" << fmt(rep.test_no_lm.wer()) << "\n";
    out << "test_wer_with_lm\t" << fmt(rep.test_with_lm.wer()) << "\n";
    out << "selection_accuracy\t" << fmt(rep.selection_accuracy) << "\n";
    out << "skipped_utterances\t" << rep.skipped_utterances << "\n";
    for (std::size_t i = 0; i < rep.per_teacher_test_no_lm.size(); ++i)
      out << "teacher" << i << "_test_wer_no_lm\t" << fmt(rep.per_teacher_test_no_lm[i].wer())
          << "\n"
          << "teacher" << i << "_test_wer_with_lm\t"
          << fmt(rep.per_teacher_test_with_lm[i].wer()) << "\n";
    out.close();
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
      throw FormatError("cannot finalize report: " + path);
  }

  /// Aggregate delimited table, one row per (model, test set, LM condition).
  static void write_report_table(const std::vector<StageReport>& reports,
                                 const std::string& path) {
    using pipeline_detail::fmt;
    std::ofstream out(path + ".tmp");
    if (!out) throw FormatError("cannot write report table: " + path);
    out << "model\ttest_set\tlm\twer\tsub\tins\tdel\n";
    auto row = [&](const std::string& model, const std::string& cond, const WerBreakdown& w) {
      out << model << "\ttest\t" << cond << "\t" << fmt(w.wer()) << "\t" << w.substitutions
          << "\t" << w.insertions << "\t" << w.deletions << "\n";
    };
    for (const auto& rep : reports) {
      if (rep.stage == 0) {
        for (std::size_t i = 0; i < rep.per_teacher_test_no_lm.size(); ++i) {
          row("teacher" + std::to_string(i), "no_lm", rep.per_teacher_test_no_lm[i]);
          row("teacher" + std::to_string(i), "with_lm", rep.per_teacher_test_with_lm[i]);
        }
      } else {
        row(rep.model_name, "no_lm", rep.test_no_lm);
        row(rep.model_name, "with_lm", rep.test_with_lm);
      }
    }
    out.close();
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
      throw FormatError("cannot finalize report table: " + path);
  }

 private:
  AcousticModel checked_load(const std::string& path) const {
    try {
      return load_checkpoint(path, config_.vocab);
    } catch (const FormatError& e) {
      throw IntegrityError(std::string("corrupted checkpoint ") + path + ": " + e.what());
    }
  }

  AcousticModel load_or_train(const std::string& path, const Corpus& corpus,
                              const std::vector<Transcript>& labels, const TrainConfig& base_cfg,
                              std::uint64_t model_seed,
                              const AcousticModel* warm_start = nullptr,
                              bool student_arch = false) {
    if (std::filesystem::exists(path)) return checked_load(path);
    const int context = student_arch ? config_.student_context() : config_.context_window;
    const auto& hidden = student_arch ? config_.student_hidden() : config_.hidden_dims;
    auto init = warm_start != nullptr
                    ? *warm_start
                    : AcousticModel::init(feature_dim(), context, hidden, config_.vocab,
                                          model_seed);
    TrainConfig cfg = base_cfg;
    cfg.seed = mix64(base_cfg.seed ^ model_seed);
    auto result = train(init, corpus, labels, cfg);
    save_checkpoint(result.model, path);
    // reload so in-memory parameters equal the float32 artifact
    return checked_load(path);
  }

  PseudoLabelSet load_or_generate_labels(int stage, const std::vector<AcousticModel>& models,
                                         const NGramModel* lm, const DecodeConfig& cfg,
                                         const PseudoLabelSet* previous,
                                         double* selection_accuracy) {
    namespace fs = std::filesystem;
    fs::create_directories(stage_dir(stage));
    const std::string path = stage_dir(stage) + "/labels.tsv";
    const std::string audit_path = stage_dir(stage) + "/audit.tsv";
    if (fs::exists(path)) {
      auto set = load_labels(path);
      if (selection_accuracy != nullptr && fs::exists(audit_path))
        *selection_accuracy = load_selection_accuracy(audit_path);
      return set;
    }
    std::vector<SelectionResult> audit;
    auto set = generate_stage_labels(models, lm, cfg, stage, previous,
                                     models.size() > 1 ? &audit : nullptr);
    save_labels(set, path);
    if (models.size() > 1) {
      const double acc = write_selection_audit(audit, models, lm, cfg, audit_path);
      if (selection_accuracy != nullptr) *selection_accuracy = acc;
    }
    return set;
  }

  /// Audit rows: id, per-teacher q, selected index, oracle index (or -1).
  /// Returns the Top-1 vs oracle agreement rate (-1 when unlabelled).
  double write_selection_audit(const std::vector<SelectionResult>& selections,
                               const std::vector<AcousticModel>& models, const NGramModel* lm,
                               const DecodeConfig& cfg, const std::string& path) {
    std::ofstream out(path + ".tmp");
    if (!out) throw FormatError("cannot write audit: " + path);
    long agree = 0, counted = 0;
    for (std::size_t i = 0; i < selections.size(); ++i) {
      const auto& sel = selections[i];
      out << sel.utterance_id;
      for (const auto& s : sel.all_scores) out << "\t" << pipeline_detail::fmt(s.q);
      out << "\t" << sel.selected_teacher;
      int oracle = -1;
      if (target_.labelled && !sel.all_scores.empty()) {
        std::vector<PosteriorGrid> grids;
        for (const auto& m : models) grids.push_back(forward(m, target_.utterances[i]));
        oracle = oracle_select(grids, *target_.utterances[i].reference, config_.vocab,
                               [&](const PosteriorGrid& g) {
                                 return beam_search_decode(g, lm, cfg, config_.vocab).transcript;
                               })
                     .selected_teacher;
        ++counted;
        if (oracle == sel.selected_teacher) ++agree;
      }
      out << "\t" << oracle << "\n";
    }
    out.close();
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
      throw FormatError("cannot finalize audit: " + path);
    const double acc = counted > 0 ? double(agree) / double(counted) : -1;
    // stash alongside for resumed runs
    std::ofstream acc_out(path + ".acc.tmp");
    acc_out << pipeline_detail::fmt(acc) << "\n";
    acc_out.close();
    std::rename((path + ".acc.tmp").c_str(), (path + ".acc").c_str());
    return acc;
  }

  double load_selection_accuracy(const std::string& audit_path) const {
    std::ifstream in(audit_path + ".acc");
    double acc = -1;
    if (in) in >> acc;
    return acc;
  }

  std::vector<Transcript> labels_of(const Corpus& corpus) const {
    std::vector<Transcript> out;
    for (const auto& u : corpus.utterances) out.push_back(*u.reference);
    return out;
  }

  PipelineConfig config_;
  std::vector<Corpus> teachers_data_;
  std::vector<Corpus> validation_data_;
  Corpus target_;
  Corpus test_;
};

}  // namespace uda

#endif  // UDA_PIPELINE_HPP_
