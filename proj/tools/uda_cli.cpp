// Command-line surface for the domain-adaptation toolkit. Each subcommand is
// a thin binding over one library operation; run-pipeline drives the full
// multi-stage run. Exit codes: 0 success, 2 usage error, 3 data/format
// error, 4 integrity error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "uda/config.hpp"
#include "uda/pipeline.hpp"

namespace fs = std::filesystem;
using namespace uda;

namespace {

struct UsageExit {
  std::string message;
};

Corpus read_manifest(const std::string& path) {
  if (!fs::exists(path)) throw FormatError("manifest not found: " + path);
  return load_manifest(path);
}

AcousticModel read_checkpoint(const std::string& path, const Vocabulary& vocab) {
  if (!fs::exists(path)) throw FormatError("checkpoint not found: " + path);
  return load_checkpoint(path, vocab);
}

PosteriorGrid read_grid(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("grid not found: " + path);
  return load_grid(in);
}

std::vector<std::string> split_commas(const std::string& s) {
  return config_detail::split_commas(s);
}

// ---- subcommand bodies ----------------------------------------------------

void cmd_gen_data(const std::string& spec_path, int letters, int utts, int len_min, int len_max,
                  const std::string& out) {
  auto spec = load_domain_spec(spec_path);
  auto corpus = generate_corpus(spec, letters_vocab(letters), utts, {len_min, len_max});
  save_manifest(corpus, out);
  std::cout << "wrote " << corpus.utterances.size() << " utterances to " << out << "\n";
}

TrainConfig make_train_config(int epochs, double lr, int batch, double l2, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.learning_rate = lr;
  cfg.batch_size = batch;
  cfg.l2 = l2;
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

void cmd_train_teacher(const std::string& data, int context_window, const std::string& hidden,
                       int epochs, double lr, int batch, double l2, std::uint64_t seed,
                       const std::string& out) {
  auto corpus = read_manifest(data);
  if (!corpus.labelled) throw ParameterError("train-teacher requires a labelled corpus");
  std::vector<int> hidden_dims;
  for (const auto& h : split_commas(hidden)) hidden_dims.push_back(std::stoi(h));
  std::vector<Transcript> labels;
  for (const auto& u : corpus.utterances) labels.push_back(*u.reference);
  auto init = AcousticModel::init(int(corpus.utterances[0].frames.cols()), context_window,
                                  hidden_dims, corpus.vocabulary, seed);
  auto result = train(init, corpus, labels, make_train_config(epochs, lr, batch, l2, seed));
  save_checkpoint(result.model, out);
  std::cout << "trained " << epochs << " epochs, final loss "
            << result.epoch_loss.back() << ", skipped " << result.skipped_utterances
            << ", wrote " << out << "\n";
}

void cmd_train_lm(const std::string& data, int order, double discount, const std::string& out) {
  std::vector<std::vector<std::string>> sentences;
  Vocabulary vocab;
  for (const auto& path : split_commas(data)) {
    auto corpus = read_manifest(path);
    if (!corpus.labelled) throw ParameterError("train-lm requires labelled corpora");
    vocab = corpus.vocabulary;
    for (const auto& u : corpus.utterances) sentences.push_back(u.reference->words(vocab));
  }
  auto model = train_ngram(sentences, order, discount);
  save_arpa(model, out);
  std::cout << "trained " << order << "-gram on " << sentences.size() << " sentences, wrote "
            << out << "\n";
}

void cmd_infer(const std::string& model_path, const std::string& data,
               const std::string& out_dir, int jobs) {
  auto corpus = read_manifest(data);
  auto model = read_checkpoint(model_path, corpus.vocabulary);
  fs::create_directories(out_dir);
  std::vector<PosteriorGrid> grids(corpus.utterances.size());
  pipeline_detail::parallel_for(corpus.utterances.size(), jobs, [&](std::size_t i) {
    grids[i] = forward(model, corpus.utterances[i]);
  });
  for (const auto& grid : grids) {
    const std::string path = out_dir + "/" + grid.utterance_id + ".grid";
    std::ofstream out(path + ".tmp", std::ios::binary);
    if (!out) throw FormatError("cannot write grid: " + path);
    save_grid(grid, out);
    out.close();
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
      throw FormatError("cannot finalize grid: " + path);
  }
  std::cout << "wrote " << grids.size() << " grids to " << out_dir << "\n";
}

void cmd_select(const std::string& data, const std::string& grid_dirs, const std::string& out,
                bool exclude_blank) {
  auto corpus = read_manifest(data);
  auto dirs = split_commas(grid_dirs);
  if (dirs.empty()) throw ParameterError("select needs at least one grid directory");
  std::ofstream os(out + ".tmp");
  if (!os) throw FormatError("cannot write selection: " + out);
  for (const auto& u : corpus.utterances) {
    std::vector<PosteriorGrid> grids;
    for (const auto& d : dirs) grids.push_back(read_grid(d + "/" + u.id + ".grid"));
    auto sel = select_top1(grids, corpus.vocabulary.blank_index, exclude_blank);
    os << u.id;
    for (const auto& s : sel.all_scores) os << "\t" << pipeline_detail::fmt(s.q);
    os << "\t" << sel.selected_teacher << "\n";
  }
  os.close();
  if (std::rename((out + ".tmp").c_str(), out.c_str()) != 0)
    throw FormatError("cannot finalize selection: " + out);
  std::cout << "wrote selections for " << corpus.utterances.size() << " utterances to " << out
            << "\n";
}

void cmd_decode(const std::string& data, const std::string& grid_dir, const std::string& lm_path,
                double alpha, double beta, int beam_width, double prune, const std::string& out,
                int jobs) {
  if (alpha > 0 && lm_path.empty())
    throw UsageExit{"--alpha > 0 requires --lm"};
  auto corpus = read_manifest(data);
  NGramModel lm;
  const bool have_lm = !lm_path.empty();
  if (have_lm) lm = load_arpa(lm_path);
  DecodeConfig cfg;
  cfg.beam_width = beam_width;
  cfg.alpha = alpha;
  cfg.beta = beta;
  cfg.prune_log_threshold = prune;
  cfg.validate();
  std::vector<DecodeResult> results(corpus.utterances.size());
  pipeline_detail::parallel_for(corpus.utterances.size(), jobs, [&](std::size_t i) {
    auto grid = read_grid(grid_dir + "/" + corpus.utterances[i].id + ".grid");
    results[i] = beam_search_decode(grid, have_lm ? &lm : nullptr, cfg, corpus.vocabulary);
  });
  std::ofstream os(out + ".tmp");
  if (!os) throw FormatError("cannot write transcripts: " + out);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    os << corpus.utterances[i].id << "\t";
    for (std::size_t t = 0; t < r.transcript.tokens.size(); ++t)
      os << (t ? " " : "") << r.transcript.tokens[t];
    os << "\t" << pipeline_detail::fmt(r.total_score) << "\t"
       << pipeline_detail::fmt(r.am_score) << "\t" << pipeline_detail::fmt(r.lm_log10) << "\t"
       << r.word_count << "\t0\n";
  }
  os.close();
  if (std::rename((out + ".tmp").c_str(), out.c_str()) != 0)
    throw FormatError("cannot finalize transcripts: " + out);
  std::cout << "decoded " << results.size() << " utterances to " << out << "\n";
}

std::vector<Transcript> read_labels_for(const Corpus& corpus, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("labels not found: " + path);
  std::map<std::string, Transcript> by_id;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') continue;
    std::stringstream ss(line);
    std::vector<std::string> fields;
    std::string tok;
    while (std::getline(ss, tok, '\t')) fields.push_back(tok);
    if (fields.size() < 2) throw FormatError("malformed labels record in " + path);
    std::stringstream ts(fields[1]);
    std::vector<int> tokens;
    int t;
    while (ts >> t) tokens.push_back(t);
    by_id[fields[0]] = Transcript::from_tokens(tokens, corpus.vocabulary);
  }
  std::vector<Transcript> labels;
  for (const auto& u : corpus.utterances) {
    auto it = by_id.find(u.id);
    if (it == by_id.end())
      throw IntegrityError("labels file " + path + " is missing utterance " + u.id);
    labels.push_back(it->second);
  }
  return labels;
}

void cmd_train_student(const std::string& data, const std::string& labels_path,
                       int context_window, const std::string& hidden, int epochs, double lr,
                       int batch, double l2, std::uint64_t seed, const std::string& out) {
  auto corpus = read_manifest(data);
  auto labels = read_labels_for(corpus, labels_path);
  std::vector<int> hidden_dims;
  for (const auto& h : split_commas(hidden)) hidden_dims.push_back(std::stoi(h));
  auto init = AcousticModel::init(int(corpus.utterances[0].frames.cols()), context_window,
                                  hidden_dims, corpus.vocabulary, seed);
  auto result = train(init, corpus, labels, make_train_config(epochs, lr, batch, l2, seed));
  save_checkpoint(result.model, out);
  std::cout << "trained student, final loss " << result.epoch_loss.back() << ", skipped "
            << result.skipped_utterances << ", wrote " << out << "\n";
}

void cmd_evaluate(const std::string& model_path, const std::string& data,
                  const std::string& lm_path, double alpha, double beta, int beam_width,
                  int jobs) {
  if (alpha > 0 && lm_path.empty()) throw UsageExit{"--alpha > 0 requires --lm"};
  auto corpus = read_manifest(data);
  if (!corpus.labelled) throw ParameterError("evaluate requires a labelled corpus");
  auto model = read_checkpoint(model_path, corpus.vocabulary);
  NGramModel lm;
  const bool have_lm = !lm_path.empty();
  if (have_lm) lm = load_arpa(lm_path);
  DecodeConfig cfg;
  cfg.beam_width = beam_width;
  cfg.alpha = alpha;
  cfg.beta = beta;
  cfg.validate();
  std::vector<std::pair<Transcript, Transcript>> pairs(corpus.utterances.size());
  pipeline_detail::parallel_for(corpus.utterances.size(), jobs, [&](std::size_t i) {
    auto grid = forward(model, corpus.utterances[i]);
    pairs[i] = {beam_search_decode(grid, have_lm ? &lm : nullptr, cfg, corpus.vocabulary)
                    .transcript,
                *corpus.utterances[i].reference};
  });
  auto w = corpus_wer(pairs, corpus.vocabulary);
  std::cout << "wer\t" << pipeline_detail::fmt(w.wer()) << "\nsub\t" << w.substitutions
            << "\nins\t" << w.insertions << "\ndel\t" << w.deletions << "\nref_words\t"
            << w.reference_words << "\n";
}

void cmd_run_pipeline(RunConfig rc, bool echo_only, bool baselines) {
  if (echo_only) {
    std::cout << rc.echo();
    return;
  }
  Pipeline pipeline(rc.build());
  pipeline.export_manifests();
  auto reports = pipeline.run_multistage();
  if (baselines) pipeline.train_baseline_students();
  // resolved config alongside the artifacts, for audit and re-runs
  std::ofstream cfg_out(pipeline.dir() + "/resolved.cfg");
  cfg_out << rc.echo();
  for (const auto& rep : reports)
    std::cout << "stage " << rep.stage << " (" << rep.model_name << ") test WER no-LM "
              << pipeline_detail::fmt(rep.stage == 0 ? -1.0 : rep.test_no_lm.wer())
              << " with-LM "
              << pipeline_detail::fmt(rep.stage == 0 ? -1.0 : rep.test_with_lm.wer()) << "\n";
  std::cout << "reports written to " << pipeline.dir() << "/reports.tsv\n";
}

void cmd_report(const std::string& run_dir) {
  const std::string path = run_dir + "/reports.tsv";
  std::ifstream in(path);
  if (!in) throw FormatError("no report table at " + path);
  std::cout << in.rdbuf();
  // per-stage detail
  for (int k = 0;; ++k) {
    std::ifstream stage(run_dir + "/stage" + std::to_string(k) + "/report.tsv");
    if (!stage) break;
    std::cout << "\n[stage " << k << "]\n" << stage.rdbuf();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ensemble teacher-student pseudo-labeling for CTC domain adaptation"};
  app.require_subcommand(1);

  // gen-data
  std::string spec_path, out_path, data_path, model_path, lm_path, grid_dir, labels_path;
  std::string hidden = "32";
  int letters = 5, utts = 50, len_min = 6, len_max = 12, context_window = 1;
  int epochs = 20, batch = 8, beam_width = 16, jobs = 1;
  double lr = 0.15, l2 = 0.0, alpha = 0.0, beta = 0.0, prune = -9.2, discount = 0.4;
  int order = 3;
  std::uint64_t seed = 1;
  bool exclude_blank = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus from a domain spec");
  gen->add_option("--spec", spec_path, "domain spec file")->required();
  gen->add_option("--letters", letters, "number of letter symbols");
  gen->add_option("--utts", utts, "utterance count");
  gen->add_option("--len-min", len_min, "minimum symbols per utterance");
  gen->add_option("--len-max", len_max, "maximum symbols per utterance");
  gen->add_option("--out", out_path, "output manifest path")->required();

  auto add_train_opts = [&](CLI::App* cmd) {
    cmd->add_option("--context-window", context_window, "frames of context on each side");
    cmd->add_option("--hidden", hidden, "comma-separated hidden layer widths");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_option("--batch", batch, "minibatch size");
    cmd->add_option("--l2", l2, "L2 penalty");
    cmd->add_option("--seed", seed, "random seed");
  };

  auto* tt = app.add_subcommand("train-teacher", "train a CTC model on a labelled corpus");
  tt->add_option("--data", data_path, "training manifest")->required();
  add_train_opts(tt);
  tt->add_option("--out", out_path, "output checkpoint")->required();

  auto* tl = app.add_subcommand("train-lm", "train a backoff n-gram LM on corpus transcripts");
  tl->add_option("--data", data_path, "comma-separated training manifests")->required();
  tl->add_option("--order", order, "n-gram order");
  tl->add_option("--discount", discount, "absolute discount in (0,1)");
  tl->add_option("--out", out_path, "output ARPA path")->required();

  auto* inf = app.add_subcommand("infer", "write posterior grids for every utterance");
  inf->add_option("--model", model_path, "checkpoint")->required();
  inf->add_option("--data", data_path, "manifest")->required();
  inf->add_option("--out-dir", out_path, "output grid directory")->required();
  inf->add_option("--jobs", jobs, "per-utterance concurrency");

  auto* sel = app.add_subcommand("select", "top-1 teacher selection over grid directories");
  sel->add_option("--data", data_path, "manifest")->required();
  sel->add_option("--grids", grid_dir, "comma-separated grid directories")->required();
  sel->add_flag("--exclude-blank", exclude_blank, "score without the blank symbol");
  sel->add_option("--out", out_path, "output selection table")->required();

  auto* dec = app.add_subcommand("decode", "beam-search decode grids with optional LM fusion");
  dec->add_option("--data", data_path, "manifest")->required();
  dec->add_option("--grids", grid_dir, "grid directory")->required();
  dec->add_option("--lm", lm_path, "ARPA LM for shallow fusion");
  dec->add_option("--alpha", alpha, "LM weight");
  dec->add_option("--beta", beta, "word insertion bonus");
  dec->add_option("--beam-width", beam_width, "beam width");
  dec->add_option("--prune", prune, "per-frame log-probability pruning threshold");
  dec->add_option("--jobs", jobs, "per-utterance concurrency");
  dec->add_option("--out", out_path, "output transcript table")->required();

  auto* ts = app.add_subcommand("train-student", "train a student on pseudo-labels");
  ts->add_option("--data", data_path, "target manifest")->required();
  ts->add_option("--labels", labels_path, "pseudo-label table")->required();
  add_train_opts(ts);
  ts->add_option("--out", out_path, "output checkpoint")->required();

  auto* ev = app.add_subcommand("evaluate", "decode a labelled corpus and report WER");
  ev->add_option("--model", model_path, "checkpoint")->required();
  ev->add_option("--data", data_path, "labelled manifest")->required();
  ev->add_option("--lm", lm_path, "ARPA LM");
  ev->add_option("--alpha", alpha, "LM weight");
  ev->add_option("--beta", beta, "word insertion bonus");
  ev->add_option("--beam-width", beam_width, "beam width");
  ev->add_option("--jobs", jobs, "per-utterance concurrency");

  std::string config_path, run_dir_override;
  bool echo_config = false, with_baselines = false;
  bool seed_set = false, jobs_set = false;
  auto* rp = app.add_subcommand("run-pipeline", "full multi-stage teacher-student run");
  rp->add_option("--config", config_path, "run configuration file");
  rp->add_option("--seed", seed, "random seed (overrides config)")
      ->each([&](const std::string&) { seed_set = true; });
  rp->add_option("--run-dir", run_dir_override, "run directory (overrides config)");
  rp->add_option("--jobs", jobs, "per-utterance concurrency (overrides config)")
      ->each([&](const std::string&) { jobs_set = true; });
  rp->add_flag("--echo-config", echo_config, "print the resolved config and exit");
  rp->add_flag("--baselines", with_baselines, "also train the comparison baselines");

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "render the report tables of a finished run");
  rep->add_option("run_dir", report_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      cmd_gen_data(spec_path, letters, utts, len_min, len_max, out_path);
    else if (tt->parsed())
      cmd_train_teacher(data_path, context_window, hidden, epochs, lr, batch, l2, seed,
                        out_path);
    else if (tl->parsed())
      cmd_train_lm(data_path, order, discount, out_path);
    else if (inf->parsed())
      cmd_infer(model_path, data_path, out_path, jobs);
    else if (sel->parsed())
      cmd_select(data_path, grid_dir, out_path, exclude_blank);
    else if (dec->parsed())
      cmd_decode(data_path, grid_dir, lm_path, alpha, beta, beam_width, prune, out_path, jobs);
    else if (ts->parsed())
      cmd_train_student(data_path, labels_path, context_window, hidden, epochs, lr, batch, l2,
                        seed, out_path);
    else if (ev->parsed())
      cmd_evaluate(model_path, data_path, lm_path, alpha, beta, beam_width, jobs);
    else if (rp->parsed()) {
      RunConfig rc;
      if (!config_path.empty()) rc = load_run_config(config_path);
      if (seed_set) rc.seed = seed;
      if (!run_dir_override.empty()) rc.run_dir = run_dir_override;
      if (jobs_set) rc.jobs = jobs;
      cmd_run_pipeline(rc, echo_config, with_baselines);
    } else if (rep->parsed())
      cmd_report(report_dir);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const UsageExit& e) {
    std::cerr << "error: usage: " << e.message << "\n";
    return 2;
  } catch (const ParameterError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    std::cerr << "error: integrity: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
