#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "test_util.hpp"
#include "uda/acoustic.hpp"
#include "uda/metrics.hpp"

using namespace uda;
using testutil::make_vocab;

namespace {

DomainSpec clean_spec(const Vocabulary& vocab, int feature_dim, std::uint64_t seed) {
  DomainSpec spec;
  spec.name = "clean";
  spec.symbol_unigram_bias.assign(std::size_t(vocab.size()), 1.0);
  spec.frames_per_symbol_min = 2;
  spec.frames_per_symbol_max = 3;
  spec.channel_shift = Vector::Zero(feature_dim);
  spec.channel_scale = Vector::Ones(feature_dim);
  spec.noise_std = 0.0;
  spec.seed = seed;
  return spec;
}

bool models_equal(const AcousticModel& a, const AcousticModel& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l)
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  return true;
}

double grad_norm(const AcousticModel& a, const AcousticModel& b) {
  double s = 0;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    s += (a.weights[l] - b.weights[l]).squaredNorm();
    s += (a.biases[l] - b.biases[l]).squaredNorm();
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("zero-weight model emits uniform rows") {
  auto vocab = make_vocab(3);
  auto model = AcousticModel::init(4, 1, {8}, vocab, 1);
  for (auto& w : model.weights) w.setZero();
  Utterance utt;
  utt.id = "u";
  utt.frames = FrameMatrix::Random(6, 4);
  auto grid = forward(model, utt);
  CHECK((grid.log_probs.array() - std::log(1.0 / vocab.size())).abs().maxCoeff() < 1e-12);
}

TEST_CASE("forward is deterministic and validates dimensions") {
  auto vocab = make_vocab(3);
  auto model = AcousticModel::init(4, 1, {8}, vocab, 5);
  Utterance utt;
  utt.id = "u";
  utt.frames = FrameMatrix::Random(6, 4);
  auto g1 = forward(model, utt);
  auto g2 = forward(model, utt);
  CHECK(g1.log_probs == g2.log_probs);
  g1.validate();

  Utterance bad;
  bad.id = "b";
  bad.frames = FrameMatrix::Random(6, 3);
  CHECK_THROWS_AS(forward(model, bad), ParameterError);
}

TEST_CASE("forward output varies continuously with a weight perturbation") {
  auto vocab = make_vocab(3);
  auto model = AcousticModel::init(4, 1, {8}, vocab, 5);
  Utterance utt;
  utt.id = "u";
  utt.frames = FrameMatrix::Random(5, 4);
  auto base = forward(model, utt);
  double prev_change = std::numeric_limits<double>::infinity();
  for (double eps : {1e-2, 1e-4, 1e-6}) {
    auto pert = model;
    pert.weights[0](0, 0) += eps;
    const double change =
        (forward(pert, utt).log_probs - base.log_probs).cwiseAbs().maxCoeff();
    CHECK(change < prev_change);
    prev_change = change;
  }
  CHECK(prev_change < 1e-4);
}

TEST_CASE("end-to-end CTC training gradient matches finite differences") {
  auto vocab = make_vocab(2);
  auto spec = clean_spec(vocab, 3, 77);
  auto corpus = generate_corpus(spec, vocab, 2, {2, 4});
  std::vector<Transcript> labels;
  for (const auto& u : corpus.utterances) labels.push_back(*u.reference);

  auto model = AcousticModel::init(3, 1, {5}, vocab, 9);
  auto mean_loss = [&](const AcousticModel& m) {
    double s = 0;
    for (std::size_t i = 0; i < corpus.utterances.size(); ++i)
      s += ctc_loss(forward(m, corpus.utterances[i]), labels[i], vocab.blank_index);
    return s / double(corpus.utterances.size());
  };

  // one analytic step with batch covering the whole corpus
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 1.0;
  cfg.batch_size = int(corpus.utterances.size());
  cfg.seed = 3;
  auto stepped = train(model, corpus, labels, cfg).model;
  // analytic gradient = (model - stepped) / lr
  const double step = 1e-5;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    for (Eigen::Index r = 0; r < model.weights[l].rows(); ++r)
      for (Eigen::Index c = 0; c < model.weights[l].cols(); c += 3) {
        auto plus = model;
        plus.weights[l](r, c) += step;
        auto minus = model;
        minus.weights[l](r, c) -= step;
        const double numeric = (mean_loss(plus) - mean_loss(minus)) / (2 * step);
        const double analytic = (model.weights[l](r, c) - stepped.weights[l](r, c));
        CHECK(analytic == doctest::Approx(numeric).epsilon(1e-3).scale(1.0));
      }
  }
}

TEST_CASE("training on the noise-free corpus reaches zero greedy WER") {
  auto vocab = make_vocab(3);
  auto spec = clean_spec(vocab, 4, 123);
  auto corpus = generate_corpus(spec, vocab, 12, {4, 8});
  std::vector<Transcript> labels;
  for (const auto& u : corpus.utterances) labels.push_back(*u.reference);

  auto model = AcousticModel::init(4, 1, {32}, vocab, 11);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 4;
  cfg.seed = 2;
  auto result = train(model, corpus, labels, cfg);
  CHECK(result.epoch_loss.back() <= result.epoch_loss.front());

  std::vector<std::pair<Transcript, Transcript>> pairs;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i)
    pairs.emplace_back(greedy_decode(forward(result.model, corpus.utterances[i]), vocab),
                       labels[i]);
  CHECK(corpus_wer(pairs, vocab).wer() == 0.0);
}

TEST_CASE("learning_rate=0 leaves the model bit-exact; same seed repeats") {
  auto vocab = make_vocab(2);
  auto spec = clean_spec(vocab, 3, 5);
  auto corpus = generate_corpus(spec, vocab, 6, {3, 6});
  std::vector<Transcript> labels;
  for (const auto& u : corpus.utterances) labels.push_back(*u.reference);
  auto model = AcousticModel::init(3, 1, {6}, vocab, 4);

  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 2;
  cfg.seed = 8;
  CHECK(models_equal(train(model, corpus, labels, cfg).model, model));

  cfg.learning_rate = 0.1;
  auto r1 = train(model, corpus, labels, cfg);
  auto r2 = train(model, corpus, labels, cfg);
  CHECK(r1.epoch_loss == r2.epoch_loss);
  CHECK(models_equal(r1.model, r2.model));
}

TEST_CASE("infeasible labels are skipped and counted, not fatal") {
  auto vocab = make_vocab(2);
  // two frames per symbol keep every natural reference feasible, even with
  // adjacent repeats (L + repeats <= 2L - 1 < T = 2L)
  auto spec = clean_spec(vocab, 3, 5);
  spec.frames_per_symbol_min = spec.frames_per_symbol_max = 2;
  auto corpus = generate_corpus(spec, vocab, 4, {2, 3});
  std::vector<Transcript> labels;
  for (const auto& u : corpus.utterances) labels.push_back(*u.reference);
  // make one label far too long for its frame count
  std::vector<int> toolong;
  for (int i = 0; i < 50; ++i) toolong.push_back(i % 2 + 1);
  labels[0] = Transcript::from_tokens(toolong, vocab);

  auto model = AcousticModel::init(3, 1, {6}, vocab, 4);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 8;
  auto result = train(model, corpus, labels, cfg);
  CHECK(result.skipped_utterances == 1);
}

TEST_CASE("KL distillation") {
  auto vocab = make_vocab(2);
  auto spec = clean_spec(vocab, 3, 5);
  auto corpus = generate_corpus(spec, vocab, 4, {3, 5});
  auto model = AcousticModel::init(3, 1, {6}, vocab, 4);

  SUBCASE("distilling a model against its own outputs is a stationary point") {
    std::vector<PosteriorGrid> grids;
    for (const auto& u : corpus.utterances) grids.push_back(forward(model, u));
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.learning_rate = 1.0;
    cfg.batch_size = 4;
    cfg.seed = 1;
    auto result = kl_distill_train(model, corpus, grids, cfg);
    CHECK(result.epoch_loss.front() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(grad_norm(result.model, model) <= 1e-8);
  }

  SUBCASE("uniform-vs-onehot per-frame KL equals log V") {
    // teacher one-hot, student uniform (zero weights)
    auto uniform_model = model;
    for (auto& w : uniform_model.weights) w.setZero();
    for (auto& b : uniform_model.biases) b.setZero();
    std::vector<PosteriorGrid> grids;
    for (const auto& u : corpus.utterances) {
      std::vector<int> path;
      for (Eigen::Index t = 0; t < u.frames.rows(); ++t) path.push_back(1);
      grids.push_back(testutil::path_grid(path, vocab.size(), 1.0 - 1e-15));
      grids.back().utterance_id = u.id;
    }
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.learning_rate = 0.0;
    cfg.seed = 1;
    auto result = kl_distill_train(uniform_model, corpus, grids, cfg);
    CHECK(result.epoch_loss.front() ==
          doctest::Approx(std::log(double(vocab.size()))).epsilon(1e-6));
  }

  SUBCASE("KL gradient matches finite differences") {
    Rng rng(7);
    std::vector<PosteriorGrid> grids;
    for (const auto& u : corpus.utterances) {
      auto g = testutil::random_grid(rng, u.frames.rows(), vocab.size(), u.id);
      grids.push_back(g);
    }
    auto kl_mean = [&](const AcousticModel& m) {
      double s = 0;
      for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
        auto sg = forward(m, corpus.utterances[i]);
        const auto& tg = grids[i];
        double loss = 0;
        for (Eigen::Index t = 0; t < sg.frames(); ++t)
          for (Eigen::Index v = 0; v < sg.vocab_size(); ++v)
            loss += std::exp(tg.log_probs(t, v)) * (tg.log_probs(t, v) - sg.log_probs(t, v));
        s += loss / double(sg.frames());
      }
      return s / double(corpus.utterances.size());
    };
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.learning_rate = 1.0;
    cfg.batch_size = int(corpus.utterances.size());
    cfg.seed = 1;
    auto stepped = kl_distill_train(model, corpus, grids, cfg).model;
    const double step = 1e-5;
    for (Eigen::Index r = 0; r < model.weights[0].rows(); r += 2)
      for (Eigen::Index c = 0; c < model.weights[0].cols(); c += 4) {
        auto plus = model;
        plus.weights[0](r, c) += step;
        auto minus = model;
        minus.weights[0](r, c) -= step;
        const double numeric = (kl_mean(plus) - kl_mean(minus)) / (2 * step);
        const double analytic = model.weights[0](r, c) - stepped.weights[0](r, c);
        CHECK(analytic == doctest::Approx(numeric).epsilon(1e-4).scale(1.0));
      }
  }

  SUBCASE("frame-count mismatch is a parameter error") {
    std::vector<PosteriorGrid> grids;
    Rng rng(3);
    for (const auto& u : corpus.utterances)
      grids.push_back(testutil::random_grid(rng, u.frames.rows() + 1, vocab.size(), u.id));
    TrainConfig cfg;
    cfg.seed = 1;
    CHECK_THROWS_AS(kl_distill_train(model, corpus, grids, cfg), ParameterError);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  namespace fs = std::filesystem;
  auto vocab = make_vocab(3);
  auto model = AcousticModel::init(4, 1, {8, 6}, vocab, 21);
  quantize_to_f32(model);
  const std::string path = "test_acoustic_ckpt.bin";
  save_checkpoint(model, path);
  auto loaded = load_checkpoint(path, vocab);
  CHECK(models_equal(model, loaded));

  // vocab mismatch is an integrity error
  auto other = make_vocab(4);
  CHECK_THROWS_AS(load_checkpoint(path, other), IntegrityError);
  fs::remove(path);
}

TEST_CASE("doubling hidden width strictly contains the smaller model family") {
  auto vocab = make_vocab(3);
  auto small = AcousticModel::init(4, 1, {6}, vocab, 33);
  auto big = AcousticModel::init(4, 1, {12}, vocab, 34);
  // embed: copy rows of W0 into the first 6 rows, zero the rest; copy the
  // first 6 columns of W1, zero the rest. tanh(0)=0 keeps the extra units
  // inert.
  big.weights[0].setZero();
  big.weights[0].topRows(6) = small.weights[0];
  big.biases[0].setZero();
  big.biases[0].head(6) = small.biases[0];
  big.weights[1].setZero();
  big.weights[1].leftCols(6) = small.weights[1];
  big.biases[1] = small.biases[1];

  Utterance utt;
  utt.id = "u";
  utt.frames = FrameMatrix::Random(7, 4);
  auto gs = forward(small, utt);
  auto gb = forward(big, utt);
  CHECK((gs.log_probs - gb.log_probs).cwiseAbs().maxCoeff() < 1e-9);
}
