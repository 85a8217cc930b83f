#include "cli_app.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <regex>
#include <set>

using namespace sfx;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  const auto b = test_util::read_raw(p);
  return {b.begin(), b.end()};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string l;
  while (std::getline(is, l)) out.push_back(l);
  return out;
}

std::vector<std::string> cells(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string c;
  while (std::getline(ss, c, ',')) out.push_back(c);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// metric -> value from a report CSV.
std::map<std::string, std::string> report(const fs::path& p) {
  std::map<std::string, std::string> m;
  const auto ls = lines(slurp(p));
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto c = cells(ls[i]);
    m[c.at(0)] = c.at(1);
  }
  return m;
}

// Every regular file under two directories, compared byte for byte.
void expect_same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(a)) names.push_back(e.path().filename());
  std::size_t nb = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(b)) ++nb;
  ASSERT_EQ(names.size(), nb);
  ASSERT_FALSE(names.empty());
  for (const auto& n : names) EXPECT_EQ(slurp(a / n), slurp(b / n)) << n;
}

AudioBuffer wapy_clip() { return wapy_synthesize(0, 1.0, 48000); }

// A small teacher shared by the distill and sample tests.
class CliModels : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = test_util::temp_dir("cli_models");
    ASSERT_EQ(run({"train-fm", "--steps", "300", "--batch-size", "64", "--out-dir", (dir_ / "teacher").string()}).code, 0);
    ASSERT_EQ(run({"distill", "--teacher", teacher().string(), "--steps", "40", "--batch-size", "32", "--warmup-steps",
                   "20", "--embed-match-steps", "50", "--eval-samples", "0", "--out-dir", (dir_ / "student").string()})
                  .code,
              0);
  }
  static fs::path teacher() { return dir_ / "teacher" / "model.ckpt"; }
  static fs::path student() { return dir_ / "student" / "student.ckpt"; }
  static fs::path dir_;
};
fs::path CliModels::dir_;

}  // namespace

TEST(CliUsage, HelpListsEveryFlagWithItsDefault) {
  const std::map<std::string, std::vector<std::string>> expected = {
      {"codec", {"--n-fft INT [960]", "--hop INT [480]", "--latent-dim INT [128]", "--head-roundtrip BOOLEAN [0]"}},
      {"train-fm", {"--steps INT [4000]", "--batch-size INT [256]", "--lr FLOAT [0.001]", "--warmup-steps INT [1000]",
                    "--ema-decay FLOAT [0.999]", "--cond-drop FLOAT [0.1]"}},
      {"distill", {"--warmup-steps INT [5000]", "--adv-weight FLOAT [0.5]", "--lr FLOAT [5e-06]",
                   "--cfg-min FLOAT [1]", "--cfg-max FLOAT [9]", "--embed-match-steps INT [1000]"}},
      {"sample", {"--solver TEXT [euler]", "--steps INT [4]", "--cfg-scale FLOAT [7]", "--atol FLOAT [0.001]"}},
      {"eval", {"--jobs INT [0]", "--output TEXT [eval_report.csv]"}},
  };
  const std::regex option_line(R"(^  --[a-z-]+ [A-Z]+ \[[^\]]*\])");
  for (const auto& [cmd, flags] : expected) {
    const Result r = run({cmd, "--help"});
    EXPECT_EQ(r.code, 0) << cmd;
    int n_options = 0;
    for (const auto& l : lines(r.out)) {
      if (l.rfind("  --", 0) != 0) continue;
      ++n_options;
      EXPECT_TRUE(std::regex_search(l, option_line)) << cmd << ": " << l;
    }
    EXPECT_GE(n_options, 4) << cmd;
    for (const auto& f : flags) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " lacks " << f;
    EXPECT_NE(r.out.find("--seed UINT [0]"), std::string::npos) << cmd;
  }
}

TEST(CliUsage, ExitCodes) {
  const auto dir = test_util::temp_dir("cli_exit");
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"train-fm", "--no-such-flag"}).code, 1);
  EXPECT_EQ(run({"train-fm", "--steps", "many"}).code, 1);
  EXPECT_EQ(run({"codec", "--out-dir", dir.string()}).code, 1);
  EXPECT_EQ(run({"eval", "--out-dir", dir.string()}).code, 1);
  const Result missing = run({"codec", "--input", (dir / "absent.wav").string(), "--out-dir", dir.string()});
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("absent.wav"), std::string::npos) << missing.err;
  EXPECT_EQ(run({"sample", "--checkpoint", (dir / "absent.ckpt").string(), "--out-dir", dir.string()}).code, 2);
}

TEST(CliUsage, ConfigFileAppliesAndFlagsOverride) {
  const auto dir = test_util::temp_dir("cli_config");
  {
    std::ofstream cfg(dir / "run.cfg");
    cfg << "# toy run\nsteps = 3\nbatch_size = 4\nout-dir = " << (dir / "a").string() << "\n";
  }
  ASSERT_EQ(run({"train-fm", "--config", (dir / "run.cfg").string()}).code, 0);
  EXPECT_EQ(lines(slurp(dir / "a" / "train_fm_log.csv")).size(), 4u);
  ASSERT_EQ(run({"train-fm", "--config", (dir / "run.cfg").string(), "--steps", "2"}).code, 0);
  EXPECT_EQ(lines(slurp(dir / "a" / "train_fm_log.csv")).size(), 3u);

  {
    std::ofstream cfg(dir / "bad.cfg");
    cfg << "steps = 3\nlearning_rate = 0.1\n";
  }
  const Result bad = run({"train-fm", "--config", (dir / "bad.cfg").string(), "--out-dir", dir.string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("learning-rate"), std::string::npos) << bad.err;
  // Keys belong to one command: a codec key is unknown to train-fm.
  {
    std::ofstream cfg(dir / "other.cfg");
    cfg << "hop = 240\n";
  }
  EXPECT_EQ(run({"train-fm", "--config", (dir / "other.cfg").string(), "--out-dir", dir.string()}).code, 1);
  EXPECT_EQ(run({"train-fm", "--config", (dir / "none.cfg").string(), "--out-dir", dir.string()}).code, 2);
}

TEST(CliUsage, OutputDirectoryFromEnvironment) {
  const auto dir = test_util::temp_dir("cli_env");
  ::setenv(cli::kOutDirEnv, (dir / "env_out").string().c_str(), 1);
  const Result r = run({"train-fm", "--steps", "1", "--batch-size", "4"});
  ::unsetenv(cli::kOutDirEnv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "env_out" / "model.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "env_out" / "train_fm_log.csv"));
}

TEST(CliUsage, ReportNamesStayInsideOutputDirectory) {
  const auto dir = test_util::temp_dir("cli_escape");
  EXPECT_EQ(run({"eval", "--samples", "x.csv", "--output", "../r.csv", "--out-dir", dir.string()}).code, 1);
  EXPECT_FALSE(fs::exists(dir.parent_path() / "r.csv"));
}

// ---------------------------------------------------------------------------
// codec

TEST(CliCodec, LosslessRoundtripOfWapyClip) {
  const auto dir = test_util::temp_dir("cli_codec");
  write_wav(dir / "clip.wav", wapy_clip());
  for (const char* head : {"false", "true"}) {
    const Result r =
        run({"codec", "--input", (dir / "clip.wav").string(), "--head-roundtrip", head, "--out-dir", dir.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rep = report(dir / "codec_report.csv");
    EXPECT_GE(std::stod(rep.at("si_sdr")), 90.0) << head;
    EXPECT_LT(std::stod(rep.at("mel_dist")), 1e-6) << head;
    EXPECT_LT(std::stod(rep.at("stft_dist")), 1e-6) << head;
    EXPECT_DOUBLE_EQ(std::stod(rep.at("samples_per_latent_value")), 3.75);
    EXPECT_NEAR(std::stod(rep.at("latent_values_per_sample")), 128.0 / 480.0, 1e-9);
    const AudioBuffer back = read_wav(dir / "clip_recon.wav");
    EXPECT_EQ(back.size(), wapy_clip().size());
  }
}

TEST(CliCodec, SilentInputHasZeroMelDistance) {
  const auto dir = test_util::temp_dir("cli_codec_zero");
  AudioBuffer z;
  z.samples.assign(48000, 0.0);
  write_wav(dir / "zero.wav", z);
  const Result r = run({"codec", "--input", (dir / "zero.wav").string(), "--out-dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = report(dir / "codec_report.csv");
  EXPECT_EQ(std::stod(rep.at("mel_dist")), 0.0);
  EXPECT_EQ(rep.at("si_sdr"), "nan");
}

TEST(CliCodec, StereoInputWarnsAboutDownmix) {
  const auto dir = test_util::temp_dir("cli_codec_stereo");
  std::vector<std::pair<int, int>> frames;
  for (int i = 0; i < 4800; ++i) frames.emplace_back(static_cast<int>(8000 * std::sin(0.05 * i)), 1000);
  test_util::write_raw(dir / "st.wav", test_util::stereo_pcm16(frames, 48000));
  const Result r = run({"codec", "--input", (dir / "st.wav").string(), "--out-dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("downmixed"), std::string::npos) << r.err;
}

TEST(CliCodec, MalformedWavIsIoError) {
  const auto dir = test_util::temp_dir("cli_codec_bad");
  test_util::write_raw(dir / "bad.wav", {'R', 'I', 'F', 'F', 0, 0});
  const Result r = run({"codec", "--input", (dir / "bad.wav").string(), "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.wav"), std::string::npos) << r.err;
}

// ---------------------------------------------------------------------------
// train-fm

TEST(CliTrainFm, ZeroStepsCheckpointEqualsInitialization) {
  const auto dir = test_util::temp_dir("cli_fm_zero");
  ASSERT_EQ(run({"train-fm", "--steps", "0", "--seed", "9", "--out-dir", dir.string()}).code, 0);
  const Checkpoint ck = load_checkpoint(dir / "model.ckpt");
  Rng rng(9);
  const VelocityModel init = make_model(toy_model_config(8), rng);
  ASSERT_EQ(ck.model.config, init.config);
  EXPECT_TRUE((flatten(ck.model.params).array() == flatten(init.params).array()).all());
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 0);
  EXPECT_EQ(lines(slurp(dir / "train_fm_log.csv")).size(), 1u);
}

TEST(CliTrainFm, NonFiniteLossAbortsWithStepIndex) {
  const auto dir = test_util::temp_dir("cli_fm_nan");
  const Result r = run({"train-fm", "--steps", "50", "--lr", "1e300", "--warmup-steps", "0", "--clip-norm", "1e300",
                        "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("step "), std::string::npos) << r.err;
}

// The default run is shared by the post-condition checks below.
class CliTrainFmDefault : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = test_util::temp_dir("cli_fm_default");
    const Result r = run({"train-fm", "--out-dir", dir_.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto ls = lines(slurp(dir_ / "train_fm_log.csv"));
    for (std::size_t i = 1; i < ls.size(); ++i) losses_.push_back(std::stod(cells(ls[i]).at(1)));
  }
  static fs::path dir_;
  static std::vector<double> losses_;
};
fs::path CliTrainFmDefault::dir_;
std::vector<double> CliTrainFmDefault::losses_;

TEST_F(CliTrainFmDefault, FinalLossBelowTenPercentOfInitial) {
  ASSERT_EQ(losses_.size(), 4000u);
  double tail = 0.0;
  for (std::size_t i = losses_.size() - 100; i < losses_.size(); ++i) tail += losses_[i] / 100.0;
  EXPECT_LT(tail, 0.1 * losses_.front()) << "initial " << losses_.front() << ", final " << tail;
}

TEST_F(CliTrainFmDefault, LossCurveMatchesRecordedRun) {
  ASSERT_EQ(losses_.size(), 4000u);
  EXPECT_LT(test_util::rel_err(losses_[0], 1.503939969725911), 1e-9);
  EXPECT_LT(test_util::rel_err(losses_[999], 0.23595767131892531), 1e-9);
  EXPECT_LT(test_util::rel_err(losses_[3999], 0.25829252274182335), 1e-9);
}

TEST_F(CliTrainFmDefault, CheckpointReloadsBitExactly) {
  const Checkpoint ck = load_checkpoint(dir_ / "model.ckpt");
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(ck.optimizer->step, 4000);
  const auto again = dir_ / "resaved.ckpt";
  save_checkpoint(again, ck.model, &*ck.optimizer);
  EXPECT_EQ(slurp(again), slurp(dir_ / "model.ckpt"));
}

// ---------------------------------------------------------------------------
// distill and sample

TEST_F(CliModels, DistillLogShowsWarmupGating) {
  const auto ls = lines(slurp(dir_ / "student" / "distill_log.csv"));
  ASSERT_EQ(ls.size(), 41u);
  EXPECT_EQ(ls[0], "step,mf_loss,adv_loss,disc_loss,lr");
  for (std::size_t i = 1; i < ls.size(); ++i) {
    const auto c = cells(ls[i]);
    ASSERT_EQ(c.size(), 5u) << ls[i];
    EXPECT_EQ(std::stoll(c[0]), static_cast<long long>(i));
    const bool past = i > 20;
    EXPECT_EQ(c[2].empty(), !past) << ls[i];
    EXPECT_EQ(c[3].empty(), !past) << ls[i];
  }
  const Checkpoint ck = load_checkpoint(student());
  EXPECT_TRUE(ck.model.config.use_r);
}

TEST_F(CliModels, ZeroAdversarialWeightMatchesPureDistillation) {
  const auto dir = test_util::temp_dir("cli_adv0");
  const std::vector<std::string> base = {"distill", "--teacher", teacher().string(), "--steps", "30", "--batch-size",
                                         "16", "--embed-match-steps", "20", "--eval-samples", "0"};
  auto with = [&](std::vector<std::string> extra, const std::string& out) {
    auto a = base;
    a.insert(a.end(), extra.begin(), extra.end());
    a.push_back("--out-dir");
    a.push_back((dir / out).string());
    return run(a).code;
  };
  ASSERT_EQ(with({"--adv-weight", "0", "--warmup-steps", "10"}, "adv0"), 0);
  ASSERT_EQ(with({"--warmup-steps", "1000"}, "pure"), 0);
  const auto a = lines(slurp(dir / "adv0" / "distill_log.csv")), p = lines(slurp(dir / "pure" / "distill_log.csv"));
  ASSERT_EQ(a.size(), p.size());
  for (std::size_t i = 1; i < a.size(); ++i) EXPECT_EQ(cells(a[i]).at(1), cells(p[i]).at(1)) << i;
  EXPECT_EQ(slurp(dir / "adv0" / "student.ckpt"), slurp(dir / "pure" / "student.ckpt"));
}

TEST_F(CliModels, DistillRejectsIncompatibleTeacher) {
  const auto dir = test_util::temp_dir("cli_bad_teacher");
  const Result r = run({"distill", "--teacher", student().string(), "--steps", "1", "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("teacher"), std::string::npos);
}

TEST_F(CliModels, DistillReportsEndpointAgreementAndNfe) {
  const auto dir = test_util::temp_dir("cli_distill_eval");
  ASSERT_EQ(run({"distill", "--teacher", teacher().string(), "--steps", "5", "--batch-size", "16",
                 "--embed-match-steps", "10", "--eval-samples", "10", "--out-dir", dir.string()})
                .code,
            0);
  const auto rep = report(dir / "distill_report.csv");
  EXPECT_EQ(std::stod(rep.at("student_nfe")), 4.0);
  EXPECT_GE(std::stod(rep.at("teacher_nfe")), 2.0 * 7);
  EXPECT_TRUE(std::isfinite(std::stod(rep.at("endpoint_l2"))));
}

TEST_F(CliModels, EulerNfeAccounting) {
  const auto dir = test_util::temp_dir("cli_sample_nfe");
  auto nfe_column = [&](const std::vector<std::string>& args) {
    auto a = args;
    a.push_back("--out-dir");
    a.push_back(dir.string());
    EXPECT_EQ(run(a).code, 0);
    std::set<std::string> seen;
    const auto ls = lines(slurp(dir / "samples.csv"));
    EXPECT_EQ(ls[0], "id,class,x0,x1,nfe");
    for (std::size_t i = 1; i < ls.size(); ++i) seen.insert(cells(ls[i]).back());
    return seen;
  };
  // Distilled students spend one call per step; guided teachers two.
  EXPECT_EQ(nfe_column({"sample", "--checkpoint", student().string()}), std::set<std::string>{"4"});
  EXPECT_EQ(nfe_column({"sample", "--checkpoint", teacher().string()}), std::set<std::string>{"8"});
  EXPECT_EQ(nfe_column({"sample", "--checkpoint", teacher().string(), "--cfg-scale", "1"}), std::set<std::string>{"4"});
  EXPECT_EQ(nfe_column({"sample", "--checkpoint", student().string(), "--renoise", "0,0.5,0.5,0.3"}),
            std::set<std::string>{"7"});
}

TEST_F(CliModels, DopriBudgetExceededIsNumericFailure) {
  const auto dir = test_util::temp_dir("cli_sample_budget");
  const Result r = run({"sample", "--checkpoint", teacher().string(), "--solver", "dopri5", "--max-nfe", "10",
                        "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("NFE"), std::string::npos) << r.err;
}

TEST_F(CliModels, EveryCommandIsDeterministic) {
  const auto root = test_util::temp_dir("cli_determinism");
  write_wav(root / "clip.wav", wapy_clip());
  fs::create_directories(root / "wavs");
  for (int i = 0; i < 3; ++i) write_wav(root / "wavs" / ("w" + std::to_string(i) + ".wav"), wapy_synthesize(i, 0.2, 48000));
  Rng rng(3);
  write_embeddings_csv(root / "ref.csv", EmbeddingSet{randn(20, 4, rng), {}});
  write_embeddings_csv(root / "gen.csv", EmbeddingSet{randn(20, 4, rng), {}});

  const std::vector<std::vector<std::string>> commands = {
      {"codec", "--input", (root / "clip.wav").string()},
      {"train-fm", "--steps", "50", "--batch-size", "32", "--seed", "4"},
      {"distill", "--teacher", teacher().string(), "--steps", "12", "--batch-size", "16", "--warmup-steps", "4",
       "--embed-match-steps", "10", "--eval-samples", "5", "--seed", "4"},
      {"sample", "--checkpoint", student().string(), "--n", "20", "--renoise", "0,0.5,0.5,0.3", "--seed", "4"},
      {"sample", "--checkpoint", teacher().string(), "--n", "5", "--solver", "dopri5", "--seed", "4"},
      {"eval", "--ref-emb", (root / "ref.csv").string(), "--gen-emb", (root / "gen.csv").string(), "--ref-logits",
       (root / "ref.csv").string(), "--gen-logits", (root / "gen.csv").string(), "--text-emb",
       (root / "ref.csv").string(), "--audio-emb", (root / "gen.csv").string(), "--ref-dir", (root / "wavs").string(),
       "--gen-dir", (root / "wavs").string(), "--jobs", "3"},
  };
  int k = 0;
  for (const auto& cmd : commands) {
    const fs::path a = root / ("a" + std::to_string(k)), b = root / ("b" + std::to_string(k));
    auto args_a = cmd, args_b = cmd;
    args_a.insert(args_a.end(), {"--out-dir", a.string()});
    args_b.insert(args_b.end(), {"--out-dir", b.string()});
    ASSERT_EQ(run(args_a).code, 0) << cmd[0];
    ASSERT_EQ(run(args_b).code, 0) << cmd[0];
    expect_same_tree(a, b);
    ++k;
  }
}

// ---------------------------------------------------------------------------
// eval

TEST(CliEval, IdenticalInputsGiveZeroDistances) {
  const auto dir = test_util::temp_dir("cli_eval_same");
  fs::create_directories(dir / "wavs");
  for (int i = 0; i < 4; ++i) write_wav(dir / "wavs" / ("c" + std::to_string(i) + ".wav"), wapy_synthesize(i, 0.3, 48000));
  Rng rng(5);
  write_embeddings_csv(dir / "e.csv", EmbeddingSet{randn(30, 3, rng), {}});
  const Result r = run({"eval", "--ref-emb", (dir / "e.csv").string(), "--gen-emb", (dir / "e.csv").string(),
                        "--ref-logits", (dir / "e.csv").string(), "--gen-logits", (dir / "e.csv").string(), "--ref-dir",
                        (dir / "wavs").string(), "--gen-dir", (dir / "wavs").string(), "--out-dir", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = report(dir / "eval_report.csv");
  EXPECT_NEAR(std::stod(rep.at("fd")), 0.0, 1e-9);
  EXPECT_EQ(std::stod(rep.at("kl")), 0.0);
  EXPECT_EQ(std::stod(rep.at("mel_dist")), 0.0);
  EXPECT_EQ(std::stod(rep.at("stft_dist")), 0.0);
  EXPECT_EQ(std::stod(rep.at("si_sdr")), kSiSdrCapDb);
  const auto ls = lines(slurp(dir / "eval_report.csv"));
  EXPECT_EQ(ls[0], "metric,value,n_items");
  EXPECT_EQ(ls.size(), 6u);
}

TEST(CliEval, RecallOnIdentityEmbeddingsIsOne) {
  const auto dir = test_util::temp_dir("cli_eval_recall");
  write_embeddings_csv(dir / "eye.csv", EmbeddingSet{Matrix::Identity(12, 12), {}});
  ASSERT_EQ(run({"eval", "--text-emb", (dir / "eye.csv").string(), "--audio-emb", (dir / "eye.csv").string(),
                 "--out-dir", dir.string()})
                .code,
            0);
  const auto rep = report(dir / "eval_report.csv");
  for (const char* m : {"recall_t2a@1", "recall_a2t@1", "recall_t2a@5", "recall_t2a@10", "clap"})
    EXPECT_EQ(std::stod(rep.at(m)), 1.0) << m;
}

TEST(CliEval, MixedDimensionEmbeddingsAreRejected) {
  const auto dir = test_util::temp_dir("cli_eval_dims");
  Rng rng(6);
  write_embeddings_csv(dir / "a.csv", EmbeddingSet{randn(10, 3, rng), {}});
  write_embeddings_csv(dir / "b.csv", EmbeddingSet{randn(10, 4, rng), {}});
  const Result r = run({"eval", "--ref-emb", (dir / "a.csv").string(), "--gen-emb", (dir / "b.csv").string(),
                        "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("dimensions differ"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "eval_report.csv"));
}

TEST(CliEval, MalformedCsvNamesFileAndByteOffset) {
  const auto dir = test_util::temp_dir("cli_eval_malformed");
  {
    std::ofstream f(dir / "m.csv");
    f << "id,dim0,dim1\na,1,2\nb,1,oops\n";
  }
  const Result r = run({"eval", "--ref-emb", (dir / "m.csv").string(), "--gen-emb", (dir / "m.csv").string(),
                        "--out-dir", dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("m.csv"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("byte 19"), std::string::npos) << r.err;
}

TEST(CliEval, WorkerCountDoesNotChangeReport) {
  const auto dir = test_util::temp_dir("cli_eval_jobs");
  fs::create_directories(dir / "ref");
  fs::create_directories(dir / "gen");
  for (int i = 0; i < 5; ++i) {
    const std::string n = "f" + std::to_string(i) + ".wav";
    AudioBuffer a = wapy_synthesize(10 + i, 0.2, 48000);
    write_wav(dir / "ref" / n, a);
    for (auto& s : a.samples) s *= 0.9;
    a.samples[100] += 0.01;
    write_wav(dir / "gen" / n, a);
  }
  for (const char* jobs : {"1", "4"}) {
    ASSERT_EQ(run({"eval", "--ref-dir", (dir / "ref").string(), "--gen-dir", (dir / "gen").string(), "--jobs", jobs,
                   "--output", std::string("r") + jobs + ".csv", "--out-dir", dir.string()})
                  .code,
              0);
  }
  EXPECT_EQ(slurp(dir / "r1.csv"), slurp(dir / "r4.csv"));
  fs::remove(dir / "gen" / "f3.wav");
  EXPECT_EQ(run({"eval", "--ref-dir", (dir / "ref").string(), "--gen-dir", (dir / "gen").string(), "--out-dir",
                 dir.string()})
                .code,
            2);
}

TEST_F(CliModels, ToyWassersteinFromSampleCsv) {
  const auto dir = test_util::temp_dir("cli_eval_w2");
  ASSERT_EQ(run({"sample", "--checkpoint", student().string(), "--n", "64", "--out-dir", dir.string()}).code, 0);
  ASSERT_EQ(run({"eval", "--samples", (dir / "samples.csv").string(), "--out-dir", dir.string()}).code, 0);
  const auto rep = report(dir / "eval_report.csv");
  const double w2 = std::stod(rep.at("w2_toy"));
  EXPECT_GT(w2, 0.0);
  EXPECT_LT(w2, 3.0);
}
