#pragma once

// sfxflow command-line front end. run() is the whole program; main() only
// forwards argv so the commands can be driven in-process by tests.

#include "CLI11.hpp"

#include "sfx/distill.hpp"
#include "sfx/dsp.hpp"
#include "sfx/metrics.hpp"
#include "sfx/solvers.hpp"
#include "sfx/toy.hpp"
#include "sfx/wav.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace sfx::cli {

namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

inline constexpr const char* kOutDirEnv = "SFX_OUT_DIR";

inline std::string default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? std::string(env) : std::string("sfx_out");
}

// Options shared by every command.
struct Common {
  std::string config;
  std::string out_dir = default_out_dir();
  std::uint64_t seed = 0;
};

struct CodecOptions {
  std::string input;
  int n_fft = 960;
  int hop = 480;
  int latent_dim = 128;
  bool head_roundtrip = false;
  std::string format = "float32";
};

struct TrainFmOptions {
  long long steps = 4000;
  int batch_size = 256;
  double lr = 1e-3;
  long long warmup_steps = 1000;
  double clip_norm = 1.0;
  double ema_decay = 0.999;
  double cond_drop = 0.1;
  int hidden = 128;
  int depth = 3;
  int time_features = 32;
  double max_frequency = 100.0;
};

struct DistillOptions {
  std::string teacher;
  bool teacher_ema = true;
  long long steps = 2000;
  int batch_size = 256;
  long long warmup_steps = 5000;
  double adv_weight = 0.5;
  double lr = 5e-6;
  double disc_lr = 5e-6;
  double clip_norm = 1.0;
  double ema_decay = 0.99;
  double tangent_clip = 1.0;
  std::string cfg_mode = "standard";
  double cfg_min = 1.0;
  double cfg_max = 9.0;
  double cond_drop = 0.1;
  int embed_match_steps = 1000;
  int disc_heads = 4;
  int disc_width = 16;
  int eval_samples = 200;
  double eval_cfg_scale = 5.0;
  int eval_steps = 4;
  double teacher_tol = 1e-3;
};

struct SampleOptions {
  std::string checkpoint;
  std::string solver = "euler";
  int steps = 4;
  int n = 16;
  int cls = -1;
  double cfg_scale = 7.0;
  std::string cfg_mode = "standard";
  double atol = 1e-3;
  double rtol = 1e-3;
  long long max_nfe = 100000;
  std::string renoise;
  std::string renoise_mode = "remix";
  bool use_ema = true;
  std::string output = "samples.csv";
};

struct EvalOptions {
  std::string ref_emb, gen_emb;
  std::string ref_logits, gen_logits;
  std::string text_emb, audio_emb;
  std::string ref_dir, gen_dir;
  std::string samples;
  std::uint64_t ref_seed = 1;
  int jobs = 0;
  std::string output = "eval_report.csv";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Flat "key = value" file; '#' starts a comment. Keys name the command's
// long flags, with '_' accepted for '-'.
inline std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    out.emplace_back(key, value);
  }
  return out;
}

// Applies config values to options not given on the command line.
inline void apply_config(CLI::App& sub, const fs::path& path) {
  for (const auto& [key, value] : read_config(path)) {
    if (key == "config" || key == "help") throw ConfigError(path.string() + ": key '" + key + "' not allowed");
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (!opt) throw ConfigError(path.string() + ": unknown key '" + key + "' for command " + sub.get_name());
    if (opt->count() > 0) continue;
    opt->clear();
    opt->add_result(value);
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(path.string() + ": bad value for '" + key + "': " + e.what());
    }
  }
}

inline CfgMode parse_cfg_mode(const std::string& s) {
  if (s == "standard") return CfgMode::standard;
  if (s == "swapped") return CfgMode::swapped;
  throw ConfigError("cfg mode must be 'standard' or 'swapped', got '" + s + "'");
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    cell = trim(cell);
    if (cell.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw ConfigError("malformed number in list: '" + cell + "'");
    }
  }
  return out;
}

inline fs::path prepare_out_dir(const Common& c) {
  const fs::path dir(c.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

// Report names must stay inside the output directory.
inline void check_file_name(const std::string& name, const char* flag) {
  const fs::path p(name);
  if (name.empty() || p.has_parent_path() || p.is_absolute() || name == "." || name == "..")
    throw ConfigError(std::string(flag) + " must be a plain file name, got '" + name + "'");
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  os.precision(17);
  return os;
}

inline VelocityModel load_weights(const fs::path& p, bool use_ema) {
  Checkpoint ck = load_checkpoint(p);
  if (use_ema && ck.optimizer) return ema_model(ck.model, *ck.optimizer);
  return ck.model;
}

// Samples CSV from `sample`: id,class,x0..x{d-1},nfe.
inline Matrix read_sample_points(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open samples file " + p.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(p.string() + ": empty file");
  std::vector<int> cols;
  {
    std::stringstream ss(line);
    std::string cell;
    int j = 0;
    while (std::getline(ss, cell, ',')) {
      cell = trim(cell);
      if (cell.size() > 1 && cell[0] == 'x' && std::all_of(cell.begin() + 1, cell.end(), ::isdigit)) cols.push_back(j);
      ++j;
    }
  }
  if (cols.empty()) throw IoError(p.string() + ": no x columns in header");
  std::vector<std::vector<double>> rows;
  std::size_t offset = line.size() + 1;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t bytes = line.size() + 1;
    if (trim(line).empty()) {
      offset += bytes;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    std::vector<double> row;
    for (int c : cols) {
      const auto ci = static_cast<std::size_t>(c);
      try {
        if (ci >= cells.size()) throw std::invalid_argument("missing");
        std::size_t used = 0;
        row.push_back(std::stod(cells[ci], &used));
        if (used != cells[ci].size()) throw std::invalid_argument(cells[ci]);
      } catch (const std::exception&) {
        throw IoError(p.string() + ": line " + std::to_string(line_no) + " (byte " + std::to_string(offset) +
                      "): malformed sample row");
      }
    }
    rows.push_back(std::move(row));
    offset += bytes;
  }
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return m;
}

inline std::string opt_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands.

inline int cmd_codec(const Common& c, const CodecOptions& o, std::ostream& out, std::ostream& err) {
  if (o.input.empty()) throw ConfigError("codec: --input is required");
  if (o.format != "float32" && o.format != "pcm16") throw ConfigError("codec: --format must be float32 or pcm16");
  if (o.latent_dim < 1) throw ConfigError("codec: --latent-dim must be positive");
  const fs::path dir = detail::prepare_out_dir(c);
  WavInfo info;
  const AudioBuffer audio = read_wav(o.input, &info);
  if (info.channels > 1)
    err << "warning: " << o.input << ": " << info.channels << " channels downmixed to mono\n";

  const StftConfig sc{o.n_fft, o.hop};
  ComplexSpectrogram spec = stft(audio, sc);
  if (o.head_roundtrip)
    spec = head_to_complex(complex_to_head(spec), sc, spec.sample_rate, spec.signal_length);
  const AudioBuffer recon = istft(spec);

  const fs::path wav_out = dir / (fs::path(o.input).stem().string() + "_recon.wav");
  write_wav(wav_out, recon, o.format == "pcm16" ? WavFormat::pcm16 : WavFormat::float32);

  double sdr = std::numeric_limits<double>::quiet_NaN();
  try {
    sdr = si_sdr(audio, recon);
  } catch (const DomainError&) {
    err << "warning: " << o.input << ": SI-SDR undefined for silent input\n";
  }
  const std::vector<MetricRow> rows = {
      {"mel_dist", mel_dist(audio, recon), 1},
      {"stft_dist", stft_dist(audio, recon), 1},
      {"si_sdr", sdr, 1},
      {"samples_per_latent_value", samples_per_latent_value(o.hop, o.latent_dim), 1},
      {"latent_values_per_sample", latent_values_per_sample(o.hop, o.latent_dim), 1},
  };
  write_report_csv(dir / "codec_report.csv", rows);
  out << "codec: " << spec.frames() << " frames, SI-SDR " << format_metric_value(sdr) << " dB -> " << wav_out.string()
      << '\n';
  return kOk;
}

inline int cmd_train_fm(const Common& c, const TrainFmOptions& o, std::ostream& out) {
  if (o.steps < 0) throw ConfigError("train-fm: --steps must be >= 0");
  if (o.batch_size < 1) throw ConfigError("train-fm: --batch-size must be positive");
  const fs::path dir = detail::prepare_out_dir(c);
  ModelConfig mc = toy_model_config(8);
  mc.hidden = o.hidden;
  mc.depth = o.depth;
  mc.time_features = o.time_features;
  mc.max_frequency = o.max_frequency;
  Rng rng(c.seed);
  VelocityModel model = make_model(mc, rng);
  FmTrainConfig fc;
  fc.steps = o.steps;
  fc.batch_size = o.batch_size;
  fc.cond_drop = o.cond_drop;
  fc.adam = AdamConfig{o.lr, 0.9, 0.999, 1e-8, o.warmup_steps, o.clip_norm, o.ema_decay};
  OptimizerState opt = OptimizerState::init(model, fc.adam);

  std::ofstream log = detail::open_out(dir / "train_fm_log.csv");
  log << "step,loss,lr,grad_norm\n";
  std::vector<double> losses;
  train_fm(model, opt, EightGaussians{}, fc, rng, [&](const FmLogRow& r) {
    log << r.step << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm << '\n';
    losses.push_back(r.loss);
  });
  save_checkpoint(dir / "model.ckpt", model, &opt);
  if (!losses.empty()) {
    const std::size_t tail = std::min<std::size_t>(100, losses.size());
    double final_loss = 0.0;
    for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) final_loss += losses[i] / static_cast<double>(tail);
    out << "train-fm: " << losses.size() << " steps, initial loss " << losses.front() << ", final loss (mean of last "
        << tail << ") " << final_loss << ", ratio " << final_loss / losses.front() << '\n';
  } else {
    out << "train-fm: 0 steps, wrote initial checkpoint\n";
  }
  return kOk;
}

inline int cmd_distill(const Common& c, const DistillOptions& o, std::ostream& out) {
  if (o.teacher.empty()) throw ConfigError("distill: --teacher is required");
  if (o.steps < 0 || o.batch_size < 1 || o.eval_samples < 0 || o.eval_steps < 1)
    throw ConfigError("distill: steps, batch size, eval samples and eval steps must be non-negative");
  const fs::path dir = detail::prepare_out_dir(c);
  const VelocityModel teacher = detail::load_weights(o.teacher, o.teacher_ema);
  const EightGaussians data;
  if (teacher.config.use_r) throw ConfigError("distill: teacher is already an average-velocity model");
  if (teacher.config.state_dim != 2 || teacher.config.num_classes < data.modes)
    throw ConfigError("distill: teacher must be a 2-D model with at least " + std::to_string(data.modes) +
                      " classes, got state_dim " + std::to_string(teacher.config.state_dim) + ", " +
                      std::to_string(teacher.config.num_classes) + " classes");

  DistillConfig dc;
  dc.steps = o.steps;
  dc.batch_size = o.batch_size;
  dc.warmup_steps = o.warmup_steps;
  dc.adv_weight = o.adv_weight;
  dc.lr = o.lr;
  dc.disc_lr = o.disc_lr;
  dc.clip_norm = o.clip_norm;
  dc.ema_decay = o.ema_decay;
  dc.tangent_clip = o.tangent_clip;
  dc.embed_match_steps = o.embed_match_steps;
  dc.disc_heads = o.disc_heads;
  dc.disc_width = o.disc_width;
  CfgMode eval_mode = CfgMode::standard;
  if (o.cfg_mode == "none") {
    dc.cfg.reset();
  } else {
    eval_mode = detail::parse_cfg_mode(o.cfg_mode);
    if (!(o.cfg_min <= o.cfg_max)) throw ConfigError("distill: --cfg-min must not exceed --cfg-max");
    dc.cfg = CfgDistillOptions{o.cfg_min, o.cfg_max, o.cond_drop, eval_mode};
  }

  EmbedMatchReport match;
  DistillState st = init_distillation(teacher, dc, c.seed, &match);
  const DataSampler sampler = [&data](int batch, Rng& rng, Matrix& x0, std::vector<int>& cond) {
    data.sample(batch, rng, x0, cond);
  };
  std::ofstream log = detail::open_out(dir / "distill_log.csv");
  log << "step,mf_loss,adv_loss,disc_loss,lr\n";
  for (long long s = 0; s < o.steps; ++s) {
    const DistillLogRow row = distill_iteration(st, sampler);
    log << row.step << ',' << row.mf_loss << ',' << detail::opt_cell(row.adv_loss) << ','
        << detail::opt_cell(row.disc_loss) << ',' << row.lr << '\n';
  }
  save_checkpoint(dir / "student.ckpt", st.student, &st.student_opt);

  std::vector<MetricRow> report;
  if (!match.held_mse.empty()) {
    report.push_back({"embed_mse_initial", match.held_mse.front(), 1});
    report.push_back({"embed_mse_final", match.held_mse.back(), 1});
  }
  if (o.eval_samples > 0) {
    const VelocityModel student = ema_model(st.student, st.student_opt);
    SolverConfig tc;
    tc.kind = SolverKind::dopri5;
    tc.atol = o.teacher_tol;
    tc.rtol = o.teacher_tol;
    SolverConfig sc;
    sc.kind = SolverKind::euler;
    sc.steps = o.eval_steps;
    const double scale = dc.cfg ? o.eval_cfg_scale : cfg_neutral_scale(eval_mode);
    Rng erng(c.seed + 1000);
    std::uniform_int_distribution<int> pick(0, data.modes - 1);
    double l2 = 0.0, t_nfe = 0.0, s_nfe = 0.0;
    for (int i = 0; i < o.eval_samples; ++i) {
      const int cls = pick(erng);
      const Vector x1 = randn(2, 1, erng);
      const SampleTrace tt = dopri5_sample(guided_field(teacher, cls, scale, eval_mode), x1, tc);
      const SampleTrace ts = euler_sample(model_field(student, cls), x1, sc, erng);
      l2 += (tt.final - ts.final).norm();
      t_nfe += static_cast<double>(tt.nfe);
      s_nfe += static_cast<double>(ts.nfe);
    }
    const double n = o.eval_samples;
    report.push_back({"endpoint_l2", l2 / n, o.eval_samples});
    report.push_back({"student_nfe", s_nfe / n, o.eval_samples});
    report.push_back({"teacher_nfe", t_nfe / n, o.eval_samples});
    out << "distill: endpoint L2 " << l2 / n << " over " << o.eval_samples << " paired seeds, NFE " << s_nfe / n
        << " vs " << t_nfe / n << '\n';
  }
  write_report_csv(dir / "distill_report.csv", report);
  out << "distill: " << o.steps << " steps -> " << (dir / "student.ckpt").string() << '\n';
  return kOk;
}

inline int cmd_sample(const Common& c, const SampleOptions& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("sample: --checkpoint is required");
  if (o.n < 0) throw ConfigError("sample: --n must be >= 0");
  SolverConfig sc;
  if (o.solver == "euler")
    sc.kind = SolverKind::euler;
  else if (o.solver == "dopri5")
    sc.kind = SolverKind::dopri5;
  else
    throw ConfigError("sample: --solver must be euler or dopri5, got '" + o.solver + "'");
  sc.steps = o.steps;
  sc.atol = o.atol;
  sc.rtol = o.rtol;
  sc.max_nfe = o.max_nfe;
  sc.cfg_scale = o.cfg_scale;
  sc.cfg_mode = detail::parse_cfg_mode(o.cfg_mode);
  sc.renoise_weights = detail::parse_list(o.renoise);
  if (o.renoise_mode == "remix")
    sc.renoise = RenoiseMode::remix;
  else if (o.renoise_mode == "additive")
    sc.renoise = RenoiseMode::additive;
  else
    throw ConfigError("sample: --renoise-mode must be remix or additive");

  detail::check_file_name(o.output, "--output");
  const fs::path dir = detail::prepare_out_dir(c);
  const VelocityModel model = detail::load_weights(o.checkpoint, o.use_ema);
  const ModelConfig& mc = model.config;
  if (o.cls > mc.num_classes) throw ConfigError("sample: --class out of range");

  std::ofstream csv = detail::open_out(dir / o.output);
  csv << "id,class";
  for (int j = 0; j < mc.state_dim; ++j) csv << ",x" << j;
  csv << ",nfe\n";
  Rng rng(c.seed);
  double total_nfe = 0.0;
  for (int i = 0; i < o.n; ++i) {
    const int cls = o.cls >= 0 ? o.cls : (mc.num_classes > 0 ? i % mc.num_classes : -1);
    const Vector x1 = randn(mc.state_dim, 1, rng);
    // Average-velocity students were distilled from the guided field, so a
    // single conditional call per step is enough.
    const VelocityField field = mc.use_r ? model_field(model, cls) : guided_field(model, cls, sc.cfg_scale, sc.cfg_mode);
    const SampleTrace tr = sample(field, x1, sc, rng);
    csv << i << ',' << cls;
    for (Index j = 0; j < tr.final.size(); ++j) csv << ',' << tr.final(j);
    csv << ',' << tr.nfe << '\n';
    total_nfe += static_cast<double>(tr.nfe);
  }
  out << "sample: " << o.n << " samples (" << o.solver << "), mean NFE " << (o.n > 0 ? total_nfe / o.n : 0.0) << " -> "
      << (dir / o.output).string() << '\n';
  return kOk;
}

namespace detail {

struct AudioPairMetrics {
  double mel = 0.0, stft = 0.0, sdr = 0.0;
};

// Pairs files by name; the pool only changes which worker computes a pair,
// results are stored and reduced in sorted-path order.
inline std::vector<AudioPairMetrics> eval_audio_dirs(const fs::path& ref_dir, const fs::path& gen_dir, int jobs) {
  if (!fs::is_directory(ref_dir)) throw IoError("not a directory: " + ref_dir.string());
  if (!fs::is_directory(gen_dir)) throw IoError("not a directory: " + gen_dir.string());
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(ref_dir))
    if (e.is_regular_file() && e.path().extension() == ".wav") names.push_back(e.path().filename());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("no .wav files in " + ref_dir.string());
  for (const auto& n : names)
    if (!fs::exists(gen_dir / n)) throw IoError("missing counterpart " + (gen_dir / n).string());

  std::vector<AudioPairMetrics> results(names.size());
  std::vector<std::exception_ptr> errors(names.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < names.size(); i = next++) {
      try {
        const AudioBuffer a = read_wav(ref_dir / names[i]);
        const AudioBuffer b = read_wav(gen_dir / names[i]);
        AudioPairMetrics m;
        m.mel = mel_dist(a, b);
        m.stft = stft_dist(a, b);
        try {
          m.sdr = si_sdr(a, b);
        } catch (const DomainError&) {
          m.sdr = std::numeric_limits<double>::quiet_NaN();
        }
        results[i] = m;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), names.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

}  // namespace detail

inline int cmd_eval(const Common& c, const EvalOptions& o, std::ostream& out) {
  auto paired = [](const std::string& a, const std::string& b, const char* what) {
    if (a.empty() != b.empty()) throw ConfigError(std::string("eval: ") + what + " needs both files");
    return !a.empty();
  };
  const bool do_fd = paired(o.ref_emb, o.gen_emb, "--ref-emb/--gen-emb");
  const bool do_kl = paired(o.ref_logits, o.gen_logits, "--ref-logits/--gen-logits");
  const bool do_clap = paired(o.text_emb, o.audio_emb, "--text-emb/--audio-emb");
  const bool do_audio = paired(o.ref_dir, o.gen_dir, "--ref-dir/--gen-dir");
  const bool do_w2 = !o.samples.empty();
  if (!(do_fd || do_kl || do_clap || do_audio || do_w2)) throw ConfigError("eval: no inputs given");
  int jobs = o.jobs;
  if (jobs < 0) throw ConfigError("eval: --jobs must be >= 0");
  if (jobs == 0) jobs = static_cast<int>(std::clamp(std::thread::hardware_concurrency(), 1u, 4u));
  detail::check_file_name(o.output, "--output");

  const fs::path dir = detail::prepare_out_dir(c);
  std::vector<MetricRow> rows;
  if (do_fd) {
    const EmbeddingSet ref = read_embeddings_csv(o.ref_emb), gen = read_embeddings_csv(o.gen_emb);
    if (ref.dim() != gen.dim())
      throw DomainError("eval: embedding dimensions differ: " + o.ref_emb + " has " + std::to_string(ref.dim()) +
                        ", " + o.gen_emb + " has " + std::to_string(gen.dim()));
    rows.push_back({"fd", frechet_distance(ref, gen), gen.size()});
  }
  if (do_kl) {
    const EmbeddingSet p = read_embeddings_csv(o.ref_logits), q = read_embeddings_csv(o.gen_logits);
    rows.push_back({"kl", kl_divergence(p.rows, q.rows), p.size()});
  }
  if (do_clap) {
    const EmbeddingSet t = read_embeddings_csv(o.text_emb), a = read_embeddings_csv(o.audio_emb);
    if (t.dim() != a.dim())
      throw DomainError("eval: embedding dimensions differ: " + o.text_emb + " has " + std::to_string(t.dim()) + ", " +
                        o.audio_emb + " has " + std::to_string(a.dim()));
    rows.push_back({"clap", clap_score(t, a), t.size()});
    const Matrix sim = cosine_similarity(t, a);
    for (int k : {1, 5, 10}) {
      if (k > sim.rows()) continue;
      const Recall r = recall_at_k(sim, k);
      rows.push_back({"recall_t2a@" + std::to_string(k), r.t2a, t.size()});
      rows.push_back({"recall_a2t@" + std::to_string(k), r.a2t, t.size()});
    }
  }
  if (do_audio) {
    const auto res = detail::eval_audio_dirs(o.ref_dir, o.gen_dir, jobs);
    double mel = 0.0, st = 0.0, sdr = 0.0;
    for (const auto& r : res) {
      mel += r.mel;
      st += r.stft;
      sdr += r.sdr;
    }
    const double n = static_cast<double>(res.size());
    const auto count = static_cast<long long>(res.size());
    rows.push_back({"mel_dist", mel / n, count});
    rows.push_back({"stft_dist", st / n, count});
    rows.push_back({"si_sdr", sdr / n, count});
  }
  if (do_w2) {
    const Matrix gen = detail::read_sample_points(o.samples);
    if (gen.cols() != 2) throw DomainError("eval: --samples must hold 2-D toy samples");
    Rng rng(o.ref_seed);
    Matrix ref;
    std::vector<int> labels;
    EightGaussians{}.sample(static_cast<int>(gen.rows()), rng, ref, labels);
    rows.push_back({"w2_toy", wasserstein2(gen, ref), gen.rows()});
  }
  write_report_csv(dir / o.output, rows);
  for (const auto& r : rows) out << r.metric << ' ' << format_metric_value(r.value) << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Argument parsing.

inline void add_common(CLI::App& sub, Common& c) {
  sub.add_option("--config", c.config, "key = value config file; flags override it")->default_str("\"\"");
  sub.add_option("--out-dir", c.out_dir, std::string("output directory (env ") + kOutDirEnv + ")")
      ->capture_default_str();
  sub.add_option("--seed", c.seed, "random seed")->capture_default_str();
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"sfxflow: STFT codec, flow-matching training, distillation, sampling and evaluation"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(36);
  app.footer("Exit codes: 0 ok, 1 usage, 2 I/O, 3 numeric failure.");

  Common common;
  CodecOptions codec;
  TrainFmOptions train;
  DistillOptions dist;
  SampleOptions smp;
  EvalOptions ev;

  CLI::App* s_codec = app.add_subcommand("codec", "STFT -> iSTFT roundtrip of a WAV file with a metric report");
  add_common(*s_codec, common);
  s_codec->add_option("--input", codec.input, "input WAV file (required)")->default_str("\"\"");
  s_codec->add_option("--n-fft", codec.n_fft, "FFT size")->capture_default_str();
  s_codec->add_option("--hop", codec.hop, "hop size")->capture_default_str();
  s_codec->add_option("--latent-dim", codec.latent_dim, "latent channels for the compression ratio")
      ->capture_default_str();
  s_codec->add_option("--head-roundtrip", codec.head_roundtrip,
                    "pass coefficients through the softplus head parameterization")
      ->capture_default_str();
  s_codec->add_option("--format", codec.format, "output sample format: float32 or pcm16")->capture_default_str();

  CLI::App* s_train = app.add_subcommand("train-fm", "train a class-conditional flow-matching model on the 8-Gaussian ring");
  add_common(*s_train, common);
  s_train->add_option("--steps", train.steps, "optimizer steps")->capture_default_str();
  s_train->add_option("--batch-size", train.batch_size, "batch size")->capture_default_str();
  s_train->add_option("--lr", train.lr, "peak learning rate")->capture_default_str();
  s_train->add_option("--warmup-steps", train.warmup_steps, "linear warmup steps")->capture_default_str();
  s_train->add_option("--clip-norm", train.clip_norm, "gradient clipping norm")->capture_default_str();
  s_train->add_option("--ema-decay", train.ema_decay, "EMA decay")->capture_default_str();
  s_train->add_option("--cond-drop", train.cond_drop, "condition dropout probability")->capture_default_str();
  s_train->add_option("--hidden", train.hidden, "hidden width")->capture_default_str();
  s_train->add_option("--depth", train.depth, "hidden layers")->capture_default_str();
  s_train->add_option("--time-features", train.time_features, "sinusoidal time features")->capture_default_str();
  s_train->add_option("--max-frequency", train.max_frequency, "highest time-feature frequency")->capture_default_str();

  CLI::App* s_dist = app.add_subcommand("distill", "distill a teacher into a few-step average-velocity student");
  add_common(*s_dist, common);
  s_dist->add_option("--teacher", dist.teacher, "teacher checkpoint (required)")->default_str("\"\"");
  s_dist->add_option("--teacher-ema", dist.teacher_ema, "use the teacher's EMA weights")
      ->capture_default_str();
  s_dist->add_option("--steps", dist.steps, "distillation steps")->capture_default_str();
  s_dist->add_option("--batch-size", dist.batch_size, "batch size")->capture_default_str();
  s_dist->add_option("--warmup-steps", dist.warmup_steps, "steps before the adversarial term starts")
      ->capture_default_str();
  s_dist->add_option("--adv-weight", dist.adv_weight, "adversarial loss weight")->capture_default_str();
  s_dist->add_option("--lr", dist.lr, "student learning rate")->capture_default_str();
  s_dist->add_option("--disc-lr", dist.disc_lr, "discriminator learning rate")->capture_default_str();
  s_dist->add_option("--clip-norm", dist.clip_norm, "gradient clipping norm")->capture_default_str();
  s_dist->add_option("--ema-decay", dist.ema_decay, "student EMA decay")->capture_default_str();
  s_dist->add_option("--tangent-clip", dist.tangent_clip, "clip on the tangent term of the target")
      ->capture_default_str();
  s_dist->add_option("--cfg-mode", dist.cfg_mode, "guidance: standard, swapped or none")->capture_default_str();
  s_dist->add_option("--cfg-min", dist.cfg_min, "lowest sampled guidance scale")->capture_default_str();
  s_dist->add_option("--cfg-max", dist.cfg_max, "highest sampled guidance scale")->capture_default_str();
  s_dist->add_option("--cond-drop", dist.cond_drop, "condition dropout probability")->capture_default_str();
  s_dist->add_option("--embed-match-steps", dist.embed_match_steps, "time-embedding matching steps")
      ->capture_default_str();
  s_dist->add_option("--disc-heads", dist.disc_heads, "discriminator heads")->capture_default_str();
  s_dist->add_option("--disc-width", dist.disc_width, "discriminator head width")->capture_default_str();
  s_dist->add_option("--eval-samples", dist.eval_samples, "paired seeds for the endpoint check (0 = skip)")
      ->capture_default_str();
  s_dist->add_option("--eval-cfg-scale", dist.eval_cfg_scale, "teacher guidance scale for the endpoint check")
      ->capture_default_str();
  s_dist->add_option("--eval-steps", dist.eval_steps, "student Euler steps for the endpoint check")
      ->capture_default_str();
  s_dist->add_option("--teacher-tol", dist.teacher_tol, "teacher DOPRI5 tolerance for the endpoint check")
      ->capture_default_str();

  CLI::App* s_sample = app.add_subcommand("sample", "draw samples from a checkpoint");
  add_common(*s_sample, common);
  s_sample->add_option("--checkpoint", smp.checkpoint, "model checkpoint (required)")->default_str("\"\"");
  s_sample->add_option("--solver", smp.solver, "euler or dopri5")->capture_default_str();
  s_sample->add_option("--steps", smp.steps, "Euler steps")->capture_default_str();
  s_sample->add_option("--n", smp.n, "number of samples")->capture_default_str();
  s_sample->add_option("--class", smp.cls, "class id (-1 cycles through classes)")->capture_default_str();
  s_sample->add_option("--cfg-scale", smp.cfg_scale, "guidance scale for non-distilled models")->capture_default_str();
  s_sample->add_option("--cfg-mode", smp.cfg_mode, "standard or swapped")->capture_default_str();
  s_sample->add_option("--atol", smp.atol, "DOPRI5 absolute tolerance")->capture_default_str();
  s_sample->add_option("--rtol", smp.rtol, "DOPRI5 relative tolerance")->capture_default_str();
  s_sample->add_option("--max-nfe", smp.max_nfe, "DOPRI5 evaluation budget")->capture_default_str();
  s_sample->add_option("--renoise", smp.renoise, "comma-separated per-step renoise weights")->default_str("\"\"");
  s_sample->add_option("--renoise-mode", smp.renoise_mode, "remix or additive")->capture_default_str();
  s_sample->add_option("--use-ema", smp.use_ema, "sample with EMA weights when present")
      ->capture_default_str();
  s_sample->add_option("--output", smp.output, "samples CSV name inside the output directory")->capture_default_str();

  CLI::App* s_eval = app.add_subcommand("eval", "compute metrics from embeddings, logits, WAV directories or samples");
  add_common(*s_eval, common);
  s_eval->add_option("--ref-emb", ev.ref_emb, "reference embeddings CSV (FD)")->default_str("\"\"");
  s_eval->add_option("--gen-emb", ev.gen_emb, "generated embeddings CSV (FD)")->default_str("\"\"");
  s_eval->add_option("--ref-logits", ev.ref_logits, "reference classifier logits CSV (KL)")->default_str("\"\"");
  s_eval->add_option("--gen-logits", ev.gen_logits, "generated classifier logits CSV (KL)")->default_str("\"\"");
  s_eval->add_option("--text-emb", ev.text_emb, "text embeddings CSV (CLAP, recall)")->default_str("\"\"");
  s_eval->add_option("--audio-emb", ev.audio_emb, "audio embeddings CSV (CLAP, recall)")->default_str("\"\"");
  s_eval->add_option("--ref-dir", ev.ref_dir, "reference WAV directory")->default_str("\"\"");
  s_eval->add_option("--gen-dir", ev.gen_dir, "generated WAV directory, files paired by name")->default_str("\"\"");
  s_eval->add_option("--samples", ev.samples, "toy samples CSV for the 2-Wasserstein distance")->default_str("\"\"");
  s_eval->add_option("--ref-seed", ev.ref_seed, "seed of the toy ground-truth draw")->capture_default_str();
  s_eval->add_option("--jobs", ev.jobs, "worker threads for WAV pairs (0 = up to 4)")->capture_default_str();
  s_eval->add_option("--output", ev.output, "report CSV name inside the output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!common.config.empty()) detail::apply_config(*sub, common.config);
    if (sub == s_codec) return cmd_codec(common, codec, out, err);
    if (sub == s_train) return cmd_train_fm(common, train, out);
    if (sub == s_dist) return cmd_distill(common, dist, out);
    if (sub == s_sample) return cmd_sample(common, smp, out);
    return cmd_eval(common, ev, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv;
  argv.push_back("sfxflow");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace sfx::cli
