#include "morpheus/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "morpheus/codebook.hpp"
#include "morpheus/corpus.hpp"
#include "morpheus/errors.hpp"
#include "morpheus/inference.hpp"
#include "morpheus/metrics.hpp"
#include "morpheus/trainer.hpp"

namespace morpheus::cli {

namespace fs = std::filesystem;
using trainer::Morpheus;
using trainer::Stage;

namespace {

struct Options {
  std::optional<std::uint64_t> seed;
  std::string data_dir;

  // synth
  std::string spec_file;
  std::string out_dir;

  // train
  std::string stage = "all";
  std::string config_file;
  std::string init;
  bool peft = false;
  bool baseline = false;
  std::string resume;
  std::string out;
  std::string data;
  std::string log;
  std::vector<std::string> sets;

  // eval / generate / chat / inspect
  std::string ckpt;
  std::string outputs;
  std::string idf_data;
  std::string input;
  std::string bot_id = "bot";
};

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MORPHEUS_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t pos = 0;
    const auto s = std::stoull(v, &pos);
    if (pos != std::string(v).size()) throw std::invalid_argument("trailing");
    return s;
  } catch (const std::exception&) {
    throw UsageError("MORPHEUS_SEED is not an unsigned integer: " + std::string(v));
  }
}

std::string data_dir(const Options& o) {
  if (!o.data_dir.empty()) return o.data_dir;
  const char* v = std::getenv("MORPHEUS_DATA_DIR");
  return (v && *v) ? v : "data";
}

std::optional<std::uint64_t> resolved_seed(const Options& o) { return o.seed ? o.seed : env_seed(); }

std::vector<corpus::DialogueSample> load_checked(const fs::path& path, std::ostream& err) {
  if (!fs::exists(path)) throw DataError("corpus file not found: " + path.string());
  corpus::LoadReport report;
  auto samples = corpus::load_corpus(path, std::nullopt, &report);
  if (report.rejected > 0) {
    err << "warning: " << report.rejected << " malformed record(s) skipped in " << path.string() << "\n";
    for (const auto& e : report.errors) err << "  " << e << "\n";
  }
  return samples;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

// ------------------------------------------------------------------ synth

int cmd_synth(const Options& o, std::ostream& out) {
  corpus::SyntheticSpec spec = corpus::SyntheticSpec::default_spec();
  if (!o.spec_file.empty()) {
    std::ifstream f(o.spec_file);
    if (!f) throw UsageError("cannot read spec file: " + o.spec_file);
    std::stringstream buf;
    buf << f.rdbuf();
    spec = corpus::SyntheticSpec::from_json(buf.str());
  }
  if (auto s = resolved_seed(o)) spec.seed = *s;
  const auto result = corpus::generate_synthetic(spec);

  const fs::path dir = o.out_dir.empty() ? fs::path(data_dir(o)) : fs::path(o.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw DataError("cannot create output directory: " + dir.string());
  corpus::write_corpus(dir / "train.jsonl", result.train);
  corpus::write_corpus(dir / "valid.jsonl", result.valid);
  corpus::write_corpus(dir / "test.jsonl", result.test);

  auto ids = [](const std::vector<corpus::SyntheticRole>& roles) {
    std::vector<std::string> v;
    for (const auto& r : roles) v.push_back(r.id);
    return v;
  };
  nlohmann::json manifest = {
      {"seed", spec.seed},
      {"roles", {{"train", ids(result.train_roles)}, {"valid", ids(result.valid_roles)}, {"test", ids(result.test_roles)}}},
      {"samples", {{"train", result.train.size()}, {"valid", result.valid.size()}, {"test", result.test.size()}}},
      {"spec", nlohmann::json::parse(spec.to_json())}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  out << "wrote " << result.train.size() << "/" << result.valid.size() << "/" << result.test.size()
      << " train/valid/test samples to " << dir.string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ train

trainer::TrainingConfig build_config(const Options& o, trainer::TrainingConfig base) {
  if (!o.config_file.empty()) base = trainer::load_config(o.config_file, base);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    base.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!o.init.empty()) base.init_strategy = codebook::parse_init_strategy(o.init);
  if (o.peft) base.peft = true;
  if (o.baseline) base.unconditioned = true;
  if (auto s = resolved_seed(o)) base.seed = *s;
  base.validate();
  return base;
}

void log_peft(Morpheus& m, std::ostream& out, std::ostream* log) {
  const auto r = trainer::freeze_for_peft(m);
  nlohmann::json rec = {{"stage", "peft"},
                        {"total_parameters", r.total},
                        {"trainable_parameters", r.trainable},
                        {"codebook_parameters", r.codebook},
                        {"classifier_parameters", r.classifier},
                        {"projection_parameters", r.projection},
                        {"trainable_fraction", r.fraction}};
  if (log) *log << rec.dump() << "\n";
  out << "peft: trainable " << r.trainable << " / " << r.total << " parameters (" << std::fixed
      << std::setprecision(4) << 100.0 * r.fraction << "%)\n";
  out.unsetf(std::ios::fixed);
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.out.empty()) throw UsageError("train: --out is required");
  const std::string stage = o.stage;
  if (stage != "1" && stage != "2" && stage != "3" && stage != "all") {
    throw UsageError("train: --stage must be 1, 2, 3 or all");
  }
  std::optional<Morpheus> m;
  if (!o.resume.empty()) {
    m.emplace(trainer::load_checkpoint(o.resume));
    trainer::apply_config(*m, build_config(o, m->config));
  } else if (stage == "2" || stage == "3") {
    throw UsageError("train: stage " + stage + " needs earlier stages; pass --resume with a checkpoint");
  }

  // Configuration problems are reported before any data is read.
  std::optional<trainer::TrainingConfig> fresh;
  if (!m) fresh = build_config(o, {});
  const fs::path data = o.data.empty() ? fs::path(data_dir(o)) / "train.jsonl" : fs::path(o.data);
  const auto samples = load_checked(data, err);
  if (!m) m.emplace(*fresh, corpus::Vocab::build(samples));

  const fs::path log_path = o.log.empty() ? fs::path(o.out + ".log.jsonl") : fs::path(o.log);
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw DataError("cannot open training log: " + log_path.string());
  m->log = &log;

  const bool run1 = stage == "1" || stage == "all";
  const bool run2 = stage == "2" || stage == "all";
  const bool run3 = stage == "3" || stage == "all";

  if (m->config.unconditioned) {
    if (run2 && !run1 && !run3) throw UsageError("train: the baseline has no codebook stage");
    if (m->stage == Stage::joint && !run3) throw UsageError("train: baseline checkpoint is already trained");
    const auto report = trainer::train_unconditioned(*m, samples);
    out << "baseline: " << report.step_losses.size() << " steps";
    if (!report.epoch_means.empty()) out << ", final epoch loss " << report.epoch_means.back();
    out << "\n";
  } else {
    if (run1) {
      const auto report = trainer::stage1_role_awareness(*m, samples);
      out << "stage 1: " << report.step_losses.size() << " steps";
      if (!report.epoch_means.empty()) out << ", final epoch loss " << report.epoch_means.back();
      out << "\n";
    }
    if (run2) {
      trainer::require_stage(*m, Stage::role_aware, "stage 2");
      if (m->stage >= Stage::pc_init && !run1) {
        throw UsageError("train: checkpoint already has a codebook; stage 2 would overwrite it");
      }
      const auto& cb = trainer::stage2_init_codebook(*m, samples);
      out << "stage 2: " << codebook::to_string(cb.strategy()) << " codebook, N=" << cb.size()
          << ", d=" << cb.dim();
      if (m->em_state) out << ", EM iterations " << m->em_state->iterations;
      out << "\n";
    }
    if (run3) {
      trainer::require_stage(*m, Stage::pc_init, "stage 3");
      std::uint64_t before = 0;
      if (m->config.peft) {
        log_peft(*m, out, &log);
        before = trainer::parameter_digest(*m, "decoder.");
      }
      const auto report = trainer::stage3_joint(*m, samples);
      out << "stage 3: " << report.step_losses.size() << " steps";
      if (!report.epoch_means.empty()) out << ", final epoch loss " << report.epoch_means.back();
      out << "\n";
      if (m->config.peft) {
        const std::uint64_t after = trainer::parameter_digest(*m, "decoder.");
        char buf[80];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(before));
        std::string b = buf;
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(after));
        log << nlohmann::json{{"stage", "peft"}, {"decoder_hash_before", b}, {"decoder_hash_after", buf}}.dump()
            << "\n";
        out << "peft: decoder hash before " << b << ", after " << buf << (b == buf ? " (unchanged)" : " (CHANGED)")
            << "\n";
      }
    }
  }
  m->log = nullptr;
  trainer::save_checkpoint(*m, o.out);
  out << "checkpoint: " << o.out << " (stage " << trainer::to_string(m->stage) << ")\n";
  return 0;
}

// ------------------------------------------------------------------- eval

Morpheus load_for_generation(const Options& o) {
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  if (!fs::exists(o.ckpt)) throw UsageError("checkpoint not found: " + o.ckpt);
  Morpheus m = trainer::load_checkpoint(o.ckpt);
  if (m.stage != Stage::joint) {
    throw DataError("checkpoint stage is " + trainer::to_string(m.stage) +
                    "; generation needs a jointly trained (stage 3) checkpoint");
  }
  return m;
}

std::uint64_t generation_seed(const Options& o, const Morpheus& m) {
  if (auto s = resolved_seed(o)) return *s;
  return m.config.seed;
}

// Per-sample seed: distinct streams, reproducible from the run seed.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t i) {
  return seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i) + 1;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const Morpheus m = load_for_generation(o);
  if (o.data.empty()) throw UsageError("eval: --data is required");
  const auto samples = load_checked(o.data, err);
  const std::uint64_t seed = generation_seed(o, m);
  const auto sampling = inference::sampling_from(m.config);

  std::vector<std::string> outputs, references, personas;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    // Generation only ever sees the persona-free context.
    const auto context = inference::context_of(samples[i]);
    outputs.push_back(inference::generate(m, context, sampling, sample_seed(seed, i)).text);
    references.push_back(samples[i].response);
  }
  // Personas are read afterwards, for the consistency metric only.
  for (const auto& s : samples) {
    std::string text;
    for (const auto& p : s.persona_sentences) text += (text.empty() ? "" : " ") + p;
    personas.push_back(text);
  }

  const auto idf_samples = o.idf_data.empty() ? samples : load_checked(o.idf_data, err);
  metrics::SuiteConfig suite;
  suite.self_bleu_cap = static_cast<std::size_t>(m.config.self_bleu_cap);
  suite.seed = seed;
  suite.model_config_hash = m.config.hash();
  const auto report = metrics::evaluate(outputs, references, personas, corpus::build_idf(idf_samples), suite);

  std::string text = report.format();
  if (!m.config.unconditioned) {
    // Code labels come from the personas too, so this also runs after generation.
    const auto acc = trainer::held_out_accuracy(m, samples);
    std::ostringstream line;
    line << std::fixed << std::setprecision(2) << "code_accuracy=" << 100.0 * acc.overall
         << " chance=" << 100.0 / m.config.codes << "\n";
    text += line.str();
  }
  if (!o.out.empty()) {
    write_text(o.out, text);
    std::string lines;
    for (const auto& s : outputs) lines += s + "\n";
    write_text(o.outputs.empty() ? o.out + ".outputs" : o.outputs, lines);
  }
  out << text;
  return 0;
}

// --------------------------------------------------------------- generate

int cmd_generate(const Options& o, std::ostream& out, std::ostream& err) {
  const Morpheus m = load_for_generation(o);
  if (o.input.empty()) throw UsageError("generate: --input is required");
  const auto samples = load_checked(o.input, err);
  const std::uint64_t seed = generation_seed(o, m);
  const auto sampling = inference::sampling_from(m.config);
  std::string lines;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    lines += inference::generate(m, inference::context_of(samples[i]), sampling, sample_seed(seed, i)).text;
    lines += "\n";
  }
  if (o.out.empty()) out << lines;
  else write_text(o.out, lines);
  return 0;
}

int cmd_chat(const Options& o, std::istream& in, std::ostream& out) {
  const Morpheus m = load_for_generation(o);
  inference::ChatOptions chat;
  chat.sampling = inference::sampling_from(m.config);
  chat.seed = generation_seed(o, m);
  chat.bot_id = o.bot_id;
  return inference::chat_repl(m, chat, in, out);
}

// ------------------------------------------------------------- inspect-pc

int cmd_inspect(const Options& o, std::ostream& out) {
  if (o.ckpt.empty()) throw UsageError("inspect-pc: --ckpt is required");
  if (!fs::exists(o.ckpt)) throw UsageError("checkpoint not found: " + o.ckpt);
  const Morpheus m = trainer::load_checkpoint(o.ckpt);
  if (!m.codebook) throw DataError("checkpoint (stage " + trainer::to_string(m.stage) + ") has no persona codebook");
  const auto& cb = *m.codebook;
  const auto& codes = cb.codes();
  std::uint64_t lookups = 0;
  for (auto c : cb.usage_counts()) lookups += c;

  std::vector<std::size_t> nn_index(cb.size(), 0);
  std::vector<double> nn_dist(cb.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < cb.size(); ++i) {
    for (std::size_t j = 0; j < cb.size(); ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < cb.dim(); ++c) s += (codes(i, c) - codes(j, c)) * (codes(i, c) - codes(j, c));
      if (std::sqrt(s) < nn_dist[i]) {
        nn_dist[i] = std::sqrt(s);
        nn_index[i] = j;
      }
    }
  }
  double min_d = std::numeric_limits<double>::infinity(), max_d = 0.0, mean_d = 0.0;
  if (cb.size() > 1) {
    for (double d : nn_dist) {
      min_d = std::min(min_d, d);
      max_d = std::max(max_d, d);
      mean_d += d / static_cast<double>(cb.size());
    }
  }

  out << std::setprecision(6);
  out << "N=" << cb.size() << "\n";
  out << "d=" << cb.dim() << "\n";
  out << "init_strategy=" << codebook::to_string(cb.strategy()) << "\n";
  out << "stage=" << trainer::to_string(m.stage) << "\n";
  out << "lookups=" << lookups << "\n";
  if (lookups == 0) {
    out << "usage_perplexity=no lookups yet\n";
  } else {
    out << "usage_perplexity=" << codebook::utilization(cb).perplexity << "\n";
  }
  if (cb.size() > 1) {
    out << "nn_distance_min=" << min_d << "\nnn_distance_mean=" << mean_d << "\nnn_distance_max=" << max_d << "\n";
  }
  out << "\n" << std::left << std::setw(8) << "code" << std::setw(10) << "usage" << std::setw(10) << "nearest"
      << "distance\n";
  for (std::size_t k = 0; k < cb.size(); ++k) {
    out << std::setw(8) << k << std::setw(10) << cb.usage_counts()[k];
    if (cb.size() > 1) out << std::setw(10) << nn_index[k] << nn_dist[k];
    else out << std::setw(10) << "-" << "-";
    out << "\n";
  }
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Latent persona-codebook dialogue generation", "morpheus"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed_value = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", seed_value, "Random seed (overrides MORPHEUS_SEED)");
  };

  auto* synth = app.add_subcommand("synth", "Write a synthetic persona-dialogue corpus");
  synth->add_option("--spec", o.spec_file, "Synthetic spec (JSON); default spec if omitted");
  synth->add_option("--out", o.out_dir, "Output directory (default $MORPHEUS_DATA_DIR or ./data)");
  add_common(synth);

  auto* train = app.add_subcommand("train", "Run training stages");
  train->add_option("--stage", o.stage, "1, 2, 3 or all")->default_val("all");
  train->add_option("--config", o.config_file, "key=value configuration file");
  train->add_option("--set", o.sets, "Override one configuration key (key=value); repeatable");
  train->add_option("--init", o.init, "Codebook init: random, sequential, average, em");
  train->add_flag("--peft", o.peft, "Freeze encoder and decoder during joint training");
  train->add_flag("--baseline", o.baseline, "Train the persona-masked unconditioned baseline");
  train->add_option("--resume", o.resume, "Checkpoint to continue from");
  train->add_option("--out", o.out, "Output checkpoint path")->required();
  train->add_option("--data", o.data, "Training corpus (default $MORPHEUS_DATA_DIR/train.jsonl)");
  train->add_option("--log", o.log, "Training log (default <out>.log.jsonl)");
  add_common(train);

  auto* eval = app.add_subcommand("eval", "Persona-masked generation and metric report");
  eval->add_option("--ckpt", o.ckpt, "Stage-3 checkpoint");
  eval->add_option("--data", o.data, "Evaluation corpus");
  eval->add_option("--out", o.out, "Report path (outputs go to <out>.outputs)");
  eval->add_option("--outputs", o.outputs, "Generated responses path");
  eval->add_option("--idf-data", o.idf_data, "Corpus for IDF weights (default: the evaluation corpus)");
  add_common(eval);

  auto* gen = app.add_subcommand("generate", "Generate one response per history record");
  gen->add_option("--ckpt", o.ckpt, "Stage-3 checkpoint");
  gen->add_option("--input", o.input, "Histories in corpus format");
  gen->add_option("--out", o.out, "Output file (default stdout)");
  add_common(gen);

  auto* chat = app.add_subcommand("chat", "Interactive chat (/codes, /reset, /quit)");
  chat->add_option("--ckpt", o.ckpt, "Stage-3 checkpoint");
  chat->add_option("--bot-id", o.bot_id, "Speaker id of the model");
  add_common(chat);

  auto* inspect = app.add_subcommand("inspect-pc", "Describe the persona codebook of a checkpoint");
  inspect->add_option("--ckpt", o.ckpt, "Checkpoint with a codebook");
  add_common(inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    for (auto* sub : app.get_subcommands()) {
      if (sub->count("--seed") > 0) o.seed = seed_value;
    }
    if (synth->parsed()) return cmd_synth(o, out);
    if (train->parsed()) return cmd_train(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
    if (gen->parsed()) return cmd_generate(o, out, err);
    if (chat->parsed()) return cmd_chat(o, in, out);
    if (inspect->parsed()) return cmd_inspect(o, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cin, std::cout, std::cerr); }

}  // namespace morpheus::cli
