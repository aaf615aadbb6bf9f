#include "morpheus/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "binary_io.hpp"
#include "json.hpp"
#include "morpheus/checkpoint.hpp"
#include "morpheus/errors.hpp"

namespace morpheus::trainer {

using corpus::DialogueSample;
using nn::Matrix;
using nn::Var;

namespace {

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed ^ (0xD1B54A32D192ED03ULL * (stream + 7));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

AdamOptions adam_options(const TrainingConfig& c) {
  AdamOptions o;
  o.learning_rate = c.learning_rate;
  o.warmup_steps = c.warmup_steps;
  o.clip_norm = c.clip_norm;
  return o;
}

void zero_all(const std::vector<nn::NamedParameter>& params) {
  for (const auto& p : params) p.var.node()->grad = Matrix();
}

void require_finite(double v, const char* component) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + component + " loss");
}

Var mean_of(const std::vector<Var>& terms) {
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = nn::add(acc, terms[i]);
  return nn::scale(acc, 1.0 / static_cast<double>(terms.size()));
}

void write_log(Morpheus& m, const nlohmann::json& record) {
  if (m.log) *m.log << record.dump() << '\n';
}

std::vector<std::size_t> epoch_order(Morpheus& m, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle(order, m.rng);
  return order;
}

std::vector<Var> encode_segments(const Morpheus& m, const std::vector<std::string>& segments) {
  std::vector<Var> out;
  out.reserve(segments.size());
  for (const auto& s : segments) out.push_back(neural::encode_persona_var(m.model, s));
  return out;
}

// Shared epoch loop: `batch_loss` builds the loss for one batch of samples.
template <typename BatchFn>
StageReport run_epochs(Morpheus& m, const std::vector<DialogueSample>& samples, int epochs,
                       BatchFn&& batch_loss) {
  StageReport report;
  const auto batch = static_cast<std::size_t>(m.config.batch_size);
  m.model.encoder.set_dropout_rng(&m.rng);
  m.model.decoder.set_dropout_rng(&m.rng);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto order = epoch_order(m, samples.size());
    double sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::vector<DialogueSample> items;
      for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) {
        items.push_back(samples[order[i]]);
      }
      const auto params = m.parameters();
      zero_all(params);
      const double loss = batch_loss(items, params);
      report.step_losses.push_back(loss);
      sum += loss;
      ++steps;
    }
    report.epoch_means.push_back(steps ? sum / static_cast<double>(steps) : 0.0);
  }
  m.model.encoder.set_dropout_rng(nullptr);
  m.model.decoder.set_dropout_rng(nullptr);
  return report;
}

}  // namespace

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::none: return "none";
    case Stage::role_aware: return "role_aware";
    case Stage::pc_init: return "pc_init";
    case Stage::joint: return "joint";
  }
  return "unknown";
}

Stage parse_stage(std::string_view name) {
  if (name == "none") return Stage::none;
  if (name == "role_aware") return Stage::role_aware;
  if (name == "pc_init") return Stage::pc_init;
  if (name == "joint") return Stage::joint;
  throw DataError("unknown stage tag: " + std::string(name));
}

Morpheus::Morpheus(TrainingConfig cfg, corpus::Vocab vocab)
    : config((cfg.validate(), cfg)),
      model(cfg.model_config(static_cast<int>(vocab.size())), std::move(vocab), cfg.seed),
      optimizer(adam_options(cfg)),
      rng(stream_seed(cfg.seed, 0)) {}

std::vector<nn::NamedParameter> Morpheus::parameters() const {
  std::vector<nn::NamedParameter> out;
  for (const nn::Module* mod : {static_cast<const nn::Module*>(&model.encoder),
                                static_cast<const nn::Module*>(&model.decoder),
                                static_cast<const nn::Module*>(&model.projection)}) {
    out.insert(out.end(), mod->parameters().begin(), mod->parameters().end());
  }
  if (codebook) out.push_back({"codebook.codes", codebook->var()});
  if (classifier) out.insert(out.end(), classifier->parameters().begin(), classifier->parameters().end());
  return out;
}

PreparedSample prepare_sample(const Morpheus& m, const DialogueSample& sample) {
  PreparedSample out;
  out.response = m.model.vocab.tokenize(sample.response);
  if (out.response.empty()) throw DataError("sample has an empty response");
  const auto max_len = static_cast<std::size_t>(m.config.max_sequence_length);
  if (out.response.size() + 2 > max_len) throw DataError("response longer than the model context");
  out.history = corpus::history_window(m.model.vocab, sample.history, sample.responder_id,
                                       max_len - out.response.size() - 1);
  out.segments = corpus::fit_segments(sample.persona_sentences, m.config.segments);
  return out;
}

void require_stage(const Morpheus& m, Stage needed, std::string_view action) {
  if (m.stage < needed) {
    std::string missing = "role-aware (stage 1) weights";
    if (needed == Stage::pc_init) missing = "persona codebook (stage 2)";
    if (needed == Stage::joint) missing = "jointly trained codebook and classifier (stage 3)";
    throw DataError(std::string(action) + " requires the " + missing + "; checkpoint stage is " +
                    to_string(m.stage));
  }
  if (needed >= Stage::pc_init && (!m.codebook || !m.classifier)) {
    throw DataError(std::string(action) + ": missing codebook or code classifier");
  }
}

StageReport stage1_role_awareness(Morpheus& m, const std::vector<DialogueSample>& samples) {
  if (m.stage > Stage::role_aware) throw UsageError("stage 1 cannot run after stage 2");
  if (samples.empty()) throw DataError("stage 1: empty training corpus");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].persona_sentences.empty()) {
      throw DataError("stage 1: sample " + std::to_string(i) + " has an empty persona");
    }
  }
  auto report = run_epochs(m, samples, m.config.stage1_epochs,
                           [&](const std::vector<DialogueSample>& batch,
                               const std::vector<nn::NamedParameter>& params) {
    std::vector<Var> losses;
    for (const auto& s : batch) {
      const auto prep = prepare_sample(m, s);
      const auto vectors = encode_segments(m, prep.segments);
      const auto prefix = neural::build_prefix(m.model, vectors);
      losses.push_back(neural::decode_nll_var(m.model, &prefix, prep.history, prep.response));
    }
    const Var loss = mean_of(losses);
    require_finite(loss.item(), "generation");
    nn::backward(loss);
    m.optimizer.step(params);
    write_log(m, {{"step", m.optimizer.steps()}, {"stage", "role_aware"}, {"generation", loss.item()}});
    return loss.item();
  });
  m.stage = Stage::role_aware;
  return report;
}

Matrix encode_training_segments(const Morpheus& m, const std::vector<DialogueSample>& samples) {
  nn::NoGradGuard guard;
  std::vector<std::vector<double>> rows;
  for (const auto& s : samples) {
    for (const auto& seg : s.persona_sentences) {
      if (seg.empty()) continue;
      rows.push_back(neural::encode_persona_var(m.model, seg).value().data);
    }
  }
  const std::size_t d = static_cast<std::size_t>(m.config.d);
  Matrix points(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), points.row(i).begin());
  return points;
}

const codebook::PersonaCodebook& stage2_init_codebook(Morpheus& m,
                                                       const std::vector<DialogueSample>& samples) {
  require_stage(m, Stage::role_aware, "stage 2");
  const auto n = static_cast<std::size_t>(m.config.codes);
  const auto d = static_cast<std::size_t>(m.config.d);
  const std::uint64_t seed = stream_seed(m.config.seed, 4);
  const Matrix points = encode_training_segments(m, samples);
  if (points.rows == 0 && m.config.init_strategy != codebook::InitStrategy::random) {
    throw DataError("stage 2: no persona segments to initialize from");
  }
  m.em_state.reset();
  switch (m.config.init_strategy) {
    case codebook::InitStrategy::random:
      m.codebook.emplace(codebook::init_random(n, d, seed));
      break;
    case codebook::InitStrategy::sequential: {
      std::vector<std::vector<double>> stream;
      for (std::size_t i = 0; i < points.rows; ++i) stream.emplace_back(points.row(i).begin(), points.row(i).end());
      m.codebook.emplace(codebook::init_sequential(stream, n, d, seed));
      break;
    }
    case codebook::InitStrategy::average: {
      std::size_t b = m.config.average_batch > 0 ? static_cast<std::size_t>(m.config.average_batch)
                                                 : std::max<std::size_t>(1, points.rows / n);
      std::vector<Matrix> batches;
      for (std::size_t start = 0; start < points.rows && batches.size() < n; start += b) {
        const std::size_t rows = std::min(b, points.rows - start);
        Matrix batch(rows, d);
        for (std::size_t i = 0; i < rows; ++i) {
          std::copy(points.row(start + i).begin(), points.row(start + i).end(), batch.row(i).begin());
        }
        batches.push_back(std::move(batch));
      }
      m.codebook.emplace(codebook::init_average(batches, n, d, seed));
      break;
    }
    case codebook::InitStrategy::em: {
      codebook::EMOptions options;
      options.max_iters = m.config.em_max_iters;
      options.tol = m.config.em_tol;
      auto result = codebook::em_fit(points, n, options, seed);
      m.codebook.emplace(std::move(result.codebook));
      m.em_state = std::move(result.state);
      break;
    }
  }
  m.classifier.emplace(d, n, static_cast<std::size_t>(m.config.segments), stream_seed(m.config.seed, 5));
  m.stage = Stage::pc_init;
  write_log(m, {{"step", m.optimizer.steps()},
                {"stage", "pc_init"},
                {"strategy", codebook::to_string(m.config.init_strategy)},
                {"segments", points.rows},
                {"em_iterations", m.em_state ? m.em_state->iterations : 0}});
  return *m.codebook;
}

Var joint_loss(Morpheus& m, std::span<const DialogueSample> batch, LossBreakdown& breakdown,
               bool record_usage) {
  require_stage(m, Stage::pc_init, "joint training");
  if (batch.empty()) throw UsageError("joint_loss: empty batch");
  const auto& cfg = m.config;
  auto& cb = *m.codebook;
  const Var codes = cb.var();

  std::vector<Var> gen, vq, cls, con;
  for (const auto& s : batch) {
    if (s.persona_sentences.empty()) throw DataError("joint training: sample has an empty persona");
    const auto prep = prepare_sample(m, s);
    const auto ps = encode_segments(m, prep.segments);
    std::vector<int> labels;
    std::vector<Var> prefix_vectors, vq_terms, con_terms;
    for (const auto& p : ps) {
      const auto match = record_usage ? codebook::nearest_code(p.value().data, cb)
                                      : codebook::find_nearest(p.value().data, cb.codes());
      labels.push_back(static_cast<int>(match.index));
      const Var e = nn::slice_rows(codes, match.index, 1);
      prefix_vectors.push_back(cfg.straight_through ? nn::add(nn::detach(nn::sub(e, p)), p) : p);
      vq_terms.push_back(codebook::vq_loss_var(p, e, cfg.beta));
      con_terms.push_back(codebook::contrastive_loss_var(p, codes, match.index, cfg.tau));
    }
    const auto prefix = neural::build_prefix(m.model, prefix_vectors);
    gen.push_back(neural::decode_nll_var(m.model, &prefix, prep.history, prep.response));
    vq.push_back(mean_of(vq_terms));
    con.push_back(mean_of(con_terms));
    const Var c = neural::encode_history_var(m.model, prep.history);
    cls.push_back(predictor::classifier_loss(*m.classifier, c, labels));
  }
  const Var lg = mean_of(gen), lv = mean_of(vq), ld = mean_of(cls), lc = mean_of(con);
  breakdown.generation = lg.item();
  breakdown.vq = lv.item();
  breakdown.classifier = ld.item();
  breakdown.contrastive = lc.item();
  require_finite(breakdown.generation, "generation (L_G)");
  require_finite(breakdown.vq, "vector-quantization (L_V)");
  require_finite(breakdown.classifier, "code-prediction (L_D)");
  require_finite(breakdown.contrastive, "contrastive (L_C)");
  breakdown.total = cfg.lambda_g * breakdown.generation + cfg.lambda_v * breakdown.vq +
                    cfg.lambda_d * breakdown.classifier + cfg.lambda_c * breakdown.contrastive;

  const bool alternating = cfg.joint_mode == JointMode::alternating;
  const bool generation_turn = m.optimizer.steps() % 2 == 0;
  std::vector<Var> terms;
  auto add_term = [&](const Var& v, double w, bool active) {
    if (w > 0.0 && active) terms.push_back(nn::scale(v, w));
  };
  add_term(lg, cfg.lambda_g, !alternating || generation_turn);
  add_term(lv, cfg.lambda_v, !alternating || !generation_turn);
  add_term(ld, cfg.lambda_d, !alternating || !generation_turn);
  add_term(lc, cfg.lambda_c, !alternating || !generation_turn);
  if (terms.empty()) return nn::scale(lg, 0.0);
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = nn::add(total, terms[i]);
  return total;
}

LossBreakdown joint_step(Morpheus& m, std::span<const DialogueSample> batch) {
  const auto params = m.parameters();
  zero_all(params);
  LossBreakdown b;
  const Var total = joint_loss(m, batch, b, true);
  nn::backward(total);
  m.optimizer.step(params);
  write_log(m, {{"step", m.optimizer.steps()},
                {"stage", "joint"},
                {"total", b.total},
                {"generation", b.generation},
                {"vq", b.vq},
                {"classifier", b.classifier},
                {"contrastive", b.contrastive}});
  return b;
}

StageReport stage3_joint(Morpheus& m, const std::vector<DialogueSample>& samples) {
  require_stage(m, Stage::pc_init, "stage 3");
  if (samples.empty()) throw DataError("stage 3: empty training corpus");
  auto report = run_epochs(m, samples, m.config.stage3_epochs,
                           [&](const std::vector<DialogueSample>& batch,
                               const std::vector<nn::NamedParameter>&) {
    return joint_step(m, batch).total;
  });
  m.stage = Stage::joint;
  return report;
}

StageReport train_unconditioned(Morpheus& m, const std::vector<DialogueSample>& samples) {
  if (samples.empty()) throw DataError("baseline: empty training corpus");
  auto report = run_epochs(m, samples, m.config.stage1_epochs + m.config.stage3_epochs,
                           [&](const std::vector<DialogueSample>& batch,
                               const std::vector<nn::NamedParameter>& params) {
    std::vector<Var> losses;
    for (const auto& s : batch) {
      const auto prep = prepare_sample(m, s);
      losses.push_back(neural::decode_nll_var(m.model, nullptr, prep.history, prep.response));
    }
    const Var loss = mean_of(losses);
    require_finite(loss.item(), "generation");
    nn::backward(loss);
    m.optimizer.step(params);
    write_log(m, {{"step", m.optimizer.steps()}, {"stage", "baseline"}, {"generation", loss.item()}});
    return loss.item();
  });
  m.stage = Stage::joint;
  return report;
}

PeftReport trainable_report(const Morpheus& m) {
  PeftReport r;
  for (const auto& p : m.parameters()) {
    r.total += p.var.value().size();
    if (p.var.requires_grad()) r.trainable += p.var.value().size();
  }
  if (m.codebook) r.codebook = m.codebook->size() * m.codebook->dim();
  if (m.classifier) r.classifier = m.classifier->parameter_count();
  r.projection = m.model.projection.parameter_count();
  r.fraction = r.total ? static_cast<double>(r.trainable) / static_cast<double>(r.total) : 0.0;
  return r;
}

PeftReport freeze_for_peft(Morpheus& m) {
  m.model.encoder.set_trainable(false);
  m.model.decoder.set_trainable(false);
  m.model.projection.set_trainable(true);
  if (m.classifier) m.classifier->set_trainable(true);
  if (m.codebook) {
    Var codes = m.codebook->var();
    codes.set_requires_grad(true);
  }
  return trainable_report(m);
}

PeftReport unfreeze(Morpheus& m) {
  for (const auto& p : m.parameters()) {
    Var v = p.var;
    v.set_requires_grad(true);
  }
  return trainable_report(m);
}

std::uint64_t parameter_digest(const Morpheus& m, std::string_view prefix) {
  std::string bytes;
  for (const auto& p : m.parameters()) {
    if (p.name.compare(0, prefix.size(), prefix) != 0) continue;
    bytes += p.name;
    for (double x : p.var.value().data) {
      const float f = static_cast<float>(x);
      char raw[sizeof f];
      std::memcpy(raw, &f, sizeof f);
      bytes.append(raw, sizeof f);
    }
  }
  return detail::fnv1a(bytes);
}

std::vector<int> code_labels(const Morpheus& m, const DialogueSample& sample) {
  require_stage(m, Stage::pc_init, "code_labels");
  nn::NoGradGuard guard;
  std::vector<int> labels;
  for (const auto& seg : corpus::fit_segments(sample.persona_sentences, m.config.segments)) {
    const Var p = neural::encode_persona_var(m.model, seg);
    labels.push_back(static_cast<int>(codebook::find_nearest(p.value().data, m.codebook->codes()).index));
  }
  return labels;
}

predictor::Accuracy held_out_accuracy(const Morpheus& m, const std::vector<DialogueSample>& samples) {
  require_stage(m, Stage::pc_init, "held_out_accuracy");
  std::vector<std::vector<predictor::CodePrediction>> preds;
  std::vector<std::vector<int>> labels;
  for (const auto& s : samples) {
    const auto prep = prepare_sample(m, s);
    nn::NoGradGuard guard;
    const Var c = neural::encode_history_var(m.model, prep.history);
    preds.push_back(predictor::predict_codes(*m.classifier, c.value().data));
    labels.push_back(code_labels(m, s));
  }
  return predictor::prediction_accuracy(preds, labels);
}

double mean_generation_loss(const Morpheus& m, const std::vector<DialogueSample>& samples,
                            bool persona_prefix) {
  if (samples.empty()) throw UsageError("mean_generation_loss: no samples");
  nn::NoGradGuard guard;
  double sum = 0.0;
  for (const auto& s : samples) {
    const auto prep = prepare_sample(m, s);
    if (persona_prefix) {
      const auto prefix = neural::build_prefix(m.model, encode_segments(m, prep.segments));
      sum += neural::decode_nll(m.model, &prefix, prep.history, prep.response);
    } else {
      sum += neural::decode_nll(m.model, nullptr, prep.history, prep.response);
    }
  }
  return sum / static_cast<double>(samples.size());
}

void apply_config(Morpheus& m, const TrainingConfig& config) {
  config.validate();
  const auto& a = m.config;
  if (a.codes != config.codes || a.segments != config.segments || a.d != config.d ||
      a.layers != config.layers || a.heads != config.heads ||
      a.max_sequence_length != config.max_sequence_length) {
    throw UsageError("cannot change model architecture settings of a resumed checkpoint");
  }
  if (a.unconditioned != config.unconditioned) {
    throw UsageError("cannot switch a resumed checkpoint between baseline and codebook training");
  }
  Adam fresh(adam_options(config));
  fresh.set_steps(m.optimizer.steps());
  fresh.first_moments() = std::move(m.optimizer.first_moments());
  fresh.second_moments() = std::move(m.optimizer.second_moments());
  m.optimizer = std::move(fresh);
  m.config = config;
}

// ------------------------------------------------------------ checkpoint

void save_checkpoint(const Morpheus& m, const std::filesystem::path& path) {
  using nlohmann::json;
  json meta;
  meta["format"] = "morpheus";
  meta["stage"] = to_string(m.stage);
  meta["step"] = m.optimizer.steps();
  json cfg = json::object();
  for (const auto& [k, v] : m.config.to_key_values()) cfg[k] = v;
  meta["config"] = cfg;
  meta["config_hash"] = m.config.hash();
  meta["vocab"] = m.model.vocab.tokens();
  meta["rng"] = save_rng(m.rng);
  if (m.codebook) {
    meta["codebook"] = {{"strategy", codebook::to_string(m.codebook->strategy())},
                        {"seed", m.codebook->seed()},
                        {"usage", m.codebook->usage_counts()}};
  }
  meta["classifier"] = m.classifier.has_value();

  CheckpointFile file;
  file.metadata = meta.dump();
  for (const auto& p : m.parameters()) file.tensors.push_back({p.name, p.var.value()});
  for (const auto& [name, mat] : m.optimizer.first_moments()) file.tensors.push_back({"adam.m." + name, mat});
  for (const auto& [name, mat] : m.optimizer.second_moments()) file.tensors.push_back({"adam.v." + name, mat});
  write_checkpoint_file(path, file);
}

Morpheus load_checkpoint(const std::filesystem::path& path) {
  using nlohmann::json;
  const CheckpointFile file = read_checkpoint_file(path);
  json meta;
  try {
    meta = json::parse(file.metadata);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  }
  try {
    TrainingConfig cfg;
    for (const auto& [k, v] : meta.at("config").items()) cfg.set(k, v.get<std::string>());
    cfg.validate();
    Morpheus m(cfg, corpus::Vocab::from_tokens(meta.at("vocab").get<std::vector<std::string>>()));
    m.stage = parse_stage(meta.at("stage").get<std::string>());

    auto restore = [&](const std::string& name, Var var) {
      const Matrix* t = file.find(name);
      if (!t) throw DataError("checkpoint: missing tensor '" + name + "'");
      if (!t->same_shape(var.value())) throw DataError("checkpoint: shape mismatch for '" + name + "'");
      var.mutable_value() = *t;
    };
    for (const auto& p : m.parameters()) restore(p.name, p.var);

    if (meta.contains("codebook")) {
      const auto& cb = meta["codebook"];
      const Matrix* codes = file.find("codebook.codes");
      if (!codes) throw DataError("checkpoint: missing tensor 'codebook.codes'");
      m.codebook.emplace(*codes, codebook::parse_init_strategy(cb.at("strategy").get<std::string>()),
                         cb.at("seed").get<std::uint64_t>());
      m.codebook->set_usage_counts(cb.at("usage").get<std::vector<std::uint64_t>>());
    }
    if (meta.value("classifier", false)) {
      m.classifier.emplace(static_cast<std::size_t>(cfg.d), static_cast<std::size_t>(cfg.codes),
                           static_cast<std::size_t>(cfg.segments), stream_seed(cfg.seed, 5));
      for (const auto& p : m.classifier->parameters()) restore(p.name, p.var);
    }
    for (const auto& t : file.tensors) {
      if (t.name.rfind("adam.m.", 0) == 0) m.optimizer.first_moments()[t.name.substr(7)] = t.value;
      if (t.name.rfind("adam.v.", 0) == 0) m.optimizer.second_moments()[t.name.substr(7)] = t.value;
    }
    m.optimizer.set_steps(meta.at("step").get<std::uint64_t>());
    m.rng = load_rng(meta.at("rng").get<std::string>());
    if (m.stage >= Stage::pc_init && !cfg.unconditioned && (!m.codebook || !m.classifier)) {
      throw DataError("checkpoint: stage " + to_string(m.stage) + " without codebook or classifier");
    }
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint metadata: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
}

}  // namespace morpheus::trainer
