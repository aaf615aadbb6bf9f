#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "morpheus/codebook.hpp"
#include "morpheus/config.hpp"
#include "morpheus/corpus.hpp"
#include "morpheus/neural.hpp"
#include "morpheus/optimizer.hpp"
#include "morpheus/predictor.hpp"

namespace morpheus::trainer {

enum class Stage { none, role_aware, pc_init, joint };

std::string to_string(Stage stage);
Stage parse_stage(std::string_view name);

// Everything a run trains or restores: text networks, codebook, classifier,
// optimizer state and the training random stream.
struct Morpheus {
  TrainingConfig config;
  neural::DialogueModel model;
  std::optional<codebook::PersonaCodebook> codebook;
  std::optional<predictor::CodeClassifier> classifier;
  Adam optimizer;
  Stage stage = Stage::none;
  Rng rng;
  // Diagnostics of the last EM initialization (not checkpointed).
  std::optional<codebook::EMState> em_state;
  // Training log sink: one JSON object per optimizer step.
  std::ostream* log = nullptr;

  Morpheus(TrainingConfig config, corpus::Vocab vocab);
  Morpheus(Morpheus&&) = default;

  // Encoder, decoder, projection, then codebook and classifier when present.
  std::vector<nn::NamedParameter> parameters() const;
};

// Token ids the training losses consume.
struct PreparedSample {
  std::vector<corpus::TokenId> history;
  std::vector<corpus::TokenId> response;
  std::vector<std::string> segments;  // exactly M, empty = padding
};

PreparedSample prepare_sample(const Morpheus& m, const corpus::DialogueSample& sample);

struct StageReport {
  std::vector<double> step_losses;
  std::vector<double> epoch_means;
};

struct LossBreakdown {
  double generation = 0.0;
  double vq = 0.0;
  double classifier = 0.0;
  double contrastive = 0.0;
  double total = 0.0;
};

// Stage 1: generation loss with the prefix built from the encoded persona
// segments. Every sample needs a non-empty persona.
StageReport stage1_role_awareness(Morpheus& m, const std::vector<corpus::DialogueSample>& samples);

// Every non-empty persona segment of the training set, encoded, in corpus order.
nn::Matrix encode_training_segments(const Morpheus& m,
                                    const std::vector<corpus::DialogueSample>& samples);

// Stage 2: builds the codebook with config.init_strategy and a fresh classifier.
const codebook::PersonaCodebook& stage2_init_codebook(
    Morpheus& m, const std::vector<corpus::DialogueSample>& samples);

// Joint objective on one batch without updating anything. The returned
// variable is the weighted total; `breakdown` receives batch means.
nn::Var joint_loss(Morpheus& m, std::span<const corpus::DialogueSample> batch,
                   LossBreakdown& breakdown, bool record_usage = false);

// One optimizer step of the joint objective. A non-finite component aborts
// the step with NumericalError naming it.
LossBreakdown joint_step(Morpheus& m, std::span<const corpus::DialogueSample> batch);

StageReport stage3_joint(Morpheus& m, const std::vector<corpus::DialogueSample>& samples);

// Persona-masked baseline: generation loss only, no prefix. Runs
// stage1_epochs + stage3_epochs epochs and tags the result as joint.
StageReport train_unconditioned(Morpheus& m, const std::vector<corpus::DialogueSample>& samples);

struct PeftReport {
  std::size_t total = 0;
  std::size_t trainable = 0;
  std::size_t codebook = 0;
  std::size_t classifier = 0;
  std::size_t projection = 0;
  double fraction = 0.0;
};

// Freezes encoder and decoder; codebook, classifier and projections stay trainable.
PeftReport freeze_for_peft(Morpheus& m);
PeftReport unfreeze(Morpheus& m);
PeftReport trainable_report(const Morpheus& m);

// FNV-1a over the float bytes of parameters whose name starts with `prefix`.
std::uint64_t parameter_digest(const Morpheus& m, std::string_view prefix);

// Nearest-code indices of the sample's M fitted persona segments.
std::vector<int> code_labels(const Morpheus& m, const corpus::DialogueSample& sample);
predictor::Accuracy held_out_accuracy(const Morpheus& m,
                                      const std::vector<corpus::DialogueSample>& samples);
double mean_generation_loss(const Morpheus& m, const std::vector<corpus::DialogueSample>& samples,
                            bool persona_prefix);

// Replaces the training-side settings of a resumed run. Architecture keys
// (codes, segments, d, layers, heads, max_sequence_length) must not change.
void apply_config(Morpheus& m, const TrainingConfig& config);

void save_checkpoint(const Morpheus& m, const std::filesystem::path& path);
Morpheus load_checkpoint(const std::filesystem::path& path);

// Throws DataError naming the missing component when `m` has not reached `needed`.
void require_stage(const Morpheus& m, Stage needed, std::string_view action);

}  // namespace morpheus::trainer
