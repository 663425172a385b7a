#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "bita/checkpoint.hpp"
#include "bita/config.hpp"
#include "bita/data.hpp"
#include "bita/model.hpp"
#include "bita/objectives.hpp"

namespace bita {

struct OptimState {
  std::unordered_map<std::string, std::vector<double>> m;
  std::unordered_map<std::string, std::vector<double>> v;
  std::int64_t t = 0;
};

// One decoupled-weight-decay Adam step over the given parameters, reading the
// gradients accumulated in their grad buffers and zeroing them afterwards.
// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
void adamw_step(std::vector<NamedTensor>& params, OptimState& state, double lr,
                const AdamWConfig& cfg);

// Linear warmup from lr_start to lr_peak, then cosine decay to lr_min.
// Anchor steps (0, warmup, total) return their configured rates exactly.
double lr_at(std::size_t step, const ScheduleConfig& cfg);

void save_checkpoint(const IftModel& model, const OptimState& optim,
                     const std::string& stage,
                     const std::vector<std::string>& vocab_tokens,
                     const std::string& path);

struct LoadedModel {
  std::unique_ptr<IftModel> model;
  OptimState optim;
  Vocabulary vocab;
  std::string stage;
};

// Rebuilds a model from a checkpoint; cfg supplies the architecture and must
// match the stored tensor shapes (mismatches are reported per tensor name).
LoadedModel load_checkpoint(const std::string& path, ModelConfig cfg);

struct TrainResult {
  std::unique_ptr<IftModel> model;
  OptimState optim;
  Vocabulary vocab;
  std::vector<double> step_losses;
};

// Stage 1: image-text contrastive alignment of the IFT against the frozen
// encoder. Builds the vocabulary from the dataset captions.
TrainResult run_stage1(const RunConfig& cfg,
                       const std::vector<ImageTextPair>& dataset,
                       bool log_steps = true);

// Stage 2: prefix-causal caption modeling through the frozen LM, starting
// from a stage-1 checkpoint (or from scratch for the ablation).
TrainResult run_stage2(const RunConfig& cfg,
                       const std::vector<ImageTextPair>& dataset,
                       const std::string& s1_checkpoint, bool from_scratch,
                       bool log_steps = true);

// Same loop as stage 2 under the fine-tuning schedule.
TrainResult finetune(const RunConfig& cfg,
                     const std::vector<ImageTextPair>& dataset,
                     const std::string& s2_checkpoint, bool log_steps = true);

// Shared inner loops, exposed so callers can train an already-loaded model
// (the drivers above wrap these).
std::vector<double> train_stage1_loop(IftModel& model, OptimState& optim,
                                      const std::vector<ImageTextPair>& data,
                                      const Vocabulary& vocab,
                                      const RunConfig& cfg, bool log_steps);
std::vector<double> train_pclm_loop(IftModel& model, OptimState& optim,
                                    const std::vector<ImageTextPair>& data,
                                    const Vocabulary& vocab,
                                    const RunConfig& cfg,
                                    const ScheduleConfig& schedule,
                                    Stage stage, bool log_steps);

// Batch losses used by the loops and by the gradient audits.
Tensor stage1_batch_loss(const IftModel& model, const Batch& batch,
                         const RunConfig& cfg, std::uint64_t step_seed);
Tensor stage2_batch_loss(const IftModel& model, const Batch& batch,
                         const RunConfig& cfg, std::uint64_t step_seed);

}  // namespace bita
