#include "bita/train.hpp"

#include <cmath>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "bita/rng.hpp"

namespace bita {

namespace {

// deterministic per-(run, stage, step) stream for augmentation choices
std::uint64_t step_seed(std::uint64_t run_seed, std::uint64_t stage_tag,
                        std::uint64_t step) {
  return derive_seed(run_seed, (stage_tag << 32) ^ step);
}

void clip_gradients(std::vector<NamedTensor>& params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (auto& nt : params) {
    nt.tensor->ensure_grad();
    for (double g : nt.tensor->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double s = max_norm / norm;
  for (auto& nt : params) {
    for (double& g : nt.tensor->grad) g *= s;
  }
}

std::vector<std::string> all_captions(const std::vector<ImageTextPair>& data) {
  std::vector<std::string> out;
  for (const auto& p : data) {
    for (const auto& c : p.captions) out.push_back(c);
  }
  return out;
}

Checkpoint snapshot(const IftModel& model, const OptimState& optim,
                    const std::string& stage,
                    const std::vector<std::string>& vocab_tokens) {
  Checkpoint ckpt;
  ckpt.stage = stage;
  ckpt.vocab_tokens = vocab_tokens;
  ckpt.optim_step = optim.t;
  for (const auto& nt : model.parameters()) {
    ckpt.put(nt.name, {nt.tensor->rows, nt.tensor->cols}, nt.tensor->value);
  }
  for (const auto& [name, m] : optim.m) {
    ckpt.put("optim.m." + name, {m.size()}, m);
  }
  for (const auto& [name, v] : optim.v) {
    ckpt.put("optim.v." + name, {v.size()}, v);
  }
  return ckpt;
}

void restore_into(IftModel& model, OptimState& optim, const Checkpoint& ckpt) {
  for (const auto& nt : model.parameters()) {
    nt.tensor->value = ckpt.get(nt.name, {nt.tensor->rows, nt.tensor->cols});
  }
  optim = OptimState{};
  optim.t = ckpt.optim_step;
  for (const auto& nt : model.parameters()) {
    const std::string mk = "optim.m." + nt.name;
    const std::string vk = "optim.v." + nt.name;
    if (ckpt.has(mk)) {
      optim.m[nt.name] = ckpt.get(mk, {nt.tensor->size()});
      optim.v[nt.name] = ckpt.get(vk, {nt.tensor->size()});
    }
  }
}

void guard_divergence(double loss, std::size_t step, const char* stage) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << stage << ": loss diverged (non-finite) at step " << step;
    throw std::runtime_error(os.str());
  }
}

}  // namespace

void adamw_step(std::vector<NamedTensor>& params, OptimState& state, double lr,
                const AdamWConfig& cfg) {
  if (lr < 0.0) throw std::invalid_argument("adamw_step: lr must be >= 0");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, (double)state.t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, (double)state.t);
  for (auto& nt : params) {
    TensorNode& p = *nt.tensor;
    p.ensure_grad();
    auto& m = state.m[nt.name];
    auto& v = state.v[nt.name];
    if (m.size() != p.size()) {
      if (!m.empty()) {
        throw std::invalid_argument("adamw_step: state shape mismatch for '" +
                                    nt.name + "'");
      }
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                          cfg.weight_decay * p.value[i]);
    }
    p.zero_grad();
  }
}

double lr_at(std::size_t step, const ScheduleConfig& cfg) {
  if (step > cfg.total_steps) {
    std::ostringstream os;
    os << "lr_at: step " << step << " outside schedule of "
       << cfg.total_steps << " steps";
    throw std::invalid_argument(os.str());
  }
  if (step == 0 && cfg.warmup_steps > 0) return cfg.lr_start;
  if (step < cfg.warmup_steps) {
    return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (double)step /
                              (double)cfg.warmup_steps;
  }
  if (step == cfg.warmup_steps) return cfg.lr_peak;
  if (step == cfg.total_steps) return cfg.lr_min;
  const double p = (double)(step - cfg.warmup_steps) /
                   (double)(cfg.total_steps - cfg.warmup_steps);
  return cfg.lr_min +
         (cfg.lr_peak - cfg.lr_min) * (1.0 + std::cos(M_PI * p)) / 2.0;
}

Tensor stage1_batch_loss(const IftModel& model, const Batch& batch,
                         const RunConfig& cfg, std::uint64_t seed) {
  ItcBatch itc;
  for (std::size_t i = 0; i < batch.images.size(); ++i) {
    Image img = *batch.images[i];
    if (cfg.augment) img = augment(img, derive_seed(seed, i));
    Tensor feats = model.image_encode(img);
    itc.prompt_outputs.push_back(model.ift_image_branch(feats));
    Tensor text = model.ift_text_branch(batch.text_ids[i]);
    itc.cls_outputs.push_back(slice_rows(text, 0, 1));
  }
  ItcConfig icfg;  // temperature 0.07, max-over-prompts
  return itc_loss(itc, icfg).loss;
}

Tensor stage2_batch_loss(const IftModel& model, const Batch& batch,
                         const RunConfig& cfg, std::uint64_t seed) {
  const std::size_t prompts = model.config().num_prompts;
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < batch.images.size(); ++i) {
    Image img = *batch.images[i];
    if (cfg.augment) img = augment(img, derive_seed(seed, i));
    Tensor feats = model.image_encode(img);
    Tensor prefix = model.project_to_lm(model.ift_image_branch(feats));
    const auto& ids = batch.lm_inputs[i];
    PrefixCausalMask mask = build_prefix_causal_mask(prompts, ids.size());
    Tensor logits = model.lm_forward(prefix, ids, mask);
    losses.push_back(
        pclm_loss(logits, batch.lm_targets[i], prompts, Vocabulary::kPad));
  }
  Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, 1.0 / (double)losses.size());
}

std::vector<double> train_stage1_loop(IftModel& model, OptimState& optim,
                                      const std::vector<ImageTextPair>& data,
                                      const Vocabulary& vocab,
                                      const RunConfig& cfg, bool log_steps) {
  auto params = model.trainable_params(Stage::Stage1);
  const auto& sched = cfg.stage1.schedule;
  std::vector<double> losses;
  std::size_t step = 0, epoch = 0;
  while (step < sched.total_steps) {
    const auto batches =
        make_batches(data, vocab, cfg.batch_size,
                     derive_seed(model.config().seed, 500 + epoch),
                     model.config().max_text_len);
    for (const auto& batch : batches) {
      if (step >= sched.total_steps) break;
      Tensor loss = stage1_batch_loss(model, batch, cfg,
                                      step_seed(model.config().seed, 1, step));
      guard_divergence(loss->value[0], step, "stage1");
      backward(loss);
      clip_gradients(params, cfg.grad_clip);
      adamw_step(params, optim, lr_at(step, sched), cfg.adamw);
      losses.push_back(loss->value[0]);
      if (log_steps) {
        std::cerr << "stage=s1 step=" << step << " lr=" << lr_at(step, sched)
                  << " loss=" << loss->value[0] << "\n";
      }
      ++step;
    }
    ++epoch;
  }
  return losses;
}

std::vector<double> train_pclm_loop(IftModel& model, OptimState& optim,
                                    const std::vector<ImageTextPair>& data,
                                    const Vocabulary& vocab,
                                    const RunConfig& cfg,
                                    const ScheduleConfig& sched, Stage stage,
                                    bool log_steps) {
  auto params = model.trainable_params(stage);
  const char* tag = stage == Stage::Finetune ? "ft" : "s2";
  std::vector<double> losses;
  std::size_t step = 0, epoch = 0;
  while (step < sched.total_steps) {
    const auto batches =
        make_batches(data, vocab, cfg.batch_size,
                     derive_seed(model.config().seed, 9000 + epoch),
                     model.config().max_text_len);
    for (const auto& batch : batches) {
      if (step >= sched.total_steps) break;
      Tensor loss = stage2_batch_loss(model, batch, cfg,
                                      step_seed(model.config().seed, 2, step));
      guard_divergence(loss->value[0], step, tag);
      backward(loss);
      clip_gradients(params, cfg.grad_clip);
      adamw_step(params, optim, lr_at(step, sched), cfg.adamw);
      losses.push_back(loss->value[0]);
      if (log_steps) {
        std::cerr << "stage=" << tag << " step=" << step
                  << " lr=" << lr_at(step, sched) << " loss=" << loss->value[0]
                  << "\n";
      }
      ++step;
    }
    ++epoch;
  }
  return losses;
}

void save_checkpoint(const IftModel& model, const OptimState& optim,
                     const std::string& stage,
                     const std::vector<std::string>& vocab_tokens,
                     const std::string& path) {
  save_checkpoint_file(snapshot(model, optim, stage, vocab_tokens), path);
}

LoadedModel load_checkpoint(const std::string& path, ModelConfig cfg) {
  Checkpoint ckpt = load_checkpoint_file(path);
  LoadedModel out;
  out.vocab = Vocabulary::from_tokens(ckpt.vocab_tokens);
  cfg.vocab_size = out.vocab.size();
  out.model = std::make_unique<IftModel>(cfg);
  restore_into(*out.model, out.optim, ckpt);
  out.stage = ckpt.stage;
  return out;
}

TrainResult run_stage1(const RunConfig& cfg,
                       const std::vector<ImageTextPair>& dataset,
                       bool log_steps) {
  if (dataset.size() < cfg.batch_size) {
    throw std::invalid_argument("run_stage1: dataset smaller than batch size");
  }
  TrainResult res;
  res.vocab = build_vocab(all_captions(dataset));
  ModelConfig mc = cfg.model;
  mc.vocab_size = res.vocab.size();
  res.model = std::make_unique<IftModel>(mc);
  res.step_losses = train_stage1_loop(*res.model, res.optim, dataset,
                                      res.vocab, cfg, log_steps);
  return res;
}

TrainResult run_stage2(const RunConfig& cfg,
                       const std::vector<ImageTextPair>& dataset,
                       const std::string& s1_checkpoint, bool from_scratch,
                       bool log_steps) {
  TrainResult res;
  if (from_scratch) {
    res.vocab = build_vocab(all_captions(dataset));
    ModelConfig mc = cfg.model;
    mc.vocab_size = res.vocab.size();
    res.model = std::make_unique<IftModel>(mc);
  } else {
    LoadedModel loaded = load_checkpoint(s1_checkpoint, cfg.model);
    res.vocab = std::move(loaded.vocab);
    res.model = std::move(loaded.model);
    // fresh optimizer: the stage-2 trainable set differs from stage 1
  }
  res.step_losses =
      train_pclm_loop(*res.model, res.optim, dataset, res.vocab, cfg,
                      cfg.stage2.schedule, Stage::Stage2, log_steps);
  return res;
}

TrainResult finetune(const RunConfig& cfg,
                     const std::vector<ImageTextPair>& dataset,
                     const std::string& s2_checkpoint, bool log_steps) {
  LoadedModel loaded = load_checkpoint(s2_checkpoint, cfg.model);
  TrainResult res;
  res.vocab = std::move(loaded.vocab);
  res.model = std::move(loaded.model);
  res.optim = std::move(loaded.optim);
  res.step_losses =
      train_pclm_loop(*res.model, res.optim, dataset, res.vocab, cfg,
                      cfg.finetune.schedule, Stage::Finetune, log_steps);
  return res;
}

}  // namespace bita
