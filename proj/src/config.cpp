#include "bita/config.hpp"

#include <zlib.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace bita {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::size_t to_size(const std::string& v, const std::string& key) {
  try {
    return (std::size_t)std::stoull(v);
  } catch (...) {
    throw std::invalid_argument("config: key '" + key +
                                "' expects an integer, got '" + v + "'");
  }
}

double to_double(const std::string& v, const std::string& key) {
  try {
    return std::stod(v);
  } catch (...) {
    throw std::invalid_argument("config: key '" + key +
                                "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key +
                              "' expects true/false, got '" + v + "'");
}

}  // namespace

void ScheduleConfig::validate() const {
  if (lr_start < 0 || lr_start > lr_peak || lr_min > lr_peak) {
    throw std::invalid_argument(
        "schedule: need 0 <= lr_start <= lr_peak and lr_min <= lr_peak");
  }
  if (warmup_steps >= total_steps) {
    throw std::invalid_argument("schedule: warmup_steps must be < total_steps");
  }
}

RunConfig RunConfig::desk_defaults() {
  RunConfig cfg;
  cfg.stage1.schedule = {100, 1500, 1e-5, 1e-3, 1e-4};
  cfg.stage2.schedule = {100, 1500, 1e-5, 1e-3, 1e-4};
  cfg.finetune.schedule = {50, 400, 1e-6, 3e-4, 0.0};
  return cfg;
}

RunConfig parse_config_text(const std::string& text,
                            const std::string& origin) {
  RunConfig cfg = RunConfig::desk_defaults();
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      std::ostringstream os;
      os << origin << ":" << line_no << ": expected 'key = value'";
      throw std::invalid_argument(os.str());
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));

    auto& m = cfg.model;
    if (key == "hidden_dim") m.hidden_dim = to_size(val, key);
    else if (key == "num_layers") m.num_layers = to_size(val, key);
    else if (key == "num_heads") m.num_heads = to_size(val, key);
    else if (key == "num_prompts") m.num_prompts = to_size(val, key);
    else if (key == "image_feat_dim") m.image_feat_dim = to_size(val, key);
    else if (key == "image_patches") m.image_patches = to_size(val, key);
    else if (key == "image_size") m.image_size = to_size(val, key);
    else if (key == "lm_dim") m.lm_dim = to_size(val, key);
    else if (key == "lm_layers") m.lm_layers = to_size(val, key);
    else if (key == "lm_heads") m.lm_heads = to_size(val, key);
    else if (key == "img_layers") m.img_layers = to_size(val, key);
    else if (key == "img_heads") m.img_heads = to_size(val, key);
    else if (key == "max_text_len") m.max_text_len = to_size(val, key);
    else if (key == "seed") m.seed = (std::uint64_t)to_size(val, key);
    else if (key == "mixer") {
      if (val == "fourier") m.mixer = MixerKind::FourierMix;
      else if (val == "self-attn") m.mixer = MixerKind::SelfAttention;
      else {
        throw std::invalid_argument(
            "config: mixer must be 'fourier' or 'self-attn', got '" + val +
            "'");
      }
    }
    else if (key == "batch_size") cfg.batch_size = to_size(val, key);
    else if (key == "weight_decay") cfg.adamw.weight_decay = to_double(val, key);
    else if (key == "beta1") cfg.adamw.beta1 = to_double(val, key);
    else if (key == "beta2") cfg.adamw.beta2 = to_double(val, key);
    else if (key == "adam_eps") cfg.adamw.eps = to_double(val, key);
    else if (key == "grad_clip") cfg.grad_clip = to_double(val, key);
    else if (key == "augment") cfg.augment = to_bool(val, key);
    else if (key == "s1_steps") cfg.stage1.schedule.total_steps = to_size(val, key);
    else if (key == "s1_warmup") cfg.stage1.schedule.warmup_steps = to_size(val, key);
    else if (key == "s1_lr_start") cfg.stage1.schedule.lr_start = to_double(val, key);
    else if (key == "s1_lr_peak") cfg.stage1.schedule.lr_peak = to_double(val, key);
    else if (key == "s1_lr_min") cfg.stage1.schedule.lr_min = to_double(val, key);
    else if (key == "s2_steps") cfg.stage2.schedule.total_steps = to_size(val, key);
    else if (key == "s2_warmup") cfg.stage2.schedule.warmup_steps = to_size(val, key);
    else if (key == "s2_lr_start") cfg.stage2.schedule.lr_start = to_double(val, key);
    else if (key == "s2_lr_peak") cfg.stage2.schedule.lr_peak = to_double(val, key);
    else if (key == "s2_lr_min") cfg.stage2.schedule.lr_min = to_double(val, key);
    else if (key == "ft_steps") cfg.finetune.schedule.total_steps = to_size(val, key);
    else if (key == "ft_warmup") cfg.finetune.schedule.warmup_steps = to_size(val, key);
    else if (key == "ft_lr_start") cfg.finetune.schedule.lr_start = to_double(val, key);
    else if (key == "ft_lr_peak") cfg.finetune.schedule.lr_peak = to_double(val, key);
    else if (key == "ft_lr_min") cfg.finetune.schedule.lr_min = to_double(val, key);
    else {
      std::ostringstream os;
      os << origin << ":" << line_no << ": unknown key '" << key << "'";
      throw std::invalid_argument(os.str());
    }
  }
  if (const char* env = std::getenv("BITA_SEED")) {
    cfg.model.seed = (std::uint64_t)std::stoull(env);
  }
  cfg.stage1.schedule.validate();
  cfg.stage2.schedule.validate();
  cfg.finetune.schedule.validate();
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  const auto& m = cfg.model;
  os << "hidden_dim = " << m.hidden_dim << "\n"
     << "num_layers = " << m.num_layers << "\n"
     << "num_heads = " << m.num_heads << "\n"
     << "num_prompts = " << m.num_prompts << "\n"
     << "image_feat_dim = " << m.image_feat_dim << "\n"
     << "image_patches = " << m.image_patches << "\n"
     << "image_size = " << m.image_size << "\n"
     << "lm_dim = " << m.lm_dim << "\n"
     << "lm_layers = " << m.lm_layers << "\n"
     << "lm_heads = " << m.lm_heads << "\n"
     << "img_layers = " << m.img_layers << "\n"
     << "img_heads = " << m.img_heads << "\n"
     << "max_text_len = " << m.max_text_len << "\n"
     << "mixer = "
     << (m.mixer == MixerKind::FourierMix ? "fourier" : "self-attn") << "\n"
     << "seed = " << m.seed << "\n"
     << "batch_size = " << cfg.batch_size << "\n"
     << "weight_decay = " << cfg.adamw.weight_decay << "\n"
     << "beta1 = " << cfg.adamw.beta1 << "\n"
     << "beta2 = " << cfg.adamw.beta2 << "\n"
     << "adam_eps = " << cfg.adamw.eps << "\n"
     << "grad_clip = " << cfg.grad_clip << "\n"
     << "augment = " << (cfg.augment ? "true" : "false") << "\n";
  auto stage = [&](const char* p, const ScheduleConfig& s) {
    os << p << "_steps = " << s.total_steps << "\n"
       << p << "_warmup = " << s.warmup_steps << "\n"
       << p << "_lr_start = " << s.lr_start << "\n"
       << p << "_lr_peak = " << s.lr_peak << "\n"
       << p << "_lr_min = " << s.lr_min << "\n";
  };
  stage("s1", cfg.stage1.schedule);
  stage("s2", cfg.stage2.schedule);
  stage("ft", cfg.finetune.schedule);
  return os.str();
}

std::string config_hash(const RunConfig& cfg) {
  const std::string text = config_to_text(cfg);
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(text.data()),
                         (uInt)text.size());
  std::ostringstream os;
  os << std::hex << crc;
  return os.str();
}

}  // namespace bita
