#include "bita/textproc.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace bita {

namespace {

const std::vector<std::string> kReserved = {"<pad>", "<cls>", "<bos>", "<eos>",
                                            "<unk>"};

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& toks, std::size_t n) {
  NgramCounts counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    counts[Ngram(toks.begin() + i, toks.begin() + i + n)] += 1;
  }
  return counts;
}

std::size_t lcs_length(const std::vector<std::string>& a,
                       const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                    : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char u = (unsigned char)ch;
    if (std::isalnum(u)) {
      cur.push_back((char)std::tolower(u));
    } else if (std::isspace(u)) {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    }
    // punctuation dropped
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

int Vocabulary::encode_token(const std::string& tok) const {
  auto it = index.find(tok);
  return it == index.end() ? kUnk : it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(encode_token(tok));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id <= kUnk && id != kUnk) continue;  // structural ids dropped
    if (id < 0 || (std::size_t)id >= tokens.size()) {
      std::ostringstream os;
      os << "Vocabulary::decode: id " << id << " out of range";
      throw std::out_of_range(os.str());
    }
    if (!out.empty()) out.push_back(' ');
    out += tokens[(std::size_t)id];
  }
  return out;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens = std::move(tokens);
  for (std::size_t i = 0; i < kReserved.size(); ++i) {
    if (v.tokens.size() <= i || v.tokens[i] != kReserved[i]) {
      throw std::invalid_argument(
          "Vocabulary: reserved token table corrupted");
    }
  }
  for (std::size_t i = 0; i < v.tokens.size(); ++i) {
    v.index[v.tokens[i]] = (int)i;
  }
  return v;
}

Vocabulary build_vocab(const std::vector<std::string>& corpus) {
  if (corpus.empty()) {
    throw std::invalid_argument("build_vocab: empty corpus");
  }
  std::map<std::string, std::size_t> freq;
  for (const auto& line : corpus) {
    for (const auto& tok : tokenize(line)) freq[tok] += 1;
  }
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(),
                                                         freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> toks = kReserved;
  for (auto& [tok, _] : items) toks.push_back(tok);
  return Vocabulary::from_tokens(std::move(toks));
}

std::vector<Caption> beam_search_generic(const StepLogits& step,
                                         std::size_t vocab_size, int bos_id,
                                         int eos_id,
                                         const std::vector<int>& banned,
                                         std::size_t beam_width,
                                         std::size_t max_len) {
  if (beam_width < 1) {
    throw std::invalid_argument("beam_search: beam_width must be >= 1");
  }
  if (max_len < 1) {
    throw std::invalid_argument("beam_search: max_len must be >= 1");
  }
  struct Beam {
    std::vector<int> tokens;  // starts with bos
    double logp = 0.0;
  };
  auto normalized = [](const Beam& b) {
    const double n = (double)(b.tokens.size() - 1);  // generated tokens
    return b.logp / std::max(1.0, n);
  };
  std::vector<std::uint8_t> is_banned(vocab_size, 0);
  for (int id : banned) {
    if (id >= 0 && (std::size_t)id < vocab_size) is_banned[(std::size_t)id] = 1;
  }

  std::vector<Beam> live = {Beam{{bos_id}, 0.0}};
  std::vector<Beam> finished;
  for (std::size_t pos = 0; pos < max_len && !live.empty(); ++pos) {
    std::vector<Beam> candidates;
    for (const auto& b : live) {
      std::vector<double> logits = step(b.tokens);
      if (logits.size() != vocab_size) {
        throw std::invalid_argument(
            "beam_search: step function returned wrong logit count");
      }
      // log-softmax
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t v = 0; v < vocab_size; ++v) {
        if (!is_banned[v]) mx = std::max(mx, logits[v]);
      }
      double sum = 0.0;
      for (std::size_t v = 0; v < vocab_size; ++v) {
        if (!is_banned[v]) sum += std::exp(logits[v] - mx);
      }
      const double lse = std::log(sum) + mx;
      for (std::size_t v = 0; v < vocab_size; ++v) {
        if (is_banned[v]) continue;
        Beam nb = b;
        nb.tokens.push_back((int)v);
        nb.logp += logits[v] - lse;
        candidates.push_back(std::move(nb));
      }
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const Beam& a, const Beam& b) {
                if (a.logp != b.logp) return a.logp > b.logp;
                return a.tokens < b.tokens;
              });
    if (candidates.size() > beam_width) candidates.resize(beam_width);
    live.clear();
    for (auto& c : candidates) {
      if (c.tokens.back() == eos_id || c.tokens.size() - 1 >= max_len) {
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }
  for (auto& b : live) finished.push_back(std::move(b));

  std::sort(finished.begin(), finished.end(),
            [&](const Beam& a, const Beam& b) {
              const double sa = normalized(a), sb = normalized(b);
              if (sa != sb) return sa > sb;
              return a.tokens < b.tokens;
            });
  if (finished.size() > beam_width) finished.resize(beam_width);

  std::vector<Caption> out;
  for (const auto& b : finished) {
    Caption c;
    c.score = normalized(b);
    for (std::size_t i = 1; i < b.tokens.size(); ++i) {
      if (b.tokens[i] == eos_id) break;
      c.token_ids.push_back(b.tokens[i]);
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<Caption> beam_search(const IftModel& model, const Image& image,
                                 std::size_t beam_width, std::size_t max_len,
                                 const Vocabulary& vocab) {
  const std::size_t cap =
      std::min<std::size_t>(max_len, model.config().max_text_len + 1);
  Tensor feats = model.image_encode(image);
  Tensor prefix = model.project_to_lm(model.ift_image_branch(feats));
  const std::size_t p = prefix->rows;
  auto step = [&](const std::vector<int>& tokens) {
    PrefixCausalMask mask = build_prefix_causal_mask(p, tokens.size());
    Tensor logits = model.lm_forward(prefix, tokens, mask);
    const std::size_t v = logits->cols;
    const double* last = logits->value.data() + (logits->rows - 1) * v;
    return std::vector<double>(last, last + v);
  };
  std::vector<Caption> caps = beam_search_generic(
      step, vocab.size(), Vocabulary::kBos, Vocabulary::kEos,
      {Vocabulary::kPad, Vocabulary::kCls, Vocabulary::kBos}, beam_width, cap);
  for (auto& c : caps) c.text = vocab.decode(c.token_ids);
  return caps;
}

double bleu(const Caption& candidate, const std::vector<Caption>& refs,
            int max_n) {
  if (max_n < 1 || max_n > 4) {
    throw std::invalid_argument("bleu: max_n must be in 1..4");
  }
  if (refs.empty()) throw std::invalid_argument("bleu: no references");
  const auto cand = tokenize(candidate.text);
  if (cand.empty()) return 0.0;
  std::vector<std::vector<std::string>> ref_toks;
  for (const auto& r : refs) {
    ref_toks.push_back(tokenize(r.text));
    if (ref_toks.back().empty()) {
      throw std::invalid_argument("bleu: empty reference");
    }
  }

  double log_prec_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    NgramCounts cc = count_ngrams(cand, (std::size_t)n);
    std::size_t total = 0, clipped = 0;
    for (const auto& [gram, count] : cc) {
      std::size_t best_ref = 0;
      for (const auto& rt : ref_toks) {
        NgramCounts rc = count_ngrams(rt, (std::size_t)n);
        auto it = rc.find(gram);
        if (it != rc.end()) best_ref = std::max(best_ref, it->second);
      }
      total += count;
      clipped += std::min(count, best_ref);
    }
    if (total == 0 || clipped == 0) return 0.0;
    log_prec_sum += std::log((double)clipped / (double)total);
  }
  const double geo_mean = std::exp(log_prec_sum / (double)max_n);

  // closest reference length; ties resolved toward the shorter reference
  const std::size_t c = cand.size();
  std::size_t r = ref_toks[0].size();
  for (const auto& rt : ref_toks) {
    const auto d_new = rt.size() > c ? rt.size() - c : c - rt.size();
    const auto d_old = r > c ? r - c : c - r;
    if (d_new < d_old || (d_new == d_old && rt.size() < r)) r = rt.size();
  }
  const double bp = c >= r ? 1.0 : std::exp(1.0 - (double)r / (double)c);
  return geo_mean * bp;
}

double rouge_l(const Caption& candidate, const std::vector<Caption>& refs) {
  if (refs.empty()) throw std::invalid_argument("rouge_l: no references");
  const auto cand = tokenize(candidate.text);
  if (cand.empty()) return 0.0;
  constexpr double kBeta2 = 1.2 * 1.2;
  double best = 0.0;
  for (const auto& ref : refs) {
    const auto rt = tokenize(ref.text);
    if (rt.empty()) throw std::invalid_argument("rouge_l: empty reference");
    const double lcs = (double)lcs_length(cand, rt);
    if (lcs == 0.0) continue;
    const double p = lcs / (double)cand.size();
    const double r = lcs / (double)rt.size();
    best = std::max(best, (1.0 + kBeta2) * r * p / (r + kBeta2 * p));
  }
  return best;
}

CiderResult cider(
    const std::vector<Caption>& candidates,
    const std::vector<std::vector<Caption>>& refs_per_candidate) {
  if (candidates.empty()) {
    throw std::invalid_argument("cider: empty candidate list");
  }
  if (refs_per_candidate.size() != candidates.size()) {
    throw std::invalid_argument(
        "cider: candidates and reference lists differ in length");
  }
  const std::size_t n_images = candidates.size();

  // document frequency per n-gram over the reference corpus (image = doc)
  std::array<std::map<Ngram, std::size_t>, 4> df;
  for (const auto& refs : refs_per_candidate) {
    if (refs.empty()) throw std::invalid_argument("cider: image without refs");
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<Ngram, bool> seen;
      for (const auto& r : refs) {
        for (const auto& [gram, _] : count_ngrams(tokenize(r.text), n)) {
          seen[gram] = true;
        }
      }
      for (const auto& [gram, _] : seen) df[n - 1][gram] += 1;
    }
  }
  auto idf = [&](std::size_t n, const Ngram& gram) {
    auto it = df[n - 1].find(gram);
    const std::size_t d = it == df[n - 1].end() ? 1 : std::max<std::size_t>(
                                                          it->second, 1);
    return std::log((double)n_images / (double)d);
  };

  CiderResult res;
  for (std::size_t i = 0; i < n_images; ++i) {
    const auto cand_toks = tokenize(candidates[i].text);
    double score = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      NgramCounts cand_counts = count_ngrams(cand_toks, n);
      double sim_sum = 0.0;
      for (const auto& ref : refs_per_candidate[i]) {
        NgramCounts ref_counts = count_ngrams(tokenize(ref.text), n);
        // clip candidate counts to the reference's own counts
        NgramCounts clipped;
        for (const auto& [gram, count] : cand_counts) {
          auto it = ref_counts.find(gram);
          if (it != ref_counts.end()) {
            clipped[gram] = std::min(count, it->second);
          }
        }
        double dot = 0.0, norm_c = 0.0, norm_r = 0.0;
        for (const auto& [gram, count] : cand_counts) {
          const double w = (double)count * idf(n, gram);
          norm_c += w * w;
        }
        for (const auto& [gram, count] : ref_counts) {
          const double w = (double)count * idf(n, gram);
          norm_r += w * w;
        }
        for (const auto& [gram, count] : clipped) {
          dot += (double)count * idf(n, gram) * (double)ref_counts[gram] *
                 idf(n, gram);
        }
        if (norm_c > 0.0 && norm_r > 0.0) {
          sim_sum += dot / (std::sqrt(norm_c) * std::sqrt(norm_r));
        } else if (!cand_counts.empty() && cand_counts == ref_counts) {
          sim_sum += 1.0;  // saturated-IDF exact match, see header
        }
      }
      score += sim_sum / (double)refs_per_candidate[i].size();
    }
    res.per_candidate.push_back(10.0 * score / 4.0);
  }
  double total = 0.0;
  for (double s : res.per_candidate) total += s;
  res.mean = total / (double)n_images;
  return res;
}

}  // namespace bita
