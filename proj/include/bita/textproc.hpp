#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "bita/model.hpp"

namespace bita {

// Word-level vocabulary with fixed reserved ids. Ordering of the open part is
// by descending corpus frequency with lexicographic tie-break, so rebuilding
// from the same corpus reproduces the same mapping.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kUnk = 4;

  std::vector<std::string> tokens;  // index == id, reserved tokens included
  std::unordered_map<std::string, int> index;

  std::size_t size() const { return tokens.size(); }
  int encode_token(const std::string& tok) const;
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;  // skips reserved ids
  static Vocabulary from_tokens(std::vector<std::string> tokens);
};

// lowercase, strip punctuation, split on whitespace
std::vector<std::string> tokenize(const std::string& text);

Vocabulary build_vocab(const std::vector<std::string>& corpus);

struct Caption {
  std::string text;
  std::vector<int> token_ids;  // generated ids, bos/eos excluded
  double score = 0.0;          // length-normalized log-probability
};

// Next-token logits for the sequence so far (starting with bos).
using StepLogits =
    std::function<std::vector<double>(const std::vector<int>&)>;

// Length-terminated beam search. Sequences end at eos or max_len; candidates
// are ranked by total log-probability divided by generated length (eos
// counted when emitted). banned ids are never proposed. beam_width == 1 is
// exactly a greedy argmax rollout.
std::vector<Caption> beam_search_generic(const StepLogits& step,
                                         std::size_t vocab_size, int bos_id,
                                         int eos_id,
                                         const std::vector<int>& banned,
                                         std::size_t beam_width,
                                         std::size_t max_len);

// Decode a caption for an image through the model's visual prefix.
std::vector<Caption> beam_search(const IftModel& model, const Image& image,
                                 std::size_t beam_width, std::size_t max_len,
                                 const Vocabulary& vocab);

// Clipped modified n-gram precision, geometric mean over 1..max_n, times the
// brevity penalty min(1, e^{1-r/c}) with r the closest reference length.
// Empty candidate scores 0 by convention.
double bleu(const Caption& candidate, const std::vector<Caption>& refs,
            int max_n);

// LCS F-measure (beta = 1.2), max over references.
double rouge_l(const Caption& candidate, const std::vector<Caption>& refs);

struct CiderResult {
  std::vector<double> per_candidate;
  double mean = 0.0;
};

// TF-IDF n-gram cosine (n = 1..4) averaged and scaled by 10, document
// frequencies over the reference corpus, candidate counts clipped to the
// per-reference maximum. When both TF-IDF vectors have zero norm (every
// shared n-gram saturates the corpus) the cosine is taken as 1 if the raw
// clipped count vectors are identical and non-empty, else 0.
CiderResult cider(const std::vector<Caption>& candidates,
                  const std::vector<std::vector<Caption>>& refs_per_candidate);

}  // namespace bita
