#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "cut/core/types.hpp"

namespace cut::diffusion {

// Lower-cases, splits on anything that is not alphanumeric or '_', and cuts
// words longer than `max_piece` characters into several subword pieces.
// Token ids are stable hashes into a fixed-size vocabulary.
class WordTokenizer {
 public:
  static constexpr int kVocabSize = 49408;

  explicit WordTokenizer(int max_piece = 12) : max_piece_(max_piece) {}

  struct Piece {
    int id;
    int word_index;
    std::string text;
  };

  std::vector<Piece> tokenize(std::string_view text) const;
  static int token_id(std::string_view piece);

 private:
  int max_piece_;
};

inline constexpr std::string_view kClassPlaceholder = "[cls]";

// Fills the class placeholder in `prompt_template` and locates the subword
// tokens of `anomaly_word` (its last occurrence). Throws kInvalidArgument when
// the placeholder or the anomaly word is missing and kRange when the prompt
// exceeds `token_limit`.
PromptSpec make_prompt(const WordTokenizer& tokenizer, std::string_view prompt_template,
                       std::string_view class_name, std::string_view anomaly_word,
                       int token_limit);

}  // namespace cut::diffusion
