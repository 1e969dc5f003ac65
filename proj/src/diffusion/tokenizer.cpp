#include "cut/diffusion/tokenizer.hpp"

#include <algorithm>
#include <cctype>

#include "cut/core/error.hpp"
#include "cut/core/random.hpp"

namespace cut::diffusion {

int WordTokenizer::token_id(std::string_view piece) {
  return static_cast<int>(fnv1a(piece) % static_cast<std::uint64_t>(kVocabSize));
}

std::vector<WordTokenizer::Piece> WordTokenizer::tokenize(std::string_view text) const {
  std::vector<Piece> pieces;
  std::string word;
  int word_index = 0;
  auto flush = [&] {
    if (word.empty()) return;
    for (std::size_t off = 0; off < word.size(); off += static_cast<std::size_t>(max_piece_)) {
      std::string piece = word.substr(off, static_cast<std::size_t>(max_piece_));
      pieces.push_back({token_id(piece), word_index, std::move(piece)});
    }
    word.clear();
    ++word_index;
  };
  for (char ch : text) {
    const auto uch = static_cast<unsigned char>(ch);
    if (std::isalnum(uch) || ch == '_') {
      word.push_back(static_cast<char>(std::tolower(uch)));
    } else {
      flush();
    }
  }
  flush();
  return pieces;
}

PromptSpec make_prompt(const WordTokenizer& tokenizer, std::string_view prompt_template,
                       std::string_view class_name, std::string_view anomaly_word,
                       int token_limit) {
  const auto at = prompt_template.find(kClassPlaceholder);
  if (at == std::string_view::npos) {
    throw Error(ErrorCode::kInvalidArgument,
                "prompt template '" + std::string(prompt_template) + "' has no [cls] placeholder");
  }
  PromptSpec prompt;
  prompt.class_name = std::string(class_name);
  prompt.text = std::string(prompt_template.substr(0, at)) + std::string(class_name) +
                std::string(prompt_template.substr(at + kClassPlaceholder.size()));

  const auto pieces = tokenizer.tokenize(prompt.text);
  const auto target = tokenizer.tokenize(anomaly_word);
  if (target.empty()) throw Error(ErrorCode::kInvalidArgument, "anomaly word is empty");

  // Reconstruct each word from its pieces to find the anomaly word.
  std::string needle;
  for (const auto& p : target) needle += p.text;
  int hit_word = -1;
  std::string current;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    current += pieces[i].text;
    const bool last_piece = i + 1 == pieces.size() || pieces[i + 1].word_index != pieces[i].word_index;
    if (last_piece) {
      if (current == needle) hit_word = pieces[i].word_index;
      current.clear();
    }
  }
  if (hit_word < 0) {
    throw Error(ErrorCode::kInvalidArgument, "anomaly word '" + std::string(anomaly_word) +
                                                 "' not found in prompt '" + prompt.text + "'");
  }
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    prompt.tokens.push_back(pieces[i].id);
    if (pieces[i].word_index == hit_word) prompt.anomaly_token_indices.push_back(static_cast<int>(i));
  }
  if (prompt.token_count() > token_limit) {
    throw Error(ErrorCode::kRange, "prompt has " + std::to_string(prompt.token_count()) +
                                       " tokens, backbone limit is " + std::to_string(token_limit));
  }
  return prompt;
}

}  // namespace cut::diffusion
