#pragma once

// Word-level codec over the closed caption grammar, in a unified id space:
// [words][per-position pads][BOT, BOV][image tokens]. Every position of a
// TextSequence holds either a word id or that position's own pad id; pads
// are real, learnable tokens, one per position.

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tokedit/common.hpp"
#include "tokedit/grammar.hpp"

namespace tokedit {

constexpr int kTextLen = 16;

enum class IdKind { Word, Pad, Special, Image };

struct TextSequence {
  std::vector<int> ids;  // length kTextLen
};

class Vocabulary {
 public:
  Vocabulary(int codebook_size = 128, int text_len = kTextLen) : text_len_(text_len) {
    for (const auto& w : grammar_words()) {
      word_ids_[w] = next_id_;
      words_.push_back(w);
      next_id_++;
    }
    for (int i = 0; i < text_len_; i++) pad_ids_.push_back(next_id_++);
    bot_id_ = next_id_++;
    bov_id_ = next_id_++;
    image_id_offset_ = next_id_;
    codebook_size_ = codebook_size;
    next_id_ += codebook_size_;
  }

  int text_len() const { return text_len_; }
  int total_size() const { return next_id_; }
  int bot_id() const { return bot_id_; }
  int bov_id() const { return bov_id_; }
  int image_id_offset() const { return image_id_offset_; }
  int codebook_size() const { return codebook_size_; }
  int pad_id(int position) const { return pad_ids_[static_cast<size_t>(position)]; }
  int num_words() const { return static_cast<int>(words_.size()); }

  int word_id(const std::string& w) const {
    auto it = word_ids_.find(w);
    TOKEDIT_CHECK(it != word_ids_.end(), VocabError, "word '%s' not in vocabulary", w.c_str());
    return it->second;
  }

  bool has_word(const std::string& w) const { return word_ids_.count(w) > 0; }

  IdKind classify(int id) const {
    TOKEDIT_CHECK(id >= 0 && id < total_size(), VocabError, "id %d outside vocabulary", id);
    if (id < num_words()) return IdKind::Word;
    if (id < num_words() + text_len_) return IdKind::Pad;
    if (id == bot_id_ || id == bov_id_) return IdKind::Special;
    return IdKind::Image;
  }

  int image_token_of(int id) const {
    TOKEDIT_CHECK(classify(id) == IdKind::Image, VocabError, "id %d is not an image id", id);
    return id - image_id_offset_;
  }

  TextSequence encode_text(const std::string& caption) const {
    std::vector<std::string> words;
    std::istringstream iss(caption);
    std::string w;
    while (iss >> w) words.push_back(w);
    TOKEDIT_CHECK(static_cast<int>(words.size()) <= text_len_, VocabError,
                  "caption has %zu words, text length is %d", words.size(), text_len_);
    TextSequence seq;
    for (int i = 0; i < text_len_; i++) {
      if (i < static_cast<int>(words.size()))
        seq.ids.push_back(word_id(words[static_cast<size_t>(i)]));
      else
        seq.ids.push_back(pad_ids_[static_cast<size_t>(i)]);
    }
    return seq;
  }

  std::string decode_text(const TextSequence& seq) const {
    TOKEDIT_CHECK(seq.ids.size() == static_cast<size_t>(text_len_), ShapeError,
                  "text sequence length %zu != %d", seq.ids.size(), text_len_);
    std::string out;
    for (int id : seq.ids) {
      IdKind kind = classify(id);
      TOKEDIT_CHECK(kind == IdKind::Word || kind == IdKind::Pad, VocabError,
                    "id %d is not a text-range id", id);
      if (kind == IdKind::Pad) continue;
      if (!out.empty()) out += " ";
      out += words_[static_cast<size_t>(id)];
    }
    return out;
  }

  // Positions holding an actual word (pads excluded).
  std::vector<bool> word_positions(const TextSequence& seq) const {
    std::vector<bool> mask;
    for (int id : seq.ids) mask.push_back(classify(id) == IdKind::Word);
    return mask;
  }

  // Human-readable listing, also the basis of the vocabulary hash carried by
  // checkpoints.
  std::string describe() const {
    std::string out;
    for (size_t i = 0; i < words_.size(); i++)
      out += format_str("%zu\tword\t%s\n", i, words_[i].c_str());
    for (int i = 0; i < text_len_; i++)
      out += format_str("%d\tpad\t<pad_%d>\n", pad_ids_[static_cast<size_t>(i)], i);
    out += format_str("%d\tspecial\t[BOT]\n", bot_id_);
    out += format_str("%d\tspecial\t[BOV]\n", bov_id_);
    out += format_str("%d..%d\timage\t<code_0..%d>\n", image_id_offset_,
                      image_id_offset_ + codebook_size_ - 1, codebook_size_ - 1);
    return out;
  }

  uint64_t hash() const { return fnv1a(describe()); }

 private:
  std::map<std::string, int> word_ids_;
  std::vector<std::string> words_;
  std::vector<int> pad_ids_;
  int bot_id_ = 0, bov_id_ = 0;
  int image_id_offset_ = 0;
  int codebook_size_ = 0;
  int text_len_ = 0;
  int next_id_ = 0;
};

}  // namespace tokedit
