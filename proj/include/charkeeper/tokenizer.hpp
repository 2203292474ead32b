#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "charkeeper/common.hpp"
#include "charkeeper/corpus.hpp"

namespace charkeeper {

// Context field keys. A = self persona, B = self name, C = partner name,
// D = setting name + description; History selects the dialogue turns.
enum class Field : int { A, B, C, D, History };
using FieldSet = std::set<Field>;

inline FieldSet all_fields() { return {Field::A, Field::B, Field::C, Field::D, Field::History}; }
inline FieldSet abcd_fields() { return {Field::A, Field::B, Field::C, Field::D}; }

// Subset letters, e.g. "ABCD" or "BH" (H = history).
std::string fieldset_to_string(const FieldSet& fields);
FieldSet fieldset_from_string(const std::string& s);

// Word-level vocabulary with fixed reserved ids. Reserved ids are stable
// across save/load and never assigned to corpus words.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kSep = 4;
  static constexpr TokenId kSettingName = 5;
  static constexpr TokenId kSettingDesc = 6;
  static constexpr TokenId kPartnerName = 7;
  static constexpr TokenId kSelfName = 8;
  static constexpr TokenId kSelfPersona = 9;
  static constexpr int kNumReserved = 10;

  Vocabulary();

  TokenId add_word(const std::string& word);  // no-op if present
  TokenId id_of(const std::string& word) const;
  const std::string& text_of(TokenId id) const;
  bool contains(const std::string& word) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  TokenSeq encode_words(const std::string& text) const;
  std::string decode(const TokenSeq& seq, bool skip_reserved = true) const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& json_text);
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;  // index = id
  std::unordered_map<std::string, TokenId> index_;
};

Vocabulary build_vocab(const std::vector<Dialogue>& corpus, int min_count);

TokenSeq serialize_context(const PovContext& ctx, const Vocabulary& vocab,
                           const FieldSet& include);

TokenSeq truncate_left(const TokenSeq& seq, int max_len);

}  // namespace charkeeper
