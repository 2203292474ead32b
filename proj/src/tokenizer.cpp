#include "charkeeper/tokenizer.hpp"

#include <algorithm>
#include <map>

#include <json.hpp>

namespace charkeeper {

using nlohmann::json;

static const char* kReservedText[Vocabulary::kNumReserved] = {
    "<pad>", "<bos>", "<eos>", "<unk>", "<sep>",
    "_setting_name", "_setting_desc", "_partner_name", "_self_name", "_self_persona"};

Vocabulary::Vocabulary() {
  tokens_.reserve(kNumReserved);
  for (int i = 0; i < kNumReserved; ++i) {
    tokens_.emplace_back(kReservedText[i]);
    index_.emplace(kReservedText[i], static_cast<TokenId>(i));
  }
}

TokenId Vocabulary::add_word(const std::string& word) {
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  const TokenId id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(word);
  index_.emplace(word, id);
  return id;
}

TokenId Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& word) const { return index_.count(word) > 0; }

const std::string& Vocabulary::text_of(TokenId id) const {
  if (id < 0 || id >= static_cast<TokenId>(tokens_.size()))
    throw std::runtime_error("Vocabulary: token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSeq Vocabulary::encode_words(const std::string& text) const {
  TokenSeq out;
  for (const auto& w : split_ws(text)) out.push_back(id_of(w));
  return out;
}

std::string Vocabulary::decode(const TokenSeq& seq, bool skip_reserved) const {
  std::vector<std::string> words;
  for (TokenId id : seq) {
    if (skip_reserved && id < kNumReserved) continue;
    words.push_back(text_of(id));
  }
  return join(words, " ");
}

std::string Vocabulary::to_json() const {
  json j;
  j["reserved"] = json::array();
  for (int i = 0; i < kNumReserved; ++i)
    j["reserved"].push_back({{"id", i}, {"token", kReservedText[i]}});
  j["tokens"] = json::array();
  for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) j["tokens"].push_back(tokens_[i]);
  return j.dump(2) + "\n";
}

Vocabulary Vocabulary::from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  Vocabulary v;
  const auto& reserved = j.at("reserved");
  if (!reserved.is_array() || reserved.size() != kNumReserved)
    throw std::runtime_error("vocabulary file: bad reserved-token table");
  for (int i = 0; i < kNumReserved; ++i) {
    if (reserved[static_cast<std::size_t>(i)].at("id").get<int>() != i ||
        reserved[static_cast<std::size_t>(i)].at("token").get<std::string>() != kReservedText[i])
      throw std::runtime_error("vocabulary file: reserved ids are not stable");
  }
  for (const auto& t : j.at("tokens")) v.add_word(t.get<std::string>());
  return v;
}

void Vocabulary::save(const std::string& path) const { write_file(path, to_json()); }

Vocabulary Vocabulary::load(const std::string& path) { return from_json(read_file(path)); }

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& t : tokens_) {
    h = fnv1a_64(t.data(), t.size(), h);
    h = fnv1a_64("\x1f", 1, h);
  }
  return h;
}

Vocabulary build_vocab(const std::vector<Dialogue>& corpus, int min_count) {
  if (corpus.empty()) throw std::runtime_error("build_vocab: empty corpus");
  std::map<std::string, long> counts;  // ordered map keeps lexicographic ties deterministic
  auto tally = [&counts](const std::string& text) {
    for (const auto& w : split_ws(text)) ++counts[w];
  };
  for (const auto& d : corpus) {
    tally(d.setting_name);
    tally(d.setting_desc);
    for (int i = 0; i < 2; ++i) {
      tally(d.characters[i].name);
      tally(d.characters[i].persona);
    }
    for (const auto& u : d.utterances) tally(u.text);
  }
  std::vector<std::pair<std::string, long>> entries(counts.begin(), counts.end());
  std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;  // frequency desc
    return a.first < b.first;                              // then lexicographic
  });
  Vocabulary v;
  for (const auto& [word, count] : entries)
    if (count >= min_count) v.add_word(word);
  return v;
}

TokenSeq serialize_context(const PovContext& ctx, const Vocabulary& vocab,
                           const FieldSet& include) {
  TokenSeq out;
  auto emit_field = [&](TokenId marker, const std::string& text) {
    out.push_back(marker);
    const TokenSeq words = vocab.encode_words(text);
    out.insert(out.end(), words.begin(), words.end());
  };
  if (include.count(Field::D)) {
    emit_field(Vocabulary::kSettingName, ctx.setting_name);
    emit_field(Vocabulary::kSettingDesc, ctx.setting_desc);
  }
  if (include.count(Field::C)) emit_field(Vocabulary::kPartnerName, ctx.partner_name);
  if (include.count(Field::B)) emit_field(Vocabulary::kSelfName, ctx.self_name);
  if (include.count(Field::A)) emit_field(Vocabulary::kSelfPersona, ctx.self_persona);
  if (include.count(Field::History)) {
    for (std::size_t i = 0; i < ctx.history.size(); ++i) {
      if (i) out.push_back(Vocabulary::kSep);
      const TokenSeq words = vocab.encode_words(ctx.history[i].text);
      out.insert(out.end(), words.begin(), words.end());
    }
  }
  return out;
}

std::string fieldset_to_string(const FieldSet& fields) {
  std::string out;
  if (fields.count(Field::A)) out += 'A';
  if (fields.count(Field::B)) out += 'B';
  if (fields.count(Field::C)) out += 'C';
  if (fields.count(Field::D)) out += 'D';
  if (fields.count(Field::History)) out += 'H';
  return out;
}

FieldSet fieldset_from_string(const std::string& s) {
  FieldSet out;
  for (char c : s) {
    switch (c) {
      case 'A': case 'a': out.insert(Field::A); break;
      case 'B': case 'b': out.insert(Field::B); break;
      case 'C': case 'c': out.insert(Field::C); break;
      case 'D': case 'd': out.insert(Field::D); break;
      case 'H': case 'h': out.insert(Field::History); break;
      default: throw std::runtime_error(std::string("unknown field key: ") + c);
    }
  }
  return out;
}

TokenSeq truncate_left(const TokenSeq& seq, int max_len) {
  if (max_len < 1) throw std::runtime_error("truncate_left: max_len must be >= 1");
  if (static_cast<int>(seq.size()) <= max_len) return seq;
  return TokenSeq(seq.end() - max_len, seq.end());
}

}  // namespace charkeeper
