#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "charkeeper/common.hpp"

namespace charkeeper {

struct CharacterProfile {
  std::string name;
  std::string persona;  // 1-3 sentences
};

struct Utterance {
  int speaker = 0;  // index into Dialogue::characters
  std::string text;
};

// A two-party grounded conversation. Speakers strictly alternate.
struct Dialogue {
  std::string setting_name;
  std::string setting_desc;
  CharacterProfile characters[2];
  std::vector<Utterance> utterances;

  bool operator==(const Dialogue& o) const;
};

// One participant's view of a dialogue prefix. Subset keys follow the
// expanded-attention field naming: A = self persona, B = self name,
// C = partner name, D = setting (name + description).
struct PovContext {
  std::string self_name;     // B
  std::string self_persona;  // A
  std::string partner_name;  // C
  std::string setting_name;  // D
  std::string setting_desc;  // D
  std::vector<Utterance> history;
};

struct UtteranceLenRange {
  int min_len = 4;
  int max_len = 9;
};

struct CorpusSpec {
  int n_roles = 6;
  int role_lexicon_size = 8;
  int n_dialogues = 40;
  int turns_per_dialogue = 8;
  UtteranceLenRange utterance_len;
  double greeting_fraction = 0.5;  // openers that address the partner by role name
  std::uint64_t seed = 1;
};

inline constexpr int kAllPrior = -1;  // n_prior sentinel: all utterances before the candidate

std::vector<Dialogue> load_dialogues(const std::string& path);
void save_dialogues(const std::vector<Dialogue>& dialogues, const std::string& path);
std::string dialogues_to_jsonl(const std::vector<Dialogue>& dialogues);

void validate_dialogue(const Dialogue& d, std::size_t index);

std::vector<Dialogue> generate_synthetic_corpus(const CorpusSpec& spec);

// Role/lexicon naming used by the generator; exposed so tests and the
// separability checks can recover ground truth from text alone.
std::vector<std::string> synthetic_role_names(int n_roles);
std::vector<std::string> synthetic_role_lexicon(const std::string& role_name, int size);

PovContext flatten_context(const Dialogue& d, int pov, int upto, int n_prior);

CorpusSpec corpus_spec_from_json(const std::string& json_text);
std::string corpus_spec_to_json(const CorpusSpec& spec);

}  // namespace charkeeper
