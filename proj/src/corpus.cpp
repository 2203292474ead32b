#include "charkeeper/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace charkeeper {

using nlohmann::json;

bool Dialogue::operator==(const Dialogue& o) const {
  if (setting_name != o.setting_name || setting_desc != o.setting_desc) return false;
  for (int i = 0; i < 2; ++i) {
    if (characters[i].name != o.characters[i].name) return false;
    if (characters[i].persona != o.characters[i].persona) return false;
  }
  if (utterances.size() != o.utterances.size()) return false;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    if (utterances[i].speaker != o.utterances[i].speaker) return false;
    if (utterances[i].text != o.utterances[i].text) return false;
  }
  return true;
}

void validate_dialogue(const Dialogue& d, std::size_t index) {
  const std::string where = "dialogue " + std::to_string(index);
  for (int i = 0; i < 2; ++i) {
    if (d.characters[i].name.empty())
      throw std::runtime_error(where + ": character " + std::to_string(i) + " has empty name");
    if (d.characters[i].persona.empty())
      throw std::runtime_error(where + ": character " + std::to_string(i) + " has empty persona");
  }
  if (d.utterances.size() < 2)
    throw std::runtime_error(where + ": needs at least 2 utterances, has " +
                             std::to_string(d.utterances.size()));
  for (std::size_t t = 0; t < d.utterances.size(); ++t) {
    const auto& u = d.utterances[t];
    if (u.speaker != 0 && u.speaker != 1)
      throw std::runtime_error(where + ": utterance " + std::to_string(t) +
                               " has speaker outside {0,1}");
    if (u.text.empty())
      throw std::runtime_error(where + ": utterance " + std::to_string(t) + " has empty text");
    if (t > 0 && d.utterances[t].speaker == d.utterances[t - 1].speaker)
      throw std::runtime_error(where + ": speakers do not alternate at utterance " +
                               std::to_string(t));
  }
}

static Dialogue dialogue_from_json(const json& j) {
  Dialogue d;
  d.setting_name = j.at("setting_name").get<std::string>();
  d.setting_desc = j.at("setting_desc").get<std::string>();
  const auto& chars = j.at("characters");
  if (!chars.is_array() || chars.size() != 2)
    throw std::runtime_error("'characters' must be an array of exactly 2 entries");
  for (int i = 0; i < 2; ++i) {
    d.characters[i].name = chars[i].at("name").get<std::string>();
    d.characters[i].persona = chars[i].at("persona").get<std::string>();
  }
  for (const auto& ju : j.at("utterances")) {
    Utterance u;
    u.speaker = ju.at("speaker").get<int>();
    u.text = ju.at("text").get<std::string>();
    d.utterances.push_back(std::move(u));
  }
  return d;
}

static json dialogue_to_json(const Dialogue& d) {
  json j;
  j["setting_name"] = d.setting_name;
  j["setting_desc"] = d.setting_desc;
  j["characters"] = json::array();
  for (int i = 0; i < 2; ++i)
    j["characters"].push_back({{"name", d.characters[i].name},
                               {"persona", d.characters[i].persona}});
  j["utterances"] = json::array();
  for (const auto& u : d.utterances)
    j["utterances"].push_back({{"speaker", u.speaker}, {"text", u.text}});
  return j;
}

std::vector<Dialogue> load_dialogues(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("missing file: " + path);
  std::vector<Dialogue> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("parse error at line " + std::to_string(line_no) + ": " + e.what());
    }
    Dialogue d;
    try {
      d = dialogue_from_json(j);
    } catch (const std::exception& e) {
      throw std::runtime_error("malformed dialogue at line " + std::to_string(line_no) + ": " +
                               e.what());
    }
    try {
      validate_dialogue(d, out.size());
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
    }
    out.push_back(std::move(d));
  }
  return out;
}

std::string dialogues_to_jsonl(const std::vector<Dialogue>& dialogues) {
  std::ostringstream os;
  for (const auto& d : dialogues) os << dialogue_to_json(d).dump() << "\n";
  return os.str();
}

void save_dialogues(const std::vector<Dialogue>& dialogues, const std::string& path) {
  write_file(path, dialogues_to_jsonl(dialogues));
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

static const char* kArchetypes[] = {"bard",   "witch",  "knight", "smith",  "monk",
                                    "pirate", "druid",  "scribe", "hunter", "baker",
                                    "jester", "healer", "miner",  "sailor", "weaver",
                                    "falconer"};
static const char* kFillers[] = {"the", "old", "road", "is", "long", "and", "we",
                                 "walk", "it", "again", "today", "indeed", "friend"};
static const char* kSettingNames[] = {"mossy courtyard", "salt harbor", "pine hollow",
                                      "ember market", "glass tower"};
static const char* kSettingDescs[] = {
    "a quiet place where travelers rest and trade stories",
    "boats creak at the docks while gulls argue overhead",
    "tall trees keep the light dim and the air cool",
    "stalls and lanterns crowd a narrow winding street",
    "smooth walls rise above the fog into pale light"};

std::vector<std::string> synthetic_role_names(int n_roles) {
  const int base = static_cast<int>(std::size(kArchetypes));
  std::vector<std::string> names;
  names.reserve(static_cast<std::size_t>(n_roles));
  for (int i = 0; i < n_roles; ++i) {
    std::string name = kArchetypes[i % base];
    if (i >= base) name += std::to_string(i / base);
    names.push_back(std::move(name));
  }
  return names;
}

std::vector<std::string> synthetic_role_lexicon(const std::string& role_name, int size) {
  std::vector<std::string> lex;
  lex.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) lex.push_back(role_name + "_w" + std::to_string(i));
  return lex;
}

static std::string synthetic_persona(const std::string& role,
                                     const std::vector<std::string>& lexicon) {
  // Persona carries the role name and a few lexicon words so that both the
  // B (name) and A (persona) fields identify the speaker's vocabulary.
  std::vector<std::string> words = {"i", "am", "the", role, "."};
  words.push_back("i");
  words.push_back("speak");
  words.push_back("of");
  const int n = std::min<int>(3, static_cast<int>(lexicon.size()));
  for (int i = 0; i < n; ++i) {
    words.push_back(lexicon[static_cast<std::size_t>(i)]);
    if (i + 1 < n) words.push_back("and");
  }
  words.push_back(".");
  return join(words, " ");
}

static std::string synthetic_utterance(Rng& rng, const std::vector<std::string>& own_lexicon,
                                       const std::string& partner_role, bool greet, int len) {
  std::vector<std::string> words;
  if (greet) {
    words.push_back("greetings");
    words.push_back(partner_role);
  }
  // Own-lexicon words dominate so speaker identity is recoverable from text;
  // fillers are shared across all roles. At least one own-lexicon token.
  int own_count = 0;
  while (static_cast<int>(words.size()) < len) {
    const bool own = rng.next_double() < 0.65;
    if (own) {
      words.push_back(own_lexicon[rng.next_index(own_lexicon.size())]);
      ++own_count;
    } else {
      words.push_back(kFillers[rng.next_index(std::size(kFillers))]);
    }
  }
  if (own_count == 0)
    words.back() = own_lexicon[rng.next_index(own_lexicon.size())];
  return join(words, " ");
}

std::vector<Dialogue> generate_synthetic_corpus(const CorpusSpec& spec) {
  if (spec.n_roles < 2) throw std::runtime_error("CorpusSpec: n_roles must be >= 2");
  if (spec.role_lexicon_size < 1 || spec.n_dialogues < 1 || spec.turns_per_dialogue < 1)
    throw std::runtime_error("CorpusSpec: all counts must be >= 1");
  if (spec.utterance_len.min_len < 1 || spec.utterance_len.max_len < spec.utterance_len.min_len)
    throw std::runtime_error("CorpusSpec: bad utterance length range");

  const auto roles = synthetic_role_names(spec.n_roles);
  std::vector<std::vector<std::string>> lexicons;
  lexicons.reserve(roles.size());
  for (const auto& r : roles) lexicons.push_back(synthetic_role_lexicon(r, spec.role_lexicon_size));

  Rng rng(spec.seed);
  std::vector<Dialogue> corpus;
  corpus.reserve(static_cast<std::size_t>(spec.n_dialogues));
  for (int di = 0; di < spec.n_dialogues; ++di) {
    Dialogue d;
    const std::size_t setting = rng.next_index(std::size(kSettingNames));
    d.setting_name = kSettingNames[setting];
    d.setting_desc = kSettingDescs[setting];

    const std::size_t r0 = rng.next_index(roles.size());
    std::size_t r1 = rng.next_index(roles.size() - 1);
    if (r1 >= r0) ++r1;  // two distinct roles
    const std::size_t role_of[2] = {r0, r1};
    for (int i = 0; i < 2; ++i) {
      d.characters[i].name = roles[role_of[i]];
      d.characters[i].persona = synthetic_persona(roles[role_of[i]], lexicons[role_of[i]]);
    }

    for (int t = 0; t < spec.turns_per_dialogue; ++t) {
      const int speaker = t % 2;
      const int partner = 1 - speaker;
      const bool opener = t < 2;
      const bool greet = opener && rng.next_double() < spec.greeting_fraction;
      const int len = static_cast<int>(
          rng.next_int(spec.utterance_len.min_len, spec.utterance_len.max_len));
      Utterance u;
      u.speaker = speaker;
      u.text = synthetic_utterance(rng, lexicons[role_of[speaker]], d.characters[partner].name,
                                   greet, len);
      d.utterances.push_back(std::move(u));
    }
    if (d.utterances.size() >= 2) validate_dialogue(d, corpus.size());
    corpus.push_back(std::move(d));
  }
  return corpus;
}

PovContext flatten_context(const Dialogue& d, int pov, int upto, int n_prior) {
  if (pov != 0 && pov != 1) throw std::runtime_error("flatten_context: pov must be 0 or 1");
  if (upto < 0 || upto > static_cast<int>(d.utterances.size()))
    throw std::runtime_error("flatten_context: upto out of range");
  PovContext ctx;
  ctx.self_name = d.characters[pov].name;
  ctx.self_persona = d.characters[pov].persona;
  ctx.partner_name = d.characters[1 - pov].name;
  ctx.setting_name = d.setting_name;
  ctx.setting_desc = d.setting_desc;
  const int take = (n_prior == kAllPrior) ? upto : std::min(n_prior, upto);
  for (int t = upto - take; t < upto; ++t) ctx.history.push_back(d.utterances[static_cast<std::size_t>(t)]);
  return ctx;
}

CorpusSpec corpus_spec_from_json(const std::string& json_text) {
  const json j = json::parse(json_text);
  CorpusSpec s;
  s.n_roles = j.value("n_roles", s.n_roles);
  s.role_lexicon_size = j.value("role_lexicon_size", s.role_lexicon_size);
  s.n_dialogues = j.value("n_dialogues", s.n_dialogues);
  s.turns_per_dialogue = j.value("turns_per_dialogue", s.turns_per_dialogue);
  if (j.contains("utterance_len")) {
    s.utterance_len.min_len = j["utterance_len"].value("min", s.utterance_len.min_len);
    s.utterance_len.max_len = j["utterance_len"].value("max", s.utterance_len.max_len);
  }
  s.greeting_fraction = j.value("greeting_fraction", s.greeting_fraction);
  s.seed = j.value("seed", s.seed);
  return s;
}

std::string corpus_spec_to_json(const CorpusSpec& s) {
  json j;
  j["n_roles"] = s.n_roles;
  j["role_lexicon_size"] = s.role_lexicon_size;
  j["n_dialogues"] = s.n_dialogues;
  j["turns_per_dialogue"] = s.turns_per_dialogue;
  j["utterance_len"] = {{"min", s.utterance_len.min_len}, {"max", s.utterance_len.max_len}};
  j["greeting_fraction"] = s.greeting_fraction;
  j["seed"] = s.seed;
  return j.dump(2);
}

}  // namespace charkeeper
