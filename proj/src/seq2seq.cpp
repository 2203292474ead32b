#include "charkeeper/seq2seq.hpp"

namespace charkeeper {

using nlohmann::json;

std::string grounding_mode_name(GroundingMode m) {
  switch (m) {
    case GroundingMode::none: return "none";
    case GroundingMode::profile: return "profile";
    case GroundingMode::decoder_attn: return "decoder_attn";
    case GroundingMode::trainable_mask: return "trainable_mask";
    case GroundingMode::classifier_attn_top: return "classifier_attn_top";
    case GroundingMode::classifier_attn_bottom: return "classifier_attn_bottom";
  }
  throw std::runtime_error("unknown grounding mode");
}

GroundingMode grounding_mode_from_name(const std::string& s) {
  if (s == "none") return GroundingMode::none;
  if (s == "profile") return GroundingMode::profile;
  if (s == "decoder_attn") return GroundingMode::decoder_attn;
  if (s == "trainable_mask") return GroundingMode::trainable_mask;
  if (s == "classifier_attn_top") return GroundingMode::classifier_attn_top;
  if (s == "classifier_attn_bottom") return GroundingMode::classifier_attn_bottom;
  throw std::runtime_error("unknown grounding mode: " + s);
}

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},
              {"n_enc_layers", cfg.n_enc_layers},
              {"n_dec_layers", cfg.n_dec_layers},
              {"d_ffn", cfg.d_ffn},
              {"vocab_size", cfg.vocab_size},
              {"max_ctx_tokens", cfg.max_ctx_tokens},
              {"max_target_len", cfg.max_target_len},
              {"expanded",
               {{"mode", grounding_mode_name(cfg.expanded.mode)},
                {"subset", fieldset_to_string(cfg.expanded.subset)},
                {"rounds", cfg.expanded.rounds},
                {"k", cfg.expanded.k}}},
              {"n_mo", cfg.n_mo},
              {"mo_input", cfg.mo_input == MoInput::dec_only ? "dec_only" : "enc_dec"},
              {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.n_enc_layers = j.at("n_enc_layers").get<int>();
  cfg.n_dec_layers = j.at("n_dec_layers").get<int>();
  cfg.d_ffn = j.at("d_ffn").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.max_ctx_tokens = j.at("max_ctx_tokens").get<int>();
  cfg.max_target_len = j.at("max_target_len").get<int>();
  const auto& e = j.at("expanded");
  cfg.expanded.mode = grounding_mode_from_name(e.at("mode").get<std::string>());
  cfg.expanded.subset = fieldset_from_string(e.at("subset").get<std::string>());
  cfg.expanded.rounds = e.at("rounds").get<int>();
  cfg.expanded.k = e.at("k").get<int>();
  cfg.n_mo = j.at("n_mo").get<int>();
  cfg.mo_input =
      j.at("mo_input").get<std::string>() == "enc_dec" ? MoInput::enc_dec : MoInput::dec_only;
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

}  // namespace charkeeper
