#include "charkeeper/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace charkeeper {

namespace {

constexpr char kMagic[5] = {'R', 'P', 'A', 'C', '1'};

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32_le(out, bits);
}

std::uint32_t get_u32_le(const std::string& s, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])) << (8 * i);
  return v;
}

float get_f32_le(const std::string& s, std::size_t off) {
  const std::uint32_t bits = get_u32_le(s, off);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

std::string hex_u64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::uint64_t parse_hex_u64(const std::string& s) {
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9')
      v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f')
      v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else
      throw std::runtime_error("checkpoint: bad vocab hash");
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     std::uint64_t vocab_hash, const ParamStore<float>& store) {
  nlohmann::json dir = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, var] : store.items()) {
    dir.push_back({{"name", name}, {"shape", var->value.shape}, {"offset", offset}});
    offset += var->value.numel() * 4;
  }
  nlohmann::json header = {
      {"config", config}, {"vocab_hash", hex_u64(vocab_hash)}, {"tensors", dir}};
  const std::string header_str = header.dump();

  std::string blob;
  blob.reserve(9 + header_str.size() + offset);
  blob.append(kMagic, 5);
  put_u32_le(blob, static_cast<std::uint32_t>(header_str.size()));
  blob.append(header_str);
  for (const auto& [name, var] : store.items())
    for (float f : var->value.data) put_f32_le(blob, f);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (blob.size() < 9 || std::memcmp(blob.data(), kMagic, 5) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t hlen = get_u32_le(blob, 5);
  if (blob.size() < 9 + static_cast<std::size_t>(hlen))
    throw std::runtime_error("checkpoint: truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(9, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: header parse failure: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.config = header.at("config");
  ckpt.vocab_hash = parse_hex_u64(header.at("vocab_hash").get<std::string>());
  const std::size_t data_base = 9 + hlen;
  for (const auto& entry : header.at("tensors")) {
    Tensor<float> t(entry.at("shape").get<std::vector<int>>(), 0.0f);
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    if (data_base + off + t.numel() * 4 > blob.size())
      throw std::runtime_error("checkpoint: truncated tensor data in " + path);
    for (std::size_t i = 0; i < t.numel(); ++i)
      t.data[i] = get_f32_le(blob, data_base + off + i * 4);
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

void load_into_store(const Checkpoint& ckpt, ParamStore<float>& store) {
  for (const auto& [name, var] : store.items()) {
    const Tensor<float>* found = nullptr;
    for (const auto& [tname, t] : ckpt.tensors)
      if (tname == name) {
        found = &t;
        break;
      }
    if (!found) throw std::runtime_error("checkpoint: missing tensor " + name);
    if (found->shape != var->value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for tensor " + name);
    var->value.data = found->data;
  }
}

std::uint64_t hash_store(const ParamStore<float>& store) {
  std::string bytes;
  for (const auto& [name, var] : store.items()) {
    bytes.append(name);
    bytes.push_back('\x1f');
    for (float f : var->value.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
  return fnv1a_64(bytes);
}

}  // namespace charkeeper
