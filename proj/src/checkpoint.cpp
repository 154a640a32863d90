#include "speechrl/checkpoint.hpp"

#include <fstream>
#include <json.hpp>

namespace speechrl {

namespace {

constexpr std::string_view kMagic = "ASRCKPT1\n";

nlohmann::ordered_json config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_query_heads"] = c.n_query_heads;
  j["kv_heads"] = ModelConfig::kKvHeads;
  j["head_dim"] = c.head_dim;
  j["ffn_dim"] = c.ffn_dim;
  j["max_seq_len"] = c.max_seq_len;
  j["dropout_rate"] = c.dropout_rate;
  return j;
}

ModelConfig config_from(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_query_heads = j.at("n_query_heads").get<int>();
  c.head_dim = j.at("head_dim").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  if (j.value("kv_heads", 1) != ModelConfig::kKvHeads) throw CompatibilityError("checkpoint: only one K/V head is supported");
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig model_config_from_json(std::string_view text) {
  try {
    return config_from(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model config: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const PolicyCheckpoint& ckpt) {
  const ParamLayout layout(ckpt.config);
  if (ckpt.params.size() != layout.total) throw ArgumentError("save_checkpoint: parameter count does not match config");
  if (!all_finite(ckpt.params)) throw DivergenceError("save_checkpoint: refusing to write non-finite parameters");

  nlohmann::ordered_json h;
  h["config"] = config_json(ckpt.config);
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& t : layout.tensors) {
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["offset"] = t.offset * sizeof(float);
    tensors.push_back(e);
  }
  h["tensors"] = tensors;
  h["vocab_map_fingerprint"] = hex64(ckpt.vocab_map_fingerprint);
  h["codebook_fingerprint"] = hex64(ckpt.codebook_fingerprint);
  h["step"] = ckpt.step;
  h["vocab_map"] = ckpt.vocab_map.v > 0 ? nlohmann::ordered_json::parse(vocab_map_to_json(ckpt.vocab_map)) : nullptr;
  const std::string header = h.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp);
    os << kMagic << header.size() << '\n' << header;
    write_f32s(os, ckpt.params);
    if (!os) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

PolicyCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::string magic(kMagic.size(), '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!is || magic != kMagic) throw DataError("not a checkpoint file: " + path.string());
  std::string len_line;
  std::getline(is, len_line);
  std::size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    throw DataError("checkpoint header length is malformed");
  }
  std::string header(len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("checkpoint header is truncated");

  PolicyCheckpoint ck;
  try {
    const auto h = nlohmann::json::parse(header);
    ck.config = config_from(h.at("config"));
    ck.vocab_map_fingerprint = parse_hex64(h.at("vocab_map_fingerprint").get<std::string>());
    ck.codebook_fingerprint = parse_hex64(h.at("codebook_fingerprint").get<std::string>());
    ck.step = h.at("step").get<std::uint64_t>();
    if (!h.at("vocab_map").is_null()) ck.vocab_map = vocab_map_from_json(h.at("vocab_map").dump());
    const ParamLayout layout(ck.config);
    const auto& tensors = h.at("tensors");
    if (tensors.size() != layout.tensors.size()) throw DataError("checkpoint tensor manifest does not match config");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& t = tensors[i];
      const auto& want = layout.tensors[i];
      if (t.at("name").get<std::string>() != want.name || t.at("shape").get<std::vector<int>>() != want.shape ||
          t.at("offset").get<std::size_t>() != want.offset * sizeof(float))
        throw DataError("checkpoint tensor " + want.name + " does not match config");
    }
    ck.params.resize(layout.total);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  read_f32s(is, ck.params);
  if (!all_finite(ck.params)) throw DataError("checkpoint contains non-finite values");
  if (ck.vocab_map.v > 0 && ck.vocab_map.fingerprint() != ck.vocab_map_fingerprint)
    throw CompatibilityError("checkpoint vocabulary map does not match its fingerprint");
  return ck;
}

std::uint64_t checkpoint_fingerprint(const PolicyCheckpoint& ckpt) {
  Fnv1a h;
  h.update(model_config_to_json(ckpt.config));
  h.update_span<float>(ckpt.params);
  h.update_u64(ckpt.vocab_map_fingerprint);
  h.update_u64(ckpt.codebook_fingerprint);
  h.update_u64(ckpt.step);
  return h.digest();
}

}  // namespace speechrl
