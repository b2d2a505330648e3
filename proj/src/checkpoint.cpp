#include "extradiff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "extradiff/error.hpp"
#include "extradiff/hash.hpp"

namespace extradiff {

using json = nlohmann::ordered_json;

namespace {

json config_to_json(const DenoiserConfig& c) {
  json j;
  j["n_tokens"] = c.n_tokens;
  j["d_latent"] = c.d_latent;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["layers_per_rat"] = c.layers_per_rat;
  j["d_text"] = c.d_text;
  j["d_time"] = c.d_time;
  j["d_hidden"] = c.d_hidden;
  j["recurrent"] = c.recurrent;
  j["seed"] = c.seed;
  return j;
}

DenoiserConfig config_from_json(const json& j) {
  DenoiserConfig c;
  c.n_tokens = j.at("n_tokens").get<int>();
  c.d_latent = j.at("d_latent").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.layers_per_rat = j.at("layers_per_rat").get<int>();
  c.d_text = j.at("d_text").get<int>();
  c.d_time = j.at("d_time").get<int>();
  c.d_hidden = j.at("d_hidden").get<int>();
  c.recurrent = j.at("recurrent").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

std::string denoiser_config_json(const DenoiserConfig& config) { return config_to_json(config).dump(); }

void save_checkpoint(const DenoiserParams& params, const std::filesystem::path& path) {
  json header;
  header["format"] = "extradiff-denoiser";
  header["version"] = 1;
  header["config"] = config_to_json(params.config);
  header["param_count"] = params.size();
  header["payload"] = "float64-le";
  header["order"] = "column-major";
  header["sha256"] = params.content_hash();
  json tensors = json::array();
  for (const auto& [name, slot] : params.layout.named)
    tensors.push_back({{"name", name}, {"offset", slot.offset}, {"rows", slot.rows}, {"cols", slot.cols}});
  header["tensors"] = std::move(tensors);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out << header.dump() << '\n';
  for (Eigen::Index i = 0; i < params.values.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &params.values[i], 8);
    char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    out.write(bytes, 8);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

DenoiserParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError("checkpoint has no header: " + path.string());
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != "extradiff-denoiser" || header.value("version", 0) != 1)
    throw InputError("not an extradiff denoiser checkpoint: " + path.string());

  DenoiserParams params(config_from_json(header.at("config")));
  const auto count = header.at("param_count").get<Eigen::Index>();
  if (count != params.size())
    throw InputError("checkpoint param_count " + std::to_string(count) + " does not match its config (" +
                     std::to_string(params.size()) + ")");
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != static_cast<std::size_t>(count) * 8)
    throw InputError("checkpoint payload has " + std::to_string(payload.size()) + " bytes, expected " +
                     std::to_string(count * 8));
  for (Eigen::Index i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(payload[static_cast<std::size_t>(i) * 8 + b]) << (8 * b);
    std::memcpy(&params.values[i], &bits, 8);
  }
  if (params.content_hash() != header.at("sha256").get<std::string>())
    throw InputError("checkpoint hash mismatch: " + path.string());
  return params;
}

}  // namespace extradiff
