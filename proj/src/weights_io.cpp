#include "parenlens/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <map>

namespace parenlens {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'M', 'I', 'W', '1'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out{};
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  }
  return v;
}

json config_json(const ModelConfig& c) {
  json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_head"] = c.d_head;
  j["d_ff"] = c.d_ff;
  j["vocab_size"] = c.vocab_size;
  j["context_len"] = c.context_len;
  j["norm_eps"] = c.norm_eps;
  j["rope_theta"] = c.rope_theta;
  return j;
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.norm_eps = j.at("norm_eps").get<double>();
  c.rope_theta = j.at("rope_theta").get<double>();
  return c;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig config_from_json(const std::string& text) {
  try {
    auto c = config_from(json::parse(text));
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

std::vector<std::uint8_t> encode_miw1(const ModelConfig& config, const ModelWeights<float>& weights,
                                      const Vocab* vocab) {
  check_shapes(weights, config);
  if (vocab && vocab->size() != static_cast<std::size_t>(config.vocab_size)) {
    throw MismatchError("vocab of " + std::to_string(vocab->size()) + " tokens does not match vocab_size " +
                        std::to_string(config.vocab_size));
  }
  json header;
  header["config"] = config_json(config);
  json tensors = json::array();
  std::uint64_t offset = 0;
  for_each_tensor<float>(weights, [&](const std::string& name, const Tensor<float>& t) {
    json e;
    e["name"] = name;
    e["dtype"] = "f32";
    e["shape"] = t.shape();
    e["offset"] = offset;
    e["nbytes"] = t.size() * sizeof(float);
    offset += t.size() * sizeof(float);
    tensors.push_back(std::move(e));
  });
  header["tensors"] = std::move(tensors);
  if (vocab) header["vocab"] = vocab->tokens();
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(12 + text.size() + offset);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  const std::uint64_t h = to_little<std::uint64_t>(text.size());
  const auto* hp = reinterpret_cast<const std::uint8_t*>(&h);
  out.insert(out.end(), hp, hp + 8);
  out.insert(out.end(), text.begin(), text.end());
  for_each_tensor<float>(weights, [&](const std::string&, const Tensor<float>& t) {
    for (float v : t.data()) {
      std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(v));
      const auto* p = reinterpret_cast<const std::uint8_t*>(&bits);
      out.insert(out.end(), p, p + 4);
    }
  });
  return out;
}

ModelFile decode_miw1(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("not an MIW1 weight file (bad magic)");
  }
  std::uint64_t h = 0;
  std::memcpy(&h, bytes.data() + 4, 8);
  h = to_little(h);
  if (h > bytes.size() - 12) throw IoError("MIW1 header length " + std::to_string(h) + " exceeds file size");
  const std::size_t payload = 12 + static_cast<std::size_t>(h);

  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + static_cast<std::ptrdiff_t>(payload));
  } catch (const json::exception& e) {
    throw IoError(std::string("MIW1 header is not valid JSON: ") + e.what());
  }

  ModelFile file;
  try {
    file.config = config_from(header.at("config"));
  } catch (const json::exception& e) {
    throw IoError(std::string("MIW1 config block: ") + e.what());
  }
  file.config.validate();
  file.weights = zeros_like_config<float>(file.config);

  std::map<std::string, json> entries;
  for (const auto& e : header.at("tensors")) entries[e.at("name").get<std::string>()] = e;

  for_each_tensor<float>(file.weights, [&](const std::string& name, Tensor<float>& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw IoError("MIW1 file lacks tensor " + name);
    const auto& e = it->second;
    if (e.at("dtype").get<std::string>() != "f32") throw IoError("tensor " + name + ": only f32 is supported");
    auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape()) {
      throw ShapeError("tensor " + name + " has shape " + shape_to_string(shape) + ", config implies " +
                       shape_to_string(t.shape()));
    }
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != t.size() * sizeof(float) || offset > bytes.size() - payload ||
        nbytes > bytes.size() - payload - offset) {
      throw IoError("tensor " + name + ": byte range outside payload");
    }
    const std::uint8_t* src = bytes.data() + payload + offset;
    auto dst = t.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, src + 4 * i, 4);
      dst[i] = std::bit_cast<float>(to_little(bits));
    }
  });

  if (header.contains("vocab")) {
    file.vocab.emplace(header["vocab"].get<std::vector<std::string>>());
    if (file.vocab->size() != static_cast<std::size_t>(file.config.vocab_size)) {
      throw MismatchError("MIW1 vocab has " + std::to_string(file.vocab->size()) + " tokens, config says " +
                          std::to_string(file.config.vocab_size));
    }
  }
  return file;
}

void save_model(const std::string& path, const ModelConfig& config, const ModelWeights<float>& weights,
                const Vocab* vocab) {
  auto bytes = encode_miw1(config, weights, vocab);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model file " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

ModelFile load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_miw1(bytes);
}

}  // namespace parenlens
