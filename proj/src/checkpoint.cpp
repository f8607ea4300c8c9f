#include "poseroi/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "poseroi/data.hpp"
#include "poseroi/error.hpp"

namespace poseroi {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::string_view kMagic = "POSEROI-CHECKPOINT ";

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

json tensor_entry(const std::string& name, const std::string& group, const Tensor& t) {
  return {{"name", name}, {"group", group}, {"shape", t.shape()}};
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const fs::path& path) {
  json tensors = json::array();
  std::string payload;
  const auto append = [&](const std::string& name, const std::string& group, const Tensor& t) {
    tensors.push_back(tensor_entry(name, group, t));
    for (double v : t.data()) put_f64(payload, v);
  };
  for (const std::string& name : checkpoint.weights.names()) append(name, "weights", checkpoint.weights.at(name));
  for (const auto& [name, t] : checkpoint.velocity) append(name, "velocity", t);

  json config;
  try {
    config = json::parse(checkpoint.config_json);
  } catch (const json::parse_error&) {
    throw ConfigError("save_checkpoint: config snapshot is not valid JSON");
  }
  const json header = {{"iteration", checkpoint.iteration},
                       {"config", std::move(config)},
                       {"tensors", std::move(tensors)},
                       {"payload_bytes", payload.size()},
                       {"payload_fnv1a", hex64(fnv1a(std::string_view(payload)))}};
  const std::string header_text = header.dump();

  std::string file = std::string(kMagic) + std::to_string(kCheckpointVersion) + "\n" +
                     std::to_string(header_text.size()) + "\n" + header_text + "\n";
  file += payload;

  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    out.close();
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string file = std::move(buf).str();
  const auto corrupt = [&](const std::string& what) { return DataError("corrupt checkpoint " + path.string() + ": " + what); };

  if (file.compare(0, kMagic.size(), kMagic) != 0) throw corrupt("missing POSEROI-CHECKPOINT header");
  std::size_t pos = kMagic.size();
  const std::size_t eol = file.find('\n', pos);
  if (eol == std::string::npos) throw corrupt("truncated header");
  const std::string version = file.substr(pos, eol - pos);
  if (version != std::to_string(kCheckpointVersion)) {
    throw DataError("checkpoint " + path.string() + " has version " + version + ", this build reads version " +
                    std::to_string(kCheckpointVersion));
  }
  pos = eol + 1;
  const std::size_t len_end = file.find('\n', pos);
  if (len_end == std::string::npos || len_end == pos || len_end - pos > 12) throw corrupt("truncated header");
  const std::string len_text = file.substr(pos, len_end - pos);
  if (len_text.find_first_not_of("0123456789") != std::string::npos) throw corrupt("bad header length");
  const std::size_t header_len = std::stoull(len_text);
  pos = len_end + 1;
  if (file.size() < pos + header_len + 1) throw corrupt("truncated header");

  json header;
  try {
    header = json::parse(file.substr(pos, header_len));
  } catch (const json::parse_error&) {
    throw corrupt("header is not valid JSON");
  }
  pos += header_len + 1;

  Checkpoint out;
  try {
    const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
    if (file.size() - pos != payload_bytes) {
      throw corrupt("payload is " + std::to_string(file.size() - pos) + " bytes, header says " +
                    std::to_string(payload_bytes));
    }
    const std::string_view payload(file.data() + pos, payload_bytes);
    if (hex64(fnv1a(std::string_view(payload))) !=
        header.at("payload_fnv1a").get<std::string>()) {
      throw corrupt("payload checksum mismatch");
    }
    out.iteration = header.at("iteration").get<std::int64_t>();
    out.config_json = header.at("config").dump();

    std::size_t offset = 0;
    for (const json& entry : header.at("tensors")) {
      const Shape shape = entry.at("shape").get<Shape>();
      for (int d : shape) {
        if (d < 1) throw corrupt("tensor extents must be positive");
      }
      const std::size_t n = element_count(shape);
      if (offset + 8 * n > payload_bytes) throw corrupt("tensor table overruns payload");
      std::vector<double> values(n);
      for (std::size_t i = 0; i < n; ++i) values[i] = get_f64(payload.data() + offset + 8 * i);
      offset += 8 * n;
      const std::string name = entry.at("name").get<std::string>();
      const std::string group = entry.at("group").get<std::string>();
      if (group == "weights") {
        if (out.weights.contains(name)) throw corrupt("duplicate tensor " + name);
        out.weights.add(name, Tensor(shape, std::move(values)));
      } else if (group == "velocity") {
        out.velocity[name] = Tensor(shape, std::move(values));
      } else {
        throw corrupt("unknown tensor group " + group);
      }
    }
    if (offset != payload_bytes) throw corrupt("payload has trailing bytes");
  } catch (const json::exception& e) {
    throw corrupt(std::string("malformed header: ") + e.what());
  }
  return out;
}

void restore_weights(ParameterStore& target, const Checkpoint& checkpoint) {
  std::map<std::string, Tensor> values;
  for (const std::string& name : checkpoint.weights.names()) values.emplace(name, checkpoint.weights.at(name));
  target.assign(values);
  for (const auto& [name, v] : checkpoint.velocity) {
    if (!target.contains(name)) throw ShapeError("velocity '" + name + "' has no matching tensor in the model");
    if (v.shape() != target.at(name).shape()) {
      throw ShapeError("velocity '" + name + "' has shape " + to_string(v.shape()) + " but the model expects " +
                       to_string(target.at(name).shape()));
    }
  }
}

}  // namespace poseroi
