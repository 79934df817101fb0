#include "cil/checkpoint.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>

namespace cil {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'I', 'L', 'B', 'I', 'N', '0', '1'};

void write_blob(std::ofstream& out, const void* data, size_t bytes) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return in;
}

void write_header(std::ofstream& out, const json& header) {
  const std::string h = header.dump();
  const uint64_t len = h.size();
  write_blob(out, kMagic, sizeof(kMagic));
  write_blob(out, &len, sizeof(len));
  write_blob(out, h.data(), h.size());
}

json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError(path + ": not a checkpoint file");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string h(len, '\0');
  in.read(h.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(path + ": truncated header");
  return json::parse(h);
}

json spec_to_json(const BackboneSpec& s) {
  return {{"num_blocks", s.num_blocks}, {"channels", s.channels},   {"embed_dim", s.embed_dim},
          {"input_size", s.input_size}, {"in_channels", s.in_channels}};
}

BackboneSpec spec_from_json(const json& j) {
  BackboneSpec s;
  s.num_blocks = j.at("num_blocks").get<int>();
  s.channels = j.at("channels").get<std::vector<int>>();
  s.embed_dim = j.at("embed_dim").get<int>();
  s.input_size = j.at("input_size").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  return s;
}

}  // namespace

void save_model_checkpoint(const std::string& path, IncrementalNet& net, int round_index,
                           const std::string& rng_state) {
  json header;
  header["kind"] = "model";
  header["version"] = 1;
  header["backbone"] = spec_to_json(net.spec());
  header["head"] = {{"kind", net.head_config().kind == HeadKind::cosine ? "cosine" : "linear"},
                    {"cosine_scale", net.head_config().cosine_scale},
                    {"init_stddev", net.head_config().init_stddev}};
  header["class_ids"] = net.class_ids();
  header["round_index"] = round_index;
  header["rng_state"] = rng_state;

  auto params = net.named_parameters();
  auto buffers = net.named_buffers();
  json manifest = json::array();
  for (const auto& np : params)
    manifest.push_back({{"name", np.name}, {"size", np.tensor.numel()}, {"kind", "param"}});
  for (const auto& [name, buf] : buffers)
    manifest.push_back({{"name", name}, {"size", buf->size()}, {"kind", "buffer"}});
  header["arrays"] = manifest;

  auto out = open_out(path);
  write_header(out, header);
  for (const auto& np : params)
    write_blob(out, np.tensor.value().data(), sizeof(double) * np.tensor.numel());
  for (const auto& [name, buf] : buffers) write_blob(out, buf->data(), sizeof(double) * buf->size());
  if (!out) throw IoError("write failed for " + path);
}

LoadedCheckpoint load_model_checkpoint(const std::string& path) {
  auto in = open_in(path);
  const json header = read_header(in, path);
  if (header.at("kind") != "model") throw IoError(path + ": wrong container kind");

  HeadConfig head;
  head.kind = header.at("head").at("kind") == "cosine" ? HeadKind::cosine : HeadKind::linear;
  head.cosine_scale = header.at("head").at("cosine_scale").get<double>();
  head.init_stddev = header.at("head").at("init_stddev").get<double>();

  LoadedCheckpoint result;
  Rng scratch(0);  // construction values are overwritten below
  result.net = IncrementalNet(spec_from_json(header.at("backbone")), head, scratch);
  auto class_ids = header.at("class_ids").get<std::vector<int>>();
  if (!class_ids.empty()) result.net.expand_head(class_ids, scratch);
  result.round_index = header.at("round_index").get<int>();
  result.rng_state = header.at("rng_state").get<std::string>();

  auto params = result.net.named_parameters();
  auto buffers = result.net.named_buffers();
  for (const auto& entry : header.at("arrays")) {
    const std::string name = entry.at("name").get<std::string>();
    const Eigen::Index size = entry.at("size").get<Eigen::Index>();
    double* dst = nullptr;
    if (entry.at("kind") == "param") {
      for (auto& np : params) {
        if (np.name != name) continue;
        if (np.tensor.numel() != size) throw IoError(path + ": size mismatch for " + name);
        dst = np.tensor.value().data();
        break;
      }
    } else {
      auto it = buffers.find(name);
      if (it != buffers.end()) {
        if (it->second->size() != size) throw IoError(path + ": size mismatch for " + name);
        dst = it->second->data();
      }
    }
    if (!dst) throw IoError(path + ": unknown array " + name);
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(sizeof(double) * size));
    if (!in) throw IoError(path + ": truncated payload at " + name);
  }
  return result;
}

void save_memory_snapshot(const std::string& path, const ExemplarMemory& memory) {
  json header;
  header["kind"] = "memory";
  header["version"] = 1;
  header["policy"] = {{"kind", to_string(memory.policy().kind)},
                      {"budget", memory.policy().budget},
                      {"per_class", memory.policy().per_class}};
  header["channels"] = memory.channels();
  header["height"] = memory.height();
  header["width"] = memory.width();
  json classes = json::array();
  for (const auto& sc : memory.stored())
    classes.push_back({{"class_id", sc.class_id}, {"count", sc.count}});
  header["classes"] = classes;

  auto out = open_out(path);
  write_header(out, header);
  for (const auto& sc : memory.stored())
    write_blob(out, sc.images.data(), sizeof(float) * sc.images.size());
  if (!out) throw IoError("write failed for " + path);
}

ExemplarMemory load_memory_snapshot(const std::string& path) {
  auto in = open_in(path);
  const json header = read_header(in, path);
  if (header.at("kind") != "memory") throw IoError(path + ": wrong container kind");
  MemoryPolicy policy;
  policy.kind = parse_memory_policy(header.at("policy").at("kind").get<std::string>());
  policy.budget = header.at("policy").at("budget").get<int>();
  policy.per_class = header.at("policy").at("per_class").get<int>();
  const int channels = header.at("channels").get<int>();
  const int height = header.at("height").get<int>();
  const int width = header.at("width").get<int>();
  const Eigen::Index ss = static_cast<Eigen::Index>(channels) * height * width;

  std::vector<ExemplarMemory::StoredClass> classes;
  for (const auto& entry : header.at("classes")) {
    ExemplarMemory::StoredClass sc;
    sc.class_id = entry.at("class_id").get<int>();
    sc.count = entry.at("count").get<Eigen::Index>();
    sc.images.resize(sc.count * ss);
    in.read(reinterpret_cast<char*>(sc.images.data()),
            static_cast<std::streamsize>(sizeof(float) * sc.images.size()));
    if (!in) throw IoError(path + ": truncated memory payload");
    classes.push_back(std::move(sc));
  }
  ExemplarMemory mem(policy, channels, height, width);
  mem.restore(policy, channels, height, width, std::move(classes));
  return mem;
}

}  // namespace cil
