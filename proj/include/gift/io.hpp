#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gift/adapter.hpp"
#include "gift/common.hpp"
#include "gift/model.hpp"
#include "json.hpp"

namespace gift {

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

// Container layout: magic "GFT1", u32 version, u32 header length, UTF-8
// JSON header {kind, config, manifest:[{name, shape, offset}]}, then the
// payload of float32 tensors concatenated in manifest order.
inline constexpr char kContainerMagic[4] = {'G', 'F', 'T', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},             {"max_seq", c.max_seq}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.validate();
  return c;
}

template <class S>
void write_container(const std::string& path, const std::string& kind,
                     nlohmann::json header,
                     const std::vector<const Tensor<S>*>& tensors,
                     const std::vector<std::string>& names) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    manifest.push_back({{"name", names[i]},
                        {"shape", tensors[i]->shape},
                        {"offset", offset}});
    offset += tensors[i]->numel() * sizeof(float);
  }
  header["kind"] = kind;
  header["manifest"] = std::move(manifest);
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("container: cannot open " + path + " for writing");
  out.write(kContainerMagic, 4);
  const std::uint32_t version = kContainerVersion;
  const auto hlen = static_cast<std::uint32_t>(htext.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  std::vector<float> buf;
  for (const auto* t : tensors) {
    buf.resize(t->numel());
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<float>(t->data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw io_error("container: write failed for " + path);
}

struct RawContainer {
  nlohmann::json header;
  std::vector<char> payload;
};

inline RawContainer read_container(const std::string& path,
                                   const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("container: cannot open " + path);
  char magic[4];
  std::uint32_t version = 0, hlen = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hlen), 4);
  if (!in || std::memcmp(magic, kContainerMagic, 4) != 0)
    throw schema_error("container: bad magic in " + path);
  if (version != kContainerVersion)
    throw schema_error("container: unsupported version in " + path);
  std::string htext(hlen, '\0');
  in.read(htext.data(), hlen);
  if (!in) throw schema_error("container: truncated header in " + path);
  RawContainer rc;
  rc.header = nlohmann::json::parse(htext, nullptr, false);
  if (rc.header.is_discarded())
    throw schema_error("container: header is not valid JSON in " + path);
  if (rc.header.at("kind").get<std::string>() != expected_kind)
    throw schema_error("container: expected kind '" + expected_kind + "' in " +
                       path);
  rc.payload.assign(std::istreambuf_iterator<char>(in),
                    std::istreambuf_iterator<char>());
  return rc;
}

// Validates one manifest entry against the expected spec and copies the
// float32 payload slice into an S tensor.
template <class S>
TensorPtr<S> load_entry(const RawContainer& rc, const nlohmann::json& entry,
                        const TensorSpec& expected, std::uint64_t min_offset,
                        const std::string& path) {
  if (entry.at("name").get<std::string>() != expected.name)
    throw schema_error("container: manifest order mismatch at " +
                       expected.name + " in " + path);
  if (entry.at("shape").get<std::vector<std::size_t>>() != expected.shape)
    throw schema_error("container: shape mismatch for " + expected.name +
                       " in " + path);
  const auto offset = entry.at("offset").get<std::uint64_t>();
  const std::size_t numel = Tensor<S>::numel_of(expected.shape);
  if (offset < min_offset || offset + numel * sizeof(float) > rc.payload.size())
    throw schema_error("container: offset out of bounds for " + expected.name +
                       " in " + path);
  auto t = make_tensor<S>(expected.shape);
  const char* src = rc.payload.data() + offset;
  for (std::size_t i = 0; i < numel; ++i) {
    float f;
    std::memcpy(&f, src + i * sizeof(float), sizeof(float));
    t->data[i] = static_cast<S>(f);
  }
  return t;
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const Checkpoint<S>& ckpt) {
  std::vector<const Tensor<S>*> tensors;
  tensors.reserve(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) tensors.push_back(t.get());
  nlohmann::json header = {{"config", detail::config_to_json(ckpt.config)}};
  detail::write_container(path, "checkpoint", std::move(header), tensors,
                          ckpt.names);
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  const auto rc = detail::read_container(path, "checkpoint");
  Checkpoint<S> ckpt;
  ckpt.config = detail::config_from_json(rc.header.at("config"));
  const auto manifest = canonical_manifest(ckpt.config);
  const auto& entries = rc.header.at("manifest");
  if (entries.size() != manifest.size())
    throw schema_error("container: manifest size mismatch in " + path);
  std::uint64_t min_offset = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    auto t = detail::load_entry<S>(rc, entries[i], manifest[i], min_offset, path);
    min_offset = entries[i].at("offset").get<std::uint64_t>();
    ckpt.index.emplace(manifest[i].name, ckpt.names.size());
    ckpt.names.push_back(manifest[i].name);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

template <class S>
void save_adapter(const std::string& path, const LoraAdapter<S>& adapter) {
  std::vector<const Tensor<S>*> tensors;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < adapter.targets.size(); ++i) {
    names.push_back(adapter.targets[i] + ".lora_a");
    tensors.push_back(adapter.factors[i].a.get());
    names.push_back(adapter.targets[i] + ".lora_b");
    tensors.push_back(adapter.factors[i].b.get());
  }
  nlohmann::json header = {{"config", detail::config_to_json(adapter.config)},
                           {"rank", adapter.rank},
                           {"alpha", adapter.alpha},
                           {"dropout", adapter.dropout_p},
                           {"targets", adapter.targets}};
  detail::write_container(path, "adapter", std::move(header), tensors, names);
}

template <class S>
LoraAdapter<S> load_adapter(const std::string& path) {
  const auto rc = detail::read_container(path, "adapter");
  LoraAdapter<S> ad;
  ad.config = detail::config_from_json(rc.header.at("config"));
  ad.rank = rc.header.at("rank").get<int>();
  ad.alpha = rc.header.at("alpha").get<double>();
  ad.dropout_p = rc.header.at("dropout").get<double>();
  const auto targets = rc.header.at("targets").get<std::vector<std::string>>();
  if (ad.rank < 1) throw schema_error("container: bad adapter rank in " + path);

  std::unordered_map<std::string, std::vector<std::size_t>> shapes;
  for (const auto& spec : canonical_manifest(ad.config))
    shapes[spec.name] = spec.shape;
  const auto& entries = rc.header.at("manifest");
  if (entries.size() != targets.size() * 2)
    throw schema_error("container: adapter manifest size mismatch in " + path);
  std::uint64_t min_offset = 0;
  const auto r = static_cast<std::size_t>(ad.rank);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto it = shapes.find(targets[i]);
    if (it == shapes.end() || it->second.size() != 2)
      throw schema_error("container: adapter target " + targets[i] +
                         " not a checkpoint matrix in " + path);
    const TensorSpec a_spec{targets[i] + ".lora_a", {r, it->second[1]}};
    const TensorSpec b_spec{targets[i] + ".lora_b", {it->second[0], r}};
    LoraFactors<S> f;
    f.a = detail::load_entry<S>(rc, entries[2 * i], a_spec, min_offset, path);
    min_offset = entries[2 * i].at("offset").get<std::uint64_t>();
    f.b = detail::load_entry<S>(rc, entries[2 * i + 1], b_spec, min_offset, path);
    min_offset = entries[2 * i + 1].at("offset").get<std::uint64_t>();
    ad.index.emplace(targets[i], ad.targets.size());
    ad.targets.push_back(targets[i]);
    ad.factors.push_back(std::move(f));
  }
  return ad;
}

inline std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("read_file_bytes: cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace gift
