#include "focatt/checkpoint.hpp"

#include "focatt/binary_io.hpp"
#include "focatt/error.hpp"

namespace focatt {

namespace {
constexpr std::string_view kMagic = "FOCATTCK";
}

std::optional<std::string> Checkpoint::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  return std::nullopt;
}

const std::string& Checkpoint::require_meta(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  throw IoError("checkpoint is missing metadata key '" + key + "'");
}

const Mlp& Checkpoint::require_network(const std::string& name) const {
  for (const auto& [n, net] : networks) {
    if (n == name) return net;
  }
  throw IoError("checkpoint is missing network '" + name + "'");
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_raw(kMagic);
  w.put_u32(kCheckpointVersion);
  w.put_u64(ckpt.seed);
  w.put_u32(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.put_string(k);
    w.put_string(v);
  }
  w.put_u32(static_cast<std::uint32_t>(ckpt.networks.size()));
  for (const auto& [name, net] : ckpt.networks) {
    w.put_string(name);
    w.put_f64(net.dropout_rate());
    w.put_u32(static_cast<std::uint32_t>(net.layer_count()));
    for (const auto& layer : net.layers()) {
      w.put_u32(static_cast<std::uint32_t>(layer.in));
      w.put_u32(static_cast<std::uint32_t>(layer.out));
      w.put_u8(static_cast<std::uint8_t>(layer.activation));
    }
  }
  for (const auto& [name, net] : ckpt.networks) {
    for (const auto& layer : net.layers()) {
      w.put_f64s(layer.weight);
      w.put_f64s(layer.bias);
    }
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  if (r.get_raw(kMagic.size()) != kMagic) throw IoError("not a checkpoint file (bad magic)");
  const auto version = r.get_u32();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  ckpt.seed = r.get_u64();
  const auto meta_count = r.get_u32();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    auto k = r.get_string();
    auto v = r.get_string();
    ckpt.meta.emplace_back(std::move(k), std::move(v));
  }

  struct Header {
    std::string name;
    double dropout;
    std::vector<Dense> layers;
  };
  std::vector<Header> headers(r.get_u32());
  for (auto& h : headers) {
    h.name = r.get_string();
    h.dropout = r.get_f64();
    h.layers.resize(r.get_u32());
    for (auto& layer : h.layers) {
      layer.in = r.get_u32();
      layer.out = r.get_u32();
      const auto tag = r.get_u8();
      if (tag > static_cast<std::uint8_t>(Activation::softmax)) throw IoError("unknown activation tag in checkpoint");
      layer.activation = static_cast<Activation>(tag);
    }
  }
  for (auto& h : headers) {
    for (auto& layer : h.layers) {
      layer.weight.resize(layer.in * layer.out);
      layer.bias.resize(layer.out);
      r.get_f64s(layer.weight);
      r.get_f64s(layer.bias);
    }
    ckpt.networks.emplace_back(h.name, Mlp(std::move(h.layers), h.dropout));
  }
  if (!r.at_end()) throw IoError("trailing bytes after checkpoint parameters");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  ByteWriter w;
  const auto bytes = encode_checkpoint(ckpt);
  w.put_raw(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  w.write_to(path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace focatt
