#include "encodenet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

namespace encodenet {

namespace fs = std::filesystem;
using Reason = CheckpointError::Reason;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'E', 'N', 'C', 'N', 'E', 'T', 'C', 'K'};

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::size_t end, const fs::path& path)
      : bytes_(bytes), end_(end), path_(path) {}

  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  const unsigned char* take(std::size_t n) {
    if (n > end_ - pos_) throw CheckpointError(Reason::corrupt, "'" + path_.string() + "' is truncated");
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  const fs::path& path_;
};

std::uint32_t crc(const unsigned char* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

struct Decoded {
  std::string spec_text;
  bool trained = false;
  std::vector<NamedTensor> tensors;
};

Decoded decode(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Reason::io, "cannot open checkpoint '" + path.string() + "'");
  const std::vector<unsigned char> bytes(std::istreambuf_iterator<char>(in), {});
  if (bytes.size() < sizeof kMagic + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(Reason::corrupt, "'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + sizeof kMagic, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(Reason::version, "'" + path.string() + "' has checkpoint version " + std::to_string(version) +
                                               ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  if (bytes.size() < sizeof kMagic + 12) throw CheckpointError(Reason::corrupt, "'" + path.string() + "' is truncated");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (stored != crc(bytes.data(), body)) {
    throw CheckpointError(Reason::corrupt, "'" + path.string() + "' failed its checksum (truncated or damaged)");
  }

  Reader r(bytes, body, path);
  r.take(sizeof kMagic + 4);
  Decoded d;
  d.trained = (r.get<std::uint32_t>() & 1u) != 0;
  const auto spec_len = r.get<std::uint32_t>();
  const auto* spec = r.take(spec_len);
  d.spec_text.assign(reinterpret_cast<const char*>(spec), spec_len);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    NamedTensor nt;
    const auto name_len = r.get<std::uint16_t>();
    const auto* name = r.take(name_len);
    nt.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& s : shape) {
      s = r.get<std::uint32_t>();
      if (s == 0) throw CheckpointError(Reason::corrupt, "tensor '" + nt.name + "' has a zero dimension");
      numel *= s;
    }
    if (numel > (body / 4)) throw CheckpointError(Reason::corrupt, "tensor '" + nt.name + "' is larger than the file");
    std::vector<float> data(numel);
    std::memcpy(data.data(), r.take(numel * 4), numel * 4);
    nt.value = Tensor(std::move(shape), std::move(data));
    d.tensors.push_back(std::move(nt));
  }
  if (!r.done()) throw CheckpointError(Reason::corrupt, "'" + path.string() + "' has trailing bytes");
  return d;
}

void restore(Network& net, Decoded& d, const fs::path& path) {
  try {
    net.load_state(d.tensors);
  } catch (const ValidationError& e) {
    throw CheckpointError(Reason::spec_mismatch, "'" + path.string() + "': " + e.what());
  }
  if (d.trained) net.mark_trained();
}

}  // namespace

void save_checkpoint(const fs::path& path, const Network& net) {
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(net.trained() ? 1u : 0u));
  const std::string spec = serialize_model_spec(net.spec());
  w.put(static_cast<std::uint32_t>(spec.size()));
  w.put_bytes(spec.data(), spec.size());
  const auto state = net.state();
  w.put(static_cast<std::uint32_t>(state.size()));
  for (const auto& t : state) {
    w.put(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put(static_cast<std::uint8_t>(t.value.rank()));
    for (const auto s : t.value.shape()) w.put(static_cast<std::uint32_t>(s));
    w.put_bytes(t.value.data().data(), t.value.size() * sizeof(float));
  }
  w.put(crc(w.bytes().data(), w.bytes().size()));

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Reason::io, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError(Reason::io, "short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

Network load_checkpoint(const fs::path& path) {
  Decoded d = decode(path);
  ModelSpec spec;
  try {
    spec = parse_model_spec(d.spec_text);
  } catch (const Error& e) {
    throw CheckpointError(Reason::corrupt, "'" + path.string() + "' embeds an invalid spec: " + e.what());
  }
  Network net(std::move(spec), 0);
  restore(net, d, path);
  return net;
}

void load_checkpoint_into(const fs::path& path, Network& net) {
  Decoded d = decode(path);
  if (d.spec_text != serialize_model_spec(net.spec())) {
    throw CheckpointError(Reason::spec_mismatch,
                          "'" + path.string() + "' was saved from a different model spec than '" + net.spec().name + "'");
  }
  restore(net, d, path);
}

}  // namespace encodenet
