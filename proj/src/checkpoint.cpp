#include "cpvt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cpvt/errors.hpp"
#include "cpvt/rng.hpp"

namespace cpvt {

namespace {

constexpr char kMagic[8] = {'C', 'P', 'V', 'T', 'C', 'K', 'P', 'T'};

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_bytes(std::vector<unsigned char>& buf, const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  buf.insert(buf.end(), p, p + n);
}

void put_payload(std::vector<unsigned char>& buf, const Tensor& t) {
  if (t.precision() == Precision::f32) {
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
    }
  } else {
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      put_u64(buf, std::bit_cast<std::uint64_t>(t[i]));
    }
  }
}

struct ByteReader {
  const std::vector<unsigned char>& buf;
  std::size_t pos = 0;
  std::size_t end = 0;

  void need(std::size_t n) const {
    if (n > end - pos) throw CorruptionError("truncated checkpoint file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos + std::size_t(i)]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[pos + std::size_t(i)]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw CorruptionError("malformed checkpoint config line '" + line + "'");
    }
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  const auto params = named_params(m);
  std::vector<unsigned char> buf;
  put_bytes(buf, kMagic, sizeof(kMagic));
  put_u32(buf, kCheckpointVersion);

  const std::string cfg = config_text(m.cfg);
  put_u64(buf, cfg.size());
  put_bytes(buf, cfg.data(), cfg.size());

  put_u32(buf, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    put_bytes(buf, name.data(), name.size());
    buf.push_back(t.precision() == Precision::f32 ? 0 : 1);
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) {
      put_u64(buf, static_cast<std::uint64_t>(t.dim(i)));
    }
  }
  for (const auto& [name, t] : params) put_payload(buf, t);

  Fnv1a hash;
  hash.update(buf.data(), buf.size());
  put_u64(buf, hash.digest());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed to write checkpoint to '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<unsigned char> buf(
      (std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 4 + 8 ||
      std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CorruptionError("'" + path + "' is not a checkpoint file");
  }

  ByteReader r{buf, sizeof(kMagic), buf.size() - 8};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }

  Fnv1a hash;
  hash.update(buf.data(), buf.size() - 8);
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) {
    stored |= std::uint64_t(buf[buf.size() - 8 + std::size_t(i)]) << (8 * i);
  }
  if (hash.digest() != stored) {
    throw CorruptionError("checkpoint digest mismatch in '" + path + "'");
  }

  Checkpoint ckpt;
  ckpt.version = version;
  ckpt.digest = stored;
  ckpt.config = parse_config_text(r.str(r.u64()));

  struct Entry {
    std::string name;
    Precision prec;
    Shape shape;
  };
  std::vector<Entry> entries;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u32());
    r.need(1);
    const unsigned char prec = r.buf[r.pos++];
    if (prec > 1) throw CorruptionError("bad precision tag in checkpoint");
    e.prec = prec == 0 ? Precision::f32 : Precision::f64;
    const std::uint32_t rank = r.u32();
    for (std::uint32_t a = 0; a < rank; ++a) {
      e.shape.push_back(static_cast<std::int64_t>(r.u64()));
    }
    entries.push_back(std::move(e));
  }
  for (auto& e : entries) {
    const std::int64_t n = shape_numel(e.shape);
    std::vector<double> values(static_cast<std::size_t>(n));
    if (e.prec == Precision::f32) {
      for (auto& v : values) v = std::bit_cast<float>(r.u32());
    } else {
      for (auto& v : values) v = std::bit_cast<double>(r.u64());
    }
    ckpt.tensors.emplace_back(
        e.name, Tensor::from_data(std::move(e.shape), std::move(values), e.prec));
  }
  if (r.pos != r.end) {
    throw CorruptionError("checkpoint has trailing bytes after payloads");
  }
  return ckpt;
}

Model load_checkpoint(const std::string& path) {
  Checkpoint ckpt = read_checkpoint(path);
  Model m = build_model(model_config_from_kv(ckpt.config), 0);

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : named_params(m)) by_name.emplace(name, t);
  if (by_name.size() != ckpt.tensors.size()) {
    throw CorruptionError("checkpoint holds " +
                          std::to_string(ckpt.tensors.size()) +
                          " tensors but the rebuilt model has " +
                          std::to_string(by_name.size()));
  }
  for (auto& [name, src] : ckpt.tensors) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CorruptionError("checkpoint tensor '" + name +
                            "' does not exist in the rebuilt model");
    }
    Tensor dst = it->second;
    if (src.shape() != dst.shape() || src.precision() != dst.precision()) {
      throw CorruptionError("checkpoint tensor '" + name +
                            "' does not match the rebuilt model: stored " +
                            shape_str(src.shape()) + ", expected " +
                            shape_str(dst.shape()));
    }
    for (std::int64_t i = 0; i < src.numel(); ++i) dst[i] = src[i];
  }
  return m;
}

std::uint64_t param_checksum(const Model& m) {
  Fnv1a hash;
  std::vector<unsigned char> buf;
  for (const auto& [name, t] : named_params(m)) {
    buf.clear();
    put_bytes(buf, name.data(), name.size());
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) {
      put_u64(buf, static_cast<std::uint64_t>(t.dim(i)));
    }
    put_payload(buf, t);
    hash.update(buf.data(), buf.size());
  }
  return hash.digest();
}

}  // namespace cpvt
