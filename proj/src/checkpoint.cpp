#include "evt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "evt/errors.hpp"

namespace evt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'V', 'T', 'C'};
constexpr char kMaskTag[4] = {'M', 'A', 'S', 'K'};

enum : std::uint8_t { kEncF32 = 0, kEncF64 = 1, kEncI8 = 2, kEncF16 = 3 };

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf.insert(buf.end(), p, p + n);
  }
  void str(const std::string& s) { bytes(s.data(), s.size()); }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  void need(std::uint64_t n, const char* what) const {
    if (n > buf_.size() - pos_) throw FormatError(std::string("truncated ") + what, pos_);
  }
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint64_t pos() const { return pos_; }
  void skip(std::uint64_t n) { pos_ += n; }
  bool done() const { return pos_ == buf_.size(); }
  const std::uint8_t* at(std::uint64_t off) const { return buf_.data() + off; }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::uint64_t pos_ = 0;
};

std::string encode_mask(const std::vector<std::uint8_t>& keep) {
  std::string s(keep.size(), '1');
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) s[i] = '0';
  return s;
}

struct Entry {
  std::string name;
  std::uint8_t enc = kEncF32;
  DType dtype = DType::f32;
  Shape shape;
  double scale = 0;
  std::vector<std::uint8_t> payload;
};

Entry encode(const std::string& name, const Tensor& t, const TensorEncoding& te) {
  Entry e;
  e.name = name;
  e.dtype = t.dtype();
  e.shape = t.shape();
  const auto n = static_cast<std::size_t>(t.numel());
  switch (te.kind) {
    case TensorEncoding::Kind::native:
      e.enc = t.dtype() == DType::f32 ? kEncF32 : kEncF64;
      std::visit(
          [&](const auto& v) {
            e.payload.resize(v.size() * sizeof(v[0]));
            std::memcpy(e.payload.data(), v.data(), e.payload.size());
          },
          t.storage());
      break;
    case TensorEncoding::Kind::fp16: {
      e.enc = kEncF16;
      e.payload.resize(n * 2);
      const auto vals = t.to_vector();
      for (std::size_t i = 0; i < n; ++i) {
        if (round_to_half(vals[i]) != vals[i])
          throw ContractError("parameter " + name + " is not on the binary16 grid");
        const std::uint16_t h = half_bits(vals[i]);
        std::memcpy(e.payload.data() + 2 * i, &h, 2);
      }
      break;
    }
    case TensorEncoding::Kind::int8: {
      e.enc = kEncI8;
      e.scale = te.scale;
      const auto q = quantize_int8(t, te.scale);
      if (!dequantize(q, te.scale, t.shape(), t.dtype()).bit_equal(t))
        throw ContractError("parameter " + name + " is not on its int8 grid");
      e.payload.resize(n);
      std::memcpy(e.payload.data(), q.data(), n);
      break;
    }
  }
  return e;
}

Tensor decode(const Entry& e, const std::uint8_t* p, std::uint64_t offset) {
  const auto n = static_cast<std::size_t>(numel_of(e.shape));
  switch (e.enc) {
    case kEncF32: {
      std::vector<float> v(n);
      std::memcpy(v.data(), p, n * 4);
      return Tensor::from_floats(e.shape, std::move(v));
    }
    case kEncF64: {
      std::vector<double> v(n);
      std::memcpy(v.data(), p, n * 8);
      return Tensor::from_values(e.shape, std::move(v), DType::f64);
    }
    case kEncF16: {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, p + 2 * i, 2);
        v[i] = half_to_double(h);
      }
      return Tensor::from_values(e.shape, std::move(v), e.dtype);
    }
    case kEncI8: {
      std::vector<std::int8_t> q(n);
      std::memcpy(q.data(), p, n);
      if (!(e.scale > 0)) throw FormatError("non-positive int8 scale for " + e.name, offset);
      return dequantize(q, e.scale, e.shape, e.dtype);
    }
    default:
      throw FormatError("unknown encoding for " + e.name, offset);
  }
}

std::uint64_t element_bytes(std::uint8_t enc) {
  switch (enc) {
    case kEncF32: return 4;
    case kEncF64: return 8;
    case kEncF16: return 2;
    case kEncI8: return 1;
    default: return 0;
  }
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const SegModel& model, const SaveOptions& options) {
  Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  nlohmann::json header{{"model", model.config.to_json()}, {"head_mask", model.head_mask}};
  const std::string hs = header.dump();
  w.put<std::uint64_t>(hs.size());
  w.str(hs);

  std::vector<Entry> entries;
  for (const auto& [name, t] : model.params) {
    auto it = options.encoding.find(name);
    entries.push_back(encode(name, t, it == options.encoding.end() ? TensorEncoding{} : it->second));
  }
  for (const auto& [name, te] : options.encoding)
    if (!model.has_param(name)) throw ContractError("encoding given for unknown parameter " + name);

  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    w.str(e.name);
    w.put<std::uint8_t>(e.enc);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    w.put<double>(e.scale);
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(e.payload.size());
    offset += e.payload.size();
  }
  w.put<std::uint64_t>(offset);
  for (const auto& e : entries) w.bytes(e.payload.data(), e.payload.size());

  if (!model.weight_masks.empty() || !options.mask_ledger.is_null()) {
    nlohmann::json masks = nlohmann::json::object();
    for (const auto& [name, keep] : model.weight_masks) masks[name] = encode_mask(keep);
    const std::string ms = nlohmann::json{{"weight_masks", masks}, {"ledger", options.mask_ledger}}.dump();
    w.bytes(kMaskTag, 4);
    w.put<std::uint64_t>(ms.size());
    w.str(ms);
  }
  return std::move(w.buf);
}

CheckpointContents deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad magic", 0);
  const auto version_at = r.pos();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw UnsupportedVersionError(version, version_at);

  CheckpointContents out;
  const auto header_len = r.get<std::uint64_t>("header length");
  const auto header_at = r.pos();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str(header_len, "header"));
    out.model.config = ModelConfig::from_json(header.at("model"));
    out.model.head_mask = header.at("head_mask").get<std::vector<std::vector<std::uint8_t>>>();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid header: ") + e.what(), header_at);
  }

  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<std::pair<Entry, std::pair<std::uint64_t, std::uint64_t>>> dir;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto entry_at = r.pos();
    Entry e;
    e.name = r.str(r.get<std::uint32_t>("name length"), "name");
    e.enc = r.get<std::uint8_t>("encoding");
    const auto dt = r.get<std::uint8_t>("dtype");
    if (dt > 1 || element_bytes(e.enc) == 0) throw FormatError("bad encoding for " + e.name, entry_at);
    e.dtype = static_cast<DType>(dt);
    const auto ndim = r.get<std::uint32_t>("ndim");
    if (ndim > 8) throw FormatError("implausible rank for " + e.name, entry_at);
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto v = r.get<std::uint64_t>("dims");
      if (v == 0 || v > (1ULL << 32)) throw FormatError("bad dimension for " + e.name, entry_at);
      e.shape.push_back(static_cast<std::int64_t>(v));
    }
    e.scale = r.get<double>("scale");
    const auto off = r.get<std::uint64_t>("offset");
    const auto len = r.get<std::uint64_t>("length");
    if (len != static_cast<std::uint64_t>(numel_of(e.shape)) * element_bytes(e.enc))
      throw FormatError("payload length does not match shape for " + e.name, entry_at);
    dir.push_back({std::move(e), {off, len}});
  }
  const auto payload_len = r.get<std::uint64_t>("payload length");
  const auto payload_at = r.pos();
  r.need(payload_len, "payload");
  for (auto& [e, span] : dir) {
    if (span.first > payload_len || span.second > payload_len - span.first)
      throw FormatError("tensor " + e.name + " lies outside the payload", payload_at);
    out.model.params[e.name] = decode(e, r.at(payload_at + span.first), payload_at + span.first);
    if (e.enc == kEncI8) out.encoding[e.name] = {TensorEncoding::Kind::int8, e.scale};
    if (e.enc == kEncF16) out.encoding[e.name] = {TensorEncoding::Kind::fp16, 0};
  }
  r.skip(payload_len);

  if (!r.done()) {
    const auto section_at = r.pos();
    if (r.str(4, "section tag") != std::string(kMaskTag, 4)) throw FormatError("unknown section", section_at);
    const auto n = r.get<std::uint64_t>("mask length");
    const auto body_at = r.pos();
    try {
      const auto body = nlohmann::json::parse(r.str(n, "mask section"));
      for (const auto& [name, s] : body.at("weight_masks").items()) {
        const auto str = s.get<std::string>();
        std::vector<std::uint8_t> keep(str.size());
        for (std::size_t i = 0; i < str.size(); ++i) keep[i] = str[i] == '1';
        if (!out.model.has_param(name) || static_cast<std::int64_t>(keep.size()) != out.model.param(name).numel())
          throw FormatError("mask does not match parameter " + name, body_at);
        out.model.weight_masks[name] = std::move(keep);
      }
      out.mask_ledger = body.at("ledger");
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(std::string("invalid mask section: ") + e.what(), body_at);
    }
    if (!r.done()) throw FormatError("trailing bytes", r.pos());
  }
  return out;
}

void save_checkpoint(const SegModel& model, const std::filesystem::path& path, const SaveOptions& options) {
  const auto bytes = serialize_checkpoint(model, options);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

SegModel load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(path).model; }

}  // namespace evt
