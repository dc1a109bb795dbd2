#include "stlm/modelfile.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <system_error>

#include "stlm/error.hpp"
#include "stlm/half.hpp"
#include "stlm/md5.hpp"

namespace stlm {
namespace {

constexpr char kMagic[4] = {'S', 'T', 'L', 'M'};
constexpr char kFooterTag[4] = {'E', 'N', 'D', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void pad_to(std::size_t alignment) {
    while (out_.size() % alignment != 0) out_.push_back(0);
  }
  std::size_t size() const { return out_.size(); }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > in_.size() - pos_) fail(ErrorCode::CorruptFile, "model file is truncated");
    const auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t pos() const { return pos_; }

 private:
  std::uint64_t le(int n) {
    const auto s = take(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> encode_tensor(const Tensor& t, Dtype dtype, const std::string& name) {
  std::vector<std::uint8_t> out;
  if (dtype == Dtype::Q4) {
    const auto* q = std::get_if<QTensor>(&t);
    if (!q) fail(ErrorCode::FormatError, "tensor " + name + " is dense but marked q4");
    return serialize(*q);
  }
  const auto* d = std::get_if<DenseTensor>(&t);
  if (!d) fail(ErrorCode::FormatError, "tensor " + name + " is quantized but marked dense");
  if (dtype == Dtype::F32) {
    out.resize(d->data.size() * 4);
    for (std::size_t i = 0; i < d->data.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(d->data[i]);
      for (int k = 0; k < 4; ++k) out[4 * i + k] = static_cast<std::uint8_t>(bits >> (8 * k));
    }
  } else {
    out.resize(d->data.size() * 2);
    for (std::size_t i = 0; i < d->data.size(); ++i) {
      const std::uint16_t bits = float_to_half(d->data[i]);
      out[2 * i] = static_cast<std::uint8_t>(bits & 0xFF);
      out[2 * i + 1] = static_cast<std::uint8_t>(bits >> 8);
    }
  }
  return out;
}

Tensor decode_tensor(const TensorRecord& rec, std::span<const std::uint8_t> bytes) {
  if (rec.dtype == Dtype::Q4) {
    if (rec.dims.size() != 2) fail(ErrorCode::FormatError, "q4 tensor " + rec.name + " must be 2-D");
    return deserialize(rec.dims[0], rec.dims[1], bytes);
  }
  DenseTensor d(rec.dims);
  if (rec.dtype == Dtype::F32) {
    for (std::size_t i = 0; i < d.data.size(); ++i) {
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[4 * i + k]) << (8 * k);
      d.data[i] = std::bit_cast<float>(bits);
    }
  } else {
    for (std::size_t i = 0; i < d.data.size(); ++i) {
      d.data[i] = half_to_float(static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8)));
    }
  }
  return d;
}

Dtype dtype_from_byte(std::uint8_t b) {
  if (b > 2) fail(ErrorCode::FormatError, "unknown tensor dtype " + std::to_string(b));
  return static_cast<Dtype>(b);
}

}  // namespace

std::string_view to_string(Dtype dtype) {
  switch (dtype) {
    case Dtype::F32: return "f32";
    case Dtype::F16: return "f16";
    case Dtype::Q4: return "q4";
  }
  return "?";
}

std::uint64_t storage_bytes(Dtype dtype, std::span<const std::size_t> dims) {
  const std::uint64_t n = element_count(dims);
  switch (dtype) {
    case Dtype::F32: return n * 4;
    case Dtype::F16: return n * 2;
    case Dtype::Q4: return n / kBlockSize * kBlockBytes;
  }
  return 0;
}

std::vector<std::uint8_t> serialize_container(const Container& c, FileSummary* summary) {
  const ModelConfig& cfg = c.header.config;
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(c.header.kind));
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (std::size_t v : {cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.vocab_size, cfg.max_context, cfg.d_ff}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.f32(cfg.rotary_fraction);
  w.f32(cfg.layernorm_eps);
  w.f32(cfg.rope_base);
  w.u32(c.header.lora_rank);
  w.f32(c.header.lora_alpha);
  w.u32(static_cast<std::uint32_t>(c.header.vocab_text.size()));
  w.bytes(c.header.vocab_text.data(), c.header.vocab_text.size());

  // Encode payloads first so the table can carry final offsets.
  std::vector<TensorRecord> table;
  std::vector<std::vector<std::uint8_t>> payloads;
  std::size_t table_bytes = 0;
  for (const auto& [name, t] : c.tensors) {
    const auto it = c.dtypes.find(name);
    const Dtype dtype = it != c.dtypes.end() ? it->second : (is_quantized(t) ? Dtype::Q4 : Dtype::F32);
    payloads.push_back(encode_tensor(t, dtype, name));
    table.push_back({name, dtype, tensor_dims(t), 0, payloads.back().size()});
    if (name.size() > 0xFFFF || table.back().dims.size() > 0xFF) {
      fail(ErrorCode::FormatError, "tensor name or rank too large");
    }
    table_bytes += 2 + name.size() + 2 + 8 * table.back().dims.size() + 16;
  }
  std::uint64_t offset = w.size() + table_bytes;
  for (TensorRecord& rec : table) {
    offset = (offset + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
    rec.offset = offset;
    offset += rec.length;
  }
  for (const TensorRecord& rec : table) {
    w.u16(static_cast<std::uint16_t>(rec.name.size()));
    w.bytes(rec.name.data(), rec.name.size());
    w.u8(static_cast<std::uint8_t>(rec.dtype));
    w.u8(static_cast<std::uint8_t>(rec.dims.size()));
    for (std::size_t d : rec.dims) w.u64(d);
    w.u64(rec.offset);
    w.u64(rec.length);
  }
  for (std::size_t i = 0; i < table.size(); ++i) {
    w.pad_to(kPayloadAlignment);
    w.bytes(payloads[i].data(), payloads[i].size());
  }
  Md5 h;
  h.update(std::span<const std::uint8_t>(w.data()));
  const auto digest = h.digest();
  w.bytes(digest.data(), digest.size());
  w.bytes(kFooterTag, 4);

  if (summary) {
    summary->table = table;
    summary->bytes_by_dtype.clear();
    for (const auto& rec : table) summary->bytes_by_dtype[rec.dtype] += rec.length;
    summary->file_bytes = w.size();
  }
  return std::move(w.data());
}

Container parse_container(std::span<const std::uint8_t> bytes, FileSummary* summary) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::FormatError, "not an STLM file (bad magic)");
  }
  Reader r(bytes);
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    fail(ErrorCode::FormatError, "unsupported STLM version " + std::to_string(version));
  }
  if (bytes.size() < kFooterBytes + 8) fail(ErrorCode::CorruptFile, "model file is truncated");
  const std::size_t body = bytes.size() - kFooterBytes;
  Md5 h;
  h.update(bytes.first(body));
  const auto digest = h.digest();
  if (std::memcmp(bytes.data() + body + 16, kFooterTag, 4) != 0 ||
      std::memcmp(bytes.data() + body, digest.data(), 16) != 0) {
    fail(ErrorCode::CorruptFile, "checksum footer does not match file contents");
  }

  Container c;
  const std::uint32_t kind = r.u32();
  if (kind > 1) fail(ErrorCode::FormatError, "unknown container kind");
  c.header.kind = static_cast<FileKind>(kind);
  const std::uint32_t count = r.u32();
  ModelConfig& cfg = c.header.config;
  cfg.n_layers = r.u32();
  cfg.n_heads = r.u32();
  cfg.d_model = r.u32();
  cfg.vocab_size = r.u32();
  cfg.max_context = r.u32();
  cfg.d_ff = r.u32();
  cfg.rotary_fraction = r.f32();
  cfg.layernorm_eps = r.f32();
  cfg.rope_base = r.f32();
  c.header.lora_rank = r.u32();
  c.header.lora_alpha = r.f32();
  const std::uint32_t vocab_len = r.u32();
  const auto vocab = r.take(vocab_len);
  c.header.vocab_text.assign(vocab.begin(), vocab.end());

  std::vector<TensorRecord> table(count);
  for (TensorRecord& rec : table) {
    const auto name = r.take(r.u16());
    rec.name.assign(name.begin(), name.end());
    rec.dtype = dtype_from_byte(r.u8());
    rec.dims.resize(r.u8());
    for (auto& d : rec.dims) d = r.u64();
    rec.offset = r.u64();
    rec.length = r.u64();
  }

  std::uint64_t cursor = r.pos();
  for (const TensorRecord& rec : table) {
    if (rec.offset % kPayloadAlignment != 0 || rec.offset < cursor || rec.offset > body ||
        rec.length > body - rec.offset) {
      fail(ErrorCode::FormatError, "tensor " + rec.name + " has an invalid offset or length");
    }
    if (rec.length != storage_bytes(rec.dtype, rec.dims) ||
        (rec.dtype == Dtype::Q4 && (rec.dims.size() != 2 || rec.dims[1] % kBlockSize != 0))) {
      fail(ErrorCode::FormatError, "tensor " + rec.name + " length does not match its dtype and dims");
    }
    for (std::uint64_t i = cursor; i < rec.offset; ++i) {
      if (bytes[i] != 0) fail(ErrorCode::FormatError, "nonzero padding before " + rec.name);
    }
    if (c.dtypes.contains(rec.name)) fail(ErrorCode::FormatError, "duplicate tensor " + rec.name);
    c.tensors.emplace_back(rec.name, decode_tensor(rec, bytes.subspan(rec.offset, rec.length)));
    c.dtypes.emplace(rec.name, rec.dtype);
    cursor = rec.offset + rec.length;
  }
  if (cursor != body) fail(ErrorCode::FormatError, "unexpected bytes after the last tensor");

  if (summary) {
    summary->table = table;
    summary->bytes_by_dtype.clear();
    for (const auto& rec : table) summary->bytes_by_dtype[rec.dtype] += rec.length;
    summary->file_bytes = bytes.size();
  }
  return c;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) fail(ErrorCode::IoError, "read failed for " + path.string());
  return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot create " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      fail(ErrorCode::IoError, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoError, "cannot rename into " + path.string() + ": " + ec.message());
}

FileSummary write_model(const Model& model, const std::filesystem::path& path, Dtype dense_dtype) {
  if (dense_dtype == Dtype::Q4) fail(ErrorCode::InvalidArgument, "dense dtype must be f32 or f16");
  model.weights.validate(model.config);
  Container c;
  c.header.config = model.config;
  c.header.vocab_text = model.vocab.to_text();
  for (const auto& [name, t] : model.weights.tensors()) {
    c.tensors.emplace_back(name, t);
    c.dtypes.emplace(name, is_quantized(t) ? Dtype::Q4 : dense_dtype);
  }
  FileSummary summary;
  const auto bytes = serialize_container(c, &summary);
  write_file_atomic(path, bytes);
  return summary;
}

LoadedModel read_model(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  LoadedModel out;
  Container c = parse_container(bytes, &out.summary);
  if (c.header.kind != FileKind::Model) fail(ErrorCode::FormatError, path.string() + " is not a model file");
  out.model.config = c.header.config;
  out.model.vocab = Vocab::from_text(c.header.vocab_text);
  if (out.model.vocab.size() != out.model.config.vocab_size) {
    fail(ErrorCode::FormatError, "vocabulary size does not match the model config");
  }
  std::set<Dtype> dense_dtypes;
  for (auto& [name, t] : c.tensors) {
    if (const Dtype dt = c.dtypes.at(name); dt != Dtype::Q4) dense_dtypes.insert(dt);
    out.model.weights.set(name, std::move(t));
  }
  if (dense_dtypes.size() == 1) out.dense_dtype = *dense_dtypes.begin();
  out.model.weights.validate(out.model.config);
  return out;
}

Model quantize_weights(const Model& model) {
  Model out = model;
  for (const auto& [name, t] : model.weights.tensors()) {
    if (is_quantized(t)) fail(ErrorCode::AlreadyQuantized, "tensor " + name + " is already q4");
    const auto& d = std::get<DenseTensor>(t);
    if (d.rank() == 2) {
      if (d.cols() % kBlockSize != 0) {
        fail(ErrorCode::ShapeError, "tensor " + name + " has cols " + std::to_string(d.cols()) +
                                        ", not a multiple of 32");
      }
      out.weights.set(name, quantize_tensor(d));
    } else {
      DenseTensor h = d;
      for (float& v : h.data) v = round_trip_half(v);
      out.weights.set(name, std::move(h));
    }
  }
  return out;
}

SizeReport quantize_model(const std::filesystem::path& src, const std::filesystem::path& dst) {
  const auto bytes = read_file(src);
  FileSummary before;
  const Container c = parse_container(bytes, &before);
  if (c.header.kind != FileKind::Model) fail(ErrorCode::FormatError, "source is not a model file");
  for (const auto& rec : before.table) {
    if (rec.dtype == Dtype::Q4) fail(ErrorCode::AlreadyQuantized, src.string() + " is already quantized");
  }
  LoadedModel loaded = read_model(src);
  const Model q = quantize_weights(loaded.model);
  const FileSummary after = write_model(q, dst, Dtype::F16);

  SizeReport report;
  report.before_bytes = before.file_bytes;
  report.after_bytes = after.file_bytes;
  report.ratio = static_cast<double>(after.file_bytes) / static_cast<double>(before.file_bytes);
  std::map<std::string, const TensorRecord*> after_by_name;
  for (const auto& rec : after.table) after_by_name[rec.name] = &rec;
  for (const auto& rec : before.table) {
    const TensorRecord& a = *after_by_name.at(rec.name);
    report.tensors.push_back({rec.name, rec.dims, rec.dtype, a.dtype, rec.length, a.length});
  }
  return report;
}

}  // namespace stlm
