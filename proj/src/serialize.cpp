#include "drarmor/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "drarmor/errors.hpp"

namespace drarmor {

namespace {

constexpr char kModelMagic[8] = {'D', 'R', 'M', 'O', 'D', 'E', 'L', '1'};
constexpr char kBatchMagic[8] = {'D', 'R', 'B', 'A', 'T', 'C', 'H', '1'};
constexpr std::uint32_t kVersion = 1;

enum class KindCode : std::uint8_t { dense = 1, conv2d = 2, relu = 3, flatten = 4, avgpool = 5, logsoftmax = 6, reshape = 7 };

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void shape(const Shape& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    for (std::size_t d : s) u64(d);
  }
  void tensor(const Tensor& t) {
    shape(t.shape());
    for (double v : t.values()) f64(v);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IngestionError("truncated container", pos_);
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  Shape shape() {
    const std::size_t at = pos_;
    const std::uint32_t rank = u32();
    if (rank > 8) throw IngestionError("implausible tensor rank " + std::to_string(rank), at);
    Shape s(rank);
    for (auto& d : s) d = u64();
    return s;
  }
  Tensor tensor() {
    Shape s = shape();
    if (s.empty()) return {};
    const std::size_t n = numel(s);
    need(n * 8);
    std::vector<double> values(n);
    for (auto& v : values) v = f64();
    return Tensor(std::move(s), std::move(values));
  }
  void magic(const char (&expected)[8]) {
    need(8);
    if (std::memcmp(bytes_.data() + pos_, expected, 8) != 0) throw IngestionError("bad magic", pos_);
    pos_ += 8;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_model(const Model& model) {
  Writer w;
  w.raw(kModelMagic, 8);
  w.u32(kVersion);
  w.shape(model.input_shape);
  w.u32(static_cast<std::uint32_t>(model.layers.size()));
  for (const Layer& layer : model.layers) {
    if (const auto* d = std::get_if<Dense>(&layer.kind)) {
      w.u8(static_cast<std::uint8_t>(KindCode::dense));
      w.u32(layer.id);
      w.u64(d->in_dim);
      w.u64(d->out_dim);
      w.u8(d->has_bias ? 1 : 0);
    } else if (const auto* c = std::get_if<Conv2D>(&layer.kind)) {
      w.u8(static_cast<std::uint8_t>(KindCode::conv2d));
      w.u32(layer.id);
      w.u64(c->in_ch);
      w.u64(c->out_ch);
      w.u64(c->kernel);
      w.u64(c->stride);
      w.u8(static_cast<std::uint8_t>(c->padding));
    } else if (std::holds_alternative<ReLU>(layer.kind)) {
      w.u8(static_cast<std::uint8_t>(KindCode::relu));
      w.u32(layer.id);
    } else if (std::holds_alternative<Flatten>(layer.kind)) {
      w.u8(static_cast<std::uint8_t>(KindCode::flatten));
      w.u32(layer.id);
    } else if (const auto* p = std::get_if<AvgPool>(&layer.kind)) {
      w.u8(static_cast<std::uint8_t>(KindCode::avgpool));
      w.u32(layer.id);
      w.u64(p->window);
    } else if (std::holds_alternative<LogSoftmax>(layer.kind)) {
      w.u8(static_cast<std::uint8_t>(KindCode::logsoftmax));
      w.u32(layer.id);
    } else if (const auto* r = std::get_if<Reshape>(&layer.kind)) {
      w.u8(static_cast<std::uint8_t>(KindCode::reshape));
      w.u32(layer.id);
      w.shape(r->shape);
    }
    w.tensor(layer.weight);
    w.tensor(layer.bias);
  }
  return w.take();
}

Model deserialize_model(const std::string& bytes) {
  Reader r(bytes);
  r.magic(kModelMagic);
  const std::size_t version_at = r.pos();
  if (r.u32() != kVersion) throw IngestionError("unsupported model container version", version_at);
  Model model;
  model.input_shape = r.shape();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const auto code = static_cast<KindCode>(r.u8());
    Layer layer;
    layer.id = r.u32();
    switch (code) {
      case KindCode::dense: {
        Dense d{};
        d.in_dim = r.u64();
        d.out_dim = r.u64();
        d.has_bias = r.u8() != 0;
        layer.kind = d;
        break;
      }
      case KindCode::conv2d: {
        Conv2D c{};
        c.in_ch = r.u64();
        c.out_ch = r.u64();
        c.kernel = r.u64();
        c.stride = r.u64();
        const std::uint8_t pad = r.u8();
        if (pad > 1) throw IngestionError("unknown padding mode", r.pos() - 1);
        c.padding = static_cast<Padding>(pad);
        layer.kind = c;
        break;
      }
      case KindCode::relu: layer.kind = ReLU{}; break;
      case KindCode::flatten: layer.kind = Flatten{}; break;
      case KindCode::avgpool: layer.kind = AvgPool{r.u64()}; break;
      case KindCode::logsoftmax: layer.kind = LogSoftmax{}; break;
      case KindCode::reshape: layer.kind = Reshape{r.shape()}; break;
      default: throw IngestionError("unknown layer kind code", at);
    }
    layer.weight = r.tensor();
    layer.bias = r.tensor();
    model.layers.push_back(std::move(layer));
  }
  if (!r.done()) throw IngestionError("trailing bytes after model", r.pos());
  validate(model);
  return model;
}

std::string serialize_batch(const LabelledBatch& batch) {
  Writer w;
  w.raw(kBatchMagic, 8);
  w.u32(kVersion);
  w.tensor(batch.inputs);
  w.u64(batch.labels.size());
  for (int y : batch.labels) w.u32(static_cast<std::uint32_t>(y));
  return w.take();
}

LabelledBatch deserialize_batch(const std::string& bytes) {
  Reader r(bytes);
  r.magic(kBatchMagic);
  const std::size_t version_at = r.pos();
  if (r.u32() != kVersion) throw IngestionError("unsupported batch container version", version_at);
  LabelledBatch batch;
  batch.inputs = r.tensor();
  const std::size_t at = r.pos();
  const std::uint64_t n = r.u64();
  if (batch.inputs.empty() || n != batch.inputs.dim(0)) throw IngestionError("label count does not match batch", at);
  batch.labels.resize(n);
  for (int& y : batch.labels) y = static_cast<int>(r.u32());
  if (!r.done()) throw IngestionError("trailing bytes after batch", r.pos());
  return batch;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void save_model(const Model& model, const std::filesystem::path& path) { write_file(path, serialize_model(model)); }
Model load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }
void save_batch(const LabelledBatch& batch, const std::filesystem::path& path) {
  write_file(path, serialize_batch(batch));
}
LabelledBatch load_batch(const std::filesystem::path& path) { return deserialize_batch(read_file(path)); }

}  // namespace drarmor
