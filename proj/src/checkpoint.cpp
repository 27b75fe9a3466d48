#include "spectral_forge/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <regex>
#include <sstream>

#include <json.hpp>

namespace spectral_forge {

namespace {

using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

constexpr std::uint64_t kMaxHeaderBytes = 100u * 1024u * 1024u;

std::uint64_t read_u64_le(const std::byte* p) {
  std::uint64_t v = 0;
  std::memcpy(&v, p, sizeof v);
  return v;
}

template <typename T>
T load_scalar(const std::byte* p) {
  T v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

}  // namespace

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F64: return "F64";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view name) {
  if (name == "F32") return DType::F32;
  if (name == "F16") return DType::F16;
  if (name == "BF16") return DType::BF16;
  if (name == "F64") return DType::F64;
  return std::nullopt;
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::F32: return 4;
    case DType::F16:
    case DType::BF16: return 2;
    case DType::F64: return 8;
  }
  return 0;
}

float bf16_to_float(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

float f16_to_float(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  std::uint32_t exponent = (bits >> 10) & 0x1Fu;
  std::uint32_t mantissa = bits & 0x3FFu;
  std::uint32_t out;
  if (exponent == 0x1F) {
    out = sign | 0x7F800000u | (mantissa << 13);
  } else if (exponent != 0) {
    out = sign | ((exponent + 112u) << 23) | (mantissa << 13);
  } else if (mantissa == 0) {
    out = sign;
  } else {
    // subnormal half: renormalize
    exponent = 113;
    while ((mantissa & 0x400u) == 0) {
      mantissa <<= 1;
      --exponent;
    }
    mantissa &= 0x3FFu;
    out = sign | (exponent << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(out);
}

// ---------------------------------------------------------------------------
// TensorRecord

std::size_t TensorRecord::element_count() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::vector<float> TensorRecord::to_floats() const {
  const std::size_t n = data.size() / dtype_size(dtype);
  std::vector<float> out(n);
  const std::byte* p = data.data();
  switch (dtype) {
    case DType::F32:
      std::memcpy(out.data(), p, n * 4);
      break;
    case DType::F64:
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(load_scalar<double>(p + 8 * i));
      break;
    case DType::BF16:
      for (std::size_t i = 0; i < n; ++i) out[i] = bf16_to_float(load_scalar<std::uint16_t>(p + 2 * i));
      break;
    case DType::F16:
      for (std::size_t i = 0; i < n; ++i) out[i] = f16_to_float(load_scalar<std::uint16_t>(p + 2 * i));
      break;
  }
  return out;
}

TensorRecord TensorRecord::from_floats(std::string name, std::vector<std::int64_t> shape,
                                       std::span<const float> values) {
  TensorRecord r;
  r.name = std::move(name);
  r.dtype = DType::F32;
  r.shape = std::move(shape);
  r.data.resize(values.size() * sizeof(float));
  if (!values.empty()) std::memcpy(r.data.data(), values.data(), r.data.size());
  if (!r.consistent()) {
    throw CheckpointError("tensor '" + r.name + "': element count does not match shape");
  }
  return r;
}

Eigen::MatrixXf record_to_matrix(const TensorRecord& record) {
  if (record.shape.size() != 2) {
    throw CheckpointError("tensor '" + record.name + "' is rank " +
                          std::to_string(record.shape.size()) + ", expected a rank-2 matrix");
  }
  const auto values = record.to_floats();
  using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMajor>(values.data(), record.shape[0], record.shape[1]);
}

TensorRecord matrix_to_record(std::string name, const Eigen::MatrixXf& matrix) {
  using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor rm = matrix;
  return TensorRecord::from_floats(std::move(name), {matrix.rows(), matrix.cols()},
                                   std::span<const float>(rm.data(), rm.size()));
}

// ---------------------------------------------------------------------------
// CheckpointStore

bool CheckpointStore::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

const TensorRecord* CheckpointStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : records_[it->second].get();
}

const TensorRecord& CheckpointStore::at(std::string_view name) const {
  if (const auto* r = find(name)) return *r;
  throw CheckpointError("missing tensor '" + std::string(name) + "'");
}

std::vector<std::string> CheckpointStore::names() const {
  std::vector<std::string> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r->name);
  return out;
}

void CheckpointStore::add(TensorRecord record) {
  add_shared(std::make_shared<const TensorRecord>(std::move(record)));
}

void CheckpointStore::add_shared(RecordPtr record) {
  index_.emplace(record->name, records_.size());
  records_.push_back(std::move(record));
}

void CheckpointStore::replace(TensorRecord record) {
  auto it = index_.find(record.name);
  if (it == index_.end()) throw CheckpointError("cannot replace missing tensor '" + record.name + "'");
  records_[it->second] = std::make_shared<const TensorRecord>(std::move(record));
}

std::optional<std::string> CheckpointStore::metadata_value(std::string_view key) const {
  for (const auto& [k, v] : metadata_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

void CheckpointStore::set_metadata(std::string key, std::string value) {
  for (auto& [k, v] : metadata_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  metadata_.emplace_back(std::move(key), std::move(value));
}

void CheckpointStore::validate() const {
  std::map<std::string_view, int> seen;
  for (const auto& r : records_) {
    if (++seen[r->name] > 1) throw CheckpointError("duplicate tensor name '" + r->name + "'");
    for (auto d : r->shape) {
      if (d < 0) throw CheckpointError("tensor '" + r->name + "' has a negative dimension");
    }
    if (!r->consistent()) {
      throw CheckpointError("tensor '" + r->name + "': element count " +
                            std::to_string(r->element_count()) + " does not match " +
                            std::to_string(r->data.size()) + " data bytes");
    }
  }
  if (records_.size() != index_.size()) throw CheckpointError("duplicate tensor names in store");
}

// ---------------------------------------------------------------------------
// Reading

CheckpointStore parse_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 8) throw CheckpointError("file too short for a safetensors header");
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > kMaxHeaderBytes || header_len > bytes.size() - 8) {
    throw CheckpointError("header length " + std::to_string(header_len) + " exceeds file size");
  }
  std::string header(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
  const std::uint64_t data_size = bytes.size() - 8 - header_len;
  const std::byte* data = bytes.data() + 8 + header_len;

  ordered_json doc;
  try {
    doc = ordered_json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("malformed header JSON: ") + e.what());
  }
  if (!doc.is_object()) throw CheckpointError("malformed header JSON: top level is not an object");

  CheckpointStore store;
  auto layout = std::make_shared<CheckpointStore::SourceLayout>();
  layout->header = header;
  layout->data_size = data_size;

  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& name = it.key();
    const auto& entry = it.value();
    if (name == "__metadata__") {
      if (!entry.is_object()) throw CheckpointError("__metadata__ is not an object");
      for (auto m = entry.begin(); m != entry.end(); ++m) {
        if (!m.value().is_string()) {
          throw CheckpointError("__metadata__ value for '" + m.key() + "' is not a string");
        }
        store.metadata_.emplace_back(m.key(), m.value().get<std::string>());
      }
      continue;
    }
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets")) {
      throw CheckpointError("tensor '" + name + "': header entry lacks dtype/shape/data_offsets");
    }
    if (!entry["dtype"].is_string()) throw CheckpointError("tensor '" + name + "': dtype is not a string");
    const auto dtype_str = entry["dtype"].get<std::string>();
    const auto dtype = parse_dtype(dtype_str);
    if (!dtype) throw CheckpointError("tensor '" + name + "': unsupported dtype " + dtype_str);

    const auto& shape_j = entry["shape"];
    const auto& off_j = entry["data_offsets"];
    if (!shape_j.is_array() || !off_j.is_array() || off_j.size() != 2) {
      throw CheckpointError("tensor '" + name + "': malformed shape or data_offsets");
    }
    std::vector<std::int64_t> shape;
    for (const auto& d : shape_j) {
      if (!d.is_number_unsigned()) throw CheckpointError("tensor '" + name + "': negative or non-integer dimension");
      shape.push_back(d.get<std::int64_t>());
    }
    if (!off_j[0].is_number_unsigned() || !off_j[1].is_number_unsigned()) {
      throw CheckpointError("tensor '" + name + "': data_offsets must be non-negative integers");
    }
    const auto begin = off_j[0].get<std::uint64_t>();
    const auto end = off_j[1].get<std::uint64_t>();
    if (begin > end || end > data_size) {
      throw CheckpointError("tensor '" + name + "': out-of-bounds tensor data [" +
                            std::to_string(begin) + ", " + std::to_string(end) + ") in " +
                            std::to_string(data_size) + " data bytes");
    }
    if (store.contains(name)) throw CheckpointError("duplicate tensor name '" + name + "'");

    TensorRecord rec;
    rec.name = name;
    rec.dtype = *dtype;
    rec.shape = shape;
    if (rec.element_count() * dtype_size(*dtype) != end - begin) {
      throw CheckpointError("tensor '" + name + "': data range size " + std::to_string(end - begin) +
                            " does not match shape");
    }
    rec.data.assign(data + begin, data + end);
    layout->entries.push_back({name, *dtype, shape, begin, end});
    store.add(std::move(rec));
  }

  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& e : layout->entries) {
    if (e.end > e.begin) ranges.emplace_back(e.begin, e.end);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) throw CheckpointError("overlapping tensor data ranges");
  }

  layout->metadata = store.metadata_;
  store.source_ = std::move(layout);
  return store;
}

CheckpointStore read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw CheckpointError("short read from '" + path.string() + "'");
  try {
    return parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Writing

std::vector<std::byte> serialize_checkpoint(const CheckpointStore& store) {
  store.validate();

  const auto* src = store.source_.get();
  bool reuse = src != nullptr && src->entries.size() == store.records_.size() &&
               src->metadata == store.metadata_;
  if (reuse) {
    for (std::size_t i = 0; i < src->entries.size(); ++i) {
      const auto& e = src->entries[i];
      const auto& r = *store.records_[i];
      if (e.name != r.name || e.dtype != r.dtype || e.shape != r.shape) {
        reuse = false;
        break;
      }
    }
  }

  std::string header;
  std::vector<std::pair<std::uint64_t, const TensorRecord*>> placements;
  std::uint64_t data_size = 0;
  if (reuse) {
    header = src->header;
    data_size = src->data_size;
    for (std::size_t i = 0; i < src->entries.size(); ++i) {
      placements.emplace_back(src->entries[i].begin, store.records_[i].get());
    }
  } else {
    ordered_json doc = ordered_json::object();
    if (!store.metadata_.empty()) {
      ordered_json meta = ordered_json::object();
      for (const auto& [k, v] : store.metadata_) meta[k] = v;
      doc["__metadata__"] = meta;
    }
    for (const auto& r : store.records_) {
      ordered_json entry = ordered_json::object();
      entry["dtype"] = std::string(dtype_name(r->dtype));
      entry["shape"] = r->shape;
      entry["data_offsets"] = {data_size, data_size + r->data.size()};
      doc[r->name] = entry;
      placements.emplace_back(data_size, r.get());
      data_size += r->data.size();
    }
    header = doc.dump();
    header.append((8 - header.size() % 8) % 8, ' ');
  }

  std::vector<std::byte> out(8 + header.size() + data_size);
  const std::uint64_t n = header.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, header.data(), header.size());
  std::byte* data = out.data() + 8 + header.size();
  for (const auto& [offset, rec] : placements) {
    if (!rec->data.empty()) std::memcpy(data + offset, rec->data.data(), rec->data.size());
  }
  return out;
}

void write_checkpoint(const CheckpointStore& store, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(store);
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw CheckpointError("write failed for '" + path.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw CheckpointError("cannot move output into place at '" + path.string() + "': " + ec.message());
  }
}

CheckpointStore to_f32(const CheckpointStore& store) {
  CheckpointStore out;
  for (const auto& r : store.records()) {
    if (r->dtype == DType::F32) {
      out.add_shared(r);
    } else {
      const auto values = r->to_floats();
      out.add(TensorRecord::from_floats(r->name, r->shape, values));
    }
  }
  for (const auto& [k, v] : store.metadata()) out.set_metadata(k, v);
  return out;
}

// ---------------------------------------------------------------------------
// Classification

ModuleKind module_of(MatrixType type) {
  switch (type) {
    case MatrixType::Q:
    case MatrixType::K:
    case MatrixType::V:
    case MatrixType::O: return ModuleKind::SA;
    default: return ModuleKind::FFN;
  }
}

std::string_view matrix_type_name(MatrixType type) {
  switch (type) {
    case MatrixType::Q: return "Q";
    case MatrixType::K: return "K";
    case MatrixType::V: return "V";
    case MatrixType::O: return "O";
    case MatrixType::UP: return "UP";
    case MatrixType::GATE: return "GATE";
    case MatrixType::DOWN: return "DOWN";
  }
  return "?";
}

std::optional<MatrixType> parse_matrix_type(std::string_view name) {
  std::string upper(name);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (auto t : kAllMatrixTypes) {
    if (matrix_type_name(t) == upper) return t;
  }
  return std::nullopt;
}

std::string to_string(const MatrixKey& key) {
  return "L" + std::to_string(key.layer) + (key.module() == ModuleKind::SA ? ".SA." : ".FFN.") +
         std::string(matrix_type_name(key.mtype));
}

std::optional<MatrixKey> parse_matrix_key(std::string_view text) {
  static const std::regex re(R"(L(\d+)\.(SA|FFN)\.([A-Z]+))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_match(text.begin(), text.end(), m, re)) return std::nullopt;
  auto type = parse_matrix_type(m[3].str());
  if (!type) return std::nullopt;
  MatrixKey key{std::stoi(m[1].str()), *type};
  if ((key.module() == ModuleKind::SA) != (m[2].str() == "SA")) return std::nullopt;
  return key;
}

NamingSchema NamingSchema::standard() {
  NamingSchema s;
  s.name = "standard";
  s.templates = {
      {MatrixType::Q, "model.layers.{layer}.self_attn.q_proj.weight"},
      {MatrixType::K, "model.layers.{layer}.self_attn.k_proj.weight"},
      {MatrixType::V, "model.layers.{layer}.self_attn.v_proj.weight"},
      {MatrixType::O, "model.layers.{layer}.self_attn.o_proj.weight"},
      {MatrixType::UP, "model.layers.{layer}.mlp.up_proj.weight"},
      {MatrixType::GATE, "model.layers.{layer}.mlp.gate_proj.weight"},
      {MatrixType::DOWN, "model.layers.{layer}.mlp.down_proj.weight"},
  };
  return s;
}

NamingSchema NamingSchema::from_json(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("malformed schema JSON: ") + e.what());
  }
  NamingSchema s;
  s.name = j.value("name", "custom");
  s.stored_transposed = j.value("stored_transposed", false);
  if (!j.contains("templates") || !j["templates"].is_object()) {
    throw CheckpointError("schema JSON needs a \"templates\" object");
  }
  for (auto it = j["templates"].begin(); it != j["templates"].end(); ++it) {
    auto type = parse_matrix_type(it.key());
    if (!type) throw CheckpointError("schema: unknown matrix type '" + it.key() + "'");
    const auto tmpl = it.value().get<std::string>();
    if (tmpl.find("{layer}") == std::string::npos) {
      throw CheckpointError("schema: template for " + it.key() + " lacks {layer}");
    }
    s.templates[*type] = tmpl;
  }
  return s;
}

std::string NamingSchema::tensor_name(const MatrixKey& key) const {
  auto it = templates.find(key.mtype);
  if (it == templates.end()) {
    throw CheckpointError("schema '" + name + "' has no template for " +
                          std::string(matrix_type_name(key.mtype)));
  }
  std::string out = it->second;
  const auto pos = out.find("{layer}");
  out.replace(pos, 7, std::to_string(key.layer));
  return out;
}

namespace {

std::string regex_escape(std::string_view s) {
  static const std::string special = R"(\^$.|?*+()[]{})";
  std::string out;
  for (char c : s) {
    if (special.find(c) != std::string::npos) out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

bool looks_fused(const std::string& name) {
  static const std::regex re(
      R"((qkv|query_key_value|Wqkv|c_attn|in_proj|gate_up|w12|wqkv)[._])",
      std::regex::icase);
  return std::regex_search(name, re);
}

}  // namespace

Classification classify(const CheckpointStore& store, const NamingSchema& schema) {
  std::vector<std::pair<MatrixType, std::regex>> patterns;
  for (const auto& [type, tmpl] : schema.templates) {
    const auto pos = tmpl.find("{layer}");
    const auto pattern = regex_escape(tmpl.substr(0, pos)) + R"((\d+))" +
                         regex_escape(tmpl.substr(pos + 7));
    patterns.emplace_back(type, std::regex(pattern));
  }

  Classification out;
  for (const auto& rec : store.records()) {
    std::optional<MatrixKey> match;
    for (const auto& [type, re] : patterns) {
      std::smatch m;
      if (std::regex_match(rec->name, m, re)) {
        match = MatrixKey{std::stoi(m[1].str()), type};
        break;
      }
    }
    if (!match) {
      out.unclassified.push_back(rec->name);
      if (looks_fused(rec->name)) out.fused.push_back(rec->name);
      continue;
    }
    auto [it, inserted] = out.keys.emplace(*match, rec->name);
    if (!inserted) {
      throw CheckpointError("ambiguous classification: '" + it->second + "' and '" + rec->name +
                            "' both map to " + to_string(*match));
    }
  }
  return out;
}

void reject_fused(const Classification& classification) {
  if (classification.fused.empty()) return;
  std::string msg = "fused projection tensors are not supported (split them first): ";
  for (std::size_t i = 0; i < classification.fused.size(); ++i) {
    if (i) msg += ", ";
    msg += classification.fused[i];
  }
  throw CheckpointError(msg);
}

Eigen::MatrixXf load_matrix(const CheckpointStore& store, const std::string& name,
                            const NamingSchema& schema) {
  Eigen::MatrixXf m = record_to_matrix(store.at(name));
  if (schema.stored_transposed) return m.transpose();
  return m;
}

TensorRecord store_matrix(const std::string& name, const Eigen::MatrixXf& matrix,
                          const NamingSchema& schema) {
  if (schema.stored_transposed) return matrix_to_record(name, matrix.transpose());
  return matrix_to_record(name, matrix);
}

}  // namespace spectral_forge
