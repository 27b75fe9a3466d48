// Safetensors checkpoint container, dtype normalization and matrix
// classification.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace spectral_forge {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { F32, F16, BF16, F64 };

std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);
std::size_t dtype_size(DType dtype);

/// One named tensor. `data` holds the raw little-endian element bytes in
/// row-major order, exactly as stored in the container.
struct TensorRecord {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::int64_t> shape;
  std::vector<std::byte> data;

  std::size_t element_count() const;
  bool consistent() const { return element_count() * dtype_size(dtype) == data.size(); }

  /// Element values widened to float, any dtype.
  std::vector<float> to_floats() const;

  static TensorRecord from_floats(std::string name, std::vector<std::int64_t> shape,
                                  std::span<const float> values);
};

/// Rank-2 F32 record viewed as a row-major [rows, cols] matrix.
Eigen::MatrixXf record_to_matrix(const TensorRecord& record);
TensorRecord matrix_to_record(std::string name, const Eigen::MatrixXf& matrix);

using Metadata = std::vector<std::pair<std::string, std::string>>;

/// Ordered tensor map plus pass-through metadata.
///
/// Records are shared immutable values, so copying a store is cheap and
/// "modifying" a store means building a new one with some records replaced.
/// A store read from disk remembers its source header; when the record
/// layout and metadata are unchanged at write time the original header
/// bytes are reused so the file round-trips byte-for-byte.
class CheckpointStore {
 public:
  using RecordPtr = std::shared_ptr<const TensorRecord>;

  CheckpointStore() = default;

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  bool contains(std::string_view name) const;
  const TensorRecord& at(std::string_view name) const;
  const TensorRecord* find(std::string_view name) const;
  std::vector<std::string> names() const;
  const std::vector<RecordPtr>& records() const { return records_; }

  /// Appends a record. Duplicates are accepted here and rejected by
  /// validate()/write_checkpoint so a bad store can be diagnosed.
  void add(TensorRecord record);
  void add_shared(RecordPtr record);
  /// Replaces an existing record in place, keeping its position.
  void replace(TensorRecord record);

  const Metadata& metadata() const { return metadata_; }
  std::optional<std::string> metadata_value(std::string_view key) const;
  void set_metadata(std::string key, std::string value);

  /// Throws CheckpointError on duplicate names or element-count mismatch.
  void validate() const;

 private:
  friend CheckpointStore read_checkpoint(const std::filesystem::path& path);
  friend CheckpointStore parse_checkpoint(std::span<const std::byte> bytes);
  friend void write_checkpoint(const CheckpointStore& store,
                               const std::filesystem::path& path);
  friend std::vector<std::byte> serialize_checkpoint(const CheckpointStore& store);

  struct SourceEntry {
    std::string name;
    DType dtype;
    std::vector<std::int64_t> shape;
    std::uint64_t begin;
    std::uint64_t end;
  };
  struct SourceLayout {
    std::string header;  // raw header bytes including any padding
    std::vector<SourceEntry> entries;
    Metadata metadata;
    std::uint64_t data_size = 0;
  };

  std::vector<RecordPtr> records_;
  std::map<std::string, std::size_t, std::less<>> index_;
  Metadata metadata_;
  std::shared_ptr<const SourceLayout> source_;
};

CheckpointStore read_checkpoint(const std::filesystem::path& path);
CheckpointStore parse_checkpoint(std::span<const std::byte> bytes);
std::vector<std::byte> serialize_checkpoint(const CheckpointStore& store);
/// Writes via a temporary sibling file and rename, so a failure never
/// leaves a partial file at `path`.
void write_checkpoint(const CheckpointStore& store, const std::filesystem::path& path);

/// Widens (or narrows, for F64) every record to F32. F32 records are shared.
CheckpointStore to_f32(const CheckpointStore& store);

float bf16_to_float(std::uint16_t bits);
float f16_to_float(std::uint16_t bits);

// ---------------------------------------------------------------------------
// Matrix classification

enum class ModuleKind { SA, FFN };
enum class MatrixType { Q, K, V, O, UP, GATE, DOWN };

inline constexpr MatrixType kAllMatrixTypes[] = {MatrixType::Q,  MatrixType::K,
                                                 MatrixType::V,  MatrixType::O,
                                                 MatrixType::UP, MatrixType::GATE,
                                                 MatrixType::DOWN};

ModuleKind module_of(MatrixType type);
std::string_view matrix_type_name(MatrixType type);  // "Q", "K", ..., "DOWN"
std::optional<MatrixType> parse_matrix_type(std::string_view name);

struct MatrixKey {
  int layer = 0;
  MatrixType mtype = MatrixType::Q;

  ModuleKind module() const { return module_of(mtype); }
  auto operator<=>(const MatrixKey&) const = default;
};

/// "L3.SA.Q" style identifier, also used for cache tensor names.
std::string to_string(const MatrixKey& key);
std::optional<MatrixKey> parse_matrix_key(std::string_view text);

/// Maps MatrixKey <-> tensor name through one template per matrix type;
/// `{layer}` in a template stands for the decimal layer index.
struct NamingSchema {
  std::string name;
  std::map<MatrixType, std::string> templates;
  /// True when matrices are stored [in, out] instead of the default [out, in].
  bool stored_transposed = false;

  static NamingSchema standard();
  static NamingSchema from_json(std::string_view json_text);

  std::string tensor_name(const MatrixKey& key) const;
};

struct Classification {
  std::map<MatrixKey, std::string> keys;
  std::vector<std::string> unclassified;
  /// Subset of `unclassified` recognised as fused QKV / gate-up projections.
  std::vector<std::string> fused;
};

/// Throws CheckpointError when two tensors map to the same key.
Classification classify(const CheckpointStore& store, const NamingSchema& schema);

/// Throws CheckpointError with a descriptive message if any fused
/// projection was detected.
void reject_fused(const Classification& classification);

/// Loads a classified matrix as F32 in [out, in] orientation.
Eigen::MatrixXf load_matrix(const CheckpointStore& store, const std::string& name,
                            const NamingSchema& schema);
/// Inverse of load_matrix: builds an F32 record in the schema's stored orientation.
TensorRecord store_matrix(const std::string& name, const Eigen::MatrixXf& matrix,
                          const NamingSchema& schema);

}  // namespace spectral_forge
