#pragma once

// Binary checkpoints for models and task-vector methods, CSV output and
// atomic file writes.
//
// Container layout (all integers little-endian):
//   "TVFG" | u32 version | u8 kind | u64 config length | config text (UTF-8)
//   then per tensor: u32 name length | name | u64 rows | u64 cols |
//   rows*cols f64 entries in row-major order.
// Tensors run to the end of the file. Their names and shapes are implied by
// the kind and the config block; model tensors follow Parameters::visit order.

#include <cstdint>
#include <string>
#include <vector>

#include "tvlab/method.hpp"
#include "tvlab/model.hpp"
#include "tvlab/trainer.hpp"

namespace tvlab {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class PayloadKind : std::uint8_t {
    model = 0,
    ltv = 1,
    constant = 2,
    layer_replace = 3,
    mlp = 4,
    logit_ltv = 5,
};

struct NamedTensor {
    std::string name;
    Matrix value;
};

struct Container {
    PayloadKind kind = PayloadKind::model;
    std::string config_text;
    std::vector<NamedTensor> tensors;
};

std::string encode_container(const Container& c);

/// Errors: bad_magic, version_mismatch, truncated_file (also for a tensor
/// cut short at the end of the file).
Container decode_container(const std::string& bytes);

/// A trained model and the configuration that produced it.
struct ModelCheckpoint {
    Model model;
    TrainConfig train;
};

std::string encode_model(const Model& model, const TrainConfig& train);
ModelCheckpoint decode_model(const std::string& bytes);
void save_model(const std::string& path, const Model& model, const TrainConfig& train);
ModelCheckpoint load_model(const std::string& path);

std::string encode_method(const TaskVectorMethod& method);
TaskVectorMethod decode_method(const std::string& bytes);
void save_method(const std::string& path, const TaskVectorMethod& method);
TaskVectorMethod load_method(const std::string& path);
/// Loads and checks the method against `model`; digest_mismatch if the
/// method was extracted for another model.
TaskVectorMethod load_method(const std::string& path, const Model& model);

std::string read_file(const std::string& path);
/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);

/// Shortest text that round-trips: printf %.17g.
std::string format_real(double v);

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header);

    /// Throws shape_mismatch when the cell count differs from the header.
    void add_row(std::vector<std::string> cells);
    const std::vector<std::string>& header() const { return header_; }
    const std::vector<std::vector<std::string>>& rows() const { return rows_; }
    std::string render() const;

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

}  // namespace tvlab
