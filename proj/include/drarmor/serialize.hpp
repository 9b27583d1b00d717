#pragma once

// Binary containers for models and labelled batches. Layout is documented in
// docs/model_format.md; all integers and doubles are little-endian.

#include <filesystem>
#include <string>
#include <vector>

#include "drarmor/model.hpp"

namespace drarmor {

std::string serialize_model(const Model& model);
Model deserialize_model(const std::string& bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

struct LabelledBatch {
  Tensor inputs;
  std::vector<int> labels;
};

std::string serialize_batch(const LabelledBatch& batch);
LabelledBatch deserialize_batch(const std::string& bytes);

void save_batch(const LabelledBatch& batch, const std::filesystem::path& path);
LabelledBatch load_batch(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace drarmor
