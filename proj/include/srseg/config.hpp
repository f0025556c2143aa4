#pragma once

#include <string>
#include <vector>

#include "srseg/data.hpp"
#include "srseg/model.hpp"
#include "srseg/train.hpp"

namespace srseg {

// ============================================================================
// Run configuration files
// ============================================================================
//
// A run config is a JSON file with four sections: dataset, model, train,
// output. Every key has a documented default; unknown keys are rejected
// with their full path (e.g. "train.weights.lambda1"), as are type and
// range violations. parse -> serialize -> parse is the identity.
//
// Cross-section derivations (not settable directly): the model's input
// size comes from dataset.height/width, its class counts from
// dataset.classes (segmentation = foreground + background), and its input
// channels are fixed at 3 (RGB).

struct OutputConfig {
    std::string directory = "runs/out";
    std::vector<std::string> formats = {"csv", "json", "markdown"};
};

struct RunConfigFile {
    DatasetConfig dataset;
    std::int64_t eval_count = 128;  // held-out samples drawn from a seed derived from dataset.seed
    ModelConfig model;
    TrainConfig train;
    OutputConfig output;
};

RunConfigFile parse_config(const std::string& path);
RunConfigFile parse_config_text(const std::string& text, const std::string& where);
std::string serialize_config(const RunConfigFile& config);

// The eval split reuses the dataset geometry with its own derived seed, so
// train and eval samples can never collide.
DatasetConfig eval_dataset_config(const DatasetConfig& train_config, std::int64_t eval_count);

}  // namespace srseg
