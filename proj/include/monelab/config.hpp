#pragma once

#include <string>

#include "json.hpp"
#include "monelab/model.hpp"
#include "monelab/train.hpp"

namespace monelab {

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& tcfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct RunFileConfig {
    ModelConfig model;
    TrainConfig train;
    bool has_train = false;
    std::string data_spec;  // optional "data" key in the train section
};

// Loads a JSON config file holding a "model" section and an optional "train"
// section. Unknown keys anywhere are rejected.
RunFileConfig load_config_file(const std::string& path);

}  // namespace monelab
