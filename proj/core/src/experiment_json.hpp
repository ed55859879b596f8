#pragma once

// JSON forms of the experiment configuration: stage keys and the summary echo.

#include "dmloc/pipeline.hpp"
#include "json_io.hpp"

namespace dmloc {

json train_json(const TrainConfig& t);
json corpus_settings_json(const ExperimentConfig& c);
json aligner_settings_json(const ExperimentConfig& c);
json classifier_arch_json(const ExperimentConfig& c);
json mask_settings_json(const MaskBuildConfig& m);
json experiment_config_json(const ExperimentConfig& c);

}  // namespace dmloc
