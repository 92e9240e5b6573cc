#pragma once
// Flat key = value run configuration.
//
//   # comment
//   corpus.seed = 7
//   model.d_model = 32
//   train.epochs_a2p = 12
//
// Keys are section.field for the sections corpus, lexicon, model, train,
// specaug and decode. Unknown keys and unparsable values are ConfigErrors.

#include <filesystem>
#include <string>
#include <vector>

#include "dtx/model.hpp"
#include "dtx/synth.hpp"
#include "dtx/train.hpp"

namespace dtx {

struct RunConfig {
  synth::CorpusConfig corpus;
  model::ModelConfig model;
  train::TrainConfig train;
  train::DecodeOptions decode;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  // Every key with its resolved value, one per line, in keys() order.
  std::string dump() const;
  void validate() const;
};

RunConfig parse_config(const std::string& text, const std::string& source = "<string>");
RunConfig load_config(const std::filesystem::path& path);
// Applies the file's keys on top of `base`.
void apply_config_file(RunConfig& base, const std::filesystem::path& path);
void write_config(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace dtx
