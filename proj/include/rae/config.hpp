#pragma once

// Run configuration: one flat struct covering model geometry, optimization,
// data, and command-specific knobs. Serializes to sectioned key=value text;
// a persisted file relaunches the identical run.

#include <cstdint>
#include <string>

#include "rae/geometry.hpp"
#include "rae/model.hpp"

namespace rae {

enum class AlignTarget { cosine, mse, infonce, ntxent };

struct DataConfig {
  std::string source = "synthetic";  // synthetic | dir
  std::string dir;
  std::string classes = "sphere,cube,torus,plane";
  std::size_t train_per_class = 64;
  std::size_t test_per_class = 25;
  std::size_t points = 256;
  double noise = 0.01;
};

struct RunConfig {
  ModelConfig model;

  // optimization
  std::string precision = "f64";  // f64 | f32
  double lr = 1e-3;
  double head_lr = 1e-2;
  double weight_decay = 0.05;
  long epochs = 60;
  long warmup_epochs = 10;
  long finetune_epochs = 30;
  std::size_t batch_size = 32;
  double ema_momentum = 0.999;
  double align_weight = 1.0;
  std::string align_target = "cosine";  // cosine | mse | infonce | ntxent
  double infonce_tau = 0.07;
  double ntxent_tau = 0.1;
  long ckpt_every = 0;  // epochs between checkpoints; 0 = final only

  // data
  DataConfig data;

  // run
  std::uint64_t seed = 0;
  std::string out_dir = "runs";
  std::string run_name;  // fixed run directory name; empty = timestamped
  std::string augment = "none";  // none | scale_translate | rotate
  bool no_regressor = false;     // masked-autoencoder baseline for comparisons
  std::string compare_log;       // other run's step CSV to overlay in the loss plot

  // finetune / eval
  std::string protocol = "FULL";  // FULL | LINEAR | MLP3
  std::string topology = "b";     // a | b | c | d
  std::string combine = "concat";  // concat | add (topology d)
  std::size_t virtual_queries = 0;  // 0 = patches/2
  std::size_t head_hidden = 256;
  std::string checkpoint;

  // eval: few-shot protocol
  bool few_shot = false;
  std::size_t n_way = 4;
  std::size_t k_shot = 10;
  std::size_t n_query = 10;
  std::size_t episodes = 10;

  // reconstruct / ablate / external targets
  std::string cloud;
  std::string axes;
  std::string recon_features;

  AlignTarget align_target_enum() const;
  AugmentKind augment_enum() const;
  Protocol protocol_enum() const;
  std::size_t resolved_virtual_queries() const {
    return virtual_queries == 0 ? model.patch_count / 2 : virtual_queries;
  }

  // Throws ConfigError naming the offending field. `cmd` scopes the
  // command-specific requirements.
  void validate(const std::string& cmd) const;

  std::string to_ini() const;
  static RunConfig from_ini_string(const std::string& text);
  static RunConfig from_ini_file(const std::string& path);

  // Named presets: "desk" (the default small config) and "paper" (the
  // full-scale configuration).
  static RunConfig profile(const std::string& name);
};

}  // namespace rae
