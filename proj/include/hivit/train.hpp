#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hivit/checkpoint.hpp"
#include "hivit/config.hpp"
#include "hivit/corpus.hpp"
#include "hivit/metrics.hpp"
#include "hivit/mim.hpp"
#include "hivit/model.hpp"
#include "hivit/optim.hpp"

namespace hivit {

enum class TrainMode { Pretrain, Finetune, Linprobe };
TrainMode parse_train_mode(const std::string& s);
const char* train_mode_name(TrainMode m);

// Recipe file: `key = value` lines, see recipes/.
struct Recipe {
  TrainMode mode = TrainMode::Pretrain;
  int epochs = 1;
  double warmup_epochs = 0;
  double base_lr = 1.5e-4;
  double min_lr = 0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double mask_ratio = 0.75;
  double layer_decay = 1.0;
  double drop_path = -1;  // < 0 keeps the config's rate
  std::uint64_t seed = 0;
  int batch_size = 16;
  int checkpoint_every = 1;  // epochs; 0 = only at the end
  std::int64_t max_steps = 0;  // 0 = run all epochs
  bool normalize_target = true;
  bool augment = true;
  double crop_scale_min = 0.2;
  double lars_momentum = 0.9;
  // Original large-scale values, carried for reference only.
  int reference_batch_size = 0;
  int reference_epochs = 0;
};

// Defaults for a mode: pretrain AdamW(0.9, 0.95) lr 1.5e-4 warmup 40;
// finetune AdamW(0.9, 0.999) lr 5e-4 warmup 5 layer decay 0.65;
// linprobe LARS lr 0.1 wd 0.
Recipe default_recipe(TrainMode mode);
Recipe parse_recipe(std::string_view text, std::string_view origin = "<recipe>");
Recipe load_recipe(const std::string& path);
std::string to_text(const Recipe& r);

// Random resized crop + horizontal flip on normalized CHW images, in place.
void augment_batch(std::span<float> images, std::int64_t batch, int channels, int size,
                   double scale_min, std::mt19937_64& rng);

// Owns the model, optimizer state and training RNG for one run.
class Trainer {
 public:
  Trainer(HiViTConfig cfg, Recipe recipe, std::shared_ptr<const CorpusReader> corpus);

  // Fresh weights from recipe.seed.
  void init_fresh();
  // Finetune / linprobe: encoder weights from a pretrain checkpoint, fresh head.
  void init_from_pretrained(const Checkpoint& ck);
  // Continues a run of the same mode from its checkpoint.
  void resume(const Checkpoint& ck);

  // One optimizer step on the corpus records `indices`; returns the loss.
  double train_step(std::span<const std::int64_t> indices);
  // Runs the remaining steps of the current epoch.
  MetricsRow run_epoch();
  // Classification accuracy over the whole corpus, no augmentation.
  double accuracy();

  Checkpoint checkpoint() const;

  std::int64_t step() const { return step_; }
  std::int64_t steps_per_epoch() const;
  std::int64_t epoch() const { return step_ / steps_per_epoch(); }
  bool done() const;
  double current_lr() const;
  ParamList<float>& model_params() { return model_params_; }
  ParamList<float>& trainable_params() { return train_params_; }
  const HiViTConfig& config() const { return cfg_; }
  const Recipe& recipe() const { return recipe_; }

 private:
  void build_lists();
  std::vector<std::int64_t> epoch_order(std::int64_t epoch) const;
  Tensor<float> load_images(std::span<const std::int64_t> indices, std::vector<int>* labels, bool augment);
  Tensor<float> forward_loss(const Tensor<float>& images, std::span<const int> labels);

  HiViTConfig cfg_;
  Recipe recipe_;
  std::shared_ptr<const CorpusReader> corpus_;
  MimModel<float> mim_;
  EncoderParams<float> enc_;  // finetune / linprobe
  ParamList<float> model_params_;
  ParamList<float> train_params_;
  std::vector<double> lr_scale_;
  OptimState<float> opt_;
  std::mt19937_64 rng_;
  std::int64_t step_ = 0;
};

struct RunOptions {
  std::string corpus;
  std::string out_dir;
  std::string init_checkpoint;    // finetune / linprobe source weights
  std::string resume_checkpoint;  // continue an interrupted run
  bool quiet = false;
};

struct RunResult {
  std::vector<MetricsRow> rows;
  std::string checkpoint_path;
  std::string metrics_path;
};

// Epoch loop for any mode: metrics.jsonl and checkpoint.hvck under out_dir.
RunResult run_training(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts);
RunResult run_pretrain(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts);
RunResult run_finetune(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts);
RunResult run_linprobe(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts);

}  // namespace hivit
