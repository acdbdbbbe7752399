#include "hivit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "hivit/ops.hpp"

namespace hivit {
namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (i + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string kv_lookup(const std::vector<KvEntry>& kv, const std::string& key) {
  for (const auto& e : kv)
    if (e.key == key) return e.value;
  return {};
}

}  // namespace

TrainMode parse_train_mode(const std::string& s) {
  if (s == "pretrain") return TrainMode::Pretrain;
  if (s == "finetune") return TrainMode::Finetune;
  if (s == "linprobe") return TrainMode::Linprobe;
  throw ConfigError("unknown training mode '" + s + "' (pretrain, finetune, linprobe)");
}

const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Pretrain: return "pretrain";
    case TrainMode::Finetune: return "finetune";
    case TrainMode::Linprobe: return "linprobe";
  }
  return "?";
}

Recipe default_recipe(TrainMode mode) {
  Recipe r;
  r.mode = mode;
  switch (mode) {
    case TrainMode::Pretrain:
      r.base_lr = 1.5e-4;
      r.warmup_epochs = 40;
      r.epochs = 300;
      r.beta2 = 0.95;
      r.weight_decay = 0.05;
      r.crop_scale_min = 0.2;
      break;
    case TrainMode::Finetune:
      r.base_lr = 5e-4;
      r.warmup_epochs = 5;
      r.epochs = 100;
      r.beta2 = 0.999;
      r.weight_decay = 0.05;
      r.layer_decay = 0.65;
      r.crop_scale_min = 0.08;
      break;
    case TrainMode::Linprobe:
      r.base_lr = 0.1;
      r.warmup_epochs = 10;
      r.epochs = 100;
      r.weight_decay = 0.0;
      r.crop_scale_min = 0.08;
      break;
  }
  return r;
}

Recipe parse_recipe(std::string_view text, std::string_view origin) {
  const auto entries = parse_kv(text, origin);
  Recipe r;
  bool have_mode = false;
  for (const auto& e : entries)
    if (e.key == "mode") r = default_recipe(parse_train_mode(e.value)), have_mode = true;
  if (!have_mode) throw ConfigError(std::string(origin) + ": recipe needs a 'mode' line");
  for (const auto& e : entries) {
    const auto& k = e.key;
    if (k == "mode") continue;
    if (k == "epochs") r.epochs = kv_int(e, origin);
    else if (k == "warmup_epochs" || k == "warmup") r.warmup_epochs = kv_double(e, origin);
    else if (k == "base_lr") r.base_lr = kv_double(e, origin);
    else if (k == "min_lr") r.min_lr = kv_double(e, origin);
    else if (k == "weight_decay" || k == "wd") r.weight_decay = kv_double(e, origin);
    else if (k == "beta1") r.beta1 = kv_double(e, origin);
    else if (k == "beta2") r.beta2 = kv_double(e, origin);
    else if (k == "mask_ratio") r.mask_ratio = kv_double(e, origin);
    else if (k == "layer_decay" || k == "lwd") r.layer_decay = kv_double(e, origin);
    else if (k == "drop_path") r.drop_path = kv_double(e, origin);
    else if (k == "seed") r.seed = static_cast<std::uint64_t>(kv_int(e, origin));
    else if (k == "batch_size") r.batch_size = kv_int(e, origin);
    else if (k == "checkpoint_every") r.checkpoint_every = kv_int(e, origin);
    else if (k == "max_steps") r.max_steps = kv_int(e, origin);
    else if (k == "normalize_target") r.normalize_target = kv_bool(e, origin);
    else if (k == "augment") r.augment = kv_bool(e, origin);
    else if (k == "crop_scale_min") r.crop_scale_min = kv_double(e, origin);
    else if (k == "lars_momentum") r.lars_momentum = kv_double(e, origin);
    else if (k == "reference_batch_size") r.reference_batch_size = kv_int(e, origin);
    else if (k == "reference_epochs") r.reference_epochs = kv_int(e, origin);
    else
      throw ConfigError(std::string(origin) + ":" + std::to_string(e.line) + ": unknown recipe key '" + k + "'");
  }
  auto bad = [&](const std::string& what) { throw ConfigError(std::string(origin) + ": " + what); };
  if (r.epochs < 1) bad("epochs must be >= 1");
  if (r.batch_size < 1) bad("batch_size must be >= 1");
  if (!(r.base_lr >= 0)) bad("base_lr must be >= 0");
  if (!(r.warmup_epochs >= 0)) bad("warmup_epochs must be >= 0");
  if (!(r.mask_ratio > 0 && r.mask_ratio < 1)) bad("mask_ratio must lie in (0, 1)");
  if (!(r.layer_decay > 0 && r.layer_decay <= 1)) bad("layer_decay must lie in (0, 1]");
  if (!(r.crop_scale_min > 0 && r.crop_scale_min <= 1)) bad("crop_scale_min must lie in (0, 1]");
  if (r.drop_path >= 1) bad("drop_path must be < 1");
  return r;
}

Recipe load_recipe(const std::string& path) { return parse_recipe(read_text_file(path), path); }

std::string to_text(const Recipe& r) {
  std::ostringstream os;
  os << "mode = " << train_mode_name(r.mode) << '\n'
     << "epochs = " << r.epochs << '\n'
     << "warmup_epochs = " << format_double(r.warmup_epochs) << '\n'
     << "base_lr = " << format_double(r.base_lr) << '\n'
     << "min_lr = " << format_double(r.min_lr) << '\n'
     << "weight_decay = " << format_double(r.weight_decay) << '\n'
     << "beta1 = " << format_double(r.beta1) << '\n'
     << "beta2 = " << format_double(r.beta2) << '\n'
     << "mask_ratio = " << format_double(r.mask_ratio) << '\n'
     << "layer_decay = " << format_double(r.layer_decay) << '\n'
     << "drop_path = " << format_double(r.drop_path) << '\n'
     << "seed = " << r.seed << '\n'
     << "batch_size = " << r.batch_size << '\n'
     << "checkpoint_every = " << r.checkpoint_every << '\n'
     << "max_steps = " << r.max_steps << '\n'
     << "normalize_target = " << (r.normalize_target ? "true" : "false") << '\n'
     << "augment = " << (r.augment ? "true" : "false") << '\n'
     << "crop_scale_min = " << format_double(r.crop_scale_min) << '\n'
     << "lars_momentum = " << format_double(r.lars_momentum) << '\n'
     << "reference_batch_size = " << r.reference_batch_size << '\n'
     << "reference_epochs = " << r.reference_epochs << '\n';
  return os.str();
}

void augment_batch(std::span<float> images, std::int64_t batch, int channels, int size,
                   double scale_min, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  std::vector<float> src(plane * channels);
  for (std::int64_t b = 0; b < batch; ++b) {
    float* img = images.data() + b * plane * channels;
    std::copy(img, img + plane * channels, src.begin());
    int ch = size, cw = size, y0 = 0, x0 = 0;
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double area = size * size * (scale_min + (1.0 - scale_min) * u01(rng));
      const double logr = std::log(3.0 / 4.0) + (std::log(4.0 / 3.0) - std::log(3.0 / 4.0)) * u01(rng);
      const int w = static_cast<int>(std::lround(std::sqrt(area * std::exp(logr))));
      const int h = static_cast<int>(std::lround(std::sqrt(area / std::exp(logr))));
      if (w >= 1 && h >= 1 && w <= size && h <= size) {
        ch = h;
        cw = w;
        y0 = static_cast<int>(u01(rng) * (size - h + 1));
        x0 = static_cast<int>(u01(rng) * (size - w + 1));
        break;
      }
    }
    const bool flip = u01(rng) < 0.5;
    // Bilinear resize of the crop back to size x size (pixel centres aligned).
    for (int c = 0; c < channels; ++c) {
      const float* s = src.data() + c * plane;
      float* d = img + c * plane;
      for (int y = 0; y < size; ++y) {
        const double sy = std::clamp((y + 0.5) * ch / size - 0.5, 0.0, ch - 1.0) + y0;
        const int iy = std::min(static_cast<int>(sy), size - 1);
        const int iy1 = std::min(iy + 1, y0 + ch - 1);
        const double fy = sy - iy;
        for (int x = 0; x < size; ++x) {
          const double sx = std::clamp((x + 0.5) * cw / size - 0.5, 0.0, cw - 1.0) + x0;
          const int ix = std::min(static_cast<int>(sx), size - 1);
          const int ix1 = std::min(ix + 1, x0 + cw - 1);
          const double fx = sx - ix;
          const double v = (1 - fy) * ((1 - fx) * s[iy * size + ix] + fx * s[iy * size + ix1]) +
                           fy * ((1 - fx) * s[iy1 * size + ix] + fx * s[iy1 * size + ix1]);
          d[y * size + (flip ? size - 1 - x : x)] = static_cast<float>(v);
        }
      }
    }
  }
}

Trainer::Trainer(HiViTConfig cfg, Recipe recipe, std::shared_ptr<const CorpusReader> corpus)
    : cfg_(std::move(cfg)), recipe_(recipe), corpus_(std::move(corpus)) {
  const auto& h = corpus_->header();
  if (h.height != static_cast<std::uint32_t>(cfg_.img_size) || h.width != h.height ||
      h.channels != static_cast<std::uint32_t>(cfg_.in_chans))
    throw ConfigError("corpus '" + corpus_->path() + "' holds " + std::to_string(h.height) + "x" +
                      std::to_string(h.width) + "x" + std::to_string(h.channels) + " images but config '" +
                      cfg_.name + "' expects " + std::to_string(cfg_.img_size) + "x" +
                      std::to_string(cfg_.img_size) + "x" + std::to_string(cfg_.in_chans));
  if (recipe_.mode != TrainMode::Pretrain) {
    if (!h.labeled) throw ConfigError("corpus '" + corpus_->path() + "' has no labels");
    if (cfg_.num_classes <= 0) throw ConfigError("config '" + cfg_.name + "' has no classifier head");
  }
  if (recipe_.drop_path >= 0) cfg_.drop_path_rate = recipe_.drop_path;
  if (recipe_.mode == TrainMode::Linprobe) cfg_.drop_path_rate = 0;
  cfg_.validate();
  rng_.seed(mix(recipe_.seed, 0xA5));
}

void Trainer::init_fresh() {
  std::mt19937_64 init(recipe_.seed);
  if (recipe_.mode == TrainMode::Pretrain) mim_ = init_mim<float>(cfg_, init);
  else enc_ = init_encoder<float>(cfg_, init);
  build_lists();
}

void Trainer::build_lists() {
  model_params_.clear();
  train_params_.clear();
  if (recipe_.mode == TrainMode::Pretrain) {
    model_params_ = mim_params(mim_, cfg_);
    train_params_ = model_params_;
  } else {
    collect_params(enc_, cfg_, model_params_, "encoder.", true);
    for (auto& p : model_params_) {
      const bool head = p.name.rfind("head.", 0) == 0;
      if (recipe_.mode == TrainMode::Linprobe && !head) p.tensor.set_requires_grad(false);
      else train_params_.push_back(p);
    }
  }
  lr_scale_ = layerwise_multipliers(train_params_, cfg_.total_blocks(), recipe_.layer_decay);
  opt_.init(train_params_);
}

void Trainer::init_from_pretrained(const Checkpoint& ck) {
  if (recipe_.mode == TrainMode::Pretrain) throw ContractError("init_from_pretrained: pretrain mode");
  init_fresh();
  ParamList<float> encoder;
  collect_params(enc_, cfg_, encoder, "encoder.", false);
  restore_params(ck, encoder, "param/", "param/encoder.");
}

void Trainer::resume(const Checkpoint& ck) {
  const auto meta = parse_kv(ck.meta, "checkpoint meta");
  const std::string mode = kv_lookup(meta, "mode");
  if (mode != train_mode_name(recipe_.mode))
    throw CheckpointError("checkpoint was written by a '" + mode + "' run, not '" +
                          train_mode_name(recipe_.mode) + "'");
  init_fresh();
  restore_params(ck, model_params_, "param/");
  for (std::size_t i = 0; i < train_params_.size(); ++i) {
    const auto& p = train_params_[i];
    ck.get<float>("adam_m/" + p.name, p.tensor.shape(), std::span<float>(opt_.m[i]));
    ck.get<float>("adam_v/" + p.name, p.tensor.shape(), std::span<float>(opt_.v[i]));
  }
  opt_.step = std::stoll(kv_lookup(meta, "opt_step"));
  step_ = static_cast<std::int64_t>(ck.step);
  std::istringstream is(ck.rng);
  is >> rng_;
  if (!is) throw CheckpointError("checkpoint rng state is unreadable");
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.step = static_cast<std::uint64_t>(step_);
  ck.config = to_text(cfg_);
  ck.meta = "opt_step = " + std::to_string(opt_.step) + "\n" + to_text(recipe_);
  std::ostringstream os;
  os << rng_;
  ck.rng = os.str();
  store_params(ck, model_params_, "param/");
  for (std::size_t i = 0; i < train_params_.size(); ++i) {
    const auto& p = train_params_[i];
    ck.put<float>("adam_m/" + p.name, p.tensor.shape(), opt_.m[i]);
    ck.put<float>("adam_v/" + p.name, p.tensor.shape(), opt_.v[i]);
  }
  return ck;
}

std::int64_t Trainer::steps_per_epoch() const {
  const std::int64_t b = std::min<std::int64_t>(recipe_.batch_size, corpus_->size());
  return std::max<std::int64_t>(1, corpus_->size() / b);
}

bool Trainer::done() const {
  if (recipe_.max_steps > 0 && step_ >= recipe_.max_steps) return true;
  return step_ >= steps_per_epoch() * recipe_.epochs;
}

double Trainer::current_lr() const {
  const Schedule s{recipe_.base_lr, recipe_.warmup_epochs, static_cast<double>(recipe_.epochs), recipe_.min_lr};
  return lr_at(s, static_cast<double>(step_) / static_cast<double>(steps_per_epoch()));
}

std::vector<std::int64_t> Trainer::epoch_order(std::int64_t epoch) const {
  std::vector<std::int64_t> order(static_cast<std::size_t>(corpus_->size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  std::mt19937_64 r(mix(recipe_.seed, static_cast<std::uint64_t>(epoch) + 1));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(r)]);
  }
  return order;
}

Tensor<float> Trainer::load_images(std::span<const std::int64_t> indices, std::vector<int>* labels, bool augment) {
  const std::int64_t b = static_cast<std::int64_t>(indices.size());
  const int s = cfg_.img_size, c = cfg_.in_chans;
  std::vector<float> data(static_cast<std::size_t>(b) * c * s * s);
  if (labels) labels->assign(static_cast<std::size_t>(b), 0);
  corpus_->load_batch<float>(indices, data, labels ? std::span<int>(*labels) : std::span<int>());
  if (labels)
    for (int l : *labels)
      if (l >= cfg_.num_classes)
        throw ConfigError("corpus label " + std::to_string(l) + " exceeds num_classes " +
                          std::to_string(cfg_.num_classes));
  if (augment) augment_batch(data, b, c, s, recipe_.crop_scale_min, rng_);
  return Tensor<float>::from_data({b, c, s, s}, std::move(data));
}

Tensor<float> Trainer::forward_loss(const Tensor<float>& images, std::span<const int> labels) {
  const ForwardOptions train{true, &rng_};
  switch (recipe_.mode) {
    case TrainMode::Pretrain: {
      const auto mask = sample_batch_mask(cfg_, images.dim(0), recipe_.mask_ratio, rng_());
      return mim_loss(images, mask, cfg_, mim_, train, recipe_.normalize_target);
    }
    case TrainMode::Finetune:
      return cross_entropy(supervised_forward(images, cfg_, enc_, train), labels);
    case TrainMode::Linprobe: {
      auto feats = mean_tokens(encoder_forward_dense(images, cfg_, enc_, ForwardOptions{}));
      return cross_entropy(linear(feats, enc_.head.w, enc_.head.b), labels);
    }
  }
  throw ContractError("unknown mode");
}

double Trainer::train_step(std::span<const std::int64_t> indices) {
  std::vector<int> labels;
  auto images = load_images(indices, recipe_.mode == TrainMode::Pretrain ? nullptr : &labels, recipe_.augment);
  const double lr = current_lr();
  zero_grads(train_params_);
  auto loss = forward_loss(images, labels);
  backward(loss);
  if (recipe_.mode == TrainMode::Linprobe)
    lars_step(train_params_, opt_, lr, LarsConfig{recipe_.lars_momentum, recipe_.weight_decay, 1e-8});
  else
    adamw_step(train_params_, opt_, lr, AdamWConfig{recipe_.beta1, recipe_.beta2, 1e-8, recipe_.weight_decay},
               lr_scale_);
  ++step_;
  return loss.item();
}

MetricsRow Trainer::run_epoch() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::int64_t spe = steps_per_epoch();
  const std::int64_t e = epoch();
  const std::int64_t b = std::min<std::int64_t>(recipe_.batch_size, corpus_->size());
  const auto order = epoch_order(e);
  double loss_sum = 0, lr = 0;
  std::int64_t steps = 0;
  while (!done() && step_ / spe == e) {
    const std::int64_t i = step_ % spe;
    lr = current_lr();
    loss_sum += train_step(std::span<const std::int64_t>(order).subspan(static_cast<std::size_t>(i * b),
                                                                        static_cast<std::size_t>(b)));
    ++steps;
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  MetricsRow row;
  row.step = step_;
  row.epoch = e;
  row.split = "train";
  row.loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
  row.lr = lr;
  row.wall_ms = ms;
  row.throughput_img_s = ms > 0 ? static_cast<double>(steps * b) / (ms / 1000.0) : 0.0;
  row.config = cfg_.name;
  if (recipe_.mode != TrainMode::Pretrain) row.accuracy = accuracy();
  return row;
}

double Trainer::accuracy() {
  if (recipe_.mode == TrainMode::Pretrain) throw ContractError("accuracy: pretrain model has no classifier");
  NoGradGuard guard;
  const std::int64_t n = corpus_->size();
  const std::int64_t b = std::max<std::int64_t>(1, recipe_.batch_size);
  std::int64_t correct = 0;
  for (std::int64_t s = 0; s < n; s += b) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = s; i < std::min(n, s + b); ++i) idx.push_back(i);
    std::vector<int> labels;
    auto logits = supervised_forward(load_images(idx, &labels, false), cfg_, enc_);
    const std::int64_t c = logits.dim(1);
    const auto d = logits.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = d.subspan(r * static_cast<std::size_t>(c), static_cast<std::size_t>(c));
      const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
      correct += arg == labels[r];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

RunResult run_training(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts) {
  auto corpus = std::make_shared<const CorpusReader>(opts.corpus);
  Trainer t(cfg, recipe, corpus);
  if (!opts.resume_checkpoint.empty()) t.resume(load_checkpoint(opts.resume_checkpoint));
  else if (!opts.init_checkpoint.empty()) t.init_from_pretrained(load_checkpoint(opts.init_checkpoint));
  else t.init_fresh();

  std::filesystem::create_directories(opts.out_dir);
  RunResult res;
  res.metrics_path = (std::filesystem::path(opts.out_dir) / "metrics.jsonl").string();
  res.checkpoint_path = (std::filesystem::path(opts.out_dir) / "checkpoint.hvck").string();
  MetricsWriter metrics(res.metrics_path, opts.resume_checkpoint.empty());
  while (!t.done()) {
    const auto row = t.run_epoch();
    metrics.append(row);
    res.rows.push_back(row);
    if (!opts.quiet) {
      std::printf("%s epoch %lld step %lld loss %.5f lr %.3g %.1f img/s", train_mode_name(recipe.mode),
                  static_cast<long long>(row.epoch), static_cast<long long>(row.step), row.loss, row.lr,
                  row.throughput_img_s);
      if (row.accuracy) std::printf(" acc %.4f", *row.accuracy);
      std::printf("\n");
      std::fflush(stdout);
    }
    const bool periodic = recipe.checkpoint_every > 0 && (row.epoch + 1) % recipe.checkpoint_every == 0;
    if (periodic || t.done()) save_checkpoint(t.checkpoint(), res.checkpoint_path);
  }
  return res;
}

namespace {
RunResult run_mode(TrainMode mode, const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts) {
  if (recipe.mode != mode)
    throw ConfigError(std::string("recipe is for '") + train_mode_name(recipe.mode) + "', not '" +
                      train_mode_name(mode) + "'");
  return run_training(cfg, recipe, opts);
}
}  // namespace

RunResult run_pretrain(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts) {
  return run_mode(TrainMode::Pretrain, cfg, recipe, opts);
}
RunResult run_finetune(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts) {
  return run_mode(TrainMode::Finetune, cfg, recipe, opts);
}
RunResult run_linprobe(const HiViTConfig& cfg, const Recipe& recipe, const RunOptions& opts) {
  return run_mode(TrainMode::Linprobe, cfg, recipe, opts);
}

}  // namespace hivit
