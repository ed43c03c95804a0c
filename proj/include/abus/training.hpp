#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "abus/model.hpp"
#include "abus/patches.hpp"

namespace abus {

template <typename T>
struct DiceLoss {
  double loss = 0.0;
  Tensor<T> grad;  // d loss / d probs, zero outside the foreground channel
};

// 1 - (2 sum p t + sigma) / (sum p + sum t + sigma) over the whole batch,
// where p is the foreground channel (channel 1, or 0 for single-channel
// input) and `target` is N x 1 x spatial.
template <typename T>
DiceLoss<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& target, double sigma = 1.0);

// Adam with bias correction; moments are kept in double.
struct AdamState {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// Updates every parameter from its gradient and increments t once.
template <typename T>
void adam_step(AdamState& state, std::span<const ParamView<T>> params);

struct TrainConfig {
  int epochs = 200;
  int batch_size = 4;
  std::uint64_t seed = 0;
  int folds = 5;
  double sigma = 1.0;
  double learning_rate = 1e-3;
  int eval_every = 1;  // validation cadence in epochs; the last epoch is always evaluated

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct HistoryRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dsc = -1.0;  // negative when the epoch was not evaluated
};

struct TrainResult {
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  double best_val_dsc = -1.0;
  double final_train_dsc = 0.0;
  std::vector<NamedArray<float>> best_state;
};

// Mean per-sample hard Dice of the infer-mode argmax against the targets.
double evaluate_dsc(Model& model, const std::vector<Sample>& samples);

// Trains with soft Dice and Adam; batches are drawn in a seeded shuffle.
// Validation falls back to the training samples when `validation` is
// empty. On return the model holds the best-validation parameters.
TrainResult train(Model& model, const std::vector<Sample>& training, const std::vector<Sample>& validation,
                  const TrainConfig& config);

// Case-level fold assignment keyed by id: the sorted ids are shuffled with
// `seed` and dealt round-robin, so input order does not matter.
std::map<std::string, int> assign_folds(std::vector<std::string> case_ids, int folds, std::uint64_t seed);

struct FoldResult {
  int fold = 0;
  std::vector<std::string> validation_cases;
  TrainResult result;
};

struct CrossValidation {
  std::vector<FoldResult> folds;
  std::map<std::string, int> assignment;
  double mean_dsc = 0.0;
};

// Called after each fold with the trained model (holding its best state).
using FoldCallback = std::function<void(const FoldResult&, const Model&)>;

CrossValidation cross_validate(const std::vector<Case>& cases, const PatchOptions& patches, const TrainConfig& config,
                               const ModelConfig& architecture, const FoldCallback& on_fold = nullptr);

// "epoch,train_loss,val_dsc" rows; unevaluated epochs leave val_dsc empty.
std::string history_csv(const std::vector<HistoryRow>& history);

}  // namespace abus
