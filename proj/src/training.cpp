#include "abus/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include "abus/errors.hpp"
#include "abus/metrics.hpp"
#include "abus/ops.hpp"

namespace abus {

template <typename T>
DiceLoss<T> soft_dice_loss(const Tensor<T>& probs, const Tensor<T>& target, double sigma) {
  if (target.channels() != 1 || probs.batch() != target.batch() || probs.spatial() != target.spatial() ||
      probs.rank() != target.rank())
    throw ContractViolation("soft Dice needs probs N x C x S and target N x 1 x S, got " + to_string(probs.shape()) +
                            " and " + to_string(target.shape()));
  if (!(sigma > 0.0)) throw ContractViolation("soft Dice smoothing must be positive");
  const Index fg = probs.channels() > 1 ? 1 : 0;
  const Index plane = probs.spatial().volume();
  double spt = 0, sp = 0, st = 0;
  for (Index n = 0; n < probs.batch(); ++n) {
    const T* p = probs.plane(n, fg);
    const T* t = target.plane(n, 0);
    for (Index i = 0; i < plane; ++i) {
      spt += static_cast<double>(p[i]) * static_cast<double>(t[i]);
      sp += static_cast<double>(p[i]);
      st += static_cast<double>(t[i]);
    }
  }
  const double a = 2.0 * spt + sigma;
  const double b = sp + st + sigma;
  DiceLoss<T> r;
  r.loss = 1.0 - a / b;
  r.grad = Tensor<T>(probs.shape());
  for (Index n = 0; n < probs.batch(); ++n) {
    const T* t = target.plane(n, 0);
    T* g = r.grad.plane(n, fg);
    for (Index i = 0; i < plane; ++i) g[i] = static_cast<T>(-(2.0 * static_cast<double>(t[i]) * b - a) / (b * b));
  }
  return r;
}

template DiceLoss<float> soft_dice_loss(const Tensor<float>&, const Tensor<float>&, double);
template DiceLoss<double> soft_dice_loss(const Tensor<double>&, const Tensor<double>&, double);

template <typename T>
void adam_step(AdamState& s, std::span<const ParamView<T>> params) {
  if (s.m.size() != params.size()) {
    s.m.assign(params.size(), {});
    s.v.assign(params.size(), {});
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const ParamView<T>& p = params[k];
    if (p.grad.size() != p.value.size())
      throw ContractViolation("parameter '" + p.name + "' has " + std::to_string(p.value.size()) + " values but " +
                              std::to_string(p.grad.size()) + " gradients");
    auto& m = s.m[k];
    auto& v = s.v[k];
    if (m.size() != p.value.size()) {
      m.assign(p.value.size(), 0.0);
      v.assign(p.value.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
      const double step = s.alpha * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - step);
    }
  }
}

template void adam_step(AdamState&, std::span<const ParamView<float>>);
template void adam_step(AdamState&, std::span<const ParamView<double>>);

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (folds < 2) throw ConfigError("folds must be >= 2");
  if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs}, {"batch_size", c.batch_size},       {"seed", c.seed},
                     {"folds", c.folds},   {"sigma", c.sigma},                 {"learning_rate", c.learning_rate},
                     {"eval_every", c.eval_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  d.epochs = j.value("epochs", d.epochs);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.seed = j.value("seed", d.seed);
  d.folds = j.value("folds", d.folds);
  d.sigma = j.value("sigma", d.sigma);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.eval_every = j.value("eval_every", d.eval_every);
  c = d;
}

namespace {

// Stacks sample tensors along the batch axis.
TensorF stack(const std::vector<const TensorF*>& parts) {
  Shape shape = parts.front()->shape();
  shape[0] = static_cast<Index>(parts.size());
  std::vector<float> values;
  values.reserve(static_cast<std::size_t>(shape_volume(shape)));
  for (const TensorF* t : parts) {
    if (t->shape() != parts.front()->shape())
      throw ContractViolation("cannot batch samples of shapes " + to_string(parts.front()->shape()) + " and " +
                              to_string(t->shape()));
    values.insert(values.end(), t->values().begin(), t->values().end());
  }
  return TensorF(shape, std::move(values));
}

double batch_step(Model& model, AdamState& adam, const std::vector<Sample>& data, const std::vector<std::size_t>& idx,
                  double sigma) {
  std::vector<TensorF> inputs;
  for (std::size_t p = 0; p < data[idx[0]].inputs.size(); ++p) {
    std::vector<const TensorF*> parts;
    for (std::size_t i : idx) parts.push_back(&data[i].inputs[p]);
    inputs.push_back(stack(parts));
  }
  std::vector<const TensorF*> targets;
  for (std::size_t i : idx) targets.push_back(&data[i].target);
  const TensorF target = stack(targets);
  const TensorF logits = model.forward(inputs, Mode::train);
  const TensorF probs = softmax_over_channels(logits);
  const DiceLoss<float> loss = soft_dice_loss(probs, target, sigma);
  model.backward(softmax_backward(probs, loss.grad));
  const auto params = model.parameters();
  adam_step<float>(adam, params);
  return loss.loss;
}

}  // namespace

double evaluate_dsc(Model& model, const std::vector<Sample>& samples) {
  if (samples.empty()) return 0.0;
  double sum = 0;
  for (const Sample& s : samples) {
    const TensorF logits = model.forward(s.inputs, Mode::infer);
    const Index plane = s.target.size();
    std::vector<float> pred(static_cast<std::size_t>(plane));
    for (Index i = 0; i < plane; ++i) pred[static_cast<std::size_t>(i)] = logits[plane + i] > logits[i] ? 1.0f : 0.0f;
    sum += dice(pred, std::vector<float>(s.target.values().begin(), s.target.values().end()));
  }
  return sum / static_cast<double>(samples.size());
}

TrainResult train(Model& model, const std::vector<Sample>& training, const std::vector<Sample>& validation,
                  const TrainConfig& config) {
  config.validate();
  if (training.empty()) throw ConfigError("training set is empty");
  for (const Sample& s : training)
    if (static_cast<Index>(s.inputs.size()) != model.path_count())
      throw ConfigError("sample from case '" + s.case_id + "' has " + std::to_string(s.inputs.size()) +
                        " inputs for a " + std::to_string(model.path_count()) + "-path model");
  const std::vector<Sample>& val = validation.empty() ? training : validation;
  AdamState adam;
  adam.alpha = config.learning_rate;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(training.size());
  TrainResult r;
  r.best_state = model.state();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + static_cast<std::size_t>(config.batch_size))));
      loss_sum += batch_step(model, adam, training, idx, config.sigma);
      ++batches;
    }
    HistoryRow row{epoch, loss_sum / batches, -1.0};
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      row.val_dsc = evaluate_dsc(model, val);
      if (row.val_dsc > r.best_val_dsc) {
        r.best_val_dsc = row.val_dsc;
        r.best_epoch = epoch;
        r.best_state = model.state();
      }
    }
    r.history.push_back(row);
  }
  model.load_state(r.best_state);
  r.final_train_dsc = evaluate_dsc(model, training);
  return r;
}

std::map<std::string, int> assign_folds(std::vector<std::string> ids, int folds, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  if (const auto dup = std::adjacent_find(ids.begin(), ids.end()); dup != ids.end())
    throw ConfigError("duplicate case id '" + *dup + "'");
  if (folds < 2) throw ConfigError("folds must be >= 2");
  if (static_cast<std::size_t>(folds) > ids.size())
    throw ConfigError("cannot split " + std::to_string(ids.size()) + " cases into " + std::to_string(folds) + " folds");
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::map<std::string, int> out;
  for (std::size_t i = 0; i < ids.size(); ++i) out[ids[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
  return out;
}

CrossValidation cross_validate(const std::vector<Case>& cases, const PatchOptions& patches, const TrainConfig& config,
                               const ModelConfig& architecture, const FoldCallback& on_fold) {
  config.validate();
  architecture.validate();
  std::vector<std::string> ids;
  for (const Case& c : cases) ids.push_back(c.case_id);
  CrossValidation cv;
  cv.assignment = assign_folds(ids, config.folds, config.seed);
  PatchOptions train_patches = patches;
  PatchOptions val_patches = patches;
  val_patches.scale_augmentation.clear();
  double sum = 0;
  for (int f = 0; f < config.folds; ++f) {
    std::vector<Case> fit, held;
    FoldResult fold;
    fold.fold = f;
    for (const Case& c : cases) {
      if (cv.assignment.at(c.case_id) == f) {
        held.push_back(c);
        fold.validation_cases.push_back(c.case_id);
      } else {
        fit.push_back(c);
      }
    }
    std::sort(fold.validation_cases.begin(), fold.validation_cases.end());
    Model model(architecture, config.seed + 7919u * static_cast<std::uint64_t>(f + 1));
    fold.result = train(model, make_samples(fit, train_patches), make_samples(held, val_patches), config);
    sum += fold.result.best_val_dsc;
    if (on_fold) on_fold(fold, model);
    cv.folds.push_back(std::move(fold));
  }
  cv.mean_dsc = sum / config.folds;
  return cv;
}

std::string history_csv(const std::vector<HistoryRow>& history) {
  std::string out = "epoch,train_loss,val_dsc\n";
  char buf[96];
  for (const HistoryRow& r : history) {
    if (r.val_dsc >= 0) {
      std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", r.epoch, r.train_loss, r.val_dsc);
    } else {
      std::snprintf(buf, sizeof buf, "%d,%.9g,\n", r.epoch, r.train_loss);
    }
    out += buf;
  }
  return out;
}

}  // namespace abus
