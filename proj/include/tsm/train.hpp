#pragma once

// Optimiser, training loop and evaluation over tile sets.

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "tsm/metrics.hpp"
#include "tsm/model.hpp"

namespace tsm {

// Adam with optional L2 weight decay added to the gradient.
class Adam {
 public:
  Adam(ParamList params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  ParamList params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

// lr * (1 + cos(pi * step / total)) / 2 for the cosine schedule.
double learning_rate(const RunConfig& cfg, std::size_t step, std::size_t total);

// Ground-truth ids relabeled from the dataset's class list into vocabulary
// order by name; classes absent from the vocabulary become kIgnore. With
// no dataset class list the ids are taken as vocabulary ids.
Labels remap_labels(const Labels& labels, const std::vector<std::string>& dataset_classes, const Vocabulary& vocab);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct EvalResult {
  ConfusionMatrix confusion;
  Metrics metrics;
  std::vector<Labels> predictions;  // one per tile, vocabulary ids
};

struct EpochRecord {
  std::size_t epoch = 0;
  Metrics train;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Trains in place on the "train" split. Batches follow a per-epoch shuffle
// from the seed's data-order stream; a trailing partial batch is dropped.
// A non-finite loss aborts with NumericError naming the step and term.
TrainResult train(Model& model, const Dataset& data, const Vocabulary& vocab, const TrainHooks& hooks = {});

std::size_t total_steps(const RunConfig& cfg, std::size_t n_train);

EvalResult evaluate(const Model& model, const std::vector<const TilePair*>& tiles,
                    const std::vector<std::string>& dataset_classes, const Vocabulary& vocab);

// Tab separated, round-trip exact.
void write_step_header(std::ostream& out);
void write_step(std::ostream& out, const StepRecord& r);

}  // namespace tsm
