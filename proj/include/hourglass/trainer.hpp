#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hourglass/checkpoint.hpp"
#include "hourglass/corpus.hpp"
#include "hourglass/model.hpp"

namespace hourglass {

struct TrainingError : std::runtime_error {
  int64_t step = -1;
  int64_t batch_start = -1;
  TrainingError(int64_t step, int64_t batch_start, const std::string& msg)
      : std::runtime_error(msg), step(step), batch_start(batch_start) {}
};

// Adaptive-moment optimizer with linear warmup and inverse-square-root
// decay; the update sweep follows parameter creation order.
class AdamOptimizer {
 public:
  AdamOptimizer(ParamStore& params, double peak_lr, int64_t warmup_steps, double clip_norm = 1.0,
                double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9);

  // Applies one update from accumulated gradients; returns the lr used.
  double step();
  int64_t step_count() const { return step_; }

  void export_state(std::vector<std::pair<std::string, Tensor>>& blobs) const;
  // Restores moment buffers from "opt." blobs; returns false when absent.
  bool import_state(const CheckpointData& data);

 private:
  ParamStore& params_;
  double peak_lr_, clip_norm_, beta1_, beta2_, eps_;
  int64_t warmup_;
  int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Collate [first,last) samples into a padded batch (padding carries zeros).
AVBatch collate(const std::vector<Sample>& samples, size_t first, size_t last, bool with_video);

struct TrainOptions {
  int64_t steps = 200;
  int64_t batch_size = 4;
  double peak_lr = 2e-3;
  int64_t warmup_steps = 20;
  double clip_norm = 1.0;
};

struct TrainRecord {
  int64_t step = 0;
  double ce = 0, ctc = 0, va_align = 0, total = 0, lr = 0;
};

struct TrainResult {
  std::vector<TrainRecord> records;
};

// Fixed-seed loop over sequential batches (cycling through the dataset in
// order). Aborts with TrainingError on a non-finite loss, reporting the
// offending batch.
TrainResult train_model(HourglassModel& model, AdamOptimizer& opt, const std::vector<Sample>& data,
                        const TrainOptions& options,
                        const std::function<void(const TrainRecord&)>& on_record = nullptr);

int64_t edit_distance(const TokenSeq& a, const TokenSeq& b);

struct EvalResult {
  double ter = 0.0;
  int64_t edit_total = 0;
  int64_t ref_total = 0;
  // Mean over valid frames of the alignment mass inside the +-(l,r) window;
  // absent when the model has no upsampler.
  std::optional<double> window_mass;
  std::vector<TokenSeq> hypotheses;
};

EvalResult evaluate_model(const HourglassModel& model, const std::vector<Sample>& data,
                          int64_t batch_size, int64_t window_past, int64_t window_future);

}  // namespace hourglass
