#include "hourglass/trainer.hpp"

#include <algorithm>
#include <cmath>

namespace hourglass {

AdamOptimizer::AdamOptimizer(ParamStore& params, double peak_lr, int64_t warmup_steps,
                             double clip_norm, double beta1, double beta2, double eps)
    : params_(params),
      peak_lr_(peak_lr),
      clip_norm_(clip_norm),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      warmup_(std::max<int64_t>(1, warmup_steps)) {
  for (const auto& [name, t] : params_.items()) {
    m_.emplace_back(static_cast<size_t>(t.size()), 0.0);
    v_.emplace_back(static_cast<size_t>(t.size()), 0.0);
  }
}

double AdamOptimizer::step() {
  ++step_;
  const double warm = static_cast<double>(warmup_);
  const double s = static_cast<double>(step_);
  const double lr =
      peak_lr_ * std::min(1.0, s / warm) * std::sqrt(warm / std::max(s, warm));

  // Global gradient-norm clipping keeps early updates bounded.
  double sq_norm = 0.0;
  for (auto& [name, t] : params_.items_mutable()) {
    for (double g : t.grad()) sq_norm += g * g;
  }
  const double norm = std::sqrt(sq_norm);
  const double scale = (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;

  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  size_t idx = 0;
  for (auto& [name, t] : params_.items_mutable()) {
    auto grads = t.grad();
    auto vals = t.mutable_values();
    auto& m = m_[idx];
    auto& v = v_[idx];
    for (size_t i = 0; i < vals.size(); ++i) {
      const double g = grads[i] * scale;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      vals[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    ++idx;
  }
  return lr;
}

void AdamOptimizer::export_state(std::vector<std::pair<std::string, Tensor>>& blobs) const {
  blobs.emplace_back("opt.step", Tensor::from_values({1}, {static_cast<double>(step_)}));
  size_t idx = 0;
  for (const auto& [name, t] : params_.items()) {
    blobs.emplace_back("opt.m." + name, Tensor::from_values(t.shape(), m_[idx]));
    blobs.emplace_back("opt.v." + name, Tensor::from_values(t.shape(), v_[idx]));
    ++idx;
  }
}

bool AdamOptimizer::import_state(const CheckpointData& data) {
  const Tensor* step_blob = data.find("opt.step");
  if (!step_blob) return false;
  step_ = static_cast<int64_t>(step_blob->values()[0]);
  size_t idx = 0;
  for (const auto& [name, t] : params_.items()) {
    const Tensor* m_blob = data.find("opt.m." + name);
    const Tensor* v_blob = data.find("opt.v." + name);
    if (!m_blob || !v_blob)
      throw IoError("optimizer state incomplete: missing moments for " + name);
    check_shape(m_blob->shape() == t.shape() && v_blob->shape() == t.shape(),
                "optimizer state shape mismatch for ", name);
    m_[idx].assign(m_blob->values().begin(), m_blob->values().end());
    v_[idx].assign(v_blob->values().begin(), v_blob->values().end());
    ++idx;
  }
  return true;
}

AVBatch collate(const std::vector<Sample>& samples, size_t first, size_t last, bool with_video) {
  check_contract(first < last && last <= samples.size(), "collate: empty or out-of-range window");
  const int64_t b = static_cast<int64_t>(last - first);
  int64_t ta = 0, tv = 0, fa = 0, hw = 0;
  for (size_t i = first; i < last; ++i) {
    ta = std::max(ta, samples[i].audio_frames);
    tv = std::max(tv, samples[i].video_frames);
  }
  fa = static_cast<int64_t>(samples[first].audio.size()) / samples[first].audio_frames;
  hw = static_cast<int64_t>(std::llround(
      std::sqrt(static_cast<double>(samples[first].video.size() / samples[first].video_frames))));

  AVBatch batch;
  std::vector<double> audio(static_cast<size_t>(b * ta * fa), 0.0);
  std::vector<double> video;
  if (with_video) video.assign(static_cast<size_t>(b * tv * hw * hw), 0.0);
  for (size_t i = first; i < last; ++i) {
    const int64_t row = static_cast<int64_t>(i - first);
    const Sample& s = samples[i];
    std::copy(s.audio.begin(), s.audio.end(), audio.begin() + row * ta * fa);
    if (with_video)
      std::copy(s.video.begin(), s.video.end(), video.begin() + row * tv * hw * hw);
    batch.tokens.push_back(s.tokens);
    batch.audio_len.push_back(s.audio_frames);
    batch.video_len.push_back(s.video_frames);
  }
  batch.audio = Tensor::from_values({b, ta, fa}, std::move(audio));
  if (with_video) batch.video = Tensor::from_values({b, tv, hw, hw, 1}, std::move(video));
  return batch;
}

TrainResult train_model(HourglassModel& model, AdamOptimizer& opt, const std::vector<Sample>& data,
                        const TrainOptions& options,
                        const std::function<void(const TrainRecord&)>& on_record) {
  check_contract(!data.empty(), "train: empty dataset");
  const size_t n = data.size();
  const size_t bs = static_cast<size_t>(options.batch_size);
  TrainResult result;
  size_t cursor = 0;
  for (int64_t step = 1; step <= options.steps; ++step) {
    const size_t first = cursor;
    const size_t last = std::min(n, first + bs);
    cursor = last >= n ? 0 : last;

    AVBatch batch = collate(data, first, last, model.config().use_video);
    model.params().zero_grad();
    LossBundle bundle = model.compute_loss(batch);
    const double total = bundle.total_value();
    if (!std::isfinite(total))
      throw TrainingError(step, static_cast<int64_t>(first),
                          detail::concat_msg("non-finite loss at step ", step,
                                             " on batch starting at sample ", first));
    bundle.total.backward();
    const double lr = opt.step();

    TrainRecord rec{step, bundle.ce_value(), bundle.ctc_value(), bundle.va_value(), total, lr};
    result.records.push_back(rec);
    if (on_record) on_record(rec);
  }
  return result;
}

int64_t edit_distance(const TokenSeq& a, const TokenSeq& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int64_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int64_t subst = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, subst});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

EvalResult evaluate_model(const HourglassModel& model, const std::vector<Sample>& data,
                          int64_t batch_size, int64_t window_past, int64_t window_future) {
  check_contract(!data.empty(), "evaluate: empty dataset");
  EvalResult result;
  double mass_sum = 0.0;
  int64_t mass_frames = 0;
  for (size_t first = 0; first < data.size(); first += static_cast<size_t>(batch_size)) {
    const size_t last = std::min(data.size(), first + static_cast<size_t>(batch_size));
    AVBatch batch = collate(data, first, last, model.config().use_video);
    ModelDiagnostics diag;
    auto hyps = model.recognize(batch, &diag);
    for (size_t i = 0; i < hyps.size(); ++i) {
      const TokenSeq& ref = data[first + i].tokens;
      result.edit_total += edit_distance(hyps[i], ref);
      result.ref_total += static_cast<int64_t>(ref.size());
      result.hypotheses.push_back(std::move(hyps[i]));
    }
    if (diag.alpha.defined()) {
      const auto av = diag.alpha.values();
      const int64_t tq = diag.alpha.dim(1), tk = diag.alpha.dim(2);
      for (int64_t b = 0; b < diag.alpha.dim(0); ++b) {
        const int64_t valid = std::min(diag.alpha_valid[static_cast<size_t>(b)], tq);
        for (int64_t i = 0; i < valid; ++i) {
          const int64_t lo = std::max<int64_t>(0, i - window_past);
          const int64_t hi = std::min(valid - 1, i + window_future);
          double mass = 0.0;
          for (int64_t j = lo; j <= hi; ++j) mass += av[(b * tq + i) * tk + j];
          mass_sum += mass;
          ++mass_frames;
        }
      }
    }
  }
  result.ter = result.ref_total > 0
                   ? static_cast<double>(result.edit_total) / static_cast<double>(result.ref_total)
                   : 0.0;
  if (mass_frames > 0) result.window_mass = mass_sum / static_cast<double>(mass_frames);
  return result;
}

}  // namespace hourglass
