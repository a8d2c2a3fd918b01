#include "hourglass/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "hourglass/checkpoint.hpp"

namespace hourglass {

using nlohmann::json;
namespace fs = std::filesystem;

void CorpusSpec::validate() const {
  check_config(vocab_size >= 2, "corpus: vocab must include the blank plus one token");
  check_config(audio_bins >= 2, "corpus: need at least two feature bins");
  check_config(video_size >= 8, "corpus: video patch must be at least 8x8");
  check_config(min_token_audio_frames >= 4 && max_token_audio_frames >= min_token_audio_frames,
               "corpus: token duration range invalid");
  check_config(max_token_audio_frames <= 64, "corpus: token duration too long");
  check_config(min_tokens >= 1 && max_tokens >= min_tokens, "corpus: token count range invalid");
  check_config(max_gap_audio_frames >= 0, "corpus: gap must be >= 0");
  check_config(dropout_prob >= 0.0 && dropout_prob <= 1.0, "corpus: dropout must be in [0,1]");
}

std::string CorpusSpec::to_json_text(int indent) const {
  json j;
  j["vocab_size"] = vocab_size;
  j["audio_bins"] = audio_bins;
  j["video_size"] = video_size;
  j["min_token_audio_frames"] = min_token_audio_frames;
  j["max_token_audio_frames"] = max_token_audio_frames;
  j["max_gap_audio_frames"] = max_gap_audio_frames;
  j["min_tokens"] = min_tokens;
  j["max_tokens"] = max_tokens;
  j["snr_db"] = snr_db;
  j["dropout_prob"] = dropout_prob;
  j["seed"] = seed;
  return j.dump(indent);
}

CorpusSpec CorpusSpec::from_json_text(const std::string& text) {
  json j = json::parse(text);
  CorpusSpec s;
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  get("vocab_size", s.vocab_size);
  get("audio_bins", s.audio_bins);
  get("video_size", s.video_size);
  get("min_token_audio_frames", s.min_token_audio_frames);
  get("max_token_audio_frames", s.max_token_audio_frames);
  get("max_gap_audio_frames", s.max_gap_audio_frames);
  get("min_tokens", s.min_tokens);
  get("max_tokens", s.max_tokens);
  get("snr_db", s.snr_db);
  get("dropout_prob", s.dropout_prob);
  get("seed", s.seed);
  s.validate();
  return s;
}

namespace {

// Round a duration to a multiple of 4 so the 4:1 audio/video frame ratio
// stays exact.
int64_t round4(int64_t frames) { return std::max<int64_t>(4, (frames / 4) * 4); }

// Token signatures derive from the corpus seed alone, never from the
// sample index, so every utterance shares one inventory.
struct TokenSignature {
  std::vector<double> spectral;  // [Fa]
  std::vector<double> spatial;   // [H,W]
};

TokenSignature token_signature(const CorpusSpec& spec, int64_t token) {
  RngStream rng = RngStream(spec.seed).child(0xA11D0 + static_cast<uint64_t>(token));
  TokenSignature sig;
  // Two strong spectral ridges plus a low-level random floor.
  sig.spectral.assign(static_cast<size_t>(spec.audio_bins), 0.0);
  const int64_t ridge1 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(spec.audio_bins)));
  int64_t ridge2 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(spec.audio_bins)));
  if (ridge2 == ridge1) ridge2 = (ridge1 + spec.audio_bins / 2) % spec.audio_bins;
  for (int64_t f = 0; f < spec.audio_bins; ++f)
    sig.spectral[static_cast<size_t>(f)] = 0.15 * rng.uniform();
  sig.spectral[static_cast<size_t>(ridge1)] = 1.0;
  sig.spectral[static_cast<size_t>(ridge2)] = 0.7;

  // Blocky 4x4 pattern upsampled to the patch; coarse blocks survive the
  // frontend's spatial pooling.
  const int64_t hw = spec.video_size;
  std::vector<double> blocks(16);
  for (double& b : blocks) b = rng.uniform() < 0.5 ? 0.0 : 1.0;
  sig.spatial.assign(static_cast<size_t>(hw * hw), 0.0);
  for (int64_t h = 0; h < hw; ++h)
    for (int64_t w = 0; w < hw; ++w)
      sig.spatial[static_cast<size_t>(h * hw + w)] =
          blocks[static_cast<size_t>((h * 4 / hw) * 4 + (w * 4 / hw))];
  return sig;
}

}  // namespace

Sample generate_sample(const CorpusSpec& spec, int64_t index) {
  spec.validate();
  RngStream rng = RngStream(spec.seed).child(static_cast<uint64_t>(index));

  const int64_t num_tokens =
      spec.min_tokens +
      static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(spec.max_tokens - spec.min_tokens + 1)));

  Sample sample;
  std::vector<int64_t> durations, gaps;
  int64_t total_audio = 0;
  for (int64_t i = 0; i < num_tokens; ++i) {
    const int64_t token =
        1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(spec.vocab_size - 1)));
    sample.tokens.push_back(token);
    const int64_t dur = round4(
        spec.min_token_audio_frames +
        static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(
            spec.max_token_audio_frames - spec.min_token_audio_frames + 1))));
    durations.push_back(dur);
    const int64_t gap_steps = spec.max_gap_audio_frames / 4;
    const int64_t gap =
        gap_steps == 0
            ? 0
            : 4 * static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(gap_steps + 1)));
    gaps.push_back(i == 0 ? 0 : gap);
    total_audio += durations.back() + gaps.back();
  }

  sample.audio_frames = total_audio;
  sample.video_frames = total_audio / 4;
  const int64_t fa = spec.audio_bins;
  const int64_t hw = spec.video_size;
  sample.audio.assign(static_cast<size_t>(total_audio * fa), 0.0);
  sample.video.assign(static_cast<size_t>(sample.video_frames * hw * hw), 0.0);

  int64_t cursor = 0;
  for (size_t i = 0; i < sample.tokens.size(); ++i) {
    cursor += gaps[i];
    const int64_t dur = durations[i];
    const TokenSignature sig = token_signature(spec, sample.tokens[i]);
    sample.audio_spans.emplace_back(cursor, cursor + dur);
    for (int64_t t = 0; t < dur; ++t) {
      const double env = std::sin(M_PI * (static_cast<double>(t) + 0.5) / static_cast<double>(dur));
      double* row = sample.audio.data() + (cursor + t) * fa;
      for (int64_t f = 0; f < fa; ++f) row[f] += env * sig.spectral[static_cast<size_t>(f)];
    }
    const int64_t vstart = cursor / 4, vdur = dur / 4;
    for (int64_t t = 0; t < vdur; ++t) {
      const double env =
          std::sin(M_PI * (static_cast<double>(t) + 0.5) / static_cast<double>(vdur));
      double* frame = sample.video.data() + (vstart + t) * hw * hw;
      for (int64_t p = 0; p < hw * hw; ++p) frame[p] += env * sig.spatial[static_cast<size_t>(p)];
    }
    cursor += dur;
  }

  // Audio corruption: additive noise at the requested SNR, then zeroed
  // chunks. Video stays clean.
  if (spec.snr_db < 100.0) {
    double power = 0.0;
    for (double v : sample.audio) power += v * v;
    const double rms = std::sqrt(power / static_cast<double>(sample.audio.size()));
    const double noise_std = rms * std::pow(10.0, -spec.snr_db / 20.0);
    for (double& v : sample.audio) v += noise_std * rng.normal();
  }
  if (spec.dropout_prob > 0.0) {
    const int64_t chunk = 8;
    for (int64_t start = 0; start < total_audio; start += chunk) {
      if (rng.uniform() < spec.dropout_prob) {
        const int64_t stop = std::min(total_audio, start + chunk);
        std::fill(sample.audio.begin() + start * fa, sample.audio.begin() + stop * fa, 0.0);
      }
    }
  }
  return sample;
}

std::vector<Sample> generate_corpus(const CorpusSpec& spec, int64_t count) {
  check_config(count >= 1, "corpus: count must be >= 1");
  std::vector<Sample> samples;
  samples.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) samples.push_back(generate_sample(spec, i));
  return samples;
}

void write_corpus_dir(const std::string& dir, const CorpusSpec& spec, int64_t count) {
  fs::create_directories(dir);
  json manifest;
  manifest["spec"] = json::parse(spec.to_json_text());
  manifest["count"] = count;
  json entries = json::array();
  for (int64_t i = 0; i < count; ++i) {
    Sample s = generate_sample(spec, i);
    char audio_name[32], video_name[32];
    std::snprintf(audio_name, sizeof(audio_name), "audio_%05lld.ten", static_cast<long long>(i));
    std::snprintf(video_name, sizeof(video_name), "video_%05lld.ten", static_cast<long long>(i));
    write_tensor_file((fs::path(dir) / audio_name).string(), s.audio,
                      {s.audio_frames, spec.audio_bins});
    write_tensor_file((fs::path(dir) / video_name).string(), s.video,
                      {s.video_frames, spec.video_size, spec.video_size, 1});
    json e;
    e["id"] = i;
    e["tokens"] = s.tokens;
    e["audio"] = audio_name;
    e["video"] = video_name;
    e["audio_frames"] = s.audio_frames;
    e["video_frames"] = s.video_frames;
    json spans = json::array();
    for (auto [a, b] : s.audio_spans) spans.push_back({a, b});
    e["audio_spans"] = spans;
    entries.push_back(std::move(e));
  }
  manifest["samples"] = std::move(entries);
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write corpus manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

std::vector<Sample> read_corpus_dir(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("no corpus manifest in " + dir);
  json manifest = json::parse(in);
  std::vector<Sample> samples;
  for (const auto& e : manifest.at("samples")) {
    Sample s;
    s.tokens = e.at("tokens").get<TokenSeq>();
    s.audio_frames = e.at("audio_frames").get<int64_t>();
    s.video_frames = e.at("video_frames").get<int64_t>();
    auto [ashape, avalues] = read_tensor_file((fs::path(dir) / e.at("audio").get<std::string>()).string());
    auto [vshape, vvalues] = read_tensor_file((fs::path(dir) / e.at("video").get<std::string>()).string());
    check_shape(ashape.size() == 2 && ashape[0] == s.audio_frames, "corpus: bad audio tensor shape");
    check_shape(vshape.size() == 4 && vshape[0] == s.video_frames, "corpus: bad video tensor shape");
    s.audio = std::move(avalues);
    s.video = std::move(vvalues);
    for (const auto& span : e.at("audio_spans"))
      s.audio_spans.emplace_back(span.at(0).get<int64_t>(), span.at(1).get<int64_t>());
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace hourglass
