#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hourglass/losses.hpp"
#include "hourglass/tensor.hpp"

namespace hourglass {

// Synthetic audio-visual utterances with known token alignments. Every
// token carries a fixed spectral signature over the feature bins and a
// fixed spatial pattern on the video patch; both span the same wall-clock
// interval at a 4:1 audio/video frame ratio. Corruption (noise, dropout)
// applies to the audio only.
struct CorpusSpec {
  int64_t vocab_size = 8;  // ids 1..vocab_size-1; 0 is the CTC blank
  int64_t audio_bins = 16;
  int64_t video_size = 16;  // square patch, one channel
  int64_t min_token_audio_frames = 8;
  int64_t max_token_audio_frames = 16;
  int64_t max_gap_audio_frames = 4;  // silence between tokens
  int64_t min_tokens = 2;
  int64_t max_tokens = 5;
  double snr_db = 100.0;  // >= 100 means clean
  double dropout_prob = 0.0;
  uint64_t seed = 1;

  void validate() const;
  std::string to_json_text(int indent = 2) const;
  static CorpusSpec from_json_text(const std::string& text);
};

struct Sample {
  int64_t audio_frames = 0;
  int64_t video_frames = 0;
  std::vector<double> audio;  // [Ta, Fa] row-major
  std::vector<double> video;  // [Tv, H, W, 1] row-major
  TokenSeq tokens;
  // Gold alignment: per token the [start,end) span in audio frames.
  std::vector<std::pair<int64_t, int64_t>> audio_spans;
};

// Pure function of (spec, index): regenerating a sample always yields the
// same bytes regardless of generation order or process.
Sample generate_sample(const CorpusSpec& spec, int64_t index);
std::vector<Sample> generate_corpus(const CorpusSpec& spec, int64_t count);

// On-disk corpus: manifest.json plus one feature file per modality and
// sample (raw tensor files, see checkpoint.hpp).
void write_corpus_dir(const std::string& dir, const CorpusSpec& spec, int64_t count);
std::vector<Sample> read_corpus_dir(const std::string& dir);

}  // namespace hourglass
