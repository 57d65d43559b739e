#pragma once

// Synthetic grounding datasets with planted target segments, the on-disk
// dataset format (raw float32 feature files + JSON manifest), and batching.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "apgn/mat.hpp"

namespace apgn {

struct SyntheticConfig {
  int frames = 64;            // T
  int feature_dim = 16;       // F
  int vocab_size = 50;
  std::pair<int, int> query_len_range = {3, 7};
  std::pair<int, int> segment_len_range = {6, 14};
  double noise_std = 0.25;
  uint64_t seed = 0;

  void validate() const;
  std::string hash() const;
};

struct VideoSample {
  MatF features;            // [T x F]
  std::vector<int> tokens;  // [N]
  double tau_s = 0;         // ground-truth start, frame units
  double tau_e = 0;         // ground-truth end, frame units
  std::string id;

  int frames() const { return (int)features.rows(); }
  void validate() const;
};

struct ManifestEntry {
  std::string id;
  std::string feature_file;
  int frames = 0;
  int query_len = 0;
  double tau_s = 0, tau_e = 0;
  std::vector<int> tokens;
  double fps = 0;  // only meaningful for time_unit == "seconds"
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::string split;
  std::string config_hash;
  std::string time_unit = "frames";  // or "seconds" (+ per-entry fps)
};

// Deterministic unit-norm signature vector for a token under a dataset seed.
std::vector<float> token_signature(uint64_t seed, int token, int feature_dim);

VideoSample generate_sample(const SyntheticConfig& config, int64_t index);

DatasetManifest write_dataset(const std::vector<VideoSample>& samples,
                              const std::string& directory, const std::string& split,
                              const std::string& config_hash);

std::vector<VideoSample> read_dataset(const std::string& manifest_path);

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct SampleMeta {
  int frames = 0;     // true T
  int query_len = 0;  // true N
  double tau_s = 0, tau_e = 0;
  std::string id;
};

// Samples stacked batch-major: frame row b*max_frames + t, token slot
// b*max_query_len + n. Masks mark valid positions; everything downstream must
// ignore padded ones.
struct Batch {
  int size = 0;        // B
  int max_frames = 0;  // padded T
  int max_query_len = 0;
  MatF features;                    // [B*max_frames x F]
  std::vector<int> tokens;          // [B*max_query_len], 0 at padding
  std::vector<uint8_t> frame_mask;  // [B*max_frames]
  std::vector<uint8_t> token_mask;  // [B*max_query_len]
  std::vector<SampleMeta> meta;     // [B]
};

std::vector<Batch> batchify(const std::vector<VideoSample>& samples, int batch_size);

Batch make_batch(const std::vector<VideoSample>& samples, size_t begin, size_t end);

}  // namespace apgn
