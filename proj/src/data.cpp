#include "apgn/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "apgn/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace apgn {

void SyntheticConfig::validate() const {
  if (frames < 2) throw ConfigError("frames must be >= 2");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (query_len_range.first < 1 || query_len_range.second < query_len_range.first)
    throw ConfigError("query_len_range invalid");
  if (query_len_range.second > vocab_size)
    throw ConfigError("query_len_range.max exceeds vocab_size");
  // A target needs distinct start/end frames, so the shortest segment is 2.
  if (segment_len_range.first < 2 || segment_len_range.second < segment_len_range.first ||
      segment_len_range.second > frames)
    throw ConfigError("segment_len_range invalid");
  if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
}

std::string SyntheticConfig::hash() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "T=%d F=%d V=%d q=%d..%d s=%d..%d n=%.9g seed=%llu",
                frames, feature_dim, vocab_size, query_len_range.first,
                query_len_range.second, segment_len_range.first, segment_len_range.second,
                noise_std, (unsigned long long)seed);
  return hex64(fnv1a(buf, std::char_traits<char>::length(buf)));
}

void VideoSample::validate() const {
  if (!all_finite(features)) throw ValidationError("sample " + id + ": non-finite features");
  int t = frames();
  if (!(tau_s < tau_e) || tau_s < 0 || tau_e > t - 1)
    throw ValidationError("sample " + id + ": bad ground-truth segment");
  if (tokens.empty()) throw ValidationError("sample " + id + ": empty query");
}

std::vector<float> token_signature(uint64_t seed, int token, int feature_dim) {
  DetRng rng(mix_seed(seed, (uint64_t)token, 0x516E41ull));
  std::vector<float> v(feature_dim);
  double norm2 = 0;
  for (int i = 0; i < feature_dim; ++i) {
    v[i] = (float)rng.gaussian();
    norm2 += (double)v[i] * v[i];
  }
  float inv = (float)(1.0 / std::sqrt(std::max(norm2, 1e-12)));
  for (float& x : v) x *= inv;
  return v;
}

namespace {

std::vector<int> draw_distinct_tokens(DetRng& rng, int count, int vocab,
                                      const std::set<int>& exclude) {
  std::vector<int> out;
  std::set<int> used = exclude;
  while ((int)out.size() < count && (int)used.size() < vocab) {
    int tok = (int)rng.uniform_int(0, vocab - 1);
    if (used.insert(tok).second) out.push_back(tok);
  }
  return out;
}

std::vector<float> mixed_signature(uint64_t seed, const std::vector<int>& toks, int dim) {
  std::vector<float> acc(dim, 0.f);
  for (int tok : toks) {
    auto sig = token_signature(seed, tok, dim);
    for (int i = 0; i < dim; ++i) acc[i] += sig[i];
  }
  double norm2 = 0;
  for (float x : acc) norm2 += (double)x * x;
  float inv = (float)(1.0 / std::sqrt(std::max(norm2, 1e-12)));
  for (float& x : acc) x *= inv;
  return acc;
}

}  // namespace

VideoSample generate_sample(const SyntheticConfig& config, int64_t index) {
  config.validate();
  DetRng rng(mix_seed(config.seed, (uint64_t)index, 0xDA7A5E7ull));
  const int t_total = config.frames;
  const int dim = config.feature_dim;

  int seg_len = (int)rng.uniform_int(config.segment_len_range.first,
                                     config.segment_len_range.second);
  int tau_s = (int)rng.uniform_int(0, t_total - seg_len);
  int tau_e = tau_s + seg_len - 1;

  int query_len = (int)rng.uniform_int(config.query_len_range.first,
                                       config.query_len_range.second);
  std::vector<int> tokens = draw_distinct_tokens(rng, query_len, config.vocab_size, {});
  std::set<int> query_set(tokens.begin(), tokens.end());

  auto signal = mixed_signature(config.seed, tokens, dim);
  auto background = mixed_signature(
      config.seed, draw_distinct_tokens(rng, 3, config.vocab_size, query_set), dim);

  // Optional decoy segment with yet another wrong-token signature.
  int decoy_s = -1, decoy_e = -1;
  std::vector<float> decoy_sig;
  if (rng.uniform() < 0.5) {
    int decoy_len = (int)rng.uniform_int(config.segment_len_range.first,
                                         config.segment_len_range.second);
    decoy_sig = mixed_signature(
        config.seed, draw_distinct_tokens(rng, 3, config.vocab_size, query_set), dim);
    for (int attempt = 0; attempt < 8; ++attempt) {
      int s = (int)rng.uniform_int(0, t_total - decoy_len);
      int e = s + decoy_len - 1;
      if (e < tau_s || s > tau_e) {
        decoy_s = s;
        decoy_e = e;
        break;
      }
    }
  }

  VideoSample sample;
  sample.features.resize(t_total, dim);
  for (int t = 0; t < t_total; ++t) {
    const std::vector<float>* base = &background;
    if (t >= tau_s && t <= tau_e)
      base = &signal;
    else if (decoy_s >= 0 && t >= decoy_s && t <= decoy_e)
      base = &decoy_sig;
    for (int f = 0; f < dim; ++f)
      sample.features(t, f) =
          (*base)[f] + (float)(config.noise_std * rng.gaussian());
  }
  sample.tokens = std::move(tokens);
  sample.tau_s = tau_s;
  sample.tau_e = tau_e;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06lld", (long long)index);
  sample.id = std::string("sample-") + buf;
  sample.validate();
  return sample;
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

namespace {

void write_f32_file(const fs::path& path, const MatF& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot open for writing: " + path.string());
  static_assert(sizeof(float) == 4);
  // row-major little-endian float32
  out.write(reinterpret_cast<const char*>(m.data()),
            (std::streamsize)(m.size() * sizeof(float)));
  if (!out) throw IngestionError("short write: " + path.string());
}

MatF read_f32_file(const fs::path& path, int rows, int cols, const std::string& id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("missing feature file for '" + id + "': " + path.string());
  in.seekg(0, std::ios::end);
  auto bytes = (long long)in.tellg();
  long long expected = (long long)rows * cols * 4;
  if (bytes != expected)
    throw IngestionError("feature file for '" + id + "' has " + std::to_string(bytes) +
                         " bytes, expected " + std::to_string(expected));
  in.seekg(0);
  MatF m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), expected);
  if (!in) throw IngestionError("short read on feature file for '" + id + "'");
  return m;
}

}  // namespace

DatasetManifest write_dataset(const std::vector<VideoSample>& samples,
                              const std::string& directory, const std::string& split,
                              const std::string& config_hash) {
  if (samples.empty()) throw ValidationError("write_dataset: no samples");
  fs::path dir(directory);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IngestionError("cannot create directory: " + directory);

  DatasetManifest manifest;
  manifest.split = split;
  manifest.config_hash = config_hash;
  json entries = json::array();
  for (const VideoSample& s : samples) {
    std::string fname = s.id + ".f32";
    write_f32_file(dir / fname, s.features);
    ManifestEntry e;
    e.id = s.id;
    e.feature_file = fname;
    e.frames = s.frames();
    e.query_len = (int)s.tokens.size();
    e.tau_s = s.tau_s;
    e.tau_e = s.tau_e;
    e.tokens = s.tokens;
    manifest.entries.push_back(e);
    entries.push_back({{"id", e.id},
                       {"feature_file", e.feature_file},
                       {"T", e.frames},
                       {"N", e.query_len},
                       {"tau_s", e.tau_s},
                       {"tau_e", e.tau_e},
                       {"tokens", e.tokens}});
  }
  json doc = {{"format_version", 1},
              {"split", split},
              {"config_hash", config_hash},
              {"time_unit", "frames"},
              {"feature_dim", (int)samples.front().features.cols()},
              {"entries", entries}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IngestionError("cannot write manifest in " + directory);
  out << doc.dump(2) << "\n";
  return manifest;
}

std::vector<VideoSample> read_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IngestionError("cannot open manifest: " + manifest_path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw IngestionError("manifest parse error: " + std::string(e.what()));
  }
  if (!doc.contains("format_version") || doc["format_version"].get<int>() != 1)
    throw IngestionError("manifest: unsupported format_version");
  std::string time_unit = doc.value("time_unit", std::string("frames"));
  if (time_unit != "frames" && time_unit != "seconds")
    throw IngestionError("manifest: unknown time_unit '" + time_unit + "'");

  int feature_dim = doc.value("feature_dim", 0);
  if (feature_dim < 1) throw IngestionError("manifest: missing or invalid feature_dim");

  fs::path base = fs::path(manifest_path).parent_path();
  std::vector<VideoSample> samples;
  for (const json& e : doc.at("entries")) {
    VideoSample s;
    s.id = e.at("id").get<std::string>();
    int frames = e.at("T").get<int>();
    if (frames < 1) throw IngestionError("entry '" + s.id + "': invalid T");
    s.features =
        read_f32_file(base / e.at("feature_file").get<std::string>(), frames, feature_dim, s.id);
    s.tokens = e.at("tokens").get<std::vector<int>>();
    if ((int)s.tokens.size() != e.at("N").get<int>())
      throw IngestionError("entry '" + s.id + "': N does not match tokens");
    double tau_s = e.at("tau_s").get<double>();
    double tau_e = e.at("tau_e").get<double>();
    if (time_unit == "seconds") {
      double fps = e.value("fps", 0.0);
      if (fps <= 0)
        throw IngestionError("entry '" + s.id + "': seconds annotation needs fps > 0");
      tau_s *= fps;
      tau_e *= fps;
    }
    s.tau_s = std::clamp(tau_s, 0.0, (double)frames - 1);
    s.tau_e = std::clamp(tau_e, 0.0, (double)frames - 1);
    s.validate();
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

Batch make_batch(const std::vector<VideoSample>& samples, size_t begin, size_t end) {
  if (begin >= end) throw ValidationError("make_batch: empty range");
  Batch batch;
  batch.size = (int)(end - begin);
  for (size_t i = begin; i < end; ++i) {
    batch.max_frames = std::max(batch.max_frames, samples[i].frames());
    batch.max_query_len = std::max(batch.max_query_len, (int)samples[i].tokens.size());
  }
  int bt = batch.size * batch.max_frames;
  int bn = batch.size * batch.max_query_len;
  batch.features = MatF::Zero(bt, samples[begin].features.cols());
  batch.tokens.assign(bn, 0);
  batch.frame_mask.assign(bt, 0);
  batch.token_mask.assign(bn, 0);
  for (int b = 0; b < batch.size; ++b) {
    const VideoSample& s = samples[begin + b];
    if (s.features.cols() != batch.features.cols())
      throw ValidationError("make_batch: inconsistent feature dims");
    batch.features.middleRows(b * batch.max_frames, s.frames()) = s.features;
    for (int t = 0; t < s.frames(); ++t) batch.frame_mask[b * batch.max_frames + t] = 1;
    for (size_t n = 0; n < s.tokens.size(); ++n) {
      batch.tokens[b * batch.max_query_len + (int)n] = s.tokens[n];
      batch.token_mask[b * batch.max_query_len + (int)n] = 1;
    }
    batch.meta.push_back(
        {s.frames(), (int)s.tokens.size(), s.tau_s, s.tau_e, s.id});
  }
  return batch;
}

std::vector<Batch> batchify(const std::vector<VideoSample>& samples, int batch_size) {
  if (samples.empty()) throw ValidationError("batchify: empty sample list");
  if (batch_size < 1) throw ValidationError("batchify: batch_size must be >= 1");
  std::vector<Batch> out;
  for (size_t begin = 0; begin < samples.size(); begin += batch_size)
    out.push_back(make_batch(samples, begin,
                             std::min(samples.size(), begin + batch_size)));
  return out;
}

}  // namespace apgn
