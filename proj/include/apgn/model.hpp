#pragma once

// The full localization model: query-guided video encoding, foreground
// classification, per-frame boundary regression, proposal encoding with an
// edge-convolution graph, and confidence/offset heads.

#include <memory>
#include <string>
#include <vector>

#include "apgn/autodiff.hpp"
#include "apgn/data.hpp"
#include "apgn/losses.hpp"
#include "apgn/nn.hpp"
#include "apgn/proposal_ops.hpp"

namespace apgn {

struct ModelConfig {
  int feature_dim = 16;  // F: raw per-frame feature width
  int input_dim = 64;    // width of the pre-GRU encoder stages
  int hidden_dim = 128;  // D: encoder output width
  int pos_dim = 32;      // d: positional embedding width
  int heads = 4;
  int graph_layers = 2;  // k
  int vocab_size = 50;

  // ablation switches
  bool use_classification = true;
  bool use_adaptive_proposals = true;
  bool use_position = true;
  bool use_graph = true;
  bool mean_pool = false;
  bool edge_attention = false;

  // inference-time foreground selection
  double fg_threshold = 0.5;
  int min_proposals = 1;
  int max_proposals = 0;  // 0 = video length

  // fixed sliding-window scheme used when adaptive proposals are disabled
  std::vector<int> window_scales = {8, 16, 32};
  double window_stride_fraction = 0.5;

  int prop_dim() const { return hidden_dim + (use_position ? pos_dim : 0); }

  void validate() const {
    if (feature_dim < 1 || input_dim < 1 || hidden_dim < 2 || vocab_size < 1)
      throw ConfigError("model dims must be positive");
    if (hidden_dim % 2 != 0) throw ConfigError("hidden_dim must be even");
    if (input_dim % heads != 0) throw ConfigError("input_dim must be divisible by heads");
    if (use_position && (pos_dim <= 0 || pos_dim % 2 != 0))
      throw ConfigError("pos_dim must be even and positive");
    if (graph_layers < 1) throw ConfigError("graph_layers must be >= 1");
    if (!(fg_threshold > 0 && fg_threshold < 1))
      throw ConfigError("fg_threshold must be in (0,1)");
    if (min_proposals < 1) throw ConfigError("min_proposals must be >= 1");
    if (window_stride_fraction <= 0 || window_stride_fraction > 1)
      throw ConfigError("window_stride_fraction must be in (0,1]");
  }
};

// Sliding windows for the pre-defined proposal baseline: one proposal per
// window position, anchored at the window center.
std::vector<ProposalTuple> window_proposals(int frames, const std::vector<int>& scales,
                                            double stride_fraction);

// Structure/targets snapshot so finite-difference probes see a loss whose
// discrete choices (pooling spans) and detached targets stay fixed.
struct FrozenTargets {
  bool recorded = false;
  std::vector<std::vector<std::pair<int, int>>> spans;   // per sample, global rows
  std::vector<std::vector<double>> iou_targets;          // per sample
  std::vector<MatD> offset_targets;                      // per sample
};

template <typename T>
struct TrainGraph {
  Var<T> total, classification, regression, alignment, boundary;
};

struct VideoInference {
  std::vector<double> fg_scores;   // per valid frame, empty if classification off
  std::vector<double> dist_start;  // per valid frame, empty if regression off
  std::vector<double> dist_end;
  std::vector<int> anchors;
  std::vector<ProposalTuple> proposals;
  AssembledPredictions assembled;
};

template <typename T>
class ApgnModel {
 public:
  ApgnModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    register_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  size_t param_count() const { return store_.scalar_count(); }

  // Builds the multi-task loss for one (chunk of a) batch on the given tape.
  // Each term is the sum of per-sample losses scaled by 1/batch_denom, so
  // chunk results add up to the batch mean.
  TrainGraph<T> build_training_loss(Tape<T>& tape, const Batch& batch,
                                    const LossWeights& weights, int batch_denom,
                                    const FrozenTargets* frozen = nullptr,
                                    FrozenTargets* record = nullptr) const;

  // Full inference path for a batch.
  std::vector<VideoInference> infer(const Batch& batch) const;

  // Encoder stages, exposed for verification. All outputs are batch-major
  // stacked ([b*max_len + pos] rows).
  Var<T> encode_video(Tape<T>& tape, const BoundParams<T>& p, const Batch& batch) const;
  Var<T> encode_query(Tape<T>& tape, const BoundParams<T>& p, const Batch& batch) const;
  Var<T> fuse(const BoundParams<T>& p, Var<T> video, Var<T> query, const Batch& batch) const;
  Var<T> encode(Tape<T>& tape, const BoundParams<T>& p, const Batch& batch) const;

  Var<T> classify_logits(const BoundParams<T>& p, Var<T> fused) const;
  Var<T> regress_distances(const BoundParams<T>& p, Var<T> fused, const Batch& batch) const;

 private:
  void register_params(uint64_t seed);

  DetRng name_rng(uint64_t seed, const std::string& name) const {
    return DetRng(mix_seed(seed, fnv1a(name.data(), name.size())));
  }

  Var<T> batched_attention(const BoundParams<T>& p, const std::string& prefix, Var<T> x,
                           int batch, int len, const std::vector<uint8_t>& mask) const;
  Var<T> conv1d(const BoundParams<T>& p, const std::string& prefix, Var<T> x,
                const std::vector<std::pair<int, int>>& blocks) const;

  struct ProposalPath {
    Var<T> score_logits;           // [M_total x 1]
    Var<T> offsets;                // [M_total x 2]
    std::vector<int> row_offset;   // first row of each sample's block
  };
  ProposalPath build_proposal_path(Tape<T>& tape, const BoundParams<T>& p,
                                   const Batch& batch, Var<T> fused,
                                   const std::vector<std::vector<ProposalTuple>>& proposals,
                                   const FrozenTargets* frozen,
                                   FrozenTargets* record) const;
  Var<T> edge_conv_block(const BoundParams<T>& p, int layer, Var<T> nodes) const;

  ModelConfig cfg_;
  ParamStore<T> store_;
};

// ---------------------------------------------------------------------------
// implementation
// ---------------------------------------------------------------------------

inline std::vector<ProposalTuple> window_proposals(int frames, const std::vector<int>& scales,
                                                   double stride_fraction) {
  std::vector<ProposalTuple> out;
  for (int scale : scales) {
    if (scale > frames || scale < 1) continue;
    double stride = stride_fraction * scale;
    int count = (int)std::floor((frames - scale) / stride) + 1;
    for (int i = 0; i < count; ++i) {
      int start = (int)std::llround(i * stride);
      int end = start + scale - 1;
      int anchor = (start + end) / 2;
      ProposalTuple p = make_proposal(anchor, anchor - start, end - anchor, frames);
      out.push_back(p);
    }
  }
  return out;
}

template <typename T>
void ApgnModel<T>::register_params(uint64_t seed) {
  auto reg_linear = [&](const std::string& name, int in, int out) {
    DetRng rng = name_rng(seed, name);
    register_linear(store_, name, in, out, rng);
  };
  auto reg_attn = [&](const std::string& name, int dim) {
    DetRng rng = name_rng(seed, name);
    register_self_attention(store_, name, dim, cfg_.heads, rng);
  };
  auto reg_bigru = [&](const std::string& name, int in, int hidden) {
    DetRng rng = name_rng(seed, name);
    register_bigru(store_, name, in, hidden, rng);
  };

  const int d_in = cfg_.input_dim;
  const int d = cfg_.hidden_dim;
  const int dd = cfg_.prop_dim();

  {
    DetRng rng = name_rng(seed, "embed.tokens");
    init_glorot_uniform(store_.add("embed.tokens", cfg_.vocab_size, d_in), rng);
  }
  reg_linear("enc.video.proj", cfg_.feature_dim, d_in);
  reg_attn("enc.video.attn", d_in);
  reg_bigru("enc.video.gru", d_in, d / 2);
  reg_attn("enc.query.attn", d_in);
  reg_bigru("enc.query.gru", d_in, d / 2);
  {
    DetRng rng = name_rng(seed, "fuse.ws");
    init_glorot_uniform(store_.add("fuse.ws", d, d), rng);
  }
  reg_bigru("fuse.gru", 4 * d, d / 2);

  if (cfg_.use_classification) {
    reg_linear("cls.fc0", d, d / 2);
    reg_linear("cls.fc1", d / 2, d / 4);
    reg_linear("cls.fc2", d / 4, 1);
  }
  if (cfg_.use_adaptive_proposals) {
    auto reg_conv = [&](const std::string& name, int in, int out) {
      for (const char* tap : {".wm1", ".w0", ".wp1"}) {
        DetRng rng = name_rng(seed, name + tap);
        init_glorot_uniform(store_.add(name + tap, in, out), rng);
      }
      store_.add(name + ".b", 1, out);
    };
    reg_conv("reg.c0", d, d / 2);
    reg_conv("reg.c1", d / 2, d / 4);
    reg_conv("reg.c2", d / 4, 2);
  }
  reg_linear("penc.mlp1.l0", dd, dd);
  reg_linear("penc.mlp1.l1", dd, dd);
  reg_linear("penc.mlp2.l0", dd, dd);
  reg_linear("penc.mlp2.l1", dd, dd);
  if (cfg_.use_graph) {
    for (int l = 0; l < cfg_.graph_layers; ++l) {
      std::string base = "graph.l" + std::to_string(l);
      {
        DetRng rng = name_rng(seed, base + ".theta1");
        init_glorot_uniform(store_.add(base + ".theta1", dd, dd), rng);
      }
      if (!cfg_.edge_attention) {
        DetRng rng = name_rng(seed, base + ".theta2");
        init_glorot_uniform(store_.add(base + ".theta2", dd, dd), rng);
      }
    }
  }
  reg_linear("head.score.l0", dd, dd);
  reg_linear("head.score.l1", dd, 1);
  reg_linear("head.offset.l0", dd, dd);
  reg_linear("head.offset.l1", dd, 2);
}

template <typename T>
Var<T> ApgnModel<T>::batched_attention(const BoundParams<T>& p, const std::string& prefix,
                                       Var<T> x, int batch, int len,
                                       const std::vector<uint8_t>& mask) const {
  Tape<T>& tape = *x.tape;
  const int dim = (int)tape.val(x).cols();
  const int heads = cfg_.heads;
  const int hd = dim / heads;
  Var<T> q = add_rowvec(matmul(x, p[prefix + ".wq"]), p[prefix + ".bq"]);
  Var<T> k = add_rowvec(matmul(x, p[prefix + ".wk"]), p[prefix + ".bk"]);
  Var<T> v = add_rowvec(matmul(x, p[prefix + ".wv"]), p[prefix + ".bv"]);
  T inv_sqrt = T(1) / std::sqrt((T)hd);
  std::vector<Var<T>> ctx_rows;
  for (int b = 0; b < batch; ++b) {
    Var<T> qb = slice_rows(q, b * len, len);
    Var<T> kb = slice_rows(k, b * len, len);
    Var<T> vb = slice_rows(v, b * len, len);
    std::vector<uint8_t> mb(mask.begin() + b * len, mask.begin() + (b + 1) * len);
    std::vector<Var<T>> heads_out;
    for (int h = 0; h < heads; ++h) {
      Var<T> qh = slice_cols(qb, h * hd, hd);
      Var<T> kh = slice_cols(kb, h * hd, hd);
      Var<T> vh = slice_cols(vb, h * hd, hd);
      Var<T> attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), mb);
      heads_out.push_back(matmul(attn, vh));
    }
    ctx_rows.push_back(concat_cols(heads_out));
  }
  Var<T> ctx = batch == 1 ? ctx_rows[0] : concat_rows(ctx_rows);
  Var<T> out = add_rowvec(matmul(ctx, p[prefix + ".wo"]), p[prefix + ".bo"]);
  return layer_norm(p, prefix + ".ln", add(x, out));
}

template <typename T>
Var<T> ApgnModel<T>::encode_video(Tape<T>& tape, const BoundParams<T>& p,
                                  const Batch& batch) const {
  if ((int)batch.features.cols() != cfg_.feature_dim)
    throw ValidationError("encode_video: feature dim mismatch");
  if (!all_finite(batch.features)) throw ValidationError("encode_video: non-finite features");
  Var<T> x = tape.constant(batch.features.template cast<T>());
  Var<T> v0 = linear(p, "enc.video.proj", x);
  Var<T> v1 =
      batched_attention(p, "enc.video.attn", v0, batch.size, batch.max_frames, batch.frame_mask);
  return bigru(p, "enc.video.gru", v1, batch.max_frames, batch.size, cfg_.hidden_dim / 2,
               batch.frame_mask);
}

template <typename T>
Var<T> ApgnModel<T>::encode_query(Tape<T>& tape, const BoundParams<T>& p,
                                  const Batch& batch) const {
  (void)tape;
  for (size_t i = 0; i < batch.tokens.size(); ++i)
    if (batch.token_mask[i] && (batch.tokens[i] < 0 || batch.tokens[i] >= cfg_.vocab_size))
      throw ValidationError("encode_query: token out of vocabulary");
  Var<T> emb = row_gather(p["embed.tokens"], batch.tokens);
  Var<T> q1 = batched_attention(p, "enc.query.attn", emb, batch.size, batch.max_query_len,
                                batch.token_mask);
  return bigru(p, "enc.query.gru", q1, batch.max_query_len, batch.size, cfg_.hidden_dim / 2,
               batch.token_mask);
}

template <typename T>
Var<T> ApgnModel<T>::fuse(const BoundParams<T>& p, Var<T> video, Var<T> query,
                          const Batch& batch) const {
  const int tp = batch.max_frames;
  const int np = batch.max_query_len;
  Var<T> qw = matmul(query, p["fuse.ws"]);
  std::vector<Var<T>> fused_rows;
  for (int b = 0; b < batch.size; ++b) {
    Var<T> vb = slice_rows(video, b * tp, tp);
    Var<T> qwb = slice_rows(qw, b * np, np);
    std::vector<uint8_t> tok_mask(batch.token_mask.begin() + b * np,
                                  batch.token_mask.begin() + (b + 1) * np);
    std::vector<uint8_t> frm_mask(batch.frame_mask.begin() + b * tp,
                                  batch.frame_mask.begin() + (b + 1) * tp);
    Var<T> sim = matmul(vb, transpose(qwb));     // [tp x np]
    Var<T> sim_r = softmax_rows(sim, tok_mask);  // over tokens
    Var<T> sim_c = softmax_cols(sim, frm_mask);  // over frames
    Var<T> attended_q = matmul(sim_r, qwb);      // [tp x D]
    Var<T> attended_v = matmul(sim_r, matmul(transpose(sim_c), vb));
    fused_rows.push_back(concat_cols<T>({vb, attended_q, elem_mul(vb, attended_q),
                                         elem_mul(vb, attended_v)}));
  }
  Var<T> fusion_in = batch.size == 1 ? fused_rows[0] : concat_rows(fused_rows);
  return bigru(p, "fuse.gru", fusion_in, tp, batch.size, cfg_.hidden_dim / 2,
               batch.frame_mask);
}

template <typename T>
Var<T> ApgnModel<T>::encode(Tape<T>& tape, const BoundParams<T>& p, const Batch& batch) const {
  Var<T> video = encode_video(tape, p, batch);
  Var<T> query = encode_query(tape, p, batch);
  return fuse(p, video, query, batch);
}

template <typename T>
Var<T> ApgnModel<T>::classify_logits(const BoundParams<T>& p, Var<T> fused) const {
  Var<T> h = relu(linear(p, "cls.fc0", fused));
  h = relu(linear(p, "cls.fc1", h));
  return linear(p, "cls.fc2", h);
}

template <typename T>
Var<T> ApgnModel<T>::conv1d(const BoundParams<T>& p, const std::string& prefix, Var<T> x,
                            const std::vector<std::pair<int, int>>& blocks) const {
  Var<T> acc = matmul(time_shift(x, -1, blocks), p[prefix + ".wm1"]);
  acc = add(acc, matmul(x, p[prefix + ".w0"]));
  acc = add(acc, matmul(time_shift(x, +1, blocks), p[prefix + ".wp1"]));
  return add_rowvec(acc, p[prefix + ".b"]);
}

template <typename T>
Var<T> ApgnModel<T>::regress_distances(const BoundParams<T>& p, Var<T> fused,
                                       const Batch& batch) const {
  std::vector<std::pair<int, int>> blocks;
  for (int b = 0; b < batch.size; ++b)
    blocks.push_back({b * batch.max_frames, (b + 1) * batch.max_frames});
  std::vector<T> mask(batch.frame_mask.size());
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = (T)batch.frame_mask[i];
  // padded rows are zeroed before every tap so convolution windows near the
  // valid end see the same zeros as an unpadded sequence
  Var<T> h = colvec_scale_const(fused, mask);
  h = colvec_scale_const(relu(conv1d(p, "reg.c0", h, blocks)), mask);
  h = colvec_scale_const(relu(conv1d(p, "reg.c1", h, blocks)), mask);
  return softplus(conv1d(p, "reg.c2", h, blocks));
}

template <typename T>
Var<T> ApgnModel<T>::edge_conv_block(const BoundParams<T>& p, int layer, Var<T> nodes) const {
  Tape<T>& tape = *nodes.tape;
  std::string base = "graph.l" + std::to_string(layer);
  int m = (int)tape.val(nodes).rows();
  if (cfg_.edge_attention) {
    T inv_sqrt = T(1) / std::sqrt((T)cfg_.prop_dim());
    Var<T> weights = softmax_rows(scale(matmul(nodes, transpose(nodes)), inv_sqrt));
    return relu(matmul(matmul(weights, nodes), p[base + ".theta1"]));
  }
  Var<T> self_part = matmul(nodes, p[base + ".theta1"]);
  Var<T> diff_part = matmul(nodes, p[base + ".theta2"]);
  Var<T> edges = relu(pairwise_combine(self_part, diff_part));
  std::vector<std::pair<int, int>> ranges;
  for (int i = 0; i < m; ++i) ranges.push_back({i * m, (i + 1) * m});
  return rows_reduce_max(edges, std::move(ranges));
}

template <typename T>
typename ApgnModel<T>::ProposalPath ApgnModel<T>::build_proposal_path(
    Tape<T>& tape, const BoundParams<T>& p, const Batch& batch, Var<T> fused,
    const std::vector<std::vector<ProposalTuple>>& proposals, const FrozenTargets* frozen,
    FrozenTargets* record) const {
  const int tp = batch.max_frames;

  Var<T> augmented = fused;
  if (cfg_.use_position) {
    Mat<T> pos = positional_matrix<T>(tp, cfg_.pos_dim);
    Mat<T> tiled(batch.size * tp, cfg_.pos_dim);
    for (int b = 0; b < batch.size; ++b) tiled.middleRows(b * tp, tp) = pos;
    augmented = concat_cols<T>({fused, tape.constant(std::move(tiled))});
  }
  Var<T> frame_feats = linear(p, "penc.mlp1.l1", relu(linear(p, "penc.mlp1.l0", augmented)));

  // pooling spans: [ceil(start), floor(end)] clamped into the valid frames,
  // with a single-frame fallback at the anchor for sub-frame proposals
  std::vector<std::pair<int, int>> ranges;
  std::vector<int> row_offset;
  int total = 0;
  for (int b = 0; b < batch.size; ++b) {
    row_offset.push_back(total);
    const int t_valid = batch.meta[b].frames;
    if (frozen) {
      for (auto& r : frozen->spans[b]) ranges.push_back(r);
      total += (int)frozen->spans[b].size();
      continue;
    }
    std::vector<std::pair<int, int>> sample_spans;
    for (const ProposalTuple& prop : proposals[b]) {
      int lo = (int)std::ceil((double)prop.anchor - prop.dist_start);
      int hi = (int)std::floor((double)prop.anchor + prop.dist_end);
      lo = std::clamp(lo, 0, t_valid - 1);
      hi = std::clamp(hi, 0, t_valid - 1);
      if (lo > hi) lo = hi = std::clamp(prop.anchor, 0, t_valid - 1);
      sample_spans.push_back({b * tp + lo, b * tp + hi + 1});
    }
    for (auto& r : sample_spans) ranges.push_back(r);
    total += (int)sample_spans.size();
    if (record) record->spans.push_back(std::move(sample_spans));
  }
  if (total == 0) throw ValidationError("build_proposal_path: no proposals");

  Var<T> pooled = cfg_.mean_pool ? rows_reduce_mean(frame_feats, std::move(ranges))
                                 : rows_reduce_max(frame_feats, std::move(ranges));
  Var<T> encoded = linear(p, "penc.mlp2.l1", relu(linear(p, "penc.mlp2.l0", pooled)));

  Var<T> refined = encoded;
  if (cfg_.use_graph) {
    std::vector<Var<T>> blocks;
    for (int b = 0; b < batch.size; ++b) {
      int m = (b + 1 < batch.size ? row_offset[b + 1] : total) - row_offset[b];
      Var<T> nodes = slice_rows(encoded, row_offset[b], m);
      for (int l = 0; l < cfg_.graph_layers; ++l) nodes = edge_conv_block(p, l, nodes);
      blocks.push_back(nodes);
    }
    refined = batch.size == 1 ? blocks[0] : concat_rows(blocks);
  }

  ProposalPath out;
  out.score_logits = linear(p, "head.score.l1", relu(linear(p, "head.score.l0", refined)));
  out.offsets = linear(p, "head.offset.l1", relu(linear(p, "head.offset.l0", refined)));
  out.row_offset = std::move(row_offset);
  return out;
}

template <typename T>
TrainGraph<T> ApgnModel<T>::build_training_loss(Tape<T>& tape, const Batch& batch,
                                                const LossWeights& weights, int batch_denom,
                                                const FrozenTargets* frozen,
                                                FrozenTargets* record) const {
  const int tp = batch.max_frames;
  BoundParams<T> p(tape, store_);
  Var<T> fused = encode(tape, p, batch);

  std::vector<FrameLabels> labels;
  for (int b = 0; b < batch.size; ++b) {
    labels.push_back(
        make_frame_labels(batch.meta[b].frames, batch.meta[b].tau_s, batch.meta[b].tau_e));
    if (labels.back().foreground_count == 0)
      throw ValidationError("training sample '" + batch.meta[b].id +
                            "' has no foreground frames");
  }

  const T denom_scale = T(1) / T(batch_denom);
  Var<T> zero = tape.scalar_constant(T(0));

  // classification
  Var<T> l_class = zero;
  Var<T> logits;
  if (cfg_.use_classification) {
    logits = classify_logits(p, fused);
    std::vector<Var<T>> per_sample;
    for (int b = 0; b < batch.size; ++b)
      per_sample.push_back(
          balanced_class_loss(slice_rows(logits, b * tp, batch.meta[b].frames), labels[b]));
    Var<T> acc = per_sample[0];
    for (size_t i = 1; i < per_sample.size(); ++i) acc = add(acc, per_sample[i]);
    l_class = scale(acc, denom_scale);
  }

  // regression on ground-truth foreground frames
  Var<T> l_reg = zero;
  Var<T> dists;
  std::vector<std::vector<ProposalTuple>> proposals(batch.size);
  if (cfg_.use_adaptive_proposals) {
    dists = regress_distances(p, fused, batch);
    const Mat<T>& dv = tape.val(dists);
    std::vector<Var<T>> per_sample;
    for (int b = 0; b < batch.size; ++b) {
      std::vector<int> fg = labels[b].foreground_indices();
      std::vector<int> rows;
      MatD gt((int)fg.size(), 2);
      for (size_t i = 0; i < fg.size(); ++i) {
        rows.push_back(b * tp + fg[i]);
        gt((int)i, 0) = labels[b].dist_start_gt[fg[i]];
        gt((int)i, 1) = labels[b].dist_end_gt[fg[i]];
      }
      per_sample.push_back(iou_regression_loss(row_gather(dists, rows), gt));
      // proposals anchored at ground-truth foreground frames, using the
      // regressed distances as plain values
      for (int t : fg)
        proposals[b].push_back(make_proposal(t, (double)dv(b * tp + t, 0),
                                             (double)dv(b * tp + t, 1),
                                             batch.meta[b].frames));
    }
    Var<T> acc = per_sample[0];
    for (size_t i = 1; i < per_sample.size(); ++i) acc = add(acc, per_sample[i]);
    l_reg = scale(acc, denom_scale);
  } else {
    for (int b = 0; b < batch.size; ++b)
      proposals[b] =
          window_proposals(batch.meta[b].frames, cfg_.window_scales, cfg_.window_stride_fraction);
  }

  // proposal consolidation + heads
  if (record) record->spans.clear(), record->iou_targets.clear(), record->offset_targets.clear();
  ProposalPath path = build_proposal_path(tape, p, batch, fused, proposals, frozen, record);

  std::vector<Var<T>> align_terms, boundary_terms;
  for (int b = 0; b < batch.size; ++b) {
    int m = (b + 1 < batch.size ? path.row_offset[b + 1]
                                : (int)tape.val(path.score_logits).rows()) -
            path.row_offset[b];
    std::vector<double> iou_t;
    MatD offset_t;
    if (frozen) {
      iou_t = frozen->iou_targets[b];
      offset_t = frozen->offset_targets[b];
    } else {
      iou_t = proposal_iou_targets(proposals[b], batch.meta[b].tau_s, batch.meta[b].tau_e);
      offset_t = compute_offset_targets(proposals[b], batch.meta[b].tau_s, batch.meta[b].tau_e);
      if (record) {
        record->iou_targets.push_back(iou_t);
        record->offset_targets.push_back(offset_t);
      }
    }
    align_terms.push_back(
        alignment_loss(slice_rows(path.score_logits, path.row_offset[b], m), iou_t));
    boundary_terms.push_back(
        boundary_loss(slice_rows(path.offsets, path.row_offset[b], m), offset_t));
  }
  Var<T> align_acc = align_terms[0];
  Var<T> boundary_acc = boundary_terms[0];
  for (size_t i = 1; i < align_terms.size(); ++i) {
    align_acc = add(align_acc, align_terms[i]);
    boundary_acc = add(boundary_acc, boundary_terms[i]);
  }
  if (record) record->recorded = true;

  TrainGraph<T> out;
  out.classification = l_class;
  out.regression = l_reg;
  out.alignment = scale(align_acc, denom_scale);
  out.boundary = scale(boundary_acc, denom_scale);
  out.total = total_loss(out.classification, out.regression, out.alignment, out.boundary,
                         weights);
  return out;
}

template <typename T>
std::vector<VideoInference> ApgnModel<T>::infer(const Batch& batch) const {
  Tape<T> tape;
  BoundParams<T> p(tape, store_, /*requires_grad=*/false);
  Var<T> fused = encode(tape, p, batch);
  const int tp = batch.max_frames;

  std::vector<VideoInference> out(batch.size);
  Var<T> logits, dists;
  if (cfg_.use_classification) logits = classify_logits(p, fused);
  if (cfg_.use_adaptive_proposals) dists = regress_distances(p, fused, batch);

  std::vector<std::vector<ProposalTuple>> proposals(batch.size);
  for (int b = 0; b < batch.size; ++b) {
    VideoInference& vi = out[b];
    const int t_valid = batch.meta[b].frames;
    if (cfg_.use_classification) {
      const Mat<T>& lv = tape.val(logits);
      for (int t = 0; t < t_valid; ++t)
        vi.fg_scores.push_back(ad_detail::stable_sigmoid((double)lv(b * tp + t, 0)));
      int max_count = cfg_.max_proposals > 0 ? std::min(cfg_.max_proposals, t_valid) : t_valid;
      int min_count = std::min(cfg_.min_proposals, max_count);
      vi.anchors = select_foreground(vi.fg_scores, cfg_.fg_threshold, min_count, max_count);
    } else {
      for (int t = 0; t < t_valid; ++t) vi.anchors.push_back(t);
    }
    if (cfg_.use_adaptive_proposals) {
      const Mat<T>& dv = tape.val(dists);
      for (int t = 0; t < t_valid; ++t) {
        vi.dist_start.push_back((double)dv(b * tp + t, 0));
        vi.dist_end.push_back((double)dv(b * tp + t, 1));
      }
      vi.proposals = generate_proposals(vi.anchors, vi.dist_start, vi.dist_end, t_valid);
    } else {
      vi.proposals = window_proposals(t_valid, cfg_.window_scales, cfg_.window_stride_fraction);
      vi.anchors.clear();
      for (const ProposalTuple& prop : vi.proposals) vi.anchors.push_back(prop.anchor);
    }
    proposals[b] = vi.proposals;
  }

  ProposalPath path = build_proposal_path(tape, p, batch, fused, proposals, nullptr, nullptr);
  const Mat<T>& score_logits = tape.val(path.score_logits);
  const Mat<T>& offsets = tape.val(path.offsets);
  for (int b = 0; b < batch.size; ++b) {
    int m = (b + 1 < batch.size ? path.row_offset[b + 1] : (int)score_logits.rows()) -
            path.row_offset[b];
    std::vector<double> scores;
    MatD off(m, 2);
    for (int i = 0; i < m; ++i) {
      scores.push_back(ad_detail::stable_sigmoid((double)score_logits(path.row_offset[b] + i, 0)));
      off(i, 0) = offsets(path.row_offset[b] + i, 0);
      off(i, 1) = offsets(path.row_offset[b] + i, 1);
    }
    out[b].assembled =
        assemble_predictions(out[b].proposals, off, scores, batch.meta[b].frames);
  }
  return out;
}

}  // namespace apgn
