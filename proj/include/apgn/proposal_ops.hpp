#pragma once

// Segment arithmetic and proposal bookkeeping shared by training, inference
// and evaluation. Everything here is plain (non-differentiated) code; the
// trainable paths live on the tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "apgn/errors.hpp"
#include "apgn/mat.hpp"

namespace apgn {

struct Segment {
  double start = 0, end = 0;
};

// IoU of two 1D segments on the real line. Zero-length segments have measure
// zero: identical segments score 1, anything else scores by measure.
inline double iou_1d(const Segment& a, const Segment& b) {
  if (a.start > a.end || b.start > b.end)
    throw ValidationError("iou_1d: segment with start > end");
  if (a.start == b.start && a.end == b.end) return 1.0;
  double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter <= 0) return 0.0;
  double uni = (a.end - a.start) + (b.end - b.start) - inter;
  if (uni <= 0) return 0.0;
  return inter / uni;
}

// A proposal anchored at frame `anchor`, extending dist_start frames to the
// left and dist_end frames to the right; bounds are clamped to the video.
struct ProposalTuple {
  int anchor = 0;
  double dist_start = 0;  // >= 0
  double dist_end = 0;    // >= 0
  double start = 0;       // clamp(anchor - dist_start)
  double end = 0;         // clamp(anchor + dist_end)
};

inline ProposalTuple make_proposal(int anchor, double dist_start, double dist_end,
                                   int frames) {
  ProposalTuple p;
  p.anchor = anchor;
  p.dist_start = dist_start;
  p.dist_end = dist_end;
  p.start = std::clamp((double)anchor - dist_start, 0.0, (double)frames - 1);
  p.end = std::clamp((double)anchor + dist_end, 0.0, (double)frames - 1);
  return p;
}

// Frames with score above the threshold; top-up to min_count / trim to
// max_count by score, ties to the lower index. Returned ascending.
inline std::vector<int> select_foreground(const std::vector<double>& scores,
                                          double threshold, int min_count,
                                          int max_count) {
  int n = (int)scores.size();
  if (!(threshold > 0 && threshold < 1))
    throw ValidationError("select_foreground: threshold must be in (0,1)");
  if (min_count < 1 || min_count > max_count || max_count > n)
    throw ValidationError("select_foreground: bad min/max counts");
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<int> picked;
  for (int idx : order)
    if (scores[idx] > threshold) picked.push_back(idx);
  if ((int)picked.size() < min_count) {
    picked.assign(order.begin(), order.begin() + min_count);
  } else if ((int)picked.size() > max_count) {
    picked.resize(max_count);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

inline std::vector<ProposalTuple> generate_proposals(const std::vector<int>& indices,
                                                     const std::vector<double>& dist_start,
                                                     const std::vector<double>& dist_end,
                                                     int frames) {
  std::vector<ProposalTuple> out;
  out.reserve(indices.size());
  for (int t : indices) {
    if (t < 0 || t >= frames) throw ValidationError("generate_proposals: index out of range");
    out.push_back(make_proposal(t, dist_start[t], dist_end[t], frames));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-frame labels derived from the annotated segment
// ---------------------------------------------------------------------------

struct FrameLabels {
  std::vector<uint8_t> is_foreground;  // [T]
  std::vector<double> dist_start_gt;   // g_s, meaningful on foreground frames
  std::vector<double> dist_end_gt;     // g_e
  int foreground_count = 0;

  std::vector<int> foreground_indices() const {
    std::vector<int> out;
    for (int t = 0; t < (int)is_foreground.size(); ++t)
      if (is_foreground[t]) out.push_back(t);
    return out;
  }
};

inline FrameLabels make_frame_labels(int frames, double tau_s, double tau_e) {
  FrameLabels labels;
  labels.is_foreground.resize(frames);
  labels.dist_start_gt.assign(frames, 0);
  labels.dist_end_gt.assign(frames, 0);
  for (int t = 0; t < frames; ++t) {
    bool fg = (t >= tau_s && t <= tau_e);
    labels.is_foreground[t] = fg;
    if (fg) {
      labels.dist_start_gt[t] = t - tau_s;
      labels.dist_end_gt[t] = tau_e - t;
      ++labels.foreground_count;
    }
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Localization head bookkeeping
// ---------------------------------------------------------------------------

struct Prediction {
  double start = 0, end = 0;
  double score = 0;  // in (0,1)
  int anchor = 0;
};

// Offsets that would move each (unclamped) proposal exactly onto the ground
// truth: applying them reproduces (tau_s, tau_e).
inline MatD compute_offset_targets(const std::vector<ProposalTuple>& proposals,
                                   double tau_s, double tau_e) {
  MatD out((int)proposals.size(), 2);
  for (size_t i = 0; i < proposals.size(); ++i) {
    const ProposalTuple& p = proposals[i];
    out((int)i, 0) = tau_s - ((double)p.anchor - p.dist_start);
    out((int)i, 1) = tau_e - ((double)p.anchor + p.dist_end);
  }
  return out;
}

// IoU of each clamped proposal segment with the ground truth; constants for
// the score-alignment target.
inline std::vector<double> proposal_iou_targets(const std::vector<ProposalTuple>& proposals,
                                                double tau_s, double tau_e) {
  std::vector<double> out;
  out.reserve(proposals.size());
  for (const ProposalTuple& p : proposals)
    out.push_back(iou_1d({p.start, p.end}, {tau_s, tau_e}));
  return out;
}

struct AssembledPredictions {
  std::vector<Prediction> predictions;
  bool empty_flagged = false;  // no proposals reached the head
};

// Final segments: raw proposal bounds plus offsets, swapped if inverted, then
// clamped to the video.
inline AssembledPredictions assemble_predictions(const std::vector<ProposalTuple>& proposals,
                                                 const MatD& offsets,
                                                 const std::vector<double>& scores,
                                                 int frames) {
  AssembledPredictions out;
  if (proposals.empty()) {
    out.empty_flagged = true;
    return out;
  }
  if ((int)proposals.size() != offsets.rows() || proposals.size() != scores.size())
    throw ValidationError("assemble_predictions: length mismatch");
  for (size_t i = 0; i < proposals.size(); ++i) {
    const ProposalTuple& p = proposals[i];
    double s = (double)p.anchor - p.dist_start + offsets((int)i, 0);
    double e = (double)p.anchor + p.dist_end + offsets((int)i, 1);
    if (s > e) std::swap(s, e);
    Prediction pred;
    pred.start = std::clamp(s, 0.0, (double)frames - 1);
    pred.end = std::clamp(e, 0.0, (double)frames - 1);
    pred.score = scores[i];
    pred.anchor = p.anchor;
    out.predictions.push_back(pred);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sinusoidal positional embedding
// ---------------------------------------------------------------------------

inline std::vector<double> positional_embedding(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0)
    throw ConfigError("positional_embedding: dim must be even and positive");
  std::vector<double> emb(dim);
  for (int j = 0; 2 * j < dim; ++j) {
    double freq = std::pow(10000.0, (2.0 * j) / dim);
    emb[2 * j] = std::sin(t / freq);
    emb[2 * j + 1] = std::cos(t / freq);
  }
  return emb;
}

template <typename T>
Mat<T> positional_matrix(int frames, int dim) {
  Mat<T> m(frames, dim);
  for (int t = 0; t < frames; ++t) {
    auto emb = positional_embedding(t, dim);
    for (int j = 0; j < dim; ++j) m(t, j) = (T)emb[j];
  }
  return m;
}

}  // namespace apgn
