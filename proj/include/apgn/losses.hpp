#pragma once

// Loss terms as tape builders. All take raw logits where a sigmoid is
// involved so the log terms stay numerically stable via softplus.

#include <atomic>
#include <iostream>
#include <vector>

#include "apgn/autodiff.hpp"
#include "apgn/proposal_ops.hpp"

namespace apgn {

struct LossWeights {
  double classification = 0.1;  // lambda_1
  double regression = 1.0;      // lambda_2
  double alignment = 1.0;       // lambda_3
  double boundary = 1.0;        // lambda_4
};

// Class-balanced binary cross entropy over one sample's frames (sum form):
// the foreground term is weighted by T_back/T and the background term by
// T_fore/T, so the minority class gets the larger weight. Degenerate
// single-class samples fall back to unweighted BCE.
template <typename T>
Var<T> balanced_class_loss(Var<T> logits, const FrameLabels& labels) {
  Tape<T>& tape = *logits.tape;
  int frames = (int)tape.val(logits).rows();
  if ((int)labels.is_foreground.size() != frames)
    throw ValidationError("balanced_class_loss: label length mismatch");
  int fore = labels.foreground_count;
  int back = frames - fore;
  T w_fore, w_back;
  if (fore == 0 || back == 0) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true))
      std::cerr << "[apgn] warning: single-class frame labels, using unweighted BCE\n";
    w_fore = w_back = T(1);
  } else {
    w_fore = T(back) / T(frames);
    w_back = T(fore) / T(frames);
  }
  Mat<T> pos(frames, 1), neg(frames, 1);
  for (int t = 0; t < frames; ++t) {
    pos(t, 0) = labels.is_foreground[t] ? w_fore : T(0);
    neg(t, 0) = labels.is_foreground[t] ? T(0) : w_back;
  }
  // -log y = softplus(-z), -log(1-y) = softplus(z)
  Var<T> fg_term = sum_all(elem_mul(softplus(neg_op(logits)), tape.constant(std::move(pos))));
  Var<T> bg_term = sum_all(elem_mul(softplus(logits), tape.constant(std::move(neg))));
  return add(fg_term, bg_term);
}

// Mean (1 - IoU) between predicted and ground-truth distance pairs at
// foreground frames. Both segments share the anchor, so the intersection is
// min(ls,gs) + min(le,ge) and the anchor cancels out.
template <typename T>
Var<T> iou_regression_loss(Var<T> dists, const MatD& gt_dists) {
  Tape<T>& tape = *dists.tape;
  int m = (int)tape.val(dists).rows();
  if (m == 0) throw ValidationError("iou_regression_loss: no foreground frames");
  if (gt_dists.rows() != m || gt_dists.cols() != 2)
    throw ValidationError("iou_regression_loss: target shape mismatch");
  Mat<T> gt = gt_dists.cast<T>();
  Var<T> ls = slice_cols(dists, 0, 1);
  Var<T> le = slice_cols(dists, 1, 1);
  Var<T> inter = add(elem_min_const(ls, Mat<T>(gt.col(0))),
                     elem_min_const(le, Mat<T>(gt.col(1))));
  Mat<T> gt_len = gt.col(0) + gt.col(1);
  Var<T> pred_len = add(ls, le);
  Var<T> uni = sub(add(pred_len, tape.constant(gt_len)), inter);
  Var<T> iou = elem_div(inter, uni);
  Var<T> one = tape.constant(Mat<T>::Ones(m, 1));
  return scale(sum_all(sub(one, iou)), T(1) / T(m));
}

// Soft-target cross entropy between confidence logits and detached IoU
// targets o: -(1/M) sum o log r + (1-o) log(1-r).
template <typename T>
Var<T> alignment_loss(Var<T> score_logits, const std::vector<double>& iou_targets) {
  Tape<T>& tape = *score_logits.tape;
  int m = (int)tape.val(score_logits).rows();
  if (m == 0) throw ValidationError("alignment_loss: no proposals");
  if ((int)iou_targets.size() != m)
    throw ValidationError("alignment_loss: target length mismatch");
  Mat<T> o(m, 1), o1(m, 1);
  for (int i = 0; i < m; ++i) {
    o(i, 0) = (T)iou_targets[i];
    o1(i, 0) = T(1) - (T)iou_targets[i];
  }
  Var<T> pos_term =
      sum_all(elem_mul(softplus(neg_op(score_logits)), tape.constant(std::move(o))));
  Var<T> neg_term = sum_all(elem_mul(softplus(score_logits), tape.constant(std::move(o1))));
  return scale(add(pos_term, neg_term), T(1) / T(m));
}

// Smooth-L1 boundary refinement loss against exact offset targets.
template <typename T>
Var<T> boundary_loss(Var<T> offsets, const MatD& offset_targets) {
  Tape<T>& tape = *offsets.tape;
  int m = (int)tape.val(offsets).rows();
  if (m == 0) throw ValidationError("boundary_loss: no proposals");
  if (offset_targets.rows() != m || offset_targets.cols() != 2)
    throw ValidationError("boundary_loss: target shape mismatch");
  Var<T> diff = sub(tape.constant(Mat<T>(offset_targets.cast<T>())), offsets);
  return scale(sum_all(smooth_l1(diff)), T(1) / T(m));
}

// lambda-weighted multi-task combination.
template <typename T>
Var<T> total_loss(Var<T> l_class, Var<T> l_reg, Var<T> l_align, Var<T> l_b,
                  const LossWeights& w) {
  Var<T> out = scale(l_class, (T)w.classification);
  out = add(out, scale(l_reg, (T)w.regression));
  out = add(out, scale(l_align, (T)w.alignment));
  out = add(out, scale(l_b, (T)w.boundary));
  return out;
}

}  // namespace apgn
