#include <doctest.h>

#include "apgn/autodiff.hpp"
#include "test_helpers.hpp"

using namespace apgn;
using apgn::testing::check_grad_full;
using apgn::testing::random_mat;

TEST_SUITE("autodiff") {

TEST_CASE("matmul value and gradient") {
  DetRng rng(1);
  MatD a = random_mat(3, 4, rng);
  MatD b = random_mat(4, 5, rng);
  MatD w = random_mat(3, 5, rng);
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(matmul(x, t.constant(b)), t.constant(w)));
  });
  check_grad_full(b, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(matmul(t.constant(a), x), t.constant(w)));
  });
}

TEST_CASE("elementwise binary ops") {
  DetRng rng(2);
  MatD a = random_mat(4, 3, rng);
  MatD b = random_mat(4, 3, rng);
  b.array() += 3.0;  // keep divisor away from zero
  MatD w = random_mat(4, 3, rng);
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    Var<double> c = t.constant(b);
    Var<double> expr = add(elem_mul(x, c), sub(elem_div(x, c), scale(x, 0.3)));
    return sum_all(elem_mul(expr, t.constant(w)));
  });
  check_grad_full(b, [&](Tape<double>& t, Var<double> x) {
    Var<double> c = t.constant(a);
    return sum_all(elem_mul(elem_div(c, x), t.constant(w)));
  });
}

TEST_CASE("elem_min_const picks one-sided derivative") {
  DetRng rng(3);
  MatD a = random_mat(5, 1, rng);
  MatD c = random_mat(5, 1, rng);
  // keep away from ties
  for (int i = 0; i < 5; ++i)
    if (std::abs(a(i, 0) - c(i, 0)) < 0.1) a(i, 0) += 0.5;
  check_grad_full(a, [&](Tape<double>&, Var<double> x) {
    return sum_all(elem_min_const(x, c));
  });
}

TEST_CASE("unary nonlinearities") {
  DetRng rng(4);
  MatD a = random_mat(4, 4, rng);
  // keep relu/smooth_l1 probes off their kinks
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      if (std::abs(a(r, c)) < 0.05) a(r, c) += 0.2;
      if (std::abs(std::abs(a(r, c)) - 1.0) < 0.05) a(r, c) *= 1.2;
    }
  MatD w = random_mat(4, 4, rng);
  for (auto op : {0, 1, 2, 3, 4, 5}) {
    check_grad_full(a, [&, op](Tape<double>& t, Var<double> x) {
      Var<double> y;
      switch (op) {
        case 0: y = relu(x); break;
        case 1: y = sigmoid(x); break;
        case 2: y = tanh_op(x); break;
        case 3: y = softplus(x); break;
        case 4: y = smooth_l1(x); break;
        default: y = rsqrt_shift(elem_mul(x, x), 0.5); break;
      }
      return sum_all(elem_mul(y, t.constant(w)));
    });
  }
}

TEST_CASE("row and column vector broadcasts") {
  DetRng rng(5);
  MatD a = random_mat(4, 3, rng);
  MatD b = random_mat(1, 3, rng);
  MatD w = random_mat(4, 3, rng);
  check_grad_full(b, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(add_rowvec(t.constant(a), x), t.constant(w)));
  });
  check_grad_full(b, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(mul_rowvec(t.constant(a), x), t.constant(w)));
  });
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    Var<double> v = mul_rowvec(add_rowvec(x, t.constant(b)), t.constant(b));
    return sum_all(elem_mul(v, t.constant(w)));
  });
  std::vector<double> scales = {0.0, 1.0, 2.0, 0.5};
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(colvec_scale_const(x, scales), t.constant(w)));
  });
}

TEST_CASE("row_select_const routes gradients exactly") {
  DetRng rng(6);
  MatD a = random_mat(4, 3, rng);
  MatD b = random_mat(4, 3, rng);
  std::vector<uint8_t> take = {1, 0, 1, 0};
  Tape<double> t;
  Var<double> va = t.leaf(&a);
  Var<double> vb = t.leaf(&b);
  Var<double> sel = row_select_const(va, vb, take);
  CHECK(t.val(sel).row(0) == a.row(0));
  CHECK(t.val(sel).row(1) == b.row(1));
  t.backward(sum_all(sel));
  MatD ga = t.grad_of(va), gb = t.grad_of(vb);
  CHECK(ga.row(0).sum() == doctest::Approx(3.0));
  CHECK(ga.row(1).sum() == doctest::Approx(0.0));
  CHECK(gb.row(1).sum() == doctest::Approx(3.0));
  CHECK(gb.row(0).sum() == doctest::Approx(0.0));
}

TEST_CASE("masked softmax rows: normalization, masking, gradient") {
  DetRng rng(7);
  MatD a = random_mat(3, 5, rng);
  std::vector<uint8_t> mask = {1, 1, 0, 1, 0};
  MatD w = random_mat(3, 5, rng);
  Tape<double> t;
  Var<double> x = t.leaf(&a);
  Var<double> y = softmax_rows(x, mask);
  const MatD& yv = t.val(y);
  for (int r = 0; r < 3; ++r) {
    CHECK(yv.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(yv(r, 2) == 0.0);
    CHECK(yv(r, 4) == 0.0);
  }
  check_grad_full(a, [&](Tape<double>& tp, Var<double> v) {
    return sum_all(elem_mul(softmax_rows(v, mask), tp.constant(w)));
  });
}

TEST_CASE("masked softmax cols") {
  DetRng rng(8);
  MatD a = random_mat(5, 3, rng);
  std::vector<uint8_t> mask = {1, 0, 1, 1, 0};
  MatD w = random_mat(5, 3, rng);
  Tape<double> t;
  Var<double> y = softmax_cols(t.leaf(&a), mask);
  for (int c = 0; c < 3; ++c) {
    CHECK(t.val(y).col(c).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.val(y)(1, c) == 0.0);
  }
  check_grad_full(a, [&](Tape<double>& tp, Var<double> v) {
    return sum_all(elem_mul(softmax_cols(v, mask), tp.constant(w)));
  });
}

TEST_CASE("concat, slice, transpose") {
  DetRng rng(9);
  MatD a = random_mat(3, 2, rng);
  MatD b = random_mat(3, 4, rng);
  MatD w2 = random_mat(2, 2, rng);
  MatD rows_extra = random_mat(2, 2, rng);
  MatD w5 = random_mat(2, 5, rng);
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    Var<double> cat = concat_cols<double>({x, t.constant(b)});
    Var<double> sl = slice_cols(cat, 1, 2);       // one col from x, one from b
    Var<double> sr = slice_rows(sl, 0, 2);        // [2 x 2]
    return sum_all(elem_mul(transpose(sr), t.constant(w2)));
  });
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    Var<double> cat = concat_rows<double>({x, t.constant(rows_extra)});
    return sum_all(elem_mul(transpose(cat), t.constant(w5)));
  });
}

TEST_CASE("row_gather accumulates duplicate rows") {
  DetRng rng(10);
  MatD a = random_mat(4, 3, rng);
  std::vector<int> idx = {2, 0, 2, 3};
  MatD w = random_mat(4, 3, rng);
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(row_gather(x, idx), t.constant(w)));
  });
  Tape<double> t;
  Var<double> g = row_gather(t.leaf(&a), idx);
  CHECK(t.val(g).row(0) == a.row(2));
  CHECK(t.val(g).row(2) == a.row(2));
}

TEST_CASE("rows_reduce_max and mean over ranges") {
  DetRng rng(11);
  MatD a = random_mat(6, 3, rng);
  // separate entries so argmax is unique and stays put under fd steps
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) += r * 0.37 + c * 0.11;
  std::vector<std::pair<int, int>> ranges = {{0, 2}, {2, 5}, {5, 6}};
  MatD w = random_mat(3, 3, rng);
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(rows_reduce_max(x, ranges), t.constant(w)));
  });
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    return sum_all(elem_mul(rows_reduce_mean(x, ranges), t.constant(w)));
  });
  Tape<double> t;
  Var<double> m = rows_reduce_max(t.leaf(&a), ranges);
  CHECK(t.val(m)(2, 0) == a(5, 0));
}

TEST_CASE("pairwise_combine matches the per-pair formula") {
  DetRng rng(12);
  MatD a = random_mat(3, 2, rng);
  MatD b = random_mat(3, 2, rng);
  Tape<double> t;
  Var<double> pc = pairwise_combine(t.leaf(&a), t.leaf(&b));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int c = 0; c < 2; ++c)
        CHECK(t.val(pc)(i * 3 + j, c) ==
              doctest::Approx(a(i, c) + b(j, c) - b(i, c)).epsilon(1e-14));
  MatD w = random_mat(9, 2, rng);
  check_grad_full(a, [&](Tape<double>& tp, Var<double> x) {
    return sum_all(elem_mul(pairwise_combine(x, tp.constant(b)), tp.constant(w)));
  });
  check_grad_full(b, [&](Tape<double>& tp, Var<double> x) {
    return sum_all(elem_mul(pairwise_combine(tp.constant(a), x), tp.constant(w)));
  });
}

TEST_CASE("time_shift pads with zeros at block boundaries") {
  DetRng rng(13);
  MatD a = random_mat(6, 2, rng);
  std::vector<std::pair<int, int>> blocks = {{0, 3}, {3, 6}};
  Tape<double> t;
  Var<double> fwd = time_shift(t.leaf(&a), 1, blocks);
  CHECK(t.val(fwd).row(0) == a.row(1));
  CHECK(t.val(fwd).row(2).isZero());  // row 3 is in the next block
  CHECK(t.val(fwd).row(3) == a.row(4));
  CHECK(t.val(fwd).row(5).isZero());
  MatD w = random_mat(6, 2, rng);
  check_grad_full(a, [&](Tape<double>& tp, Var<double> x) {
    Var<double> y = add(time_shift(x, 1, blocks), time_shift(x, -1, blocks));
    return sum_all(elem_mul(y, tp.constant(w)));
  });
}

TEST_CASE("row_mean and broadcast_col") {
  DetRng rng(14);
  MatD a = random_mat(4, 5, rng);
  MatD w = random_mat(4, 5, rng);
  check_grad_full(a, [&](Tape<double>& t, Var<double> x) {
    Var<double> centered = sub(x, broadcast_col(row_mean(x), 5));
    return sum_all(elem_mul(centered, t.constant(w)));
  });
}

TEST_CASE("unused parameters get zero gradients") {
  MatD a = MatD::Ones(2, 2);
  MatD b = MatD::Ones(2, 2);
  Tape<double> t;
  Var<double> va = t.leaf(&a);
  Var<double> vb = t.leaf(&b);
  t.backward(sum_all(va));
  CHECK(t.grad_of(vb).isZero());
  CHECK(t.grad_of(va).sum() == doctest::Approx(4.0));
}

}  // TEST_SUITE
