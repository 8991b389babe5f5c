#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "ntta/metrics.hpp"

using namespace ntta;

namespace {

// Independent tally: per class, count TP/FP/FN pixel by pixel.
struct BruteIou {
  std::vector<double> iou;  // negative when undefined
  double miou;
};

BruteIou brute(const std::vector<int>& pred, const std::vector<int>& gt, int classes) {
  BruteIou r;
  double s = 0.0;
  int n = 0;
  for (int k = 0; k < classes; ++k) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == 255) continue;
      const bool g = gt[i] == k, p = pred[i] == k;
      if (g && p) ++tp;
      if (!g && p) ++fp;
      if (g && !p) ++fn;
    }
    if (tp + fp + fn == 0) {
      r.iou.push_back(-1.0);
    } else {
      r.iou.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp + fn));
      s += r.iou.back();
      ++n;
    }
  }
  r.miou = n ? s / n : -1.0;
  return r;
}

std::vector<int> random_map(std::mt19937_64& rng, int classes, bool with_ignore) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> m(64);
  for (auto& v : m) v = (with_ignore && u(rng) < 0.1) ? 255 : d(rng);
  return m;
}

}  // namespace

TEST(Confusion, PerfectPrediction) {
  ConfusionMatrix cm(3);
  const std::vector<int> gt{2, 2, 2, 2, 2};
  cm.accumulate(gt, gt);
  EXPECT_EQ(cm.at(2, 2), 5u);
  EXPECT_EQ(cm.total(), 5u);
  EXPECT_EQ(*cm.iou(2), 1.0);
  EXPECT_FALSE(cm.iou(0).has_value());
  EXPECT_EQ(cm.miou(), 1.0);
}

TEST(Confusion, AllIgnoredLeavesMatrixUnchanged) {
  ConfusionMatrix cm(3);
  const std::vector<int> gt(10, 255), pred(10, 1);
  cm.accumulate(pred, gt);
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_THROW(cm.miou(), ValueError);
}

TEST(Confusion, IouExamples) {
  // class 0: TP 2, FP 1, FN 1
  ConfusionMatrix cm(2);
  cm.accumulate(std::vector<int>{0, 0, 0, 1, 1}, std::vector<int>{0, 0, 1, 0, 1});
  EXPECT_DOUBLE_EQ(*cm.iou(0), 0.5);

  // IoU 0.4 and 0.6
  ConfusionMatrix two(2);
  std::vector<int> gt, pred;
  for (int i = 0; i < 2; ++i) gt.push_back(0), pred.push_back(0);
  for (int i = 0; i < 3; ++i) gt.push_back(0), pred.push_back(1);
  for (int i = 0; i < 3; ++i) gt.push_back(1), pred.push_back(1);
  two.accumulate(pred, gt);
  EXPECT_DOUBLE_EQ(*two.iou(0), 0.4);
  EXPECT_DOUBLE_EQ(*two.iou(1), 0.5);
  ConfusionMatrix one(3);
  one.accumulate(std::vector<int>{1, 1, 0}, std::vector<int>{1, 1, 1});
  EXPECT_DOUBLE_EQ(one.miou(), (2.0 / 3.0 + 0.0) / 2.0);
}

TEST(Confusion, PresentButNeverPredictedScoresZero) {
  ConfusionMatrix cm(3);
  cm.accumulate(std::vector<int>{0, 0, 0}, std::vector<int>{0, 0, 2});
  EXPECT_EQ(*cm.iou(2), 0.0);
  EXPECT_FALSE(cm.iou(1).has_value());
  EXPECT_DOUBLE_EQ(cm.miou(), (2.0 / 3.0 + 0.0) / 2.0);
}

TEST(Confusion, OutOfRangeThrows) {
  ConfusionMatrix cm(3);
  EXPECT_THROW(cm.accumulate(std::vector<int>{0}, std::vector<int>{3}), ValueError);
  EXPECT_THROW(cm.accumulate(std::vector<int>{5}, std::vector<int>{0}), ValueError);
  EXPECT_THROW(cm.accumulate(std::vector<int>{0, 1}, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(cm.accumulate(Tensor({2}, {0.5, 1.0}), Tensor({2}, {0.0, 1.0})), ValueError);
}

TEST(Confusion, BruteForceOracle) {
  std::mt19937_64 rng(99);
  for (int rep = 0; rep < 100; ++rep) {
    const int classes = 5;
    const auto gt = random_map(rng, classes, true);
    const auto pred = random_map(rng, classes, false);
    ConfusionMatrix cm(classes);
    cm.accumulate(pred, gt);
    const BruteIou b = brute(pred, gt, classes);
    for (int k = 0; k < classes; ++k) {
      const auto v = cm.iou(k);
      if (b.iou[k] < 0) {
        EXPECT_FALSE(v.has_value());
      } else {
        ASSERT_TRUE(v.has_value());
        EXPECT_EQ(*v, b.iou[k]);
      }
    }
    EXPECT_EQ(cm.miou(), b.miou);
    // Tensor entry point agrees.
    std::vector<double> gd(gt.begin(), gt.end()), pd(pred.begin(), pred.end());
    ConfusionMatrix ct(classes);
    ct.accumulate(Tensor({8, 8}, pd), Tensor({8, 8}, gd));
    EXPECT_EQ(ct, cm);
  }
}

TEST(Confusion, OrderIndependentAndMergeable) {
  std::mt19937_64 rng(3);
  auto gt = random_map(rng, 4, true);
  auto pred = random_map(rng, 4, false);
  ConfusionMatrix a(4);
  a.accumulate(pred, gt);

  std::vector<std::size_t> perm(gt.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> g2, p2;
  for (auto i : perm) g2.push_back(gt[i]), p2.push_back(pred[i]);
  ConfusionMatrix b(4);
  b.accumulate(p2, g2);
  EXPECT_EQ(a, b);

  ConfusionMatrix lo(4), hi(4);
  lo.accumulate(std::span(pred).first(30), std::span(gt).first(30));
  hi.accumulate(std::span(pred).subspan(30), std::span(gt).subspan(30));
  hi.merge(lo);
  EXPECT_EQ(hi, a);
}

TEST(Confusion, PermutationInvariance) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    auto gt = random_map(rng, 5, true);
    auto pred = random_map(rng, 5, false);
    std::vector<int> relabel{3, 0, 4, 1, 2};
    auto apply = [&](std::vector<int> m) {
      for (auto& v : m)
        if (v != 255) v = relabel[v];
      return m;
    };
    ConfusionMatrix a(5), b(5);
    a.accumulate(pred, gt);
    b.accumulate(apply(pred), apply(gt));
    EXPECT_NEAR(a.miou(), b.miou(), 1e-15);
    for (int k = 0; k < 5; ++k) {
      const auto x = a.iou(k), y = b.iou(relabel[k]);
      ASSERT_EQ(x.has_value(), y.has_value());
      if (x) {
        EXPECT_EQ(*x, *y);
        EXPECT_GE(*x, 0.0);
        EXPECT_LE(*x, 1.0);
      }
    }
  }
}

TEST(Confusion, ReportFormats) {
  ConfusionMatrix cm(3);
  cm.accumulate(std::vector<int>{0, 0, 1, 1}, std::vector<int>{0, 1, 1, 255});
  const auto j = metrics_report(cm, {"a", "b", "c"});
  EXPECT_DOUBLE_EQ(j["per_class_iou"]["a"].get<double>(), 0.5);
  EXPECT_TRUE(j["per_class_iou"]["c"].is_null());
  EXPECT_EQ(j["pixel_count"].get<std::uint64_t>(), 3u);
  EXPECT_EQ(metrics_csv_header({"a", "b", "c"}), "miou,pixel_count,iou_a,iou_b,iou_c");
  EXPECT_EQ(metrics_csv_row(cm), "0.500000,3,0.500000,0.500000,");
  EXPECT_EQ(ConfusionMatrix::from_json(cm.to_json()), cm);
}
