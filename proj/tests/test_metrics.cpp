#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "probebench/error.hpp"
#include "probebench/metrics.hpp"

using namespace probebench;
using namespace probebench::metrics;

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

Matrix random_scores(std::size_t rows, std::size_t cols, std::uint64_t seed, int levels = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = levels ? std::floor(u(rng) * levels) / levels : u(rng);
  return m;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = rng() % classes;
  return y;
}

const std::vector<std::string> kFour = {"a", "b", "c", "d"};

}  // namespace

TEST(BinaryAuc, ReferenceCases) {
  EXPECT_DOUBLE_EQ(roc_auc_binary(std::vector<double>{0.9, 0.8, 0.1, 0.2}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(roc_auc_binary(std::vector<double>(6, 0.3), std::vector<int>{1, 0, 1, 0, 0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(roc_auc_binary(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}), 0.0);
  EXPECT_THROW(roc_auc_binary(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 1}), ValidationError);
  EXPECT_THROW(roc_auc_binary(std::vector<double>{0.1}, std::vector<int>{1, 0}), ValidationError);
}

TEST(BinaryAuc, MatchesPairCounting) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<double> s(50);
    std::vector<int> y(50);
    for (std::size_t i = 0; i < 50; ++i) {
      // Coarse levels force plenty of ties on odd seeds.
      s[i] = seed % 2 ? static_cast<double>(rng() % 7) : std::uniform_real_distribution<double>(0, 1)(rng);
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(roc_auc_binary(s, y), pairwise_auc(s, y), 1e-12) << seed;
  }
}

TEST(BinaryAuc, MonotoneTransformAndNegation) {
  std::mt19937_64 rng(5);
  std::vector<double> s(40), cubed(40), negated(40);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = static_cast<double>(rng() % 11) - 5.0;
    cubed[i] = s[i] * s[i] * s[i] + 3.0;
    negated[i] = -s[i];
    y[i] = static_cast<int>(i % 3 == 0);
  }
  EXPECT_DOUBLE_EQ(roc_auc_binary(s, y), roc_auc_binary(cubed, y));
  EXPECT_NEAR(roc_auc_binary(s, y) + roc_auc_binary(negated, y), 1.0, 1e-12);
}

TEST(MacroAuc, MeanOfOneVsRest) {
  const auto scores = random_scores(40, 4, 3, 5);
  auto labels = random_labels(40, 4, 4);
  labels[0] = 0, labels[1] = 1, labels[2] = 2, labels[3] = 3;
  const auto result = macro_auc(scores, labels, kFour);
  double sum = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<double> col;
    std::vector<int> y;
    for (std::size_t r = 0; r < 40; ++r) {
      col.push_back(scores(r, c));
      y.push_back(labels[r] == c);
    }
    const double oracle = pairwise_auc(col, y);
    EXPECT_NEAR(*result.per_class[c], oracle, 1e-12);
    sum += oracle;
  }
  EXPECT_NEAR(result.macro, sum / 4, 1e-12);
  EXPECT_TRUE(result.absent.empty());
}

TEST(MacroAuc, SeparableClasses) {
  Matrix s(4, 2);
  s(0, 0) = 0.9, s(1, 0) = 0.8, s(2, 0) = 0.1, s(3, 0) = 0.2;
  s(0, 1) = 0.1, s(1, 1) = 0.2, s(2, 1) = 0.7, s(3, 1) = 0.6;
  const std::vector<std::size_t> y = {0, 0, 1, 1};
  const std::vector<std::string> classes = {"a", "b"};
  const auto r = macro_auc(s, y, classes);
  EXPECT_DOUBLE_EQ(*r.per_class[0], 1.0);
  EXPECT_DOUBLE_EQ(*r.per_class[1], 1.0);
  EXPECT_DOUBLE_EQ(r.macro, 1.0);
}

TEST(MacroAuc, AbsentClassIsExcludedAndFlagged) {
  const auto scores = random_scores(30, 4, 8);
  auto labels = random_labels(30, 3, 9);  // class "d" never appears
  const auto r = macro_auc(scores, labels, kFour);
  EXPECT_FALSE(r.per_class[3].has_value());
  EXPECT_EQ(r.absent, (std::vector<std::string>{"d"}));
  EXPECT_NEAR(r.macro, (*r.per_class[0] + *r.per_class[1] + *r.per_class[2]) / 3, 1e-15);

  const std::vector<std::size_t> all_a(30, 0);
  EXPECT_THROW(macro_auc(scores, all_a, kFour), ValidationError);
}

TEST(MacroAuc, ColumnPermutationInvariance) {
  const auto scores = random_scores(40, 4, 10);
  const auto labels = random_labels(40, 4, 11);
  const std::vector<std::size_t> perm = {3, 1, 0, 2};
  Matrix ps(40, 4);
  std::vector<std::size_t> pl;
  std::vector<std::string> pc(4);
  for (std::size_t r = 0; r < 40; ++r) {
    for (std::size_t c = 0; c < 4; ++c) ps(r, perm[c]) = scores(r, c);
    pl.push_back(perm[labels[r]]);
  }
  for (std::size_t c = 0; c < 4; ++c) pc[perm[c]] = kFour[c];
  EXPECT_NEAR(macro_auc(scores, labels, kFour).macro, macro_auc(ps, pl, pc).macro, 1e-12);
}

TEST(Top1, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax(std::vector<double>{0.2, 0.7, 0.7}), 1u);
  EXPECT_EQ(argmax(std::vector<double>{0.5, 0.5, 0.5}), 0u);
  const Matrix uniform(10, 5, 0.2);
  const std::vector<std::size_t> y = {0, 1, 2, 0, 4, 3, 0, 2, 1, 1};
  EXPECT_DOUBLE_EQ(top1_accuracy(uniform, y), 0.3);
}

TEST(Top1, MatchesNaiveLoopAndConfusionTrace) {
  const auto scores = random_scores(60, 4, 12, 4);
  const auto labels = random_labels(60, 4, 13);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < 60; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 4; ++c) {
      if (scores(r, c) > scores(r, best)) best = c;
    }
    hits += best == labels[r];
  }
  EXPECT_DOUBLE_EQ(top1_accuracy(scores, labels), static_cast<double>(hits) / 60.0);

  const auto conf = confusion_matrix(scores, labels, 4);
  std::size_t trace = 0, total = 0;
  for (std::size_t t = 0; t < 4; ++t) {
    std::size_t row = 0;
    for (auto v : conf[t]) row += v;
    EXPECT_EQ(row, static_cast<std::size_t>(std::count(labels.begin(), labels.end(), t)));
    trace += conf[t][t];
    total += row;
  }
  EXPECT_EQ(trace, hits);
  EXPECT_EQ(total, 60u);
  EXPECT_THROW(top1_accuracy(Matrix(), std::vector<std::size_t>{}), ValidationError);
}

TEST(Confusions, DiagonalAndArithmetic) {
  const std::vector<std::string> abc = {"a", "b", "c"};
  EXPECT_TRUE(top_confusions({{3, 0, 0}, {0, 4, 0}, {0, 0, 1}}, abc, 5).empty());
  const Confusion c = {{8, 2, 0}, {1, 9, 0}, {0, 0, 0}};
  const auto top = top_confusions(c, abc, 5);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0], (ConfusionEntry{"a", "b", 0.2}));
  EXPECT_EQ(top[1], (ConfusionEntry{"b", "a", 0.1}));
  EXPECT_EQ(top_confusions(c, abc, 1).size(), 1u);
}

TEST(Confusions, TiesKeepRowMajorOrder) {
  const std::vector<std::string> abc = {"a", "b", "c"};
  const auto top = top_confusions({{2, 1, 1}, {0, 3, 1}, {1, 0, 3}}, abc, 10);
  ASSERT_EQ(top.size(), 4u);
  EXPECT_EQ(top[0].true_class, "a");
  EXPECT_EQ(top[0].predicted_class, "b");
  EXPECT_EQ(top[1].predicted_class, "c");
  EXPECT_EQ(top[2].true_class, "b");
  EXPECT_EQ(top[3].true_class, "c");
}

TEST(LogOdds, ValuesClampingAndAntisymmetry) {
  EXPECT_EQ(log_odds(0.5).value, 0.0);
  EXPECT_NEAR(log_odds(0.99).value, std::log(99.0), 1e-12);
  EXPECT_NEAR(log_odds(0.99).value, 4.59512, 1e-5);
  EXPECT_FALSE(log_odds(0.99).clamped);
  const double bound = std::log((1 - kLogOddsEpsilon) / kLogOddsEpsilon);
  EXPECT_TRUE(log_odds(1.0).clamped);
  EXPECT_NEAR(log_odds(1.0).value, bound, 1e-9);
  EXPECT_TRUE(log_odds(0.0).clamped);
  EXPECT_NEAR(log_odds(0.0).value, -bound, 1e-9);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int i = 0; i < 100; ++i) {
    const double p = u(rng);
    EXPECT_NEAR(log_odds(p).value, -log_odds(1 - p).value, 1e-9);
  }
}

TEST(Report, EvaluateAndJsonRoundTrip) {
  const auto scores = random_scores(30, 4, 14);
  auto labels = random_labels(30, 3, 15);
  const auto r = evaluate(scores, labels, kFour);
  EXPECT_EQ(r.n_eval, 30u);
  EXPECT_EQ(r.classes, kFour);
  std::size_t trace = 0;
  for (std::size_t c = 0; c < 4; ++c) trace += r.confusion[c][c];
  EXPECT_DOUBLE_EQ(r.top1, static_cast<double>(trace) / 30.0);

  const auto back = report_from_json(report_to_json(r));
  EXPECT_EQ(back.classes, r.classes);
  EXPECT_EQ(back.per_class_auc, r.per_class_auc);
  EXPECT_EQ(back.macro_auc, r.macro_auc);
  EXPECT_EQ(back.top1, r.top1);
  EXPECT_EQ(back.confusion, r.confusion);
  EXPECT_EQ(back.n_eval, r.n_eval);
  EXPECT_THROW(report_from_json("{\"classes\": 3}"), FormatError);
}
