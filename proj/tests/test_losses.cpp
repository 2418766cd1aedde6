#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "distillforge/errors.hpp"
#include "distillforge/losses.hpp"
#include "loss_cases.hpp"

using namespace distillforge;
using distillforge::testing::gaussian;

namespace {

bool bitwise_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

std::vector<double> grad_of(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

}  // namespace

// ---- configuration --------------------------------------------------------

TEST(DistillConfig, RejectsOutOfRangeValues) {
  DistillConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau = 0.5;
  EXPECT_THROW(c.validate(), ParameterError);
  c = {};
  c.alpha = -0.1;
  EXPECT_THROW(c.validate(), ParameterError);
  c = {};
  c.lambda_margin = -1;
  EXPECT_THROW(c.validate(), ParameterError);
}

// ---- soft predictions -----------------------------------------------------

TEST(SoftPredictions, TauOneIsExactlySoftmax) {
  std::mt19937_64 rng(1);
  const auto x = gaussian(6, 4, rng, 3.0);
  const auto a = soft_predictions(x, 1.0).to_vector();
  const auto b = softmax_rows(x).to_vector();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bitwise_equal(a[i], b[i]));
}

TEST(SoftPredictions, UniformLogitsStayUniform) {
  for (double tau : {1.0, 2.0, 7.5}) {
    for (double v : soft_predictions(Tensor::row({0, 0, 0}), tau).to_vector()) {
      EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    }
  }
}

TEST(SoftPredictions, TemperatureThree) {
  // softmax([1, 0]) to 10 digits
  const auto s = soft_predictions(Tensor::row({3, 0}), 3.0);
  EXPECT_NEAR(s.data()[0], 0.7310585786, 1e-10);
  EXPECT_NEAR(s.data()[1], 0.2689414214, 1e-10);
}

TEST(SoftPredictions, NonPositiveTauIsAParameterError) {
  EXPECT_THROW(soft_predictions(Tensor::row({1, 2}), 0.0), ParameterError);
  EXPECT_THROW(soft_predictions(Tensor::row({1, 2}), -1.0), ParameterError);
}

TEST(SoftPredictions, ArgmaxDoesNotDependOnTau) {
  std::mt19937_64 rng(7);
  const auto x = gaussian(30, 6, rng, 2.0);
  auto argmaxes = [&](double tau) {
    const auto s = soft_predictions(x, tau);
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < s.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.cols(); ++c)
        if (s.at(r, c) > s.at(r, best)) best = c;
      out.push_back(best);
    }
    return out;
  };
  const auto ref = argmaxes(1.0);
  for (double tau : {0.25, 2.0, 3.0, 20.0}) EXPECT_EQ(argmaxes(tau), ref) << "tau " << tau;
}

// ---- cross-entropy and softmax loss ---------------------------------------

TEST(CrossEntropy, MatchingOneHotIsZero) {
  const auto t = Tensor::row({0, 1, 0});
  EXPECT_NEAR(cross_entropy(t, t).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, UniformPredictionGivesLogC) {
  for (std::size_t c : {2u, 5u, 32u}) {
    const auto pred = Tensor::full({1, c}, 1.0 / static_cast<double>(c));
    std::vector<double> onehot(c, 0.0);
    onehot[c / 2] = 1.0;
    EXPECT_NEAR(cross_entropy(pred, Tensor({1, c}, onehot)).item(), std::log(static_cast<double>(c)),
                1e-12);
  }
}

TEST(CrossEntropy, HandValue) {
  // -ln 0.73106
  EXPECT_NEAR(cross_entropy(Tensor::row({0.73106, 0.26894}), Tensor::row({1, 0})).item(), 0.31326,
              1e-4);
}

TEST(CrossEntropy, NegativeTargetIsAContractError) {
  EXPECT_THROW(cross_entropy(Tensor::row({0.5, 0.5}), Tensor::row({1.5, -0.5})), ContractError);
}

TEST(CrossEntropy, ShapeMismatchIsADimensionError) {
  EXPECT_THROW(cross_entropy(Tensor::row({0.5, 0.5}), Tensor::row({1, 0, 0})), DimensionError);
}

TEST(SoftmaxLoss, PeakedLogitsGiveSmallLoss) {
  const std::vector<std::size_t> labels{2};
  EXPECT_LT(softmax_loss(Tensor::row({0, 0, 20}), labels).item(), 0.01);
}

TEST(SoftmaxLoss, UniformLogitsGiveLogC) {
  const std::vector<std::size_t> labels{1, 3};
  EXPECT_NEAR(softmax_loss(Tensor::zeros({2, 4}), labels).item(), std::log(4.0), 1e-12);
}

TEST(SoftmaxLoss, OutOfRangeLabelIsAContractError) {
  const std::vector<std::size_t> labels{4};
  EXPECT_THROW(softmax_loss(Tensor::zeros({1, 4}), labels), ContractError);
}

TEST(SoftmaxLoss, GradientIsSoftmaxMinusOneHotOverBatch) {
  auto a = Tensor::matrix({{0.2, -1.0, 0.7}, {1.5, 0.3, -0.4}}, true);
  const std::vector<std::size_t> labels{2, 0};
  backward(softmax_loss(a, labels));
  const auto p = softmax_rows(a.detach());
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double want = (p.at(r, c) - (c == labels[r] ? 1.0 : 0.0)) / 2.0;
      EXPECT_NEAR(a.grad()[r * 3 + c], want, 1e-14);
    }
  }
}

// ---- classification distillation ------------------------------------------

TEST(DistillClsLoss, AlphaZeroIsBitwiseSoftmaxLoss) {
  std::mt19937_64 rng(11);
  DistillConfig cfg;
  cfg.alpha = 0.0;
  const std::vector<std::size_t> labels{0, 1, 2, 3, 4};
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = gaussian(5, 7, rng, 3.0);
    const auto t = gaussian(5, 7, rng, 3.0);
    EXPECT_TRUE(bitwise_equal(distill_cls_loss(s, t, labels, cfg).item(),
                              softmax_loss(s, labels).item()));
  }
}

TEST(DistillClsLoss, SelfDistillationAddsTeacherEntropy) {
  const auto logits = Tensor::row({0.4, -0.2, 1.1});
  const std::vector<std::size_t> labels{1};
  DistillConfig cfg;
  cfg.alpha = 1.0;
  const auto soft = soft_predictions(logits, cfg.tau).to_vector();
  double entropy = 0.0;
  for (double p : soft) entropy -= p * std::log(p);
  EXPECT_NEAR(distill_cls_loss(logits, logits, labels, cfg).item(),
              softmax_loss(logits, labels).item() + entropy, 1e-12);
}

TEST(DistillClsLoss, SingleSampleReferenceValue) {
  // 50-digit evaluation: -ln softmax([1,0])_0 + H(softmax([1/3,0]), softmax([1,0]))
  //   = 0.3132616875 + 0.6299527152
  DistillConfig cfg;
  cfg.alpha = 1.0;
  cfg.tau = 3.0;
  const std::vector<std::size_t> labels{0};
  const double v = distill_cls_loss(Tensor::row({1, 0}), Tensor::row({3, 0}), labels, cfg).item();
  EXPECT_NEAR(v, 0.9432144027, 1e-9);
}

TEST(DistillClsLoss, NoGradientReachesTheTeacher) {
  auto s = Tensor::row({0.3, 0.1}, true);
  auto t = Tensor::row({2.0, -1.0}, true);
  const std::vector<std::size_t> labels{1};
  backward(distill_cls_loss(s, t, labels, DistillConfig{}));
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(DistillClsLoss, ShapeMismatchIsADimensionError) {
  const std::vector<std::size_t> labels{0};
  EXPECT_THROW(distill_cls_loss(Tensor::row({1, 0}), Tensor::row({1, 0, 0}), labels, DistillConfig{}),
               DimensionError);
}

// ---- regression and hidden-layer terms ------------------------------------

TEST(EuclideanLoss, Values) {
  const auto r = Tensor::row({1, 2});
  EXPECT_EQ(euclidean_loss(r, r).item(), 0.0);
  EXPECT_EQ(euclidean_loss(r, Tensor::row({4, 6})).item(), 25.0);
  EXPECT_EQ(euclidean_loss(Tensor::matrix({{1, 0}, {0, 0}}), Tensor::matrix({{0, 0}, {0, 1}})).item(),
            1.0);
  EXPECT_THROW(euclidean_loss(r, Tensor::row({1, 2, 3})), DimensionError);
}

TEST(HiddenMatchLoss, Values) {
  EXPECT_EQ(hidden_match_loss(Tensor::row({0, 0}), Tensor::row({1, 1})).item(), 2.0);
  EXPECT_EQ(hidden_match_loss(Tensor::row({5, 1}), Tensor::row({5, 1})).item(), 0.0);
  EXPECT_THROW(hidden_match_loss(Tensor::row({0}), Tensor::row({1, 1})), DimensionError);
}

TEST(HiddenMatchLoss, GradientIsTwiceTheDifferenceOverBatch) {
  auto ks = Tensor::matrix({{1, 2}, {0, -1}, {3, 3}}, true);
  auto kt = Tensor::matrix({{0, 0}, {1, 1}, {2, 5}}, true);
  backward(hidden_match_loss(ks, kt));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(ks.grad()[i], 2.0 * (ks.data()[i] - kt.data()[i]) / 3.0, 1e-15);
  }
  EXPECT_FALSE(kt.has_grad());
}

// ---- alignment ------------------------------------------------------------

namespace {

NetOutputs outputs(const Tensor& logits, const Tensor& k, const Tensor& r) { return {logits, k, r}; }

}  // namespace

TEST(AlignDistillLoss, ZeroWeightsAreBitwiseEuclidean) {
  std::mt19937_64 rng(3);
  DistillConfig cfg;
  cfg.alpha = cfg.beta = 0.0;
  const auto s = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 3, rng));
  const auto t = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 3, rng));
  const auto y = gaussian(4, 3, rng);
  EXPECT_TRUE(bitwise_equal(align_distill_loss(s, t, y, cfg).item(), euclidean_loss(s.regression, y).item()));
}

TEST(AlignDistillLoss, MatchedHiddenAndExactRegressionIsZero) {
  std::mt19937_64 rng(4);
  DistillConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 1.0;
  const auto k = gaussian(3, 4, rng);
  const auto y = gaussian(3, 2, rng);
  const auto s = outputs(gaussian(3, 5, rng), k, y);
  const auto t = outputs(gaussian(3, 5, rng), k.clone(), gaussian(3, 2, rng));
  EXPECT_EQ(align_distill_loss(s, t, y, cfg).item(), 0.0);
}

TEST(AlignDistillLoss, EqualsSumOfComponents) {
  std::mt19937_64 rng(5);
  DistillConfig cfg;
  cfg.alpha = cfg.beta = 1.0;
  const auto s = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 3, rng));
  const auto t = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 3, rng));
  const auto y = gaussian(4, 3, rng);
  const double parts = euclidean_loss(s.regression, y).item() +
                       cross_entropy(soft_predictions(s.logits, cfg.tau), soft_predictions(t.logits, cfg.tau)).item() +
                       hidden_match_loss(s.embedding, t.embedding).item();
  EXPECT_EQ(align_distill_loss(s, t, y, cfg).item(), parts);
}

TEST(AlignDistillLoss, EqualsGeneralFormWithItsComponents) {
  std::mt19937_64 rng(6);
  DistillConfig cfg;
  cfg.alpha = 0.4;
  cfg.beta = 2.5;
  const auto s = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 3, rng));
  const auto t = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 3, rng));
  const auto y = gaussian(4, 3, rng);
  const auto general = general_distill_loss(
      euclidean_loss(s.regression, y),
      cross_entropy(soft_predictions(s.logits, cfg.tau), soft_predictions(t.logits, cfg.tau)),
      hidden_match_loss(s.embedding, t.embedding), cfg);
  EXPECT_EQ(align_distill_loss(s, t, y, cfg).item(), general.item());
}

// ---- general form ---------------------------------------------------------

TEST(GeneralDistillLoss, Arithmetic) {
  DistillConfig cfg;
  cfg.alpha = 2.0;
  cfg.beta = 0.0;
  EXPECT_EQ(general_distill_loss(Tensor::scalar(0.0), Tensor::scalar(0.5), Tensor::scalar(9.0), cfg).item(), 1.0);
  cfg.alpha = cfg.beta = 0.0;
  EXPECT_EQ(general_distill_loss(Tensor::scalar(1.25), Tensor::scalar(3.0), Tensor::scalar(4.0), cfg).item(), 1.25);
}

TEST(GeneralDistillLoss, MonotoneInEachWeight) {
  const auto task = Tensor::scalar(0.3), soft = Tensor::scalar(0.8), hidden = Tensor::scalar(1.7);
  double last = -1.0;
  for (double a : {0.0, 0.1, 0.5, 1.0, 4.0}) {
    DistillConfig cfg;
    cfg.alpha = a;
    cfg.beta = 0.5;
    const double v = general_distill_loss(task, soft, hidden, cfg).item();
    EXPECT_GE(v, last);
    last = v;
  }
  last = -1.0;
  for (double b : {0.0, 0.2, 1.0, 3.0}) {
    DistillConfig cfg;
    cfg.alpha = 0.5;
    cfg.beta = b;
    const double v = general_distill_loss(task, soft, hidden, cfg).item();
    EXPECT_GE(v, last);
    last = v;
  }
}

TEST(GeneralDistillLoss, LazyTermsAreSkippedAtZeroWeight) {
  DistillConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 1.0;
  int soft_calls = 0;
  const auto v = general_distill_loss(
      Tensor::scalar(1.0), [&] { ++soft_calls; return Tensor::scalar(5.0); },
      [] { return Tensor::scalar(2.0); }, cfg);
  EXPECT_EQ(soft_calls, 0);
  EXPECT_EQ(v.item(), 3.0);
}

// ---- triplets and verification --------------------------------------------

TEST(TripletLoss, CollapsedEmbeddingsGiveTheMargin) {
  const auto k = Tensor::row({0.3, -0.7});
  EXPECT_DOUBLE_EQ(triplet_loss(k, k, k, 0.4).item(), 0.4);
  EXPECT_EQ(triplet_loss(k, k, k, 0.0).item(), 0.0);
}

TEST(TripletLoss, InactiveHingeIsZero) {
  EXPECT_EQ(triplet_loss(Tensor::row({0, 0}), Tensor::row({0.1, 0}), Tensor::row({3, 0}), 0.4).item(), 0.0);
}

TEST(TripletLoss, HandValue) {
  EXPECT_EQ(triplet_loss(Tensor::row({0, 0}), Tensor::row({2, 0}), Tensor::row({1, 0}), 0.4).item(), 3.4);
}

TEST(TripletLoss, ShapeMismatchIsADimensionError) {
  EXPECT_THROW(triplet_loss(Tensor::row({0, 0}), Tensor::row({2, 0, 1}), Tensor::row({1, 0}), 0.4),
               DimensionError);
}

namespace {

struct VerifFixture {
  NetOutputs student, teacher;
  TripletRows rows{{0, 3}, {1, 2}, {2, 1}};
  std::vector<std::size_t> labels{0, 0, 1, 1};

  explicit VerifFixture(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    student = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 2, rng));
    teacher = outputs(gaussian(4, 5, rng), gaussian(4, 6, rng), gaussian(4, 2, rng));
  }

  Tensor triplets() const {
    return triplet_loss(gather_rows(student.embedding, rows.anchor),
                        gather_rows(student.embedding, rows.positive),
                        gather_rows(student.embedding, rows.negative), 0.4);
  }
};

}  // namespace

TEST(VerifDistillLoss, ZeroWeightsWithoutSoftmaxAreBitwiseTriplet) {
  const VerifFixture f(8);
  DistillConfig cfg;
  cfg.alpha = cfg.beta = 0.0;
  EXPECT_TRUE(bitwise_equal(verif_distill_loss(f.student, f.teacher, f.rows, cfg, false).item(),
                            f.triplets().item()));
}

TEST(VerifDistillLoss, EqualsSumOfComponentsWithJointSoftmax) {
  const VerifFixture f(9);
  DistillConfig cfg;
  cfg.alpha = cfg.beta = 1.0;
  const double parts =
      f.triplets().item() +
      cross_entropy(soft_predictions(f.student.logits, cfg.tau), soft_predictions(f.teacher.logits, cfg.tau))
          .item() +
      hidden_match_loss(f.student.embedding, f.teacher.embedding).item() +
      softmax_loss(f.student.logits, f.labels).item();
  EXPECT_EQ(verif_distill_loss(f.student, f.teacher, f.rows, cfg, true, std::span<const std::size_t>(f.labels))
                .item(),
            parts);
}

TEST(VerifDistillLoss, MatchingOneHotLikeSoftTargetsLeaveTheTeacherEntropy) {
  DistillConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 0.0;
  const auto logits = Tensor::matrix({{40, 0}, {0, 40}, {40, 0}});
  const auto k = Tensor::matrix({{0, 0}, {0.1, 0}, {5, 0}});
  const NetOutputs s{logits, k, Tensor::zeros({3, 1})};
  const TripletRows rows{{0}, {1}, {2}};
  const auto soft = soft_predictions(logits, cfg.tau).to_vector();
  double entropy = 0.0;
  for (double p : soft) entropy -= p * std::log(p);
  EXPECT_NEAR(verif_distill_loss(s, s, rows, cfg, false).item(), entropy / 3.0, 1e-12);
}

TEST(VerifDistillLoss, JointSoftmaxNeedsLabels) {
  const VerifFixture f(10);
  EXPECT_THROW(verif_distill_loss(f.student, f.teacher, f.rows, DistillConfig{}, true), ContractError);
}

TEST(VerifDistillLoss, TeacherReceivesNoGradient) {
  VerifFixture f(12);
  f.student.embedding.set_requires_grad(true);
  f.student.logits.set_requires_grad(true);
  f.teacher.embedding.set_requires_grad(true);
  f.teacher.logits.set_requires_grad(true);
  DistillConfig cfg;
  backward(verif_distill_loss(f.student, f.teacher, f.rows, cfg, true, std::span<const std::size_t>(f.labels)));
  EXPECT_TRUE(f.student.embedding.has_grad());
  EXPECT_FALSE(f.teacher.embedding.has_grad());
  EXPECT_FALSE(f.teacher.logits.has_grad());
}

// ---- gradients ------------------------------------------------------------

class LossGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LossGradient, MatchesFiniteDifferencesAtTwentyPoints) {
  const auto cases = distillforge::testing::loss_gradient_cases();
  const auto& c = cases.at(GetParam());
  const auto out = distillforge::testing::check_case(c, 20, 77 + GetParam());
  EXPECT_EQ(out.failures, 0u) << c.name << " worst relative error " << out.worst;
}

INSTANTIATE_TEST_SUITE_P(AllLosses, LossGradient,
                         ::testing::Range<std::size_t>(0, distillforge::testing::loss_gradient_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return distillforge::testing::loss_gradient_cases().at(info.param).name;
                         });

TEST(LossGradient, TripletGradientAtKinkUsesZeroSubgradient) {
  // slack exactly zero: 1 - 1 + 0 = 0
  auto a = Tensor::row({0, 0}, true);
  const auto p = Tensor::row({1, 0});
  const auto n = Tensor::row({0, 1});
  backward(triplet_loss(a, p, n, 0.0));
  for (double g : grad_of(a)) EXPECT_EQ(g, 0.0);
}
