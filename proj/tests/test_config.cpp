#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "distillforge/config.hpp"
#include "distillforge/errors.hpp"
#include "distillforge/random.hpp"

using namespace distillforge;

namespace {

template <typename F>
std::string parse_error_of(F&& f, std::size_t* line = nullptr) {
  try {
    f();
  } catch (const ParseError& e) {
    if (line) *line = e.line();
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
  ConfigBuilder b;
  b.apply_text("");
  const auto cfg = b.build();
  const ExperimentPlan defaults;
  EXPECT_EQ(cfg.plan.divisors, defaults.divisors);
  EXPECT_EQ(cfg.plan.distill, defaults.distill);
  EXPECT_EQ(cfg.plan.task_grid, defaults.task_grid);
  EXPECT_EQ(cfg.plan.training.epochs_per_phase, 15u);
  EXPECT_EQ(cfg.plan.training.scratch_lr, 0.1);
  EXPECT_EQ(cfg.plan.training.continuation_lr, 0.01);
  EXPECT_EQ(cfg.plan.generator.num_identities, 32u);
  EXPECT_EQ(cfg.plan.teacher.hidden_widths, (std::vector<std::size_t>{256, 256, 128}));
  EXPECT_EQ(cfg.out_dir, std::filesystem::path("out"));
  EXPECT_EQ(cfg.seed, 0u);
}

TEST(Config, SeedFeedsPlanAndGenerator) {
  ConfigBuilder b;
  b.set_seed(42);
  const auto cfg = b.build();
  EXPECT_EQ(cfg.plan.seed, 42u);
  EXPECT_EQ(cfg.plan.generator.seed, derive_seed(42, "generator"));
}

TEST(Config, TauOverrideRoundTrips) {
  ConfigBuilder b;
  b.apply_override("distill.tau=3.0");
  EXPECT_EQ(b.build().plan.distill.tau, 3.0);
  b.apply_override("distill.tau = 4.5");
  EXPECT_EQ(b.build().plan.distill.tau, 4.5);
  EXPECT_TRUE(b.was_set("distill.tau"));
}

TEST(Config, NegativeTauNamesTheKey) {
  ConfigBuilder b;
  const auto what = parse_error_of([&] { b.apply_override("distill.tau=-1"); });
  EXPECT_NE(what.find("distill.tau"), std::string::npos) << what;
}

TEST(Config, FileLinesAreReported) {
  ConfigBuilder b;
  std::size_t line = 0;
  const auto what = parse_error_of(
      [&] { b.apply_text("# comment\n\ntrain.epochs_per_phase = 3\nmodel.depth = 4\n", "run.cfg"); },
      &line);
  EXPECT_EQ(line, 4u);
  EXPECT_NE(what.find("model.depth"), std::string::npos) << what;
  EXPECT_NE(what.find("run.cfg"), std::string::npos) << what;
}

TEST(Config, TypeMismatchesAreRejected) {
  for (const char* bad : {"train.epochs_per_phase=two", "plan.run_alignment=maybe",
                          "plan.divisors=2,x", "plan.task_grid=0:0,1", "train.momentum=1.5",
                          "generator.num_keypoints=1", "nonsense"}) {
    ConfigBuilder b;
    const auto what = parse_error_of([&] {
      b.apply_override(bad);
      b.build();
    });
    EXPECT_FALSE(what.empty()) << bad;
  }
}

TEST(Config, ListsAndGridsParse) {
  ConfigBuilder b;
  b.apply_text(
      "plan.divisors = 4, 8\n"
      "plan.task_grid = 0:0, 1:1\n"
      "plan.task_inits = Distill\n"
      "plan.verification_softmax = true\n"
      "teacher.hidden_widths = 32,16\n"
      "run.out = results\n");
  const auto cfg = b.build();
  EXPECT_EQ(cfg.plan.divisors, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(cfg.plan.task_grid, (std::vector<std::pair<double, double>>{{0, 0}, {1, 1}}));
  EXPECT_EQ(cfg.plan.task_inits, (std::vector<InitMode>{InitMode::Distill}));
  EXPECT_EQ(cfg.plan.verification_softmax, (std::vector<bool>{true}));
  EXPECT_EQ(cfg.plan.teacher.hidden_widths, (std::vector<std::size_t>{32, 16}));
  EXPECT_EQ(cfg.out_dir, std::filesystem::path("results"));
}

TEST(Config, OverridesBeatTheFile) {
  const auto path = std::filesystem::temp_directory_path() / "distillforge_config_test.cfg";
  {
    std::ofstream out(path);
    out << "distill.lambda = 0.2\ntrain.batch_cls = 16\n";
  }
  ConfigBuilder b;
  b.apply_file(path);
  b.apply_override("train.batch_cls=8");
  const auto cfg = b.build();
  EXPECT_EQ(cfg.plan.distill.lambda_margin, 0.2);
  EXPECT_EQ(cfg.plan.training.batch_cls, 8u);
  std::filesystem::remove(path);
}

TEST(Config, RenderedConfigParsesBack) {
  ConfigBuilder b;
  b.set_seed(7);
  b.apply_override("plan.task_grid=0:0,0.5:1");
  b.apply_override("distill.tau=2.5");
  b.apply_override("generator.noise_std=0.3");
  const auto cfg = b.build();
  const auto text = render_config(cfg);

  ConfigBuilder again;
  again.apply_text(text);
  const auto back = again.build();
  EXPECT_EQ(render_config(back), text);
  EXPECT_EQ(back.plan.task_grid, cfg.plan.task_grid);
  EXPECT_EQ(back.plan.generator, cfg.plan.generator);
}

TEST(Config, EveryKeyIsDocumentedAndRendered) {
  const auto text = render_config(ConfigBuilder{}.build());
  std::set<std::string> names;
  for (const auto& k : config_keys()) {
    EXPECT_FALSE(k.description.empty()) << k.name;
    EXPECT_TRUE(names.insert(k.name).second) << "duplicate " << k.name;
    EXPECT_NE(text.find(k.name + " = "), std::string::npos) << k.name;
  }
  EXPECT_TRUE(names.contains("distill.tau"));
}
