#include <string>

#include <CLI11.hpp>

#include "denseplan/cli.hpp"

namespace {

using denseplan::RunConfig;

void add_common_flags(CLI::App* app, RunConfig& rc) {
  app->add_option("--preset", rc.preset,
                  "model preset (desk, tiny, bc-160-k12, paper-264-k48, "
                  "paper-264-k32, paper-232-k48)");
  app->add_option("--config", rc.config_path,
                  "model config file (key=value lines)");
  app->add_option("--strategy", rc.strategy,
                  "execution strategy: naive, shared-grad, shared-all");
  app->add_option("--epochs", rc.epochs, "training epochs");
  app->add_option("--batch", rc.batch, "batch size");
  app->add_option("--seed", rc.seed, "master seed");
  app->add_option("--dtype", rc.dtype, "element type: f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  app->add_option("--data", rc.data, "data source: synth or cifar10:<dir>");
  app->add_option("--out", rc.out, "output CSV path");
  app->add_option("--schedule", rc.schedule,
                  "learning-rate schedule: cosine or step");
}

// Dispatches a command template over the selected element type.
template <typename F32Fn, typename F64Fn>
int by_dtype(const RunConfig& rc, F32Fn f32, F64Fn f64) {
  if (rc.dtype == "f32") return f32(rc);
  return f64(rc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"denseplan: dense-network training with exact feature-memory "
               "accounting under three execution strategies"};
  app.require_subcommand(1);

  RunConfig rc;
  CLI::App* train = app.add_subcommand("train", "train a model, emit per-epoch CSV");
  CLI::App* profile =
      app.add_subcommand("profile-mem", "measured vs predicted feature peaks over a depth grid");
  profile->add_option("--depth-grid", rc.depth_grid,
                      "comma separated block depths")
      ->delimiter(',');
  CLI::App* bench =
      app.add_subcommand("bench", "step timing per strategy and conv contiguity benchmark");
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference checks per op kind and full model");
  gradcheck->add_flag("--corrupt-bn", rc.corrupt_bn)->group("");  // hidden fixture
  CLI::App* compare =
      app.add_subcommand("compare", "one step under each strategy, assert bitwise equality");
  for (CLI::App* sub : {train, profile, bench, gradcheck, compare}) {
    add_common_flags(sub, rc);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // all usage errors map to the configuration exit code
  }

  return denseplan::run_command([&]() -> int {
    if (app.got_subcommand(train)) {
      return by_dtype(rc, denseplan::cmd_train<float>,
                      denseplan::cmd_train<double>);
    }
    if (app.got_subcommand(profile)) {
      return by_dtype(rc, denseplan::cmd_profile_mem<float>,
                      denseplan::cmd_profile_mem<double>);
    }
    if (app.got_subcommand(bench)) {
      return by_dtype(rc, denseplan::cmd_bench<float>,
                      denseplan::cmd_bench<double>);
    }
    if (app.got_subcommand(gradcheck)) {
      return by_dtype(rc, denseplan::cmd_gradcheck<float>,
                      denseplan::cmd_gradcheck<double>);
    }
    return by_dtype(rc, denseplan::cmd_compare<float>,
                    denseplan::cmd_compare<double>);
  });
}
