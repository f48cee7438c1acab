#include <CLI11.hpp>

#include <iostream>

#include "tstcnn/harness.hpp"

using namespace tstcnn;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "key=value run configuration file");
  cmd->add_option("--set", c.sets, "override one key, e.g. --set epochs=10")->take_all();
  cmd->add_option("--seed", c.seed, "run seed (overrides the config)");
}

harness::RunConfig resolve(const Common& c) {
  auto cfg = c.config_path.empty() ? harness::RunConfig{} : harness::RunConfig::load(c.config_path);
  for (const auto& s : c.sets) cfg.set_assignment(s);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Twin spatio-temporal CNN with 3D residual attention blocks"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, masks_opts, compare_opts, data_opts;
  auto* train = app.add_subcommand("train", "train a model, writing metrics and checkpoints");
  auto* eval = app.add_subcommand("eval", "accuracy and confusion matrix of a checkpoint");
  auto* masks = app.add_subcommand("export-masks", "dump soft masks of every attention block");
  auto* compare = app.add_subcommand("compare", "epochs-to-threshold of two block modes over seeds");
  auto* gen = app.add_subcommand("gen-data", "write the synthetic corpus and its manifest");
  add_common(train, train_opts);
  add_common(eval, eval_opts);
  add_common(masks, masks_opts);
  add_common(compare, compare_opts);
  add_common(gen, data_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*train) {
      auto cfg = resolve(train_opts);
      harness::train(cfg);
    } else if (*eval) {
      harness::cmd_eval(resolve(eval_opts));
    } else if (*masks) {
      harness::cmd_export_masks(resolve(masks_opts));
    } else if (*compare) {
      harness::cmd_compare(resolve(compare_opts));
    } else if (*gen) {
      harness::cmd_gen_data(resolve(data_opts));
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
