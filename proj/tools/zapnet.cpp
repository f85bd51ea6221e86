#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "zapnet/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"zapnet: weight-resampling transfer experiments"};
  app.require_subcommand(1);
  std::string config;
  zapnet::Overrides ov;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t replicates = 0;

  std::vector<CLI::App*> subs;
  for (const char* name : {"pretrain", "transfer", "zapdiv", "gradcheck", "sweep"}) {
    CLI::App* s = app.add_subcommand(name);
    s->add_option("--config", config, "JSON run configuration")->required();
    s->add_option("--out", out, "output directory (overrides output_dir)");
    s->add_option("--seed", seed, "master seed (overrides seed)");
    s->add_option("--lr", ov.lrs, "learning rate(s)")->expected(1, -1);
    s->add_option("--replicates", replicates, "number of replicates");
    subs.push_back(s);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--out")) ov.out = out;
  if (chosen->count("--seed")) ov.seed = seed;
  if (chosen->count("--replicates")) ov.replicates = replicates;
  try {
    const auto cmd = zapnet::parse_subcommand(chosen->get_name());
    zapnet::RunConfig cfg = zapnet::parse_config(config);
    zapnet::apply_overrides(cfg, cmd, ov);
    return zapnet::run(cmd, cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return zapnet::exit_code(e);
  }
}
