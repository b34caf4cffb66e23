// certdg: generate data, train, certify, attack, evaluate, report.
// Exit codes: 0 ok, 1 domain error, 2 usage or configuration error.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "certdg/commands.hpp"

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
};

certdg::RunConfig resolve(const Globals& g) {
  certdg::RunConfig rc =
      g.config.empty() ? certdg::parse_run_config(nlohmann::json::object()) : certdg::load_run_config(g.config);
  if (g.seed) rc.seed = *g.seed;
  if (g.out) rc.out = *g.out;
  if (g.threads) {
    if (*g.threads < 1) throw certdg::UsageError("--threads must be >= 1");
    rc.threads = *g.threads;
  }
  certdg::propagate(rc);
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"certified worst-case loss and distributionally robust domain generalization"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "run configuration (JSON)");
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--out", g.out, "override the output directory");
  app.add_option("--threads", g.threads, "worker threads for certification");

  auto* gen = app.add_subcommand("gen-data", "write one CSV per domain plus a manifest");
  auto* train = app.add_subcommand("train", "train a model on the source domains");
  std::string resume;
  std::optional<int> epochs;
  train->add_option("--resume", resume, "continue from a saved train_state.json");
  train->add_option("--epochs", epochs, "override the configured epoch count");

  std::string checkpoint;
  auto* cert = app.add_subcommand("certify", "certified worst-case loss sweep");
  auto* attack = app.add_subcommand("attack", "PGD tables in representation and input space");
  auto* eval = app.add_subcommand("evaluate", "loss and accuracy per domain with normalized distances");
  for (auto* sc : {cert, attack, eval}) sc->add_option("--checkpoint", checkpoint, "model file (default <out>/model.json)");

  auto* report = app.add_subcommand("report", "SVG overlay and Markdown summary");
  std::string sweep, evalp;
  report->add_option("--sweep", sweep, "sweep CSV (default <out>/certify_sweep.csv)");
  report->add_option("--eval", evalp, "evaluation CSV (default <out>/evaluate.csv if present)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    certdg::RunConfig rc = resolve(g);
    if (epochs) {
      if (*epochs < 0) throw certdg::UsageError("--epochs must be >= 0");
      rc.train.train.epochs = *epochs;
    }
    const certdg::RunPaths P{rc.out};
    const std::filesystem::path ck = checkpoint.empty() ? P.model() : std::filesystem::path(checkpoint);
    auto warn = [](const std::string& m) { std::cerr << "warning: " << m << "\n"; };

    if (*gen) {
      certdg::cmd_gen_data(rc);
      std::cerr << "wrote " << P.data().string() << "\n";
    } else if (*train) {
      std::optional<std::filesystem::path> r;
      if (!resume.empty()) r = resume;
      const auto st = certdg::cmd_train(rc, r, warn);
      if (!st.log.empty())
        std::cerr << "epoch " << st.log.back().epoch << " source_loss " << st.log.back().source_loss << "\n";
    } else if (*cert) {
      const auto o = certdg::cmd_certify(rc, ck);
      std::cerr << "rho_adv " << o.rho_adv << ", unit condition "
                << (o.rho_adv * o.rho_adv >= o.mean_sq_margin ? "holds" : "does not hold") << "\n";
      for (const auto& c : o.certificates)
        if (!c.error.empty()) warn(std::string(certdg::to_string(c.family)) + ": " + c.error);
    } else if (*attack) {
      certdg::cmd_attack(rc, ck);
    } else if (*eval) {
      certdg::cmd_evaluate(rc, ck);
    } else if (*report) {
      std::optional<std::filesystem::path> e;
      if (!evalp.empty()) e = evalp;
      else if (std::filesystem::exists(P.evaluate())) e = P.evaluate();
      certdg::cmd_report(rc, sweep.empty() ? P.sweep() : std::filesystem::path(sweep), e);
    }
  } catch (const certdg::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const certdg::Error& e) {
    std::cerr << "error (" << certdg::to_string(e.kind()) << "): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
