// spectral_forge: spectral comparison, fingerprinting and surgery of
// transformer checkpoints.
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "spectral_forge/cli.hpp"
#include "spectral_forge/reports.hpp"

namespace sf = spectral_forge;

int main(int argc, char** argv) {
  CLI::App app{"Spectral analysis and surgery for transformer checkpoints"};
  app.set_version_flag("--version", std::string(sf::kToolVersion));
  app.require_subcommand(1);

  sf::RunConfig cfg;
  std::string base, post, donor, out = ".", plan, fixture, model_config, inputs;
  std::uint64_t seed = 0;
  bool quiet = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--schema", cfg.schema, "Naming schema: 'standard' or a JSON file");
    sub->add_option("--out", out, "Output directory (created if absent)");
    sub->add_option("--seed", seed, "Random seed");
    sub->add_flag("--quiet", quiet, "Suppress progress on stderr");
  };
  auto pair_opts = [&](CLI::App* sub) {
    sub->add_option("--base", base, "Base checkpoint")->required();
    sub->add_option("--post", post, "Post-trained checkpoint")->required();
    sub->add_option("--threshold", cfg.threshold, "Fingerprint NF threshold (calibrated when omitted)");
  };

  auto* decompose = app.add_subcommand("decompose", "Reduced SVD of every classified matrix");
  decompose->add_option("--base", base, "Checkpoint")->required();
  common(decompose);

  auto* compare = app.add_subcommand("compare", "Scaling, similarity and NF reports for a checkpoint pair");
  pair_opts(compare);
  compare->add_option("--top-fraction", cfg.top_fraction, "Fraction of leading singular values")->capture_default_str();
  compare->add_option("--quantum", cfg.quantum, "Rounding quantum for alpha'")->capture_default_str();
  compare->add_option("--heatmap-dims", cfg.heatmap_dims, "Leading dims shown in sim/I_orth heatmaps")
      ->capture_default_str();
  common(compare);

  auto* fingerprint = app.add_subcommand("fingerprint", "Lineage verdict for a checkpoint pair");
  pair_opts(fingerprint);
  common(fingerprint);

  auto* surgery = app.add_subcommand("surgery", "Apply a surgery plan");
  surgery->add_option("--plan", plan, "Plan JSON")->required();
  surgery->add_option("--post", post, "Recipient checkpoint (overrides plan)");
  surgery->add_option("--donor", donor, "Donor checkpoint (overrides plan)");
  surgery->add_option("--base", base, "Donor checkpoint when --donor is absent");
  surgery->add_option("--top-fraction", cfg.top_fraction, "Used by alpha_prime \"auto\"");
  surgery->add_option("--quantum", cfg.quantum, "Used by alpha_prime \"auto\"");
  common(surgery);

  auto model_opts = [&](CLI::App* sub) {
    sub->add_option("--config", model_config, "Model config JSON")->required();
    sub->add_option("--base", base, "Model checkpoint")->required();
    sub->add_option("--post", post, "Second model checkpoint");
    sub->add_option("--inputs", inputs, "JSON array of token-id arrays (random when omitted)");
    sub->add_flag("--no-rope", cfg.no_rope, "Disable rotary embeddings");
  };
  auto* entropy = app.add_subcommand("entropy", "Per-layer attention entropy");
  model_opts(entropy);
  entropy->add_option("--rows", cfg.entropy_rows, "final | averaged")->capture_default_str();
  entropy->add_option("--temperature", cfg.temperature_alphas, "Alphas for the QK temperature check");
  common(entropy);

  auto* ckac = app.add_subcommand("cka", "Layer-by-layer CKA heatmap between two models");
  model_opts(ckac);
  ckac->add_option("--mode", cfg.cka_mode, "batch-linear | mean-cos2")->capture_default_str();
  ckac->add_option("--pooling", cfg.pooling, "mean | last")->capture_default_str();
  common(ckac);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic checkpoint pair with ground truth");
  synth->add_option("--fixture", fixture, "Fixture spec JSON");
  synth->add_option("--config", model_config, "Model config JSON (overrides the fixture's)");
  common(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    nlohmann::json err = {{"error", {{"kind", "usage"}, {"message", e.what()}}}};
    std::cout << err.dump() << "\n";
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  cfg.command = *sf::parse_command(sub->get_name());
  cfg.base = base;
  cfg.post = post;
  cfg.donor = donor;
  cfg.out = out;
  cfg.plan = plan;
  cfg.fixture = fixture;
  cfg.model_config = model_config;
  cfg.inputs = inputs;
  if (sub->count("--seed")) cfg.seed = seed;
  cfg.progress = !quiet;
  if (const char* cache = std::getenv("SPECTRAL_FORGE_CACHE"); cache && *cache) cfg.cache_dir = cache;

  const auto result = sf::run(cfg, std::cerr);
  if (result.exit_code != 0) {
    std::cout << result.error_json << "\n";
    return result.exit_code;
  }
  for (const auto& f : result.files) std::cout << f.string() << "\n";
  return 0;
}
