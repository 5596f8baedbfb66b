#pragma once

// Command-line front end: finetune, generate, evaluate, serve, export-toy.
//
// Exit codes: 0 success, 1 runtime failure (message names the stage),
// 2 argument error (message plus usage).

#include <csignal>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dcc/evaluation.hpp"
#include "dcc/service.hpp"

namespace dcc::cli {

struct StageError : std::runtime_error {
  StageError(const std::string& stage, const std::string& what) : std::runtime_error(stage + ": " + what) {}
};

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

namespace detail {
inline volatile std::sig_atomic_t g_interrupted = 0;
inline void on_signal(int) { g_interrupted = 1; }
}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Single-image identity/style personalisation and sketch-conditioned caricature generation"};
  app.name("dcc");
  app.require_subcommand(1);
  app.fallthrough();
  std::string backbone = "toy";
  app.add_option("--backbone", backbone, "\"toy\", \"toy:<seed>\", a toy-ldm .safetensors export or an SD v1.5 directory")
      ->envname("DCC_BACKBONE");
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress");

  // finetune
  auto* ft = app.add_subcommand("finetune", "Learn an identity or style concept from one image");
  std::string ft_image, ft_superclass, ft_kind, ft_out;
  std::optional<std::string> ft_region;
  TrainConfig train;
  ft->add_option("--image", ft_image, "Reference image (PNG/JPEG)")->required()->check(CLI::ExistingFile);
  ft->add_option("--superclass", ft_superclass, "Single-token superclass word, e.g. man, woman, comics")->required();
  ft->add_option("--kind", ft_kind, "Concept kind")->required()->check(CLI::IsMember({"id", "identity", "style"}));
  ft->add_option("--region-mask", ft_region, "Face/background map aligned to the image (white = face)")
      ->check(CLI::ExistingFile);
  ft->add_option("--steps", train.steps, "Optimiser steps (default 40 identity / 100 style)")->check(CLI::PositiveNumber);
  ft->add_option("--batch", train.batch_size, "Noise/mask draws per step")->capture_default_str()->check(CLI::PositiveNumber);
  ft->add_option("--lambda1", train.lambda_embedding, "Weight of the embedding regulariser")->capture_default_str()->check(CLI::NonNegativeNumber);
  ft->add_option("--lambda2", train.lambda_encoding, "Weight of the encoding regulariser")->capture_default_str()->check(CLI::NonNegativeNumber);
  ft->add_option("--seed", train.seed, "Random seed")->capture_default_str();
  ft->add_option("--out", ft_out, "Output concept file (.dcc)")->required();

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a caricature from trained concepts");
  std::string gen_id, gen_out;
  std::optional<std::string> gen_style, gen_sketch, gen_prompt;
  std::optional<double> gen_scale, gen_style_scale;
  diffusion::SampleConfig sampling;
  std::uint64_t gen_seed = 0;
  gen->add_option("--id", gen_id, "Identity concept (.dcc)")->required()->check(CLI::ExistingFile);
  gen->add_option("--style", gen_style, "Style concept (.dcc)")->check(CLI::ExistingFile);
  gen->add_option("--sketch", gen_sketch, "Sketch PNG, white strokes on black")->check(CLI::ExistingFile);
  gen->add_option("--scale", gen_scale, "Identity scale s (default: the concept's, 1.2)")->check(CLI::NonNegativeNumber);
  gen->add_option("--style-scale", gen_style_scale, "Style scale (default: the concept's)")->check(CLI::NonNegativeNumber);
  gen->add_option("--steps", sampling.steps, "Sampling steps")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--cfg", sampling.guidance, "Classifier-free guidance weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "Noise seed")->capture_default_str();
  gen->add_option("--prompt", gen_prompt, "Prompt template with [id*] / [style*] placeholders");
  gen->add_option("--negative-prompt", sampling.negative_prompt, "Unconditional prompt");
  gen->add_option("--out", gen_out, "Output PNG")->required();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score caricatures for identity, style and shape fidelity");
  std::string ev_manifest, ev_out;
  std::optional<std::string> ev_text;
  std::uint64_t ev_seed = 0;
  ev->add_option("--manifest", ev_manifest, "JSON manifest of evaluation tuples")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "JSON report")->required();
  ev->add_option("--text", ev_text, "Also write an aligned text table here");
  ev->add_option("--embedder-seed", ev_seed, "Seed of the projection embedder")->capture_default_str();

  // serve
  auto* sv = app.add_subcommand("serve", "Run the HTTP job service");
  std::optional<std::string> sv_config, sv_host, sv_storage;
  std::optional<int> sv_port;
  sv->add_option("--config", sv_config, "JSON config file")->check(CLI::ExistingFile);
  sv->add_option("--host", sv_host, "Bind address");
  sv->add_option("--port", sv_port, "Port")->check(CLI::Range(0, 65535));
  sv->add_option("--storage", sv_storage, "Storage root");

  // export-toy
  auto* ex = app.add_subcommand("export-toy", "Write the toy backbone weights as safetensors");
  std::string ex_out;
  std::uint64_t ex_seed = 0;
  ex->add_option("--out", ex_out, "Output .safetensors")->required();
  ex->add_option("--seed", ex_seed, "Weight seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    err << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }
  if (!verbose) log::set_sink([](log::Level l, std::string_view m) {
    if (l >= log::Level::warn) std::cerr << (l == log::Level::warn ? "warning: " : "error: ") << m << "\n";
  });

  try {
    if (*ex) {
      ToyBackboneSpec spec;
      spec.seed = ex_seed;
      ToyBackbone b(spec);
      stage("writing weights", [&] { export_toy_backbone(b, ex_out); });
      out << ex_out << " (" << b.info().signature() << ")\n";
      return 0;
    }

    if (*ev) {
      const auto tuples = stage("reading manifest", [&] { return eval::load_manifest(ev_manifest); });
      eval::RandomProjectionEmbedder embedder(ev_seed);
      const auto report = stage("scoring", [&] { return eval::evaluate_suite(tuples, embedder); });
      stage("writing report", [&] {
        write_file_atomic(ev_out, eval::report_to_json(report).dump(2));
        if (ev_text) write_file_atomic(*ev_text, eval::report_to_text(report));
      });
      out << eval::report_to_text(report);
      return report.failed == 0 ? 0 : 1;
    }

    if (*sv) {
      auto config = stage("loading config", [&] {
        auto c = service::Config::load(sv_config ? std::optional<std::filesystem::path>(*sv_config) : std::nullopt);
        if (app.get_option("--backbone")->count() > 0) c.backbone = backbone;
        if (sv_host) c.host = *sv_host;
        if (sv_port) c.port = *sv_port;
        if (sv_storage) c.storage_root = *sv_storage;
        return c;
      });
      auto bb = stage("loading backbone", [&] { return open_backbone(config.backbone); });
      service::Service svc(config, bb);
      std::signal(SIGINT, detail::on_signal);
      std::signal(SIGTERM, detail::on_signal);
      std::atomic<bool> done{false};
      std::thread watcher([&] {
        while (!done && !detail::g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        svc.stop_listening();
      });
      out << "serving on http://" << config.host << ":" << config.port << " (storage " << config.storage_root.string()
          << ", backbone " << bb->info().signature() << ")" << std::endl;
      try {
        stage("serving", [&] { svc.listen(config.host, config.port); });
      } catch (...) {
        done = true;
        watcher.join();
        throw;
      }
      done = true;
      watcher.join();
      return 0;
    }

    auto bb = stage("loading backbone", [&] { return open_backbone(backbone); });

    if (*ft) {
      const auto kind = concept_kind_from_string(ft_kind);
      const Image image = stage("reading image", [&] { return read_image(ft_image); });
      std::optional<Image> region;
      if (ft_region) region = stage("reading region mask", [&] { return read_image(*ft_region); });
      const auto concept_ = stage("fine-tuning", [&] {
        return finetune(image, ft_superclass, kind, *bb, train, region ? &*region : nullptr,
                        [&](int step, int total, const LossTerms& l) {
                          log::info("step " + std::to_string(step) + "/" + std::to_string(total) + " " + l.describe());
                        });
      });
      stage("writing concept", [&] { save_concept(concept_, ft_out); });
      out << ft_out << ": " << to_string(kind) << " concept, " << concept_.parameter_count() << " parameters, masked loss "
          << concept_.training.value("initial_masked_loss", 0.0) << " -> " << concept_.training.value("final_masked_loss", 0.0)
          << "\n";
      return 0;
    }

    if (*gen) {
      const Concept id = stage("loading identity concept", [&] { return load_concept(gen_id, *bb); });
      std::optional<Concept> style;
      if (gen_style) style = stage("loading style concept", [&] { return load_concept(*gen_style, *bb); });
      GenerateRequest req;
      req.identity = &id;
      req.style = style ? &*style : nullptr;
      req.identity_scale = gen_scale;
      req.style_scale = gen_style_scale;
      req.sampling = sampling;
      req.seed = gen_seed;
      req.prompt = gen_prompt.value_or("");
      if (gen_sketch) req.sketch = stage("reading sketch", [&] { return read_image(*gen_sketch); });
      const auto result = stage("sampling", [&] { return generate(*bb, req); });
      stage("writing image", [&] { write_png(gen_out, result.image); });
      out << gen_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace dcc::cli
