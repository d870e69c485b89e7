// autoprotonet: train, evaluate, serve, and generate synthetic data.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "autoprotonet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsage = 2;

constexpr const char* kConfigEnv = "AUTOPROTONET_CONFIG";

apn::Resolution parse_resolution(const std::string& text) {
  const auto x = text.find_first_of("xX,");
  try {
    if (x == std::string::npos) {
      const int s = std::stoi(text);
      return {s, s};
    }
    return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
  } catch (const std::exception&) {
    throw apn::InvalidArgument("resolution must look like 32 or 84x84, got '" + text + "'");
  }
}

// Where images come from: a class-per-directory tree (optionally with a split
// manifest) or the procedural shapes set.
struct DataOptions {
  std::string data_dir;
  std::string manifest;
  bool synthetic = false;
  int synthetic_classes = 30;
  int synthetic_images = 50;
  std::vector<int> synthetic_split{20, 5, 5};
  std::uint64_t synthetic_seed = 0;

  void add_to(CLI::App& app) {
    app.add_option("--data", data_dir, "Dataset root: one sub-directory of images per class");
    app.add_option("--manifest", manifest, "JSON object mapping class name to meta-train, meta-val or meta-test");
    app.add_flag("--synthetic", synthetic, "Use the procedural shapes dataset instead of --data");
    app.add_option("--synthetic-classes", synthetic_classes, "Synthetic classes")->capture_default_str();
    app.add_option("--synthetic-images", synthetic_images, "Synthetic images per class")->capture_default_str();
    app.add_option("--synthetic-split", synthetic_split, "Synthetic train,val,test class counts")
        ->expected(3)
        ->delimiter(',')
        ->capture_default_str();
    app.add_option("--synthetic-seed", synthetic_seed, "Synthetic dataset seed")->capture_default_str();
  }

  apn::SplitDatasets load(apn::Resolution res) const {
    if (synthetic == !data_dir.empty()) throw apn::InvalidArgument("give exactly one of --data or --synthetic");
    if (synthetic) {
      auto all = apn::generate_synthetic_dataset(synthetic_classes, synthetic_images, res, synthetic_seed);
      return apn::split_classes(std::move(all), synthetic_split[0], synthetic_split[1], synthetic_split[2]);
    }
    std::optional<fs::path> m;
    if (!manifest.empty()) m = manifest;
    return apn::load_directory_dataset(data_dir, res, m);
  }
};

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out = "run";
  bool quiet = false;
  DataOptions data;
  // Overrides keyed by TrainingConfig field name, as JSON values.
  json overrides = json::object();
};

template <class T>
void override_option(CLI::App& app, TrainArgs& args, const std::string& field, const std::string& help) {
  std::string dashed = field;
  for (auto& c : dashed) c = c == '_' ? '-' : c;
  std::string names = "--" + dashed;
  if (dashed != field) names += ",--" + field;
  app.add_option_function<T>(
      names, [&args, field](const T& v) { args.overrides[field] = v; }, help);
}

void add_train(CLI::App& root, TrainArgs& args, int& rc) {
  auto* app = root.add_subcommand("train", "Run a training recipe; writes checkpoints and an NDJSON log");
  app->add_option("--config", args.config,
                  std::string("JSON training config; ") + kConfigEnv + " is used when this is not given");
  app->add_option("--out", args.out, "Output directory for checkpoints and log")->capture_default_str();
  app->add_flag("--quiet", args.quiet, "Do not print progress");
  args.data.add_to(*app);

  override_option<std::string>(*app, args, "recipe",
                               "protonet | autoprotonet | autoencoder-pretrain | autoprotonet-from-pretrained");
  override_option<int>(*app, args, "epochs", "Training epochs");
  override_option<int>(*app, args, "episodes_per_epoch", "Episodes (or minibatches) per epoch");
  override_option<int>(*app, args, "way", "Classes per training episode");
  override_option<int>(*app, args, "shot", "Support images per class");
  override_option<int>(*app, args, "query_count", "Query images per class");
  override_option<double>(*app, args, "lambda", "Reconstruction loss weight");
  override_option<double>(*app, args, "learning_rate", "Base learning rate");
  override_option<double>(*app, args, "momentum", "SGD momentum");
  override_option<double>(*app, args, "weight_decay", "L2 weight decay");
  override_option<int>(*app, args, "tasks_per_batch", "Episodes averaged per update");
  override_option<std::uint64_t>(*app, args, "seed", "Master seed");
  override_option<int>(*app, args, "channels_per_block", "Filters per conv block");
  override_option<int>(*app, args, "num_blocks", "Encoder blocks");
  override_option<std::string>(*app, args, "distance", "squared_euclidean | euclidean");
  override_option<int>(*app, args, "batch_size", "Autoencoder minibatch size");
  override_option<int>(*app, args, "validation_episodes", "Meta-validation episodes per epoch (0 disables)");
  override_option<int>(*app, args, "validation_way", "Meta-validation way");
  override_option<int>(*app, args, "validation_shot", "Meta-validation shot");
  override_option<int>(*app, args, "validation_query_count", "Meta-validation queries per class");
  override_option<int>(*app, args, "validation_images", "Images for autoencoder validation MSE");
  override_option<std::string>(*app, args, "initial_checkpoint", "Starting weights");
  app->add_option_function<std::string>(
      "--resolution",
      [&args](const std::string& v) {
        const auto r = parse_resolution(v);
        args.overrides["resolution"] = {r.height, r.width};
      },
      "Input resolution, e.g. 32 or 84x84");
  app->add_option_function<std::string>(
      "--lr-schedule,--lr_schedule",
      [&args](const std::string& v) {
        auto j = json::parse(v, nullptr, false);
        if (j.is_discarded()) throw CLI::ValidationError("--lr-schedule", "must be JSON");
        args.overrides["lr_schedule"] = j;
      },
      R"(JSON: [[epoch, rate], ...] or {"decay_factor": f, "every_epochs": n})");

  app->callback([&] {
    json j = json::object();
    std::string path = args.config;
    if (path.empty()) {
      if (const char* env = std::getenv(kConfigEnv); env && *env) path = env;
    }
    if (!path.empty()) {
      std::ifstream f(path);
      if (!f) throw apn::InvalidArgument("cannot read config '" + path + "'");
      j = json::parse(f, nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw apn::InvalidArgument("config '" + path + "' is not a JSON object");
    }
    for (const auto& [k, v] : args.overrides.items()) j[k] = v;
    const auto cfg = apn::training_config_from_json(j);
    const auto data = args.data.load(cfg.resolution);

    fs::create_directories(args.out);
    const fs::path out = args.out;
    apn::write_file_atomic(out / "config.json", apn::to_json(cfg).dump(2) + "\n");
    std::ofstream log(out / "log.ndjson");
    if (!log) throw apn::IoError("cannot write '" + (out / "log.ndjson").string() + "'");

    apn::TrainingOptions opts;
    opts.checkpoint_dir = out;
    opts.log_stream = &log;
    if (!args.quiet) {
      opts.on_epoch = [](const apn::EpochRecord& r) {
        std::cerr << (r.epoch < 0 ? std::string("baseline") : "epoch " + std::to_string(r.epoch)) << "  lr "
                  << r.learning_rate;
        if (r.validation_accuracy) std::cerr << "  val acc " << 100.0 * *r.validation_accuracy << "%";
        if (r.validation_mse) std::cerr << "  val mse " << *r.validation_mse;
        std::cerr << '\n';
      };
    }
    try {
      const auto result = apn::train(data, cfg, opts);
      json meta = {{"recipe", apn::to_string(cfg.recipe)},
                   {"epoch", cfg.epochs - 1},
                   {"training_config", apn::to_json(cfg)}};
      apn::save_checkpoint(result.parameters, result.architecture, meta, out / "final.ckpt");
      if (!fs::exists(out / "best.ckpt")) fs::copy_file(out / "final.ckpt", out / "best.ckpt");
      if (!args.quiet) {
        std::cerr << "wrote " << (out / "final.ckpt").string();
        if (result.best_epoch) std::cerr << ", best epoch " << *result.best_epoch;
        std::cerr << '\n';
      }
    } catch (const apn::TrainingDiverged& e) {
      std::cerr << "error: " << e.what() << '\n';
      rc = kRuntimeFailure;
    }
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  DataOptions data;
  std::string split = "meta-test";
  int way = 5;
  int shot = 1;
  int query_count = 15;
  int episodes = 600;
  std::uint64_t seed = 0;
  std::string distance = "squared_euclidean";
  int threads = 1;
  bool with_reconstruction = false;
  std::string json_out;
  std::string csv_out;
  std::string panel_out;
};

void add_eval(CLI::App& root, EvalArgs& a) {
  auto* app = root.add_subcommand("eval", "Episodic evaluation of a checkpoint; prints JSON then a table");
  app->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
  a.data.add_to(*app);
  app->add_option("--split", a.split, "meta-train | meta-val | meta-test")->capture_default_str();
  app->add_option("--way", a.way)->capture_default_str();
  app->add_option("--shot", a.shot)->capture_default_str();
  app->add_option("--query-count,--query_count", a.query_count)->capture_default_str();
  app->add_option("--episodes", a.episodes)->capture_default_str();
  app->add_option("--seed", a.seed)->capture_default_str();
  app->add_option("--distance", a.distance)->capture_default_str();
  app->add_option("--threads", a.threads, "Worker threads (results do not depend on it)")->capture_default_str();
  app->add_flag("--with-reconstruction", a.with_reconstruction, "Also report mean reconstruction loss");
  app->add_option("--json", a.json_out, "Also write the report JSON here");
  app->add_option("--csv", a.csv_out, "Write per-episode accuracies as CSV");
  app->add_option("--panel", a.panel_out, "Write a support/prototype PNG panel for the first episode");

  app->callback([&] {
    auto ck = apn::load_checkpoint(a.checkpoint);
    const apn::Model<float> model(ck.architecture, std::move(ck.parameters));
    const auto data = a.data.load(ck.architecture.input_resolution);
    const auto& split = data.get(apn::split_from_string(a.split));
    const apn::EpisodeSpec spec{a.way, a.shot, a.query_count, std::nullopt};
    apn::EvaluationOptions opts;
    opts.distance = apn::distance_from_string(a.distance);
    opts.with_reconstruction = a.with_reconstruction;
    opts.threads = a.threads;
    const auto report = apn::evaluate_episodic(model, split, spec, a.episodes, a.seed, opts);
    const auto j = apn::to_json(report);
    std::cout << j.dump(2) << '\n' << apn::to_table(report);
    if (!a.json_out.empty()) apn::write_file_atomic(a.json_out, j.dump(2) + "\n");
    if (!a.csv_out.empty()) apn::write_file_atomic(a.csv_out, apn::to_csv(report));
    if (!a.panel_out.empty()) {
      apn::EpisodeSpec first = spec;
      first.seed = apn::derive_seed(a.seed, {0});
      const auto ep = apn::sample_episode(split, first);
      const auto adapted = apn::finetune(model, ep.support, ep.class_names, opts.distance);
      apn::write_png(apn::prototype_panel(model, adapted.prototypes, ep.support), a.panel_out);
    }
  });
}

// ---------------------------------------------------------------------------
// serve

volatile std::sig_atomic_t g_stop = 0;

void add_serve(CLI::App& root, apn::ServiceConfig& c) {
  auto* app = root.add_subcommand("serve", "HTTP service for refinement sessions");
  app->add_option("--host", c.host)->capture_default_str();
  app->add_option("--port", c.port, "0 picks a free port")->capture_default_str();
  app->add_option("--model-dir,--model_dir", c.model_dir, "Directory of <model_id>.ckpt files")->capture_default_str();
  app->add_option("--session-dir,--session_dir", c.session_dir, "Session store")->capture_default_str();
  app->add_option("--max-sessions,--max_sessions", c.max_sessions)->capture_default_str();
  app->add_option("--cors", c.cors_allowlist, "Allowed origin (repeatable; * allows all)");

  app->callback([&] {
    apn::Service service(c);
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    const int port = service.start();
    std::cout << "listening on " << c.host << ":" << port << " (" << service.sessions().size()
              << " sessions recovered)" << std::endl;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    service.stop();
  });
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out;
  int classes = 30;
  int images = 50;
  std::string resolution = "32";
  std::uint64_t seed = 0;
  std::vector<int> split{20, 5, 5};
};

void add_synth(CLI::App& root, SynthArgs& a) {
  auto* app = root.add_subcommand("synth", "Write the procedural shapes dataset as PNGs plus a split manifest");
  app->add_option("--out", a.out, "Output directory")->required();
  app->add_option("--classes", a.classes)->capture_default_str();
  app->add_option("--images", a.images, "Images per class")->capture_default_str();
  app->add_option("--resolution", a.resolution)->capture_default_str();
  app->add_option("--seed", a.seed)->capture_default_str();
  app->add_option("--split", a.split, "train,val,test class counts")->expected(3)->delimiter(',')->capture_default_str();

  app->callback([&] {
    const auto res = parse_resolution(a.resolution);
    const auto all = apn::generate_synthetic_dataset(a.classes, a.images, res, a.seed);
    if (a.split[0] + a.split[1] + a.split[2] > a.classes) throw apn::InvalidArgument("split counts exceed --classes");
    json manifest = json::object();
    const fs::path out = a.out;
    for (int c = 0; c < static_cast<int>(all.classes.size()); ++c) {
      const auto& cls = all.classes[static_cast<std::size_t>(c)];
      const apn::Split s = c < a.split[0] ? apn::Split::MetaTrain
                           : c < a.split[0] + a.split[1] ? apn::Split::MetaVal
                                                         : apn::Split::MetaTest;
      if (c >= a.split[0] + a.split[1] + a.split[2]) continue;
      manifest[cls.name] = apn::to_string(s);
      fs::create_directories(out / cls.name);
      for (std::size_t i = 0; i < cls.images.size(); ++i) {
        char file[32];
        std::snprintf(file, sizeof file, "%04zu.png", i);
        apn::write_png(cls.images[i], out / cls.name / file);
      }
    }
    apn::write_file_atomic(out / "splits.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << manifest.size() << " classes to " << out.string() << '\n';
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AutoProtoNet: few-shot learning with an interpretable prototype space"};
  app.require_subcommand(1);
  int rc = 0;
  TrainArgs train_args;
  EvalArgs eval_args;
  apn::ServiceConfig serve_config;
  SynthArgs synth_args;
  add_train(app, train_args, rc);
  add_eval(app, eval_args);
  add_serve(app, serve_config);
  add_synth(app, synth_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  } catch (const apn::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const apn::ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return rc;
}
