#include "magma/cli.hpp"

#include <CLI11.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "magma/binary_io.hpp"
#include "magma/checkpoint.hpp"
#include "magma/config.hpp"
#include "magma/error.hpp"
#include "magma/train.hpp"

namespace magma {

namespace {

namespace fs = std::filesystem;

struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.config, "flat key=value configuration file");
  cmd->add_option("--set", f.sets, "override one configuration key (key=value), repeatable");
  cmd->add_option("--seed", f.seed, "run seed (train.seed)");
}

// File entries, then --set overrides, then dedicated flags.
RunConfig resolve(const ConfigFlags& f, const ConfigEntries& flag_entries) {
  ConfigEntries entries;
  if (!f.config.empty()) entries = parse_config_text(binio::read_file(f.config));
  for (const auto& kv : f.sets) {
    auto [k, v] = parse_override(kv);
    entries[k] = v;
  }
  for (const auto& [k, v] : flag_entries) entries[k] = v;
  if (f.seed) entries["train.seed"] = std::to_string(*f.seed);
  RunConfig cfg = build_config(entries);
  cfg.validate();
  return cfg;
}

Dataset load_checked(const std::string& path, const RunConfig& cfg, const char* key) {
  if (path.empty()) throw ConfigError(std::string(key) + " is required");
  Dataset ds = load_dataset(path);
  if (ds.channels != cfg.vit.channels) {
    throw ValidationError(path + " has " + std::to_string(ds.channels) + " channels, model.channels is " +
                          std::to_string(cfg.vit.channels));
  }
  return ds;
}

VitMae load_model(const RunConfig& cfg, const std::string& checkpoint) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  VitMae model(cfg.vit, 0);
  model.load(load_checkpoint(checkpoint));
  return model;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

nlohmann::ordered_json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

std::vector<std::size_t> parse_indices(const std::string& spec, std::size_t n) {
  std::vector<std::size_t> out;
  std::stringstream ss(spec);
  std::string part;
  auto num = [&](const std::string& s) -> std::size_t {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
      throw ValidationError("--images: bad index '" + s + "'");
    }
    if (v >= n) throw ValidationError("--images: index " + s + " outside the dataset (" + std::to_string(n) + " images)");
    return v;
  };
  while (std::getline(ss, part, ',')) {
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      out.push_back(num(part));
      continue;
    }
    const std::size_t a = num(part.substr(0, dash)), b = num(part.substr(dash + 1));
    if (a > b) throw ValidationError("--images: empty range " + part);
    for (std::size_t i = a; i <= b; ++i) out.push_back(i);
  }
  if (out.empty()) throw ValidationError("--images selects no image");
  return out;
}

void write_output(const fs::path& path, const std::string& bytes) { binio::write_file(path.string(), bytes); }

// ---------------------------------------------------------------- commands

struct GenDataFlags {
  SyntheticSpec spec;
  std::string out;
};

int cmd_gen_data(const GenDataFlags& f, std::ostream& out) {
  f.spec.validate();
  if (f.out.empty()) throw ConfigError("--out is required");
  const Dataset ds = generate_synthetic(f.spec);
  if (fs::path(f.out).has_parent_path()) fs::create_directories(fs::path(f.out).parent_path());
  save_dataset(f.out, ds);
  out << "wrote " << f.out << ": N=" << ds.size() << " shape=" << ds.channels << "x" << ds.height << "x" << ds.width
      << " classes=[";
  const auto hist = ds.class_histogram();
  for (std::size_t c = 0; c < hist.size(); ++c) out << (c ? "," : "") << hist[c];
  out << "]\n";
  return kExitOk;
}

struct PretrainFlags {
  ConfigFlags cfg;
  std::string out, train, test;
  std::optional<double> lambda;
  std::optional<int> e_st, e_dur;
};

int cmd_pretrain(const PretrainFlags& f, std::ostream& out) {
  ConfigEntries extra;
  if (f.e_st) extra["sched.e_st"] = std::to_string(*f.e_st);
  if (f.e_dur) extra["sched.e_dur"] = std::to_string(*f.e_dur);
  if (!f.train.empty()) extra["data.train"] = f.train;
  if (!f.test.empty()) extra["data.test"] = f.test;
  if (f.lambda) {
    // Exact decimal text of the flag, not a 6-digit rendering.
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", *f.lambda);
    extra["sched.lambda"] = buf;
  }
  RunConfig cfg = resolve(f.cfg, extra);
  if (f.out.empty()) throw ConfigError("--out is required");
  const Dataset train = load_checked(cfg.train_data, cfg, "data.train");
  std::optional<Dataset> test;
  if (cfg.train.probe_interval > 0) test = load_checked(cfg.test_data, cfg, "data.test");
  cfg.train.validate(train.size());
  if (!cfg.norm) cfg.norm = compute_norm_stats(train);
  cfg.augment.norm = *cfg.norm;
  cfg.train.out_dir = f.out;
  fs::create_directories(f.out);
  write_output(fs::path(f.out) / "resolved_config.txt", format_config(cfg));

  VitMae model(cfg.vit, model_init_seed(cfg.train.seed));
  PretrainInputs in;
  in.train = &train;
  in.heldout = test ? &*test : nullptr;
  in.augment = cfg.augment;
  const std::size_t epochs = cfg.train.epochs;
  pretrain(model, in, cfg.objective, cfg.train, [&](const EpochMetrics& m) {
    out << "epoch " << m.epoch + 1 << "/" << epochs << " loss " << fmt(m.loss.total) << " rec "
        << fmt(m.loss.reconstruction) << " reg " << fmt(m.loss.regularizer) << " lambda " << fmt(m.loss.effective_lambda);
    if (m.online_knn) out << " knn " << fmt(*m.online_knn);
    out << '\n';
  });
  out << "wrote " << (fs::path(f.out) / "final.mgwt").string() << '\n';
  return kExitOk;
}

struct EvalFlags {
  ConfigFlags cfg;
  std::string checkpoint, train, test, out;
  std::optional<std::size_t> k;
};

struct EvalSetup {
  RunConfig cfg;
  Features train, test;
};

EvalSetup prepare_eval(const EvalFlags& f) {
  ConfigEntries extra;
  if (!f.train.empty()) extra["data.train"] = f.train;
  if (!f.test.empty()) extra["data.test"] = f.test;
  if (f.k) extra["train.knn_k"] = std::to_string(*f.k);
  EvalSetup s{resolve(f.cfg, extra), {}, {}};
  const Dataset train = load_checked(s.cfg.train_data, s.cfg, "data.train");
  const Dataset test = load_checked(s.cfg.test_data, s.cfg, "data.test");
  const VitMae model = load_model(s.cfg, f.checkpoint);
  const NormStats norm = s.cfg.norm ? *s.cfg.norm : compute_norm_stats(train);
  s.train = extract_features(model, train, norm, s.cfg.feature);
  s.test = extract_features(model, test, norm, s.cfg.feature);
  return s;
}

int finish_report(const nlohmann::ordered_json& report, const std::string& path, std::ostream& out) {
  const std::string text = report.dump(2) + "\n";
  if (!path.empty()) binio::write_file(path, text);
  out << text;
  return kExitOk;
}

int cmd_knn(const EvalFlags& f, std::ostream& out) {
  if (f.k && *f.k == 0) throw ValidationError("--k must be positive");
  const EvalSetup s = prepare_eval(f);
  const std::size_t k = s.cfg.train.knn_k;
  if (k > s.train.rows) {
    throw ValidationError("--k " + std::to_string(k) + " exceeds the training set size " + std::to_string(s.train.rows));
  }
  nlohmann::ordered_json r;
  r["command"] = "knn";
  r["checkpoint"] = f.checkpoint;
  r["feature"] = to_string(s.cfg.feature);
  r["k"] = k;
  r["accuracy"] = knn_accuracy(s.train, s.test, k);
  r["dbi"] = finite_or_null(davies_bouldin(s.test));
  r["train_size"] = s.train.rows;
  r["test_size"] = s.test.rows;
  return finish_report(r, f.out, out);
}

int cmd_probe(const EvalFlags& f, std::ostream& out) {
  const EvalSetup s = prepare_eval(f);
  ProbeConfig pc = s.cfg.probe;
  pc.seed = s.cfg.train.seed;
  std::size_t classes = 0;
  for (const Features* feats : {&s.train, &s.test})
    for (std::size_t l : feats->labels) classes = std::max(classes, l + 1);
  const ProbeResult p = linear_probe(s.train, s.test, classes, pc);
  nlohmann::ordered_json r;
  r["command"] = "probe";
  r["checkpoint"] = f.checkpoint;
  r["feature"] = to_string(s.cfg.feature);
  r["epochs"] = pc.epochs;
  r["train_accuracy"] = p.train_accuracy;
  r["test_accuracy"] = p.test_accuracy;
  r["final_loss"] = p.epoch_loss.empty() ? 0.0 : p.epoch_loss.back();
  r["dbi"] = finite_or_null(davies_bouldin(s.test));
  r["train_size"] = s.train.rows;
  r["test_size"] = s.test.rows;
  return finish_report(r, f.out, out);
}

struct ExtractFlags {
  ConfigFlags cfg;
  std::string checkpoint, data, out, images = "0", kind = "pca";
};

void write_map(const fs::path& stem, std::size_t rows, std::size_t cols, const std::vector<double>& v) {
  write_output(stem.string() + ".txt", format_matrix(rows, cols, v));
  write_output(stem.string() + ".pgm", format_pgm(rows, cols, v));
}

int cmd_extract(const ExtractFlags& f, std::ostream& out, std::ostream& err) {
  if (f.kind != "pca" && f.kind != "attention") throw ValidationError("--kind must be pca or attention");
  ConfigEntries extra;
  if (!f.data.empty()) extra["data.test"] = f.data;
  const RunConfig cfg = resolve(f.cfg, extra);
  if (f.kind == "attention" && !cfg.vit.use_class_token) {
    throw ConfigError("attention maps need model.class_token = true");
  }
  if (f.out.empty()) throw ConfigError("--out is required");
  const Dataset ds = load_checked(cfg.test_data, cfg, "--data");
  const VitMae model = load_model(cfg, f.checkpoint);
  const NormStats norm = cfg.norm ? *cfg.norm : compute_norm_stats(ds);
  const auto idx = parse_indices(f.images, ds.size());
  fs::create_directories(f.out);
  const std::size_t s = cfg.vit.image_size, g = cfg.vit.grid();
  std::size_t files = 0;
  if (f.kind == "pca") {
    const auto maps = pca_layer_maps(model, eval_batch(ds, idx, s, norm).images);
    for (const auto& m : maps) {
      if (!m.pca.converged) {
        err << "warning: layer " << m.layer << " power iteration stopped after " << m.pca.iterations
            << " iterations, residual " << m.pca.residual << '\n';
      }
      for (std::size_t i = 0; i < idx.size(); ++i, files += 2) {
        write_map(fs::path(f.out) / ("pca_img" + std::to_string(idx[i]) + "_layer" + std::to_string(m.layer)), s, s,
                  m.per_image[i]);
      }
    }
  } else {
    for (std::size_t i : idx) {
      const Tensor maps = attention_maps(model, eval_batch(ds, {i}, s, norm).images);
      for (std::size_t h = 0; h < maps.dim(0); ++h, files += 2) {
        const auto d = maps.data().subspan(h * g * g, g * g);
        write_map(fs::path(f.out) / ("attn_img" + std::to_string(i) + "_head" + std::to_string(h)), g, g,
                  std::vector<double>(d.begin(), d.end()));
      }
    }
  }
  out << "wrote " << files << " files to " << f.out << '\n';
  return kExitOk;
}

int exit_code_for(const Error& e) {
  return dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ValidationError*>(&e) ? kExitValidation
                                                                                            : kExitRuntime;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Masked-autoencoder pretraining with manifold regularization", "magma"};
  app.require_subcommand(1);

  GenDataFlags gen;
  auto* g = app.add_subcommand("gen-data", "write a synthetic class-conditional image dataset");
  g->add_option("--classes", gen.spec.class_count, "number of classes")->capture_default_str();
  g->add_option("--per-class", gen.spec.per_class, "images per class")->capture_default_str();
  g->add_option("--size", gen.spec.image_size, "image side length")->capture_default_str();
  g->add_option("--channels", gen.spec.channels, "channels per image")->capture_default_str();
  g->add_option("--noise", gen.spec.noise, "pixel noise std in [0,1] units")->capture_default_str();
  g->add_option("--seed", gen.spec.seed, "sample stream seed")->capture_default_str();
  g->add_option("--out", gen.out, "output container path")->required();

  PretrainFlags pre;
  auto* p = app.add_subcommand("pretrain", "pretrain an encoder, writing metrics.jsonl and checkpoints");
  add_config_flags(p, pre.cfg);
  p->add_option("--out", pre.out, "output directory")->required();
  p->add_option("--train", pre.train, "training dataset (data.train)");
  p->add_option("--test", pre.test, "held-out dataset for online kNN (data.test)");
  p->add_option("--lambda", pre.lambda, "regularizer weight (sched.lambda)");
  p->add_option("--e-st", pre.e_st, "first regularized epoch (sched.e_st)");
  p->add_option("--e-dur", pre.e_dur, "regularized epoch count (sched.e_dur)");

  EvalFlags probe, knn;
  for (auto [flags, name, help] : {std::tuple{&probe, "probe", "train a linear probe on frozen features"},
                                   std::tuple{&knn, "knn", "k-nearest-neighbor accuracy of frozen features"}}) {
    auto* c = app.add_subcommand(name, help);
    add_config_flags(c, flags->cfg);
    c->add_option("--checkpoint", flags->checkpoint, "weights file")->required();
    c->add_option("--train", flags->train, "training dataset (data.train)");
    c->add_option("--test", flags->test, "test dataset (data.test)");
    c->add_option("--out", flags->out, "also write the JSON report here");
    if (flags == &knn) c->add_option("--k", flags->k, "neighbors (default train.knn_k = 10)");
  }

  ExtractFlags ext;
  auto* x = app.add_subcommand("extract", "export PCA key maps or class-token attention maps");
  add_config_flags(x, ext.cfg);
  x->add_option("--checkpoint", ext.checkpoint, "weights file")->required();
  x->add_option("--data", ext.data, "dataset to read images from (data.test)");
  x->add_option("--images", ext.images, "image indices: 3, 0-7 or 1,4,9")->capture_default_str();
  x->add_option("--kind", ext.kind, "pca or attention")->capture_default_str();
  x->add_option("--out", ext.out, "output directory")->required();

  std::vector<const char*> argv = {"magma"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error[E_USAGE]: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen, out);
    if (p->parsed()) return cmd_pretrain(pre, out);
    if (app.got_subcommand("probe")) return cmd_probe(probe, out);
    if (app.got_subcommand("knn")) return cmd_knn(knn, out);
    if (x->parsed()) return cmd_extract(ext, out, err);
  } catch (const Error& e) {
    err << "error[" << e.code() << "]: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error[E_IO]: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error[E_INTERNAL]: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitRuntime;
}

}  // namespace magma
