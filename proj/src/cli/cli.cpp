#include "gmoe/cli/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gmoe/data/synthetic.hpp"
#include "gmoe/exp/alignment.hpp"
#include "gmoe/exp/gradsuite.hpp"
#include "gmoe/io/png.hpp"
#include "gmoe/io/sha1.hpp"
#include "gmoe/model/models.hpp"
#include "gmoe/simd/kernels.hpp"
#include "gmoe/telemetry/telemetry.hpp"
#include "gmoe/train/checkpoint.hpp"
#include "gmoe/train/trainer.hpp"

namespace gmoe::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- helpers ---

fs::path resolve_dataset_path(const fs::path& p) {
  if (fs::is_directory(p)) return p / "dataset.gmds";
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
}

// Every command writes its manifest before any long computation: the exact
// command, the resolved configuration, and content hashes of the inputs.
void write_manifest(const fs::path& out_dir, const std::string& command,
                    const json& config, std::uint64_t seed,
                    const std::vector<fs::path>& inputs,
                    const std::vector<std::string>& outputs) {
  fs::create_directories(out_dir);
  json m;
  m["command"] = command;
  m["config"] = config;
  m["seed"] = seed;
  m["kernels"] = simd::isa_name(simd::active_isa());
  auto ins = json::array();
  for (const auto& p : inputs)
    ins.push_back({{"path", p.string()}, {"sha1", git_blob_hash(p)}});
  m["inputs"] = ins;
  m["outputs"] = outputs;
  write_text(out_dir / "manifest.json", m.dump(2) + "\n");
}

ModelConfig model_config_from_options(const std::string& kind,
                                      const SyntheticDataset& data,
                                      std::size_t depth, std::size_t width,
                                      std::size_t heads, std::size_t mlp_ratio,
                                      const std::string& activation,
                                      const std::string& placement,
                                      std::vector<std::size_t> placement_list,
                                      std::size_t experts, std::size_t top_k,
                                      const std::string& router,
                                      double temperature, std::size_t embed_dim,
                                      bool noise, double noise_std,
                                      std::vector<std::size_t> mlp_sizes,
                                      std::size_t fcn_filters) {
  ModelConfig cfg;
  cfg.kind = model_kind_from(kind);
  cfg.num_classes = data.num_classes();
  cfg.input = data.input_spec();
  cfg.activation = activation == "relu" ? Activation::relu : Activation::gelu;
  if (cfg.kind == ModelKind::gmoe) {
    cfg.depth = depth;
    cfg.width = width;
    cfg.heads = heads;
    cfg.mlp_ratio = mlp_ratio;
    cfg.placement = placement_from(placement);
    cfg.placement_list = std::move(placement_list);
    cfg.moe.kind = router == "linear" ? RouterKind::linear : RouterKind::cosine;
    cfg.moe.num_experts = experts;
    cfg.moe.top_k = top_k;
    cfg.moe.temperature = temperature;
    cfg.moe.embed_dim = embed_dim;
    cfg.moe.noise_enabled = noise;
    cfg.moe.noise_std = noise_std;
  } else if (cfg.kind == ModelKind::mlp) {
    if (mlp_sizes.empty())
      mlp_sizes = {cfg.input.flat_size(), 100, 100, cfg.num_classes};
    cfg.mlp_sizes = std::move(mlp_sizes);
  } else {
    cfg.fcn_filters = fcn_filters;
  }
  return cfg;
}

json eval_result_json(const EvalResult& r) {
  json j = {{"accuracy", r.accuracy}, {"mean_loss", r.mean_loss}};
  if (!r.importance_cv2.empty()) {
    j["importance_cv2"] = r.importance_cv2;
    j["load_cv2"] = r.load_cv2;
  }
  return j;
}

// ---------------------------------------------------------------- commands ---

struct SynthGenOpts {
  std::string spec_file;
  std::string out_dir;
  std::string kind = "patches";
  SyntheticSpec spec;
  TokenClusterSpec cluster;
};

int cmd_synth_gen(const SynthGenOpts& o) {
  json cfg = {{"kind", o.kind}};
  SyntheticDataset ds;
  if (o.kind == "patches") {
    cfg["spec"] = {{"patches", o.spec.patches}, {"classes", o.spec.classes},
                   {"n_train", o.spec.n_train}, {"n_eval", o.spec.n_eval},
                   {"p1", o.spec.p1},           {"p2", o.spec.p2},
                   {"seed", o.spec.seed}};
    write_manifest(o.out_dir, "synth-gen", cfg, o.spec.seed, {},
                   {"dataset.gmds"});
    ds = generate(o.spec);
  } else if (o.kind == "token_clusters") {
    cfg["spec"] = {{"clusters", o.cluster.clusters},
                   {"tokens", o.cluster.tokens},
                   {"dim", o.cluster.dim},
                   {"n_train", o.cluster.n_train},
                   {"n_eval", o.cluster.n_eval},
                   {"seed", o.cluster.seed}};
    write_manifest(o.out_dir, "synth-gen", cfg, o.cluster.seed, {},
                   {"dataset.gmds"});
    ds = generate_token_clusters(o.cluster);
  } else {
    throw ShapeError("synth-gen: unknown kind '" + o.kind + "'");
  }
  const fs::path out = fs::path(o.out_dir) / "dataset.gmds";
  save_dataset(ds, out);
  std::cout << "wrote " << out.string() << " (" << ds.train.size()
            << " train / " << ds.val.size() << " eval samples per split)\n";
  return 0;
}

template <typename T>
int run_train_typed(const ModelConfig& mcfg, const SyntheticDataset& data,
                    const TrainConfig& tcfg, const fs::path& out_dir) {
  auto model = build_model<T>(mcfg);
  TrainResult<T> result = train(*model, data, tcfg, out_dir / "checkpoints");

  std::ostringstream csv;
  result.metrics.write_csv(csv);
  write_text(out_dir / "metrics.csv", csv.str());

  const auto& chosen = result.checkpoints[result.selected];
  json summary;
  summary["iterations"] = tcfg.iterations;
  summary["selected_iteration"] = chosen.iteration;
  summary["selected_checkpoint"] = chosen.file.filename().string();
  for (const auto& [split, r] : chosen.evals)
    summary["selected"][split] = eval_result_json(r);
  const auto& last = result.checkpoints.back();
  for (const auto& [split, r] : last.evals)
    summary["final"][split] = eval_result_json(r);
  summary["final_loss"] = {{"cls", result.final_loss.classification},
                           {"importance", result.final_loss.importance},
                           {"load", result.final_loss.load},
                           {"total", result.final_loss.total},
                           {"lambda", tcfg.lambda}};
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");

  std::cout << "selected checkpoint: iteration " << chosen.iteration
            << ", val accuracy " << chosen.val_accuracy() << "\n";
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& out_dir,
              const ModelConfig& partial_is_unused, const json& resolved,
              const TrainConfig& tcfg, const std::string& model_kind,
              std::size_t depth, std::size_t width, std::size_t heads,
              std::size_t mlp_ratio, const std::string& activation,
              const std::string& placement,
              std::vector<std::size_t> placement_list, std::size_t experts,
              std::size_t top_k, const std::string& router, double temperature,
              std::size_t embed_dim, bool noise, double noise_std,
              std::vector<std::size_t> mlp_sizes, std::size_t fcn_filters) {
  (void)partial_is_unused;
  const fs::path data_file = resolve_dataset_path(data_path);
  write_manifest(out_dir, "train", resolved, tcfg.seed, {data_file},
                 {"metrics.csv", "summary.json", "checkpoints/"});
  SyntheticDataset data = load_dataset(data_file);
  ModelConfig mcfg = model_config_from_options(
      model_kind, data, depth, width, heads, mlp_ratio, activation, placement,
      std::move(placement_list), experts, top_k, router, temperature,
      embed_dim, noise, noise_std, std::move(mlp_sizes), fcn_filters);
  if (tcfg.precision == "f32")
    return run_train_typed<float>(mcfg, data, tcfg, out_dir);
  return run_train_typed<double>(mcfg, data, tcfg, out_dir);
}

template <typename T>
json eval_checkpoint_typed(const fs::path& ckpt, const SyntheticDataset& data) {
  auto loaded = load_checkpoint<T>(ckpt);
  json out;
  for (const std::string split : {"train", "val", "test1", "test2"}) {
    const Split& s = data.split(split);
    // Full split evaluation; train uses the first eval-sized slice.
    const std::size_t limit =
        split == "train" ? std::min<std::size_t>(s.size(), data.val.size())
                         : s.size();
    Tensor<T> x = detail::cast_tensor<T>(s.x);
    EvalResult r = evaluate(*loaded.model, x,
                            std::span<const std::int32_t>(s.labels.data(),
                                                          limit));
    out[split] = eval_result_json(r);
  }
  return out;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path,
             const std::string& out_file) {
  const fs::path data_file = resolve_dataset_path(data_path);
  SyntheticDataset data = load_dataset(data_file);
  const json meta = checkpoint_meta(checkpoint);
  const std::string precision = meta.at("precision").get<std::string>();
  json result = precision == "f32"
                    ? eval_checkpoint_typed<float>(checkpoint, data)
                    : eval_checkpoint_typed<double>(checkpoint, data);
  std::cout << result.dump(2) << "\n";
  if (!out_file.empty()) write_text(out_file, result.dump(2) + "\n");
  return 0;
}

template <typename T>
int analyze_routing_typed(const fs::path& ckpt, const SyntheticDataset& data,
                          const fs::path& out_dir) {
  auto loaded = load_checkpoint<T>(ckpt);
  if (!loaded.model->has_moe())
    throw ShapeError("analyze-routing: checkpoint model has no MoE layers");

  const Split& split = data.val;
  Tensor<T> x = detail::cast_tensor<T>(split.x);

  // Balance over the eval pass.
  auto balance = balance_report(*loaded.model, x);
  {
    std::ostringstream csv;
    balance_csv(balance, csv);
    write_text(out_dir / "balance.csv", csv.str());
    write_text(out_dir / "balance.json", balance_json(balance).dump(2) + "\n");
  }

  // Expert/attribute histograms need per-token attributes.
  if (!split.token_attr.empty()) {
    const std::size_t tokens = data.cluster_spec.tokens;
    std::vector<ExpertHistogram> hists;
    const std::size_t batch = 256;
    for (std::size_t start = 0; start < split.size(); start += batch) {
      const std::size_t stop = std::min(split.size(), start + batch);
      std::vector<int> idx(stop - start);
      std::iota(idx.begin(), idx.end(), static_cast<int>(start));
      Tensor<T> xb = gather_rows(x, idx);
      RoutingTrace trace;
      loaded.model->forward(nullptr, xb, false, nullptr, nullptr, &trace);
      record_routing(trace,
                     std::span<const std::int32_t>(
                         split.token_attr.data() + start * tokens,
                         (stop - start) * tokens),
                     tokens, data.num_classes(),
                     loaded.config.moe.num_experts, hists);
    }
    json hj = json::array();
    for (std::size_t m = 0; m < hists.size(); ++m) {
      std::ostringstream csv;
      histogram_csv(hists[m], csv);
      write_text(out_dir / ("histogram_layer" +
                            std::to_string(hists[m].layer_index) + ".csv"),
                 csv.str());
      hj.push_back(histogram_json(hists[m]));
      std::cout << "layer " << hists[m].layer_index
                << ": purity = " << specialization_purity(hists[m]) << "\n";
    }
    write_text(out_dir / "histograms.json", hj.dump(2) + "\n");
  } else {
    std::cout << "dataset carries no per-token attributes; histograms skipped\n";
  }
  for (const auto& l : balance)
    std::cout << "layer " << l.layer_index << ": importance_cv2 = "
              << l.importance_cv2 << ", load_cv2 = " << l.load_cv2 << "\n";
  return 0;
}

int cmd_analyze_routing(const std::string& checkpoint,
                        const std::string& data_path,
                        const std::string& out_dir) {
  const fs::path data_file = resolve_dataset_path(data_path);
  write_manifest(out_dir, "analyze-routing",
                 {{"checkpoint", checkpoint}, {"data", data_file.string()}}, 0,
                 {checkpoint, data_file},
                 {"balance.csv", "balance.json", "histograms.json"});
  SyntheticDataset data = load_dataset(data_file);
  const json meta = checkpoint_meta(checkpoint);
  const std::string precision = meta.at("precision").get<std::string>();
  if (precision == "f32")
    return analyze_routing_typed<float>(checkpoint, data, out_dir);
  return analyze_routing_typed<double>(checkpoint, data, out_dir);
}

int cmd_gradcheck() {
  auto entries = run_gradcheck_suite();
  bool all_pass = true;
  for (const auto& e : entries) {
    std::printf("%-55s max_rel_err=%.3e  %s\n", e.name.c_str(), e.max_rel_err,
                e.pass ? "ok" : "FAIL");
    all_pass = all_pass && e.pass;
  }
  return all_pass ? 0 : 1;
}

int cmd_alignment_exp(const std::string& variant, const std::string& model,
                      std::uint64_t seed, const std::string& out_dir) {
  const bool noisy = variant == "noisy";
  const ModelKind kind = model_kind_from(model);
  json cfg = {{"variant", variant}, {"model", model}, {"seed", seed}};
  if (!out_dir.empty())
    write_manifest(out_dir, "alignment-exp", cfg, seed, {},
                   {"alignment.json", "metrics.csv"});
  AlignmentOutcome out =
      run_alignment_experiment(kind, noisy, seed, nullptr, &std::cout);
  json j = {{"model", model},
            {"variant", variant},
            {"seed", seed},
            {"selected_iteration", out.selected_iteration},
            {"val", out.val},
            {"test1", out.test1},
            {"test2", out.test2}};
  std::cout << j.dump(2) << "\n";
  if (!out_dir.empty()) {
    write_text(fs::path(out_dir) / "alignment.json", j.dump(2) + "\n");
    std::ostringstream csv;
    out.metrics.write_csv(csv);
    write_text(fs::path(out_dir) / "metrics.csv", csv.str());
  }
  return 0;
}

int cmd_plot(const std::string& report, const std::string& out_img) {
  std::ifstream in(report);
  if (!in) throw IoError("cannot open report: " + report);
  std::string line;
  std::vector<std::vector<double>> matrix;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;  // first line is the column header
      continue;
    }
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (first) {
        first = false;  // row label
        continue;
      }
      row.push_back(std::stod(cell));
    }
    if (!row.empty()) matrix.push_back(std::move(row));
  }
  if (matrix.empty()) throw IoError("report has no data rows: " + report);
  write_heatmap_png(out_img, matrix);
  std::cout << "wrote " << out_img << "\n";
  return 0;
}

}  // namespace

int run(std::vector<std::string> args) {
  CLI::App app{"Sparse mixture-of-experts transformer lab"};
  app.require_subcommand(1);

  // ------------------------------------------------------------ synth-gen --
  auto o = std::make_shared<SynthGenOpts>();
  CLI::App* synth = app.add_subcommand("synth-gen", "generate a dataset");
  synth->set_config("--spec", "", "spec file (key=value)");
  synth->add_option("--out", o->out_dir, "output directory")->required();
  synth->add_option("--kind", o->kind, "patches | token_clusters");
  synth->add_option("--patches", o->spec.patches);
  synth->add_option("--classes", o->spec.classes);
  synth->add_option("--n-train", o->spec.n_train);
  synth->add_option("--n-eval", o->spec.n_eval);
  synth->add_option("--p1", o->spec.p1);
  synth->add_option("--p2", o->spec.p2);
  synth->add_option("--seed", o->spec.seed);
  synth->add_option("--clusters", o->cluster.clusters);
  synth->add_option("--tokens", o->cluster.tokens);
  synth->add_option("--dim", o->cluster.dim);
  synth->add_option("--cluster-n-train", o->cluster.n_train);
  synth->add_option("--cluster-n-eval", o->cluster.n_eval);
  synth->callback([o] {
    o->cluster.seed = o->spec.seed;
    if (cmd_synth_gen(*o) != 0) throw CLI::RuntimeError(2);
  });

  // ----------------------------------------------------------------- train --
  struct TrainOpts {
    std::string data, out;
    std::string model_kind = "gmoe";
    std::size_t depth = 2, width = 32, heads = 4, mlp_ratio = 4;
    std::string activation = "gelu";
    std::string placement = "last_two";
    std::vector<std::size_t> placement_list;
    std::size_t experts = 6, top_k = 2;
    std::string router = "cosine";
    double temperature = 0.07;
    std::size_t embed_dim = 0;
    bool noise = true;
    double noise_std = 0.0;
    std::vector<std::size_t> mlp_sizes;
    std::size_t fcn_filters = 20;
    TrainConfig tcfg;
  };
  auto t = std::make_shared<TrainOpts>();
  CLI::App* tr = app.add_subcommand("train", "train a model on a dataset");
  tr->set_config("--config", "", "config file (key=value)");
  tr->add_option("--data", t->data, "dataset file or directory")->required();
  tr->add_option("--out", t->out, "output directory")->required();
  tr->add_option("--model-kind", t->model_kind, "gmoe | mlp | fcn");
  tr->add_option("--depth", t->depth);
  tr->add_option("--width", t->width);
  tr->add_option("--heads", t->heads);
  tr->add_option("--mlp-ratio", t->mlp_ratio);
  tr->add_option("--activation", t->activation, "gelu | relu");
  tr->add_option("--placement", t->placement,
                 "none | every_two | last_two | explicit");
  tr->add_option("--placement-list", t->placement_list);
  tr->add_option("--experts", t->experts);
  tr->add_option("--top-k", t->top_k);
  tr->add_option("--router", t->router, "linear | cosine");
  tr->add_option("--temperature", t->temperature);
  tr->add_option("--embed-dim", t->embed_dim);
  tr->add_flag("--noise,!--no-noise", t->noise, "routing noise in training");
  tr->add_option("--noise-std", t->noise_std, "0 = default 1/N");
  tr->add_option("--mlp-sizes", t->mlp_sizes);
  tr->add_option("--fcn-filters", t->fcn_filters);
  tr->add_option("--lr", t->tcfg.lr);
  tr->add_option("--weight-decay", t->tcfg.weight_decay);
  tr->add_option("--batch-size", t->tcfg.batch_size);
  tr->add_option("--iterations", t->tcfg.iterations);
  tr->add_option("--lambda", t->tcfg.lambda);
  tr->add_option("--eval-every", t->tcfg.eval_every);
  tr->add_option("--seed", t->tcfg.seed);
  tr->add_option("--precision", t->tcfg.precision, "f32 | f64");
  tr->callback([t] {
    json resolved = {{"data", t->data},
                     {"model-kind", t->model_kind},
                     {"depth", t->depth},
                     {"width", t->width},
                     {"heads", t->heads},
                     {"mlp-ratio", t->mlp_ratio},
                     {"activation", t->activation},
                     {"placement", t->placement},
                     {"placement-list", t->placement_list},
                     {"experts", t->experts},
                     {"top-k", t->top_k},
                     {"router", t->router},
                     {"temperature", t->temperature},
                     {"embed-dim", t->embed_dim},
                     {"noise", t->noise},
                     {"noise-std", t->noise_std},
                     {"mlp-sizes", t->mlp_sizes},
                     {"fcn-filters", t->fcn_filters},
                     {"lr", t->tcfg.lr},
                     {"weight-decay", t->tcfg.weight_decay},
                     {"batch-size", t->tcfg.batch_size},
                     {"iterations", t->tcfg.iterations},
                     {"lambda", t->tcfg.lambda},
                     {"eval-every", t->tcfg.eval_every},
                     {"seed", t->tcfg.seed},
                     {"precision", t->tcfg.precision}};
    if (cmd_train(t->data, t->out, ModelConfig{}, resolved, t->tcfg,
                  t->model_kind, t->depth, t->width, t->heads, t->mlp_ratio,
                  t->activation, t->placement, t->placement_list, t->experts,
                  t->top_k, t->router, t->temperature, t->embed_dim, t->noise,
                  t->noise_std, t->mlp_sizes, t->fcn_filters) != 0)
      throw CLI::RuntimeError(2);
  });

  // ------------------------------------------------------------------ eval --
  struct EvalOpts {
    std::string checkpoint, data, out;
  };
  auto e = std::make_shared<EvalOpts>();
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", e->checkpoint, "checkpoint file")->required();
  ev->add_option("--data", e->data, "dataset file or directory")->required();
  ev->add_option("--out", e->out, "optional json report path");
  ev->callback([e] {
    if (cmd_eval(e->checkpoint, e->data, e->out) != 0)
      throw CLI::RuntimeError(2);
  });

  // ------------------------------------------------------- analyze-routing --
  auto a = std::make_shared<EvalOpts>();
  CLI::App* an = app.add_subcommand("analyze-routing",
                                    "routing histograms and balance reports");
  an->add_option("--checkpoint", a->checkpoint, "checkpoint file")->required();
  an->add_option("--data", a->data, "dataset file or directory")->required();
  an->add_option("--out", a->out, "output directory")->required();
  an->callback([a] {
    if (cmd_analyze_routing(a->checkpoint, a->data, a->out) != 0)
      throw CLI::RuntimeError(2);
  });

  // ------------------------------------------------------------- gradcheck --
  CLI::App* gc = app.add_subcommand("gradcheck",
                                    "finite-difference gradient suite");
  gc->callback([] {
    if (cmd_gradcheck() != 0) throw CLI::RuntimeError(1);
  });

  // --------------------------------------------------------- alignment-exp --
  struct AlignOpts {
    std::string variant = "noiseless";
    std::string model = "mlp";
    std::uint64_t seed = 0;
    std::string out;
  };
  auto al = std::make_shared<AlignOpts>();
  CLI::App* ax = app.add_subcommand(
      "alignment-exp", "architecture-alignment run on synthetic shifts");
  ax->add_option("--variant", al->variant, "noiseless | noisy")
      ->check(CLI::IsMember({"noiseless", "noisy"}));
  ax->add_option("--model", al->model, "mlp | fcn")
      ->check(CLI::IsMember({"mlp", "fcn"}));
  ax->add_option("--seed", al->seed);
  ax->add_option("--out", al->out, "optional output directory");
  ax->callback([al] {
    if (cmd_alignment_exp(al->variant, al->model, al->seed, al->out) != 0)
      throw CLI::RuntimeError(2);
  });

  // ------------------------------------------------------------------ plot --
  struct PlotOpts {
    std::string report, out;
  };
  auto p = std::make_shared<PlotOpts>();
  CLI::App* pl = app.add_subcommand("plot", "render a report CSV as a heatmap");
  pl->add_option("--report", p->report, "csv report")->required();
  pl->add_option("--out", p->out, "output png")->required();
  pl->callback([p] {
    if (cmd_plot(p->report, p->out) != 0) throw CLI::RuntimeError(2);
  });

  std::vector<const char*> argv;
  argv.push_back("gmoe");
  for (const auto& s : args) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    return 0;
  } catch (const CLI::CallForHelp& help) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::RuntimeError& err) {
    return err.get_exit_code();
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n" << app.help();
    return 1;
  } catch (const ShapeError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
}

}  // namespace gmoe::cli
