#include "combo/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <set>

#include "CLI11.hpp"
#include "combo/error.hpp"
#include "combo/kernels.hpp"
#include "combo/plot.hpp"
#include "../common/binary_io.hpp"

namespace combo {

namespace fs = std::filesystem;
using nlohmann::json;

json to_json(const RunConfig& c) {
  json j = {{"dataset", c.dataset},
            {"adapter", to_json(c.adapter)},
            {"train", to_json(c.train)},
            {"probe", to_json(c.probe)},
            {"score", {{"seeds", c.score_seeds}, {"lambda", c.score_lambda}}},
            {"select", {{"top_n", c.top_n}}},
            {"layers", std::string(layer_mode_name(c.layers))}};
  if (c.synth) j["synth"] = to_json(*c.synth);
  return j;
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(what + ": unknown key \"" + key + "\"");
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j, {"dataset", "synth", "adapter", "train", "probe", "score", "select", "layers"}, "run config");
  RunConfig c;
  try {
    if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
    if (j.contains("synth")) c.synth = synth_spec_from_json(j.at("synth"));
    if (j.contains("adapter")) c.adapter = adapter_config_from_json(j.at("adapter"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("probe")) c.probe = probe_config_from_json(j.at("probe"));
    if (j.contains("score")) {
      const auto& s = j.at("score");
      reject_unknown(s, {"seeds", "lambda"}, "score config");
      if (s.contains("seeds")) c.score_seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
      if (s.contains("lambda")) c.score_lambda = s.at("lambda").get<double>();
    }
    if (j.contains("select")) {
      const auto& s = j.at("select");
      reject_unknown(s, {"top_n"}, "select config");
      if (s.contains("top_n")) c.top_n = s.at("top_n").get<std::size_t>();
    }
    if (j.contains("layers")) c.layers = parse_layer_mode(j.at("layers").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.train.validate();
  c.probe.validate();
  if (c.score_seeds.empty()) throw ConfigError("score.seeds is empty");
  return c;
}

namespace {

struct Options {
  std::string config;
  std::string dataset;
  std::string out;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<std::size_t> top_n;
  std::string layers;
  std::string precision;
  std::string split = "val";
  std::string backbone;
  std::string report;
  std::vector<std::string> files;
};

json read_json_file(const fs::path& path, ErrorKind kind) {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const IoError& e) {
    if (kind == ErrorKind::config) throw ConfigError(e.what());
    throw DataError(e.what());
  }
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const std::string msg = path.string() + ": " + e.what();
    if (kind == ErrorKind::config) throw ConfigError(msg);
    throw DataError(msg);
  }
}

RunConfig load_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : run_config_from_json(read_json_file(o.config, ErrorKind::config));
  if (!o.dataset.empty()) c.dataset = o.dataset;
  if (o.seed) {
    c.train.seed = *o.seed;
    c.probe.seed = *o.seed;
    if (c.synth) c.synth->seed = *o.seed;
    for (std::size_t i = 0; i < c.score_seeds.size(); ++i) c.score_seeds[i] = *o.seed + i;
  }
  if (o.lambda) {
    c.train.lambda_reg = *o.lambda;
    c.score_lambda = *o.lambda;
  }
  if (o.top_n) c.top_n = *o.top_n;
  if (!o.layers.empty()) c.layers = parse_layer_mode(o.layers);
  if (!o.precision.empty()) c.train.precision = parse_precision(o.precision);
  if (!o.backbone.empty()) c.probe.backbone = o.backbone;
  c.train.validate();
  return c;
}

FeatureDataset load_dataset(const RunConfig& c) {
  if (c.dataset.empty()) throw ConfigError("no dataset given (--dataset or \"dataset\" in the config)");
  auto ds = read_dataset(c.dataset);
  ds.validate();
  return ds;
}

void emit(const json& j, const Options& o, bool out_is_file, std::ostream& out) {
  const std::string text = j.dump(2) + "\n";
  out << text;
  if (out_is_file && !o.out.empty()) {
    const fs::path p(o.out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    detail::atomic_write(p, text);
  }
}

std::string pct(double acc) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * acc);
  return buf;
}

int cmd_synth(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = load_config(o);
  if (!c.synth) throw ConfigError("synth needs a \"synth\" section in the config");
  if (o.out.empty()) throw ConfigError("synth needs --out <dataset dir>");
  const auto ds = generate(*c.synth);
  write_dataset(o.out, ds);
  emit({{"command", "synth"},
        {"dataset", o.out},
        {"num_samples", ds.manifest.num_samples},
        {"maps", ds.manifest.order.size()},
        {"run_config", to_json(c)}},
       o, false, out);
  err << "wrote " << ds.manifest.order.size() << " maps x " << ds.manifest.num_samples << " samples to " << o.out
      << "\n";
  return 0;
}

int cmd_inspect(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = load_config(o);
  const auto ds = load_dataset(c);
  const Manifest& m = ds.manifest;
  const auto layout = make_layout(m);
  json backbones = json::array();
  for (const auto& b : m.backbones) {
    backbones.push_back({{"id", b.id}, {"layers", b.layer_ids}, {"tokens", b.tokens}, {"dim", b.dim}});
  }
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(m.hash()));
  emit({{"command", "inspect"},
        {"name", m.name},
        {"K", m.backbones.size()},
        {"C", m.num_classes},
        {"num_samples", m.num_samples},
        {"splits", {{"train", m.splits.train}, {"val", m.splits.val}, {"test", m.splits.test}}},
        {"protocol", m.protocol},
        {"maps", m.order.size()},
        {"tokens", layout.tokens},
        {"D_total", layout.total_dim},
        {"backbones", backbones},
        {"manifest_hash", hash}},
       o, true, out);
  err << m.name << ": K=" << m.backbones.size() << " C=" << m.num_classes << " splits=" << m.splits.train << "/"
      << m.splits.val << "/" << m.splits.test << " D=" << layout.total_dim << " T=" << layout.tokens << "\n";
  return 0;
}

AdapterConfig adapter_for(const RunConfig& c, const Manifest& m) {
  AdapterConfig a = c.adapter;
  if (c.layers != LayerMode::all) {
    if (a.layer_subset) throw ConfigError("use either adapter.layer_subset or a --layers mode, not both");
    a.layer_subset = restrict_layers(m, c.layers);
  }
  return a;
}

void write_train_outputs(const Options& o, const TrainResult& r, const json& report) {
  fs::path ck_path = o.checkpoint;
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    detail::atomic_write(fs::path(o.out) / "report.json", report.dump(2) + "\n");
    if (ck_path.empty()) ck_path = fs::path(o.out) / "checkpoint.cmbc";
  }
  if (!ck_path.empty()) {
    if (ck_path.has_parent_path()) fs::create_directories(ck_path.parent_path());
    write_checkpoint(ck_path, r.checkpoint);
  }
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = load_config(o);
  const auto ds = load_dataset(c);
  const auto result = train(ds, adapter_for(c, ds.manifest), c.train);
  json report = result.report.to_json();
  report["run_config"] = to_json(c);
  write_train_outputs(o, result, report);
  emit(report, o, false, out);
  err << "trained " << result.report.epochs.size() << " epochs, " << result.report.parameters.total
      << " parameters, final val accuracy " << pct(result.report.final_val_accuracy) << "\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = load_config(o);
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  const auto ds = load_dataset(c);
  const auto ck = read_checkpoint(o.checkpoint);
  const Split split = parse_split(o.split);
  const double acc = evaluate(ds, ck, split, c.train.precision);
  emit({{"command", "eval"},
        {"split", std::string(split_name(split))},
        {"accuracy", acc},
        {"precision", std::string(precision_name(c.train.precision))}},
       o, true, out);
  err << split_name(split) << " accuracy " << pct(acc) << "\n";
  return 0;
}

int cmd_score(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = load_config(o);
  const auto ds = load_dataset(c);
  const auto rep = score_models(ds, adapter_for(c, ds.manifest), c.train, c.score_seeds, c.score_lambda);
  json j = rep.to_json();
  j["run_config"] = to_json(c);
  emit(j, o, true, out);
  err << "ranking:";
  for (const auto& id : rep.ranking) err << ' ' << id;
  err << "\n";
  return 0;
}

int cmd_select(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = load_config(o);
  const auto ds = load_dataset(c);
  const auto adapter = adapter_for(c, ds.manifest);
  const ImportanceReport rep = o.report.empty()
                                   ? score_models(ds, adapter, c.train, c.score_seeds, c.score_lambda)
                                   : ImportanceReport::from_json(read_json_file(o.report, ErrorKind::data));
  const auto result = select_and_retrain(ds, rep, c.top_n, adapter, c.train);
  json report = result.report.to_json();
  report["selection"] = {{"top_n", c.top_n},
                         {"kept", std::vector<std::string>(rep.ranking.begin(),
                                                           rep.ranking.begin() + static_cast<std::ptrdiff_t>(c.top_n))},
                         {"importance", rep.to_json()}};
  report["run_config"] = to_json(c);
  write_train_outputs(o, result, report);
  emit(report, o, false, out);
  err << "kept " << c.top_n << " of " << rep.ranking.size() << " backbones, final val accuracy "
      << pct(result.report.final_val_accuracy) << "\n";
  return 0;
}

int cmd_probe(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig c = load_config(o);
  const auto ds = load_dataset(c);
  const std::string backbone = c.probe.backbone.empty() ? ds.manifest.backbones.front().id : c.probe.backbone;
  const auto curve = layer_sweep(ds, backbone, c.probe);
  json j = curve.to_json();
  j["run_config"] = to_json(c);
  emit(j, o, true, out);
  for (const auto& r : curve.layers) {
    err << backbone << " layer " << r.layer << ": " << pct(r.best_val_accuracy) << " (lr " << r.best_lr << ")\n";
  }
  return 0;
}

int cmd_plot(const Options& o, std::ostream& out, std::ostream& err) {
  if (o.files.empty()) throw ConfigError("plot needs at least one report file");
  const fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  fs::create_directories(dir);
  json written = json::array();
  for (const auto& f : o.files) {
    const auto svg = render_svg(read_json_file(f, ErrorKind::data));
    const fs::path target = dir / (fs::path(f).stem().string() + ".svg");
    detail::atomic_write(target, svg);
    written.push_back(target.string());
    err << "wrote " << target.string() << "\n";
  }
  emit({{"command", "plot"}, {"svg", written}}, o, false, out);
  return 0;
}

json error_json(const char* kind, int code, const std::string& message) {
  return {{"error", {{"kind", kind}, {"exit_code", code}, {"message", message}}}};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"COMBO probing adapter over multi-layer, multi-backbone feature maps", "combo"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--dataset", o.dataset, "Dataset directory (overrides the config)");
    sub->add_option("--out", o.out, "Output path");
    sub->add_option("--seed", o.seed, "Seed override");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset from the config's synth section");
  common(synth);
  auto* inspect = app.add_subcommand("inspect", "Summarize a dataset");
  common(inspect);
  auto* train_cmd = app.add_subcommand("train", "Train the adapter and write report.json + checkpoint.cmbc");
  common(train_cmd);
  auto* eval = app.add_subcommand("eval", "Accuracy of a checkpoint on one split");
  common(eval);
  auto* score = app.add_subcommand("score", "Backbone importance scores under group-sparsity training");
  common(score);
  auto* select = app.add_subcommand("select", "Keep the top-n backbones and retrain");
  common(select);
  auto* probe = app.add_subcommand("probe", "Per-layer mean-pooled linear probe sweep");
  common(probe);
  auto* plot = app.add_subcommand("plot", "Render report JSON files as SVG charts");
  plot->add_option("files", o.files, "Report JSON files")->required();
  plot->add_option("--out", o.out, "Output directory for the SVG files");

  for (auto* sub : {train_cmd, eval, score, select}) {
    sub->add_option("--precision", o.precision, "f32 or f64");
  }
  for (auto* sub : {train_cmd, score, select}) {
    sub->add_option("--layers", o.layers, "all, last, first-half, last-half or even");
    sub->add_option("--lambda", o.lambda, "Group-sparsity coefficient");
  }
  for (auto* sub : {train_cmd, eval, select}) sub->add_option("--checkpoint", o.checkpoint, "Checkpoint path");
  eval->add_option("--split", o.split, "train, val or test");
  select->add_option("--top-n", o.top_n, "Number of backbones to keep");
  select->add_option("--report", o.report, "Existing importance report (skips scoring)");
  probe->add_option("--backbone", o.backbone, "Backbone to sweep (default: first)");

  std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << error_json("config", 2, e.what()).dump() << "\n";
    return 2;
  }

  try {
    if (*synth) return cmd_synth(o, out, err);
    if (*inspect) return cmd_inspect(o, out, err);
    if (*train_cmd) return cmd_train(o, out, err);
    if (*eval) return cmd_eval(o, out, err);
    if (*score) return cmd_score(o, out, err);
    if (*select) return cmd_select(o, out, err);
    if (*probe) return cmd_probe(o, out, err);
    if (*plot) return cmd_plot(o, out, err);
  } catch (const Error& e) {
    static constexpr const char* kinds[] = {"config", "data", "runtime"};
    err << error_json(kinds[static_cast<int>(e.kind())], e.exit_code(), e.what()).dump() << "\n";
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << error_json("runtime", 4, e.what()).dump() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << error_json("runtime", 4, e.what()).dump() << "\n";
    return 4;
  }
  return 4;
}

}  // namespace combo
