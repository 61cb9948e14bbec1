#include "cli.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "evflow/config.hpp"

namespace evflow::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> events, flows;
  std::string checkpoint;
  std::string reference;
  std::string axis;
  std::vector<double> values;
};

std::shared_ptr<spdlog::logger> logger() {
  static auto log = [] {
    auto l = spdlog::get("evflow");
    if (!l) l = spdlog::stderr_color_mt("evflow");
    const char* env = std::getenv("EVFLOW_LOG");
    const std::string level = env ? env : "info";
    if (level == "error") l->set_level(spdlog::level::err);
    else if (level == "debug") l->set_level(spdlog::level::debug);
    else l->set_level(spdlog::level::info);
    if (level != "error" && level != "info" && level != "debug")
      l->warn("EVFLOW_LOG='{}' is not one of error, info, debug; using info", level);
    return l;
  }();
  return log;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) throw IoError("cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

RunConfig load(const Options& o) {
  RunConfig cfg;
  if (!o.config.empty()) cfg = load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  return cfg.resolved();
}

json inputs_of(const Options& o) {
  return o.events.empty() ? json::object() : json{{"events", o.events}, {"flows", o.flows}};
}

std::vector<StreamData> load_streams(const Options& o, const RunConfig& cfg) {
  std::vector<StreamData> out;
  if (!o.events.empty() || !o.flows.empty()) {
    if (o.events.size() != o.flows.size())
      throw ConfigError("--events and --flows must be given in pairs");
    for (std::size_t i = 0; i < o.events.size(); ++i) {
      auto d = from_files(read_events(fs::path(o.events[i])), read_flows(fs::path(o.flows[i])), cfg.train.m);
      logger()->info("stream {}: {} events, {} counts, {} ground truths", o.events[i], d.events.events.size(),
                     d.counts.size(), d.gts.size());
      out.push_back(std::move(d));
    }
    return out;
  }
  const auto scenes = scenes_of(cfg);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    out.push_back(simulate(scenes[i], cfg.camera, derive_seed(cfg.seed, i)));
    logger()->debug("scene {}: {} events", i, out.back().events.events.size());
  }
  return out;
}

std::vector<StreamSplit> split_all(const std::vector<StreamData>& data, const RunConfig& cfg) {
  std::vector<StreamSplit> out;
  for (const auto& d : data) out.push_back(split_stream(d, cfg.train.m, cfg.train_fraction));
  return out;
}

Network<float> load_network(const RunConfig& cfg, const std::string& checkpoint) {
  auto net = Network<float>::build(cfg.network, cfg.seed);
  if (!checkpoint.empty()) net.load_checkpoint(read_checkpoint(checkpoint));
  return net;
}

std::optional<EvalReport> evaluate(const Network<float>& net, const RunConfig& cfg,
                                   const std::vector<std::vector<CountFrame>>& counts,
                                   const std::vector<std::vector<FlowField>>& gts,
                                   std::vector<std::vector<FlowField>>* predictions = nullptr) {
  std::vector<EvalReport> reports;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    NetworkPredictor<float> predictor(net, cfg.eval.cap);
    std::vector<FlowField> preds;
    try {
      reports.push_back(evaluate_stream(predictor, counts[s], gts[s], cfg.eval, &preds));
    } catch (const NoEvaluatedPixels&) {
      logger()->warn("stream {} has no evaluated pixel", s);
    }
    if (predictions) predictions->push_back(std::move(preds));
  }
  if (reports.empty()) return std::nullopt;
  return merge_reports(reports);
}

// --- commands --------------------------------------------------------------------

void simulate_cmd(const Options& o) {
  const RunConfig cfg = load(o);
  const fs::path out(o.out);
  ensure_dir(out);
  const auto scenes = scenes_of(cfg);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto d = simulate(scenes[i], cfg.camera, derive_seed(cfg.seed, i));
    write_events(out / ("stream_" + std::to_string(i) + ".evt"), d.events);
    write_flows(out / ("stream_" + std::to_string(i) + ".flo"), d.gts);
    logger()->info("stream {}: {} events, {} ground truths", i, d.events.events.size(), d.gts.size());
  }
  write_json(out / "manifest.json", manifest(cfg, "simulate"));
}

Network<float> train_into(const RunConfig& cfg, const std::vector<StreamData>& data, const fs::path& out,
                          const json& inputs) {
  ensure_dir(out / "checkpoints");
  const auto splits = split_all(data, cfg);
  std::vector<TrainingSequence> dataset;
  std::vector<std::vector<CountFrame>> train_counts, test_counts;
  std::vector<std::vector<FlowField>> train_gts, test_gts;
  for (const auto& s : splits) {
    auto seqs = build_training_set(s.train_counts, s.train_gts, cfg.train);
    dataset.insert(dataset.end(), std::make_move_iterator(seqs.begin()), std::make_move_iterator(seqs.end()));
    train_counts.push_back(s.train_counts);
    train_gts.push_back(s.train_gts);
    test_counts.push_back(s.test_counts);
    test_gts.push_back(s.test_gts);
  }
  auto net = Network<float>::build(cfg.network, cfg.seed);
  logger()->info("{} training sequences, {} parameters", dataset.size(), net.parameter_count());
  logger()->debug("\n{}", net.summary(data.front().counts.front().height, data.front().counts.front().width));

  auto ckpt = [&](int epoch) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", epoch);
    write_checkpoint((out / "checkpoints" / name).string(), net.to_checkpoint());
  };
  ckpt(0);
  std::ostringstream metrics;
  metrics << "epoch,split,loss,aee\n";
  auto aee_of = [&](const Network<float>& n, const auto& counts, const auto& gts) {
    const auto r = evaluate(n, cfg, counts, gts);
    return r ? num(r->aee) : std::string("nan");
  };
  train<float>(net, dataset, cfg.train, [&](const EpochReport& r, const Network<float>& n) {
    ckpt(r.epoch);
    const std::string train_aee = aee_of(n, train_counts, train_gts);
    const std::string test_aee = aee_of(n, test_counts, test_gts);
    metrics << r.epoch << ",train," << num(r.normalized_loss) << ',' << train_aee << '\n';
    metrics << r.epoch << ",test,," << test_aee << '\n';
    logger()->info("epoch {}: loss/px {:.4f}, train AEE {}, test AEE {}", r.epoch, r.normalized_loss, train_aee,
                   test_aee);
  });
  write_checkpoint((out / "model.ckpt").string(), net.to_checkpoint());
  write_text(out / "metrics.csv", metrics.str());
  json m = manifest(cfg, "train");
  if (!inputs.empty()) m["inputs"] = inputs;
  write_json(out / "manifest.json", m);
  return net;
}

EvalReport eval_into(const RunConfig& cfg, const Network<float>& net, const std::vector<StreamData>& data,
                     bool whole_streams, const fs::path& out) {
  ensure_dir(out / "png");
  std::vector<std::vector<CountFrame>> counts;
  std::vector<std::vector<FlowField>> gts;
  if (whole_streams) {
    for (const auto& d : data) {
      counts.push_back(d.counts);
      gts.push_back(d.gts);
    }
  } else {
    for (const auto& s : split_all(data, cfg)) {
      counts.push_back(s.test_counts);
      gts.push_back(s.test_gts);
    }
  }
  std::vector<std::vector<FlowField>> preds;
  const auto report = evaluate(net, cfg, counts, gts, &preds);
  if (!report) throw NoEvaluatedPixels("no stream had an evaluated pixel");
  for (std::size_t s = 0; s < preds.size(); ++s) {
    write_flows(out / ("predictions_" + std::to_string(s) + ".flo"), preds[s]);
    double max_mag = 0;
    for (const auto& g : gts[s])
      for (std::size_t i = 0; i < g.size(); ++i)
        if (g.valid[i]) max_mag = std::max(max_mag, std::hypot(double(g.u[i]), double(g.v[i])));
    for (std::size_t j = 0; j < preds[s].size(); ++j) {
      char name[48];
      std::snprintf(name, sizeof name, "s%zu_gt%03zu.png", s, j);
      const auto& p = preds[s][j];
      write_png(out / "png" / name, p.width, p.height, flow_to_rgb(p, max_mag));
    }
  }
  write_json(out / "report.json", report->to_json());
  write_text(out / "report.csv", report->to_csv());
  logger()->info("AEE {:.4f} over {} pixels, 3PE {:.2f}%", report->aee, report->evaluated_pixels, report->kpe[2]);
  return *report;
}

OpCountReport count_streams(const Network<float>& net, const std::vector<std::vector<CountFrame>>& counts, int cap) {
  OpCountReport total;
  for (const auto& c : counts) {
    if (c.empty()) continue;
    auto r = count_mult_ops(net, c, cap);
    if (total.layers.empty()) {
      total = std::move(r);
      continue;
    }
    total.steps += r.steps;
    total.dense_total += r.dense_total;
    total.effective_total += r.effective_total;
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
      total.layers[i].dense_input += r.layers[i].dense_input;
      total.layers[i].effective_input += r.layers[i].effective_input;
      total.layers[i].recurrent += r.layers[i].recurrent;
      total.layers[i].elementwise += r.layers[i].elementwise;
    }
  }
  if (total.layers.empty()) throw ConfigError("count-ops: empty stream");
  return total;
}

OpCountReport ops_into(const RunConfig& cfg, const Network<float>& net, const std::string& reference_ckpt,
                       const std::vector<StreamData>& data, bool whole_streams, const fs::path& out) {
  ensure_dir(out);
  std::vector<std::vector<CountFrame>> counts;
  if (whole_streams)
    for (const auto& d : data) counts.push_back(d.counts);
  else
    for (const auto& s : split_all(data, cfg)) counts.push_back(s.test_counts);
  auto report = count_streams(net, counts, cfg.eval.cap);
  NetworkConfig ref_cfg = cfg.network;
  ref_cfg.cell = CellKind::lstm;
  auto ref = Network<float>::build(ref_cfg, cfg.seed);
  if (!reference_ckpt.empty()) ref.load_checkpoint(read_checkpoint(reference_ckpt));
  report.normalize_by(count_streams(ref, counts, cfg.eval.cap));
  write_json(out / "ops.json", report.to_json());
  write_text(out / "ops.csv", report.to_csv());
  logger()->info("effective/dense input multiplies {:.4f}, total vs {} {:.4f}", report.input_ratio(),
                 report.reference, report.reference_ratio);
  return report;
}

void train_cmd(const Options& o) {
  const RunConfig cfg = load(o);
  const auto data = load_streams(o, cfg);
  train_into(cfg, data, o.out, inputs_of(o));
}

void eval_cmd(const Options& o) {
  const RunConfig cfg = load(o);
  const auto data = load_streams(o, cfg);
  const auto net = load_network(cfg, o.checkpoint);
  eval_into(cfg, net, data, !o.events.empty(), o.out);
  json m = manifest(cfg, "eval");
  if (!o.events.empty()) m["inputs"] = inputs_of(o);
  write_json(fs::path(o.out) / "manifest.json", m);
}

void count_ops_cmd(const Options& o) {
  const RunConfig cfg = load(o);
  const auto data = load_streams(o, cfg);
  const auto net = load_network(cfg, o.checkpoint);
  ops_into(cfg, net, o.reference, data, !o.events.empty(), o.out);
  json m = manifest(cfg, "count-ops");
  if (!o.events.empty()) m["inputs"] = inputs_of(o);
  write_json(fs::path(o.out) / "manifest.json", m);
}

RunConfig child_config(RunConfig cfg, const std::string& axis, double value) {
  const int v = static_cast<int>(std::lround(value));
  if (v < 1 || std::abs(value - v) > 1e-9) throw ConfigError("sweep values must be positive integers");
  if (axis == "bits") {
    cfg.network.cell = CellKind::spiking;
    cfg.network.bits = v;
  } else if (axis == "rate") {
    // Same ground-truth period, v counts per period.
    auto retime = [&](int& steps_per_count, int& counts_per_gt) {
      const int period = steps_per_count * counts_per_gt;
      if (period % v != 0)
        throw ConfigError("ground-truth period of " + std::to_string(period) + " steps is not divisible by " +
                          std::to_string(v));
      steps_per_count = period / v;
      counts_per_gt = v;
    };
    retime(cfg.scene_set.steps_per_count_interval, cfg.scene_set.counts_per_gt);
    for (auto& s : cfg.scenes) retime(s.steps_per_count_interval, s.counts_per_gt);
    const auto m = static_cast<std::size_t>(v);
    if (cfg.train.l == cfg.train.m) cfg.train.l = m;
    if (cfg.train.mask_window == cfg.train.m) cfg.train.mask_window = m;
    cfg.train.m = m;
  } else {
    throw ConfigError("sweep axis must be 'bits' or 'rate', got '" + axis + "'");
  }
  return cfg.resolved();
}

void sweep_cmd(const Options& o) {
  if (o.values.empty()) throw ConfigError("sweep needs at least one value");
  const RunConfig base = load(o);
  const fs::path out(o.out);
  ensure_dir(out);
  std::ostringstream csv;
  csv << "axis,value,parameters,aee,1pe,2pe,3pe,4pe,5pe,dense_total,effective_total,input_ratio,"
         "reference_ratio,parameter_ratio\n";
  json children = json::array();
  std::vector<RunConfig> configs;
  for (double value : o.values) configs.push_back(child_config(base, o.axis, value));
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const RunConfig& cfg = configs[i];
    const std::string name = o.axis + "_" + num(o.values[i]);
    logger()->info("sweep child {}", name);
    const auto data = load_streams(Options{}, cfg);
    const auto net = train_into(cfg, data, out / name, json::object());
    const auto report = eval_into(cfg, net, data, false, out / name / "eval");
    const auto ops = ops_into(cfg, net, "", data, false, out / name / "ops");
    csv << o.axis << ',' << num(o.values[i]) << ',' << ops.parameters << ',' << num(report.aee);
    for (double k : report.kpe) csv << ',' << num(k);
    csv << ',' << ops.dense_total << ',' << ops.effective_total << ',' << num(ops.input_ratio()) << ','
        << num(ops.reference_ratio) << ',' << num(ops.parameter_ratio) << '\n';
    children.push_back({{"name", name}, {"value", o.values[i]}, {"dir", name}});
  }
  write_text(out / "sweep.csv", csv.str());
  json m = manifest(base, "sweep");
  m["sweep"] = {{"axis", o.axis}, {"values", o.values}, {"children", children}};
  write_json(out / "manifest.json", m);
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Temporally dense optical flow from event streams"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", o.config, "JSON run config or manifest");
    if (config_required) c->required();
    sub->add_option("--out", o.out, "output directory")->required();
    sub->add_option("--seed", o.seed, "overrides the config seed");
    sub->add_option("--threads", o.threads, "gradient worker threads");
  };
  auto inputs = [&](CLI::App* sub) {
    sub->add_option("--events", o.events, "EVT1 files (repeatable)");
    sub->add_option("--flows", o.flows, "FLO1 files, one per --events");
  };

  auto* simulate = app.add_subcommand("simulate", "render scenes and write EVT1 + FLO1");
  common(simulate, false);
  auto* train = app.add_subcommand("train", "train on simulated or given streams");
  common(train, false);
  inputs(train);
  auto* eval = app.add_subcommand("eval", "continuous-stream evaluation");
  common(eval, false);
  inputs(eval);
  eval->add_option("--checkpoint", o.checkpoint, "CKPT1 weights")->required();
  auto* ops = app.add_subcommand("count-ops", "multiply counts under input sparsity");
  common(ops, false);
  inputs(ops);
  ops->add_option("--checkpoint", o.checkpoint, "CKPT1 weights; default is the seeded initialization");
  ops->add_option("--reference", o.reference, "CKPT1 weights of the LSTM reference");
  auto* sweep = app.add_subcommand("sweep", "bit or rate sweep, one combined CSV");
  common(sweep, false);
  sweep->add_option("--axis", o.axis, "bits or rate")->required();
  sweep->add_option("--values", o.values, "sweep values")->delimiter(',');

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*simulate) simulate_cmd(o);
    else if (*train) train_cmd(o);
    else if (*eval) eval_cmd(o);
    else if (*ops) count_ops_cmd(o);
    else if (*sweep) sweep_cmd(o);
    return ok;
  } catch (const NumericalFailure& e) {
    logger()->error("{}", e.what());
    return numerical_failure;
  } catch (const IoError& e) {
    logger()->error("{}", e.what());
    return io_error;
  } catch (const FormatError& e) {
    logger()->error("{}", e.what());
    return io_error;
  } catch (const fs::filesystem_error& e) {
    logger()->error("{}", e.what());
    return io_error;
  } catch (const std::invalid_argument& e) {
    logger()->error("{}", e.what());
    return config_error;
  } catch (const std::exception& e) {
    logger()->error("{}", e.what());
    return io_error;
  }
}

}  // namespace evflow::cli
