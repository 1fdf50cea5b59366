// beamsight: one entry point for every pipeline stage.
//
// Exit status: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure. Every failure prints a single diagnostic line.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "beamsight/attribution.hpp"
#include "beamsight/beamstats.hpp"
#include "beamsight/checkpoint.hpp"
#include "beamsight/config.hpp"
#include "beamsight/dataset.hpp"
#include "beamsight/pipeline.hpp"
#include "beamsight/synth.hpp"
#include "beamsight/tdist.hpp"
#include "beamsight/testing/gradcheck.hpp"
#include "beamsight/trainer.hpp"

namespace fs = std::filesystem;
using namespace beamsight;
using namespace beamsight::testing;

namespace {

constexpr int kExitUsage = 1, kExitData = 2, kExitNumeric = 3;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::NotScalar:
      return kExitUsage;
    case ErrorKind::DivergedLoss:
    case ErrorKind::NonFinite:
    case ErrorKind::InvalidDf:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

// Flag values; unset flags leave the config untouched.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> out;

  std::optional<std::string> corpus, checkpoint, beam_map, manifest;
  std::optional<std::size_t> n_hazard, n_safe, image_size;
  std::optional<double> beam_count_mean;
  std::optional<double> radius;
  bool paired = false;
  std::optional<double> val_fraction;
  std::optional<bool> group_by_source;
  std::optional<std::size_t> epochs, batch_size, source_epochs, source_per_class;
  std::optional<double> learning_rate;
  std::optional<std::size_t> steps, limit;
  std::optional<int> target;
  std::optional<double> tolerance;
  std::size_t instances = 20;
};

fs::path absolute_path(const std::string& p) { return fs::weakly_canonical(fs::absolute(p)); }

RunConfig resolve_config(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.workers) {
    c.workers = *o.workers;
    c.deterministic = *o.workers == 1;
  }
  if (o.out) c.paths.out = *o.out;
  if (c.paths.out.empty()) {
    const char* env = std::getenv("BEAMSIGHT_OUT");
    c.paths.out = env && *env ? env : "beamsight_out";
  }
  c.paths.out = absolute_path(c.paths.out).string();
  if (o.corpus) c.paths.corpus = *o.corpus;
  if (c.paths.corpus.empty()) c.paths.corpus = (fs::path(c.paths.out) / "corpus").string();
  c.paths.corpus = absolute_path(c.paths.corpus).string();
  auto abs_if = [](std::string& p, const std::optional<std::string>& flag) {
    if (flag) p = *flag;
    if (!p.empty()) p = absolute_path(p).string();
  };
  abs_if(c.paths.checkpoint, o.checkpoint);
  abs_if(c.paths.beam_map, o.beam_map);
  abs_if(c.paths.manifest, o.manifest);

  if (o.n_hazard) c.generate.n_hazard = *o.n_hazard;
  if (o.n_safe) c.generate.n_safe = *o.n_safe;
  if (o.image_size) c.synth.image_size = *o.image_size;
  if (o.beam_count_mean) c.synth.beam_count_mean = *o.beam_count_mean;
  if (o.radius) c.stats.radius = *o.radius;
  if (o.paired) c.stats.paired = true;
  if (o.val_fraction) c.split.val_fraction = *o.val_fraction;
  if (o.group_by_source) c.split.group_by_source = *o.group_by_source;
  if (o.epochs) c.hparams.epochs = *o.epochs;
  if (o.batch_size) c.hparams.batch_size = *o.batch_size;
  if (o.learning_rate) c.hparams.learning_rate = *o.learning_rate;
  if (o.source_epochs) c.source.hparams.epochs = *o.source_epochs;
  if (o.source_per_class) c.source.per_class = *o.source_per_class;
  if (o.steps) c.attribution.steps = *o.steps;
  if (o.limit) c.attribution.limit = *o.limit;
  if (o.target) c.attribution.target = *o.target;
  if (o.tolerance) c.attribution.tolerance = *o.tolerance;

  c.resolve();
  c.validate();
  apply_worker_policy(c);
  return c;
}

fs::path stage_dir(const RunConfig& c, const std::string& name) {
  const fs::path d = fs::path(c.paths.out) / name;
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) fail(ErrorKind::IOError, "cannot create " + d.string() + ": " + ec.message());
  save_config(c, d / "config.json");
  return d;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  if (!out) fail(ErrorKind::IOError, "cannot write " + p.string());
  out << text;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

std::string require_path(const std::string& p, const char* flag) {
  if (p.empty()) fail(ErrorKind::InvalidConfig, std::string("missing ") + flag);
  return p;
}

EpochCallback progress(const std::string& stage) {
  return [stage](const EpochRecord& r) {
    std::fprintf(stderr, "[%s] epoch %zu  loss %.4f  train %.3f  val %.3f\n", stage.c_str(), r.epoch, r.mean_loss,
                 r.train_accuracy, r.validation_accuracy);
  };
}

nlohmann::json confusion_json(const ConfusionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t a = 0; a < m.classes(); ++a) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < m.classes(); ++p) row.push_back(m.at(a, p));
    rows.push_back(row);
  }
  nlohmann::json recall = nlohmann::json::array();
  for (std::size_t a = 0; a < m.classes(); ++a) recall.push_back(m.recall(a));
  return {{"counts", rows}, {"accuracy", m.accuracy()}, {"recall", recall}};
}

std::string file_stem(const std::string& key) {
  std::string s = key;
  for (char& ch : s)
    if (ch == '#') ch = '_';
  return s;
}

// --- subcommands -------------------------------------------------------------

int cmd_generate(const RunConfig& c) {
  const fs::path dir = stage_dir(c, "generate");
  const fs::path root = c.paths.corpus;
  const auto images = generate_synthetic(c.generate.n_hazard, c.generate.n_safe, c.synth);
  for (const char* sub : {"hazard", "nonhazard", "masks"}) fs::create_directories(root / sub);
  parallel_for(0, images.size(), [&](std::size_t i) {
    const ImageSample& s = images[i];
    save_png(s.image, root / label_name(s.label) / (s.source_id + ".png"));
    if (s.beam_mask) save_png(mask_image(*s.beam_mask), root / "masks" / (s.source_id + ".png"));
  });
  std::vector<ManifestRow> rows;
  for (const auto& s : images)
    rows.push_back({s.source_id, s.label,
                    {{"height", std::to_string(s.image.height)},
                     {"width", std::to_string(s.image.width)},
                     {"beam_count", std::to_string(s.beam_count)}}});
  write_manifest(root / "manifest.tsv", {"height", "width", "beam_count"}, rows);
  write_json(root / "synth.json", c.synth);
  std::ostringstream os;
  os << "generated " << c.generate.n_hazard << " hazard + " << c.generate.n_safe << " nonhazard images ("
     << c.synth.image_size << " px) under " << root.string() << "\n";
  write_text(dir / "summary.txt", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_stats(const RunConfig& c) {
  const fs::path dir = stage_dir(c, "stats");
  const BeamMap map = parse_beam_map(require_path(c.paths.beam_map, "--beam-map"));
  std::ostringstream loc;
  loc << "kind\tx\ty\tfrequency\tmean_depth\n" << std::setprecision(9);
  auto emit = [&](const char* kind, const std::vector<Point>& pts) {
    for (Point p : pts) {
      const CircleStats s = circle_stats(map, p, c.stats.radius);
      loc << kind << '\t' << p.x << '\t' << p.y << '\t' << s.frequency << '\t';
      if (s.mean_depth) loc << *s.mean_depth;
      loc << '\n';
    }
  };
  emit("fall", map.falls);
  emit("control", map.controls);
  write_text(dir / "locations.tsv", loc.str());

  std::string text;
  if (map.falls.size() >= 2 && map.controls.size() >= 2) {
    const SummaryTable t = summary_table(map, c.stats.radius, c.stats.paired ? TestKind::paired : TestKind::welch);
    write_text(dir / "stats.tsv", summary_tsv(t));
    text = summary_text(t);
  } else {
    text = loc.str() + "t-tests skipped: they need at least two falls and two controls\n";
  }
  write_text(dir / "stats.txt", text);
  std::cout << text;
  return 0;
}

int cmd_preprocess(const RunConfig& c) {
  const fs::path dir = stage_dir(c, "preprocess");
  std::vector<ImageSample> photos;
  std::size_t side = c.model.input_size;
  if (!c.paths.manifest.empty()) {
    photos = manifest_placeholders(read_manifest(c.paths.manifest));
    side = 1;  // counts only
  } else {
    photos = load_corpus(c.paths.corpus);
  }
  const auto tiles = model_tiles(photos, side);
  const Split sp = split(tiles, c.split);
  const auto all = label_counts(tiles), tr = label_counts(sp.train), va = label_counts(sp.val);
  auto at = [](const std::map<int, std::size_t>& m, int k) { return m.count(k) ? m.at(k) : std::size_t{0}; };

  std::ostringstream os;
  os << "photos " << photos.size() << "  tiles " << tiles.size() << "\n";
  os << "label\ttiles\ttrain\tval\n";
  for (int k : {Hazardous, NonHazardous})
    os << label_name(k) << '\t' << at(all, k) << '\t' << at(tr, k) << '\t' << at(va, k) << '\n';
  write_text(dir / "counts.tsv", os.str());

  std::string assign = "key\tlabel\tside\n";
  for (const auto& s : sp.train) assign += s.key() + '\t' + label_name(s.label) + "\ttrain\n";
  for (const auto& s : sp.val) assign += s.key() + '\t' + label_name(s.label) + "\tval\n";
  write_text(dir / "split.tsv", assign);
  std::cout << os.str();
  return 0;
}

int cmd_train(const RunConfig& c) {
  const fs::path dir = stage_dir(c, "train");
  const Split sp = target_split(load_corpus(c.paths.corpus), c);
  Model<float> model = build_model<float>(c.model, keyed_stream(c.seed, hash_label("scratch")).next_u64());
  model.apply_freeze_policy(FreezePolicy::none);
  TrainResult<float> r;
  try {
    r = train(model, sp.train, sp.val, c.hparams, progress("train"));
  } catch (const TrainingDiverged& e) {
    write_bytes(dir / "last_finite.rfhd", e.last_checkpoint());
    throw;
  }
  save_checkpoint(r.best, dir / "model.rfhd");
  write_text(dir / "history.tsv", history_tsv(r.history));
  const ConfusionMatrix cm = evaluate(r.best, sp.val);
  write_text(dir / "confusion.txt", confusion_text(cm));
  write_json(dir / "report.json", {{"best_epoch", r.best_epoch},
                                   {"best_accuracy", r.best_accuracy},
                                   {"trained_parameters", model.trainable_parameter_count()},
                                   {"confusion", confusion_json(cm)}});
  std::cout << "best epoch " << r.best_epoch << "  validation accuracy " << r.best_accuracy << "\n"
            << confusion_text(cm);
  return 0;
}

int cmd_transfer(const RunConfig& c) {
  const fs::path dir = stage_dir(c, "transfer");
  const Split sp = target_split(load_corpus(c.paths.corpus), c);
  const auto source = source_task(c);
  const StageCallback cb = [](const std::string& stage, const EpochRecord& r) { progress(stage)(r); };
  const TransferReport<float> rep = transfer_experiment<float>(source, sp.train, sp.val, transfer_options(c), cb);

  save_checkpoint(rep.transfer.best, dir / "transfer.rfhd");
  save_checkpoint(rep.scratch.best, dir / "scratch.rfhd");
  write_text(dir / "pretrain_history.tsv", history_tsv(rep.pretrain_history));
  write_text(dir / "transfer_history.tsv", history_tsv(rep.transfer.history));
  write_text(dir / "scratch_history.tsv", history_tsv(rep.scratch.history));
  const ConfusionMatrix ct = evaluate(rep.transfer.best, sp.val), cs = evaluate(rep.scratch.best, sp.val);
  write_text(dir / "confusion.txt", "transfer\n" + confusion_text(ct) + "\nscratch\n" + confusion_text(cs));
  auto arm = [](const ArmReport<float>& a, const ConfusionMatrix& m) {
    return nlohmann::json{{"best_epoch", a.best_epoch},
                          {"best_accuracy", a.best_accuracy},
                          {"trained_parameters", a.trained_parameters},
                          {"confusion", confusion_json(m)}};
  };
  write_json(dir / "report.json", {{"pretrain_best_accuracy", rep.pretrain_best_accuracy},
                                   {"frozen_backbone_identical", rep.frozen_backbone_identical},
                                   {"transfer", arm(rep.transfer, ct)},
                                   {"scratch", arm(rep.scratch, cs)}});
  std::cout << "source task accuracy " << rep.pretrain_best_accuracy << "\n"
            << "transfer (head only, " << rep.transfer.trained_parameters << " parameters): accuracy "
            << rep.transfer.best_accuracy << "\n"
            << "scratch (" << rep.scratch.trained_parameters << " parameters): accuracy " << rep.scratch.best_accuracy
            << "\n"
            << "frozen backbone byte-identical: " << (rep.frozen_backbone_identical ? "yes" : "no") << "\n";
  return 0;
}

Model<float> load_model(const RunConfig& c) {
  Model<float> m = load_checkpoint<float>(require_path(c.paths.checkpoint, "--checkpoint"));
  if (m.config().input_size != c.model.input_size)
    fail(ErrorKind::ShapeMismatch, "checkpoint input size " + std::to_string(m.config().input_size) +
                                       " differs from model.input_size " + std::to_string(c.model.input_size));
  return m;
}

int cmd_evaluate(const RunConfig& c) {
  const fs::path dir = stage_dir(c, "evaluate");
  const Model<float> model = load_model(c);
  const Split sp = target_split(load_corpus(c.paths.corpus), c);
  const ConfusionMatrix cm = evaluate(model, sp.val);
  write_text(dir / "confusion.txt", confusion_text(cm));
  write_json(dir / "confusion.json", confusion_json(cm));
  std::cout << "validation tiles " << sp.val.size() << "  accuracy " << cm.accuracy() << "\n" << confusion_text(cm);
  return 0;
}

int cmd_attribute(const RunConfig& c) {
  const fs::path dir = stage_dir(c, "attribute");
  const Model<float> model = load_model(c);
  if (c.attribution.target >= static_cast<int>(model.config().num_classes))
    fail(ErrorKind::InvalidConfig, "attribution.target exceeds the checkpoint's classes");
  const Split sp = target_split(load_corpus(c.paths.corpus), c);
  std::vector<ImageSample> val = sp.val;
  if (c.attribution.limit && val.size() > c.attribution.limit) val.resize(c.attribution.limit);
  const auto pred = predict(model, val);
  for (int k : {Hazardous, NonHazardous}) fs::create_directories(dir / "heatmaps" / label_name(k));

  std::vector<AttributionRecord> rows(val.size());
  parallel_for(0, val.size(), [&](std::size_t i) {
    const ImageSample& s = val[i];
    const std::size_t target = c.attribution.target < 0 ? pred[i] : static_cast<std::size_t>(c.attribution.target);
    const AttributionMap map = integrated_gradients(model, s, target, c.attribution.steps);
    rows[i] = attribution_record(map, s, pred[i], c.attribution);
    nlohmann::json extra = {{"key", s.key()}, {"label", label_name(s.label)}, {"predicted", pred[i]}};
    if (rows[i].alignment) extra["beam_alignment"] = *rows[i].alignment;
    render_heatmap(map, s.image, dir / "heatmaps" / label_name(s.label) / file_stem(s.key()), extra);
  });

  std::string tsv = attribution_tsv_header();
  std::size_t complete = 0;
  std::vector<double> align;
  for (const auto& r : rows) {
    tsv += attribution_tsv_row(r);
    complete += r.complete;
    if (r.alignment && r.label == Hazardous && r.predicted == static_cast<std::size_t>(Hazardous))
      align.push_back(*r.alignment);
  }
  write_text(dir / "summary.tsv", tsv);
  std::ostringstream os;
  os << "attributed " << rows.size() << " validation tiles, m = " << c.attribution.steps << "\n"
     << "completeness within " << c.attribution.tolerance * 100 << "%: " << complete << "/" << rows.size() << "\n";
  if (!align.empty())
    os << "median beam alignment (" << align.size() << " correct hazard tiles): " << median(align) << "\n";
  write_text(dir / "summary.txt", os.str());
  std::cout << os.str();
  return 0;
}

int cmd_selftest(const RunConfig& c, std::size_t instances) {
  const fs::path dir = stage_dir(c, "selftest");
  std::size_t passed = 0, total = 0;
  std::ostringstream os;
  auto check = [&](const std::string& name, bool ok, const std::string& detail) {
    ++total;
    passed += ok;
    os << (ok ? "pass  " : "FAIL  ") << name << "  " << detail << "\n";
  };
  auto fmt = [](double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.3g", v);
    return std::string(b);
  };

  for (OpKind k : differentiable_ops()) {
    const OpCheckSummary s = check_op(k, instances, c.seed);
    check(std::string("gradient ") + to_string(k), s.passed == s.instances,
          std::to_string(s.passed) + "/" + std::to_string(s.instances) + " worst rel err " + fmt(s.worst));
  }
  const GradCheckResult net = check_small_network(c.seed);
  check("gradient small network", net.max_rel_error < 1e-4, "worst rel err " + fmt(net.max_rel_error));

  {
    // F(x) = 2 x0 - x1 at (0.5, 0.5): attributions (1, -0.5) for any m.
    const ScalarFn f = [](const Tensor<double>& x) { return 2 * x[0] - x[1]; };
    const BatchGradientFn g = [](const std::vector<Tensor<double>>& pts) {
      std::vector<Tensor<double>> out;
      for (std::size_t i = 0; i < pts.size(); ++i) out.push_back(Tensor<double>({2}, std::vector<double>{2.0, -1.0}));
      return out;
    };
    const Tensor<double> x({2}, std::vector<double>{0.5, 0.5});
    bool ok = true;
    for (std::size_t m : {1, 7, 64}) {
      const AttributionMap a = integrated_gradients(f, g, x, Tensor<double>({2}), m);
      ok = ok && a.attributions[0] == 1.0 && a.attributions[1] == -0.5 && completeness_check(a, 0.0);
    }
    check("integrated gradients linear oracle", ok, "m in {1, 7, 64}");
  }
  {
    ModelConfig mc;
    mc.input_size = 32;
    mc.stem_channels = 4;
    mc.blocks_per_stage = {1, 1, 1};
    const Model<float> model = build_model<float>(mc, c.seed + 1);
    SynthConfig sc;
    sc.image_size = 32;
    sc.seed = c.seed;
    const auto imgs = generate_synthetic(1, 1, sc);
    double worst = 0.0;
    for (const auto& s : imgs) {
      const AttributionMap a = integrated_gradients(model, s, 0, 256);
      worst = std::max(worst, a.completeness_residual / std::max(std::fabs(a.f_x - a.f_baseline), 1e-8));
    }
    check("integrated gradients completeness", worst <= 0.01, "worst relative residual " + fmt(worst) + " at m = 256");
  }
  {
    const double p = two_sided_p(12.706, 1.0);
    const double cauchy = 2.0 * (1.0 - (0.5 + std::atan(12.706) / std::numbers::pi));
    check("t cdf Cauchy closed form", std::fabs(p - cauchy) < 1e-10 && std::fabs(p - 0.05) < 1e-4, "p = " + fmt(p));
    const double pn = two_sided_p(1.95996, 1e6);
    const double normal = std::erfc(1.95996 / std::sqrt(2.0));
    check("t cdf normal limit", std::fabs(pn - normal) < 1e-4, "p = " + fmt(pn));
    double worst = 0.0;
    for (double t : {-8.0, -2.5, -0.3, 0.0, 0.7, 3.1}) worst = std::max(worst, std::fabs(t_cdf(t, 7.5) + t_cdf(-t, 7.5) - 1.0));
    check("t cdf symmetry", worst < 1e-10, "worst " + fmt(worst));
  }

  os << "selftest: " << passed << "/" << total << " passed\n";
  write_text(dir / "selftest.txt", os.str());
  std::cout << os.str();
  return passed == total ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"beamsight: roof-beam hazard classification, attribution and field statistics"};
  app.require_subcommand(1);
  app.fallthrough();
  Overrides o;
  app.add_option("--config", o.config, "Experiment configuration (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Master seed");
  app.add_option("--workers", o.workers, "Worker threads (1 implies deterministic mode, 0 uses all cores)");
  app.add_option("--out", o.out, "Output root (fallback: $BEAMSIGHT_OUT)");

  auto* gen = app.add_subcommand("generate", "Write a synthetic roof-image corpus with beam masks");
  gen->add_option("--n-hazard", o.n_hazard, "Hazardous images");
  gen->add_option("--n-safe", o.n_safe, "Non-hazardous images");
  gen->add_option("--image-size", o.image_size, "Image side in pixels");
  gen->add_option("--beam-count-mean", o.beam_count_mean, "Mean streaks per hazardous image");

  auto* stats = app.add_subcommand("stats", "Fall-versus-control beam statistics from a beam map");
  stats->add_option("--beam-map", o.beam_map, "Beam-map JSON");
  stats->add_option("--radius", o.radius, "Circle radius in meters");
  stats->add_flag("--paired", o.paired, "Pair falls[i] with controls[i] (default: Welch)");

  auto* pre = app.add_subcommand("preprocess", "Tile, resample and split a corpus; report counts");
  pre->add_option("--manifest", o.manifest, "Count-only run from a manifest (no pixels)");
  pre->add_option("--val-fraction", o.val_fraction, "Validation share per label");
  pre->add_option("--group-by-source", o.group_by_source, "Keep every tile of a photograph on one side");

  auto* tr = app.add_subcommand("train", "Train every parameter on the target corpus");
  auto* tf = app.add_subcommand("transfer", "Source pretraining, head-only retraining and a scratch arm");
  auto* ev = app.add_subcommand("evaluate", "Confusion matrix of a checkpoint on the validation split");
  auto* at = app.add_subcommand("attribute", "Integrated-gradients heatmaps for validation tiles");
  auto* st = app.add_subcommand("selftest", "Gradient, completeness and t-distribution oracles");

  for (auto* s : {pre, tr, tf, ev, at, gen}) s->add_option("--corpus", o.corpus, "Corpus root");
  for (auto* s : {tr, tf}) {
    s->add_option("--epochs", o.epochs, "Target-task epochs");
    s->add_option("--batch-size", o.batch_size, "Minibatch size");
    s->add_option("--lr", o.learning_rate, "Learning rate");
    s->add_option("--group-by-source", o.group_by_source, "Keep every tile of a photograph on one side");
  }
  tf->add_option("--source-epochs", o.source_epochs, "Source-task epochs");
  tf->add_option("--source-per-class", o.source_per_class, "Source-task images per class");
  for (auto* s : {ev, at}) {
    s->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
    s->add_option("--group-by-source", o.group_by_source, "Keep every tile of a photograph on one side");
  }
  at->add_option("--steps", o.steps, "Integration steps m");
  at->add_option("--limit", o.limit, "Attribute at most this many validation tiles (0: all)");
  at->add_option("--target", o.target, "Class to explain (-1: predicted class)");
  at->add_option("--tolerance", o.tolerance, "Completeness tolerance (fraction)");
  st->add_option("--instances", o.instances, "Randomized instances per operation")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const RunConfig c = resolve_config(o);
    if (name == "generate") return cmd_generate(c);
    if (name == "stats") return cmd_stats(c);
    if (name == "preprocess") return cmd_preprocess(c);
    if (name == "train") return cmd_train(c);
    if (name == "transfer") return cmd_transfer(c);
    if (name == "evaluate") return cmd_evaluate(c);
    if (name == "attribute") return cmd_attribute(c);
    return cmd_selftest(c, o.instances);
  } catch (const Error& e) {
    std::cerr << "beamsight " << name << ": " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "beamsight " << name << ": " << e.what() << "\n";
    return kExitData;
  }
}
