// predmap: command-line driver. Every subcommand reads and writes files under --run-dir.
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "predmap/predmap.hpp"

namespace fs = std::filesystem;
using namespace predmap;
using io::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool quiet = false;
  unsigned threads = 1;
  fs::path run_dir = "run";
};

// Files inside a run directory.
namespace file {
constexpr const char* predictions = "predictions.csv";
constexpr const char* fitted = "fitted_predictions.csv";
constexpr const char* embedding = "embedding.csv";
constexpr const char* student = "student.json";
constexpr const char* trace = "trace.csv";
constexpr const char* svd_embedding = "svd_embedding.csv";
constexpr const char* svd_model = "svd_model.json";
constexpr const char* scores = "scores.csv";
constexpr const char* metrics = "metrics.json";
constexpr const char* confusion = "confusion.csv";
constexpr const char* contours = "contours.json";
constexpr const char* manifest = "manifest.json";
constexpr const char* artifact = "run.json";
}  // namespace file

void note(const Globals& g, const std::string& msg) {
  if (!g.quiet) std::cerr << msg << '\n';
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto v = io::parse_number<T>(io::trim(item));
    if (!v) throw UsageError(std::string("bad ") + what + " entry '" + item + "'");
    out.push_back(*v);
  }
  return out;
}

// "epoch:T,epoch:T,..."
std::vector<TemperatureBreakpoint> parse_schedule(const std::string& text) {
  std::vector<TemperatureBreakpoint> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw UsageError("anneal breakpoint '" + item + "' must look like epoch:T");
    const auto e = io::parse_number<double>(io::trim(std::string_view(item).substr(0, colon)));
    const auto t = io::parse_number<double>(io::trim(std::string_view(item).substr(colon + 1)));
    if (!e || !t) throw UsageError("bad anneal breakpoint '" + item + "'");
    out.push_back({*e, *t});
  }
  return out;
}

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  auto out = io::open_output(path);
  out << j.dump(1) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// Records a subcommand's settings so `export` can echo them.
void record_config(const Globals& g, const std::string& section, const json& cfg) {
  const fs::path path = g.run_dir / file::manifest;
  json m = fs::exists(path) ? read_json(path) : json{{"config", json::object()}};
  m["seed"] = g.seed;
  m["config"][section] = cfg;
  write_json(m, path);
}

// The table the student was fitted on, falling back to the raw input.
PredictionTable load_fitted(const Globals& g, const std::string& input) {
  if (!input.empty()) return io::load_predictions(input, io::format_from_extension(input));
  const fs::path fitted = g.run_dir / file::fitted;
  return io::load_predictions_csv(fs::exists(fitted) ? fitted : g.run_dir / file::predictions);
}

StudentParams load_student(const Globals& g) { return io::student_from_json(read_json(g.run_dir / file::student)); }

EmbeddingTable load_embedding(const Globals& g, std::size_t rows) {
  auto emb = io::load_embedding_csv(g.run_dir / file::embedding);
  emb.validate(rows);
  return emb;
}

std::vector<ContourSet> load_contours(const fs::path& path) {
  std::vector<ContourSet> out;
  for (const auto& cs : read_json(path)) {
    ContourSet set;
    set.level = cs.at("level").get<double>();
    for (const auto& p : cs.at("paths")) {
      std::vector<Vec2> poly;
      for (const auto& v : p) poly.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
      set.polylines.push_back(std::move(poly));
    }
    out.push_back(std::move(set));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct SynthArgs {
  SynthConfig cfg;
  std::vector<std::string> pairs;  // "i,j,strength"
};

void run_synth(const Globals& g, SynthArgs a) {
  a.cfg.seed = g.seed;
  json pairs = json::array();
  for (const auto& p : a.pairs) {
    const auto v = parse_list<double>(p, "pair");
    if (v.size() != 3 || v[0] < 0 || v[1] < 0) throw UsageError("--pair expects i,j,strength");
    a.cfg.confusable_pairs.push_back({static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]), v[2]});
    pairs.push_back(v);
  }
  const auto table = synth_teacher(a.cfg);
  io::save_predictions_csv(table, g.run_dir / file::predictions);
  record_config(g, "synth",
                {{"classes", a.cfg.classes},
                 {"n", a.cfg.n},
                 {"pairs", pairs},
                 {"outlier_fraction", a.cfg.outlier_fraction},
                 {"radius", a.cfg.radius},
                 {"spread", a.cfg.spread},
                 {"tau", a.cfg.tau}});
  note(g, "wrote " + (g.run_dir / file::predictions).string());
}

struct FitArgs {
  std::string input;
  std::string format;
  TrainConfig cfg;
  std::string mode = "joint";
  std::string init = "cluster-center";
  std::string anneal;
  std::string subset;
};

void run_fit(const Globals& g, FitArgs a) {
  const std::string input = a.input.empty() ? (g.run_dir / file::predictions).string() : a.input;
  const auto fmt = a.format.empty() ? io::format_from_extension(input)
                                    : (a.format == "jsonl" ? io::PredictionFormat::jsonl : io::PredictionFormat::csv);
  PredictionTable preds = io::load_predictions(input, fmt);
  if (!a.subset.empty()) {
    const auto keep = parse_list<std::size_t>(a.subset, "subset");
    preds = apply_subset_mask(preds, SubsetMask::from_indices(preds.n_classes(), keep));
  }
  a.cfg.seed = g.seed;
  a.cfg.threads = g.threads;
  a.cfg.deterministic = true;
  a.cfg.mode = a.mode == "coordinate" ? TrainMode::coordinate : TrainMode::joint;
  a.cfg.init = a.init == "random" ? InitMode::random : InitMode::cluster_center;
  if (!a.anneal.empty()) a.cfg.temperature_schedule = parse_schedule(a.anneal);
  a.cfg.batch_size = std::min(a.cfg.batch_size, preds.n_rows());

  const auto result = train(preds, a.cfg, [&](const TraceRecord& r) {
    if (!g.quiet && (r.epoch == 1 || r.epoch % 100 == 0 || r.epoch == a.cfg.epochs))
      std::cerr << "epoch " << r.epoch << "  T=" << r.temperature << "  loss=" << r.loss
                << "  acc_teacher=" << r.acc_teacher << '\n';
    return true;
  });

  io::save_predictions_csv(preds, g.run_dir / file::fitted);
  io::save_embedding_csv(result.embedding, preds.row_ids(), g.run_dir / file::embedding);
  write_json(io::student_to_json(result.params), g.run_dir / file::student);
  io::save_trace_csv(result.trace, g.run_dir / file::trace);
  json schedule = json::array();
  for (const auto& b : a.cfg.temperature_schedule) schedule.push_back({b.epoch, b.temperature});
  record_config(g, "fit",
                {{"input", a.input.empty() ? std::string(file::predictions) : a.input},
                 {"epochs", a.cfg.epochs},
                 {"batch_size", a.cfg.batch_size},
                 {"lr_means", a.cfg.lr_means},
                 {"lr_prior", a.cfg.lr_prior},
                 {"lr_embed", a.cfg.lr_embed},
                 {"mode", a.mode},
                 {"init", a.init},
                 {"anneal", schedule},
                 {"subset", a.subset.empty() ? json(nullptr) : json(parse_list<std::size_t>(a.subset, "subset"))},
                 {"dof", a.cfg.dof}});
  note(g, "wrote embedding, student and trace to " + g.run_dir.string());
}

void run_svd(const Globals& g, const std::string& input) {
  const auto preds = load_fitted(g, input);
  const Matrix logits = preds.teacher_logits();
  const auto model = fit_svd(logits);
  if (model.rank_deficient) note(g, "warning: logit matrix has rank < 2; second SVD direction set to zero");
  io::save_embedding_csv(model.embedding(), preds.row_ids(), g.run_dir / file::svd_embedding);
  json w = json::array();
  for (std::size_t r = 0; r < 2; ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < model.weights.cols(); ++c) row.push_back(model.weights(r, c));
    w.push_back(row);
  }
  const std::size_t agree = svd_agreement_count(model, logits);
  write_json({{"weights", w},
              {"sigma", {model.sigma1, model.sigma2}},
              {"residual", model.residual},
              {"rank_deficient", model.rank_deficient},
              {"agreement", static_cast<double>(agree) / static_cast<double>(preds.n_rows())}},
             g.run_dir / file::svd_model);
  note(g, "svd agreement with teacher: " + std::to_string(agree) + "/" + std::to_string(preds.n_rows()));
}

struct ConfidenceArgs {
  std::string input;
  std::string kinds = "kde,gmm,dmm,entropy";
  std::size_t components = 0;  // 0: one per class
};

void run_confidence(const Globals& g, const ConfidenceArgs& a) {
  const auto preds = load_fitted(g, a.input);
  const auto emb = load_embedding(g, preds.n_rows());
  const auto params = load_student(g);
  const std::size_t comps = a.components == 0 ? std::min(preds.n_classes(), preds.n_rows()) : a.components;
  EmConfig em;
  em.seed = g.seed;

  io::ScoreTable scores;
  std::stringstream ss(a.kinds);
  std::string kind;
  while (std::getline(ss, kind, ',')) {
    ConfidenceModel model;
    if (kind == "kde") {
      model = fit_kde(emb);
      for (const auto& w : std::get<KdeModel>(model.model).warnings) note(g, "warning: " + w);
    } else if (kind == "gmm") {
      model = fit_gmm(emb, comps, em);
    } else if (kind == "dmm") {
      model = fit_dmm(preds, comps, em);
    } else if (kind == "entropy") {
      model = ConfidenceModel{EntropyModel{}};
    } else {
      throw UsageError("unknown confidence kind '" + kind + "'");
    }
    scores[kind] = score(model, {&emb, &preds}, g.threads);
  }
  io::save_scores_csv(scores, preds.row_ids(), g.run_dir / file::scores);

  if (!preds.labels()) {
    note(g, "no labels in predictions; rejection curves skipped");
  } else {
    const auto predicted = student_argmax(emb, params);
    const auto grid = default_rejection_grid();
    for (const auto& [name, col] : scores) {
      const auto curve = rejection_curve(col, preds.labels(), predicted, grid);
      io::save_rejection_csv(curve, g.run_dir / ("rejection_" + name + ".csv"));
    }
  }
  record_config(g, "confidence", {{"kinds", a.kinds}, {"components", comps}});
  note(g, "wrote " + (g.run_dir / file::scores).string());
}

json compute_metrics(const Globals& g, const PredictionTable& preds, const EmbeddingTable& emb,
                     const StudentParams& params, const std::vector<std::size_t>& ks,
                     const std::vector<std::string>& names) {
  const auto report = metrics_report(preds, emb, params, ks, g.threads);
  if (report.confusion) io::save_confusion_csv(*report.confusion, names, g.run_dir / file::confusion);
  return io::metrics_to_json(report, names);
}

std::vector<std::string> class_names(const std::string& text, std::size_t k) {
  if (text.empty()) return io::default_class_names(k);
  std::vector<std::string> names;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) names.emplace_back(io::trim(item));
  if (names.size() != k)
    throw UsageError("--class-names lists " + std::to_string(names.size()) + " names for " + std::to_string(k) +
                     " classes");
  return names;
}

struct MetricsArgs {
  std::string input;
  std::string neighbours = "1,5,10,20";
  std::string names;
};

void run_metrics(const Globals& g, const MetricsArgs& a) {
  const auto preds = load_fitted(g, a.input);
  const auto emb = load_embedding(g, preds.n_rows());
  const auto params = load_student(g);
  const auto ks = parse_list<std::size_t>(a.neighbours, "neighbour count");
  const json m = compute_metrics(g, preds, emb, params, ks, class_names(a.names, preds.n_classes()));
  write_json(m, g.run_dir / file::metrics);
  std::ostringstream msg;
  msg << "kl_sym_final=" << m["kl_sym_final"] << " acc_teacher=" << m["acc_teacher"] << " acc_ground=" << m["acc_ground"];
  note(g, msg.str());
}

struct ContourArgs {
  double level = 0.001;
  std::size_t resolution = 200;
  double margin = 3.0;
};

void run_contour(const Globals& g, const ContourArgs& a) {
  const auto params = load_student(g);
  const auto set = trace_contour(params, a.level, bbox_around_means(params, a.margin), a.resolution);
  if (!set.warning.empty()) note(g, "warning: " + set.warning);
  json paths = json::array();
  for (const auto& poly : set.polylines) {
    json p = json::array();
    for (const Vec2& v : poly) p.push_back({v.x, v.y});
    paths.push_back(p);
  }
  write_json(json::array({{{"level", set.level}, {"paths", paths}}}), g.run_dir / file::contours);
  record_config(g, "contour", {{"level", a.level}, {"resolution", a.resolution}, {"margin", a.margin}});
  note(g, "traced " + std::to_string(set.polylines.size()) + " contour paths");
}

struct ExportArgs {
  std::string input;
  std::string out;
  std::string names;
};

void run_export(const Globals& g, const ExportArgs& a) {
  const auto preds = load_fitted(g, a.input);
  const auto emb = load_embedding(g, preds.n_rows());
  const auto params = load_student(g);
  const auto names = class_names(a.names, preds.n_classes());

  io::ScoreTable scores;
  if (fs::exists(g.run_dir / file::scores)) scores = io::load_scores_csv(g.run_dir / file::scores);
  const json metrics = fs::exists(g.run_dir / file::metrics)
                           ? read_json(g.run_dir / file::metrics)
                           : compute_metrics(g, preds, emb, params, {1, 5, 10, 20}, names);
  std::vector<ContourSet> contours;
  if (fs::exists(g.run_dir / file::contours)) contours = load_contours(g.run_dir / file::contours);
  json config = json::object();
  if (fs::exists(g.run_dir / file::manifest)) config = read_json(g.run_dir / file::manifest).value("config", json::object());

  auto artifact = io::build_run_artifact(preds, emb, params, scores, metrics, std::move(contours), config, g.seed, names);
  if (!g.deterministic) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    artifact.created = buf;
  }
  const fs::path out = a.out.empty() ? g.run_dir / file::artifact : fs::path(a.out);
  io::export_run(artifact, out);
  note(g, "wrote " + out.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embed a classifier's predictive distributions in 2-D and inspect them"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::string run_dir = "run";
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_flag("--deterministic", g.deterministic, "Bitwise-reproducible output (omits timestamps)");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress output");
  app.add_option("--threads", g.threads, "Worker threads; results do not depend on this")
      ->check(CLI::Range(1u, 256u))
      ->capture_default_str();
  app.add_option("--run-dir", run_dir, "Directory holding all run files")->capture_default_str();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic teacher's predictions");
  s->add_option("--classes", synth.cfg.classes, "Number of classes")->capture_default_str();
  s->add_option("--n", synth.cfg.n, "Number of rows")->capture_default_str();
  s->add_option("--pair", synth.pairs, "Confusable pair i,j,strength (repeatable)");
  s->add_option("--outliers", synth.cfg.outlier_fraction, "Fraction of rows between two classes")->capture_default_str();
  s->add_option("--radius", synth.cfg.radius, "Radius of the class-centre circle")->capture_default_str();
  s->add_option("--spread", synth.cfg.spread, "Latent spread around each centre")->capture_default_str();
  s->add_option("--tau", synth.cfg.tau, "Logit temperature")->capture_default_str();

  FitArgs fit;
  fit.cfg.lr_means = 1e-2;
  fit.cfg.lr_embed = 2e-2;
  auto* f = app.add_subcommand("fit", "Train the 2-D embedding and student classifier");
  f->add_option("-i,--input", fit.input, "Predictions file (default: <run-dir>/predictions.csv)");
  f->add_option("--format", fit.format, "csv or jsonl (default: from extension)")
      ->check(CLI::IsMember({"csv", "jsonl"}));
  f->add_option("--epochs", fit.cfg.epochs, "Training epochs")->capture_default_str();
  f->add_option("--batch", fit.cfg.batch_size, "Minibatch size")->capture_default_str();
  f->add_option("--lr-means", fit.cfg.lr_means, "Adam step for class means")->capture_default_str();
  f->add_option("--lr-prior", fit.cfg.lr_prior, "Adam step for prior logits")->capture_default_str();
  f->add_option("--lr-embed", fit.cfg.lr_embed, "Adam step for embedded points")->capture_default_str();
  f->add_option("--mode", fit.mode, "joint or coordinate")
      ->check(CLI::IsMember({"joint", "coordinate"}))
      ->capture_default_str();
  f->add_option("--init", fit.init, "cluster-center or random")
      ->check(CLI::IsMember({"cluster-center", "random"}))
      ->capture_default_str();
  f->add_option("--anneal", fit.anneal, "Temperature schedule epoch:T,... ending at T=1");
  f->add_option("--subset", fit.subset, "Comma-separated classes to keep");

  std::string svd_input;
  auto* v = app.add_subcommand("svd", "Rank-2 SVD embedding of the teacher logits");
  v->add_option("-i,--input", svd_input, "Predictions file (default: the fitted table)");

  ConfidenceArgs conf;
  auto* c = app.add_subcommand("confidence", "Fit confidence models, score rows, build rejection curves");
  c->add_option("-i,--input", conf.input, "Predictions file (default: the fitted table)");
  c->add_option("--kinds", conf.kinds, "Comma-separated subset of kde,gmm,dmm,entropy")->capture_default_str();
  c->add_option("--components", conf.components, "Mixture components (default: number of classes)");

  MetricsArgs met;
  auto* m = app.add_subcommand("metrics", "Compression quality, local fidelity and confusion matrix");
  m->add_option("-i,--input", met.input, "Predictions file (default: the fitted table)");
  m->add_option("--k", met.neighbours, "Neighbour counts for local fidelity")->capture_default_str();
  m->add_option("--class-names", met.names, "Comma-separated class names");

  ContourArgs con;
  auto* o = app.add_subcommand("contour", "Trace an iso-density contour of the student marginal");
  o->add_option("--level", con.level, "Density level")->capture_default_str();
  o->add_option("--resolution", con.resolution, "Grid nodes per axis")->capture_default_str();
  o->add_option("--margin", con.margin, "Box padding in scale units")->capture_default_str();

  ExportArgs ex;
  auto* e = app.add_subcommand("export", "Write the run artifact consumed by the viewer");
  e->add_option("-i,--input", ex.input, "Predictions file (default: the fitted table)");
  e->add_option("-o,--out", ex.out, "Output path (default: <run-dir>/run.json)");
  e->add_option("--class-names", ex.names, "Comma-separated class names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }
  g.run_dir = run_dir;

  try {
    fs::create_directories(g.run_dir);
    if (s->parsed()) run_synth(g, synth);
    if (f->parsed()) run_fit(g, fit);
    if (v->parsed()) run_svd(g, svd_input);
    if (c->parsed()) run_confidence(g, conf);
    if (m->parsed()) run_metrics(g, met);
    if (o->parsed()) run_contour(g, con);
    if (e->parsed()) run_export(g, ex);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
