#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <nlohmann/json.hpp>
#include "predmap/confidence.hpp"
#include "predmap/contour.hpp"
#include "predmap/metrics.hpp"
#include "predmap/model.hpp"
#include "predmap/trainer.hpp"

namespace predmap::io {

using json = nlohmann::json;

inline constexpr const char* kArtifactVersion = "1.0";
inline constexpr double kRowSumTolerance = 1e-3;
inline constexpr std::size_t kTopEntries = 5;

enum class PredictionFormat { csv, jsonl };

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

inline std::string read_text(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Prediction tables
// ---------------------------------------------------------------------------

namespace detail {

inline ParseError parse_error(const std::filesystem::path& path, std::size_t line, const std::string& what) {
  return ParseError(path.string() + ":" + std::to_string(line) + ": " + what);
}

inline void check_row_sum(const std::filesystem::path& path, std::size_t line, std::span<const double> row) {
  double sum = 0.0;
  for (double p : row) {
    if (!std::isfinite(p) || p < 0.0) throw parse_error(path, line, "negative or non-finite probability");
    sum += p;
  }
  // Slack for decimal inputs such as 0.4995 + 0.4995 landing just outside the gate.
  if (std::abs(sum - 1.0) > kRowSumTolerance + 1e-12)
    throw parse_error(path, line, "probabilities sum to " + format_double(sum));
}

// Columns named <prefix>0 .. <prefix>{K-1}; returns their header positions in class order.
inline std::vector<std::size_t> indexed_columns(const std::vector<std::string_view>& header, char prefix,
                                                const std::filesystem::path& path) {
  std::map<std::size_t, std::size_t> found;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = header[c];
    if (name.size() < 2 || name[0] != prefix) continue;
    const auto idx = parse_number<std::size_t>(name.substr(1));
    if (!idx) continue;
    if (!found.emplace(*idx, c).second) throw parse_error(path, 1, "duplicate column " + std::string(name));
  }
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < found.size(); ++k) {
    const auto it = found.find(k);
    if (it == found.end()) throw parse_error(path, 1, std::string("column ") + prefix + std::to_string(k) + " missing");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

inline PredictionTable load_predictions_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw detail::parse_error(path, 1, "empty file");
  const std::string header_line = line;
  const auto header = split_csv(header_line);
  const auto pcols = detail::indexed_columns(header, 'p', path);
  const auto lcols = detail::indexed_columns(header, 'l', path);
  if (pcols.size() < 2) throw detail::parse_error(path, 1, "need at least columns p0 and p1");
  if (!lcols.empty() && lcols.size() != pcols.size())
    throw detail::parse_error(path, 1, "logit columns do not match probability columns");
  std::optional<std::size_t> id_col, label_col;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "id") id_col = c;
    if (header[c] == "label") label_col = c;
  }
  const std::size_t k = pcols.size();

  std::vector<double> probs, logits;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw detail::parse_error(path, line_no,
                                "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    std::vector<double> row(k);
    for (std::size_t c = 0; c < k; ++c) {
      const auto v = parse_number<double>(cells[pcols[c]]);
      if (!v) throw detail::parse_error(path, line_no, "bad probability '" + std::string(cells[pcols[c]]) + "'");
      row[c] = *v;
    }
    detail::check_row_sum(path, line_no, row);
    probs.insert(probs.end(), row.begin(), row.end());
    for (std::size_t c = 0; c < lcols.size(); ++c) {
      const auto v = parse_number<double>(cells[lcols[c]]);
      if (!v) throw detail::parse_error(path, line_no, "bad logit '" + std::string(cells[lcols[c]]) + "'");
      logits.push_back(*v);
    }
    if (label_col) {
      const auto v = parse_number<int>(cells[*label_col]);
      if (!v || *v < 0 || static_cast<std::size_t>(*v) >= k)
        throw detail::parse_error(path, line_no, "bad label '" + std::string(cells[*label_col]) + "'");
      labels.push_back(*v);
    }
    ids.push_back(id_col ? std::string(cells[*id_col]) : std::to_string(ids.size()));
  }
  const std::size_t n = ids.size();
  Matrix pm(n, k);
  pm.data() = std::move(probs);
  std::optional<Matrix> lm;
  if (!lcols.empty()) {
    lm = Matrix(n, k);
    lm->data() = std::move(logits);
  }
  std::optional<std::vector<int>> lab;
  if (label_col) lab = std::move(labels);
  return PredictionTable::from_probs(std::move(pm), std::move(lab), std::move(lm), std::move(ids));
}

inline PredictionTable load_predictions_jsonl(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  std::size_t line_no = 0;
  std::size_t k = 0;
  std::optional<bool> has_label, has_logits;
  std::vector<double> probs, logits;
  std::vector<int> labels;
  std::vector<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw detail::parse_error(path, line_no, e.what());
    }
    if (!obj.is_object() || !obj.contains("probs") || !obj["probs"].is_array())
      throw detail::parse_error(path, line_no, "object with a 'probs' array expected");
    std::vector<double> row;
    for (const auto& v : obj["probs"]) {
      if (!v.is_number()) throw detail::parse_error(path, line_no, "non-numeric probability");
      row.push_back(v.get<double>());
    }
    if (k == 0) k = row.size();
    if (row.size() != k || k < 2) throw detail::parse_error(path, line_no, "ragged probability vector");
    detail::check_row_sum(path, line_no, row);
    probs.insert(probs.end(), row.begin(), row.end());

    const bool row_label = obj.contains("label") && !obj["label"].is_null();
    const bool row_logits = obj.contains("logits") && !obj["logits"].is_null();
    if (!has_label) has_label = row_label;
    if (!has_logits) has_logits = row_logits;
    if (*has_label != row_label) throw detail::parse_error(path, line_no, "label present on some rows only");
    if (*has_logits != row_logits) throw detail::parse_error(path, line_no, "logits present on some rows only");
    if (row_label) {
      if (!obj["label"].is_number_integer()) throw detail::parse_error(path, line_no, "label must be an integer");
      const int c = obj["label"].get<int>();
      if (c < 0 || static_cast<std::size_t>(c) >= k) throw detail::parse_error(path, line_no, "label out of range");
      labels.push_back(c);
    }
    if (row_logits) {
      const auto& arr = obj["logits"];
      if (!arr.is_array() || arr.size() != k) throw detail::parse_error(path, line_no, "ragged logits vector");
      for (const auto& v : arr) {
        if (!v.is_number()) throw detail::parse_error(path, line_no, "non-numeric logit");
        logits.push_back(v.get<double>());
      }
    }
    if (obj.contains("id") && !obj["id"].is_null()) {
      ids.push_back(obj["id"].is_string() ? obj["id"].get<std::string>() : obj["id"].dump());
    } else {
      ids.push_back(std::to_string(ids.size()));
    }
  }
  if (ids.empty()) throw detail::parse_error(path, line_no, "no rows");
  const std::size_t n = ids.size();
  Matrix pm(n, k);
  pm.data() = std::move(probs);
  std::optional<Matrix> lm;
  if (has_logits.value_or(false)) {
    lm = Matrix(n, k);
    lm->data() = std::move(logits);
  }
  std::optional<std::vector<int>> lab;
  if (has_label.value_or(false)) lab = std::move(labels);
  return PredictionTable::from_probs(std::move(pm), std::move(lab), std::move(lm), std::move(ids));
}

inline PredictionTable load_predictions(const std::filesystem::path& path, PredictionFormat format) {
  return format == PredictionFormat::csv ? load_predictions_csv(path) : load_predictions_jsonl(path);
}

inline PredictionFormat format_from_extension(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return PredictionFormat::csv;
  if (ext == ".jsonl") return PredictionFormat::jsonl;
  throw UsageError("cannot infer prediction format from '" + path.string() + "'; use .csv or .jsonl");
}

inline void save_predictions_csv(const PredictionTable& t, const std::filesystem::path& path) {
  auto out = open_output(path);
  const std::size_t k = t.n_classes();
  out << "id";
  for (std::size_t c = 0; c < k; ++c) out << ",p" << c;
  if (t.labels()) out << ",label";
  if (t.logits())
    for (std::size_t c = 0; c < k; ++c) out << ",l" << c;
  out << '\n';
  for (std::size_t i = 0; i < t.n_rows(); ++i) {
    out << t.row_ids()[i];
    for (double p : t.row(i)) out << ',' << format_double(p);
    if (t.labels()) out << ',' << (*t.labels())[i];
    if (t.logits())
      for (double l : t.logits()->row(i)) out << ',' << format_double(l);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Embeddings, student parameters, traces
// ---------------------------------------------------------------------------

inline void save_embedding_csv(const EmbeddingTable& emb, const std::vector<std::string>& ids,
                               const std::filesystem::path& path) {
  if (ids.size() != emb.size()) throw AlignmentError("embedding and id list differ in length");
  auto out = open_output(path);
  out << "id,x,y\n";
  for (std::size_t i = 0; i < emb.size(); ++i)
    out << ids[i] << ',' << format_double(emb.points[i].x) << ',' << format_double(emb.points[i].y) << '\n';
}

inline EmbeddingTable load_embedding_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw detail::parse_error(path, 1, "empty file");
  const auto header = split_csv(line);
  const auto xcol = std::find(header.begin(), header.end(), "x");
  const auto ycol = std::find(header.begin(), header.end(), "y");
  if (xcol == header.end() || ycol == header.end()) throw detail::parse_error(path, 1, "columns x and y required");
  const auto xi = static_cast<std::size_t>(xcol - header.begin());
  const auto yi = static_cast<std::size_t>(ycol - header.begin());
  EmbeddingTable emb;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw detail::parse_error(path, line_no, "ragged row");
    const auto x = parse_number<double>(cells[xi]);
    const auto y = parse_number<double>(cells[yi]);
    if (!x || !y) throw detail::parse_error(path, line_no, "bad coordinate");
    emb.points.push_back({*x, *y});
  }
  return emb;
}

inline json student_to_json(const StudentParams& p) {
  json means = json::array(), scales = json::array();
  for (const Vec2& m : p.means) means.push_back({m.x, m.y});
  for (const Mat2& s : p.scales) scales.push_back({{s.xx, s.xy}, {s.yx, s.yy}});
  return {{"means", means}, {"scales", scales}, {"nu", p.dof}, {"prior", p.prior_logits}};
}

inline StudentParams student_from_json(const json& j) {
  StudentParams p;
  for (const auto& m : j.at("means")) p.means.push_back({m.at(0).get<double>(), m.at(1).get<double>()});
  for (const auto& s : j.at("scales"))
    p.scales.push_back({s.at(0).at(0).get<double>(), s.at(0).at(1).get<double>(), s.at(1).at(0).get<double>(),
                        s.at(1).at(1).get<double>()});
  p.dof = j.at("nu").get<double>();
  p.prior_logits = j.at("prior").get<std::vector<double>>();
  p.validate();
  return p;
}

inline void save_trace_csv(const TrainTrace& trace, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "epoch,temperature,loss,acc_teacher\n";
  for (const auto& r : trace.records)
    out << r.epoch << ',' << format_double(r.temperature) << ',' << format_double(r.loss) << ','
        << format_double(r.acc_teacher) << '\n';
}

inline TrainTrace load_trace_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  std::getline(in, line);
  TrainTrace trace;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 4) throw detail::parse_error(path, line_no, "expected 4 fields");
    const auto e = parse_number<std::size_t>(cells[0]);
    const auto t = parse_number<double>(cells[1]);
    const auto l = parse_number<double>(cells[2]);
    const auto a = parse_number<double>(cells[3]);
    if (!e || !t || !l || !a) throw detail::parse_error(path, line_no, "bad trace record");
    trace.records.push_back({*e, *t, *l, *a});
  }
  return trace;
}

inline void save_rejection_csv(const RejectionCurve& curve, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "fraction,accuracy\n";
  for (const auto& p : curve.points) out << format_double(p.fraction) << ',' << format_double(p.accuracy) << '\n';
}

inline RejectionCurve load_rejection_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  std::getline(in, line);
  RejectionCurve curve;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    const auto f = cells.size() == 2 ? parse_number<double>(cells[0]) : std::nullopt;
    const auto a = cells.size() == 2 ? parse_number<double>(cells[1]) : std::nullopt;
    if (!f || !a) throw detail::parse_error(path, line_no, "bad rejection record");
    curve.points.push_back({*f, *a});
  }
  return curve;
}

// Rows are predicted classes, columns true classes; first row and column hold names.
inline void save_confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& names,
                               const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "predicted\\true";
  for (const auto& n : names) out << ',' << n;
  out << '\n';
  for (std::size_t r = 0; r < cm.classes(); ++r) {
    out << names[r];
    for (std::size_t c = 0; c < cm.classes(); ++c) out << ',' << cm.at(r, c);
    out << '\n';
  }
}

struct NamedConfusion {
  std::vector<std::string> names;
  ConfusionMatrix matrix;
};

inline NamedConfusion load_confusion_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw detail::parse_error(path, 1, "empty file");
  const auto header = split_csv(line);
  if (header.size() < 3) throw detail::parse_error(path, 1, "need at least two classes");
  NamedConfusion out;
  for (std::size_t c = 1; c < header.size(); ++c) out.names.emplace_back(header[c]);
  const std::size_t k = out.names.size();
  out.matrix = ConfusionMatrix(k);
  std::size_t r = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != k + 1 || r >= k) throw detail::parse_error(path, line_no, "ragged confusion row");
    if (cells[0] != out.names[r]) throw detail::parse_error(path, line_no, "row name does not match column order");
    for (std::size_t c = 0; c < k; ++c) {
      const auto v = parse_number<std::size_t>(cells[c + 1]);
      if (!v) throw detail::parse_error(path, line_no, "bad count");
      out.matrix.at(r, c) = *v;
    }
    ++r;
  }
  if (r != k) throw detail::parse_error(path, line_no, "expected " + std::to_string(k) + " rows");
  return out;
}

// Per-row confidence scores keyed by model name ("kde", "gmm", "dmm", "entropy").
using ScoreTable = std::map<std::string, std::vector<double>>;

inline void save_scores_csv(const ScoreTable& scores, const std::vector<std::string>& ids,
                            const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "id";
  for (const auto& [name, col] : scores) {
    if (col.size() != ids.size()) throw AlignmentError("score column " + name + " has the wrong length");
    out << ',' << name;
  }
  out << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i];
    for (const auto& [name, col] : scores) out << ',' << format_double(col[i]);
    out << '\n';
  }
}

inline ScoreTable load_scores_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw detail::parse_error(path, 1, "empty file");
  const std::string header_line = line;
  const auto header = split_csv(header_line);
  ScoreTable scores;
  for (std::size_t c = 1; c < header.size(); ++c) scores[std::string(header[c])];
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw detail::parse_error(path, line_no, "ragged row");
    for (std::size_t c = 1; c < header.size(); ++c) {
      const auto v = parse_number<double>(cells[c]);
      if (!v) throw detail::parse_error(path, line_no, "bad score");
      scores[std::string(header[c])].push_back(*v);
    }
  }
  return scores;
}

inline json metrics_to_json(const MetricsReport& m, const std::vector<std::string>& class_names) {
  json lf = json::object();
  for (const auto& [k, v] : m.local_fidelity) lf[std::to_string(k)] = v;
  json out = {{"kl_sym_final", m.kl_sym_final},
              {"acc_ground", m.acc_ground ? json(*m.acc_ground) : json(nullptr)},
              {"acc_teacher", m.acc_teacher},
              {"local_fidelity", lf}};
  if (m.confusion) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.confusion->classes(); ++r) {
      json row = json::array();
      for (std::size_t c = 0; c < m.confusion->classes(); ++c) row.push_back(m.confusion->at(r, c));
      rows.push_back(row);
    }
    out["confusion"] = {{"orientation", "rows=predicted,cols=true"}, {"classes", class_names}, {"counts", rows}};
  } else {
    out["confusion"] = nullptr;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run artifact
// ---------------------------------------------------------------------------

struct PointRecord {
  std::string id;
  double x = 0.0;
  double y = 0.0;
  int pred = 0;
  std::optional<int> label;
  std::vector<std::pair<int, double>> top;
  double other = 0.0;
  std::map<std::string, double> conf;
};

struct RunArtifact {
  std::string version = kArtifactVersion;
  std::uint64_t seed = 0;
  json config = json::object();
  std::optional<std::string> created;  // omitted in deterministic runs
  std::vector<std::string> classes;
  std::vector<PointRecord> points;
  StudentParams student;
  json metrics = json::object();
  std::vector<ContourSet> contours;

  EmbeddingTable embedding() const {
    EmbeddingTable e;
    e.points.reserve(points.size());
    for (const auto& p : points) e.points.push_back({p.x, p.y});
    return e;
  }
};

inline std::vector<std::string> default_class_names(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < k; ++c) names.push_back(std::to_string(c));
  return names;
}

// The kTopEntries largest probabilities (ties by class index) plus the remaining mass.
inline std::pair<std::vector<std::pair<int, double>>, double> top_probabilities(std::span<const double> row) {
  std::vector<int> order(row.size());
  for (std::size_t c = 0; c < row.size(); ++c) order[c] = static_cast<int>(c);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row[a] > row[b]; });
  std::vector<std::pair<int, double>> top;
  const std::size_t keep = std::min(kTopEntries, row.size());
  for (std::size_t r = 0; r < keep; ++r) top.emplace_back(order[r], row[order[r]]);
  double other = 0.0;
  for (std::size_t r = keep; r < row.size(); ++r) other += row[order[r]];
  return {std::move(top), other};
}

inline RunArtifact build_run_artifact(const PredictionTable& preds, const EmbeddingTable& emb,
                                      const StudentParams& params, const ScoreTable& scores, json metrics,
                                      std::vector<ContourSet> contours, json config, std::uint64_t seed,
                                      std::vector<std::string> class_names = {}) {
  const std::size_t n = preds.n_rows();
  emb.validate(n);
  if (params.n_classes() != preds.n_classes()) throw AlignmentError("student and predictions disagree on classes");
  if (class_names.empty()) class_names = default_class_names(preds.n_classes());
  if (class_names.size() != preds.n_classes()) throw AlignmentError("class name count does not match K");
  for (const auto& [name, col] : scores) {
    if (col.size() != n) throw AlignmentError("score column " + name + " has the wrong length");
  }
  RunArtifact a;
  a.seed = seed;
  a.config = std::move(config);
  a.classes = std::move(class_names);
  a.student = params;
  a.metrics = std::move(metrics);
  a.contours = std::move(contours);
  a.points.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    PointRecord& p = a.points[i];
    p.id = preds.row_ids()[i];
    p.x = emb.points[i].x;
    p.y = emb.points[i].y;
    p.pred = static_cast<int>(argmax(preds.row(i)));
    if (preds.labels()) p.label = (*preds.labels())[i];
    std::tie(p.top, p.other) = top_probabilities(preds.row(i));
    for (const auto& [name, col] : scores) p.conf[name] = col[i];
  }
  return a;
}

inline json to_json(const RunArtifact& a) {
  json points = json::array();
  for (const auto& p : a.points) {
    json top = json::array();
    for (const auto& [c, prob] : p.top) top.push_back({c, prob});
    json conf = json::object();
    for (const auto& [name, v] : p.conf) conf[name] = v;
    points.push_back({{"id", p.id},
                      {"x", p.x},
                      {"y", p.y},
                      {"pred", p.pred},
                      {"label", p.label ? json(*p.label) : json(nullptr)},
                      {"top", top},
                      {"other", p.other},
                      {"conf", conf}});
  }
  json contours = json::array();
  for (const auto& cs : a.contours) {
    json paths = json::array();
    for (const auto& poly : cs.polylines) {
      json path = json::array();
      for (const Vec2& v : poly) path.push_back({v.x, v.y});
      paths.push_back(path);
    }
    contours.push_back({{"level", cs.level}, {"paths", paths}});
  }
  json out = {{"version", a.version}, {"seed", a.seed},          {"config", a.config},
              {"classes", a.classes}, {"points", points},        {"student", student_to_json(a.student)},
              {"metrics", a.metrics}, {"contours", contours}};
  if (a.created) out["created"] = *a.created;
  return out;
}

// Returns a list of schema violations; empty means the document is valid.
inline std::vector<std::string> validate_run_artifact(const json& j) {
  std::vector<std::string> errors;
  auto require = [&](const json& obj, const char* field, auto pred, const std::string& where) {
    if (!obj.is_object() || !obj.contains(field) || !pred(obj[field])) {
      errors.push_back(where + field);
      return false;
    }
    return true;
  };
  auto is_string = [](const json& v) { return v.is_string(); };
  auto is_number = [](const json& v) { return v.is_number(); };
  auto is_array = [](const json& v) { return v.is_array(); };
  auto is_object = [](const json& v) { return v.is_object(); };
  auto is_int = [](const json& v) { return v.is_number_integer(); };

  if (!j.is_object()) return {"document is not an object"};
  require(j, "version", is_string, "");
  require(j, "seed", is_int, "");
  require(j, "config", is_object, "");
  std::size_t k = 0;
  if (require(j, "classes", is_array, "")) k = j["classes"].size();
  if (require(j, "student", is_object, "")) {
    const auto& s = j["student"];
    if (require(s, "means", is_array, "student.") && s["means"].size() != k) errors.emplace_back("student.means size");
    if (require(s, "scales", is_array, "student.") && s["scales"].size() != k) errors.emplace_back("student.scales size");
    require(s, "nu", is_number, "student.");
    if (require(s, "prior", is_array, "student.") && s["prior"].size() != k) errors.emplace_back("student.prior size");
  }
  require(j, "metrics", is_object, "");
  if (require(j, "contours", is_array, "")) {
    for (std::size_t c = 0; c < j["contours"].size(); ++c) {
      const auto& cs = j["contours"][c];
      const std::string where = "contours[" + std::to_string(c) + "].";
      require(cs, "level", is_number, where);
      require(cs, "paths", is_array, where);
    }
  }
  if (require(j, "points", is_array, "")) {
    std::map<std::string, int> seen;
    for (std::size_t i = 0; i < j["points"].size(); ++i) {
      const auto& p = j["points"][i];
      const std::string where = "points[" + std::to_string(i) + "].";
      if (require(p, "id", is_string, where) && ++seen[p["id"].get<std::string>()] > 1)
        errors.push_back(where + "id (duplicate)");
      require(p, "x", is_number, where);
      require(p, "y", is_number, where);
      if (require(p, "pred", is_int, where) && (p["pred"].get<long long>() < 0 || p["pred"].get<std::size_t>() >= k))
        errors.push_back(where + "pred (out of range)");
      if (!p.contains("label") || !(p["label"].is_null() || p["label"].is_number_integer()))
        errors.push_back(where + "label");
      if (require(p, "top", is_array, where)) {
        double mass = 0.0;
        for (const auto& e : p["top"]) {
          if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number()) {
            errors.push_back(where + "top entry");
            break;
          }
          mass += e[1].get<double>();
        }
        if (require(p, "other", is_number, where) && std::abs(mass + p["other"].get<double>() - 1.0) > 1e-9)
          errors.push_back(where + "other (top + other != 1)");
      }
      require(p, "conf", is_object, where);
    }
  }
  return errors;
}

inline RunArtifact from_json(const json& j) {
  const auto errors = validate_run_artifact(j);
  if (!errors.empty()) throw ParseError("run artifact schema violation: " + errors.front());
  RunArtifact a;
  a.version = j["version"].get<std::string>();
  a.seed = j["seed"].get<std::uint64_t>();
  a.config = j["config"];
  if (j.contains("created") && j["created"].is_string()) a.created = j["created"].get<std::string>();
  a.classes = j["classes"].get<std::vector<std::string>>();
  a.student = student_from_json(j["student"]);
  a.metrics = j["metrics"];
  for (const auto& p : j["points"]) {
    PointRecord r;
    r.id = p["id"].get<std::string>();
    r.x = p["x"].get<double>();
    r.y = p["y"].get<double>();
    r.pred = p["pred"].get<int>();
    if (!p["label"].is_null()) r.label = p["label"].get<int>();
    for (const auto& e : p["top"]) r.top.emplace_back(e[0].get<int>(), e[1].get<double>());
    r.other = p["other"].get<double>();
    for (const auto& [name, v] : p["conf"].items()) r.conf[name] = v.get<double>();
    a.points.push_back(std::move(r));
  }
  for (const auto& cs : j["contours"]) {
    ContourSet set;
    set.level = cs["level"].get<double>();
    for (const auto& path : cs["paths"]) {
      std::vector<Vec2> poly;
      for (const auto& v : path) poly.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
      set.polylines.push_back(std::move(poly));
    }
    a.contours.push_back(std::move(set));
  }
  return a;
}

inline void export_run(const RunArtifact& a, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << to_json(a).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline RunArtifact import_run(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace predmap::io
