#pragma once

// Benchmark protocol: victim preprocessing, benign selection, accuracy
// matrices and metrics, combination grid search, tuning and reports.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tabench/checkpoint.hpp"
#include "tabench/train.hpp"

namespace tabench {

// ---------------------------------------------------------------------------
// Preprocessing

struct PipelineStep {
  enum class Kind { resize, center_crop } kind;
  std::size_t size;
  bool operator==(const PipelineStep&) const = default;
};

using Pipeline = std::vector<PipelineStep>;

/// "resize(36)+center_crop(32)"; "none" or "" for the empty pipeline.
inline Pipeline parse_pipeline(const std::string& text) {
  Pipeline p;
  if (text.empty() || text == "none") return p;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '+')) {
    const auto open = part.find('('), close = part.find(')');
    if (open == std::string::npos || close == std::string::npos || close < open)
      throw Error("pipeline: cannot parse step '" + part + "'");
    const std::string name = part.substr(0, open);
    const std::string arg = part.substr(open + 1, close - open - 1);
    std::size_t used = 0;
    long v = 0;
    try {
      v = std::stol(arg, &used);
    } catch (const std::exception&) {
      throw Error("pipeline: bad size in '" + part + "'");
    }
    if (used != arg.size() || v <= 0) throw Error("pipeline: bad size in '" + part + "'");
    if (name == "resize") p.push_back({PipelineStep::Kind::resize, static_cast<std::size_t>(v)});
    else if (name == "center_crop") p.push_back({PipelineStep::Kind::center_crop, static_cast<std::size_t>(v)});
    else throw Error("pipeline: unknown step '" + name + "'");
  }
  return p;
}

inline std::string to_string(const Pipeline& p) {
  if (p.empty()) return "none";
  std::string s;
  for (const auto& st : p) {
    if (!s.empty()) s += "+";
    s += (st.kind == PipelineStep::Kind::resize ? "resize(" : "center_crop(") + std::to_string(st.size) + ")";
  }
  return s;
}

/// Square resize / center crop, in pipeline order.
inline Tensor preprocess(const Pipeline& p, const Tensor& images) {
  Tensor out = images;
  for (const auto& st : p)
    out = st.kind == PipelineStep::Kind::resize ? resize_bilinear(out, st.size, st.size) : center_crop(out, st.size, st.size);
  return out;
}

// ---------------------------------------------------------------------------
// Victims

struct VictimEntry {
  std::string name;
  std::string model;       // name of the model the weights belong to
  std::string checkpoint;  // path
  Pipeline pipeline;
  std::size_t input_size = 32;
};

inline void to_json(nlohmann::json& j, const VictimEntry& v) {
  j = nlohmann::json{{"name", v.name},
                     {"model", v.model},
                     {"checkpoint", v.checkpoint},
                     {"pipeline", to_string(v.pipeline)},
                     {"input_size", v.input_size}};
}

inline void from_json(const nlohmann::json& j, VictimEntry& v) {
  v.name = j.at("name").get<std::string>();
  v.model = j.value("model", v.name);
  v.checkpoint = j.value("checkpoint", std::string{});
  v.pipeline = parse_pipeline(j.value("pipeline", std::string("none")));
  v.input_size = j.value("input_size", std::size_t{32});
}

/// Output size of a pipeline applied to a square canvas.
inline std::size_t pipeline_output_size(const Pipeline& p, std::size_t canvas) {
  std::size_t s = canvas;
  for (const auto& st : p) {
    if (st.kind == PipelineStep::Kind::center_crop && st.size > s)
      throw Error("pipeline: crop " + std::to_string(st.size) + " larger than input " + std::to_string(s));
    s = st.size;
  }
  return s;
}

/// A registered victim with its loaded weights. Only evaluation code sees this type.
struct Victim {
  VictimEntry entry;
  Model model;

  Victim(VictimEntry e, Model m) : entry(std::move(e)), model(std::move(m)) {
    if (model.spec().input_height != entry.input_size || model.spec().input_width != entry.input_size)
      throw Error("victim " + entry.name + ": registered input size does not match model");
  }

  void check_canvas(std::size_t canvas) const {
    if (pipeline_output_size(entry.pipeline, canvas) != entry.input_size)
      throw Error("victim " + entry.name + ": pipeline output size differs from model input size");
  }

  std::vector<int> classify(const Tensor& canvas_images) const {
    return argmax_rows(predict(model, preprocess(entry.pipeline, canvas_images)));
  }
};

/// Append-only JSON registry of victim entries.
class VictimRegistry {
 public:
  explicit VictimRegistry(std::string path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
      std::ifstream f(path_);
      const auto j = nlohmann::json::parse(f);
      entries_ = j.at("victims").get<std::vector<VictimEntry>>();
    }
  }

  const std::vector<VictimEntry>& entries() const noexcept { return entries_; }

  /// Adds an entry; an identical re-registration is a no-op, a conflicting one an error.
  void append(const VictimEntry& e) {
    for (const auto& old : entries_) {
      if (old.name != e.name) continue;
      if (nlohmann::json(old) == nlohmann::json(e)) return;
      throw Error("registry: victim '" + e.name + "' already registered with different settings");
    }
    entries_.push_back(e);
    std::ofstream f(path_, std::ios::trunc);
    if (!f) throw Error("registry: cannot write '" + path_ + "'");
    f << nlohmann::json{{"victims", entries_}}.dump(2) << '\n';
  }

 private:
  std::string path_;
  std::vector<VictimEntry> entries_;
};

// ---------------------------------------------------------------------------
// Benign selection

struct BenignSet {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // generator indices, ascending
};

/// Examples classified correctly by every victim, then `count` of them sampled with `seed`.
inline BenignSet select_benign(const Dataset& data, std::span<const Victim> victims, std::size_t count, std::uint64_t seed) {
  std::vector<bool> ok(data.size(), true);
  for (const auto& v : victims) {
    v.check_canvas(data.images.dim(2));
    const auto pred = v.classify(data.images);
    for (std::size_t i = 0; i < ok.size(); ++i) ok[i] = ok[i] && pred[i] == data.labels[i];
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ok.size(); ++i)
    if (ok[i]) rows.push_back(i);
  if (rows.size() < count)
    throw Error("select_benign: " + std::to_string(rows.size()) + " qualifying examples, " + std::to_string(count) + " requested");
  auto rng = make_rng(seed, Stream::benign_select);
  for (std::size_t i = 0; i < count; ++i) std::swap(rows[i], rows[i + static_cast<std::size_t>(rng.below(rows.size() - i))]);
  rows.resize(count);
  std::sort(rows.begin(), rows.end());
  const Dataset sub = data.subset(rows);
  return {sub.images, sub.labels, sub.indices};
}

// ---------------------------------------------------------------------------
// Accuracy matrices and metrics

struct AccuracyMatrix {
  std::vector<std::string> substitutes, victims;
  std::vector<std::vector<double>> acc;   // [S][V]
  std::vector<std::vector<bool>> masked;  // [S][V]

  void validate() const {
    if (acc.size() != substitutes.size() || masked.size() != substitutes.size()) throw Error("matrix: row count mismatch");
    for (std::size_t s = 0; s < acc.size(); ++s) {
      if (acc[s].size() != victims.size() || masked[s].size() != victims.size()) throw Error("matrix: column count mismatch");
      for (double a : acc[s])
        if (!(a >= 0 && a <= 1)) throw Error("matrix: accuracy outside [0,1]");
    }
  }
};

struct Metrics {
  std::vector<double> aa;  // per substitute
  double aaa = 0, waa = 0, baa = 0;
};

/// AA = mean over unmasked victims; AAA = mean AA; WAA = max AA; BAA = min AA.
inline Metrics metrics(const AccuracyMatrix& m) {
  m.validate();
  if (m.substitutes.empty()) throw Error("metrics: empty matrix");
  Metrics r;
  for (std::size_t s = 0; s < m.acc.size(); ++s) {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < m.victims.size(); ++v)
      if (!m.masked[s][v]) {
        sum += m.acc[s][v];
        ++n;
      }
    if (n == 0) throw Error("metrics: substitute '" + m.substitutes[s] + "' has no unmasked victim");
    r.aa.push_back(sum / static_cast<double>(n));
  }
  double sum = 0;
  for (double a : r.aa) sum += a;
  r.aaa = sum / static_cast<double>(r.aa.size());
  r.waa = *std::max_element(r.aa.begin(), r.aa.end());
  r.baa = *std::min_element(r.aa.begin(), r.aa.end());
  return r;
}

// ---------------------------------------------------------------------------
// Records and reports

struct ReportRecord {
  std::string substitute, victim, method, backend, norm;
  double epsilon = 0;
  std::size_t iterations = 0;
  std::uint64_t seed = 0;
  std::size_t n_examples = 0;
  double accuracy = 0;
  bool masked = false;  // substitute and victim share weights

  auto key() const { return std::tie(substitute, victim, method, backend, norm, epsilon, iterations, seed, n_examples, accuracy); }
  bool operator==(const ReportRecord& o) const { return key() == o.key(); }
  bool operator<(const ReportRecord& o) const { return key() < o.key(); }
};

inline void to_json(nlohmann::json& j, const ReportRecord& r) {
  j = nlohmann::json{{"substitute", r.substitute}, {"victim", r.victim},   {"method", r.method},
                     {"backend", r.backend},       {"norm", r.norm},       {"epsilon", r.epsilon},
                     {"iterations", r.iterations}, {"seed", r.seed},       {"n_examples", r.n_examples},
                     {"accuracy", r.accuracy},     {"masked", r.masked}};
}

inline void from_json(const nlohmann::json& j, ReportRecord& r) {
  r.substitute = j.at("substitute").get<std::string>();
  r.victim = j.at("victim").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.backend = j.at("backend").get<std::string>();
  r.norm = j.at("norm").get<std::string>();
  r.epsilon = j.at("epsilon").get<double>();
  r.iterations = j.at("iterations").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.n_examples = j.at("n_examples").get<std::size_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.masked = j.value("masked", false);
}

inline constexpr const char* kCsvHeader = "substitute,victim,method,backend,norm,epsilon,iterations,seed,n_examples,accuracy";

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char c : s) {
    if (c == '"') o += '"';
    o += c;
  }
  return o + '"';
}

inline std::string fmt_double(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

// RFC-4180 record splitter over the whole text; returns rows of fields.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw Error("csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// Records in canonical (sorted) order as RFC-4180 CSV.
inline std::string records_to_csv(std::vector<ReportRecord> records) {
  std::sort(records.begin(), records.end());
  std::string out = std::string(kCsvHeader) + "\r\n";
  for (const auto& r : records) {
    out += detail::csv_field(r.substitute) + ',' + detail::csv_field(r.victim) + ',' + detail::csv_field(r.method) + ',' +
           detail::csv_field(r.backend) + ',' + detail::csv_field(r.norm) + ',' + detail::fmt_double(r.epsilon) + ',' +
           std::to_string(r.iterations) + ',' + std::to_string(r.seed) + ',' + std::to_string(r.n_examples) + ',' +
           detail::fmt_double(r.accuracy) + "\r\n";
  }
  return out;
}

inline std::vector<ReportRecord> records_from_csv(const std::string& text) {
  auto rows = detail::parse_csv(text);
  if (rows.empty()) throw Error("csv: missing header");
  std::string header;
  for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
  if (header != kCsvHeader) throw Error("csv: unexpected header '" + header + "'");
  std::vector<ReportRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != 10) throw Error("csv: row " + std::to_string(i) + " has " + std::to_string(f.size()) + " fields");
    ReportRecord r;
    r.substitute = f[0];
    r.victim = f[1];
    r.method = f[2];
    r.backend = f[3];
    r.norm = f[4];
    r.epsilon = std::stod(f[5]);
    r.iterations = std::stoul(f[6]);
    r.seed = std::stoull(f[7]);
    r.n_examples = std::stoul(f[8]);
    r.accuracy = std::stod(f[9]);
    out.push_back(r);
  }
  return out;
}

struct SummaryEntry {
  std::string method, backend;
  AccuracyMatrix matrix;
  Metrics metrics;
};

/// Groups records by (method, backend) into accuracy matrices. Masked cells are
/// substitute/victim pairs flagged `masked`.
inline std::vector<SummaryEntry> summarize(const std::vector<ReportRecord>& records) {
  std::map<std::pair<std::string, std::string>, std::vector<const ReportRecord*>> groups;
  for (const auto& r : records) groups[{r.method, r.backend}].push_back(&r);
  std::vector<SummaryEntry> out;
  for (const auto& [key, rs] : groups) {
    SummaryEntry e;
    e.method = key.first;
    e.backend = key.second;
    std::set<std::string> subs, vics;
    for (const auto* r : rs) {
      subs.insert(r->substitute);
      vics.insert(r->victim);
    }
    e.matrix.substitutes.assign(subs.begin(), subs.end());
    e.matrix.victims.assign(vics.begin(), vics.end());
    e.matrix.acc.assign(subs.size(), std::vector<double>(vics.size(), 0.0));
    e.matrix.masked.assign(subs.size(), std::vector<bool>(vics.size(), true));
    for (const auto* r : rs) {
      const auto s = static_cast<std::size_t>(std::distance(subs.begin(), subs.find(r->substitute)));
      const auto v = static_cast<std::size_t>(std::distance(vics.begin(), vics.find(r->victim)));
      e.matrix.acc[s][v] = r->accuracy;
      e.matrix.masked[s][v] = r->masked;
    }
    e.metrics = metrics(e.matrix);
    out.push_back(std::move(e));
  }
  return out;
}

inline nlohmann::json summary_json(const std::vector<SummaryEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json aa = nlohmann::json::object();
    for (std::size_t s = 0; s < e.matrix.substitutes.size(); ++s) aa[e.matrix.substitutes[s]] = e.metrics.aa[s];
    arr.push_back({{"method", e.method},
                   {"backend", e.backend},
                   {"AA", aa},
                   {"AAA", e.metrics.aaa},
                   {"WAA", e.metrics.waa},
                   {"BAA", e.metrics.baa}});
  }
  return arr;
}

namespace detail {

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("report: cannot write '" + p.string() + "'");
  f << s;
  if (!f) throw Error("report: write failed for '" + p.string() + "'");
}

// Horizontal bar chart of AAA per (method, backend).
inline std::string bars_svg(const std::vector<SummaryEntry>& entries) {
  const int row = 22, left = 320, width = 360;
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + width + 80 << "\" height=\""
    << row * static_cast<int>(entries.size()) + 30 << "\" font-family=\"monospace\" font-size=\"12\">\n";
  int y = 10;
  for (const auto& e : entries) {
    std::string label = e.backend + " / " + e.method;
    for (const char* bad : {"&", "<", ">"})
      for (std::size_t p; (p = label.find(bad)) != std::string::npos;) label.replace(p, 1, "?");
    const int w = static_cast<int>(e.metrics.aaa * width);
    o << "<text x=\"4\" y=\"" << y + 14 << "\">" << label << "</text>"
      << "<rect x=\"" << left << "\" y=\"" << y + 3 << "\" width=\"" << w << "\" height=\"" << row - 6 << "\" fill=\"#4a78b0\"/>"
      << "<text x=\"" << left + w + 4 << "\" y=\"" << y + 14 << "\">" << std::fixed << std::setprecision(2)
      << 100 * e.metrics.aaa << "%</text>\n";
    y += row;
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace detail

/// Writes results.csv, results.json, summary.json and accuracy_bars.svg into out_dir.
inline void report(const std::vector<ReportRecord>& records, const std::string& out_dir, bool plot = true) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw Error("report: cannot create output directory '" + out_dir + "'");
  std::vector<ReportRecord> sorted = records;
  std::sort(sorted.begin(), sorted.end());
  detail::write_text(fs::path(out_dir) / "results.csv", records_to_csv(sorted));
  detail::write_text(fs::path(out_dir) / "results.json", nlohmann::json(sorted).dump(2) + "\n");
  const auto entries = sorted.empty() ? std::vector<SummaryEntry>{} : summarize(sorted);
  detail::write_text(fs::path(out_dir) / "summary.json", summary_json(entries).dump(2) + "\n");
  if (plot && !entries.empty()) detail::write_text(fs::path(out_dir) / "accuracy_bars.svg", detail::bars_svg(entries));
}

// ---------------------------------------------------------------------------
// Evaluation

struct NamedModel {
  std::string name;
  Model model;
};

/// Per-victim accuracy on adversarial canvases; victims sharing the substitute's weights are masked.
inline std::vector<ReportRecord> evaluate(const Tensor& x_adv, std::span<const int> labels, const std::string& substitute,
                                          std::span<const Victim> victims, const AttackSpec& spec) {
  std::vector<ReportRecord> out;
  for (const auto& v : victims) {
    v.check_canvas(x_adv.dim(2));
    const auto pred = v.classify(x_adv);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == labels[i];
    ReportRecord r;
    r.substitute = substitute;
    r.victim = v.entry.name;
    r.method = to_string(spec.method.kind);
    r.backend = spec.backend_name();
    r.norm = to_string(spec.budget.norm);
    r.epsilon = spec.budget.epsilon;
    r.iterations = spec.iterations;
    r.seed = spec.seed;
    r.n_examples = pred.size();
    r.accuracy = static_cast<double>(ok) / static_cast<double>(pred.size());
    r.masked = v.entry.model == substitute;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid search

struct Combination {
  Init init = Init::zeros;
  Optimizer optimizer = Optimizer::plain;
  std::vector<AugmentKind> augment;

  AttackSpec apply(AttackSpec base) const {
    base.init = init;
    base.optimizer = optimizer;
    base.stack = AugmentStack(augment, base.stack.params, base.stack.stream_key);
    return base;
  }
  std::string name() const {
    AttackSpec s;
    return apply(s).backend_name();
  }
};

/// init x momentum x subsets of {UN, DP, DI2, TI} x scale in {none, SI, Admix}.
inline std::vector<Combination> enumerate_grid() {
  std::vector<Combination> out;
  const AugmentKind base[4] = {AugmentKind::UN, AugmentKind::DP, AugmentKind::DI2, AugmentKind::TI};
  for (Init init : {Init::zeros, Init::uniform_random})
    for (Optimizer opt : {Optimizer::plain, Optimizer::MI, Optimizer::NI, Optimizer::PI})
      for (unsigned mask = 0; mask < 16; ++mask)
        for (int scale = 0; scale < 3; ++scale) {
          Combination c{init, opt, {}};
          for (int k = 0; k < 4; ++k)
            if (mask & (1u << k)) c.augment.push_back(base[k]);
          if (scale == 1) c.augment.push_back(AugmentKind::SI);
          if (scale == 2) c.augment.push_back(AugmentKind::ADMIX);
          out.push_back(std::move(c));
        }
  return out;
}

struct GridEntry {
  std::string name;
  Metrics metrics;
  std::vector<ReportRecord> records;
};

struct GridResult {
  std::vector<GridEntry> ranking;  // AAA ascending, ties by name
  bool truncated = false;
  std::size_t total_cells = 0;
};

/// FNV-1a, used to key per-cell randomness by name so scheduling never matters.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

/// Runs every combination on every substitute (cells run concurrently on `jobs`
/// threads) and ranks combinations by AAA. max_cells = 0 means no limit; a
/// positive limit keeps the first cells in enumeration order and marks truncation.
inline GridResult grid_search(const AttackSpec& base, std::span<const NamedModel> substitutes, std::span<const Victim> victims,
                              const BenignSet& benign, std::size_t max_cells = 0, std::size_t jobs = 1,
                              std::vector<Combination> combos = enumerate_grid()) {
  const std::size_t S = substitutes.size();
  if (S == 0) throw Error("grid: no substitutes");
  const std::size_t total = combos.size() * S;
  const std::size_t run = max_cells == 0 ? total : std::min(total, max_cells);
  std::vector<std::vector<ReportRecord>> cell(run);
  detail::parallel_for(run, jobs, [&](std::size_t c) {
    const Combination& combo = combos[c / S];
    const NamedModel& sub = substitutes[c % S];
    AttackSpec spec = combo.apply(base);
    spec.seed = mix64(base.seed ^ stable_hash(combo.name()) ^ mix64(stable_hash(sub.name)));
    AttackOptions ao;
    ao.example_ids = benign.indices;
    const auto res = run_attack(sub.model, benign.images, benign.labels, spec, ao);
    cell[c] = evaluate(res.x_adv, benign.labels, sub.name, victims, spec);
  });
  GridResult out;
  out.total_cells = total;
  out.truncated = run < total;
  for (std::size_t k = 0; k * S < run; ++k) {
    if ((k + 1) * S > run) break;  // partial combination: substitutes missing
    GridEntry e;
    e.name = combos[k].name();
    for (std::size_t s = 0; s < S; ++s) e.records.insert(e.records.end(), cell[k * S + s].begin(), cell[k * S + s].end());
    e.metrics = summarize(e.records).front().metrics;
    out.ranking.push_back(std::move(e));
  }
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [](const GridEntry& a, const GridEntry& b) {
    return std::tie(a.metrics.aaa, a.name) < std::tie(b.metrics.aaa, b.name);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Hyper-parameter tuning

struct TuneOutcome {
  MethodParams best;
  std::vector<double> aa;  // per candidate, in input order
};

/// argmin AA over candidates; ties go to the smaller layer_index, then the smaller gamma.
inline TuneOutcome tune_hyperparams(std::span<const MethodParams> candidates, std::span<const std::size_t> validation_ids,
                                    std::span<const std::size_t> test_ids,
                                    const std::function<double(const MethodParams&)>& evaluate_aa) {
  if (candidates.empty()) throw Error("tune: empty search table");
  const std::set<std::size_t> test(test_ids.begin(), test_ids.end());
  for (auto i : validation_ids)
    if (test.count(i)) throw Error("tune: validation overlaps test (example " + std::to_string(i) + ")");
  TuneOutcome out;
  if (candidates.size() == 1) {
    out.best = candidates[0];
    out.aa.push_back(evaluate_aa(candidates[0]));
    return out;
  }
  std::size_t best = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out.aa.push_back(evaluate_aa(candidates[i]));
    const auto& c = candidates[i];
    const auto& b = candidates[best];
    if (std::tie(out.aa[i], c.layer_index, c.gamma) < std::tie(out.aa[best], b.layer_index, b.gamma)) best = i;
  }
  out.best = candidates[best];
  return out;
}

/// Cartesian product of layer indices and gammas over a base parameter set.
inline std::vector<MethodParams> search_table(const MethodParams& base, std::span<const std::size_t> layers,
                                              std::span<const double> gammas) {
  std::vector<MethodParams> out;
  std::vector<std::size_t> ls(layers.begin(), layers.end());
  std::vector<double> gs(gammas.begin(), gammas.end());
  if (ls.empty()) ls.push_back(base.layer_index);
  if (gs.empty()) gs.push_back(base.gamma);
  for (auto l : ls)
    for (auto g : gs) {
      MethodParams p = base;
      p.layer_index = l;
      p.gamma = g;
      out.push_back(p);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Adversarial example files ("TABT": magic, version 1, JSON header line, f64 LE blob)

inline void save_examples(const std::string& path, const Tensor& images, std::span<const int> labels,
                          std::span<const std::size_t> indices, const nlohmann::json& meta) {
  std::string out = "TABT";
  out.push_back(1);
  nlohmann::json h{{"shape", images.shape()},
                   {"labels", std::vector<int>(labels.begin(), labels.end())},
                   {"indices", std::vector<std::size_t>(indices.begin(), indices.end())},
                   {"meta", meta}};
  out += h.dump();
  out.push_back('\n');
  for (double v : images.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  detail::write_text(path, out);
}

struct ExampleFile {
  BenignSet set;
  nlohmann::json meta;
};

inline ExampleFile load_examples(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("examples: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 5 || bytes.compare(0, 4, "TABT") != 0) throw Error("examples: bad magic in '" + path + "'");
  if (bytes[4] != 1) throw Error("examples: unsupported version");
  const auto nl = bytes.find('\n', 5);
  if (nl == std::string::npos) throw Error("examples: truncated header");
  const auto h = nlohmann::json::parse(bytes.substr(5, nl - 5));
  ExampleFile ef;
  Shape s = h.at("shape").get<Shape>();
  const std::size_t n = numel(s);
  if (bytes.size() - nl - 1 != 8 * n) throw Error("examples: blob length does not match shape");
  std::vector<double> v(n);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + nl + 1;
  for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<double>(detail::get_u64(p + 8 * i));
  ef.set.images = Tensor(std::move(s), std::move(v));
  ef.set.labels = h.at("labels").get<std::vector<int>>();
  ef.set.indices = h.at("indices").get<std::vector<std::size_t>>();
  ef.meta = h.value("meta", nlohmann::json::object());
  return ef;
}

}  // namespace tabench
