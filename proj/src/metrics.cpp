#include "cardioseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <tuple>

#include "cardioseg/training.hpp"

namespace cardioseg {

namespace fs = std::filesystem;

BinaryMask binarize(const LabelGrid& label, int cls) {
  BinaryMask out(label.rows, label.cols);
  for (std::size_t i = 0; i < label.size(); ++i) out.values[i] = label.values[i] == cls ? 1 : 0;
  return out;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw ShapeError("dice: mask shapes differ");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.values[i] != 0;
    const bool y = b.values[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

ContourSet extract_contour(const BinaryMask& mask) {
  ContourSet out;
  auto bg = [&](int r, int c) { return r < 0 || c < 0 || r >= mask.rows || c >= mask.cols || mask.at(r, c) == 0; };
  for (int r = 0; r < mask.rows; ++r)
    for (int c = 0; c < mask.cols; ++c)
      if (mask.at(r, c) != 0 && (bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1))) out.push_back({r, c});
  return out;
}

namespace {

double directed_sq(const ContourSet& from, const ContourSet& to, PixelSpacing s) {
  double worst = 0.0;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dr = (p.row - q.row) * s.row_mm;
      const double dc = (p.col - q.col) * s.col_mm;
      best = std::min(best, dr * dr + dc * dc);
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace

double hausdorff(const ContourSet& a, const ContourSet& b, PixelSpacing spacing, int rows, int cols) {
  if (!(spacing.row_mm > 0.0) || !(spacing.col_mm > 0.0)) throw ConfigError("pixel spacing must be positive");
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) {
    const double h = rows * spacing.row_mm;
    const double w = cols * spacing.col_mm;
    return std::sqrt(h * h + w * w);
  }
  return std::sqrt(std::max(directed_sq(a, b, spacing), directed_sq(b, a, spacing)));
}

SlicePredictor model_predictor(const Segmenter& model, bool normalize) {
  return [&model, normalize](const std::vector<ImageGrid>& images) {
    const auto& cfg = model.config();
    const int h = cfg.input_height;
    const int w = cfg.input_width;
    Tensor<float> batch(static_cast<int>(images.size()), 1, h, w);
    for (std::size_t i = 0; i < images.size(); ++i) {
      ImageGrid in = resize_image(images[i], h, w);
      if (normalize) in = standardize(in);
      std::copy(in.values.begin(), in.values.end(), batch.image(static_cast<int>(i)));
    }
    const auto pred = model.forward(batch);
    std::vector<LabelGrid> out;
    for (std::size_t i = 0; i < images.size(); ++i)
      out.push_back(resize_label(pred.argmax(static_cast<int>(i)), images[i].rows, images[i].cols));
    return out;
  };
}

double mean_of(const std::vector<double>& values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double sample_std(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double m = mean_of(values);
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size() - 1));
}

MetricsTable evaluate(const SlicePredictor& predict, const std::vector<Case4D>& cases, const std::string& arm, int run,
                      const std::string& dataset) {
  if (cases.empty()) throw ConfigError("evaluation needs at least one test case");
  MetricsTable table;
  for (const auto& c : cases) {
    const auto samples = restructure_case(c);
    std::vector<ImageGrid> images;
    for (const auto& s : samples) images.push_back(s.image);
    const auto predicted = predict(images);
    if (predicted.size() != samples.size()) throw ShapeError("predictor returned a wrong number of slices");
    const PixelSpacing spacing = c.spacing.value_or(PixelSpacing{});

    for (Phase phase : {Phase::ED, Phase::ES})
      for (int cls = 1; cls < kNumClasses; ++cls) {
        CaseMetric m{c.case_id, c.disease.name(), phase, cls, 0.0, 0.0, false, 0, arm, run};
        std::vector<double> dices, hds;
        for (std::size_t i = 0; i < samples.size(); ++i) {
          if (samples[i].phase != phase) continue;
          if (!predicted[i].same_shape(samples[i].label)) throw ShapeError("prediction shape differs from label");
          const auto gt = binarize(samples[i].label, cls);
          const auto pr = binarize(predicted[i], cls);
          dices.push_back(dice(pr, gt));
          const auto ca = extract_contour(pr);
          const auto cb = extract_contour(gt);
          if (!ca.empty() || !cb.empty()) hds.push_back(hausdorff(ca, cb, spacing, gt.rows, gt.cols));
        }
        m.n_slices = static_cast<int>(dices.size());
        m.dice = mean_of(dices);
        m.hd_defined = !hds.empty();
        m.hd = m.hd_defined ? mean_of(hds) : 0.0;
        table.cases.push_back(std::move(m));
      }
  }

  // (disease, phase, class) groups; "ALL" pools diseases.
  std::map<std::tuple<std::string, int, int>, std::vector<const CaseMetric*>> groups;
  for (const auto& m : table.cases) {
    groups[{m.disease, static_cast<int>(m.phase), m.cls}].push_back(&m);
    groups[{"ALL", static_cast<int>(m.phase), m.cls}].push_back(&m);
  }
  for (const auto& [key, members] : groups) {
    MetricRow row;
    row.arm = arm;
    row.run = run;
    row.dataset = dataset;
    row.disease = std::get<0>(key);
    row.phase = static_cast<Phase>(std::get<1>(key));
    row.cls = std::get<2>(key);
    std::vector<double> d, h;
    for (const auto* m : members) {
      d.push_back(m->dice);
      if (m->hd_defined) h.push_back(m->hd);
      row.n_slices += m->n_slices;
    }
    row.dice = mean_of(d);
    row.dice_std = sample_std(d);
    row.hd = mean_of(h);
    row.hd_std = sample_std(h);
    row.n_cases = static_cast<int>(members.size());
    table.rows.push_back(std::move(row));
  }
  // ALL rows last, diseases alphabetical.
  std::stable_partition(table.rows.begin(), table.rows.end(), [](const MetricRow& r) { return r.disease != "ALL"; });
  return table;
}

MetricsTable evaluate(const Segmenter& model, bool normalize, const Manifest& test_manifest, const std::string& arm,
                      int run) {
  return evaluate(model_predictor(model, normalize), load_cases(test_manifest), arm, run, test_manifest.dataset_name);
}

std::vector<AggregateRow> aggregate_runs(const std::vector<MetricRow>& rows) {
  using Key = std::tuple<std::string, std::string, int, int>;  // dataset, disease, phase, class
  std::map<std::string, std::map<Key, std::vector<const MetricRow*>>> by_arm;
  std::vector<std::string> arm_order;
  for (const auto& r : rows) {
    if (!by_arm.contains(r.arm)) arm_order.push_back(r.arm);
    by_arm[r.arm][{r.dataset, r.disease == "ALL" ? "\x7f" : r.disease, static_cast<int>(r.phase), r.cls}].push_back(&r);
  }
  std::vector<AggregateRow> out;
  for (const auto& arm : arm_order)
    for (const auto& [key, members] : by_arm[arm]) {
      AggregateRow a;
      a.arm = arm;
      a.dataset = std::get<0>(key);
      a.disease = members.front()->disease;
      a.phase = static_cast<Phase>(std::get<2>(key));
      a.cls = std::get<3>(key);
      std::vector<double> d, h;
      for (const auto* m : members) {
        d.push_back(m->dice);
        if (!std::isnan(m->hd)) h.push_back(m->hd);
      }
      a.dice_mean = mean_of(d);
      a.dice_std = sample_std(d);
      a.hd_mean = mean_of(h);
      a.hd_std = sample_std(h);
      a.n_runs = static_cast<int>(members.size());
      out.push_back(std::move(a));
    }
  return out;
}

std::uint64_t file_hash(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw LoadError("cannot open " + file.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

CrossValidation cross_validate(const fs::path& runset_dir, const Manifest& test_manifest, bool normalize) {
  const RunSetIndex index = read_runset_index(runset_dir);
  const auto cases = load_cases(test_manifest);
  CrossValidation result;
  for (const auto& entry : index.runs) {
    if (entry.status != RunStatus::Complete) {
      result.failures.push_back({entry.arm, entry.run, "run did not complete: " + entry.error});
      continue;
    }
    try {
      const fs::path ckpt = runset_dir / entry.checkpoint;
      const auto before = file_hash(ckpt);
      const Segmenter model = load_checkpoint(ckpt);
      auto table = evaluate(model_predictor(model, normalize), cases, entry.arm, entry.run, test_manifest.dataset_name);
      if (file_hash(ckpt) != before) throw Error("checkpoint " + ckpt.string() + " changed during evaluation");
      for (auto& r : table.rows) result.table.rows.push_back(std::move(r));
      for (auto& c : table.cases) result.table.cases.push_back(std::move(c));
    } catch (const Error& e) {
      result.failures.push_back({entry.arm, entry.run, e.what()});
    }
  }
  result.aggregate = aggregate_runs(result.table.rows);
  return result;
}

// --- CSV ---

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

namespace {

std::ofstream open_csv(const fs::path& file) {
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw LoadError("cannot write " + file.string());
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

}  // namespace

void write_metrics_csv(const std::vector<MetricRow>& rows, const fs::path& file) {
  auto out = open_csv(file);
  out << "arm,run,dataset,disease,phase,class,dice,hd,n_slices,dice_std,hd_std,n_cases\n";
  for (const auto& r : rows)
    out << r.arm << ',' << r.run << ',' << r.dataset << ',' << r.disease << ',' << phase_name(r.phase) << ','
        << class_name(r.cls) << ',' << format_number(r.dice) << ',' << format_number(r.hd) << ',' << r.n_slices << ','
        << format_number(r.dice_std) << ',' << format_number(r.hd_std) << ',' << r.n_cases << '\n';
}

std::vector<MetricRow> read_metrics_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("cannot open " + file.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("arm,run,dataset,disease,phase,class,dice,hd,n_slices", 0) != 0)
    throw FormatError(file.string() + " is not a metrics CSV");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() < 9) throw FormatError("short metrics row in " + file.string());
    MetricRow r;
    r.arm = c[0];
    r.run = std::stoi(c[1]);
    r.dataset = c[2];
    r.disease = c[3];
    r.phase = parse_phase(c[4]);
    r.cls = -1;
    for (int k = 0; k < kNumClasses; ++k)
      if (c[5] == class_name(k)) r.cls = k;
    if (r.cls < 0) throw FormatError("unknown class '" + c[5] + "'");
    r.dice = parse_number(c[6]);
    r.hd = parse_number(c[7]);
    r.n_slices = std::stoi(c[8]);
    if (c.size() >= 12) {
      r.dice_std = parse_number(c[9]);
      r.hd_std = parse_number(c[10]);
      r.n_cases = std::stoi(c[11]);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_case_metrics_csv(const std::vector<CaseMetric>& cases, const fs::path& file) {
  auto out = open_csv(file);
  out << "arm,run,case_id,disease,phase,class,dice,hd,n_slices\n";
  for (const auto& m : cases)
    out << m.arm << ',' << m.run << ',' << m.case_id << ',' << m.disease << ',' << phase_name(m.phase) << ','
        << class_name(m.cls) << ',' << format_number(m.dice) << ','
        << (m.hd_defined ? format_number(m.hd) : std::string("nan")) << ',' << m.n_slices << '\n';
}

void write_aggregate_csv(const std::vector<AggregateRow>& rows, const fs::path& file) {
  auto out = open_csv(file);
  out << "arm,dataset,disease,phase,class,dice_mean,dice_std,hd_mean,hd_std,n_runs\n";
  for (const auto& r : rows)
    out << r.arm << ',' << r.dataset << ',' << r.disease << ',' << phase_name(r.phase) << ',' << class_name(r.cls)
        << ',' << format_number(r.dice_mean) << ',' << format_number(r.dice_std) << ',' << format_number(r.hd_mean)
        << ',' << format_number(r.hd_std) << ',' << r.n_runs << '\n';
}

}  // namespace cardioseg
