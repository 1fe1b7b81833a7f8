#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "pata/bench.hpp"
#include "pata/image_io.hpp"

namespace pata {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;

  /// Axis domains: x spans the data exactly, y gets a small margin.
  std::pair<double, double> x_domain() const {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : series)
      for (double v : s.x) lo = std::min(lo, v), hi = std::max(hi, v);
    if (!(lo <= hi)) return {0.0, 1.0};
    if (lo == hi) return {lo - 0.5, hi + 0.5};
    return {lo, hi};
  }

  std::pair<double, double> y_domain() const {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : series)
      for (double v : s.y) lo = std::min(lo, v), hi = std::max(hi, v);
    if (!(lo <= hi)) return {0.0, 1.0};
    const double pad = lo == hi ? 0.5 : 0.05 * (hi - lo);
    return {lo - pad, hi + pad};
  }
};

namespace plot_detail {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string tick(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

}  // namespace plot_detail

inline void write_svg(const std::filesystem::path& path, const LinePlot& plot) {
  using plot_detail::escape;
  constexpr double W = 640, H = 400, L = 70, R = 160, T = 40, B = 50;
  const auto [x0, x1] = plot.x_domain();
  const auto [y0, y1] = plot.y_domain();
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(plot.title) << "</text>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
    out << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << plot_detail::tick(xv) << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << plot_detail::tick(yv) << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << escape(plot.x_label) << "</text>\n";
  out << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << escape(plot.y_label) << "</text>\n";
  for (std::size_t s = 0; s < plot.series.size(); ++s) {
    const auto& ser = plot.series[s];
    const char* color = colors[s % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t i = 0; i < ser.x.size() && i < ser.y.size(); ++i) out << px(ser.x[i]) << ',' << py(ser.y[i]) << ' ';
    out << "\"/>\n";
    if (ser.x.size() <= 32)
      for (std::size_t i = 0; i < ser.x.size() && i < ser.y.size(); ++i)
        out << "<circle cx=\"" << px(ser.x[i]) << "\" cy=\"" << py(ser.y[i]) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(s);
    out << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 32 << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << W - R + 38 << "\" y=\"" << ly + 4 << "\">" << escape(ser.name) << "</text>\n";
  }
  out << "</svg>\n";
}

/// Lays tiles out left to right (each scaled up by `scale`, nearest
/// neighbour) with a 2 pixel gray gutter, and writes an RGB PNG.
inline void write_panel_png(const std::filesystem::path& path, const std::vector<ImageTensor>& tiles, int scale = 4) {
  if (tiles.empty()) throw InputError("panel needs at least one tile");
  constexpr int gap = 2;
  int h = 0, w = gap;
  for (const auto& t : tiles) h = std::max(h, t.height * scale), w += t.width * scale + gap;
  ImageTensor panel(h + 2 * gap, w, 3);
  std::fill(panel.data.begin(), panel.data.end(), 0.5);
  int ox = gap;
  for (const auto& t : tiles) {
    for (int y = 0; y < t.height * scale; ++y)
      for (int x = 0; x < t.width * scale; ++x)
        for (int c = 0; c < 3; ++c) panel.at(y + gap, ox + x, c) = t.at(y / scale, x / scale, t.channels == 3 ? c : 0);
    ox += t.width * scale + gap;
  }
  write_png(path.string(), panel);
}

inline ImageTensor mask_tile(const BinaryMask& m) {
  ImageTensor t(m.height, m.width, 3);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (int c = 0; c < 3; ++c) t.at(y, x, c) = m.at(y, x) ? 1.0 : 0.0;
  return t;
}

/// Mean fd over pairs at every iteration where all successful pairs logged one.
inline Series mean_fd_series(const RunRecord& run, const std::string& name) {
  Series s{name, {}, {}};
  std::map<int, std::pair<double, int>> acc;
  int n_ok = 0;
  for (const auto& p : run.per_pair) {
    if (!p.ok) continue;
    ++n_ok;
    for (const auto& r : p.fd_trajectory)
      if (r.fd_estimate) acc[r.iter].first += *r.fd_estimate, acc[r.iter].second += 1;
  }
  for (const auto& [it, v] : acc) {
    if (v.second != n_ok) continue;
    s.x.push_back(it);
    s.y.push_back(v.first / v.second);
  }
  return s;
}

inline std::string run_method_name(const RunRecord& run) {
  return run.spec_echo.contains("attack") ? run.spec_echo["attack"].value("method", "?") : "?";
}

/// fd-vs-iteration curves, one per run (labelled by attack method).
/// Runs without fd data are skipped with a warning; returns false if nothing was plotted.
inline bool write_fd_plot(const std::filesystem::path& path, const std::vector<RunRecord>& runs, const WarningSink& warn) {
  LinePlot plot{"Feature dominance during the attack", "iteration", "mean fd", {}};
  for (const auto& r : runs) {
    Series s = mean_fd_series(r, run_method_name(r));
    if (s.x.empty()) {
      if (warn) warn("no fd series for method " + s.name + "; fd plot skipped for it");
      continue;
    }
    plot.series.push_back(std::move(s));
  }
  if (plot.series.empty()) return false;
  write_svg(path, plot);
  return true;
}

/// Writes everything that can be drawn from the artifacts in `run_dir`:
/// plots/fd.svg, plots/miou_vs_k.svg (cross-prompt), plots/sweep.svg and one
/// panel PNG per pair and prompt kind under plots/panels/. Returns the files written.
inline std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir,
                                                     const WarningSink& warn = warn_to_stderr) {
  namespace fs = std::filesystem;
  std::vector<fs::path> written;
  const fs::path plots = run_dir / "plots";
  fs::create_directories(plots);
  bool any_source = false;

  if (fs::exists(run_dir / "run.json")) {
    any_source = true;
    const RunRecord run = run_record_from_json(read_json_file((run_dir / "run.json").string()));
    if (write_fd_plot(plots / "fd.svg", {run}, warn)) written.push_back(plots / "fd.svg");
    const std::string sid = path_safe(run.surrogate_id);
    for (const auto& p : run.per_pair) {
      if (!p.ok) continue;
      const fs::path dir = run_dir / "pairs" / path_safe(p.pair_id);
      const fs::path mdir = dir / "masks" / sid;
      if (!fs::exists(dir / "adv.f64")) {
        if (warn) warn("pair " + p.pair_id + " has no saved images; panel skipped");
        continue;
      }
      const ImageTensor clean = read_raw_image((dir / "clean.f64").string());
      const ImageTensor adv = read_raw_image((dir / "adv.f64").string());
      const ImageTensor target = read_raw_image((dir / "target.f64").string());
      auto kinds_it = p.by_kind.find(run.surrogate_id);
      if (kinds_it == p.by_kind.end()) continue;
      fs::create_directories(plots / "panels");
      for (const auto& [kind, report] : kinds_it->second) {
        const fs::path ma = mdir / (kind + "_0_adv.png"), mt = mdir / (kind + "_0_target.png");
        if (!fs::exists(ma) || !fs::exists(mt)) {
          if (warn) warn("pair " + p.pair_id + " has no saved " + kind + " masks; panel skipped");
          continue;
        }
        const fs::path out = plots / "panels" / (path_safe(p.pair_id) + "_" + kind + ".png");
        write_panel_png(out, {clean, adv, target, mask_tile(read_mask_png(mt.string())), mask_tile(read_mask_png(ma.string()))});
        written.push_back(out);
      }
    }
  }

  if (fs::exists(run_dir / "cross_prompt.json")) {
    any_source = true;
    const Json cp = read_json_file((run_dir / "cross_prompt.json").string());
    Series train{"train prompts", {}, {}}, test{"test prompts", {}, {}};
    for (const auto& r : cp.at("mean")) {
      train.x.push_back(r.at("k").get<double>());
      train.y.push_back(r.at("train_miou").get<double>());
      test.x.push_back(r.at("k").get<double>());
      test.y.push_back(r.at("test_miou").get<double>());
    }
    if (train.x.empty()) {
      if (warn) warn("cross_prompt.json has no rows; mIoU-vs-K plot skipped");
    } else {
      write_svg(plots / "miou_vs_k.svg", LinePlot{"Cross-prompt decoder attack", "training prompts K", "mIoU", {train, test}});
      written.push_back(plots / "miou_vs_k.svg");
    }
  }

  if (fs::exists(run_dir / "sweep.json")) {
    any_source = true;
    const Json sw = read_json_file((run_dir / "sweep.json").string());
    std::map<std::string, Series> by_model;
    for (const auto& r : sw.at("rows")) {
      for (const auto& [id, m] : r.at("aggregate").items()) {
        auto& s = by_model[id];
        s.name = id;
        s.x.push_back(r.at("value").get<double>());
        s.y.push_back(m.get<double>());
      }
    }
    LinePlot plot{"Sweep over " + sw.value("param", std::string("?")), sw.value("param", std::string("value")), "mIoU", {}};
    for (auto& [id, s] : by_model) plot.series.push_back(std::move(s));
    if (!plot.series.empty()) {
      write_svg(plots / "sweep.svg", plot);
      written.push_back(plots / "sweep.svg");
    }
  }
  if (!any_source && warn) warn("no run.json, cross_prompt.json or sweep.json in " + run_dir.string());
  return written;
}

}  // namespace pata
