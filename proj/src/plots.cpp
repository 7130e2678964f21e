#include "abc/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "abc/errors.hpp"
#include "abc/experiment.hpp"
#include "abc/stats.hpp"

namespace abc {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError("table has no column '" + name + "'", 0);
    return static_cast<std::size_t>(it - header.begin());
  }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

Table read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot read '" + path.string() + "'");
  Table t;
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw ParseError("empty table '" + path.string() + "'", 0);
  t.header = split(line);
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.header.size()) throw ParseError("ragged row in '" + path.string() + "'", offset);
    t.rows.push_back(std::move(cells));
    offset += line.size() + 1;
  }
  return t;
}

const cv::Scalar kInk(40, 40, 40);
const cv::Scalar kGrid(215, 215, 215);
const cv::Scalar kWhite(255, 255, 255);

// Distinct BGR line colours.
const std::vector<cv::Scalar> kPalette = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},  {40, 39, 214},
                                          {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

cv::Vec3b viridis(double t) {
  static const cv::Mat lut = [] {
    cv::Mat ramp(1, 256, CV_8UC1);
    for (int i = 0; i < 256; ++i) ramp.at<uchar>(0, i) = static_cast<uchar>(i);
    cv::Mat out;
    cv::applyColorMap(ramp, out, cv::COLORMAP_VIRIDIS);
    return out;
  }();
  const int i = std::clamp(static_cast<int>(std::lround(t * 255.0)), 0, 255);
  return lut.at<cv::Vec3b>(0, i);
}

void text(cv::Mat& img, const std::string& s, cv::Point at, double scale = 0.4, cv::Scalar colour = kInk) {
  cv::putText(img, s, at, cv::FONT_HERSHEY_SIMPLEX, scale, colour, 1, cv::LINE_AA);
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

void write_png(const fs::path& path, const cv::Mat& img) {
  if (!cv::imwrite(path.string(), img)) throw ConfigError("cannot write '" + path.string() + "'");
}

cv::Mat to_bgr(const Image& img, int cell) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      auto px = [&](int c) {
        const float v = img.at(y, x, img.channels == 1 ? 0 : c);
        return static_cast<uchar>(std::clamp(std::lround(v * 255.0f), 0L, 255L));
      };
      m.at<cv::Vec3b>(y, x) = {px(2), px(1), px(0)};
    }
  }
  cv::Mat out;
  cv::resize(m, out, cv::Size(cell, cell), 0, 0, cv::INTER_NEAREST);
  return out;
}

// ---- pca ----

fs::path plot_pca(const fs::path& dir, const ExperimentConfig& config, const std::string& hash) {
  const Table t = read_table(dir / "embeddings.csv");
  std::vector<std::size_t> emb_cols, factor_cols;
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    const std::string& h = t.header[c];
    if (h == "config_hash" || h == "index") continue;
    const bool is_emb = h.size() > 1 && h[0] == 'e' && std::all_of(h.begin() + 1, h.end(), ::isdigit);
    (is_emb ? emb_cols : factor_cols).push_back(c);
  }
  if (t.rows.size() < 2 || emb_cols.empty()) throw ProbeError("embedding dump too small for PCA");
  torch::Tensor x = torch::empty({static_cast<std::int64_t>(t.rows.size()), static_cast<std::int64_t>(emb_cols.size())},
                                 torch::kFloat64);
  auto acc = x.accessor<double, 2>();
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    for (std::size_t k = 0; k < emb_cols.size(); ++k) {
      acc[static_cast<std::int64_t>(r)][static_cast<std::int64_t>(k)] = std::stod(t.rows[r][emb_cols[k]]);
    }
  }
  const Pca pca = fit_pca(x);
  const int k = std::min<int>(2, static_cast<int>(emb_cols.size()));
  const std::size_t shown = std::min(kScatterPoints, t.rows.size());
  const torch::Tensor proj = pca.project(x.slice(0, 0, static_cast<std::int64_t>(shown)), k).contiguous();
  std::vector<double> px(shown), py(shown, 0.0);
  for (std::size_t i = 0; i < shown; ++i) {
    px[i] = proj[static_cast<std::int64_t>(i)][0].item<double>();
    if (k > 1) py[i] = proj[static_cast<std::int64_t>(i)][1].item<double>();
  }
  auto span = [](const std::vector<double>& v) {
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    double a = *lo, b = *hi;
    if (b - a < 1e-12) a -= 1.0, b += 1.0;  // degenerate: every point in the centre
    const double pad = 0.05 * (b - a);
    return std::pair<double, double>{a - pad, b + pad};
  };
  const auto [x0, x1] = span(px);
  const auto [y0, y1] = span(py);

  constexpr int kPanel = 240, kPad = 30, kHeader = 40;
  const int panels = std::max<int>(1, static_cast<int>(factor_cols.size()));
  const int cols = std::min(3, panels), rows = (panels + cols - 1) / cols;
  cv::Mat img(kHeader + rows * (kPanel + kPad), cols * (kPanel + kPad) + kPad, CV_8UC3, kWhite);
  text(img, config.name + "  PC1 " + fixed(100 * pca.fractions[0], 1) + "%" +
                (k > 1 ? "  PC2 " + fixed(100 * pca.fractions[1], 1) + "%" : std::string()) + "  " + hash,
       {kPad, 24}, 0.45);
  for (int p = 0; p < panels; ++p) {
    const int ox = kPad + (p % cols) * (kPanel + kPad), oy = kHeader + (p / cols) * (kPanel + kPad) + 14;
    cv::rectangle(img, {ox, oy, kPanel, kPanel}, kGrid);
    std::vector<double> value(shown, 0.5);
    if (!factor_cols.empty()) {
      const std::size_t c = factor_cols[static_cast<std::size_t>(p)];
      const std::string& name = t.header[c];
      const bool inactive = std::count(config.curation.inactive.begin(), config.curation.inactive.end(), name) > 0;
      text(img, name + (inactive ? " (inactive)" : ""), {ox, oy - 4});
      for (std::size_t i = 0; i < shown; ++i) value[i] = std::stod(t.rows[i][c]);
      auto [lo, hi] = std::minmax_element(value.begin(), value.end());
      const double a = *lo, b = *hi;
      for (double& v : value) v = b > a ? (v - a) / (b - a) : 0.5;
    }
    for (std::size_t i = 0; i < shown; ++i) {
      const int sx = ox + static_cast<int>(std::lround((px[i] - x0) / (x1 - x0) * (kPanel - 1)));
      const int sy = oy + kPanel - 1 - static_cast<int>(std::lround((py[i] - y0) / (y1 - y0) * (kPanel - 1)));
      const cv::Vec3b c = viridis(value[i]);
      cv::circle(img, {sx, sy}, 3, cv::Scalar(c[0], c[1], c[2]), cv::FILLED, cv::LINE_AA);
    }
  }
  const fs::path out = dir / ("pca-" + hash + ".png");
  write_png(out, img);
  std::ofstream meta(dir / ("pca-" + hash + ".json"), std::ios::trunc);
  meta << json{{"config_hash", hash}, {"fractions", pca.fractions}, {"fit_points", t.rows.size()},
               {"plotted_points", shown}}.dump(2)
       << '\n';
  return out;
}

// ---- mi vs sigma ----

fs::path plot_mi_sigma(const fs::path& dir, const ExperimentConfig& config, const std::string& hash) {
  const Table t = read_table(dir / "mi_sweep.csv");
  const std::size_t cf = t.column("factor"), ci = t.column("inactive"), cs = t.column("sigma"), cn = t.column("nats");
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<double, double>>> curves;
  std::map<std::string, bool> inactive;
  double ymax = 0.0, smin = 1e300, smax = 0.0;
  for (const auto& r : t.rows) {
    if (!curves.count(r[cf])) order.push_back(r[cf]);
    const double s = std::stod(r[cs]), n = std::stod(r[cn]);
    curves[r[cf]].push_back({s, n});
    inactive[r[cf]] = r[ci] == "1";
    ymax = std::max(ymax, n), smin = std::min(smin, s), smax = std::max(smax, s);
  }
  if (order.empty() || !(smin > 0) || !(smax > smin)) throw ProbeError("mi_sweep.csv holds no usable sweep");
  ymax = ymax > 0 ? 1.1 * ymax : 1.0;

  constexpr int kW = 640, kH = 420, kL = 60, kR = 150, kT = 40, kB = 50;
  cv::Mat img(kH, kW, CV_8UC3, kWhite);
  const double lx0 = std::log10(smin), lx1 = std::log10(smax);
  auto sx = [&](double s) { return kL + static_cast<int>(std::lround((std::log10(s) - lx0) / (lx1 - lx0) * (kW - kL - kR))); };
  auto sy = [&](double v) { return kH - kB - static_cast<int>(std::lround(v / ymax * (kH - kT - kB))); };
  cv::rectangle(img, {kL, kT}, {kW - kR, kH - kB}, kInk);
  for (int d = static_cast<int>(std::ceil(lx0)); d <= static_cast<int>(std::floor(lx1)); ++d) {
    const int x = sx(std::pow(10.0, d));
    cv::line(img, {x, kT}, {x, kH - kB}, kGrid);
    text(img, "1e" + std::to_string(d), {x - 12, kH - kB + 16});
  }
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4.0;
    text(img, fixed(v, 2), {8, sy(v) + 4});
  }
  text(img, "noise sigma", {(kW - kR) / 2 - 20, kH - 12});
  text(img, "MI (nats)  " + config.name + "  " + hash, {kL, 24}, 0.45);

  const double sigma = config.probe_sigma();
  if (sigma >= smin && sigma <= smax) {
    const int x = sx(sigma);
    for (int y = kT; y < kH - kB; y += 6) cv::line(img, {x, y}, {x, std::min(y + 2, kH - kB)}, kInk);
  }
  for (std::size_t f = 0; f < order.size(); ++f) {
    auto pts = curves[order[f]];
    std::sort(pts.begin(), pts.end());
    const cv::Scalar colour = kPalette[f % kPalette.size()];
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const cv::Point a{sx(pts[i - 1].first), sy(pts[i - 1].second)}, b{sx(pts[i].first), sy(pts[i].second)};
      if (!inactive[order[f]]) {
        cv::line(img, a, b, colour, 2, cv::LINE_AA);
      } else if (i % 2 == 1) {  // dashed: every other segment
        cv::line(img, a, b, colour, 2, cv::LINE_AA);
      }
    }
    const int ly = kT + 14 + 18 * static_cast<int>(f);
    cv::line(img, {kW - kR + 10, ly - 4}, {kW - kR + 30, ly - 4}, colour, 2);
    text(img, order[f] + (inactive[order[f]] ? " *" : ""), {kW - kR + 36, ly});
  }
  const fs::path out = dir / ("mi_sigma-" + hash + ".png");
  write_png(out, img);
  return out;
}

// ---- retrieval grid ----

fs::path plot_retrieval(const fs::path& dir, const ExperimentConfig& config, const std::string& hash) {
  const ExperimentData data = open_experiment_data(config);
  TrainState state = TrainState::load((dir / "checkpoint.pt").string(), config.train_config());
  const ProbeSample gallery = draw_probe_sample(config, data);
  const std::string& class_factor = config.curation.inactive.front();
  const FactorSpec& spec = data.full->spec();
  const std::size_t f = spec.index_of(class_factor);

  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < gallery.latents.size(); ++i) {
    groups[spec[f].key(gallery.latents[i].values[f], data.full->key_bins())].push_back(i);
  }
  std::vector<std::vector<std::size_t>> classes;
  std::vector<int> class_keys;
  for (auto& [key, members] : groups) classes.push_back(members), class_keys.push_back(key);

  std::vector<Observation> queries;
  const std::vector<Observation>& source = data.withheld.empty() ? gallery.observations : data.withheld;
  for (std::size_t i = 0; i < std::min<std::size_t>(kRetrievalRows, source.size()); ++i) queries.push_back(source[i]);
  if (queries.empty()) throw ProbeError("retrieval grid has no queries");

  const torch::Tensor g = embed_all(state.encoder, gallery.observations);
  const torch::Tensor q = embed_all(state.encoder, queries);

  constexpr int kCell = 48, kGap = 4, kHeader = 30, kLeft = 8;
  const int width = kLeft + (static_cast<int>(classes.size()) + 1) * (kCell + kGap) + kGap + 8;
  const int height = kHeader + static_cast<int>(queries.size()) * (kCell + kGap) + 8;
  cv::Mat img(height, width, CV_8UC3, kWhite);
  text(img, config.name + "  by " + class_factor + "  " + hash, {kLeft, 20}, 0.4);
  for (std::size_t r = 0; r < queries.size(); ++r) {
    const int y = kHeader + static_cast<int>(r) * (kCell + kGap);
    to_bgr(queries[r].image, kCell).copyTo(img(cv::Rect(kLeft, y, kCell, kCell)));
    cv::rectangle(img, {kLeft - 2, y - 2, kCell + 4, kCell + 4}, cv::Scalar(40, 39, 214), 2);
    const auto hits = retrieve_per_class(q[static_cast<std::int64_t>(r)], g, classes, config.loss.metric);
    for (std::size_t c = 0; c < hits.size(); ++c) {
      const int x = kLeft + (static_cast<int>(c) + 1) * (kCell + kGap) + kGap;
      to_bgr(gallery.observations[hits[c]].image, kCell).copyTo(img(cv::Rect(x, y, kCell, kCell)));
    }
  }
  const fs::path out = dir / ("retrieval-" + hash + ".png");
  write_png(out, img);
  return out;
}

}  // namespace

std::vector<fs::path> emit_plots(const fs::path& run_dir, const std::vector<std::string>& kinds) {
  std::set<std::string> needed{"config.json"};
  for (const auto& k : kinds) {
    if (k == "pca") {
      needed.insert("embeddings.csv");
    } else if (k == "mi_sigma") {
      needed.insert("mi_sweep.csv");
    } else if (k == "retrieval") {
      needed.insert("checkpoint.pt");
    } else {
      throw ConfigError("unknown plot kind '" + k + "'");
    }
  }
  std::string missing;
  for (const auto& n : needed) {
    if (!fs::exists(run_dir / n)) missing += (missing.empty() ? "" : ", ") + n;
  }
  if (!missing.empty()) throw MissingArtifactError("run directory '" + run_dir.string() + "' lacks: " + missing);

  const ExperimentConfig config = ExperimentConfig::load(run_dir / "config.json");
  const std::string hash = config.hash();
  std::vector<fs::path> out;
  for (const auto& k : kinds) {
    if (k == "pca") out.push_back(plot_pca(run_dir, config, hash));
    if (k == "mi_sigma") out.push_back(plot_mi_sigma(run_dir, config, hash));
    if (k == "retrieval") {
      if (config.curation.inactive.empty()) throw ConfigError("retrieval grid needs an inactive factor");
      out.push_back(plot_retrieval(run_dir, config, hash));
    }
  }
  return out;
}

}  // namespace abc
