#pragma once

#include "agmlab/agm.hpp"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace agmlab {

inline constexpr const char* kVersion = "agmlab 0.1.0";

// ---------------------------------------------------------------- summaries

struct CsvRow {
  long step;
  std::uint64_t seed;
  std::string metric;
  double value;
};

struct Check {
  std::string name;
  bool pass = false;
  double value = 0;
  double threshold = 0;
  std::string detail;
};

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Plot {
  std::string file;  // basename, .svg appended
  std::string title, xlabel, ylabel;
  bool logx = false, logy = false;
  std::vector<Series> series;
};

struct RunSummary {
  std::string experiment;
  json config;
  std::vector<std::uint64_t> seeds;
  json per_seed = json::array();  // one object per (seed, run)
  json aggregates = json::object();
  json extra = json::object();
  std::vector<Check> checks;
  std::vector<CsvRow> rows;
  std::vector<Plot> plots;

  bool all_pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

struct Aggregate {
  double mean = 0, std = 0, min = 0, max = 0;
  std::size_t n = 0;
};

inline Aggregate aggregate(const std::vector<double>& xs) {
  Aggregate a;
  a.n = xs.size();
  if (xs.empty()) return a;
  a.min = *std::min_element(xs.begin(), xs.end());
  a.max = *std::max_element(xs.begin(), xs.end());
  for (double x : xs) a.mean += x;
  a.mean /= static_cast<double>(xs.size());
  for (double x : xs) a.std += (x - a.mean) * (x - a.mean);
  a.std = xs.size() > 1 ? std::sqrt(a.std / static_cast<double>(xs.size() - 1)) : 0.0;
  return a;
}

inline json to_json(const Aggregate& a) {
  return {{"mean", a.mean}, {"std", a.std}, {"min", a.min}, {"max", a.max}, {"n", a.n}};
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(xs.begin(), xs.end());
  std::size_t m = xs.size() / 2;
  return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

// Least-squares slope of y on x.
inline double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

inline json to_json(const Check& c) {
  return {{"name", c.name}, {"pass", c.pass}, {"value", c.value}, {"threshold", c.threshold}, {"detail", c.detail}};
}

inline std::string hex64(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string config_hash(const json& config) {
  std::string s = config.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return hex64(h);
}

inline json summary_json(const RunSummary& s) {
  json checks = json::array();
  for (const auto& c : s.checks) checks.push_back(to_json(c));
  return {{"experiment", s.experiment},
          {"version", kVersion},
          {"config", s.config},
          {"config_hash", config_hash(s.config)},
          {"seeds", s.seeds},
          {"per_seed", s.per_seed},
          {"aggregates", s.aggregates},
          {"extra", s.extra},
          {"checks", checks},
          {"all_pass", s.all_pass()}};
}

// ---------------------------------------------------------------- worker pool

inline int worker_count() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* e = std::getenv("AGMLAB_THREADS")) {
    int cap = std::atoi(e);
    if (cap >= 1) n = std::min(n, cap);
  }
  return n;
}

// Runs fn(i) for i in [0, n) on the pool; results are collected by index so output order never
// depends on scheduling. The first exception is rethrown after all workers stop.
template <class R, class F>
std::vector<R> parallel_map(std::size_t n, F fn) {
  std::vector<R> out(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
        next = n;
      }
    }
  };
  int k = std::min<int>(worker_count(), static_cast<int>(std::max<std::size_t>(n, 1)));
  if (k <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < k; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (err) std::rethrow_exception(err);
  return out;
}

// ---------------------------------------------------------------- config

// Merges user keys into defaults; every user key must exist in the defaults. Arrays replace wholesale.
inline void merge_strict(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw std::invalid_argument("config: " + path + " must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw std::invalid_argument("config: unknown key '" + p + "'");
    json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object())
      merge_strict(slot, it.value(), p);
    else
      slot = it.value();
  }
}

inline const std::set<std::string>& optimizer_keys() {
  static const std::set<std::string> k{"kind", "label", "eta", "beta1", "beta2", "c", "eps", "lambda", "rows", "cols"};
  return k;
}

// Builds an AgmSpec from a config entry; c (if given) overrides beta2.
inline AgmSpec spec_from_config(const json& o, int d) {
  for (auto it = o.begin(); it != o.end(); ++it)
    if (!optimizer_keys().count(it.key())) throw std::invalid_argument("config: unknown optimizer key '" + it.key() + "'");
  AgmKind kind = agm_kind_from_string(o.at("kind").get<std::string>());
  AgmParams p;
  p.eta = o.value("eta", 0.01);
  p.beta1 = o.value("beta1", kind == AgmKind::Adam || kind == AgmKind::AdamE ? 0.9 : 0.0);
  p.beta2 = o.value("beta2", 0.999);
  p.eps = o.value("eps", 1e-8);
  p.lambda = o.value("lambda", 0.5);
  p.rows = o.value("rows", 0);
  p.cols = o.value("cols", 0);
  if (o.contains("c")) p.beta2 = 1.0 - o.at("c").get<double>() * p.eta * p.eta;
  AgmSpec s = make_spec(kind, d, p);
  if (o.contains("label")) s.name = o.at("label").get<std::string>();
  return s;
}

inline std::vector<std::uint64_t> seed_list(const json& cfg) {
  std::vector<std::uint64_t> out;
  const json& s = cfg.at("seeds");
  if (s.is_array()) {
    for (const auto& x : s) out.push_back(x.get<std::uint64_t>());
  } else {
    std::uint64_t base = cfg.value("seed_base", 0ull);
    long n = s.get<long>();
    if (n < 1) throw std::invalid_argument("config: seeds must be >= 1");
    for (long i = 0; i < n; ++i) out.push_back(base + static_cast<std::uint64_t>(i));
  }
  if (out.empty()) throw std::invalid_argument("config: empty seed list");
  return out;
}

// Parses "a.b.c=value"; value is JSON when it parses, else a string.
inline void apply_override(json& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override '" + kv + "' must look like key=value");
  std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
  json v;
  try {
    v = json::parse(val);
  } catch (const json::parse_error&) {
    v = val;
  }
  json* cur = &cfg;
  std::size_t start = 0;
  for (;;) {
    std::size_t dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (cur->is_array()) {
      std::size_t idx = std::stoul(part);
      if (idx >= cur->size()) throw std::invalid_argument("override: index out of range in '" + key + "'");
      cur = &(*cur)[idx];
    } else {
      if (!cur->contains(part)) throw std::invalid_argument("override: unknown key '" + key + "'");
      cur = &(*cur)[part];
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *cur = v;
}

// ---------------------------------------------------------------- output

inline std::string fmt_double(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string render_svg(const Plot& p) {
  const double W = 720, H = 440, L = 70, R = 170, T = 40, B = 55;
  auto tx = [&](double v) { return p.logx ? std::log10(v) : v; };
  auto ty = [&](double v) { return p.logy ? std::log10(v) : v; };
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : p.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if ((p.logx && s.x[i] <= 0) || (p.logy && s.y[i] <= 0) || !std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
        continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  if (x0 > x1) x0 = 0, x1 = 1;
  if (y0 > y1) y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double v) { return L + (tx(v) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (ty(v) - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(p.title) << "</text>\n";
  os << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    double fx = x0 + (x1 - x0) * k / 4, fy = y0 + (y1 - y0) * k / 4;
    double sx = L + (W - L - R) * k / 4.0, sy = H - B - (H - T - B) * k / 4.0;
    double lx = p.logx ? std::pow(10, fx) : fx, ly = p.logy ? std::pow(10, fy) : fy;
    os << "<text x=\"" << sx << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << std::setprecision(3) << lx
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << sy + 4 << "\" text-anchor=\"end\">" << ly << "</text>\n"
       << std::setprecision(6);
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 14 << "\" text-anchor=\"middle\">" << xml_escape(p.xlabel)
     << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << xml_escape(p.ylabel) << "</text>\n";
  for (std::size_t k = 0; k < p.series.size(); ++k) {
    const auto& s = p.series[k];
    const char* col = colors[k % 8];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if ((p.logx && s.x[i] <= 0) || (p.logy && s.y[i] <= 0) || !std::isfinite(s.y[i])) continue;
      os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    os << "\"/>\n";
    double ly = T + 14 + 18.0 * k;
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly - 4
       << "\" stroke=\"" << col << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 36 << "\" y=\"" << ly << "\">" << xml_escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << content;
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline std::string csv_text(const std::vector<CsvRow>& rows) {
  std::ostringstream os;
  os << "step,seed,metric,value\n";
  for (const auto& r : rows) os << r.step << ',' << r.seed << ',' << r.metric << ',' << fmt_double(r.value) << '\n';
  return os.str();
}

inline void emit_outputs(const RunSummary& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir.string() + "': " + ec.message());
  write_file(dir / (s.experiment + ".csv"), csv_text(s.rows));
  write_file(dir / (s.experiment + "_summary.json"), summary_json(s).dump(2) + "\n");
  for (const auto& p : s.plots) write_file(dir / (p.file + ".svg"), render_svg(p));
}

}  // namespace agmlab
