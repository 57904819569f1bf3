// Runs every acceptance criterion from configs/criterion_N.json and prints one line per criterion.
// Usage: agmlab_acceptance [N ...] [--out DIR]
#include "agmlab/harness.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>

using namespace agmlab;

namespace {

struct Criterion {
  int id;
  const char* title;
  double budget_s;
};

constexpr Criterion kCriteria[] = {
    {1, "projection identities on ellipse and diagnet", 60},
    {2, "brute-force argmin agreement on tiny diagnet", 120},
    {3, "ellipse separation of SGD and Adam", 300},
    {4, "slow-ODE fixed points", 300},
    {5, "tracking gap shrinks with eta", 1800},
    {6, "diagnet data efficiency at n*", 3600},
    {7, "matrix factorization ordering", 1800},
    {8, "plateau loss scales linearly in eta", 600},
    {9, "Shampoo vectorization and curl", 300},
};

std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4g", v);
  return b;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  std::filesystem::path out;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--out" && i + 1 < argc)
      out = argv[++i];
    else
      only.insert(std::stoi(a));
  }
  const std::filesystem::path dir = AGMLAB_CONFIG_DIR;
  int failed = 0;
  for (const auto& c : kCriteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    std::string line, notes;
    bool pass = false;
    double secs = 0;
    try {
      json cfg = resolve_config(load_json_file(dir / ("criterion_" + std::to_string(c.id) + ".json")));
      auto t0 = std::chrono::steady_clock::now();
      RunSummary s = run_experiment(cfg);
      secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      pass = s.all_pass() && secs < c.budget_s;
      for (const auto& k : s.checks) notes += " " + k.name + "=" + fmt(k.value) + (k.pass ? "" : "(FAIL)");
      if (s.extra.contains("clause_fractions"))
        for (auto& [k, v] : s.extra["clause_fractions"].items()) notes += " clause." + k + "=" + fmt(v.get<double>());
      if (!out.empty()) emit_outputs(s, out / ("criterion_" + std::to_string(c.id)));
    } catch (const std::exception& e) {
      notes = std::string(" error: ") + e.what();
    }
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.title << " [" << fmt(secs) << "s / "
              << c.budget_s << "s]" << notes << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
