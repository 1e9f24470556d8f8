// Acceptance suite: one PASS/FAIL line per criterion, exit 0 iff all pass.
// Usage: acceptance [criterion numbers...] [--json FILE]
#include <cstdio>
#include <fstream>
#include <set>
#include <string>

#include "inspect/experiments.hpp"

namespace {

struct Criterion {
  int id;
  const char* title;
  const char* experiment;
};

constexpr Criterion kCriteria[] = {
    {1, "scheduled updates prevent forgetting", "forgetting"},
    {2, "augmentation gain", "augmentation"},
    {3, "detector beats classifier on local spots", "classifier-vs-detector"},
    {4, "line protocol audit", "protocol-audit"},
    {5, "analytic gradients match finite differences", "gradient-check"},
    {6, "saliency localises defects", "saliency"},
    {7, "line expansion beats scratch training", "expansion"},
    {8, "determinism and bit-exact round trips", "determinism"},
};

std::string describe(const inspect::experiments::Check& c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s=%.6g (%s %.6g)", c.name.c_str(), c.measured, c.relation.c_str(), c.threshold);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  std::string json_path;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--json" && i + 1 < argc) {
      json_path = argv[++i];
    } else {
      try {
        wanted.insert(std::stoi(a));
      } catch (const std::exception&) {
        std::fprintf(stderr, "unknown argument '%s'\n", a.c_str());
        return 2;
      }
    }
  }

  const auto& all = inspect::experiments::registry();
  nlohmann::json report = nlohmann::json::array();
  bool ok = true;
  for (const auto& c : kCriteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    inspect::experiments::Outcome out;
    std::string failure;
    try {
      out = all.at(c.experiment)();
    } catch (const std::exception& e) {
      failure = e.what();
    }
    const bool passed = failure.empty() && out.passed();
    ok = ok && passed;
    std::string line;
    for (const auto& chk : out.checks) line += (line.empty() ? "" : "; ") + describe(chk) + (chk.passed ? "" : " FAILED");
    if (!failure.empty()) line = "error: " + failure;
    std::printf("%s criterion %d (%s) [%.1fs]: %s\n", passed ? "PASS" : "FAIL", c.id, c.title, out.seconds, line.c_str());
    std::fflush(stdout);
    auto j = inspect::experiments::to_json(out);
    j["criterion"] = c.id;
    report.push_back(j);
  }
  if (!json_path.empty()) std::ofstream(json_path) << report.dump(2) << '\n';
  std::printf("%s\n", ok ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL");
  return ok ? 0 : 1;
}
