#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "dllab/common.hpp"

namespace dllab {

// Long-format metric log: one (run, metric, epoch) key per row. Values are
// printed with shortest round-trip formatting so reruns are byte-identical.
struct MetricRecord {
  std::string run_id;
  std::string metric;
  double epoch = 0;
  double value = 0;
};

class MetricSeries {
 public:
  static constexpr const char* kHeader = "run_id,metric,epoch,value";

  void append(const std::string& run_id, const std::string& metric, double epoch, double value) {
    if (!keys_.insert({run_id, metric, epoch}).second) {
      throw Error("duplicate metric record: " + run_id + "/" + metric + "@" + fmt_double(epoch));
    }
    records_.push_back({run_id, metric, epoch, value});
  }

  const std::vector<MetricRecord>& records() const { return records_; }

  std::vector<MetricRecord> select(const std::string& metric) const {
    std::vector<MetricRecord> out;
    for (const auto& r : records_) {
      if (r.metric == metric) out.push_back(r);
    }
    return out;
  }

  void drop_after_epoch(double epoch) {
    std::vector<MetricRecord> kept;
    keys_.clear();
    for (auto& r : records_) {
      if (r.epoch <= epoch) {
        keys_.insert({r.run_id, r.metric, r.epoch});
        kept.push_back(std::move(r));
      }
    }
    records_ = std::move(kept);
  }

  void write_csv(const std::filesystem::path& path) const {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f << kHeader << "\n";
    for (const auto& r : records_) {
      f << r.run_id << "," << r.metric << "," << fmt_double(r.epoch) << "," << fmt_double(r.value)
        << "\n";
    }
    if (!f) throw Error("write failed: " + path.string());
  }

  static MetricSeries read_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != kHeader) {
      throw FormatError("bad metric CSV header in " + path.string());
    }
    MetricSeries out;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      size_t a = line.find(',');
      size_t b = line.find(',', a + 1);
      size_t c = line.find(',', b + 1);
      if (a == std::string::npos || b == std::string::npos || c == std::string::npos) {
        throw FormatError("bad metric CSV row in " + path.string() + ": " + line);
      }
      double epoch = 0, value = 0;
      try {
        epoch = std::stod(line.substr(b + 1, c - b - 1));
        value = std::stod(line.substr(c + 1));
      } catch (...) {
        throw FormatError("bad number in " + path.string() + ": " + line);
      }
      out.append(line.substr(0, a), line.substr(a + 1, b - a - 1), epoch, value);
    }
    return out;
  }

 private:
  std::vector<MetricRecord> records_;
  std::set<std::tuple<std::string, std::string, double>> keys_;
};

}  // namespace dllab
