#include "m2d/metrics.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "m2d/errors.hpp"

namespace m2d {

namespace {
constexpr const char* kHeader = "step,loss_m2d,loss_off,loss_total,tau,seconds\n";
}

std::string format_metrics_row(const MetricsRow& row) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%ld,%.9f,%.9f,%.9f,%.9f,%.3f\n", row.step, row.loss_m2d,
                row.loss_off, row.loss_total, row.tau, row.seconds);
  return buf;
}

MetricsWriter::MetricsWriter(std::string path, std::function<double()> clock)
    : path_(std::move(path)), clock_(std::move(clock)) {
  if (clock_) last_time_ = clock_();
}

MetricsWriter::~MetricsWriter() {
  try {
    close();
  } catch (...) {
    // Destructor swallows IO failures; call close() directly to observe them.
  }
}

void MetricsWriter::add(long step, double loss_m2d, double loss_off, double loss_total,
                        double tau) {
  MetricsRow row{step, loss_m2d, loss_off, loss_total, tau, 0.0};
  if (clock_) {
    double now = clock_();
    row.seconds = now - last_time_;
    last_time_ = now;
  }
  rows_.push_back(row);
}

void MetricsWriter::close() {
  if (closed_) return;
  closed_ = true;
  if (path_.empty()) return;
  std::string tmp = path_ + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f << kHeader;
    for (const auto& row : rows_) f << format_metrics_row(row);
    if (!f) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path_, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path_ + ": " + ec.message());
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open metrics file " + path);
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty metrics file " + path);
  if (line != std::string(kHeader).substr(0, std::string(kHeader).size() - 1))
    throw IoError("unexpected metrics header in " + path);
  std::vector<MetricsRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    MetricsRow row;
    if (std::sscanf(line.c_str(), "%ld,%lf,%lf,%lf,%lf,%lf", &row.step, &row.loss_m2d,
                    &row.loss_off, &row.loss_total, &row.tau, &row.seconds) != 6)
      throw IoError("malformed metrics row in " + path + ": " + line);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace m2d
