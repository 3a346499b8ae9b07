#pragma once

#include <functional>
#include <string>
#include <vector>

namespace m2d {

struct MetricsRow {
  long step = 0;
  double loss_m2d = 0.0;
  double loss_off = 0.0;
  double loss_total = 0.0;
  double tau = 0.0;
  double seconds = 0.0;
};

// "step,loss_m2d,loss_off,loss_total,tau,seconds" with fixed decimal places,
// so identical runs produce identical bytes.
std::string format_metrics_row(const MetricsRow& row);

// Buffers one row per step and writes header + rows atomically on close().
// The seconds column stays 0.000 unless a clock is injected: wall time in a
// metrics file would break run-to-run byte identity.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::string path, std::function<double()> clock = nullptr);
  ~MetricsWriter();

  void add(long step, double loss_m2d, double loss_off, double loss_total, double tau);
  void close();  // idempotent; no-op path skips the write
  const std::vector<MetricsRow>& rows() const { return rows_; }

 private:
  std::string path_;
  std::function<double()> clock_;
  double last_time_ = 0.0;
  std::vector<MetricsRow> rows_;
  bool closed_ = false;
};

std::vector<MetricsRow> read_metrics(const std::string& path);

}  // namespace m2d
