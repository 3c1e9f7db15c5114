#pragma once

// Confusion-count accumulation and the binary change-detection metrics.
// Positive class = changed. Counts are mergeable, so per-image counting
// parallelizes and metrics stay micro-averaged.

#include <cstdint>
#include <string>
#include <vector>

namespace vct {

struct ConfusionCounts {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

struct MetricReport {
  double precision = 0, recall = 0, f1 = 0, iou = 0, oa = 0;
  bool degenerate = false;  // some ratio hit the 0/0 convention
};

// Pixelwise counts added into acc; masks are nonzero = changed.
void accumulate(const std::vector<std::uint8_t>& pred,
                const std::vector<std::uint8_t>& gt, ConfusionCounts& acc);

MetricReport compute(const ConfusionCounts& acc);

// Aligned human-readable report, percentages with 2 decimals.
std::string format_report(const MetricReport& r);

// Machine-readable key=value lines.
std::string format_report_kv(const MetricReport& r);

// Parses the key=value form back; throws on malformed input.
MetricReport parse_report_kv(const std::string& text);

}  // namespace vct
