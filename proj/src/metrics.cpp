#include "vct/metrics.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace vct {

void accumulate(const std::vector<std::uint8_t>& pred,
                const std::vector<std::uint8_t>& gt, ConfusionCounts& acc) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("accumulate: mask size mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g)
      ++acc.tp;
    else if (p && !g)
      ++acc.fp;
    else if (!p && g)
      ++acc.fn;
    else
      ++acc.tn;
  }
}

MetricReport compute(const ConfusionCounts& acc) {
  if (acc.total() == 0)
    throw std::invalid_argument("compute: empty accumulator");
  MetricReport r;
  const double tp = double(acc.tp), tn = double(acc.tn), fp = double(acc.fp),
               fn = double(acc.fn);
  auto ratio = [&r](double num, double den) {
    if (den == 0.0) {
      r.degenerate = true;
      return 0.0;
    }
    return num / den;
  };
  r.precision = ratio(tp, tp + fp);
  r.recall = ratio(tp, tp + fn);
  r.f1 = ratio(2.0 * r.precision * r.recall, r.precision + r.recall);
  r.iou = ratio(tp, tp + fn + fp);
  r.oa = (tp + tn) / (tp + tn + fn + fp);
  return r;
}

std::string format_report(const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "precision %6.2f%%\nrecall    %6.2f%%\nf1        %6.2f%%\n"
                "iou       %6.2f%%\noa        %6.2f%%\n%s",
                100.0 * r.precision, 100.0 * r.recall, 100.0 * r.f1,
                100.0 * r.iou, 100.0 * r.oa,
                r.degenerate ? "(degenerate: some 0/0 ratio reported as 0)\n"
                             : "");
  return buf;
}

std::string format_report_kv(const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "precision=%.2f\nrecall=%.2f\nf1=%.2f\niou=%.2f\noa=%.2f\n"
                "degenerate=%d\n",
                100.0 * r.precision, 100.0 * r.recall, 100.0 * r.f1,
                100.0 * r.iou, 100.0 * r.oa, r.degenerate ? 1 : 0);
  return buf;
}

MetricReport parse_report_kv(const std::string& text) {
  MetricReport r;
  std::istringstream is(text);
  std::string line;
  int seen = 0;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const double val = std::stod(line.substr(eq + 1));
    if (key == "precision")
      r.precision = val / 100.0, ++seen;
    else if (key == "recall")
      r.recall = val / 100.0, ++seen;
    else if (key == "f1")
      r.f1 = val / 100.0, ++seen;
    else if (key == "iou")
      r.iou = val / 100.0, ++seen;
    else if (key == "oa")
      r.oa = val / 100.0, ++seen;
    else if (key == "degenerate")
      r.degenerate = val != 0.0;
  }
  if (seen != 5) throw std::runtime_error("parse_report_kv: missing keys");
  return r;
}

}  // namespace vct
