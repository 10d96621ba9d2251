#include "ecm/report.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ecm/rng.hpp"

namespace ecm {

std::vector<BudgetRow> budget_report(const RunConfig& cfg, const std::vector<double>& alphas,
                                     int mc_draws) {
  if (alphas.empty()) throw TensorError("budget_report: no alphas");
  const ScaleSchedule& sched = cfg.model.schedule;
  const std::vector<int> cum = sched.cumulative();
  const double full_tokens = static_cast<double>(cum.back());
  const FlopsEstimate flops =
      count_flops(cfg.model, static_cast<int>(cfg.anchors.size()), cfg.ffn_ratio);

  std::vector<BudgetRow> rows;
  rows.reserve(alphas.size());
  for (double alpha : alphas) {
    TruncationLaw law{alpha, sched};
    BudgetRow row;
    row.alpha = alpha;
    row.expected_tokens = expected_token_count(law);
    Rng rng(cfg.seed ^ 0x6275646765746d63ULL);
    double acc = 0.0;
    for (int i = 0; i < mc_draws; ++i)
      acc += cum[static_cast<size_t>(sample_truncation_scale(law, rng) - 1)];
    row.mc_tokens = acc / mc_draws;
    row.ratio_vs_full = row.expected_tokens / full_tokens;
    row.step_flops = flops.full_total * row.ratio_vs_full;
    rows.push_back(row);
  }
  return rows;
}

void write_budget_csv(const std::vector<BudgetRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw TensorError("write_budget_csv: cannot open " + path);
  out << "alpha,expected_tokens,mc_tokens,ratio_vs_full,step_flops\n";
  out << std::setprecision(10);
  for (const BudgetRow& r : rows)
    out << r.alpha << ',' << r.expected_tokens << ',' << r.mc_tokens << ',' << r.ratio_vs_full
        << ',' << r.step_flops << '\n';
  if (!out) throw TensorError("write_budget_csv: write failed for " + path);
}

void write_budget_svg(const std::vector<BudgetRow>& rows, const std::string& path) {
  const int bar_w = 60, gap = 20, plot_h = 200, margin = 40;
  const int width = margin * 2 + static_cast<int>(rows.size()) * (bar_w + gap);
  const int height = plot_h + margin * 2;
  std::ofstream out(path);
  if (!out) throw TensorError("write_budget_svg: cannot open " + path);
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\">\n";
  out << "  <text x=\"" << margin << "\" y=\"" << margin / 2
      << "\" font-size=\"12\">training token fraction vs truncation exponent</text>\n";
  for (size_t i = 0; i < rows.size(); ++i) {
    const double frac = std::clamp(rows[i].ratio_vs_full, 0.0, 1.0);
    const int h = static_cast<int>(frac * plot_h + 0.5);
    const int x = margin + static_cast<int>(i) * (bar_w + gap);
    const int y = margin + plot_h - h;
    out << "  <rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\"" << h
        << "\" fill=\"#4878cf\"/>\n";
    std::ostringstream label;
    label << std::setprecision(3) << rows[i].alpha;
    out << "  <text x=\"" << x << "\" y=\"" << margin + plot_h + 16 << "\" font-size=\"12\">a="
        << label.str() << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) throw TensorError("write_budget_svg: write failed for " + path);
}

}  // namespace ecm
