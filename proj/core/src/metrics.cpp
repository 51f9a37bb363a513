#include "ushl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ushl/errors.hpp"

namespace ushl {

namespace {

void check_lengths(std::size_t a, std::size_t b, std::size_t c, const char* who) {
  if (a != b || b != c) throw ContractViolation(std::string(who) + ": scores, labels and mask differ in length");
}

// Valid frame indices by descending score, ties by ascending index.
std::vector<std::size_t> ranking(std::span<const float> scores, std::span<const std::uint8_t> mask) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (mask[j]) idx.push_back(j);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

std::optional<double> average_precision(std::span<const float> scores,
                                        std::span<const std::uint8_t> labels,
                                        std::span<const std::uint8_t> mask) {
  check_lengths(scores.size(), labels.size(), mask.size(), "average_precision");
  const auto order = ranking(scores, mask);
  std::size_t hits = 0;
  double precision_sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    ++hits;
    precision_sum += double(hits) / double(r + 1);
  }
  if (hits == 0) return std::nullopt;
  return precision_sum / double(hits);
}

std::optional<double> nmsd(std::span<const float> scores, std::span<const std::uint8_t> labels,
                           std::span<const std::uint8_t> mask, double alpha) {
  check_lengths(scores.size(), labels.size(), mask.size(), "nmsd");
  const auto order = ranking(scores, mask);
  std::size_t positives = 0;
  for (std::size_t j : order) positives += labels[j] ? 1 : 0;
  if (positives == 0) return std::nullopt;
  // The shortest possible summary has ceil(alpha |G|) frames; measuring from
  // it keeps a perfect ranking at exactly 0 for odd |G| as well.
  const double target = std::ceil(alpha * double(positives) - 1e-9);
  std::size_t taken = 0, hits = 0;
  while (taken < order.size() && double(hits) < target) {
    hits += labels[order[taken]] ? 1 : 0;
    ++taken;
  }
  const double denom = double(order.size()) - target;
  if (denom <= 0.0) return 0.0;
  return std::clamp((double(taken) - target) / denom, 0.0, 1.0);
}

double f_score(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
  if (predicted.size() != truth.size()) throw ContractViolation("f_score: frame sets differ in length");
  std::size_t tp = 0, np = 0, nt = 0;
  for (std::size_t j = 0; j < truth.size(); ++j) {
    np += predicted[j] ? 1 : 0;
    nt += truth[j] ? 1 : 0;
    tp += (predicted[j] && truth[j]) ? 1 : 0;
  }
  if (np == 0 && nt == 0) return 1.0;
  if (np == 0 || nt == 0 || tp == 0) return 0.0;
  const double p = double(tp) / double(np);
  const double r = double(tp) / double(nt);
  return 2.0 * p * r / (p + r);
}

std::vector<std::uint8_t> binarize(std::span<const float> scores, std::span<const std::uint8_t> mask,
                                   Binarize mode, double zeta, double budget) {
  std::vector<std::uint8_t> out(scores.size(), 0);
  if (mode == Binarize::kThreshold) {
    for (std::size_t j = 0; j < scores.size(); ++j) out[j] = (mask[j] && scores[j] > zeta) ? 1 : 0;
    return out;
  }
  const auto order = ranking(scores, mask);
  const auto keep = static_cast<std::size_t>(std::floor(budget * double(order.size())));
  for (std::size_t r = 0; r < keep; ++r) out[order[r]] = 1;
  return out;
}

EvalReport evaluate(std::span<const ScoreTrack> tracks, std::span<const LabelTrack> labels,
                    const EvalOptions& opt) {
  if (tracks.size() != labels.size()) throw ContractViolation("evaluate: tracks and labels differ in count");
  EvalReport report;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const auto& t = tracks[i];
    const auto& l = labels[i];
    const auto ap = average_precision(t.s, l.y, l.mask);
    if (!ap) {
      report.excluded.push_back(t.user_id);
      continue;
    }
    UserMetrics m{t.user_id, *ap, *nmsd(t.s, l.y, l.mask, opt.alpha), 0.0};
    std::vector<std::uint8_t> truth(l.y.size());
    for (std::size_t j = 0; j < truth.size(); ++j) truth[j] = (l.mask[j] && l.y[j]) ? 1 : 0;
    m.f_score = f_score(binarize(t.s, l.mask, opt.binarize, opt.zeta, opt.budget), truth);
    report.per_user.push_back(std::move(m));
  }
  if (!report.per_user.empty()) {
    const double n = double(report.per_user.size());
    for (const auto& m : report.per_user) {
      report.map += m.ap;
      report.mean_nmsd += m.nmsd;
      report.mean_f_score += m.f_score;
    }
    report.map /= n;
    report.mean_nmsd /= n;
    report.mean_f_score /= n;
  }
  return report;
}

void write_report_jsonl(std::ostream& os, const EvalReport& report) {
  for (const auto& m : report.per_user) {
    os << nlohmann::json{{"user_id", m.user_id}, {"ap", m.ap}, {"nmsd", m.nmsd}, {"f_score", m.f_score}}.dump()
       << '\n';
  }
  os << nlohmann::json{{"summary", true},
                       {"users", report.per_user.size()},
                       {"map", report.map},
                       {"mean_nmsd", report.mean_nmsd},
                       {"mean_f_score", report.mean_f_score},
                       {"excluded", report.excluded}}
            .dump()
     << '\n';
}

void write_report_table(std::ostream& os, const EvalReport& report) {
  const auto flags = os.flags();
  os << std::left << std::setw(16) << "user" << std::right << std::setw(10) << "AP" << std::setw(10)
     << "nMSD" << std::setw(10) << "F" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& m : report.per_user) {
    os << std::left << std::setw(16) << m.user_id << std::right << std::setw(10) << m.ap
       << std::setw(10) << m.nmsd << std::setw(10) << m.f_score << '\n';
  }
  os << std::left << std::setw(16) << "mean" << std::right << std::setw(10) << report.map
     << std::setw(10) << report.mean_nmsd << std::setw(10) << report.mean_f_score << '\n';
  if (!report.excluded.empty()) {
    os << report.excluded.size() << " user(s) without positive frames excluded\n";
  }
  os.flags(flags);
}

}  // namespace ushl
