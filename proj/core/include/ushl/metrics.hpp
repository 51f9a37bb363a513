#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ushl/attention.hpp"

namespace ushl {

/// Average precision of the score ranking over valid frames. Frames are ranked
/// by descending score, ties by ascending frame index. nullopt when there is no
/// valid positive frame.
std::optional<double> average_precision(std::span<const float> scores,
                                        std::span<const std::uint8_t> labels,
                                        std::span<const std::uint8_t> mask);

/// Normalized meaningful summary duration at recall `alpha`:
/// (|S| - m) / (|V| - m) clamped to [0, 1] with m = ceil(alpha |G|), where |S|
/// is the number of top-ranked valid frames needed to reach the recall. Lower is
/// better. nullopt when there is no valid positive; 0 when the denominator
/// vanishes.
std::optional<double> nmsd(std::span<const float> scores, std::span<const std::uint8_t> labels,
                           std::span<const std::uint8_t> mask, double alpha = 0.5);

/// Harmonic mean of set precision and recall. 1 when both sets are empty,
/// 0 when exactly one is.
double f_score(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);

enum class Binarize { kThreshold, kTopBudget };

/// Selects summary frames either by s > zeta or as the top `budget` fraction
/// of valid frames (ties by index).
std::vector<std::uint8_t> binarize(std::span<const float> scores, std::span<const std::uint8_t> mask,
                                   Binarize mode, double zeta = 0.5, double budget = 0.15);

struct UserMetrics {
  std::string user_id;
  double ap = 0.0;
  double nmsd = 0.0;
  double f_score = 0.0;
};

struct EvalReport {
  std::vector<UserMetrics> per_user;
  double map = 0.0;
  double mean_nmsd = 0.0;
  double mean_f_score = 0.0;
  /// Users without any positive frame; left out of every mean.
  std::vector<std::string> excluded;
};

struct EvalOptions {
  double alpha = 0.5;
  Binarize binarize = Binarize::kThreshold;
  double zeta = 0.5;
  double budget = 0.15;
};

/// `labels[i]` holds the ground truth for `tracks[i]`.
EvalReport evaluate(std::span<const ScoreTrack> tracks, std::span<const LabelTrack> labels,
                    const EvalOptions& opt = {});

/// One JSON object per line: a record per user, then a summary record.
void write_report_jsonl(std::ostream& os, const EvalReport& report);
void write_report_table(std::ostream& os, const EvalReport& report);

}  // namespace ushl
