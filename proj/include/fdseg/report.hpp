#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace fdseg {

struct SweepRow {
  std::string condition;
  std::string seed;
  std::string loss_mode;
  double dice = 0.0;
  double iou = 0.0;
  std::string status;
};

/// Parses a sweep CSV. Throws ParseError with the 1-based line number in the
/// message and as offset.
std::vector<SweepRow> parse_sweep_csv(const std::string& text);

/// x = condition (numeric order when every label parses as a number, else
/// first-appearance order), y = mean with sample-std whiskers, one polyline per
/// loss mode. Only rows with status "ok" contribute. Throws ValidationError on
/// an empty sweep.
std::string render_svg(const std::vector<SweepRow>& rows, const std::string& metric, const std::string& title);

/// Writes <out>/<stem>_dice.svg and <out>/<stem>_iou.svg; returns the paths.
/// Nothing is written when parsing or validation fails.
std::vector<std::filesystem::path> write_report(const std::filesystem::path& csv, const std::filesystem::path& out);

}  // namespace fdseg
