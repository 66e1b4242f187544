#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ur3/pipeline/manifest.hpp"

namespace ur3::pipeline {

/// A directory of restored images named after the lq files they came from.
struct MethodOutputs {
  std::string name;
  std::filesystem::path dir;
};

/// External metric: `command` is run once per image with the image path appended
/// (or substituted for "{image}"); the first number on stdout is the score.
struct MetricPlugin {
  std::string name;
  std::string command;
};

std::optional<double> run_metric_plugin(const MetricPlugin& plugin, const std::filesystem::path& image);

struct EvalRow {
  std::string scene_id;
  std::string image;  // lq file name
  std::string method;
  bool present = false;
  double psnr = 0;
  double ssim = 0;
  std::vector<std::optional<double>> plugins;
  std::string note;
};

struct MethodSummary {
  std::string method;
  int evaluated = 0;
  int absent = 0;
  double mean_psnr = 0;
  double mean_ssim = 0;
  std::vector<std::optional<double>> plugin_means;
};

struct EvalReport {
  std::vector<std::string> methods;
  std::vector<std::string> plugin_names;
  std::vector<EvalRow> rows;

  std::vector<MethodSummary> summary() const;
  std::string rows_csv() const;
  std::string summary_csv() const;
  std::string markdown() const;
};

struct EvalOptions {
  /// Both images are resized to this before scoring; 0 keeps the native resolution.
  int resize_height = 0;
  int resize_width = 0;
};

/// Scores every lq image of `split` for every method against its gt.
/// Missing outputs become rows with present = false.
EvalReport evaluate(const DatasetManifest& manifest, Split split, const std::vector<MethodOutputs>& methods,
                    const std::vector<MetricPlugin>& plugins = {}, const EvalOptions& opts = {});

/// Writes rows.csv, summary.csv and report.md into `dir`.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

}  // namespace ur3::pipeline
