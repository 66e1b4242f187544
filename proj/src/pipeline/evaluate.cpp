#include "ur3/pipeline/evaluate.hpp"

#include <cstdio>
#include <stdexcept>
#include <fstream>
#include <iomanip>
#include <regex>
#include <sstream>

#include "ur3/image.hpp"
#include "ur3/metrics.hpp"

namespace ur3::pipeline {

namespace {

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  return out + "'";
}

std::string fmt(double v, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v, int precision) { return v ? fmt(*v, precision) : ""; }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::optional<double> run_metric_plugin(const MetricPlugin& plugin, const std::filesystem::path& image) {
  std::string cmd = plugin.command;
  const auto quoted = shell_quote(image.string());
  if (auto pos = cmd.find("{image}"); pos != std::string::npos)
    cmd.replace(pos, 7, quoted);
  else
    cmd += " " + quoted;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return std::nullopt;
  std::string out;
  char buf[256];
  while (fgets(buf, sizeof buf, pipe)) out += buf;
  if (pclose(pipe) != 0) return std::nullopt;
  static const std::regex number(R"([-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?)");
  std::smatch m;
  if (!std::regex_search(out, m, number)) return std::nullopt;
  return std::stod(m.str());
}

EvalReport evaluate(const DatasetManifest& manifest, Split split, const std::vector<MethodOutputs>& methods,
                    const std::vector<MetricPlugin>& plugins, const EvalOptions& opts) {
  if ((opts.resize_height > 0) != (opts.resize_width > 0))
    throw std::invalid_argument("evaluate: give both resize dimensions or neither");
  const bool resize = opts.resize_height > 0;
  EvalReport rep;
  for (const auto& m : methods) rep.methods.push_back(m.name);
  for (const auto& p : plugins) rep.plugin_names.push_back(p.name);
  for (const auto* scene : manifest.split(split)) {
    Image gt = read_png(manifest.resolve(scene->gt));
    if (resize) gt = resize_bilinear(gt, opts.resize_height, opts.resize_width);
    for (const auto& lq : scene->lq) {
      const auto name = lq.filename().string();
      for (const auto& method : methods) {
        EvalRow row;
        row.scene_id = scene->scene_id;
        row.image = name;
        row.method = method.name;
        const auto out_path = method.dir / name;
        if (!std::filesystem::exists(out_path)) {
          row.note = "absent: " + out_path.string();
          row.plugins.assign(plugins.size(), std::nullopt);
          rep.rows.push_back(std::move(row));
          continue;
        }
        Image out = read_png(out_path);
        if (resize) {
          out = resize_bilinear(out, opts.resize_height, opts.resize_width);
        } else if (!out.same_shape(gt)) {
          row.note = "resized from " + std::to_string(out.width()) + "x" + std::to_string(out.height());
          out = resize_bilinear(out, gt.height(), gt.width());
        }
        row.present = true;
        row.psnr = psnr(out, gt);
        row.ssim = ssim(out, gt);
        for (const auto& p : plugins) row.plugins.push_back(run_metric_plugin(p, out_path));
        rep.rows.push_back(std::move(row));
      }
    }
  }
  return rep;
}

std::vector<MethodSummary> EvalReport::summary() const {
  std::vector<MethodSummary> out;
  for (const auto& method : methods) {
    MethodSummary s;
    s.method = method;
    std::vector<double> sums(plugin_names.size(), 0.0);
    std::vector<int> counts(plugin_names.size(), 0);
    for (const auto& r : rows) {
      if (r.method != method) continue;
      if (!r.present) {
        ++s.absent;
        continue;
      }
      ++s.evaluated;
      s.mean_psnr += r.psnr;
      s.mean_ssim += r.ssim;
      for (std::size_t i = 0; i < r.plugins.size(); ++i)
        if (r.plugins[i]) {
          sums[i] += *r.plugins[i];
          ++counts[i];
        }
    }
    if (s.evaluated > 0) {
      s.mean_psnr /= s.evaluated;
      s.mean_ssim /= s.evaluated;
    }
    for (std::size_t i = 0; i < sums.size(); ++i)
      s.plugin_means.push_back(counts[i] ? std::optional<double>(sums[i] / counts[i]) : std::nullopt);
    out.push_back(std::move(s));
  }
  return out;
}

std::string EvalReport::rows_csv() const {
  std::ostringstream os;
  os << "scene_id,image,method,psnr,ssim";
  for (const auto& p : plugin_names) os << "," << csv_field(p);
  os << ",status,note\n";
  for (const auto& r : rows) {
    os << csv_field(r.scene_id) << "," << csv_field(r.image) << "," << csv_field(r.method) << ",";
    if (r.present) os << fmt(r.psnr, 6) << "," << fmt(r.ssim, 6);
    else os << ",";
    for (const auto& v : r.plugins) os << "," << fmt(v, 6);
    os << "," << (r.present ? "ok" : "absent") << "," << csv_field(r.note) << "\n";
  }
  return os.str();
}

std::string EvalReport::summary_csv() const {
  std::ostringstream os;
  os << "method,psnr,ssim";
  for (const auto& p : plugin_names) os << "," << csv_field(p);
  os << ",evaluated,absent\n";
  for (const auto& s : summary()) {
    os << csv_field(s.method) << "," << fmt(s.mean_psnr, 6) << "," << fmt(s.mean_ssim, 6);
    for (const auto& v : s.plugin_means) os << "," << fmt(v, 6);
    os << "," << s.evaluated << "," << s.absent << "\n";
  }
  return os.str();
}

std::string EvalReport::markdown() const {
  std::ostringstream os;
  os << "| Method | PSNR | SSIM |";
  for (const auto& p : plugin_names) os << " " << p << " |";
  os << " Evaluated | Absent |\n|---|---|---|";
  for (std::size_t i = 0; i < plugin_names.size(); ++i) os << "---|";
  os << "---|---|\n";
  for (const auto& s : summary()) {
    os << "| " << s.method << " | " << fmt(s.mean_psnr, 2) << " | " << fmt(s.mean_ssim, 4) << " |";
    for (const auto& v : s.plugin_means) os << " " << (v ? fmt(*v, 4) : "n/a") << " |";
    os << " " << s.evaluated << " | " << s.absent << " |\n";
  }
  bool header = false;
  for (const auto& r : rows) {
    if (r.present) continue;
    if (!header) {
      os << "\nAbsent outputs:\n\n";
      header = true;
    }
    os << "- " << r.method << ": " << r.scene_id << "/" << r.image << "\n";
  }
  return os.str();
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  };
  put("rows.csv", report.rows_csv());
  put("summary.csv", report.summary_csv());
  put("report.md", report.markdown());
}

}  // namespace ur3::pipeline
