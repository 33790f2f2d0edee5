#include <algorithm>
#include <fstream>
#include <map>
#include <optional>

#include "calseg/calibration.hpp"
#include "calseg/config.hpp"
#include "calseg/pipeline.hpp"

namespace calseg {

namespace fs = std::filesystem;

namespace {

struct RunResult {
    std::string name;
    double alpha = 0;
    std::uint64_t seed = 0;
    std::string stage;
    double miou = 0;
    double ece = 0;
    fs::path reliability_csv;
};

std::map<std::string, std::string> read_kv_csv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) fail_io("cannot read " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (trim(line).empty()) continue;
        auto pos = line.find(',');
        if (pos == std::string::npos) continue;
        kv[std::string(trim(line.substr(0, pos)))] = std::string(trim(line.substr(pos + 1)));
    }
    return kv;
}

int stage_priority(const std::string& stage) {
    if (stage == "adapt") return 2;
    if (stage == "source") return 1;
    return 0;
}

// Best target_test evaluation of one run: the latest pipeline stage wins.
std::optional<RunResult> collect_run(const fs::path& run_dir) {
    RunConfig cfg;
    apply_config_file(cfg, run_dir / "config_resolved.txt");
    std::optional<RunResult> best;
    const fs::path eval_root = run_dir / "eval";
    if (!fs::exists(eval_root)) return std::nullopt;
    std::vector<fs::path> evals;
    for (const auto& e : fs::directory_iterator(eval_root)) {
        if (fs::exists(e.path() / "metrics.csv")) evals.push_back(e.path());
    }
    std::sort(evals.begin(), evals.end());
    for (const auto& dir : evals) {
        auto kv = read_kv_csv(dir / "metrics.csv");
        if (kv["split"] != "target_test") continue;
        RunResult r;
        r.name = run_dir.filename().string();
        r.alpha = cfg.calib.alpha;
        r.seed = cfg.seed;
        r.stage = kv["stage"];
        r.miou = parse_double(kv["miou"], "miou");
        r.ece = parse_double(kv["ece_mean"], "ece_mean");
        r.reliability_csv = dir / "reliability.csv";
        if (!best || stage_priority(r.stage) > stage_priority(best->stage)) best = r;
    }
    return best;
}

void write_sweep_svg(const fs::path& path, const std::string& ylabel,
                     const std::vector<std::pair<double, std::vector<double>>>& by_alpha) {
    const double width = 420, height = 320, margin = 50;
    double ymax = 0;
    for (const auto& [a, vals] : by_alpha) {
        for (double v : vals) ymax = std::max(ymax, v);
    }
    if (ymax <= 0) ymax = 1;
    ymax *= 1.15;
    const double n = static_cast<double>(by_alpha.size());
    auto px = [&](std::size_t i) {
        return margin + (n > 1 ? (width - 2 * margin) * static_cast<double>(i) / (n - 1)
                               : (width - 2 * margin) / 2);
    };
    auto py = [&](double v) { return height - margin - (height - 2 * margin) * v / ymax; };

    std::ofstream f(path);
    if (!f) fail_io("cannot write " + path.string());
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << width - 2 * margin
      << "\" height=\"" << height - 2 * margin << "\" fill=\"none\" stroke=\"black\"/>\n";
    std::string polyline;
    for (std::size_t i = 0; i < by_alpha.size(); ++i) {
        const auto& [alpha, vals] = by_alpha[i];
        double mean = 0;
        for (double v : vals) {
            mean += v;
            f << "<circle cx=\"" << px(i) << "\" cy=\"" << py(v)
              << "\" r=\"3\" fill=\"#4878a8\"/>\n";
        }
        mean /= static_cast<double>(vals.size());
        polyline += std::to_string(px(i)) + "," + std::to_string(py(mean)) + " ";
        f << "<text x=\"" << px(i) << "\" y=\"" << height - margin + 16
          << "\" text-anchor=\"middle\" font-size=\"11\">" << format_metric(alpha)
          << "</text>\n";
    }
    f << "<polyline points=\"" << polyline
      << "\" fill=\"none\" stroke=\"#c04040\" stroke-width=\"2\"/>\n";
    f << "<text x=\"" << width / 2 << "\" y=\"" << height - 10
      << "\" text-anchor=\"middle\" font-size=\"12\">alpha</text>\n";
    f << "<text x=\"14\" y=\"" << height / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 " << height / 2
      << ")\">" << ylabel << "</text>\n";
    f << "</svg>\n";
}

}  // namespace

void cmd_report(const fs::path& runs_root) {
    if (!fs::exists(runs_root)) fail_state("runs directory " + runs_root.string() + " not found");
    std::vector<fs::path> run_dirs;
    for (const auto& e : fs::directory_iterator(runs_root)) {
        if (e.is_directory() && fs::exists(e.path() / "config_resolved.txt")) {
            run_dirs.push_back(e.path());
        }
    }
    std::sort(run_dirs.begin(), run_dirs.end());
    std::vector<RunResult> rows;
    for (const auto& dir : run_dirs) {
        if (auto r = collect_run(dir)) rows.push_back(*r);
    }
    if (rows.empty()) {
        fail_state("no completed runs with target_test evaluations under " + runs_root.string());
    }
    std::sort(rows.begin(), rows.end(), [](const RunResult& a, const RunResult& b) {
        if (a.alpha != b.alpha) return a.alpha < b.alpha;
        if (a.seed != b.seed) return a.seed < b.seed;
        return a.name < b.name;
    });

    const fs::path report_dir = runs_root / "report";
    fs::create_directories(report_dir);
    std::ofstream csv(report_dir / "summary.csv");
    if (!csv) fail_io("cannot write report summary.csv");
    csv << "run,alpha,seed,stage,miou,ece\n";
    for (const auto& r : rows) {
        csv << r.name << ',' << format_metric(r.alpha) << ',' << r.seed << ',' << r.stage << ','
            << format_metric(r.miou) << ',' << format_metric(r.ece) << '\n';
    }
    // Per-alpha means after the raw rows.
    std::map<double, std::vector<const RunResult*>> groups;
    for (const auto& r : rows) groups[r.alpha].push_back(&r);
    std::vector<std::pair<double, std::vector<double>>> miou_by_alpha, ece_by_alpha;
    for (const auto& [alpha, members] : groups) {
        double miou_mean = 0, ece_mean = 0;
        std::vector<double> mious, eces;
        for (const auto* r : members) {
            miou_mean += r->miou;
            ece_mean += r->ece;
            mious.push_back(r->miou);
            eces.push_back(r->ece);
        }
        miou_mean /= static_cast<double>(members.size());
        ece_mean /= static_cast<double>(members.size());
        csv << "mean,"
            << format_metric(alpha) << ",," << "," << format_metric(miou_mean) << ','
            << format_metric(ece_mean) << '\n';
        miou_by_alpha.emplace_back(alpha, std::move(mious));
        ece_by_alpha.emplace_back(alpha, std::move(eces));
    }
    if (!csv.good()) fail_io("write failed for report summary.csv");

    write_sweep_svg(report_dir / "alpha_miou.svg", "target mIoU", miou_by_alpha);
    write_sweep_svg(report_dir / "alpha_ece.svg", "target ECE", ece_by_alpha);
    for (const auto& r : rows) {
        ReliabilityDiagram d = load_reliability_csv(r.reliability_csv);
        export_reliability_svg(d, report_dir / ("reliability_" + r.name + ".svg"));
    }
}

}  // namespace calseg
