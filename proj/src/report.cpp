#include "fairproto/report.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "fairproto/error.hpp"

namespace fairproto {

namespace {

const char* kMetrics[] = {"accuracy", "precision", "recall"};

std::string title_case(std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
}

std::vector<std::string> split_line(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

double parse_double(const std::string& s, std::size_t line_no) {
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError(fmt::format("metrics csv line {}: '{}' is not a number", line_no, s));
    }
}

}  // namespace

std::vector<MetricRow> metric_rows(const EvalReport& report) {
    std::vector<MetricRow> rows;
    for (const auto& e : report.entries) {
        rows.push_back({e.category, e.backbone, e.shot, "accuracy", e.accuracy.mean, e.accuracy.std});
        rows.push_back({e.category, e.backbone, e.shot, "precision", e.precision.mean, e.precision.std});
        rows.push_back({e.category, e.backbone, e.shot, "recall", e.recall.mean, e.recall.std});
    }
    return rows;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::string out = "category,backbone,shot,metric,mean,std\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{},{},{},{}\n", r.category, r.backbone, r.shot, r.metric, r.mean, r.std);
    }
    return out;
}

std::vector<MetricRow> parse_metrics_csv(std::string_view text) {
    std::vector<MetricRow> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "category,backbone,shot,metric,mean,std") {
                throw FormatError("metrics csv: unexpected header '" + line + "'");
            }
            continue;
        }
        if (line.empty()) continue;
        auto f = split_line(line);
        if (f.size() != 6) throw FormatError(fmt::format("metrics csv line {}: expected 6 fields", line_no));
        MetricRow r;
        r.category = f[0];
        r.backbone = f[1];
        r.shot = static_cast<int>(parse_double(f[2], line_no));
        r.metric = f[3];
        r.mean = parse_double(f[4], line_no);
        r.std = parse_double(f[5], line_no);
        rows.push_back(std::move(r));
    }
    if (line_no == 0) throw FormatError("metrics csv: empty input");
    return rows;
}

std::string render_table(const std::vector<MetricRow>& rows) {
    std::vector<std::string> categories;
    std::vector<int> shots;
    std::vector<std::string> backbones;
    std::map<std::tuple<int, std::string, std::string, std::string>, const MetricRow*> cell;
    for (const auto& r : rows) {
        if (std::find(categories.begin(), categories.end(), r.category) == categories.end()) categories.push_back(r.category);
        if (std::find(shots.begin(), shots.end(), r.shot) == shots.end()) shots.push_back(r.shot);
        if (std::find(backbones.begin(), backbones.end(), r.backbone) == backbones.end()) backbones.push_back(r.backbone);
        cell[{r.shot, r.backbone, r.metric, r.category}] = &r;
    }
    std::sort(shots.begin(), shots.end());

    std::vector<std::vector<std::string>> body;
    std::vector<std::string> header{"Shot", "Model", "Metric"};
    header.insert(header.end(), categories.begin(), categories.end());
    for (int shot : shots) {
        bool first_shot_row = true;
        for (const auto& bb : backbones) {
            bool first_model_row = true;
            for (const char* metric : kMetrics) {
                std::vector<std::string> line;
                line.push_back(first_shot_row ? fmt::format("{}-Shot", shot) : "");
                line.push_back(first_model_row ? bb : "");
                line.push_back(title_case(metric));
                bool any = false;
                for (const auto& cat : categories) {
                    auto it = cell.find({shot, bb, metric, cat});
                    if (it == cell.end()) {
                        line.emplace_back("-");
                    } else {
                        any = true;
                        line.push_back(fmt::format("{:.2f} ± {:.2f}", 100.0 * it->second->mean, 100.0 * it->second->std));
                    }
                }
                if (!any) continue;
                body.push_back(std::move(line));
                first_shot_row = false;
                first_model_row = false;
            }
        }
    }

    // Column widths count code points so the ± sign lines up.
    auto width = [](const std::string& s) {
        std::size_t n = 0;
        for (unsigned char c : s) n += (c & 0xC0) != 0x80;
        return n;
    };
    std::vector<std::size_t> widths(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) widths[i] = width(header[i]);
    for (const auto& line : body) {
        for (std::size_t i = 0; i < line.size(); ++i) widths[i] = std::max(widths[i], width(line[i]));
    }
    auto emit = [&](const std::vector<std::string>& line) {
        std::string out = "|";
        for (std::size_t i = 0; i < line.size(); ++i) {
            out += " " + line[i] + std::string(widths[i] - width(line[i]), ' ') + " |";
        }
        return out + "\n";
    };
    std::string out = emit(header);
    out += "|";
    for (auto w : widths) out += std::string(w + 2, '-') + "|";
    out += "\n";
    for (const auto& line : body) out += emit(line);
    return out;
}

std::string tar_far_csv(const EvalReport& report) {
    std::string out = "category,class,shot,tar_mean,far_mean\n";
    auto fmt_opt = [](const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string("NA"); };
    for (const auto& e : report.entries) {
        for (const auto& c : e.classes) {
            out += fmt::format("{},{},{},{},{}\n", e.category, c.class_name, e.shot, fmt_opt(c.tar_mean),
                               fmt_opt(c.far_mean));
        }
    }
    return out;
}

std::vector<AblationRow> ablation_rows(const EvalReport& full, const EvalReport& vit_only) {
    std::vector<AblationRow> rows;
    for (const auto& f : full.entries) {
        auto it = std::find_if(vit_only.entries.begin(), vit_only.entries.end(),
                               [&](const ShotReport& v) { return v.category == f.category && v.shot == f.shot; });
        if (it == vit_only.entries.end()) {
            throw ValidationError(fmt::format("ablation: ViT-only run lacks category '{}' shot {}", f.category, f.shot));
        }
        rows.push_back({f.category, f.shot, f.accuracy.mean, it->accuracy.mean});
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "category,shot,full_accuracy,vit_only_accuracy\n";
    for (const auto& r : rows) {
        out += fmt::format("{},{},{},{}\n", r.category, r.shot, r.full_accuracy, r.vit_only_accuracy);
    }
    return out;
}

}  // namespace fairproto
