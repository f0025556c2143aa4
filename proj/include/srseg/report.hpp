#pragma once

#include <cmath>
#include <cstdio>
#include <ctime>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "srseg/train.hpp"

namespace srseg {

// ============================================================================
// Report rendering
// ============================================================================

namespace detail {

inline std::string fmt_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

}  // namespace detail

// Renders an aggregated ablation CSV (header
// row,mea,sr_f,sr_l,seeds,mean_miou,stdev_miou) as a Markdown table whose
// delta column is each row's mean minus the first row's. The timestamp
// footer is skipped when with_timestamp is false so tests can compare
// bytes.
inline std::string render_ablation_markdown(const std::string& csv_text, bool with_timestamp) {
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < csv_text.size()) {
        std::size_t nl = csv_text.find('\n', start);
        if (nl == std::string::npos) nl = csv_text.size();
        if (nl > start) lines.push_back(csv_text.substr(start, nl - start));
        start = nl + 1;
    }
    if (lines.empty()) throw std::invalid_argument("report: input is empty");
    if (lines.front() != "row,mea,sr_f,sr_l,seeds,mean_miou,stdev_miou")
        throw std::invalid_argument("report: unexpected header '" + lines.front() +
                                    "' (expected row,mea,sr_f,sr_l,seeds,mean_miou,stdev_miou)");
    if (lines.size() < 2) throw std::invalid_argument("report: no data rows");

    struct Row {
        std::string name, mea, sr_f, sr_l, seeds;
        double mean = 0.0, stdev = 0.0;
    };
    std::vector<Row> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto fields = detail::split_csv_line(lines[i]);
        if (fields.size() != 7)
            throw std::invalid_argument("report: line " + std::to_string(i + 1) + " has " +
                                        std::to_string(fields.size()) + " fields, expected 7");
        Row r;
        r.name = fields[0];
        r.mea = fields[1];
        r.sr_f = fields[2];
        r.sr_l = fields[3];
        r.seeds = fields[4];
        try {
            r.mean = std::stod(fields[5]);
            r.stdev = std::stod(fields[6]);
        } catch (const std::exception&) {
            throw std::invalid_argument("report: line " + std::to_string(i + 1) + " has non-numeric mIoU fields");
        }
        rows.push_back(std::move(r));
    }

    auto mark = [](const std::string& v) { return v == "1" ? std::string("x") : std::string(""); };
    const double base = rows.front().mean;

    std::string md = "# Ablation results\n\n";
    md += "| Configuration | MEA | SR-F | SR-L | mIoU (%) | Delta vs " + rows.front().name + " |\n";
    md += "| --- | :-: | :-: | :-: | --- | --- |\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Row& r = rows[i];
        md += "| " + r.name + " | " + mark(r.mea) + " | " + mark(r.sr_f) + " | " + mark(r.sr_l) + " | " +
              detail::fmt_fixed(r.mean, 2) + " +/- " + detail::fmt_fixed(r.stdev, 2) + " | ";
        if (i == 0) {
            md += "-";
        } else {
            const double d = r.mean - base;
            md += (d >= 0 ? "+" : "") + detail::fmt_fixed(d, 2);
        }
        md += " |\n";
    }
    md += "\nMean +/- sample standard deviation over " + rows.front().seeds + " seeds per row.\n";
    if (with_timestamp) {
        const std::time_t now = std::time(nullptr);
        char buf[32];
        std::tm tm_utc{};
        gmtime_r(&now, &tm_utc);
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
        md += "\nGenerated: " + std::string(buf) + "\n";
    }
    return md;
}

// Held-out metrics as JSON. Classes absent from both prediction and truth
// carry null instead of a number.
inline std::string eval_metrics_json(const EvalResult& r) {
    nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
    for (const double v : r.iou) {
        if (std::isnan(v)) per_class.push_back(nullptr);
        else per_class.push_back(v * 100.0);
    }
    nlohmann::ordered_json confusion = nlohmann::ordered_json::array();
    for (std::int64_t a = 0; a < r.confusion.classes; ++a) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (std::int64_t b = 0; b < r.confusion.classes; ++b) row.push_back(r.confusion.at(a, b));
        confusion.push_back(std::move(row));
    }
    nlohmann::ordered_json root = {
        {"miou_percent", r.miou * 100.0},
        {"per_class_iou_percent", per_class},
        {"pixels", r.confusion.total()},
        {"confusion", confusion},
    };
    return root.dump(2) + "\n";
}

}  // namespace srseg
