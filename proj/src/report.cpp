#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "itl/error.hpp"
#include "itl/metrics.hpp"

namespace itl {

namespace fs = std::filesystem;
using nlohmann::json;

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::string> csv_split(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw DataError("unterminated quoted CSV field");
    fields.push_back(std::move(cur));
    return fields;
}

namespace {

// Undefined values (NaN) are written as "n.a." in CSV and null in JSON.
std::string num(double v) {
    if (std::isnan(v)) return "n.a.";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_num(const std::string& s) {
    return s == "n.a." ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
}

json jnum(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double jget(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    return out;
}

std::optional<Significance> parse_significance(const std::string& s) {
    if (s == "Yes+") return Significance::YesPlus;
    if (s == "Yes-") return Significance::YesMinus;
    if (s == "No") return Significance::No;
    return std::nullopt;
}

json to_json(const ResultSet& r) {
    json curves = json::array(), summary = json::array(), failures = json::array();
    for (const auto& c : r.curves) {
        curves.push_back({{"method", c.method},
                          {"scenario", c.scenario},
                          {"seed", c.seed},
                          {"center", c.center},
                          {"visit_index", c.visit_index},
                          {"accuracy", jnum(c.accuracy)},
                          {"config_hash", c.config_hash}});
    }
    for (const auto& s : r.summary) {
        json row{{"method", s.method},
                 {"scenario", s.scenario},
                 {"repeats", s.summary.repeats},
                 {"accuracy", jnum(s.summary.mean)},
                 {"std", jnum(s.summary.std)},
                 {"std_undefined", s.summary.std_undefined},
                 {"monotonicity", jnum(s.summary.monotonicity)},
                 {"significance", s.significance ? to_string(*s.significance) : "n.a."},
                 {"p_value", jnum(s.p_value)},
                 {"samples", s.samples},
                 {"config_hash", s.config_hash}};
        summary.push_back(row);
    }
    for (const auto& f : r.failures) {
        failures.push_back({{"method", f.method},
                            {"scenario", f.scenario},
                            {"seed", f.seed},
                            {"reason", f.reason},
                            {"config_hash", f.config_hash}});
    }
    return {{"curves", curves}, {"summary", summary}, {"failures", failures}};
}

ResultSet from_json(const json& j) {
    ResultSet r;
    for (const auto& c : j.at("curves")) {
        r.curves.push_back({c.at("method"), c.at("scenario"), c.at("seed"), c.at("center"), c.at("visit_index"),
                            jget(c.at("accuracy")), c.at("config_hash")});
    }
    for (const auto& s : j.at("summary")) {
        SummaryRow row;
        row.method = s.at("method");
        row.scenario = s.at("scenario");
        row.summary.repeats = s.at("repeats");
        row.summary.mean = jget(s.at("accuracy"));
        row.summary.std = jget(s.at("std"));
        row.summary.std_undefined = s.at("std_undefined");
        row.summary.monotonicity = jget(s.at("monotonicity"));
        row.significance = parse_significance(s.at("significance").get<std::string>());
        row.p_value = jget(s.at("p_value"));
        row.samples = s.at("samples").get<std::vector<double>>();
        row.config_hash = s.at("config_hash");
        r.summary.push_back(std::move(row));
    }
    for (const auto& f : j.at("failures")) {
        r.failures.push_back({f.at("method"), f.at("scenario"), f.at("seed"), f.at("reason"), f.at("config_hash")});
    }
    return r;
}

std::vector<std::vector<std::string>> read_csv_records(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        rows.push_back(csv_split(line));
    }
    return rows;
}

} // namespace

void emit_results(const ResultSet& results, const fs::path& dir, ResultFormat format) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
    if (format == ResultFormat::Json) {
        auto out = open_out(dir / "results.json");
        out << to_json(results).dump(2) << '\n';
        return;
    }
    {
        auto out = open_out(dir / "curves.csv");
        out << "method,scenario,seed,center,visit_index,accuracy,config_hash\r\n";
        for (const auto& c : results.curves) {
            out << csv_escape(c.method) << ',' << csv_escape(c.scenario) << ',' << c.seed << ',' << c.center << ','
                << c.visit_index << ',' << num(c.accuracy) << ',' << csv_escape(c.config_hash) << "\r\n";
        }
    }
    {
        auto out = open_out(dir / "summary.csv");
        out << "method,scenario,repeats,accuracy,std,monotonicity,significance,p_value,config_hash\r\n";
        for (const auto& s : results.summary) {
            out << csv_escape(s.method) << ',' << csv_escape(s.scenario) << ',' << s.summary.repeats << ','
                << num(s.summary.mean) << ',' << num(s.summary.std) << ',' << num(s.summary.monotonicity) << ','
                << (s.significance ? to_string(*s.significance) : "n.a.") << ',' << num(s.p_value) << ','
                << csv_escape(s.config_hash) << "\r\n";
        }
    }
    {
        auto out = open_out(dir / "failures.csv");
        out << "method,scenario,seed,reason,config_hash\r\n";
        for (const auto& f : results.failures) {
            out << csv_escape(f.method) << ',' << csv_escape(f.scenario) << ',' << f.seed << ','
                << csv_escape(f.reason) << ',' << csv_escape(f.config_hash) << "\r\n";
        }
    }
}

ResultSet load_results(const fs::path& dir) {
    if (fs::exists(dir / "results.json")) {
        std::ifstream in(dir / "results.json");
        try {
            return from_json(json::parse(in));
        } catch (const json::exception& e) {
            throw DataError((dir / "results.json").string() + ": " + e.what());
        }
    }
    if (!fs::exists(dir / "curves.csv")) throw DataError("no results found in " + dir.string());
    ResultSet r;
    try {
        for (const auto& f : read_csv_records(dir / "curves.csv")) {
            if (f.size() != 7) throw DataError("curves.csv: expected 7 fields");
            r.curves.push_back({f[0], f[1], std::stoull(f[2]), std::stoul(f[3]), std::stoul(f[4]), parse_num(f[5]), f[6]});
        }
        if (fs::exists(dir / "summary.csv")) {
            for (const auto& f : read_csv_records(dir / "summary.csv")) {
                if (f.size() != 9) throw DataError("summary.csv: expected 9 fields");
                SummaryRow row;
                row.method = f[0];
                row.scenario = f[1];
                row.summary.repeats = std::stoul(f[2]);
                row.summary.mean = parse_num(f[3]);
                row.summary.std = parse_num(f[4]);
                row.summary.std_undefined = row.summary.repeats < 2;
                row.summary.monotonicity = parse_num(f[5]);
                row.significance = parse_significance(f[6]);
                row.p_value = parse_num(f[7]);
                row.config_hash = f[8];
                r.summary.push_back(std::move(row));
            }
        }
        if (fs::exists(dir / "failures.csv")) {
            for (const auto& f : read_csv_records(dir / "failures.csv")) {
                if (f.size() != 5) throw DataError("failures.csv: expected 5 fields");
                r.failures.push_back({f[0], f[1], std::stoull(f[2]), f[3], f[4]});
            }
        }
    } catch (const std::logic_error& e) {
        throw DataError("malformed result CSV in " + dir.string() + ": " + e.what());
    }
    return r;
}

} // namespace itl
