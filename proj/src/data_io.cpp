#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "itl/data.hpp"
#include "itl/error.hpp"

namespace itl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "raw tensor files assume a little-endian host");

constexpr const char* kSplitNames[3] = {"train", "val", "test"};

json heterogeneity_to_json(const Heterogeneity& h) {
    if (h.kind == Heterogeneity::Kind::Clean) return {{"kind", "clean"}};
    return {{"kind", "gaussian"}, {"sigma", h.sigma}};
}

Heterogeneity heterogeneity_from_json(const json& j, const std::string& where) {
    Heterogeneity h;
    const std::string kind = j.value("kind", "clean");
    if (kind == "clean") return h;
    if (kind != "gaussian") throw DataError(where + ": unknown heterogeneity kind '" + kind + "'");
    h.kind = Heterogeneity::Kind::GaussianNoise;
    h.sigma = j.at("sigma").get<double>();
    return h;
}

int parse_label(const std::string& field, std::size_t num_classes, const std::string& where) {
    std::size_t pos = 0;
    long v = 0;
    try {
        v = std::stol(field, &pos);
    } catch (const std::exception&) {
        throw DataError(where + ": label '" + field + "' is not an integer");
    }
    if (pos != field.size()) throw DataError(where + ": label '" + field + "' is not an integer");
    if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
        throw DataError(where + ": unknown label " + field + " (num_classes = " + std::to_string(num_classes) + ")");
    }
    return static_cast<int>(v);
}

struct RawRows {
    std::vector<double> x;
    std::vector<int> y;
    std::size_t width = 0;
};

RawRows read_csv(const fs::path& path, std::size_t num_classes) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    RawRows rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (!line.starts_with("label")) throw DataError(path.string() + ":1: header must start with 'label'");
            rows.width = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
            if (rows.width == 0) throw DataError(path.string() + ":1: header declares no features");
            continue;
        }
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(line_no);
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != rows.width + 1) {
            throw DataError(where + ": expected " + std::to_string(rows.width) + " features, got " +
                            std::to_string(fields.empty() ? 0 : fields.size() - 1));
        }
        rows.y.push_back(parse_label(fields[0], num_classes, where));
        for (std::size_t i = 1; i < fields.size(); ++i) {
            try {
                std::size_t pos = 0;
                rows.x.push_back(std::stod(fields[i], &pos));
                if (pos != fields[i].size()) throw std::invalid_argument("trailing characters");
            } catch (const std::exception&) {
                throw DataError(where + ": malformed feature value '" + fields[i] + "'");
            }
        }
    }
    if (line_no == 0) throw DataError(path.string() + ": empty file");
    return rows;
}

void write_csv(const fs::path& path, const std::vector<const Split*>& splits) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    const std::size_t width = splits.front()->inputs.row_size();
    out << "label";
    for (std::size_t i = 0; i < width; ++i) out << ",f" << i;
    out << '\n';
    char buf[32];
    for (const auto* s : splits) {
        for (std::size_t r = 0; r < s->size(); ++r) {
            out << s->labels[r];
            for (double v : s->inputs.row(r)) {
                std::snprintf(buf, sizeof buf, "%.17g", v);
                out << ',' << buf;
            }
            out << '\n';
        }
    }
}

Split make_split(const RawRows& rows, std::size_t begin, std::size_t end, const Shape& sample_shape,
                 std::size_t id_base) {
    Split s;
    const std::size_t width = shape_size(sample_shape);
    Shape shape{end - begin};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    s.inputs = Tensor(shape, std::vector<double>(rows.x.begin() + static_cast<std::ptrdiff_t>(begin * width),
                                                 rows.x.begin() + static_cast<std::ptrdiff_t>(end * width)));
    s.labels.assign(rows.y.begin() + static_cast<std::ptrdiff_t>(begin), rows.y.begin() + static_cast<std::ptrdiff_t>(end));
    for (std::size_t i = begin; i < end; ++i) s.ids.push_back(id_base + i);
    return s;
}

RawRows read_raw_split(const fs::path& file, std::size_t rows, std::size_t width, std::size_t num_classes) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    std::vector<double> buf(rows * (width + 1));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != buf.size() * sizeof(double) || in.peek() != EOF) {
        throw DataError(file.string() + ": size does not match shape sidecar");
    }
    RawRows out;
    out.width = width;
    for (std::size_t r = 0; r < rows; ++r) {
        const double label = buf[r * (width + 1)];
        if (label != std::floor(label) || label < 0 || label >= static_cast<double>(num_classes)) {
            throw DataError(file.string() + ": row " + std::to_string(r) + " has unknown label");
        }
        out.y.push_back(static_cast<int>(label));
        out.x.insert(out.x.end(), buf.begin() + static_cast<std::ptrdiff_t>(r * (width + 1) + 1),
                     buf.begin() + static_cast<std::ptrdiff_t>((r + 1) * (width + 1)));
    }
    return out;
}

void write_raw_split(const fs::path& file, const Split& s) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write " + file.string());
    for (std::size_t r = 0; r < s.size(); ++r) {
        const double label = s.labels[r];
        out.write(reinterpret_cast<const char*>(&label), sizeof label);
        auto row = s.inputs.row(r);
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * sizeof(double)));
    }
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

} // namespace

std::vector<CenterDataset> load_external(const fs::path& manifest_path, ExternalFormat format) {
    const json manifest = read_json(manifest_path);
    const fs::path base = manifest_path.parent_path();
    std::vector<CenterDataset> out;
    try {
        const std::size_t num_classes = manifest.at("num_classes").get<std::size_t>();
        const Shape sample_shape = manifest.at("input_shape").get<Shape>();
        const std::size_t width = shape_size(sample_shape);
        std::size_t id_base = 0;
        for (const auto& entry : manifest.at("centers")) {
            CenterDataset ds;
            ds.center = out.size();
            ds.source_center = entry.value("source_center", out.size());
            ds.name = entry.at("name").get<std::string>();
            ds.num_classes = num_classes;
            ds.heterogeneity = heterogeneity_from_json(entry.value("heterogeneity", json::object()), ds.name);
            ds.value_range = entry.value("value_range", 1.0);
            if (entry.contains("fractions")) ds.fractions = entry.at("fractions").get<std::array<double, 3>>();
            const fs::path path = base / entry.at("path").get<std::string>();

            RawRows rows;
            std::array<std::size_t, 3> counts{};
            if (format == ExternalFormat::CsvLabels) {
                rows = read_csv(path, num_classes);
                if (rows.width != width) {
                    throw DataError(path.string() + ": header declares " + std::to_string(rows.width) +
                                    " features, manifest input_shape has " + std::to_string(width));
                }
                const std::size_t n = rows.y.size();
                if (entry.contains("split_counts")) {
                    counts = entry.at("split_counts").get<std::array<std::size_t, 3>>();
                } else {
                    const auto tr = static_cast<std::size_t>(std::llround(n * ds.fractions[0]));
                    const auto va = std::min(n - std::min(n, tr), static_cast<std::size_t>(std::llround(n * ds.fractions[1])));
                    counts = {std::min(n, tr), va, n - std::min(n, tr) - va};
                }
                if (counts[0] + counts[1] + counts[2] != n) {
                    throw DataError(ds.name + ": split_counts do not add up to " + std::to_string(n) + " rows");
                }
            } else {
                const json sidecar = read_json(path / "shape.json");
                if (sidecar.at("input_shape").get<Shape>() != sample_shape) {
                    throw DataError(path.string() + ": shape sidecar disagrees with manifest input_shape");
                }
                for (std::size_t s = 0; s < 3; ++s) {
                    counts[s] = sidecar.at("rows").at(kSplitNames[s]).get<std::size_t>();
                    RawRows part = read_raw_split(path / (std::string(kSplitNames[s]) + ".f64"), counts[s], width,
                                                  num_classes);
                    rows.x.insert(rows.x.end(), part.x.begin(), part.x.end());
                    rows.y.insert(rows.y.end(), part.y.begin(), part.y.end());
                }
                rows.width = width;
            }
            ds.train = make_split(rows, 0, counts[0], sample_shape, id_base);
            ds.val = make_split(rows, counts[0], counts[0] + counts[1], sample_shape, id_base);
            ds.test = make_split(rows, counts[0] + counts[1], counts[0] + counts[1] + counts[2], sample_shape, id_base);
            id_base += rows.y.size();
            out.push_back(std::move(ds));
        }
    } catch (const json::exception& e) {
        throw DataError(manifest_path.string() + ": " + e.what());
    }
    if (out.empty()) throw DataError(manifest_path.string() + ": manifest declares no centers");
    return out;
}

void export_external(const std::vector<CenterDataset>& datasets, const fs::path& manifest_path,
                     ExternalFormat format) {
    if (datasets.empty()) throw DataError("nothing to export");
    const fs::path base = manifest_path.parent_path();
    if (!base.empty()) fs::create_directories(base);
    json centers = json::array();
    for (const auto& ds : datasets) {
        json entry{{"name", ds.name},
                   {"source_center", ds.source_center},
                   {"heterogeneity", heterogeneity_to_json(ds.heterogeneity)},
                   {"value_range", ds.value_range},
                   {"fractions", ds.fractions}};
        if (format == ExternalFormat::CsvLabels) {
            const std::string file = ds.name + ".csv";
            write_csv(base / file, {&ds.train, &ds.val, &ds.test});
            entry["path"] = file;
            entry["split_counts"] = std::array<std::size_t, 3>{ds.train.size(), ds.val.size(), ds.test.size()};
        } else {
            const fs::path dir = base / ds.name;
            fs::create_directories(dir);
            const Split* splits[3] = {&ds.train, &ds.val, &ds.test};
            json rows;
            for (std::size_t s = 0; s < 3; ++s) {
                write_raw_split(dir / (std::string(kSplitNames[s]) + ".f64"), *splits[s]);
                rows[kSplitNames[s]] = splits[s]->size();
            }
            std::ofstream(dir / "shape.json") << json{{"input_shape", ds.input_shape()}, {"rows", rows}}.dump(2);
            entry["path"] = ds.name;
        }
        centers.push_back(entry);
    }
    json manifest{{"num_classes", datasets.front().num_classes},
                  {"input_shape", datasets.front().input_shape()},
                  {"centers", centers}};
    std::ofstream out(manifest_path);
    if (!out) throw DataError("cannot write " + manifest_path.string());
    out << manifest.dump(2) << '\n';
}

} // namespace itl
