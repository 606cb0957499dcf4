#pragma once

// File formats: full-precision CSV matrices, per-subject series CSVs with a
// JSON manifest, versioned key=value config files, and decomposition bundles.

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynvar/core.hpp"

namespace dynvar {

namespace fs = std::filesystem;
using Json = nlohmann::json;  // std::map backed: keys come out sorted

/// File-level failure: unreadable, unwritable, malformed.
class IoError : public DataError {
public:
    using DataError::DataError;
};

inline std::string format_double(double v) {
    if (std::isnan(v)) return "NA";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline bool is_missing_token(const std::string& s) { return s.empty() || s == "NA" || s == "na" || s == "NaN"; }

inline double parse_double(const std::string& s, const std::string& where) {
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0' || errno == ERANGE)
        throw IoError(where + ": cannot parse '" + s + "' as a number");
    return v;
}

inline std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

inline std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrices

/// Plain numeric CSV, no header, 17 significant digits.
inline void write_matrix_csv(const fs::path& path, const Matrix& m) {
    auto out = detail::open_out(path);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j > 0) out << ',';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline Matrix read_matrix_csv(const fs::path& path) {
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 0;
    for (const auto& line : detail::read_lines(path)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        std::vector<double> row;
        for (const auto& cell : detail::split_csv_line(line))
            row.push_back(detail::parse_double(cell, path.string() + ":" + std::to_string(line_no)));
        if (!rows.empty() && row.size() != rows.front().size())
            throw IoError(path.string() + ":" + std::to_string(line_no) + ": ragged row");
        rows.push_back(std::move(row));
    }
    Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return m;
}

// ---------------------------------------------------------------------------
// Series

/// Header of variable names, one row per time point; missing cells as NA.
inline void write_series_csv(const fs::path& path, const SubjectSeries& s, const std::vector<std::string>& names) {
    if (static_cast<int>(names.size()) != s.variables()) throw DimensionError("variable name count mismatch");
    auto out = detail::open_out(path);
    for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
    out << '\n';
    for (Eigen::Index t = 0; t < s.values.rows(); ++t) {
        for (Eigen::Index j = 0; j < s.values.cols(); ++j) {
            if (j > 0) out << ',';
            out << (s.is_missing(t, j) ? std::string("NA") : format_double(s.values(t, j)));
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline SubjectSeries read_series_csv(const fs::path& path, const std::vector<std::string>& names,
                                     std::string subject_id) {
    const auto lines = detail::read_lines(path);
    if (lines.empty()) throw IoError(path.string() + ": empty file");
    const auto header = detail::split_csv_line(lines.front());
    if (header != names) throw IoError(path.string() + ": header does not match variable_names");
    const auto d = static_cast<Eigen::Index>(names.size());
    std::vector<std::vector<std::string>> cells;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (detail::trim(lines[i]).empty()) continue;
        auto row = detail::split_csv_line(lines[i]);
        if (static_cast<Eigen::Index>(row.size()) != d)
            throw IoError(path.string() + ":" + std::to_string(i + 1) + ": expected " + std::to_string(d) + " cells");
        cells.push_back(std::move(row));
    }
    SubjectSeries s;
    s.subject_id = std::move(subject_id);
    const auto T = static_cast<Eigen::Index>(cells.size());
    s.values = Matrix::Zero(T, d);
    BoolMatrix mask = BoolMatrix::Constant(T, d, false);
    for (Eigen::Index t = 0; t < T; ++t)
        for (Eigen::Index j = 0; j < d; ++j) {
            const auto& c = cells[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            if (detail::is_missing_token(c)) {
                mask(t, j) = true;
                s.values(t, j) = std::nan("");
            } else {
                s.values(t, j) = detail::parse_double(c, path.string() + ":" + std::to_string(t + 2));
            }
        }
    if (mask.any()) s.missing_mask = std::move(mask);
    return s;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
    std::string subject_id;
    std::string csv_path;  // relative to the manifest's directory unless absolute
    int T = 0;
};

struct PanelManifest {
    int version = 1;
    int d = 0;
    int p = 1;
    std::vector<std::string> variable_names;
    std::vector<ManifestEntry> subjects;
};

inline std::vector<std::string> default_variable_names(int d) {
    std::vector<std::string> out;
    for (int j = 1; j <= d; ++j) out.push_back("V" + std::to_string(j));
    return out;
}

inline Json to_json(const PanelManifest& m) {
    Json j;
    j["version"] = m.version;
    j["d"] = m.d;
    j["p"] = m.p;
    j["variable_names"] = m.variable_names;
    j["subjects"] = Json::array();
    for (const auto& s : m.subjects) j["subjects"].push_back({{"subject_id", s.subject_id}, {"csv_path", s.csv_path}, {"T", s.T}});
    return j;
}

inline void write_json(const fs::path& path, const Json& j) {
    auto out = detail::open_out(path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

inline Json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

inline PanelManifest read_manifest(const fs::path& path) {
    const Json j = read_json(path);
    PanelManifest m;
    try {
        m.version = j.at("version").get<int>();
        if (m.version != 1) throw ConfigError("manifest version " + std::to_string(m.version) + " not supported");
        m.d = j.at("d").get<int>();
        m.p = j.value("p", 1);
        m.variable_names = j.at("variable_names").get<std::vector<std::string>>();
        for (const auto& s : j.at("subjects"))
            m.subjects.push_back({s.at("subject_id").get<std::string>(), s.at("csv_path").get<std::string>(),
                                  s.at("T").get<int>()});
    } catch (const Json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    if (static_cast<int>(m.variable_names.size()) != m.d)
        throw IoError(path.string() + ": variable_names must list d names");
    if (m.subjects.empty()) throw IoError(path.string() + ": no subjects");
    return m;
}

/// Loads every subject listed in the manifest. T in the manifest must match
/// the row count of each file.
inline MultiSubjectPanel load_panel(const fs::path& manifest_path) {
    const PanelManifest m = read_manifest(manifest_path);
    MultiSubjectPanel panel;
    panel.dims.d = m.d;
    panel.dims.p = m.p;
    panel.dims.K = static_cast<int>(m.subjects.size());
    panel.dims.T = 0;
    const fs::path base = manifest_path.parent_path();
    for (const auto& e : m.subjects) {
        const fs::path p = fs::path(e.csv_path).is_absolute() ? fs::path(e.csv_path) : base / e.csv_path;
        if (!fs::exists(p)) throw IoError("missing subject file " + p.string());
        auto s = read_series_csv(p, m.variable_names, e.subject_id);
        if (s.length() != e.T)
            throw IoError(p.string() + ": manifest says T=" + std::to_string(e.T) + ", file has " +
                          std::to_string(s.length()) + " rows");
        panel.dims.T = std::max(panel.dims.T, s.length());
        panel.subjects.push_back(std::move(s));
    }
    validate_panel(panel);
    return panel;
}

/// Writes subject CSVs into `dir` and the manifest alongside them.
inline PanelManifest save_panel(const fs::path& dir, const MultiSubjectPanel& panel,
                                std::vector<std::string> variable_names = {}) {
    if (variable_names.empty()) variable_names = default_variable_names(panel.dims.d);
    PanelManifest m;
    m.d = panel.dims.d;
    m.p = panel.dims.p;
    m.variable_names = variable_names;
    for (const auto& s : panel.subjects) {
        const std::string file = "series_" + s.subject_id + ".csv";
        write_series_csv(dir / file, s, variable_names);
        m.subjects.push_back({s.subject_id, file, s.length()});
    }
    write_json(dir / "manifest.json", to_json(m));
    return m;
}

// ---------------------------------------------------------------------------
// Assignments and decompositions

inline Json to_json(const SubgroupAssignment& a) { return Json{{"S", a.S}, {"labels", a.labels}}; }

inline SubgroupAssignment assignment_from_json(const Json& j) {
    SubgroupAssignment a;
    try {
        a.S = j.at("S").get<int>();
        a.labels = j.at("labels").get<std::vector<int>>();
    } catch (const Json::exception& e) {
        throw IoError(std::string("assignment: ") + e.what());
    }
    a.validate(a.labels.size());
    return a;
}

inline SubgroupAssignment read_assignment(const fs::path& path) { return assignment_from_json(read_json(path)); }

/// gamma.csv, pi_<s>.csv, upsilon_<id>.csv, phi_<id>.csv and
/// decomposition.json (shape, subject ids, assignment).
inline void save_decomposition(const fs::path& dir, const TransitionDecomposition& dec,
                               const std::vector<std::string>& subject_ids) {
    if (subject_ids.size() != dec.subjects()) throw DimensionError("subject id count mismatch");
    write_matrix_csv(dir / "gamma.csv", dec.gamma);
    for (std::size_t s = 0; s < dec.pi.size(); ++s) write_matrix_csv(dir / ("pi_" + std::to_string(s + 1) + ".csv"), dec.pi[s]);
    for (std::size_t k = 0; k < dec.subjects(); ++k) {
        write_matrix_csv(dir / ("upsilon_" + subject_ids[k] + ".csv"), dec.upsilon[k]);
        write_matrix_csv(dir / ("phi_" + subject_ids[k] + ".csv"), compose_transition(dec, k));
    }
    Json j;
    j["version"] = 1;
    j["d"] = dec.gamma.rows();
    j["p"] = dec.gamma.rows() == 0 ? 0 : dec.gamma.cols() / dec.gamma.rows();
    j["S"] = dec.subgroups();
    j["subjects"] = subject_ids;
    j["assignment"] = to_json(dec.assignment);
    write_json(dir / "decomposition.json", j);
}

struct LoadedDecomposition {
    TransitionDecomposition decomposition;
    std::vector<std::string> subject_ids;
};

inline LoadedDecomposition load_decomposition(const fs::path& dir) {
    const Json j = read_json(dir / "decomposition.json");
    LoadedDecomposition out;
    int S = 0;
    try {
        S = j.at("S").get<int>();
        out.subject_ids = j.at("subjects").get<std::vector<std::string>>();
        if (S > 0) out.decomposition.assignment = assignment_from_json(j.at("assignment"));
    } catch (const Json::exception& e) {
        throw IoError((dir / "decomposition.json").string() + ": " + e.what());
    }
    auto& dec = out.decomposition;
    dec.gamma = read_matrix_csv(dir / "gamma.csv");
    for (int s = 1; s <= S; ++s) dec.pi.push_back(read_matrix_csv(dir / ("pi_" + std::to_string(s) + ".csv")));
    for (const auto& id : out.subject_ids) {
        dec.upsilon.push_back(read_matrix_csv(dir / ("upsilon_" + id + ".csv")));
        if (dec.upsilon.back().rows() != dec.gamma.rows() || dec.upsilon.back().cols() != dec.gamma.cols())
            throw DimensionError("upsilon_" + id + ".csv does not match gamma.csv");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config files

/// `key = value` lines, `#` comments. A `version` key is required; every
/// other key must be read by the consumer, and leftover keys are rejected by
/// finish(), so a typo never passes silently.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text, const std::string& source = "config") {
        KeyValueConfig c;
        c.source_ = source;
        std::istringstream in(text);
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key = value");
            const std::string key = detail::trim(line.substr(0, eq));
            const std::string value = detail::trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
            if (c.values_.count(key)) throw ConfigError(source + ": duplicate key '" + key + "'");
            c.values_[key] = value;
        }
        if (!c.values_.count("version")) throw ConfigError(source + ": missing 'version'");
        if (c.get_int("version", 1) != 1) throw ConfigError(source + ": version must be 1");
        return c;
    }

    static KeyValueConfig load(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path.string());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    long long get_int(const std::string& key, long long fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        errno = 0;
        char* end = nullptr;
        const long long v = std::strtoll(it->second.c_str(), &end, 10);
        if (end == it->second.c_str() || *end != '\0' || errno == ERANGE)
            throw ConfigError(source_ + ": " + key + ": expected an integer, got '" + it->second + "'");
        return v;
    }

    unsigned long long get_uint64(const std::string& key, unsigned long long fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        errno = 0;
        char* end = nullptr;
        const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
        if (it->second.empty() || it->second[0] == '-' || *end != '\0' || errno == ERANGE)
            throw ConfigError(source_ + ": " + key + ": expected a non-negative integer, got '" + it->second + "'");
        return v;
    }

    double get_double(const std::string& key, double fallback) {
        used_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        errno = 0;
        char* end = nullptr;
        const double v = std::strtod(it->second.c_str(), &end);
        if (end == it->second.c_str() || *end != '\0' || errno == ERANGE)
            throw ConfigError(source_ + ": " + key + ": expected a number, got '" + it->second + "'");
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) {
        const std::string v = get_string(key, fallback ? "true" : "false");
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError(source_ + ": " + key + ": expected true/false, got '" + v + "'");
    }

    /// Comma-separated list of numbers.
    std::vector<double> get_doubles(const std::string& key) {
        used_.insert(key);
        std::vector<double> out;
        auto it = values_.find(key);
        if (it == values_.end() || it->second.empty()) return out;
        for (const auto& cell : detail::split_csv_line(it->second)) {
            errno = 0;
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || *end != '\0' || errno == ERANGE)
                throw ConfigError(source_ + ": " + key + ": bad list element '" + cell + "'");
            out.push_back(v);
        }
        return out;
    }

    std::vector<std::string> get_strings(const std::string& key) {
        used_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end() || it->second.empty()) return {};
        return detail::split_csv_line(it->second);
    }

    /// Throws on the first key nobody asked for.
    void finish() const {
        for (const auto& [k, v] : values_)
            if (!used_.count(k)) throw ConfigError(source_ + ": unknown key '" + k + "'");
    }

private:
    std::string source_;
    std::map<std::string, std::string> values_;
    std::set<std::string> used_;
};

}  // namespace dynvar
