#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "simflow/ad/checkpoint.hpp"
#include "simflow/harness/config.hpp"

namespace simflow::harness {

/// Table file: one line of JSON header, then rows x width little-endian
/// float32 values, row-major. Columns are named blocks, e.g. theta and x.
struct table_file {
    static constexpr int format_version = 1;

    json header = json::object();
    std::vector<std::pair<std::string, std::size_t>> columns;
    std::vector<float> data;

    std::size_t width() const {
        std::size_t w = 0;
        for (const auto& c : columns) w += c.second;
        return w;
    }
    std::size_t rows() const { return width() ? data.size() / width() : 0; }

    /// Offset and width of a named column block.
    std::pair<std::size_t, std::size_t> block(const std::string& name) const {
        std::size_t off = 0;
        for (const auto& c : columns) {
            if (c.first == name) return {off, c.second};
            off += c.second;
        }
        throw artifact_error("table has no column block '" + name + "'");
    }

    std::vector<double> get(std::size_t row, const std::string& name) const {
        const auto [off, w] = block(name);
        const float* p = data.data() + row * width() + off;
        return {p, p + w};
    }

    void append(const std::vector<std::vector<double>>& blocks) {
        if (blocks.size() != columns.size()) throw std::invalid_argument("table_file: block count mismatch");
        for (std::size_t k = 0; k < blocks.size(); ++k) {
            if (blocks[k].size() != columns[k].second) throw std::invalid_argument("table_file: block width mismatch");
            for (double v : blocks[k]) data.push_back(static_cast<float>(v));
        }
    }

    /// Rows of one block as a tensor.
    ad::tensor tensor_of(const std::string& name) const {
        const auto [off, w] = block(name);
        const std::size_t n = rows(), W = width();
        ad::tensor t({n, w});
        for (std::size_t r = 0; r < n; ++r) std::copy_n(data.begin() + r * W + off, w, t.data().begin() + r * w);
        return t;
    }

    void save(const std::filesystem::path& path) const {
        json h = header;
        h["format_version"] = format_version;
        h["rows"] = rows();
        json cols = json::array();
        for (const auto& c : columns) cols.push_back({{"name", c.first}, {"width", c.second}});
        h["columns"] = cols;
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << h.dump() << "\n";
        ad::write_f32_le(os, data);
        if (!os) throw std::runtime_error("failed writing " + path.string());
    }

    static table_file load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw artifact_error("missing artifact " + path.string());
        std::string line;
        std::getline(is, line);
        table_file t;
        try {
            t.header = json::parse(line);
            if (t.header.at("format_version").get<int>() != format_version)
                throw artifact_error(path.string() + ": unsupported table format version");
            for (const auto& c : t.header.at("columns"))
                t.columns.emplace_back(c.at("name").get<std::string>(), c.at("width").get<std::size_t>());
        } catch (const json::exception& e) {
            throw artifact_error(path.string() + ": malformed header (" + e.what() + ")");
        }
        const std::size_t rows = t.header.at("rows").get<std::size_t>();
        const auto start = is.tellg();
        is.seekg(0, std::ios::end);
        const auto bytes = static_cast<std::size_t>(is.tellg() - start);
        if (bytes != rows * t.width() * 4)
            throw artifact_error(path.string() + ": payload has " + std::to_string(bytes) + " bytes, header declares " +
                                 std::to_string(rows * t.width() * 4));
        is.seekg(start);
        t.data = ad::read_f32_le(is, rows * t.width());
        if (t.header.contains("task_config") &&
            json_hash(t.header.at("task_config")) != t.header.value("task_config_hash", std::string()))
            throw artifact_error(path.string() + ": task-config hash does not match the embedded task config");
        return t;
    }
};

} // namespace simflow::harness
