// SPDX-License-Identifier: Apache-2.0

#include "clearair/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "clearair/errors.hpp"

namespace clearair {

std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    std::vector<ManifestRow> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestRow row;
        if (!std::getline(ls, row.degraded_path, '\t') ||
            !std::getline(ls, row.clean_path, '\t') || !std::getline(ls, row.tag, '\t')) {
            throw DatasetError("manifest line " + std::to_string(line_no) +
                               ": expected degraded<TAB>clean<TAB>tag");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    for (const ManifestRow& r : rows) {
        out << r.degraded_path << '\t' << r.clean_path << '\t' << r.tag << '\n';
    }
}

std::string resolve_manifest_path(const std::string& manifest_path, const std::string& entry) {
    const std::filesystem::path p(entry);
    if (p.is_absolute()) return entry;
    return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

} // namespace clearair
