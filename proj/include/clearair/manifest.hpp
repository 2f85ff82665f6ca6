// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifest: newline-delimited, tab-separated rows of
// (degraded_path, clean_path, degradation_tag). Relative paths resolve
// against the manifest's directory.

#pragma once

#include <string>
#include <vector>

namespace clearair {

struct ManifestRow {
    std::string degraded_path;
    std::string clean_path;
    std::string tag;

    bool operator==(const ManifestRow&) const = default;
};

std::vector<ManifestRow> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);

// Resolves a manifest-relative path.
std::string resolve_manifest_path(const std::string& manifest_path, const std::string& entry);

} // namespace clearair
