// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "chunkflow/io.hpp"

namespace chunkflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "chunkflow-pyramid";
constexpr int kVersion = 1;

fs::path resolve_against(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

fs::path relative_to(const fs::path& base, const fs::path& p) {
  std::error_code ec;
  const fs::path r = fs::relative(p, base.empty() ? fs::path(".") : base, ec);
  return ec || r.empty() ? p : r;
}

}  // namespace

PyramidManifest PyramidManifest::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open manifest");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  PyramidManifest m;
  try {
    if (j.at("format").get<std::string>() != kFormat) throw FormatError(path.string() + ": not a pyramid manifest");
    if (j.at("version").get<int>() != kVersion)
      throw FormatError(path.string() + ": unsupported manifest version " + j.at("version").dump());
    for (const auto& l : j.at("levels")) {
      Level level;
      level.path = resolve_against(base, l.at("path").get<std::string>());
      level.spacing = l.at("spacing").get<std::vector<double>>();
      if (l.contains("const_table") && !l.at("const_table").is_null())
        level.const_table = resolve_against(base, l.at("const_table").get<std::string>());
      m.levels.push_back(std::move(level));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (m.levels.empty()) throw FormatError(path.string() + ": manifest lists no levels");
  return m;
}

void PyramidManifest::save(const fs::path& path) const {
  const fs::path base = path.parent_path();
  json levels_json = json::array();
  for (const auto& l : levels) {
    json e{{"path", relative_to(base, l.path).generic_string()}, {"spacing", l.spacing}};
    if (l.const_table) e["const_table"] = relative_to(base, *l.const_table).generic_string();
    levels_json.push_back(std::move(e));
  }
  const json j{{"format", kFormat}, {"version", kVersion}, {"levels", std::move(levels_json)}};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(path.string() + ": cannot create manifest");
  f << j.dump(2) << "\n";
  if (!f) throw IoError(path.string() + ": write failed");
}

LodPyramid PyramidManifest::open() const {
  LodPyramid p;
  const bool tables = !levels.empty() && levels.front().const_table.has_value();
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const Level& l = levels[k];
    OperatorPtr op = open_chunked(l.path);
    const auto& sp = op->embedding().spacing;
    if (sp.size() != l.spacing.size())
      throw InvalidArgument(l.path.string() + ": manifest spacing has the wrong dimensionality");
    for (std::size_t i = 0; i < sp.size(); ++i)
      if (std::fabs(sp[i] - l.spacing[i]) > 1e-9 * std::max(1.0, std::fabs(sp[i])))
        throw InvalidArgument(l.path.string() + ": manifest spacing differs from the file");
    p.levels.push_back(std::move(op));
    if (l.const_table.has_value() != tables)
      throw InvalidArgument("manifest lists const tables for some levels only");
    if (tables) {
      OperatorPtr t = open_chunked(*l.const_table);
      if (t->metadata().size != p.levels.back()->metadata().chunk_grid())
        throw InvalidArgument(l.const_table->string() + ": const table does not match the level's chunk grid");
      p.const_tables.push_back(std::move(t));
    }
  }
  p.validate();
  return p;
}

PyramidManifest build_lod_offline(Runtime& rt, const fs::path& input, const fs::path& manifest, bool const_tables) {
  OperatorPtr cur = open_chunked(input);
  const fs::path dir = manifest.parent_path();
  const std::string stem = manifest.stem().string();
  PyramidManifest m;
  for (std::size_t k = 0;; ++k) {
    PyramidManifest::Level level;
    if (k == 0) {
      level.path = input;
    } else {
      level.path = dir / (stem + "_L" + std::to_string(k) + ".plct");
      save_tensor(rt, cur, level.path);
      cur = open_chunked(level.path);
    }
    level.spacing = cur->embedding().spacing;
    if (const_tables) {
      level.const_table = dir / (stem + "_L" + std::to_string(k) + "_const.plct");
      save_tensor(rt, const_chunk_table(cur), *level.const_table);
    }
    m.levels.push_back(std::move(level));
    // Drop chunks of the finished level before building the next one.
    rt.evict_all();
    cur = lod_next_level(cur);
    if (!cur) break;
  }
  m.save(manifest);
  return m;
}

}  // namespace chunkflow
