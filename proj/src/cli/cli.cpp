// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include "chunkflow/cli.hpp"

#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <thread>

#include "chunkflow/io.hpp"
#include "chunkflow/render.hpp"
#include "chunkflow/service.hpp"

namespace chunkflow {

namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_serve_stop{false};

class UsageError : public Error {
 public:
  using Error::Error;
};

std::vector<std::string> split(const std::string& s, const std::string& seps) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (seps.find(c) != std::string::npos) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::vector<double> parse_reals(const std::string& s, const char* what, std::size_t n = 0) {
  std::vector<double> out;
  for (const auto& p : split(s, ",x")) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(p, &used));
      if (used != p.size()) throw UsageError("");
    } catch (const std::exception&) {
      throw UsageError(std::string("bad ") + what + " '" + s + "'");
    }
  }
  if (n && out.size() != n) throw UsageError(std::string(what) + " needs " + std::to_string(n) + " numbers");
  return out;
}

std::string join(const std::vector<std::uint64_t>& v, const char* sep = "x") {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + std::to_string(v[i]);
  return s;
}

std::string join(const std::vector<double>& v) {
  std::ostringstream s;
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
  return s.str();
}

struct Limits {
  std::size_t max_requests = EngineConfig{}.max_requests_per_task;
  std::size_t max_active = EngineConfig{}.max_active_tasks_per_operator;
};

void add_limits(CLI::App* cmd, Limits& l) {
  cmd->add_option("--max-requests", l.max_requests, "Chunk requests per task batch")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--max-active", l.max_active, "Active tasks per operator")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

EngineConfig engine_config(const std::string& ram, const std::string& device, const Limits& l) {
  EngineConfig cfg;
  cfg.max_requests_per_task = l.max_requests;
  cfg.max_active_tasks_per_operator = l.max_active;
  cfg.ram = StoreConfig{parse_bytes(ram)};
  if (!device.empty()) cfg.devices.push_back(StoreConfig{parse_bytes(device)});
  return cfg;
}

TransferFunction tf_for(const std::string& s, DataType t) {
  if (!s.empty()) {
    const auto v = parse_reals(s, "--tf", 2);
    auto tf = TransferFunction::grey_ramp(v[0], v[1]);
    tf.validate();
    return tf;
  }
  switch (t.kind) {
    case ScalarKind::U8: return TransferFunction::grey_ramp(0, 255);
    case ScalarKind::U16: return TransferFunction::grey_ramp(0, 65535);
    case ScalarKind::I16: return TransferFunction::grey_ramp(-32768, 32767);
    default: return TransferFunction::grey_ramp(0, 1);
  }
}

bool on_off(const std::string& s, const char* flag) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw UsageError(std::string(flag) + " must be on or off");
}

struct ImportArgs {
  std::string shape, chunk, type, spacing, input, output;
};

int cmd_import(const ImportArgs& a, std::ostream& out) {
  const Coord size = parse_extent(a.shape), chunk = parse_extent(a.chunk);
  DataType t;
  try {
    t = DataType::parse(a.type);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  std::vector<double> spacing(size.size(), 1.0);
  if (!a.spacing.empty()) spacing = parse_reals(a.spacing, "--spacing", size.size());
  TensorMetaData md;
  try {
    md = TensorMetaData(size, chunk, t);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  import_raw(a.input, a.output, md, EmbeddingData{spacing});
  out << "wrote " << a.output << ": " << join(md.size) << " " << t.name() << ", " << md.num_chunks()
      << " chunks of " << join(md.chunk_size) << "\n";
  return kExitOk;
}

struct BuildArgs {
  std::string input, output, ram = "1G";
  bool const_table = false;
  Limits limits;
};

int cmd_build_lod(const BuildArgs& a, std::ostream& out) {
  Runtime rt(engine_config(a.ram, "", a.limits));
  const PyramidManifest m = build_lod_offline(rt, a.input, a.output, a.const_table);
  for (std::size_t k = 0; k < m.levels.size(); ++k)
    out << "level " << k << ": " << m.levels[k].path.string() << " spacing " << join(m.levels[k].spacing)
        << (m.levels[k].const_table ? " (+const table)" : "") << "\n";
  out << "wrote " << a.output << "\n";
  return kExitOk;
}

struct RenderArgs {
  std::string manifest, output, frame = "1000x1000", tile = "512x512", camera = "auto", compositing = "dvr", tf,
                                es = "on", ram = "1G", device;
  double fov = 60.0;
  double lod_bias = 0.0;
  bool timing = false;
  Limits limits;
};

int cmd_render(const RenderArgs& a, std::ostream& out) {
  const Coord frame = parse_extent(a.frame), tile = parse_extent(a.tile);
  if (frame.size() != 2 || tile.size() != 2) throw UsageError("--frame and --tile take WxH");
  RaycasterConfig cfg;
  if (a.compositing == "dvr") {
    cfg.compositing = Compositing::DVR;
  } else if (a.compositing == "mop") {
    cfg.compositing = Compositing::MOP;
  } else {
    throw UsageError("--compositing must be dvr or mop");
  }
  cfg.use_const_table = on_off(a.es, "--es");
  cfg.lod_bias = a.lod_bias;
  cfg.validate();

  const LodPyramid lod = PyramidManifest::load(a.manifest).open();
  const TensorMetaData& md = lod[0]->metadata();
  const EmbeddingData& emb = lod[0]->embedding();
  if (md.num_dims() != 3 || md.dtype.lanes != 1) throw InvalidArgument("render needs a scalar 3-D dataset");
  const TransferFunction tf = tf_for(a.tf, md.dtype);
  CameraState cam;
  if (a.camera == "auto") {
    cam = camera_for_volume(md, emb, a.fov);
  } else {
    const auto parts = split(a.camera, "/");
    if (parts.size() != 3) throw UsageError("--camera takes auto or ex,ey,ez/lx,ly,lz/ux,uy,uz");
    auto v = [&](int i) {
      const auto r = parse_reals(parts[i], "--camera", 3);
      return Eigen::Vector3d(r[0], r[1], r[2]);
    };
    cam = camera_looking_at(md, emb, v(0), v(1), v(2), a.fov);
  }
  const TensorMetaData frame_md = frame_metadata(frame[0], frame[1], tile[0], tile[1]);
  const auto eep = entry_exit_points(md, emb, frame_md,
                                     cam.projection(static_cast<double>(frame[0]) / static_cast<double>(frame[1])));
  const auto image = raycast(lod, eep, cfg, tf);

  Runtime rt(engine_config(a.ram, a.device, a.limits));
  ResolveOptions opts;
  if (!a.device.empty()) opts.location = Location::device(0);
  std::vector<Coord> tiles;
  for (std::uint64_t i = 0; i < frame_md.num_chunks(); ++i) tiles.push_back(delinearize(frame_md.chunk_grid(), i));
  const auto t0 = std::chrono::steady_clock::now();
  const auto chunks = rt.resolve(image, tiles, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::map<Coord, std::size_t> at;
  for (std::size_t i = 0; i < tiles.size(); ++i) at[tiles[i]] = i;
  std::vector<std::byte> dense(frame[0] * frame[1] * frame_md.dtype.size());
  gather_region(frame_md, Region{Coord{0, 0}, frame_md.size},
                [&](const Coord& h) { return std::span<const std::byte>(chunks[at.at(h)].data); }, dense);
  write_png(a.output, RgbaImage{static_cast<std::uint32_t>(frame[0]), static_cast<std::uint32_t>(frame[1]),
                                to_rgba8(dense, frame_md.dtype, tf)});
  if (a.timing) {
    const StoreStats s = rt.store_stats(opts.location);
    out << "render " << frame[0] << "x" << frame[1] << ": " << std::fixed << std::setprecision(3) << secs
        << " s, brick bytes read " << rt.stats().bytes_read << ", peak store " << s.peak_used << " of "
        << s.capacity << " bytes\n";
  }
  return kExitOk;
}

struct ServeArgs {
  std::vector<std::string> manifests;
  std::string listen, ram = "1G", device;
  std::uint64_t tile_size = 512;
  Limits limits;
};

int cmd_serve(const ServeArgs& a, std::ostream& out) {
  const auto [host, port] = parse_listen(a.listen.empty() ? default_listen() : a.listen);
  ServiceConfig sc;
  sc.engine = engine_config(a.ram, a.device, a.limits);
  sc.tile_size = a.tile_size;
  if (!a.device.empty()) sc.render_location = Location::device(0);
  TileService svc(sc);
  for (const auto& m : a.manifests) out << "dataset " << svc.add_manifest(m) << " from " << m << "\n";
  g_serve_stop = false;
  const int bound = svc.start(host, port);
  out << "listening on http://" << host << ":" << bound << std::endl;
  while (!g_serve_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  svc.stop();
  return kExitOk;
}

int cmd_info(const std::string& path, std::ostream& out) {
  if (!fs::exists(path)) throw IoError(path + ": no such file");
  auto describe = [&out](const OperatorPtr& op, const std::string& indent) {
    const TensorMetaData& md = op->metadata();
    out << indent << "type: " << md.dtype.name() << "\n"
        << indent << "size: " << join(md.size) << "\n"
        << indent << "chunk: " << join(md.chunk_size) << "\n"
        << indent << "grid: " << join(md.chunk_grid()) << "\n"
        << indent << "chunks: " << md.num_chunks() << "\n"
        << indent << "spacing: " << join(op->embedding().spacing) << "\n";
  };
  if (fs::path(path).extension() == ".json") {
    const PyramidManifest m = PyramidManifest::load(path);
    const LodPyramid p = m.open();
    out << "levels: " << p.size() << "\n";
    for (std::size_t k = 0; k < p.size(); ++k) {
      out << "level " << k << ": " << m.levels[k].path.string() << "\n";
      describe(p[k], "  ");
      if (m.levels[k].const_table) out << "  const_table: " << m.levels[k].const_table->string() << "\n";
    }
    return kExitOk;
  }
  const ChunkedFileHeader h = read_chunked_header(path);
  std::uint64_t present = 0;
  for (auto o : h.offsets) present += o != 0;
  describe(open_chunked(path), "");
  out << "present: " << present << "\n"
      << "header_bytes: " << h.header_bytes() << "\n";
  return kExitOk;
}

}  // namespace

Coord parse_extent(const std::string& s) {
  Coord c;
  for (const auto& p : split(s, "x,")) {
    try {
      std::size_t used = 0;
      if (p.empty() || p[0] == '-') throw UsageError("");
      c.push_back(std::stoull(p, &used));
      if (used != p.size()) throw UsageError("");
    } catch (const std::exception&) {
      throw UsageError("bad extent '" + s + "'");
    }
  }
  return c;
}

std::uint64_t parse_bytes(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw UsageError("bad byte size '" + s + "'");
  }
  std::string unit = s.substr(used);
  if (!unit.empty() && unit.back() == 'B') unit.pop_back();
  if (unit.size() == 2 && unit[1] == 'i') unit.pop_back();
  static const std::map<std::string, double> scale{
      {"", 1}, {"K", 1024.0}, {"M", 1024.0 * 1024}, {"G", 1024.0 * 1024 * 1024}, {"T", 1024.0 * 1024 * 1024 * 1024}};
  auto it = scale.find(unit);
  if (it == scale.end() || !(v > 0) || !std::isfinite(v)) throw UsageError("bad byte size '" + s + "'");
  return static_cast<std::uint64_t>(v * it->second);
}

void request_serve_stop() { g_serve_stop = true; }

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Chunked out-of-core tensor processing and rendering", "chunkflow"};
  app.require_subcommand(1);

  ImportArgs ia;
  auto* imp = app.add_subcommand("import", "Convert a dense row-major raw array into a chunked file");
  imp->add_option("--shape", ia.shape, "Tensor size, e.g. 512x512x512 (slowest dimension first)")->required();
  imp->add_option("--chunk", ia.chunk, "Chunk size, e.g. 64x64x64")->required();
  imp->add_option("--type", ia.type, "Element type: u8, i16, u16, f32, f64, optionally xN lanes")->required();
  imp->add_option("--spacing", ia.spacing, "Element spacing per dimension, e.g. 1,1,2");
  imp->add_option("--input", ia.input, "Raw input file")->required();
  imp->add_option("--output", ia.output, "Chunked output file")->required();

  BuildArgs ba;
  auto* bld = app.add_subcommand("build-lod", "Write the LOD pyramid of a chunked file and its manifest");
  bld->add_option("--input", ba.input, "Chunked level-0 file")->required();
  bld->add_option("--output", ba.output, "Manifest path (.json); levels are written next to it")->required();
  bld->add_flag("--const-table", ba.const_table, "Also write const-chunk tables");
  bld->add_option("--ram-budget", ba.ram, "RAM store capacity")->capture_default_str();
  add_limits(bld, ba.limits);

  RenderArgs ra;
  auto* ren = app.add_subcommand("render", "Raycast one frame of a pyramid to a PNG");
  ren->add_option("--manifest", ra.manifest, "Pyramid manifest")->required();
  ren->add_option("--output", ra.output, "PNG output path")->required();
  ren->add_option("--frame", ra.frame, "Frame size WxH")->capture_default_str();
  ren->add_option("--tile", ra.tile, "Tile size WxH")->capture_default_str();
  ren->add_option("--fov", ra.fov, "Vertical field of view in degrees")->capture_default_str();
  ren->add_option("--camera", ra.camera, "auto or ex,ey,ez/lx,ly,lz/ux,uy,uz in world units")->capture_default_str();
  ren->add_option("--compositing", ra.compositing, "dvr or mop")->capture_default_str();
  ren->add_option("--tf", ra.tf, "Transfer function ramp min,max");
  ren->add_option("--es", ra.es, "Empty-space skipping on|off")->capture_default_str();
  ren->add_option("--lod-bias", ra.lod_bias, "log2 bias on the pixel footprint")->capture_default_str();
  ren->add_option("--ram-budget", ra.ram, "RAM store capacity")->capture_default_str();
  ren->add_option("--device-budget", ra.device, "Device store capacity; renders at the device when given");
  add_limits(ren, ra.limits);
  ren->add_flag("--timing", ra.timing, "Print cold-cache wall time and brick bytes read");

  ServeArgs sa;
  auto* srv = app.add_subcommand("serve", "Run the HTTP tile service");
  srv->add_option("--manifest", sa.manifests, "Pyramid manifest (repeatable)");
  srv->add_option("--listen", sa.listen, std::string("host:port (default $") + kListenEnv + " or " + kDefaultListen + ")");
  srv->add_option("--ram-budget", sa.ram, "RAM store capacity")->capture_default_str();
  srv->add_option("--device-budget", sa.device, "Device store capacity; renders at the device when given");
  srv->add_option("--tile-size", sa.tile_size, "Tile edge in pixels")->capture_default_str();
  add_limits(srv, sa.limits);

  std::string info_path;
  auto* inf = app.add_subcommand("info", "Print metadata of a chunked file or a pyramid manifest");
  inf->add_option("path", info_path, "Chunked file or manifest")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    out << sub->help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << "error: " << e.what() << "\n" << sub->help();
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (sub == imp) return cmd_import(ia, out);
    if (sub == bld) return cmd_build_lod(ba, out);
    if (sub == ren) return cmd_render(ra, out);
    if (sub == srv) return cmd_serve(sa, out);
    return cmd_info(info_path, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << sub->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace chunkflow
