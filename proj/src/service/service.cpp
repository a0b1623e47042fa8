// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include "chunkflow/service.hpp"

#include "chunkflow/io.hpp"
#include "chunkflow/render.hpp"

#include <httplib.h>

#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <json.hpp>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <thread>

namespace chunkflow {

using nlohmann::json;

std::pair<std::string, int> parse_listen(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
    throw InvalidArgument("listen address '" + s + "' is not host:port");
  const std::string host = s.substr(0, colon);
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw InvalidArgument("");
  } catch (const std::exception&) {
    throw InvalidArgument("listen address '" + s + "' has a bad port");
  }
  if (port < 0 || port > 65535) throw InvalidArgument("listen port out of range in '" + s + "'");
  return {host, port};
}

std::string default_listen() {
  const char* env = std::getenv(kListenEnv);
  return env && *env ? std::string(env) : std::string(kDefaultListen);
}

namespace {

struct View {
  OperatorPtr node;
  TransferFunction tf;
};

struct Session {
  std::string id;
  std::string dataset;
  std::string kind;
  json params;
  std::uint64_t generation = 0;
  View view;
  std::map<Coord, std::string> finals;  // PNG bytes, current generation
  std::set<Coord> queued;
};

struct RefineJob {
  std::shared_ptr<Session> session;
  std::uint64_t generation;
  Coord pos;
  View view;
};

class BadRequest : public Error {
 public:
  using Error::Error;
};

double num(const json& p, const char* key, double def) {
  if (!p.contains(key)) return def;
  const json& v = p.at(key);
  if (!v.is_number()) throw BadRequest(std::string("param '") + key + "' must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw BadRequest(std::string("param '") + key + "' must be finite");
  return d;
}

std::uint64_t count(const json& p, const char* key, std::uint64_t def) {
  if (!p.contains(key)) return def;
  const json& v = p.at(key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    throw BadRequest(std::string("param '") + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

Eigen::Vector3d vec3(const json& v, const char* key) {
  if (!v.is_array() || v.size() != 3) throw BadRequest(std::string("camera '") + key + "' must be 3 numbers");
  Eigen::Vector3d out;
  for (int i = 0; i < 3; ++i) {
    if (!v[i].is_number()) throw BadRequest(std::string("camera '") + key + "' must be 3 numbers");
    out[i] = v[i].get<double>();
  }
  return out;
}

TransferFunction default_tf(DataType t) {
  switch (t.kind) {
    case ScalarKind::U8: return TransferFunction::grey_ramp(0, 255);
    case ScalarKind::U16: return TransferFunction::grey_ramp(0, 65535);
    case ScalarKind::I16: return TransferFunction::grey_ramp(-32768, 32767);
    default: return TransferFunction::grey_ramp(0, 1);
  }
}

TransferFunction parse_tf(const json& p, DataType t) {
  if (!p.contains("tf")) return default_tf(t);
  const json& v = p.at("tf");
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw BadRequest("param 'tf' must be [min, max]");
  TransferFunction tf = TransferFunction::grey_ramp(v[0].get<double>(), v[1].get<double>());
  tf.validate();
  return tf;
}

PanZoom parse_pan_zoom(const json& p) {
  PanZoom v;
  v.zoom = num(p, "zoom", 1.0);
  if (p.contains("pan")) {
    const json& pan = p.at("pan");
    if (!pan.is_array() || pan.size() != 2 || !pan[0].is_number() || !pan[1].is_number())
      throw BadRequest("param 'pan' must be [x, y]");
    v.pan_x = pan[0].get<double>();
    v.pan_y = pan[1].get<double>();
  }
  return v;
}

// Drops the leading time dimension of a 4-D pyramid.
LodPyramid at_time(const LodPyramid& pyr, const json& p) {
  if (pyr[0]->metadata().num_dims() != 4) {
    if (p.contains("time")) throw BadRequest("param 'time' needs a 4-D dataset");
    return pyr;
  }
  return slice_pyramid(pyr, 0, count(p, "time", 0));
}

View build_view(const LodPyramid& pyr, const std::string& kind, const json& p, std::uint64_t tile) {
  if (!p.is_object()) throw BadRequest("params must be an object");
  const std::uint64_t w = count(p, "width", 1024), h = count(p, "height", 1024);
  if (w == 0 || h == 0 || w > 32768 || h > 32768) throw BadRequest("width and height must be in 1..32768");
  const TensorMetaData frame_md = frame_metadata(w, h, tile, tile);
  const TensorMetaData& md0 = pyr[0]->metadata();
  View v;
  v.tf = parse_tf(p, md0.dtype);
  if (kind == "image") {
    if (md0.num_dims() != 2) throw BadRequest("image views need a 2-D dataset");
    v.node = image_view(pyr, parse_pan_zoom(p), frame_md);
  } else if (kind == "slice") {
    const LodPyramid vol = at_time(pyr, p);
    const TensorMetaData& md = vol[0]->metadata();
    if (md.num_dims() != 3) throw BadRequest("slice views need a 3-D or 4-D dataset");
    const std::uint64_t dim = count(p, "dim", 0);
    if (dim >= 3) throw BadRequest("slice dim " + std::to_string(dim) + " out of range");
    const std::uint64_t index = count(p, "index", md.size[dim] / 2);
    v.node = slice_view(vol, dim, index, parse_pan_zoom(p), frame_md);
  } else if (kind == "raycast") {
    const LodPyramid vol = at_time(pyr, p);
    const TensorMetaData& md = vol[0]->metadata();
    const EmbeddingData& emb = vol[0]->embedding();
    if (md.num_dims() != 3 || md.dtype.lanes != 1) throw BadRequest("raycast views need a scalar 3-D dataset");
    const double fov = num(p, "fov", 60.0);
    CameraState cam = camera_for_volume(md, emb, fov);
    if (p.contains("camera") && !(p.at("camera").is_string() && p.at("camera").get<std::string>() == "auto")) {
      const json& c = p.at("camera");
      if (!c.is_object()) throw BadRequest("param 'camera' must be \"auto\" or {eye, look_at, up}");
      if (!c.contains("eye") || !c.contains("look_at")) throw BadRequest("camera needs eye and look_at");
      cam = camera_looking_at(md, emb, vec3(c.at("eye"), "eye"), vec3(c.at("look_at"), "look_at"),
                              c.contains("up") ? vec3(c.at("up"), "up") : Eigen::Vector3d(0, 1, 0), fov);
    }
    cam.validate();
    RaycasterConfig cfg;
    const std::string comp = p.value("compositing", std::string("dvr"));
    if (comp == "dvr") {
      cfg.compositing = Compositing::DVR;
    } else if (comp == "mop") {
      cfg.compositing = Compositing::MOP;
    } else {
      throw BadRequest("param 'compositing' must be dvr or mop");
    }
    if (p.contains("es")) {
      if (!p.at("es").is_boolean()) throw BadRequest("param 'es' must be a boolean");
      cfg.use_const_table = p.at("es").get<bool>();
    }
    cfg.lod_bias = num(p, "lod_bias", cfg.lod_bias);
    cfg.sample_distance_factor = num(p, "sample_distance_factor", cfg.sample_distance_factor);
    cfg.preview_lod_offset = static_cast<int>(count(p, "preview_lod_offset", cfg.preview_lod_offset));
    cfg.validate();
    const auto eep = entry_exit_points(md, emb, frame_md, cam.projection(static_cast<double>(w) / h));
    v.node = raycast(vol, eep, cfg, v.tf);
  } else {
    throw BadRequest("kind must be image, slice or raycast");
  }
  return v;
}

std::string tile_png(const View& v, const Coord& pos, const std::vector<std::byte>& chunk) {
  const TensorMetaData& md = v.node->metadata();
  const Region r = chunk_logical_region(md, pos);
  const std::uint64_t h = r.end[0] - r.begin[0], w = r.end[1] - r.begin[1];
  std::vector<std::byte> dense(w * h * md.dtype.size());
  gather_region(md, r, [&](const Coord&) { return std::span<const std::byte>(chunk); }, dense);
  const RgbaImage img{static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(h), to_rgba8(dense, md.dtype, v.tf)};
  const auto png = encode_png(img);
  return std::string(reinterpret_cast<const char*>(png.data()), png.size());
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, status, json{{"error", msg}});
}

json store_json(const StoreStats& s) {
  return json{{"used", s.used}, {"capacity", s.capacity}, {"peak_used", s.peak_used}, {"entries", s.entries}};
}

}  // namespace

struct TileService::Impl {
  ServiceConfig cfg;
  Runtime rt;
  std::mutex mu;
  std::map<std::string, LodPyramid> datasets;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  std::uint64_t next_session = 1;

  std::deque<RefineJob> jobs;
  std::condition_variable jobs_cv;
  bool stopping = false;
  std::vector<std::thread> refiners;

  httplib::Server server;
  std::thread listener;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), rt(cfg.engine) {
    if (cfg.tile_size == 0) throw InvalidArgument("tile size must be positive");
    for (std::size_t i = 0; i < std::max<std::size_t>(1, cfg.refine_threads); ++i)
      refiners.emplace_back([this] { refine_loop(); });
    routes();
  }

  ~Impl() {
    stop_server();
    {
      std::lock_guard lk(mu);
      stopping = true;
    }
    jobs_cv.notify_all();
    for (auto& t : refiners) t.join();
  }

  void stop_server() {
    server.stop();
    if (listener.joinable()) listener.join();
  }

  ResolveOptions opts(ChunkState want) const {
    ResolveOptions o;
    o.location = cfg.render_location;
    o.want = want;
    return o;
  }

  void refine_loop() {
    for (;;) {
      RefineJob job;
      {
        std::unique_lock lk(mu);
        jobs_cv.wait(lk, [this] { return stopping || !jobs.empty(); });
        if (stopping) return;
        job = std::move(jobs.front());
        jobs.pop_front();
        if (job.session->generation != job.generation) continue;
      }
      std::optional<std::string> png;
      try {
        auto r = rt.resolve(job.view.node, {job.pos}, opts(ChunkState::Final));
        png = tile_png(job.view, job.pos, r[0].data);
      } catch (const std::exception&) {
      }
      std::lock_guard lk(mu);
      if (job.session->generation != job.generation) continue;
      job.session->queued.erase(job.pos);
      if (png) job.session->finals.emplace(job.pos, std::move(*png));
    }
  }

  std::shared_ptr<Session> find(const std::string& id) {
    auto it = sessions.find(id);
    return it == sessions.end() ? nullptr : it->second;
  }

  json dataset_json(const std::string& id, const LodPyramid& p) const {
    const TensorMetaData& md = p[0]->metadata();
    return json{{"id", id},
                {"dims", md.num_dims()},
                {"size", md.size},
                {"chunk", md.chunk_size},
                {"levels", p.size()},
                {"element_type", std::string(DataType{md.dtype.kind, 1}.name())},
                {"lanes", md.dtype.lanes},
                {"spacing", p[0]->embedding().spacing}};
  }

  json session_json(const Session& s) const {
    const TensorMetaData& md = s.view.node->metadata();
    return json{{"session", s.id},          {"dataset", s.dataset},  {"kind", s.kind},
                {"params", s.params},       {"generation", s.generation},
                {"width", md.size[1]},      {"height", md.size[0]},  {"tile", cfg.tile_size},
                {"tiles_x", md.chunk_grid()[1]}, {"tiles_y", md.chunk_grid()[0]}};
  }

  void routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Expose-Headers", "X-State, X-Generation"}});
    server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, DELETE, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      } catch (...) {
        send_error(res, 500, "unknown error");
      }
    });

    server.Get("/datasets", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      std::lock_guard lk(mu);
      for (const auto& [id, p] : datasets) out.push_back(dataset_json(id, p));
      send_json(res, 200, out);
    });

    server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::exception& e) {
        return send_error(res, 400, std::string("bad JSON: ") + e.what());
      }
      if (!body.is_object() || !body.contains("dataset") || !body["dataset"].is_string())
        return send_error(res, 400, "body needs a 'dataset' string");
      const std::string ds = body["dataset"].get<std::string>();
      const std::string kind = body.contains("kind") && body["kind"].is_string() ? body["kind"].get<std::string>() : "";
      const json params = body.contains("params") ? body["params"] : json::object();
      LodPyramid pyr;
      {
        std::lock_guard lk(mu);
        auto it = datasets.find(ds);
        if (it == datasets.end()) return send_error(res, 404, "unknown dataset '" + ds + "'");
        pyr = it->second;
      }
      auto s = std::make_shared<Session>();
      try {
        s->view = build_view(pyr, kind, params, cfg.tile_size);
      } catch (const std::exception& e) {
        return send_error(res, 400, e.what());
      }
      s->dataset = ds;
      s->kind = kind;
      s->params = params;
      std::lock_guard lk(mu);
      s->id = std::to_string(next_session++);
      sessions.emplace(s->id, s);
      send_json(res, 200, json{{"session", s->id}, {"generation", s->generation}});
    });

    server.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lk(mu);
      auto s = find(req.matches[1]);
      if (!s) return send_error(res, 404, "unknown session");
      send_json(res, 200, session_json(*s));
    });

    server.Delete(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lk(mu);
      auto it = sessions.find(req.matches[1]);
      if (it == sessions.end()) return send_error(res, 404, "unknown session");
      ++it->second->generation;
      sessions.erase(it);
      send_json(res, 200, json::object());
    });

    server.Put(R"(/sessions/([^/]+)/params)", [this](const httplib::Request& req, httplib::Response& res) {
      json patch;
      try {
        patch = json::parse(req.body);
      } catch (const json::exception& e) {
        return send_error(res, 400, std::string("bad JSON: ") + e.what());
      }
      if (!patch.is_object()) return send_error(res, 400, "params must be an object");
      std::shared_ptr<Session> s;
      json params;
      LodPyramid pyr;
      {
        std::lock_guard lk(mu);
        s = find(req.matches[1]);
        if (!s) return send_error(res, 404, "unknown session");
        params = s->params;
        pyr = datasets.at(s->dataset);
      }
      params.merge_patch(patch);
      View v;
      try {
        v = build_view(pyr, s->kind, params, cfg.tile_size);
      } catch (const std::exception& e) {
        return send_error(res, 400, e.what());
      }
      std::lock_guard lk(mu);
      s->params = std::move(params);
      s->view = std::move(v);
      ++s->generation;
      s->finals.clear();
      s->queued.clear();
      send_json(res, 200, json{{"generation", s->generation}});
    });

    server.Get(R"(/sessions/([^/]+)/tile)", [this](const httplib::Request& req, httplib::Response& res) {
      std::uint64_t x = 0, y = 0;
      std::optional<std::uint64_t> gen;
      try {
        x = std::stoull(req.get_param_value("x"));
        y = std::stoull(req.get_param_value("y"));
        if (req.has_param("gen")) gen = std::stoull(req.get_param_value("gen"));
      } catch (const std::exception&) {
        return send_error(res, 400, "tile needs integer x and y (and optional gen)");
      }
      std::shared_ptr<Session> s;
      View v;
      std::uint64_t g = 0;
      const Coord pos{y, x};
      {
        std::lock_guard lk(mu);
        s = find(req.matches[1]);
        if (!s) return send_error(res, 404, "unknown session");
        g = s->generation;
        if (gen && *gen != g)
          return send_json(res, 409, json{{"error", "stale generation"}, {"generation", g}});
        const Coord grid = s->view.node->metadata().chunk_grid();
        if (y >= grid[0] || x >= grid[1]) return send_error(res, 400, "tile out of range");
        if (auto it = s->finals.find(pos); it != s->finals.end()) return send_tile(res, it->second, true, g);
        v = s->view;
      }
      auto r = rt.resolve(v.node, {pos}, opts(ChunkState::Preview));
      std::string png = tile_png(v, pos, r[0].data);
      const bool final = r[0].state == ChunkState::Final;
      std::lock_guard lk(mu);
      if (s->generation == g) {
        if (final) {
          png = s->finals.emplace(pos, std::move(png)).first->second;
        } else if (s->queued.insert(pos).second) {
          jobs.push_back(RefineJob{s, g, pos, v});
          jobs_cv.notify_one();
        }
      }
      send_tile(res, png, final, g);
    });

    server.Get(R"(/sessions/([^/]+)/status)", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lk(mu);
      auto s = find(req.matches[1]);
      if (!s) return send_error(res, 404, "unknown session");
      json stores{{cfg.render_location.name(), store_json(rt.store_stats(cfg.render_location))}};
      if (cfg.render_location != Location::ram()) stores["ram"] = store_json(rt.store_stats(Location::ram()));
      send_json(res, 200,
                json{{"generation", s->generation},
                     {"tiles", {{"total", s->view.node->metadata().num_chunks()}, {"final", s->finals.size()}}},
                     {"bytes_read", rt.stats().bytes_read},
                     {"store", store_json(rt.store_stats(cfg.render_location))},
                     {"stores", stores}});
    });
  }

  static void send_tile(httplib::Response& res, const std::string& png, bool final, std::uint64_t gen) {
    res.status = 200;
    res.set_header("X-State", final ? "final" : "preview");
    res.set_header("X-Generation", std::to_string(gen));
    res.set_header("Cache-Control", "no-store");
    res.set_content(png, "image/png");
  }
};

TileService::TileService(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}
TileService::~TileService() = default;

void TileService::add_dataset(const std::string& id, LodPyramid pyramid) {
  pyramid.validate();
  if (id.empty()) throw InvalidArgument("dataset id must not be empty");
  std::lock_guard lk(impl_->mu);
  if (!impl_->datasets.emplace(id, std::move(pyramid)).second)
    throw InvalidArgument("dataset '" + id + "' already exists");
}

std::string TileService::add_manifest(const std::filesystem::path& manifest) {
  const std::string id = manifest.stem().string();
  add_dataset(id, PyramidManifest::load(manifest).open());
  return id;
}

int TileService::start(const std::string& host, int port) {
  if (impl_->listener.joinable()) throw InvalidArgument("service already started");
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw IoError("cannot bind " + host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    throw IoError("cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void TileService::stop() { impl_->stop_server(); }

Runtime& TileService::runtime() { return impl_->rt; }
const ServiceConfig& TileService::config() const { return impl_->cfg; }

}  // namespace chunkflow
