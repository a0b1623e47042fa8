// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "chunkflow/render.hpp"

namespace chunkflow {

Eigen::Vector3d volume_extent(const TensorMetaData& md, const EmbeddingData& embedding) {
  if (md.num_dims() != 3) throw InvalidArgument("volume rendering needs a 3-D tensor");
  const auto phys = embedding.physical_size(md);
  return {phys[2], phys[1], phys[0]};
}

void CameraState::validate() const {
  if (!eye.allFinite() || !look_at.allFinite() || !up.allFinite()) throw InvalidArgument("camera is not finite");
  if (!(fov_deg > 0 && fov_deg < 180)) throw InvalidArgument("camera field of view must be in (0, 180) degrees");
  if (!(near_plane > 0 && near_plane < far_plane)) throw InvalidArgument("camera needs 0 < near < far");
  const Eigen::Vector3d f = look_at - eye;
  if (f.norm() == 0) throw InvalidArgument("camera eye equals its look-at point");
  if (f.normalized().cross(up).norm() < 1e-9 * std::max(1.0, up.norm()))
    throw InvalidArgument("camera up vector is parallel to the view direction");
}

Eigen::Matrix4d CameraState::view() const {
  const Eigen::Vector3d f = (look_at - eye).normalized();
  const Eigen::Vector3d s = f.cross(up).normalized();
  const Eigen::Vector3d u = s.cross(f);
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<1, 3>(0, 0) = s.transpose();
  m.block<1, 3>(1, 0) = u.transpose();
  m.block<1, 3>(2, 0) = -f.transpose();
  m(0, 3) = -s.dot(eye);
  m(1, 3) = -u.dot(eye);
  m(2, 3) = f.dot(eye);
  return m;
}

Eigen::Matrix4d CameraState::projection(double aspect) const {
  validate();
  if (!(aspect > 0)) throw InvalidArgument("aspect ratio must be positive");
  const double f = 1.0 / std::tan(fov_deg * std::numbers::pi / 360.0);
  Eigen::Matrix4d p = Eigen::Matrix4d::Zero();
  p(0, 0) = f / aspect;
  p(1, 1) = f;
  p(2, 2) = (far_plane + near_plane) / (near_plane - far_plane);
  p(2, 3) = 2 * far_plane * near_plane / (near_plane - far_plane);
  p(3, 2) = -1;
  return p * view();
}

CameraState camera_for_volume(const TensorMetaData& md, const EmbeddingData& embedding, double fov_deg) {
  const Eigen::Vector3d ext = volume_extent(md, embedding);
  if (!(fov_deg > 0 && fov_deg < 180)) throw InvalidArgument("camera field of view must be in (0, 180) degrees");
  const double radius = ext.norm() / 2;
  const double dist = radius / std::tan(fov_deg * std::numbers::pi / 360.0);
  CameraState c;
  c.look_at = ext / 2;
  c.eye = c.look_at + Eigen::Vector3d(1, 1, 1).normalized() * dist;
  c.up = {0, 1, 0};
  c.fov_deg = fov_deg;
  c.near_plane = dist * 1e-3;
  c.far_plane = dist + 2 * radius;
  return c;
}

CameraState camera_looking_at(const TensorMetaData& md, const EmbeddingData& embedding, const Eigen::Vector3d& eye,
                              const Eigen::Vector3d& look_at, const Eigen::Vector3d& up, double fov_deg) {
  const Eigen::Vector3d ext = volume_extent(md, embedding);
  const double radius = ext.norm() / 2;
  const double dist = (eye - ext / 2).norm();
  CameraState c;
  c.eye = eye;
  c.look_at = look_at;
  c.up = up;
  c.fov_deg = fov_deg;
  c.near_plane = std::max(dist * 1e-3, radius * 1e-4);
  c.far_plane = dist + 2 * radius;
  c.validate();
  return c;
}

TensorMetaData frame_metadata(std::uint64_t width, std::uint64_t height, std::uint64_t tile_width,
                              std::uint64_t tile_height) {
  TensorMetaData md({height, width}, {std::min(tile_height, height), std::min(tile_width, width)},
                    DataType::f32(4));
  md.validate();
  return md;
}

Eigen::Vector2d pixel_ndc(const TensorMetaData& frame_md, std::uint64_t row, std::uint64_t col) {
  const double h = static_cast<double>(frame_md.size[0]);
  const double w = static_cast<double>(frame_md.size[1]);
  return {(static_cast<double>(col) + 0.5) / w * 2 - 1, 1 - (static_cast<double>(row) + 0.5) / h * 2};
}

namespace {

class EntryExitPoints : public OperatorBase<EntryExitPoints> {
 public:
  EntryExitPoints(Eigen::Vector3d extent, const TensorMetaData& frame, const Eigen::Matrix4d& projection)
      : OperatorBase("entry_exit_points", encode(extent, frame, projection), {},
                     TensorMetaData({frame.size[0], frame.size[1], 2}, {frame.chunk_size[0], frame.chunk_size[1], 2},
                                    DataType::f32(4)),
                     EmbeddingData::unit(3)),
        extent_(std::move(extent)),
        frame_(frame),
        inverse_(projection.inverse()) {}

  Task<> compute(TaskContext& ctx, std::vector<Coord> positions) const override {
    for (const auto& h : positions) {
      Allocation out = co_await ctx.allocate_output();
      auto bytes = out.bytes();
      co_await ctx.run([this, &h, bytes] { fill(h, bytes); });
      ctx.commit(h, std::move(out));
    }
  }

 private:
  static std::vector<std::byte> encode(const Eigen::Vector3d& extent, const TensorMetaData& frame,
                                       const Eigen::Matrix4d& projection) {
    ParamWriter w;
    w.f64(extent.x()).f64(extent.y()).f64(extent.z()).coord(frame.size).coord(frame.chunk_size);
    for (int i = 0; i < 16; ++i) w.f64(projection(i / 4, i % 4));
    return std::move(w).take();
  }

  Eigen::Vector3d unproject(const Eigen::Vector2d& ndc, double z) const {
    const Eigen::Vector4d v = inverse_ * Eigen::Vector4d(ndc.x(), ndc.y(), z, 1.0);
    return v.head<3>() / v.w();
  }

  void fill(const Coord& h, std::span<std::byte> out) const {
    std::memset(out.data(), 0, out.size());
    const TensorMetaData& md = metadata();
    const Region r = chunk_logical_region(md, h);
    float* f = reinterpret_cast<float*>(out.data());
    const double dx = 2.0 / static_cast<double>(frame_.size[1]);
    for (std::uint64_t y = r.begin[0]; y < r.end[0]; ++y) {
      for (std::uint64_t x = r.begin[1]; x < r.end[1]; ++x) {
        float* e = f + (((y - r.begin[0]) * md.chunk_size[1] + (x - r.begin[1])) * 2) * 4;
        const Eigen::Vector2d ndc = pixel_ndc(frame_, y, x);
        const Eigen::Vector3d n = unproject(ndc, -1), far = unproject(ndc, 1);
        const Eigen::Vector2d ndc1(ndc.x() + dx, ndc.y());
        const double wn = (unproject(ndc1, -1) - n).norm();
        const double wf = (unproject(ndc1, 1) - far).norm();
        const Eigen::Vector3d d = far - n;
        double t0 = 0, t1 = 1;
        bool hit = true;
        for (int a = 0; a < 3 && hit; ++a) {
          if (std::fabs(d[a]) < 1e-300) {
            hit = n[a] >= 0 && n[a] <= extent_[a];
            continue;
          }
          double ta = (0 - n[a]) / d[a], tb = (extent_[a] - n[a]) / d[a];
          if (ta > tb) std::swap(ta, tb);
          t0 = std::max(t0, ta);
          t1 = std::min(t1, tb);
        }
        if (!hit || !(t0 < t1)) {
          e[3] = -1.0f;
          continue;
        }
        const double len = d.norm();
        const double k = (wf - wn) / len;
        const Eigen::Vector3d entry = ((n + d * t0).array() / extent_.array()).min(1.0).max(0.0);
        const Eigen::Vector3d exit = ((n + d * t1).array() / extent_.array()).min(1.0).max(0.0);
        for (int a = 0; a < 3; ++a) {
          e[a] = static_cast<float>(entry[a]);
          e[4 + a] = static_cast<float>(exit[a]);
        }
        e[3] = static_cast<float>(wn + k * t0 * len);
        e[7] = static_cast<float>(k);
      }
    }
  }

  Eigen::Vector3d extent_;
  TensorMetaData frame_;
  Eigen::Matrix4d inverse_;
};

}  // namespace

OperatorPtr entry_exit_points(const TensorMetaData& volume_md, const EmbeddingData& embedding,
                              const TensorMetaData& frame_md, const Eigen::Matrix4d& projection) {
  const Eigen::Vector3d ext = volume_extent(volume_md, embedding);
  if (frame_md.num_dims() != 2) throw InvalidArgument("frame metadata must be 2-D");
  frame_md.validate();
  if (!projection.allFinite() || !Eigen::FullPivLU<Eigen::Matrix4d>(projection).isInvertible())
    throw InvalidArgument("projection matrix is singular");
  return std::make_shared<EntryExitPoints>(ext, frame_md, projection);
}

TransferFunction TransferFunction::grey_ramp(double min, double max) {
  TransferFunction tf{min, max};
  tf.validate();
  return tf;
}

void TransferFunction::validate() const {
  if (!(std::isfinite(min) && std::isfinite(max) && max > min))
    throw InvalidArgument("transfer function needs finite min < max");
}

std::array<double, 4> TransferFunction::operator()(double value) const {
  const double t = std::clamp((value - min) / (max - min), 0.0, 1.0);
  return {t, t, t, std::isnan(value) ? 0.0 : t};
}

void RaycasterConfig::validate() const {
  if (!(sample_distance_factor > 0) || !std::isfinite(sample_distance_factor))
    throw InvalidArgument("sample distance factor must be positive");
  if (!std::isfinite(lod_bias)) throw InvalidArgument("LOD bias must be finite");
  if (preview_lod_offset < 1) throw InvalidArgument("preview LOD offset must be at least 1");
}

std::size_t select_lod(const LodPyramid& lod, double footprint, double bias) {
  const double limit = footprint * std::exp2(bias);
  std::size_t level = 0;
  for (std::size_t l = 1; l < lod.size(); ++l)
    if (lod[l]->embedding().min_spacing() <= limit) level = l;
  return level;
}

std::size_t view_level(std::size_t levels, double zoom) {
  if (!(zoom > 0) || !std::isfinite(zoom)) throw InvalidArgument("zoom must be positive");
  if (levels == 0) throw InvalidArgument("pyramid without levels");
  const double l = std::floor(std::log2(1.0 / zoom) + 1e-9);
  if (l <= 0) return 0;
  return std::min(levels - 1, static_cast<std::size_t>(l));
}

std::vector<std::uint8_t> to_rgba8(std::span<const std::byte> dense, DataType t, const TransferFunction& tf) {
  const std::vector<double> v = to_doubles(dense, t);
  const std::size_t n = v.size() / t.lanes;
  std::vector<std::uint8_t> out(n * 4);
  auto q = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = &v[i * t.lanes];
    std::uint8_t* o = &out[i * 4];
    if (t.lanes == 1) {
      const auto c = tf(p[0]);
      for (int k = 0; k < 3; ++k) o[k] = q(c[k] * c[3]);
      o[3] = q(c[3]);
    } else if (is_float(t.kind)) {
      for (std::size_t k = 0; k < 4; ++k) o[k] = q(k < t.lanes ? p[k] : (k == 3 ? 1.0 : 0.0));
    } else {
      const double scale = t.kind == ScalarKind::U8 ? 1.0 : 255.0 / scalar_max(t.kind);
      for (std::size_t k = 0; k < 4; ++k)
        o[k] = static_cast<std::uint8_t>(
            std::clamp(std::lround(k < t.lanes ? p[k] * scale : (k == 3 ? 255.0 : 0.0)), 0L, 255L));
    }
  }
  return out;
}

}  // namespace chunkflow
