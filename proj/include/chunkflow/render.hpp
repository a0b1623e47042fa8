// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <vector>

#include "chunkflow/operators.hpp"

namespace chunkflow {

// World space of a 3-D volume: x runs along tensor dimension 2, y along dimension 1 and z along
// dimension 0; the volume occupies [0, extent] with extent = spacing * size per axis.
Eigen::Vector3d volume_extent(const TensorMetaData& md, const EmbeddingData& embedding);

struct CameraState {
  Eigen::Vector3d eye{0, 0, 1};
  Eigen::Vector3d look_at{0, 0, 0};
  Eigen::Vector3d up{0, 1, 0};
  double fov_deg = 60.0;  // vertical
  double near_plane = 0.01;
  double far_plane = 100.0;

  // Throws InvalidArgument on a degenerate camera.
  void validate() const;
  Eigen::Matrix4d view() const;
  // Perspective projection times view; clip space in OpenGL conventions (NDC in [-1, 1]^3).
  Eigen::Matrix4d projection(double aspect) const;
};

// Eye on the +(1,1,1) diagonal from the box centre at the distance where the bounding sphere
// fills the vertical field of view.
CameraState camera_for_volume(const TensorMetaData& md, const EmbeddingData& embedding, double fov_deg);
// Camera at `eye` looking at `look_at`, with clip planes covering the volume from there.
CameraState camera_looking_at(const TensorMetaData& md, const EmbeddingData& embedding, const Eigen::Vector3d& eye,
                              const Eigen::Vector3d& look_at, const Eigen::Vector3d& up, double fov_deg);

// Frame of `height` x `width` pixels cut into tiles; row 0 is the top row.
TensorMetaData frame_metadata(std::uint64_t width, std::uint64_t height, std::uint64_t tile_width,
                              std::uint64_t tile_height);

// Ray segments per pixel as a [H, W, 2] tensor of F32 x 4 (chunks [tile_h, tile_w, 2]):
//   [y, x, 0] = (entry in normalized volume coordinates, pixel footprint at the entry)
//   [y, x, 1] = (exit in normalized volume coordinates, footprint growth per unit distance)
// Footprints are in world units. A ray missing the volume has entry footprint -1 (the empty
// marker) and zeros elsewhere. Rays start at the near plane. Throws InvalidArgument for a
// singular projection.
OperatorPtr entry_exit_points(const TensorMetaData& volume_md, const EmbeddingData& embedding,
                              const TensorMetaData& frame_md, const Eigen::Matrix4d& projection);

// Pixel (row, col) of a frame as normalized device coordinates of its centre.
Eigen::Vector2d pixel_ndc(const TensorMetaData& frame_md, std::uint64_t row, std::uint64_t col);

struct TransferFunction {
  double min = 0.0;
  double max = 1.0;

  static TransferFunction grey_ramp(double min, double max);
  void validate() const;
  // Straight (not premultiplied) RGBA.
  std::array<double, 4> operator()(double value) const;
};

enum class Compositing : std::uint8_t { DVR = 0, MOP = 1 };

struct RaycasterConfig {
  Compositing compositing = Compositing::DVR;
  double sample_distance_factor = 0.5;  // times the finest spacing of the sampled level
  double lod_bias = 0.0;                // log2 factor applied to the pixel footprint
  int preview_lod_offset = 2;
  bool use_const_table = true;

  void validate() const;
};

// Early ray termination threshold for DVR.
inline constexpr double kOpaqueAlpha = 0.99;

// Level sampled at a point whose pixel footprint is `footprint` world units: the coarsest level
// whose finest spacing does not exceed footprint * 2^bias (level 0 if none).
std::size_t select_lod(const LodPyramid& lod, double footprint, double bias);

// Premultiplied RGBA F32 x 4 frame tensor with the tiles of `eep`. Each tile task marches its
// rays through bricks mapped into per-level page tables, loading missing bricks between
// rounds; a tile is Final once every sample was taken at its target level. Requests with
// want=Preview produce a Preview tile sampled preview_lod_offset levels coarser.
OperatorPtr raycast(const LodPyramid& lod, const OperatorPtr& eep, RaycasterConfig config, TransferFunction tf);

// Pan/zoom of a 2-D view: frame pixel (row, col) shows level-0 element
// (pan_y + (row + 0.5) / zoom, pan_x + (col + 0.5) / zoom).
struct PanZoom {
  double zoom = 1.0;
  double pan_x = 0.0;
  double pan_y = 0.0;
};

// Pyramid level shown at `zoom`: floor(log2(1 / zoom)) clamped to the available levels.
std::size_t view_level(std::size_t levels, double zoom);

// Nearest-neighbour view of a 2-D pyramid; pixels outside the tensor are zero. The output has
// the pyramid's element type and the frame's size and tiles.
OperatorPtr image_view(const LodPyramid& pyramid, PanZoom view, const TensorMetaData& frame_md);

// Axis-aligned slice of a 3-D pyramid at level-0 `index` along `dim`, shown like image_view.
OperatorPtr slice_view(const LodPyramid& pyramid, std::size_t dim, std::uint64_t index, PanZoom view,
                       const TensorMetaData& frame_md);

// Same pyramid with dimension `dim` fixed at level-0 `index` on every level.
LodPyramid slice_pyramid(const LodPyramid& pyramid, std::size_t dim, std::uint64_t index);

// ---- Frame conversion ----

// RGBA8 pixels of a dense frame region: F32 x 4 values are scaled by 255; U8 x 4 is copied;
// U8 x 3 gets opaque alpha; scalar values go through `tf` (premultiplied).
std::vector<std::uint8_t> to_rgba8(std::span<const std::byte> dense, DataType t, const TransferFunction& tf);

}  // namespace chunkflow
