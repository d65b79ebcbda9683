#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lungseg/nn_ops.hpp"

namespace lungseg {

/// Physical voxel geometry, stored in MetaImage axis order (x, y, z) = (W, H, D).
using Vec3 = std::array<double, 3>;

struct Sample {
  std::string id;
  Tensor5<float> image;  // (1,1,D,H,W)
  Tensor5<float> mask;   // same shape, values in {0,1}
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  void validate() const;
};

// ----------------------------------------------------------------- MetaImage

enum class MetaElementType { met_short, met_float, met_uchar };

std::string meta_type_name(MetaElementType t);
MetaElementType parse_meta_type(const std::string& s);

struct MetaVolume {
  Tensor5<float> data;  // (1,1,D,H,W)
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  MetaElementType element_type = MetaElementType::met_short;
};

/// Reads an ASCII .mhd header and its little-endian raw buffer.
MetaVolume load_mhd(const std::filesystem::path& header_path);
/// Writes `<stem>.mhd` and `<stem>.raw`. Values must be representable in the
/// element type (integers within range for short/uchar).
void write_mhd(const std::filesystem::path& header_path, const MetaVolume& v);

// ------------------------------------------------------------- preprocessing

enum class ResizeKind { linear, nearest };

/// Per-slice 2D resize of every (b, c, d) plane to (out_h, out_w).
/// Linear uses half-pixel centers with edge clamping.
Tensor5<float> resize_inplane(const Tensor5<float>& v, std::int64_t out_h, std::int64_t out_w, ResizeKind kind);

/// Median slice floor((D-1)/2) and `half_extent` slices either side.
Tensor5<float> crop_about_median(const Tensor5<float>& v, std::int64_t half_extent = 11);

struct BlockCrop {
  Tensor5<float> block;
  Index3 start;       // source index of block voxel (0,0,0); may be negative
  Index3 pad_before;  // zero voxels added below index 0 on each axis
  Index3 pad_after;   // zero voxels added past the end on each axis
};

/// size^3 block whose voxel (size/2, size/2, size/2) is `center`; zero-padded
/// where it leaves the volume.
BlockCrop crop_nodule_block(const Tensor5<float>& v, const Index3& center, std::int64_t size = 64);

struct IntensityWindow {
  double lo = -1000.0;
  double hi = 400.0;
};

/// Clips to [lo, hi] and maps linearly onto [0, 1].
Tensor5<float> normalize_intensity(const Tensor5<float>& v, const IntensityWindow& w = {});

/// Rounds to {0,1}: any value >= 0.5 becomes 1.
Tensor5<float> binarize_mask(const Tensor5<float>& v);

// ------------------------------------------------------------------ phantoms

enum class PhantomKind { lung, nodule };

std::string phantom_kind_name(PhantomKind k);
PhantomKind parse_phantom_kind(const std::string& s);

/// Phantom images are in Hounsfield-like units; mask is the analytic region.
/// nodule: one sphere (radius uniform in [3, 8]) at a random interior center.
/// lung: two ellipsoids, left and right, with seeded jitter.
Sample make_phantom(PhantomKind kind, const Index3& dims, std::uint64_t seed, const std::string& id = "phantom");

/// Nodule phantom with a fixed center and radius; mask = {v : |v - c| <= r}.
Sample make_nodule_phantom(const Index3& dims, const Index3& center, double radius, std::uint64_t seed,
                           const std::string& id = "phantom");

// ---------------------------------------------------------------- splitting

struct SplitManifest {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
  std::string data_dir;  // where the samples live; empty means "next to the manifest"
};

/// Seeded shuffle, then val = test = floor(n/5), train takes the rest.
SplitManifest split_dataset(const std::vector<std::string>& ids, std::uint64_t seed);

nlohmann::json to_json(const SplitManifest& m);
SplitManifest split_manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const SplitManifest& m);
SplitManifest load_manifest(const std::filesystem::path& path);
/// data_dir resolved against the manifest location.
std::filesystem::path manifest_data_dir(const std::filesystem::path& manifest_path, const SplitManifest& m);

// ------------------------------------------------------------ sample storage

/// Writes `<id>.image.{raw,json}`, `<id>.mask.{raw,json}` and `<id>.meta.json`.
void save_sample(const std::filesystem::path& dir, const Sample& s);
Sample load_sample(const std::filesystem::path& dir, const std::string& id);
/// Ids of every sample stored in `dir`, sorted.
std::vector<std::string> list_samples(const std::filesystem::path& dir);

}  // namespace lungseg
