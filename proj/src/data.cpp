#include "lungseg/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "lungseg/errors.hpp"

namespace lungseg {

void Sample::validate() const {
  if (!image.same_shape(mask))
    throw ShapeError("sample " + id + ": image " + shape_to_string(image.shape()) + " vs mask " +
                     shape_to_string(mask.shape()));
  if (image.batch() != 1 || image.channels() != 1)
    throw ShapeError("sample " + id + ": expected a single-channel volume, got " + shape_to_string(image.shape()));
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] != 0.0f && mask[i] != 1.0f) throw ValidationError("sample " + id + ": mask is not binary");
}

// ----------------------------------------------------------------- MetaImage

std::string meta_type_name(MetaElementType t) {
  switch (t) {
    case MetaElementType::met_short: return "MET_SHORT";
    case MetaElementType::met_float: return "MET_FLOAT";
    case MetaElementType::met_uchar: return "MET_UCHAR";
  }
  return "?";
}

MetaElementType parse_meta_type(const std::string& s) {
  if (s == "MET_SHORT") return MetaElementType::met_short;
  if (s == "MET_FLOAT") return MetaElementType::met_float;
  if (s == "MET_UCHAR") return MetaElementType::met_uchar;
  throw ValidationError("unsupported ElementType " + s);
}

namespace {

std::size_t element_bytes(MetaElementType t) {
  return t == MetaElementType::met_short ? 2 : t == MetaElementType::met_float ? 4 : 1;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename U>
std::vector<U> parse_list(const std::string& key, const std::string& value, std::size_t n) {
  std::istringstream ss(value);
  std::vector<U> out;
  U x;
  while (ss >> x) out.push_back(x);
  if (out.size() != n || !ss.eof())
    throw ValidationError("MetaImage key " + key + " needs " + std::to_string(n) + " numbers, got \"" + value + "\"");
  return out;
}

template <typename U>
U from_le(const unsigned char* p) {
  U v;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(&v, p, sizeof(U));
  } else {
    unsigned char tmp[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) tmp[i] = p[sizeof(U) - 1 - i];
    std::memcpy(&v, tmp, sizeof(U));
  }
  return v;
}

template <typename U>
void to_le(U v, unsigned char* p) {
  std::memcpy(p, &v, sizeof(U));
  if constexpr (std::endian::native != std::endian::little) std::reverse(p, p + sizeof(U));
}

}  // namespace

MetaVolume load_mhd(const std::filesystem::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw IoError("cannot open MetaImage header " + header_path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ValidationError(header_path.string() + ": missing MetaImage key " + key);
    return it->second;
  };
  if (need("NDims") != "3") throw ValidationError(header_path.string() + ": only NDims = 3 is supported");
  const auto dims = parse_list<std::int64_t>("DimSize", need("DimSize"), 3);
  for (auto d : dims)
    if (d <= 0) throw ValidationError(header_path.string() + ": DimSize entries must be positive");
  MetaVolume v;
  v.element_type = parse_meta_type(need("ElementType"));
  const std::string data_file = need("ElementDataFile");
  if (data_file == "LOCAL") throw ValidationError(header_path.string() + ": inline data (LOCAL) is not supported");
  for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"}) {
    auto it = kv.find(key);
    if (it != kv.end() && (it->second == "True" || it->second == "true"))
      throw ValidationError(header_path.string() + ": big-endian data is not supported");
  }
  if (auto it = kv.find("CompressedData"); it != kv.end() && (it->second == "True" || it->second == "true"))
    throw ValidationError(header_path.string() + ": compressed data is not supported");
  if (auto it = kv.find("ElementSpacing"); it != kv.end()) {
    const auto s = parse_list<double>("ElementSpacing", it->second, 3);
    std::copy(s.begin(), s.end(), v.spacing.begin());
  }
  for (const char* key : {"Offset", "Origin", "Position"}) {
    if (auto it = kv.find(key); it != kv.end()) {
      const auto o = parse_list<double>(key, it->second, 3);
      std::copy(o.begin(), o.end(), v.origin.begin());
      break;
    }
  }

  const Shape5 shape{1, 1, dims[2], dims[1], dims[0]};
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  const std::size_t bytes = n * element_bytes(v.element_type);
  const auto raw_path = header_path.parent_path() / data_file;
  std::ifstream raw(raw_path, std::ios::binary | std::ios::ate);
  if (!raw) throw IoError("cannot open MetaImage data file " + raw_path.string());
  const auto file_size = static_cast<std::size_t>(raw.tellg());
  if (file_size != bytes)
    throw ValidationError(raw_path.string() + " holds " + std::to_string(file_size) + " bytes, DimSize implies " +
                          std::to_string(bytes));
  raw.seekg(0);
  std::vector<unsigned char> buf(bytes);
  raw.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (!raw) throw IoError("short read from " + raw_path.string());

  v.data = Tensor5<float>(shape);
  for (std::size_t i = 0; i < n; ++i) {
    switch (v.element_type) {
      case MetaElementType::met_short: v.data[i] = from_le<std::int16_t>(&buf[2 * i]); break;
      case MetaElementType::met_float: v.data[i] = from_le<float>(&buf[4 * i]); break;
      case MetaElementType::met_uchar: v.data[i] = buf[i]; break;
    }
  }
  return v;
}

void write_mhd(const std::filesystem::path& header_path, const MetaVolume& v) {
  const auto& t = v.data;
  if (t.batch() != 1 || t.channels() != 1)
    throw ShapeError("write_mhd: expected (1,1,D,H,W), got " + shape_to_string(t.shape()));
  const std::size_t eb = element_bytes(v.element_type);
  std::vector<unsigned char> buf(t.size() * eb);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float x = t[i];
    switch (v.element_type) {
      case MetaElementType::met_short:
        if (x != std::nearbyint(x) || x < -32768.0f || x > 32767.0f)
          throw ValidationError("write_mhd: value " + std::to_string(x) + " does not fit MET_SHORT");
        to_le(static_cast<std::int16_t>(x), &buf[2 * i]);
        break;
      case MetaElementType::met_float: to_le(x, &buf[4 * i]); break;
      case MetaElementType::met_uchar:
        if (x != std::nearbyint(x) || x < 0.0f || x > 255.0f)
          throw ValidationError("write_mhd: value " + std::to_string(x) + " does not fit MET_UCHAR");
        buf[i] = static_cast<unsigned char>(x);
        break;
    }
  }
  auto raw_path = header_path;
  raw_path.replace_extension(".raw");
  std::ofstream raw(raw_path, std::ios::binary);
  if (!raw) throw IoError("cannot write " + raw_path.string());
  raw.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!raw) throw IoError("write failed for " + raw_path.string());

  std::ofstream hdr(header_path);
  if (!hdr) throw IoError("cannot write " + header_path.string());
  hdr.precision(17);
  hdr << "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n"
      << "Offset = " << v.origin[0] << ' ' << v.origin[1] << ' ' << v.origin[2] << '\n'
      << "ElementSpacing = " << v.spacing[0] << ' ' << v.spacing[1] << ' ' << v.spacing[2] << '\n'
      << "DimSize = " << t.width() << ' ' << t.height() << ' ' << t.depth() << '\n'
      << "ElementType = " << meta_type_name(v.element_type) << '\n'
      << "ElementDataFile = " << raw_path.filename().string() << '\n';
  if (!hdr) throw IoError("write failed for " + header_path.string());
}

// ------------------------------------------------------------- preprocessing

Tensor5<float> resize_inplane(const Tensor5<float>& v, std::int64_t out_h, std::int64_t out_w, ResizeKind kind) {
  if (v.empty()) throw ShapeError("resize_inplane: empty input");
  if (out_h < 1 || out_w < 1) throw ValidationError("resize_inplane: target size must be at least 1x1");
  const std::int64_t B = v.batch(), C = v.channels(), D = v.depth(), H = v.height(), W = v.width();
  Tensor5<float> out({B, C, D, out_h, out_w});
  const double sh = static_cast<double>(H) / static_cast<double>(out_h);
  const double sw = static_cast<double>(W) / static_cast<double>(out_w);

  struct Tap {
    std::int64_t i0, i1;
    double f;
  };
  auto taps = [kind](std::int64_t n_out, std::int64_t n_in, double scale) {
    std::vector<Tap> t(static_cast<std::size_t>(n_out));
    for (std::int64_t o = 0; o < n_out; ++o) {
      if (kind == ResizeKind::nearest) {
        const auto i = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor((o + 0.5) * scale)), n_in - 1);
        t[static_cast<std::size_t>(o)] = {i, i, 0.0};
        continue;
      }
      const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<std::int64_t>(std::floor(src));
      const auto i1 = std::min(i0 + 1, n_in - 1);
      t[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto th = taps(out_h, H, sh);
  const auto tw = taps(out_w, W, sw);

  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t y = 0; y < out_h; ++y) {
          const auto& ty = th[static_cast<std::size_t>(y)];
          for (std::int64_t x = 0; x < out_w; ++x) {
            const auto& tx = tw[static_cast<std::size_t>(x)];
            if (kind == ResizeKind::nearest) {
              out(b, c, d, y, x) = v(b, c, d, ty.i0, tx.i0);
              continue;
            }
            const double top = (1.0 - tx.f) * v(b, c, d, ty.i0, tx.i0) + tx.f * v(b, c, d, ty.i0, tx.i1);
            const double bot = (1.0 - tx.f) * v(b, c, d, ty.i1, tx.i0) + tx.f * v(b, c, d, ty.i1, tx.i1);
            out(b, c, d, y, x) = static_cast<float>((1.0 - ty.f) * top + ty.f * bot);
          }
        }
  return out;
}

Tensor5<float> crop_about_median(const Tensor5<float>& v, std::int64_t half_extent) {
  if (half_extent < 0) throw ValidationError("crop_about_median: half_extent must be non-negative");
  const std::int64_t D = v.depth(), keep = 2 * half_extent + 1;
  if (D < keep)
    throw ValidationError("crop_about_median: volume has " + std::to_string(D) + " slices, needs at least " +
                          std::to_string(keep));
  const std::int64_t first = (D - 1) / 2 - half_extent;
  Tensor5<float> out({v.batch(), v.channels(), keep, v.height(), v.width()});
  const std::int64_t plane = v.height() * v.width();
  for (std::int64_t b = 0; b < v.batch(); ++b)
    for (std::int64_t c = 0; c < v.channels(); ++c)
      std::copy_n(v.channel_ptr(b, c) + first * plane, keep * plane, out.channel_ptr(b, c));
  return out;
}

BlockCrop crop_nodule_block(const Tensor5<float>& v, const Index3& center, std::int64_t size) {
  if (size <= 0) throw ValidationError("crop_nodule_block: size must be positive");
  BlockCrop r;
  r.start = {center.d - size / 2, center.h - size / 2, center.w - size / 2};
  const std::array<std::int64_t, 3> dims{v.depth(), v.height(), v.width()};
  const std::array<std::int64_t, 3> st{r.start.d, r.start.h, r.start.w};
  std::array<std::int64_t, 3> before{}, after{};
  for (int a = 0; a < 3; ++a) {
    before[a] = std::clamp<std::int64_t>(-st[a], 0, size);
    after[a] = std::clamp<std::int64_t>(st[a] + size - dims[a], 0, size);
  }
  r.pad_before = {before[0], before[1], before[2]};
  r.pad_after = {after[0], after[1], after[2]};
  r.block = Tensor5<float>({v.batch(), v.channels(), size, size, size});
  for (std::int64_t b = 0; b < v.batch(); ++b)
    for (std::int64_t c = 0; c < v.channels(); ++c)
      for (std::int64_t d = 0; d < size; ++d) {
        const std::int64_t sd = st[0] + d;
        if (sd < 0 || sd >= dims[0]) continue;
        for (std::int64_t h = 0; h < size; ++h) {
          const std::int64_t sh = st[1] + h;
          if (sh < 0 || sh >= dims[1]) continue;
          for (std::int64_t w = 0; w < size; ++w) {
            const std::int64_t sw = st[2] + w;
            if (sw < 0 || sw >= dims[2]) continue;
            r.block(b, c, d, h, w) = v(b, c, sd, sh, sw);
          }
        }
      }
  return r;
}

Tensor5<float> normalize_intensity(const Tensor5<float>& v, const IntensityWindow& w) {
  if (!(w.hi > w.lo)) throw ValidationError("intensity window needs hi > lo");
  Tensor5<float> out(v.shape());
  const double scale = 1.0 / (w.hi - w.lo);
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>((std::clamp(static_cast<double>(v[i]), w.lo, w.hi) - w.lo) * scale);
  return out;
}

Tensor5<float> binarize_mask(const Tensor5<float>& v) {
  Tensor5<float> out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] >= 0.5f ? 1.0f : 0.0f;
  return out;
}

// ------------------------------------------------------------------ phantoms

std::string phantom_kind_name(PhantomKind k) { return k == PhantomKind::lung ? "lung" : "nodule"; }

PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "lung") return PhantomKind::lung;
  if (s == "nodule") return PhantomKind::nodule;
  throw ValidationError("unknown phantom kind \"" + s + "\" (expected lung or nodule)");
}

namespace {

constexpr double kParenchymaHu = -850.0;
constexpr double kSoftTissueHu = 40.0;
constexpr double kNoiseHu = 25.0;

Sample blank_sample(const Index3& dims, const std::string& id) {
  Sample s;
  s.id = id;
  s.image = Tensor5<float>({1, 1, dims.d, dims.h, dims.w});
  s.mask = Tensor5<float>(s.image.shape());
  return s;
}

void add_noise(Tensor5<float>& img, Rng& rng) {
  std::normal_distribution<double> noise(0.0, kNoiseHu);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(img[i] + noise(rng));
}

}  // namespace

Sample make_nodule_phantom(const Index3& dims, const Index3& center, double radius, std::uint64_t seed,
                           const std::string& id) {
  if (dims.d < 1 || dims.h < 1 || dims.w < 1) throw ValidationError("phantom dims must be positive");
  if (!(radius > 0.0)) throw ValidationError("nodule radius must be positive");
  const std::array<std::int64_t, 3> c{center.d, center.h, center.w}, n{dims.d, dims.h, dims.w};
  for (int a = 0; a < 3; ++a)
    if (c[a] - radius < 0.0 || c[a] + radius > static_cast<double>(n[a] - 1))
      throw ValidationError("nodule of radius " + std::to_string(radius) + " at " + index3_to_string(center) +
                            " does not fit in " + index3_to_string(dims));
  Sample s = blank_sample(dims, id);
  const double r2 = radius * radius;
  for (std::int64_t d = 0; d < dims.d; ++d)
    for (std::int64_t h = 0; h < dims.h; ++h)
      for (std::int64_t w = 0; w < dims.w; ++w) {
        const double dd = static_cast<double>(d - center.d), dh = static_cast<double>(h - center.h),
                     dw = static_cast<double>(w - center.w);
        const bool inside = dd * dd + dh * dh + dw * dw <= r2;
        s.mask(0, 0, d, h, w) = inside ? 1.0f : 0.0f;
        s.image(0, 0, d, h, w) = static_cast<float>(inside ? kSoftTissueHu : kParenchymaHu);
      }
  Rng rng(seed);
  add_noise(s.image, rng);
  return s;
}

Sample make_phantom(PhantomKind kind, const Index3& dims, std::uint64_t seed, const std::string& id) {
  Rng rng(seed);
  if (kind == PhantomKind::nodule) {
    const std::int64_t smallest = std::min({dims.d, dims.h, dims.w});
    if (smallest < 17) throw ValidationError("nodule phantom needs every dim >= 17, got " + index3_to_string(dims));
    const double radius = std::uniform_real_distribution<double>(3.0, 8.0)(rng);
    const auto lo = static_cast<std::int64_t>(std::ceil(radius));
    auto pick = [&](std::int64_t n) { return std::uniform_int_distribution<std::int64_t>(lo, n - 1 - lo)(rng); };
    const Index3 c{pick(dims.d), pick(dims.h), pick(dims.w)};
    return make_nodule_phantom(dims, c, radius, rng(), id);
  }

  if (std::min({dims.d, dims.h, dims.w}) < 8)
    throw ValidationError("lung phantom needs every dim >= 8, got " + index3_to_string(dims));
  std::uniform_real_distribution<double> jitter(0.9, 1.1);
  std::uniform_real_distribution<double> shift(-0.02, 0.02);
  struct Ellipsoid {
    double cd, ch, cw, ad, ah, aw;
  };
  std::array<Ellipsoid, 2> lobes;
  for (int side = 0; side < 2; ++side) {
    auto& e = lobes[static_cast<std::size_t>(side)];
    e.cd = 0.5 * static_cast<double>(dims.d - 1);
    e.ch = 0.5 * static_cast<double>(dims.h - 1) * jitter(rng);
    e.cw = ((side == 0 ? 0.27 : 0.73) + shift(rng)) * static_cast<double>(dims.w - 1);
    e.ad = 0.4 * static_cast<double>(dims.d) * jitter(rng);
    e.ah = 0.33 * static_cast<double>(dims.h) * jitter(rng);
    e.aw = 0.19 * static_cast<double>(dims.w) * jitter(rng);
  }
  Sample s = blank_sample(dims, id);
  for (std::int64_t d = 0; d < dims.d; ++d)
    for (std::int64_t h = 0; h < dims.h; ++h)
      for (std::int64_t w = 0; w < dims.w; ++w) {
        bool inside = false;
        for (const auto& e : lobes) {
          const double x = (static_cast<double>(d) - e.cd) / e.ad, y = (static_cast<double>(h) - e.ch) / e.ah,
                       z = (static_cast<double>(w) - e.cw) / e.aw;
          inside = inside || x * x + y * y + z * z <= 1.0;
        }
        s.mask(0, 0, d, h, w) = inside ? 1.0f : 0.0f;
        s.image(0, 0, d, h, w) = static_cast<float>(inside ? kParenchymaHu : kSoftTissueHu);
      }
  add_noise(s.image, rng);
  return s;
}

// ---------------------------------------------------------------- splitting

SplitManifest split_dataset(const std::vector<std::string>& ids, std::uint64_t seed) {
  if (ids.empty()) throw ValidationError("split_dataset: empty id list");
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size())
    throw ValidationError("split_dataset: duplicate ids");
  std::vector<std::string> order = ids;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_hold = ids.size() / 5;
  const std::size_t n_train = ids.size() - 2 * n_hold;
  SplitManifest m;
  m.seed = seed;
  m.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  m.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_hold));
  m.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_hold), order.end());
  return m;
}

nlohmann::json to_json(const SplitManifest& m) {
  return {{"seed", m.seed}, {"data_dir", m.data_dir}, {"train", m.train}, {"val", m.val}, {"test", m.test}};
}

SplitManifest split_manifest_from_json(const nlohmann::json& j) {
  try {
    SplitManifest m;
    m.seed = j.value("seed", std::uint64_t{0});
    m.data_dir = j.value("data_dir", std::string());
    m.train = j.at("train").get<std::vector<std::string>>();
    m.val = j.at("val").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    std::set<std::string> seen;
    for (const auto* part : {&m.train, &m.val, &m.test})
      for (const auto& id : *part)
        if (!seen.insert(id).second) throw ValidationError("split manifest lists id " + id + " twice");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("split manifest: ") + e.what());
  }
}

void save_manifest(const std::filesystem::path& path, const SplitManifest& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
}

SplitManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return split_manifest_from_json(j);
}

std::filesystem::path manifest_data_dir(const std::filesystem::path& manifest_path, const SplitManifest& m) {
  const auto base = manifest_path.parent_path();
  if (m.data_dir.empty()) return base.empty() ? std::filesystem::path(".") : base;
  const std::filesystem::path d(m.data_dir);
  return d.is_absolute() ? d : base / d;
}

// ------------------------------------------------------------ sample storage

void save_sample(const std::filesystem::path& dir, const Sample& s) {
  s.validate();
  if (s.id.empty() || s.id.find_first_of("/\\") != std::string::npos)
    throw ValidationError("sample id \"" + s.id + "\" is not a valid file name");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_tensor(s.image, dir / (s.id + ".image"));
  save_tensor(s.mask, dir / (s.id + ".mask"));
  std::ofstream meta(dir / (s.id + ".meta.json"));
  if (!meta) throw IoError("cannot write metadata for sample " + s.id);
  meta << nlohmann::json{{"id", s.id}, {"spacing", s.spacing}, {"origin", s.origin}}.dump(2) << '\n';
}

Sample load_sample(const std::filesystem::path& dir, const std::string& id) {
  Sample s;
  s.id = id;
  try {
    s.image = load_tensor<float>(dir / (id + ".image"));
    s.mask = load_tensor<float>(dir / (id + ".mask"));
    std::ifstream meta(dir / (id + ".meta.json"));
    if (meta) {
      const auto j = nlohmann::json::parse(meta);
      s.spacing = j.value("spacing", s.spacing);
      s.origin = j.value("origin", s.origin);
    }
  } catch (const IoError& e) {
    throw IoError("sample " + id + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw IoError("sample " + id + ": " + e.what());
  }
  s.validate();
  return s;
}

std::vector<std::string> list_samples(const std::filesystem::path& dir) {
  std::error_code ec;
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    const std::string suffix = ".meta.json";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace lungseg
