#include "paddit/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "paddit/errors.hpp"

namespace paddit {
namespace detail {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error("read failure on " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("write failure on " + path.string());
}

// Fixed gzip framing (zero mtime, unknown OS) so byte output depends only on
// content; raw deflate body with crc32/isize trailer per RFC 1952.
std::vector<std::uint8_t> gzip_compress(const std::vector<std::uint8_t>& bytes) {
  z_stream strm{};
  if (deflateInit2(&strm, 6, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw io_error("deflate initialization failed");

  std::vector<std::uint8_t> out = {0x1f, 0x8b, 0x08, 0x00, 0x00, 0x00,
                                   0x00, 0x00, 0x00, 0xff};
  strm.next_in = const_cast<Bytef*>(bytes.data());
  strm.avail_in = static_cast<uInt>(bytes.size());
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  do {
    strm.next_out = chunk;
    strm.avail_out = sizeof(chunk);
    rc = deflate(&strm, Z_FINISH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      deflateEnd(&strm);
      throw io_error("deflate failed");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - strm.avail_out));
  } while (rc != Z_STREAM_END);
  deflateEnd(&strm);

  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, bytes.data(), static_cast<uInt>(bytes.size())));
  const std::uint32_t isize = static_cast<std::uint32_t>(bytes.size());
  for (std::uint32_t word : {crc, isize})
    for (int b = 0; b < 4; ++b)
      out.push_back(static_cast<std::uint8_t>((word >> (8 * b)) & 0xff));
  return out;
}

std::vector<std::uint8_t> gzip_decompress(const std::vector<std::uint8_t>& bytes) {
  z_stream strm{};
  if (inflateInit2(&strm, 15 + 32) != Z_OK)
    throw io_error("inflate initialization failed");
  strm.next_in = const_cast<Bytef*>(bytes.data());
  strm.avail_in = static_cast<uInt>(bytes.size());

  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  do {
    strm.next_out = chunk;
    strm.avail_out = sizeof(chunk);
    rc = inflate(&strm, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&strm);
      throw data_error("corrupt gzip stream");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - strm.avail_out));
  } while (rc != Z_STREAM_END && strm.avail_in > 0);
  inflateEnd(&strm);
  if (rc != Z_STREAM_END) throw data_error("corrupt gzip stream: unexpected end");
  return out;
}

std::vector<std::uint8_t> read_file_maybe_gzip(const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b)
    return gzip_decompress(bytes);
  return bytes;
}

namespace {

using nlohmann::json;

constexpr char kRawFormatTag[] = "paddit-raw-v1";

bool is_nifti_path(const std::filesystem::path& path) {
  const std::string name = path.filename().string();
  return name.ends_with(".nii") || name.ends_with(".nii.gz");
}

bool is_raw_path(const std::filesystem::path& path) {
  return path.extension() == ".json";
}

// little-endian scalar packing
template <typename T>
void pack(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::uint64_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(T); ++b)
    out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xff));
}

template <typename T>
T unpack(const std::uint8_t* p) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::uint64_t>>;
  U bits = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b)
    bits |= static_cast<U>(p[b]) << (8 * b);
  return std::bit_cast<T>(bits);
}

// ---------------------------------------------------------------- raw format

struct RawHeader {
  std::vector<int> dims;
  std::vector<double> spacing;
  std::vector<double> origin;
  std::string dtype;
  std::filesystem::path data_path;
};

RawHeader parse_raw_header(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw data_error("malformed raw header " + path.string() + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kRawFormatTag)
      throw data_error("unsupported raw format tag in " + path.string());
    RawHeader h;
    h.dims = j.at("dims").get<std::vector<int>>();
    h.spacing = j.at("spacing").get<std::vector<double>>();
    h.origin = j.at("origin").get<std::vector<double>>();
    h.dtype = j.at("dtype").get<std::string>();
    h.data_path = path.parent_path() / j.at("data").get<std::string>();
    if (h.dims.size() != h.spacing.size() || h.dims.size() != h.origin.size())
      throw data_error("inconsistent axis counts in " + path.string());
    if (h.dims.size() != 2 && h.dims.size() != 3)
      throw data_error("unsupported dimension " + std::to_string(h.dims.size()) +
                       " in " + path.string() + " (need 2 or 3)");
    return h;
  } catch (const json::exception& e) {
    throw data_error("malformed raw header " + path.string() + ": " + e.what());
  }
}

template <std::size_t N>
GridGeometry<N> geometry_from_raw(const RawHeader& h,
                                  const std::filesystem::path& path) {
  if (h.dims.size() != N)
    throw data_error(path.string() + " stores a " +
                     std::to_string(h.dims.size()) + "D volume, expected " +
                     std::to_string(N) + "D");
  GridGeometry<N> g;
  for (std::size_t a = 0; a < N; ++a) {
    g.dims[a] = h.dims[static_cast<std::size_t>(a)];
    g.spacing[a] = h.spacing[static_cast<std::size_t>(a)];
    g.origin[a] = h.origin[static_cast<std::size_t>(a)];
  }
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw data_error("invalid geometry in " + path.string() + ": " + e.what());
  }
  return g;
}

std::vector<std::uint8_t> read_payload(const std::filesystem::path& path,
                                       std::size_t expected) {
  const std::vector<std::uint8_t> bytes = read_file(path);
  if (bytes.size() < expected)
    throw data_error(path.string() + " truncated at byte " +
                     std::to_string(bytes.size()) + ": expected " +
                     std::to_string(expected) + " bytes");
  return bytes;
}

template <std::size_t N>
void save_raw_payload(const GridGeometry<N>& g, const std::string& dtype,
                      const std::vector<std::uint8_t>& payload,
                      const std::filesystem::path& sidecar) {
  std::filesystem::path data_path = sidecar;
  data_path.replace_extension(".bin");
  json j;
  j["format"] = kRawFormatTag;
  j["dims"] = std::vector<int>(g.dims.begin(), g.dims.end());
  j["spacing"] = std::vector<double>(g.spacing.begin(), g.spacing.end());
  j["origin"] = std::vector<double>(g.origin.begin(), g.origin.end());
  j["dtype"] = dtype;
  j["data"] = data_path.filename().string();
  const std::string text = j.dump(2) + "\n";
  write_file(sidecar, std::vector<std::uint8_t>(text.begin(), text.end()));
  write_file(data_path, payload);
}

// --------------------------------------------------------------- NIfTI-1

struct NiftiHeader {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must pack to 348 bytes");

enum NiftiType : std::int16_t {
  kNiftiUint8 = 2,
  kNiftiInt16 = 4,
  kNiftiInt32 = 8,
  kNiftiFloat32 = 16,
  kNiftiFloat64 = 64,
  kNiftiInt8 = 256,
  kNiftiUint16 = 512,
  kNiftiUint32 = 768,
};

template <typename T>
void swap_bytes(T& value) {
  auto* p = reinterpret_cast<std::uint8_t*>(&value);
  std::reverse(p, p + sizeof(T));
}

void swap_header(NiftiHeader& h) {
  swap_bytes(h.sizeof_hdr);
  swap_bytes(h.extents);
  swap_bytes(h.session_error);
  for (auto& d : h.dim) swap_bytes(d);
  swap_bytes(h.intent_p1);
  swap_bytes(h.intent_p2);
  swap_bytes(h.intent_p3);
  swap_bytes(h.intent_code);
  swap_bytes(h.datatype);
  swap_bytes(h.bitpix);
  swap_bytes(h.slice_start);
  for (auto& p : h.pixdim) swap_bytes(p);
  swap_bytes(h.vox_offset);
  swap_bytes(h.scl_slope);
  swap_bytes(h.scl_inter);
  swap_bytes(h.slice_end);
  swap_bytes(h.cal_max);
  swap_bytes(h.cal_min);
  swap_bytes(h.slice_duration);
  swap_bytes(h.toffset);
  swap_bytes(h.glmax);
  swap_bytes(h.glmin);
  swap_bytes(h.qform_code);
  swap_bytes(h.sform_code);
  swap_bytes(h.quatern_b);
  swap_bytes(h.quatern_c);
  swap_bytes(h.quatern_d);
  swap_bytes(h.qoffset_x);
  swap_bytes(h.qoffset_y);
  swap_bytes(h.qoffset_z);
  for (auto& s : h.srow_x) swap_bytes(s);
  for (auto& s : h.srow_y) swap_bytes(s);
  for (auto& s : h.srow_z) swap_bytes(s);
}

struct NiftiVolume {
  std::vector<int> dims;
  std::vector<double> spacing;
  std::vector<double> origin;
  std::int16_t datatype = 0;
  double slope = 1.0;
  double inter = 0.0;
  std::vector<std::uint8_t> payload;  // element bytes, native order after swap
  bool swapped = false;
};

int element_size(std::int16_t datatype, const std::filesystem::path& path) {
  switch (datatype) {
    case kNiftiUint8:
    case kNiftiInt8:
      return 1;
    case kNiftiInt16:
    case kNiftiUint16:
      return 2;
    case kNiftiInt32:
    case kNiftiUint32:
    case kNiftiFloat32:
      return 4;
    case kNiftiFloat64:
      return 8;
    default:
      throw data_error("unsupported NIfTI datatype " + std::to_string(datatype) +
                       " in " + path.string());
  }
}

NiftiVolume parse_nifti(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = read_file_maybe_gzip(path);
  if (bytes.size() < sizeof(NiftiHeader))
    throw data_error(path.string() + " truncated at byte " +
                     std::to_string(bytes.size()) + ": expected at least " +
                     std::to_string(sizeof(NiftiHeader)) + " header bytes");
  NiftiHeader h;
  std::memcpy(&h, bytes.data(), sizeof(h));
  NiftiVolume v;
  if (h.sizeof_hdr != 348) {
    swap_header(h);
    v.swapped = true;
    if (h.sizeof_hdr != 348)
      throw data_error("malformed NIfTI header in " + path.string() +
                       " (sizeof_hdr != 348)");
  }
  if (!((h.magic[0] == 'n' && (h.magic[1] == '+' || h.magic[1] == 'i') &&
         h.magic[2] == '1' && h.magic[3] == '\0')))
    throw data_error("malformed NIfTI header in " + path.string() +
                     " (bad magic)");
  if (h.magic[1] == 'i')
    throw data_error(path.string() +
                     ": two-file NIfTI (.hdr/.img) is not supported");

  if (h.dim[0] < 1 || h.dim[0] > 7)
    throw data_error("malformed NIfTI header in " + path.string() +
                     " (dim[0] out of range)");
  std::vector<int> dims;
  for (int a = 1; a <= h.dim[0]; ++a) dims.push_back(h.dim[a]);
  while (dims.size() > 2 && dims.back() == 1) dims.pop_back();
  if (dims.size() != 2 && dims.size() != 3)
    throw data_error("unsupported dimension " + std::to_string(dims.size()) +
                     " in " + path.string() + " (need 2 or 3)");
  for (std::size_t a = 0; a < dims.size(); ++a) {
    v.dims.push_back(dims[a]);
    v.spacing.push_back(h.pixdim[a + 1] != 0.0f
                            ? std::abs(static_cast<double>(h.pixdim[a + 1]))
                            : 1.0);
  }
  v.origin.assign(dims.size(), 0.0);
  if (h.sform_code > 0) {
    const float off[3] = {h.srow_x[3], h.srow_y[3], h.srow_z[3]};
    for (std::size_t a = 0; a < dims.size(); ++a) v.origin[a] = off[a];
  } else if (h.qform_code > 0) {
    const float off[3] = {h.qoffset_x, h.qoffset_y, h.qoffset_z};
    for (std::size_t a = 0; a < dims.size(); ++a) v.origin[a] = off[a];
  }

  v.datatype = h.datatype;
  const int esize = element_size(h.datatype, path);
  v.slope = (h.scl_slope == 0.0f) ? 1.0 : static_cast<double>(h.scl_slope);
  v.inter = (h.scl_slope == 0.0f) ? 0.0 : static_cast<double>(h.scl_inter);

  std::size_t count = 1;
  for (int d : v.dims) {
    if (d < 1)
      throw data_error("malformed NIfTI header in " + path.string() +
                       " (non-positive dim)");
    count *= static_cast<std::size_t>(d);
  }
  const auto offset = static_cast<std::size_t>(h.vox_offset);
  if (h.vox_offset < 348.0f)
    throw data_error("malformed NIfTI header in " + path.string() +
                     " (vox_offset < 348)");
  const std::size_t need = offset + count * static_cast<std::size_t>(esize);
  if (bytes.size() < need)
    throw data_error(path.string() + " truncated at byte " +
                     std::to_string(bytes.size()) + ": expected " +
                     std::to_string(need) + " bytes");
  v.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                   bytes.begin() + static_cast<std::ptrdiff_t>(need));
  if (v.swapped && esize > 1) {
    for (std::size_t i = 0; i < count; ++i)
      std::reverse(v.payload.begin() + static_cast<std::ptrdiff_t>(i * esize),
                   v.payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * esize));
  }
  return v;
}

double element_as_double(const NiftiVolume& v, std::size_t i) {
  const std::uint8_t* p = v.payload.data();
  switch (v.datatype) {
    case kNiftiUint8:
      return static_cast<double>(p[i]);
    case kNiftiInt8:
      return static_cast<double>(static_cast<std::int8_t>(p[i]));
    case kNiftiInt16:
      return static_cast<double>(unpack<std::int16_t>(p + 2 * i));
    case kNiftiUint16:
      return static_cast<double>(unpack<std::uint16_t>(p + 2 * i));
    case kNiftiInt32:
      return static_cast<double>(unpack<std::int32_t>(p + 4 * i));
    case kNiftiUint32:
      return static_cast<double>(unpack<std::uint32_t>(p + 4 * i));
    case kNiftiFloat32:
      return static_cast<double>(unpack<float>(p + 4 * i));
    case kNiftiFloat64:
      return unpack<double>(p + 8 * i);
    default:
      throw data_error("unsupported NIfTI datatype");
  }
}

template <std::size_t N>
GridGeometry<N> geometry_from_nifti(const NiftiVolume& v,
                                    const std::filesystem::path& path) {
  if (v.dims.size() != N)
    throw data_error(path.string() + " stores a " +
                     std::to_string(v.dims.size()) + "D volume, expected " +
                     std::to_string(N) + "D");
  GridGeometry<N> g;
  for (std::size_t a = 0; a < N; ++a) {
    g.dims[a] = v.dims[static_cast<std::size_t>(a)];
    g.spacing[a] = v.spacing[static_cast<std::size_t>(a)];
    g.origin[a] = v.origin[static_cast<std::size_t>(a)];
  }
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw data_error("invalid geometry in " + path.string() + ": " + e.what());
  }
  return g;
}

template <std::size_t N>
NiftiHeader make_nifti_header(const GridGeometry<N>& g, std::int16_t datatype,
                              std::int16_t bitpix) {
  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = static_cast<std::int16_t>(N);
  for (int a = 1; a < 8; ++a) {
    h.dim[a] = 1;
    h.pixdim[a] = 0.0f;
  }
  h.pixdim[0] = 0.0f;
  for (std::size_t a = 0; a < N; ++a) {
    h.dim[a + 1] = static_cast<std::int16_t>(g.dims[a]);
    h.pixdim[a + 1] = static_cast<float>(g.spacing[a]);
  }
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.sform_code = 1;
  h.qform_code = 0;
  float* rows[3] = {h.srow_x, h.srow_y, h.srow_z};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) rows[r][c] = 0.0f;
  for (std::size_t a = 0; a < 3; ++a) {
    rows[a][a] = (a < N) ? static_cast<float>(g.spacing[a]) : 1.0f;
    rows[a][3] = (a < N) ? static_cast<float>(g.origin[a]) : 0.0f;
  }
  h.magic[0] = 'n';
  h.magic[1] = '+';
  h.magic[2] = '1';
  h.magic[3] = '\0';
  return h;
}

void write_nifti_bytes(const NiftiHeader& h,
                       const std::vector<std::uint8_t>& payload,
                       const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes(sizeof(NiftiHeader));
  std::memcpy(bytes.data(), &h, sizeof(h));
  bytes.push_back(0);  // 4-byte extension flag: none
  bytes.push_back(0);
  bytes.push_back(0);
  bytes.push_back(0);
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  if (path.filename().string().ends_with(".gz"))
    write_file(path, gzip_compress(bytes));
  else
    write_file(path, bytes);
}

}  // namespace
}  // namespace detail

int volume_rank(const std::filesystem::path& path) {
  using namespace detail;
  if (is_raw_path(path)) return static_cast<int>(parse_raw_header(path).dims.size());
  if (is_nifti_path(path)) return static_cast<int>(parse_nifti(path).dims.size());
  throw data_error("unsupported volume format: " + path.string());
}

template <std::size_t N>
ScalarVolume<N> load_image(const std::filesystem::path& path) {
  using namespace detail;
  if (is_raw_path(path)) {
    const RawHeader h = parse_raw_header(path);
    const GridGeometry<N> g = geometry_from_raw<N>(h, path);
    if (h.dtype != "float32")
      throw data_error(path.string() + " has dtype " + h.dtype +
                       ", expected float32 for an image");
    const std::size_t count = g.voxel_count();
    const std::vector<std::uint8_t> payload = read_payload(h.data_path, count * 4);
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i)
      values[i] = static_cast<double>(unpack<float>(payload.data() + 4 * i));
    try {
      return ScalarVolume<N>(g, std::move(values));
    } catch (const std::invalid_argument& e) {
      throw data_error(path.string() + ": " + e.what());
    }
  }
  if (is_nifti_path(path)) {
    const NiftiVolume v = parse_nifti(path);
    const GridGeometry<N> g = geometry_from_nifti<N>(v, path);
    const std::size_t count = g.voxel_count();
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i)
      values[i] = v.slope * element_as_double(v, i) + v.inter;
    try {
      return ScalarVolume<N>(g, std::move(values));
    } catch (const std::invalid_argument& e) {
      throw data_error(path.string() + ": " + e.what());
    }
  }
  throw data_error("unsupported volume format: " + path.string());
}

template <std::size_t N>
LabelVolume<N> load_labels(const std::filesystem::path& path) {
  using namespace detail;
  if (is_raw_path(path)) {
    const RawHeader h = parse_raw_header(path);
    const GridGeometry<N> g = geometry_from_raw<N>(h, path);
    if (h.dtype != "uint16")
      throw data_error(path.string() + " has dtype " + h.dtype +
                       ", expected uint16 for labels");
    const std::size_t count = g.voxel_count();
    const std::vector<std::uint8_t> payload = read_payload(h.data_path, count * 2);
    std::vector<std::int32_t> labels(count);
    for (std::size_t i = 0; i < count; ++i)
      labels[i] = static_cast<std::int32_t>(unpack<std::uint16_t>(payload.data() + 2 * i));
    return LabelVolume<N>(g, std::move(labels));
  }
  if (is_nifti_path(path)) {
    const NiftiVolume v = parse_nifti(path);
    const GridGeometry<N> g = geometry_from_nifti<N>(v, path);
    if (v.datatype == kNiftiFloat32 || v.datatype == kNiftiFloat64)
      throw data_error(path.string() +
                       " stores floating-point data, expected integer labels");
    if (v.slope != 1.0 || v.inter != 0.0)
      throw data_error(path.string() +
                       " applies intensity scaling, not valid for labels");
    const std::size_t count = g.voxel_count();
    std::vector<std::int32_t> labels(count);
    for (std::size_t i = 0; i < count; ++i) {
      const double value = element_as_double(v, i);
      labels[i] = static_cast<std::int32_t>(value);
      if (static_cast<double>(labels[i]) != value || labels[i] < 0)
        throw data_error(path.string() + ": non-label value " +
                         std::to_string(value) + " at element " +
                         std::to_string(i));
    }
    return LabelVolume<N>(g, std::move(labels));
  }
  throw data_error("unsupported volume format: " + path.string());
}

template <std::size_t N>
void save_image(const ScalarVolume<N>& vol, const std::filesystem::path& path) {
  using namespace detail;
  const std::size_t count = vol.size();
  std::vector<std::uint8_t> payload;
  payload.reserve(count * 4);
  for (std::size_t i = 0; i < count; ++i)
    pack(payload, static_cast<float>(vol[i]));
  if (is_raw_path(path)) {
    save_raw_payload(vol.geometry(), "float32", payload, path);
    return;
  }
  if (is_nifti_path(path)) {
    write_nifti_bytes(make_nifti_header(vol.geometry(), kNiftiFloat32, 32),
                      payload, path);
    return;
  }
  throw data_error("unsupported volume format: " + path.string());
}

template <std::size_t N>
void save_labels(const LabelVolume<N>& vol, const std::filesystem::path& path) {
  using namespace detail;
  const std::size_t count = vol.size();
  std::vector<std::uint8_t> payload;
  payload.reserve(count * 2);
  for (std::size_t i = 0; i < count; ++i) {
    if (vol[i] > 65535)
      throw data_error("label " + std::to_string(vol[i]) +
                       " exceeds the uint16 range of " + path.string());
    pack(payload, static_cast<std::uint16_t>(vol[i]));
  }
  if (is_raw_path(path)) {
    save_raw_payload(vol.geometry(), "uint16", payload, path);
    return;
  }
  if (is_nifti_path(path)) {
    write_nifti_bytes(make_nifti_header(vol.geometry(), kNiftiUint16, 16),
                      payload, path);
    return;
  }
  throw data_error("unsupported volume format: " + path.string());
}

template ScalarVolume<2> load_image<2>(const std::filesystem::path&);
template ScalarVolume<3> load_image<3>(const std::filesystem::path&);
template LabelVolume<2> load_labels<2>(const std::filesystem::path&);
template LabelVolume<3> load_labels<3>(const std::filesystem::path&);
template void save_image<2>(const ScalarVolume<2>&, const std::filesystem::path&);
template void save_image<3>(const ScalarVolume<3>&, const std::filesystem::path&);
template void save_labels<2>(const LabelVolume<2>&, const std::filesystem::path&);
template void save_labels<3>(const LabelVolume<3>&, const std::filesystem::path&);

}  // namespace paddit
