#include "probebench/embedding.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "probebench/csv.hpp"
#include "probebench/error.hpp"

namespace probebench::embedding {

using nlohmann::json;

std::string to_string(ResampleMode mode) {
  return mode == ResampleMode::resample ? "resample" : "reinterpret";
}

ResampleMode parse_resample_mode(const std::string& text) {
  if (text == "resample") return ResampleMode::resample;
  if (text == "reinterpret") return ResampleMode::reinterpret;
  throw ValidationError("unknown resample mode '" + text + "' (expected resample or reinterpret)");
}

std::size_t ProviderSpec::window_samples() const {
  return static_cast<std::size_t>(std::llround(window_seconds * native_rate));
}

void ProviderSpec::validate() const {
  if (embedding_dim < 1) throw ValidationError("provider '" + name + "': embedding_dim must be >= 1");
  if (!(window_seconds > 0.0)) throw ValidationError("provider '" + name + "': window_seconds must be > 0");
  if (native_rate == 0) throw ValidationError("provider '" + name + "': native_rate must be > 0");
  if (window_samples() == 0) throw ValidationError("provider '" + name + "': window rounds to zero samples");
}

std::optional<ProviderSpec> provider_preset(const std::string& name) {
  using M = ResampleMode;
  if (name == "perch") return ProviderSpec{"perch", 32000, 5.0, 1280, M::resample};
  if (name == "birdnet-2.3") return ProviderSpec{"birdnet-2.3", 48000, 3.0, 1024, M::resample};
  if (name == "birdnet-2.2") return ProviderSpec{"birdnet-2.2", 48000, 3.0, 320, M::resample};
  if (name == "audiomae") return ProviderSpec{"audiomae", 16000, 10.0, 1024, M::resample};
  if (name == "yamnet") return ProviderSpec{"yamnet", 16000, 0.96, 1024, M::resample};
  if (name == "vggish") return ProviderSpec{"vggish", 16000, 0.96, 128, M::resample};
  if (name == "reference") return reference_spec();
  return std::nullopt;
}

ProviderSpec reference_spec(std::uint32_t native_rate, double window_seconds) {
  return ProviderSpec{"reference", native_rate, window_seconds, kReferenceDim, ResampleMode::resample};
}

ProviderSpec identity_spec(std::size_t dim, std::uint32_t native_rate) {
  return ProviderSpec{"identity", native_rate, static_cast<double>(dim) / native_rate, dim,
                      ResampleMode::reinterpret};
}

const EmbeddingVector& EmbeddingTable::at(const std::string& id) const {
  auto it = rows.find(id);
  if (it == rows.end()) {
    throw ValidationError("embedding table '" + provider.name + "' has no row for '" + id + "'");
  }
  return it->second;
}

void EmbeddingTable::validate() const {
  provider.validate();
  for (const auto& [id, v] : rows) {
    if (v.size() != dim()) {
      throw ValidationError("row '" + id + "' has " + std::to_string(v.size()) + " values, table dim is " +
                            std::to_string(dim()));
    }
    for (float x : v) {
      if (!std::isfinite(x)) throw ValidationError("row '" + id + "' contains a non-finite value");
    }
  }
}

std::vector<EmbeddingVector> FrameEmbedder::embed_frames(const std::vector<std::vector<float>>& frames,
                                                         std::uint32_t rate) {
  std::vector<EmbeddingVector> out;
  out.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    try {
      out.push_back(embed_frame(frames[i], rate));
    } catch (const std::exception& e) {
      throw ProviderError("frame " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

EmbeddingVector mean_pool(std::span<const EmbeddingVector> frame_vectors) {
  if (frame_vectors.empty()) throw ValidationError("mean_pool: no frame vectors");
  const std::size_t dim = frame_vectors.front().size();
  std::vector<double> acc(dim, 0.0);
  for (std::size_t f = 0; f < frame_vectors.size(); ++f) {
    if (frame_vectors[f].size() != dim) {
      throw ValidationError("mean_pool: frame " + std::to_string(f) + " has dimension " +
                            std::to_string(frame_vectors[f].size()) + ", expected " + std::to_string(dim));
    }
    for (std::size_t i = 0; i < dim; ++i) acc[i] += frame_vectors[f][i];
  }
  EmbeddingVector out(dim);
  const double n = static_cast<double>(frame_vectors.size());
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(acc[i] / n);
  return out;
}

EmbeddingVector embed_example(FrameEmbedder& provider, const ProviderSpec& spec, const audio::AudioClip& clip,
                              const audio::FrameOptions& frame_options) {
  spec.validate();
  if (clip.samples.empty()) throw ValidationError("embed_example: clip '" + clip.source_id + "' is empty");
  const audio::AudioClip adjusted = spec.resample_mode == ResampleMode::resample
                                        ? audio::resample(clip, spec.native_rate)
                                        : audio::reinterpret_rate(clip, spec.native_rate);
  const audio::FrameSet frames = audio::frame(adjusted, spec.window_samples(), frame_options);
  std::vector<EmbeddingVector> vectors = provider.embed_frames(frames.frames, spec.native_rate);
  if (vectors.size() != frames.frames.size()) {
    throw ProviderError("provider '" + spec.name + "' returned " + std::to_string(vectors.size()) +
                        " vectors for " + std::to_string(frames.frames.size()) + " frames");
  }
  for (std::size_t f = 0; f < vectors.size(); ++f) {
    if (vectors[f].size() != spec.embedding_dim) {
      throw ProviderError("provider '" + spec.name + "' frame " + std::to_string(f) + ": returned dimension " +
                          std::to_string(vectors[f].size()) + ", expected " + std::to_string(spec.embedding_dim));
    }
    for (float x : vectors[f]) {
      if (!std::isfinite(x)) {
        throw ProviderError("provider '" + spec.name + "' frame " + std::to_string(f) + ": non-finite value");
      }
    }
  }
  return mean_pool(vectors);
}

// ---------------------------------------------------------------------------
// Binary table format
//
//   "EMBT" | version u32 | dim u32 | rows u64 | { id_len u16 | id | dim x f32 }* | crc32 u32
//
// All integers and floats little-endian; CRC covers every preceding byte.

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', 'T'};
constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xffu));
}

template <typename T>
T get_le(std::span<const std::uint8_t> b, std::size_t at) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[at + i]) << (8 * i));
  return v;
}

json spec_to_json(const ProviderSpec& spec) {
  return json{{"name", spec.name},
              {"native_rate", spec.native_rate},
              {"window_seconds", spec.window_seconds},
              {"embedding_dim", spec.embedding_dim},
              {"resample_mode", to_string(spec.resample_mode)}};
}

ProviderSpec spec_from_json(const json& j) {
  ProviderSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.native_rate = j.at("native_rate").get<std::uint32_t>();
  spec.window_seconds = j.at("window_seconds").get<double>();
  spec.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  spec.resample_mode = parse_resample_mode(j.at("resample_mode").get<std::string>());
  return spec;
}

std::string sidecar_path(const std::string& path) { return path + ".meta.json"; }

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t at = 0; at < bytes.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, bytes.size() - at);
    crc = ::crc32(crc, bytes.data() + at, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> serialize_table(const EmbeddingTable& table) {
  table.validate();
  if (table.dim() > 0xffffffffu) throw ValidationError("table dim does not fit in u32");
  std::vector<std::uint8_t> out;
  std::size_t total = kHeaderBytes + 4;
  for (const auto& [id, v] : table.rows) total += 2 + id.size() + 4 * v.size();
  out.reserve(total);
  out.insert(out.end(), kMagic, kMagic + 4);
  put_le<std::uint32_t>(out, kTableFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim()));
  put_le<std::uint64_t>(out, table.rows.size());
  for (const auto& [id, v] : table.rows) {
    if (id.size() > 0xffff) throw ValidationError("example id longer than 65535 bytes: '" + id.substr(0, 40) + "...'");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
    for (float x : v) {
      std::uint32_t raw;
      std::memcpy(&raw, &x, sizeof raw);
      put_le<std::uint32_t>(out, raw);
    }
  }
  put_le<std::uint32_t>(out, crc32(out));
  return out;
}

EmbeddingTable parse_table(std::span<const std::uint8_t> bytes, const std::optional<ProviderSpec>& provider_hint) {
  if (bytes.size() < kHeaderBytes + 4) throw FormatError("embedding table truncated: header incomplete");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("embedding table: bad magic");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kTableFormatVersion) {
    throw FormatError("embedding table: unsupported format version " + std::to_string(version));
  }
  const auto dim = get_le<std::uint32_t>(bytes, 8);
  const auto count = get_le<std::uint64_t>(bytes, 12);
  if (dim == 0) throw FormatError("embedding table: dim is zero");
  if (provider_hint && provider_hint->embedding_dim != dim) {
    throw FormatError("embedding table: dim mismatch (header " + std::to_string(dim) + ", metadata " +
                      std::to_string(provider_hint->embedding_dim) + ")");
  }
  const std::size_t payload_end = bytes.size() - 4;

  EmbeddingTable table;
  table.provider = provider_hint.value_or(ProviderSpec{});
  table.provider.embedding_dim = dim;

  std::size_t at = kHeaderBytes;
  const std::size_t row_values = static_cast<std::size_t>(dim) * 4;
  for (std::uint64_t r = 0; r < count; ++r) {
    if (at + 2 > payload_end) throw FormatError("embedding table truncated at row " + std::to_string(r));
    const auto id_len = get_le<std::uint16_t>(bytes, at);
    at += 2;
    if (at + id_len + row_values > payload_end) {
      throw FormatError("embedding table truncated at row " + std::to_string(r));
    }
    std::string id(reinterpret_cast<const char*>(bytes.data() + at), id_len);
    at += id_len;
    EmbeddingVector v(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      const auto raw = get_le<std::uint32_t>(bytes, at + 4 * i);
      std::memcpy(&v[i], &raw, sizeof raw);
    }
    at += row_values;
    if (!table.rows.emplace(std::move(id), std::move(v)).second) {
      throw FormatError("embedding table: duplicate row id at row " + std::to_string(r));
    }
  }
  if (at != payload_end) {
    throw FormatError("embedding table: " + std::to_string(payload_end - at) +
                      " unexpected bytes after declared rows (row count corrupted?)");
  }
  const auto stored = get_le<std::uint32_t>(bytes, payload_end);
  if (stored != crc32(bytes.first(payload_end))) throw FormatError("embedding table: CRC32 mismatch");
  for (const auto& [id, v] : table.rows) {
    for (float x : v) {
      if (!std::isfinite(x)) throw FormatError("embedding table: non-finite value in row '" + id + "'");
    }
  }
  return table;
}

void write_table(const EmbeddingTable& table, const std::string& path) {
  const auto bytes = serialize_table(table);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + path + "'");
  }
  std::ofstream meta(sidecar_path(path), std::ios::trunc);
  if (!meta) throw Error("cannot open '" + sidecar_path(path) + "' for writing");
  meta << spec_to_json(table.provider).dump(2) << '\n';
}

EmbeddingTable read_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open embedding table '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::optional<ProviderSpec> hint;
  if (std::ifstream meta(sidecar_path(path)); meta) {
    try {
      hint = spec_from_json(json::parse(meta));
    } catch (const json::exception& e) {
      throw FormatError("embedding table metadata '" + sidecar_path(path) + "': " + e.what());
    }
  }
  EmbeddingTable table = parse_table(bytes, hint);
  if (!hint) {
    table.provider.name = std::filesystem::path(path).stem().string();
  }
  return table;
}

void export_table_csv(const EmbeddingTable& table, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw Error("cannot open '" + path + "' for writing");
  std::fputs("id", f);
  for (std::size_t i = 0; i < table.dim(); ++i) std::fprintf(f, ",v%zu", i);
  std::fputc('\n', f);
  for (const auto& [id, v] : table.rows) {
    std::fputs(csv_field(id).c_str(), f);
    for (float x : v) std::fprintf(f, ",%.9g", static_cast<double>(x));
    std::fputc('\n', f);
  }
  const bool ok = std::fclose(f) == 0;
  if (!ok) throw Error("write failed for '" + path + "'");
}

EmbeddingTable truncate_dims(const EmbeddingTable& table, std::size_t dims) {
  if (dims < 1 || dims > table.dim()) {
    throw ValidationError("truncate_dims: " + std::to_string(dims) + " outside [1, " + std::to_string(table.dim()) +
                          "]");
  }
  EmbeddingTable out;
  out.provider = table.provider;
  out.provider.embedding_dim = dims;
  for (const auto& [id, v] : table.rows) {
    out.rows.emplace(id, EmbeddingVector(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(dims)));
  }
  return out;
}

}  // namespace probebench::embedding
