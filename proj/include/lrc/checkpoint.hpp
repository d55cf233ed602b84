#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrc/error.hpp"
#include "lrc/nn.hpp"

// LRCK1 layout:
//   "LRCK1\n" | u64 LE manifest length | manifest JSON (UTF-8) | f32 LE payload
// Tensor offsets in the manifest are relative to the start of the payload.

namespace lrc {

inline constexpr char kCheckpointMagic[] = "LRCK1\n";
inline constexpr std::size_t kCheckpointMagicSize = 6;

namespace detail {

inline std::uint32_t float_bits_le(float f) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  return u;
}

inline float float_from_le(std::uint32_t u) {
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  return std::bit_cast<float>(u);
}

inline nlohmann::json topology_json(const DeepFMModel& m) {
  nlohmann::json fields = nlohmann::json::array();
  for (const auto& t : m.tables) {
    nlohmann::json f{{"name", t.field}, {"vocab", t.vocab}, {"dim", t.dim}};
    if (t.tt) {
      f["tt"] = {{"row_factors", t.tt->row_factors},
                 {"col_factors", t.tt->col_factors},
                 {"ranks", t.tt->ranks},
                 {"rows", t.tt->rows},
                 {"cols", t.tt->cols}};
    }
    fields.push_back(f);
  }
  nlohmann::json mlp = nlohmann::json::array();
  for (const auto& l : m.mlp) {
    mlp.push_back({{"name", l.name},
                   {"in", l.in_dim()},
                   {"out", l.out_dim()},
                   {"bias", !l.bias.empty()},
                   {"activation", to_string(l.activation)},
                   {"dropout_rate", l.dropout_rate}});
  }
  return {{"embedding_dim", m.embedding_dim},
          {"n_continuous", m.n_continuous},
          {"fm_enabled", m.fm_enabled},
          {"fused", m.fused},
          {"projections", m.has_projections()},
          {"fields", fields},
          {"mlp", mlp}};
}

inline DeepFMModel model_from_topology(const nlohmann::json& topo) {
  DeepFMModel m;
  m.embedding_dim = topo.at("embedding_dim").get<std::size_t>();
  m.n_continuous = topo.at("n_continuous").get<std::size_t>();
  m.fm_enabled = topo.at("fm_enabled").get<bool>();
  m.fused = topo.at("fused").get<bool>();
  const bool projections = topo.at("projections").get<bool>();
  for (const auto& f : topo.at("fields")) {
    EmbeddingTable<float> t{f.at("name").get<std::string>(), f.at("vocab").get<std::size_t>(),
                            f.at("dim").get<std::size_t>(), Matrix<float>(), std::nullopt};
    if (f.contains("tt")) {
      const auto& j = f.at("tt");
      TTCores<float> tt;
      tt.row_factors = j.at("row_factors").get<std::vector<std::size_t>>();
      tt.col_factors = j.at("col_factors").get<std::vector<std::size_t>>();
      tt.ranks = j.at("ranks").get<std::vector<std::size_t>>();
      tt.rows = j.at("rows").get<std::size_t>();
      tt.cols = j.at("cols").get<std::size_t>();
      if (tt.ranks.size() != tt.row_factors.size() + 1 || tt.col_factors.size() != tt.row_factors.size())
        throw DataError("checkpoint: inconsistent TT topology for field " + t.field);
      for (std::size_t p = 0; p < tt.row_factors.size(); ++p) {
        TTCore<float> c{tt.ranks[p], tt.row_factors[p], tt.col_factors[p], tt.ranks[p + 1], {}};
        c.data.resize(c.rank_in * c.rows * c.cols * c.rank_out);
        tt.cores.push_back(std::move(c));
      }
      t.tt = std::move(tt);
    } else {
      t.weights = Matrix<float>(t.vocab, t.dim);
    }
    m.first_order.emplace_back(t.vocab);
    if (projections) m.projections.push_back({Matrix<float>(m.embedding_dim, t.dim), std::vector<float>(m.embedding_dim)});
    m.tables.push_back(std::move(t));
  }
  for (const auto& l : topo.at("mlp")) {
    const auto out = l.at("out").get<std::size_t>();
    m.mlp.push_back({l.at("name").get<std::string>(), Matrix<float>(out, l.at("in").get<std::size_t>()),
                     std::vector<float>(l.value("bias", true) ? out : 0), activation_from_string(l.at("activation").get<std::string>()),
                     l.at("dropout_rate").get<double>()});
  }
  return m;
}

}  // namespace detail

// Manifest with topology and the tensor list (name, shape, dtype, offset, length).
inline nlohmann::json checkpoint_manifest(const DeepFMModel& model) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& r : param_refs(model)) {
    const std::size_t bytes = r.data.size() * sizeof(float);
    tensors.push_back({{"name", r.info.name}, {"shape", r.info.shape}, {"dtype", "f32"}, {"offset", offset}, {"length", bytes}});
    offset += bytes;
  }
  return {{"format", "LRCK1"}, {"topology", detail::topology_json(model)}, {"tensors", tensors}};
}

// Tensor names and shapes only, for comparing structures.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> tensor_shapes(const nlohmann::json& manifest) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  for (const auto& t : manifest.at("tensors"))
    out.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<std::vector<std::size_t>>());
  return out;
}

inline std::string serialize_checkpoint(const DeepFMModel& model) {
  validate_model(model);
  const std::string manifest = checkpoint_manifest(model).dump();
  std::string out(kCheckpointMagic, kCheckpointMagicSize);
  std::uint64_t len = manifest.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += manifest;
  for (const auto& r : param_refs(model)) {
    for (float f : r.data) {
      const std::uint32_t u = detail::float_bits_le(f);
      char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff), static_cast<char>((u >> 16) & 0xff),
                   static_cast<char>((u >> 24) & 0xff)};
      out.append(b, 4);
    }
  }
  return out;
}

namespace detail {

inline DeepFMModel fill_payload(DeepFMModel m, const nlohmann::json& manifest, const std::string& bytes,
                                std::size_t payload, const std::string& origin) {
  auto refs = param_refs(m);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != refs.size())
    throw DataError(origin + ": manifest lists " + std::to_string(tensors.size()) + " tensors, topology implies " +
                    std::to_string(refs.size()));
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != refs[i].info.name || t.at("shape").get<std::vector<std::size_t>>() != refs[i].info.shape)
      throw DataError(origin + ": tensor " + std::to_string(i) + " (" + t.at("name").get<std::string>() +
                      ") does not match topology (" + refs[i].info.name + ")");
    if (t.at("dtype") != "f32") throw DataError(origin + ": unsupported dtype for " + refs[i].info.name);
    const auto offset = t.at("offset").get<std::size_t>();
    const auto length = t.at("length").get<std::size_t>();
    if (length != refs[i].data.size() * sizeof(float) || payload + offset + length > bytes.size())
      throw DataError(origin + ": tensor " + refs[i].info.name + " exceeds payload");
    const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + payload + offset);
    for (std::size_t j = 0; j < refs[i].data.size(); ++j) {
      const std::uint32_t u = static_cast<std::uint32_t>(src[4 * j]) | (static_cast<std::uint32_t>(src[4 * j + 1]) << 8) |
                              (static_cast<std::uint32_t>(src[4 * j + 2]) << 16) |
                              (static_cast<std::uint32_t>(src[4 * j + 3]) << 24);
      refs[i].data[j] = detail::float_from_le(u);
    }
  }
  validate_model(m);
  return m;
}

}  // namespace detail

inline DeepFMModel deserialize_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  if (bytes.size() < kCheckpointMagicSize + 8 || bytes.compare(0, kCheckpointMagicSize, kCheckpointMagic) != 0)
    throw DataError(origin + ": not an LRCK1 checkpoint (bad magic)");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[kCheckpointMagicSize + i])) << (8 * i);
  const std::size_t header = kCheckpointMagicSize + 8;
  if (len > bytes.size() - header) throw DataError(origin + ": truncated manifest");
  try {
    const auto manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                                                bytes.begin() + static_cast<std::ptrdiff_t>(header + len));
    if (manifest.at("format") != "LRCK1") throw DataError(origin + ": unexpected format tag");
    DeepFMModel m = detail::model_from_topology(manifest.at("topology"));
    return detail::fill_payload(std::move(m), manifest, bytes, header + len, origin);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed manifest: " + e.what());
  }
}


inline void save_checkpoint(const DeepFMModel& model, const std::string& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for checkpoint '" + path + "'");
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline DeepFMModel load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file_bytes(path), path); }

inline nlohmann::json read_checkpoint_manifest(const std::string& path) {
  return checkpoint_manifest(load_checkpoint(path));
}

}  // namespace lrc
