#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "pivotnmt/errors.hpp"
#include "pivotnmt/model/ar_model.hpp"
#include "pivotnmt/model/cmlm_model.hpp"
#include "pivotnmt/numerics/rng.hpp"

namespace pivotnmt::model {

// Container layout:
//   "PVNMTCK1\n"
//   uint64 little-endian byte length of the JSON header
//   JSON header {kind, config, vocab_fingerprint, rng, step, parameters:[{name, shape}]}
//   every parameter's values as little-endian float64, in header order
inline constexpr char kCheckpointMagic[] = "PVNMTCK1\n";

struct CheckpointMeta {
    std::string kind;
    TransformerConfig config;
    std::string vocab_fingerprint;
    std::string rng{nn::Rng::kAlgorithm};
    std::uint64_t step = 0;
    nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("checkpoint: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f64_le(std::ostream& out, std::span<const double> values) {
    std::vector<unsigned char> buf(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int k = 0; k < 8; ++k) buf[i * 8 + static_cast<std::size_t>(k)] = static_cast<unsigned char>(bits >> (8 * k));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline void read_f64_le(std::istream& in, std::span<double> values) {
    std::vector<unsigned char> buf(values.size() * 8);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw IoError("checkpoint: truncated parameter data");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(buf[i * 8 + static_cast<std::size_t>(k)]) << (8 * k);
        values[i] = std::bit_cast<double>(bits);
    }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParameterList& params, const CheckpointMeta& meta) {
    nlohmann::json header{{"kind", meta.kind},
                          {"config", meta.config},
                          {"vocab_fingerprint", meta.vocab_fingerprint},
                          {"rng", meta.rng},
                          {"step", meta.step},
                          {"extra", meta.extra}};
    auto& list = header["parameters"] = nlohmann::json::array();
    for (const auto& [name, t] : params.entries()) list.push_back({{"name", name}, {"shape", t.shape()}});
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    detail::write_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : params.entries()) detail::write_f64_le(out, t.data());
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

struct CheckpointReader {
    CheckpointMeta meta;
    nlohmann::json header;
    std::ifstream in;

    explicit CheckpointReader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw IoError("checkpoint: cannot read " + path);
        char magic[sizeof(kCheckpointMagic) - 1];
        if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
            throw InputError("checkpoint: " + path + " is not a checkpoint file");
        }
        const std::uint64_t n = detail::read_u64_le(in);
        if (n > (1u << 26)) throw InputError("checkpoint: implausible header size");
        std::string text(n, '\0');
        if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw IoError("checkpoint: truncated header");
        try {
            header = nlohmann::json::parse(text);
            meta.kind = header.at("kind").get<std::string>();
            meta.config = header.at("config").get<TransformerConfig>();
            meta.vocab_fingerprint = header.at("vocab_fingerprint").get<std::string>();
            meta.rng = header.at("rng").get<std::string>();
            meta.step = header.at("step").get<std::uint64_t>();
            meta.extra = header.value("extra", nlohmann::json::object());
        } catch (const nlohmann::json::exception& e) {
            throw InputError(std::string("checkpoint: malformed header: ") + e.what());
        }
    }

    void read_into(ParameterList& params) {
        const auto& list = header.at("parameters");
        const auto& entries = params.entries();
        if (list.size() != entries.size()) throw ConfigError("checkpoint: parameter count differs from model");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& [name, t] = entries[i];
            if (list[i].at("name").get<std::string>() != name || list[i].at("shape").get<nn::Shape>() != t.shape()) {
                throw ConfigError("checkpoint: parameter " + name + " does not match the model layout");
            }
            Tensor target = t;
            detail::read_f64_le(in, target.values());
        }
    }
};

inline CheckpointMeta read_checkpoint_meta(const std::string& path) { return CheckpointReader(path).meta; }

template <typename Model>
void save_model(const std::string& path, const Model& model, const std::string& vocab_fingerprint,
                std::uint64_t step = 0, nlohmann::json extra = nlohmann::json::object()) {
    CheckpointMeta meta;
    meta.kind = Model::kKind;
    meta.config = model.config();
    meta.vocab_fingerprint = vocab_fingerprint;
    meta.step = step;
    meta.extra = std::move(extra);
    save_checkpoint(path, model.params(), meta);
}

// Loads a model of the expected kind. When `vocab_fingerprint` is non-empty
// it must match the one recorded at save time.
template <typename Model>
Model load_model(const std::string& path, const std::string& vocab_fingerprint = {}, CheckpointMeta* meta_out = nullptr) {
    CheckpointReader reader(path);
    if (reader.meta.kind != Model::kKind) {
        throw ConfigError("checkpoint " + path + " holds a '" + reader.meta.kind + "' model, expected '" +
                          Model::kKind + "'");
    }
    if (!vocab_fingerprint.empty() && reader.meta.vocab_fingerprint != vocab_fingerprint) {
        throw ConfigError("checkpoint " + path + " was trained with a different vocabulary");
    }
    Model model(reader.meta.config, 0);
    reader.read_into(model.params());
    if (meta_out) *meta_out = reader.meta;
    return model;
}

}  // namespace pivotnmt::model
