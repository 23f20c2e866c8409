#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pivotnmt/errors.hpp"

namespace pivotnmt::data {

using TokenIds = std::vector<int>;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kMask = 4;
inline constexpr int kLength = 5;
inline constexpr int kNumReserved = 6;

inline constexpr std::array<std::string_view, kNumReserved> kReservedTokens = {"<pad>", "<s>",    "</s>",
                                                                               "<unk>", "<mask>", "<len>"};

inline bool is_reserved(int id) { return id >= 0 && id < kNumReserved; }

// 64-bit FNV-1a, used for vocabulary fingerprints in checkpoints.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Vocabulary {
public:
    Vocabulary() {
        for (std::string_view t : kReservedTokens) add(std::string(t));
    }

    // Returns the id of `token`, inserting it if new.
    int add(const std::string& token) {
        auto [it, inserted] = index_.try_emplace(token, static_cast<int>(tokens_.size()));
        if (inserted) tokens_.push_back(token);
        return it->second;
    }

    bool contains(const std::string& token) const { return index_.count(token) != 0; }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw IndexError("vocabulary: id " + std::to_string(id) + " outside [0, " + std::to_string(tokens_.size()) +
                             ")");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    // Hex fingerprint over the ordered token list.
    std::string fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& t : tokens_) {
            h = fnv1a(t, h);
            h = fnv1a(std::string_view("\n"), h);
        }
        std::ostringstream os;
        os << std::hex << h;
        return os.str();
    }

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

    // TSV `token<TAB>id`, reserved rows first.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("vocabulary: cannot write " + path);
        for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
        if (!out) throw IoError("vocabulary: write failed for " + path);
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("vocabulary: cannot read " + path);
        Vocabulary v;
        v.tokens_.clear();
        v.index_.clear();
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto tab = line.rfind('\t');
            if (tab == std::string::npos) throw InputError("vocabulary: malformed row '" + line + "'");
            const std::string token = line.substr(0, tab);
            const int id = std::stoi(line.substr(tab + 1));
            if (id != static_cast<int>(v.tokens_.size())) throw InputError("vocabulary: ids must be dense and ordered");
            v.add(token);
        }
        for (int i = 0; i < kNumReserved; ++i) {
            if (i >= static_cast<int>(v.tokens_.size()) || v.tokens_[static_cast<std::size_t>(i)] != kReservedTokens[i]) {
                throw InputError("vocabulary: reserved rows missing or out of order in " + path);
            }
        }
        return v;
    }

private:
    std::unordered_map<std::string, int> index_;
    std::vector<std::string> tokens_;
};

}  // namespace pivotnmt::data
