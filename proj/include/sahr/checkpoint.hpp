#pragma once

// Parameter snapshots and their on-disk form:
//   "SAHRCKPT" | version byte | u64 count |
//   count x (u64 name length, name bytes, u64 rank, rank x u64 extent, u64 byte offset) |
//   payload of little-endian doubles
// Offsets are relative to the start of the payload.

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sahr/model.hpp"

namespace sahr {

using Snapshot = std::vector<std::pair<std::string, Tensor>>;

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'H', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline Snapshot snapshot_of(const ModelParams& p) {
    Snapshot out;
    for (const auto& [name, var] : named_parameters(p)) out.emplace_back(name, var.value());
    return out;
}

struct CheckpointMismatch : std::invalid_argument {
    std::vector<std::string> names;
    CheckpointMismatch(const std::string& what, std::vector<std::string> n)
        : std::invalid_argument(what), names(std::move(n)) {}
};

// Copies snapshot values into the parameters. Every name must exist on both
// sides with the same shape; otherwise nothing is modified and the offending
// names are listed.
inline void load_snapshot(const ModelParams& p, const Snapshot& snap) {
    NamedParams named = named_parameters(p);
    std::vector<std::string> bad;
    std::vector<const Tensor*> source(named.size(), nullptr);
    std::vector<bool> used(snap.size(), false);
    for (std::size_t i = 0; i < named.size(); ++i) {
        bool found = false;
        for (std::size_t j = 0; j < snap.size() && !found; ++j) {
            if (snap[j].first != named[i].first) continue;
            found = used[j] = true;
            if (snap[j].second.shape == named[i].second.shape())
                source[i] = &snap[j].second;
            else
                bad.push_back(named[i].first + " (shape " + to_string(snap[j].second.shape) + " vs " +
                              to_string(named[i].second.shape()) + ")");
        }
        if (!found) bad.push_back(named[i].first + " (missing from checkpoint)");
    }
    for (std::size_t j = 0; j < snap.size(); ++j)
        if (!used[j]) bad.push_back(snap[j].first + " (not in model)");
    if (!bad.empty()) {
        std::string msg = "checkpoint does not match model:";
        for (const auto& b : bad) msg += " " + b + ";";
        throw CheckpointMismatch(msg, bad);
    }
    for (std::size_t i = 0; i < named.size(); ++i) named[i].second.node().value = *source[i];
}

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    os.write(buf, 8);
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8))
        throw std::invalid_argument(std::string("checkpoint: truncated while reading ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Snapshot& snap) {
    os.write(kCheckpointMagic, 8);
    os.put(static_cast<char>(kCheckpointVersion));
    detail::write_u64(os, snap.size());
    std::uint64_t offset = 0;
    for (const auto& [name, t] : snap) {
        detail::write_u64(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_u64(os, t.shape.size());
        for (std::size_t e : t.shape) detail::write_u64(os, e);
        detail::write_u64(os, offset);
        offset += 8 * t.size();
    }
    for (const auto& entry : snap)
        for (double v : entry.second.data) detail::write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline Snapshot read_checkpoint(std::istream& is) {
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
        throw std::invalid_argument("checkpoint: bad magic");
    const int version = is.get();
    if (version != kCheckpointVersion)
        throw std::invalid_argument("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t count = detail::read_u64(is, "parameter count");
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> manifest;
    std::uint64_t expected = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        const std::uint64_t len = detail::read_u64(is, "name length");
        if (len > 4096) throw std::invalid_argument("checkpoint: implausible name length");
        e.name.resize(len);
        if (!is.read(e.name.data(), static_cast<std::streamsize>(len)))
            throw std::invalid_argument("checkpoint: truncated name");
        const std::uint64_t rank = detail::read_u64(is, "rank");
        if (rank == 0 || rank > 8) throw std::invalid_argument("checkpoint: bad rank for " + e.name);
        for (std::uint64_t r = 0; r < rank; ++r) e.shape.push_back(detail::read_u64(is, "extent"));
        e.offset = detail::read_u64(is, "offset");
        if (e.offset != expected) throw std::invalid_argument("checkpoint: non-contiguous offset for " + e.name);
        expected += 8 * numel(e.shape);
        manifest.push_back(std::move(e));
    }
    Snapshot snap;
    for (auto& e : manifest) {
        Tensor t(e.shape);
        for (double& v : t.data) v = std::bit_cast<double>(detail::read_u64(is, e.name.c_str()));
        snap.emplace_back(std::move(e.name), std::move(t));
    }
    if (is.peek() != std::char_traits<char>::eof()) throw std::invalid_argument("checkpoint: trailing bytes");
    return snap;
}

inline void save_checkpoint(const std::string& path, const Snapshot& snap) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path);
    write_checkpoint(os, snap);
    if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

inline Snapshot load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    return read_checkpoint(is);
}

// Elementwise mean of the snapshots as a running mean in list order, so
// identical snapshots average to themselves bit for bit.
inline Snapshot average_checkpoints(const std::vector<Snapshot>& snaps) {
    if (snaps.empty()) throw std::invalid_argument("average_checkpoints: no snapshots");
    Snapshot out = snaps.front();
    for (std::size_t k = 1; k < snaps.size(); ++k) {
        if (snaps[k].size() != out.size())
            throw std::invalid_argument("average_checkpoints: snapshot " + std::to_string(k) + " has " +
                                        std::to_string(snaps[k].size()) + " parameters, expected " +
                                        std::to_string(out.size()));
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (snaps[k][i].first != out[i].first || snaps[k][i].second.shape != out[i].second.shape)
                throw std::invalid_argument("average_checkpoints: snapshot " + std::to_string(k) +
                                            " disagrees on parameter " + out[i].first);
            const double w = 1.0 / static_cast<double>(k + 1);
            for (std::size_t j = 0; j < out[i].second.size(); ++j) {
                double& m = out[i].second.data[j];
                m += (snaps[k][i].second.data[j] - m) * w;
            }
        }
    }
    return out;
}

}  // namespace sahr
