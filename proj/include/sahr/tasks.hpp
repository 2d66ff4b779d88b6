#pragma once

// Synthetic sequence tasks standing in for speech corpora. Each example is a
// token sequence rendered as noisy feature frames; the model must recover a
// target token sequence from the frames.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/analysis.hpp"
#include "sahr/model.hpp"
#include "sahr/random.hpp"

namespace sahr {

enum class TaskKind { copy, reverse, local_pattern };

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::local_pattern: return "local_pattern";
    }
    return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "reverse") return TaskKind::reverse;
    if (s == "local_pattern") return TaskKind::local_pattern;
    throw std::invalid_argument("unknown task kind '" + s + "'");
}

// Frames appended after the last symbol; with frames_per_token = 8 the
// frontend then yields exactly two encoder positions per symbol.
inline constexpr std::size_t kTrailingFrames = 3;

struct TaskSpec {
    TaskKind kind = TaskKind::copy;
    std::size_t vocab_size = 8;  // including the blank and sentence-boundary ids
    std::size_t min_len = 2;
    std::size_t max_len = 5;
    std::size_t input_dim = 16;
    std::size_t frames_per_token = 8;
    double noise_std = 0.1;
    std::size_t train_size = 8192;
    std::size_t dev_size = 64;
    std::size_t test_size = 64;
    std::uint64_t seed = 1234;

    std::size_t symbols() const { return vocab_size - static_cast<std::size_t>(kFirstToken); }

    void validate() const {
        if (vocab_size <= static_cast<std::size_t>(kFirstToken) + 1)
            throw std::invalid_argument("task: vocab_size must leave at least two data symbols");
        if (min_len == 0 || min_len > max_len) throw std::invalid_argument("task: need 0 < min_len <= max_len");
        if (kind == TaskKind::local_pattern && min_len < 3)
            throw std::invalid_argument("task: local_pattern needs min_len >= 3");
        if (input_dim == 0) throw std::invalid_argument("task: input_dim must be positive");
        if (frames_per_token == 0) throw std::invalid_argument("task: frames_per_token must be positive");
        if (min_len * frames_per_token + kTrailingFrames < kMinFrontendFrames)
            throw std::invalid_argument("task: shortest example has fewer frames than the frontend needs");
        // Every length must leave CTC room for its worst case, all symbols repeated.
        for (std::size_t len = min_len; len <= max_len; ++len) {
            const std::size_t target = kind == TaskKind::local_pattern ? len - 2 : len;
            const std::size_t need = target ? 2 * target - 1 : 0;
            if (frontend_length(len * frames_per_token + kTrailingFrames) < need)
                throw std::invalid_argument("task: " + std::to_string(len) + "-symbol examples leave " +
                                            std::to_string(frontend_length(len * frames_per_token + kTrailingFrames)) +
                                            " encoder frames, CTC may need " + std::to_string(need) +
                                            "; raise frames_per_token");
        }
        if (!(noise_std >= 0.0)) throw std::invalid_argument("task: noise_std must be non-negative");
        if (train_size == 0) throw std::invalid_argument("task: train_size must be positive");
    }
};

struct Example {
    std::vector<int> source;  // symbols rendered into frames
    std::vector<int> target;
    Tensor frames;  // [T x input_dim]
};

struct Dataset {
    std::vector<Example> train;
    std::vector<Example> dev;
    std::vector<Example> test;

    const std::vector<Example>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "dev") return dev;
        if (name == "test") return test;
        throw std::invalid_argument("unknown split '" + name + "'");
    }
};

// Majority symbol of each interior width-3 window; the centre wins ties.
inline std::vector<int> local_pattern_target(const std::vector<int>& s) {
    std::vector<int> out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        const int a = s[i - 1], b = s[i], c = s[i + 1];
        out.push_back(a == c ? a : b);
    }
    return out;
}

inline std::vector<int> task_target(TaskKind kind, const std::vector<int>& source) {
    switch (kind) {
        case TaskKind::copy: return source;
        case TaskKind::reverse: return {source.rbegin(), source.rend()};
        case TaskKind::local_pattern: return local_pattern_target(source);
    }
    return {};
}

namespace detail {

enum : std::uint64_t { kStreamTable = 0, kStreamTrain = 1, kStreamDev = 2, kStreamTest = 3 };

inline Rng stream(std::uint64_t seed, std::uint64_t id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id)};
    return Rng(seq);
}

inline std::vector<Example> generate_split(const TaskSpec& spec, const Tensor& table, std::size_t count, Rng rng) {
    std::vector<Example> out;
    out.reserve(count);
    std::uniform_int_distribution<std::size_t> length(spec.min_len, spec.max_len);
    std::uniform_int_distribution<int> symbol(kFirstToken, static_cast<int>(spec.vocab_size) - 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    // Amplitude dips towards symbol boundaries, so repeated symbols stay separable.
    std::vector<double> envelope(spec.frames_per_token);
    for (std::size_t k = 0; k < envelope.size(); ++k)
        envelope[k] = std::sin(std::numbers::pi * (static_cast<double>(k) + 0.5) / static_cast<double>(envelope.size()));
    for (std::size_t e = 0; e < count; ++e) {
        Example ex;
        const std::size_t len = length(rng);
        for (std::size_t i = 0; i < len; ++i) ex.source.push_back(symbol(rng));
        ex.target = task_target(spec.kind, ex.source);
        const std::size_t frames = len * spec.frames_per_token + kTrailingFrames;
        ex.frames = Tensor(Shape{frames, spec.input_dim});
        for (std::size_t t = 0; t < frames; ++t) {
            const std::size_t sym = t / spec.frames_per_token;
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                const double base = sym < len ? envelope[t % spec.frames_per_token] *
                                                    table.at(static_cast<std::size_t>(ex.source[sym]), j)
                                              : 0.0;
                ex.frames.at(t, j) = base + spec.noise_std * noise(rng);
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace detail

// Deterministic in spec. Every split draws from its own seed stream; the
// symbol-to-frame table is shared.
inline Dataset generate(const TaskSpec& spec) {
    spec.validate();
    Rng table_rng = detail::stream(spec.seed, detail::kStreamTable);
    const Tensor table = normal_tensor({spec.vocab_size, spec.input_dim}, 1.0, table_rng);
    Dataset ds;
    ds.train = detail::generate_split(spec, table, spec.train_size, detail::stream(spec.seed, detail::kStreamTrain));
    ds.dev = detail::generate_split(spec, table, spec.dev_size, detail::stream(spec.seed, detail::kStreamDev));
    ds.test = detail::generate_split(spec, table, spec.test_size, detail::stream(spec.seed, detail::kStreamTest));
    return ds;
}

// A padded group of examples. Source frames past src_lengths[b] are zero and
// target positions past the real length hold kPad.
struct Batch {
    std::vector<std::size_t> indices;  // positions in the originating split
    std::vector<Tensor> frames;        // each [T_max x input_dim]
    std::vector<std::size_t> src_lengths;
    std::vector<std::vector<bool>> src_padding;  // [B][T_max], true marks padding
    std::vector<std::vector<int>> targets;        // [B][t_max]
    std::vector<std::vector<bool>> target_padding;

    std::size_t size() const { return indices.size(); }
};

inline Batch make_batch(const std::vector<Example>& examples, const std::vector<std::size_t>& indices) {
    Batch b;
    std::size_t t_max = 0, y_max = 0;
    for (std::size_t i : indices) {
        t_max = std::max(t_max, examples.at(i).frames.shape[0]);
        y_max = std::max(y_max, examples.at(i).target.size());
    }
    for (std::size_t i : indices) {
        const Example& ex = examples[i];
        const std::size_t len = ex.frames.shape[0], dim = ex.frames.shape[1];
        Tensor frames(Shape{t_max, dim});
        std::copy(ex.frames.data.begin(), ex.frames.data.end(), frames.data.begin());
        std::vector<bool> pad(t_max, false);
        for (std::size_t t = len; t < t_max; ++t) pad[t] = true;
        std::vector<int> target(ex.target);
        std::vector<bool> tpad(y_max, false);
        for (std::size_t t = target.size(); t < y_max; ++t) tpad[t] = true;
        target.resize(y_max, kPad);
        b.indices.push_back(i);
        b.frames.push_back(std::move(frames));
        b.src_lengths.push_back(len);
        b.src_padding.push_back(std::move(pad));
        b.targets.push_back(std::move(target));
        b.target_padding.push_back(std::move(tpad));
    }
    return b;
}

// Consecutive batches of batch_size examples, in an order shuffled by rng
// when given (one full shuffle consumes the generator as std::shuffle does).
inline std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size,
                                       Rng* shuffle = nullptr) {
    if (batch_size == 0) throw std::invalid_argument("batch: batch_size must be positive");
    if (examples.empty()) throw std::invalid_argument("batch: empty dataset");
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle) std::shuffle(order.begin(), order.end(), *shuffle);
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        out.push_back(make_batch(examples, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                            order.begin() + static_cast<std::ptrdiff_t>(end)}));
    }
    return out;
}

// Shuffle seeded by (seed, epoch).
inline std::vector<Batch> make_batches(const std::vector<Example>& examples, std::size_t batch_size,
                                       std::uint64_t seed, std::uint64_t epoch) {
    Rng rng = detail::stream(seed, 0x100 + epoch);
    return make_batches(examples, batch_size, &rng);
}

struct ScoreReport {
    double accuracy = 0.0;  // position-wise matches over reference positions
    double wer = 0.0;       // total edits over total reference length
    std::size_t ref_tokens = 0;
    std::size_t errors = 0;
};

inline ScoreReport score(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
    if (hyps.size() != refs.size())
        throw std::invalid_argument("score: " + std::to_string(hyps.size()) + " hypotheses for " +
                                    std::to_string(refs.size()) + " references");
    ScoreReport r;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        for (std::size_t j = 0; j < refs[i].size(); ++j) hits += j < hyps[i].size() && hyps[i][j] == refs[i][j];
        r.ref_tokens += refs[i].size();
        r.errors += edit_distance_wer(refs[i], hyps[i]).errors();
    }
    const double denom = static_cast<double>(std::max<std::size_t>(1, r.ref_tokens));
    r.accuracy = static_cast<double>(hits) / denom;
    r.wer = static_cast<double>(r.errors) / denom;
    return r;
}

// ---------------------------------------------------------------------------
// Dataset export, one example per line:
//   <n> <source...> <m> <target...> <frames> <dim> <hex>
// where hex is the frame payload as little-endian doubles in base 16.

inline void write_examples(std::ostream& os, const std::vector<Example>& examples) {
    static const char* digits = "0123456789abcdef";
    for (const auto& ex : examples) {
        os << ex.source.size();
        for (int s : ex.source) os << ' ' << s;
        os << ' ' << ex.target.size();
        for (int t : ex.target) os << ' ' << t;
        os << ' ' << ex.frames.shape[0] << ' ' << ex.frames.shape[1] << ' ';
        for (double v : ex.frames.data) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int byte = 0; byte < 8; ++byte) {
                const auto b = static_cast<unsigned>((bits >> (8 * byte)) & 0xFFu);
                os << digits[b >> 4] << digits[b & 0xF];
            }
        }
        os << '\n';
    }
}

inline std::vector<Example> read_examples(std::istream& is) {
    std::vector<Example> out;
    std::string line;
    std::size_t lineno = 0;
    auto nibble = [&](char c) -> std::uint64_t {
        if (c >= '0' && c <= '9') return static_cast<std::uint64_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<std::uint64_t>(c - 'a' + 10);
        throw std::invalid_argument("examples line " + std::to_string(lineno) + ": bad hex digit");
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        Example ex;
        std::size_t n = 0, m = 0, frames = 0, dim = 0;
        auto fail = [&] { throw std::invalid_argument("examples line " + std::to_string(lineno) + ": malformed"); };
        if (!(ls >> n)) fail();
        ex.source.resize(n);
        for (int& s : ex.source)
            if (!(ls >> s)) fail();
        if (!(ls >> m)) fail();
        ex.target.resize(m);
        for (int& t : ex.target)
            if (!(ls >> t)) fail();
        std::string hex;
        if (!(ls >> frames >> dim >> hex) || hex.size() != frames * dim * 16) fail();
        ex.frames = Tensor(Shape{frames, dim});
        for (std::size_t k = 0; k < ex.frames.size(); ++k) {
            std::uint64_t bits = 0;
            for (int byte = 0; byte < 8; ++byte) {
                const std::uint64_t b = (nibble(hex[k * 16 + 2 * byte]) << 4) | nibble(hex[k * 16 + 2 * byte + 1]);
                bits |= b << (8 * byte);
            }
            ex.frames.data[k] = std::bit_cast<double>(bits);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace sahr
