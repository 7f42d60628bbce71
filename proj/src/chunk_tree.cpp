// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/chunk_tree.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <queue>

#include "kvtier/error.hpp"

namespace kvtier {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

std::string_view to_string(ChunkState state) {
    switch (state) {
        case ChunkState::kCandidate:
            return "candidate";
        case ChunkState::kConfirmedImportant:
            return "important";
        case ChunkState::kDesert:
            return "desert";
    }
    return "unknown";
}

int32_t ChunkTree::add(ChunkNode node) {
    nodes_.push_back(std::move(node));
    return static_cast<int32_t>(nodes_.size() - 1);
}

std::vector<int32_t> ChunkTree::leaves() const {
    std::vector<int32_t> out;
    std::vector<int32_t> stack;
    for (auto it = roots_.rbegin(); it != roots_.rend(); ++it) stack.push_back(*it);
    while (!stack.empty()) {
        const int32_t id = stack.back();
        stack.pop_back();
        const ChunkNode& node = nodes_[id];
        if (node.is_leaf()) {
            out.push_back(id);
        } else {
            stack.push_back(node.children[1]);
            stack.push_back(node.children[0]);
        }
    }
    return out;
}

TokenRange ChunkTree::real_range(const ChunkNode& node) const {
    return {node.range.start, std::min(node.range.end, std::max(node.range.start, n_real_))};
}

void check_plan_config(const ChunkPlanConfig& config) {
    if (!is_pow2(config.default_chunk_size)) throw ConfigError("default_chunk_size must be a power of two");
    if (!is_pow2(config.early_chunk_size)) throw ConfigError("early_chunk_size must be a power of two");
    if (config.early_chunk_size > config.default_chunk_size) {
        throw ConfigError("early_chunk_size must not exceed default_chunk_size");
    }
    if (!(config.early_steps_fraction >= 0.0 && config.early_steps_fraction <= 1.0)) {
        throw ConfigError("early_steps_fraction must lie in [0, 1]");
    }
    for (double rho : config.rho) {
        if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho values must lie in [0, 1)");
    }
}

bool is_pow2(uint64_t n) { return n != 0 && std::has_single_bit(n); }

uint64_t next_pow2(uint64_t n) { return n <= 1 ? 1 : std::bit_ceil(n); }

double chunk_eval_cost(uint64_t n, uint64_t m, double rho) {
    if (!is_pow2(n) || !is_pow2(m) || m > n) throw PreconditionError("chunk_eval_cost: n, m must be powers of two, m <= n");
    if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
    const int levels = std::max(1, std::countr_zero(n / m));
    const double ratio = 2.0 * rho;
    const double series = ratio == 1.0 ? levels : (1.0 - std::pow(ratio, levels)) / (1.0 - ratio);
    return static_cast<double>(m) * series;
}

uint32_t plan_chunk_count(uint32_t n, double rho, uint32_t min_chunk, uint32_t max_chunk) {
    if (n == 0) throw PreconditionError("plan_chunk_count: empty context");
    if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1): the evaluation model diverges at 1");
    if (!is_pow2(min_chunk) || !is_pow2(max_chunk) || min_chunk > max_chunk) {
        throw ConfigError("chunk size window must be powers of two with min <= max");
    }
    const uint64_t padded = next_pow2(n);
    uint64_t best_m = 1;
    double best_cost = std::numeric_limits<double>::infinity();
    for (uint64_t m = 1; m <= padded; m <<= 1) {
        const double cost = chunk_eval_cost(padded, m, rho);
        if (cost < best_cost) {
            best_cost = cost;
            best_m = m;
        }
    }
    const uint64_t fewest = std::max<uint64_t>(1, padded / max_chunk);
    const uint64_t most = std::max<uint64_t>(1, padded / min_chunk);
    return static_cast<uint32_t>(std::clamp(best_m, fewest, most));
}

namespace {

ChunkNode make_leaf(TokenRange range, uint32_t n_real, const FloatRows& keys) {
    ChunkNode node;
    node.range = range;
    const uint32_t real_end = std::min(range.end, n_real);
    if (range.start < real_end) {
        node.abstract = make_abstract(keys, range.start, real_end - range.start);
    } else {
        node.state = ChunkState::kDesert;
        node.bounds = {kNegInf, kNegInf};
    }
    return node;
}

}  // namespace

ChunkTree build_partition(uint32_t n, uint32_t m, const FloatRows& keys) {
    if (keys.rows() != n) throw PreconditionError("build_partition: key rows do not match n");
    const uint64_t padded = next_pow2(n);
    if (m == 0 || padded % m != 0 || !is_pow2(m)) {
        throw PreconditionError("build_partition: m must be a power of two dividing the padded context");
    }
    ChunkTree tree(n, static_cast<uint32_t>(padded));
    const uint32_t size = static_cast<uint32_t>(padded / m);
    for (uint32_t i = 0; i < m; ++i) {
        tree.roots().push_back(tree.add(make_leaf({i * size, (i + 1) * size}, n, keys)));
    }
    return tree;
}

ChunkTree build_partition_by_size(uint32_t n, uint32_t chunk_tokens, const FloatRows& keys) {
    if (!is_pow2(chunk_tokens)) throw ConfigError("chunk size must be a power of two");
    const uint64_t padded = next_pow2(n);
    return build_partition(n, static_cast<uint32_t>(std::max<uint64_t>(1, padded / chunk_tokens)), keys);
}

TokenRange ResidencyLayout::chunk_range(size_t index, uint32_t n_real) const {
    const uint32_t start = static_cast<uint32_t>(index) * chunk_tokens;
    return {start, std::min(start + chunk_tokens, n_real)};
}

void align_to_residency(ChunkTree& tree, const ResidencyLayout& layout, const FloatRows& keys) {
    const uint32_t n = tree.n_real();
    const uint32_t s = layout.chunk_tokens;
    const size_t n_chunks = (size_t{n} + s - 1) / s;
    if (layout.tiers.size() != n_chunks) throw PreconditionError("align_to_residency: layout does not cover the context");
    if (layout.abstracts_only && layout.cold_abstracts.size() != n_chunks) {
        throw PreconditionError("align_to_residency: missing cold abstracts");
    }
    auto chunk_of = [&](uint32_t token) { return token / s; };
    auto is_cold = [&](uint32_t token) { return token < n && layout.tiers[chunk_of(token)] == Tier::kCold; };
    auto tier_over = [&](TokenRange r) {
        const uint32_t end = std::min(r.end, n);
        if (r.start >= end) return Tier::kWarm;
        for (uint32_t c = chunk_of(r.start); c <= chunk_of(end - 1); ++c) {
            if (layout.tiers[c] != Tier::kHot) return Tier::kWarm;
        }
        return Tier::kHot;
    };

    ChunkTree out(tree.n_real(), tree.n_padded());
    std::vector<bool> cold_emitted(n_chunks, false);
    for (int32_t id : tree.leaves()) {
        const ChunkNode& leaf = tree.nodes()[id];
        uint32_t cursor = leaf.range.start;
        while (cursor < leaf.range.end) {
            if (is_cold(cursor)) {
                const uint32_t c = chunk_of(cursor);
                const TokenRange range = layout.chunk_range(c, n);
                if (!cold_emitted[c]) {
                    cold_emitted[c] = true;
                    ChunkNode node;
                    node.range = range;
                    node.residency = Tier::kCold;
                    node.abstract_only = layout.abstracts_only;
                    node.abstract = layout.abstracts_only ? layout.cold_abstracts[c]
                                                          : make_abstract(keys, range.start, range.size());
                    out.roots().push_back(out.add(std::move(node)));
                }
                cursor = std::min(range.end, leaf.range.end);
                continue;
            }
            // Extend through memory-resident tokens up to the next cold chunk.
            uint32_t stop = cursor;
            while (stop < leaf.range.end && !is_cold(stop)) {
                stop = stop < n ? std::min((chunk_of(stop) + 1) * s, leaf.range.end) : leaf.range.end;
            }
            const TokenRange piece{cursor, stop};
            ChunkNode node;
            if (piece == leaf.range && !leaf.abstract_only && leaf.residency != Tier::kCold) {
                node = leaf;
                node.children = {-1, -1};
            } else {
                node = make_leaf(piece, n, keys);
            }
            node.abstract_only = false;
            node.residency = tier_over(piece);
            node.state = piece.start < n ? ChunkState::kCandidate : ChunkState::kDesert;
            out.roots().push_back(out.add(std::move(node)));
            cursor = stop;
        }
    }
    tree = std::move(out);
}

namespace {

RankKey upper_key(const ChunkTree& tree, const ChunkNode& node) {
    return {node.bounds.upper, tree.real_range(node).start};
}

RankKey lower_key(const ChunkTree& tree, const ChunkNode& node) {
    return {node.bounds.lower, tree.real_range(node).end - 1};
}

void evaluate(ChunkNode& node, std::span<const float> query, const FloatRows& keys, const ChunkTree& tree,
              uint64_t& evals) {
    const TokenRange real = tree.real_range(node);
    if (real.size() == 1 && !node.abstract_only) {
        const double s = token_logit(query, keys.row(real.start));
        node.bounds = {s, s};
    } else {
        node.bounds = bound_chunk(query, node.abstract, ScoreMode::kLogit);
    }
    ++evals;
}

std::vector<TokenRange> coalesce(std::vector<TokenRange> ranges) {
    std::vector<TokenRange> out;
    for (const TokenRange& r : ranges) {
        if (r.empty()) continue;
        if (!out.empty() && out.back().end == r.start) {
            out.back().end = r.end;
        } else {
            out.push_back(r);
        }
    }
    return out;
}

}  // namespace

SelectionResult select_top_k(ChunkTree& tree, std::span<const float> query, uint32_t k, const FloatRows& keys,
                             ColdTierAccess* cold) {
    if (k > tree.n_real()) throw PreconditionError("select_top_k: k exceeds the context length");
    if (query.size() != keys.dim()) throw PreconditionError("select_top_k: query/key dimension mismatch");

    SelectionResult result;
    auto& nodes = tree.nodes();
    auto heap_less = [&](int32_t a, int32_t b) { return upper_key(tree, nodes[a]) < upper_key(tree, nodes[b]); };
    std::priority_queue<int32_t, std::vector<int32_t>, decltype(heap_less)> queue(heap_less);

    for (int32_t id : tree.leaves()) {
        ChunkNode& node = nodes[id];
        if (tree.real_range(node).empty()) {
            node.state = ChunkState::kDesert;
            continue;
        }
        node.state = ChunkState::kCandidate;
        evaluate(node, query, keys, tree, result.eval_count);
        queue.push(id);
    }

    uint32_t confirmed = 0;
    while (confirmed < k && !queue.empty()) {
        const int32_t id = queue.top();
        queue.pop();

        if (nodes[id].abstract_only) {
            if (cold == nullptr) throw PreconditionError("select_top_k: abstract-only chunk without a cold tier");
            const TokenRange range = nodes[id].range;
            try {
                cold->fetch(range);
            } catch (const std::exception& e) {
                throw IoError("fetch of chunk " + to_string(range) + " failed: " + e.what());
            }
            nodes[id].abstract_only = false;
            nodes[id].residency = Tier::kWarm;
            result.fetch_set.push_back(range);
        }

        const TokenRange real = tree.real_range(nodes[id]);
        const uint32_t remaining = k - confirmed;
        const bool beats_rest = queue.empty() || lower_key(tree, nodes[id]) > upper_key(tree, nodes[queue.top()]);
        if (beats_rest && real.size() <= remaining) {
            nodes[id].state = ChunkState::kConfirmedImportant;
            confirmed += real.size();
            continue;
        }

        const TokenRange range = nodes[id].range;
        const uint32_t mid = range.start + range.size() / 2;
        for (TokenRange half : {TokenRange{range.start, mid}, TokenRange{mid, range.end}}) {
            ChunkNode child = make_leaf(half, tree.n_real(), keys);
            child.residency = nodes[id].residency;
            const bool live = !tree.real_range(child).empty();
            if (live) evaluate(child, query, keys, tree, result.eval_count);
            const int32_t child_id = tree.add(std::move(child));
            nodes[id].children[half.start == range.start ? 0 : 1] = child_id;
            if (live) queue.push(child_id);
        }
        nodes[id].state = ChunkState::kCandidate;
    }

    while (!queue.empty()) {
        nodes[queue.top()].state = ChunkState::kDesert;
        queue.pop();
    }

    std::vector<TokenRange> desert;
    for (int32_t id : tree.leaves()) {
        const ChunkNode& node = nodes[id];
        const TokenRange real = tree.real_range(node);
        if (node.state == ChunkState::kConfirmedImportant) {
            for (uint32_t t = real.start; t < real.end; ++t) result.important_tokens.push_back(t);
        } else {
            desert.push_back(real);
        }
    }
    result.desert_chunks = coalesce(std::move(desert));
    return result;
}

SelectionResult select_token_level(const ResidencyLayout& layout, std::span<const float> query, uint32_t k,
                                   const FloatRows& keys, ColdTierAccess* cold) {
    const uint32_t n = static_cast<uint32_t>(keys.rows());
    if (k > n) throw PreconditionError("select_token_level: k exceeds the context length");
    const size_t n_chunks = (size_t{n} + layout.chunk_tokens - 1) / layout.chunk_tokens;
    if (layout.tiers.size() != n_chunks) throw PreconditionError("select_token_level: layout does not cover the context");

    SelectionResult result;
    // Min-heap of the best k keys seen so far.
    std::priority_queue<RankKey, std::vector<RankKey>, std::greater<RankKey>> best;
    auto offer = [&](uint32_t t) {
        const RankKey key{token_logit(query, keys.row(t)), t};
        ++result.eval_count;
        if (k == 0) return;
        if (best.size() < k) {
            best.push(key);
        } else if (key > best.top()) {
            best.pop();
            best.push(key);
        }
    };

    struct Pending {
        size_t chunk;
        RankKey upper;
    };
    std::vector<Pending> pending;
    for (size_t c = 0; c < n_chunks; ++c) {
        const TokenRange range = layout.chunk_range(c, n);
        if (layout.tiers[c] == Tier::kCold && layout.abstracts_only) {
            const ChunkBounds b = bound_chunk(query, layout.cold_abstracts[c], ScoreMode::kLogit);
            ++result.eval_count;
            pending.push_back({c, {b.upper, range.start}});
            continue;
        }
        for (uint32_t t = range.start; t < range.end; ++t) offer(t);
    }
    std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) { return a.upper > b.upper; });
    for (const Pending& p : pending) {
        if (k == 0 || (best.size() == k && !(p.upper > best.top()))) break;
        const TokenRange range = layout.chunk_range(p.chunk, n);
        if (cold == nullptr) throw PreconditionError("select_token_level: abstract-only chunk without a cold tier");
        try {
            cold->fetch(range);
        } catch (const std::exception& e) {
            throw IoError("fetch of chunk " + to_string(range) + " failed: " + e.what());
        }
        result.fetch_set.push_back(range);
        for (uint32_t t = range.start; t < range.end; ++t) offer(t);
    }

    while (!best.empty()) {
        result.important_tokens.push_back(best.top().token);
        best.pop();
    }
    std::sort(result.important_tokens.begin(), result.important_tokens.end());
    std::vector<TokenRange> desert;
    uint32_t cursor = 0;
    for (uint32_t t : result.important_tokens) {
        desert.push_back({cursor, t});
        cursor = t + 1;
    }
    desert.push_back({cursor, n});
    result.desert_chunks = coalesce(std::move(desert));
    return result;
}

ChunkTree merge_desert(const ChunkTree& tree) {
    ChunkTree out(tree.n_real(), tree.n_padded());
    std::optional<ChunkNode> run;
    auto flush = [&] {
        if (run) {
            out.roots().push_back(out.add(std::move(*run)));
            run.reset();
        }
    };
    for (int32_t id : tree.leaves()) {
        ChunkNode leaf = tree.nodes()[id];
        leaf.children = {-1, -1};
        const bool mergeable =
            leaf.state == ChunkState::kDesert && !leaf.abstract_only && leaf.residency != Tier::kCold;
        if (!mergeable) {
            flush();
            out.roots().push_back(out.add(std::move(leaf)));
            continue;
        }
        if (!run) {
            run = std::move(leaf);
            continue;
        }
        run->range.end = leaf.range.end;
        if (run->abstract.chunk_len == 0) {
            run->abstract = std::move(leaf.abstract);
        } else if (leaf.abstract.chunk_len > 0) {
            run->abstract = merge_abstracts(run->abstract, leaf.abstract);
        }
        if (leaf.residency == Tier::kWarm) run->residency = Tier::kWarm;
        run->bounds.upper = std::max(run->bounds.upper, leaf.bounds.upper);
        run->bounds.lower = std::min(run->bounds.lower, leaf.bounds.lower);
    }
    flush();
    return out;
}

double desert_rate(const ChunkTree& tree, uint32_t slot_tokens) {
    if (slot_tokens == 0) throw PreconditionError("desert_rate: zero slot size");
    const uint32_t n = tree.n_real();
    const size_t slots = (size_t{n} + slot_tokens - 1) / slot_tokens;
    std::vector<bool> live(slots, false);
    for (int32_t id : tree.leaves()) {
        const ChunkNode& node = tree.nodes()[id];
        if (node.state == ChunkState::kDesert) continue;
        const TokenRange real = tree.real_range(node);
        if (real.empty()) continue;
        for (size_t s = real.start / slot_tokens; s <= (real.end - 1) / slot_tokens; ++s) live[s] = true;
    }
    const auto desert = std::count(live.begin(), live.end(), false);
    return slots == 0 ? 0.0 : static_cast<double>(desert) / static_cast<double>(slots);
}

double desert_rate(std::span<const uint32_t> important_tokens, uint32_t n, uint32_t slot_tokens) {
    if (slot_tokens == 0) throw PreconditionError("desert_rate: zero slot size");
    const size_t slots = (size_t{n} + slot_tokens - 1) / slot_tokens;
    std::vector<bool> live(slots, false);
    for (uint32_t t : important_tokens) live[t / slot_tokens] = true;
    const auto desert = std::count(live.begin(), live.end(), false);
    return slots == 0 ? 0.0 : static_cast<double>(desert) / static_cast<double>(slots);
}

std::vector<uint32_t> brute_force_top_k(std::span<const float> query, const FloatRows& keys, uint32_t k) {
    if (k > keys.rows()) throw PreconditionError("brute_force_top_k: k exceeds the context length");
    std::vector<RankKey> all(keys.rows());
    for (uint32_t t = 0; t < keys.rows(); ++t) all[t] = {token_logit(query, keys.row(t)), t};
    std::nth_element(all.begin(), all.begin() + k, all.end(), std::greater<RankKey>());
    std::vector<uint32_t> out;
    out.reserve(k);
    for (uint32_t i = 0; i < k; ++i) out.push_back(all[i].token);
    std::sort(out.begin(), out.end());
    return out;
}

void dump_partition(const ChunkTree& tree, std::ostream& out) {
    const auto flags = out.flags();
    out << std::setprecision(17);
    for (int32_t id : tree.leaves()) {
        const ChunkNode& node = tree.nodes()[id];
        out << node.range.start << ' ' << node.range.end << ' ' << to_string(node.state) << ' ' << node.bounds.upper
            << ' ' << node.bounds.lower << ' ' << to_string(node.residency) << '\n';
    }
    out.flags(flags);
}

}  // namespace kvtier
