// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "kvtier/error.hpp"
#include "kvtier/fp16.hpp"
#include "kvtier/tiered_store.hpp"
#include "scratch.hpp"

namespace kvtier {
namespace {

using testing::ScratchDir;

TraceHeader shape(uint32_t layers, uint32_t heads, uint32_t n, uint32_t d, bool values = false) {
    TraceHeader h;
    h.n_layers = layers;
    h.n_heads = heads;
    h.n_context = n;
    h.head_dim = d;
    h.n_steps = 2;
    h.has_values = values;
    return h;
}

AttentionTrace make_trace(const TraceHeader& h, uint64_t seed = 1) {
    DesertProfile p;
    p.seed = seed;
    return generate_synthetic(p, h);
}

StoreGeometry geometry_of(const TraceHeader& h, uint32_t chunk) {
    StoreGeometry g;
    g.n_layers = h.n_layers;
    g.n_heads = h.n_heads;
    g.n_context = h.n_context;
    g.head_dim = h.head_dim;
    g.chunk_tokens.assign(h.n_layers, chunk);
    return g;
}

TierConfig tiers(const ScratchDir& dir, uint64_t hot, uint64_t warm, uint32_t pinned = 0) {
    TierConfig c;
    c.hot_capacity = hot;
    c.warm_capacity = warm;
    c.cold_path = dir.path() / "cold";
    c.early_layers_pinned = pinned;
    return c;
}

TEST(TierConfig, Validation) {
    TierConfig c;
    EXPECT_NO_THROW(check_tier_config(c));
    c.frequency_window = 65;
    EXPECT_THROW(check_tier_config(c), ConfigError);
    c = TierConfig{};
    c.hot_frequency_threshold = 0;
    EXPECT_THROW(check_tier_config(c), ConfigError);
    c = TierConfig{};
    c.bandwidth_warm_cold = 0.0;
    EXPECT_THROW(check_tier_config(c), ConfigError);
}

TEST(Placement, FillsHotThenWarmByPriority) {
    ScratchDir dir;
    const TraceHeader h = shape(2, 1, 1000, 4);
    const AttentionTrace trace = make_trace(h);
    const uint64_t total = 2ull * 1000 * 16;
    TieredStore store(tiers(dir, total / 10, total * 3 / 10), geometry_of(h, 10));
    std::mt19937_64 rng(3);
    std::vector<std::vector<double>> prior(2, std::vector<double>(100));
    for (auto& p : prior)
        for (double& x : p) x = std::uniform_real_distribution<double>(0, 1)(rng);
    store.place_initial(trace, &prior);

    const ResidencyMap& map = store.residency();
    EXPECT_EQ(map.occupancy(Tier::kHot), total / 10);
    EXPECT_EQ(map.occupancy(Tier::kWarm), total * 3 / 10);
    EXPECT_EQ(map.occupancy(Tier::kCold), total * 6 / 10);

    double min_hot = 2.0, max_warm = -1.0, min_warm = 2.0, max_cold = -1.0;
    for (uint32_t l = 0; l < 2; ++l) {
        const auto& recs = map.records(l, 0);
        for (size_t c = 0; c < recs.size(); ++c) {
            const double p = prior[l][c];
            switch (recs[c].tier) {
                case Tier::kHot: min_hot = std::min(min_hot, p); break;
                case Tier::kWarm:
                    max_warm = std::max(max_warm, p);
                    min_warm = std::min(min_warm, p);
                    break;
                case Tier::kCold: max_cold = std::max(max_cold, p); break;
            }
            EXPECT_TRUE(recs[c].replica_on_cold);
        }
    }
    EXPECT_GT(min_hot, max_warm);
    EXPECT_GT(min_warm, max_cold);
    EXPECT_EQ(store.cold_write_bytes(), 0u);
    EXPECT_TRUE(std::filesystem::exists(store.data_path(1, 0)));
    EXPECT_TRUE(std::filesystem::exists(store.abstract_path(1, 0)));
}

TEST(Placement, PinnedLayersNeverGoCold) {
    ScratchDir dir;
    const TraceHeader h = shape(4, 2, 256, 8);
    const AttentionTrace trace = make_trace(h);
    const uint64_t layer_bytes = 2ull * 256 * 32;
    TieredStore store(tiers(dir, layer_bytes, layer_bytes, 2), geometry_of(h, 32));
    store.place_initial(trace);
    EXPECT_EQ(store.residency().cold_bytes(0), 0u);
    EXPECT_EQ(store.residency().cold_bytes(1), 0u);
    EXPECT_EQ(store.residency().cold_bytes(2) + store.residency().cold_bytes(3), 2 * layer_bytes);
    EXPECT_FALSE(std::filesystem::exists(store.data_path(0, 0)));
    EXPECT_TRUE(store.load_abstracts(0, 1).empty());
    EXPECT_DOUBLE_EQ(transmission_ratio(store.ledger(), 0), 0.0);

    ScratchDir small;
    TieredStore tight(tiers(small, layer_bytes, layer_bytes / 2, 2), geometry_of(h, 32));
    EXPECT_THROW(tight.place_initial(trace), ConfigError);
}

TEST(Placement, EverythingHotLeavesNothingCold) {
    ScratchDir dir;
    const TraceHeader h = shape(2, 2, 100, 4);
    TieredStore store(tiers(dir, 2ull * 2 * 100 * 16, 1), geometry_of(h, 16));
    store.place_initial(make_trace(h));
    EXPECT_EQ(store.residency().occupancy(Tier::kCold), 0u);
    EXPECT_EQ(store.ledger().layers[1].cold_resident_bytes, 0u);
    EXPECT_TRUE(store.load_abstracts(1, 1).empty());
}

TEST(Abstracts, LoadCountsBytesAndMatchesKeys) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 6400, 64);
    const AttentionTrace trace = make_trace(h);
    TieredStore store(tiers(dir, 1, 1), geometry_of(h, 64));
    store.place_initial(trace);
    const auto abstracts = store.load_abstracts(0, 0);
    ASSERT_EQ(abstracts.size(), 100u);
    EXPECT_EQ(store.ledger().layers[0].abstract_bytes, 51200u);
    const FloatRows keys = trace.keys_of(0, 0);
    for (const ColdAbstract& a : abstracts) {
        const ChunkAbstract expect = make_abstract(keys, a.range.start, a.range.size());
        EXPECT_EQ(a.abstract.max_key, expect.max_key);
        EXPECT_EQ(a.abstract.min_key, expect.min_key);
    }
}

void flip_byte(const std::filesystem::path& path, std::streamoff offset) {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(offset);
    char c = 0;
    f.read(&c, 1);
    c = static_cast<char>(c ^ 0x5A);
    f.seekp(offset);
    f.write(&c, 1);
}

TEST(Abstracts, CorruptRecordNamesTheChunk) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 256, 8);
    TieredStore store(tiers(dir, 1, 1), geometry_of(h, 64));
    store.place_initial(make_trace(h));
    // Header is 16 bytes, each record 8 + 64 + 4; hit the maxima of chunk 2.
    flip_byte(store.abstract_path(0, 0), 16 + 2 * 76 + 12);
    try {
        store.load_abstracts(0, 0);
        FAIL();
    } catch (const CorruptionError& e) {
        EXPECT_NE(std::string(e.what()).find("[128, 192)"), std::string::npos) << e.what();
    }
}

TEST(Fetch, MovesBytesAndEvictsWithoutWriting) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 256, 64, true);
    const AttentionTrace trace = make_trace(h);
    const uint64_t chunk_bytes = 64 * 256;
    TieredStore store(tiers(dir, 1, chunk_bytes), geometry_of(h, 64));
    store.place_initial(trace);

    // Placement filled the one-chunk warm tier with chunk 0.
    EXPECT_EQ(store.residency().records(0, 0)[0].tier, Tier::kWarm);
    store.fetch_chunk(0, 0, {64, 128});
    EXPECT_EQ(store.ledger().layers[0].cold_to_warm, 16384u);
    EXPECT_EQ(store.residency().records(0, 0)[0].tier, Tier::kCold);
    EXPECT_EQ(store.residency().records(0, 0)[1].tier, Tier::kWarm);

    const ChunkPayload p = store.fetch_chunk(0, 0, {0, 64});
    EXPECT_EQ(store.residency().records(0, 0)[0].tier, Tier::kWarm);
    EXPECT_EQ(store.residency().records(0, 0)[1].tier, Tier::kCold);
    ASSERT_EQ(p.keys.size(), 64u * 64);
    EXPECT_EQ(p.keys[65], float_to_half(trace.key(0, 0, 1)[1]));
    EXPECT_EQ(p.values[3], float_to_half(trace.values_of(0, 0).row(0)[3]));
    EXPECT_EQ(store.cold_write_bytes(), 0u);
    EXPECT_EQ(store.ledger().layers[0].fetch_ops, 2u);

    store.fetch_chunk(0, 0, {64, 128});
    EXPECT_THROW(store.fetch_chunk(0, 0, {64, 128}), PreconditionError);
    EXPECT_THROW(store.fetch_chunk(0, 0, {10, 74}), PreconditionError);
    EXPECT_THROW(store.fetch_chunk(0, 0, {0, 32}), PreconditionError);
}

TEST(Fetch, OversizedChunkIsTransient) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 128, 4);
    TieredStore store(tiers(dir, 1, 1), geometry_of(h, 64));
    store.place_initial(make_trace(h));
    store.fetch_chunk(0, 0, {0, 64});
    EXPECT_EQ(store.residency().records(0, 0)[0].tier, Tier::kCold);
    store.fetch_chunk(0, 0, {0, 64});
    EXPECT_EQ(store.ledger().layers[0].cold_to_warm, 2u * 64 * 16);
}

TEST(Fetch, CorruptPayloadRaises) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 128, 4);
    TieredStore store(tiers(dir, 1, 1), geometry_of(h, 64));
    store.place_initial(make_trace(h));
    const auto size = std::filesystem::file_size(store.data_path(0, 0));
    flip_byte(store.data_path(0, 0), static_cast<std::streamoff>(size - 3));
    EXPECT_NO_THROW(store.fetch_chunk(0, 0, {0, 64}));
    try {
        store.fetch_chunk(0, 0, {64, 128});
        FAIL();
    } catch (const CorruptionError& e) {
        EXPECT_NE(std::string(e.what()).find("[64, 128)"), std::string::npos) << e.what();
    }
    std::filesystem::resize_file(store.data_path(0, 0), size - 100);
    EXPECT_THROW(store.fetch_chunk(0, 0, {64, 128}), IoError);
}

// One layer, one head, 100 cold chunks of 32 tokens: abstracts for all, ten fetched.
TEST(TransmissionRatio, AbstractsPlusFetches) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 3200, 4);
    TieredStore store(tiers(dir, 1, 1), geometry_of(h, 32));
    store.place_initial(make_trace(h));
    store.load_abstracts(0, 0);
    EXPECT_NEAR(transmission_ratio(store.ledger(), 0), 2.0 / 32.0, 1e-15);
    for (uint32_t c = 0; c < 10; ++c) store.fetch_chunk(0, 0, {c * 32, c * 32 + 32});
    EXPECT_NEAR(transmission_ratio(store.ledger(), 0), 0.1 + 2.0 / 32.0, 1e-12);
    EXPECT_NEAR(transmission_ratio(store.ledger(), 0), 0.1625, 1e-12);

    store.begin_step(1);
    store.load_abstracts(0, 0);
    store.stage_cold(0, 0);
    EXPECT_NEAR(transmission_ratio(store.ledger(), 0), 1.0 + 2.0 / 32.0, 1e-12);

    std::ostringstream csv;
    write_ledger_csv_header(csv);
    write_ledger_csv_rows(store.ledger(), csv);
    EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "step,layer,abstract_bytes,cold_to_warm,warm_to_hot,hot_to_warm,r");
    EXPECT_NE(csv.str().find("\n1,0,"), std::string::npos);
}

TEST(Frequency, SlidingWindowCounts) {
    FrequencyTable f(10, 16);
    for (uint32_t s = 0; s < 10; ++s) f.touch(3, s);
    EXPECT_EQ(f.count(3, 9), 10u);
    EXPECT_EQ(f.count(3, 15), 10u);
    EXPECT_EQ(f.count(3, 16), 9u);
    EXPECT_EQ(f.count(3, 40), 0u);
    EXPECT_EQ(f.count(4, 9), 0u);
    f.touch(7, 2);
    EXPECT_EQ(f.max_count({0, 10}, 9), 10u);
    EXPECT_EQ(f.max_count({4, 10}, 9), 1u);
    FrequencyTable wide(1, 64);
    for (uint32_t s = 0; s < 100; ++s) wide.touch(0, s);
    EXPECT_EQ(wide.count(0, 99), 64u);
    EXPECT_THROW(FrequencyTable(1, 0), ConfigError);
}

TEST(Frequency, ExemptAfterThreshold) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 128, 4);
    TierConfig c = tiers(dir, 1, 1);
    c.hot_frequency_threshold = 5;
    TieredStore store(c, geometry_of(h, 32));
    store.place_initial(make_trace(h));
    const std::vector<uint32_t> tok = {40};
    for (uint32_t s = 0; s < 10; ++s) {
        store.begin_step(s);
        EXPECT_EQ(store.frequency_exempt(0, 0, {32, 64}), s >= 5) << s;
        store.touch(0, 0, tok);
    }
    EXPECT_TRUE(store.frequency_exempt(0, 0, {32, 64}));
    EXPECT_FALSE(store.frequency_exempt(0, 0, {64, 96}));
}

// Two fresh chunks stream through a two-chunk warm tier every step while one
// chunk is used at the end of every step.
uint64_t streaming_bytes(bool exemption) {
    ScratchDir dir;
    const TraceHeader h = shape(1, 1, 32 * 64, 4);
    TierConfig c = tiers(dir, 1, 2 * 32 * 16);
    c.frequency_exemption = exemption;
    c.hot_frequency_threshold = 2;
    TieredStore store(c, geometry_of(h, 32));
    store.place_initial(make_trace(h));
    uint64_t moved = 0;
    const TokenRange hot_chunk{0, 32};
    const std::vector<uint32_t> hot_token = {5};
    uint32_t next = 1;
    for (uint32_t s = 0; s < 30; ++s) {
        store.begin_step(s);
        for (int i = 0; i < 2; ++i) {
            const TokenRange r{next * 32, next * 32 + 32};
            next = next % 62 + 1;
            if (store.residency().records(0, 0)[r.start / 32].tier == Tier::kCold) store.fetch_chunk(0, 0, r);
        }
        if (store.residency().records(0, 0)[0].tier == Tier::kCold) store.fetch_chunk(0, 0, hot_chunk);
        store.touch(0, 0, hot_token);
        EXPECT_LE(store.residency().occupancy(Tier::kWarm), c.warm_capacity);
        moved += store.ledger().layers[0].cold_to_warm;
    }
    return moved;
}

TEST(Frequency, ExemptionReducesColdTraffic) {
    const uint64_t with = streaming_bytes(true);
    const uint64_t without = streaming_bytes(false);
    EXPECT_LT(with, without);
    EXPECT_EQ(without - with, 28u * 32 * 16);
}

TEST(Capacity, RandomFetchesRespectLimits) {
    ScratchDir dir;
    const TraceHeader h = shape(2, 2, 512, 4);
    const uint64_t total = 2ull * 2 * 512 * 16;
    TieredStore store(tiers(dir, total / 10, total * 3 / 10), geometry_of(h, 16));
    store.place_initial(make_trace(h));
    const uint64_t hot_before = store.residency().occupancy(Tier::kHot);
    std::mt19937_64 rng(9);
    for (int i = 0; i < 2000; ++i) {
        const uint32_t l = rng() % 2, hd = rng() % 2;
        const auto& recs = store.residency().records(l, hd);
        const size_t c = rng() % recs.size();
        if (recs[c].tier == Tier::kCold) {
            store.fetch_chunk(l, hd, recs[c].range);
        } else {
            const std::vector<uint32_t> t = {recs[c].range.start};
            store.touch(l, hd, t);
        }
        if (i % 50 == 0) store.begin_step(static_cast<uint32_t>(i / 50));
        ASSERT_LE(store.residency().occupancy(Tier::kWarm), total * 3 / 10);
        ASSERT_EQ(store.residency().occupancy(Tier::kHot), hot_before);
        ASSERT_EQ(store.residency().occupancy(Tier::kHot) + store.residency().occupancy(Tier::kWarm) +
                      store.residency().occupancy(Tier::kCold),
                  total);
    }
    EXPECT_EQ(store.cold_write_bytes(), 0u);
}

}  // namespace
}  // namespace kvtier
