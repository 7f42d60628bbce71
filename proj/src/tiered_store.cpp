// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/tiered_store.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "kvtier/error.hpp"
#include "kvtier/fp16.hpp"

namespace kvtier {

static_assert(std::endian::native == std::endian::little, "cold-tier files are written in host order");

namespace {

constexpr char kDataMagic[4] = {'K', 'V', 'C', 'D'};
constexpr char kAbstractMagic[4] = {'K', 'V', 'C', 'A'};
constexpr uint32_t kColdVersion = 1;
constexpr size_t kColdHeaderBytes = 16;
constexpr size_t kTableEntryBytes = 20;

uint32_t checksum(const void* data, size_t bytes) {
    return static_cast<uint32_t>(crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(bytes)));
}

template <typename T>
void put(std::vector<uint8_t>& out, T value) {
    const auto* p = reinterpret_cast<const uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const uint8_t* p) {
    T value;
    std::memcpy(&value, p, sizeof(T));
    return value;
}

std::vector<uint8_t> header_bytes(const char (&magic)[4], uint32_t n_chunks, uint32_t head_dim) {
    std::vector<uint8_t> out(magic, magic + 4);
    put(out, kColdVersion);
    put(out, n_chunks);
    put(out, head_dim);
    return out;
}

void check_file_header(const uint8_t* p, const char (&magic)[4], uint32_t n_chunks, uint32_t head_dim,
                       const std::filesystem::path& path) {
    if (std::memcmp(p, magic, 4) != 0) throw FormatError("bad magic in " + path.string());
    if (get<uint32_t>(p + 4) != kColdVersion) throw FormatError("unsupported version in " + path.string());
    if (get<uint32_t>(p + 8) != n_chunks || get<uint32_t>(p + 12) != head_dim) {
        throw CorruptionError("cold-tier header of " + path.string() + " disagrees with the store geometry");
    }
}

void read_exact(std::ifstream& in, uint64_t offset, void* dst, size_t bytes, const std::filesystem::path& path) {
    in.clear();
    in.seekg(static_cast<std::streamoff>(offset));
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (!in || static_cast<size_t>(in.gcount()) != bytes) {
        throw IoError("short read of " + std::to_string(bytes) + " bytes at offset " + std::to_string(offset) +
                      " in " + path.string());
    }
}

}  // namespace

void check_tier_config(const TierConfig& config) {
    if (config.hot_capacity == 0) throw ConfigError("hot_capacity must be > 0");
    if (config.warm_capacity == 0) throw ConfigError("warm_capacity must be > 0");
    if (!(config.bandwidth_hot_warm > 0.0) || !std::isfinite(config.bandwidth_hot_warm)) {
        throw ConfigError("bandwidth_hot_warm must be a positive finite number");
    }
    if (!(config.bandwidth_warm_cold > 0.0) || !std::isfinite(config.bandwidth_warm_cold)) {
        throw ConfigError("bandwidth_warm_cold must be a positive finite number");
    }
    if (config.frequency_window == 0 || config.frequency_window > 64) {
        throw ConfigError("frequency_window must lie in [1, 64]");
    }
    if (config.hot_frequency_threshold == 0) throw ConfigError("hot_frequency_threshold must be >= 1");
}

size_t StoreGeometry::chunk_count(uint32_t layer) const {
    const uint32_t s = chunk_tokens.at(layer);
    return (size_t{n_context} + s - 1) / s;
}

ResidencyMap::ResidencyMap(const StoreGeometry& geometry)
    : n_heads_(geometry.n_heads), chunk_tokens_(geometry.chunk_tokens) {
    records_.resize(size_t{geometry.n_layers} * geometry.n_heads);
    for (uint32_t l = 0; l < geometry.n_layers; ++l) {
        const uint32_t s = geometry.chunk_tokens[l];
        for (uint32_t h = 0; h < geometry.n_heads; ++h) {
            auto& recs = records_[slot(l, h)];
            for (size_t c = 0; c < geometry.chunk_count(l); ++c) {
                ChunkRecord r;
                r.range = {static_cast<uint32_t>(c * s), std::min<uint32_t>(static_cast<uint32_t>((c + 1) * s),
                                                                            geometry.n_context)};
                r.bytes = uint64_t{r.range.size()} * geometry.token_bytes();
                r.tier = Tier::kCold;
                occupancy_[static_cast<size_t>(Tier::kCold)] += r.bytes;
                recs.push_back(r);
            }
        }
    }
}

uint64_t ResidencyMap::cold_bytes(uint32_t layer) const {
    uint64_t total = 0;
    for (uint32_t h = 0; h < n_heads_; ++h) {
        for (const ChunkRecord& r : records_[slot(layer, h)]) {
            if (r.tier == Tier::kCold) total += r.bytes;
        }
    }
    return total;
}

void ResidencyMap::set_tier(ChunkRecord& record, Tier tier) {
    occupancy_[static_cast<size_t>(record.tier)] -= record.bytes;
    occupancy_[static_cast<size_t>(tier)] += record.bytes;
    record.tier = tier;
}

double transmission_ratio(const TransferLedger& ledger, uint32_t layer) {
    const LayerLedger& l = ledger.layers.at(layer);
    if (l.cold_resident_bytes == 0) return 0.0;
    return static_cast<double>(l.abstract_bytes + l.cold_to_warm) / static_cast<double>(l.cold_resident_bytes);
}

void write_ledger_csv_header(std::ostream& out) {
    out << "step,layer,abstract_bytes,cold_to_warm,warm_to_hot,hot_to_warm,r\n";
}

void write_ledger_csv_rows(const TransferLedger& ledger, std::ostream& out) {
    const auto flags = out.flags();
    out << std::setprecision(17);
    for (uint32_t l = 0; l < ledger.layers.size(); ++l) {
        const LayerLedger& x = ledger.layers[l];
        out << ledger.step << ',' << l << ',' << x.abstract_bytes << ',' << x.cold_to_warm << ',' << x.warm_to_hot
            << ',' << x.hot_to_warm << ',' << transmission_ratio(ledger, l) << '\n';
    }
    out.flags(flags);
}

FrequencyTable::FrequencyTable(uint32_t n_tokens, uint32_t window)
    : window_(window), masks_(n_tokens, 0), last_step_(n_tokens, 0) {
    if (window == 0 || window > 64) throw ConfigError("frequency window must lie in [1, 64]");
}

void FrequencyTable::touch(uint32_t token, uint32_t step) {
    uint64_t& mask = masks_.at(token);
    const uint32_t age = step >= last_step_[token] ? step - last_step_[token] : 0;
    mask = age >= 64 ? 0 : mask << age;
    mask |= 1;
    last_step_[token] = std::max(last_step_[token], step);
}

uint32_t FrequencyTable::count(uint32_t token, uint32_t step) const {
    const uint64_t mask = masks_.at(token);
    if (mask == 0) return 0;
    const uint32_t age = step >= last_step_[token] ? step - last_step_[token] : 0;
    if (age >= window_) return 0;
    const uint32_t live = window_ - age;
    const uint64_t keep = live >= 64 ? ~uint64_t{0} : (uint64_t{1} << live) - 1;
    return static_cast<uint32_t>(std::popcount(mask & keep));
}

uint32_t FrequencyTable::max_count(TokenRange range, uint32_t step) const {
    uint32_t best = 0;
    for (uint32_t t = range.start; t < range.end; ++t) best = std::max(best, count(t, step));
    return best;
}

struct TieredStore::Files {
    std::filesystem::path data_path;
    std::filesystem::path abstract_path;
    std::ifstream data;
    std::ifstream abstracts;
    struct Entry {
        TokenRange range;
        uint64_t offset;
        uint32_t crc;
    };
    std::vector<Entry> table;
};

TieredStore::TieredStore(TierConfig config, StoreGeometry geometry)
    : config_(std::move(config)), geometry_(std::move(geometry)) {
    check_tier_config(config_);
    if (geometry_.n_layers == 0 || geometry_.n_heads == 0 || geometry_.n_context == 0 || geometry_.head_dim == 0) {
        throw ConfigError("store geometry must have non-zero dimensions");
    }
    if (geometry_.chunk_tokens.size() != geometry_.n_layers) {
        throw ConfigError("store geometry needs one chunk size per layer");
    }
    for (uint32_t s : geometry_.chunk_tokens) {
        if (s == 0) throw ConfigError("chunk size must be > 0");
    }
    residency_ = ResidencyMap(geometry_);
    const size_t slots = size_t{geometry_.n_layers} * geometry_.n_heads;
    frequency_.assign(slots, FrequencyTable(geometry_.n_context, config_.frequency_window));
    files_.resize(slots);
    record_base_.resize(slots);
    size_t total = 0;
    for (uint32_t l = 0; l < geometry_.n_layers; ++l) {
        for (uint32_t h = 0; h < geometry_.n_heads; ++h) {
            record_base_[slot(l, h)] = total;
            total += geometry_.chunk_count(l);
        }
    }
    lru_pos_.resize(total);
    ledger_.layers.resize(geometry_.n_layers);
}

TieredStore::~TieredStore() = default;

std::filesystem::path TieredStore::data_path(uint32_t layer, uint32_t head) const {
    return config_.cold_path / ("l" + std::to_string(layer) + "_h" + std::to_string(head) + ".kvd");
}

std::filesystem::path TieredStore::abstract_path(uint32_t layer, uint32_t head) const {
    return config_.cold_path / ("l" + std::to_string(layer) + "_h" + std::to_string(head) + ".kva");
}

const FrequencyTable& TieredStore::frequency(uint32_t layer, uint32_t head) const {
    return frequency_.at(slot(layer, head));
}

TieredStore::Files& TieredStore::files(uint32_t layer, uint32_t head) {
    auto& f = files_.at(slot(layer, head));
    if (!f) throw PreconditionError("layer " + std::to_string(layer) + " has no cold-tier files");
    return *f;
}

void TieredStore::write_cold_files(const AttentionTrace& trace, uint32_t layer, uint32_t head) {
    const uint32_t d = geometry_.head_dim;
    const auto& recs = residency_.records(layer, head);
    const auto n_chunks = static_cast<uint32_t>(recs.size());
    const FloatRows keys = trace.keys_of(layer, head);
    const bool has_values = trace.header.has_values;
    const FloatRows values = has_values ? trace.values_of(layer, head) : FloatRows();

    auto files = std::make_unique<Files>();
    files->data_path = data_path(layer, head);
    files->abstract_path = abstract_path(layer, head);

    std::vector<uint8_t> data = header_bytes(kDataMagic, n_chunks, d);
    std::vector<uint8_t> abstracts = header_bytes(kAbstractMagic, n_chunks, d);
    std::vector<std::vector<uint16_t>> payloads;
    uint64_t offset = kColdHeaderBytes + uint64_t{n_chunks} * kTableEntryBytes;
    for (const ChunkRecord& r : recs) {
        std::vector<uint16_t> halves(size_t{r.range.size()} * d * 2, 0);
        for (uint32_t t = r.range.start; t < r.range.end; ++t) {
            const size_t row = size_t{t - r.range.start} * d;
            auto k = keys.row(t);
            for (uint32_t i = 0; i < d; ++i) halves[row + i] = float_to_half(k[i]);
            if (has_values) {
                auto v = values.row(t);
                const size_t vrow = size_t{r.range.size()} * d + row;
                for (uint32_t i = 0; i < d; ++i) halves[vrow + i] = float_to_half(v[i]);
            }
        }
        const size_t bytes = halves.size() * sizeof(uint16_t);
        files->table.push_back({r.range, offset, checksum(halves.data(), bytes)});
        offset += bytes;
        payloads.push_back(std::move(halves));

        const ChunkAbstract a = make_abstract(keys, r.range.start, r.range.size());
        const size_t rec_start = abstracts.size();
        put(abstracts, r.range.start);
        put(abstracts, r.range.end);
        for (float x : a.max_key) put(abstracts, x);
        for (float x : a.min_key) put(abstracts, x);
        put(abstracts, checksum(abstracts.data() + rec_start, abstracts.size() - rec_start));
    }
    for (const auto& e : files->table) {
        put(data, e.range.start);
        put(data, e.range.end);
        put(data, e.offset);
        put(data, e.crc);
    }
    for (const auto& p : payloads) {
        const auto* b = reinterpret_cast<const uint8_t*>(p.data());
        data.insert(data.end(), b, b + p.size() * sizeof(uint16_t));
    }

    auto dump = [](const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("cannot write " + path.string());
    };
    dump(files->data_path, data);
    dump(files->abstract_path, abstracts);

    files->data.open(files->data_path, std::ios::binary);
    files->abstracts.open(files->abstract_path, std::ios::binary);
    if (!files->data || !files->abstracts) throw IoError("cannot reopen cold-tier files for layer " +
                                                         std::to_string(layer) + " head " + std::to_string(head));
    files_[slot(layer, head)] = std::move(files);
}

void TieredStore::place_initial(const AttentionTrace& trace, const std::vector<std::vector<double>>* prior) {
    const TraceHeader& h = trace.header;
    if (h.n_layers != geometry_.n_layers || h.n_heads != geometry_.n_heads || h.n_context != geometry_.n_context ||
        h.head_dim != geometry_.head_dim) {
        throw PreconditionError("place_initial: trace shape does not match the store geometry");
    }
    if (prior != nullptr && prior->size() != size_t{h.n_layers} * h.n_heads) {
        throw PreconditionError("place_initial: prior must hold one entry per (layer, head)");
    }

    std::filesystem::create_directories(config_.cold_path);
    for (uint32_t l = config_.early_layers_pinned; l < h.n_layers; ++l) {
        for (uint32_t hd = 0; hd < h.n_heads; ++hd) write_cold_files(trace, l, hd);
    }

    struct Candidate {
        double priority;
        uint32_t layer;
        uint32_t head;
        size_t chunk;
    };
    std::vector<Candidate> pinned_chunks;
    std::vector<Candidate> rest;
    for (uint32_t l = 0; l < h.n_layers; ++l) {
        for (uint32_t hd = 0; hd < h.n_heads; ++hd) {
            auto& recs = residency_.records(l, hd);
            for (size_t c = 0; c < recs.size(); ++c) {
                recs[c].pinned = pinned(l);
                recs[c].replica_on_cold = !pinned(l);
                double priority = 0.0;
                if (prior != nullptr) {
                    const auto& p = (*prior)[slot(l, hd)];
                    if (c < p.size()) priority = p[c];
                }
                (pinned(l) ? pinned_chunks : rest).push_back({priority, l, hd, c});
            }
        }
    }
    std::stable_sort(rest.begin(), rest.end(),
                     [](const Candidate& a, const Candidate& b) { return a.priority > b.priority; });

    auto place = [&](const Candidate& c, bool must_fit) {
        ChunkRecord& r = residency_.records(c.layer, c.head)[c.chunk];
        if (residency_.occupancy(Tier::kHot) + r.bytes <= config_.hot_capacity) {
            residency_.set_tier(r, Tier::kHot);
        } else if (residency_.occupancy(Tier::kWarm) + r.bytes <= config_.warm_capacity) {
            residency_.set_tier(r, Tier::kWarm);
            if (!r.pinned) lru_pos_[record_id(c.layer, c.head, c.chunk)] = lru_.insert(lru_.end(), {c.layer, c.head, c.chunk});
        } else if (must_fit) {
            throw ConfigError("hot_capacity + warm_capacity cannot hold the " +
                              std::to_string(config_.early_layers_pinned) + " pinned early layers");
        }
    };
    for (const Candidate& c : pinned_chunks) place(c, true);
    for (const Candidate& c : rest) place(c, false);
    begin_step(0);
}

void TieredStore::begin_step(uint32_t step) {
    step_ = step;
    ledger_.step = step;
    for (uint32_t l = 0; l < geometry_.n_layers; ++l) {
        ledger_.layers[l] = LayerLedger{};
        ledger_.layers[l].cold_resident_bytes = residency_.cold_bytes(l);
    }
}

std::vector<ColdAbstract> TieredStore::load_abstracts(uint32_t layer, uint32_t head) {
    std::vector<ColdAbstract> out;
    const auto& recs = residency_.records(layer, head);
    const uint32_t d = geometry_.head_dim;
    const size_t rec_bytes = 8 + size_t{8} * d + 4;
    std::vector<uint8_t> buf(rec_bytes);
    bool header_checked = false;
    for (size_t c = 0; c < recs.size(); ++c) {
        if (recs[c].tier != Tier::kCold) continue;
        Files& f = files(layer, head);
        if (!header_checked) {
            uint8_t header[kColdHeaderBytes];
            read_exact(f.abstracts, 0, header, sizeof header, f.abstract_path);
            check_file_header(header, kAbstractMagic, static_cast<uint32_t>(recs.size()), d, f.abstract_path);
            header_checked = true;
        }
        read_exact(f.abstracts, kColdHeaderBytes + c * rec_bytes, buf.data(), rec_bytes, f.abstract_path);
        const TokenRange stored{get<uint32_t>(buf.data()), get<uint32_t>(buf.data() + 4)};
        if (checksum(buf.data(), rec_bytes - 4) != get<uint32_t>(buf.data() + rec_bytes - 4) ||
            !(stored == recs[c].range)) {
            throw CorruptionError("corrupt abstract record for chunk " + to_string(recs[c].range) + " of layer " +
                                  std::to_string(layer) + " head " + std::to_string(head));
        }
        ColdAbstract a;
        a.chunk_index = c;
        a.range = recs[c].range;
        a.abstract.chunk_len = recs[c].range.size();
        a.abstract.max_key.resize(d);
        a.abstract.min_key.resize(d);
        std::memcpy(a.abstract.max_key.data(), buf.data() + 8, size_t{4} * d);
        std::memcpy(a.abstract.min_key.data(), buf.data() + 8 + size_t{4} * d, size_t{4} * d);
        ledger_.layers[layer].abstract_bytes += geometry_.abstract_bytes();
        out.push_back(std::move(a));
    }
    return out;
}

ResidencyLayout TieredStore::layout(uint32_t layer, uint32_t head, bool with_abstracts) {
    ResidencyLayout out;
    out.chunk_tokens = geometry_.chunk_tokens.at(layer);
    const auto& recs = residency_.records(layer, head);
    out.tiers.reserve(recs.size());
    for (const ChunkRecord& r : recs) out.tiers.push_back(r.tier);
    out.abstracts_only = with_abstracts;
    if (with_abstracts) {
        out.cold_abstracts.resize(recs.size());
        for (ColdAbstract& a : load_abstracts(layer, head)) out.cold_abstracts[a.chunk_index] = std::move(a.abstract);
    }
    return out;
}

ChunkPayload TieredStore::read_record(uint32_t layer, uint32_t head, size_t chunk) {
    Files& f = files(layer, head);
    const auto& e = f.table.at(chunk);
    ChunkPayload p;
    p.range = e.range;
    const size_t n = size_t{e.range.size()} * geometry_.head_dim;
    std::vector<uint16_t> halves(2 * n);
    read_exact(f.data, e.offset, halves.data(), halves.size() * sizeof(uint16_t), f.data_path);
    if (checksum(halves.data(), halves.size() * sizeof(uint16_t)) != e.crc) {
        throw CorruptionError("checksum mismatch in KV record for chunk " + to_string(e.range) + " of layer " +
                              std::to_string(layer) + " head " + std::to_string(head));
    }
    p.keys.assign(halves.begin(), halves.begin() + static_cast<std::ptrdiff_t>(n));
    p.values.assign(halves.begin() + static_cast<std::ptrdiff_t>(n), halves.end());
    return p;
}

void TieredStore::mark_used(uint32_t layer, uint32_t head, size_t chunk) {
    ChunkRecord& r = residency_.records(layer, head)[chunk];
    r.last_use = ++tick_;
    ++r.access_count;
    auto& pos = lru_pos_[record_id(layer, head, chunk)];
    if (pos) lru_.splice(lru_.end(), lru_, *pos);
}

bool TieredStore::evict_for(uint64_t bytes, size_t incoming_id) {
    if (bytes > config_.warm_capacity) return false;
    while (residency_.occupancy(Tier::kWarm) + bytes > config_.warm_capacity) {
        auto victim = lru_.end();
        auto fallback = lru_.end();
        for (auto it = lru_.begin(); it != lru_.end(); ++it) {
            if (record_id(it->layer, it->head, it->chunk) == incoming_id) continue;
            const ChunkRecord& r = residency_.records(it->layer, it->head)[it->chunk];
            if (frequency_exempt(it->layer, it->head, r.range)) {
                if (fallback == lru_.end()) fallback = it;
                continue;
            }
            victim = it;
            break;
        }
        if (victim == lru_.end()) victim = fallback;
        if (victim == lru_.end()) return false;
        ChunkRecord& r = residency_.records(victim->layer, victim->head)[victim->chunk];
        if (!r.replica_on_cold) cold_write_bytes_ += r.bytes;
        r.replica_on_cold = true;
        residency_.set_tier(r, Tier::kCold);
        lru_pos_[record_id(victim->layer, victim->head, victim->chunk)].reset();
        lru_.erase(victim);
    }
    return true;
}

ChunkPayload TieredStore::fetch_chunk(uint32_t layer, uint32_t head, TokenRange range) {
    const uint32_t s = geometry_.chunk_tokens.at(layer);
    auto& recs = residency_.records(layer, head);
    const size_t c = range.start / s;
    if (range.start % s != 0 || c >= recs.size() || !(recs[c].range == range)) {
        throw PreconditionError("fetch_chunk: " + to_string(range) + " is not a stored chunk of layer " +
                                std::to_string(layer));
    }
    ChunkRecord& r = recs[c];
    if (r.tier != Tier::kCold) {
        throw PreconditionError("fetch_chunk: chunk " + to_string(range) + " of layer " + std::to_string(layer) +
                                " head " + std::to_string(head) + " is already " + std::string(to_string(r.tier)));
    }
    ChunkPayload payload = read_record(layer, head, c);
    LayerLedger& ledger = ledger_.layers[layer];
    ledger.cold_to_warm += r.bytes;
    ++ledger.fetch_ops;

    const size_t id = record_id(layer, head, c);
    if (evict_for(r.bytes, id)) {
        residency_.set_tier(r, Tier::kWarm);
        lru_pos_[id] = lru_.insert(lru_.end(), {layer, head, c});
    }
    mark_used(layer, head, c);
    return payload;
}

void TieredStore::stage_cold(uint32_t layer, uint32_t head) {
    auto& recs = residency_.records(layer, head);
    for (size_t c = 0; c < recs.size(); ++c) {
        if (recs[c].tier != Tier::kCold) continue;
        read_record(layer, head, c);
        ledger_.layers[layer].cold_to_warm += recs[c].bytes;
        ++ledger_.layers[layer].fetch_ops;
    }
}

void TieredStore::record_compute_transfer(uint32_t layer, uint32_t head, std::span<const uint32_t> tokens) {
    const auto& recs = residency_.records(layer, head);
    const uint32_t s = geometry_.chunk_tokens.at(layer);
    uint64_t moved = 0;
    for (uint32_t t : tokens) {
        if (recs.at(t / s).tier != Tier::kHot) moved += geometry_.token_bytes();
    }
    ledger_.layers[layer].warm_to_hot += moved;
}

void TieredStore::record_writeback(uint32_t layer, uint64_t bytes) { ledger_.layers.at(layer).hot_to_warm += bytes; }

void TieredStore::touch(uint32_t layer, uint32_t head, std::span<const uint32_t> tokens) {
    FrequencyTable& freq = frequency_.at(slot(layer, head));
    const uint32_t s = geometry_.chunk_tokens.at(layer);
    size_t last_chunk = SIZE_MAX;
    for (uint32_t t : tokens) {
        freq.touch(t, step_);
        const size_t c = t / s;
        if (c != last_chunk) {
            mark_used(layer, head, c);
            last_chunk = c;
        }
    }
}

bool TieredStore::frequency_exempt(uint32_t layer, uint32_t head, TokenRange range) const {
    if (!config_.frequency_exemption) return false;
    return frequency_.at(slot(layer, head)).max_count(range, step_) >= config_.hot_frequency_threshold;
}

}  // namespace kvtier
