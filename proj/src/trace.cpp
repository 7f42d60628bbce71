// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/trace.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "kvtier/error.hpp"

namespace kvtier {

std::string to_string(TokenRange range) {
    return "[" + std::to_string(range.start) + ", " + std::to_string(range.end) + ")";
}

std::string_view to_string(Tier tier) {
    switch (tier) {
        case Tier::kHot:
            return "hot";
        case Tier::kWarm:
            return "warm";
        case Tier::kCold:
            return "cold";
    }
    return "unknown";
}

size_t TraceHeader::file_bytes() const {
    const size_t blocks = has_values ? 2 : 1;
    return kTraceHeaderBytes + (blocks * key_count() + query_count()) * sizeof(float);
}

FloatRows AttentionTrace::keys_of(uint32_t layer, uint32_t head) const {
    const size_t per_head = size_t{header.n_context} * header.head_dim;
    const size_t offset = (size_t{layer} * header.n_heads + head) * per_head;
    return FloatRows(std::span<const float>(keys).subspan(offset, per_head), header.n_context, header.head_dim);
}

FloatRows AttentionTrace::values_of(uint32_t layer, uint32_t head) const {
    const size_t per_head = size_t{header.n_context} * header.head_dim;
    const size_t offset = (size_t{layer} * header.n_heads + head) * per_head;
    return FloatRows(std::span<const float>(values).subspan(offset, per_head), header.n_context, header.head_dim);
}

std::span<const float> AttentionTrace::query(uint32_t step, uint32_t layer, uint32_t head) const {
    const size_t offset = ((size_t{step} * header.n_layers + layer) * header.n_heads + head) * header.head_dim;
    return std::span<const float>(queries).subspan(offset, header.head_dim);
}

std::span<const float> AttentionTrace::key(uint32_t layer, uint32_t head, uint32_t token) const {
    return keys_of(layer, head).row(token);
}

namespace {

void header_findings(const TraceHeader& h, std::vector<Finding>& out) {
    if (h.version != kTraceVersion) {
        out.push_back({"header.version", "unsupported version " + std::to_string(h.version)});
    }
    const std::pair<const char*, uint32_t> counts[] = {{"header.n_layers", h.n_layers},
                                                       {"header.n_heads", h.n_heads},
                                                       {"header.head_dim", h.head_dim},
                                                       {"header.n_context", h.n_context},
                                                       {"header.n_steps", h.n_steps}};
    for (const auto& [name, value] : counts) {
        if (value == 0) out.push_back({name, "must be >= 1"});
    }
    if (h.head_dim > kMaxHeadDim) {
        out.push_back({"header.head_dim", "exceeds " + std::to_string(kMaxHeadDim)});
    }
}

constexpr size_t kMaxReportedFindings = 64;

// Appends one finding per non-finite element, decoding the flat index into the
// block's four-level index path.
void finite_findings(const char* block, std::span<const float> data, const uint32_t (&dims)[4],
                     std::vector<Finding>& out, size_t& suppressed) {
    for (size_t i = 0; i < data.size(); ++i) {
        if (std::isfinite(data[i])) continue;
        if (out.size() >= kMaxReportedFindings) {
            ++suppressed;
            continue;
        }
        size_t rem = i;
        size_t idx[4];
        for (int axis = 3; axis >= 0; --axis) {
            idx[axis] = rem % dims[axis];
            rem /= dims[axis];
        }
        std::ostringstream path;
        path << block << '[' << idx[0] << "][" << idx[1] << "][" << idx[2] << "][" << idx[3] << ']';
        out.push_back({path.str(), "non-finite value"});
    }
}

}  // namespace

void check_header(const TraceHeader& header) {
    std::vector<Finding> findings;
    header_findings(header, findings);
    if (!findings.empty()) {
        throw ValidationError(findings.front().path + ": " + findings.front().message);
    }
}

ValidationReport validate(const AttentionTrace& trace) {
    ValidationReport report;
    auto& out = report.findings;
    const TraceHeader& h = trace.header;
    header_findings(h, out);
    if (!out.empty()) return report;

    size_t suppressed = 0;
    const uint32_t kv_dims[4] = {h.n_layers, h.n_heads, h.n_context, h.head_dim};
    const uint32_t q_dims[4] = {h.n_steps, h.n_layers, h.n_heads, h.head_dim};

    if (trace.keys.size() != h.key_count()) {
        out.push_back({"keys", "holds " + std::to_string(trace.keys.size()) + " floats, header implies " +
                                   std::to_string(h.key_count())});
    } else {
        finite_findings("keys", trace.keys, kv_dims, out, suppressed);
    }
    if (h.has_values) {
        if (trace.values.empty()) {
            out.push_back({"values", "has_values is set but the values block is absent"});
        } else if (trace.values.size() != h.key_count()) {
            out.push_back({"values", "holds " + std::to_string(trace.values.size()) + " floats, header implies " +
                                         std::to_string(h.key_count())});
        } else {
            finite_findings("values", trace.values, kv_dims, out, suppressed);
        }
    } else if (!trace.values.empty()) {
        out.push_back({"values", "values present but has_values is clear"});
    }
    if (trace.queries.size() != h.query_count()) {
        out.push_back({"queries", "holds " + std::to_string(trace.queries.size()) + " floats, header implies " +
                                      std::to_string(h.query_count())});
    } else {
        finite_findings("queries", trace.queries, q_dims, out, suppressed);
    }
    if (suppressed > 0) {
        out.push_back({"(more)", std::to_string(suppressed) + " further non-finite values not listed"});
    }
    return report;
}

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
    return uint32_t{p[0]} | (uint32_t{p[1]} << 8) | (uint32_t{p[2]} << 16) | (uint32_t{p[3]} << 24);
}

void put_floats(std::vector<uint8_t>& out, std::span<const float> data) {
    for (float f : data) put_u32(out, std::bit_cast<uint32_t>(f));
}

void get_floats(const uint8_t* p, std::vector<float>& out, size_t count) {
    out.resize(count);
    for (size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(get_u32(p + 4 * i));
}

}  // namespace

std::vector<uint8_t> encode_trace(const AttentionTrace& trace) {
    const TraceHeader& h = trace.header;
    check_header(h);
    if (trace.keys.size() != h.key_count() || trace.queries.size() != h.query_count() ||
        (h.has_values && trace.values.size() != h.key_count())) {
        throw ValidationError("trace arrays do not match header counts");
    }
    std::vector<uint8_t> out;
    out.reserve(h.file_bytes());
    out.insert(out.end(), std::begin(kTraceMagic), std::end(kTraceMagic));
    put_u32(out, h.version);
    put_u32(out, h.n_layers);
    put_u32(out, h.n_heads);
    put_u32(out, h.head_dim);
    put_u32(out, h.n_context);
    put_u32(out, h.n_steps);
    put_u32(out, h.has_values ? kFlagHasValues : 0u);
    put_floats(out, trace.keys);
    if (h.has_values) put_floats(out, trace.values);
    put_floats(out, trace.queries);
    return out;
}

AttentionTrace decode_trace(std::span<const uint8_t> bytes, bool check_finite) {
    if (bytes.size() < kTraceHeaderBytes) {
        throw CorruptionError("truncated trace header: " + std::to_string(bytes.size()) + " bytes");
    }
    if (std::memcmp(bytes.data(), kTraceMagic, 4) != 0) {
        throw FormatError("bad magic: not a .kvtr trace");
    }
    const uint8_t* p = bytes.data();
    AttentionTrace trace;
    TraceHeader& h = trace.header;
    h.version = get_u32(p + 4);
    if (h.version != kTraceVersion) {
        throw FormatError("unsupported trace version " + std::to_string(h.version));
    }
    h.n_layers = get_u32(p + 8);
    h.n_heads = get_u32(p + 12);
    h.head_dim = get_u32(p + 16);
    h.n_context = get_u32(p + 20);
    h.n_steps = get_u32(p + 24);
    const uint32_t flags = get_u32(p + 28);
    if ((flags & ~kFlagHasValues) != 0) {
        throw FormatError("unknown flag bits in trace header");
    }
    h.has_values = (flags & kFlagHasValues) != 0;
    check_header(h);

    // Counts are bounded by the u32 fields, so the products fit in 64 bits
    // except for adversarial headers; compare in long double to stay safe.
    const long double expected = static_cast<long double>(kTraceHeaderBytes) +
                                 4.0L * ((h.has_values ? 2.0L : 1.0L) * h.n_layers * h.n_heads * h.n_context *
                                             h.head_dim +
                                         static_cast<long double>(h.n_steps) * h.n_layers * h.n_heads * h.head_dim);
    if (expected != static_cast<long double>(bytes.size())) {
        throw CorruptionError("trace payload size mismatch: file holds " + std::to_string(bytes.size()) +
                              " bytes, header implies " + std::to_string(static_cast<double>(expected)));
    }

    const uint8_t* cursor = p + kTraceHeaderBytes;
    get_floats(cursor, trace.keys, h.key_count());
    cursor += 4 * h.key_count();
    if (h.has_values) {
        get_floats(cursor, trace.values, h.key_count());
        cursor += 4 * h.key_count();
    }
    get_floats(cursor, trace.queries, h.query_count());

    if (check_finite) {
        ValidationReport report = validate(trace);
        if (!report.clean()) {
            throw ValidationError(report.findings.front().path + ": " + report.findings.front().message);
        }
    }
    return trace;
}

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
    const std::vector<uint8_t> bytes = encode_trace(trace);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

AttentionTrace read_trace(const std::filesystem::path& path, bool check_finite) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_trace(bytes, check_finite);
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// mt19937_64's output sequence is fixed by the standard; the conversion to
// doubles is done by hand because the <random> distributions are not.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

private:
    std::mt19937_64 engine_;
};

uint64_t stream_seed(uint64_t seed, uint64_t tag, uint64_t a, uint64_t b, uint64_t c = 0) {
    uint64_t x = splitmix64(seed ^ splitmix64(tag));
    x = splitmix64(x ^ a);
    x = splitmix64(x ^ (b << 1));
    return splitmix64(x ^ (c << 2));
}

constexpr uint64_t kTagRegions = 1;
constexpr uint64_t kTagKeys = 2;
constexpr uint64_t kTagQueries = 3;
constexpr uint64_t kTagValues = 4;

// Hot tokens carry a rotating two-dimensional feature with this period, so
// the highest-scoring third of every hot region forms short runs whose
// position moves with the query.
constexpr double kFeaturePeriod = 12.0;

void check_profile(const DesertProfile& p, const TraceHeader& shape) {
    if (!(p.desert_rate >= 0.0 && p.desert_rate <= 1.0)) {
        throw ConfigError("desert_rate must lie in [0, 1]");
    }
    if (p.n_hot_regions < 1) throw ConfigError("n_hot_regions must be >= 1");
    if (!(p.score_gap > 0.0) || !std::isfinite(p.score_gap)) throw ConfigError("score_gap must be > 0");
    if (p.per_layer_density) {
        if (p.per_layer_density->size() != shape.n_layers) {
            throw ConfigError("per_layer_density must list one value per layer");
        }
        for (double rho : *p.per_layer_density) {
            if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("per_layer_density values must lie in [0, 1]");
        }
    }
}

double hot_density_for(const DesertProfile& p, uint32_t layer) {
    if (p.per_layer_density) return (*p.per_layer_density)[layer];
    return 1.0 - p.desert_rate;
}

}  // namespace

uint32_t hot_token_count(double hot_density, uint32_t n) {
    const double raw = hot_density * n;
    // Absorb representation error such as (1 - 0.7) * 256 = 76.80000000000001.
    const double count = std::ceil(raw - 1e-9);
    return static_cast<uint32_t>(std::clamp(count, 0.0, static_cast<double>(n)));
}

std::vector<TokenRange> planted_hot_regions(const DesertProfile& profile, const TraceHeader& shape, uint32_t layer,
                                            uint32_t head) {
    const uint32_t n = shape.n_context;
    const uint32_t hot = hot_token_count(hot_density_for(profile, layer), n);
    if (hot == 0) return {};
    const uint32_t regions = std::min(profile.n_hot_regions, hot);
    const uint32_t desert = n - hot;

    Rng rng(stream_seed(profile.seed, kTagRegions, layer, head));
    // regions + 1 gaps; interior gaps keep at least one desert token when
    // there are enough of them so the runs stay distinct.
    const uint32_t min_interior = desert >= regions - 1 ? 1 : 0;
    const uint32_t spare = desert - min_interior * (regions - 1);
    std::vector<double> weights(regions + 1);
    double total = 0.0;
    for (double& w : weights) {
        w = rng.uniform(0.05, 1.0);
        total += w;
    }
    std::vector<uint32_t> gaps(regions + 1);
    uint32_t assigned = 0;
    for (uint32_t i = 0; i <= regions; ++i) {
        gaps[i] = static_cast<uint32_t>(std::floor(spare * weights[i] / total));
        assigned += gaps[i];
    }
    gaps[regions] += spare - assigned;
    for (uint32_t i = 1; i < regions; ++i) gaps[i] += min_interior;

    std::vector<TokenRange> out;
    uint32_t cursor = gaps[0];
    for (uint32_t r = 0; r < regions; ++r) {
        const uint32_t width = hot / regions + (r < hot % regions ? 1 : 0);
        out.push_back({cursor, cursor + width});
        cursor += width + gaps[r + 1];
    }
    return out;
}

AttentionTrace generate_synthetic(const DesertProfile& profile, const TraceHeader& shape) {
    check_header(shape);
    check_profile(profile, shape);

    AttentionTrace trace;
    trace.header = shape;
    trace.keys.resize(shape.key_count());
    trace.queries.resize(shape.query_count());
    if (shape.has_values) trace.values.resize(shape.key_count());

    const uint32_t d = shape.head_dim;
    const uint32_t n = shape.n_context;
    const double gap = profile.score_gap;
    // Score bounds with query weights s in [1, 1.5] and a in [0.5, 1]:
    //   hot    >= s*5g - a*2g - noise >= 2.95g
    //   desert <= s*g + noise         <= 1.55g
    const double hot_level = 5.0 * gap;
    const double rotation = 2.0 * gap;
    const double desert_level = gap;
    const uint32_t noise_dims = d > 3 ? d - 3 : 0;
    const double key_noise = noise_dims > 0 ? 0.05 * gap / noise_dims : 0.0;
    const double omega = 2.0 * std::numbers::pi / kFeaturePeriod;

    for (uint32_t layer = 0; layer < shape.n_layers; ++layer) {
        for (uint32_t head = 0; head < shape.n_heads; ++head) {
            const std::vector<TokenRange> hot_regions = planted_hot_regions(profile, shape, layer, head);
            Rng rng(stream_seed(profile.seed, kTagKeys, layer, head));
            float* base = trace.keys.data() + (size_t{layer} * shape.n_heads + head) * n * d;
            size_t region = 0;
            for (uint32_t t = 0; t < n; ++t) {
                while (region < hot_regions.size() && hot_regions[region].end <= t) ++region;
                const bool hot = region < hot_regions.size() && hot_regions[region].contains(t);
                float* k = base + size_t{t} * d;
                if (d == 1) {
                    k[0] = static_cast<float>(hot ? rng.uniform(3.0 * gap, 7.0 * gap) : rng.uniform(0.0, desert_level));
                    continue;
                }
                k[0] = static_cast<float>(hot ? hot_level : rng.uniform(0.0, desert_level));
                k[1] = static_cast<float>(hot ? rotation * std::cos(omega * t) : 0.0);
                if (d >= 3) k[2] = static_cast<float>(hot ? rotation * std::sin(omega * t) : 0.0);
                for (uint32_t j = 3; j < d; ++j) k[j] = static_cast<float>(rng.uniform(-key_noise, key_noise));
            }
            if (shape.has_values) {
                Rng vrng(stream_seed(profile.seed, kTagValues, layer, head));
                float* v = trace.values.data() + (size_t{layer} * shape.n_heads + head) * n * d;
                for (size_t i = 0; i < size_t{n} * d; ++i) v[i] = static_cast<float>(vrng.uniform(-1.0, 1.0));
            }
        }
    }

    for (uint32_t step = 0; step < shape.n_steps; ++step) {
        for (uint32_t layer = 0; layer < shape.n_layers; ++layer) {
            for (uint32_t head = 0; head < shape.n_heads; ++head) {
                Rng rng(stream_seed(profile.seed, kTagQueries, layer, head, step));
                float* q = trace.queries.data() + ((size_t{step} * shape.n_layers + layer) * shape.n_heads + head) * d;
                const double s = rng.uniform(1.0, 1.5);
                const double a = rng.uniform(0.5, 1.0);
                const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
                q[0] = static_cast<float>(s);
                if (d >= 2) q[1] = static_cast<float>(a * std::cos(phase));
                if (d >= 3) q[2] = static_cast<float>(a * std::sin(phase));
                for (uint32_t j = 3; j < d; ++j) q[j] = static_cast<float>(rng.uniform(-1.0, 1.0));
            }
        }
    }
    return trace;
}

}  // namespace kvtier
