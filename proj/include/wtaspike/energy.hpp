#pragma once

// Theoretical energy accounting (45 nm constants):
//   ANN linear:  E = m * n * E_MAC
//   SNN linear:  E = m * n * E_AC * fr * T
// with E_MAC = 4.6 pJ and E_AC = 0.9 pJ, both per token. fr is the firing
// rate of the layer input averaged over all elements (batch x time x
// positions); an NI-LIF value k/D counts as k spikes out of D potential.
//
// The forward probe collects per-layer firing rates plus MAC/AC counts at
// the attention score and weighted-sum sites, which the multiplication-
// freeness audit inspects. Counting model: float multiply / exp / divide
// events are MACs; spike accumulations and comparisons are ACs. NI-LIF
// integer products count as their unfolded binary accumulations.

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wtaspike/tensor.hpp"

namespace wtaspike {

inline constexpr double kEnergyMacPj = 4.6;
inline constexpr double kEnergyAcPj = 0.9;

inline double linear_energy_ann(int64_t m, int64_t n) {
    if (m < 1 || n < 1) throw InputError("linear_energy_ann: dimensions must be >= 1");
    return static_cast<double>(m) * static_cast<double>(n) * kEnergyMacPj;
}

inline double linear_energy_snn(int64_t m, int64_t n, double fr, int64_t t) {
    if (m < 1 || n < 1) throw InputError("linear_energy_snn: dimensions must be >= 1");
    if (fr < 0.0 || fr > 1.0)
        throw InputError("linear_energy_snn: firing rate " + std::to_string(fr) +
                         " outside [0, 1]");
    if (t < 1) throw InputError("linear_energy_snn: time steps must be >= 1");
    return static_cast<double>(m) * static_cast<double>(n) * kEnergyAcPj * fr *
           static_cast<double>(t);
}

// ---------------------------------------------------------------------------
// Op counters and firing-rate probes, keyed by layer name.
// ---------------------------------------------------------------------------
struct OpCounts {
    uint64_t macs = 0;
    uint64_t acs = 0;
};

struct OpCounter {
    std::map<std::string, OpCounts> per_layer;
    uint64_t macs = 0;
    uint64_t acs = 0;

    void add_macs(const std::string& layer, uint64_t c) {
        per_layer[layer].macs += c;
        macs += c;
    }
    void add_acs(const std::string& layer, uint64_t c) {
        per_layer[layer].acs += c;
        acs += c;
    }
};

struct FiringRateProbe {
    // weighted spike count (k/D convention) and element count, per layer
    struct Accum {
        double weighted_nonzero = 0.0;
        double total = 0.0;
        double rate() const { return total == 0.0 ? 0.0 : weighted_nonzero / total; }
    };
    std::map<std::string, Accum> per_layer;

    void add(const std::string& layer, const Tensor& input) {
        Accum& a = per_layer[layer];
        const ValueDomain& dom = input.domain();
        double unit = dom.kind == ValueDomain::Ternary ? dom.unit : 1.0;
        for (double v : input.value()) a.weighted_nonzero += std::abs(v) / unit;
        a.total += static_cast<double>(input.size());
    }
};

// One probed layer: everything the report needs to price it.
struct LayerRecord {
    std::string name;
    bool snn = true;     // spike-fed (AC pricing) vs ANN (MAC pricing)
    int64_t m = 0;       // per-token op grid rows
    int64_t n = 0;       // per-token op grid cols
    int64_t t_steps = 1; // effective binary time steps (T, or T*D for NI-LIF)
};

struct ForwardProbe {
    OpCounter counter;
    FiringRateProbe firing;
    std::vector<LayerRecord> layers;
    std::vector<std::string> audit_sites; // mul-freeness scope: score + weighted-sum paths

    LayerRecord* find(const std::string& name) {
        for (auto& l : layers)
            if (l.name == name) return &l;
        return nullptr;
    }

    void record_layer(const std::string& name, bool snn, int64_t m, int64_t n, int64_t t_steps) {
        if (LayerRecord* l = find(name)) {
            l->snn = l->snn && snn;
            return;
        }
        layers.push_back({name, snn, m, n, t_steps});
    }

    void add_audit_site(const std::string& name) {
        for (const auto& s : audit_sites)
            if (s == name) return;
        audit_sites.push_back(name);
    }
};

// ---------------------------------------------------------------------------
// Energy report
// ---------------------------------------------------------------------------
struct EnergyRow {
    std::string layer;
    std::string mode; // "SNN" or "ANN"
    int64_t m = 0;
    int64_t n = 0;
    double fr = 0.0;
    int64_t t_steps = 1;
    double energy_pj = 0.0;
};

struct EnergyReport {
    std::vector<EnergyRow> rows;
    double total_pj = 0.0;
    int64_t token_count = 512;

    std::string to_csv() const {
        std::ostringstream os;
        os << "# constants: E_MAC=4.6pJ E_AC=0.9pJ (45nm)\n";
        os << "# tokens=" << token_count << "\n";
        os << "layer,mode,m,n,fr,T,energy_pj\n";
        os.precision(12);
        for (const EnergyRow& r : rows)
            os << r.layer << ',' << r.mode << ',' << r.m << ',' << r.n << ',' << r.fr << ','
               << r.t_steps << ',' << r.energy_pj << "\n";
        os << "TOTAL,,,,,," << total_pj << "\n";
        return os.str();
    }
};

// Prices every probed layer for `token_count` tokens. Spike-fed layers use
// the SNN formula with their measured firing rate; float-path layers
// (softmax scores, real-valued weighted sums) are priced as ANN.
inline EnergyReport build_energy_report(const ForwardProbe& probe, int64_t token_count) {
    EnergyReport rep;
    rep.token_count = token_count;
    double scale = static_cast<double>(token_count);
    for (const LayerRecord& l : probe.layers) {
        EnergyRow row;
        row.layer = l.name;
        row.m = l.m;
        row.n = l.n;
        row.t_steps = l.t_steps;
        auto it = probe.firing.per_layer.find(l.name);
        row.fr = it == probe.firing.per_layer.end() ? 0.0 : it->second.rate();
        if (l.snn) {
            row.mode = "SNN";
            row.energy_pj = linear_energy_snn(l.m, l.n, row.fr, l.t_steps) * scale;
        } else {
            row.mode = "ANN";
            row.energy_pj = linear_energy_ann(l.m, l.n) * scale;
        }
        rep.total_pj += row.energy_pj;
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Multiplication-freeness audit: passes iff the counter saw zero float
// multiplications at the attention score and weighted-sum sites.
// ---------------------------------------------------------------------------
struct MulFreeAudit {
    bool pass = true;
    std::vector<std::string> offenders;

    std::string summary() const {
        if (pass) return "mul_free=PASS";
        std::string s = "mul_free=FAIL offenders:";
        for (const auto& o : offenders) s += " " + o;
        return s;
    }
};

inline MulFreeAudit assert_mul_free(const ForwardProbe& probe) {
    MulFreeAudit audit;
    for (const LayerRecord& l : probe.layers) {
        if (!l.audit_scope) continue;
        auto it = probe.counter.per_layer.find(l.name);
        if (it != probe.counter.per_layer.end() && it->second.macs > 0) {
            audit.pass = false;
            audit.offenders.push_back(l.name);
        }
    }
    return audit;
}

// ---------------------------------------------------------------------------
// Spike trace file: magic, version, then per-layer blocks of
// (name, dtype code, shape, little-endian float64 data).
// ---------------------------------------------------------------------------
class TraceWriter {
public:
    explicit TraceWriter(const std::string& path) : out_(path, std::ios::binary) {
        static_assert(std::endian::native == std::endian::little,
                      "trace format is little-endian");
        if (!out_) throw InputError("trace: cannot open " + path);
        out_.write("WTATRACE", 8);
        uint32_t version = 1;
        out_.write(reinterpret_cast<const char*>(&version), sizeof(version));
    }

    void append(const std::string& name, const Tensor& t) {
        uint64_t len = name.size();
        out_.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out_.write(name.data(), static_cast<std::streamsize>(len));
        uint8_t dtype = 0; // float64
        out_.write(reinterpret_cast<const char*>(&dtype), sizeof(dtype));
        uint64_t ndim = t.ndim();
        out_.write(reinterpret_cast<const char*>(&ndim), sizeof(ndim));
        for (int64_t d : t.shape()) {
            uint64_t v = static_cast<uint64_t>(d);
            out_.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
        out_.write(reinterpret_cast<const char*>(t.value().data()),
                   static_cast<std::streamsize>(t.value().size() * sizeof(double)));
    }

private:
    std::ofstream out_;
};

} // namespace wtaspike
