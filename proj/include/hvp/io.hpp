#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hvp/errors.hpp"
#include "hvp/mlp.hpp"
#include "hvp/policy.hpp"
#include "hvp/schedule.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// ----- low-level binary helpers (little-endian hosts assumed) -----

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw numeric_error("binary read: truncated file");
    return v;
}

}  // namespace detail

// FNV-1a, used for config/checkpoint content hashes in run manifests.
inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw config_error("cannot open '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// ----- checkpoints -----
// Layout: magic "HVP1"; f64 gamma, kappa; u8 stochastic; u32 T; f64 eta,
// beta_min, beta_max; u32 network count; per network: u32 name length, name
// bytes, u32 width count, u64 widths, then per layer row-major f64 weights
// followed by f64 biases.

struct Checkpoint {
    double gamma = 1.0;
    double kappa = 0.05;
    bool stochastic = true;
    int T = 8;
    double eta = 0.5;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    std::vector<std::string> names;
    std::vector<Mlp> nets;

    const Mlp* find(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return &nets[i];
        return nullptr;
    }

    static Checkpoint from_policies(const PolicyPair& pols, double gamma, int T, double eta,
                                    double beta_min, double beta_max) {
        Checkpoint ck;
        ck.gamma = gamma;
        ck.kappa = pols.step.kappa;
        ck.stochastic = pols.step.stochastic;
        ck.T = T;
        ck.eta = eta;
        ck.beta_min = beta_min;
        ck.beta_max = beta_max;
        ck.names = {"noise_policy", "step_policy"};
        ck.nets = {pols.noise.net, pols.step.net};
        return ck;
    }

    PolicyPair to_policies() const {
        const Mlp* n = find("noise_policy");
        const Mlp* s = find("step_policy");
        if (!n || !s) throw config_error("checkpoint: missing noise_policy or step_policy");
        PolicyPair p;
        p.noise.net = *n;
        p.step.net = *s;
        p.step.kappa = kappa;
        p.step.stochastic = stochastic;
        return p;
    }
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw config_error("checkpoint: cannot write '" + path + "'");
    f.write("HVP1", 4);
    detail::put(f, ck.gamma);
    detail::put(f, ck.kappa);
    detail::put<std::uint8_t>(f, ck.stochastic ? 1 : 0);
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(ck.T));
    detail::put(f, ck.eta);
    detail::put(f, ck.beta_min);
    detail::put(f, ck.beta_max);
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(ck.nets.size()));
    for (std::size_t i = 0; i < ck.nets.size(); ++i) {
        const std::string& name = ck.names[i];
        const Mlp& net = ck.nets[i];
        detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(net.widths.size()));
        for (std::size_t w : net.widths) detail::put<std::uint64_t>(f, w);
        for (std::size_t l = 0; l < net.W.size(); ++l) {
            for (double x : net.W[l].v) detail::put(f, x);
            for (double x : net.b[l].v) detail::put(f, x);
        }
    }
    if (!f) throw numeric_error("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw config_error("checkpoint: cannot open '" + path + "'");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "HVP1", 4) != 0)
        throw config_error("checkpoint: bad magic in '" + path + "'");
    Checkpoint ck;
    ck.gamma = detail::get<double>(f);
    ck.kappa = detail::get<double>(f);
    ck.stochastic = detail::get<std::uint8_t>(f) != 0;
    ck.T = static_cast<int>(detail::get<std::uint32_t>(f));
    ck.eta = detail::get<double>(f);
    ck.beta_min = detail::get<double>(f);
    ck.beta_max = detail::get<double>(f);
    std::uint32_t n_nets = detail::get<std::uint32_t>(f);
    for (std::uint32_t i = 0; i < n_nets; ++i) {
        std::uint32_t nl = detail::get<std::uint32_t>(f);
        std::string name(nl, '\0');
        f.read(name.data(), nl);
        if (!f) throw config_error("checkpoint: truncated name");
        std::uint32_t nw = detail::get<std::uint32_t>(f);
        if (nw < 2) throw config_error("checkpoint: network needs at least two widths");
        std::vector<std::size_t> widths(nw);
        for (auto& w : widths) w = static_cast<std::size_t>(detail::get<std::uint64_t>(f));
        Mlp net = Mlp::make(widths, /*seed=*/0, /*zero_last=*/true);
        for (std::size_t l = 0; l < net.W.size(); ++l) {
            for (double& x : net.W[l].v) x = detail::get<double>(f);
            for (double& x : net.b[l].v) x = detail::get<double>(f);
        }
        ck.names.push_back(std::move(name));
        ck.nets.push_back(std::move(net));
    }
    return ck;
}

// ----- sample files -----
// Flat binary: magic "HVPX", u32 count, u32 d, row-major f64 samples.

inline void save_samples(const std::vector<Tensor>& samples, const std::string& path) {
    std::size_t d = samples.empty() ? 0 : samples.front().size();
    for (const Tensor& s : samples)
        if (s.size() != d) throw dim_error("save_samples: inconsistent dims");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw config_error("samples: cannot write '" + path + "'");
    f.write("HVPX", 4);
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(samples.size()));
    detail::put<std::uint32_t>(f, static_cast<std::uint32_t>(d));
    for (const Tensor& s : samples)
        for (double x : s.v) detail::put(f, x);
    if (!f) throw numeric_error("samples: write failed for '" + path + "'");
}

inline std::vector<Tensor> load_samples(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw config_error("samples: cannot open '" + path + "'");
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "HVPX", 4) != 0)
        throw config_error("samples: bad magic in '" + path + "'");
    std::uint32_t n = detail::get<std::uint32_t>(f);
    std::uint32_t d = detail::get<std::uint32_t>(f);
    std::vector<Tensor> out;
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        Tensor s = Tensor::zeros({d});
        for (double& x : s.v) x = detail::get<double>(f);
        out.push_back(std::move(s));
    }
    return out;
}

// ----- CSV -----
// Fixed 17-significant-digit formatting so f64 fixtures round-trip exactly.

class CsvWriter {
  public:
    explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != header_.size()) throw dim_error("csv: cell count != header count");
        rows_.push_back(cells);
    }

    std::string str() const {
        std::string out = join(header_);
        for (const auto& r : rows_) out += join(r);
        return out;
    }

    void write(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw config_error("csv: cannot write '" + path + "'");
        f << str();
        if (!f) throw numeric_error("csv: write failed for '" + path + "'");
    }

  private:
    static std::string join(const std::vector<std::string>& cells) {
        std::string s;
        for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
        s += "\n";
        return s;
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

// Sidecar index for a sample file: one row per sample.
inline void save_sample_index(const std::vector<Tensor>& samples, const std::string& bin_path,
                              const std::string& csv_path) {
    CsvWriter csv({"index", "dim", "file"});
    for (std::size_t i = 0; i < samples.size(); ++i)
        csv.row({std::to_string(i), std::to_string(samples[i].size()), bin_path});
    csv.write(csv_path);
}

// Run manifest: everything needed to reproduce a CLI run bit-exactly.
inline void write_manifest(const std::string& path, const std::string& effective_config,
                           std::uint64_t seed, const std::string& checkpoint_path) {
    std::ofstream f(path);
    if (!f) throw config_error("manifest: cannot write '" + path + "'");
    f << "config_hash = " << fnv1a(effective_config) << "\n";
    f << "seed = " << seed << "\n";
    if (!checkpoint_path.empty())
        f << "checkpoint_hash = " << fnv1a(read_file_bytes(checkpoint_path)) << "\n";
    f << "config_begin\n" << effective_config << "config_end\n";
}

}  // namespace hvp
