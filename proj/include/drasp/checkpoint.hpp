#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "drasp/transformer.hpp"

#include <json.hpp>

namespace drasp {

// Checkpoint file: one JSON header line (magic, dims, objective, ln flag and
// the array manifest), then the named arrays as raw little-endian f64 in
// manifest order.

namespace detail {

inline void write_f64_le(std::ofstream& f, const std::vector<double>& xs) {
    static_assert(sizeof(double) == 8);
    for (double x : xs) {
        uint64_t bits;
        std::memcpy(&bits, &x, 8);
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = (unsigned char)(bits >> (8 * i));
        f.write(reinterpret_cast<char*>(b), 8);
    }
}

inline std::vector<double> read_f64_le(std::ifstream& f, size_t n) {
    std::vector<double> out(n);
    std::vector<unsigned char> buf(n * 8);
    f.read(reinterpret_cast<char*>(buf.data()), (std::streamsize)buf.size());
    if (!f) throw std::runtime_error("checkpoint truncated");
    for (size_t k = 0; k < n; ++k) {
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= uint64_t(buf[8 * k + i]) << (8 * i);
        double x;
        std::memcpy(&x, &bits, 8);
        out[k] = x;
    }
    return out;
}

} // namespace detail

inline void save_checkpoint(const TransformerWeights& w, const std::string& path,
                            const std::vector<std::string>& alphabet = {},
                            const std::string& task = "") {
    TransformerWeights& wm = const_cast<TransformerWeights&>(w);
    auto params = wm.param_list();

    nlohmann::json head;
    head["magic"] = "DRSP1";
    head["L"] = w.L;
    head["H"] = w.H;
    head["d"] = w.d;
    head["d_h"] = w.d_h;
    head["T"] = w.T;
    head["vocab"] = w.vocab;
    head["hidden"] = w.hidden();
    head["objective"] =
        w.objective == Objective::language_model ? "language_model" : "multi_label_validity";
    head["ln_flag"] = w.absorbed ? "absorbed" : "exact";
    if (!alphabet.empty()) head["alphabet"] = alphabet;
    if (!task.empty()) head["task"] = task;
    nlohmann::json manifest = nlohmann::json::array();
    for (auto& [name, m] : params)
        manifest.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});
    head["manifest"] = manifest;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << head.dump() << "\n";
    for (auto& [name, m] : params) detail::write_f64_le(f, m->raw());
}

struct CheckpointMeta {
    std::vector<std::string> alphabet;
    std::string task;
};

inline TransformerWeights load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("checkpoint header missing");
    auto head = nlohmann::json::parse(line);
    if (head.value("magic", "") != std::string("DRSP1"))
        throw std::runtime_error("bad checkpoint magic");

    Objective obj = head.value("objective", "language_model") == std::string("language_model")
                        ? Objective::language_model
                        : Objective::multi_label_validity;
    TransformerWeights w = TransformerWeights::make(head["L"], head["H"], head["d"], head["T"],
                                                    head["vocab"], obj,
                                                    head.value("hidden", -1));
    w.absorbed = head.value("ln_flag", "exact") == std::string("absorbed");
    if (meta) {
        if (head.contains("alphabet")) meta->alphabet = head["alphabet"].get<std::vector<std::string>>();
        meta->task = head.value("task", "");
    }

    auto params = w.param_list();
    auto manifest = head["manifest"];
    if (manifest.size() != params.size()) throw std::runtime_error("manifest length mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        auto& [name, m] = params[i];
        if (manifest[i]["name"] != name || manifest[i]["rows"] != m->rows() ||
            manifest[i]["cols"] != m->cols())
            throw std::runtime_error("manifest entry mismatch at " + name);
        m->raw() = detail::read_f64_le(f, m->size());
    }
    return w;
}

} // namespace drasp
