#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "drasp/interp.hpp"
#include "drasp/pretty.hpp"
#include "drasp/search.hpp"

namespace drasp {

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void write_csv(const Mat& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open " + path);
    f.precision(12);
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) f << (j ? "," : "") << m(i, j);
        f << "\n";
    }
}

// 8-bit binary PGM, min-max normalized
inline void write_pgm(const Mat& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open " + path);
    double lo = 1e300, hi = -1e300;
    for (double v : m.raw()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    double span = hi - lo;
    f << "P5\n" << m.cols() << " " << m.rows() << "\n255\n";
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) {
            int px = span > 0 ? (int)std::lround((m(i, j) - lo) / span * 255.0) : 0;
            f.put((char)std::clamp(px, 0, 255));
        }
}

inline void write_text(const std::string& text, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open " + path);
    f << text;
}

// heatmap = CSV + PGM + a small axis-legend text file
inline void write_heatmap(const Mat& m, const std::string& dir, const std::string& name,
                          const std::string& row_legend, const std::string& col_legend) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_csv(m, dir + "/" + name + ".csv");
    write_pgm(m, dir + "/" + name + ".pgm");
    write_text("rows: " + row_legend + "\ncolumns: " + col_legend + "\n",
               dir + "/" + name + ".axes.txt");
}

// pretty text + structured json + heatmap sidecars for every tensor the
// printer referenced by figure key
inline PrettyResult export_program(const DRaspProgram& p, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto pretty = pretty_print_full(p);
    write_text(pretty.text, dir + "/program.drasp.txt");
    {
        std::ofstream f(dir + "/program.drasp.json");
        f << program_to_json(p).dump(1) << "\n";
    }
    for (auto& fig : pretty.figures) {
        std::string rows = fig.role == "select" ? "query dims" : "input dims";
        std::string cols = fig.role == "select" ? "key dims" : "output dims";
        if (fig.role == "bias") {
            rows = "output dims";
            cols = "constant";
        }
        write_heatmap(fig.value, dir + "/figures", fig.key, rows, cols);
    }
    return pretty;
}

// per-variable traces on one example input: x-axis positions, y-axis dims
inline void render_variable_traces(const DRaspProgram& p, const std::vector<int>& tokens,
                                   int offset, const std::string& dir) {
    auto ev = eval(p, tokens, offset);
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    for (size_t v = 0; v < p.vars.size(); ++v) {
        if (ev.var_values[v].empty()) continue;
        std::string name = "var_" + std::to_string(v) + "_" + p.vars[v].name;
        for (auto& c : name)
            if (c == '/' || c == ' ') c = '_';
        write_heatmap(ev.var_values[v], dir, name, "variable dims", "input positions");
    }
    for (size_t s = 0; s < p.sel_names.size(); ++s) {
        if (ev.sel_values[s].empty()) continue;
        write_heatmap(ev.sel_values[s], dir, "sel_" + std::to_string(s), "query positions",
                      "key positions");
    }
}

// frontier CSV sorted by size ascending
inline void write_frontier_csv(const std::vector<ParetoPoint>& frontier, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open " + path);
    f << "lines,match_accuracy,run_id\n";
    auto sorted = frontier;
    std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.size < b.size; });
    for (auto& p : sorted) f << p.size << "," << p.match_acc << "," << p.run_id << "\n";
}

inline void render_inspection(const InspectionReport& rep, const std::string& dir,
                              const std::string& name) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_heatmap(rep.inputs, dir, name + "_inputs", "input dims", "samples");
    if (!rep.outputs.empty())
        write_heatmap(rep.outputs, dir, name + "_outputs", "output dims", "samples");
    if (!rep.pair_assoc.empty())
        write_heatmap(rep.pair_assoc, dir, name + "_pair_assoc", "query samples", "key samples");
    std::string txt = rep.summary + "\nkind: " + rep.kind + "\npath: " + rep.path_desc + "\n";
    if (rep.warning_soft_attention)
        txt += "WARNING: soft attention between this op and a later MLP; per-column readout "
               "may not reflect the true downstream effect\n";
    if (rep.kmeans_k > 0) {
        txt += "kmeans k: " + std::to_string(rep.kmeans_k) + "\nlabels:";
        for (int l : rep.q_clusters) txt += " " + std::to_string(l);
        txt += "\n";
    }
    write_text(txt, dir + "/" + name + ".txt");
}

} // namespace drasp
