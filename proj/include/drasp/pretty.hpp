#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "drasp/program.hpp"

namespace drasp {

// Pretty-printed programs use the compact surface naming: selectors s1..,
// aggregates a1.., element-wise outputs new_<input> / m1.., logit slots
// logits1... Tensors not matched to a named primitive are referenced by
// figure keys like [A1] and exported as heatmap sidecars.

struct FigureTensor {
    std::string key;   // "A1", "b2", ...
    Mat value;
    std::string role;  // "select", "project", "bias"
    int stmt_index = -1;
};

struct PrettyResult {
    std::string text;
    std::vector<FigureTensor> figures;
    int lines = 0;
};

inline PrettyResult pretty_print_full(const DRaspProgram& p) {
    PrettyResult res;
    std::vector<std::string> var_name(p.vars.size()), sel_name(p.sel_names.size()),
        logit_name(p.logit_names.size());
    var_name[0] = "token";
    var_name[1] = "pos";

    int n_sel = 0, n_agg = 0, n_misc = 0, n_logit = 0, n_matkey = 0, n_veckey = 0;
    auto mat_key = [&]() { return "A" + std::to_string(++n_matkey); };
    auto vec_key = [&]() { return "b" + std::to_string(++n_veckey); };

    // one-line special case: a prediction fed only by a constant projection
    {
        int n_proj_const = 0, n_other = 0;
        for (auto& st : p.statements) {
            if (auto* pr = std::get_if<ProjectStmt>(&st)) {
                if (pr->input < 0) ++n_proj_const;
                else ++n_other;
            } else if (!std::holds_alternative<PredictionStmt>(st)) {
                ++n_other;
            }
        }
        if (n_proj_const == 1 && n_other == 0) {
            const auto* pred = std::get_if<PredictionStmt>(&p.statements.back());
            const char* phi =
                pred && pred->phi == PredictionStmt::Phi::softmax ? "softmax" : "sigmoid";
            for (size_t si = 0; si < p.statements.size(); ++si)
                if (auto* pr = std::get_if<ProjectStmt>(&p.statements[si]))
                    res.figures.push_back({"b1", pr->A, "bias", (int)si});
            res.text = std::string("1. prediction = ") + phi + "(bias)\n";
            res.lines = 1;
            return res;
        }
    }

    std::ostringstream out;
    int line = 0;
    auto site_comment = [&](int layer, int head) {
        if (layer < 0) return std::string();
        std::string c = " \t# layer " + std::to_string(layer);
        if (head >= 0) c += " head " + std::to_string(head);
        return c;
    };

    for (size_t si = 0; si < p.statements.size(); ++si) {
        const Statement& st = p.statements[si];
        ++line;
        out << line << ". ";
        if (auto* sel = std::get_if<SelectStmt>(&st)) {
            sel_name[sel->out] = "s" + std::to_string(++n_sel);
            std::string op = sel->op_name;
            if (op.empty()) {
                std::string key = sel->binary ? mat_key() : vec_key();
                res.figures.push_back({key, sel->A, "select", (int)si});
                op = "[" + key + "]";
            }
            out << sel_name[sel->out] << " = select(";
            if (sel->binary) out << "q=" << var_name[sel->q] << ", ";
            out << "k=" << var_name[sel->k] << ", op=" << op;
            if (!sel->special_op_name.empty()) out << ", special_op=" << sel->special_op_name;
            int layer = -1, head = -1;
            // attribute the selector to its consuming aggregate's site
            for (auto& st2 : p.statements)
                if (auto* agg = std::get_if<AggregateStmt>(&st2))
                    for (int s : agg->selectors)
                        if (s == sel->out) {
                            layer = p.vars[agg->out].layer;
                            head = p.vars[agg->out].head;
                        }
            out << ")" << site_comment(layer, head) << "\n";
        } else if (auto* agg = std::get_if<AggregateStmt>(&st)) {
            var_name[agg->out] = "a" + std::to_string(++n_agg);
            out << var_name[agg->out] << " = aggregate(s=";
            if (agg->selectors.empty()) {
                out << "[]";
            } else {
                for (size_t k = 0; k < agg->selectors.size(); ++k)
                    out << (k ? "+" : "") << sel_name[agg->selectors[k]];
            }
            out << ", v=" << var_name[agg->value] << ")"
                << site_comment(p.vars[agg->out].layer, p.vars[agg->out].head) << "\n";
        } else if (auto* ew = std::get_if<ElementWiseStmt>(&st)) {
            bool cartesian = ew->func.kind == ElementFunc::Kind::primitive &&
                             ew->func.prim_id == "cartesian";
            if (cartesian) {
                std::string nm;
                for (size_t k = 0; k < ew->inputs.size(); ++k)
                    nm += (k ? "_x_" : "") + var_name[ew->inputs[k]];
                var_name[ew->out] = nm;
                out << nm << " = Cartesian_product(";
                for (size_t k = 0; k < ew->inputs.size(); ++k)
                    out << (k ? ", " : "") << var_name[ew->inputs[k]];
                out << ")";
            } else {
                std::string nm = ew->inputs.size() == 1 ? "new_" + var_name[ew->inputs[0]]
                                                        : "m" + std::to_string(++n_misc);
                var_name[ew->out] = nm;
                out << nm << " = element_wise_op(";
                for (size_t k = 0; k < ew->inputs.size(); ++k)
                    out << (k ? "+" : "") << var_name[ew->inputs[k]];
                if (ew->func.kind == ElementFunc::Kind::primitive) {
                    out << ", func=" << ew->func.prim_id;
                    if (ew->func.prim_id == "sharpen" || ew->func.prim_id == "is_pure" ||
                        ew->func.prim_id == "balance01")
                        out << "(" << ew->func.prim_param << ")";
                }
                out << ")";
            }
            out << site_comment(p.vars[ew->out].layer, p.vars[ew->out].head) << "\n";
        } else if (auto* pr = std::get_if<ProjectStmt>(&st)) {
            logit_name[pr->out] = "logits" + std::to_string(++n_logit);
            std::string op = pr->op_name;
            if (op.empty()) {
                std::string key = pr->input >= 0 ? mat_key() : vec_key();
                res.figures.push_back({key, pr->A, pr->input >= 0 ? "project" : "bias", (int)si});
                op = "[" + key + "]";
            }
            out << logit_name[pr->out] << " = project(";
            if (pr->input >= 0) out << "inp=" << var_name[pr->input] << ", ";
            out << "op=" << op;
            if (!pr->special_op_name.empty()) out << ", special_op=" << pr->special_op_name;
            out << ")\n";
        } else if (auto* pred = std::get_if<PredictionStmt>(&st)) {
            out << "prediction = "
                << (pred->phi == PredictionStmt::Phi::softmax ? "softmax" : "sigmoid") << "(";
            for (size_t k = 0; k < pred->logit_slots.size(); ++k)
                out << (k ? "+" : "") << logit_name[pred->logit_slots[k]];
            out << ")\n";
        }
    }
    res.text = out.str();
    res.lines = line;
    return res;
}

inline std::string pretty_print(const DRaspProgram& p) { return pretty_print_full(p).text; }

} // namespace drasp
