#pragma once

#include <string>
#include <variant>
#include <vector>

#include "drasp/mat.hpp"
#include "drasp/tasks.hpp"
#include "drasp/transformer.hpp"

#include <json.hpp>

namespace drasp {

struct program_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// D-RASP intermediate representation. Activation variables are d(v) x N
// matrices; selector variables are N x N causal matrices of attention
// logits consumed only by aggregation.

enum class Basis { token, position, residual, primitive_output, product };

struct VarInfo {
    std::string name;        // provenance id, e.g. "head_10-head_00-token"
    int dim = 0;             // declared d(v); position-based vars declare T
    Basis basis = Basis::token;
    int layer = -1, head = -1;  // producing site, for display
};

// Element-wise payload: either a black-box reference to checkpoint MLP
// weights (with absorbed per-input maps and a constant), or a library
// primitive id with one hyperparameter.
struct ElementFunc {
    enum class Kind { blackbox_mlp, primitive };
    Kind kind = Kind::blackbox_mlp;

    MlpWeights mlp;              // blackbox
    std::vector<Mat> input_maps; // M_i : mlp_in x d(v_i)
    Mat input_const;             // mlp_in x 1

    std::string prim_id;         // primitive
    double prim_param = 0.0;
};

struct SelectStmt {
    int out = -1;        // selector index
    bool binary = true;
    int q = -1, k = -1;  // activation var indices (q unused when unary)
    Mat A;               // binary: d(q) x d(k); unary: 1 x d(k)
    std::string op_name, special_op_name;  // primitive annotations for display
};

struct AggregateStmt {
    int out = -1;
    std::vector<int> selectors;  // possibly empty: uniform prefix weights
    int value = -1;
};

struct ElementWiseStmt {
    int out = -1;
    std::vector<int> inputs;
    ElementFunc func;
};

struct ProjectStmt {
    int out = -1;    // logit slot index
    int input = -1;  // -1 = constant projection
    Mat A;           // vocab x d(v), or vocab x 1 when constant
    std::string op_name, special_op_name;
};

struct PredictionStmt {
    enum class Phi { softmax, sigmoid };
    Phi phi = Phi::softmax;
    std::vector<int> logit_slots;
};

using Statement = std::variant<SelectStmt, AggregateStmt, ElementWiseStmt, ProjectStmt, PredictionStmt>;

struct DRaspProgram {
    std::vector<std::string> alphabet;
    int T = 0;
    Objective objective = Objective::language_model;

    std::vector<VarInfo> vars;          // [0] = token, [1] = pos
    std::vector<std::string> sel_names; // selector provenance
    std::vector<std::string> logit_names;
    std::vector<Statement> statements;
    nlohmann::json metadata;

    int vocab() const { return NUM_SPECIAL + (int)alphabet.size(); }
    int line_count() const { return (int)statements.size(); }

    static DRaspProgram make(std::vector<std::string> alphabet, int T, Objective obj) {
        DRaspProgram p;
        p.alphabet = std::move(alphabet);
        p.T = T;
        p.objective = obj;
        p.vars.push_back({"token", p.vocab(), Basis::token, -1, -1});
        p.vars.push_back({"pos", T, Basis::position, -1, -1});
        return p;
    }

    int add_var(VarInfo v) {
        vars.push_back(std::move(v));
        return (int)vars.size() - 1;
    }
    int add_selector(std::string name) {
        sel_names.push_back(std::move(name));
        return (int)sel_names.size() - 1;
    }
    int add_logit_slot(std::string name) {
        logit_names.push_back(std::move(name));
        return (int)logit_names.size() - 1;
    }

    // SSA checks, dim consistency, exactly one trailing prediction
    void validate() const {
        std::vector<char> var_def(vars.size(), 0), sel_def(sel_names.size(), 0),
            logit_def(logit_names.size(), 0);
        var_def[0] = var_def[1] = 1;
        int predictions = 0;
        for (size_t si = 0; si < statements.size(); ++si) {
            const Statement& st = statements[si];
            if (std::holds_alternative<PredictionStmt>(st)) {
                ++predictions;
                if (si + 1 != statements.size())
                    throw program_error("prediction must be the last statement");
                for (int s : std::get<PredictionStmt>(st).logit_slots)
                    if (s < 0 || s >= (int)logit_names.size() || !logit_def[s])
                        throw program_error("prediction uses undefined logits");
                continue;
            }
            if (auto* sel = std::get_if<SelectStmt>(&st)) {
                if (sel->k < 0 || sel->k >= (int)vars.size() || !var_def[sel->k])
                    throw program_error("select uses undefined k var");
                if (sel->binary) {
                    if (sel->q < 0 || sel->q >= (int)vars.size() || !var_def[sel->q])
                        throw program_error("select uses undefined q var");
                    if (sel->A.rows() != vars[sel->q].dim || sel->A.cols() != vars[sel->k].dim)
                        throw program_error("select op dims mismatch");
                } else {
                    if (sel->A.rows() != 1 || sel->A.cols() != vars[sel->k].dim)
                        throw program_error("unary select op dims mismatch");
                }
                if (sel->out < 0 || sel->out >= (int)sel_names.size() || sel_def[sel->out])
                    throw program_error("selector redefined or out of range");
                sel_def[sel->out] = 1;
            } else if (auto* agg = std::get_if<AggregateStmt>(&st)) {
                for (int s : agg->selectors)
                    if (s < 0 || s >= (int)sel_names.size() || !sel_def[s])
                        throw program_error("aggregate uses undefined selector");
                if (agg->value < 0 || !var_def[agg->value])
                    throw program_error("aggregate uses undefined value var");
                if (agg->out < 0 || agg->out >= (int)vars.size() || var_def[agg->out])
                    throw program_error("aggregate output redefined");
                if (vars[agg->out].dim != vars[agg->value].dim)
                    throw program_error("aggregate preserves dim");
                var_def[agg->out] = 1;
            } else if (auto* ew = std::get_if<ElementWiseStmt>(&st)) {
                for (int v : ew->inputs)
                    if (v < 0 || !var_def[v]) throw program_error("element_wise undefined input");
                if (ew->func.kind == ElementFunc::Kind::blackbox_mlp) {
                    if (ew->func.input_maps.size() != ew->inputs.size())
                        throw program_error("blackbox input maps misaligned");
                    for (size_t i = 0; i < ew->inputs.size(); ++i)
                        if (ew->func.input_maps[i].cols() != vars[ew->inputs[i]].dim)
                            throw program_error("blackbox input map dims");
                }
                if (ew->out < 0 || ew->out >= (int)vars.size() || var_def[ew->out])
                    throw program_error("element_wise output redefined");
                var_def[ew->out] = 1;
            } else if (auto* pr = std::get_if<ProjectStmt>(&st)) {
                if (pr->input >= 0) {
                    if (!var_def[pr->input]) throw program_error("project undefined input");
                    if (pr->A.rows() != vocab() || pr->A.cols() != vars[pr->input].dim)
                        throw program_error("project op dims mismatch");
                } else {
                    if (pr->A.rows() != vocab() || pr->A.cols() != 1)
                        throw program_error("project constant dims mismatch");
                }
                if (pr->out < 0 || pr->out >= (int)logit_names.size() || logit_def[pr->out])
                    throw program_error("logit slot redefined");
                logit_def[pr->out] = 1;
            }
        }
        if (predictions != 1) throw program_error("program needs exactly one prediction");
    }

    // Removes statements whose outputs are unreachable from the prediction.
    void remove_unreachable() {
        std::vector<char> var_used(vars.size(), 0), sel_used(sel_names.size(), 0),
            logit_used(logit_names.size(), 0);
        for (auto it = statements.rbegin(); it != statements.rend(); ++it) {
            if (auto* pred = std::get_if<PredictionStmt>(&*it)) {
                for (int s : pred->logit_slots) logit_used[s] = 1;
            } else if (auto* pr = std::get_if<ProjectStmt>(&*it)) {
                if (logit_used[pr->out] && pr->input >= 0) var_used[pr->input] = 1;
            } else if (auto* ew = std::get_if<ElementWiseStmt>(&*it)) {
                if (var_used[ew->out])
                    for (int v : ew->inputs) var_used[v] = 1;
            } else if (auto* agg = std::get_if<AggregateStmt>(&*it)) {
                if (var_used[agg->out]) {
                    var_used[agg->value] = 1;
                    for (int s : agg->selectors) sel_used[s] = 1;
                }
            } else if (auto* sel = std::get_if<SelectStmt>(&*it)) {
                if (sel_used[sel->out]) {
                    var_used[sel->k] = 1;
                    if (sel->binary) var_used[sel->q] = 1;
                }
            }
        }
        std::vector<Statement> kept;
        for (auto& st : statements) {
            bool keep = true;
            if (auto* sel = std::get_if<SelectStmt>(&st)) keep = sel_used[sel->out];
            else if (auto* agg = std::get_if<AggregateStmt>(&st)) keep = var_used[agg->out];
            else if (auto* ew = std::get_if<ElementWiseStmt>(&st)) keep = var_used[ew->out];
            else if (auto* pr = std::get_if<ProjectStmt>(&st)) keep = logit_used[pr->out];
            if (keep) kept.push_back(std::move(st));
        }
        statements = std::move(kept);
    }
};

// ---- JSON form ----

inline nlohmann::json mat_to_json(const Mat& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.raw()}};
}
inline Mat mat_from_json(const nlohmann::json& j) {
    return Mat(j["rows"], j["cols"], j["data"].get<std::vector<double>>());
}

inline nlohmann::json func_to_json(const ElementFunc& f) {
    nlohmann::json j;
    if (f.kind == ElementFunc::Kind::blackbox_mlp) {
        j["kind"] = "blackbox_mlp";
        j["W1"] = mat_to_json(f.mlp.W1);
        j["b1"] = mat_to_json(f.mlp.b1);
        j["W2"] = mat_to_json(f.mlp.W2);
        j["b2"] = mat_to_json(f.mlp.b2);
        j["input_maps"] = nlohmann::json::array();
        for (auto& m : f.input_maps) j["input_maps"].push_back(mat_to_json(m));
        j["input_const"] = mat_to_json(f.input_const);
    } else {
        j["kind"] = "primitive";
        j["id"] = f.prim_id;
        j["param"] = f.prim_param;
    }
    return j;
}

inline ElementFunc func_from_json(const nlohmann::json& j) {
    ElementFunc f;
    if (j["kind"] == "blackbox_mlp") {
        f.kind = ElementFunc::Kind::blackbox_mlp;
        f.mlp.W1 = mat_from_json(j["W1"]);
        f.mlp.b1 = mat_from_json(j["b1"]);
        f.mlp.W2 = mat_from_json(j["W2"]);
        f.mlp.b2 = mat_from_json(j["b2"]);
        for (auto& m : j["input_maps"]) f.input_maps.push_back(mat_from_json(m));
        f.input_const = mat_from_json(j["input_const"]);
    } else {
        f.kind = ElementFunc::Kind::primitive;
        f.prim_id = j["id"];
        f.prim_param = j["param"];
    }
    return f;
}

inline nlohmann::json program_to_json(const DRaspProgram& p) {
    nlohmann::json j;
    j["alphabet"] = p.alphabet;
    j["T"] = p.T;
    j["objective"] =
        p.objective == Objective::language_model ? "language_model" : "multi_label_validity";
    j["special_tokens"] = {{"BOS", TOK_BOS}, {"SEP", TOK_SEP}, {"EOS", TOK_EOS}, {"PAD", TOK_PAD}};
    j["vars"] = nlohmann::json::array();
    for (auto& v : p.vars) {
        const char* basis = v.basis == Basis::token ? "token"
                            : v.basis == Basis::position ? "position"
                            : v.basis == Basis::residual ? "residual"
                            : v.basis == Basis::primitive_output ? "primitive_output"
                                                                 : "product";
        j["vars"].push_back(
            {{"name", v.name}, {"dim", v.dim}, {"basis", basis}, {"layer", v.layer}, {"head", v.head}});
    }
    j["selectors"] = p.sel_names;
    j["logits"] = p.logit_names;
    j["metadata"] = p.metadata;
    j["statements"] = nlohmann::json::array();
    for (auto& st : p.statements) {
        nlohmann::json s;
        if (auto* sel = std::get_if<SelectStmt>(&st)) {
            s["kind"] = "select";
            s["out"] = sel->out;
            s["binary"] = sel->binary;
            s["q"] = sel->q;
            s["k"] = sel->k;
            s["A"] = mat_to_json(sel->A);
            s["op_name"] = sel->op_name;
            s["special_op_name"] = sel->special_op_name;
        } else if (auto* agg = std::get_if<AggregateStmt>(&st)) {
            s["kind"] = "aggregate";
            s["out"] = agg->out;
            s["selectors"] = agg->selectors;
            s["value"] = agg->value;
        } else if (auto* ew = std::get_if<ElementWiseStmt>(&st)) {
            s["kind"] = "element_wise";
            s["out"] = ew->out;
            s["inputs"] = ew->inputs;
            s["func"] = func_to_json(ew->func);
        } else if (auto* pr = std::get_if<ProjectStmt>(&st)) {
            s["kind"] = "project";
            s["out"] = pr->out;
            s["input"] = pr->input;
            s["A"] = mat_to_json(pr->A);
            s["op_name"] = pr->op_name;
            s["special_op_name"] = pr->special_op_name;
        } else if (auto* pred = std::get_if<PredictionStmt>(&st)) {
            s["kind"] = "prediction";
            s["phi"] = pred->phi == PredictionStmt::Phi::softmax ? "softmax" : "sigmoid";
            s["logit_slots"] = pred->logit_slots;
        }
        j["statements"].push_back(std::move(s));
    }
    return j;
}

inline DRaspProgram program_from_json(const nlohmann::json& j) {
    DRaspProgram p;
    p.alphabet = j["alphabet"].get<std::vector<std::string>>();
    p.T = j["T"];
    p.objective = j["objective"] == "language_model" ? Objective::language_model
                                                     : Objective::multi_label_validity;
    for (auto& v : j["vars"]) {
        std::string b = v["basis"];
        Basis basis = b == "token" ? Basis::token
                      : b == "position" ? Basis::position
                      : b == "residual" ? Basis::residual
                      : b == "primitive_output" ? Basis::primitive_output
                                                : Basis::product;
        p.vars.push_back({v["name"], v["dim"], basis, v["layer"], v["head"]});
    }
    p.sel_names = j["selectors"].get<std::vector<std::string>>();
    p.logit_names = j["logits"].get<std::vector<std::string>>();
    p.metadata = j.value("metadata", nlohmann::json::object());
    for (auto& s : j["statements"]) {
        std::string kind = s["kind"];
        if (kind == "select") {
            SelectStmt sel;
            sel.out = s["out"];
            sel.binary = s["binary"];
            sel.q = s["q"];
            sel.k = s["k"];
            sel.A = mat_from_json(s["A"]);
            sel.op_name = s["op_name"];
            sel.special_op_name = s["special_op_name"];
            p.statements.push_back(sel);
        } else if (kind == "aggregate") {
            AggregateStmt agg;
            agg.out = s["out"];
            agg.selectors = s["selectors"].get<std::vector<int>>();
            agg.value = s["value"];
            p.statements.push_back(agg);
        } else if (kind == "element_wise") {
            ElementWiseStmt ew;
            ew.out = s["out"];
            ew.inputs = s["inputs"].get<std::vector<int>>();
            ew.func = func_from_json(s["func"]);
            p.statements.push_back(ew);
        } else if (kind == "project") {
            ProjectStmt pr;
            pr.out = s["out"];
            pr.input = s["input"];
            pr.A = mat_from_json(s["A"]);
            pr.op_name = s["op_name"];
            pr.special_op_name = s["special_op_name"];
            p.statements.push_back(pr);
        } else if (kind == "prediction") {
            PredictionStmt pred;
            pred.phi = s["phi"] == "softmax" ? PredictionStmt::Phi::softmax
                                             : PredictionStmt::Phi::sigmoid;
            pred.logit_slots = s["logit_slots"].get<std::vector<int>>();
            p.statements.push_back(pred);
        } else {
            throw program_error("unknown statement kind in json: " + kind);
        }
    }
    return p;
}

} // namespace drasp
