#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "drasp/mat.hpp"
#include "drasp/rng.hpp"

#include <json.hpp>

namespace drasp {

struct generation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct alignment_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fixed special-token layout; alphabet symbols follow in listed order.
constexpr int TOK_BOS = 0;
constexpr int TOK_SEP = 1;
constexpr int TOK_EOS = 2;
constexpr int TOK_PAD = 3;
constexpr int NUM_SPECIAL = 4;

enum class Objective { language_model, multi_label_validity };

// Finite automaton over the normal alphabet; used both for the formal
// languages and for bounded Dyck (whose depth counter is a finite state).
struct Dfa {
    int start = 0;
    std::vector<std::vector<int>> next;  // next[state][symbol], -1 = reject
    std::vector<char> accepting;

    int num_states() const { return (int)accepting.size(); }

    std::vector<char> live_states() const {
        std::vector<char> live(num_states(), 0);
        bool changed = true;
        for (int s = 0; s < num_states(); ++s) live[s] = accepting[s];
        while (changed) {
            changed = false;
            for (int s = 0; s < num_states(); ++s) {
                if (live[s]) continue;
                for (int a = 0; a < (int)next[s].size(); ++a)
                    if (next[s][a] >= 0 && live[next[s][a]]) {
                        live[s] = 1;
                        changed = true;
                        break;
                    }
            }
        }
        return live;
    }
};

struct TaskSpec {
    std::string name;
    std::vector<std::string> alphabet;  // normal symbols, token ids NUM_SPECIAL..
    Objective objective = Objective::language_model;
    int min_len = 1;   // body length bounds (symbols between the special frame)
    int max_len = 20;
    int T = 64;        // max context length

    // task-specific
    int dyck_depth = 0;
    Dfa dfa;           // for formal-language tasks
    bool uses_eos = true;

    int vocab_size() const { return NUM_SPECIAL + (int)alphabet.size(); }
    int sym(int alphabet_index) const { return NUM_SPECIAL + alphabet_index; }
    bool is_special(int tok) const { return tok < NUM_SPECIAL; }
};

struct Instance {
    std::vector<int> tokens;
    std::vector<int> lm_targets;            // aligned with tokens; -1 = unsupervised
    std::vector<std::vector<char>> valid_next;  // aligned; sized vocab at supervised positions
    std::vector<char> supervised;           // loss-bearing positions
    int offset = 0;

    int length() const { return (int)tokens.size(); }
};

// ---- task construction ----

inline TaskSpec make_binary_majority(int max_len = 20, int T = 64) {
    TaskSpec s;
    s.name = "binary_majority";
    s.alphabet = {"0", "1"};
    s.objective = Objective::language_model;
    s.min_len = 1;
    s.max_len = max_len;
    s.T = T;
    s.uses_eos = false;
    return s;
}

inline TaskSpec make_most_frequent(int num_symbols = 26, int max_len = 20, int T = 64) {
    TaskSpec s;
    s.name = "most_frequent";
    for (int i = 0; i < num_symbols; ++i)
        s.alphabet.push_back(i < 26 ? std::string(1, char('a' + i)) : "s" + std::to_string(i));
    s.objective = Objective::language_model;
    s.min_len = 1;
    s.max_len = max_len;
    s.T = T;
    s.uses_eos = false;
    return s;
}

inline TaskSpec make_numeric_task(const std::string& name, int num_symbols, int max_len, int T) {
    TaskSpec s;
    s.name = name;
    for (int i = 0; i < num_symbols; ++i) s.alphabet.push_back(std::to_string(i));
    s.objective = Objective::language_model;
    s.min_len = 1;
    s.max_len = max_len;
    s.T = T;
    return s;
}

inline TaskSpec make_unique_copy(int num_symbols = 26, int max_len = 20, int T = 64) {
    return make_numeric_task("unique_copy", num_symbols, max_len, T);
}
inline TaskSpec make_sort(int num_symbols = 26, int max_len = 20, int T = 64) {
    return make_numeric_task("sort", num_symbols, max_len, T);
}
inline TaskSpec make_count(int num_symbols = 30, int max_len = 20, int T = 64) {
    return make_numeric_task("count", num_symbols, max_len, T);
}

inline TaskSpec make_dyck(int depth, int max_len = 20, int T = 64) {
    TaskSpec s;
    s.name = "D" + std::to_string(depth);
    s.alphabet = {"a", "b"};
    s.objective = Objective::multi_label_validity;
    s.min_len = 0;
    s.max_len = max_len;
    s.T = T;
    s.dyck_depth = depth;
    Dfa d;
    d.start = 0;
    d.accepting.assign(depth + 1, 0);
    d.accepting[0] = 1;
    d.next.assign(depth + 1, {-1, -1});
    for (int h = 0; h <= depth; ++h) {
        if (h < depth) d.next[h][0] = h + 1;  // 'a'
        if (h > 0) d.next[h][1] = h - 1;      // 'b'
    }
    s.dfa = d;
    return s;
}

inline TaskSpec make_regular(const std::string& which, int max_len = 20, int T = 64) {
    TaskSpec s;
    s.objective = Objective::multi_label_validity;
    s.min_len = 0;
    s.max_len = max_len;
    s.T = T;
    Dfa d;
    if (which == "tomita1") {  // 1*
        s.name = "tomita1";
        s.alphabet = {"0", "1"};
        d.start = 0;
        d.accepting = {1, 0};
        d.next = {{1, 0}, {1, 1}};
    } else if (which == "tomita2") {  // (10)*
        s.name = "tomita2";
        s.alphabet = {"0", "1"};
        // states: 0 = even pairs (accept), 1 = saw '1', 2 = dead
        d.start = 0;
        d.accepting = {1, 0, 0};
        d.next = {{2, 1}, {0, 2}, {2, 2}};
    } else if (which == "aa_star") {  // (aa)*
        s.name = "aa_star";
        s.alphabet = {"a"};
        d.start = 0;
        d.accepting = {1, 0};
        d.next = {{1}, {0}};
    } else if (which == "abcde") {  // aa*bb*cc*dd*ee*
        s.name = "abcde";
        s.alphabet = {"a", "b", "c", "d", "e"};
        // state k = 1 + index of the symbol block we are inside, 0 = start
        d.start = 0;
        d.accepting = {0, 0, 0, 0, 0, 1};
        d.next.assign(6, std::vector<int>(5, -1));
        d.next[0][0] = 1;
        for (int st = 1; st <= 5; ++st) {
            d.next[st][st - 1] = st;               // repeat current symbol
            if (st < 5) d.next[st][st] = st + 1;   // advance to next block
        }
    } else {
        throw generation_error("unknown regular language: " + which);
    }
    s.dfa = d;
    return s;
}

inline TaskSpec make_task(const std::string& name, int max_len = 20, int T = 64,
                          int num_symbols = 26) {
    if (name == "binary_majority") return make_binary_majority(max_len, T);
    if (name == "most_frequent") return make_most_frequent(num_symbols, max_len, T);
    if (name == "unique_copy") return make_unique_copy(num_symbols, max_len, T);
    if (name == "sort") return make_sort(num_symbols, max_len, T);
    if (name == "count") return make_count(num_symbols, max_len, T);
    if (name.size() > 1 && name[0] == 'D') return make_dyck(std::stoi(name.substr(1)), max_len, T);
    return make_regular(name, max_len, T);
}

// ---- generation ----

namespace detail {

// counts[len][state] = number of strings of that length accepted from state;
// capped to avoid overflow, used only for feasibility + proportional sampling
inline std::vector<std::vector<double>> dfa_counts(const Dfa& d, int max_len) {
    int ns = d.num_states(), na = (int)d.next[0].size();
    std::vector<std::vector<double>> cnt(max_len + 1, std::vector<double>(ns, 0.0));
    for (int s = 0; s < ns; ++s) cnt[0][s] = d.accepting[s] ? 1.0 : 0.0;
    for (int l = 1; l <= max_len; ++l)
        for (int s = 0; s < ns; ++s) {
            double tot = 0;
            for (int a = 0; a < na; ++a)
                if (d.next[s][a] >= 0) tot += cnt[l - 1][d.next[s][a]];
            cnt[l][s] = std::min(tot, 1e300);
        }
    return cnt;
}

inline std::vector<int> sample_dfa_string(const Dfa& d, int len,
                                          const std::vector<std::vector<double>>& cnt, Rng& rng) {
    std::vector<int> out;
    int s = d.start;
    int na = (int)d.next[0].size();
    for (int l = len; l > 0; --l) {
        double tot = cnt[l][s];
        if (tot <= 0) throw generation_error("dfa sampling hit dead state");
        double r = rng.uniform() * tot;
        int chosen = -1;
        for (int a = 0; a < na; ++a) {
            if (d.next[s][a] < 0) continue;
            double w = cnt[l - 1][d.next[s][a]];
            if (r < w) {
                chosen = a;
                break;
            }
            r -= w;
        }
        if (chosen < 0) {
            for (int a = na - 1; a >= 0; --a)
                if (d.next[s][a] >= 0 && cnt[l - 1][d.next[s][a]] > 0) {
                    chosen = a;
                    break;
                }
        }
        out.push_back(chosen);
        s = d.next[s][chosen];
    }
    return out;
}

} // namespace detail

// Generates n i.i.d. instances with body lengths uniform over the admissible
// lengths inside len_range, random position offsets in [0, T - len].
inline std::vector<Instance> generate(const TaskSpec& spec, int n, int len_lo, int len_hi,
                                      uint64_t seed) {
    if (len_lo < spec.min_len || len_hi > spec.max_len || len_lo > len_hi)
        throw generation_error("len_range outside task bounds");
    Rng rng(seed ^ 0x5eedf00dULL);
    std::vector<Instance> out;
    out.reserve(n);

    const int V = spec.vocab_size();
    const bool dfa_task = spec.objective == Objective::multi_label_validity;
    std::vector<std::vector<double>> cnt;
    std::vector<char> live;
    std::vector<int> feasible_lens;
    if (dfa_task) {
        cnt = detail::dfa_counts(spec.dfa, len_hi);
        live = spec.dfa.live_states();
        for (int l = len_lo; l <= len_hi; ++l)
            if (cnt[l][spec.dfa.start] > 0) feasible_lens.push_back(l);
        if (feasible_lens.empty())
            throw generation_error("no admissible lengths for " + spec.name + " in range");
    } else {
        for (int l = len_lo; l <= len_hi; ++l) feasible_lens.push_back(l);
    }

    auto finish = [&](Instance& inst) {
        int len = inst.length();
        if (len > spec.T) throw generation_error("instance longer than context");
        inst.offset = (int)rng.below(uint64_t(spec.T - len + 1));
        out.push_back(std::move(inst));
    };

    for (int k = 0; k < n; ++k) {
        int body = feasible_lens[rng.below(feasible_lens.size())];
        Instance inst;

        if (spec.name == "binary_majority" || spec.name == "most_frequent") {
            int na = (int)spec.alphabet.size();
            std::vector<int> syms(body);
            std::vector<int> hist;
            while (true) {
                hist.assign(na, 0);
                for (auto& x : syms) {
                    x = (int)rng.below(na);
                    hist[x]++;
                }
                int best = (int)(std::max_element(hist.begin(), hist.end()) - hist.begin());
                if (std::count(hist.begin(), hist.end(), hist[best]) == 1) break;
            }
            int best = (int)(std::max_element(hist.begin(), hist.end()) - hist.begin());
            inst.tokens.push_back(TOK_BOS);
            for (int x : syms) inst.tokens.push_back(spec.sym(x));
            inst.tokens.push_back(TOK_SEP);
            inst.tokens.push_back(spec.sym(best));
            int L = inst.length();
            inst.lm_targets.assign(L, -1);
            inst.supervised.assign(L, 0);
            inst.supervised[L - 2] = 1;  // at SEP, predict the answer
            inst.lm_targets[L - 2] = inst.tokens[L - 1];
        } else if (spec.name == "unique_copy" || spec.name == "sort") {
            int na = (int)spec.alphabet.size();
            if (body > na)
                throw generation_error(spec.name + ": body length exceeds distinct symbols");
            std::vector<int> pool(na);
            std::iota(pool.begin(), pool.end(), 0);
            for (int i = 0; i < body; ++i) std::swap(pool[i], pool[i + rng.below(na - i)]);
            std::vector<int> syms(pool.begin(), pool.begin() + body);
            std::vector<int> answer = syms;
            if (spec.name == "sort") std::sort(answer.begin(), answer.end());
            inst.tokens.push_back(TOK_BOS);
            for (int x : syms) inst.tokens.push_back(spec.sym(x));
            inst.tokens.push_back(TOK_SEP);
            for (int x : answer) inst.tokens.push_back(spec.sym(x));
            inst.tokens.push_back(TOK_EOS);
            int L = inst.length();
            inst.lm_targets.assign(L, -1);
            inst.supervised.assign(L, 0);
            int sep_pos = body + 1;
            for (int i = sep_pos; i < L - 1; ++i) {
                inst.supervised[i] = 1;
                inst.lm_targets[i] = inst.tokens[i + 1];
            }
        } else if (spec.name == "count") {
            int na = (int)spec.alphabet.size();
            int run = std::min(body, na);
            int start = (int)rng.below(uint64_t(na - run + 1));
            inst.tokens.push_back(TOK_BOS);
            inst.tokens.push_back(spec.sym(start));
            inst.tokens.push_back(spec.sym(start + run - 1));
            inst.tokens.push_back(TOK_SEP);
            for (int x = start; x < start + run; ++x) inst.tokens.push_back(spec.sym(x));
            inst.tokens.push_back(TOK_EOS);
            int L = inst.length();
            inst.lm_targets.assign(L, -1);
            inst.supervised.assign(L, 0);
            for (int i = 3; i < L - 1; ++i) {
                inst.supervised[i] = 1;
                inst.lm_targets[i] = inst.tokens[i + 1];
            }
        } else if (dfa_task) {
            std::vector<int> syms = detail::sample_dfa_string(spec.dfa, body, cnt, rng);
            inst.tokens.push_back(TOK_BOS);
            for (int x : syms) inst.tokens.push_back(spec.sym(x));
            int L = inst.length();
            inst.supervised.assign(L, 1);
            inst.lm_targets.assign(L, -1);
            inst.valid_next.assign(L, std::vector<char>(V, 0));
            int st = spec.dfa.start;
            for (int i = 0; i < L; ++i) {
                if (i > 0) st = spec.dfa.next[st][inst.tokens[i] - NUM_SPECIAL];
                for (int a = 0; a < (int)spec.alphabet.size(); ++a) {
                    int nx = spec.dfa.next[st][a];
                    if (nx >= 0 && live[nx]) inst.valid_next[i][spec.sym(a)] = 1;
                }
                if (spec.dfa.accepting[st]) inst.valid_next[i][TOK_EOS] = 1;
                bool any = false;
                for (char c : inst.valid_next[i]) any = any || c;
                if (!any) throw generation_error("empty validity target");
            }
        } else {
            throw generation_error("unknown task: " + spec.name);
        }
        finish(inst);
    }
    return out;
}

// ---- predictions and accuracy ----

// argmax with lowest-token-id tie break
inline int argmax_lowest(const Mat& logits, int col) {
    int best = 0;
    for (int i = 1; i < logits.rows(); ++i)
        if (logits(i, col) > logits(best, col)) best = i;
    return best;
}

inline std::vector<char> validity_set(const Mat& logits, int col) {
    std::vector<char> v(logits.rows(), 0);
    for (int i = 0; i < logits.rows(); ++i) v[i] = logits(i, col) >= 0.0 ? 1 : 0;
    return v;
}

inline bool prediction_correct(const TaskSpec& spec, const Mat& logits, const Instance& inst) {
    if (logits.cols() != inst.length()) throw alignment_error("outputs misaligned with instance");
    for (int i = 0; i < inst.length(); ++i) {
        if (!inst.supervised[i]) continue;
        if (spec.objective == Objective::language_model) {
            if (argmax_lowest(logits, i) != inst.lm_targets[i]) return false;
        } else {
            if (validity_set(logits, i) != inst.valid_next[i]) return false;
        }
    }
    return true;
}

inline double task_accuracy(const TaskSpec& spec, const std::vector<Mat>& outputs,
                            const std::vector<Instance>& instances) {
    if (instances.empty()) throw alignment_error("task_accuracy: empty instance list");
    if (outputs.size() != instances.size()) throw alignment_error("task_accuracy: misaligned");
    int good = 0;
    for (size_t k = 0; k < instances.size(); ++k)
        if (prediction_correct(spec, outputs[k], instances[k])) ++good;
    return double(good) / instances.size();
}

// fraction of instances where the two output sets make identical predictions
// at every supervised position
inline double match_accuracy(const TaskSpec& spec, const std::vector<Mat>& a,
                             const std::vector<Mat>& b, const std::vector<Instance>& instances) {
    if (instances.empty()) throw alignment_error("match_accuracy: empty instance list");
    if (a.size() != instances.size() || b.size() != instances.size())
        throw alignment_error("match_accuracy: misaligned");
    int agree = 0;
    for (size_t k = 0; k < instances.size(); ++k) {
        const Instance& inst = instances[k];
        if (a[k].cols() != inst.length() || b[k].cols() != inst.length())
            throw alignment_error("match_accuracy: output length mismatch");
        bool same = true;
        for (int i = 0; i < inst.length() && same; ++i) {
            if (!inst.supervised[i]) continue;
            if (spec.objective == Objective::language_model)
                same = argmax_lowest(a[k], i) == argmax_lowest(b[k], i);
            else
                same = validity_set(a[k], i) == validity_set(b[k], i);
        }
        if (same) ++agree;
    }
    return double(agree) / instances.size();
}

// ---- dataset dump: one JSON object per line ----

inline void write_jsonl(const std::vector<Instance>& instances, const TaskSpec& spec,
                        const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    for (const auto& inst : instances) {
        nlohmann::json j;
        j["tokens"] = inst.tokens;
        j["offset"] = inst.offset;
        if (spec.objective == Objective::language_model) {
            j["targets"] = inst.lm_targets;
        } else {
            nlohmann::json rows = nlohmann::json::array();
            for (const auto& v : inst.valid_next) {
                std::vector<int> ids;
                for (int i = 0; i < (int)v.size(); ++i)
                    if (v[i]) ids.push_back(i);
                rows.push_back(ids);
            }
            j["targets"] = rows;
        }
        f << j.dump() << "\n";
    }
}

inline std::vector<Instance> read_jsonl(const TaskSpec& spec, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<Instance> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        Instance inst;
        inst.tokens = j["tokens"].get<std::vector<int>>();
        inst.offset = j["offset"].get<int>();
        int L = inst.length();
        inst.supervised.assign(L, 0);
        if (spec.objective == Objective::language_model) {
            inst.lm_targets = j["targets"].get<std::vector<int>>();
            for (int i = 0; i < L; ++i) inst.supervised[i] = inst.lm_targets[i] >= 0;
        } else {
            inst.lm_targets.assign(L, -1);
            inst.valid_next.assign(L, std::vector<char>(spec.vocab_size(), 0));
            auto rows = j["targets"];
            for (int i = 0; i < L; ++i) {
                for (int id : rows[i].get<std::vector<int>>()) inst.valid_next[i][id] = 1;
                inst.supervised[i] = 1;
            }
        }
        out.push_back(std::move(inst));
    }
    return out;
}

} // namespace drasp
