#pragma once

#include <algorithm>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mixrec/common.hpp"

namespace mixrec {

// How one feed-forward-branch block is mixed with the generative branch:
//   A: local block, no generative partner, no mixing.
//   B: local block paired with a generative block via cross-attention.
//   C: global block fused with a generative block into one joint attention.
enum class BlockKind { A, B, C };

inline char kind_letter(BlockKind k) {
    switch (k) {
        case BlockKind::A: return 'A';
        case BlockKind::B: return 'B';
        default: return 'C';
    }
}

struct BlockMatchEntry {
    BlockKind kind = BlockKind::A;
    std::optional<int> t_index; // generative-branch block, absent for kind A
    int p_index = 0;            // feed-forward-branch block
};

struct BlockMatchConfig {
    int n_trellis = 0;
    int n_pi3 = 0;
    std::vector<BlockMatchEntry> entries; // ordered by p_index

    // B/C entries ordered by their generative-branch index.
    std::vector<BlockMatchEntry> by_t_index() const {
        std::vector<BlockMatchEntry> out;
        for (const auto& e : entries)
            if (e.t_index) out.push_back(e);
        std::sort(out.begin(), out.end(),
                  [](const auto& a, const auto& b) { return *a.t_index < *b.t_index; });
        return out;
    }
};

// Derives the block matching between an n_trellis-block generative branch
// and an n_pi3-block branch alternating local/global attention (local
// first, so global blocks sit at odd indices):
//   1. global block g of G maps to generative block floor(g*n_trellis/G),
//      except the last one which is forced to the final generative block;
//   2. each generative block left unmatched pairs, in order, with the
//      local blocks strictly between its neighboring global matches;
//   3. every remaining local block runs unmixed.
inline BlockMatchConfig match_blocks(int n_trellis, int n_pi3) {
    if (n_pi3 < 2 || n_pi3 % 2 != 0)
        throw InfeasibleMatch("match_blocks: the local/global branch needs an even "
                              "positive block count");
    int globals = n_pi3 / 2;
    if (n_trellis < 1 || globals > n_trellis)
        throw InfeasibleMatch(
            "match_blocks: more global blocks than generative blocks");

    // Step 1: uniform injection of globals; the endpoint is pinned so the
    // final global pairs with the final generative block (the plain floor
    // rule would strand generative blocks after the last global with no
    // local block left to host them).
    std::vector<std::pair<int, int>> c_pairs; // (t, p)
    for (int g = 0; g < globals; ++g) {
        int t = (g == globals - 1) ? n_trellis - 1
                                   : static_cast<int>((static_cast<long>(g) * n_trellis) /
                                                      globals);
        c_pairs.emplace_back(t, 2 * g + 1);
    }
    for (std::size_t i = 1; i < c_pairs.size(); ++i)
        if (c_pairs[i].first <= c_pairs[i - 1].first)
            throw InfeasibleMatch("match_blocks: global injection is not strictly "
                                  "increasing");

    // Step 2: fill the gaps with B pairs.
    std::vector<std::pair<int, int>> b_pairs;
    auto fill_gap = [&](int t_lo, int t_hi, int p_lo, int p_hi) {
        // Generative blocks strictly inside (t_lo, t_hi) pair with local
        // blocks strictly inside (p_lo, p_hi), both in increasing order.
        std::vector<int> ts, ps;
        for (int t = t_lo + 1; t < t_hi; ++t) ts.push_back(t);
        for (int p = p_lo + 1; p < p_hi; ++p)
            if (p % 2 == 0) ps.push_back(p);
        if (ts.size() > ps.size())
            throw InfeasibleMatch(
                "match_blocks: a gap has more unmatched generative blocks than "
                "local blocks");
        for (std::size_t i = 0; i < ts.size(); ++i) b_pairs.emplace_back(ts[i], ps[i]);
    };
    fill_gap(-1, c_pairs.front().first, -1, c_pairs.front().second);
    for (std::size_t i = 1; i < c_pairs.size(); ++i)
        fill_gap(c_pairs[i - 1].first, c_pairs[i].first, c_pairs[i - 1].second,
                 c_pairs[i].second);
    fill_gap(c_pairs.back().first, n_trellis, c_pairs.back().second, n_pi3);

    // Step 3: assemble in p order; untouched locals become kind A.
    BlockMatchConfig cfg;
    cfg.n_trellis = n_trellis;
    cfg.n_pi3 = n_pi3;
    std::vector<std::optional<std::pair<BlockKind, int>>> slot(n_pi3);
    for (const auto& [t, p] : c_pairs) slot[p] = {BlockKind::C, t};
    for (const auto& [t, p] : b_pairs) slot[p] = {BlockKind::B, t};
    for (int p = 0; p < n_pi3; ++p) {
        BlockMatchEntry e;
        e.p_index = p;
        if (slot[p]) {
            e.kind = slot[p]->first;
            e.t_index = slot[p]->second;
        }
        cfg.entries.push_back(e);
    }
    return cfg;
}

struct ValidationReport {
    struct Check {
        std::string name;
        bool pass = false;
    };
    std::vector<Check> checks;
    bool all_pass() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return true;
    }
};

// Checks every structural invariant of a BlockMatchConfig and reports
// per-invariant pass/fail without throwing.
inline ValidationReport validate_config(const BlockMatchConfig& cfg) {
    ValidationReport rep;
    auto add = [&](const std::string& name, bool pass) {
        rep.checks.push_back({name, pass});
    };

    std::vector<int> p_seen(std::max(cfg.n_pi3, 0), 0);
    bool p_in_range = true;
    for (const auto& e : cfg.entries) {
        if (e.p_index < 0 || e.p_index >= cfg.n_pi3)
            p_in_range = false;
        else
            ++p_seen[e.p_index];
    }
    bool p_unique = p_in_range && static_cast<int>(cfg.entries.size()) == cfg.n_pi3;
    for (int c : p_seen) p_unique = p_unique && c == 1;
    add("every p index appears exactly once", p_unique);

    std::vector<int> t_seen(std::max(cfg.n_trellis, 0), 0);
    bool t_ok = true;
    for (const auto& e : cfg.entries) {
        if (!e.t_index) continue;
        if (*e.t_index < 0 || *e.t_index >= cfg.n_trellis)
            t_ok = false;
        else
            ++t_seen[*e.t_index];
    }
    for (int c : t_seen) t_ok = t_ok && c == 1;
    add("every t index appears exactly once among B/C entries", t_ok);

    bool kinds_ok = true;
    for (const auto& e : cfg.entries) {
        if (e.kind == BlockKind::A && e.t_index) kinds_ok = false;
        if (e.kind != BlockKind::A && !e.t_index) kinds_ok = false;
        if (e.kind == BlockKind::C && e.p_index % 2 == 0) kinds_ok = false;
        if (e.kind == BlockKind::B && e.p_index % 2 == 1) kinds_ok = false;
    }
    add("kind A has no t; C pairs with globals (odd p); B with locals (even p)",
        kinds_ok);

    bool monotone = true;
    int last_t = -1;
    std::vector<BlockMatchEntry> sorted = cfg.entries;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.p_index < b.p_index; });
    for (const auto& e : sorted) {
        if (!e.t_index) continue;
        if (*e.t_index <= last_t) monotone = false;
        last_t = *e.t_index;
    }
    add("t indices strictly increase along increasing p", monotone);

    return rep;
}

// Canonical JSON serialization; committed golden files compare against
// these exact bytes.
inline std::string to_json(const BlockMatchConfig& cfg) {
    std::ostringstream os;
    os << "{\n";
    os << "  \"n_trellis\": " << cfg.n_trellis << ",\n";
    os << "  \"n_pi3\": " << cfg.n_pi3 << ",\n";
    os << "  \"entries\": [\n";
    for (std::size_t i = 0; i < cfg.entries.size(); ++i) {
        const auto& e = cfg.entries[i];
        os << "    {\"kind\": \"" << kind_letter(e.kind) << "\", \"p\": " << e.p_index;
        if (e.t_index) os << ", \"t\": " << *e.t_index;
        os << "}" << (i + 1 < cfg.entries.size() ? "," : "") << "\n";
    }
    os << "  ]\n";
    os << "}\n";
    return os.str();
}

// Two-rail text diagram of the matching: one line per branch block with
// connectors for B/C pairs.
inline std::string to_diagram(const BlockMatchConfig& cfg) {
    std::ostringstream os;
    os << "p-branch        t-branch\n";
    for (const auto& e : cfg.entries) {
        os << "P" << (e.p_index < 10 ? "0" : "") << e.p_index;
        os << (e.p_index % 2 == 1 ? " (global)" : " (local) ");
        switch (e.kind) {
            case BlockKind::A:
                os << "  [A]\n";
                break;
            case BlockKind::B:
                os << "  [B] --- T" << (*e.t_index < 10 ? "0" : "") << *e.t_index
                   << "\n";
                break;
            case BlockKind::C:
                os << "  [C] === T" << (*e.t_index < 10 ? "0" : "") << *e.t_index
                   << "\n";
                break;
        }
    }
    return os.str();
}

} // namespace mixrec
