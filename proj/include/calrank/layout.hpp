#pragma once

// Listwise sequence assembly: instruction + query prefix, M candidate blocks
// (content + <DOC_END>), and M trailing identifier tokens, together with the
// attention-permission matrix and per-token position indices.
//
// Layout rules:
//   (a) prefix tokens take positions 0..P-1 with causal permissions among
//       themselves;
//   (b) every candidate block takes positions starting at P -- identical
//       across blocks -- with permissions to the prefix and causally within
//       its own block only;
//   (c) identifier k may attend the prefix, the whole of candidate block k,
//       and itself: not other blocks and not other identifiers;
//   (d) identifier k's position index continues its own block: P + len_k.
//
// Rules (c)/(d) keep every score a function of (prefix, own candidate) only,
// which is what makes candidate order and window assignment provably
// irrelevant to the emitted scores.

#include <cstdint>
#include <string>
#include <vector>

#include <stdexcept>

namespace calrank {

using TokenId = std::int32_t;

struct LayoutConfig {
    std::vector<TokenId> instruction_template; // fixed instruction tokens, may be empty
    int max_candidate_tokens = 16;             // cap per block, content + <DOC_END>
    int num_slots = 20;                        // M
    TokenId doc_end_id = 1;
    std::vector<TokenId> identifier_ids;       // ID_1..ID_M

    void validate() const {
        if (num_slots < 1) throw std::invalid_argument("LayoutConfig: num_slots must be >= 1");
        if (max_candidate_tokens < 2)
            throw std::invalid_argument("LayoutConfig: max_candidate_tokens must be >= 2");
        if (static_cast<int>(identifier_ids.size()) != num_slots)
            throw std::invalid_argument("LayoutConfig: identifier_ids must have num_slots entries");
        for (std::size_t i = 0; i < identifier_ids.size(); ++i) {
            if (identifier_ids[i] == doc_end_id)
                throw std::invalid_argument("LayoutConfig: identifier id collides with doc_end id");
            for (std::size_t j = i + 1; j < identifier_ids.size(); ++j)
                if (identifier_ids[i] == identifier_ids[j])
                    throw std::invalid_argument("LayoutConfig: duplicate identifier ids");
        }
    }
};

/// Pre-tokenized input for one query with exactly M candidates.
struct TokenizedExample {
    std::vector<TokenId> query_tokens;
    std::vector<std::vector<TokenId>> candidate_tokens;
};

enum class SegmentKind : std::uint8_t { Prefix = 0, Candidate = 1, Identifier = 2 };

struct SequenceLayout {
    std::vector<TokenId> tokens;
    std::vector<std::int64_t> positions;
    std::vector<SegmentKind> segment;
    std::vector<std::int32_t> segment_slot;    // candidate/identifier slot, -1 for prefix
    std::vector<std::uint8_t> permit;          // row-major [len*len], permit(i,j): may i attend j
    std::vector<std::int64_t> idx_st;          // <DOC_END> physical index per slot
    std::vector<std::int64_t> idx_id;          // identifier physical index per slot

    std::size_t size() const { return tokens.size(); }
    int slots() const { return static_cast<int>(idx_id.size()); }
    bool permits(std::size_t i, std::size_t j) const { return permit[i * size() + j] != 0; }
    void set_permit(std::size_t i, std::size_t j, bool v) {
        permit[i * size() + j] = v ? 1 : 0;
    }
    /// Length of candidate block k including its <DOC_END> token.
    std::int64_t block_len(int k) const {
        std::int64_t first = k == 0 ? static_cast<std::int64_t>(prefix_len())
                                    : idx_st[static_cast<std::size_t>(k) - 1] + 1;
        return idx_st[static_cast<std::size_t>(k)] - first + 1;
    }
    std::size_t prefix_len() const {
        std::size_t p = 0;
        while (p < segment.size() && segment[p] == SegmentKind::Prefix) ++p;
        return p;
    }
};

inline SequenceLayout build_layout(const TokenizedExample& example, const LayoutConfig& config) {
    config.validate();
    const int m = config.num_slots;
    if (static_cast<int>(example.candidate_tokens.size()) != m)
        throw std::invalid_argument("build_layout: expected " + std::to_string(m) + " candidates, got " +
                                    std::to_string(example.candidate_tokens.size()));

    SequenceLayout out;
    // prefix
    for (TokenId t : config.instruction_template) out.tokens.push_back(t);
    for (TokenId t : example.query_tokens) out.tokens.push_back(t);
    const std::size_t prefix = out.tokens.size();
    for (std::size_t i = 0; i < prefix; ++i) {
        out.positions.push_back(static_cast<std::int64_t>(i));
        out.segment.push_back(SegmentKind::Prefix);
        out.segment_slot.push_back(-1);
    }

    // candidate blocks: truncated content + <DOC_END>, positions restart at P for each block
    std::vector<std::int64_t> block_start, block_len;
    for (int k = 0; k < m; ++k) {
        const auto& cand = example.candidate_tokens[static_cast<std::size_t>(k)];
        if (cand.empty())
            throw std::invalid_argument("build_layout: candidate " + std::to_string(k + 1) +
                                        " empty after truncation");
        std::size_t keep = std::min(cand.size(), static_cast<std::size_t>(config.max_candidate_tokens - 1));
        block_start.push_back(static_cast<std::int64_t>(out.tokens.size()));
        for (std::size_t i = 0; i < keep; ++i) {
            out.tokens.push_back(cand[i]);
            out.positions.push_back(static_cast<std::int64_t>(prefix + i));
            out.segment.push_back(SegmentKind::Candidate);
            out.segment_slot.push_back(k);
        }
        out.tokens.push_back(config.doc_end_id);
        out.positions.push_back(static_cast<std::int64_t>(prefix + keep));
        out.segment.push_back(SegmentKind::Candidate);
        out.segment_slot.push_back(k);
        out.idx_st.push_back(static_cast<std::int64_t>(out.tokens.size()) - 1);
        block_len.push_back(static_cast<std::int64_t>(keep) + 1);
    }

    // trailing identifier tokens
    for (int k = 0; k < m; ++k) {
        out.tokens.push_back(config.identifier_ids[static_cast<std::size_t>(k)]);
        out.positions.push_back(static_cast<std::int64_t>(prefix) + block_len[static_cast<std::size_t>(k)]);
        out.segment.push_back(SegmentKind::Identifier);
        out.segment_slot.push_back(k);
        out.idx_id.push_back(static_cast<std::int64_t>(out.tokens.size()) - 1);
    }

    const std::size_t len = out.tokens.size();
    out.permit.assign(len * len, 0);
    for (std::size_t i = 0; i < prefix; ++i)
        for (std::size_t j = 0; j <= i; ++j) out.set_permit(i, j, true);
    for (int k = 0; k < m; ++k) {
        auto b0 = static_cast<std::size_t>(block_start[static_cast<std::size_t>(k)]);
        auto bl = static_cast<std::size_t>(block_len[static_cast<std::size_t>(k)]);
        for (std::size_t o = 0; o < bl; ++o) {
            std::size_t row = b0 + o;
            for (std::size_t j = 0; j < prefix; ++j) out.set_permit(row, j, true);
            for (std::size_t j = b0; j <= row; ++j) out.set_permit(row, j, true);
        }
        auto idr = static_cast<std::size_t>(out.idx_id[static_cast<std::size_t>(k)]);
        for (std::size_t j = 0; j < prefix; ++j) out.set_permit(idr, j, true);
        for (std::size_t j = b0; j < b0 + bl; ++j) out.set_permit(idr, j, true);
        out.set_permit(idr, idr, true);
    }
    return out;
}

struct LayoutViolation {
    std::string code;
    std::string detail;
};

/// Checks every structural invariant of a SequenceLayout (segment order,
/// position rules, permission rules). Violations are returned, not thrown.
inline std::vector<LayoutViolation> validate_layout(const SequenceLayout& a) {
    std::vector<LayoutViolation> v;
    auto flag = [&v](std::string code, std::string detail) {
        v.push_back({std::move(code), std::move(detail)});
    };

    const std::size_t len = a.tokens.size();
    if (a.positions.size() != len || a.segment.size() != len || a.segment_slot.size() != len) {
        flag("inconsistent arrays", "token/position/segment arrays differ in length");
        return v;
    }
    if (a.permit.size() != len * len) {
        flag("bad permit size", "permit is not len*len");
        return v;
    }
    if (a.idx_st.size() != a.idx_id.size() || a.idx_id.empty()) {
        flag("bad index arrays", "idx_st/idx_id sizes differ or empty");
        return v;
    }
    const int m = a.slots();

    // segment structure: prefix, candidate blocks 0..m-1 in order, identifiers 0..m-1
    std::size_t p = a.prefix_len();
    std::size_t pos = p;
    std::vector<std::size_t> block_start(static_cast<std::size_t>(m)), block_len_(static_cast<std::size_t>(m));
    bool structural = true;
    for (int k = 0; k < m && structural; ++k) {
        block_start[static_cast<std::size_t>(k)] = pos;
        std::size_t l = 0;
        while (pos < len && a.segment[pos] == SegmentKind::Candidate && a.segment_slot[pos] == k) {
            ++pos;
            ++l;
        }
        block_len_[static_cast<std::size_t>(k)] = l;
        if (l == 0) {
            flag("bad segment order", "candidate block " + std::to_string(k + 1) + " missing or out of order");
            structural = false;
        }
    }
    for (int k = 0; k < m && structural; ++k) {
        if (pos >= len || a.segment[pos] != SegmentKind::Identifier || a.segment_slot[pos] != k) {
            flag("bad segment order", "identifier " + std::to_string(k + 1) + " missing or out of order");
            structural = false;
            break;
        }
        ++pos;
    }
    if (structural && pos != len) {
        flag("bad segment order", "trailing tokens after identifiers");
        structural = false;
    }
    if (!structural) return v;

    for (int k = 0; k < m; ++k) {
        auto st = a.idx_st[static_cast<std::size_t>(k)];
        auto id = a.idx_id[static_cast<std::size_t>(k)];
        if (st < 0 || static_cast<std::size_t>(st) >= len ||
            static_cast<std::size_t>(st) != block_start[static_cast<std::size_t>(k)] +
                                                block_len_[static_cast<std::size_t>(k)] - 1)
            flag("bad idx_st", "idx_st[" + std::to_string(k) + "] is not its block's last token");
        if (id < 0 || static_cast<std::size_t>(id) >= len ||
            static_cast<std::size_t>(id) != len - static_cast<std::size_t>(m - k))
            flag("bad idx_id", "idx_id[" + std::to_string(k) + "] mismatch");
    }
    if (!v.empty()) return v;

    // every <DOC_END> carries the same token id; identifiers are distinct
    for (int k = 1; k < m; ++k)
        if (a.tokens[static_cast<std::size_t>(a.idx_st[static_cast<std::size_t>(k)])] !=
            a.tokens[static_cast<std::size_t>(a.idx_st[0])])
            flag("inconsistent doc_end", "slot " + std::to_string(k + 1));
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j)
            if (a.tokens[static_cast<std::size_t>(a.idx_id[static_cast<std::size_t>(i)])] ==
                a.tokens[static_cast<std::size_t>(a.idx_id[static_cast<std::size_t>(j)])])
                flag("duplicate identifier token", std::to_string(i + 1) + "/" + std::to_string(j + 1));

    // positions
    for (std::size_t i = 0; i < p; ++i)
        if (a.positions[i] != static_cast<std::int64_t>(i))
            flag("bad prefix positions", "token " + std::to_string(i));
    for (int k = 0; k < m; ++k) {
        for (std::size_t o = 0; o < block_len_[static_cast<std::size_t>(k)]; ++o) {
            std::size_t i = block_start[static_cast<std::size_t>(k)] + o;
            if (a.positions[i] != static_cast<std::int64_t>(p + o)) {
                flag("non-identical candidate positions",
                     "candidate " + std::to_string(k + 1) + " offset " + std::to_string(o));
                break;
            }
        }
        auto id = static_cast<std::size_t>(a.idx_id[static_cast<std::size_t>(k)]);
        if (a.positions[id] != static_cast<std::int64_t>(p + block_len_[static_cast<std::size_t>(k)]))
            flag("bad identifier position", "identifier " + std::to_string(k + 1));
    }

    // permissions: compare against the constructive rules
    for (std::size_t i = 0; i < len; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < len; ++j) any |= a.permits(i, j);
        if (!any) flag("empty permit row", "token " + std::to_string(i));
    }
    auto expect = [&](std::size_t i, std::size_t j) -> bool {
        SegmentKind si = a.segment[i];
        if (si == SegmentKind::Prefix) return a.segment[j] == SegmentKind::Prefix && j <= i;
        if (si == SegmentKind::Candidate) {
            if (a.segment[j] == SegmentKind::Prefix) return true;
            return a.segment[j] == SegmentKind::Candidate && a.segment_slot[j] == a.segment_slot[i] && j <= i;
        }
        // identifier row
        if (a.segment[j] == SegmentKind::Prefix) return true;
        if (a.segment[j] == SegmentKind::Candidate) return a.segment_slot[j] == a.segment_slot[i];
        return i == j;
    };
    for (std::size_t i = 0; i < len && v.size() < 64; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
            bool got = a.permits(i, j);
            bool want = expect(i, j);
            if (got == want) continue;
            std::string at = "(" + std::to_string(i) + "," + std::to_string(j) + ")";
            if (a.segment[i] == SegmentKind::Identifier && a.segment[j] == SegmentKind::Identifier && got)
                flag("identifier cross-attention", at);
            else if (a.segment[i] == SegmentKind::Candidate && a.segment[j] == SegmentKind::Candidate &&
                     a.segment_slot[i] != a.segment_slot[j] && got)
                flag("candidate cross-attention", at);
            else if (a.segment[i] == SegmentKind::Identifier && a.segment[j] == SegmentKind::Candidate &&
                     a.segment_slot[i] != a.segment_slot[j] && got)
                flag("identifier attends foreign candidate", at);
            else if (got)
                flag("extra permission", at);
            else
                flag("missing permission", at);
        }
    }
    return v;
}

} // namespace calrank
