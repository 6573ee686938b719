// SPDX-License-Identifier: Apache-2.0
//
// Equivalence classes over protected functions and indirect callsites, plus
// 32-bit SID allocation.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fibt/ir.hpp"

namespace fibt::policy {

using Sid = uint32_t;

// SID byte images that must never be allocated: zero, and values whose
// little-endian image is the endbr64/endbr32 opcode (an immediate carrying
// one would mint an unintended landing pad in a real encoding).
inline constexpr Sid kEndbr64Image = 0xFA1E0FF3u;
inline constexpr Sid kEndbr32Image = 0xFB1E0FF3u;

bool sid_reserved(Sid sid);

enum class PolicyKind : uint8_t { VanillaIbt, Arity, TypeStrict, Mlta };

const char* policy_name(PolicyKind k);
std::optional<PolicyKind> policy_from_name(std::string_view name);

struct MltaPairs {
    struct Pair {
        std::string caller;
        size_t callsite_index{0};
        std::string callee;
    };
    std::vector<Pair> allowed;

    // One triple per line: caller <tab> callsite_index <tab> callee.
    static MltaPairs parse(std::string_view text);
};

struct CallsiteRef {
    std::string function;
    size_t index{0}; // instruction index within the function body

    auto operator<=>(const CallsiteRef&) const = default;
};

struct EquivalenceClass {
    size_t id{0};
    std::string key; // human-readable policy key
    std::vector<std::string> members;     // functions and imports, program order
    std::vector<CallsiteRef> callsites;
};

struct SidAssignment {
    PolicyKind kind{PolicyKind::VanillaIbt};
    std::vector<EquivalenceClass> classes;
    std::map<std::string, size_t> function_to_class;
    std::map<CallsiteRef, size_t> callsite_to_class;
    std::map<size_t, Sid> class_to_sid;

    Sid sid_of_function(const std::string& name) const;   // throws MissingSid
    Sid sid_of_callsite(const CallsiteRef& ref) const;    // throws MissingSid
    std::optional<size_t> class_of_function(const std::string& name) const;
};

// Indirect callsites of a function: instruction indices of every
// IndirectCall / IndirectJmpReg in the body.
std::vector<size_t> indirect_callsites(const ir::Function& f);

// Static signature of the pointer dispatched at a callsite, recovered by a
// backward scan over the defining instructions (LoadFnAddr, LoadData from a
// function-pointer-bearing object, MovReg chains).
ir::Signature callsite_signature(const ir::Program& p, const ir::Function& f, size_t callsite_index);

SidAssignment build_classes(const ir::Program& p, PolicyKind kind, const MltaPairs* pairs = nullptr);

// Classes over a build set; policy keys are shared across programs so SIDs
// agree between DSOs built together. Function names must be unique across
// the set.
SidAssignment build_classes(std::span<const ir::Program> programs, PolicyKind kind,
                            const MltaPairs* pairs = nullptr);

// Fills class_to_sid with distinct, nonzero, non-reserved SIDs drawn from a
// seeded PRNG. Overrides pin the class containing the named symbol to an
// exact SID.
void allocate_sids(SidAssignment& a, uint64_t seed, const std::map<std::string, Sid>& overrides = {});

std::map<std::string, Sid> parse_sid_overrides(std::string_view text);

std::string explain_class(const SidAssignment& a, const std::string& sym);

} // namespace fibt::policy
