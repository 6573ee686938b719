// SPDX-License-Identifier: Apache-2.0
//
// Program rewriting: FineIBT caller/callee IRMs (basic and coldpath),
// IBT-only endbr placement, the Clang-CFI baseline transform, the A64 BTI
// text emitter, and code-size accounting.
#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "fibt/ir.hpp"
#include "fibt/policy.hpp"

namespace fibt::weave {

enum class IrmVariant : uint8_t { None, IbtOnly, FineIbtBasic, FineIbtColdpath, ClangCfiBaseline };

const char* irm_name(IrmVariant v);
std::optional<IrmVariant> irm_from_name(std::string_view name);

inline constexpr ir::Reg kDefaultSidReg = ir::Reg::r11;
inline constexpr std::string_view kChkFailSymbol = "__fineibt_chk_fail";
inline constexpr std::string_view kBtiChkFailSymbol = "__finebti_chk_fail";

bool is_protected(const ir::Function& f);
std::string entry_label(const std::string& fn);    // F_entry
std::string coldpath_label(const std::string& fn); // .F_fineibt_coldpath
std::string cfi_trap_label(const std::string& fn); // .F_cfi_trap
std::string cfi_target_name(const std::string& fn); // F.cfi

// Rewrites p with the selected IRM variant. ClangCfiBaseline goes through
// instrument_clang_cfi instead.
ir::Program instrument(const ir::Program& p, const policy::SidAssignment& a, IrmVariant v,
                       ir::Reg sid_reg = kDefaultSidReg);

// Clang-CFI baseline: renames protected functions to F.cfi, builds 8-byte
// trampoline slots under the original names, and guards every indirect
// callsite with the rotate/compare range check.
ir::Program instrument_clang_cfi(const ir::Program& p, const policy::SidAssignment& a);

struct BtiEncoding {
    uint16_t movz_imm{0};
    uint8_t movz_shift{0}; // 0, 16, 32, 48
    uint16_t subs_imm{0};  // 12-bit
    uint8_t subs_shift{0}; // 0 or 12
};

// A SID is emittable on A64 only if it fits both the movz (imm16 << {0,16,
// 32,48}) and the subs (imm12 << {0,12}) shifted-immediate forms.
std::optional<BtiEncoding> bti_encode_sid(uint32_t sid);

// A64-flavored listing of the FineIBT coldpath IRM; emit-only.
std::string emit_bti_text(const ir::Program& p, const policy::SidAssignment& a);

struct SizeReport {
    struct PerFunction {
        std::string name;
        uint64_t original{0};
        uint64_t instrumented{0};
    };
    std::vector<PerFunction> per_function;
    uint64_t original_total{0};
    uint64_t instrumented_total{0};

    // Per-category byte deltas; categories sum to the total delta.
    uint64_t endbr_bytes{0};
    uint64_t caller_irm_bytes{0};
    uint64_t callee_irm_bytes{0};
    uint64_t trampoline_bytes{0};
    uint64_t coldpath_bytes{0};

    uint64_t delta() const { return instrumented_total - original_total; }
    std::string to_table() const;
};

SizeReport size_report(const ir::Program& before, const ir::Program& after);

} // namespace fibt::weave
