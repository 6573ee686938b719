// SPDX-License-Identifier: Apache-2.0
//
// Per-DSO image layout: .text plus the PLT family (baseline IBT, FineIBT,
// compact FineIBT), GOT template, NOPout note, and the landing-pad census.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fibt/ir.hpp"
#include "fibt/policy.hpp"
#include "fibt/weave.hpp"

#include "json.hpp"

namespace fibt::linkage {

enum class PltFormat : uint8_t { IbtPlt, FineIbtPlt, CompactPlt };

const char* plt_name(PltFormat f);
std::optional<PltFormat> plt_from_name(std::string_view name);

// Fixed resolver SID: the value ld.so's own entry checks in the lower 32
// bits of %rax during lazy binding. Published in the image header.
inline constexpr policy::Sid kResolverSid = 0x1D50C0DE;

// SID carried by the PLT slots of the intrinsic failure handler. The
// handler import is injected during instrumentation, after class
// construction, and is only ever reached by direct calls.
inline constexpr policy::Sid kChkFailSid = 0xF1B7C0DE;

// Reserved GOT geometry: slot 1 holds the link-map token, slot 2 the
// resolver; import k (0-based) lives in slot 3+k.
inline constexpr size_t kGotLinkMapSlot = 1;
inline constexpr size_t kGotResolverSlot = 2;
inline constexpr size_t kGotFirstImportSlot = 3;

// GOT[2] jumps are spelled through this reserved symbol.
inline constexpr std::string_view kResolverSymbol = ir::kResolverSymbol;

inline constexpr uint64_t kPltSlotBytes = 16;
inline constexpr uint64_t kPltSlotMaxBytes = 32;
inline constexpr uint64_t kPageBytes = 4096;

struct SectionItem {
    uint64_t offset{0};               // section-relative
    std::vector<std::string> labels;  // labels attached at this offset
    std::string owner;                // enclosing function / PLT entry
    ir::Instruction instr;
};

struct Section {
    uint64_t base{0}; // image-relative
    std::vector<SectionItem> items;

    uint64_t size() const;
};

struct SymbolInfo {
    std::string section;
    uint64_t offset{0}; // section-relative
    ir::Linkage visibility{ir::Linkage::Local};
    bool is_entry_alias{false};
};

struct ImportSlot {
    std::string symbol;
    ir::Signature signature;
    size_t got_slot{0};
    size_t fplt_index{0};                 // 1-based, matches slot labels
    std::optional<size_t> atfplt_index;   // present iff address-taken here
    policy::Sid sid{0};
    bool address_taken{false};
};

struct NopoutEntry {
    std::string symbol;
    uint64_t text_offset{0}; // holds Endbr64 in the pristine image
};

struct ClassSummary {
    size_t id{0};
    std::string key;
    policy::Sid sid{0};
    std::vector<std::string> members;
    size_t callsites{0};
};

struct Image {
    std::string name;
    bool relro_full{false};
    PltFormat plt{PltFormat::FineIbtPlt};
    weave::IrmVariant irm{weave::IrmVariant::None};
    ir::Reg sid_reg{weave::kDefaultSidReg};
    policy::Sid resolver_sid{kResolverSid};

    std::map<std::string, Section> sections;   // ".text" plus the PLT family
    std::map<std::string, SymbolInfo> exports; // Global symbols + entry aliases
    std::map<std::string, SymbolInfo> symbols; // every addressable name
    std::vector<ImportSlot> imports;
    std::vector<ir::DataObject> data_objects;
    std::vector<NopoutEntry> nopout_note;

    weave::SizeReport size;
    std::vector<ClassSummary> classes;

    uint64_t got_size() const { return 8 * (kGotFirstImportSlot + imports.size()); }
    uint64_t got_base() const; // image-relative, after the last code section
    uint64_t span() const;     // bytes covered by all sections, page-rounded

    const ImportSlot* find_import(std::string_view sym) const;
    const Section* find_section(std::string_view name) const;

    nlohmann::ordered_json to_json() const;
    static Image from_json(const nlohmann::ordered_json& j);

    std::string dump_sections() const;
};

// Lays out the instrumented program into an image. The weave variant and
// sid register must match what produced the program.
Image link_image(const ir::Program& p, const policy::SidAssignment& a, PltFormat plt,
                 weave::IrmVariant irm, ir::Reg sid_reg = weave::kDefaultSidReg);

struct TargetCensus {
    uint64_t endbr_in_text{0};
    uint64_t endbr_in_plt_family{0};
    uint64_t total_landing_pads{0};
    uint64_t protected_landing_pads{0}; // endbr followed by a SID check
    uint64_t unchecked_landing_pads{0};
    uint64_t clang_trampoline_slots{0}; // reported separately, not endbr-based

    std::string to_table() const;
};

TargetCensus census(const Image& img);

} // namespace fibt::linkage
