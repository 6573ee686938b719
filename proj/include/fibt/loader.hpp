// SPDX-License-Identifier: Apache-2.0
//
// Address-space assembly: base assignment, GOT binding, NOPout endbr
// elision, dlopen/dlsym re-patching with page-copy verification, and
// page/COW accounting.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fibt/linkage.hpp"

namespace fibt::loader {

enum class Binding : uint8_t { Lazy, Eager };

const char* binding_name(Binding b);
std::optional<Binding> binding_from_name(std::string_view name);

struct GotSlot {
    enum class State : uint8_t { Reserved, LinkMap, Resolver, Unresolved, Resolved, Intrinsic };
    State state{State::Reserved};
    size_t reloc_index{0};        // import index, for Unresolved
    std::string target_image;     // for Resolved
    std::string target_symbol;
    bool entry_alias{false};      // Resolved against the *_entry counterpart
    uint64_t address{0};          // absolute, for Resolved
};

struct NopoutLogEntry {
    enum class What : uint8_t { Elided, Restored };
    std::string image;
    std::string symbol;
    uint64_t text_offset{0};
    What what{What::Elided};
};

struct LoadedImage {
    linkage::Image image;    // live view; elision and restores edit it
    linkage::Image pristine; // as linked, backs page-copy verification
    uint64_t base{0};
    std::vector<GotSlot> got;
    bool got_writable{true};
    std::vector<uint8_t> bytes; // materialized code sections, patched live
    std::map<std::string, std::vector<uint64_t>> data_values;
};

enum class PageState : uint8_t { Pristine, Patched };

struct CodeLoc {
    size_t image{0};
    std::string section;
    size_t item{0};
};

struct AddressSpace {
    Binding binding{Binding::Eager};
    bool nopout{false};
    uint64_t base_seed{0};
    std::vector<LoadedImage> loaded;
    std::map<uint64_t, PageState> page_map; // only Patched pages are recorded
    std::vector<NopoutLogEntry> nopout_log;

    uint64_t cow_pages() const;

    const LoadedImage* find_image(std::string_view name) const;
    LoadedImage* find_image(std::string_view name);
    size_t image_index(std::string_view name) const;

    // Absolute address of a symbol; exports_only restricts the search to the
    // dynamic export tables.
    std::optional<uint64_t> symbol_address(std::string_view symbol, bool exports_only) const;
    uint64_t address_of(size_t image, std::string_view section, uint64_t offset) const;
    std::optional<CodeLoc> decode(uint64_t address) const;

    // Latest NOPout state of a symbol, if it was ever touched.
    std::optional<NopoutLogEntry::What> patch_state(std::string_view image,
                                                    std::string_view symbol) const;

    nlohmann::ordered_json to_json() const;
    static AddressSpace from_json(const nlohmann::ordered_json& j);

    std::string dump() const;
};

AddressSpace load(std::vector<linkage::Image> images, Binding binding, bool nopout,
                  uint64_t base_seed);

// Loads one more image into a live space, re-binding and re-patching as the
// newly visible GOT requires. Loading an already-present image is a no-op.
void dlopen_image(AddressSpace& space, linkage::Image image);

// Resolves an exported symbol, restoring its elided endbr first if needed.
// The returned address is the IRM-checked prologue, never the entry alias.
uint64_t dlsym_address(AddressSpace& space, const std::string& symbol);

enum class PatchResult : uint8_t { Restored, AlreadyRestored };

// Page-copy restore protocol; throws TamperDetected (without mutating the
// space) if the live page differs from the rebuilt copy anywhere but at
// note offsets.
PatchResult restore_endbr(AddressSpace& space, const std::string& image,
                          const std::string& symbol);

linkage::TargetCensus census(const AddressSpace& space);

// Elision summary table: AT-elided (count, %), Pages, KB.
std::string nopout_table(const AddressSpace& space);

// Deterministic byte image of an instruction (real encodings for endbr64,
// nops, hlt, ud2, int3, ret; synthetic elsewhere).
std::vector<uint8_t> encode_instruction(const ir::Instruction& in);

} // namespace fibt::loader
