// SPDX-License-Identifier: Apache-2.0
#include "fibt/loader.hpp"

#include <algorithm>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

namespace fibt::loader {

using ir::Instruction;
using ir::Op;
using linkage::Image;
using linkage::kPageBytes;
using linkage::Section;
using linkage::SectionItem;

const char* binding_name(Binding b) { return b == Binding::Eager ? "eager" : "lazy"; }

std::optional<Binding> binding_from_name(std::string_view name) {
    if (name == "eager") return Binding::Eager;
    if (name == "lazy") return Binding::Lazy;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Byte encodings

namespace {

const uint8_t kEndbr64[4] = {0xF3, 0x0F, 0x1E, 0xFA};
const uint8_t kNop4[4] = {0x0F, 0x1F, 0x40, 0x00};

std::vector<uint8_t> nop_bytes(int width) {
    switch (width) {
    case 1: return {0x90};
    case 2: return {0x66, 0x90};
    case 3: return {0x0F, 0x1F, 0x00};
    case 4: return {0x0F, 0x1F, 0x40, 0x00};
    case 5: return {0x0F, 0x1F, 0x44, 0x00, 0x00};
    case 6: return {0x66, 0x0F, 0x1F, 0x44, 0x00, 0x00};
    case 7: return {0x0F, 0x1F, 0x80, 0x00, 0x00, 0x00, 0x00};
    case 8: return {0x0F, 0x1F, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00};
    default: return {0x66, 0x0F, 0x1F, 0x84, 0x00, 0x00, 0x00, 0x00, 0x00};
    }
}

uint16_t symbol_hash(const std::string& s) {
    uint16_t h = 0x1505;
    for (char c : s) h = static_cast<uint16_t>(h * 31 + static_cast<uint8_t>(c));
    return h;
}

} // namespace

std::vector<uint8_t> encode_instruction(const Instruction& in) {
    int size = ir::instruction_size(in);
    switch (in.op) {
    case Op::Endbr64: return {kEndbr64[0], kEndbr64[1], kEndbr64[2], kEndbr64[3]};
    case Op::Nop: return nop_bytes(size);
    case Op::Hlt: return {0xF4};
    case Op::Ud2: return {0x0F, 0x0B};
    case Op::Int3: return {0xCC};
    case Op::Ret: return {0xC3};
    default: break;
    }
    // Synthetic model encoding: an opcode tag followed by operand bytes.
    std::vector<uint8_t> out(static_cast<size_t>(size), 0);
    out[0] = static_cast<uint8_t>(0xB0 + static_cast<uint8_t>(in.op));
    uint64_t operands = in.imm;
    operands ^= static_cast<uint64_t>(symbol_hash(in.sym)) << 48;
    operands ^= static_cast<uint64_t>(in.reg) << 40;
    operands ^= static_cast<uint64_t>(in.reg2) << 44;
    for (size_t i = 1; i < out.size(); ++i) {
        out[i] = static_cast<uint8_t>(operands >> (8 * ((i - 1) % 8)));
    }
    return out;
}

namespace {

// Materializes every code section of an image into one buffer spanning
// [0, got_base); alignment gaps between sections read as zero bytes.
std::vector<uint8_t> materialize_bytes(const Image& img) {
    std::vector<uint8_t> buf(img.got_base(), 0);
    for (const auto& [name, sec] : img.sections) {
        for (const SectionItem& item : sec.items) {
            std::vector<uint8_t> enc = encode_instruction(item.instr);
            size_t at = sec.base + item.offset;
            for (size_t i = 0; i < enc.size() && at + i < buf.size(); ++i) buf[at + i] = enc[i];
        }
    }
    return buf;
}

SectionItem* find_item_at(Section& sec, uint64_t offset) {
    auto it = std::lower_bound(sec.items.begin(), sec.items.end(), offset,
                               [](const SectionItem& item, uint64_t off) { return item.offset < off; });
    if (it == sec.items.end() || it->offset != offset) return nullptr;
    return &*it;
}

uint64_t resolve_data_entry(const AddressSpace& space, size_t image_index,
                            const ir::DataObject& obj, const ir::DataObject::Entry& entry);

void init_data_values(AddressSpace& space, size_t image_index) {
    LoadedImage& li = space.loaded[image_index];
    for (const ir::DataObject& d : li.image.data_objects) {
        std::vector<uint64_t> values;
        values.reserve(d.entries.size());
        for (const auto& e : d.entries) {
            values.push_back(resolve_data_entry(space, image_index, d, e));
        }
        li.data_values[d.name] = std::move(values);
    }
}

uint64_t resolve_data_entry(const AddressSpace& space, size_t image_index,
                            const ir::DataObject& obj, const ir::DataObject::Entry& entry) {
    if (!entry.is_symbol) return entry.value;
    const LoadedImage& li = space.loaded[image_index];

    std::string sym = entry.sym;
    if (li.image.find_import(sym)) {
        // Foreign targets are address-taken through the PLT machinery.
        bool fineibt = li.image.plt != linkage::PltFormat::IbtPlt;
        sym += fineibt ? "@ATFPLT" : "@SPLT";
    } else if (obj.kind == ir::DataObject::Kind::JumpTable) {
        // Read-only dispatch tables are trusted and may bypass the IRM.
        std::string alias = weave::entry_label(sym);
        if (li.image.symbols.count(alias)) sym = alias;
    }
    auto info = li.image.symbols.find(sym);
    if (info == li.image.symbols.end()) {
        throw Error(Errc::UndefinedSymbol,
                    "data entry '" + entry.sym + "' unresolved in " + li.image.name);
    }
    return space.address_of(image_index, info->second.section, info->second.offset);
}

} // namespace

// ---------------------------------------------------------------------------
// AddressSpace lookups

uint64_t AddressSpace::cow_pages() const { return page_map.size(); }

const LoadedImage* AddressSpace::find_image(std::string_view name) const {
    for (const LoadedImage& li : loaded) {
        if (li.image.name == name) return &li;
    }
    return nullptr;
}

LoadedImage* AddressSpace::find_image(std::string_view name) {
    for (LoadedImage& li : loaded) {
        if (li.image.name == name) return &li;
    }
    return nullptr;
}

size_t AddressSpace::image_index(std::string_view name) const {
    for (size_t i = 0; i < loaded.size(); ++i) {
        if (loaded[i].image.name == name) return i;
    }
    throw Error(Errc::UnknownSymbol, "image '" + std::string(name) + "' not loaded");
}

std::optional<uint64_t> AddressSpace::symbol_address(std::string_view symbol,
                                                     bool exports_only) const {
    for (size_t i = 0; i < loaded.size(); ++i) {
        const Image& img = loaded[i].image;
        const auto& table = exports_only ? img.exports : img.symbols;
        auto it = table.find(std::string(symbol));
        if (it != table.end()) {
            return address_of(i, it->second.section, it->second.offset);
        }
    }
    return std::nullopt;
}

uint64_t AddressSpace::address_of(size_t image, std::string_view section, uint64_t offset) const {
    const LoadedImage& li = loaded.at(image);
    const Section* sec = li.image.find_section(section);
    if (!sec) throw Error(Errc::UnknownSymbol, "no section " + std::string(section));
    return li.base + sec->base + offset;
}

std::optional<CodeLoc> AddressSpace::decode(uint64_t address) const {
    for (size_t i = 0; i < loaded.size(); ++i) {
        const LoadedImage& li = loaded[i];
        if (address < li.base || address >= li.base + li.image.span()) continue;
        uint64_t rel = address - li.base;
        for (const auto& [name, sec] : li.image.sections) {
            if (rel < sec.base || rel >= sec.base + sec.size()) continue;
            uint64_t off = rel - sec.base;
            auto it = std::lower_bound(
                sec.items.begin(), sec.items.end(), off,
                [](const SectionItem& item, uint64_t o) { return item.offset < o; });
            if (it == sec.items.end() || it->offset != off) return std::nullopt;
            return CodeLoc{i, name, static_cast<size_t>(it - sec.items.begin())};
        }
        return std::nullopt;
    }
    return std::nullopt;
}

std::optional<NopoutLogEntry::What> AddressSpace::patch_state(std::string_view image,
                                                              std::string_view symbol) const {
    std::optional<NopoutLogEntry::What> state;
    for (const NopoutLogEntry& e : nopout_log) {
        if (e.image == image && e.symbol == symbol) state = e.what;
    }
    return state;
}

// ---------------------------------------------------------------------------
// Binding

namespace {

struct ResolvedTarget {
    std::string image;
    std::string symbol;
    bool entry_alias{false};
    uint64_t address{0};
};

std::optional<ResolvedTarget> resolve_export(const AddressSpace& space, const std::string& symbol,
                                             bool prefer_entry_alias) {
    for (size_t i = 0; i < space.loaded.size(); ++i) {
        const Image& img = space.loaded[i].image;
        if (prefer_entry_alias) {
            std::string alias = weave::entry_label(symbol);
            auto it = img.exports.find(alias);
            if (it != img.exports.end()) {
                return ResolvedTarget{img.name, alias, true,
                                      space.address_of(i, it->second.section, it->second.offset)};
            }
        }
        auto it = img.exports.find(symbol);
        if (it != img.exports.end() && !it->second.is_entry_alias) {
            return ResolvedTarget{img.name, symbol, false,
                                  space.address_of(i, it->second.section, it->second.offset)};
        }
    }
    return std::nullopt;
}

void bind_got(AddressSpace& space, size_t image_index, bool eager) {
    LoadedImage& li = space.loaded[image_index];
    const Image& img = li.image;

    if (li.got.empty()) {
        li.got.resize(linkage::kGotFirstImportSlot + img.imports.size());
        li.got[0].state = GotSlot::State::Reserved;
        li.got[linkage::kGotLinkMapSlot].state = GotSlot::State::LinkMap;
        li.got[linkage::kGotLinkMapSlot].address = image_index;
        li.got[linkage::kGotResolverSlot].state = GotSlot::State::Resolver;
        for (size_t k = 0; k < img.imports.size(); ++k) {
            GotSlot& slot = li.got[img.imports[k].got_slot];
            slot.state = GotSlot::State::Unresolved;
            slot.reloc_index = k;
        }
    }

    if (!eager) return;

    bool compact = img.plt == linkage::PltFormat::CompactPlt;
    for (const linkage::ImportSlot& imp : img.imports) {
        GotSlot& slot = li.got[imp.got_slot];
        if (slot.state != GotSlot::State::Unresolved) continue;
        if (imp.symbol == weave::kChkFailSymbol) {
            slot.state = GotSlot::State::Intrinsic;
            slot.target_symbol = imp.symbol;
            continue;
        }
        auto target = resolve_export(space, imp.symbol, /*prefer_entry_alias=*/compact);
        if (!target) {
            throw Error(Errc::UnresolvedImport,
                        "'" + imp.symbol + "' imported by " + img.name + " has no exporter");
        }
        slot.state = GotSlot::State::Resolved;
        slot.target_image = target->image;
        slot.target_symbol = target->symbol;
        slot.entry_alias = target->entry_alias;
        slot.address = target->address;
    }
    if (img.relro_full) li.got_writable = false;
}

// Address bases come from the seed stream; collisions retry. Addresses stay
// below 2^32 so position-dependent 32-bit loads hold them.
uint64_t pick_base(std::mt19937_64& rng, const AddressSpace& space, uint64_t span) {
    for (int attempt = 0; attempt < 4096; ++attempt) {
        uint64_t raw = rng() % (0xF0000000ull - 0x00400000ull);
        uint64_t base = (0x00400000ull + raw) / kPageBytes * kPageBytes;
        bool clash = false;
        for (const LoadedImage& li : space.loaded) {
            uint64_t lo = li.base, hi = li.base + li.image.span();
            if (base < hi && lo < base + span) {
                clash = true;
                break;
            }
        }
        if (!clash) return base;
    }
    throw Error(Errc::BadConfig, "could not place image without overlap");
}

void append_image(AddressSpace& space, Image image, std::mt19937_64& rng) {
    LoadedImage li;
    li.pristine = image;
    li.base = pick_base(rng, space, image.span());
    li.bytes = materialize_bytes(image);
    li.image = std::move(image);
    space.loaded.push_back(std::move(li));
}

// Symbols whose prologue endbr may be elided: note entries not linked by any
// GOT slot in the space. Compact-PLT links bind to *_entry aliases and do
// not pin the prologue.
bool symbol_got_linked(const AddressSpace& space, const std::string& image,
                       const std::string& symbol) {
    for (const LoadedImage& li : space.loaded) {
        for (const GotSlot& slot : li.got) {
            if (slot.state != GotSlot::State::Resolved) continue;
            if (slot.entry_alias) continue;
            if (slot.target_image == image && slot.target_symbol == symbol) return true;
        }
    }
    return false;
}

void elide_symbol(AddressSpace& space, size_t image_index, const linkage::NopoutEntry& note) {
    LoadedImage& li = space.loaded[image_index];
    Section& text = li.image.sections.at(".text");
    SectionItem* item = find_item_at(text, note.text_offset);
    if (!item || item->instr.op != Op::Endbr64) return; // already elided or foreign state
    item->instr = ir::ins::nop(4);
    size_t at = text.base + note.text_offset;
    for (size_t i = 0; i < 4; ++i) li.bytes[at + i] = kNop4[i];
    uint64_t page = (li.base + text.base + note.text_offset) / kPageBytes;
    space.page_map[page] = PageState::Patched;
    space.nopout_log.push_back(
        NopoutLogEntry{li.image.name, note.symbol, note.text_offset, NopoutLogEntry::What::Elided});
}

void nopout_scan(AddressSpace& space, size_t image_index) {
    const std::vector<linkage::NopoutEntry> notes = space.loaded[image_index].image.nopout_note;
    for (const linkage::NopoutEntry& note : notes) {
        if (space.patch_state(space.loaded[image_index].image.name, note.symbol)) continue;
        if (symbol_got_linked(space, space.loaded[image_index].image.name, note.symbol)) continue;
        elide_symbol(space, image_index, note);
    }
}

} // namespace

AddressSpace load(std::vector<Image> images, Binding binding, bool nopout, uint64_t base_seed) {
    AddressSpace space;
    space.binding = binding;
    space.nopout = nopout;
    space.base_seed = base_seed;

    std::mt19937_64 rng(base_seed);
    for (Image& img : images) {
        if (space.find_image(img.name)) {
            throw Error(Errc::DuplicateSymbol, "image '" + img.name + "' loaded twice");
        }
        append_image(space, std::move(img), rng);
    }

    for (size_t i = 0; i < space.loaded.size(); ++i) {
        bool eager = binding == Binding::Eager || space.loaded[i].image.relro_full;
        bind_got(space, i, eager);
    }
    for (size_t i = 0; i < space.loaded.size(); ++i) init_data_values(space, i);

    if (nopout) {
        if (binding == Binding::Lazy) {
            std::cerr << "warning: NOPout skipped, elision requires eager binding\n";
        } else {
            for (size_t i = 0; i < space.loaded.size(); ++i) nopout_scan(space, i);
        }
    }
    return space;
}

void dlopen_image(AddressSpace& space, Image image) {
    if (space.find_image(image.name)) return; // already mapped; patch state untouched

    // Continue the base stream past the bases already drawn.
    std::mt19937_64 rng(space.base_seed ^ (0x9E3779B97F4A7C15ull * (space.loaded.size() + 1)));
    append_image(space, std::move(image), rng);
    size_t idx = space.loaded.size() - 1;

    bool eager = space.binding == Binding::Eager || space.loaded[idx].image.relro_full;
    bind_got(space, idx, eager);
    init_data_values(space, idx);

    // Previously elided symbols the new image links must get their endbr
    // back before any call can reach them.
    for (const GotSlot& slot : space.loaded[idx].got) {
        if (slot.state != GotSlot::State::Resolved || slot.entry_alias) continue;
        auto state = space.patch_state(slot.target_image, slot.target_symbol);
        if (state == NopoutLogEntry::What::Elided) {
            restore_endbr(space, slot.target_image, slot.target_symbol);
        }
    }

    if (space.nopout && space.binding == Binding::Eager) nopout_scan(space, idx);
}

uint64_t dlsym_address(AddressSpace& space, const std::string& symbol) {
    for (size_t i = 0; i < space.loaded.size(); ++i) {
        const Image& img = space.loaded[i].image;
        auto it = img.exports.find(symbol);
        if (it == img.exports.end() || it->second.is_entry_alias) continue;
        if (space.patch_state(img.name, symbol) == NopoutLogEntry::What::Elided) {
            restore_endbr(space, img.name, symbol);
        }
        return space.address_of(i, it->second.section, it->second.offset);
    }
    throw Error(Errc::UnknownSymbol, "dlsym: '" + symbol + "' is not exported");
}

PatchResult restore_endbr(AddressSpace& space, const std::string& image,
                          const std::string& symbol) {
    auto state = space.patch_state(image, symbol);
    if (!state) {
        throw Error(Errc::UnknownSymbol, "'" + symbol + "' has no elision log entry in " + image);
    }
    if (*state == NopoutLogEntry::What::Restored) return PatchResult::AlreadyRestored;

    size_t idx = space.image_index(image);
    LoadedImage& li = space.loaded[idx];
    Section& text = li.image.sections.at(".text");

    const linkage::NopoutEntry* note = nullptr;
    for (const linkage::NopoutEntry& e : li.image.nopout_note) {
        if (e.symbol == symbol) note = &e;
    }
    if (!note) {
        throw Error(Errc::UnknownSymbol, "'" + symbol + "' is not in the nopout note of " + image);
    }

    uint64_t abs = li.base + text.base + note->text_offset;
    uint64_t page = abs / kPageBytes;
    uint64_t page_lo = page * kPageBytes;          // absolute
    uint64_t buf_lo = page_lo - li.base;           // buffer-relative start of the page
    uint64_t buf_hi = std::min<uint64_t>(buf_lo + kPageBytes, li.bytes.size());

    // (1)+(2) Rebuild the page from the read-only backing image and apply
    // the intended patch state: still-elided notes read as nop4, the symbol
    // being restored keeps its pristine endbr.
    std::vector<uint8_t> pristine = materialize_bytes(li.pristine);
    std::vector<uint8_t> copy(pristine.begin() + static_cast<long>(buf_lo),
                              pristine.begin() + static_cast<long>(buf_hi));
    std::vector<std::pair<uint64_t, const linkage::NopoutEntry*>> page_notes;
    for (const linkage::NopoutEntry& e : li.image.nopout_note) {
        uint64_t at = text.base + e.text_offset;
        if (at >= buf_lo && at + 4 <= buf_hi) page_notes.emplace_back(at - buf_lo, &e);
    }
    for (auto& [off, e] : page_notes) {
        if (e->symbol == symbol) continue;
        if (space.patch_state(image, e->symbol) == NopoutLogEntry::What::Elided) {
            for (size_t i = 0; i < 4; ++i) copy[off + i] = kNop4[i];
        }
    }

    // (3) Verify: the live page and the copy may differ only inside note
    // windows, and only as a nop4 <-> endbr64 swap.
    for (uint64_t off = 0; off < copy.size(); ++off) {
        uint8_t live = li.bytes[buf_lo + off];
        if (live == copy[off]) continue;
        bool ok = false;
        for (auto& [note_off, e] : page_notes) {
            if (off < note_off || off >= note_off + 4) continue;
            bool live_nop = std::equal(kNop4, kNop4 + 4, li.bytes.begin() + static_cast<long>(buf_lo + note_off));
            bool copy_endbr = std::equal(kEndbr64, kEndbr64 + 4, copy.begin() + static_cast<long>(note_off));
            bool live_endbr = std::equal(kEndbr64, kEndbr64 + 4, li.bytes.begin() + static_cast<long>(buf_lo + note_off));
            bool copy_nop = std::equal(kNop4, kNop4 + 4, copy.begin() + static_cast<long>(note_off));
            if ((live_nop && copy_endbr) || (live_endbr && copy_nop)) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            throw Error(Errc::TamperDetected,
                        "page 0x" + [&] {
                            std::ostringstream os;
                            os << std::hex << page;
                            return os.str();
                        }() + " of " + image + " differs outside note offsets");
        }
    }

    // (4) Swap the verified copy in.
    std::copy(copy.begin(), copy.end(), li.bytes.begin() + static_cast<long>(buf_lo));
    SectionItem* item = find_item_at(text, note->text_offset);
    if (item) item->instr = ir::ins::endbr64();
    space.page_map[page] = PageState::Patched;
    space.nopout_log.push_back(
        NopoutLogEntry{image, symbol, note->text_offset, NopoutLogEntry::What::Restored});
    return PatchResult::Restored;
}

linkage::TargetCensus census(const AddressSpace& space) {
    linkage::TargetCensus total;
    for (const LoadedImage& li : space.loaded) {
        linkage::TargetCensus c = linkage::census(li.image);
        total.endbr_in_text += c.endbr_in_text;
        total.endbr_in_plt_family += c.endbr_in_plt_family;
        total.total_landing_pads += c.total_landing_pads;
        total.protected_landing_pads += c.protected_landing_pads;
        total.unchecked_landing_pads += c.unchecked_landing_pads;
        total.clang_trampoline_slots += c.clang_trampoline_slots;
    }
    return total;
}

std::string nopout_table(const AddressSpace& space) {
    uint64_t elided = 0;
    std::set<std::pair<std::string, std::string>> elided_now;
    for (const NopoutLogEntry& e : space.nopout_log) {
        if (e.what == NopoutLogEntry::What::Elided) {
            elided_now.insert({e.image, e.symbol});
        } else {
            elided_now.erase({e.image, e.symbol});
        }
    }
    elided = elided_now.size();

    uint64_t landing_now = census(space).endbr_in_text;
    uint64_t landing_before = landing_now + elided;
    double pct = landing_before == 0 ? 0.0 : 100.0 * static_cast<double>(elided) /
                                                 static_cast<double>(landing_before);

    uint64_t pages = space.cow_pages();
    std::ostringstream os;
    os << std::left << std::setw(16) << "AT-elided" << std::setw(10) << "Pages" << "KB\n";
    std::ostringstream first;
    first << elided << " (" << std::fixed << std::setprecision(2) << pct << "%)";
    os << std::left << std::setw(16) << first.str() << std::setw(10) << pages << (pages * 4)
       << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using nlohmann::ordered_json;

const char* slot_state_name(GotSlot::State s) {
    switch (s) {
    case GotSlot::State::Reserved: return "reserved";
    case GotSlot::State::LinkMap: return "linkmap";
    case GotSlot::State::Resolver: return "resolver";
    case GotSlot::State::Unresolved: return "unresolved";
    case GotSlot::State::Resolved: return "resolved";
    case GotSlot::State::Intrinsic: return "intrinsic";
    }
    return "reserved";
}

GotSlot::State slot_state_from_name(const std::string& s) {
    if (s == "linkmap") return GotSlot::State::LinkMap;
    if (s == "resolver") return GotSlot::State::Resolver;
    if (s == "unresolved") return GotSlot::State::Unresolved;
    if (s == "resolved") return GotSlot::State::Resolved;
    if (s == "intrinsic") return GotSlot::State::Intrinsic;
    return GotSlot::State::Reserved;
}

} // namespace

nlohmann::ordered_json AddressSpace::to_json() const {
    ordered_json j;
    j["format"] = "fibt-space v1";
    j["binding"] = binding_name(binding);
    j["nopout"] = nopout;
    j["base_seed"] = base_seed;

    ordered_json images = ordered_json::array();
    for (const LoadedImage& li : loaded) {
        ordered_json ji;
        ji["base"] = li.base;
        ji["got_writable"] = li.got_writable;
        ordered_json got = ordered_json::array();
        for (const GotSlot& slot : li.got) {
            ordered_json js;
            js["state"] = slot_state_name(slot.state);
            js["reloc"] = slot.reloc_index;
            js["image"] = slot.target_image;
            js["symbol"] = slot.target_symbol;
            js["entry_alias"] = slot.entry_alias;
            js["address"] = slot.address;
            got.push_back(std::move(js));
        }
        ji["got"] = std::move(got);
        ordered_json data;
        for (const auto& [name, values] : li.data_values) data[name] = values;
        ji["data_values"] = std::move(data);
        ji["image"] = li.pristine.to_json();
        images.push_back(std::move(ji));
    }
    j["images"] = std::move(images);

    ordered_json log = ordered_json::array();
    for (const NopoutLogEntry& e : nopout_log) {
        ordered_json je;
        je["image"] = e.image;
        je["symbol"] = e.symbol;
        je["offset"] = e.text_offset;
        je["what"] = e.what == NopoutLogEntry::What::Elided ? "elided" : "restored";
        log.push_back(std::move(je));
    }
    j["nopout_log"] = std::move(log);
    return j;
}

AddressSpace AddressSpace::from_json(const nlohmann::ordered_json& j) {
    if (j.at("format").get<std::string>() != "fibt-space v1") {
        throw Error(Errc::BadConfig, "not a fibt-space v1 document");
    }
    AddressSpace space;
    space.binding = *binding_from_name(j.at("binding").get<std::string>());
    space.nopout = j.at("nopout").get<bool>();
    space.base_seed = j.at("base_seed").get<uint64_t>();

    for (const auto& ji : j.at("images")) {
        LoadedImage li;
        li.base = ji.at("base").get<uint64_t>();
        li.got_writable = ji.at("got_writable").get<bool>();
        li.pristine = Image::from_json(ji.at("image"));
        li.image = li.pristine;
        li.bytes = materialize_bytes(li.pristine);
        for (const auto& js : ji.at("got")) {
            GotSlot slot;
            slot.state = slot_state_from_name(js.at("state").get<std::string>());
            slot.reloc_index = js.at("reloc").get<size_t>();
            slot.target_image = js.at("image").get<std::string>();
            slot.target_symbol = js.at("symbol").get<std::string>();
            slot.entry_alias = js.at("entry_alias").get<bool>();
            slot.address = js.at("address").get<uint64_t>();
            li.got.push_back(std::move(slot));
        }
        for (const auto& [name, values] : ji.at("data_values").items()) {
            li.data_values[name] = values.get<std::vector<uint64_t>>();
        }
        space.loaded.push_back(std::move(li));
    }

    for (const auto& je : j.at("nopout_log")) {
        NopoutLogEntry e;
        e.image = je.at("image").get<std::string>();
        e.symbol = je.at("symbol").get<std::string>();
        e.text_offset = je.at("offset").get<uint64_t>();
        e.what = je.at("what").get<std::string>() == "elided" ? NopoutLogEntry::What::Elided
                                                              : NopoutLogEntry::What::Restored;
        space.nopout_log.push_back(std::move(e));
    }

    // Replay the patch log against the pristine mapping.
    for (const NopoutLogEntry& e : space.nopout_log) {
        size_t idx = space.image_index(e.image);
        LoadedImage& li = space.loaded[idx];
        Section& text = li.image.sections.at(".text");
        SectionItem* item = find_item_at(text, e.text_offset);
        if (!item) continue;
        size_t at = text.base + e.text_offset;
        if (e.what == NopoutLogEntry::What::Elided) {
            item->instr = ir::ins::nop(4);
            for (size_t i = 0; i < 4; ++i) li.bytes[at + i] = kNop4[i];
        } else {
            item->instr = ir::ins::endbr64();
            for (size_t i = 0; i < 4; ++i) li.bytes[at + i] = kEndbr64[i];
        }
        uint64_t page = (li.base + text.base + e.text_offset) / kPageBytes;
        space.page_map[page] = PageState::Patched;
    }
    return space;
}

std::string AddressSpace::dump() const {
    std::ostringstream os;
    os << "space binding=" << binding_name(binding) << " nopout=" << (nopout ? "on" : "off")
       << " base_seed=" << base_seed << " cow_pages=" << cow_pages() << "\n";
    for (const LoadedImage& li : loaded) {
        os << "\nimage " << li.image.name << " @ 0x" << std::hex << li.base << std::dec
           << " span=" << li.image.span() << " got_writable=" << (li.got_writable ? "yes" : "no")
           << "\n";
        for (size_t s = 0; s < li.got.size(); ++s) {
            const GotSlot& slot = li.got[s];
            os << "  got[" << s << "] " << slot_state_name(slot.state);
            if (slot.state == GotSlot::State::Resolved) {
                os << " -> " << slot.target_image << ":" << slot.target_symbol
                   << (slot.entry_alias ? " (entry alias)" : "") << " @ 0x" << std::hex
                   << slot.address << std::dec;
            } else if (slot.state == GotSlot::State::Unresolved) {
                os << " (reloc " << slot.reloc_index << ")";
            }
            os << "\n";
        }
    }
    if (!nopout_log.empty()) {
        os << "\nnopout log\n";
        for (const NopoutLogEntry& e : nopout_log) {
            os << "  " << (e.what == NopoutLogEntry::What::Elided ? "elided " : "restored ")
               << e.image << ":" << e.symbol << " @ " << e.text_offset << "\n";
        }
    }
    os << "\ncensus\n" << census(*this).to_table();
    return os.str();
}

} // namespace fibt::loader
