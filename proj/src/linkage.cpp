// SPDX-License-Identifier: Apache-2.0
#include "fibt/linkage.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

namespace fibt::linkage {

using ir::Instruction;
using ir::Op;

const char* plt_name(PltFormat f) {
    switch (f) {
    case PltFormat::IbtPlt: return "ibt";
    case PltFormat::FineIbtPlt: return "fineibt";
    case PltFormat::CompactPlt: return "compact";
    }
    return "fineibt";
}

std::optional<PltFormat> plt_from_name(std::string_view name) {
    if (name == "ibt") return PltFormat::IbtPlt;
    if (name == "fineibt") return PltFormat::FineIbtPlt;
    if (name == "compact") return PltFormat::CompactPlt;
    return std::nullopt;
}

uint64_t Section::size() const {
    if (items.empty()) return 0;
    const SectionItem& last = items.back();
    return last.offset + static_cast<uint64_t>(ir::instruction_size(last.instr));
}

uint64_t Image::span() const {
    uint64_t end = 0;
    for (const auto& [name, sec] : sections) {
        end = std::max(end, sec.base + sec.size());
    }
    end = std::max(end, got_base() + got_size());
    return (end + kPageBytes - 1) / kPageBytes * kPageBytes;
}

const ImportSlot* Image::find_import(std::string_view sym) const {
    for (const ImportSlot& s : imports) {
        if (s.symbol == sym) return &s;
    }
    return nullptr;
}

const Section* Image::find_section(std::string_view name) const {
    auto it = sections.find(std::string(name));
    return it == sections.end() ? nullptr : &it->second;
}

namespace {

uint64_t align_up(uint64_t v, uint64_t a) { return (v + a - 1) / a * a; }

std::string plt_entry_label(const char* prefix, size_t index) {
    return std::string(prefix) + std::to_string(index);
}

// Appends one PLT-family entry at the next 16-byte boundary, padding the
// previous entry's tail with nops.
struct SlotWriter {
    Section& section;
    uint64_t cursor{0};

    void pad_to_boundary() {
        uint64_t target = align_up(cursor, kPltSlotBytes);
        while (cursor < target) {
            uint64_t gap = std::min<uint64_t>(target - cursor, 9);
            SectionItem pad;
            pad.offset = cursor;
            pad.owner = section.items.empty() ? "" : section.items.back().owner;
            pad.instr = ir::ins::nop(static_cast<uint8_t>(gap));
            section.items.push_back(std::move(pad));
            cursor += gap;
        }
    }

    void entry(const std::string& label, const std::string& alias,
               std::vector<Instruction> body) {
        pad_to_boundary();
        uint64_t start = cursor;
        for (size_t i = 0; i < body.size(); ++i) {
            SectionItem item;
            item.offset = cursor;
            item.owner = label;
            if (i == 0) {
                item.labels.push_back(label);
                if (!alias.empty()) item.labels.push_back(alias);
            }
            cursor += static_cast<uint64_t>(ir::instruction_size(body[i]));
            item.instr = std::move(body[i]);
            section.items.push_back(std::move(item));
        }
        if (cursor - start > kPltSlotMaxBytes) {
            throw Error(Errc::SlotOverflow, "PLT entry '" + label + "' exceeds " +
                                                std::to_string(kPltSlotMaxBytes) + " bytes");
        }
        pad_to_boundary();
    }
};

bool is_clang_surrogate(const ir::Program& p, const ir::Function& f) {
    return p.find_function(weave::cfi_target_name(f.name)) != nullptr;
}

} // namespace

uint64_t Image::got_base() const {
    uint64_t end = 0;
    for (const auto& [name, sec] : sections) {
        end = std::max(end, sec.base + sec.size());
    }
    return align_up(end, 64);
}

Image link_image(const ir::Program& p, const policy::SidAssignment& a, PltFormat plt,
                 weave::IrmVariant irm, ir::Reg sid_reg) {
    if (plt == PltFormat::CompactPlt && !p.relro_full) {
        throw Error(Errc::RelroRequired, "compact PLT requires the relro_full program flag");
    }
    if (irm == weave::IrmVariant::ClangCfiBaseline && plt != PltFormat::IbtPlt) {
        throw Error(Errc::BadConfig, "clang-cfi images use the baseline IBT PLT");
    }

    Image img;
    img.name = p.name;
    img.relro_full = p.relro_full;
    img.plt = plt;
    img.irm = irm;
    img.sid_reg = sid_reg;
    img.data_objects = p.data_objects;

    // Imports: which are address-taken here (LoadFnAddr or data entries).
    std::set<std::string> at_imports;
    for (const ir::Function& f : p.functions) {
        for (const Instruction& in : f.instrs) {
            if (in.op == Op::LoadFnAddr && p.find_import(in.sym)) at_imports.insert(in.sym);
        }
    }
    for (const ir::DataObject& d : p.data_objects) {
        for (const auto& e : d.entries) {
            if (e.is_symbol && p.find_import(e.sym)) at_imports.insert(e.sym);
        }
    }

    bool fineibt_plt = plt == PltFormat::FineIbtPlt || plt == PltFormat::CompactPlt;
    size_t atfplt_count = 0;
    for (size_t k = 0; k < p.imports.size(); ++k) {
        const ir::ImportDecl& decl = p.imports[k];
        ImportSlot slot;
        slot.symbol = decl.name;
        slot.signature = decl.signature;
        slot.got_slot = kGotFirstImportSlot + k;
        slot.fplt_index = k + 1;
        slot.address_taken = at_imports.count(decl.name) != 0;
        if (decl.name == weave::kChkFailSymbol && !a.class_of_function(decl.name)) {
            slot.sid = kChkFailSid;
        } else {
            slot.sid = a.sid_of_function(decl.name); // MissingSid if unclassed
        }
        if (fineibt_plt && slot.address_taken) slot.atfplt_index = ++atfplt_count;
        img.imports.push_back(std::move(slot));
    }

    // ---------------------------------------------------------------- .text
    Section text;
    uint64_t cursor = 0;
    std::string prev_owner;
    auto pad_text_to = [&](uint64_t alignment, const std::string& next_owner) {
        uint64_t target = align_up(cursor, alignment);
        while (cursor < target) {
            uint64_t gap = std::min<uint64_t>(target - cursor, 9);
            SectionItem pad;
            pad.offset = cursor;
            pad.owner = prev_owner.empty() ? next_owner : prev_owner;
            pad.instr = ir::ins::nop(static_cast<uint8_t>(gap));
            text.items.push_back(std::move(pad));
            cursor += gap;
        }
    };

    auto rewrite_import_ref = [&](Instruction& in) {
        if ((in.op == Op::DirectCall || in.op == Op::Jmp) && p.find_import(in.sym)) {
            if (in.sym == kResolverSymbol) return;
            in.sym += fineibt_plt ? "@FPLT" : "@SPLT";
        } else if (in.op == Op::LoadFnAddr && p.find_import(in.sym)) {
            in.sym += fineibt_plt ? "@ATFPLT" : "@SPLT";
        }
    };

    for (const ir::Function& f : p.functions) {
        bool surrogate = is_clang_surrogate(p, f);
        pad_text_to(surrogate ? 8 : 16, f.name);
        prev_owner = f.name;

        uint64_t fn_start = cursor;
        std::vector<uint64_t> instr_offsets(f.instrs.size() + 1, 0);
        size_t label_cursor = 0;
        for (size_t i = 0; i < f.instrs.size(); ++i) {
            instr_offsets[i] = cursor;
            SectionItem item;
            item.offset = cursor;
            item.owner = f.name;
            while (label_cursor < f.labels.size() && f.labels[label_cursor].index == i) {
                item.labels.push_back(f.labels[label_cursor].name);
                ++label_cursor;
            }
            item.instr = f.instrs[i];
            rewrite_import_ref(item.instr);
            cursor += static_cast<uint64_t>(ir::instruction_size(item.instr));
            text.items.push_back(std::move(item));
        }
        instr_offsets[f.instrs.size()] = cursor;
        (void)fn_start;

        // Symbol table: the function itself (at its entry marker), every
        // label, and the export view of both.
        uint64_t fn_symbol_off = instr_offsets[f.entry_index];
        img.symbols[f.name] = SymbolInfo{".text", fn_symbol_off, f.linkage, false};
        for (const ir::Label& l : f.labels) {
            if (l.name == f.name) continue;
            bool alias = l.name == weave::entry_label(f.name);
            SymbolInfo info{".text", instr_offsets[l.index], ir::Linkage::Local, alias};
            if (alias) info.visibility = f.linkage;
            auto [it, inserted] = img.symbols.emplace(l.name, info);
            if (!inserted) {
                throw Error(Errc::DuplicateSymbol,
                            "label '" + l.name + "' is not unique within image " + p.name);
            }
        }
        if (f.linkage == ir::Linkage::Global) {
            img.exports[f.name] = img.symbols[f.name];
            std::string alias = weave::entry_label(f.name);
            auto alias_sym = img.symbols.find(alias);
            if (alias_sym != img.symbols.end()) {
                img.exports[alias] = alias_sym->second;
            }
        }

        // NOPout note: non-address-taken, non-local, FineIBT-protected.
        bool fineibt_irm =
            irm == weave::IrmVariant::FineIbtBasic || irm == weave::IrmVariant::FineIbtColdpath;
        if (fineibt_irm && f.linkage == ir::Linkage::Global && !f.address_taken) {
            if (f.entry_index < f.instrs.size() && f.instrs[f.entry_index].op == Op::Endbr64) {
                img.nopout_note.push_back(NopoutEntry{f.name, fn_symbol_off});
            }
        }
    }
    img.sections[".text"] = std::move(text);

    // ------------------------------------------------------------ PLT family
    uint64_t next_base = align_up(img.sections[".text"].size(), 64);
    auto add_plt_section = [&](const std::string& name) -> Section& {
        Section sec;
        sec.base = next_base;
        img.sections[name] = std::move(sec);
        return img.sections[name];
    };
    auto finish_plt_section = [&](const std::string& name) {
        next_base = align_up(img.sections[name].base + img.sections[name].size(), 64);
    };

    bool have_imports = !img.imports.empty();
    if (have_imports && plt != PltFormat::CompactPlt) {
        Section& sec = add_plt_section(".plt");
        SlotWriter w{sec};
        if (plt == PltFormat::IbtPlt) {
            w.entry("PLT0", "", {ir::ins::push_got_slot(kGotLinkMapSlot),
                                 ir::ins::indirect_jmp_got(std::string(kResolverSymbol))});
            for (const ImportSlot& s : img.imports) {
                w.entry(plt_entry_label("PLT", s.fplt_index), "",
                        {ir::ins::endbr64(), ir::ins::push_imm(static_cast<uint32_t>(s.fplt_index - 1)),
                         ir::ins::jmp("PLT0")});
            }
        } else {
            std::vector<Instruction> plt0;
            if (sid_reg != ir::Reg::rax) {
                // The resolver hand-off packs both SIDs into %rax; bridge
                // from the scratch register first.
                plt0.push_back(ir::ins::mov_reg(ir::Reg::rax, sid_reg));
            }
            plt0.push_back(ir::ins::shl(ir::Reg::rax, 0x20));
            plt0.push_back(ir::ins::or64_imm(ir::Reg::rax, kResolverSid));
            plt0.push_back(ir::ins::push_got_slot(kGotLinkMapSlot));
            plt0.push_back(ir::ins::indirect_jmp_got(std::string(kResolverSymbol)));
            w.entry("PLT0", "", std::move(plt0));
            for (const ImportSlot& s : img.imports) {
                w.entry(plt_entry_label("PLT", s.fplt_index), "",
                        {ir::ins::endbr64(), ir::ins::cmp_imm(sid_reg, s.sid, ir::Width::W32),
                         ir::ins::push_imm(static_cast<uint32_t>(s.fplt_index - 1)),
                         ir::ins::cond_branch(ir::Cond::Eq, "PLT0"), ir::ins::hlt()});
            }
        }
        finish_plt_section(".plt");
    }

    if (have_imports && plt == PltFormat::IbtPlt) {
        Section& sec = add_plt_section(".plt.sec");
        SlotWriter w{sec};
        for (const ImportSlot& s : img.imports) {
            w.entry(plt_entry_label("SPLT", s.fplt_index), s.symbol + "@SPLT",
                    {ir::ins::endbr64(), ir::ins::indirect_jmp_got(s.symbol)});
        }
        finish_plt_section(".plt.sec");
    }

    if (have_imports && fineibt_plt) {
        Section& sec = add_plt_section(".plt.fineibt");
        SlotWriter w{sec};
        for (const ImportSlot& s : img.imports) {
            if (plt == PltFormat::CompactPlt) {
                w.entry(plt_entry_label("FPLT", s.fplt_index), s.symbol + "@FPLT",
                        {ir::ins::indirect_jmp_got(s.symbol, /*notrack=*/true)});
            } else {
                w.entry(plt_entry_label("FPLT", s.fplt_index), s.symbol + "@FPLT",
                        {ir::ins::mov_imm(sid_reg, s.sid), ir::ins::indirect_jmp_got(s.symbol)});
            }
        }
        finish_plt_section(".plt.fineibt");

        bool any_at = std::any_of(img.imports.begin(), img.imports.end(),
                                  [](const ImportSlot& s) { return s.atfplt_index.has_value(); });
        if (any_at) {
            Section& atsec = add_plt_section(".plt.atfineibt");
            SlotWriter aw{atsec};
            for (const ImportSlot& s : img.imports) {
                if (!s.atfplt_index) continue;
                aw.entry(plt_entry_label("ATFPLT", *s.atfplt_index), s.symbol + "@ATFPLT",
                         {ir::ins::endbr64(), ir::ins::sub_imm(sid_reg, s.sid),
                          ir::ins::cond_branch(ir::Cond::Eq, plt_entry_label("FPLT", s.fplt_index)),
                          ir::ins::hlt()});
            }
            finish_plt_section(".plt.atfineibt");
        }
    }

    // PLT slot labels become image symbols.
    for (const auto& [name, sec] : img.sections) {
        if (name == ".text") continue;
        for (const SectionItem& item : sec.items) {
            for (const std::string& label : item.labels) {
                img.symbols[label] = SymbolInfo{name, item.offset, ir::Linkage::Local, false};
            }
        }
    }

    return img;
}

// ---------------------------------------------------------------------------
// Census

TargetCensus census(const Image& img) {
    TargetCensus c;
    for (const auto& [name, sec] : img.sections) {
        bool in_text = name == ".text";
        for (size_t i = 0; i < sec.items.size(); ++i) {
            if (sec.items[i].instr.op != Op::Endbr64) continue;
            if (in_text) {
                ++c.endbr_in_text;
            } else {
                ++c.endbr_in_plt_family;
            }
            bool checked = false;
            if (i + 1 < sec.items.size()) {
                Op next = sec.items[i + 1].instr.op;
                checked = next == Op::SubImm || next == Op::CmpImm;
            }
            if (checked) {
                ++c.protected_landing_pads;
            } else {
                ++c.unchecked_landing_pads;
            }
        }
    }
    c.total_landing_pads = c.endbr_in_text + c.endbr_in_plt_family;

    if (img.irm == weave::IrmVariant::ClangCfiBaseline) {
        const Section* text = img.find_section(".text");
        if (text) {
            for (const SectionItem& item : text->items) {
                if (item.instr.op == Op::Jmp &&
                    img.symbols.count(weave::cfi_target_name(item.owner))) {
                    ++c.clang_trampoline_slots;
                }
            }
        }
    }
    return c;
}

std::string TargetCensus::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(26) << "endbr_in_text" << endbr_in_text << "\n";
    os << std::left << std::setw(26) << "endbr_in_plt_family" << endbr_in_plt_family << "\n";
    os << std::left << std::setw(26) << "total_landing_pads" << total_landing_pads << "\n";
    os << std::left << std::setw(26) << "protected_landing_pads" << protected_landing_pads << "\n";
    os << std::left << std::setw(26) << "unchecked_landing_pads" << unchecked_landing_pads << "\n";
    if (clang_trampoline_slots) {
        os << std::left << std::setw(26) << "clang_trampoline_slots" << clang_trampoline_slots << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using nlohmann::ordered_json;

ordered_json section_to_json(const Section& sec) {
    ordered_json j;
    j["base"] = sec.base;
    ordered_json items = ordered_json::array();
    for (const SectionItem& item : sec.items) {
        ordered_json ji;
        ji["off"] = item.offset;
        if (!item.labels.empty()) ji["labels"] = item.labels;
        ji["owner"] = item.owner;
        ji["instr"] = ir::print_instruction(item.instr);
        items.push_back(std::move(ji));
    }
    j["items"] = std::move(items);
    return j;
}

Section section_from_json(const ordered_json& j) {
    Section sec;
    sec.base = j.at("base").get<uint64_t>();
    for (const auto& ji : j.at("items")) {
        SectionItem item;
        item.offset = ji.at("off").get<uint64_t>();
        if (ji.contains("labels")) item.labels = ji.at("labels").get<std::vector<std::string>>();
        item.owner = ji.at("owner").get<std::string>();
        item.instr = ir::parse_instruction_text(ji.at("instr").get<std::string>());
        sec.items.push_back(std::move(item));
    }
    return sec;
}

ordered_json symbol_to_json(const SymbolInfo& s) {
    ordered_json j;
    j["section"] = s.section;
    j["offset"] = s.offset;
    j["visibility"] = s.visibility == ir::Linkage::Global ? "global" : "local";
    j["entry_alias"] = s.is_entry_alias;
    return j;
}

SymbolInfo symbol_from_json(const ordered_json& j) {
    SymbolInfo s;
    s.section = j.at("section").get<std::string>();
    s.offset = j.at("offset").get<uint64_t>();
    s.visibility = j.at("visibility").get<std::string>() == "global" ? ir::Linkage::Global
                                                                     : ir::Linkage::Local;
    s.is_entry_alias = j.at("entry_alias").get<bool>();
    return s;
}

std::string sid_hex(policy::Sid sid) {
    std::ostringstream os;
    os << "0x" << std::hex << sid;
    return os.str();
}

policy::Sid sid_from_hex(const std::string& text) {
    return static_cast<policy::Sid>(std::stoull(text, nullptr, 16));
}

} // namespace

nlohmann::ordered_json Image::to_json() const {
    ordered_json j;
    j["format"] = "fibt-image v1";
    j["name"] = name;
    j["relro_full"] = relro_full;
    j["plt"] = plt_name(plt);
    j["irm"] = weave::irm_name(irm);
    j["sid_reg"] = ir::reg_name64(sid_reg);
    j["resolver_sid"] = sid_hex(resolver_sid);

    ordered_json sections_json;
    for (const auto& [sname, sec] : sections) sections_json[sname] = section_to_json(sec);
    j["sections"] = std::move(sections_json);

    ordered_json exports_json;
    for (const auto& [sym, info] : exports) exports_json[sym] = symbol_to_json(info);
    j["exports"] = std::move(exports_json);

    ordered_json symbols_json;
    for (const auto& [sym, info] : symbols) symbols_json[sym] = symbol_to_json(info);
    j["symbols"] = std::move(symbols_json);

    ordered_json imports_json = ordered_json::array();
    for (const ImportSlot& s : imports) {
        ordered_json ji;
        ji["symbol"] = s.symbol;
        ji["signature"] = ir::signature_to_string(s.signature);
        ji["got_slot"] = s.got_slot;
        ji["fplt"] = s.fplt_index;
        if (s.atfplt_index) {
            ji["atfplt"] = *s.atfplt_index;
        } else {
            ji["atfplt"] = nullptr;
        }
        ji["sid"] = sid_hex(s.sid);
        ji["address_taken"] = s.address_taken;
        imports_json.push_back(std::move(ji));
    }
    j["imports"] = std::move(imports_json);

    ordered_json data_json = ordered_json::array();
    for (const ir::DataObject& d : data_objects) {
        ordered_json jd;
        jd["name"] = d.name;
        switch (d.kind) {
        case ir::DataObject::Kind::JumpTable: jd["kind"] = "jump_table"; break;
        case ir::DataObject::Kind::Vtable: jd["kind"] = "vtable"; break;
        case ir::DataObject::Kind::FnptrSlot: jd["kind"] = "fnptr_slot"; break;
        case ir::DataObject::Kind::Bytes: jd["kind"] = "bytes"; break;
        }
        jd["writable"] = d.writable;
        ordered_json entries = ordered_json::array();
        for (const auto& e : d.entries) {
            if (e.is_symbol) {
                entries.push_back(e.sym);
            } else {
                entries.push_back(e.value);
            }
        }
        jd["entries"] = std::move(entries);
        data_json.push_back(std::move(jd));
    }
    j["data"] = std::move(data_json);

    ordered_json note = ordered_json::array();
    for (const NopoutEntry& e : nopout_note) {
        ordered_json je;
        je["symbol"] = e.symbol;
        je["offset"] = e.text_offset;
        note.push_back(std::move(je));
    }
    j["nopout_note"] = std::move(note);

    ordered_json size_json;
    size_json["original_total"] = size.original_total;
    size_json["instrumented_total"] = size.instrumented_total;
    size_json["endbr_bytes"] = size.endbr_bytes;
    size_json["caller_irm_bytes"] = size.caller_irm_bytes;
    size_json["callee_irm_bytes"] = size.callee_irm_bytes;
    size_json["trampoline_bytes"] = size.trampoline_bytes;
    size_json["coldpath_bytes"] = size.coldpath_bytes;
    ordered_json per_fn = ordered_json::array();
    for (const auto& f : size.per_function) {
        ordered_json jf;
        jf["name"] = f.name;
        jf["original"] = f.original;
        jf["instrumented"] = f.instrumented;
        per_fn.push_back(std::move(jf));
    }
    size_json["per_function"] = std::move(per_fn);
    j["size_report"] = std::move(size_json);

    ordered_json classes_json = ordered_json::array();
    for (const ClassSummary& c : classes) {
        ordered_json jc;
        jc["id"] = c.id;
        jc["key"] = c.key;
        jc["sid"] = sid_hex(c.sid);
        jc["members"] = c.members;
        jc["callsites"] = c.callsites;
        classes_json.push_back(std::move(jc));
    }
    j["classes"] = std::move(classes_json);

    return j;
}

Image Image::from_json(const nlohmann::ordered_json& j) {
    if (j.at("format").get<std::string>() != "fibt-image v1") {
        throw Error(Errc::BadConfig, "not a fibt-image v1 document");
    }
    Image img;
    img.name = j.at("name").get<std::string>();
    img.relro_full = j.at("relro_full").get<bool>();
    img.plt = *plt_from_name(j.at("plt").get<std::string>());
    img.irm = *weave::irm_from_name(j.at("irm").get<std::string>());
    img.sid_reg = *ir::reg_from_name(j.at("sid_reg").get<std::string>());
    img.resolver_sid = sid_from_hex(j.at("resolver_sid").get<std::string>());

    for (const auto& [sname, jsec] : j.at("sections").items()) {
        img.sections[sname] = section_from_json(jsec);
    }
    for (const auto& [sym, jinfo] : j.at("exports").items()) {
        img.exports[sym] = symbol_from_json(jinfo);
    }
    for (const auto& [sym, jinfo] : j.at("symbols").items()) {
        img.symbols[sym] = symbol_from_json(jinfo);
    }
    for (const auto& ji : j.at("imports")) {
        ImportSlot s;
        s.symbol = ji.at("symbol").get<std::string>();
        s.signature = ir::parse_signature(ji.at("signature").get<std::string>());
        s.got_slot = ji.at("got_slot").get<size_t>();
        s.fplt_index = ji.at("fplt").get<size_t>();
        if (!ji.at("atfplt").is_null()) s.atfplt_index = ji.at("atfplt").get<size_t>();
        s.sid = sid_from_hex(ji.at("sid").get<std::string>());
        s.address_taken = ji.at("address_taken").get<bool>();
        img.imports.push_back(std::move(s));
    }
    for (const auto& jd : j.at("data")) {
        ir::DataObject d;
        d.name = jd.at("name").get<std::string>();
        std::string kind = jd.at("kind").get<std::string>();
        if (kind == "jump_table") d.kind = ir::DataObject::Kind::JumpTable;
        else if (kind == "vtable") d.kind = ir::DataObject::Kind::Vtable;
        else if (kind == "fnptr_slot") d.kind = ir::DataObject::Kind::FnptrSlot;
        else d.kind = ir::DataObject::Kind::Bytes;
        d.writable = jd.at("writable").get<bool>();
        for (const auto& je : jd.at("entries")) {
            ir::DataObject::Entry e;
            if (je.is_string()) {
                e.is_symbol = true;
                e.sym = je.get<std::string>();
            } else {
                e.is_symbol = false;
                e.value = je.get<uint64_t>();
            }
            d.entries.push_back(std::move(e));
        }
        img.data_objects.push_back(std::move(d));
    }
    for (const auto& je : j.at("nopout_note")) {
        img.nopout_note.push_back(
            NopoutEntry{je.at("symbol").get<std::string>(), je.at("offset").get<uint64_t>()});
    }

    const auto& jsize = j.at("size_report");
    img.size.original_total = jsize.at("original_total").get<uint64_t>();
    img.size.instrumented_total = jsize.at("instrumented_total").get<uint64_t>();
    img.size.endbr_bytes = jsize.at("endbr_bytes").get<uint64_t>();
    img.size.caller_irm_bytes = jsize.at("caller_irm_bytes").get<uint64_t>();
    img.size.callee_irm_bytes = jsize.at("callee_irm_bytes").get<uint64_t>();
    img.size.trampoline_bytes = jsize.at("trampoline_bytes").get<uint64_t>();
    img.size.coldpath_bytes = jsize.at("coldpath_bytes").get<uint64_t>();
    for (const auto& jf : jsize.at("per_function")) {
        img.size.per_function.push_back({jf.at("name").get<std::string>(),
                                         jf.at("original").get<uint64_t>(),
                                         jf.at("instrumented").get<uint64_t>()});
    }

    for (const auto& jc : j.at("classes")) {
        ClassSummary c;
        c.id = jc.at("id").get<size_t>();
        c.key = jc.at("key").get<std::string>();
        c.sid = sid_from_hex(jc.at("sid").get<std::string>());
        c.members = jc.at("members").get<std::vector<std::string>>();
        c.callsites = jc.at("callsites").get<size_t>();
        img.classes.push_back(std::move(c));
    }

    return img;
}

std::string Image::dump_sections() const {
    std::ostringstream os;
    os << "image " << name << " plt=" << plt_name(plt) << " irm=" << weave::irm_name(irm)
       << (relro_full ? " relro_full" : "") << "\n";
    for (const auto& [sname, sec] : sections) {
        os << "\n" << sname << " (base 0x" << std::hex << sec.base << std::dec << ", "
           << sec.size() << " bytes)\n";
        std::string owner;
        for (const SectionItem& item : sec.items) {
            if (item.owner != owner) {
                owner = item.owner;
                os << "  <" << owner << ">\n";
            }
            for (const std::string& label : item.labels) {
                os << "    " << label << ":\n";
            }
            os << "    " << std::setw(6) << std::right << item.offset << "  "
               << ir::print_instruction(item.instr) << "\n";
        }
    }
    if (!nopout_note.empty()) {
        os << "\n.plt.nopout\n";
        for (const NopoutEntry& e : nopout_note) {
            os << "    " << e.symbol << " @ " << e.text_offset << "\n";
        }
    }
    return os.str();
}

} // namespace fibt::linkage
