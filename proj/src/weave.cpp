// SPDX-License-Identifier: Apache-2.0
#include "fibt/weave.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace fibt::weave {

const char* irm_name(IrmVariant v) {
    switch (v) {
    case IrmVariant::None: return "none";
    case IrmVariant::IbtOnly: return "ibt";
    case IrmVariant::FineIbtBasic: return "fineibt";
    case IrmVariant::FineIbtColdpath: return "fineibt-coldpath";
    case IrmVariant::ClangCfiBaseline: return "clang-cfi";
    }
    return "none";
}

std::optional<IrmVariant> irm_from_name(std::string_view name) {
    if (name == "none") return IrmVariant::None;
    if (name == "ibt") return IrmVariant::IbtOnly;
    if (name == "fineibt") return IrmVariant::FineIbtBasic;
    if (name == "fineibt-coldpath") return IrmVariant::FineIbtColdpath;
    if (name == "clang-cfi") return IrmVariant::ClangCfiBaseline;
    return std::nullopt;
}

bool is_protected(const ir::Function& f) {
    return f.address_taken || f.linkage == ir::Linkage::Global;
}

std::string entry_label(const std::string& fn) { return fn + "_entry"; }
std::string coldpath_label(const std::string& fn) { return "." + fn + "_fineibt_coldpath"; }
std::string cfi_trap_label(const std::string& fn) { return "." + fn + "_cfi_trap"; }
std::string cfi_target_name(const std::string& fn) { return fn + ".cfi"; }

namespace {

using ir::Instruction;
using ir::Op;

// Shifts labels at or after `from` right by `count` inserted instructions.
void shift_labels(ir::Function& f, size_t from, size_t count) {
    for (ir::Label& l : f.labels) {
        if (l.index >= from) l.index += count;
    }
}

void insert_before(ir::Function& f, size_t index, std::vector<Instruction> seq) {
    shift_labels(f, index, seq.size());
    f.instrs.insert(f.instrs.begin() + static_cast<long>(index),
                    std::make_move_iterator(seq.begin()), std::make_move_iterator(seq.end()));
}

bool calls_through_plt_sections(const std::string& sym) {
    return sym.find('@') != std::string::npos;
}

} // namespace

ir::Program instrument(const ir::Program& p, const policy::SidAssignment& a, IrmVariant v,
                       ir::Reg sid_reg) {
    if (v == IrmVariant::ClangCfiBaseline) return instrument_clang_cfi(p, a);

    ir::Program out = p;
    if (v == IrmVariant::None) return out;

    std::set<std::string> protected_fns;
    for (const ir::Function& f : p.functions) {
        if (is_protected(f)) protected_fns.insert(f.name);
    }

    bool fineibt = v == IrmVariant::FineIbtBasic || v == IrmVariant::FineIbtColdpath;
    bool needs_chk_fail = false;

    for (ir::Function& f : out.functions) {
        // Caller side first, walking backwards so indices stay valid. Every
        // indirect call or register tail-jump gets exactly one SID load.
        if (fineibt) {
            for (size_t i = f.instrs.size(); i-- > 0;) {
                Op op = f.instrs[i].op;
                if (op != Op::IndirectCall && op != Op::IndirectJmpReg) continue;
                policy::Sid sid = a.sid_of_callsite(policy::CallsiteRef{f.name, i});
                insert_before(f, i, {ir::ins::mov_imm(sid_reg, sid)});
            }
        }

        // Direct transfers to protected functions bypass the IRM via the
        // *_entry alias.
        if (fineibt) {
            for (Instruction& in : f.instrs) {
                if ((in.op == Op::DirectCall || in.op == Op::Jmp) && protected_fns.count(in.sym) &&
                    !calls_through_plt_sections(in.sym)) {
                    in.sym = entry_label(in.sym);
                }
            }
        }

        if (!protected_fns.count(f.name)) continue;

        // Callee side.
        if (v == IrmVariant::IbtOnly) {
            insert_before(f, 0, {ir::ins::endbr64()});
        } else if (v == IrmVariant::FineIbtBasic) {
            policy::Sid sid = a.sid_of_function(f.name);
            f.labels.push_back(ir::Label{entry_label(f.name), 0});
            insert_before(f, 0,
                          {ir::ins::endbr64(), ir::ins::sub_imm(sid_reg, sid),
                           ir::ins::cond_branch(ir::Cond::Eq, entry_label(f.name)), ir::ins::hlt()});
        } else { // FineIbtColdpath
            policy::Sid sid = a.sid_of_function(f.name);
            needs_chk_fail = true;
            f.labels.push_back(ir::Label{entry_label(f.name), 0});
            insert_before(f, 0,
                          {ir::ins::direct_call(std::string(kChkFailSymbol)), ir::ins::endbr64(),
                           ir::ins::sub_imm(sid_reg, sid),
                           ir::ins::cond_branch(ir::Cond::Ne, coldpath_label(f.name))});
            // Coldpath block above the function symbol; the symbol label
            // marks the real entry point.
            f.labels.push_back(ir::Label{coldpath_label(f.name), 0});
            f.labels.push_back(ir::Label{f.name, 1});
        }
    }

    if (needs_chk_fail && !out.find_import(std::string(kChkFailSymbol))) {
        ir::ImportDecl imp;
        imp.name = std::string(kChkFailSymbol);
        imp.signature = ir::Signature{};
        out.imports.push_back(std::move(imp));
    }

    ir::validate(out);
    return out;
}

ir::Program instrument_clang_cfi(const ir::Program& p, const policy::SidAssignment& a) {
    if (a.kind != policy::PolicyKind::TypeStrict) {
        throw Error(Errc::BadConfig, "clang-cfi baseline requires the type-strict policy");
    }

    ir::Program out;
    out.name = p.name;
    out.relro_full = p.relro_full;
    out.imports = p.imports;
    out.data_objects = p.data_objects;

    std::set<std::string> protected_fns;
    for (const ir::Function& f : p.functions) {
        if (is_protected(f)) protected_fns.insert(f.name);
    }

    // Trampoline slot layout per class: members keep program order, the
    // first member's surrogate is the range-check base.
    struct ClassLayout {
        std::string base_symbol;
        size_t size{0};
        std::map<std::string, size_t> slot_of;
    };
    std::map<size_t, ClassLayout> layouts;
    for (const auto& c : a.classes) {
        ClassLayout layout;
        for (const std::string& m : c.members) {
            if (!protected_fns.count(m)) continue; // imports have no local slot
            if (layout.base_symbol.empty()) layout.base_symbol = m;
            layout.slot_of[m] = layout.size++;
        }
        if (layout.size > 0) layouts[c.id] = std::move(layout);
    }

    for (const ir::Function& f : p.functions) {
        ir::Function body = f;
        bool prot = protected_fns.count(f.name) != 0;
        if (prot) body.name = cfi_target_name(f.name);

        bool needs_trap = false;
        for (size_t i = body.instrs.size(); i-- > 0;) {
            Instruction& in = body.instrs[i];
            if (in.op == Op::DirectCall || in.op == Op::Jmp) {
                if (protected_fns.count(in.sym)) in.sym = cfi_target_name(in.sym);
                continue;
            }
            if (in.op != Op::IndirectCall && in.op != Op::IndirectJmpReg) continue;

            size_t cls = a.callsite_to_class.at(policy::CallsiteRef{f.name, i});
            auto layout = layouts.find(cls);
            if (layout == layouts.end()) {
                throw Error(Errc::MissingSid,
                            "callsite " + f.name + ":" + std::to_string(i) +
                                " targets a class with no local trampoline");
            }
            needs_trap = true;
            // Scratch registers mirror the reference IRM: rcx holds the
            // trampoline base, rdx the rotated distance.
            insert_before(body, i,
                          {ir::ins::load_fn_addr(ir::Reg::rcx, layout->second.base_symbol),
                           ir::ins::mov_reg(ir::Reg::rdx, in.reg),
                           ir::ins::sub_reg(ir::Reg::rdx, ir::Reg::rcx),
                           ir::ins::rol(ir::Reg::rdx, 0x3d),
                           ir::ins::cmp_imm(ir::Reg::rdx, layout->second.size, ir::Width::W64),
                           ir::ins::cond_branch(ir::Cond::Ae, cfi_trap_label(f.name))});
        }
        if (needs_trap) {
            body.labels.push_back(ir::Label{cfi_trap_label(f.name), body.instrs.size()});
            body.instrs.push_back(ir::ins::ud2());
        }
        out.functions.push_back(std::move(body));
    }

    // Surrogate trampolines after the real code, grouped per class in class
    // order so slots sit 8 bytes apart.
    for (const auto& c : a.classes) {
        auto layout = layouts.find(c.id);
        if (layout == layouts.end()) continue;
        for (const std::string& m : c.members) {
            if (!layout->second.slot_of.count(m)) continue;
            ir::Function slot;
            slot.name = m;
            slot.linkage = p.find_function(m)->linkage;
            slot.signature = p.find_function(m)->signature;
            slot.instrs = {ir::ins::jmp(cfi_target_name(m)), ir::ins::int3(), ir::ins::int3(),
                           ir::ins::int3()};
            out.functions.push_back(std::move(slot));
        }
    }

    ir::validate(out);
    return out;
}

// ---------------------------------------------------------------------------
// ARM BTI emitter

std::optional<BtiEncoding> bti_encode_sid(uint32_t sid) {
    BtiEncoding enc;
    bool movz_ok = false;
    for (uint8_t shift : {0, 16, 32, 48}) {
        if (shift >= 64) continue;
        uint64_t imm = static_cast<uint64_t>(sid) >> shift;
        if (imm <= 0xFFFF && (imm << shift) == sid) {
            enc.movz_imm = static_cast<uint16_t>(imm);
            enc.movz_shift = shift;
            movz_ok = true;
            break;
        }
    }
    if (!movz_ok) return std::nullopt;
    for (uint8_t shift : {0, 12}) {
        uint64_t imm = static_cast<uint64_t>(sid) >> shift;
        if (imm <= 0xFFF && (imm << shift) == sid) {
            enc.subs_imm = static_cast<uint16_t>(imm);
            enc.subs_shift = shift;
            return enc;
        }
    }
    return std::nullopt;
}

namespace {

std::string bti_hex(uint64_t v) {
    std::ostringstream os;
    os << "#0x" << std::hex << v;
    return os.str();
}

std::string bti_imm(uint16_t imm, uint8_t shift) {
    std::string out = bti_hex(imm);
    if (shift != 0) out += ", lsl #" + std::to_string(shift);
    return out;
}

// x86 scratch registers map onto low A64 GPRs; w9 is the SID register.
const char* a64_reg(ir::Reg r) {
    switch (r) {
    case ir::Reg::rax: return "x0";
    case ir::Reg::rbx: return "x1";
    case ir::Reg::rcx: return "x2";
    case ir::Reg::rdx: return "x3";
    case ir::Reg::rsi: return "x4";
    case ir::Reg::rdi: return "x5";
    case ir::Reg::r10: return "x10";
    case ir::Reg::r11: return "x11";
    case ir::Reg::r12: return "x12";
    }
    return "x0";
}

std::string bti_coldpath_label(const std::string& fn) { return "." + fn + "_finebti_coldpath"; }

} // namespace

std::string emit_bti_text(const ir::Program& p, const policy::SidAssignment& a) {
    std::set<std::string> protected_fns;
    std::map<std::string, BtiEncoding> encodings;
    for (const ir::Function& f : p.functions) {
        if (!is_protected(f)) continue;
        protected_fns.insert(f.name);
        policy::Sid sid = a.sid_of_function(f.name);
        auto enc = bti_encode_sid(sid);
        if (!enc) {
            std::ostringstream os;
            os << "sid 0x" << std::hex << sid << " of " << f.name
               << " fits neither movz nor subs shifted-immediate forms";
            throw Error(Errc::SidNotEncodable, os.str());
        }
        encodings[f.name] = *enc;
    }

    std::ostringstream os;
    os << ";s64 v1\n";
    os << "// " << p.name << " (A64 FineBTI listing, emit-only)\n";
    for (const ir::Function& f : p.functions) {
        os << "\n";
        bool prot = protected_fns.count(f.name) != 0;
        if (prot) {
            os << bti_coldpath_label(f.name) << ":\n";
            os << "  bl " << kBtiChkFailSymbol << "@PLT\n";
        }
        os << f.name << ":\n";
        if (prot) {
            const BtiEncoding& enc = encodings[f.name];
            os << "  bti c\n";
            os << "  subs w9, w9, " << bti_imm(enc.subs_imm, enc.subs_shift) << "\n";
            os << "  bne " << bti_coldpath_label(f.name) << "\n";
            os << entry_label(f.name) << ":\n";
        }
        for (size_t i = 0; i < f.instrs.size(); ++i) {
            const Instruction& in = f.instrs[i];
            switch (in.op) {
            case Op::IndirectCall:
            case Op::IndirectJmpReg: {
                auto ref = a.callsite_to_class.find(policy::CallsiteRef{f.name, i});
                if (ref != a.callsite_to_class.end()) {
                    policy::Sid sid = a.class_to_sid.at(ref->second);
                    auto enc = bti_encode_sid(sid);
                    if (!enc) {
                        throw Error(Errc::SidNotEncodable, "callsite SID not encodable");
                    }
                    os << "  movz w9, " << bti_imm(enc->movz_imm, enc->movz_shift) << "\n";
                }
                os << (in.op == Op::IndirectCall ? "  blr " : "  br ") << a64_reg(in.reg) << "\n";
                break;
            }
            case Op::DirectCall: {
                std::string target = in.sym;
                if (protected_fns.count(target)) target = entry_label(target);
                os << "  bl " << target << "\n";
                break;
            }
            case Op::LoadFnAddr:
                os << "  adrp " << a64_reg(in.reg) << ", " << in.sym << "\n";
                break;
            case Op::Ret:
                os << "  ret\n";
                break;
            case Op::Halt:
                os << "  mov w0, " << bti_hex(in.imm) << "\n  bl exit\n";
                break;
            default:
                os << "  // " << ir::print_instruction(in) << "\n";
                break;
            }
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Size accounting

namespace {

enum class SizeCategory { Endbr, Caller, Callee, Trampoline, Coldpath, Plain };

// Attribution by opcode. Instrumentation only ever inserts instructions, so
// signed before/after differences per category cancel everything the user
// wrote and leave exactly the woven bytes.
SizeCategory categorize(const Instruction& in, bool in_trampoline) {
    switch (in.op) {
    case Op::Endbr64:
        return SizeCategory::Endbr;
    case Op::MovImm:
    case Op::CmpImm:
    case Op::SubReg:
    case Op::Rol:
    case Op::MovReg:
    case Op::LoadFnAddr:
        return SizeCategory::Caller;
    case Op::SubImm:
    case Op::Hlt:
        return SizeCategory::Callee;
    case Op::CondBranch:
        return in.cond == ir::Cond::Ae ? SizeCategory::Caller : SizeCategory::Callee;
    case Op::Ud2:
        return SizeCategory::Coldpath;
    case Op::DirectCall:
        return in.sym == kChkFailSymbol ? SizeCategory::Coldpath : SizeCategory::Plain;
    case Op::Jmp:
    case Op::Int3:
        return in_trampoline ? SizeCategory::Trampoline : SizeCategory::Plain;
    default:
        return SizeCategory::Plain;
    }
}

} // namespace

SizeReport size_report(const ir::Program& before, const ir::Program& after) {
    SizeReport r;

    std::map<std::string, uint64_t> before_sizes;
    for (const ir::Function& f : before.functions) {
        before_sizes[f.name] = ir::body_size(f);
        r.original_total += ir::body_size(f);
    }

    // Surrogate trampolines share the original name while the renamed body
    // carries the .cfi suffix.
    std::set<std::string> has_cfi_sibling;
    for (const ir::Function& f : after.functions) {
        if (f.name.size() > 4 && f.name.compare(f.name.size() - 4, 4, ".cfi") == 0) {
            has_cfi_sibling.insert(f.name.substr(0, f.name.size() - 4));
        }
    }

    for (const ir::Function& f : after.functions) {
        uint64_t size = ir::body_size(f);
        r.instrumented_total += size;

        bool is_cfi_body = f.name.size() > 4 && f.name.compare(f.name.size() - 4, 4, ".cfi") == 0;
        bool is_surrogate = has_cfi_sibling.count(f.name) != 0;
        std::string original_name = is_cfi_body ? f.name.substr(0, f.name.size() - 4) : f.name;

        uint64_t original = 0;
        if (!is_surrogate) {
            auto prev = before_sizes.find(original_name);
            if (prev != before_sizes.end()) original = prev->second;
        }
        r.per_function.push_back({f.name, original, size});
    }

    int64_t cat[6] = {0, 0, 0, 0, 0, 0};
    auto tally = [&](const ir::Program& prog, int64_t sign) {
        for (const ir::Function& f : prog.functions) {
            bool in_trampoline = sign > 0 && has_cfi_sibling.count(f.name) != 0;
            for (const Instruction& in : f.instrs) {
                SizeCategory c = categorize(in, in_trampoline);
                cat[static_cast<int>(c)] += sign * ir::instruction_size(in);
            }
        }
    };
    tally(after, 1);
    tally(before, -1);

    auto clamp = [](int64_t v) { return v > 0 ? static_cast<uint64_t>(v) : 0; };
    r.endbr_bytes = clamp(cat[static_cast<int>(SizeCategory::Endbr)]);
    r.caller_irm_bytes = clamp(cat[static_cast<int>(SizeCategory::Caller)]);
    r.callee_irm_bytes = clamp(cat[static_cast<int>(SizeCategory::Callee)]);
    r.trampoline_bytes = clamp(cat[static_cast<int>(SizeCategory::Trampoline)]);
    r.coldpath_bytes = clamp(cat[static_cast<int>(SizeCategory::Coldpath)]);

    return r;
}

std::string SizeReport::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(24) << "function" << std::right << std::setw(10) << "orig"
       << std::setw(10) << "instr" << std::setw(10) << "delta" << "\n";
    for (const PerFunction& f : per_function) {
        os << std::left << std::setw(24) << f.name << std::right << std::setw(10) << f.original
           << std::setw(10) << f.instrumented << std::setw(10) << (f.instrumented - f.original)
           << "\n";
    }
    os << std::left << std::setw(24) << "total" << std::right << std::setw(10) << original_total
       << std::setw(10) << instrumented_total << std::setw(10) << delta() << "\n";
    os << "\n";
    os << "endbr_bytes      " << endbr_bytes << "\n";
    os << "caller_irm_bytes " << caller_irm_bytes << "\n";
    os << "callee_irm_bytes " << callee_irm_bytes << "\n";
    os << "trampoline_bytes " << trampoline_bytes << "\n";
    os << "coldpath_bytes   " << coldpath_bytes << "\n";
    return os.str();
}

} // namespace fibt::weave
