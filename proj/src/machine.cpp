// SPDX-License-Identifier: Apache-2.0
#include "fibt/machine.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

namespace fibt::machine {

using ir::Instruction;
using ir::Op;
using linkage::Section;
using linkage::SectionItem;
using loader::AddressSpace;
using loader::CodeLoc;
using loader::GotSlot;
using loader::LoadedImage;

const char* trap_name(TrapKind k) {
    switch (k) {
    case TrapKind::EndbrViolation: return "EndbrViolation";
    case TrapKind::SidMismatchHlt: return "SidMismatchHlt";
    case TrapKind::ClangCfiRangeUd2: return "ClangCfiRangeUd2";
    case TrapKind::ShadowStackMismatch: return "ShadowStackMismatch";
    case TrapKind::StepLimitExceeded: return "StepLimitExceeded";
    case TrapKind::ExplicitHalt: return "ExplicitHalt";
    case TrapKind::ChkFailHandler: return "ChkFailHandler";
    }
    return "ExplicitHalt";
}

std::optional<TrapKind> trap_from_name(std::string_view name) {
    for (TrapKind k : {TrapKind::EndbrViolation, TrapKind::SidMismatchHlt,
                       TrapKind::ClangCfiRangeUd2, TrapKind::ShadowStackMismatch,
                       TrapKind::StepLimitExceeded, TrapKind::ExplicitHalt,
                       TrapKind::ChkFailHandler}) {
        if (name == trap_name(k)) return k;
    }
    return std::nullopt;
}

namespace {

constexpr uint64_t kExitSentinel = 0xFFFFFFFFFFFFFF00ull;

uint64_t lo32(uint64_t v) { return v & 0xFFFFFFFFull; }

struct Vm {
    Vm(AddressSpace& s, RunOptions o) : space(s), options(o) {}

    AddressSpace& space;
    RunOptions options;
    Trace trace;

    uint64_t regs[9] = {};
    bool zf{false};
    bool cf{false};
    std::vector<uint64_t> stack;
    std::vector<uint64_t> shadow;
    bool endbr_pending{false};
    CodeLoc pc{};
    bool done{false};

    // armed return-address corruptions: function -> target address
    std::map<std::string, uint64_t> ret_corruptions;

    // owner -> first item offset, per (image, section); lazy cache for traces
    std::map<std::string, uint64_t> owner_starts;

    uint64_t& reg(ir::Reg r) { return regs[static_cast<size_t>(r)]; }

    const LoadedImage& image() const { return space.loaded[pc.image]; }
    const Section& section() const { return *space.loaded[pc.image].image.find_section(pc.section); }
    const SectionItem& item() const { return section().items[pc.item]; }

    uint64_t pc_address() const {
        return space.address_of(pc.image, pc.section, item().offset);
    }

    std::string owner_key(const CodeLoc& loc, const std::string& owner) const {
        return std::to_string(loc.image) + "\x1f" + loc.section + "\x1f" + owner;
    }

    uint64_t owner_start(const CodeLoc& loc, const std::string& owner) {
        auto key = owner_key(loc, owner);
        auto it = owner_starts.find(key);
        if (it != owner_starts.end()) return it->second;
        uint64_t start = 0;
        const Section* sec = space.loaded[loc.image].image.find_section(loc.section);
        for (const SectionItem& si : sec->items) {
            if (si.owner == owner) {
                start = si.offset;
                break;
            }
        }
        owner_starts[key] = start;
        return start;
    }

    std::string location_text() {
        const SectionItem& si = item();
        std::ostringstream os;
        os << image().image.name << ":" << si.owner << "+"
           << (si.offset - owner_start(pc, si.owner));
        return os.str();
    }

    void trap(TrapKind kind, const std::string& detail) {
        TrapEvent ev;
        ev.kind = kind;
        ev.pc = done ? 0 : pc_address();
        ev.current_function = done ? "" : item().owner;
        ev.detail = detail;
        trace.trap = ev;
        trace.completed = false;
        done = true;
    }

    void complete(int exit_code) {
        trace.completed = true;
        trace.exit_code = exit_code;
        done = true;
    }

    void set32(ir::Reg r, uint64_t value) { reg(r) = lo32(value); }

    // ---- control transfers ------------------------------------------------

    void goto_loc(const CodeLoc& loc, bool tracked) {
        pc = loc;
        endbr_pending = tracked;
    }

    void transfer(uint64_t address, bool tracked) {
        if (address == kExitSentinel) {
            complete(0);
            return;
        }
        auto loc = space.decode(address);
        if (!loc) {
            trap(TrapKind::EndbrViolation, "target 0x" + to_hex(address) + " is not an instruction boundary");
            return;
        }
        goto_loc(*loc, tracked);
    }

    static std::string to_hex(uint64_t v) {
        std::ostringstream os;
        os << std::hex << v;
        return os.str();
    }

    // Intra-function label, then image-wide symbol.
    std::optional<CodeLoc> resolve_branch(const std::string& label) {
        const Section& sec = section();
        const std::string& owner = item().owner;
        for (size_t i = 0; i < sec.items.size(); ++i) {
            if (sec.items[i].owner != owner) continue;
            for (const std::string& l : sec.items[i].labels) {
                if (l == label) return CodeLoc{pc.image, pc.section, i};
            }
        }
        const linkage::Image& img = image().image;
        auto sym = img.symbols.find(label);
        if (sym != img.symbols.end()) {
            uint64_t addr = space.address_of(pc.image, sym->second.section, sym->second.offset);
            return space.decode(addr);
        }
        return std::nullopt;
    }

    void push(uint64_t v) { stack.push_back(v); }

    void do_call(uint64_t target, bool tracked) {
        uint64_t ret_addr = return_address();
        push(ret_addr);
        shadow.push_back(ret_addr);
        transfer(target, tracked);
    }

    uint64_t return_address() {
        const Section& sec = section();
        if (pc.item + 1 < sec.items.size()) {
            return space.address_of(pc.image, pc.section, sec.items[pc.item + 1].offset);
        }
        return kExitSentinel;
    }

    void advance() {
        if (pc.item + 1 >= section().items.size()) {
            trap(TrapKind::EndbrViolation, "execution fell off section " + pc.section);
            return;
        }
        ++pc.item;
    }

    // ---- resolver intrinsic ------------------------------------------------

    void run_resolver() {
        if (stack.size() < 2) {
            trap(TrapKind::EndbrViolation, "resolver entered without link-map/reloc words");
            return;
        }
        uint64_t linkmap = stack.back();
        stack.pop_back();
        uint64_t reloc = stack.back();
        stack.pop_back();
        if (linkmap >= space.loaded.size()) {
            trap(TrapKind::EndbrViolation, "bad link-map token");
            return;
        }
        LoadedImage& requester = space.loaded[linkmap];
        bool fineibt = requester.image.plt == linkage::PltFormat::FineIbtPlt;
        if (fineibt && lo32(reg(ir::Reg::rax)) != requester.image.resolver_sid) {
            trap(TrapKind::SidMismatchHlt, "resolver SID check failed");
            return;
        }
        if (reloc >= requester.image.imports.size()) {
            trap(TrapKind::EndbrViolation, "bad relocation index");
            return;
        }
        const linkage::ImportSlot& imp = requester.image.imports[reloc];
        GotSlot& slot = requester.got[imp.got_slot];

        if (imp.symbol == weave::kChkFailSymbol) {
            slot.state = GotSlot::State::Intrinsic;
            slot.target_symbol = imp.symbol;
            trap(TrapKind::ChkFailHandler, "SID-check failure handler invoked (lazy)");
            return;
        }

        std::optional<uint64_t> addr;
        std::string target_image;
        for (size_t i = 0; i < space.loaded.size(); ++i) {
            const linkage::Image& img = space.loaded[i].image;
            auto it = img.exports.find(imp.symbol);
            if (it != img.exports.end() && !it->second.is_entry_alias) {
                addr = space.address_of(i, it->second.section, it->second.offset);
                target_image = img.name;
                break;
            }
        }
        if (!addr) {
            throw Error(Errc::UnresolvedImport, "lazy resolution of '" + imp.symbol + "' failed");
        }
        slot.state = GotSlot::State::Resolved;
        slot.target_image = target_image;
        slot.target_symbol = imp.symbol;
        slot.entry_alias = false;
        slot.address = *addr;

        if (fineibt) {
            // Hand the preserved upper half back as the callee's SID.
            auto target_loc = space.decode(*addr);
            ir::Reg sid_reg = target_loc ? space.loaded[target_loc->image].image.sid_reg
                                         : requester.image.sid_reg;
            set32(sid_reg, reg(ir::Reg::rax) >> 32);
        }
        transfer(*addr, /*tracked=*/true);
    }

    // ---- single step -------------------------------------------------------

    void record(const SectionItem& si) {
        if (trace.steps.size() < options.max_recorded_steps) {
            TraceStep step;
            step.step = trace.total_steps;
            step.pc = pc_address();
            step.location = location_text();
            step.instr_text = ir::print_instruction(si.instr);
            trace.steps.push_back(std::move(step));
        }
    }

    bool ibt_enforced_here() const {
        weave::IrmVariant irm = image().image.irm;
        return irm == weave::IrmVariant::IbtOnly || irm == weave::IrmVariant::FineIbtBasic ||
               irm == weave::IrmVariant::FineIbtColdpath;
    }

    void step() {
        if (trace.total_steps >= options.step_limit) {
            trap(TrapKind::StepLimitExceeded, "step limit " + std::to_string(options.step_limit));
            return;
        }
        ++trace.total_steps;

        const SectionItem& si = item();
        record(si);
        const Instruction& in = si.instr;

        if (endbr_pending) {
            if (in.op != Op::Endbr64 && ibt_enforced_here()) {
                trap(TrapKind::EndbrViolation,
                     "indirect transfer landed on " + ir::print_instruction(in));
                return;
            }
            endbr_pending = false;
        }

        switch (in.op) {
        case Op::Endbr64:
        case Op::Nop:
            advance();
            break;
        case Op::MovImm:
            set32(in.reg, in.imm);
            advance();
            break;
        case Op::SubImm: {
            uint64_t v = lo32(reg(in.reg));
            cf = v < in.imm;
            uint64_t res = lo32(v - in.imm);
            zf = res == 0;
            reg(in.reg) = res;
            advance();
            break;
        }
        case Op::CmpImm: {
            uint64_t v = in.width == ir::Width::W64 ? reg(in.reg) : lo32(reg(in.reg));
            uint64_t imm = in.width == ir::Width::W64 ? in.imm : lo32(in.imm);
            cf = v < imm;
            zf = v == imm;
            advance();
            break;
        }
        case Op::XorImm: {
            uint64_t res = lo32(reg(in.reg)) ^ lo32(in.imm);
            zf = res == 0;
            cf = false;
            reg(in.reg) = res;
            advance();
            break;
        }
        case Op::Shl:
            reg(in.reg) <<= (in.imm & 63);
            advance();
            break;
        case Op::Or64Imm:
            reg(in.reg) |= in.imm;
            advance();
            break;
        case Op::Rol: {
            unsigned amount = static_cast<unsigned>(in.imm & 63);
            uint64_t v = reg(in.reg);
            reg(in.reg) = amount == 0 ? v : (v << amount) | (v >> (64 - amount));
            advance();
            break;
        }
        case Op::MovReg:
            reg(in.reg) = reg(in.reg2);
            advance();
            break;
        case Op::SubReg: {
            uint64_t a = reg(in.reg), b = reg(in.reg2);
            cf = a < b;
            reg(in.reg) = a - b;
            zf = reg(in.reg) == 0;
            advance();
            break;
        }
        case Op::CondBranch: {
            bool taken = in.cond == ir::Cond::Eq ? zf : in.cond == ir::Cond::Ne ? !zf : !cf;
            if (!taken) {
                advance();
                break;
            }
            auto loc = resolve_branch(in.sym);
            if (!loc) {
                trap(TrapKind::EndbrViolation, "branch target '" + in.sym + "' unresolved");
                break;
            }
            goto_loc(*loc, false);
            break;
        }
        case Op::Jmp: {
            auto loc = resolve_branch(in.sym);
            if (!loc) {
                trap(TrapKind::EndbrViolation, "jmp target '" + in.sym + "' unresolved");
                break;
            }
            goto_loc(*loc, false);
            break;
        }
        case Op::Hlt:
            trap(TrapKind::SidMismatchHlt, "hlt reached");
            break;
        case Op::Ud2:
            trap(TrapKind::ClangCfiRangeUd2, "ud2 reached");
            break;
        case Op::Int3:
            trap(TrapKind::ClangCfiRangeUd2, "int3 trampoline pad reached");
            break;
        case Op::DirectCall: {
            if (in.sym == weave::kChkFailSymbol) {
                trap(TrapKind::ChkFailHandler, "SID-check failure handler invoked");
                break;
            }
            auto loc = resolve_branch(in.sym);
            if (!loc) {
                trap(TrapKind::EndbrViolation, "call target '" + in.sym + "' unresolved");
                break;
            }
            uint64_t target =
                space.address_of(loc->image,
                                 loc->section,
                                 space.loaded[loc->image].image.find_section(loc->section)
                                     ->items[loc->item]
                                     .offset);
            do_call(target, /*tracked=*/false);
            break;
        }
        case Op::IndirectCall:
            do_call(reg(in.reg), !in.notrack);
            break;
        case Op::IndirectJmpReg:
            transfer(reg(in.reg), !in.notrack);
            break;
        case Op::IndirectJmpGot: {
            if (in.sym == linkage::kResolverSymbol) {
                run_resolver();
                break;
            }
            LoadedImage& li = space.loaded[pc.image];
            const linkage::ImportSlot* imp = li.image.find_import(in.sym);
            if (!imp) {
                trap(TrapKind::EndbrViolation, "'" + in.sym + "' has no GOT slot");
                break;
            }
            GotSlot& slot = li.got[imp->got_slot];
            switch (slot.state) {
            case GotSlot::State::Resolved:
                transfer(slot.address, !in.notrack);
                break;
            case GotSlot::State::Intrinsic:
                trap(TrapKind::ChkFailHandler, "SID-check failure handler invoked");
                break;
            case GotSlot::State::Unresolved: {
                auto plt = li.image.symbols.find("PLT" + std::to_string(imp->fplt_index));
                if (plt == li.image.symbols.end()) {
                    trap(TrapKind::EndbrViolation, "lazy jump without a .plt entry");
                    break;
                }
                uint64_t addr =
                    space.address_of(pc.image, plt->second.section, plt->second.offset);
                transfer(addr, !in.notrack);
                break;
            }
            default:
                trap(TrapKind::EndbrViolation, "jump through reserved GOT slot");
                break;
            }
            break;
        }
        case Op::LoadFnAddr: {
            const linkage::Image& img = image().image;
            auto sym = img.symbols.find(in.sym);
            if (sym == img.symbols.end()) {
                trap(TrapKind::EndbrViolation, "address of unknown symbol '" + in.sym + "'");
                break;
            }
            set32(in.reg, space.address_of(pc.image, sym->second.section, sym->second.offset));
            advance();
            break;
        }
        case Op::LoadData: {
            LoadedImage& li = space.loaded[pc.image];
            auto values = li.data_values.find(in.sym);
            if (values == li.data_values.end()) {
                trap(TrapKind::EndbrViolation, "unknown data object '" + in.sym + "'");
                break;
            }
            uint64_t index = in.has_reg2 ? reg(in.reg2) : 0;
            if (index >= values->second.size()) {
                trap(TrapKind::EndbrViolation, "out-of-bounds load from '" + in.sym + "'");
                break;
            }
            reg(in.reg) = values->second[index];
            advance();
            break;
        }
        case Op::StoreData: {
            LoadedImage& li = space.loaded[pc.image];
            const ir::DataObject* obj = nullptr;
            for (const ir::DataObject& d : li.image.data_objects) {
                if (d.name == in.sym) obj = &d;
            }
            auto values = li.data_values.find(in.sym);
            if (!obj || values == li.data_values.end()) {
                trap(TrapKind::EndbrViolation, "unknown data object '" + in.sym + "'");
                break;
            }
            if (!obj->writable) {
                trap(TrapKind::EndbrViolation, "store to read-only object '" + in.sym + "'");
                break;
            }
            if (values->second.empty()) values->second.resize(1, 0);
            values->second[0] = reg(in.reg);
            advance();
            break;
        }
        case Op::PushImm:
            push(in.imm);
            advance();
            break;
        case Op::PushGotSlot: {
            LoadedImage& li = space.loaded[pc.image];
            if (in.imm >= li.got.size()) {
                trap(TrapKind::EndbrViolation, "push of missing GOT slot");
                break;
            }
            push(li.got[in.imm].address);
            advance();
            break;
        }
        case Op::Ret: {
            if (stack.empty()) {
                trap(TrapKind::EndbrViolation, "ret on empty stack");
                break;
            }
            uint64_t v = stack.back();
            stack.pop_back();
            auto armed = ret_corruptions.find(item().owner);
            if (armed != ret_corruptions.end()) {
                v = armed->second;
                ret_corruptions.erase(armed);
            }
            if (options.shadow_stack) {
                if (shadow.empty()) {
                    trap(TrapKind::ShadowStackMismatch, "shadow stack underflow");
                    break;
                }
                uint64_t s = shadow.back();
                shadow.pop_back();
                if (s != v) {
                    trap(TrapKind::ShadowStackMismatch,
                         "return address 0x" + to_hex(v) + " != shadow 0x" + to_hex(s));
                    break;
                }
            } else if (!shadow.empty()) {
                shadow.pop_back();
            }
            transfer(v, /*tracked=*/false);
            break;
        }
        case Op::SwitchJmp: {
            LoadedImage& li = space.loaded[pc.image];
            auto values = li.data_values.find(in.sym);
            if (values == li.data_values.end()) {
                trap(TrapKind::EndbrViolation, "unknown jump table '" + in.sym + "'");
                break;
            }
            uint64_t index = reg(in.reg2);
            if (index >= values->second.size()) {
                trap(TrapKind::EndbrViolation, "switch index out of bounds");
                break;
            }
            transfer(values->second[index], !in.notrack);
            break;
        }
        case Op::Halt:
            complete(static_cast<int>(in.imm));
            break;
        }
    }
};

} // namespace

namespace {

Trace run_with_arming(AddressSpace& space, const std::string& entry, RunOptions options,
                      const std::map<std::string, uint64_t>& ret_corruptions) {
    // Program startup is a direct transfer: enter through the *_entry alias
    // when the entry function carries an IRM prologue.
    auto addr = space.symbol_address(entry + "_entry", /*exports_only=*/false);
    if (!addr) addr = space.symbol_address(entry, /*exports_only=*/false);
    if (!addr) throw Error(Errc::UnknownSymbol, "entry '" + entry + "' not found");
    Vm vm(space, options);
    vm.ret_corruptions = ret_corruptions;
    vm.stack.push_back(kExitSentinel);
    vm.shadow.push_back(kExitSentinel);
    auto loc = space.decode(*addr);
    if (!loc) throw Error(Errc::UnknownSymbol, "entry '" + entry + "' is not executable");
    vm.pc = *loc;
    while (!vm.done) vm.step();
    return std::move(vm.trace);
}

} // namespace

Trace run(AddressSpace& space, const std::string& entry, RunOptions options) {
    return run_with_arming(space, entry, options, {});
}

std::string Trace::to_text() const {
    std::ostringstream os;
    for (const TraceStep& s : steps) {
        os << s.step << " 0x" << std::hex << s.pc << std::dec << " " << s.location << " "
           << s.instr_text << "\n";
    }
    if (steps.size() < total_steps) {
        os << "... (" << (total_steps - steps.size()) << " steps elided)\n";
    }
    if (completed) {
        os << "-- exit " << exit_code << "\n";
    } else if (trap) {
        os << "-- trap " << trap_name(trap->kind) << " @ 0x" << std::hex << trap->pc << std::dec
           << " in " << trap->current_function << ": " << trap->detail << "\n";
    }
    return os.str();
}

uint64_t resolve_target(const AddressSpace& space, const std::string& spec) {
    if (spec.rfind("0x", 0) == 0 || spec.rfind("0X", 0) == 0) {
        return std::stoull(spec, nullptr, 16);
    }
    if (!spec.empty() && std::isdigit(static_cast<unsigned char>(spec[0]))) {
        return std::stoull(spec);
    }
    std::string symbol = spec;
    uint64_t offset = 0;
    size_t plus = spec.find('+');
    if (plus != std::string::npos) {
        symbol = spec.substr(0, plus);
        offset = std::stoull(spec.substr(plus + 1), nullptr, 0);
    }
    auto addr = space.symbol_address(symbol, /*exports_only=*/false);
    if (!addr) throw Error(Errc::UnknownSymbol, "mutation target '" + symbol + "' not found");
    return *addr + offset;
}

Scenario Scenario::from_json(const nlohmann::ordered_json& j, const ImageLoader& load_image) {
    Scenario s;
    s.name = j.at("name").get<std::string>();
    s.entry = j.at("entry").get<std::string>();
    s.shadow_stack = j.value("shadow_stack", false);

    if (j.contains("mutations")) {
        for (const auto& jm : j.at("mutations")) {
            Mutation m;
            std::string kind = jm.at("kind").get<std::string>();
            if (kind == "set_fnptr") {
                m.kind = Mutation::Kind::SetFnptr;
                m.object = jm.at("object").get<std::string>();
                m.index = jm.value("index", 0);
                m.target = jm.at("target").get<std::string>();
                m.image = jm.value("image", std::string());
            } else if (kind == "corrupt_got") {
                m.kind = Mutation::Kind::CorruptGot;
                m.image = jm.at("image").get<std::string>();
                m.symbol = jm.at("symbol").get<std::string>();
                m.target = jm.at("target").get<std::string>();
            } else if (kind == "corrupt_return") {
                m.kind = Mutation::Kind::CorruptReturn;
                m.function = jm.at("function").get<std::string>();
                m.target = jm.at("target").get<std::string>();
            } else if (kind == "dlopen") {
                m.kind = Mutation::Kind::Dlopen;
                if (!load_image) {
                    throw Error(Errc::BadConfig, "scenario needs an image loader for dlopen");
                }
                m.dl_image = load_image(jm.at("image").get<std::string>());
            } else if (kind == "dlsym_store") {
                m.kind = Mutation::Kind::DlsymStore;
                m.symbol = jm.at("symbol").get<std::string>();
                m.object = jm.at("object").get<std::string>();
                m.index = jm.value("index", 0);
            } else {
                throw Error(Errc::BadConfig, "unknown mutation kind '" + kind + "'");
            }
            s.mutations.push_back(std::move(m));
        }
    }

    const auto& je = j.at("expected");
    if (je.contains("completes")) {
        s.expected.kind = Expected::Kind::Completes;
        s.expected.exit_code = je.at("completes").get<int>();
    } else if (je.contains("traps")) {
        s.expected.kind = Expected::Kind::Traps;
        auto kind = trap_from_name(je.at("traps").get<std::string>());
        if (!kind) throw Error(Errc::BadConfig, "unknown trap kind in scenario");
        s.expected.kind = Expected::Kind::Traps;
        s.expected.trap = *kind;
    } else if (je.contains("illegal_mutation")) {
        s.expected.kind = Expected::Kind::IllegalMutation;
    } else {
        throw Error(Errc::BadConfig, "scenario expects one of completes/traps/illegal_mutation");
    }
    return s;
}

ScenarioResult run_scenario(AddressSpace space, const Scenario& s,
                            std::optional<uint64_t> step_limit) {
    ScenarioResult result;
    switch (s.expected.kind) {
    case Expected::Kind::Completes:
        result.expected = "completes " + std::to_string(s.expected.exit_code);
        break;
    case Expected::Kind::Traps:
        result.expected = std::string("traps ") + trap_name(s.expected.trap);
        break;
    case Expected::Kind::IllegalMutation:
        result.expected = "illegal_mutation";
        break;
    }

    std::map<std::string, uint64_t> ret_corruptions;
    for (const Mutation& m : s.mutations) {
        switch (m.kind) {
        case Mutation::Kind::SetFnptr: {
            LoadedImage* owner = nullptr;
            for (LoadedImage& li : space.loaded) {
                if (!m.image.empty() && li.image.name != m.image) continue;
                if (li.data_values.count(m.object)) {
                    owner = &li;
                    break;
                }
            }
            if (!owner) {
                throw Error(Errc::UnknownSymbol, "mutation object '" + m.object + "' not found");
            }
            const ir::DataObject* obj = nullptr;
            for (const ir::DataObject& d : owner->image.data_objects) {
                if (d.name == m.object) obj = &d;
            }
            if (!obj || !obj->writable) {
                result.outcome = "illegal_mutation";
                result.passed = s.expected.kind == Expected::Kind::IllegalMutation;
                return result;
            }
            auto& values = owner->data_values.at(m.object);
            if (m.index >= values.size()) values.resize(m.index + 1, 0);
            values[m.index] = resolve_target(space, m.target);
            break;
        }
        case Mutation::Kind::CorruptGot: {
            LoadedImage* li = space.find_image(m.image);
            if (!li) throw Error(Errc::UnknownSymbol, "image '" + m.image + "' not loaded");
            if (!li->got_writable) {
                result.outcome = "illegal_mutation";
                result.passed = s.expected.kind == Expected::Kind::IllegalMutation;
                return result;
            }
            const linkage::ImportSlot* imp = li->image.find_import(m.symbol);
            if (!imp) throw Error(Errc::UnknownSymbol, "'" + m.symbol + "' is not an import");
            GotSlot& slot = li->got[imp->got_slot];
            slot.state = GotSlot::State::Resolved;
            slot.target_image = "(corrupted)";
            slot.target_symbol = m.target;
            slot.entry_alias = false;
            slot.address = resolve_target(space, m.target);
            break;
        }
        case Mutation::Kind::CorruptReturn:
            ret_corruptions[m.function] = resolve_target(space, m.target);
            break;
        case Mutation::Kind::Dlopen:
            loader::dlopen_image(space, m.dl_image);
            break;
        case Mutation::Kind::DlsymStore: {
            uint64_t addr = loader::dlsym_address(space, m.symbol);
            LoadedImage* owner = nullptr;
            for (LoadedImage& li : space.loaded) {
                if (li.data_values.count(m.object)) {
                    owner = &li;
                    break;
                }
            }
            if (!owner) {
                throw Error(Errc::UnknownSymbol, "mutation object '" + m.object + "' not found");
            }
            auto& values = owner->data_values.at(m.object);
            if (m.index >= values.size()) values.resize(m.index + 1, 0);
            values[m.index] = addr;
            break;
        }
        }
    }

    RunOptions options;
    options.shadow_stack = s.shadow_stack;
    if (step_limit) options.step_limit = *step_limit;
    result.trace = run_with_arming(space, s.entry, options, ret_corruptions);

    if (result.trace.completed) {
        result.outcome = "completes " + std::to_string(result.trace.exit_code);
        result.passed = s.expected.kind == Expected::Kind::Completes &&
                        result.trace.exit_code == s.expected.exit_code;
    } else if (result.trace.trap) {
        result.outcome = std::string("traps ") + trap_name(result.trace.trap->kind);
        result.passed =
            s.expected.kind == Expected::Kind::Traps && result.trace.trap->kind == s.expected.trap;
    }
    return result;
}

TraceDiff trace_diff(const Trace& a, const Trace& b, bool label_insensitive) {
    TraceDiff diff;
    std::ostringstream os;

    auto step_key = [&](const TraceStep& s) -> std::string {
        if (!label_insensitive) return s.instr_text;
        ir::Instruction in = ir::parse_instruction_text(s.instr_text);
        in.sym.clear();
        return ir::print_instruction(in);
    };

    size_t n = std::min(a.steps.size(), b.steps.size());
    for (size_t i = 0; i < n; ++i) {
        std::string ka = step_key(a.steps[i]);
        std::string kb = step_key(b.steps[i]);
        if (ka != kb) {
            os << "step " << i << ": '" << ka << "' vs '" << kb << "'\n";
            diff.empty = false;
        }
    }
    if (a.steps.size() != b.steps.size()) {
        os << "lengths differ: " << a.steps.size() << " vs " << b.steps.size() << "\n";
        diff.empty = false;
    }
    if (a.completed != b.completed || a.exit_code != b.exit_code) {
        os << "outcomes differ: " << (a.completed ? "exit" : "trap") << " "
           << a.exit_code << " vs " << (b.completed ? "exit" : "trap") << " " << b.exit_code
           << "\n";
        diff.empty = false;
    }
    if (a.trap.has_value() != b.trap.has_value() ||
        (a.trap && b.trap && a.trap->kind != b.trap->kind)) {
        os << "trap kinds differ\n";
        diff.empty = false;
    }

    diff.text = os.str();
    return diff;
}

} // namespace fibt::machine
