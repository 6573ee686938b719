// SPDX-License-Identifier: Apache-2.0
#include "fibt/ir.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <sstream>

namespace fibt {

const char* errc_name(Errc c) {
    switch (c) {
    case Errc::SyntaxError: return "SyntaxError";
    case Errc::UndefinedSymbol: return "UndefinedSymbol";
    case Errc::DuplicateLabel: return "DuplicateLabel";
    case Errc::DuplicateSymbol: return "DuplicateSymbol";
    case Errc::UncoveredCallsite: return "UncoveredCallsite";
    case Errc::UnknownSymbol: return "UnknownSymbol";
    case Errc::MissingSid: return "MissingSid";
    case Errc::SidNotEncodable: return "SidNotEncodable";
    case Errc::RelroRequired: return "RelroRequired";
    case Errc::UnresolvedImport: return "UnresolvedImport";
    case Errc::TamperDetected: return "TamperDetected";
    case Errc::IllegalMutation: return "IllegalMutation";
    case Errc::SlotOverflow: return "SlotOverflow";
    case Errc::AmbiguousCallsite: return "AmbiguousCallsite";
    case Errc::BadConfig: return "BadConfig";
    case Errc::Io: return "Io";
    }
    return "Error";
}

std::string Error::format(Errc code, const std::string& message, int line, int column) {
    std::ostringstream os;
    os << errc_name(code);
    if (line > 0) {
        os << " at " << line << ":" << column;
    }
    os << ": " << message;
    return os.str();
}

} // namespace fibt

namespace fibt::ir {

namespace {

constexpr const char* kNames64[] = {"rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r10", "r11", "r12"};
constexpr const char* kNames32[] = {"eax", "ebx", "ecx", "edx", "esi", "edi", "r10d", "r11d", "r12d"};

std::string hex(uint64_t v) {
    std::ostringstream os;
    os << "0x" << std::hex << v;
    return os.str();
}

} // namespace

const char* reg_name64(Reg r) { return kNames64[static_cast<size_t>(r)]; }
const char* reg_name32(Reg r) { return kNames32[static_cast<size_t>(r)]; }

std::optional<Reg> reg_from_name(std::string_view name) {
    for (size_t i = 0; i < std::size(kNames64); ++i) {
        if (name == kNames64[i] || name == kNames32[i]) {
            return static_cast<Reg>(i);
        }
    }
    return std::nullopt;
}

bool reg_needs_rex(Reg r) { return r == Reg::r10 || r == Reg::r11 || r == Reg::r12; }

// ---------------------------------------------------------------------------
// Types and signatures

TypeTag TypeTag::void_() { return TypeTag{}; }
TypeTag TypeTag::int32() { TypeTag t; t.kind = Kind::Int32; return t; }
TypeTag TypeTag::int64() { TypeTag t; t.kind = Kind::Int64; return t; }
TypeTag TypeTag::ptr(TypeTag inner) {
    TypeTag t;
    t.kind = Kind::Ptr;
    t.pointee = std::make_shared<TypeTag>(std::move(inner));
    return t;
}
TypeTag TypeTag::fnptr(Signature sig) {
    TypeTag t;
    t.kind = Kind::FnPtr;
    t.fn = std::make_shared<Signature>(std::move(sig));
    return t;
}
TypeTag TypeTag::struct_(std::string name) {
    TypeTag t;
    t.kind = Kind::Struct;
    t.struct_name = std::move(name);
    return t;
}

bool TypeTag::operator==(const TypeTag& other) const {
    if (kind != other.kind) return false;
    switch (kind) {
    case Kind::Ptr: return *pointee == *other.pointee;
    case Kind::FnPtr: return *fn == *other.fn;
    case Kind::Struct: return struct_name == other.struct_name;
    default: return true;
    }
}

bool Signature::operator==(const Signature& other) const {
    return variadic == other.variadic && return_type == other.return_type && params == other.params;
}

namespace {

std::string type_to_string(const TypeTag& t) {
    switch (t.kind) {
    case TypeTag::Kind::Void: return "void";
    case TypeTag::Kind::Int32: return "int32";
    case TypeTag::Kind::Int64: return "int64";
    case TypeTag::Kind::Ptr: return "ptr(" + type_to_string(*t.pointee) + ")";
    case TypeTag::Kind::FnPtr: return "fnptr(" + signature_to_string(*t.fn) + ")";
    case TypeTag::Kind::Struct: return "struct(" + t.struct_name + ")";
    }
    return "void";
}

// Recursive-descent cursor over a signature string.
struct TypeCursor {
    std::string_view text;
    size_t pos{0};

    [[noreturn]] void fail(const std::string& what) const {
        throw Error(Errc::SyntaxError, "bad signature near '" + std::string(text.substr(pos)) + "': " + what);
    }
    char peek() const { return pos < text.size() ? text[pos] : '\0'; }
    bool eat(char c) {
        if (peek() == c) { ++pos; return true; }
        return false;
    }
    void expect(char c) {
        if (!eat(c)) fail(std::string("expected '") + c + "'");
    }
    bool eat_word(std::string_view w) {
        if (text.substr(pos, w.size()) == w) { pos += w.size(); return true; }
        return false;
    }
    std::string ident() {
        size_t start = pos;
        while (pos < text.size() && (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_')) ++pos;
        if (pos == start) fail("expected identifier");
        return std::string(text.substr(start, pos - start));
    }

    TypeTag type() {
        if (eat_word("void")) return TypeTag::void_();
        if (eat_word("int32")) return TypeTag::int32();
        if (eat_word("int64")) return TypeTag::int64();
        if (eat_word("ptr(")) {
            TypeTag inner = type();
            expect(')');
            return TypeTag::ptr(std::move(inner));
        }
        if (eat_word("fnptr(")) {
            Signature s = signature();
            expect(')');
            return TypeTag::fnptr(std::move(s));
        }
        if (eat_word("struct(")) {
            std::string name = ident();
            expect(')');
            return TypeTag::struct_(std::move(name));
        }
        fail("unknown type tag");
    }

    Signature signature() {
        Signature s;
        if (!eat_word("sig(")) fail("expected 'sig('");
        if (!eat(')')) {
            for (;;) {
                if (eat_word("...")) {
                    s.variadic = true;
                    break;
                }
                s.params.push_back(type());
                if (!eat(',')) break;
            }
            expect(')');
        }
        if (!eat_word("->")) fail("expected '->'");
        s.return_type = type();
        return s;
    }
};

} // namespace

std::string signature_to_string(const Signature& sig) {
    std::string out = "sig(";
    for (size_t i = 0; i < sig.params.size(); ++i) {
        if (i) out += ",";
        out += type_to_string(sig.params[i]);
    }
    if (sig.variadic) {
        if (!sig.params.empty()) out += ",";
        out += "...";
    }
    out += ")->" + type_to_string(sig.return_type);
    return out;
}

Signature parse_signature(std::string_view text) {
    TypeCursor c{text};
    Signature s = c.signature();
    if (c.pos != text.size()) c.fail("trailing characters");
    return s;
}

// ---------------------------------------------------------------------------
// Instruction factories

namespace ins {

Instruction endbr64() { Instruction i; i.op = Op::Endbr64; return i; }
Instruction mov_imm(Reg r, uint32_t imm) { Instruction i; i.op = Op::MovImm; i.reg = r; i.imm = imm; return i; }
Instruction sub_imm(Reg r, uint32_t imm) { Instruction i; i.op = Op::SubImm; i.reg = r; i.imm = imm; return i; }
Instruction cmp_imm(Reg r, uint64_t imm, Width w) { Instruction i; i.op = Op::CmpImm; i.reg = r; i.imm = imm; i.width = w; return i; }
Instruction xor_imm(Reg r, uint32_t imm) { Instruction i; i.op = Op::XorImm; i.reg = r; i.imm = imm; return i; }
Instruction shl(Reg r, uint8_t amount) { Instruction i; i.op = Op::Shl; i.reg = r; i.imm = amount; return i; }
Instruction or64_imm(Reg r, uint64_t imm) { Instruction i; i.op = Op::Or64Imm; i.reg = r; i.imm = imm; return i; }
Instruction cond_branch(Cond c, std::string label) { Instruction i; i.op = Op::CondBranch; i.cond = c; i.sym = std::move(label); return i; }
Instruction jmp(std::string target) { Instruction i; i.op = Op::Jmp; i.sym = std::move(target); return i; }
Instruction rol(Reg r, uint8_t amount) { Instruction i; i.op = Op::Rol; i.reg = r; i.imm = amount; return i; }
Instruction hlt() { Instruction i; i.op = Op::Hlt; return i; }
Instruction ud2() { Instruction i; i.op = Op::Ud2; return i; }
Instruction int3() { Instruction i; i.op = Op::Int3; return i; }
Instruction nop(uint8_t width) { Instruction i; i.op = Op::Nop; i.imm = width; return i; }
Instruction direct_call(std::string sym) { Instruction i; i.op = Op::DirectCall; i.sym = std::move(sym); return i; }
Instruction indirect_call(Reg r, bool notrack) { Instruction i; i.op = Op::IndirectCall; i.reg = r; i.notrack = notrack; return i; }
Instruction indirect_jmp_reg(Reg r, bool notrack) { Instruction i; i.op = Op::IndirectJmpReg; i.reg = r; i.notrack = notrack; return i; }
Instruction indirect_jmp_got(std::string sym, bool notrack) { Instruction i; i.op = Op::IndirectJmpGot; i.sym = std::move(sym); i.notrack = notrack; return i; }
Instruction load_fn_addr(Reg r, std::string sym) { Instruction i; i.op = Op::LoadFnAddr; i.reg = r; i.sym = std::move(sym); return i; }
Instruction load_data(Reg r, std::string obj) { Instruction i; i.op = Op::LoadData; i.reg = r; i.sym = std::move(obj); return i; }
Instruction load_data_indexed(Reg r, std::string obj, Reg index) {
    Instruction i;
    i.op = Op::LoadData;
    i.reg = r;
    i.sym = std::move(obj);
    i.reg2 = index;
    i.has_reg2 = true;
    return i;
}
Instruction store_data(std::string obj, Reg r) { Instruction i; i.op = Op::StoreData; i.reg = r; i.sym = std::move(obj); return i; }
Instruction mov_reg(Reg dst, Reg src) { Instruction i; i.op = Op::MovReg; i.reg = dst; i.reg2 = src; i.has_reg2 = true; return i; }
Instruction sub_reg(Reg dst, Reg src) { Instruction i; i.op = Op::SubReg; i.reg = dst; i.reg2 = src; i.has_reg2 = true; return i; }
Instruction push_imm(uint32_t imm) { Instruction i; i.op = Op::PushImm; i.imm = imm; return i; }
Instruction push_got_slot(uint32_t slot) { Instruction i; i.op = Op::PushGotSlot; i.imm = slot; return i; }
Instruction ret() { Instruction i; i.op = Op::Ret; return i; }
Instruction switch_jmp(std::string table, Reg index, bool notrack) {
    Instruction i;
    i.op = Op::SwitchJmp;
    i.sym = std::move(table);
    i.reg2 = index;
    i.has_reg2 = true;
    i.notrack = notrack;
    return i;
}
Instruction halt(uint32_t exit_code) { Instruction i; i.op = Op::Halt; i.imm = exit_code; return i; }

} // namespace ins

// ---------------------------------------------------------------------------
// Size model. Constants follow the published table in docs/grammar.md; the
// SID-check arithmetic (5/8/12 bytes) is load-bearing for the size reports.

int instruction_size(const Instruction& i) {
    switch (i.op) {
    case Op::Endbr64: return 4;
    case Op::MovImm: return 5;
    case Op::SubImm: return 5;
    case Op::CmpImm:
        if (i.width == Width::W64) return i.imm < 128 ? 4 : 7;
        return i.imm < 128 ? 3 : 5;
    case Op::XorImm: return 5;
    case Op::Shl: return 4;
    case Op::Or64Imm: return 6;
    case Op::CondBranch: return 2;
    case Op::Jmp: return 5;
    case Op::Rol: return 4;
    case Op::Hlt: return 1;
    case Op::Ud2: return 2;
    case Op::Int3: return 1;
    case Op::Nop: return static_cast<int>(i.imm);
    case Op::DirectCall: return 5;
    case Op::IndirectCall:
    case Op::IndirectJmpReg:
        return 2 + (reg_needs_rex(i.reg) ? 1 : 0) + (i.notrack ? 1 : 0);
    case Op::IndirectJmpGot: return 6 + (i.notrack ? 1 : 0);
    case Op::LoadFnAddr: return 5;
    case Op::LoadData: return i.has_reg2 ? 8 : 7;
    case Op::StoreData: return 7;
    case Op::MovReg: return 3;
    case Op::SubReg: return 3;
    case Op::PushImm: return i.imm < 128 ? 2 : 5;
    case Op::PushGotSlot: return 6;
    case Op::Ret: return 1;
    case Op::SwitchJmp: return 7 + (i.notrack ? 1 : 0);
    case Op::Halt: return 1;
    }
    return 1;
}

uint64_t body_size(const Function& f) {
    uint64_t total = 0;
    for (const Instruction& i : f.instrs) total += static_cast<uint64_t>(instruction_size(i));
    return total;
}

// ---------------------------------------------------------------------------
// Printing

namespace {

const char* cond_mnemonic(Cond c) {
    switch (c) {
    case Cond::Eq: return "je";
    case Cond::Ne: return "jne";
    case Cond::Ae: return "jae";
    }
    return "je";
}

} // namespace

std::string print_instruction(const Instruction& i) {
    std::ostringstream os;
    switch (i.op) {
    case Op::Endbr64: os << "endbr64"; break;
    case Op::MovImm: os << "mov $" << hex(i.imm) << ", %" << reg_name32(i.reg); break;
    case Op::SubImm: os << "sub $" << hex(i.imm) << ", %" << reg_name32(i.reg); break;
    case Op::CmpImm:
        os << "cmp $" << hex(i.imm) << ", %"
           << (i.width == Width::W64 ? reg_name64(i.reg) : reg_name32(i.reg));
        break;
    case Op::XorImm: os << "xor $" << hex(i.imm) << ", %" << reg_name32(i.reg); break;
    case Op::Shl: os << "shl $" << hex(i.imm) << ", %" << reg_name64(i.reg); break;
    case Op::Or64Imm: os << "or $" << hex(i.imm) << ", %" << reg_name64(i.reg); break;
    case Op::CondBranch: os << cond_mnemonic(i.cond) << " " << i.sym; break;
    case Op::Jmp: os << "jmp " << i.sym; break;
    case Op::Rol: os << "rol $" << hex(i.imm) << ", %" << reg_name64(i.reg); break;
    case Op::Hlt: os << "hlt"; break;
    case Op::Ud2: os << "ud2"; break;
    case Op::Int3: os << "int3"; break;
    case Op::Nop:
        os << "nop";
        if (i.imm != 1) os << i.imm;
        break;
    case Op::DirectCall: os << "call " << i.sym; break;
    case Op::IndirectCall:
        if (i.notrack) os << "notrack ";
        os << "call *%" << reg_name64(i.reg);
        break;
    case Op::IndirectJmpReg:
        if (i.notrack) os << "notrack ";
        os << "jmp *%" << reg_name64(i.reg);
        break;
    case Op::IndirectJmpGot:
        if (i.notrack) os << "notrack ";
        if (i.sym == kResolverSymbol) {
            os << "jmp *GOT+16(%rip)";
        } else {
            os << "jmp *" << i.sym << "@GOT(%rip)";
        }
        break;
    case Op::LoadFnAddr: os << "mov $" << i.sym << ", %" << reg_name32(i.reg); break;
    case Op::LoadData:
        if (i.has_reg2) {
            os << "mov " << i.sym << "(,%" << reg_name64(i.reg2) << ",8), %" << reg_name64(i.reg);
        } else {
            os << "mov " << i.sym << "(%rip), %" << reg_name64(i.reg);
        }
        break;
    case Op::StoreData: os << "mov %" << reg_name64(i.reg) << ", " << i.sym << "(%rip)"; break;
    case Op::MovReg: os << "mov %" << reg_name64(i.reg2) << ", %" << reg_name64(i.reg); break;
    case Op::SubReg: os << "sub %" << reg_name64(i.reg2) << ", %" << reg_name64(i.reg); break;
    case Op::PushImm: os << "pushq $" << hex(i.imm); break;
    case Op::PushGotSlot: os << "pushq GOT+" << (8 * i.imm) << "(%rip)"; break;
    case Op::Ret: os << "ret"; break;
    case Op::SwitchJmp:
        if (i.notrack) os << "notrack ";
        os << "jmp *" << i.sym << "(,%" << reg_name64(i.reg2) << ",8)";
        break;
    case Op::Halt: os << "exit $" << i.imm; break;
    }
    return os.str();
}

std::string print_program(const Program& p) {
    std::ostringstream os;
    os << kFasmHeader << "\n";
    os << ".program " << p.name;
    if (p.relro_full) os << " relro_full";
    os << "\n";
    for (const ImportDecl& imp : p.imports) {
        os << ".import " << imp.name << " " << signature_to_string(imp.signature) << "\n";
    }
    for (const DataObject& d : p.data_objects) {
        os << ".data " << d.name << " ";
        switch (d.kind) {
        case DataObject::Kind::JumpTable: os << "jump_table"; break;
        case DataObject::Kind::Vtable: os << "vtable"; break;
        case DataObject::Kind::FnptrSlot: os << "fnptr_slot"; break;
        case DataObject::Kind::Bytes: os << "bytes"; break;
        }
        os << (d.writable ? " rw" : " ro");
        for (size_t i = 0; i < d.entries.size(); ++i) {
            os << (i == 0 ? " " : ", ");
            if (d.entries[i].is_symbol) {
                os << d.entries[i].sym;
            } else {
                os << hex(d.entries[i].value);
            }
        }
        os << "\n";
    }
    for (const Function& f : p.functions) {
        os << ".func " << f.name;
        if (f.linkage == Linkage::Global) os << " global";
        os << " " << signature_to_string(f.signature) << "\n";
        size_t label_cursor = 0;
        auto emit_labels_at = [&](size_t index) {
            while (label_cursor < f.labels.size() && f.labels[label_cursor].index == index) {
                os << f.labels[label_cursor].name << ":\n";
                ++label_cursor;
            }
        };
        for (size_t i = 0; i < f.instrs.size(); ++i) {
            emit_labels_at(i);
            os << "  " << print_instruction(f.instrs[i]) << "\n";
        }
        emit_labels_at(f.instrs.size());
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

struct LineCursor {
    std::string_view line;
    size_t pos{0};
    int lineno{0};

    [[noreturn]] void fail(const std::string& what) const {
        throw Error(Errc::SyntaxError, what, lineno, static_cast<int>(pos) + 1);
    }
    void skip_ws() {
        while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
    }
    bool at_end() {
        skip_ws();
        return pos >= line.size();
    }
    char peek() const { return pos < line.size() ? line[pos] : '\0'; }
    bool eat(char c) {
        skip_ws();
        if (peek() == c) { ++pos; return true; }
        return false;
    }
    void expect(char c) {
        if (!eat(c)) fail(std::string("expected '") + c + "'");
    }
    bool eat_word(std::string_view w) {
        skip_ws();
        if (line.substr(pos, w.size()) == w) {
            size_t end = pos + w.size();
            // words must end at a non-ident boundary
            if (end < line.size() && (std::isalnum(static_cast<unsigned char>(line[end])) || line[end] == '_')) {
                return false;
            }
            pos = end;
            return true;
        }
        return false;
    }
    static bool ident_char(char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '@' || c == '$';
    }
    std::string ident() {
        skip_ws();
        size_t start = pos;
        // identifiers may start with '.' (local labels) but not with '$'
        while (pos < line.size() && ident_char(line[pos])) ++pos;
        if (pos == start) fail("expected identifier");
        return std::string(line.substr(start, pos - start));
    }
    uint64_t number() {
        skip_ws();
        size_t start = pos;
        int base = 10;
        if (line.substr(pos, 2) == "0x" || line.substr(pos, 2) == "0X") {
            base = 16;
            pos += 2;
        }
        uint64_t value = 0;
        bool any = false;
        while (pos < line.size()) {
            char c = line[pos];
            int digit;
            if (c >= '0' && c <= '9') digit = c - '0';
            else if (base == 16 && c >= 'a' && c <= 'f') digit = c - 'a' + 10;
            else if (base == 16 && c >= 'A' && c <= 'F') digit = c - 'A' + 10;
            else break;
            value = value * base + static_cast<uint64_t>(digit);
            any = true;
            ++pos;
        }
        if (!any) { pos = start; fail("expected number"); }
        return value;
    }
    Reg reg(bool* was32 = nullptr) {
        expect('%');
        std::string name = ident();
        auto r = reg_from_name(name);
        if (!r) fail("unknown register %" + name);
        if (was32) *was32 = name.size() >= 3 && (name[0] == 'e' || name.back() == 'd');
        return *r;
    }
    void done() {
        if (!at_end()) fail("trailing characters: '" + std::string(line.substr(pos)) + "'");
    }
};

Instruction parse_instruction_cursor(LineCursor& c) {
    bool notrack = c.eat_word("notrack");

    auto reject_notrack = [&](const char* mnemonic) {
        if (notrack) c.fail(std::string("notrack does not apply to ") + mnemonic);
    };

    if (c.eat_word("endbr64")) { reject_notrack("endbr64"); c.done(); return ins::endbr64(); }
    if (c.eat_word("hlt")) { reject_notrack("hlt"); c.done(); return ins::hlt(); }
    if (c.eat_word("ud2")) { reject_notrack("ud2"); c.done(); return ins::ud2(); }
    if (c.eat_word("int3")) { reject_notrack("int3"); c.done(); return ins::int3(); }
    if (c.eat_word("ret")) { reject_notrack("ret"); c.done(); return ins::ret(); }

    if (c.eat_word("exit")) {
        reject_notrack("exit");
        c.expect('$');
        uint64_t code = c.number();
        c.done();
        return ins::halt(static_cast<uint32_t>(code));
    }

    c.skip_ws();
    if (c.line.substr(c.pos, 3) == "nop") {
        size_t after = c.pos + 3;
        char next = after < c.line.size() ? c.line[after] : '\0';
        bool plain = next == '\0' || !LineCursor::ident_char(next);
        bool widened = next >= '2' && next <= '9';
        if (plain || widened) {
            reject_notrack("nop");
            c.pos = after;
            uint64_t w = 1;
            if (widened) {
                w = static_cast<uint64_t>(next - '0');
                ++c.pos;
            }
            c.done();
            return ins::nop(static_cast<uint8_t>(w));
        }
    }

    if (c.eat_word("mov")) {
        reject_notrack("mov");
        c.skip_ws();
        if (c.peek() == '$') {
            c.expect('$');
            c.skip_ws();
            if (std::isdigit(static_cast<unsigned char>(c.peek()))) {
                uint64_t imm = c.number();
                c.expect(',');
                bool was32 = false;
                Reg r = c.reg(&was32);
                c.done();
                if (!was32) c.fail("mov immediate targets a 32-bit register view");
                return ins::mov_imm(r, static_cast<uint32_t>(imm));
            }
            std::string sym = c.ident();
            c.expect(',');
            bool was32 = false;
            Reg r = c.reg(&was32);
            c.done();
            if (!was32) c.fail("address-load mov targets a 32-bit register view");
            return ins::load_fn_addr(r, std::move(sym));
        }
        if (c.peek() == '%') {
            Reg src = c.reg();
            c.expect(',');
            c.skip_ws();
            if (c.peek() == '%') {
                Reg dst = c.reg();
                c.done();
                return ins::mov_reg(dst, src);
            }
            std::string obj = c.ident();
            c.expect('(');
            if (!c.eat_word("%rip")) c.fail("store destination must be rip-relative");
            c.expect(')');
            c.done();
            return ins::store_data(std::move(obj), src);
        }
        // load forms: obj(%rip) or obj(,%idx,8)
        std::string obj = c.ident();
        c.expect('(');
        if (c.eat(',')) {
            Reg idx = c.reg();
            c.expect(',');
            if (c.number() != 8) c.fail("only scale 8 is supported");
            c.expect(')');
            c.expect(',');
            Reg dst = c.reg();
            c.done();
            return ins::load_data_indexed(dst, std::move(obj), idx);
        }
        if (!c.eat_word("%rip")) c.fail("load source must be rip-relative or indexed");
        c.expect(')');
        c.expect(',');
        Reg dst = c.reg();
        c.done();
        return ins::load_data(dst, std::move(obj));
    }

    if (c.eat_word("sub")) {
        reject_notrack("sub");
        c.skip_ws();
        if (c.peek() == '$') {
            c.expect('$');
            uint64_t imm = c.number();
            c.expect(',');
            bool was32 = false;
            Reg r = c.reg(&was32);
            c.done();
            if (!was32) c.fail("sub immediate targets a 32-bit register view");
            return ins::sub_imm(r, static_cast<uint32_t>(imm));
        }
        Reg src = c.reg();
        c.expect(',');
        Reg dst = c.reg();
        c.done();
        return ins::sub_reg(dst, src);
    }

    if (c.eat_word("cmp")) {
        reject_notrack("cmp");
        c.expect('$');
        uint64_t imm = c.number();
        c.expect(',');
        bool was32 = false;
        Reg r = c.reg(&was32);
        c.done();
        return ins::cmp_imm(r, imm, was32 ? Width::W32 : Width::W64);
    }

    if (c.eat_word("xor")) {
        reject_notrack("xor");
        c.expect('$');
        uint64_t imm = c.number();
        c.expect(',');
        bool was32 = false;
        Reg r = c.reg(&was32);
        c.done();
        if (!was32) c.fail("xor immediate targets a 32-bit register view");
        return ins::xor_imm(r, static_cast<uint32_t>(imm));
    }

    if (c.eat_word("shl")) {
        reject_notrack("shl");
        c.expect('$');
        uint64_t amount = c.number();
        c.expect(',');
        Reg r = c.reg();
        c.done();
        return ins::shl(r, static_cast<uint8_t>(amount));
    }

    if (c.eat_word("or")) {
        reject_notrack("or");
        c.expect('$');
        uint64_t imm = c.number();
        c.expect(',');
        Reg r = c.reg();
        c.done();
        return ins::or64_imm(r, imm);
    }

    if (c.eat_word("rol")) {
        reject_notrack("rol");
        c.expect('$');
        uint64_t amount = c.number();
        c.expect(',');
        Reg r = c.reg();
        c.done();
        return ins::rol(r, static_cast<uint8_t>(amount));
    }

    if (c.eat_word("pushq")) {
        reject_notrack("pushq");
        c.skip_ws();
        if (c.peek() == '$') {
            c.expect('$');
            uint64_t imm = c.number();
            c.done();
            return ins::push_imm(static_cast<uint32_t>(imm));
        }
        if (!c.eat_word("GOT")) c.fail("expected $imm or GOT+off(%rip)");
        c.expect('+');
        uint64_t off = c.number();
        c.expect('(');
        if (!c.eat_word("%rip")) c.fail("expected %rip");
        c.expect(')');
        c.done();
        if (off % 8 != 0) c.fail("GOT offset must be slot-aligned");
        return ins::push_got_slot(static_cast<uint32_t>(off / 8));
    }

    if (c.eat_word("call")) {
        c.skip_ws();
        if (c.peek() == '*') {
            c.expect('*');
            Reg r = c.reg();
            c.done();
            return ins::indirect_call(r, notrack);
        }
        reject_notrack("direct call");
        std::string sym = c.ident();
        c.done();
        return ins::direct_call(std::move(sym));
    }

    if (c.eat_word("jmp")) {
        c.skip_ws();
        if (c.peek() == '*') {
            c.expect('*');
            c.skip_ws();
            if (c.peek() == '%') {
                Reg r = c.reg();
                c.done();
                return ins::indirect_jmp_reg(r, notrack);
            }
            std::string sym = c.ident();
            // GOT+16(%rip), sym@GOT(%rip), or table(,%idx,8)
            if (sym == "GOT") {
                c.expect('+');
                uint64_t off = c.number();
                c.expect('(');
                if (!c.eat_word("%rip")) c.fail("expected %rip");
                c.expect(')');
                c.done();
                if (off != 16) c.fail("only the GOT[2] resolver slot may be jumped raw");
                return ins::indirect_jmp_got(std::string(kResolverSymbol), notrack);
            }
            if (sym.size() > 4 && sym.substr(sym.size() - 4) == "@GOT") {
                c.expect('(');
                if (!c.eat_word("%rip")) c.fail("expected %rip");
                c.expect(')');
                c.done();
                return ins::indirect_jmp_got(sym.substr(0, sym.size() - 4), notrack);
            }
            c.expect('(');
            c.expect(',');
            Reg idx = c.reg();
            c.expect(',');
            if (c.number() != 8) c.fail("only scale 8 is supported");
            c.expect(')');
            c.done();
            return ins::switch_jmp(std::move(sym), idx, notrack);
        }
        reject_notrack("direct jmp");
        std::string target = c.ident();
        c.done();
        return ins::jmp(std::move(target));
    }

    // Conditional branches.
    {
        Cond cond;
        if (c.eat_word("je")) cond = Cond::Eq;
        else if (c.eat_word("jne")) cond = Cond::Ne;
        else if (c.eat_word("jae")) cond = Cond::Ae;
        else c.fail("unknown mnemonic");
        reject_notrack("conditional branch");
        std::string label = c.ident();
        c.done();
        return ins::cond_branch(cond, std::move(label));
    }
}

std::string_view strip_comment(std::string_view line) {
    size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r')) {
        line.remove_suffix(1);
    }
    return line;
}

} // namespace

Instruction parse_instruction_text(std::string_view text) {
    LineCursor c{strip_comment(text)};
    c.skip_ws();
    return parse_instruction_cursor(c);
}

Program parse_program(std::string_view text) {
    Program p;
    p.name = "program";
    Function* current = nullptr;
    bool saw_header = false;
    bool saw_program = false;

    int lineno = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t eol = text.find('\n', pos);
        std::string_view raw = (eol == std::string_view::npos)
                                   ? text.substr(pos)
                                   : text.substr(pos, eol - pos);
        pos = (eol == std::string_view::npos) ? text.size() + 1 : eol + 1;
        ++lineno;

        // The versioned header line uses ';', everything else uses '#'.
        if (!saw_header) {
            std::string_view trimmed = raw;
            while (!trimmed.empty() && (trimmed.back() == '\r' || trimmed.back() == ' ')) trimmed.remove_suffix(1);
            if (trimmed.empty()) {
                if (raw.empty() && pos > text.size()) break;
                continue;
            }
            if (trimmed != kFasmHeader) {
                throw Error(Errc::SyntaxError, "missing '" + std::string(kFasmHeader) + "' header", lineno, 1);
            }
            saw_header = true;
            continue;
        }

        std::string_view line = strip_comment(raw);
        LineCursor c{line, 0, lineno};
        if (c.at_end()) continue;

        if (c.eat_word(".program")) {
            if (saw_program) c.fail("duplicate .program directive");
            saw_program = true;
            p.name = c.ident();
            if (c.eat_word("relro_full")) p.relro_full = true;
            c.done();
            continue;
        }
        if (c.eat_word(".import")) {
            ImportDecl imp;
            imp.name = c.ident();
            c.skip_ws();
            imp.signature = parse_signature(line.substr(c.pos));
            p.imports.push_back(std::move(imp));
            continue;
        }
        if (c.eat_word(".data")) {
            DataObject d;
            d.name = c.ident();
            std::string kind = c.ident();
            if (kind == "jump_table") d.kind = DataObject::Kind::JumpTable;
            else if (kind == "vtable") d.kind = DataObject::Kind::Vtable;
            else if (kind == "fnptr_slot") d.kind = DataObject::Kind::FnptrSlot;
            else if (kind == "bytes") d.kind = DataObject::Kind::Bytes;
            else c.fail("unknown data kind '" + kind + "'");
            std::string rw = c.ident();
            if (rw == "rw") d.writable = true;
            else if (rw == "ro") d.writable = false;
            else c.fail("expected rw or ro");
            if (!c.at_end()) {
                for (;;) {
                    c.skip_ws();
                    DataObject::Entry e;
                    if (std::isdigit(static_cast<unsigned char>(c.peek()))) {
                        e.is_symbol = false;
                        e.value = c.number();
                    } else {
                        e.is_symbol = true;
                        e.sym = c.ident();
                    }
                    d.entries.push_back(std::move(e));
                    if (!c.eat(',')) break;
                }
                c.done();
            }
            p.data_objects.push_back(std::move(d));
            continue;
        }
        if (c.eat_word(".func")) {
            Function f;
            f.name = c.ident();
            if (c.eat_word("global")) f.linkage = Linkage::Global;
            bool variadic_kw = c.eat_word("variadic");
            c.skip_ws();
            f.signature = parse_signature(line.substr(c.pos));
            if (variadic_kw) f.signature.variadic = true;
            p.functions.push_back(std::move(f));
            current = &p.functions.back();
            continue;
        }
        if (line[c.pos] == '.' && current == nullptr) {
            c.fail("unknown directive");
        }

        if (current == nullptr) {
            c.fail("instruction or label outside of a function");
        }

        // Label line: "ident:" and nothing else.
        {
            LineCursor probe = c;
            probe.skip_ws();
            size_t start = probe.pos;
            while (probe.pos < line.size() && LineCursor::ident_char(line[probe.pos])) ++probe.pos;
            if (probe.pos > start && probe.pos < line.size() && line[probe.pos] == ':') {
                std::string name(line.substr(start, probe.pos - start));
                probe.pos += 1;
                probe.done();
                current->labels.push_back(Label{std::move(name), current->instrs.size()});
                continue;
            }
        }

        current->instrs.push_back(parse_instruction_cursor(c));
    }

    if (!saw_header && !text.empty()) {
        // Non-empty input must carry the header; fully empty input parses
        // to the empty program.
        bool only_ws = text.find_first_not_of(" \t\r\n") == std::string_view::npos;
        if (!only_ws) throw Error(Errc::SyntaxError, "missing header", 1, 1);
    }

    validate(p);
    return p;
}

// ---------------------------------------------------------------------------
// Validation and derived attributes

std::optional<size_t> Function::label_index(std::string_view label) const {
    for (const Label& l : labels) {
        if (l.name == label) return l.index;
    }
    return std::nullopt;
}

bool Function::operator==(const Function& other) const {
    return name == other.name && linkage == other.linkage && signature == other.signature &&
           address_taken == other.address_taken && instrs == other.instrs && labels == other.labels &&
           entry_index == other.entry_index;
}

bool ImportDecl::operator==(const ImportDecl& other) const {
    return name == other.name && signature == other.signature;
}

bool Program::operator==(const Program& other) const {
    return name == other.name && relro_full == other.relro_full && functions == other.functions &&
           data_objects == other.data_objects && imports == other.imports;
}

const Function* Program::find_function(std::string_view fname) const {
    for (const Function& f : functions) {
        if (f.name == fname) return &f;
    }
    return nullptr;
}

const DataObject* Program::find_data(std::string_view dname) const {
    for (const DataObject& d : data_objects) {
        if (d.name == dname) return &d;
    }
    return nullptr;
}

const ImportDecl* Program::find_import(std::string_view iname) const {
    for (const ImportDecl& i : imports) {
        if (i.name == iname) return &i;
    }
    return nullptr;
}

void validate(Program& p) {
    std::set<std::string> fn_names;
    for (const Function& f : p.functions) {
        if (!fn_names.insert(f.name).second) {
            throw Error(Errc::DuplicateSymbol, "duplicate function '" + f.name + "'");
        }
    }
    for (const ImportDecl& imp : p.imports) {
        if (fn_names.count(imp.name)) {
            throw Error(Errc::DuplicateSymbol, "import '" + imp.name + "' collides with a function");
        }
    }

    // Labels referenced by DirectCall/Jmp across function boundaries must be
    // unambiguous, so track them program-wide.
    std::map<std::string, int> label_owners;
    for (Function& f : p.functions) {
        std::stable_sort(f.labels.begin(), f.labels.end(),
                         [](const Label& a, const Label& b) { return a.index < b.index; });
        std::set<std::string> seen;
        for (const Label& l : f.labels) {
            if (!seen.insert(l.name).second) {
                throw Error(Errc::DuplicateLabel, "duplicate label '" + l.name + "' in " + f.name);
            }
            if (l.index > f.instrs.size()) {
                throw Error(Errc::SyntaxError, "label '" + l.name + "' out of range in " + f.name);
            }
            label_owners[l.name] += 1;
        }
        // Entry marker: a label carrying the function's own name moves the
        // entry point past any preceding coldpath block.
        f.entry_index = 0;
        if (auto idx = f.label_index(f.name)) f.entry_index = *idx;
    }

    auto callable_symbol = [&](const std::string& sym) {
        if (p.find_function(sym) || p.find_import(sym)) return true;
        auto it = label_owners.find(sym);
        return it != label_owners.end() && it->second == 1;
    };

    // address_taken is computed, never user-asserted.
    for (Function& f : p.functions) f.address_taken = false;
    auto mark_taken = [&](const std::string& sym) {
        for (Function& f : p.functions) {
            if (f.name == sym) {
                f.address_taken = true;
                return;
            }
        }
    };

    for (const DataObject& d : p.data_objects) {
        for (const DataObject::Entry& e : d.entries) {
            if (!e.is_symbol) continue;
            bool is_fn = p.find_function(e.sym) != nullptr;
            bool is_import = p.find_import(e.sym) != nullptr;
            if (d.kind == DataObject::Kind::JumpTable || d.kind == DataObject::Kind::Vtable) {
                if (!is_fn && !is_import) {
                    throw Error(Errc::UndefinedSymbol,
                                d.name + " entry '" + e.sym + "' is not a function or import");
                }
            } else if (!is_fn && !is_import && !p.find_data(e.sym)) {
                throw Error(Errc::UndefinedSymbol, d.name + " entry '" + e.sym + "' is undefined");
            }
            mark_taken(e.sym);
        }
        if (d.kind == DataObject::Kind::JumpTable && p.relro_full && d.writable) {
            throw Error(Errc::BadConfig, "jump_table '" + d.name + "' must be read-only under relro_full");
        }
    }

    for (const Function& f : p.functions) {
        for (const Instruction& i : f.instrs) {
            switch (i.op) {
            case Op::CondBranch:
                if (!f.label_index(i.sym)) {
                    throw Error(Errc::UndefinedSymbol,
                                "branch target '" + i.sym + "' missing in " + f.name);
                }
                break;
            case Op::Jmp:
                if (!f.label_index(i.sym) && !callable_symbol(i.sym)) {
                    throw Error(Errc::UndefinedSymbol, "jmp target '" + i.sym + "' unresolved");
                }
                break;
            case Op::DirectCall:
                if (!callable_symbol(i.sym)) {
                    throw Error(Errc::UndefinedSymbol, "call target '" + i.sym + "' unresolved");
                }
                break;
            case Op::LoadFnAddr:
                if (!p.find_function(i.sym) && !p.find_import(i.sym)) {
                    throw Error(Errc::UndefinedSymbol, "address of unknown symbol '" + i.sym + "'");
                }
                break;
            case Op::IndirectJmpGot:
                if (i.sym != kResolverSymbol && !p.find_import(i.sym)) {
                    throw Error(Errc::UndefinedSymbol,
                                "GOT jump through undeclared import '" + i.sym + "'");
                }
                break;
            case Op::LoadData:
            case Op::StoreData:
            case Op::SwitchJmp:
                if (!p.find_data(i.sym)) {
                    throw Error(Errc::UndefinedSymbol, "unknown data object '" + i.sym + "'");
                }
                break;
            case Op::Nop:
                if (i.imm < 1 || i.imm > 9) {
                    throw Error(Errc::SyntaxError, "nop width out of range in " + f.name);
                }
                break;
            default:
                break;
            }
        }
    }

    for (Function& f : p.functions) {
        for (const Instruction& i : f.instrs) {
            if (i.op == Op::LoadFnAddr) mark_taken(i.sym);
        }
    }
}

} // namespace fibt::ir
