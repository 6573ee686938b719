// SPDX-License-Identifier: Apache-2.0
//
// Assembly-level IR: programs, functions, instructions, the .fasm text
// grammar (docs/grammar.md), and the byte-size model every other stage
// charges against.
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fibt/error.hpp"

namespace fibt::ir {

enum class Reg : uint8_t { rax, rbx, rcx, rdx, rsi, rdi, r10, r11, r12 };

const char* reg_name64(Reg r);
const char* reg_name32(Reg r);
std::optional<Reg> reg_from_name(std::string_view name); // accepts either width
bool reg_needs_rex(Reg r); // r10..r12 take a REX prefix in the size model

enum class Cond : uint8_t { Eq, Ne, Ae };
enum class Width : uint8_t { W32, W64 };

struct Signature;

struct TypeTag {
    enum class Kind : uint8_t { Void, Int32, Int64, Ptr, FnPtr, Struct };
    Kind kind{Kind::Void};
    std::shared_ptr<TypeTag> pointee;  // Ptr
    std::shared_ptr<Signature> fn;     // FnPtr
    std::string struct_name;           // Struct

    static TypeTag void_();
    static TypeTag int32();
    static TypeTag int64();
    static TypeTag ptr(TypeTag inner);
    static TypeTag fnptr(Signature sig);
    static TypeTag struct_(std::string name);

    bool operator==(const TypeTag& other) const; // structural
    bool operator!=(const TypeTag& other) const { return !(*this == other); }
};

struct Signature {
    TypeTag return_type{};
    std::vector<TypeTag> params;
    bool variadic{false};

    size_t arity() const { return params.size(); }
    bool operator==(const Signature& other) const;
    bool operator!=(const Signature& other) const { return !(*this == other); }
};

std::string signature_to_string(const Signature& sig);
Signature parse_signature(std::string_view text); // "sig(int64,ptr(int32))->void [variadic]"

enum class Op : uint8_t {
    Endbr64,
    MovImm,      // reg32 <- imm32 (zero-extends)
    SubImm,      // reg32 -= imm32 (zero-extends, sets ZF/CF)
    CmpImm,      // compare reg against imm (width selects 32/64-bit view)
    XorImm,      // reg32 ^= imm32
    Shl,         // reg64 <<= amount
    Or64Imm,     // reg64 |= imm
    CondBranch,  // je/jne/jae label
    Jmp,         // direct jmp to label or symbol (tail transfer)
    Rol,         // reg64 = rotl(reg64, amount)
    Hlt,
    Ud2,
    Int3,
    Nop,         // width 1..9 bytes
    DirectCall,
    IndirectCall,    // call *%reg
    IndirectJmpReg,  // jmp *%reg
    IndirectJmpGot,  // jmp *sym@GOT(%rip)
    LoadFnAddr,      // mov $sym, %reg32 (position-dependent address load)
    LoadData,        // mov obj(%rip), %reg64 / mov obj(,%idx,8), %reg64
    StoreData,       // mov %reg64, obj(%rip)
    MovReg,          // mov %src, %dst
    SubReg,          // sub %src, %dst
    PushImm,         // pushq $imm
    PushGotSlot,     // pushq GOT+8n(%rip)
    Ret,
    SwitchJmp,       // jmp *table(,%idx,8)
    Halt,            // exit $code (simulator terminator)
};

struct Instruction {
    Op op{Op::Nop};
    Reg reg{Reg::rax};        // dst / checked register
    Reg reg2{Reg::rax};       // src / index register
    bool has_reg2{false};
    uint64_t imm{0};          // immediate / shift amount / nop width / exit code / GOT slot
    Width width{Width::W32};  // CmpImm only
    Cond cond{Cond::Eq};
    bool notrack{false};
    std::string sym;          // symbol / label / data object operand

    bool operator==(const Instruction&) const = default;
};

// Factories keep unused fields at their canonical defaults so that value
// equality is meaningful.
namespace ins {
Instruction endbr64();
Instruction mov_imm(Reg r, uint32_t imm);
Instruction sub_imm(Reg r, uint32_t imm);
Instruction cmp_imm(Reg r, uint64_t imm, Width w);
Instruction xor_imm(Reg r, uint32_t imm);
Instruction shl(Reg r, uint8_t amount);
Instruction or64_imm(Reg r, uint64_t imm);
Instruction cond_branch(Cond c, std::string label);
Instruction jmp(std::string target);
Instruction rol(Reg r, uint8_t amount);
Instruction hlt();
Instruction ud2();
Instruction int3();
Instruction nop(uint8_t width);
Instruction direct_call(std::string sym);
Instruction indirect_call(Reg r, bool notrack = false);
Instruction indirect_jmp_reg(Reg r, bool notrack = false);
Instruction indirect_jmp_got(std::string sym, bool notrack = false);
Instruction load_fn_addr(Reg r, std::string sym);
Instruction load_data(Reg r, std::string obj);
Instruction load_data_indexed(Reg r, std::string obj, Reg index);
Instruction store_data(std::string obj, Reg r);
Instruction mov_reg(Reg dst, Reg src);
Instruction sub_reg(Reg dst, Reg src);
Instruction push_imm(uint32_t imm);
Instruction push_got_slot(uint32_t slot);
Instruction ret();
Instruction switch_jmp(std::string table, Reg index, bool notrack = true);
Instruction halt(uint32_t exit_code);
} // namespace ins

struct Label {
    std::string name;
    size_t index{0}; // instruction index the label precedes (== instrs.size() for end labels)

    bool operator==(const Label&) const = default;
};

enum class Linkage : uint8_t { Local, Global };

struct Function {
    std::string name;
    Linkage linkage{Linkage::Local};
    Signature signature;
    bool address_taken{false}; // computed during validation, never user-asserted
    std::vector<Instruction> instrs;
    std::vector<Label> labels; // sorted by index, insertion-stable within an index
    size_t entry_index{0};     // label named after the function, else 0

    bool is_variadic() const { return signature.variadic; }
    std::optional<size_t> label_index(std::string_view name) const;
    bool operator==(const Function& other) const;
};

struct DataObject {
    enum class Kind : uint8_t { JumpTable, Vtable, FnptrSlot, Bytes };

    struct Entry {
        bool is_symbol{false};
        std::string sym;
        uint64_t value{0};
        bool operator==(const Entry&) const = default;
    };

    std::string name;
    Kind kind{Kind::Bytes};
    bool writable{true};
    std::vector<Entry> entries;

    bool operator==(const DataObject&) const = default;
};

struct ImportDecl {
    std::string name;
    Signature signature;
    bool operator==(const ImportDecl& other) const;
};

struct Program {
    std::string name;
    bool relro_full{false};
    std::vector<Function> functions;
    std::vector<DataObject> data_objects;
    std::vector<ImportDecl> imports;

    const Function* find_function(std::string_view name) const;
    const DataObject* find_data(std::string_view name) const;
    const ImportDecl* find_import(std::string_view name) const;
    bool operator==(const Program& other) const;
};

// Parses the .fasm text format. Throws Error with line/column diagnostics.
Program parse_program(std::string_view text);

// Canonical printer; parse_program(print_program(p)) == p.
std::string print_program(const Program& p);

// Single-instruction forms used by the image serializer.
Instruction parse_instruction_text(std::string_view line);
std::string print_instruction(const Instruction& i);

// Recomputes derived attributes (address_taken, entry_index) and checks all
// structural invariants. parse_program calls this; programs built in memory
// must call it before use.
void validate(Program& p);

// Byte size under the fixed size model (docs/grammar.md lists the table).
int instruction_size(const Instruction& i);

// Sum of instruction sizes over a body, ignoring labels.
uint64_t body_size(const Function& f);

inline constexpr std::string_view kFasmHeader = ";fasm v1";

// Reserved GOT[2] jump target (the dynamic linker's resolver); printed and
// parsed as "jmp *GOT+16(%rip)".
inline constexpr std::string_view kResolverSymbol = "__plt_resolver";

} // namespace fibt::ir
