// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "test_util.hpp"

using namespace fibt;
using policy::PolicyKind;
using weave::IrmVariant;

namespace {

policy::SidAssignment sidpair_assignment(const ir::Program& p) {
    auto a = policy::build_classes(p, PolicyKind::Arity);
    policy::allocate_sids(a, 1,
                          {{"func0", 0xc00010ffu}, {"func1", 0xbaddcafeu}});
    return a;
}

size_t count_ops(const ir::Program& p, ir::Op op) {
    size_t n = 0;
    for (const auto& f : p.functions) {
        for (const auto& i : f.instrs) {
            if (i.op == op) ++n;
        }
    }
    return n;
}

} // namespace

TEST_CASE("basic instrumentation of the sidpair fixture matches the golden text") {
    ir::Program p = testutil::load_fixture("sidpair.fasm");
    auto a = sidpair_assignment(p);
    ir::Program out = weave::instrument(p, a, IrmVariant::FineIbtBasic, ir::Reg::rax);

    std::string printed = ir::print_program(out);
    CHECK(printed == testutil::read_file(testutil::fixture_path("sidpair.golden.fasm")));

    // the properties the golden encodes
    CHECK(printed.find("mov $0xc00010ff, %eax") != std::string::npos);
    CHECK(printed.find("sub $0xc00010ff, %eax") != std::string::npos);
    CHECK(printed.find("sub $0xbaddcafe, %eax") != std::string::npos);
    CHECK(printed.find("call func1_entry") != std::string::npos);
    CHECK(printed.find("je func0_entry") != std::string::npos);
}

TEST_CASE("programs with nothing to protect come back unchanged") {
    const char* text =
        ";fasm v1\n"
        ".program plain\n"
        ".func main sig()->void\n"
        "  call helper\n"
        "  exit $0\n"
        ".func helper sig()->void\n"
        "  ret\n";
    ir::Program p = ir::parse_program(text);
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 1);
    ir::Program out = weave::instrument(p, a, IrmVariant::FineIbtBasic);
    CHECK(out == p);
}

TEST_CASE("coldpath variant matches the reference shape") {
    ir::Program p = testutil::load_fixture("sidpair.fasm");
    auto a = sidpair_assignment(p);
    ir::Program out = weave::instrument(p, a, IrmVariant::FineIbtColdpath, ir::Reg::rax);

    std::string printed = ir::print_program(out);
    CHECK(printed == testutil::read_file(testutil::fixture_path("sidpair_coldpath.golden.fasm")));
    CHECK(printed.find(".func0_fineibt_coldpath:") != std::string::npos);
    CHECK(printed.find("jne .func0_fineibt_coldpath") != std::string::npos);
    CHECK(printed.find("call __fineibt_chk_fail") != std::string::npos);

    const ir::Function* f0 = out.find_function("func0");
    REQUIRE(f0 != nullptr);
    // coldpath block above the entry marker; check is sub+jne
    CHECK(f0->entry_index == 1);
    CHECK(f0->instrs[0].op == ir::Op::DirectCall);
    CHECK(f0->instrs[1].op == ir::Op::Endbr64);
    CHECK(f0->instrs[2].op == ir::Op::SubImm);
    CHECK(f0->instrs[3].op == ir::Op::CondBranch);
    CHECK(f0->instrs[3].cond == ir::Cond::Ne);
}

TEST_CASE("every indirect site carries exactly one SID load") {
    for (uint64_t seed = 300; seed < 330; ++seed) {
        testutil::GenOptions opts;
        opts.callsites = 1 + seed % 5;
        ir::Program p = testutil::random_program(seed, opts);
        auto a = policy::build_classes(p, PolicyKind::TypeStrict);
        policy::allocate_sids(a, seed);
        ir::Program out = weave::instrument(p, a, IrmVariant::FineIbtBasic);

        for (const auto& f : out.functions) {
            for (size_t i = 0; i < f.instrs.size(); ++i) {
                const auto& in = f.instrs[i];
                if (in.op == ir::Op::IndirectCall || in.op == ir::Op::IndirectJmpReg) {
                    REQUIRE(i > 0);
                    CHECK(f.instrs[i - 1].op == ir::Op::MovImm);
                    CHECK(f.instrs[i - 1].reg == weave::kDefaultSidReg);
                }
            }
        }
    }
}

TEST_CASE("every endbr is followed by a sub check in fineibt output") {
    for (uint64_t seed = 400; seed < 420; ++seed) {
        ir::Program p = testutil::random_program(seed);
        auto a = policy::build_classes(p, PolicyKind::Arity);
        policy::allocate_sids(a, seed);
        ir::Program out = weave::instrument(p, a, IrmVariant::FineIbtBasic);
        for (const auto& f : out.functions) {
            for (size_t i = 0; i < f.instrs.size(); ++i) {
                if (f.instrs[i].op != ir::Op::Endbr64) continue;
                REQUIRE(i + 2 < f.instrs.size());
                CHECK(f.instrs[i + 1].op == ir::Op::SubImm);
                CHECK(f.instrs[i + 2].op == ir::Op::CondBranch);
                // never xor or cmp in a function prologue
                CHECK(f.instrs[i + 1].op != ir::Op::XorImm);
                CHECK(f.instrs[i + 1].op != ir::Op::CmpImm);
            }
        }
    }
}

TEST_CASE("size arithmetic is exact over a random corpus") {
    for (uint64_t seed = 500; seed < 550; ++seed) {
        testutil::GenOptions opts;
        opts.functions = 2 + seed % 8;
        opts.callsites = seed % 6;
        ir::Program p = testutil::random_program(seed, opts);
        auto a = policy::build_classes(p, PolicyKind::Arity);
        policy::allocate_sids(a, seed);

        size_t sites = 0;
        for (const auto& f : p.functions) sites += policy::indirect_callsites(f).size();
        size_t protected_fns = 0;
        for (const auto& f : p.functions) {
            if (weave::is_protected(f)) ++protected_fns;
        }

        ir::Program fine = weave::instrument(p, a, IrmVariant::FineIbtBasic);
        weave::SizeReport r = weave::size_report(p, fine);
        CHECK(r.delta() == 5 * sites + 12 * protected_fns);
        CHECK(r.endbr_bytes + r.caller_irm_bytes + r.callee_irm_bytes + r.trampoline_bytes +
                  r.coldpath_bytes ==
              r.delta());
        CHECK(r.endbr_bytes == 4 * protected_fns);
        CHECK(r.caller_irm_bytes == 5 * sites);
        CHECK(r.callee_irm_bytes == 8 * protected_fns);

        ir::Program ibt = weave::instrument(p, a, IrmVariant::IbtOnly);
        weave::SizeReport ribt = weave::size_report(p, ibt);
        CHECK(ribt.delta() == 4 * protected_fns);

        ir::Program cold = weave::instrument(p, a, IrmVariant::FineIbtColdpath);
        weave::SizeReport rcold = weave::size_report(p, cold);
        CHECK(rcold.delta() == 5 * sites + 16 * protected_fns);
        CHECK(rcold.coldpath_bytes == 5 * protected_fns);
    }
}

TEST_CASE("empty program instrumentation has zero delta") {
    ir::Program p;
    p.name = "empty";
    ir::validate(p);
    auto a = policy::build_classes(p, PolicyKind::Arity);
    policy::allocate_sids(a, 1);
    ir::Program out = weave::instrument(p, a, IrmVariant::FineIbtBasic);
    CHECK(weave::size_report(p, out).delta() == 0);
}

TEST_CASE("direct tail jumps are redirected to entry labels") {
    ir::Program p = testutil::load_fixture("tailcall.fasm");
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 9);
    ir::Program out = weave::instrument(p, a, IrmVariant::FineIbtBasic);

    const ir::Function* t_one = out.find_function("t_one");
    REQUIRE(t_one != nullptr);
    bool found = false;
    for (const auto& i : t_one->instrs) {
        if (i.op == ir::Op::Jmp) {
            CHECK(i.sym == "t_two_entry");
            found = true;
        }
    }
    CHECK(found);

    const ir::Function* t_two = out.find_function("t_two");
    REQUIRE(t_two != nullptr);
    for (size_t i = 0; i < t_two->instrs.size(); ++i) {
        if (t_two->instrs[i].op == ir::Op::IndirectJmpReg) {
            CHECK(t_two->instrs[i - 1].op == ir::Op::MovImm);
        }
    }
}

TEST_CASE("clang-cfi baseline builds trampolines and range checks") {
    ir::Program p = ir::parse_program(
        ";fasm v1\n"
        ".program cfi\n"
        ".data fp fnptr_slot rw f0\n"
        ".func main sig()->int64\n"
        "  mov fp(%rip), %rax\n"
        "  call *%rax\n"
        "  call f0\n"
        "  exit $0\n"
        ".func f0 global sig(int64)->int64\n"
        "  ret\n"
        ".func f1 global sig(int64)->int64\n"
        "  ret\n");
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 2);
    ir::Program out = weave::instrument_clang_cfi(p, a);

    // originals renamed, surrogates exist under the old names
    CHECK(out.find_function("f0.cfi") != nullptr);
    CHECK(out.find_function("f1.cfi") != nullptr);
    const ir::Function* slot0 = out.find_function("f0");
    const ir::Function* slot1 = out.find_function("f1");
    REQUIRE(slot0 != nullptr);
    REQUIRE(slot1 != nullptr);

    // 8-byte slots: jmp rel32 + 3x int3
    for (const ir::Function* slot : {slot0, slot1}) {
        CHECK(ir::body_size(*slot) == 8);
        CHECK(slot->instrs[0].op == ir::Op::Jmp);
        CHECK(slot->instrs[1].op == ir::Op::Int3);
    }
    CHECK(slot0->instrs[0].sym == "f0.cfi");

    // direct call rewritten to the .cfi body
    const ir::Function* main_fn = out.find_function("main");
    bool direct_found = false;
    for (const auto& i : main_fn->instrs) {
        if (i.op == ir::Op::DirectCall) {
            CHECK(i.sym == "f0.cfi");
            direct_found = true;
        }
    }
    CHECK(direct_found);

    // caller IRM is 21 bytes: load base, mov, sub, rol, cmp, jae
    size_t call_at = 0;
    for (size_t i = 0; i < main_fn->instrs.size(); ++i) {
        if (main_fn->instrs[i].op == ir::Op::IndirectCall) call_at = i;
    }
    REQUIRE(call_at >= 6);
    uint64_t irm_bytes = 0;
    for (size_t i = call_at - 6; i < call_at; ++i) {
        irm_bytes += static_cast<uint64_t>(ir::instruction_size(main_fn->instrs[i]));
    }
    CHECK(irm_bytes == 21);
    CHECK(main_fn->instrs[call_at - 2].op == ir::Op::CmpImm);
    CHECK(main_fn->instrs[call_at - 2].imm == 2); // two-member class bound
    CHECK(main_fn->instrs[call_at - 1].op == ir::Op::CondBranch);
    CHECK(main_fn->instrs[call_at - 1].cond == ir::Cond::Ae);

    weave::SizeReport r = weave::size_report(p, out);
    CHECK(r.trampoline_bytes == 16);
    CHECK(r.caller_irm_bytes == 21);
}

TEST_CASE("clang-cfi single-member class uses bound 1") {
    ir::Program p = ir::parse_program(
        ";fasm v1\n"
        ".program cfi1\n"
        ".data fp fnptr_slot rw only\n"
        ".func main sig()->int64\n"
        "  mov fp(%rip), %rax\n"
        "  call *%rax\n"
        "  exit $0\n"
        ".func only global sig()->int64\n"
        "  ret\n");
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 2);
    ir::Program out = weave::instrument_clang_cfi(p, a);

    const ir::Function* main_fn = out.find_function("main");
    bool seen = false;
    for (const auto& i : main_fn->instrs) {
        if (i.op == ir::Op::CmpImm) {
            CHECK(i.imm == 1);
            seen = true;
        }
    }
    CHECK(seen);
}

TEST_CASE("clang-cfi requires the type-strict policy") {
    ir::Program p = testutil::load_fixture("sidpair.fasm");
    auto a = policy::build_classes(p, PolicyKind::Arity);
    policy::allocate_sids(a, 1);
    CHECK_THROWS_AS((void)weave::instrument_clang_cfi(p, a), Error);
}

TEST_CASE("bti encodability follows the dual shifted-immediate constraint") {
    auto enc = weave::bti_encode_sid(0x3a0000);
    REQUIRE(enc.has_value());
    CHECK(enc->movz_imm == 0x3a);
    CHECK(enc->movz_shift == 16);
    CHECK(enc->subs_imm == 0x3a0);
    CHECK(enc->subs_shift == 12);

    CHECK(weave::bti_encode_sid(0x10000).has_value());
    CHECK_FALSE(weave::bti_encode_sid(0xc00010ff).has_value());

    // independent checker: scan all shift pairs
    auto oracle = [](uint32_t sid) {
        bool movz = false, subs = false;
        for (int s : {0, 16}) {
            if ((sid >> s) <= 0xFFFF && ((sid >> s) << s) == sid) movz = true;
        }
        if (sid == 0) movz = true;
        for (int s : {0, 12}) {
            if ((sid >> s) <= 0xFFF && ((sid >> s) << s) == sid) subs = true;
        }
        return movz && subs;
    };
    std::mt19937_64 rng(11);
    for (int i = 0; i < 2000; ++i) {
        uint32_t sid = static_cast<uint32_t>(rng());
        if (i % 3 == 0) sid &= 0xFFF000; // exercise encodable shapes too
        CHECK(weave::bti_encode_sid(sid).has_value() == oracle(sid));
    }
}

TEST_CASE("bti listing reproduces the reference lines for sid 0x3a0000") {
    ir::Program p = ir::parse_program(
        ";fasm v1\n"
        ".program arm\n"
        ".data fp fnptr_slot rw func\n"
        ".func main sig()->int64\n"
        "  mov fp(%rip), %rax\n"
        "  call *%rax\n"
        "  call func\n"
        "  exit $0\n"
        ".func func global sig()->int64\n"
        "  ret\n");
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 1, {{"func", 0x3a0000u}});
    std::string text = weave::emit_bti_text(p, a);

    CHECK(text.find("movz w9, #0x3a, lsl #16") != std::string::npos);
    CHECK(text.find("subs w9, w9, #0x3a0, lsl #12") != std::string::npos);
    CHECK(text.find("bne .func_finebti_coldpath") != std::string::npos);
    CHECK(text.find("bti c") != std::string::npos);
    CHECK(text.find("bl func_entry") != std::string::npos);
    CHECK(text.rfind(";s64 v1", 0) == 0);
}

TEST_CASE("bti emitter rejects non-encodable sids") {
    ir::Program p = testutil::load_fixture("sidpair.fasm");
    auto a = sidpair_assignment(p); // 0xc00010ff is not encodable
    try {
        weave::emit_bti_text(p, a);
        FAIL("expected SidNotEncodable");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::SidNotEncodable);
    }
}

TEST_CASE("instrumenting against a foreign assignment reports missing sids") {
    ir::Program p = testutil::load_fixture("sidpair.fasm");
    ir::Program other = ir::parse_program(
        ";fasm v1\n.program other\n.func g global sig()->void\n  ret\n");
    auto a = policy::build_classes(other, PolicyKind::Arity);
    policy::allocate_sids(a, 1);
    try {
        weave::instrument(p, a, IrmVariant::FineIbtBasic);
        FAIL("expected MissingSid");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::MissingSid);
    }
}

TEST_CASE("ibt-only adds endbr and nothing else") {
    ir::Program p = testutil::load_fixture("sidpair.fasm");
    auto a = sidpair_assignment(p);
    ir::Program out = weave::instrument(p, a, IrmVariant::IbtOnly);
    CHECK(count_ops(out, ir::Op::Endbr64) == 2);
    CHECK(count_ops(out, ir::Op::SubImm) == 0);
    CHECK(count_ops(out, ir::Op::MovImm) == count_ops(p, ir::Op::MovImm));
    // no entry aliases under ibt-only
    CHECK_FALSE(out.find_function("func1")->label_index("func1_entry").has_value());
}
