// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "test_util.hpp"

using namespace fibt;
using linkage::Image;
using linkage::PltFormat;
using policy::PolicyKind;
using weave::IrmVariant;

namespace {

// n imports, each called directly; optionally some address-taken.
ir::Program import_program(size_t n, size_t address_taken = 0) {
    std::ostringstream os;
    os << ";fasm v1\n.program dso" << n << "\n";
    for (size_t i = 0; i < n; ++i) {
        os << ".import fsym" << (i + 1) << " sig(int64)->int64\n";
    }
    os << ".func main global sig()->int64\n";
    for (size_t i = 0; i < n; ++i) {
        os << "  call fsym" << (i + 1) << "\n";
    }
    for (size_t i = 0; i < address_taken; ++i) {
        os << "  mov $fsym" << (i + 1) << ", %ecx\n";
    }
    os << "  exit $0\n";
    return ir::parse_program(os.str());
}

Image link_one(const ir::Program& p, PltFormat plt, IrmVariant irm = IrmVariant::FineIbtBasic,
               ir::Reg sid_reg = weave::kDefaultSidReg, uint64_t seed = 1) {
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, seed);
    ir::Program woven = weave::instrument(p, a, irm, sid_reg);
    return linkage::link_image(woven, a, plt, irm, sid_reg);
}

const linkage::SectionItem* first_labeled(const linkage::Section& sec, const std::string& label) {
    for (const auto& item : sec.items) {
        for (const auto& l : item.labels) {
            if (l == label) return &item;
        }
    }
    return nullptr;
}

} // namespace

TEST_CASE("fineibt plt slots follow the reference pattern") {
    ir::Program p = import_program(1);
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 5);
    policy::Sid sid = a.sid_of_function("fsym1");
    ir::Program woven = weave::instrument(p, a, IrmVariant::FineIbtBasic, ir::Reg::rax);
    Image img = linkage::link_image(woven, a, PltFormat::FineIbtPlt, IrmVariant::FineIbtBasic,
                                    ir::Reg::rax);

    const linkage::Section& fplt = *img.find_section(".plt.fineibt");
    const linkage::SectionItem* slot = first_labeled(fplt, "FPLT1");
    REQUIRE(slot != nullptr);
    CHECK(slot->instr.op == ir::Op::MovImm);
    CHECK(slot->instr.imm == sid);
    CHECK(ir::print_instruction(slot->instr) ==
          "mov $" + [&] {
              std::ostringstream os;
              os << "0x" << std::hex << sid;
              return os.str();
          }() + ", %eax");

    const linkage::Section& plt = *img.find_section(".plt");
    const linkage::SectionItem* pe = first_labeled(plt, "PLT1");
    REQUIRE(pe != nullptr);
    CHECK(pe->instr.op == ir::Op::Endbr64);
    // cmp preserves the SID; never sub in .plt
    const linkage::SectionItem* check = nullptr;
    for (size_t i = 0; i < plt.items.size(); ++i) {
        if (&plt.items[i] == pe) check = &plt.items[i + 1];
    }
    REQUIRE(check != nullptr);
    CHECK(check->instr.op == ir::Op::CmpImm);
    CHECK(check->instr.imm == sid);
    for (const auto& item : plt.items) CHECK(item.instr.op != ir::Op::SubImm);

    // PLT0 carries the dual-SID split
    const linkage::SectionItem* plt0 = first_labeled(plt, "PLT0");
    REQUIRE(plt0 != nullptr);
    CHECK(plt0->instr.op == ir::Op::Shl); // sid_reg == rax, no bridge mov
}

TEST_CASE("plt0 bridges the scratch register into rax when needed") {
    ir::Program p = import_program(1);
    Image img = link_one(p, PltFormat::FineIbtPlt, IrmVariant::FineIbtBasic, ir::Reg::r11);
    const linkage::Section& plt = *img.find_section(".plt");
    const linkage::SectionItem* plt0 = first_labeled(plt, "PLT0");
    REQUIRE(plt0 != nullptr);
    CHECK(plt0->instr.op == ir::Op::MovReg);
    CHECK(plt0->instr.reg == ir::Reg::rax);
    CHECK(plt0->instr.reg2 == ir::Reg::r11);
}

TEST_CASE("zero-import image has an empty plt family") {
    ir::Program p = ir::parse_program(
        ";fasm v1\n"
        ".program alone\n"
        ".func work sig()->void\n"
        "  ret\n");
    for (PltFormat fmt : {PltFormat::IbtPlt, PltFormat::FineIbtPlt}) {
        Image img = link_one(p, fmt);
        CHECK(img.find_section(".plt") == nullptr);
        CHECK(img.find_section(".plt.sec") == nullptr);
        CHECK(img.find_section(".plt.fineibt") == nullptr);
        CHECK(img.find_section(".plt.atfineibt") == nullptr);
        CHECK(linkage::census(img).endbr_in_plt_family == 0);
    }
}

TEST_CASE("plt landing-pad counts: ibt doubles fineibt") {
    for (size_t n : {1u, 4u, 16u}) {
        ir::Program p = import_program(n, /*address_taken=*/0);
        Image ibt = link_one(p, PltFormat::IbtPlt, IrmVariant::IbtOnly);
        Image fine = link_one(p, PltFormat::FineIbtPlt);
        CHECK(linkage::census(ibt).endbr_in_plt_family == 2 * n);
        CHECK(linkage::census(fine).endbr_in_plt_family == n);
    }
}

TEST_CASE("census counts and classifies landing pads") {
    // 3 address-taken + 2 global-only functions
    ir::Program p = ir::parse_program(
        ";fasm v1\n"
        ".program five\n"
        ".data vt vtable ro at0, at1, at2\n"
        ".func at0 sig()->void\n"
        "  ret\n"
        ".func at1 sig()->void\n"
        "  ret\n"
        ".func at2 sig()->void\n"
        "  ret\n"
        ".func g0 global sig(int32)->void\n"
        "  ret\n"
        ".func g1 global sig(int64)->void\n"
        "  ret\n");
    Image ibt = link_one(p, PltFormat::IbtPlt, IrmVariant::IbtOnly);
    linkage::TargetCensus c1 = linkage::census(ibt);
    CHECK(c1.endbr_in_text == 5);
    CHECK(c1.protected_landing_pads == 0);
    CHECK(c1.unchecked_landing_pads == 5);

    Image fine = link_one(p, PltFormat::FineIbtPlt);
    linkage::TargetCensus c2 = linkage::census(fine);
    CHECK(c2.endbr_in_text == 5);
    CHECK(c2.protected_landing_pads == 5);
    CHECK(c2.unchecked_landing_pads == 0);
    CHECK(c2.total_landing_pads == c2.endbr_in_text + c2.endbr_in_plt_family);
}

TEST_CASE("ibt plt with three imports shows six landing pads") {
    ir::Program p = import_program(3);
    Image img = link_one(p, PltFormat::IbtPlt, IrmVariant::IbtOnly);
    CHECK(linkage::census(img).endbr_in_plt_family == 6);
}

TEST_CASE("every plt-family entry starts on a 16-byte boundary") {
    for (size_t n : {1u, 3u, 7u}) {
        for (size_t at : {0u, 2u}) {
            if (at > n) continue;
            ir::Program p = import_program(n, at);
            for (PltFormat fmt : {PltFormat::IbtPlt, PltFormat::FineIbtPlt}) {
                Image img = link_one(p, fmt,
                                     fmt == PltFormat::IbtPlt ? IrmVariant::IbtOnly
                                                              : IrmVariant::FineIbtBasic);
                for (const auto& [name, sec] : img.sections) {
                    if (name == ".text") continue;
                    for (const auto& item : sec.items) {
                        if (item.labels.empty()) continue;
                        CHECK(item.offset % 16 == 0);
                    }
                }
            }
        }
    }
}

TEST_CASE("sids agree across the fplt/plt/atfplt triple") {
    ir::Program p = import_program(4, /*address_taken=*/2);
    Image img = link_one(p, PltFormat::FineIbtPlt);

    auto sid_at = [&](const std::string& section, const std::string& label) -> policy::Sid {
        const linkage::Section* sec = img.find_section(section);
        REQUIRE(sec != nullptr);
        for (size_t i = 0; i < sec->items.size(); ++i) {
            for (const auto& l : sec->items[i].labels) {
                if (l != label) continue;
                for (size_t k = i; k < sec->items.size(); ++k) {
                    const ir::Instruction& in = sec->items[k].instr;
                    if (in.op == ir::Op::MovImm || in.op == ir::Op::CmpImm ||
                        in.op == ir::Op::SubImm) {
                        return static_cast<policy::Sid>(in.imm);
                    }
                }
            }
        }
        FAIL("no SID instruction under ", label);
        return 0;
    };

    for (const linkage::ImportSlot& imp : img.imports) {
        policy::Sid fplt = sid_at(".plt.fineibt", "FPLT" + std::to_string(imp.fplt_index));
        policy::Sid plt = sid_at(".plt", "PLT" + std::to_string(imp.fplt_index));
        CHECK(fplt == imp.sid);
        CHECK(plt == imp.sid);
        if (imp.atfplt_index) {
            policy::Sid at = sid_at(".plt.atfineibt", "ATFPLT" + std::to_string(*imp.atfplt_index));
            CHECK(at == imp.sid);
        }
    }

    // only the address-taken subset appears in .plt.atfineibt
    size_t at_count = 0;
    for (const auto& imp : img.imports) {
        if (imp.atfplt_index) ++at_count;
    }
    CHECK(at_count == 2);
}

TEST_CASE("compact plt requires full relro") {
    ir::Program p = import_program(2);
    CHECK_FALSE(p.relro_full);
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 1);
    ir::Program woven = weave::instrument(p, a, IrmVariant::FineIbtBasic);
    try {
        linkage::link_image(woven, a, PltFormat::CompactPlt, IrmVariant::FineIbtBasic);
        FAIL("expected RelroRequired");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::RelroRequired);
    }
}

TEST_CASE("compact plt omits .plt and uses bare notrack jumps") {
    ir::Program p = import_program(2, /*address_taken=*/1);
    // flip the relro flag by reparsing with the flag set
    std::string text = ir::print_program(p);
    text.replace(text.find(".program dso2"), 13, ".program dso2 relro_full");
    p = ir::parse_program(text);
    REQUIRE(p.relro_full);

    Image img = link_one(p, PltFormat::CompactPlt);
    CHECK(img.find_section(".plt") == nullptr);
    const linkage::Section* fplt = img.find_section(".plt.fineibt");
    REQUIRE(fplt != nullptr);
    for (const auto& item : fplt->items) {
        CHECK(item.instr.op != ir::Op::MovImm);
        if (item.instr.op == ir::Op::IndirectJmpGot) CHECK(item.instr.notrack);
    }
    // address-taken imports still get checked atfplt entries
    CHECK(img.find_section(".plt.atfineibt") != nullptr);
}

TEST_CASE("missing import classification is a link error") {
    ir::Program p = import_program(1);
    // an assignment built over a DIFFERENT program knows nothing about fsym1
    ir::Program other = ir::parse_program(
        ";fasm v1\n.program other\n.func g global sig()->void\n  ret\n");
    auto a = policy::build_classes(other, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 1);
    try {
        linkage::link_image(p, a, PltFormat::FineIbtPlt, IrmVariant::None);
        FAIL("expected MissingSid");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::MissingSid);
    }
}

TEST_CASE("image json round-trips") {
    ir::Program p = import_program(3, 1);
    Image img = link_one(p, PltFormat::FineIbtPlt);
    img.classes.push_back({0, "type=sig(int64)->int64", 0x1234, {"fsym1"}, 2});
    nlohmann::ordered_json j = img.to_json();
    Image back = Image::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.name == img.name);
    CHECK(back.imports.size() == img.imports.size());
    CHECK(back.nopout_note.size() == img.nopout_note.size());
    CHECK(back.find_section(".plt.fineibt") != nullptr);
}

TEST_CASE("external direct calls are routed through the right slot") {
    ir::Program p = import_program(1);
    Image fine = link_one(p, PltFormat::FineIbtPlt);
    Image ibt = link_one(p, PltFormat::IbtPlt, IrmVariant::IbtOnly);

    auto main_calls = [](const Image& img) {
        std::vector<std::string> out;
        for (const auto& item : img.find_section(".text")->items) {
            if (item.owner == "main" && item.instr.op == ir::Op::DirectCall) {
                out.push_back(item.instr.sym);
            }
        }
        return out;
    };
    auto fine_calls = main_calls(fine);
    REQUIRE(!fine_calls.empty());
    CHECK(fine_calls[0] == "fsym1@FPLT");
    auto ibt_calls = main_calls(ibt);
    REQUIRE(!ibt_calls.empty());
    CHECK(ibt_calls[0] == "fsym1@SPLT");
}

TEST_CASE("nopout note lists global non-address-taken fineibt symbols") {
    ir::Program p = ir::parse_program(
        ";fasm v1\n"
        ".program notes\n"
        ".data vt vtable ro taken\n"
        ".func taken global sig()->void\n"
        "  ret\n"
        ".func free1 global sig(int32)->void\n"
        "  ret\n"
        ".func free2 global sig(int64)->void\n"
        "  ret\n"
        ".func hidden sig(int64,int64)->void\n"
        "  ret\n");
    Image img = link_one(p, PltFormat::FineIbtPlt);
    std::set<std::string> noted;
    for (const auto& e : img.nopout_note) noted.insert(e.symbol);
    CHECK(noted == std::set<std::string>{"free1", "free2"});

    // note offsets hold endbr64 in the pristine image
    const linkage::Section* text = img.find_section(".text");
    for (const auto& e : img.nopout_note) {
        bool found = false;
        for (const auto& item : text->items) {
            if (item.offset == e.text_offset) {
                CHECK(item.instr.op == ir::Op::Endbr64);
                found = true;
            }
        }
        CHECK(found);
    }

    // ibt-only images do not participate
    Image ibt = link_one(p, PltFormat::IbtPlt, IrmVariant::IbtOnly);
    CHECK(ibt.nopout_note.empty());
}

TEST_CASE("census monotonicity between formats") {
    for (uint64_t seed = 600; seed < 610; ++seed) {
        ir::Program p = import_program(1 + seed % 5, seed % 2);
        Image fine = link_one(p, PltFormat::FineIbtPlt);
        Image ibt = link_one(p, PltFormat::IbtPlt, IrmVariant::IbtOnly);
        CHECK(linkage::census(fine).endbr_in_plt_family <=
              linkage::census(ibt).endbr_in_plt_family);
    }

    SUBCASE("equality exactly when every import is address-taken") {
        for (size_t n : {2u, 4u}) {
            ir::Program all_at = import_program(n, n);
            Image fine = link_one(all_at, PltFormat::FineIbtPlt);
            Image ibt = link_one(all_at, PltFormat::IbtPlt, IrmVariant::IbtOnly);
            CHECK(linkage::census(fine).endbr_in_plt_family ==
                  linkage::census(ibt).endbr_in_plt_family);

            ir::Program partial = import_program(n, n - 1);
            Image fine2 = link_one(partial, PltFormat::FineIbtPlt);
            Image ibt2 = link_one(partial, PltFormat::IbtPlt, IrmVariant::IbtOnly);
            CHECK(linkage::census(fine2).endbr_in_plt_family <
                  linkage::census(ibt2).endbr_in_plt_family);
        }
    }
}

TEST_CASE("clang-cfi census reports trampoline slots separately") {
    ir::Program p = ir::parse_program(
        ";fasm v1\n"
        ".program cfic\n"
        ".data fp fnptr_slot rw f0\n"
        ".func main sig()->int64\n"
        "  mov fp(%rip), %rax\n"
        "  call *%rax\n"
        "  exit $0\n"
        ".func f0 global sig(int64)->int64\n"
        "  ret\n"
        ".func f1 global sig(int64)->int64\n"
        "  ret\n");
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 2);
    ir::Program woven = weave::instrument_clang_cfi(p, a);
    Image img = linkage::link_image(woven, a, PltFormat::IbtPlt, IrmVariant::ClangCfiBaseline);
    linkage::TargetCensus c = linkage::census(img);
    CHECK(c.clang_trampoline_slots == 2);
    CHECK(c.endbr_in_text == 0);
}

TEST_CASE("section dump is stable and annotated") {
    ir::Program p = import_program(1);
    Image img = link_one(p, PltFormat::FineIbtPlt);
    std::string dump = img.dump_sections();
    CHECK(dump == img.dump_sections());
    CHECK(dump.find(".plt.fineibt") != std::string::npos);
    CHECK(dump.find("FPLT1:") != std::string::npos);
}
