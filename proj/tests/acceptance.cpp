// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one scored criterion per run line, exact tolerances.
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "test_util.hpp"

using namespace fibt;
using linkage::PltFormat;
using loader::AddressSpace;
using loader::Binding;
using machine::Scenario;
using machine::TrapKind;
using policy::PolicyKind;
using weave::IrmVariant;

namespace {

int g_failures = 0;

#define REQUIRE_TRUE(cond)                                                                 \
    do {                                                                                   \
        if (!(cond)) throw std::runtime_error("requirement failed: " #cond " (line " +     \
                                              std::to_string(__LINE__) + ")");             \
    } while (0)

void criterion(int n, const char* name, const std::function<void()>& body) {
    try {
        body();
        std::printf("PASS  %2d  %s\n", n, name);
    } catch (const std::exception& e) {
        ++g_failures;
        std::printf("FAIL  %2d  %s\n          %s\n", n, name, e.what());
    }
    std::fflush(stdout);
}

Scenario scenario_file(const std::string& name, const Scenario::ImageLoader& loader = nullptr) {
    auto j = nlohmann::ordered_json::parse(
        testutil::read_file(std::string(FIBT_SCENARIO_DIR) + "/" + name));
    return Scenario::from_json(j, loader);
}

testutil::Build sidpair_build(IrmVariant irm) {
    return testutil::build_set({testutil::load_fixture("sidpair.fasm")}, PolicyKind::Arity, irm,
                               PltFormat::FineIbtPlt, ir::Reg::rax, 1,
                               {{"func0", 0xc00010ffu}, {"func1", 0xbaddcafeu}});
}

testutil::Build fixture_build(std::vector<std::string> names,
                              IrmVariant irm = IrmVariant::FineIbtBasic,
                              PltFormat plt = PltFormat::FineIbtPlt) {
    std::vector<ir::Program> programs;
    for (const auto& n : names) programs.push_back(testutil::load_fixture(n));
    return testutil::build_set(std::move(programs), PolicyKind::TypeStrict, irm, plt);
}

void expect_scenario(AddressSpace space, const Scenario& s) {
    machine::ScenarioResult r = machine::run_scenario(std::move(space), s);
    if (!r.passed) {
        throw std::runtime_error("scenario " + s.name + ": got " + r.outcome + ", expected " +
                                 r.expected);
    }
}

ir::Program import_program(size_t n, size_t address_taken = 0) {
    std::ostringstream os;
    os << ";fasm v1\n.program dso" << n << "at" << address_taken << "\n";
    for (size_t i = 0; i < n; ++i) os << ".import fsym" << (i + 1) << " sig(int64)->int64\n";
    os << ".func main global sig()->int64\n";
    for (size_t i = 0; i < n; ++i) os << "  call fsym" << (i + 1) << "\n";
    for (size_t i = 0; i < address_taken; ++i) os << "  mov $fsym" << (i + 1) << ", %ecx\n";
    os << "  exit $0\n";
    return ir::parse_program(os.str());
}

linkage::Image link_single(const ir::Program& p, PltFormat plt, IrmVariant irm,
                           ir::Reg sid_reg = weave::kDefaultSidReg) {
    auto a = policy::build_classes(p, PolicyKind::TypeStrict);
    policy::allocate_sids(a, 21);
    ir::Program woven = weave::instrument(p, a, irm, sid_reg);
    return linkage::link_image(woven, a, plt, irm, sid_reg);
}

// SID instruction reachable from a labeled PLT entry.
std::optional<policy::Sid> entry_sid(const linkage::Image& img, const std::string& section,
                                     const std::string& label) {
    const linkage::Section* sec = img.find_section(section);
    if (!sec) return std::nullopt;
    bool in_entry = false;
    for (const auto& item : sec->items) {
        for (const auto& l : item.labels) {
            if (l == label) in_entry = true;
        }
        if (!in_entry) continue;
        if (item.instr.op == ir::Op::MovImm || item.instr.op == ir::Op::CmpImm ||
            item.instr.op == ir::Op::SubImm) {
            return static_cast<policy::Sid>(item.instr.imm);
        }
    }
    return std::nullopt;
}

void check_plt_structure(const linkage::Image& img) {
    for (const auto& [name, sec] : img.sections) {
        if (name == ".text") continue;
        for (const auto& item : sec.items) {
            if (!item.labels.empty()) REQUIRE_TRUE(item.offset % 16 == 0);
        }
    }
    for (const auto& imp : img.imports) {
        if (img.plt == PltFormat::IbtPlt) continue;
        if (img.plt == PltFormat::FineIbtPlt) {
            auto f = entry_sid(img, ".plt.fineibt", "FPLT" + std::to_string(imp.fplt_index));
            auto p = entry_sid(img, ".plt", "PLT" + std::to_string(imp.fplt_index));
            REQUIRE_TRUE(f.has_value() && *f == imp.sid);
            REQUIRE_TRUE(p.has_value() && *p == imp.sid);
        }
        if (imp.atfplt_index) {
            auto at =
                entry_sid(img, ".plt.atfineibt", "ATFPLT" + std::to_string(*imp.atfplt_index));
            REQUIRE_TRUE(at.has_value() && *at == imp.sid);
        }
    }
}

} // namespace

int main() {
    criterion(1, "Reference IRM reproduction: pinned SIDs, attack and mid-function traps", [] {
        testutil::Build b = sidpair_build(IrmVariant::FineIbtBasic);
        std::string printed = ir::print_program(
            weave::instrument(b.programs[0], b.assignment, IrmVariant::FineIbtBasic, ir::Reg::rax));
        REQUIRE_TRUE(printed ==
                     testutil::read_file(testutil::fixture_path("sidpair.golden.fasm")));

        AddressSpace space = loader::load(b.images, Binding::Eager, false, 2);
        machine::Trace legit = machine::run(space, "main");
        REQUIRE_TRUE(legit.completed && legit.exit_code == 0);

        AddressSpace s2 = loader::load(b.images, Binding::Eager, false, 2);
        machine::ScenarioResult swap =
            machine::run_scenario(s2, scenario_file("sidpair_fnptr_swap.json"));
        REQUIRE_TRUE(swap.passed);
        REQUIRE_TRUE(swap.trace.trap->current_function == "func1");

        AddressSpace s3 = loader::load(b.images, Binding::Eager, false, 2);
        machine::ScenarioResult mid =
            machine::run_scenario(s3, scenario_file("sidpair_midfunc.json"));
        REQUIRE_TRUE(mid.passed);
    });

    criterion(2, "Coldpath variant: sub+jne shape, chk-fail handler trap, golden text", [] {
        testutil::Build b = sidpair_build(IrmVariant::FineIbtColdpath);
        ir::Program woven = weave::instrument(b.programs[0], b.assignment,
                                              IrmVariant::FineIbtColdpath, ir::Reg::rax);
        REQUIRE_TRUE(ir::print_program(woven) ==
                     testutil::read_file(testutil::fixture_path("sidpair_coldpath.golden.fasm")));

        const ir::Function* f0 = woven.find_function("func0");
        REQUIRE_TRUE(f0 && f0->entry_index == 1);
        REQUIRE_TRUE(f0->instrs[0].op == ir::Op::DirectCall); // coldpath above the entry
        REQUIRE_TRUE(f0->instrs[2].op == ir::Op::SubImm);
        REQUIRE_TRUE(f0->instrs[3].op == ir::Op::CondBranch &&
                     f0->instrs[3].cond == ir::Cond::Ne);

        AddressSpace space = loader::load(b.images, Binding::Eager, false, 2);
        machine::Trace legit = machine::run(space, "main");
        REQUIRE_TRUE(legit.completed);

        AddressSpace s2 = loader::load(b.images, Binding::Eager, false, 2);
        Scenario swap = scenario_file("sidpair_fnptr_swap.json");
        swap.expected.trap = TrapKind::ChkFailHandler;
        machine::ScenarioResult r = machine::run_scenario(s2, swap);
        REQUIRE_TRUE(r.passed);
    });

    criterion(3, "Size arithmetic exact on 50 random programs (5/12 fineibt, 4 ibt)", [] {
        for (uint64_t seed = 1000; seed < 1050; ++seed) {
            testutil::GenOptions opts;
            opts.functions = 2 + seed % 9;
            opts.callsites = seed % 7;
            ir::Program p = testutil::random_program(seed, opts);
            auto a = policy::build_classes(p, PolicyKind::Arity);
            policy::allocate_sids(a, seed);

            size_t sites = 0;
            for (const auto& f : p.functions) sites += policy::indirect_callsites(f).size();
            size_t callees = 0;
            for (const auto& f : p.functions) {
                if (weave::is_protected(f)) ++callees;
            }

            weave::SizeReport fine =
                weave::size_report(p, weave::instrument(p, a, IrmVariant::FineIbtBasic));
            REQUIRE_TRUE(fine.delta() == 5 * sites + 12 * callees);

            weave::SizeReport ibt =
                weave::size_report(p, weave::instrument(p, a, IrmVariant::IbtOnly));
            REQUIRE_TRUE(ibt.delta() == 4 * callees);
        }
    });

    criterion(4, "PLT factor-2: landing pads 2n (IBT) vs n (FineIBT) for n in {1,4,16}", [] {
        for (size_t n : {1u, 4u, 16u}) {
            ir::Program p = import_program(n, 0);
            linkage::Image ibt = link_single(p, PltFormat::IbtPlt, IrmVariant::IbtOnly);
            linkage::Image fine = link_single(p, PltFormat::FineIbtPlt, IrmVariant::FineIbtBasic);
            REQUIRE_TRUE(linkage::census(ibt).endbr_in_plt_family == 2 * n);
            REQUIRE_TRUE(linkage::census(fine).endbr_in_plt_family == n);
        }
    });

    criterion(5, "PLT structure: SID triples agree, every slot 16-byte aligned", [] {
        for (size_t n : {1u, 3u, 6u}) {
            for (size_t at : {0u, 1u, 3u}) {
                if (at > n) continue;
                ir::Program p = import_program(n, at);
                check_plt_structure(link_single(p, PltFormat::FineIbtPlt, IrmVariant::FineIbtBasic));
                check_plt_structure(link_single(p, PltFormat::IbtPlt, IrmVariant::IbtOnly));
            }
        }
        for (uint64_t seed = 1100; seed < 1110; ++seed) {
            auto programs = testutil::random_linked_set(seed);
            testutil::Build b = testutil::build_set(std::move(programs), PolicyKind::TypeStrict,
                                                    IrmVariant::FineIbtBasic, PltFormat::FineIbtPlt);
            for (const auto& img : b.images) check_plt_structure(img);
        }
    });

    criterion(6, "Lazy dual-SID: resolver via PLT0 once, corrupted SID trapped in PLT", [] {
        testutil::Build b = fixture_build({"dynapp.fasm", "dynlib.fasm"});
        AddressSpace space = loader::load(b.images, Binding::Lazy, false, 4);
        machine::Trace t = machine::run(space, "main");
        REQUIRE_TRUE(t.completed && t.exit_code == 0);

        size_t plt0 = 0;
        std::vector<size_t> landings;
        for (size_t i = 0; i < t.steps.size(); ++i) {
            if (t.steps[i].location.find(":PLT0+") != std::string::npos &&
                t.steps[i].instr_text.rfind("shl", 0) == 0) {
                ++plt0;
            }
            if (t.steps[i].instr_text == "endbr64" &&
                t.steps[i].location.find(":lib_fn+") != std::string::npos) {
                landings.push_back(i);
            }
        }
        REQUIRE_TRUE(plt0 == 1);
        REQUIRE_TRUE(landings.size() == 2);
        auto window = [&](size_t idx) {
            size_t start = idx;
            while (start > 0 && t.steps[start].location.find("FPLT1") == std::string::npos) {
                --start;
            }
            return idx - start;
        };
        REQUIRE_TRUE(window(landings[1]) < window(landings[0]));

        // wrong-class SID cannot get past the .plt slot
        std::vector<ir::Program> programs;
        programs.push_back(ir::parse_program(
            ";fasm v1\n"
            ".program sidapp\n"
            ".import lib_fn sig(int64)->int64\n"
            ".data fp fnptr_slot rw wrongclass\n"
            ".func wrongclass global sig()->void\n"
            "  ret\n"
            ".func main global sig()->int64\n"
            "  call lib_fn\n"
            "  mov fp(%rip), %rcx\n"
            "  call *%rcx\n"
            "  exit $0\n"));
        programs.push_back(testutil::load_fixture("dynlib.fasm"));
        testutil::Build sb = testutil::build_set(std::move(programs), PolicyKind::TypeStrict,
                                                 IrmVariant::FineIbtBasic, PltFormat::FineIbtPlt);
        AddressSpace lazy = loader::load(sb.images, Binding::Lazy, false, 4);
        Scenario s;
        s.name = "plt_sid_corruption";
        s.entry = "main";
        machine::Mutation m;
        m.kind = machine::Mutation::Kind::SetFnptr;
        m.object = "fp";
        m.target = "PLT1";
        s.mutations.push_back(m);
        s.expected.kind = machine::Expected::Kind::Traps;
        s.expected.trap = TrapKind::SidMismatchHlt;
        machine::ScenarioResult r = machine::run_scenario(lazy, s);
        REQUIRE_TRUE(r.passed);
        REQUIRE_TRUE(r.trace.trap->current_function == "PLT1"); // never reached lib_fn
    });

    criterion(7, "Compact PLT: entry-alias GOT, no .plt, notrack, zero PLT SID checks", [] {
        ir::Program lib = ir::parse_program(
            ";fasm v1\n"
            ".program clib relro_full\n"
            ".func c0 global sig()->int64\n"
            "  ret\n");
        ir::Program app = ir::parse_program(
            ";fasm v1\n"
            ".program capp relro_full\n"
            ".import c0 sig()->int64\n"
            ".func main global sig()->int64\n"
            "  call c0\n"
            "  exit $0\n");
        std::vector<ir::Program> programs;
        programs.push_back(std::move(app));
        programs.push_back(std::move(lib));
        testutil::Build b = testutil::build_set(std::move(programs), PolicyKind::TypeStrict,
                                                IrmVariant::FineIbtBasic, PltFormat::CompactPlt);

        const linkage::Image& capp = b.images[0];
        REQUIRE_TRUE(capp.find_section(".plt") == nullptr);
        const linkage::Section* fplt = capp.find_section(".plt.fineibt");
        REQUIRE_TRUE(fplt != nullptr);
        for (const auto& item : fplt->items) {
            REQUIRE_TRUE(item.instr.op != ir::Op::MovImm);
            if (item.instr.op == ir::Op::IndirectJmpGot) REQUIRE_TRUE(item.instr.notrack);
        }

        AddressSpace space = loader::load(b.images, Binding::Eager, false, 5);
        for (const auto& slot : space.find_image("capp")->got) {
            if (slot.state == loader::GotSlot::State::Resolved) {
                REQUIRE_TRUE(slot.entry_alias);
                REQUIRE_TRUE(slot.target_symbol == "c0_entry");
            }
        }

        machine::Trace t = machine::run(space, "main");
        REQUIRE_TRUE(t.completed);
        for (const auto& step : t.steps) {
            if (step.location.find(":FPLT") == std::string::npos &&
                step.location.find(":PLT") == std::string::npos &&
                step.location.find(":ATFPLT") == std::string::npos) {
                continue;
            }
            REQUIRE_TRUE(step.instr_text.rfind("mov $", 0) != 0);
            REQUIRE_TRUE(step.instr_text.rfind("cmp", 0) != 0);
            REQUIRE_TRUE(step.instr_text.rfind("sub", 0) != 0);
        }
    });

    criterion(8, "NOPout soundness: elided == eligible-and-unlinked on 20 random spaces", [] {
        for (uint64_t seed = 1200; seed < 1220; ++seed) {
            auto programs = testutil::random_linked_set(seed);
            testutil::Build b = testutil::build_set(std::move(programs), PolicyKind::TypeStrict,
                                                    IrmVariant::FineIbtBasic, PltFormat::FineIbtPlt);
            AddressSpace space = loader::load(b.images, Binding::Eager, true, seed);
            REQUIRE_TRUE(testutil::elided_now(space) == testutil::nopout_oracle(space));

            std::set<uint64_t> pages;
            for (const auto& e : space.nopout_log) {
                size_t idx = space.image_index(e.image);
                const auto& li = space.loaded[idx];
                pages.insert(
                    (li.base + li.image.find_section(".text")->base + e.text_offset) / 4096);
            }
            REQUIRE_TRUE(space.cow_pages() == pages.size());
            std::string table = loader::nopout_table(space);
            REQUIRE_TRUE(table.find(std::to_string(pages.size() * 4)) != std::string::npos);
        }
    });

    criterion(9, "Re-patch safety: dlsym restores and runs; tampering never swaps a page", [] {
        testutil::Build b = fixture_build({"rtapp.fasm", "rtlib.fasm"});
        AddressSpace space = loader::load(b.images, Binding::Eager, true, 12);
        REQUIRE_TRUE(testutil::elided_now(space).count({"rtlib", "rt_fn"}));

        Scenario s;
        s.name = "dlsym_restore";
        s.entry = "main";
        machine::Mutation m;
        m.kind = machine::Mutation::Kind::DlsymStore;
        m.symbol = "rt_fn";
        m.object = "target";
        s.mutations.push_back(m);
        s.expected.kind = machine::Expected::Kind::Completes;
        s.expected.exit_code = 0;
        REQUIRE_TRUE(machine::run_scenario(space, s).passed);

        // fault injection
        AddressSpace tampered = loader::load(b.images, Binding::Eager, true, 12);
        loader::LoadedImage* lib = tampered.find_image("rtlib");
        uint64_t note_off = lib->image.nopout_note.at(0).text_offset;
        uint64_t text_base = lib->image.find_section(".text")->base;
        lib->bytes[text_base + note_off + 6] ^= 0x5A;
        bool caught = false;
        try {
            loader::restore_endbr(tampered, "rtlib", "rt_fn");
        } catch (const Error& e) {
            caught = e.code() == Errc::TamperDetected;
        }
        REQUIRE_TRUE(caught);
        REQUIRE_TRUE(testutil::elided_now(tampered).count({"rtlib", "rt_fn"}));
    });

    criterion(10, "Exhaustive soundness/completeness over all (callsite,target) pairs", [] {
        for (PolicyKind kind : {PolicyKind::TypeStrict, PolicyKind::Arity}) {
            for (uint64_t seed = 1300; seed < 1306; ++seed) {
                testutil::GenOptions opts;
                opts.functions = 4 + seed % 13; // up to 16
                opts.callsites = 1 + seed % 8;  // up to 8
                opts.all_protected = true;
                opts.slot_callsites = true;
                ir::Program generated = testutil::random_program(seed, opts);

                testutil::Build b = testutil::build_set({std::move(generated)}, kind,
                                                        IrmVariant::FineIbtBasic,
                                                        PltFormat::FineIbtPlt);
                const ir::Program& p = b.programs[0];
                AddressSpace base_space = loader::load(b.images, Binding::Eager, false, seed);

                for (size_t c = 0; c < opts.callsites; ++c) {
                    std::string slot = "fp" + std::to_string(c);
                    const ir::DataObject* obj = p.find_data(slot);
                    REQUIRE_TRUE(obj != nullptr);
                    const ir::Function* baseline = p.find_function(obj->entries[0].sym);

                    for (const ir::Function& target : p.functions) {
                        if (target.name == "main") continue;
                        bool same_class;
                        if (kind == PolicyKind::TypeStrict) {
                            same_class = target.signature == baseline->signature;
                        } else {
                            same_class =
                                target.signature.arity() == baseline->signature.arity() &&
                                target.signature.variadic == baseline->signature.variadic;
                        }
                        Scenario s;
                        s.name = "exhaust";
                        s.entry = "main";
                        machine::Mutation m;
                        m.kind = machine::Mutation::Kind::SetFnptr;
                        m.object = slot;
                        m.target = target.name;
                        s.mutations.push_back(m);
                        if (same_class) {
                            s.expected.kind = machine::Expected::Kind::Completes;
                            s.expected.exit_code = 0;
                        } else {
                            s.expected.kind = machine::Expected::Kind::Traps;
                            s.expected.trap = TrapKind::SidMismatchHlt;
                        }
                        machine::ScenarioResult r = machine::run_scenario(base_space, s);
                        if (!r.passed) {
                            throw std::runtime_error(
                                "seed " + std::to_string(seed) + " slot " + slot + " target " +
                                target.name + ": got " + r.outcome + ", expected " + r.expected);
                        }
                    }
                }
            }
        }
    });

    criterion(11, "Policy refinement chain and pairwise oracle on 100 random programs", [] {
        for (uint64_t seed = 1400; seed < 1500; ++seed) {
            ir::Program p = testutil::random_program(seed);
            auto vanilla = policy::build_classes(p, PolicyKind::VanillaIbt);
            auto arity = policy::build_classes(p, PolicyKind::Arity);
            auto strict = policy::build_classes(p, PolicyKind::TypeStrict);

            auto refines = [](const policy::SidAssignment& fine,
                              const policy::SidAssignment& coarse) {
                for (const auto& c : fine.classes) {
                    std::set<size_t> parents;
                    for (const auto& m : c.members) {
                        auto id = coarse.class_of_function(m);
                        REQUIRE_TRUE(id.has_value());
                        parents.insert(*id);
                    }
                    REQUIRE_TRUE(c.members.empty() || parents.size() == 1);
                }
            };
            refines(strict, arity);
            refines(arity, vanilla);

            for (PolicyKind kind : {PolicyKind::Arity, PolicyKind::TypeStrict}) {
                const auto& a = kind == PolicyKind::Arity ? arity : strict;
                auto oracle = testutil::pairwise_class_oracle(p, kind);
                size_t nonempty = 0;
                for (const auto& c : a.classes) {
                    if (!c.members.empty()) ++nonempty;
                }
                REQUIRE_TRUE(nonempty == oracle.size());
                for (const auto& cls : oracle) {
                    auto id = a.class_of_function(cls[0]);
                    REQUIRE_TRUE(id.has_value());
                    for (const auto& m : cls) REQUIRE_TRUE(a.class_of_function(m) == id);
                }
            }
        }
    });

    criterion(12, "Clang-CFI baseline: 8-byte aligned slots, range check, 21-byte IRM", [] {
        ir::Program p = ir::parse_program(
            ";fasm v1\n"
            ".program cfi\n"
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
        linkage::Image img =
            linkage::link_image(woven, a, PltFormat::IbtPlt, IrmVariant::ClangCfiBaseline);
        img.size = weave::size_report(p, woven);

        // slots are 8 bytes, 8-byte aligned, contiguous per class
        const linkage::Section* text = img.find_section(".text");
        uint64_t f0_off = img.symbols.at("f0").offset;
        uint64_t f1_off = img.symbols.at("f1").offset;
        REQUIRE_TRUE(f0_off % 8 == 0);
        REQUIRE_TRUE(f1_off == f0_off + 8);
        (void)text;
        REQUIRE_TRUE(img.size.trampoline_bytes == 16);
        REQUIRE_TRUE(img.size.caller_irm_bytes == 21);

        AddressSpace space = loader::load({img}, Binding::Eager, false, 8);
        machine::Trace ok = machine::run(space, "main");
        REQUIRE_TRUE(ok.completed);

        AddressSpace s2 = loader::load({img}, Binding::Eager, false, 8);
        Scenario s;
        s.name = "cfi_bypass";
        s.entry = "main";
        machine::Mutation m;
        m.kind = machine::Mutation::Kind::SetFnptr;
        m.object = "fp";
        m.target = "f0.cfi";
        s.mutations.push_back(m);
        s.expected.kind = machine::Expected::Kind::Traps;
        s.expected.trap = TrapKind::ClangCfiRangeUd2;
        REQUIRE_TRUE(machine::run_scenario(s2, s).passed);
    });

    criterion(13, "BTI emitter: 0x3a0000 lines verbatim, non-encodable SIDs rejected", [] {
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
        REQUIRE_TRUE(text.find("movz w9, #0x3a, lsl #16") != std::string::npos);
        REQUIRE_TRUE(text.find("subs w9, w9, #0x3a0, lsl #12") != std::string::npos);
        REQUIRE_TRUE(text.find("bne .func_finebti_coldpath") != std::string::npos);
        REQUIRE_TRUE(text.find("bti c") != std::string::npos);

        policy::allocate_sids(a, 1, {{"func", 0xc00010ffu}});
        bool rejected = false;
        try {
            weave::emit_bti_text(p, a);
        } catch (const Error& e) {
            rejected = e.code() == Errc::SidNotEncodable;
        }
        REQUIRE_TRUE(rejected);
    });

    criterion(14, "Feature scenarios: all nine rows produce their expected outcome", [] {
        // callback
        {
            testutil::Build b = fixture_build({"callback_app.fasm", "callback_lib.fasm"});
            expect_scenario(loader::load(b.images, Binding::Eager, false, 31),
                            scenario_file("callback.json"));
        }
        // fptr
        {
            testutil::Build b = sidpair_build(IrmVariant::FineIbtBasic);
            expect_scenario(loader::load(b.images, Binding::Eager, false, 32),
                            scenario_file("fptr.json"));
        }
        // tail_call
        {
            testutil::Build b = fixture_build({"tailcall.fasm"});
            expect_scenario(loader::load(b.images, Binding::Eager, false, 33),
                            scenario_file("tail_call.json"));
        }
        // switch
        {
            testutil::Build b = fixture_build({"switchcase.fasm"});
            expect_scenario(loader::load(b.images, Binding::Eager, false, 34),
                            scenario_file("switch.json"));
        }
        // load_time_dynlnk (eager) and the same pair under lazy binding
        {
            testutil::Build b = fixture_build({"dynapp.fasm", "dynlib.fasm"});
            expect_scenario(loader::load(b.images, Binding::Eager, false, 35),
                            scenario_file("load_time_dynlnk.json"));
            expect_scenario(loader::load(b.images, Binding::Lazy, false, 35),
                            scenario_file("load_time_dynlnk.json"));
        }
        // run_time_dynlnk
        {
            testutil::Build b = fixture_build({"rtapp.fasm", "rtlib.fasm"});
            AddressSpace space = loader::load({b.images[0]}, Binding::Eager, true, 36);
            Scenario s = scenario_file("run_time_dynlnk.json", [&](const std::string& name) {
                if (name != "rtlib") throw Error(Errc::Io, "unexpected image " + name);
                return b.images[1];
            });
            expect_scenario(std::move(space), s);
        }
        // vtbl_call
        {
            testutil::Build b = fixture_build({"vtbl.fasm"});
            expect_scenario(loader::load(b.images, Binding::Eager, false, 37),
                            scenario_file("vtbl_call.json"));
        }
        // unmatched_pair (shadow stack on)
        {
            testutil::Build b = fixture_build({"retcase.fasm"});
            expect_scenario(loader::load(b.images, Binding::Eager, false, 38),
                            scenario_file("unmatched_pair.json"));
        }
        // ret: protected with the shadow stack, attack lands without it
        {
            testutil::Build b = fixture_build({"retcase.fasm"});
            expect_scenario(loader::load(b.images, Binding::Eager, false, 39),
                            scenario_file("ret_shadow.json"));
            expect_scenario(loader::load(b.images, Binding::Eager, false, 39),
                            scenario_file("ret_noshadow.json"));
        }
    });

    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
        return 0;
    }
    std::printf("acceptance: %d criterion(s) FAILED\n", g_failures);
    return 1;
}
