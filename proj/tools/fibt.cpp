// SPDX-License-Identifier: Apache-2.0
//
// fibt: build, load, run, and report on FineIBT-instrumented programs.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "fibt/ir.hpp"
#include "fibt/linkage.hpp"
#include "fibt/loader.hpp"
#include "fibt/machine.hpp"
#include "fibt/policy.hpp"
#include "fibt/weave.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw fibt::Error(fibt::Errc::Io, "cannot open '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw fibt::Error(fibt::Errc::Io, "cannot write '" + path + "'");
    out << content;
}

ordered_json read_json(const std::string& path) {
    return ordered_json::parse(read_file(path));
}

struct PolicyFlags {
    std::string policy = "type-strict";
    std::string mlta_pairs_path;
    std::string overrides_path;
    uint64_t sid_seed = 1;

    void attach(CLI::App* cmd) {
        cmd->add_option("--policy", policy, "vanilla-ibt | arity | type-strict | mlta")
            ->capture_default_str();
        cmd->add_option("--mlta-pairs", mlta_pairs_path, "caller/callsite/callee triples");
        cmd->add_option("--sid-overrides", overrides_path, "symbol<TAB>0xSID pins");
        cmd->add_option("--sid-seed", sid_seed, "SID allocator seed")->capture_default_str();
    }

    fibt::policy::PolicyKind kind() const {
        auto k = fibt::policy::policy_from_name(policy);
        if (!k) throw fibt::Error(fibt::Errc::BadConfig, "unknown policy '" + policy + "'");
        return *k;
    }

    uint64_t seed() const {
        if (const char* env = std::getenv("FINEIBT_SEED")) {
            return std::strtoull(env, nullptr, 0);
        }
        return sid_seed;
    }

    fibt::policy::SidAssignment assign(std::span<const fibt::ir::Program> programs) const {
        fibt::policy::MltaPairs pairs;
        const fibt::policy::MltaPairs* pairs_ptr = nullptr;
        if (!mlta_pairs_path.empty()) {
            pairs = fibt::policy::MltaPairs::parse(read_file(mlta_pairs_path));
            pairs_ptr = &pairs;
        }
        auto a = fibt::policy::build_classes(programs, kind(), pairs_ptr);
        std::map<std::string, fibt::policy::Sid> overrides;
        if (!overrides_path.empty()) {
            overrides = fibt::policy::parse_sid_overrides(read_file(overrides_path));
        }
        fibt::policy::allocate_sids(a, seed(), overrides);
        return a;
    }
};

std::vector<fibt::linkage::ClassSummary> class_summaries(const fibt::policy::SidAssignment& a) {
    std::vector<fibt::linkage::ClassSummary> out;
    for (const auto& c : a.classes) {
        fibt::linkage::ClassSummary s;
        s.id = c.id;
        s.key = c.key;
        s.sid = a.class_to_sid.at(c.id);
        s.members = c.members;
        s.callsites = c.callsites.size();
        out.push_back(std::move(s));
    }
    return out;
}

int cmd_build(const std::vector<std::string>& inputs, const std::string& output,
              const PolicyFlags& pf, const std::string& irm_name, const std::string& plt_name_,
              const std::string& sid_reg_name, bool emit_fasm) {
    auto irm = fibt::weave::irm_from_name(irm_name);
    if (!irm) throw fibt::Error(fibt::Errc::BadConfig, "unknown irm variant '" + irm_name + "'");
    auto plt = fibt::linkage::plt_from_name(plt_name_);
    if (!plt) throw fibt::Error(fibt::Errc::BadConfig, "unknown plt format '" + plt_name_ + "'");
    auto sid_reg = fibt::ir::reg_from_name(sid_reg_name);
    if (!sid_reg) throw fibt::Error(fibt::Errc::BadConfig, "unknown register '" + sid_reg_name + "'");
    if (*irm == fibt::weave::IrmVariant::ClangCfiBaseline &&
        *plt != fibt::linkage::PltFormat::IbtPlt) {
        throw fibt::Error(fibt::Errc::BadConfig, "clang-cfi builds use --plt ibt");
    }

    std::vector<fibt::ir::Program> programs;
    for (const std::string& path : inputs) {
        programs.push_back(fibt::ir::parse_program(read_file(path)));
    }

    auto assignment = pf.assign(programs);

    fs::create_directories(output);
    for (const fibt::ir::Program& p : programs) {
        fibt::ir::Program woven = fibt::weave::instrument(p, assignment, *irm, *sid_reg);
        fibt::linkage::Image img =
            fibt::linkage::link_image(woven, assignment, *plt, *irm, *sid_reg);
        img.size = fibt::weave::size_report(p, woven);
        img.classes = class_summaries(assignment);

        fs::path base = fs::path(output) / (p.name + ".image.json");
        write_file(base.string(), img.to_json().dump(2) + "\n");
        fs::path sidecar = fs::path(output) / (p.name + ".size.txt");
        write_file(sidecar.string(), img.size.to_table());
        if (emit_fasm) {
            fs::path fasm = fs::path(output) / (p.name + ".fasm");
            write_file(fasm.string(), fibt::ir::print_program(woven));
        }
        std::cout << base.string() << "\n";
    }
    return 0;
}

int cmd_load(const std::vector<std::string>& inputs, const std::string& output,
             const std::string& binding_name_, bool nopout, uint64_t base_seed) {
    auto binding = fibt::loader::binding_from_name(binding_name_);
    if (!binding) throw fibt::Error(fibt::Errc::BadConfig, "unknown binding '" + binding_name_ + "'");

    std::vector<fibt::linkage::Image> images;
    for (const std::string& path : inputs) {
        images.push_back(fibt::linkage::Image::from_json(read_json(path)));
    }
    fibt::loader::AddressSpace space =
        fibt::loader::load(std::move(images), *binding, nopout, base_seed);
    write_file(output, space.to_json().dump(2) + "\n");
    std::cout << output << "\n";
    return 0;
}

int cmd_run(const std::string& space_path, const std::string& entry,
            const std::string& scenario_path, bool shadow_stack, uint64_t step_limit,
            bool print_trace) {
    fibt::loader::AddressSpace space =
        fibt::loader::AddressSpace::from_json(read_json(space_path));

    if (!scenario_path.empty()) {
        auto load_image = [&](const std::string& path) {
            return fibt::linkage::Image::from_json(read_json(path));
        };
        fibt::machine::Scenario scenario =
            fibt::machine::Scenario::from_json(read_json(scenario_path), load_image);
        fibt::machine::ScenarioResult result =
            fibt::machine::run_scenario(space, scenario, step_limit);
        if (print_trace) std::cout << result.trace.to_text();
        std::cout << "scenario " << scenario.name << ": "
                  << (result.passed ? "pass" : "FAIL") << " (" << result.outcome << ", expected "
                  << result.expected << ")\n";
        if (result.trace.trap) {
            std::cerr << "trap: " << fibt::machine::trap_name(result.trace.trap->kind) << "\n";
        }
        return result.passed ? 0 : 1;
    }

    fibt::machine::RunOptions options;
    options.shadow_stack = shadow_stack;
    options.step_limit = step_limit;
    fibt::machine::Trace trace = fibt::machine::run(space, entry, options);
    std::cout << trace.to_text();
    if (trace.completed) return 0;
    if (trace.trap) std::cerr << "trap: " << fibt::machine::trap_name(trace.trap->kind) << "\n";
    return 1;
}

int cmd_report(const std::string& input, const std::string& stats) {
    ordered_json j = read_json(input);
    std::string format = j.value("format", "");
    if (format == "fibt-image v1") {
        fibt::linkage::Image img = fibt::linkage::Image::from_json(j);
        if (stats == "size") {
            std::cout << img.size.to_table();
        } else if (stats == "targets") {
            std::cout << fibt::linkage::census(img).to_table();
        } else if (stats == "classes") {
            for (const auto& c : img.classes) {
                std::ostringstream sid;
                sid << std::hex << c.sid;
                std::cout << "#" << c.id << " sid=0x" << sid.str() << " [" << c.key << "]";
                for (const auto& m : c.members) std::cout << " " << m;
                std::cout << " (callsites: " << c.callsites << ")\n";
            }
        } else if (stats == "nopout") {
            std::cout << "note entries: " << img.nopout_note.size() << " (image not loaded)\n";
        } else {
            throw fibt::Error(fibt::Errc::BadConfig, "unknown --stats '" + stats + "'");
        }
        return 0;
    }
    if (format == "fibt-space v1") {
        fibt::loader::AddressSpace space = fibt::loader::AddressSpace::from_json(j);
        if (stats == "targets") {
            std::cout << fibt::loader::census(space).to_table();
        } else if (stats == "nopout") {
            std::cout << fibt::loader::nopout_table(space);
        } else if (stats == "size") {
            for (const auto& li : space.loaded) {
                std::cout << "== " << li.image.name << "\n" << li.image.size.to_table() << "\n";
            }
        } else {
            throw fibt::Error(fibt::Errc::BadConfig, "unknown --stats '" + stats + "'");
        }
        return 0;
    }
    throw fibt::Error(fibt::Errc::BadConfig, "unrecognized document format in " + input);
}

int cmd_emit_bti(const std::string& input, const std::string& output, const PolicyFlags& pf) {
    fibt::ir::Program p = fibt::ir::parse_program(read_file(input));
    auto assignment = pf.assign({&p, 1});
    std::string text = fibt::weave::emit_bti_text(p, assignment);
    if (output.empty()) {
        std::cout << text;
    } else {
        write_file(output, text);
    }
    return 0;
}

int cmd_explain(const std::string& input, const std::string& symbol, const PolicyFlags& pf) {
    fibt::ir::Program p = fibt::ir::parse_program(read_file(input));
    auto assignment = pf.assign({&p, 1});
    std::cout << fibt::policy::explain_class(assignment, symbol);
    return 0;
}

int cmd_dump(const std::string& input) {
    ordered_json j = read_json(input);
    std::string format = j.value("format", "");
    if (format == "fibt-image v1") {
        std::cout << fibt::linkage::Image::from_json(j).dump_sections();
        return 0;
    }
    if (format == "fibt-space v1") {
        std::cout << fibt::loader::AddressSpace::from_json(j).dump();
        return 0;
    }
    throw fibt::Error(fibt::Errc::BadConfig, "unrecognized document format in " + input);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"FineIBT instrumentation toolchain and execution simulator"};
    app.require_subcommand(1);

    // build
    auto* build = app.add_subcommand("build", "instrument .fasm inputs and link images");
    std::vector<std::string> build_inputs;
    std::string build_output = "out";
    PolicyFlags build_policy;
    std::string build_irm = "fineibt";
    std::string build_plt = "fineibt";
    std::string build_sid_reg = "r11";
    build->add_option("inputs", build_inputs, ".fasm files")->required()->expected(-1);
    build->add_option("-o,--output", build_output, "output directory")->capture_default_str();
    build_policy.attach(build);
    build->add_option("--irm", build_irm, "none | ibt | fineibt | fineibt-coldpath | clang-cfi")
        ->capture_default_str();
    build->add_option("--plt", build_plt, "ibt | fineibt | compact")->capture_default_str();
    build->add_option("--sid-reg", build_sid_reg, "SID scratch register")->capture_default_str();
    bool build_emit_fasm = false;
    build->add_flag("--emit-fasm", build_emit_fasm, "also write the instrumented .fasm text");

    // load
    auto* load = app.add_subcommand("load", "assemble images into an address space");
    std::vector<std::string> load_inputs;
    std::string load_output = "space.json";
    std::string load_binding = "eager";
    bool load_nopout = false;
    uint64_t load_base_seed = 7;
    load->add_option("images", load_inputs, "image.json files")->required()->expected(-1);
    load->add_option("-o,--output", load_output, "space snapshot path")->capture_default_str();
    load->add_option("--binding", load_binding, "eager | lazy")->capture_default_str();
    load->add_flag("--nopout", load_nopout, "elide unlinked endbr prologues");
    load->add_option("--base-seed", load_base_seed, "base address seed")->capture_default_str();

    // run
    auto* run = app.add_subcommand("run", "execute an address space");
    std::string run_space;
    std::string run_entry = "main";
    std::string run_scenario_path;
    bool run_shadow = false;
    bool run_trace = true;
    uint64_t run_step_limit = 10'000'000;
    run->add_option("space", run_space, "space snapshot")->required();
    run->add_option("--entry", run_entry, "entry symbol")->capture_default_str();
    run->add_option("--scenario", run_scenario_path, "scenario file");
    run->add_flag("--shadow-stack", run_shadow, "enable the CET shadow stack");
    run->add_flag("--trace,!--no-trace", run_trace, "print the execution trace");
    run->add_option("--step-limit", run_step_limit, "instruction budget")->capture_default_str();

    // report
    auto* report = app.add_subcommand("report", "print tables about an image or space");
    std::string report_input;
    std::string report_stats = "targets";
    report->add_option("input", report_input, "image.json or space.json")->required();
    report->add_option("--stats", report_stats, "size | targets | classes | nopout")
        ->capture_default_str();

    // emit-bti
    auto* bti = app.add_subcommand("emit-bti", "emit the A64 BTI listing for a program");
    std::string bti_input;
    std::string bti_output;
    PolicyFlags bti_policy;
    bti->add_option("input", bti_input, ".fasm file")->required();
    bti->add_option("-o,--output", bti_output, ".s64 output (stdout if omitted)");
    bti_policy.attach(bti);

    // explain
    auto* explain = app.add_subcommand("explain", "show a symbol's equivalence class");
    std::string explain_input;
    std::string explain_symbol;
    PolicyFlags explain_policy;
    explain->add_option("input", explain_input, ".fasm file")->required();
    explain->add_option("--symbol", explain_symbol, "function or import name")->required();
    explain_policy.attach(explain);

    // dump
    auto* dump = app.add_subcommand("dump", "annotated section or space listing");
    std::string dump_input;
    dump->add_option("input", dump_input, "image.json or space.json")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (build->parsed()) {
            return cmd_build(build_inputs, build_output, build_policy, build_irm, build_plt,
                             build_sid_reg, build_emit_fasm);
        }
        if (load->parsed()) {
            return cmd_load(load_inputs, load_output, load_binding, load_nopout, load_base_seed);
        }
        if (run->parsed()) {
            return cmd_run(run_space, run_entry, run_scenario_path, run_shadow, run_step_limit,
                           run_trace);
        }
        if (report->parsed()) return cmd_report(report_input, report_stats);
        if (bti->parsed()) return cmd_emit_bti(bti_input, bti_output, bti_policy);
        if (explain->parsed()) return cmd_explain(explain_input, explain_symbol, explain_policy);
        if (dump->parsed()) return cmd_dump(dump_input);
    } catch (const fibt::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
