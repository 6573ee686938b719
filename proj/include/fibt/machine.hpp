// SPDX-License-Identifier: Apache-2.0
//
// Deterministic register-machine VM over an AddressSpace: Intel-IBT landing
// pad tracking, SID-check semantics, a CET-style shadow stack, the lazy
// binding resolver, and the attack/scenario harness.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fibt/loader.hpp"

namespace fibt::machine {

enum class TrapKind : uint8_t {
    EndbrViolation,
    SidMismatchHlt,
    ClangCfiRangeUd2,
    ShadowStackMismatch,
    StepLimitExceeded,
    ExplicitHalt,
    ChkFailHandler,
};

const char* trap_name(TrapKind k);
std::optional<TrapKind> trap_from_name(std::string_view name);

struct TrapEvent {
    TrapKind kind{TrapKind::ExplicitHalt};
    uint64_t pc{0};
    std::string current_function;
    std::string detail;
};

struct TraceStep {
    uint64_t step{0};
    uint64_t pc{0};
    std::string location; // image:owner+off
    std::string instr_text;
};

struct Trace {
    std::vector<TraceStep> steps;
    uint64_t total_steps{0};
    bool completed{false};
    int exit_code{0};
    std::optional<TrapEvent> trap;

    std::string to_text() const;
};

struct RunOptions {
    bool shadow_stack{false};
    uint64_t step_limit{10'000'000};
    size_t max_recorded_steps{1 << 16};
};

Trace run(loader::AddressSpace& space, const std::string& entry, RunOptions options = {});

struct Mutation {
    enum class Kind : uint8_t { SetFnptr, CorruptGot, CorruptReturn, Dlopen, DlsymStore };
    Kind kind{Kind::SetFnptr};

    std::string image;   // optional disambiguator / CorruptGot owner
    std::string object;  // data object (SetFnptr, DlsymStore)
    size_t index{0};
    std::string target;  // "symbol", "symbol+off", or "0x..." (SetFnptr, CorruptGot, CorruptReturn)
    std::string function; // CorruptReturn: whose return address is corrupted
    std::string symbol;   // CorruptGot import / DlsymStore symbol
    linkage::Image dl_image; // Dlopen payload
};

struct Expected {
    enum class Kind : uint8_t { Completes, Traps, IllegalMutation };
    Kind kind{Kind::Completes};
    int exit_code{0};
    TrapKind trap{TrapKind::ExplicitHalt};
};

struct Scenario {
    std::string name;
    std::string entry;
    bool shadow_stack{false};
    std::vector<Mutation> mutations;
    Expected expected;

    using ImageLoader = std::function<linkage::Image(const std::string&)>;
    static Scenario from_json(const nlohmann::ordered_json& j, const ImageLoader& load_image);
};

struct ScenarioResult {
    bool passed{false};
    std::string outcome;  // "completes 0", "traps SidMismatchHlt", "illegal_mutation"
    std::string expected; // same shape, for reporting
    Trace trace;
};

// Runs over a clone of the space; mutations touching read-only state yield
// the illegal_mutation outcome instead of running.
ScenarioResult run_scenario(loader::AddressSpace space, const Scenario& s,
                            std::optional<uint64_t> step_limit = std::nullopt);

struct TraceDiff {
    bool empty{true};
    std::string text;
};

// Structural diff; label-insensitive mode ignores symbol operands so that
// *_entry redirections compare equal.
TraceDiff trace_diff(const Trace& a, const Trace& b, bool label_insensitive = false);

// Resolves "symbol", "symbol+off", or a hex/decimal literal to an address.
uint64_t resolve_target(const loader::AddressSpace& space, const std::string& spec);

} // namespace fibt::machine
