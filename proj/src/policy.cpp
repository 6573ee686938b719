// SPDX-License-Identifier: Apache-2.0
#include "fibt/policy.hpp"

#include <algorithm>
#include <random>
#include <set>
#include <sstream>

namespace fibt::policy {

bool sid_reserved(Sid sid) {
    return sid == 0 || sid == kEndbr64Image || sid == kEndbr32Image;
}

const char* policy_name(PolicyKind k) {
    switch (k) {
    case PolicyKind::VanillaIbt: return "vanilla-ibt";
    case PolicyKind::Arity: return "arity";
    case PolicyKind::TypeStrict: return "type-strict";
    case PolicyKind::Mlta: return "mlta";
    }
    return "vanilla-ibt";
}

std::optional<PolicyKind> policy_from_name(std::string_view name) {
    if (name == "vanilla-ibt" || name == "vanilla") return PolicyKind::VanillaIbt;
    if (name == "arity") return PolicyKind::Arity;
    if (name == "type-strict" || name == "type") return PolicyKind::TypeStrict;
    if (name == "mlta") return PolicyKind::Mlta;
    return std::nullopt;
}

MltaPairs MltaPairs::parse(std::string_view text) {
    MltaPairs pairs;
    int lineno = 0;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        std::string_view line = (eol == std::string_view::npos)
                                    ? text.substr(pos)
                                    : text.substr(pos, eol - pos);
        pos = (eol == std::string_view::npos) ? text.size() : eol + 1;
        ++lineno;

        size_t hash = line.find('#');
        if (hash != std::string_view::npos) line = line.substr(0, hash);
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
            line.remove_suffix(1);
        }
        if (line.empty()) continue;

        size_t t1 = line.find('\t');
        size_t t2 = t1 == std::string_view::npos ? std::string_view::npos : line.find('\t', t1 + 1);
        if (t2 == std::string_view::npos) {
            throw Error(Errc::SyntaxError, "expected caller<TAB>index<TAB>callee", lineno, 1);
        }
        Pair p;
        p.caller = std::string(line.substr(0, t1));
        std::string index_text(line.substr(t1 + 1, t2 - t1 - 1));
        try {
            p.callsite_index = std::stoul(index_text);
        } catch (const std::exception&) {
            throw Error(Errc::SyntaxError, "bad callsite index '" + index_text + "'", lineno, 1);
        }
        p.callee = std::string(line.substr(t2 + 1));
        pairs.allowed.push_back(std::move(p));
    }
    return pairs;
}

std::map<std::string, Sid> parse_sid_overrides(std::string_view text) {
    std::map<std::string, Sid> out;
    int lineno = 0;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        std::string_view line = (eol == std::string_view::npos)
                                    ? text.substr(pos)
                                    : text.substr(pos, eol - pos);
        pos = (eol == std::string_view::npos) ? text.size() : eol + 1;
        ++lineno;

        size_t hash = line.find('#');
        if (hash != std::string_view::npos) line = line.substr(0, hash);
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) {
            line.remove_suffix(1);
        }
        if (line.empty()) continue;

        size_t tab = line.find('\t');
        if (tab == std::string_view::npos) {
            throw Error(Errc::SyntaxError, "expected symbol<TAB>0xHEXSID", lineno, 1);
        }
        std::string sym(line.substr(0, tab));
        std::string value(line.substr(tab + 1));
        if (value.rfind("0x", 0) != 0 && value.rfind("0X", 0) != 0) {
            throw Error(Errc::SyntaxError, "SID must be hex (0x...)", lineno, 1);
        }
        unsigned long long parsed = 0;
        try {
            parsed = std::stoull(value, nullptr, 16);
        } catch (const std::exception&) {
            throw Error(Errc::SyntaxError, "bad SID '" + value + "'", lineno, 1);
        }
        if (parsed > 0xFFFFFFFFull) {
            throw Error(Errc::SyntaxError, "SID exceeds 32 bits", lineno, 1);
        }
        out[sym] = static_cast<Sid>(parsed);
    }
    return out;
}

Sid SidAssignment::sid_of_function(const std::string& name) const {
    auto it = function_to_class.find(name);
    if (it == function_to_class.end()) {
        throw Error(Errc::MissingSid, "no class for function '" + name + "'");
    }
    auto sid = class_to_sid.find(it->second);
    if (sid == class_to_sid.end()) {
        throw Error(Errc::MissingSid, "class of '" + name + "' has no SID");
    }
    return sid->second;
}

Sid SidAssignment::sid_of_callsite(const CallsiteRef& ref) const {
    auto it = callsite_to_class.find(ref);
    if (it == callsite_to_class.end()) {
        throw Error(Errc::MissingSid,
                    "no class for callsite " + ref.function + ":" + std::to_string(ref.index));
    }
    auto sid = class_to_sid.find(it->second);
    if (sid == class_to_sid.end()) {
        throw Error(Errc::MissingSid, "callsite class has no SID");
    }
    return sid->second;
}

std::optional<size_t> SidAssignment::class_of_function(const std::string& name) const {
    auto it = function_to_class.find(name);
    if (it == function_to_class.end()) return std::nullopt;
    return it->second;
}

std::vector<size_t> indirect_callsites(const ir::Function& f) {
    std::vector<size_t> out;
    for (size_t i = 0; i < f.instrs.size(); ++i) {
        ir::Op op = f.instrs[i].op;
        if (op == ir::Op::IndirectCall || op == ir::Op::IndirectJmpReg) out.push_back(i);
    }
    return out;
}

namespace {

ir::Signature signature_of_symbol(const ir::Program& p, const std::string& sym) {
    if (const ir::Function* fn = p.find_function(sym)) return fn->signature;
    if (const ir::ImportDecl* imp = p.find_import(sym)) return imp->signature;
    throw Error(Errc::UnknownSymbol, "no signature for '" + sym + "'");
}

ir::Signature signature_of_data_entry(const ir::Program& p, const ir::DataObject& d) {
    for (const auto& e : d.entries) {
        if (e.is_symbol && (p.find_function(e.sym) || p.find_import(e.sym))) {
            return signature_of_symbol(p, e.sym);
        }
    }
    throw Error(Errc::AmbiguousCallsite,
                "data object '" + d.name + "' holds no function entry to type a callsite");
}

} // namespace

ir::Signature callsite_signature(const ir::Program& p, const ir::Function& f, size_t callsite_index) {
    ir::Reg reg = f.instrs.at(callsite_index).reg;
    for (size_t i = callsite_index; i-- > 0;) {
        const ir::Instruction& in = f.instrs[i];
        switch (in.op) {
        case ir::Op::LoadFnAddr:
            if (in.reg == reg) return signature_of_symbol(p, in.sym);
            break;
        case ir::Op::LoadData:
            if (in.reg == reg) {
                const ir::DataObject* d = p.find_data(in.sym);
                if (!d) throw Error(Errc::UnknownSymbol, "unknown object '" + in.sym + "'");
                return signature_of_data_entry(p, *d);
            }
            break;
        case ir::Op::MovReg:
            if (in.reg == reg) {
                reg = in.reg2;
            }
            break;
        case ir::Op::MovImm:
        case ir::Op::SubImm:
        case ir::Op::XorImm:
        case ir::Op::Shl:
        case ir::Op::Or64Imm:
        case ir::Op::Rol:
        case ir::Op::SubReg:
            if (in.reg == reg) {
                throw Error(Errc::AmbiguousCallsite,
                            "callsite register clobbered before " + f.name + ":" +
                                std::to_string(callsite_index));
            }
            break;
        default:
            break;
        }
    }
    throw Error(Errc::AmbiguousCallsite,
                "no function-pointer definition reaches " + f.name + ":" +
                    std::to_string(callsite_index));
}

namespace {

std::string arity_key(const ir::Signature& sig) {
    std::ostringstream os;
    os << "arity=" << sig.arity();
    if (sig.variadic) os << "+variadic";
    return os.str();
}

std::string type_key(const ir::Signature& sig) {
    return "type=" + ir::signature_to_string(sig);
}

struct UnionFind {
    std::vector<size_t> parent;
    explicit UnionFind(size_t n) : parent(n) {
        for (size_t i = 0; i < n; ++i) parent[i] = i;
    }
    size_t find(size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(size_t a, size_t b) { parent[find(a)] = find(b); }
};

bool is_protected(const ir::Function& f) {
    return f.address_taken || f.linkage == ir::Linkage::Global;
}

} // namespace

SidAssignment build_classes(std::span<const ir::Program> programs, PolicyKind kind,
                            const MltaPairs* pairs) {
    SidAssignment a;
    a.kind = kind;

    // Protected functions and declared imports, in program order; imports
    // participate through their declared signatures so cross-DSO SIDs agree.
    std::vector<std::pair<std::string, ir::Signature>> subjects;
    std::set<std::string> seen;
    auto add_subject = [&](const std::string& name, const ir::Signature& sig) {
        if (seen.insert(name).second) subjects.emplace_back(name, sig);
    };
    for (const ir::Program& p : programs) {
        for (const ir::Function& f : p.functions) {
            if (seen.count(f.name)) {
                throw Error(Errc::DuplicateSymbol,
                            "function '" + f.name + "' defined in more than one input");
            }
            if (is_protected(f)) add_subject(f.name, f.signature);
        }
    }
    for (const ir::Program& p : programs) {
        for (const ir::ImportDecl& imp : p.imports) add_subject(imp.name, imp.signature);
    }

    struct Site {
        CallsiteRef ref;
        ir::Signature sig;
    };
    std::vector<Site> sites;
    for (const ir::Program& p : programs) {
        for (const ir::Function& f : p.functions) {
            for (size_t idx : indirect_callsites(f)) {
                Site s;
                s.ref = CallsiteRef{f.name, idx};
                if (kind == PolicyKind::Arity || kind == PolicyKind::TypeStrict) {
                    s.sig = callsite_signature(p, f, idx);
                }
                sites.push_back(std::move(s));
            }
        }
    }

    auto new_class = [&](std::string key) -> size_t {
        EquivalenceClass c;
        c.id = a.classes.size();
        c.key = std::move(key);
        a.classes.push_back(std::move(c));
        return a.classes.back().id;
    };

    switch (kind) {
    case PolicyKind::VanillaIbt: {
        size_t id = new_class("all-targets");
        for (auto& [name, sig] : subjects) {
            a.classes[id].members.push_back(name);
            a.function_to_class[name] = id;
        }
        for (auto& s : sites) {
            a.classes[id].callsites.push_back(s.ref);
            a.callsite_to_class[s.ref] = id;
        }
        break;
    }
    case PolicyKind::Arity:
    case PolicyKind::TypeStrict: {
        auto key_of = [&](const ir::Signature& sig) {
            return kind == PolicyKind::Arity ? arity_key(sig) : type_key(sig);
        };
        std::map<std::string, size_t> by_key;
        for (auto& [name, sig] : subjects) {
            std::string key = key_of(sig);
            auto it = by_key.find(key);
            size_t id = it != by_key.end() ? it->second : (by_key[key] = new_class(key));
            a.classes[id].members.push_back(name);
            a.function_to_class[name] = id;
        }
        for (auto& s : sites) {
            std::string key = key_of(s.sig);
            auto it = by_key.find(key);
            size_t id = it != by_key.end() ? it->second : (by_key[key] = new_class(key));
            a.classes[id].callsites.push_back(s.ref);
            a.callsite_to_class[s.ref] = id;
        }
        break;
    }
    case PolicyKind::Mlta: {
        if (!pairs) throw Error(Errc::BadConfig, "mlta policy requires a pairs file");

        // Nodes: subjects then callsites; classes are connected components of
        // the pair graph.
        std::map<std::string, size_t> subject_node;
        for (size_t i = 0; i < subjects.size(); ++i) subject_node[subjects[i].first] = i;
        std::map<CallsiteRef, size_t> site_node;
        for (size_t i = 0; i < sites.size(); ++i) site_node[sites[i].ref] = subjects.size() + i;

        UnionFind uf(subjects.size() + sites.size());
        for (const MltaPairs::Pair& pr : pairs->allowed) {
            auto callee = subject_node.find(pr.callee);
            if (callee == subject_node.end()) {
                throw Error(Errc::UnknownSymbol, "mlta callee '" + pr.callee + "' unknown");
            }
            auto site = site_node.find(CallsiteRef{pr.caller, pr.callsite_index});
            if (site == site_node.end()) {
                throw Error(Errc::UnknownSymbol,
                            "mlta callsite " + pr.caller + ":" + std::to_string(pr.callsite_index) +
                                " unknown");
            }
            uf.unite(site->second, callee->second);
        }

        std::set<size_t> covered;
        for (const MltaPairs::Pair& pr : pairs->allowed) {
            covered.insert(site_node.at(CallsiteRef{pr.caller, pr.callsite_index}));
        }
        for (auto& s : sites) {
            if (!covered.count(site_node.at(s.ref))) {
                throw Error(Errc::UncoveredCallsite,
                            "mlta pairs do not cover " + s.ref.function + ":" +
                                std::to_string(s.ref.index));
            }
        }

        std::map<size_t, size_t> root_to_class;
        auto class_of_root = [&](size_t root) {
            auto it = root_to_class.find(root);
            if (it != root_to_class.end()) return it->second;
            size_t id = new_class("mlta-component-" + std::to_string(root_to_class.size()));
            root_to_class[root] = id;
            return id;
        };
        for (size_t i = 0; i < subjects.size(); ++i) {
            size_t id = class_of_root(uf.find(i));
            a.classes[id].members.push_back(subjects[i].first);
            a.function_to_class[subjects[i].first] = id;
        }
        for (size_t i = 0; i < sites.size(); ++i) {
            size_t id = class_of_root(uf.find(subjects.size() + i));
            a.classes[id].callsites.push_back(sites[i].ref);
            a.callsite_to_class[sites[i].ref] = id;
        }
        break;
    }
    }
    return a;
}

SidAssignment build_classes(const ir::Program& p, PolicyKind kind, const MltaPairs* pairs) {
    return build_classes(std::span<const ir::Program>(&p, 1), kind, pairs);
}

void allocate_sids(SidAssignment& a, uint64_t seed, const std::map<std::string, Sid>& overrides) {
    a.class_to_sid.clear();
    std::set<Sid> used;

    for (const auto& [sym, sid] : overrides) {
        auto cls = a.function_to_class.find(sym);
        if (cls == a.function_to_class.end()) {
            throw Error(Errc::UnknownSymbol, "SID override for unknown symbol '" + sym + "'");
        }
        if (sid_reserved(sid)) {
            throw Error(Errc::BadConfig, "override SID for '" + sym + "' is reserved");
        }
        auto existing = a.class_to_sid.find(cls->second);
        if (existing != a.class_to_sid.end() && existing->second != sid) {
            throw Error(Errc::BadConfig, "conflicting SID overrides in one class ('" + sym + "')");
        }
        if (existing == a.class_to_sid.end() && !used.insert(sid).second) {
            throw Error(Errc::BadConfig, "override SID reused across classes");
        }
        a.class_to_sid[cls->second] = sid;
    }

    // Raw engine output keeps the stream portable across standard libraries.
    std::mt19937_64 rng(seed);
    for (const EquivalenceClass& c : a.classes) {
        if (a.class_to_sid.count(c.id)) continue;
        for (;;) {
            Sid candidate = static_cast<Sid>(rng());
            if (sid_reserved(candidate) || used.count(candidate)) continue;
            used.insert(candidate);
            a.class_to_sid[c.id] = candidate;
            break;
        }
    }
}

std::string explain_class(const SidAssignment& a, const std::string& sym) {
    const EquivalenceClass* cls = nullptr;
    if (auto id = a.class_of_function(sym)) {
        cls = &a.classes[*id];
    } else {
        throw Error(Errc::UnknownSymbol, "'" + sym + "' is in no equivalence class");
    }
    std::ostringstream os;
    os << "symbol:   " << sym << "\n";
    os << "policy:   " << policy_name(a.kind) << "\n";
    os << "class:    #" << cls->id << " (" << cls->key << ")\n";
    auto sid = a.class_to_sid.find(cls->id);
    if (sid != a.class_to_sid.end()) {
        std::ostringstream hexsid;
        hexsid << std::hex << sid->second;
        os << "sid:      0x" << hexsid.str() << "\n";
    } else {
        os << "sid:      (unallocated)\n";
    }
    os << "members: ";
    for (const std::string& m : cls->members) os << " " << m;
    os << "\n";
    os << "callsites:";
    for (const CallsiteRef& ref : cls->callsites) os << " " << ref.function << ":" << ref.index;
    os << "\n";
    return os.str();
}

} // namespace fibt::policy
