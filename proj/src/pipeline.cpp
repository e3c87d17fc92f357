#include "mole/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <set>
#include <thread>
#include <unordered_set>

#include "mole/errors.hpp"
#include "mole/random.hpp"
#include "mole/util.hpp"

namespace fs = std::filesystem;

namespace mole {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!j.is_object()) throw DomainError(std::string(where) + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw DomainError("unknown key '" + key + "' in " + std::string(where));
    }
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

std::string round_name(std::size_t r) {
    std::string s = std::to_string(r);
    return "round_" + std::string(s.size() < 2 ? 2 - s.size() : 0, '0') + s;
}

json subset_to_json(const SubsetSpec& s) {
    if (s.mode == "explicit") return s.explicit_sets;
    return s.mode;
}

SubsetSpec subset_from_json(const json& j) {
    SubsetSpec s;
    if (j.is_string()) {
        s.mode = j.get<std::string>();
        if (s.mode != "all" && s.mode != "singletons" && s.mode != "none")
            throw DomainError("subset mode must be all, singletons, none or a list of lists");
    } else {
        s.mode = "explicit";
        s.explicit_sets = j.get<std::vector<std::vector<std::string>>>();
    }
    return s;
}

const std::initializer_list<std::string_view> kExpertKeys[] = {
    {"kind", "name", "heuristic", "iterations", "learning_rate"},
    {"kind", "name", "dim", "epochs", "learning_rate", "negative_ratio"},
    {"kind", "name", "hidden", "epochs", "learning_rate", "batch_size"},
};

std::size_t expert_kind_index(const std::string& kind) {
    if (kind == "heuristic") return 0;
    if (kind == "embedding") return 1;
    if (kind == "feature_mlp") return 2;
    throw DomainError("unknown expert kind '" + kind + "'");
}

HeuristicExpertConfig heuristic_config(const ExpertSpec& spec, double alpha) {
    HeuristicExpertConfig c;
    c.name = spec.name;
    c.alpha = alpha;
    if (spec.settings.contains("heuristic"))
        c.heuristic = heuristic_from_string(spec.settings.at("heuristic").get<std::string>());
    read_key(spec.settings, "iterations", c.iterations);
    read_key(spec.settings, "learning_rate", c.learning_rate);
    return c;
}

EmbeddingExpertConfig embedding_config(const ExpertSpec& spec, std::uint64_t seed) {
    EmbeddingExpertConfig c;
    c.name = spec.name;
    c.seed = seed;
    read_key(spec.settings, "dim", c.dim);
    read_key(spec.settings, "epochs", c.epochs);
    read_key(spec.settings, "learning_rate", c.learning_rate);
    read_key(spec.settings, "negative_ratio", c.negative_ratio);
    return c;
}

FeatureMlpExpertConfig feature_mlp_config(const ExpertSpec& spec, std::uint64_t seed) {
    FeatureMlpExpertConfig c;
    c.name = spec.name;
    c.seed = seed;
    read_key(spec.settings, "hidden", c.hidden);
    read_key(spec.settings, "epochs", c.epochs);
    read_key(spec.settings, "learning_rate", c.learning_rate);
    read_key(spec.settings, "batch_size", c.batch_size);
    return c;
}

std::string heuristic_list_name(std::span<const HeuristicId> hs) {
    std::string out;
    for (auto h : hs) {
        if (!out.empty()) out += '+';
        out += to_string(h);
    }
    return out;
}

/// Runs `work(i)` for i in [0, n) on up to `jobs` threads; rethrows the
/// first failure by index.
template <typename F>
void parallel_for(std::size_t n, unsigned jobs, F&& work) {
    jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(n)));
    std::vector<std::exception_ptr> errors(n);
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                work(i);
            } catch (...) {
                errors[i] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < jobs; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        work(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

Matrix rows_of(const Matrix& m, std::span<const std::size_t> rows) { return take_rows(m, rows); }

TripleList triples_of(const TripleList& all, std::span<const std::size_t> rows) {
    TripleList out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(all[r]);
    return out;
}

std::vector<int> labels_of(const TripleList& all, std::span<const std::size_t> rows) {
    std::vector<int> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(all[r].label);
    return out;
}

void append_metric_rows(std::vector<ResultRow>& out, const MultilayerGraph& g, const std::string& model,
                        std::size_t fold, bool oot, std::span<const LabeledTriple> triples,
                        std::span<const double> scores) {
    if (oot) {
        out.push_back({model, fold, "all", true, {}});
        return;
    }
    auto report = compute_metrics(make_query_set(triples, scores));
    out.push_back({model, fold, "all", false, report.pooled});
    for (const auto& [l, row] : report.per_layer) out.push_back({model, fold, std::to_string(g.layer_id(l)), false, row});
}

void ensure_dir(const std::string& path) { fs::create_directories(path); }

json dataset_json(const MultilayerGraph& g) {
    return {{"hash", to_hex(g.content_hash())},
            {"entities", g.entity_count()},
            {"layers", g.layer_count()},
            {"edges", g.total_edge_count()},
            {"directed", g.directed()}};
}

json seeds_json(const ExperimentConfig& config) {
    json rounds = json::array();
    for (std::size_t r = 0; r < config.round_count(); ++r) {
        auto s = round_seeds(config, r);
        rounds.push_back({{"round", r},
                          {"negatives", s.negatives},
                          {"experts", s.experts},
                          {"gater", s.gater},
                          {"ens_w", s.ens_w}});
    }
    return {{"master", config.seed}, {"split", split_seed(config)}, {"rounds", rounds}};
}

std::vector<std::vector<std::size_t>> subsets(const SubsetSpec& spec, const std::vector<std::string>& universe) {
    std::vector<std::vector<std::size_t>> out;
    const std::size_t n = universe.size();
    if (spec.mode == "none") return out;
    if (spec.mode == "all") {
        if (n > 16) throw DomainError("too many members for exhaustive subsets");
        for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
            std::vector<std::size_t> s;
            for (std::size_t i = 0; i < n; ++i)
                if (mask & (std::size_t{1} << i)) s.push_back(i);
            out.push_back(std::move(s));
        }
        std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });
        return out;
    }
    if (spec.mode == "singletons") {
        for (std::size_t i = 0; i < n; ++i) out.push_back({i});
        if (n > 1) {
            std::vector<std::size_t> all(n);
            for (std::size_t i = 0; i < n; ++i) all[i] = i;
            out.push_back(all);
        }
        return out;
    }
    for (const auto& names : spec.explicit_sets) {
        std::vector<std::size_t> s;
        for (const auto& name : names) {
            auto it = std::find(universe.begin(), universe.end(), name);
            if (it == universe.end()) throw DomainError("subset member '" + name + "' is not configured");
            s.push_back(static_cast<std::size_t>(it - universe.begin()));
        }
        std::sort(s.begin(), s.end());
        s.erase(std::unique(s.begin(), s.end()), s.end());
        if (s.empty()) throw DomainError("empty subset in ablation spec");
        out.push_back(std::move(s));
    }
    return out;
}

std::string fmt_or_oot(bool oot, double x) { return oot ? "OOT" : format_double(x); }

}  // namespace

// ----------------------------------------------------------------- config

std::vector<ExpertSpec> default_experts() {
    return {{"heuristic", "cAA", {{"heuristic", "AA"}}},
            {"embedding", "embedding", json::object()},
            {"feature_mlp", "feature_mlp", json::object()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j, const std::string& base_dir) {
    check_keys(j,
               {"dataset", "heuristics", "alpha", "neighbor_mode", "ppr", "experts", "gater", "ens_w", "folds",
                "rounds", "seed", "negatives", "output", "ablation", "jobs", "timeout"},
               "config");
    ExperimentConfig c;
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        check_keys(d, {"path", "generator", "directed"}, "dataset");
        read_key(d, "directed", c.dataset.directed);
        if (d.contains("path")) {
            fs::path p = d.at("path").get<std::string>();
            if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
            c.dataset.path = p.string();
        }
        if (d.contains("generator")) {
            const auto& gj = d.at("generator");
            check_keys(gj, {"entities", "layers", "k", "p", "seed"}, "dataset.generator");
            WsParams w;
            w.entities = gj.at("entities").get<std::size_t>();
            w.layers = gj.at("layers").get<std::size_t>();
            w.ring_degree = gj.at("k").get<std::size_t>();
            w.rewire_probability = gj.at("p").get<double>();
            w.seed = gj.value("seed", std::uint64_t{0});
            c.dataset.generator = w;
        }
    }
    if (j.contains("heuristics")) {
        c.heuristics.clear();
        for (const auto& h : j.at("heuristics")) c.heuristics.push_back(heuristic_from_string(h.get<std::string>()));
        c.heuristics = normalize_heuristics(std::move(c.heuristics));
    }
    read_key(j, "alpha", c.alpha);
    if (j.contains("neighbor_mode"))
        c.heuristic_options.mode = neighbor_mode_from_string(j.at("neighbor_mode").get<std::string>());
    if (j.contains("ppr")) {
        const auto& p = j.at("ppr");
        check_keys(p, {"beta", "tolerance", "max_iterations"}, "ppr");
        read_key(p, "beta", c.heuristic_options.ppr.beta);
        read_key(p, "tolerance", c.heuristic_options.ppr.tolerance);
        read_key(p, "max_iterations", c.heuristic_options.ppr.max_iterations);
    }
    if (j.contains("experts")) {
        c.experts.clear();
        for (const auto& e : j.at("experts")) {
            ExpertSpec spec;
            spec.kind = e.at("kind").get<std::string>();
            check_keys(e, kExpertKeys[expert_kind_index(spec.kind)], "expert");
            spec.name = e.value("name", spec.kind);
            for (const auto& [k, v] : e.items())
                if (k != "kind" && k != "name") spec.settings[k] = v;
            c.experts.push_back(std::move(spec));
        }
    }
    if (j.contains("gater")) {
        const auto& g = j.at("gater");
        check_keys(g,
                   {"hidden_layers", "hidden_size", "dropout", "learning_rate", "weight_decay", "batch_size",
                    "patience", "max_epochs", "routing", "topk_in_training"},
                   "gater");
        read_key(g, "hidden_layers", c.gater.hidden_layers);
        read_key(g, "hidden_size", c.gater.hidden_size);
        read_key(g, "dropout", c.gater.dropout);
        read_key(g, "learning_rate", c.gater.learning_rate);
        read_key(g, "weight_decay", c.gater.weight_decay);
        read_key(g, "batch_size", c.gater.batch_size);
        read_key(g, "patience", c.gater.patience);
        read_key(g, "max_epochs", c.gater.max_epochs);
        read_key(g, "topk_in_training", c.gater.topk_in_training);
        if (g.contains("routing")) c.gater.routing = routing_from_json(g.at("routing"));
    }
    if (j.contains("ens_w")) {
        const auto& e = j.at("ens_w");
        check_keys(e, {"learning_rate", "weight_decay", "batch_size", "patience", "max_epochs"}, "ens_w");
        read_key(e, "learning_rate", c.ens_w.learning_rate);
        read_key(e, "weight_decay", c.ens_w.weight_decay);
        read_key(e, "batch_size", c.ens_w.batch_size);
        read_key(e, "patience", c.ens_w.patience);
        read_key(e, "max_epochs", c.ens_w.max_epochs);
    }
    read_key(j, "folds", c.folds);
    read_key(j, "rounds", c.rounds);
    read_key(j, "seed", c.seed);
    if (j.contains("negatives")) c.negatives = negative_strategy_from_string(j.at("negatives").get<std::string>());
    if (j.contains("output")) {
        fs::path p = j.at("output").get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
        c.output = p.string();
    }
    if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        check_keys(a, {"heuristic_subsets", "expert_subsets", "alphas", "ks"}, "ablation");
        if (a.contains("heuristic_subsets")) c.ablation.heuristic_subsets = subset_from_json(a.at("heuristic_subsets"));
        if (a.contains("expert_subsets")) c.ablation.expert_subsets = subset_from_json(a.at("expert_subsets"));
        read_key(a, "alphas", c.ablation.alphas);
        read_key(a, "ks", c.ablation.ks);
    }
    read_key(j, "jobs", c.jobs);
    read_key(j, "timeout", c.timeout);
    c.validate();
    return c;
}

json ExperimentConfig::to_json() const {
    json d = {{"directed", dataset.directed}};
    if (!dataset.path.empty()) d["path"] = dataset.path;
    if (dataset.generator) {
        const auto& w = *dataset.generator;
        d["generator"] = {{"entities", w.entities},
                          {"layers", w.layers},
                          {"k", w.ring_degree},
                          {"p", w.rewire_probability},
                          {"seed", w.seed}};
    }
    json hs = json::array();
    for (auto h : heuristics) hs.push_back(std::string(to_string(h)));
    json ex = json::array();
    for (const auto& e : experts) {
        json o = e.settings;
        o["kind"] = e.kind;
        o["name"] = e.name;
        ex.push_back(o);
    }
    return {{"dataset", d},
            {"heuristics", hs},
            {"alpha", alpha},
            {"neighbor_mode", std::string(to_string(heuristic_options.mode))},
            {"ppr",
             {{"beta", heuristic_options.ppr.beta},
              {"tolerance", heuristic_options.ppr.tolerance},
              {"max_iterations", heuristic_options.ppr.max_iterations}}},
            {"experts", ex},
            {"gater",
             {{"hidden_layers", gater.hidden_layers},
              {"hidden_size", gater.hidden_size},
              {"dropout", gater.dropout},
              {"learning_rate", gater.learning_rate},
              {"weight_decay", gater.weight_decay},
              {"batch_size", gater.batch_size},
              {"patience", gater.patience},
              {"max_epochs", gater.max_epochs},
              {"routing", routing_to_json(gater.routing)},
              {"topk_in_training", gater.topk_in_training}}},
            {"ens_w",
             {{"learning_rate", ens_w.learning_rate},
              {"weight_decay", ens_w.weight_decay},
              {"batch_size", ens_w.batch_size},
              {"patience", ens_w.patience},
              {"max_epochs", ens_w.max_epochs}}},
            {"folds", folds},
            {"rounds", rounds},
            {"seed", seed},
            {"negatives", std::string(to_string(negatives))},
            {"output", output},
            {"ablation",
             {{"heuristic_subsets", subset_to_json(ablation.heuristic_subsets)},
              {"expert_subsets", subset_to_json(ablation.expert_subsets)},
              {"alphas", ablation.alphas},
              {"ks", ablation.ks}}},
            {"jobs", jobs},
            {"timeout", timeout}};
}

void ExperimentConfig::validate() const {
    if (dataset.path.empty() == !dataset.generator.has_value())
        throw DomainError("dataset needs exactly one of 'path' or 'generator'");
    if (heuristics.empty()) throw DomainError("at least one heuristic is required");
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
    heuristic_options.ppr.validate();
    if (experts.empty()) throw DomainError("at least one expert is required");
    std::set<std::string> names;
    for (const auto& e : experts) {
        expert_kind_index(e.kind);
        if (e.name.empty() || !names.insert(e.name).second)
            throw DomainError("expert names must be non-empty and unique ('" + e.name + "')");
        if (e.name.find_first_of("/\\,\"\n") != std::string::npos)
            throw DomainError("expert name '" + e.name + "' holds reserved characters");
        if (e.kind == "heuristic" && e.settings.contains("heuristic")) {
            auto h = heuristic_from_string(e.settings.at("heuristic").get<std::string>());
            (void)h;
        }
    }
    if (folds < 3) throw DomainError("need at least 3 folds");
    if (rounds > folds) throw DomainError("rounds cannot exceed folds");
    if (jobs < 1) throw DomainError("jobs must be >= 1");
    if (timeout < 0.0) throw DomainError("timeout must be non-negative");
    for (double a : ablation.alphas)
        if (!(a > 0.0 && a < 1.0)) throw DomainError("ablation alphas must lie in (0, 1)");
    for (auto k : ablation.ks)
        if (k < 1 || k > experts.size()) throw DomainError("ablation K values must lie in [1, experts]");
    GaterConfig g = gater;
    g.input_dim = heuristics.size();
    g.experts = experts.size();
    g.validate();
}

std::string ExperimentConfig::precompute_hash() const {
    json j = to_json();
    json key = {{"dataset", j.at("dataset")},     {"heuristics", j.at("heuristics")},
                {"alpha", j.at("alpha")},         {"neighbor_mode", j.at("neighbor_mode")},
                {"ppr", j.at("ppr")},             {"experts", j.at("experts")},
                {"folds", j.at("folds")},         {"seed", j.at("seed")},
                {"negatives", j.at("negatives")}, {"format", 1}};
    Fnv1a h;
    h.update(key.dump());
    return h.hex();
}

ExperimentConfig load_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw DomainError("cannot parse config '" + path + "': " + e.what());
    }
    return ExperimentConfig::from_json(j, fs::absolute(path).parent_path().string());
}

MultilayerGraph load_dataset(const ExperimentConfig& config) {
    if (config.dataset.generator) return generate_ws_multiplex(*config.dataset.generator);
    EdgeListOptions opt;
    opt.directed = config.dataset.directed;
    return read_edgelist(config.dataset.path, opt).graph;
}

std::uint64_t split_seed(const ExperimentConfig& config) { return derive_seed(config.seed, {0x5b1fULL}); }

RoundSeeds round_seeds(const ExperimentConfig& config, std::size_t round) {
    RoundSeeds s;
    s.negatives = derive_seed(config.seed, {0x4e9ULL, round});
    for (std::size_t i = 0; i < config.experts.size(); ++i) s.experts.push_back(derive_seed(config.seed, {0xe8ULL, round, i}));
    s.gater = derive_seed(config.seed, {0x9a7eULL, round});
    s.ens_w = derive_seed(config.seed, {0xe5ULL, round});
    return s;
}

// ----------------------------------------------------------------- rounds

std::vector<std::size_t> RoundData::rows(SplitRole role) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < cache.roles.size(); ++i)
        if (cache.roles[i] == role) out.push_back(i);
    return out;
}

RunPaths RunPaths::for_config(const ExperimentConfig& config) {
    RunPaths p;
    p.output = config.output;
    const char* env = std::getenv("MOLE_CACHE_DIR");
    p.cache = env && *env ? std::string(env) : (fs::path(config.output) / "cache").string();
    return p;
}

std::string RunPaths::round_cache(const MultilayerGraph& g, const ExperimentConfig& config, std::size_t round) const {
    return (fs::path(cache) / (to_hex(g.content_hash()) + "-" + config.precompute_hash()) / (round_name(round) + ".csv"))
        .string();
}

std::string RunPaths::expert_dir(std::size_t round) const {
    return (fs::path(output) / "experts" / round_name(round)).string();
}

RoundData prepare_round(const MultilayerGraph& g, const ExperimentConfig& config, const FoldAssignment& folds,
                        std::size_t round, const RunPaths& paths, unsigned threads) {
    RoundData data;
    data.round = round;
    const auto seeds = round_seeds(config, round);
    data.split = build_round(g, folds, round, config.negatives, seeds.negatives);
    data.expert_out_of_time.assign(config.experts.size(), false);

    TripleList all;
    std::vector<SplitRole> roles;
    for (SplitRole role : {SplitRole::Train, SplitRole::Validation, SplitRole::Test}) {
        const auto& list = data.split.of(role);
        all.insert(all.end(), list.begin(), list.end());
        roles.insert(roles.end(), list.size(), role);
    }

    std::vector<std::string> names;
    for (const auto& e : config.experts) names.push_back(e.name);

    const std::string cache_path = paths.round_cache(g, config, round);
    if (fs::exists(cache_path)) {
        auto cached = parse_round_cache(read_file(cache_path));
        if (cached.triples == all && cached.roles == roles && cached.experts == names &&
            cached.layout.layers == g.layer_count()) {
            data.cache = std::move(cached);
            data.from_cache = true;
            return data;
        }
    }

    const auto obs = g.without_pairs(data.split.held_out);
    HeuristicEngine engine(obs, config.heuristic_options);
    const std::vector<HeuristicId> every(std::begin(kAllHeuristics), std::end(kAllHeuristics));

    auto t0 = Clock::now();
    auto train = extract_layer_features(engine, data.split.train, every, true, threads);
    auto val = extract_layer_features(engine, data.split.validation, every, false, threads);
    auto test = extract_layer_features(engine, data.split.test, every, false, threads);
    LayerFeatureTable table;
    table.layout = train.layout;
    table.values = Matrix(all.size(), table.layout.width());
    {
        std::size_t r = 0;
        for (const auto* part : {&train, &val, &test})
            for (std::size_t i = 0; i < part->values.rows; ++i, ++r) {
                auto src = part->values.row(i);
                std::copy(src.begin(), src.end(), table.values.row(r).begin());
            }
    }
    data.stage_seconds.push_back(seconds_since(t0));
    if (config.timeout > 0.0 && data.stage_seconds.back() > config.timeout) data.out_of_time = true;

    const auto train_selected = select_heuristics(train, config.heuristics);
    const auto all_selected = select_heuristics(table, config.heuristics);
    std::vector<std::unordered_set<std::uint64_t>> forbidden(g.layer_count());
    for (const auto* list : {&data.split.validation, &data.split.test})
        for (const auto& t : *list) forbidden[t.layer].insert(t.pair().key());
    const std::string dir = paths.expert_dir(round);
    ensure_dir(dir);

    RoundCache cache;
    cache.layout = table.layout;
    cache.experts = names;
    cache.roles = roles;
    cache.triples = all;
    cache.features = table.values;
    cache.scores = Matrix(all.size(), config.experts.size());

    auto t1 = Clock::now();
    for (std::size_t i = 0; i < config.experts.size(); ++i) {
        const auto& spec = config.experts[i];
        const std::string header = dir + "/" + spec.name + ".json";
        auto te = Clock::now();
        ExpertPtr expert;
        if (fs::exists(header)) {
            expert = read_expert(header);
            if (expert->kind() != spec.kind) throw ContractError("stored expert '" + spec.name + "' has another kind");
        } else {
            if (spec.kind == "heuristic") {
                expert = train_heuristic_expert(train, data.split.train, heuristic_config(spec, config.alpha));
            } else if (spec.kind == "embedding") {
                expert = train_embedding_expert(obs, data.split.train, embedding_config(spec, seeds.experts[i]),
                                                forbidden);
            } else {
                expert = train_feature_mlp_expert(train_selected, data.split.train,
                                                  feature_mlp_config(spec, seeds.experts[i]));
            }
            write_expert(dir, *expert);
        }
        if (config.timeout > 0.0 && seconds_since(te) > config.timeout) data.expert_out_of_time[i] = true;
        const auto& scoring_table = spec.kind == "feature_mlp" ? all_selected : table;
        const ExpertPtr one[] = {expert};
        auto scores = precompute_score_matrix(one, all, scoring_table, threads);
        for (std::size_t r = 0; r < all.size(); ++r) cache.scores(r, i) = scores.raw(r, 0);
    }
    data.stage_seconds.push_back(seconds_since(t1));

    ensure_dir(fs::path(cache_path).parent_path().string());
    write_file(cache_path, round_cache_csv(cache));
    data.cache = std::move(cache);
    return data;
}

GaterRun run_gater(const RoundData& data, const ExperimentConfig& config, const GaterVariant& variant) {
    const auto& cache = data.cache;
    const auto train_rows = data.rows(SplitRole::Train);
    const auto val_rows = data.rows(SplitRole::Validation);
    const auto test_rows = data.rows(SplitRole::Test);

    const LayerFeatureTable full{cache.layout, cache.features};
    const auto agg = aggregate_features(select_heuristics(full, variant.heuristics), cache.triples, variant.alpha);
    const auto scores = take_cols(cache.scores, variant.experts);

    GaterConfig gc = config.gater;
    gc.input_dim = agg.cols;
    gc.experts = variant.experts.size();
    gc.routing = variant.routing;
    gc.seed = round_seeds(config, data.round).gater;

    auto t0 = Clock::now();
    GaterModel model = init_gater(gc);
    model.scaler = FeatureScaler::fit(rows_of(agg, train_rows));
    for (auto c : variant.experts) model.expert_names.push_back(cache.experts.at(c));
    const Matrix standardized = model.scaler.apply(agg);

    GaterBatch train{rows_of(standardized, train_rows), rows_of(scores, train_rows), labels_of(cache.triples, train_rows)};
    GaterBatch val{rows_of(standardized, val_rows), rows_of(scores, val_rows), labels_of(cache.triples, val_rows)};

    GaterRun run;
    run.model = train_gater(std::move(model), train, val);
    run.seconds = seconds_since(t0);
    run.out_of_time = config.timeout > 0.0 && run.seconds > config.timeout;

    const Matrix test_features = rows_of(standardized, test_rows);
    const Matrix test_scores = rows_of(scores, test_rows);
    run.test_weights = Matrix(test_rows.size(), gc.experts);
    for (std::size_t r = 0; r < test_rows.size(); ++r) {
        auto w = gate_forward(run.model, test_features.row(r), gc.routing);
        std::copy(w.begin(), w.end(), run.test_weights.row(r).begin());
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * test_scores(r, i);
        run.test_logits.push_back(s);
    }
    const auto test_triples = triples_of(cache.triples, test_rows);
    run.metrics = compute_metrics(make_query_set(test_triples, run.test_logits));
    return run;
}

// ------------------------------------------------------------- experiment

ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    const auto g = load_dataset(config);
    const auto paths = RunPaths::for_config(config);
    for (const char* sub : {"splits", "features", "scores", "gater", "ens_w", "experts"})
        ensure_dir((fs::path(paths.output) / sub).string());
    write_file((fs::path(paths.output) / "config.json").string(), config.to_json().dump(2) + "\n");

    const auto folds = kfold_pair_split(g, config.folds, split_seed(config));
    const std::size_t rounds = config.round_count();
    std::vector<std::vector<ResultRow>> per_round(rounds);
    std::vector<json> timings(rounds);

    std::vector<std::size_t> all_experts(config.experts.size());
    for (std::size_t i = 0; i < all_experts.size(); ++i) all_experts[i] = i;

    parallel_for(rounds, config.jobs, [&](std::size_t r) {
        const auto data = prepare_round(g, config, folds, r, paths, 1);
        const auto& cache = data.cache;
        const std::string name = round_name(r);
        auto file = [&](const char* sub, const std::string& leaf) {
            return (fs::path(paths.output) / sub / (name + leaf)).string();
        };
        write_file(file("splits", ".csv"), split_manifest_csv(g, data.split));

        GaterVariant full{config.heuristics, all_experts, config.alpha, config.gater.routing};
        const auto gater = run_gater(data, config, full);

        const LayerFeatureTable table{cache.layout, cache.features};
        const auto agg = aggregate_features(select_heuristics(table, config.heuristics), cache.triples, config.alpha);
        write_file(file("features", ".csv"), features_csv(g, cache.triples, agg));
        write_file(file("features", ".json"),
                   features_sidecar(config.heuristics, config.alpha, config.heuristic_options, gater.model.scaler)
                           .dump(2) +
                       "\n");
        ExpertScoreMatrix sm{cache.experts, cache.triples, cache.scores};
        write_file(file("scores", ".csv"), score_matrix_csv(g, sm));
        write_file(file("scores", ".json"), score_matrix_sidecar(sm).dump(2) + "\n");
        write_file(file("gater", ".json"), gater_to_json(gater.model).dump(2) + "\n");
        write_file(file("gater", ".history.csv"), history_csv(gater.model.history));

        const auto train_rows = data.rows(SplitRole::Train);
        const auto val_rows = data.rows(SplitRole::Validation);
        const auto test_rows = data.rows(SplitRole::Test);
        Matrix probs = cache.scores;
        for (double& x : probs.data) x = sigmoid(x);

        EnsWConfig ec = config.ens_w;
        ec.seed = round_seeds(config, r).ens_w;
        auto te = Clock::now();
        const auto ens_w = train_ens_w(rows_of(probs, train_rows), labels_of(cache.triples, train_rows),
                                       rows_of(probs, val_rows), labels_of(cache.triples, val_rows), ec);
        const double ens_w_seconds = seconds_since(te);
        write_file(file("ens_w", ".json"),
                   json{{"experts", cache.experts}, {"weights", ens_w.weights}, {"best_epoch", ens_w.history.best_epoch}}
                           .dump(2) +
                       "\n");
        write_file(file("ens_w", ".history.csv"), history_csv(ens_w.history));

        // Evaluation on the test split.
        const auto test = triples_of(cache.triples, test_rows);
        const Matrix test_features = rows_of(cache.features, test_rows);
        const Matrix test_scores = rows_of(cache.scores, test_rows);
        const Matrix test_probs = rows_of(probs, test_rows);
        const bool any_expert_oot =
            std::find(data.expert_out_of_time.begin(), data.expert_out_of_time.end(), true) !=
            data.expert_out_of_time.end();
        auto& rows = per_round[r];

        const LayerFeatureTable test_table{cache.layout, test_features};
        const auto test_agg = aggregate_features(test_table, test, config.alpha);
        for (std::size_t h = 0; h < cache.layout.heuristics.size(); ++h) {
            std::vector<double> s(test.size());
            for (std::size_t i = 0; i < test.size(); ++i) s[i] = test_agg(i, h);
            append_metric_rows(rows, g, "m" + std::string(to_string(cache.layout.heuristics[h])), r,
                               data.out_of_time, test, s);
        }
        for (std::size_t e = 0; e < cache.experts.size(); ++e) {
            std::vector<double> s(test.size());
            for (std::size_t i = 0; i < test.size(); ++i) s[i] = test_scores(i, e);
            append_metric_rows(rows, g, cache.experts[e], r, data.out_of_time || data.expert_out_of_time[e], test, s);
        }
        const bool base_oot = data.out_of_time || any_expert_oot;
        {
            std::vector<double> s(test.size());
            for (std::size_t i = 0; i < test.size(); ++i) s[i] = ens_s_predict(test_probs.row(i));
            append_metric_rows(rows, g, "Ens_S", r, base_oot, test, s);
        }
        {
            std::vector<double> s(test.size());
            for (std::size_t i = 0; i < test.size(); ++i) {
                double z = 0.0;
                for (std::size_t e = 0; e < ens_w.weights.size(); ++e) z += ens_w.weights[e] * test_probs(i, e);
                s[i] = z;
            }
            const bool oot = base_oot || (config.timeout > 0.0 && ens_w_seconds > config.timeout);
            append_metric_rows(rows, g, "Ens_W", r, oot, test, s);
        }
        append_metric_rows(rows, g, "MoE", r, base_oot || gater.out_of_time, test, gater.test_logits);

        json stages = {{"round", r}, {"cached", data.from_cache}, {"gater_seconds", gater.seconds},
                       {"ens_w_seconds", ens_w_seconds}, {"gater_epochs", gater.model.history.val_loss.size()}};
        if (!data.stage_seconds.empty()) {
            stages["feature_seconds"] = data.stage_seconds[0];
            stages["expert_seconds"] = data.stage_seconds[1];
        }
        timings[r] = stages;
    });

    ExperimentResult result;
    for (auto& rows : per_round) result.rows.insert(result.rows.end(), rows.begin(), rows.end());
    result.summary = summarize(result.rows);
    write_file((fs::path(paths.output) / "results.csv").string(), results_csv(result.rows));
    write_file((fs::path(paths.output) / "summary.json").string(), summary_json(result.summary).dump(2) + "\n");
    write_file((fs::path(paths.output) / "timings.json").string(), json(timings).dump(2) + "\n");

    write_manifest(paths.output, {{"command", "experiment"},
                                  {"config", config.to_json()},
                                  {"dataset", dataset_json(g)},
                                  {"seeds", seeds_json(config)}});
    return result;
}

// --------------------------------------------------------------- ablation

std::vector<AblationRow> run_ablation(const ExperimentConfig& config) {
    config.validate();
    const auto g = load_dataset(config);
    const auto paths = RunPaths::for_config(config);
    ensure_dir((fs::path(paths.output) / "ablation").string());
    const auto folds = kfold_pair_split(g, config.folds, split_seed(config));

    std::vector<std::string> heuristic_names;
    for (auto h : config.heuristics) heuristic_names.emplace_back(to_string(h));
    std::vector<std::string> expert_names;
    for (const auto& e : config.experts) expert_names.push_back(e.name);
    std::vector<std::size_t> all_experts(config.experts.size());
    for (std::size_t i = 0; i < all_experts.size(); ++i) all_experts[i] = i;

    struct Variant {
        std::string group;
        std::string name;
        GaterVariant gater;
    };
    std::vector<Variant> variants;
    for (const auto& s : subsets(config.ablation.heuristic_subsets, heuristic_names)) {
        std::vector<HeuristicId> hs;
        for (auto i : s) hs.push_back(config.heuristics[i]);
        variants.push_back({"heuristics", heuristic_list_name(hs),
                            {hs, all_experts, config.alpha, config.gater.routing}});
    }
    for (const auto& s : subsets(config.ablation.expert_subsets, expert_names)) {
        std::string name;
        for (auto i : s) name += (name.empty() ? "" : "+") + expert_names[i];
        Routing routing = config.gater.routing;
        if (routing.mode == RoutingMode::TopK && routing.k > s.size()) routing = Routing::dense();
        variants.push_back({"experts", name, {config.heuristics, s, config.alpha, routing}});
    }
    for (double a : config.ablation.alphas)
        variants.push_back({"alpha", "alpha=" + format_double(a), {config.heuristics, all_experts, a, config.gater.routing}});
    for (auto k : config.ablation.ks)
        variants.push_back({"k", "top" + std::to_string(k), {config.heuristics, all_experts, config.alpha, Routing::top_k(k)}});
    if (variants.empty()) throw DomainError("ablation spec selects nothing");

    const std::size_t rounds = config.round_count();
    std::vector<std::vector<AblationRow>> per_round(rounds);
    parallel_for(rounds, config.jobs, [&](std::size_t r) {
        const auto data = prepare_round(g, config, folds, r, paths, 1);
        for (const auto& v : variants) {
            auto run = run_gater(data, config, v.gater);
            per_round[r].push_back({v.group, v.name, r, run.out_of_time || data.out_of_time, run.metrics.pooled});
        }
    });

    std::vector<AblationRow> rows;
    for (auto& pr : per_round) rows.insert(rows.end(), pr.begin(), pr.end());

    std::string results = "group,variant,fold,mrr,hits1,hits5,hits10\n";
    for (const auto& row : rows) {
        results += csv_line(std::vector<std::string>{
            row.group, row.variant, std::to_string(row.fold), fmt_or_oot(row.out_of_time, row.metrics.mrr),
            fmt_or_oot(row.out_of_time, row.out_of_time ? 0 : row.metrics.hits_at(1)),
            fmt_or_oot(row.out_of_time, row.out_of_time ? 0 : row.metrics.hits_at(5)),
            fmt_or_oot(row.out_of_time, row.out_of_time ? 0 : row.metrics.hits_at(10))});
    }
    std::string summary = "group,variant,folds,mrr_mean,mrr_std,hits1_mean,hits5_mean,hits10_mean\n";
    for (const auto& v : variants) {
        std::vector<ResultRow> rs;
        for (const auto& row : rows)
            if (row.group == v.group && row.variant == v.name)
                rs.push_back({v.name, row.fold, "all", row.out_of_time, row.metrics});
        const auto s = summarize(rs).at(0);
        const bool none = s.folds == s.out_of_time;
        summary += csv_line(std::vector<std::string>{
            v.group, v.name, std::to_string(s.folds), fmt_or_oot(none, s.mrr_mean), fmt_or_oot(none, s.mrr_std),
            fmt_or_oot(none, none ? 0 : s.hits_mean[0]), fmt_or_oot(none, none ? 0 : s.hits_mean[1]),
            fmt_or_oot(none, none ? 0 : s.hits_mean[2])});
    }
    write_file((fs::path(paths.output) / "ablation" / "results.csv").string(), results);
    write_file((fs::path(paths.output) / "ablation" / "summary.csv").string(), summary);

    write_manifest(paths.output, {{"command", "ablate"},
                                  {"config", config.to_json()},
                                  {"dataset", dataset_json(g)},
                                  {"seeds", seeds_json(config)}});
    return rows;
}

// ----------------------------------------------------------------- report

void run_report(const std::string& run_dir, std::size_t quantiles) {
    const fs::path dir(run_dir);
    const auto config = ExperimentConfig::from_json(json::parse(read_file((dir / "config.json").string())));
    std::vector<std::string> experts;
    Matrix weights, heuristic_scores, probabilities;
    std::vector<int> labels;
    std::vector<HeuristicId> heuristics;

    auto append = [](Matrix& m, std::span<const double> row) {
        if (m.rows == 0) m.cols = row.size();
        m.data.insert(m.data.end(), row.begin(), row.end());
        ++m.rows;
    };

    for (std::size_t r = 0; r < config.round_count(); ++r) {
        const std::string name = round_name(r);
        const auto split = read_csv((dir / "splits" / (name + ".csv")).string());
        const auto features = read_csv((dir / "features" / (name + ".csv")).string());
        const auto scores = read_csv((dir / "scores" / (name + ".csv")).string());
        const auto sidecar = json::parse(read_file((dir / "features" / (name + ".json")).string()));
        const auto model = gater_from_json(json::parse(read_file((dir / "gater" / (name + ".json")).string())));
        if (split.rows.size() != features.rows.size() || split.rows.size() != scores.rows.size())
            throw ContractError("artifacts of " + name + " are not row-aligned");
        if (r == 0) {
            experts = model.expert_names;
            for (const auto& h : sidecar.at("heuristics")) heuristics.push_back(heuristic_from_string(h.get<std::string>()));
        }
        const auto role_col = split.column("role");
        const auto label_col = split.column("label");
        std::vector<double> f(heuristics.size()), e(experts.size());
        for (std::size_t i = 0; i < split.rows.size(); ++i) {
            if (split.rows[i][role_col] != "test") continue;
            for (std::size_t h = 0; h < heuristics.size(); ++h) f[h] = parse_double_field(features.rows[i][4 + h]);
            for (std::size_t c = 0; c < experts.size(); ++c) e[c] = parse_double_field(scores.rows[i][4 + c]);
            auto w = gate_forward(model, model.scaler.apply(f), model.config.routing);
            append(weights, w);
            append(heuristic_scores, f);
            std::vector<double> p(e.size());
            for (std::size_t c = 0; c < e.size(); ++c) p[c] = sigmoid(e[c]);
            append(probabilities, p);
            labels.push_back(static_cast<int>(parse_int_field(split.rows[i][label_col])));
        }
    }

    const auto report = gating_weight_report(weights, heuristic_scores, heuristics, quantiles);
    ensure_dir((dir / "report").string());
    write_file((dir / "report" / "gating_weights.csv").string(), gating_summary_csv(experts, report));
    write_file((dir / "report" / "gating_quantiles.csv").string(), gating_quantiles_csv(experts, report));
    if (experts.size() >= 2)
        write_file((dir / "report" / "unique_correct.csv").string(),
                   unique_correct_csv(experts, unique_correct_fractions(probabilities, labels)));

    auto header = json::parse(read_file((dir / "manifest.json").string()));
    header.erase("artifacts");
    header["command"] = "report";
    header["quantiles"] = quantiles;
    write_manifest(run_dir, header);
}

// --------------------------------------------------------------- manifest

void write_manifest(const std::string& dir, const json& header) {
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto rel = fs::relative(entry.path(), dir).generic_string();
        if (rel == "manifest.json") continue;
        files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    json artifacts = json::array();
    for (const auto& f : files) {
        const auto full = (fs::path(dir) / f).string();
        artifacts.push_back({{"path", f}, {"bytes", fs::file_size(full)}, {"hash", hash_file(full)}});
    }
    json out = header;
    out["artifacts"] = artifacts;
    write_file((fs::path(dir) / "manifest.json").string(), out.dump(2) + "\n");
}

void mark_failed(const std::string& dir, const std::string& what) {
    try {
        fs::create_directories(fs::path(dir) / "failed");
        write_file((fs::path(dir) / "failed" / "error.txt").string(), what + "\n");
    } catch (...) {
    }
}

}  // namespace mole
