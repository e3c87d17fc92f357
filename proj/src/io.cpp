#include "mole/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "mole/errors.hpp"
#include "mole/util.hpp"

namespace mole {

// ------------------------------------------------------------------- util

std::vector<std::string_view> split_whitespace(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
        std::size_t j = i;
        while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

std::vector<std::string_view> split_char(std::string_view line, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == sep) {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

bool parse_int(std::string_view s, long long& out) {
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

bool parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    if (s.front() == '+') s.remove_prefix(1);
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("failed writing '" + path + "'");
}

std::string hash_file(const std::string& path) {
    Fnv1a h;
    h.update(read_file(path));
    return h.hex();
}

// -------------------------------------------------------------------- csv

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string csv_line(std::span<const std::string> fields) {
    std::string out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += csv_field(fields[i]);
    }
    out += '\n';
    return out;
}

std::size_t CsvTable::column(std::string_view name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError(1, "missing column '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - header.begin());
}

CsvTable parse_csv(std::string_view text) {
    CsvTable table;
    std::vector<std::string> record;
    std::string field;
    bool quoted = false;
    bool any = false;
    std::size_t line = 1;
    auto end_record = [&] {
        record.push_back(std::move(field));
        field.clear();
        if (table.header.empty() && table.rows.empty() && !any) {
            table.header = std::move(record);
        } else if (!(record.size() == 1 && record[0].empty())) {
            if (record.size() != table.header.size())
                throw ParseError(line, "expected " + std::to_string(table.header.size()) + " fields, got " +
                                           std::to_string(record.size()));
            table.rows.push_back(std::move(record));
        }
        any = true;
        record.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            record.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            end_record();
            ++line;
        } else if (c != '\r') {
            field += c;
        }
    }
    if (quoted) throw ParseError(line, "unterminated quoted field");
    if (!field.empty() || !record.empty()) end_record();
    return table;
}

CsvTable read_csv(const std::string& path) { return parse_csv(read_file(path)); }

double parse_double_field(std::string_view s) {
    double x = 0.0;
    if (!parse_double(s, x)) throw ParseError(0, "not a number: '" + std::string(s) + "'");
    return x;
}

long long parse_int_field(std::string_view s) {
    long long x = 0;
    if (!parse_int(s, x)) throw ParseError(0, "not an integer: '" + std::string(s) + "'");
    return x;
}

// -------------------------------------------------------------- artifacts

namespace {

void triple_fields(const MultilayerGraph& g, const LabeledTriple& t, std::vector<std::string>& f) {
    f.push_back(g.entity_name(t.u));
    f.push_back(g.entity_name(t.v));
    f.push_back(std::to_string(g.layer_id(t.layer)));
    f.push_back(std::to_string(t.label));
}

nlohmann::json vec_json(std::span<const double> xs) { return std::vector<double>(xs.begin(), xs.end()); }

}  // namespace

std::string split_manifest_csv(const MultilayerGraph& g, const RoundSplit& split) {
    std::string out = "u,v,layer,label,fold,role\n";
    std::vector<std::string> f;
    for (SplitRole role : {SplitRole::Train, SplitRole::Validation, SplitRole::Test}) {
        for (const auto& t : split.of(role)) {
            f.clear();
            triple_fields(g, t, f);
            f.push_back(std::to_string(t.fold));
            f.emplace_back(to_string(role));
            out += csv_line(f);
        }
    }
    return out;
}

std::string features_csv(const MultilayerGraph& g, std::span<const LabeledTriple> triples, const Matrix& features) {
    if (features.rows != triples.size()) throw ContractError("features and triples are not row-aligned");
    std::string out = "u,v,layer,label";
    for (std::size_t c = 0; c < features.cols; ++c) out += ",f" + std::to_string(c + 1);
    out += '\n';
    std::vector<std::string> f;
    for (std::size_t r = 0; r < triples.size(); ++r) {
        f.clear();
        triple_fields(g, triples[r], f);
        for (double x : features.row(r)) f.push_back(format_double(x));
        out += csv_line(f);
    }
    return out;
}

nlohmann::json features_sidecar(std::span<const HeuristicId> heuristics, double alpha, const HeuristicOptions& options,
                                const FeatureScaler& scaler) {
    nlohmann::json hs = nlohmann::json::array();
    for (auto h : heuristics) hs.push_back(std::string(to_string(h)));
    return {{"heuristics", hs},
            {"alpha", alpha},
            {"neighbor_mode", std::string(to_string(options.mode))},
            {"ppr",
             {{"beta", options.ppr.beta},
              {"tolerance", options.ppr.tolerance},
              {"max_iterations", options.ppr.max_iterations}}},
            {"scaler", {{"mean", scaler.mean()}, {"std", scaler.stdev()}}}};
}

std::string score_matrix_csv(const MultilayerGraph& g, const ExpertScoreMatrix& scores) {
    std::vector<std::string> f{"u", "v", "layer", "label"};
    f.insert(f.end(), scores.columns.begin(), scores.columns.end());
    std::string out = csv_line(f);
    for (std::size_t r = 0; r < scores.triples.size(); ++r) {
        f.clear();
        triple_fields(g, scores.triples[r], f);
        for (double x : scores.raw.row(r)) f.push_back(format_double(x));
        out += csv_line(f);
    }
    return out;
}

nlohmann::json score_matrix_sidecar(const ExpertScoreMatrix& scores) {
    return {{"columns", scores.columns}, {"rows", scores.raw.rows}, {"scale", "logit"}};
}

void write_expert(const std::string& dir, const Expert& expert) {
    write_file(dir + "/" + expert.name() + ".json", expert_header(expert).dump(2) + "\n");
    std::string params = "value\n";
    for (double x : expert.parameters()) params += format_double(x) + "\n";
    write_file(dir + "/" + expert.name() + ".params.csv", params);
}

ExpertPtr read_expert(const std::string& header_path) {
    auto header = nlohmann::json::parse(read_file(header_path));
    std::string params_path = header_path;
    if (params_path.size() >= 5 && params_path.ends_with(".json")) params_path.resize(params_path.size() - 5);
    params_path += ".params.csv";
    auto table = read_csv(params_path);
    std::vector<double> params;
    params.reserve(table.rows.size());
    for (const auto& row : table.rows) params.push_back(parse_double_field(row.at(0)));
    if (params.size() != header.at("parameter_count").get<std::size_t>())
        throw ContractError("parameter file of '" + header_path + "' has the wrong length");
    return load_expert(header, params);
}

nlohmann::json routing_to_json(const Routing& routing) {
    if (routing.mode == RoutingMode::Dense) return {{"mode", "dense"}};
    return {{"mode", "topk"}, {"k", routing.k}};
}

Routing routing_from_json(const nlohmann::json& j) {
    auto lower = [](std::string s) {
        for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        return s;
    };
    if (j.is_string()) {
        const auto s = lower(j.get<std::string>());
        if (s == "dense") return Routing::dense();
        long long k = 0;
        if (s.starts_with("top") && parse_int(std::string_view(s).substr(3), k) && k > 0)
            return Routing::top_k(static_cast<std::size_t>(k));
        throw DomainError("unknown routing '" + s + "'");
    }
    const auto mode = lower(j.at("mode").get<std::string>());
    if (mode == "dense") return Routing::dense();
    if (mode == "topk") return Routing::top_k(j.at("k").get<std::size_t>());
    throw DomainError("unknown routing mode '" + mode + "'");
}

nlohmann::json gater_to_json(const GaterModel& model) {
    const auto& c = model.config;
    nlohmann::json config = {{"input_dim", c.input_dim},
                             {"experts", c.experts},
                             {"hidden_layers", c.hidden_layers},
                             {"hidden_size", c.hidden_size},
                             {"dropout", c.dropout},
                             {"learning_rate", c.learning_rate},
                             {"weight_decay", c.weight_decay},
                             {"batch_size", c.batch_size},
                             {"patience", c.patience},
                             {"max_epochs", c.max_epochs},
                             {"routing", routing_to_json(c.routing)},
                             {"topk_in_training", c.topk_in_training},
                             {"seed", c.seed}};
    return {{"config", config},
            {"experts", model.expert_names},
            {"scaler", {{"mean", model.scaler.mean()}, {"std", model.scaler.stdev()}}},
            {"best_epoch", model.history.best_epoch},
            {"steps", model.steps},
            {"parameters", vec_json(model.net.params())}};
}

GaterModel gater_from_json(const nlohmann::json& j) {
    const auto& c = j.at("config");
    GaterConfig config;
    config.input_dim = c.at("input_dim").get<std::size_t>();
    config.experts = c.at("experts").get<std::size_t>();
    config.hidden_layers = c.at("hidden_layers").get<std::size_t>();
    config.hidden_size = c.at("hidden_size").get<std::size_t>();
    config.dropout = c.at("dropout").get<double>();
    config.learning_rate = c.at("learning_rate").get<double>();
    config.weight_decay = c.at("weight_decay").get<double>();
    config.batch_size = c.at("batch_size").get<std::size_t>();
    config.patience = c.at("patience").get<std::size_t>();
    config.max_epochs = c.at("max_epochs").get<std::size_t>();
    config.routing = routing_from_json(c.at("routing"));
    config.topk_in_training = c.at("topk_in_training").get<bool>();
    config.seed = c.at("seed").get<std::uint64_t>();
    GaterModel model = init_gater(config);
    auto params = j.at("parameters").get<std::vector<double>>();
    if (params.size() != model.net.parameter_count()) throw ContractError("gater parameter count mismatch");
    std::copy(params.begin(), params.end(), model.net.params().begin());
    model.expert_names = j.at("experts").get<std::vector<std::string>>();
    model.scaler = FeatureScaler(j.at("scaler").at("mean").get<std::vector<double>>(),
                                 j.at("scaler").at("std").get<std::vector<double>>());
    model.history.best_epoch = j.value("best_epoch", std::size_t{0});
    model.steps = j.value("steps", std::size_t{0});
    return model;
}

std::string history_csv(const TrainingHistory& history) {
    std::string out = "epoch,train_loss,val_loss\n";
    for (std::size_t e = 0; e < history.train_loss.size(); ++e)
        out += std::to_string(e + 1) + "," + format_double(history.train_loss[e]) + "," +
               format_double(history.val_loss[e]) + "\n";
    return out;
}

std::string results_csv(std::span<const ResultRow> rows) {
    std::string out = "model,fold,layer,mrr,hits1,hits5,hits10\n";
    std::vector<std::string> f;
    for (const auto& r : rows) {
        f = {r.model, std::to_string(r.fold), r.layer};
        if (r.out_of_time) {
            f.insert(f.end(), 4, "OOT");
        } else {
            f.push_back(format_double(r.metrics.mrr));
            for (std::size_t k : {1, 5, 10}) f.push_back(format_double(r.metrics.hits_at(k)));
        }
        out += csv_line(f);
    }
    return out;
}

nlohmann::json summary_json(std::span<const ModelSummary> summaries) {
    nlohmann::json models = nlohmann::json::array();
    for (const auto& s : summaries) {
        nlohmann::json hits = nlohmann::json::object();
        for (std::size_t i = 0; i < s.ks.size(); ++i)
            hits["hits" + std::to_string(s.ks[i])] = {{"mean", s.hits_mean[i]}, {"std", s.hits_std[i]}};
        models.push_back({{"model", s.model},
                          {"folds", s.folds},
                          {"out_of_time", s.out_of_time},
                          {"mrr", {{"mean", s.mrr_mean}, {"std", s.mrr_std}}},
                          {"hits", hits}});
    }
    return {{"models", models}};
}

std::string gating_summary_csv(std::span<const std::string> experts, const GatingReport& report) {
    std::string out = "expert,mean,std\n";
    for (std::size_t i = 0; i < experts.size(); ++i)
        out += csv_field(experts[i]) + "," + format_double(report.mean[i]) + "," + format_double(report.stdev[i]) +
               "\n";
    return out;
}

std::string gating_quantiles_csv(std::span<const std::string> experts, const GatingReport& report) {
    std::vector<std::string> f{"heuristic", "quantile", "count", "share", "low", "high"};
    f.insert(f.end(), experts.begin(), experts.end());
    std::string out = csv_line(f);
    for (const auto& q : report.quantiles) {
        f = {"m" + std::string(to_string(q.heuristic)), std::to_string(q.bin + 1), std::to_string(q.count),
             format_double(q.share), format_double(q.low), format_double(q.high)};
        for (double w : q.mean_weight) f.push_back(format_double(w));
        out += csv_line(f);
    }
    return out;
}

std::string unique_correct_csv(std::span<const std::string> experts, const UniqueCorrect& uc) {
    std::string out = "expert,correct,unique,fraction_of_own_correct,fraction_of_all\n";
    for (std::size_t i = 0; i < experts.size(); ++i)
        out += csv_field(experts[i]) + "," + std::to_string(uc.correct[i]) + "," + std::to_string(uc.unique[i]) +
               "," + format_double(uc.of_own_correct[i]) + "," + format_double(uc.of_all[i]) + "\n";
    return out;
}

// ------------------------------------------------------------------ cache

std::string round_cache_csv(const RoundCache& cache) {
    if (cache.features.rows != cache.triples.size() || cache.scores.rows != cache.triples.size() ||
        cache.roles.size() != cache.triples.size())
        throw ContractError("round cache is not row-aligned");
    std::vector<std::string> f{"role", "u", "v", "layer", "label", "fold"};
    for (auto h : cache.layout.heuristics)
        for (std::size_t l = 0; l < cache.layout.layers; ++l)
            f.push_back("f:" + std::string(to_string(h)) + "@" + std::to_string(l));
    for (const auto& e : cache.experts) f.push_back("e:" + e);
    std::string out = csv_line(f);
    for (std::size_t r = 0; r < cache.triples.size(); ++r) {
        const auto& t = cache.triples[r];
        f = {std::string(to_string(cache.roles[r])), std::to_string(t.u),     std::to_string(t.v),
             std::to_string(t.layer),               std::to_string(t.label), std::to_string(t.fold)};
        for (double x : cache.features.row(r)) f.push_back(format_double(x));
        for (double x : cache.scores.row(r)) f.push_back(format_double(x));
        out += csv_line(f);
    }
    return out;
}

RoundCache parse_round_cache(std::string_view text) {
    auto table = parse_csv(text);
    RoundCache cache;
    std::size_t feature_cols = 0;
    std::size_t max_layer = 0;
    for (std::size_t c = 6; c < table.header.size(); ++c) {
        const auto& name = table.header[c];
        if (name.starts_with("f:")) {
            auto at = name.find('@');
            if (at == std::string::npos) throw ParseError(1, "bad feature column '" + name + "'");
            auto h = heuristic_from_string(name.substr(2, at - 2));
            if (cache.layout.heuristics.empty() || cache.layout.heuristics.back() != h)
                cache.layout.heuristics.push_back(h);
            max_layer = std::max<std::size_t>(max_layer, static_cast<std::size_t>(parse_int_field(name.substr(at + 1))));
            ++feature_cols;
        } else if (name.starts_with("e:")) {
            cache.experts.push_back(name.substr(2));
        } else {
            throw ParseError(1, "unexpected cache column '" + name + "'");
        }
    }
    cache.layout.layers = cache.layout.heuristics.empty() ? 0 : max_layer + 1;
    if (cache.layout.width() != feature_cols) throw ParseError(1, "cache feature columns are incomplete");
    cache.features = Matrix(table.rows.size(), feature_cols);
    cache.scores = Matrix(table.rows.size(), cache.experts.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const auto& role = row[0];
        cache.roles.push_back(role == "train" ? SplitRole::Train
                              : role == "val" ? SplitRole::Validation
                                              : SplitRole::Test);
        LabeledTriple t;
        t.u = static_cast<NodeId>(parse_int_field(row[1]));
        t.v = static_cast<NodeId>(parse_int_field(row[2]));
        t.layer = static_cast<LayerIndex>(parse_int_field(row[3]));
        t.label = static_cast<int>(parse_int_field(row[4]));
        t.fold = static_cast<int>(parse_int_field(row[5]));
        cache.triples.push_back(t);
        for (std::size_t c = 0; c < feature_cols; ++c) cache.features(r, c) = parse_double_field(row[6 + c]);
        for (std::size_t c = 0; c < cache.experts.size(); ++c)
            cache.scores(r, c) = parse_double_field(row[6 + feature_cols + c]);
    }
    return cache;
}

}  // namespace mole
