#include "qallm/cli.h"

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "qallm/cluster.h"
#include "qallm/corpus.h"
#include "qallm/corpus_io.h"
#include "qallm/error.h"
#include "qallm/eval.h"
#include "qallm/trainer.h"

namespace qallm {

namespace {

nlohmann::json read_json_file(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path + ": " + e.what());
    }
}

void write_json(const std::string& path, const nlohmann::json& j, std::ostream& out) {
    if (path.empty() || path == "-") {
        out << j.dump(2) << "\n";
    } else {
        write_text_file(path, j.dump(2) + "\n");
    }
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::vector<nlohmann::json> out;
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

const Dialogue& find_dialogue(const std::vector<Dialogue>& ds, const std::string& id) {
    for (const auto& d : ds) {
        if (d.id == id) return d;
    }
    throw ConfigError("no dialogue with id " + id);
}

// Predictions: {"dialogue_id", "querier_id", "response"} per line.
std::map<std::string, std::string> read_predictions(const std::string& path) {
    std::map<std::string, std::string> out;
    for (const auto& j : read_jsonl(path)) {
        try {
            out[j.at("dialogue_id").get<std::string>()] = j.at("response").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(path + ": " + e.what());
        }
    }
    return out;
}

struct IngestArgs {
    std::string format;
    std::string input;
    std::string responder;
    std::string script_format = "colon";
    bool strict = false;
    double gap_hours = 3.0;
    std::size_t min_dialogues = kDefaultMinDialogues;
    double test_fraction = 0.2;
    bool synthetic = false;
    std::size_t queriers = 4, templates = 20, variants = 16;
    std::string output;
};

int run_ingest(const IngestArgs& a, std::uint64_t seed, std::ostream& out) {
    std::vector<Dialogue> ds;
    if (a.synthetic) {
        ds = make_synthetic_corpus({a.queriers, a.templates, a.variants, seed}).dialogues;
    } else {
        if (a.format.empty() || a.input.empty() || a.responder.empty()) {
            throw CLI::ValidationError("ingest needs --format, -i and --responder (or --synthetic)");
        }
        if (a.format == "script") {
            ParseOptions po;
            po.format = a.script_format == "screenplay" ? ScriptFormat::screenplay : ScriptFormat::colon;
            po.strict = a.strict;
            auto parsed = parse_script(read_text_file(a.input), po);
            for (const auto& q : script_speakers(parsed.lines, a.responder)) {
                auto pair = extract_pair_dialogues(parsed.lines, a.responder, q);
                ds.insert(ds.end(), pair.begin(), pair.end());
            }
        } else {
            auto gap = static_cast<Timestamp>(a.gap_hours * 3600.0);
            ds = segment_chat(read_chat_log(a.input), a.responder, gap);
        }
        ds = split_corpus(filter_queriers(deduplicate(std::move(ds)), a.min_dialogues), a.test_fraction,
                          seed);
    }
    if (a.output.empty() || a.output == "-") {
        write_dialogues(out, ds);
    } else {
        write_dialogues(a.output, ds);
    }
    return 0;
}

int run_stats(const std::string& input, std::ostream& out) {
    auto ds = read_dialogues(input);
    nlohmann::json resp = nlohmann::json::array();
    for (const auto& s : compute_stats(ds)) resp.push_back(to_json(s));
    out << nlohmann::json{{"n_dialogues", ds.size()}, {"responders", resp}}.dump(2) << "\n";
    return 0;
}

struct TrainArgs {
    std::string input, clusters, config, output;
    std::optional<double> lr_max, lr_min, lambda, tau;
    std::optional<std::size_t> batch_size, epochs, max_steps;
    bool no_qcl = false, no_ccl = false, single_tower_ft = false, freeze_general = false;
    std::size_t workers = 1;
};

int run_train(const TrainArgs& a, std::optional<std::uint64_t> seed, std::ostream& out) {
    nlohmann::json j = a.config.empty() ? nlohmann::json::object() : read_json_file(a.config);
    auto cfg = train_config_from_json(j);
    nlohmann::json over = nlohmann::json::object();
    if (seed) over["seed"] = *seed;
    if (a.lr_max) over["lr_max"] = *a.lr_max;
    if (a.lr_min) over["lr_min"] = *a.lr_min;
    if (a.lambda) over["lambda"] = *a.lambda;
    if (a.tau) over["tau"] = *a.tau;
    if (a.batch_size) over["batch_size"] = *a.batch_size;
    if (a.epochs) over["epochs"] = *a.epochs;
    if (a.max_steps) over["max_steps"] = *a.max_steps;
    if (a.no_qcl) over["no_qcl"] = true;
    if (a.no_ccl) over["no_ccl"] = true;
    if (a.single_tower_ft) over["single_tower_ft"] = true;
    if (a.freeze_general) over["freeze_general"] = true;
    cfg = merge_train_config(cfg, over);

    auto ds = read_dialogues(a.input);
    std::optional<ClusterIndex> index;
    if (!a.clusters.empty()) index = cluster_index_from_json(read_json_file(a.clusters));

    TrainOptions opts;
    opts.workers = a.workers;
    opts.checkpoint_dir = a.output;
    auto res = train(ds, index ? &*index : nullptr, cfg, opts);
    save_training_run(res, cfg, a.output);
    const auto& last = res.log.steps.back();
    nlohmann::json summary = {{"steps", res.log.steps.size()},
                              {"final_lm", last.lm},
                              {"final_qc", last.qc},
                              {"final_mi_bound", last.mi_bound}};
    if (!res.log.epochs.empty() && res.log.epochs.back().heldout_lm) {
        summary["heldout_lm"] = *res.log.epochs.back().heldout_lm;
    }
    out << summary.dump(2) << "\n";
    return 0;
}

struct GenerateArgs {
    std::string ckpt, input, id, querier, split = "test", output;
    double temperature = 0.0;
    std::size_t max_new = 64;
};

int run_generate(const GenerateArgs& a, std::uint64_t seed, std::ostream& out) {
    auto model = load_checkpoint(a.ckpt);
    auto ds = read_dialogues(a.input);
    GenerateOptions go{a.temperature, a.max_new, seed};
    if (!a.id.empty()) {
        const auto& d = find_dialogue(ds, a.id);
        auto q = a.querier.empty() ? d.querier_id : a.querier;
        out << respond(model, q, d.context(), go) << "\n";
        return 0;
    }
    auto want = split_from_string(a.split);
    std::string lines;
    for (const auto& d : ds) {
        if (d.split != want) continue;
        auto q = a.querier.empty() ? d.querier_id : a.querier;
        nlohmann::json rec = {{"dialogue_id", d.id}, {"querier_id", q}, {"response", respond(model, q, d.context(), go)}};
        lines += rec.dump() + "\n";
    }
    if (a.output.empty() || a.output == "-") {
        out << lines;
    } else {
        write_text_file(a.output, lines);
    }
    return 0;
}

int run_eval_metrics(const std::string& pred, const std::string& ref, const std::string& output,
                     std::ostream& out) {
    auto preds = read_predictions(pred);
    auto ds = read_dialogues(ref);
    std::vector<MetricScores> all;
    nlohmann::json items = nlohmann::json::array();
    for (const auto& d : ds) {
        auto it = preds.find(d.id);
        if (it == preds.end()) continue;
        auto s = score_texts(it->second, d.target().text);
        all.push_back(s);
        auto j = to_json(s);
        j["dialogue_id"] = d.id;
        items.push_back(j);
    }
    nlohmann::json report = {{"n", all.size()}, {"mean", to_json(mean_scores(all))}, {"items", items}};
    write_json(output, report, out);
    return 0;
}

struct JudgeArgs {
    std::string ours, baseline, ref, dataset_source, lang = "en", mock, output;
    std::size_t fewshot = 5;
    std::size_t concurrency = 4;
};

int run_eval_judge(const JudgeArgs& a, std::uint64_t seed, std::ostream& out) {
    auto ours = read_predictions(a.ours);
    auto base = read_predictions(a.baseline);
    auto ds = read_dialogues(a.ref);
    std::vector<JudgeItem> items;
    for (const auto& d : ds) {
        if (d.split != Split::test) continue;
        auto o = ours.find(d.id);
        auto b = base.find(d.id);
        if (o == ours.end() || b == base.end()) continue;
        items.push_back({d, o->second, b->second, sample_fewshot(ds, d, a.fewshot, seed)});
    }
    JudgeSettings settings{a.dataset_source, PromptTemplates::load(a.lang)};
    std::unique_ptr<JudgeClient> client;
    if (!a.mock.empty()) {
        auto answer = a.mock;
        client = std::make_unique<MockJudgeClient>([answer](const std::vector<JudgeMessage>&) { return answer; });
    } else {
        client = std::make_unique<HttpJudgeClient>(HttpJudgeConfig::from_env());
    }
    auto verdicts = judge_all(items, *client, seed, settings, a.concurrency);
    nlohmann::json vj = nlohmann::json::array();
    for (const auto& v : verdicts) vj.push_back(to_json(v));
    write_json(a.output, {{"report", to_json(win_rate(verdicts))}, {"verdicts", vj}}, out);
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Querier-aware dual-tower dialogue model", "qallm"};
    app.require_subcommand(1);
    app.fallthrough();
    std::optional<std::uint64_t> seed;
    app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();

    IngestArgs ia;
    auto* ingest = app.add_subcommand("ingest", "Build a dialogue corpus (JSONL)");
    ingest->add_option("--format", ia.format, "script or chat")->check(CLI::IsMember({"script", "chat"}));
    ingest->add_option("-i,--input", ia.input, "Raw script or chat log")->check(CLI::ExistingFile);
    ingest->add_option("--responder", ia.responder, "Responder id");
    ingest->add_option("--script-format", ia.script_format, "colon or screenplay")
        ->check(CLI::IsMember({"colon", "screenplay"}));
    ingest->add_flag("--strict", ia.strict, "Fail on unparseable script lines");
    ingest->add_option("--gap-hours", ia.gap_hours, "Chat session gap")->check(CLI::PositiveNumber);
    ingest->add_option("--min-dialogues", ia.min_dialogues, "Drop queriers with fewer dialogues");
    ingest->add_option("--test-fraction", ia.test_fraction, "Per-querier test share")->check(CLI::Range(0.0, 1.0));
    ingest->add_flag("--synthetic", ia.synthetic, "Emit the bundled synthetic corpus");
    ingest->add_option("--queriers", ia.queriers, "Synthetic queriers");
    ingest->add_option("--templates", ia.templates, "Synthetic query templates");
    ingest->add_option("--variants", ia.variants, "Synthetic training variants per template");
    ingest->add_option("-o,--output", ia.output, "Output JSONL");

    std::string stats_in;
    auto* stats = app.add_subcommand("stats", "Per-responder corpus statistics");
    stats->add_option("-i,--input", stats_in, "Dialogues JSONL")->required()->check(CLI::ExistingFile);

    std::string cl_in, cl_out, cl_embedder = "local", cl_assigned;
    std::size_t cl_k = kDefaultClusters;
    auto* cluster = app.add_subcommand("cluster", "Cluster querier contexts");
    cluster->add_option("-i,--input", cl_in, "Dialogues JSONL")->required()->check(CLI::ExistingFile);
    cluster->add_option("-k", cl_k, "Number of clusters")->check(CLI::PositiveNumber);
    cluster->add_option("--embedder", cl_embedder, "local or remote")->check(CLI::IsMember({"local", "remote"}));
    cluster->add_option("-o,--output", cl_out, "Cluster index JSON")->required();
    cluster->add_option("--dialogues-out", cl_assigned, "Dialogues with cluster ids");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train a model");
    tr->add_option("-i,--input", ta.input, "Dialogues JSONL")->required()->check(CLI::ExistingFile);
    tr->add_option("--clusters", ta.clusters, "Cluster index JSON")->check(CLI::ExistingFile);
    tr->add_option("--config", ta.config, "Training config JSON")->check(CLI::ExistingFile);
    tr->add_option("-o,--output", ta.output, "Checkpoint directory")->required();
    tr->add_option("--lr-max", ta.lr_max);
    tr->add_option("--lr-min", ta.lr_min);
    tr->add_option("--lambda", ta.lambda);
    tr->add_option("--tau", ta.tau);
    tr->add_option("--batch-size", ta.batch_size);
    tr->add_option("--epochs", ta.epochs);
    tr->add_option("--max-steps", ta.max_steps);
    tr->add_flag("--no-qcl", ta.no_qcl);
    tr->add_flag("--no-ccl", ta.no_ccl);
    tr->add_flag("--single-tower-ft", ta.single_tower_ft);
    tr->add_flag("--freeze-general", ta.freeze_general);
    tr->add_option("--workers", ta.workers, "Threads per batch")->check(CLI::PositiveNumber);

    GenerateArgs ga;
    auto* gen = app.add_subcommand("generate", "Generate responses");
    gen->add_option("--ckpt", ga.ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    gen->add_option("-i,--input", ga.input, "Dialogues JSONL")->required()->check(CLI::ExistingFile);
    gen->add_option("--id", ga.id, "Answer this dialogue's context only");
    gen->add_option("--querier", ga.querier, "Querier to answer as if asked by");
    gen->add_option("--split", ga.split, "Split to answer in batch mode")->check(CLI::IsMember({"train", "test"}));
    gen->add_option("--temperature", ga.temperature, "0 for greedy");
    gen->add_option("--max-new", ga.max_new, "Maximum response tokens");
    gen->add_option("-o,--output", ga.output, "Predictions JSONL");

    std::string em_pred, em_ref, em_out;
    auto* em = app.add_subcommand("eval-metrics", "BLEU and ROUGE against references");
    em->add_option("--pred", em_pred, "Predictions JSONL")->required()->check(CLI::ExistingFile);
    em->add_option("--ref", em_ref, "Dialogues JSONL")->required()->check(CLI::ExistingFile);
    em->add_option("-o,--output", em_out, "Report JSON");

    JudgeArgs ja;
    auto* ej = app.add_subcommand("eval-judge", "Pairwise judge win rate");
    ej->add_option("--ours", ja.ours, "Predictions JSONL")->required()->check(CLI::ExistingFile);
    ej->add_option("--baseline", ja.baseline, "Predictions JSONL")->required()->check(CLI::ExistingFile);
    ej->add_option("--ref", ja.ref, "Dialogues JSONL")->required()->check(CLI::ExistingFile);
    ej->add_option("--fewshot", ja.fewshot, "Few-shot examples per item");
    ej->add_option("--dataset-source", ja.dataset_source, "Source named in the prompt");
    ej->add_option("--lang", ja.lang, "Prompt language")->check(CLI::IsMember({"en", "zh"}));
    ej->add_option("--mock", ja.mock, "Offline judge that always answers this text");
    ej->add_option("--concurrency", ja.concurrency)->check(CLI::PositiveNumber);
    ej->add_option("-o,--output", ja.output, "Verdicts JSON");

    std::string ex_ckpt, ex_in, ex_out;
    auto* ex = app.add_subcommand("export-repr", "Export specific-tower representations");
    ex->add_option("--ckpt", ex_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
    ex->add_option("-i,--input", ex_in, "Dialogues JSONL")->required()->check(CLI::ExistingFile);
    ex->add_option("-o,--output", ex_out, "CSV path")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        CLI::App* target = &app;
        for (auto* s : app.get_subcommands()) target = s;
        out << target->help();
        return 0;
    } catch (const CLI::ParseError& e) {
        CLI::App* target = &app;
        for (auto* s : app.get_subcommands()) target = s;
        err << "error: " << e.what() << "\n" << target->help();
        return 1;
    }

    const std::uint64_t s = seed.value_or(0);
    try {
        if (*ingest) return run_ingest(ia, s, out);
        if (*stats) return run_stats(stats_in, out);
        if (*cluster) {
            auto ds = read_dialogues(cl_in);
            auto emb = make_embedder(cl_embedder);
            auto index = build_cluster_index(ds, *emb, cl_k, s);
            write_json(cl_out, to_json(index), out);
            if (!cl_assigned.empty()) write_dialogues(cl_assigned, assign_clusters(index, ds, *emb));
            return 0;
        }
        if (*tr) return run_train(ta, seed, out);
        if (*gen) return run_generate(ga, s, out);
        if (*em) return run_eval_metrics(em_pred, em_ref, em_out, out);
        if (*ej) return run_eval_judge(ja, s, out);
        if (*ex) {
            auto model = load_checkpoint(ex_ckpt);
            export_representations(model, read_dialogues(ex_in), std::filesystem::path(ex_out));
            return 0;
        }
    } catch (const CLI::ValidationError& e) {
        CLI::App* target = &app;
        for (auto* sc : app.get_subcommands()) target = sc;
        err << "error: " << e.what() << "\n" << target->help();
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace qallm
