#include "cca/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

namespace cca {

using nlohmann::json;

// ----------------------------------------------------------------------------
// Configuration

namespace {

// shortest text that reads back to the same value at the value's own precision
template <class Real>
std::string format_real(Real v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw InputError("config key " + key + ": not a number: '" + s + "'");
    }
    return v;
}

template <class Int>
Int parse_integer(const std::string& key, const std::string& s) {
    Int v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw InputError("config key " + key + ": not an integer: '" + s + "'");
    }
    return v;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F&& f) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
    return out;
}

struct Field {
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
};

std::map<std::string, Field> fields(RunConfig& c) {
    std::map<std::string, Field> f;
    auto integer = [&f](const std::string& name, int& ref) {
        f[name] = {[&ref] { return std::to_string(ref); },
                   [&ref, name](const std::string& s) { ref = parse_integer<int>(name, s); }};
    };
    auto real = [&f](const std::string& name, double& ref) {
        f[name] = {[&ref] { return format_real(ref); },
                   [&ref, name](const std::string& s) { ref = parse_double(name, s); }};
    };
    auto real_f = [&f](const std::string& name, float& ref) {
        f[name] = {[&ref] { return format_real(ref); },
                   [&ref, name](const std::string& s) { ref = static_cast<float>(parse_double(name, s)); }};
    };
    auto reals = [&f](const std::string& name, std::vector<double>& ref) {
        f[name] = {[&ref] { return join(ref, format_real<double>); },
                   [&ref, name](const std::string& s) {
                       ref.clear();
                       for (const auto& x : split_list(s)) ref.push_back(parse_double(name, x));
                   }};
    };
    auto ints = [&f](const std::string& name, std::vector<int>& ref) {
        f[name] = {[&ref] { return join(ref, [](int v) { return std::to_string(v); }); },
                   [&ref, name](const std::string& s) {
                       ref.clear();
                       for (const auto& x : split_list(s)) ref.push_back(parse_integer<int>(name, x));
                   }};
    };

    f["run.seed"] = {[&c] { return std::to_string(c.seed); },
                     [&c](const std::string& s) { c.seed = parse_integer<std::uint64_t>("run.seed", s); }};
    f["run.experiment_seeds"] = {
        [&c] { return join(c.experiment_seeds, [](std::uint64_t v) { return std::to_string(v); }); },
        [&c](const std::string& s) {
            c.experiment_seeds.clear();
            for (const auto& x : split_list(s)) {
                c.experiment_seeds.push_back(parse_integer<std::uint64_t>("run.experiment_seeds", x));
            }
        }};
    integer("run.n_templates", c.n_templates);
    integer("run.instances_per_template", c.instances_per_template);
    real("run.filter_threshold", c.filter_threshold);
    integer("run.max_length", c.max_length);
    f["run.methods"] = {[&c] { return join(c.methods, [](LocalizationMethod m) { return std::string(to_string(m)); }); },
                        [&c](const std::string& s) {
                            c.methods.clear();
                            for (const auto& x : split_list(s)) c.methods.push_back(method_from_string(x));
                        }};
    f["run.configurations"] = {[&c] { return join(c.configurations, [](const std::string& v) { return v; }); },
                               [&c](const std::string& s) {
                                   c.configurations = split_list(s);
                                   for (const auto& x : c.configurations) {
                                       if (x != "cca_mask" && x != "cca_nomask" && x != "lora") {
                                           throw InputError("unknown configuration '" + x + "'");
                                       }
                                   }
                               }};
    integer("run.control_train", c.control_train);
    integer("run.control_eval", c.control_eval);
    integer("run.max_records", c.max_records);

    integer("model.n_layers", c.model.n_layers);
    integer("model.d_model", c.model.d_model);
    integer("model.n_heads", c.model.n_heads);
    integer("model.n_kv_heads", c.model.n_kv_heads);
    integer("model.d_head", c.model.d_head);
    integer("model.d_mlp", c.model.d_mlp);
    integer("model.max_seq_len", c.model.max_seq_len);
    real_f("model.rope_base", c.model.rope_base);
    real_f("model.norm_eps", c.model.norm_eps);
    real_f("model.init_scale", c.model.init_scale);

    integer("pretrain.max_steps", c.pretrain.max_steps);
    integer("pretrain.batch_size", c.pretrain.batch_size);
    real("pretrain.learning_rate", c.pretrain.learning_rate);
    integer("pretrain.warmup_steps", c.pretrain.warmup_steps);
    real("pretrain.weight_decay", c.pretrain.weight_decay);
    real("pretrain.max_grad_norm", c.pretrain.max_grad_norm);
    real("pretrain.control_fraction", c.pretrain.control_fraction);
    integer("pretrain.pool_per_template", c.pretrain.pool_per_template);
    integer("pretrain.eval_every", c.pretrain.eval_every);
    integer("pretrain.monitor_size", c.pretrain.monitor_size);
    real("pretrain.band_low", c.pretrain.band_low);
    real("pretrain.band_high", c.pretrain.band_high);
    real("pretrain.stop_at", c.pretrain.stop_at);

    integer("traces.max_resamples", c.pairs.max_resamples);
    real("traces.temperature", c.pairs.temperature);

    real("dcm.learning_rate", c.dcm.learning_rate);
    integer("dcm.epochs", c.dcm.epochs);
    integer("dcm.batch_size", c.dcm.batch_size);
    reals("dcm.lambdas", c.lambdas);
    real("dcm.early_stop_fraction", c.dcm.early_stop_fraction);
    real_f("dcm.threshold", c.dcm.threshold);
    real_f("dcm.init_value", c.dcm.init_value);
    f["dcm.scorer"] = {[&c] { return c.lambda_scorer; },
                       [&c](const std::string& s) {
                           if (s != "dry_run" && s != "flip_rate") throw InputError("dcm.scorer: dry_run or flip_rate");
                           c.lambda_scorer = s;
                       }};
    real("dcm.dry_run_lr", c.dry_run_lr);

    integer("amplify.steps", c.amplify.steps);
    reals("amplify.learning_rates", c.amplify.lr_candidates);
    ints("amplify.cadence", c.amplify.cadence);

    integer("lora.rank", c.lora.rank);
    real_f("lora.alpha", c.lora.alpha);
    real_f("lora.dropout", c.lora.dropout);
    real("lora.weight_decay", c.lora.weight_decay);
    real("lora.max_grad_norm", c.lora.max_grad_norm);
    integer("lora.warmup_steps", c.lora.warmup_steps);
    integer("lora.epochs", c.lora.epochs);
    integer("lora.batch_size", c.lora.batch_size);
    integer("lora.eval_every", c.lora.eval_every);
    reals("lora.learning_rates", c.lora.lr_candidates);

    integer("eval.batch_size", c.eval.batch_size);
    return f;
}

}  // namespace

ModelConfig RunConfig::toy_model() {
    ModelConfig m;
    m.n_layers = 4;
    m.d_model = 128;
    m.n_heads = 4;
    m.n_kv_heads = 2;
    m.d_head = 32;
    m.d_mlp = 512;
    m.max_seq_len = 256;
    m.vocab_size = Tokenizer::standard().size();
    return m;
}

std::map<std::string, std::string> RunConfig::to_map() const {
    std::map<std::string, std::string> out;
    for (const auto& [k, f] : fields(const_cast<RunConfig&>(*this))) out[k] = f.get();
    return out;
}

void RunConfig::apply(const std::map<std::string, std::string>& kv) {
    auto f = fields(*this);
    for (const auto& [k, v] : kv) {
        auto it = f.find(k);
        if (it == f.end()) throw InputError("unknown config key '" + k + "'");
        it->second.set(v);
    }
}

std::string RunConfig::canonical_text() const {
    std::string out;
    for (const auto& [k, v] : to_map()) out += k + "=" + v + "\n";
    return out;
}

std::string RunConfig::hash() const {
    Fnv1a h;
    h.update(canonical_text());
    return hex64(h.digest());
}

RunConfig load_run_config(const std::filesystem::path& ini, const std::function<const char*(const char*)>& getenv) {
    RunConfig cfg;
    std::map<std::string, std::string> kv;
    if (!ini.empty()) {
        boost::property_tree::ptree pt;
        try {
            boost::property_tree::read_ini(ini.string(), pt);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw InputError(std::string("cannot read config: ") + e.what());
        }
        for (const auto& [section, body] : pt) {
            if (body.empty()) throw InputError("config key '" + section + "' is outside a section");
            for (const auto& [key, value] : body) kv[section + "." + key] = value.data();
        }
    }
    for (const auto& [key, unused] : cfg.to_map()) {
        std::string env = "CCA_";
        for (char c : key) env += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        if (const char* v = getenv ? getenv(env.c_str()) : nullptr) kv[key] = v;
    }
    cfg.apply(kv);
    cfg.model.validate();
    cfg.amplify.validate();
    if (cfg.experiment_seeds.empty() || cfg.methods.empty() || cfg.configurations.empty()) {
        throw InputError("run needs at least one seed, method and configuration");
    }
    if (cfg.max_records < 0) throw InputError("run.max_records must be non-negative");
    return cfg;
}

// ----------------------------------------------------------------------------
// Stages

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> s = {Stage::pretrain, Stage::gen_corpus, Stage::filter, Stage::traces,
                                         Stage::localize, Stage::dcm,        Stage::amplify, Stage::lora,
                                         Stage::eval,     Stage::report};
    return s;
}

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::gen_corpus: return "gen-corpus";
        case Stage::filter: return "filter";
        case Stage::traces: return "traces";
        case Stage::localize: return "localize";
        case Stage::dcm: return "dcm";
        case Stage::amplify: return "amplify";
        case Stage::lora: return "lora";
        case Stage::eval: return "eval";
        case Stage::report: return "report";
    }
    return "?";
}

Stage stage_from_string(std::string_view s) {
    for (Stage st : all_stages()) {
        if (to_string(st) == s) return st;
    }
    throw InputError("unknown stage '" + std::string(s) + "'");
}

std::string configuration_label(const std::string& configuration, std::optional<LocalizationMethod> method) {
    if (configuration == "lora") return "LoRA";
    const std::string m = method == LocalizationMethod::branching ? "Branching" : "Prefix";
    return (configuration == "cca_mask" ? "CCA w mask (" : "CCA w/o mask (") + m + ")";
}

namespace {

/// Artifact-name prefixes each stage may read.
const std::map<Stage, std::vector<std::string>>& allowed_inputs() {
    static const std::map<Stage, std::vector<std::string>> m = {
        {Stage::pretrain, {}},
        {Stage::gen_corpus, {"model.ckpt"}},
        {Stage::filter, {"model.ckpt", "corpus.jsonl", "templates.json"}},
        {Stage::traces, {"model.ckpt", "corpus.jsonl", "templates.json", "filter.json"}},
        {Stage::localize, {"model.ckpt", "traces_"}},
        {Stage::dcm, {"model.ckpt", "records_", "corpus.jsonl", "templates.json", "filter.json"}},
        {Stage::amplify, {"model.ckpt", "records_", "mask_", "corpus.jsonl", "templates.json", "filter.json"}},
        {Stage::lora, {"model.ckpt", "corpus.jsonl", "templates.json", "filter.json"}},
        {Stage::eval,
         {"model.ckpt", "corpus.jsonl", "templates.json", "filter.json", "controls.jsonl", "update_", "amplify_",
          "lora_"}},
        {Stage::report, {"eval.json", "mask_", "traces_", "records_", "lora_", "corpus.jsonl", "templates.json"}},
    };
    return m;
}

std::uint64_t file_hash(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    Fnv1a h;
    h.update(ss.str());
    return h.digest();
}

json read_json(const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw FormatError("cannot read " + p.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

void write_json(const std::filesystem::path& p, const json& j) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw FormatError("cannot write " + p.string());
    os << j.dump(1) << '\n';
}

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw FormatError("cannot write " + p.string());
    os << s;
}

/// Prepends "# config_hash=..." to a CSV file.
void stamp_csv(const std::filesystem::path& p, const std::string& hash) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    is.close();
    write_text(p, "# config_hash=" + hash + "\n" + ss.str());
}

std::string seed_tag(std::uint64_t s) { return "s" + std::to_string(s); }

std::string method_tag(LocalizationMethod m) { return std::string(to_string(m)); }

json trials_json(const std::vector<LrTrial>& trials) {
    json a = json::array();
    for (const auto& t : trials) {
        a.push_back({{"learning_rate", t.learning_rate},
                     {"diverged", t.diverged},
                     {"best_val", t.diverged ? json(nullptr) : json(t.best_val)},
                     {"best_step", t.best_step}});
    }
    return a;
}

}  // namespace

Pipeline::Pipeline(RunConfig cfg, std::filesystem::path run_dir, Logger log)
    : cfg_(std::move(cfg)), dir_(std::move(run_dir)), hash_(cfg_.hash()), log_(std::move(log)),
      tok_(Tokenizer::standard()) {
    cfg_.model.vocab_size = tok_.size();
    cfg_.model.seed = cfg_.seed;
    std::filesystem::create_directories(dir_);
    const auto lock = dir_ / ".lock";
    lock_fd_ = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (lock_fd_ < 0) {
        throw Error("run directory " + dir_.string() + " is locked by another writer (" + lock.string() + ")");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(lock_fd_, pid.data(), pid.size());
    try {
        const auto run_json = dir_ / "run.json";
        if (std::filesystem::exists(run_json)) {
            const json j = read_json(run_json);
            if (j.value("config_hash", "") != hash_) {
                throw StalenessError("run directory " + dir_.string() + " was produced with config hash " +
                                     j.value("config_hash", "?") + ", current config hashes to " + hash_);
            }
        } else {
            write_json(run_json, {{"config_hash", hash_}, {"config", cfg_.to_map()}});
        }
    } catch (...) {
        ::close(lock_fd_);
        std::filesystem::remove(lock);
        throw;
    }
}

Pipeline::~Pipeline() {
    if (lock_fd_ >= 0) {
        ::close(lock_fd_);
        std::error_code ec;
        std::filesystem::remove(dir_ / ".lock", ec);
    }
}

void Pipeline::say(const std::string& msg) const {
    if (log_) log_(msg);
}

std::filesystem::path Pipeline::need(const std::string& artifact, Stage producer) {
    const auto& allowed = allowed_inputs().at(current_);
    const bool ok = std::any_of(allowed.begin(), allowed.end(),
                                [&](const std::string& prefix) { return artifact.rfind(prefix, 0) == 0; });
    if (!ok) {
        throw Error("stage " + std::string(to_string(current_)) + " may not read " + artifact);
    }
    const auto p = dir_ / artifact;
    if (!std::filesystem::exists(p)) {
        throw DependencyError("missing " + artifact + "; run stage '" + std::string(to_string(producer)) + "' first",
                              producer);
    }
    inputs_.insert(artifact);
    return p;
}

std::filesystem::path Pipeline::produce(const std::string& artifact) {
    outputs_.insert(artifact);
    const auto p = dir_ / artifact;
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    return p;
}

void Pipeline::write_manifest() {
    const auto path = dir_ / "manifest.json";
    json m = std::filesystem::exists(path) ? read_json(path) : json{{"config_hash", hash_}, {"stages", json::object()}};
    // a filtered rerun adds to the stage entry instead of replacing it
    json& entry = m["stages"][std::string(to_string(current_))];
    std::set<std::string> ins = inputs_;
    if (entry.contains("inputs")) {
        for (const auto& i : entry["inputs"]) ins.insert(i.get<std::string>());
    }
    entry["inputs"] = ins;
    if (!entry.contains("outputs")) entry["outputs"] = json::object();
    for (const auto& o : outputs_) entry["outputs"][o] = hex64(file_hash(dir_ / o));
    write_json(path, m);
}

void Pipeline::run(Stage stage, const StageFilter& filter) {
    current_ = stage;
    inputs_.clear();
    outputs_.clear();
    const auto t0 = std::chrono::steady_clock::now();
    say("[" + std::string(to_string(stage)) + "] start");
    switch (stage) {
        case Stage::pretrain: stage_pretrain(); break;
        case Stage::gen_corpus: stage_gen_corpus(); break;
        case Stage::filter: stage_filter(); break;
        case Stage::traces: stage_traces(filter); break;
        case Stage::localize: stage_localize(filter); break;
        case Stage::dcm: stage_dcm(filter); break;
        case Stage::amplify: stage_amplify(filter); break;
        case Stage::lora: stage_lora(filter); break;
        case Stage::eval: stage_eval(); break;
        case Stage::report: stage_report(); break;
    }
    write_manifest();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << "[" << to_string(stage) << "] done in " << std::fixed << std::setprecision(1) << secs << " s";
    say(os.str());
}

void Pipeline::run_all(const StageFilter& filter) {
    for (Stage s : all_stages()) {
        if (s == Stage::dcm && !wants("cca_mask", filter)) continue;
        if (s == Stage::lora && !wants("lora", filter)) continue;
        if (s == Stage::amplify && !wants("cca_mask", filter) && !wants("cca_nomask", filter)) continue;
        run(s, filter);
    }
}

std::vector<std::uint64_t> Pipeline::seeds(const StageFilter& f) const {
    if (f.seed) return {*f.seed};
    return cfg_.experiment_seeds;
}

std::vector<LocalizationMethod> Pipeline::methods(const StageFilter& f) const {
    if (f.method) return {*f.method};
    return cfg_.methods;
}

bool Pipeline::wants(const std::string& configuration, const StageFilter& f) const {
    if (f.configuration) return *f.configuration == configuration;
    return std::find(cfg_.configurations.begin(), cfg_.configurations.end(), configuration) != cfg_.configurations.end();
}

Parameters Pipeline::load_model() { return load_checkpoint(need("model.ckpt", Stage::pretrain)); }

Corpus Pipeline::load_corpus() {
    Corpus c;
    c.templates = read_templates_json(need("templates.json", Stage::gen_corpus));
    c.instances = read_corpus_jsonl(need("corpus.jsonl", Stage::gen_corpus));
    return c;
}

std::vector<int> Pipeline::retained_templates() {
    return read_json(need("filter.json", Stage::filter)).at("retained").get<std::vector<int>>();
}

std::vector<Instance> Pipeline::split_of_retained(const Corpus& corpus, Split s) {
    const auto kept = retained_templates();
    const std::set<int> keep(kept.begin(), kept.end());
    std::vector<Instance> out;
    for (const auto& inst : corpus.instances) {
        if (inst.split == s && keep.count(inst.template_id)) out.push_back(inst);
    }
    return out;
}

Validator Pipeline::val_validator(const Corpus& corpus) {
    auto val = std::make_shared<std::vector<Instance>>(split_of_retained(corpus, Split::val));
    EvalOptions opts = cfg_.eval;
    opts.max_length = cfg_.max_length;
    const Tokenizer* tok = &tok_;
    return [val, opts, tok](const Parameters& p) { return evaluate(p, *tok, *val, "val", opts).accuracy; };
}

namespace {

Corpus build_corpus(const RunConfig& cfg) {
    Corpus c = generate_corpus(cfg.n_templates, cfg.instances_per_template, cfg.seed);
    split(c, cfg.seed);
    return c;
}

std::vector<ControlSuite> build_controls(const RunConfig& cfg) {
    return generate_control_suites(cfg.seed, cfg.control_train, cfg.control_eval);
}

}  // namespace

void Pipeline::stage_pretrain() {
    // the corpus is rebuilt in memory so its questions can be excluded
    const Corpus corpus = build_corpus(cfg_);
    const auto controls = build_controls(cfg_);
    PretrainConfig pc = cfg_.pretrain;
    pc.seed = derive_seed(cfg_.seed, {0x77});
    pc.max_length = cfg_.max_length;
    const PretrainResult r = pretrain(cfg_.model, tok_, corpus, controls, pc, [this](const PretrainCheck& c) {
        std::ostringstream os;
        os << "  step " << c.step << " loss " << std::setprecision(4) << c.loss << " monitor accuracy " << c.accuracy;
        say(os.str());
    });
    if (!r.in_band) {
        say("  warning: monitored accuracy " + format_real(r.accuracy) + " is outside the target band");
    }
    save_checkpoint(produce("model.ckpt"), r.params,
                    {{"config_hash", hash_},
                     {"pretrain.steps", std::to_string(r.steps)},
                     {"pretrain.accuracy", format_real(r.accuracy)},
                     {"pretrain.in_band", r.in_band ? "1" : "0"}});
    std::ostringstream csv;
    csv << "# config_hash=" << hash_ << "\nstep,loss,monitor_accuracy\n";
    csv.precision(9);
    for (const auto& c : r.checks) csv << c.step << ',' << c.loss << ',' << c.accuracy << '\n';
    write_text(produce("pretrain.csv"), csv.str());
}

void Pipeline::stage_gen_corpus() {
    need("model.ckpt", Stage::pretrain);  // orders the DAG; not read
    const Corpus corpus = build_corpus(cfg_);
    write_corpus_jsonl(produce("corpus.jsonl"), corpus, hash_);
    write_templates_json(produce("templates.json"), corpus.templates, hash_);
    write_controls_jsonl(produce("controls.jsonl"), build_controls(cfg_), hash_);
}

void Pipeline::stage_filter() {
    const Parameters model = load_model();
    const Corpus corpus = load_corpus();
    std::vector<Instance> train;
    for (const auto& inst : corpus.instances) {
        if (inst.split == Split::train) train.push_back(inst);
    }
    EvalOptions opts = cfg_.eval;
    opts.max_length = cfg_.max_length;
    const EvalResult r = evaluate(model, tok_, train, "train", opts);
    const auto kept = filter_templates(corpus, correctness(r), Split::train, cfg_.filter_threshold);
    json per = json::object();
    for (const auto& [tid, acc] : r.per_template) per[std::to_string(tid)] = acc;
    write_json(produce("filter.json"), {{"config_hash", hash_},
                                        {"threshold", cfg_.filter_threshold},
                                        {"train_accuracy", r.accuracy},
                                        {"retained", kept},
                                        {"per_template", per}});
    say("  train accuracy " + format_real(r.accuracy) + ", retained " + std::to_string(kept.size()) + " of " +
        std::to_string(corpus.templates.size()) + " templates");
}

void Pipeline::stage_traces(const StageFilter& f) {
    const Parameters model = load_model();
    const Corpus corpus = load_corpus();
    const auto train = split_of_retained(corpus, Split::train);
    const Decoder decoder(model);
    for (std::uint64_t s : seeds(f)) {
        PairConfig pc = cfg_.pairs;
        pc.seed = derive_seed(cfg_.seed, {0x7a, s});
        pc.max_length = cfg_.max_length;
        std::vector<TracePair> pairs;
        for (auto& p : make_trace_pairs(decoder, tok_, train, pc)) {
            if (p) pairs.push_back(std::move(*p));
        }
        write_trace_pairs_jsonl(produce("traces_" + seed_tag(s) + ".jsonl"), pairs, hash_);
        say("  seed " + std::to_string(s) + ": " + std::to_string(pairs.size()) + " pairs from " +
            std::to_string(train.size()) + " instances");
    }
}

void Pipeline::stage_localize(const StageFilter& f) {
    const Parameters model = load_model();
    const Decoder decoder(model);
    BranchingConfig bc;
    bc.max_length = cfg_.max_length;
    for (std::uint64_t s : seeds(f)) {
        const auto pairs = read_trace_pairs_jsonl(need("traces_" + seed_tag(s) + ".jsonl", Stage::traces));
        for (LocalizationMethod m : methods(f)) {
            const auto ds = build_dataset(pairs, m, decoder, tok_, bc);
            const std::string tag = method_tag(m) + "_" + seed_tag(s);
            write_records_jsonl(produce("records_" + tag + ".jsonl"), ds.records, hash_);
            json skipped = json::object();
            for (const auto& [why, n] : ds.report.skipped) skipped[std::string(to_string(why))] = n;
            write_json(produce("localize_" + tag + ".json"), {{"config_hash", hash_},
                                                              {"method", method_tag(m)},
                                                              {"pairs", ds.report.pairs},
                                                              {"records", ds.report.records},
                                                              {"skipped", skipped}});
            say("  " + tag + ": " + std::to_string(ds.records.size()) + " records from " +
                std::to_string(pairs.size()) + " pairs");
        }
    }
}

std::vector<ErrorLocalizationRecord> Pipeline::training_records(LocalizationMethod m, std::uint64_t s) {
    auto records =
        read_records_jsonl(need("records_" + method_tag(m) + "_" + seed_tag(s) + ".jsonl", Stage::localize));
    const auto cap = static_cast<std::size_t>(cfg_.max_records);
    if (cap == 0 || records.size() <= cap) return records;
    std::vector<std::size_t> idx(records.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(cfg_.seed, {0x5e, s, static_cast<std::uint64_t>(m)}));
    rng.shuffle(idx);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());  // keep file order
    std::vector<ErrorLocalizationRecord> out;
    out.reserve(cap);
    for (std::size_t i : idx) out.push_back(std::move(records[i]));
    return out;
}

void Pipeline::stage_dcm(const StageFilter& f) {
    const Parameters model = load_model();
    const Corpus corpus = load_corpus();
    const Validator val = val_validator(corpus);
    for (std::uint64_t s : seeds(f)) {
        for (LocalizationMethod m : methods(f)) {
            const std::string tag = method_tag(m) + "_" + seed_tag(s);
            const auto records = training_records(m, s);
            if (records.empty()) {
                // nothing to localize: an empty support leaves the update a no-op
                write_mask_json(produce("mask_" + tag + ".json"), model.config(), Mask::zeros(model.config()),
                                cfg_.dcm.threshold, hash_, 0.0);
                write_json(produce("dcm_" + tag + ".json"), {{"config_hash", hash_},
                                                             {"scorer", cfg_.lambda_scorer},
                                                             {"skipped", "no records"},
                                                             {"trials", json::array()}});
                say("  " + tag + ": no records, empty mask");
                continue;
            }
            DcmConfig dc = cfg_.dcm;
            dc.seed = derive_seed(cfg_.seed, {0xd1, s, static_cast<std::uint64_t>(m)});
            const MaskScorer scorer =
                cfg_.lambda_scorer == "dry_run"
                    ? dry_run_scorer(model, records, cfg_.amplify, cfg_.dry_run_lr, dc.threshold, val)
                    : flip_rate_scorer(model, records, dc.threshold);
            const LambdaSweep sweep = sweep_lambda(model, records, dc, cfg_.lambdas, scorer);
            const auto& best = sweep.trials[sweep.best];
            write_mask_json(produce("mask_" + tag + ".json"), model.config(), best.result.mask, dc.threshold, hash_,
                            best.lambda);
            json trials = json::array();
            for (const auto& t : sweep.trials) {
                trials.push_back({{"lambda", t.lambda},
                                  {"score", t.score},
                                  {"selected", t.result.report.selected},
                                  {"percentage", t.result.report.percentage},
                                  {"steps", t.result.steps},
                                  {"epochs_run", t.result.epochs_run},
                                  {"early_stopped", t.result.early_stopped}});
            }
            write_json(produce("dcm_" + tag + ".json"), {{"config_hash", hash_},
                                                         {"scorer", cfg_.lambda_scorer},
                                                         {"best_lambda", best.lambda},
                                                         {"trials", trials}});
            std::ostringstream os;
            os << "  " << tag << ": lambda " << best.lambda << ", " << best.result.report.selected << " of "
               << best.result.report.total << " components (" << std::setprecision(3)
               << best.result.report.percentage * 100.0 << "%)";
            say(os.str());
        }
    }
}

void Pipeline::stage_amplify(const StageFilter& f) {
    const Parameters model = load_model();
    const Corpus corpus = load_corpus();
    const Validator val = val_validator(corpus);
    for (std::uint64_t s : seeds(f)) {
        for (LocalizationMethod m : methods(f)) {
            const std::string mtag = method_tag(m) + "_" + seed_tag(s);
            const auto records = training_records(m, s);
            for (const std::string conf : {"cca_mask", "cca_nomask"}) {
                if (!wants(conf, f)) continue;
                const std::string tag = conf + "_" + mtag;
                json info = {{"config_hash", hash_},
                             {"configuration", conf},
                             {"method", method_tag(m)},
                             {"seed", s},
                             {"dataset_size", records.size()}};
                UpdateResult best;
                std::vector<LrTrial> trials;
                UpdateScope scope = UpdateScope::everything();
                if (conf == std::string("cca_mask")) {
                    float threshold = 0.5f;
                    const Mask mask = read_mask_json(need("mask_" + mtag + ".json", Stage::dcm), &threshold);
                    scope = UpdateScope::of(selected_components(model.config(), mask, threshold));
                    info["mask_fraction"] = mask_report(model.config(), mask, threshold).percentage;
                    info["components"] = scope.components.size();
                }
                if (records.empty() || (!scope.all_weights && scope.components.empty())) {
                    // nothing to update: the original checkpoint stands in
                    best.best = model;
                    best.best_val = val(model);
                    info["skipped"] = records.empty() ? "no records" : "empty mask";
                } else {
                    LrSweep sw = sweep_lr(model, records, scope, cfg_.amplify, val);
                    best = std::move(sw.best);
                    trials = std::move(sw.trials);
                }
                info["learning_rate"] = best.learning_rate;
                info["best_step"] = best.best_step;
                info["best_val"] = best.best_val;
                info["trials"] = trials_json(trials);
                save_checkpoint(produce("update_" + tag + ".ckpt"), best.best, {{"config_hash", hash_}});
                const auto log_path = produce("steplog_" + tag + ".csv");
                write_step_log_csv(log_path, best.log);
                stamp_csv(log_path, hash_);
                write_json(produce("amplify_" + tag + ".json"), info);
                std::ostringstream os;
                os << "  " << tag << ": lr " << best.learning_rate << ", step " << best.best_step << ", val "
                   << best.best_val;
                say(os.str());
            }
        }
    }
}

void Pipeline::stage_lora(const StageFilter& f) {
    const Parameters model = load_model();
    const Corpus corpus = load_corpus();
    const Validator val = val_validator(corpus);
    const auto train = split_of_retained(corpus, Split::train);
    std::vector<int> ids;
    for (const auto& inst : train) ids.push_back(inst.instance_id);
    for (std::uint64_t s : seeds(f)) {
        LoraConfig lc = cfg_.lora;
        lc.seed = derive_seed(cfg_.seed, {0x10, s});
        const LoraResult r = lora_baseline(model, tok_, train, lc, val);
        const std::string tag = seed_tag(s);
        r.adapters.save(produce("lora_" + tag + ".cca"), {{"config_hash", hash_}});
        const auto log_path = produce("steplog_lora_" + tag + ".csv");
        write_step_log_csv(log_path, r.log);
        stamp_csv(log_path, hash_);
        write_json(produce("lora_" + tag + ".json"), {{"config_hash", hash_},
                                                      {"seed", s},
                                                      {"learning_rate", r.learning_rate},
                                                      {"best_step", r.best_step},
                                                      {"best_val", r.best_val},
                                                      {"trials", trials_json(r.trials)},
                                                      {"dataset_size", train.size()},
                                                      {"train_ids", ids}});
        std::ostringstream os;
        os << "  seed " << s << ": lr " << r.learning_rate << ", step " << r.best_step << ", val " << r.best_val;
        say(os.str());
    }
}

void Pipeline::stage_eval() {
    const Parameters model = load_model();
    const Corpus corpus = load_corpus();
    const auto test = split_of_retained(corpus, Split::test);
    const auto controls = read_controls_jsonl(need("controls.jsonl", Stage::gen_corpus));
    EvalOptions opts = cfg_.eval;
    opts.max_length = cfg_.max_length;

    auto measure = [&](const Parameters& p) {
        json controls_acc = evaluate_controls(p, tok_, controls, opts);
        return json{{"test_accuracy", evaluate(p, tok_, test, "test", opts).accuracy}, {"controls", controls_acc}};
    };
    json out = {{"config_hash", hash_}, {"dataset", "toy-math"}, {"test_size", test.size()}};
    out["original"] = measure(model);
    say("  original test accuracy " + format_real(out["original"]["test_accuracy"].get<double>()));
    json runs = json::array();
    for (std::uint64_t s : cfg_.experiment_seeds) {
        for (LocalizationMethod m : cfg_.methods) {
            for (const std::string conf : {"cca_mask", "cca_nomask"}) {
                if (!wants(conf, {})) continue;
                const std::string tag = conf + "_" + method_tag(m) + "_" + seed_tag(s);
                const json info = read_json(need("amplify_" + tag + ".json", Stage::amplify));
                json r = measure(load_checkpoint(need("update_" + tag + ".ckpt", Stage::amplify)));
                r["configuration"] = conf;
                r["label"] = configuration_label(conf, m);
                r["method"] = method_tag(m);
                r["seed"] = s;
                r["dataset_size"] = info.at("dataset_size");
                r["mask_fraction"] = info.value("mask_fraction", json(nullptr));
                say("  " + tag + " test accuracy " + format_real(r["test_accuracy"].get<double>()));
                runs.push_back(r);
            }
        }
        if (wants("lora", {})) {
            const std::string tag = seed_tag(s);
            const json info = read_json(need("lora_" + tag + ".json", Stage::lora));
            const LoraAdapters ad = LoraAdapters::load(need("lora_" + tag + ".cca", Stage::lora));
            json r = measure(merged(model, ad));
            r["configuration"] = "lora";
            r["label"] = configuration_label("lora", std::nullopt);
            r["method"] = nullptr;
            r["seed"] = s;
            r["dataset_size"] = info.at("dataset_size");
            r["mask_fraction"] = nullptr;
            say("  lora_" + tag + " test accuracy " + format_real(r["test_accuracy"].get<double>()));
            runs.push_back(r);
        }
    }
    out["runs"] = runs;
    write_json(produce("eval.json"), out);
}

void Pipeline::stage_report() {
    const json ev = read_json(need("eval.json", Stage::eval));
    const Corpus corpus = load_corpus();

    // split hygiene over every training artifact of this run
    for (std::uint64_t s : cfg_.experiment_seeds) {
        std::vector<int> ids;
        const auto traces = dir_ / ("traces_" + seed_tag(s) + ".jsonl");
        if (std::filesystem::exists(traces)) {
            for (const auto& p : read_trace_pairs_jsonl(need(traces.filename().string(), Stage::traces))) {
                ids.push_back(p.instance_id);
            }
        }
        for (LocalizationMethod m : cfg_.methods) {
            const auto rec = "records_" + method_tag(m) + "_" + seed_tag(s) + ".jsonl";
            if (!std::filesystem::exists(dir_ / rec)) continue;
            for (const auto& r : read_records_jsonl(need(rec, Stage::localize))) ids.push_back(r.instance_id);
        }
        const auto lora = "lora_" + seed_tag(s) + ".json";
        if (std::filesystem::exists(dir_ / lora)) {
            for (int id : read_json(need(lora, Stage::lora)).at("train_ids")) ids.push_back(id);
        }
        check_split_hygiene(corpus, ids, "seed " + std::to_string(s) + " training artifacts");
    }

    const json& orig = ev.at("original");
    const std::map<std::string, double> orig_controls = orig.at("controls");
    std::vector<ConfigurationRun> runs;
    std::vector<std::string> order;
    for (LocalizationMethod m : {LocalizationMethod::prefix, LocalizationMethod::branching}) {
        for (const char* conf : {"cca_mask", "cca_nomask"}) order.push_back(configuration_label(conf, m));
    }
    order.push_back(configuration_label("lora", std::nullopt));
    for (const auto& label : order) {
        ConfigurationRun run;
        run.configuration = label;
        std::vector<double> sizes, fractions;
        for (const auto& r : ev.at("runs")) {
            if (r.at("label") != label) continue;
            run.test_accuracy.push_back(r.at("test_accuracy").get<double>());
            run.control_accuracy.push_back(r.at("controls").get<std::map<std::string, double>>());
            sizes.push_back(r.at("dataset_size").get<double>());
            if (!r.at("mask_fraction").is_null()) fractions.push_back(r.at("mask_fraction").get<double>());
        }
        if (run.test_accuracy.empty()) continue;
        run.dataset_size = static_cast<int>(std::lround(seed_stats(sizes).mean));
        if (!fractions.empty()) run.mask_fraction = seed_stats(fractions).mean;
        runs.push_back(std::move(run));
    }
    ExperimentReport rep =
        compare_configurations(orig.at("test_accuracy").get<double>(), orig_controls, runs, ev.at("dataset"));
    rep.config_hash = hash_;
    const ModelConfig mc = [&] {
        ModelConfig c = cfg_.model;
        return c;
    }();
    for (std::uint64_t s : cfg_.experiment_seeds) {
        for (LocalizationMethod m : cfg_.methods) {
            const auto name = "mask_" + method_tag(m) + "_" + seed_tag(s) + ".json";
            if (!std::filesystem::exists(dir_ / name)) continue;
            float threshold = 0.5f;
            const Mask mask = read_mask_json(need(name, Stage::dcm), &threshold);
            rep.masks.emplace_back(configuration_label("cca_mask", m) + " seed " + std::to_string(s),
                                   mask_report(mc, mask, threshold));
        }
    }
    const auto dir = dir_ / "report";
    write_report(dir, rep);
    for (const char* f : {"table1.csv", "table2.csv", "table9.csv"}) {
        stamp_csv(dir / f, hash_);
    }
    for (const char* f : {"table1.csv", "table2.csv", "table9.csv", "report.md", "report.json"}) {
        produce(std::string("report/") + f);
    }
    say(table1_csv(rep));
}

}  // namespace cca
