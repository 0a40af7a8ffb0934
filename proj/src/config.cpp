#include "sketchgen/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "sketchgen/errors.hpp"

namespace sketchgen {

TransformerConfig RunConfig::model_config(int vocab_size) const {
    TransformerConfig cfg;
    cfg.num_layers = model_num_layers;
    cfg.num_heads = model_num_heads;
    cfg.width = model_width;
    cfg.ffn_hidden = model_ffn_hidden;
    cfg.vocab_size = vocab_size;
    cfg.num_classes = dataset_num_classes;
    cfg.seq_len = grid_side() * grid_side();
    cfg.init_std = model_init_std;
    return cfg;
}

EmbedderConfig RunConfig::embedder_config() const {
    EmbedderConfig cfg;
    cfg.input_side = dataset_image_side;
    cfg.pool_side = embedder_pool_side;
    cfg.hidden_dim = embedder_hidden_dim;
    cfg.num_classes = dataset_num_classes;
    cfg.init_std = embedder_init_std;
    return cfg;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig cfg = train;
    cfg.seed = derive_seed(seed, Stream::kTraining, 0);
    cfg.num_threads = threads;
    return cfg;
}

SamplerConfig RunConfig::sampler_config() const {
    SamplerConfig cfg = sampler;
    cfg.seed = seed;
    return cfg;
}

EmbedderTrainConfig RunConfig::embedder_train_config() const {
    EmbedderTrainConfig cfg;
    cfg.steps = embedder_steps;
    cfg.batch_size = embedder_batch_size;
    cfg.learning_rate = embedder_learning_rate;
    cfg.seed = derive_seed(seed, Stream::kEmbedderTrain, 0);
    return cfg;
}

namespace {

std::string normalize_key(std::string s) {
    std::replace(s.begin(), s.end(), '-', '_');
    return s;
}

struct Field {
    std::string name;  // "section.key"
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
    std::string type;
};

int parse_int(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument{""};
        return static_cast<int>(v);
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for " + key + ": '" + s + "'");
    }
}

uint64_t parse_u64(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument{""};
        return static_cast<uint64_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config: bad unsigned integer for " + key + ": '" + s + "'");
    }
}

double parse_double(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument{""};
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for " + key + ": '" + s + "'");
    }
}

bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config: bad boolean for " + key + ": '" + s + "'");
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& s, const std::string& key, Parse&& parse) {
    std::vector<T> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.empty()) throw ConfigError("config: empty list element in " + key);
        out.push_back(parse(item, key));
    }
    if (out.empty()) throw ConfigError("config: empty list for " + key);
    return out;
}

std::string format_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        auto add_int = [&](const std::string& name, auto member) {
            f.push_back({name,
                         [member, name](RunConfig& c, const std::string& s) {
                             c.*member = parse_int(s, name);
                         },
                         [member](const RunConfig& c) { return std::to_string(c.*member); },
                         "int"});
        };
        auto add_double = [&](const std::string& name, auto member) {
            f.push_back({name,
                         [member, name](RunConfig& c, const std::string& s) {
                             c.*member = parse_double(s, name);
                         },
                         [member](const RunConfig& c) { return format_double(c.*member); },
                         "float"});
        };

        add_int("dataset.num_samples", &RunConfig::dataset_num_samples);
        add_int("dataset.num_classes", &RunConfig::dataset_num_classes);
        add_int("dataset.image_side", &RunConfig::dataset_image_side);
        add_int("dataset.patch_side", &RunConfig::dataset_patch_side);
        add_double("dataset.holdout_fraction", &RunConfig::dataset_holdout_fraction);

        add_int("model.num_layers", &RunConfig::model_num_layers);
        add_int("model.num_heads", &RunConfig::model_num_heads);
        add_int("model.width", &RunConfig::model_width);
        add_int("model.ffn_hidden", &RunConfig::model_ffn_hidden);
        add_double("model.init_std", &RunConfig::model_init_std);

        f.push_back({"train.steps",
                     [](RunConfig& c, const std::string& s) { c.train.steps = parse_int(s, "train.steps"); },
                     [](const RunConfig& c) { return std::to_string(c.train.steps); }, "int"});
        f.push_back({"train.batch_size",
                     [](RunConfig& c, const std::string& s) { c.train.batch_size = parse_int(s, "train.batch_size"); },
                     [](const RunConfig& c) { return std::to_string(c.train.batch_size); }, "int"});
        f.push_back({"train.learning_rate",
                     [](RunConfig& c, const std::string& s) { c.train.learning_rate = parse_double(s, "train.learning_rate"); },
                     [](const RunConfig& c) { return format_double(c.train.learning_rate); }, "float"});
        f.push_back({"train.mask_rate_min",
                     [](RunConfig& c, const std::string& s) { c.train.mask_rate_min = parse_double(s, "train.mask_rate_min"); },
                     [](const RunConfig& c) { return format_double(c.train.mask_rate_min); }, "float"});
        f.push_back({"train.mask_rate_max",
                     [](RunConfig& c, const std::string& s) { c.train.mask_rate_max = parse_double(s, "train.mask_rate_max"); },
                     [](const RunConfig& c) { return format_double(c.train.mask_rate_max); }, "float"});
        f.push_back({"train.log_every",
                     [](RunConfig& c, const std::string& s) { c.train.log_every = parse_int(s, "train.log_every"); },
                     [](const RunConfig& c) { return std::to_string(c.train.log_every); }, "int"});
        f.push_back({"train.checkpoint_every",
                     [](RunConfig& c, const std::string& s) { c.train.checkpoint_every = parse_int(s, "train.checkpoint_every"); },
                     [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); }, "int"});

        f.push_back({"sampler.iterations",
                     [](RunConfig& c, const std::string& s) { c.sampler.iterations = parse_int(s, "sampler.iterations"); },
                     [](const RunConfig& c) { return std::to_string(c.sampler.iterations); }, "int"});
        f.push_back({"sampler.lambda_s",
                     [](RunConfig& c, const std::string& s) { c.sampler.lambda_s = parse_double(s, "sampler.lambda_s"); },
                     [](const RunConfig& c) { return format_double(c.sampler.lambda_s); }, "float"});
        f.push_back({"sampler.gamma_start",
                     [](RunConfig& c, const std::string& s) { c.sampler.gamma_start = parse_double(s, "sampler.gamma_start"); },
                     [](const RunConfig& c) { return format_double(c.sampler.gamma_start); }, "float"});
        f.push_back({"sampler.gamma_end",
                     [](RunConfig& c, const std::string& s) { c.sampler.gamma_end = parse_double(s, "sampler.gamma_end"); },
                     [](const RunConfig& c) { return format_double(c.sampler.gamma_end); }, "float"});
        f.push_back({"sampler.guidance_scale",
                     [](RunConfig& c, const std::string& s) { c.sampler.guidance_scale = parse_double(s, "sampler.guidance_scale"); },
                     [](const RunConfig& c) { return format_double(c.sampler.guidance_scale); }, "float"});
        f.push_back({"sampler.gumbel_temperature",
                     [](RunConfig& c, const std::string& s) { c.sampler.gumbel_temperature = parse_double(s, "sampler.gumbel_temperature"); },
                     [](const RunConfig& c) { return format_double(c.sampler.gumbel_temperature); }, "float"});
        f.push_back({"sampler.sample_temperature",
                     [](RunConfig& c, const std::string& s) { c.sampler.sample_temperature = parse_double(s, "sampler.sample_temperature"); },
                     [](const RunConfig& c) { return format_double(c.sampler.sample_temperature); }, "float"});
        f.push_back({"sampler.layers",
                     [](RunConfig& c, const std::string& s) {
                         c.sampler.layers = parse_list<int>(s, "sampler.layers", parse_int);
                     },
                     [](const RunConfig& c) {
                         std::string out;
                         for (std::size_t i = 0; i < c.sampler.layers.size(); ++i)
                             out += (i ? "," : "") + std::to_string(c.sampler.layers[i]);
                         return out;
                     },
                     "int list"});

        f.push_back({"refine.enabled",
                     [](RunConfig& c, const std::string& s) { c.refine_enabled = parse_bool(s, "refine.enabled"); },
                     [](const RunConfig& c) { return c.refine_enabled ? std::string("true") : std::string("false"); }, "bool"});
        add_double("refine.ratio_peak", &RunConfig::refine_ratio_peak);
        add_int("refine.steps", &RunConfig::refine_steps);

        f.push_back({"rejection.guidance_scales",
                     [](RunConfig& c, const std::string& s) {
                         c.rejection_guidance_scales =
                             parse_list<double>(s, "rejection.guidance_scales", parse_double);
                     },
                     [](const RunConfig& c) {
                         std::string out;
                         for (std::size_t i = 0; i < c.rejection_guidance_scales.size(); ++i)
                             out += (i ? "," : "") + format_double(c.rejection_guidance_scales[i]);
                         return out;
                     },
                     "float list"});
        add_double("rejection.exponent", &RunConfig::rejection_exponent);

        add_int("embedder.pool_side", &RunConfig::embedder_pool_side);
        add_int("embedder.hidden_dim", &RunConfig::embedder_hidden_dim);
        add_double("embedder.init_std", &RunConfig::embedder_init_std);
        add_int("embedder.steps", &RunConfig::embedder_steps);
        add_int("embedder.batch_size", &RunConfig::embedder_batch_size);
        add_double("embedder.learning_rate", &RunConfig::embedder_learning_rate);

        f.push_back({"run.seed",
                     [](RunConfig& c, const std::string& s) { c.seed = parse_u64(s, "run.seed"); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }, "uint"});
        add_int("run.threads", &RunConfig::threads);
        return f;
    }();
    return fields;
}

const Field& find_field(const std::string& key) {
    const std::string norm = normalize_key(key);
    for (const auto& field : schema())
        if (field.name == norm) return field;
    throw ConfigError("config: unknown key '" + key + "'");
}

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

void apply_override(RunConfig& config, const std::string& key, const std::string& value) {
    find_field(key).set(config, value);
}

bool try_apply_flag(RunConfig& config, const std::string& arg) {
    if (arg.rfind("--", 0) != 0) return false;
    const auto eq = arg.find('=');
    if (eq == std::string::npos) return false;
    const std::string key = arg.substr(2, eq - 2);
    const std::string norm = normalize_key(key);
    if (norm.find('.') == std::string::npos) return false;
    for (const auto& field : schema()) {
        if (field.name == norm) {
            field.set(config, arg.substr(eq + 1));
            return true;
        }
    }
    throw ConfigError("config: unknown flag '--" + key + "'");
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path.string());
    RunConfig config;
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ParseError("config: malformed section at line " + std::to_string(line_no));
            section = normalize_key(trim(line.substr(1, line.size() - 2)));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("config: expected key = value at line " + std::to_string(line_no));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw ParseError("config: key outside any section at line " + std::to_string(line_no));
        apply_override(config, section + "." + key, value);
    }
    return config;
}

std::string config_to_string(const RunConfig& config) {
    std::ostringstream out;
    std::string section;
    for (const auto& field : schema()) {
        const auto dot = field.name.find('.');
        const std::string sec = field.name.substr(0, dot);
        if (sec != section) {
            if (!section.empty()) out << "\n";
            out << "[" << sec << "]\n";
            section = sec;
        }
        out << field.name.substr(dot + 1) << " = " << field.get(config) << "\n";
    }
    return out.str();
}

void write_run_config(const RunConfig& config, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("config: cannot write " + path.string());
    out << config_to_string(config);
    if (!out) throw IoError("config: write failed for " + path.string());
}

std::string config_schema_help() {
    std::ostringstream out;
    RunConfig defaults;
    for (const auto& field : schema())
        out << "  --" << field.name << "=<" << field.type << ">  (default " << field.get(defaults)
            << ")\n";
    return out.str();
}

}  // namespace sketchgen
