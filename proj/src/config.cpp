#include "sre/config.hpp"

#include <fstream>
#include <sstream>

namespace sre {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: bad numeric value '" + v + "' for key '" + key + "'");
    }
}

long parse_long(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        long n = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer value '" + v + "' for key '" + key + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        unsigned long long n = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<uint64_t>(n);
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer value '" + v + "' for key '" + key + "'");
    }
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
        kv[key] = value;
    }
    return kv;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void apply_train_config(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, value] : kv) {
        if (key == "iterations") cfg.iterations = static_cast<int>(parse_long(key, value));
        else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_long(key, value));
        else if (key == "accumulation_steps")
            cfg.accumulation_steps = static_cast<int>(parse_long(key, value));
        else if (key == "lr_decoder") cfg.lr_decoder = parse_double(key, value);
        else if (key == "lr_prompt") cfg.lr_prompt = parse_double(key, value);
        else if (key == "weight_decay") cfg.weight_decay = parse_double(key, value);
        else if (key == "lambda") cfg.lambda = parse_double(key, value);
        else if (key == "omega") cfg.omega = parse_double(key, value);
        else if (key == "seed") cfg.seed = parse_u64(key, value);
        else if (key == "mode") cfg.mode = mode_from_name(value);
        else if (key == "disparity") cfg.disparity = disparity_from_name(value);
        else if (key == "precision") cfg.precision = precision_from_name(value);
        else if (key == "checkpoint_interval")
            cfg.checkpoint_interval = static_cast<int>(parse_long(key, value));
        else if (key == "beta1") cfg.beta1 = parse_double(key, value);
        else if (key == "beta2") cfg.beta2 = parse_double(key, value);
        else if (key == "adam_eps") cfg.adam_eps = parse_double(key, value);
        else if (key == "val_fraction") cfg.val_fraction = parse_double(key, value);
        else if (key == "image_size") cfg.encoder.image_size = static_cast<int>(parse_long(key, value));
        else if (key == "patch_size") cfg.encoder.patch_size = static_cast<int>(parse_long(key, value));
        else if (key == "encoder_layers") cfg.encoder.layers = static_cast<int>(parse_long(key, value));
        else if (key == "embed_dim") cfg.encoder.embed_dim = static_cast<int>(parse_long(key, value));
        else if (key == "heads") cfg.encoder.heads = static_cast<int>(parse_long(key, value));
        else if (key == "factor_range") cfg.augment.factor_range = static_cast<float>(parse_double(key, value));
        else if (key == "hue_range") cfg.augment.hue_range = static_cast<float>(parse_double(key, value));
        else if (key == "sigma_min") cfg.augment.sigma_min = static_cast<float>(parse_double(key, value));
        else if (key == "sigma_max") cfg.augment.sigma_max = static_cast<float>(parse_double(key, value));
        else if (key == "blend_min") cfg.augment.blend_min = static_cast<float>(parse_double(key, value));
        else if (key == "blend_max") cfg.augment.blend_max = static_cast<float>(parse_double(key, value));
        else throw ConfigError("config: unknown key '" + key + "'");
    }
    cfg.validate();
}

std::string dump_train_config(const TrainConfig& cfg) {
    std::ostringstream out;
    out << "iterations = " << cfg.iterations << "\n";
    out << "batch_size = " << cfg.batch_size << "\n";
    out << "accumulation_steps = " << cfg.accumulation_steps << "\n";
    out << "lr_decoder = " << cfg.lr_decoder << "\n";
    out << "lr_prompt = " << cfg.lr_prompt << "\n";
    out << "weight_decay = " << cfg.weight_decay << "\n";
    out << "lambda = " << cfg.lambda << "\n";
    out << "omega = " << cfg.omega << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "mode = " << mode_name(cfg.mode) << "\n";
    out << "disparity = " << disparity_name(cfg.disparity) << "\n";
    out << "precision = " << precision_name(cfg.precision) << "\n";
    out << "checkpoint_interval = " << cfg.checkpoint_interval << "\n";
    out << "val_fraction = " << cfg.val_fraction << "\n";
    out << "image_size = " << cfg.encoder.image_size << "\n";
    out << "patch_size = " << cfg.encoder.patch_size << "\n";
    out << "encoder_layers = " << cfg.encoder.layers << "\n";
    out << "embed_dim = " << cfg.encoder.embed_dim << "\n";
    out << "heads = " << cfg.encoder.heads << "\n";
    out << "factor_range = " << cfg.augment.factor_range << "\n";
    out << "hue_range = " << cfg.augment.hue_range << "\n";
    out << "sigma_min = " << cfg.augment.sigma_min << "\n";
    out << "sigma_max = " << cfg.augment.sigma_max << "\n";
    out << "blend_min = " << cfg.augment.blend_min << "\n";
    out << "blend_max = " << cfg.augment.blend_max << "\n";
    return out.str();
}

}  // namespace sre
