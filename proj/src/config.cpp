#include "svsplat/config.hpp"

#include "svsplat/errors.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace svsplat {

std::string format_double(double x) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

namespace {

double parse_double(const std::string& key, const std::string& s) {
    double x = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ConfigError("config key '" + key + "': bad number '" + s + "'");
    return x;
}

int64_t parse_int(const std::string& key, const std::string& s) {
    int64_t x = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ConfigError("config key '" + key + "': bad integer '" + s + "'");
    return x;
}

bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key '" + key + "': bad boolean '" + s + "'");
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

void Config::validate() const {
    if (image_height <= 0 || image_width <= 0)
        throw ConfigError("image dims must be positive");
    if (levels < 1) throw ConfigError("levels must be >= 1");
    if (static_cast<int>(level_widths.size()) != levels)
        throw ConfigError("level_widths must list one width per level");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    for (int w : level_widths)
        if (w <= 0 || w % heads != 0)
            throw ConfigError("heads must divide every layer feature width");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0,1]");
    if (gaussians_per_pixel < 1) throw ConfigError("gaussians_per_pixel must be >= 1");
    if (sh_degree < 0 || sh_degree > 3) throw ConfigError("sh_degree must be in 0..3");
    if (lambda_l1 < 0 || lambda_ssim < 0 || lambda_lpips < 0)
        throw ConfigError("loss weights must be nonnegative");
    if (n_points < 1) throw ConfigError("n_points must be >= 1");
    if (!(near > 0)) throw ConfigError("near must be positive");
    if (!(far > near)) throw ConfigError("far must exceed near");
    if (token_dim < 1 || point_token_dim < 1) throw ConfigError("token dims must be >= 1");
    if (ffn_ratio < 1) throw ConfigError("ffn_ratio must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
    if (attention_scale != "per_head" && attention_scale != "full_dim")
        throw ConfigError("attention_scale must be per_head or full_dim");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(offset_bound > 0)) throw ConfigError("offset_bound must be positive");
    if (threads < 0) throw ConfigError("threads must be >= 0");
}

std::string Config::to_text() const {
    std::map<std::string, std::string> kv;
    kv["image_height"] = std::to_string(image_height);
    kv["image_width"] = std::to_string(image_width);
    kv["levels"] = std::to_string(levels);
    kv["heads"] = std::to_string(heads);
    kv["gamma"] = format_double(gamma);
    kv["gaussians_per_pixel"] = std::to_string(gaussians_per_pixel);
    kv["sh_degree"] = std::to_string(sh_degree);
    kv["lambda_l1"] = format_double(lambda_l1);
    kv["lambda_ssim"] = format_double(lambda_ssim);
    kv["lambda_lpips"] = format_double(lambda_lpips);
    kv["use_contextual"] = use_contextual ? "true" : "false";
    kv["use_spatial"] = use_spatial ? "true" : "false";
    kv["n_points"] = std::to_string(n_points);
    kv["near"] = format_double(near);
    kv["far"] = format_double(far);
    kv["precision"] = dtype_name(precision);
    {
        std::ostringstream os;
        for (size_t i = 0; i < level_widths.size(); ++i) {
            if (i) os << ",";
            os << level_widths[i];
        }
        kv["level_widths"] = os.str();
    }
    kv["token_dim"] = std::to_string(token_dim);
    kv["point_token_dim"] = std::to_string(point_token_dim);
    kv["ffn_ratio"] = std::to_string(ffn_ratio);
    kv["dropout"] = format_double(dropout);
    kv["attention_scale"] = attention_scale;
    kv["lr"] = format_double(lr);
    kv["offset_bound"] = format_double(offset_bound);
    kv["threads"] = std::to_string(threads);

    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    return os.str();
}

void Config::set(const std::string& key, const std::string& value) {
    if (key == "image_height") image_height = parse_int(key, value);
    else if (key == "image_width") image_width = parse_int(key, value);
    else if (key == "levels") levels = static_cast<int>(parse_int(key, value));
    else if (key == "heads") heads = static_cast<int>(parse_int(key, value));
    else if (key == "gamma") gamma = parse_double(key, value);
    else if (key == "gaussians_per_pixel") gaussians_per_pixel = static_cast<int>(parse_int(key, value));
    else if (key == "sh_degree") sh_degree = static_cast<int>(parse_int(key, value));
    else if (key == "lambda_l1") lambda_l1 = parse_double(key, value);
    else if (key == "lambda_ssim") lambda_ssim = parse_double(key, value);
    else if (key == "lambda_lpips") lambda_lpips = parse_double(key, value);
    else if (key == "use_contextual") use_contextual = parse_bool(key, value);
    else if (key == "use_spatial") use_spatial = parse_bool(key, value);
    else if (key == "n_points") n_points = parse_int(key, value);
    else if (key == "near") near = parse_double(key, value);
    else if (key == "far") far = parse_double(key, value);
    else if (key == "precision") {
        if (value == "f32") precision = Dtype::F32;
        else if (value == "f64") precision = Dtype::F64;
        else throw ConfigError("precision must be f32 or f64");
    } else if (key == "level_widths") {
        std::vector<int> widths;
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ','))
            widths.push_back(static_cast<int>(parse_int(key, trim(item))));
        level_widths = widths;
    }
    else if (key == "token_dim") token_dim = parse_int(key, value);
    else if (key == "point_token_dim") point_token_dim = parse_int(key, value);
    else if (key == "ffn_ratio") ffn_ratio = static_cast<int>(parse_int(key, value));
    else if (key == "dropout") dropout = parse_double(key, value);
    else if (key == "attention_scale") attention_scale = value;
    else if (key == "lr") lr = parse_double(key, value);
    else if (key == "offset_bound") offset_bound = parse_double(key, value);
    else if (key == "threads") threads = static_cast<int>(parse_int(key, value));
    else throw ConfigError("unknown config key '" + key + "'");
}

Config Config::from_text(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return cfg;
}

void Config::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write config: " + path.string());
    os << to_text();
    if (!os) throw IoError("config write failed: " + path.string());
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read config: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str());
}

} // namespace svsplat
