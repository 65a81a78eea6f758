#pragma once

// INI-style configuration with a fixed schema.
//
//   # comment
//   [train]
//   lambda1 = 0.05
//
// Every key has a default; unknown sections or keys are rejected. echo()
// prints the full effective configuration, and parsing an echo gives back
// an equal Config.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseg {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ConfigKey {
    std::string section;
    std::string key;
    std::string default_value;
    std::string doc;
};

inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"data", "image_size", "32", "slice height and width, multiple of 4"},
        {"data", "source_count", "200", "labeled source slices"},
        {"data", "target_count", "200", "unlabeled target training slices"},
        {"data", "test_count", "50", "held-out target slices with labels, evaluation only"},
        {"data", "seed", "7", "generator seed"},
        {"data", "source_intensity", "0.15,0.85,0.85,0.85,0.35", "source mean intensity per class (BG,AA,LAC,LVC,MYO)"},
        {"data", "target_intensity", "0.55,0.25,0.25,0.25,0.8", "target mean intensity per class"},
        {"data", "source_noise", "0.05", "source Gaussian noise std"},
        {"data", "target_noise", "0.08", "target Gaussian noise std"},
        {"data", "target_bias", "0.1", "target linear bias field amplitude"},

        {"model", "embed_depth", "16", "projection head output channels"},
        {"model", "width", "16", "first encoder stage channels"},
        {"model", "head_width", "32", "hidden channels of the segmentation and projection heads"},
        {"model", "disc_width", "16", "first discriminator stage channels"},
        {"model", "precision", "f32", "f32 or f64"},

        {"train", "lambda1", "0.05", "weight of the similarity loss"},
        {"train", "lambda2", "0.02", "weight of the contrastive loss"},
        {"train", "batch_size", "4", "slices per domain per step"},
        {"train", "epochs", "35", "training epochs"},
        {"train", "lr_g", "3e-4", "generator learning rate"},
        {"train", "lr_d", "2e-4", "discriminator learning rate"},
        {"train", "weight_decay", "1e-4", "Adam weight decay"},
        {"train", "warmup_epochs", "1", "epochs with lambda1 = lambda2 = 0"},
        {"train", "disc_start_epoch", "0", "first epoch (0-based) that updates discriminators"},
        {"train", "seed", "1", "initialisation, shuffling and augmentation seed"},
        {"train", "augment", "true", "random rotation/scale/shear of training slices"},
        {"train", "steps_per_epoch", "0", "0 = one pass over the source slices"},
        {"train", "seg_weight", "1", "weight of the segmentation loss"},
        {"train", "cycle_weight", "10", "weight of the cycle loss"},
        {"train", "adv_img_weight", "1", "weight of the image adversarial loss"},
        {"train", "adv_seg_weight", "1", "weight of the segmentation adversarial loss"},
        {"train", "ce_weight", "1", "cross-entropy share of the segmentation loss"},
        {"train", "dice_weight", "1", "soft Dice share of the segmentation loss"},
        {"train", "instrument", "false", "record gradient norms of the proposed losses every step"},

        {"dict", "size", "0", "capacity per class; 0 = 400, or 100 when image_size <= 32"},
        {"dict", "topk", "0", "k of mean_top_k; 0 = 20, or 5 when image_size <= 32"},
        {"dict", "tau", "1", "contrastive temperature"},
        {"dict", "aggregation", "mean_top_k", "mean_top_k, mean_all or max_similarity"},
        {"dict", "confidence", "0.9", "pseudo-label threshold for target prototypes"},
        {"dict", "min_pixels", "4", "smallest region that forms a prototype"},
        {"dict", "include_background", "false", "form background prototypes too"},
        {"dict", "source_queries", "true", "contrast c_s and c_t->s against the source dictionary"},
        {"dict", "target_queries", "true", "contrast c_s->t and c_t against the target dictionary"},

        {"eval", "every", "1", "evaluate on the target test split every N epochs (the last epoch always)"},
        {"eval", "max_features", "400", "prototype vectors drawn in features.svg"},

        {"ablate", "grid", "loss", "loss, aggregation or dict_size"},
        {"ablate", "seeds", "1,2,3", "training seeds per grid cell"},
        {"ablate", "sizes", "25,50,100", "dictionary sizes for the dict_size grid"},
        {"ablate", "lambda1", "0.05", "lambda1 of the runs that enable it"},
        {"ablate", "lambda2", "0.02", "lambda2 of the runs that enable it"},
    };
    return schema;
}

namespace detail {
inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}
}  // namespace detail

class Config {
public:
    Config() {
        for (const auto& k : config_schema()) values_[k.section + "." + k.key] = k.default_value;
    }

    static bool known(const std::string& dotted) {
        return std::any_of(config_schema().begin(), config_schema().end(),
                           [&](const ConfigKey& k) { return k.section + "." + k.key == dotted; });
    }

    void set(const std::string& dotted, const std::string& value) {
        if (!known(dotted)) throw ConfigError("unknown config key '" + dotted + "'");
        if (value.find('\n') != std::string::npos) throw ConfigError("value of '" + dotted + "' spans lines");
        values_[dotted] = value;
    }

    const std::string& get(const std::string& dotted) const {
        auto it = values_.find(dotted);
        if (it == values_.end()) throw ConfigError("unknown config key '" + dotted + "'");
        return it->second;
    }

    // Parses INI text on top of the current values.
    void merge_text(const std::string& text, const std::string& origin = "config") {
        std::istringstream is(text);
        std::string line, section;
        for (std::size_t ln = 1; std::getline(is, line); ++ln) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const std::string where = origin + ":" + std::to_string(ln);
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError(where + ": malformed section header");
                section = detail::trim(line.substr(1, line.size() - 2));
                const bool exists = std::any_of(config_schema().begin(), config_schema().end(),
                                                [&](const ConfigKey& k) { return k.section == section; });
                if (!exists) throw ConfigError(where + ": unknown section [" + section + "]");
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
            if (section.empty()) throw ConfigError(where + ": key outside a section");
            const std::string key = detail::trim(line.substr(0, eq));
            const std::string dotted = section + "." + key;
            if (!known(dotted)) throw ConfigError(where + ": unknown key '" + dotted + "'");
            values_[dotted] = detail::trim(line.substr(eq + 1));
        }
    }

    // "section.key=value"
    void apply_override(const std::string& spec) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("override '" + spec + "' is not section.key=value");
        }
        const std::string dotted = detail::trim(spec.substr(0, eq));
        if (dotted.find('.') == std::string::npos) {
            throw ConfigError("override '" + spec + "' is not section.key=value");
        }
        set(dotted, detail::trim(spec.substr(eq + 1)));
    }

    std::string echo() const {
        std::ostringstream os;
        std::string section;
        for (const auto& k : config_schema()) {
            if (k.section != section) {
                if (!section.empty()) os << '\n';
                section = k.section;
                os << '[' << section << "]\n";
            }
            os << k.key << " = " << values_.at(k.section + "." + k.key) << '\n';
        }
        return os.str();
    }

    std::string get_string(const std::string& dotted) const { return get(dotted); }

    double get_double(const std::string& dotted) const {
        const auto& s = get(dotted);
        double v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
            throw ConfigError("'" + dotted + "' = '" + s + "' is not a number");
        }
        return v;
    }

    std::uint64_t get_u64(const std::string& dotted) const {
        const auto& s = get(dotted);
        std::uint64_t v = 0;
        auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
            throw ConfigError("'" + dotted + "' = '" + s + "' is not a non-negative integer");
        }
        return v;
    }

    std::size_t get_size(const std::string& dotted) const { return static_cast<std::size_t>(get_u64(dotted)); }

    bool get_bool(const std::string& dotted) const {
        const auto& s = get(dotted);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError("'" + dotted + "' = '" + s + "' is not a boolean");
    }

    std::vector<double> get_doubles(const std::string& dotted) const {
        std::vector<double> out;
        const auto& s = get(dotted);
        std::size_t start = 0;
        while (start <= s.size()) {
            const auto comma = s.find(',', start);
            const std::string cell = detail::trim(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            double v = 0;
            auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (cell.empty() || r.ec != std::errc() || r.ptr != cell.data() + cell.size()) {
                throw ConfigError("'" + dotted + "' = '" + s + "' is not a comma-separated number list");
            }
            out.push_back(v);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }

    bool operator==(const Config&) const = default;

private:
    std::map<std::string, std::string> values_;
};

inline Config parse_config(const std::string& text, const std::string& origin = "config") {
    Config c;
    c.merge_text(text, origin);
    return c;
}

}  // namespace pseg
