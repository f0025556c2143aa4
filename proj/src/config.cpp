#include "srseg/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace srseg {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

[[noreturn]] void reject(const std::string& path, const std::string& what) {
    throw std::invalid_argument("config: " + path + ": " + what);
}

// Cursor into one JSON object that tracks which keys were consumed, so
// anything left over is reported as unknown with its full path.
struct Section {
    json obj;  // owned: sections are often synthesized defaults
    std::string path;
    std::vector<std::string> consumed;

    Section(json o, std::string p) : obj(std::move(o)), path(std::move(p)) {
        if (!obj.is_object()) reject(path, "expected an object");
    }

    const json* find(const std::string& key) {
        consumed.push_back(key);
        auto it = obj.find(key);
        return it == obj.end() ? nullptr : &*it;
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (const json* v = find(key)) {
            try {
                out = v->get<T>();
            } catch (const json::exception&) {
                reject(path + "." + key, "wrong type (" + std::string(v->type_name()) + ")");
            }
        }
    }

    json child(const std::string& key) {
        const json* v = find(key);
        if (!v) return json::object();
        if (!v->is_object()) reject(path + "." + key, "expected an object");
        return *v;
    }

    void finish() {
        for (const auto& [key, value] : obj.items()) {
            (void)value;
            bool known = false;
            for (const auto& k : consumed) known = known || k == key;
            if (!known) reject(path + "." + key, "unknown key");
        }
    }
};

void check(bool ok, const std::string& path, const std::string& what) {
    if (!ok) reject(path, what);
}

DatasetConfig parse_dataset(const json& j, std::int64_t& eval_count) {
    Section s(j, "dataset");
    DatasetConfig d;
    s.get("seed", d.seed);
    s.get("count", d.count);
    s.get("height", d.h);
    s.get("width", d.w);
    if (const json* v = s.find("classes")) {
        if (!v->is_array() || v->empty()) reject("dataset.classes", "expected a non-empty array of class names");
        d.classes.clear();
        for (const auto& name : *v) {
            if (!name.is_string()) reject("dataset.classes", "expected strings");
            try {
                d.classes.push_back(shape_class_from_name(name.get<std::string>()));
            } catch (const std::invalid_argument& e) {
                reject("dataset.classes", e.what());
            }
        }
    }
    s.get("objects_min", d.objects_min);
    s.get("objects_max", d.objects_max);
    s.get("min_object_fraction", d.min_object_fraction);
    s.get("max_object_fraction", d.max_object_fraction);
    s.get("noise_sigma", d.noise_sigma);
    s.get("eval_count", eval_count);
    s.finish();
    check(eval_count >= 1, "dataset.eval_count", "must be >= 1");
    try {
        d.validate();
    } catch (const std::invalid_argument& e) {
        reject("dataset", e.what());
    }
    return d;
}

ModelConfig parse_model(const json& j, const DatasetConfig& dataset) {
    Section s(j, "model");
    ModelConfig m;
    std::string arch = "conv";
    s.get("arch", arch);
    if (arch == "conv") m.arch = ArchKind::kConv;
    else if (arch == "ushape") m.arch = ArchKind::kUShape;
    else reject("model.arch", "expected \"conv\" or \"ushape\", got \"" + arch + "\"");
    s.get("num_blocks", m.num_blocks);
    if (const json* v = s.find("channels")) {
        if (!v->is_array() || v->empty()) reject("model.channels", "expected a non-empty array of ints");
        m.channels.clear();
        for (const auto& c : *v) {
            if (!c.is_number_integer()) reject("model.channels", "expected integers");
            m.channels.push_back(c.get<int>());
        }
    }
    s.get("adapter_dim", m.adapter_dim);
    s.finish();

    m.in_channels = 3;
    m.input_h = dataset.h;
    m.input_w = dataset.w;
    m.cls_classes = static_cast<int>(dataset.classes.size());
    m.seg_classes = m.cls_classes + 1;
    try {
        m.validate();
    } catch (const std::invalid_argument& e) {
        reject("model", e.what());
    }
    return m;
}

TrainConfig parse_train(const json& j) {
    Section s(j, "train");
    TrainConfig t;
    s.get("lr0", t.lr0);
    s.get("momentum", t.momentum);
    s.get("weight_decay", t.weight_decay);
    s.get("batch_size", t.batch_size);
    s.get("epochs", t.epochs);
    s.get("poly_power", t.poly_power);
    s.get("seed", t.seed);
    s.get("eval_every", t.eval_every);

    {
        Section w(s.child("weights"), "train.weights");
        w.get("lambda1", t.weights.lambda1);
        w.get("lambda2", t.weights.lambda2);
        w.get("lambda3", t.weights.lambda3);
        w.finish();
        check(t.weights.lambda1 >= 0, "train.weights.lambda1", "must be >= 0");
        check(t.weights.lambda2 >= 0, "train.weights.lambda2", "must be >= 0");
        check(t.weights.lambda3 >= 0, "train.weights.lambda3", "must be >= 0");
    }
    {
        Section c(s.child("temperature"), "train.temperature");
        c.get("tau", t.temperature.tau);
        c.get("growth_factor", t.temperature.growth_factor);
        c.get("trigger_threshold", t.temperature.trigger_threshold);
        c.finish();
        check(t.temperature.tau > 0, "train.temperature.tau", "must be > 0");
        check(t.temperature.growth_factor >= 1, "train.temperature.growth_factor", "must be >= 1");
        check(t.temperature.trigger_threshold >= 0, "train.temperature.trigger_threshold", "must be >= 0");
    }
    {
        Section g(s.child("toggles"), "train.toggles");
        g.get("mea", t.toggles.mea_on);
        g.get("sr_f", t.toggles.sr_f_on);
        g.get("sr_l", t.toggles.sr_l_on);
        g.finish();
    }
    s.finish();

    check(t.lr0 > 0, "train.lr0", "must be > 0");
    check(t.poly_power > 0, "train.poly_power", "must be > 0");
    check(t.batch_size >= 2, "train.batch_size", "must be >= 2 (batch statistics)");
    check(t.epochs >= 1, "train.epochs", "must be >= 1");
    check(t.momentum >= 0 && t.momentum < 1, "train.momentum", "must lie in [0, 1)");
    check(t.weight_decay >= 0, "train.weight_decay", "must be >= 0");
    check(t.eval_every >= 0, "train.eval_every", "must be >= 0");
    return t;
}

OutputConfig parse_output(const json& j) {
    Section s(j, "output");
    OutputConfig o;
    s.get("directory", o.directory);
    if (const json* v = s.find("formats")) {
        if (!v->is_array()) reject("output.formats", "expected an array");
        o.formats.clear();
        for (const auto& f : *v) {
            if (!f.is_string()) reject("output.formats", "expected strings");
            const std::string name = f.get<std::string>();
            if (name != "csv" && name != "json" && name != "markdown")
                reject("output.formats", "unknown format \"" + name + "\" (expected csv, json or markdown)");
            o.formats.push_back(name);
        }
    }
    s.finish();
    check(!o.directory.empty(), "output.directory", "must not be empty");
    return o;
}

}  // namespace

RunConfigFile parse_config_text(const std::string& text, const std::string& where) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(where + ": " + e.what());
    }
    if (!root.is_object()) throw std::invalid_argument("config: expected a top-level object");
    Section top(root, "config");
    const json dataset = top.child("dataset");
    const json model = top.child("model");
    const json train = top.child("train");
    const json output = top.child("output");
    for (const auto& [key, value] : root.items()) {
        (void)value;
        if (key != "dataset" && key != "model" && key != "train" && key != "output")
            reject(key, "unknown section (expected dataset, model, train, output)");
    }

    RunConfigFile c;
    c.dataset = parse_dataset(dataset, c.eval_count);
    c.model = parse_model(model, c.dataset);
    c.train = parse_train(train);
    c.output = parse_output(output);
    return c;
}

RunConfigFile parse_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(std::move(buf).str(), path);
}

std::string serialize_config(const RunConfigFile& c) {
    ordered_json classes = ordered_json::array();
    for (const ShapeClass s : c.dataset.classes) classes.push_back(shape_class_name(s));
    ordered_json formats = ordered_json::array();
    for (const std::string& f : c.output.formats) formats.push_back(f);

    ordered_json root = {
        {"dataset",
         {
             {"seed", c.dataset.seed},
             {"count", c.dataset.count},
             {"height", c.dataset.h},
             {"width", c.dataset.w},
             {"classes", classes},
             {"objects_min", c.dataset.objects_min},
             {"objects_max", c.dataset.objects_max},
             {"min_object_fraction", c.dataset.min_object_fraction},
             {"max_object_fraction", c.dataset.max_object_fraction},
             {"noise_sigma", c.dataset.noise_sigma},
             {"eval_count", c.eval_count},
         }},
        {"model",
         {
             {"arch", c.model.arch == ArchKind::kConv ? "conv" : "ushape"},
             {"num_blocks", c.model.num_blocks},
             {"channels", c.model.channels},
             {"adapter_dim", c.model.adapter_dim},
         }},
        {"train",
         {
             {"lr0", c.train.lr0},
             {"momentum", c.train.momentum},
             {"weight_decay", c.train.weight_decay},
             {"batch_size", c.train.batch_size},
             {"epochs", c.train.epochs},
             {"poly_power", c.train.poly_power},
             {"weights",
              {
                  {"lambda1", c.train.weights.lambda1},
                  {"lambda2", c.train.weights.lambda2},
                  {"lambda3", c.train.weights.lambda3},
              }},
             {"temperature",
              {
                  {"tau", c.train.temperature.tau},
                  {"growth_factor", c.train.temperature.growth_factor},
                  {"trigger_threshold", c.train.temperature.trigger_threshold},
              }},
             {"seed", c.train.seed},
             {"toggles",
              {
                  {"mea", c.train.toggles.mea_on},
                  {"sr_f", c.train.toggles.sr_f_on},
                  {"sr_l", c.train.toggles.sr_l_on},
              }},
             {"eval_every", c.train.eval_every},
         }},
        {"output",
         {
             {"directory", c.output.directory},
             {"formats", formats},
         }},
    };
    return root.dump(2) + "\n";
}

DatasetConfig eval_dataset_config(const DatasetConfig& train_config, std::int64_t eval_count) {
    DatasetConfig e = train_config;
    e.seed = mix_seed(train_config.seed, 0x6576616cul);  // distinct stream for the held-out split
    e.count = eval_count;
    return e;
}

}  // namespace srseg
