#include "memat/probe.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace memat {

namespace {

constexpr double kL2Penalty = 1e-3;
constexpr double kLearningRate = 1.0;
constexpr int kIterations = 500;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

int ProbeDataset::head_index(int layer, int head) const {
    if (layer < 1 || layer > n_layers || head < 1 || head > n_heads)
        throw InputError("head (" + std::to_string(layer) + "," + std::to_string(head) +
                         ") out of range");
    return (layer - 1) * n_heads + (head - 1);
}

void ProbeDataset::validate() const {
    if (n_layers < 1 || n_heads < 1 || head_dim < 1)
        throw ContractError("probe dataset dimensions are unset");
    if (activations.size() != static_cast<size_t>(n_layers) * static_cast<size_t>(n_heads))
        throw ContractError("probe dataset is missing head slots");
    const auto n = static_cast<Eigen::Index>(labels.size());
    if (record_ids.size() != labels.size())
        throw ContractError("record ids and labels disagree in length");
    for (const Mat& m : activations)
        if (m.rows() != n || m.cols() != head_dim)
            throw ContractError("head activations have inconsistent shapes");

    int64_t positives = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw ContractError("labels must be 0 or 1");
        positives += y;
    }
    if (positives * 2 != static_cast<int64_t>(labels.size()))
        throw ContractError("probe labels are not balanced");

    std::vector<char> seen(labels.size(), 0);
    for (const std::vector<int>* split : {&train_idx, &val_idx})
        for (int idx : *split) {
            if (idx < 0 || idx >= static_cast<int>(labels.size()))
                throw ContractError("split index out of range");
            if (seen[static_cast<size_t>(idx)]++)
                throw ContractError("train and validation splits overlap");
        }
    if (train_idx.size() + val_idx.size() != labels.size())
        throw ContractError("splits do not cover the dataset");
}

double HeadClassifier::logit(const Vec& head) const {
    if (!trained) throw ContractError("classifier used before training");
    if (head.size() != theta.size()) throw InputError("activation width mismatch");
    return head.dot(theta) + bias;
}

ProbeDataset collect_probe_data(const ModelParams& params, const Tokenizer& tok,
                                const std::vector<FactRecord>& records, bool refine,
                                uint64_t seed, double val_fraction) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw InputError("validation fraction must lie in (0, 1)");

    std::vector<const FactRecord*> kept;
    for (const FactRecord& rec : records) {
        if (refine) {
            const std::vector<int> prompt = tok.encode(rec.efficacy_prompt);
            const std::vector<int> target = tok.encode(rec.target_new);
            const std::vector<int> greedy =
                generate(params, prompt, static_cast<int>(target.size()), 0.0, 0);
            if (greedy != target) continue;
        }
        kept.push_back(&rec);
    }
    if (refine && kept.size() < 10)
        throw InputError("refinement kept " + std::to_string(kept.size()) + " of " +
                         std::to_string(records.size()) + " records; at least 10 are needed");
    const int n = static_cast<int>(kept.size());
    if (n < 2) throw InputError("at least 2 records are needed to build a split");

    const ModelConfig& cfg = params.config;
    ProbeDataset ds;
    ds.n_layers = cfg.n_layers;
    ds.n_heads = cfg.n_heads;
    ds.head_dim = cfg.head_dim();

    std::vector<std::vector<int>> seqs;
    seqs.reserve(2 * static_cast<size_t>(n));
    for (const FactRecord* rec : kept) {
        const std::vector<int> prompt = tok.encode(rec->efficacy_prompt);
        for (const std::string* object : {&rec->target_true, &rec->target_new}) {
            std::vector<int> sentence = prompt;
            const std::vector<int> tail = tok.encode(*object);
            sentence.insert(sentence.end(), tail.begin(), tail.end());
            seqs.push_back(std::move(sentence));
        }
        ds.labels.push_back(0);
        ds.labels.push_back(1);
        ds.record_ids.push_back(rec->id);
        ds.record_ids.push_back(rec->id);
    }

    std::vector<HeadKey> heads;
    for (int l = 1; l <= cfg.n_layers; ++l)
        for (int h = 1; h <= cfg.n_heads; ++h) heads.push_back({l, h});
    const PackedForward packed = forward_many(params, seqs, nullptr, &heads);

    ds.activations.assign(heads.size(), Mat(2 * n, ds.head_dim));
    for (size_t s = 0; s < seqs.size(); ++s)
        for (const HeadKey& key : heads)
            ds.activations[static_cast<size_t>(ds.head_index(key.layer, key.head))].row(
                static_cast<Eigen::Index>(s)) = packed.head_last[s].at(key);

    // split whole records so paired sentences never straddle the boundary
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    const int n_val = std::clamp(static_cast<int>(std::lround(val_fraction * n)), 1, n - 1);
    for (int i = 0; i < n; ++i) {
        auto& side = i < n - n_val ? ds.train_idx : ds.val_idx;
        side.push_back(2 * order[static_cast<size_t>(i)]);
        side.push_back(2 * order[static_cast<size_t>(i)] + 1);
    }
    ds.validate();
    return ds;
}

std::pair<std::vector<HeadClassifier>, AccuracyMap> train_probes(const ProbeDataset& ds) {
    ds.validate();
    if (ds.train_idx.empty()) throw TrainingError("probe train split is empty");
    bool seen[2] = {false, false};
    for (int idx : ds.train_idx) seen[ds.labels[static_cast<size_t>(idx)]] = true;
    if (!seen[0] || !seen[1])
        throw TrainingError("probe train split holds a single class");
    if (ds.val_idx.empty()) throw TrainingError("probe validation split is empty");

    const auto n_train = static_cast<Eigen::Index>(ds.train_idx.size());
    Eigen::VectorXd y(n_train);
    for (Eigen::Index i = 0; i < n_train; ++i)
        y(i) = ds.labels[static_cast<size_t>(ds.train_idx[static_cast<size_t>(i)])];

    std::vector<HeadClassifier> classifiers(ds.activations.size());
    AccuracyMap map;
    map.values = Mat::Zero(ds.n_layers, ds.n_heads);

    for (size_t slot = 0; slot < ds.activations.size(); ++slot) {
        const Mat& all = ds.activations[slot];
        Mat x(n_train, ds.head_dim);
        for (Eigen::Index i = 0; i < n_train; ++i)
            x.row(i) = all.row(ds.train_idx[static_cast<size_t>(i)]);

        Vec theta = Vec::Zero(ds.head_dim);
        double bias = 0.0;
        const double inv_n = 1.0 / static_cast<double>(n_train);
        for (int it = 0; it < kIterations; ++it) {
            Eigen::VectorXd z = x * theta.transpose();
            z.array() += bias;
            const Eigen::VectorXd p = z.unaryExpr([](double v) { return sigmoid(v); });
            const Eigen::VectorXd err = p - y;
            const Vec grad_theta =
                inv_n * (x.transpose() * err).transpose() + kL2Penalty * theta;
            const double grad_bias = inv_n * err.sum();
            theta -= kLearningRate * grad_theta;
            bias -= kLearningRate * grad_bias;
        }

        HeadClassifier& cls = classifiers[slot];
        cls.theta = theta;
        cls.bias = bias;
        cls.trained = true;

        int correct = 0;
        for (int idx : ds.val_idx) {
            const Vec head = all.row(idx);
            if (cls.predict(head) == ds.labels[static_cast<size_t>(idx)]) ++correct;
        }
        const int l = static_cast<int>(slot) / ds.n_heads;
        const int h = static_cast<int>(slot) % ds.n_heads;
        map.values(l, h) = static_cast<double>(correct) / static_cast<double>(ds.val_idx.size());
    }
    return {std::move(classifiers), std::move(map)};
}

std::vector<HeadKey> select_top_k(const AccuracyMap& map, int k) {
    const int total = static_cast<int>(map.values.size());
    if (total == 0) throw InputError("accuracy map is empty");
    if (k < 1 || k > total)
        throw InputError("k must lie in [1, " + std::to_string(total) + "]");

    std::vector<std::pair<double, HeadKey>> ranked;
    ranked.reserve(static_cast<size_t>(total));
    for (Eigen::Index l = 0; l < map.values.rows(); ++l)
        for (Eigen::Index h = 0; h < map.values.cols(); ++h)
            ranked.push_back({map.values(l, h),
                              HeadKey{static_cast<int>(l) + 1, static_cast<int>(h) + 1}});
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    std::vector<HeadKey> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(ranked[static_cast<size_t>(i)].second);
    return out;
}

void save_accuracy_csv(const std::filesystem::path& path, const AccuracyMap& map) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (Eigen::Index l = 0; l < map.values.rows(); ++l) {
        for (Eigen::Index h = 0; h < map.values.cols(); ++h) {
            if (h) out << ',';
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", map.values(l, h));
            out << buf;
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

AccuracyMap load_accuracy_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                size_t used = 0;
                const double v = std::stod(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
                row.push_back(v);
            } catch (const std::exception&) {
                throw IoError("malformed accuracy cell '" + cell + "' in " + path.string());
            }
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw IoError("ragged accuracy rows in " + path.string());
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw IoError(path.string() + " holds no accuracy rows");

    AccuracyMap map;
    map.values = Mat(static_cast<Eigen::Index>(rows.size()),
                     static_cast<Eigen::Index>(rows.front().size()));
    for (size_t l = 0; l < rows.size(); ++l)
        for (size_t h = 0; h < rows[l].size(); ++h)
            map.values(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(h)) = rows[l][h];
    return map;
}

void save_heads_json(const std::filesystem::path& path, const std::vector<HeadKey>& heads,
                     const AccuracyMap* accuracies) {
    nlohmann::ordered_json j;
    j["heads"] = nlohmann::ordered_json::array();
    for (const HeadKey& key : heads) {
        nlohmann::ordered_json entry;
        entry["layer"] = key.layer;
        entry["head"] = key.head;
        if (accuracies) entry["accuracy"] = accuracies->values(key.layer - 1, key.head - 1);
        j["heads"].push_back(std::move(entry));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<HeadKey> load_heads_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is not valid JSON: " + e.what());
    }
    if (!j.contains("heads") || !j["heads"].is_array())
        throw IoError(path.string() + " lacks a heads list");
    std::vector<HeadKey> out;
    for (const auto& entry : j["heads"]) {
        if (!entry.contains("layer") || !entry.contains("head"))
            throw IoError("head entry without layer/head in " + path.string());
        out.push_back({entry["layer"].get<int>(), entry["head"].get<int>()});
    }
    return out;
}

void save_classifiers_json(const std::filesystem::path& path, const ClassifierSet& set) {
    if (set.classifiers.size() !=
        static_cast<size_t>(set.n_layers) * static_cast<size_t>(set.n_heads))
        throw InputError("classifier count does not match the head grid");
    nlohmann::ordered_json j;
    j["n_layers"] = set.n_layers;
    j["n_heads"] = set.n_heads;
    j["classifiers"] = nlohmann::ordered_json::array();
    for (size_t slot = 0; slot < set.classifiers.size(); ++slot) {
        const HeadClassifier& cls = set.classifiers[slot];
        nlohmann::ordered_json entry;
        entry["layer"] = static_cast<int>(slot) / set.n_heads + 1;
        entry["head"] = static_cast<int>(slot) % set.n_heads + 1;
        entry["bias"] = cls.bias;
        entry["trained"] = cls.trained;
        std::vector<double> theta(cls.theta.data(), cls.theta.data() + cls.theta.size());
        entry["theta"] = theta;
        j["classifiers"].push_back(std::move(entry));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

ClassifierSet load_classifiers_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is not valid JSON: " + e.what());
    }
    for (const char* key : {"n_layers", "n_heads", "classifiers"})
        if (!j.contains(key)) throw IoError(path.string() + " lacks classifier fields");

    ClassifierSet set;
    set.n_layers = j["n_layers"].get<int>();
    set.n_heads = j["n_heads"].get<int>();
    const auto& list = j["classifiers"];
    if (!list.is_array() ||
        list.size() != static_cast<size_t>(set.n_layers) * static_cast<size_t>(set.n_heads))
        throw IoError("classifier list size mismatch in " + path.string());

    set.classifiers.resize(list.size());
    for (const auto& entry : list) {
        for (const char* key : {"layer", "head", "bias", "trained", "theta"})
            if (!entry.contains(key))
                throw IoError("classifier entry lacks fields in " + path.string());
        const int l = entry["layer"].get<int>();
        const int h = entry["head"].get<int>();
        if (l < 1 || l > set.n_layers || h < 1 || h > set.n_heads)
            throw IoError("classifier position out of range in " + path.string());
        HeadClassifier cls;
        const auto theta = entry["theta"].get<std::vector<double>>();
        cls.theta = Vec(static_cast<Eigen::Index>(theta.size()));
        for (size_t i = 0; i < theta.size(); ++i)
            cls.theta(static_cast<Eigen::Index>(i)) = theta[i];
        cls.bias = entry["bias"].get<double>();
        cls.trained = entry["trained"].get<bool>();
        set.classifiers[static_cast<size_t>((l - 1) * set.n_heads + (h - 1))] = std::move(cls);
    }
    return set;
}

}  // namespace memat
