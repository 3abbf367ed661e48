#include "memat/dataset.hpp"

#include "memat/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

namespace memat {

std::string to_string(Language lang) { return lang == Language::la ? "L_A" : "L_B"; }
std::string to_string(Stratum stratum) { return stratum == Stratum::identical ? "identical" : "low"; }

Language language_from_string(const std::string& s) {
    if (s == "L_A") return Language::la;
    if (s == "L_B") return Language::lb;
    throw InputError("unknown language '" + s + "'");
}

Stratum stratum_from_string(const std::string& s) {
    if (s == "identical") return Stratum::identical;
    if (s == "low") return Stratum::low;
    throw InputError("unknown stratum '" + s + "'");
}

std::string fill_template(const std::string& tmpl, const std::string& subject) {
    const size_t at = tmpl.find("{}");
    if (at == std::string::npos) throw InputError("template '" + tmpl + "' lacks a {} slot");
    if (tmpl.find("{}", at + 2) != std::string::npos)
        throw InputError("template '" + tmpl + "' has more than one slot");
    std::string out = tmpl;
    out.replace(at, 2, subject);
    return out;
}

double jaccard_index(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    if (sa.empty() && sb.empty()) throw InputError("jaccard index of two empty sets is undefined");
    int64_t inter = 0;
    for (const auto& t : sa) inter += sb.count(t);
    const auto uni = static_cast<int64_t>(sa.size() + sb.size()) - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

void CorpusConfig::validate() const {
    if (n_pairs < 0) throw ConfigError("n_pairs must be non-negative");
    const double total = jaccard_profile.identical + jaccard_profile.low;
    if (jaccard_profile.identical < 0 || jaccard_profile.low < 0 || std::abs(total - 1.0) > 1e-9)
        throw ConfigError("jaccard profile must be a distribution over the two strata");
    if (subject_words < 4) throw ConfigError("subject pool needs at least 4 words");
    if (filler_words_per_language < 2) throw ConfigError("filler pool needs at least 2 words");
    if (relation_words_per_language < 2 || object_words_per_language < 2)
        throw ConfigError("relation and object pools need at least 2 words");
    if (noise_min < 0 || noise_max < noise_min) throw ConfigError("invalid noise length range");
}

void FactRecord::validate() const {
    if (subject.empty()) throw InputError("record " + std::to_string(id) + ": empty subject");
    if (target_true.empty() || target_new.empty())
        throw InputError("record " + std::to_string(id) + ": empty target");
    if (target_true == target_new)
        throw InputError("record " + std::to_string(id) + ": targets must differ");
    if (paraphrase_prompts.size() != 2)
        throw InputError("record " + std::to_string(id) + ": expected 2 paraphrase prompts");
    if (neighborhood_prompts.size() != 10)
        throw InputError("record " + std::to_string(id) + ": expected 10 neighborhood prompts");
    (void)fill_template(relation_template, subject);
    if (efficacy_prompt != fill_template(relation_template, subject))
        throw InputError("record " + std::to_string(id) + ": efficacy prompt does not match template");
    std::set<std::string> neighbor_subjects;
    for (const auto& np : neighborhood_prompts) {
        if (np.subject == subject)
            throw InputError("record " + std::to_string(id) + ": neighborhood subject equals the subject");
        neighbor_subjects.insert(np.subject);
    }
    if (neighbor_subjects.size() != neighborhood_prompts.size())
        throw InputError("record " + std::to_string(id) + ": duplicate neighborhood subjects");

    auto contains_target_word = [&](const std::string& prompt) {
        const auto prompt_words = split_words(prompt);
        const std::set<std::string> ws(prompt_words.begin(), prompt_words.end());
        for (const std::string& t : {target_true, target_new})
            for (const std::string& w : split_words(t))
                if (ws.count(w)) return true;
        return false;
    };
    if (contains_target_word(efficacy_prompt))
        throw InputError("record " + std::to_string(id) + ": target word inside efficacy prompt");
    for (const auto& p : paraphrase_prompts)
        if (contains_target_word(p))
            throw InputError("record " + std::to_string(id) + ": target word inside paraphrase");
    for (const auto& np : neighborhood_prompts)
        if (contains_target_word(np.prompt))
            throw InputError("record " + std::to_string(id) + ": target word inside neighborhood prompt");
}

namespace {

std::string pool_word(const char* prefix, int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%s%03d", prefix, i);
    return buf;
}

struct Pools {
    std::vector<std::string> subjects, rel_a, rel_b, obj_a, obj_b, fil_a, fil_b;
};

Pools build_pools(const CorpusConfig& cfg) {
    Pools p;
    for (int i = 0; i < cfg.subject_words; ++i) p.subjects.push_back(pool_word("s", i));
    for (int i = 0; i < cfg.relation_words_per_language; ++i) {
        p.rel_a.push_back(pool_word("ra", i));
        p.rel_b.push_back(pool_word("rb", i));
    }
    for (int i = 0; i < cfg.object_words_per_language; ++i) {
        p.obj_a.push_back(pool_word("oa", i));
        p.obj_b.push_back(pool_word("ob", i));
    }
    for (int i = 0; i < cfg.filler_words_per_language; ++i) {
        p.fil_a.push_back(pool_word("fa", i));
        p.fil_b.push_back(pool_word("fb", i));
    }
    return p;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out.push_back(' ');
        out += words[i];
    }
    return out;
}

// sequential allocator over a word pool; throws when the partition is spent
class PoolCursor {
public:
    PoolCursor(const std::vector<std::string>& pool, const char* what) : pool_(pool), what_(what) {}
    std::string take() {
        if (next_ >= pool_.size())
            throw GenerationError(std::string(what_) +
                                  " pool exhausted; grow the partition or lower n_pairs");
        return pool_[next_++];
    }

private:
    const std::vector<std::string>& pool_;
    const char* what_;
    size_t next_ = 0;
};

}  // namespace

std::vector<std::string> corpus_vocabulary(const CorpusConfig& cfg) {
    const Pools p = build_pools(cfg);
    std::vector<std::string> words;
    auto append = [&](const std::vector<std::string>& v) { words.insert(words.end(), v.begin(), v.end()); };
    append(p.subjects);
    append(p.rel_a);
    append(p.rel_b);
    append(p.obj_a);
    append(p.obj_b);
    append(p.fil_a);
    append(p.fil_b);
    words.emplace_back("is");
    words.emplace_back("a");
    words.emplace_back("gb");  // gender-variant surface marker
    return words;
}

std::vector<FactRecord> generate_corpus(const CorpusConfig& cfg) {
    cfg.validate();
    const Pools pools = build_pools(cfg);
    Rng rng(mix_seed(cfg.seed, 0xC0A9));

    auto pick = [&](const std::vector<std::string>& pool) {
        return pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
    };
    auto draw_subject = [&](const std::set<std::string>& avoid) {
        for (int tries = 0; tries < 20000; ++tries) {
            const std::string a = pick(pools.subjects), b = pick(pools.subjects);
            if (a == b) continue;
            std::string s = a + " " + b;
            if (!avoid.count(s)) return s;
        }
        throw GenerationError("subject pool too small to avoid collisions");
    };

    // pass 1: strata and main subjects, so later neighbor draws can avoid
    // every main in both languages
    struct PairPlan {
        Stratum stratum;
        std::string subject_a, subject_b;
    };
    std::vector<PairPlan> plans;
    std::set<std::string> mains;
    for (int i = 0; i < cfg.n_pairs; ++i) {
        PairPlan plan;
        plan.stratum =
            rng.uniform() < cfg.jaccard_profile.identical ? Stratum::identical : Stratum::low;
        plan.subject_a = draw_subject(mains);
        mains.insert(plan.subject_a);
        if (plan.stratum == Stratum::identical) {
            plan.subject_b = plan.subject_a;
        } else {
            const auto words = split_words(plan.subject_a);
            std::set<std::string> taken(words.begin(), words.end());
            auto fresh = [&] {
                for (int tries = 0; tries < 20000; ++tries) {
                    const std::string w = pick(pools.subjects);
                    if (!taken.count(w)) return w;
                }
                throw GenerationError("subject pool too small for low-stratum mutation");
            };
            if (rng.uniform() < 0.5) {
                plan.subject_b = words[0] + " " + fresh();  // one shared token, J = 1/3
            } else {
                const std::string w1 = fresh();
                taken.insert(w1);
                plan.subject_b = w1 + " " + fresh();  // disjoint, J = 0
            }
            mains.insert(plan.subject_b);
        }
        plans.push_back(std::move(plan));
    }

    PoolCursor rel_a(pools.rel_a, "relation (L_A)"), rel_b(pools.rel_b, "relation (L_B)");
    PoolCursor obj_a(pools.obj_a, "object (L_A)"), obj_b(pools.obj_b, "object (L_B)");

    std::vector<FactRecord> records;
    int next_id = 0;
    for (int i = 0; i < cfg.n_pairs; ++i) {
        const PairPlan& plan = plans[i];
        const bool two_word_objects = (i % 4) == 3;
        const std::string ra1 = rel_a.take(), ra2 = rel_a.take();
        const std::string rb1 = rel_b.take(), rb2 = rel_b.take();
        auto take_object = [&](PoolCursor& cur) {
            std::string o = cur.take();
            if (two_word_objects) o += " " + cur.take();
            return o;
        };
        const std::string true_a = take_object(obj_a), new_a = take_object(obj_a);
        const std::string true_b = take_object(obj_b), new_b = take_object(obj_b);

        // neighborhood subjects: shared surfaces across languages, never a main
        std::vector<std::string> neighbor_subjects;
        {
            std::set<std::string> avoid = mains;
            for (int n = 0; n < 10; ++n) {
                std::string s = draw_subject(avoid);
                avoid.insert(s);
                neighbor_subjects.push_back(std::move(s));
            }
        }

        auto make_record = [&](Language lang, const std::string& subject, const std::string& r1,
                               const std::string& r2, const std::string& target_true,
                               const std::string& target_new, const std::vector<std::string>& fillers,
                               bool gendered) {
            FactRecord rec;
            rec.id = next_id++;
            rec.pair_id = i;
            rec.language = lang;
            rec.stratum = plan.stratum;
            rec.subject = subject;
            rec.relation_template = gendered ? "{} gb " + r1 + " " + r2 : "{} " + r1 + " " + r2;
            rec.target_true = target_true;
            rec.target_new = target_new;
            rec.efficacy_prompt = fill_template(rec.relation_template, subject);
            const std::string marker = pick(fillers);
            for (int k = 0; k < 2; ++k) {
                std::vector<std::string> words;
                const auto noise_len = rng.uniform_int(cfg.noise_min, cfg.noise_max);
                for (int64_t n = 0; n < noise_len; ++n) words.push_back(pick(fillers));
                for (const auto& w : split_words(subject)) words.push_back(w);
                if (gendered) words.push_back("gb");
                if (k == 0) {
                    words.push_back(r2);  // reversed surface keeps it distinct from the
                    words.push_back(r1);  // efficacy prompt even with zero noise
                } else {
                    words.push_back(marker);
                    words.push_back(r1);
                    words.push_back(r2);
                }
                rec.paraphrase_prompts.push_back(join(words));
            }
            for (const std::string& s : neighbor_subjects)
                rec.neighborhood_prompts.push_back({fill_template(rec.relation_template, s), s});
            rec.validate();
            records.push_back(std::move(rec));
        };

        make_record(Language::la, plan.subject_a, ra1, ra2, true_a, new_a, pools.fil_a, false);
        make_record(Language::lb, plan.subject_b, rb1, rb2, true_b, new_b, pools.fil_b, false);
        if (cfg.duplication_on_gender)
            make_record(Language::lb, plan.subject_b, rb1, rb2, true_b, new_b, pools.fil_b, true);
    }
    return records;
}

std::vector<std::string> corpus_texts(const std::vector<FactRecord>& records) {
    std::vector<std::string> texts;
    for (const FactRecord& r : records) {
        texts.push_back(r.efficacy_prompt);
        texts.push_back(r.target_true);
        texts.push_back(r.target_new);
        for (const auto& p : r.paraphrase_prompts) texts.push_back(p);
        for (const auto& np : r.neighborhood_prompts) texts.push_back(np.prompt);
    }
    return texts;
}

namespace {

Histogram make_histogram(const std::vector<double>& values) {
    Histogram h;
    for (int i = 0; i <= 10; ++i) h.edges.push_back(i / 10.0);
    h.counts.assign(10, 0);
    for (double v : values) {
        int bin = std::min(static_cast<int>(v * 10.0), 9);
        ++h.counts[static_cast<size_t>(bin)];
    }
    return h;
}

std::vector<std::string> template_words(const std::string& tmpl) {
    std::vector<std::string> out;
    for (const auto& w : split_words(tmpl))
        if (w != "{}") out.push_back(w);
    return out;
}

std::vector<std::string> target_words(const FactRecord& r) {
    std::vector<std::string> out = split_words(r.target_true);
    for (const auto& w : split_words(r.target_new)) out.push_back(w);
    return out;
}

}  // namespace

SimilarityHistograms similarity_histogram(const std::vector<FactRecord>& records) {
    std::map<int, const FactRecord*> first_a, first_b;
    for (const FactRecord& r : records) {
        auto& slot = r.language == Language::la ? first_a : first_b;
        slot.emplace(r.pair_id, &r);
    }
    std::vector<double> subj, rel, tgt;
    for (const auto& [pair_id, ra] : first_a) {
        auto it = first_b.find(pair_id);
        if (it == first_b.end()) continue;
        const FactRecord* rb = it->second;
        subj.push_back(jaccard_index(split_words(ra->subject), split_words(rb->subject)));
        rel.push_back(jaccard_index(template_words(ra->relation_template),
                                    template_words(rb->relation_template)));
        tgt.push_back(jaccard_index(target_words(*ra), target_words(*rb)));
    }
    if (subj.empty()) throw InputError("no matched cross-lingual pairs in the corpus");
    return {make_histogram(subj), make_histogram(rel), make_histogram(tgt)};
}

void save_corpus(const std::filesystem::path& path, const std::vector<FactRecord>& records) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const FactRecord& r : records) {
        nlohmann::ordered_json j;
        j["id"] = r.id;
        j["pair_id"] = r.pair_id;
        j["language"] = to_string(r.language);
        j["subject"] = r.subject;
        j["relation_template"] = r.relation_template;
        j["target_true"] = r.target_true;
        j["target_new"] = r.target_new;
        j["efficacy_prompt"] = r.efficacy_prompt;
        j["paraphrase_prompts"] = r.paraphrase_prompts;
        nlohmann::ordered_json nps = nlohmann::ordered_json::array();
        for (const auto& np : r.neighborhood_prompts)
            nps.push_back({{"prompt", np.prompt}, {"subject", np.subject}});
        j["neighborhood_prompts"] = std::move(nps);
        j["stratum"] = to_string(r.stratum);
        arr.push_back(std::move(j));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << arr.dump(2) << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<FactRecord> load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json arr;
    try {
        in >> arr;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is not valid JSON: " + e.what());
    }
    if (!arr.is_array()) throw IoError(path.string() + " is not a corpus (expected a JSON array)");
    std::vector<FactRecord> records;
    try {
        for (const auto& j : arr) {
            FactRecord r;
            r.id = j.at("id").get<int>();
            r.pair_id = j.at("pair_id").get<int>();
            r.language = language_from_string(j.at("language").get<std::string>());
            r.subject = j.at("subject").get<std::string>();
            r.relation_template = j.at("relation_template").get<std::string>();
            r.target_true = j.at("target_true").get<std::string>();
            r.target_new = j.at("target_new").get<std::string>();
            r.efficacy_prompt = j.at("efficacy_prompt").get<std::string>();
            r.paraphrase_prompts = j.at("paraphrase_prompts").get<std::vector<std::string>>();
            for (const auto& np : j.at("neighborhood_prompts"))
                r.neighborhood_prompts.push_back(
                    {np.at("prompt").get<std::string>(), np.at("subject").get<std::string>()});
            r.stratum = stratum_from_string(j.at("stratum").get<std::string>());
            r.validate();
            records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " has malformed records: " + e.what());
    }
    return records;
}

}  // namespace memat
