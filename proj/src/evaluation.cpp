#include "memat/evaluation.hpp"

#include "nlohmann/json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace memat {
namespace {

constexpr double kZ95 = 1.96;
constexpr int kRecordsPerBatch = 16;  // keeps packed probability matrices small

MetricValue aggregate(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    const double n = static_cast<double>(xs.size());
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    return {100.0 * mean, 100.0 * kZ95 * std::sqrt(var / n)};
}

void check_value(const char* name, const MetricValue& v, double lo, double hi) {
    if (!(v.value >= lo && v.value <= hi))
        throw ContractError(std::string(name) + " = " + std::to_string(v.value) +
                            " is outside [" + std::to_string(lo) + ", " + std::to_string(hi) +
                            "]");
    if (!(v.ci >= 0.0))
        throw ContractError(std::string(name) + " has a negative confidence interval");
}

// P(object | prompt) and the greedy hit flag from one packed probability
// matrix. Checking the argmax at every teacher-forced step is equivalent to
// decoding greedily and comparing, because the contexts agree until the first
// mismatch.
void score_sequence(const Mat& probs, int prompt_len, const std::vector<int>& object,
                    double* p_out, int* hit_out) {
    double logp = 0.0;
    bool hit = true;
    for (size_t t = 0; t < object.size(); ++t) {
        const auto row = probs.row(prompt_len - 1 + static_cast<int>(t));
        logp += std::log(row(object[t]));
        Eigen::Index arg = 0;
        row.maxCoeff(&arg);
        hit = hit && arg == object[t];
    }
    *p_out = std::exp(logp);
    *hit_out = hit ? 1 : 0;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

nlohmann::ordered_json value_json(const MetricValue& v) {
    return nlohmann::ordered_json{{"value", v.value}, {"ci", v.ci}};
}

MetricValue value_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("value") || !j.contains("ci"))
        throw IoError("metric entry must carry value and ci");
    return {j.at("value").get<double>(), j.at("ci").get<double>()};
}

}  // namespace

void MetricsReport::validate() const {
    check_value("ES", es, 0.0, 100.0);
    check_value("PS", ps, 0.0, 100.0);
    check_value("NS", ns, 0.0, 100.0);
    check_value("EM", em, -100.0, 100.0);
    check_value("PM", pm, -100.0, 100.0);
    check_value("NM", nm, -100.0, 100.0);
    check_value("EA", ea, 0.0, 100.0);
    check_value("PA", pa, 0.0, 100.0);
    check_value("NA", na, 0.0, 100.0);
    if (n_records <= 0) throw ContractError("report covers no records");
    if (!records.empty() && static_cast<int>(records.size()) != n_records)
        throw ContractError("report carries " + std::to_string(records.size()) +
                            " record entries but claims n_records = " + std::to_string(n_records));
}

MetricsReport summarize(const std::vector<RecordEval>& evals, Language language) {
    if (evals.empty()) throw InputError("cannot summarize an empty evaluation");

    std::vector<double> es, ps, ns, em, pm, nm, ea, pa, na;
    for (const RecordEval& e : evals) {
        if (e.p_new_pp.size() != e.p_true_pp.size() || e.p_new_pp.size() != e.hit_pa.size())
            throw ContractError("record " + std::to_string(e.record_id) +
                                " has ragged paraphrase arrays");
        if (e.p_new_np.size() != e.p_true_np.size() || e.p_new_np.size() != e.hit_na.size())
            throw ContractError("record " + std::to_string(e.record_id) +
                                " has ragged neighborhood arrays");

        es.push_back(e.p_new_ep > e.p_true_ep ? 1.0 : 0.0);
        em.push_back(e.p_new_ep - e.p_true_ep);
        ea.push_back(e.hit_ea ? 1.0 : 0.0);

        if (!e.p_new_pp.empty()) {
            double s = 0.0, m = 0.0, a = 0.0;
            for (size_t j = 0; j < e.p_new_pp.size(); ++j) {
                s += e.p_new_pp[j] > e.p_true_pp[j] ? 1.0 : 0.0;
                m += e.p_new_pp[j] - e.p_true_pp[j];
                a += e.hit_pa[j] ? 1.0 : 0.0;
            }
            const double inv = 1.0 / static_cast<double>(e.p_new_pp.size());
            ps.push_back(s * inv);
            pm.push_back(m * inv);
            pa.push_back(a * inv);
        }
        if (!e.p_new_np.empty()) {
            double s = 0.0, m = 0.0, a = 0.0;
            for (size_t j = 0; j < e.p_new_np.size(); ++j) {
                s += e.p_true_np[j] > e.p_new_np[j] ? 1.0 : 0.0;
                m += e.p_true_np[j] - e.p_new_np[j];
                a += e.hit_na[j] ? 1.0 : 0.0;
            }
            const double inv = 1.0 / static_cast<double>(e.p_new_np.size());
            ns.push_back(s * inv);
            nm.push_back(m * inv);
            na.push_back(a * inv);
        }
    }

    MetricsReport report;
    report.es = aggregate(es);
    report.ps = aggregate(ps);
    report.ns = aggregate(ns);
    report.em = aggregate(em);
    report.pm = aggregate(pm);
    report.nm = aggregate(nm);
    report.ea = aggregate(ea);
    report.pa = aggregate(pa);
    report.na = aggregate(na);
    report.n_records = static_cast<int>(evals.size());
    report.language = to_string(language);
    report.records = evals;
    report.validate();
    return report;
}

MetricsReport evaluate(const ModelParams& params, const Tokenizer& tok,
                       const std::vector<FactRecord>& records, Language language,
                       const HeadPatch* patch) {
    if (patch != nullptr) patch->validate(params.config);
    std::vector<const FactRecord*> subset;
    for (const FactRecord& r : records)
        if (r.language == language) subset.push_back(&r);
    if (subset.empty())
        throw InputError("no records to evaluate in " + to_string(language));

    const int max_len = params.config.max_seq_len;
    std::vector<RecordEval> evals;
    evals.reserve(subset.size());

    for (size_t begin = 0; begin < subset.size(); begin += kRecordsPerBatch) {
        const size_t end = std::min(subset.size(), begin + kRecordsPerBatch);

        // Two sequences per prompt, edited object first; prompt order is the
        // efficacy prompt, the paraphrases, then the neighborhood prompts.
        std::vector<std::vector<int>> seqs;
        std::vector<int> prompt_lens;
        for (size_t i = begin; i < end; ++i) {
            const FactRecord& rec = *subset[i];
            rec.validate();
            const std::vector<int> toks_new = tok.encode(rec.target_new);
            const std::vector<int> toks_true = tok.encode(rec.target_true);
            if (toks_new.empty() || toks_true.empty())
                throw InputError("record " + std::to_string(rec.id) + " has an empty object");

            auto add = [&](const std::string& prompt) {
                const std::vector<int> p = tok.encode(prompt);
                if (p.empty())
                    throw InputError("record " + std::to_string(rec.id) + " has an empty prompt");
                for (const std::vector<int>* obj : {&toks_new, &toks_true}) {
                    const int total = static_cast<int>(p.size() + obj->size());
                    if (total > max_len)
                        throw InputError("record " + std::to_string(rec.id) +
                                         ": prompt plus object needs " + std::to_string(total) +
                                         " tokens but max_seq_len is " + std::to_string(max_len));
                    std::vector<int> seq = p;
                    seq.insert(seq.end(), obj->begin(), obj->end());
                    seqs.push_back(std::move(seq));
                }
                prompt_lens.push_back(static_cast<int>(p.size()));
            };
            add(rec.efficacy_prompt);
            for (const std::string& pp : rec.paraphrase_prompts) add(pp);
            for (const NeighborhoodPrompt& np : rec.neighborhood_prompts) add(np.prompt);
        }

        const PackedForward packed = forward_many(params, seqs, patch);

        size_t seq_at = 0, prompt_at = 0;
        for (size_t i = begin; i < end; ++i) {
            const FactRecord& rec = *subset[i];
            const std::vector<int> toks_new = tok.encode(rec.target_new);
            const std::vector<int> toks_true = tok.encode(rec.target_true);

            auto next_pair = [&](double* p_new, double* p_true, int* hit_new, int* hit_true) {
                const int plen = prompt_lens[prompt_at++];
                score_sequence(packed.probs[seq_at++], plen, toks_new, p_new, hit_new);
                score_sequence(packed.probs[seq_at++], plen, toks_true, p_true, hit_true);
            };

            RecordEval e;
            e.record_id = rec.id;
            int hit_true = 0;
            next_pair(&e.p_new_ep, &e.p_true_ep, &e.hit_ea, &hit_true);
            for (size_t j = 0; j < rec.paraphrase_prompts.size(); ++j) {
                double pn = 0.0, pt = 0.0;
                int hn = 0, ht = 0;
                next_pair(&pn, &pt, &hn, &ht);
                e.p_new_pp.push_back(pn);
                e.p_true_pp.push_back(pt);
                e.hit_pa.push_back(hn);
            }
            for (size_t j = 0; j < rec.neighborhood_prompts.size(); ++j) {
                double pn = 0.0, pt = 0.0;
                int hn = 0, ht = 0;
                next_pair(&pn, &pt, &hn, &ht);
                e.p_new_np.push_back(pn);
                e.p_true_np.push_back(pt);
                e.hit_na.push_back(ht);  // the neighborhood target is the old object
            }
            evals.push_back(std::move(e));
        }
    }

    return summarize(evals, language);
}

double harmonic_success(const MetricsReport& report) {
    const double a = report.es.value, b = report.ps.value, c = report.ns.value;
    if (a <= 0.0 || b <= 0.0 || c <= 0.0) return 0.0;
    return 3.0 / (1.0 / a + 1.0 / b + 1.0 / c);
}

std::vector<CrossLingualCell> crosslingual_matrix(const ModelParams& base, const Tokenizer& tok,
                                                  const std::vector<FactRecord>& records,
                                                  const KeyBank& bank, const EditConfig& edit_cfg,
                                                  uint64_t seed) {
    if (records.empty()) throw InputError("no records for the cross-lingual matrix");
    const Language langs[] = {Language::la, Language::lb};
    const Stratum strata[] = {Stratum::identical, Stratum::low};

    std::vector<CrossLingualCell> cells;
    for (size_t li = 0; li < 2; ++li) {
        const Language edit_lang = langs[li];
        std::vector<FactRecord> edit_set;
        for (const FactRecord& r : records)
            if (r.language == edit_lang) edit_set.push_back(r);
        if (edit_set.empty()) {
            std::cerr << "warning: no " << to_string(edit_lang)
                      << " records to edit; skipping that row\n";
            continue;
        }
        const auto [edited, delta] =
            apply_edit(base, tok, edit_set, bank, edit_cfg, mix_seed(seed, li));

        for (const Language eval_lang : langs) {
            for (const Stratum stratum : strata) {
                std::vector<FactRecord> cell_set;
                for (const FactRecord& r : records)
                    if (r.language == eval_lang && r.stratum == stratum) cell_set.push_back(r);
                if (cell_set.empty()) {
                    std::cerr << "warning: empty " << to_string(stratum) << " stratum for "
                              << to_string(eval_lang) << " evaluation; cell skipped\n";
                    continue;
                }
                MetricsReport report = evaluate(edited, tok, cell_set, eval_lang);
                report.metadata["edit_language"] = to_string(edit_lang);
                report.metadata["stratum"] = to_string(stratum);
                cells.push_back({edit_lang, eval_lang, stratum, std::move(report)});
            }
        }
    }
    return cells;
}

std::vector<SweepEntry> k_sweep(const ModelParams& base, const Tokenizer& tok,
                                const std::vector<FactRecord>& edit_records,
                                const std::vector<FactRecord>& probe_records, const KeyBank& bank,
                                const EditConfig& edit_cfg, const MematConfig& memat_cfg,
                                const std::vector<int>& k_values, bool refine, uint64_t seed) {
    if (k_values.empty()) throw InputError("the sweep needs at least one K value");
    for (int k : k_values)
        if (k < 0) throw InputError("K must be non-negative, got " + std::to_string(k));
    if (edit_records.empty()) throw InputError("no records to edit");
    if (probe_records.empty()) throw InputError("no records to probe");
    const Language eval_lang = probe_records.front().language;
    for (const FactRecord& r : probe_records)
        if (r.language != eval_lang)
            throw InputError("probe records span multiple languages");

    const auto [edited, delta] =
        apply_edit(base, tok, edit_records, bank, edit_cfg, mix_seed(seed, 1));

    MetricsReport baseline = evaluate(edited, tok, probe_records, eval_lang);
    baseline.metadata["k"] = "0";

    std::vector<SweepEntry> entries;
    entries.push_back({0, baseline});

    AccuracyMap accuracy;
    const bool need_probes =
        std::any_of(k_values.begin(), k_values.end(), [](int k) { return k > 0; });
    if (need_probes) {
        const ProbeDataset ds =
            collect_probe_data(edited, tok, probe_records, refine, mix_seed(seed, 2));
        accuracy = train_probes(ds).second;
    }

    for (int k : k_values) {
        if (k == 0) {
            entries.push_back({0, baseline});
            continue;
        }
        const std::vector<HeadKey> psi = select_top_k(accuracy, k);
        MematConfig cfg = memat_cfg;
        cfg.k = k;
        HeadCorrectionSet corr = optimize_corrections(edited, tok, probe_records, psi, cfg,
                                                      mix_seed(seed, 3, (uint64_t)k));
        corr.language_edit = delta.language;
        const HeadPatch patch = apply_corrections(edited, corr);
        MetricsReport report = evaluate(edited, tok, probe_records, eval_lang, &patch);
        report.metadata["k"] = std::to_string(k);
        entries.push_back({k, std::move(report)});
    }
    return entries;
}

ScalingSchedule ScalingSchedule::build(int i_begin, int i_end) {
    if (i_begin < 0 || i_end < i_begin)
        throw ConfigError("schedule index range must satisfy 0 <= begin <= end");
    ScalingSchedule s;
    s.i_begin = i_begin;
    s.i_end = i_end;
    for (int i = i_begin; i <= i_end; ++i)
        s.counts.push_back(
            static_cast<int>(std::llround(std::exp(std::log(10000.0) * i / 16.0))));
    s.validate();
    return s;
}

void ScalingSchedule::validate() const {
    if (counts.empty()) throw ContractError("scaling schedule is empty");
    if (static_cast<int>(counts.size()) != i_end - i_begin + 1)
        throw ContractError("scaling schedule length disagrees with its index range");
    for (size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] < 1) throw ContractError("scaling schedule holds a count below 1");
        if (i > 0 && counts[i] <= counts[i - 1])
            throw ContractError("scaling schedule is not monotone increasing");
    }
}

std::vector<ScalePoint> scaling_curves(const ModelParams& base, const Tokenizer& tok,
                                       const std::vector<FactRecord>& pool,
                                       const HeadCorrectionSet& corrections, const KeyBank& bank,
                                       const EditConfig& edit_cfg, const ScalingSchedule& schedule,
                                       uint64_t seed) {
    schedule.validate();
    if (pool.empty()) throw InputError("scaling pool is empty");
    const Language lang = pool.front().language;
    for (const FactRecord& r : pool)
        if (r.language != lang) throw InputError("scaling pool spans multiple languages");
    const int max_n = schedule.counts.back();
    if (max_n > static_cast<int>(pool.size()))
        throw InputError("scaling schedule needs " + std::to_string(max_n) +
                         " records but the pool has " + std::to_string(pool.size()));

    std::vector<ScalePoint> points;
    for (size_t idx = 0; idx < schedule.counts.size(); ++idx) {
        const int n = schedule.counts[idx];
        const std::vector<FactRecord> subset(pool.begin(), pool.begin() + n);
        const RecycleResult rr =
            recycle_corrections(base, tok, subset, corrections, bank, edit_cfg,
                                mix_seed(seed, idx));
        MetricsReport bare = evaluate(rr.params, tok, subset, lang);
        bare.metadata["n"] = std::to_string(n);
        bare.metadata["variant"] = "memit";
        MetricsReport corrected = evaluate(rr.params, tok, subset, lang, &rr.patch);
        corrected.metadata["n"] = std::to_string(n);
        corrected.metadata["variant"] = "memat";
        points.push_back({n, std::move(bare), std::move(corrected)});
    }
    return points;
}

void save_report_json(const std::filesystem::path& path, const MetricsReport& report) {
    report.validate();
    nlohmann::ordered_json j;
    j["kind"] = "metrics-report";
    j["language"] = report.language;
    j["n_records"] = report.n_records;
    nlohmann::ordered_json metrics;
    metrics["es"] = value_json(report.es);
    metrics["ps"] = value_json(report.ps);
    metrics["ns"] = value_json(report.ns);
    metrics["em"] = value_json(report.em);
    metrics["pm"] = value_json(report.pm);
    metrics["nm"] = value_json(report.nm);
    metrics["ea"] = value_json(report.ea);
    metrics["pa"] = value_json(report.pa);
    metrics["na"] = value_json(report.na);
    j["metrics"] = std::move(metrics);
    j["metadata"] = report.metadata;
    nlohmann::ordered_json recs = nlohmann::ordered_json::array();
    for (const RecordEval& e : report.records) {
        nlohmann::ordered_json r;
        r["id"] = e.record_id;
        r["p_new_ep"] = e.p_new_ep;
        r["p_true_ep"] = e.p_true_ep;
        r["p_new_pp"] = e.p_new_pp;
        r["p_true_pp"] = e.p_true_pp;
        r["p_new_np"] = e.p_new_np;
        r["p_true_np"] = e.p_true_np;
        r["hit_ea"] = e.hit_ea;
        r["hit_pa"] = e.hit_pa;
        r["hit_na"] = e.hit_na;
        recs.push_back(std::move(r));
    }
    j["records"] = std::move(recs);

    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed while writing " + path.string());
}

MetricsReport load_report_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is not valid JSON: " + e.what());
    }
    try {
        if (j.value("kind", "") != "metrics-report")
            throw IoError(path.string() + " holds \"" + j.value("kind", "") +
                          "\", expected a metrics-report");
        MetricsReport report;
        report.language = j.at("language").get<std::string>();
        report.n_records = j.at("n_records").get<int>();
        const nlohmann::json& m = j.at("metrics");
        report.es = value_from_json(m.at("es"));
        report.ps = value_from_json(m.at("ps"));
        report.ns = value_from_json(m.at("ns"));
        report.em = value_from_json(m.at("em"));
        report.pm = value_from_json(m.at("pm"));
        report.nm = value_from_json(m.at("nm"));
        report.ea = value_from_json(m.at("ea"));
        report.pa = value_from_json(m.at("pa"));
        report.na = value_from_json(m.at("na"));
        report.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
        for (const nlohmann::json& r : j.at("records")) {
            RecordEval e;
            e.record_id = r.at("id").get<int>();
            e.p_new_ep = r.at("p_new_ep").get<double>();
            e.p_true_ep = r.at("p_true_ep").get<double>();
            e.p_new_pp = r.at("p_new_pp").get<std::vector<double>>();
            e.p_true_pp = r.at("p_true_pp").get<std::vector<double>>();
            e.p_new_np = r.at("p_new_np").get<std::vector<double>>();
            e.p_true_np = r.at("p_true_np").get<std::vector<double>>();
            e.hit_ea = r.at("hit_ea").get<int>();
            e.hit_pa = r.at("hit_pa").get<std::vector<int>>();
            e.hit_na = r.at("hit_na").get<std::vector<int>>();
            report.records.push_back(std::move(e));
        }
        report.validate();
        return report;
    } catch (const IoError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is missing report fields: " + e.what());
    } catch (const ContractError& e) {
        throw IoError(path.string() + " fails report validation: " + e.what());
    }
}

void save_metrics_csv(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "label,n_records,es,es_ci,ps,ps_ci,ns,ns_ci,em,em_ci,pm,pm_ci,nm,nm_ci,"
           "ea,ea_ci,pa,pa_ci,na,na_ci\n";
    for (const auto& [label, report] : rows) {
        if (label.find_first_of(",\n\"") != std::string::npos)
            throw InputError("row label \"" + label + "\" cannot hold commas or newlines");
        report.validate();
        out << label << ',' << report.n_records;
        for (const MetricValue* v : {&report.es, &report.ps, &report.ns, &report.em, &report.pm,
                                     &report.nm, &report.ea, &report.pa, &report.na})
            out << ',' << format_double(v->value) << ',' << format_double(v->ci);
        out << '\n';
    }
    if (!out) throw IoError("failed while writing " + path.string());
}

}  // namespace memat
