#include "crce/evaluator.hpp"

#include "crce/error.hpp"
#include "crce/png.hpp"
#include "crce/util.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace crce {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(EvalGroup g) noexcept {
    switch (g) {
    case EvalGroup::Target: return "target";
    case EvalGroup::CorefTrain: return "coref_train";
    case EvalGroup::CorefTest: return "coref_test";
    case EvalGroup::RetainTrain: return "retain_train";
    case EvalGroup::RetainTest: return "retain_test";
    }
    return "?";
}

bool is_erasure_group(EvalGroup g) noexcept {
    return g == EvalGroup::Target || g == EvalGroup::CorefTrain || g == EvalGroup::CorefTest;
}

std::vector<std::uint64_t> EvalOptions::effective_seeds() const {
    if (!seeds.empty())
        return seeds;
    std::vector<std::uint64_t> s(static_cast<std::size_t>(std::max(0, n_images)));
    std::iota(s.begin(), s.end(), 0);
    return s;
}

std::string prompt_hash(std::string_view prompt) { return sha256_hex(prompt).substr(0, 16); }

BackendImageSource::BackendImageSource(const DiffusionBackend& backend, ParamSet params, TextEncoder& encoder,
                                       std::optional<std::filesystem::path> cache_dir)
    : backend_(backend), params_(std::move(params)), encoder_(encoder), cache_dir_(std::move(cache_dir)) {}

const Conditioning& BackendImageSource::conditioning(const std::string& prompt) {
    std::lock_guard lock(mutex_);
    auto it = conds_.find(prompt);
    if (it == conds_.end())
        it = conds_.emplace(prompt, encoder_.encode_sequence(prompt)).first;
    return it->second;
}

GeneratedImage BackendImageSource::generate(const std::string& prompt, std::uint64_t seed) {
    const Conditioning& cond = conditioning(prompt);
    const Conditioning& uncond = conditioning("");
    const Latent x = backend_.generate(params_, cond, uncond, seed);

    GeneratedImage img;
    img.prompt = prompt;
    img.seed = seed;
    img.image_id = prompt_hash(prompt) + "/" + std::to_string(seed);
    if (x.size() == 2) {
        img.metadata["x"] = x(0);
        img.metadata["y"] = x(1);
        img.png = render_point_png(x(0), x(1));
    } else {
        img.metadata["latent"] = std::vector<double>(x.data(), x.data() + x.size());
    }
    if (cache_dir_ && !img.png.empty()) {
        const auto dir = *cache_dir_ / prompt_hash(prompt);
        std::filesystem::create_directories(dir);
        atomic_write(dir / (std::to_string(seed) + ".png"),
                     std::string_view(reinterpret_cast<const char*>(img.png.data()), img.png.size()));
    }
    return img;
}

ordered_json to_json(const VerdictRecord& v) {
    ordered_json j;
    j["group"] = to_string(v.group);
    j["prompt"] = v.prompt;
    j["concept"] = v.concept_name;
    j["image_id"] = v.image_id;
    j["seed"] = v.seed;
    j["raw_text"] = v.raw_text;
    j["answer"] = v.answer ? json(to_string(*v.answer)) : json(nullptr);
    j["ambiguous"] = v.ambiguous;
    j["imputed"] = v.imputed;
    if (!v.error.empty())
        j["error"] = v.error;
    return j;
}

int GroupResult::yes() const {
    int n = 0;
    for (const auto& p : prompts)
        n += p.yes;
    return n;
}

int GroupResult::judged() const {
    int n = 0;
    for (const auto& p : prompts)
        n += p.judged;
    return n;
}

int GroupResult::failed() const {
    int n = 0;
    for (const auto& p : prompts)
        n += p.failed;
    return n;
}

int GroupResult::ambiguous() const {
    int n = 0;
    for (const auto& p : prompts)
        n += p.ambiguous;
    return n;
}

double GroupResult::yes_rate() const {
    const int j = judged();
    return j == 0 ? 0.0 : static_cast<double>(yes()) / j;
}

GroupResult evaluate_prompt_group(ImageSource& source, const std::vector<std::string>& prompts,
                                  const std::vector<std::string>& criteria, Judge& judge, EvalGroup group,
                                  const EvalOptions& options) {
    if (options.n_images < 1)
        throw ValidationError("n_images must be at least 1");
    const auto seeds = options.effective_seeds();
    if (seeds.size() != static_cast<std::size_t>(options.n_images))
        throw ValidationError("need exactly n_images seeds, got " + std::to_string(seeds.size()));
    if (criteria.size() != prompts.size())
        throw ValidationError("one judging criterion per prompt is required");

    const std::size_t n_pairs = prompts.size() * seeds.size();
    std::vector<VerdictRecord> out(n_pairs);
    auto run_pair = [&](std::size_t k) {
        const std::size_t pi = k / seeds.size();
        VerdictRecord& v = out[k];
        v.group = group;
        v.prompt = prompts[pi];
        v.concept_name = criteria[pi];
        v.seed = seeds[k % seeds.size()];
        GeneratedImage img;
        try {
            img = source.generate(v.prompt, v.seed);
        } catch (const std::exception& e) {
            v.error = std::string("generation failed: ") + e.what();
            return;
        }
        v.image_id = img.image_id;
        const std::string question = build_judge_prompt(v.concept_name);
        for (int attempt = 0; attempt < 2 && !v.answer; ++attempt) {
            try {
                v.raw_text = judge.ask(img, question);
            } catch (const std::exception& e) {
                v.error = std::string("judge failed: ") + e.what();
                return;
            }
            try {
                v.answer = parse_verdict(v.raw_text);
            } catch (const AmbiguousVerdict&) {
            }
        }
        if (!v.answer) {
            v.ambiguous = true;
            if (options.ambiguous == AmbiguousPolicy::Conservative) {
                v.answer = is_erasure_group(group) ? Answer::Yes : Answer::No;
                v.imputed = true;
            }
        }
    };

    const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(n_pairs)));
    if (workers == 1) {
        for (std::size_t k = 0; k < n_pairs; ++k)
            run_pair(k);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t k = next++; k < n_pairs; k = next++)
                    run_pair(k);
            });
    }

    GroupResult r;
    for (std::size_t pi = 0; pi < prompts.size(); ++pi) {
        PromptTally t;
        t.prompt = prompts[pi];
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const auto& v = out[pi * seeds.size() + s];
            if (!v.error.empty()) {
                ++t.failed;
                continue;
            }
            t.ambiguous += v.ambiguous;
            if (v.answer) {
                ++t.judged;
                t.yes += *v.answer == Answer::Yes;
            }
        }
        r.prompts.push_back(std::move(t));
    }
    r.verdicts = std::move(out);
    return r;
}

double EvalReport::metric(EvalGroup g) const {
    switch (g) {
    case EvalGroup::Target: return acc_u;
    case EvalGroup::CorefTrain: return acc_c_train;
    case EvalGroup::CorefTest: return acc_c_test;
    case EvalGroup::RetainTrain: return acc_r_train;
    case EvalGroup::RetainTest: return acc_r_test;
    }
    return 0;
}

namespace {

double& metric_ref(EvalReport& r, EvalGroup g) {
    switch (g) {
    case EvalGroup::Target: return r.acc_u;
    case EvalGroup::CorefTrain: return r.acc_c_train;
    case EvalGroup::CorefTest: return r.acc_c_test;
    case EvalGroup::RetainTrain: return r.acc_r_train;
    case EvalGroup::RetainTest: break;
    }
    return r.acc_r_test;
}

const char* kColumns[] = {"acc_u", "acc_c_train", "acc_c_test", "acc_r_train", "acc_r_test"};

} // namespace

ordered_json to_json(const EvalReport& r) {
    ordered_json j;
    j["target"] = r.target;
    j["method"] = r.method;
    for (std::size_t i = 0; i < kAllGroups.size(); ++i)
        j[kColumns[i]] = r.metric(kAllGroups[i]);
    j["n_images_per_prompt"] = r.n_images_per_prompt;
    j["seeds"] = r.seeds;
    j["ambiguous"] = r.ambiguous;
    j["failed"] = r.failed;
    j["partial"] = r.partial;
    return j;
}

EvalReport eval_report_from_json(const json& j) {
    EvalReport r;
    try {
        r.target = j.at("target").get<std::string>();
        r.method = j.value("method", std::string{});
        for (std::size_t i = 0; i < kAllGroups.size(); ++i)
            metric_ref(r, kAllGroups[i]) = j.at(kColumns[i]).get<double>();
        r.n_images_per_prompt = j.value("n_images_per_prompt", 0);
        r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
        r.ambiguous = j.value("ambiguous", 0);
        r.failed = j.value("failed", 0);
        r.partial = j.value("partial", false);
    } catch (const json::exception& e) {
        throw ParseError(std::string("eval report: ") + e.what());
    }
    return r;
}

std::string format_percent(double rate) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", rate * 100.0);
    return buf;
}

std::string render_markdown(const EvalReport& r) {
    std::string s = "| " + (r.method.empty() ? r.target : r.method) + " |";
    for (auto g : kAllGroups)
        s += " " + format_percent(r.metric(g)) + " |";
    return s;
}

EvalReport compute_report(const ConceptRecord& record, const std::map<EvalGroup, std::vector<double>>& rates) {
    EvalReport r;
    r.target = record.target;
    for (auto g : kAllGroups) {
        auto it = rates.find(g);
        if (it == rates.end() || it->second.empty())
            throw ValidationError("compute_report: missing rates for group " + std::string(to_string(g)));
        double sum = 0;
        for (double v : it->second) {
            if (!(v >= 0 && v <= 1))
                throw ValidationError("compute_report: rate outside [0,1] in group " + std::string(to_string(g)));
            sum += v;
        }
        metric_ref(r, g) = sum / static_cast<double>(it->second.size());
    }
    return r;
}

EvalReport compute_report(const ConceptRecord& record, const std::map<EvalGroup, GroupResult>& results) {
    EvalReport r;
    r.target = record.target;
    for (auto g : kAllGroups) {
        auto it = results.find(g);
        if (it == results.end())
            throw ValidationError("compute_report: missing group " + std::string(to_string(g)));
        metric_ref(r, g) = it->second.yes_rate();
        r.ambiguous += it->second.ambiguous();
        r.failed += it->second.failed();
    }
    r.partial = r.failed > 0;
    return r;
}

Comparison compare_reports(const std::vector<EvalReport>& reports) {
    if (reports.empty())
        throw ValidationError("compare_reports: no reports");
    std::array<double, 5> best{};
    for (std::size_t c = 0; c < kAllGroups.size(); ++c) {
        const bool lower = is_erasure_group(kAllGroups[c]);
        best[c] = reports.front().metric(kAllGroups[c]);
        for (const auto& r : reports) {
            const double v = r.metric(kAllGroups[c]);
            best[c] = lower ? std::min(best[c], v) : std::max(best[c], v);
        }
    }

    std::ostringstream md, csv;
    md << "| Method | Acc_U ↓ | Acc_C^train ↓ | Acc_C^test ↓ | Acc_R^train ↑ | Acc_R^test ↑ |\n";
    md << "|---|---|---|---|---|---|\n";
    csv << "method,target,acc_u,acc_c_train,acc_c_test,acc_r_train,acc_r_test,best\n";
    for (const auto& r : reports) {
        const std::string name = r.method.empty() ? r.target : r.method;
        md << "| " << name << " |";
        csv << name << "," << r.target;
        std::string best_cols;
        for (std::size_t c = 0; c < kAllGroups.size(); ++c) {
            const double v = r.metric(kAllGroups[c]);
            const bool is_best = v == best[c];
            md << " " << (is_best ? "**" + format_percent(v) + "**" : format_percent(v)) << " |";
            csv << "," << format_percent(v);
            if (is_best)
                best_cols += (best_cols.empty() ? "" : ";") + std::string(kColumns[c]);
        }
        md << "\n";
        csv << "," << best_cols << "\n";
    }
    return {md.str(), csv.str()};
}

EvaluationResult evaluate_record(const ConceptRecord& record, ImageSource& source, Judge& judge,
                                 const EvalOptions& options, std::string method) {
    auto texts = [](const std::vector<ConceptEntry>& v) {
        std::vector<std::string> out;
        for (const auto& e : v)
            out.push_back(e.text);
        return out;
    };
    EvaluationResult res;
    auto run = [&](EvalGroup g, const std::vector<std::string>& prompts, const std::vector<std::string>& criteria) {
        res.groups.emplace(g, evaluate_prompt_group(source, prompts, criteria, judge, g, options));
    };
    auto coref_criteria = [&](const std::vector<std::string>& prompts) {
        return options.corefs_against_target ? std::vector<std::string>(prompts.size(), record.target) : prompts;
    };
    run(EvalGroup::Target, {record.target}, {record.target});
    const auto ctr = texts(record.corefs.train), cte = texts(record.corefs.test);
    run(EvalGroup::CorefTrain, ctr, coref_criteria(ctr));
    run(EvalGroup::CorefTest, cte, coref_criteria(cte));
    const auto rtr = texts(record.retains.train), rte = texts(record.retains.test);
    run(EvalGroup::RetainTrain, rtr, rtr);
    run(EvalGroup::RetainTest, rte, rte);

    res.report = compute_report(record, res.groups);
    res.report.method = std::move(method);
    res.report.n_images_per_prompt = options.n_images;
    res.report.seeds = options.effective_seeds();
    return res;
}

void write_verdict_log(const std::filesystem::path& path, const EvaluationResult& result) {
    std::string out;
    for (auto g : kAllGroups) {
        auto it = result.groups.find(g);
        if (it == result.groups.end())
            continue;
        for (const auto& v : it->second.verdicts)
            out += to_json(v).dump() + "\n";
    }
    atomic_write(path, out);
}

} // namespace crce
