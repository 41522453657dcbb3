// Acceptance harness: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria can be filtered with --criteria "1-5", "6,8" or "all".

#include <chrono>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "pvm/config.hpp"
#include "pvm/metrics.hpp"
#include "pvm/train.hpp"
#include "pvm/verification.hpp"

namespace fs = std::filesystem;
using namespace pvm;

namespace {

struct CriterionResult {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

std::string out_root() {
    if (const char* env = std::getenv("PVM_OUT"); env && *env) return env;
    return "acceptance_out";
}

// ---- pinned experiment configs ---------------------------------------------

ExperimentConfig cls_direction_config() {
    ExperimentConfig c;
    c.task = "cls";
    c.variants = {Variant::Pvm, Variant::Vm};
    c.seeds = {1, 2, 3};
    c.epochs = 3;
    c.batch_size = 16;
    c.learning_rate = 1.5e-3;
    c.threads = 2;
    c.train_count = 5000;
    c.test_count = 1000;
    c.data_seed = 11;
    c.mask_seed = 29;
    c.mask_kind = "brush";
    c.mask_band_lo = 0.25;
    c.mask_band_hi = 0.50;
    c.out_dir = out_root() + "/cls_direction";
    return c;
}

ExperimentConfig depth_direction_config() {
    ExperimentConfig c;
    c.task = "depth";
    c.variants = {Variant::Pvm, Variant::Vm};
    c.seeds = {1, 2, 3};
    c.epochs = 2;
    c.batch_size = 8;
    c.learning_rate = 2e-3;
    c.threads = 2;
    c.train_count = 1000;
    c.test_count = 200;
    c.data_seed = 17;
    c.depth_density = 0.05;
    c.image_size = 64;
    c.model_feat = 4;
    c.model_patch = 4;
    c.model_rpssb = 6;
    c.model_pvmm = 2;
    c.out_dir = out_root() + "/depth_direction";
    return c;
}

ExperimentConfig stress_regime_config() {
    ExperimentConfig c;
    c.task = "cls";
    c.variants = {Variant::Pvm, Variant::Vm};
    c.seeds = {5};
    c.epochs = 3;
    c.batch_size = 16;
    c.learning_rate = 1.5e-3;
    c.threads = 2;
    c.train_count = 3000;
    c.test_count = 500;
    c.data_seed = 11;
    c.mask_seed = 29;
    c.out_dir = out_root() + "/stress_regimes";
    return c;
}

ExperimentConfig ablation_config() {
    ExperimentConfig c;
    c.task = "depth";
    c.variants = {Variant::Pvm};
    c.seeds = {7};
    c.epochs = 1;
    c.batch_size = 8;
    c.learning_rate = 2e-3;
    c.threads = 2;
    c.train_count = 300;
    c.test_count = 60;
    c.data_seed = 17;
    c.depth_density = 0.05;
    c.image_size = 64;
    c.model_feat = 4;
    c.model_patch = 4;
    c.model_rpssb = 2;
    c.model_pvmm = 2;
    c.out_dir = out_root() + "/ablation";
    return c;
}

// canonical payloads of everything criteria 6-9 produced, keyed by a label
// that is stable across the determinism repetition
std::map<std::string, std::string> g_payloads;

void remember_payload(const std::string& label, const std::string& path) {
    g_payloads[label] = metrics_canonical_payload(path);
}

// ---- criteria ----------------------------------------------------------------

CriterionResult criterion_suite(int id, const std::string& name, const SuiteResult& r,
                                double budget_s, double took_s) {
    CriterionResult out;
    out.id = id;
    out.name = name;
    out.pass = r.pass && (budget_s <= 0 || took_s < budget_s);
    std::ostringstream d;
    d << r.detail;
    if (budget_s > 0) {
        d << " | runtime " << took_s << "s (budget " << budget_s << "s)";
        if (took_s >= budget_s) d << " [OVER BUDGET]";
    }
    out.detail = d.str();
    out.seconds = took_s;
    return out;
}

CriterionResult run_criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r = suite_mask_oracle(1000);
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return criterion_suite(1, "mask-calculus oracle equivalence", r, 10.0, took);
}

CriterionResult run_criterion_2() {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r = suite_agnosticism(100);
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return criterion_suite(2, "placeholder-agnosticism (and baseline sensitivity)", r, 120.0, took);
}

CriterionResult run_criterion_3() {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r = suite_all_valid(50);
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return criterion_suite(3, "all-valid reduction to standard ops", r, 0.0, took);
}

CriterionResult run_criterion_4() {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r = suite_grad_checks(20);
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return criterion_suite(4, "gradient checks (primitives + end-to-end)", r, 300.0, took);
}

CriterionResult run_criterion_5() {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r = suite_fill(200);
    const double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return criterion_suite(5, "fill-until-valid termination", r, 0.0, took);
}

CriterionResult run_criterion_6() {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult out;
    out.id = 6;
    out.name = "desk-scale classification direction";
    ExperimentConfig cfg = cls_direction_config();
    fs::remove_all(cfg.out_dir);
    const auto runs = cmd_train(cfg);

    std::map<Variant, std::vector<double>> top1;
    for (const auto& r : runs) {
        top1[r.variant].push_back(r.final_test.at("top1"));
        remember_payload("c6/" + r.run_id, r.metrics_path);
    }
    const auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double mp = mean(top1[Variant::Pvm]), mv = mean(top1[Variant::Vm]);
    bool every_seed = true;
    for (size_t i = 0; i < top1[Variant::Pvm].size(); ++i)
        every_seed = every_seed && top1[Variant::Pvm][i] > top1[Variant::Vm][i];

    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.pass = (mp - mv >= 0.03) && every_seed && out.seconds < 1800.0;
    std::ostringstream d;
    d << "mean top1 pvm " << mp << " vs vm " << mv << " (gap "
      << (mp - mv) * 100 << " pts, need >= 3); per-seed pvm wins: "
      << (every_seed ? "yes" : "NO") << "; runtime " << out.seconds << "s (budget 1800s)";
    out.detail = d.str();
    return out;
}

CriterionResult run_criterion_7() {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult out;
    out.id = 7;
    out.name = "desk-scale depth direction";
    ExperimentConfig cfg = depth_direction_config();
    fs::remove_all(cfg.out_dir);
    const auto runs = cmd_train(cfg);

    std::map<Variant, std::vector<double>> rmse;
    for (const auto& r : runs) {
        rmse[r.variant].push_back(r.final_test.at("rmse"));
        remember_payload("c7/" + r.run_id, r.metrics_path);
    }
    const auto mean = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double mp = mean(rmse[Variant::Pvm]), mv = mean(rmse[Variant::Vm]);
    bool every_seed = true;
    for (size_t i = 0; i < rmse[Variant::Pvm].size(); ++i)
        every_seed = every_seed && rmse[Variant::Pvm][i] < rmse[Variant::Vm][i];

    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.pass = (mp <= 0.9 * mv) && every_seed && out.seconds < 2700.0;
    std::ostringstream d;
    d << "mean rmse pvm " << mp << " vs vm " << mv << " (relative gain "
      << (1.0 - mp / mv) * 100 << "%, need >= 10%); per-seed pvm wins: "
      << (every_seed ? "yes" : "NO") << "; runtime " << out.seconds << "s (budget 2700s)";
    out.detail = d.str();
    return out;
}

CriterionResult run_criterion_8() {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult out;
    out.id = 8;
    out.name = "stress-regime evaluation pipeline";
    ExperimentConfig cfg = stress_regime_config();
    fs::remove_all(cfg.out_dir);
    const auto runs = cmd_train(cfg);
    for (const auto& r : runs) remember_payload("c8/train/" + r.run_id, r.metrics_path);

    std::ostringstream d;
    bool pass = true;
    std::map<std::string, std::map<Variant, double>> acc;
    for (const std::string regime : {"easy", "hard", "extreme"}) {
        const auto results = cmd_eval(cfg, regime);
        if (results.size() != cfg.variants.size() * cfg.seeds.size()) pass = false;
        for (const auto& r : results) {
            const Variant v = r.run_id.find("-pvm-") != std::string::npos ? Variant::Pvm
                                                                          : Variant::Vm;
            acc[regime][v] += r.metrics.at("top1") / static_cast<double>(cfg.seeds.size());
            remember_payload("c8/eval-" + regime + "/" + r.run_id, r.metrics_path);
        }
    }
    for (const std::string regime : {"easy", "hard", "extreme"}) {
        const double p = acc[regime][Variant::Pvm], v = acc[regime][Variant::Vm];
        if (p < v) pass = false;
        d << regime << " pvm " << p << " / vm " << v << "; ";
    }
    // monotone degradation is reported but non-binding
    d << "pvm degradation easy->hard->extreme: " << acc["easy"][Variant::Pvm] << " -> "
      << acc["hard"][Variant::Pvm] << " -> " << acc["extreme"][Variant::Pvm]
      << " (reported, non-binding)";

    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.pass = pass;
    out.detail = d.str();
    return out;
}

CriterionResult run_criterion_9() {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult out;
    out.id = 9;
    out.name = "token-padding ablation pipeline";
    ExperimentConfig cfg = ablation_config();
    fs::remove_all(cfg.out_dir);
    const auto report = cmd_ablate_padding(cfg);

    bool pass = report.rows.size() == 3;
    if (pass) {
        pass = report.rows[0].padding == TokenPadding::Zero &&
               report.rows[1].padding == TokenPadding::Mean &&
               report.rows[2].padding == TokenPadding::Learned;
    }
    for (const TokenPadding p : {TokenPadding::Zero, TokenPadding::Mean, TokenPadding::Learned}) {
        ExperimentConfig c = cfg;
        c.padding = p;
        for (uint64_t seed : cfg.seeds) {
            const std::string run_id = c.run_id(Variant::Pvm, seed);
            const std::string mpath = (fs::path(cfg.out_dir) / run_id / "metrics.jsonl").string();
            if (!fs::exists(mpath)) pass = false;
            else remember_payload("c9/" + run_id, mpath);
        }
    }
    std::ostringstream d;
    d << "rows zero/mean/learned rmse " << report.rows[0].mean_rmse << "/"
      << report.rows[1].mean_rmse << "/" << report.rows[2].mean_rmse
      << "; full-scale reference 1.415/1.398/1.383 m (context only); measured ordering "
      << (report.rows[2].mean_rmse <= report.rows[1].mean_rmse &&
                  report.rows[1].mean_rmse <= report.rows[0].mean_rmse
              ? "matches"
              : "differs")
      << " (reported, non-binding)";
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.pass = pass;
    out.detail = d.str();
    return out;
}

CriterionResult run_criterion_10() {
    const auto t0 = std::chrono::steady_clock::now();
    CriterionResult out;
    out.id = 10;
    out.name = "determinism of criteria 6-9";

    // make sure the first pass exists
    if (g_payloads.empty()) {
        run_criterion_6();
        run_criterion_7();
        run_criterion_8();
        run_criterion_9();
    }
    const std::map<std::string, std::string> first = g_payloads;
    g_payloads.clear();
    run_criterion_6();
    run_criterion_7();
    run_criterion_8();
    run_criterion_9();

    int compared = 0, equal = 0;
    for (const auto& [label, payload] : first) {
        auto it = g_payloads.find(label);
        if (it == g_payloads.end()) continue;
        ++compared;
        if (it->second == payload) ++equal;
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.pass = compared > 0 && compared == static_cast<int>(first.size()) && equal == compared;
    std::ostringstream d;
    d << equal << "/" << compared << " metrics payloads byte-identical across repetition"
      << " (timestamps excluded); runtime " << out.seconds << "s";
    out.detail = d.str();
    return out;
}

CriterionResult run_one(int id) {
    switch (id) {
        case 1: return run_criterion_1();
        case 2: return run_criterion_2();
        case 3: return run_criterion_3();
        case 4: return run_criterion_4();
        case 5: return run_criterion_5();
        case 6: return run_criterion_6();
        case 7: return run_criterion_7();
        case 8: return run_criterion_8();
        case 9: return run_criterion_9();
        default: return run_criterion_10();
    }
}

std::vector<int> parse_criteria(const std::string& spec) {
    if (spec == "all" || spec.empty()) return {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    std::vector<int> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const size_t dash = item.find('-');
        if (dash != std::string::npos) {
            const int lo = std::stoi(item.substr(0, dash));
            const int hi = std::stoi(item.substr(dash + 1));
            for (int i = lo; i <= hi; ++i) out.push_back(i);
        } else {
            out.push_back(std::stoi(item));
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::string spec = "all";
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criteria") == 0 && i + 1 < argc) spec = argv[++i];
    }
    std::vector<int> ids;
    try {
        ids = parse_criteria(spec);
    } catch (const std::exception&) {
        std::cerr << "usage: acceptance [--criteria all|1-5|6,8|...]\n";
        return 2;
    }

    bool all_pass = true;
    for (int id : ids) {
        try {
            const CriterionResult r = run_one(id);
            std::cout << (r.pass ? "[PASS]" : "[FAIL]") << " criterion " << r.id << " (" << r.name
                      << "): " << r.detail << "\n";
            std::cout.flush();
            all_pass = all_pass && r.pass;
        } catch (const std::exception& e) {
            std::cout << "[FAIL] criterion " << id << ": exception: " << e.what() << "\n";
            all_pass = false;
        }
    }
    return all_pass ? 0 : 1;
}
