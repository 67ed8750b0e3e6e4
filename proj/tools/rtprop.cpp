// rtprop: ingest tutor logs, simulate, fit the response-time and iAFM models,
// and run the slice analyses. Settings come from a TOML file (--config) with
// command-line overrides.

#include "rtprop/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using rtprop::PipelineConfig;

void add_options(CLI::App& app, PipelineConfig& c, std::vector<double>& cov_student, std::vector<double>& cov_skill,
                 std::vector<double>& moderation, std::vector<int>& moderation_slices, std::string& criterion,
                 std::string& multi_kc, std::string& delimiter, double& winsorize, bool& no_session_ids) {
    app.add_option("--input", c.input, "Transaction file (tab or comma delimited)");
    app.add_option("--steps", c.steps, "Step table CSV (default: <run>/steps.csv)");
    app.add_option("--output-dir", c.output_dir, "Parent directory of run directories")->capture_default_str();
    app.add_option("--run-name", c.run_name, "Run directory name (default: <UTC timestamp>_<config hash>)");

    auto* g = "Schema";
    app.add_option("--col-student", c.schema.student)->group(g)->capture_default_str();
    app.add_option("--col-session", c.schema.session, "Empty when the source has no session column")
        ->group(g)
        ->capture_default_str();
    app.add_option("--col-time", c.schema.time)->group(g)->capture_default_str();
    app.add_option("--col-problem", c.schema.problem)->group(g)->capture_default_str();
    app.add_option("--col-step", c.schema.step)->group(g)->capture_default_str();
    app.add_option("--col-attempt", c.schema.attempt)->group(g)->capture_default_str();
    app.add_option("--col-outcome", c.schema.outcome)->group(g)->capture_default_str();
    app.add_option("--col-kc", c.schema.kc)->group(g)->capture_default_str();
    app.add_option("--delimiter", delimiter, "Field delimiter: tab, comma or auto")->group(g)->capture_default_str();
    app.add_option("--kc-delimiter", c.schema.kc_delimiter)->group(g)->capture_default_str();

    g = "Ingestion";
    app.add_option("--session-gap-minutes", c.session_gap_minutes, "Inactivity gap that starts a new session")
        ->group(g)
        ->capture_default_str();
    app.add_option("--multi-kc", multi_kc, "replicate or first")->group(g)->capture_default_str();
    app.add_option("--winsorize", winsorize, "Upper quantile for RT winsorization (off by default)")->group(g);
    app.add_option("--slices", c.slices, "Number of session time slices")->group(g)->capture_default_str();

    g = "Models";
    app.add_option("--criterion", criterion, "REML or ML for the response-time model")->group(g)->capture_default_str();
    app.add_option("--lmm-tolerance", c.lmm.tolerance)->group(g)->capture_default_str();
    app.add_option("--lmm-max-iterations", c.lmm.max_iterations)->group(g)->capture_default_str();
    app.add_flag("--center-opportunity", c.iafm.center_opportunity)->group(g);
    app.add_flag("--pin-covariance-zero", c.iafm.pin_covariance_zero)->group(g);
    app.add_option("--iafm-inner-tolerance", c.iafm.inner_tolerance)->group(g)->capture_default_str();
    app.add_option("--iafm-outer-tolerance", c.iafm.outer_tolerance)->group(g)->capture_default_str();
    app.add_option("--iafm-max-iterations", c.iafm.max_outer_iterations)->group(g)->capture_default_str();

    g = "Analysis";
    app.add_option("--min-obs", c.min_obs_per_slice, "Minimum steps per student within a slice")
        ->group(g)
        ->capture_default_str();
    app.add_flag("--include-unconverged", c.include_unconverged)->group(g);
    app.add_option("--threads", c.threads, "Slice fits in parallel (0: one per slice)")->group(g)->capture_default_str();

    g = "Simulation";
    app.add_option("--seed", c.seed)->group(g)->capture_default_str();
    app.add_option("--sim-students", c.sim.n_students)->group(g)->capture_default_str();
    app.add_option("--sim-skills", c.sim.n_skills)->group(g)->capture_default_str();
    app.add_option("--sim-mean-obs", c.sim.mean_obs_per_student)->group(g)->capture_default_str();
    app.add_option("--sim-sd-obs", c.sim.sd_obs_per_student)->group(g)->capture_default_str();
    app.add_option("--sim-min-obs", c.sim.min_obs_per_student)->group(g)->capture_default_str();
    app.add_option("--sim-mean-skills", c.sim.mean_skills_per_student)->group(g)->capture_default_str();
    app.add_option("--sim-sd-skills", c.sim.sd_skills_per_student)->group(g)->capture_default_str();
    app.add_option("--sim-zipf", c.sim.zipf_exponent)->group(g)->capture_default_str();
    app.add_option("--sim-steps-per-problem", c.sim.steps_per_problem)->group(g)->capture_default_str();
    app.add_option("--sim-second-session", c.sim.prob_second_session)->group(g)->capture_default_str();
    app.add_option("--sim-multi-kc-fraction", c.sim.multi_kc_fraction)->group(g)->capture_default_str();
    app.add_option("--sim-hint-fraction", c.sim.hint_fraction)->group(g)->capture_default_str();
    app.add_option("--sim-rt-mean", c.sim.rt_grand_mean)->group(g)->capture_default_str();
    app.add_option("--sim-rt-var-student", c.sim.rt_var_student)->group(g)->capture_default_str();
    app.add_option("--sim-rt-var-skill", c.sim.rt_var_skill)->group(g)->capture_default_str();
    app.add_option("--sim-rt-var-resid", c.sim.rt_var_resid)->group(g)->capture_default_str();
    app.add_option("--sim-beta0", c.sim.iafm_beta0)->group(g)->capture_default_str();
    app.add_option("--sim-beta-opp", c.sim.iafm_beta_opp)->group(g)->capture_default_str();
    app.add_option("--sim-cov-student", cov_student, "var_intercept covariance var_slope")
        ->group(g)
        ->expected(3);
    app.add_option("--sim-cov-skill", cov_skill, "var_intercept covariance var_slope")->group(g)->expected(3);
    app.add_option("--sim-moderation", moderation, "b0 b_rt b_prof b_interaction")->group(g)->expected(4);
    app.add_option("--sim-moderation-slices", moderation_slices, "Slices carrying the interaction (1-4)")
        ->group(g)
        ->expected(1, 4)
        ->check(CLI::Range(1, 4));
    app.add_flag("--sim-no-session-ids", no_session_ids, "Omit the session column")->group(g);
}

} // namespace

int main(int argc, char** argv) {
    PipelineConfig config;
    std::vector<double> cov_student, cov_skill, moderation;
    std::vector<int> moderation_slices;
    std::string criterion = "REML", multi_kc = "replicate", delimiter = "auto";
    double winsorize = -1.0;
    bool no_session_ids = false;

    CLI::App app{"rtprop: response-time propensities and learning rates from tutor logs"};
    app.set_version_flag("--version", std::string(rtprop::kVersion));
    app.set_config("--config", "", "TOML configuration file");
    app.require_subcommand(1);
    app.fallthrough();
    add_options(app, config, cov_student, cov_skill, moderation, moderation_slices, criterion, multi_kc, delimiter,
                winsorize, no_session_ids);

    auto* ingest = app.add_subcommand("ingest", "Transaction log -> step table + quality report");
    auto* simulate = app.add_subcommand("simulate", "Synthetic transactions + ground truth");
    auto* fit = app.add_subcommand("fit", "Fit the response-time (rt) or iAFM model");
    std::string model = "rt", scope = "global";
    fit->add_option("--model", model, "rt or iafm")->check(CLI::IsMember({"rt", "iafm"}))->capture_default_str();
    fit->add_option("--scope", scope, "global or by-slice")
        ->check(CLI::IsMember({"global", "by-slice"}))
        ->capture_default_str();
    auto* analyze = app.add_subcommand("analyze", "Stability, moderation and slice analyses with report");
    auto* report = app.add_subcommand("report", "Simulate (without --input), ingest, fit and analyze in one run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : rtprop::exit_code(rtprop::ErrorKind::Config);
    }

    try {
        if (criterion == "REML" || criterion == "reml")
            config.lmm.criterion = rtprop::Criterion::REML;
        else if (criterion == "ML" || criterion == "ml")
            config.lmm.criterion = rtprop::Criterion::ML;
        else
            rtprop::config_error("criterion must be REML or ML");
        if (multi_kc == "replicate")
            config.multi_kc = rtprop::MultiKcMode::Replicate;
        else if (multi_kc == "first")
            config.multi_kc = rtprop::MultiKcMode::FirstOnly;
        else
            rtprop::config_error("multi-kc must be replicate or first");
        if (delimiter == "tab" || delimiter == "\\t")
            config.schema.delimiter = '\t';
        else if (delimiter == "comma" || delimiter == ",")
            config.schema.delimiter = ',';
        else if (delimiter != "auto")
            rtprop::config_error("delimiter must be tab, comma or auto");
        if (winsorize >= 0.0) config.winsorize_quantile = winsorize;
        if (!cov_student.empty()) config.sim.cov_student = {cov_student[0], cov_student[1], cov_student[2]};
        if (!cov_skill.empty()) config.sim.cov_skill = {cov_skill[0], cov_skill[1], cov_skill[2]};
        if (!moderation.empty())
            config.sim.moderation = rtprop::ModerationCoeffs{moderation[0], moderation[1], moderation[2], moderation[3]};
        if (!moderation_slices.empty()) {
            config.sim.moderation_slices.fill(false);
            for (int q : moderation_slices) config.sim.moderation_slices[static_cast<std::size_t>(q - 1)] = true;
        }
        config.sim.emit_session_ids = !no_session_ids;
        if (config.slices < 1) rtprop::config_error("slices must be positive");

        rtprop::CommandResult result;
        if (*ingest)
            result = rtprop::cmd_ingest(config);
        else if (*simulate)
            result = rtprop::cmd_simulate(config);
        else if (*fit)
            result = rtprop::cmd_fit(config, model == "rt" ? rtprop::FitModel::Rt : rtprop::FitModel::Iafm,
                                     scope == "global" ? rtprop::FitScope::Global : rtprop::FitScope::BySlice);
        else if (*analyze)
            result = rtprop::cmd_analyze(config);
        else if (*report)
            result = rtprop::cmd_report(config);

        for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
        std::cout << result.run_dir.string() << '\n';
        for (const auto& f : result.files) std::cout << "  " << f.filename().string() << '\n';
        return 0;
    } catch (const rtprop::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return rtprop::exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return rtprop::exit_code(rtprop::ErrorKind::Numerical);
    }
}
