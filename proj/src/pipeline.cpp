#include "rtprop/pipeline.hpp"

#include "rtprop/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace rtprop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json schema_json(const TransactionSchema& s) {
    json outcomes = json::object();
    for (const auto& [code, o] : s.outcome_codes) outcomes[code] = outcome_code(o);
    return {{"student", s.student}, {"session", s.session},   {"time", s.time},
            {"problem", s.problem}, {"step", s.step},         {"attempt", s.attempt},
            {"outcome", s.outcome}, {"kc", s.kc},             {"delimiter", std::string(1, s.delimiter ? s.delimiter : '?')},
            {"kc_delimiter", s.kc_delimiter}, {"outcome_codes", outcomes}};
}

json cov_json(const Cov2& c) { return {c.var_intercept, c.covariance, c.var_slope}; }

json sim_json(const SimConfig& c) {
    json j = {{"n_students", c.n_students},
              {"n_skills", c.n_skills},
              {"mean_obs_per_student", c.mean_obs_per_student},
              {"sd_obs_per_student", c.sd_obs_per_student},
              {"min_obs_per_student", c.min_obs_per_student},
              {"mean_skills_per_student", c.mean_skills_per_student},
              {"sd_skills_per_student", c.sd_skills_per_student},
              {"zipf_exponent", c.zipf_exponent},
              {"steps_per_problem", c.steps_per_problem},
              {"prob_second_session", c.prob_second_session},
              {"multi_kc_fraction", c.multi_kc_fraction},
              {"hint_fraction", c.hint_fraction},
              {"rt_grand_mean", c.rt_grand_mean},
              {"rt_var_student", c.rt_var_student},
              {"rt_var_skill", c.rt_var_skill},
              {"rt_var_resid", c.rt_var_resid},
              {"iafm_beta0", c.iafm_beta0},
              {"iafm_beta_opp", c.iafm_beta_opp},
              {"cov_student", cov_json(c.cov_student)},
              {"cov_skill", cov_json(c.cov_skill)},
              {"emit_session_ids", c.emit_session_ids},
              {"seed", c.seed}};
    if (c.moderation) {
        const auto& m = *c.moderation;
        j["moderation"] = {m.b0, m.b_rt, m.b_prof, m.b_interaction};
        std::vector<bool> slices(c.moderation_slices.begin(), c.moderation_slices.end());
        j["moderation_slices"] = slices;
    } else {
        j["moderation"] = nullptr;
    }
    return j;
}

json config_json(const PipelineConfig& c) {
    return {{"input", c.input},
            {"steps", c.steps},
            {"schema", schema_json(c.schema)},
            {"session_gap_minutes", c.session_gap_minutes},
            {"multi_kc", c.multi_kc == MultiKcMode::Replicate ? "replicate" : "first"},
            {"winsorize_quantile", c.winsorize_quantile ? json(*c.winsorize_quantile) : json(nullptr)},
            {"slices", c.slices},
            {"lmm", {{"criterion", criterion_name(c.lmm.criterion)},
                     {"tolerance", c.lmm.tolerance},
                     {"max_iterations", c.lmm.max_iterations}}},
            {"iafm", {{"center_opportunity", c.iafm.center_opportunity},
                      {"pin_covariance_zero", c.iafm.pin_covariance_zero},
                      {"inner_tolerance", c.iafm.inner_tolerance},
                      {"outer_tolerance", c.iafm.outer_tolerance},
                      {"max_outer_iterations", c.iafm.max_outer_iterations}}},
            {"min_obs_per_slice", c.min_obs_per_slice},
            {"include_unconverged", c.include_unconverged},
            {"seed", c.seed},
            {"sim", sim_json(c.sim)}};
}

json meta(const std::string& hash) { return {{"tool", "rtprop"}, {"version", kVersion}, {"config_hash", hash}}; }

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json matrix2_json(const Eigen::Matrix2d& m) { return {{m(0, 0), m(0, 1)}, {m(1, 0), m(1, 1)}}; }

std::string slice_suffix(int s) { return "_Q" + std::to_string(s); }

// Files written by one command; removed again unless committed.
class Outputs {
public:
    explicit Outputs(fs::path dir) : dir_(std::move(dir)) {
        created_ = !fs::exists(dir_);
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) config_error("cannot create run directory " + dir_.string() + ": " + ec.message());
    }
    Outputs(const Outputs&) = delete;
    Outputs& operator=(const Outputs&) = delete;
    ~Outputs() {
        if (committed_) return;
        std::error_code ec;
        for (const auto& f : files_) fs::remove(f, ec);
        if (created_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
    }

    const fs::path& dir() const { return dir_; }

    void write(const std::string& name, const std::string& content) {
        const fs::path target = dir_ / name;
        const fs::path tmp = dir_ / (name + ".tmp");
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) config_error("cannot write " + tmp.string());
            out << content;
            out.flush();
            if (!out) {
                std::error_code ec;
                fs::remove(tmp, ec);
                config_error("write failed: " + tmp.string());
            }
        }
        std::error_code ec;
        fs::rename(tmp, target, ec);
        if (ec) {
            fs::remove(tmp, ec);
            config_error("cannot move " + tmp.string() + " into place");
        }
        if (std::find(files_.begin(), files_.end(), target) == files_.end()) files_.push_back(target);
    }

    void commit(CommandResult& result) {
        committed_ = true;
        result.run_dir = dir_;
        result.files.insert(result.files.end(), files_.begin(), files_.end());
    }

private:
    fs::path dir_;
    std::vector<fs::path> files_;
    bool created_ = false;
    bool committed_ = false;
};

std::vector<std::string> preamble(const std::string& hash) {
    return {std::string("rtprop ") + kVersion + " config " + hash};
}

std::string csv_header_comment(const std::string& hash) { return "# " + preamble(hash)[0] + "\n"; }

std::string footer(const std::string& hash) {
    return std::string("Generated by rtprop ") + kVersion + ", config " + hash + ".";
}

std::vector<StepRecord> load_steps(const PipelineConfig& config, const fs::path& run_dir) {
    const fs::path path = config.steps.empty() ? run_dir / "steps.csv" : fs::path(config.steps);
    if (!fs::exists(path)) config_error("step table not found: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) config_error("cannot open step table " + path.string());
    return read_step_table(in);
}

std::string blup_csv(const std::vector<BlupRow>& rows, const std::string& id_col, const std::string& hash) {
    std::ostringstream out;
    out << csv_header_comment(hash) << id_col << ",effect,n_obs\n";
    for (const auto& r : rows) out << quote_field(r.id, ',') << ',' << format_double(r.effect) << ',' << r.n_obs << '\n';
    return out.str();
}

std::string student_params_csv(const std::vector<StudentIafmRow>& rows, const std::string& hash) {
    std::ostringstream out;
    out << csv_header_comment(hash) << "student_id,prior_proficiency,learning_rate,n_obs\n";
    for (const auto& r : rows)
        out << quote_field(r.student_id, ',') << ',' << format_double(r.prior_proficiency) << ','
            << format_double(r.learning_rate) << ',' << r.n_obs << '\n';
    return out.str();
}

std::string skill_params_csv(const IafmFit& fit, const std::string& hash) {
    std::ostringstream out;
    out << csv_header_comment(hash) << "kc_id,intercept,slope,n_obs\n";
    for (const auto& [id, e] : fit.blup_skill) {
        auto it = fit.n_obs_skill.find(id);
        out << quote_field(id, ',') << ',' << format_double(e[0]) << ',' << format_double(e[1]) << ','
            << (it == fit.n_obs_skill.end() ? 0 : it->second) << '\n';
    }
    return out.str();
}

void write_rt_fit(Outputs& out, const LmmFit& fit, const std::string& suffix, const std::string& hash,
                  CommandResult& result) {
    out.write("rt_fit" + suffix + ".json", lmm_fit_json(fit, hash));
    out.write("rt_student_blups" + suffix + ".csv", blup_csv(extract_blups(fit, "student", true), "student_id", hash));
    out.write("rt_skill_blups" + suffix + ".csv", blup_csv(extract_blups(fit, "skill", true), "kc_id", hash));
    if (!fit.converged) result.warnings.push_back("response-time fit" + suffix + " did not converge");
}

void write_iafm_fit(Outputs& out, const IafmFit& fit, const std::string& suffix, const std::string& hash,
                    CommandResult& result) {
    out.write("iafm_fit" + suffix + ".json", iafm_fit_json(fit, hash));
    out.write("iafm_student_params" + suffix + ".csv", student_params_csv(extract_student_params(fit, true), hash));
    out.write("iafm_skill_params" + suffix + ".csv", skill_params_csv(fit, hash));
    if (!fit.converged) result.warnings.push_back("iAFM fit" + suffix + " did not converge");
}

json coefficient_json(const Coefficient& c) {
    return {{"term", c.name}, {"estimate", c.estimate}, {"se", c.se},         {"t", c.t},
            {"p", c.p},       {"ci_low", c.ci_low},     {"ci_high", c.ci_high}};
}

json moderation_json(const ModerationFit& m) {
    json coefs = json::array(), refit = json::array(), infl = json::array();
    for (const auto& c : m.coefficients) coefs.push_back(coefficient_json(c));
    if (m.refit_available)
        for (const auto& c : m.refit_coefficients) refit.push_back(coefficient_json(c));
    for (const auto& r : m.influence.rows) {
        auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
        infl.push_back({{"student_id", r.id},
                        {"leverage", r.leverage},
                        {"studentized_residual", num(r.studentized_residual)},
                        {"cooks_d", num(r.cooks_d)},
                        {"flagged", r.flagged}});
    }
    return {{"n", m.n},
            {"r2", m.r2},
            {"coefficients", coefs},
            {"flagged", m.influence.flagged},
            {"flag_summary", flag_summary(m.influence.flagged, m.n)},
            {"cooks_threshold", m.influence.cooks_threshold},
            {"leverage_threshold", m.influence.leverage_threshold},
            {"refit_available", m.refit_available},
            {"refit_n", m.refit_n},
            {"refit_r2", m.refit_available ? json(m.refit_r2) : json(nullptr)},
            {"refit_coefficients", refit},
            {"influence", infl}};
}

json slices_json(const SliceAnalysis& a) {
    json arr = json::array();
    for (const auto& r : a.slices) {
        json effects = json::array();
        for (const auto& e : r.effects)
            effects.push_back({{"effect", e.effect},
                               {"estimate", e.estimate},
                               {"ci_low", e.ci_low},
                               {"ci_high", e.ci_high},
                               {"p", e.p},
                               {"p_adjusted", e.p_adjusted},
                               {"sig", significance_marker(e.p_adjusted)}});
        arr.push_back({{"slice", "Q" + std::to_string(r.slice)},
                       {"available", r.available},
                       {"status", r.status},
                       {"rows", r.rows},
                       {"students", r.students},
                       {"rt_converged", r.rt_converged},
                       {"iafm_converged", r.iafm_converged},
                       {"effects", effects},
                       {"moderation", r.moderation ? moderation_json(*r.moderation) : json(nullptr)}});
    }
    return arr;
}

IngestOptions ingest_options(const PipelineConfig& c) {
    IngestOptions o;
    o.schema = c.schema;
    o.sessions.gap_threshold =
        std::chrono::duration_cast<Millis>(std::chrono::duration<double, std::milli>(c.session_gap_minutes * 60000.0));
    o.multi_kc = c.multi_kc;
    o.rt.winsorize_quantile = c.winsorize_quantile;
    o.slices = c.slices;
    return o;
}

SimConfig sim_config(const PipelineConfig& c) {
    SimConfig s = c.sim;
    s.seed = c.seed;
    return s;
}

void simulate_into(Outputs& out, const PipelineConfig& config, const std::string& hash) {
    const Population pop = generate_population(sim_config(config));
    std::ostringstream tx;
    EmitOptions eo;
    eo.include_session = config.sim.emit_session_ids;
    eo.preamble = preamble(hash);
    emit_transactions(tx, pop.attempts, eo);
    out.write("transactions.tsv", tx.str());
    out.write("ground_truth.json", ground_truth_json(pop.truth, hash));
}

void ingest_into(Outputs& out, const PipelineConfig& config, const std::string& hash) {
    const fs::path input = config.input.empty() ? out.dir() / "transactions.tsv" : fs::path(config.input);
    if (!fs::exists(input)) config_error("input file not found: " + input.string());
    std::ifstream in(input, std::ios::binary);
    if (!in) config_error("cannot open " + input.string());
    const IngestResult r = ingest(in, ingest_options(config));
    std::ostringstream steps;
    write_step_table(steps, r.steps, preamble(hash));
    out.write("steps.csv", steps.str());
    out.write("quality.json", quality_json(r.quality, hash));
}

void fit_into(Outputs& out, const PipelineConfig& config, FitModel model, FitScope scope, const std::string& hash,
              CommandResult& result) {
    const std::vector<StepRecord> steps = load_steps(config, out.dir());
    if (scope == FitScope::Global) {
        if (model == FitModel::Rt)
            write_rt_fit(out, fit_lmm(steps, config.lmm), "", hash, result);
        else
            write_iafm_fit(out, fit_iafm(steps, config.iafm), "", hash, result);
        return;
    }
    for (int s = 1; s <= config.slices; ++s) {
        const std::vector<StepRecord> rows = slice_rows(steps, s, config.min_obs_per_slice);
        if (model == FitModel::Rt)
            write_rt_fit(out, fit_lmm(rows, config.lmm), slice_suffix(s), hash, result);
        else
            write_iafm_fit(out, fit_iafm(rows, config.iafm), slice_suffix(s), hash, result);
    }
}

void analyze_into(Outputs& out, const PipelineConfig& config, const std::string& hash, CommandResult& result) {
    const std::vector<StepRecord> steps = load_steps(config, out.dir());

    // Full-period parameters: reuse fit outputs in the run directory when present.
    std::optional<ModerationFit> global;
    std::string global_status;
    try {
        const fs::path rt_path = out.dir() / "rt_student_blups.csv";
        const fs::path iafm_path = out.dir() / "iafm_student_params.csv";
        std::vector<BlupRow> rt;
        std::vector<StudentIafmRow> iafm;
        if (fs::exists(rt_path) && fs::exists(iafm_path)) {
            if (!config.include_unconverged)
                for (const char* name : {"rt_fit.json", "iafm_fit.json"}) {
                    std::ifstream in(out.dir() / name, std::ios::binary);
                    const json j = in ? json::parse(in, nullptr, false) : json();
                    if (!j.is_object() || !j.value("converged", false))
                        data_error("full-period fit did not converge");
                }
            rt = read_rt_student_table(rt_path);
            iafm = read_iafm_student_table(iafm_path);
        } else {
            const LmmFit lf = fit_lmm(steps, config.lmm);
            const IafmFit jf = fit_iafm(steps, config.iafm);
            if (!config.include_unconverged && !(lf.converged && jf.converged))
                data_error("full-period fit did not converge");
            rt = extract_blups(lf, "student", true);
            iafm = extract_student_params(jf, true);
        }
        global = moderation_fit(join_params(rt, iafm));
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Config) throw;
        global_status = e.what();
        result.warnings.push_back(std::string("full-period moderation unavailable: ") + e.what());
    }

    SliceOptions so;
    so.slices = config.slices;
    so.min_obs_per_student = config.min_obs_per_slice;
    so.lmm = config.lmm;
    so.iafm = config.iafm;
    so.include_unconverged = config.include_unconverged;
    so.threads = config.threads;
    const SliceAnalysis sa = run_slice_analysis(steps, so);
    for (const auto& r : sa.slices)
        if (!r.available) result.warnings.push_back("slice Q" + std::to_string(r.slice) + " unavailable: " + r.status);

    ReportInputs ri;
    ri.steps = &steps;
    ri.global_moderation = global ? &*global : nullptr;
    ri.global_status = global_status;
    ri.slices = &sa;
    ri.slice_count = config.slices;
    ri.footer = footer(hash);
    out.write("report.md", render_report(ri));
    out.write("rt_quartiles.csv", csv_header_comment(hash) + rt_quartile_csv(steps, config.slices));
    out.write("stability_rt.csv", csv_header_comment(hash) + stability_csv(sa.stability_rt));
    out.write("stability_learning.csv", csv_header_comment(hash) + stability_csv(sa.stability_learning));
    out.write("slices.csv", csv_header_comment(hash) + slice_csv(sa));
    out.write("slices.json", dump({{"meta", meta(hash)}, {"slices", slices_json(sa)}}));
    out.write("moderation.json",
              dump({{"meta", meta(hash)},
                    {"available", global.has_value()},
                    {"status", global ? "ok" : global_status},
                    {"model", "learning_rate ~ rt_propensity * prior_proficiency (standardized)"},
                    {"fit", global ? moderation_json(*global) : json(nullptr)}}));
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& path, std::vector<std::string>& header) {
    std::ifstream in(path, std::ios::binary);
    if (!in) config_error("cannot open " + path.string());
    std::string line;
    std::vector<std::vector<std::string>> rows;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (!have_header) {
            header = split_delimited(line, ',');
            have_header = true;
            continue;
        }
        rows.push_back(split_delimited(line, ','));
    }
    if (!have_header) data_error("empty table: " + path.string());
    return rows;
}

int column(const std::vector<std::string>& header, const std::string& name, const fs::path& path) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) data_error(path.string() + " lacks column '" + name + "'");
    return static_cast<int>(it - header.begin());
}

double to_double(const std::string& s, const fs::path& path) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        data_error(path.string() + ": malformed number '" + s + "'");
    }
}

} // namespace

std::string canonical_config(const PipelineConfig& config) { return config_json(config).dump(); }

std::string config_hash(const PipelineConfig& config) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : canonical_config(config)) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

fs::path resolve_run_dir(const PipelineConfig& config) {
    if (!config.run_name.empty()) return fs::path(config.output_dir) / config.run_name;
    const auto now = std::chrono::time_point_cast<std::chrono::seconds>(std::chrono::system_clock::now());
    const auto day = std::chrono::floor<std::chrono::days>(now);
    const std::chrono::year_month_day ymd{day};
    const std::chrono::hh_mm_ss hms{now - day};
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d%02u%02uT%02lld%02lld%02lldZ", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<long long>(hms.hours().count()), static_cast<long long>(hms.minutes().count()),
                  static_cast<long long>(hms.seconds().count()));
    return fs::path(config.output_dir) / (std::string(buf) + "_" + config_hash(config));
}

std::string lmm_fit_json(const LmmFit& fit, const std::string& hash) {
    return dump({{"meta", meta(hash)},
                 {"model", "rt_log ~ 1 + (1 | student) + (1 | skill)"},
                 {"criterion", criterion_name(fit.criterion)},
                 {"mu_hat", fit.mu_hat},
                 {"var_student", fit.var_student},
                 {"var_skill", fit.var_skill},
                 {"var_resid", fit.var_resid},
                 {"deviance", fit.deviance},
                 {"converged", fit.converged},
                 {"boundary_flag", fit.boundary_flag},
                 {"evaluations", fit.evaluations},
                 {"trace_length", fit.deviance_trace.size()},
                 {"n_rows", fit.n_rows},
                 {"dropped_rows", fit.dropped_rows},
                 {"dropped_students", fit.dropped_students},
                 {"dropped_skills", fit.dropped_skills},
                 {"n_students", fit.blup_student.size()},
                 {"n_skills", fit.blup_skill.size()}});
}

std::string iafm_fit_json(const IafmFit& fit, const std::string& hash) {
    return dump({{"meta", meta(hash)},
                 {"model", "correct ~ opp + (1 + opp | student) + (1 + opp | skill)"},
                 {"estimation", "Laplace"},
                 {"beta0_hat", fit.beta0_hat},
                 {"beta_opp_hat", fit.beta_opp_hat},
                 {"cov_student", matrix2_json(fit.cov_student)},
                 {"cov_skill", matrix2_json(fit.cov_skill)},
                 {"chol_student", {fit.chol_student(0, 0), fit.chol_student(1, 0), fit.chol_student(1, 1)}},
                 {"chol_skill", {fit.chol_skill(0, 0), fit.chol_skill(1, 0), fit.chol_skill(1, 1)}},
                 {"laplace_loglik", fit.laplace_loglik},
                 {"converged", fit.converged},
                 {"centered", fit.centered},
                 {"opportunity_center", fit.opportunity_center},
                 {"pinned_zero", fit.pinned_zero},
                 {"evaluations", fit.evaluations},
                 {"trace_length", fit.loglik_trace.size()},
                 {"max_inner_gradient", fit.max_inner_gradient},
                 {"n_rows", fit.n_rows},
                 {"n_students", fit.blup_student.size()},
                 {"n_skills", fit.blup_skill.size()},
                 {"threads", fit.threads}});
}

std::string ground_truth_json(const GroundTruth& truth, const std::string& hash) {
    json students = json::object(), skills = json::object(), sessions = json::array();
    for (const auto& s : truth.students)
        students[s.id] = {{"rt_intercept", s.rt_intercept},
                          {"iafm_intercept", s.iafm_intercept},
                          {"iafm_slope", s.iafm_slope},
                          {"iafm_slope_by_slice", s.iafm_slope_by_slice}};
    for (const auto& k : truth.skills)
        skills[k.id] = {{"rt_intercept", k.rt_intercept},
                        {"iafm_intercept", k.iafm_intercept},
                        {"iafm_slope", k.iafm_slope}};
    for (const auto& s : truth.sessions)
        sessions.push_back({{"student_id", s.student_id},
                            {"session_id", s.session_id},
                            {"start", format_instant(s.start)},
                            {"end", format_instant(s.end)},
                            {"degenerate", s.degenerate}});
    return dump({{"meta", meta(hash)}, {"students", students}, {"skills", skills}, {"sessions", sessions}});
}

std::string quality_json(const QualityReport& q, const std::string& hash) {
    json rejected = json::array();
    for (const auto& r : q.rejected_rows) rejected.push_back({{"row", r.row}, {"reason", r.reason}});
    json by_reason = json::object();
    for (const auto& [reason, n] : q.rejects_by_reason) by_reason[reason] = n;
    return dump({{"meta", meta(hash)},
                 {"input_rows", q.input_rows},
                 {"accepted_rows", q.accepted_rows},
                 {"rejected_rows", q.input_rows - q.accepted_rows},
                 {"rejects_by_reason", by_reason},
                 {"rejects", rejected},
                 {"sessions", q.sessions},
                 {"degenerate_sessions", q.degenerate_sessions},
                 {"steps", q.steps},
                 {"step_records", q.step_records},
                 {"multi_kc_steps", q.multi_kc_steps},
                 {"step_rejects", q.step_rejects},
                 {"session_first_steps", q.rt.session_first_steps},
                 {"nonpositive_rt", q.rt.nonpositive_rt},
                 {"winsorized", q.rt.winsorized},
                 {"degenerate_span_steps", q.slicing.degenerate_span_steps},
                 {"outside_span", q.slicing.outside_span}});
}

std::vector<BlupRow> read_rt_student_table(const fs::path& path) {
    std::vector<std::string> header;
    const auto rows = read_csv_rows(path, header);
    const int ci = column(header, "student_id", path), ce = column(header, "effect", path),
              cn = column(header, "n_obs", path);
    std::vector<BlupRow> out;
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) < static_cast<int>(header.size())) data_error(path.string() + ": short row");
        out.push_back({r[ci], to_double(r[ce], path), static_cast<int>(to_double(r[cn], path))});
    }
    return out;
}

std::vector<StudentIafmRow> read_iafm_student_table(const fs::path& path) {
    std::vector<std::string> header;
    const auto rows = read_csv_rows(path, header);
    const int ci = column(header, "student_id", path), cp = column(header, "prior_proficiency", path),
              cl = column(header, "learning_rate", path), cn = column(header, "n_obs", path);
    std::vector<StudentIafmRow> out;
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) < static_cast<int>(header.size())) data_error(path.string() + ": short row");
        out.push_back({r[ci], to_double(r[cp], path), to_double(r[cl], path), static_cast<int>(to_double(r[cn], path))});
    }
    return out;
}

CommandResult cmd_simulate(const PipelineConfig& config) {
    const std::string hash = config_hash(config);
    CommandResult result;
    Outputs out(resolve_run_dir(config));
    simulate_into(out, config, hash);
    out.commit(result);
    return result;
}

CommandResult cmd_ingest(const PipelineConfig& config) {
    const std::string hash = config_hash(config);
    CommandResult result;
    Outputs out(resolve_run_dir(config));
    ingest_into(out, config, hash);
    out.commit(result);
    return result;
}

CommandResult cmd_fit(const PipelineConfig& config, FitModel model, FitScope scope) {
    const std::string hash = config_hash(config);
    CommandResult result;
    Outputs out(resolve_run_dir(config));
    fit_into(out, config, model, scope, hash, result);
    out.commit(result);
    return result;
}

CommandResult cmd_analyze(const PipelineConfig& config) {
    const std::string hash = config_hash(config);
    CommandResult result;
    Outputs out(resolve_run_dir(config));
    analyze_into(out, config, hash, result);
    out.commit(result);
    return result;
}

CommandResult cmd_report(const PipelineConfig& config) {
    const std::string hash = config_hash(config);
    CommandResult result;
    Outputs out(resolve_run_dir(config));
    if (config.input.empty()) simulate_into(out, config, hash);
    PipelineConfig c = config;
    c.steps.clear();
    ingest_into(out, c, hash);
    fit_into(out, c, FitModel::Rt, FitScope::Global, hash, result);
    fit_into(out, c, FitModel::Iafm, FitScope::Global, hash, result);
    analyze_into(out, c, hash, result);
    out.commit(result);
    return result;
}

} // namespace rtprop
