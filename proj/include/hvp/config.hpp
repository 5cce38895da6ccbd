#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hvp/denoiser.hpp"
#include "hvp/errors.hpp"
#include "hvp/gmm.hpp"
#include "hvp/objective.hpp"
#include "hvp/policy.hpp"
#include "hvp/schedule.hpp"
#include "hvp/task.hpp"
#include "hvp/training.hpp"

namespace hvp {

inline std::string fmt_f64(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    if (!s.empty() && s.back() == sep) out.push_back("");
    return out;
}

}  // namespace detail

// Flat dotted-key/value config text: one `key = value` per line, `#`
// comments, unknown keys rejected against the schema below.
class KvConfig {
  public:
    static KvConfig parse(const std::string& text) {
        KvConfig c;
        std::stringstream ss(text);
        std::string line;
        long lineno = 0;
        while (std::getline(ss, line)) {
            ++lineno;
            std::string s = line;
            std::size_t hash = s.find('#');
            if (hash != std::string::npos) s = s.substr(0, hash);
            s = detail::trim(s);
            if (s.empty()) continue;
            std::size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw config_error("config line " + std::to_string(lineno) + ": missing '='");
            std::string k = detail::trim(s.substr(0, eq));
            std::string v = detail::trim(s.substr(eq + 1));
            if (k.empty())
                throw config_error("config line " + std::to_string(lineno) + ": empty key");
            if (c.kv_.count(k))
                throw config_error("config: duplicate key '" + k + "'");
            c.kv_[k] = v;
        }
        return c;
    }

    static KvConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw config_error("config: cannot open '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& k) const { return kv_.count(k) != 0; }

    std::string get_string(const std::string& k, const std::string& dflt) const {
        mark(k);
        auto it = kv_.find(k);
        return it == kv_.end() ? dflt : it->second;
    }
    double get_double(const std::string& k, double dflt) const {
        mark(k);
        auto it = kv_.find(k);
        if (it == kv_.end()) return dflt;
        std::size_t pos = 0;
        double v;
        try {
            v = std::stod(it->second, &pos);
        } catch (const std::exception&) {
            throw config_error("config: key '" + k + "' is not a number: '" + it->second + "'");
        }
        if (pos != it->second.size())
            throw config_error("config: key '" + k + "' has trailing junk: '" + it->second + "'");
        return v;
    }
    long get_long(const std::string& k, long dflt) const {
        double v = get_double(k, static_cast<double>(dflt));
        long l = static_cast<long>(v);
        if (static_cast<double>(l) != v)
            throw config_error("config: key '" + k + "' must be an integer");
        return l;
    }
    std::uint64_t get_u64(const std::string& k, std::uint64_t dflt) const {
        mark(k);
        auto it = kv_.find(k);
        if (it == kv_.end()) return dflt;
        try {
            return std::stoull(it->second);
        } catch (const std::exception&) {
            throw config_error("config: key '" + k + "' is not an unsigned integer");
        }
    }
    bool get_bool(const std::string& k, bool dflt) const {
        mark(k);
        auto it = kv_.find(k);
        if (it == kv_.end()) return dflt;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw config_error("config: key '" + k + "' must be true/false");
    }
    std::vector<double> get_doubles(const std::string& k, std::vector<double> dflt) const {
        mark(k);
        auto it = kv_.find(k);
        if (it == kv_.end()) return dflt;
        std::vector<double> out;
        for (const std::string& p : detail::split(it->second, ',')) {
            if (p.empty()) throw config_error("config: key '" + k + "' has an empty list entry");
            out.push_back(std::stod(p));
        }
        return out;
    }
    std::vector<std::size_t> get_sizes(const std::string& k, std::vector<std::size_t> dflt) const {
        std::vector<double> d;
        for (auto s : dflt) d.push_back(static_cast<double>(s));
        std::vector<std::size_t> out;
        for (double x : get_doubles(k, d)) {
            if (x < 0 || x != std::floor(x))
                throw config_error("config: key '" + k + "' must list nonnegative integers");
            out.push_back(static_cast<std::size_t>(x));
        }
        return out;
    }
    // semicolon-separated list of comma-separated vectors
    std::vector<Tensor> get_vectors(const std::string& k, std::vector<Tensor> dflt) const {
        mark(k);
        auto it = kv_.find(k);
        if (it == kv_.end()) return dflt;
        std::vector<Tensor> out;
        for (const std::string& grp : detail::split(it->second, ';')) {
            std::vector<double> vals;
            for (const std::string& p : detail::split(grp, ','))
                if (!p.empty()) vals.push_back(std::stod(p));
            if (vals.empty()) throw config_error("config: key '" + k + "' has an empty vector");
            out.push_back(Tensor({vals.size()}, vals));
        }
        return out;
    }

    // Every key actually present must have been consumed by a getter.
    void reject_unknown() const {
        for (const auto& [k, v] : kv_)
            if (!seen_.count(k)) throw config_error("config: unknown key '" + k + "'");
    }

    const std::map<std::string, std::string>& raw() const { return kv_; }

  private:
    void mark(const std::string& k) const { seen_.insert(k); }

    std::map<std::string, std::string> kv_;
    mutable std::set<std::string> seen_;
};

// Fully materialized experiment description. Parsing applies defaults and
// rejects unknown keys; serialize() emits every effective key so that
// parse -> serialize -> parse is the identity on effective configs.
struct ExperimentConfig {
    std::uint64_t seed = 0;

    // prior
    std::string prior_kind = "standard";  // standard | gmm
    std::size_t prior_dim = 2;
    std::vector<double> prior_weights{1.0};
    std::vector<Tensor> prior_means;
    std::vector<double> prior_vars{1.0};

    // task
    std::string task_kind = "identity";  // identity | sr | inpaint | hdr | dense
    double task_sigma_y = 0.01;
    std::size_t task_factor = 2;
    bool task_grid2d = false;
    double task_drop_prob = 0.9;
    std::uint64_t task_mask_seed = 17;
    std::vector<double> task_mask;  // explicit mask overrides drop_prob
    double task_alpha = 2.0;
    double task_beta = 0.0;
    std::vector<Tensor> task_rows;  // dense operator rows

    // schedule
    int sched_T = 8;
    double sched_eta = 0.5;
    double sched_beta_min = 1e-4;
    double sched_beta_max = 0.02;

    // denoiser
    std::string denoiser_kind = "oracle";  // oracle | mlp
    std::vector<std::size_t> denoiser_hidden{32, 32};
    long denoiser_train_steps = 2000;
    double denoiser_lr = 1e-3;

    // policies
    std::vector<std::size_t> noise_hidden{32, 32};
    std::vector<std::size_t> policy_hidden{32, 32};
    double policy_kappa = 0.05;
    bool policy_stochastic = true;
    double gamma = 1.0;

    // loss
    LossWeights loss;

    // train / refine / eval
    TrainConfig train;
    RefineConfig refine;
    std::size_t eval_n_obs = 100;
    std::string eval_mode = "ahvp";
    bool eval_want_elbo = false;

    static ExperimentConfig from_kv(const KvConfig& kv) {
        ExperimentConfig c;
        c.seed = kv.get_u64("seed", c.seed);

        c.prior_kind = kv.get_string("prior.kind", c.prior_kind);
        c.prior_dim = static_cast<std::size_t>(kv.get_long("prior.dim", static_cast<long>(c.prior_dim)));
        c.prior_weights = kv.get_doubles("prior.weights", c.prior_weights);
        c.prior_means = kv.get_vectors("prior.means", c.prior_means);
        c.prior_vars = kv.get_doubles("prior.variances", c.prior_vars);

        c.task_kind = kv.get_string("task.kind", c.task_kind);
        c.task_sigma_y = kv.get_double("task.sigma_y", c.task_sigma_y);
        c.task_factor = static_cast<std::size_t>(kv.get_long("task.factor", static_cast<long>(c.task_factor)));
        c.task_grid2d = kv.get_bool("task.grid2d", c.task_grid2d);
        c.task_drop_prob = kv.get_double("task.drop_prob", c.task_drop_prob);
        c.task_mask_seed = kv.get_u64("task.mask_seed", c.task_mask_seed);
        c.task_mask = kv.get_doubles("task.mask", c.task_mask);
        c.task_alpha = kv.get_double("task.alpha", c.task_alpha);
        c.task_beta = kv.get_double("task.beta", c.task_beta);
        c.task_rows = kv.get_vectors("task.rows", c.task_rows);

        c.sched_T = static_cast<int>(kv.get_long("schedule.T", c.sched_T));
        c.sched_eta = kv.get_double("schedule.eta", c.sched_eta);
        c.sched_beta_min = kv.get_double("schedule.beta_min", c.sched_beta_min);
        c.sched_beta_max = kv.get_double("schedule.beta_max", c.sched_beta_max);

        c.denoiser_kind = kv.get_string("denoiser.kind", c.denoiser_kind);
        c.denoiser_hidden = kv.get_sizes("denoiser.hidden", c.denoiser_hidden);
        c.denoiser_train_steps = kv.get_long("denoiser.train_steps", c.denoiser_train_steps);
        c.denoiser_lr = kv.get_double("denoiser.lr", c.denoiser_lr);

        c.noise_hidden = kv.get_sizes("noise_policy.hidden", c.noise_hidden);
        c.policy_hidden = kv.get_sizes("policy.hidden", c.policy_hidden);
        c.policy_kappa = kv.get_double("policy.kappa", c.policy_kappa);
        c.policy_stochastic = kv.get_bool("policy.stochastic", c.policy_stochastic);
        c.gamma = kv.get_double("policy.gamma", c.gamma);

        c.loss.w_T = kv.get_double("loss.w_T", c.loss.w_T);
        c.loss.w_control = kv.get_double("loss.w_control", c.loss.w_control);
        c.loss.w_score = kv.get_double("loss.w_score", c.loss.w_score);
        c.loss.lambda2 = kv.get_double("loss.lambda2", c.loss.lambda2);
        c.loss.lambda3 = kv.get_double("loss.lambda3", c.loss.lambda3);

        c.train.stage = static_cast<int>(kv.get_long("train.stage", c.train.stage));
        c.train.epochs = kv.get_long("train.epochs", c.train.epochs);
        c.train.batch_size = static_cast<std::size_t>(
            kv.get_long("train.batch_size", static_cast<long>(c.train.batch_size)));
        c.train.lr = kv.get_double("train.lr", c.train.lr);
        c.train.dataset_size = static_cast<std::size_t>(
            kv.get_long("train.dataset_size", static_cast<long>(c.train.dataset_size)));
        c.train.seed = c.seed;

        c.refine.n_grad_steps = kv.get_long("refine.n_grad_steps", c.refine.n_grad_steps);
        c.refine.inner_lr = kv.get_double("refine.inner_lr", c.refine.inner_lr);
        c.refine.lambda2 = kv.get_double("refine.lambda2", c.loss.lambda2);
        c.refine.lambda3 = kv.get_double("refine.lambda3", c.loss.lambda3);
        c.refine.backtracking = kv.get_bool("refine.backtracking", c.refine.backtracking);

        c.eval_n_obs = static_cast<std::size_t>(
            kv.get_long("eval.n_obs", static_cast<long>(c.eval_n_obs)));
        c.eval_mode = kv.get_string("eval.mode", c.eval_mode);
        c.eval_want_elbo = kv.get_bool("eval.want_elbo", c.eval_want_elbo);

        kv.reject_unknown();
        c.validate();
        return c;
    }

    static ExperimentConfig from_file(const std::string& path) {
        return from_kv(KvConfig::from_file(path));
    }

    void validate() const {
        if (prior_kind != "standard" && prior_kind != "gmm")
            throw config_error("config: prior.kind must be standard|gmm");
        if (task_kind != "identity" && task_kind != "sr" && task_kind != "inpaint" &&
            task_kind != "hdr" && task_kind != "dense")
            throw config_error("config: task.kind must be identity|sr|inpaint|hdr|dense");
        if (denoiser_kind != "oracle" && denoiser_kind != "mlp")
            throw config_error("config: denoiser.kind must be oracle|mlp");
        if (prior_dim == 0) throw config_error("config: prior.dim must be positive");
        if (sched_T < 1) throw config_error("config: schedule.T must be >= 1");
        eval_mode_from_string(eval_mode);
        try {
            train.check();
            refine.check();
        } catch (const param_error& e) {
            throw config_error(e.what());
        }
    }

    std::string serialize() const {
        std::map<std::string, std::string> kv;
        auto put_list = [](const std::vector<double>& xs) {
            std::string s;
            for (std::size_t i = 0; i < xs.size(); ++i)
                s += (i ? "," : "") + fmt_f64(xs[i]);
            return s;
        };
        auto put_sizes = [](const std::vector<std::size_t>& xs) {
            std::string s;
            for (std::size_t i = 0; i < xs.size(); ++i)
                s += (i ? "," : "") + std::to_string(xs[i]);
            return s;
        };
        auto put_vecs = [&](const std::vector<Tensor>& ts) {
            std::string s;
            for (std::size_t i = 0; i < ts.size(); ++i)
                s += (i ? ";" : "") + put_list(ts[i].v);
            return s;
        };
        kv["seed"] = std::to_string(seed);
        kv["prior.kind"] = prior_kind;
        kv["prior.dim"] = std::to_string(prior_dim);
        kv["prior.weights"] = put_list(prior_weights);
        if (!prior_means.empty()) kv["prior.means"] = put_vecs(prior_means);
        kv["prior.variances"] = put_list(prior_vars);
        kv["task.kind"] = task_kind;
        kv["task.sigma_y"] = fmt_f64(task_sigma_y);
        kv["task.factor"] = std::to_string(task_factor);
        kv["task.grid2d"] = task_grid2d ? "true" : "false";
        kv["task.drop_prob"] = fmt_f64(task_drop_prob);
        kv["task.mask_seed"] = std::to_string(task_mask_seed);
        if (!task_mask.empty()) kv["task.mask"] = put_list(task_mask);
        kv["task.alpha"] = fmt_f64(task_alpha);
        kv["task.beta"] = fmt_f64(task_beta);
        if (!task_rows.empty()) kv["task.rows"] = put_vecs(task_rows);
        kv["schedule.T"] = std::to_string(sched_T);
        kv["schedule.eta"] = fmt_f64(sched_eta);
        kv["schedule.beta_min"] = fmt_f64(sched_beta_min);
        kv["schedule.beta_max"] = fmt_f64(sched_beta_max);
        kv["denoiser.kind"] = denoiser_kind;
        kv["denoiser.hidden"] = put_sizes(denoiser_hidden);
        kv["denoiser.train_steps"] = std::to_string(denoiser_train_steps);
        kv["denoiser.lr"] = fmt_f64(denoiser_lr);
        kv["noise_policy.hidden"] = put_sizes(noise_hidden);
        kv["policy.hidden"] = put_sizes(policy_hidden);
        kv["policy.kappa"] = fmt_f64(policy_kappa);
        kv["policy.stochastic"] = policy_stochastic ? "true" : "false";
        kv["policy.gamma"] = fmt_f64(gamma);
        kv["loss.w_T"] = fmt_f64(loss.w_T);
        kv["loss.w_control"] = fmt_f64(loss.w_control);
        kv["loss.w_score"] = fmt_f64(loss.w_score);
        kv["loss.lambda2"] = fmt_f64(loss.lambda2);
        kv["loss.lambda3"] = fmt_f64(loss.lambda3);
        kv["train.stage"] = std::to_string(train.stage);
        kv["train.epochs"] = std::to_string(train.epochs);
        kv["train.batch_size"] = std::to_string(train.batch_size);
        kv["train.lr"] = fmt_f64(train.lr);
        kv["train.dataset_size"] = std::to_string(train.dataset_size);
        kv["refine.n_grad_steps"] = std::to_string(refine.n_grad_steps);
        kv["refine.inner_lr"] = fmt_f64(refine.inner_lr);
        kv["refine.lambda2"] = fmt_f64(refine.lambda2);
        kv["refine.lambda3"] = fmt_f64(refine.lambda3);
        kv["refine.backtracking"] = refine.backtracking ? "true" : "false";
        kv["eval.n_obs"] = std::to_string(eval_n_obs);
        kv["eval.mode"] = eval_mode;
        kv["eval.want_elbo"] = eval_want_elbo ? "true" : "false";
        std::string out;
        for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
        return out;
    }

    GmmPrior make_prior() const {
        if (prior_kind == "standard") return GmmPrior::standard(prior_dim);
        GmmPrior p;
        p.dim = prior_dim;
        p.w = prior_weights;
        p.m = prior_means;
        p.v = prior_vars;
        p.validate();
        return p;
    }

    ForwardTask make_task() const {
        std::size_t d = prior_dim;
        if (task_kind == "identity") {
            Tensor mask01 = Tensor::full({d}, 1.0);
            return ForwardTask::inpaint(std::move(mask01), task_sigma_y);
        }
        if (task_kind == "sr") return ForwardTask::pool(d, task_factor, task_sigma_y, task_grid2d);
        if (task_kind == "inpaint") {
            if (!task_mask.empty()) {
                if (task_mask.size() != d) throw config_error("config: task.mask length != prior.dim");
                return ForwardTask::inpaint(Tensor({d}, task_mask), task_sigma_y);
            }
            return ForwardTask::random_inpaint(d, task_drop_prob, task_sigma_y, task_mask_seed);
        }
        if (task_kind == "hdr") return ForwardTask::hdr(d, task_alpha, task_beta, task_sigma_y);
        // dense
        if (task_rows.empty()) throw config_error("config: task.rows required for dense task");
        std::size_t m = task_rows.size();
        Tensor A = Tensor::zeros({m, d});
        for (std::size_t i = 0; i < m; ++i) {
            if (task_rows[i].size() != d)
                throw config_error("config: task.rows entries must have prior.dim values");
            for (std::size_t j = 0; j < d; ++j) A.at(i, j) = task_rows[i].v[j];
        }
        return ForwardTask::dense(std::move(A), task_sigma_y);
    }

    NoiseSchedule make_schedule() const {
        return build_schedule(sched_T, sched_beta_min, sched_beta_max, sched_eta);
    }

    PolicyPair make_policies(const ForwardTask& task) const {
        PolicyPair p;
        p.noise = NoisePolicy::make(task.m, task.d, noise_hidden, seed ^ 0xa5a5a5a5ULL);
        p.step = StepPolicy::make(task.m, task.d, policy_hidden, seed ^ 0x5a5a5a5aULL,
                                  policy_kappa, policy_stochastic);
        return p;
    }

    GuidanceConfig make_guidance() const {
        GuidanceConfig g;
        g.gamma = gamma;
        g.T = sched_T;
        g.record_kl = eval_want_elbo;
        return g;
    }
};

}  // namespace hvp
