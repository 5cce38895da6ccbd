#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hvp/config.hpp"
#include "hvp/io.hpp"

namespace fs = std::filesystem;
using namespace hvp;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("hvp_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p);
    f << s;
}

std::string read_text(const fs::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

#ifdef HVP_CLI_PATH
// Runs the CLI binary, captures stdout+stderr into `out`, returns exit code.
int run_cli(const std::string& args, const fs::path& dir, std::string* out = nullptr) {
    fs::path log = dir / "cli_output.txt";
    std::string cmd = std::string(HVP_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    if (out) *out = read_text(log);
    if (rc == -1) return -1;
    return WEXITSTATUS(rc);
}
#endif

}  // namespace

TEST_CASE("kv parsing: comments, whitespace, duplicates, malformed lines") {
    KvConfig c = KvConfig::parse("  a.b = 1.5  # trailing comment\n# full comment\n\nc = hi\n");
    CHECK(c.get_double("a.b", 0.0) == 1.5);
    CHECK(c.get_string("c", "") == "hi");
    CHECK(c.get_long("missing", 7) == 7);
    CHECK_THROWS_AS(KvConfig::parse("a = 1\na = 2\n"), config_error);
    CHECK_THROWS_AS(KvConfig::parse("just some text\n"), config_error);
    CHECK_THROWS_AS(KvConfig::parse(" = 3\n"), config_error);
    KvConfig bad = KvConfig::parse("x = 1.5abc\n");
    CHECK_THROWS_AS(bad.get_double("x", 0.0), config_error);
    KvConfig notint = KvConfig::parse("n = 2.5\n");
    CHECK_THROWS_AS(notint.get_long("n", 0), config_error);
}

TEST_CASE("unknown and unconsumed keys are rejected") {
    CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("no.such.key = 1\n")), config_error);
    CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("task.kind = teleport\n")),
                    config_error);
    CHECK_THROWS_AS(ExperimentConfig::from_kv(KvConfig::parse("eval.mode = sideways\n")),
                    config_error);
}

TEST_CASE("experiment config round-trip is the identity on effective configs") {
    std::string text =
        "seed = 42\n"
        "prior.kind = gmm\n"
        "prior.dim = 2\n"
        "prior.weights = 0.25,0.75\n"
        "prior.means = 1.5,-0.5;-1.5,0.5\n"
        "prior.variances = 0.3,0.4\n"
        "task.kind = sr\n"
        "task.sigma_y = 0.05\n"
        "schedule.T = 4\n"
        "policy.kappa = 0.1\n"
        "loss.w_T = 25\n"
        "train.epochs = 3\n"
        "refine.n_grad_steps = 2\n"
        "eval.mode = shvp\n";
    ExperimentConfig a = ExperimentConfig::from_kv(KvConfig::parse(text));
    std::string ser = a.serialize();
    ExperimentConfig b = ExperimentConfig::from_kv(KvConfig::parse(ser));
    CHECK(b.serialize() == ser);
    CHECK(b.seed == 42);
    CHECK(b.prior_weights[1] == 0.75);
    CHECK(b.prior_means[0].v[0] == 1.5);
    CHECK(b.task_kind == "sr");
    CHECK(b.sched_T == 4);
    CHECK(b.refine.n_grad_steps == 2);
}

TEST_CASE("config factories produce consistent components") {
    ExperimentConfig c = ExperimentConfig::from_kv(KvConfig::parse(
        "prior.kind = gmm\nprior.dim = 4\nprior.weights = 0.5,0.5\n"
        "prior.means = 1,0,0,0;-1,0,0,0\nprior.variances = 0.3,0.3\n"
        "task.kind = sr\ntask.factor = 2\n"));
    GmmPrior prior = c.make_prior();
    CHECK(prior.dim == 4);
    ForwardTask task = c.make_task();
    CHECK(task.d == 4);
    CHECK(task.m == 2);
    NoiseSchedule sch = c.make_schedule();
    CHECK(sch.T == 8);
    PolicyPair pols = c.make_policies(task);
    // zero-initialized last layers: policies start as the identity reduction
    CHECK(pols.noise.net.forward(Tensor::zeros({6})).v[0] == 0.0);
    CHECK(pols.step.kappa == 0.05);
    GuidanceConfig g = c.make_guidance();
    CHECK(g.gamma == 1.0);
    CHECK(g.T == 8);
}

TEST_CASE("checkpoint round-trip restores policies bit-exactly") {
    PolicyPair pols;
    pols.noise = NoisePolicy::make(2, 3, {8, 8}, 5);
    pols.step = StepPolicy::make(2, 3, {16}, 6, 0.07, false);
    NoiseStream rng(9, NoiseStream::kInit);
    for (Tensor* p : pols.noise.net.params())
        for (double& v : p->v) v = rng.normal();
    for (Tensor* p : pols.step.net.params())
        for (double& v : p->v) v = rng.normal();
    fs::path dir = temp_dir("ckpt");
    std::string path = (dir / "a.ckpt").string();
    save_checkpoint(Checkpoint::from_policies(pols, 0.8, 8, 0.5, 1e-4, 0.02), path);
    Checkpoint ck = load_checkpoint(path);
    CHECK(ck.gamma == 0.8);
    CHECK(ck.T == 8);
    CHECK(ck.eta == 0.5);
    PolicyPair back = ck.to_policies();
    CHECK(back.step.kappa == 0.07);
    CHECK_FALSE(back.step.stochastic);
    auto pa = pols.noise.net.params(), pb = back.noise.net.params();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::size_t j = 0; j < pa[i]->size(); ++j) CHECK(pa[i]->v[j] == pb[i]->v[j]);
    auto sa = pols.step.net.params(), sb = back.step.net.params();
    for (std::size_t i = 0; i < sa.size(); ++i)
        for (std::size_t j = 0; j < sa[i]->size(); ++j) CHECK(sa[i]->v[j] == sb[i]->v[j]);
}

TEST_CASE("checkpoint loader rejects bad magic and missing files") {
    fs::path dir = temp_dir("ckpt_bad");
    write_text(dir / "bad.ckpt", "NOPE and some bytes");
    CHECK_THROWS_AS(load_checkpoint((dir / "bad.ckpt").string()), config_error);
    CHECK_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string()), config_error);
}

TEST_CASE("sample files round-trip bit-exactly, including the empty file") {
    fs::path dir = temp_dir("samples");
    NoiseStream rng(3, NoiseStream::kData);
    std::vector<Tensor> xs;
    for (int i = 0; i < 7; ++i) xs.push_back(rng.normal_vec(4));
    std::string path = (dir / "s.bin").string();
    save_samples(xs, path);
    std::vector<Tensor> back = load_samples(path);
    REQUIRE(back.size() == 7);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(back[i].v[j] == xs[i].v[j]);

    std::string empty = (dir / "empty.bin").string();
    save_samples({}, empty);
    CHECK(fs::file_size(empty) == 12);  // magic + two u32 counters, nothing else
    CHECK(load_samples(empty).empty());
    write_text(dir / "junk.bin", "XXXX");
    CHECK_THROWS_AS(load_samples((dir / "junk.bin").string()), config_error);
}

TEST_CASE("csv writer: 17-significant-digit floats round-trip exactly") {
    std::vector<double> vals{1.0 / 3.0, 3.141592653589793, -1e-17, 2.2250738585072014e-308, 0.1};
    CsvWriter csv({"v"});
    for (double v : vals) csv.row({fmt_f64(v)});
    std::stringstream ss(csv.str());
    std::string line;
    std::getline(ss, line);
    CHECK(line == "v");
    for (double v : vals) {
        std::getline(ss, line);
        CHECK(std::stod(line) == v);
    }
    CHECK_THROWS_AS(csv.row({"a", "b"}), dim_error);
}

TEST_CASE("sample index sidecar lists every sample") {
    fs::path dir = temp_dir("index");
    std::vector<Tensor> xs{Tensor::vec({1.0, 2.0}), Tensor::vec({3.0, 4.0})};
    std::string bin = (dir / "s.bin").string();
    save_samples(xs, bin);
    save_sample_index(xs, bin, (dir / "s.csv").string());
    std::string text = read_text(dir / "s.csv");
    CHECK(text.find("index,dim,file") == 0);
    CHECK(text.find("0,2," + bin) != std::string::npos);
    CHECK(text.find("1,2," + bin) != std::string::npos);
}

TEST_CASE("manifest records config hash, seed, and checkpoint hash") {
    fs::path dir = temp_dir("manifest");
    PolicyPair pols{NoisePolicy::make(1, 1, {4}, 1), StepPolicy::make(1, 1, {4}, 2)};
    std::string ck = (dir / "m.ckpt").string();
    save_checkpoint(Checkpoint::from_policies(pols, 1.0, 8, 0.5, 1e-4, 0.02), ck);
    std::string cfg = ExperimentConfig().serialize();
    write_manifest((dir / "manifest.txt").string(), cfg, 42, ck);
    std::string text = read_text(dir / "manifest.txt");
    CHECK(text.find("config_hash = " + std::to_string(fnv1a(cfg))) != std::string::npos);
    CHECK(text.find("seed = 42") != std::string::npos);
    CHECK(text.find("checkpoint_hash = " + std::to_string(fnv1a(read_file_bytes(ck)))) !=
          std::string::npos);
    std::size_t b = text.find("config_begin\n");
    std::size_t e = text.find("config_end\n");
    REQUIRE(b != std::string::npos);
    REQUIRE(e != std::string::npos);
    CHECK(text.substr(b + 13, e - b - 13) == cfg);
}

TEST_CASE("stage1-only and stage1+2 sample files differ once controls act") {
    GmmPrior prior;
    prior.dim = 2;
    prior.w = {0.5, 0.5};
    prior.m = {Tensor::vec({1.0, -1.0}), Tensor::vec({-1.0, 1.0})};
    prior.v = {0.3, 0.3};
    GmmOracleDenoiser den(prior);
    NoiseSchedule sch = build_schedule(8);
    PolicyPair pols{NoisePolicy::make(2, 2, {8}, 1), StepPolicy::make(2, 2, {8}, 2)};
    NoiseStream rng(7, NoiseStream::kInit);
    for (Tensor* p : pols.step.net.params())
        for (double& v : p->v) v += 0.1 * rng.normal();
    Tensor y = Tensor::vec({0.5, 0.0});
    GuidanceConfig with, without;
    without.use_controls = false;
    std::vector<Tensor> a, b;
    for (std::uint64_t s = 0; s < 10; ++s) {
        a.push_back(ahvp_rollout(pols, den, sch, without, y, s).x0());
        b.push_back(ahvp_rollout(pols, den, sch, with, y, s).x0());
    }
    fs::path dir = temp_dir("residual");
    save_samples(a, (dir / "a.bin").string());
    save_samples(b, (dir / "b.bin").string());
    std::vector<Tensor> ra = load_samples((dir / "a.bin").string());
    std::vector<Tensor> rb = load_samples((dir / "b.bin").string());
    double diff = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) diff += norm2(ra[i] - rb[i]);
    CHECK(diff > 0.0);
}

#ifdef HVP_CLI_PATH

TEST_CASE("cli: eval without a checkpoint reports unguided sanity-floor metrics") {
    fs::path dir = temp_dir("cli_eval");
    write_text(dir / "cfg.txt",
               "prior.kind = standard\nprior.dim = 2\ntask.kind = identity\n"
               "task.sigma_y = 0.1\neval.n_obs = 10\n");
    std::string out;
    int rc = run_cli("eval --config " + (dir / "cfg.txt").string() + " --out " + dir.string(), dir,
                     &out);
    CHECK(rc == 0);
    CHECK(out.find("unguided") != std::string::npos);
    std::string csv = read_text(dir / "metrics.csv");
    CHECK(csv.find("method,obs_id,mse") == 0);
    // header + 10 observation rows
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
    CHECK(read_text(dir / "manifest.txt").find("config_hash") != std::string::npos);
}

TEST_CASE("cli: config errors exit with status 2") {
    fs::path dir = temp_dir("cli_bad");
    write_text(dir / "bad.txt", "no.such.key = 1\n");
    CHECK(run_cli("eval --config " + (dir / "bad.txt").string(), dir) == 2);
    CHECK(run_cli("eval --config " + (dir / "missing.txt").string(), dir) == 2);
    write_text(dir / "cfg.txt", "prior.dim = 2\n");
    CHECK(run_cli("ablate --config " + (dir / "cfg.txt").string() + " --which bogus", dir) == 2);
    CHECK(run_cli("frobnicate", dir) == 2);
}

TEST_CASE("cli: train-stage1 writes checkpoint, loss curve, and manifest; sample consumes it") {
    fs::path dir = temp_dir("cli_train");
    write_text(dir / "cfg.txt",
               "prior.kind = gmm\nprior.dim = 2\nprior.weights = 0.5,0.5\n"
               "prior.means = 1.5,-0.5;-1.5,0.5\nprior.variances = 0.3,0.3\n"
               "task.kind = identity\ntask.sigma_y = 0.1\n"
               "train.epochs = 2\ntrain.batch_size = 4\ntrain.dataset_size = 8\n"
               "train.lr = 0.001\neval.n_obs = 5\n");
    int rc = run_cli("train-stage1 --config " + (dir / "cfg.txt").string() + " --out " +
                         dir.string() + " --seed 3",
                     dir);
    CHECK(rc == 0);
    CHECK(fs::exists(dir / "stage1.ckpt"));
    std::string curve = read_text(dir / "stage1_loss.csv");
    CHECK(curve.find("epoch,mean_loss") == 0);
    CHECK(std::count(curve.begin(), curve.end(), '\n') == 3);
    CHECK(read_text(dir / "manifest.txt").find("checkpoint_hash") != std::string::npos);

    rc = run_cli("sample --config " + (dir / "cfg.txt").string() + " --out " + dir.string() +
                     " --checkpoint " + (dir / "stage1.ckpt").string() + " --seed 3",
                 dir);
    CHECK(rc == 0);
    std::vector<Tensor> xs = load_samples((dir / "samples.bin").string());
    CHECK(xs.size() == 5);
    CHECK(fs::exists(dir / "samples.bin.csv"));
}

TEST_CASE("cli: oracle-check and gradcheck report per-property status and succeed") {
    fs::path dir = temp_dir("cli_checks");
    std::string out;
    CHECK(run_cli("gradcheck", dir, &out) == 0);
    CHECK(out.find("PASS stage1_loss") != std::string::npos);
    CHECK(out.find("PASS stage2_loss") != std::string::npos);
    CHECK(out.find("PASS shvp_step_objective") != std::string::npos);
    CHECK(out.find("PASS log_likelihood") != std::string::npos);
    CHECK(out.find("PASS surrogate elbo rollout") != std::string::npos);
    CHECK(out.find("FAIL") == std::string::npos);

    CHECK(run_cli("oracle-check", dir, &out) == 0);
    CHECK(std::count(out.begin(), out.end(), '\n') >= 3);
    CHECK(out.find("FAIL") == std::string::npos);
}

TEST_CASE("cli: ablate two-stage emits a comparison table") {
    fs::path dir = temp_dir("cli_ablate");
    write_text(dir / "cfg.txt",
               "prior.kind = gmm\nprior.dim = 4\nprior.weights = 0.5,0.5\n"
               "prior.means = 1,0,-1,0;-1,0,1,0\nprior.variances = 0.3,0.3\n"
               "task.kind = sr\ntask.factor = 2\ntask.sigma_y = 0.1\n"
               "train.epochs = 2\ntrain.batch_size = 4\ntrain.dataset_size = 8\n"
               "train.lr = 0.001\neval.n_obs = 5\n");
    int rc = run_cli("ablate --which two-stage --config " + (dir / "cfg.txt").string() + " --out " +
                         dir.string(),
                     dir);
    CHECK(rc == 0);
    std::string csv = read_text(dir / "ablate_two_stage.csv");
    CHECK(csv.find("method,mean_mse,mean_residual,mean_loglik") == 0);
    CHECK(csv.find("unguided") != std::string::npos);
    CHECK(csv.find("stage1_only") != std::string::npos);
    CHECK(csv.find("ahvp") != std::string::npos);
}

#endif  // HVP_CLI_PATH
