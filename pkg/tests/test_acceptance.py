"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N [PASS|FAIL]`` line (collected again
in the terminal summary by conftest.py).
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from fedbnn.bnn import BnnModel, MeanFieldGaussian, elbo_loss, kl_gradients, kl_mean_field
from fedbnn.cli import main as cli_main
from fedbnn.config import DataConfig, ExperimentConfig, ModelConfig, PrivacyConfig
from fedbnn.data import AlignmentDataset, gen_synthetic_blobs
from fedbnn.experiment import run_experiment, write_artifacts
from fedbnn.federation import (BaselineClient, ClientState, RoundConfig, ServerState,
                               dp_fedavg_round, fedavg_round, run_fedavg, run_fedbnn)
from fedbnn.metrics import (ReliabilityBins, calibration_csv, calibration_report, ece, mce,
                            parse_calibration_csv)
from fedbnn.nn_core import (MlpArchitecture, grad_check, mean_ce_grad, mlp_backward, mlp_forward,
                            one_hot, train_deterministic)
from fedbnn.privacy import (AccountantConfig, DpParams, NoiseScale, SensitivityBound,
                            compose_sequential, dp_to_zcdp, per_round_per_query_budget,
                            privatize_output, sigma_for_budget, zcdp_to_dp)
from fedbnn.rng import SeededRng

MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist-5k"


def rel(a, b):
    return abs(a - b) / abs(b)


# --------------------------------------------------------------------------
# 1. accountant


def test_criterion_01_accountant(criterion):
    t0 = time.perf_counter()
    ok = []
    # 40-digit reference values
    ok.append(rel(dp_to_zcdp(DpParams(2.0, 1e-5)).rho, 0.08685889638065036553) < 1e-9)
    rho = per_round_per_query_budget(DpParams(1.0, 1e-5), AccountantConfig(100, 1))
    ok.append(rel(rho.rho, 2.171472409516259138e-4) < 1e-9)
    ok.append(rel(sigma_for_budget(SensitivityBound(2.0), rho).sigma, 67.86140424415111798) < 1e-9)
    worst_comp = worst_rt = 0.0
    for eps, delta, E, K in [(1.0, 1e-5, 100, 1), (2.0, 1e-5, 1, 1), (10.0, 1e-5, 15, 1),
                             (1.0, 1e-5, 100, 2000), (0.5, 1e-7, 30, 7)]:
        dp = DpParams(eps, delta)
        per = per_round_per_query_budget(dp, AccountantConfig(E, K))
        total = compose_sequential([per] * (E * K))
        worst_comp = max(worst_comp, rel(total.rho, dp_to_zcdp(dp).rho))
        want = eps + eps ** 2 / (4 * math.log(1 / delta))
        worst_rt = max(worst_rt, rel(zcdp_to_dp(total, delta), want))
    ok += [worst_comp <= 1e-12, worst_rt <= 1e-12]
    dt = time.perf_counter() - t0
    criterion(1, "accountant exactness", all(ok) and dt < 1.0,
              f"composition rel err {worst_comp:.1e}, round-trip rel err {worst_rt:.1e}, {dt:.3f}s")


# --------------------------------------------------------------------------
# 2. KL oracle


def log_normal(x, m, s):
    return -0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * math.log(2 * math.pi)


def kl_quad(mq, sq, mp, sp):
    def f(x):
        lq = log_normal(x, mq, sq)
        return math.exp(lq) * (lq - log_normal(x, mp, sp))
    val, _ = integrate.quad(f, mq - 20 * sq, mq + 20 * sq, epsabs=1e-12, epsrel=1e-12, limit=200)
    return val


def one_dim(mu, sigma):
    return MeanFieldGaussian(np.array([mu]), np.array([math.log(math.expm1(sigma))]))


def test_criterion_02_kl_oracle(criterion):
    t0 = time.perf_counter()
    g = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        mq, mp = g.uniform(-3, 3, 2)
        sq, sp = g.uniform(0.2, 3.0, 2)
        q, p = one_dim(mq, sq), one_dim(mp, sp)
        worst = max(worst, abs(kl_mean_field(q, p) - kl_quad(q.mu[0], q.sigma[0], p.mu[0], p.sigma[0])))
    sign_ok = True
    for i in range(1000):
        n = int(g.integers(1, 10))
        q = MeanFieldGaussian(g.normal(size=n), g.normal(size=n))
        if i % 2 == 0:
            sign_ok &= kl_mean_field(q, q.copy()) == 0.0
        else:
            p = MeanFieldGaussian(g.normal(size=n), g.normal(size=n))
            sign_ok &= kl_mean_field(q, p) > 0.0
    dt = time.perf_counter() - t0
    criterion(2, "KL oracle", worst <= 1e-6 and sign_ok and dt < 10,
              f"max |closed form - quadrature| {worst:.1e}, sign/equality ok={sign_ok}, {dt:.1f}s")


# --------------------------------------------------------------------------
# 3. gradient suite


def random_mlp(g, max_depth=3, max_width=6):
    widths = [int(g.integers(1, max_width + 1)) for _ in range(int(g.integers(1, max_depth + 1)))]
    return MlpArchitecture(tuple(widths + [int(g.integers(2, 5))]))


def far_from_kinks(arch, ws, x, margin=1e-3):
    for w in ws:
        _, cache = mlp_forward(arch, w, x)
        if any(np.min(np.abs(z)) <= margin for z in cache.pre[:-1]):
            return False
    return True


def mlp_case(g):
    arch = random_mlp(g)
    w = g.normal(size=arch.n_weights)
    x = g.normal(size=(int(g.integers(1, 6)), arch.n_inputs))
    y = g.integers(0, arch.n_classes, x.shape[0])
    if not far_from_kinks(arch, [w], x):
        return None
    t = one_hot(y, arch.n_classes)

    def f(p):
        logits, cache = mlp_forward(arch, p, x)
        loss, gl = mean_ce_grad(logits, t)
        return loss, mlp_backward(arch, p, cache, gl)
    return f, w


def elbo_case(g):
    arch = random_mlp(g, max_width=5)
    n = arch.n_weights
    mu, rho = g.normal(size=n) * 0.8, g.normal(size=n) - 2.0
    prior = MeanFieldGaussian(g.normal(size=n) * 0.3, g.normal(size=n))
    x = g.normal(size=(int(g.integers(1, 5)), arch.n_inputs))
    y = g.integers(0, arch.n_classes, x.shape[0])
    eps = [g.normal(size=n) for _ in range(int(g.integers(1, 4)))]
    sigma = np.log1p(np.exp(rho))
    if not far_from_kinks(arch, [mu + sigma * e for e in eps], x, margin=1e-2):
        return None
    kw = float(g.uniform(0.1, 1.0))

    def f(p):
        m = BnnModel(arch, MeanFieldGaussian(p[:n], p[n:]), prior, 0)
        r = elbo_loss(m, x, y, None, len(eps), kw, eps=eps)
        return r.loss, np.concatenate([r.grad_mu, r.grad_rho])
    return f, np.concatenate([mu, rho])


def kl_case(g):
    n = int(g.integers(1, 20))
    params = np.concatenate([g.normal(size=n), g.normal(size=n) - 1, g.normal(size=n),
                             g.normal(size=n)])

    def f(p):
        q = MeanFieldGaussian(p[:n], p[n:2 * n])
        pr = MeanFieldGaussian(p[2 * n:3 * n], p[3 * n:])
        kg = kl_gradients(q, pr)
        return kl_mean_field(q, pr), np.concatenate([kg.mu_q, kg.rho_q, kg.mu_p, kg.rho_p])
    return f, params


def test_criterion_03_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = {}
    for name, make in (("mlp", mlp_case), ("elbo", elbo_case), ("kl", kl_case)):
        g = np.random.default_rng(300)
        done, err = 0, 0.0
        while done < 100:
            case = make(g)
            if case is None:
                continue
            rep = grad_check(case[0], case[1], tol=1e-4)
            err = max(err, rep.max_rel_error)
            done += 1
        worst[name] = err
    dt = time.perf_counter() - t0
    passed = all(v < 1e-4 for v in worst.values()) and dt < 60
    criterion(3, "gradient suite (100 configs each)", passed,
              ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f", {dt:.1f}s")


# --------------------------------------------------------------------------
# 4. sensitivity and mechanism


def test_criterion_04_sensitivity_mechanism(criterion):
    g = np.random.default_rng(4)
    k = 10
    a, b = g.dirichlet(np.ones(k) * 0.3, 10_000), g.dirichlet(np.ones(k) * 0.3, 10_000)
    max_d2 = float(np.max(np.sum((a - b) ** 2, axis=1)))
    sigma = 67.86140424415112
    rows = g.dirichlet(np.ones(4), 250_000)
    noise = privatize_output(rows, NoiseScale(sigma), SeededRng(4)) - rows
    std_err = abs(noise.std() / sigma - 1)
    corr = np.corrcoef(noise.T)
    max_corr = float(np.max(np.abs(corr - np.eye(4))))
    passed = max_d2 <= 2.0 and std_err < 0.005 and max_corr < 0.01
    criterion(4, "sensitivity and mechanism", passed,
              f"max ||a-b||^2 {max_d2:.4f}, std rel err {std_err:.2e}, max corr {max_corr:.2e}")


# --------------------------------------------------------------------------
# 5. baseline oracle


def test_criterion_05_baseline_oracle(criterion):
    ds = gen_synthetic_blobs(3, 6, 40, 3.0, seed=5)
    arch = MlpArchitecture((6, 10, 3))
    R, E, lr, bs = 4, 3, 1e-2, 16
    glob, _ = run_fedavg([BaselineClient(0, ds, ds, SeededRng(11))], arch, R, E, lr, bs, seed=2)
    w0 = arch.init_weights(SeededRng(2).stream("fedavg").stream("init"))
    central, _, _ = train_deterministic(arch, w0, ds.features, ds.labels, R * E, lr, bs,
                                        SeededRng(11))
    n1_equal = np.array_equal(glob, central)

    g = np.random.default_rng(5)
    ref = g.normal(size=arch.n_weights)
    models = [ref + 0.01 * g.normal(size=arch.n_weights) for _ in range(3)]
    w = [1.0, 2.0, 3.0]
    dp_equal = np.array_equal(dp_fedavg_round(models, 10.0, 0.0, w, SeededRng(0), ref),
                              fedavg_round(models, w))

    def clients():
        return [BaselineClient(i, ds.subset(np.arange(i, len(ds), 3)), ds, SeededRng(i))
                for i in range(3)]
    a, _ = run_fedavg(clients(), arch, 3, 2, lr, bs, seed=0)
    b, _ = run_fedavg(clients(), arch, 3, 2, lr, bs, seed=0, clip_norm=1e9, noise_multiplier=0.0)
    run_equal = np.array_equal(a, b)
    criterion(5, "baseline oracle", n1_equal and dp_equal and run_equal,
              f"N=1 FedAvg == centralized: {n1_equal}; DP-FedAvg(sigma=0) == FedAvg: "
              f"{dp_equal and run_equal}")


# --------------------------------------------------------------------------
# end-to-end configurations


def synthetic_config(method="fedbnn", seed=0, gamma=0.7):
    return ExperimentConfig(
        method=method, seed=seed, global_rounds=10,
        data=DataConfig(classes=4, dims=10, separation=10.0, pool_per_class=400, n_clients=4,
                        classes_per_client=2, setting="small", ad_size=200),
        model=ModelConfig(large_hidden=[32]),
        round=RoundConfig(gamma=gamma, batch_size=32, local_lr=1e-2, prior_lr=1e-3,
                          pretrain_epochs=50, local_epochs=5))


def test_criterion_06_synthetic_collaboration(criterion):
    t0 = time.perf_counter()
    main = run_experiment(synthetic_config())
    accs = main.final_accuracy()
    every = all(a >= 0.90 for a in accs.values())
    diffs = []
    for seed in range(5):
        g0 = run_experiment(synthetic_config(seed=seed, gamma=0.0)).mean_accuracy()
        iso = run_experiment(synthetic_config("isolated", seed=seed)).mean_accuracy()
        diffs.append(g0 - iso)
    mean_diff = float(np.mean(diffs))
    dt = time.perf_counter() - t0
    passed = every and abs(mean_diff) <= 0.01 and dt < 60
    criterion(6, "synthetic collaboration run", passed,
              f"per-client acc {[round(a, 3) for a in accs.values()]}, gamma=0 minus isolated "
              f"{100 * mean_diff:+.2f} pts over 5 seeds, {dt:.1f}s")


def mnist_config(dp=False, seed=0):
    privacy = PrivacyConfig(epsilon=10.0, delta=1e-5, query_mode="per_release") if dp \
        else PrivacyConfig()
    return ExperimentConfig(
        method="fedbnn", seed=seed, global_rounds=15, privacy=privacy,
        data=DataConfig(dataset="mnist", mnist_images=str(MNIST / "images-idx3-ubyte.gz"),
                        mnist_labels=str(MNIST / "labels-idx1-ubyte.gz"), n_clients=5,
                        classes_per_client=5, setting="small", ad_size=500),
        model=ModelConfig(large_hidden=[100]),
        round=RoundConfig(pretrain_epochs=10, local_epochs=5, dp_enabled=dp))


@pytest.fixture(scope="module")
def mnist_plain():
    if not (MNIST / "images-idx3-ubyte.gz").exists():
        pytest.fail("MNIST subset missing; run scripts/build_mnist_subset.py")
    t0 = time.perf_counter()
    res = run_experiment(mnist_config())
    return res, time.perf_counter() - t0


def test_criterion_07_mnist_smoke(criterion, mnist_plain):
    res, dt = mnist_plain
    acc = res.mean_accuracy()
    criterion(7, "MNIST smoke", acc >= 0.80 and dt < 600,
              f"mean personalized accuracy {acc:.4f}, {dt:.0f}s")


def hetero_config(method, seed):
    return ExperimentConfig(
        method=method, seed=seed, global_rounds=10,
        data=DataConfig(classes=4, dims=10, separation=2.0, pool_per_class=600, n_clients=8,
                        classes_per_client="all", per_class=50, small_per_class=5, ad_size=200),
        model=ModelConfig(large_hidden=[256], small_hidden=[32], small_fraction=0.5),
        round=RoundConfig(batch_size=32, local_lr=1e-2, prior_lr=1e-3, pretrain_epochs=50,
                          local_epochs=5))


def test_criterion_08_heterogeneity_direction(criterion):
    gains = []
    for seed in range(5):
        iso = run_experiment(hetero_config("isolated", seed)).mean_accuracy("small")
        col = run_experiment(hetero_config("fedbnn", seed)).mean_accuracy("small")
        gains.append(col - iso)
    mean_gain = float(np.mean(gains))
    criterion(8, "heterogeneity direction (small clients)", mean_gain >= 0.02,
              f"collaboration minus isolated {100 * mean_gain:+.2f} pts (per seed "
              f"{[round(100 * x, 1) for x in gains]})")


def test_criterion_09_dp_pipeline(criterion, mnist_plain, tmp_path):
    plain, _ = mnist_plain
    res = run_experiment(mnist_config(dp=True))
    summary = write_artifacts(res, tmp_path)
    acc, ref = res.mean_accuracy(), plain.mean_accuracy()
    strict = (summary["accountant"] or {}).get("strict_epsilon_prime", {})
    both = set(strict) == {"per_example", "per_release"}
    chance = 0.20
    passed = acc < ref and acc >= chance + 0.20 and both
    criterion(9, "DP pipeline", passed,
              f"DP acc {acc:.4f} vs non-private {ref:.4f} (floor {chance + 0.20:.2f}); "
              f"sigma {summary['accountant']['sigma_used']:.4f}; strict eps' per-release "
              f"{strict.get('per_release', float('nan')):.4f}, per-example "
              f"{strict.get('per_example', float('nan')):.1f}")


# --------------------------------------------------------------------------
# 10. calibration


def test_criterion_10_calibration(criterion, tmp_path, capsys):
    def bins(counts, acc, conf):
        return ReliabilityBins(len(counts), np.array(counts), np.array(acc, float),
                               np.array(conf, float))
    hand = [
        abs(ece(bins([4], [0.75], [0.9])) - 0.15) <= 1e-12,
        abs(ece(bins([5, 5], [0.5, 0.6], [0.6, 0.9])) - 0.2) <= 1e-12,
        abs(mce(bins([5, 5], [0.5, 0.6], [0.6, 0.9])) - 0.3) <= 1e-12,
        ece(bins([3, 2], [0.4, 0.8], [0.4, 0.8])) == 0.0,
        mce(bins([0, 0], [0, 0], [0, 0])) == 0.0,
    ]
    conf = np.repeat([0.6, 0.8, 1.0], 10)
    correct = np.concatenate([np.arange(10) < 6, np.arange(10) < 8, np.ones(10, bool)])
    probs = np.stack([conf, 1 - conf], axis=1)
    calibrated = calibration_report(probs, np.where(correct, 0, 1)).ece <= 1e-12

    g = np.random.default_rng(10)
    p = g.dirichlet(np.ones(4), 200)
    rep = calibration_report(p, g.integers(0, 4, 200))
    (tmp_path / "calibration.csv").write_text(calibration_csv(rep))
    (tmp_path / "round_log.csv").write_text(
        "round,client_id,test_acc,mean_conf,bytes_uploaded,local_loss,prior_loss\n"
        "1,0,0.5,0.6,100,1.0,\n")
    code = cli_main(["report", str(tmp_path / "round_log.csv"), "--calibration",
                     str(tmp_path / "calibration.csv")])
    out = json.loads(capsys.readouterr().out)
    back = parse_calibration_csv((tmp_path / "calibration.csv").read_text())
    roundtrip = (code == 0 and out["ece"] == rep.ece and out["mce"] == rep.mce
                 and back.ece == rep.ece and np.array_equal(back.bins.counts, rep.bins.counts))
    criterion(10, "calibration unit suite", all(hand) and calibrated and roundtrip,
              f"hand cases {sum(hand)}/{len(hand)}, calibrated ECE zero: {calibrated}, "
              f"CSV round-trip via report: {roundtrip}")


# --------------------------------------------------------------------------
# 11. communication cost


def one_round_bytes(hidden, ad_size):
    ds = gen_synthetic_blobs(4, 6, 30, 8.0, seed=0)
    clients = []
    for i in range(2):
        rng = SeededRng(0).stream("c", i)
        model = BnnModel.init(MlpArchitecture((6, *hidden, 4)), rng.stream("init"))
        clients.append(ClientState(i, model, ds, ds, rng, [0, 1, 2, 3], float(len(ds))))
    ad = AlignmentDataset(gen_synthetic_blobs(4, 6, ad_size, 8.0, seed=1).features[:ad_size])
    cfg = RoundConfig(prior_steps=2, local_epochs=1, batch_size=32, k_mc=2, eval_k_mc=2)
    rec = run_fedbnn(clients, ServerState(ad, SeededRng(0), 4), cfg, 1).records[0]
    return rec.bytes_uploaded


def test_criterion_11_communication_cost(criterion):
    small, large = MlpArchitecture((6, 10, 4)), MlpArchitecture((6, 110, 4))
    ratio = large.n_weights / small.n_weights
    same = one_round_bytes((10,), 100) == one_round_bytes((110,), 100)
    b = {n: one_round_bytes((10,), n)[0] for n in (100, 200, 400)}
    slope = (b[200] - b[100]) / 100
    linear = (b[400] - b[200] == 2 * (b[200] - b[100])) and b[100] == 100 * slope \
        and slope == 4 * 8
    criterion(11, "communication cost O(|AD|)", ratio >= 10 and same and linear,
              f"params x{ratio:.1f} -> identical bytes: {same}; bytes at |AD|=100/200/400: "
              f"{b[100]}/{b[200]}/{b[400]} (slope {slope:.0f} B per AD row)")
