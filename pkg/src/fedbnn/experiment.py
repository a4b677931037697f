"""Assemble an experiment from a config, run it, and write its artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bnn import BnnModel, mc_predict, save_checkpoint
from .config import ExperimentConfig
from .data import (AlignmentDataset, DataSetting, LabeledDataset, Partition, PartitionSpec,
                   build_alignment_dataset, gen_synthetic_blobs, load_mnist_idx, partition,
                   synthetic_alignment_dataset)
from .federation import (BaselineClient, ClientState, RoundRecord, ServerState, pretrain_clients,
                         run_fedavg, run_fedbnn)
from .metrics import calibration_csv, calibration_report
from .nn_core import MlpArchitecture, predict_proba
from .privacy import (AccountantConfig, DpParams, NoiseScale, SensitivityBound, accountant_row,
                      per_round_per_query_budget, sigma_for_budget, strict_epsilon)
from .rng import SeededRng

log = logging.getLogger(__name__)

ROUND_LOG_HEADER = ["round", "client_id", "test_acc", "mean_conf", "bytes_uploaded",
                    "local_loss", "prior_loss"]
ARTIFACTS = ("round_log.csv", "summary.json", "calibration.csv", "checkpoints")


@dataclass
class Setup:
    pool: LabeledDataset
    partition: Partition
    ad: AlignmentDataset
    capacities: list[str]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    test_probs: list[np.ndarray]
    test_labels: list[np.ndarray]
    capacities: list[str]
    accountant: dict | None
    models: dict  # file name -> BnnModel or weight vector

    def final_accuracy(self) -> dict[int, float]:
        return dict(self.records[-1].test_acc) if self.records else {}

    def mean_accuracy(self, capacity: str | None = None) -> float:
        acc = self.final_accuracy()
        ids = [i for i in acc if capacity is None or self.capacities[i] == capacity]
        return float(np.mean([acc[i] for i in ids])) if ids else math.nan


def load_pool(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.data
    if d.dataset == "mnist":
        return load_mnist_idx(d.mnist_images, d.mnist_labels)
    return gen_synthetic_blobs(d.classes, d.dims, d.pool_per_class, d.separation, cfg.seed)


def partition_spec(cfg: ExperimentConfig) -> PartitionSpec:
    d = cfg.data
    return PartitionSpec(d.n_clients, d.classes_per_client, d.per_class, d.mode,
                         d.allow_class_overlap)


def preview_partition(cfg: ExperimentConfig) -> Partition:
    return partition(load_pool(cfg), partition_spec(cfg), DataSetting(cfg.data.setting), cfg.seed)


def assign_capacities(n: int, small_fraction: float, seed: int) -> list[str]:
    n_small = int(round(small_fraction * n))
    small = set(int(i) for i in SeededRng(seed).stream("capacity").choice(n, n_small, replace=False))
    return ["small" if i in small else "large" for i in range(n)]


def _trim_per_class(ds: LabeledDataset, k: int) -> LabeledDataset:
    # shard rows are already a random draw, so the first k of each class will do
    keep = np.concatenate([np.flatnonzero(ds.labels == c)[:k] for c in np.unique(ds.labels)])
    return ds.subset(np.sort(keep))


def build_setup(cfg: ExperimentConfig) -> Setup:
    pool = load_pool(cfg)
    part = partition(pool, partition_spec(cfg), DataSetting(cfg.data.setting), cfg.seed)
    caps = assign_capacities(cfg.data.n_clients, cfg.model.small_fraction, cfg.seed)
    if cfg.data.small_per_class is not None:
        for s, cap in zip(part.shards, caps):
            if cap == "small":
                s.train = _trim_per_class(s.train, cfg.data.small_per_class)
    d = cfg.data
    if d.ad_source == "synthetic":
        ad = synthetic_alignment_dataset(d.classes, d.dims, d.ad_size, d.separation,
                                         cfg.seed + 1)
    else:
        ad = build_alignment_dataset(pool, d.ad_size, cfg.seed, exclude=part.used_indices())
    return Setup(pool, part, ad, caps)


def architecture(cfg: ExperimentConfig, dims: int, classes: int, capacity: str) -> MlpArchitecture:
    hidden = cfg.model.small_hidden if capacity == "small" else cfg.model.large_hidden
    return MlpArchitecture((dims, *hidden, classes))


def make_clients(cfg: ExperimentConfig, setup: Setup) -> list[ClientState]:
    root = SeededRng(cfg.seed).stream("clients")
    clients = []
    for shard, cap in zip(setup.partition.shards, setup.capacities):
        rng = root.stream(shard.client_id)
        arch = architecture(cfg, setup.pool.dims, setup.pool.classes, cap)
        model = BnnModel.init(arch, rng.stream("init"), cfg.model.rho_init, cfg.model.prior_sigma)
        clients.append(ClientState(shard.client_id, model, shard.train, shard.test, rng,
                                   list(shard.classes), float(len(shard.train)), cap))
    return clients


def accountant_report(cfg: ExperimentConfig, ad_size: int, noise: NoiseScale | None) -> dict | None:
    p = cfg.privacy
    if p.epsilon is None:
        return None
    dp = DpParams(p.epsilon, p.delta)
    sens = SensitivityBound(p.sensitivity_sq)
    E = max(cfg.global_rounds, 1)
    rows = {
        "per_example": accountant_row(dp, AccountantConfig(E, ad_size), sens),
        "per_release": accountant_row(dp, AccountantConfig(E, 1), sens),
    }
    report = {"query_mode": p.query_mode, "epsilon": p.epsilon, "delta": p.delta, "E": E,
              "ad_size": ad_size, "rows": rows}
    if noise is not None:
        report["sigma_used"] = noise.sigma
        report["strict_epsilon_prime"] = {
            "per_example": strict_epsilon(noise, E, ad_size, p.delta, sens),
            "per_release": strict_epsilon(noise, E, 1, p.delta, sens),
        }
    return report


def noise_for(cfg: ExperimentConfig, ad_size: int) -> NoiseScale:
    p = cfg.privacy
    k = ad_size if p.query_mode == "per_example" else 1
    budget = per_round_per_query_budget(DpParams(p.epsilon, p.delta),
                                        AccountantConfig(max(cfg.global_rounds, 1), k))
    return sigma_for_budget(SensitivityBound(p.sensitivity_sq), budget)


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    setup = build_setup(cfg)
    if cfg.method in ("fedavg", "dp_fedavg"):
        return _run_baseline(cfg, setup)
    clients = make_clients(cfg, setup)
    rc = cfg.round
    noise = None
    if rc.dp_enabled:
        if cfg.method != "fedbnn":
            raise ValueError("dp_enabled applies to method 'fedbnn' only")
        noise = noise_for(cfg, len(setup.ad))
        log.info("DP noise sigma = %.6g", noise.sigma)
    server = ServerState(setup.ad, SeededRng(cfg.seed).stream("server"), setup.pool.classes,
                         noise=noise)
    log.info("pretraining %d clients for %d epochs", len(clients), rc.pretrain_epochs)
    pretrain_clients(clients, rc.pretrain_epochs, rc, workers)
    res = run_fedbnn(clients, server, rc, cfg.global_rounds, workers,
                     collaborate=cfg.method == "fedbnn")
    probs = [mc_predict(c.model, c.test.features, rc.eval_k_mc, c.rng.stream("final"))
             for c in res.clients]
    models = {f"client_{c.id}.npz": c.model for c in res.clients}
    return ExperimentResult(cfg, res.records, probs, [c.test.labels for c in res.clients],
                            setup.capacities, accountant_report(cfg, len(setup.ad), noise), models)


def _run_baseline(cfg: ExperimentConfig, setup: Setup) -> ExperimentResult:
    rc = cfg.round
    arch = architecture(cfg, setup.pool.dims, setup.pool.classes, "large")
    root = SeededRng(cfg.seed).stream("clients")
    clients = [BaselineClient(s.client_id, s.train, s.test, root.stream(s.client_id))
               for s in setup.partition.shards]
    dp = cfg.method == "dp_fedavg"
    glob, records = run_fedavg(clients, arch, cfg.global_rounds, rc.local_epochs, rc.local_lr,
                               rc.batch_size, cfg.seed,
                               clip_norm=cfg.baseline.clip_norm if dp else None,
                               noise_multiplier=cfg.baseline.noise_multiplier if dp else 0.0)
    probs = [predict_proba(arch, glob, c.test.features) for c in clients]
    return ExperimentResult(cfg, records, probs, [c.test.labels for c in clients],
                            ["large"] * len(clients), None, {"global_model.npz": glob})


# --------------------------------------------------------------------------
# artifacts


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def round_log_csv(records: list[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUND_LOG_HEADER)
    for rec in records:
        for cid in sorted(rec.test_acc):
            w.writerow([rec.round, cid, _fmt(rec.test_acc[cid]), _fmt(rec.mean_conf[cid]),
                        rec.bytes_uploaded[cid], _fmt(rec.local_loss[cid]),
                        _fmt(rec.prior_loss[cid])])
    return buf.getvalue()


def summarize_round_log(text: str) -> dict:
    """Re-derive the headline numbers from a round-log CSV."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return {"rounds": 0, "final_accuracy": {}, "final_mean_accuracy": None,
                "mean_accuracy_per_round": [], "bytes_uploaded_per_round": []}
    if list(rows[0].keys()) != ROUND_LOG_HEADER:
        raise ValueError("round log: unexpected header")
    by_round: dict[int, list[dict]] = {}
    for r in rows:
        by_round.setdefault(int(r["round"]), []).append(r)
    last = by_round[max(by_round)]
    final = {int(r["client_id"]): float(r["test_acc"]) for r in last}
    return {
        "rounds": max(by_round),
        "final_accuracy": final,
        "final_mean_accuracy": float(np.mean(list(final.values()))),
        "mean_accuracy_per_round": [float(np.mean([float(r["test_acc"]) for r in by_round[t]]))
                                    for t in sorted(by_round)],
        "bytes_uploaded_per_round": [sum(int(r["bytes_uploaded"]) for r in by_round[t])
                                     for t in sorted(by_round)],
    }


def write_artifacts(result: ExperimentResult, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_text = round_log_csv(result.records)
    (out / "round_log.csv").write_text(log_text)

    cal = calibration_report(np.concatenate(result.test_probs),
                             np.concatenate(result.test_labels), result.config.calibration_bins)
    (out / "calibration.csv").write_text(calibration_csv(cal))

    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for name, m in result.models.items():
        if isinstance(m, BnnModel):
            save_checkpoint(m, ck / name)
        else:
            with open(ck / name, "wb") as fh:
                np.savez(fh, weights=m)

    summary = summarize_round_log(log_text)
    summary.update({
        "method": result.config.method,
        "capacities": result.capacities,
        "ece": cal.ece,
        "mce": cal.mce,
        "accountant": result.accountant,
        "config": result.config.to_dict(),
    })
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
