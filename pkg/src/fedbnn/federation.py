"""FedBNN rounds plus FedAvg / DP-FedAvg baselines.

Clients never share weights. Each round every selected client uploads its
(optionally noised) Monte-Carlo class-probability matrix on the alignment
dataset; the server forms a weighted average, projects it back onto the
simplex and broadcasts it. Before local training a client tunes its prior so
that networks drawn from it reproduce a blend of the broadcast and its own
outputs, then trains its posterior against that frozen prior.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .bnn import (BnnModel, ElboDiverged, MeanFieldGaussian, mc_predict, softplus_grad,
                  train_local_bbb)
from .data import AlignmentDataset, LabeledDataset
from .metrics import accuracy
from .nn_core import (AdamState, MlpArchitecture, adam_step, log_softmax, mlp_backward,
                      mlp_forward, train_deterministic, predict_proba)
from .privacy import NoiseScale, privatize_output
from .rng import SeededRng

log = logging.getLogger(__name__)

BYTES_PER_VALUE = 8


@dataclass
class RoundConfig:
    gamma: float = 0.7
    prior_steps: int = 100
    prior_lr: float = 1e-4
    prior_batch_size: int = 0  # 0 = the whole AD every step
    prior_init: str = "posterior"  # "posterior" | "keep"
    local_epochs: int = 20
    local_lr: float = 1e-3
    batch_size: int = 128
    lsteps: int = 0  # rounds gate: no prior tuning while t < lsteps
    pretrain_epochs: int = 50
    k_mc: int = 10
    mc_samples: int = 2
    eval_k_mc: int = 10
    client_fraction: float = 1.0
    dp_enabled: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError(f"client_fraction must lie in (0, 1], got {self.client_fraction}")
        for name in ("prior_steps", "prior_batch_size", "local_epochs", "lsteps",
                     "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "k_mc", "mc_samples", "eval_k_mc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("prior_lr", "local_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.prior_init not in ("posterior", "keep"):
            raise ValueError(f"prior_init must be 'posterior' or 'keep', got {self.prior_init!r}")


@dataclass
class ClientState:
    id: int
    model: BnnModel
    train: LabeledDataset
    test: LabeledDataset
    rng: SeededRng
    classes: list[int] = field(default_factory=list)
    agg_weight: float = 1.0
    capacity: str = "large"

    def __post_init__(self):
        if len(self.train) == 0:
            raise ValueError(f"client {self.id} has an empty shard")
        if not math.isfinite(self.agg_weight) or self.agg_weight < 0:
            raise ValueError("aggregation weight must be finite and non-negative")


@dataclass
class ServerState:
    ad: AlignmentDataset
    rng: SeededRng
    n_classes: int
    aggregated: np.ndarray | None = None
    round: int = 0
    noise: NoiseScale | None = None


@dataclass
class LocalResult:
    client_id: int
    release: np.ndarray | None
    local_loss: float | None
    prior_loss: float | None

    @property
    def payload(self) -> bytes:
        if self.release is None:
            return b""
        return np.ascontiguousarray(self.release, dtype="<f8").tobytes()


@dataclass
class RoundRecord:
    round: int
    test_acc: dict[int, float]
    mean_conf: dict[int, float]
    bytes_uploaded: dict[int, int]
    local_loss: dict[int, float | None]
    prior_loss: dict[int, float | None]

    @property
    def mean_acc(self) -> float:
        return float(np.mean(list(self.test_acc.values())))


# --------------------------------------------------------------------------
# server-side operations


def normalize_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError("aggregation weights must be non-negative with a positive sum")
    return w / w.sum()


def project_rows(m: np.ndarray) -> np.ndarray:
    """Clamp negatives to zero and rescale rows to sum to one (uniform if a row vanishes)."""
    m = np.maximum(m, 0.0)
    s = m.sum(axis=1, keepdims=True)
    uniform = np.full_like(m, 1.0 / m.shape[1])
    return np.where(s > 0, m / np.where(s > 0, s, 1.0), uniform)


def weighted_aggregate(outputs: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    if len(outputs) == 0:
        raise ValueError("nothing to aggregate")
    shape = outputs[0].shape
    if any(o.shape != shape for o in outputs):
        raise ValueError("shape mismatch among client outputs")
    if len(weights) != len(outputs):
        raise ValueError("one weight per output is required")
    w = normalize_weights(weights)
    agg = np.zeros(shape)
    for wj, o in zip(w, outputs):
        agg += wj * o
    return project_rows(agg)


def corrected_target(global_out: np.ndarray, local_out: np.ndarray, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if global_out.shape != local_out.shape:
        raise ValueError("global and local outputs differ in shape")
    return gamma * global_out + (1.0 - gamma) * local_out


# --------------------------------------------------------------------------
# client-side operations


def prior_loss_and_grad(model: BnnModel, prior: MeanFieldGaussian, x: np.ndarray,
                        target: np.ndarray, eps: np.ndarray):
    """Mean cross-entropy of the prior-drawn network against ``target`` and its psi-gradient."""
    sigma = prior.sigma
    w = prior.mu + sigma * eps
    logits, cache = mlp_forward(model.arch, w, x)
    logp = log_softmax(logits)
    n = x.shape[0]
    loss = float(-np.sum(target * logp) / n)
    g_logits = (np.exp(logp) * target.sum(axis=1, keepdims=True) - target) / n
    gw = mlp_backward(model.arch, w, cache, g_logits)
    return loss, gw, gw * eps * softplus_grad(prior.rho_raw)


def tune_prior(model: BnnModel, corrected: np.ndarray, ad: AlignmentDataset, steps: int,
               lr: float, rng: SeededRng,
               batch_size: int = 0) -> tuple[MeanFieldGaussian, list[float]]:
    """Adam on the prior parameters so prior-drawn networks match ``corrected`` on AD.

    One reparameterized weight draw per step; the posterior is not touched.
    """
    if corrected.shape != (len(ad), model.arch.n_classes):
        raise ValueError(f"corrected target shape {corrected.shape} does not match "
                         f"(|AD|, classes) = {(len(ad), model.arch.n_classes)}")
    prior = model.prior.copy()
    if steps <= 0:
        return prior, []
    n = len(prior)
    params = np.concatenate([prior.mu, prior.rho_raw])
    state = AdamState.zeros(2 * n)
    trace = []
    for s in range(steps):
        step_rng = rng.stream("step", s)
        if batch_size and batch_size < len(ad):
            rows = step_rng.stream("rows").choice(len(ad), batch_size, replace=False)
            x, tgt = ad.inputs[rows], corrected[rows]
        else:
            x, tgt = ad.inputs, corrected
        eps = step_rng.stream("eps").normal(n)
        loss, g_mu, g_rho = prior_loss_and_grad(model, prior, x, tgt, eps)
        if not np.isfinite(loss):
            raise ElboDiverged("prior tuning diverged")
        params, state = adam_step(params, np.concatenate([g_mu, g_rho]), state, lr)
        prior = MeanFieldGaussian(params[:n].copy(), params[n:].copy())
        trace.append(loss)
    return prior, trace


def local_round(client: ClientState, broadcast: np.ndarray | None, cfg: RoundConfig, t: int,
                ad: AlignmentDataset, noise: NoiseScale | None = None) -> LocalResult:
    """One client's share of round ``t``; updates ``client.model`` in place."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    rng = client.rng.stream("round", t)
    model = client.model
    prior_loss = None
    if t >= cfg.lsteps and broadcast is not None:
        own = mc_predict(model, ad.inputs, cfg.k_mc, rng.stream("own"))
        target = corrected_target(broadcast, own, cfg.gamma)
        if cfg.prior_init == "posterior":
            model = replace(model, prior=model.posterior.copy())
        prior, trace = tune_prior(model, target, ad, cfg.prior_steps, cfg.prior_lr,
                                  rng.stream("prior"), cfg.prior_batch_size)
        model = replace(model, prior=prior)
        prior_loss = trace[-1] if trace else None
    model, trace = train_local_bbb(model, client.train.features, client.train.labels,
                                   cfg.local_epochs, cfg.local_lr, cfg.batch_size,
                                   rng.stream("local"), cfg.mc_samples)
    client.model = model
    release = mc_predict(model, ad.inputs, cfg.k_mc, rng.stream("release"))
    if cfg.dp_enabled:
        if noise is None:
            raise ValueError("dp_enabled requires a noise scale")
        release = privatize_output(release, noise, rng.stream("dp"))
    return LocalResult(client.id, release, trace[-1] if trace else None, prior_loss)


def pretrain_clients(clients: Sequence[ClientState], epochs: int, cfg: RoundConfig,
                     workers: int = 1) -> list[ClientState]:
    """Personal Bayes-by-Backprop training before any collaboration."""
    def work(c: ClientState):
        c.model, _ = train_local_bbb(c.model, c.train.features, c.train.labels, epochs,
                                     cfg.local_lr, cfg.batch_size, c.rng.stream("pretrain"),
                                     cfg.mc_samples)
        return c
    return _fan_out(work, list(clients), workers)


def evaluate_client(client: ClientState, k_mc: int, tag) -> tuple[float, float, np.ndarray]:
    probs = mc_predict(client.model, client.test.features, k_mc, client.rng.stream("eval", tag))
    return accuracy(probs, client.test.labels), float(probs.max(axis=1).mean()), probs


def _fan_out(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def select_clients(n: int, fraction: float, rng: SeededRng) -> list[int]:
    k = math.ceil(fraction * n)
    if k >= n:
        return list(range(n))
    return sorted(int(i) for i in rng.choice(n, k, replace=False))


@dataclass
class FedRunResult:
    records: list[RoundRecord]
    clients: list[ClientState]
    server: ServerState


def run_fedbnn(clients: Sequence[ClientState], server: ServerState, cfg: RoundConfig, rounds: int,
               workers: int = 1, collaborate: bool = True,
               on_round: Callable[[RoundRecord], None] | None = None) -> FedRunResult:
    """Server loop. With ``collaborate=False`` nothing is broadcast (isolated training)."""
    if not clients:
        raise ValueError("need at least one client")
    clients = list(clients)
    records = []
    for t in range(server.round + 1, server.round + rounds + 1):
        chosen = select_clients(len(clients), cfg.client_fraction, server.rng.stream("select", t))
        broadcast = server.aggregated if collaborate else None
        results = _fan_out(
            lambda i: local_round(clients[i], broadcast, cfg, t, server.ad, server.noise),
            chosen, workers)
        results.sort(key=lambda r: r.client_id)
        if collaborate:
            w = [clients[r.client_id].agg_weight for r in results]
            server.aggregated = weighted_aggregate([r.release for r in results], w)
        server.round = t
        evals = _fan_out(lambda c: evaluate_client(c, cfg.eval_k_mc, t), clients, workers)
        by_id = {r.client_id: r for r in results}
        rec = RoundRecord(
            round=t,
            test_acc={c.id: e[0] for c, e in zip(clients, evals)},
            mean_conf={c.id: e[1] for c, e in zip(clients, evals)},
            bytes_uploaded={c.id: len(by_id[c.id].payload) if c.id in by_id else 0
                            for c in clients},
            local_loss={c.id: by_id[c.id].local_loss if c.id in by_id else None for c in clients},
            prior_loss={c.id: by_id[c.id].prior_loss if c.id in by_id else None for c in clients},
        )
        log.info("round %d: mean acc %.4f", t, rec.mean_acc)
        records.append(rec)
        if on_round:
            on_round(rec)
    return FedRunResult(records, clients, server)


# --------------------------------------------------------------------------
# baselines


def fedavg_round(models: Sequence[np.ndarray], weights: Sequence[float],
                 local_train: Callable[[int, np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Weighted parameter average, after ``local_train(i, w_i)`` if given."""
    if len(models) == 0:
        raise ValueError("no models to average")
    n = models[0].shape
    if any(m.shape != n for m in models):
        raise ValueError("architecture mismatch: weight vectors differ in length")
    trained = [local_train(i, m) if local_train else m for i, m in enumerate(models)]
    w = normalize_weights(weights)
    out = w[0] * trained[0]
    for wj, m in zip(w[1:], trained[1:]):
        out = out + wj * m
    return out


def clip_update(new: np.ndarray, reference: np.ndarray, clip_norm: float) -> np.ndarray:
    """Project ``new`` so that ``new - reference`` has L2 norm at most ``clip_norm``."""
    delta = new - reference
    norm = float(np.linalg.norm(delta))
    if norm <= clip_norm:
        return new
    return reference + delta * (clip_norm / norm)


def dp_fedavg_round(models: Sequence[np.ndarray], clip_norm: float, sigma: float,
                    weights: Sequence[float], rng: SeededRng, reference: np.ndarray | None = None,
                    local_train: Callable[[int, np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """FedAvg with per-client update clipping and N(0, (sigma*C)^2) noise on the average."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    ref = models[0] if reference is None else reference
    trained = [local_train(i, m) if local_train else m for i, m in enumerate(models)]
    clipped = [clip_update(m, ref, clip_norm) for m in trained]
    avg = fedavg_round(clipped, weights)
    if sigma > 0:
        avg = avg + sigma * clip_norm * rng.normal(avg.shape)
    return avg


@dataclass
class BaselineClient:
    id: int
    train: LabeledDataset
    test: LabeledDataset
    rng: SeededRng
    adam: AdamState | None = None


def run_fedavg(clients: Sequence[BaselineClient], arch: MlpArchitecture, rounds: int,
               local_epochs: int, lr: float, batch_size: int, seed: int,
               clip_norm: float | None = None, noise_multiplier: float = 0.0,
               weights: Sequence[float] | None = None) -> tuple[np.ndarray, list[RoundRecord]]:
    """FedAvg (or DP-FedAvg when ``clip_norm`` is set) with a deterministic MLP.

    Client optimizer state persists across rounds.
    """
    root = SeededRng(seed).stream("fedavg")
    glob = arch.init_weights(root.stream("init"))
    w = weights if weights is not None else [len(c.train) for c in clients]
    records = []
    for r in range(rounds):
        def local(i, start):
            c = clients[i]
            new, c.adam, _ = train_deterministic(arch, start, c.train.features, c.train.labels,
                                                 local_epochs, lr, batch_size, c.rng,
                                                 c.adam, epoch_offset=r * local_epochs)
            return new
        starts = [glob] * len(clients)
        if clip_norm is None:
            glob = fedavg_round(starts, w, local)
        else:
            glob = dp_fedavg_round(starts, clip_norm, noise_multiplier, w,
                                   root.stream("noise", r), glob, local)
        accs = {c.id: accuracy(predict_proba(arch, glob, c.test.features), c.test.labels)
                for c in clients}
        confs = {c.id: float(predict_proba(arch, glob, c.test.features).max(axis=1).mean())
                 for c in clients}
        nbytes = arch.n_weights * BYTES_PER_VALUE
        records.append(RoundRecord(r + 1, accs, confs, {c.id: nbytes for c in clients},
                                   {c.id: None for c in clients}, {c.id: None for c in clients}))
    return glob, records
