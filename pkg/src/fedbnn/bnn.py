"""Mean-field Gaussian BNNs trained with Bayes-by-Backprop."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .nn_core import (AdamState, MlpArchitecture, adam_step, batches, log_softmax,
                      mlp_backward, mlp_forward, one_hot, softmax)
from .rng import SeededRng

SIGMA_MIN = 1e-30
CHECKPOINT_VERSION = 1


class ElboDiverged(FloatingPointError):
    pass


def softplus_sigma(rho_raw) -> np.ndarray:
    """``log(1 + exp(rho))`` without overflow, clamped away from zero."""
    r = np.asarray(rho_raw, dtype=np.float64)
    big = r > 30.0
    small = np.log1p(np.exp(np.minimum(r, 30.0)))
    large = r + np.log1p(np.exp(-np.maximum(r, 30.0)))
    return np.maximum(np.where(big, large, small), SIGMA_MIN)


def softplus_grad(rho_raw) -> np.ndarray:
    """d softplus / d rho, i.e. the logistic sigmoid."""
    r = np.asarray(rho_raw, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * r))


@dataclass
class MeanFieldGaussian:
    mu: np.ndarray
    rho_raw: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho_raw = np.asarray(self.rho_raw, dtype=np.float64)
        if self.mu.shape != self.rho_raw.shape or self.mu.ndim != 1:
            raise ValueError("mu and rho_raw must be 1-d vectors of equal length")

    @property
    def sigma(self) -> np.ndarray:
        return softplus_sigma(self.rho_raw)

    def __len__(self):
        return self.mu.shape[0]

    def copy(self) -> "MeanFieldGaussian":
        return MeanFieldGaussian(self.mu.copy(), self.rho_raw.copy())

    @classmethod
    def isotropic(cls, n: int, mu: float = 0.0, sigma: float = 1.0) -> "MeanFieldGaussian":
        return cls(np.full(n, mu), np.full(n, inverse_softplus(sigma)))


def inverse_softplus(sigma: float) -> float:
    return float(sigma + np.log(-np.expm1(-sigma)))


@dataclass
class PosteriorSample:
    weights: np.ndarray
    eps: np.ndarray


@dataclass
class BnnModel:
    arch: MlpArchitecture
    posterior: MeanFieldGaussian
    prior: MeanFieldGaussian
    seed: int = 0

    def __post_init__(self):
        n = self.arch.n_weights
        if len(self.posterior) != n or len(self.prior) != n:
            raise ValueError(f"posterior/prior length must equal the weight count {n}")

    @classmethod
    def init(cls, arch: MlpArchitecture, rng: SeededRng, rho_init: float = -3.0,
             prior_sigma: float = 1.0) -> "BnnModel":
        mu = arch.init_weights(rng)
        post = MeanFieldGaussian(mu, np.full(arch.n_weights, rho_init))
        return cls(arch, post, MeanFieldGaussian.isotropic(arch.n_weights, 0.0, prior_sigma),
                   seed=rng.seed)

    def copy(self) -> "BnnModel":
        return BnnModel(self.arch, self.posterior.copy(), self.prior.copy(), self.seed)


def sample_weights(q: MeanFieldGaussian, rng: SeededRng) -> PosteriorSample:
    eps = rng.normal(len(q))
    return PosteriorSample(q.mu + q.sigma * eps, eps)


# --------------------------------------------------------------------------
# KL between diagonal Gaussians


def kl_mean_field(q: MeanFieldGaussian, p: MeanFieldGaussian) -> float:
    if len(q) != len(p):
        raise ValueError("length mismatch between q and p")
    sq, sp = q.sigma, p.sigma
    d = q.mu - p.mu
    terms = np.log(sp / sq) + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
    return float(np.sum(terms))


@dataclass
class KlGradients:
    mu_q: np.ndarray
    rho_q: np.ndarray
    mu_p: np.ndarray
    rho_p: np.ndarray


def kl_gradients(q: MeanFieldGaussian, p: MeanFieldGaussian) -> KlGradients:
    if len(q) != len(p):
        raise ValueError("length mismatch between q and p")
    sq, sp = q.sigma, p.sigma
    d = q.mu - p.mu
    sp2 = sp * sp
    g_sq = -1.0 / sq + sq / sp2
    g_sp = 1.0 / sp - (sq * sq + d * d) / (sp2 * sp)
    return KlGradients(
        mu_q=d / sp2,
        rho_q=g_sq * softplus_grad(q.rho_raw),
        mu_p=-d / sp2,
        rho_p=g_sp * softplus_grad(p.rho_raw),
    )


# --------------------------------------------------------------------------
# ELBO


@dataclass
class ElboResult:
    loss: float
    grad_mu: np.ndarray
    grad_rho: np.ndarray
    kl: float
    nll: float


def sampled_nll(arch: MlpArchitecture, weights: np.ndarray, x: np.ndarray, targets: np.ndarray):
    """Summed soft-target cross-entropy of one weight draw, and dloss/dweights."""
    logits, cache = mlp_forward(arch, weights, x)
    logp = log_softmax(logits)
    nll = float(-np.sum(targets * logp))
    g_logits = np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets
    return nll, mlp_backward(arch, weights, cache, g_logits)


def elbo_loss(model: BnnModel, x: np.ndarray, labels: np.ndarray, rng: SeededRng | None,
              mc_samples: int = 2, kl_weight: float = 1.0,
              eps: list[np.ndarray] | None = None) -> ElboResult:
    """``kl_weight * KL[q||p] - E_q[log p(batch | w)]``, Monte-Carlo estimated.

    The data term is the batch's summed log-likelihood averaged over
    ``mc_samples`` reparameterized draws; pass ``eps`` to freeze the draws.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    if kl_weight < 0:
        raise ValueError("kl_weight must be non-negative")
    q = model.posterior
    sigma = q.sigma
    dsig = softplus_grad(q.rho_raw)
    y = one_hot(labels, model.arch.n_classes)
    if eps is None:
        eps = [rng.stream("mc", s).normal(len(q)) for s in range(mc_samples)]
    g_mu = np.zeros(len(q))
    g_rho = np.zeros(len(q))
    nll = 0.0
    for e in eps:
        w = q.mu + sigma * e
        val, gw = sampled_nll(model.arch, w, x, y)
        nll += val
        g_mu += gw
        g_rho += gw * e
    s = len(eps)
    nll /= s
    g_mu /= s
    g_rho *= dsig / s
    kl = kl_mean_field(q, model.prior) if kl_weight > 0 else 0.0
    if kl_weight > 0:
        kg = kl_gradients(q, model.prior)
        g_mu += kl_weight * kg.mu_q
        g_rho += kl_weight * kg.rho_q
    loss = kl_weight * kl + nll
    if not np.isfinite(loss):
        raise ElboDiverged("ELBO diverged")
    return ElboResult(loss, g_mu, g_rho, kl, nll)


def train_local_bbb(model: BnnModel, x: np.ndarray, labels: np.ndarray, epochs: int,
                    lr: float, batch_size: int, rng: SeededRng,
                    mc_samples: int = 2) -> tuple[BnnModel, list[float]]:
    """Adam on the posterior only; the prior stays frozen.

    Each minibatch carries ``1 / n_minibatches`` of the KL term so one epoch
    sees the full KL once. Returns the updated copy and the per-epoch mean loss.
    """
    model = model.copy()
    if epochs <= 0:
        return model, []
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty shard")
    n = len(model.posterior)
    n_batches = -(-x.shape[0] // batch_size)
    kl_weight = 1.0 / n_batches
    params = np.concatenate([model.posterior.mu, model.posterior.rho_raw])
    state = AdamState.zeros(2 * n)
    trace = []
    for epoch in range(epochs):
        ep_rng = rng.stream("epoch", epoch)
        losses = []
        for b, idx in enumerate(batches(x.shape[0], batch_size, ep_rng.stream("order"))):
            res = elbo_loss(model, x[idx], labels[idx], ep_rng.stream("batch", b),
                            mc_samples, kl_weight)
            params, state = adam_step(params, np.concatenate([res.grad_mu, res.grad_rho]),
                                      state, lr)
            model.posterior = MeanFieldGaussian(params[:n].copy(), params[n:].copy())
            losses.append(res.loss)
        if not np.all(model.posterior.sigma > 0):
            raise ElboDiverged("posterior sigma collapsed to zero")
        trace.append(float(np.mean(losses)))
    return model, trace


# --------------------------------------------------------------------------
# prediction


def mc_predict(model: BnnModel, x: np.ndarray, k_mc: int, rng: SeededRng,
               dist: MeanFieldGaussian | None = None) -> np.ndarray:
    """Average of per-draw softmax outputs over ``k_mc`` weight draws."""
    if k_mc < 1:
        raise ValueError("k_mc must be >= 1")
    q = dist if dist is not None else model.posterior
    acc = np.zeros((x.shape[0], model.arch.n_classes))
    for j in range(k_mc):
        w = sample_weights(q, rng.stream("draw", j)).weights
        acc += softmax(mlp_forward(model.arch, w, x)[0])
    return acc / k_mc


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: BnnModel, path) -> None:
    meta = {"version": CHECKPOINT_VERSION, "widths": list(model.arch.widths), "seed": model.seed}
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             mu=model.posterior.mu, rho_raw=model.posterior.rho_raw,
             prior_mu=model.prior.mu, prior_rho_raw=model.prior.rho_raw)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> BnnModel:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        return BnnModel(
            MlpArchitecture(tuple(meta["widths"])),
            MeanFieldGaussian(z["mu"].copy(), z["rho_raw"].copy()),
            MeanFieldGaussian(z["prior_mu"].copy(), z["prior_rho_raw"].copy()),
            seed=int(meta["seed"]),
        )
