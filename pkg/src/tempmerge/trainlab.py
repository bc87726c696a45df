"""Contrastive fine-tuning with in-batch negatives, and the query router.

Gradients are derived by hand for the mean-pool + affine encoder; every
trainable tensor gets an exact analytic gradient which the tests check
against central finite differences.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .encoder import (EncoderParams, LoraAdapter, affine, effective_weight, encode_batch,
                      pooling_matrix)

log = logging.getLogger(__name__)

MODES = ("full", "lora", "full_regularized")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainExample:
    query: Tuple[int, ...]
    positive: Tuple[int, ...]
    query_id: str = ""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = 64
    temperature: float = 1.0
    negatives: int = 5
    weight_decay: float = 0.01
    dropout_rate: float = 0.1
    seed: int = 0
    eval_every: int = 50
    mode: str = "full"
    lora_rank: int = 4
    lora_alpha: float = 8.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.batch_size <= self.negatives:
            raise ValueError(f"batch_size ({self.batch_size}) must exceed negatives ({self.negatives})")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def regularized(self) -> bool:
        return self.mode == "full_regularized"

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in kinds:
                raise ValueError(f"unknown train config key {k!r}")
            t = kinds[k]
            out[k] = v if not isinstance(v, str) else (
                int(v) if t == "int" else float(v) if t == "float" else v)
        return cls(**out)

    @classmethod
    def read(cls, path) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            values[k] = v
        return cls.from_mapping(values)


# -- loss ----------------------------------------------------------------------

def info_nce_loss(q: np.ndarray, pos: np.ndarray, negs: Sequence[np.ndarray], tau: float) -> float:
    """InfoNCE of one query against its positive and ``n`` negatives."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if len(negs) < 1:
        raise ValueError("need at least one negative")
    cands = np.vstack([pos] + list(negs))
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(cands))):
        raise ValueError("non-finite embedding")
    logits = cands @ q / tau
    top = logits.max()
    if logits[0] == top:
        # log1p keeps precision when the positive dominates
        return float(np.log1p(np.exp(logits[1:] - top).sum()))
    return float(top - logits[0] + np.log(np.exp(logits - top).sum()))


def _candidate_columns(batch: int, n: int) -> np.ndarray:
    """``cols[i, c]`` is the batch member whose positive is candidate ``c`` of query ``i``."""
    return (np.arange(batch)[:, None] + np.arange(n + 1)[None, :]) % batch


def _batch_loss_and_dlogits(Q: np.ndarray, P: np.ndarray, n: int, tau: float):
    B = Q.shape[0]
    cols = _candidate_columns(B, n)
    logits = np.einsum("id,icd->ic", Q, P[cols]) / tau
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    z = ex.sum(axis=1, keepdims=True)
    losses = (top[:, 0] + np.log(z[:, 0])) - logits[:, 0]
    probs = ex / z
    probs[:, 0] -= 1.0
    return losses, probs, cols


def loss_gradients(params: EncoderParams, adapter: Optional[LoraAdapter],
                   batch: Sequence[TrainExample], config: TrainConfig,
                   dropout_rng: Optional[np.random.Generator] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean batch InfoNCE and its gradient w.r.t. every trainable tensor.

    Query ``i`` is scored against its own positive and the positives of the
    next ``negatives`` batch members (cyclically).  In ``lora`` mode only the
    adapter factors get gradients; otherwise ``embed``, ``proj_w``, ``proj_b``.
    """
    B, n, tau = len(batch), config.negatives, config.temperature
    if n >= B:
        raise ValueError(f"negatives ({n}) must be < batch size ({B})")
    V = params.vocab_size
    Sq = pooling_matrix([ex.query for ex in batch], V)
    Sp = pooling_matrix([ex.positive for ex in batch], V)
    Mq = np.asarray(Sq @ params.embed)
    Mp = np.asarray(Sp @ params.embed)

    keep_q = keep_p = None
    if config.regularized and config.dropout_rate > 0:
        rng = dropout_rng if dropout_rng is not None else np.random.default_rng(config.seed)
        scale = 1.0 / (1.0 - config.dropout_rate)
        keep_q = (rng.random(Mq.shape) >= config.dropout_rate) * scale
        keep_p = (rng.random(Mp.shape) >= config.dropout_rate) * scale
        Mq = Mq * keep_q
        Mp = Mp * keep_p

    W = effective_weight(params, adapter)
    b = params.proj_b
    Q = affine(Mq, W, b)
    P = affine(Mp, W, b)

    losses, dlogits, cols = _batch_loss_and_dlogits(Q, P, n, tau)
    if not np.all(np.isfinite(losses)):
        raise TrainingError("non-finite loss")
    G = dlogits / (tau * B)
    dS = np.zeros((B, B))
    np.add.at(dS, (np.repeat(np.arange(B), n + 1), cols.ravel()), G.ravel())
    dQ = dS @ P
    dP = dS.T @ Q

    dW = dQ.T @ Mq + dP.T @ Mp
    grads: Dict[str, np.ndarray] = {}
    if config.mode == "lora":
        if adapter is None:
            raise ValueError("lora mode needs an adapter")
        s = adapter.scale
        grads["lora_A"] = s * adapter.B.T @ dW
        grads["lora_B"] = s * dW @ adapter.A.T
        return float(losses.mean()), grads

    dMq = dQ @ W
    dMp = dP @ W
    if keep_q is not None:
        dMq = dMq * keep_q
        dMp = dMp * keep_p
    grads["embed"] = np.asarray(Sq.T @ dMq + Sp.T @ dMp)
    grads["proj_w"] = dW
    grads["proj_b"] = dQ.sum(axis=0) + dP.sum(axis=0)
    return float(losses.mean()), grads


def batch_loss(params: EncoderParams, adapter: Optional[LoraAdapter],
               batch: Sequence[TrainExample], config: TrainConfig) -> float:
    """Mean batch InfoNCE without dropout (used for finite-difference checks and traces)."""
    cfg = replace(config, mode="full") if config.mode == "full_regularized" else config
    Q = encode_batch(params, [ex.query for ex in batch], adapter)
    P = encode_batch(params, [ex.positive for ex in batch], adapter)
    losses, _, _ = _batch_loss_and_dlogits(Q, P, cfg.negatives, cfg.temperature)
    return float(losses.mean())


# -- optimizer -----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay (decay applied as ``p -= lr * wd * p``)."""

    def __init__(self, tensors: Dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = tensors
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.tensors.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def linear_schedule(base_lr: float, step: int, total: int) -> float:
    """Linear decay from ``base_lr`` at step 0 towards 0 at ``total``; no warmup."""
    return base_lr * max(0.0, 1.0 - step / max(total, 1))


# -- training loop ---------------------------------------------------------------

@dataclass
class DevSet:
    """Queries with gold index sets, scored against every passage for top-1 accuracy."""
    queries: List[Tuple[int, ...]]
    gold: List[frozenset]           # indices into ``passages``
    passages: List[Tuple[int, ...]]

    def top1(self, params: EncoderParams, adapter: Optional[LoraAdapter] = None) -> float:
        if not self.queries:
            return float("nan")
        Q = encode_batch(params, self.queries, adapter)
        P = encode_batch(params, self.passages, adapter)
        scores = Q @ P.T
        # ties resolve to the lowest passage index, matching the search tie-break
        best = np.argmax(scores, axis=1)
        return float(np.mean([int(b) in g for b, g in zip(best, self.gold)]))


@dataclass
class TraceRow:
    step: int
    loss: float
    dev_top1: float


@dataclass
class TrainResult:
    params: EncoderParams
    adapter: Optional[LoraAdapter]
    best_step: int
    best_dev_top1: float
    trace: List[TraceRow] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def merged(self) -> EncoderParams:
        from .encoder import materialize_lora
        return self.params if self.adapter is None else materialize_lora(self.params, self.adapter)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "dev_top1"])
            for r in self.trace:
                w.writerow([r.step, repr(r.loss), "" if math.isnan(r.dev_top1) else repr(r.dev_top1)])


def _batches(n_examples: int, config: TrainConfig, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([config.seed, epoch]).permutation(n_examples)
    out = []
    for start in range(0, n_examples, config.batch_size):
        idx = order[start: start + config.batch_size]
        if len(idx) > config.negatives:   # a trailing batch too small for n negatives is dropped
            out.append(idx)
    return out


def train(base: EncoderParams, data: Sequence[TrainExample], config: TrainConfig,
          dev: Optional[DevSet] = None, adapter: Optional[LoraAdapter] = None) -> TrainResult:
    """Fine-tune ``base`` and return the best checkpoint by dev top-1 accuracy.

    ``base`` is never mutated.  Without a dev set the final state is returned.
    """
    if len(data) == 0:
        raise ValueError("empty training data")
    if len(data) <= config.negatives:
        raise ValueError(f"need more than {config.negatives} examples for in-batch negatives")
    params = base.copy()
    if config.mode == "lora":
        adapter = adapter or LoraAdapter.init(base.dim, config.lora_rank, config.lora_alpha, config.seed)
        adapter = LoraAdapter(adapter.A.copy(), adapter.B.copy(), adapter.alpha, adapter.target)
        tensors = {"lora_A": adapter.A, "lora_B": adapter.B}
        wd = 0.0
    else:
        adapter = None
        tensors = params.tensors()
        wd = config.weight_decay if config.regularized else 0.0
    opt = AdamW(tensors, config.learning_rate, wd, config.beta1, config.beta2, config.eps)

    epochs = [_batches(len(data), config, e) for e in range(config.epochs)]
    total = sum(len(b) for b in epochs)
    if total == 0:
        raise ValueError("no complete batch; lower batch_size or add data")

    def snapshot():
        a = None if adapter is None else LoraAdapter(adapter.A.copy(), adapter.B.copy(),
                                                     adapter.alpha, adapter.target)
        return params.copy(), a

    best = None
    best_score = -1.0
    best_step = 0
    trace: List[TraceRow] = []
    losses: List[float] = []
    step = 0
    for batches in epochs:
        for idx in batches:
            batch = [data[i] for i in idx]
            rng = np.random.default_rng([config.seed, step, 0xD50])
            try:
                loss, grads = loss_gradients(params, adapter, batch, config, rng)
            except TrainingError:
                raise TrainingError(f"non-finite loss at step {step}") from None
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            opt.step(grads, linear_schedule(config.learning_rate, step, total))
            for k, t in tensors.items():
                if not np.all(np.isfinite(t)):
                    raise TrainingError(f"non-finite parameter {k} after step {step}")
            step += 1
            losses.append(loss)
            if dev is not None and (step % config.eval_every == 0 or step == total):
                acc = dev.top1(params, adapter)
                trace.append(TraceRow(step, loss, acc))
                log.debug("step %d loss %.4f dev_top1 %.4f", step, loss, acc)
                if acc > best_score:
                    best_score, best_step = acc, step
                    best = snapshot()
            elif step % config.eval_every == 0 or step == total:
                trace.append(TraceRow(step, loss, float("nan")))
    if best is None:
        best = snapshot()
        best_step = step
        best_score = float("nan")
    return TrainResult(best[0], best[1], best_step, best_score, trace, losses)


# -- router ---------------------------------------------------------------------

@dataclass
class RouterParams:
    W1: np.ndarray  # [h, d]
    b1: np.ndarray  # [h]
    W2: np.ndarray  # [2, h]
    b2: np.ndarray  # [2]

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite router tensor {name}")
            setattr(self, name, arr)
        if self.W1.shape[0] < 1 or self.W2.shape != (2, self.W1.shape[0]):
            raise ValueError("inconsistent router shapes")

    def tensors(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def logits(self, X: np.ndarray) -> np.ndarray:
        H = np.tanh(np.atleast_2d(X) @ self.W1.T + self.b1)
        return H @ self.W2.T + self.b2

    def predict(self, X: np.ndarray) -> np.ndarray:
        """1 for temporal, 0 for non-temporal."""
        return np.argmax(self.logits(X), axis=1)

    def save(self, path) -> None:
        np.savez(path, **self.tensors())

    @classmethod
    def load(cls, path) -> "RouterParams":
        with np.load(path) as z:
            return cls(z["W1"], z["b1"], z["W2"], z["b2"])


@dataclass
class RouterConfig:
    hidden: int = 32
    learning_rate: float = 1e-2
    epochs: int = 200
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 5


def router_loss_gradients(router: RouterParams, X: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and gradients of the two-layer router."""
    N = X.shape[0]
    A = X @ router.W1.T + router.b1
    H = np.tanh(A)
    Z = H @ router.W2.T + router.b2
    top = Z.max(axis=1, keepdims=True)
    ex = np.exp(Z - top)
    z = ex.sum(axis=1, keepdims=True)
    loss = float(np.mean(top[:, 0] + np.log(z[:, 0]) - Z[np.arange(N), y]))
    dZ = ex / z
    dZ[np.arange(N), y] -= 1.0
    dZ /= N
    dH = dZ @ router.W2
    dA = dH * (1.0 - H * H)
    return loss, {"W1": dA.T @ X, "b1": dA.sum(axis=0), "W2": dZ.T @ H, "b2": dZ.sum(axis=0)}


def _fold_standardization(router: RouterParams, mu: np.ndarray, sd: np.ndarray) -> RouterParams:
    W1 = router.W1 / sd[None, :]
    return RouterParams(W1, router.b1 - W1 @ mu, router.W2.copy(), router.b2.copy())


def train_router_on_embeddings(X_t: np.ndarray, X_n: np.ndarray, config: RouterConfig,
                               dev: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[RouterParams, float]:
    """Fit the temporal/non-temporal classifier; returns ``(router, best dev accuracy)``.

    Inputs are standardized for training and the standardization is folded
    back into the first layer, so the returned router takes raw embeddings.
    """
    if len(X_t) == 0 or len(X_n) == 0:
        raise ValueError("router training needs both temporal and non-temporal examples")
    X = np.vstack([X_t, X_n])
    y = np.concatenate([np.ones(len(X_t), dtype=int), np.zeros(len(X_n), dtype=int)])
    return fit_router(X, y, config, dev)


def fit_router(X: np.ndarray, y: np.ndarray, config: RouterConfig,
               dev: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[RouterParams, float]:
    y = np.asarray(y, dtype=int)
    if len(np.unique(y)) < 2:
        raise ValueError("router training needs both classes")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    rng = np.random.default_rng(config.seed)
    d, h = X.shape[1], config.hidden
    router = RouterParams(rng.standard_normal((h, d)) / np.sqrt(d), np.zeros(h),
                          rng.standard_normal((2, h)) / np.sqrt(h), np.zeros(2))
    tensors = router.tensors()
    opt = AdamW(tensors, config.learning_rate, config.weight_decay)
    if dev is None:
        dev = (X, y)
    Xd, yd = dev
    best, best_acc = None, -1.0
    for epoch in range(config.epochs):
        _, grads = router_loss_gradients(router, Xs, y)
        opt.step(grads)
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            folded = _fold_standardization(router, mu, sd)
            acc = float(np.mean(folded.predict(Xd) == np.asarray(yd)))
            if acc > best_acc:
                best, best_acc = folded, acc
    return best, best_acc


def train_router(temporal: Sequence[Sequence[int]], nontemporal: Sequence[Sequence[int]],
                 vanilla: EncoderParams, config: RouterConfig,
                 dev: Optional[Tuple[Sequence[Sequence[int]], Sequence[Sequence[int]]]] = None):
    """Router over frozen vanilla query embeddings (token-id lists in, router out)."""
    if len(temporal) == 0 or len(nontemporal) == 0:
        raise ValueError("router training needs both temporal and non-temporal queries")
    X_t = encode_batch(vanilla, temporal)
    X_n = encode_batch(vanilla, nontemporal)
    dev_xy = None
    if dev is not None:
        dt, dn = dev
        Xd = np.vstack([encode_batch(vanilla, dt), encode_batch(vanilla, dn)])
        dev_xy = (Xd, np.concatenate([np.ones(len(dt), dtype=int), np.zeros(len(dn), dtype=int)]))
    return train_router_on_embeddings(X_t, X_n, config, dev_xy)
