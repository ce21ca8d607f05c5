"""Deterministic mini-batch training loop with adaptive loss weighting.

Each step encodes both sides of a pair batch once, runs one backward pass per
enabled loss term to measure gradient magnitudes (reusing the shared forward
tape), updates the loss weights, then backpropagates the weighted total and
applies a decoupled-weight-decay Adam update.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine, losses, model, weighting
from .data import DataError, ProductPairRecord
from .engine import NumericError
from .losses import LOSS_NAMES, BatchEmbeddings, LossConfig, PairBatch
from .model import ModelConfig
from .weighting import LossWeightState

CKPT_MAGIC = b"UECK"
CKPT_VERSION = 1


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 500
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weighting_beta: float = 0.5
    lambda_init: float = 1.0
    weighting_stride: int = 1
    disable_cmal: bool = False
    disable_clal: bool = False
    disable_imcl: bool = False
    disable_gating: bool = False
    fixed_weights: bool = False
    checkpoint_every: int = 0
    log_wall_time: bool = False
    check_grad_consistency: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (pairwise losses need negatives)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.weighting_stride < 1:
            raise ValueError("weighting_stride must be >= 1")
        if not 0.0 <= self.weighting_beta <= 1.0:
            raise ValueError("weighting_beta must lie in [0, 1]")
        if self.lambda_init <= 0:
            raise ValueError("lambda_init must be > 0")


def make_batches(n_pairs: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded per-epoch shuffle chunked into batches; a trailing chunk of
    fewer than 2 pairs is dropped."""
    if n_pairs < 1:
        raise DataError("empty dataset")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n_pairs)
    out = []
    for start in range(0, n_pairs, batch_size):
        chunk = perm[start:start + batch_size]
        if chunk.size >= 2:
            out.append(chunk)
    return out


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   moments: AdamState, cfg: TrainConfig, t: int) -> None:
    """Bias-corrected Adam with decoupled weight decay applied to the
    parameter before the moment-based update term."""
    if t < 1:
        raise ValueError("step count t starts at 1")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise engine.ShapeError(f"gradient shape {g.shape} != {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if name not in moments.m:
            moments.m[name] = np.zeros_like(p)
            moments.v[name] = np.zeros_like(p)
        if cfg.weight_decay != 0.0:
            p -= cfg.learning_rate * cfg.weight_decay * p
        m = moments.m[name]
        v = moments.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    weight_state: LossWeightState
    moments: AdamState
    step: int
    config_hash: str
    config: dict | None = None


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, arr in ckpt.params.items():
        tensors.append((f"p:{name}", arr))
    for name, arr in ckpt.moments.m.items():
        tensors.append((f"m:{name}", arr))
    for name, arr in ckpt.moments.v.items():
        tensors.append((f"v:{name}", arr))
    tensors.append(("lambdas", ckpt.weight_state.lambdas))
    header = {
        "step": ckpt.step,
        "config_hash": ckpt.config_hash,
        "config": ckpt.config,
        "weight_beta": ckpt.weight_state.beta,
        "weight_step": ckpt.weight_state.step,
        "tensors": [[name, list(arr.shape), str(arr.dtype)] for name, arr in tensors],
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", blob[8:16])[0]
    if 16 + header_len > len(blob):
        raise DataError(f"{path}: truncated checkpoint header")
    header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    off = 16 + header_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape, dtype in header["tensors"]:
        nbytes = int(np.dtype(dtype).itemsize * int(np.prod(shape or [1])))
        if off + nbytes > len(blob):
            raise DataError(f"{path}: truncated checkpoint payload at {name!r}")
        arrays[name] = np.frombuffer(
            blob[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")
    params = {k[2:]: v for k, v in arrays.items() if k.startswith("p:")}
    moments = AdamState(
        m={k[2:]: v for k, v in arrays.items() if k.startswith("m:")},
        v={k[2:]: v for k, v in arrays.items() if k.startswith("v:")},
    )
    state = LossWeightState(lambdas=arrays["lambdas"], beta=header["weight_beta"],
                            step=header["weight_step"])
    return Checkpoint(params=params, weight_state=state, moments=moments,
                      step=header["step"], config_hash=header["config_hash"],
                      config=header.get("config"))


# ---------------------------------------------------------------------------
# training loop

def _global_grad_norm(values: dict[str, engine.Value]) -> float:
    total = 0.0
    for v in values.values():
        if v.grad is not None:
            g = v.grad
            total += float(np.dot(g.reshape(-1).astype(np.float64),
                                  g.reshape(-1).astype(np.float64)))
    return float(np.sqrt(total))


def _zero_grads(values: dict[str, engine.Value]) -> None:
    for v in values.values():
        v.zero_grad()


def _collect_grads(values: dict[str, engine.Value]) -> dict[str, np.ndarray]:
    return {k: (v.grad.copy() if v.grad is not None else np.zeros_like(v.data))
            for k, v in values.items()}


def train(records: list[ProductPairRecord], model_cfg: ModelConfig,
          loss_cfg: LossConfig, train_cfg: TrainConfig, *,
          params: dict[str, np.ndarray] | None = None,
          resume: Checkpoint | None = None,
          config_hash: str = "", config: dict | None = None,
          log_fn=None, checkpoint_fn=None) -> tuple[Checkpoint, list[dict]]:
    """Run the loop; returns the final checkpoint and the per-step metrics.

    `log_fn(record)` streams each metrics line; `checkpoint_fn(ckpt)` fires at
    the configured interval. Everything is deterministic under
    (seed, config, data) in single-threaded numpy.
    """
    if len(records) < 2:
        raise DataError("training needs at least 2 pairs")
    mask = losses.ablation_mask(train_cfg.disable_cmal, train_cfg.disable_clal,
                                train_cfg.disable_imcl)
    skip = {n for n, keep in zip(LOSS_NAMES, mask) if keep == 0.0}

    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        moments = AdamState(m={k: v.copy() for k, v in resume.moments.m.items()},
                            v={k: v.copy() for k, v in resume.moments.v.items()})
        state = LossWeightState(lambdas=resume.weight_state.lambdas.copy(),
                                beta=resume.weight_state.beta,
                                step=resume.weight_state.step)
        start_step = resume.step
    else:
        if params is None:
            params = model.init_params(model_cfg, seed=train_cfg.seed)
        moments = AdamState()
        state = LossWeightState(lambdas=train_cfg.lambda_init * mask,
                                beta=train_cfg.weighting_beta)
        start_step = 0

    metrics: list[dict] = []
    step = start_step
    epoch = 0
    to_skip = start_step  # fast-forward the batch stream when resuming
    t0 = time.perf_counter()

    while step < train_cfg.steps:
        batches = make_batches(len(records), train_cfg.batch_size,
                               train_cfg.seed, epoch)
        if not batches:
            raise DataError("batch_size leaves no usable batch")
        for idx in batches:
            if to_skip > 0:
                to_skip -= 1
                continue
            if step >= train_cfg.steps:
                break
            try:
                state = _train_step(records, idx, params, moments, state,
                                    model_cfg, loss_cfg, train_cfg, skip,
                                    step, metrics, log_fn, t0)
            except NumericError as e:
                raise DivergenceError(step, str(e)) from None
            step += 1
            if (checkpoint_fn is not None and train_cfg.checkpoint_every > 0
                    and step % train_cfg.checkpoint_every == 0
                    and step < train_cfg.steps):
                checkpoint_fn(Checkpoint(params, state, moments, step,
                                         config_hash, config))
        epoch += 1

    final = Checkpoint(params=params, weight_state=state, moments=moments,
                       step=step, config_hash=config_hash, config=config)
    return final, metrics


def _train_step(records, idx, params, moments, state, model_cfg, loss_cfg,
                train_cfg, skip, step, metrics, log_fn, t0) -> LossWeightState:
    recs = [records[i] for i in idx]
    bundles = ([r.bundle("trigger") for r in recs]
               + [r.bundle("recall") for r in recs])
    feats = model.batch_features(bundles, model_cfg)
    pv = model.params_as_values(params)
    f, v, t = model.encode_views(pv, feats, model_cfg, train_cfg.disable_gating)

    b = len(recs)
    half1 = np.arange(b)
    half2 = np.arange(b, 2 * b)

    def side(rows, lo, hi):
        return BatchEmbeddings(
            f=engine.take_rows(f, rows), v=engine.take_rows(v, rows),
            t=engine.take_rows(t, rows),
            has_v=np.array([x.has_visual for x in bundles[lo:hi]]),
            has_t=np.array([x.has_textual for x in bundles[lo:hi]]))

    batch = PairBatch(side(half1, 0, b), side(half2, b, 2 * b))
    terms = losses.loss_terms(batch, loss_cfg, skip=skip)

    per_term_grads = {}
    if not train_cfg.fixed_weights and step % train_cfg.weighting_stride == 0:
        norms = np.zeros(weighting.N_TERMS)
        for i, name in enumerate(LOSS_NAMES):
            if name in skip:
                continue
            _zero_grads(pv)
            terms[name].backward()
            norms[i] = _global_grad_norm(pv)
            if train_cfg.check_grad_consistency:
                per_term_grads[name] = _collect_grads(pv)
        state = weighting.update_weights(state, weighting.gradient_shares(norms))
    else:
        state = LossWeightState(lambdas=state.lambdas, beta=state.beta,
                                step=state.step + 1)

    dtype = batch.side1.f.data.dtype
    total = engine.const(np.zeros((), dtype=dtype))
    for name, lam in zip(LOSS_NAMES, state.lambdas):
        if lam != 0.0 and name not in skip:
            total = total + terms[name] * float(lam)
    total_val = float(total.data)
    if not np.isfinite(total_val):
        raise DivergenceError(step, f"non-finite total loss {total_val}")

    _zero_grads(pv)
    total.backward()
    grads = _collect_grads(pv)

    if train_cfg.check_grad_consistency and per_term_grads:
        worst = 0.0
        for name, g in grads.items():
            combined = np.zeros_like(g, dtype=np.float64)
            for term, lam in zip(LOSS_NAMES, state.lambdas):
                if term in per_term_grads:
                    combined += lam * per_term_grads[term][name].astype(np.float64)
            worst = max(worst, float(np.max(np.abs(combined - g))))
        if worst > 1e-10:
            raise NumericError(
                f"total gradient differs from weighted per-term sum by {worst:g}")

    optimizer_step(params, grads, moments, train_cfg, t=step + 1)

    line = {
        "step": step,
        "losses": {n: float(terms[n].data) for n in LOSS_NAMES},
        "lambdas": [float(x) for x in state.lambdas],
        "total": total_val,
    }
    if train_cfg.log_wall_time:
        line["wall_time"] = time.perf_counter() - t0
    metrics.append(line)
    if log_fn is not None:
        log_fn(line)
    return state
