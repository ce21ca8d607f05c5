"""The contrastive / margin loss suite computed on batches of embedding triples.

Three groups: cross-modal alignment (v2t + pml), cohesive local alignment
(pdc + plc), and intra-modal contrastive (v2v + t2t). All terms are engine
Values so gradients flow to the encoder; neighbor and hard-negative mining is
a non-differentiable selection over detached similarities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Value

LOSS_NAMES = ("v2t", "pml", "pdc", "plc", "v2v", "t2t")

# loss-group membership used by the ablation toggles
GROUPS = {
    "cmal": ("v2t", "pml"),
    "clal": ("pdc", "plc"),
    "imcl": ("v2v", "t2t"),
}


class LossError(ValueError):
    """A loss term has no usable samples."""


@dataclass
class LossConfig:
    tau: float = 0.07
    tau_v: float = 0.07
    tau_t: float = 0.03
    alpha1: float = 0.2   # accepted for config compatibility; no term uses it
    alpha2: float = 0.1
    alpha3: float = 0.05
    alpha4: float = 0.2
    k_neighbors: int = 5
    k_hard: int = 5
    symmetric_v2t: bool = False
    use_both_sides_intra: bool = False

    def __post_init__(self):
        for name in ("tau", "tau_v", "tau_t"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("alpha1", "alpha2", "alpha3", "alpha4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("k_neighbors", "k_hard"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class BatchEmbeddings:
    """Embeddings of one side of a pair batch (each N x D engine Values)."""

    f: Value
    v: Value
    t: Value
    has_v: np.ndarray
    has_t: np.ndarray

    @property
    def count(self) -> int:
        return self.f.shape[0]


@dataclass
class PairBatch:
    side1: BatchEmbeddings
    side2: BatchEmbeddings

    def __post_init__(self):
        if self.side1.count != self.side2.count:
            raise LossError("pair batch sides differ in length")
        if self.side1.count < 1:
            raise LossError("empty pair batch")

    @property
    def count(self) -> int:
        return self.side1.count


def _info_nce(sims: Value, pos_cols: np.ndarray, tau: float) -> Value:
    """Mean over rows of -log softmax(sims/tau) at the positive column."""
    scaled = sims * (1.0 / tau)
    lse = engine.logsumexp(scaled, axis=-1)
    m = sims.shape[0]
    pos = engine.take_pairs(scaled, np.arange(m), pos_cols)
    return engine.vmean(lse - pos)


def _top_k_excluding_self(sims: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row indices of the k largest off-diagonal entries, ties broken by
    lowest column index. Returns (rows, cols) flattened for gathering."""
    m = sims.shape[0]
    masked = sims.copy()
    np.fill_diagonal(masked, -np.inf)
    order = np.argsort(-masked, axis=-1, kind="stable")
    cols = order[:, :k].reshape(-1)
    rows = np.repeat(np.arange(m), k)
    return rows, cols


def v2t_loss(batch: PairBatch, cfg: LossConfig) -> Value:
    """Within-product visual-to-textual InfoNCE over side-1 products."""
    side = batch.side1
    rows = np.flatnonzero(side.has_v & side.has_t)
    if rows.size == 0:
        raise LossError("v2t: no sample has both modalities")
    v = engine.take_rows(side.v, rows)
    t = engine.take_rows(side.t, rows)
    diag = np.arange(rows.size)
    sims = engine.matmul(v, engine.swap_last2(t))
    loss = _info_nce(sims, diag, cfg.tau)
    if cfg.symmetric_v2t:
        loss = (loss + _info_nce(engine.swap_last2(sims), diag, cfg.tau)) * 0.5
    return loss


def pml_loss(batch: PairBatch, cfg: LossConfig) -> Value:
    """Pair-matching InfoNCE: (f1,f2), (v1,f2) and (t1,f2) positives, each
    against all in-batch side-2 fused embeddings."""
    s1, s2 = batch.side1, batch.side2
    n = batch.count
    f2t = engine.swap_last2(s2.f)
    total = _info_nce(engine.matmul(s1.f, f2t), np.arange(n), cfg.tau)
    for emb, has, tag in ((s1.v, s1.has_v, "visual"), (s1.t, s1.has_t, "textual")):
        rows = np.flatnonzero(has)
        if rows.size == 0:
            raise LossError(f"pml: no sample has a {tag} embedding")
        sims = engine.matmul(engine.take_rows(emb, rows), f2t)
        total = total + _info_nce(sims, rows, cfg.tau)
    return total


def _intra_triples(batch: PairBatch, cfg: LossConfig) -> tuple[Value, Value, Value]:
    """Products with all three representations, from side 1 or both sides."""
    sides = [batch.side1, batch.side2] if cfg.use_both_sides_intra else [batch.side1]
    fs, vs, ts = [], [], []
    for side in sides:
        rows = np.flatnonzero(side.has_v & side.has_t)
        if rows.size:
            fs.append(engine.take_rows(side.f, rows))
            vs.append(engine.take_rows(side.v, rows))
            ts.append(engine.take_rows(side.t, rows))
    if not fs:
        raise LossError("no product has all three representations")
    if len(fs) == 1:
        return fs[0], vs[0], ts[0]
    return (engine.concat(fs, axis=0), engine.concat(vs, axis=0),
            engine.concat(ts, axis=0))


def pdc_loss(batch: PairBatch, cfg: LossConfig) -> Value:
    """Hinge pushing cross-product fused similarity below each product's own
    visual-fused and textual-fused similarity, margin alpha2, diagonal excluded."""
    f, v, t = _intra_triples(batch, cfg)
    m = f.shape[0]
    if m < 2:
        return engine.const(np.zeros((), dtype=f.data.dtype))
    s_m2m = engine.matmul(f, engine.swap_last2(f))
    s_v2m_ii = engine.vsum(v * f, axis=-1, keepdims=True)
    s_t2m_ii = engine.vsum(t * f, axis=-1, keepdims=True)
    off_diag = engine.const((1.0 - np.eye(m)).astype(f.data.dtype))
    hinge_v = engine.relu(s_m2m + (cfg.alpha2 - s_v2m_ii)) * off_diag
    hinge_t = engine.relu(s_m2m + (cfg.alpha2 - s_t2m_ii)) * off_diag
    return (engine.vsum(hinge_v) + engine.vsum(hinge_t)) * (1.0 / m)


def plc_loss(batch: PairBatch, cfg: LossConfig) -> Value:
    """Squared-gap hinge over each product's top-K fused-similar neighbors,
    keeping the three cross-representation similarity matrices consistent."""
    f, v, t = _intra_triples(batch, cfg)
    m = f.shape[0]
    if m < 2:
        return engine.const(np.zeros((), dtype=f.data.dtype))
    k = min(cfg.k_neighbors, m - 1)
    s_m2m = engine.matmul(f, engine.swap_last2(f))
    s_v2m = engine.matmul(v, engine.swap_last2(f))
    s_t2m = engine.matmul(t, engine.swap_last2(f))
    rows, cols = _top_k_excluding_self(s_m2m.data, k)
    m2m = engine.take_pairs(s_m2m, rows, cols)
    v2m = engine.take_pairs(s_v2m, rows, cols)
    t2m = engine.take_pairs(s_t2m, rows, cols)
    total = (engine.vsum(engine.relu(engine.square(v2m - m2m) - cfg.alpha3))
             + engine.vsum(engine.relu(engine.square(t2m - m2m) - cfg.alpha3))
             + engine.vsum(engine.relu(engine.square(v2m - t2m) - cfg.alpha3)))
    return total * (1.0 / (m * k))


def _paired_contrastive(batch: PairBatch, which: str, tau: float,
                        hard_k: int = 0, alpha: float = 0.0) -> Value:
    """InfoNCE between side-1 and side-2 embeddings of one modality, plus an
    optional hard-negative hinge over the top-k most similar non-matches."""
    s1, s2 = batch.side1, batch.side2
    if which == "v":
        has = s1.has_v & s2.has_v
        a, b = s1.v, s2.v
    else:
        has = s1.has_t & s2.has_t
        a, b = s1.t, s2.t
    rows = np.flatnonzero(has)
    if rows.size == 0:
        raise LossError(f"{which}2{which}: no pair has the modality on both sides")
    a = engine.take_rows(a, rows)
    b = engine.take_rows(b, rows)
    m = rows.size
    sims = engine.matmul(a, engine.swap_last2(b))
    loss = _info_nce(sims, np.arange(m), tau)
    k = min(hard_k, m - 1)
    if k > 0:
        hr, hc = _top_k_excluding_self(sims.data, k)
        s_ij = engine.take_pairs(sims, hr, hc)
        s_ii = engine.take_pairs(sims, hr, hr)
        hard = engine.vsum(engine.relu(s_ij - s_ii + alpha)) * (1.0 / (m * k))
        loss = loss + hard
    return loss


def v2v_loss(batch: PairBatch, cfg: LossConfig) -> Value:
    return _paired_contrastive(batch, "v", cfg.tau_v,
                               hard_k=cfg.k_hard, alpha=cfg.alpha4)


def t2t_loss(batch: PairBatch, cfg: LossConfig) -> Value:
    return _paired_contrastive(batch, "t", cfg.tau_t)


_TERM_FNS = {
    "v2t": v2t_loss,
    "pml": pml_loss,
    "pdc": pdc_loss,
    "plc": plc_loss,
    "v2v": v2v_loss,
    "t2t": t2t_loss,
}


def ablation_mask(disable_cmal: bool = False, disable_clal: bool = False,
                  disable_imcl: bool = False) -> np.ndarray:
    """1.0 for enabled loss terms, 0.0 for terms in a disabled group."""
    off: set[str] = set()
    for flag, group in ((disable_cmal, "cmal"), (disable_clal, "clal"),
                        (disable_imcl, "imcl")):
        if flag:
            off.update(GROUPS[group])
    return np.array([0.0 if n in off else 1.0 for n in LOSS_NAMES])


def loss_terms(batch: PairBatch, cfg: LossConfig,
               skip: set[str] | None = None) -> dict[str, Value]:
    """Evaluate every loss term (skipped ones report a constant zero)."""
    dtype = batch.side1.f.data.dtype
    out: dict[str, Value] = {}
    for name in LOSS_NAMES:
        if skip and name in skip:
            out[name] = engine.const(np.zeros((), dtype=dtype))
        else:
            out[name] = _TERM_FNS[name](batch, cfg)
    return out


def total_loss(batch: PairBatch, cfg: LossConfig, lambdas: np.ndarray
               ) -> tuple[Value, dict[str, Value]]:
    """Weighted sum of the six terms; terms with a zero weight are skipped
    entirely so ablated groups contribute neither value nor gradient."""
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.shape != (len(LOSS_NAMES),):
        raise ValueError(f"expected {len(LOSS_NAMES)} weights, got {lambdas.shape}")
    skip = {n for n, lam in zip(LOSS_NAMES, lambdas) if lam == 0.0}
    terms = loss_terms(batch, cfg, skip=skip)
    dtype = batch.side1.f.data.dtype
    total: Value = engine.const(np.zeros((), dtype=dtype))
    for name, lam in zip(LOSS_NAMES, lambdas):
        if lam != 0.0:
            total = total + terms[name] * float(lam)
    return total, terms
