"""Prebuilt float64 graphs for gradient verification: a quadratic sanity
check, one gated cross-attention layer, and the full encoder driving the
weighted loss suite on a small synthetic pair batch."""

from __future__ import annotations

import numpy as np

from . import data, engine, losses, model
from .gradcheck import Graph
from .losses import BatchEmbeddings, LossConfig, PairBatch
from .model import ModelConfig


def quadratic_graph() -> Graph:
    """sum(x * x) over a small parameter vector; gradient is exactly 2x."""
    params = {"x": np.array([0.5, -1.25, 2.0, 3.5])}

    def build(p, _inputs):
        return {"loss": engine.vsum(engine.square(p["x"]))}

    return Graph(params, build)


def gated_layer_graph(seed: int = 7, n_tokens_v: int = 3, n_tokens_t: int = 2,
                      width: int = 8, heads: int = 2,
                      batch: int = 2) -> Graph:
    """One gated cross-attention layer on random projected features, reduced
    to a scalar by summing squared outputs."""
    cfg = ModelConfig(dim_v=width, dim_t=width, width=width, heads=heads,
                      ff_mult=2, embed_dim=width, precision="f64")
    full = model.init_params(cfg, seed=seed)
    params = {k: v for k, v in full.items() if k.startswith("g0.")}
    rng = np.random.default_rng(seed + 1)
    v_in = rng.standard_normal((batch, n_tokens_v, width))
    t_in = rng.standard_normal((batch, n_tokens_t, width))
    v_mask = np.ones((batch, n_tokens_v), dtype=bool)
    t_mask = np.ones((batch, n_tokens_t), dtype=bool)
    ind = np.ones(batch)

    def build(p, _inputs):
        v_g, t_g = model.gated_cross_fuse(
            engine.const(v_in), engine.const(t_in), v_mask, t_mask, ind, ind,
            p, "g0", heads)
        return {"loss": engine.vmean(engine.square(v_g)) + engine.vmean(engine.square(t_g))}

    return Graph(params, build)


def full_loss_graph(seed: int = 0, n_pairs: int = 4,
                    loss_cfg: LossConfig | None = None,
                    lambdas: np.ndarray | None = None,
                    missing_rate: float = 0.0,
                    scale: float = 1e-4) -> Graph:
    """The whole pipeline: synthetic pair batch -> encoder views -> all six
    weighted loss terms summed into one scalar.

    The scalar is the weighted total times `scale`. The check compares the
    same gradients either way (every backward rule on the path is exercised
    identically); the small scale keeps coordinates whose true derivative is
    negligible under the checker's absolute floor instead of having their
    finite differences drowned in float64 cancellation noise.
    """
    cfg = ModelConfig(dim_v=5, dim_t=4, width=6, heads=2, ff_mult=2,
                      embed_dim=4, precision="f64")
    spec = data.SyntheticSpec(pairs=n_pairs, latent_dim=4, tokens_v=2,
                              tokens_t=2, dim_v=cfg.dim_v, dim_t=cfg.dim_t,
                              pair_noise=0.1, token_noise=0.1,
                              missing_rate=missing_rate, seed=seed + 1000)
    records = data.generate(spec)
    bundles = ([r.bundle("trigger") for r in records]
               + [r.bundle("recall") for r in records])
    feats = model.batch_features(bundles, cfg)
    # synthetic payloads are float32; lift to the graph precision
    feats.x_v = feats.x_v.astype(np.float64)
    feats.x_t = feats.x_t.astype(np.float64)
    feats.ind_v = feats.ind_v.astype(np.float64)
    feats.ind_t = feats.ind_t.astype(np.float64)
    params = model.init_params(cfg, seed=seed)
    lcfg = loss_cfg or LossConfig(k_neighbors=2, k_hard=2)
    lams = np.ones(len(losses.LOSS_NAMES)) if lambdas is None else np.asarray(lambdas)
    n = n_pairs
    has_v = np.array([b.has_visual for b in bundles])
    has_t = np.array([b.has_textual for b in bundles])

    def build(p, _inputs):
        f, v, t = model.encode_views(p, feats, cfg)
        rows1, rows2 = np.arange(n), np.arange(n, 2 * n)

        def side(rows):
            return BatchEmbeddings(
                f=engine.take_rows(f, rows), v=engine.take_rows(v, rows),
                t=engine.take_rows(t, rows), has_v=has_v[rows], has_t=has_t[rows])

        total, _terms = losses.total_loss(PairBatch(side(rows1), side(rows2)),
                                          lcfg, lams)
        return {"loss": total * scale}

    return Graph(params, build)
