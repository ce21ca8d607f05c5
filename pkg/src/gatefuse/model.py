"""Gated multimodal encoder: projection, gated cross-attention fusion,
per-modality self-attention, and a transformer fusion head producing
unit-norm visual / textual / fused embeddings.

A modality counts as present only if it has at least one valid token; a
fully masked matrix is equivalent to an absent one, which is what makes the
"zero the other modality" rule for single-modal embeddings an exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ShapeError, Value


@dataclass
class ModelConfig:
    dim_v: int = 48
    dim_t: int = 40
    width: int = 64
    heads: int = 4
    ff_mult: int = 4
    embed_dim: int = 256
    gated_layers: int = 1
    fusion_blocks: int = 3
    precision: str = "f32"

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        for name in ("dim_v", "dim_t", "width", "heads", "ff_mult", "embed_dim",
                     "gated_layers", "fusion_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class TokenFeatureMatrix:
    """Token-level features of one modality: N x D values plus a validity mask."""

    tokens: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"tokens must be N x D with N >= 1, got {self.tokens.shape}")
        if self.mask.shape != (self.tokens.shape[0],):
            raise ShapeError(f"mask shape {self.mask.shape} vs {self.tokens.shape[0]} tokens")
        if np.any(self.tokens[~self.mask] != 0):
            raise ShapeError("masked-out token rows must be all-zero")
        if not np.all(np.isfinite(self.tokens)):
            raise engine.NumericError("token features contain non-finite values")

    @classmethod
    def dense(cls, tokens: np.ndarray) -> "TokenFeatureMatrix":
        tokens = np.asarray(tokens)
        return cls(tokens, np.ones(tokens.shape[0], dtype=bool))

    @classmethod
    def absent(cls, dim: int, dtype=np.float32) -> "TokenFeatureMatrix":
        return cls(np.zeros((1, dim), dtype=dtype), np.zeros(1, dtype=bool))

    @property
    def present(self) -> bool:
        return bool(self.mask.any())


@dataclass
class ModalityBundle:
    """One product's optional visual and textual token features."""

    visual: TokenFeatureMatrix | None = None
    textual: TokenFeatureMatrix | None = None

    def __post_init__(self):
        if not (self.has_visual or self.has_textual):
            raise ShapeError("bundle needs at least one present modality")

    @property
    def has_visual(self) -> bool:
        return self.visual is not None and self.visual.present

    @property
    def has_textual(self) -> bool:
        return self.textual is not None and self.textual.present

    @property
    def indicator_v(self) -> float:
        return 1.0 if self.has_visual else 0.0

    @property
    def indicator_t(self) -> float:
        return 1.0 if self.has_textual else 0.0


@dataclass
class EmbeddingTriple:
    """Unit-norm visual / textual / fused global embeddings of one product."""

    v: np.ndarray | None
    t: np.ndarray | None
    f: np.ndarray


@dataclass
class BatchFeatures:
    """Padded, stacked token features for a batch of bundles."""

    x_v: np.ndarray   # (P, Nv, dim_v)
    mask_v: np.ndarray  # (P, Nv) bool
    ind_v: np.ndarray   # (P,)
    x_t: np.ndarray
    mask_t: np.ndarray
    ind_t: np.ndarray

    @property
    def count(self) -> int:
        return self.x_v.shape[0]


def batch_features(bundles: list[ModalityBundle], cfg: ModelConfig) -> BatchFeatures:
    """Pad bundles to shared token counts; absent modalities become all-masked zeros."""
    if not bundles:
        raise ShapeError("empty bundle list")
    dtype = cfg.dtype
    # a fully masked matrix is canonicalized to the 1-token absent form, so a
    # bundle with zeroed features/indicators encodes bit-identically to one
    # where the modality was never supplied
    mats_v = [b.visual if b.has_visual else TokenFeatureMatrix.absent(cfg.dim_v, dtype)
              for b in bundles]
    mats_t = [b.textual if b.has_textual else TokenFeatureMatrix.absent(cfg.dim_t, dtype)
              for b in bundles]
    for m in mats_v:
        if m.tokens.shape[1] != cfg.dim_v:
            raise ShapeError(f"visual dim {m.tokens.shape[1]} != configured {cfg.dim_v}")
    for m in mats_t:
        if m.tokens.shape[1] != cfg.dim_t:
            raise ShapeError(f"textual dim {m.tokens.shape[1]} != configured {cfg.dim_t}")

    def pad(mats, dim):
        n = max(m.tokens.shape[0] for m in mats)
        x = np.zeros((len(mats), n, dim), dtype=dtype)
        mask = np.zeros((len(mats), n), dtype=bool)
        for i, m in enumerate(mats):
            k = m.tokens.shape[0]
            x[i, :k] = m.tokens.astype(dtype)
            mask[i, :k] = m.mask
        return x, mask

    x_v, mask_v = pad(mats_v, cfg.dim_v)
    x_t, mask_t = pad(mats_t, cfg.dim_t)
    ind_v = np.array([b.indicator_v for b in bundles], dtype=dtype)
    ind_t = np.array([b.indicator_t for b in bundles], dtype=dtype)
    return BatchFeatures(x_v, mask_v, ind_v, x_t, mask_t, ind_t)


# ---------------------------------------------------------------------------
# parameters

def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Create all trainable tensors, uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
    for weights and zeros for biases. Gate biases start at 0 so gates open at 0.5.
    """
    rng = np.random.default_rng(seed)
    dtype = cfg.dtype
    d = cfg.width
    params: dict[str, np.ndarray] = {}

    def w(name, fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)

    def b(name, shape):
        params[name] = np.zeros(shape, dtype=dtype)

    def ln(prefix):
        params[f"{prefix}.ln_g"] = np.ones(d, dtype=dtype)
        params[f"{prefix}.ln_b"] = np.zeros(d, dtype=dtype)

    def attention(prefix):
        # no key bias: softmax is invariant to a per-row constant score
        # shift, so it would be an untrainable parameter
        for part in ("wq", "wk", "wv", "wo"):
            w(f"{prefix}.{part}", d, (d, d))
        for part in ("bq", "bv", "bo"):
            b(f"{prefix}.{part}", d)

    def block(prefix):
        attention(f"{prefix}.attn")
        params[f"{prefix}.ln1_g"] = np.ones(d, dtype=dtype)
        params[f"{prefix}.ln1_b"] = np.zeros(d, dtype=dtype)
        ff = cfg.ff_mult * d
        w(f"{prefix}.ff.w1", d, (d, ff))
        b(f"{prefix}.ff.b1", ff)
        w(f"{prefix}.ff.w2", ff, (ff, d))
        b(f"{prefix}.ff.b2", d)
        params[f"{prefix}.ln2_g"] = np.ones(d, dtype=dtype)
        params[f"{prefix}.ln2_b"] = np.zeros(d, dtype=dtype)

    w("proj_v.w", cfg.dim_v, (cfg.dim_v, d))
    b("proj_v.b", d)
    w("proj_t.w", cfg.dim_t, (cfg.dim_t, d))
    b("proj_t.b", d)
    for layer in range(cfg.gated_layers):
        for side in ("v", "t"):
            attention(f"g{layer}.cross_{side}")
            ln(f"g{layer}.cross_{side}")
            w(f"g{layer}.gate_{side}.w", 2 * d + 1, (2 * d + 1, d))
            b(f"g{layer}.gate_{side}.b", d)
    block("self_v")
    block("self_t")
    w("fusion.type_emb", d, (2, d))
    for i in range(cfg.fusion_blocks):
        block(f"fusion.b{i}")
    w("fusion.out.w", d, (d, cfg.embed_dim))
    b("fusion.out.b", cfg.embed_dim)
    return params


def params_as_values(params: dict[str, np.ndarray]) -> dict[str, Value]:
    return {k: engine.parameter(v, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# pipeline stages (all take/return engine Values)

def project(x: Value, mask: np.ndarray, w: Value, b: Value) -> Value:
    """Affine projection into the common width; masked rows stay exactly zero."""
    out = engine.linear(x, w, b)
    return engine.mul(out, engine.const(mask[..., None].astype(out.data.dtype)))


def multi_head_attention(q_in: Value, kv_in: Value, key_mask: np.ndarray,
                         p: dict[str, Value], prefix: str, heads: int) -> Value:
    """Masked multi-head attention. A batch element with no valid key yields
    an exactly-zero output row (zero context and no output bias), so a
    following layer norm reduces to its shift."""
    bsz, nq, d = q_in.shape
    nk = kv_in.shape[1]
    dh = d // heads

    def heads_split(x, n):
        x = engine.reshape(x, (bsz, n, heads, dh))
        return engine.transpose(x, (0, 2, 1, 3))

    q = heads_split(engine.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), nq)
    k = heads_split(engine.matmul(kv_in, p[f"{prefix}.wk"]), nk)
    v = heads_split(engine.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), nk)
    scores = engine.matmul(q, engine.swap_last2(k)) * (1.0 / math.sqrt(dh))
    weights = engine.masked_softmax(scores, key_mask[:, None, None, :])
    ctx = engine.matmul(weights, v)
    ctx = engine.reshape(engine.transpose(ctx, (0, 2, 1, 3)), (bsz, nq, d))
    out = engine.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    alive = key_mask.any(axis=-1)
    if not alive.all():
        out = engine.mul(out, engine.const(
            alive[:, None, None].astype(out.data.dtype)))
    return out


def gated_cross_fuse(v_proj: Value, t_proj: Value, v_mask: np.ndarray,
                     t_mask: np.ndarray, ind_v: np.ndarray, ind_t: np.ndarray,
                     p: dict[str, Value], prefix: str, heads: int,
                     disable_gating: bool = False) -> tuple[Value, Value]:
    """Mix each modality's projected features with its cross-attended features
    through a per-token, per-channel sigmoid gate.

    The gate's indicator channel is the presence flag of the attended (key
    side) modality, which is what lets it learn to route around the zero
    context of an absent key set. `disable_gating` forces the visual-side
    gate fully open (V_g = V_attn); the textual gate stays learned.
    """
    dtype = v_proj.data.dtype

    def channel(ind, n_tokens):
        arr = np.broadcast_to(ind[:, None, None], (ind.shape[0], n_tokens, 1))
        return engine.const(np.ascontiguousarray(arr, dtype=dtype))

    v_attn = multi_head_attention(v_proj, t_proj, t_mask, p, f"{prefix}.cross_v", heads)
    v_attn = engine.layer_norm(v_attn, p[f"{prefix}.cross_v.ln_g"], p[f"{prefix}.cross_v.ln_b"])
    t_attn = multi_head_attention(t_proj, v_proj, v_mask, p, f"{prefix}.cross_t", heads)
    t_attn = engine.layer_norm(t_attn, p[f"{prefix}.cross_t.ln_g"], p[f"{prefix}.cross_t.ln_b"])

    if disable_gating:
        v_g = v_attn
    else:
        gate_in_v = engine.concat([v_proj, v_attn, channel(ind_t, v_proj.shape[1])], axis=-1)
        g_v = engine.sigmoid(engine.linear(gate_in_v, p[f"{prefix}.gate_v.w"], p[f"{prefix}.gate_v.b"]))
        v_g = g_v * v_attn + (1.0 - g_v) * v_proj

    gate_in_t = engine.concat([t_proj, t_attn, channel(ind_v, t_proj.shape[1])], axis=-1)
    g_t = engine.sigmoid(engine.linear(gate_in_t, p[f"{prefix}.gate_t.w"], p[f"{prefix}.gate_t.b"]))
    t_g = g_t * t_attn + (1.0 - g_t) * t_proj
    return v_g, t_g


def encoder_block(x: Value, mask: np.ndarray, p: dict[str, Value],
                  prefix: str, heads: int) -> Value:
    """Standard post-LN transformer encoder block with masked self-attention."""
    attn = multi_head_attention(x, x, mask, p, f"{prefix}.attn", heads)
    x = engine.layer_norm(x + attn, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    h = engine.gelu(engine.linear(x, p[f"{prefix}.ff.w1"], p[f"{prefix}.ff.b1"]))
    ff = engine.linear(h, p[f"{prefix}.ff.w2"], p[f"{prefix}.ff.b2"])
    return engine.layer_norm(x + ff, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])


def self_attend(v_g: Value, t_g: Value, v_mask: np.ndarray, t_mask: np.ndarray,
                p: dict[str, Value], heads: int) -> tuple[Value, Value]:
    return (encoder_block(v_g, v_mask, p, "self_v", heads),
            encoder_block(t_g, t_mask, p, "self_t", heads))


def fusion_head(pool_v: Value, pool_t: Value, p: dict[str, Value], cfg: ModelConfig) -> Value:
    """Run the two pooled vectors as a typed 2-token sequence through the
    fusion blocks, mean-pool, project to the embedding dim, L2-normalize."""
    bsz = pool_v.shape[0]
    seq = engine.concat([engine.reshape(pool_v, (bsz, 1, cfg.width)),
                         engine.reshape(pool_t, (bsz, 1, cfg.width))], axis=1)
    seq = seq + p["fusion.type_emb"]
    mask = np.ones((bsz, 2), dtype=bool)
    for i in range(cfg.fusion_blocks):
        seq = encoder_block(seq, mask, p, f"fusion.b{i}", cfg.heads)
    pooled = engine.vmean(seq, axis=-2)
    emb = engine.linear(pooled, p["fusion.out.w"], p["fusion.out.b"])
    return engine.l2_normalize(emb)


def encode_views(p: dict[str, Value], feats: BatchFeatures, cfg: ModelConfig,
                 disable_gating: bool = False) -> tuple[Value, Value, Value]:
    """Encode every bundle's fused, visual-only, and textual-only views.

    Single-modal views re-run the identical pipeline with the other side's
    features, mask, and indicator zeroed, stacked into one 3P-sequence batch.
    Returns (f, v, t), each (P, embed_dim) and unit-norm.
    """
    n = feats.count
    zeros_v = np.zeros_like(feats.x_v)
    zeros_t = np.zeros_like(feats.x_t)
    off = np.zeros_like(feats.ind_v)
    no_mask_v = np.zeros_like(feats.mask_v)
    no_mask_t = np.zeros_like(feats.mask_t)

    x_v = np.concatenate([feats.x_v, feats.x_v, zeros_v])
    m_v = np.concatenate([feats.mask_v, feats.mask_v, no_mask_v])
    i_v = np.concatenate([feats.ind_v, feats.ind_v, off])
    x_t = np.concatenate([feats.x_t, zeros_t, feats.x_t])
    m_t = np.concatenate([feats.mask_t, no_mask_t, feats.mask_t])
    i_t = np.concatenate([feats.ind_t, off, feats.ind_t])

    v_p = project(engine.const(x_v), m_v, p["proj_v.w"], p["proj_v.b"])
    t_p = project(engine.const(x_t), m_t, p["proj_t.w"], p["proj_t.b"])
    for layer in range(cfg.gated_layers):
        v_p, t_p = gated_cross_fuse(v_p, t_p, m_v, m_t, i_v, i_t, p,
                                    f"g{layer}", cfg.heads, disable_gating)
    v_sa, t_sa = self_attend(v_p, t_p, m_v, m_t, p, cfg.heads)
    pool_v = engine.masked_mean_pool(v_sa, m_v)
    pool_t = engine.masked_mean_pool(t_sa, m_t)
    emb = fusion_head(pool_v, pool_t, p, cfg)

    idx = np.arange(3 * n)
    f = engine.take_rows(emb, idx[:n])
    v = engine.take_rows(emb, idx[n:2 * n])
    t = engine.take_rows(emb, idx[2 * n:])
    return f, v, t


def encode_batch(params: dict[str, np.ndarray], bundles: list[ModalityBundle],
                 cfg: ModelConfig, disable_gating: bool = False
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inference-only batch encode: returns (f, v, t, has_v, has_t) arrays."""
    feats = batch_features(bundles, cfg)
    with engine.no_grad():
        p = {k: Value(v) for k, v in params.items()}
        f, v, t = encode_views(p, feats, cfg, disable_gating)
    has_v = np.array([b.has_visual for b in bundles])
    has_t = np.array([b.has_textual for b in bundles])
    return f.data, v.data, t.data, has_v, has_t


def encode(params: dict[str, np.ndarray], bundle: ModalityBundle,
           cfg: ModelConfig, disable_gating: bool = False) -> EmbeddingTriple:
    """Encode one bundle into its unit-norm embedding triple."""
    f, v, t, has_v, has_t = encode_batch(params, [bundle], cfg, disable_gating)
    return EmbeddingTriple(
        v=v[0] if has_v[0] else None,
        t=t[0] if has_t[0] else None,
        f=f[0],
    )
