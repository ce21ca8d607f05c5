"""Product-pair dataset: record schema, JSONL and packed binary containers,
and a synthetic correlated-pair generator.

Each record is one trigger/recall pair of similar products; any of the four
token-feature payloads may be absent, but each side keeps at least one
modality. Features are stored pre-extracted as float32 token matrices.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .model import ModalityBundle, TokenFeatureMatrix

PACKED_MAGIC = b"UECS"
PACKED_VERSION = 1

_PAYLOADS = ("trigger_text", "trigger_image", "recall_text", "recall_image")


class DataError(ValueError):
    """Malformed dataset file or invalid record."""


@dataclass
class ProductPairRecord:
    pair_id: str
    trigger_text: np.ndarray | None = None
    trigger_image: np.ndarray | None = None
    recall_text: np.ndarray | None = None
    recall_image: np.ndarray | None = None

    def __post_init__(self):
        if not self.pair_id:
            raise DataError("record needs a pair_id")
        for name in _PAYLOADS:
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
                raise DataError(f"{self.pair_id}: {name} must be a 2-D token matrix")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{self.pair_id}: {name} contains non-finite values")
            setattr(self, name, arr)
        if self.trigger_text is None and self.trigger_image is None:
            raise DataError(f"{self.pair_id}: trigger side has no modality")
        if self.recall_text is None and self.recall_image is None:
            raise DataError(f"{self.pair_id}: recall side has no modality")

    def bundle(self, side: str) -> ModalityBundle:
        if side not in ("trigger", "recall"):
            raise ValueError(f"side must be trigger or recall, got {side!r}")
        image = getattr(self, f"{side}_image")
        text = getattr(self, f"{side}_text")
        return ModalityBundle(
            visual=TokenFeatureMatrix.dense(image) if image is not None else None,
            textual=TokenFeatureMatrix.dense(text) if text is not None else None,
        )


@dataclass
class SyntheticSpec:
    pairs: int = 1000
    latent_dim: int = 16
    tokens_v: int = 4
    tokens_t: int = 4
    dim_v: int = 48
    dim_t: int = 40
    pair_noise: float = 0.1
    token_noise: float = 0.05
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("pairs", "latent_dim", "tokens_v", "tokens_t", "dim_v", "dim_t"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        for name in ("pair_noise", "token_noise"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise DataError("missing_rate must lie in [0, 1)")


def generate(spec: SyntheticSpec) -> list[ProductPairRecord]:
    """Draw correlated trigger/recall pairs from a shared unit latent.

    Both sides of a pair perturb one latent direction by pair_noise; each
    modality lifts the side's latent through a fixed random map shared by the
    whole corpus, plus per-token noise. Modalities drop independently at
    missing_rate, never both on one side.
    """
    rng = np.random.default_rng(spec.seed)
    map_v = rng.standard_normal((spec.latent_dim, spec.dim_v)) / np.sqrt(spec.latent_dim)
    map_t = rng.standard_normal((spec.latent_dim, spec.dim_t)) / np.sqrt(spec.latent_dim)

    def unit(x):
        return x / np.linalg.norm(x)

    def lift(latent, mod_map, n_tokens, dim):
        base = latent @ mod_map
        noise = spec.token_noise * rng.standard_normal((n_tokens, dim))
        return (base[None, :] + noise).astype(np.float32)

    def keep_flags():
        if spec.missing_rate == 0.0:
            return True, True
        drop_img = rng.random() < spec.missing_rate
        drop_txt = rng.random() < spec.missing_rate
        if drop_img and drop_txt:
            if rng.random() < 0.5:
                drop_img = False
            else:
                drop_txt = False
        return not drop_img, not drop_txt

    records = []
    for i in range(spec.pairs):
        z = unit(rng.standard_normal(spec.latent_dim))
        lat1 = unit(z + spec.pair_noise * rng.standard_normal(spec.latent_dim))
        lat2 = unit(z + spec.pair_noise * rng.standard_normal(spec.latent_dim))
        payloads = {}
        for side, lat in (("trigger", lat1), ("recall", lat2)):
            image = lift(lat, map_v, spec.tokens_v, spec.dim_v)
            text = lift(lat, map_t, spec.tokens_t, spec.dim_t)
            keep_img, keep_txt = keep_flags()
            payloads[f"{side}_image"] = image if keep_img else None
            payloads[f"{side}_text"] = text if keep_txt else None
        records.append(ProductPairRecord(pair_id=f"pair-{i:06d}", **payloads))
    return records


def _check_consistency(records: list[ProductPairRecord]) -> None:
    dims: dict[str, int] = {}
    seen: set[str] = set()
    for rec in records:
        if rec.pair_id in seen:
            raise DataError(f"duplicate pair_id {rec.pair_id!r}")
        seen.add(rec.pair_id)
        for name in _PAYLOADS:
            arr = getattr(rec, name)
            if arr is None:
                continue
            kind = "text" if name.endswith("text") else "image"
            if kind in dims and dims[kind] != arr.shape[1]:
                raise DataError(
                    f"{rec.pair_id}: {kind} dim {arr.shape[1]} != corpus dim {dims[kind]}"
                )
            dims.setdefault(kind, arr.shape[1])


def write_jsonl(records: list[ProductPairRecord], path) -> None:
    _check_consistency(records)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"pair_id": rec.pair_id}
            for name in _PAYLOADS:
                arr = getattr(rec, name)
                obj[name] = None if arr is None else arr.tolist()
            fh.write(json.dumps(obj, allow_nan=False))
            fh.write("\n")


def read_jsonl(path) -> list[ProductPairRecord]:
    records = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: {e}") from None
            if not isinstance(obj, dict) or "pair_id" not in obj:
                raise DataError(f"{path}: line {lineno}: not a pair record")
            kwargs = {}
            for name in _PAYLOADS:
                val = obj.get(name)
                kwargs[name] = None if val is None else np.asarray(val, dtype=np.float32)
            try:
                records.append(ProductPairRecord(pair_id=obj["pair_id"], **kwargs))
            except DataError as e:
                raise DataError(f"{path}: line {lineno}: {e}") from None
    _check_consistency(records)
    return records


def write_packed(records: list[ProductPairRecord], path) -> None:
    """Binary container: magic, version, record count, then per-record header
    (id, presence flags, per-payload token counts) and raw float32 payloads."""
    _check_consistency(records)
    with open(path, "wb") as fh:
        fh.write(PACKED_MAGIC)
        fh.write(struct.pack("<I", PACKED_VERSION))
        fh.write(struct.pack("<Q", len(records)))
        for rec in records:
            ident = rec.pair_id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            payloads = [getattr(rec, name) for name in _PAYLOADS]
            fh.write(bytes(0 if p is None else 1 for p in payloads))
            for p in payloads:
                if p is not None:
                    fh.write(struct.pack("<II", p.shape[0], p.shape[1]))
            for p in payloads:
                if p is not None:
                    fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def read_packed(path) -> list[ProductPairRecord]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None

    def take(offset, n):
        if offset + n > len(blob):
            raise DataError(f"{path}: truncated file")
        return blob[offset:offset + n], offset + n

    raw, off = take(0, 4)
    if raw != PACKED_MAGIC:
        raise DataError(f"{path}: bad magic {raw!r}, not a packed pair corpus")
    raw, off = take(off, 4)
    version = struct.unpack("<I", raw)[0]
    if version != PACKED_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    raw, off = take(off, 8)
    count = struct.unpack("<Q", raw)[0]

    records = []
    for _ in range(count):
        raw, off = take(off, 4)
        id_len = struct.unpack("<I", raw)[0]
        raw, off = take(off, id_len)
        pair_id = raw.decode("utf-8")
        raw, off = take(off, 4)
        flags = list(raw)
        shapes = []
        for flag in flags:
            if flag:
                raw, off = take(off, 8)
                shapes.append(struct.unpack("<II", raw))
            else:
                shapes.append(None)
        kwargs = {}
        for name, shape in zip(_PAYLOADS, shapes):
            if shape is None:
                kwargs[name] = None
            else:
                n, d = shape
                raw, off = take(off, 4 * n * d)
                kwargs[name] = np.frombuffer(raw, dtype="<f4").reshape(n, d).copy()
        try:
            records.append(ProductPairRecord(pair_id=pair_id, **kwargs))
        except DataError as e:
            raise DataError(f"{path}: {e}") from None
    if off != len(blob):
        raise DataError(f"{path}: {len(blob) - off} trailing bytes")
    _check_consistency(records)
    return records


def write_dataset(records: list[ProductPairRecord], path, fmt: str) -> None:
    if fmt == "jsonl":
        write_jsonl(records, path)
    elif fmt == "packed":
        write_packed(records, path)
    else:
        raise DataError(f"unknown dataset format {fmt!r}")


def read_dataset(path) -> list[ProductPairRecord]:
    """Dispatch on the magic bytes; anything non-binary is treated as JSONL."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if head == PACKED_MAGIC:
        return read_packed(path)
    return read_jsonl(path)
