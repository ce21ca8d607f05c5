"""Exact cosine top-K retrieval and the nine-task Recall@K evaluation matrix.

Queries come from trigger-side embeddings and candidates from recall-side
embeddings; every task pairs one query view (visual, textual, fused) with one
candidate view. Search is an exact dot-product scan with deterministic
lowest-id tie-breaking.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import DataError

EMB_MAGIC = b"UEMB"
EMB_VERSION = 1

MODALITIES = ("v", "t", "vt")


@dataclass(frozen=True)
class TaskSpec:
    query_modality: str
    candidate_modality: str

    @property
    def name(self) -> str:
        return f"q{self.query_modality}2c{self.candidate_modality}"


TASKS = tuple(TaskSpec(q, c) for q in MODALITIES for c in MODALITIES)
TASK_NAMES = tuple(t.name for t in TASKS)


class RetrievalError(ValueError):
    pass


@dataclass
class EmbeddingCorpus:
    ids: list[str]
    matrix: np.ndarray
    modality: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise RetrievalError("corpus must be a non-empty N x D matrix")
        if len(self.ids) != self.matrix.shape[0]:
            raise RetrievalError(
                f"{len(self.ids)} ids for {self.matrix.shape[0]} rows")
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise RetrievalError("corpus rows must be unit-norm within 1e-5")


class Index:
    """Immutable exact top-K index over unit-norm rows."""

    def __init__(self, corpus: EmbeddingCorpus):
        if len(set(corpus.ids)) != len(corpus.ids):
            dupes = sorted({i for i in corpus.ids if corpus.ids.count(i) > 1})
            raise RetrievalError(f"duplicate ids in corpus: {dupes[:5]}")
        self.ids = list(corpus.ids)
        self.matrix = corpus.matrix
        # rank of each row's id in sorted order; used for tie-breaking
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        for rank, row in enumerate(order):
            self.id_rank[row] = rank

    @property
    def size(self) -> int:
        return len(self.ids)


def build_index(corpus: EmbeddingCorpus) -> Index:
    return Index(corpus)


def topk(index: Index, query: np.ndarray, k: int) -> tuple[list[str], np.ndarray]:
    """The k highest dot products, descending, ties broken by lower id."""
    if k < 1:
        raise RetrievalError("k must be >= 1")
    query = np.asarray(query)
    if query.shape != (index.matrix.shape[1],):
        raise RetrievalError(
            f"query shape {query.shape} vs corpus dim {index.matrix.shape[1]}")
    norm = float(np.linalg.norm(query))
    if abs(norm - 1.0) > 1e-3:
        raise RetrievalError(f"query norm {norm:.6f} deviates from 1 by > 1e-3")
    scores = index.matrix @ query
    order = np.lexsort((index.id_rank, -scores))[:min(k, index.size)]
    return [index.ids[i] for i in order], scores[order]


def recall_at_k(results: list[list[str]], ground_truth: list[str], k: int,
                corpus_ids: set[str] | list[str]) -> float:
    """Fraction of queries whose single ground truth is in the top k."""
    if len(results) != len(ground_truth):
        raise RetrievalError("one ground-truth id required per query")
    if len(results) == 0:
        raise RetrievalError("no queries")
    members = set(corpus_ids)
    hits = 0
    for ranked, gt in zip(results, ground_truth):
        if gt not in members:
            raise RetrievalError(f"ground truth {gt!r} absent from corpus")
        if gt in ranked[:k]:
            hits += 1
    return hits / len(results)


@dataclass
class SideEmbeddings:
    """Per-pair embeddings of one side (trigger or recall)."""

    ids: list[str]
    f: np.ndarray
    v: np.ndarray
    t: np.ndarray
    has_v: np.ndarray
    has_t: np.ndarray

    def view(self, modality: str) -> tuple[np.ndarray, np.ndarray]:
        """(embeddings, availability) for one task modality."""
        if modality == "v":
            return self.v, self.has_v
        if modality == "t":
            return self.t, self.has_t
        if modality == "vt":
            return self.f, self.has_v & self.has_t
        raise RetrievalError(f"unknown modality {modality!r}")


@dataclass
class TaskResult:
    recalls: dict[int, float] | None
    n_queries: int
    corpus_size: int
    skipped: int

    @property
    def defined(self) -> bool:
        return self.recalls is not None


@dataclass
class Report:
    ks: tuple[int, ...]
    tasks: dict[str, TaskResult]
    config_hash: str = ""
    checkpoint_step: int = 0
    n_pairs: int = 0


def _task_recalls(q_emb: np.ndarray, c_emb: np.ndarray, c_rank: np.ndarray,
                  gt_pos: np.ndarray, ks: tuple[int, ...]) -> dict[int, float]:
    """Recall@K by exact rank of each query's ground-truth candidate under
    descending score with lowest-id tie-break."""
    scores = q_emb @ c_emb.T
    gt_scores = scores[np.arange(len(gt_pos)), gt_pos]
    better = (scores > gt_scores[:, None]).sum(axis=1)
    tied = ((scores == gt_scores[:, None]) & (c_rank[None, :] < c_rank[gt_pos][:, None])).sum(axis=1)
    rank = better + tied + 1
    return {k: float((rank <= k).mean()) for k in ks}


def run_task_matrix(trigger: SideEmbeddings, recall: SideEmbeddings,
                    ks: tuple[int, ...] = (1, 5, 10),
                    tasks: tuple[TaskSpec, ...] = TASKS,
                    config_hash: str = "", checkpoint_step: int = 0) -> Report:
    """Evaluate Recall@K for each query->candidate modality combination.

    A pair is evaluated for a task only if the trigger has the query modality
    and its recall twin has the candidate modality; everything else counts as
    skipped. A task with no evaluable query is reported undefined, not zero.
    """
    if trigger.ids != recall.ids:
        raise RetrievalError("trigger and recall sides must list the same pairs")
    n = len(trigger.ids)
    if n < 1:
        raise RetrievalError("no pairs to evaluate")
    if len(ks) == 0 or min(ks) < 1:
        raise RetrievalError("k list must contain positive integers")

    results: dict[str, TaskResult] = {}
    for task in tasks:
        q_all, q_has = trigger.view(task.query_modality)
        c_all, c_has = recall.view(task.candidate_modality)
        cand_rows = np.flatnonzero(c_has)
        query_rows = np.flatnonzero(q_has & c_has)
        if cand_rows.size == 0 or query_rows.size == 0:
            results[task.name] = TaskResult(None, 0, int(cand_rows.size),
                                            n - int(query_rows.size))
            continue
        cand_ids = [recall.ids[i] for i in cand_rows]
        order = sorted(range(len(cand_ids)), key=lambda i: cand_ids[i])
        c_rank = np.empty(len(cand_ids), dtype=np.int64)
        for r, row in enumerate(order):
            c_rank[row] = r
        pos_of = {row: j for j, row in enumerate(cand_rows)}
        gt_pos = np.array([pos_of[i] for i in query_rows], dtype=np.int64)
        recalls = _task_recalls(q_all[query_rows], c_all[cand_rows],
                                c_rank, gt_pos, tuple(ks))
        results[task.name] = TaskResult(recalls, int(query_rows.size),
                                        int(cand_rows.size),
                                        n - int(query_rows.size))
    return Report(ks=tuple(ks), tasks=results, config_hash=config_hash,
                  checkpoint_step=checkpoint_step, n_pairs=n)


def format_table(report: Report) -> str:
    """Plain-text table, one row per task."""
    header = ["task"] + [f"R@{k}" for k in report.ks] + ["N", "corpus", "skipped"]
    rows = [header]
    for name, res in report.tasks.items():
        if res.defined:
            vals = [f"{res.recalls[k]:.4f}" for k in report.ks]
        else:
            vals = ["undefined" for _ in report.ks]
        rows.append([name] + vals + [str(res.n_queries), str(res.corpus_size),
                                     str(res.skipped)])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines)


def emit_report(report: Report, path, table_path=None) -> None:
    """Write the machine-readable report plus a plain-text table beside it."""
    obj = {
        "config_hash": report.config_hash,
        "checkpoint_step": report.checkpoint_step,
        "n_pairs": report.n_pairs,
        "ks": list(report.ks),
        "tasks": {
            name: {
                "recall": None if not res.defined else
                {str(k): res.recalls[k] for k in report.ks},
                "n": res.n_queries,
                "corpus_size": res.corpus_size,
                "skipped": res.skipped,
            }
            for name, res in report.tasks.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
    if table_path is None:
        table_path = str(path) + ".txt"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(format_table(report))
        fh.write("\n")


def load_report(path) -> Report:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    ks = tuple(obj["ks"])
    tasks = {}
    for name, res in obj["tasks"].items():
        recalls = None if res["recall"] is None else {
            int(k): float(val) for k, val in res["recall"].items()}
        tasks[name] = TaskResult(recalls, res["n"], res["corpus_size"], res["skipped"])
    return Report(ks=ks, tasks=tasks, config_hash=obj["config_hash"],
                  checkpoint_step=obj["checkpoint_step"], n_pairs=obj["n_pairs"])


# ---------------------------------------------------------------------------
# embedding files

def write_embeddings(path, ids: list[str], matrix: np.ndarray, modality: str,
                     config_hash: str = "", step: int = 0) -> None:
    """Packed float32 unit-norm rows with an inline id manifest."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise RetrievalError("matrix rows must match ids")
    meta = {
        "modality": modality,
        "config_hash": config_hash,
        "step": step,
        "count": len(ids),
        "dim": int(matrix.shape[1]),
    }
    raw = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<I", EMB_VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for ident in ids:
            b = ident.encode("utf-8")
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)
        fh.write(matrix.tobytes())


def read_embeddings(path) -> tuple[list[str], np.ndarray, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != EMB_MAGIC:
        raise DataError(f"{path}: not an embedding file")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != EMB_VERSION:
        raise DataError(f"{path}: unsupported embedding file version {version}")
    meta_len = struct.unpack("<Q", blob[8:16])[0]
    off = 16
    if off + meta_len > len(blob):
        raise DataError(f"{path}: truncated metadata")
    meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    ids = []
    for _ in range(meta["count"]):
        if off + 4 > len(blob):
            raise DataError(f"{path}: truncated id manifest")
        n = struct.unpack("<I", blob[off:off + 4])[0]
        off += 4
        ids.append(blob[off:off + n].decode("utf-8"))
        off += n
    nbytes = 4 * meta["count"] * meta["dim"]
    if off + nbytes != len(blob):
        raise DataError(f"{path}: embedding payload size mismatch")
    matrix = np.frombuffer(blob[off:], dtype="<f4").reshape(
        meta["count"], meta["dim"]).copy()
    return ids, matrix, meta
