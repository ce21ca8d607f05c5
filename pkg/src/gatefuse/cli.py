"""Command-line front end: synthetic data generation, training, embedding
export, retrieval evaluation, and gradient verification.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure (divergence or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, model, retrieval, trainer, verify
from .config import ConfigError, RunConfig, load_config, parse_override
from .data import DataError
from .engine import NumericError, ShapeError
from .losses import LossError
from .gradcheck import gradcheck
from .retrieval import RetrievalError
from .trainer import DivergenceError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ENV_CONFIG = "GATEFUSE_CONFIG"


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; route them to the config exit code
    def error(self, message):
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"config file (default ${ENV_CONFIG})")
    p.add_argument("--set", dest="sets", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")


def _resolve_config(args, inline: dict[str, object] | None = None) -> RunConfig:
    path = args.config or os.environ.get(ENV_CONFIG) or None
    overrides: dict[str, object] = {}
    for item in args.sets:
        key, value = parse_override(item)
        overrides[key] = value
    for key, value in (inline or {}).items():
        if value is not None:
            overrides[key] = value
    return load_config(path, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gatefuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic pair corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("jsonl", "packed"), default="jsonl")
    p.add_argument("--pairs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--tokens-v", type=int)
    p.add_argument("--tokens-t", type=int)
    p.add_argument("--dim-v", type=int)
    p.add_argument("--dim-t", type=int)
    p.add_argument("--pair-noise", type=float)
    p.add_argument("--token-noise", type=float)
    p.add_argument("--missing-rate", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the encoder on a pair corpus")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--ablate", action="append", default=[],
                   choices=("cmal", "clal", "imcl", "gating"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true",
                   help="resume despite a config hash mismatch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="export embeddings for one pair side")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--side", required=True, choices=("trigger", "recall"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="run the retrieval task matrix")
    _add_common(p)
    p.add_argument("--ckpt")
    p.add_argument("--emb", help="directory with exported embedding files")
    p.add_argument("--data")
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--tasks", help="comma list of task names (default: all 9)")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    _add_common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=64,
                   help="sampled coordinates per parameter tensor")
    p.add_argument("--corrupt-param", help="testing hook: corrupt one analytic gradient")
    p.set_defaults(func=cmd_gradcheck)

    return parser


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    inline = {
        "data.pairs": args.pairs, "data.seed": args.seed,
        "data.latent_dim": args.latent_dim,
        "data.tokens_v": args.tokens_v, "data.tokens_t": args.tokens_t,
        "data.dim_v": args.dim_v, "data.dim_t": args.dim_t,
        "data.pair_noise": args.pair_noise, "data.token_noise": args.token_noise,
        "data.missing_rate": args.missing_rate,
    }
    cfg = _resolve_config(args, inline)
    spec = cfg.synthetic_spec()
    records = data.generate(spec)
    data.write_dataset(records, args.out, args.format)
    missing = {name: sum(1 for r in records if getattr(r, name) is None)
               for name in ("trigger_image", "trigger_text",
                            "recall_image", "recall_text")}
    print(f"config hash: {cfg.hash}")
    print(f"wrote {len(records)} pairs to {args.out} ({args.format}), "
          f"dims image={spec.dim_v} text={spec.dim_t}")
    print("missing payloads: " + ", ".join(f"{k}={v}" for k, v in missing.items()))
    return EXIT_OK


def _check_data_dims(records, model_cfg) -> None:
    for rec in records:
        for name, want in (("trigger_image", model_cfg.dim_v),
                           ("recall_image", model_cfg.dim_v),
                           ("trigger_text", model_cfg.dim_t),
                           ("recall_text", model_cfg.dim_t)):
            arr = getattr(rec, name)
            if arr is not None and arr.shape[1] != want:
                raise DataError(
                    f"{rec.pair_id}: {name} dim {arr.shape[1]}, expected {want} "
                    f"(model.dim_v={model_cfg.dim_v}, model.dim_t={model_cfg.dim_t})")


def cmd_train(args) -> int:
    inline = {
        "train.steps": args.steps, "train.seed": args.seed,
        "train.batch_size": args.batch_size,
    }
    for name in args.ablate:
        inline[f"train.disable_{name}"] = True
    cfg = _resolve_config(args, inline)
    records = data.read_dataset(args.data)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    _check_data_dims(records, model_cfg)

    resume = None
    if args.resume:
        resume = trainer.load_checkpoint(args.resume)
        if resume.config_hash != cfg.hash:
            print(f"warning: checkpoint config hash {resume.config_hash} "
                  f"!= current {cfg.hash}", file=sys.stderr)
            if not args.force:
                raise ConfigError("refusing to resume with a different config "
                                  "(pass --force to override)")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"config hash: {cfg.hash}")

    header = {"header": {
        "config_hash": cfg.hash,
        "gate_bypass": train_cfg.disable_gating,
        "disable_cmal": train_cfg.disable_cmal,
        "disable_clal": train_cfg.disable_clal,
        "disable_imcl": train_cfg.disable_imcl,
        "fixed_weights": train_cfg.fixed_weights,
        "steps": train_cfg.steps,
        "seed": train_cfg.seed,
    }}
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as log:
        log.write(json.dumps(header) + "\n")

        def log_fn(line):
            log.write(json.dumps(line) + "\n")

        def checkpoint_fn(ckpt):
            trainer.save_checkpoint(ckpt, out / f"checkpoint-{ckpt.step:06d}.bin")

        try:
            final, metrics = trainer.train(
                records, model_cfg, cfg.loss_config(), train_cfg,
                resume=resume, config_hash=cfg.hash, config=cfg.as_dict(),
                log_fn=log_fn, checkpoint_fn=checkpoint_fn)
        except DivergenceError as e:
            print(f"diverged: {e}", file=sys.stderr)
            return EXIT_NUMERIC

    trainer.save_checkpoint(final, out / "checkpoint.bin")
    last = metrics[-1] if metrics else {"total": float("nan")}
    print(f"trained {final.step} steps; final total loss {last['total']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def _encode_side(ckpt: trainer.Checkpoint, records, side: str):
    cfg = RunConfig(ckpt.config or {})
    model_cfg = cfg.model_config()
    _check_data_dims(records, model_cfg)
    bundles = [rec.bundle(side) for rec in records]
    ids = [rec.pair_id for rec in records]
    chunks_f, chunks_v, chunks_t, hv, ht = [], [], [], [], []
    chunk = 256
    for lo in range(0, len(bundles), chunk):
        part = bundles[lo:lo + chunk]
        f, v, t, has_v, has_t = model.encode_batch(
            ckpt.params, part, model_cfg,
            disable_gating=cfg.train_config().disable_gating)
        chunks_f.append(f)
        chunks_v.append(v)
        chunks_t.append(t)
        hv.append(has_v)
        ht.append(has_t)
    return retrieval.SideEmbeddings(
        ids=ids,
        f=np.concatenate(chunks_f).astype(np.float32),
        v=np.concatenate(chunks_v).astype(np.float32),
        t=np.concatenate(chunks_t).astype(np.float32),
        has_v=np.concatenate(hv), has_t=np.concatenate(ht))


def cmd_embed(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    records = data.read_dataset(args.data)
    side = _encode_side(ckpt, records, args.side)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = np.array(side.ids)
    for mod, matrix, keep in (("v", side.v, side.has_v),
                              ("t", side.t, side.has_t),
                              ("f", side.f, np.ones(len(ids), dtype=bool))):
        rows = np.flatnonzero(keep)
        path = out / f"{args.side}.{mod}.emb"
        retrieval.write_embeddings(path, [str(i) for i in ids[rows]],
                                   matrix[rows], modality=mod,
                                   config_hash=ckpt.config_hash,
                                   step=ckpt.step)
        print(f"wrote {rows.size} rows to {path}")
    print(f"config hash: {ckpt.config_hash}")
    return EXIT_OK


def _side_from_files(emb_dir: Path, side: str) -> tuple[retrieval.SideEmbeddings, dict]:
    paths = {mod: emb_dir / f"{side}.{mod}.emb" for mod in ("v", "t", "f")}
    for p in paths.values():
        if not p.exists():
            raise DataError(f"missing embedding file {p}")
    ids_f, mat_f, meta = retrieval.read_embeddings(paths["f"])
    hashes = {meta["config_hash"]}
    pos = {pid: i for i, pid in enumerate(ids_f)}
    dim = mat_f.shape[1]
    mats, has = {}, {}
    for mod in ("v", "t"):
        ids_m, mat_m, meta_m = retrieval.read_embeddings(paths[mod])
        hashes.add(meta_m["config_hash"])
        full = np.zeros((len(ids_f), dim), dtype=np.float32)
        flag = np.zeros(len(ids_f), dtype=bool)
        for pid, row in zip(ids_m, mat_m):
            if pid not in pos:
                raise DataError(f"{paths[mod]}: id {pid!r} not in fused manifest")
            full[pos[pid]] = row
            flag[pos[pid]] = True
        mats[mod] = full
        has[mod] = flag
    if len(hashes) != 1:
        raise DataError(f"embedding files carry mismatched config hashes: {sorted(hashes)}")
    side_emb = retrieval.SideEmbeddings(ids=ids_f, f=mat_f, v=mats["v"],
                                        t=mats["t"], has_v=has["v"], has_t=has["t"])
    return side_emb, meta


def cmd_eval(args) -> int:
    try:
        ks = tuple(int(x) for x in args.k.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"--k must be a comma list of integers, got {args.k!r}")
    if not ks:
        raise ConfigError("--k selected no values")
    if args.tasks:
        wanted = [x.strip() for x in args.tasks.split(",") if x.strip()]
        unknown = [x for x in wanted if x not in retrieval.TASK_NAMES]
        if unknown:
            raise ConfigError(f"unknown tasks {unknown}; choose from "
                              f"{list(retrieval.TASK_NAMES)}")
        tasks = tuple(t for t in retrieval.TASKS if t.name in wanted)
    else:
        tasks = retrieval.TASKS

    if bool(args.ckpt) == bool(args.emb):
        raise ConfigError("pass exactly one of --ckpt or --emb")

    if args.ckpt:
        if not args.data:
            raise ConfigError("--data is required with --ckpt")
        ckpt = trainer.load_checkpoint(args.ckpt)
        records = data.read_dataset(args.data)
        trigger = _encode_side(ckpt, records, "trigger")
        recall = _encode_side(ckpt, records, "recall")
        config_hash, step = ckpt.config_hash, ckpt.step
    else:
        emb_dir = Path(args.emb)
        trigger, meta_t = _side_from_files(emb_dir, "trigger")
        recall, meta_r = _side_from_files(emb_dir, "recall")
        if meta_t["config_hash"] != meta_r["config_hash"]:
            raise DataError("trigger and recall embeddings carry different config hashes")
        config_hash, step = meta_t["config_hash"], meta_t["step"]

    report = retrieval.run_task_matrix(trigger, recall, ks=ks, tasks=tasks,
                                       config_hash=config_hash,
                                       checkpoint_step=step)
    retrieval.emit_report(report, args.report)
    print(f"config hash: {config_hash}")
    print(retrieval.format_table(report))
    undefined = [n for n, r in report.tasks.items() if not r.defined]
    if undefined:
        print(f"undefined tasks (no evaluable queries): {', '.join(undefined)}",
              file=sys.stderr)
    print(f"report: {args.report}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config(args)
    print(f"config hash: {cfg.hash}")
    checks = [
        ("quadratic", verify.quadratic_graph(), min(args.tol, 1e-9)),
        ("gated-cross-attention", verify.gated_layer_graph(seed=args.seed), args.tol),
        ("full-model-loss", verify.full_loss_graph(seed=args.seed), args.tol),
    ]
    failed = False
    for name, graph, tol in checks:
        corrupt = args.corrupt_param if name == "full-model-loss" else None
        report = gradcheck(graph, {}, "loss", seed=args.seed, eps=args.eps,
                           tol=tol, coords_per_tensor=args.coords,
                           corrupt_parameter=corrupt)
        print(f"[{name}] {report.summary()}")
        failed = failed or not report.passed
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    print("all gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, RetrievalError, LossError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
