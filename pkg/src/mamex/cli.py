"""Command-line entry point: ``mamex synth | split | train | eval | ablate``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, data_hash, generate_synthetic, load_dataset, write_dataset,
                   write_split)
from .errors import ConfigError, DataError, MamexError, ParameterError
from .evaluation import evaluate, report_table, write_per_user
from .training import ModelConfig, VARIANTS, load_checkpoint, save_checkpoint, train

log = logging.getLogger("mamex")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 3, 4, 5

ABLATION_ROWS = ("full", "no_moe", "no_align", "no_mmf")
MOE_ROWS = ("joint_router", "mod_specific_router", "full")


def _prepare_out_dir(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in entries.items():
            fh.write(f"{k}={v}\n")


def run_experiment(config: ModelConfig, dataset: Dataset, log_path=None):
    """Split by ``config.seed``, train, and evaluate on the test-cold partition."""
    split = dataset.split(seed=config.seed)
    state, logs = train(config, split, log_path=log_path)
    return split, state, logs, evaluate(state.model, split, "test")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.n_items < 1 or args.n_users < 1:
        raise ParameterError("n_users and n_items must be >= 1")
    out = _prepare_out_dir(args.out_dir, args.force)
    interactions, table = generate_synthetic(args.n_users, args.n_items, args.dim, args.text_signal,
                                             args.image_signal, args.interactions_per_user, args.seed)
    write_dataset(out, interactions, table, {
        "generator": "synthetic", "seed": args.seed, "n_users": args.n_users, "n_items": args.n_items,
        "text_signal": args.text_signal, "image_signal": args.image_signal,
        "interactions_per_user": args.interactions_per_user,
    })
    print(f"wrote {len(interactions.records)} interactions, {args.n_items} items to {out}")
    return EXIT_OK


def cmd_split(args) -> int:
    dataset = load_dataset(args.data_dir)
    out = _prepare_out_dir(args.out_dir, args.force)
    split = dataset.split(seed=args.seed)
    write_split(out, split.interactions)
    inter = split.interactions
    for name in ("train", "valid", "test"):
        print(f"{name}\titems={len(inter.items_in(name))}\trecords={len(inter.truth(name))}")
    return EXIT_OK


def _load_config(args) -> ModelConfig:
    overrides = {"seed": getattr(args, "seed", None), "variant": getattr(args, "variant", None)}
    if args.config:
        return ModelConfig.from_file(args.config, **overrides)
    return ModelConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data_dir)
    digest = data_hash(args.data_dir)
    out = _prepare_out_dir(args.out_dir, args.force)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    (out / "config.txt").write_text(config.effective().to_text(), encoding="utf-8")
    split, state, logs, result = run_experiment(config, dataset, log_path=out / "epoch_log.tsv")
    write_split(out / "split", split.interactions)
    state.data_hash = digest
    save_checkpoint(state, out / "checkpoint.bin", digest)
    report = report_table(result, split.modalities)
    (out / "report.tsv").write_text(report, encoding="utf-8")
    write_per_user(result, out / "per_user.tsv", split.interactions.user_ids, split.interactions.item_ids)
    _write_manifest(out / "manifest.txt", {
        "engine_version": __version__, "seed": config.seed, "data_dir": Path(args.data_dir).resolve(),
        "data_hash": digest, **{f"config.{k}": v for k, v in asdict(config).items()},
        "best_epoch": state.best_epoch, "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": "config.txt,epoch_log.tsv,checkpoint.bin,report.tsv,per_user.tsv,split/",
    })
    print(report, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    digest = data_hash(args.data_dir)
    if state.data_hash and state.data_hash != digest:
        raise DataError(f"data hash mismatch: checkpoint={state.data_hash} data_dir={digest}")
    split = load_dataset(args.data_dir).split(seed=state.model.config.seed)
    result = evaluate(state.model, split, args.partition)
    report = report_table(result, split.modalities)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{args.partition}.tsv").write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def _summary_table(rows, runs) -> str:
    lines = ["variant\tRec@20\tRec@20_std\tNDCG@20\tNDCG@20_std\tseeds"]
    for v in rows:
        rec = np.array([r["recall@20"] for r in runs[v]])
        ndcg = np.array([r["ndcg@20"] for r in runs[v]])
        lines.append(f"{v}\t{rec.mean():.4f}\t{rec.std():.4f}\t{ndcg.mean():.4f}\t{ndcg.std():.4f}\t{len(rec)}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    base = _load_config(args)
    dataset = load_dataset(args.data_dir)
    out = _prepare_out_dir(args.out_dir, args.force)
    requested = args.variants.split(",") if args.variants else list(dict.fromkeys(ABLATION_ROWS + MOE_ROWS))
    unknown = [v for v in requested if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s): {', '.join(unknown)}")
    if args.seeds < 1:
        raise ParameterError("--seeds must be >= 1")
    seeds = [base.seed + s for s in range(args.seeds)]
    runs = {v: [] for v in requested}
    with open(out / "runs.tsv", "w", encoding="utf-8") as fh:
        fh.write("variant\tseed\tRec@10\tRec@20\tNDCG@10\tNDCG@20\tbest_epoch\n")
        for seed in seeds:
            for v in requested:
                config = replace(base, variant=v, seed=seed)
                _, state, _, result = run_experiment(config, dataset)
                m = result.macro
                runs[v].append(m)
                fh.write(f"{v}\t{seed}\t{m['recall@10']!r}\t{m['recall@20']!r}\t{m['ndcg@10']!r}\t"
                         f"{m['ndcg@20']!r}\t{state.best_epoch}\n")
                log.info("ablate %s seed %d rec@20 %.4f", v, seed, m["recall@20"])
    tables = []
    for fname, rows in (("ablation.tsv", ABLATION_ROWS), ("moe_variants.tsv", MOE_ROWS)):
        chosen = [v for v in rows if v in runs]
        if chosen:
            text = _summary_table(chosen, runs)
            (out / fname).write_text(text, encoding="utf-8")
            tables.append(text)
    print("\n".join(tables), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mamex", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-modality dataset")
    p.add_argument("--n-users", type=int, default=200)
    p.add_argument("--n-items", type=int, default=500)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--text-signal", type=float, default=1.0)
    p.add_argument("--image-signal", type=float, default=0.0)
    p.add_argument("--interactions-per-user", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write the 8:1:1 item cold-start split")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_split)

    for name, func, help_ in (("train", cmd_train, "train and report test-cold metrics"),
                              ("ablate", cmd_ablate, "train every variant over several seeds")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config")
        p.add_argument("--data-dir", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true")
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS)
        else:
            p.add_argument("--seeds", type=int, default=5)
            p.add_argument("--variants", help="comma-separated subset of variants")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cold partition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--partition", choices=("valid", "test"), default="test")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MAMEX_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MamexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
