"""Command-line entry point: ``novarec <subcommand> [flags]``.

Exit codes: 0 success, 1 usage, 2 missing input, 3 degenerate data,
4 format error, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .config import ABLATIONS, TrainConfig
from .data import load_interactions, load_split, save_graph, save_split, split_leave_one_out, \
    summarize, write_interactions
from .encoder import write_embeddings
from .errors import ConfigError, NovaError
from .evaluator import MetricsReport, evaluate_embeddings
from .fusion import FusionGraph
from .synthlab import BENCHMARK, RETAIL_SURROGATE, SynthConfig, generate, save_config, write_ground_truth
from .trainer import load_checkpoint, model_from_checkpoint, run_discovery, run_variant, save_checkpoint

log = logging.getLogger("novarec")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_DEGENERATE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5

GRAPH_FILE = "graph.nova"
TRAIN_FILE = "train.nova"
SPLIT_FILE = "split.txt"
CKPT_FILE = "model.ckpt"
PRESETS = {"benchmark": BENCHMARK, "retail": RETAIL_SURROGATE}


class UsageError(NovaError):
    exit_code = EXIT_USAGE


class MissingInput(NovaError):
    exit_code = EXIT_MISSING


@dataclass
class RunConfig:
    data: str = ""
    out: str = "."
    behaviors: tuple = ("view", "cart", "purchase")
    target: str = "purchase"
    seeds: tuple = (0,)
    ablation: str = "full"
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")


def _coerce(kind, value: str):
    kind = str(kind)
    if kind in ("int", "<class 'int'>"):
        return int(value)
    if kind in ("float", "<class 'float'>"):
        return float(value)
    return value


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_run_config(args) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flag_map = {"data": "data", "out": "out", "seed": "seed", "mu": "mu", "beta": "beta", "layers": "layers",
                "heads": "heads", "ablation": "ablation", "k": "eval_k", "epochs": "epochs",
                "seeds": "seeds", "behaviors": "behaviors", "target": "target"}
    for flag, key in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = str(v)
    types = TrainConfig.field_types()
    train_kw, run_kw = {}, {}
    for key, value in values.items():
        if key in types:
            train_kw[key] = _coerce(types[key], value)
        elif key in ("data", "out", "target", "ablation"):
            run_kw[key] = value
        elif key == "behaviors":
            run_kw[key] = tuple(s.strip() for s in value.split(",") if s.strip())
        elif key == "seeds":
            run_kw[key] = tuple(int(s) for s in value.split(",") if s.strip())
        elif key == "k":
            train_kw["eval_k"] = int(value)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    if "seed" in train_kw and "seeds" not in run_kw:
        run_kw["seeds"] = (train_kw["seed"],)
    return RunConfig(train=TrainConfig(**train_kw), **run_kw)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def _load_ingested(data: str):
    d = Path(data)
    _need(d, "data directory")
    return load_split(_need(d / TRAIN_FILE, "training graph"), _need(d / SPLIT_FILE, "split manifest"))


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cmd_ingest(args) -> int:
    rc = build_run_config(args)
    src = Path(rc.data)
    if not src.is_file():
        raise MissingInput(f"input log not found: {src}")
    graph = load_interactions(src, rc.behaviors, rc.target)
    split = split_leave_one_out(graph, rc.seeds[0], validation=not args.no_validation)
    out = _out_dir(rc.out)
    save_graph(graph, out / GRAPH_FILE)
    save_split(split, out / TRAIN_FILE, out / SPLIT_FILE)
    stats = summarize(graph)
    (out / "stats.json").write_text(json.dumps(stats.__dict__, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"users={stats.num_users} items={stats.num_items} interactions={stats.total_interactions} "
          f"test={len(split.test_pairs)} val={len(split.val_pairs)}")
    return EXIT_OK


def cmd_discover(args) -> int:
    rc = build_run_config(args)
    split = _load_ingested(rc.data)
    out = _out_dir(rc.out)
    cfg = rc.train.replace(seed=rc.seeds[0])
    disc = run_discovery(split, cfg)
    g = split.train
    disc.latent.write_tsv(out / "latent.tsv", g.user_ids or None, g.item_ids or None)
    _write_jsonl(out / "discover_log.jsonl", disc.alignment.history)
    print(f"latent positives={len(disc.latent)} unlabeled pairs={len(disc.views.aux_unlabeled.pairs())}")
    return EXIT_OK


def _train_one(split, cfg: TrainConfig, variant: str, out: Path | None, discovery=None):
    log_path = out / "train_log.jsonl" if out else None
    if discovery is None and variant in ("full", "no-filter", "random-latent"):
        discovery = run_discovery(split, cfg)
    res = run_variant(split, cfg, variant, discovery=discovery, log_path=log_path)
    return res, discovery


def cmd_train(args) -> int:
    rc = build_run_config(args)
    split = _load_ingested(rc.data)
    out = _out_dir(rc.out)
    cfg = rc.train.replace(seed=rc.seeds[0])
    res, disc = _train_one(split, cfg, rc.ablation, out)
    digest = save_checkpoint(res.model, out / CKPT_FILE, {"seed": cfg.seed})
    if disc is not None:
        g = split.train
        disc.latent.write_tsv(out / "latent.tsv", g.user_ids or None, g.item_ids or None)
    print(f"checkpoint={out / CKPT_FILE} sha256={digest} epochs={len(res.log)} best_epoch={res.best_epoch}")
    return EXIT_OK


def _report_files(out: Path, report: MetricsReport, variant: str) -> None:
    rows = report.records(variant)
    rows.append({"seed": "mean", "hr": report.hr_at_k, "ndcg": report.ndcg_at_k, "k": report.k,
                 "variant": variant})
    _write_jsonl(out / "metrics.jsonl", rows)
    with open(out / "summary.tsv", "w", encoding="utf-8") as fh:
        fh.write(f"variant\tseed\tHR@{report.k}\tNDCG@{report.k}\n")
        for r in rows:
            fh.write(f"{variant}\t{r['seed']}\t{r['hr']:.6f}\t{r['ndcg']:.6f}\n")


def cmd_evaluate(args) -> int:
    rc = build_run_config(args)
    split = _load_ingested(rc.data)
    out = _out_dir(rc.out)
    k = rc.train.eval_k
    per_seed = []
    if args.checkpoint:
        for path in args.checkpoint:
            _need(Path(path), "checkpoint")
            meta, _ = load_checkpoint(path)
            model = model_from_checkpoint(path)
            with torch.no_grad():
                u, i = model(FusionGraph(split.train, model.user_emb.dtype)).final()
            hr, ndcg, _ = evaluate_embeddings(u.numpy(), i.numpy(), split.train, split.test_pairs, k)
            per_seed.append((meta.get("seed", 0), hr, ndcg))
    else:
        for seed in rc.seeds:
            cfg = rc.train.replace(seed=seed)
            res, _ = _train_one(split, cfg, rc.ablation, None)
            u, i = res.embeddings()
            hr, ndcg, _ = evaluate_embeddings(u, i, split.train, split.test_pairs, k)
            per_seed.append((seed, hr, ndcg))
    report = MetricsReport(float(np.mean([p[1] for p in per_seed])), float(np.mean([p[2] for p in per_seed])),
                           k, per_seed)
    _report_files(out, report, rc.ablation)
    print(f"{rc.ablation} HR@{k}={report.hr_at_k:.4f} NDCG@{k}={report.ndcg_at_k:.4f} over {len(per_seed)} run(s)")
    return EXIT_OK


def parse_grid(grid: str) -> list[dict]:
    """``mu=0.2,0.4;layers=1,2`` -> cartesian product of assignments."""
    axes = []
    for part in (grid or "").split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"grid axis {part!r} lacks '='")
        key, values = part.split("=", 1)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"grid axis {key!r} has no values")
        axes.append((key.strip(), vals))
    if not axes:
        raise UsageError("sweep grid is empty")
    types = TrainConfig.field_types()
    for key, _ in axes:
        if key not in types:
            raise UsageError(f"grid key {key!r} is not a training parameter")
    return [{k: _coerce(types[k], v) for (k, _), v in zip(axes, combo)}
            for combo in itertools.product(*(vals for _, vals in axes))]


def cmd_sweep(args) -> int:
    grid = parse_grid(args.grid)
    rc = build_run_config(args)
    split = _load_ingested(rc.data)
    out = _out_dir(rc.out)
    keys = list(grid[0])
    k = rc.train.eval_k
    with open(out / "sweep.tsv", "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys + ["seed", f"HR@{k}", f"NDCG@{k}"]) + "\n")
        for point in grid:
            for seed in rc.seeds:
                cfg = rc.train.replace(seed=seed, **point)
                res, _ = _train_one(split, cfg, rc.ablation, None)
                u, i = res.embeddings()
                hr, ndcg, _ = evaluate_embeddings(u, i, split.train, split.test_pairs, k)
                fh.write("\t".join([str(point[x]) for x in keys] + [str(seed), f"{hr:.6f}", f"{ndcg:.6f}"]) + "\n")
                fh.flush()
    print(f"sweep rows={len(grid) * len(rc.seeds)} -> {out / 'sweep.tsv'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    base = PRESETS[args.preset]
    overrides = read_config_file(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    types = {f.name: f.type for f in fields(SynthConfig)}
    unknown = set(overrides) - set(types)
    if unknown:
        raise ConfigError(f"unknown synth keys {sorted(unknown)}")
    cfg = dataclasses.replace(base, **{key: _coerce(types[key], v) for key, v in overrides.items()})
    graph, truth = generate(cfg)
    out = _out_dir(args.out or ".")
    write_interactions(graph, out / "log.tsv")
    write_ground_truth(truth, out / "truth.tsv", graph.user_ids, graph.item_ids)
    save_config(cfg, out / "synth_config.txt")
    print(f"users={graph.num_users} items={graph.num_items} interactions={graph.total_interactions} "
          f"planted={len(truth.planted_latent)} noise={len(truth.noise)}")
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    rc = build_run_config(args)
    split = _load_ingested(rc.data)
    path = Path(args.checkpoint[0]) if args.checkpoint else Path(rc.out) / CKPT_FILE
    _need(path, "checkpoint")
    model = model_from_checkpoint(path)
    with torch.no_grad():
        u, i = model(FusionGraph(split.train, model.user_emb.dtype)).final()
    out = _out_dir(rc.out)
    write_embeddings(out / "embeddings.bin", u.numpy(), i.numpy())
    print(f"wrote {out / 'embeddings.bin'} ({u.shape[0]} users, {i.shape[0]} items, d={u.shape[1]})")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="novarec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key=value file; flags override it")
        sp.add_argument("--data")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--seeds", help="comma-separated seeds, one run each")
        sp.add_argument("--mu", type=float)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--layers", type=int)
        sp.add_argument("--heads", type=int)
        sp.add_argument("--ablation", choices=ABLATIONS)
        sp.add_argument("--k", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--behaviors", help="comma-separated behavior names, target included")
        sp.add_argument("--target")
        return sp

    s = common(sub.add_parser("ingest", help="parse a TSV log and write graph + split"))
    s.add_argument("--no-validation", action="store_true", help="skip the early-stopping holdout")
    s.set_defaults(func=cmd_ingest)
    common(sub.add_parser("discover", help="alignment phase and latent positive export")).set_defaults(func=cmd_discover)
    common(sub.add_parser("train", help="train one variant and write a checkpoint")).set_defaults(func=cmd_train)
    s = common(sub.add_parser("evaluate", help="HR@K / NDCG@K over seeds or checkpoints"))
    s.add_argument("--checkpoint", nargs="+")
    s.set_defaults(func=cmd_evaluate)
    s = common(sub.add_parser("sweep", help="grid over training parameters"))
    s.add_argument("--grid", default="", help="e.g. 'mu=0.2,0.4,0.6;layers=1,2'")
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("synth", help="write a synthetic log with ground truth")
    s.add_argument("--preset", choices=sorted(PRESETS), default="benchmark")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)
    s = common(sub.add_parser("dump-embeddings", help="export final embeddings as NOVAEMB1"))
    s.add_argument("--checkpoint", nargs=1)
    s.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except NovaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
