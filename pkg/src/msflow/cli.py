"""Command-line entry point: ``msflow <subcommand> ...``.

Subcommands: ``toygen``, ``preprocess``, ``train``, ``sample``, ``eval`` and
``verify``. Usage errors exit with status 2, validation failures with 1.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, stage_seed
from .dataset import (
    HierarchyStore,
    default_store_path,
    load_cloud,
    preprocess_dataset,
    save_cloud,
    toy_shapes,
)
from .exceptions import PSDViolationError
from .inference import generate
from .metrics import evaluate
from .model import load_checkpoint, save_checkpoint
from .training import train_stage
from .verify import check_eigenvalues, raw_block_covariance, run_checks

__all__ = ["main", "run", "build_parser"]

log = logging.getLogger("msflow")


class UsageError(Exception):
    pass


def _print_resolved(title, items):
    print(f"# resolved {title}")
    if isinstance(items, str):
        print(items, end="" if items.endswith("\n") else "\n")
    else:
        for key, value in items.items():
            if callable(value):
                continue
            print(f"{key} = {value}")
    print(flush=True)


def _load_config(path):
    if path is None:
        return RunConfig()
    if not Path(path).exists():
        raise ValueError(f"config file {path} does not exist")
    return RunConfig.from_file(path)


def _class_table(labels):
    return sorted({lab for lab in labels if lab and lab != "-"})


# --- subcommands -----------------------------------------------------------

def cmd_toygen(args):
    _print_resolved("toygen", vars(args))
    kinds = [k.strip() for k in args.kind.split(",") if k.strip()]
    out = Path(args.out)
    seeds = np.random.SeedSequence(args.seed).spawn(len(kinds))
    for kind, ss in zip(kinds, seeds):
        clouds = toy_shapes(kind, args.n, args.count, np.random.default_rng(ss))
        target = out / kind if len(kinds) > 1 else out
        target.mkdir(parents=True, exist_ok=True)
        for i, cloud in enumerate(clouds):
            save_cloud(target / f"{kind}_{i:05d}.{args.format}", cloud)
    print(f"wrote {args.count * len(kinds)} clouds to {out}")
    return 0


def cmd_preprocess(args):
    _print_resolved("preprocess", vars(args))
    store = preprocess_dataset(args.input, args.out, args.n, args.d, args.k, replicas=args.replicas,
                               seed=args.seed, n_init=args.n_init)
    print(f"stored {len(store)} hierarchies in {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    _print_resolved("run config", cfg.to_text())
    store = HierarchyStore(args.store)
    if not store.records:
        raise ValueError(f"store {args.store} is empty or has no manifest")
    if (store.n_points, store.ratio) != (cfg.n_points, cfg.ratio) or store.n_stages + 1 < cfg.n_stages:
        raise ValueError(
            f"store (N={store.n_points}, D={store.ratio}, K={store.n_stages}) does not match the "
            f"config (N={cfg.n_points}, D={cfg.ratio}, K={cfg.n_stages})"
        )
    stage = args.stage
    if not 0 <= stage < cfg.n_stages:
        raise ValueError(f"stage must be in [0, {cfg.n_stages - 1}], got {stage}")
    tc = cfg.train_config(stage)
    if args.epochs is not None:
        tc.epochs = args.epochs
    if stage < store.n_stages:
        coarse, fine = store.stage_pairs(stage)
    else:
        # the coarsest stage starts from pure noise, so its coarse endpoint is never used
        if cfg.schedule.start(stage) != 0.0:
            raise ValueError(f"store has no level {stage + 1}, needed because s_{stage} > 0")
        fine = store.level_array(stage).astype(np.float64)
        coarse = np.zeros((len(fine), fine.shape[1] // cfg.ratio, 3))
    classes = _class_table(store.labels())
    labels = None
    if cfg.arch.n_classes:
        if len(classes) > cfg.arch.n_classes:
            raise ValueError(f"store has {len(classes)} labels but n_classes = {cfg.arch.n_classes}")
        index = {lab: i for i, lab in enumerate(classes)}
        labels = np.array([index.get(lab, cfg.arch.n_classes) for lab in store.labels()])

    meta = {"stage": stage, "n_stages": cfg.n_stages, "ratio": cfg.ratio, "n_points": cfg.n_points,
            "intervals": ",".join(f"{s!r}:{e!r}" for s, e in cfg.schedule.intervals),
            "classes": ",".join(classes)}

    def on_epoch(epoch, state, report):
        log.info("stage %d epoch %d loss %.6f", stage, epoch, report.losses[-1])
        if args.every and (epoch + 1) % args.every == 0:
            save_checkpoint(args.out, state.model, state.ema, {**meta, "epoch": epoch + 1})

    report = train_stage((coarse, fine), stage, cfg.schedule, cfg.arch, tc, labels=labels, on_epoch=on_epoch)
    save_checkpoint(args.out, report.model, report.ema_model.params, {**meta, "epoch": tc.epochs})
    if args.losses:
        np.savetxt(args.losses, np.asarray(report.losses), fmt="%.9g")
    print(f"stage {stage}: {report.steps} steps, final epoch loss {report.losses[-1]:.6f}, saved {args.out}")
    return 0


def cmd_sample(args):
    cfg = _load_config(args.config)
    nfe = None
    if args.nfe:
        nfe = tuple(int(v) for v in args.nfe.split(","))
    sampler = cfg.sampler(nfe)
    _print_resolved("run config", cfg.to_text())
    _print_resolved("sampler", {"nfe_per_stage": sampler.nfe_per_stage, "seed": sampler.seed,
                                "count": args.count, "class": args.class_id})
    fields = [None] * cfg.n_stages
    classes = []
    for path in args.ckpts:
        live, ema, meta = load_checkpoint(path)
        stage = int(meta.get("stage", -1))
        if not 0 <= stage < cfg.n_stages:
            raise ValueError(f"{path}: checkpoint stage {stage} is not a stage of this config")
        if fields[stage] is not None:
            raise ValueError(f"two checkpoints given for stage {stage}")
        fields[stage] = live if args.live or ema is None else ema
        if meta.get("classes"):
            classes = meta["classes"].split(",")
    missing = [k for k, f in enumerate(fields) if f is None]
    if missing:
        raise ValueError(f"no checkpoint for stage(s) {missing}")

    condition = None
    if args.class_id is not None:
        if args.class_id in classes:
            condition = classes.index(args.class_id)
        else:
            try:
                condition = int(args.class_id)
            except ValueError:
                raise ValueError(f"unknown class {args.class_id!r}; known: {classes}") from None
        n_classes = fields[cfg.schedule.coarsest].arch.n_classes
        if not 0 <= condition < n_classes:
            raise ValueError(f"class id {condition} outside [0, {n_classes})")

    clouds = generate(fields, cfg.schedule, sampler, n_samples=args.count, condition=condition)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(clouds):
        save_cloud(out / f"sample_{i:05d}.{args.format}", cloud)
    print(f"wrote {args.count} samples to {out}")
    return 0


def _load_dir(path):
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{path} is not a directory")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in (".xyz", ".txt", ".ply", ".obj", ".bin"))
    if not files:
        raise ValueError(f"no clouds found in {path}")
    return [load_cloud(p) for p in files]


def cmd_eval(args):
    _print_resolved("eval", vars(args))
    gen = _load_dir(args.gen)
    ref = _load_dir(args.ref)
    sizes = {len(c) for c in gen + ref}
    if len(sizes) != 1:
        raise ValueError(f"all clouds must have the same number of points, found sizes {sorted(sizes)}")
    metrics = ("cd", "emd") if args.metric == "both" else (args.metric,)
    report = evaluate(gen, ref, metrics)
    print(report.to_text(), end="")
    if args.out:
        Path(args.out).write_text(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def _report_invalid_schedule(cfg_path):
    """Dense eigenvalue report for a schedule that fails validation."""
    import configparser

    from .config import parse_intervals

    cp = configparser.ConfigParser()
    cp.read(cfg_path)
    sch = cp["schedule"] if cp.has_section("schedule") else {}
    ratio = int(sch.get("ratio", 4))
    intervals = parse_intervals(sch.get("intervals", "0.6:1.0, 0.0:1.0"))
    for k in range(len(intervals) - 1):
        s_k, e_next = intervals[k][0], intervals[k + 1][1]
        if e_next <= 0:
            continue
        res = check_eigenvalues(raw_block_covariance(s_k, e_next, ratio, k), f"eigenvalues[stage {k}]")
        print(res.line())


def cmd_verify(args):
    try:
        cfg = _load_config(args.config)
    except ValueError:
        if args.config and Path(args.config).exists():
            _report_invalid_schedule(args.config)
        raise
    _print_resolved("run config", cfg.to_text())
    results = run_checks(cfg.schedule, np.random.default_rng(stage_seed(cfg.seed, 1 << 20)),
                         sampler_draws=args.draws, two_path_draws=args.two_path_draws)
    for res in results:
        print(res.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"error: {len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# --- parser ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="msflow", description="Multi-scale flow matching for point clouds.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("toygen", help="synthesise toy shapes")
    t.add_argument("--kind", required=True, help="sphere, torus, two_boxes, ring2d or a comma list")
    t.add_argument("--count", type=int, required=True)
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--format", choices=("xyz", "ply", "bin"), default="xyz")
    t.set_defaults(func=cmd_toygen)

    pp = sub.add_parser("preprocess", help="build the multi-level store")
    pp.add_argument("--in", dest="input", required=True)
    pp.add_argument("--out", default=None, help="store directory (default: $MFM_STORE or ./store)")
    pp.add_argument("--n", type=int, required=True)
    pp.add_argument("--d", type=int, default=4)
    pp.add_argument("--k", type=int, default=1, help="number of downsampling steps")
    pp.add_argument("--replicas", type=int, default=1)
    pp.add_argument("--seed", type=int, default=0)
    pp.add_argument("--n-init", type=int, default=4, help="clustering restarts per level")
    pp.set_defaults(func=cmd_preprocess)

    tr = sub.add_parser("train", help="train one stage")
    tr.add_argument("--store", default=None)
    tr.add_argument("--config", default=None)
    tr.add_argument("--stage", type=int, required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    tr.add_argument("--every", type=int, default=0, help="also checkpoint every this many epochs")
    tr.add_argument("--losses", default=None, help="write per-epoch losses to this file")
    tr.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate clouds with trained stages")
    s.add_argument("--ckpts", nargs="+", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--nfe", default=None, help="comma list, finest stage first")
    s.add_argument("--class", dest="class_id", default=None)
    s.add_argument("--live", action="store_true", help="use live weights instead of the EMA")
    s.add_argument("--format", choices=("xyz", "ply", "bin"), default="xyz")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="1-NNA of generated against reference clouds")
    e.add_argument("--gen", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--metric", choices=("cd", "emd", "both"), default="both")
    e.add_argument("--out", default=None, help="write the key/value report here")
    e.add_argument("--csv", default=None, help="write a CSV table here")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="statistical checks of the cross-stage lift")
    v.add_argument("--config", default=None)
    v.add_argument("--draws", type=int, default=100_000)
    v.add_argument("--two-path-draws", type=int, default=10_000)
    v.set_defaults(func=cmd_verify)
    return p


def run(argv=None):
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "preprocess" and args.out is None:
        args.out = default_store_path()
    if args.command == "train" and args.store is None:
        args.store = default_store_path()
    try:
        return args.func(args)
    except (ValueError, PSDViolationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
