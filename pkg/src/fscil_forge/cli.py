"""Command-line entry point: ``fscil-forge <command> [options]``.

Exit codes: 0 success, 1 runtime or protocol error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import SUITES, build_schedule, load_manifest, load_schedule, shipped_schedule
from .config import RunConfig
from .datasets import ScheduleClouds, write_synthetic_dataset
from .encoders import EmbeddingMatrix, build_prototype_bank, load_embeddings, write_embeddings
from .errors import ConfigError, ForgeError, ManifestError
from .learner import FeatureExtractor, load_checkpoint, predict, run_experiment, save_checkpoint
from .metrics import PredictionLog, PredictionRow, compile_report
from .rfe import fit_basis, load_basis, save_basis

log = logging.getLogger("fscil_forge")

USAGE_ERRORS = (ConfigError, ManifestError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError)

# rows of the ablation grid as (rfe, snc, cl)
ABLATION_ROWS = [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0), (1, 1, 1)]


def _on_off(text: str) -> bool:
    t = text.lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON config file; flags below override its keys")
    g.add_argument("--rfe", type=_on_off, help="redundant feature eliminator on/off")
    g.add_argument("--snc", type=_on_off, help="point adapter and fusion on/off")
    g.add_argument("--cl", type=_on_off, help="contrastive loss on/off")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--base-epochs", type=int)
    g.add_argument("--inc-epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--energy", type=float, help="basis energy fraction")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (JSON value)")


def _config_from(args) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if getattr(args, "config", None) else RunConfig().to_dict()
    flags = {"rfe_enabled": args.rfe, "snc_enabled": args.snc, "cl_enabled": args.cl, "master_seed": args.seed,
             "base_epochs": args.base_epochs, "inc_epochs": args.inc_epochs, "lr": args.lr,
             "energy_fraction": args.energy}
    base.update({k: v for k, v in flags.items() if v is not None})
    base.update(_parse_set(args.set))
    return RunConfig.from_dict(base)


def _schedule_root(path) -> Path:
    return Path(path).resolve().parent


# --- commands -----------------------------------------------------------------


def cmd_gen_benchmark(args) -> int:
    if args.task:
        schedule = shipped_schedule(args.task, args.per_session)
    else:
        if not (args.base and args.inc):
            raise ConfigError("give --task or both --base and --inc manifests")
        aliases = []
        if args.aliases:
            doc = json.loads(Path(args.aliases).read_text())
            aliases = [tuple(p) for p in (doc if isinstance(doc, list) else doc.get("pairs", []))]
        schedule = build_schedule(load_manifest(args.base), load_manifest(args.inc), args.per_session, aliases)
    text = schedule.dumps()
    if args.out:
        Path(args.out).write_text(text)
    sizes = schedule.sizes()
    print(f"{len(sizes)} sessions: {','.join(map(str, sizes))}")
    return 0


def cmd_gen_synthetic_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base, inc = write_synthetic_dataset(out, args.n_base, args.n_inc, args.train, args.test, args.points, args.seed,
                                        args.noisy)
    schedule = build_schedule(load_manifest(base), load_manifest(inc), args.per_session)
    (out / "schedule.json").write_text(schedule.dumps())
    print(f"wrote {base.name}, {inc.name}, schedule.json to {out}; sessions: {','.join(map(str, schedule.sizes()))}")
    return 0


def cmd_embed(args) -> int:
    cfg = _config_from(args)
    if args.kind == "text":
        if args.schedule:
            classes = [c for sess in load_schedule(args.schedule).sessions for c in sess.classes]
        else:
            classes = args.classes
        if not classes:
            raise ConfigError("text embeddings need --schedule or --classes")
        bank = build_prototype_bank(classes, cfg.dim)
        matrix = EmbeddingMatrix(bank.rows, list(bank.class_names))
    else:
        if not args.schedule:
            raise ConfigError(f"{args.kind} embeddings need --schedule")
        schedule = load_schedule(args.schedule)
        sess = schedule.session(args.session)
        sids = sess.train if args.split == "train" else sess.test
        ex = FeatureExtractor(cfg, ScheduleClouds(schedule, _schedule_root(args.schedule)))
        F2D, f3D = ex.features(sids, clean_only=True)
        if args.kind == "depth":
            rows = F2D[:, 0].reshape(-1, cfg.dim)
            keys = [f"{s}#view{v}" for s in sids for v in range(cfg.n_views)]
        else:
            rows = f3D[:, 0]
            keys = list(sids)
        matrix = EmbeddingMatrix(rows, keys)
    sidecar = write_embeddings(args.out, matrix)
    print(f"wrote {matrix.rows.shape[0]} x {matrix.dim} embeddings to {args.out} (keys in {sidecar.name})")
    return 0


def cmd_fit_basis(args) -> int:
    if args.emb:
        rows = load_embeddings(args.emb).rows
        energy = args.energy if args.energy is not None else RunConfig().energy_fraction
    else:
        if not args.schedule:
            raise ConfigError("fit-basis needs --emb or --schedule")
        cfg = _config_from(args)
        energy = args.energy if args.energy is not None else cfg.energy_fraction
        schedule = load_schedule(args.schedule)
        ex = FeatureExtractor(cfg, ScheduleClouds(schedule, _schedule_root(args.schedule)))
        F2D, _ = ex.features(schedule.session(1).train, clean_only=True)
        rows = F2D.reshape(-1, cfg.dim)
    basis = fit_basis(rows, energy)
    save_basis(args.out, basis)
    print(f"M={basis.n_components} of C={basis.dim}, retained energy {basis.retained_energy():.6f}")
    return 0


def _write_run_outputs(run: Path, log_: PredictionLog, schedule, cfg: RunConfig, name: str = "predictions.csv"):
    (run / name).write_text(log_.to_csv())
    report = compile_report(log_, schedule, cfg.to_dict(), cfg.ncacc_literal)
    (run / "report.json").write_text(report.to_json())
    (run / "report.txt").write_text(report.render_table())
    return report


def cmd_train(args) -> int:
    cfg = _config_from(args)
    schedule = load_schedule(args.schedule)
    run = Path(args.run_dir)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(cfg.dumps())
    (run / "schedule.json").write_text(schedule.dumps())
    (run / "schedule_root.txt").write_text(str(_schedule_root(args.schedule)) + "\n")

    def on_session(b, state, memory, rows):
        save_checkpoint(run / "checkpoints" / f"session_{b:02d}.ckpt", state)
        if b == 1 and state.basis is not None:
            save_basis(run / "basis.pcv1", state.basis)
        h = state.history[-1]
        print(f"session {b}: {h['n_train']} training samples, final loss {h['epoch_losses'][-1]:.4f}, "
              f"accuracy {np.mean([r.true_label == r.pred_label for r in rows]):.4f}")

    clouds = ScheduleClouds(schedule, _schedule_root(args.schedule))
    state, memory, full = run_experiment(schedule, clouds, cfg, sessions=args.sessions, on_session=on_session)
    (run / "memory.json").write_text(json.dumps(memory.slots, indent=1) + "\n")
    (run / "history.json").write_text(json.dumps(state.history, indent=1) + "\n")
    report = _write_run_outputs(run, full, schedule, cfg)
    print(report.render_table(), end="")
    return 0


def _load_run(run: Path):
    if not (run / "config.json").exists():
        raise ConfigError(f"{run} is not a run directory (no config.json)")
    cfg = RunConfig.load(run / "config.json")
    schedule = load_schedule(run / "schedule.json")
    root_file = run / "schedule_root.txt"
    root = Path(root_file.read_text().strip()) if root_file.exists() else run
    return cfg, schedule, root


def cmd_eval(args) -> int:
    run = Path(args.run_dir)
    cfg, schedule, root = _load_run(run)
    ckpts = sorted((run / "checkpoints").glob("session_*.ckpt"))
    if not ckpts:
        raise ConfigError(f"no checkpoints in {run / 'checkpoints'}")
    ex = FeatureExtractor(cfg, ScheduleClouds(schedule, root))
    basis = load_basis(run / "basis.pcv1") if cfg.rfe_enabled else None
    intro = schedule.intro_session()
    full = PredictionLog()
    for path in ckpts:
        state = load_checkpoint(path)
        b = state.session
        if args.session and b != args.session:
            continue
        state.basis = basis
        visible = schedule.visible_classes(b)
        test_ids = [s for k in range(1, b + 1) for s in schedule.session(k).test]
        preds = predict(state, test_ids, ex, visible, cfg)
        full.extend(PredictionRow(b, s, schedule.class_of(s), p, intro[schedule.class_of(s)])
                    for s, p in zip(test_ids, preds))
    out = run / args.out
    out.write_text(full.to_csv())
    print(f"wrote {len(full)} prediction rows to {out}")
    return 0


def cmd_report(args) -> int:
    if args.run_dir:
        run = Path(args.run_dir)
        cfg, schedule, _ = _load_run(run)
        pred_path = Path(args.predictions) if args.predictions else run / "predictions.csv"
        out_dir = run
    else:
        if not (args.predictions and args.schedule):
            raise ConfigError("report needs --run-dir, or --predictions with --schedule")
        cfg, schedule = RunConfig(), load_schedule(args.schedule)
        pred_path, out_dir = Path(args.predictions), Path(args.out_dir or ".")
    literal = args.ncacc_literal or cfg.ncacc_literal
    report = compile_report(PredictionLog.from_csv(pred_path.read_text()), schedule, cfg.to_dict(), literal)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.txt").write_text(report.render_table())
    print(report.render_table(), end="")
    return 0


def ablation_grid(schedule, clouds, cfg: RunConfig, seeds, full_grid: bool = False):
    """Mean report values per (rfe, snc, cl) row over ``seeds``."""
    rows = list(itertools.product((0, 1), repeat=3)) if full_grid else ABLATION_ROWS
    out = []
    for flags in rows:
        reports = []
        for seed in seeds:
            c = cfg.replace(rfe_enabled=bool(flags[0]), snc_enabled=bool(flags[1]), cl_enabled=bool(flags[2]),
                            master_seed=seed)
            _, _, full = run_experiment(schedule, clouds, c)
            reports.append(compile_report(full, schedule, c.to_dict(), c.ncacc_literal))
        out.append((flags, reports))
    return out


def render_ablation(grid) -> str:
    def mean(xs):
        return 100 * float(np.mean(xs))

    n = len(grid[0][1][0].acc)
    head = ["RFE", "SNC", "CL", "", *[str(i) for i in range(n)], "NCAcc", "Delta", "F"]
    lines = [head]
    for flags, reps in grid:
        marks = ["x" if f else "-" for f in flags]
        acc = [mean([r.acc[i] for r in reps]) for i in range(n)]
        macc = [mean([r.macc[i] for r in reps]) for i in range(n)]
        lines.append([*marks, "micro", *[f"{a:.1f}" for a in acc], f"{mean([r.ncacc for r in reps]):.1f}",
                      f"{mean([r.delta_micro for r in reps]):.1f}", f"{mean([r.f_micro for r in reps]):.1f}"])
        lines.append(["", "", "", "macro", *[f"{a:.1f}" for a in macc], f"{mean([r.ncacc_macro for r in reps]):.1f}",
                      f"{mean([r.delta_macro for r in reps]):.1f}", f"{mean([r.f_macro for r in reps]):.1f}"])
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    schedule = load_schedule(args.schedule)
    clouds = ScheduleClouds(schedule, _schedule_root(args.schedule))
    seeds = args.seeds or [cfg.master_seed]
    grid = ablation_grid(schedule, clouds, cfg, seeds, args.full_grid)
    text = render_ablation(grid)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(text)
        doc = [{"rfe": f[0], "snc": f[1], "cl": f[2], "seeds": list(seeds),
                "reports": [json.loads(r.to_json()) for r in reps]} for f, reps in grid]
        (out / "ablation.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(text, end="")
    return 0


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fscil-forge", description="Few-shot class-incremental 3D classification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-benchmark", help="build a session schedule from base/incremental manifests")
    g.add_argument("--task", choices=sorted(SUITES), help="shipped suite instead of --base/--inc")
    g.add_argument("--base")
    g.add_argument("--inc")
    g.add_argument("--aliases", help="JSON list of [name, name] pairs treated as overlapping")
    g.add_argument("--per-session", type=int, default=4)
    g.add_argument("--out", help="schedule JSON path")
    g.set_defaults(func=cmd_gen_benchmark)

    s = sub.add_parser("gen-synthetic-data", help="write a synthetic point-cloud dataset and its schedule")
    s.add_argument("--out", required=True)
    s.add_argument("--n-base", type=int, default=10)
    s.add_argument("--n-inc", type=int, default=6)
    s.add_argument("--per-session", type=int, default=2)
    s.add_argument("--train", type=int, default=5, help="training samples per class")
    s.add_argument("--test", type=int, default=5, help="test samples per class")
    s.add_argument("--points", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noisy", action="store_true", help="scan-like noise on incremental classes")
    s.set_defaults(func=cmd_gen_synthetic_data)

    e = sub.add_parser("embed", help="precompute EMB1 embeddings with the toy encoders")
    e.add_argument("--kind", choices=("depth", "points", "text"), default="depth")
    e.add_argument("--schedule")
    e.add_argument("--classes", nargs="*")
    e.add_argument("--session", type=int, default=1)
    e.add_argument("--split", choices=("train", "test"), default="train")
    e.add_argument("--out", required=True)
    _add_config_args(e)
    e.set_defaults(func=cmd_embed)

    f = sub.add_parser("fit-basis", help="fit the principal basis on base-session depth features")
    f.add_argument("--emb", help="EMB1 sidecar JSON (or .emb path with sidecar)")
    f.add_argument("--schedule")
    f.add_argument("--out", required=True)
    _add_config_args(f)
    f.set_defaults(func=cmd_fit_basis)

    t = sub.add_parser("train", help="run sessions 1..B and write a run directory")
    t.add_argument("--schedule", required=True)
    t.add_argument("--run-dir", required=True)
    t.add_argument("--sessions", type=int, help="stop after this many sessions")
    _add_config_args(t)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="recompute predictions from a run's checkpoints")
    v.add_argument("--run-dir", required=True)
    v.add_argument("--session", type=int)
    v.add_argument("--out", default="predictions_eval.csv")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render metrics from a prediction log")
    r.add_argument("--run-dir")
    r.add_argument("--predictions")
    r.add_argument("--schedule")
    r.add_argument("--out-dir")
    r.add_argument("--ncacc-literal", action="store_true", help="average NCAcc over sessions 1..B")
    r.set_defaults(func=cmd_report)

    a = sub.add_parser("ablate", help="component ablation grid over RFE/SNC/CL")
    a.add_argument("--schedule", required=True)
    a.add_argument("--seeds", type=int, nargs="*")
    a.add_argument("--full-grid", action="store_true", help="all 8 flag combinations instead of 5 rows")
    a.add_argument("--out-dir")
    _add_config_args(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
