"""Command-line entry point: train, sweep, analyze, plot, testfn, id-synthetic."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import curvature, harness, intrinsic_dim, landscape, models, spectral, svgplot, testfn
from .config import ConfigError, RunConfig

log = logging.getLogger("groklab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ANALYSES = ("spectral", "landscape", "curvature", "pca", "id", "phases", "fit-t4")
PLOTS = ("curves", "heatmap", "slice", "condition", "pca")


class UsageError(Exception):
    pass


def _parse_window(s: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in s.split(":"))
    except ValueError:
        raise UsageError(f"--window expects 'start:end', got {s!r}") from None
    return lo, hi


def _floats(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {s!r}") from None


def _load_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    cfg = RunConfig.load(path)
    if getattr(args, "seed", None) is not None:
        cfg.task.seed = args.seed
    return cfg


def _marks_text(m: harness.PhaseMarks) -> str:
    return " ".join(f"{k}={'-' if v is None else v}" for k, v in vars(m).items())


# ------------------------------------------------------------------ train / sweep


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} already exists and is not empty; pass --force to overwrite")
    try:
        res = harness.train(cfg, out, force=args.force, keep_in_memory=False)
    except Exception as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                                    "traceback": traceback.format_exc()}, indent=1))
        raise
    tr = res.trace
    final = f"final val_acc={tr.val_acc[-1]:.4f}" if len(tr) else "empty trace"
    print(f"{out}: {len(tr)} steps, {final}, {_marks_text(res.marks)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _load_config(args)
    lrs = _floats(args.lrs) if args.lrs else [base.optimizer.lr]
    wds = _floats(args.wds) if args.wds else [base.optimizer.weight_decay]
    rs = _floats(args.rs) if args.rs else [base.task.r]
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else [base.task.seed]
    grid = [(lr, wd, r, s) for lr in lrs for wd in wds for r in rs for s in seeds]
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} already exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    base.save(out / "base_config.json")
    results = harness.sweep(base, grid, out, workers=args.workers, force=args.force)
    failed = [s for s in results if s.error]
    for s in results:
        status = s.error or f"val_acc={s.final_val_acc:.4f} {_marks_text(s.marks)}"
        print(f"lr={s.lr:g} wd={s.weight_decay:g} r={s.r:g} seed={s.seed}: {status}")
    return EXIT_RUNTIME if failed and len(failed) == len(results) else EXIT_OK


# ------------------------------------------------------------------ analyze


def _run_inputs(run: Path):
    cfg_path = run / "config.json"
    if not cfg_path.is_file():
        raise UsageError(f"{run} has no config.json")
    cfg = RunConfig.load(cfg_path)
    _, _, train_b, val_b, model = harness.prepare(cfg)
    return cfg, model, train_b, val_b


def _trace(run: Path, cfg: RunConfig) -> harness.TrainTrace:
    path = run / "metrics.csv"
    if not path.is_file():
        raise UsageError(f"{path} not found; train the run first")
    from .data import build_dataset, split

    t = cfg.task
    sp = split(build_dataset(t.op_kind, t.p, t.q, t.symmetric), t.r, t.seed)
    return harness.TrainTrace.read_csv(path, cfg.model.n_classes, len(sp.train), len(sp.val))


def _ckpt_dir(run: Path) -> Path:
    d = run / "checkpoints"
    if not (d / "layout.json").is_file():
        raise UsageError(f"{d} has no layout.json; the run has no checkpoints")
    return d


def _require(d: Path, step: int, why: str) -> None:
    if not (d / f"step_{step}.bin").is_file():
        raise UsageError(f"missing checkpoint {d / f'step_{step}.bin'} (needed for {why})")


def _strided(d: Path, stride: int, why: str) -> list[int]:
    steps = models.checkpoint_steps(d)
    chosen = [s for s in steps if stride and s % stride == 0]
    if not chosen:
        raise UsageError(f"no checkpoints at multiples of {stride} in {d} ({why}); "
                         f"re-train with checkpoint_stride dividing {stride}")
    return chosen


def analyze_spectral(run: Path, cfg: RunConfig, args) -> list[Path]:
    tr = _trace(run, cfg)
    windows = [_parse_window(args.window)] if args.window else cfg.analysis.spectral_windows
    cutoff = args.cutoff if args.cutoff is not None else cfg.analysis.spectral_cutoff
    sigs = []
    for w in windows:
        if len(tr) < w[1]:
            raise UsageError(f"trace has {len(tr)} steps but window {w} needs {w[1]}")
        sigs.append(spectral.window_signature(tr.train_loss, w, cutoff, cfg.analysis.spectral_log_loss))
    spectral.write_spectral_csv(run / "spectral.csv", sigs)
    lo, hi = windows[0]
    spectral.write_periodogram_csv(run / "periodogram.csv",
                                   spectral.periodogram(spectral.detrend_lowpass(tr.train_loss[lo:hi], cutoff)))
    return [run / "spectral.csv", run / "periodogram.csv"]


def analyze_phases(run: Path, cfg: RunConfig, args) -> list[Path]:
    tr = _trace(run, cfg)
    m = harness.detect_phases(tr)
    path = run / "phases.json"
    path.write_text(json.dumps(vars(m), indent=1, sort_keys=True) + "\n")
    print(_marks_text(m))
    return [path]


def analyze_landscape(run: Path, cfg: RunConfig, args) -> list[Path]:
    cfg, model, train_b, val_b = _run_inputs(run)
    d = _ckpt_dir(run)
    layout = models.load_layout(d)
    kind = args.kind or cfg.analysis.slice_kind
    steps = args.steps or cfg.analysis.slice_steps or [cfg.budget]
    alphas = landscape.parse_alphas(args.alphas) if args.alphas else landscape.alpha_grid(*cfg.analysis.slice_alphas)
    evaluate = landscape.model_evaluator(model, train_b, val_b)
    out_dir = run / "slices"
    out_dir.mkdir(exist_ok=True)
    written = []
    for t in steps:
        _require(d, t, "the slice anchor")
        theta = models.load_checkpoint(d, t, layout)
        aux = None
        if kind == "to_optimum":
            _require(d, cfg.budget, "to_optimum directions (final checkpoint)")
            aux = models.load_checkpoint(d, cfg.budget, layout)
        elif kind == "next_step":
            _require(d, t + 1, "next_step directions")
            aux = models.load_checkpoint(d, t + 1, layout)
        elif kind == "to_init":
            _require(d, 0, "to_init directions")
            aux = models.load_checkpoint(d, 0, layout)
        direction = landscape.make_direction(kind, theta, aux, seed=cfg.task.seed, anchor_step=t)
        direction = landscape.filter_normalize(direction, theta, zero_policy="zero")
        sl = landscape.slice_1d(evaluate, theta, direction, alphas, anchor_step=t)
        path = out_dir / f"slice_{kind}_step{t}.csv"
        landscape.write_slice_csv(path, sl)
        written.append(path)
    return written


def _hvp_at(model, batch):
    x, y = batch

    def make(theta):
        return lambda v: models.hvp(model, theta, x, y, v)

    return make


def analyze_curvature(run: Path, cfg: RunConfig, args) -> list[Path]:
    cfg, model, train_b, _ = _run_inputs(run)
    d = _ckpt_dir(run)
    layout = models.load_layout(d)
    a = cfg.analysis
    steps = _strided(d, a.curvature_stride, "curvature")
    pts = curvature.condition_track(_hvp_at(model, train_b),
                                    ((s, models.load_checkpoint(d, s, layout)) for s in steps),
                                    a.curvature_tol, a.curvature_max_iter)
    curvature.write_curvature_csv(run / "curvature.csv", pts)
    return [run / "curvature.csv"]


def analyze_pca(run: Path, cfg: RunConfig, args) -> list[Path]:
    d = _ckpt_dir(run)
    layout = models.load_layout(d)
    steps = models.checkpoint_steps(d)
    if len(steps) < 3:
        raise UsageError(f"PCA needs at least 3 checkpoints in {d}, found {len(steps)}")
    steps = curvature.thin(steps, cfg.analysis.pca_max_checkpoints)
    pca = curvature.pca_trajectory([(s, models.load_checkpoint(d, s, layout).values) for s in steps],
                                   cfg.analysis.pca_max_checkpoints)
    curvature.write_pca_csv(run / "pca.csv", pca)
    print(f"explained variance: {pca.explained[0]:.4f} + {pca.explained[1]:.4f} = {pca.explained.sum():.4f}")
    return [run / "pca.csv"]


def analyze_id(run: Path, cfg: RunConfig, args) -> list[Path]:
    cfg, model, train_b, val_b = _run_inputs(run)
    d = _ckpt_dir(run)
    layout = models.load_layout(d)
    a = cfg.analysis
    steps = _strided(d, a.id_stride, "intrinsic dimension")
    rows = intrinsic_dim.layer_id_track(model, ((s, models.load_checkpoint(d, s, layout)) for s in steps),
                                        {"train": train_b[0], "val": val_b[0]}, method=a.id_method, k=a.id_k,
                                        position=a.id_position)
    intrinsic_dim.write_id_csv(run / "id.csv", rows)
    return [run / "id.csv"]


def analyze_fit(root: Path, args) -> list[Path]:
    points = []
    for run in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (run / "config.json").is_file() or not (run / "metrics.csv").is_file():
            continue
        cfg = RunConfig.load(run / "config.json")
        m = harness.detect_phases(_trace(run, cfg))
        if m.t4 is not None:
            points.append((cfg.task.r, m.t4))
    if len(points) < 3:
        raise UsageError(f"need at least 3 runs that reached t4 under {root}, found {len(points)}")
    fit = harness.fit_power_law(points)
    out = {"a": fit.a, "gamma": fit.gamma, "b": fit.b, "residual_rms": fit.residual_rms,
           "gamma_identifiable": fit.gamma_identifiable, "converged": fit.converged, "message": fit.message,
           "points": [list(p) for p in sorted(fit.points)]}
    path = root / "powerlaw.json"
    path.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    print(f"t4(r) = {fit.a:.6g} * r^(-{fit.gamma:.6g}) + {fit.b:.6g}  (rms {fit.residual_rms:.4g})")
    return [path]


def cmd_analyze(args) -> int:
    run = Path(args.dir)
    if not run.is_dir():
        raise UsageError(f"{run} is not a directory")
    if args.which == "fit-t4":
        written = analyze_fit(run, args)
    else:
        cfg_path = run / "config.json"
        if not cfg_path.is_file():
            raise UsageError(f"{run} has no config.json")
        cfg = RunConfig.load(cfg_path)
        fn = {"spectral": analyze_spectral, "phases": analyze_phases, "landscape": analyze_landscape,
              "curvature": analyze_curvature, "pca": analyze_pca, "id": analyze_id}[args.which]
        written = fn(run, cfg, args)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ------------------------------------------------------------------ plot


def _read_csv(path: Path) -> list[dict]:
    if not path.is_file():
        raise UsageError(f"{path} not found; run the matching analysis first")
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _col(rows, name):
    return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])


def cmd_plot(args) -> int:
    run = Path(args.dir)
    plots = run / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    if args.kind == "curves":
        rows = _read_csv(run / "metrics.csv")
        cfg = RunConfig.load(run / "config.json")
        tr = _trace(run, cfg)
        m = harness.detect_phases(tr)
        step = _col(rows, "step") + 1  # log axis needs step > 0
        fig = svgplot.Figure("Learning curves", "step + 1", "loss", "accuracy", logx=True, logy=True)
        fig.add(step, _col(rows, "train_loss"), "train loss")
        fig.add(step, _col(rows, "val_loss"), "val loss", dashed=True)
        fig.add(step, _col(rows, "train_acc"), "train acc", axis="right")
        fig.add(step, _col(rows, "val_acc"), "val acc", axis="right", dashed=True)
        for name in ("t2", "t4"):
            v = getattr(m, name)
            if v is not None:
                fig.vlines.append((v + 1, name))
        written.append(plots / "curves.svg")
        fig.save(written[-1])
    elif args.kind == "heatmap":
        rows = _read_csv(run / "sweep.csv")
        lrs = sorted({float(r["lr"]) for r in rows})
        wds = sorted({float(r["weight_decay"]) for r in rows})
        for metric in ("final_val_acc", "activity"):
            Z = np.full((len(wds), len(lrs)), np.nan)
            acc: dict = {}
            for r in rows:
                if r[metric] == "":
                    continue
                acc.setdefault((wds.index(float(r["weight_decay"])), lrs.index(float(r["lr"]))), []).append(float(r[metric]))
            for (j, i), vals in acc.items():
                Z[j, i] = np.mean(vals)
            path = plots / f"heatmap_{metric}.svg"
            svgplot.heatmap(Z, [f"{v:g}" for v in lrs], [f"{v:g}" for v in wds], metric, "learning rate",
                            "weight decay", path)
            written.append(path)
    elif args.kind == "slice":
        slices = sorted((run / "slices").glob("*.csv")) if (run / "slices").is_dir() else []
        if not slices:
            raise UsageError(f"no slice CSVs under {run / 'slices'}; run 'analyze --which landscape' first")
        for p in slices:
            sl = landscape.read_slice_csv(p)
            fig = svgplot.Figure(p.stem, "alpha", "loss", "accuracy")
            fig.add(sl.alphas, sl.train_loss, "train loss", color=svgplot.PALETTE[0])
            fig.add(sl.alphas, sl.val_loss, "val loss", color=svgplot.PALETTE[0], dashed=True)
            fig.add(sl.alphas, sl.train_acc, "train acc", color=svgplot.PALETTE[1], axis="right")
            fig.add(sl.alphas, sl.val_acc, "val acc", color=svgplot.PALETTE[1], axis="right", dashed=True)
            path = plots / f"{p.stem}.svg"
            fig.save(path)
            written.append(path)
    elif args.kind == "condition":
        rows = _read_csv(run / "curvature.csv")
        fig = svgplot.Figure("Hessian extremes", "step", "lambda_min / lambda_max", "eigenvalue")
        fig.add(_col(rows, "step"), _col(rows, "paper_condition"), "lambda_min / lambda_max")
        fig.add(_col(rows, "step"), _col(rows, "lambda_max"), "lambda_max", axis="right", dashed=True)
        written.append(plots / "condition.svg")
        fig.save(written[-1])
    elif args.kind == "pca":
        rows = _read_csv(run / "pca.csv")
        fig = svgplot.Figure("Trajectory PCA", "alpha", "beta")
        fig.add(_col(rows, "alpha"), _col(rows, "beta"), "checkpoints", scatter=True)
        written.append(plots / "pca.svg")
        fig.save(written[-1])
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# ------------------------------------------------------------------ testfn / id-synthetic


def cmd_testfn(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.fn == "rosenbrock":
        spec = testfn.TestFnSpec("rosenbrock_chained", 2, log_scale=True)
        x0 = (-2.0, 2.0)
    else:
        spec = testfn.TestFnSpec("rastrigin", 2, a=10.0, log_scale=True)
        x0 = (2.5, 2.5)
    res = testfn.race(spec, x0=x0, steps=args.steps)
    testfn.write_race_csv(out / "race.csv", res, every=args.every)
    testfn.write_contour_csv(out / "contour.csv", spec)
    for name, e in res.entries.items():
        state = "diverged" if e.diverged else ("reached" if e.reached else "not reached")
        print(f"{name:9s} final error {e.final_error:.3e}  {state}")
    return EXIT_OK


def cmd_id_synthetic(args) -> int:
    rows = intrinsic_dim.synthetic_battery(seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "id_synthetic.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "d", "n", "mle_inverse_k2", "twonn"])
        for r in rows:
            w.writerow([r.kind, r.d, r.n, repr(r.mle), repr(r.twonn)])
            print(f"{r.kind:8s} d={r.d} n={r.n:5d}  mle={r.mle:.3f}  twonn={r.twonn:.3f}")
    mle = np.array([r.mle for r in rows])
    tw = np.array([r.twonn for r in rows])
    print(f"Pearson(MLE, TWONN) = {np.corrcoef(mle, tw)[0, 1]:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groklab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="grid over lr x weight decay x r x seed")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lrs")
    s.add_argument("--wds")
    s.add_argument("--rs")
    s.add_argument("--seeds")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--force", action="store_true")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="post-hoc analyses of a run directory")
    a.add_argument("dir")
    a.add_argument("--which", choices=ANALYSES, required=True)
    a.add_argument("--window", help="spectral window 'start:end'")
    a.add_argument("--cutoff", type=float)
    a.add_argument("--alphas", help="slice grid 'lo:hi:n'")
    a.add_argument("--kind", choices=landscape.DIRECTION_KINDS)
    a.add_argument("--steps", type=int, nargs="*")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plot", help="render SVG figures from analysis CSVs")
    pl.add_argument("dir")
    pl.add_argument("--kind", choices=PLOTS, required=True)
    pl.set_defaults(func=cmd_plot)

    tf = sub.add_parser("testfn", help="optimizer race on log-scaled test functions")
    tf.add_argument("--fn", choices=("rosenbrock", "rastrigin"), default="rosenbrock")
    tf.add_argument("--steps", type=int, default=10_000)
    tf.add_argument("--every", type=int, default=10, help="trajectory subsampling in race.csv")
    tf.add_argument("--out", required=True)
    tf.set_defaults(func=cmd_testfn)

    ids = sub.add_parser("id-synthetic", help="MLE vs TWONN on synthetic manifolds")
    ids.add_argument("--out", required=True)
    ids.add_argument("--seed", type=int)
    ids.set_defaults(func=cmd_id_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
