"""``crowdot`` command line: gen, loss, check, solve, train, ablate, eval.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 property violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .checks import SUITES
from .grid import dot_map, gaussian_rasterize
from .nets import FUSIONS, ModelConfig, ToyModel
from .ot import CostKind, SolverConfig, build_cost, combined_loss, exact_ot, sinkhorn
from .syntheval import (
    ABLATION_HEADER,
    LAYOUTS,
    TRACE_HEADER,
    AblationSettings,
    LossConfig,
    ablate,
    evaluate,
    gen_scene,
    render_image,
    toy_benchmark,
    train_toy,
)

EXIT_USAGE, EXIT_DATA, EXIT_VIOLATION = 2, 3, 4


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _csv_list(kind):
    def parse(text):
        try:
            return [kind(v) for v in text.split(",") if v.strip()]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from None
    return parse


def _sigma(text):
    return math.inf if text.strip().lower() in ("inf", "infinity") else float(text)


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
        probe = d / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise CliError(f"cannot write to {d}: {e}", EXIT_USAGE) from None
    return d


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, Path):
        return str(v)
    return v


def write_manifest(out: Path, args, **extra) -> Path:
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    body = {"command": args.command, "config": _jsonable(resolved), **_jsonable(extra)}
    path = out / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def cmd_gen(args):
    out = _out_dir(args.out)
    scene = gen_scene(args.width, args.height, args.sparse_rate, args.dense_rate, args.layout, args.seed)
    grid = gaussian_rasterize(scene.annotations, args.sigma_g).values
    io.write_annotations(out / "annotations.json", scene.annotations)
    io.write_grid_csv(out / "density.csv", grid)
    io.write_grid_bin(out / "density.dgrd", grid)
    write_manifest(out, args, count=scene.count, files=["annotations.json", "density.csv", "density.dgrd"])
    print(json.dumps({"count": scene.count, "out": str(out)}))


def _solver(args) -> SolverConfig:
    return SolverConfig(eps_schedule=tuple(args.eps), tol=args.tol, stage_tol=max(args.tol, 1e-3))


def cmd_loss(args):
    if args.cost == "correntropy" and args.sigma is None:
        raise CliError("--cost correntropy needs --sigma", EXIT_USAGE)
    cost = CostKind.l2() if args.cost == "l2" else CostKind.correntropy(args.sigma)
    try:
        ann = io.read_annotations(args.gt)
        pred = io.read_grid(args.pred)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot read inputs: {e}", EXIT_DATA) from None
    if not pred.sum() > 0:
        raise CliError("prediction has zero total mass", EXIT_DATA)
    if not ann.count:
        raise CliError("ground truth has no annotated points", EXIT_DATA)
    h, w = pred.shape
    if (h, w) == (ann.height, ann.width):
        z, cell = gaussian_rasterize(ann, args.sigma_g).values, 1.0
    else:
        z, cell = dot_map(ann, h, w), ann.width / w
    lb = combined_loss(z, pred, cost, _solver(args), cell=cell)
    result = {**lb.as_dict(), "gt_count": lb.gt_count, "pred_count": float(pred.sum())}
    if args.out:
        write_manifest(_out_dir(args.out), args, result=result)
    print(json.dumps(result))


def cmd_check(args):
    if args.suite not in SUITES:
        raise CliError(f"unknown suite {args.suite!r}; choose from {sorted(SUITES)}", EXIT_USAGE)
    t0 = time.perf_counter()
    worst, threshold, label = SUITES[args.suite](n=args.n, seed=args.seed)
    ok = worst <= threshold
    result = {"suite": args.suite, "n": args.n, "metric": label, "worst": worst,
              "threshold": threshold, "pass": ok, "seconds": time.perf_counter() - t0}
    if args.out:
        write_manifest(_out_dir(args.out), args, result=result)
    print(json.dumps(result))
    if not ok:
        raise CliError(f"{args.suite}: {label} {worst:.3e} exceeds {threshold:.0e}", EXIT_VIOLATION)


def cmd_solve(args):
    try:
        inst = io.read_instance(args.instance)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot read instance: {e}", EXIT_DATA) from None
    cm = build_cost(inst["src"], inst["dst"], inst["cost"])
    sol = sinkhorn(cm, inst["mu"], inst["nu"])
    result = {"sinkhorn_cost": sol.attained_cost, "converged": sol.converged, "residual": sol.residual,
              "plan": sol.plan.tolist()}
    if args.exact:
        result["exact_cost"] = exact_ot(cm, inst["mu"], inst["nu"]).attained_cost
    if args.out:
        write_manifest(_out_dir(args.out), args, result=result)
    print(json.dumps(result))


def _model_cfg(args, n_layers=None, fusion=None) -> ModelConfig:
    return ModelConfig(image_size=args.size, n_layers=args.layers if n_layers is None else n_layers,
                       fusion=args.fusion if fusion is None else fusion, seed=args.seed)


def _scene_spec(args) -> dict:
    return {"n_scenes": args.scenes, "size": args.size, "seed": args.seed, "layout": args.layout,
            "sparse_rate": args.sparse_rate, "dense_rate": args.dense_rate}


def _scenes(spec):
    return toy_benchmark(spec["n_scenes"], spec["size"], spec["seed"], spec["layout"],
                         spec["sparse_rate"], spec["dense_rate"])


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_train(args):
    if args.steps < 1:
        raise CliError("--steps must be >= 1", EXIT_USAGE)
    if args.cost == "correntropy" and args.sigma is None:
        raise CliError("--cost correntropy needs --sigma", EXIT_USAGE)
    out = _out_dir(args.out)
    spec = _scene_spec(args)
    mcfg = _model_cfg(args)
    loss = LossConfig(args.cost, args.sigma if args.sigma is not None else 16.0)
    res = train_toy(_scenes(spec), mcfg, loss, args.steps, args.lr, args.seed, optimizer=args.optimizer)
    _write_rows(out / "trace.csv", TRACE_HEADER, [[r[0], *map(repr, r[1:])] for r in res.trace])
    rep = res.final_eval
    _write_rows(out / "eval.csv", ("mae", "mse"), [[repr(rep.mae), repr(rep.mse)]])
    io.save_checkpoint(out / "checkpoint", res.model.params,
                       {"model": res.model.cfg.to_json(), "scenes": spec, "seed": args.seed})
    write_manifest(out, args, initial_total=res.trace[0][4], final_total=res.trace[-1][4],
                   mae=rep.mae, mse=rep.mse)
    print(json.dumps({"initial_total": res.trace[0][4], "final_total": res.trace[-1][4],
                      "mae": rep.mae, "mse": rep.mse}))


def cmd_eval(args):
    out = _out_dir(args.out)
    try:
        params, meta = io.load_checkpoint(args.checkpoint)
        mcfg = ModelConfig(**meta["model"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CliError(f"cannot load checkpoint: {e}", EXIT_DATA) from None
    spec = dict(meta["scenes"])
    if args.seed is not None:
        spec["seed"] = args.seed
    scenes = _scenes(spec)
    model = ToyModel(mcfg, params)
    rep = evaluate(model, scenes)
    _write_rows(out / "eval.csv", ("mae", "mse"), [[repr(rep.mae), repr(rep.mse)]])
    _write_rows(out / "per_image.csv", ("image", "gt", "estimate"),
                [[i, gt, repr(est)] for i, (gt, est) in enumerate(rep.per_image)])
    maps, _ = model.forward(np.stack([render_image(s) for s in scenes]))
    scales = {}
    for i, m in enumerate(maps):
        scales[f"pred_{i:03d}.pgm"] = io.write_pgm(out / f"pred_{i:03d}.pgm", m)
    write_manifest(out, args, scenes=spec, mae=rep.mae, mse=rep.mse, pgm_scale=scales)
    print(json.dumps({"mae": rep.mae, "mse": rep.mse}))


def cmd_ablate(args):
    out = _out_dir(args.out)
    for f in args.fusion:
        if f not in FUSIONS:
            raise CliError(f"unknown fusion {f!r}", EXIT_USAGE)
    settings = AblationSettings(steps=args.steps, lr=args.lr, seed=args.seed, n_scenes=args.scenes, size=args.size)
    try:
        rows = ablate(args.fusion, args.layers, args.sigmas, settings, jobs=args.jobs)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from None
    _write_rows(out / "ablation.csv", ABLATION_HEADER,
                [[r[0], r[1], r[2], "inf" if math.isinf(r[3]) else repr(r[3]), repr(r[4]), repr(r[5]), r[6], r[7]]
                 for r in rows])
    write_manifest(out, args, rows=len(rows))
    print(json.dumps({"rows": len(rows), "csv": str(out / "ablation.csv")}))


def _add_common(p, out_default=None):
    p.add_argument("--config", help="JSON file of option defaults (keys are long option names)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default)


def _add_scene_opts(p):
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--layout", choices=LAYOUTS, default="halves")
    p.add_argument("--sparse-rate", type=float, default=4.0)
    p.add_argument("--dense-rate", type=float, default=20.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crowdot")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scene")
    _add_common(p, ".")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--layout", choices=LAYOUTS, default="halves")
    p.add_argument("--sparse-rate", type=float, default=4.0)
    p.add_argument("--dense-rate", type=float, default=20.0)
    p.add_argument("--sigma-g", type=float, default=4.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("loss", help="composite loss of a predicted grid against annotations")
    _add_common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--cost", choices=("l2", "correntropy"), default="l2")
    p.add_argument("--sigma", type=float)
    p.add_argument("--sigma-g", type=float, default=4.0)
    p.add_argument("--eps", type=_csv_list(float), default=[64.0, 16.0], help="annealing schedule, comma separated")
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("check", help="run a fuzzed property suite")
    _add_common(p)
    p.add_argument("--suite", required=True)
    p.add_argument("--n", type=int, default=10)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("solve", help="entropic OT on an instance JSON file")
    _add_common(p)
    p.add_argument("--instance", required=True)
    p.add_argument("--exact", action="store_true", help="also solve the exact LP")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", help="toy end-to-end training")
    _add_common(p, ".")
    _add_scene_opts(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("gd", "adam"), default="gd")
    p.add_argument("--fusion", choices=FUSIONS, default="asm")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--cost", choices=("l2", "correntropy"), default="correntropy")
    p.add_argument("--sigma", type=_sigma, default=16.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="fusion x layers x sigma grid")
    _add_common(p, ".")
    p.add_argument("--scenes", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--fusion", type=_csv_list(str), default=list(FUSIONS))
    p.add_argument("--layers", type=_csv_list(int), default=[0, 2, 4, 6, 8])
    p.add_argument("--sigmas", type=_csv_list(_sigma), default=[16.0],
                   help="comma separated; \"inf\" selects the l2 limit (full sweep: 4,8,16,32,inf)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a training checkpoint")
    _add_common(p, ".")
    p.set_defaults(seed=None)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)
    return ap


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_USAGE) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}:{e.lineno}:{e.colno}: {e.msg}", EXIT_USAGE) from None
    if not isinstance(obj, dict):
        raise CliError(f"{path}:1:1: config must be a JSON object", EXIT_USAGE)
    return obj


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, command, path):
    """Config values become subcommand defaults; explicit flags still win."""
    sub = parser._subparsers._group_actions[0].choices[command]
    cfg = _load_config(path)
    dests = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("help", "config"):
            raise CliError(f"{path}: unknown option {key!r} for {command}", EXIT_USAGE)
        action = dests[dest]
        if isinstance(val, list):
            val = ",".join(str(v) for v in val)
        if action.type is not None and not isinstance(val, bool):
            try:
                val = action.type(str(val))
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise CliError(f"{path}: bad value for {key!r}: {e}", EXIT_USAGE) from None
        if action.choices is not None and val not in action.choices:
            raise CliError(f"{path}: {key!r} must be one of {list(action.choices)}", EXIT_USAGE)
        defaults[dest] = val
        action.required = False
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    command = next((t for t in argv if not t.startswith("-")), None)
    try:
        path = _config_path(argv)
        if path and command in parser._subparsers._group_actions[0].choices:
            _apply_config(parser, command, path)
        args = parser.parse_args(argv)
        args.func(args)
    except CliError as e:
        print(f"crowdot {command}: {e}", file=sys.stderr)
        return e.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
