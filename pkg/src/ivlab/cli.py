"""``ivlab`` command line.

Subcommands: ``gen``, ``landscape``, ``train``, ``oracle``, ``theorem1`` and
``replay``. Every file written is accompanied by a ``.manifest.json`` with the
resolved configuration; ``ivlab replay MANIFEST`` re-runs it.

Exit codes: 0 success, 1 numerical failure (divergence), 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from . import __version__, envgen, oracle
from .envgen import EnvSpec, Role, Task
from .errors import DivergenceError, IvlabError
from .model import LossKind
from .optimize import (SGD, Adam, GridSpec, Method, TrainConfig, landscape, make_problem,
                       random_inits, train_many)

CONSTRAINTS = ("irm-v1", "irm-relaxed", "mri-v1")
TASKS = {"st-reg": Task.ST_REGRESSION, "st-class": Task.ST_CLASSIFICATION, "toy-cmnist": Task.TOY_CMNIST}


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        write_atomic(out, text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (Path,)):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def write_manifest(path, args, argv, outputs) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "seed": config.get("seed"),
        "version": __version__,
        "outputs": [str(o) for o in outputs],
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    write_atomic(path, _json(manifest))


def _manifest_path(out) -> Path:
    p = Path(out)
    return p / "manifest.json" if p.suffix == "" and (p.is_dir() or not p.exists()) and p.name else p.with_name(p.name + ".manifest.json")


def _grid_arg(text: str):
    try:
        lo, hi, res = text.split(":")
        return float(lo), float(hi), int(res)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like lo:hi:resolution, got {text!r}")


def _pair(text: str):
    try:
        a, b = (float(v) for v in text.split(","))
        return a, b
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")


# --- gen ---------------------------------------------------------------------

def _gen_envs(args, parser):
    if args.preset:
        suite = envgen.preset_suite(args.preset)
        named = {f"train{k + 1}": (k, e) for k, e in enumerate(suite.train)}
        named.update({f"test{k + 1}": (len(suite.train) + k, e) for k, e in enumerate(suite.test)})
        if args.env == "all":
            return list(named.values())
        if args.env not in named:
            parser.error(f"--env must be one of {sorted(named)} or 'all'")
        return [named[args.env]]
    if args.task is None or args.p_inv is None or args.p_spu is None:
        parser.error("gen needs --preset, or --task with --p-inv and --p-spu")
    env = EnvSpec(args.p_inv, args.p_spu, TASKS[args.task], Role.TRAIN, args.sigma_inv, args.sigma_spu)
    return [(0, env)]


def cmd_gen(args, parser, argv):
    envs = _gen_envs(args, parser)
    data = [envgen.sample(env, args.n, args.seed, env_id=k) for k, env in envs]
    _emit(envgen.dataset_to_csv(data), args.out)
    outputs = [args.out]
    if args.images:
        if data[0].latents is None:
            parser.error("--images needs a Shape-Texture task")
        img_dir = Path(args.images)
        for d in data:
            lat = d.latents
            for k in range(d.n):
                img = envgen.render_wave_image(lat.theta_inv[k], lat.theta_spu[k], args.image_size)
                write_atomic(img_dir / f"env{d.env_id}_{k:06d}.pgm", envgen.format_pgm(img))
        outputs.append(str(img_dir))
    if args.out not in (None, "-"):
        write_manifest(_manifest_path(args.out), args, argv, outputs)
    return 0


# --- landscape ---------------------------------------------------------------

def cmd_landscape(args, parser, argv):
    lo, hi, res = args.grid
    lo_s, hi_s, res_s = args.grid_spu or args.grid
    grid = GridSpec((lo, hi), (lo_s, hi_s), (res, res_s))
    problem = make_problem(args.preset, args.constraint, data=args.data, n=args.n, seed=args.seed,
                           loss=LossKind(args.loss) if args.loss else None)
    if args.quantities:
        quantities = [q.strip() for q in args.quantities.split(",") if q.strip()]
    else:
        quantities = ["risk_train", "risk_test", args.constraint.replace("-v1", "").replace("-", "_") + "_sq_residual"]
    land = landscape(grid, quantities, problem, mu=args.mu)
    _emit(land.to_csv(), args.out)
    if args.out not in (None, "-"):
        write_manifest(_manifest_path(args.out), args, argv, [args.out])
    return 0


# --- train -------------------------------------------------------------------

def cmd_train(args, parser, argv):
    problem = make_problem(args.preset, args.constraint, data=args.data, n=args.n, seed=args.seed)
    opt = SGD() if args.optimizer == "sgd" else Adam(args.beta1, args.beta2, args.eps)
    clip = None if args.clip is None or args.clip <= 0 else args.clip
    config = TrainConfig(method=Method(args.method), mu=args.mu, lambda0=args.lam, optimizer=opt,
                         lr=args.lr, steps=args.steps, clip_norm=clip, seed=args.seed,
                         mu_growth=args.mu_growth, lambda_step=args.lam_step)
    inits = np.array(args.init) if args.init else random_inits(args.inits, problem.dim, args.seed)
    runs = train_many(config, problem, inits)

    out = Path(args.out)
    summary = {"constraint": args.constraint, "method": args.method, "preset": args.preset, "runs": []}
    outputs = []
    for k, (w0, tr) in enumerate(zip(inits, runs)):
        path = out / f"trajectory_{k:03d}.csv"
        write_atomic(path, tr.to_csv())
        outputs.append(path)
        summary["runs"].append({
            "trajectory": path.name,
            "init": list(map(float, w0)),
            "final_weights": tr.final_weights.tolist(),
            "final_risk_train": float(tr.risk_train[-1]),
            "final_risk_test": tr.risk_test[-1].tolist(),
            "final_c_norm": tr.final_c_norm,
            "steps_recorded": len(tr),
            "converged_at": tr.converged_at,
            "diverged": tr.diverged,
        })
    write_atomic(out / "summary.json", _json(summary))
    outputs.append(out / "summary.json")
    write_manifest(out / "manifest.json", args, argv, outputs)
    for r in summary["runs"]:
        w = ", ".join("%.6g" % v for v in r["final_weights"])
        print(f"{r['trajectory']}: w=({w}) risk_train={r['final_risk_train']:.6g} "
              f"|c|={r['final_c_norm']:.3g}{' DIVERGED' if r['diverged'] else ''}")
    if any(r["diverged"] for r in summary["runs"]):
        raise DivergenceError("at least one run diverged")
    return 0


# --- oracle ------------------------------------------------------------------

def cmd_oracle(args, parser, argv):
    sols = oracle.analytic_optima(args.constraint, args.p_inv, (args.p_spu1, args.p_spu2))
    report = sols.to_dict()
    if args.verify:
        suite = envgen.EnvSuite(
            "custom",
            [EnvSpec(args.p_inv, p) for p in (args.p_spu1, args.p_spu2)],
            [EnvSpec(args.p_inv, 0.0, role=Role.TEST)],
        )
        problem = make_problem(suite, args.constraint)
        grid = GridSpec(resolution=args.grid)
        report["verify"] = oracle.verify_optima(sols, problem, grid, tol=args.tol, refine=args.refine)
    for flag in sols.flags:
        print(f"warning: {flag}", file=sys.stderr)
    _emit(_json(report), args.out)
    if args.out not in (None, "-"):
        write_manifest(_manifest_path(args.out), args, argv, [args.out])
    return 0


# --- theorem1 ----------------------------------------------------------------

def _load_moments(path):
    text = Path(path).read_text()
    try:
        M = json.loads(text)
        if isinstance(M, dict):
            M = M["M"]
    except json.JSONDecodeError:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            M = np.loadtxt(path, delimiter=",", ndmin=2)
    return np.atleast_2d(np.asarray(M, dtype=float))


def cmd_theorem1(args, parser, argv):
    if args.moments:
        report = oracle.theorem1_check(_load_moments(args.moments)).to_dict()
    else:
        if args.d_spu is None or args.n_envs is None:
            parser.error("theorem1 needs --d-spu and --n-envs, or --moments")
        report = oracle.theorem1_trials(args.d_spu, args.n_envs, args.trials, args.seed)
    _emit(_json(report), args.out)
    if args.out not in (None, "-"):
        write_manifest(_manifest_path(args.out), args, argv, [args.out])
    return 0


def cmd_replay(args, parser, argv):
    manifest = json.loads(Path(args.manifest).read_text())
    return main(manifest["argv"])


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ivlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ivlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="sample a dataset to CSV")
    g.add_argument("--preset", choices=envgen.PRESET_NAMES)
    g.add_argument("--env", default="all", help="train1, train2, test1, ... or all")
    g.add_argument("--task", choices=sorted(TASKS))
    g.add_argument("--p-inv", type=float)
    g.add_argument("--p-spu", type=float)
    g.add_argument("--sigma-inv", type=float, default=0.0)
    g.add_argument("--sigma-spu", type=float, default=0.0)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="-")
    g.add_argument("--images", help="directory for per-sample PGM wave images")
    g.add_argument("--image-size", type=int, default=64)
    g.set_defaults(func=cmd_gen)

    def data_flags(sp):
        sp.add_argument("--data", choices=("population", "sample"), default="population")
        sp.add_argument("--n", type=int, default=40000, help="samples per environment with --data sample")
        sp.add_argument("--seed", type=int, default=0)

    ls = sub.add_parser("landscape", help="evaluate quantities on a weight grid")
    ls.add_argument("--constraint", choices=CONSTRAINTS, default="mri-v1")
    ls.add_argument("--preset", choices=envgen.PRESET_NAMES, default="st-reg")
    ls.add_argument("--loss", choices=[k.value for k in LossKind])
    ls.add_argument("--grid", type=_grid_arg, default=(-1.5, 1.5, 201))
    ls.add_argument("--grid-spu", type=_grid_arg)
    ls.add_argument("--quantities", help="comma list; accuracy expands to accuracy_train,accuracy_test")
    ls.add_argument("--mu", type=float, default=5e4, help="penalty weight for the objective quantity")
    data_flags(ls)
    ls.add_argument("--out", default="-")
    ls.set_defaults(func=cmd_landscape)

    t = sub.add_parser("train", help="penalty / augmented-Lagrangian training runs")
    t.add_argument("--constraint", choices=CONSTRAINTS, default="mri-v1")
    t.add_argument("--method", choices=("pm", "alm"), default="pm")
    t.add_argument("--mu", type=float, default=5e4)
    t.add_argument("--lam", type=float, default=0.0, help="initial multiplier (ALM)")
    t.add_argument("--lam-step", type=float, help="multiplier step; default 2*mu")
    t.add_argument("--mu-growth", type=float, default=1.0)
    t.add_argument("--preset", choices=envgen.PRESET_NAMES, default="st-reg")
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--lr", type=float, default=5e-3)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--clip", type=float, default=2.0, help="global grad-norm clip; <= 0 disables")
    t.add_argument("--beta1", type=float, default=0.975)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--eps", type=float, default=1e-8)
    t.add_argument("--inits", type=int, default=4, help="number of random initialisations")
    t.add_argument("--init", type=_pair, action="append", help="explicit start w_inv,w_spu (repeatable)")
    data_flags(t)
    t.add_argument("--out", default="runs")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle", help="closed-form constrained optima for Shape-Texture regression")
    o.add_argument("--constraint", choices=CONSTRAINTS, default="mri-v1")
    o.add_argument("--p-inv", type=float, default=0.75)
    o.add_argument("--p-spu1", type=float, default=1.0)
    o.add_argument("--p-spu2", type=float, default=0.8)
    o.add_argument("--verify", action="store_true", help="cross-check against grid brute force")
    o.add_argument("--grid", type=int, default=400)
    o.add_argument("--tol", type=float, help="feasibility distance; default one grid cell")
    o.add_argument("--refine", type=int, default=3)
    o.add_argument("--out", default="-")
    o.set_defaults(func=cmd_oracle)

    th = sub.add_parser("theorem1", help="rank test for MRI-v1 invariance in linear models")
    th.add_argument("--d-spu", type=int)
    th.add_argument("--n-envs", type=int)
    th.add_argument("--trials", type=int, default=1000)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--moments", help="JSON or CSV moment matrix (d_spu rows x n_envs columns)")
    th.add_argument("--out", default="-")
    th.set_defaults(func=cmd_theorem1)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def _join_grid_values(argv):
    # "--grid -1.5:1.5:201" or "--init -1,1" would otherwise be read as an unknown option
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("--grid", "--grid-spu", "--init") and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(_join_grid_values(argv))
    try:
        return args.func(args, parser, argv)
    except DivergenceError as exc:
        print(f"ivlab: {exc}", file=sys.stderr)
        return 1
    except IvlabError as exc:
        print(f"ivlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
