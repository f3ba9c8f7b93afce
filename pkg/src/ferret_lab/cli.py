"""Batch experiment driver.

Subcommands: ``plan``, ``train``, ``sweep-dither``, ``mia`` and ``report``.
Exit codes: 0 success, 2 config error, 3 budget infeasible, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import accountant, records
from .errors import BudgetInfeasibleError, DomainError
from .evaluation import evaluate_mia
from .mechanism import Scheme, partition_groups
from .models import Split, eval_metrics, init_model, make_model, mean_loss, read_dataset_csv, synth_dataset
from .trainers import (
    AdamLike,
    DpsgdLite,
    Ferret,
    NonPrivate,
    Sgd,
    TrainConfig,
    steps_for_epochs,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_MISSING = 4

OUT_ENV = "FERRET_LAB_OUT"
REPORT_COLUMNS = ["method", "epsilon", "epochs", "seed", "final_loss", "auc", "advantage",
                  "fired_count", "duration"]
SUMMARY_COLUMNS = ["method", "epsilon", "epochs", "n_seeds", "mean_final_loss", "mean_auc",
                   "mean_advantage", "mean_fired_count", "mean_duration"]
NA = "NA"
MISSING = "MISSING"


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


# ---------------------------------------------------------------- config


def load_schema() -> dict:
    return json.loads(resources.files("ferret_lab").joinpath("config_schema.json").read_text())


def validate_config(cfg: dict) -> dict:
    """Validate against the published schema and fill defaults.

    Every violation is collected before raising, so one run reports all bad fields.
    """
    validator = jsonschema.Draft202012Validator(load_schema())
    problems = []
    for err in sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    if problems:
        raise ConfigError(problems)

    cfg = json.loads(json.dumps(cfg))
    ds = cfg["dataset"]
    ds.setdefault("noise_sigma", 0.1)
    ds.setdefault("seed", 0)
    ds.setdefault("hidden", 16)
    ds.setdefault("bias", True)
    cfg.setdefault("optimizer", {"name": "sgd"})
    cfg.setdefault("methods", [])
    cfg.setdefault("epsilons", [])
    cfg.setdefault("epochs", [1])

    if cfg["batch_size"] > ds["n"]:
        problems.append(f"batch_size: {cfg['batch_size']} exceeds dataset n={ds['n']}")
    if ds["kind"] == "mlp" and not ds["bias"]:
        problems.append("dataset/bias: the mlp always carries biases")
    labels = []
    for i, m in enumerate(cfg["methods"]):
        m.setdefault("label", method_label(m))
        labels.append(m["label"])
        if m["name"] == "ferret" and "p" not in m and not cfg["epsilons"]:
            problems.append(f"methods/{i}: ferret needs either 'p' or a non-empty 'epsilons' list")
        allowed = {"ferret": {"scheme", "C", "dither_sigma", "p"},
                   "dpsgd_lite": {"clip_C", "noise_sigma"},
                   "nonprivate": set()}[m["name"]]
        for key in sorted(set(m) - allowed - {"name", "label"}):
            problems.append(f"methods/{i}/{key}: not a {m['name']} parameter")
    for label in sorted({x for x in labels if labels.count(x) > 1}):
        problems.append(f"methods: duplicate label {label!r}")
    if problems:
        raise ConfigError(problems)
    return cfg


def method_label(m: dict) -> str:
    if m["name"] == "ferret":
        return f"ferret-{str(Scheme.parse(m.get('scheme', 'max'))).replace(':', '')}"
    return m["name"]


def read_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    return validate_config(raw)


@dataclasses.dataclass(frozen=True)
class Cell:
    label: str
    method: dict
    epsilon: float | None  # None: not budget-driven
    epochs: float
    steps: int
    seed: int

    @property
    def name(self) -> str:
        if self.method["name"] != "ferret":
            eps = "inf"
        elif self.epsilon is None:
            eps = f"p{records.fmt(float(self.method['p']))}"
        else:
            eps = records.fmt(float(self.epsilon))
        return f"{self.label}__eps-{eps}__ep-{records.fmt(self.epochs)}__seed-{self.seed}"

    @property
    def epsilon_text(self) -> str:
        if self.method["name"] != "ferret":
            return "inf"
        return records.fmt(float(self.epsilon)) if self.epsilon is not None else NA


def expand_grid(cfg: dict) -> list[Cell]:
    """methods x epsilons x epochs x seeds; methods not driven by a budget
    (non-private, dpsgd_lite, ferret with fixed p) skip the epsilon axis."""
    n = cfg["dataset"]["n"]
    cells = []
    for m in cfg["methods"]:
        budgets = cfg["epsilons"] if m["name"] == "ferret" and "p" not in m else [None]
        for eps in budgets:
            for ep in cfg["epochs"]:
                T = steps_for_epochs(ep, cfg["batch_size"], n)
                for seed in cfg["seeds"]:
                    cells.append(Cell(m["label"], m, eps, ep, T, seed))
    return cells


def model_shapes(cfg: dict):
    ds = cfg["dataset"]
    return make_model(ds["kind"], ds["d"], hidden=ds["hidden"], bias=ds["bias"]).shapes


def infeasible_cells(cfg: dict, cells: list[Cell]) -> list[str]:
    shapes = model_shapes(cfg)
    s = cfg["batch_size"] / cfg["dataset"]["n"]
    out = []
    for c in cells:
        if c.method["name"] != "ferret" or c.epsilon is None:
            continue
        G = partition_groups(shapes, c.method.get("scheme", "max")).G
        try:
            accountant.optimal_p(c.epsilon, G, c.steps, s)
        except BudgetInfeasibleError as exc:
            out.append(f"{c.name}: {exc}")
    return out


def build_method(m: dict, epsilon: float | None):
    if m["name"] == "ferret":
        return Ferret(scheme=m.get("scheme", "max"), C=m.get("C", 1.0),
                      dither_sigma=m.get("dither_sigma", 0.0),
                      epsilon=epsilon if "p" not in m else None, p=m.get("p"))
    if m["name"] == "dpsgd_lite":
        return DpsgdLite(clip_C=m.get("clip_C", 1.0), noise_sigma=m.get("noise_sigma", 1.0))
    return NonPrivate()


def build_optimizer(o: dict):
    if o["name"] == "adam":
        return AdamLike(o.get("beta1", 0.9), o.get("beta2", 0.999), o.get("eps", 1e-8))
    return Sgd()


def load_data(cfg: dict):
    ds = cfg["dataset"]
    return synth_dataset(ds["kind"], ds["n"], ds["d"], ds["noise_sigma"], ds["seed"], hidden=ds["hidden"])


def run_cell(cfg: dict, cell: Cell, out_root: str, timing: bool = True) -> str:
    """Train one grid cell and persist it; returns the run directory."""
    ds = cfg["dataset"]
    members, _ = load_data(cfg)
    model = init_model(ds["kind"], ds["d"], cell.seed, hidden=ds["hidden"], bias=ds["bias"])
    tc = TrainConfig(steps=cell.steps, batch_size=cfg["batch_size"], lr=cfg["lr"],
                     method=build_method(cell.method, cell.epsilon),
                     optimizer=build_optimizer(cfg["optimizer"]), seed=cell.seed)
    rec = train(model, members, tc)

    meta = [
        ("label", cell.label), ("method", cell.method["name"]), ("epsilon", cell.epsilon_text),
        ("epochs", cell.epochs), ("steps", cell.steps), ("seed", cell.seed),
        ("dataset_kind", ds["kind"]), ("dataset_n", ds["n"]), ("dataset_d", ds["d"]),
        ("dataset_noise_sigma", float(ds["noise_sigma"])), ("dataset_seed", ds["seed"]),
        ("dataset_hidden", ds["hidden"]), ("dataset_bias", ds["bias"]),
        ("batch_size", float(cfg["batch_size"])), ("sampling_rate", rec.s), ("lr", float(cfg["lr"])),
        ("optimizer", cfg["optimizer"]["name"]),
    ]
    m = tc.method
    if isinstance(m, Ferret):
        meta += [("scheme", str(m.scheme)), ("C", float(m.C)), ("dither_sigma", float(m.dither_sigma)),
                 ("G", rec.partition.G), ("p", rec.p), ("epsilon_config", rec.epsilon),
                 ("epsilon_realized", rec.realized_epsilon()), ("fired_count", rec.fired_total)]
    elif isinstance(m, DpsgdLite):
        meta += [("clip_C", float(m.clip_C)), ("noise_sigma", float(m.noise_sigma))]
    meta += [("initial_loss", mean_loss(rec.initial_model, members)),
             ("final_loss", mean_loss(rec.model, members))]
    meta += [(f"final_{k}", v) for k, v in eval_metrics(rec.model, members).items()]

    run_dir = Path(out_root) / "runs" / cell.name
    records.write_run(run_dir, rec, meta, timing=timing)
    return str(run_dir)


def _map(fn, jobs, workers: int):
    """Ordered map over argument tuples, optionally in worker processes."""
    if workers <= 1:
        return [fn(*job) for job in jobs]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *job) for job in jobs]
        return [f.result() for f in futures]


# ---------------------------------------------------------------- commands


def cmd_plan(args) -> int:
    try:
        cfg = accountant.AccountantConfig(G=args.G, T=args.T, s=args.s, epsilon_target=args.epsilon)
        pl = accountant.plan(cfg)
    except BudgetInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"epsilon_max={records.fmt(exc.epsilon_max)}")
        return EXIT_INFEASIBLE
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"Privacy plan for G={pl.G} groups, T={pl.T} steps, sampling rate s={pl.s:g}")
    print(f"  target budget     {pl.epsilon_target:.6g} nats ({accountant.nats_to_bits(pl.epsilon_target):.6g} bits)")
    print(f"  ceiling eps_max   {pl.epsilon_max:.6g} nats ({accountant.nats_to_bits(pl.epsilon_max):.6g} bits)")
    print(f"  firing prob. p*   {pl.p_star:.6g}")
    print(f"  expected releases {pl.G * pl.T * pl.p_star:.6g}")
    print()
    for k, v in pl.as_pairs():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    if args.seed_list is not None:
        cfg["seeds"] = args.seed_list
    if not cfg["methods"]:
        raise ConfigError(["methods: at least one method is required for train"])
    cells = expand_grid(cfg)
    bad = infeasible_cells(cfg, cells)
    if bad:
        for line in bad:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_INFEASIBLE
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    grid = [{"run": c.name, "method": c.label, "epsilon": c.epsilon_text,
             "epochs": records.fmt(c.epochs), "seed": c.seed} for c in cells]
    (out / "grid.json").write_text(json.dumps(grid, indent=1) + "\n")
    dirs = _map(run_cell, [(cfg, c, str(out), args.timing) for c in cells], args.workers)
    for d in dirs:
        print(d)
    return EXIT_OK


def _sweep_run(cfg: dict, sigma: float, seed: int) -> float:
    ds = cfg["dataset"]
    sw = cfg["sweep"]
    members, _ = load_data(cfg)
    model = init_model(ds["kind"], ds["d"], seed, hidden=ds["hidden"], bias=ds["bias"])
    method = Ferret(scheme=sw.get("scheme", "max"), C=sw.get("C", 1.0), dither_sigma=sigma,
                    p=sw.get("p", 1.0))
    tc = TrainConfig(steps=sw["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"], method=method,
                     optimizer=build_optimizer(cfg["optimizer"]), seed=seed)
    return eval_metrics(train(model, members, tc).model, members)["mse"]


def sweep_dither(cfg: dict, sigmas, seeds, workers: int = 1):
    """Final training MSE for every (sigma, seed); returns {sigma: array over seeds}."""
    jobs = [(cfg, float(s), int(seed)) for s in sigmas for seed in seeds]
    mses = _map(_sweep_run, jobs, workers)
    out = {}
    for (_, s, _), v in zip(jobs, mses):
        out.setdefault(s, []).append(v)
    return {s: np.array(v) for s, v in out.items()}


def cmd_sweep_dither(args) -> int:
    cfg = read_config(args.config)
    problems = []
    if "sweep" not in cfg:
        problems.append("sweep: section required for sweep-dither")
    elif cfg["dataset"]["kind"] != "linear":
        problems.append("dataset/kind: the dither sweep runs on linear regression")
    if problems:
        raise ConfigError(problems)
    sigmas = args.sigmas if args.sigmas is not None else cfg["sweep"]["sigmas"]
    if 0.0 not in [float(s) for s in sigmas]:
        raise ConfigError(["sweep/sigmas: must include 0 as the baseline"])
    seeds = args.seed_list if args.seed_list is not None else cfg["seeds"]
    result = sweep_dither(cfg, sigmas, seeds, args.workers)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "dither_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "q25", "median", "q75"])
        for s, v in result.items():
            q25, med, q75 = np.percentile(v, [25, 50, 75])
            w.writerow([records.fmt(s), records.fmt(q25), records.fmt(med), records.fmt(q75)])
    with open(out / "dither_sweep_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "seed", "final_mse"])
        for s, v in result.items():
            for seed, x in zip(seeds, v):
                w.writerow([records.fmt(s), seed, records.fmt(x)])
    print(out / "dither_sweep.csv")
    return EXIT_OK


def _load_run_model(run_dir: Path):
    meta = records.read_kv(run_dir / records.METADATA)
    model = records.read_model_csv(
        run_dir / records.MODEL, meta["dataset_kind"], int(meta["dataset_d"]),
        hidden=int(meta["dataset_hidden"]), bias=meta["dataset_bias"] == "true")
    return meta, model


def mia_for_run(run_dir, dataset_csv=None) -> Path:
    run_dir = Path(run_dir)
    meta, model = _load_run_model(run_dir)
    if dataset_csv is not None:
        splits = read_dataset_csv(dataset_csv)
        members, nonmembers = splits[Split.MEMBER], splits[Split.NONMEMBER]
    else:
        members, nonmembers = synth_dataset(
            meta["dataset_kind"], int(meta["dataset_n"]), int(meta["dataset_d"]),
            float(meta["dataset_noise_sigma"]), int(meta["dataset_seed"]),
            hidden=int(meta["dataset_hidden"]))
    report = evaluate_mia(model, members, nonmembers)
    report.write(run_dir / "mia_roc.csv", run_dir / "mia_summary.txt")
    return run_dir / "mia_summary.txt"


def cmd_mia(args) -> int:
    runs = [Path(r) for r in args.runs] if args.runs else sorted((Path(args.out) / "runs").glob("*"))
    if not runs:
        print(f"error: no run directories found under {Path(args.out) / 'runs'}", file=sys.stderr)
        return EXIT_MISSING
    missing = [r for r in runs if not (r / records.MODEL).is_file() or not (r / records.METADATA).is_file()]
    if missing:
        for r in missing:
            print(f"error: no trained model in {r}", file=sys.stderr)
        return EXIT_MISSING
    if args.dataset is not None and not Path(args.dataset).is_file():
        print(f"error: dataset file not found: {args.dataset}", file=sys.stderr)
        return EXIT_MISSING
    for r in runs:
        print(mia_for_run(r, args.dataset))
    return EXIT_OK


def _sort_key(row):
    def num(x):
        try:
            return float(x)
        except ValueError:
            return math.inf
    return (row["method"], num(row["epsilon"]), num(row["epochs"]), int(row["seed"]))


def collect_rows(out: Path) -> list[dict]:
    rows = {}
    for run_dir in sorted((out / "runs").glob("*")):
        meta_path = run_dir / records.METADATA
        if not meta_path.is_file():
            continue
        meta = records.read_kv(meta_path)
        mia = records.read_kv(run_dir / "mia_summary.txt") if (run_dir / "mia_summary.txt").is_file() else {}
        timing = records.read_kv(run_dir / records.TIMING) if (run_dir / records.TIMING).is_file() else {}
        rows[run_dir.name] = {
            "method": meta["label"], "epsilon": meta["epsilon"], "epochs": meta["epochs"],
            "seed": meta["seed"], "final_loss": meta["final_loss"],
            "auc": mia.get("auc", NA), "advantage": mia.get("advantage", NA),
            "fired_count": meta.get("fired_count", NA),
            "duration": timing.get("duration_seconds", NA),
        }
    grid_path = out / "grid.json"
    if grid_path.is_file():
        for cell in json.loads(grid_path.read_text()):
            if cell["run"] not in rows:
                rows[cell["run"]] = {
                    "method": cell["method"], "epsilon": cell["epsilon"], "epochs": cell["epochs"],
                    "seed": str(cell["seed"]),
                    **{k: MISSING for k in REPORT_COLUMNS[4:]},
                }
    return sorted(rows.values(), key=_sort_key)


def summarize(rows: list[dict]) -> list[dict]:
    """Per (method, epsilon, epochs) means over seeds; markers are skipped."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["epsilon"], r["epochs"]), []).append(r)
    out = []
    for (method, eps, ep), members in groups.items():
        row = {"method": method, "epsilon": eps, "epochs": ep,
               "n_seeds": str(sum(r["final_loss"] != MISSING for r in members))}
        for col in ("final_loss", "auc", "advantage", "fired_count", "duration"):
            vals = [float(r[col]) for r in members if r[col] not in (NA, MISSING)]
            row[f"mean_{col}"] = records.fmt(math.fsum(vals) / len(vals)) if vals else NA
        out.append(row)
    return out


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = collect_rows(out)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(summarize(rows))
    print(out / "report.csv")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get(OUT_ENV, "ferret_lab_out")
    parser = argparse.ArgumentParser(prog="ferret-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="firing probability and head-room for a budget")
    p.add_argument("--G", type=int, required=True, help="number of parameter groups")
    p.add_argument("--T", type=int, required=True, help="number of steps")
    p.add_argument("--s", type=float, required=True, help="sampling rate B/N")
    p.add_argument("--epsilon", type=float, required=True, help="target budget in nats")
    p.set_defaults(fn=cmd_plan)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", default=default_out, help=f"output root (default ${OUT_ENV} or ./ferret_lab_out)")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed-list", type=_int_list, default=None, help="override config seeds, e.g. 0,1,2")

    p = sub.add_parser("train", help="run every (method, epsilon, epochs, seed) cell")
    common(p)
    p.add_argument("--timing", action="store_true",
                   help="also write wall-clock timing.txt per run (not reproducible byte for byte)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep-dither", help="final MSE across dither levels")
    common(p)
    p.add_argument("--sigmas", type=_float_list, default=None, help="override sweep sigmas")
    p.set_defaults(fn=cmd_sweep_dither)

    p = sub.add_parser("mia", help="loss-threshold membership inference on trained runs")
    p.add_argument("runs", nargs="*", help="run directories (default: all under OUT/runs)")
    p.add_argument("--out", default=default_out)
    p.add_argument("--dataset", default=None, help="CSV of member/nonmember records; default regenerates")
    p.set_defaults(fn=cmd_mia)

    p = sub.add_parser("report", help="join runs and MIA results into report.csv and summary.csv")
    p.add_argument("--out", default=default_out)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for line in exc.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
