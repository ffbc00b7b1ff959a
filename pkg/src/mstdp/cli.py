"""Command line pipeline: synth -> build-graph -> train -> predict -> evaluate -> epi-sim -> report.

Every command reads its declared inputs, writes only its declared outputs
and is deterministic given ``--seed``. Settings may come from an INI file
passed as ``--config``; one section per command (``[synth]``, ``[model]``,
``[train]``, ``[predict]``, ``[epi]``), explicit flags win.

Exit codes: 0 ok, 2 input contract violation, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import nn
from .epidemic import SeirParams, build_transition_matrices, ensemble_mae
from .graph import build_graph, load_graph, save_graph
from .io import (
    DataFormatError,
    DatasetHeader,
    atomic_write_text,
    dump_json,
    load_json,
    read_header,
    read_trajectories,
    write_header,
    write_trajectories,
)
from .metrics import daily_distance_histogram, evaluate, od_flows, cpc, r_squared, seven_day_curves
from .model import MSTDP, ModelConfig, predict_iterative
from .motifs import motif_distribution
from .synth import (
    CityGrid,
    DatasetSplit,
    census,
    generate_city,
    generate_population,
    generate_trajectories,
    select_days,
    split_dataset,
)
from .train import TrainConfig, TrainingDiverged, load_model, make_samples, save_model, train
from .trajectory import DailyTrajectory, UserHistory

log = logging.getLogger("mstdp")

EXIT_CONTRACT = 2
EXIT_NUMERIC = 3


class ContractError(Exception):
    pass


# ---------------------------------------------------------------------------
# config and data directory helpers

def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if path is not None:
        if not Path(path).exists():
            raise ContractError(f"config file not found: {path}")
        cp.read(path)
    return cp


def _coerce(value: str, like):
    if like is None:
        for conv in (int, float):
            try:
                return conv(value)
            except ValueError:
                pass
        return None if value.lower() == "none" else value
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if value.lower() == "none":
        return None
    return type(like)(value)


def section(cp, name: str) -> dict:
    return dict(cp[name]) if cp.has_section(name) else {}


def pick(args, cp, sect: str, key: str, default):
    """Flag value if given, else the config value, else ``default``."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    raw = section(cp, sect).get(key.lower())
    if raw is None:
        return default
    return _coerce(raw, default)


def _data_paths(data_dir) -> dict:
    d = Path(data_dir)
    return {k: d / f for k, f in (("header", "header.json"), ("city", "city.json"),
                                   ("trajectories", "trajectories.jsonl"), ("split", "split.json"),
                                   ("census", "census.json"))}


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"missing {what}: {path}")
    return path


def load_dataset(data_dir) -> tuple:
    p = _data_paths(data_dir)
    header = read_header(_require(p["header"], "dataset header"))
    city = CityGrid.from_dict(load_json(_require(p["city"], "city file")))
    if (city.width, city.height, city.n_admins) != (header.width, header.height, header.n_admins):
        raise ContractError("city file disagrees with dataset header")
    return header, city


def load_split(data_dir) -> DatasetSplit:
    return DatasetSplit.from_dict(load_json(_require(_data_paths(data_dir)["split"], "split file")))


def load_histories(path, header: DatasetHeader) -> dict:
    return read_trajectories(_require(path, "trajectory file"), T=header.T, n_cells=header.n_cells)


def _flatten(histories: dict) -> list:
    return [t for u in sorted(histories) for t in histories[u].sorted_days()]


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _round(obj):
    # fixed-precision floats keep JSON reports stable across platforms
    if isinstance(obj, float):
        return round(obj, 9)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, cp) -> None:
    seed = args.seed
    n_agents = pick(args, cp, "synth", "agents", 200)
    n_days = pick(args, cp, "synth", "days", 28)
    grid = pick(args, cp, "synth", "grid", "20x20")
    n_admins = pick(args, cp, "synth", "admins", 16)
    T = pick(args, cp, "synth", "T", 24)
    epoch_weekday = pick(args, cp, "synth", "epoch_weekday", 0)
    multiplier = pick(args, cp, "synth", "census_multiplier", 500)
    try:
        w, h = (int(v) for v in str(grid).lower().split("x"))
    except ValueError:
        raise ContractError(f"--grid must look like 20x20, got {grid!r}") from None
    header = DatasetHeader(T=T, width=w, height=h, n_admins=n_admins, epoch_weekday=epoch_weekday)
    city = generate_city(seed, w, h, n_admins)
    agents = generate_population(city, n_agents, seed)
    hist = generate_trajectories(city, agents, n_days, T, seed, epoch_weekday)
    p = _data_paths(args.out_dir)
    write_header(header, p["header"])
    dump_json(city.to_dict(), p["city"])
    write_trajectories(hist, p["trajectories"])
    dump_json(split_dataset(hist).to_dict(), p["split"])
    dump_json({"multiplier": multiplier, "population": census(city, agents, multiplier).tolist()}, p["census"])
    log.info("wrote %d users x %d days to %s", n_agents, n_days, args.out_dir)


def cmd_build_graph(args, cp) -> None:
    header, city = load_dataset(args.data)
    split = load_split(args.data)
    hist = load_histories(_data_paths(args.data)["trajectories"], header)
    trajs = _flatten(select_days(hist, split.part(args.split)))
    if not trajs:
        raise ContractError(f"split {args.split!r} holds no trajectories")
    graph, feats = build_graph(trajs, city)
    save_graph(graph, feats, args.out)
    log.info("graph: %d cells, %d admins, %d cell flow edges", graph.n_cells, graph.n_admins, len(graph.flow_cell))


def model_config(args, cp, header: DatasetHeader, n_admins: int) -> ModelConfig:
    sect = section(cp, "model")
    preset = sect.pop("preset", "desk")
    factories = {"desk": ModelConfig.desk, "micro": ModelConfig.micro,
                 "full": lambda n, a, T, **kw: ModelConfig(n_cells=n, n_admins=a, T=T, **kw)}
    if preset not in factories:
        raise ContractError(f"unknown model preset {preset!r}")
    defaults = {f.name: f.default for f in fields(ModelConfig)}
    kw = {}
    for k, v in sect.items():
        if k not in defaults or k in ("n_cells", "n_admins", "T"):
            raise ContractError(f"unknown [model] key {k!r}")
        kw[k] = _coerce(v, defaults[k])
    kw.setdefault("seed", args.seed)
    try:
        return factories[preset](header.n_cells, n_admins, T=header.T, **kw)
    except ValueError as e:
        raise ContractError(f"bad model config: {e}") from None


def train_config(args, cp) -> TrainConfig:
    kw = {}
    for f in fields(TrainConfig):
        raw = section(cp, "train").get(f.name)
        if raw is not None:
            kw[f.name] = _coerce(raw, f.default)
    extra = set(section(cp, "train")) - {f.name for f in fields(TrainConfig)}
    if extra:
        raise ContractError(f"unknown [train] keys: {sorted(extra)}")
    kw.setdefault("seed", args.seed)
    kw.setdefault("lr", 1e-3)
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    return TrainConfig(**kw)


def _load_graph(path):
    try:
        return load_graph(_require(path, "graph file"))
    except (KeyError, ValueError) as e:
        raise ContractError(f"{path}: not a graph file ({e})") from None


def cmd_train(args, cp) -> None:
    header, city = load_dataset(args.data)
    split = load_split(args.data)
    graph, feats = _load_graph(args.graph)
    if graph.n_cells != header.n_cells:
        raise ContractError(f"graph has {graph.n_cells} cells, dataset has {header.n_cells}")
    hist = load_histories(_data_paths(args.data)["trajectories"], header)
    mcfg = model_config(args, cp, header, graph.n_admins)
    tcfg = train_config(args, cp)
    train_hist = select_days(hist, (0, split.train[1]))
    val_hist = select_days(hist, (0, split.validation[1]))
    model = MSTDP(mcfg, graph, feats)
    result = train(model, make_samples(train_hist, split.train), make_samples(val_hist, split.validation), tcfg)
    meta = {"T": header.T, "best_epoch": result.best_epoch, "best_val_acc": round(result.best_val_acc, 9),
            "train": {k: v for k, v in vars(tcfg).items()}}
    save_model(args.out, model, meta)
    if args.log:
        atomic_write_text(args.log, result.log_csv())
    log.info("best epoch %d, val Acc %.4f", result.best_epoch, result.best_val_acc)


def _load_checkpoint(path, header, graph, feats) -> MSTDP:
    try:
        model, meta = load_model(_require(path, "checkpoint"), graph, feats)
    except nn.CheckpointError as e:
        raise ContractError(str(e)) from None
    if model.cfg.T != header.T:
        raise ContractError(f"checkpoint was trained with T={model.cfg.T}, dataset has T={header.T}")
    return model


def cmd_predict(args, cp) -> None:
    header, city = load_dataset(args.data)
    split = load_split(args.data)
    graph, feats = _load_graph(args.graph)
    model = _load_checkpoint(args.checkpoint, header, graph, feats)
    hist = load_histories(_data_paths(args.data)["trajectories"], header)
    if args.users:
        wanted = {int(u) for u in args.users.split(",")}
        missing = wanted - set(hist)
        if missing:
            raise ContractError(f"unknown users: {sorted(missing)}")
        hist = {u: h for u, h in hist.items() if u in wanted}
    lo, hi = split.part(args.split)
    start = lo if args.start is None else args.start
    users = sorted(hist)
    out = {u: UserHistory(u, header.T) for u in users}
    if args.task == "day":
        targets = range(start, hi) if args.rolling else [start]
        for day in targets:
            # one-step forecasts always condition on actual history
            seen = [UserHistory(u, header.T, {d: t for d, t in hist[u].days.items() if d < day}) for u in users]
            keep = [(u, h) for u, h in zip(users, seen) if any(day - j in h.days for j in range(1, 8))]
            for (u, _), week in zip(keep, predict_iterative(model, [h for _, h in keep], day - 1, 1)):
                out[u].add(week[0])
    else:
        keep = [u for u in users if any(start - j in hist[u].days for j in range(1, 8))]
        weeks = predict_iterative(model, [hist[u] for u in keep], start - 1, args.days)
        for u, week in zip(keep, weeks):
            for t in week:
                out[u].add(t)
    write_trajectories({u: h for u, h in out.items() if h.days}, args.out, predicted=True)


def _match(pred: dict, actual: dict) -> tuple:
    P, A = [], []
    for u in sorted(pred):
        for t in pred[u].sorted_days():
            a = actual.get(u)
            if a is not None and t.day in a.days:
                P.append(t)
                A.append(a.days[t.day])
    if not P:
        raise ContractError("predictions and actual trajectories share no (user, day) pairs")
    return P, A


def cmd_evaluate(args, cp) -> None:
    header, city = load_dataset(args.data)
    actual_path = args.actual or _data_paths(args.data)["trajectories"]
    pred = load_histories(args.pred, header)
    actual = load_histories(actual_path, header)
    P, A = _match(pred, actual)
    c = city.centroids_km
    rep = evaluate(P, A, c, task=args.task)
    out = Path(args.report)
    days = sorted({t.day for t in P})
    if args.task == "week":
        byu = {}
        for p, a in zip(P, A):
            byu.setdefault(p.user, ([], []))
            byu[p.user][0].append(p)
            byu[p.user][1].append(a)
        full = [v for v in byu.values() if len(v[0]) == len(days)]
        curves = seven_day_curves([v[0] for v in full], [v[1] for v in full], c)
        rep.curves = curves
        rows = [(d, _fmt(x), _fmt(y)) for d, x, y in zip(curves["day"], curves["acc"], curves["dev_dist_km"])]
        atomic_write_text(out / "curves.csv", _csv(rows, ["day", "acc", "dev_dist_km"]))
    fa, fp = od_flows(A, "admin", city.cell_admin), od_flows(P, "admin", city.cell_admin)
    fca, fcp = od_flows(A, "cell"), od_flows(P, "cell")
    report = rep.to_dict()
    report["od"] = {"admin_cpc": cpc(fa, fp), "admin_r2": r_squared(fa, fp),
                    "cell_cpc": cpc(fca, fcp), "cell_r2": r_squared(fca, fcp)}
    dump_json(_round(report), out / "metrics.json")

    ma = {m: f for m, _, f in motif_distribution(A, top=None)}
    mp = {m: f for m, _, f in motif_distribution(P, top=None)}
    top = [m for m, _, _ in motif_distribution(A, top=10)]
    rows = [(i + 1, str(m), _fmt(ma.get(m, 0.0)), _fmt(mp.get(m, 0.0))) for i, m in enumerate(top)]
    atomic_write_text(out / "motifs.csv", _csv(rows, ["rank", "motif", "actual_freq", "pred_freq"]))

    ea, ca = daily_distance_histogram(A, c)
    ep, cp_ = daily_distance_histogram(P, c)
    n = max(len(ca), len(cp_))
    rows = [(k, int(ca[k]) if k < len(ca) else 0, int(cp_[k]) if k < len(cp_) else 0) for k in range(n)]
    atomic_write_text(out / "daily_distance.csv", _csv(rows, ["bin_km", "actual", "pred"]))

    keys = sorted(set(fa.flows) | set(fp.flows))
    rows = [(o, d, fa.flows.get((o, d), 0), fp.flows.get((o, d), 0)) for o, d in keys]
    atomic_write_text(out / "od_admin.csv", _csv(rows, ["origin", "destination", "actual", "pred"]))
    log.info("Acc %.4f DevDist %.3f km on %d trajectories", rep.acc, rep.dev_dist_km, rep.n_trajectories)


def cmd_episim(args, cp) -> None:
    header, city = load_dataset(args.data)
    pop_file = load_json(_require(_data_paths(args.data)["census"], "census file"))
    population = np.asarray(pop_file["population"], dtype=np.int64)
    pred = load_histories(args.pred, header)
    actual = load_histories(args.actual or _data_paths(args.data)["trajectories"], header)
    P, A = _match(pred, actual)
    params = SeirParams(alpha=pick(args, cp, "epi", "alpha", 0.4), beta=pick(args, cp, "epi", "beta", 0.1),
                        incubation_steps=pick(args, cp, "epi", "incubation_steps", 72.0),
                        infectious_steps=pick(args, cp, "epi", "infectious_steps", 168.0))
    runs = pick(args, cp, "epi", "runs", 100)
    seeds = pick(args, cp, "epi", "seed_infected", 1000)
    Ma = build_transition_matrices(A, city.cell_admin, city.n_admins)
    Mp = build_transition_matrices(P, city.cell_admin, city.n_admins)
    res = ensemble_mae(Ma, Mp, population, params, runs, args.seed, seeds)
    out = Path(args.out)
    rows = [(t, _fmt(float(a)), _fmt(float(b))) for t, (a, b) in enumerate(zip(res.mae_infectious, res.mae_cumulative))]
    atomic_write_text(out / "epi.csv", _csv(rows, ["t", "MAE_I", "MAE_cum"]))
    n_days = (len(res.mae_infectious) - 1) // header.T
    summary = {"runs": runs, "seed_infected": seeds, "r0": params.r0, "steps": len(res.mae_infectious) - 1,
               "day_mean": {str(d): dict(zip(("MAE_I", "MAE_cum"), res.day_mean(d))) for d in range(1, n_days + 1)}}
    dump_json(_round(summary), out / "epi_summary.json")
    if args.raw:
        rows = []
        for r, (a, p) in enumerate(zip(res.runs_actual, res.runs_pred)):
            for t in range(len(a)):
                rows.append((r, t, a.infectious[t], a.cumulative[t], p.infectious[t], p.cumulative[t]))
        atomic_write_text(out / "epi_runs.csv", _csv(rows, ["run", "t", "I_actual", "cum_actual", "I_pred", "cum_pred"]))


def cmd_report(args, cp) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for src in args.inputs:
        src = _require(src, "report input")
        files = sorted(p for p in src.rglob("*") if p.is_file()) if src.is_dir() else [src]
        for f in files:
            if f.suffix not in (".csv", ".json"):
                continue
            rel = (Path(src.name) / f.relative_to(src)) if src.is_dir() else Path(f.name)
            if rel.as_posix() == "manifest.json":
                continue
            dest = out / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(f, dest)
            data = dest.read_bytes()
            entries.append({"path": rel.as_posix(), "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    entries.sort(key=lambda e: e["path"])
    dump_json({"files": entries}, out / "manifest.json")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mstdp", description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    ap.add_argument("--config", help="INI file with per-command sections")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city and trajectory corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--agents", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--grid", help="WIDTHxHEIGHT cells")
    p.add_argument("--admins", type=int)
    p.add_argument("--T", type=int, choices=(24, 48))
    p.add_argument("--epoch-weekday", type=int)
    p.add_argument("--census-multiplier", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="build the heterogeneous graph from one split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train", choices=("train", "validation", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV training log path")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="forecast next-day or next-week trajectories")
    p.add_argument("--data", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("day", "week"), default="day")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--start", type=int, help="first target day (default: first day of the split)")
    p.add_argument("--days", type=int, default=7, help="week task horizon")
    p.add_argument("--rolling", action="store_true", help="day task: forecast every day of the split")
    p.add_argument("--users", help="comma separated user ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics and plot-ready CSVs for predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--actual", help="default: the dataset's trajectories")
    p.add_argument("--task", choices=("day", "week"), default="day")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("epi-sim", help="SEIR ensemble on actual vs predicted mobility")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--actual")
    p.add_argument("--runs", type=int)
    p.add_argument("--seed-infected", type=int)
    p.add_argument("--raw", action="store_true", help="also write per-run series")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_episim)

    p = sub.add_parser("report", help="bundle CSV/JSON outputs with a manifest")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = read_config(args.config)
        args.func(args, cp)
    except (ContractError, DataFormatError, FileNotFoundError, ValueError) as e:
        print(f"mstdp {args.command}: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"mstdp {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
