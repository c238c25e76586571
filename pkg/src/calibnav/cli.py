"""``calibnav`` command line: ingest, train, eval, make-scenarios, plan, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import datasets as ds
from .config import ENV_PREFIX, RunConfig, load_config
from .metrics import METRIC_COLUMNS, esv_report, metric_report
from .planner import AGGREGATE_COLUMNS, aggregate, replay_digest, run_scenario
from .predictor import (
    CVPredictor,
    MLPPredictor,
    TrainingDiverged,
    init_params,
    load_checkpoint,
    save_checkpoint,
    stack_future,
    stack_obs,
    train,
)
from .synthetic import crowd_scenarios, linear_motion_windows

log = logging.getLogger("calibnav")


class CliError(Exception):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, columns, rows, seed: int) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by this tool, skipping the ``# seed=`` header."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def make_predictor(spec: str, cfg: RunConfig):
    if spec == "cv":
        return CVPredictor(cfg.mpc.cv_sigma0, cfg.mpc.cv_growth)
    params, _ = load_checkpoint(spec.split(":", 1)[1])
    return MLPPredictor(params)


def _cache_path(cfg: RunConfig) -> str:
    if not cfg.data.cache:
        raise CliError("no cache given; pass --cache or set data.cache")
    return cfg.data.cache


def _split_windows(cfg: RunConfig):
    cache = ds.read_cache(_cache_path(cfg))
    if not cache["windows"]:
        raise CliError("no windows in cache")
    return ds.split(cache["windows"], cfg.split_spec())


# -- subcommands -------------------------------------------------------------


def cmd_ingest(cfg: RunConfig, args) -> int:
    spec = cfg.split_spec()
    if args.synthetic:
        logs, scenarios = [], []
        windows = linear_motion_windows(args.synthetic, seed=cfg.seed, noise=args.noise)
        meta = {"synthetic": args.synthetic, "noise": args.noise}
    else:
        paths = cfg.data.paths
        if not paths:
            raise CliError("no input files")
        logs = [ds.load_log(p) for p in paths]
        windows = [w for lg in logs for w in ds.make_windows(lg)]
        scenarios = []
        for lg in logs:
            rng = ds.holdout_frame_range(lg, windows, spec)
            if rng is not None:
                scenarios.extend(ds.extract_scenarios(lg, rng))
        meta = {"paths": [str(p) for p in paths]}
    meta["split"] = cfg.data.split
    path = _out_dir(cfg) / "cache.json"
    ds.write_cache(path, logs, windows, scenarios, cfg.seed, meta)
    print(f"windows={len(windows)} scenarios={len(scenarios)} -> {path}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    train_w, test_w = _split_windows(cfg)
    if not train_w:
        raise CliError("no windows in the training split")
    tcfg = cfg.train_config()
    val = test_w[: cfg.eval.val_windows] or None
    out = _out_dir(cfg)
    params, trace = train(init_params(cfg.seed), train_w, tcfg, val_windows=val)
    save_checkpoint(out / "checkpoint.json", params, tcfg, {"root_seed": cfg.seed, "n_train": len(train_w)})
    columns = list(trace[0].keys())
    _write_csv(out / "trace.csv", columns, trace, cfg.seed)
    last = trace[-1]
    print(f"epochs={len(trace)} loss={last['loss']:.6g} -> {out / 'checkpoint.json'}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    _, test_w = _split_windows(cfg)
    if not test_w:
        raise CliError("no windows in the test split")
    predictor = make_predictor(cfg.predictor, cfg)
    obs, fut = stack_obs(test_w), stack_future(test_w)
    params = np.asarray(predictor.predict(obs))
    if params.shape != fut.shape[:-1] + (5,):
        raise CliError(f"predictor output {params.shape} does not match windows {fut.shape}")
    rng = np.random.default_rng(cfg.seed)
    row = metric_report(params, fut, cfg.eval.bon_n, rng)
    out = _out_dir(cfg)
    doc = {"label": args.label or cfg.predictor, "predictor": cfg.predictor, "seed": cfg.seed, "split": cfg.data.split}
    doc.update(row)
    _write_json(out / "metrics.json", doc)
    _write_csv(out / "metrics.csv", ["label", *METRIC_COLUMNS], [doc], cfg.seed)
    # calibration curve for plotting
    levels = esv_report(params, fut).to_dict(with_levels=True)["levels"]
    _write_csv(out / "calibration.csv", ["level", "empirical", "ideal"], levels, cfg.seed)
    print(
        f"ade={row['ade']:.4f} fde={row['fde']:.4f} "
        f"desv=({row['delta_esv_1']:+.3f},{row['delta_esv_2']:+.3f},{row['delta_esv_3']:+.3f}) "
        f"mean|desv|={row['mean_abs_delta_esv']:.4f}"
    )
    return 0


def cmd_make_scenarios(cfg: RunConfig, args) -> int:
    if args.synthetic:
        scenarios = crowd_scenarios(args.synthetic, seed=cfg.seed, n_peds=args.n_peds, size=args.size)
        source = f"synthetic crowd n_peds={args.n_peds} size={args.size}"
    elif args.empty:
        scenarios = crowd_scenarios(args.empty, seed=cfg.seed, n_peds=0, size=args.size)
        source = f"empty size={args.size}"
    else:
        scenarios = ds.read_scenarios(_cache_path(cfg))
        source = cfg.data.cache
    if not scenarios:
        raise CliError("no scenarios")
    path = _out_dir(cfg) / "scenarios.json"
    ds.write_scenarios(path, scenarios, cfg.seed, source)
    print(f"scenarios={len(scenarios)} -> {path}")
    return 0


PLAN_COLUMNS = [
    "scenario_id",
    "outcome",
    "nav_time_steps",
    "path_length",
    "straight_line",
    "intrusion_ratio",
    "min_intrusion_distance",
    "min_intrusion_distance_scenario",
    "n_steps",
    "replay_sha256",
]


def cmd_plan(cfg: RunConfig, args) -> int:
    source = cfg.data.scenarios or cfg.data.cache
    if not source:
        raise CliError("no scenarios given; pass --scenarios")
    scenarios = sorted(ds.read_scenarios(source), key=lambda s: s.scenario_id)
    if args.limit:
        scenarios = scenarios[: args.limit]
    if not scenarios:
        raise CliError("no scenarios")
    mpc = cfg.mpc_config()
    predictor = make_predictor(cfg.predictor, cfg)
    results, rows, traces = [], [], {}
    for scn in scenarios:
        res = run_scenario(scn, predictor, mpc, seed=cfg.seed, keep_trace=args.traces)
        row = res.row()
        row["replay_sha256"] = replay_digest(scn, mpc)
        results.append(res)
        rows.append(row)
        if args.traces:
            traces[scn.scenario_id] = res.trace
        log.info("%s %s steps=%d", scn.scenario_id, res.outcome, res.n_steps)
    out = _out_dir(cfg)
    _write_csv(out / "plan.csv", PLAN_COLUMNS, rows, cfg.seed)
    agg = {"label": args.label or cfg.predictor, "predictor": cfg.predictor, "seed": cfg.seed, "mpc": mpc.to_dict()}
    agg.update(aggregate(results))
    _write_json(out / "aggregate.json", agg)
    if args.traces:
        _write_json(out / "traces.json", traces)
    print(f"SR/CR/TR={agg['sr']:.3f}/{agg['cr']:.3f}/{agg['tr']:.3f} intrusion={agg['intrusion_ratio_mean']:.4f}")
    return 0


def _fmt(v, spec=".3f"):
    return "-" if v is None else format(v, spec)


def _pm(mean, se):
    if mean is None:
        return "-"
    return f"{mean:.2f} ± {se:.2f}" if se is not None else f"{mean:.2f}"


def prediction_table(metrics: list[dict]) -> list[str]:
    lines = [
        "| Method | ADE / FDE | ΔESV1 | ΔESV2 | ΔESV3 | mean abs ΔESV | BoN ADE / FDE |",
        "|---|---|---|---|---|---|---|",
    ]
    for m in metrics:
        bon = f"{_fmt(m['bon_ade'], '.2f')} / {_fmt(m['bon_fde'], '.2f')}" if m.get("bon_n") else "-"
        lines.append(
            f"| {m['label']} | {m['ade']:.2f} / {m['fde']:.2f} | {m['delta_esv_1']:+.3f} | {m['delta_esv_2']:+.3f} "
            f"| {m['delta_esv_3']:+.3f} | {m['mean_abs_delta_esv']:.3f} | {bon} |"
        )
    return lines


def planning_table(plans: list[dict]) -> list[str]:
    lines = [
        "| Method | SR / CR / TR | Nav. time [steps] | Path len [m] | Intrusion ratio | Min. intrusion dist [m] |",
        "|---|---|---|---|---|---|",
    ]
    for p in plans:
        lines.append(
            f"| {p['label']} | {p['sr']:.2f} / {p['cr']:.2f} / {p['tr']:.2f} "
            f"| {_pm(p['nav_time_mean'], p['nav_time_se'])} | {_pm(p['path_length_mean'], p['path_length_se'])} "
            f"| {_pm(p['intrusion_ratio_mean'], p['intrusion_ratio_se'])} "
            f"| {_pm(p['min_intrusion_distance_mean'], p['min_intrusion_distance_se'])} |"
        )
    return lines


def cmd_report(cfg: RunConfig, args) -> int:
    if not args.metrics and not args.plans:
        raise CliError("nothing to report; pass --metrics and/or --plans")
    metrics = [json.loads(Path(p).read_text()) for p in args.metrics]
    plans = [json.loads(Path(p).read_text()) for p in args.plans]
    out = _out_dir(cfg)
    text = []
    if metrics:
        text += ["## Prediction", "", *prediction_table(metrics), ""]
        _write_csv(out / "prediction.csv", ["label", *METRIC_COLUMNS], metrics, cfg.seed)
    if plans:
        text += ["## Planning", "", *planning_table(plans), ""]
        _write_csv(out / "planning.csv", ["label", *AGGREGATE_COLUMNS], plans, cfg.seed)
    (out / "report.md").write_text("\n".join(text))
    print("\n".join(text))
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="calibnav",
        description="Calibrated Gaussian trajectory prediction and uncertainty-aware MPC.",
        epilog=f"Any config key can also come from the environment, e.g. {ENV_PREFIX}TRAIN__EPOCHS=50.",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--cache")
    data.add_argument("--split", help="in_dist or loo:<scene>[,<scene>...]")

    pred = argparse.ArgumentParser(add_help=False)
    pred.add_argument("--predictor", help="cv or mlp:<checkpoint>")
    pred.add_argument("--label", help="row label in reports")

    s = sub.add_parser("ingest", parents=[common, data], help="parse logs into a window/scenario cache")
    s.add_argument("paths", nargs="*")
    s.add_argument("--synthetic", type=int, default=0, metavar="N", help="N straight-line windows instead of logs")
    s.add_argument("--noise", type=float, default=0.2, help="future-position noise for --synthetic")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common, data], help="train the reference predictor")
    s.add_argument("--loss", choices=["nll", "nll_mhd", "cdf"])
    s.add_argument("--beta", type=float)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, data, pred], help="prediction metrics on the test split")
    s.add_argument("--bon", type=int, metavar="N", help="Best-of-N sample count")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("make-scenarios", parents=[common, data], help="write a planning scenario file")
    s.add_argument("--synthetic", type=int, default=0, metavar="N", help="N synthetic crowd scenarios")
    s.add_argument("--empty", type=int, default=0, metavar="N", help="N pedestrian-free scenarios")
    s.add_argument("--n-peds", type=int, default=8)
    s.add_argument("--size", type=float, default=10.0)
    s.set_defaults(func=cmd_make_scenarios)

    s = sub.add_parser("plan", parents=[common, pred], help="closed-loop MPC runs over scenarios")
    s.add_argument("--scenarios")
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--traces", action="store_true", help="also write per-step traces")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("report", parents=[common], help="prediction and planning tables")
    s.add_argument("--metrics", nargs="*", default=[], help="metrics.json files")
    s.add_argument("--plans", nargs="*", default=[], help="aggregate.json files")
    s.set_defaults(func=cmd_report)
    return p


def _flag_overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    over = {
        "seed": get("seed"),
        "out": get("out"),
        "predictor": get("predictor"),
        "data.cache": get("cache"),
        "data.scenarios": get("scenarios"),
        "data.split": get("split"),
        "train.loss": get("loss"),
        "train.beta": get("beta"),
        "train.epochs": get("epochs"),
        "eval.bon_n": get("bon"),
    }
    if get("paths"):
        over["data.paths"] = list(args.paths)
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, _flag_overrides(args), args.set)
        return args.func(cfg, args)
    except ValidationError as exc:
        print(f"error: invalid configuration\n{exc}", file=sys.stderr)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
