"""Command-line entry point: ``sim``, ``train``, ``eval`` and ``report``.

CSV outputs of ``eval`` (all plot-ready):

    hist.csv     bin_lo,bin_hi,count          signed error pred - label, mm
    qq.csv       theoretical,empirical        studentized residual quantiles (DbP only)
    discard.csv  retained_fraction,rmse_mm    lowest-variance fraction kept (DbP only)
    table.csv    predictor,dataset,rmse_mm,std_mm,seeds
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines as bl
from . import evaluation as ev
from .dataset import read_dataset, split, write_dataset
from .net import DepthNet, load_checkpoint
from .sim import PRESETS, PokeSample, generate_dataset, preset
from .trainer import load_config, train_multi

PREDICTORS = ("raw", "raw-bc", "gf", "gf-bc", "ae", "ae-bc", "dbp")


def _arrays(samples: Sequence[PokeSample]):
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])
    rows = np.array([s.g[0] for s in samples])
    cols = np.array([s.g[1] for s in samples])
    return rgb, depth, rows, cols


def model_predictions(model: DepthNet, samples: Sequence[PokeSample]) -> tuple[np.ndarray, np.ndarray]:
    rgb, depth, rows, cols = _arrays(samples)
    return model.predict_batch(rgb, depth, rows, cols)


def labels_of(samples: Sequence[PokeSample]) -> np.ndarray:
    return np.array([s.z for s in samples], dtype=np.float64)


def predictor_outputs(name: str, train: Sequence[PokeSample], test: Sequence[PokeSample],
                      models: Sequence[DepthNet] = ()):
    """Test-set predictions for a named predictor.

    Returns a list with one ``(prediction, variance or None)`` pair per model
    (a single pair for the sensor baselines).  Bias corrections and the
    filter width are fitted on ``train`` only.
    """
    if name not in PREDICTORS:
        raise ValueError(f"unknown predictor {name!r}; choose from {', '.join(PREDICTORS)}")
    base, _, corrected = name.partition("-")
    if base == "raw":
        runs = [(bl.predict_raw(test), bl.predict_raw(train))]
    elif base == "gf":
        sigma = bl.scaled_sigma(bl.select_filter_sigma(train), test[0].depth.shape[1])
        runs = [(bl.predict_filtered(test, sigma), bl.predict_filtered(train, sigma))]
    else:
        if not models:
            raise ValueError(f"predictor {name!r} needs at least one --checkpoint")
        if base == "dbp":
            return [model_predictions(m, test) for m in models]
        runs = [(model_predictions(m, test)[0], model_predictions(m, train)[0] if corrected else None)
                for m in models]
    if corrected:
        z_train = labels_of(train)
        return [(bl.apply_bias(p, bl.estimate_bias(p_train, z_train)), None) for p, p_train in runs]
    return [(p, None) for p, _ in runs]


def evaluate_predictor(name: str, dataset: str, train, test, models=(), bin_width: float = 10.0,
                       label: str | None = None) -> ev.EvalReport:
    outputs = predictor_outputs(name, train, test, models)
    z = labels_of(test)
    pred, var = outputs[0]
    report = ev.evaluate(label or name, dataset, pred, z, var, bin_width=bin_width)
    report.seed_rmse = [ev.rmse_at_pokes(p, z) for p, _ in outputs]
    return report


def _dbp_label(models: Sequence[DepthNet]) -> str:
    return "dbp-rgb" if models[0].config.rgb_only else "dbp-rgbd"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_sim(args) -> int:
    samples = generate_dataset(preset(args.preset), args.scenes, args.pokes, args.seed,
                               include_ground_truth=args.with_ground_truth)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _load_samples(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def _train_test(data, test_data, fraction, split_seed):
    samples = _load_samples(data)
    if test_data:
        return samples, _load_samples(test_data)
    return split(samples, fraction, split_seed)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if cfg.train_data is None:
        raise ValueError(f"{args.config}: data.train is required")
    if cfg.out_dir is None:
        cfg = cfg.replace(out_dir=str(Path(args.config).with_suffix("")) + "_runs")
    train, _ = _train_test(cfg.train_data, cfg.test_data, cfg.train_fraction, cfg.split_seed)
    for seed, _, log in train_multi(cfg, train):
        last = log.records[-1]
        comps = ", ".join(f"{k}={last[k]:.4g}" for k in ("j_z", "j_v", "j_n", "j_m") if k in last)
        print(f"seed {seed}: {len(log)} steps, final {comps}; checkpoint {Path(cfg.out_dir) / f'seed{seed}.dbpc'}")
    return 0


def cmd_eval(args) -> int:
    train, test = _train_test(args.data, args.test_data, args.train_fraction, args.split_seed)
    models = []
    for path in args.checkpoint or []:
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        models.append(load_checkpoint(path))
    if args.predictor in ("raw", "raw-bc", "gf", "gf-bc") and models:
        raise ValueError(f"predictor {args.predictor!r} takes no checkpoint")
    label = args.name or (_dbp_label(models) if args.predictor == "dbp" and models else args.predictor)
    dataset = args.dataset_name or Path(args.data).stem
    report = evaluate_predictor(args.predictor, dataset, train, test, models, args.bin_width, label)

    out = Path(args.out or f"eval_{label}_{dataset}")
    out.mkdir(parents=True, exist_ok=True)
    ev.write_histogram_csv(report.histogram, out / "hist.csv")
    if report.qq is not None:
        ev.write_qq_csv(report.qq, out / "qq.csv")
        ev.write_discard_csv(report.discard, out / "discard.csv")
    n = max(len(report.seed_rmse), 1)
    ev.write_table_csv([[label, dataset, repr(report.rmse_mean), repr(report.rmse_std), str(n)]],
                       out / "table.csv")
    std = f" ± {report.rmse_std:.2f}" if n > 1 else ""
    print(f"{label} on {dataset}: RMSE {report.rmse_mean:.2f}{std} mm, "
          f"mean signed error {report.mean_signed_error:.2f} mm over {len(test)} pokes; CSVs in {out}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for item in args.inputs:
        path = Path(item)
        rows.extend(ev.read_table_csv(path / "table.csv" if path.is_dir() else path))
    text, records = ev.report_table(rows)
    sys.stdout.write(text)
    if args.out:
        ev.write_table_csv(records, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pokedepth", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="simulate a poke dataset and write it as DBPD")
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--pokes", type=int, required=True, help="pokes per scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--with-ground-truth", action="store_true",
                   help="store true depth and material maps (evaluation only)")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("train", help="train one network per seed from a key = value config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a predictor on the test split")
    p.add_argument("--predictor", choices=PREDICTORS, required=True)
    p.add_argument("--data", required=True, help="DBPD file; split 9:1 unless --test-data is given")
    p.add_argument("--test-data")
    p.add_argument("--checkpoint", action="append", help="model checkpoint (repeat for several seeds)")
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--bin-width", type=float, default=10.0, help="histogram bin width, mm")
    p.add_argument("--name", help="row label in the table (default: predictor name)")
    p.add_argument("--dataset-name", help="column label in the table (default: file stem)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="combine eval outputs into one table")
    p.add_argument("inputs", nargs="+", help="eval output directories or table.csv files")
    p.add_argument("--out", help="write the combined table.csv here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
