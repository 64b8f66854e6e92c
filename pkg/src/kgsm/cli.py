"""Command-line entry point: ``kgsm {simulate,calibrate,train,predict,crossval}``.

Exit codes: 0 success, 1 usage or validation error, 2 numerical
non-convergence, 3 I/O error.  Logs go to stderr; results go to files
under ``output.dir`` plus a short summary on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .calibrate import CalibrationProblem, calibrate_wcm
from .config import RunConfig, help_text, load_config
from .data import assign_spatial_folds, generate_synthetic, load_csv, write_csv, write_sidecar
from .errors import ConfigError, KgsmError, NonFiniteLoss
from .evaluation import export_report, run_cross_validation, split_validation, summary_table
from .kg_model import LstmModel, fit, predict

log = logging.getLogger("kgsm")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write(path: Path, text: str) -> None:
    """Write via a temporary sibling so a failed run never leaves a half-written file."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _load_sites(cfg: RunConfig):
    if cfg.csv is not None:
        return load_csv(cfg.csv)
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)[0]
    raise ConfigError("data: set data.csv or data.synthetic")


def _prediction_csv(rows) -> str:
    lines = ["site_id,timestamp,sm_pred"]
    lines += [f"{sid},{ts},{float(v)!r}" for sid, ts, v in rows]
    return "\n".join(lines) + "\n"


def cmd_simulate(cfg: RunConfig, args) -> int:
    if cfg.synthetic is None:
        raise ConfigError("data.synthetic: required by simulate")
    sites, truth = generate_synthetic(cfg.synthetic)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_csv(sites, cfg.output_dir / "sites.csv")
    write_sidecar(truth, cfg.output_dir / "truth.json")
    sm = np.concatenate([s.sm_ref[s.labelled] for s in sites])
    print(f"sites: {len(sites)}")
    print(f"samples: {sum(len(s) for s in sites)} ({sm.size} with reference SM)")
    print(f"SM range: {sm.min():.4f} to {sm.max():.4f} m3/m3")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig, args) -> int:
    sites = _load_sites(cfg)
    problem = CalibrationProblem.from_sites(sites, b=cfg.b, vwc_coeff=cfg.vwc_coeff)
    result = calibrate_wcm(problem, cfg.calibration)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    body = {**result.to_json(), "warnings": result.warnings, "n_samples": len(problem)}
    _write(cfg.output_dir / "calibration.json", json.dumps(body, indent=2, sort_keys=True) + "\n")
    p = result.params
    print(f"A={p.a:.6g} C={p.c:.6g} dB D={p.d:.6g} dB/(m3/m3) objective={result.objective:.4g}")
    for w in result.warnings:
        log.warning(w)
    if not result.converged:
        log.error("calibration did not converge; best point written")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    sites = _load_sites(cfg)
    by_id = {s.site_id: s for s in sites}
    fit_ids, val_ids = split_validation(list(by_id), cfg.val_fraction, cfg.cv_seed, 0)
    fit_sites = [by_id[i] for i in fit_ids]
    a_init = None
    if cfg.warm_start_a:
        problem = CalibrationProblem.from_sites(fit_sites, b=cfg.b, vwc_coeff=cfg.vwc_coeff)
        a_init = calibrate_wcm(problem, cfg.calibration).params.a
    res = fit(fit_sites, [by_id[i] for i in val_ids], cfg.training, a_init=a_init)

    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "model.json"
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    _write(ckpt, json.dumps(res.model.to_json()) + "\n")
    _write(cfg.output_dir / "train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in res.log))
    b = res.final_batch
    _write(cfg.output_dir / "train_predictions.csv",
           _prediction_csv(zip(b.site_ids, b.timestamps, res.final_predictions)))
    best = res.log[res.best_epoch]
    print(f"best epoch {res.best_epoch} of {len(res.log) - 1}: val soil MSE {best['val_soil_mse']:.6g}, "
          f"A={res.model.a:.6g}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / "model.json"
    model = LstmModel.load(ckpt)
    sites = _load_sites(cfg)
    preds = [predict(model, s) for s in sites]
    rows = [(p.site_id, t, v) for p in preds for t, v in zip(p.timestamps, p.sm_pred)]
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    _write(cfg.output_dir / "predictions.csv", _prediction_csv(rows))
    n_pad = int(sum(p.padded.sum() for p in preds))
    print(f"{len(rows)} predictions for {len(preds)} sites ({n_pad} from left-padded windows)")
    return EXIT_OK


def cmd_crossval(cfg: RunConfig, args) -> int:
    sites = _load_sites(cfg)
    folds = assign_spatial_folds(sites, cfg.folds, seed=cfg.cv_seed)
    report = run_cross_validation(sites, folds, cfg.cv_config())
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    export_report(report, cfg.output_dir)
    _write(cfg.output_dir / "folds.json", json.dumps(folds.to_json(), indent=2, sort_keys=True) + "\n")
    sys.stdout.write(summary_table(report))
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "generate a synthetic dataset (sites.csv, truth.json)"),
    "calibrate": (cmd_calibrate, "fit WCM A, C, D by Nelder-Mead (calibration.json)"),
    "train": (cmd_train, "train the knowledge-guided LSTM (model.json, train_log.jsonl, train_predictions.csv)"),
    "predict": (cmd_predict, "predict SM at every acquisition (predictions.csv)"),
    "crossval": (cmd_crossval, "spatial k-fold comparison of WCM and KG-LSTM (report.json, summary.txt, ...)"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="kgsm",
        description="Soil moisture from radar backscatter: Water Cloud Model and a knowledge-guided LSTM.",
        epilog=help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("-c", "--config", help="YAML config file (defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--seed", type=int, help="replace every seed in the config")
        p.add_argument("--threads", type=int, help="fold-level threads (overrides cv.threads)")
        p.add_argument("--checkpoint", help="model file (train: output, predict: input; default output.dir/model.json)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.threads is not None:
        overrides.append(f"cv.threads={args.threads}")
    try:
        cfg = load_config(args.config, overrides, seed=args.seed)
        return COMMANDS[args.command][0](cfg, args)
    except NonFiniteLoss as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (KgsmError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
