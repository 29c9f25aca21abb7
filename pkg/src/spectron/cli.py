"""``spectron`` command line: train, ablate, fit, spectral-trace.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import plotting
from .checkpoint import save_checkpoint
from .config import layer_ids, load_config, with_seed
from .corpus import write_tokens
from .errors import ConfigError, DataError, SpectronError
from .optim import OptimizerVariant
from .scaling import (
    compute_optimal,
    group_by_budget,
    huber,
    inference_savings,
    isoflop_pipeline,
    parametric_fit,
    read_points_csv,
)
from .telemetry import write_csv
from .train import make_data, run

log = logging.getLogger("spectron")

GRID = [
    OptimizerVariant.SPECTRON,
    OptimizerVariant.ORTHO_ONLY,
    OptimizerVariant.SPECNORM_ONLY,
    OptimizerVariant.NAIVE_MOMENTUM,
]
BASELINES = [OptimizerVariant.ADAPTIVE_MOMENTS]


def _num(x):
    return format(float(x), ".17g")


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fresh(path):
    if os.path.exists(path):
        os.remove(path)
    return path


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _resolve(args):
    cfg = with_seed(load_config(args.config), args.seed)
    out = args.out or cfg.output_dir
    cfg = replace(cfg, output_dir=out)
    os.makedirs(out, exist_ok=True)
    return cfg, out


def _write_losses(path, losses):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in losses:
            w.writerow([step, _num(loss), _num(lr)])


def cmd_train(args):
    cfg, out = _resolve(args)
    data = make_data(cfg)
    write_tokens(os.path.join(out, "corpus.sptk"), data.train.tolist() + data.heldout.tolist(), cfg.model.vocab)
    result = run(cfg, data=data)
    _write_losses(os.path.join(out, "loss.csv"), result.losses)
    telemetry_path = _fresh(os.path.join(out, "telemetry.csv"))
    write_csv(result.telemetry, telemetry_path)
    save_checkpoint(os.path.join(out, "checkpoint.spck"), result.model.parameters())
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        fh.write(cfg.to_json())
    _write_json(
        os.path.join(out, "summary.json"),
        {
            "variant": cfg.optimizer.variant,
            "initial_eval_loss": result.initial_eval,
            "final_eval_loss": result.final_eval,
            "diverged": result.diverged,
            "steps_completed": len(result.losses),
            "num_parameters": result.model.num_parameters(),
            "max_dw_spec": {lid: result.max_dw_spec(lid) for lid in cfg.telemetry_layers},
        },
    )
    steps = [s for s, _, _ in result.losses]
    losses = [l for _, l, _ in result.losses]
    plotting.save_svg(
        plotting.loss_figure({cfg.optimizer.variant: (steps, losses)}), os.path.join(out, "loss.svg")
    )
    print(f"train: {cfg.optimizer.variant} eval loss {result.initial_eval:.4f} -> {result.final_eval:.4f}")
    return 1 if result.diverged else 0


def _rank_key(row):
    loss = row["final_loss"]
    return (0 if math.isfinite(loss) else 1, loss if math.isfinite(loss) else 0.0, row["variant"], row["eta"])


def cmd_ablate(args):
    cfg, out = _resolve(args)
    data = make_data(cfg)
    rows, curves = [], {}
    for variant in GRID + BASELINES:
        for eta in cfg.ablate_etas:
            cell = replace(cfg, optimizer=replace(cfg.optimizer, variant=variant.value, eta=float(eta)))
            result = run(cell, data=data)
            rows.append(
                {
                    "variant": variant.value,
                    "eta": float(eta),
                    "in_grid": variant in GRID,
                    "orthogonalization": variant.orthogonalizes,
                    "renormalization": variant.renormalizes,
                    "initial_loss": result.initial_eval,
                    "final_loss": result.final_eval,
                    "max_dw_spec": result.max_dw_spec(),
                    "diverged": result.diverged,
                }
            )
            curves[f"{variant.value}@{eta:g}"] = result.losses
            log.info("ablate %s eta=%g final=%.4f", variant.value, eta, result.final_eval)

    ranked = sorted(rows, key=_rank_key)
    header = [
        "rank", "variant", "eta", "in_grid", "orthogonalization", "renormalization",
        "initial_loss", "final_loss", "max_dw_spec", "diverged",
    ]
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(header)
        for rank, row in enumerate(ranked, start=1):
            w.writerow(
                [rank, row["variant"], _num(row["eta"]), int(row["in_grid"]), int(row["orthogonalization"]),
                 int(row["renormalization"]), _num(row["initial_loss"]), _num(row["final_loss"]),
                 _num(row["max_dw_spec"]), int(row["diverged"])]
            )
    with open(os.path.join(out, "losses.csv"), "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["variant", "eta", "step", "loss", "lr"])
        for key, losses in curves.items():
            variant, eta = key.split("@")
            for step, loss, lr in losses:
                w.writerow([variant, eta, step, _num(loss), _num(lr)])
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        fh.write(cfg.to_json())
    for eta in cfg.ablate_etas:
        series = {
            k: ([s for s, _, _ in v], [l for _, l, _ in v]) for k, v in curves.items() if k.endswith(f"@{eta:g}")
        }
        plotting.save_svg(plotting.loss_figure(series, f"ablation, eta = {eta:g}"), os.path.join(out, f"ablate_eta{eta:g}.svg"))
    for rank, row in enumerate(ranked, start=1):
        print(f"{rank:2d}  {row['variant']:<17s} eta={row['eta']:<6g} final={row['final_loss']:.4f}")
    return 0


def _fit_isoflop(points, out):
    curves, exps = isoflop_pipeline(points)
    doc = {
        "mode": "isoflop",
        "n_points": len(points),
        "n_exponent": exps["n_exponent"],
        "n_prefactor": exps["n_prefactor"],
        "d_exponent": exps["d_exponent"],
        "d_prefactor": exps["d_prefactor"],
        "curves": [
            {"budget": c.budget, "coeffs": list(c.coeffs), "n_opt": c.n_opt, "loss_min": c.loss_min, "n_samples": len(c.samples)}
            for c in curves
        ],
    }
    for i, c in enumerate(curves):
        a, b, cc = c.coeffs
        fig = plotting.isoflop_figure(c.budget, c.samples, lambda n: a * np.log(n) ** 2 + b * np.log(n) + cc, c.n_opt)
        plotting.save_svg(fig, os.path.join(out, f"isoflop_{i:02d}.svg"))
    return doc


def _fit_parametric(points, out):
    fit = parametric_fit(points)
    a_n, a_d = compute_optimal(fit.alpha, fit.beta)
    residuals = []
    for p in points:
        r = math.log(float(fit.predict(p.n_params, p.tokens))) - math.log(p.loss)
        residuals.append({"n_params": p.n_params, "tokens": p.tokens, "loss": p.loss, "log_residual": r, "huber": float(huber(r, fit.huber_delta))})
    doc = {
        "mode": "parametric",
        "n_points": len(points),
        "coefA": fit.coefA,
        "coefB": fit.coefB,
        "irreducible": fit.irreducible,
        "alpha": fit.alpha,
        "beta": fit.beta,
        "huber_delta": fit.huber_delta,
        "objective": fit.objective,
        "start_index": fit.start_index,
        "n_exponent": a_n,
        "d_exponent": a_d,
        "residuals": residuals,
    }
    for i, (budget, pts) in enumerate(group_by_budget(points)):
        samples = sorted((p.n_params, p.loss) for p in pts)
        fig = plotting.isoflop_figure(budget, samples, lambda n, c=budget: fit.predict(n, c / (6.0 * n)))
        plotting.save_svg(fig, os.path.join(out, f"parametric_{i:02d}.svg"))
    return doc


def cmd_fit(args):
    out = args.out or "fit_out"
    os.makedirs(out, exist_ok=True)
    points = read_points_csv(args.input)
    doc = _fit_isoflop(points, out) if args.mode == "isoflop" else _fit_parametric(points, out)
    budgets = [b for b, _ in group_by_budget(points)]
    doc["inference_savings_percent"] = {format(b, ".6g"): inference_savings(b) for b in budgets}
    _write_json(os.path.join(out, "fit.json"), doc)
    print(f"fit ({args.mode}): N_opt ~ C^{doc['n_exponent']:.4f}, D_opt ~ C^{doc['d_exponent']:.4f}")
    return 0


def cmd_spectral_trace(args):
    cfg, out = _resolve(args)
    valid = layer_ids(cfg.model)
    if args.layer not in valid:
        raise ConfigError(f"unknown layer {args.layer!r}; valid ids: {', '.join(valid)}")
    data = make_data(cfg)
    series = {}
    with open(os.path.join(out, "trace.csv"), "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["step", "variant", "loss", "dw_spec", "dy_rms", "dy_rms_bound", "w_spec", "rho"])
        for variant in cfg.trace_variants:
            cell = replace(cfg, optimizer=replace(cfg.optimizer, variant=variant))
            result = run(cell, data=data, telemetry_layers=[args.layer])
            losses = {s: l for s, l, _ in result.losses}
            cols = {"step": [], "dw_spec": [], "dy_rms": [], "w_spec": []}
            for rec in result.telemetry:
                w.writerow([rec.step, variant, _num(losses[rec.step]), _num(rec.dw_spec), _num(rec.dy_rms),
                            _num(rec.dy_rms_bound), _num(rec.w_spec), _num(rec.rho)])
                for key in cols:
                    cols[key].append(getattr(rec, key))
            series[variant] = cols
    plotting.save_svg(plotting.trace_figure(series), os.path.join(out, "trace.svg"))
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        fh.write(cfg.to_json())
    print(f"spectral-trace: {args.layer} for {', '.join(cfg.trace_variants)}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="spectron", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_opts(p):
        p.add_argument("--config", required=True, help="run-config JSON document")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train one configuration")
    run_opts(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("ablate", help="component grid and baselines at two learning rates")
    run_opts(p)
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("spectral-trace", help="per-step spectral telemetry of one layer across variants")
    run_opts(p)
    p.add_argument("--layer", required=True)
    p.set_defaults(func=cmd_spectral_trace)
    p = sub.add_parser("fit", help="fit scaling laws to n_params,tokens,loss rows")
    p.add_argument("input", help="CSV with columns n_params, tokens, loss")
    p.add_argument("--mode", choices=("isoflop", "parametric"), default="isoflop")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SpectronError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
