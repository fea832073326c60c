"""Command-line entry points.

Subcommands: ``gen`` (toy model + data), ``calibrate``, ``evaluate``,
``oracle`` (self-checks of the rounding math), ``overhead``.  Exit codes:
0 success, 2 bad input or validation failure, 3 oracle violation,
4 calibration divergence.  Reports embed the seed and a sha256 of the
resolved configuration; reruns produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import error_analysis as ea
from .calibration import LearningRates, Schedule, calibrate
from .exceptions import AquantError, DivergenceError
from .models import (
    attach_quantizers,
    derive_nearest_baseline,
    evaluate_model,
    overhead_report,
)
from .quantizer import BorderFunction, QuantParams, quantize_weight_nearest
from .storage import (
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    stable_hash,
    write_csv,
    write_json,
)
from .synth import make_dataset, make_toy_model

BORDER_CHOICES = {
    "nearest": "constant",
    "analytic": "element_linear",
    "linear": "coarse_linear",
    "quadratic": "coarse_quadratic",
}

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ORACLE = 3
EXIT_DIVERGED = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aquant",
                                     description="adaptive-rounding quantization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a seeded toy model and datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["plain", "residual"], default="plain")
    p.add_argument("--calib-samples", type=int, default=1024)
    p.add_argument("--eval-samples", type=int, default=256)

    p = sub.add_parser("calibrate", help="calibrate a model against a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--bits-w", type=int, default=None)
    p.add_argument("--bits-a", type=int, default=None)
    p.add_argument("--first-last-bits", type=int, default=None)
    p.add_argument("--border", choices=sorted(BORDER_CHOICES), default=None)
    p.add_argument("--fusion", action="store_true", default=None)
    p.add_argument("--drop-prob", type=float, default=None)
    p.add_argument("--reject-increase", action="store_true", default=None,
                   help="keep the best checkpoint instead of the last state")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--mode", choices=["blockwise", "layerwise"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-dir", default=None)

    p = sub.add_parser("evaluate", help="error report of calibrated models")
    p.add_argument("--model", action="append", required=True,
                   help="calibrated model directory (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle", help="self-check the rounding-error math")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--grid", type=int, default=1001)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("overhead", help="border storage/compute overhead table")
    p.add_argument("--model", required=True)
    p.add_argument("--border", choices=sorted(BORDER_CHOICES), required=True)
    p.add_argument("--bits-border", type=int, default=12)
    p.add_argument("--bits-w", type=int, default=None)
    p.add_argument("--out", default=None)
    return parser


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _cmd_gen(args) -> int:
    cfg = {"seed": args.seed, "variant": args.variant,
           "calib_samples": args.calib_samples, "eval_samples": args.eval_samples}
    out = Path(args.out)
    model = make_toy_model(seed=args.seed, variant=args.variant)
    calib_x, calib_y = make_dataset(model, args.calib_samples, seed=args.seed)
    eval_x, eval_y = make_dataset(model, args.eval_samples, seed=args.seed + 1)
    save_model(out / "model", model)
    save_dataset(out / "calib", calib_x, calib_y)
    save_dataset(out / "eval", eval_x, eval_y)
    write_json(out / "gen.json", {"config": cfg, "config_sha256": stable_hash(cfg)})
    print(f"wrote model + {args.calib_samples} calib / {args.eval_samples} eval samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

_CALIB_DEFAULTS = {
    "bits_w": 2, "bits_a": 4, "first_last_bits": 8, "border": "quadratic",
    "fusion": False, "drop_prob": 0.0, "reject_increase": False,
    "iters": 20000, "batch_size": 32,
    "lam": 0.01, "mode": "blockwise", "seed": 0,
}


def _resolve_config(args):
    file_cfg = {}
    if args.config:
        with open(args.config) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(_CALIB_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = dict(_CALIB_DEFAULTS)
    cfg.update(file_cfg)
    for key in _CALIB_DEFAULTS:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            cfg[key] = cli_val
    if cfg["border"] not in BORDER_CHOICES:
        raise ValueError(f"unknown border {cfg['border']!r}")
    return cfg


def _cmd_calibrate(args) -> int:
    cfg = _resolve_config(args)
    sha = stable_hash(cfg)
    model = load_model(args.model)
    calib_x, _ = load_dataset(args.data)
    attach_quantizers(model, calib_x, cfg["bits_w"], cfg["bits_a"],
                      border_variant=BORDER_CHOICES[cfg["border"]],
                      fusion=cfg["fusion"], first_last_bits=cfg["first_last_bits"])
    schedule = Schedule(total_iters=cfg["iters"], input_drop_prob=cfg["drop_prob"],
                        batch_size=cfg["batch_size"], lam=cfg["lam"],
                        reject_loss_increase=cfg["reject_increase"])
    model, log, summary = calibrate(model, calib_x, schedule, mode=cfg["mode"],
                                    lrs=LearningRates(), seed=cfg["seed"],
                                    checkpoint_dir=args.checkpoint_dir)
    out = Path(args.out)
    save_model(out / "model", model)
    write_csv(out / "training_log.csv",
              [{k: row[k] for k in ("unit", "iter", "loss", "alpha", "beta")} for row in log],
              header_comment=f"seed={cfg['seed']} config_sha256={sha}")
    write_json(out / "summary.json",
               {"config": cfg, "config_sha256": sha, "summary": summary})
    for unit in summary["units"]:
        print(f"unit {unit['unit']} ({'+'.join(unit['layers'])}): "
              f"mse {unit['initial_loss']:.6e} -> {unit['final_loss']:.6e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _cmd_evaluate(args) -> int:
    eval_x, eval_y = load_dataset(args.data)
    models = [(Path(p).name or str(i), load_model(p)) for i, p in enumerate(args.model)]
    baseline = derive_nearest_baseline(models[0][1])
    reports = {"baseline": evaluate_model(baseline, baseline, eval_x, labels=eval_y)}
    rows = []
    for name, model in models:
        key = name
        n = 1
        while key in reports:
            n += 1
            key = f"{name}-{n}"
        reports[key] = evaluate_model(model, baseline, eval_x, labels=eval_y)
    for name, rep in reports.items():
        for layer in rep["layers"]:
            rows.append({"model": name, **layer})
        rows.append({"model": name, "layer_id": "e2e", "mse_quant": rep["e2e_mse"],
                     "mse_baseline": rep["e2e_mse_baseline"],
                     "superior_ratio": "", "n_positions": ""})
    cfg = {"models": [p for p in args.model], "data": str(args.data)}
    sha = stable_hash(cfg)
    out = Path(args.out)
    write_json(out / "report.json",
               {"config": cfg, "config_sha256": sha, "reports": reports})
    write_csv(out / "report.csv", rows, header_comment=f"config_sha256={sha}")
    for name, rep in reports.items():
        acc = rep.get("accuracy")
        acc_txt = f" acc={acc:.4f}" if acc is not None else ""
        print(f"{name}: e2e mse {rep['e2e_mse']:.6e}{acc_txt}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def _theorem_sweep(rng, n_pairs, grid_points):
    x_grid = np.linspace(-8.0, 8.0, grid_points)
    checked = skipped = violations = 0
    examples = []
    for _ in range(n_pairs):
        while True:
            w = rng.uniform(-4.0, 4.0)
            dw = rng.uniform(-0.5, 0.5)
            if abs(w) > 0.05 and abs(w + dw) > 1e-3:
                break
        report = ea.verify_theorem1(w, dw, x_grid)
        checked += report.checked
        skipped += report.skipped
        violations += report.violations
        if report.violations and len(examples) < 5:
            examples.append({"w": w, "dw": dw, "x": report.violating_x})
    return {"pairs": n_pairs, "grid_points": grid_points, "checked": checked,
            "skipped_ties": skipped, "violations": violations, "examples": examples}


def _unbiasedness_check(rng, n_cases=12):
    failures = 0
    cases = []
    for i in range(n_cases):
        # zero expectation is only attainable while the analytic border stays
        # inside the rounding cell; resample until it does
        while True:
            w = rng.uniform(-3.0, 3.0)
            dw = rng.uniform(-0.4, 0.4)
            x_int = int(rng.integers(-4, 6))
            if abs(w) <= 0.2 or abs(w + dw) <= 0.05:
                continue
            b_mid = dw / (w + dw) * (x_int + 0.5) + 0.5
            if 0.02 < b_mid < 0.98:
                break
        border = lambda mid, w=w, dw=dw: float(ea.analytic_border_vec(w, dw, mid))
        mean, se = ea.expected_ew_error(w, dw, border, x_int, seed=int(rng.integers(2**31)),
                                        with_stderr=True)
        ok_adaptive = abs(mean) <= 3.0 * se
        mean_n, se_n = ea.expected_ew_error(w, dw, 0.5, x_int, seed=int(rng.integers(2**31)),
                                            with_stderr=True)
        want = ea.expected_ew_error_closed_form(w, dw, 0.5, x_int)
        ok_nearest = abs(mean_n - want) <= 3.0 * se_n
        failures += (not ok_adaptive) + (not ok_nearest)
        cases.append({"w": w, "dw": dw, "x_int": x_int, "adaptive_mean": mean,
                      "adaptive_stderr": se, "nearest_gap": mean_n - want,
                      "ok": bool(ok_adaptive and ok_nearest)})
    return {"cases": cases, "failures": failures}


def _dominance_check(rng, trials):
    violations = 0
    examples = []
    for _ in range(trials):
        k = int(rng.integers(2, 13))
        x = rng.normal(0.0, 3.0, size=k)
        bits = int(rng.integers(3, 6))
        # jitter the step off the max-abs grid: an exactly-integer x/step plus
        # a border clamped at 1.0 rounds to floor-1, a level the up/down
        # search never visits
        step = float(np.max(np.abs(x))) / (2 ** (bits - 1) - 1) * float(rng.uniform(0.85, 1.25))
        params_a = QuantParams.signed_symmetric(bits, max(step, 1e-6))
        w = rng.normal(0.0, 1.0, size=k)
        wq = QuantParams.signed_symmetric(4, max(float(np.max(np.abs(w))), 1e-6) / 7)
        w_hat = quantize_weight_nearest(w[None, :], wq)[0]
        _, best = ea.brute_force_rounding_oracle(w, x, params_a, w_hat_row=w_hat)
        dwv = w_hat - w
        slope = np.where(np.abs(w_hat) > 1e-9, dwv / np.where(w_hat == 0, 1.0, w_hat), 0.0)
        policies = {
            "nearest": BorderFunction.constant(k),
            "analytic": BorderFunction.element_linear(slope, np.full(k, 0.5)),
        }
        for name, bf in policies.items():
            from .quantizer import quantize_activation_vector
            x_hat = quantize_activation_vector(x, params_a, bf)
            err = abs(float(w_hat @ x_hat - w @ x))
            if best > err + 1e-12:
                violations += 1
                if len(examples) < 5:
                    examples.append({"policy": name, "oracle": best, "policy_error": err})
    return {"trials": trials, "violations": violations, "examples": examples}


def _cmd_oracle(args) -> int:
    cfg = {"pairs": args.pairs, "grid": args.grid, "trials": args.trials, "seed": args.seed}
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x04ac1e]))
    theorem = _theorem_sweep(rng, args.pairs, args.grid)
    unbiased = _unbiasedness_check(rng)
    dominance = _dominance_check(rng, args.trials)
    bad = theorem["violations"] + unbiased["failures"] + dominance["violations"]
    report = {"config": cfg, "config_sha256": stable_hash(cfg),
              "theorem": theorem, "unbiasedness": unbiased, "dominance": dominance,
              "violations": bad}
    if args.out:
        write_json(Path(args.out) / "oracle.json", report)
    print(f"theorem sweep: {theorem['checked']} points checked, "
          f"{theorem['violations']} violations ({theorem['skipped_ties']} ties skipped)")
    print(f"unbiasedness: {len(unbiased['cases'])} cases, {unbiased['failures']} failures")
    print(f"dominance: {dominance['trials']} trials, {dominance['violations']} violations")
    if bad:
        print("oracle violations found", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


# ---------------------------------------------------------------------------
# overhead
# ---------------------------------------------------------------------------

def _cmd_overhead(args) -> int:
    model = load_model(args.model)
    variant = BORDER_CHOICES[args.border]
    rows, totals = overhead_report(model, variant, bits_border=args.bits_border,
                                   bits_w=args.bits_w)
    header = f"{'layer':<10}{'o_c':>6}{'hidden':>8}{'border par':>12}{'param%':>10}{'size%':>10}{'ops%':>10}"
    print(header)
    for r in rows:
        print(f"{r.name:<10}{r.out_channels:>6}{r.hidden:>8}{r.border_params:>12}"
              f"{float(r.param_ratio) * 100:>10.4f}{float(r.size_ratio) * 100:>10.4f}"
              f"{float(r.ops_ratio) * 100:>10.4f}")
    print(f"total: param ratio {totals['param_ratio']} "
          f"({float(totals['param_ratio']) * 100:.4f}%), "
          f"size ratio {totals['size_ratio']} ({float(totals['size_ratio']) * 100:.4f}%)")
    if args.out:
        cfg = {"border": args.border, "bits_border": args.bits_border, "bits_w": args.bits_w}
        payload = {
            "config": cfg, "config_sha256": stable_hash(cfg),
            "layers": [{"name": r.name, "kind": r.kind, "out_channels": r.out_channels,
                        "hidden": r.hidden, "weight_params": r.weight_params,
                        "border_params": r.border_params,
                        "param_ratio": str(r.param_ratio),
                        "param_ratio_float": float(r.param_ratio),
                        "size_ratio": str(r.size_ratio),
                        "size_ratio_float": float(r.size_ratio),
                        "ops_ratio": str(r.ops_ratio),
                        "ops_ratio_float": float(r.ops_ratio)} for r in rows],
            "totals": {k: (str(v) if not isinstance(v, int) else v) for k, v in totals.items()},
        }
        write_json(Path(args.out) / "overhead.json", payload)
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "calibrate": _cmd_calibrate,
    "evaluate": _cmd_evaluate,
    "oracle": _cmd_oracle,
    "overhead": _cmd_overhead,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: calibration diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (AquantError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
