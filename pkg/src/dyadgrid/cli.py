"""Command line driver: verification suites and norm experiments.

Exit codes: 0 pass, 1 usage or config error, 2 invariant violation,
3 numerical non-convergence. Reports are written even when a check fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from . import __version__
from .adapt import HypothesisError
from .cubes import (build_system, diamond_intersection_bound, lemma_diamond_ball, random_cube,
                    verify_system)
from .haar import make_haar
from .model import doubling_report, make_model, quasitriangle_violations
from .norms import (DepthError, NonConvergenceError, shift_norm_curve, stripe_norm_curve,
                    write_csv_atomic, write_text_atomic)

log = logging.getLogger("dyadgrid")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NONCONVERGENCE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            a, b = part.split("..", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default)
CONFIG_KEYS: dict[str, tuple[Callable, object]] = {
    "model": (str, "TorusSup"),
    "k": (int, 1),
    "J": (int, 8),
    "C_R": (float, 4.0),
    "mu": (int, 0),  # 0 selects the smallest admissible mu
    "instances": (int, 20),
    "max_per_level": (int, 12),
    "m_list": (_int_list, [0, 1, 2, 4]),
    "lambda_list": (_int_list, [1, 2, 3]),
    "p_list": (_float_list, [2.0]),
    "stripe_index": (int, 1),
    "restarts": (int, 2),
    "class_restarts": (int, 1),
    "classes": (_bool, False),
    "ell": (str, "beta"),
    "axis": (int, 0),
    "seed": (int, 0),
    "witnesses": (_bool, False),
    "lemma_instances": (int, 100),
}


def parse_config(text: str) -> dict:
    cfg = {k: v for k, (_, v) in CONFIG_KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            cfg[key] = CONFIG_KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return cfg


def _load_config(args) -> dict:
    text = ""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_config(text)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not os.path.isdir(args.out):
        raise ConfigError(f"output directory {args.out!r} does not exist")
    if any(m < 0 for m in cfg["m_list"]):
        raise ConfigError("m_list entries must be nonnegative")
    if any(lam < 1 for lam in cfg["lambda_list"]):
        raise ConfigError("lambda_list entries must be positive")
    if any(not 1 < p < float("inf") for p in cfg["p_list"]):
        raise ConfigError("p_list entries must lie in (1, inf)")
    if cfg["instances"] < 0:
        raise ConfigError("instances must be nonnegative")
    return cfg


def _model_from(cfg: dict):
    try:
        return make_model(cfg["model"], cfg["k"], cfg["J"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "numerator") and hasattr(obj, "denominator") and not isinstance(obj, int):
        return str(obj)
    return obj


def _write_report(out: str, name: str, command: str, cfg: dict, body: dict) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "command": command, "version": __version__,
           "config": cfg, **body}
    path = os.path.join(out, name)
    write_text_atomic(path, json.dumps(_jsonable(doc), sort_keys=True, indent=1) + "\n")
    return path


def _pool_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ----------------------------------------------------------------------------
# commands


def cmd_verify_cubes(cfg: dict, args) -> int:
    model = _model_from(cfg)
    system = build_system(model)
    if args.faults:
        # a ball constant that is too large must break the sandwich property
        system = dataclasses.replace(system, C_1=system.C_1 * 4)
    report = verify_system(system)
    quasi = quasitriangle_violations(model, seed=cfg["seed"])
    doubling = doubling_report(model)
    rng = np.random.default_rng(cfg["seed"])
    lemma_bad = 0
    for _ in range(cfg["lemma_instances"]):
        A = random_cube(system, rng)
        r = float(rng.uniform(0.1, 8.0))
        if not lemma_diamond_ball(system, A, r):
            lemma_bad += 1
        B = random_cube(system, rng)
        if not diamond_intersection_bound(system, A, B, r, float(rng.uniform(0.1, 8.0)))["inclusion_verified"]:
            lemma_bad += 1
    ok = bool(report["ok"]) and quasi["violations"] == 0 and doubling["violations"] == 0 and lemma_bad == 0
    _write_report(args.out, "verify_cubes.json", "verify-cubes", cfg, {
        "ok": ok, "faults": bool(args.faults), "model": model.describe(), "system": system.describe(),
        "properties": report, "quasitriangle": quasi, "doubling": doubling,
        "lemma_violations": lemma_bad})
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_adapt_demo(cfg: dict, args) -> int:
    from .adapt import build_adapted_grid, random_instance, verify_adapted_grid

    model = _model_from(cfg)
    system = build_system(model)
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(cfg["instances"])

    def run(i: int) -> dict:
        rng = np.random.default_rng(seeds[i])
        inp, params = random_instance(system, rng, C_R=cfg["C_R"], mu=cfg["mu"] or None,
                                      max_per_level=cfg["max_per_level"])
        grid = build_adapted_grid(system, inp)
        if args.faults and i == 0 and grid.order:
            # drop the generating cube from its own adapted set
            A = grid.order[-1]
            grid.sigma[A] = grid.sigma[A] - system.cells(A)
        rep = verify_adapted_grid(system, inp, grid)
        return {"instance": i, "ok": rep["ok"], "regions": rep["regions"],
                "worst_ratio": rep["worst_ratio"], "measure_bound": rep["measure_bound"],
                "violations": sorted({v["condition"] for v in rep["violations"]}),
                "mu": params["mu"], "levels": params["levels"]}

    results = _pool_map(run, range(cfg["instances"]), args.threads)
    ok = all(r["ok"] for r in results)
    _write_report(args.out, "adapt_demo.json", "adapt-demo", cfg, {
        "ok": ok, "faults": bool(args.faults), "model": model.describe(),
        "instances": results,
        "worst_ratio": max((r["worst_ratio"] for r in results), default=0.0)})
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_shift_norms(cfg: dict, args) -> int:
    model = _model_from(cfg)
    system = build_system(model, max_certify_level=min(model.J, 6))
    haar = make_haar(system)
    ell = cfg["ell"] if cfg["ell"] == "beta" else int(cfg["ell"])
    rows, summary = [], []
    for p in cfg["p_list"]:
        def one(m):
            return shift_norm_curve(system, haar, [m], p, ell_policy=ell, C_R=cfg["C_R"],
                                    classes=cfg["classes"], restarts=cfg["restarts"],
                                    class_restarts=cfg["class_restarts"], axis=cfg["axis"],
                                    seed=cfg["seed"])
        for batch in _pool_map(one, cfg["m_list"], args.threads):
            for r in batch:
                wname = ""
                if cfg["witnesses"] and r["estimate"].witness is not None:
                    wname = f"witness_shift_p{p:g}_m{r['m']}_{r['class']}.csv"
                    f = r["operator"].synth(r["estimate"].witness)
                    write_text_atomic(os.path.join(args.out, wname), f.to_csv())
                param = f"m={r['m']} ell={r['ell']} class={r['class']}"
                op_name = "shift" if r["class"] == "full" else "shift_class"
                rows.append([op_name, repr(float(p)), param, repr(float(r["norm"])), r["kind"], wname])
                summary.append({"operator": op_name, "p": p, "m": r["m"], "class": r["class"],
                                "ell": r["ell"], "beta": r["beta"], "norm": r["norm"], "kind": r["kind"],
                                "seeds": r["estimate"].seed, "iterations": r["estimate"].iterations})
    write_csv_atomic(os.path.join(args.out, "shift_norms.csv"),
                     ["operator", "p", "param", "norm", "kind", "witness_file"], rows)
    _write_report(args.out, "shift_norms.json", "shift-norms", cfg,
                  {"ok": True, "model": model.describe(), "rows": summary})
    return EXIT_OK


def cmd_stripe_norms(cfg: dict, args) -> int:
    model = _model_from(cfg)
    if cfg["lambda_list"] and not 1 <= cfg["stripe_index"] <= 2 ** min(cfg["lambda_list"]):
        raise ConfigError(f"stripe_index must lie in 1..{2 ** min(cfg['lambda_list'])}")
    system = build_system(model, max_certify_level=min(model.J, 6))
    haar = make_haar(system)
    rows, summary = [], []
    for p in cfg["p_list"]:
        curve = stripe_norm_curve(system, haar, cfg["lambda_list"], p, m=cfg["stripe_index"],
                                  restarts=cfg["restarts"], seed=cfg["seed"])
        for r in curve:
            wname = ""
            if cfg["witnesses"] and r["estimate"].witness is not None:
                wname = f"witness_stripe_p{p:g}_lambda{r['lambda']}.csv"
                f = r["operator"].synth(r["estimate"].witness)
                write_text_atomic(os.path.join(args.out, wname), f.to_csv())
            rows.append([r["lambda"], r["M"], repr(float(p)), repr(float(r["norm"])), r["kind"],
                         repr(r["envelope_lower_exponent"]), repr(r["envelope_upper_exponent"]), wname])
            summary.append({k: v for k, v in r.items() if k not in ("estimate", "operator")})
    write_csv_atomic(os.path.join(args.out, "stripe_norms.csv"),
                     ["lambda", "M", "p", "norm", "kind", "lower_exponent", "upper_exponent",
                      "witness_file"], rows)
    _write_report(args.out, "stripe_norms.json", "stripe-norms", cfg,
                  {"ok": True, "model": model.describe(), "rows": summary})
    return EXIT_OK


COMMANDS = {
    "verify-cubes": cmd_verify_cubes,
    "adapt-demo": cmd_adapt_demo,
    "shift-norms": cmd_shift_norms,
    "stripe-norms": cmd_stripe_norms,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyadgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--out", default=".", help="existing output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--faults", action="store_true", help="run the fault-injection variant")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load_config(args)
        if args.faults and args.command not in ("verify-cubes", "adapt-demo"):
            raise ConfigError(f"no fault-injection suite for {args.command}")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DepthError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
