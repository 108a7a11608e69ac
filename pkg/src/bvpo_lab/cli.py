"""Command-line experiment runner.

``bvpo-lab COMMAND --config PATH [--seed U64] [--out DIR] [--jobs N]``

The config is a JSON object holding one scenario (see
:class:`~bvpo_lab.scenarios.ScenarioConfig`) plus optional per-command
sections ``sweep``, ``sgd`` and ``diagnostics``.  A config of the form
``{"scenarios": [...], ...}`` runs each listed scenario, with the remaining
top-level keys as shared defaults, into its own subdirectory.

Exit codes: 0 success, 1 config error, 2 enumeration-size error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import format_tables, stochasticity_report
from .errors import ContractError, EnumerationSizeError, NumericalAbort
from .estimators import POSTERIOR, STORED, SamplingLaw, build_cells, conditional_variance, mse_curve
from .io import config_hash, write_csv, write_json, write_jsonl
from .policy import TraceLength
from .rng import MASK64
from .scenarios import (ScenarioConfig, build_scenario, default_answer_lengths,
                        default_trace_lengths, empty_only_policy, heavy_trace_policy)
from .sgd import ESTIMATOR_MODES, SgdConfig, estimate_smoothness, run_sgd, verify_bound

EXIT_OK, EXIT_CONFIG, EXIT_ENUMERATION, EXIT_ABORT = 0, 1, 2, 3
SECTIONS = ("sweep", "sgd", "diagnostics")
TRAJECTORY_COLUMNS = ("k", "loss_m", "true_grad_norm_sq", "bias_norm_sq", "variance", "mse",
                      "alpha_used")


def _hash_config(command: str, raw: dict) -> dict:
    """Config as hashed into outputs; the output location does not affect results."""
    out = {k: v for k, v in raw.items() if k != "output_dir"}
    out["command"] = command
    return out


def _alpha_grid(section: dict) -> np.ndarray:
    grid = section.get("alpha_grid", 101)
    if isinstance(grid, int):
        if grid < 2:
            raise ContractError("alpha_grid needs at least 2 points")
        return np.linspace(0.0, 1.0, grid)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0 or np.any((grid < 0) | (grid > 1)):
        raise ContractError("alpha_grid must be a count or a list of values in [0, 1]")
    return grid


# ---------------------------------------------------------------------------
# commands; each takes the raw scenario dict and an output directory


def cmd_gen_scenario(raw: dict, out: Path) -> int:
    cfg = ScenarioConfig.from_dict(raw)
    sc = build_scenario(cfg)
    hashed = _hash_config("gen-scenario", raw)
    write_json(out / "scenario.json", {
        "config": cfg.to_dict(),
        "policy": sc.policy.to_dict(),
        "ref_policy": sc.ref_policy.to_dict(),
        "reward": sc.reward.to_dict(),
        "skipped_prompts": list(sc.d_t.skipped),
    }, hashed)
    write_jsonl(out / "dataset_t.jsonl", [s.to_dict() for s in sc.d_t], hashed)
    write_jsonl(out / "dataset_e.jsonl", [s.to_dict() for s in sc.d_e], hashed)
    print(f"gen-scenario: {len(sc.d_t)} paired samples -> {out}")
    return EXIT_OK


def cmd_variance_sweep(raw: dict, out: Path) -> int:
    cfg = ScenarioConfig.from_dict(raw)
    sc = build_scenario(cfg)
    grid = _alpha_grid(raw.get("sweep", {}))
    hashed = _hash_config("variance-sweep", raw)
    cells = build_cells(sc.policy, sc.ref_policy, sc.d_t, sc.d_e, sc.cfg, sc.law)
    moments = cells.moments()
    curve = mse_curve(moments)
    rows = []
    for a in grid:
        mse, bias_sq, var = cells.decomposition(float(a))
        rows.append((float(a), mse, float(curve(float(a))), bias_sq, var))
    write_csv(out / "mse_curve.csv", ("alpha", "mse_exact", "mse_quadratic", "bias_sq", "variance"),
              rows, hashed)
    best = min(range(len(rows)), key=lambda j: rows[j][1])
    write_json(out / "moments.json", {
        "moments": moments.to_dict(),
        "curve": curve.to_dict(),
        "grid_argmin_alpha": rows[best][0],
        "law": sc.law.mode,
    }, hashed)

    # the stored law fixes the traces, so trace-draw variance is taken under the posterior
    law = sc.law if sc.law.mode != STORED else SamplingLaw(POSTERIOR)
    cv_rows = []
    for j, (st, se) in enumerate(zip(sc.d_t, sc.d_e)):
        for a in grid:
            var_gc, var_gt = conditional_variance(sc.policy, sc.ref_policy, st, se, sc.cfg, law, float(a))
            cv_rows.append((j, st.prompt, law.mode, float(a), var_gt, var_gc))
    write_csv(out / "conditional_variance.csv",
              ("sample", "prompt", "law", "alpha", "var_gt", "var_gc"), cv_rows, hashed)
    print(f"variance-sweep: alpha_star={curve.alpha_star:.6g} over {len(grid)} grid points -> {out}")
    return EXIT_OK


def _sgd_modes(section: dict) -> list:
    est = section.get("estimator", "all")
    modes = list(ESTIMATOR_MODES) if est == "all" else ([est] if isinstance(est, str) else list(est))
    for m in modes:
        if m not in ESTIMATOR_MODES:
            raise ContractError(f"unknown estimator mode {m!r}")
    if not modes:
        raise ContractError("no estimator modes given")
    return modes


def _learning_rate(section: dict, L: float) -> float:
    if "eta" in section and section["eta"] is not None:
        return float(section["eta"])
    rule = section.get("eta_rule", "1/L")
    factor = {"1/L": 1.0, "1/(2L)": 0.5}.get(rule)
    if factor is None:
        raise ContractError(f"unknown eta_rule {rule!r}; use '1/L', '1/(2L)' or an explicit eta")
    if L <= 0:
        raise ContractError("smoothness estimate is zero; give an explicit eta")
    return factor / L


def _write_run(out: Path, report, verdict, sgd: SgdConfig, hashed: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = [tuple(getattr(r, c) for c in TRAJECTORY_COLUMNS) for r in report.records]
    write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, rows, hashed)
    summary = report.summary()
    summary["sgd"] = {"eta": sgd.eta, "K": sgd.K, "estimator": sgd.estimator, "alpha": sgd.alpha,
                      "law": sgd.law.mode, "batch": sgd.batch, "seed": sgd.seed}
    if verdict is not None:
        summary.update({"verdict": verdict.verdict, "margin_exact": verdict.margin_exact,
                        "margin_uniform": verdict.margin_uniform})
    else:
        summary["verdict"] = "aborted"
    write_json(out / "summary.json", summary, hashed)
    if sgd.estimator == "optimal-alpha":
        write_csv(out / "alpha_trace.csv", ("k", "alpha_mse", "alpha_ek", "alpha_used"),
                  [(r.k, r.alpha_mse, r.alpha_ek, r.alpha_used) for r in report.records], hashed)


def cmd_sgd_run(raw: dict, out: Path) -> int:
    cfg = ScenarioConfig.from_dict(raw)
    sc = build_scenario(cfg)
    section = dict(raw.get("sgd", {}))
    hashed = _hash_config("sgd-run", raw)
    modes = _sgd_modes(section)
    L = estimate_smoothness(sc.policy.shape, sc.ref_policy, sc.d_t, sc.cfg,
                            probe_count=int(section.get("probe_count", 200)),
                            radius=float(section.get("radius", 1.0)),
                            seed=cfg.seed, centers=[sc.policy.theta, sc.ref_policy.theta])
    eta = _learning_rate(section, L)
    code = EXIT_OK
    for mode in modes:
        sgd = SgdConfig(eta=eta, K=int(section.get("K", 200)), estimator=mode,
                        alpha=float(section.get("alpha", 0.5)),
                        law=SamplingLaw(section.get("law", cfg.law)),
                        batch=section.get("batch", 1), seed=int(section.get("seed", cfg.seed)))
        target = out / mode if len(modes) > 1 else out
        try:
            report = run_sgd(sc.policy, sc.ref_policy, sc.d_t, sc.d_e, sc.cfg, sgd, L)
        except NumericalAbort as exc:
            _write_run(target, exc.record, None, sgd, hashed)
            print(f"sgd-run {mode}: aborted ({exc}); partial trajectory in {target}", file=sys.stderr)
            code = EXIT_ABORT
            continue
        verdict = verify_bound(report, eta, L)
        _write_run(target, report, verdict, sgd, hashed)
        print(f"sgd-run {mode}: eta*L={eta * L:.4g} verdict={verdict.verdict} -> {target}")
    return code


def _diagnostic_policy(kind: str, sc, cfg: ScenarioConfig, seed: int):
    if kind == "initial":
        return sc.policy
    if kind == "ref":
        return sc.ref_policy
    if kind == "empty-only":
        return empty_only_policy(cfg.shape, seed)
    if kind == "heavy-trace":
        return heavy_trace_policy(cfg.shape, seed)
    raise ContractError(f"unknown diagnostics policy {kind!r}")


def cmd_diagnostics(raw: dict, out: Path) -> int:
    cfg = ScenarioConfig.from_dict(raw)
    section = raw.get("diagnostics", {})
    hashed = _hash_config("diagnostics", raw)
    kind = section.get("policy", "ref")
    sc = build_scenario(cfg) if kind in ("initial", "ref") else None
    policy = _diagnostic_policy(kind, sc, cfg, cfg.seed)
    s = cfg.shape
    if section.get("trace_lengths") is not None:
        lengths = TraceLength(section["trace_lengths"])
    elif cfg.trace_lengths is not None:
        lengths = TraceLength(cfg.trace_lengths)
    else:
        lengths = default_trace_lengths(s.n_traces)
    answer_lengths = section.get("answer_lengths") or default_answer_lengths(s.n_answers)
    report = stochasticity_report(policy, lengths, answer_lengths,
                                  int(section.get("n_per_question", 5)), cfg.seed)
    body = report.to_dict()
    body["policy"] = kind
    write_json(out / "stochasticity.json", body, hashed)
    header = f"# config_hash={config_hash(hashed)} tool_version={__version__}\n"
    (out / "stochasticity.txt").write_text(header + format_tables(report, cfg.name or kind),
                                           encoding="utf-8")
    fields = [k for k in report.to_dict() if k != "flags"]
    write_csv(out / "stochasticity.csv", fields + ["flags"],
              [[getattr(report, k) for k in fields] + [";".join(report.flags)]], hashed)
    print(f"diagnostics: var_ratio_logp={report.var_ratio_logp:.4g} "
          f"mean_length_ratio={report.mean_length_ratio:.4g} -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-scenario": cmd_gen_scenario,
    "variance-sweep": cmd_variance_sweep,
    "sgd-run": cmd_sgd_run,
    "diagnostics": cmd_diagnostics,
}


# ---------------------------------------------------------------------------
# driver


def _run_one(command: str, raw: dict, out: str) -> int:
    """Run a command on one scenario, mapping failures to exit codes."""
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        return COMMANDS[command](raw, path)
    except EnumerationSizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENUMERATION
    except NumericalAbort as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ContractError, KeyError, TypeError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _expand(config: dict, seed, out: str) -> list:
    """List of (raw scenario dict, output dir) pairs."""
    if "scenarios" in config:
        shared = {k: v for k, v in config.items() if k != "scenarios"}
        items = config["scenarios"]
        if not isinstance(items, list) or not items:
            raise ContractError("'scenarios' must be a nonempty list")
        jobs = []
        for i, item in enumerate(items):
            raw = {**shared, **item}
            for sec in SECTIONS:
                if isinstance(shared.get(sec), dict) and isinstance(item.get(sec), dict):
                    raw[sec] = {**shared[sec], **item[sec]}
            name = raw.get("name") or f"scenario_{i:03d}"
            jobs.append((raw, str(Path(out) / name)))
    else:
        jobs = [(dict(config), out)]
    if seed is not None:
        for raw, _ in jobs:
            raw["seed"] = seed
    return jobs


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value <= MASK64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bvpo-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=_u64, default=None, help="override the config's data seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir or .)")
    p.add_argument("--jobs", type=int, default=1, help="parallel scenarios")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(config, dict):
            raise ContractError("config must be a JSON object")
        out = args.out or config.get("output_dir") or "."
        jobs = _expand(config, args.seed, out)
    except (OSError, json.JSONDecodeError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs == 1 or len(jobs) == 1:
        codes = [_run_one(args.command, raw, o) for raw, o in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_run_one, [args.command] * len(jobs), *zip(*jobs)))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
