"""Command-line interface.

Subcommands: verify-kernel, verify-score, gen-data, train, sample, match,
frechet-diag.  Every run writes its reports (JSON/CSV, plus rendered
figures) and a manifest carrying the effective config hash, the seed and
the library versions, so any artifact can be reproduced byte-for-byte by
re-running with the same inputs.  Exit codes: 0 success, 1 validation
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, config_hash, load_config
from .data import (generate_toy, frechet_diagnostic, read_jsonl, structure_match,
                   write_jsonl)
from .kinetic import simulate_forward, sample_transition, target_score, transition_logpdf
from .network import load_checkpoint
from .reports import (render_frechet_report, render_kernel_report, render_match_report,
                      render_metrics, render_score_report)
from .sampling import SamplerConfig, TrainedModel, sample_batch
from .torus import wrap_angle
from .training import train as run_training
from .wrapped_normal import WrappedNormalParams, wn_logpdf, wn_score_mean

log = logging.getLogger("kindiff")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("KINDIFF_LOG", "warning").upper()
    logging.basicConfig(stream=sys.stderr,
                        level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _versions() -> dict:
    return {"python": ".".join(map(str, sys.version_info[:3])),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "kindiff": __version__}


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, cfg: RunConfig, extra=None) -> None:
    manifest = {"command": command, "config_hash": config_hash(cfg),
                "seed": cfg.seed, "versions": _versions()}
    if extra:
        manifest.update(extra)
    (out / f"{command}_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows, cfg_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash: {cfg_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in row])


# ---------------------------------------------------------------------------
# verify-kernel


def _circular_z(r, v_true):
    """Delta-method z-scores of circular mean (against 0) and circular variance."""
    c, s = np.cos(r), np.sin(r)
    n = r.size
    C, S = c.mean(), s.mean()
    cov_cc, cov_ss = c.var() / n, s.var() / n
    cov_cs = float(np.mean((c - C) * (s - S))) / n
    R = float(np.hypot(C, S))
    mu_hat = float(np.arctan2(S, C))
    g_mu = np.array([-S, C]) / R ** 2
    g_r = np.array([C, S]) / R
    var_mu = g_mu[0] ** 2 * cov_cc + 2 * g_mu[0] * g_mu[1] * cov_cs + g_mu[1] ** 2 * cov_ss
    var_r = g_r[0] ** 2 * cov_cc + 2 * g_r[0] * g_r[1] * cov_cs + g_r[1] ** 2 * cov_ss
    cv_hat = 1.0 - R
    cv_true = 1.0 - float(np.exp(-v_true / 2.0))
    z_mu = float(wrap_angle(mu_hat)) / float(np.sqrt(var_mu))
    z_cv = (cv_hat - cv_true) / float(np.sqrt(var_r))
    return {"mean_r": mu_hat, "z_mean_r": z_mu, "circvar_r": cv_hat,
            "circvar_r_true": cv_true, "z_circvar_r": z_cv}


def cmd_verify_kernel(args) -> int:
    cfg = _effective_config(args)
    sched = cfg.schedule
    times = sorted(args.t)
    if not times or times[-1] > sched.T or times[0] <= 0:
        raise UsageError(f"verification times must lie in (0, {sched.T}]")
    out = _out_dir(args)
    n = args.n
    dt = args.dt
    rng = np.random.default_rng(cfg.seed)

    # one trajectory batch, moments recorded at each requested time
    theta = np.zeros(n)
    v = np.zeros(n)
    step_of = {t: max(1, round(t / dt)) for t in times}
    results = []
    total = max(step_of.values())
    noise_scale = np.sqrt(2.0 * sched.gamma * dt)
    for step in range(1, total + 1):
        xi = rng.standard_normal(n)
        v = v - sched.gamma * v * dt + noise_scale * xi
        theta = wrap_angle(theta + v * dt)
        for t, s in step_of.items():
            if s == step:
                row = {"t": t, "n": n, "dt": dt}
                row.update(_circular_z(theta, float(sched.sigma2_r_marginal(t))))
                se_mean = v.std(ddof=1) / np.sqrt(n)
                s2 = v.var(ddof=1)
                s2_true = float(sched.sigma2_v(t))
                row["mean_v"] = float(v.mean())
                row["z_mean_v"] = float(v.mean() / se_mean)
                row["var_v"] = float(s2)
                row["var_v_true"] = s2_true
                row["z_var_v"] = float((s2 - s2_true) / (s2 * np.sqrt(2.0 / (n - 1))))
                results.append(row)

    zkeys = ("z_mean_r", "z_circvar_r", "z_mean_v", "z_var_v")
    worst = max(abs(row[k]) for row in results for k in zkeys)
    report = {"config_hash": config_hash(cfg), "seed": cfg.seed, "results": results,
              "max_abs_z": worst, "passed": bool(worst < 3.0)}
    _write_json(out / "verify_kernel.json", report)
    _write_csv(out / "verify_kernel.csv",
               ["t"] + list(zkeys), [[r["t"]] + [r[k] for k in zkeys] for r in results],
               report["config_hash"])
    if not args.no_plots:
        render_kernel_report(report, out / "verify_kernel.png")
    _write_manifest(out, "verify-kernel", cfg, {"outputs": ["verify_kernel.json",
                                                            "verify_kernel.csv"]})
    print(f"verify-kernel: max |z| = {worst:.3f} ({'PASS' if report['passed'] else 'FAIL'})")
    return EXIT_OK if report["passed"] else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# verify-score


def cmd_verify_score(args) -> int:
    cfg = _effective_config(args)
    sched = cfg.schedule
    out = _out_dir(args)
    rng = np.random.default_rng(cfg.seed)
    h = 1e-6

    kin_errs = []
    for _ in range(args.n):
        t = float(rng.uniform(0.05, sched.T))
        theta0 = rng.uniform(-np.pi, np.pi, (3, 1))
        v0 = rng.standard_normal((3, 1))
        ns = sample_transition(theta0, v0, t, sched, rng, mean_free=False)
        s = target_score(ns, v0, sched, mean_free=False)
        fd = np.zeros_like(s)
        for i in range(3):
            vp = ns.v_t.copy(); vp[i, 0] += h
            vm = ns.v_t.copy(); vm[i, 0] -= h
            fd[i, 0] = (transition_logpdf(ns.theta_t, vp, theta0, v0, t, sched)
                        - transition_logpdf(ns.theta_t, vm, theta0, v0, t, sched)) / (2 * h)
        kin_errs.append(float(np.linalg.norm(s - fd) / np.linalg.norm(fd)))

    wn_errs = []
    for _ in range(args.n):
        mu = float(rng.uniform(-np.pi, np.pi))
        s2 = float(rng.uniform(0.02, 3.0))
        r = float(rng.uniform(-np.pi, np.pi))
        analytic = float(wn_score_mean(r, WrappedNormalParams(np.asarray(mu), np.asarray(s2))))
        fd = float(wn_logpdf(r, WrappedNormalParams(np.asarray(mu + h), np.asarray(s2)))
                   - wn_logpdf(r, WrappedNormalParams(np.asarray(mu - h), np.asarray(s2)))) / (2 * h)
        wn_errs.append(abs(analytic - fd) / max(abs(fd), 1e-7))

    report = {"config_hash": config_hash(cfg), "seed": cfg.seed, "n": args.n,
              "kinetic_rel_errors": kin_errs, "wn_rel_errors": wn_errs,
              "kinetic_max": max(kin_errs), "wn_max": max(wn_errs),
              "kinetic_tol": 1e-4, "wn_tol": 1e-5,
              "passed": bool(max(kin_errs) < 1e-4 and max(wn_errs) < 1e-5)}
    _write_json(out / "verify_score.json", report)
    if not args.no_plots:
        render_score_report(report, out / "verify_score.png")
    _write_manifest(out, "verify-score", cfg, {"outputs": ["verify_score.json"]})
    print(f"verify-score: kinetic max rel err {report['kinetic_max']:.2e}, "
          f"wn max rel err {report['wn_max']:.2e} "
          f"({'PASS' if report['passed'] else 'FAIL'})")
    return EXIT_OK if report["passed"] else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    if cfg.toy is None:
        raise UsageError("gen-data requires a [toy] section in the config")
    out = _out_dir(args)
    train_spec = cfg.toy
    test_count = args.test_count if args.test_count else max(1, train_spec.count // 10)
    test_spec = dataclasses.replace(train_spec, count=test_count, seed=train_spec.seed + 1)
    write_jsonl(out / "train.jsonl", generate_toy(train_spec))
    write_jsonl(out / "test.jsonl", generate_toy(test_spec))
    _write_manifest(out, "gen-data", cfg,
                    {"outputs": ["train.jsonl", "test.jsonl"],
                     "train_count": train_spec.count, "test_count": test_count})
    print(f"gen-data: wrote {train_spec.count} train / {test_count} test records to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    data_path = Path(args.data) if args.data else Path(cfg.data.train)
    if not data_path.exists():
        raise UsageError(f"training data not found: {data_path}")
    dataset = read_jsonl(data_path)
    out = _out_dir(args)
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    result = run_training(dataset, train_cfg, cfg.net, cfg.schedule, cfg.vp,
                          metrics_path=None, checkpoint_path=out / "model.ckpt")
    rows = [[m["step"], m["t_mean"], m["loss_total"], m["loss_v"], m["loss_l"],
             m["loss_a"], m["val_metric"]] for m in result.metrics]
    _write_csv(out / "metrics.csv",
               ["step", "t_mean", "loss_total", "loss_v", "loss_l", "loss_a", "val_metric"],
               rows, config_hash(cfg))
    if not args.no_plots:
        render_metrics(result.metrics, out / "metrics.png")
    _write_manifest(out, "train", cfg,
                    {"outputs": ["model.ckpt", "metrics.csv"],
                     "best_val": result.best_val, "best_step": result.best_step,
                     "aborted": result.aborted, "n_records": len(dataset)})
    print(f"train: best val metric {result.best_val:.3f} at step {result.best_step}"
          f"{' (aborted on non-finite loss)' if result.aborted else ''}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def _sample_for_refs(model, refs, cfg: RunConfig, n_per_ref: int = 1):
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(refs):
        groups.setdefault(tuple(s.species.tolist()), []).append(i)
    out = [None] * (len(refs) * n_per_ref)
    for gi, (comp, idxs) in enumerate(sorted(groups.items())):
        scfg = dataclasses.replace(cfg.sampler, seed=cfg.seed + gi)
        states, _ = _sample_parallel(model, len(idxs) * n_per_ref, refs[idxs[0]].k,
                                     np.asarray(comp), scfg, cfg.threads)
        for j, i in enumerate(idxs):
            for r in range(n_per_ref):
                out[i * n_per_ref + r] = states[j * n_per_ref + r]
    return out


def _sample_worker(payload):
    model, n, k, comp, scfg, offset = payload
    return sample_batch(model, n, k, comp, scfg, sample_offset=offset)[0]


def _sample_parallel(model, n, k, comp, scfg: SamplerConfig, threads: int):
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    if workers <= 1 or n < 2 * scfg.max_chunk:
        return sample_batch(model, n, k, comp, scfg)
    # per-sample rng streams are indexed globally, so splitting the range
    # across processes reproduces the serial output exactly
    from concurrent.futures import ProcessPoolExecutor

    bounds = np.linspace(0, n, workers + 1, dtype=int)
    payloads = [(model, int(hi - lo), k, comp, scfg, int(lo))
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    states = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_sample_worker, payloads):
            states.extend(part)
    return states, None


def cmd_sample(args) -> int:
    cfg = _effective_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = TrainedModel(load_checkpoint(ckpt))
    out = _out_dir(args)

    if args.ref:
        ref_path = Path(args.ref)
        if not ref_path.exists():
            raise UsageError(f"reference dataset not found: {ref_path}")
        refs = read_jsonl(ref_path)
        if args.n and args.n != len(refs):
            raise UsageError("--n conflicts with --ref (one sample per reference record)")
        states = _sample_for_refs(model, refs, cfg)
    else:
        if model.task == "csp":
            if not args.composition:
                raise UsageError("CSP sampling requires --ref or --composition")
            comp = np.array([int(x) for x in args.composition.split(",")])
        else:
            comp = None
        k = args.k if args.k else (comp.size if comp is not None else None)
        if k is None:
            raise UsageError("DNG sampling requires --k")
        scfg = dataclasses.replace(cfg.sampler, seed=cfg.seed)
        states, _ = _sample_parallel(model, args.n or 1, k, comp, scfg, cfg.threads)

    write_jsonl(out / "samples.jsonl", states)
    _write_manifest(out, "sample", cfg,
                    {"outputs": ["samples.jsonl"], "n": len(states),
                     "scheme": cfg.sampler.scheme, "checkpoint": str(ckpt)})
    print(f"sample: wrote {len(states)} structures ({cfg.sampler.scheme}) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# match


def cmd_match(args) -> int:
    cfg = _effective_config(args)
    pred_path, ref_path = Path(args.pred), Path(args.ref)
    for p in (pred_path, ref_path):
        if not p.exists():
            raise UsageError(f"input not found: {p}")
    preds = read_jsonl(pred_path)
    refs = read_jsonl(ref_path)
    if len(preds) != len(refs):
        raise UsageError(f"prediction/reference counts differ: {len(preds)} vs {len(refs)}")
    out = _out_dir(args)

    rows = []
    rmses_matched = []
    hits = 0
    for i, (p, r) in enumerate(zip(preds, refs)):
        ok, rmse = structure_match(p, r, site_tol=args.tol)
        hits += int(ok)
        if ok:
            rmses_matched.append(rmse)
        rows.append([i, int(ok), rmse])
    report = {"config_hash": config_hash(cfg), "n": len(preds), "site_tol": args.tol,
              "match_rate": hits / len(preds),
              "rmse_mean": float(np.mean(rmses_matched)) if rmses_matched else None}
    _write_json(out / "match.json", report)
    _write_csv(out / "match.csv", ["index", "matched", "rmse"], rows, report["config_hash"])
    if not args.no_plots:
        render_match_report([r[2] for r in rows], args.tol, out / "match.png")
    _write_manifest(out, "match", cfg, {"outputs": ["match.json", "match.csv"]})
    print(f"match: rate={report['match_rate']:.3f} "
          f"rmse_mean={report['rmse_mean'] if report['rmse_mean'] is not None else 'n/a'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# frechet-diag


def cmd_frechet_diag(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(args)
    rng = np.random.default_rng(cfg.seed)
    rep = frechet_diagnostic(k=args.k, sigma2_grid=args.sigma2,
                             mean_free=not args.no_mean_free, n=args.n, rng=rng)
    entries = [{"sigma2": e.sigma2, "preserved_frac": e.preserved_frac,
                "quantized_frac": e.quantized_frac,
                "max_quantum_residual": float(np.max(e.quantum_residuals)),
                "shifts": e.shifts.tolist()} for e in rep.entries]
    report = {"config_hash": config_hash(cfg), "seed": cfg.seed, "k": rep.k,
              "mean_free": rep.mean_free, "n": rep.n, "tol": rep.tol,
              "entries": entries}
    _write_json(out / "frechet_diag.json", report)
    _write_csv(out / "frechet_diag.csv",
               ["sigma2", "preserved_frac", "quantized_frac", "max_quantum_residual"],
               [[e["sigma2"], e["preserved_frac"], e["quantized_frac"],
                 e["max_quantum_residual"]] for e in entries],
               report["config_hash"])
    if not args.no_plots:
        render_frechet_report(entries, rep.k, rep.mean_free, out / "frechet_diag.png")
    _write_manifest(out, "frechet-diag", cfg,
                    {"outputs": ["frechet_diag.json", "frechet_diag.csv"]})
    for e in entries:
        print(f"frechet-diag sigma2={e['sigma2']:g}: preserved={e['preserved_frac']:.3f} "
              f"quantized={e['quantized_frac']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kindiff",
        description="kinetic Langevin diffusion on the torus: verify, train, sample, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker processes (default: cores)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--no-plots", action="store_true", help="skip figure rendering")

    p = sub.add_parser("verify-kernel", help="Monte Carlo kernel-vs-oracle moment report")
    common(p)
    p.add_argument("--t", type=_float_list, default=[0.25, 0.5, 1.0, 2.0],
                   help="comma-separated diffusion times")
    p.add_argument("--n", type=int, default=100_000, help="trajectories")
    p.add_argument("--dt", type=float, default=1e-3, help="simulation step")
    p.set_defaults(func=cmd_verify_kernel)

    p = sub.add_parser("verify-score", help="finite-difference score report")
    common(p)
    p.add_argument("--n", type=int, default=1000, help="random draws per check")
    p.set_defaults(func=cmd_verify_score)

    p = sub.add_parser("gen-data", help="generate a toy dataset (train + test split)")
    common(p)
    p.add_argument("--test-count", type=int, default=0,
                   help="test records (default: count // 10)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the score network")
    common(p)
    p.add_argument("--data", help="training JSONL (default: [data].train from config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate structures from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=0, help="number of samples")
    p.add_argument("--ref", help="reference JSONL; one sample per record's composition")
    p.add_argument("--composition", help="comma-separated species indices")
    p.add_argument("--k", type=int, default=0, help="atoms per cell (DNG)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("match", help="CSP-style evaluation of samples against references")
    common(p)
    p.add_argument("--pred", required=True, help="generated JSONL")
    p.add_argument("--ref", required=True, help="reference JSONL")
    p.add_argument("--tol", type=float, default=0.05, help="site tolerance")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("frechet-diag", help="Frechet-mean preservation diagnostic")
    common(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--sigma2", type=_float_list, default=[0.1, 0.7])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--no-mean-free", action="store_true")
    p.set_defaults(func=cmd_frechet_diag)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
