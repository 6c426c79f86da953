"""Command-line entry point: single runs, seed sweeps, SVG plots and offline data.

Configs are single JSON documents::

    {
      "env": {"preset": "chain-5"},
      "algo": {"algo": "nora", "episodes": 10000},
      "algos": ["nora", "douhua"],          # sweep only; overrides algo.algo
      "seeds": [0, 1, 2],
      "out": "runs/chain",
      "snapshot_every": 50,
      "offline": {"path": "data/"} | {"behavior": "optimal", "mix": 0.5, "n_episodes": 1250, "seed": 1},
      "emit": {"csv": true, "json": true, "svg": false}
    }

``ACBENCH_OUT`` overrides the output directory and ``ACBENCH_JOBS`` the number
of worker processes for sweeps. Exit codes: 0 success, 1 configuration error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from acbench.algorithms import ALGOS, HYBRID, AlgoConfig, ConfigError, RunResult, run_algorithm
from acbench.analysis import exponent_fit, optimism_violation_rate, seed_band, switch_curve, uniform_baseline
from acbench.envs import EnvConfig, make_env
from acbench.mdp import Env, MdpError, dp_solve_optimal
from acbench.offline import OfflineDataset, behavior_probs, generate_offline, load_offline, save_offline

log = logging.getLogger("acbench")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
EPISODE_HEADER = ["t", "reward", "regret", "cum_regret", "switch", "cum_switches", "reset"]
SERIES = {"regret": "cum_regret", "reward": "reward", "switches": "cum_switches"}
OPTIMISTIC = ("douhua", "nora", "nora-pi", "hybrid-nora", "lsvi-ucb-rs")


@dataclass
class RunConfig:
    env: EnvConfig
    algo: AlgoConfig
    algos: list[str]
    seeds: list[int]
    out: Path
    offline: dict | None = None
    emit: dict = field(default_factory=lambda: {"csv": True, "json": True, "svg": False})

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> RunConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {"env", "algo", "algos", "seeds", "seed", "out", "snapshot_every", "offline", "emit"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        env_doc = doc.get("env", {"preset": "chain-5"})
        env = EnvConfig.from_dict({"preset": env_doc} if isinstance(env_doc, str) else env_doc)
        algo_doc = dict(doc.get("algo", {}))
        if "snapshot_every" in doc:
            algo_doc["snapshot_every"] = doc["snapshot_every"]
        algo = AlgoConfig.from_dict(algo_doc)
        algos = list(doc.get("algos", [algo.algo]))
        if not algos or any(a not in ALGOS for a in algos):
            raise ConfigError(f"algos must be a nonempty subset of {ALGOS}")
        if "seeds" in doc:
            seeds = [int(s) for s in doc["seeds"]]
        else:
            seeds = [int(doc.get("seed", algo.seed))]
        if not seeds:
            raise ConfigError("seeds must be nonempty")
        out = Path(os.environ.get("ACBENCH_OUT") or doc.get("out", "acbench-out"))
        offline = doc.get("offline")
        if offline is not None:
            if not isinstance(offline, dict):
                raise ConfigError("offline must be an object")
            offline = dict(offline)
            if "path" in offline and base_dir is not None and not Path(offline["path"]).is_absolute():
                offline["path"] = str(base_dir / offline["path"])
        emit = {"csv": True, "json": True, "svg": False, **doc.get("emit", {})}
        return cls(env, algo, algos, seeds, out, offline, emit)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc, p.parent)


def build_offline(env: Env, spec: dict | None, seed: int) -> OfflineDataset | None:
    """Offline data from ``{"path": dir}`` or a generation recipe; ``None`` if absent."""
    if spec is None:
        return None
    if "path" in spec:
        return load_offline(spec["path"], env)
    behavior = spec.get("behavior", "optimal")
    mix = float(spec.get("mix", 0.5))
    if "n_samples" in spec:
        n_episodes = int(math.ceil(int(spec["n_samples"]) / env.horizon))
    else:
        n_episodes = int(spec.get("n_episodes", 0))
    data_seed = int(spec.get("seed", 10_000 + seed))
    return generate_offline(env, behavior_probs(env, behavior, mix), n_episodes, data_seed, name=behavior, mix=mix)


def execute(env_cfg: EnvConfig, algo_cfg: AlgoConfig, offline_spec: dict | None) -> RunResult:
    env = make_env(env_cfg)
    offline = build_offline(env, offline_spec, algo_cfg.seed) if algo_cfg.algo in HYBRID else None
    return run_algorithm(env, algo_cfg, offline)


def write_episodes(result: RunResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EPISODE_HEADER)
        for r in result.records:
            writer.writerow(
                [r.t, repr(float(r.reward)), repr(float(r.regret)), repr(float(r.cum_regret)),
                 int(r.switch), r.cum_switches, int(r.reset)]
            )


def summarize(result: RunResult, env: Env, env_cfg: EnvConfig) -> dict:
    fit = exponent_fit(result.cum_regret)
    curve = switch_curve(result)
    rate = None
    if result.config.algo in OPTIMISTIC and result.snapshots:
        rate = optimism_violation_rate(result, dp_solve_optimal(env.tabular))
    return {
        "algo": result.config.algo,
        "env": env_cfg.to_dict(),
        "config": result.config.to_dict(),
        "episodes": len(result.records),
        "v_star": result.v_star,
        "final_regret": float(result.cum_regret[-1]),
        "uniform_baseline": uniform_baseline(env, len(result.records)),
        "exponent": fit.slope,
        "exponent_fit": {
            "slope": fit.slope,
            "intercept": fit.intercept,
            "window": list(fit.window),
            "flagged": fit.flagged,
            "note": fit.note,
        },
        "switches": curve.total,
        "switch_statistic": curve.statistic,
        "resets": result.resets,
        "refits": result.refits,
        "optimism_violation_rate": rate,
        "eta": result.eta,
        "beta": result.beta,
        "bonus": result.bonus,
        "critic": result.critic_kind,
    }


def write_run(result: RunResult, env_cfg: EnvConfig, out: Path, emit: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(env_cfg)
    summary = summarize(result, env, env_cfg)
    if emit.get("csv", True):
        write_episodes(result, out / "episodes.csv")
    if emit.get("json", True):
        (out / "summary.json").write_text(json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n")
    return summary


def _clean(obj):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def cmd_run(cfg: RunConfig) -> int:
    algo = AlgoConfig.from_dict({**cfg.algo.to_dict(), "algo": cfg.algos[0], "seed": cfg.seeds[0]})
    result = execute(cfg.env, algo, cfg.offline)
    summary = write_run(result, cfg.env, cfg.out, cfg.emit)
    log.info("%s: final regret %.4f, exponent %.3f", algo.algo, summary["final_regret"], summary["exponent"])
    return EXIT_OK


def _sweep_job(args: tuple) -> tuple[str, int, dict | None, str | None]:
    env_cfg, algo_cfg, offline_spec, out, emit = args
    try:
        result = execute(env_cfg, algo_cfg, offline_spec)
        write_run(result, env_cfg, out, {**emit, "csv": True})
        return algo_cfg.algo, algo_cfg.seed, None, None
    except Exception as exc:  # reported per run; the sweep continues
        return algo_cfg.algo, algo_cfg.seed, None, f"{type(exc).__name__}: {exc}"


def jobs_from_env() -> int:
    raw = os.environ.get("ACBENCH_JOBS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        jobs = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ACBENCH_JOBS must be an integer, got {raw!r}") from exc
    if jobs < 1:
        raise ConfigError("ACBENCH_JOBS must be at least 1")
    return jobs


def read_episode_column(path: Path, column: str) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(row[column]) for row in csv.DictReader(fh)])


def write_aggregate(out: Path, runs: dict[str, list[Path]]) -> Path:
    """Long-format aggregate: one row per (algo, t) with mean and 10/90 percentiles."""
    header = ["algo", "t"]
    for name in SERIES.values():
        header += [f"{name}_mean", f"{name}_p10", f"{name}_p90"]
    header.append("n_seeds")
    path = out / "aggregate.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for algo in sorted(runs):
            dirs = runs[algo]
            bands = [seed_band([read_episode_column(d / "episodes.csv", c) for d in dirs]) for c in SERIES.values()]
            for i in range(len(bands[0].mean)):
                row: list = [algo, i + 1]
                for band in bands:
                    row += [repr(float(band.mean[i])), repr(float(band.p10[i])), repr(float(band.p90[i]))]
                row.append(len(dirs))
                writer.writerow(row)
    return path


def cmd_sweep(cfg: RunConfig) -> int:
    jobs = jobs_from_env()
    tasks = []
    for algo in cfg.algos:
        for seed in cfg.seeds:
            algo_cfg = AlgoConfig.from_dict({**cfg.algo.to_dict(), "algo": algo, "seed": seed})
            tasks.append((cfg.env, algo_cfg, cfg.offline, cfg.out / algo / f"seed-{seed}", cfg.emit))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            outcomes = list(pool.map(_sweep_job, tasks))
    else:
        outcomes = [_sweep_job(t) for t in tasks]
    ok: dict[str, list[Path]] = {}
    failures = 0
    for (algo, seed, _, error), task in zip(outcomes, tasks):
        if error:
            failures += 1
            log.error("run %s seed %d failed: %s", algo, seed, error)
        else:
            ok.setdefault(algo, []).append(task[3])
    if not ok:
        log.error("every run failed")
        return EXIT_RUNTIME
    if failures:
        log.warning("aggregate built from %d successful runs; %d failed", sum(map(len, ok.values())), failures)
    path = write_aggregate(cfg.out, ok)
    if cfg.emit.get("svg"):
        render_svg(read_aggregate(path), "regret", loglog=False, out=cfg.out / "regret.svg")
    return EXIT_OK


def read_aggregate(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """algo -> column -> series, validated against the aggregate schema."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot open aggregate {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "algo" not in reader.fieldnames or "t" not in reader.fieldnames:
            raise ConfigError("malformed aggregate CSV: missing algo/t columns")
        data: dict[str, dict[str, list[float]]] = {}
        try:
            for row in reader:
                cols = data.setdefault(row["algo"], {})
                for k, v in row.items():
                    if k != "algo":
                        cols.setdefault(k, []).append(float(v))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed aggregate CSV: {exc}") from exc
    return {a: {k: np.array(v) for k, v in cols.items()} for a, cols in data.items()}


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_svg(
    data: dict[str, dict[str, np.ndarray]], kind: str, loglog: bool = False, out: str | Path | None = None
) -> str:
    """Static line chart of the per-episode mean of ``kind`` with a 10-90% band."""
    if kind not in SERIES:
        raise ConfigError(f"plot kind must be one of {sorted(SERIES)}")
    col = SERIES[kind]
    series = []
    for algo in sorted(data):
        cols = data[algo]
        if f"{col}_mean" not in cols:
            raise ConfigError(f"aggregate has no {col}_mean column")
        t, y = cols["t"], cols[f"{col}_mean"]
        lo, hi = cols.get(f"{col}_p10", y), cols.get(f"{col}_p90", y)
        if len(t) == 0:
            continue
        series.append((algo, t, y, lo, hi))
    if not series:
        raise ConfigError("aggregate contains no data to plot")

    W, Hh, ml, mr, mt, mb = 640, 420, 70, 150, 40, 50
    pw, ph = W - ml - mr, Hh - mt - mb

    def tx(v):
        return np.log10(v) if loglog else v

    xs = np.concatenate([s[1] for s in series])
    ys = np.concatenate([np.concatenate([s[2], s[3], s[4]]) for s in series])
    if loglog:
        xs, ys = xs[xs > 0], ys[ys > 0]
        if len(xs) == 0 or len(ys) == 0:
            raise ConfigError("log-log plot needs positive values")
    x0, x1 = float(tx(xs.min())), float(tx(xs.max()))
    y0, y1 = float(tx(ys.min())), float(tx(ys.max()))
    if not loglog:
        y0 = min(y0, 0.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(v):
        return ml + (tx(v) - x0) / (x1 - x0) * pw

    def py(v):
        return mt + ph - (tx(v) - y0) / (y1 - y0) * ph

    def path_points(t, y, max_points=400):
        keep = (t > 0) & (y > 0) if loglog else np.ones(len(t), bool)
        t, y = t[keep], y[keep]
        if len(t) > max_points:
            idx = np.unique(np.linspace(0, len(t) - 1, max_points).round().astype(int))
            t, y = t[idx], y[idx]
        return " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(t, y))

    label = {"regret": "cumulative regret", "reward": "episode reward", "switches": "cumulative switches"}[kind]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{Hh}" viewBox="0 0 {W} {Hh}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{ml + pw / 2:.0f}" y="22" text-anchor="middle" font-size="14">{label} vs episode'
        f'{" (log-log)" if loglog else ""}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="{ml + pw / 2:.0f}" y="{Hh - 10}" text-anchor="middle" font-size="12">'
        f'{"log10 episode" if loglog else "episode"}</text>',
        f'<text x="16" y="{mt + ph / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 16 {mt + ph / 2:.0f})">{"log10 " if loglog else ""}{label}</text>',
    ]
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        X = ml + pw * k / 4
        Y = mt + ph - ph * k / 4
        parts.append(f'<text x="{X:.1f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{fx:.3g}</text>')
        parts.append(f'<text x="{ml - 6}" y="{Y + 3:.1f}" text-anchor="end" font-size="10">{fy:.3g}</text>')
    for i, (algo, t, y, lo, hi) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if np.any(lo != hi):
            upper = path_points(t, hi)
            lower = " ".join(reversed(path_points(t, lo).split()))
            parts.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path_points(t, y)}"/>')
        ly = mt + 16 * i + 8
        parts.append(f'<line x1="{ml + pw + 12}" y1="{ly}" x2="{ml + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        text = algo
        if loglog and kind == "regret":
            fit = exponent_fit(y)
            if math.isfinite(fit.slope):
                text += f" slope {fit.slope:.2f}"
        parts.append(f'<text x="{ml + pw + 36}" y="{ly + 4}" font-size="11">{text}</text>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(svg)
    return svg


def cmd_plot(path: str, kind: str, loglog: bool, out: str) -> int:
    render_svg(read_aggregate(path), kind, loglog, out)
    return EXIT_OK


def cmd_gen_offline(cfg_path: str, out: str) -> int:
    try:
        doc = json.loads(Path(cfg_path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {cfg_path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    env_doc = doc.get("env", {"preset": "chain-5"})
    env_cfg = EnvConfig.from_dict({"preset": env_doc} if isinstance(env_doc, str) else env_doc)
    spec = dict(doc.get("offline", {}))
    spec.pop("path", None)
    env = make_env(env_cfg)
    spec.setdefault("seed", int(doc.get("seed", 0)))
    data = build_offline(env, spec, int(spec["seed"]))
    data.meta["env"] = env_cfg.to_dict()
    save_offline(data, out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acbench", description="Actor-critic regret benchmark on exactly solvable MDPs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="one (algorithm, environment, seed) run")
    p.add_argument("-c", "--config", required=True)
    p = sub.add_parser("sweep", help="all (algorithm, seed) pairs plus aggregate.csv")
    p.add_argument("-c", "--config", required=True)
    p = sub.add_parser("plot", help="SVG chart from aggregate.csv")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-k", "--kind", choices=sorted(SERIES), default="regret")
    p.add_argument("--loglog", action="store_true")
    p.add_argument("-o", "--output", required=True)
    p = sub.add_parser("gen-offline", help="generate an offline dataset directory")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("run", "sweep"):
            cfg = load_config(args.config)
            return cmd_run(cfg) if args.command == "run" else cmd_sweep(cfg)
        if args.command == "plot":
            return cmd_plot(args.input, args.kind, args.loglog, args.output)
        return cmd_gen_offline(args.config, args.output)
    except (ConfigError, MdpError, KeyError, TypeError) as exc:
        print(f"acbench: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"acbench: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
