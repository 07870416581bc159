"""Command-line surface: train runs, oracle verification, run reports,
and checkpoint rollouts.

Exit codes: 0 success, 1 failed verification, 2 bad input (config,
arguments, missing files), 3 diverged training run.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import autodiff as ad
from .autodiff import Tensor
from .critic import ValueSupport, probabilities_from_logits, project_onto_support
from .diffusion import AnalyticLinearScore, NoiseSchedule, sample_trajectory
from .experience import make_environment
from .networks import ScoreNetwork, read_checkpoint
from .oracles import (
    analytic_gaussian_reversal,
    boltzmann_policy,
    build_grid_chain,
    finite_difference_gradient,
    gaussian_entropy,
    max_relative_error,
    path_kl_exact,
    project_categorical_bruteforce,
    tabular_soft_policy_iteration,
)
from .stats import interquartile_mean, stratified_bootstrap_ci
from .trainer import METRIC_KEYS, TrainerConfig, TrainingDiverged, evaluate, train


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config round trip
# ---------------------------------------------------------------------------


def config_to_toml(config: TrainerConfig) -> str:
    """Serialize a config so that parsing the text reproduces it exactly.

    ``None`` fields are omitted; absent keys fall back to the same
    defaults on the way in.
    """
    lines = ["# training configuration"]
    for f in fields(TrainerConfig):
        value = getattr(config, f.name)
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, int):
            text = str(value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = json.dumps(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainerConfig:
    data = tomllib.loads(text)
    allowed = {f.name for f in fields(TrainerConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return TrainerConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str) -> TrainerConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return parse_config(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc


def resolve_out_dir(explicit: str | None, fallback: str) -> str:
    """DIME_OUT re-roots any relative output path."""
    root = os.environ.get("DIME_OUT")
    chosen = Path(explicit if explicit is not None else fallback)
    if root and not chosen.is_absolute():
        chosen = Path(root) / chosen
    return str(chosen)


# ---------------------------------------------------------------------------
# Verification suites: each check is (name, value, bound, ok-predicate)
# ---------------------------------------------------------------------------


def _row(name: str, value: float, bound: float, ok: bool) -> dict:
    return {
        "check": name,
        "value": f"{value:.3e}",
        "bound": f"{bound:.3e}",
        "verdict": "PASS" if ok else "FAIL",
    }


def _suite_autodiff() -> list:
    rows = []

    def graph_dense(x, w):
        h = (x @ w).gelu().tanh()
        return (h.square().mean() + (x.softplus().sum(axis=1) + 1.0).log().sum()) * 0.5

    def graph_chain(x, w):
        a = ad.concatenate([x, x.square()], axis=1)
        b = a[:, : w.data.shape[0]] @ w
        return (b.exp() + 1.0).log().mean() + b.square().sum() * 0.01

    def graph_reduce(x, w):
        s = (x * x).sum(axis=0) - x.mean(axis=0)
        return (((s.reshape((1, -1)) @ w).softplus() + 1e-3).sqrt()).sum()

    builders = {"dense": graph_dense, "chain": graph_chain, "reduce": graph_reduce}
    for name, build in builders.items():
        for seed in range(3):
            rng = np.random.default_rng(seed)
            x0 = rng.normal(size=(3, 4))
            w0 = rng.normal(size=(4, 3)) if name != "chain" else rng.normal(size=(4, 2))

            def value_of(xv, wv):
                with ad.no_grad():
                    return float(build(Tensor(xv), Tensor(wv)).data)

            x = Tensor(x0.copy(), requires_grad=True)
            w = Tensor(w0.copy(), requires_grad=True)
            build(x, w).backward()
            fd = finite_difference_gradient(value_of, [x0.copy(), w0.copy()])
            err = max(max_relative_error(x.grad, fd[0]), max_relative_error(w.grad, fd[1]))
            rows.append(_row(f"autodiff/{name}/seed{seed}", err, 1e-4, err < 1e-4))
    return rows


def _suite_bound() -> list:
    rows = []
    n_steps, n_paths, eta = 64, 20_000, 1.0
    for sigma in (0.5, 1.0, 2.0):
        schedule = NoiseSchedule(n_steps, 1, eta=eta)
        with ad.no_grad():
            betas = schedule.effective_betas()[:, 0]
        moments = analytic_gaussian_reversal(sigma, betas, schedule.delta, eta)
        policy = AnalyticLinearScore(moments.score_coefficients)
        with ad.no_grad():
            traj = sample_trajectory(
                policy, schedule, Tensor(np.zeros((n_paths, 1))), np.random.default_rng(2024), squash=False
            )
        values = traj.entropy_bound.data
        mean = float(values.mean())
        se = float(values.std(ddof=1) / math.sqrt(n_paths))
        entropy = gaussian_entropy(sigma)
        rows.append(_row(f"bound/sigma{sigma}/holds", mean - entropy, 3.0 * se, mean - entropy <= 3.0 * se))
        rows.append(_row(f"bound/sigma{sigma}/gap", entropy - mean, 0.1, entropy - mean < 0.1))
    return rows


def _random_grid_chain(rng: np.random.Generator):
    grid = np.linspace(-3.0, 3.0, 13)
    log_target = -0.5 * ((grid - rng.uniform(-0.5, 0.5)) / rng.uniform(0.6, 1.2)) ** 2
    n_steps = int(rng.integers(2, 4))
    score_table = rng.normal(0.0, 0.5, size=(n_steps, grid.size))
    betas = rng.uniform(0.3, 1.5, size=n_steps)
    return build_grid_chain(grid, log_target, score_table, betas, eta=1.0, delta=1.0 / n_steps)


def _suite_kl() -> list:
    rows = []
    for seed in range(6):
        chain = _random_grid_chain(np.random.default_rng(seed))
        joint, marginal = path_kl_exact(chain)
        slack = joint - marginal
        rows.append(_row(f"kl/instance{seed}/joint_ge_marginal", slack, -1e-9, slack >= -1e-9))
    return rows


def _suite_tabular() -> list:
    rows = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n_states, n_actions = 4, 5
        rewards = rng.normal(size=(n_states, n_actions))
        transitions = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        alpha = float(rng.uniform(0.2, 1.5))
        result = tabular_soft_policy_iteration(rewards, transitions, 0.9, alpha)
        worst = min(result.improvement_margins)
        gap = float(np.max(np.abs(result.policy - boltzmann_policy(result.q_star, alpha))))
        rows.append(_row(f"tabular/mdp{seed}/monotone", worst, -1e-9, worst >= -1e-9))
        rows.append(_row(f"tabular/mdp{seed}/boltzmann_fixed_point", gap, 1e-8, gap <= 1e-8))
    return rows


def _suite_projection() -> list:
    rows = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        support = ValueSupport(-2.0, 3.0, int(rng.integers(5, 41)))
        batch = 400
        values = rng.uniform(-4.0, 5.0, size=(batch, 17))
        logits = rng.normal(size=(batch, 17))
        probs = probabilities_from_logits(logits)
        got = project_onto_support(values, probs, support)
        want = np.stack(
            [project_categorical_bruteforce(values[i], probs[i], support.atoms) for i in range(batch)]
        )
        diff = float(np.max(np.abs(got - want)))
        mass = float(np.max(np.abs(got.sum(axis=1) - 1.0)))
        rows.append(_row(f"projection/batch{seed}/matches_bruteforce", diff, 1e-12, diff <= 1e-12))
        rows.append(_row(f"projection/batch{seed}/mass_conserved", mass, 1e-9, mass <= 1e-9))
    return rows


VERIFY_SUITES = {
    "autodiff": _suite_autodiff,
    "bound": _suite_bound,
    "kl": _suite_kl,
    "tabular": _suite_tabular,
    "projection": _suite_projection,
}


# ---------------------------------------------------------------------------
# Report helpers
# ---------------------------------------------------------------------------


def _read_run(path: Path) -> dict:
    """env_step -> metrics row; empty dict when nothing parses."""
    rows = {}
    metrics = path / "metrics.jsonl"
    if not metrics.exists():
        return rows
    for line in metrics.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError:
            continue
        if "env_step" in row:
            rows[int(row["env_step"])] = row
    return rows


def _svg_line_chart(xs, ys, lo, hi, title: str, path: Path) -> None:
    """Minimal hand-written SVG: CI band polygon under a line curve."""
    width, height = 640, 400
    ml, mr, mt, mb = 70, 20, 40, 50
    x0, x1 = min(xs), max(xs)
    y_all = list(ys) + list(lo) + list(hi)
    y0, y1 = min(y_all), max(y_all)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * (width - ml - mr)

    def sy(v):
        return height - mb - (v - y0) / (y1 - y0) * (height - mt - mb)

    band_pts = [f"{sx(x):.2f},{sy(h):.2f}" for x, h in zip(xs, hi)]
    band_pts += [f"{sx(x):.2f},{sy(l):.2f}" for x, l in zip(reversed(xs), reversed(lo))]
    line_pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2:.0f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>',
        f'<polygon points="{" ".join(band_pts)}" fill="#7aa6d9" fill-opacity="0.35" stroke="none"/>',
        f'<polyline points="{line_pts}" fill="none" stroke="#1f4e8c" stroke-width="2"/>',
    ]
    for i in range(5):
        xv = x0 + i * (x1 - x0) / 4
        yv = y0 + i * (y1 - y0) / 4
        parts.append(
            f'<line x1="{sx(xv):.1f}" y1="{height-mb}" x2="{sx(xv):.1f}" y2="{height-mb+5}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{height-mb+20}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11">{xv:.0f}</text>'
        )
        parts.append(f'<line x1="{ml-5}" y1="{sy(yv):.1f}" x2="{ml}" y2="{sy(yv):.1f}" stroke="black"/>')
        parts.append(
            f'<text x="{ml-9}" y="{sy(yv)+4:.1f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{yv:.3g}</text>'
        )
    parts.append(
        f'<line x1="{ml}" y1="{height-mb}" x2="{width-mr}" y2="{height-mb}" stroke="black" stroke-width="1"/>'
    )
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height-mb}" stroke="black" stroke-width="1"/>')
    parts.append(
        f'<text x="{width/2:.0f}" y="{height-12}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12">environment steps</text>'
    )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


REPORT_METRICS = ("mean_return", "iqm_return", "entropy_bound", "alpha", "critic_loss", "policy_loss")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_train(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out_dir = resolve_out_dir(args.out, config.out_dir if config.out_dir else "run")
    config = replace(config, out_dir=out_dir)
    try:
        result = train(config)
    except KeyError as exc:
        print(str(exc.args[0]), file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        print(f"diagnostics written to {out_dir}/diagnostics.json", file=sys.stderr)
        return 3
    rows = result.metrics.rows
    final = rows[-1]["iqm_return"] if rows else float("nan")
    print(
        f"completed {config.total_steps} steps ({result.critic_updates} critic / "
        f"{result.actor_updates} actor updates); final IQM return {final}; outputs in {out_dir}"
    )
    return 0


def _cmd_verify(args) -> int:
    names = list(VERIFY_SUITES) if args.suite == "all" else [args.suite]
    rows = []
    for name in names:
        rows.extend(VERIFY_SUITES[name]())
    header = ("check", "value", "bound", "verdict")
    widths = [max(len(h), max(len(str(r[h])) for r in rows)) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(r[k]).ljust(w) for k, w in zip(header, widths)))
    out_dir = Path(resolve_out_dir(args.out, "verify"))
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"verify_{args.suite}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)
    failures = [r for r in rows if r["verdict"] != "PASS"]
    print(f"{len(rows) - len(failures)}/{len(rows)} checks passed; table written to {csv_path}")
    return 1 if failures else 0


def _cmd_report(args) -> int:
    runs = []
    for d in args.runs:
        rows = _read_run(Path(d))
        if rows:
            runs.append(rows)
        else:
            print(f"skipping {d}: no parsable metrics", file=sys.stderr)
    if not runs:
        print("no parsable runs", file=sys.stderr)
        return 2
    steps = sorted(set.intersection(*[set(r) for r in runs]))
    if not steps:
        print("runs share no evaluation steps", file=sys.stderr)
        return 2
    out_dir = Path(resolve_out_dir(args.out, "report"))
    out_dir.mkdir(parents=True, exist_ok=True)

    aggregate_rows = []
    for metric in REPORT_METRICS:
        xs, ys, los, his = [], [], [], []
        for step in steps:
            values = [run[step][metric] for run in runs if run[step].get(metric) is not None]
            if not values:
                continue
            arr = np.asarray(values, dtype=np.float64)
            # runs are the strata: one value per seed at this step
            point = float(interquartile_mean(arr))
            lo, hi = stratified_bootstrap_ci([arr], n_resamples=2000, rng=np.random.default_rng([step, len(xs)]))
            xs.append(step)
            ys.append(point)
            los.append(lo)
            his.append(hi)
            aggregate_rows.append(
                {
                    "metric": metric,
                    "env_step": step,
                    "n_runs": len(values),
                    "iqm": point,
                    "ci_low": lo,
                    "ci_high": hi,
                }
            )
        if xs:
            _svg_line_chart(xs, ys, los, his, f"{metric} (IQM over {len(runs)} runs, 95% CI)", out_dir / f"report_{metric}.svg")

    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("metric", "env_step", "n_runs", "iqm", "ci_low", "ci_high"))
        writer.writeheader()
        writer.writerows(aggregate_rows)
    print(f"aggregated {len(runs)} runs over {len(steps)} eval points into {out_dir}")
    return 0


def load_policy_checkpoint(path: str):
    """Rebuild the sampling policy (score net + schedule) from a checkpoint."""
    arrays = read_checkpoint(path)
    needed = ("score.fc1.weight", "score.fc3.bias", "score.time_in.weight", "meta.n_steps", "meta.eta")
    for key in needed:
        if key not in arrays:
            raise ConfigError(f"checkpoint {path} lacks {key}; not a policy checkpoint")
    act_dim = arrays["score.fc3.bias"].size
    obs_dim = arrays["score.fc1.weight"].shape[0] - act_dim
    hidden = arrays["score.fc1.weight"].shape[1]
    time_width = arrays["score.time_in.weight"].shape[1]
    n_frequencies = arrays["score.time_in.weight"].shape[0] // 2
    n_steps = int(arrays["meta.n_steps"])
    net = ScoreNetwork(
        obs_dim, act_dim, n_steps, hidden=hidden, time_width=time_width, n_frequencies=n_frequencies
    )
    live = net.named_arrays("score")
    for name, target in live.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint {path} lacks {name}")
        target[...] = arrays[name]
    net.mark_updated()
    schedule = NoiseSchedule(
        n_steps,
        act_dim,
        eta=float(arrays["meta.eta"]),
        beta_min=float(arrays["meta.beta_min"]),
        beta_max=float(arrays["meta.beta_max"]),
    )
    schedule.scale_raw.data[...] = arrays["schedule.scale_raw"]
    return net, schedule


def _cmd_eval(args) -> int:
    try:
        net, schedule = load_policy_checkpoint(args.checkpoint)
    except FileNotFoundError:
        print(f"checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    try:
        env = make_environment(args.env)
    except KeyError as exc:
        print(str(exc.args[0]), file=sys.stderr)
        return 2
    if env.obs_dim != net.obs_dim or env.act_dim != net.act_dim:
        print(
            f"checkpoint is for obs_dim={net.obs_dim}, act_dim={net.act_dim}; "
            f"environment '{args.env}' has obs_dim={env.obs_dim}, act_dim={env.act_dim}",
            file=sys.stderr,
        )
        return 2
    stats = evaluate(net, schedule, env, args.episodes, args.seed)
    for i, value in enumerate(stats["returns"]):
        print(f"episode {i}: return {value:.6f}")
    print(
        f"mean {stats['mean']:.6f}  IQM {stats['iqm']:.6f}  "
        f"CI [{stats['ci_low']:.6f}, {stats['ci_high']:.6f}]"
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dime", description="Diffusion-policy maximum-entropy RL at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop from a TOML config")
    p_train.add_argument("--config", required=True, help="path to a TOML config file")
    p_train.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p_train.add_argument("--out", default=None, help="output directory (DIME_OUT re-roots relative paths)")
    p_train.set_defaults(func=_cmd_train)

    p_verify = sub.add_parser("verify", help="run oracle-backed verification suites")
    p_verify.add_argument("--suite", required=True, choices=sorted(VERIFY_SUITES) + ["all"])
    p_verify.add_argument("--out", default=None, help="directory for the CSV table")
    p_verify.set_defaults(func=_cmd_verify)

    p_report = sub.add_parser("report", help="aggregate run directories into CSV + SVG charts")
    p_report.add_argument("--runs", nargs="+", required=True, help="run directories with metrics.jsonl")
    p_report.add_argument("--out", default=None, help="report output directory")
    p_report.set_defaults(func=_cmd_report)

    p_eval = sub.add_parser("eval", help="roll out a saved checkpoint deterministically")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--env", required=True)
    p_eval.add_argument("--episodes", type=int, default=8)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=_cmd_eval)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
