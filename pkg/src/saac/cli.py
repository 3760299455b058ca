"""Command-line entry point.

    saac train --config run.cfg --set total_steps=5000 --seeds 0,1 --variants none,cons
    saac eval RUN_DIR --episodes 20
    saac project-states RUN_DIR/states.csv --stages 10000,20000
    saac compare --baseline OUT/none OUT/cons OUT/msd
    saac grad-check
    saac oracle-check

Config files hold ``key = value`` lines; ``#`` starts a comment. ``--set``
overrides win over the file. Outputs go to ``<out>/<variant>/<seed>/``; the
output root defaults to ``$SAAC_OUT`` and then to ``runs``.
"""
import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from saac.numerics import ConfigurationError, TrainingDivergence, make_rng
from saac.trainer import (TrainConfig, config_fields, evaluate, load_params, read_metrics,
                          read_states, run_training)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as "
                                 f"{type(default).__name__}") from None
    return text


def parse_pairs(lines, source="<overrides>"):
    pairs = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_config(path=None, overrides=()):
    """Defaults, then the file, then ``overrides`` ("key=value" strings)."""
    pairs = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            pairs.update(parse_pairs(fh, path))
    pairs.update(parse_pairs(overrides))
    known = config_fields()
    base = TrainConfig()
    values = {}
    for key, text in pairs.items():
        if key not in known:
            raise ConfigurationError(f"{key}: unknown configuration key")
        values[key] = _coerce(key, text, getattr(base, key))
    return replace(base, **values).validate()


@dataclass
class RunSpec:
    config: TrainConfig
    seeds: list
    variants: list
    out_root: str
    jobs: int = 1
    config_path: str = ""
    overrides: list = field(default_factory=list)

    def validate(self):
        if not self.seeds:
            raise ConfigurationError("seeds: need at least one seed")
        if not self.variants:
            raise ConfigurationError("variants: need at least one variant")
        return self

    def run_dir(self, variant, seed):
        return os.path.join(self.out_root, variant, str(seed))


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def out_root(arg):
    return arg or os.environ.get("SAAC_OUT") or "runs"


def _train_one(cfg, out_dir):
    try:
        m = run_training(cfg, out_dir)
    except (TrainingDivergence, FloatingPointError) as exc:
        return cfg.adversary, cfg.seed, None, f"aborted: {exc}"
    last = m.rows[-1]
    return cfg.adversary, cfg.seed, out_dir, (
        f"return={last.eval_return_mean:.3f} failures={m.train_failures} "
        f"time={m.wall_time:.1f}s")


def cmd_train(spec):
    spec.validate()
    jobs = []
    for variant in spec.variants:
        for seed in spec.seeds:
            cfg = replace(spec.config, adversary=variant, seed=seed).validate()
            jobs.append((cfg, spec.run_dir(variant, seed)))
    if spec.jobs > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            results = list(pool.map(_train_one, *zip(*jobs)))
    else:
        results = [_train_one(cfg, d) for cfg, d in jobs]
    status = 0
    for variant, seed, out_dir, msg in results:
        print(f"{variant} seed={seed}: {msg}")
        if out_dir is None:
            status = 1
    return status


def _load_config(run_dir):
    with open(os.path.join(run_dir, "run_info.json"), encoding="utf-8") as fh:
        info = json.load(fh)
    cfg = dict(info["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    return TrainConfig(**cfg)


def cmd_eval(run_dir, episodes, seed):
    from saac.envs import make_env
    from saac.policy import SquashedGaussianPolicy

    cfg = _load_config(run_dir)
    env = make_env(cfg.env_config())
    trunk = load_params(os.path.join(run_dir, "params", "policy.bin"))
    policy = SquashedGaussianPolicy(env.state_dim, env.action_dim,
                                    action_bound=env.action_bound, trunk=trunk)
    res = evaluate(policy, env, episodes, make_rng(seed))
    print(f"episodes={episodes} return_mean={res.mean_return:.4f} "
          f"return_std={res.std_return:.4f} failures={res.failures}")
    return 0


# -- PCA ----------------------------------------------------------------------------

@dataclass
class PcaProjection:
    mean: np.ndarray
    directions: np.ndarray  # (k, dim), orthonormal rows
    variances: np.ndarray
    points: np.ndarray  # (n, k)
    rank_deficient: bool = False


def power_iteration(cov, rng, tol=1e-12, max_iter=10_000):
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        lam_new = float(w @ cov @ w)
        if np.linalg.norm(w - v) < tol or abs(lam_new - lam) < tol * max(abs(lam_new), 1.0):
            return lam_new, w
        v, lam = w, lam_new
    return lam, v


def pca(data, n_components=2, seed=0, rank_tol=1e-10):
    """Top principal directions of the sample covariance by power iteration with deflation.

    Components whose variance falls below ``rank_tol`` times the total are dropped
    and the projection is flagged as rank-deficient.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ConfigurationError("PCA needs at least 3 state rows")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    total = float(np.trace(cov))
    rng = make_rng(seed)
    dirs, variances = [], []
    deflated = cov.copy()
    for _ in range(min(n_components, x.shape[1])):
        lam, v = power_iteration(deflated, rng)
        if lam <= rank_tol * max(total, 1e-300):
            break
        for u in dirs:  # re-orthogonalize against earlier directions
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        dirs.append(v)
        variances.append(lam)
        deflated -= lam * np.outer(v, v)
    directions = np.array(dirs).reshape(len(dirs), x.shape[1])
    return PcaProjection(mean, directions, np.array(variances), xc @ directions.T,
                         len(dirs) < n_components)


def stage_labels(steps, boundaries):
    """Stage index of each step: the number of boundaries at or below it."""
    return np.searchsorted(np.sort(np.asarray(boundaries)), steps, side="right")


def cmd_project_states(paths, boundaries, out_path):
    steps_all, states_all = [], []
    for p in paths:
        steps, states = read_states(p)
        steps_all.append(steps)
        states_all.append(states)
    steps = np.concatenate(steps_all)
    proj = pca(np.vstack(states_all))
    labels = stage_labels(steps, boundaries)
    k = proj.directions.shape[0]
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "stage", *[f"pc{i + 1}" for i in range(k)]])
        for s, lab, pt in zip(steps, labels, proj.points):
            w.writerow([str(s), str(lab), *[repr(float(v)) for v in pt]])
    print(f"wrote {len(steps)} points to {out_path}; variances "
          + ", ".join(f"{v:.4g}" for v in proj.variances)
          + (" (rank-deficient)" if proj.rank_deficient else ""))
    return proj


# -- compare ----------------------------------------------------------------------

def _seed_dirs(path):
    if os.path.isfile(os.path.join(path, "metrics.csv")):
        return [path]
    subs = sorted(os.path.join(path, d) for d in os.listdir(path))
    return [d for d in subs if os.path.isfile(os.path.join(d, "metrics.csv"))]


def load_runs(path):
    """metrics rows for every seed directory under ``path``."""
    dirs = _seed_dirs(path)
    if not dirs:
        raise FileNotFoundError(f"{path}: no metrics.csv found")
    return [read_metrics(os.path.join(d, "metrics.csv")) for d in dirs]


def mean_curve(runs):
    n = min(len(r) for r in runs)
    steps = np.array([row.step for row in runs[0][:n]])
    returns = np.mean([[row.eval_return_mean for row in r[:n]] for r in runs], axis=0)
    return steps, returns


def efficiency_threshold(returns, fraction=0.95):
    """Return level at ``fraction`` of the way from the curve's minimum to its maximum."""
    lo, hi = float(np.min(returns)), float(np.max(returns))
    return lo + fraction * (hi - lo)


def steps_to_threshold(steps, returns, threshold):
    hit = np.flatnonzero(returns >= threshold)
    return int(steps[hit[0]]) if hit.size else None


def efficiency(baseline_steps, variant_steps):
    if variant_steps is None:
        return 0.0
    if variant_steps == 0:
        return 1.0 if baseline_steps == 0 else float("inf")
    return baseline_steps / variant_steps


@dataclass
class CompareRow:
    name: str
    n_seeds: int
    steps_to_threshold: object
    efficiency: float
    failures_mean: float
    failures_std: float
    final_return_mean: float


def compare(baseline_path, variant_paths, fraction=0.95):
    base = load_runs(baseline_path)
    b_steps, b_ret = mean_curve(base)
    threshold = efficiency_threshold(b_ret, fraction)
    b_hit = steps_to_threshold(b_steps, b_ret, threshold)
    rows = []
    for path in [baseline_path, *variant_paths]:
        runs = load_runs(path)
        steps, ret = mean_curve(runs)
        hit = steps_to_threshold(steps, ret, threshold)
        fails = np.array([r[-1].cum_failures for r in runs], dtype=np.float64)
        rows.append(CompareRow(os.path.basename(os.path.normpath(path)), len(runs), hit,
                               efficiency(b_hit, hit), float(fails.mean()),
                               float(fails.std()), float(ret[-1])))
    return threshold, rows


def write_compare(rows, threshold, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["variant", "n_seeds", "threshold", "steps_to_threshold", "efficiency",
                "failures_mean", "failures_std", "final_return_mean"])
    for r in rows:
        w.writerow([r.name, r.n_seeds, repr(threshold),
                    "" if r.steps_to_threshold is None else r.steps_to_threshold,
                    repr(r.efficiency), repr(r.failures_mean), repr(r.failures_std),
                    repr(r.final_return_mean)])


def cmd_compare(baseline, paths, out_path=None):
    if not baseline:
        raise ConfigurationError("compare: --baseline is required")
    threshold, rows = compare(baseline, paths)
    if out_path:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            write_compare(rows, threshold, fh)
    for r in rows:
        print(f"{r.name:>12}  x{r.efficiency:.2f}  failures {r.failures_mean:.2f} "
              f"+- {r.failures_std:.2f}  final return {r.final_return_mean:.3f}")
    return 0


# -- self checks ------------------------------------------------------------------

def cmd_grad_check(seed):
    from saac.checks import gradient_suite

    status = 0
    for name, rep in gradient_suite(seed):
        print(f"{'PASS' if rep.passed else 'FAIL'}  {name:<32} "
              f"max rel error {rep.max_rel_error:.2e}")
        status |= not rep.passed
    return int(status)


def cmd_oracle_check(seed):
    from saac.checks import oracle_suite

    status = 0
    for c in oracle_suite(seed):
        tag = "INFO" if c.report_only else ("PASS" if c.passed else "FAIL")
        print(f"{tag}  {c.name:<24} {c.detail}")
        status |= not c.passed
    return int(status)


def build_parser():
    p = argparse.ArgumentParser(prog="saac", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per (variant, seed)")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--seeds", type=_int_list)
    t.add_argument("--variants", type=_str_list)
    t.add_argument("--out")
    t.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("run_dir")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("project-states", help="PCA projection of visited states")
    s.add_argument("states", nargs="+")
    s.add_argument("--stages", type=_int_list, default=[],
                   help="training-step boundaries between stages")
    s.add_argument("--out", default="projection.csv")

    c = sub.add_parser("compare", help="efficiency and failures against a baseline")
    c.add_argument("runs", nargs="+")
    c.add_argument("--baseline")
    c.add_argument("--out")

    for name in ("grad-check", "oracle-check"):
        g = sub.add_parser(name)
        g.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = parse_config(args.config, args.set)
            spec = RunSpec(cfg, args.seeds or [cfg.seed], args.variants or [cfg.adversary],
                           out_root(args.out), args.jobs, args.config or "", args.set)
            return cmd_train(spec)
        if args.command == "eval":
            return cmd_eval(args.run_dir, args.episodes, args.seed)
        if args.command == "project-states":
            cmd_project_states(args.states, args.stages, args.out)
            return 0
        if args.command == "compare":
            return cmd_compare(args.baseline, args.runs, args.out)
        if args.command == "grad-check":
            return cmd_grad_check(args.seed)
        return cmd_oracle_check(args.seed)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
