"""Experiment orchestration: run directories, CSV emission, verify suite, sweeps.

Every mode writes into ``<output_dir>/<experiment_name>/``: a canonical config
snapshot, ``metrics.csv`` with one row per round, optional ``noise_stats.csv``
for the noise sweeps, and a human-readable ``summary.txt``.  All numeric
output is printed with 17 significant digits so byte-level comparisons of
repeated runs are meaningful.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure,
3 verify-suite failure.
"""

import hashlib
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attacks, noise_stats
from .adapters import ClientUpdate, stacking_equivalence_residual
from .attacks import GameConfig, make_neighbors
from .config import RunConfig
from .linalg import RngStream, frobenius_norm
from .privacy import MechanismParams, PrivacyBudget, calibrate_sigma, clip_frobenius
from .simulation import (
    ExperimentResult,
    SyntheticTask,
    TrainConfig,
    ServerHyper,
    generate_task,
    observe_update_norms,
    run_experiment,
)

__all__ = [
    "METRICS_HEADER",
    "NOISE_HEADER",
    "VerifyCheck",
    "fmt",
    "cmd_run",
    "cmd_verify",
    "cmd_sweep",
    "cmd_mia",
    "cmd_report",
    "build_task",
    "build_mechanism",
    "build_adversarial_game",
    "verify_checks",
]

METRICS_HEADER = "round,strategy,dp_enabled,epsilon,clip,mean_loss,global_delta_norm,expectation_diff,total_variance,wall_ms"
NOISE_HEADER = "sweep_key,sweep_value,mean_diff,std_error,mc_variance,exact_variance,paper_bound"
TRIALS_HEADER = "trial,true_bit,score"
ROC_HEADER = "threshold,fpr,tpr"

# Top-level stream branches per seed.
_STREAM_TASK = 0
_STREAM_CALIBRATE = 1
_STREAM_EXPERIMENT = 2
_STREAM_MIA = 3
_STREAM_VERIFY = 4
_STREAM_SWEEP = 5


def fmt(value: float) -> str:
    """Render a float with 17 significant digits (round-trip stable)."""
    return f"{value:.17g}"


def _ensure_dir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_directory(config: RunConfig, out_override: str | None = None) -> Path:
    base = Path(out_override) if out_override else Path(config.output_dir)
    return base / config.experiment_name


def build_task(config: RunConfig, root: RngStream) -> SyntheticTask:
    return generate_task(
        m=config.task_m,
        n=config.task_n,
        r_star=config.task_rank,
        n_clients=config.clients,
        samples_per_client=config.samples_per_client,
        sigma_obs=config.sigma_obs,
        heterogeneity=config.heterogeneity,
        rng=root.child(_STREAM_TASK),
    )


def _base_train_config(config: RunConfig, dp: bool, mechanism: MechanismParams | None) -> TrainConfig:
    return TrainConfig(
        rounds=config.rounds,
        clients=config.clients,
        sampled_per_round=config.sampled_per_round,
        local_epochs=config.local_epochs,
        batch_size=config.batch_size,
        lr_start=config.lr_start,
        lr_end=config.lr_end,
        rank=config.rank,
        lora_scale=config.lora_scale,
        seed=config.seed,
        strategy=config.strategy,
        dp_enabled=dp,
        mechanism=mechanism,
        epsilon_b=config.resolved_epsilon_b() if dp else None,
        epsilon_a=config.resolved_epsilon_a() if dp else None,
        delta=config.delta if dp else None,
        prox_mu=config.prox_mu,
        hyper=ServerHyper(
            server_lr=config.server_lr,
            beta1=config.beta1,
            beta2=config.beta2,
            tau=config.tau,
            momentum_beta=config.momentum,
        ),
        max_workers=config.max_workers,
    )


def resolve_clips(config: RunConfig, task: SyntheticTask, root: RngStream) -> tuple[float, float]:
    """Clip thresholds: fixed values, or a norm quantile from a short dry run."""
    if config.clip_mode == "absolute":
        return config.clip_value, config.clip_value
    dry = _base_train_config(config, dp=False, mechanism=None)
    b_norms, a_norms = observe_update_norms(
        task, dry, config.calibration_rounds, root.child(_STREAM_CALIBRATE)
    )
    clip_b = float(np.quantile(b_norms, config.clip_quantile))
    clip_a = float(np.quantile(a_norms, config.clip_quantile))
    floor = 1e-12
    return max(clip_b, floor), max(clip_a, floor)


def build_mechanism(config: RunConfig, task: SyntheticTask, root: RngStream) -> MechanismParams:
    clip_b, clip_a = resolve_clips(config, task, root)
    return MechanismParams.calibrated(
        clip_b=clip_b,
        clip_a=clip_a,
        budget_b=PrivacyBudget(config.resolved_epsilon_b(), config.delta),
        budget_a=PrivacyBudget(config.resolved_epsilon_a(), config.delta),
    )


def _metrics_rows(config: RunConfig, result: ExperimentResult,
                  mechanism: MechanismParams | None) -> list[str]:
    rows = [METRICS_HEADER]
    dp = "true" if result.config.dp_enabled else "false"
    epsilon = config.resolved_epsilon_b() if result.config.dp_enabled else 0.0
    clip = mechanism.clip_b if (mechanism and result.config.dp_enabled) else 0.0
    for r in result.rounds:
        # wall_ms is pinned to 0 in the CSV so repeated runs are byte-identical;
        # real timings live in summary.txt.
        rows.append(
            ",".join(
                [
                    str(r.round_index),
                    result.config.strategy,
                    dp,
                    fmt(epsilon),
                    fmt(clip),
                    fmt(r.mean_train_loss),
                    fmt(r.global_delta_norm),
                    fmt(r.expectation_diff),
                    fmt(r.total_variance),
                    "0",
                ]
            )
        )
    return rows


def _write(path: Path, lines: list[str]) -> None:
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise RuntimeError(f"failed to write {path}: {exc}") from exc


def _config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config.snapshot().encode()).hexdigest()


def _persist_run(
    out_dir: Path,
    config: RunConfig,
    result: ExperimentResult,
    mechanism: MechanismParams | None,
    extra_summary: list[str] | None = None,
) -> None:
    _ensure_dir(out_dir)
    _write(out_dir / "config.snapshot", config.snapshot().splitlines())
    _write(out_dir / "metrics.csv", _metrics_rows(config, result, mechanism))
    summary = [
        f"experiment: {config.experiment_name}",
        f"config_hash: {_config_hash(config)}",
        f"strategy: {result.config.strategy}",
        f"dp_enabled: {'true' if result.config.dp_enabled else 'false'}",
        f"rounds: {len(result.rounds)}",
        f"initial_loss: {fmt(result.initial_loss)}",
        f"final_loss: {fmt(result.final_loss)}",
    ]
    if result.rounds:
        summary.append(f"final_mean_train_loss: {fmt(result.rounds[-1].mean_train_loss)}")
    if mechanism and result.config.dp_enabled:
        summary.extend(
            [
                f"clip_b: {fmt(mechanism.clip_b)}",
                f"clip_a: {fmt(mechanism.clip_a)}",
                f"sigma_b: {fmt(mechanism.sigma_b)}",
                f"sigma_a: {fmt(mechanism.sigma_a)}",
            ]
        )
    if result.naive_epsilon is not None:
        summary.append(f"naive_composed_epsilon: {fmt(result.naive_epsilon)}")
    summary.append(f"wall_time_s: {result.wall_s:.3f}")
    if extra_summary:
        summary.extend(extra_summary)
    _write(out_dir / "summary.txt", summary)


def cmd_run(config: RunConfig, out_override: str | None = None) -> int:
    """Run one experiment and persist metrics plus a summary."""
    root = RngStream(config.seed)
    task = build_task(config, root)
    mechanism = build_mechanism(config, task, root) if config.dp_enabled else None
    train_cfg = _base_train_config(config, config.dp_enabled, mechanism)
    result = run_experiment(train_cfg, task, root.child(_STREAM_EXPERIMENT))
    _persist_run(run_directory(config, out_override), config, result, mechanism)
    return 0


# ---------------------------------------------------------------------------
# Verify suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VerifyCheck:
    name: str
    passed: bool
    detail: str


def _check_clip_contract(gen: np.random.Generator, instances: int) -> VerifyCheck:
    worst_norm_excess = -math.inf
    for _ in range(instances):
        m = int(gen.integers(1, 9))
        n = int(gen.integers(1, 9))
        mat = gen.standard_normal((m, n)) * float(gen.uniform(0.1, 10.0))
        c = float(gen.uniform(0.05, 5.0))
        clipped = clip_frobenius(mat, c)
        norm = frobenius_norm(clipped)
        worst_norm_excess = max(worst_norm_excess, norm - c)
        if norm > c + 1e-12:
            return VerifyCheck("clip_contract", False, f"norm {norm} exceeds threshold {c}")
        original_norm = frobenius_norm(mat)
        if not np.allclose(clipped / norm, mat / original_norm, rtol=0, atol=1e-12):
            return VerifyCheck("clip_contract", False, "direction not preserved")
        if original_norm <= c and clipped is not mat:
            return VerifyCheck("clip_contract", False, "no-op path copied the input")
        again = clip_frobenius(clipped, c)
        if not np.array_equal(again, clipped):
            return VerifyCheck("clip_contract", False, "clipping is not idempotent")
    return VerifyCheck("clip_contract", True, f"max norm excess {worst_norm_excess:.3e}")


_CALIBRATION_REFERENCE = 4.844805262605389  # sqrt(2 ln(1.25e5)), high-precision


def _check_calibration(gen: np.random.Generator) -> VerifyCheck:
    value = calibrate_sigma(1.0, PrivacyBudget(1.0, 1e-5))
    rel = abs(value - _CALIBRATION_REFERENCE) / _CALIBRATION_REFERENCE
    if rel > 1e-12:
        return VerifyCheck("calibration_closed_form", False, f"reference mismatch {rel:.3e}")
    for _ in range(100):
        c = float(gen.uniform(0.01, 10.0))
        eps = float(gen.uniform(0.1, 30.0))
        delta = float(10.0 ** gen.uniform(-8, -2))
        budget = PrivacyBudget(eps, delta)
        base = calibrate_sigma(c, budget)
        if abs(calibrate_sigma(2 * c, budget) - 2 * base) > 1e-15 * 2 * base:
            return VerifyCheck("calibration_closed_form", False, "not linear in the threshold")
        halved = calibrate_sigma(c, PrivacyBudget(2 * eps, delta))
        if abs(halved - base / 2) > 1e-15 * base:
            return VerifyCheck("calibration_closed_form", False, "not inverse in epsilon")
    return VerifyCheck("calibration_closed_form", True, f"reference rel err {rel:.3e}")


def _random_updates(gen: np.random.Generator) -> list[ClientUpdate]:
    k = int(gen.integers(1, 9))
    m = int(gen.integers(1, 33))
    n = int(gen.integers(1, 33))
    updates = []
    for cid in range(k):
        r = int(gen.integers(1, 9))
        updates.append(
            ClientUpdate(
                client_id=cid,
                b_tilde=gen.standard_normal((m, r)),
                a_tilde=gen.standard_normal((r, n)),
                rank=r,
                weight=float(gen.uniform(0.0, 2.0)),
            )
        )
    return updates


def _check_stacking(gen: np.random.Generator, instances: int) -> VerifyCheck:
    worst = 0.0
    for _ in range(instances):
        residual = stacking_equivalence_residual(_random_updates(gen))
        worst = max(worst, residual)
        if residual > 1e-12:
            return VerifyCheck("stacking_equivalence", False, f"residual {residual:.3e}")
    return VerifyCheck("stacking_equivalence", True, f"max residual {worst:.3e}")


def _check_unbiasedness(root: RngStream, instances: int, draws: int) -> VerifyCheck:
    gen = root.child(0).generator()
    worst_ratio = 0.0
    for i in range(instances):
        m, n, r = (int(gen.integers(1, 7)) for _ in range(3))
        b = gen.standard_normal((m, r))
        a = gen.standard_normal((r, n))
        model = noise_stats.NoiseModel(float(gen.uniform(0.1, 2.0)), float(gen.uniform(0.1, 2.0)))
        mean_diff, se = noise_stats.mc_expectation_diff(b, a, model, draws, root.child(1, i))
        ratio = abs(mean_diff) / (5 * se)
        worst_ratio = max(worst_ratio, ratio)
        if ratio > 1.0:
            return VerifyCheck(
                "unbiasedness", False, f"|mean_diff| {abs(mean_diff):.3e} above 5 SE {5 * se:.3e}"
            )
    return VerifyCheck("unbiasedness", True, f"worst |mean|/5SE ratio {worst_ratio:.3f}")


def _check_variance_oracle(root: RngStream, instances: int, draws: int) -> VerifyCheck:
    gen = root.child(0).generator()
    worst = 0.0
    for i in range(instances):
        m, n, r = (int(gen.integers(1, 7)) for _ in range(3))
        if i % 3 == 0:
            n = m  # exercise the symmetric identity as well
        b = gen.standard_normal((m, r))
        a = gen.standard_normal((r, n))
        model = noise_stats.NoiseModel(float(gen.uniform(0.1, 2.0)), float(gen.uniform(0.1, 2.0)))
        exact = noise_stats.exact_total_variance(b, a, model)
        mc = noise_stats.mc_total_variance(b, a, model, draws, root.child(1, i))
        rel = abs(mc - exact) / exact
        worst = max(worst, rel)
        if rel > 0.03:
            return VerifyCheck("variance_oracle", False, f"MC vs exact rel err {rel:.4f}")
        if m == n:
            bound = noise_stats.variance_bound(b, a, model)
            if abs(bound - exact) > 1e-12 * exact:
                return VerifyCheck("variance_oracle", False, "square-shape forms disagree")
    return VerifyCheck("variance_oracle", True, f"worst MC rel err {worst:.4f}")


def _check_rank_linearity(root: RngStream, draws: int) -> VerifyCheck:
    ranks = [8, 16, 32, 64, 128]
    model = noise_stats.NoiseModel(1.0, 1.0)
    rows = noise_stats.rank_sweep(ranks, 8, 8, model, draws, root)
    mc = [row.mc_variance for row in rows]
    exact = [row.exact_variance for row in rows]
    for lo, hi in zip(mc, mc[1:]):
        ratio = hi / lo
        if not 1.8 <= ratio <= 2.2:
            return VerifyCheck("rank_linearity", False, f"MC doubling ratio {ratio:.3f}")
    r_sq = _linear_fit_r_squared(ranks, exact)
    if r_sq < 0.99:
        return VerifyCheck("rank_linearity", False, f"linear fit R^2 {r_sq:.4f}")
    return VerifyCheck("rank_linearity", True, f"R^2 {r_sq:.6f}")


def _linear_fit_r_squared(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    coeffs = np.polyfit(x, y, 1)
    pred = np.polyval(coeffs, x)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0
    return 1.0 - ss_res / ss_tot


def build_adversarial_game(config: RunConfig, root: RngStream,
                           epsilon: float | None = None) -> tuple[attacks.NeighborPair, GameConfig]:
    """Neighbor pair with one input-scaled record, and the game configuration.

    The clip thresholds are set to the larger of the two datasets' un-noised
    factor norms, so clipping is honest but mild and the pair's separation
    stays well inside the worst case.
    """
    eps = epsilon if epsilon is not None else config.mia_epsilon
    stream = root.child(_STREAM_MIA)
    task = generate_task(
        m=config.task_m,
        n=config.task_n,
        r_star=config.task_rank,
        n_clients=1,
        samples_per_client=config.mia_dataset_size,
        sigma_obs=config.sigma_obs,
        heterogeneity=0.0,
        rng=stream.child(0),
    )
    records = [(task.client_x[0][i], task.client_y[0][i]) for i in range(config.mia_dataset_size)]
    scaled_x = records[0][0] * config.mia_input_scale
    signal = task.base.w + task.target_delta
    replacement = (scaled_x, signal @ scaled_x)
    pair = make_neighbors(records, 0, replacement)

    probe = GameConfig(
        base=task.base,
        rank=config.mia_rank,
        lora_scale=float(config.mia_rank),
        local_epochs=config.mia_epochs,
        batch_size=config.mia_batch_size,
        lr=config.mia_lr,
        mechanism=MechanismParams(clip_b=1e6, clip_a=1e6, sigma_b=0.0, sigma_a=0.0),
        train_stream=stream.child(1),
    )
    b0, a0 = attacks.clipped_update(pair.d, probe)
    b1, a1 = attacks.clipped_update(pair.d_prime, probe)
    clip_b = max(frobenius_norm(b0), frobenius_norm(b1))
    clip_a = max(frobenius_norm(a0), frobenius_norm(a1))
    mechanism = MechanismParams.calibrated(
        clip_b=clip_b,
        clip_a=clip_a,
        budget_b=PrivacyBudget(eps, config.delta),
        budget_a=PrivacyBudget(eps, config.delta),
    )
    game = GameConfig(
        base=task.base,
        rank=config.mia_rank,
        lora_scale=float(config.mia_rank),
        local_epochs=config.mia_epochs,
        batch_size=config.mia_batch_size,
        lr=config.mia_lr,
        mechanism=mechanism,
        train_stream=stream.child(1),
    )
    return pair, game


def _check_dp_bound(config: RunConfig, root: RngStream, trials: int,
                    sigma_scale: float = 1.0) -> VerifyCheck:
    """Empirical (epsilon, delta) trade-off at eps = 0.5 on two pairs.

    Checks both the trained adversarial neighbor pair and a synthetic
    worst-case pair sitting antipodally on the clip sphere; the latter is the
    sharpest configuration the clipping admits, so it is the one that exposes
    an under-calibrated noise scale.
    """
    eps = 0.5
    pair, game = build_adversarial_game(config, root, epsilon=eps)
    mech = game.mechanism
    if sigma_scale != 1.0:
        mech = MechanismParams(
            clip_b=mech.clip_b,
            clip_a=mech.clip_a,
            sigma_b=mech.sigma_b * sigma_scale,
            sigma_a=mech.sigma_a * sigma_scale,
        )
        game = replace(game, mechanism=mech)

    trained = attacks.run_game(pair, game, trials, root.child(_STREAM_VERIFY, 0))
    check1 = attacks.check_dp_bound(attacks.roc_curve(trained), eps, config.delta, trials)

    m, n, r = config.task_m, config.task_n, config.mia_rank
    direction_b = np.ones((m, r)) / math.sqrt(m * r)
    direction_a = np.ones((r, n)) / math.sqrt(r * n)
    worst0 = (mech.clip_b * direction_b, mech.clip_a * direction_a)
    worst1 = (-mech.clip_b * direction_b, mech.clip_a * direction_a)
    direct = attacks.run_direct_game(worst0, worst1, mech, trials, root.child(_STREAM_VERIFY, 1))
    check2 = attacks.check_dp_bound(attacks.roc_curve(direct), eps, config.delta, trials)

    passed = check1.passed and check2.passed
    detail = (
        f"trained pair violation {check1.max_violation:.4f}, "
        f"worst-case violation {check2.max_violation:.4f}, tolerance {check1.mc_tolerance:.4f}"
    )
    return VerifyCheck("dp_bound", passed, detail)


def verify_checks(config: RunConfig, sigma_scale: float = 1.0) -> list[VerifyCheck]:
    """All invariant checks, with sample sizes reduced under verify_fast."""
    fast = config.verify_fast
    instances = 200 if fast else 1000
    mc_instances = 8 if fast else 50
    var_instances = 5 if fast else 20
    draws = 20_000 if fast else 100_000
    trials = 2_000 if fast else 10_000

    root = RngStream(config.seed).child(_STREAM_VERIFY)
    checks = [
        _check_clip_contract(root.child(0).generator(), instances),
        _check_calibration(root.child(1).generator()),
        _check_stacking(root.child(2).generator(), instances),
        _check_unbiasedness(root.child(3), mc_instances, draws),
        _check_variance_oracle(root.child(4), var_instances, draws),
        _check_rank_linearity(root.child(5), draws),
        _check_dp_bound(config, RngStream(config.seed), trials, sigma_scale=sigma_scale),
    ]
    return checks


def cmd_verify(config: RunConfig, out_override: str | None = None,
               sigma_scale: float = 1.0) -> int:
    """Run the invariant suite; exit 0 only if every check passes."""
    t0 = time.perf_counter()
    checks = verify_checks(config, sigma_scale=sigma_scale)
    out_dir = _ensure_dir(run_directory(config, out_override))
    rows = ["check,passed,detail"]
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status} {check.name}: {check.detail}")
        rows.append(f"{check.name},{str(check.passed).lower()},\"{check.detail}\"")
    _write(out_dir / "verify_report.csv", rows)
    _write(
        out_dir / "summary.txt",
        [f"verify checks: {sum(c.passed for c in checks)}/{len(checks)} passed",
         f"wall_time_s: {time.perf_counter() - t0:.3f}"],
    )
    return 0 if all(c.passed for c in checks) else 3


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _noise_rows_csv(rows: list[noise_stats.SweepRow]) -> list[str]:
    out = [NOISE_HEADER]
    for r in rows:
        out.append(
            ",".join(
                [
                    r.key,
                    r.value,
                    fmt(r.mean_diff),
                    fmt(r.std_error),
                    fmt(r.mc_variance),
                    fmt(r.exact_variance),
                    fmt(r.bound),
                ]
            )
        )
    return out


def cmd_sweep(config: RunConfig, out_override: str | None = None) -> int:
    """Dispatch one of the four sweep modes."""
    out_dir = _ensure_dir(run_directory(config, out_override))
    root = RngStream(config.seed)
    _write(out_dir / "config.snapshot", config.snapshot().splitlines())

    if config.mode in ("sweep_rank", "sweep_size"):
        model = noise_stats.NoiseModel(config.noise_sigma_beta, config.noise_sigma_alpha)
        stream = root.child(_STREAM_SWEEP)
        if config.mode == "sweep_rank":
            rows = noise_stats.rank_sweep(
                list(config.sweep_ranks), config.task_m, config.task_n, model,
                config.noise_draws, stream, config.sweep_norm_b, config.sweep_norm_a,
            )
        else:
            rows = noise_stats.size_sweep(
                [tuple(p) for p in config.sweep_sizes], config.rank, model,
                config.noise_draws, stream, config.sweep_norm_b, config.sweep_norm_a,
            )
        _write(out_dir / "noise_stats.csv", _noise_rows_csv(rows))
        _write(out_dir / "summary.txt", [f"{config.mode}: {len(rows)} points"])
        return 0

    task = build_task(config, root)
    clip_b, clip_a = resolve_clips(config, task, root)
    combined = ["sweep_key,sweep_value,final_loss,final_mean_train_loss"]
    if config.mode == "sweep_epsilon":
        points = [(eps, clip_b, clip_a) for eps in config.sweep_epsilons]
        labels = [f"eps_{_label(eps)}" for eps in config.sweep_epsilons]
        key = "epsilon"
    else:  # sweep_clip: absolute thresholds, sigma recalibrated per point
        points = [(config.epsilon, c, c) for c in config.sweep_clips]
        labels = [f"clip_{_label(c)}" for c in config.sweep_clips]
        key = "clip"

    for label, (eps, cb, ca) in zip(labels, points):
        mechanism = MechanismParams.calibrated(
            clip_b=cb,
            clip_a=ca,
            budget_b=PrivacyBudget(eps if key == "epsilon" else config.resolved_epsilon_b(), config.delta),
            budget_a=PrivacyBudget(eps if key == "epsilon" else config.resolved_epsilon_a(), config.delta),
        )
        point_config = replace(
            config,
            experiment_name=f"{config.experiment_name}/{label}",
            epsilon=eps if key == "epsilon" else config.epsilon,
            epsilon_b=0.0,
            epsilon_a=0.0,
            dp_enabled=True,
        )
        train_cfg = _base_train_config(point_config, True, mechanism)
        result = run_experiment(train_cfg, task, root.child(_STREAM_EXPERIMENT))
        _persist_run(out_dir / label, point_config, result, mechanism)
        value = eps if key == "epsilon" else cb
        final_train = result.rounds[-1].mean_train_loss if result.rounds else result.initial_loss
        combined.append(f"{key},{fmt(value)},{fmt(result.final_loss)},{fmt(final_train)}")

    _write(out_dir / "sweep.csv", combined)
    _write(out_dir / "summary.txt", [f"{config.mode}: {len(labels)} points", *combined])
    return 0


def _label(value: float) -> str:
    text = f"{value:g}"
    return text.replace(".", "p").replace("-", "m")


# ---------------------------------------------------------------------------
# Membership-inference mode
# ---------------------------------------------------------------------------


def cmd_mia(config: RunConfig, out_override: str | None = None) -> int:
    """Play the distinguishing game at three noise levels and emit score/ROC CSVs."""
    out_dir = _ensure_dir(run_directory(config, out_override))
    root = RngStream(config.seed)
    _write(out_dir / "config.snapshot", config.snapshot().splitlines())
    pair, game = build_adversarial_game(config, root)

    summary = []
    mech = game.mechanism
    for tag, scale in (("sigma_0", 0.0), ("sigma_calibrated", 1.0), ("sigma_10x", 10.0)):
        scaled = MechanismParams(
            clip_b=mech.clip_b,
            clip_a=mech.clip_a,
            sigma_b=mech.sigma_b * scale,
            sigma_a=mech.sigma_a * scale,
        )
        scaled_game = replace(game, mechanism=scaled)
        trials = attacks.run_game(pair, scaled_game, config.mia_trials,
                                  root.child(_STREAM_MIA, 9, int(scale * 10)))
        mean0 = attacks.mechanism_mean(pair.d, scaled_game)
        mean1 = attacks.mechanism_mean(pair.d_prime, scaled_game)
        reference = attacks.ScoreReference(mean0, mean1)
        accuracy = attacks.attack_accuracy(trials, reference)
        curve = attacks.roc_curve(trials)
        check = attacks.check_dp_bound(curve, config.mia_epsilon, config.delta, config.mia_trials)
        _write(
            out_dir / f"trials_{tag}.csv",
            [TRIALS_HEADER] + [f"{i},{t.true_bit},{fmt(t.score)}" for i, t in enumerate(trials)],
        )
        _write(
            out_dir / f"roc_{tag}.csv",
            [ROC_HEADER]
            + [
                f"{fmt(th)},{fmt(fp)},{fmt(tp)}"
                for th, fp, tp in zip(curve.thresholds, curve.fpr, curve.tpr)
            ],
        )
        summary.append(
            f"{tag}: accuracy {fmt(accuracy)}, max_violation {fmt(check.max_violation)}, "
            f"tolerance {fmt(check.mc_tolerance)}, bound {'PASS' if check.passed else 'FAIL'}"
        )
        print(summary[-1])
    _write(out_dir / "summary.txt", summary)
    return 0


# ---------------------------------------------------------------------------
# Report mode
# ---------------------------------------------------------------------------


def cmd_report(config: RunConfig, out_override: str | None = None) -> int:
    """Reshape a completed run directory into plot-ready CSVs and a text summary."""
    run_dir = run_directory(config, out_override)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    metrics_files = sorted(run_dir.rglob("metrics.csv"))
    noise_files = sorted(run_dir.rglob("noise_stats.csv"))
    if not metrics_files and not noise_files:
        raise FileNotFoundError(f"no metrics found under {run_dir} (expected metrics.csv)")

    report_dir = _ensure_dir(run_dir / "report")
    summary = []

    loss_rows = ["run,round,strategy,dp_enabled,mean_loss"]
    finals = []
    for path in metrics_files:
        label = str(path.parent.relative_to(run_dir)) or "."
        lines = path.read_text().splitlines()
        if lines and lines[0] != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        last = None
        for line in lines[1:]:
            parts = line.split(",")
            loss_rows.append(f"{label},{parts[0]},{parts[1]},{parts[2]},{parts[5]}")
            last = parts
        if last is not None:
            finals.append((label, last[1], last[2] == "true", float(last[5])))
    if metrics_files:
        _write(report_dir / "loss_vs_round.csv", loss_rows)
        for label, strategy, dp, loss in finals:
            summary.append(f"{label}: strategy {strategy}, dp {str(dp).lower()}, final mean_loss {fmt(loss)}")
        if len(finals) == 2 and finals[0][2] != finals[1][2]:
            dp_loss = next(x[3] for x in finals if x[2])
            plain = next(x[3] for x in finals if not x[2])
            summary.append(f"dp_minus_plain: {fmt(dp_loss - plain)}")

    for path in noise_files:
        lines = path.read_text().splitlines()
        if lines and lines[0] != NOISE_HEADER:
            raise ValueError(f"{path}: unexpected noise_stats header")
        table = ["sweep_value,expectation,variance"]
        for line in lines[1:]:
            parts = line.split(",")
            table.append(f"{parts[1]},{parts[2]},{parts[4]}")
        _write(report_dir / "noise_summary.csv", table)
        summary.append(f"noise sweep points: {len(lines) - 1}")

    for roc in sorted(run_dir.glob("roc_*.csv")):
        (report_dir / roc.name).write_text(roc.read_text())
        summary.append(f"roc points copied: {roc.name}")

    if not summary:
        summary.append("nothing to report")
    _write(report_dir / "summary.txt", summary)
    for line in summary:
        print(line)
    return 0
