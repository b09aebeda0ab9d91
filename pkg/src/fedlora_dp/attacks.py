"""Membership-inference distinguishing game against the privatized update mechanism.

The game pits two neighboring datasets (equal size, exactly one record
replaced) against each other: a fair coin picks one, a client trains a
low-rank adapter on it, the factors are clipped and noised, and an attacker
with worst-case knowledge scores the release by projecting it onto the
difference of the two un-noised mean updates.  This linear score is the
likelihood-ratio statistic under isotropic Gaussian noise, so the resulting
ROC is the strongest threshold attack available; its curve is checked against
the e^eps * FPR + delta line in both class orientations.

Training randomness is keyed by the game configuration, not the trial, so
each dataset maps to one deterministic mean update and trial scores are exact
Gaussian mean shifts.
"""

import math
from dataclasses import dataclass

import numpy as np

from .adapters import ClientUpdate, FrozenBase, init_adapter
from .linalg import RngStream
from .privacy import MechanismParams, clip_frobenius, privatize
from .simulation import ClientState, TrainConfig, local_train

__all__ = [
    "Record",
    "NeighborPair",
    "AttackTrial",
    "RocCurve",
    "DpBoundCheck",
    "GameConfig",
    "ScoreReference",
    "make_neighbors",
    "clipped_update",
    "mechanism_mean",
    "score_update",
    "run_game",
    "run_direct_game",
    "roc_curve",
    "check_dp_bound",
    "attack_accuracy",
]

Record = tuple[np.ndarray, np.ndarray]


def _records_equal(r1: Record, r2: Record) -> bool:
    return np.array_equal(r1[0], r2[0]) and np.array_equal(r1[1], r2[1])


@dataclass(frozen=True)
class NeighborPair:
    """Two datasets of equal size differing in exactly one record."""

    d: tuple[Record, ...]
    d_prime: tuple[Record, ...]
    differing_index: int

    def __post_init__(self):
        if len(self.d) != len(self.d_prime):
            raise ValueError(
                f"neighboring datasets must have equal size, got {len(self.d)} and {len(self.d_prime)}"
            )
        if not 0 <= self.differing_index < len(self.d):
            raise ValueError(f"differing_index {self.differing_index} out of range")
        for i, (r1, r2) in enumerate(zip(self.d, self.d_prime)):
            if i == self.differing_index:
                if _records_equal(r1, r2):
                    raise ValueError(f"records at index {i} are identical; pair is degenerate")
            elif not _records_equal(r1, r2):
                raise ValueError(f"records at index {i} differ but only {self.differing_index} may")


@dataclass(frozen=True)
class AttackTrial:
    """One round of the game: which dataset was used, and the attacker's score."""

    true_bit: int
    score: float

    def __post_init__(self):
        if self.true_bit not in (0, 1):
            raise ValueError(f"true_bit must be 0 or 1, got {self.true_bit}")
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


@dataclass(frozen=True)
class RocCurve:
    """Threshold sweep of (fpr, tpr) pairs, endpoints (0,0) and (1,1) included."""

    thresholds: tuple[float, ...]
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    n_negative: int
    n_positive: int

    def __post_init__(self):
        if len(self.fpr) != len(self.tpr) or len(self.fpr) < 2:
            raise ValueError("curve needs matching fpr/tpr sequences of length >= 2")
        if self.fpr[0] != 0 or self.tpr[0] != 0 or self.fpr[-1] != 1 or self.tpr[-1] != 1:
            raise ValueError("curve must start at (0,0) and end at (1,1)")
        if any(b < a for a, b in zip(self.fpr, self.fpr[1:])):
            raise ValueError("fpr must be nondecreasing")
        if any(b < a for a, b in zip(self.tpr, self.tpr[1:])):
            raise ValueError("tpr must be nondecreasing")


@dataclass(frozen=True)
class DpBoundCheck:
    """Worst observed gap above the e^eps * fpr + delta line, in both orientations."""

    epsilon: float
    delta: float
    max_violation: float
    mc_tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.mc_tolerance


@dataclass(frozen=True)
class GameConfig:
    """Mechanism under attack: one client's local training plus privatization."""

    base: FrozenBase
    rank: int
    lora_scale: float
    local_epochs: int
    batch_size: int
    lr: float
    mechanism: MechanismParams
    train_stream: RngStream


@dataclass(frozen=True)
class ScoreReference:
    """Attacker knowledge: flattened un-noised mean updates for both datasets."""

    mu0: np.ndarray
    mu1: np.ndarray

    def __post_init__(self):
        direction = self.mu1 - self.mu0
        norm = np.linalg.norm(direction)
        if norm == 0:
            raise ValueError("reference updates coincide; scoring direction is undefined")
        object.__setattr__(self, "_unit", direction / norm)

    @property
    def unit_direction(self) -> np.ndarray:
        return self._unit

    @property
    def midpoint_score(self) -> float:
        return float(self._unit @ (self.mu0 + self.mu1) / 2.0)


def make_neighbors(dataset: list[Record], index: int, replacement: Record) -> NeighborPair:
    """Replace one record to form a neighboring pair; identical replacement is rejected."""
    records = tuple((np.asarray(x, dtype=float), np.asarray(y, dtype=float)) for x, y in dataset)
    if not 0 <= index < len(records):
        raise ValueError(f"index {index} out of range for dataset of size {len(records)}")
    rep = (np.asarray(replacement[0], dtype=float), np.asarray(replacement[1], dtype=float))
    prime = list(records)
    prime[index] = rep
    return NeighborPair(d=records, d_prime=tuple(prime), differing_index=index)


def clipped_update(dataset: tuple[Record, ...], cfg: GameConfig) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic un-noised mechanism output (clipped factor pair) for a dataset."""
    x = np.stack([r[0] for r in dataset])
    y = np.stack([r[1] for r in dataset])
    m, n = cfg.base.shape
    adapter = init_adapter(m, n, cfg.rank, cfg.lora_scale, cfg.train_stream.child(0))
    client = ClientState(
        client_id=0,
        x=x,
        y=y,
        adapter=adapter,
        rng=cfg.train_stream.child(1),
    )
    train_cfg = TrainConfig(
        rounds=1,
        clients=1,
        sampled_per_round=1,
        local_epochs=cfg.local_epochs,
        batch_size=cfg.batch_size,
        lr_start=cfg.lr,
        lr_end=cfg.lr,
        rank=cfg.rank,
        lora_scale=cfg.lora_scale,
        seed=cfg.train_stream.root_seed,
    )
    result = local_train(client, cfg.base, np.zeros((m, n)), train_cfg, cfg.lr)
    b = clip_frobenius(result.adapter.b, cfg.mechanism.clip_b)
    a = clip_frobenius(result.adapter.a, cfg.mechanism.clip_a)
    return b, a


def mechanism_mean(dataset: tuple[Record, ...], cfg: GameConfig) -> np.ndarray:
    """Flattened clipped update (b then a) the mechanism releases in expectation."""
    b, a = clipped_update(dataset, cfg)
    return np.concatenate([b.ravel(), a.ravel()])


def score_update(update: ClientUpdate, reference: ScoreReference) -> float:
    """Projection of the flattened released pair onto the mean-difference direction."""
    flat = np.concatenate([update.b_tilde.ravel(), update.a_tilde.ravel()])
    if flat.shape != reference.unit_direction.shape:
        raise ValueError(
            f"update has {flat.shape[0]} entries, reference expects {reference.unit_direction.shape[0]}"
        )
    return float(flat @ reference.unit_direction)


def _noisy_trials(
    means: tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
    mechanism: MechanismParams,
    rank: int,
    trials: int,
    rng: RngStream,
    reference: ScoreReference,
) -> list[AttackTrial]:
    out = []
    for t in range(trials):
        bit = int(rng.child(t, 0).generator().integers(0, 2))
        b_mean, a_mean = means[bit]
        b_rel = privatize(b_mean, mechanism.clip_b, mechanism.sigma_b, rng.child(t, 1))
        a_rel = privatize(a_mean, mechanism.clip_a, mechanism.sigma_a, rng.child(t, 2))
        update = ClientUpdate(client_id=0, b_tilde=b_rel, a_tilde=a_rel, rank=rank)
        out.append(AttackTrial(true_bit=bit, score=score_update(update, reference)))
    return out


def run_game(pair: NeighborPair, cfg: GameConfig, trials: int, rng: RngStream) -> list[AttackTrial]:
    """Play the distinguishing game.

    Training is deterministic per dataset (the training stream is fixed by the
    config), so each trial reduces to privatizing the corresponding clipped
    update with fresh per-trial noise and scoring the release.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    mean0 = clipped_update(pair.d, cfg)
    mean1 = clipped_update(pair.d_prime, cfg)
    reference = ScoreReference(
        mu0=np.concatenate([mean0[0].ravel(), mean0[1].ravel()]),
        mu1=np.concatenate([mean1[0].ravel(), mean1[1].ravel()]),
    )
    return _noisy_trials((mean0, mean1), cfg.mechanism, cfg.rank, trials, rng, reference)


def run_direct_game(
    mean0: tuple[np.ndarray, np.ndarray],
    mean1: tuple[np.ndarray, np.ndarray],
    mechanism: MechanismParams,
    trials: int,
    rng: RngStream,
) -> list[AttackTrial]:
    """Distinguishing game on two explicit factor pairs, bypassing training.

    Useful for exercising the bound check against synthetic worst-case pairs,
    e.g. antipodal updates on the clip sphere.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    b0 = clip_frobenius(np.asarray(mean0[0], dtype=float), mechanism.clip_b)
    a0 = clip_frobenius(np.asarray(mean0[1], dtype=float), mechanism.clip_a)
    b1 = clip_frobenius(np.asarray(mean1[0], dtype=float), mechanism.clip_b)
    a1 = clip_frobenius(np.asarray(mean1[1], dtype=float), mechanism.clip_a)
    reference = ScoreReference(
        mu0=np.concatenate([b0.ravel(), a0.ravel()]),
        mu1=np.concatenate([b1.ravel(), a1.ravel()]),
    )
    rank = b0.shape[1]
    return _noisy_trials(((b0, a0), (b1, a1)), mechanism, rank, trials, rng, reference)


def roc_curve(trials: list[AttackTrial]) -> RocCurve:
    """Threshold sweep over scores, high scores predicting the replaced dataset."""
    if not trials:
        raise ValueError("cannot build a curve from zero trials")
    scores = np.array([t.score for t in trials])
    labels = np.array([t.true_bit for t in trials])
    n_pos = int(labels.sum())
    n_neg = len(trials) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need trials from both classes to build a curve")

    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    labels = labels[order]

    thresholds = [math.inf]
    fpr = [0.0]
    tpr = [0.0]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[j] == scores[i]:
            tp += int(labels[j])
            fp += 1 - int(labels[j])
            j += 1
        thresholds.append(float(scores[i]))
        fpr.append(fp / n_neg)
        tpr.append(tp / n_pos)
        i = j
    return RocCurve(
        thresholds=tuple(thresholds),
        fpr=tuple(fpr),
        tpr=tuple(tpr),
        n_negative=n_neg,
        n_positive=n_pos,
    )


def check_dp_bound(curve: RocCurve, epsilon: float, delta: float, trials: int) -> DpBoundCheck:
    """Compare the empirical curve against tpr <= e^eps * fpr + delta.

    Both class orientations are checked; the pass tolerance absorbs binomial
    sampling error at the given trial count.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    fpr = np.array(curve.fpr)
    tpr = np.array(curve.tpr)
    scale = math.exp(epsilon)
    forward = tpr - (scale * fpr + delta)
    reverse = (1.0 - fpr) - (scale * (1.0 - tpr) + delta)
    max_violation = float(max(forward.max(), reverse.max()))
    mc_tolerance = 3.0 * math.sqrt(0.25 / trials)
    return DpBoundCheck(
        epsilon=epsilon,
        delta=delta,
        max_violation=max_violation,
        mc_tolerance=mc_tolerance,
        trials=trials,
    )


def attack_accuracy(trials: list[AttackTrial], reference: ScoreReference) -> float:
    """Fraction of trials the midpoint-threshold rule classifies correctly."""
    if not trials:
        raise ValueError("need at least one trial")
    mid = reference.midpoint_score
    correct = sum(1 for t in trials if (t.score > mid) == bool(t.true_bit))
    return correct / len(trials)
