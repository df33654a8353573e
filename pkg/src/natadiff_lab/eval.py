"""Metrics and experiment protocols over attack outputs."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import rel_entr

from .errors import UndefinedRateError

__all__ = [
    "asr",
    "adjusted_asr",
    "accuracy",
    "frechet_distance",
    "gaussian_moments",
    "entropy_score",
    "transfer_matrix",
    "mu_ablation",
    "MetricReport",
    "write_csv",
    "write_json",
]


def _targets(samples):
    return np.array([r.y_tilde for r in samples], dtype=np.int64)


def _points(samples):
    return np.array([r.x for r in samples], dtype=np.float64)


def asr(samples, victim) -> float:
    """Fraction of records the victim assigns to their adversarial target (unadjusted)."""
    if len(samples) == 0:
        raise UndefinedRateError("ASR of an empty sample list")
    return float(np.mean(victim.predict(_points(samples)) == _targets(samples)))


def accuracy(x, y, victim) -> float:
    y = np.asarray(y)
    if y.size == 0:
        raise UndefinedRateError("accuracy of an empty set")
    return float(np.mean(victim.predict(np.atleast_2d(x)) == y))


def adjusted_asr(clean, adv, victim, mode="targeted") -> float:
    """ASR counted only over samples whose clean counterpart the victim gets right.

    ``clean`` is ``(x, y)`` and ``adv`` is ``(x_adv, label)`` with ``label`` the
    target in targeted mode (it is ignored in untargeted mode), aligned by index.
    """
    x, y = np.atleast_2d(clean[0]), np.asarray(clean[1])
    xa, la = np.atleast_2d(adv[0]), np.asarray(adv[1])
    if x.shape[0] != xa.shape[0]:
        raise ValueError("clean and adversarial sets must align")
    correct = victim.predict(x) == y
    denom = int(correct.sum())
    if denom == 0:
        raise UndefinedRateError("no clean sample is classified correctly")
    pred = victim.predict(xa)
    if mode == "targeted":
        hit = pred == la
    elif mode == "untargeted":
        hit = pred != y
    else:
        raise ValueError("mode must be 'targeted' or 'untargeted'")
    return float(np.sum(hit & correct) / denom)


def gaussian_moments(points):
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return X.mean(axis=0), np.cov(X, rowvar=False).reshape(X.shape[1], X.shape[1])


def _psd_sqrt(M):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_distance(set_a, set_b, return_flag=False):
    """``|m1 - m2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`` of moment fits.

    A singular covariance is regularised by ``1e-10 I``; with ``return_flag``
    the result comes with a flag saying whether that happened.
    """
    A, B = np.atleast_2d(set_a), np.atleast_2d(set_b)
    d = A.shape[1]
    if A.shape[0] < d + 1 or B.shape[0] < d + 1:
        raise ValueError(f"each set needs at least {d + 1} points")
    m1, S1 = gaussian_moments(A)
    m2, S2 = gaussian_moments(B)
    regularised = False
    for S in (S1, S2):
        if np.linalg.eigvalsh(S).min() <= 0.0:
            S += 1e-10 * np.eye(d)
            regularised = True
    r1 = _psd_sqrt(S1)
    cross = _psd_sqrt(r1 @ S2 @ r1)
    fd = float(np.sum((m1 - m2) ** 2) + np.trace(S1) + np.trace(S2) - 2.0 * np.trace(cross))
    fd = max(fd, 0.0)
    return (fd, regularised) if return_flag else fd


def entropy_score(samples, reference) -> float:
    """``exp(E_x KL(p(y|x) || p(y)))`` under a reference classifier."""
    if len(samples) and hasattr(samples[0], "y_tilde"):
        X = _points(samples)
    else:
        X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("entropy score needs at least 2 samples")
    P = reference.probs(X)
    marginal = P.mean(axis=0)
    kl = rel_entr(P, marginal[None, :]).sum(axis=1)
    return float(np.exp(kl.mean()))


def transfer_matrix(sample_sets, victims):
    """``M[i, j]``: ASR on ``victims[j]`` of the records crafted against ``victims[i]``.

    ``sample_sets`` maps a crafting victim's name to its records.
    """
    names = [v.name for v in victims]
    M = np.full((len(names), len(names)), np.nan)
    for i, src in enumerate(names):
        if src not in sample_sets:
            continue
        for j, v in enumerate(victims):
            M[i, j] = asr(sample_sets[src], v)
    return names, M


def mu_ablation(run_fn, base_cfg, mu_list, victims, reference_points=None):
    """One row per ``mu``: per-victim ASR, target accuracy and FD to reference data.

    ``run_fn(cfg)`` produces the records; the seed is the same for every
    ``mu`` so rows form a paired comparison.
    """
    rows = []
    for mu in mu_list:
        if not 0.0 <= mu <= 1.0:
            raise ValueError("mu values must lie in [0, 1]")
        cfg = base_cfg.with_guidance(mu=float(mu))
        records = run_fn(cfg)
        X = _points(records)
        row = {"mu": float(mu), "n": len(records)}
        for v in victims:
            row[f"asr_{v.name}"] = asr(records, v)
            row[f"acc_{v.name}"] = float(np.mean(v.predict(X) == np.array([r.y for r in records])))
        if reference_points is not None:
            row["frechet"] = frechet_distance(X, reference_points)
        rows.append(row)
    return rows


@dataclass
class MetricReport:
    counts: dict = field(default_factory=dict)
    asr: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    adjusted_targeted: dict = field(default_factory=dict)
    adjusted_untargeted: dict = field(default_factory=dict)
    frechet: float | None = None
    entropy: float | None = None

    @classmethod
    def build(cls, records, victims, clean=None, reference=None, reference_points=None):
        if not records:
            raise UndefinedRateError("no samples")
        X = _points(records)
        y = np.array([r.y for r in records])
        rep = cls(counts={"samples": len(records), "successes": int(sum(r.success for r in records))})
        for v in victims:
            rep.asr[v.name] = asr(records, v)
            rep.accuracy[v.name] = accuracy(X, y, v)
            if clean is not None:
                for mode, slot in (("targeted", rep.adjusted_targeted), ("untargeted", rep.adjusted_untargeted)):
                    try:
                        slot[v.name] = adjusted_asr(clean, (X, _targets(records)), v, mode)
                    except UndefinedRateError:
                        slot[v.name] = None
        if reference is not None and len(records) >= 2:
            rep.entropy = entropy_score(records, reference)
        if reference_points is not None and len(records) > X.shape[1]:
            rep.frechet = frechet_distance(X, reference_points)
        return rep

    def rows(self):
        """One CSV row per victim; the formula behind each rate is in its column name."""
        out = []
        for name in self.asr:
            out.append({
                "victim": name,
                "asr_unadjusted": self.asr[name],
                "accuracy": self.accuracy[name],
                "asr_adjusted_targeted": self.adjusted_targeted.get(name),
                "asr_adjusted_untargeted": self.adjusted_untargeted.get(name),
                "n": self.counts["samples"],
            })
        return out

    def to_dict(self):
        return asdict(self)


def write_csv(path, rows):
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
