import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from natadiff_lab.attack import AttackConfig, SampleRecord
from natadiff_lab.errors import UndefinedRateError
from natadiff_lab.eval import (
    MetricReport,
    adjusted_asr,
    asr,
    entropy_score,
    frechet_distance,
    mu_ablation,
    transfer_matrix,
)
from natadiff_lab.rng import make_rng
from natadiff_lab.victims import BayesVictim
from natadiff_lab.world import Component, MixtureWorld


class LookupVictim:
    """Predicts the class stored in the first coordinate."""

    name = "lookup"
    num_classes = 4

    def predict(self, x):
        return np.atleast_2d(x)[:, 0].astype(int)


def rec(pred, target, y=0, i=0):
    return SampleRecord(i, [float(pred), 0.0], y, target, "targeted", 1, 0.2, 50.0, pred == target, {}, "")


def test_asr_counting():
    v = LookupVictim()
    records = [rec(1, 1, i=i) for i in range(7)] + [rec(2, 1, i=i) for i in range(13)]
    assert asr(records, v) == 0.35
    assert asr(records[:7], v) == 1.0
    assert asr(records[7:], v) == 0.0
    with pytest.raises(UndefinedRateError):
        asr([], v)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30), st.randoms())
def test_asr_permutation_invariant(pairs, rnd):
    v = LookupVictim()
    records = [rec(p, t) for p, t in pairs]
    shuffled = records[:]
    rnd.shuffle(shuffled)
    assert asr(records, v) == asr(shuffled, v)


def adjusted_fixture():
    # 12 clean points, the first 10 classified correctly
    y = np.array([0] * 12)
    clean_pred = np.array([0] * 10 + [1, 2])
    targets = np.full(12, 1)
    # of the 10 correct: 4 go to the target, 2 to another wrong class, 4 stay
    adv_pred = np.array([1, 1, 1, 1, 3, 3, 0, 0, 0, 0, 1, 1])
    clean = (np.c_[clean_pred, np.zeros(12)], y)
    adv = (np.c_[adv_pred, np.zeros(12)], targets)
    return clean, adv


def test_adjusted_fixture_counts():
    clean, adv = adjusted_fixture()
    v = LookupVictim()
    assert adjusted_asr(clean, adv, v, "targeted") == 0.4
    assert adjusted_asr(clean, adv, v, "untargeted") == 0.6


def test_adjusted_unchanged_and_undefined():
    v = LookupVictim()
    x = np.c_[np.arange(4), np.zeros(4)]
    y = np.arange(4)
    assert adjusted_asr((x, y), (x, (y + 1) % 4), v, "targeted") == 0.0
    assert adjusted_asr((x, y), (x, (y + 1) % 4), v, "untargeted") == 0.0
    with pytest.raises(UndefinedRateError):
        adjusted_asr((x, (y + 1) % 4), (x, y), v)


def test_adjusted_permutation_invariant():
    clean, adv = adjusted_fixture()
    perm = make_rng(0).permutation(12)
    v = LookupVictim()
    for mode in ("targeted", "untargeted"):
        a = adjusted_asr(clean, adv, v, mode)
        b = adjusted_asr((clean[0][perm], clean[1][perm]), (adv[0][perm], adv[1][perm]), v, mode)
        assert a == b


def spectral_fd(A, B):
    """Trace of the cross term from the eigenvalues of S1 S2 (a non-symmetric product)."""
    m1, m2 = A.mean(axis=0), B.mean(axis=0)
    S1, S2 = np.cov(A, rowvar=False), np.cov(B, rowvar=False)
    lam = np.linalg.eigvals(S1 @ S2)
    return float(np.sum((m1 - m2) ** 2) + np.trace(S1 + S2) - 2 * np.sum(np.sqrt(lam.real.clip(0))))


def test_frechet_matches_spectral_oracle():
    rng = make_rng(1)
    for _ in range(50):
        L1, L2 = rng.standard_normal((2, 2, 2))
        A = rng.standard_normal((200, 2)) @ L1 + rng.standard_normal(2)
        B = rng.standard_normal((150, 2)) @ L2 + rng.standard_normal(2)
        assert abs(frechet_distance(A, B) - spectral_fd(A, B)) <= 1e-8


def test_frechet_equal_covariance_is_mean_gap():
    A = make_rng(2).standard_normal((100, 3))
    m = np.array([0.5, -1.0, 2.0])
    assert abs(frechet_distance(A, A + m) - m @ m) <= 1e-8
    assert frechet_distance(A, A) <= 1e-10


def test_frechet_symmetric():
    rng = make_rng(3)
    A, B = rng.standard_normal((80, 3)), 2.0 * rng.standard_normal((60, 3)) + 1.0
    assert abs(frechet_distance(A, B) - frechet_distance(B, A)) <= 1e-8


def test_frechet_degenerate_flag():
    A = np.c_[make_rng(4).standard_normal(20), np.zeros(20)]
    fd, flag = frechet_distance(A, A, return_flag=True)
    assert flag and fd <= 1e-8
    with pytest.raises(ValueError):
        frechet_distance(A[:2], A)


def separated_world(K):
    comps = [Component([10.0 * k, 0.0], 0.1 * np.eye(2), 1.0 / K, frozenset({k})) for k in range(K)]
    return MixtureWorld(comps, K)


def test_entropy_score_even_split_is_k():
    world = separated_world(4)
    ref = BayesVictim(world)
    x = np.repeat(world.means, 5, axis=0)
    assert entropy_score(x, ref) == pytest.approx(4.0, rel=1e-6)


def test_entropy_score_single_class_is_one():
    world = separated_world(4)
    x = np.repeat(world.means[:1], 10, axis=0)
    assert entropy_score(x, BayesVictim(world)) == pytest.approx(1.0, abs=1e-9)


def test_entropy_score_bounds_and_order():
    world = separated_world(3)
    ref = BayesVictim(world)
    x = make_rng(5).normal(scale=15.0, size=(40, 2))
    s = entropy_score(x, ref)
    assert 1.0 <= s <= 3.0 + 1e-12
    assert entropy_score(x[::-1], ref) == pytest.approx(s, rel=1e-12)
    with pytest.raises(ValueError):
        entropy_score(x[:1], ref)


def test_transfer_matrix_single_victim():
    v = LookupVictim()
    records = [rec(1, 1), rec(2, 1), rec(1, 1)]
    names, M = transfer_matrix({"lookup": records}, [v])
    assert names == ["lookup"] and M.shape == (1, 1)
    assert M[0, 0] == asr(records, v)


def test_mu_ablation_single_row():
    v = LookupVictim()
    seen = []

    def run_fn(cfg):
        seen.append(cfg.guidance.mu)
        return [rec(1, 1), rec(0, 1)]

    base = AttackConfig()
    rows = mu_ablation(run_fn, base, [0.2], [v])
    assert len(rows) == 1 and seen == [0.2]
    assert rows[0]["asr_lookup"] == asr(run_fn(base), v)
    with pytest.raises(ValueError):
        mu_ablation(run_fn, base, [1.5], [v])


def test_report_labels_both_formulas():
    clean, adv = adjusted_fixture()
    records = [rec(int(p), int(t), i=i) for i, (p, t) in enumerate(zip(adv[0][:, 0], adv[1]))]
    rep = MetricReport.build(records, [LookupVictim()], clean=clean)
    row = rep.rows()[0]
    assert row["asr_unadjusted"] == 0.5
    assert row["asr_adjusted_targeted"] == 0.4 and row["asr_adjusted_untargeted"] == 0.6
    with pytest.raises(UndefinedRateError, match="no samples"):
        MetricReport.build([], [LookupVictim()])
