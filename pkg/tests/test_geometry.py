"""Geometry layer: maps, Jacobians, Lipschitz sampling, inclusion, envelopes."""

import math

import numpy as np
import pytest

from rothelab.geometry import (
    AleMap,
    ChannelMotion,
    EvolvedMotion,
    ReferenceDomain,
    ShearMotion,
    ale_apply,
    ale_inverse,
    ale_jacobian_and_gradient,
    envelope,
    estimate_lipschitz,
    shrunk_domain_inclusion,
)

DOM = ReferenceDomain(L=2.0, R=1.0)


def _motions():
    rng = np.random.default_rng(3)
    tab = 0.15 * np.sin(np.pi * np.linspace(0, 1, 33)) ** 2 * rng.uniform(0.5, 1.0)
    table = np.vstack([tab * math.sin(0.3 * k) for k in range(11)])
    return [
        ShearMotion(DOM, amp=0.1, omega=1.3, phase=0.2),
        ChannelMotion(DOM, amp=0.2, omega=1.0, mode=2),
        EvolvedMotion(DOM, table, dt=0.05),
    ]


def _interior_points(rng, n=40):
    return np.column_stack([
        rng.uniform(0.05 * DOM.L, 0.95 * DOM.L, n),
        rng.uniform(0.05, 0.95, n),
    ])


# ----------------------------------------------------------------------
# oracle: centered finite differences of the map itself
# ----------------------------------------------------------------------

def fd_jacobian(motion, t, pts, h):
    ez = np.array([h, 0.0])
    er = np.array([0.0, h])
    col_z = (motion.map(t, pts + ez) - motion.map(t, pts - ez)) / (2 * h)
    col_r = (motion.map(t, pts + er) - motion.map(t, pts - er)) / (2 * h)
    return np.stack([col_z, col_r], axis=2)


@pytest.mark.parametrize("motion", _motions()[:2], ids=["shear", "channel"])
def test_jacobian_matches_fd_oracle(motion):
    # sweep the FD step over six decades; the best step must agree closely
    rng = np.random.default_rng(11)
    pts = _interior_points(rng)
    for t in (0.0, 0.37, 1.9):
        F = motion.jacobian(t, pts)
        best = np.inf
        for h in np.logspace(-9, -3, 13):
            Ffd = fd_jacobian(motion, t, pts, h)
            err = np.max(np.abs(Ffd - F)) / max(np.max(np.abs(F)), 1.0)
            best = min(best, err)
        assert best < 1e-7, f"t={t}: best FD agreement {best:.3e}"


@pytest.mark.parametrize("motion", _motions()[:2], ids=["shear", "channel"])
def test_velocity_matches_fd_oracle(motion):
    rng = np.random.default_rng(12)
    pts = _interior_points(rng)
    for t in (0.1, 0.8):
        vel = motion.velocity(t, pts)
        best = np.inf
        for h in np.logspace(-9, -3, 13):
            vfd = (motion.map(t + h, pts) - motion.map(t - h, pts)) / (2 * h)
            err = np.max(np.abs(vfd - vel)) / max(np.max(np.abs(vel)), 1.0)
            best = min(best, err)
        assert best < 1e-7


# ----------------------------------------------------------------------
# maps
# ----------------------------------------------------------------------

@pytest.mark.parametrize("motion", _motions(), ids=["shear", "channel", "evolved"])
def test_ale_roundtrip(motion):
    rng = np.random.default_rng(5)
    pts = _interior_points(rng, n=200)
    for t in (0.0, 0.25, 0.45):
        phys = ale_apply(motion, t, pts)
        back = ale_inverse(motion, t, phys)
        assert np.max(np.abs(back - pts)) < 1e-12


def test_shear_volume_preserving():
    motion = ShearMotion(DOM, amp=0.3, omega=2.0)
    rng = np.random.default_rng(6)
    pts = _interior_points(rng)
    for t in np.linspace(0, 4, 9):
        det, G = ale_jacobian_and_gradient(motion, t, pts)
        assert np.max(np.abs(det - 1.0)) < 1e-14
        # G = F^{-T}: check G^T F = I at a few points
        F = motion.jacobian(t, pts)
        prod = np.einsum("nki,nkj->nij", G, F)
        assert np.max(np.abs(prod - np.eye(2))) < 1e-13


def test_channel_jacobian_det_is_height():
    motion = ChannelMotion(DOM, amp=0.2, omega=1.0, mode=1)
    rng = np.random.default_rng(7)
    pts = _interior_points(rng)
    t = 0.6
    det, _ = ale_jacobian_and_gradient(motion, t, pts)
    expected = DOM.R + motion.eta(t, pts[:, 0])
    assert np.max(np.abs(det - expected)) < 1e-13


def test_degenerate_map_raises():
    table = np.full((3, 9), -1.5)  # collapses the channel: R + eta < 0
    motion = EvolvedMotion(DOM, table, dt=0.1)
    pts = np.array([[1.0, 0.5]])
    with pytest.raises(ValueError, match="degenerate"):
        ale_jacobian_and_gradient(motion, 0.1, pts)


def test_evolved_matches_channel_at_samples():
    # a table sampled from the analytic channel motion reproduces it at the
    # sample nodes and step times exactly
    motion = ChannelMotion(DOM, amp=0.15, omega=2.0, mode=1)
    dt = 0.05
    zn = np.linspace(0, DOM.L, 65)
    table = np.vstack([motion.eta(k * dt, zn) for k in range(21)])
    ev = EvolvedMotion(DOM, table, dt=dt)
    rng = np.random.default_rng(8)
    rr = rng.uniform(0, 1, 65)
    pts = np.column_stack([zn, rr])
    for k in (0, 7, 20):
        a = motion.map(k * dt, pts)
        b = ev.map(k * dt, pts)
        assert np.max(np.abs(a - b)) < 1e-12


def test_ale_map_view():
    motion = ShearMotion(DOM, amp=0.1)
    view = AleMap(motion, t=0.4)
    rng = np.random.default_rng(9)
    pts = _interior_points(rng, n=10)
    assert np.allclose(view.apply(pts), motion.map(0.4, pts))
    assert np.allclose(view.inverse(view.apply(pts)), pts, atol=1e-13)
    det, _ = view.jacobian_and_gradient(pts)
    assert det.shape == (10,)


# ----------------------------------------------------------------------
# Lipschitz sampling
# ----------------------------------------------------------------------

def test_lipschitz_shear_analytic():
    # F = [[1, g], [0, 1]]: singular values solve s^2 = 1 + g^2/2 +- |g| sqrt(1 + g^2/4)
    amp = 0.1
    motion = ShearMotion(DOM, amp=amp, omega=1.0)
    lip = estimate_lipschitz(motion, t_max=2 * math.pi, n_space=17, n_time=17)
    g = amp  # the time grid hits t = pi/2 where |g| peaks
    smax = math.sqrt(1 + g * g / 2 + abs(g) * math.sqrt(1 + g * g / 4))
    assert abs(lip.c_upper - smax) < 1e-6
    assert abs(lip.c_lower - 1.0 / smax) < 1e-6
    assert lip.ratio == pytest.approx(smax * smax, rel=1e-5)


def test_lipschitz_static_is_identity():
    motion = ShearMotion(DOM, amp=0.0)
    lip = estimate_lipschitz(motion, t_max=1.0, n_space=9, n_time=3)
    assert lip.c_lower == pytest.approx(1.0, abs=1e-9)
    assert lip.c_upper == pytest.approx(1.0, abs=1e-9)


def test_lipschitz_monotone_under_refinement():
    motion = ChannelMotion(DOM, amp=0.2, omega=1.0, mode=2)
    # nested sample grids: each refinement contains the previous points
    coarse = estimate_lipschitz(motion, t_max=1.0, n_space=17, n_time=9)
    mid = estimate_lipschitz(motion, t_max=1.0, n_space=33, n_time=17)
    fine = estimate_lipschitz(motion, t_max=1.0, n_space=65, n_time=33)
    assert mid.c_lower <= coarse.c_lower + 1e-12
    assert mid.c_upper >= coarse.c_upper - 1e-12
    assert fine.c_lower <= mid.c_lower + 1e-12
    assert fine.c_upper >= mid.c_upper - 1e-12
    # and the estimates have essentially converged
    assert abs(fine.c_upper - mid.c_upper) < 0.05 * fine.c_upper
    assert abs(fine.c_lower - mid.c_lower) < 0.05 * fine.c_lower


# ----------------------------------------------------------------------
# shrunk-domain inclusion
# ----------------------------------------------------------------------

def test_inclusion_no_violations_random_triples():
    motion = ChannelMotion(DOM, amp=0.2, omega=1.0, mode=1)
    lip = estimate_lipschitz(motion, t_max=1.0, n_space=33, n_time=17)
    rng = np.random.default_rng(2024)
    for _ in range(200):
        h = 10 ** rng.uniform(-3, -0.8)
        t = rng.uniform(0.0, 1.0)
        s = np.clip(t + rng.uniform(-0.999, 0.999) * h, 0.0, 1.0)
        rep = shrunk_domain_inclusion(motion, lip, t, s, h, n_samples=200, rng=rng)
        assert rep.ok, (
            f"inclusion violated: t={t} s={s} h={h} gamma={rep.gamma} "
            f"worst={rep.worst_margin:.3e}"
        )


def test_inclusion_requires_close_times():
    motion = ChannelMotion(DOM, amp=0.2)
    lip = estimate_lipschitz(motion, t_max=1.0, n_space=9, n_time=5)
    with pytest.raises(ValueError, match="s-t"):
        shrunk_domain_inclusion(motion, lip, t=0.1, s=0.5, h=0.1)


def test_inclusion_vacuous_when_gamma_swallows_domain():
    motion = ChannelMotion(DOM, amp=0.2)
    lip = estimate_lipschitz(motion, t_max=1.0, n_space=9, n_time=5)
    rep = shrunk_domain_inclusion(motion, lip, t=0.5, s=0.5, h=10.0)
    assert rep.ok and rep.n_samples == 0


# ----------------------------------------------------------------------
# envelopes
# ----------------------------------------------------------------------

def _random_table(rng, n_steps=20, nz=32):
    z = np.linspace(0, 1, nz + 1)
    base = np.sin(np.pi * z) ** 2
    rows = [0.2 * base * math.sin(0.4 * k) + 0.02 * rng.standard_normal(nz + 1) * base
            for k in range(n_steps + 1)]
    return np.vstack(rows)


def test_envelope_sandwich_everywhere():
    rng = np.random.default_rng(17)
    table = _random_table(rng)
    env = envelope(table, n=3, l=7, smoothing_width=5, L=2.0)
    window = table[3:11]
    assert np.all(env.lower <= window.min(axis=0) + 1e-15)
    assert np.all(env.upper >= window.max(axis=0) - 1e-15)
    assert np.all(env.raw_lower <= env.raw_upper)
    assert np.all(env.lower <= env.upper)


def test_envelope_constant_table_is_tight():
    table = np.full((6, 17), 0.3)
    env = envelope(table, n=1, l=3, smoothing_width=3)
    assert np.allclose(env.lower, 0.3)
    assert np.allclose(env.upper, 0.3)
    assert env.gap_max == 0.0
    assert env.gap_l2(1.0) == 0.0


def test_envelope_gap_monotone_in_window():
    rng = np.random.default_rng(18)
    table = _random_table(rng)
    g5 = envelope(table, n=2, l=5, smoothing_width=3, L=1.0)
    g10 = envelope(table, n=2, l=10, smoothing_width=3, L=1.0)
    assert g10.gap_max >= g5.gap_max - 1e-15
    assert g10.gap_l2(1.0) >= g5.gap_l2(1.0) - 1e-15


def test_envelope_window_bounds_checked():
    table = np.zeros((5, 9))
    with pytest.raises(ValueError, match="outside table"):
        envelope(table, n=2, l=3)
