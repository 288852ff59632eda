import numpy as np
import pytest
from scipy.stats import chisquare, kstest

from fieldloc.errors import BadSpec
from fieldloc.filter import (AnnealConfig, AnnealState, FilterContext, InitMode,
                             InitSpec, ParticleSet, Stage, anneal, estimate_pose,
                             init_global, init_local, photometric_weight,
                             position_spread, predict, resample, step, update_weights)
from fieldloc.render import render_image
from fieldloc.se3 import (NoiseParams, Pose, Rotation, exp_map, log_map,
                          rotation_geodesic_deg, Twist)


def _local_spec(center, rot_range=0.0, trans_range=0.0, count=10):
    return InitSpec(InitMode.LOCAL, count, center=center,
                    rot_range=rot_range, trans_range=trans_range)


def _set_at(poses, weights=None, time_index=0):
    n = len(poses)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    return ParticleSet(np.stack([p.rotation.matrix for p in poses]),
                       np.stack([p.translation for p in poses]), w, time_index)


# ---------------------------------------------------------------- init_local

def test_init_local_zero_ranges_collapses_to_center():
    center = Pose(Rotation.about_y(0.4), np.array([1.0, 2.0, 3.0]))
    pset = init_local(_local_spec(center, count=25), np.random.default_rng(0))
    assert pset.size == 25
    assert np.allclose(pset.translations, center.translation)
    assert np.allclose(pset.rotations, center.rotation.matrix)
    assert np.allclose(pset.weights, 1 / 25)


def test_init_local_benchmark_protocol_ranges():
    # per-axis twist components uniform in [-40 deg, 40 deg] and [-0.1 m, 0.1 m]
    center = Pose(Rotation.about_y(0.2), np.array([0.5, 0, 0]))
    spec = _local_spec(center, rot_range=np.radians(40), trans_range=0.1, count=2000)
    pset = init_local(spec, np.random.default_rng(1))
    for i in range(0, 2000, 10):
        delta = log_map(center.inverse() @ pset.pose(i))
        assert np.all(np.abs(delta.trans) <= 0.1 + 1e-9)
        assert np.all(np.abs(delta.rot) <= np.radians(40) + 1e-9)


def test_init_local_translation_uniform_ks():
    spec = _local_spec(Pose.identity(), trans_range=0.1, count=100_000)
    pset = init_local(spec, np.random.default_rng(2))
    for axis in range(3):
        stat = kstest((pset.translations[:, axis] + 0.1) / 0.2, "uniform")
        assert stat.pvalue > 0.01


def test_init_local_rejects_wrong_mode():
    spec = InitSpec(InitMode.GLOBAL, 10, box_lo=np.zeros(3), box_hi=np.ones(3))
    with pytest.raises(BadSpec):
        init_local(spec, np.random.default_rng(0))


# --------------------------------------------------------------- init_global

def test_init_global_point_box_zero_yaw():
    spec = InitSpec(InitMode.GLOBAL, 7, box_lo=np.array([1.0, 2.0, 3.0]),
                    box_hi=np.array([1.0, 2.0, 3.0]))
    pset = init_global(spec, np.random.default_rng(3))
    assert np.all(pset.translations == [1.0, 2.0, 3.0])
    assert np.allclose(pset.rotations, np.eye(3))


def test_init_global_cube_setup():
    # 2x2x2 m cube, yaw in [-180, 180] deg, roll/pitch exactly level
    spec = InitSpec(InitMode.GLOBAL, 20_000, box_lo=-np.ones(3), box_hi=np.ones(3),
                    yaw_range=np.pi)
    pset = init_global(spec, np.random.default_rng(4))
    assert np.all(np.abs(pset.translations) <= 1.0)
    # level: camera y axis stays the world y axis
    assert np.allclose(pset.rotations[:, 1, 1], 1.0, atol=1e-12)
    yaw = np.arctan2(pset.rotations[:, 0, 2], pset.rotations[:, 2, 2])
    assert kstest((yaw + np.pi) / (2 * np.pi), "uniform").pvalue > 0.01
    spread = position_spread(pset)
    assert abs(spread - 1.0) < 0.01  # sqrt(3 * (2^2/12))


def test_init_global_jackal_setup():
    spec = InitSpec(InitMode.GLOBAL, 5000,
                    box_lo=np.array([0.0, -0.25, 0.0]), box_hi=np.array([1.0, 0.25, 3.5]),
                    yaw_range=np.pi, roll_pitch_range=np.radians(2.5))
    pset = init_global(spec, np.random.default_rng(5))
    assert np.all(pset.translations[:, 0] >= 0) and np.all(pset.translations[:, 0] <= 1)
    assert np.all(np.abs(pset.translations[:, 1]) <= 0.25)
    assert np.all(pset.translations[:, 2] <= 3.5)
    # roll/pitch bounded: world-y of camera-y axis stays within 2 * 2.5 deg of 1
    assert np.all(pset.rotations[:, 1, 1] > np.cos(2 * np.radians(2.5)))


# ------------------------------------------------------------------- predict

def test_predict_identity_noise_free_is_noop():
    poses = [Pose(Rotation.about_z(0.3), np.array([1.0, 0, 0])), Pose.identity()]
    pset = _set_at(poses)
    out = predict(pset, Pose.identity(), NoiseParams(0, 0), np.random.default_rng(0))
    assert np.array_equal(out.rotations, pset.rotations)
    assert np.array_equal(out.translations, pset.translations)
    assert np.array_equal(out.weights, pset.weights)


def test_predict_right_composition_moves_along_body_axis():
    # +x odometry translates each particle along its own body x-axis
    yaw = Rotation.about_y(np.pi / 2)
    pset = _set_at([Pose(yaw, np.zeros(3)), Pose.identity()])
    odom = Pose(Rotation.identity(), np.array([1.0, 0, 0]))
    out = predict(pset, odom, NoiseParams(0, 0), np.random.default_rng(0))
    assert np.allclose(out.translations[0], yaw.apply(np.array([1.0, 0, 0])), atol=1e-12)
    assert np.allclose(out.translations[1], [1.0, 0, 0])


def test_predict_diffusion_grows_spread():
    n = 100_000
    pset = _set_at([Pose.identity()] * 1)
    pset = ParticleSet(np.repeat(pset.rotations, n, axis=0),
                       np.repeat(pset.translations, n, axis=0), np.full(n, 1 / n))
    sigma = 0.02
    out = predict(pset, Pose.identity(), NoiseParams(0, sigma), np.random.default_rng(6))
    spread2 = position_spread(out) ** 2
    se = np.sqrt(6.0 / n) * sigma * sigma
    assert abs(spread2 - 3 * sigma * sigma) < 3 * se


# ------------------------------------------------------------ update_weights

def test_photometric_weight_exact_values():
    assert photometric_weight(2, 0.5) == 256.0
    # fourth-power ratio law to machine precision over random pairs
    rng = np.random.default_rng(7)
    for _ in range(100):
        s = rng.uniform(0.01, 10.0)
        a, b = photometric_weight(64, s), photometric_weight(64, 4 * s)
        assert a / b == pytest.approx(256.0, rel=1e-12)


def test_photometric_weight_clamps_at_exact_match():
    m = 64
    assert photometric_weight(m, 0.0) == photometric_weight(m, 1e-8 * m)
    assert np.isfinite(photometric_weight(m, 0.0))


def test_update_weights_truth_particle_dominates(triad, intr, filter_render_cfg):
    truth = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    image = render_image(triad, truth, intr, filter_render_cfg)
    off = truth @ exp_map(Twist([0.05, 0, 0], [0.05, 0, 0]))
    pset = _set_at([truth, off])
    out = update_weights(pset, image, triad, intr, filter_render_cfg, 32,
                         np.random.default_rng(8))
    assert out.weights[0] > 0.999
    assert abs(out.weights.sum() - 1.0) < 1e-9


def test_update_weights_photometric_ordering(triad, intr, filter_render_cfg):
    truth = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    image = render_image(triad, truth, intr, filter_render_cfg)
    offsets = [0.02, 0.05, 0.1, 0.2]
    poses = [truth @ exp_map(Twist([0, 0, 0], [dx, 0, 0])) for dx in offsets]
    out = update_weights(_set_at(poses), image, triad, intr, filter_render_cfg, 64,
                         np.random.default_rng(9))
    assert np.all(np.diff(out.weights) < 0)


def test_update_weights_threading_is_bit_identical(triad, intr, filter_render_cfg):
    truth = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    image = render_image(triad, truth, intr, filter_render_cfg)
    poses = [truth @ exp_map(Twist([0, 0, 0.01 * k], [0.01 * k, 0, 0])) for k in range(7)]
    a = update_weights(_set_at(poses), image, triad, intr, filter_render_cfg, 16,
                       np.random.default_rng(10))
    b = update_weights(_set_at(poses), image, triad, intr, filter_render_cfg, 16,
                       np.random.default_rng(10), threads=4)
    assert np.array_equal(a.weights, b.weights)


# ------------------------------------------------------------------ resample

def test_resample_all_weight_on_one():
    poses = [Pose(Rotation.identity(), np.array([float(k), 0, 0])) for k in range(4)]
    pset = _set_at(poses, weights=[0, 0, 1.0, 0])
    out = resample(pset, 6, np.random.default_rng(11))
    assert out.size == 6
    assert np.all(out.translations[:, 0] == 2.0)
    assert np.allclose(out.weights, 1 / 6)


def test_resample_size_contract():
    poses = [Pose(Rotation.identity(), np.array([float(k), 0, 0])) for k in range(10)]
    out = resample(_set_at(poses), 3, np.random.default_rng(12))
    assert out.size == 3


def test_resample_multinomial_chisquare():
    w = np.array([0.05, 0.1, 0.15, 0.3, 0.4])
    poses = [Pose(Rotation.identity(), np.array([float(k), 0, 0])) for k in range(5)]
    pset = _set_at(poses, weights=w)
    rng = np.random.default_rng(13)
    counts = np.zeros(5)
    trials, n = 10_000, 20
    for _ in range(trials):
        out = resample(pset, n, rng)
        idx = out.translations[:, 0].astype(int)
        counts += np.bincount(idx, minlength=5)
    assert chisquare(counts, trials * n * w).pvalue > 0.01


def test_resample_unbiased_expected_counts():
    w = np.array([0.5, 0.25, 0.125, 0.125])
    poses = [Pose(Rotation.identity(), np.array([float(k), 0, 0])) for k in range(4)]
    pset = _set_at(poses, weights=w)
    rng = np.random.default_rng(14)
    draws = 100_000
    counts = np.zeros(4)
    out = resample(pset, draws, rng)
    counts += np.bincount(out.translations[:, 0].astype(int), minlength=4)
    p = counts / draws
    se = np.sqrt(w * (1 - w) / draws)
    assert np.all(np.abs(p - w) < 3 * se)


def test_resample_systematic_scheme():
    w = np.array([0.5, 0.5])
    poses = [Pose(Rotation.identity(), np.array([float(k), 0, 0])) for k in range(2)]
    out = resample(_set_at(poses, weights=w), 10, np.random.default_rng(15), "systematic")
    counts = np.bincount(out.translations[:, 0].astype(int), minlength=2)
    assert np.all(counts == 5)  # low-variance comb splits an even mix exactly


# ------------------------------------------------------------ position_spread

def test_position_spread_colocated_zero():
    pset = _set_at([Pose.identity()] * 5)
    assert position_spread(pset) == 0.0


def test_position_spread_two_points():
    poses = [Pose(Rotation.identity(), np.array([1.0, 0, 0])),
             Pose(Rotation.identity(), np.array([-1.0, 0, 0]))]
    assert position_spread(_set_at(poses)) == pytest.approx(1.0, abs=1e-12)


def test_position_spread_uniform_cube():
    rng = np.random.default_rng(16)
    t = rng.uniform(-1, 1, (100_000, 3))
    pset = ParticleSet(np.repeat(np.eye(3)[None], 100_000, axis=0), t,
                       np.full(100_000, 1e-5))
    assert position_spread(pset) == pytest.approx(1.0, rel=0.01)


# -------------------------------------------------------------------- anneal

ANNEAL = AnnealConfig(sigma_r_init=0.2, sigma_t_init=0.08, alpha_refine=0.1,
                      alpha_super_refine=0.05, n_init=300, n_reduced=100)


@pytest.mark.parametrize("spread,expect", [
    (0.5, (0.2, 0.08, 300, Stage.INIT)),
    (0.1, (0.2, 0.08, 300, Stage.INIT)),          # boundary: not strictly below
    (0.07, (0.1, 0.04, 100, Stage.REFINE)),
    (0.049, (0.05, 0.02, 100, Stage.SUPER_REFINE)),
    (0.0, (0.05, 0.02, 100, Stage.SUPER_REFINE)),
])
def test_anneal_branches(spread, expect):
    state = anneal(ANNEAL, spread)
    assert (state.sigma_r, state.sigma_t, state.n, state.stage) == expect


def test_anneal_noise_monotone_in_spread():
    spreads = np.linspace(0.2, 0.0, 50)
    sig = [anneal(ANNEAL, s).sigma_t for s in spreads]
    assert np.all(np.diff(sig) <= 1e-15)


def test_anneal_config_validation():
    with pytest.raises(ValueError):
        AnnealConfig(0.1, 0.1, alpha_refine=0.05, alpha_super_refine=0.1,
                     n_init=10, n_reduced=5)
    with pytest.raises(ValueError):
        AnnealConfig(0.1, 0.1, alpha_refine=0.1, alpha_super_refine=0.05,
                     n_init=10, n_reduced=20)


# ------------------------------------------------------------- estimate_pose

def test_estimate_single_particle():
    p = Pose(Rotation.about_x(0.3), np.array([1.0, -2.0, 0.5]))
    est = estimate_pose(_set_at([p], weights=[1.0]))
    assert est.allclose(p, atol=1e-9)


def test_estimate_midpoint_translation():
    a = Pose(Rotation.identity(), np.array([0.2, 0, 0]))
    b = Pose(Rotation.identity(), np.array([-0.2, 0, 0]))
    est = estimate_pose(_set_at([a, b]))
    assert np.allclose(est.translation, 0, atol=1e-15)


def test_estimate_matches_direct_recomputation():
    rng = np.random.default_rng(17)
    poses, w = [], rng.uniform(0.1, 1, 20)
    w /= w.sum()
    for _ in range(20):
        poses.append(Pose(Rotation.from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.3)),
                          rng.normal(size=3) * 0.1))
    pset = _set_at(poses, weights=w)
    est = estimate_pose(pset)
    direct = w @ pset.translations
    assert np.abs(est.translation - direct).max() < 1e-12
    # Karcher first-order optimality at the returned rotation
    from fieldloc.se3 import _so3_log_batch
    grad = w @ _so3_log_batch(np.einsum("ji,njk->nik", est.rotation.matrix, pset.rotations))
    assert np.linalg.norm(grad) < 1e-6


def test_estimate_invariant_to_weight_rescale():
    rng = np.random.default_rng(18)
    poses = [Pose(Rotation.from_axis_angle(rng.normal(size=3), 0.2), rng.normal(size=3))
             for _ in range(8)]
    w = rng.uniform(0.5, 2.0, 8)
    for c in (0.25, 8.0):  # powers of two rescale exactly
        a = estimate_pose(_set_at(poses, weights=w / w.sum()))
        scaled = w * c
        b = estimate_pose(_set_at(poses, weights=scaled / scaled.sum()))
        assert np.array_equal(a.translation, b.translation)
        assert np.array_equal(a.rotation.matrix, b.rotation.matrix)


def test_estimate_requires_normalized_weights():
    with pytest.raises(ValueError):
        estimate_pose(_set_at([Pose.identity()], weights=[2.0]))


# ---------------------------------------------------------------------- step

def _context(field, intr, cfg, seed=0, **kw):
    anneal_cfg = kw.pop("anneal_cfg", AnnealConfig(0.0, 0.0, 0.1, 0.05, 1, 1))
    return FilterContext(field=field, intrinsics=intr, render_cfg=cfg,
                         anneal_cfg=anneal_cfg, m_pixels=kw.pop("m_pixels", 16),
                         seed=seed, **kw)


def test_step_fixed_point_at_truth(triad, intr, filter_render_cfg):
    truth = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    image = render_image(triad, truth, intr, filter_render_cfg)
    pset = _set_at([truth], weights=[1.0])
    ctx = _context(triad, intr, filter_render_cfg)
    out, est, state = step(pset, Pose.identity(), image, ctx)
    assert est.allclose(truth, atol=1e-9)
    assert out.size == 1
    assert out.time_index == 1


def test_step_weight_normalization_invariant(triad, intr, filter_render_cfg):
    truth = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    image = render_image(triad, truth, intr, filter_render_cfg)
    spec = _local_spec(truth, rot_range=0.1, trans_range=0.05, count=30)
    pset = init_local(spec, np.random.default_rng(19))
    anneal_cfg = AnnealConfig(0.02, 0.01, 0.1, 0.05, 30, 10)
    ctx = _context(triad, intr, filter_render_cfg, anneal_cfg=anneal_cfg)
    out, est, state = step(pset, Pose.identity(), image, ctx)
    assert abs(out.weights.sum() - 1.0) < 1e-9
    assert np.all(out.weights >= 0)


def test_step_prediction_only_mode(triad, intr, filter_render_cfg):
    start = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    pset = _set_at([start], weights=[1.0])
    odom = Pose(Rotation.identity(), np.array([0.1, 0, 0]))
    ctx = _context(triad, intr, filter_render_cfg, updates_per_image=0)
    out, est, _ = step(pset, odom, None, ctx)
    assert est.allclose(start @ odom, atol=1e-12)


def test_step_trace_and_forward_pass_accounting(triad, intr, filter_render_cfg):
    truth = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    image = render_image(triad, truth, intr, filter_render_cfg)
    spec = _local_spec(truth, rot_range=0.05, trans_range=0.05, count=20)
    pset = init_local(spec, np.random.default_rng(20))
    trace = []
    anneal_cfg = AnnealConfig(0.02, 0.01, 0.1, 0.05, 20, 8)
    ctx = _context(triad, intr, filter_render_cfg, anneal_cfg=anneal_cfg,
                   updates_per_image=3, trace=trace)
    out, est, state = step(pset, Pose.identity(), image, ctx)
    updates = [t for t in trace if t.phase == "update"]
    assert len(updates) == 3
    for t in updates:
        assert t.forward_passes == t.n_particles * 16 * filter_render_cfg.samples_per_ray
    assert out.time_index == 3


def test_step_deterministic_under_threads(triad, intr, filter_render_cfg):
    truth = Pose(Rotation.identity(), np.array([0.0, 0.3, 0.5]))
    image = render_image(triad, truth, intr, filter_render_cfg)
    spec = _local_spec(truth, rot_range=0.05, trans_range=0.05, count=24)
    results = []
    for threads in (1, 3):
        pset = init_local(spec, np.random.default_rng(21))
        anneal_cfg = AnnealConfig(0.02, 0.01, 0.1, 0.05, 24, 8)
        ctx = _context(triad, intr, filter_render_cfg, anneal_cfg=anneal_cfg,
                       updates_per_image=2, threads=threads)
        out, est, _ = step(pset, Pose.identity(), image, ctx)
        results.append((out.rotations.copy(), out.translations.copy(), est))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])
    assert np.array_equal(results[0][2].translation, results[1][2].translation)
