import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from splatbind.density_control import (
    AdcConfig, DensityState, apply_densification, clone_set, densify_step, peak_set_size, prune_set, split_set,
)
from splatbind.error_metrics import tracker_update
from splatbind.errors import ValidationError
from splatbind.mesh_binding import TriMesh
from splatbind.splat_core import GaussianSet
from splatbind.uv_atlas import rasterize_uv, uv_in_face

from conftest import random_unit_quats


def grid_mesh(n=3):
    """n x n quads of the unit UV square, two triangles each."""
    xs = np.linspace(0, 1, n + 1)
    uv = np.array([[x, y] for y in xs for x in xs])
    faces = []
    for r in range(n):
        for c in range(n):
            a, b = r * (n + 1) + c, r * (n + 1) + c + 1
            d, e = a + n + 1, b + n + 1
            faces += [[a, b, d], [b, e, d]]
    faces = np.array(faces)
    return TriMesh(np.c_[uv, np.zeros(len(uv))], faces, uv, faces)


def random_set(rng, n, n_faces=1, uv=None):
    face = rng.integers(0, n_faces, n)
    return GaussianSet(rng.normal(0, 0.2, (n, 3)), rng.uniform(0.02, 0.2, (n, 3)), random_unit_quats(rng, n),
                       rng.uniform(0.1, 0.9, n), rng.random((n, 3)), face,
                       uv if uv is not None else np.full((n, 2), 0.25))


@pytest.fixture(scope="module")
def bound():
    mesh = grid_mesh(3)
    atlas = rasterize_uv(mesh, 64)
    return mesh, atlas


def bound_set(rng, n, mesh, atlas):
    from splatbind.uv_atlas import sample_uv
    g = random_set(rng, n, mesh.n_faces)
    g.uv = sample_uv(g.face_id, atlas, mesh, rng_seed=int(rng.integers(1000)))
    return g


class TestConfig:
    @pytest.mark.parametrize("kw", [{"tau_avg": 0}, {"tau_pos": -1}, {"peak_fraction": 1.0},
                                    {"peak_fraction": 0.0}, {"prune_opacity": 0}, {"max_gaussians": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValidationError):
            AdcConfig(**kw)


class TestCloneSet:
    def test_three_largest_peaks(self):
        rng = np.random.default_rng(0)
        peaks = rng.permutation(100).astype(float)
        got = clone_set(np.zeros(100), peaks, AdcConfig())
        assert sorted(got) == sorted(np.argsort(peaks)[-3:])

    @pytest.mark.parametrize("n", [1, 5, 50, 200])
    def test_average_rule_always_included(self, n):
        avg = np.zeros(n)
        avg[n - 1] = 2e-3
        assert n - 1 in clone_set(avg, np.zeros(n), AdcConfig())

    def test_ties_go_to_lower_index(self):
        assert clone_set(np.zeros(100), np.ones(100), AdcConfig()).tolist() == [0, 1, 2]

    def test_threshold_is_strict(self):
        assert clone_set(np.full(200, 1e-3), np.zeros(200), AdcConfig()).tolist() == list(range(6))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            clone_set(np.zeros(3), np.zeros(4), AdcConfig())

    def test_peak_size(self):
        assert peak_set_size(100, 0.03) == 3
        assert peak_set_size(101, 0.03) == 4
        assert peak_set_size(1, 0.03) == 1
        assert peak_set_size(0, 0.03) == 0

    @given(arrays(np.float64, st.integers(1, 80), elements=st.floats(0, 1e-2)), st.integers(0, 2 ** 31))
    def test_matches_brute_force(self, avg, seed):
        peaks = np.random.default_rng(seed).integers(0, 5, len(avg)).astype(float)
        cfg = AdcConfig()
        k = math.ceil(round(0.03 * len(avg), 9))
        order = sorted(range(len(avg)), key=lambda i: (-peaks[i], i))[:k]
        expect = sorted(set(order) | {i for i in range(len(avg)) if avg[i] > cfg.tau_avg})
        got = clone_set(avg, peaks, cfg)
        assert got.tolist() == expect
        assert len(got) >= k


class TestSplitPrune:
    def test_zero_gradients(self):
        assert len(split_set(np.zeros(5), np.ones(5), np.ones(5), AdcConfig())) == 0

    def test_small_scale_excluded(self):
        assert len(split_set(np.array([1.0]), np.array([1]), np.array([0.005]), AdcConfig())) == 0

    def test_singleton(self):
        got = split_set(np.array([0.0, 1e-3, 1e-5]), np.array([1, 2, 1]), np.array([1.0, 0.5, 1.0]), AdcConfig())
        assert got.tolist() == [1]

    def test_uncounted_ignored(self):
        assert len(split_set(np.array([1.0]), np.array([0]), np.array([1.0]), AdcConfig())) == 0

    def test_scene_extent_scales_threshold(self):
        assert split_set(np.array([1.0]), np.array([1]), np.array([0.05]), AdcConfig(), 10.0).tolist() == []
        assert split_set(np.array([1.0]), np.array([1]), np.array([0.05]), AdcConfig(), 1.0).tolist() == [0]

    def test_prune(self):
        cfg = AdcConfig()
        assert len(prune_set(np.full(4, 0.5), cfg)) == 0
        assert prune_set(np.array([0.5, 0.001, 0.5]), cfg).tolist() == [1]
        assert len(prune_set(np.array([0.005]), cfg)) == 0

    def test_prune_never_resets_opacity(self):
        g = random_set(np.random.default_rng(0), 10)
        before = g.opacity.copy()
        prune_set(g, AdcConfig())
        assert np.array_equal(g.opacity, before)


class TestApply:
    def test_empty_sets(self):
        rng = np.random.default_rng(0)
        g = random_set(rng, 6)
        state = DensityState.fresh(g)
        state.tracker = tracker_update(state.tracker, np.arange(6.0))
        state.grad_accum[:] = 1.0
        state.grad_count[:] = 3
        out, rep = apply_densification(state, [], [], [], None, None, 0)
        for f in ("mu", "scale", "rot", "opacity", "color", "face_id", "uv"):
            assert np.array_equal(getattr(out.gaussians, f), getattr(g, f))
        assert not out.tracker.total.any() and not out.tracker.peak.any() and out.tracker.count == 0
        assert not out.grad_accum.any() and not out.grad_count.any()
        assert rep.new_total == 6 and not rep.cap_reached

    def test_clone_one(self, bound):
        mesh, atlas = bound
        rng = np.random.default_rng(1)
        g = bound_set(rng, 8, mesh, atlas)
        out, rep = apply_densification(g, [3], [], [], atlas, mesh, 5)
        new = out.gaussians
        assert len(new) == 9 and rep.cloned == [3]
        assert new.face_id[-1] == g.face_id[3]
        assert np.array_equal(new.scale[-1], g.scale[3]) and np.array_equal(new.color[-1], g.color[3])
        same = np.flatnonzero(new.face_id == g.face_id[3])
        assert np.all(uv_in_face(new.uv[same], new.face_id[same], mesh))
        assert out.parents[-1] == 3 and out.born[-1] and not out.born[:-1].any()

    def test_clone_jitter_scale(self):
        rng = np.random.default_rng(2)
        g = random_set(rng, 1)
        g.scale[:] = [0.1, 0.2, 0.4]
        deltas = np.array([apply_densification(g, [0], [], [], None, None, s)[0].gaussians.mu[1] - g.mu[0]
                           for s in range(3000)])
        assert np.allclose(deltas.std(axis=0), 0.1 * g.scale[0], rtol=0.08)

    def test_split_one(self):
        g = random_set(np.random.default_rng(3), 5)
        out, rep = apply_densification(g, [], [2], [], None, None, 0)
        new = out.gaussians
        assert len(new) == 6 and rep.split == [2]
        assert np.allclose(new.scale[-2:], g.scale[2] / 1.6)
        assert out.parents.tolist() == [0, 1, 3, 4, 2, 2]

    def test_split_children_follow_parent_density(self):
        g = random_set(np.random.default_rng(4), 1)
        g.scale[:] = [0.3, 0.1, 0.05]
        from splatbind.splat_core import covariance
        cov = covariance(g.scale, g.rot)[0]
        mus = np.concatenate([apply_densification(g, [], [0], [], None, None, s)[0].gaussians.mu
                              for s in range(2000)])
        d = mus - g.mu[0]
        assert np.allclose(np.cov(d.T), cov, atol=0.1 * np.abs(cov).max())

    def test_prune_wins(self):
        g = random_set(np.random.default_rng(5), 4)
        out, rep = apply_densification(g, [1, 2], [1], [1], None, None, 0)
        assert rep.pruned == [1] and 1 not in rep.cloned and 1 not in rep.split
        assert len(out.gaussians) == 4

    def test_split_wins_over_clone(self):
        g = random_set(np.random.default_rng(5), 4)
        _, rep = apply_densification(g, [0], [0], [], None, None, 0)
        assert rep.split == [0] and rep.cloned == []

    def test_cap_drops_lowest_scores(self):
        g = random_set(np.random.default_rng(6), 5)
        cfg = AdcConfig(max_gaussians=7)
        scores = np.array([5e-3, 1e-2, 2e-3, 4e-3, 3e-3])
        out, rep = apply_densification(g, [0, 1, 2, 3, 4], [], [], None, None, 0, cfg, clone_scores=scores)
        assert rep.cap_reached and len(out.gaussians) == 7
        assert rep.cloned == [0, 1]

    def test_bad_index(self):
        with pytest.raises(ValidationError):
            apply_densification(random_set(np.random.default_rng(0), 3), [3], [], [], None, None, 0)

    def test_deterministic(self, bound):
        mesh, atlas = bound
        g = bound_set(np.random.default_rng(7), 10, mesh, atlas)
        a, _ = apply_densification(g, [1, 4], [2], [0], atlas, mesh, 11)
        b, _ = apply_densification(g, [1, 4], [2], [0], atlas, mesh, 11)
        assert np.array_equal(a.gaussians.mu, b.gaussians.mu) and np.array_equal(a.gaussians.uv, b.gaussians.uv)

    def test_region_counts_reported(self, bound):
        mesh, atlas0 = bound
        mask = np.zeros((64, 64), bool)
        mask[:32] = True
        atlas = rasterize_uv(mesh, 64, {"lower": mask})
        g = bound_set(np.random.default_rng(8), 10, mesh, atlas)
        _, rep = apply_densification(g, [0, 1], [], [], atlas, mesh, 0)
        assert set(rep.regions_before) == {"lower"} and set(rep.regions_after) == {"lower"}
        assert 0 <= rep.regions_after["lower"] <= 12

    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 31), st.integers(1, 40), st.integers(1, 60))
    def test_invariants(self, bound, seed, n, cap):
        mesh, atlas = bound
        rng = np.random.default_rng(seed)
        g = bound_set(rng, n, mesh, atlas)
        g.opacity[rng.random(n) < 0.2] = 0.001
        cfg = AdcConfig(max_gaussians=max(cap, n))
        state = DensityState.fresh(g)
        state.tracker = tracker_update(state.tracker, rng.random(n) * 3e-3)
        state.grad_accum = rng.random(n) * 5e-4
        state.grad_count = rng.integers(0, 3, n)
        out, rep = densify_step(state, cfg, atlas, mesh, seed)
        new = out.gaussians
        assert len(new) <= cfg.max_gaussians and rep.new_total == len(new)
        assert np.all(uv_in_face(new.uv, new.face_id, mesh))
        assert not set(rep.pruned) & (set(rep.cloned) | set(rep.split))
        assert not set(rep.cloned) & set(rep.split)
        assert not set(rep.pruned) & set(out.parents[~out.born].tolist())
        assert not out.grad_accum.any() and not out.grad_count.any() and not out.tracker.total.any()
        assert len(new) == n - len(rep.pruned) + len(rep.cloned) + len(rep.split)
        assert np.array_equal(new.face_id, g.face_id[out.parents])
