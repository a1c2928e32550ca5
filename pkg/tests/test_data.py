"""Toy datasets, JSONL round trips, structure matching, Frechet diagnostic."""

import numpy as np
import pytest

from kindiff.data import (CrystalState, FrechetDiagReport, ToySpec, frechet_diagnostic,
                          generate_toy, read_jsonl, record_to_state, state_to_record,
                          structure_match, write_jsonl)
from kindiff.torus import wrap_unit


def _translate(state: CrystalState, delta) -> CrystalState:
    return CrystalState(f=wrap_unit(state.f + np.asarray(delta)),
                        lengths=state.lengths, angles=state.angles, species=state.species)


class TestCrystalState:
    def test_validation(self):
        with pytest.raises(ValueError):
            CrystalState(f=np.array([[1.0, 0, 0]]), lengths=[1, 1, 1],
                         angles=[np.pi / 2] * 3, species=[0])
        with pytest.raises(ValueError):
            CrystalState(f=np.array([[0.5, 0, 0]]), lengths=[0, 1, 1],
                         angles=[np.pi / 2] * 3, species=[0])


class TestGenerateToy:
    def test_ring_offsets_exact_without_jitter(self):
        ds = generate_toy(ToySpec(family="ring-1d", k=4, jitter=0.0, count=5, seed=3))
        for s in ds:
            gaps = np.sort(wrap_unit(np.diff(np.sort(s.f[:, 0]))))
            np.testing.assert_allclose(gaps, 0.25, atol=1e-12)

    def test_deterministic_per_seed(self):
        a = generate_toy(ToySpec(family="ring-1d", k=4, jitter=0.01, count=10, seed=5))
        b = generate_toy(ToySpec(family="ring-1d", k=4, jitter=0.01, count=10, seed=5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.f, y.f)
            np.testing.assert_array_equal(x.lengths, y.lengths)

    def test_perovskite_has_five_sites(self):
        ds = generate_toy(ToySpec(family="perovskite-like", k=5, num_species=4,
                                  jitter=0.0, count=8, seed=1))
        for s in ds:
            assert s.k == 5
            assert s.species[2] == s.species[3] == s.species[4]  # the X sites

    def test_perovskite_wrong_k_rejected(self):
        with pytest.raises(ValueError):
            generate_toy(ToySpec(family="perovskite-like", k=4, count=1))

    def test_random_motif_shares_motif(self):
        ds = generate_toy(ToySpec(family="random-motif", k=3, jitter=0.0, count=6, seed=9))
        rel0 = wrap_unit(ds[0].f - ds[0].f[:1])
        for s in ds[1:]:
            rel = wrap_unit(s.f - s.f[:1])
            np.testing.assert_allclose(rel, rel0, atol=1e-9)


class TestJsonl:
    def test_round_trip_bit_identical(self, tmp_path):
        ds = generate_toy(ToySpec(family="perovskite-like", k=5, num_species=3,
                                  jitter=0.02, count=20, seed=7))
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        write_jsonl(p1, ds)
        write_jsonl(p2, read_jsonl(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_schema_keys_stable_order(self):
        s = generate_toy(ToySpec(family="ring-1d", k=2, count=1, seed=0))[0]
        rec = state_to_record(s)
        assert rec.index('"k"') < rec.index('"f"') < rec.index('"lengths"') \
            < rec.index('"angles"') < rec.index('"species"')

    def test_k_mismatch_rejected(self):
        with pytest.raises(ValueError):
            record_to_state('{"k": 3, "f": [[0.1, 0.2, 0.3]], "lengths": [1,1,1],'
                            '"angles": [1.5707,1.5707,1.5707], "species": [0]}')


class TestStructureMatch:
    def _state(self, f, species=None):
        f = np.asarray(f, dtype=float)
        return CrystalState(f=f, lengths=[5, 5, 5], angles=[np.pi / 2] * 3,
                            species=np.zeros(f.shape[0], dtype=int) if species is None
                            else np.asarray(species))

    def test_identity(self):
        s = self._state([[0.1, 0.2, 0.3], [0.6, 0.7, 0.8]])
        ok, rmse = structure_match(s, s)
        assert ok and rmse == pytest.approx(0.0, abs=1e-9)

    def test_global_translation_invariance(self):
        s = self._state([[0.1, 0.2, 0.3], [0.6, 0.7, 0.8], [0.35, 0.9, 0.05]])
        ok, rmse = structure_match(s, _translate(s, [0.37, 0.37, 0.37]))
        assert ok and rmse < 1e-6

    def test_per_dimension_translation(self):
        s = self._state([[0.1, 0.2, 0.3], [0.6, 0.7, 0.8]])
        ok, rmse = structure_match(s, _translate(s, [0.11, 0.52, 0.93]))
        assert ok and rmse < 1e-6

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        f = rng.random((5, 3))
        s = self._state(f)
        t = self._state(f[::-1])
        ok, rmse = structure_match(s, t)
        assert ok and rmse < 1e-9

    def test_large_noise_rejected(self):
        rng = np.random.default_rng(1)
        f = rng.random((4, 3))
        s = self._state(f)
        noisy = self._state(wrap_unit(f + 0.5 * rng.standard_normal(f.shape)))
        ok, rmse = structure_match(s, noisy, site_tol=0.05)
        assert not ok

    def test_symmetry_of_arguments(self):
        rng = np.random.default_rng(2)
        a = self._state(rng.random((6, 3)))
        b = self._state(wrap_unit(rng.random((6, 3))))
        _, r1 = structure_match(a, b)
        _, r2 = structure_match(b, a)
        assert r1 == pytest.approx(r2, abs=1e-9)

    def test_species_preserving(self):
        # three sites NOT related by any global translation, so swapping two
        # species forces a genuinely off-site assignment
        f = np.array([[0.1, 0.1, 0.1], [0.5, 0.7, 0.2], [0.9, 0.3, 0.6]])
        a = self._state(f, species=[0, 1, 2])
        b = self._state(f[::-1], species=[2, 1, 0])
        ok, rmse = structure_match(a, b, site_tol=0.05)
        assert ok and rmse < 1e-9
        c = self._state(f, species=[1, 0, 2])
        ok2, rmse2 = structure_match(a, c, site_tol=0.4)
        assert rmse2 > 0.1  # forced off-site assignment

    def test_mismatch_returns_nan(self):
        a = self._state(np.random.default_rng(3).random((2, 3)))
        b = self._state(np.random.default_rng(4).random((3, 3)))
        ok, rmse = structure_match(a, b)
        assert not ok and np.isnan(rmse)
        c = self._state(a.f, species=[0, 1])
        ok2, rmse2 = structure_match(a, c)
        assert not ok2 and np.isnan(rmse2)

    def test_translation_invariance_random_shifts(self):
        rng = np.random.default_rng(5)
        s = self._state(rng.random((5, 3)))
        for _ in range(100):
            ok, rmse = structure_match(s, _translate(s, rng.random(3)))
            assert ok and rmse < 1e-6


class TestFrechetDiagnostic:
    def test_mean_free_low_noise_preserves(self):
        rng = np.random.default_rng(42)
        rep = frechet_diagnostic(k=10, sigma2_grid=[0.1], mean_free=True, n=400, rng=rng)
        assert rep.entries[0].preserved_frac >= 0.95

    def test_mean_free_high_noise_quantized(self):
        rng = np.random.default_rng(43)
        rep = frechet_diagnostic(k=10, sigma2_grid=[0.7], mean_free=True, n=400, rng=rng)
        e = rep.entries[0]
        assert e.quantized_frac == 1.0
        assert np.max(e.quantum_residuals) < 0.05

    def test_free_noising_is_continuous(self):
        rng = np.random.default_rng(44)
        rep = frechet_diagnostic(k=10, sigma2_grid=[0.1], mean_free=False, n=400, rng=rng)
        e = rep.entries[0]
        assert e.preserved_frac < 0.5
        assert e.quantized_frac < 0.9

    def test_report_shape(self):
        rng = np.random.default_rng(45)
        rep = frechet_diagnostic(k=6, sigma2_grid=[0.05, 0.3], mean_free=True, n=50, rng=rng)
        assert isinstance(rep, FrechetDiagReport)
        assert len(rep.entries) == 2
        assert rep.entries[0].shifts.shape == (50,)
