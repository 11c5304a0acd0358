import numpy as np
import pytest

from coverblip.dictionary import (
    Dictionary,
    ParameterGrid,
    fingerprint_trajectories,
    generate_fingerprints,
    load_dictionary,
    save_dictionary,
    svd_compress,
)


def small_grid():
    return ParameterGrid(t1_values=[300.0, 800.0, 1500.0],
                         t2_values=[50.0, 100.0, 250.0],
                         b0_values=[-40.0, 0.0, 40.0])


class TestParameterGrid:
    def test_combinations_filtered(self):
        grid = small_grid()
        combos = grid.combinations()
        # brute recount with explicit loops
        expected = sum(1 for t1 in grid.t1_values for t2 in grid.t2_values
                       for _ in grid.b0_values if t2 <= t1)
        assert len(combos) == expected
        assert np.all(combos[:, 1] <= combos[:, 0])

    def test_range_triples(self):
        grid = ParameterGrid(t1_values=[(100, 300, 100)],
                             t2_values=[(20, 60, 20)],
                             b0_values=[(-10, 10, 10)])
        np.testing.assert_allclose(grid.t1_values, [100, 200, 300])
        np.testing.assert_allclose(grid.t2_values, [20, 40, 60])
        np.testing.assert_allclose(grid.b0_values, [-10, 0, 10])

    def test_not_increasing_rejected(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            ParameterGrid([100.0, 100.0], [20.0], [0.0])

    def test_nonpositive_relaxation_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            ParameterGrid([100.0], [-5.0, 20.0], [0.0])


class TestGenerateFingerprints:
    def test_unit_norms(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=64)
        np.testing.assert_allclose(np.linalg.norm(d.atoms, axis=1), 1.0,
                                   atol=1e-12)
        assert len(d.norms) == d.d
        assert d.lookup_table.shape == (d.d, 3)

    def test_t1_infinity_limit(self):
        # with the inversion term saturated at -1 the magnitude envelope is
        # the pure T2 decay
        grid = ParameterGrid([1e12], [80.0], [25.0])
        d = generate_fingerprints(grid, tr_ms=10.0, L=32)
        t = np.arange(1, 33)
        expected = np.exp(-t * 10.0 / 80.0)
        np.testing.assert_allclose(np.abs(d.atoms[0]) * d.norms[0], expected,
                                   atol=1e-6)

    def test_b0_zero_real(self):
        grid = ParameterGrid([500.0], [80.0], [0.0])
        d = generate_fingerprints(grid, tr_ms=10.0, L=32)
        assert np.max(np.abs(d.atoms.imag)) < 1e-12

    def test_distinct_triples_distinct_atoms(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=64)
        gram = np.abs(d.atoms @ d.atoms.conj().T)
        off = gram - np.eye(d.d)
        assert np.max(off) < 1.0 - 1e-9

    def test_invalid_inputs(self):
        with pytest.raises(ValueError, match="TR"):
            generate_fingerprints(small_grid(), tr_ms=0.0, L=32)
        with pytest.raises(ValueError, match="length"):
            generate_fingerprints(small_grid(), tr_ms=10.0, L=1)
        with pytest.raises(ValueError, match="degenerate"):
            generate_fingerprints(ParameterGrid([50.0], [200.0], [0.0]),
                                  tr_ms=10.0, L=32)

    def test_reference_grid_count(self):
        # full relaxation/off-resonance quantization grid; the filtered
        # atom count must match an independent loop-based recount
        grid = ParameterGrid(
            t1_values=[(100, 2000, 40), (2200, 6000, 200)],
            t2_values=[(20, 100, 2), (110, 200, 4), (220, 600, 20)],
            b0_values=[(-250, -190, 40), (-50, 50, 2), (190, 250, 40)])
        assert len(grid.t1_values) == 68
        assert len(grid.t2_values) == 84
        assert len(grid.b0_values) == 55
        d = generate_fingerprints(grid, tr_ms=10.0, L=8)
        expected = 0
        for t1 in grid.t1_values:
            for t2 in grid.t2_values:
                if t2 <= t1:
                    expected += len(grid.b0_values)
        assert d.d == expected
        assert d.d <= 313728


class TestSvdCompress:
    def test_full_basis_exact(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=24)
        c = svd_compress(d, s=d.L)
        assert c.residual() < 1e-10
        recon = c.decompress(c.atoms_compressed * c.renorm_factors[:, None])
        np.testing.assert_allclose(recon, d.atoms, atol=1e-10)

    def test_rank_two_exact(self):
        rng = np.random.default_rng(20)
        u = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        v = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        coeffs = rng.standard_normal((30, 2))
        raw = coeffs[:, 0:1] * u + coeffs[:, 1:2] * v
        norms = np.linalg.norm(raw, axis=1)
        d = Dictionary(atoms=raw / norms[:, None], norms=norms,
                       lookup_table=np.zeros((30, 3)), tr_ms=10.0, L=16)
        c = svd_compress(d, s=2)
        assert c.residual() < 1e-10

    def test_residual_matches_tail_energy(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=40)
        c = svd_compress(d, s=5)
        sv = np.linalg.svd(d.atoms, compute_uv=False)
        tail = float(np.sum(sv[5:] ** 2))
        assert c.residual() == pytest.approx(tail, rel=1e-8)

    def test_residual_monotone_in_s(self):
        grid = ParameterGrid(t1_values=[(200, 2000, 200)],
                             t2_values=[(30, 190, 20)],
                             b0_values=[(-40, 40, 20)])
        d = generate_fingerprints(grid, tr_ms=10.0, L=60)
        res = [svd_compress(d, s).residual() for s in (5, 10, 20, 50)]
        assert all(a >= b - 1e-12 for a, b in zip(res, res[1:]))

    def test_basis_orthonormal_and_atoms_unit(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=24)
        c = svd_compress(d, s=6)
        gram = c.basis.conj().T @ c.basis
        np.testing.assert_allclose(gram, np.eye(6), atol=1e-10)
        np.testing.assert_allclose(
            np.linalg.norm(c.atoms_compressed, axis=1), 1.0, atol=1e-12)

    def test_bad_s(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=24)
        with pytest.raises(ValueError):
            svd_compress(d, 0)
        with pytest.raises(ValueError):
            svd_compress(d, 25)


class TestLookup:
    def test_first_combination(self):
        grid = small_grid()
        d = generate_fingerprints(grid, tr_ms=10.0, L=32)
        assert d.lookup(0) == tuple(grid.combinations()[0])

    def test_round_trip_regenerates_atom(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=32)
        for j in range(d.d):
            raw = fingerprint_trajectories(np.array([d.lookup(j)]),
                                           d.tr_ms, d.L)[0]
            np.testing.assert_allclose(raw / np.linalg.norm(raw),
                                       d.atoms[j], atol=1e-12)

    def test_bijection(self):
        grid = small_grid()
        d = generate_fingerprints(grid, tr_ms=10.0, L=32)
        seen = {d.lookup(j) for j in range(d.d)}
        expected = {tuple(row) for row in grid.combinations()}
        assert seen == expected
        assert len(seen) == d.d

    def test_out_of_range(self):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=32)
        with pytest.raises(IndexError):
            d.lookup(d.d)
        with pytest.raises(IndexError):
            d.lookup(-1)


class TestSerialization:
    def test_round_trip_byte_identical(self, tmp_path):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=32)
        path = tmp_path / "dict.bin"
        save_dictionary(d, path)
        d2 = load_dictionary(path)
        assert d2.atoms.tobytes() == d.atoms.tobytes()
        assert d2.norms.tobytes() == d.norms.tobytes()
        assert d2.lookup_table.tobytes() == d.lookup_table.tobytes()
        assert d2.tr_ms == d.tr_ms and d2.L == d.L

    def test_truncated_file(self, tmp_path):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=32)
        path = tmp_path / "dict.bin"
        save_dictionary(d, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ValueError, match="truncated"):
            load_dictionary(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"not a dictionary at all")
        with pytest.raises(ValueError, match="not a dictionary"):
            load_dictionary(path)

    def test_loaded_dictionary_same_nns(self, tmp_path):
        from coverblip.covertree import build
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=32)
        path = tmp_path / "dict.bin"
        save_dictionary(d, path)
        d2 = load_dictionary(path)
        t1, t2 = build(d.atoms), build(d2.atoms)
        rng = np.random.default_rng(21)
        for _ in range(20):
            q = rng.standard_normal(32) + 1j * rng.standard_normal(32)
            r1, r2 = t1.ann_search(q, 0.0), t2.ann_search(q, 0.0)
            assert r1.index == r2.index and r1.distance == r2.distance

    def test_export_lookup_csv(self, tmp_path):
        d = generate_fingerprints(small_grid(), tr_ms=10.0, L=32)
        path = tmp_path / "lookup.csv"
        d.export_lookup_csv(path)
        loaded = np.loadtxt(path, delimiter=",", skiprows=1)
        np.testing.assert_allclose(loaded, d.lookup_table)
