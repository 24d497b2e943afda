"""Generator, split and on-disk format contracts."""

import json
from pathlib import Path

import numpy as np
import pytest

from infodpcca.data import (HenonParams, SequencePairDataset, SplitSpec,
                            generate_grouped, generate_henon, henon_step,
                            read_dataset, split, write_dataset)
from infodpcca.errors import DivergentOrbit, FormatError, InvalidSplit

SMALL = HenonParams(t_len=40, n_seq=6, dx=5, dy=4, noise_std=0.05, seed=11)


def _orbit_oracle(x0, y0, a, b, n):
    """Independent iteration of the map in plain python."""
    out = []
    x, y = x0, y0
    for _ in range(n):
        out.append((x, y))
        x, y = 1.0 - a * x * x + y, b * x
    return np.asarray(out)


class TestHenonStep:
    def test_direct_substitution(self):
        assert henon_step((0.0, 0.0), 1.4, 0.3) == (1.0, 0.0)
        x, y = henon_step((1.0, 0.0), 1.4, 0.3)
        assert x == pytest.approx(-0.4, abs=1e-15)
        assert y == pytest.approx(0.3, abs=1e-15)

    def test_long_orbit_stays_on_attractor(self):
        orbit = _orbit_oracle(0.1, 0.0, 1.4, 0.3, 1000)
        assert np.abs(orbit[:, 0]).max() < 1.5
        assert np.abs(orbit[:, 1]).max() < 0.45
        # step function agrees with the oracle along the orbit
        state = (0.1, 0.0)
        for t in range(100):
            assert state == pytest.approx(tuple(orbit[t]), abs=0)
            state = henon_step(state, 1.4, 0.3)


class TestGenerateHenon:
    def test_default_params_mirror_reference_setup(self):
        p = HenonParams()
        assert (p.a, p.b, p.t_len, p.n_seq) == (1.4, 0.3, 300, 1000)
        assert (p.dx, p.dy, p.noise_std) == (120, 120, 0.05)
        assert p.init_x_range == (-1.0, 1.0)
        assert p.init_y_range == (-0.1, 0.1)

    @pytest.mark.slow
    def test_reference_scale_shapes(self):
        ds = generate_henon(HenonParams(seed=7))
        assert ds.x1.shape == (1000, 300, 120)
        assert ds.x2.shape == (1000, 300, 120)
        assert ds.z_true.shape == (1000, 300, 2)
        del ds

    def test_small_shapes_and_finite(self):
        ds = generate_henon(SMALL)
        assert ds.x1.shape == (6, 40, 5)
        assert ds.x2.shape == (6, 40, 4)
        assert ds.z_true.shape == (6, 40, 2)
        assert np.isfinite(ds.x1).all() and np.isfinite(ds.x2).all()

    def test_zero_noise_latents_explain_everything(self):
        ds = generate_henon(HenonParams(t_len=60, n_seq=4, dx=6, dy=3,
                                        noise_std=0.0, seed=3))
        z = ds.z_true.reshape(-1, 2).astype(np.float64)
        x = ds.x1.reshape(-1, 6).astype(np.float64)
        w, *_ = np.linalg.lstsq(z, x, rcond=None)
        resid = np.linalg.norm(x - z @ w) / np.linalg.norm(x)
        assert resid < 1e-5

    def test_deterministic_bytes(self, tmp_path):
        for sub in ("a", "b"):
            write_dataset(generate_henon(SMALL), tmp_path / sub)
        for f in ("meta.json", "x1.bin", "x2.bin", "z.bin"):
            assert (tmp_path / "a" / f).read_bytes() == \
                (tmp_path / "b" / f).read_bytes(), f

    def test_threads_match_serial(self):
        a = generate_henon(SMALL, threads=1)
        b = generate_henon(SMALL, threads=3)
        np.testing.assert_array_equal(a.x1, b.x1)
        np.testing.assert_array_equal(a.x2, b.x2)
        np.testing.assert_array_equal(a.z_true, b.z_true)

    def test_divergent_orbit_exhausts_retries(self):
        bad = HenonParams(a=5.0, t_len=30, n_seq=1, dx=2, dy=2,
                          init_x_range=(3.0, 4.0), seed=0)
        with pytest.raises(DivergentOrbit):
            generate_henon(bad)

    def test_projections_recorded_in_meta(self):
        ds = generate_henon(SMALL)
        w_x = np.asarray(ds.meta["w_x"])
        assert w_x.shape == (SMALL.dx, 2)


class TestGenerateGrouped:
    def test_construction(self):
        pa = HenonParams(a=1.4, t_len=30, n_seq=1, dx=4, dy=4, seed=0)
        pb = HenonParams(a=1.2, t_len=30, n_seq=1, dx=4, dy=4, seed=0)
        ds = generate_grouped(pa, pb, n_per_group=5, seed=21)
        assert ds.n_seq == 10
        assert ds.labels.sum() == 5
        assert ds.meta["has_labels"]

    def test_shared_dims_required(self):
        pa = HenonParams(t_len=30, dx=4, dy=4)
        pb = HenonParams(t_len=31, dx=4, dy=4)
        with pytest.raises(ValueError):
            generate_grouped(pa, pb, 3, seed=0)

    def test_regimes_differ_in_latent_variance(self):
        pa = HenonParams(a=1.4, t_len=200, n_seq=1, dx=2, dy=2, seed=0)
        pb = HenonParams(a=1.2, t_len=200, n_seq=1, dx=2, dy=2, seed=0)
        ds = generate_grouped(pa, pb, n_per_group=20, seed=5)
        za = ds.z_true[ds.labels == 0][..., 0]
        zb = ds.z_true[ds.labels == 1][..., 0]
        # oracle: long orbits of each regime iterated independently
        oa = _orbit_oracle(0.1, 0.0, 1.4, 0.3, 20_000)[1000:, 0]
        ob = _orbit_oracle(0.1, 0.0, 1.2, 0.3, 20_000)[1000:, 0]
        assert abs(za.var() - oa.var()) < 0.05
        assert abs(zb.var() - ob.var()) < 0.05
        assert abs(za.var() - zb.var()) > 0.02


class TestSplit:
    def test_sizes(self):
        ds = generate_henon(HenonParams(t_len=20, n_seq=10, dx=3, dy=3, seed=1))
        tr, te = split(ds, SplitSpec(0.8, seed=4))
        assert tr.n_seq == 8 and te.n_seq == 2

    def test_deterministic_partition(self):
        ds = generate_henon(HenonParams(t_len=20, n_seq=10, dx=3, dy=3, seed=1))
        a = split(ds, SplitSpec(0.7, seed=9))
        b = split(ds, SplitSpec(0.7, seed=9))
        assert a[0].meta["split"]["indices"] == b[0].meta["split"]["indices"]
        np.testing.assert_array_equal(a[1].x1, b[1].x1)

    def test_partition_property(self):
        ds = generate_henon(HenonParams(t_len=20, n_seq=9, dx=3, dy=3, seed=1))
        tr, te = split(ds, SplitSpec(0.5, seed=2))
        idx = tr.meta["split"]["indices"] + te.meta["split"]["indices"]
        assert sorted(idx) == list(range(9))

    def test_empty_side_rejected(self):
        ds = generate_henon(HenonParams(t_len=20, n_seq=3, dx=3, dy=3, seed=1))
        with pytest.raises(InvalidSplit):
            split(ds, SplitSpec(0.1, seed=0))


class TestDiskFormat:
    def test_round_trip_bitwise(self, tmp_path):
        ds = generate_grouped(
            HenonParams(a=1.4, t_len=25, dx=3, dy=2, seed=0),
            HenonParams(a=1.2, t_len=25, dx=3, dy=2, seed=0), 4, seed=13)
        write_dataset(ds, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        np.testing.assert_array_equal(ds.x1, back.x1)
        np.testing.assert_array_equal(ds.x2, back.x2)
        np.testing.assert_array_equal(ds.z_true, back.z_true)
        np.testing.assert_array_equal(ds.labels, back.labels)
        # idempotent re-write
        write_dataset(back, tmp_path / "e")
        for f in ("x1.bin", "x2.bin", "z.bin", "labels.bin"):
            assert (tmp_path / "d" / f).read_bytes() == (tmp_path / "e" / f).read_bytes()

    def test_truncated_tensor_names_offender(self, tmp_path):
        ds = generate_henon(SMALL)
        write_dataset(ds, tmp_path / "d")
        full = (tmp_path / "d" / "x1.bin").read_bytes()
        (tmp_path / "d" / "x1.bin").write_bytes(full[:-8])
        with pytest.raises(FormatError, match="x1"):
            read_dataset(tmp_path / "d")

    def test_meta_shape_mismatch_detected(self, tmp_path):
        ds = generate_henon(SMALL)
        write_dataset(ds, tmp_path / "d")
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        meta["dx"] = 120
        (tmp_path / "d" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(FormatError, match="x1"):
            read_dataset(tmp_path / "d")

    def test_missing_file(self, tmp_path):
        ds = generate_henon(SMALL)
        write_dataset(ds, tmp_path / "d")
        (tmp_path / "d" / "x2.bin").unlink()
        with pytest.raises(FormatError, match="x2"):
            read_dataset(tmp_path / "d")

    def test_bad_version(self, tmp_path):
        ds = generate_henon(SMALL)
        write_dataset(ds, tmp_path / "d")
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        meta["format_version"] = 99
        (tmp_path / "d" / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(FormatError, match="format_version"):
            read_dataset(tmp_path / "d")
