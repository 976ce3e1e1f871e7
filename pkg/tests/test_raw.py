import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from rawnl.raw import (
    CFA_SITES, PackedRaw, RawFormatError, RawImage, RawMeta, denormalize, dihedral_transform,
    list_raw_dir, load_raw, normalize, pack, save_raw, unpack,
)

META = RawMeta("RGGB", 64.0, 1023.0, 100, "cam")


def tile(r=1.0, g1=2.0, g2=3.0, b=4.0):
    return np.array([[r, g1], [g2, b]])


class TestPack:
    def test_rggb(self):
        p = pack(RawImage(tile(), META))
        assert p.data.shape == (1, 4, 1, 1)
        assert p.data.reshape(-1).tolist() == [1, 2, 4, 3]

    def test_bggr_same_assignment(self):
        # the same scene values laid out in BGGR phase
        mosaic = np.array([[4.0, 3.0], [2.0, 1.0]])
        p = pack(RawImage(mosaic, RawMeta("BGGR", 0, 10)))
        assert p.data.reshape(-1).tolist() == [1, 2, 4, 3]

    @pytest.mark.parametrize("cfa", sorted(CFA_SITES))
    def test_sites_are_a_partition(self, cfa):
        assert sorted(CFA_SITES[cfa].values()) == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert set(CFA_SITES[cfa]) == {"R", "Gr", "B", "Gb"}

    @pytest.mark.parametrize("cfa", sorted(CFA_SITES))
    def test_greens_share_rows(self, cfa):
        s = CFA_SITES[cfa]
        assert s["Gr"][0] == s["R"][0] and s["Gb"][0] == s["B"][0]

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(sorted(CFA_SITES)), st.integers(1, 6), st.integers(1, 6), st.data())
    def test_round_trip_bit_exact(self, cfa, h, w, data):
        m = data.draw(hnp.arrays(np.float32, (2 * h, 2 * w), elements=st.floats(0, 16383, width=32)))
        raw = RawImage(m, RawMeta(cfa, 0, 16384))
        back = unpack(pack(raw))
        assert back.mosaic.tobytes() == m.tobytes()
        p = pack(raw).data
        assert sorted(p.reshape(-1).tolist()) == sorted(m.reshape(-1).tolist())

    def test_odd_rejected(self):
        with pytest.raises(RawFormatError):
            RawImage(np.zeros((3, 4)), META)

    def test_unknown_cfa(self):
        with pytest.raises(RawFormatError):
            RawMeta("RGBW", 0, 1)

    def test_accepts_4d_mosaic(self):
        assert RawImage(np.zeros((1, 1, 4, 6)), META).mosaic.shape == (4, 6)


class TestNormalize:
    def test_endpoints(self):
        p = PackedRaw(np.array([64.0, 1023.0, 543.5, 64.0]).reshape(1, 4, 1, 1), META)
        y = normalize(p).reshape(-1)
        assert y[0] == 0 and y[1] == 1
        assert y[2] == pytest.approx(0.5)

    def test_not_clamped(self):
        y = normalize(PackedRaw(np.full((1, 4, 1, 1), 50.0), META))
        assert np.all(y < 0)

    def test_per_channel_black(self):
        meta = RawMeta("RGGB", (60, 62, 64, 66), 1000)
        y = normalize(PackedRaw(np.array([60.0, 62, 64, 66]).reshape(1, 4, 1, 1), meta))
        assert not y.any()

    def test_saturation_below_black(self):
        with pytest.raises(RawFormatError):
            RawMeta("RGGB", 1000, 1000)
        with pytest.raises(RawFormatError):
            RawMeta("RGGB", (0, 0, 2000, 0), 1000)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (1, 4, 3, 2), elements=st.floats(0, 16383)), st.floats(0, 2000))
    def test_round_trip(self, x, black):
        meta = RawMeta("GRBG", black, 16383.0)
        back = denormalize(normalize(PackedRaw(x, meta)), meta)
        assert np.max(np.abs(back - x)) <= 1e-4


def pattern():
    return np.arange(9, dtype=float).reshape(1, 1, 3, 3)


def find(x, imgs):
    return next(i for i, y in enumerate(imgs) if np.array_equal(x, y))


class TestDihedral:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
        np.testing.assert_array_equal(dihedral_transform(x, 0), x)

    def test_rot90_order_four(self):
        x = pattern()
        y = x
        for _ in range(4):
            y = dihedral_transform(y, 1)
        np.testing.assert_array_equal(y, x)

    def test_eight_distinct(self):
        imgs = [dihedral_transform(pattern(), g) for g in range(8)]
        for i, j in itertools.combinations(range(8), 2):
            assert not np.array_equal(imgs[i], imgs[j]), (i, j)

    def test_group_table(self):
        x = pattern()
        imgs = [dihedral_transform(x, g) for g in range(8)]
        table = np.array([[find(dihedral_transform(dihedral_transform(x, h), g), imgs) for h in range(8)]
                          for g in range(8)])
        # closure (find would raise), Latin square, identity row and column, inverses
        for row in table:
            assert sorted(row) == list(range(8))
        for col in table.T:
            assert sorted(col) == list(range(8))
        assert table[0].tolist() == list(range(8)) and table[:, 0].tolist() == list(range(8))
        assert all((table[g] == 0).sum() == 1 for g in range(8))
        # associativity
        for g, h, k in itertools.product(range(8), repeat=3):
            assert table[table[g, h], k] == table[g, table[h, k]]

    def test_flip_definition(self):
        x = pattern()
        np.testing.assert_array_equal(dihedral_transform(x, 4), x[..., ::-1])
        np.testing.assert_array_equal(dihedral_transform(x, 5), np.rot90(x, 1, axes=(2, 3))[..., ::-1])

    def test_channels_not_permuted(self):
        x = np.stack([np.full((3, 3), c, dtype=float) for c in range(4)])[None]
        for g in range(8):
            y = dihedral_transform(x, g)
            assert [y[0, c, 0, 0] for c in range(4)] == [0, 1, 2, 3]

    def test_non_square(self):
        x = np.zeros((1, 4, 2, 6))
        assert dihedral_transform(x, 1).shape == (1, 4, 6, 2)
        assert dihedral_transform(x, 6).shape == (1, 4, 2, 6)

    @pytest.mark.parametrize("g", [-1, 8, 1.0])
    def test_out_of_range(self, g):
        with pytest.raises(ValueError):
            dihedral_transform(pattern(), g)


class TestFiles:
    def test_round_trip(self, tmp_path):
        m = np.random.default_rng(0).integers(0, 1024, (4, 6)).astype(np.float32)
        raw = RawImage(m, RawMeta("GBRG", (60, 61, 62, 63), 1023.0, 800, "cam"))
        save_raw(tmp_path / "a.ntf", raw)
        side = json.loads((tmp_path / "a.json").read_text())
        assert set(side) == {"cfa", "black_level", "saturation", "iso", "sensor_id"}
        back = load_raw(tmp_path / "a.ntf")
        assert back.meta == raw.meta
        assert back.mosaic.tobytes() == m.tobytes()

    def test_missing_sidecar(self, tmp_path):
        save_raw(tmp_path / "a.ntf", RawImage(np.zeros((2, 2)), META))
        (tmp_path / "a.json").unlink()
        with pytest.raises(FileNotFoundError, match="a.json"):
            load_raw(tmp_path / "a.ntf")

    def test_list_dir(self, tmp_path):
        for n in ("b", "a"):
            save_raw(tmp_path / f"{n}.ntf", RawImage(np.zeros((2, 2)), META))
        (tmp_path / "orphan.ntf").write_bytes(b"")
        assert [p.name for p in list_raw_dir(tmp_path)] == ["a.ntf", "b.ntf"]
