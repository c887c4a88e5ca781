import numpy as np
import pytest

from lidarchange.errors import InvalidInputError
from lidarchange.geometry import PointCloud, Pose
from lidarchange.io import (Session, load_logodds, load_ply, load_session,
                            load_session_instances, save_logodds, save_ply,
                            save_session)
from lidarchange.rng import make_rng


def random_cloud(seed, n=50, attrs=True):
    rng = make_rng(seed)
    pts = rng.uniform(-10, 10, size=(n, 3))
    if not attrs:
        return PointCloud(pts)
    return PointCloud(pts, labels=rng.integers(0, 3, n),
                      visibility=rng.integers(0, 2, n),
                      confidences=rng.uniform(0, 1, n))


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class TestPly:
    @pytest.mark.parametrize("binary", [True, False])
    def test_roundtrip(self, tmp_path, binary):
        c = random_cloud(0)
        p = tmp_path / "c.ply"
        save_ply(c, p, binary=binary)
        r = load_ply(p)
        # storage is float32; compare against the cast, exactly
        assert np.array_equal(r.points, f32(c.points))
        assert np.array_equal(r.labels, c.labels)
        assert np.array_equal(r.visibility, c.visibility)
        assert np.array_equal(r.confidences, f32(c.confidences))

    def test_roundtrip_no_attrs(self, tmp_path):
        c = random_cloud(1, attrs=False)
        save_ply(c, tmp_path / "c.ply")
        r = load_ply(tmp_path / "c.ply")
        assert r.labels is None and r.visibility is None and r.confidences is None

    def test_resave_byte_identical(self, tmp_path):
        c = random_cloud(2)
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        save_ply(c, a)
        save_ply(load_ply(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_empty_cloud(self, tmp_path):
        save_ply(PointCloud(np.empty((0, 3))), tmp_path / "e.ply")
        assert len(load_ply(tmp_path / "e.ply")) == 0

    def test_foreign_layout(self, tmp_path):
        # double coords, shuffled property order, an extra ignored column
        body = "\n".join(["ply", "format ascii 1.0", "element vertex 2",
                          "property uchar label",
                          "property double x", "property double y",
                          "property float intensity",
                          "property double z",
                          "end_header",
                          "1 0.125 -2.5 9.9 0.75",
                          "0 3.0 4.0 0.1 -1.0"]) + "\n"
        p = tmp_path / "f.ply"
        p.write_bytes(body.encode())
        r = load_ply(p)
        assert np.array_equal(r.points, [[0.125, -2.5, 0.75], [3.0, 4.0, -1.0]])
        assert np.array_equal(r.labels, [1, 0])

    @pytest.mark.parametrize("header,msg", [
        ("not a ply at all", "end_header"),
        ("xyz\nformat ascii 1.0\nelement vertex 0\nend_header\n", "magic"),
        ("ply\nformat ascii 1.0\nelement vertex 1\n"
         "property list uchar int idx\nend_header\n0\n", "list"),
        ("ply\nformat ascii 1.0\nelement vertex 1\n"
         "property int64 x\nend_header\n0\n", "type"),
        ("ply\nformat big_endian 1.0\nelement vertex 0\nend_header\n", "format"),
        ("ply\nformat ascii 1.0\nelement vertex 1\n"
         "property float x\nproperty float y\nend_header\n0 0\n", "coordinate"),
        ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
         "property float y\nproperty float z\nend_header\n0 0 0\n", "ascii"),
    ])
    def test_malformed(self, tmp_path, header, msg):
        p = tmp_path / "bad.ply"
        p.write_bytes(header.encode())
        with pytest.raises(InvalidInputError, match=msg):
            load_ply(p)


class TestSession:
    def _session(self, seed=0, n_scans=3, with_masks=True):
        rng = make_rng(seed)
        scans, masks = [], []
        for i in range(n_scans):
            c = random_cloud(seed * 10 + i, n=20 + i)
            yaw = rng.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(yaw), -np.sin(yaw), 0],
                            [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1]])
            scans.append((c, Pose(rot, rng.normal(size=3)), float(i) * 0.1))
            masks.append(rng.uniform(size=len(c)) < 0.2 if with_masks else None)
        return Session(scans, masks if with_masks else None)

    def test_timestamps_strictly_increasing(self):
        c = random_cloud(0, n=3)
        with pytest.raises(InvalidInputError):
            Session([(c, Pose.identity(), 0.0), (c, Pose.identity(), 0.0)])
        with pytest.raises(InvalidInputError):
            Session([(c, Pose.identity(), 1.0), (c, Pose.identity(), 0.5)])

    def test_mask_validation(self):
        c = random_cloud(0, n=3)
        with pytest.raises(InvalidInputError):
            Session([(c, Pose.identity(), 0.0)], [np.zeros(2, dtype=bool)])
        with pytest.raises(InvalidInputError):
            Session([(c, Pose.identity(), 0.0)], [])

    def test_roundtrip(self, tmp_path):
        s = self._session()
        manifest = save_session(s, tmp_path)
        r = load_session(manifest)
        assert len(r) == len(s)
        for (ca, pa, ta), (cb, pb, tb) in zip(s.scans, r.scans):
            assert np.array_equal(cb.points, f32(ca.points))
            assert np.array_equal(cb.labels, ca.labels)
            # %.17g round-trips doubles exactly
            assert np.array_equal(pb.matrix34(), pa.matrix34())
            assert tb == ta
        for ma, mb in zip(s.dynamic_masks, r.dynamic_masks):
            assert np.array_equal(mb, ma)

    def test_roundtrip_without_masks(self, tmp_path):
        s = self._session(seed=1, with_masks=False)
        r = load_session(save_session(s, tmp_path))
        assert all(m is None for m in r.dynamic_masks)

    def test_save_deterministic(self, tmp_path):
        s = self._session(seed=2)
        da, db = tmp_path / "a", tmp_path / "b"
        save_session(s, da)
        save_session(s, db)
        for fa in sorted(da.iterdir()):
            assert fa.read_bytes() == (db / fa.name).read_bytes()

    def test_comments_and_blanks_skipped(self, tmp_path):
        s = self._session(seed=3, n_scans=1, with_masks=False)
        manifest = save_session(s, tmp_path)
        body = open(manifest).read()
        with open(manifest, "w") as f:
            f.write("# header comment\n\n" + body)
        assert len(load_session(manifest)) == 1

    def test_bad_field_count(self, tmp_path):
        p = tmp_path / "manifest.txt"
        p.write_text("scan000.ply 1 2 3\n")
        with pytest.raises(InvalidInputError, match="fields"):
            load_session(p)

    def test_mask_length_mismatch(self, tmp_path):
        s = self._session(seed=4, n_scans=1)
        manifest = save_session(s, tmp_path)
        (tmp_path / "scan000.mask").write_bytes(b"\x00")
        with pytest.raises(InvalidInputError, match="mask"):
            load_session(manifest)

    def test_instance_sidecars(self, tmp_path):
        s = self._session(seed=5, n_scans=2, with_masks=False)
        iids = [np.arange(len(c), dtype=np.uint32) + 7 for c, _, _ in s.scans]
        manifest = save_session(s, tmp_path, instance_ids=iids)
        back = load_session_instances(manifest)
        assert len(back) == 2
        assert all(np.array_equal(a, b) for a, b in zip(back, iids))

    def test_missing_sidecars_give_none(self, tmp_path):
        s = self._session(seed=6, n_scans=2, with_masks=False)
        manifest = save_session(s, tmp_path)
        assert load_session_instances(manifest) == [None, None]


class TestLogodds:
    def test_roundtrip(self, tmp_path):
        state = make_rng(0).normal(size=(40, 3)) * 5
        p = tmp_path / "s.lo"
        save_logodds(state, p)
        r = load_logodds(p, n_points=40)
        assert np.array_equal(r, f32(state))

    def test_shape_validation(self, tmp_path):
        with pytest.raises(InvalidInputError):
            save_logodds(np.zeros((4, 2)), tmp_path / "x")

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "t.lo"
        p.write_bytes(b"\x00" * 16)  # 4 floats, not a multiple of 3
        with pytest.raises(InvalidInputError):
            load_logodds(p)

    def test_count_mismatch(self, tmp_path):
        p = tmp_path / "c.lo"
        save_logodds(np.zeros((5, 3)), p)
        with pytest.raises(InvalidInputError):
            load_logodds(p, n_points=6)
