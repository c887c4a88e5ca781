import numpy as np
import pytest

from lidarchange.augment import (ObjectDatabase, ObjectSnapshot, extract_objects,
                                 generate_pair, insert_object, load_database,
                                 place_points, save_database)
from lidarchange.errors import (CollisionRejectedError, InvalidInputError,
                                InvalidParameterError, PlacementRejectedError)
from lidarchange.geometry import PointCloud
from lidarchange.io import Session
from lidarchange.mapping import GroundModel
from lidarchange.rng import make_rng

from helpers import box_points, make_session

FLAT = GroundModel(np.array([0.0, 0.0, 1.0]), 0.0)


class TestExtractObjects:
    def test_snapshot_structure(self):
        session, iids = make_session()
        db = extract_objects(session, iids)
        assert db.count == 2 and db.ids() == [0, 1]
        for k in (0, 1):
            snaps = db.objects[k]
            assert [s.frame_index for s in snaps] == [0, 1, 2]

    def test_global_frame(self):
        # snapshots must land at the same world position from every pose
        session, iids = make_session()
        db = extract_objects(session, iids)
        ref = db.objects[0][0].points.points
        for snap in db.objects[0][1:]:
            assert np.allclose(snap.points.points, ref, atol=1e-9)
        assert np.allclose(ref, box_points(2.0, 2.0), atol=1e-9)

    def test_footprints_contain_points(self):
        session, iids = make_session()
        db = extract_objects(session, iids)
        for k in db.ids():
            for s in db.objects[k]:
                xy = s.points.points[:, :2]
                assert xy[:, 0].min() >= s.footprint[0] - 1e-9
                assert xy[:, 1].max() <= s.footprint[3] + 1e-9

    def test_dynamic_points_removed(self):
        clean, iids = make_session()
        dyn, _ = make_session(with_dyn=True)
        db_c = extract_objects(clean, iids)
        db_d = extract_objects(dyn, iids)
        for f in range(3):
            n_c = len(db_c.objects[0][f].points)
            assert len(db_d.objects[0][f].points) == n_c - 5

    def test_fully_masked_object_warns(self):
        session, iids = make_session()
        n0 = len(box_points(2.0, 2.0))
        floor_n = len(session.scans[0][0]) - n0 - len(box_points(-2.0, -2.5))
        masks = []
        for _ in range(3):
            m = np.zeros(len(session.scans[0][0]), dtype=bool)
            m[floor_n: floor_n + n0] = True  # all of object 0
            masks.append(m)
        masked = Session(session.scans, masks)
        with pytest.warns(UserWarning, match="zero points"):
            db = extract_objects(masked, iids)
        assert db.ids() == [1]

    def test_length_mismatches(self):
        session, iids = make_session()
        with pytest.raises(InvalidInputError):
            extract_objects(session, iids[:2])
        with pytest.raises(InvalidInputError):
            extract_objects(session, [i[:-1] for i in iids])

    def test_union_points(self):
        session, iids = make_session()
        db = extract_objects(session, iids)
        per_frame = [len(s.points) for s in db.objects[1]]
        assert len(db.union_points(1)) == sum(per_frame)


class TestSnapshotValidation:
    def test_footprint_must_contain(self):
        pts = PointCloud([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
        with pytest.raises(InvalidInputError):
            ObjectSnapshot(pts, 0, 0, np.array([0.0, 0.0, 0.5, 0.5]))

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            ObjectSnapshot(PointCloud(np.empty((0, 3))), 0, 0, np.zeros(4))

    def test_database_sorts_frames(self):
        p = PointCloud([[0.0, 0.0, 0.0]])
        fp = np.array([0.0, 0.0, 0.0, 0.0])
        db = ObjectDatabase({3: [ObjectSnapshot(p, 3, 2, fp),
                                 ObjectSnapshot(p, 3, 0, fp)]})
        assert [s.frame_index for s in db.objects[3]] == [0, 2]


class TestPlacePoints:
    def test_pure_translation(self):
        pts = box_points(0.0, 0.0)
        out = place_points(pts, (3.0, -1.0, 0.0), FLAT)
        fp = out[:, :2]
        assert abs((fp[:, 0].min() + fp[:, 0].max()) / 2 - 3.0) < 1e-9
        assert abs((fp[:, 1].min() + fp[:, 1].max()) / 2 + 1.0) < 1e-9
        assert abs(out[:, 2].min()) < 1e-12           # snapped onto the plane
        assert np.allclose(out[:, 2] - out[:, 2].min(),
                           pts[:, 2] - pts[:, 2].min())

    def test_quarter_turn(self):
        pts = np.array([[1.0, 0.0, 0.3], [-1.0, 0.0, 0.3], [0.0, 0.5, 0.3]])
        out = place_points(pts, (0.0, 0.0, np.pi / 2), FLAT)
        # footprint centre is (0, 0.25); (x, y) - centre maps to (-y, x)
        ref = np.array([[0.25, 1.0, 0.0], [0.25, -1.0, 0.0], [-0.25, 0.0, 0.0]])
        assert np.allclose(out, ref, atol=1e-9)

    def test_sloped_ground_snap(self):
        slope = GroundModel(np.array([-0.1, 0.0, 1.0]) / np.sqrt(1.01), 0.0)
        out = place_points(box_points(0.0, 0.0), (2.0, 0.0, 0.0), slope)
        h = slope.height_of(out)
        assert abs(h.min()) < 1e-9 and h.max() > 0.0


class TestInsertObject:
    def test_labels_and_rows(self):
        target = PointCloud(np.zeros((3, 3)), visibility=[0, 0, 0])
        obj = box_points(0.0, 0.0)
        out = insert_object(target, obj, (1.0, 1.0, 0.0), FLAT, label=2)
        assert len(out) == 3 + len(obj)
        assert (out.labels[:3] == 0).all() and (out.labels[3:] == 2).all()
        assert (out.visibility == 0).all()

    def test_placement_needs_ground(self):
        gxy = np.array([[0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(PlacementRejectedError):
            insert_object(PointCloud(np.zeros((1, 3))), box_points(0, 0),
                          (5.0, 5.0, 0.0), FLAT, 1, ground_xy=gxy)

    def test_collision_rejected(self):
        reserved = [np.array([0.5, 0.5, 1.5, 1.5])]
        with pytest.raises(CollisionRejectedError):
            insert_object(PointCloud(np.zeros((1, 3))), box_points(0, 0),
                          (1.0, 1.0, 0.0), FLAT, 1, reserved=reserved)
        # far enough away is fine
        out = insert_object(PointCloud(np.zeros((1, 3))), box_points(0, 0),
                            (5.0, 5.0, 0.0), FLAT, 1, reserved=reserved)
        assert len(out) > 1

    def test_bad_object_points(self):
        with pytest.raises(InvalidInputError):
            insert_object(PointCloud(np.zeros((1, 3))), np.empty((0, 3)),
                          (0, 0, 0), FLAT, 1)


class TestGeneratePair:
    def _pair(self, seed=11, keep_masked=False, with_dyn=False, n_pc=1, n_nc=1):
        session, iids = make_session(with_dyn=with_dyn)
        db = extract_objects(session, iids)
        return generate_pair(session, db, n_pc, n_nc, seed,
                             keep_masked=keep_masked), session, db

    def test_label_domains(self):
        pair, _, _ = self._pair()
        assert set(np.unique(pair.map.labels)) <= {0, 2}
        assert (pair.map.visibility == 0).all()
        assert len(pair.scans) == 3 and len(pair.poses) == 3
        for s in pair.scans:
            assert set(np.unique(s.labels)) <= {0, 1}
            assert (s.visibility == 1).all()
        assert not (set(pair.pc_ids) & set(pair.nc_ids))
        assert len(pair.pc_ids) == 1 and len(pair.nc_ids) == 1

    def test_nc_rows_are_the_union(self):
        pair, _, db = self._pair()
        n_nc = int((pair.map.labels == 2).sum())
        assert n_nc == len(db.union_points(pair.nc_ids[0]))

    def test_pc_rows_are_single_snapshots(self):
        pair, _, db = self._pair()
        sizes = {len(s.points) for s in db.objects[pair.pc_ids[0]]}
        for s in pair.scans:
            assert int((s.labels == 1).sum()) in sizes

    def test_placements_clear_of_sources(self):
        pair, _, db = self._pair()
        placed = pair.map.points[pair.map.labels == 2]
        fp = np.array([placed[:, 0].min(), placed[:, 1].min(),
                       placed[:, 0].max(), placed[:, 1].max()])
        for k in db.ids():
            for snap in db.objects[k]:
                o = snap.footprint
                sep_x = fp[2] + 0.1 <= o[0] or o[2] + 0.1 <= fp[0]
                sep_y = fp[3] + 0.1 <= o[1] or o[3] + 0.1 <= fp[1]
                assert sep_x or sep_y

    def test_inserted_points_touch_ground(self):
        pair, _, _ = self._pair()
        placed = pair.map.points[pair.map.labels == 2]
        h = pair.ground.height_of(placed)
        assert abs(h.min()) < 1e-6

    def test_same_placement_every_frame(self):
        pair, _, _ = self._pair()
        centres = []
        for s in pair.scans:
            p = s.points[s.labels == 1]
            centres.append([(p[:, 0].min() + p[:, 0].max()) / 2,
                            (p[:, 1].min() + p[:, 1].max()) / 2])
        assert np.allclose(centres, centres[0], atol=1e-6)

    def test_deterministic(self):
        a, _, _ = self._pair(seed=5)
        b, _, _ = self._pair(seed=5)
        assert np.array_equal(a.map.points, b.map.points)
        assert np.array_equal(a.map.labels, b.map.labels)
        c, _, _ = self._pair(seed=6)
        diff = (a.pc_ids, a.nc_ids) != (c.pc_ids, c.nc_ids) or \
            not np.array_equal(a.map.points, c.map.points)
        assert diff

    def test_keep_masked_flags(self):
        pair, session, _ = self._pair(keep_masked=True, with_dyn=True)
        assert pair.map_hd is not None and pair.map_hd.shape == (len(pair.map),)
        assert pair.map_hd.sum() == 5 * 3          # 5 flagged points x 3 frames
        # flagged rows are never labeled as change
        assert (pair.map.labels[pair.map_hd] == 0).all()
        for hd, s, (cloud, _, _), m in zip(pair.scan_hd, pair.scans,
                                           session.scans, session.dynamic_masks):
            assert hd.shape == (len(s),)
            assert hd.sum() == m.sum()
            assert not hd[len(cloud):].any()       # inserted rows never flagged

    def test_removed_when_not_keeping(self):
        pair, session, _ = self._pair(with_dyn=True)
        assert pair.map_hd is None and pair.scan_hd is None
        n_frame = len(session.scans[0][0])
        for s in pair.scans:
            n_inserted = int((s.labels == 1).sum())
            assert len(s) == n_frame - 5 + n_inserted

    def test_too_many_objects(self):
        session, iids = make_session()
        db = extract_objects(session, iids)
        with pytest.raises(InvalidParameterError):
            generate_pair(session, db, 2, 1, seed=0)


class TestDatabaseRoundtrip:
    def test_roundtrip(self, tmp_path):
        session, iids = make_session()
        db = extract_objects(session, iids)
        index = save_database(db, tmp_path)
        back = load_database(index)
        assert back.ids() == db.ids()
        for k in db.ids():
            for a, b in zip(db.objects[k], back.objects[k]):
                assert b.frame_index == a.frame_index
                assert np.array_equal(
                    b.points.points, a.points.points.astype(np.float32).astype(np.float64))
                assert np.allclose(b.footprint, a.footprint, atol=1e-6)

    def test_bad_index_line(self, tmp_path):
        p = tmp_path / "index.txt"
        p.write_text("0 0 missing.ply 0 0\n")
        with pytest.raises(InvalidInputError, match="7 fields"):
            load_database(p)
