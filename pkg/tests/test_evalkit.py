import numpy as np
import pytest

from rprloc.evalkit import (
    EvalRecord,
    awd,
    evaluate_run,
    iou3d,
    render_table,
    summarize,
    write_records_csv,
    write_summary_csv,
)
from rprloc.volgrid import BBox3D


def box(lo, hi):
    return BBox3D(min_corner=np.asarray(lo, float), max_corner=np.asarray(hi, float))


def random_box(rng, scale=20.0):
    lo = rng.uniform(-scale, scale, 3)
    hi = lo + rng.uniform(0.1, scale, 3)
    return box(lo, hi)


class TestIou3d:
    def test_identical(self, rng):
        b = random_box(rng)
        assert iou3d(b, b) == 1.0

    def test_disjoint(self):
        assert iou3d(box((0, 0, 0), (1, 1, 1)), box((5, 5, 5), (6, 6, 6))) == 0.0

    def test_half_shifted_cubes_vs_voxelized_count(self):
        # [0,10]^3 vs [5,15]^3: overlap 125 / union 1875.  Cross-checked
        # against a brute-force overlap count on a 0.1 mm grid.
        a, b = box((0, 0, 0), (10, 10, 10)), box((5, 5, 5), (15, 15, 15))
        analytic = iou3d(a, b)
        assert analytic == pytest.approx(125 / 1875, abs=1e-9)

        centers = np.arange(0.05, 15.0, 0.1)
        za = (centers > 0) & (centers < 10)
        zb = (centers > 5) & (centers < 15)
        in_a = za[:, None, None] & za[None, :, None] & za[None, None, :]
        in_b = zb[:, None, None] & zb[None, :, None] & zb[None, None, :]
        voxelized = (in_a & in_b).sum() / (in_a | in_b).sum()
        assert analytic == pytest.approx(voxelized, abs=1e-6)

    def test_symmetry_and_range(self, rng):
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = iou3d(a, b)
            assert v == pytest.approx(iou3d(b, a))
            assert 0.0 <= v <= 1.0

    def test_joint_scaling_invariance(self, rng):
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            s = rng.uniform(0.5, 3.0)
            sa = box(a.min_corner * s, a.max_corner * s)
            sb = box(b.min_corner * s, b.max_corner * s)
            assert iou3d(a, b) == pytest.approx(iou3d(sa, sb), rel=1e-9)

    def test_zero_volume_rules(self):
        p = box((1, 2, 3), (1, 2, 3))
        q = box((1, 2, 4), (1, 2, 4))
        assert iou3d(p, p) == 1.0
        assert iou3d(p, q) == 0.0


class TestAwd:
    def test_identical(self, rng):
        b = random_box(rng)
        assert awd(b, b) == 0.0

    def test_face_offsets_mean(self):
        a = box((0, 0, 0), (10, 10, 10))
        b = box((1, 2, 3), (14, 15, 16))
        assert awd(a, b) == pytest.approx((1 + 2 + 3 + 4 + 5 + 6) / 6)

    def test_symmetry_and_translation_invariance(self, rng):
        for _ in range(1000):
            a, b = random_box(rng), random_box(rng)
            t = rng.uniform(-10, 10, 3)
            at = box(a.min_corner + t, a.max_corner + t)
            bt = box(b.min_corner + t, b.max_corner + t)
            assert awd(a, b) == pytest.approx(awd(b, a))
            assert awd(a, b) == pytest.approx(awd(at, bt), abs=1e-9)

    def test_triangle_bound(self, rng):
        for _ in range(500):
            a, b, c = (random_box(rng) for _ in range(3))
            assert awd(a, c) <= awd(a, b) + awd(b, c) + 1e-12


def test_eval_record_validation():
    with pytest.raises(ValueError):
        EvalRecord(method="m", organ="o", case_id="c", iou=1.2, awd=0.0)
    with pytest.raises(ValueError):
        EvalRecord(method="m", organ="o", case_id="c", iou=0.5, awd=-1.0)


def _cube_mask(lo, hi, shape=(10, 10, 10)):
    m = np.zeros(shape, dtype=bool)
    m[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
    return m


class TestEvaluateRun:
    spacing = np.array([2.0, 2.0, 2.0])

    def _gt(self):
        return {
            "case_a": {
                "organ1": (_cube_mask((1, 1, 1), (4, 4, 4)), self.spacing),
                "organ2": (_cube_mask((5, 5, 5), (8, 8, 8)), self.spacing),
            },
            "case_b": {
                "organ1": (_cube_mask((2, 2, 2), (6, 6, 6)), self.spacing),
            },
        }

    def test_perfect_predictions(self):
        gt = self._gt()
        preds = {
            case: {
                organ: box(
                    np.argwhere(mask).min(axis=0) * sp,
                    np.argwhere(mask).max(axis=0) * sp,
                )
                for organ, (mask, sp) in organs.items()
            }
            for case, organs in gt.items()
        }
        records, summary, flags = evaluate_run(preds, gt)
        assert flags == []
        assert all(r.iou == 1.0 and r.awd == 0.0 for r in records)
        assert summary["mean"]["iou"] == 1.0

    def test_missing_prediction_flagged_and_excluded(self):
        gt = self._gt()
        preds = {
            "case_a": {"organ1": box((2, 2, 2), (8, 8, 8))},
        }
        records, summary, flags = evaluate_run(preds, gt)
        assert len(records) == 1
        assert sorted(flags) == ["case_a/organ2", "case_b/organ1"]
        assert summary["mean"]["n"] == 1

    def test_summary_recomputation(self, rng):
        records = [
            EvalRecord(
                method="m",
                organ=rng.choice(["a", "b"]),
                case_id=f"c{i}",
                iou=float(rng.uniform(0, 1)),
                awd=float(rng.uniform(0, 5)),
            )
            for i in range(20)
        ]
        summary = summarize(records)
        for organ in ("a", "b"):
            rows = [r for r in records if r.organ == organ]
            assert summary[organ]["iou"] == pytest.approx(
                np.mean([r.iou for r in rows])
            )
            assert summary[organ]["awd"] == pytest.approx(
                np.mean([r.awd for r in rows])
            )
            assert summary[organ]["n"] == len(rows)
        assert summary["mean"]["iou"] == pytest.approx(
            np.mean([r.iou for r in records])
        )


def test_csv_round_trip(tmp_path):
    records = [
        EvalRecord(method="m", organ="o", case_id="c", iou=0.5, awd=1.25, time_s=0.1)
    ]
    rec_path = tmp_path / "records.csv"
    write_records_csv(records, rec_path)
    lines = rec_path.read_text().strip().splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("m,o,c,0.500000,1.250000")

    summary_path = tmp_path / "summary.csv"
    write_summary_csv({"m": summarize(records)}, summary_path, include_time=True)
    lines = summary_path.read_text().strip().splitlines()
    assert lines[0] == "method,organ,mean_iou,mean_awd,mean_time_s"
    assert len(lines) == 3  # organ row + mean row


def test_render_table_layout():
    records = [
        EvalRecord(method="ours", organ="stem", case_id="c", iou=0.8, awd=2.0),
        EvalRecord(method="ours", organ="keel", case_id="c", iou=0.6, awd=4.0),
    ]
    table = render_table({"ours": summarize(records)}, "results")
    assert "results" in table
    assert "ours" in table
    assert "80.0, 2.00" in table
    assert "keel" in table and "mean" in table
