"""Acceptance suite: one test per release criterion, each printing a
single pass/fail line on the terminal.

The suite trains reference models at desk scale, so it is far slower than
the unit-test modules (expect on the order of an hour on one CPU core).
"""

from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from rprloc import cli, pipeline
from rprloc.baselines import (
    AutoEncoderConfig,
    baseline_detect_organ,
    similarity,
    sliding_window_search,
    train_autoencoder,
    window_grid_count,
)
from rprloc.evalkit import awd, iou3d
from rprloc.locator import (
    PerfectProjectionStub,
    assemble_bbox,
    detect_organ,
    extract_extreme_points,
    mask_bbox,
)
from rprloc.pairsampler import ground_truth_offset
from rprloc.phantom import (
    PhantomSpec,
    case_entries,
    generate_dataset,
    load_case,
    load_manifest,
)
from rprloc.pnet import (
    DESK_FINE_RADIUS,
    DESK_PATCH_SHAPE,
    ProjectionModel,
    ProjectionNet,
    TrainConfig,
    batch_offset_loss,
    offset_loss,
    train_stage,
)
from rprloc.volgrid import BBox3D, Patch, crop_patch

# Reference desk-scale configuration: 64x96x96 phantoms at 2 mm spacing,
# 20/4/8 split, seed 0.
REFERENCE_SEED = 0
SPLITS = (20, 4, 8)
COARSE_TRAIN = dict(epochs=30, batch_size=6, pairs_per_epoch=960)
FINE_TRAIN = dict(epochs=30, batch_size=6, pairs_per_epoch=960)
EVAL_SEEDS = (0, 1, 2)


@contextmanager
def _criterion(capfd, num: int, label: str):
    """Print exactly one pass/fail line per criterion on the real terminal."""
    try:
        yield
    except BaseException:
        with capfd.disabled():
            print(f"[acceptance] criterion {num:2d} ({label}): FAIL")
        raise
    with capfd.disabled():
        print(f"[acceptance] criterion {num:2d} ({label}): PASS")


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance") / "dataset"
    generate_dataset(PhantomSpec(seed=REFERENCE_SEED), *SPLITS, out)
    return out


@pytest.fixture(scope="session")
def test_cases(dataset_dir):
    manifest = load_manifest(dataset_dir)
    entries = case_entries(manifest, "test")
    return [load_case(dataset_dir, e) for e in entries]


@pytest.fixture(scope="session")
def trained(dataset_dir):
    """Reference coarse + fine models with their loss logs and wall time."""
    volumes = pipeline.train_volumes(dataset_dir)
    diagonal = volumes[0].diagonal_mm
    t0 = time.perf_counter()
    mc, log_c = train_stage(
        TrainConfig(stage="coarse", r=diagonal, seed=REFERENCE_SEED, **COARSE_TRAIN),
        volumes,
    )
    mf, log_f = train_stage(
        TrainConfig(
            stage="fine", r=DESK_FINE_RADIUS, seed=REFERENCE_SEED, **FINE_TRAIN
        ),
        volumes,
    )
    wall = time.perf_counter() - t0
    return {"mc": mc, "mf": mf, "log_c": log_c, "log_f": log_f, "wall_s": wall}


@pytest.fixture(scope="session")
def trend_evals(trained, dataset_dir):
    """Test-split evaluations shared by the trend criteria.  The support
    case is pinned (support_seed) so only initializations vary per seed."""
    mc, mf = trained["mc"], trained["mf"]
    evals = {}
    evals["diagonal_K15"], _ = pipeline.evaluate_split(
        mc, mf, dataset_dir, strategy="diagonal", K=15, seed=0, support_seed=0
    )
    for seed in EVAL_SEEDS:
        for K in (1, 15):
            evals[f"extreme_K{K}_s{seed}"], _ = pipeline.evaluate_split(
                mc, mf, dataset_dir, strategy="extreme", K=K,
                seed=seed, support_seed=0,
            )
    evals["coarse_only_K15"], _ = pipeline.evaluate_split(
        mc, None, dataset_dir, strategy="extreme", K=15, seed=0, support_seed=0
    )
    return evals


def _mean(records, field):
    return float(np.mean([getattr(r, field) for r in records]))


def test_criterion_01_equation_oracles(capfd):
    with _criterion(capfd, 1, "equation oracles"):
        rng = np.random.default_rng(11)

        # Physical offset: (c_s - c_q) elementwise-scaled by the spacing,
        # recomputed per component with plain python arithmetic.
        c_q = rng.uniform(-100, 100, (100_000, 3))
        c_s = rng.uniform(-100, 100, (100_000, 3))
        e = rng.uniform(0.1, 5.0, (100_000, 3))
        got = np.stack(
            [ground_truth_offset(q, s, sp) for q, s, sp in zip(c_q, c_s, e)]
        )
        expected = np.empty_like(got)
        for axis in range(3):
            expected[:, axis] = c_s[:, axis] * e[:, axis] - c_q[:, axis] * e[:, axis]
        assert np.max(np.abs(got - expected)) <= 1e-9

        # Bounded offset head: strictly inside (-r, r) for 1e4 draws,
        # including saturating latent differences, plus real patch draws
        # through a micro model.
        torch.manual_seed(0)
        model = ProjectionModel(
            ProjectionNet(widths=(4, 8), fc_hidden=8),
            r=1.0,
            patch_shape=(4, 6, 6),
        )
        for _ in range(10_000):
            r = float(rng.uniform(0.5, 300.0))
            model.r = r
            p_q = rng.uniform(-50, 50, 3)
            p_s = rng.uniform(-50, 50, 3)
            offset = model.offset_from_latents(p_q, p_s)
            assert np.all(np.abs(offset) < r)
        model.r = 10.0
        spacing = np.array([1.0, 1.0, 1.0])
        for _ in range(20):
            data = rng.random((4, 6, 6))
            q = Patch(data=data, center=np.zeros(3), source_spacing=spacing)
            s = Patch(data=rng.random((4, 6, 6)), center=np.ones(3), source_spacing=spacing)
            assert np.all(np.abs(model.predict_offset(q, s)) < model.r)

        # Squared-error loss on rational inputs, exact.
        assert offset_loss([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]) == 14.0
        assert offset_loss([1.5, -2.5, 0.5], [0.5, 0.5, 0.5]) == 10.0
        assert offset_loss([0.25, 0.0, 0.0], [0.0, 0.0, 0.0]) == 0.0625
        batch = batch_offset_loss(
            torch.tensor([[1.0, 2.0, 2.0], [0.0, 3.0, 4.0]]),
            torch.zeros(2, 3),
        )
        assert float(batch) == 17.0


def test_criterion_02_gradient_check(capfd):
    with _criterion(capfd, 2, "gradient check"):
        torch.manual_seed(3)
        net = ProjectionNet(widths=(4, 8), fc_hidden=8).double()
        r = 15.0
        x = torch.randn(4, 1, 4, 6, 6, dtype=torch.float64)
        target = torch.randn(2, 3, dtype=torch.float64) * 5

        def loss_value():
            latents = net(x)
            pred = r * torch.tanh(latents[2:] - latents[:2])
            return batch_offset_loss(pred, target)

        loss = loss_value()
        loss.backward()

        rng = np.random.default_rng(4)
        eps = 1e-6
        checked = 0
        for param in net.parameters():
            flat = param.detach().view(-1)
            grad = param.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                with torch.no_grad():
                    orig = float(flat[idx])
                    flat[idx] = orig + eps
                    f_plus = float(loss_value())
                    flat[idx] = orig - eps
                    f_minus = float(loss_value())
                    flat[idx] = orig
                numeric = (f_plus - f_minus) / (2 * eps)
                analytic = float(grad[idx])
                rel = abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-4)
                assert rel <= 1e-3, (checked, analytic, numeric, rel)
                checked += 1
        assert checked >= 30


def test_criterion_03_stub_end_to_end(capfd, test_cases):
    with _criterion(capfd, 3, "stub end-to-end"):
        stub = PerfectProjectionStub(patch_shape=DESK_PATCH_SHAPE)
        assert len(test_cases) == 8
        for case in test_cases:
            for organ, mask in case.masks.items():
                rng = np.random.default_rng(17)
                box, _ = detect_organ(
                    stub, stub, case.volume, case.volume, mask,
                    strategy="extreme", K=1, rng=rng,
                )
                gt = mask_bbox(mask, case.volume.spacing)
                assert iou3d(box, gt) == 1.0, (case.provenance, organ)
                assert awd(box, gt) == 0.0


def test_criterion_04_geometry_oracle(capfd):
    with _criterion(capfd, 4, "geometry oracle"):
        rng = np.random.default_rng(23)
        for _ in range(500):
            shape = rng.integers(4, 13, 3)
            mask = rng.random(shape) < rng.uniform(0.05, 0.5)
            if not mask.any():
                mask[tuple(rng.integers(0, shape))] = True
            spacing = rng.uniform(0.5, 4.0, 3)
            box = assemble_bbox(extract_extreme_points(mask, spacing))
            voxels = np.argwhere(mask)
            lo = voxels.min(axis=0) * spacing
            hi = voxels.max(axis=0) * spacing
            assert np.array_equal(box.min_corner, lo)
            assert np.array_equal(box.max_corner, hi)


def _voxelized_iou(a: BBox3D, b: BBox3D, cell: float = 0.1) -> float:
    """Brute-force overlap count on a 0.1 mm voxel grid covering both
    boxes; membership tested at cell centers."""
    lo = np.minimum(a.min_corner, b.min_corner)
    hi = np.maximum(a.max_corner, b.max_corner)
    n = np.maximum(np.round((hi - lo) / cell).astype(int), 1)
    axes = [lo[d] + (np.arange(n[d]) + 0.5) * cell for d in range(3)]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij", sparse=True)

    def inside(box):
        return (
            (zz >= box.min_corner[0]) & (zz < box.max_corner[0])
            & (yy >= box.min_corner[1]) & (yy < box.max_corner[1])
            & (xx >= box.min_corner[2]) & (xx < box.max_corner[2])
        )

    in_a, in_b = inside(a), inside(b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def _random_box(rng, span=180, min_side=2) -> BBox3D:
    # Corners on the 0.1 mm grid so the voxelized overlap count is exact.
    lo = rng.integers(0, span, 3)
    hi = lo + rng.integers(min_side, 60, 3)
    return BBox3D(min_corner=lo * 0.1, max_corner=hi * 0.1)


def test_criterion_05_metric_oracles(capfd):
    with _criterion(capfd, 5, "metric oracles"):
        rng = np.random.default_rng(29)
        for _ in range(200):
            a, b = _random_box(rng), _random_box(rng)
            assert iou3d(a, b) == pytest.approx(_voxelized_iou(a, b), abs=1e-3)

        for _ in range(1000):
            a, b, c = (_random_box(rng) for _ in range(3))
            assert awd(a, b) == awd(b, a)
            shift = rng.uniform(-40, 40, 3)
            shifted = lambda box: BBox3D(
                min_corner=box.min_corner + shift, max_corner=box.max_corner + shift
            )
            assert awd(shifted(a), shifted(b)) == pytest.approx(awd(a, b), abs=1e-9)
            assert awd(a, c) <= awd(a, b) + awd(b, c) + 1e-9


def test_criterion_06_training_sanity(capfd, trained):
    with _criterion(capfd, 6, "training sanity"):
        for log in (trained["log_c"], trained["log_f"]):
            assert len(log) == 30
            first, final = log[0]["mean_loss"], log[-1]["mean_loss"]
            assert final <= 0.2 * first, (first, final, final / first)
        assert trained["wall_s"] < 3 * 3600


def test_criterion_07_strategy_and_ensemble_trend(capfd, trend_evals):
    with _criterion(capfd, 7, "strategy and ensemble trend"):
        extreme = _mean(trend_evals["extreme_K15_s0"], "iou")
        diagonal = _mean(trend_evals["diagonal_K15"], "iou")
        assert extreme >= diagonal, (extreme, diagonal)

        k1 = [_mean(trend_evals[f"extreme_K1_s{s}"], "iou") for s in EVAL_SEEDS]
        k15 = [_mean(trend_evals[f"extreme_K15_s{s}"], "iou") for s in EVAL_SEEDS]
        assert np.mean(k15) >= np.mean(k1) - 0.01, (k1, k15)
        assert np.std(k15) < np.std(k1), (k1, k15)


def test_criterion_08_coarse_to_fine_trend(capfd, trend_evals):
    with _criterion(capfd, 8, "coarse-to-fine trend"):
        cascade = trend_evals["extreme_K15_s0"]
        coarse_only = trend_evals["coarse_only_K15"]
        assert _mean(cascade, "iou") >= _mean(coarse_only, "iou")
        assert _mean(cascade, "awd") <= _mean(coarse_only, "awd") + 0.5


def _timed_partial_search(test_vol, patch, kind, stride, encoder, budget_s):
    """Lower-bound timing: evaluate stride-aligned windows with the same
    per-window computation as the exhaustive search, stopping once the
    spent time exceeds the budget.  Returns (elapsed, windows evaluated,
    exhausted)."""
    shape, pshape = np.array(test_vol.shape), np.array(patch.shape)
    data = test_vol.data.astype(np.float64)
    template = patch.data
    starts = [
        (z, y, x)
        for z in range(0, shape[0] - pshape[0] + 1, stride)
        for y in range(0, shape[1] - pshape[1] + 1, stride)
        for x in range(0, shape[2] - pshape[2] + 1, stride)
    ]
    t0 = time.perf_counter()
    done = 0
    if encoder is None:
        for z, y, x in starts:
            w = data[z : z + pshape[0], y : y + pshape[1], x : x + pshape[2]]
            similarity(w, template, kind)
            done += 1
            if time.perf_counter() - t0 > budget_s:
                break
    else:
        base = {"fm_mse": "gs_mse", "fm_cosine": "gs_cosine"}[kind]
        support_latent = encoder.encode_array(template.astype(np.float64))
        for i in range(0, len(starts), 64):
            chunk = starts[i : i + 64]
            stack = np.stack(
                [
                    data[z : z + pshape[0], y : y + pshape[1], x : x + pshape[2]]
                    for z, y, x in chunk
                ]
            )
            latents = encoder.encode_batch(stack)
            for latent in latents:
                similarity(latent, support_latent, base)
            done += len(chunk)
            if time.perf_counter() - t0 > budget_s:
                break
    return time.perf_counter() - t0, done, done == len(starts)


def test_criterion_09_baseline_timing_and_planted_search(
    capfd, trained, autoencoder, test_cases
):
    with _criterion(capfd, 9, "baseline timing and planted search"):
        case = test_cases[0]
        assert case.volume.shape == (64, 96, 96)
        organ = sorted(case.masks)[0]

        # Planted-patch search: an exact copy of the support patch must be
        # found at its own (stride-aligned) center with gs_mse score 0.
        planted_center = np.array([24.0, 40.0, 48.0])
        patch = crop_patch(case.volume, planted_center, DESK_PATCH_SHAPE)
        result = sliding_window_search(case.volume, patch, "gs_mse", stride=2)
        assert np.array_equal(result.best_center, planted_center)
        assert result.best_score == 0.0

        # Per-organ wall time of the regression pipeline (default
        # inference configuration, K = 15).
        rng = np.random.default_rng(31)
        t0 = time.perf_counter()
        detect_organ(
            trained["mc"], trained["mf"], case.volume, case.volume,
            case.masks[organ], strategy="extreme", K=15, rng=rng,
        )
        ours_s = time.perf_counter() - t0
        threshold = 100.0 * ours_s

        # Every sliding-window baseline, per organ = six independent
        # searches.  gs_mse is measured end-to-end; the remaining kinds are
        # measured until their partial cost alone exceeds the threshold
        # (a strict lower bound on the full per-organ cost).
        per_point = window_grid_count(case.volume.shape, DESK_PATCH_SHAPE, 2)
        ratios = {}
        _, gs_mse_s, windows = baseline_detect_organ(
            case.volume, case.volume, case.masks[organ], "gs_mse", stride=2
        )
        assert windows == 6 * per_point
        ratios["gs_mse"] = gs_mse_s / ours_s
        for kind in ("gs_cosine", "gs_ncc", "fm_mse", "fm_cosine"):
            support_patch = crop_patch(
                case.volume, planted_center, DESK_PATCH_SHAPE
            )
            encoder = autoencoder if kind.startswith("fm") else None
            elapsed, done, exhausted = _timed_partial_search(
                case.volume, support_patch, kind, 2, encoder, threshold * 1.05
            )
            if exhausted:
                # full single-point scan finished inside the budget;
                # per-organ cost is six of these
                ratios[kind] = 6 * elapsed / ours_s
            else:
                ratios[kind] = np.inf  # partial cost alone exceeded 100x
        failing = {k: round(v, 1) for k, v in ratios.items() if v < 100.0}
        assert not failing, (
            f"per-organ wall-time ratio below 100x (ours {ours_s:.2f} s): {failing}"
        )


@pytest.fixture(scope="session")
def autoencoder(dataset_dir):
    model, _ = train_autoencoder(
        AutoEncoderConfig(epochs=10, patches_per_epoch=96, seed=REFERENCE_SEED),
        pipeline.train_volumes(dataset_dir),
    )
    return model


MICRO_REPRO_CONFIG = {
    "seed": 5,
    "phantom": {"n_train": 2, "n_val": 1, "n_test": 2, "grid_shape": [24, 32, 32]},
    "train": {
        "coarse": {"epochs": 2, "batch_size": 4, "pairs_per_epoch": 8},
        "fine": {"epochs": 2, "batch_size": 4, "pairs_per_epoch": 8},
    },
    "inference": {"K": 2},
    "baselines": {"autoencoder": {"epochs": 2, "patches_per_epoch": 8}},
    "repro": {"table1_mre": [1, 2], "table2_steps": [1]},
}


def _csv_without_time_columns(path):
    import csv as csvmod

    with path.open() as fh:
        rows = list(csvmod.reader(fh))
    header = rows[0]
    keep = [i for i, name in enumerate(header) if "time" not in name.lower()]
    return [[row[i] for i in keep] for row in rows]


def test_criterion_10_repro_tables_determinism(capfd, tmp_path, monkeypatch):
    import json

    with _criterion(capfd, 10, "repro-tables determinism"):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(MICRO_REPRO_CONFIG))
        outputs = []
        for run in ("first", "second"):
            monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / run))
            code = cli.main(["repro-tables", "--config", str(cfg_path)])
            assert code == 0
            outputs.append(tmp_path / run / "rprloc_run" / "tables")
        csvs = sorted(p.name for p in outputs[0].glob("*.csv"))
        assert csvs  # at least table1/table2/table3
        for name in csvs:
            first = _csv_without_time_columns(outputs[0] / name)
            second = _csv_without_time_columns(outputs[1] / name)
            assert first == second, name
