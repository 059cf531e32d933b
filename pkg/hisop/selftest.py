"""Headless acceptance checks with brute-force oracles.

Each check returns (passed, detail). run_selftest prints one line per check
and a final count.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path
from typing import Callable, Final

import numpy as np

from hisop.alignment import (
    GroupContext,
    PatternAffinity,
    RefineParams,
    TapSet,
    affinity_deformable_sample,
    identity_kernels,
    multigroup_context,
    multilevel_refine,
    pattern_affinity,
)
from hisop.compose import (
    SemanticVoxelGrid,
    UnifiedGridSpec,
    confusion_matrix,
    evaluate,
    voxel_pool,
    zero_gated_compose,
)
from hisop.geometry import (
    DepthHypothesisSet,
    Intrinsics,
    RigidPose,
    backproject,
    build_hypotheses,
    look_from,
    relative_pose,
    warp_grid,
    warp_pixel,
)
from hisop.lifting import (
    ContextFeature,
    DepthFeature,
    depth_confidence,
    lift_to_voxel_volume,
    linear_cross_attention,
)
from hisop.numerics import BORDER_CLAMP, bilinear_sample_grid, set_num_threads, trilinear_sample
from hisop.scenes import build_scene, plane_scene_spec, render_frame
from hisop.temporal import FrameObservation, build_cost_volume, build_temporal_volume, cost_volume_depth, warp_historical
from utils.config import BENCH_CONFIG_NAME, RunConfig, default_config_path, load_config, with_ablations, with_run_overrides
from utils.formats import encode_voxel_grid

Check = Callable[[], tuple[bool, str]]

PLANE_DEPTH: Final[float] = 3.6
PLANE_EXTENTS: Final[tuple[int, int]] = (64, 64)
PLANE_BASELINE: Final[float] = 0.3
PLANE_FRAMES: Final[int] = 4
CORRESPONDENCE_RATE: Final[float] = 0.95
DIRECTIONAL_SEEDS: Final[int] = 10


#oracles
def naive_linear_attention(qd: np.ndarray, kc: np.ndarray, vc: np.ndarray, conf: np.ndarray) -> np.ndarray:
    """Quadratic form: the explicit [Nq, Nk] attention matrix applied to the values."""
    phi_q = np.exp(qd) / np.exp(qd).sum(axis=1, keepdims=True)
    phi_k = np.exp(kc) / np.exp(kc).sum(axis=0, keepdims=True)
    attention = np.zeros((qd.shape[0], kc.shape[0]))
    for i in range(qd.shape[0]):
        for t in range(kc.shape[0]):
            attention[i, t] = float(np.dot(phi_q[i], phi_k[t]))
    return conf[:, None] * (attention @ vc)


def naive_voxel_pool(
    vol: np.ndarray, hyps: DepthHypothesisSet, K: Intrinsics, pose: RigidPose, grid: UnifiedGridSpec
) -> np.ndarray:
    channels, depth, height, width = vol.shape
    out = np.zeros((grid.size, channels))
    to_world = pose.inverse()
    for h in range(height):
        for w in range(width):
            for d in range(depth):
                point = to_world.apply(backproject(K, (float(w), float(h)), float(hyps.values[d])))
                index = int(grid.cell_indices(point))
                if index >= 0:
                    out[index] += vol[:, d, h, w]
    return out.T.reshape(channels, *grid.extents)


def naive_confusion(pred: np.ndarray, gt: np.ndarray, size: int) -> np.ndarray:
    cm = np.zeros((size, size), dtype=np.int64)
    for g, p in zip(gt.reshape(-1), pred.reshape(-1)):
        cm[g, p] += 1
    return cm


def naive_miou(cm: np.ndarray) -> tuple[float, float]:
    occupied_union = cm.sum() - cm[0, 0]
    iou = cm[1:, 1:].sum() / occupied_union if occupied_union else 1.0
    scores = []
    for cls in range(1, cm.shape[0]):
        union = cm[cls, :].sum() + cm[:, cls].sum() - cm[cls, cls]
        if union:
            scores.append(cm[cls, cls] / union)
    return float(iou), float(np.mean(scores)) if scores else 1.0


def naive_deformable(vol: np.ndarray, taps: TapSet, aff: np.ndarray) -> np.ndarray:
    _, depth, height, width = vol.shape
    out = np.zeros_like(vol)
    for z in range(depth):
        for y in range(height):
            for x in range(width):
                for k in range(taps.count):
                    dz, dy, dx = taps.base[k] + taps.deltas[k]
                    sample = trilinear_sample(vol, x + dx, y + dy, z + dz)
                    gate = trilinear_sample(aff[None], x + dx, y + dy, z + dz, border=BORDER_CLAMP)[0]
                    out[:, z, y, x] += taps.weights[k] * sample * gate
    return out


#scenes
def plane_observations(
    extents: tuple[int, int] = PLANE_EXTENTS, frames: int = PLANE_FRAMES
) -> tuple[list[FrameObservation], np.ndarray, DepthHypothesisSet]:
    """Frames of the textured plane with lateral baselines; returns (observations, current depth, hypotheses)."""
    height, width = extents
    K = Intrinsics(fx=width * 0.625, fy=width * 0.625, cx=(width - 1) / 2, cy=(height - 1) / 2)
    scene = build_scene(plane_scene_spec(depth=PLANE_DEPTH))
    observations = []
    depth = None
    for i in range(frames):
        pose = look_from(np.array([-i * PLANE_BASELINE, 0.0, 1.6]))
        frame = render_frame(scene, K, pose, height, width)
        if i == 0:
            depth = frame.depth
        observations.append(FrameObservation(feature=frame.feature, intrinsics=K, pose=pose, index=i))
    return observations, depth, build_hypotheses(2.0, 10.0, 16)


def _interior(observations: list[FrameObservation], hyps: DepthHypothesisSet, bin_index: int) -> np.ndarray:
    current = observations[0]
    height, width = current.feature.extents
    keep = np.ones((height, width), dtype=bool)
    for hist in observations[1:]:
        pose = relative_pose(current.pose, hist.pose)
        us, vs, valid = warp_grid(current.intrinsics, hist.intrinsics, pose, height, width, hyps.values[[bin_index]])
        keep &= valid[0] & (us[0] >= 1) & (us[0] <= width - 2) & (vs[0] >= 1) & (vs[0] <= height - 2)
    return keep


#checks
def check_warp_exactness() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    feature = ContextFeature(values=rng.normal(size=(3, 8, 10)))
    K = Intrinsics(fx=9.0, fy=9.0, cx=4.5, cy=3.5)
    frame = FrameObservation(feature=feature, intrinsics=K, pose=RigidPose.identity())
    hyps = build_hypotheses(1.0, 5.0, 4)
    warped = warp_historical(frame, frame, hyps)
    identity_error = float(np.abs(warped - feature.values[:, None]).max())
    us, vs, _ = warp_grid(K, K, RigidPose.identity(), 8, 10, hyps.values)
    for j in range(hyps.count):
        resampled = bilinear_sample_grid(feature.values, us[j], vs[j])
        identity_error = max(identity_error, float(np.abs(resampled - feature.values).max()))
    pose = RigidPose(rotation=np.eye(3), translation=np.array([0.5, 0.0, 0.0]))
    result = warp_pixel(Intrinsics.identity(), Intrinsics.identity(), pose, (1.0, 2.0), 4.0)
    analytic_error = max(abs(result.u - 1.125), abs(result.v - 2.0))
    ok = identity_error <= 1e-9 and analytic_error <= 1e-9 and result.valid
    return ok, f"identity {identity_error:.1e}, analytic {analytic_error:.1e}"


def check_plane_sweep() -> tuple[bool, str]:
    observations, depth, hyps = plane_observations()
    true_bin = hyps.nearest_index(PLANE_DEPTH)
    mask = (depth > 0) & _interior(observations, hyps, true_bin)
    cost = build_cost_volume(observations, hyps, "absdiff")
    cost_rate = float((cost_volume_depth(cost, "absdiff")[mask] == true_bin).mean())

    vtem = build_temporal_volume(observations, hyps)
    kernels = identity_kernels(vtem.block_channels)
    aff = pattern_affinity(multigroup_context(vtem.current, kernels), multigroup_context(vtem.historical, kernels))
    aff_rate = float((aff.values[0].argmax(axis=0)[mask] == true_bin).mean())
    ok = cost_rate >= CORRESPONDENCE_RATE and aff_rate >= CORRESPONDENCE_RATE
    return ok, f"cost argmin {cost_rate:.3f}, affinity argmax {aff_rate:.3f} over {int(mask.sum())} pixels"


def check_affinity_invariance() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    bound = 0.0
    for _ in range(100):
        x = rng.normal(size=(int(rng.integers(2, 9)), 2, 3, 3))
        a = rng.uniform(0.1, 5.0) * (1 if rng.random() < 0.5 else -1)
        b = rng.normal()
        values = pattern_affinity(
            GroupContext(groups=(x,), dilations=(1,)),
            GroupContext(groups=(a * x + b,), dilations=(1,)),
        ).values
        worst = max(worst, float(np.abs(values - np.sign(a)).max()))
        random_pair = pattern_affinity(
            GroupContext(groups=(x,), dilations=(1,)),
            GroupContext(groups=(rng.normal(size=x.shape),), dilations=(1,)),
        ).values
        bound = max(bound, float(np.abs(random_pair).max()))
    return worst <= 1e-6 and bound <= 1 + 1e-9, f"max deviation {worst:.1e}, max |A| {bound:.6f}"


def check_attention_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        nq, nk, channels = (int(v) for v in rng.integers(1, [33, 33, 9]))
        qd, kc, vc = rng.normal(size=(nq, channels)), rng.normal(size=(nk, channels)), rng.normal(size=(nk, channels))
        conf = rng.uniform(size=nq)
        fast = linear_cross_attention(qd, kc, vc, conf)
        worst = max(worst, float(np.abs(fast - naive_linear_attention(qd, kc, vc, conf)).max()))
    return worst <= 1e-9, f"max error {worst:.1e}"


def check_lifting_conservation() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    worst = 0.0
    bounds_ok = True
    for _ in range(50):
        channels, depth, height, width = (int(v) for v in rng.integers(2, [6, 9, 7, 7]))
        fc = ContextFeature(values=rng.normal(size=(channels, height, width)))
        fd = DepthFeature(values=rng.normal(scale=3.0, size=(depth, height, width)))
        conf = depth_confidence(fd)
        vvox = lift_to_voxel_volume(fc, fd, conf)
        worst = max(worst, float(np.abs(vvox.values.sum(axis=1) - fc.values).max()))
        bounds_ok &= bool(np.all(conf.values >= 1.0 / depth - 1e-15) and np.all(conf.values <= 1.0))
        uniform = depth_confidence(DepthFeature(values=np.zeros((depth, height, width))))
        bounds_ok &= bool(np.all(uniform.values == 1.0 / depth))
    return worst <= 1e-9 and bounds_ok, f"max conservation error {worst:.1e}, bounds {'ok' if bounds_ok else 'violated'}"


def random_pool_case(
    rng: np.random.Generator,
) -> tuple[np.ndarray, DepthHypothesisSet, Intrinsics, RigidPose, UnifiedGridSpec]:
    channels = int(rng.integers(1, 4))
    depth = int(rng.integers(2, 6))
    height, width = (int(v) for v in rng.integers(2, 7, size=2))
    K = Intrinsics(fx=float(rng.uniform(2, 6)), fy=float(rng.uniform(2, 6)), cx=width / 2, cy=height / 2)
    pose = look_from(rng.uniform(-0.5, 0.5, size=3), float(rng.uniform(-0.3, 0.3)))
    hyps = build_hypotheses(float(rng.uniform(0.5, 1.5)), float(rng.uniform(2.0, 4.0)), depth)
    grid = UnifiedGridSpec(extents=(6, 6, 4), voxel_size=float(rng.uniform(0.3, 0.8)), origin=np.array([-2.0, 0.0, -1.0]))
    return rng.normal(size=(channels, depth, height, width)), hyps, K, pose, grid


def check_voxel_pool() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    worst = 0.0
    identical = True
    for _ in range(50):
        vol, hyps, K, pose, grid = random_pool_case(rng)
        pooled = voxel_pool(vol, hyps, K, pose, grid)
        mass_in = vol.sum(axis=(1, 2, 3))
        mass_out = pooled.values.sum(axis=(1, 2, 3)) + pooled.dropped_mass
        scale = np.maximum(np.abs(vol).sum(axis=(1, 2, 3)), 1.0)
        worst = max(worst, float((np.abs(mass_in - mass_out) / scale).max()))
        identical &= bool(np.array_equal(pooled.values, naive_voxel_pool(vol, hyps, K, pose, grid)))
    return worst <= 1e-9 and identical, f"max relative mass error {worst:.1e}, oracle {'equal' if identical else 'differs'}"


def check_zero_gate() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    pooled, vvox = rng.normal(size=(2, 5, 4, 4, 3))
    vvox[0, 0, 0, 0] = -0.0
    composed = zero_gated_compose(pooled, vvox, np.zeros(5))
    ok = composed.values.tobytes() == vvox.tobytes()
    return ok, "bitwise identity" if ok else "composed volume differs"


def monotonicity_sweep(num_classes: int = 2) -> bool:
    """Fixing any one wrong voxel never lowers mIoU, over every 2x2x1 pred/gt pair."""
    labels = np.array(np.meshgrid(*[np.arange(num_classes + 1)] * 4, indexing="ij")).reshape(4, -1).T
    for gt_flat in labels:
        gt = SemanticVoxelGrid(labels=gt_flat.reshape(2, 2, 1), num_classes=num_classes)
        for pred_flat in labels:
            before = evaluate(SemanticVoxelGrid(labels=pred_flat.reshape(2, 2, 1), num_classes=num_classes), gt).miou
            for i in np.flatnonzero(pred_flat != gt_flat):
                fixed = pred_flat.copy()
                fixed[i] = gt_flat[i]
                after = evaluate(SemanticVoxelGrid(labels=fixed.reshape(2, 2, 1), num_classes=num_classes), gt).miou
                if after < before - 1e-15:
                    return False
    return True


def check_metric_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(8)
    exact = True
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 17, size=3))
        num_classes = int(rng.integers(1, 6))
        gt = rng.integers(0, num_classes + 1, size=shape)
        pred = rng.integers(0, num_classes + 1, size=shape)
        gt_grid = SemanticVoxelGrid(labels=gt, num_classes=num_classes)
        pred_grid = SemanticVoxelGrid(labels=pred, num_classes=num_classes)
        cm = naive_confusion(pred, gt, num_classes + 1)
        metrics = evaluate(pred_grid, gt_grid)
        exact &= bool(np.array_equal(confusion_matrix(pred_grid, gt_grid), cm))
        exact &= (metrics.iou, metrics.miou) == naive_miou(cm)
    monotone = monotonicity_sweep()
    return exact and monotone, f"oracle {'exact' if exact else 'differs'}, monotonicity {'holds' if monotone else 'violated'}"


def check_deformable() -> tuple[bool, str]:
    rng = np.random.default_rng(9)
    vol = rng.normal(size=(3, 4, 5, 5))
    ones = PatternAffinity.constant(1.0, 3, vol.shape[1:])
    identity = multilevel_refine(vol, ones, RefineParams.identity(3, levels=3)).values
    identity_error = float(np.abs(identity - vol).max())

    taps = TapSet.window(3, seed=2)
    aff = PatternAffinity(values=rng.uniform(-1, 1, size=(3, *vol.shape[1:])))
    scaled = PatternAffinity(values=aff.values * 2.5)
    base = affinity_deformable_sample(vol, taps, aff, level=1)
    linear_error = float(np.abs(affinity_deformable_sample(vol, taps, scaled, level=1) - 2.5 * base).max())
    oracle_error = float(np.abs(base - naive_deformable(vol, taps, aff.values[0])).max())
    ok = identity_error <= 1e-12 and linear_error <= 1e-9 and oracle_error <= 1e-9
    return ok, f"identity {identity_error:.1e}, linearity {linear_error:.1e}, oracle {oracle_error:.1e}"


def _bench_config() -> RunConfig:
    return load_config(default_config_path(BENCH_CONFIG_NAME))


def check_directional() -> tuple[bool, str]:
    from hisop.pipeline import run_pipeline

    config = _bench_config()
    beats_shuffle = beats_plain = 0
    for seed in range(DIRECTIONAL_SEEDS):
        seeded = with_run_overrides(config, seed=seed)
        aligned = run_pipeline(seeded).report.miou
        shuffled = run_pipeline(with_ablations(seeded, ["pose_shuffle=on"])).report.miou
        plain = run_pipeline(with_ablations(seeded, ["cpa=off", "adr=off"])).report.miou
        beats_shuffle += aligned > shuffled
        beats_plain += aligned > plain
    ok = beats_shuffle >= 9 and beats_plain >= 8
    return ok, f"aligned > shuffled in {beats_shuffle}/10, aligned > no CPA/ADR in {beats_plain}/10"


def check_determinism() -> tuple[bool, str]:
    from hisop.cli import report_metrics
    from hisop.pipeline import run_pipeline

    config = _bench_config()
    outputs = set()
    with tempfile.TemporaryDirectory() as tmp:
        for threads in (1, 4, 1, 4):
            threaded = with_run_overrides(config, threads=threads)
            artifacts = run_pipeline(threaded)
            csv_path = Path(tmp) / "metrics.csv"
            report_metrics([artifacts.report], csv_path)
            outputs.add(encode_voxel_grid(artifacts.prediction.labels) + csv_path.read_bytes())
    set_num_threads(1)
    return len(outputs) == 1, f"{len(outputs)} distinct output set(s) over 4 runs"


CHECKS: Final[tuple[tuple[str, Check], ...]] = (
    ("warp exactness", check_warp_exactness),
    ("plane-sweep correspondence", check_plane_sweep),
    ("affinity invariance", check_affinity_invariance),
    ("linear attention oracle", check_attention_oracle),
    ("lifting conservation", check_lifting_conservation),
    ("voxel pool conservation", check_voxel_pool),
    ("zero-gate identity", check_zero_gate),
    ("metric oracle", check_metric_oracle),
    ("deformable identity and linearity", check_deformable),
    ("end-to-end direction", check_directional),
    ("determinism", check_determinism),
)


def run_selftest(threads: int = 1) -> tuple[int, int]:
    """Run every check; returns (passed, failed)."""
    set_num_threads(threads)
    passed = failed = 0
    for number, (name, check) in enumerate(CHECKS, start=1):
        start = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # a crashing check counts as a failure
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        seconds = time.perf_counter() - start
        print(f"{'PASS' if ok else 'FAIL'} {number:2d} {name} ({seconds:.2f}s) {detail}")
        passed += ok
        failed += not ok
        set_num_threads(threads)
    print(f"{passed} passed, {failed} failed")
    return passed, failed
