"""Fusion block, distillation loss and the multi-scale training step."""

import numpy as np
import pytest

from lidarpass.errors import ShapeError, ValidationError
from lidarpass.fusion import (
    FusionBlockParams,
    LossBreakdown,
    ScalePair,
    distill_loss,
    fuse,
    multiscale_kd_step,
)
from lidarpass.geometry import PixelMapping, PointCloud
from lidarpass.nets import LEAKY_SLOPE, Encoder2D, Encoder3D, ParamStore
from lidarpass.tensor import (
    Tensor,
    add,
    backward,
    concat_last_dim,
    leaky_relu,
    matmul,
    mul_elementwise,
    scale,
    sum_all,
)


def act(x):
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def np_linear(store, name, x):
    return x @ store.raw_get(name + ".w").data + store.raw_get(name + ".b").data


def make_block(seed=0, feat_dim=8, hidden=8, classes=3, prefix="blk"):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    params = FusionBlockParams(store, rng, feat_dim=feat_dim, hidden=hidden,
                               num_classes=classes, prefix=prefix)
    return store, params


def test_fusion_rejects_mismatched_rows_and_widths():
    store, params = make_block()
    with pytest.raises(ShapeError):
        ScalePair(Tensor(np.zeros((3, 8))), Tensor(np.zeros((4, 8))))
    pair = ScalePair(Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 5))))
    with pytest.raises(ShapeError):
        fuse(pair, params)
    with pytest.raises(ValidationError):
        FusionBlockParams(ParamStore(), np.random.default_rng(0),
                          feat_dim=4, num_classes=1, prefix="x")


def test_zero_gate_gives_exactly_half_blend():
    store, params = make_block(seed=3)
    store.raw_get("blk.gate.l2.w").data = np.zeros((8, 8))
    store.raw_get("blk.gate.l2.b").data = np.zeros(8)
    rng = np.random.default_rng(4)
    f2d = Tensor(rng.normal(size=(6, 8)))
    f3d = Tensor(rng.normal(size=(6, 8)))
    fused_e, points_e, f_learner = fuse(ScalePair(f2d, f3d), params)

    # Recompute the pre-gate pieces with the same tensor ops, then blend
    # with the closed-form 0.5 gate.
    learner = params.learner2(leaky_relu(params.learner1(f3d), LEAKY_SLOPE))
    fused = params.fuse2(
        leaky_relu(params.fuse1(concat_last_dim(learner, f2d)), LEAKY_SLOPE)
    )
    want = add(params.proj2d(f2d), scale(fused, 0.5))
    assert np.array_equal(fused_e.data, want.data)
    assert np.array_equal(f_learner.data, learner.data)


def test_skip_starts_as_identity_residual():
    store, params = make_block(seed=5)
    rng = np.random.default_rng(6)
    f2d = Tensor(rng.normal(size=(4, 8)))
    f3d = Tensor(rng.normal(size=(4, 8)))
    _, points_e, _ = fuse(ScalePair(f2d, f3d), params)
    assert np.array_equal(points_e.data, f3d.data)


def test_fuse_matches_manual_replay():
    store, params = make_block(seed=7, feat_dim=8, hidden=8)
    rng = np.random.default_rng(8)
    f2d = rng.normal(size=(16, 8))
    f3d = rng.normal(size=(16, 8))
    fused_e, points_e, f_learner = fuse(ScalePair(Tensor(f2d), Tensor(f3d)), params)

    learner = np_linear(store, "blk.learner.l2", act(np_linear(store, "blk.learner.l1", f3d)))
    fused = np_linear(store, "blk.fuse.l2",
                      act(np_linear(store, "blk.fuse.l1", np.concatenate([learner, f2d], axis=1))))
    gate = 1.0 / (1.0 + np.exp(-np_linear(store, "blk.gate.l2", act(np_linear(store, "blk.gate.l1", fused)))))
    want_fused = np_linear(store, "blk.proj2d", f2d) + gate * fused
    want_points = f3d + np_linear(store, "blk.skip", learner)
    assert np.abs(fused_e.data - want_fused).max() < 1e-6
    assert np.abs(points_e.data - want_points).max() < 1e-6
    assert np.abs(f_learner.data - learner).max() < 1e-6


def test_distill_loss_zero_for_identical_logits():
    rng = np.random.default_rng(9)
    logits = Tensor(rng.normal(size=(10, 4)))
    assert distill_loss(logits, logits).item() == 0.0


def test_distill_loss_zero_for_shifted_logits():
    rng = np.random.default_rng(10)
    base = rng.normal(size=(7, 3))
    # A constant shift leaves the softmax unchanged.
    loss = distill_loss(Tensor(base), Tensor(base + 5.0))
    assert abs(loss.item()) < 1e-12


def test_distill_loss_two_class_hand_value():
    teacher = Tensor(np.array([[np.log(3.0), 0.0]]))
    student = Tensor(np.array([[0.0, 0.0]]))
    want = 0.75 * np.log(1.5) + 0.25 * np.log(0.5)
    got = distill_loss(teacher, student).item()
    assert abs(got - want) < 1e-12
    assert abs(got - 0.13081) < 1e-5


def test_distill_loss_non_negative_on_random_inputs():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        c = int(rng.integers(2, 6))
        t = Tensor(rng.normal(size=(n, c)) * 3.0)
        s = Tensor(rng.normal(size=(n, c)) * 3.0)
        assert distill_loss(t, s).item() >= 0.0


def test_distill_loss_matches_scalar_oracle():
    rng = np.random.default_rng(12)
    t = rng.normal(size=(20, 5))
    s = rng.normal(size=(20, 5))
    got = distill_loss(Tensor(t), Tensor(s)).item()

    total = 0.0
    for i in range(20):
        pt = np.exp(t[i] - t[i].max())
        pt /= pt.sum()
        ps = np.exp(s[i] - s[i].max())
        ps /= ps.sum()
        total += float(np.sum(pt * (np.log(pt) - np.log(ps))))
    assert abs(got - total / 20) < 1e-9


def test_distill_loss_teacher_gradient_is_exactly_zero():
    rng = np.random.default_rng(13)
    teacher = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    student = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    backward(distill_loss(teacher, student))
    assert teacher.grad is None
    assert student.grad is not None
    assert np.abs(student.grad).max() > 0


def test_distill_loss_validates_shapes():
    with pytest.raises(ShapeError):
        distill_loss(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValidationError):
        distill_loss(Tensor(np.zeros((3, 1))), Tensor(np.zeros((3, 1))))
    assert distill_loss(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3)))).item() == 0.0


def build_micro(seed=0, n=32, hw=16, scales=2, classes=3, width=8):
    """A full two-branch micro instance with a synthetic pixel mapping."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    enc2 = Encoder2D(store, rng, in_channels=3, width=width, scales=scales)
    enc3 = Encoder3D(store, rng, in_dim=3, width=width, scales=scales,
                     base_resolution=0.2)
    blocks = [
        FusionBlockParams(store, rng, feat_dim=width, hidden=width,
                          num_classes=classes, prefix=f"fuse.s{l}")
        for l in range(1, scales + 1)
    ]
    coords = rng.uniform(-1.0, 1.0, size=(n, 3))
    rows = rng.integers(0, hw, size=n)
    cols = rng.integers(0, hw, size=n)
    valid = rng.random(n) < 0.7
    mapping = PixelMapping(rows=rows, cols=cols, depth=np.ones(n), valid=valid)
    labels = rng.integers(0, classes, size=n)
    image = rng.random((hw, hw, 3))
    return store, enc2, enc3, blocks, PointCloud(coords), coords, mapping, labels, image


def run_micro(store, enc2, enc3, blocks, cloud, coords, mapping, labels, image,
              image_tensor=None, coord_tensor=None):
    feats2d = enc2(image_tensor if image_tensor is not None else image)
    feats3d = enc3(cloud, coord_tensor if coord_tensor is not None else coords)
    return multiscale_kd_step(feats2d, feats3d, mapping, blocks, labels)


def test_multiscale_step_matches_numpy_replay():
    parts = build_micro(seed=21)
    store, enc2, enc3, blocks, cloud, coords, mapping, labels, image = parts
    breakdown = run_micro(*parts)

    def conv_replay(x, name):
        h, w, c = x.shape
        padded = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
        taps = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                taps.append(padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w])
        patches = np.concatenate(taps, axis=2).reshape(h * w, 9 * c)
        out = patches @ store.raw_get(name + ".w").data + store.raw_get(name + ".b").data
        return out.reshape(h, w, -1)

    # Image branch replay.
    x = image
    images2d = []
    for l in (1, 2):
        conv = act(conv_replay(x, f"enc2d.s{l}.conv"))
        h, w, c = conv.shape
        x = conv.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
        images2d.append(x)

    # Point branch replay.
    from lidarpass.sparsevox import build_voxel_mapping, voxelize

    y = np_linear(store, "enc3d.stem", coords)
    grids = []
    for l in (1, 2):
        vm = build_voxel_mapping(cloud, 0.2 * 2 ** (l - 1), scale_index=l)
        grid = voxelize(y, vm)
        h3 = np.asarray(grid.features)
        h3 = h3 + np_linear(store, f"enc3d.s{l}.lin2", act(np_linear(store, f"enc3d.s{l}.lin1", h3)))
        rows = np.array([grid.table[tuple(k)] for k in vm.keys.tolist()])
        grids.append((h3, rows))
        y = h3[rows]

    def oracle_ce(logits, labels_):
        total = 0.0
        for i in range(len(labels_)):
            row = logits[i] - logits[i].max()
            total -= row[labels_[i]] - np.log(np.exp(row).sum())
        return total / len(labels_)

    def oracle_kl(t, s):
        total = 0.0
        for i in range(len(t)):
            pt = np.exp(t[i] - t[i].max())
            pt /= pt.sum()
            ps = np.exp(s[i] - s[i].max())
            ps /= ps.sum()
            total += float(np.sum(pt * (np.log(pt) - np.log(ps))))
        return total / len(t)

    idx = np.flatnonzero(mapping.valid)
    fov_labels = labels[idx]
    want_total = 0.0
    for l in (1, 2):
        feat = images2d[l - 1]
        factor = 16 // feat.shape[0]
        up = np.repeat(np.repeat(feat, factor, axis=0), factor, axis=1)
        lifted = up[mapping.rows[idx], mapping.cols[idx]]
        h3, rows = grids[l - 1]
        points_fov = h3[rows][idx]
        prefix = f"fuse.s{l}"
        learner = np_linear(store, f"{prefix}.learner.l2",
                            act(np_linear(store, f"{prefix}.learner.l1", points_fov)))
        fused = np_linear(store, f"{prefix}.fuse.l2",
                          act(np_linear(store, f"{prefix}.fuse.l1",
                                        np.concatenate([learner, lifted], axis=1))))
        gate = 1.0 / (1.0 + np.exp(-np_linear(store, f"{prefix}.gate.l2",
                                              act(np_linear(store, f"{prefix}.gate.l1", fused)))))
        fused_e = np_linear(store, f"{prefix}.proj2d", lifted) + gate * fused
        points_e = points_fov + np_linear(store, f"{prefix}.skip", learner)
        teacher = np_linear(store, f"{prefix}.head_fuse", fused_e)
        student = np_linear(store, f"{prefix}.head_3d", points_e)

        want_fuse = oracle_ce(teacher, fov_labels)
        want_3d = oracle_ce(student, fov_labels)
        want_kd = oracle_kl(teacher, student)
        assert abs(breakdown.seg_fuse[l - 1].item() - want_fuse) < 1e-5
        assert abs(breakdown.seg_scale3d[l - 1].item() - want_3d) < 1e-5
        assert abs(breakdown.kd[l - 1].item() - want_kd) < 1e-5
        want_total += want_fuse + want_3d + 0.05 * want_kd
    assert abs(breakdown.total.item() - want_total) < 1e-5


def test_total_combines_terms_with_kd_weight():
    parts = build_micro(seed=22)
    breakdown = run_micro(*parts)
    want = breakdown.seg3d.item()
    for t in breakdown.seg_fuse:
        want += t.item()
    for t in breakdown.seg_scale3d:
        want += t.item()
    for t in breakdown.kd:
        want += 0.05 * t.item()
    assert abs(breakdown.total.item() - want) < 1e-12


def test_kd_weight_arithmetic_scales_unit_terms():
    # With every distilled term at 1 and no segmentation loss the total is
    # scales * weight.
    assert abs(4 * 0.05 * 1.0 - 0.2) < 1e-15
    parts = build_micro(seed=23)
    store, enc2, enc3, blocks, cloud, coords, mapping, labels, image = parts
    feats2d = enc2(image)
    feats3d = enc3(cloud, coords)
    b_full = multiscale_kd_step(feats2d, feats3d, mapping, blocks, labels, kd_weight=0.05)
    b_zero = multiscale_kd_step(feats2d, feats3d, mapping, blocks, labels, kd_weight=0.0)
    kd_sum = sum(t.item() for t in b_full.kd)
    assert abs((b_full.total.item() - b_zero.total.item()) - 0.05 * kd_sum) < 1e-9


def test_optimum_drives_all_terms_to_zero():
    parts = build_micro(seed=24, classes=3)
    store, enc2, enc3, blocks, cloud, coords, mapping, labels, image = parts
    labels = np.zeros_like(labels)
    for l in (1, 2):
        for head in ("head_fuse", "head_3d"):
            store.raw_get(f"fuse.s{l}.{head}.w").data = np.zeros((8, 3))
            store.raw_get(f"fuse.s{l}.{head}.b").data = np.array([40.0, 0.0, 0.0])
    feats2d = enc2(image)
    feats3d = enc3(cloud, coords)
    breakdown = multiscale_kd_step(feats2d, feats3d, mapping, blocks, labels)
    for t in breakdown.seg_fuse + breakdown.seg_scale3d:
        assert t.item() < 1e-9
    for t in breakdown.kd:
        assert t.item() == 0.0
    assert breakdown.total.item() < 1e-8


def test_kd_gradient_is_unidirectional():
    parts = build_micro(seed=25)
    store, enc2, enc3, blocks, cloud, coords, mapping, labels, image = parts
    # Give the skip projection weight so the learner path carries gradient.
    rng = np.random.default_rng(26)
    for l in (1, 2):
        store.raw_get(f"fuse.s{l}.skip.w").data = rng.normal(size=(8, 8)) * 0.1
    breakdown = run_micro(*parts)
    kd_total = add(breakdown.kd[0], breakdown.kd[1])
    store.zero_grad()
    backward(kd_total)

    teacher_only = (".fuse.l", ".gate.l", ".head_fuse", ".proj2d")
    for name, param in store.raw_items():
        if name.startswith("enc2d.") or any(tag in name for tag in teacher_only):
            assert param.grad is None or np.abs(param.grad).max() == 0.0, name

    def grad_norm(prefixes):
        total = 0.0
        for name, param in store.raw_items():
            if any(tag in name for tag in prefixes) and param.grad is not None:
                total += float(np.abs(param.grad).sum())
        return total

    assert grad_norm((".head_3d",)) > 0
    assert grad_norm((".skip",)) > 0
    assert grad_norm((".learner.",)) > 0
    assert grad_norm(("enc3d.",)) > 0


def test_multiscale_step_gradient_check():
    parts = build_micro(seed=27, n=12, hw=8, width=4)
    store, enc2, enc3, blocks, cloud, coords, mapping, labels, image = parts

    def f_img(img):
        return run_micro(store, enc2, enc3, blocks, cloud, coords, mapping,
                         labels, image, image_tensor=img).total

    def f_pts(feats):
        return run_micro(store, enc2, enc3, blocks, cloud, coords, mapping,
                         labels, image, coord_tensor=feats).total

    from lidarpass.tensor import grad_check

    img_leaf = Tensor(image.copy(), requires_grad=True)
    assert grad_check(f_img, img_leaf) < 1e-4
    pts_leaf = Tensor(coords.copy(), requires_grad=True)
    assert grad_check(f_pts, pts_leaf) < 1e-4


def test_scale_count_mismatch_is_reported():
    parts = build_micro(seed=28)
    store, enc2, enc3, blocks, cloud, coords, mapping, labels, image = parts
    feats2d = enc2(image)
    feats3d = enc3(cloud, coords)
    with pytest.raises(ShapeError):
        multiscale_kd_step(feats2d, feats3d, mapping, blocks[:1], labels)
    with pytest.raises(ValidationError):
        multiscale_kd_step(feats2d, feats3d, mapping, blocks, labels, kd_weight=-0.1)
    with pytest.raises(ShapeError):
        multiscale_kd_step(feats2d, feats3d, mapping, blocks, labels[:-1])


def test_loss_breakdown_record_schema():
    parts = build_micro(seed=29)
    breakdown = run_micro(*parts)
    record = breakdown.to_record(step=3)
    assert record["step"] == 3
    assert set(record) == {"step", "seg3d", "seg2d", "seg_fuse", "seg_scale3d", "kd", "total"}
    assert record["seg2d"] is None
    assert len(record["seg_fuse"]) == len(record["kd"]) == 2
    assert all(isinstance(v, float) for v in record["kd"])
