import numpy as np
import pytest

from mvpconv.errors import ContractViolation, TrainingError
from mvpconv.model import (
    DatasetSpec,
    SegModelConfig,
    SegmentationModel,
    TrainConfig,
    build_model,
    compute_miou,
    evaluate,
    make_dataset,
    scaled_width,
    split_clouds,
    train_loop,
)
from mvpconv.block import expected_parameter_count, MVPConvConfig
from mvpconv.pointcloud import stack_clouds

DESK_BLOCKS = [(16, 8), (32, 8), (64, 4)]


def small_cfg(**kw):
    base = dict(
        blocks=[(8, 4), (16, 4)],
        num_classes=4,
        in_channels=12,
        width_multiplier=0.5,
        global_feature_dim=8,
        classifier_channels=[8],
        seed=3,
    )
    base.update(kw)
    return SegModelConfig(**base)


def small_dataset(n_clouds=6, n_points=64, seed=5):
    return make_dataset(DatasetSpec(kind="quad", n_points=n_points, n_clouds=n_clouds, seed=seed))


def test_default_desk_config_logits_shape():
    cfg = SegModelConfig(blocks=DESK_BLOCKS, num_classes=4, width_multiplier=0.25, seed=7)
    model = build_model(cfg)
    clouds = small_dataset(n_clouds=2, n_points=32)
    batch = stack_clouds(clouds)
    logits = model.forward(batch.positions, batch.features)
    assert logits.shape == (2, 4, 32)


def test_same_seed_builds_identical_parameters():
    cfg = small_cfg()
    a, b = SegmentationModel(cfg), SegmentationModel(cfg)
    for (name, pa), pb in zip(a.named_parameters().items(), b.named_parameters().values()):
        assert pa.data.tobytes() == pb.data.tobytes(), name


def test_width_multiplier_scales_parameter_count():
    cfg_full = small_cfg(width_multiplier=1.0)
    cfg_half = small_cfg(width_multiplier=0.5)
    model = SegmentationModel(cfg_half)

    def analytic(cfg):
        total = 0
        c_in = cfg.in_channels
        for c_out, r in cfg.blocks:
            c_out = scaled_width(c_out, cfg.width_multiplier)
            total += expected_parameter_count(
                MVPConvConfig(
                    c_in=c_in,
                    c_out=c_out,
                    resolution=r,
                    use_1x1_conv=cfg.use_1x1_conv,
                    conv3d_depth=cfg.conv3d_depth,
                    variant=cfg.variant,
                    transmission_enabled=cfg.transmission_enabled,
                )
            )
            c_in = c_out
        last = c_in
        total += last * cfg.global_feature_dim + cfg.global_feature_dim * 3  # mlp + bn
        h = sum(scaled_width(c, cfg.width_multiplier) for c, _ in cfg.blocks)
        h += cfg.global_feature_dim
        for out in cfg.classifier_channels:
            total += h * out + out * 3
            h = out
        total += h * cfg.num_classes + cfg.num_classes
        return total

    assert model.parameter_count() == analytic(cfg_half)
    assert SegmentationModel(cfg_full).parameter_count() == analytic(cfg_full)


def test_compute_miou_perfect_and_flipped():
    labels = np.array([[0, 1, 0, 1]])
    perfect = compute_miou(labels, labels, 2)
    assert perfect.miou == 1.0 and perfect.accuracy == 1.0
    flipped = compute_miou(1 - labels, labels, 2)
    assert flipped.miou == 0.0 and flipped.accuracy == 0.0


def test_compute_miou_hand_example():
    result = compute_miou(np.array([[0, 1, 1, 1]]), np.array([[0, 0, 1, 1]]), 4)
    assert abs(result.miou - 7.0 / 12.0) < 1e-12
    assert result.accuracy == 0.75


def test_compute_miou_matches_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(25):
        b, n, k = int(rng.integers(1, 4)), int(rng.integers(2, 40)), int(rng.integers(2, 5))
        labels = rng.integers(0, k, (b, n))
        preds = rng.integers(0, k, (b, n))
        result = compute_miou(preds, labels, k)
        shape_ious = []
        for bb in range(b):
            confusion = np.zeros((k, k), dtype=int)
            for t, p in zip(labels[bb], preds[bb]):
                confusion[t, p] += 1
            ious = []
            for cls in range(k):
                inter = confusion[cls, cls]
                union = confusion[cls].sum() + confusion[:, cls].sum() - inter
                if union > 0:
                    ious.append(inter / union)
            shape_ious.append(np.mean(ious) if ious else 1.0)
        assert abs(result.miou - np.mean(shape_ious)) < 1e-12
        assert abs(result.accuracy - (preds == labels).mean()) < 1e-12
        assert 0.0 <= result.miou <= 1.0 and 0.0 <= result.accuracy <= 1.0
        assert result.miou == np.mean(result.shape_ious)


def test_compute_miou_validates_ranges():
    with pytest.raises(ContractViolation):
        compute_miou(np.array([[0, 5]]), np.array([[0, 1]]), 2)


def test_logits_permutation_equivariance():
    cfg = small_cfg()
    model = SegmentationModel(cfg, dtype=np.float32)
    clouds = small_dataset(n_clouds=2, n_points=48)
    batch = stack_clouds(clouds)
    rng = np.random.default_rng(1)
    perm = rng.permutation(48)
    base = model.forward(batch.positions, batch.features).data
    permuted = model.forward(batch.positions[:, perm], batch.features[:, :, perm]).data
    assert np.abs(base[:, :, perm] - permuted).max() < 1e-5


def test_split_is_last_fraction():
    clouds = small_dataset(n_clouds=10)
    train, rest = split_clouds(clouds, 0.2)
    assert len(train) == 8 and len(rest) == 2
    assert rest[0] is clouds[8] and rest[1] is clouds[9]


def test_train_smoke_and_history_shape(tmp_path):
    cfg = small_cfg()
    model = SegmentationModel(cfg, dtype=np.float32)
    tc = TrainConfig(batch_size=2, epochs=2, dataset=DatasetSpec(), checkpoint_dir=str(tmp_path))
    history = train_loop(model, small_dataset(n_clouds=8), tc)
    assert len(history) == 2
    assert all(np.isfinite(h["loss"]) for h in history)
    assert (tmp_path / "final.mvpc").exists() and (tmp_path / "best.mvpc").exists()


def test_training_is_seed_deterministic():
    def run():
        model = SegmentationModel(small_cfg(), dtype=np.float32)
        tc = TrainConfig(batch_size=2, epochs=3, seed=11)
        return train_loop(model, small_dataset(), tc)

    h1, h2 = run(), run()
    assert [r["loss"] for r in h1] == [r["loss"] for r in h2]
    assert [r["miou"] for r in h1] == [r["miou"] for r in h2]


def test_zero_learning_rate_freezes_parameters():
    model = SegmentationModel(small_cfg(), dtype=np.float32)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    tc = TrainConfig(batch_size=2, epochs=2, lr=0.0)
    train_loop(model, small_dataset(), tc)
    for name, p in model.named_parameters().items():
        assert p.data.tobytes() == before[name].tobytes(), name


def test_nonfinite_loss_aborts_with_location():
    model = SegmentationModel(small_cfg(), dtype=np.float32)
    model.head.weight.data[:] = np.nan
    tc = TrainConfig(batch_size=2, epochs=1)
    with pytest.raises(TrainingError) as err:
        train_loop(model, small_dataset(), tc)
    assert "epoch 0" in str(err.value)


def test_train_requires_labels():
    clouds = small_dataset(n_clouds=2)
    for c in clouds:
        c.labels = None
    model = SegmentationModel(small_cfg(), dtype=np.float32)
    with pytest.raises(ContractViolation):
        train_loop(model, clouds, TrainConfig(batch_size=2, epochs=1))


def test_cross_entropy_of_model_matches_finite_differences():
    from mvpconv.autodiff import (
        Tape,
        Tensor,
        backward_pass,
        finite_diff_grad,
        max_rel_error,
        parameter,
    )
    from mvpconv.layers import cross_entropy

    rng = np.random.default_rng(12)
    cfg = SegModelConfig(
        blocks=[(4, 3)], num_classes=3, in_channels=2, global_feature_dim=4,
        classifier_channels=[4], seed=2,
    )
    model = SegmentationModel(cfg, dtype=np.float64)
    positions = rng.standard_normal((1, 8, 3))
    features = parameter(rng.standard_normal((1, 2, 8)))
    labels = rng.integers(0, 3, (1, 8))

    with Tape() as tape:
        loss = cross_entropy(model.forward(positions, features, training=True), labels)
    grads = backward_pass(tape, loss, wrt=[features])

    def f(x):
        with Tape():
            return cross_entropy(model.forward(positions, x, training=True), labels)

    fd = finite_diff_grad(f, Tensor(features.data.copy()))
    assert max_rel_error(grads[features].data, fd.data) < 1e-4


def test_checkpoint_roundtrip_reproduces_eval(tmp_path):
    from mvpconv.checkpoint import load_state

    cfg = small_cfg()
    model = SegmentationModel(cfg, dtype=np.float32)
    clouds = small_dataset()
    tc = TrainConfig(batch_size=2, epochs=2, dataset=DatasetSpec(), checkpoint_dir=str(tmp_path))
    train_loop(model, clouds, tc)
    _, eval_clouds = split_clouds(clouds, tc.eval_fraction)
    before = evaluate(model, eval_clouds, cfg.num_classes)

    restored = SegmentationModel(cfg, dtype=np.float32)
    restored.load_state_arrays(load_state(tmp_path / "final.mvpc"))
    after = evaluate(restored, eval_clouds, cfg.num_classes)
    assert before.miou == after.miou
    assert before.accuracy == after.accuracy
    assert before.per_class_iou == after.per_class_iou
