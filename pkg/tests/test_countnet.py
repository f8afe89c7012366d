import numpy as np
import pytest

from leafcount import layers as L
from leafcount.countnet import (
    DESK_STACK,
    PAPER_STACK,
    CountArchSpec,
    CountTrainConfig,
    ShapePlanError,
    assemble_srgb,
    build_countnet,
    check_kernel_schedule,
    count_parameters,
    countnet_from_checkpoint,
    plan_shape_trace,
    predict_count,
    round_count,
    train_countnet,
)
from leafcount.augment import AugmentPlan
from leafcount.errors import DataError
from leafcount.gradcheck import numeric_grad, rel_error, sample_coords
from leafcount.optim import OptimizerConfig
from leafcount.synth import SynthConfig, generate_synthetic
from leafcount.tensor import CHECK_DTYPE, rng_stream


def test_paper_stack_trace():
    sizes = [s for _, s in plan_shape_trace(448, PAPER_STACK)]
    assert sizes[0] == 448 and sizes[-3:] == [11, 5, 1]
    assert sizes == [448, 440, 432, 216, 208, 200, 100, 96, 92, 46, 42, 38, 19, 15, 11, 5, 1]
    check_kernel_schedule(PAPER_STACK)


def test_single_conv_to_vector():
    assert plan_shape_trace(9, ["c9"])[-1] == ("conv9", 1)


@pytest.mark.parametrize("size,stack", [(8, ["c9"]), (12, ["c9"]), (64, ["c5", "c5", "P", "c5", "P", "c5", "P", "c3"])])
def test_planner_rejects_non_vector_ends(size, stack):
    with pytest.raises(ShapePlanError) as info:
        plan_shape_trace(size, stack)
    assert info.value.trace[0] == ("input", size)


def test_kernel_schedule_rejects_small_kernels_early():
    with pytest.raises(ValueError, match="kernel schedule"):
        check_kernel_schedule(["c5", "P", "c9"])
    with pytest.raises(ValueError):
        CountArchSpec(64, ("c5", "c5", "P", "c5", "P", "c5", "P", "c3"), (8, 8, 8, 8, 8)).trace()


def test_desk_stack():
    spec = CountArchSpec.preset("desk")
    assert spec.stack == DESK_STACK
    assert spec.trace()[-1][1] == 1


def test_parameter_count_desk_by_hand():
    # c9 4->16, c9 16->32, c5 32->48, c5 48->64, fc 64->512->512->1
    hand = (81 * 4 * 16 + 16) + (81 * 16 * 32 + 32) + (25 * 32 * 48 + 48) + (25 * 48 * 64 + 64)
    hand += (64 * 512 + 512) + (512 * 512 + 512) + (512 + 1)
    spec = CountArchSpec.preset("desk")
    assert count_parameters(spec) == hand
    assert build_countnet(spec).num_params() == hand


def test_parameter_count_full_dominated_by_first_fc():
    spec = CountArchSpec.preset("full")
    total = count_parameters(spec)
    first_fc = spec.widths[-1] * 512 + 512
    assert first_fc == max(first_fc, 512 * 512 + 512)
    assert total > first_fc


@pytest.mark.parametrize("seed", range(3))
def test_full_network_gradients(seed):
    spec = CountArchSpec(26, ("c9", "P", "c9"), (3, 4), fc_widths=(5,))
    net = build_countnet(spec, rng_stream(seed, 3), dtype=CHECK_DTYPE, input_grad=True)
    rng = rng_stream(seed, 4)
    x = rng.normal(size=(3, 4, 26, 26))
    for name, v in net.params().items():
        if name.endswith("bias"):  # keep pre-activations off the ReLU kink at 0
            v[...] = rng.normal(0.0, 0.5, size=v.shape)
    y = rng.normal(2.0, 1.0, size=3)

    def loss():
        return L.smooth_l1(net.forward(x, True), y)[0]

    _, g = L.smooth_l1(net.forward(x, True), y)
    gx = net.backward(g)
    grads = {k: v.copy() for k, v in net.grads().items()}
    for name, p in net.params().items():
        coords = sample_coords(p.size, 8, rng)
        assert rel_error(grads[name], numeric_grad(loss, p, 1e-6, coords), coords) < 1e-3, name
    coords = sample_coords(x.size, 12, rng)
    assert rel_error(gx, numeric_grad(loss, x, 1e-6, coords), coords) < 1e-3


def test_assemble_srgb_resizes_and_pads():
    rgb = rng_stream(0).random((3, 100, 200)).astype(np.float32)
    mask = np.ones((100, 200), np.uint8)
    out = assemble_srgb(rgb, mask, 448)
    assert out.shape == (4, 448, 448) and out.dtype == np.float32
    assert out[0].sum() == 224 * 448
    assert not out[:, 224:].any()
    assert set(np.unique(out[0])) <= {0.0, 1.0}
    # mask channel first, RGB after
    square = rng_stream(1).random((3, 64, 64)).astype(np.float32)
    s = assemble_srgb(square, np.zeros((64, 64), np.uint8), 64)
    np.testing.assert_allclose(s[1:], square, atol=1e-6)
    assert not s[0].any()


def test_assemble_srgb_without_mask_uses_constant_channel():
    out = assemble_srgb(np.zeros((3, 30, 60), np.float32), None, 64)
    assert out[0, :32].all() and not out[0, 32:].any()


def test_round_count():
    assert [round_count(v) for v in (-0.7, 0.49, 0.5, 1.5, 2.5, 3.49)] == [0, 0, 1, 2, 3, 3]


def _plan():
    return AugmentPlan(("identity", "flip_lr"), (("noise", 0.01),))


def test_train_countnet_paths_and_roundtrip():
    recs = generate_synthetic(SynthConfig(seed=5), 4)
    spec = CountArchSpec.preset("desk")
    cfg = CountTrainConfig(epochs=2, batch_size=4, optimizer=OptimizerConfig("adam", lr=1e-3), augment=_plan())
    net, ckpt, log = train_countnet(recs, spec, cfg)
    assert [e["epoch"] for e in log] == [1, 2] and all(np.isfinite(e["mean_loss"]) for e in log)
    again = countnet_from_checkpoint(ckpt)
    x = assemble_srgb(recs[0].rgb, recs[0].mask, 64)
    assert predict_count(again, x) == predict_count(net, x)
    assert ckpt.meta["mask_source"] == "ground_truth"


def test_train_countnet_rgb_only_ablation():
    recs = generate_synthetic(SynthConfig(seed=5), 3)
    cfg = CountTrainConfig(epochs=1, batch_size=4, augment=_plan(), mask_source="none")
    _, ckpt, log = train_countnet(recs, CountArchSpec.preset("desk"), cfg)
    assert log[0]["mask_source"] == "none" and ckpt.meta["mask_source"] == "none"


def test_train_countnet_input_errors():
    recs = generate_synthetic(SynthConfig(seed=5), 2)
    spec = CountArchSpec.preset("desk")
    with pytest.raises(DataError):
        train_countnet(recs, spec, CountTrainConfig(epochs=1, mask_source="segnet"))
    recs[0].count = None
    with pytest.raises(DataError):
        train_countnet(recs, spec, CountTrainConfig(epochs=1))
    with pytest.raises(ValueError):
        CountTrainConfig(mask_source="depth")
