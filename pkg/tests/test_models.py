"""Variant construction, shape contracts, parameter accounting, checkpoints."""
import numpy as np
import pytest

from drawseg import models as M
from drawseg import tensor as T
from drawseg.tensor import Tensor

DESK = M.EncoderConfig(depth=4, base_width=8, in_channels=1)


def unet_base_param_count(enc: M.EncoderConfig, k: int) -> int:
    """Closed-form parameter total for the plain unet variant."""
    widths = enc.widths()
    convs = enc.convs()
    total = 0
    cin = enc.in_channels
    for lvl in range(enc.depth):
        w = widths[lvl]
        for i in range(convs[lvl]):
            total += 9 * (cin if i == 0 else w) * w + w
        cin = w
    for lvl in range(enc.depth - 2, -1, -1):
        w = widths[lvl]
        total += 9 * (widths[lvl + 1] + w) * w + w
        total += 9 * w * w + w
    w0 = widths[0]
    total += 9 * w0 * w0 + w0          # head 3x3
    total += w0 * k + k                # head 1x1
    return total


def skip_full_param_count(c: int, d: int, reduction: int = 4, sw: int = 2) -> int:
    """Closed-form parameter total of one ave+cbam skip block."""
    total = 2 * (9 * c * c + c)        # two 3x3 convs on the pooled branch
    total += (c + d) * d + d           # 1x1 fuse
    hidden = max(1, d // reduction)
    total += hidden * d + d * hidden   # shared MLP
    total += 9 * 2 * sw + sw           # spatial conv 2 -> sw
    total += 9 * sw * sw + sw          # spatial conv sw -> sw
    total += 9 * sw * 1 + 1            # spatial conv sw -> 1
    total += (c + d) * c + c           # 1x1 reduce
    return total


class TestConfig:
    def test_widths_double_and_cap(self):
        enc = M.EncoderConfig(depth=5, base_width=64, convs_per_block=(2, 2, 3, 3, 3))
        assert enc.widths() == [64, 128, 256, 512, 512]

    def test_variant_parse_roundtrip(self):
        for v in M.ALL_VARIANTS:
            assert M.ModelVariant.parse(v.cli_name) == v

    def test_variant_parse_rejects_unknown(self):
        with pytest.raises(ValueError):
            M.ModelVariant.parse("resnet-base")

    def test_exactly_eight_variants(self):
        assert len(M.ALL_VARIANTS) == 8
        names = {v.row_name for v in M.ALL_VARIANTS}
        assert names == {"Base", "Base+Ave", "Base+CBAM", "Base+Ave+CBAM"}


class TestBuild:
    def test_same_seed_bit_identical(self):
        v = M.ModelVariant("unet", True, True)
        a = M.build_model(v, DESK, 6, seed=3)
        b = M.build_model(v, DESK, 6, seed=3)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        v = M.ModelVariant("unet", False, False)
        a = M.build_model(v, DESK, 6, seed=3)
        b = M.build_model(v, DESK, 6, seed=4)
        assert any(not np.array_equal(ta.data, tb.data)
                   for ta, tb in zip(a.parameters(), b.parameters()))

    def test_base_count_matches_closed_form(self):
        model = M.build_model(M.ModelVariant("unet", False, False), DESK, 6, seed=0)
        assert model.count_params() == unet_base_param_count(DESK, 6)

    def test_full_minus_base_is_skip_total(self):
        base = M.build_model(M.ModelVariant("unet", False, False), DESK, 6, seed=0)
        full = M.build_model(M.ModelVariant("unet", True, True), DESK, 6, seed=0)
        widths = DESK.widths()
        skips = sum(skip_full_param_count(widths[i], widths[i + 1])
                    for i in range(DESK.depth - 1))
        assert full.count_params() - base.count_params() == skips

    def test_ablation_counts_monotonic(self):
        def count(ave, cbam):
            return M.build_model(M.ModelVariant("unet", ave, cbam), DESK, 6, seed=0).count_params()

        base = count(False, False)
        assert base < count(True, False)
        assert base < count(False, True) < count(True, True)

    def test_paper_scale_builds_with_final_width_64(self):
        enc = M.EncoderConfig(depth=5, base_width=64, in_channels=1,
                              convs_per_block=(2, 2, 3, 3, 3))
        model = M.build_model(M.ModelVariant("unet", True, True), enc, 6, seed=0)
        assert model.decoder_final_width == 64
        assert model.enc.divisor == 16  # 512x512 inputs are compatible

    def test_num_classes_lower_bound(self):
        with pytest.raises(ValueError):
            M.build_model(M.ModelVariant("unet", False, False), DESK, 1, seed=0)


class TestForward:
    def test_desk_shape_contract(self):
        model = M.build_model(M.ModelVariant("unet", True, True), DESK, 6, seed=0)
        x = Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))
        assert model.forward(x).shape == (1, 6, 64, 64)

    @pytest.mark.parametrize("variant", M.ALL_VARIANTS, ids=lambda v: v.cli_name)
    def test_all_variants_same_output_shape(self, variant):
        rng = np.random.default_rng(1)
        model = M.build_model(variant, DESK, 6, seed=0)
        x = Tensor(rng.standard_normal((2, 1, 32, 32)).astype(np.float32))
        out = model.forward(x)
        assert out.shape == (2, 6, 32, 32)
        assert np.isfinite(out.data).all()

    def test_forward_deterministic(self):
        model = M.build_model(M.ModelVariant("cnn", True, True), DESK, 6, seed=5)
        x = Tensor(np.random.default_rng(2).standard_normal((1, 1, 16, 16)).astype(np.float32))
        np.testing.assert_array_equal(model.forward(x).data, model.forward(x).data)

    def test_divisibility_rejected_with_message(self):
        model = M.build_model(M.ModelVariant("unet", False, False), DESK, 6, seed=0)
        x = Tensor(np.zeros((1, 1, 60, 60), dtype=np.float32))
        with pytest.raises(T.ShapeError, match="divisible by 2"):
            model.forward(x)

    def test_full_model_gradient_check(self):
        from drawseg.checks import check_model
        report = check_model()
        assert report.passed, report.summary()


class TestFreezing:
    def test_frozen_excludes_encoder_params(self):
        model = M.build_model(M.ModelVariant("unet", True, True), DESK, 6, seed=0)
        n_all = len(model.trainable_parameters())
        M.set_encoder_frozen(model, True)
        trainable = model.trainable_parameters()
        assert 0 < len(trainable) < n_all
        names = {t.name for t in trainable}
        assert not any(name.startswith("enc.") for name in names)
        assert any(name.startswith("dec.") for name in names)
        assert any(name.startswith("head.") for name in names)

    def test_toggle_is_involution(self):
        model = M.build_model(M.ModelVariant("cnn", False, False), DESK, 6, seed=0)
        before = [t.name for t in model.trainable_parameters()]
        model.set_frozen(True)
        model.set_frozen(False)
        assert [t.name for t in model.trainable_parameters()] == before

    def test_count_invariant_under_freezing(self):
        model = M.build_model(M.ModelVariant("unet", False, True), DESK, 6, seed=0)
        n = model.count_params()
        model.set_frozen(True)
        assert model.count_params() == n

    def test_cnn_freeze_covers_conv_stack(self):
        model = M.build_model(M.ModelVariant("cnn", True, True), DESK, 6, seed=0)
        model.set_frozen(True)
        names = {t.name for t in model.trainable_parameters()}
        assert not any(n.startswith("cnn.b") for n in names)
        assert any(n.startswith("cnn.cbam") for n in names)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = M.build_model(M.ModelVariant("unet", True, True), DESK, 6, seed=9)
        path = tmp_path / "m.segm"
        M.save_checkpoint(model, path)
        loaded = M.load_checkpoint(path)
        assert loaded.variant == model.variant
        assert loaded.enc == model.enc
        assert loaded.num_classes == model.num_classes
        for ta, tb in zip(model.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_roundtrip_preserves_forward(self, tmp_path):
        model = M.build_model(M.ModelVariant("cnn", True, False), DESK, 6, seed=9)
        path = tmp_path / "m.segm"
        M.save_checkpoint(model, path)
        loaded = M.load_checkpoint(path)
        x = Tensor(np.random.default_rng(3).standard_normal((1, 1, 16, 16)).astype(np.float32))
        np.testing.assert_array_equal(model.forward(x).data, loaded.forward(x).data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.segm"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(ValueError, match="magic"):
            M.load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        model = M.build_model(M.ModelVariant("unet", False, False), DESK, 6, seed=0)
        path = tmp_path / "m.segm"
        M.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(ValueError, match="bytes"):
            M.load_checkpoint(path)
