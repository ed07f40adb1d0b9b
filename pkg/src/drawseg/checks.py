"""Finite-difference verification suites for the CLI and the test suite.

All builders run in float64, seed their randomness, and jitter every
parameter (biases start at exactly zero, which parks relu pre-activations
precisely on the kink where central differences and reverse-mode gradients
legitimately disagree). Inputs get a small deterministic ramp added for
the same reason: it pushes pool windows off exact ties.
"""
from __future__ import annotations

import numpy as np

from . import losses as L
from . import tensor as T
from .cbam import build_cbam, cbam_forward, cbam_parameters
from .models import EncoderConfig, ModelVariant, build_model
from .skipfuse import build_skip_block, skip_forward, skip_parameters
from .tensor import GradCheckReport, Tensor, grad_check

SCOPES = ("primitive", "cbam", "skip", "model")


def _jitter(params, rng, scale=0.05):
    for p in params:
        p.data = p.data + rng.uniform(-scale, scale, size=p.data.shape)


def _ramped(rng, shape):
    x = rng.standard_normal(shape)
    return x + np.linspace(0.0, 0.37, x.size).reshape(shape)


def _input(rng, shape):
    return Tensor(_ramped(rng, shape), requires_grad=True)


def _rand(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _sq_loss(t: Tensor) -> Tensor:
    return T.sum_all(T.mul(t, t))


# Each builder returns (params dict, loss builder). Pool and relu inputs
# are ramped off ties; everything runs in float64.
PRIMITIVE_BUILDERS = {}


def _register(name):
    def deco(fn):
        PRIMITIVE_BUILDERS[name] = fn
        return fn
    return deco


@_register("conv2d")
def _b_conv(rng):
    p = {"x": _rand(rng, (1, 2, 4, 4)), "w": _rand(rng, (3, 2, 3, 3)), "b": _rand(rng, (3,))}
    return p, lambda: _sq_loss(T.conv2d(p["x"], p["w"], p["b"]))


@_register("conv2d_stride2_valid")
def _b_conv_s2(rng):
    p = {"x": _rand(rng, (1, 2, 7, 7)), "w": _rand(rng, (2, 2, 3, 3))}
    return p, lambda: _sq_loss(T.conv2d(p["x"], p["w"], None, stride=2, padding="valid"))


@_register("max_pool2d")
def _b_maxpool(rng):
    p = {"x": _input(rng, (1, 2, 4, 4))}
    return p, lambda: _sq_loss(T.max_pool2d(p["x"]))


@_register("avg_pool2d")
def _b_avgpool(rng):
    p = {"x": _rand(rng, (1, 2, 4, 4))}
    return p, lambda: _sq_loss(T.avg_pool2d(p["x"]))


@_register("upsample2x_nearest")
def _b_up_nearest(rng):
    p = {"x": _rand(rng, (1, 2, 3, 3))}
    return p, lambda: _sq_loss(T.upsample2x(p["x"], "nearest"))


@_register("upsample2x_bilinear")
def _b_up_bilinear(rng):
    p = {"x": _rand(rng, (1, 2, 3, 3))}
    return p, lambda: _sq_loss(T.upsample2x(p["x"], "bilinear"))


@_register("concat_channels")
def _b_concat(rng):
    p = {"a": _rand(rng, (1, 2, 3, 3)), "b": _rand(rng, (1, 3, 3, 3))}
    return p, lambda: _sq_loss(T.concat_channels(p["a"], p["b"]))


@_register("mul_broadcast")
def _b_mul(rng):
    p = {"x": _rand(rng, (2, 3, 3, 3)), "w": _rand(rng, (3, 1, 1))}
    return p, lambda: _sq_loss(T.mul(p["x"], p["w"]))


@_register("relu")
def _b_relu(rng):
    p = {"x": _input(rng, (1, 3, 4, 4))}
    return p, lambda: _sq_loss(T.relu(p["x"]))


@_register("sigmoid")
def _b_sigmoid(rng):
    p = {"x": _rand(rng, (1, 3, 4, 4))}
    return p, lambda: _sq_loss(T.sigmoid(p["x"]))


@_register("softmax_channels")
def _b_softmax(rng):
    p = {"x": _rand(rng, (1, 4, 3, 3))}
    return p, lambda: _sq_loss(T.softmax_channels(p["x"]))


@_register("global_avg_pool")
def _b_gavg(rng):
    p = {"x": _rand(rng, (2, 3, 4, 4))}
    return p, lambda: _sq_loss(T.global_avg_pool(p["x"]))


@_register("global_max_pool")
def _b_gmax(rng):
    p = {"x": _input(rng, (2, 3, 4, 4))}
    return p, lambda: _sq_loss(T.global_max_pool(p["x"]))


@_register("channel_avg_pool")
def _b_cavg(rng):
    p = {"x": _rand(rng, (1, 4, 3, 3))}
    return p, lambda: _sq_loss(T.channel_avg_pool(p["x"]))


@_register("channel_max_pool")
def _b_cmax(rng):
    p = {"x": _input(rng, (1, 4, 3, 3))}
    return p, lambda: _sq_loss(T.channel_max_pool(p["x"]))


@_register("dense")
def _b_dense(rng):
    p = {"x": _rand(rng, (2, 3, 1, 1)), "w": _rand(rng, (4, 3)), "b": _rand(rng, (4,))}
    return p, lambda: _sq_loss(T.dense(p["x"], p["w"], p["b"]))


@_register("log_clamp_power_affine")
def _b_scalar_chain(rng):
    p = {"x": _rand(rng, (1, 2, 3, 3))}

    def build():
        s = T.sigmoid(p["x"])
        y = T.log(T.clamp_min(s, 1e-12))
        z = T.power(T.affine(s, -1.0, 1.0), 2.0)
        return T.mean_all(T.mul(y, z))

    return p, build


def _merge(report: GradCheckReport, sub: GradCheckReport, prefix: str) -> None:
    for e in sub.entries:
        report.entries.append(type(e)(f"{prefix}.{e.name}", e.max_rel_err, e.checked))


def check_primitives(tol: float = 1e-5) -> GradCheckReport:
    """Every tensor primitive plus each loss kind against central differences."""
    report = GradCheckReport(tol=tol)
    for name, make in PRIMITIVE_BUILDERS.items():
        rng = np.random.default_rng(abs(hash(name)) % (2 ** 31))
        params, build = make(rng)
        _merge(report, grad_check(build, params, tol=tol), name)
    _merge(report, check_losses(tol), "loss")
    return report


def check_losses(tol: float = 1e-5) -> GradCheckReport:
    report = GradCheckReport(tol=tol)
    rng = np.random.default_rng(2024)
    logits = Tensor(rng.standard_normal((1, 3, 4, 4)), requires_grad=True)
    target = rng.integers(0, 3, size=(1, 4, 4))
    for kind in ("ce", "bce", "poly", "focal"):
        spec = L.LossSpec(kind=kind)
        sub = grad_check(lambda: L.segmentation_loss(spec, logits, target),
                         {"logits": logits}, tol=tol)
        _merge(report, sub, kind)
    return report


def check_cbam(tol: float = 1e-5) -> GradCheckReport:
    rng = np.random.default_rng(7)
    block = build_cbam(4, rng, dtype=np.float64)
    params = dict(cbam_parameters(block))
    _jitter(params.values(), rng)
    x = _input(rng, (1, 4, 4, 4))
    params["input"] = x

    def build():
        out = cbam_forward(x, block)
        return T.mean_all(T.mul(out, out))

    # h=1e-5: composite blocks push the probe through many relu decisions
    return grad_check(build, params, tol=tol, h=1e-5)


def check_skip(tol: float = 1e-5) -> GradCheckReport:
    report = GradCheckReport(tol=tol)
    for ave, cbam in ((True, False), (False, True), (True, True)):
        rng = np.random.default_rng(17)
        block = build_skip_block(4, 8, ave, cbam, rng, dtype=np.float64)
        params = dict(skip_parameters(block))
        _jitter(params.values(), rng)
        shallow = _input(rng, (1, 4, 8, 8))
        deeper = _input(rng, (1, 8, 4, 4))
        params["shallow"] = shallow
        if ave:
            params["deeper"] = deeper

        def build(ave=ave, block=block, shallow=shallow, deeper=deeper):
            out = skip_forward(shallow, deeper if ave else None, block)
            return T.mean_all(T.mul(out, out))

        name = {(True, False): "ave", (False, True): "cbam", (True, True): "ave+cbam"}[(ave, cbam)]
        _merge(report, grad_check(build, params, tol=tol, h=1e-5), name)
    return report


def check_model(tol: float = 1e-4, max_elements: int = 3) -> GradCheckReport:
    """Full unet Base+Ave+CBAM at 1x1x16x16 with sampled coordinates."""
    rng = np.random.default_rng(29)
    enc = EncoderConfig(depth=4, base_width=4, in_channels=1)
    model = build_model(ModelVariant("unet", True, True), enc, 3, seed=11, dtype=np.float64)
    _jitter(model.parameters(), rng)
    x = _input(rng, (1, 1, 16, 16))
    params = dict(model.named_parameters())
    params["input"] = x

    def build():
        out = model.forward(x)
        return T.mean_all(T.mul(out, out))

    # h=1e-5: a first-layer nudge sweeps hundreds of relu/pool decisions
    return grad_check(build, params, tol=tol, h=1e-5, max_elements=max_elements)


def run_scope(scope: str) -> GradCheckReport:
    if scope == "primitive":
        return check_primitives()
    if scope == "cbam":
        return check_cbam()
    if scope == "skip":
        return check_skip()
    if scope == "model":
        return check_model()
    raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
