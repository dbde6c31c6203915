"""Embedded verification suite run by ``daffnet check``.

Each check returns ``(passed, detail)``. Gradient checks compare autograd
against central finite differences in float64; the oracle checks compare
fast implementations against the slow references in :mod:`daffnet.oracles`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import blocks, fields, losses, metrics, ops, oracles, synthdata

__all__ = ["CheckResult", "CHECKS", "gradient_cases", "run_checks"]

GRAD_TOL = 1e-3
FD_STEP = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _leaf(rng: np.random.Generator, *shape, scale: float = 1.0, offset: float = 0.0) -> torch.Tensor:
    return torch.tensor(rng.standard_normal(shape) * scale + offset, dtype=torch.float64, requires_grad=True)


def _offgrid(rng: np.random.Generator, *shape, span: int = 1) -> torch.Tensor:
    # displacements with fractional parts in [0.05, 0.95]: sample points stay
    # clear of the integer lattice where trilinear weights have kinks
    vals = rng.integers(-span, span, shape) + rng.uniform(0.05, 0.95, shape)
    return torch.tensor(vals, dtype=torch.float64, requires_grad=True)


def _probe(out: torch.Tensor, seed: int = 99) -> torch.Tensor:
    # fixed random projection so every output element contributes to the scalar
    r = torch.from_numpy(np.random.default_rng(seed).standard_normal(tuple(out.shape)))
    return (out * r).sum()


def _module_case(module: torch.nn.Module, inputs: list[torch.Tensor], call, seed: int):
    gen = torch.Generator().manual_seed(seed)
    module.reset_parameters(gen)
    with torch.no_grad():
        # zero-initialised heads would hide gradient paths, so re-draw them
        for p in module.parameters():
            if not p.abs().sum():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
    params = [p for p in module.parameters()]
    return (lambda: _probe(call(module, *inputs)), inputs + params)


def gradient_cases() -> dict[str, Callable[[], tuple]]:
    """Name -> factory returning ``(loss_fn, tensors)``; call factories inside float64 precision."""
    cases: dict[str, Callable[[], tuple]] = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn

        return deco

    @case("conv3d")
    def _():
        rng = np.random.default_rng(1)
        x, k, b = _leaf(rng, 1, 2, 4, 4, 4), _leaf(rng, 3, 2, 3, 3, 3), _leaf(rng, 3)
        return lambda: _probe(ops.conv3d(x, k, b)), [x, k, b]

    @case("conv3d_stride2")
    def _():
        rng = np.random.default_rng(2)
        x, k, b = _leaf(rng, 1, 2, 6, 6, 6), _leaf(rng, 2, 2, 3, 3, 3), _leaf(rng, 2)
        return lambda: _probe(ops.conv3d(x, k, b, stride=2)), [x, k, b]

    for kind in ("average", "max"):

        @case(f"pool3d_{kind}")
        def _(kind=kind):
            x = _leaf(np.random.default_rng(3), 1, 2, 4, 4, 4)
            return lambda: _probe(ops.pool3d(x, kind)), [x]

        @case(f"adaptive_pool3d_{kind}")
        def _(kind=kind):
            x = _leaf(np.random.default_rng(4), 1, 3, 3, 3, 3)
            return lambda: _probe(ops.adaptive_pool3d(x, kind)), [x]

        @case(f"channel_reduce_{kind}")
        def _(kind=kind):
            x = _leaf(np.random.default_rng(5), 1, 3, 3, 3, 3)
            return lambda: _probe(ops.channel_reduce(x, kind)), [x]

    for scale in (0.5, 2.0):

        @case(f"trilinear_resize_{scale:g}")
        def _(scale=scale):
            x = _leaf(np.random.default_rng(6), 1, 2, 4, 4, 4)
            return lambda: _probe(ops.trilinear_resize(x, scale)), [x]

    @case("instance_norm")
    def _():
        rng = np.random.default_rng(7)
        x, g, b = _leaf(rng, 1, 2, 4, 4, 4), _leaf(rng, 2), _leaf(rng, 2)
        return lambda: _probe(ops.instance_norm(x, g, b)), [x, g, b]

    for kind in ("leaky_relu", "sigmoid", "softmax"):

        @case(f"activation_{kind}")
        def _(kind=kind):
            x = _leaf(np.random.default_rng(8), 1, 4, 3, 3, 3)
            return lambda: _probe(ops.activation(x, kind)), [x]

    @case("linear")
    def _():
        rng = np.random.default_rng(9)
        x, w, b = _leaf(rng, 2, 5), _leaf(rng, 3, 5), _leaf(rng, 3)
        return lambda: _probe(ops.linear(x, w, b)), [x, w, b]

    @case("gaussian_filter3d")
    def _():
        x = _leaf(np.random.default_rng(10), 1, 2, 6, 6, 6)
        return lambda: _probe(ops.gaussian_filter3d(x)), [x]

    @case("warp")
    def _():
        rng = np.random.default_rng(11)
        src, u = _leaf(rng, 1, 2, 5, 5, 5), _offgrid(rng, 1, 3, 5, 5, 5)
        return lambda: _probe(fields.warp(src, u)), [src, u]

    @case("compose")
    def _():
        rng = np.random.default_rng(12)
        a, b = _leaf(rng, 1, 3, 5, 5, 5, scale=0.5), _offgrid(rng, 1, 3, 5, 5, 5)
        return lambda: _probe(fields.compose(a, b)), [a, b]

    @case("upsample_field")
    def _():
        u = _leaf(np.random.default_rng(13), 1, 3, 3, 3, 3)
        return lambda: _probe(fields.upsample_field(u)), [u]

    @case("integrate_velocity")
    def _():
        v = _leaf(np.random.default_rng(14), 1, 3, 4, 4, 4, scale=0.5)
        return lambda: _probe(fields.integrate_velocity(v, 7)), [v]

    @case("sample_velocity")
    def _():
        rng = np.random.default_rng(15)
        mu, lv = _leaf(rng, 1, 3, 3, 3, 3), _leaf(rng, 1, 3, 3, 3, 3, scale=0.3)

        def fn():
            g = torch.Generator().manual_seed(0)
            return _probe(fields.sample_velocity(mu, lv, "train", g))

        return fn, [mu, lv]

    @case("jacobian_det")
    def _():
        u = _leaf(np.random.default_rng(16), 1, 3, 4, 4, 4, scale=0.3)
        return lambda: _probe(fields.jacobian_det(u)), [u]

    @case("ConvB")
    def _():
        x = _leaf(np.random.default_rng(17), 1, 2, 4, 4, 4)
        return _module_case(blocks.ConvBlock(2, 3), [x], lambda m, x: m(x), 17)

    @case("FEB")
    def _():
        x = _leaf(np.random.default_rng(18), 1, 2, 4, 4, 4)

        def call(m, x):
            mu, lv, u = m(x, mode="train", generator=torch.Generator().manual_seed(1))
            return torch.cat([mu, lv, u], dim=1)

        return _module_case(blocks.FlowEstimator(2), [x], call, 18)

    @case("global_attention")
    def _():
        rng = np.random.default_rng(19)
        xs = [_leaf(rng, 1, 2, 3, 3, 3), _leaf(rng, 1, 2, 3, 3, 3), _leaf(rng, 1, 3, 3, 3, 3)]
        return _module_case(
            blocks.GlobalAttention((2, 2, 3)), xs, lambda m, a, b, c: torch.cat(m(a, b, c), dim=1), 19
        )

    @case("local_attention")
    def _():
        x = _leaf(np.random.default_rng(20), 1, 2, 4, 4, 4)
        return _module_case(blocks.LocalAttention(), [x], lambda m, x: m(x), 20)

    @case("DAFF")
    def _():
        rng = np.random.default_rng(21)
        xs = [_leaf(rng, 1, 2, 4, 4, 4) for _ in range(3)] + [_leaf(rng, 1, 2, 4, 4, 4) for _ in range(2)]
        return _module_case(blocks.DAFF(2, 2, 2, 2), xs, lambda m, *a: m(*a), 21)

    @case("ncc_loss")
    def _():
        rng = np.random.default_rng(22)
        f, w = _leaf(rng, 1, 1, 5, 5, 5), _leaf(rng, 1, 1, 5, 5, 5)
        return lambda: losses.ncc_loss(f, w, 3), [f, w]

    @case("smooth_loss")
    def _():
        u = _leaf(np.random.default_rng(23), 1, 3, 4, 4, 4)
        return lambda: losses.smooth_loss(u), [u]

    @case("njd_loss")
    def _():
        u = _leaf(np.random.default_rng(24), 1, 3, 4, 4, 4, scale=0.8)
        return lambda: losses.njd_loss(u), [u]

    def _probs(rng, shape):
        return torch.softmax(torch.from_numpy(rng.standard_normal(shape)), dim=1).requires_grad_(True)

    def _onehot(rng, shape):
        lab = torch.from_numpy(rng.integers(0, shape[1], (shape[0], 1, *shape[2:])))
        return losses.one_hot(lab, shape[1])

    @case("dice_loss")
    def _():
        rng = np.random.default_rng(25)
        t, p = _onehot(rng, (1, 4, 3, 3, 3)), _probs(rng, (1, 4, 3, 3, 3))
        return lambda: losses.dice_loss(t[:, 1:], p[:, 1:]), [p]

    @case("focal_loss")
    def _():
        rng = np.random.default_rng(26)
        t, p = _probs(rng, (1, 4, 3, 3, 3)), _probs(rng, (1, 4, 3, 3, 3))
        return lambda: losses.focal_loss(t, p), [t, p]

    @case("total_loss_DAFFNet")
    def _():
        rng = np.random.default_rng(27)
        shape = (1, 4, 4, 4, 4)
        fixed, moving = _leaf(rng, 1, 1, 4, 4, 4), _leaf(rng, 1, 1, 4, 4, 4)
        u = _leaf(rng, 1, 3, 4, 4, 4, scale=0.4)
        lm, lf = _onehot(rng, shape), _onehot(rng, shape)
        sm, sf = _probs(rng, shape), _probs(rng, shape)
        cfg = losses.LossConfig(ncc_window=3, lambda_njd=0.1)

        def fn():
            return losses.total_loss("DAFFNet", fixed, moving, u, cfg, lm, lf, sm, sf).total

        return fn, [fixed, moving, u, sm, sf]

    return cases


def run_gradient_case(name: str, max_elements: int | None = 24) -> float:
    with ops.precision(torch.float64):
        fn, tensors = gradient_cases()[name]()
        return ops.finite_difference_check(
            fn, tensors, step=FD_STEP, max_elements=max_elements, generator=np.random.default_rng(0)
        )


def check_gradients(max_elements: int | None = 24):
    bad, worst = [], 0.0
    for name in gradient_cases():
        err = run_gradient_case(name, max_elements)
        worst = max(worst, err)
        if not err < GRAD_TOL:
            bad.append(f"{name}={err:.2e}")
    if bad:
        return False, "failing: " + ", ".join(bad)
    return True, f"{len(gradient_cases())} operations, worst rel. error {worst:.2e}"


def integration_velocity(seed: int, dims=(16, 16, 16), vmax: float = 2.0) -> torch.Tensor:
    """Smooth test velocity: a 2-cubed random control grid upsampled, max norm ``vmax``."""
    rng = np.random.default_rng(seed)
    return synthdata.random_velocity(rng, dims, coarse=dims[0] // 2) * vmax


def integration_discrepancy(count: int = 20, substeps: int = 1024) -> float:
    worst = 0.0
    with ops.precision(torch.float64):
        for s in range(count):
            v = integration_velocity(s)
            ss = fields.integrate_velocity(v, fields.DEFAULT_INTEGRATION_STEPS)[0].numpy()
            eu = oracles.euler_integrate(v[0].numpy(), substeps)
            worst = max(worst, float(np.abs(ss - eu).max()))
    return worst


def check_integration(count: int = 20):
    worst = integration_discrepancy(count)
    return worst < 1e-2, f"max |S&S - Euler| = {worst:.2e} voxels over {count} velocities"


def random_label_map(rng: np.random.Generator, shape=(10, 10, 10), classes: int = 4) -> np.ndarray:
    from scipy.ndimage import gaussian_filter

    noise = gaussian_filter(rng.standard_normal(shape), rng.uniform(0.8, 2.0))
    edges = np.quantile(noise, np.sort(rng.uniform(0.2, 0.9, classes - 1)))
    return np.digitize(noise, edges).astype(np.int64)


def check_metric_oracles(count: int = 50):
    rng = np.random.default_rng(0)
    for i in range(count):
        a, b = random_label_map(rng), random_label_map(rng)
        for k in (1, 2, 3):
            if (a == k).any() and (b == k).any():
                fast, slow = metrics.assd(a, b, k), oracles.assd(a, b, k)
                if fast != slow:
                    return False, f"ASSD instance {i} class {k}: {fast!r} != {slow!r}"
            if metrics.dsc(a, b, k) != oracles.dice_counts(a, b, k):
                return False, f"DSC instance {i} class {k} differs from set counting"
            ta = torch.from_numpy((a == k).astype(np.float64))[None, None]
            tb = torch.from_numpy((b == k).astype(np.float64))[None, None]
            dl = float(losses.dice_loss(ta, tb))
            inter, na, nb = oracles.set_counts(a, b, k)
            expect = -(2.0 * inter / (na + nb)) if na + nb else 0.0
            if dl != expect:
                return False, f"Dice loss instance {i} class {k}: {dl!r} != {expect!r}"
    for name, field, expect in njd_fold_cases():
        got = metrics.njd_percent(field)
        if got != expect:
            return False, f"NJD case {name}: {got} != {expect}"
    return True, f"{count} random instances, {len(njd_fold_cases())} fold cases"


def njd_fold_cases():
    """Hand-built fields with a known fraction of non-positive Jacobian determinants."""
    d = 8
    cases = [("identity", torch.zeros(1, 3, d, d, d), 0.0)]
    u = torch.zeros(1, 3, d, d, d)
    u[0, 0, 3:] = -3.0  # one slab of forward differences equal to -3 along depth
    cases.append(("single_slab", u, 100.0 / d))
    u = torch.zeros(1, 3, d, d, d)
    u[0, 1, :, 5:] = -1.0  # determinant exactly 0 on one slab counts as folded
    cases.append(("zero_det_slab", u, 100.0 / d))
    ramp = torch.arange(d, dtype=torch.float32)
    u = torch.zeros(1, 3, d, d, d)
    u[0, 2] = -1.5 * ramp  # global reflection-like compression
    cases.append(("global_fold", u, 100.0))
    u = torch.zeros(1, 3, d, d, d)
    u[0, 0, 2:] = -2.0
    u[0, 1, :, 4:] = -2.0  # det (1-2)(1-2) = +1 where both slabs cross
    cases.append(("double_fold", u, 100.0 * (2 * d * d - 2 * d) / d**3))
    return cases


def check_identities():
    with ops.precision(torch.float64):
        rng = np.random.default_rng(0)
        daff = blocks.DAFF(2, 2, 2, 2)
        daff.reset_parameters(torch.Generator().manual_seed(0))
        xs = [torch.from_numpy(rng.standard_normal((1, 2, 6, 6, 6))) for _ in range(5)]
        with torch.no_grad():
            _, parts = daff(*xs, return_parts=True)
            w = daff.global_attention.weights(*daff_sources(daff, xs))
        split = float((parts["G_low"] + parts["G_high"] - parts["G"]).abs().max())
        wsum = float((w.sum(dim=1) - 1).abs().max())
        src = torch.from_numpy(rng.standard_normal((1, 2, 6, 6, 6)))
        warp_exact = bool(torch.equal(fields.warp(src, torch.zeros(1, 3, 6, 6, 6)), src))
        zero_v = fields.is_identity(fields.integrate_velocity(torch.zeros(1, 3, 6, 6, 6)))
        ident = torch.zeros(1, 3, 6, 6, 6)
        reg_zero = float(losses.smooth_loss(ident)) == 0.0 and float(losses.njd_loss(ident)) == 0.0
    ok = split < 1e-6 and wsum < 1e-6 and warp_exact and zero_v and reg_zero
    return ok, (
        f"|G_low+G_high-G|={split:.1e}, |sum w - 1|={wsum:.1e}, identity warp exact={warp_exact}, "
        f"zero velocity -> identity={zero_v}, regularisers of identity zero={reg_zero}"
    )


def daff_sources(daff: blocks.DAFF, xs):
    warped, fixed, prior, seg_m, seg_f = xs
    return daff.seg_merge(seg_m, seg_f), daff.feat_merge(warped, fixed), prior


def check_loss_identities():
    with ops.precision(torch.float64):
        rng = np.random.default_rng(1)
        img = torch.from_numpy(rng.uniform(0, 1, (1, 1, 12, 12, 12)))
        ncc = float(losses.ncc_loss(img, 2.5 * img + 0.3, 9))
        x = torch.from_numpy((rng.uniform(size=(1, 3, 6, 6, 6)) > 0.5).astype(np.float64))
        dice = float(losses.dice_loss(x, x))
        lab = torch.from_numpy(rng.integers(0, 4, (1, 1, 6, 6, 6)))
        oh = losses.one_hot(lab, 4)
        focal = float(losses.focal_loss(oh, oh))
        fixed, moving = img, torch.from_numpy(rng.uniform(0, 1, (1, 1, 12, 12, 12)))
        u = torch.from_numpy(rng.standard_normal((1, 3, 12, 12, 12)) * 0.5)
        probs = torch.softmax(torch.from_numpy(rng.standard_normal((1, 4, 12, 12, 12))), dim=1)
        lab12 = losses.one_hot(torch.from_numpy(rng.integers(0, 4, (1, 1, 12, 12, 12))), 4)
        cfg = losses.LossConfig(lambda_seg=0.0, lambda_fuse=0.0)
        total = float(losses.total_loss("DAFFNet", fixed, moving, u, cfg, lab12, lab12, probs, probs).total)
        reg = losses.ncc_loss(fixed, fields.warp(moving, u)) + losses.smooth_loss(u) + cfg.lambda_njd * losses.njd_loss(u)
        comp = abs(total - float(reg))
    ok = abs(ncc + 1) < 1e-4 and dice == -1.0 and focal == 0.0 and comp < 1e-6
    return ok, f"ncc(I, aI+b)={ncc:.6f}, dice(x,x)={dice}, focal(perfect)={focal}, |total - reg terms|={comp:.1e}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients": check_gradients,
    "integration_oracle": check_integration,
    "metric_oracles": check_metric_oracles,
    "exact_identities": check_identities,
    "loss_identities": check_loss_identities,
}


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            passed, detail = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results
