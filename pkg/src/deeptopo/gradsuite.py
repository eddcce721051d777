"""Finite-difference gradient suite over every differentiable operator.

Each registered check builds small 64-bit fixtures, reduces the operator
output with a fixed random projection ``Σ out ⊙ P`` and compares the
reverse-mode gradient with central differences on every input element.

The full toy model is too large for element-wise differences, so it is
checked with directional derivatives: for random directions ``V``
(one over all parameters, then one per parameter tensor)
``⟨∇f, V⟩`` is compared with ``(f(θ + hV) - f(θ - hV)) / 2h``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import atrm as _atrm
from . import losses as _losses
from . import wcap as _wcap
from .backbone import DeepTopoNet, ModelConfig, patchify, random_mask, unpatchify
from .rng import derive_seed, make_rng
from .tensor import Tensor, no_grad, record_branches, replay_branches
from .tensor import ops as O
from .tensor.core import make_result

TOLERANCE = 1e-4
STEP = 1e-5
E2E_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seconds: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < TOLERANCE


def rel_err(analytic, numeric) -> float:
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def t64(rng, *shape, scale=1.0, positive=False) -> Tensor:
    x = rng.standard_normal(shape) * scale
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def away_from(x: np.ndarray, points=(0.0,), margin=0.05) -> np.ndarray:
    """Nudge entries closer than ``margin`` to a kink so differences stay one-sided-free."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.where(x[near] >= p, margin, -margin)
    return x


def projected(fn: Callable[..., Tensor], out_shape_seed: int = 7):
    """Wrap ``fn`` as the scalar ``Σ fn(...) ⊙ P`` with a fixed projection ``P``."""
    cache = {}

    def closure(*args):
        out = fn(*args)
        if out.shape not in cache:
            cache[out.shape] = make_rng(derive_seed(out_shape_seed, *out.shape)).standard_normal(out.shape)
        return (out * cache[out.shape]).sum()

    return closure


def elementwise(closure, inputs: Sequence[Tensor], step: float = STEP) -> float:
    """Central differences on every input element (same metric as ``grad_check``)."""
    from .tensor import grad_check
    return grad_check(closure, list(inputs), step)


# -- fixtures ----------------------------------------------------------------
# each returns (closure, inputs)


def _unary(op, positive=False, kink=None):
    def build(rng):
        x = t64(rng, 3, 4, positive=positive)
        if kink is not None:
            x.data[...] = away_from(x.data, kink)
        return projected(op), [x]
    return build


def _binary(op, positive_b=False):
    def build(rng):
        return projected(op), [t64(rng, 3, 4), t64(rng, 4, positive=positive_b)]
    return build


def _conv(stride, padding, k, c_in=3, c_out=4, size=7):
    def build(rng):
        x = t64(rng, 2, c_in, size, size)
        w = t64(rng, c_out, c_in, k, k, scale=0.5)
        b = t64(rng, c_out)
        return projected(lambda x, w, b: O.conv2d(x, w, b, stride, padding)), [x, w, b]
    return build


def _depthwise(rng):
    x, w = t64(rng, 2, 3, 6, 6), t64(rng, 3, 3, 3)
    return projected(lambda x, w: O.depthwise_conv2d(x, w, padding=1)), [x, w]


def _depthwise_taps(rng):
    x, w = t64(rng, 3, 6, 6), t64(rng, 3, 5, 5)
    taps = [(0, 0), (0, 1), (0, 2)]
    return projected(lambda x, w: O.depthwise_conv2d(x, w, padding=2, taps=taps)), [x, w]


def _bilinear(rng):
    x = t64(rng, 2, 5, 5)
    c = rng.uniform(-1.5, 5.5, (9, 2))
    # keep off the integer lattice where bilinear weights have kinks
    c = np.floor(c) + np.clip(c - np.floor(c), 0.1, 0.9)
    return projected(O.bilinear_sample), [x, Tensor(c, requires_grad=True)]


def _linear(rng):
    return projected(O.linear), [t64(rng, 5, 4), t64(rng, 3, 4), t64(rng, 3)]


def _matmul(rng):
    return projected(O.matmul), [t64(rng, 2, 3, 4), t64(rng, 2, 4, 5)]


def _softmax(rng):
    return projected(lambda x: O.softmax(x, axis=-1)), [t64(rng, 3, 5)]


def _layer_norm(rng):
    return projected(O.layer_norm), [t64(rng, 4, 6), t64(rng, 6), t64(rng, 6)]


def _batch_norm(training):
    def build(rng):
        rm, rv = rng.standard_normal(3) * 0.1, np.abs(rng.standard_normal(3)) + 0.5

        def f(x, w, b):
            return O.batch_norm_2d(x, w, b, rm.copy(), rv.copy(), training)
        return projected(f), [t64(rng, 2, 3, 4, 4), t64(rng, 3), t64(rng, 3)]
    return build


def _attention(rng):
    d, n, heads = 8, 5, 2
    names = ["norm1.weight", "norm1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight",
             "attn.proj.bias", "norm2.weight", "norm2.bias", "mlp.fc1.weight", "mlp.fc1.bias",
             "mlp.fc2.weight", "mlp.fc2.bias"]
    shapes = [(d,), (d,), (3 * d, d), (2 * d,), (d, d), (d,), (d,), (d,), (4 * d, d), (4 * d,), (d, 4 * d), (d,)]
    params = [t64(rng, *s, scale=0.5) for s in shapes]
    # a key bias shifts a whole score row, so its gradient is identically zero:
    # hold it fixed and check only the query/value slices
    k_bias = rng.standard_normal(d) * 0.5

    def f(x, *ps):
        ps = list(ps)
        qv = ps[3]
        ps[3] = O.concat([qv[:d], Tensor(k_bias), qv[d:]], axis=0)
        return O.attention_block(x, heads, dict(zip(names, ps)))
    return projected(f), [t64(rng, n, d)] + params


def _take_tokens(rng):
    idx = np.array([[0, 2, 3], [1, 3, 4]])
    return projected(lambda x: O.take_tokens(x, idx)), [t64(rng, 2, 5, 3)]


def _concat_stack(rng):
    return projected(lambda a, b: O.concat([O.stack([a, b], axis=0), O.stack([b, a], axis=0)], axis=1)), \
        [t64(rng, 3, 2), t64(rng, 3, 2)]


def _shape_ops(rng):
    def f(x):
        y = O.transpose(O.reshape(x, (4, 3, 2)), (2, 0, 1))
        y = O.getitem(y, (slice(None), slice(1, 3)))
        return O.broadcast_to(O.mean(y, axis=0, keepdims=True), (3, 2, 3)) + O.sum(y, axis=1).sum()
    return projected(f), [t64(rng, 6, 4)]


def _gap(rng):
    return projected(O.global_avg_pool), [t64(rng, 2, 3, 4, 4)]


def _upsample(rng):
    return projected(O.bilinear_upsample_x2), [t64(rng, 2, 3, 4, 5)]


# wcap


def _wcap_params(rng, c, c_out=None):
    c_out = c if c_out is None else c_out
    shapes = {
        "metric.fc1.weight": (16, 6), "metric.fc1.bias": (16,),
        "metric.fc2.weight": (3, 16), "metric.fc2.bias": (3,),
        "warp_weight": (c_out, c, 3, 3),
        "gate.proj.weight": (32, c_out), "gate.proj.bias": (32,),
        "gate.fc1.weight": (32, 38), "gate.fc1.bias": (32,),
        "gate.fc2.weight": (c_out, 32), "gate.fc2.bias": (c_out,),
    }
    # 1/sqrt(fan-in) keeps the gate sigmoid out of saturation
    return {k: t64(rng, *s, scale=0.5 if len(s) == 1 else 1.0 / np.sqrt(np.prod(s[1:])))
            for k, s in shapes.items()}


def _project_descriptor(rng):
    return projected(_wcap.project_descriptor), [t64(rng, 7, 5), t64(rng, 6, 5), t64(rng, 6)]


def _build_metric(rng):
    p = _wcap_params(rng, 2)
    keys = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]

    def f(g, *ps):
        st = _wcap.build_metric(g, dict(zip(keys, ps)))
        return O.concat([O.reshape(st.G, (4,)), O.reshape(st.L, (4,))], axis=0)
    return projected(f), [t64(rng, 6)] + [p["metric." + k] for k in keys]


def _warp_offsets(rng):
    def f(raw):
        st = _wcap.metric_from_chol_params(raw)
        return _wcap.warp_offsets(st.L, 3).warped_offsets
    return projected(f), [t64(rng, 3)]


def _warped_conv(rng):
    x, w, raw = t64(rng, 2, 5, 5), t64(rng, 3, 2, 3, 3, scale=0.5), t64(rng, 3, scale=0.5)
    raw.data[...] = [0.3, 0.37, -0.2]  # generic: offsets away from integer lattice points

    def f(x, w, raw):
        L = _wcap.metric_from_chol_params(raw).L
        return _wcap.warped_conv(x, w, _wcap.warp_offsets(L, 3))
    return projected(f), [x, w, raw]


def _laplacian(rng):
    return projected(_wcap.laplacian_highpass), [t64(rng, 2, 5, 5)]


def _freq_gate(rng):
    c = 3
    p = _wcap_params(rng, c)
    keys = [k for k in p if k.startswith("gate.")]

    def f(fhp, g, *ps):
        return _wcap.freq_gate(fhp, g, {k[5:]: v for k, v in zip(keys, ps)})
    return projected(f), [t64(rng, c, 4, 4), t64(rng, 6)] + [p[k] for k in keys]


def _wcap_forward(rng):
    c = 2
    p = _wcap_params(rng, c)
    p["metric.fc2.bias"].data[...] = [0.3, 0.37, -0.2]
    keys = list(p)

    def f(x, g, *ps):
        return _wcap.wcap_forward(x, g, dict(zip(keys, ps)))
    return projected(f), [t64(rng, c, 5, 5), t64(rng, 6, scale=0.1)] + [p[k] for k in keys]


# atrm


def _astb(rng):
    c = 2
    bank = _atrm.make_direction_kernels(5, c)
    kern = Tensor(bank.kernels.data * rng.uniform(0.5, 1.5, bank.kernels.shape) * bank.support_masks[:, None],
                  requires_grad=True)
    fw = t64(rng, c, 8 * c, 1, 1, scale=0.5)

    def f(x, k, w):
        b = _atrm.DirectionalKernelBank(bank.angles, k, bank.support_masks, bank.offsets)
        return _atrm.astb_forward(x, b, w)
    return projected(f), [t64(rng, 2, c, 5, 6), kern, fw]


def _stage_module(rng, c_in, c_out):
    st = _atrm.UpsampleStage(c_in, c_out, rng, np.float64)
    for _, p in st.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5 + (1.0 if p.ndim == 1 and p.shape == (c_out,) else 0.0)
    return st


def _upsample_stage(rng):
    st = _stage_module(rng, 3, 2)
    params = [p for _, p in st.named_parameters()]

    return projected(lambda x, *ps: _atrm.upsample_stage(x, st)), [t64(rng, 2, 3, 3, 3)] + params


def _atrm_forward(rng):
    cfg = _atrm.AtrmConfig(2, (3, 2), 5, 4)
    mod = _atrm.ATRM(3, cfg, rng, np.float64)
    for _, p in mod.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.5
    for name, mask in mod.named_masks():
        mod.param_dict()[name].data *= mask
    params = [p for _, p in mod.named_parameters()]
    return projected(lambda x, *ps: _atrm.atrm_forward(x, mod)), [t64(rng, 2, 3, 3, 3)] + params


# backbone


def _patchify(rng):
    def f(x):
        return unpatchify(patchify(x, 2) * 2.0, 2)
    return projected(f), [t64(rng, 2, 3, 4, 4)]


# losses


def _bce(rng):
    t = (rng.random((3, 4)) > 0.5).astype(np.float64)
    return projected(lambda z: _losses.bce_with_logits(z, t)), [t64(rng, 3, 4)]


def _seg_loss(rng):
    gt = rng.random((2, 6, 6)) > 0.7
    gt[:, 0, 0] = True
    wms = [_losses.dynamic_weight(g) for g in gt]
    return (lambda z: _losses.seg_loss(z, gt, wms)), [t64(rng, 2, 1, 6, 6)]


def _recon_loss(rng):
    plans = [random_mask(4, 0.5, 3), random_mask(4, 0.5, 4)]
    gt = rng.random((2, 3, 4, 4))
    return (lambda r: _losses.recon_loss(r, gt, plans, 2)), [t64(rng, 2, 3, 4, 4)]


def _total_loss(rng):
    return (lambda a, b: _losses.total_loss((a * a).sum(), (b * b).sum(), 0.3)), [t64(rng, 3), t64(rng, 2)]


OPERATORS: dict[str, Callable] = {
    "add": _binary(O.add), "sub": _binary(O.sub), "mul": _binary(O.mul),
    "div": _binary(O.div, positive_b=True), "neg": _unary(O.neg),
    "pow": _unary(lambda x: O.power(x, 2.5), positive=True),
    "exp": _unary(O.exp), "log": _unary(O.log, positive=True), "sqrt": _unary(O.sqrt, positive=True),
    "relu": _unary(O.relu, kink=(0.0,)), "sigmoid": _unary(O.sigmoid), "softplus": _unary(O.softplus),
    "gelu": _unary(O.gelu),
    "shape_ops": _shape_ops, "concat_stack": _concat_stack, "take_tokens": _take_tokens,
    "matmul": _matmul, "linear": _linear, "softmax": _softmax, "layer_norm": _layer_norm,
    "batch_norm_train": _batch_norm(True), "batch_norm_eval": _batch_norm(False),
    "global_avg_pool": _gap,
    "conv2d_3x3": _conv(1, 1, 3), "conv2d_1x1": _conv(1, 0, 1), "conv2d_5x5_valid": _conv(1, 0, 5, 2, 3),
    "conv2d_stride2": _conv(2, 1, 3), "conv2d_wide_out": _conv(1, 1, 3, 2, 6),
    "depthwise_conv2d": _depthwise, "depthwise_conv2d_taps": _depthwise_taps,
    "bilinear_sample": _bilinear, "bilinear_upsample_x2": _upsample,
    "attention_block": _attention,
    "project_descriptor": _project_descriptor, "build_metric": _build_metric,
    "warp_offsets": _warp_offsets, "warped_conv": _warped_conv,
    "laplacian_highpass": _laplacian, "freq_gate": _freq_gate, "wcap_forward": _wcap_forward,
    "astb_forward": _astb, "upsample_stage": _upsample_stage, "atrm_forward": _atrm_forward,
    "patchify_unpatchify": _patchify,
    "bce_with_logits": _bce, "seg_loss": _seg_loss, "recon_loss": _recon_loss, "total_loss": _total_loss,
}


def check_operator(name: str, seeds: Sequence[int] = (0, 1)) -> CheckResult:
    build = OPERATORS[name]
    t0 = time.perf_counter()
    worst = 0.0
    for s in seeds:
        rng = make_rng(derive_seed(s, 31))
        closure, inputs = build(rng)
        worst = max(worst, elementwise(closure, inputs))
    return CheckResult(name, worst, time.perf_counter() - t0, len(seeds))


# -- negative control --------------------------------------------------------


def _bad_square(x: Tensor) -> Tensor:
    """``x²`` whose backward is deliberately off by 10%."""
    return make_result(x.data * x.data, (x,), "bad_square", lambda g: (g * 2.2 * x.data,))


def negative_control() -> CheckResult:
    t0 = time.perf_counter()
    rng = make_rng(derive_seed(0, 32))
    err = elementwise(projected(_bad_square), [t64(rng, 3, 3, positive=True)])
    return CheckResult("negative_control(bad_square)", err, time.perf_counter() - t0, 1)


# -- end-to-end toy model ----------------------------------------------------


def toy_model_fixture(seed: int = 0, batch: int = 2, cfg: Optional[ModelConfig] = None):
    """Toy-profile model at 64-bit with a small synthetic batch.

    All parameters are redrawn at unit-ish scale so every term carries a
    well-conditioned gradient; the metric head is biased off the identity
    so no warped sample lands exactly on a pixel centre.
    """
    from .synthdata import generate_dataset
    cfg = cfg or ModelConfig(dtype="float64", seed=seed)
    model = DeepTopoNet(cfg)
    rng = make_rng(derive_seed(seed, 33))
    for name, p in model.named_parameters():
        fan = int(np.prod(p.shape[1:])) if p.ndim >= 2 else 1
        scale = 1.0 / np.sqrt(fan) if p.ndim >= 2 else 0.3
        p.data[...] = rng.standard_normal(p.shape) * scale + (1.0 if name.endswith("norm1.weight")
                                                             or name.endswith("norm2.weight")
                                                             or name.endswith("bn.weight")
                                                             or name.endswith("_norm.weight") else 0.0)
    if cfg.use_wcap:
        model.param_dict()["wcap.metric.fc2.bias"].data[...] = [0.3, 0.37, -0.2]
    for name, mask in model.named_masks():
        model.param_dict()[name].data *= mask
    samples = generate_dataset(batch, cfg.image_size, seed)
    images = np.stack([s.image for s in samples])
    gts = np.stack([s.mask for s in samples])
    plans = [random_mask(cfg.n_tokens, cfg.mask_ratio, derive_seed(seed, 34, i)) for i in range(batch)]
    wms = [_losses.dynamic_weight(g) for g in gts]
    target = model.prepare(images).data

    def loss() -> Tensor:
        logits, rec = model.forward_train(Tensor(images), plans)
        return _losses.total_loss(_losses.seg_loss(logits, gts, wms),
                                  _losses.recon_loss(rec, target, plans, cfg.patch_size), 0.1)

    return model, loss


def directional_check(model, loss: Callable[[], Tensor], seed: int = 0, step: float = E2E_STEP,
                      per_tensor: bool = True) -> dict[str, float]:
    """Directional-derivative errors: ``"all"`` plus one entry per parameter tensor.

    The loss is piecewise smooth (relu, bilinear cell choice). The branch
    pattern of the base pass is replayed in every perturbed pass, so central
    differences see the same smooth piece the analytic gradient belongs to.
    """
    named = list(model.named_parameters())
    masks = dict(model.named_masks())
    model.zero_grad()
    with record_branches() as tape:
        loss().backward()
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for n, p in named}
    rng = make_rng(derive_seed(seed, 35))

    def direction(names):
        v = {}
        for n in names:
            d = rng.standard_normal(dict(named)[n].shape)
            if n in masks:
                d = d * masks[n]
            v[n] = d
        return v

    def shifted(v, t):
        params = dict(named)
        saved = {n: params[n].data.copy() for n in v}
        with no_grad(), replay_branches(tape):
            for n in v:
                params[n].data[...] = saved[n] + t * v[n]
            out = float(loss().data)
        for n in v:
            params[n].data[...] = saved[n]
        return out

    def fd(v):
        return (shifted(v, step) - shifted(v, -step)) / (2 * step)

    results = {}
    groups = [("all", [n for n, _ in named])]
    if per_tensor:
        groups += [(n, [n]) for n, _ in named]
    for label, names in groups:
        v = direction(names)
        ana = float(sum(np.sum(grads[n] * v[n]) for n in names))
        results[label] = rel_err(np.array(ana), np.array(fd(v)))
    return results


def check_end_to_end(seed: int = 0, per_tensor: bool = True, ablation: str = "full") -> CheckResult:
    t0 = time.perf_counter()
    model, loss = toy_model_fixture(seed, cfg=ModelConfig(dtype="float64", seed=seed, ablation=ablation))
    errs = directional_check(model, loss, seed, per_tensor=per_tensor)
    name = "toy_model_end_to_end" + ("" if ablation == "full" else f"[{ablation}]")
    res = CheckResult(name, max(errs.values()), time.perf_counter() - t0, len(errs))
    res.details = errs  # type: ignore[attr-defined]
    return res


def run_suite(operators: Optional[Sequence[str]] = None, seeds: Sequence[int] = (0, 1),
              end_to_end: bool = True, per_tensor: bool = True,
              log: Optional[Callable[[str], None]] = None) -> tuple[list[CheckResult], CheckResult]:
    """Run every operator check plus the end-to-end model; returns ``(results, negative control)``."""
    results = []
    for name in operators or list(OPERATORS):
        r = check_operator(name, seeds)
        results.append(r)
        if log:
            log(format_result(r))
    if end_to_end:
        r = check_end_to_end(seeds[0], per_tensor)
        results.append(r)
        if log:
            log(format_result(r))
    neg = negative_control()
    if log:
        log(format_result(neg, negative=True))
    return results, neg


def format_result(r: CheckResult, negative: bool = False) -> str:
    if negative:
        status = "ok (fails as expected)" if not r.passed else "BROKEN (wrong gradient accepted)"
    else:
        status = "pass" if r.passed else "FAIL"
    return f"{r.name:<32} max_rel_err {r.max_rel_err:10.3e}  trials {r.trials:4d}  {r.seconds:7.2f}s  {status}"
