"""Finite-difference verification of every backward rule in the package.

Each check builds a tiny random instance of one layer (or the whole
micro-scale network), reduces its output to a scalar through a fixed
random projection, and compares analytic gradients for every input and
parameter against central differences. The budget is small enough that
the full suite runs in seconds.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import (
    AttentionConfig,
    ParamStore,
    StemConfig,
    cnn_stem,
    conv_ffn,
    init_cnn_stem,
    init_conv_ffn,
    init_linear,
    init_mhsa,
    init_patch_merge,
    init_transformer_block,
    linear,
    mhsa,
    patch_merge,
    transformer_block,
)
from .model import ModelConfig, build_model
from .tensor import Tensor, backward, finite_diff_grad, rel_grad_error, reset_tape

TOLERANCE = 1e-4
EPS = 1e-5


def _check(name: str, forward, tensors: dict, rng: np.random.Generator) -> tuple:
    """Compare backward() grads of `forward()` with finite differences.

    `forward` must rebuild the graph from the live tensors on each call so
    the oracle sees perturbed values.
    """
    reset_tape()
    for t in tensors.values():
        t.grad = None
    out = forward()
    proj = rng.standard_normal(out.data.shape)

    def loss_fn():
        return T.sum_all(T.mul(forward(), Tensor(proj)))

    backward(T.sum_all(T.mul(out, Tensor(proj))))
    worst = 0.0
    for t in tensors.values():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = finite_diff_grad(lambda _x, f=loss_fn: f(), t, eps=EPS)
        worst = max(worst, rel_grad_error(analytic, fd.data))
    reset_tape()
    return name, worst


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def run_suite(seed: int = 0) -> list:
    """Every layer + both losses + the end-to-end micro model.

    Returns [(name, worst relative error)] in execution order.
    """
    rng = np.random.default_rng(seed)
    results = []

    x = _leaf(rng, (3, 4))
    w = _leaf(rng, (4, 2))
    results.append(_check("matmul", lambda: T.matmul(x, w), {"x": x, "w": w}, rng))

    x = _leaf(rng, (2, 5, 5))
    w = _leaf(rng, (3, 2, 3, 3))
    results.append(
        _check("conv2d", lambda: T.conv2d(x, w, stride=2, pad=1), {"x": x, "w": w}, rng)
    )

    x = _leaf(rng, (3, 4, 4))
    w = _leaf(rng, (3, 3, 3))
    results.append(_check("depthwise_conv2d", lambda: T.depthwise_conv2d(x, w), {"x": x, "w": w}, rng))

    x = _leaf(rng, (4, 6))
    results.append(_check("softmax", lambda: T.softmax(x, axis=-1), {"x": x}, rng))

    x = _leaf(rng, (5, 6))
    gamma = _leaf(rng, (6,))
    beta = _leaf(rng, (6,))
    results.append(
        _check(
            "layernorm",
            lambda: T.layernorm(x, gamma, beta, eps=1e-5),
            {"x": x, "gamma": gamma, "beta": beta},
            rng,
        )
    )

    x = _leaf(rng, (3, 4))
    results.append(_check("gelu", lambda: T.gelu(x), {"x": x}, rng))

    a = _leaf(rng, (7,))
    b = _leaf(rng, (7,))
    results.append(_check("maxout", lambda: T.maximum_left(a, b), {"a": a, "b": b}, rng))

    store = ParamStore(seed + 1)
    init_linear(store, "lin", 5, 3)
    x = _leaf(rng, (4, 5))
    tensors = {"x": x, **{p: t for p, t in store.items()}}
    results.append(_check("linear", lambda: linear(x, store, "lin"), tensors, rng))

    store = ParamStore(seed + 2)
    cfg = AttentionConfig(dim=8, heads=2)
    init_mhsa(store, "attn", cfg)
    x = _leaf(rng, (5, 8))
    tensors = {"x": x, **{p: t for p, t in store.items()}}
    results.append(_check("mhsa", lambda: mhsa(x, cfg, store, "attn"), tensors, rng))

    store = ParamStore(seed + 3)
    init_conv_ffn(store, "ffn", dim=6, expansion=2)
    x = _leaf(rng, (12, 6))
    tensors = {"x": x, **{p: t for p, t in store.items()}}
    results.append(_check("conv_ffn", lambda: conv_ffn(x, (3, 4), 2, store, "ffn"), tensors, rng))

    store = ParamStore(seed + 4)
    init_patch_merge(store, "merge", dim=3)
    x = _leaf(rng, (16, 3))
    tensors = {"x": x, **{p: t for p, t in store.items()}}
    results.append(
        _check("patch_merge", lambda: patch_merge(x, (4, 4), store, "merge")[0], tensors, rng)
    )

    store = ParamStore(seed + 5)
    cfg = AttentionConfig(dim=8, heads=2)
    init_transformer_block(store, "blk", cfg, expansion=2)
    x = _leaf(rng, (6, 8))
    tensors = {"x": x, **{p: t for p, t in store.items()}}
    results.append(
        _check(
            "transformer_block",
            lambda: transformer_block(x, (2, 3), cfg, 2, store, "blk"),
            tensors,
            rng,
        )
    )

    store = ParamStore(seed + 6)
    stem = StemConfig(widths=(4, 6))
    init_cnn_stem(store, "stem", stem)
    x = _leaf(rng, (3, 8, 8))
    tensors = {"x": x, **{p: t for p, t in store.items()}}
    results.append(_check("cnn_stem", lambda: cnn_stem(x, stem, store, "stem"), tensors, rng))

    # losses: scalar already, so check them directly without projection
    logits = _leaf(rng, (4, 6))
    labels = [2, None, 0, 5]
    results.append(_loss_check("cross_entropy", lambda: T.cross_entropy_mean(logits, labels), logits))

    logits = _leaf(rng, (3, 7))
    targets = (rng.random((3, 7)) < 0.5).astype(float)
    mask = (rng.random((3, 7)) < 0.7).astype(float)
    results.append(
        _loss_check("bce", lambda: T.bce_with_logits_mean(logits, targets, mask), logits)
    )

    results.append(_end_to_end_check(seed))
    return results


def _loss_check(name: str, forward, leaf: Tensor) -> tuple:
    reset_tape()
    leaf.grad = None
    backward(forward())
    fd = finite_diff_grad(lambda _x: forward(), leaf, eps=EPS)
    reset_tape()
    return name, rel_grad_error(leaf.grad, fd.data)


def micro_config() -> ModelConfig:
    """Smallest legal two-stage network; used for exhaustive end-to-end FD."""
    return ModelConfig(
        input_h=8,
        input_w=8,
        downsample=4,
        embed_dim=8,
        stem_widths=(4, 8),
        stage_depths=(1, 1),
        stage_heads=(1, 1),
        ffn_expansion=2,
    )


def _end_to_end_check(seed: int) -> tuple:
    """FD over every parameter of the micro model through the joint loss."""
    rng = np.random.default_rng(seed + 7)
    params, model = build_model(micro_config(), seed + 8)
    # jitter away from the zero-bias init so the symmetric maxout is not at
    # an exact tie; central differences are only valid away from the kink
    for _, t in params.items():
        t.data += rng.normal(0.0, 0.01, t.data.shape)
    images = Tensor(rng.standard_normal((1, 3, 8, 8)) * 0.5)
    labels = [1]
    targets = (rng.random((1, 21)) < 0.5).astype(float)
    mask = np.ones((1, 21))

    def loss_fn():
        out = model.forward(images, params)
        ce = T.cross_entropy_mean(out.emotion_logits, labels)
        bce = T.bce_with_logits_mean(out.au_logits, targets, mask)
        return T.add(ce, bce)

    reset_tape()
    params.zero_grads()
    backward(loss_fn())
    worst = 0.0
    for _, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = finite_diff_grad(lambda _x: loss_fn(), t, eps=EPS)
        worst = max(worst, rel_grad_error(analytic, fd.data))
    reset_tape()
    params.zero_grads()
    return "end_to_end", worst


def run_and_report(seed: int = 0, corrupt: str = None) -> int:
    """Print one line per check plus the worst offender; 0 iff all pass."""
    if corrupt:
        with T.corrupt_backward(corrupt):
            results = run_suite(seed)
    else:
        results = run_suite(seed)
    worst_name, worst_err = max(results, key=lambda r: r[1])
    failed = [r for r in results if r[1] > TOLERANCE]
    for name, err in results:
        status = "FAIL" if err > TOLERANCE else "ok"
        print(f"{status:4s}  {name:20s} rel_err={err:.3e}")
    print(f"worst: {worst_name} rel_err={worst_err:.3e} (tolerance {TOLERANCE:g})")
    if failed:
        print(f"gradcheck FAILED: {failed[0][0]} rel_err={failed[0][1]:.3e}")
        return 1
    return 0
