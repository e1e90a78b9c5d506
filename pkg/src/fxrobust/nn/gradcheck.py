"""Central finite-difference checks for every layer and the whole model."""
from __future__ import annotations

import numpy as np

from . import layers as L
from .model import Model, ModelConfig, trainable_names

STEP = 1e-5
TOLERANCE = 1e-4
# absolute floor in the denominator: analytic gradients that are exactly zero
# (e.g. a conv bias feeding batch norm) otherwise compare noise against noise
FLOOR = 1e-5


def numeric_grad(f, x, h=STEP):
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), FLOOR)))


def _projected(forward, shape, rng):
    r = rng.standard_normal(shape)
    return (lambda: float(np.sum(forward() * r))), r


def check_conv(rng):
    x = rng.standard_normal((2, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    out, cache = L.conv2d_valid_forward(x, w, b)
    f, r = _projected(lambda: L.conv2d_valid_forward(x, w, b)[0], out.shape, rng)
    dx, dw, db = L.conv2d_valid_backward(r, cache)
    return max(relative_error(dx, numeric_grad(f, x)), relative_error(dw, numeric_grad(f, w)),
               relative_error(db, numeric_grad(f, b)))


def check_batch_norm(rng):
    x = rng.standard_normal((3, 2, 4, 5)) * 2 + 1
    gamma = rng.standard_normal(2)
    beta = rng.standard_normal(2)

    def run():
        return L.batch_norm_forward(x, gamma, beta, np.zeros(2), np.ones(2), train=True)

    out, cache = run()
    f, r = _projected(lambda: run()[0], out.shape, rng)
    dx, dg, dbt = L.batch_norm_backward(r, cache)
    return max(relative_error(dx, numeric_grad(f, x)), relative_error(dg, numeric_grad(f, gamma)),
               relative_error(dbt, numeric_grad(f, beta)))


def check_elu(rng):
    x = rng.standard_normal((4, 5)) * 2
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    f, r = _projected(lambda: L.elu(x), x.shape, rng)
    return relative_error(L.elu_backward(r, x), numeric_grad(f, x))


def check_max_pool(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    out, cache = L.global_max_pool_forward(x)
    f, r = _projected(lambda: L.global_max_pool_forward(x)[0], out.shape, rng)
    return relative_error(L.global_max_pool_backward(r, cache), numeric_grad(f, x))


def check_dropout(rng):
    x = rng.standard_normal((4, 6))
    _, mask = L.dropout_forward(x, 0.5, np.random.default_rng(1))
    f, r = _projected(lambda: L.dropout_forward(x, 0.5, np.random.default_rng(1))[0], x.shape, rng)
    return relative_error(L.dropout_backward(r, mask), numeric_grad(f, x))


def check_dense_softmax(rng):
    h = rng.standard_normal((5, 7))
    w = rng.standard_normal((11, 7)) * 0.5
    b = rng.standard_normal(11) * 0.1
    labels = rng.integers(0, 11, 5)

    def loss():
        return L.cross_entropy(L.softmax(L.dense_forward(h, w, b)[0]), labels)

    probs = L.softmax(L.dense_forward(h, w, b)[0])
    dh, dw, db = L.dense_backward(L.softmax_cross_entropy_backward(probs, labels), (h, w))
    return max(relative_error(dh, numeric_grad(loss, h)), relative_error(dw, numeric_grad(loss, w)),
               relative_error(db, numeric_grad(loss, b)))


def check_model(rng, cfg: ModelConfig | None = None, batch: int = 4, train: bool = True) -> dict[str, float]:
    """Per-tensor relative error of the fused model gradients (64-bit)."""
    cfg = cfg or ModelConfig.tiny()
    model = Model(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    # a larger head and random BN affine parameters exercise every branch
    for k, v in model.params.items():
        if k == "dense.weight":
            v[...] = rng.standard_normal(v.shape) * 0.5
        elif k.endswith(".gamma"):
            v[...] = rng.standard_normal(v.shape)
        elif k.endswith(".beta"):
            v[...] = rng.standard_normal(v.shape) * 0.5
    x = rng.standard_normal((batch, cfg.n_mels, cfg.n_frames))
    labels = rng.integers(0, cfg.n_classes, batch)

    def loss():
        return model.loss(x, labels, train=train, rng=np.random.default_rng(7))

    _, trace = model.forward(x, train=train, rng=np.random.default_rng(7))
    grads = model.backward(trace, labels)
    return {k: relative_error(grads[k], numeric_grad(loss, model.params[k])) for k in trainable_names(model.params)}


LAYER_CHECKS = {
    "conv2d_valid": check_conv,
    "batch_norm": check_batch_norm,
    "elu": check_elu,
    "global_max_pool": check_max_pool,
    "dropout": check_dropout,
    "dense_softmax_cross_entropy": check_dense_softmax,
}


def run_all(seed: int = 0) -> dict[str, float]:
    """Max relative error per layer plus the full model in train and eval mode."""
    rng = np.random.default_rng(seed)
    report = {name: check(rng) for name, check in LAYER_CHECKS.items()}
    report["model_train"] = max(check_model(rng, train=True).values())
    report["model_eval"] = max(check_model(rng, train=False).values())
    return report
