"""Single-layer CNN with vertical filters over a log-mel spectrogram.

Every filter group runs conv -> batch norm -> ELU -> global max pool, the
pooled channels are concatenated, passed through dropout and a dense softmax
layer.

The training path never materializes the full feature maps. Because ELU is
monotone, the max over a channel of ELU(gamma * xhat + beta) sits at the
argmax of the raw convolution output when gamma >= 0 and at its argmin
otherwise, so only per-channel extremes are kept. Batch statistics, and the
dense part of the batch-norm gradient, are recovered exactly from the patch
sum and patch Gram matrix of the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import N_CLASSES
from . import layers as L

PAPER_GROUPS = ((128, 5, 1), (128, 8, 1), (64, 5, 3), (64, 80, 3), (32, 5, 5), (32, 80, 5))

# rough cap on the float count of one conv output chunk
_CHUNK_FLOATS = 4_000_000


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    n_frames: int = 247
    groups: tuple = PAPER_GROUPS  # (n_filters, height, width) per group
    n_classes: int = N_CLASSES
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(v) for v in g) for g in self.groups))
        for f, fh, fw in self.groups:
            if f < 1 or not (1 <= fh <= self.n_mels) or not (1 <= fw <= self.n_frames):
                raise ValueError(f"filter group {(f, fh, fw)} does not fit a {self.n_mels}x{self.n_frames} input")

    @property
    def n_channels(self) -> int:
        return sum(g[0] for g in self.groups)

    @classmethod
    def tiny(cls, filters=2) -> "ModelConfig":
        """8x8 input with the scaled-down filter shapes used for gradient checking."""
        shapes = ((3, 1), (2, 1), (3, 3), (8, 3), (3, 3), (8, 3))
        return cls(n_mels=8, n_frames=8, groups=tuple((filters, h, w) for h, w in shapes))


TRAINABLE_SUFFIXES = (".weight", ".bias", ".gamma", ".beta")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for g, (f, fh, fw) in enumerate(cfg.groups):
        bound = np.sqrt(6.0 / (fh * fw))
        params[f"conv{g}.weight"] = rng.uniform(-bound, bound, (f, fh, fw))
        params[f"conv{g}.bias"] = np.zeros(f)
        params[f"bn{g}.gamma"] = np.ones(f)
        params[f"bn{g}.beta"] = np.zeros(f)
        params[f"bn{g}.running_mean"] = np.zeros(f)
        params[f"bn{g}.running_var"] = np.ones(f)
    d = cfg.n_channels
    # small head keeps the untrained model close to the uniform predictor
    params["dense.weight"] = rng.uniform(-1.0 / d, 1.0 / d, (cfg.n_classes, d))
    params["dense.bias"] = np.zeros(cfg.n_classes)
    return {k: v.astype(dtype) for k, v in params.items()}


def trainable_names(params) -> list[str]:
    return [k for k in params if k.endswith(TRAINABLE_SUFFIXES)]


def parameter_count(params) -> int:
    return int(sum(params[k].size for k in trainable_names(params)))


@dataclass
class _GroupTrace:
    idx: np.ndarray  # (N, F) flat position of the pooled element
    xhat: np.ndarray  # (N, F) normalized value there
    pre: np.ndarray  # (N, F) BN output there (ELU input)
    mean: np.ndarray
    inv_std: np.ndarray
    count: int  # N * positions
    patch_sum: np.ndarray | None = None  # (K,)
    gram: np.ndarray | None = None  # (K, K)


@dataclass
class ForwardTrace:
    x: np.ndarray
    train: bool
    groups: list
    pooled: np.ndarray
    mask: np.ndarray | None
    dropped: np.ndarray
    probs: np.ndarray
    consumed: bool = field(default=False)


def _patches_t(x, fh, fw):
    """(n, H, W) -> (n, fh*fw, positions) copy of every valid patch; positions are row-major."""
    n, h, w = x.shape
    v = sliding_window_view(x, (fh, fw), axis=(1, 2))  # n, Ho, Wo, fh, fw
    return np.ascontiguousarray(v.transpose(0, 3, 4, 1, 2)).reshape(n, fh * fw, -1)


class Model:
    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(cfg, seed, self.dtype)

    # -- forward -----------------------------------------------------------

    def _group_forward(self, x, g, train):
        f, fh, fw = self.cfg.groups[g]
        p = self.params
        w = p[f"conv{g}.weight"].reshape(f, -1)
        b = p[f"conv{g}.bias"]
        gamma, beta = p[f"bn{g}.gamma"], p[f"bn{g}.beta"]
        n, h, wd = x.shape
        ho, wo = h - fh + 1, wd - fw + 1
        positions = ho * wo
        k = fh * fw

        amax = np.empty((n, f), dtype=np.int64)
        amin = np.empty((n, f), dtype=np.int64)
        zmax = np.empty((n, f), dtype=self.dtype)
        zmin = np.empty((n, f), dtype=self.dtype)
        gram = np.zeros((k, k)) if train else None
        psum = np.zeros(k) if train else None
        wt = w.astype(self.dtype)
        step = max(1, _CHUNK_FLOATS // (positions * max(f, k)))
        for s in range(0, n, step):
            pt = _patches_t(x[s : s + step], fh, fw)  # (n, K, P)
            z = wt @ pt  # (n, F, P); bias is added to the extremes only
            sl = slice(s, s + step)
            amax[sl] = z.argmax(axis=2)
            amin[sl] = z.argmin(axis=2)
            zmax[sl] = np.take_along_axis(z, amax[sl, :, None], axis=2)[..., 0] + b
            zmin[sl] = np.take_along_axis(z, amin[sl, :, None], axis=2)[..., 0] + b
            if train:
                pt64 = pt.astype(np.float64)
                gram += np.einsum("nkp,nlp->kl", pt64, pt64, optimize=True)
                psum += pt64.sum(axis=(0, 2))

        count = n * positions
        if train:
            if n < 2:
                raise ValueError("batch norm in train mode needs a batch of at least 2")
            w64, b64 = w.astype(np.float64), b.astype(np.float64)
            ws = w64 @ psum
            mean = ws / count + b64
            sq = np.einsum("fk,kl,fl->f", w64, gram, w64) + 2 * b64 * ws + count * b64**2
            var = np.maximum(sq / count - mean**2, 0.0)
            rm, rv = p[f"bn{g}.running_mean"], p[f"bn{g}.running_var"]
            rm *= L.BN_MOMENTUM
            rm += (1 - L.BN_MOMENTUM) * mean.astype(rm.dtype)
            rv *= L.BN_MOMENTUM
            rv += (1 - L.BN_MOMENTUM) * var.astype(rv.dtype)
        else:
            mean = p[f"bn{g}.running_mean"].astype(np.float64)
            var = p[f"bn{g}.running_var"].astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + L.BN_EPS)

        use_max = gamma > 0
        idx = np.where(use_max, amax, amin)
        zsel = np.where(use_max, zmax, zmin)
        # with gamma == 0 every position ties, and the first one wins
        idx = np.where(gamma == 0, 0, idx)
        if np.any(gamma == 0):
            zsel = np.where(gamma == 0, self._value_at(x, g, idx), zsel)
        xhat = ((zsel - mean) * inv_std).astype(self.dtype)
        pre = gamma * xhat + beta
        trace = _GroupTrace(idx, xhat, pre, mean, inv_std, count, psum, gram)
        return L.elu(pre), trace

    def _selected_patches(self, x, g, idx):
        _, fh, fw = self.cfg.groups[g]
        wo = x.shape[2] - fw + 1
        r, c = np.divmod(idx, wo)
        n = np.arange(x.shape[0])[:, None, None, None]
        rows = r[:, :, None, None] + np.arange(fh)[None, None, :, None]
        cols = c[:, :, None, None] + np.arange(fw)[None, None, None, :]
        return x[n, rows, cols].reshape(idx.shape[0], idx.shape[1], fh * fw)

    def _value_at(self, x, g, idx):
        f = self.cfg.groups[g][0]
        w = self.params[f"conv{g}.weight"].reshape(f, -1)
        pt = self._selected_patches(x, g, idx)
        return np.einsum("nfk,fk->nf", pt, w) + self.params[f"conv{g}.bias"]

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4 and x.shape[1] == 1:
            x = x[:, 0]
        expected = (self.cfg.n_mels, self.cfg.n_frames)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ValueError(f"expected input (batch, {expected[0]}, {expected[1]}), got {x.shape}")
        return L.check_finite("input", x)

    def forward(self, x, train=False, rng=None):
        """Class probabilities for a batch ``x`` of shape (N, n_mels, n_frames)."""
        x = self._check_input(x)
        pooled, traces = [], []
        for g in range(len(self.cfg.groups)):
            out, tr = self._group_forward(x, g, train)
            pooled.append(out)
            traces.append(tr)
        h = np.concatenate(pooled, axis=1)
        if train and self.cfg.dropout > 0:
            if rng is None:
                raise ValueError("train-mode forward needs a random generator for dropout")
            dropped, mask = L.dropout_forward(h, self.cfg.dropout, rng, train=True)
        else:
            dropped, mask = h, None
        logits, _ = L.dense_forward(dropped, self.params["dense.weight"], self.params["dense.bias"])
        probs = L.softmax(L.check_finite("logits", logits))
        return probs, ForwardTrace(x, train, traces, h, mask, dropped, probs)

    def predict(self, x, batch_size=50):
        out = [self.forward(x[s : s + batch_size])[0] for s in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    # -- backward ----------------------------------------------------------

    def backward(self, trace: ForwardTrace, labels) -> dict[str, np.ndarray]:
        """Gradients of the mean cross-entropy w.r.t. every trainable tensor."""
        if trace.consumed:
            raise RuntimeError("forward trace was already used for a backward pass")
        trace.consumed = True
        p = self.params
        labels = np.asarray(labels)
        grads = {}
        dlogits = L.softmax_cross_entropy_backward(trace.probs, labels)
        dh, grads["dense.weight"], grads["dense.bias"] = L.dense_backward(
            dlogits, (trace.dropped, p["dense.weight"])
        )
        dh = L.dropout_backward(dh, trace.mask)

        offset = 0
        for g, (f, fh, fw) in enumerate(self.cfg.groups):
            tr = trace.groups[g]
            dpool = dh[:, offset : offset + f]
            offset += f
            gamma = p[f"bn{g}.gamma"]
            dpre = dpool * L.elu_grad(tr.pre)
            grads[f"bn{g}.gamma"] = (dpre * tr.xhat).sum(axis=0)
            grads[f"bn{g}.beta"] = dpre.sum(axis=0)
            dxhat = (dpre * gamma).astype(np.float64)
            sel = self._selected_patches(trace.x, g, tr.idx).astype(np.float64)
            direct = np.einsum("nf,nfk->fk", dxhat, sel)
            inv = tr.inv_std
            if trace.train:
                w = p[f"conv{g}.weight"].reshape(f, -1).astype(np.float64)
                b = p[f"conv{g}.bias"].astype(np.float64)
                m1 = dxhat.sum(axis=0) / tr.count
                m2 = (dxhat * tr.xhat).sum(axis=0) / tr.count
                centred = (b - tr.mean)[:, None]
                xhat_patch = (w @ tr.gram + centred * tr.patch_sum[None, :]) * inv[:, None]
                xhat_total = (w @ tr.patch_sum + tr.count * (b - tr.mean)) * inv
                dw = inv[:, None] * (direct - m1[:, None] * tr.patch_sum[None, :] - m2[:, None] * xhat_patch)
                db = inv * (dxhat.sum(axis=0) - tr.count * m1 - m2 * xhat_total)
            else:
                dw = inv[:, None] * direct
                db = inv * dxhat.sum(axis=0)
            grads[f"conv{g}.weight"] = dw.reshape(f, fh, fw)
            grads[f"conv{g}.bias"] = db

        out = {}
        for k in trainable_names(p):
            out[k] = L.check_finite(f"grad {k}", grads[k].astype(p[k].dtype))
        return out

    # -- layer-by-layer reference ------------------------------------------

    def reference_forward(self, x, train=False, mask=None):
        """Straightforward composition of the layers in :mod:`layers`.

        Materializes every feature map, so only practical for small inputs;
        used to cross-check the fused path. Running statistics are not touched.
        ``mask`` is an explicit dropout mask (already scaled) for train mode.
        """
        x = self._check_input(x)[:, None]
        p = self.params
        caches, pooled = [], []
        for g, (f, fh, fw) in enumerate(self.cfg.groups):
            z, cc = L.conv2d_valid_forward(x, p[f"conv{g}.weight"][:, None], p[f"conv{g}.bias"])
            a, bc = L.batch_norm_forward(
                z, p[f"bn{g}.gamma"], p[f"bn{g}.beta"],
                p[f"bn{g}.running_mean"].copy(), p[f"bn{g}.running_var"].copy(), train=train,
            )
            e, ec = L.elu_forward(a)
            m, mc = L.global_max_pool_forward(e)
            caches.append((cc, bc, ec, mc))
            pooled.append(m)
        h = np.concatenate(pooled, axis=1)
        dropped = h * mask if mask is not None else h
        logits, dc = L.dense_forward(dropped, p["dense.weight"], p["dense.bias"])
        probs = L.softmax(logits)
        return probs, (caches, mask, dc, probs)

    def reference_backward(self, cache, labels):
        caches, mask, dc, probs = cache
        grads = {}
        dlogits = L.softmax_cross_entropy_backward(probs, np.asarray(labels))
        dh, grads["dense.weight"], grads["dense.bias"] = L.dense_backward(dlogits, dc)
        dh = L.dropout_backward(dh, mask)
        offset = 0
        for g, (f, _, _) in enumerate(self.cfg.groups):
            cc, bc, ec, mc = caches[g]
            de = L.global_max_pool_backward(dh[:, offset : offset + f], mc)
            offset += f
            da = L.elu_backward(de, ec)
            dz, grads[f"bn{g}.gamma"], grads[f"bn{g}.beta"] = L.batch_norm_backward(da, bc)
            _, dw, grads[f"conv{g}.bias"] = L.conv2d_valid_backward(dz, cc)
            grads[f"conv{g}.weight"] = dw[:, 0]
        return grads

    def loss(self, x, labels, train=False, rng=None) -> float:
        probs, _ = self.forward(x, train=train, rng=rng)
        return L.cross_entropy(probs, labels)
