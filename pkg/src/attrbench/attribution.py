"""Attribution heatmaps for trained :class:`~attrbench.models.Cnn` models.

All methods accept either a single volume or a batch ``[N, D, H, W]`` and
attribute the logit of ``target_class`` (class 1, the lesion/patient class,
by default).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import Cnn
from .nn import BatchNorm3d, Conv3d, Dropout, Flatten, Linear, MaxPool3d, ReLU, Tape, Tensor
from .nn import functional as F
from .volume import Volume3D

log = logging.getLogger(__name__)

METHODS = ("LRP", "IG", "GGC", "SVM")
LRP_EPS = 1e-9


class ModelNotInEvalError(RuntimeError):
    pass


class RelevanceNaNError(FloatingPointError):
    pass


@dataclass
class Heatmap:
    volume: Volume3D
    method: str
    n_subjects_averaged: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _require_eval(model: Cnn):
    if model.training:
        raise ModelNotInEvalError("attribution needs a model in eval mode; call model.eval()")


def _as_batch(x, model: Cnn):
    """Return ([N, D, H, W] array, template Volume3D or None, was_single)."""
    tmpl = x if isinstance(x, Volume3D) else None
    arr = np.asarray(x.data if tmpl is not None else x)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if tuple(arr.shape[1:]) != model.spec.input_dims:
        raise ValueError(f"input grid {arr.shape[1:]} does not match model grid {model.spec.input_dims}")
    return arr.astype(model.parameters()[0].dtype, copy=False), tmpl, single


def _wrap(maps, tmpl, single, method):
    if not single:
        return maps
    vol = tmpl.like(maps[0].astype(np.float64)) if tmpl is not None else Volume3D(maps[0].astype(np.float64))
    return Heatmap(vol, method)


# --------------------------------------------------------------------------
# Layer-wise relevance propagation, beta rule
# --------------------------------------------------------------------------


@dataclass
class ConservationReport:
    """Relevance bookkeeping of one LRP pass (per sample, averaged over a batch).

    ``layer_deviation[i]`` is ``|sum R_in - sum R_out| / |R_top|`` for the i-th
    affine stage (from the top); ``bias_fraction[i]`` is the absolute relevance
    routed to that stage's biases, relative to ``|R_top|``.
    """

    layer_names: list = field(default_factory=list)
    layer_deviation: list = field(default_factory=list)
    bias_fraction: list = field(default_factory=list)
    total_deviation: float = 0.0
    total_bias_fraction: float = 0.0


def _beta_rule(x, wpos, wneg, bpos, bneg, R, fwd, bwd, beta):
    """Generic alpha-beta redistribution for an affine map ``fwd`` with adjoint ``bwd``.

    Returns input relevance and the per-unit relevance absorbed by the bias.
    """
    alpha = 1.0 + beta
    xp, xn = np.maximum(x, 0), np.minimum(x, 0)
    zp = fwd(xp, wpos) + fwd(xn, wneg) + bpos
    zn = fwd(xp, wneg) + fwd(xn, wpos) + bneg
    # units lacking one sign of contribution fall back to the other sign alone
    a = np.where(zn == 0, 1.0, np.where(zp == 0, 0.0, alpha))
    b = np.where(zn == 0, 0.0, np.where(zp == 0, -1.0, beta))
    cp = a * R / (zp + LRP_EPS)
    cn = b * R / (zn - LRP_EPS)
    r_in = xp * bwd(cp, wpos) + xn * bwd(cp, wneg) - (xp * bwd(cn, wneg) + xn * bwd(cn, wpos))
    bias_share = cp * bpos - cn * bneg
    return r_in, bias_share


def _conv_ops():
    def fwd(x, w):
        return F.conv3d_array(x, w)

    def bwd(g, w):
        return F.conv3d_input_grad_array(g, w)

    return fwd, bwd


def _linear_ops():
    def fwd(x, w):
        return x @ w.T

    def bwd(g, w):
        return g @ w

    return fwd, bwd


def _plan(model: Cnn):
    """Group layers into stages: affine (conv+BN folded, or linear) and routing stages."""
    layers = model.layers
    stages = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Conv3d):
            w = layer.weight.data.astype(np.float64)
            b = layer.bias.data.astype(np.float64)
            j = i + 1
            if j < len(layers) and isinstance(layers[j], BatchNorm3d):
                s, t = layers[j].folded()
                w = w * s.reshape(-1, 1, 1, 1, 1)
                b = b * s + t
                j += 1
            stages.append(("conv", w, b))
            i = j
        elif isinstance(layer, Linear):
            stages.append(("linear", layer.weight.data.astype(np.float64), layer.bias.data.astype(np.float64)))
            i += 1
        elif isinstance(layer, MaxPool3d):
            stages.append(("pool", None, None))
            i += 1
        elif isinstance(layer, Flatten):
            stages.append(("flatten", None, None))
            i += 1
        elif isinstance(layer, (ReLU, Dropout)):
            stages.append(("relu" if isinstance(layer, ReLU) else "identity", None, None))
            i += 1
        else:
            raise TypeError(f"no relevance rule for {type(layer).__name__}")
    return stages


def lrp_relevance(model: Cnn, x, target_class: int = 1, beta: float = 0.5):
    """Input relevance ``[N, D, H, W]`` and a :class:`ConservationReport`.

    Relevance starts as the target logit and is redistributed stage by stage.
    """
    _require_eval(model)
    X, _, _ = _as_batch(x, model)
    a = X.astype(np.float64)[:, None] / model.input_scale
    stages = _plan(model)
    acts, aux = [], []
    for kind, w, b in stages:
        acts.append(a)
        if kind == "conv":
            a = F.conv3d_array(a, w, b)
            aux.append(None)
        elif kind == "linear":
            a = a @ w.T + b
            aux.append(None)
        elif kind == "pool":
            shape = a.shape
            a, arg = F.max_pool3d_array(a)
            aux.append((arg, shape))
        elif kind == "flatten":
            aux.append(a.shape)
            a = a.reshape(a.shape[0], -1)
        elif kind == "relu":
            a = np.maximum(a, 0)
            aux.append(None)
        else:
            aux.append(None)
    logits = a
    R = np.zeros_like(logits)
    R[:, target_class] = logits[:, target_class]
    top = R.sum(axis=1)
    denom = np.where(np.abs(top) > 0, np.abs(top), 1.0)
    report = ConservationReport()
    conv_fwd, conv_bwd = _conv_ops()
    lin_fwd, lin_bwd = _linear_ops()
    for (kind, w, b), a_in, extra in zip(reversed(stages), reversed(acts), reversed(aux)):
        if kind in ("conv", "linear"):
            fwd, bwd = (conv_fwd, conv_bwd) if kind == "conv" else (lin_fwd, lin_bwd)
            shape = (1, -1, 1, 1, 1) if kind == "conv" else (1, -1)
            bp = np.maximum(b, 0).reshape(shape)
            bn = np.minimum(b, 0).reshape(shape)
            r_out = R.reshape(R.shape[0], -1).sum(axis=1)
            R, bias_share = _beta_rule(a_in, np.maximum(w, 0), np.minimum(w, 0), bp, bn, R, fwd, bwd, beta)
            r_in = R.reshape(R.shape[0], -1).sum(axis=1)
            report.layer_names.append(f"{kind}{len(report.layer_names)}")
            report.layer_deviation.append(float(np.mean(np.abs(r_in - r_out) / denom)))
            report.bias_fraction.append(
                float(np.mean(np.abs(bias_share).reshape(R.shape[0], -1).sum(axis=1) / denom))
            )
        elif kind == "pool":
            arg, shape = extra
            R = F.max_pool3d_unpool_array(R, arg, shape)
        elif kind == "flatten":
            R = R.reshape(extra)
        if not np.all(np.isfinite(R)):
            raise RelevanceNaNError(f"non-finite relevance at stage {kind}")
    total = R.reshape(R.shape[0], -1).sum(axis=1)
    report.total_deviation = float(np.mean(np.abs(total - top) / denom))
    report.total_bias_fraction = float(sum(report.bias_fraction))
    return R[:, 0], report


def lrp_beta(model: Cnn, x, target_class: int = 1, beta: float = 0.5):
    """LRP beta-rule heatmap (alpha = 1 + beta). Returns a Heatmap for one volume."""
    _require_eval(model)
    _, tmpl, single = _as_batch(x, model)
    R, report = lrp_relevance(model, x, target_class, beta)
    log.debug("LRP conservation deviation %.3g, bias fraction %.3g", report.total_deviation, report.total_bias_fraction)
    return _wrap(R, tmpl, single, "LRP")


def lrp_dense(x, w, b=None, R=None, beta: float = 0.5):
    """Beta-rule relevance of a single dense layer ``y = x @ w.T + b``.

    ``R`` defaults to the layer output. Returns input relevance [N, in].
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    if R is None:
        R = x @ w.T + b
    fwd, bwd = _linear_ops()
    r, _ = _beta_rule(x, np.maximum(w, 0), np.minimum(w, 0), np.maximum(b, 0), np.minimum(b, 0), R, fwd, bwd, beta)
    return r


# --------------------------------------------------------------------------
# gradient-based methods
# --------------------------------------------------------------------------


def _input_gradient(model: Cnn, X, target_class, relu_rule="standard"):
    xt = Tensor(X[:, None], requires_grad=True)
    with Tape() as tape:
        out = F.tsum(F.pick(model(xt), target_class))
    (g,) = tape.gradient(out, [xt], relu_rule=relu_rule)
    return g[:, 0], out


def integrated_gradients(model: Cnn, x, target_class: int = 1, steps: int = 50, baseline=None, batch_size: int = 16):
    """Integrated Gradients with a right-endpoint Riemann sum over ``steps`` points."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _require_eval(model)
    X, tmpl, single = _as_batch(x, model)
    base = np.zeros_like(X[0]) if baseline is None else np.asarray(getattr(baseline, "data", baseline), X.dtype)
    alphas = np.arange(1, steps + 1, dtype=X.dtype) / steps
    maps = np.empty(X.shape, dtype=np.float64)
    for n in range(len(X)):
        diff = X[n] - base
        acc = np.zeros(X.shape[1:], dtype=np.float64)
        for s in range(0, steps, batch_size):
            al = alphas[s : s + batch_size]
            path = base[None] + al[:, None, None, None] * diff[None]
            g, _ = _input_gradient(model, path, target_class)
            acc += g.sum(axis=0, dtype=np.float64)
        maps[n] = diff * acc / steps
    return _wrap(maps, tmpl, single, "IG")


def guided_backprop(model: Cnn, x, target_class: int = 1):
    """Input gradient with every ReLU passing only positive signal through active units."""
    _require_eval(model)
    X, tmpl, single = _as_batch(x, model)
    g, _ = _input_gradient(model, X, target_class, relu_rule="guided")
    g = g.astype(np.float64)
    if single:
        return tmpl.like(g[0]) if tmpl is not None else Volume3D(g[0])
    return g


def grad_cam(model: Cnn, x, target_class: int = 1, layer: int | None = None):
    """Grad-CAM at the output of a convolution (default: the last one).

    Returns ``[N, d, h, w]`` maps on that layer's grid.
    """
    _require_eval(model)
    X, _, _ = _as_batch(x, model)
    idx = model.conv_indices()[-1] if layer is None else layer
    xt = Tensor(X[:, None], requires_grad=True)
    with Tape() as tape:
        logits, outs = model.forward(xt, capture=True)
        out = F.tsum(F.pick(logits, target_class))
    A = outs[idx]
    (g,) = tape.gradient(out, [A])
    return cam_from(A.data, g)


def cam_from(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """``ReLU(sum_k mean(g_k) * A_k)`` for [N, K, d, h, w] activations and gradients."""
    weights = gradients.astype(np.float64).mean(axis=(2, 3, 4), keepdims=True)
    return np.maximum((weights * activations).sum(axis=1), 0.0)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights [n_out, n_in] with half-pixel centres."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def trilinear_upsample(maps: np.ndarray, out_dims) -> np.ndarray:
    """Resize the last three axes of ``maps`` to ``out_dims`` by trilinear interpolation."""
    out = np.asarray(maps, dtype=np.float64)
    for ax, n_out in zip((-3, -2, -1), out_dims):
        m = _interp_matrix(out.shape[ax], n_out)
        out = np.moveaxis(np.tensordot(out, m, axes=([ax], [1])), -1, ax)
    return out


def guided_grad_cam(model: Cnn, x, target_class: int = 1, layer: int | None = None):
    """Upsampled Grad-CAM multiplied voxel-wise by guided backpropagation."""
    _require_eval(model)
    X, tmpl, single = _as_batch(x, model)
    cam = trilinear_upsample(grad_cam(model, X, target_class, layer), model.spec.input_dims)
    gb = guided_backprop(model, X, target_class)
    return _wrap(cam * gb, tmpl, single, "GGC")


# --------------------------------------------------------------------------
# batches and averaging
# --------------------------------------------------------------------------


def attribute_batch(model: Cnn, X, method: str, target_class: int = 1, batch_size: int = 8, **kw) -> np.ndarray:
    """Per-volume heatmaps [N, D, H, W] for ``method`` in {"LRP", "IG", "GGC"}."""
    method = method.upper()
    fn = {"LRP": lambda b: lrp_relevance(model, b, target_class, **kw)[0],
          "IG": lambda b: integrated_gradients(model, b, target_class, **kw),
          "GGC": lambda b: guided_grad_cam(model, b, target_class, **kw)}.get(method)
    if fn is None:
        raise ValueError(f"unknown attribution method {method!r}")
    X = np.asarray(X)
    out = np.empty(X.shape, dtype=np.float64)
    for s in range(0, len(X), batch_size):
        out[s : s + batch_size] = fn(X[s : s + batch_size])
    return out


def average_heatmaps(maps, abs_first: bool = False, method: str | None = None) -> Heatmap:
    """Voxel-wise mean of per-subject maps, then absolute value.

    ``maps`` may hold Heatmaps, Volume3Ds, or be a [N, D, H, W] array. With
    ``abs_first`` the absolute value is taken before averaging instead.
    """
    if isinstance(maps, np.ndarray):
        if maps.ndim != 4 or len(maps) == 0:
            raise ValueError("expected a non-empty [N, D, H, W] array")
        stack, tmpl, n = maps, None, len(maps)
    else:
        maps = list(maps)
        if not maps:
            raise ValueError("no heatmaps to average")
        vols = [m.volume if isinstance(m, Heatmap) else m for m in maps]
        tmpl = vols[0]
        for v in vols[1:]:
            if not v.same_grid(tmpl):
                raise ValueError("heatmaps are on different grids")
        if method is None and isinstance(maps[0], Heatmap):
            method = maps[0].method
        stack = np.stack([v.data for v in vols])
        n = sum(m.n_subjects_averaged if isinstance(m, Heatmap) else 1 for m in maps)
    stack = stack.astype(np.float64, copy=False)
    avg = np.abs(stack).mean(axis=0) if abs_first else np.abs(stack.mean(axis=0))
    vol = tmpl.like(avg) if tmpl is not None else Volume3D(avg)
    if method is None:
        raise ValueError("a method tag is required when averaging raw arrays")
    return Heatmap(vol, method, n)
