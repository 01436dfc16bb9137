"""Forward and backward kernels for the acoustic models, plus a gradient checker.

Everything is plain numpy. Ops accept a single example (conv input C,H,W;
dense input n_in) or a batch with one extra leading axis; any other rank is
rejected. There is no autodiff graph: each op exposes its own backward, and
the model module wires them together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


@dataclass
class LayerGrad:
    """Parameter gradients by name, plus the gradient w.r.t. the layer input."""

    param_grads: dict[str, np.ndarray]
    input_grad: np.ndarray | None = None


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def pad2d(x: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """Zero-pad the two trailing (spatial) axes symmetrically."""
    if pad_h == 0 and pad_w == 0:
        return x
    pads = [(0, 0)] * (x.ndim - 2) + [(pad_h, pad_h), (pad_w, pad_w)]
    return np.pad(x, pads)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (C*kh*kw, B, H', W') patch matrix.

    Column k holds the (channel, row, col) = unravel(k) shifted view of the
    input, matching the filter layout flattened the same way. Built from
    slab copies so the result is contiguous and ready for one matmul.
    """
    b, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((c * kh * kw, b, ho, wo), dtype=x.dtype)
    k = 0
    for ci in range(c):
        for u in range(kh):
            for v in range(kw):
                cols[k] = x[:, ci, u : u + ho, v : v + wo]
                k += 1
    return cols


def _conv2d_cached(
    x: np.ndarray, filters: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    b = x.shape[0]
    c_out, c_in, kh, kw = filters.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {c_in}")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
    cols = _im2col(x, kh, kw)
    ho, wo = cols.shape[2], cols.shape[3]
    y = filters.reshape(c_out, -1) @ cols.reshape(cols.shape[0], -1)
    out = y.reshape(c_out, b, ho, wo).transpose(1, 0, 2, 3) + bias[:, None, None]
    return out, cols


def conv2d(x: np.ndarray, filters: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation with stride 1.

    x: (C_in, H, W) or (B, C_in, H, W); filters: (C_out, C_in, kh, kw);
    output spatial size (H - kh + 1, W - kw + 1).
    """
    xb, squeeze = _batched(x, 3)
    out, _ = _conv2d_cached(xb, filters, bias)
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray,
    filters: np.ndarray,
    grad_out: np.ndarray,
    need_input: bool = True,
    cols: np.ndarray | None = None,
) -> LayerGrad:
    """Gradients of conv2d w.r.t. filters, bias, and (unless skipped) input.

    cols, when given, reuses the forward pass's patch matrix.
    """
    xb, squeeze = _batched(x, 3)
    gb, gsq = _batched(grad_out, 3)
    if squeeze != gsq or gb.shape[0] != xb.shape[0]:
        raise ShapeError("input and upstream gradient batch shapes disagree")
    c_out, c_in, kh, kw = filters.shape
    h_out = xb.shape[2] - kh + 1
    w_out = xb.shape[3] - kw + 1
    if gb.shape[1:] != (c_out, h_out, w_out):
        raise ShapeError(
            f"upstream gradient shape {gb.shape[1:]} != ({c_out}, {h_out}, {w_out})"
        )
    d_bias = gb.sum(axis=(0, 2, 3))
    if cols is None:
        cols = _im2col(xb, kh, kw)
    gt = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(c_out, -1)
    d_filters = (gt @ cols.reshape(cols.shape[0], -1).T).reshape(filters.shape)
    d_input = None
    if need_input:
        # Full correlation of grad_out with 180-degree-rotated filters,
        # in/out channels swapped.
        g_pad = pad2d(gb, kh - 1, kw - 1)
        rot = filters[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gcols = _im2col(g_pad, kh, kw)
        dx = rot.reshape(c_in, -1) @ gcols.reshape(gcols.shape[0], -1)
        d_input = dx.reshape(c_in, gb.shape[0], xb.shape[2], xb.shape[3]).transpose(1, 0, 2, 3)
        d_input = np.ascontiguousarray(d_input)
        if squeeze:
            d_input = d_input[0]
    return LayerGrad({"filters": d_filters, "bias": d_bias}, d_input)


def maxpool(x: np.ndarray, width: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling over the last (frequency) axis.

    Output width is floor(W / width); trailing remainder columns are dropped.
    Returns (pooled, argmax) where argmax holds within-window offsets for the
    backward pass.
    """
    if x.shape[-1] < width:
        raise ShapeError(f"cannot pool width-{x.shape[-1]} input with window {width}")
    w_out = x.shape[-1] // width
    trimmed = x[..., : w_out * width].reshape(*x.shape[:-1], w_out, width)
    arg = trimmed.argmax(axis=-1)
    out = np.take_along_axis(trimmed, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(
    grad_out: np.ndarray, arg: np.ndarray, input_width: int, width: int = 3
) -> np.ndarray:
    """Route upstream gradient to the argmax positions; dropped columns get 0."""
    w_out = arg.shape[-1]
    d_windows = np.zeros((*arg.shape, width), dtype=grad_out.dtype)
    np.put_along_axis(d_windows, arg[..., None], grad_out[..., None], axis=-1)
    d_input = np.zeros((*arg.shape[:-1], input_width), dtype=grad_out.dtype)
    d_input[..., : w_out * width] = d_windows.reshape(*arg.shape[:-1], w_out * width)
    return d_input


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map weight @ x + bias; x is (n_in,) or (B, n_in)."""
    n_out, n_in = weight.shape
    xb, squeeze = _batched(x, 1)
    if xb.shape[1] != n_in:
        raise ShapeError(f"input dim {xb.shape[1]} != weight fan-in {n_in}")
    if bias.shape != (n_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({n_out},)")
    out = xb @ weight.T + bias
    return out[0] if squeeze else out


def dense_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray) -> LayerGrad:
    xb, squeeze = _batched(x, 1)
    gb, _ = _batched(grad_out, 1)
    if gb.shape != (xb.shape[0], weight.shape[0]):
        raise ShapeError(f"upstream gradient shape {grad_out.shape} mismatched")
    d_weight = gb.T @ xb
    d_bias = gb.sum(axis=0)
    d_input = gb @ weight
    if squeeze:
        d_input = d_input[0]
    return LayerGrad({"weight": d_weight, "bias": d_bias}, d_input)


def selu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0:
        return float(
            SELU_LAMBDA * x if x > 0 else SELU_LAMBDA * SELU_ALPHA * np.expm1(x)
        )
    out = SELU_LAMBDA * x
    neg = x <= 0
    out[neg] = SELU_LAMBDA * SELU_ALPHA * np.expm1(x[neg])
    return out


def selu_frozen(x: np.ndarray, positive: np.ndarray) -> np.ndarray:
    """selu evaluated with the branch decision pinned by `positive`.

    Used by gradient checking so a +/-eps parameter perturbation cannot hop
    across the kink at 0; off-branch evaluation near 0 is well-defined and
    continuous there.
    """
    return np.where(
        positive, SELU_LAMBDA * x, SELU_LAMBDA * SELU_ALPHA * np.expm1(np.minimum(x, 30.0))
    )


def maxpool_frozen(x: np.ndarray, arg: np.ndarray, width: int = 3) -> np.ndarray:
    """Max pooling with the window winners pinned by a previous argmax."""
    w_out = arg.shape[-1]
    trimmed = x[..., : w_out * width].reshape(*x.shape[:-1], w_out, width)
    return np.take_along_axis(trimmed, arg[..., None], axis=-1)[..., 0]


def selu_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Chain grad_out through SELU given the forward output y = selu(x).

    Uses the identity lambda*alpha*exp(x) = y + lambda*alpha on the negative
    branch, so the backward pass needs no transcendentals.
    """
    y = np.asarray(y)
    slope = np.full_like(y, SELU_LAMBDA)
    neg = y <= 0
    slope[neg] = y[neg] + SELU_LAMBDA * SELU_ALPHA
    return grad_out * slope


def softmax_xent(
    logits: np.ndarray, target: int | np.ndarray
) -> tuple[float | np.ndarray, np.ndarray]:
    """Stabilized softmax + cross-entropy loss against integer class targets.

    Single example: logits (K,), target int -> (scalar loss, probs (K,)).
    Batch: logits (B, K), target (B,) -> (losses (B,), probs (B, K)).
    """
    lb, squeeze = _batched(logits, 1)
    k = lb.shape[1]
    if k < 2:
        raise ShapeError("softmax needs at least 2 classes")
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if targets.shape != (lb.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} != batch ({lb.shape[0]},)")
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexError(f"target out of range [0, {k})")
    z = lb - lb.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = -logp[np.arange(lb.shape[0]), targets]
    probs = np.exp(logp)
    if squeeze:
        return float(losses[0]), probs[0]
    return losses, probs


def softmax_xent_backward(probs: np.ndarray, target: int | np.ndarray) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. logits: probs - onehot(target)."""
    pb, squeeze = _batched(probs, 1)
    targets = np.atleast_1d(np.asarray(target, dtype=np.int64))
    grad = pb.copy()
    grad[np.arange(pb.shape[0]), targets] -= 1.0
    return grad[0] if squeeze else grad


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    eps: float
    tol: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def format(self) -> str:
        lines = [f"{'tensor':<24} {'max_rel_err':>12} {'checked':>8} result"]
        for e in self.entries:
            verdict = "ok" if e.max_rel_err <= self.tol else "FAIL"
            lines.append(f"{e.name:<24} {e.max_rel_err:>12.3e} {e.n_checked:>8} {verdict}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    model,
    batch,
    eps: float = 1e-5,
    tol: float = 1e-5,
    n_per_tensor: int = 16,
    _corrupt_tensor: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    For each parameter tensor the n_per_tensor entries with the largest
    analytic gradient magnitude are perturbed by +/- eps (entries of tensors
    with an all-zero gradient are checked too: their numeric difference must
    vanish identically). When the model offers frozen_loss, the perturbed
    evaluations pin the pooling/activation pattern of the base point, so the
    differences measure the same smooth piece the analytic gradient
    differentiates instead of tripping over kink crossings inside the eps
    window. The model must be in double precision; _corrupt_tensor is a test
    hook that falsifies one analytic gradient to prove detection.
    """
    params = model.named_parameters()
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ConfigError(f"grad_check requires float64 parameters; {name} is {p.dtype}")
    base_loss, analytic = model.loss_and_grads(batch)
    if not np.isfinite(base_loss):
        raise NumericError(f"non-finite loss {base_loss} in grad_check")
    if hasattr(model, "frozen_loss"):
        loss_fn = model.frozen_loss(batch)
    else:
        loss_fn = lambda: model.loss(batch)  # noqa: E731
    if _corrupt_tensor is not None:
        analytic = dict(analytic)
        analytic[_corrupt_tensor] = analytic[_corrupt_tensor] + 1e-2

    entries = []
    failures = []
    for name, param in params.items():
        grad = analytic[name]
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        order = np.argsort(-np.abs(gflat), kind="stable")[: min(n_per_tensor, flat.size)]
        worst = 0.0
        for idx in order:
            orig = flat[idx]
            flat[idx] = orig + eps
            loss_plus = loss_fn()
            flat[idx] = orig - eps
            loss_minus = loss_fn()
            flat[idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            worst = max(worst, _rel_err(gflat[idx], numeric))
        entries.append(GradCheckEntry(name, worst, len(order)))
        if worst > tol:
            failures.append(name)
    return GradCheckReport(entries, eps, tol, failures)
