"""Differentiable layer primitives for multivariate time-series models.

Shape conventions: feature maps are channels-first, ``(v, w)`` for a single
window of v variables over w time steps, or ``(B, v, w)`` for a batch. Every
layer accepts both; vectors are ``(d,)`` or batched ``(B, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, matmul

__all__ = [
    "GRU_KEYS",
    "depthwise_conv1d",
    "instance_norm",
    "conv1d",
    "linear",
    "dropout",
    "gru_step",
    "gru_sequence",
    "ParamSpec",
    "init_params",
]

GRU_KEYS = ("W_r", "U_r", "b_r", "W", "U", "b_h", "W_z", "U_z", "b_z")


def _check_kernel_width(n: int, w: int) -> int:
    if n % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {n}")
    if n > w:
        raise ShapeError(f"kernel size {n} exceeds signal length {w}")
    return (n - 1) // 2


def _pad_time(x: np.ndarray, p: int) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 1) + [(p, p)]
    return np.pad(x, pad)


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel cross-correlation with zero 'same' padding.

    ``x`` is ``(v, w)`` or ``(B, v, w)``; ``kernel`` is ``(v, n)`` with n odd;
    ``bias`` is ``(v,)``. Channel m is filtered only by kernel row m, so
    channels never mix: ``y[m, t] = sum_i kernel[m, i] * x[m, t+i-(n-1)/2]``.
    """
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"depthwise_conv1d input must be rank 2 or 3, got {x.shape}")
    v, w = x.shape[-2], x.shape[-1]
    if kernel.data.ndim != 2 or kernel.shape[0] != v:
        raise ShapeError(f"kernel shape {kernel.shape} does not match {v} channels")
    if bias.shape != (v,):
        raise ShapeError(f"bias shape {bias.shape} does not match {v} channels")
    n = kernel.shape[1]
    p = _check_kernel_width(n, w)

    xpad = _pad_time(x.data, p)
    k = kernel.data
    y = np.zeros_like(x.data)
    for i in range(n):
        y += k[:, i, None] * xpad[..., i:i + w]
    y += bias.data[:, None]

    def rule(g, x=x, kernel=kernel, bias=bias, xpad=xpad, k=k, n=n, p=p, w=w):
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            for i in range(n):
                gpad[..., i:i + w] += k[:, i, None] * g
            x._accumulate(gpad[..., p:p + w] if p else gpad)
        if kernel.requires_grad:
            gk = np.empty_like(k)
            sum_axes = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
            for i in range(n):
                gk[:, i] = (g * xpad[..., i:i + w]).sum(axis=sum_axes)
            kernel._accumulate(gk)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=tuple(a for a in range(g.ndim) if a != g.ndim - 2)))

    return Tensor._make(y, (x, kernel, bias), rule)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Multi-channel 1-D cross-correlation with zero 'same' padding.

    ``x`` is ``(C, w)`` or ``(B, C, w)``; ``kernel`` is ``(O, C, n)`` with n
    odd; ``bias`` is ``(O,)``; output has O channels and length w.
    """
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"conv1d input must be rank 2 or 3, got {x.shape}")
    c, w = x.shape[-2], x.shape[-1]
    if kernel.data.ndim != 3 or kernel.shape[1] != c:
        raise ShapeError(f"kernel shape {kernel.shape} does not match {c} input channels")
    o, _, n = kernel.shape
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    p = _check_kernel_width(n, w)

    batched = x.data.ndim == 3
    xpad = _pad_time(x.data, p)
    k = kernel.data
    out_shape = x.data.shape[:-2] + (o, w)
    y = np.zeros(out_shape)
    spec_fwd = "oc,bcw->bow" if batched else "oc,cw->ow"
    for i in range(n):
        y += np.einsum(spec_fwd, k[:, :, i], xpad[..., i:i + w])
    y += bias.data[:, None]

    def rule(g, x=x, kernel=kernel, bias=bias, xpad=xpad, k=k, n=n, p=p, w=w,
             batched=batched):
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            spec = "oc,bow->bcw" if batched else "oc,ow->cw"
            for i in range(n):
                gpad[..., i:i + w] += np.einsum(spec, k[:, :, i], g)
            x._accumulate(gpad[..., p:p + w] if p else gpad)
        if kernel.requires_grad:
            gk = np.empty_like(k)
            spec = "bow,bcw->oc" if batched else "ow,cw->oc"
            for i in range(n):
                gk[:, :, i] = np.einsum(spec, g, xpad[..., i:i + w])
            kernel._accumulate(gk)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=tuple(a for a in range(g.ndim) if a != g.ndim - 2)))

    return Tensor._make(y, (x, kernel, bias), rule)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each channel of each sample over the time axis.

    Statistics use the population variance; there are no learnable affine
    parameters, so per-channel level and scale are fully suppressed (up to
    eps). Input is ``(v, w)`` or ``(B, v, w)``.
    """
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"instance_norm input must be rank 2 or 3, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def rule(g, x=x, y=y, inv=inv):
        # d/dx of (x - mu)/sqrt(var + eps) over the time axis
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (g - gm - y * gy))

    return Tensor._make(y, (x,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` with ``weight`` of shape (out, in).

    Accepts a vector ``(d,)`` or a batch of row vectors ``(B, d)``.
    """
    if weight.data.ndim != 2:
        raise ShapeError(f"weight must be rank 2, got {weight.shape}")
    o, d = weight.shape
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} outputs")
    if x.data.ndim == 1:
        if x.shape[0] != d:
            raise ShapeError(f"input shape {x.shape} does not match weight {weight.shape}")
        return matmul(weight, x.reshape(d, 1)).reshape(o) + bias
    if x.data.ndim == 2:
        if x.shape[1] != d:
            raise ShapeError(f"input shape {x.shape} does not match weight {weight.shape}")
        return matmul(x, weight.T) + bias
    raise ShapeError(f"linear input must be rank 1 or 2, got {x.shape}")


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    In eval mode (or at rate 0) the input tensor is returned unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


# -- GRU ----------------------------------------------------------------------


def _gru_weights(params: Mapping[str, Tensor]) -> tuple[Tensor, ...]:
    try:
        return tuple(params[k] for k in GRU_KEYS)
    except KeyError as exc:
        raise KeyError(f"GRU parameters missing {exc.args[0]!r}") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _gru_cell(pr: Tensor, ph: Tensor, pz: Tensor, h_prev: Tensor,
              U_r: Tensor, U: Tensor, U_z: Tensor) -> Tensor:
    """Fused GRU cell. ``pr``/``ph``/``pz`` carry the already-projected
    inputs (W_* b + b_*) per gate; everything is batched ``(B, H)``.

        r = sigmoid(pr + h U_r^T);  hcand = tanh(ph + (r*h) U^T)
        z = sigmoid(pz + h U_z^T);  h' = (1-z)*h + z*hcand

    One graph node per step; the backward rule is the hand-derived adjoint
    of the lines above.
    """
    h = h_prev.data
    r = _sigmoid(pr.data + h @ U_r.data.T)
    rh = r * h
    hcand = np.tanh(ph.data + rh @ U.data.T)
    z = _sigmoid(pz.data + h @ U_z.data.T)
    out = (1.0 - z) * h + z * hcand

    def rule(g, pr=pr, ph=ph, pz=pz, h_prev=h_prev, U_r=U_r, U=U, U_z=U_z,
             h=h, r=r, rh=rh, hcand=hcand, z=z):
        ds_z = g * (hcand - h) * z * (1.0 - z)
        ds_c = g * z * (1.0 - hcand * hcand)
        d_rh = ds_c @ U.data
        ds_r = d_rh * h * r * (1.0 - r)
        if h_prev.requires_grad:
            dh = g * (1.0 - z) + d_rh * r
            dh += ds_r @ U_r.data
            dh += ds_z @ U_z.data
            h_prev._accumulate(dh)
        if pr.requires_grad:
            pr._accumulate(ds_r)
        if ph.requires_grad:
            ph._accumulate(ds_c)
        if pz.requires_grad:
            pz._accumulate(ds_z)
        if U_r.requires_grad:
            U_r._accumulate(ds_r.T @ h)
        if U.requires_grad:
            U._accumulate(ds_c.T @ rh)
        if U_z.requires_grad:
            U_z._accumulate(ds_z.T @ h)

    return Tensor._make(out, (pr, ph, pz, h_prev, U_r, U, U_z), rule)


def _project_time(b: Tensor, W: Tensor, bias: Tensor) -> Tensor:
    """Input-side gate projection for every time step in one GEMM:
    ``(B, d, w) x (H, d) -> (B, w, H)`` plus the gate bias."""
    batch, d, w = b.shape
    hidden = W.shape[0]
    y = np.tensordot(b.data, W.data.T, axes=([1], [0]))  # (B, w, H)
    y += bias.data

    def rule(g, b=b, W=W, bias=bias, batch=batch, d=d, w=w, hidden=hidden):
        if b.requires_grad:
            gb = np.tensordot(g, W.data, axes=([2], [0]))  # (B, w, d)
            b._accumulate(np.transpose(gb, (0, 2, 1)))
        if W.requires_grad:
            g2 = g.reshape(batch * w, hidden)
            b2 = np.transpose(b.data, (0, 2, 1)).reshape(batch * w, d)
            W._accumulate(g2.T @ b2)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1)))

    return Tensor._make(y, (b, W, bias), rule)


def _gru_scan(proj_r: Tensor, proj_h: Tensor, proj_z: Tensor, h0: Tensor,
              U_r: Tensor, U: Tensor, U_z: Tensor) -> Tensor:
    """Whole recurrence as one node: unrolls the fused cell over the time
    axis of the ``(B, w, H)`` gate projections and replays the per-step
    adjoints in reverse for backpropagation through time."""
    batch, w, hidden = proj_r.shape
    UrT, UT, UzT = U_r.data.T, U.data.T, U_z.data.T
    h = h0.data
    rs = np.empty((w, batch, hidden))
    rhs = np.empty_like(rs)
    cands = np.empty_like(rs)
    zs = np.empty_like(rs)
    h_ins = np.empty_like(rs)
    out = np.empty((batch, hidden, w))
    for t in range(w):
        h_ins[t] = h
        r = _sigmoid(proj_r.data[:, t] + h @ UrT)
        rh = r * h
        c = np.tanh(proj_h.data[:, t] + rh @ UT)
        z = _sigmoid(proj_z.data[:, t] + h @ UzT)
        h = (1.0 - z) * h + z * c
        rs[t], rhs[t], cands[t], zs[t] = r, rh, c, z
        out[:, :, t] = h

    def rule(g, proj_r=proj_r, proj_h=proj_h, proj_z=proj_z, h0=h0,
             U_r=U_r, U=U, U_z=U_z, rs=rs, rhs=rhs, cands=cands, zs=zs,
             h_ins=h_ins, batch=batch, w=w, hidden=hidden):
        dpr = np.empty((batch, w, hidden))
        dph = np.empty_like(dpr)
        dpz = np.empty_like(dpr)
        dUr = np.zeros_like(U_r.data)
        dU = np.zeros_like(U.data)
        dUz = np.zeros_like(U_z.data)
        dh = np.zeros((batch, hidden))
        for t in range(w - 1, -1, -1):
            dh = dh + g[:, :, t]
            r, rh, c, z, h_in = rs[t], rhs[t], cands[t], zs[t], h_ins[t]
            ds_z = dh * (c - h_in) * z * (1.0 - z)
            ds_c = dh * z * (1.0 - c * c)
            d_rh = ds_c @ U.data
            ds_r = d_rh * h_in * r * (1.0 - r)
            dpr[:, t], dph[:, t], dpz[:, t] = ds_r, ds_c, ds_z
            dUr += ds_r.T @ h_in
            dU += ds_c.T @ rh
            dUz += ds_z.T @ h_in
            dh = dh * (1.0 - z) + d_rh * r
            dh += ds_r @ U_r.data
            dh += ds_z @ U_z.data
        if proj_r.requires_grad:
            proj_r._accumulate(dpr)
        if proj_h.requires_grad:
            proj_h._accumulate(dph)
        if proj_z.requires_grad:
            proj_z._accumulate(dpz)
        if h0.requires_grad:
            h0._accumulate(dh)
        if U_r.requires_grad:
            U_r._accumulate(dUr)
        if U.requires_grad:
            U._accumulate(dU)
        if U_z.requires_grad:
            U_z._accumulate(dUz)

    return Tensor._make(out, (proj_r, proj_h, proj_z, h0, U_r, U, U_z), rule)


def gru_step(b_t: Tensor, h_prev: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """One GRU update: gates from the current input and previous hidden state.

    ``params`` maps W_r/W/W_z (H, d), U_r/U/U_z (H, H) and b_r/b_h/b_z (H,).
    With all biases zero this is exactly the bias-free textbook cell.
    """
    W_r, U_r, b_r, W, U, b_h, W_z, U_z, b_z = _gru_weights(params)
    single = b_t.data.ndim == 1
    bt = b_t.reshape(1, -1) if single else b_t
    h = h_prev.reshape(1, -1) if single else h_prev
    out = _gru_cell(matmul(bt, W_r.T) + b_r, matmul(bt, W.T) + b_h,
                    matmul(bt, W_z.T) + b_z, h, U_r, U, U_z)
    return out.reshape(-1) if single else out


def gru_sequence(b: Tensor, params: Mapping[str, Tensor],
                 h0: Tensor | None = None) -> Tensor:
    """Run the GRU over a feature map, differentiable through every step.

    ``b`` is ``(d, w)`` or ``(B, d, w)``; returns the hidden trajectory
    ``(H, w)`` or ``(B, H, w)``. ``h0`` defaults to zeros.
    """
    if b.data.ndim not in (2, 3):
        raise ShapeError(f"gru_sequence input must be rank 2 or 3, got {b.shape}")
    W_r, U_r, b_r, W, U, b_h, W_z, U_z, b_z = _gru_weights(params)
    hidden = W_r.shape[0]
    single = b.data.ndim == 2
    bb = b.reshape(1, *b.shape) if single else b
    batch, _, w = bb.shape

    if h0 is None:
        start = Tensor(np.zeros((batch, hidden)))
    elif h0.data.ndim == 1:
        start = Tensor(np.zeros((batch, hidden))) + h0
    else:
        start = h0

    # Input-side projections do not depend on the recurrence, so each gate is
    # one GEMM over the whole sequence; the scan handles the hidden side.
    proj_r = _project_time(bb, W_r, b_r)
    proj_h = _project_time(bb, W, b_h)
    proj_z = _project_time(bb, W_z, b_z)
    out = _gru_scan(proj_r, proj_h, proj_z, start, U_r, U, U_z)
    return out.reshape(hidden, w) if single else out


# -- parameter construction -----------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    """One named parameter tensor: weights draw U(-s, s) with s = sqrt(1/fan_in);
    a ``fan_in`` of None marks a bias, initialized to zero."""

    name: str
    shape: tuple[int, ...]
    fan_in: int | None


def init_params(layout: Sequence[ParamSpec],
                rng: np.random.Generator) -> dict[str, Tensor]:
    """Materialize a parameter dict from a layout, deterministically per rng."""
    params: dict[str, Tensor] = {}
    for spec in layout:
        if spec.name in params:
            raise ValueError(f"duplicate parameter name {spec.name!r}")
        if spec.fan_in is None:
            data = np.zeros(spec.shape)
        else:
            s = np.sqrt(1.0 / spec.fan_in)
            data = rng.uniform(-s, s, size=spec.shape)
        params[spec.name] = Tensor(data, requires_grad=True)
    return params
