"""Gradient-check suite: every differentiable operation and layer against
central finite differences, plus an end-to-end tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import model as M
from .tensor import Tensor, concat, grad_check, matmul, softmax
from .train import cross_entropy

__all__ = ["CheckResult", "run_all", "LAYER_TOL", "END_TO_END_TOL"]

LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3
POINTS = 5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _check(name: str, f, make_inputs, rng, points: int = POINTS,
           tol: float = LAYER_TOL) -> CheckResult:
    worst = 0.0
    for _ in range(points):
        rep = grad_check(f, make_inputs(rng), tol=tol)
        worst = max(worst, rep.max_rel_error)
    return CheckResult(name=name, max_rel_error=worst, tol=tol)


def _gru_inputs(rng, hidden=3, d=2, w=4, batched=False):
    shape = (2, d, w) if batched else (d, w)
    ts = [Tensor(rng.normal(size=shape))]
    for k in L.GRU_KEYS:
        if k in ("W_r", "W", "W_z"):
            ts.append(Tensor(rng.normal(size=(hidden, d))))
        elif k in ("U_r", "U", "U_z"):
            ts.append(Tensor(rng.normal(size=(hidden, hidden))))
        else:
            ts.append(Tensor(rng.normal(size=hidden)))
    return ts


def _gru_loss(ts):
    params = dict(zip(L.GRU_KEYS, ts[1:]))
    out = L.gru_sequence(ts[0], params)
    return (out * out).sum()


def _gru_step_loss(ts):
    out = L.gru_step(ts[0], ts[1], dict(zip(L.GRU_KEYS, ts[2:])))
    return (out * out).sum()


def _tiny_model():
    config = M.ModelConfig(v=3, num_classes=3, w=8, hidden=5, reduction=4,
                           kernel_sizes=(3, 5, 7), variant="FULL",
                           dropout_rate=0.0)
    return config


def _end_to_end_check(rng) -> CheckResult:
    config = _tiny_model()
    params = M.build_params(config, rng)
    names = list(params.tensors)
    # zero-initialized biases can park a pre-activation exactly on the ReLU
    # kink, where finite differences are meaningless; perturb them so the
    # check evaluates at a differentiable point
    for name, t in params.tensors.items():
        if name.endswith(("bias", "b_r", "b_h", "b_z")):
            t.data += rng.uniform(-0.1, 0.1, size=t.shape)
    x = rng.normal(size=(config.v, config.w))
    label = int(rng.integers(config.num_classes))

    def f(ts):
        p = M.AMTFNetParams(config=config, tensors=dict(zip(names, ts)))
        probs = M.forward(Tensor(x), p, config)
        return cross_entropy(probs, label)

    rep = grad_check(f, list(params.tensors.values()), tol=END_TO_END_TOL)
    return CheckResult(name="end_to_end_tiny_model",
                       max_rel_error=rep.max_rel_error, tol=END_TO_END_TOL)


def run_all(seed: int = 0) -> list[CheckResult]:
    """Every check at 5 random points; layer tolerance 1e-4, end-to-end 1e-3."""
    rng = np.random.default_rng(seed)
    results = [
        _check("elementwise_add", lambda ts: (ts[0] + ts[1]).sum(),
               lambda r: [Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=(3, 4)))], rng),
        _check("elementwise_sub_mul", lambda ts: ((ts[0] - ts[1]) * ts[0]).sum(),
               lambda r: [Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=(3, 4)))], rng),
        _check("broadcast_bias", lambda ts: (ts[0] + ts[1]).tanh().sum(),
               lambda r: [Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=4))], rng),
        _check("relu", lambda ts: ts[0].relu().sum(),
               lambda r: [Tensor(r.normal(size=(4, 4)) + 0.05)], rng),
        _check("sigmoid", lambda ts: ts[0].sigmoid().sum(),
               lambda r: [Tensor(r.normal(size=(4, 4)))], rng),
        _check("tanh", lambda ts: ts[0].tanh().sum(),
               lambda r: [Tensor(r.normal(size=(4, 4)))], rng),
        _check("matmul", lambda ts: matmul(ts[0], ts[1]).sum(),
               lambda r: [Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=(4, 2)))], rng),
        _check("reduce_mean", lambda ts: ts[0].mean(axis=1).tanh().sum(),
               lambda r: [Tensor(r.normal(size=(3, 5)))], rng),
        _check("reduce_std", lambda ts: ts[0].std(axis=0).sum(),
               lambda r: [Tensor(r.normal(size=(4, 3)))], rng),
        _check("reduce_sum", lambda ts: ts[0].sum(axis=1).sigmoid().sum(),
               lambda r: [Tensor(r.normal(size=(3, 5)))], rng),
        _check("softmax", lambda ts: (softmax(ts[0], axis=1) * ts[0]).sum(),
               lambda r: [Tensor(r.normal(size=(3, 4)))], rng),
        _check("concat", lambda ts: concat(ts, axis=0).std(axis=0).sum(),
               lambda r: [Tensor(r.normal(size=(2, 3))), Tensor(r.normal(size=(3, 3)))], rng),
        _check("depthwise_conv1d",
               lambda ts: L.depthwise_conv1d(ts[0], ts[1], ts[2]).tanh().sum(),
               lambda r: [Tensor(r.normal(size=(3, 7))), Tensor(r.normal(size=(3, 3))),
                          Tensor(r.normal(size=3))], rng),
        _check("conv1d", lambda ts: L.conv1d(ts[0], ts[1], ts[2]).sigmoid().sum(),
               lambda r: [Tensor(r.normal(size=(2, 6))), Tensor(r.normal(size=(2, 2, 3))),
                          Tensor(r.normal(size=2))], rng),
        _check("instance_norm", lambda ts: L.instance_norm(ts[0]).relu().sum(),
               lambda r: [Tensor(r.normal(size=(3, 6)))], rng),
        _check("linear", lambda ts: L.linear(ts[0], ts[1], ts[2]).tanh().sum(),
               lambda r: [Tensor(r.normal(size=4)), Tensor(r.normal(size=(3, 4))),
                          Tensor(r.normal(size=3))], rng),
        _check("gru_step", _gru_step_loss,
               lambda r: [Tensor(r.normal(size=2)), Tensor(r.normal(size=3))]
               + _gru_inputs(r)[1:], rng),
        _check("gru_sequence_bptt", _gru_loss, lambda r: _gru_inputs(r), rng),
        _check("gru_sequence_batched", _gru_loss,
               lambda r: _gru_inputs(r, batched=True), rng),
    ]

    config = _tiny_model()

    def att_loss(ts):
        p = M.build_params(config, np.random.default_rng(0))
        h = ts[0]
        a = M.temporal_attention(h, p, config)
        return M.fuse(h, a).sum()

    def se_loss(ts):
        se_cfg = M.ModelConfig(v=3, num_classes=3, w=8, hidden=5, reduction=4,
                               kernel_sizes=(3, 5, 7), variant="A6",
                               dropout_rate=0.0)
        p = M.build_params(se_cfg, np.random.default_rng(0))
        h = ts[0]
        return M.fuse(h, M.se_block(h, p, se_cfg)).sum()

    results.append(_check("temporal_attention_fuse", att_loss,
                          lambda r: [Tensor(r.normal(size=(5, 8)))], rng))
    results.append(_check("se_block_fuse", se_loss,
                          lambda r: [Tensor(r.normal(size=(5, 8)))], rng))
    results.append(_end_to_end_check(rng))
    return results
