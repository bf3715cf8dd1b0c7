"""Quick built-in checks: loss gradients against finite differences, CKA invariances, probe sanity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .analysis import linear_cka
from .diffcore import Tensor, finite_diff_check, ops, stream
from .probe import fit_linear_probe

GRAD_TOL = 1e-4
SIZES = ((6, 4, 3), (10, 6, 4), (16, 8, 5))  # (rows, input dim, output dim)
LOSSES = ("ce", "supcon", "simclr", "distillation", "ewc")


@dataclass
class Check:
    name: str
    ok: bool
    detail: str


def _two_layer(rng, d_in, d_out):
    W1 = Tensor(rng.standard_normal((d_in, 8)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.standard_normal(8) * 0.1, requires_grad=True)
    W2 = Tensor(rng.standard_normal((8, d_out)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.standard_normal(d_out) * 0.1, requires_grad=True)
    return [W1, b1, W2, b2]


def loss_closure(kind: str, n: int, d_in: int, d_out: int, seed: int):
    """A scalar loss over a small two-layer net and the parameters it depends on."""
    rng = stream(seed, "selftest", kind, n)
    params = _two_layer(rng, d_in, d_out)
    X = rng.standard_normal((n, d_in))

    def out():
        W1, b1, W2, b2 = params
        return ops.affine(ops.relu(ops.affine(Tensor(X), W1, b1)), W2, b2)

    if kind == "ce":
        y = rng.integers(0, d_out, size=n)
        return (lambda: losses.cross_entropy(out(), y)), params
    if kind == "supcon":
        y = np.arange(n) % 2
        return (lambda: losses.supcon_loss(out(), y, temperature=0.5)), params
    if kind == "simclr":
        return (lambda: losses.simclr_loss(out(), temperature=0.5)), params
    if kind == "distillation":
        teacher = rng.standard_normal((n, d_out))
        return (lambda: losses.distillation_loss(out(), teacher, temperature=2.0)), params
    if kind == "ewc":
        named = {f"p{k}": p for k, p in enumerate(params)}
        anchor = losses.FisherAnchor(1, {k: p.data + rng.standard_normal(p.shape) * 0.3 for k, p in named.items()},
                                     {k: rng.uniform(0.0, 2.0, p.shape) for k, p in named.items()})
        return (lambda: losses.ewc_penalty(named, [anchor], 3.0) + ops.sum(out() * out()) * 0.01), params
    raise ValueError(f"unknown loss {kind!r}")


def gradient_checks(seed: int = 0) -> list[Check]:
    checks = []
    for kind in LOSSES:
        for n, d_in, d_out in SIZES:
            fn, params = loss_closure(kind, n, d_in, d_out, seed)
            err = finite_diff_check(fn, params, epsilon=1e-5)
            checks.append(Check(f"grad {kind} n={n}", bool(err <= GRAD_TOL), f"rel err {err:.2e}"))
    return checks


def cka_checks(seed: int = 0) -> list[Check]:
    rng = stream(seed, "selftest", "cka")
    X = rng.standard_normal((40, 6))
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    cases = [("cka identity", linear_cka(X, X)), ("cka orthogonal", linear_cka(X, X @ Q)),
             ("cka scaling", linear_cka(X, 3.7 * X))]
    return [Check(name, bool(abs(v - 1.0) <= 1e-12), f"{v:.15f}") for name, v in cases]


def probe_checks(seed: int = 0) -> list[Check]:
    rng = stream(seed, "selftest", "probe")
    F = np.concatenate([rng.normal(-3, 0.3, (20, 2)), rng.normal(3, 0.3, (20, 2))])
    y = np.repeat([0, 1], 20)
    acc = fit_linear_probe(F, y).score(F, y)
    return [Check("probe separable", bool(acc == 1.0), f"train acc {acc:.3f}")]


def run_all(seed: int = 0) -> list[Check]:
    return gradient_checks(seed) + cka_checks(seed) + probe_checks(seed)
