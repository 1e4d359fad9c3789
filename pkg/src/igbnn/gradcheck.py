"""Finite-difference verification of the autodiff engine and of L_IG.

Every case builds a scalar from freshly recorded leaves; the recorded
gradient is compared with central differences (step 1e-5) using the
elementwise relative error ``|ad - fd| / (|fd| + 1e-8)``. Inputs are drawn
away from the kinks of relu / abs / clamp / max so the comparison is
meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import network
from . import tensor as T
from .infogain import IGConfig, information_gain_batch, l_ig
from .network import NetworkShape
from .tensor import Recording

__all__ = ["OPS", "GradcheckReport", "finite_difference", "check", "run_suite", "THRESHOLD", "FD_STEP"]

THRESHOLD = 1e-4
FD_STEP = 1e-5

Builder = Callable[[list], "T.Tensor"]


def finite_difference(fn: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray],
                      h: float = FD_STEP) -> list[np.ndarray]:
    grads = []
    for k, x in enumerate(inputs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            fp = fn(inputs)
            x[idx] = orig - h
            fm = fn(inputs)
            x[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check(build: Builder, inputs: list[np.ndarray], h: float = FD_STEP) -> float:
    """Max relative error between recorded and finite-difference gradients."""
    rec = Recording()
    leaves = [rec.leaf(x) for x in inputs]
    ad = rec.grad(build(leaves), leaves)
    fd = finite_difference(lambda xs: build([T.Tensor(x) for x in xs]).item(),
                           [np.array(x, dtype=np.float64) for x in inputs], h)
    return max(float(np.max(np.abs(a - f) / (np.abs(f) + 1e-8), initial=0.0)) for a, f in zip(ad, fd))


def _away_from(rng, shape, points=(0.0,), margin=0.05, low=-2.0, high=2.0):
    x = rng.uniform(low, high, size=shape)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def _weights(rng, shape):
    return rng.normal(size=shape)


def _dims(rng, k=2):
    return tuple(int(d) for d in rng.integers(1, 6, size=k))


def _case(op: str, rng: np.random.Generator) -> tuple[Builder, list[np.ndarray]]:
    m, n = _dims(rng)
    if op in ("add", "sub", "mul"):
        a, b = rng.normal(size=(m, n)), rng.normal(size=(n,))
        W = _weights(rng, (m, n))
        fn = {"add": T.add, "sub": T.sub, "mul": T.mul}[op]
        return (lambda L: T.sum_(fn(L[0], L[1]) * W)), [a, b]
    if op == "div":
        a, b = rng.normal(size=(m, n)), rng.uniform(0.5, 2.0, size=(m, 1))
        W = _weights(rng, (m, n))
        return (lambda L: T.sum_(T.div(L[0], L[1]) * W)), [a, b]
    if op == "matmul":
        k = int(rng.integers(1, 6))
        a, b = rng.normal(size=(2, m, k)), rng.normal(size=(k, n))
        W = _weights(rng, (2, m, n))
        return (lambda L: T.sum_(T.matmul(L[0], L[1]) * W)), [a, b]
    if op in ("relu", "abs"):
        x = _away_from(rng, (m, n))
        W = _weights(rng, (m, n))
        fn = T.relu if op == "relu" else T.abs_
        return (lambda L: T.sum_(fn(L[0]) * W)), [x]
    if op == "exp":
        x, W = rng.uniform(-2, 2, size=(m, n)), _weights(rng, (m, n))
        return (lambda L: T.sum_(T.exp(L[0]) * W)), [x]
    if op == "log":
        x, W = rng.uniform(0.5, 3.0, size=(m, n)), _weights(rng, (m, n))
        return (lambda L: T.sum_(T.log(L[0]) * W)), [x]
    if op in ("sum", "mean"):
        x = rng.normal(size=(m, n, 3))
        W = _weights(rng, (m, 3))
        fn = T.sum_ if op == "sum" else T.mean
        return (lambda L: T.sum_(fn(L[0], axis=1) * W)), [x]
    if op == "max":
        x = (rng.permutation(m * n * 3).reshape(m, n, 3) * 0.1) + rng.uniform(0, 0.01, size=(m, n, 3))
        W = _weights(rng, (m, 3))
        return (lambda L: T.sum_(T.max_reduce(L[0], axis=1) * W) + T.max_reduce(L[0])), [x]
    if op == "broadcast":
        x, W = rng.normal(size=(1, n)), _weights(rng, (m, n))
        return (lambda L: T.sum_(T.broadcast_to(L[0], (m, n)) * W)), [x]
    if op == "reshape":
        x, W = rng.normal(size=(m, n)), _weights(rng, (n, m))
        return (lambda L: T.sum_(T.reshape(L[0], (n, m)) * W)), [x]
    if op == "clamp":
        x = _away_from(rng, (m, n), points=(-0.5, 0.7))
        W = _weights(rng, (m, n))
        return (lambda L: T.sum_(T.clamp(L[0], -0.5, 0.7) * W)), [x]
    if op == "slice":
        x = rng.normal(size=(m + 2, n + 1))
        W = _weights(rng, (2, (n + 2) // 2))
        return (lambda L: T.sum_(L[0][1:3, ::2] * W)), [x]
    if op == "neg":
        x, W = rng.normal(size=(m, n)), _weights(rng, (m, n))
        return (lambda L: T.sum_(T.neg(L[0]) * W)), [x]
    if op == "composite":
        return _composite(rng)
    if op == "l_ig":
        return _l_ig_case(rng)
    raise KeyError(op)


def _composite(rng) -> tuple[Builder, list[np.ndarray]]:
    """Random small network-like expression using most ops at once."""
    b, d, h, k = (int(v) for v in rng.integers(2, 9, size=4))
    x = rng.normal(size=(b, d))
    w1 = rng.normal(size=(d, h)) / np.sqrt(d)
    c1 = rng.normal(size=(h,))
    w2 = rng.normal(size=(h, k)) / np.sqrt(h)
    lam = float(rng.uniform(0.1, 2.0))

    def build(L):
        z = T.relu(T.matmul(L[0], L[1]) + L[2])
        logits = T.matmul(T.clamp(z, hi=50.0), L[3])
        # detached shift is exact only because it is added back
        m = T.stop_gradient(T.max_reduce(logits, axis=-1, keepdims=True))
        lse = T.log(T.sum_(T.exp(logits - m), axis=-1, keepdims=True)) + m
        spread = T.mean(T.abs_(logits[:, :1] - T.mean(logits, axis=-1, keepdims=True)))
        return T.mean(lse) + lam * spread / (1.0 + T.sum_(L[2] * L[2]))

    return build, [x, w1, c1, w2]


def _kink_margin(shape: NetworkShape, theta: np.ndarray, xs: list[np.ndarray]) -> float:
    """Smallest |pre-activation| of any hidden unit over the given inputs."""
    margin = np.inf
    layers = shape.layer_slices()
    for p in theta:
        for x in xs:
            h = x
            for ws, bs, i, o in layers[:-1]:
                z = h @ p[ws].reshape(i, o) + p[bs]
                margin = min(margin, float(np.min(np.abs(z))))
                h = np.maximum(z, 0.0)
    return margin


def _l_ig_case(rng) -> tuple[Builder, list[np.ndarray]]:
    shape = NetworkShape((2, 8, 3))
    n, batch = 3, 6
    while True:
        theta = np.stack([network.init_params(shape, rng.integers(2**31)) for _ in range(n)])
        theta += rng.normal(0, 0.3, size=theta.shape)
        x = rng.uniform(0, 1, size=(batch, 2))
        x_adv = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0, 1)
        y = rng.integers(0, 3, size=batch)
        cfg = IGConfig(lam=float(rng.uniform(1, 10)))
        # keep relu and |ΔIG| kinks well outside the finite-difference stencil
        probs = network.predict_proba(network.forward(shape, theta, np.concatenate([x, x_adv])).data)
        ig = information_gain_batch(probs)
        if _kink_margin(shape, theta, [x, x_adv]) > 1e-3 and np.min(np.abs(ig[:batch] - ig[batch:])) > 1e-6:
            break
    return (lambda L: l_ig(shape, L[0], x, x_adv, y, cfg).total), [theta]


OPS = ("add", "sub", "mul", "div", "neg", "matmul", "relu", "exp", "log", "abs", "sum", "mean", "max",
       "broadcast", "reshape", "clamp", "slice", "composite", "l_ig")


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    cases: dict[str, int] = field(default_factory=dict)
    threshold: float = THRESHOLD

    @property
    def failed(self) -> list[str]:
        return [op for op, e in self.max_rel_error.items() if not e < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failed

    def lines(self) -> list[str]:
        return [f"{op:<10} cases={self.cases[op]:<4} max_rel_err={err:.3e} "
                f"{'PASS' if err < self.threshold else 'FAIL'}" for op, err in self.max_rel_error.items()]


def run_suite(seed: int = 0, cases_per_op: int = 8, composite_cases: int = 100, l_ig_cases: int = 20,
              ops=OPS, inject: str | None = None) -> GradcheckReport:
    """Run every op case; ``inject`` corrupts one op's backward (fault drill)."""
    report = GradcheckReport()
    root = np.random.SeedSequence(seed)
    counts = {"composite": composite_cases, "l_ig": l_ig_cases}
    for op, ss in zip(ops, root.spawn(len(ops))):
        rng = np.random.default_rng(ss)
        worst = 0.0
        n_cases = counts.get(op, cases_per_op)
        for _ in range(n_cases):
            build, inputs = _case(op, rng)
            if inject is not None:
                with T.inject_gradient_fault(inject):
                    err = check(build, inputs)
            else:
                err = check(build, inputs)
            worst = max(worst, err)
        report.max_rel_error[op] = worst
        report.cases[op] = n_cases
    return report
