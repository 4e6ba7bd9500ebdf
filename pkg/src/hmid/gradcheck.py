"""Finite-difference gradient checks for every differentiable op and loss.

All checks run in float64 with central differences; the reported error is
the relative max-abs error of :func:`hmid.engine.finite_diff_check`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from . import lorentz as L
from . import losses as Ls

THRESHOLD = 1e-4


@dataclass
class GradCheck:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= THRESHOLD)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, np.ndarray]]:
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    above1 = rng.uniform(1.2, 3.0, size=(3, 4))
    unit = rng.uniform(-0.8, 0.8, size=(3, 4))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    table = rng.normal(size=(6, 4))
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    idx = np.array([1, 0, 3])
    probes: dict[tuple, np.ndarray] = {}

    def dot(t):
        # contract with a fixed random probe so every output entry matters
        shape = np.shape(E.as_array(t))
        if shape not in probes:
            probes[shape] = rng.normal(size=shape)
        return E.sum(t * probes[shape])

    return {
        "matmul": (lambda t: dot(E.matmul(t, w)), a),
        "add": (lambda t: dot(E.add(t, E.reshape(t[:, 0], (3, 1)))), a),
        "sub": (lambda t: dot(E.sub(t, t[1])), a),
        "mul": (lambda t: dot(E.mul(t, t[0])), a),
        "div": (lambda t: dot(E.div(t, pos + t * t)), a),
        "neg": (lambda t: dot(E.neg(t)), a),
        "exp": (lambda t: dot(E.exp(t)), a),
        "log": (lambda t: dot(E.log(t)), pos),
        "sqrt": (lambda t: dot(E.sqrt(t)), pos),
        "cosh": (lambda t: dot(E.cosh(t)), a),
        "sinh": (lambda t: dot(E.sinh(t)), a),
        "tanh": (lambda t: dot(E.tanh(t)), a),
        "acosh": (lambda t: dot(E.acosh(t)), above1),
        "acosh1p": (lambda t: dot(E.acosh1p(t)), pos),
        "asin": (lambda t: dot(E.asin(t)), unit),
        "acos": (lambda t: dot(E.acos(t)), unit),
        "clamp": (lambda t: dot(E.clamp(t, -0.5, 0.5)), a),
        "sum": (lambda t: dot(E.sum(t, axis=1)), a),
        "mean": (lambda t: dot(E.mean(t, axis=0)), a),
        "max": (lambda t: dot(E.max(t, axis=1)), a),
        "softmax_rows": (lambda t: dot(E.softmax_rows(t)), a),
        "log_softmax_rows": (lambda t: dot(E.log_softmax_rows(t)), a),
        "gather_rows": (lambda t: dot(E.gather_rows(t, idx)), a),
        "concat": (lambda t: dot(E.concat([t, t * t], axis=0)), a),
        "reshape": (lambda t: dot(E.reshape(t, (4, 3))), a),
        "transpose": (lambda t: dot(E.transpose(t)), a),
        "layer_norm": (lambda t: dot(E.layer_norm(t, gamma, beta)), a),
        "gelu": (lambda t: dot(E.gelu(t)), a),
        "embedding_lookup": (lambda t: dot(E.embedding_lookup(t, ids)), table),
    }


def check_ops(seed: int = 0) -> list[GradCheck]:
    cases = _op_cases(np.random.default_rng(seed))
    return [GradCheck(f"op:{name}", E.finite_diff_check(f, x, h=1e-6))
            for name, (f, x) in cases.items()]


@dataclass
class LossProblem:
    """Packed float64 inputs for the loss checks: ``x`` holds student image
    and text tangents, teacher image and text tangents, then tau and c."""

    batch: int
    dim: int
    x: np.ndarray

    def unpack(self, t):
        b, n = self.batch, self.dim
        block = b * n
        parts = [E.reshape(t[i * block:(i + 1) * block], (b, n)) for i in range(4)]
        tau, c = t[4 * block], t[4 * block + 1]
        return parts, tau, c


def make_loss_problem(batch: int = 4, dim: int = 3, seed: int = 0) -> LossProblem:
    rng = np.random.default_rng(seed)
    vecs = rng.normal(scale=0.8, size=4 * batch * dim)
    return LossProblem(batch, dim, np.concatenate([vecs, [0.5, 1.3]]))


def _points(parts, c):
    return [L.exp_map_origin(v, c) for v in parts]


def loss_functions(problem: LossProblem, K: float = L.DEFAULT_K) -> dict[str, Callable]:
    def contrastive(t):
        parts, tau, c = problem.unpack(t)
        si, st, _, _ = _points(parts, c)
        return Ls.hyperbolic_contrastive_loss(Ls.EmbeddingBatch(si, st), tau, c)

    def distillation(t):
        parts, tau, c = problem.unpack(t)
        si, st, ti, tt = _points(parts, c)
        return Ls.interaction_distillation_loss(
            Ls.EmbeddingBatch(si, st), Ls.EmbeddingBatch(ti, tt, "teacher"), tau, c)

    def entailment(t):
        parts, _, c = problem.unpack(t)
        si, st, _, _ = _points(parts, c)
        return Ls.entailment_loss(Ls.EmbeddingBatch(si, st), c, K)

    def total(t):
        parts, tau, c = problem.unpack(t)
        si, st, ti, tt = _points(parts, c)
        return Ls.total_loss(Ls.EmbeddingBatch(si, st), Ls.EmbeddingBatch(ti, tt, "teacher"),
                             tau, c, K).total

    def clip(t):
        parts, tau, _ = problem.unpack(t)
        return Ls.euclidean_clip_loss(parts[0], parts[1], tau)

    return {"clip": clip, "contrastive": contrastive, "distillation": distillation,
            "entailment": entailment, "total": total}


def check_losses(batch: int = 4, seed: int = 0) -> list[GradCheck]:
    problem = make_loss_problem(batch, seed=seed)
    return [GradCheck(f"loss:{name}", E.finite_diff_check(f, problem.x, h=1e-6))
            for name, f in loss_functions(problem).items()]


def run_all(seed: int = 0) -> list[GradCheck]:
    return check_ops(seed) + check_losses(seed=seed)
