"""Registry of finite-difference gradient checks over every differentiable
kernel and every loss term, shared by the test-suite and the ``gradcheck``
command."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from dotuda import losses
from dotuda import tensor as T
from dotuda.losses import BatchFeatures, LossWeights
from dotuda.model import DotVitConfig, DotVitModel
from dotuda.tensor import Tensor

OP_THRESHOLD = 1e-5
LOSS_THRESHOLD = 1e-4


@dataclass
class GradCase:
    name: str
    kind: str  # "op" or "loss"
    build: Callable[[np.random.Generator], tuple[Callable, list[Tensor]]]

    @property
    def threshold(self) -> float:
        return OP_THRESHOLD if self.kind == "op" else LOSS_THRESHOLD


REGISTRY: dict[str, GradCase] = {}


def register(name: str, kind: str = "op"):
    def deco(fn):
        REGISTRY[name] = GradCase(name, kind, fn)
        return fn

    return deco


def _scalarize(rng, out_shape):
    # A fixed random projection turns any output into a scalar with a generic gradient.
    weights = Tensor(rng.standard_normal(out_shape))
    return lambda y: (y * weights).sum()


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _unary(op, make_input):
    def build(rng):
        x = make_input(rng)
        proj = _scalarize(rng, op(x).shape)
        return (lambda xs: proj(op(xs[0]))), [x]

    return build


def _binary(op, shape_a, shape_b):
    def build(rng):
        a, b = _t(rng, *shape_a), _t(rng, *shape_b)
        proj = _scalarize(rng, op(a, b).shape)
        return (lambda xs: proj(op(xs[0], xs[1]))), [a, b]

    return build


# kernels ----------------------------------------------------------------------

register("matmul")(_binary(T.matmul, (3, 4), (4, 2)))
register("matmul_batched")(_binary(T.matmul, (2, 3, 3, 4), (2, 3, 4, 2)))
register("matmul_broadcast")(_binary(T.matmul, (2, 3, 4), (4, 5)))
register("add_broadcast")(_binary(T.add, (2, 3, 4), (1, 4)))
register("sub_broadcast")(_binary(T.sub, (3, 4), (3, 1)))
register("mul_broadcast")(_binary(T.mul, (2, 3), (3,)))


@register("div")
def _div(rng):
    a = _t(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4)), requires_grad=True)
    proj = _scalarize(rng, (3, 4))
    return (lambda xs: proj(T.div(xs[0], xs[1]))), [a, b]


register("exp")(_unary(T.exp, lambda r: _t(r, 3, 4)))
register("log")(_unary(T.log, lambda r: Tensor(r.uniform(0.5, 3.0, (3, 4)), requires_grad=True)))
register("square")(_unary(T.square, lambda r: _t(r, 3, 4)))
# Kept within +-3: deep in the tails the true gradient falls below finite-difference noise.
register("gelu")(_unary(T.gelu, lambda r: Tensor(r.uniform(-3.0, 3.0, (4, 5)), requires_grad=True)))
register("sum_axis")(_unary(lambda x: T.tsum(x, axis=1), lambda r: _t(r, 3, 4, 2)))
register("mean_all")(_unary(lambda x: T.mean(x) * T.mean(x), lambda r: _t(r, 3, 4)))
register("reshape_transpose")(_unary(lambda x: x.reshape(2, 6, 2).transpose(2, 0, 1), lambda r: _t(r, 4, 6)))
register("index_slice")(_unary(lambda x: x[:, 1, 1:3], lambda r: _t(r, 3, 4, 5)))
register("index_fancy")(_unary(lambda x: x[np.array([0, 2, 2])], lambda r: _t(r, 3, 4)))
register("expand")(_unary(lambda x: T.expand(x, (3, 2, 4)), lambda r: _t(r, 1, 2, 4)))
register("softmax")(_unary(T.softmax, lambda r: _t(r, 3, 5, scale=2.0)))
register("log_softmax")(_unary(T.log_softmax, lambda r: _t(r, 3, 5, scale=2.0)))
register("l2_normalize")(_unary(T.l2_normalize, lambda r: _t(r, 4, 6)))


@register("concat")
def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 2, 1)
    proj = _scalarize(rng, (2, 4))
    return (lambda xs: proj(T.concat([xs[0], xs[1]], axis=1))), [a, b]


@register("layer_norm")
def _layer_norm(rng):
    x = _t(rng, 3, 6, scale=2.0)
    gain = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    bias = _t(rng, 6)
    proj = _scalarize(rng, (3, 6))
    return (lambda xs: proj(T.layer_norm(xs[0], xs[1], xs[2]))), [x, gain, bias]


@register("cross_entropy")
def _cross_entropy(rng):
    x = _t(rng, 5, 3, scale=2.0)
    labels = rng.integers(0, 3, 5)
    return (lambda xs: T.cross_entropy_with_logits(xs[0], labels)), [x]


@register("softmax_dot")
def _softmax_dot(rng):
    x = _t(rng, 6)
    v = Tensor(rng.standard_normal(6))
    return (lambda xs: (T.softmax(xs[0]) * v).sum()), [x]


# loss terms ---------------------------------------------------------------------

def random_batch(rng, bs=6, bt=6, dim=5, classes=3):
    """Random features with labels chosen so every anchor has a positive."""
    ys = np.concatenate([np.arange(classes), rng.integers(0, classes, bs - classes)])
    yt = np.concatenate([np.arange(classes), rng.integers(0, classes, bt - classes)])
    feats = [_t(rng, n, dim) for n in (bs, bs, bt, bt)]
    return feats, rng.permutation(ys), rng.permutation(yt)


def _batch(feats, ys, yt):
    return BatchFeatures(feats[0], feats[1], feats[2], feats[3], ys, yt)


@register("sup_loss_source", "loss")
def _sup_s(rng):
    feats, ys, yt = random_batch(rng)
    w, b = _t(rng, 5, 3), _t(rng, 3)
    return (lambda xs: losses.sup_loss_source(_batch(xs[:4], ys, yt), (xs[4], xs[5]))), feats + [w, b]


@register("sup_loss_target", "loss")
def _sup_t(rng):
    feats, ys, yt = random_batch(rng)
    w, b = _t(rng, 5, 3), _t(rng, 3)
    return (lambda xs: losses.sup_loss_target(_batch(xs[:4], ys, yt), (xs[4], xs[5]))), feats + [w, b]


@register("contrastive_source", "loss")
def _con_s(rng):
    feats, ys, yt = random_batch(rng)
    tau = float(rng.choice([0.07, 0.5]))
    return (lambda xs: losses.contrastive_source(_batch(xs, ys, yt), tau)[0]), feats


@register("contrastive_target", "loss")
def _con_t(rng):
    feats, ys, yt = random_batch(rng)
    tau = float(rng.choice([0.07, 0.5]))
    return (lambda xs: losses.contrastive_target(_batch(xs, ys, yt), tau)[0]), feats


@register("diff_regularizer", "loss")
def _diff(rng):
    feats, ys, yt = random_batch(rng)
    return (lambda xs: losses.diff_regularizer(_batch(xs, ys, yt))), feats


class _Heads:
    """Stand-in model exposing two heads, enough for ``total_loss``."""

    def __init__(self, tensors, num_classes):
        self.tensors = tensors
        self.config = DotVitConfig(embed_dim=4, head_dim=4, num_heads=1, num_classes=num_classes)

    def head(self, i):
        return self.tensors[2 * i], self.tensors[2 * i + 1]


@register("total_loss", "loss")
def _total(rng):
    feats, ys, yt = random_batch(rng)
    heads = [_t(rng, 5, 3), _t(rng, 3), _t(rng, 5, 3), _t(rng, 3)]
    weights = LossWeights(lam=1.0, beta=0.1, tau=0.07)

    def f(xs):
        return losses.total_loss(_batch(xs[:4], ys, yt), _Heads(xs[4:], 3), weights)[0]

    return f, feats + heads


TINY_MODEL = DotVitConfig(
    image_size=8, patch_size=4, embed_dim=4, head_dim=2, num_heads=2, depth=1, num_classes=2, mlp_ratio=2.0,
    init_std=0.5,
)


@register("model_total_loss", "loss")
def _model_total(rng):
    """Full objective through the encoder on a 2+2 image batch."""
    model = DotVitModel(TINY_MODEL, rng=rng)
    images = rng.random((4, 1, 8, 8))
    ys, yt = np.array([0, 1]), np.array([1, 0])
    weights = LossWeights(lam=1.0, beta=0.1, tau=0.07)

    def f(_):
        out = model.encode(images)
        fs, ft = out.source_oriented, out.target_oriented
        batch = BatchFeatures(fs[:2], ft[:2], fs[2:], ft[2:], ys, yt)
        return losses.total_loss(batch, model, weights)[0]

    return f, model.parameters()


# corrupted case used as a negative control -------------------------------------

def _bad_square(x: Tensor) -> Tensor:
    xd = x.data
    return T._make(xd * xd, (x,), lambda g: (2.02 * g * xd,))


CORRUPTED = GradCase("corrupted_square", "op", _unary(_bad_square, lambda r: _t(r, 3, 4)))


@dataclass
class CaseResult:
    name: str
    kind: str
    worst: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.threshold


def run_case(case: GradCase, seeds, h: float = 1e-5) -> CaseResult:
    start = time.perf_counter()
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([seed, sum(map(ord, case.name))])
        f, inputs = case.build(rng)
        worst = max(worst, T.grad_check(f, inputs, h))
    return CaseResult(case.name, case.kind, worst, case.threshold, time.perf_counter() - start)


def run_suite(seeds=range(20), include_corrupted: bool = False, names=None) -> list[CaseResult]:
    cases = [c for n, c in REGISTRY.items() if names is None or n in names]
    if include_corrupted:
        cases.append(CORRUPTED)
    return [run_case(c, seeds) for c in cases]
