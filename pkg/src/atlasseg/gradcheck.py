"""Finite-difference gradient verification suites.

Two layers of checking:

* per-op: every graph primitive against central differences of its own
  forward pass on small random inputs (tolerance 1e-5);
* per-loss: the loss-term and combined-variant gradients with respect to a
  random displacement field against central differences of the standalone
  reference evaluators, which never touch the graph engine (tolerance 1e-4,
  h = 1e-4, float64).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .graph import Graph, ParamStore
from .losses import (LossWeights, attach_cc_loss, attach_grad_loss,
                     attach_ls_loss, attach_variant_loss, attach_wgrad_loss,
                     loss_cc, loss_grad, loss_ls, loss_wgrad, variant_terms)
from .volume import Volume
from .warp import DeformationField, field_gradient, warp_volume

FD_STEP = 1e-4
OP_TOL = 1e-5
LOSS_TOL = 1e-4
_REL_FLOOR = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= self.tol


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), _REL_FLOOR)
    return float((np.abs(a - b) / scale).max())


def _fd_graph_gradient(graph: Graph, out_node, wiggle, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the graph forward w.r.t. one node's buffer."""
    buf = wiggle.value
    fd = np.zeros_like(buf)
    flat = buf.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        graph.forward()
        f_plus = float(out_node.value)
        flat[i] = orig - h
        graph.forward()
        f_minus = float(out_node.value)
        flat[i] = orig
        fd_flat[i] = (f_plus - f_minus) / (2.0 * h)
    graph.forward()
    return fd


def _scalarize(g: Graph, node, rng):
    """Reduce any op output to a scalar with a fixed random cotangent."""
    if node.shape == ():
        return g.affine(node, float(rng.uniform(0.5, 1.5)))
    probe = g.const(rng.uniform(-1.0, 1.0, size=node.shape))
    return g.sum(g.mul(node, probe))


def _check_graph(name, graph, out_node, wiggles, tol=OP_TOL) -> CheckResult:
    graph.forward()
    graph.backward(out_node)
    analytic = {id(w): w.grad.copy() for w in wiggles}
    worst = 0.0
    for w in wiggles:
        fd = _fd_graph_gradient(graph, out_node, w)
        worst = max(worst, _rel_err(analytic[id(w)], fd))
    return CheckResult(name, worst, tol)


def check_op(name: str, seed: int = 0) -> CheckResult:
    rng = np.random.Generator(np.random.PCG64([seed, zlib.crc32(name.encode())]))
    g = Graph()

    def inp(shape, low=-1.0, high=1.0):
        node = g.input(f"x{len(g.nodes)}", shape, needs_grad=True)
        g.bind(node, rng.uniform(low, high, size=shape))
        return node

    if name == "conv3d":
        x = inp((2, 4, 4, 4))
        store = ParamStore()
        store.add("w", rng.uniform(-0.5, 0.5, size=(3, 2, 3, 3, 3)))
        w = g.param(store, "w")
        out = g.conv3d(x, w)
        wiggles = [x, w]
    elif name == "bias_add":
        x = inp((3, 4, 4, 4))
        store = ParamStore()
        store.add("b", rng.uniform(-0.5, 0.5, size=(3,)))
        b = g.param(store, "b")
        out = g.bias_add(x, b)
        wiggles = [x, b]
    elif name == "leaky_relu":
        x = inp((2, 4, 4, 4))
        out = g.leaky_relu(x, 0.2)
        wiggles = [x]
    elif name == "maxpool2":
        x = inp((2, 4, 4, 4))
        out = g.maxpool2(x)
        wiggles = [x]
    elif name == "upsample2":
        x = inp((2, 2, 2, 2))
        out = g.upsample2(x)
        wiggles = [x]
    elif name == "concat":
        a = inp((2, 3, 3, 3))
        b = inp((1, 3, 3, 3))
        out = g.concat(a, b)
        wiggles = [a, b]
    elif name in ("add", "sub", "mul", "div"):
        a = inp((2, 4, 4, 4))
        b = inp((2, 4, 4, 4), 0.5, 1.5) if name == "div" else inp((2, 4, 4, 4))
        out = getattr(g, name)(a, b)
        wiggles = [a, b]
    elif name == "sum":
        x = inp((2, 4, 4, 4))
        out = g.sum(x)
        wiggles = [x]
    elif name == "square":
        x = inp((2, 4, 4, 4))
        out = g.square(x)
        wiggles = [x]
    elif name == "sqrt":
        x = inp((2, 4, 4, 4), 0.2, 1.5)
        out = g.sqrt(x)
        wiggles = [x]
    elif name == "affine":
        x = inp((2, 4, 4, 4))
        out = g.affine(x, 1.7, -0.3)
        wiggles = [x]
    elif name == "grid_sample":
        vol = inp((1, 4, 4, 4))
        disp = inp((3, 4, 4, 4), -1.2, 1.2)
        out = g.grid_sample(vol, disp)
        wiggles = [vol, disp]
    elif name == "fwd_diff":
        disp = inp((3, 4, 4, 4))
        out = g.fwd_diff(disp)
        wiggles = [disp]
    else:
        raise UsageError(f"no gradient check defined for op {name!r}")

    loss = _scalarize(g, out, rng)
    return _check_graph(name, g, loss, wiggles)


CHECKED_OPS = (
    "add", "sub", "mul", "div", "square", "sqrt", "affine", "sum",
    "conv3d", "bias_add", "leaky_relu", "maxpool2", "upsample2", "concat",
    "grid_sample", "fwd_diff",
)


def check_all_ops(seed: int = 0) -> list[CheckResult]:
    return [check_op(name, seed) for name in CHECKED_OPS]


def _loss_fixture(seed: int, dims):
    rng = np.random.Generator(np.random.PCG64(seed))
    spacing = (1.0, 1.0, 1.0)
    target = rng.uniform(0.0, 1.0, size=dims)
    atlas_img = rng.uniform(0.0, 1.0, size=dims)
    centers = np.stack(np.meshgrid(*(np.arange(n) + 0.5 for n in dims), indexing="ij"), -1)
    mask = ((((centers - np.asarray(dims) / 2.0) / (np.asarray(dims) * 0.3)) ** 2)
            .sum(-1) <= 1.0).astype(np.float64)
    weights = rng.uniform(0.5, 1.0, size=dims)
    disp0 = rng.uniform(-1.0, 1.0, size=(3, *dims))
    return spacing, target, atlas_img, mask, weights, disp0


def _reference_loss_fn(term, target, atlas_img, mask, weights, spacing):
    def warped(u):
        f = DeformationField(u, spacing)
        return warp_volume(Volume(target, spacing), f).data

    def jac(u):
        return field_gradient(DeformationField(u, spacing))

    if term == "cc":
        return lambda u: loss_cc(warped(u), atlas_img)
    if term == "grad":
        return lambda u: loss_grad(jac(u))
    if term == "wgrad":
        return lambda u: loss_wgrad(jac(u), weights)
    if term == "ls":
        return lambda u: loss_ls(warped(u), mask).loss
    raise ValueError(term)


def _fd_of_function(fn, u0: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    fd = np.zeros_like(u0)
    flat = u0.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(u0)
        flat[i] = orig - h
        f_minus = fn(u0)
        flat[i] = orig
        fd_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return fd


def check_loss_gradients(seed: int = 0, dims=(6, 6, 6)) -> list[CheckResult]:
    """Loss and combined-variant gradients w.r.t. a random displacement field,
    checked against finite differences of the standalone evaluators."""
    spacing, target, atlas_img, mask, weights, disp0 = _loss_fixture(seed, dims)
    results = []

    def graph_for(build):
        g = Graph()
        disp = g.input("disp", (3, *dims), needs_grad=True)
        g.bind(disp, disp0)
        vol = g.const(target.reshape(1, *dims))
        warped = g.grid_sample(vol, disp)
        out = build(g, warped, disp)
        g.forward()
        g.backward(out)
        return disp.grad.copy()

    term_builders = {
        "cc": lambda g, w, d: attach_cc_loss(g, w, atlas_img),
        "grad": lambda g, w, d: attach_grad_loss(g, d),
        "wgrad": lambda g, w, d: attach_wgrad_loss(g, d, weights),
        "ls": lambda g, w, d: attach_ls_loss(g, w, mask),
    }
    for term, build in term_builders.items():
        analytic = graph_for(build)
        ref = _reference_loss_fn(term, target, atlas_img, mask, weights, spacing)
        fd = _fd_of_function(ref, disp0.copy())
        results.append(CheckResult(f"loss:{term}", _rel_err(analytic, fd), LOSS_TOL))

    lw = LossWeights()
    for variant in ("vxm", "new", "iac", "segthor", "hkits21"):
        analytic = graph_for(lambda g, w, d: attach_variant_loss(
            g, w, d, atlas_img, mask, weights, lw, variant)[0])
        coefs = variant_terms(variant, lw)
        refs = {t: _reference_loss_fn(t, target, atlas_img, mask, weights, spacing)
                for t in coefs}

        def combined(u):
            return sum(c * refs[t](u) for t, c in coefs.items())

        fd = _fd_of_function(combined, disp0.copy())
        results.append(CheckResult(f"variant:{variant}", _rel_err(analytic, fd), LOSS_TOL))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_all_ops(seed) + check_loss_gradients(seed)
