"""Training loss terms, as graph fragments and standalone reference evaluators.

The reference evaluators are deliberately direct numpy transcriptions of the
formulas, independent of the graph engine, so the two paths can be checked
against each other.

Terms (displacements and their gradients in voxel units):

* cc:    0.5 - r/2 with r the global Pearson correlation between the warped
         target and the atlas image.
* grad:  (1/N) sum_i ||J_i||^2, J the forward-difference displacement
         Jacobian (Frobenius norm).
* wgrad: (1/(3N)) sum_i ||W_i J_i||^2 with the boundary-band weight map W.
         The 1/(3N) normalization is kept verbatim even though the plain
         term uses 1/N; the term weights absorb the constant.
* ls:    sum of the mask-weighted population variances of the warped target
         inside and outside the atlas segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError, UsageError
from .graph import Graph, Node

VARIANTS = ("vxm", "new", "iac", "segthor", "hkits21")


@dataclass(frozen=True)
class LossWeights:
    w_cc: float = 1.0
    w_grad: float = 1.0
    w_wgrad: float = 1.0
    w_ls: float = 0.5

    def __post_init__(self):
        vals = (self.w_cc, self.w_grad, self.w_wgrad, self.w_ls)
        if any(w < 0 for w in vals):
            raise UsageError("loss weights must be non-negative")
        if not any(w > 0 for w in vals):
            raise UsageError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values for one evaluation; inactive terms are zero."""

    cc: float = 0.0
    grad: float = 0.0
    wgrad: float = 0.0
    ls: float = 0.0
    total: float = 0.0


def variant_terms(variant: str, weights: LossWeights) -> dict[str, float]:
    """Active term -> coefficient map for a loss variant.

    The vxm and new variants use the configured weights; the per-dataset
    variants use their fixed published coefficients.
    """
    if variant == "vxm":
        return {"cc": weights.w_cc, "grad": weights.w_grad}
    if variant == "new":
        return {"cc": weights.w_cc, "wgrad": weights.w_wgrad, "ls": weights.w_ls}
    if variant in ("iac", "hkits21"):
        return {"cc": 1.0, "wgrad": 1.0, "ls": 0.5}
    if variant == "segthor":
        return {"cc": 1.0, "grad": 1.0, "ls": 0.5}
    raise UsageError(f"unknown loss variant {variant!r}; expected one of {VARIANTS}")


def combined_loss(values: dict, weights: LossWeights, variant: str) -> LossBreakdown:
    """Weighted total of the active terms for a variant."""
    terms = variant_terms(variant, weights)
    fields = {"cc": 0.0, "grad": 0.0, "wgrad": 0.0, "ls": 0.0}
    total = 0.0
    for term, coef in terms.items():
        if term not in values or values[term] is None:
            raise UsageError(f"variant {variant!r} requires the {term!r} term")
        fields[term] = float(values[term])
        total += coef * fields[term]
    return LossBreakdown(total=total, **fields)


# ---------------------------------------------------------------------------
# standalone reference evaluators


def loss_cc(warped: np.ndarray, atlas: np.ndarray) -> float:
    """0.5 - r/2 with r the global Pearson correlation; range [0, 1]."""
    w = np.asarray(warped, dtype=np.float64).ravel()
    a = np.asarray(atlas, dtype=np.float64).ravel()
    dw = w - w.mean()
    da = a - a.mean()
    den = np.sqrt((dw * dw).sum() * (da * da).sum())
    if den == 0.0:
        raise NumericalError("correlation undefined: zero intensity variance")
    r = (dw * da).sum() / den
    return 0.5 - 0.5 * r


def loss_grad(jacobian: np.ndarray) -> float:
    """Mean squared Frobenius norm of the displacement Jacobian.

    ``jacobian`` is the (3, 3, nx, ny, nz) output of field_gradient.
    """
    n = np.prod(jacobian.shape[2:])
    return float((jacobian * jacobian).sum() / n)


def loss_wgrad(jacobian: np.ndarray, weights: np.ndarray) -> float:
    """Boundary-weighted smoothness with its verbatim 1/(3N) normalization."""
    if jacobian.shape[2:] != weights.shape:
        raise DataError(f"weight grid {weights.shape} does not match field {jacobian.shape[2:]}")
    n = np.prod(weights.shape)
    w2 = weights * weights
    return float(((jacobian * jacobian) * w2).sum() / (3.0 * n))


@dataclass(frozen=True)
class LevelSetStats:
    mu_int: float
    mu_ext: float
    var_int: float
    var_ext: float

    @property
    def loss(self) -> float:
        return self.var_int + self.var_ext


def loss_ls(warped: np.ndarray, mask: np.ndarray) -> LevelSetStats:
    """Intra-class intensity variances of the warped target under the atlas mask.

    Means and population variances are mask-weighted sums divided by the
    foreground / background counts.
    """
    w = np.asarray(warped, dtype=np.float64).ravel()
    a = np.asarray(mask, dtype=np.float64).ravel()
    n_int = a.sum()
    n_ext = (1.0 - a).sum()
    if n_int == 0 or n_ext == 0:
        raise DataError("level-set loss needs both foreground and background voxels")
    mu_int = (w * a).sum() / n_int
    mu_ext = (w * (1.0 - a)).sum() / n_ext
    var_int = (((w - mu_int) ** 2) * a).sum() / n_int
    var_ext = (((w - mu_ext) ** 2) * (1.0 - a)).sum() / n_ext
    return LevelSetStats(float(mu_int), float(mu_ext), float(var_int), float(var_ext))


# ---------------------------------------------------------------------------
# graph fragments


def attach_cc_loss(g: Graph, warped: Node, atlas_image: np.ndarray) -> Node:
    a = np.asarray(atlas_image, dtype=np.float64)
    da = a - a.mean()
    sum_da2 = float((da * da).sum())
    if sum_da2 == 0.0:
        raise NumericalError("atlas image has zero intensity variance")
    da_node = g.const(da.reshape(1, *a.shape))
    dw = g.sub(warped, g.mean(warped))
    num = g.sum(g.mul(dw, da_node))
    den = g.sqrt(g.affine(g.sum(g.square(dw)), sum_da2))
    r = g.div(num, den)
    return g.affine(r, -0.5, 0.5)


def attach_grad_loss(g: Graph, disp: Node) -> Node:
    n = int(np.prod(disp.shape[1:]))
    jac = g.fwd_diff(disp)
    return g.affine(g.sum(g.square(jac)), 1.0 / n)


def attach_wgrad_loss(g: Graph, disp: Node, weight_map: np.ndarray) -> Node:
    w = np.asarray(weight_map, dtype=np.float64)
    if w.shape != disp.shape[1:]:
        raise DataError(f"weight grid {w.shape} does not match field {disp.shape[1:]}")
    n = int(np.prod(w.shape))
    w2 = g.const((w * w).reshape(1, *w.shape))
    jac = g.fwd_diff(disp)
    weighted = g.mul(g.square(jac), w2)
    return g.affine(g.sum(weighted), 1.0 / (3.0 * n))


def attach_ls_loss(g: Graph, warped: Node, mask: np.ndarray) -> Node:
    a = np.asarray(mask, dtype=np.float64)
    n_int = float(a.sum())
    n_ext = float(a.size - a.sum())
    if n_int == 0 or n_ext == 0:
        raise DataError("level-set loss needs both foreground and background voxels")
    a_node = g.const(a.reshape(1, *a.shape))
    a_inv = g.const((1.0 - a).reshape(1, *a.shape))

    mu_int = g.affine(g.sum(g.mul(warped, a_node)), 1.0 / n_int)
    mu_ext = g.affine(g.sum(g.mul(warped, a_inv)), 1.0 / n_ext)
    var_int = g.affine(g.sum(g.mul(g.square(g.sub(warped, mu_int)), a_node)), 1.0 / n_int)
    var_ext = g.affine(g.sum(g.mul(g.square(g.sub(warped, mu_ext)), a_inv)), 1.0 / n_ext)
    return g.add(var_int, var_ext)


def attach_variant_loss(
    g: Graph,
    warped: Node,
    disp: Node,
    atlas_image: np.ndarray,
    atlas_mask: np.ndarray,
    weight_map: np.ndarray | None,
    weights: LossWeights,
    variant: str,
) -> tuple[Node, dict[str, Node]]:
    """Attach every active term for a variant; returns (total node, term nodes)."""
    coefs = variant_terms(variant, weights)
    term_nodes: dict[str, Node] = {}
    if "cc" in coefs:
        term_nodes["cc"] = attach_cc_loss(g, warped, atlas_image)
    if "grad" in coefs:
        term_nodes["grad"] = attach_grad_loss(g, disp)
    if "wgrad" in coefs:
        if weight_map is None:
            raise UsageError(f"variant {variant!r} requires a boundary weight map")
        term_nodes["wgrad"] = attach_wgrad_loss(g, disp, weight_map)
    if "ls" in coefs:
        term_nodes["ls"] = attach_ls_loss(g, warped, atlas_mask)

    total = None
    for term, coef in coefs.items():
        scaled = g.affine(term_nodes[term], coef)
        total = scaled if total is None else g.add(total, scaled)
    return total, term_nodes
