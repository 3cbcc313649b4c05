"""Reverse-mode differentiation over a static graph of dense 3D array ops.

Values are float64 numpy arrays shaped (channels, nx, ny, nz), 1-d (bias),
or 0-d (scalars). A graph is built once per configuration; node value and
gradient buffers are reused across steps, and both the forward and reverse
sweeps run in a fixed topological order, so repeated passes with identical
inputs are bit-identical.

Gradients flow only into parameter nodes and inputs created with
``needs_grad=True``; everything upstream of neither is skipped.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, UsageError


class ParamStore:
    """Named trainable blocks plus Adam moment buffers.

    Block shapes are immutable after creation; the arrays themselves are
    updated in place by the optimizer.
    """

    def __init__(self):
        self.blocks: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self.blocks:
            raise UsageError(f"duplicate parameter block {name!r}")
        block = np.array(array, dtype=np.float64)
        self.blocks[name] = block
        self.m[name] = np.zeros_like(block)
        self.v[name] = np.zeros_like(block)
        return block

    def names(self) -> list[str]:
        return list(self.blocks)

    def total_size(self) -> int:
        return sum(b.size for b in self.blocks.values())


class Node:
    __slots__ = ("op", "inputs", "shape", "value", "grad", "attrs", "needs_grad", "name")

    def __init__(self, op, inputs, shape, needs_grad, attrs=None, name=None, value=None):
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.needs_grad = needs_grad
        self.attrs = attrs or {}
        self.name = name
        self.value = np.empty(shape) if value is None else value
        self.grad = np.zeros(shape) if needs_grad else None

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape}" + (f", name={self.name})" if self.name else ")")


def _accum(node, delta):
    node.grad += delta


class Graph:
    """Static computation graph; builder methods append in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_nodes: dict[str, Node] = {}
        self._unbound: set[int] = set()
        # scratch shared by all conv nodes of this graph (ops run sequentially)
        self._scratch: dict = {"cols": None, "g2": None}

    def _add(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    # ---- leaves ----

    def input(self, name: str, shape, needs_grad: bool = False) -> Node:
        node = self._add(Node("input", [], tuple(shape), needs_grad, name=name))
        node.value.fill(np.nan)
        self._unbound.add(id(node))
        return node

    def const(self, array) -> Node:
        a = np.asarray(array, dtype=np.float64)
        return self._add(Node("const", [], a.shape, False, value=a))

    def param(self, store: ParamStore, name: str) -> Node:
        if name not in store.blocks:
            raise UsageError(f"unknown parameter block {name!r}")
        block = store.blocks[name]
        node = self._add(Node("param", [], block.shape, True, name=name, value=block))
        self.param_nodes[name] = node
        return node

    def bind(self, node: Node, array) -> None:
        a = np.asarray(array, dtype=np.float64)
        if a.shape != node.shape:
            raise DataError(f"bind shape {a.shape} != input shape {node.shape}")
        node.value[...] = a
        self._unbound.discard(id(node))

    # ---- elementwise and reductions ----

    def _binary(self, op, a: Node, b: Node) -> Node:
        shape = _broadcast_shape(a.shape, b.shape)
        return self._add(Node(op, [a, b], shape, a.needs_grad or b.needs_grad))

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def div(self, a, b):
        return self._binary("div", a, b)

    def square(self, x: Node) -> Node:
        return self._add(Node("square", [x], x.shape, x.needs_grad))

    def sqrt(self, x: Node) -> Node:
        return self._add(Node("sqrt", [x], x.shape, x.needs_grad))

    def affine(self, x: Node, scale: float, offset: float = 0.0) -> Node:
        """Elementwise scale * x + offset with python-float constants."""
        return self._add(
            Node("affine", [x], x.shape, x.needs_grad,
                 attrs={"scale": float(scale), "offset": float(offset)})
        )

    def sum(self, x: Node) -> Node:
        return self._add(Node("sum", [x], (), x.needs_grad))

    def mean(self, x: Node) -> Node:
        total = self.sum(x)
        return self.affine(total, 1.0 / float(np.prod(x.shape)))

    # ---- network ops ----

    def conv3d(self, x: Node, w: Node) -> Node:
        """3x3x3 convolution, stride 1, zero padding 1."""
        cin, nx, ny, nz = x.shape
        if w.shape[1] != cin or w.shape[2:] != (3, 3, 3):
            raise DataError(f"conv weights {w.shape} incompatible with input {x.shape}")
        cout = w.shape[0]
        # x-slab tiling keeps the im2col scratch bounded (~48 MB)
        slab = max(1, min(nx, _CONV_SCRATCH_ELEMS // (27 * cin * ny * nz)))
        attrs = {
            "xpad": np.zeros((cin, nx + 2, ny + 2, nz + 2)),
            "slab": slab,
            "scratch": self._scratch,
        }
        return self._add(Node("conv3d", [x, w], (cout, nx, ny, nz),
                              x.needs_grad or w.needs_grad, attrs=attrs))

    def bias_add(self, x: Node, b: Node) -> Node:
        if b.shape != (x.shape[0],):
            raise DataError(f"bias shape {b.shape} incompatible with {x.shape}")
        return self._add(Node("bias_add", [x, b], x.shape, x.needs_grad or b.needs_grad))

    def leaky_relu(self, x: Node, slope: float = 0.2) -> Node:
        return self._add(Node("leaky_relu", [x], x.shape, x.needs_grad,
                              attrs={"slope": float(slope)}))

    def maxpool2(self, x: Node) -> Node:
        c, nx, ny, nz = x.shape
        if nx % 2 or ny % 2 or nz % 2:
            raise DataError(f"maxpool2 needs even dims, got {x.shape}")
        return self._add(Node("maxpool2", [x], (c, nx // 2, ny // 2, nz // 2),
                              x.needs_grad, attrs={}))

    def upsample2(self, x: Node) -> Node:
        """Trilinear x2 upsample with half-voxel alignment."""
        c, nx, ny, nz = x.shape
        mats = [_upsample_matrix(n) for n in (nx, ny, nz)]
        return self._add(Node("upsample2", [x], (c, 2 * nx, 2 * ny, 2 * nz),
                              x.needs_grad, attrs={"mats": mats}))

    def concat(self, a: Node, b: Node) -> Node:
        if a.shape[1:] != b.shape[1:]:
            raise DataError(f"concat spatial mismatch {a.shape} vs {b.shape}")
        return self._add(Node("concat", [a, b], (a.shape[0] + b.shape[0], *a.shape[1:]),
                              a.needs_grad or b.needs_grad))

    # ---- warping ops ----

    def grid_sample(self, vol: Node, disp: Node) -> Node:
        """Sample ``vol`` at x + u(x); differentiable in the displacement."""
        if disp.shape[0] != 3 or vol.shape[1:] != disp.shape[1:]:
            raise DataError(f"grid_sample shapes {vol.shape} / {disp.shape} mismatch")
        if vol.shape[0] != 1:
            raise DataError("grid_sample expects a single-channel volume")
        if min(vol.shape[1:]) < 2:
            raise DataError("grid_sample needs at least 2 voxels per axis")
        dims = disp.shape[1:]
        xx, yy, zz = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
        base = np.stack([xx.ravel(), yy.ravel(), zz.ravel()])
        return self._add(Node("grid_sample", [vol, disp], (1, *dims),
                              vol.needs_grad or disp.needs_grad,
                              attrs={"base": base, "cache": {}}))

    def fwd_diff(self, disp: Node) -> Node:
        """Forward-difference Jacobian of a 3-channel field, zero at far faces.

        Output channel 3*c + a holds du_c/dx_a.
        """
        if disp.shape[0] != 3:
            raise DataError(f"fwd_diff expects 3 channels, got {disp.shape}")
        return self._add(Node("fwd_diff", [disp], (9, *disp.shape[1:]), disp.needs_grad))

    # ---- execution ----

    def forward(self) -> None:
        if self._unbound:
            unbound = [n.name for n in self.nodes if id(n) in self._unbound]
            raise UsageError(f"unbound graph inputs: {unbound}")
        for node in self.nodes:
            _FORWARD[node.op](node)

    def zero_grad(self) -> None:
        for node in self.nodes:
            if node.needs_grad:
                node.grad[...] = 0.0

    def backward(self, out: Node) -> None:
        """Reverse sweep from a scalar node; grads accumulate in fixed order."""
        if out.shape != ():
            raise UsageError(f"backward requires a scalar output, got shape {out.shape}")
        self.zero_grad()
        if not out.needs_grad:
            return
        out.grad[...] = 1.0
        for node in reversed(self.nodes):
            if node.needs_grad and node.inputs:
                _BACKWARD[node.op](node)


def _broadcast_shape(sa, sb):
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    # channel broadcast: (1, X, Y, Z) against (C, X, Y, Z)
    if len(sa) == 4 and len(sb) == 4 and sa[1:] == sb[1:] and 1 in (sa[0], sb[0]):
        return sa if sa[0] >= sb[0] else sb
    raise DataError(f"incompatible shapes {sa} and {sb}")


def _reduce_to(g, shape):
    """Sum-reduce a gradient onto a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    return g.sum(axis=0, keepdims=True)


def _upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) trilinear interpolation weights along one axis."""
    out_coord = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    c = np.clip(out_coord, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(c).astype(int), n - 2)
    f = c - i0
    mat = np.zeros((2 * n, n))
    rows = np.arange(2 * n)
    mat[rows, i0] = 1.0 - f
    mat[rows, i0 + 1] += f
    return mat


def _axis_matmul(arr, mat, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


# ---------------------------------------------------------------------------
# forward implementations


def _fwd_noop(node):
    pass


def _fwd_add(node):
    np.add(node.inputs[0].value, node.inputs[1].value, out=node.value)


def _fwd_sub(node):
    np.subtract(node.inputs[0].value, node.inputs[1].value, out=node.value)


def _fwd_mul(node):
    np.multiply(node.inputs[0].value, node.inputs[1].value, out=node.value)


def _fwd_div(node):
    np.divide(node.inputs[0].value, node.inputs[1].value, out=node.value)


def _fwd_square(node):
    np.multiply(node.inputs[0].value, node.inputs[0].value, out=node.value)


def _fwd_sqrt(node):
    np.sqrt(node.inputs[0].value, out=node.value)


def _fwd_affine(node):
    np.multiply(node.inputs[0].value, node.attrs["scale"], out=node.value)
    if node.attrs["offset"] != 0.0:
        node.value += node.attrs["offset"]


def _fwd_sum(node):
    node.value[...] = node.inputs[0].value.sum()


_CONV_SCRATCH_ELEMS = 6_000_000
_OFFSETS = [(dx, dy, dz) for dx in range(3) for dy in range(3) for dz in range(3)]


def _conv_scratch(scratch, key, rows, cols):
    buf = scratch[key]
    if buf is None or buf.size < rows * cols:
        buf = np.empty(rows * cols)
        scratch[key] = buf
    return buf[: rows * cols].reshape(rows, cols)


def _fill_cols(cols, xpad, x0, x1, ny, nz, cin):
    """Gather the 27 shifted windows of an x-slab into the im2col matrix."""
    nt = (x1 - x0) * ny * nz
    for k, (dx, dy, dz) in enumerate(_OFFSETS):
        win = xpad[:, dx + x0:dx + x1, dy:dy + ny, dz:dz + nz]
        cols[k * cin:(k + 1) * cin, :nt] = win.reshape(cin, nt)


def _weight_matrix(w):
    cout, cin = w.shape[:2]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1).reshape(cout, 27 * cin))


def _fwd_conv3d(node):
    x = node.inputs[0].value
    w = node.inputs[1].value
    cin, nx, ny, nz = x.shape
    cout = w.shape[0]
    xpad = node.attrs["xpad"]
    xpad[:, 1:-1, 1:-1, 1:-1] = x
    w_mat = _weight_matrix(w)
    slab = node.attrs["slab"]
    out = node.value.reshape(cout, nx, ny, nz)
    for x0 in range(0, nx, slab):
        x1 = min(x0 + slab, nx)
        nt = (x1 - x0) * ny * nz
        cols = _conv_scratch(node.attrs["scratch"], "cols", 27 * cin, nt)
        _fill_cols(cols, xpad, x0, x1, ny, nz, cin)
        out[:, x0:x1] = (w_mat @ cols).reshape(cout, x1 - x0, ny, nz)


def _fwd_bias_add(node):
    x, b = node.inputs[0].value, node.inputs[1].value
    np.add(x, b[:, None, None, None], out=node.value)


def _fwd_leaky_relu(node):
    x = node.inputs[0].value
    slope = node.attrs["slope"]
    np.multiply(x, np.where(x > 0, 1.0, slope), out=node.value)


def _fwd_maxpool2(node):
    x = node.inputs[0].value
    c, nx, ny, nz = x.shape
    windows = x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    windows = windows.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, nx // 2, ny // 2, nz // 2, 8)
    idx = windows.argmax(axis=-1)
    node.attrs["argmax"] = idx
    node.value[...] = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]


def _fwd_upsample2(node):
    x = node.inputs[0].value
    mats = node.attrs["mats"]
    out = x
    for axis, mat in enumerate(mats):
        out = _axis_matmul(out, mat, axis + 1)
    node.value[...] = out


def _fwd_concat(node):
    a, b = node.inputs[0].value, node.inputs[1].value
    node.value[: a.shape[0]] = a
    node.value[a.shape[0]:] = b


def _corner_values(vol, ix, iy, iz):
    v = vol[0]
    return (
        v[ix, iy, iz], v[ix + 1, iy, iz], v[ix, iy + 1, iz], v[ix + 1, iy + 1, iz],
        v[ix, iy, iz + 1], v[ix + 1, iy, iz + 1], v[ix, iy + 1, iz + 1], v[ix + 1, iy + 1, iz + 1],
    )


def _fwd_grid_sample(node):
    vol = node.inputs[0].value
    disp = node.inputs[1].value
    dims = vol.shape[1:]
    p = node.attrs["base"] + disp.reshape(3, -1)
    hi = np.array(dims, dtype=np.float64) - 1.0

    pc = np.clip(p, 0.0, hi[:, None])
    i0 = np.minimum(pc.astype(np.int64), (np.array(dims) - 2)[:, None])
    f = pc - i0
    unclamped = (p >= 0.0) & (p <= hi[:, None])

    ix, iy, iz = i0
    fx, fy, fz = f
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    c000, c100, c010, c110, c001, c101, c011, c111 = _corner_values(vol, ix, iy, iz)

    wy0 = gy * (gx * c000 + fx * c100) + fy * (gx * c010 + fx * c110)
    wy1 = gy * (gx * c001 + fx * c101) + fy * (gx * c011 + fx * c111)
    node.value.reshape(-1)[...] = gz * wy0 + fz * wy1

    cache = node.attrs["cache"]
    cache.update(i0=i0, f=f, unclamped=unclamped)


def _fwd_fwd_diff(node):
    disp = node.inputs[0].value
    out = node.value
    out.fill(0.0)
    for axis in range(3):
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis + 1] = slice(0, -1)
        hi[axis + 1] = slice(1, None)
        diff = disp[tuple(hi)] - disp[tuple(lo)]
        for c in range(3):
            out[(3 * c + axis, *lo[1:])] = diff[c]


def _fwd_input(node):
    if np.isnan(node.value).any():
        raise UsageError(f"input {node.name!r} used before binding")


# ---------------------------------------------------------------------------
# backward implementations: accumulate into input grads, respecting needs_grad


def _bwd_add(node):
    a, b = node.inputs
    if a.needs_grad:
        _accum(a, _reduce_to(node.grad, a.shape))
    if b.needs_grad:
        _accum(b, _reduce_to(node.grad, b.shape))


def _bwd_sub(node):
    a, b = node.inputs
    if a.needs_grad:
        _accum(a, _reduce_to(node.grad, a.shape))
    if b.needs_grad:
        _accum(b, _reduce_to(-node.grad, b.shape))


def _bwd_mul(node):
    a, b = node.inputs
    if a.needs_grad:
        _accum(a, _reduce_to(node.grad * b.value, a.shape))
    if b.needs_grad:
        _accum(b, _reduce_to(node.grad * a.value, b.shape))


def _bwd_div(node):
    a, b = node.inputs
    if a.needs_grad:
        _accum(a, _reduce_to(node.grad / b.value, a.shape))
    if b.needs_grad:
        _accum(b, _reduce_to(-node.grad * a.value / (b.value * b.value), b.shape))


def _bwd_square(node):
    x = node.inputs[0]
    if x.needs_grad:
        _accum(x, 2.0 * x.value * node.grad)


def _bwd_sqrt(node):
    x = node.inputs[0]
    if x.needs_grad:
        _accum(x, 0.5 * node.grad / node.value)


def _bwd_affine(node):
    x = node.inputs[0]
    if x.needs_grad:
        _accum(x, node.attrs["scale"] * node.grad)


def _bwd_sum(node):
    x = node.inputs[0]
    if x.needs_grad:
        _accum(x, np.broadcast_to(node.grad, x.shape))


def _bwd_conv3d(node):
    x_node, w_node = node.inputs
    x = x_node.value
    w = w_node.value
    cin, nx, ny, nz = x.shape
    cout = w.shape[0]
    g = node.grad.reshape(cout, nx, ny, nz)
    xpad = node.attrs["xpad"]  # still holds the forward padding of x
    slab = node.attrs["slab"]
    w_mat = _weight_matrix(w) if x_node.needs_grad else None
    dw_mat = np.zeros((cout, 27 * cin)) if w_node.needs_grad else None
    gpad = np.zeros_like(xpad) if x_node.needs_grad else None

    for x0 in range(0, nx, slab):
        x1 = min(x0 + slab, nx)
        nt = (x1 - x0) * ny * nz
        cols = _conv_scratch(node.attrs["scratch"], "cols", 27 * cin, nt)
        _fill_cols(cols, xpad, x0, x1, ny, nz, cin)
        g_tile = np.ascontiguousarray(g[:, x0:x1].reshape(cout, nt))
        if dw_mat is not None:
            dw_mat += g_tile @ cols.T
        if gpad is not None:
            gcols = _conv_scratch(node.attrs["scratch"], "g2", 27 * cin, nt)
            np.matmul(w_mat.T, g_tile, out=gcols)
            for k, (dx, dy, dz) in enumerate(_OFFSETS):
                gpad[:, dx + x0:dx + x1, dy:dy + ny, dz:dz + nz] += (
                    gcols[k * cin:(k + 1) * cin].reshape(cin, x1 - x0, ny, nz))

    if dw_mat is not None:
        w_node.grad += dw_mat.reshape(cout, 3, 3, 3, cin).transpose(0, 4, 1, 2, 3)
    if gpad is not None:
        x_node.grad += gpad[:, 1:-1, 1:-1, 1:-1]


def _bwd_bias_add(node):
    x, b = node.inputs
    if x.needs_grad:
        _accum(x, node.grad)
    if b.needs_grad:
        _accum(b, node.grad.sum(axis=(1, 2, 3)))


def _bwd_leaky_relu(node):
    x = node.inputs[0]
    if x.needs_grad:
        _accum(x, node.grad * np.where(x.value > 0, 1.0, node.attrs["slope"]))


def _bwd_maxpool2(node):
    x = node.inputs[0]
    if not x.needs_grad:
        return
    c, nx, ny, nz = x.shape
    idx = node.attrs["argmax"]
    scatter = np.zeros((c, nx // 2, ny // 2, nz // 2, 8))
    np.put_along_axis(scatter, idx[..., None], node.grad[..., None], axis=-1)
    scatter = scatter.reshape(c, nx // 2, ny // 2, nz // 2, 2, 2, 2)
    x.grad += scatter.transpose(0, 1, 4, 2, 5, 3, 6).reshape(x.shape)


def _bwd_upsample2(node):
    x = node.inputs[0]
    if not x.needs_grad:
        return
    g = node.grad
    for axis, mat in reversed(list(enumerate(node.attrs["mats"]))):
        g = _axis_matmul(g, mat.T, axis + 1)
    x.grad += g


def _bwd_concat(node):
    a, b = node.inputs
    if a.needs_grad:
        _accum(a, node.grad[: a.shape[0]])
    if b.needs_grad:
        _accum(b, node.grad[a.shape[0]:])


def _bwd_grid_sample(node):
    vol_node, disp_node = node.inputs
    vol = vol_node.value
    cache = node.attrs["cache"]
    i0, f, unclamped = cache["i0"], cache["f"], cache["unclamped"]
    ix, iy, iz = i0
    fx, fy, fz = f
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    g = node.grad.reshape(-1)

    c000, c100, c010, c110, c001, c101, c011, c111 = _corner_values(vol, ix, iy, iz)

    if disp_node.needs_grad:
        # Analytic trilinear corner-weight derivatives; clamped samples are
        # locally constant in the clamped axis (one-sided subgradient).
        ddx = gz * (gy * (c100 - c000) + fy * (c110 - c010)) + fz * (
            gy * (c101 - c001) + fy * (c111 - c011))
        ddy = gz * (gx * (c010 - c000) + fx * (c110 - c100)) + fz * (
            gx * (c011 - c001) + fx * (c111 - c101))
        ddz = gy * (gx * (c001 - c000) + fx * (c101 - c100)) + fy * (
            gx * (c011 - c010) + fx * (c111 - c110))
        d = np.stack([ddx, ddy, ddz]) * unclamped
        disp_node.grad += (d * g).reshape(disp_node.shape)

    if vol_node.needs_grad:
        gv = vol_node.grad[0]
        weights = (
            (gz * gy * gx, (ix, iy, iz)), (gz * gy * fx, (ix + 1, iy, iz)),
            (gz * fy * gx, (ix, iy + 1, iz)), (gz * fy * fx, (ix + 1, iy + 1, iz)),
            (fz * gy * gx, (ix, iy, iz + 1)), (fz * gy * fx, (ix + 1, iy, iz + 1)),
            (fz * fy * gx, (ix, iy + 1, iz + 1)), (fz * fy * fx, (ix + 1, iy + 1, iz + 1)),
        )
        for w8, idx in weights:
            np.add.at(gv, idx, w8 * g)


def _bwd_fwd_diff(node):
    disp = node.inputs[0]
    if not disp.needs_grad:
        return
    g = node.grad
    for axis in range(3):
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis + 1] = slice(0, -1)
        hi[axis + 1] = slice(1, None)
        for c in range(3):
            gslice = g[(3 * c + axis, *lo[1:])]
            disp.grad[(c, *hi[1:])] += gslice
            disp.grad[(c, *lo[1:])] -= gslice


_FORWARD = {
    "input": _fwd_input,
    "const": _fwd_noop,
    "param": _fwd_noop,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "div": _fwd_div,
    "square": _fwd_square,
    "sqrt": _fwd_sqrt,
    "affine": _fwd_affine,
    "sum": _fwd_sum,
    "conv3d": _fwd_conv3d,
    "bias_add": _fwd_bias_add,
    "leaky_relu": _fwd_leaky_relu,
    "maxpool2": _fwd_maxpool2,
    "upsample2": _fwd_upsample2,
    "concat": _fwd_concat,
    "grid_sample": _fwd_grid_sample,
    "fwd_diff": _fwd_fwd_diff,
}

_BACKWARD = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "square": _bwd_square,
    "sqrt": _bwd_sqrt,
    "affine": _bwd_affine,
    "sum": _bwd_sum,
    "conv3d": _bwd_conv3d,
    "bias_add": _bwd_bias_add,
    "leaky_relu": _bwd_leaky_relu,
    "maxpool2": _bwd_maxpool2,
    "upsample2": _bwd_upsample2,
    "concat": _bwd_concat,
    "grid_sample": _bwd_grid_sample,
    "fwd_diff": _bwd_fwd_diff,
}

SUPPORTED_OPS = sorted(set(_FORWARD) - {"input", "const", "param"})
