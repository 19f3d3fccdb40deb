"""Minimal-multiplication convolution: transform bases, tiling math, kernels.

A basis with output tile ``m`` and filter taps ``r`` computes ``m`` outputs
of a valid (cross-correlation) convolution using ``n = m + r - 1``
elementwise multiplications instead of ``m * r``; 2-D follows by nesting.
The input and output transforms are integer matrices, so on secret shares
they are local (communication-free) operations; only the elementwise
product between the transformed input and the transformed filter costs
secure multiplications.

Shipped bases cover output tiles 2 and 4 for 3-tap filters.  They are
stored as exact rationals and validated at import against the transform
identity on all basis-vector pairs; since both sides of the identity are
bilinear in (tile, filter), equality on basis pairs proves it for every
input.  7-tap transforms are rejected: their bases carry fractions that
lose too much precision in fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import FixedPointOverflowError, ShapeError, XConvError
from .ring import FixedPointConfig, RingTensor, encode_fixed, mask_words, truncate_signed

_U64 = np.uint64


class UnsupportedTransformError(XConvError):
    """Requested (output tile, filter tap) pair has no shipped basis."""


# -- exact bases -------------------------------------------------------------

_F = Fraction

# Output-transform rows (m x n), input-transform rows (n x n), filter
# transform (n x r).  b_t and a_t are integral by construction.
_TABLES = {
    (2, 3): {
        "a_t": [[1, 1, 1, 0],
                [0, 1, -1, -1]],
        "b_t": [[1, 0, -1, 0],
                [0, 1, 1, 0],
                [0, -1, 1, 0],
                [0, 1, 0, -1]],
        "g": [[_F(1), _F(0), _F(0)],
              [_F(1, 2), _F(1, 2), _F(1, 2)],
              [_F(1, 2), _F(-1, 2), _F(1, 2)],
              [_F(0), _F(0), _F(1)]],
    },
    (4, 3): {
        "a_t": [[1, 1, 1, 1, 1, 0],
                [0, 1, -1, 2, -2, 0],
                [0, 1, 1, 4, 4, 0],
                [0, 1, -1, 8, -8, 1]],
        "b_t": [[4, 0, -5, 0, 1, 0],
                [0, -4, -4, 1, 1, 0],
                [0, 4, -4, -1, 1, 0],
                [0, -2, -1, 2, 1, 0],
                [0, 2, -1, -2, 1, 0],
                [0, 4, 0, -5, 0, 1]],
        "g": [[_F(1, 4), _F(0), _F(0)],
              [_F(-1, 6), _F(-1, 6), _F(-1, 6)],
              [_F(-1, 6), _F(1, 6), _F(-1, 6)],
              [_F(1, 24), _F(1, 12), _F(1, 6)],
              [_F(1, 24), _F(-1, 12), _F(1, 6)],
              [_F(0), _F(0), _F(1)]],
    },
}


@dataclass(frozen=True)
class WinogradBasis:
    """Exact transform tables for one (m, r) pair, n = m + r - 1."""

    m: int
    r: int
    a_t: tuple  # m x n, exact integers
    b_t: tuple  # n x n, exact integers
    g: tuple    # n x r, exact Fractions

    @property
    def n(self) -> int:
        return self.m + self.r - 1

    def a_t_int(self) -> np.ndarray:
        return np.array(self.a_t, dtype=np.int64)

    def b_t_int(self) -> np.ndarray:
        return np.array(self.b_t, dtype=np.int64)

    def g_float(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.g], dtype=np.float64)

    def input_growth(self) -> int:
        """Worst-case magnitude growth of the 2-D input transform.

        Square of the largest absolute row sum of the input-transform
        matrix: an upper bound on |transformed| / |input| for the nested
        application.
        """
        row = max(sum(abs(v) for v in r) for r in self.b_t)
        return row * row


def _conv_valid_1d(x, w):
    """Exact valid cross-correlation; the oracle side of the identity."""
    m = len(x) - len(w) + 1
    return [sum(x[i + j] * w[j] for j in range(len(w))) for i in range(m)]


def _check_identity(basis: WinogradBasis) -> None:
    n, r, m = basis.n, basis.r, basis.m
    for i in range(n):
        x = [_F(int(i == k)) for k in range(n)]
        btx = [sum(_F(basis.b_t[a][b]) * x[b] for b in range(n)) for a in range(n)]
        for j in range(r):
            w = [_F(int(j == k)) for k in range(r)]
            gw = [sum(basis.g[a][b] * w[b] for b in range(r)) for a in range(n)]
            prod = [btx[a] * gw[a] for a in range(n)]
            got = [sum(_F(basis.a_t[o][a]) * prod[a] for a in range(n)) for o in range(m)]
            if got != _conv_valid_1d(x, w):
                raise AssertionError(f"transform identity broken for basis {(m, r)}")


@lru_cache(maxsize=None)
def winograd_basis(m: int, r: int) -> WinogradBasis:
    """Return the validated exact basis for (m, r)."""
    if r == 7:
        raise UnsupportedTransformError(
            "7-tap transforms are rejected: fractional tables lose numerical precision"
        )
    try:
        t = _TABLES[(m, r)]
    except KeyError:
        raise UnsupportedTransformError(f"no shipped basis for (m={m}, r={r})") from None
    basis = WinogradBasis(
        m=m,
        r=r,
        a_t=tuple(tuple(row) for row in t["a_t"]),
        b_t=tuple(tuple(row) for row in t["b_t"]),
        g=tuple(tuple(row) for row in t["g"]),
    )
    _check_identity(basis)
    return basis


def basis_for_tile(n: int, k: int) -> WinogradBasis:
    """Basis producing n-point tiles for a k-tap filter (m = n - k + 1)."""
    return winograd_basis(n - k + 1, k)


# -- tiling arithmetic --------------------------------------------------------


@dataclass(frozen=True)
class TilingPlan:
    """Tile geometry and multiplication counts for one square convolution."""

    m_out: int      # output extent per axis
    k: int          # filter extent
    n: int          # input tile extent
    step: int       # n - k + 1 output points per tile per axis
    tiles: int      # tiles per axis covering the output
    last_tile: int  # input extent actually needed by the last tile
    pad: int        # zero columns/rows appended right/bottom
    dense: int      # m_out^2 * k^2
    beta1: int      # single-shot transform multiplications (m_out + k - 1)^2
    beta2: int      # tiled transform multiplications tiles^2 * n^2
    gamma: float    # beta2 / multiplications without padding the last tile

    def gamma_first_order(self) -> float:
        """First-order padding-overhead bound 1 + 2(1 - k/n)/tiles."""
        return 1.0 + 2.0 * (1.0 - self.k / self.n) / self.tiles


def mult_counts(m_out: int, k: int, n: int) -> TilingPlan:
    """Multiplication counts for an m_out x m_out output, k x k filter, n x n tiles."""
    if m_out < 1:
        raise ValueError("output extent must be >= 1")
    if k < 2:
        raise ValueError("filter extent must be >= 2")
    if n <= k:
        raise ValueError("tile extent must exceed the filter extent")
    step = n - k + 1
    tiles = -(-m_out // step)  # ceil
    last_tile = m_out - (tiles - 1) * step + k - 1
    covered = (tiles - 1) * step + n
    pad = covered - (m_out + k - 1)
    dense = m_out * m_out * k * k
    beta1 = (m_out + k - 1) ** 2
    beta2 = tiles * tiles * n * n
    unpadded = ((tiles - 1) * n + last_tile) ** 2
    return TilingPlan(
        m_out=m_out, k=k, n=n, step=step, tiles=tiles, last_tile=last_tile,
        pad=pad, dense=dense, beta1=beta1, beta2=beta2,
        gamma=beta2 / unpadded,
    )


def choose_tile(m_out: int, k: int, candidates=(4, 6)) -> int:
    """Candidate tile with the fewest tiled multiplications; ties go small.

    Smaller tiles grow the dynamic range of the input transform less, so
    they win ties.
    """
    cands = sorted(c for c in candidates if c > k)
    if not cands:
        raise ValueError(f"no tile candidate exceeds filter extent {k}")
    return min(cands, key=lambda n: (mult_counts(m_out, k, n).beta2, n))


# -- kernels ------------------------------------------------------------------


def transform_filter_real(w: np.ndarray, basis: WinogradBasis) -> np.ndarray:
    """g @ W @ g^T per channel pair, real arithmetic (the weight owner's side)."""
    g = basis.g_float()
    return np.einsum("ij,ocjk,lk->ocil", g, w.astype(np.float64), g)


def _signed_to_residues(mat: np.ndarray) -> np.ndarray:
    return np.array([[v % (1 << 64) for v in row] for row in mat.tolist()], dtype=_U64)


def _extract_tiles(padded: np.ndarray, n: int, step: int, tiles: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, T, T, n, n) overlapping tiles with stride `step`."""
    win = np.lib.stride_tricks.sliding_window_view(padded, (n, n), axis=(2, 3))
    return np.ascontiguousarray(win[:, :, ::step, ::step][:, :, :tiles, :tiles])


def _tile_geometry(h_in: int, k: int, padding: int, n: int):
    m_out = h_in + 2 * padding - k + 1
    if m_out < 1:
        raise ShapeError("convolution output would be empty")
    plan = mult_counts(m_out, k, n)
    extra = plan.pad
    return m_out, plan, extra


def winograd_conv2d_float(x: np.ndarray, w: np.ndarray, n: int,
                          padding: int = 0, groups: int = 1) -> np.ndarray:
    """Tiled transform convolution in float64; stride 1, square filters."""
    basis = basis_for_tile(n, w.shape[-1])
    _check_kernel_preconditions(x, w, groups)
    nb, c_in, h, wdt = x.shape
    c_out = w.shape[0]
    k = w.shape[-1]
    m_out, plan, extra = _tile_geometry(h, k, padding, n)
    padded = np.pad(x.astype(np.float64),
                    ((0, 0), (0, 0), (padding, padding + extra), (padding, padding + extra)))
    tiles = _extract_tiles(padded, n, plan.step, plan.tiles)
    bt = basis.b_t_int().astype(np.float64)
    at = basis.a_t_int().astype(np.float64)
    u = transform_filter_real(w, basis)
    v = np.einsum("ij,nctujk,lk->nctuil", bt, tiles, bt)
    out = np.empty((nb, c_out, plan.tiles, plan.tiles, basis.m, basis.m))
    cpg_in = c_in // groups
    cpg_out = c_out // groups
    for g in range(groups):
        vi = v[:, g * cpg_in:(g + 1) * cpg_in]
        ui = u[g * cpg_out:(g + 1) * cpg_out]
        mprod = np.einsum("nctuij,ocij->notuij", vi, ui)
        out[:, g * cpg_out:(g + 1) * cpg_out] = np.einsum("ij,notujk,lk->notuil", at, mprod, at)
    return _assemble(out, m_out, basis.m)


def winograd_conv2d_fixed_ring(x: RingTensor, u_ring: RingTensor, basis: WinogradBasis,
                               padding: int, groups: int) -> RingTensor:
    """Fixed-point tiled kernel on already-transformed, already-encoded filters.

    Input transform and output transform are exact integer maps applied in
    the ring; the elementwise product doubles the scale.  The caller is
    responsible for the trailing truncation, mirroring how the secure
    engine separates the interactive step from the local ones.
    """
    nb, c_in, h, wdt = x.shape
    c_out = u_ring.shape[0]
    k = basis.r
    n = basis.n
    m_out, plan, extra = _tile_geometry(h, k, padding, n)
    padded = np.pad(x.words, ((0, 0), (0, 0), (padding, padding + extra),
                              (padding, padding + extra)))
    tiles = _extract_tiles(padded, n, plan.step, plan.tiles)
    btu = _signed_to_residues(basis.b_t_int())
    atu = _signed_to_residues(basis.a_t_int())
    v = np.einsum("ij,nctujk,lk->nctuil", btu, tiles, btu, dtype=_U64)
    out = np.empty((nb, c_out, plan.tiles, plan.tiles, basis.m, basis.m), dtype=_U64)
    cpg_in = c_in // groups
    cpg_out = c_out // groups
    for g in range(groups):
        vi = v[:, g * cpg_in:(g + 1) * cpg_in]
        ui = u_ring.words[g * cpg_out:(g + 1) * cpg_out]
        mprod = np.einsum("nctuij,ocij->notuij", vi, ui, dtype=_U64)
        out[:, g * cpg_out:(g + 1) * cpg_out] = np.einsum(
            "ij,notujk,lk->notuil", atu, mprod, atu, dtype=_U64)
    return RingTensor(mask_words(_assemble(out, m_out, basis.m), x.bitwidth), x.bitwidth)


def _assemble(tiles_out: np.ndarray, m_out: int, m: int) -> np.ndarray:
    nb, c, t, _, _, _ = tiles_out.shape
    full = tiles_out.transpose(0, 1, 2, 4, 3, 5).reshape(nb, c, t * m, t * m)
    return full[:, :, :m_out, :m_out]


def _check_kernel_preconditions(x: np.ndarray, w: np.ndarray, groups: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("expected NCHW input and OIKK filter")
    if w.shape[-1] != w.shape[-2]:
        raise ShapeError("transform kernels need square filters")
    if w.shape[-1] <= 1:
        raise ShapeError("transform kernels need filter extent > 1")
    if x.shape[2] != x.shape[3]:
        raise ShapeError("transform kernels expect square feature maps")
    if x.shape[1] != w.shape[1] * groups:
        raise ShapeError("channel mismatch between input and filter")


def winograd_guard(basis: WinogradBasis, u_real: np.ndarray, groups: int,
                   x_bound: float, cfg: FixedPointConfig) -> None:
    """Reject fixed-point execution when the transform eats the headroom.

    Worst case for the summed elementwise product: input-transform growth
    times the per-output-position sum of |transformed filter| magnitudes,
    all at double scale.  Requires the result to stay strictly inside the
    signed range.
    """
    c_out = u_real.shape[0]
    cpg_out = c_out // groups
    sum_u = np.abs(u_real).sum(axis=1)  # per (out channel, tile pos)
    worst = float(sum_u.max()) * basis.input_growth() * max(x_bound, 1e-300)
    need_bits = 2 * cfg.scale + math.log2(worst) if worst > 0 else 0
    if need_bits >= cfg.bitwidth - 1:
        raise FixedPointOverflowError(
            f"transform headroom insufficient: needs {need_bits:.1f} bits, "
            f"ring holds {cfg.bitwidth - 1} (growth {basis.input_growth()}, "
            f"scale {cfg.scale})"
        )


# -- graph rewrite pass ---------------------------------------------------------


@dataclass
class RewriteDecision:
    """Per-convolution outcome of the compiler pass, reportable as a row."""

    layer: str
    eligible: bool
    reason: str = ""
    n: int = 0
    tiles: int = 0
    beta1: int = 0
    beta2: int = 0
    dense: int = 0
    gamma: float = 0.0

    def as_row(self) -> dict:
        return {"layer": self.layer, "eligible": self.eligible, "reason": self.reason,
                "n": self.n, "T": self.tiles, "beta1": self.beta1,
                "beta2": self.beta2, "dense": self.dense, "gamma": self.gamma}


def _eligibility(attrs: dict, out_hw: tuple, candidates) -> str:
    """Empty string when rewritable, else the skip reason."""
    k = attrs["kernel"]
    if k == 1:
        return "pointwise"
    if k == 7:
        return "filter extent 7 loses precision"
    if attrs.get("stride", 1) != 1:
        return "stride"
    g = attrs.get("groups", 1)
    if g != 1 and not (g == attrs["in_channels"] == attrs["out_channels"]):
        return "grouped (not depthwise)"
    if out_hw[0] != out_hw[1]:
        return "non-square output"
    try:
        basis_for_tile(min(c for c in candidates if c > k), k)
    except (UnsupportedTransformError, ValueError):
        return f"no basis for {k}-tap filters"
    return ""


def rewrite_winograd(graph, candidates=(4, 6), allow=None):
    """Tag every eligible convolution for transform execution.

    Returns the rewritten graph plus one decision per convolution layer;
    ineligible layers are skipped with a reason, never failed.  Outputs of
    the rewritten graph stay float-equivalent to the original up to the
    transform's rounding.
    """
    from .graph import Graph, LayerSpec, infer_shapes

    shapes = infer_shapes(graph)
    decisions = []
    new_layers = []
    for layer in graph.layers:
        attrs = dict(layer.attrs)
        if layer.kind == "conv2d":
            out = shapes[layer.name]
            reason = _eligibility(attrs, (out[2], out[3]), candidates)
            if allow is not None and layer.name not in allow and not reason:
                reason = "not in allow-list"
            if reason:
                decisions.append(RewriteDecision(layer=layer.name, eligible=False,
                                                 reason=reason))
            else:
                k = attrs["kernel"]
                n = choose_tile(out[2], k, candidates)
                counts = mult_counts(out[2], k, n)
                attrs["winograd"] = True
                attrs["tile"] = n
                decisions.append(RewriteDecision(
                    layer=layer.name, eligible=True, n=n, tiles=counts.tiles,
                    beta1=counts.beta1, beta2=counts.beta2, dense=counts.dense,
                    gamma=counts.gamma))
        new_layers.append(LayerSpec(layer.name, layer.kind, list(layer.inputs), attrs))
    rewritten = Graph(new_layers, graph.input_shape, graph.cfg,
                      graph.weights, dict(graph.metadata, winograd=True))
    return rewritten, decisions


def winograd_conv2d(image: np.ndarray, filt: np.ndarray, n: int, *,
                    padding: int = 0, groups: int = 1, mode: str = "float",
                    cfg: FixedPointConfig | None = None):
    """One-call transform convolution for floats or fixed point.

    Float mode matches direct convolution to rounding error.  Fixed mode
    transforms and encodes the filter at the working scale, runs the exact
    ring kernel, and applies one signed truncation; the result is the
    fixed-point reference for secure execution of the same layer.
    """
    if mode == "float":
        return winograd_conv2d_float(image, filt, n, padding=padding, groups=groups)
    if mode != "fixed":
        raise ValueError(f"unknown mode {mode!r}")
    if cfg is None:
        cfg = FixedPointConfig()
    basis = basis_for_tile(n, filt.shape[-1])
    _check_kernel_preconditions(image, filt, groups)
    u_real = transform_filter_real(filt, basis)
    winograd_guard(basis, u_real, groups, float(np.abs(image).max(initial=0.0)), cfg)
    u_ring = encode_fixed(u_real, cfg)
    x_ring = encode_fixed(image, cfg)
    pre = winograd_conv2d_fixed_ring(x_ring, u_ring, basis, padding, groups)
    return truncate_signed(pre, cfg.scale)
