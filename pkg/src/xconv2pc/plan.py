"""Fixed-point execution plans.

A plan compiles a graph into the exact sequence of ring operations that
both the clear fixed-point interpreter and the two-party engine execute:
normalization folded, weights encoded (transform-domain for tagged
convolutions), scaling constants pinned, and per-layer resource counts
fixed.  Running the same plan on plain residues and on additive shares
yields bit-identical results by construction, which is the equivalence
the whole artifact is built around.

Resource counts (multiplications, truncated elements, comparisons,
auxiliary triples, boolean triple words) depend only on shapes and
attributes, never on weight values, so the weight-less party derives the
same schedule from the public architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FixedPointOverflowError, ShapeError
from .graph import Graph, INPUT, fold_batchnorm, infer_shapes
from .ring import (
    FixedPointConfig,
    RingTensor,
    encode_fixed,
    mask_words,
    ring_add,
    ring_scale_const,
    truncate_signed,
)
from .winograd import (
    basis_for_tile,
    mult_counts,
    transform_filter_real,
    winograd_conv2d_fixed_ring,
    winograd_guard,
)

_U64 = np.uint64


def lt_bool_triple_words(n_elems: int, n_bits: int) -> int:
    """Packed boolean-triple words one bitwise less-than over n_bits consumes.

    One suffix-equality scan round per doubling offset, each touching the
    bit planes it still changes, plus one final round combining the
    difference terms.  The dealer and the online engine both size from
    this function, so consumption always lands exactly.
    """
    if n_elems == 0:
        return 0
    words_per_plane = -(-n_elems // 64)
    planes = 0
    d = 1
    while d < n_bits:
        planes += n_bits - d
        d *= 2
    planes += n_bits
    return planes * words_per_plane


@dataclass
class PlanLayer:
    """One executable step plus its preprocessed-material footprint."""

    name: str
    kind: str
    inputs: list
    attrs: dict
    out_shape: tuple
    mults: int = 0
    trunc_elems: int = 0
    cmp_elems: int = 0
    aux_triples: int = 0
    bool_words: int = 0
    payload: dict = field(default_factory=dict)  # ring weights, party-0 side only


@dataclass
class PlanRequirements:
    """Dealer material totals for one plan."""

    mul_triples: int
    aux_triples: int
    trunc_units: int
    cmp_tuples: int
    bool_words: int


class FixedPlan:
    def __init__(self, cfg, input_shape, layers, output_name, graph_hash,
                 with_weights, input_bound):
        self.cfg = cfg
        self.input_shape = input_shape
        self.layers = layers
        self.output_name = output_name
        self.graph_hash = graph_hash
        self.with_weights = with_weights
        self.input_bound = input_bound

    @property
    def output_shape(self) -> tuple:
        return next(l.out_shape for l in self.layers if l.name == self.output_name)

    def requirements(self) -> PlanRequirements:
        return PlanRequirements(
            mul_triples=sum(l.mults for l in self.layers),
            aux_triples=sum(l.aux_triples for l in self.layers),
            trunc_units=sum(l.trunc_elems for l in self.layers),
            cmp_tuples=sum(l.cmp_elems for l in self.layers),
            bool_words=sum(l.bool_words for l in self.layers),
        )


def _abs_rowsum(w: np.ndarray) -> float:
    return float(np.abs(w).sum(axis=tuple(range(1, w.ndim))).max())


def _tolerated_ceiling(folded: Graph, cfg: FixedPointConfig) -> float:
    """Largest activation promise every accumulator in the graph can absorb."""
    budget = float(1 << (cfg.bitwidth - 1 - 2 * cfg.scale))
    ceiling = float("inf")
    for spec in folded.layers:
        w = folded.weights.get(f"{spec.name}.weight")
        if w is None or spec.kind not in ("conv2d", "fully-connected"):
            continue
        bias = folded.weights.get(f"{spec.name}.bias")
        bias_max = float(np.abs(bias).max()) if bias is not None else 0.0
        rowsum = _abs_rowsum(w)
        if rowsum > 0:
            ceiling = min(ceiling, 0.98 * (budget - bias_max) / rowsum)
    if ceiling < 1.0:
        raise FixedPointOverflowError(
            "weights leave no usable activation range at this scale; "
            "shrink the scale or the weights")
    return ceiling


def _check_headroom(pre_bound: float, cfg: FixedPointConfig, where: str) -> None:
    if pre_bound <= 0:
        return
    need = 2 * cfg.scale + math.log2(pre_bound)
    if need >= cfg.bitwidth - 1:
        raise FixedPointOverflowError(
            f"{where}: accumulator needs {need:.1f} bits, ring holds "
            f"{cfg.bitwidth - 1}; shrink the scale or the data range")


WINOGRAD_INPUT_BOUND = 8.0


def build_plan(graph: Graph, activation_ceiling: float = 128.0,
               with_weights: bool = True) -> FixedPlan:
    """Compile a graph into a fixed-point plan.

    The overflow guard is inductive: assuming every decoded activation
    stays within ``activation_ceiling``, each multiplication-bearing layer
    is checked to fit its double-scale accumulator; the clear executor
    then re-verifies the ceiling on actual data after every layer, which
    certifies the bit-identical secure run as well.  (A closed-form
    worst-case interval would compound row sums exponentially and reject
    every deep network at any useful scale.)

    Wide layers can carry worst-case row sums no fixed promise satisfies,
    so the plan first lowers the requested ceiling to the largest value
    every accumulator tolerates (never below 1.0).  Random-seeded
    activations sit orders of magnitude below either figure; the runtime
    check is what makes the lowered promise trustworthy.

    Transform-tagged convolutions are guarded conservatively against the
    input transform's magnitude growth, under the tighter
    ``WINOGRAD_INPUT_BOUND`` promise that the executor enforces on the
    actual inputs of those layers.  Exactness does not strictly require
    the conservative form (the integer transforms are correct through
    wraparound; only the final accumulator must fit), but it keeps a
    stated safety margin on the interactive path.
    """
    g = fold_batchnorm(graph)
    shapes = infer_shapes(g)
    cfg = g.cfg
    s = cfg.scale
    nbits = cfg.bitwidth
    ceiling = float(activation_ceiling)
    if with_weights:
        ceiling = min(ceiling, _tolerated_ceiling(g, cfg))
    layers = []

    for spec in g.layers:
        out_shape = shapes[spec.name]
        out_elems = int(np.prod(out_shape))
        pl = PlanLayer(name=spec.name, kind=spec.kind, inputs=list(spec.inputs),
                       attrs=dict(spec.attrs), out_shape=out_shape)

        if spec.kind == "conv2d":
            k = spec.attrs["kernel"]
            groups = spec.attrs.get("groups", 1)
            c_in = spec.attrs["in_channels"]
            c_out = spec.attrs["out_channels"]
            n_pos = out_shape[0] * out_shape[2] * out_shape[3]
            w_real = g.weights.get(f"{spec.name}.weight") if with_weights else None
            bias_real = g.weights.get(f"{spec.name}.bias") if with_weights else None
            bias_max = float(np.abs(bias_real).max()) if bias_real is not None else 0.0
            if spec.attrs.get("winograd"):
                tile = spec.attrs["tile"]
                basis = basis_for_tile(tile, k)
                m_out = out_shape[2]
                counts = mult_counts(m_out, k, tile)
                pl.mults = counts.beta2 * c_out * (c_in // groups) * out_shape[0]
                pl.payload["basis"] = basis
                if w_real is not None:
                    u_real = transform_filter_real(w_real, basis)
                    winograd_guard(basis, u_real, groups,
                                   min(ceiling, WINOGRAD_INPUT_BOUND), cfg)
                    pl.payload["u_ring"] = encode_fixed(u_real, cfg)
            else:
                pl.mults = n_pos * c_out * k * k * (c_in // groups)
                if w_real is not None:
                    pl.payload["w_ring"] = encode_fixed(w_real, cfg)
            if w_real is not None:
                _check_headroom(ceiling * _abs_rowsum(w_real) + bias_max, cfg,
                                spec.name)
                if bias_real is not None:
                    pl.payload["bias_ring"] = _encode_double_scale(bias_real, cfg)
            pl.trunc_elems = out_elems

        elif spec.kind == "fully-connected":
            w_real = g.weights.get(f"{spec.name}.weight") if with_weights else None
            bias_real = g.weights.get(f"{spec.name}.bias") if with_weights else None
            pl.mults = out_shape[0] * spec.attrs["in_features"] * spec.attrs["out_features"]
            pl.trunc_elems = out_elems
            if w_real is not None:
                pl.payload["w_ring"] = encode_fixed(w_real, cfg)
                bias_max = (float(np.abs(bias_real).max())
                            if bias_real is not None else 0.0)
                _check_headroom(ceiling * _abs_rowsum(w_real) + bias_max, cfg,
                                spec.name)
                if bias_real is not None:
                    pl.payload["bias_ring"] = _encode_double_scale(bias_real, cfg)

        elif spec.kind in ("avgpool", "global-avgpool"):
            if spec.kind == "avgpool":
                area = spec.attrs["window"] ** 2
            else:
                in_shape = shapes[spec.inputs[0]]
                area = in_shape[2] * in_shape[3]
            pl.payload["area"] = area
            pl.payload["inv_area_ring"] = int(
                encode_fixed(np.array([1.0 / area]), cfg).words[0])
            pl.trunc_elems = out_elems
            _check_headroom(ceiling * 1.01, cfg, spec.name)

        elif spec.kind == "relu":
            pl.cmp_elems = out_elems
            pl.bool_words = lt_bool_triple_words(out_elems, nbits - 1)

        elif spec.kind == "maxpool":
            win = spec.attrs["window"]
            # The pairwise-max tree folds window positions one batch at a
            # time, so boolean words are sized per step to keep the packed
            # word rounding identical to the online consumption.
            pl.cmp_elems = out_elems * (win * win - 1)
            pl.bool_words = (win * win - 1) * lt_bool_triple_words(out_elems,
                                                                   nbits - 1)

        elif spec.kind in ("shuffle", "add", "concat"):
            pass

        else:
            raise ShapeError(f"cannot plan layer kind {spec.kind!r}")

        if pl.cmp_elems:
            pl.aux_triples += 2 * pl.cmp_elems
        if pl.trunc_elems:
            pl.aux_triples += 2 * pl.trunc_elems
            pl.bool_words += lt_bool_triple_words(pl.trunc_elems, s)
            pl.bool_words += lt_bool_triple_words(pl.trunc_elems, nbits)
        layers.append(pl)

    return FixedPlan(cfg=cfg, input_shape=g.input_shape, layers=layers,
                     output_name=g.output_name, graph_hash=graph.structural_hash(),
                     with_weights=with_weights, input_bound=ceiling)


def _encode_double_scale(values: np.ndarray, cfg: FixedPointConfig) -> RingTensor:
    """Encode at scale 2s for addition into pre-truncation accumulators."""
    wide = FixedPointConfig(bitwidth=cfg.bitwidth, scale=2 * cfg.scale) \
        if 2 * cfg.scale < cfg.bitwidth else None
    if wide is None:
        raise FixedPointOverflowError("scale too large to hold double-scale biases")
    t = encode_fixed(values, wide)
    return RingTensor(t.words, cfg.bitwidth)


# -- clear fixed-point execution ------------------------------------------------


def conv_patches(words: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) words -> (N, C, OH, OW, k, k) sliding patches."""
    padded = np.pad(words, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def ring_conv2d_direct(x: RingTensor, w_ring: RingTensor, stride: int, padding: int,
                       groups: int) -> RingTensor:
    """Grouped cross-correlation in the ring; result at double scale, untruncated."""
    k = w_ring.shape[-1]
    perg_in = x.shape[1] // groups
    perg_out = w_ring.shape[0] // groups
    patches = conv_patches(x.words, k, stride, padding)
    outs = []
    for g in range(groups):
        pg = patches[:, g * perg_in:(g + 1) * perg_in]
        wg = w_ring.words[g * perg_out:(g + 1) * perg_out]
        outs.append(np.einsum("nchwkl,ockl->nohw", pg, wg, dtype=_U64))
    return RingTensor(mask_words(np.concatenate(outs, axis=1), x.bitwidth), x.bitwidth)


def ring_fc(x: RingTensor, w_ring: RingTensor) -> RingTensor:
    flat = x.words.reshape(x.shape[0], -1)
    out = np.einsum("ni,oi->no", flat, w_ring.words, dtype=_U64)
    return RingTensor(mask_words(out, x.bitwidth), x.bitwidth)


def ring_maxpool(x: RingTensor, window: int, stride: int) -> RingTensor:
    win = np.lib.stride_tricks.sliding_window_view(
        x.signed(), (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return RingTensor.from_signed(win.max(axis=(-2, -1)), x.bitwidth)


def ring_relu(x: RingTensor) -> RingTensor:
    return RingTensor.from_signed(np.maximum(x.signed(), 0), x.bitwidth)


def ring_window_sum(x: RingTensor, window: int, stride: int) -> RingTensor:
    win = np.lib.stride_tricks.sliding_window_view(
        x.words, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return RingTensor(mask_words(win.sum(axis=(-2, -1), dtype=_U64), x.bitwidth),
                      x.bitwidth)


def _add_bias(pre: RingTensor, bias_ring: RingTensor, fc: bool) -> RingTensor:
    b = bias_ring.words.reshape((1, -1) if fc else (1, -1, 1, 1))
    return RingTensor(mask_words(pre.words + b, pre.bitwidth), pre.bitwidth)


def _ceiling_check(t: RingTensor, ceiling: float, scale: int, where: str) -> None:
    limit = int(ceiling * (1 << scale))
    if t.size and int(np.abs(t.signed()).max()) > limit:
        raise FixedPointOverflowError(
            f"{where}: activation exceeds the promised ceiling {ceiling}; "
            f"the accumulator guard no longer covers downstream layers")


def execute_plan_clear(plan: FixedPlan, x: RingTensor,
                       check_ceiling: bool = True) -> RingTensor:
    """Reference fixed-point inference; the bit pattern secure runs must hit.

    Re-validates the activation ceiling on actual data after every layer,
    completing the induction the plan-time accumulator guard started.
    """
    if not plan.with_weights:
        raise ValueError("clear execution needs a plan built with weights")
    if x.shape != plan.input_shape:
        raise ShapeError(f"input shape {x.shape} != plan {plan.input_shape}")
    cfg = plan.cfg
    if check_ceiling:
        _ceiling_check(x, plan.input_bound, cfg.scale, "input")
    env = {INPUT: x}
    for pl in plan.layers:
        src = [env[s] for s in pl.inputs]
        if pl.kind == "conv2d":
            if pl.attrs.get("winograd"):
                if check_ceiling:
                    _ceiling_check(src[0], WINOGRAD_INPUT_BOUND, cfg.scale,
                                   f"{pl.name} (transform input)")
                pre = winograd_conv2d_fixed_ring(
                    src[0], pl.payload["u_ring"], pl.payload["basis"],
                    pl.attrs.get("padding", 0), pl.attrs.get("groups", 1))
            else:
                pre = ring_conv2d_direct(src[0], pl.payload["w_ring"],
                                         pl.attrs.get("stride", 1),
                                         pl.attrs.get("padding", 0),
                                         pl.attrs.get("groups", 1))
            if "bias_ring" in pl.payload:
                pre = _add_bias(pre, pl.payload["bias_ring"], fc=False)
            env[pl.name] = truncate_signed(pre, cfg.scale)
        elif pl.kind == "fully-connected":
            pre = ring_fc(src[0], pl.payload["w_ring"])
            if "bias_ring" in pl.payload:
                pre = _add_bias(pre, pl.payload["bias_ring"], fc=True)
            env[pl.name] = truncate_signed(pre, cfg.scale)
        elif pl.kind == "avgpool":
            acc = ring_window_sum(src[0], pl.attrs["window"], pl.attrs["stride"])
            pre = ring_scale_const(acc, pl.payload["inv_area_ring"])
            env[pl.name] = truncate_signed(pre, cfg.scale)
        elif pl.kind == "global-avgpool":
            total = src[0].words.sum(axis=(2, 3), keepdims=True, dtype=_U64)
            acc = RingTensor(mask_words(total, src[0].bitwidth), src[0].bitwidth)
            pre = ring_scale_const(acc, pl.payload["inv_area_ring"])
            env[pl.name] = truncate_signed(pre, cfg.scale)
        elif pl.kind == "relu":
            env[pl.name] = ring_relu(src[0])
        elif pl.kind == "maxpool":
            env[pl.name] = ring_maxpool(src[0], pl.attrs["window"], pl.attrs["stride"])
        elif pl.kind == "shuffle":
            perm = np.asarray(pl.attrs["perm"], dtype=np.intp)
            env[pl.name] = RingTensor(src[0].words[:, perm], src[0].bitwidth)
        elif pl.kind == "add":
            acc = src[0]
            for t in src[1:]:
                acc = ring_add(acc, t)
            env[pl.name] = acc
        elif pl.kind == "concat":
            env[pl.name] = RingTensor(
                np.concatenate([t.words for t in src], axis=1), src[0].bitwidth)
        else:
            raise ShapeError(f"cannot execute layer kind {pl.kind!r}")
        if check_ceiling:
            _ceiling_check(env[pl.name], plan.input_bound, cfg.scale, pl.name)
    return env[plan.output_name]
