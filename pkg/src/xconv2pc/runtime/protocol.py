"""Two-party online protocol over additive shares.

Linear steps (adds, concatenation, permutations, public scaling, the
integer transforms of tagged convolutions) act on each party's share
locally and appear in the ledger as explicit zero-byte rows.  Secret
multiplications run over preprocessed triples: both parties open masked
differences (two ring elements, 16 bytes, per multiplication per party)
and finish locally, so a layer's multiplication traffic is exactly
16 bytes times its multiplication count.

Sign-dependent steps (activation, pooling, faithful truncation) open a
masked value and then evaluate "public-constant < dealer-mask" with a
bitwise less-than circuit over XOR-shared mask bits: a logarithmic
suffix-equality scan of AND rounds on packed 64-element words, one
boolean triple word per AND word.  The resulting bit converts to an
arithmetic share through one auxiliary triple.  Every consumption count
is a pure function of layer shapes, so both parties and the dealer agree
on cursor positions by construction.

Exactness notes, all modulo 2^l with x' = x + 2^(l-1):
  floor(unsigned(x') / 2^s) = (c >> s) - (r >> s) - [c mod 2^s < r mod 2^s]
                              + [c < r] * 2^(l-s)   where c = x' + r opened,
and the sign bit of x is  msb(c) XOR msb(r) XOR [low(c) < low(r)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError, TransportError, XConvError
from ..plan import FixedPlan, conv_patches
from ..ring import RingTensor, mask_words
from .material import MaterialStore
from .wire import (
    OP_ABORT,
    OP_OPEN_BOOL,
    OP_OPEN_MASKED,
    OP_SHARE_BLOB,
    CommLedger,
    Frame,
    SESSION_TAG,
    TranscriptRecorder,
    Transport,
)

_U64 = np.uint64
_FULL = _U64(0xFFFFFFFFFFFFFFFF)

BEAVER_CHUNK = 1 << 22  # elements per opened batch; caps peak memory


class ProtocolAbort(XConvError):
    """Peer sent an abort frame."""


@dataclass
class ShareTensor:
    """One party's additive share plus its fractional-scale tag."""

    party: int
    ring: RingTensor
    scale: int

    @property
    def shape(self):
        return self.ring.shape


def share(x: RingTensor, rng: np.random.Generator, scale: int = 0) -> tuple:
    """Split into two uniformly random shares that sum back to x."""
    s0 = rng.integers(0, 1 << x.bitwidth, size=x.shape, dtype=_U64, endpoint=False)
    s1 = mask_words(x.words - s0, x.bitwidth)
    return (ShareTensor(0, RingTensor(s0, x.bitwidth), scale),
            ShareTensor(1, RingTensor(s1, x.bitwidth), scale))


def reconstruct(s0: ShareTensor, s1: ShareTensor) -> RingTensor:
    if s0.shape != s1.shape or s0.ring.bitwidth != s1.ring.bitwidth:
        raise ShapeError("share halves disagree in shape or ring")
    if s0.scale != s1.scale:
        raise ShapeError("share halves carry different scale tags")
    return RingTensor(mask_words(s0.ring.words + s1.ring.words, s0.ring.bitwidth),
                      s0.ring.bitwidth)


def beaver_mul_batch(engine: "PartyEngine", x: ShareTensor, y: ShareTensor,
                     layer: str = "mul") -> ShareTensor:
    """Elementwise secret multiplication; scales add, traffic is 16 B/element."""
    if x.shape != y.shape:
        raise ShapeError(f"operand shapes differ: {x.shape} vs {y.shape}")
    words = engine.beaver(x.ring.words, y.ring.words, 0, layer)
    return ShareTensor(engine.party, RingTensor(words, x.ring.bitwidth),
                       x.scale + y.scale)


# -- bit packing -------------------------------------------------------------------


def pack_bitplanes(bits: np.ndarray) -> np.ndarray:
    """(..., N) of 0/1 -> (..., ceil(N/64)) packed words, element e at bit e&63."""
    n = bits.shape[-1]
    w = -(-n // 64)
    padded = np.zeros(bits.shape[:-1] + (w * 64,), dtype=np.uint8)
    padded[..., :n] = bits.astype(np.uint8)
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(_U64)


def unpack_bitplanes(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of pack_bitplanes; returns (..., n) uint8 bits."""
    raw = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")
    return bits[..., :n]


def value_bitplanes(values: np.ndarray, n_bits: int) -> np.ndarray:
    """(N,) words -> (n_bits, W) packed planes of their low bits."""
    cols = [(values >> _U64(i)) & _U64(1) for i in range(n_bits)]
    return pack_bitplanes(np.stack(cols, axis=0))


def scan_rounds(n_bits: int) -> list:
    out = []
    d = 1
    while d < n_bits:
        out.append(d)
        d *= 2
    return out


# -- the engine --------------------------------------------------------------------


class PartyEngine:
    """Executes a fixed plan over one transport with one material store."""

    def __init__(self, party: int, plan: FixedPlan, transport: Transport,
                 material: MaterialStore, ledger: CommLedger = None,
                 rng_seed: int = 0):
        self.party = party
        self.plan = plan
        self.transport = transport
        self.material = material
        self.ledger = ledger if ledger is not None else CommLedger()
        self.transcript = TranscriptRecorder()
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=rng_seed, spawn_key=(100 + party,)))
        self.bitwidth = plan.cfg.bitwidth
        self.mask = _U64((1 << self.bitwidth) - 1) if self.bitwidth < 64 else _FULL
        self._weight_shares = {}

    # -- framing ------------------------------------------------------------

    def _send(self, frame: Frame, layer: str, op: str) -> None:
        self.transport.send(frame)
        self.transcript.on_send(frame)
        self.ledger.record_send(layer, op, len(frame.payload))

    def _recv(self, expect_opcode: int, expect_tag: int, layer: str, op: str) -> Frame:
        frame = self.transport.recv()
        self.transcript.on_recv(frame)
        if frame.opcode == OP_ABORT:
            raise ProtocolAbort(frame.payload.decode("utf-8", "replace"))
        if frame.opcode != expect_opcode or frame.layer_tag != expect_tag:
            raise TransportError(
                f"protocol desync at {layer}/{op}: expected opcode "
                f"{expect_opcode} tag {expect_tag}, got {frame.opcode} "
                f"tag {frame.layer_tag}")
        self.ledger.record_recv(layer, op, len(frame.payload))
        return frame

    def exchange(self, opcode: int, tag: int, payload: bytes, layer: str,
                 op: str) -> bytes:
        """Symmetric opening: model owner writes first, client reads first."""
        frame = Frame(opcode, tag, payload)
        if self.party == 0:
            self._send(frame, layer, op)
            peer = self._recv(opcode, tag, layer, op)
        else:
            peer = self._recv(opcode, tag, layer, op)
            self._send(frame, layer, op)
        self.ledger.bump_round(layer, op)
        return peer.payload

    def send_oneway(self, opcode: int, tag: int, payload: bytes, layer: str,
                    op: str) -> None:
        self._send(Frame(opcode, tag, payload), layer, op)
        self.ledger.bump_round(layer, op)

    def recv_oneway(self, opcode: int, tag: int, layer: str, op: str) -> bytes:
        frame = self._recv(opcode, tag, layer, op)
        self.ledger.bump_round(layer, op)
        return frame.payload

    def abort(self, reason: str) -> None:
        try:
            self.transport.send(Frame(OP_ABORT, SESSION_TAG, reason.encode()))
        except TransportError:
            pass

    # -- arithmetic primitives -----------------------------------------------

    def _open_words(self, shares: np.ndarray, tag: int, layer: str,
                    op: str) -> np.ndarray:
        flat = np.ascontiguousarray(shares, dtype=_U64)
        peer = self.exchange(OP_OPEN_MASKED, tag, flat.astype("<u8").tobytes(),
                             layer, op)
        other = np.frombuffer(peer, dtype="<u8").astype(_U64).reshape(flat.shape)
        return (flat + other) & self.mask

    def beaver(self, x: np.ndarray, y: np.ndarray, tag: int, layer: str,
               take: str = "mul", op: str = "mul-open") -> np.ndarray:
        """Pairwise secret multiplication of equal-shape share arrays.

        Inputs may be broadcast views; chunks materialize one slice at a
        time, keeping peak memory independent of the multiplication count.
        """
        shape = x.shape
        n = int(np.prod(shape))
        out = np.empty(n, dtype=_U64)
        taker = self.material.take_mul if take == "mul" else self.material.take_aux
        pos = 0
        while pos < n:
            m = min(BEAVER_CHUNK, n - pos)
            xc = _flat_slice(x, pos, m)
            yc = _flat_slice(y, pos, m)
            a, b, c = taker(m)
            d_share = (xc - a) & self.mask
            e_share = (yc - b) & self.mask
            payload = np.concatenate([d_share, e_share]).astype("<u8").tobytes()
            peer = self.exchange(OP_OPEN_MASKED, tag, payload, layer, op)
            other = np.frombuffer(peer, dtype="<u8").astype(_U64)
            d = (d_share + other[:m]) & self.mask
            e = (e_share + other[m:]) & self.mask
            z = c + d * b + e * a
            if self.party == 0:
                z = z + d * e
            out[pos:pos + m] = z & self.mask
            pos += m
        return out.reshape(shape)

    # -- boolean circuit -------------------------------------------------------

    def _and_planes(self, x: np.ndarray, y: np.ndarray, tag: int,
                    layer: str) -> np.ndarray:
        """Bitwise AND of XOR-shared packed words via boolean triples."""
        shape = x.shape
        xf = x.reshape(-1)
        yf = y.reshape(-1)
        a, b, c = self.material.take_bool(xf.size)
        d_share = xf ^ a
        e_share = yf ^ b
        payload = np.concatenate([d_share, e_share]).astype("<u8").tobytes()
        peer = self.exchange(OP_OPEN_BOOL, tag, payload, layer, "bool-open")
        other = np.frombuffer(peer, dtype="<u8").astype(_U64)
        d = d_share ^ other[:xf.size]
        e = e_share ^ other[xf.size:]
        z = c ^ (d & b) ^ (e & a)
        if self.party == 0:
            z = z ^ (d & e)
        return z.reshape(shape)

    def less_than_mask(self, c_pub: np.ndarray, r_xor_share: np.ndarray,
                       n_bits: int, tag: int, layer: str) -> np.ndarray:
        """XOR-shared bits of [c < r] from public c and XOR-shared mask bits.

        Standard most-significant-difference form: the borrow fires at the
        highest position where the mask holds a 1 over a public 0 and all
        higher positions agree.  The fired terms are mutually exclusive, so
        the final OR collapses to a local XOR.
        """
        n = c_pub.size
        r_planes = value_bitplanes(r_xor_share, n_bits)
        c_planes = value_bitplanes(c_pub, n_bits)
        ones = np.full(r_planes.shape[-1], _FULL, dtype=_U64)

        # t_i = r_i AND NOT c_i (public mask, local).
        t = r_planes & ~c_planes
        # e_i = NOT (r_i XOR c_i); the owner of the constant flips it in.
        eq = r_planes ^ c_planes if self.party == 0 else r_planes.copy()
        if self.party == 0:
            eq ^= _FULL

        # Inclusive suffix-equality scan, then shift for the strict suffix.
        for d in scan_rounds(n_bits):
            upper = eq[d:]
            eq = np.concatenate([self._and_planes(eq[:n_bits - d], upper, tag, layer),
                                 eq[n_bits - d:]], axis=0)
        strict = np.concatenate(
            [eq[1:], (ones if self.party == 0 else np.zeros_like(ones))[None, :]],
            axis=0)
        fired = self._and_planes(t, strict, tag, layer)
        lt_packed = np.bitwise_xor.reduce(fired, axis=0)
        return unpack_bitplanes(lt_packed[None, :], n)[0].astype(_U64)

    def bits_to_arith(self, bit_share: np.ndarray, tag: int,
                      layer: str) -> np.ndarray:
        """XOR-shared bits -> additive shares: b0 + b1 - 2*b0*b1."""
        zero = np.zeros_like(bit_share)
        x = bit_share if self.party == 0 else zero
        y = bit_share if self.party == 1 else zero
        prod = self.beaver(x, y, tag, layer, take="aux", op="aux-open")
        return (bit_share - _U64(2) * prod) & self.mask

    # -- nonlinear units --------------------------------------------------------

    def relu_shares(self, x: np.ndarray, tag: int, layer: str) -> np.ndarray:
        """max(signed(x), 0) on flat share words, exactly."""
        n = x.size
        r_arith, r_xor = self.material.take_cmp(n)
        c = self._open_words((x.reshape(-1) + r_arith) & self.mask, tag, layer,
                             "mask-open")
        low_bits = self.bitwidth - 1
        low_mask = _U64((1 << low_bits) - 1)
        lt = self.less_than_mask(c & low_mask, r_xor & low_mask, low_bits,
                                 tag, layer)
        msb_share = ((r_xor >> _U64(low_bits)) & _U64(1)) ^ lt
        if self.party == 0:
            msb_share = msb_share ^ ((c >> _U64(low_bits)) & _U64(1))
        m_arith = self.bits_to_arith(msb_share, tag, layer)
        prod = self.beaver(x.reshape(-1), m_arith, tag, layer, take="aux",
                           op="aux-open")
        return ((x.reshape(-1) - prod) & self.mask).reshape(x.shape)

    def truncate_shares(self, x: np.ndarray, tag: int, layer: str) -> np.ndarray:
        """Faithful arithmetic shift by the working scale, exactly."""
        s = self.plan.cfg.scale
        n = x.size
        r_arith, r_shift, r_xor = self.material.take_trunc(n)
        biased = x.reshape(-1).copy()
        if self.party == 0:
            biased = (biased + _U64(1 << (self.bitwidth - 1))) & self.mask
        c = self._open_words((biased + r_arith) & self.mask, tag, layer,
                             "mask-open")
        low_mask = _U64((1 << s) - 1)
        borrow = self.bits_to_arith(
            self.less_than_mask(c & low_mask, r_xor & low_mask, s, tag, layer),
            tag, layer)
        wrap = self.bits_to_arith(
            self.less_than_mask(c, r_xor, self.bitwidth, tag, layer), tag, layer)
        res = (_U64(1 << (self.bitwidth - s)) * wrap - r_shift - borrow) & self.mask
        if self.party == 0:
            res = (res + (c >> _U64(s)) - _U64(1 << (self.bitwidth - 1 - s))) & self.mask
        return res.reshape(x.shape)

    # -- layer handlers ------------------------------------------------------------

    def _conv_direct(self, x: np.ndarray, w: np.ndarray, attrs: dict, tag: int,
                     layer: str) -> np.ndarray:
        k = attrs["kernel"]
        stride = attrs.get("stride", 1)
        padding = attrs.get("padding", 0)
        groups = attrs.get("groups", 1)
        nb = x.shape[0]
        patches = conv_patches(x, k, stride, padding)
        oh, ow = patches.shape[2], patches.shape[3]
        cpg_in = x.shape[1] // groups
        cpg_out = w.shape[0] // groups
        outs = []
        for g in range(groups):
            pg = patches[:, g * cpg_in:(g + 1) * cpg_in]
            pg = np.ascontiguousarray(pg.transpose(0, 2, 3, 1, 4, 5)).reshape(
                nb * oh * ow, cpg_in * k * k)
            wg = w[g * cpg_out:(g + 1) * cpg_out].reshape(cpg_out, cpg_in * k * k)
            x_exp = np.broadcast_to(pg[:, None, :], (pg.shape[0], cpg_out, pg.shape[1]))
            w_exp = np.broadcast_to(wg[None, :, :], x_exp.shape)
            prod = self.beaver(x_exp, w_exp, tag, layer)
            acc = prod.sum(axis=-1, dtype=_U64) & self.mask
            outs.append(acc.reshape(nb, oh, ow, cpg_out).transpose(0, 3, 1, 2))
        return np.concatenate(outs, axis=1)

    def _conv_winograd(self, x: np.ndarray, u: np.ndarray, pl, tag: int,
                       layer: str) -> np.ndarray:
        from ..winograd import _extract_tiles, _signed_to_residues, _tile_geometry

        basis = pl.payload["basis"]
        attrs = pl.attrs
        padding = attrs.get("padding", 0)
        groups = attrs.get("groups", 1)
        k, n = basis.r, basis.n
        nb, c_in = x.shape[0], x.shape[1]
        c_out = u.shape[0]
        m_out, geom, extra = _tile_geometry(x.shape[2], k, padding, n)
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding + extra),
                            (padding, padding + extra)))
        tiles = _extract_tiles(padded, n, geom.step, geom.tiles)
        btu = _signed_to_residues(basis.b_t_int())
        atu = _signed_to_residues(basis.a_t_int())
        v = np.einsum("ij,nctujk,lk->nctuil", btu, tiles, btu, dtype=_U64) & self.mask
        self.ledger.note_local(layer, "wg-input-transform")
        cpg_in = c_in // groups
        cpg_out = c_out // groups
        t = geom.tiles
        outs = []
        for g in range(groups):
            vg = v[:, g * cpg_in:(g + 1) * cpg_in].transpose(0, 2, 3, 1, 4, 5)
            ug = u[g * cpg_out:(g + 1) * cpg_out]
            x_exp = np.broadcast_to(
                vg[:, :, :, None], (nb, t, t, cpg_out, cpg_in, n, n))
            w_exp = np.broadcast_to(ug[None, None, None], x_exp.shape)
            prod = self.beaver(x_exp, w_exp, tag, layer)
            acc = prod.sum(axis=4, dtype=_U64) & self.mask
            outs.append(acc.transpose(0, 3, 1, 2, 4, 5))
        m = np.concatenate(outs, axis=1)
        y = np.einsum("ij,notujk,lk->notuil", atu, m, atu, dtype=_U64) & self.mask
        self.ledger.note_local(layer, "wg-output-transform")
        full = y.transpose(0, 1, 2, 4, 3, 5).reshape(
            nb, c_out, t * basis.m, t * basis.m)
        return np.ascontiguousarray(full[:, :, :m_out, :m_out])

    def _maxpool(self, x: np.ndarray, attrs: dict, tag: int,
                 layer: str) -> np.ndarray:
        win, stride = attrs["window"], attrs["stride"]
        if win == 1:
            self.ledger.note_local(layer, "subsample")
            return np.ascontiguousarray(x[:, :, ::stride, ::stride])
        patches = np.lib.stride_tricks.sliding_window_view(
            x, (win, win), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = np.ascontiguousarray(patches).reshape(patches.shape[:4] + (win * win,))
        cur = np.ascontiguousarray(flat[..., 0])
        for j in range(1, win * win):
            nxt = np.ascontiguousarray(flat[..., j])
            diff = (cur - nxt) & self.mask
            rel = self.relu_shares(diff, tag, layer)
            cur = (nxt + rel) & self.mask
        return cur

    def _bias_add(self, pre: np.ndarray, pl, fc: bool) -> np.ndarray:
        if self.party != 0 or "bias_ring" not in pl.payload:
            return pre
        b = pl.payload["bias_ring"].words
        self.ledger.note_local(pl.name, "bias")
        return (pre + b.reshape((1, -1) if fc else (1, -1, 1, 1))) & self.mask

    # -- session steps ---------------------------------------------------------------

    def distribute_weights(self) -> None:
        """Model owner shares every encoded weight tensor; client receives."""
        for idx, pl in enumerate(self.plan.layers):
            for key in ("w_ring", "u_ring"):
                expected = self._weight_shape(pl, key)
                if expected is None:
                    continue
                if self.party == 0:
                    ring = pl.payload[key]
                    own = self.rng.integers(0, 1 << self.bitwidth,
                                            size=ring.shape, dtype=_U64,
                                            endpoint=False)
                    other = (ring.words - own) & self.mask
                    self.send_oneway(OP_SHARE_BLOB, idx,
                                     other.astype("<u8").tobytes(),
                                     pl.name, "share-weights")
                    self._weight_shares[pl.name] = own
                else:
                    raw = self.recv_oneway(OP_SHARE_BLOB, idx, pl.name,
                                           "share-weights")
                    arr = np.frombuffer(raw, dtype="<u8").astype(_U64)
                    self._weight_shares[pl.name] = arr.reshape(expected)

    def _weight_shape(self, pl, key: str):
        if pl.kind == "conv2d":
            a = pl.attrs
            g = a.get("groups", 1)
            if a.get("winograd"):
                if key != "u_ring":
                    return None
                n = a["tile"]
                return (a["out_channels"], a["in_channels"] // g, n, n)
            if key != "w_ring":
                return None
            return (a["out_channels"], a["in_channels"] // g, a["kernel"],
                    a["kernel"])
        if pl.kind == "fully-connected" and key == "w_ring":
            return (pl.attrs["out_features"], pl.attrs["in_features"])
        return None

    def run(self, input_share: np.ndarray) -> np.ndarray:
        """Execute every plan layer; returns this party's output share."""
        env = {"input": input_share}
        for idx, pl in enumerate(self.plan.layers):
            src = [env[s] for s in pl.inputs]
            if pl.kind == "conv2d":
                w = self._weight_shares[pl.name]
                if pl.attrs.get("winograd"):
                    pre = self._conv_winograd(src[0], w, pl, idx, pl.name)
                else:
                    pre = self._conv_direct(src[0], w, pl.attrs, idx, pl.name)
                pre = self._bias_add(pre, pl, fc=False)
                env[pl.name] = self.truncate_shares(pre, idx, pl.name)
            elif pl.kind == "fully-connected":
                w = self._weight_shares[pl.name]
                flat = src[0].reshape(src[0].shape[0], -1)
                x_exp = np.broadcast_to(flat[:, None, :],
                                        (flat.shape[0], w.shape[0], flat.shape[1]))
                w_exp = np.broadcast_to(w[None], x_exp.shape)
                prod = self.beaver(x_exp, w_exp, idx, pl.name)
                pre = prod.sum(axis=-1, dtype=_U64) & self.mask
                pre = self._bias_add(pre, pl, fc=True)
                env[pl.name] = self.truncate_shares(pre, idx, pl.name)
            elif pl.kind == "relu":
                env[pl.name] = self.relu_shares(src[0], idx, pl.name)
            elif pl.kind == "maxpool":
                env[pl.name] = self._maxpool(src[0], pl.attrs, idx, pl.name)
            elif pl.kind == "avgpool":
                win, stride = pl.attrs["window"], pl.attrs["stride"]
                acc = np.lib.stride_tricks.sliding_window_view(
                    src[0], (win, win), axis=(2, 3))[:, :, ::stride, ::stride]
                summed = acc.sum(axis=(-2, -1), dtype=_U64) & self.mask
                self.ledger.note_local(pl.name, "public-scale")
                pre = (summed * _U64(pl.payload["inv_area_ring"])) & self.mask
                env[pl.name] = self.truncate_shares(pre, idx, pl.name)
            elif pl.kind == "global-avgpool":
                summed = src[0].sum(axis=(2, 3), keepdims=True, dtype=_U64) & self.mask
                self.ledger.note_local(pl.name, "public-scale")
                pre = (summed * _U64(pl.payload["inv_area_ring"])) & self.mask
                env[pl.name] = self.truncate_shares(pre, idx, pl.name)
            elif pl.kind == "shuffle":
                perm = np.asarray(pl.attrs["perm"], dtype=np.intp)
                self.ledger.note_local(pl.name, "shuffle")
                env[pl.name] = np.ascontiguousarray(src[0][:, perm])
            elif pl.kind == "add":
                acc = src[0]
                for t in src[1:]:
                    acc = (acc + t) & self.mask
                self.ledger.note_local(pl.name, "add")
                env[pl.name] = acc
            elif pl.kind == "concat":
                self.ledger.note_local(pl.name, "concat")
                env[pl.name] = np.concatenate(src, axis=1)
            else:
                raise ShapeError(f"secure engine cannot run kind {pl.kind!r}")
        return env[self.plan.output_name]


def _flat_slice(arr: np.ndarray, pos: int, m: int) -> np.ndarray:
    """Materialize arr.reshape(-1)[pos:pos+m] without copying all of arr."""
    if arr.flags.c_contiguous:
        return arr.reshape(-1)[pos:pos + m]
    idx = np.unravel_index(np.arange(pos, pos + m), arr.shape)
    return np.ascontiguousarray(arr[idx])
