"""Dealer-side correlated randomness: generation, files, consumption.

The dealer knows the plan's exact resource footprint and emits one file
per party holding five sequential streams:

1. multiplication triples (a, b, c = a*b), one per secret multiplication,
2. auxiliary arithmetic triples for bit-to-arithmetic conversions and the
   sign-bit products of the nonlinear layers,
3. truncation units: additive and XOR sharings of a fresh mask plus an
   additive sharing of its unsigned shift,
4. comparison tuples: additive and XOR sharings of a fresh mask,
5. boolean triples as packed 64-bit words for the bit circuits.

Identical seeds give byte-identical files.  Both parties consume with
lockstep cursors; running past the end raises, and a file whose trailing
digest does not match its contents is rejected before any use.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import MaterialError
from ..plan import FixedPlan
from ..ring import FixedPointConfig

_U64 = np.uint64

MATERIAL_MAGIC = b"DLR1"
_HEADER = struct.Struct("<4sBB2xQ32s5Q")

_STREAMS = ("mul_a", "mul_b", "mul_c", "aux_a", "aux_b", "aux_c",
            "trunc_r", "trunc_shift", "trunc_xor", "cmp_r", "cmp_xor",
            "bool_a", "bool_b", "bool_c")


@dataclass
class MaterialStore:
    """One party's preprocessed randomness with consumption cursors."""

    party: int
    seed: int
    bitwidth: int
    graph_hash: bytes
    arrays: dict

    def __post_init__(self):
        self.cursors = {"mul": 0, "aux": 0, "trunc": 0, "cmp": 0, "bool": 0}

    def _take(self, kind: str, names: tuple, n: int) -> tuple:
        cur = self.cursors[kind]
        end = cur + n
        if end > len(self.arrays[names[0]]):
            raise MaterialError(
                f"dealer material exhausted: stream {kind!r} needs {end}, "
                f"holds {len(self.arrays[names[0]])}")
        self.cursors[kind] = end
        return tuple(self.arrays[name][cur:end] for name in names)

    def take_mul(self, n: int) -> tuple:
        return self._take("mul", ("mul_a", "mul_b", "mul_c"), n)

    def take_aux(self, n: int) -> tuple:
        return self._take("aux", ("aux_a", "aux_b", "aux_c"), n)

    def take_trunc(self, n: int) -> tuple:
        return self._take("trunc", ("trunc_r", "trunc_shift", "trunc_xor"), n)

    def take_cmp(self, n: int) -> tuple:
        return self._take("cmp", ("cmp_r", "cmp_xor"), n)

    def take_bool(self, n_words: int) -> tuple:
        return self._take("bool", ("bool_a", "bool_b", "bool_c"), n_words)

    def counts(self) -> dict:
        return {"mul": len(self.arrays["mul_a"]), "aux": len(self.arrays["aux_a"]),
                "trunc": len(self.arrays["trunc_r"]), "cmp": len(self.arrays["cmp_r"]),
                "bool": len(self.arrays["bool_a"])}


def _rng(seed: int, domain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(domain,)))


def _uniform(rng, n, bitwidth) -> np.ndarray:
    return rng.integers(0, 1 << bitwidth, size=n, dtype=_U64,
                        endpoint=False) if n else np.zeros(0, dtype=_U64)


def generate_material(plan: FixedPlan, seed: int) -> tuple:
    """Dealer preprocessing for one session; returns both parties' stores."""
    req = plan.requirements()
    cfg = plan.cfg
    mask = _U64((1 << cfg.bitwidth) - 1) if cfg.bitwidth < 64 else _U64(0xFFFFFFFFFFFFFFFF)
    ghash = bytes.fromhex(plan.graph_hash)

    def arith_pair(values, rng):
        s0 = _uniform(rng, len(values), cfg.bitwidth)
        s1 = (values - s0) & mask
        return s0, s1

    def xor_pair(values, rng):
        s0 = _uniform(rng, len(values), cfg.bitwidth)
        return s0, values ^ s0

    p0, p1 = {}, {}

    rng = _rng(seed, 1)
    a = _uniform(rng, req.mul_triples, cfg.bitwidth)
    b = _uniform(rng, req.mul_triples, cfg.bitwidth)
    c = (a * b) & mask
    for name, vals in (("mul_a", a), ("mul_b", b), ("mul_c", c)):
        p0[name], p1[name] = arith_pair(vals, rng)

    rng = _rng(seed, 2)
    a = _uniform(rng, req.aux_triples, cfg.bitwidth)
    b = _uniform(rng, req.aux_triples, cfg.bitwidth)
    c = (a * b) & mask
    for name, vals in (("aux_a", a), ("aux_b", b), ("aux_c", c)):
        p0[name], p1[name] = arith_pair(vals, rng)

    rng = _rng(seed, 3)
    r = _uniform(rng, req.trunc_units, cfg.bitwidth)
    shifted = r >> _U64(cfg.scale)
    p0["trunc_r"], p1["trunc_r"] = arith_pair(r, rng)
    p0["trunc_shift"], p1["trunc_shift"] = arith_pair(shifted, rng)
    p0["trunc_xor"], p1["trunc_xor"] = xor_pair(r, rng)

    rng = _rng(seed, 4)
    r = _uniform(rng, req.cmp_tuples, cfg.bitwidth)
    p0["cmp_r"], p1["cmp_r"] = arith_pair(r, rng)
    p0["cmp_xor"], p1["cmp_xor"] = xor_pair(r, rng)

    rng = _rng(seed, 5)
    wa = _uniform(rng, req.bool_words, 64)
    wb = _uniform(rng, req.bool_words, 64)
    wc = wa & wb
    for name, vals in (("bool_a", wa), ("bool_b", wb), ("bool_c", wc)):
        s0 = _uniform(rng, len(vals), 64)
        p0[name], p1[name] = s0, vals ^ s0

    return (MaterialStore(0, seed, cfg.bitwidth, ghash, p0),
            MaterialStore(1, seed, cfg.bitwidth, ghash, p1))


# -- files -----------------------------------------------------------------------


def write_material(store: MaterialStore, path: str) -> None:
    counts = store.counts()
    head = _HEADER.pack(MATERIAL_MAGIC, 1, store.party, store.seed,
                        store.graph_hash, counts["mul"], counts["aux"],
                        counts["trunc"], counts["cmp"], counts["bool"])
    body = b"".join(store.arrays[name].astype("<u8").tobytes() for name in _STREAMS)
    digest = hashlib.sha256(head + body).digest()
    with open(path, "wb") as f:
        f.write(head + body + digest)


def load_material(path: str, bitwidth: int = None) -> MaterialStore:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise MaterialError(f"cannot read dealer material: {e}") from e
    if len(blob) < _HEADER.size + 32 or blob[:4] != MATERIAL_MAGIC:
        raise MaterialError("not a dealer material file")
    head = blob[:_HEADER.size]
    digest = blob[-32:]
    body = blob[_HEADER.size:-32]
    if hashlib.sha256(head + body).digest() != digest:
        raise MaterialError("dealer material failed its integrity check")
    (_, version, party, seed, ghash, n_mul, n_aux, n_trunc, n_cmp,
     n_bool) = _HEADER.unpack(head)
    if version != 1:
        raise MaterialError(f"unsupported material version {version}")
    sizes = (n_mul,) * 3 + (n_aux,) * 3 + (n_trunc,) * 3 + (n_cmp,) * 2 + (n_bool,) * 3
    if len(body) != 8 * sum(sizes):
        raise MaterialError("dealer material stream lengths are inconsistent")
    arrays = {}
    off = 0
    for name, n in zip(_STREAMS, sizes):
        arrays[name] = np.frombuffer(body, dtype="<u8", offset=off,
                                     count=n).astype(_U64)
        off += 8 * n
    return MaterialStore(party, seed, bitwidth or 64, ghash, arrays)


def verify_material_pair(m0: MaterialStore, m1: MaterialStore,
                         cfg: FixedPointConfig, sample: int = 4096) -> None:
    """Cross-check the reconstructed correlations; dealer or file bugs bite here."""
    mask = _U64((1 << cfg.bitwidth) - 1) if cfg.bitwidth < 64 else _U64(0xFFFFFFFFFFFFFFFF)

    def recon(name):
        return (m0.arrays[name] + m1.arrays[name]) & mask

    for prefix in ("mul", "aux"):
        a, b, c = (recon(f"{prefix}_{s}")[:sample] for s in "abc")
        if not np.array_equal((a * b) & mask, c):
            raise MaterialError(f"{prefix} triples do not reconstruct to products")
    r = recon("trunc_r")[:sample]
    shift = recon("trunc_shift")[:sample]
    if not np.array_equal(r >> _U64(cfg.scale), shift):
        raise MaterialError("truncation units do not reconstruct to shifted masks")
    rx = (m0.arrays["trunc_xor"] ^ m1.arrays["trunc_xor"])[:sample]
    if not np.array_equal(rx, r):
        raise MaterialError("truncation XOR sharing disagrees with the additive one")
    cr = recon("cmp_r")[:sample]
    cx = (m0.arrays["cmp_xor"] ^ m1.arrays["cmp_xor"])[:sample]
    if not np.array_equal(cr, cx):
        raise MaterialError("comparison tuples' sharings disagree")
    ba = (m0.arrays["bool_a"] ^ m1.arrays["bool_a"])[:sample]
    bb = (m0.arrays["bool_b"] ^ m1.arrays["bool_b"])[:sample]
    bc = (m0.arrays["bool_c"] ^ m1.arrays["bool_c"])[:sample]
    if not np.array_equal(ba & bb, bc):
        raise MaterialError("boolean triples do not reconstruct to AND")
