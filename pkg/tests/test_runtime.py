"""Two-party engine: primitives against clear oracles, sessions bit-for-bit.

Primitive tests drive two engines over the in-process transport and check
reconstructions against plain ring arithmetic; session tests assert the
headline contract, exact bit equality with the clear fixed-point
reference, plus the byte-accounting invariants.
"""

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xconv2pc.errors import HandshakeError, MaterialError
from xconv2pc.graph import INPUT, CellVariant, GraphBuilder, cell_graph
from xconv2pc.clear import infer_fixed
from xconv2pc.costs import count_mults
from xconv2pc.plan import PlanRequirements, build_plan, lt_bool_triple_words
from xconv2pc.ring import (
    FixedPointConfig,
    RingTensor,
    encode_fixed,
    ring_mul,
    truncate_signed,
)
from xconv2pc.runtime.material import (
    generate_material,
    load_material,
    verify_material_pair,
    write_material,
)
from xconv2pc.runtime.protocol import (
    PartyEngine,
    pack_bitplanes,
    reconstruct,
    share,
    unpack_bitplanes,
)
from xconv2pc.runtime.session import secure_infer_local
from xconv2pc.runtime.wire import QueueTransport, ledgers_mirror
from xconv2pc.zoo import model_zoo

CFG = FixedPointConfig()


class _StubPlan:
    """Just enough plan surface for primitive-level engine tests."""

    def __init__(self, cfg=CFG, **req):
        self.cfg = cfg
        self.graph_hash = "00" * 32
        self._req = PlanRequirements(
            mul_triples=req.get("mul", 0), aux_triples=req.get("aux", 0),
            trunc_units=req.get("trunc", 0), cmp_tuples=req.get("cmp", 0),
            bool_words=req.get("bool_words", 0))

    def requirements(self):
        return self._req


def run_two(fn, plan, seed=0):
    """Run fn(engine) on both parties concurrently; returns both results."""
    m0, m1 = generate_material(plan, seed)
    t0, t1 = QueueTransport.pair()
    e0 = PartyEngine(0, plan, t0, m0, rng_seed=seed)
    e1 = PartyEngine(1, plan, t1, m1, rng_seed=seed)
    out = {}
    err = {}

    def side(engine):
        try:
            out[engine.party] = fn(engine)
        except Exception as e:
            err[engine.party] = e

    th = threading.Thread(target=side, args=(e0,), daemon=True)
    th.start()
    side(e1)
    th.join(timeout=120)
    for e in err.values():
        raise e
    return out[0], out[1], e0, e1


def _recon(words0, words1):
    return (words0 + words1) & np.uint64(2**60 - 1)


# -- sharing ------------------------------------------------------------------


def test_share_zero_reconstructs_zero():
    rng = np.random.default_rng(0)
    s0, s1 = share(RingTensor.zeros((16,), 60), rng)
    assert np.all(reconstruct(s0, s1).words == 0)


def test_share_roundtrip_many():
    rng = np.random.default_rng(1)
    x = RingTensor(rng.integers(0, 2**60, size=100_000, dtype=np.uint64), 60)
    s0, s1 = share(x, rng)
    assert np.array_equal(reconstruct(s0, s1).words, x.words)


def test_reconstruct_with_zero_share_is_identity():
    rng = np.random.default_rng(2)
    x = RingTensor(rng.integers(0, 2**60, size=64, dtype=np.uint64), 60)
    s0, s1 = share(x, rng)
    zero = RingTensor.zeros((64,), 60)
    from xconv2pc.runtime.protocol import ShareTensor

    direct = reconstruct(ShareTensor(0, x, 0), ShareTensor(1, zero, 0))
    assert np.array_equal(direct.words, x.words)


def test_reconstruct_encoded_one():
    rng = np.random.default_rng(3)
    s0, s1 = share(encode_fixed(np.array([1.0]), CFG), rng)
    assert int(reconstruct(s0, s1).words[0]) == 8388608


def test_share_low_bits_uniform_chi_square():
    rng = np.random.default_rng(4)
    x = RingTensor(rng.integers(0, 2**60, size=1_000_000, dtype=np.uint64), 60)
    s0, _ = share(x, rng)
    low = (s0.ring.words & np.uint64(0xFF)).astype(np.int64)
    counts = np.bincount(low, minlength=256)
    expected = low.size / 256
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # Critical value for df=255 at p=0.01.
    assert chi2 < 310.457


# -- dealer material ------------------------------------------------------------


def test_material_counts_match_counter():
    g = model_zoo("toynet", CellVariant.DENSE, 16, seed=1)
    plan = build_plan(g)
    m0, m1 = generate_material(plan, 5)
    from xconv2pc.graph import fold_batchnorm

    assert m0.counts()["mul"] == sum(count_mults(fold_batchnorm(g)).values())
    assert m0.counts() == m1.counts()


def test_material_deterministic_and_valid(tmp_path):
    plan = _StubPlan(mul=1000, aux=100, trunc=50, cmp=50, bool_words=500)
    m0, m1 = generate_material(plan, 42)
    verify_material_pair(m0, m1, CFG)
    p = tmp_path / "m.dlr"
    write_material(m0, str(p))
    first = p.read_bytes()
    write_material(generate_material(plan, 42)[0], str(p))
    assert p.read_bytes() == first
    write_material(generate_material(plan, 43)[0], str(p))
    assert p.read_bytes() != first


def test_material_triples_reconstruct_to_products():
    plan = _StubPlan(mul=5000)
    m0, m1 = generate_material(plan, 6)
    a = _recon(m0.arrays["mul_a"], m1.arrays["mul_a"])
    b = _recon(m0.arrays["mul_b"], m1.arrays["mul_b"])
    c = _recon(m0.arrays["mul_c"], m1.arrays["mul_c"])
    assert np.array_equal((a * b) & np.uint64(2**60 - 1), c)


def test_material_corruption_detected(tmp_path):
    plan = _StubPlan(mul=100)
    m0, _ = generate_material(plan, 7)
    p = tmp_path / "m.dlr"
    write_material(m0, str(p))
    blob = bytearray(p.read_bytes())
    blob[120] ^= 0x40
    p.write_bytes(bytes(blob))
    with pytest.raises(MaterialError, match="integrity"):
        load_material(str(p))


def test_material_exhaustion_raises():
    plan = _StubPlan(mul=10)
    m0, _ = generate_material(plan, 8)
    m0.take_mul(8)
    with pytest.raises(MaterialError, match="exhausted"):
        m0.take_mul(8)


# -- bit packing -----------------------------------------------------------------


def test_bitplane_pack_roundtrip():
    rng = np.random.default_rng(9)
    bits = rng.integers(0, 2, size=(5, 137)).astype(np.uint64)
    packed = pack_bitplanes(bits)
    assert packed.shape == (5, 3)
    back = unpack_bitplanes(packed, 137)
    assert np.array_equal(back, bits.astype(np.uint8))


# -- primitives over the transport --------------------------------------------------


def test_beaver_random_vs_clear_oracle():
    rng = np.random.default_rng(10)
    n = 100_000
    x = RingTensor(rng.integers(0, 2**60, size=n, dtype=np.uint64), 60)
    y = RingTensor(rng.integers(0, 2**60, size=n, dtype=np.uint64), 60)
    x0, x1 = share(x, rng)
    y0, y1 = share(y, rng)

    def fn(engine):
        xs = (x0 if engine.party == 0 else x1).ring.words
        ys = (y0 if engine.party == 0 else y1).ring.words
        return engine.beaver(xs, ys, 0, "t")

    r0, r1, *_ = run_two(fn, _StubPlan(mul=n), seed=11)
    assert np.array_equal(_recon(r0, r1), ring_mul(x, y).words)


def test_beaver_zero_and_one():
    rng = np.random.default_rng(12)
    one = encode_fixed(np.array([1.0, 0.0]), CFG)
    other = encode_fixed(np.array([1.0, 5.0]), CFG)
    x0, x1 = share(one, rng)
    y0, y1 = share(other, rng)

    def fn(engine):
        xs = (x0 if engine.party == 0 else x1).ring.words
        ys = (y0 if engine.party == 0 else y1).ring.words
        return engine.beaver(xs, ys, 0, "t")

    r0, r1, *_ = run_two(fn, _StubPlan(mul=2), seed=13)
    got = _recon(r0, r1)
    assert int(got[0]) == 2**46        # 1.0 * 1.0 at doubled scale
    assert int(got[1]) == 0            # 0 * anything


def test_beaver_mul_batch_share_level():
    from xconv2pc.runtime.protocol import beaver_mul_batch

    rng = np.random.default_rng(55)
    x = encode_fixed(rng.uniform(-2, 2, 256), CFG)
    y = encode_fixed(rng.uniform(-2, 2, 256), CFG)
    x0, x1 = share(x, rng, scale=23)
    y0, y1 = share(y, rng, scale=23)

    def fn(engine):
        xs = x0 if engine.party == 0 else x1
        ys = y0 if engine.party == 0 else y1
        return beaver_mul_batch(engine, xs, ys)

    r0, r1, *_ = run_two(fn, _StubPlan(mul=256), seed=56)
    assert r0.scale == r1.scale == 46  # the scale tags add
    assert np.array_equal(reconstruct(r0, r1).words, ring_mul(x, y).words)


def test_beaver_bytes_are_16_per_mult():
    rng = np.random.default_rng(14)
    n = 4096
    x = RingTensor(rng.integers(0, 2**60, size=n, dtype=np.uint64), 60)
    x0, x1 = share(x, rng)

    def fn(engine):
        xs = (x0 if engine.party == 0 else x1).ring.words
        return engine.beaver(xs, xs, 0, "t")

    _, _, e0, e1 = run_two(fn, _StubPlan(mul=n), seed=15)
    assert e0.ledger.bytes_for("t", "mul-open") == 16 * n
    assert e1.ledger.bytes_for("t", "mul-open") == 16 * n


def test_secure_truncate_examples_and_bulk():
    rng = np.random.default_rng(16)
    n = 1_000_000
    words = rng.integers(0, 2**60, size=n, dtype=np.uint64)
    words[0] = 2**46
    words[1] = 2**60 - 1  # signed -1 ulp
    x = RingTensor(words, 60)
    x0, x1 = share(x, rng)
    req = dict(trunc=n, aux=2 * n,
               bool_words=lt_bool_triple_words(n, 23) + lt_bool_triple_words(n, 60))

    def fn(engine):
        xs = (x0 if engine.party == 0 else x1).ring.words
        return engine.truncate_shares(xs, 0, "t")

    r0, r1, *_ = run_two(fn, _StubPlan(**req), seed=17)
    got = _recon(r0, r1)
    want = truncate_signed(x, 23).words
    assert int(got[0]) == 2**23
    assert int(got[1]) == 2**60 - 1  # floor(-1/2^23) = -1
    assert np.array_equal(got, want), f"{(got != want).sum()} mismatches"


def test_secure_relu_examples_and_bulk():
    rng = np.random.default_rng(18)
    n = 1_000_000
    words = rng.integers(0, 2**60, size=n, dtype=np.uint64)
    words[0] = 2**23            # encode(1.0)
    words[1] = 2**60 - 2**23    # encode(-1.0)
    x = RingTensor(words, 60)
    x0, x1 = share(x, rng)
    req = dict(cmp=n, aux=2 * n, bool_words=lt_bool_triple_words(n, 59))

    def fn(engine):
        xs = (x0 if engine.party == 0 else x1).ring.words
        return engine.relu_shares(xs, 0, "t")

    r0, r1, *_ = run_two(fn, _StubPlan(**req), seed=19)
    got = _recon(r0, r1)
    want = np.maximum(x.signed(), 0).astype(np.uint64)
    assert int(got[0]) == 2**23
    assert int(got[1]) == 0
    assert np.array_equal(got, want), f"{(got != want).sum()} mismatches"


# -- secure sessions -----------------------------------------------------------------


def _random_input(shape, seed):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=shape)


def test_toynet_session_bitwise_and_mirrored():
    g = model_zoo("toynet", CellVariant.DENSE, 16, seed=20)
    x = _random_input((1, 3, 16, 16), 21)
    run = secure_infer_local(g, x, seed=22)
    assert np.array_equal(run.output.words, run.clear_reference.words)
    assert ledgers_mirror(run.model.ledger, run.client.ledger)


def test_session_bitwise_over_multiple_seeds():
    g = cell_graph(CellVariant.XOP, 8, 16, 24, hw=12, seed=23)
    for trial in range(5):
        x = _random_input((1, 8, 12, 12), 100 + trial)
        run = secure_infer_local(g, x, seed=200 + trial)
        assert np.array_equal(run.output.words, run.clear_reference.words)


def test_conv_delta_filter_session():
    b = GraphBuilder((1, 1, 6, 6), seed=0)
    b.conv("c", INPUT, 1, 1, 3, padding=0, bias=False)
    g = b.build()
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    g.weights["c.weight"] = w
    x = _random_input((1, 1, 6, 6), 24)
    run = secure_infer_local(g, x, seed=25)
    ref = infer_fixed(g, x)
    assert np.array_equal(run.output.words, ref.words)
    # The delta filter reproduces (the quantized) interior crop.
    inner = encode_fixed(x, g.cfg).signed()[0, 0, 1:-1, 1:-1]
    assert np.array_equal(run.output.signed()[0, 0], inner)


def test_conv_bytes_exactly_16_per_mult_and_scaling():
    results = {}
    for size in (16, 32):
        b = GraphBuilder((1, 3, size, size), seed=1)
        b.conv("c", INPUT, 3, 8, 3, bias=False)
        g = b.build()
        run = secure_infer_local(g, _random_input((1, 3, size, size), size),
                                 seed=size)
        assert np.array_equal(run.output.words, run.clear_reference.words)
        mults = count_mults(g)["c"]
        conv_bytes = run.client.ledger.bytes_for("c", "mul-open")
        assert conv_bytes == 16 * mults
        results[size] = conv_bytes
    assert results[32] == 4 * results[16]


def test_zero_communication_ops_record_zero_bytes():
    g = cell_graph(CellVariant.XOP, 8, 16, 24, hw=12, seed=26)
    run = secure_infer_local(g, _random_input((1, 8, 12, 12), 27), seed=28)
    led = run.client.ledger
    zero_ops = [(l, o) for (l, o) in led.entries
                if o in ("shuffle", "add", "concat", "wg-input-transform",
                         "wg-output-transform", "subsample")]
    assert zero_ops, "expected local ops in the ledger"
    for key in zero_ops:
        e = led.entries[key]
        assert e.bytes_sent == 0 and e.bytes_recv == 0, key


def test_winograd_session_consumes_beta2_triples():
    from xconv2pc.winograd import mult_counts, rewrite_winograd

    b = GraphBuilder((1, 1, 8, 8), seed=2)
    b.conv("c", INPUT, 1, 1, 3, padding=0, bias=False)
    rw, _ = rewrite_winograd(b.build(), candidates=(6,))
    run = secure_infer_local(rw, _random_input((1, 1, 8, 8), 29), seed=30)
    assert np.array_equal(run.output.words, run.clear_reference.words)
    assert run.client.ledger.bytes_for("c", "mul-open") // 16 == \
        mult_counts(6, 3, 6).beta2


def test_maxpool_session_known_grid():
    b = GraphBuilder((1, 1, 4, 4), seed=3)
    b.maxpool("p", INPUT, 2, 2)
    g = b.build()
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4) / 16.0
    run = secure_infer_local(g, x, seed=31)
    got = run.output.signed() / 2**23
    assert np.allclose(got, [[[[5 / 16, 7 / 16], [13 / 16, 15 / 16]]]])


def test_avgpool_public_scale_is_free_and_exact():
    b = GraphBuilder((1, 2, 8, 8), seed=4)
    b.avgpool("a", INPUT, 2, 2)
    g = b.build()
    run = secure_infer_local(g, _random_input((1, 2, 8, 8), 32), seed=33)
    assert np.array_equal(run.output.words, run.clear_reference.words)
    led = run.client.ledger
    assert led.entries[("a", "public-scale")].bytes_sent == 0


def test_xop_cell_session_bytes_under_fifth_of_dense():
    x16 = _random_input((1, 16, 32, 32), 34)
    xop = secure_infer_local(cell_graph(CellVariant.XOP, 16, 48, 64, hw=32,
                                        seed=35), x16, seed=36)
    dense = secure_infer_local(cell_graph(CellVariant.DENSE, 16, 48, 64, hw=32,
                                          seed=35), x16, seed=36)
    assert np.array_equal(xop.output.words, xop.clear_reference.words)
    assert np.array_equal(dense.output.words, dense.clear_reference.words)
    assert xop.client.ledger.total_sent < dense.client.ledger.total_sent / 5


def test_kitchen_sink_graph_bitwise():
    """Every layer kind and conv flavor in one secure session."""
    from xconv2pc.winograd import rewrite_winograd

    b = GraphBuilder((1, 4, 16, 16), seed=60)
    c1 = b.conv("stem", INPUT, 4, 8, 3, stride=2)           # strided, biased
    r1 = b.relu("r1", c1)
    c2 = b.conv("body", r1, 8, 8, 3)                        # transform-tagged below
    n1 = b.batchnorm("bn", c2, 8)                           # folds into body
    r2 = b.relu("r2", n1)
    dw = b.conv("dw", r2, 8, 8, 3, groups=8)                # depthwise
    gp = b.conv("gpw", dw, 8, 8, 1, padding=0, groups=2)    # grouped pointwise
    sh = b.shuffle("mix", gp, 8)
    ad = b.add("res", sh, r2)
    ct = b.concat("cat", ad, r2)
    mp = b.maxpool("mp", ct, 2, 2)
    ap = b.avgpool("ap", mp, 2, 2)
    gap = b.global_avgpool("gap", ap)
    b.fc("head", gap, 16, 5)
    g, _ = rewrite_winograd(b.build(), allow={"body"})
    assert g.layer("body").attrs["winograd"]
    run = secure_infer_local(g, _random_input((1, 4, 16, 16), 61), seed=62)
    assert np.array_equal(run.output.words, run.clear_reference.words)
    assert ledgers_mirror(run.model.ledger, run.client.ledger)


@pytest.mark.slow
def test_deep_zoo_fixed_inference_stays_in_range():
    from xconv2pc.clear import infer_fixed, infer_float

    for backbone in ("densenet121", "mobilenetv3l", "resnet50"):
        g = model_zoo(backbone, CellVariant.DENSE, 64, seed=63)
        x = _random_input((1, 3, 64, 64), 64)
        q = infer_fixed(g, x).signed() / 2**23
        f = infer_float(g, x)
        assert np.abs(q - f).max() < 1e-3, backbone


def test_transcript_determinism_and_seed_sensitivity():
    g = model_zoo("toynet", CellVariant.DENSE, 16, seed=37)
    x = _random_input((1, 3, 16, 16), 38)
    a = secure_infer_local(g, x, seed=39)
    b = secure_infer_local(g, x, seed=39)
    c = secure_infer_local(g, x, seed=40)
    assert a.client.sent_digest == b.client.sent_digest
    assert a.model.sent_digest == b.model.sent_digest
    assert a.client.recv_digest == b.client.recv_digest
    assert a.client.sent_digest != c.client.sent_digest


@given(st.data())
@settings(max_examples=12, deadline=None)
def test_random_graph_structures_bitwise(data):
    """Property: any well-formed layer stack reconstructs the clear bits."""
    c = data.draw(st.sampled_from([2, 4, 6]), label="channels")
    hw = data.draw(st.sampled_from([6, 8, 10]), label="hw")
    seed = data.draw(st.integers(0, 2**16), label="seed")
    b = GraphBuilder((1, c, hw, hw), seed=seed)
    cur, cur_c, cur_hw = INPUT, c, hw
    n_layers = data.draw(st.integers(2, 5), label="depth")
    for i in range(n_layers):
        menu = ["conv", "relu", "shuffle", "pw"]
        if cur_hw >= 4:
            menu += ["maxpool", "avgpool"]
        if cur_c % 2 == 0:
            menu.append("gconv")
        kind = data.draw(st.sampled_from(menu), label=f"layer{i}")
        name = f"l{i}"
        if kind == "conv":
            out_c = data.draw(st.sampled_from([2, 3, 4]), label=f"oc{i}")
            cur = b.conv(name, cur, cur_c, out_c, 3)
            cur_c = out_c
        elif kind == "pw":
            out_c = data.draw(st.sampled_from([2, 4, 6]), label=f"oc{i}")
            cur = b.conv(name, cur, cur_c, out_c, 1, padding=0)
            cur_c = out_c
        elif kind == "gconv":
            cur = b.conv(name, cur, cur_c, cur_c, 3, groups=2)
        elif kind == "relu":
            cur = b.relu(name, cur)
        elif kind == "shuffle":
            cur = b.shuffle(name, cur, cur_c)
        elif kind == "maxpool":
            cur = b.maxpool(name, cur, 2, 2)
            cur_hw //= 2
        elif kind == "avgpool":
            cur = b.avgpool(name, cur, 2, 2)
            cur_hw //= 2
    g = b.build()
    x = _random_input((1, c, hw, hw), seed ^ 0x5A5A)
    run = secure_infer_local(g, x, seed=seed + 9)
    assert np.array_equal(run.output.words, run.clear_reference.words)


def test_handshake_rejects_mismatched_graphs():
    g1 = model_zoo("toynet", CellVariant.DENSE, 16, seed=41)
    g2 = model_zoo("toynet", CellVariant.DENSE, 16, seed=41)
    g2.layer("fc").attrs["bias"] = False  # shape-neutral architecture tamper
    plan0 = build_plan(g1, with_weights=True)
    plan1 = build_plan(g2, with_weights=False)
    m0, m1 = generate_material(plan0, 42)
    t0, t1 = QueueTransport.pair()
    from xconv2pc.runtime.session import run_client_party, run_model_party

    errors = {}

    def model_side():
        try:
            run_model_party(plan0, t0, m0, 42)
        except Exception as e:
            errors["model"] = e

    th = threading.Thread(target=model_side, daemon=True)
    th.start()
    x = encode_fixed(_random_input(tuple(plan1.input_shape), 43), g2.cfg)
    with pytest.raises(HandshakeError):
        run_client_party(plan1, t1, m1, 42, x)
    th.join(timeout=30)
    assert isinstance(errors.get("model"), Exception)


def test_session_fails_cleanly_on_short_material():
    g = model_zoo("toynet", CellVariant.DENSE, 16, seed=44)
    small = GraphBuilder((1, 3, 16, 16), seed=44)
    small.conv("c", INPUT, 3, 4, 3, bias=False)
    starved = build_plan(small.build(), with_weights=False)
    materials = generate_material(starved, 45)  # far too little for toynet
    with pytest.raises(MaterialError):
        secure_infer_local(g, _random_input((1, 3, 16, 16), 46), seed=45,
                           materials=materials)
