"""Session roles: handshake, input/weight distribution, full runs.

The model owner (party 0) holds the weights and listens; the client
(party 1) holds the input, connects, and is the only side that learns the
output.  The dealer is offline: it materializes both parties' randomness
files from the session seed before the online phase.  Every random draw
in a session derives from that one seed through domain-separated
sub-streams, so a (seed, input) pair pins the whole transcript byte for
byte.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from ..errors import HandshakeError, TransportError
from ..graph import Graph
from ..plan import FixedPlan, build_plan, execute_plan_clear
from ..ring import RingTensor, encode_fixed, mask_words
from .material import MaterialStore, generate_material
from .protocol import PartyEngine, ProtocolAbort
from .wire import (
    OP_HELLO,
    OP_OPEN_OUTPUT,
    OP_SHARE_BLOB,
    OP_SYNC,
    PROTOCOL_VERSION,
    QueueTransport,
    SESSION_TAG,
    SocketTransport,
    Transport,
)

_U64 = np.uint64

_HELLO = struct.Struct("<HBB32s8s")


def _hello_payload(plan: FixedPlan, seed: int) -> bytes:
    import hashlib

    commit = hashlib.sha256(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)).digest()[:8]
    return _HELLO.pack(PROTOCOL_VERSION, plan.cfg.bitwidth, plan.cfg.scale,
                       bytes.fromhex(plan.graph_hash), commit)


def handshake(engine: PartyEngine, seed: int) -> None:
    """Compare protocol version, ring, architecture digest, and seed commitment."""
    mine = _hello_payload(engine.plan, seed)
    try:
        theirs = engine.exchange(OP_HELLO, SESSION_TAG, mine, "session", "hello")
    except ProtocolAbort as e:
        raise HandshakeError(f"peer aborted during handshake: {e}") from e
    if len(theirs) != _HELLO.size:
        engine.abort("malformed hello")
        raise HandshakeError("malformed hello from peer")
    v, bw, sc, ghash, commit = _HELLO.unpack(theirs)
    ours = _HELLO.unpack(mine)
    if v != PROTOCOL_VERSION:
        engine.abort("version mismatch")
        raise HandshakeError(f"protocol version mismatch: {v} != {PROTOCOL_VERSION}")
    if (bw, sc) != (ours[1], ours[2]):
        engine.abort("ring mismatch")
        raise HandshakeError("fixed-point configuration mismatch")
    if ghash != ours[3]:
        engine.abort("graph mismatch")
        raise HandshakeError("graph hash mismatch: parties hold different architectures")
    if commit != ours[4]:
        engine.abort("seed mismatch")
        raise HandshakeError("session seed commitment mismatch")


@dataclass
class SessionResult:
    output: RingTensor          # client side only; None on the model side
    ledger: object
    sent_digest: str
    recv_digest: str


def run_model_party(plan: FixedPlan, transport: Transport,
                    material: MaterialStore, seed: int) -> SessionResult:
    """Party 0: contributes weights, learns nothing."""
    engine = PartyEngine(0, plan, transport, material, rng_seed=seed)
    handshake(engine, seed)
    engine.distribute_weights()
    raw = engine.recv_oneway(OP_SHARE_BLOB, SESSION_TAG, "input", "share-input")
    x_share = np.frombuffer(raw, dtype="<u8").astype(_U64).reshape(plan.input_shape)
    out_share = engine.run(x_share)
    engine.send_oneway(OP_OPEN_OUTPUT, SESSION_TAG,
                       np.ascontiguousarray(out_share).astype("<u8").tobytes(),
                       plan.output_name, "output-open")
    engine.exchange(OP_SYNC, SESSION_TAG, b"", "session", "sync")
    return SessionResult(None, engine.ledger, engine.transcript.sent_digest,
                         engine.transcript.recv_digest)


def run_client_party(plan: FixedPlan, transport: Transport,
                     material: MaterialStore, seed: int,
                     x: RingTensor) -> SessionResult:
    """Party 1: contributes the input, reconstructs the output."""
    if tuple(x.shape) != tuple(plan.input_shape):
        raise HandshakeError(f"input shape {x.shape} != plan {plan.input_shape}")
    engine = PartyEngine(1, plan, transport, material, rng_seed=seed)
    handshake(engine, seed)
    engine.distribute_weights()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(200,)))
    other = rng.integers(0, 1 << plan.cfg.bitwidth, size=x.shape, dtype=_U64,
                         endpoint=False)
    own = mask_words(x.words - other, plan.cfg.bitwidth)
    engine.send_oneway(OP_SHARE_BLOB, SESSION_TAG, other.astype("<u8").tobytes(),
                       "input", "share-input")
    out_share = engine.run(own)
    raw = engine.recv_oneway(OP_OPEN_OUTPUT, SESSION_TAG, plan.output_name,
                             "output-open")
    peer_out = np.frombuffer(raw, dtype="<u8").astype(_U64).reshape(out_share.shape)
    output = RingTensor(mask_words(out_share + peer_out, plan.cfg.bitwidth),
                        plan.cfg.bitwidth)
    engine.exchange(OP_SYNC, SESSION_TAG, b"", "session", "sync")
    return SessionResult(output, engine.ledger, engine.transcript.sent_digest,
                         engine.transcript.recv_digest)


# -- in-process orchestration -------------------------------------------------------


@dataclass
class LocalRun:
    output: RingTensor
    clear_reference: RingTensor
    model: SessionResult
    client: SessionResult
    plan: FixedPlan


def secure_infer_local(graph: Graph, x, seed: int = 0,
                       materials: tuple = None,
                       activation_ceiling: float = 128.0,
                       compare_clear: bool = True) -> LocalRun:
    """Full two-party execution over an in-process duplex transport.

    The dealer phase, both online parties, and (optionally) the clear
    fixed-point reference all run from one seed; the reference output is
    what the reconstructed secure output must equal bit for bit.
    """
    plan0 = build_plan(graph, activation_ceiling=activation_ceiling,
                       with_weights=True)
    plan1 = build_plan(graph, activation_ceiling=activation_ceiling,
                       with_weights=False)
    if not isinstance(x, RingTensor):
        x = encode_fixed(np.asarray(x, dtype=np.float64), graph.cfg)
    self_dealt = materials is None
    if self_dealt:
        materials = generate_material(plan0, seed)
    m0, m1 = materials
    t0, t1 = QueueTransport.pair()

    results = {}
    errors = {}

    def model_side():
        try:
            results["model"] = run_model_party(plan0, t0, m0, seed)
        except Exception as e:  # propagated after join
            errors["model"] = e

    thread = threading.Thread(target=model_side, daemon=True)
    thread.start()
    try:
        results["client"] = run_client_party(plan1, t1, m1, seed, x)
    except Exception:
        thread.join(timeout=5)
        raise
    thread.join(timeout=600)
    if "model" in errors:
        raise errors["model"]
    if m0.cursors != m1.cursors:
        raise TransportError("parties consumed dealer material unevenly")
    if self_dealt:
        req = plan0.requirements()
        expected = {"mul": req.mul_triples, "aux": req.aux_triples,
                    "trunc": req.trunc_units, "cmp": req.cmp_tuples,
                    "bool": req.bool_words}
        if m0.cursors != expected:
            raise TransportError(
                f"material consumption {m0.cursors} != sized requirement "
                f"{expected}")

    clear = None
    if compare_clear:
        clear = execute_plan_clear(plan0, x, check_ceiling=False)
    return LocalRun(output=results["client"].output, clear_reference=clear,
                    model=results["model"], client=results["client"], plan=plan0)


# -- TCP helpers ---------------------------------------------------------------------


def listen_once(host: str, port: int, timeout: float = 60.0) -> SocketTransport:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        srv.bind((host, port))
        srv.listen(1)
        srv.settimeout(timeout)
        conn, _ = srv.accept()
    except OSError as e:
        raise TransportError(f"listen on {host}:{port} failed: {e}") from e
    finally:
        srv.close()
    conn.settimeout(600)
    return SocketTransport(conn)


def connect_with_retry(host: str, port: int, timeout: float = 60.0) -> SocketTransport:
    deadline = time.monotonic() + timeout
    last = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection((host, port), timeout=5)
            sock.settimeout(600)
            return SocketTransport(sock)
        except OSError as e:
            last = e
            time.sleep(0.1)
    raise TransportError(f"cannot reach {host}:{port}: {last}")


# -- engine self-measurement ----------------------------------------------------------


def measure_op_bytes(op: str, elems: int = 4096, seed: int = 7) -> float:
    """Per-element payload bytes this engine spends on one nonlinear op."""
    from ..graph import GraphBuilder, INPUT

    b = GraphBuilder((1, 1, 64, 64), seed=seed)
    if op == "relu":
        b.relu("probe", INPUT)
    elif op == "truncate":
        # window-1 average pool scales by an encoded 1.0 and truncates,
        # isolating the truncation protocol.
        b.avgpool("probe", INPUT, 1, 1)
    else:
        raise ValueError(f"unknown probe op {op!r}")
    g = b.build()
    x = np.random.default_rng(seed).uniform(-1, 1, (1, 1, 64, 64))
    run = secure_infer_local(g, x, seed=seed, compare_clear=False)
    return run.client.ledger.bytes_for(layer="probe") / (64 * 64)
