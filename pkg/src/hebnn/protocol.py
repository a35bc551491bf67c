"""Interactive secure inference: message codec, manifest and session state machines.

The server holds the posterior and, per session, ``S`` sampled weight sets.
Each round the client sends encrypted activations, the server evaluates the
linear layer for every sample under encryption (SLC), and the client decrypts,
applies the non-linear ops and re-encrypts (SNC). After the last layer the
client averages the ``S`` softmax outputs.

Wire layout of one message (all integers big-endian)::

    tag u8 | version u8 | session u64 | seq u32 | layer u16 | sample u16 | len u32 | payload

Ciphertext-list payloads are ``count u32`` followed by ``count`` entries of
``len u32 | serialized ciphertext``.
"""

from __future__ import annotations

import json
import math
import secrets
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bfv
from .bnn.layers import Activation, Pool2d, softmax
from .bnn.network import BayesianNetwork, sample_model
from .encoding import (
    FixedPointScale,
    LayerPlan,
    SaturationCounter,
    check_headroom,
    extract_layer,
    optimal_plan,
    pack_input_chunks,
    pack_layer_ints,
    plan_layer,
    quantize_signed,
)
from .ring import RingParams, SecureRng, addmod, centered, intt_array, mulmod, ntt_array

PROTOCOL_VERSION = 1
BROADCAST = 0xFFFF

CLIENT_HELLO = 1
SERVER_HELLO = 2
ENC_ACTIVATIONS = 3
ENC_PREACTIVATIONS = 4
DONE = 5
ERROR = 6

MESSAGE_NAMES = {CLIENT_HELLO: "ClientHello", SERVER_HELLO: "ServerHello",
                 ENC_ACTIVATIONS: "EncActivations", ENC_PREACTIVATIONS: "EncPreactivations",
                 DONE: "Done", ERROR: "Error"}

_HEADER = struct.Struct(">BBQIHHI")
HEADER_SIZE = _HEADER.size

CLIENT_OPS = {"activation", "pool"}


class ProtocolError(RuntimeError):
    """A peer violated the protocol (ordering, parameters, multiplicity...)."""


class ParameterMismatch(ProtocolError):
    pass


class SessionRegistry:
    """Session ids a server has already accepted; a reused id is a replay."""

    def __init__(self):
        self._seen = set()
        self._lock = threading.Lock()

    def claim(self, session_id: int):
        with self._lock:
            if session_id in self._seen:
                raise ProtocolError(f"stale session id {session_id:#x}")
            self._seen.add(session_id)

    def __len__(self):
        return len(self._seen)


# -- messages -----------------------------------------------------------------

@dataclass(frozen=True)
class ClientHello:
    session_id: int
    seq: int
    params: dict
    public_key: bytes = field(repr=False)
    tag = CLIENT_HELLO


@dataclass(frozen=True)
class ServerHello:
    session_id: int
    seq: int
    manifest: "ModelManifest"
    tag = SERVER_HELLO


@dataclass(frozen=True)
class EncActivations:
    session_id: int
    seq: int
    layer: int
    sample: int
    ciphertexts: tuple = field(repr=False)
    tag = ENC_ACTIVATIONS


@dataclass(frozen=True)
class EncPreactivations:
    session_id: int
    seq: int
    layer: int
    sample: int
    ciphertexts: tuple = field(repr=False)
    tag = ENC_PREACTIVATIONS


@dataclass(frozen=True)
class Done:
    session_id: int
    seq: int
    tag = DONE


@dataclass(frozen=True)
class ErrorMessage:
    session_id: int
    seq: int
    text: str
    tag = ERROR


MESSAGE_TYPES = (ClientHello, ServerHello, EncActivations, EncPreactivations, Done, ErrorMessage)


def _ct_list(cts) -> bytes:
    out = [struct.pack(">I", len(cts))]
    for c in cts:
        out.append(struct.pack(">I", len(c)))
        out.append(bytes(c))
    return b"".join(out)


def _parse_ct_list(payload: bytes) -> tuple:
    if len(payload) < 4:
        raise ProtocolError("truncated ciphertext list")
    (count,), pos, out = struct.unpack_from(">I", payload), 4, []
    for _ in range(count):
        if pos + 4 > len(payload):
            raise ProtocolError("truncated ciphertext list")
        (n,) = struct.unpack_from(">I", payload, pos)
        pos += 4
        if pos + n > len(payload):
            raise ProtocolError("truncated ciphertext entry")
        out.append(payload[pos:pos + n])
        pos += n
    if pos != len(payload):
        raise ProtocolError("trailing bytes after ciphertext list")
    return tuple(out)


def encode_message(msg) -> bytes:
    layer, sample = 0, 0
    if isinstance(msg, ClientHello):
        desc = json.dumps(msg.params, sort_keys=True, separators=(",", ":")).encode()
        payload = struct.pack(">H", len(desc)) + desc + msg.public_key
    elif isinstance(msg, ServerHello):
        payload = msg.manifest.to_bytes()
    elif isinstance(msg, (EncActivations, EncPreactivations)):
        layer, sample = msg.layer, msg.sample
        payload = _ct_list(msg.ciphertexts)
    elif isinstance(msg, Done):
        payload = b""
    elif isinstance(msg, ErrorMessage):
        payload = msg.text.encode()
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return _HEADER.pack(msg.tag, PROTOCOL_VERSION, msg.session_id, msg.seq, layer, sample,
                        len(payload)) + payload


def decode_message(data: bytes):
    if len(data) < HEADER_SIZE:
        raise ProtocolError("truncated message header")
    tag, version, sid, seq, layer, sample, n = _HEADER.unpack_from(data)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    payload = data[HEADER_SIZE:]
    if len(payload) != n:
        raise ProtocolError(f"payload length {len(payload)} != declared {n}")
    if tag == CLIENT_HELLO:
        if n < 2:
            raise ProtocolError("truncated ClientHello")
        (dlen,) = struct.unpack_from(">H", payload)
        try:
            params = json.loads(payload[2:2 + dlen])
        except ValueError as exc:
            raise ProtocolError(f"bad parameter descriptor: {exc}") from exc
        return ClientHello(sid, seq, params, bytes(payload[2 + dlen:]))
    if tag == SERVER_HELLO:
        return ServerHello(sid, seq, ModelManifest.from_bytes(payload))
    if tag == ENC_ACTIVATIONS:
        return EncActivations(sid, seq, layer, sample, _parse_ct_list(payload))
    if tag == ENC_PREACTIVATIONS:
        return EncPreactivations(sid, seq, layer, sample, _parse_ct_list(payload))
    if tag == DONE:
        return Done(sid, seq)
    if tag == ERROR:
        return ErrorMessage(sid, seq, payload.decode(errors="replace"))
    raise ProtocolError(f"unknown message tag {tag}")


# -- manifest -------------------------------------------------------------------

@dataclass(frozen=True)
class StageInfo:
    plan: LayerPlan
    in_shape: tuple
    out_shape: tuple
    post_ops: tuple  # layer configs of client-side ops

    def to_dict(self):
        return {"plan": self.plan.to_dict(), "in_shape": list(self.in_shape),
                "out_shape": list(self.out_shape), "post_ops": list(self.post_ops)}

    @classmethod
    def from_dict(cls, d):
        return cls(LayerPlan.from_dict(d["plan"]), tuple(d["in_shape"]), tuple(d["out_shape"]),
                   tuple(d["post_ops"]))


@dataclass(frozen=True)
class ModelManifest:
    """Everything the client needs to run its side: dimensions, packing plans and
    activation identities. No weight values."""

    params: dict
    scale: FixedPointScale
    S: int
    input_shape: tuple
    num_classes: int
    stages: tuple

    @property
    def n_layers(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {"version": PROTOCOL_VERSION, "params": self.params, "scale": self.scale.to_dict(),
                "S": self.S, "input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "stages": [s.to_dict() for s in self.stages]}

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelManifest":
        try:
            d = json.loads(data)
            if d.get("version") != PROTOCOL_VERSION:
                raise ProtocolError(f"unsupported manifest version {d.get('version')}")
            stages = tuple(StageInfo.from_dict(s) for s in d["stages"])
            scale = FixedPointScale(**d["scale"])
            m = cls(d["params"], scale, int(d["S"]), tuple(d["input_shape"]), int(d["num_classes"]), stages)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed manifest: {exc}") from exc
        for st in m.stages:
            for op in st.post_ops:
                if op.get("kind") not in CLIENT_OPS:
                    raise ProtocolError(f"unsupported client-side op {op!r}")
        return m


def params_descriptor(params: RingParams) -> dict:
    return params.describe()


def build_manifest(network: BayesianNetwork, params: RingParams, S: int,
                   scale: FixedPointScale | None = None, chunking: str = "auto") -> ModelManifest:
    """Plan every stage. ``chunking='auto'`` picks chunk widths that minimize
    ciphertexts on the wire; ``'none'`` packs whole inputs (split only above N)."""
    scale = scale or FixedPointScale()
    scale.check(params.t)
    stages = []
    for st in network.stages():
        if chunking == "auto":
            plan = optimal_plan(st.d_in, st.n_out, params.N, 1 if st.index == 0 else S, S)
        elif chunking == "none":
            plan = plan_layer(st.d_in, st.n_out, params.N)
        else:
            raise ValueError(f"unknown chunking mode {chunking!r}")
        stages.append(StageInfo(plan, tuple(st.in_shape), tuple(st.out_shape),
                                tuple(op.config() for op in st.post_ops)))
    return ModelManifest(params_descriptor(params), scale, S, network.input_shape,
                         network.num_classes, tuple(stages))


def _client_op(cfg: dict):
    if cfg["kind"] == "activation":
        return Activation(cfg["fn"])
    if cfg["kind"] == "pool":
        return Pool2d(cfg["mode"], cfg["size"])
    raise ProtocolError(f"unsupported client-side op {cfg!r}")


def apply_post_ops(stage: StageInfo, z: np.ndarray) -> np.ndarray:
    """Client-side non-linear step on one decoded pre-activation vector."""
    h = np.asarray(z, dtype=np.float64).reshape((1,) + tuple(stage.out_shape))
    for cfg in stage.post_ops:
        h, _ = _client_op(cfg).forward(h)
    return h.reshape(-1)


# -- traffic prediction -------------------------------------------------------------

def message_sizes(manifest: ModelManifest, params: RingParams) -> dict:
    """Exact encoded size of every message a session exchanges, by (direction, type)."""
    ct = bfv.ciphertext_size(params)
    desc = json.dumps(manifest.params, sort_keys=True, separators=(",", ":")).encode()
    pk = bfv._HEADER.size + 2 * params.N * 8

    def ct_msg(count):
        return HEADER_SIZE + 4 + count * (4 + ct)

    S = manifest.S
    up = {"ClientHello": [HEADER_SIZE + 2 + len(desc) + pk], "EncActivations": [], "Done": [HEADER_SIZE]}
    down = {"ServerHello": [HEADER_SIZE + len(manifest.to_bytes())], "EncPreactivations": []}
    for i, st in enumerate(manifest.stages):
        senders = 1 if i == 0 else S
        up["EncActivations"] += [ct_msg(st.plan.n_chunks)] * senders
        down["EncPreactivations"] += [ct_msg(st.plan.n_blocks)] * S
    return {"client_to_server": up, "server_to_client": down}


def predict_traffic(manifest: ModelManifest, params: RingParams, frame_overhead: int = 4) -> dict:
    """Bytes and message counts per direction and message type, including framing."""
    sizes = message_sizes(manifest, params)
    out = {}
    for direction, per_type in sizes.items():
        out[direction] = {name: {"messages": len(v), "bytes": sum(v) + frame_overhead * len(v)}
                          for name, v in per_type.items()}
    n_ct = sum(st.plan.n_chunks * (1 if i == 0 else manifest.S) + st.plan.n_blocks * manifest.S
               for i, st in enumerate(manifest.stages))
    out["ciphertexts"] = n_ct
    out["total_bytes"] = sum(e["bytes"] for d in ("client_to_server", "server_to_client")
                             for e in out[d].values())
    out["ciphertext_bytes"] = n_ct * bfv.ciphertext_size(params)
    out["bitpacked_ciphertext_bytes"] = n_ct * bfv.packed_ciphertext_size(params)
    return out


# -- server ------------------------------------------------------------------------

def _child_rngs(rng, count):
    if isinstance(rng, np.random.Generator):
        return [np.random.default_rng(int(s)) for s in rng.integers(0, 2**63 - 1, size=count)]
    return [SecureRng() for _ in range(count)]


@dataclass
class SampleState:
    """Quantized, packed and NTT-transformed weights of one sample theta_k."""

    index: int
    model: object  # SampledModel (server side only)
    weights_ntt: list  # per stage: (n_blocks, n_chunks, N) int64
    biases: list  # per stage: (n_blocks, N) residues mod t


def prepare_sample(model, manifest: ModelManifest, params: RingParams) -> SampleState:
    scale = manifest.scale
    weights_ntt, biases = [], []
    for st, (W, b) in zip(manifest.stages, model.lowered()):
        Wq = quantize_signed(W, scale.delta_w, scale.clamp_bound)
        bq = quantize_signed(b, scale.combined)
        packing = pack_layer_ints(Wq, bq, st.plan, params)
        lifted = centered(packing.blocks, params.t) % params.q
        weights_ntt.append(ntt_array(params, lifted))
        biases.append(packing.biases)
    return SampleState(model.index, model, weights_ntt, biases)


def homomorphic_matvec(params: RingParams, weights_ntt, cts) -> np.ndarray:
    """Sum over chunks of ``ct_chunk x block`` for every block; ``(n_blocks, 2, N)`` output.

    Equivalent to folding :func:`bfv.ct_pt_mul` and :func:`bfv.ct_add` over chunks.
    """
    q = params.q
    x_hat = ntt_array(params, cts)  # (n_chunks, 2, N)
    n_blocks, n_chunks, _ = weights_ntt.shape
    acc = np.zeros((n_blocks, 2, params.N), dtype=np.int64)
    for start in range(0, n_chunks, 256):
        w = weights_ntt[:, start:start + 256, None, :]
        prod = mulmod(w, x_hat[None, start:start + 256], q)
        acc = addmod(acc, prod.sum(axis=1) % q, q)
    return intt_array(params, acc)


def mask_plaintexts(biases: np.ndarray, plan: LayerPlan, t: int, rng) -> np.ndarray:
    """Fill every non-target coefficient with a uniform residue so only the
    requested inner products are readable after decryption."""
    out = rng.integers(0, t, size=biases.shape)
    for b in range(plan.n_blocks):
        tg = plan.block_targets(b)
        out[b, tg] = biases[b, tg]
    return out


class ServerSession:
    """Server half of one inference session."""

    def __init__(self, network: BayesianNetwork, params: RingParams, S: int = 4,
                 scale: FixedPointScale | None = None, rng=None, manifest: ModelManifest | None = None,
                 mask: bool = True, threads: bool = True, registry: SessionRegistry | None = None):
        self.network = network
        self.params = params
        self.S = S
        self.rng = SecureRng() if rng is None else rng
        self.manifest = manifest or build_manifest(network, params, S, scale)
        if self.manifest.S != S:
            raise ValueError("manifest S differs from session S")
        self.mask = mask
        self.threads = threads
        self.registry = registry
        self.session_id = None
        self.public_key = None
        self.samples: list[SampleState] = []
        self.layer = 0  # last completed layer
        self.phase = "awaiting-hello"
        self._seq_out = 0
        self._seq_in = -1
        self._pending: dict[int, np.ndarray] = {}
        self.slc_seconds: list[float] = []

    # sequence bookkeeping
    def _next_seq(self):
        s = self._seq_out
        self._seq_out += 1
        return s

    def _accept(self, msg):
        if self.session_id is not None and msg.session_id != self.session_id:
            raise ProtocolError(f"message for session {msg.session_id:#x}, expected {self.session_id:#x}")
        if msg.seq <= self._seq_in:
            raise ProtocolError(f"sequence number {msg.seq} does not increase (last {self._seq_in})")
        self._seq_in = msg.seq

    @property
    def theta(self):
        return [s.model for s in self.samples]

    def handle(self, msg) -> list:
        """Advance the state machine by one incoming message; returns replies."""
        if isinstance(msg, ClientHello):
            return [self.on_client_hello(msg)]
        if isinstance(msg, EncActivations):
            return self.on_activations(msg)
        if isinstance(msg, Done):
            self._accept(msg)
            if self.layer != self.manifest.n_layers:
                raise ProtocolError("Done before the last layer")
            self.phase = "done"
            return []
        if isinstance(msg, ErrorMessage):
            self.phase = "failed"
            raise ProtocolError(f"client aborted: {msg.text}")
        raise ProtocolError(f"unexpected {type(msg).__name__} from client")

    def on_client_hello(self, msg: ClientHello) -> ServerHello:
        if self.phase != "awaiting-hello":
            raise ProtocolError("duplicate ClientHello")
        self._accept(msg)
        mine = params_descriptor(self.params)
        theirs = {k: msg.params.get(k) for k in ("N", "q", "t")}
        if theirs != {k: mine[k] for k in ("N", "q", "t")}:
            raise ParameterMismatch(f"client parameters {theirs} do not match server {mine}")
        try:
            self.public_key = bfv.deserialize_public_key(msg.public_key, self.params)
        except bfv.SerializationError as exc:
            raise ParameterMismatch(f"bad public key: {exc}") from exc
        if self.registry is not None:
            self.registry.claim(msg.session_id)
        self.session_id = msg.session_id
        # fresh theta for every session
        models = [sample_model(self.network, self.rng, k) for k in range(self.S)]
        self.samples = [prepare_sample(m, self.manifest, self.params) for m in models]
        self.phase = "awaiting-activations"
        return ServerHello(self.session_id, self._next_seq(), self.manifest)

    def on_activations(self, msg: EncActivations) -> list:
        if self.phase != "awaiting-activations":
            raise ProtocolError(f"EncActivations while {self.phase}")
        self._accept(msg)
        i = self.layer + 1
        if msg.layer != i:
            raise ProtocolError(f"activations for layer {msg.layer}, expected layer {i}")
        plan = self.manifest.stages[i - 1].plan
        if i == 1:
            if msg.sample != BROADCAST:
                raise ProtocolError("layer 1 expects one broadcast ciphertext set")
        elif not 0 <= msg.sample < self.S or msg.sample in self._pending:
            raise ProtocolError(f"unexpected sample index {msg.sample} at layer {i}")
        if len(msg.ciphertexts) != plan.n_chunks:
            raise ProtocolError(f"expected {plan.n_chunks} ciphertexts, got {len(msg.ciphertexts)}")
        arrs = []
        for raw in msg.ciphertexts:
            ct = bfv.deserialize(raw, self.params)
            if ct.level != bfv.FRESH:
                raise ProtocolError("incoming ciphertext already multiplied")
            arrs.append(ct.to_array())
        cts = np.stack(arrs)
        if i == 1:
            inputs = {k: cts for k in range(self.S)}
        else:
            self._pending[msg.sample] = cts
            if len(self._pending) < self.S:
                return []
            inputs, self._pending = self._pending, {}
        return self.slc_step(i, inputs)

    def _slc_sample(self, i, k, cts, rng):
        state = self.samples[k]
        plan = self.manifest.stages[i - 1].plan
        acc = homomorphic_matvec(self.params, state.weights_ntt[i - 1], cts)
        plain = state.biases[i - 1]
        if self.mask:
            plain = mask_plaintexts(plain, plan, self.params.t, rng)
        out = addmod(acc, bfv.encrypt_array(self.public_key, plain, rng), self.params.q)
        return tuple(bfv.serialize_array(self.params, c, bfv.MULTIPLIED) for c in out)

    def slc_step(self, i: int, inputs: dict) -> list:
        """Evaluate layer ``i`` for all samples; one EncPreactivations per sample, in order."""
        if set(inputs) != set(range(self.S)):
            raise ProtocolError("SLC needs one ciphertext set per sample")
        t0 = time.perf_counter()
        rngs = _child_rngs(self.rng, self.S)
        if self.threads and self.S > 1:
            with ThreadPoolExecutor(max_workers=self.S) as pool:
                results = list(pool.map(lambda k: self._slc_sample(i, k, inputs[k], rngs[k]), range(self.S)))
        else:
            results = [self._slc_sample(i, k, inputs[k], rngs[k]) for k in range(self.S)]
        self.slc_seconds.append(time.perf_counter() - t0)
        self.layer = i
        if i == self.manifest.n_layers:
            self.phase = "awaiting-done"
        return [EncPreactivations(self.session_id, self._next_seq(), i, k, results[k]) for k in range(self.S)]


# -- client ---------------------------------------------------------------------------

class ClientSession:
    """Client half of one inference session; holds the secret key and plaintext activations."""

    def __init__(self, x, params: RingParams, keys=None, rng=None, session_id: int | None = None):
        self.params = params
        self.rng = SecureRng() if rng is None else rng
        self.public_key, self.secret_key = keys if keys is not None else bfv.keygen(params, self.rng)
        self.session_id = secrets.randbits(64) if session_id is None else session_id
        self.x = np.asarray(x, dtype=np.float64)
        self.manifest = None
        self.activations = None  # list of S vectors once layer 1 returns
        self.outputs = None
        self.layer = 0
        self.phase = "init"
        self._seq_out = 0
        self._seq_in = -1
        self._pending: dict[int, EncPreactivations] = {}
        self.saturation = SaturationCounter()

    def _next_seq(self):
        s = self._seq_out
        self._seq_out += 1
        return s

    def _accept(self, msg):
        if msg.session_id != self.session_id:
            raise ProtocolError("reply for a different session")
        if msg.seq <= self._seq_in:
            raise ProtocolError(f"sequence number {msg.seq} does not increase (last {self._seq_in})")
        self._seq_in = msg.seq

    def hello(self) -> ClientHello:
        if self.phase != "init":
            raise ProtocolError("hello already sent")
        self.phase = "awaiting-server-hello"
        return ClientHello(self.session_id, self._next_seq(), params_descriptor(self.params),
                           bfv.serialize_public_key(self.public_key))

    def on_server_hello(self, msg: ServerHello) -> list:
        if self.phase != "awaiting-server-hello":
            raise ProtocolError(f"ServerHello while {self.phase}")
        self._accept(msg)
        m = msg.manifest
        mine = params_descriptor(self.params)
        if {k: m.params.get(k) for k in ("N", "q", "t")} != {k: mine[k] for k in ("N", "q", "t")}:
            raise ParameterMismatch("server manifest uses different ring parameters")
        if self.x.size != math.prod(m.input_shape):
            raise ProtocolError(f"input has {self.x.size} values, model expects {m.input_shape}")
        m.scale.check(self.params.t)
        self.manifest = m
        self.phase = "awaiting-preactivations"
        return [self._encrypt(0, BROADCAST, self.x)]

    def _encrypt(self, stage_index, sample, a) -> EncActivations:
        st = self.manifest.stages[stage_index]
        plain = pack_input_chunks(a, st.plan, self.manifest.scale, self.params, self.saturation)
        cts = bfv.encrypt_array(self.public_key, plain, self.rng)
        raw = tuple(bfv.serialize_array(self.params, c) for c in cts)
        return EncActivations(self.session_id, self._next_seq(), stage_index + 1, sample, raw)

    def decode(self, msg: EncPreactivations) -> np.ndarray:
        """Decrypt and decode one sample's pre-activations for the current layer."""
        st = self.manifest.stages[msg.layer - 1]
        if len(msg.ciphertexts) != st.plan.n_blocks:
            raise ProtocolError(f"expected {st.plan.n_blocks} ciphertexts, got {len(msg.ciphertexts)}")
        cts = np.stack([bfv.deserialize(raw, self.params).to_array() for raw in msg.ciphertexts])
        plain = bfv.decrypt_array(self.secret_key, cts)
        return extract_layer(plain, st.plan, self.manifest.scale, self.params.t)

    def on_preactivations(self, msg: EncPreactivations) -> list:
        if self.phase != "awaiting-preactivations":
            raise ProtocolError(f"EncPreactivations while {self.phase}")
        self._accept(msg)
        if msg.layer != self.layer + 1:
            raise ProtocolError(f"pre-activations for layer {msg.layer}, expected {self.layer + 1}")
        if not 0 <= msg.sample < self.manifest.S or msg.sample in self._pending:
            raise ProtocolError(f"unexpected sample index {msg.sample}")
        self._pending[msg.sample] = msg
        if len(self._pending) < self.manifest.S:
            return []
        msgs, self._pending = [self._pending[k] for k in range(self.manifest.S)], {}
        return self.snc_step(msgs[0].layer, msgs)

    def snc_step(self, i: int, msgs) -> list:
        """Decrypt, decode and apply the layer-``i`` non-linear ops for every sample;
        re-encrypt for layer ``i+1`` or keep the final outputs."""
        st = self.manifest.stages[i - 1]
        acts = [apply_post_ops(st, self.decode(m)) for m in msgs]
        self.layer = i
        if i < self.manifest.n_layers:
            self.activations = acts
            return [self._encrypt(i, k, a) for k, a in enumerate(acts)]
        self.outputs = [softmax(a) for a in acts]
        self.phase = "finished"
        return [Done(self.session_id, self._next_seq())]

    def finalize(self):
        """Ensemble probabilities and label (lowest index wins ties)."""
        if self.outputs is None:
            raise ProtocolError("finalize called before the last layer")
        p = sum(self.outputs[1:], self.outputs[0]) / len(self.outputs)
        return p, int(np.argmax(p))


# -- drivers ------------------------------------------------------------------------------

def session_init(x, network: BayesianNetwork, params: RingParams, S: int = 4, *,
                 client_rng=None, server_rng=None, keys=None, scale=None, manifest=None, **server_kw):
    """Run the hello exchange in-process; returns ``(client, server, first_messages)``."""
    client = ClientSession(x, params, keys=keys, rng=client_rng)
    server = ServerSession(network, params, S, scale=scale, rng=server_rng, manifest=manifest, **server_kw)
    hello = server.on_client_hello(client.hello())
    first = client.on_server_hello(hello)
    return client, server, first


def run_local(client: ClientSession, server: ServerSession, first_messages, codec: bool = True):
    """Drive an initialized pair to completion without a transport.

    With ``codec=True`` every message is encoded and decoded on the way, and the
    byte counts are returned by direction.
    """
    sent = {"client_to_server": 0, "server_to_client": 0}

    def hop(msg, direction):
        if not codec:
            return msg
        data = encode_message(msg)
        sent[direction] += len(data)
        return decode_message(data)

    queue = list(first_messages)
    while queue:
        replies = [r for msg in queue for r in server.handle(hop(msg, "client_to_server"))]
        queue = [m for r in replies for m in client.on_preactivations(hop(r, "server_to_client"))]
    p, t = client.finalize()
    return p, t, sent


@dataclass
class InferenceResult:
    probabilities: np.ndarray
    label: int
    seconds: float
    bytes_sent: int
    bytes_received: int
    by_type: dict
    layer_seconds: list
    session_id: int
    manifest: ModelManifest | None = None


def run_inference(channel, x, params: RingParams, keys=None, rng=None, session_id=None) -> InferenceResult:
    """Client driver over a message channel (``send(msg)``, ``recv() -> msg``)."""
    t0 = time.perf_counter()
    client = ClientSession(x, params, keys=keys, rng=rng, session_id=session_id)
    try:
        channel.send(client.hello())
        reply = channel.recv()
        if isinstance(reply, ErrorMessage):
            raise ProtocolError(f"server rejected session: {reply.text}")
        if not isinstance(reply, ServerHello):
            raise ProtocolError(f"expected ServerHello, got {type(reply).__name__}")
        for m in client.on_server_hello(reply):
            channel.send(m)
        layer_seconds = []
        t_layer = time.perf_counter()
        while client.phase != "finished":
            msg = channel.recv()
            if isinstance(msg, ErrorMessage):
                raise ProtocolError(f"server aborted: {msg.text}")
            if not isinstance(msg, EncPreactivations):
                raise ProtocolError(f"unexpected {type(msg).__name__} from server")
            out = client.on_preactivations(msg)
            if out:
                now = time.perf_counter()
                layer_seconds.append(now - t_layer)
                t_layer = now
            for m in out:
                channel.send(m)
    except ProtocolError as exc:
        try:
            channel.send(ErrorMessage(client.session_id, client._next_seq(), str(exc)))
        except Exception:
            pass
        raise
    p, t = client.finalize()
    stats = channel.stats() if hasattr(channel, "stats") else {"sent": 0, "received": 0, "by_type": {}}
    return InferenceResult(p, t, time.perf_counter() - t0, stats["sent"], stats["received"],
                           stats["by_type"], layer_seconds, client.session_id, client.manifest)


def serve_session(channel, make_session, on_theta=None):
    """Server driver: answer one client until ``Done``; returns the finished session.

    ``make_session()`` builds a fresh :class:`ServerSession`; ``on_theta`` (debug)
    receives ``(session_id, theta)`` after sampling.
    """
    session = make_session()
    while session.phase not in ("done", "failed"):
        msg = channel.recv()
        try:
            replies = session.handle(msg)
        except ProtocolError as exc:
            if not isinstance(msg, ErrorMessage):
                channel.send(ErrorMessage(getattr(msg, "session_id", 0), session._next_seq(), str(exc)))
            raise
        if isinstance(msg, ClientHello) and on_theta is not None:
            on_theta(session.session_id, session.theta)
        for r in replies:
            channel.send(r)
    return session


# -- plaintext mirrors of the encrypted pipeline ------------------------------------------

def quantized_forward(models, manifest: ModelManifest, x) -> tuple[np.ndarray, int, list]:
    """Exactly what the encrypted protocol computes, in the clear.

    Inputs and weights are quantized the same way, the integer inner products are
    reduced mod t (centered) and decoded. Returns ``(p, label, per-sample outputs)``.
    """
    scale, t = manifest.scale, int(manifest.params["t"])
    outs = []
    for model in models:
        a = np.asarray(x, dtype=np.float64).ravel()
        lowered = model.lowered()
        for i, (st, (W, b)) in enumerate(zip(manifest.stages, lowered)):
            aq = quantize_signed(a, scale.delta_a, scale.clamp_bound)
            Wq = quantize_signed(W, scale.delta_w, scale.clamp_bound)
            bq = quantize_signed(b, scale.combined)
            zq = centered(np.mod(Wq @ aq + bq, t), t)
            a = apply_post_ops(st, zq / scale.combined)
        outs.append(softmax(a))
    p = sum(outs[1:], outs[0]) / len(outs)
    return p, int(np.argmax(p)), outs


def check_model_headroom(stats: dict, scale: FixedPointScale, t: int, margin: float = 1.25):
    """Validate recorded pre-activation ranges against the plaintext modulus."""
    for i, z in enumerate(stats.get("max_abs_z", [])):
        try:
            check_headroom(z, scale, t, margin)
        except Exception as exc:
            raise type(exc)(f"layer {i + 1}: {exc}") from exc


__all__ = [
    "BROADCAST", "ClientHello", "ClientSession", "Done", "EncActivations", "EncPreactivations",
    "ErrorMessage", "InferenceResult", "MESSAGE_NAMES", "MESSAGE_TYPES", "ModelManifest",
    "ParameterMismatch", "ProtocolError", "ServerHello", "ServerSession", "SessionRegistry", "StageInfo",
    "apply_post_ops", "build_manifest", "check_model_headroom", "decode_message", "encode_message",
    "homomorphic_matvec", "mask_plaintexts", "message_sizes", "predict_traffic", "prepare_sample",
    "quantized_forward", "run_inference", "run_local", "serve_session", "session_init",
]
