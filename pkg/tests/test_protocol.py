"""Session state machines, message codec and the confidentiality partition."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hebnn import bfv
from hebnn import protocol as P
from hebnn.bnn import Activation, BayesianNetwork, VariationalDense, forward_plain, sample_model, softmax
from hebnn.bnn.network import SampledModel
from hebnn.encoding import FixedPointScale, plan_layer, quantize_signed
from hebnn.ring import centered, get_preset

TOY = get_preset("toy")
DEFAULT = get_preset("default")


def small_net(sizes=(12, 8, 3), rho=-4.0, seed=0, activation="relu"):
    net = BayesianNetwork.mlp(list(sizes), activation, rho_init=rho, seed=seed)
    for layer in net.linear_layers:
        layer.mu_W *= 0.5
    return net


def run(x, net, params=TOY, S=4, seed=0, **kw):
    c, s, first = P.session_init(x, net, params, S, client_rng=np.random.default_rng(seed),
                                 server_rng=np.random.default_rng(seed + 1000), **kw)
    p, t, sent = P.run_local(c, s, first)
    return c, s, p, t, sent


def x_for(net, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, math.prod(net.input_shape))


class TestCodec:
    ids = st.integers(0, 2**64 - 1)
    seqs = st.integers(0, 2**32 - 1)
    small = st.integers(0, 0xFFFF)
    blobs = st.lists(st.binary(max_size=64), max_size=5).map(tuple)

    @given(ids, seqs, small, small, blobs)
    def test_ciphertext_messages_roundtrip(self, sid, seq, layer, sample, cts):
        for cls in (P.EncActivations, P.EncPreactivations):
            msg = cls(sid, seq, layer, sample, cts)
            assert P.decode_message(P.encode_message(msg)) == msg

    @given(ids, seqs, st.text(max_size=40))
    def test_control_messages_roundtrip(self, sid, seq, text):
        for msg in (P.Done(sid, seq), P.ErrorMessage(sid, seq, text)):
            assert P.decode_message(P.encode_message(msg)) == msg

    def test_handshake_transcript_roundtrips(self):
        net = small_net()
        client = P.ClientSession(x_for(net), TOY, rng=np.random.default_rng(0))
        server = P.ServerSession(net, TOY, 4, rng=np.random.default_rng(1))
        hello = client.hello()
        assert P.decode_message(P.encode_message(hello)) == hello
        reply = server.on_client_hello(P.decode_message(P.encode_message(hello)))
        back = P.decode_message(P.encode_message(reply))
        assert back == reply
        assert P.encode_message(back) == P.encode_message(reply)

    def test_header_layout(self):
        data = P.encode_message(P.EncActivations(0x0102030405060708, 9, 2, P.BROADCAST, ()))
        assert data[0] == P.ENC_ACTIVATIONS and data[1] == P.PROTOCOL_VERSION
        assert data[2:10] == bytes(range(1, 9))
        assert data[10:14] == (9).to_bytes(4, "big")
        assert data[14:16] == (2).to_bytes(2, "big") and data[16:18] == b"\xff\xff"
        assert int.from_bytes(data[18:22], "big") == len(data) - P.HEADER_SIZE == 4

    def test_rejects_bad_input(self):
        good = P.encode_message(P.Done(1, 2))
        with pytest.raises(P.ProtocolError):
            P.decode_message(good[:5])
        with pytest.raises(P.ProtocolError):
            P.decode_message(bytes([good[0], 99]) + good[2:])
        with pytest.raises(P.ProtocolError):
            P.decode_message(bytes([77]) + good[1:])
        with pytest.raises(P.ProtocolError):
            P.decode_message(good + b"x")
        msg = P.encode_message(P.EncActivations(1, 1, 1, 0, (b"abc",)))
        with pytest.raises(P.ProtocolError):
            P.decode_message(msg[:-1][:18] + (len(msg) - P.HEADER_SIZE - 1).to_bytes(4, "big") + msg[22:-1])

    def test_manifest_rejects_unknown_op(self):
        net = small_net()
        m = P.build_manifest(net, TOY, 2)
        d = m.to_dict()
        d["stages"][0]["post_ops"] = [{"kind": "activation", "fn": "relu"}, {"kind": "softsign"}]
        import json
        with pytest.raises(P.ProtocolError):
            P.ModelManifest.from_bytes(json.dumps(d).encode())


class TestConfidentiality:
    ALLOWED = {"int", "dict", "bytes", "tuple", "str", "ModelManifest", "'ModelManifest'"}

    def test_message_fields_are_plain(self):
        for cls in P.MESSAGE_TYPES:
            for f in dataclasses.fields(cls):
                assert f.type in self.ALLOWED, (cls.__name__, f.name, f.type)

    def test_manifest_fields_hold_no_tensors(self):
        types = {f.name: f.type for f in dataclasses.fields(P.ModelManifest)}
        assert types == {"params": "dict", "scale": "FixedPointScale", "S": "int",
                         "input_shape": "tuple", "num_classes": "int", "stages": "tuple"}
        net = small_net()
        d = P.build_manifest(net, TOY, 4).to_dict()

        def walk(v):
            if isinstance(v, dict):
                for x in v.values():
                    walk(x)
            elif isinstance(v, (list, tuple)):
                for x in v:
                    walk(x)
            else:
                assert isinstance(v, (int, str)) or v in (8.0, 3.2), v
        walk(d)

    def test_wire_carries_no_secrets(self):
        net = small_net()
        transcript = []
        c = P.ClientSession(x_for(net), TOY, rng=np.random.default_rng(0))
        s = P.ServerSession(net, TOY, 4, rng=np.random.default_rng(1))
        queue = [c.hello()]
        transcript.append(("up", queue[0]))
        hello = s.on_client_hello(queue[0])
        transcript.append(("down", hello))
        queue = c.on_server_hello(hello)
        while queue:
            replies = []
            for m in queue:
                transcript.append(("up", m))
                replies += s.handle(m)
            queue = []
            for r in replies:
                transcript.append(("down", r))
                queue += c.on_preactivations(r)
        sk_bytes = c.secret_key.s.coeffs.astype("<u8").tobytes()
        weights = [arr.astype("<f8").tobytes()[:16] for layer in net.linear_layers
                   for arr in layer.params().values()]
        weights += [W.astype("<f8").tobytes()[:16] for m in s.theta for W, _ in m.weights]
        for direction, msg in transcript:
            data = P.encode_message(msg)
            assert sk_bytes not in data
            if direction == "down":
                assert not any(w in data for w in weights)
                assert isinstance(msg, (P.ServerHello, P.EncPreactivations))
            else:
                assert isinstance(msg, (P.ClientHello, P.EncActivations, P.Done))
            if isinstance(msg, (P.EncActivations, P.EncPreactivations)):
                for raw in msg.ciphertexts:
                    bfv.deserialize(raw, TOY)  # every payload entry is a well-formed ciphertext

    def test_session_states_partition(self):
        net = small_net()
        c, s, _, _, _ = run(x_for(net), net)
        for v in vars(s).values():
            assert not isinstance(v, bfv.SecretKey)
        assert not any(isinstance(v, np.ndarray) for v in vars(s).values())
        for v in vars(c).values():
            assert not isinstance(v, (SampledModel, BayesianNetwork))
            if isinstance(v, list):
                assert not any(isinstance(e, SampledModel) for e in v)


class TestSessionInit:
    def test_fresh_theta_per_session(self):
        net = small_net()
        _, s1, _, _, _ = run(x_for(net), net, seed=1)
        _, s2, _, _, _ = run(x_for(net), net, seed=2)
        assert not np.array_equal(s1.theta[0].weights[0][0], s2.theta[0].weights[0][0])
        _, s3, _, _, _ = run(x_for(net), net, seed=1)
        assert np.array_equal(s1.theta[0].weights[0][0], s3.theta[0].weights[0][0])

    def test_transcript_structure_is_identical(self):
        net = small_net()
        _, _, p1, _, sent1 = run(x_for(net), net, seed=1)
        _, _, p2, _, sent2 = run(x_for(net), net, seed=2)
        assert sent1 == sent2
        assert not np.array_equal(p1, p2)

    def test_replayed_session_id_rejected(self):
        net = small_net()
        reg = P.SessionRegistry()
        client = P.ClientSession(x_for(net), TOY, rng=np.random.default_rng(0), session_id=42)
        hello = client.hello()
        P.ServerSession(net, TOY, 2, registry=reg).on_client_hello(hello)
        with pytest.raises(P.ProtocolError, match="stale"):
            P.ServerSession(net, TOY, 2, registry=reg).on_client_hello(hello)

    def test_duplicate_hello_rejected(self):
        net = small_net()
        client = P.ClientSession(x_for(net), TOY, rng=np.random.default_rng(0))
        server = P.ServerSession(net, TOY, 2)
        hello = client.hello()
        server.on_client_hello(hello)
        with pytest.raises(P.ProtocolError):
            server.on_client_hello(dataclasses.replace(hello, seq=5))

    def test_parameter_mismatch(self):
        net = small_net()
        client = P.ClientSession(x_for(net), TOY, rng=np.random.default_rng(0))
        server = P.ServerSession(net, DEFAULT, 2)
        with pytest.raises(P.ParameterMismatch):
            server.on_client_hello(client.hello())

    def test_input_width_mismatch(self):
        net = small_net()
        client = P.ClientSession(np.zeros(5), TOY, rng=np.random.default_rng(0))
        server = P.ServerSession(net, TOY, 2)
        with pytest.raises(P.ProtocolError):
            client.on_server_hello(server.on_client_hello(client.hello()))


class TestSLC:
    def setup_session(self, net, S=4, params=TOY, **kw):
        c, s, first = P.session_init(x_for(net), net, params, S, client_rng=np.random.default_rng(0),
                                     server_rng=np.random.default_rng(1), **kw)
        return c, s, first

    def test_identity_layer(self):
        n = 10
        net = BayesianNetwork((n,), [VariationalDense(n, n)], mode="normal")
        layer = net.linear_layers[0]
        layer.mu_W[...] = np.eye(n)
        layer.mu_b[...] = 0
        m = P.build_manifest(net, TOY, 1)
        stage = dataclasses.replace(m.stages[0], plan=plan_layer(n, n, TOY.N, 1))
        m = dataclasses.replace(m, stages=(stage,))
        assert m.stages[0].plan.chunk_width == 1 and m.stages[0].plan.n_chunks == n
        x = np.random.default_rng(3).uniform(-1, 1, n)
        c, s, first = P.session_init(x, net, TOY, 1, manifest=m, client_rng=np.random.default_rng(0))
        (reply,) = s.handle(first[0])
        z = c.decode(reply)
        assert np.all(np.abs(z - x) <= 0.5 / 64 + 1e-12)

    def test_point_mass_posterior(self):
        net = small_net(rho=-40.0)
        c, s, first = self.setup_session(net)
        replies = s.handle(first[0])
        zs = [c.decode(r) for r in replies]
        for z in zs[1:]:
            assert np.array_equal(z, zs[0])

    def test_random_layer_per_sample_oracle(self):
        net = small_net((30, 9, 4), rho=-3.0)
        c, s, first = self.setup_session(net, params=DEFAULT)
        replies = s.handle(first[0])
        assert [r.sample for r in replies] == [0, 1, 2, 3]
        x = c.x
        for r, model in zip(replies, s.theta):
            z = c.decode(r)
            W, b = model.lowered()[0]
            Wq, aq = quantize_signed(W, 64, 8.0), quantize_signed(x, 64, 8.0)
            bq = quantize_signed(b, 4096)
            assert np.array_equal(z * 4096, Wq @ aq + bq)
            tol = (np.abs(W).sum(axis=1) + np.abs(x).sum()) / 128 + 1 / 8192 + 30 / 128**2
            assert np.all(np.abs(z - (W @ x + b)) <= tol)

    def test_matvec_equals_scheme_operations(self):
        rng = np.random.default_rng(0)
        pk, sk = bfv.keygen(TOY, rng)
        net = small_net((20, 6, 3))
        m = P.build_manifest(net, TOY, 1, chunking="none")
        m = dataclasses.replace(m, stages=(dataclasses.replace(m.stages[0], plan=plan_layer(20, 6, TOY.N, 7)),)
                                + m.stages[1:])
        state = P.prepare_sample(sample_model(net, rng), m, TOY)
        plan = m.stages[0].plan
        from hebnn.encoding import pack_input_chunks, quantize_layer
        cts = bfv.encrypt_array(pk, pack_input_chunks(x_for(net)[:20], plan, m.scale, TOY), rng)
        fast = P.homomorphic_matvec(TOY, state.weights_ntt[0], cts)
        W, b = state.model.lowered()[0]
        packing = quantize_layer(W, b, plan, m.scale, TOY)
        for bi in range(plan.n_blocks):
            acc = None
            for ci in range(plan.n_chunks):
                term = bfv.ct_pt_mul(bfv.Ciphertext.from_array(TOY, cts[ci]),
                                     bfv.Plaintext.from_array(TOY, packing.blocks[bi, ci]))
                acc = term if acc is None else bfv.ct_add(acc, term)
            assert np.array_equal(acc.to_array(), fast[bi])

    def test_masking_hides_other_coefficients(self):
        net = small_net((12, 3, 2), rho=-40.0)
        plain_views = {}
        for mask in (False, True):
            c, s, first = self.setup_session(net, S=1, mask=mask)
            (reply,) = s.handle(first[0])
            cts = np.stack([bfv.deserialize(r, TOY).to_array() for r in reply.ciphertexts])
            plain_views[mask] = bfv.decrypt_array(c.secret_key, cts)
        plan = s.manifest.stages[0].plan
        targets = plan.block_targets(0)
        other = np.setdiff1d(np.arange(TOY.N), targets)
        assert np.array_equal(plain_views[False][0, targets], plain_views[True][0, targets])
        # unmasked output exposes partial inner products next to the targets
        assert np.count_nonzero(plain_views[False][0, other]) > 0
        assert np.mean(plain_views[True][0, other] == plain_views[False][0, other]) < 0.01

    def test_wrong_layer(self):
        net = small_net()
        c, s, first = self.setup_session(net)
        with pytest.raises(P.ProtocolError, match="layer"):
            s.handle(dataclasses.replace(first[0], layer=2))

    def test_layer_one_needs_broadcast(self):
        net = small_net()
        c, s, first = self.setup_session(net)
        with pytest.raises(P.ProtocolError, match="broadcast"):
            s.handle(dataclasses.replace(first[0], sample=0))

    def test_sample_multiplicity(self):
        net = small_net()
        c, s, first = self.setup_session(net)
        replies = s.handle(first[0])
        out = []
        for r in replies:
            out += c.on_preactivations(r)
        assert s.handle(out[0]) == []
        with pytest.raises(P.ProtocolError, match="sample"):
            s.handle(dataclasses.replace(out[0], seq=out[-1].seq + 1))

    def test_chunk_count(self):
        net = small_net()
        c, s, first = self.setup_session(net)
        with pytest.raises(P.ProtocolError, match="ciphertexts"):
            s.handle(dataclasses.replace(first[0], ciphertexts=first[0].ciphertexts * 2))

    def test_level_violation(self):
        net = small_net()
        c, s, first = self.setup_session(net)
        multiplied = tuple(bfv.serialize_array(TOY, bfv.deserialize(r, TOY).to_array(), bfv.MULTIPLIED)
                           for r in first[0].ciphertexts)
        with pytest.raises(P.ProtocolError, match="multiplied"):
            s.handle(dataclasses.replace(first[0], ciphertexts=multiplied))

    def test_sequence_must_increase(self):
        net = small_net()
        c, s, first = self.setup_session(net)
        with pytest.raises(P.ProtocolError, match="sequence"):
            s.handle(dataclasses.replace(first[0], seq=0))

    def test_threads_do_not_change_results(self):
        net = small_net()
        outs = []
        for threads in (False, True):
            c, s, p, t, _ = run(x_for(net), net, threads=threads)
            outs.append(c.outputs)
        for a, b in zip(*outs):
            assert np.array_equal(a, b)


class TestSNC:
    def stage(self, fn, n=6):
        return P.StageInfo(plan_layer(4, n, 64), (4,), (n,), ({"kind": "activation", "fn": fn},))

    def test_identity(self):
        z = np.array([0.5, -1.25, 3.0, 0.0, 2.0, -7.0])
        assert np.array_equal(P.apply_post_ops(self.stage("identity"), z), z)

    def test_relu_zeroes_negatives_exactly(self):
        z = np.array([-0.5, 1.25, -3.0, 0.0, 2.0, -1e-9])
        out = P.apply_post_ops(self.stage("relu"), z)
        assert out.tolist() == [0.0, 1.25, 0.0, 0.0, 2.0, 0.0]

    def test_sigmoid_matches_scalar(self):
        rng = np.random.default_rng(0)
        for _ in range(4):
            z = rng.normal(0, 3, 6)
            out = P.apply_post_ops(self.stage("sigmoid"), z)
            want = [1 / (1 + math.exp(-v)) for v in z]
            np.testing.assert_allclose(out, want, rtol=0, atol=1e-12)

    def test_max_pool_regrouping(self):
        st_ = P.StageInfo(plan_layer(4, 8, 64), (4,), (2, 2, 2), ({"kind": "pool", "mode": "max", "size": 2},))
        z = np.arange(8.0)
        assert P.apply_post_ops(st_, z).tolist() == [3.0, 7.0]

    def test_identity_reencryption_roundtrip(self):
        net = BayesianNetwork((6,), [VariationalDense(6, 6), Activation("identity"), VariationalDense(6, 2)],
                              mode="normal")
        c, s, first = P.session_init(x_for(net), net, TOY, 1, client_rng=np.random.default_rng(0))
        (reply,) = s.handle(first[0])
        (nxt,) = c.on_preactivations(reply)
        a = c.activations[0]
        cts = np.stack([bfv.deserialize(r, TOY).to_array() for r in nxt.ciphertexts])
        back = centered(bfv.decrypt_array(c.secret_key, cts)[0, :6], TOY.t) / 64
        assert np.all(np.abs(back - a) <= 0.5 / 64 + 1e-12)

    def test_rejects_unknown_sample(self):
        net = small_net()
        c, s, first = P.session_init(x_for(net), net, TOY, 2, client_rng=np.random.default_rng(0))
        r = s.handle(first[0])[0]
        with pytest.raises(P.ProtocolError):
            c.on_preactivations(dataclasses.replace(r, sample=7))


class TestFinalize:
    def test_single_sample(self):
        net = small_net()
        c, s, p, t, _ = run(x_for(net), net, S=1)
        assert np.array_equal(p, c.outputs[0])
        assert t == int(np.argmax(c.outputs[0]))

    def test_before_last_layer(self):
        net = small_net()
        c = P.ClientSession(x_for(net), TOY)
        with pytest.raises(P.ProtocolError):
            c.finalize()

    def test_agreeing_samples(self):
        net = small_net(rho=-40.0)
        c, s, p, t, _ = run(x_for(net), net)
        labels = {int(np.argmax(o)) for o in c.outputs}
        assert labels == {t}

    def test_matches_quantized_oracle_exactly(self):
        net = small_net((12, 8, 5, 3), rho=-3.0)
        c, s, p, t, _ = run(x_for(net), net)
        pq, tq, outs = P.quantized_forward(s.theta, s.manifest, c.x)
        assert np.array_equal(p, pq) and t == tq

    def test_close_to_float_ensemble(self):
        net = small_net((12, 8, 3), rho=-3.0)
        c, s, p, t, _ = run(x_for(net), net)
        p_plain = sum(forward_plain(m, c.x) for m in s.theta) / 4
        assert np.abs(p - p_plain).max() <= 5e-2


class TestProperties:
    def test_per_sample_independence(self):
        net = small_net((12, 8, 3), rho=-3.0)
        base_c, base_s, p0, _, _ = run(x_for(net), net)
        perm = [2, 0, 3, 1]
        c, s, first = P.session_init(x_for(net), net, TOY, 4, client_rng=np.random.default_rng(0),
                                     server_rng=np.random.default_rng(1000))
        s.samples = [s.samples[k] for k in perm]
        P.run_local(c, s, first)
        unpermuted = [None] * 4
        for pos, k in enumerate(perm):
            unpermuted[k] = c.outputs[pos]
        for a, b in zip(unpermuted, base_c.outputs):
            assert np.array_equal(a, b)
        p1, _ = c.finalize()
        np.testing.assert_allclose(p1, p0, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("sizes,S", [((12, 8, 3), 4), ((12, 8, 5, 3), 2), ((12, 3), 3)])
    def test_round_count_and_bytes(self, sizes, S):
        net = small_net(sizes)
        c = P.ClientSession(x_for(net), TOY, rng=np.random.default_rng(0))
        s = P.ServerSession(net, TOY, S, rng=np.random.default_rng(1))
        counts = {}
        sizes_seen = {"client_to_server": {}, "server_to_client": {}}

        def note(direction, msg):
            name = P.MESSAGE_NAMES[msg.tag]
            counts[(direction, name)] = counts.get((direction, name), 0) + 1
            sizes_seen[direction].setdefault(name, []).append(len(P.encode_message(msg)))

        hello = c.hello()
        note("client_to_server", hello)
        sh = s.on_client_hello(hello)
        note("server_to_client", sh)
        queue = c.on_server_hello(sh)
        while queue:
            replies = []
            for m in queue:
                note("client_to_server", m)
                replies += s.handle(m)
            queue = []
            for r in replies:
                note("server_to_client", r)
                queue += c.on_preactivations(r)
        n = len(net.linear_layers)
        assert counts[("server_to_client", "EncPreactivations")] == n * S
        assert counts[("client_to_server", "EncActivations")] == 1 + (n - 1) * S
        predicted = P.message_sizes(s.manifest, TOY)
        for direction in predicted:
            for name, sizes_ in predicted[direction].items():
                assert sorted(sizes_seen[direction].get(name, [])) == sorted(sizes_)

    def test_one_layer_one_hot(self):
        n_in, n_out = 6, 4
        net = BayesianNetwork((n_in,), [VariationalDense(n_in, n_out, rng=np.random.default_rng(5))],
                              mode="normal")
        W, b = net.linear_layers[0].mu_W, net.linear_layers[0].mu_b
        for j in range(n_in):
            x = np.eye(n_in)[j]
            _, _, p, t, _ = run(x, net, S=1)
            assert t == int(np.argmax(W[:, j] + b))
            np.testing.assert_allclose(p, softmax(W[:, j] + b), atol=2e-2)

    def test_done_before_last_layer(self):
        net = small_net()
        c, s, first = P.session_init(x_for(net), net, TOY, 2, client_rng=np.random.default_rng(0))
        s.handle(first[0])
        with pytest.raises(P.ProtocolError):
            s.handle(P.Done(c.session_id, 99))

    def test_predict_traffic_totals(self):
        net = small_net()
        m = P.build_manifest(net, TOY, 4)
        tr = P.predict_traffic(m, TOY)
        assert tr["ciphertext_bytes"] == tr["ciphertexts"] * bfv.ciphertext_size(TOY)
        assert tr["bitpacked_ciphertext_bytes"] < tr["ciphertext_bytes"]
        assert tr["total_bytes"] > tr["ciphertext_bytes"]

    def test_manifest_headroom_check(self):
        P.check_model_headroom({"max_abs_z": [1.0, 20.0]}, FixedPointScale(), DEFAULT.t)
        with pytest.raises(Exception, match="layer 2"):
            P.check_model_headroom({"max_abs_z": [1.0, 60.0]}, FixedPointScale(), DEFAULT.t)
