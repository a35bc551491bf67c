"""Run a whole inference session in one process on a small random network.

Prints the messages exchanged and checks the result against the plaintext ensemble.

    python3 demos/local_session.py
"""

import numpy as np

from hebnn import protocol as P
from hebnn.bnn import BayesianNetwork, predict_ensemble
from hebnn.ring import get_preset

params = get_preset("default")
network = BayesianNetwork.mlp([64, 32, 10], rho_init=-4.0, seed=0)
x = np.random.default_rng(1).uniform(0, 1, 64)
S = 4

client, server, outbox = P.session_init(x, network, params, S, server_rng=np.random.default_rng(7))
while outbox:
    replies = []
    for msg in outbox:
        data = P.encode_message(msg)
        print(f"client -> server  {type(msg).__name__:<18} layer {msg.__dict__.get('layer', '-'):<3} "
              f"{len(data):>9} bytes")
        for reply in server.handle(P.decode_message(data)):
            raw = P.encode_message(reply)
            print(f"server -> client  {type(reply).__name__:<18} layer {reply.layer:<3} {len(raw):>9} bytes")
            replies.extend(client.on_preactivations(P.decode_message(raw)))
    outbox = replies

p, label = client.finalize()
p_plain, label_plain = predict_ensemble(network, x, S, np.random.default_rng(7))
print(f"encrypted label {label}, plaintext label {int(label_plain)}")
print(f"max |p - p_plain| = {np.abs(p - p_plain).max():.2e}")
