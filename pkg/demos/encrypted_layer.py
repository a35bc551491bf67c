"""Walk through one encrypted matrix-vector product.

The client encrypts a packed input, the server multiplies it by packed weights
it never reveals, and the client decrypts the inner products.

    python3 demos/encrypted_layer.py
"""

import numpy as np

from hebnn import bfv
from hebnn.encoding import (
    FixedPointScale,
    extract_outputs,
    pack_bias,
    pack_vector,
    pack_weight_rows,
)
from hebnn.ring import get_preset

params = get_preset("default")
scale = FixedPointScale()
rng = np.random.default_rng(0)

pk, sk = bfv.keygen(params, rng)
W = rng.uniform(-0.5, 0.5, (6, 16))
b = rng.uniform(-0.5, 0.5, 6)
a = rng.uniform(0, 1, 16)

# client side
ct = bfv.encrypt(pack_vector(a, scale, params).plaintext, pk, rng)
print(f"ciphertext: {len(bfv.serialize(ct))} bytes, noise budget {bfv.noise_budget_bits(ct, sk):.1f} bits")

# server side
block = pack_weight_rows(W, scale, params)
out = bfv.ct_add(bfv.ct_pt_mul(ct, block.plaintext),
                 bfv.encrypt(pack_bias(b, block.output_map, scale, params), pk, rng))
print(f"after one plaintext multiply: noise budget {bfv.noise_budget_bits(out, sk):.1f} bits")

# client side again
z = extract_outputs(bfv.decrypt(out, sk), block.output_map, scale)
print("decrypted:", np.round(z, 4))
print("plaintext:", np.round(W @ a + b, 4))
print(f"max difference {np.abs(z - (W @ a + b)).max():.2e}")
