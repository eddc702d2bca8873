#!/usr/bin/env python3
"""How each variant spreads attention mass over relative distance.

Runs the bare attention engine on the same random queries/keys at a short
and a long sequence length, aggregates the weight matrices into
distance profiles, and compares short vs long with Jensen-Shannon
divergence.  A scheme that keeps the long-context profile close to the
short one is doing its job.
"""

import numpy as np

from ropelab import Ntk, Pi, Rope, RopeConfig, yarn_for_context
from ropelab.analysis import aggregate_distance_distribution, js_divergence
from ropelab.attention import AttentionInput, attend

SHORT, LONG = 64, 256
HEADS, DIM = 4, 16

config = RopeConfig(head_dim=DIM)
variants = {
    "rope": Rope(config),
    "pi": Pi(config, alpha=4.0),
    "ntk": Ntk(config, new_base=1_000_000.0),
    "yarn": yarn_for_context(config, alpha=4.0, context_length=SHORT),
}

rng = np.random.default_rng(42)
q = rng.normal(size=(HEADS, LONG, DIM)) * 2.0
k = rng.normal(size=(HEADS, LONG, DIM)) * 2.0
v = rng.normal(size=(HEADS, LONG, DIM))


def profile(variant, n, bucket_width=8):
    inp = AttentionInput(queries=q[:, :n], keys=k[:, :n], values=v[:, :n])
    return aggregate_distance_distribution([attend(inp, variant)], bucket_width)


print(f"distance profiles, bucket width 8, lengths {SHORT} and {LONG}\n")
print(f"{'variant':>6} {'js(short, long)':>16}   head of the long profile")
rows = {}
for name, variant in variants.items():
    short = profile(variant, SHORT)
    long = profile(variant, LONG)
    rows[name] = (short, long)
    js = js_divergence(short, long)
    head = " ".join(f"{m:.3f}" for m in long.mass[:6])
    print(f"{name:>6} {js:>16.4f}   {head} ...")

print("\npairwise js between the long-context profiles:")
names = list(rows)
print(" " * 8 + "".join(f"{n:>8}" for n in names))
for a in names:
    cells = "".join(f"{js_divergence(rows[a][1], rows[b][1]):>8.4f}" for b in names)
    print(f"{a:>8}{cells}")

print("\n(random weights, so this probes the kernels, not a trained model;")
print("train one with demos/03 to see the learned version of this picture)")
