#!/usr/bin/env python3
"""Tour of the rotary kernels: rates, angles, and the relative-offset law.

Walks through what each variant does to the per-pair rotation rates and
shows numerically that query/key inner products only ever see position
differences.
"""

import numpy as np

from ropelab import Ntk, Pi, Rope, RopeConfig, rotate, yarn_attention_scale, yarn_for_context
from ropelab.rope import effective_rates, thetas


def banner(title):
    print(f"\n=== {title} " + "=" * max(0, 60 - len(title)))


config = RopeConfig(head_dim=16, base=10000.0)
variants = {
    "rope": Rope(config),
    "pi(alpha=8)": Pi(config, alpha=8.0),
    "ntk(base=1e6)": Ntk(config, new_base=1_000_000.0),
    "yarn(alpha=8)": yarn_for_context(config, alpha=8.0, context_length=256),
}

banner("per-pair rotation rates")
print(f"{'pair':>4} {'wavelength':>12} " + " ".join(f"{name:>14}" for name in variants))
base_rates = thetas(config)
for j in range(config.pair_count):
    rate_row = " ".join(f"{effective_rates(v)[j]:>14.6g}" for v in variants.values())
    print(f"{j:>4} {2 * np.pi / base_rates[j]:>12.1f} {rate_row}")
print("\npair 0 always turns one radian per token; the schemes only reshape")
print("the slower pairs, which is where long-range structure lives.")

banner("one vector, three positions")
rng = np.random.default_rng(0)
h = rng.normal(size=16)
h /= np.linalg.norm(h)
for name, v in variants.items():
    norms = [np.linalg.norm(rotate(v, h, m)) for m in (0, 100, 5000)]
    print(f"{name:>14}: norms at m=0/100/5000 -> " + ", ".join(f"{x:.12f}" for x in norms))
print("rotation never changes the length, only the phase.")

banner("inner products depend only on the offset")
q = rng.normal(size=16)
k = rng.normal(size=16)
for name, v in variants.items():
    at_origin = rotate(v, q, 7) @ rotate(v, k, 2)
    shifted = rotate(v, q, 7 + 911) @ rotate(v, k, 2 + 911)
    print(f"{name:>14}: |dot(m=7,n=2) - dot(m=918,n=913)| = {abs(at_origin - shifted):.2e}")

banner("position interpolation is literally index division")
pi = Pi(config, alpha=8.0)
print("pi(alpha=8) at m=4096 equals plain at m=512:",
      np.allclose(rotate(pi, h, 4096), rotate(Rope(config), h, 512), atol=0))

banner("yarn adds a logit temperature")
for alpha in (2, 8, 16, 32):
    y = yarn_for_context(config, alpha=float(alpha), context_length=256)
    print(f"alpha={alpha:>3}: temperature={y.temperature:.4f} "
          f"logit scale={yarn_attention_scale(y):.4f}")
