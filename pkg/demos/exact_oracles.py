"""Walk through the transition calculus with evaluators whose answers are known.

Nothing here is trained.  A single-point dataset and a Gaussian dataset both
have closed-form transition functions, so every claim below is checked
against exact arithmetic:

1. The coefficients (A, B, dB/dt) for OT-FM reduce to A=1, B=r-t, dB/dt=-1.
2. The exact oracle satisfies the transition identity; a zero network does not.
3. Sampling with the exact Gaussian transition gives the same samples at 1, 4
   and 16 steps, so more steps cannot help an exact model.
4. The finite-difference slope estimate is second order and costs two calls.

Run:  python demos/exact_oracles.py
"""

import numpy as np

from anystep import sampler, verify
from anystep.oracle import GaussianDataOracle, energy_distance
from anystep.transition import transition_coeffs
from anystep.transport import TransportSpec


def main():
    spec = TransportSpec("ot-fm")
    tc = transition_coeffs(spec, np.array([0.8]), np.array([0.3]))
    print(f"OT-FM t=0.8 -> r=0.3: A={tc.a[0]:.3f}  B={tc.b[0]:.3f}  dB/dt={tc.db_dt[0]:.3f}")

    for kind in ("ot-fm", "trigflow"):
        s = TransportSpec(kind)
        exact = verify.identity_residuals(s, verify.delta_oracle_fn(s)).max()
        zero = verify.identity_residuals(s, lambda x, t, r: np.zeros(2)).min()
        print(f"{kind:9s} identity residual: exact oracle {exact:.1e}, zero network {zero:.3f}")

    oracle = GaussianDataOracle([0.5, -1.0], [0.3, 1.5], spec)
    ref = oracle.sample(2000, np.random.default_rng(1))
    outs = {}
    for steps in (1, 4, 16):
        sched = sampler.build_schedule(spec, steps)
        outs[steps] = sampler.sample(oracle, spec, sched, 2000, rng=np.random.default_rng(0))
        print(f"Gaussian oracle, {steps:2d} step(s): energy distance to data {energy_distance(outs[steps], ref):.4f}")
    print(f"largest per-sample change between 1 and 16 steps: {np.max(np.abs(outs[16] - outs[1])):.1e}")

    slope, calls = verify.dde_order()
    print(f"slope estimate: error order {slope:.2f}, {calls} forward calls per estimate")


if __name__ == "__main__":
    main()
