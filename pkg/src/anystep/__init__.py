"""Arbitrary-interval transition models for diffusion trajectories.

A transition model f(x_t, t, r) carries a noisy state at time t to any
earlier time r in one evaluation, x_r = A(t, r) x_t + B(t, r) f.  The
package holds the transport coefficients, the transition algebra and its
training target, closed-form oracles, small numpy networks with hand-written
gradients, the training loop, the any-step sampler and a CLI.
"""

from .errors import DegenerateError, DomainError, NumericAbort
from .transport import CoeffBundle, Kind, TransportSpec, coeffs
from .transition import TransitionCoeffs, WeightScheme, dde, tim_target, transition_coeffs

__all__ = [
    "CoeffBundle", "DegenerateError", "DomainError", "Kind", "NumericAbort", "TransitionCoeffs",
    "TransportSpec", "WeightScheme", "coeffs", "dde", "tim_target", "transition_coeffs",
]
__version__ = "0.1.0"
