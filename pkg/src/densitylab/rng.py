"""Counter-based random number streams for reproducible parallel Monte Carlo.

Every Gaussian draw in the package comes from a Philox generator whose
128-bit key encodes (seed, stream) and whose 256-bit counter is offset by
the time-step index.  A draw therefore depends only on the logical triple
(seed, stream, step), never on chunking, worker count, or evaluation
order, which is what makes ensemble runs bit-reproducible and
embarrassingly parallel.

Stream id allocation:
  - main solution paths use stream = path_index,
  - independent copies drawn inside the shift-resampling estimator use
    stream = PRIME_STREAM_BASE + path_index * (n_theta * n_primes)
             + theta_index * n_primes + replicate,
  - ad hoc test streams should use ids >= TEST_STREAM_BASE.
"""

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF

PRIME_STREAM_BASE = 1 << 40
DIAG_STREAM_BASE = 1 << 41
TEST_STREAM_BASE = 1 << 56


def _philox_key(seed, stream):
    return (int(seed) & _MASK64) | ((int(stream) & _MASK64) << 64)


class CounterStream:
    """Gaussian substreams keyed by (seed, stream) with one counter block per step.

    The Philox counter is reset to ``step << 192`` before each block of
    draws, so blocks are disjoint as long as a single step consumes fewer
    than 2**192 counter values.
    """

    def __init__(self, seed, stream):
        self.seed = int(seed)
        self.stream = int(stream)
        self._bit = np.random.Philox(key=_philox_key(seed, stream))
        self._gen = np.random.Generator(self._bit)
        self._template = self._bit.state

    def normals(self, step, shape):
        """Standard normal draws for one step, independent across steps."""
        if step < 0 or step >= (1 << 64):
            raise ValueError(f"step index out of range: {step}")
        state = dict(self._template)
        inner = dict(state["state"])
        counter = np.zeros(4, dtype=np.uint64)
        counter[3] = np.uint64(step)
        inner["counter"] = counter
        state["state"] = inner
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        state["uinteger"] = 0
        self._bit.state = state
        return self._gen.standard_normal(shape)


def prime_stream(path_index, theta_index, replicate, n_theta, n_primes):
    """Stream id of one independent-copy draw; see the allocation map above."""
    return (
        PRIME_STREAM_BASE
        + (path_index * n_theta + theta_index) * n_primes
        + replicate
    )
