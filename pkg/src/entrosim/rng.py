"""Counter-based random streams.

Every random draw in the simulator is addressed by a tuple
``(seed, domain, step, a, b)``.  The tuple is mapped onto the key and counter
of a Philox bit generator, so a stream's values depend only on its address and
never on the order in which streams are consumed.  That is what lets rollout
groups be generated in any order (or in parallel) and still merge into
bit-identical results.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Domain tags keep the streams of different consumers disjoint.
PROMPT = 1
ROLLOUT = 2
FILTER = 3
EVAL = 4
TRIAL = 5
INIT = 6
WARMSTART = 7
MISLABEL = 8


class StreamFactory:
    """Hands out reproducible streams keyed by ``(domain, step, a, b)``."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.Philox(key=[self.seed, 0])
        self._template = self._bitgen.state

    def _position(self, domain: int, step: int, a: int, b: int) -> None:
        state = self._template
        state["state"]["key"] = np.array([self.seed, domain & _MASK64], dtype=np.uint64)
        state["state"]["counter"] = np.array(
            [0, b & _MASK64, a & _MASK64, step & _MASK64], dtype=np.uint64
        )
        state["buffer_pos"] = 4
        state["has_uint32"] = 0
        state["uinteger"] = 0
        self._bitgen.state = state

    def uniforms(self, domain: int, step: int, a: int, b: int, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the addressed stream."""
        self._position(domain, step, a, b)
        raw = self._bitgen.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def generator(self, domain: int, step: int = 0, a: int = 0, b: int = 0) -> np.random.Generator:
        """A full numpy Generator positioned at the start of the addressed stream."""
        bitgen = np.random.Philox(
            key=[self.seed, domain & _MASK64],
            counter=[0, b & _MASK64, a & _MASK64, step & _MASK64],
        )
        return np.random.Generator(bitgen)
