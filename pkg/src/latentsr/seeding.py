"""Named-stream seed derivation.

Every random draw in the package flows from a single root seed split per
subsystem ("data", "init", "timestep", "noise", "tiling", ...) so that runs
are reproducible and individual streams can be regenerated statelessly,
e.g. the draws for training iteration k depend only on (seed, stream, k).
"""

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(root: int, *names) -> int:
    """Derive a child seed from a root seed and a path of stream names.

    Deterministic across platforms and Python processes (no reliance on
    hash randomization). Components may be strings or integers.
    """
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK63


def np_rng(root: int, *names) -> np.random.Generator:
    """NumPy generator for the named stream."""
    return np.random.default_rng(derive_seed(root, *names))


def torch_gen(root: int, *names) -> torch.Generator:
    """Torch generator for the named stream."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root, *names))
    return gen
