import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named component (``"init"``, ``"train"``, ...).

    Streams depend only on ``(seed, name)``, so adding draws to one component
    never shifts the numbers another component sees.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])
