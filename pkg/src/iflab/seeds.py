"""Named sub-seed derivation.

Every random draw in a run flows from one master seed through named
sub-seeds so that components stay independent and individually
reproducible: changing how many draws one component makes never shifts
another component's stream.

The derivation is a documented, stable hash: the uint64 read
little-endian from the first 8 bytes of
sha256("iflab/<master>/<name>/<name>/...") with parts joined by "/".
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *names) -> int:
    """Derive a named sub-seed from a master seed. Stable across runs and platforms."""
    parts = ["iflab", str(int(master))] + [str(n) for n in names]
    digest = hashlib.sha256("/".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
