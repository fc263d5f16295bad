"""Shared hashing and seeding helpers.

Every piece of run state that must be reproducible is keyed through
``derive_seed`` so that adding work to one stage never perturbs the
random stream of another.
"""

import hashlib
import json


def canonical_json(obj) -> bytes:
    """Serialize ``obj`` to stable bytes (sorted keys, compact separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of strings/ints to a 63-bit seed.

    Stable across processes and platforms; independent components get
    independent streams as long as their part tuples differ.
    """
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") >> 1
