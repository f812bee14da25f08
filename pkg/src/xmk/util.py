"""Small shared helpers: seed derivation and canonical JSON."""

from __future__ import annotations

import hashlib
import json
from typing import Any


def derive_seed(*parts: Any) -> int:
    """Derive a stable 64-bit seed from any hashable path of parts.

    Independent RNG streams are keyed by (base seed, salt, indices...) so
    that adding consumers never perturbs existing streams.
    """
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys so manifests are byte-stable across runs."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(obj))


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
