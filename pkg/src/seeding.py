"""
Seed and content hashing helpers
All randomness flows from the master seed through named substreams
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Union


def substream_seed(master_seed: int, *names: Any) -> int:
    """Derive a 63-bit seed for a named substream of the master seed"""
    key = ":".join([str(master_seed)] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_file(path: Union[str, Path]) -> str:
    """SHA-256 of a file's content, streamed"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def hash_json(obj: Any) -> str:
    """Stable hash of a JSON-serializable object (sorted keys)"""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hash_bytes(text.encode("utf-8"))
