import os
import re
import zlib
from pathlib import Path
from unicodedata import normalize

import numpy as np


def seed_key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_seed(*parts: int | str) -> int:
    """A 32-bit seed that depends only on ``parts``."""
    sequence = np.random.SeedSequence([seed_key(p) for p in parts])
    return int(sequence.generate_state(1)[0])


def derive_rng(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed_key(p) for p in parts]))


def slugify(raw: str, fallback: str = "task") -> str:
    cleaned = normalize("NFKD", raw).encode("ascii", "ignore").decode("ascii")
    cleaned = re.sub(r"[^a-zA-Z0-9\s_-]", "", cleaned).strip().lower()
    cleaned = re.sub(r"[-\s]+", "-", cleaned).strip("-")
    return (cleaned or fallback)[:80]


def format_number(value: float) -> str:
    """Shortest stable text for CSV cells: up to 6 significant digits."""
    if value != value:
        return "nan"
    text = f"{value:.6g}"
    return "0" if text == "-0" else text


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
