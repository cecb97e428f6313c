"""
Utility functions for the abunet package.
Contains helpers used across different modules.
"""
import re
from datetime import datetime, timezone
from typing import Tuple

import numpy as np

_PRECISIONS = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(precision: str) -> np.dtype:
    """Map a precision name ("float32" / "float64") to a numpy dtype."""
    try:
        return np.dtype(_PRECISIONS[precision])
    except KeyError:
        raise ValueError(f"Unknown precision '{precision}', expected one of {sorted(_PRECISIONS)}")


def spawn_rngs(seed: int, count: int) -> Tuple[np.random.Generator, ...]:
    """Independent generators derived from one seed, stable across runs."""
    children = np.random.SeedSequence(seed).spawn(count)
    return tuple(np.random.default_rng(child) for child in children)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|), zero where both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    return np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)


def generate_slug(*parts: object) -> str:
    """Generate filesystem-friendly slugs for run directories."""
    text = "-".join(str(p) for p in parts if p is not None and p != "")
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_").lower()


def format_timestamp(moment: datetime = None) -> str:
    """Format timestamps consistently across run files."""
    return (moment or datetime.now(timezone.utc)).isoformat()
