"""CSV and JSON writers shared by the demos and the sweep."""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import sys
from pathlib import Path
from typing import Iterable, Sequence


def fmt(x) -> str:
    """Stable text for one CSV cell.

    Floats use ``repr`` (shortest round-trip form), so identical runs give
    identical bytes. Non-finite floats become ``nan``/``inf``/``-inf``.
    """
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    try:
        f = float(x)
    except (TypeError, ValueError):
        return str(x)
    if hasattr(x, "dtype") and x.dtype.kind in "iu":
        return str(int(x))
    if math.isnan(f):
        return "nan"
    if math.isinf(f):
        return "inf" if f > 0 else "-inf"
    return repr(f)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """RFC-4180 CSV: CRLF line ends, minimal quoting, UTF-8."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        w.writerow(list(header))
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def versions() -> dict:
    import numpy
    import scipy

    from lossep import __version__
    from lossep._accel import HAVE_NUMBA, USE_NUMBA

    out = {
        "lossep": __version__,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "numba_available": HAVE_NUMBA,
        "numba_enabled": USE_NUMBA,
    }
    if HAVE_NUMBA:
        import numba

        out["numba"] = numba.__version__
    return out


def write_manifest(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = dict(payload)
    data.setdefault("versions", versions())
    data.setdefault("argv", list(sys.argv))
    data.setdefault("env", {k: v for k, v in os.environ.items() if k.startswith("LOSSEP_")})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
