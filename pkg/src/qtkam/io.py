"""Text snapshots and CSV/JSON writers.

Floats are written with ``repr`` so every snapshot round-trips bit-exactly.
Every output file carries the package version and the config hash.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

from . import __version__
from .geometry import GeometryParams, MomentumMap
from .operators import MomentumOperator, SiteBox, TruncationBox, site_box
from .potentials import TravelingWavePotential
from .toeplitz import LineToeplitzSymbol


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)


def _default(x):
    if hasattr(x, "tolist"):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"cannot serialize {type(x).__name__}")


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _num(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, header: list, rows, meta: dict) -> Path:
    """CSV preceded by '#'-comment lines with version and config hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# qtkam {__version__}\n")
        for k in sorted(meta):
            fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(x) for x in r])
    return path


def read_csv(path) -> tuple[dict, list, list]:
    meta, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k] = v
        else:
            lines.append(line)
    rows = list(csv.reader(lines))
    return meta, (rows[0] if rows else []), rows[1:]


def write_json(path, obj, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"version": __version__, **meta, "data": obj}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2, default=_default) + "\n")
    return path


# ---------------------------------------------------------------- box description

def box_to_dict(box: SiteBox) -> dict:
    return {"site_radius": box.trunc.site_radius, "fourier_radius": box.trunc.fourier_radius,
            "kmap": [list(r) for r in box.kmap.rows], "delta": box.geom.delta,
            "threshold": box.geom.threshold}


def box_from_dict(d: dict) -> SiteBox:
    kmap = MomentumMap(tuple(tuple(int(x) for x in r) for r in d["kmap"]))
    geom = GeometryParams(float(d["delta"]), d.get("threshold"))
    return site_box(TruncationBox(d["site_radius"], d["fourier_radius"]), kmap, geom)


# ---------------------------------------------------------------- potentials

def potential_to_dict(V: TravelingWavePotential) -> dict:
    modes = [[list(ell), c.real, c.imag] for ell, c in sorted(V.coeffs.items())]
    return {"kmap": [list(r) for r in V.kmap.rows], "width_a": V.width_a,
            "smoothness_p": V.smoothness_p, "support_radius": V.support_radius, "modes": modes}


def potential_from_dict(d: dict) -> TravelingWavePotential:
    kmap = MomentumMap(tuple(tuple(int(x) for x in r) for r in d["kmap"]))
    coeffs = {tuple(int(x) for x in ell): complex(float(re), float(im)) for ell, re, im in d["modes"]}
    return TravelingWavePotential(coeffs, kmap, float(d["width_a"]), float(d["smoothness_p"]),
                                  float(d.get("support_radius", 0.0)))


def save_potential(path, V: TravelingWavePotential) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(potential_to_dict(V), indent=1) + "\n")
    return path


def load_potential(path) -> TravelingWavePotential:
    return potential_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- operators and symbols

def operator_to_dict(M: MomentumOperator) -> dict:
    ent = M.entries()
    rows = [[j[0], j[1], list(ell), c.real, c.imag]
            for (j, ell), c in sorted(ent.items(), key=lambda kv: (kv[0][0], kv[0][1]))]
    return {"box": box_to_dict(M.box), "dropped": M.dropped, "entries": rows}


def operator_from_dict(d: dict, box: SiteBox | None = None) -> MomentumOperator:
    box = box_from_dict(d["box"]) if box is None else box
    ent = {((int(j1), int(j2)), tuple(int(x) for x in ell)): complex(float(re), float(im))
           for j1, j2, ell, re, im in d["entries"]}
    M = MomentumOperator.from_entries(box, ent)
    M.dropped = float(d.get("dropped", 0.0))
    return M


def symbol_to_dict(S: LineToeplitzSymbol) -> dict:
    rows = [[list(ell), list(v), b, c.real, c.imag] for (ell, v, b), c in sorted(S.triples().items())]
    return {"box": box_to_dict(S.box), "width": S.width, "rows": rows}


def symbol_from_dict(d: dict, box: SiteBox | None = None) -> LineToeplitzSymbol:
    box = box_from_dict(d["box"]) if box is None else box
    tr = {(tuple(int(x) for x in ell), tuple(int(x) for x in v), int(b)): complex(float(re), float(im))
          for ell, v, b, re, im in d["rows"]}
    return LineToeplitzSymbol.from_triples(box, tr, float(d["width"]))


def dumps(d: dict) -> str:
    return json.dumps(d, sort_keys=True, indent=1) + "\n"


def loads(text: str) -> dict:
    return json.loads(text)
