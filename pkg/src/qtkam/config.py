"""Run configuration: one YAML/JSON file, validated in full before any work starts.

Schema (all keys optional except where noted; defaults give the standard profile)::

    seed: 2024                      # root seed, split per purpose
    output_dir: out
    geometry:   {delta: 0.3, threshold: null}
    kmap:       [[1, 0], [0, 1]]
    truncation: {site_radius: 8, fourier_radius: 16}
    potential:  {epsilon: 1.0e-3, support_radius: 6, width_a: 1.0, smoothness_p: 2.0}
                # or {file: path/to/potential.json}
    schedule:   {a0: 0.25, K0: 2, eps0: 1.0e-3, tau: 2.5, n_max: 6}
    gamma: 1.0e-2
    omega:      {explicit: [[0.618, -0.414]]} | {grid: {n: 3}} | {sobol: {samples: 4}}
    compare:    {interior_margin: 4, max_block: 4000}
    lattice:    {site_radius: 16, cramer_x: 50, cramer_R: 3, cramer_A: 10}
    melnikov:   {N: 3, tau_list: null, L_cut: 4, L_audit: 10, samples: 2000,
                 gammas: [1.0e-2, 3.0e-3, 1.0e-3, 3.0e-4], method: sobol,
                 embedding_samples: 20}
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .geometry import GeometryParams, MomentumMap
from .kam import KamSchedule
from .melnikov import MelnikovConfig, minimal_tau_list, sample_frequencies
from .operators import TruncationBox

GOLDEN = ((5**0.5 - 1) / 2, 1 - 2**0.5)

DEFAULTS = {
    "seed": 2024,
    "output_dir": "out",
    "geometry": {"delta": 0.3, "threshold": None},
    "kmap": [[1, 0], [0, 1]],
    "truncation": {"site_radius": 8, "fourier_radius": 16},
    "potential": {"epsilon": 1e-3, "support_radius": 6, "width_a": 1.0, "smoothness_p": 2.0},
    "schedule": {"a0": 0.25, "K0": 2, "eps0": 1e-3, "tau": 2.5, "n_max": 6},
    "gamma": 1e-2,
    "omega": {"explicit": [list(GOLDEN)]},
    "compare": {"interior_margin": 4, "max_block": 4000},
    "lattice": {"site_radius": 16, "cramer_x": 50, "cramer_R": 3, "cramer_A": 10},
    "melnikov": {"N": 3, "tau_list": None, "L_cut": 4, "L_audit": 10, "samples": 2000,
                 "gammas": [1e-2, 3e-3, 1e-3, 3e-4], "method": "sobol", "embedding_samples": 20},
}

SECTIONS = {k for k, v in DEFAULTS.items() if isinstance(v, dict)}


class ConfigError(ValueError):
    def __init__(self, problems: list):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(problems))
        self.problems = list(problems)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        replace = k == "omega" or (k == "potential" and "file" in v)
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not replace:
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce_numbers(x):
    # YAML 1.1 reads "1e-3" as a string
    if isinstance(x, dict):
        return {k: _coerce_numbers(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_coerce_numbers(v) for v in x]
    if isinstance(x, str):
        try:
            return float(x)
        except ValueError:
            return x
    return x


def _parse_value(text: str):
    try:
        return _coerce_numbers(yaml.safe_load(text))
    except yaml.YAMLError:
        return text


def apply_overrides(raw: dict, overrides: list) -> dict:
    """Apply 'a.b=value' overrides (values parsed as YAML scalars)."""
    out = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError([f"override '{item}' is not of the form key=value"])
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override '{key}' descends into a scalar"])
        node[parts[-1]] = _parse_value(val)
    return out


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    geometry: GeometryParams
    kmap: MomentumMap
    truncation: TruncationBox
    schedule: KamSchedule
    gamma: float
    melnikov: MelnikovConfig
    seed: int

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def seeds(self) -> dict:
        """Independent child seeds per purpose, derived from the root seed."""
        kids = np.random.SeedSequence(self.seed).spawn(3)
        names = ("potential", "omega", "measure")
        return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}

    def omegas(self) -> list:
        spec = self.raw["omega"]
        d = self.kmap.d
        if "explicit" in spec:
            return [tuple(float(x) for x in w) for w in spec["explicit"]]
        if "grid" in spec:
            n = int(spec["grid"]["n"])
            ax = [(-1 + (2 * k + 1) / n) for k in range(n)]
            return [tuple(p) for p in np.array(np.meshgrid(*([ax] * d), indexing="ij")).reshape(d, -1).T.tolist()]
        s = spec["sobol"]
        pts = sample_frequencies(int(s["samples"]), d, self.seeds()["omega"], "sobol")
        return [tuple(float(x) for x in w) for w in pts]


def _check(problems: list, cond, msg: str):
    """Record msg unless cond holds; cond may be a callable that raises on bad input."""
    try:
        ok = cond() if callable(cond) else cond
    except (TypeError, ValueError, KeyError, AttributeError):
        ok = False
    if not ok:
        problems.append(msg)


def build_config(raw_in: dict) -> RunConfig:
    problems: list = []
    if not isinstance(raw_in, dict):
        raise ConfigError(["top level must be a mapping"])
    unknown = sorted(set(raw_in) - set(DEFAULTS))
    for k in unknown:
        problems.append(f"unknown key '{k}'")
    for k in SECTIONS:
        if k in raw_in and not isinstance(raw_in[k], dict):
            problems.append(f"'{k}' must be a mapping")
    if problems:
        raise ConfigError(problems)
    raw = _merge(DEFAULTS, raw_in)
    for sec in SECTIONS - {"omega", "potential"}:
        for k in sorted(set(raw[sec]) - set(DEFAULTS[sec])):
            problems.append(f"unknown key '{sec}.{k}'")

    geometry = kmap = trunc = schedule = mcfg = None
    try:
        geometry = GeometryParams(float(raw["geometry"]["delta"]), raw["geometry"]["threshold"])
    except (ValueError, TypeError) as exc:
        problems.append(f"geometry: {exc}")
    try:
        kmap = MomentumMap(tuple(tuple(r) for r in raw["kmap"]))
    except (ValueError, TypeError) as exc:
        problems.append(f"kmap: {exc}")
    try:
        trunc = TruncationBox(float(raw["truncation"]["site_radius"]),
                              float(raw["truncation"]["fourier_radius"]))
    except (ValueError, TypeError) as exc:
        problems.append(f"truncation: {exc}")
    try:
        s = raw["schedule"]
        schedule = KamSchedule(float(s["a0"]), float(s["K0"]), float(s["eps0"]), float(s["tau"]),
                               int(s["n_max"]))
    except (ValueError, TypeError) as exc:
        problems.append(f"schedule: {exc}")
    try:
        gamma = float(raw["gamma"])
        _check(problems, gamma >= 0, "gamma must be nonnegative")
    except (ValueError, TypeError):
        gamma = 0.0
        problems.append("gamma must be a number")
    seed = raw["seed"]
    _check(problems, isinstance(seed, int) and seed >= 0, "seed must be a nonnegative integer")

    pot = raw["potential"]
    if not isinstance(pot, dict):
        problems.append("potential must be a mapping")
    elif "file" in pot:
        _check(problems, Path(str(pot["file"])).is_file(), f"potential file {pot['file']} not found")
    else:
        for k in ("epsilon", "support_radius"):
            _check(problems, k in pot, f"potential.{k} is required")
        if "epsilon" in pot:
            _check(problems, isinstance(pot["epsilon"], (int, float)) and pot["epsilon"] >= 0,
                   "potential.epsilon must be nonnegative")
        if "support_radius" in pot:
            _check(problems, isinstance(pot["support_radius"], (int, float)) and pot["support_radius"] > 0,
                   "potential.support_radius must be positive")
        pot.setdefault("width_a", 1.0)
        pot.setdefault("smoothness_p", 2.0)
        _check(problems, lambda: pot["width_a"] > 0, "potential.width_a must be positive")

    om = raw["omega"]
    if not isinstance(om, dict) or len(om) != 1 or next(iter(om)) not in ("explicit", "grid", "sobol"):
        problems.append("omega must have exactly one of: explicit, grid, sobol")
    elif "explicit" in om:
        ws = om["explicit"]
        d = kmap.d if kmap else 2
        ok = isinstance(ws, list) and len(ws) > 0 and all(isinstance(w, list) and len(w) == d for w in ws)
        _check(problems, ok, f"omega.explicit must be a non-empty list of {d}-vectors")
        if ok:
            _check(problems, lambda: all(-1 <= float(x) <= 1 for w in ws for x in w),
                   "omega.explicit entries must lie in [-1, 1]")
    elif "grid" in om:
        _check(problems, lambda: isinstance(om["grid"], dict) and int(om["grid"].get("n", 0)) >= 1,
               "omega.grid.n must be a positive integer")
    else:
        _check(problems, lambda: isinstance(om["sobol"], dict) and int(om["sobol"].get("samples", 0)) >= 1,
               "omega.sobol.samples must be a positive integer")

    cmp_ = raw["compare"]
    _check(problems, lambda: cmp_["interior_margin"] >= 0, "compare.interior_margin must be nonnegative")
    _check(problems, lambda: int(cmp_["max_block"]) >= 1, "compare.max_block must be positive")
    lat = raw["lattice"]
    _check(problems, lambda: lat["site_radius"] >= 0, "lattice.site_radius must be nonnegative")
    _check(problems, lambda: lat["cramer_R"] > 1 and lat["cramer_A"] >= 1 and lat["cramer_x"] >= 0,
           "lattice cramer ranges must satisfy R > 1, A >= 1, x >= 0")

    m = raw["melnikov"]
    if geometry is not None and kmap is not None:
        try:
            taus = m["tau_list"] or minimal_tau_list(int(m["N"]), kmap.d, geometry.mu)
            mcfg = MelnikovConfig(int(m["N"]), gamma, tuple(taus), float(m["L_cut"]),
                                  float(m["L_audit"]), kmap.d, geometry.mu)
        except (ValueError, TypeError) as exc:
            problems.append(f"melnikov: {exc}")
    _check(problems, lambda: int(m["samples"]) >= 100, "melnikov.samples must be at least 100")
    _check(problems, lambda: isinstance(m["gammas"], list) and all(g >= 0 for g in m["gammas"]),
           "melnikov.gammas must be a list of nonnegative numbers")
    _check(problems, m["method"] in ("sobol", "halton", "iid"), "melnikov.method must be sobol, halton or iid")
    if problems:
        raise ConfigError(problems)
    return RunConfig(raw, geometry, kmap, trunc, schedule, gamma, mcfg, seed)


def load_config(path, overrides: list | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config file {path} not found"])
    text = p.read_text()
    try:
        raw = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    raw = _coerce_numbers(raw or {})
    return build_config(apply_overrides(raw, overrides or []))
