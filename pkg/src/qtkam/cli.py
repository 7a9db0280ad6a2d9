"""Command line driver: qtkam <verb> --config run.yaml [--set key=value ...].

Verbs: lattice, reduce, spectrum-compare, melnikov, measure, report.
Exit codes: 0 success, 2 configuration error, 3 some runs aborted (partial results written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, build_config, load_config
from .geometry import cramer_bound_holds, enumerate_generators, site_data, traviata_check
from .io import config_hash, file_hash, load_potential, read_csv, save_potential, write_csv, write_json
from .kam import run_reduction
from .melnikov import check_C_star, measure_sweep
from .operators import site_box
from .oracle import OracleTooLarge, compare_to_oracle, spectrum_oracle
from .potentials import TravelingWavePotential, random_potential

log = logging.getLogger("qtkam")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

SPECTRUM_HEADER = ["j1", "j2", "v1", "v2", "b", "Omega", "a_vb", "r1", "r2", "varpi", "theta1", "theta2"]
STEP_HEADER = ["n", "K", "a", "qt_P_in", "qt_P", "qt_S", "drift", "step_small"]
MEASURE_HEADER = ["gamma", "samples", "excluded_count", "fraction", "ci_low", "ci_high"]


def _meta(cfg: RunConfig) -> dict:
    # the output location does not change results, so it is left out of the hash
    body = {k: v for k, v in cfg.raw.items() if k != "output_dir"}
    return {"config_hash": config_hash(body), "version": __version__}


def _potential(cfg: RunConfig) -> TravelingWavePotential:
    pot = cfg.raw["potential"]
    if "file" in pot:
        return load_potential(pot["file"])
    return random_potential(cfg.seeds()["potential"], float(pot["epsilon"]),
                            float(pot["support_radius"]), cfg.kmap, float(pot["width_a"]),
                            float(pot["smoothness_p"]))


def _box(cfg: RunConfig, site_radius=None):
    trunc = cfg.truncation
    if site_radius is not None:
        trunc = type(trunc)(site_radius, trunc.fourier_radius)
    return site_box(trunc, cfg.kmap, cfg.geometry)


def _spectrum_rows(spec):
    box = spec.box
    f = box.site_fiber
    varpi = spec.varpi
    a = spec.a_symbol
    for i in range(box.n):
        yield [int(box.sites[i, 0]), int(box.sites[i, 1]), int(box.v[i, 0]), int(box.v[i, 1]),
               int(box.b[i]), float(spec.Omega[i]), float(a[f[i]]), float(spec.r1[i]),
               float(spec.r2[i]), float(varpi[f[i]]), float(spec.theta1[i]), float(spec.theta2[i])]


def _reduce_one(cfg: RunConfig, V, omega, outdir: Path, meta: dict, pot_hash: str):
    box = _box(cfg)
    spec, state, status = run_reduction(V, omega, cfg.schedule, cfg.gamma, box)
    outdir.mkdir(parents=True, exist_ok=True)
    write_csv(outdir / "spectrum.csv", SPECTRUM_HEADER, _spectrum_rows(spec), meta)
    steps = [[e["n"], e.get("K", 0.0), e["a"], e.get("qt_P_in", e["qt_P"]), e["qt_P"], e["qt_S"],
              e.get("drift", 0.0), int(bool(e.get("step_small", True)))] for e in state.log]
    write_csv(outdir / "steps.csv", STEP_HEADER, steps, meta)
    s = cfg.schedule
    manifest = {
        "omega": list(omega),
        "gamma": cfg.gamma,
        "schedule": {"a0": s.a0, "K0": s.K0, "eps0": s.eps0, "tau": s.tau, "n_max": s.n_max},
        "geometry": {"delta": cfg.geometry.delta, "threshold": cfg.geometry.j_threshold},
        "truncation": {"site_radius": cfg.truncation.site_radius,
                       "fourier_radius": cfg.truncation.fourier_radius},
        "potential_hash": pot_hash,
        "status": {k: v for k, v in status.items() if k != "witness"},
        "witness": repr(status["witness"]) if status["witness"] is not None else None,
        "steps": [{k: v for k, v in e.items() if k in ("n", "K", "a", "qt_P", "qt_S", "qt_P_in",
                                                      "drift", "step_small", "omega_small")}
                  for e in state.log],
        "expansion_bound": spec.expansion_bound(),
    }
    write_json(outdir / "manifest.json", manifest, meta)
    return spec, status


def _prepare(cfg: RunConfig):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    V = _potential(cfg)
    pot_path = save_potential(out / "potential.json", V)
    return out, V, file_hash(pot_path)


def cmd_lattice(cfg: RunConfig) -> int:
    meta = _meta(cfg)
    out = cfg.output_dir / "lattice"
    lat = cfg.raw["lattice"]
    R = float(lat["site_radius"])
    r = int(math.floor(R))
    g = cfg.geometry
    rows = []
    counts = {"pass": 0, "fail": 0, "not applicable": 0}
    fails = []
    for j1 in range(-r, r + 1):
        for j2 in range(-r, r + 1):
            if j1 * j1 + j2 * j2 > R * R:
                continue
            sd = site_data(g, (j1, j2))
            nj = math.hypot(j1, j2)
            above = nj > g.j_threshold
            small_b = abs(sd.b) < 2.0 * nj**g.mu
            status = traviata_check(g, (j1, j2)).status if (above and small_b) else "not applicable"
            counts[status] += 1
            if status == "fail":
                fails.append([j1, j2])
            rows.append([j1, j2, sd.v[0], sd.v[1], sd.b, nj, int(above), int(small_b), status])
    write_csv(out / "sites.csv", ["j1", "j2", "v1", "v2", "b", "norm_j", "above_threshold",
                                  "small_b", "traviata"], rows, meta)
    xm, Rc, Am = int(lat["cramer_x"]), float(lat["cramer_R"]), int(lat["cramer_A"])
    gens = [v for v in enumerate_generators(Rc) if math.hypot(*v) < Rc]
    pts = [(x1, x2) for x1 in range(-xm, xm + 1) for x2 in range(-xm, xm + 1) if x1 * x1 + x2 * x2 <= xm * xm]
    cramer_fail = 0
    checked = 0
    for i, v in enumerate(gens):
        for w in gens[i + 1:]:
            for A in range(1, Am + 1):
                for x in pts:
                    checked += 1
                    cramer_fail += not cramer_bound_holds(v, w, x, A, Rc)
    write_json(out / "sweep.json", {"traviata": counts, "traviata_failures": fails,
                                    "cramer": {"checked": checked, "failures": cramer_fail,
                                               "x_radius": xm, "R": Rc, "A_max": Am}}, meta)
    return EXIT_OK


def cmd_reduce(cfg: RunConfig) -> int:
    meta = _meta(cfg)
    out, V, ph = _prepare(cfg)
    aborted = 0
    for k, om in enumerate(cfg.omegas()):
        _, status = _reduce_one(cfg, V, om, out / "reduce" / f"omega_{k:03d}", meta, ph)
        if status["aborted"]:
            aborted += 1
            log.warning("omega %s aborted at step %s (%s)", om, status["abort_step"], status["reason"])
    return EXIT_ABORT if aborted else EXIT_OK


def cmd_spectrum_compare(cfg: RunConfig) -> int:
    meta = _meta(cfg)
    out, V, ph = _prepare(cfg)
    margin = float(cfg.raw["compare"]["interior_margin"])
    rc = EXIT_OK
    summary = []
    for k, om in enumerate(cfg.omegas()):
        d = out / "compare" / f"omega_{k:03d}"
        spec, status = _reduce_one(cfg, V, om, d, meta, ph)
        if status["aborted"]:
            rc = EXIT_ABORT
            summary.append({"omega": list(om), "error": f"reduction aborted: {status['reason']}"})
            continue
        try:
            orc = spectrum_oracle(V, om, spec.box, max_block=int(cfg.raw["compare"]["max_block"]))
        except OracleTooLarge as exc:
            rc = EXIT_ABORT
            summary.append({"omega": list(om), "error": str(exc)})
            continue
        rep = compare_to_oracle(spec, orc, margin, keep_rows=True)
        write_csv(d / "mismatch.csv", ["l", "j1", "j2", "predicted", "mismatch"],
                  ([" ".join(map(str, ell)), j[0], j[1], pred, mm] for ell, j, pred, mm in rep.rows), meta)
        summary.append({"omega": list(om), "max_mismatch": rep.max_mismatch,
                        "mean_mismatch": rep.mean_mismatch, "count": rep.count,
                        "collisions": rep.collisions, "worst": rep.worst})
    write_json(out / "compare" / "summary.json", summary, meta)
    return rc


def cmd_melnikov(cfg: RunConfig) -> int:
    meta = _meta(cfg)
    out, V, ph = _prepare(cfg)
    rc = EXIT_OK
    res = []
    for k, om in enumerate(cfg.omegas()):
        spec, status = _reduce_one(cfg, V, om, out / "melnikov" / f"omega_{k:03d}", meta, ph)
        if status["aborted"]:
            rc = EXIT_ABORT
            res.append({"omega": list(om), "error": f"reduction aborted: {status['reason']}"})
            continue
        rep = check_C_star(spec, om, cfg.melnikov)
        res.append({"omega": list(om), "passed": rep.passed, "worst_ratio": rep.worst_ratio,
                    "witness": rep.witness, "audited": rep.audited, "undecided": rep.undecided,
                    "level_radius": {str(n): r for n, r in rep.levels.items()},
                    "case_counts": {str(n): c for n, c in rep.case_counts.items()}})
    write_json(out / "melnikov" / "audit.json", res, meta)
    return rc


def cmd_measure(cfg: RunConfig) -> int:
    meta = _meta(cfg)
    out, V, ph = _prepare(cfg)
    om = cfg.omegas()[0]
    spec, status = _reduce_one(cfg, V, om, out / "measure" / "frozen", meta, ph)
    if status["aborted"]:
        write_json(out / "measure" / "summary.json", {"error": f"reduction aborted: {status['reason']}"}, meta)
        return EXIT_ABORT
    m = cfg.raw["melnikov"]
    rep = measure_sweep(spec, cfg.melnikov, [float(g) for g in m["gammas"]], int(m["samples"]),
                        cfg.seeds()["measure"], m["method"], int(m["embedding_samples"]))
    write_csv(out / "measure" / "measure.csv", MEASURE_HEADER,
              ([r[k] for k in MEASURE_HEADER] for r in rep.rows), meta)
    wit = {repr(g): [{"omega": list(w), "worst": t} for w, t in lst] for g, lst in rep.witnesses.items()}
    write_json(out / "measure" / "witnesses.json", wit, meta)
    write_json(out / "measure" / "summary.json", {"monotone": rep.monotone, "embedding": rep.embedding,
                                                  "method": rep.method, "frozen_omega": list(om)}, meta)
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    """Collect every manifest under the output directory into one table."""
    meta = _meta(cfg)
    out = cfg.output_dir
    rows = []
    for p in sorted(out.glob("**/manifest.json")):
        doc = json.loads(p.read_text())
        st = doc["data"]["status"]
        rows.append([str(p.parent.relative_to(out)), " ".join(repr(x) for x in doc["data"]["omega"]),
                     int(st["converged"]), int(st["aborted"]), st["steps"], st.get("final_qt_P", float("nan")),
                     doc["data"]["expansion_bound"], doc.get("config_hash", "")])
    mp = out / "measure" / "measure.csv"
    write_csv(out / "report.csv", ["run", "omega", "converged", "aborted", "steps", "final_qt_P",
                                   "expansion_bound", "config_hash"], rows, meta)
    if mp.is_file():
        _, head, mrows = read_csv(mp)
        write_csv(out / "report_measure.csv", head + ["fraction_over_gamma"],
                  ([*r, float(r[3]) / float(r[0]) if float(r[0]) > 0 else 0.0] for r in mrows), meta)
    return EXIT_OK


VERBS = {
    "lattice": cmd_lattice,
    "reduce": cmd_reduce,
    "spectrum-compare": cmd_spectrum_compare,
    "melnikov": cmd_melnikov,
    "measure": cmd_measure,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qtkam", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"qtkam {__version__}")
    ap.add_argument("verb", choices=sorted(VERBS))
    ap.add_argument("--config", "-c", help="YAML or JSON run configuration (defaults if omitted)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key, e.g. --set gamma=1e-3 (repeatable)")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output_dir={args.out}")
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = build_config(apply_overrides({}, overrides))
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    np.seterr(all="ignore")
    return VERBS[args.verb](cfg)


if __name__ == "__main__":
    sys.exit(main())
