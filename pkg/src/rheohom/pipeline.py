"""Staged experiment pipeline with persistence, resume, and a run manifest.

Stages run in a fixed order; every stage persists its outputs before the
next starts and drops a done-marker keyed by the config hash, so a rerun
with --resume skips completed stages by loading their files.  A stage
failure is recorded and the remaining stages are skipped, never faked.
Ensemble work is distributed over a process pool when run.threads > 1;
reductions are keyed by seed index, so results are identical for any
worker count.
"""

import json
import math
import os
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cell import corrector_uniqueness_probe, law_from_medium
from .config import ExperimentConfig, STAGES
from .effective import (EnsembleSampler, EstimateRejectedError, estimate_effective_tensor,
                        estimate_f, estimate_f_star, flux_weak_continuity_probe,
                        make_xi_grid, realization_seed, verify_coercivity_growth,
                        verify_delta2, verify_deterministic_limit, verify_monotonicity)
from .io import (canonical_json, ensure_writable_dir, read_container, save_medium,
                 save_trajectory, sha256_file, write_container)
from .macro import (EffectiveLawTable, MacroDomain, apriori_monitor,
                    convective_integrability_check, convergence_study, initial_stream,
                    velocity, weak_continuity_gap)
from .media import TorusGrid, birkhoff_identity_check, regenerate
from .varexp import growth_sample_set, tracefree_from_polar, verify_growth

from . import __version__


@dataclass
class RunManifest:
    config_hash: str
    version: str
    out_dir: str
    events: list = dc_field(default_factory=list)
    gates: dict = dc_field(default_factory=dict)
    stage_seeds: dict = dc_field(default_factory=dict)
    file_hashes: dict = dc_field(default_factory=dict)
    completed: list = dc_field(default_factory=list)
    failed_stage: str = ""

    def record(self, event: dict):
        self.events.append(event)
        with open(os.path.join(self.out_dir, "manifest.jsonl"), "a") as fh:
            fh.write(canonical_json(event) + "\n")

    def to_dict(self):
        return {"config_hash": self.config_hash, "version": self.version,
                "gates": self.gates, "stage_seeds": self.stage_seeds,
                "file_hashes": self.file_hashes, "completed": self.completed,
                "failed_stage": self.failed_stage,
                "wall_clock": {e["stage"]: e.get("seconds") for e in self.events
                               if e.get("kind") == "stage_end"}}

    def save(self):
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(canonical_json(obj))


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.run["out_dir"], cfg.hash)


def ensemble_for(cfg: ExperimentConfig) -> EnsembleSampler:
    return EnsembleSampler(cfg.medium_params(), L=cfg.rve["L"], n=cfg.rve["n"],
                           R=cfg.rve["realizations"], master_seed=cfg.stage_seed("cell"),
                           tol=cfg.solver["tol"], max_iter=cfg.solver["max_iter"],
                           threads=cfg.run["threads"])


def xi_grid_for(cfg: ExperimentConfig):
    g = cfg.xi_grid
    return make_xi_grid(g["directions"], g["magnitudes"], g["r_min"], g["r_max"])


def delta2_directions(cfg: ExperimentConfig):
    D = cfg.verify["delta2_directions"]
    return [tracefree_from_polar(1.0, 2.0 * math.pi * k / D) for k in range(D)]


def monotonicity_pairs(cfg: ExperimentConfig):
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(cfg.stage_seed("gates"))))
    lo, hi = cfg.xi_grid["r_min"], cfg.xi_grid["r_max"]
    pairs = []
    for _ in range(cfg.verify["monotonicity_pairs"]):
        r1, r2 = np.exp(rng.uniform(math.log(lo), math.log(hi), size=2))
        t1, t2 = rng.uniform(0.0, 2.0 * math.pi, size=2)
        pairs.append((tracefree_from_polar(r1, t1), tracefree_from_polar(r2, t2)))
    return pairs


def continuity_sequence(cfg: ExperimentConfig):
    base = tracefree_from_polar(1.0, 0.0)
    steps = cfg.verify["continuity_steps"]
    return base, [base * (1.0 + 2.0 ** (-j)) for j in range(1, steps + 1)]


def required_cell_points(cfg: ExperimentConfig):
    """Every (xi, unit_a) the later stages will query of the main ensemble."""
    xis, _, _ = xi_grid_for(cfg)
    a_points = [np.asarray(x) for x in xis]
    f_points = [np.asarray(x) for x in xis]
    for xi in delta2_directions(cfg):
        for lam in cfg.verify["delta2_lambdas"]:
            f_points.append(lam * xi)
    for xi1, xi2 in monotonicity_pairs(cfg):
        a_points.extend([xi1, xi2])
    base, seq = continuity_sequence(cfg)
    a_points.append(base)
    a_points.extend(seq)
    return a_points, f_points


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _stage_media(cfg, ctx):
    out = os.path.join(ctx["dir"], "media")
    ensure_writable_dir(out)
    sampler = ctx["sampler"]
    media_meta = []
    for r in range(sampler.R):
        med = sampler.medium(r)
        save_medium(med, os.path.join(out, f"medium_{r:03d}"))
        media_meta.append({"r": r, "seed": med.seed, "provenance": med.provenance,
                           "info": med.info})
    _write_jsonl(os.path.join(out, "media.jsonl"), media_meta)

    windows = cfg.verify["birkhoff_windows"]
    L_b = max(windows)
    cells_per_unit = max(1, int(round(cfg.rve["n"] / cfg.rve["L"])))
    n_b = int(round(L_b * cells_per_unit))
    seed_b = cfg.stage_seed("media")
    grid_b = TorusGrid(L=L_b, n=n_b)
    ensemble = [regenerate(dict(cfg.medium_params(), seed=realization_seed(seed_b, r)),
                           grid_b)
                for r in range(cfg.verify["birkhoff_R"])]
    report = birkhoff_identity_check(ensemble, window_sizes=windows)
    recs = report.to_records()
    _write_json(os.path.join(out, "birkhoff.json"),
                {"records": recs, "ensemble_average": report.ensemble_average})
    # gate: discrepancy nonincreasing with window size, within 2 SEs
    ok = all(recs[k + 1]["discrepancy_rms"] <= recs[k]["discrepancy_rms"]
             + 2.0 * math.hypot(recs[k]["discrepancy_se"], recs[k + 1]["discrepancy_se"])
             for k in range(len(recs) - 1))
    ok &= abs(recs[-1]["window_mean"] - report.ensemble_average) \
        <= 3.0 * max(recs[-1]["mean_se"], 1e-300) or recs[-1]["mean_se"] == 0.0
    ctx["manifest"].gates["birkhoff"] = bool(ok)
    return {"birkhoff": recs}


def _load_media(cfg, ctx):
    out = os.path.join(ctx["dir"], "media")
    with open(os.path.join(out, "birkhoff.json")) as fh:
        return {"birkhoff": json.load(fh)["records"]}


def _stage_growth(cfg, ctx):
    out = os.path.join(ctx["dir"], "growth")
    ensure_writable_dir(out)
    med = ctx["sampler"].medium(0)
    law = law_from_medium(med)
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(cfg.stage_seed("growth"))))
    report = verify_growth(law, growth_sample_set(rng))
    rec = report.to_record(cfg.law["alpha"], cfg.law["beta"])
    rec["alpha0"] = cfg.gate.alpha0 if cfg.gate else None
    rec["alpha_star"] = cfg.gate.alpha_star if cfg.gate else None
    _write_json(os.path.join(out, "growth.json"), rec)
    ctx["manifest"].gates["growth"] = bool(report.passed)
    return {"growth": rec}


def _load_growth(cfg, ctx):
    with open(os.path.join(ctx["dir"], "growth", "growth.json")) as fh:
        return {"growth": json.load(fh)}


def _stage_cell(cfg, ctx):
    out = os.path.join(ctx["dir"], "cell")
    ensure_writable_dir(out)
    sampler = ctx["sampler"]
    a_points, f_points = required_cell_points(cfg)
    sampler.prefetch(a_points, unit_a=False)
    sampler.prefetch(f_points, unit_a=True)
    records = sampler.export_records()
    _write_jsonl(os.path.join(out, "solves.jsonl"), records)

    med = sampler.medium(0)
    probe = corrector_uniqueness_probe(med, law_from_medium(med),
                                       tracefree_from_polar(1.0, 0.0),
                                       n_starts=3, tol=cfg.solver["tol"],
                                       max_iter=cfg.solver["max_iter"],
                                       seed=cfg.stage_seed("cell"))
    probe_rec = {"max_pairwise": probe.max_pairwise, "conclusive": probe.conclusive,
                 "n_starts": probe.n_starts}
    _write_json(os.path.join(out, "uniqueness_probe.json"), probe_rec)
    ctx["manifest"].gates["uniqueness_probe"] = bool(
        probe.conclusive and probe.max_pairwise <= 10.0 * sampler.solve(0, tracefree_from_polar(1.0, 0.0)).tol_abs)
    n_bad = sum(1 for rec in records if not rec["converged"])
    ctx["manifest"].record({"kind": "note", "stage": "cell",
                            "solves": len(records), "non_converged": n_bad})
    return {"solve_records": records, "uniqueness": probe_rec}


def _load_cell(cfg, ctx):
    out = os.path.join(ctx["dir"], "cell")
    records = _read_jsonl(os.path.join(out, "solves.jsonl"))
    ctx["sampler"].import_records(records)
    with open(os.path.join(out, "uniqueness_probe.json")) as fh:
        probe = json.load(fh)
    return {"solve_records": records, "uniqueness": probe}


def _stage_effective(cfg, ctx):
    out = os.path.join(ctx["dir"], "effective")
    ensure_writable_dir(out)
    sampler = ctx["sampler"]
    xis, dirs, mags = xi_grid_for(cfg)
    a_ests, f_ests = [], []
    for xi in xis:
        a_ests.append(estimate_effective_tensor(sampler, xi))
        f_ests.append(estimate_f(sampler, xi))
    est_records = []
    for ae, fe in zip(a_ests, f_ests):
        rec = ae.to_record()
        rec.update({"f": fe.f, "f_se": fe.se})
        est_records.append(rec)
    _write_jsonl(os.path.join(out, "estimates.jsonl"), est_records)

    table = EffectiveLawTable.from_estimates(
        a_ests, dirs, mags,
        meta={"alpha": cfg.law["alpha"], "beta": cfg.law["beta"],
              "medium": cfg.medium_params(), "R": cfg.rve["realizations"],
              "L": cfg.rve["L"]})
    arrays = table.to_arrays()
    write_container(os.path.join(out, "aeff_table"),
                    {"kind": "aeff_table", "meta": table.meta}, arrays)

    fstar_records = []
    for est in a_ests:
        fs = estimate_f_star(est.mean_flux, f_ests)
        fstar_records.append({"eta": [float(c) for c in est.mean_flux],
                              "f_star": fs.f_star,
                              "lower_bound_only": fs.lower_bound_only})
    _write_jsonl(os.path.join(out, "fstar.jsonl"), fstar_records)
    return {"estimates": est_records, "table": table, "fstar": fstar_records}


def _load_effective(cfg, ctx):
    out = os.path.join(ctx["dir"], "effective")
    est_records = _read_jsonl(os.path.join(out, "estimates.jsonl"))
    meta, arrays = read_container(os.path.join(out, "aeff_table"))
    table = EffectiveLawTable(arrays["thetas"], arrays["radii"], arrays["W"],
                              Aeff=arrays["Aeff"], meta=meta["meta"])
    fstar = _read_jsonl(os.path.join(out, "fstar.jsonl"))
    return {"estimates": est_records, "table": table, "fstar": fstar}


def _stage_gates(cfg, ctx):
    out = os.path.join(ctx["dir"], "gates")
    ensure_writable_dir(out)
    sampler = ctx["sampler"]
    manifest = ctx["manifest"]
    xis, _, _ = xi_grid_for(cfg)

    d2 = verify_delta2(sampler, delta2_directions(cfg), cfg.verify["delta2_lambdas"],
                       cfg.law["alpha"], cfg.law["beta"])
    _write_json(os.path.join(out, "delta2.json"),
                {"passed": d2.passed, "rows": d2.rows, "summary": d2.summary})
    manifest.gates["delta2"] = bool(d2.passed)

    cg = verify_coercivity_growth(sampler, list(xis))
    _write_json(os.path.join(out, "coercivity.json"),
                {"passed": cg.passed, "rows": cg.rows, "summary": cg.summary})
    manifest.gates["coercivity_growth"] = bool(cg.passed)

    mono = verify_monotonicity(sampler, monotonicity_pairs(cfg))
    _write_json(os.path.join(out, "monotonicity.json"),
                {"passed": mono.passed, "rows": mono.rows, "summary": mono.summary})
    manifest.gates["monotonicity"] = bool(mono.passed)

    base, _seq = continuity_sequence(cfg)
    cont = flux_weak_continuity_probe(sampler, base, j_max=cfg.verify["continuity_steps"])
    _write_json(os.path.join(out, "continuity.json"),
                {"passed": cont.passed, "rows": cont.rows, "summary": cont.summary})
    manifest.gates["flux_weak_continuity"] = bool(cont.passed)

    det = verify_deterministic_limit(
        cfg.medium_params(), np.asarray(cfg.verify["det_limit_xi"], dtype=float),
        cfg.verify["det_limit_Ls"], cfg.verify["det_limit_R"],
        cells_per_unit=max(1, int(round(cfg.rve["n"] / cfg.rve["L"]))),
        master_seed=cfg.stage_seed("gates"), tol=cfg.solver["tol"],
        max_iter=cfg.solver["max_iter"], threads=cfg.run["threads"])
    _write_json(os.path.join(out, "det_limit.json"),
                {"passed": det.passed, "rows": det.rows, "summary": det.summary})
    manifest.gates["deterministic_limit"] = bool(det.passed)

    return {"delta2": d2, "coercivity": cg, "monotonicity": mono,
            "continuity": cont, "det_limit": det}


def _load_gates(cfg, ctx):
    out = os.path.join(ctx["dir"], "gates")
    res = {}
    for name, key in (("delta2", "delta2"), ("coercivity", "coercivity"),
                      ("monotonicity", "monotonicity"), ("continuity", "continuity"),
                      ("det_limit", "det_limit")):
        with open(os.path.join(out, f"{name}.json")) as fh:
            res[key] = json.load(fh)
    return res


def _stage_macro(cfg, ctx):
    out = os.path.join(ctx["dir"], "macro")
    ensure_writable_dir(out)
    manifest = ctx["manifest"]
    if not cfg.macro["enabled"]:
        _write_json(os.path.join(out, "convergence.json"), {"enabled": False})
        return {"convergence": None}
    table = ctx["outputs"]["effective"]["table"]
    mac = cfg.macro
    domain = MacroDomain(n=mac["n"], T=mac["T"], dt=mac["dt"])
    medium = regenerate(dict(cfg.medium_params(),
                             seed=realization_seed(cfg.stage_seed("macro"), 0)),
                        TorusGrid(L=cfg.rve["L"], n=cfg.rve["n"]))
    study = convergence_study(medium, mac["eps"], table, domain, u0_tag=mac["u0"],
                              amplitude=mac["amplitude"],
                              convection_on=mac["convection"],
                              n_snapshots=mac["snapshots"])

    errs = [row["err_QT"] for row in study["rows"] if not row["aborted"]]
    decreasing = study["complete"] and all(errs[k + 1] < errs[k]
                                           for k in range(len(errs) - 1))
    manifest.gates["eps_convergence"] = bool(decreasing)

    # monitors over the eps set: refit C on the coarsest run, freeze for the rest
    psi0 = initial_stream(mac["u0"], domain, mac["amplitude"])
    u0 = velocity(psi0, domain.h)
    u0n2 = float(domain.h ** 2 * np.sum(u0 * u0))
    from .macro import solve_fine  # local import keeps module top uncluttered
    monitors = []
    frozen_C = None
    energy_ok = True
    for eps in mac["eps"]:
        traj = solve_fine(medium, eps, domain, u0_tag=mac["u0"],
                          amplitude=mac["amplitude"], convection_on=mac["convection"],
                          n_snapshots=mac["snapshots"])
        save_trajectory(traj, os.path.join(out, f"traj_eps_{eps:.6f}"))
        if frozen_C is None:
            fit = apriori_monitor(traj, u0n2)
            frozen_C = fit["C"]
            mon = fit
        else:
            mon = apriori_monitor(traj, u0n2, C=frozen_C)
        conv_chk = convective_integrability_check(traj)
        viol = float(np.max(traj.ledger["violation"])) if traj.ledger["violation"].size else 0.0
        energy_ok &= viol <= 1e-8 and not traj.aborted
        monitors.append({"eps": eps, "apriori": mon, "convective": conv_chk,
                         "max_violation": viol,
                         "weak_continuity_gap": weak_continuity_gap(traj, domain, psi0)})
    manifest.gates["apriori_monitor"] = bool(all(m["apriori"]["passed"] for m in monitors))
    manifest.gates["energy_inequality"] = bool(energy_ok)

    _write_json(os.path.join(out, "convergence.json"),
                {"rows": study["rows"], "complete": study["complete"],
                 "u0": study["u0"], "convection": study["convection"]})
    _write_json(os.path.join(out, "monitors.json"),
                {"frozen_C": frozen_C, "u0_norm2": u0n2, "monitors": monitors})
    return {"convergence": study, "monitors": monitors, "frozen_C": frozen_C}


def _load_macro(cfg, ctx):
    out = os.path.join(ctx["dir"], "macro")
    with open(os.path.join(out, "convergence.json")) as fh:
        conv = json.load(fh)
    monitors = None
    mpath = os.path.join(out, "monitors.json")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            monitors = json.load(fh)
    return {"convergence": conv, "monitors": monitors}


def _stage_reports(cfg, ctx):
    from .reports import emit_reports
    out = os.path.join(ctx["dir"], "reports")
    ensure_writable_dir(out)
    files = emit_reports(ctx["manifest"], ctx["outputs"], out)
    for path in files:
        ctx["manifest"].file_hashes[os.path.relpath(path, ctx["dir"])] = sha256_file(path)
    return {"files": files}


_STAGE_FUNCS = {
    "media": (_stage_media, _load_media),
    "growth": (_stage_growth, _load_growth),
    "cell": (_stage_cell, _load_cell),
    "effective": (_stage_effective, _load_effective),
    "gates": (_stage_gates, _load_gates),
    "macro": (_stage_macro, _load_macro),
    "reports": (_stage_reports, None),
}


def run_pipeline(cfg: ExperimentConfig, resume=False) -> RunManifest:
    """Execute all stages in order; see the module docstring for semantics."""
    base = run_dir(cfg)
    ensure_writable_dir(base)
    manifest = RunManifest(config_hash=cfg.hash, version=__version__, out_dir=base)
    for stage in STAGES:
        manifest.stage_seeds[stage] = cfg.stage_seed(stage)
    _write_json(os.path.join(base, "config.json"), cfg.to_dict())

    ctx = {"dir": base, "sampler": ensemble_for(cfg), "manifest": manifest,
           "outputs": {}}
    failed = False
    for stage in STAGES:
        run_fn, load_fn = _STAGE_FUNCS[stage]
        marker = os.path.join(base, f"stage_{stage}.done")
        if failed:
            manifest.record({"kind": "stage_skipped", "stage": stage,
                             "reason": f"upstream failure in {manifest.failed_stage}"})
            continue
        if resume and os.path.exists(marker) and load_fn is not None:
            ctx["outputs"][stage] = load_fn(cfg, ctx)
            manifest.record({"kind": "stage_resumed", "stage": stage})
            manifest.completed.append(stage)
            continue
        t0 = time.perf_counter()
        manifest.record({"kind": "stage_start", "stage": stage})
        try:
            ctx["outputs"][stage] = run_fn(cfg, ctx)
        except (EstimateRejectedError, ValueError, OSError) as exc:
            manifest.failed_stage = stage
            manifest.record({"kind": "stage_failed", "stage": stage,
                             "error": f"{type(exc).__name__}: {exc}"})
            failed = True
            continue
        seconds = time.perf_counter() - t0
        with open(marker, "w") as fh:
            fh.write(cfg.hash)
        manifest.record({"kind": "stage_end", "stage": stage, "seconds": seconds})
        manifest.completed.append(stage)
    manifest.save()
    return manifest
