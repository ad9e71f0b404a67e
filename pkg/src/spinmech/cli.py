"""Command-line workbench: ``spinmech <kind> --config scenario.toml``.

Each subcommand validates a TOML scenario, runs one pipeline and writes
CSV/JSON results plus ``run_manifest.json`` into the output directory.
Outputs other than the manifest's ``wall_time_s`` are a pure function of
the config text and seed.

Exit codes: 0 ok, 2 config error, 3 numerical or pipeline failure.
"""

from __future__ import annotations

import argparse
import io
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .beam import NVSite, cantilever_profile, clamped_clamped_modes, fit_force_from_profile
from .calibration import (
    AXES, RECORD_HEADER, UniaxialScenario, fit_susceptibilities, infer_force_from_odmr,
    monte_carlo_calibration, odmr_responsivity, simulate_uniaxial,
)
from .config import ConfigError, config_hash, parse_scenario
from .exceptions import SpinMechError
from .force import (
    PixelArray, crossover_grid, diagonal_pair_offsets, gradient_crossover, reconstruct_force_image,
    sensitivity, simulate_pixel_measurements,
)
from .inertial import (
    AdsorbateDistribution, DriveProtocol, estimate_mass_moments, fit_alpha_coeffs, folded_position,
    mass_sensitivity, optimal_site, perturb, reconstruct_mass_distribution, required_drive_amplitude,
    spin_readout,
)
from .spin import NVOrientation, StressTensor, family_resonances, synthesize_odmr
from .units import GHz, GPa, MHz, kHz, mT, mT_per_um, nm, pN, uN, um, zg

OUT_ENV = "SPINMECH_OUT"
SUBCOMMANDS = {
    "resonances": "resonances",
    "calibrate": "calibrate",
    "force-map": "force_map",
    "sensitivity": "sensitivity",
    "inertial": "inertial",
}


# --- serialisation ----------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def to_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _cell(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else "nan"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- pipelines ----------------------------------------------------------------


def _axis(name):
    return AXES[f"[{name}]"]


def run_resonances(sc):
    params = sc.susceptibility.params()
    fams = tuple(NVOrientation(f) for f in sorted(set(sc.families)))
    b = np.asarray(sc.field.B_mT) * mT
    pressures = sc.stress.sweep()
    axis = _axis(sc.stress.axis)
    freqs = np.linspace(sc.odmr.f_min_GHz, sc.odmr.f_max_GHz, sc.odmr.points) * GHz
    rng = np.random.default_rng(sc.seed)
    rows, spectra = [], []
    for P in pressures:
        stress = StressTensor.uniaxial(P, axis)
        res = family_resonances(stress, params, b, fams)
        for f, r in res.items():
            rows.append((P / GPa, f, r.f_minus_GHz, r.f_plus_GHz, r.shift_MHz, r.splitting_MHz))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            spec = synthesize_odmr(freqs, stress, params, b, {f.family: 1.0 for f in fams},
                                   sc.odmr.linewidth_MHz * MHz, sc.odmr.contrast)
        if sc.odmr.noise_rel > 0:
            spec = spec + rng.normal(0.0, sc.odmr.noise_rel, size=spec.shape)
        spectra.append(spec)
    header = ["frequency_GHz"] + [f"intensity_P{P / GPa:.4f}GPa" for P in pressures]
    odmr_rows = [(f / GHz, *col) for f, col in zip(freqs, np.array(spectra).T)]
    # per-family slopes of shift and splitting (Delta, half the f+ - f- gap) versus pressure
    slopes = {}
    p_arr = np.array([r[0] for r in rows if r[1] == fams[0].family])
    for f in fams:
        sh = np.array([r[4] for r in rows if r[1] == f.family])
        sp = np.array([r[5] for r in rows if r[1] == f.family])
        slopes[str(f.family)] = {
            "angle_deg": f.angle_to(axis),
            "shift_MHz_per_GPa": float(np.polyfit(p_arr, sh, 1)[0]) if len(p_arr) > 1 else None,
            "splitting_MHz_per_GPa": float(np.polyfit(p_arr, sp, 1)[0]) if len(p_arr) > 1 else None,
        }
    groups = sorted({(round(v["shift_MHz_per_GPa"] or 0, 6), round(v["splitting_MHz_per_GPa"] or 0, 6)) for v in slopes.values()})
    summary = {"axis": f"[{sc.stress.axis}]", "families": slopes, "distinct_groups": len(groups)}
    return {
        "resonances.csv": to_csv(["P_GPa", "family", "f_minus_GHz", "f_plus_GHz", "shift_MHz", "splitting_MHz"], rows),
        "odmr.csv": to_csv(header, odmr_rows),
        "summary.json": to_json(summary),
    }


def run_sensitivity(sc):
    params = sc.susceptibility.params()
    geom = sc.pillar.geometry()
    model = sc.measurement.model()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = sensitivity(geom, sc.pillar.offset(), params, model, sc.response)
    out = {
        "geometry": {"width_um": geom.width / um, "height_um": geom.length / um},
        "responsivity_MHz_per_uN": res.responsivity / MHz * uN,
        "eta_dc_pN_per_rtHz": res.eta_dc / pN,
        "eta_ac_pN_per_rtHz": res.eta_ac / pN,
        "fmin_dc_pN": res.fmin_dc / pN,
        "fmin_ac_pN": res.fmin_ac / pN,
        "averaging_time_s": model.T_m,
        "ac_band_Hz": {"low": res.band.f_lo, "high": res.band.f_hi, "empty": res.band.empty},
        "tip_displacement_at_fmin_nm": res.tip_displacement_at_fmin / nm,
        "crossover_mT_per_um": gradient_crossover(geom, params, sc.response) / mT_per_um,
        "warnings": sorted({str(w.message) for w in caught}),
    }
    files = {"sensitivity.json": to_json(out)}
    ws, hs = sc.crossover.widths_um, sc.crossover.heights_um
    if ws and hs:
        grid = crossover_grid(np.array(ws) * um, np.array(hs) * um, params, E=sc.pillar.E_GPa * GPa)
        rows = [(w, h, grid[i, j] / mT_per_um) for i, w in enumerate(ws) for j, h in enumerate(hs)]
        files["crossover.csv"] = to_csv(["w_um", "h_um", "gradB_mT_per_um"], rows)
    return files


def _uniaxial_scenarios(exp):
    pressures = tuple(p * GPa for p in exp.pressures_GPa)
    return [
        UniaxialScenario(f"[{a}]", pressures, exp.sigma_MHz * MHz, intrinsic_scale=exp.intrinsic_MHz * MHz)
        for a in exp.axes
    ]


def run_calibrate(sc):
    if sc.mode == "cantilever":
        return _run_cantilever(sc)
    params = sc.susceptibility.params()
    exp = sc.experiment
    scenarios = _uniaxial_scenarios(exp)
    seed = 0 if sc.seed is None else sc.seed
    if exp.trials == 1:
        children = np.random.SeedSequence(seed).spawn(len(scenarios) + 1)
        records = []
        for scen, child in zip(scenarios, children):
            records.extend(simulate_uniaxial(scen, params, seed=np.random.default_rng(child)))
        fit = fit_susceptibilities(records, params.a1, fit_a1=exp.fit_a1, n_starts=exp.n_starts,
                                   seed=np.random.default_rng(children[-1]))
        rep = fit.report()
        rep["truth"] = {"a2": params.a2 / (MHz / GPa), "b": params.b / (MHz / GPa), "c": params.c / (MHz / GPa)}
        return {
            "records.csv": to_csv(RECORD_HEADER, [r.csv_row() for r in records]),
            "fit.json": to_json(rep),
        }
    mc = monte_carlo_calibration(scenarios, params, exp.trials, seed, n_starts=exp.n_starts, workers=1)
    tol = (0.2, 0.3, 0.3)
    rows = [(i, *mc.estimates[i], *mc.sigma[i]) for i in range(exp.trials)]
    err = mc.estimates - mc.truth
    summary = {
        "trials": exp.trials,
        "failures": mc.failures,
        "truth_MHz_per_GPa": dict(zip(mc.names, mc.truth)),
        "tolerance_MHz_per_GPa": dict(zip(mc.names, tol)),
        "joint_coverage": mc.coverage(tol),
        "per_parameter_coverage": dict(zip(mc.names, np.mean(np.abs(err) <= tol, axis=0))),
        "rms_error_MHz_per_GPa": dict(zip(mc.names, np.sqrt(np.nanmean(err**2, axis=0)))),
    }
    header = ["trial", "a2", "b", "c", "sigma_a2", "sigma_b", "sigma_c"]
    return {"montecarlo.csv": to_csv(header, rows), "summary.json": to_json(summary)}


def _run_cantilever(sc):
    params = sc.susceptibility.params()
    geom = sc.cantilever.geometry()
    site = NVSite(x=sc.nv.x_um * um, z=sc.nv.z_um * um, family=sc.nv.family)
    load = sc.load
    rng = np.random.default_rng(sc.seed)
    x = np.linspace(0.0, geom.length, load.profile_points)
    resp = odmr_responsivity(site, geom, params, sc.nv.response)
    rows, profile_rows = [], []
    sig_f = load.odmr_sigma_MHz * MHz
    for F in np.array(load.forces_uN) * uN:
        y = cantilever_profile(F, geom, x) + rng.normal(0.0, load.profile_sigma_nm * nm, size=x.shape)
        eb = fit_force_from_profile(x, y, geom)
        df = resp * F + (rng.normal(0.0, sig_f) if sig_f > 0 else 0.0)
        od = infer_force_from_odmr(df, sig_f, site, geom, params, sc.nv.response)
        rows.append((F / uN, eb.force / uN, eb.sigma / uN, od.force / uN, od.sigma / uN, df / MHz))
        profile_rows.extend((F / uN, xi / um, yi / nm) for xi, yi in zip(x, y))
    arr = np.array(rows)
    slope = float(np.polyfit(arr[:, 1], arr[:, 3], 1)[0]) if len(arr) > 1 else None
    summary = {
        "responsivity_kHz_per_nN": resp / kHz * 1e-9,
        "mean_sigma_odmr_nN": float(np.mean(arr[:, 4]) * 1e3),
        "mean_sigma_eb_nN": float(np.mean(arr[:, 2]) * 1e3),
        "odmr_vs_eb_slope": slope,
    }
    return {
        "fig2e.csv": to_csv(["F_true_uN", "F_EB_uN", "sigma_EB_uN", "F_ODMR_uN", "sigma_ODMR_uN", "delta_f_MHz"], rows),
        "profiles.csv": to_csv(["F_true_uN", "x_um", "deflection_nm"], profile_rows),
        "summary.json": to_json(summary),
    }


def _force_field(block, center):
    amp = block.amplitude_nN * 1e-9
    d = np.asarray(block.direction, dtype=float)
    d = d / (np.linalg.norm(d) or 1.0)
    w = block.width_um * um

    def field(x, y):
        dx, dy = x - center[0], y - center[1]
        if block.shape == "uniform":
            return amp * d[0] + 0 * x, amp * d[1] + 0 * y
        g = np.exp(-(dx**2 + dy**2) / (2 * w * w))
        if block.shape == "gaussian":
            return amp * d[0] * g, amp * d[1] * g
        return -amp * dy / w * g, amp * dx / w * g

    return field


def run_force_map(sc):
    params = sc.susceptibility.params()
    geom = sc.pillar.geometry()
    model = sc.measurement.model()
    a = sc.array
    offsets = diagonal_pair_offsets(a.ni, a.nj, a.nv_radius_um * um)
    array = PixelArray(geom, a.spacing_um * um, offsets)
    center = ((a.ni - 1) * array.spacing / 2, (a.nj - 1) * array.spacing / 2)
    field = _force_field(sc.field, center)
    if sc.noise.sigma_kHz is not None:
        noise = sc.noise.sigma_kHz * kHz
    else:
        noise = None if sc.noise.shot_noise else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        simulate_pixel_measurements(field, array, params, noise, model, seed=sc.seed)
    img = reconstruct_force_image(array, params, overlapping=a.overlapping)
    cx, cy = img.centers[..., 0], img.centers[..., 1]
    tx, ty = field(cx, cy)
    tx, ty = np.broadcast_to(tx, cx.shape), np.broadcast_to(ty, cy.shape)
    rows = []
    for (i, j, fx, fy, sx, sy, masked) in img.rows():
        rows.append((i, j, cx[i, j] / um, cy[i, j] / um, fx / pN, fy / pN, sx / pN, sy / pN, tx[i, j] / pN, ty[i, j] / pN, masked))
    pos = array.positions()
    pix = [
        (i, j, pos[i, j, 0] / um, pos[i, j, 1] / um, offsets[i, j, 0] / nm, offsets[i, j, 1] / nm, array.shifts[i, j] / kHz)
        for i in range(a.ni) for j in range(a.nj)
    ]
    ok = ~img.mask
    err = np.stack([img.forces[..., 0] - tx, img.forces[..., 1] - ty], -1)[ok]
    summary = {
        "superpixels": int(ok.sum()),
        "masked": int((~ok).sum()),
        "resolution_um": img.resolution / um,
        "pixel_sigma_kHz": float(np.max(array.sigma_grid())) / kHz,
        "rms_vector_error_pN": float(np.sqrt(np.mean(np.sum(err**2, axis=1)))) / pN if err.size else None,
        "predicted_vector_sigma_pN": float(np.sqrt(np.mean(np.trace(img.cov[ok], axis1=-2, axis2=-1)))) / pN if err.size else None,
    }
    return {
        "force_image.csv": to_csv(["I", "J", "x_um", "y_um", "Fx_pN", "Fy_pN", "sigma_Fx_pN", "sigma_Fy_pN", "Fx_true_pN", "Fy_true_pN", "mask"], rows),
        "pixels.csv": to_csv(["i", "j", "x_um", "y_um", "nv_dx_nm", "nv_dy_nm", "delta_f_kHz"], pix),
        "summary.json": to_json(summary),
    }


def run_inertial(sc):
    params = sc.susceptibility.params()
    geom = sc.beam.geometry()
    img = sc.imaging
    basis = clamped_clamped_modes(geom, img.n_modes, Q=sc.drive.Q)
    l = geom.length
    mu = AdsorbateDistribution(
        l,
        point_masses=tuple((p.x_um * um, p.mass_zg * zg) for p in sc.adsorbate.points),
        gaussians=tuple((g.center_um * um, g.width_nm * nm, g.mass_zg * zg) for g in sc.adsorbate.gaussians),
    )
    pert = perturb(mu, basis)
    shifts, coup = pert.shifts.copy(), pert.couplings.copy()
    if sc.noise.rel_shift_sigma > 0:
        rng = np.random.default_rng(sc.seed)
        shifts = shifts + rng.normal(0.0, sc.noise.rel_shift_sigma, size=shifts.shape)
        noise = rng.normal(0.0, sc.noise.rel_shift_sigma, size=coup.shape)
        np.fill_diagonal(noise, 0.0)
        coup = coup + noise
    grid = np.linspace(0.0, l, img.points + 2)[1:-1]
    rec = reconstruct_mass_distribution(shifts, coup, basis, grid, clip=img.clip)
    truth = mu.density(grid)
    drive = DriveProtocol(mode=sc.drive.mode, amplitude=sc.drive.amplitude_nm * nm, periods=sc.drive.periods,
                          readout_bound=sc.drive.readout_bound_MHz * MHz)
    model = sc.measurement.model()
    sites = [(s.x_um * um, s.z_um * um) for s in sc.sites] or [optimal_site(basis)]
    site_out = []
    for s in sites:
        ro = spin_readout(s, basis, type(pert)(pert.freqs, shifts, coup), drive, params, model)
        site_out.append({"x_um": s[0] / um, "z_um": s[1] / um, "theta_in_rad": ro.theta_in,
                         "theta_out_rad": ro.theta_out, "phi_Hz": ro.phi})
    pj = pert.to_json()
    pj["rel_shift"] = shifts
    pj["coupling"] = coup
    pj["sites"] = site_out
    nm_modes = min(img.moments_modes, img.n_modes)
    domain = (0.1, 0.9)
    alphas = {0: fit_alpha_coeffs(0, basis, nm_modes, domain=domain),
              2: fit_alpha_coeffs(2, basis, nm_modes, domain=domain, origin=0.5)}
    mom = estimate_mass_moments(shifts, alphas, basis.mass, l)
    total = mu.total_mass()
    peaks = rec.peaks()
    sens = {c: mass_sensitivity(basis, optimal_site(basis), model, drive, params, c) for c in ("nominal", "physical")}
    target = sc.sensitivity.target_zg * zg
    need = required_drive_amplitude(target, basis, optimal_site(basis), model, drive.mode, params=params)
    report = {
        "beam": {"mass_kg": basis.mass, "f0_MHz": basis.freqs[0] / MHz, "n_modes": img.n_modes},
        "adsorbate": {"total_mass_zg": total / zg,
                      "point_masses": [{"x_um": x / um, "mass_zg": m / zg} for x, m in mu.point_masses]},
        "reconstruction": {
            "alpha_nm": rec.width / nm,
            "integrated_mass_zg": rec.integrated_mass() / zg,
            "peaks_um": [grid[i] / um for i in peaks],
            "negative_fraction": rec.negative_fraction,
            "negative_mass_zg": rec.negative_mass / zg,
            "clipped": rec.clipped,
        },
        "moments": {
            "modes": nm_modes,
            "fit_domain": domain,
            "m0_zg": mom[0] / zg,
            "folded_offset_from_center_um": folded_position(mom[0], mom[2], l) / um if mom[0] > 0 else None,
            "alpha_residuals": {k: a.residual for k, a in alphas.items()},
        },
        "mass_sensitivity": {
            c: {"eta_mass_zg_per_rtHz": r.eta_mass / zg, "phi_Hz": r.phi, "amplitude_nm": r.amplitude / nm}
            for c, r in sens.items()
        },
        "required_drive": {
            "target_zg_per_rtHz": sc.sensitivity.target_zg,
            "convention": need.convention,
            "amplitude_m": need.amplitude,
            "plausibility": need.plausibility,
        },
    }
    return {
        "reconstruction.csv": to_csv(["x_um", "mu1_est_kg_per_m", "mu1_true_kg_per_m"], rec.rows(truth)),
        "modes.csv": to_csv(["n", "kl_root", "freq_Hz", "Q"], basis.table_rows()),
        "perturbation.json": to_json(pj),
        "report.json": to_json(report),
    }


PIPELINES = {
    "resonances": run_resonances,
    "calibrate": run_calibrate,
    "force_map": run_force_map,
    "sensitivity": run_sensitivity,
    "inertial": run_inertial,
}


def run(scenario, out_dir, config_text=""):
    """Run one scenario and write its outputs; returns the manifest dict."""
    t0 = time.perf_counter()
    files = PIPELINES[scenario.kind](scenario)
    out = Path(out_dir)
    for name, text in files.items():
        write_atomic(out / name, text)
    manifest = {
        "kind": scenario.kind,
        "config_sha256": config_hash(config_text),
        "seed": scenario.seed,
        "version": __version__,
        "outputs": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    write_atomic(out / "run_manifest.json", to_json(manifest))
    return manifest


def _fail(code, payload):
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def build_parser():
    parser = argparse.ArgumentParser(prog="spinmech", description="Spin-mechanical sensing workbench")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", required=True, help="scenario TOML file")
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
        p.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
        p.add_argument("--validate-only", action="store_true", help="validate the config and exit")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    kind = SUBCOMMANDS[args.command]
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        return _fail(2, {"error": "config", "message": f"cannot read config: {exc}", "key": None, "line": None, "column": None})
    if args.seed is not None and not 0 <= args.seed < 2**64:
        return _fail(2, {"error": "config", "message": "seed must be an unsigned 64-bit integer", "key": "seed", "line": None, "column": None})
    try:
        scenario = parse_scenario(text, kind, seed=args.seed)
    except ConfigError as exc:
        return _fail(2, exc.to_json())
    if args.validate_only:
        sys.stdout.write(to_json({"valid": True, "scenario": scenario.model_dump(mode="json")}))
        return 0
    out_dir = args.out or os.environ.get(OUT_ENV) or scenario.output.dir
    try:
        manifest = run(scenario, out_dir, text)
    except (SpinMechError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        return _fail(3, {"error": "numerical", "type": type(exc).__name__, "message": str(exc)})
    sys.stdout.write(to_json({"ok": True, "out": str(out_dir), "outputs": sorted(manifest["outputs"])}))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
