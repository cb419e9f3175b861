"""Configuration-driven experiment runner.

    htsemi run CONFIG.json [--out DIR] [--threads N] [--seed S]
    htsemi list
    htsemi describe SCENARIO

A run writes results.csv, summary.json and report.txt.  Exit status is 0 when
every clause of the scenario passes, 2 when a tolerance clause fails and 1 on
configuration or runtime errors.
"""
import os

# BLAS pools split reductions by thread count; pin them so results do not depend on --threads
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import copy
import csv
import json
import math
import subprocess
import sys
import time
import traceback
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from . import fiber as fb
from ._accel import USE_NUMBA, set_threads
from .gft import (
    GridSpec,
    PhysicalState,
    calibrate_c0,
    forward_gft,
    inverse_gft,
    l2_norm,
    plancherel_norm_sq,
    random_band_limited,
    to_mixed,
)
from .htype import BUILTIN_GROUPS, GroupPoint, GroupStructure, builtin_group
from .measure import (
    WavePacketSpec,
    averaged_ball_mass,
    central_mass_fraction,
    centroid_track,
    egorov_residual,
    fit_slope,
    j_eps_diagnostic,
    marginal_split,
    oscillation_profile,
    packet_field,
    packet_grid,
    synthesize_euclidean_packet,
    v_centroid,
    v_marginal,
)
from .propagate import EvolutionSpec, ModalExpectation, TimeWindow, euclidean_evolve, field_modes, mixed_evolve
from .quantize import (
    BandMask,
    BandProjector,
    FieldRep,
    Hamiltonian,
    Identity,
    Profile,
    Scaled,
    SmoothCutoff,
    Spectral,
    Symbol,
    SymbolTerm,
    commutator_expansion_check,
    sigma1_commutator_residual,
    sigma1_band_residual,
    smooth_step,
)

CSV_COLUMNS = (
    "scenario",
    "epsilon",
    "tau",
    "s",
    "t_window",
    "symbol_id",
    "value_re",
    "value_im",
    "residual",
    "fit_slope",
    "fit_r2",
)
EXIT_OK, EXIT_ERROR, EXIT_TOLERANCE = 0, 1, 2
OUT_ENV = "HTSEMI_OUT"  # the only environment override: output directory


class ConfigError(ValueError):
    """Invalid configuration; reported with exit code 1 before any compute."""


# ---------------------------------------------------------------- symbol DSL


def build_profile(spec: dict, grid: GridSpec) -> Profile:
    kind = spec.get("kind", spec.get("type", "constant"))
    if kind == "constant":
        return Profile.constant(grid, spec.get("value", 1.0))
    if kind == "gaussian":
        vc = spec.get("v_center")
        return Profile.gaussian(
            grid,
            v_center=None if vc is None else np.asarray(vc, dtype=float),
            v_width=spec.get("v_width"),
            z_center=spec.get("z_center"),
            z_width=spec.get("z_width"),
            amplitude=spec.get("amplitude", 1.0),
        )
    raise ConfigError(f"unknown profile kind {kind!r}")


def build_fiber(spec: dict):
    """Fiber factor and its (row band, column band) pair when it is a single block."""
    kind = spec.get("kind", spec.get("type"))
    if kind == "identity":
        return Identity(), None
    if kind in ("projector", "band_projector"):
        n = int(spec["n"])
        return BandProjector(n), (n, n)
    if kind == "hamiltonian":
        return Hamiltonian(), None
    if kind == "heat":
        t = float(spec.get("t", 0.25))
        return Spectral(lambda e, t=t: np.exp(-t * e)), None
    if kind == "field":
        return FieldRep(spec.get("which", "P"), int(spec.get("j", 0))), None
    if kind == "block":
        inner, _ = build_fiber(spec["of"])
        rows, cols = int(spec["rows"]), int(spec["cols"])
        return BandMask(inner, (rows, cols), max(rows, cols)), (rows, cols)
    raise ConfigError(f"unknown fiber kind {kind!r}")


def build_symbol(spec: dict, grid: GridSpec) -> Symbol:
    """Symbol from its JSON description.

    ``{"id": ..., "cutoff": {"lo", "hi", "ramp"} | null, "band_bound": int | null,
    "terms": [{"profile": {...}, "fiber": {...}, "scale": c | [re, im]}]}``
    """
    if not spec.get("terms"):
        raise ConfigError(f"symbol {spec.get('id', '?')!r} has no terms")
    cut = spec.get("cutoff")
    cutoff = SmoothCutoff(float(cut["lo"]), float(cut["hi"]), float(cut["ramp"])) if cut else None
    terms = []
    for t in spec["terms"]:
        prof = build_profile(t.get("profile", t.get("a", {})), grid)
        sc = t.get("scale", 1.0)
        sc = complex(*sc) if isinstance(sc, (list, tuple)) else complex(sc)
        if sc != 1:
            prof = prof.scale(sc)
        fib, bands = build_fiber(t.get("fiber", {"kind": "identity"}))
        if cutoff is not None:
            fib = Scaled(fib, cutoff)
        terms.append(SymbolTerm(prof, fib, 0.0, bands))
    return Symbol(terms, cutoff.support if cutoff else None, spec.get("band_bound"))


# ---------------------------------------------------------------- run context


@dataclass
class Clause:
    name: str
    value: float
    bound: object
    op: str
    note: str = ""

    @property
    def passed(self) -> bool:
        v = self.value
        if v is None or not np.isfinite(v):
            return False
        if self.op == "<=":
            return v <= self.bound
        if self.op == ">=":
            return v >= self.bound
        lo, hi = self.bound
        return lo <= v <= hi

    def to_dict(self) -> dict:
        b = list(self.bound) if isinstance(self.bound, tuple) else self.bound
        return {"name": self.name, "value": _num(self.value), "op": self.op, "bound": b, "passed": self.passed, "note": self.note}


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else repr(x)


@dataclass
class RunContext:
    scenario: str
    cfg: dict
    seed: int
    rows: list = field(default_factory=list)
    clauses: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def rng(self, job: int) -> np.random.Generator:
        # deterministic job -> stream mapping, independent of scheduling
        return np.random.default_rng([self.seed, job])

    def row(self, symbol_id="", eps=math.nan, tau=math.nan, s=math.nan, t_window="", value=math.nan, residual=math.nan, slope=math.nan, r2=math.nan):
        value = complex(value)
        self.rows.append(
            {
                "scenario": self.scenario,
                "epsilon": float(eps),
                "tau": float(tau),
                "s": float(s),
                "t_window": t_window,
                "symbol_id": symbol_id,
                "value_re": value.real,
                "value_im": value.imag,
                "residual": float(residual),
                "fit_slope": float(slope),
                "fit_r2": float(r2),
            }
        )

    def check(self, name, value, op, bound, note=""):
        c = Clause(name, float(value) if value is not None else math.nan, bound, op, note)
        self.clauses.append(c)
        return c


# ---------------------------------------------------------------- shared helpers


def _group(cfg: dict) -> GroupStructure:
    g = cfg["group"]
    if isinstance(g, str):
        return builtin_group(g)
    grp = GroupStructure.from_json(g)
    grp.validate()
    return grp


def _grid(cfg: dict, group: GroupStructure) -> GridSpec:
    gd = dict(cfg["grid"])
    gd.setdefault("d", group.d)
    gd.setdefault("p", group.p)
    if gd["d"] != group.d or gd["p"] != group.p:
        raise ConfigError("grid dimensions do not match the group")
    return GridSpec(**gd)


def _window(cfg: dict, key: str = "window") -> TimeWindow:
    w = cfg["evolution"][key]
    return TimeWindow(float(w["center"]), float(w["half"]))


def _window_id(w: TimeWindow) -> str:
    return f"cos2(c={w.center:g},T={w.half:g})"


def _packet(cfg: dict, eps: float, bands, frame, w_z=None):
    pk = cfg["packet"]
    x0 = GroupPoint(pk["x0_v"], pk["x0_z"])
    w = float(w_z if w_z is not None else pk["w_z"])
    spec = WavePacketSpec(x0, float(pk["lam0"]), eps, tuple(tuple(b) for b in bands), w_z=w)
    grid, e = packet_grid(spec, z_extent=float(pk.get("z_extent", 16.0)))
    spec = WavePacketSpec(x0, spec.lam0, e, spec.bands, w)
    return packet_field(spec, grid, frame), e, grid, x0


def _fit_rows(ctx: RunContext, sid: str, tau: float, eps, values, t_window: str):
    slope, r2 = fit_slope(eps, values)
    ctx.row(sid, tau=tau, t_window=t_window, slope=slope, r2=r2)
    return slope, r2


# ---------------------------------------------------------------- scenarios


def run_plancherel(ctx: RunContext):
    cfg = ctx.cfg
    group = _group(cfg)
    grid = _grid(cfg, group)
    frame = fb.HermiteFrame(grid.d, int(cfg["frame"]["A"]))
    prm = cfg["params"]
    c0 = calibrate_c0(grid, frame, group)
    ctx.notes.append(f"c0 = {c0!r}")
    worst_p, worst_r = 0.0, 0.0
    for i in range(int(prm["n_functions"])):
        F = random_band_limited(grid, frame, ctx.rng(i), band=int(prm["band"]), group=group)
        f = inverse_gft(F, c0)
        Ff = forward_gft(f, frame, group)
        n2 = l2_norm(f) ** 2
        rel_p = abs(n2 - plancherel_norm_sq(Ff, c0)) / n2
        back = inverse_gft(Ff, c0)
        rel_r = float(np.linalg.norm(back.values - f.values) / np.linalg.norm(f.values))
        ctx.row(f"plancherel/f{i}", value=n2, residual=rel_p)
        ctx.row(f"roundtrip/f{i}", value=n2, residual=rel_r)
        worst_p, worst_r = max(worst_p, rel_p), max(worst_r, rel_r)
    tol = cfg["tolerances"]
    ctx.check("plancherel relative error", worst_p, "<=", tol["plancherel"])
    ctx.check("round-trip relative L2 error", worst_r, "<=", tol["roundtrip"])


def run_fiber_identities(ctx: RunContext):
    cfg = ctx.cfg
    group = _group(cfg)
    frame = fb.HermiteFrame(group.d, int(cfg["frame"]["A"]))
    prm, tol = cfg["params"], cfg["tolerances"]
    keep = frame.interior(fb.GUARD)
    sel = np.ix_(keep, keep)
    w_h, w_b, w_t = 0.0, 0.0, 0.0
    w_c = {float(r): 0.0 for r in prm["radii"]}
    for lam in prm["lams"]:
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if lam.size != group.p:
            raise ConfigError(f"frequency {lam.tolist()} has the wrong dimension for the group")
        lid = "lam=" + ",".join(f"{x:g}" for x in lam)
        h = float(np.abs(fb.assembled_hamiltonian(lam, frame).mat - fb.hamiltonian(lam, frame).mat)[sel].max())
        ctx.row(f"H-assembly/{lid}", residual=h)
        b = fb.bracket_identity_check(lam, frame)["interior"]
        ctx.row(f"bracket/{lid}", residual=b)
        w_h, w_b = max(w_h, h), max(w_b, b)
        for n in prm["bands"]:
            t = fb.band_T_identity_check(lam, frame, int(n))["residual"]
            ctx.row(f"band-T/n={n}/{lid}", residual=t)
            w_t = max(w_t, t)
            direct = fb.projector(int(n), lam, frame).mat
            for r in w_c:
                c = fb.projector_contour(int(n), lam, frame, int(prm["quad_nodes"]), r).mat
                err = float(np.abs(c - direct).max())
                ctx.row(f"contour/rho={r:g}/n={n}/{lid}", residual=err)
                w_c[r] = max(w_c[r], err)
    ctx.check("H from ladders (interior)", w_h, "<=", tol["assembly"])
    ctx.check("bracket commutators (interior)", w_b, "<=", tol["bracket"])
    ctx.check("band identity for T (interior)", w_t, "<=", tol["band_T"])
    for r, err in w_c.items():
        note = "trapezoid error decays like (rho/2)^nodes; at rho near 2 the nearest eigenvalue bounds it" if r > 1.5 else ""
        ctx.check(f"contour projector rho={r:g}", err, "<=", tol["contour"], note)


def run_commutator(ctx: RunContext):
    cfg = ctx.cfg
    group = _group(cfg)
    grid = _grid(cfg, group)
    frame = fb.HermiteFrame(grid.d, int(cfg["frame"]["A"]))
    prm, tol = cfg["params"], cfg["tolerances"]
    window = tuple(prm["state_window"])
    f = inverse_gft(random_band_limited(grid, frame, ctx.rng(0), band=int(prm["band"]), group=group, window=window))
    h = inverse_gft(random_band_limited(grid, frame, ctx.rng(1), band=int(prm["band"]), group=group, window=window))
    worst = 0.0
    for sspec in cfg["symbols"]["expansion"]:
        sym = build_symbol(sspec, grid)
        for eps in cfg["sweeps"]["eps"]:
            r = commutator_expansion_check(sym, float(eps), f, h, frame, group)
            ctx.row(sspec["id"], eps=eps, value=r["lhs"], residual=r["rel"])
            worst = max(worst, r["rel"])
    ctx.check("commutator expansion relative residual", worst, "<=", tol["expansion"])

    # sigma_1 identities on a small grid; pointwise, so the grid only fixes the sample points
    s1 = prm["sigma1"]
    sgroup = builtin_group(s1["group"]) if isinstance(s1["group"], str) else GroupStructure.from_json(s1["group"])
    sgrid = GridSpec(**{**s1["grid"], "d": sgroup.d, "p": sgroup.p})
    sframe = fb.HermiteFrame(sgroup.d, int(s1["A"]))
    sym = build_symbol(cfg["symbols"]["sigma1"], sgrid)
    lam = np.asarray(s1["lam"], dtype=float)
    pts = [(sgrid.n_pts // 4 + 1, 3), (sgrid.n_pts // 2 + 3, sgrid.n_z**sgrid.p // 2 + 1)]
    r2 = sigma1_commutator_residual(sym, sgroup, sframe, lam, pts)
    ctx.row("sigma1/commutator", residual=r2["residual"], value=r2["scale"])
    ctx.row("sigma1/commutator-opposite-sign", residual=r2["opposite_sign"], value=r2["scale"])
    ctx.check("sigma1 commutator with H (fiberwise)", r2["residual"], "<=", tol["sigma1_commutator"])
    w3 = 0.0
    for n in s1["bands"]:
        r3 = sigma1_band_residual(sym, sgroup, sframe, lam, int(n), pts)
        ctx.row(f"sigma1/band/n={n}", residual=r3["rel"], value=r3["scale"])
        w3 = max(w3, r3["rel"])
    ctx.check("sigma1 band compression (relative)", w3, "<=", tol["sigma1_band"])


def run_egorov(ctx: RunContext):
    cfg = ctx.cfg
    frame = fb.HermiteFrame(1, int(cfg["frame"]["A"]))
    prm, tol = cfg["params"], cfg["tolerances"]
    window = _window(cfg)
    wid = _window_id(window)
    tau = float(cfg["evolution"]["tau"])
    band = [[int(prm["band"]), 1.0]]
    for s in cfg["sweeps"]["s"]:
        s = float(s)
        eps_used, res, lhs_abs = [], [], []
        for eps in cfg["sweeps"]["eps"]:
            F, e, grid, _ = _packet(cfg, float(eps), band, frame)
            sym = build_symbol(cfg["symbols"]["diagonal"], grid)
            spec = EvolutionSpec(e, tau, window)
            r = egorov_residual(sym, spec, F, s)
            lit = egorov_residual(sym, spec, F, s, "plus")
            ctx.row("egorov/" + cfg["symbols"]["diagonal"]["id"], eps=e, tau=tau, s=s, t_window=wid, value=r["lhs"], residual=r["residual"])
            ctx.row("egorov-window-plus/" + cfg["symbols"]["diagonal"]["id"], eps=e, tau=tau, s=s, t_window=wid, value=lit["rhs"], residual=lit["residual"])
            eps_used.append(e)
            res.append(r["residual"])
            lhs_abs.append(abs(r["lhs"]))
        floor = 1e-12 * max(lhs_abs)
        for i in range(len(res) - 1):
            at_floor = res[i] <= floor or res[i + 1] <= floor
            ratio = res[i] / res[i + 1] if res[i + 1] > 0 else math.inf
            note = "residual at round-off level: the transport identity is exact for this data" if at_floor else ""
            ctx.check(
                f"Egorov residual ratio eps={eps_used[i]:.4g}->{eps_used[i + 1]:.4g} (s={s:g})",
                math.nan if at_floor else ratio,
                "in",
                tuple(tol["egorov_ratio"]),
                note,
            )
    # anti-diagonal decay on two-band data
    for atau in cfg["evolution"]["antidiag_tau"]:
        atau = float(atau)
        eps_used, vals = [], []
        for eps in cfg["sweeps"]["antidiag_eps"]:
            F, e, grid, _ = _packet(cfg, float(eps), prm["antidiag_bands"], frame)
            sym = build_symbol(cfg["symbols"]["antidiagonal"], grid)
            res = ModalExpectation(F, e, atau).time_average(sym, EvolutionSpec(e, atau, window))
            ctx.row("antidiag/" + cfg["symbols"]["antidiagonal"]["id"], eps=e, tau=atau, t_window=wid, value=res["value"], residual=res["rel_change"])
            eps_used.append(e)
            vals.append(res["value"])
        slope, _ = _fit_rows(ctx, "antidiag-fit/" + cfg["symbols"]["antidiagonal"]["id"], atau, eps_used, vals, wid)
        ctx.check(f"anti-diagonal slope tau={atau:g}", slope, ">=", tol["antidiag_slope_factor"] * min(atau, 1.0))


def run_transport_center(ctx: RunContext):
    cfg = ctx.cfg
    frame = fb.HermiteFrame(1, int(cfg["frame"]["A"]))
    prm, tol = cfg["params"], cfg["tolerances"]
    tau = float(cfg["evolution"]["tau"])
    times = np.linspace(0.0, float(prm["t_max"]), int(prm["n_times"]))
    lam0 = float(cfg["packet"]["lam0"])
    worst_speed, worst_angle = 0.0, 0.0
    for eps in cfg["sweeps"]["eps"]:
        for n in prm["bands"]:
            n = int(n)
            F, e, grid, _ = _packet(cfg, float(eps), [[n, 1.0]], frame)
            tr = centroid_track(field_modes(F, e, tau), times)
            vel = np.atleast_1d(tr["velocity"])
            target = (2 * n + frame.d) / 2.0
            speed = float(np.linalg.norm(vel))
            cosang = float(vel @ np.atleast_1d(np.sign(lam0))) / max(speed, 1e-300)
            angle = math.degrees(math.acos(max(-1.0, min(1.0, cosang))))
            ctx.row(f"z-drift/n={n}", eps=e, tau=tau, value=speed, residual=abs(speed / target - 1))
            worst_speed = max(worst_speed, abs(speed / target - 1))
            worst_angle = max(worst_angle, angle)
    ctx.check("z-drift speed vs (2n+d)/2, relative", worst_speed, "<=", tol["speed_rel"])
    ctx.check("drift direction vs lam0/|lam0| (degrees)", worst_angle, "<=", tol["angle_deg"])


def run_transport_euclidean(ctx: RunContext):
    cfg = ctx.cfg
    group = _group(cfg)
    grid = _grid(cfg, group)
    prm, tol = cfg["params"], cfg["tolerances"]
    tau = float(cfg["evolution"]["tau"])
    omega0 = np.asarray(prm["omega0"], dtype=float)
    x0 = GroupPoint(prm["x0_v"], prm["x0_z"])
    times = np.linspace(0.0, float(prm["t_max"]), int(prm["n_times"]))
    worst_drift, worst_l2 = 0.0, 0.0
    for eps in cfg["sweeps"]["eps"]:
        eps = float(eps)
        f = synthesize_euclidean_packet(grid, x0, omega0, eps, w_v=float(prm["w_v"]), w_z=float(prm["w_z"]))
        m0 = to_mixed(f)
        vals = f.values.reshape(grid.n_v, grid.n_v, grid.n_z)
        cents = []
        for t in times:
            mt = mixed_evolve(m0, float(t), eps, tau, group)
            cents.append(v_centroid(mt))
            base = np.stack([euclidean_evolve(vals[:, :, j], float(t), eps, tau, grid.dv) for j in range(grid.n_z)], axis=-1)
            a = v_marginal(mt)
            b = v_marginal(to_mixed(PhysicalState(grid, base.reshape(grid.shape))))
            err = float(np.linalg.norm(a - b) / np.linalg.norm(b))
            ctx.row("v-marginal-vs-euclidean", eps=eps, tau=tau, s=float(t), residual=err)
            worst_l2 = max(worst_l2, err)
        cents = np.array(cents)
        vel = np.array([np.polyfit(times, cents[:, k], 1)[0] for k in range(cents.shape[1])])
        target = float(np.linalg.norm(omega0))
        rel = abs(float(np.linalg.norm(vel)) / target - 1)
        ctx.row("v-drift", eps=eps, tau=tau, value=float(np.linalg.norm(vel)), residual=rel)
        worst_drift = max(worst_drift, rel)
    ctx.check("v-drift speed vs |omega0|, relative", worst_drift, "<=", tol["drift_rel"])
    ctx.check("v-marginal vs Euclidean baseline, relative L2", worst_l2, "<=", tol["baseline_l2"])


def run_dispersion(ctx: RunContext):
    cfg = ctx.cfg
    frame = fb.HermiteFrame(1, int(cfg["frame"]["A"]))
    prm, tol = cfg["params"], cfg["tolerances"]
    window = _window(cfg)
    wid = _window_id(window)
    band = [[int(prm["band"]), 1.0]]
    eps_list = [float(e) for e in cfg["sweeps"]["eps"]]
    for tau in cfg["evolution"]["taus"]:
        tau = float(tau)
        masses = []
        for eps in eps_list:
            F, e, grid, x0 = _packet(cfg, eps, band, frame)
            r = averaged_ball_mass(field_modes(F, e, tau), x0, float(prm["radius"]), window)
            ctx.row(f"ball-mass/r={prm['radius']:g}", eps=e, tau=tau, t_window=wid, value=r["value"], residual=r.get("rel_change", math.nan))
            masses.append(float(np.real(r["value"])))
        if tau > 2:
            ctx.check(f"in-ball mass decrease factor tau={tau:g}", masses[0] / masses[-1], ">=", tol["decrease_factor"])
        else:
            ctx.check(f"in-ball mass stability tau={tau:g}", abs(masses[-1] / masses[0] - 1), "<=", tol["stability_rel"])


def run_oscillation(ctx: RunContext):
    cfg = ctx.cfg
    frame = fb.HermiteFrame(1, int(cfg["frame"]["A"]))
    prm, tol = cfg["params"], cfg["tolerances"]
    lam0 = abs(float(cfg["packet"]["lam0"]))
    hi_w, lo_w = 0.0, 0.0
    for eps in cfg["sweeps"]["eps"]:
        for n in prm["bands"]:
            n = int(n)
            F, e, grid, _ = _packet(cfg, float(eps), [[n, 1.0]], frame)
            base = lam0 * (2 * n + frame.d)
            R, delta = prm["R_factor"] * base, prm["delta_factor"] * base
            prof = oscillation_profile(F, e, [R], [delta])
            ctx.row(f"high-tail/n={n}/R={R:g}", eps=e, value=prof.high[0], residual=prof.high[0] / prof.norm_sq)
            ctx.row(f"low-tail/n={n}/delta={delta:g}", eps=e, value=prof.low[0], residual=prof.low[0] / prof.norm_sq)
            hi_w, lo_w = max(hi_w, prof.high[0] / prof.norm_sq), max(lo_w, prof.low[0] / prof.norm_sq)
    ctx.check("high-frequency tail", hi_w, "<=", tol["high_tail"])
    ctx.check("low-frequency tail (strict packets)", lo_w, "<=", tol["low_tail"])

    # split of the energy density between central and first-stratum frequencies
    ms = prm["marginal"]
    grid = GridSpec(**ms["grid"])
    mframe = fb.HermiteFrame(1, int(ms["A"]))
    eps = float(ms["eps"])
    x0 = GroupPoint([0.0, 0.0], [0.0])
    fl = inverse_gft(packet_field(WavePacketSpec(x0, float(ms["lam0"]), eps, ((0, 1.0),), w_z=float(ms["w_z"])), grid, mframe))
    fe = synthesize_euclidean_packet(grid, x0, ms["omega0"], eps, w_v=float(ms["w_v"]), w_z=float(ms["w_z_euclidean"]))
    mix = PhysicalState(grid, (fl.values + fe.values) / math.sqrt(2))
    v_radius = float(ms["v_radius"])

    def v_cut(w):
        return smooth_step(v_radius - np.linalg.norm(w, axis=-1))

    prof = Profile.constant(grid)
    split = {}
    for name, f in (("lambda-packet", fl), ("euclidean-packet", fe), ("mixture", mix)):
        r = marginal_split(to_mixed(f), eps, prof, float(ms["delta"]), v_cut)
        tot = r["total"].real
        split[name] = (r["z_part"].real / tot, r["v_part"].real / tot, r["deficit"])
        ctx.row(f"split-z/{name}", eps=eps, value=r["z_part"], residual=r["deficit"])
        ctx.row(f"split-v/{name}", eps=eps, value=r["v_part"], residual=r["deficit"])
    frac = central_mass_fraction(fe, eps, float(ms["delta"]) / 2)
    ctx.row("central-fraction/euclidean-packet", eps=eps, value=frac)
    ctx.check("split deficit", max(s[2] for s in split.values()), "<=", tol["split_deficit"])
    ctx.check("lambda-packet first-stratum share", abs(split["lambda-packet"][1]), "<=", tol["v_share_lambda_packet"])
    ctx.check("mixture central share vs 1/2", abs(split["mixture"][0] - 0.5), "<=", tol["mixture"])
    ctx.check("euclidean packet central spectral mass", frac, "<=", tol["euclidean_central"])


def run_jdiag(ctx: RunContext):
    cfg = ctx.cfg
    frame = fb.HermiteFrame(1, int(cfg["frame"]["A"]))
    prm, tol = cfg["params"], cfg["tolerances"]
    window = _window(cfg)
    wid = _window_id(window)
    band = [[int(prm["band"]), 1.0]]
    for tau in cfg["evolution"]["taus"]:
        tau = float(tau)
        eps_used, res = [], []
        for eps in cfg["sweeps"]["eps"]:
            F, e, grid, _ = _packet(cfg, float(eps), band, frame)
            sym = build_symbol(cfg["symbols"]["symbol"], grid)
            r = j_eps_diagnostic(sym, EvolutionSpec(e, tau, window), F, bands=range(int(prm["n_bands"])))
            ctx.row("j-eps/" + cfg["symbols"]["symbol"]["id"], eps=e, tau=tau, t_window=wid, value=r["lhs"], residual=r["residual"])
            eps_used.append(e)
            res.append(r["residual"])
        slope, _ = _fit_rows(ctx, "j-eps-fit/" + cfg["symbols"]["symbol"]["id"], tau, eps_used, res, wid)
        ctx.check(f"j_eps residual slope tau={tau:g}", slope, ">=", tol["slope_factor"] * min(1.0, tau))


# ---------------------------------------------------------------- scenario table

_HEIS_GRID = {"v_extent": 10.0, "z_extent": 8 * math.pi, "n_v": 64, "n_z": 64}
_PACKET = {"lam0": 1.0, "x0_v": [0.0, 0.0], "x0_z": [0.0], "w_z": 0.5, "z_extent": 16.0}
_CUT = {"lo": 0.5, "hi": 2.0, "ramp": 0.25}


def _gauss(**kw):
    return {"kind": "gaussian", **kw}


@dataclass(frozen=True)
class Scenario:
    name: str
    summary: str
    statement: str
    runner: Callable
    defaults: dict
    budget_s: float
    required: tuple = ()


SCENARIOS = {
    s.name: s
    for s in (
        Scenario(
            "plancherel",
            "Plancherel identity and inversion of the group Fourier transform.",
            "||f||^2 = c0 sum_lam ||Ff(lam)||_HS^2 |lam|^d dlam after c0 calibration; inverse(forward(f)) = f on band-limited data.",
            run_plancherel,
            {
                "grid": _HEIS_GRID,
                "frame": {"A": 24},
                "params": {"n_functions": 5, "band": 2},
                "tolerances": {"plancherel": 1e-6, "roundtrip": 1e-6},
            },
            60.0,
            ("grid", "frame"),
        ),
        Scenario(
            "fiber-identities",
            "Exact fiber identities: ladder assembly of H, bracket commutators, band identity for T, contour projectors.",
            "Residuals on the interior block (guard 2); contour projector with 64 trapezoid nodes at radii 0.5, 1, 1.9.",
            run_fiber_identities,
            {
                "frame": {"A": 24},
                "params": {"lams": [[0.7], [-1.3], [2.0]], "bands": [0, 1, 2], "radii": [0.5, 1.0, 1.9], "quad_nodes": 64},
                "tolerances": {"assembly": 1e-10, "bracket": 1e-10, "band_T": 1e-10, "contour": 1e-8},
            },
            5.0,
            ("frame",),
        ),
        Scenario(
            "commutator",
            "Commutator expansion of [-eps^2 Delta, Op(sigma)] and the sigma_1 identities.",
            "Bilinear-form residual of [-eps^2 Delta, Op(s)] = Op([H,s]) - 2 eps Op(V.pi(V)s) - eps^2 Op(Delta s); "
            "[H, sigma_1] = V.pi(V) sigma and the band-n compression of V.pi(V) sigma_1.",
            run_commutator,
            {
                "grid": _HEIS_GRID,
                "frame": {"A": 24},
                "sweeps": {"eps": [0.2, 0.1]},
                "params": {
                    "band": 2,
                    "state_window": [0.96, 2.0],
                    "sigma1": {
                        "group": "heisenberg1",
                        "grid": {"v_extent": 10.0, "z_extent": 8 * math.pi, "n_v": 32, "n_z": 32},
                        "A": 12,
                        "lam": [1.3],
                        "bands": [0, 1, 2],
                    },
                },
                "symbols": {
                    "expansion": [
                        {"id": "x-independent", "terms": [{"profile": {"kind": "constant"}, "fiber": {"kind": "field", "which": "P"}}]},
                        {
                            "id": "diagonal-a(z)Pi0",
                            "terms": [{"profile": _gauss(z_width=3.0), "fiber": {"kind": "projector", "n": 0}}],
                        },
                        {
                            "id": "two-band",
                            "terms": [
                                {"profile": _gauss(v_width=1.5, z_width=3.0), "fiber": {"kind": "projector", "n": 0}},
                                {"profile": _gauss(v_width=1.5, z_width=3.0), "fiber": {"kind": "block", "of": {"kind": "field", "which": "P"}, "rows": 0, "cols": 1}},
                                {"profile": _gauss(v_width=1.5, z_width=3.0), "fiber": {"kind": "block", "of": {"kind": "field", "which": "P"}, "rows": 1, "cols": 0}},
                            ],
                        },
                    ],
                    "sigma1": {
                        "id": "heat-with-cutoff",
                        "cutoff": _CUT,
                        "terms": [{"profile": _gauss(v_center=[0.3, 0.3], v_width=1.5, z_width=2.0), "fiber": {"kind": "heat", "t": 0.25}}],
                    },
                },
                "tolerances": {"expansion": 1e-5, "sigma1_commutator": 1e-6, "sigma1_band": 1e-5},
            },
            180.0,
            ("grid", "frame", "sweeps", "symbols"),
        ),
        Scenario(
            "egorov",
            "Egorov transport for diagonal symbols at tau = 2 and decay of anti-diagonal pairings.",
            "|l(theta, s_d) - l(theta(. - s), Phi^{-s} s_d)| with ratio under eps-halving in [1.5, 2.7]; "
            "anti-diagonal time averages decay with slope >= 0.8 min(tau, 1).",
            run_egorov,
            {
                "frame": {"A": 10},
                "packet": _PACKET,
                "evolution": {"tau": 2.0, "antidiag_tau": [0.5, 2.0], "window": {"center": 0.0, "half": 1.0}},
                "sweeps": {"eps": [0.2, 0.1, 0.05], "s": [0.5], "antidiag_eps": [0.2, 0.1, 0.05, 0.025]},
                "params": {"band": 0, "antidiag_bands": [[0, 1.0], [1, 1.0]]},
                "symbols": {
                    "diagonal": {
                        "id": "a(z)Pi0",
                        "cutoff": _CUT,
                        "band_bound": 0,
                        "terms": [{"profile": _gauss(z_center=0.3, z_width=1.0), "fiber": {"kind": "block", "of": {"kind": "identity"}, "rows": 0, "cols": 0}}],
                    },
                    "antidiagonal": {
                        "id": "a(z)(Pi0 P Pi1 + Pi1 P Pi0)",
                        "cutoff": _CUT,
                        "band_bound": 1,
                        "terms": [
                            {"profile": _gauss(z_center=0.3, z_width=1.0), "fiber": {"kind": "block", "of": {"kind": "field", "which": "P"}, "rows": 0, "cols": 1}},
                            {"profile": _gauss(z_center=0.3, z_width=1.0), "fiber": {"kind": "block", "of": {"kind": "field", "which": "P"}, "rows": 1, "cols": 0}},
                        ],
                    },
                },
                "tolerances": {"egorov_ratio": [1.5, 2.7], "antidiag_slope_factor": 0.8},
            },
            600.0,
            ("packet", "evolution", "sweeps", "symbols"),
        ),
        Scenario(
            "transport-center",
            "Central transport of band-n packets at tau = 2.",
            "z-centroid drift speed (2n+d)/2 (coefficient (2n+d)/(2|lam|) times |Z^lam| = |lam|) within 5%, "
            "direction lam0/|lam0| within 3 degrees.",
            run_transport_center,
            {
                "frame": {"A": 10},
                "packet": _PACKET,
                "evolution": {"tau": 2.0},
                "sweeps": {"eps": [0.05]},
                "params": {"bands": [0, 1, 2], "t_max": 1.0, "n_times": 6},
                "tolerances": {"speed_rel": 0.05, "angle_deg": 3.0},
            },
            600.0,
            ("packet", "evolution", "sweeps"),
        ),
        Scenario(
            "transport-euclidean",
            "First-stratum transport of Euclidean packets at tau = 1.",
            "v-centroid drift |omega0| within 5% and v-marginal agreement with the free Euclidean propagator within 2% relative L2.",
            run_transport_euclidean,
            {
                "grid": {"v_extent": 4.0, "z_extent": 16.0, "n_v": 128, "n_z": 64},
                "evolution": {"tau": 1.0},
                "sweeps": {"eps": [0.05]},
                "params": {"omega0": [1.0, 0.0], "x0_v": [-0.5, 0.0], "x0_z": [0.0], "w_v": 0.5, "w_z": 2.0, "t_max": 1.0, "n_times": 5},
                "tolerances": {"drift_rel": 0.05, "baseline_l2": 0.02},
            },
            300.0,
            ("grid", "evolution", "sweeps"),
        ),
        Scenario(
            "dispersion",
            "Dispersion above the critical time scale.",
            "Time-averaged mass in the unit quasi-norm ball drops by a factor >= 2 from eps=0.2 to 0.05 at tau=2.5 "
            "and stays within 10% at tau=1.5.",
            run_dispersion,
            {
                "frame": {"A": 10},
                "packet": {**_PACKET, "w_z": 0.35},
                "evolution": {"taus": [2.5, 1.5], "window": {"center": 1.0, "half": 1.0}},
                "sweeps": {"eps": [0.2, 0.05]},
                "params": {"band": 0, "radius": 1.0},
                "tolerances": {"decrease_factor": 2.0, "stability_rel": 0.1},
            },
            600.0,
            ("packet", "evolution", "sweeps"),
        ),
        Scenario(
            "oscillation",
            "eps-oscillation of packet families and the central / first-stratum split of the energy density.",
            "High tail at R = 16 x baseline and low tail at delta = baseline/16 below 1e-3 at eps = 0.05; "
            "split deficit, lambda-packet first-stratum share, mixture share and Euclidean central mass.",
            run_oscillation,
            {
                "frame": {"A": 10},
                "packet": _PACKET,
                "sweeps": {"eps": [0.05]},
                "params": {
                    "bands": [0, 1],
                    "R_factor": 16.0,
                    "delta_factor": 1.0 / 16.0,
                    "marginal": {
                        "grid": {"v_extent": 3.0, "z_extent": 8.0, "n_v": 64, "n_z": 256},
                        "A": 12,
                        "eps": 0.05,
                        "lam0": 0.05,
                        "w_z": 1.0,
                        "omega0": [1.0, 0.0],
                        "w_v": 0.7,
                        "w_z_euclidean": 2.0,
                        "delta": 0.025,
                        "v_radius": 3.0,
                    },
                },
                "tolerances": {
                    "high_tail": 1e-3,
                    "low_tail": 1e-3,
                    "split_deficit": 0.05,
                    "v_share_lambda_packet": 1e-3,
                    "mixture": 0.05,
                    "euclidean_central": 1e-3,
                },
            },
            120.0,
            ("packet", "sweeps"),
        ),
        Scenario(
            "jdiag",
            "The j_eps identity for H-commuting symbols.",
            "2 l(V.pi(V) sigma_1) + l(Delta sigma)/2 against sum_n l(i(2n+d)/(2|lam|) Z Pi_n sigma Pi_n); "
            "residual slope >= 0.8 min(1, tau).",
            run_jdiag,
            {
                "frame": {"A": 10},
                "packet": _PACKET,
                "evolution": {"taus": [2.0, 0.5], "window": {"center": 0.0, "half": 1.0}},
                "sweeps": {"eps": [0.2, 0.1, 0.05]},
                "params": {"band": 0, "n_bands": 4},
                "symbols": {
                    "symbol": {
                        "id": "a(z)exp(-H/4)",
                        "cutoff": _CUT,
                        "terms": [{"profile": _gauss(z_center=0.3, z_width=1.0), "fiber": {"kind": "heat", "t": 0.25}}],
                    }
                },
                "tolerances": {"slope_factor": 0.8},
            },
            600.0,
            ("packet", "evolution", "sweeps", "symbols"),
        ),
    )
}

_TOP_KEYS = {"scenario", "group", "grid", "frame", "evolution", "packet", "sweeps", "params", "symbols", "tolerances", "output", "seed"}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "group":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict) -> dict:
    """Merge a user config over the scenario defaults and validate it."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    name = raw.get("scenario")
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}")
    sc = SCENARIOS[name]
    base = {"group": "heisenberg1", "seed": 0, "output": {"dir": None, "formats": ["csv", "json", "txt"]}}
    cfg = _merge(_merge(base, sc.defaults), raw)
    g = cfg["group"]
    if isinstance(g, str):
        if g not in BUILTIN_GROUPS:
            raise ConfigError(f"unknown group preset {g!r}; known: {sorted(BUILTIN_GROUPS)}")
    elif isinstance(g, dict):
        try:
            GroupStructure.from_json(g).validate()
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid group structure: {exc}") from None
    else:
        raise ConfigError("group must be a preset name or a {d, p, B} object")
    for key in sc.required:
        if not cfg.get(key):
            raise ConfigError(f"scenario {name!r} requires {key!r}")
    for key, vals in cfg.get("sweeps", {}).items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep {key!r} must be a nonempty list")
        if not all(isinstance(v, (int, float)) for v in vals):
            raise ConfigError(f"sweep {key!r} must hold numbers")
        if "eps" in key and not all(0 < v <= 1 for v in vals):
            raise ConfigError(f"sweep {key!r}: eps must lie in (0, 1]")
    if "grid" in cfg:
        try:
            GridSpec(**{k: v for k, v in cfg["grid"].items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid grid: {exc}") from None
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


# ---------------------------------------------------------------- outputs


def _commit() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_csv(path: str, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            # repr round-trips floats exactly, so identical numbers give identical bytes
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in CSV_COLUMNS])


def _report(summary: dict, ctx: RunContext | None) -> str:
    lines = [
        f"scenario: {summary['scenario']}",
        f"status:   {summary['status']} (exit {summary['exit_code']})",
        f"runtime:  {summary['runtime_s']:.2f} s (budget {summary['budget_s']:g} s)",
        f"commit:   {summary['commit']}",
        f"seed:     {summary['seed']}",
    ]
    if summary.get("reason"):
        lines.append(f"reason:   {summary['reason']['kind']}: {summary['reason']['message']}")
    if ctx is not None:
        lines.append("")
        lines.append("clauses:")
        for c in ctx.clauses:
            b = f"[{c.bound[0]:g}, {c.bound[1]:g}]" if c.op == "in" else f"{c.op} {c.bound:g}"
            lines.append(f"  {'PASS' if c.passed else 'FAIL'}  {c.name}: {c.value:.6g} {b}" + (f"  ({c.note})" if c.note else ""))
        fits = [r for r in ctx.rows if math.isfinite(r["fit_slope"])]
        if fits:
            lines.append("")
            lines.append("slopes:")
            for r in fits:
                lines.append(f"  {r['symbol_id']}  tau={r['tau']:g}  slope={r['fit_slope']:.4f}  r2={r['fit_r2']:.4f}")
        lines.append("")
        lines.append(f"rows: {len(ctx.rows)}")
        for n in ctx.notes:
            lines.append(f"note: {n}")
    return "\n".join(lines) + "\n"


def _finish(out_dir: str, summary: dict, ctx: RunContext | None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    formats = set((summary.get("config") or {}).get("output", {}).get("formats", ["csv", "json", "txt"]))
    formats.add("json")  # the summary carries the machine-readable status, always written
    if ctx is not None and "csv" in formats:
        write_csv(os.path.join(out_dir, "results.csv"), ctx.rows)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, default=str)
    if "txt" in formats:
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(_report(summary, ctx))


# ---------------------------------------------------------------- commands


def run(config_path: str, out: str | None = None, threads: int | None = None, seed: int | None = None) -> int:
    """Execute one scenario; returns the process exit code."""
    t0 = time.perf_counter()
    summary = {
        "scenario": None,
        "status": "error",
        "exit_code": EXIT_ERROR,
        "reason": None,
        "runtime_s": 0.0,
        "budget_s": 0.0,
        "commit": _commit(),
        "version": __version__,
        "numba": USE_NUMBA,
        "threads": threads,
        "seed": seed,
        "config": None,
        "clauses": [],
    }
    ctx = None
    out_dir = out or os.environ.get(OUT_ENV)
    try:
        try:
            with open(config_path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read {config_path}: {exc.strerror}") from None
        if seed is not None:
            raw = {**raw, "seed": seed}
        cfg = resolve_config(raw)
        sc = SCENARIOS[cfg["scenario"]]
        out_dir = out_dir or cfg["output"].get("dir") or os.path.join("htsemi-out", sc.name)
        cfg["output"]["dir"] = out_dir
        summary.update(scenario=sc.name, config=cfg, seed=cfg["seed"], budget_s=sc.budget_s)
        if threads:
            set_threads(threads)
        ctx = RunContext(sc.name, cfg, cfg["seed"])
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message=".*TBB.*")
            sc.runner(ctx)
        failed = [c.name for c in ctx.clauses if not c.passed]
        summary["clauses"] = [c.to_dict() for c in ctx.clauses]
        if failed:
            summary.update(status="tolerance-failure", exit_code=EXIT_TOLERANCE, reason={"kind": "tolerance", "message": "; ".join(failed)})
        else:
            summary.update(status="pass", exit_code=EXIT_OK)
    except ConfigError as exc:
        summary["reason"] = {"kind": "config", "message": str(exc)}
    except Exception as exc:  # runtime failure: report, never crash without a summary
        summary["reason"] = {"kind": "runtime", "message": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}
    summary["runtime_s"] = time.perf_counter() - t0
    summary["within_budget"] = summary["runtime_s"] <= summary["budget_s"] if summary["budget_s"] else None
    if ctx is not None and ctx.clauses:
        summary["clauses"] = [c.to_dict() for c in ctx.clauses]
    out_dir = out_dir or "htsemi-out"
    try:
        _finish(out_dir, summary, ctx)
    except OSError as exc:
        print(json.dumps({"status": "error", "reason": {"kind": "output", "message": str(exc)}}), file=sys.stderr)
        return EXIT_ERROR
    if summary["reason"] is not None:
        print(json.dumps({"status": summary["status"], "reason": {k: summary["reason"][k] for k in ("kind", "message")}}), file=sys.stderr)
    if ctx is not None:
        sys.stdout.write(_report(summary, ctx))
    return summary["exit_code"]


def list_scenarios() -> str:
    width = max(len(n) for n in SCENARIOS)
    return "\n".join(f"{n:<{width}}  {s.summary}" for n, s in SCENARIOS.items()) + "\n"


def describe(name: str) -> str:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(SCENARIOS)}")
    sc = SCENARIOS[name]
    lines = [f"{sc.name}: {sc.summary}", "", f"checks: {sc.statement}", "", "default tolerances:"]
    for k, v in sc.defaults.get("tolerances", {}).items():
        lines.append(f"  {k} = {v}")
    lines.append(f"runtime budget: {sc.budget_s:g} s")
    lines.append("")
    lines.append("defaults:")
    lines.append(json.dumps({k: v for k, v in sc.defaults.items() if k != "tolerances"}, indent=2))
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="htsemi", description="Semiclassical experiments on H-type groups.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario from a JSON config")
    p_run.add_argument("config", help="path to the JSON config")
    p_run.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    p_run.add_argument("--threads", type=int, default=None, help="worker threads for the compiled kernels")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_parser("list", help="list scenarios")
    p_desc = sub.add_parser("describe", help="describe one scenario")
    p_desc.add_argument("scenario")
    args = parser.parse_args(argv)

    if args.command == "run":
        if args.threads is not None and args.threads < 1:
            parser.error("--threads must be positive")
        return run(args.config, args.out, args.threads, args.seed)
    if args.command == "list":
        sys.stdout.write(list_scenarios())
        return EXIT_OK
    try:
        sys.stdout.write(describe(args.scenario))
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
