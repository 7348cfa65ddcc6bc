"""Command-line front end: config validation, cached parallel sweeps, CSV output.

Every experiment is a JSON document::

    {"schema_version": 1, "experiment": "gamma-map",
     "params": {"scheme": "combined_tpe"},
     "noise": {"kappa1": 1e-3, "n_th": 1e-2},
     "grid": {"nbar": [2, 4, 6], "ratio": [2, 5, 10]}}

Grid axes are expanded as a Cartesian product.  Each point is keyed by a hash
of the canonical config plus the point itself; completed points are stored in
an append-only JSON-lines ledger (``$CATCONFINE_CACHE_DIR/ledger.jsonl``) and
skipped on later runs unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CatConfineError, ConfigError, MemoryBudgetError

SCHEMA_VERSION = 1
EXPERIMENTS = ("spectrum", "idle-bitflip", "gamma-map", "zgate", "cnot", "buffer-noise", "circuit-params")
SCHEMES = ("dissipative", "combined_kerr", "combined_tpe")
TOP_KEYS = {"schema_version", "experiment", "params", "noise", "grid", "seed", "rtol", "atol", "dim",
            "output", "buffer", "circuit"}
# grid axes accepted per experiment
GRID_AXES = {
    "spectrum": {"nbar", "scheme"},
    "idle-bitflip": {"nbar", "ratio", "scheme", "n_th", "kappa_phi", "kappa1"},
    "gamma-map": {"nbar", "ratio", "scheme", "n_th", "kappa_phi", "kappa1"},
    "zgate": {"nbar", "T", "ratio", "scheme", "theta", "drive_shape"},
    "cnot": {"nbar", "T", "ratio", "scheme"},
    "buffer-noise": {"nbar", "T", "chi_hh", "kappa_bh", "n_th_h", "kappa_phi_h", "levels"},
    "circuit-params": {"eta", "phi_h"},
}
REQUIRED_AXES = {
    "spectrum": {"nbar"},
    "idle-bitflip": {"nbar"},
    "gamma-map": {"nbar", "ratio"},
    "zgate": {"T"},
    "cnot": {"T"},
    "buffer-noise": {"T"},
    "circuit-params": set(),
}
POSITIVE_AXES = {"nbar", "T"}
CIRCUIT_FIELDS = ("E_J", "eta", "phi_a", "phi_h", "phi_l", "eps1", "eps2", "omega_a", "omega_h",
                  "omega_l", "kappa_a", "kappa_bh", "kappa_bl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    experiment: str
    grid: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    buffer: dict = field(default_factory=dict)
    circuit: dict = field(default_factory=dict)
    seed: int = 0
    rtol: float | None = None
    atol: float | None = None
    dim: int | None = None
    output: str | None = None
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        report = validate_config(d)
        if report["errors"]:
            path, msg = report["errors"][0]
            raise ConfigError(msg, path)
        kw = {k: d[k] for k in TOP_KEYS if k in d}
        return cls(**kw)

    def canonical(self) -> dict:
        """Config content that determines results (output location excluded)."""
        d = asdict(self)
        d.pop("output")
        return d

    def config_hash(self) -> str:
        return _hash(self.canonical())

    def points(self) -> list:
        axes = sorted(self.grid)
        if not axes:
            return [{}]
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.grid[a] for a in axes))]


@dataclass
class ResultRecord:
    config_hash: str
    point_hash: str
    point: dict
    outputs: dict
    wall_time: float
    diagnostics: dict = field(default_factory=dict)
    cached: bool = False


def _canonical_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default).encode()


def _hash(obj) -> str:
    return hashlib.sha256(_canonical_bytes(obj)).hexdigest()


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, complex):
        return {"re": x.real, "im": x.imag}
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from exc
    if not isinstance(d, dict):
        raise ConfigError("top level must be an object", str(path))
    return d


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate_config(cfg: dict | str | Path) -> dict:
    """Schema and physics sanity checks; never runs a simulation.

    Returns ``{"errors": [(path, msg)], "warnings": [(path, msg)]}``.
    """
    if not isinstance(cfg, dict):
        cfg = load_config(cfg)
    errs, warns = [], []
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        errs.append(("experiment", f"must be one of {list(EXPERIMENTS)}, got {exp!r}"))
        return {"errors": errs, "warnings": warns}
    sv = cfg.get("schema_version", SCHEMA_VERSION)
    if sv != SCHEMA_VERSION:
        errs.append(("schema_version", f"unsupported schema version {sv!r}"))
    for k in sorted(set(cfg) - TOP_KEYS):
        warns.append((k, "unknown key ignored"))

    grid = cfg.get("grid", {})
    if not isinstance(grid, dict):
        errs.append(("grid", "must be an object of lists"))
        grid = {}
    for axis in sorted(REQUIRED_AXES[exp] - set(grid)):
        errs.append((f"grid.{axis}", "required axis missing"))
    for axis, vals in sorted(grid.items()):
        p = f"grid.{axis}"
        if axis not in GRID_AXES[exp]:
            errs.append((p, f"axis not supported by {exp}"))
            continue
        if not isinstance(vals, list) or len(vals) == 0:
            errs.append((p, "must be a non-empty list"))
            continue
        for i, v in enumerate(vals):
            if axis in ("scheme", "drive_shape"):
                allowed = SCHEMES if axis == "scheme" else ("constant", "superadiabatic")
                if v not in allowed:
                    errs.append((f"{p}[{i}]", f"must be one of {list(allowed)}"))
            elif not _is_number(v):
                errs.append((f"{p}[{i}]", "must be a finite number"))
            elif axis in POSITIVE_AXES and v <= 0:
                errs.append((f"{p}[{i}]", "must be positive"))
            elif v < 0:
                errs.append((f"{p}[{i}]", "must be nonnegative"))

    for section in ("params", "noise", "buffer", "circuit"):
        sec = cfg.get(section, {})
        if not isinstance(sec, dict):
            errs.append((section, "must be an object"))
            continue
        for k, v in sorted(sec.items()):
            if k in ("scheme", "drive_shape", "method", "schemes", "alpha"):
                continue
            if isinstance(v, bool) or v is None:
                continue
            if section == "params" and isinstance(v, (list, str)):
                continue
            if not _is_number(v):
                errs.append((f"{section}.{k}", "must be a finite number"))
            elif v < 0 and not (section == "circuit" and k in ("eta", "eps1", "eps2")):
                errs.append((f"{section}.{k}", "must be nonnegative"))
    params = cfg.get("params", {}) if isinstance(cfg.get("params", {}), dict) else {}
    if "scheme" in params and params["scheme"] not in SCHEMES:
        errs.append(("params.scheme", f"must be one of {list(SCHEMES)}"))
    if "T_idle" in params and _is_number(params["T_idle"]) and params["T_idle"] <= 0:
        errs.append(("params.T_idle", "must be positive"))
    if exp == "circuit-params":
        circ = cfg.get("circuit", {}) if isinstance(cfg.get("circuit", {}), dict) else {}
        for k in CIRCUIT_FIELDS:
            if k not in circ:
                errs.append((f"circuit.{k}", "required field missing"))
    for key in ("rtol", "atol"):
        v = cfg.get(key)
        if v is not None and (not _is_number(v) or v <= 0):
            errs.append((key, "must be a positive number"))
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errs.append(("seed", "must be a nonnegative integer"))

    if errs:
        return {"errors": errs, "warnings": warns}

    # physics sanity
    from .fock import rule_dim

    nbars = grid.get("nbar") or ([params["nbar"]] if _is_number(params.get("nbar")) else [])
    dim = cfg.get("dim")
    if dim is not None:
        if not isinstance(dim, int) or dim < 2:
            errs.append(("dim", "must be an integer >= 2"))
        elif nbars:
            need = rule_dim(math.sqrt(max(nbars)))
            if exp == "cnot":
                from .gates import cnot_dim

                need = cnot_dim(max(nbars), bool(params.get("bitflip", False)))
            if dim < need:
                warns.append(("dim", f"below the truncation rule for |alpha|^2={max(nbars)}; suggested dim {need}"))
    if exp in ("idle-bitflip", "gamma-map") and nbars:
        noise = cfg.get("noise", {})
        k1, nth, kphi = noise.get("kappa1", 0.0), noise.get("n_th", 0.0), noise.get("kappa_phi", 0.0)
        kappa2 = params.get("kappa2", 1.0)
        if kappa2 > 0 and "T_idle" in params:
            for nb in nbars:
                cov = params["T_idle"] * 4 * nb * kappa2
                if cov < 10:
                    warns.append(("params.T_idle", f"t*kappa_conf = {cov:.3g} < 10 at |alpha|^2={nb}; rate fit window too short"))
        kl = k1 * nth + max(nbars) * kphi
        T = params.get("T_idle", 10.0 / (4 * min(nbars) * kappa2) if kappa2 > 0 else 0.0)
        if kl * T > 0.1:
            warns.append(("noise", f"kappa_l * T_idle = {kl * T:.3g} > 0.1: leaves the small-probability regime"))
    return {"errors": errs, "warnings": warns}


# ------------------------------------------------------------------ runners


def _noise(cfg: dict, point: dict):
    from .dynamics import NoiseConfig

    n = dict(cfg.get("noise", {}))
    for k in ("kappa1", "n_th", "kappa_phi"):
        if k in point:
            n[k] = point[k]
    return NoiseConfig(**{k: float(v) for k, v in n.items() if k in ("kappa1", "n_th", "kappa_phi")})


def _confinement(scheme: str, ratio: float, kappa2: float):
    from .dynamics import ConfinementConfig

    if scheme == "dissipative":
        return ConfinementConfig(kappa2=kappa2)
    if scheme == "combined_kerr":
        return ConfinementConfig(kappa2=kappa2, kerr=ratio * kappa2)
    return ConfinementConfig(kappa2=kappa2, g2=ratio * kappa2)


def _scheme_and_ratio(cfg: dict, point: dict):
    params = cfg.get("params", {})
    scheme = point.get("scheme", params.get("scheme", "dissipative"))
    default_ratio = {"dissipative": 0.0, "combined_kerr": 0.3, "combined_tpe": 10.0}[scheme]
    ratio = float(point.get("ratio", params.get("ratio", default_ratio)))
    if scheme == "dissipative":
        ratio = 0.0
    return scheme, ratio


def _space(cfg: dict, nbar: float):
    from .fock import OscillatorSpace

    a = math.sqrt(nbar)
    dim = cfg.get("dim")
    return OscillatorSpace(int(dim), a) if dim else OscillatorSpace.for_alpha(a)


def _run_spectrum(cfg, point):
    from .spectra import kerr_spectrum, tpe_spectrum

    params = cfg.get("params", {})
    scheme = point.get("scheme", params.get("scheme", "combined_kerr"))
    fn = tpe_spectrum if scheme == "combined_tpe" else kerr_spectrum
    spec = fn(math.sqrt(point["nbar"]), n_max=int(params.get("n_max", 8)))
    rows = []
    for n in range(len(spec.spacings)):
        rows.append({"scheme": scheme, "nbar": point["nbar"], "n": n,
                     "e_even": float(spec.eigenvalues_even[n]), "e_odd": float(spec.eigenvalues_odd[n]),
                     "spacing": float(spec.spacings[n]), "overlap": float(spec.overlaps[n])})
    return {"rows": rows, "diagnostics": {"dim": spec.space.dim, "gap": float(spec.gap)}}


def _idle_rate(cfg, point):
    from .dynamics import idle_error_probabilities
    from .estimators import combined_kerr_rate, combined_tpe_rate, fit_exponential_rate
    from .spectra import kerr_spectrum, tpe_spectrum

    params = cfg.get("params", {})
    scheme, ratio = _scheme_and_ratio(cfg, point)
    nbar = float(point["nbar"])
    kappa2 = float(params.get("kappa2", 1.0))
    conf = _confinement(scheme, ratio, kappa2)
    noise = _noise(cfg, point)
    space = _space(cfg, nbar)
    T_idle = params.get("T_idle")
    traj = idle_error_probabilities(space, conf, noise, T_idle=T_idle, num=int(params.get("num", 101)))
    fit = fit_exponential_rate(traj)
    kl = noise.kappa_l(nbar)
    kc = conf.kappa_conf(nbar)
    if scheme == "combined_kerr":
        model = combined_kerr_rate(kl, nbar, kc, kerr_spectrum(math.sqrt(nbar), check_convergence=False),
                                   kerr=conf.kerr)
    elif scheme == "combined_tpe":
        model = combined_tpe_rate(kl, nbar, kc, tpe_spectrum(math.sqrt(nbar), check_convergence=False),
                                  g2=conf.g2)
    else:
        model = kl * math.exp(-2.0 * nbar)
    row = {"scheme": scheme, "nbar": nbar, "ratio": ratio, "Gamma_sim": fit.flip_rate,
           "Gamma_model": model, "gamma": ""}
    out = {"rows": [row], "diagnostics": {"dim": space.dim, "r2": fit.r2,
                                          "max_trace_error": traj.diagnostics["max_trace_error"]}}
    if params.get("traces"):
        out["trace"] = {"t": traj.times.tolist(), "p_X": traj.px.tolist()}
    return out


def _run_zgate(cfg, point):
    from .dynamics import BufferConfig
    from .gates import ZGateConfig, zgate_simulate

    params = cfg.get("params", {})
    scheme, ratio = _scheme_and_ratio(cfg, point)
    nbar = float(point.get("nbar", params.get("nbar", 8.0)))
    conf = _confinement(scheme, ratio, float(params.get("kappa2", 1.0)))
    theta = float(point.get("theta", params.get("theta", math.pi)))
    shape = point.get("drive_shape", params.get("drive_shape", "constant"))
    buf = BufferConfig(**cfg["buffer"]) if cfg.get("buffer") else None
    zc = ZGateConfig(theta=theta, T_gate=float(point["T"]), drive_shape=shape, confinement=conf,
                     noise=_noise(cfg, point), buffer=buf, measure_bitflip=bool(params.get("bitflip", False)))
    rep = zgate_simulate(_space(cfg, nbar), zc)
    row = {"scheme": scheme, "ratio": ratio, "nbar": nbar, "T": float(point["T"]), "theta": theta,
           "drive_shape": shape, "p_Z": rep.p_Z, "p_Z_NA_model": rep.model["p_Z_NA"],
           "p_Z_total_model": rep.model["p_Z_total"], "p_X": "" if rep.p_X is None else rep.p_X}
    return {"rows": [row], "diagnostics": {k: v for k, v in rep.diagnostics.items() if k != "final_state"}}


def _run_cnot(cfg, point):
    from .dynamics import NoiseConfig
    from .gates import CnotConfig, cnot_simulate

    params = cfg.get("params", {})
    scheme, ratio = _scheme_and_ratio(cfg, point)
    nbar = float(point.get("nbar", params.get("nbar", 4.0)))
    noise = _noise(cfg, point)
    kw = {"kerr": ratio} if scheme == "combined_kerr" else ({"g2": ratio} if scheme == "combined_tpe" else {})
    cc = CnotConfig(scheme=scheme, T_gate=float(point["T"]), nbar=nbar, kappa2=float(params.get("kappa2", 1.0)),
                    noise_control=noise, noise_target=NoiseConfig(**asdict(noise)), dim=cfg.get("dim"),
                    measure_bitflip=bool(params.get("bitflip", False)),
                    measure_phase=bool(params.get("phase", True)),
                    bitflip_inputs=tuple(params.get("bitflip_inputs", ("00",))),
                    rtol=cfg.get("rtol") or 1e-9, atol=cfg.get("atol") or 1e-12)
    rep = cnot_simulate(cc)
    b = rep.breakdown
    row = {"scheme": scheme, "ratio": ratio, "nbar": nbar, "T": float(point["T"]),
           "p_Zc": b.get("p_Zc", ""), "p_Zt": b.get("p_Zt", ""), "p_ZcZt": b.get("p_ZcZt", ""),
           "p_Z_NA_model": rep.model["p_Z_NA"], "p_Zc_model": rep.model["p_Zc"],
           "p_Zt_model": rep.model["p_Zt"], "p_X": "" if rep.p_X is None else rep.p_X}
    return {"rows": [row], "diagnostics": rep.diagnostics}


def _run_buffer(cfg, point):
    from .dynamics import BufferConfig

    buf = dict(cfg.get("buffer", {}))
    for k in ("chi_hh", "kappa_bh", "n_th_h", "kappa_phi_h", "levels"):
        if k in point:
            buf[k] = point[k]
    if "levels" in buf:
        buf["levels"] = int(buf["levels"])
    sub = dict(cfg)
    sub["buffer"] = buf
    sub["params"] = {**cfg.get("params", {}), "scheme": "combined_tpe"}
    out = _run_zgate(sub, {k: v for k, v in point.items() if k in ("T", "nbar")})
    BufferConfig(**buf)  # validates the combination
    for r in out["rows"]:
        r.update({k: buf.get(k, "") for k in ("levels", "chi_hh", "kappa_bh", "n_th_h", "kappa_phi_h")})
    return out


def _run_circuit(cfg, point):
    from .circuit import CircuitParams, coupling_strengths, hierarchy_check

    circ = {**cfg.get("circuit", {}), **point}
    target = cfg.get("params", {}).get("target_ratio")
    p = CircuitParams(**circ)
    c = coupling_strengths(p)
    rep = hierarchy_check(c, target)
    row = {"eta": p.eta, "phi_h": p.phi_h, "g2h": abs(c.g2h), "g2l": abs(c.g2l), "chi_hh": c.chi_hh,
           "chi_aa": c.chi_aa, "chi_ah": c.chi_ah, "chi_al": c.chi_al, "kappa2_eff": c.kappa2_eff,
           "margin_kerr_below_tpe": rep["checks"]["kerr_below_tpe"]["margin"],
           "margin_tpe_below_buffer_kerr": rep["checks"]["tpe_below_buffer_kerr"]["margin"],
           "pass": rep["pass"]}
    return {"rows": [row], "couplings": c.as_dict(), "report": rep}


RUNNERS = {
    "spectrum": _run_spectrum,
    "idle-bitflip": _idle_rate,
    "gamma-map": _idle_rate,
    "zgate": _run_zgate,
    "cnot": _run_cnot,
    "buffer-noise": _run_buffer,
    "circuit-params": _run_circuit,
}


def _admit(cfg: dict, point: dict, budget: float):
    """Reject CNOT points whose dense density matrix would not fit in memory."""
    if cfg["experiment"] != "cnot":
        return
    from .gates import cnot_dim

    nbar = float(point.get("nbar", cfg.get("params", {}).get("nbar", 4.0)))
    n = cfg.get("dim") or cnot_dim(nbar, bool(cfg.get("params", {}).get("bitflip", False)))
    scheme = point.get("scheme", cfg.get("params", {}).get("scheme", "dissipative"))
    d = n * n * (2 if scheme == "combined_tpe" else 1)
    need = 16.0 * d * d * 8
    if need > budget:
        raise MemoryBudgetError(f"point {point} needs ~{need / 1e9:.1f} GB (> budget {budget / 1e9:.1f} GB)")


def _execute(args):
    cfg, point, seed = args
    np.random.seed(seed)
    t0 = time.perf_counter()
    out = RUNNERS[cfg["experiment"]](cfg, point)
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------- ledger


def cache_dir() -> Path:
    d = os.environ.get("CATCONFINE_CACHE_DIR")
    return Path(d) if d else Path.home() / ".cache" / "catconfine"


def read_ledger(path: Path) -> dict:
    """Completed records keyed by point hash (later lines win; torn lines skipped)."""
    done = {}
    if not path.exists():
        return done
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                continue
            if rec.get("status") == "ok":
                done[rec["point_hash"]] = rec
    return done


def _append(path: Path, rec: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(rec, default=_json_default) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


# ------------------------------------------------------------------ output


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.12e}"
    return v


def _write_csv(path: Path, rows: list, header_line: str):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(header_line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def _gamma_rows(rows: list, min_points: int) -> list:
    from .estimators import fit_gamma, locate_threshold
    from .errors import FitError

    groups = {}
    for r in rows:
        groups.setdefault((r["scheme"], r["ratio"]), {})[r["nbar"]] = r["Gamma_sim"]
    out = []
    by_scheme = {}
    for (scheme, ratio), rates in sorted(groups.items()):
        try:
            g = fit_gamma(rates, min_points=min_points).gamma
        except FitError:
            g = float("nan")
        out.append({"scheme": scheme, "ratio": ratio, "gamma": g, "npoints": len(rates)})
        by_scheme.setdefault(scheme, []).append((ratio, g))
    for scheme, pairs in sorted(by_scheme.items()):
        r, g = zip(*pairs)
        out.append({"scheme": scheme, "ratio": "threshold", "gamma": locate_threshold(r, g, 2.0),
                    "npoints": len(r)})
    return out


def run_experiment(config: ExperimentConfig | dict, out_dir: str | Path | None = None, workers: int | None = None,
                   force: bool = False, seed: int | None = None, memory_budget: float | None = None,
                   ledger_path: str | Path | None = None) -> list:
    """Execute the grid; write CSVs and append to the ledger.  Returns ResultRecords."""
    from .dynamics import MEMORY_BUDGET

    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    if seed is not None:
        config.seed = int(seed)
    budget = MEMORY_BUDGET if memory_budget is None else memory_budget
    out_dir = Path(out_dir or config.output or ".")
    ledger = Path(ledger_path) if ledger_path else cache_dir() / "ledger.jsonl"
    cfg = config.canonical()
    chash = config.config_hash()
    points = config.points()
    done = {} if force else read_ledger(ledger)
    seeds = np.random.SeedSequence(config.seed).generate_state(len(points)).tolist()

    records: list[ResultRecord | None] = [None] * len(points)
    todo = []
    for i, pt in enumerate(points):
        ph = _hash({"config": chash, "point": pt})
        if ph in done:
            rec = done[ph]
            records[i] = ResultRecord(chash, ph, pt, rec["outputs"], rec["wall_time"], rec.get("diagnostics", {}),
                                      cached=True)
        else:
            _admit(cfg, pt, budget)
            todo.append((i, pt, ph))

    workers = workers or os.cpu_count() or 1
    jobs = [(cfg, pt, seeds[i]) for i, pt, _ in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = ex.map(_execute, jobs)
            _collect(results, todo, records, chash, ledger)
    else:
        _collect(map(_execute, jobs), todo, records, chash, ledger)

    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    header = f"# catconfine {__version__} experiment={config.experiment} config={chash[:16]} generated={stamp}"
    rows = [r for rec in records for r in rec.outputs.get("rows", [])]
    name = config.experiment
    _write_csv(out_dir / f"{name}.csv", rows, header)
    if name == "gamma-map":
        _write_csv(out_dir / "gamma.csv", _gamma_rows(rows, min_points=3), header)
    if name in ("idle-bitflip", "gamma-map") and any("trace" in rec.outputs for rec in records):
        trows = []
        for rec in records:
            tr = rec.outputs.get("trace")
            if tr:
                for t, p in zip(tr["t"], tr["p_X"]):
                    trows.append({**rec.point, "t": t, "p_X": p})
        _write_csv(out_dir / "traces.csv", trows, header)
    if name == "circuit-params":
        from .circuit import format_report

        first = records[0].outputs
        (out_dir / "couplings.json").write_text(json.dumps(
            {"couplings": first["couplings"], "report": first["report"]}, indent=2, sort_keys=True,
            default=_json_default) + "\n")
        (out_dir / "hierarchy.txt").write_text(_format_circuit_text(first) + "\n")
    return records


def _format_circuit_text(outputs: dict) -> str:
    lines = []
    for k, v in outputs["couplings"].items():
        if isinstance(v, dict):
            lines.append(f"{k:<18} {v['abs']:.6e}")
        elif isinstance(v, list):
            lines.append(f"{k:<18} " + ", ".join(f"{x:.6e}" for x in v))
        else:
            lines.append(f"{k:<18} {v:.6e}")
    for name, chk in outputs["report"]["checks"].items():
        val = chk.get("margin", chk.get("value"))
        lines.append(f"{name:<24} {val:>12.4g}  {'PASS' if chk['pass'] else 'FAIL'}")
    lines += [f"- {r}" for r in outputs["report"]["recommendations"]]
    return "\n".join(lines)


def _collect(results, todo, records, chash, ledger):
    for (i, pt, ph), (out, wall) in zip(todo, results):
        out = json.loads(json.dumps(out, default=_json_default))
        diag = out.pop("diagnostics", {})
        rec = ResultRecord(chash, ph, pt, out, wall, diag)
        _append(ledger, {"status": "ok", "config_hash": chash, "point_hash": ph, "point": pt,
                         "outputs": out, "wall_time": wall, "diagnostics": diag})
        records[i] = rec


# --------------------------------------------------------------------- CLI


def recipe_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("catconfine.recipes").iterdir() if p.name.endswith(".json"))


def load_recipe(name: str) -> dict:
    return json.loads(resources.files("catconfine.recipes").joinpath(f"{name}.json").read_text())


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="catconfine", description="Cat-qubit confinement simulations")
    ap.add_argument("--version", action="version", version=f"catconfine {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run a {name} experiment")
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--recipe", help=f"bundled recipe name ({', '.join(recipe_names())})")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="parallel worker processes")
        p.add_argument("--force", action="store_true", help="recompute points already in the ledger")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("--config", help="experiment JSON file")
    v.add_argument("--recipe", help="bundled recipe name")
    sub.add_parser("recipes", help="list bundled recipes")
    return ap


def _resolve(args) -> dict:
    if bool(args.config) == bool(args.recipe):
        raise ConfigError("give exactly one of --config or --recipe")
    if args.recipe:
        if args.recipe not in recipe_names():
            raise ConfigError(f"unknown recipe {args.recipe!r}", "recipe")
        return load_recipe(args.recipe)
    return load_config(args.config)


def main(argv=None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    if args.command == "recipes":
        for n in recipe_names():
            print(n)
        return EXIT_OK
    try:
        cfg = _resolve(args)
        report = validate_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path, msg in report["warnings"]:
        print(f"warning: {path}: {msg}", file=sys.stderr)
    if report["errors"]:
        for path, msg in report["errors"]:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"ok: {len(report['warnings'])} warning(s)")
        return EXIT_OK
    if cfg["experiment"] != args.command:
        print(f"config error: experiment: config is {cfg['experiment']!r}, subcommand is {args.command!r}",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        recs = run_experiment(cfg, out_dir=args.out, workers=args.workers, force=args.force, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CatConfineError, MemoryError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    n_cached = sum(r.cached for r in recs)
    print(f"{len(recs)} point(s), {n_cached} from ledger, output in {args.out or cfg.get('output') or '.'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
