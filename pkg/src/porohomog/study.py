"""End-to-end studies: configuration, cached stages and artifact manifest.

Stages and their cache directories below ``<out>/cache``::

    cell    cell_L<level>/                 cell problems and K
    blayer  blayer_L<level>/               boundary layer for j = 2
    micro   micro_L<level>_eps<1/eps>/     micro problem per eps

Each stage directory carries ``stage.json`` with the hash of its inputs; a
stage whose hash matches is reused. Production fields use the configured
refinement level L; with the numerical floor enabled, level L - 1 is solved
as well. Study-level outputs are constants.json, estimates.csv,
floors.csv, rates.csv, estimates.json, optional SVG plots and VTK files,
and manifest.json listing every artifact with its SHA-256.
"""
from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from . import __version__
from . import analysis as an
from . import fileio
from .blayer import BoundaryLayerResult, compute_boundary_layer
from .cellprob import CellResult, _round17, compute_cell
from .effective import build_effective
from .errors import ConfigError, PorohomogError
from .geometry import PRESET_SHAPES, InclusionShape
from .mesh import MeshParams
from .microsolver import MicroCase, load_micro, save_micro, solve_micro

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EPS_RULES = ("integer", "powers_of_two")
DEFAULT_EPS = ("1", "1/2", "1/4", "1/8", "1/16")

_TOP_KEYS = {
    "schema", "name", "shape", "elements", "mesh", "cutoff", "domain", "eps", "eps_rule", "estimates",
    "bl_band", "floor", "pressure_extension", "literal_est4a", "solver", "reproducible", "workers", "output",
}
_SUB_KEYS = {
    "elements": {"velocity_degree"},
    "mesh": {"n", "grading", "symmetric", "levels"},
    "domain": {"H", "h", "L"},
    "solver": {"method", "tol"},
    "output": {"dir", "vtk", "svg"},
}
_SHAPE_KEYS = {"circle": {"kind", "radius", "center"}, "ellipse": {"kind", "semi_axes", "rotation", "center"}}


class StageError(PorohomogError, RuntimeError):
    """A pipeline stage failed; carries the stage and case names."""

    def __init__(self, stage, case, message):
        super().__init__(f"stage {stage} [{case}]: {message}")
        self.stage, self.case = stage, case


class MissingStageError(PorohomogError, RuntimeError):
    """An upstream artifact required by a stage is absent."""


def parse_eps(value) -> Fraction:
    """eps from a number or a string such as '1/8'."""
    try:
        f = Fraction(str(value).strip()) if isinstance(value, str) else Fraction(value).limit_denominator(10**6)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"eps entry {value!r} is not a number") from exc
    if not f > 0:
        raise ConfigError(f"eps entry {value!r} must be positive")
    return f


@dataclass(frozen=True)
class StudyConfig:
    name: str = "ellipse"
    shape: InclusionShape = PRESET_SHAPES["ellipse"]
    velocity_degree: int = 2
    mesh: MeshParams = MeshParams(16, 2.0, False, 1)
    cutoff: tuple = (4, 4)
    H: float = 1.0
    h: float = 1.0
    L: float = 1.0
    eps: tuple = tuple(Fraction(e) for e in DEFAULT_EPS[1:])
    eps_rule: str = "powers_of_two"
    estimates: tuple = an.ESTIMATE_IDS
    bl_band: float = 4.0
    floor: bool = True
    pressure_extension: str = "error"
    literal_est4a: bool = False
    method: str = "direct"
    tol: float = 1e-10
    reproducible: bool = False
    workers: int = 1
    out: str = "out"
    vtk: bool = False
    svg: bool = True

    # --- validation -------------------------------------------------------
    def validate(self):
        if self.velocity_degree not in (2, 3):
            raise ConfigError("elements.velocity_degree must be 2 or 3")
        if self.mesh.n < 2 or self.mesh.levels < 0 or not self.mesh.grading >= 1.0:
            raise ConfigError("mesh: need n >= 2, levels >= 0, grading >= 1")
        if self.floor and self.mesh.levels < 1:
            raise ConfigError("the numerical floor compares levels L and L - 1; set mesh.levels >= 1 or floor: false")
        m_minus, m_plus = self.cutoff
        if int(m_minus) != m_minus or int(m_plus) != m_plus or m_minus < 1 or m_plus < 1:
            raise ConfigError("cutoff must be two positive integers")
        if self.bl_band > min(self.cutoff):
            raise ConfigError(f"bl_band {self.bl_band} exceeds the cut-off {self.cutoff}")
        if not self.bl_band > 0:
            raise ConfigError("bl_band must be positive")
        if self.eps_rule not in EPS_RULES:
            raise ConfigError(f"eps_rule must be one of {EPS_RULES}")
        if len(set(self.eps)) != len(self.eps):
            raise ConfigError("eps entries must be distinct")
        for e in self.eps:
            inv = 1 / Fraction(e)
            if inv.denominator != 1:
                raise ConfigError(f"1/eps must be an integer (eps = {e})")
            n = inv.numerator
            if self.eps_rule == "powers_of_two" and n & (n - 1):
                raise ConfigError(f"eps = {e} is not a power of two (eps_rule: powers_of_two)")
            for name, length in (("H", self.H), ("h", self.h), ("L", self.L)):
                ratio = Fraction(length).limit_denominator(10**6) / Fraction(e)
                if ratio.denominator != 1:
                    raise ConfigError(f"{name}/eps must be an integer (eps = {e})")
        if self.estimates and self.H < an.POROUS_DEPTH and any(
                an.estimate_spec(e).region == an.OMEGA2_MINUS_O for e in self.estimates):
            raise ConfigError(f"domain.H must be at least {an.POROUS_DEPTH} for Est3 / Est3A")
        for e in self.estimates:
            if e not in an.ESTIMATE_IDS:
                raise ConfigError(f"unknown estimate {e!r}; choose from {', '.join(an.ESTIMATE_IDS)}")
        if self.pressure_extension not in ("error", "pressure"):
            raise ConfigError("pressure_extension must be 'error' or 'pressure'")
        if self.method not in ("direct", "krylov"):
            raise ConfigError("solver.method must be 'direct' or 'krylov'")
        if not self.tol > 0:
            raise ConfigError("solver.tol must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.shape.validate()
        except PorohomogError as exc:
            raise ConfigError(f"shape: {exc}") from exc
        return self

    # --- serialization ----------------------------------------------------
    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "shape": self.shape.to_dict(),
            "elements": {"velocity_degree": self.velocity_degree},
            "mesh": self.mesh.to_dict(),
            "cutoff": list(self.cutoff),
            "domain": {"H": self.H, "h": self.h, "L": self.L},
            "eps": [str(Fraction(e)) for e in self.eps],
            "eps_rule": self.eps_rule,
            "estimates": list(self.estimates),
            "bl_band": self.bl_band,
            "floor": self.floor,
            "pressure_extension": self.pressure_extension,
            "literal_est4a": self.literal_est4a,
            "solver": {"method": self.method, "tol": self.tol},
            "reproducible": self.reproducible,
            "workers": self.workers,
            "output": {"dir": self.out, "vtk": self.vtk, "svg": self.svg},
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a mapping")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        if d.get("schema") != SCHEMA_VERSION:
            raise ConfigError(f"schema must be {SCHEMA_VERSION} (found {d.get('schema')!r})")
        for key, allowed in _SUB_KEYS.items():
            sub = d.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{key} must be a mapping")
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {key}: {', '.join(sorted(bad))}")
        base = cls()
        kw = {}
        if "name" in d:
            kw["name"] = str(d["name"])
        if "shape" in d:
            kw["shape"] = _parse_shape(d["shape"])
        el = d.get("elements", {})
        if "velocity_degree" in el:
            kw["velocity_degree"] = int(el["velocity_degree"])
        m = d.get("mesh", {})
        if m:
            kw["mesh"] = MeshParams(int(m.get("n", base.mesh.n)), float(m.get("grading", base.mesh.grading)),
                                    bool(m.get("symmetric", base.mesh.symmetric)), int(m.get("levels", base.mesh.levels)))
        if "cutoff" in d:
            c = d["cutoff"]
            c = [c, c] if isinstance(c, (int, float)) else list(c)
            if len(c) != 2:
                raise ConfigError("cutoff must be a number or a pair")
            kw["cutoff"] = (int(c[0]), int(c[1])) if all(float(v).is_integer() for v in c) else tuple(c)
        dom = d.get("domain", {})
        for k in ("H", "h", "L"):
            if k in dom:
                kw[k] = float(dom[k])
        if "eps" in d:
            if not isinstance(d["eps"], (list, tuple)):
                raise ConfigError("eps must be a list")
            kw["eps"] = tuple(parse_eps(e) for e in d["eps"])
        if "eps_rule" in d:
            kw["eps_rule"] = str(d["eps_rule"])
        if "estimates" in d:
            est = d["estimates"]
            if est == "all":
                est = an.ESTIMATE_IDS
            elif est is None:
                est = ()
            elif not isinstance(est, (list, tuple)):
                raise ConfigError("estimates must be a list or 'all'")
            kw["estimates"] = tuple(str(e) for e in est)
        for k in ("bl_band",):
            if k in d:
                kw[k] = float(d[k])
        for k in ("floor", "literal_est4a", "reproducible"):
            if k in d:
                if not isinstance(d[k], bool):
                    raise ConfigError(f"{k} must be true or false")
                kw[k] = d[k]
        if "pressure_extension" in d:
            kw["pressure_extension"] = str(d["pressure_extension"])
        if "workers" in d:
            kw["workers"] = int(d["workers"])
        s = d.get("solver", {})
        if "method" in s:
            kw["method"] = str(s["method"])
        if "tol" in s:
            kw["tol"] = float(s["tol"])
        o = d.get("output", {})
        if "dir" in o:
            kw["out"] = str(o["dir"])
        for k in ("vtk", "svg"):
            if k in o:
                kw[k] = bool(o[k])
        try:
            cfg = dataclasses.replace(base, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def dump(self, path=None):
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def load(cls, path):
        try:
            data = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def preset(cls, name):
        """Default study for a preset shape ('circle' uses a mirror-symmetric mesh)."""
        if name not in PRESET_SHAPES:
            raise ConfigError(f"unknown preset shape {name!r}; choose from {', '.join(PRESET_SHAPES)}")
        return cls(name=name, shape=PRESET_SHAPES[name],
                   mesh=MeshParams(16, 2.0, name == "circle", 1)).validate()

    # --- derived ------------------------------------------------------------
    @property
    def levels_needed(self):
        top = self.mesh.levels
        return (top - 1, top) if self.floor else (top,)

    def params(self, level):
        return dataclasses.replace(self.mesh, levels=level)


def _parse_shape(d):
    if isinstance(d, str):
        if d not in PRESET_SHAPES:
            raise ConfigError(f"unknown preset shape {d!r}")
        return PRESET_SHAPES[d]
    if not isinstance(d, dict) or d.get("kind") not in _SHAPE_KEYS:
        raise ConfigError("shape needs kind: circle or ellipse")
    bad = set(d) - _SHAPE_KEYS[d["kind"]]
    if bad:
        raise ConfigError(f"unknown keys in shape: {', '.join(sorted(bad))}")
    try:
        return InclusionShape.from_dict(d)
    except (PorohomogError, TypeError, ValueError) as exc:
        raise ConfigError(f"shape: {exc}") from exc


# ---------------------------------------------------------------------------
# hashing and manifest
# ---------------------------------------------------------------------------


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(_round17(obj), indent=2, sort_keys=True) + "\n")
    return Path(path)


class Manifest:
    """Artifact list with content hashes; the only writer of manifest.json."""

    def __init__(self, out: Path, config: StudyConfig):
        self.out = Path(out)
        self.path = self.out / "manifest.json"
        self.data = {"schema": SCHEMA_VERSION, "version": __version__, "config_hash": _hash_obj(config.to_dict()),
                     "status": "running", "artifacts": {}, "stages": {}}
        if self.path.exists():
            try:
                old = json.loads(self.path.read_text())
                self.data["artifacts"] = old.get("artifacts", {})
                self.data["stages"] = old.get("stages", {})
            except (OSError, json.JSONDecodeError):
                pass

    def add(self, path, stage, case="", status="complete", reused=False):
        path = Path(path)
        rel = str(path.relative_to(self.out))
        self.data["artifacts"][rel] = {
            "sha256": file_hash(path) if path.exists() else None,
            "stage": stage,
            "case": case,
            "status": status,
            "reused": bool(reused),
        }

    def stage(self, name, case, reused, seconds=None, status="complete"):
        entry = {"reused": bool(reused), "status": status}
        if seconds is not None:
            entry["seconds"] = round(float(seconds), 3)
        self.data["stages"][f"{name}:{case}" if case else name] = entry

    def mark_incomplete(self, stage, case, message):
        self.data["status"] = "incomplete"
        self.data["error"] = {"stage": stage, "case": case, "message": message}
        for rel, art in self.data["artifacts"].items():
            if art["stage"] == stage and art["case"] == case:
                art["status"] = "incomplete"

    def write(self, status=None):
        if status is not None:
            self.data["status"] = status
        self.out.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return self.path


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _eps_tag(eps):
    return str((1 / Fraction(eps)).numerator) if (1 / Fraction(eps)).denominator == 1 else str(Fraction(eps)).replace("/", "_")


class Study:
    """Cached execution of the stages for one configuration."""

    def __init__(self, config: StudyConfig, out=None):
        self.config = config.validate()
        self.out = Path(out if out is not None else config.out)
        self.cache = self.out / "cache"
        try:
            self.cache.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output directory {self.out} is not writable: {exc}") from exc
        self.manifest = Manifest(self.out, config)
        self._cells, self._bls, self._micros = {}, {}, {}
        self._fresh = set()  # micro cases solved by pool workers in this run

    # --- keys -------------------------------------------------------------------
    def _solver(self):
        return {"method": self.config.method, "tol": self.config.tol}

    def cell_key(self, level):
        c = self.config
        return _hash_obj({"stage": "cell", "v": __version__, "shape": c.shape.to_dict(),
                          "mesh": c.params(level).to_dict(), "degree": c.velocity_degree, "solver": self._solver()})

    def blayer_key(self, level):
        return _hash_obj({"stage": "blayer", "rev": 2, "cell": self.cell_key(level), "cutoff": list(self.config.cutoff)})

    def micro_key(self, eps, level):
        return _hash_obj({"stage": "micro", "v": __version__, "case": self.micro_case(eps, level).to_dict(),
                          "solver": self._solver()})

    def micro_case(self, eps, level):
        c = self.config
        return MicroCase(c.shape, float(Fraction(eps)), c.H, c.h, params=c.params(level),
                         vel_degree=c.velocity_degree)

    # --- helpers ------------------------------------------------------------
    def _cached(self, directory, key):
        stamp = directory / "stage.json"
        if not stamp.exists():
            return False
        try:
            return json.loads(stamp.read_text()).get("key") == key
        except (OSError, json.JSONDecodeError):
            return False

    def _stamp(self, directory, key, stage, case, reused, seconds):
        _write_json(directory / "stage.json", {"key": key, "stage": stage, "case": case})
        for f in sorted(directory.iterdir()):
            self.manifest.add(f, stage, case, reused=reused)
        self.manifest.stage(stage, case, reused, None if self.config.reproducible else seconds)

    def _strip_timing(self, report):
        if self.config.reproducible:
            report.pop("seconds", None)
        return report

    # --- cell ---------------------------------------------------------------
    def cell(self, level, compute=True) -> CellResult:
        if level in self._cells:
            return self._cells[level]
        d = self.cache / f"cell_L{level}"
        key = self.cell_key(level)
        case = f"L{level}"
        if self._cached(d, key):
            res = CellResult.load(d)
            self._stamp(d, key, "cell", case, True, 0.0)
        elif not compute:
            raise MissingStageError(f"cell results for level {level} are missing; run the 'cell' stage first")
        else:
            t0 = time.perf_counter()
            try:
                res = compute_cell(self.config.shape, self.config.params(level), self.config.velocity_degree,
                                   method=self.config.method, tol=self.config.tol)
            except PorohomogError as exc:
                raise StageError("cell", case, str(exc)) from exc
            self._strip_timing(res.report)
            res.save(d)
            self._stamp(d, key, "cell", case, False, time.perf_counter() - t0)
            log.info("cell %s: K = %s", case, res.K.tolist())
        self._cells[level] = res
        return res

    # --- boundary layer ----------------------------------------------------
    def blayer(self, level, compute=True) -> BoundaryLayerResult:
        if level in self._bls:
            return self._bls[level]
        d = self.cache / f"blayer_L{level}"
        key = self.blayer_key(level)
        case = f"L{level}"
        if self._cached(d, key):
            cell = self.cell(level, compute=False)
            res = BoundaryLayerResult.load(d, cell, 2)
            self._stamp(d, key, "blayer", case, True, 0.0)
        elif not compute:
            raise MissingStageError(f"boundary layer for level {level} is missing; run the 'blayer' stage first")
        else:
            try:
                cell = self.cell(level, compute=False)
            except MissingStageError as exc:
                raise MissingStageError(f"{exc} (required by 'blayer')") from exc
            t0 = time.perf_counter()
            try:
                res = compute_boundary_layer(cell, tuple(self.config.cutoff), 2, method=self.config.method,
                                             tol=self.config.tol)
            except PorohomogError as exc:
                raise StageError("blayer", case, str(exc)) from exc
            self._strip_timing(res.report)
            d.mkdir(parents=True, exist_ok=True)
            res.save(d)
            self._stamp(d, key, "blayer", case, False, time.perf_counter() - t0)
            log.info("blayer %s: C1bl = %.10g, Cpi = %.10g", case, res.C1bl, res.Cpi)
        self._bls[level] = res
        return res

    # --- micro ----------------------------------------------------------------
    def micro_dir(self, eps, level):
        return self.cache / f"micro_L{level}_eps{_eps_tag(eps)}"

    def micro(self, eps, level, compute=True):
        k = (Fraction(eps), level)
        if k in self._micros:
            return self._micros[k]
        d = self.micro_dir(eps, level)
        key = self.micro_key(eps, level)
        case = f"L{level} eps={Fraction(eps)}"
        if self._cached(d, key):
            res = load_micro(d)[1]
            self._stamp(d, key, "micro", case, k not in self._fresh, None)
        elif not compute:
            raise MissingStageError(f"micro solution for eps = {Fraction(eps)} (level {level}) is missing; "
                                    f"run the 'micro' stage first")
        else:
            t0 = time.perf_counter()
            res = run_micro_case(self.micro_case(eps, level), d, self.config.method, self.config.tol,
                                 self.config.vtk and level == self.config.mesh.levels)
            res = load_micro(d)[1] if res is None else res
            self._stamp(d, key, "micro", case, False, time.perf_counter() - t0)
        self._micros[k] = res
        return res

    def micro_many(self, eps_list, levels):
        """Solve several micro cases, in a process pool when configured."""
        todo = [(e, lv) for e in eps_list for lv in levels
                if not self._cached(self.micro_dir(e, lv), self.micro_key(e, lv))]
        if self.config.workers > 1 and not self.config.reproducible and len(todo) > 1:
            with cf.ProcessPoolExecutor(self.config.workers) as pool:
                futs = {pool.submit(run_micro_case, self.micro_case(e, lv), self.micro_dir(e, lv), self.config.method,
                                    self.config.tol, self.config.vtk and lv == self.config.mesh.levels, False): (e, lv)
                        for e, lv in todo}
                for fut in cf.as_completed(futs):
                    e, lv = futs[fut]
                    fut.result()
                    d = self.micro_dir(e, lv)
                    _write_json(d / "stage.json", {"key": self.micro_key(e, lv), "stage": "micro",
                                                   "case": f"L{lv} eps={Fraction(e)}"})
                    self._fresh.add((Fraction(e), lv))
        for e in eps_list:
            for lv in levels:
                self.micro(e, lv)

    # --- estimates --------------------------------------------------------
    def composite(self, eps, level, compute=False):
        cell = self.cell(level, compute)
        bl = self.blayer(level, compute)
        eff = build_effective(cell.K, bl.C1bl)
        micro = self.micro(eps, level, compute)
        return an.Composite(micro, cell, bl, eff, float(Fraction(eps)), self.config.bl_band, self.config.L)

    def estimate(self, eps, compute=False):
        c = self.config
        top = c.mesh.levels
        comp = self.composite(eps, top, compute)
        coarse = self.composite(eps, top - 1, compute) if c.floor else None
        specs = [an.estimate_spec(e, c.bl_band) for e in c.estimates]
        return an.compute_estimates(comp, specs, literal_4a=c.literal_est4a, shape_name=c.name, level=top,
                                    sweep=c.name, coarse=coarse, extension=c.pressure_extension)

    def constants(self):
        c = self.config
        cell = self.cell(c.mesh.levels, compute=False)
        bl = self.blayer(c.mesh.levels, compute=False)
        data = {
            "shape": c.shape.to_dict(),
            "name": c.name,
            "mesh": c.mesh.to_dict(),
            "velocity_degree": c.velocity_degree,
            "K": cell.K.tolist(),
            "K_flux": cell.K_flux.tolist(),
            "K11": float(cell.K[0, 0]),
            "K12": float(cell.K[0, 1]),
            "K22": float(cell.K[1, 1]),
            "C1bl": bl.C1bl,
            "C2bl_check": bl.C2bl_check,
            "Cpi": bl.Cpi,
            "cutoff": list(c.cutoff),
            "decay_rate_up": bl.decay.get("rate_up"),
            "decay_rate_down": bl.decay.get("rate_down"),
            "cell_dofs": cell.report.get("dofs"),
            "blayer_dofs": bl.report.get("dofs"),
        }
        path = _write_json(self.out / "constants.json", data)
        self.manifest.add(path, "constants")
        return data

    def reports(self, compute=False):
        reps = []
        for e in self.config.eps:
            try:
                reps.append(self.estimate(e, compute))
            except (MissingStageError, StageError):
                raise
            except PorohomogError as exc:
                raise StageError("estimate", f"eps={Fraction(e)}", str(exc)) from exc
        return reps

    def write_estimates(self, reps):
        out = self.out
        p1 = an.write_estimates_csv(reps, out / "estimates.csv")
        p2 = an.write_floors_csv(reps, out / "floors.csv")
        payload = [{"shape": r.shape, "eps": str(Fraction(r.eps).limit_denominator(10**6)), "level": r.level,
                    "values": r.values, "scaled": r.scaled, "floors": r.floors, "meta": r.meta} for r in reps]
        p3 = _write_json(out / "estimates.json", payload)
        for p in (p1, p2, p3):
            self.manifest.add(p, "estimate")

    def load_reports(self):
        path = self.out / "estimates.json"
        if not path.exists():
            raise MissingStageError("estimates.json is missing; run the 'estimate' stage first")
        data = json.loads(path.read_text())
        return [an.ErrorReport(d["shape"], float(Fraction(d["eps"])), d["level"], d["values"], d["scaled"],
                               d["floors"], d["shape"], d["meta"]) for d in data]

    def rates(self, reps):
        fits, skipped = an.sweep_rates(reps, use_floor=self.config.floor)
        if not fits:
            msgs = sorted(set(skipped.values())) or [">= 3 points required for a rate fit"]
            raise ValueError("; ".join(msgs))
        p = an.write_rates_csv(fits, self.out / "rates.csv")
        self.manifest.add(p, "rates")
        if skipped:
            _write_json(self.out / "rates_skipped.json", {f"{k[0]}:{k[1]}": v for k, v in sorted(skipped.items())})
            self.manifest.add(self.out / "rates_skipped.json", "rates")
        if self.config.svg:
            plots = self.out / "plots"
            plots.mkdir(exist_ok=True)
            vel = [e for e in ("Est1", "Est1A", "Est2A", "Est3A") if e in self.config.estimates]
            pres = [e for e in ("Est4", "Est4A") if e in self.config.estimates]
            for name, ests in (("velocity", vel), ("pressure", pres)):
                if ests:
                    path = an.plot_estimates(reps, plots / f"{self.config.name}_{name}.svg", ests,
                                             f"{self.config.name}: {name} estimates")
                    self.manifest.add(path, "rates")
        return fits, skipped

    # --- full run -------------------------------------------------------------
    def run(self):
        c = self.config
        stage, case = "cell", ""
        try:
            for lv in c.levels_needed:
                stage, case = "cell", f"L{lv}"
                self.cell(lv)
            for lv in c.levels_needed:
                stage, case = "blayer", f"L{lv}"
                self.blayer(lv)
            constants = self.constants()
            fits = {}
            if c.estimates:
                stage, case = "micro", ""
                self.micro_many(c.eps, c.levels_needed)
                stage = "estimate"
                reps = self.reports()
                self.write_estimates(reps)
                stage = "rates"
                if len(c.eps) >= 3:
                    fits, _ = self.rates(reps)
            self.manifest.write("complete")
            return constants, fits
        except StageError as exc:
            self.manifest.mark_incomplete(exc.stage, exc.case, str(exc))
            self.manifest.write()
            raise
        except PorohomogError as exc:
            self.manifest.mark_incomplete(stage, case, str(exc))
            self.manifest.write()
            raise StageError(stage, case, str(exc)) from exc


def run_micro_case(case: MicroCase, directory, method="direct", tol=1e-10, vtk=False, keep=True):
    """Solve and store one micro case (also used by pool workers)."""
    directory = Path(directory)
    try:
        sol = solve_micro(case, method=method, tol=tol)
    except PorohomogError as exc:
        raise StageError("micro", f"eps={Fraction(case.eps).limit_denominator(10**6)}", str(exc)) from exc
    save_micro(sol, case, directory)
    if vtk:
        fileio.write_solution_vtk(sol, directory / "micro.vtk")
    return sol if keep else None


# ---------------------------------------------------------------------------
# expected-value checks
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    value: float
    passed: bool
    detail: str = ""


def run_checks(expected: dict, constants: dict, fits: dict, reports=()):
    """Compare results with an expected-values mapping.

    Keys: ``constants`` {name: {value, rel_tol | abs_tol}} and ``rates``
    {estimate id: {min, max}} (fits of the study's shape).
    """
    unknown = set(expected) - {"constants", "rates"}
    if unknown:
        raise ConfigError(f"unknown keys in expected values: {', '.join(sorted(unknown))}")
    results = []
    for name, spec in (expected.get("constants") or {}).items():
        if name not in constants:
            raise ConfigError(f"unknown constant {name!r} in expected values")
        v = float(constants[name])
        ref = float(spec["value"])
        if "rel_tol" in spec:
            ok = abs(v - ref) <= float(spec["rel_tol"]) * abs(ref)
            detail = f"{v:.10g} vs {ref:.10g} (rel_tol {spec['rel_tol']})"
        else:
            ok = abs(v - ref) <= float(spec.get("abs_tol", 0.0))
            detail = f"{v:.10g} vs {ref:.10g} (abs_tol {spec.get('abs_tol', 0.0)})"
        results.append(CheckResult(name, v, ok, detail))
    by_est = {est: f for (shape, est), f in fits.items()}
    for est, spec in (expected.get("rates") or {}).items():
        f = by_est.get(est)
        if f is None:
            results.append(CheckResult(f"rate {est}", float("nan"), False, "no fit available"))
            continue
        lo, hi = float(spec.get("min", -float("inf"))), float(spec.get("max", float("inf")))
        results.append(CheckResult(f"rate {est}", f.slope, lo <= f.slope <= hi, f"slope {f.slope:.4f} in [{lo}, {hi}]"))
    return results
