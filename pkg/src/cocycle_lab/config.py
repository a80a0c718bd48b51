"""Run configuration: a single JSON document per invocation.

Every section is validated strictly; unknown keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cocycle import OperatorSpec
from .errors import ConfigError, DomainError
from .fourier import FourierMap, FrequencyVector, TrigPolynomial
from .kam import KamSchedule
from .spectral import FAMILIES

SCHEMA_VERSION = 1

COMMANDS = ("lyapunov", "ids", "thouless", "holder", "levelset", "duality", "kam-trace")

_COMMON = {"schema_version", "command", "seed"}
_KEYS = {
    "lyapunov": {"operator", "energies", "n_iters", "phase_samples", "burn_in"},
    "ids": {"operator", "family", "energies", "box", "phase_samples"},
    "thouless": {"operator", "energies", "box", "phase_samples", "n_iters"},
    "holder": {"operator", "family", "energies", "box", "phase_samples", "targets", "scale_count", "eps0",
               "floor", "window"},
    "levelset": {"operator", "W", "energies"},
    "duality": {"operator", "box", "phase_samples", "long_family", "finite_family", "energies"},
    "kam-trace": {"operator", "energy", "A0", "f0", "schedule", "max_steps"},
}
_OPERATOR_KEYS = {"alpha", "W", "V", "lambda", "lambda_inv"}
_SCHEDULE_KEYS = set(KamSchedule.__dataclass_fields__)


@dataclass(frozen=True)
class RunConfig:
    command: str
    doc: dict

    def get(self, key, default=None):
        return self.doc.get(key, default)

    @property
    def seed(self):
        return self.doc.get("seed")

    def digest(self):
        canon = json.dumps(self.doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def _reject_unknown(section, allowed, where):
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _number(doc, key, default=None, kind=float, minimum=None):
    if key not in doc:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(f"{key} must be an integer")
        v = int(v)
    else:
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(f"{key} must be finite")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{key} must be >= {minimum}")
    return v


def parse_energies(value, required=True):
    """A list of energies or ``{"start", "stop", "num"}``; must be sorted and nonempty."""
    if value is None:
        if required:
            raise ConfigError("missing energy grid")
        return None
    if isinstance(value, dict):
        _reject_unknown(value, {"start", "stop", "num"}, "energies")
        num = _number(value, "num", kind=int, minimum=1)
        grid = np.linspace(_number(value, "start"), _number(value, "stop"), num)
    else:
        try:
            grid = np.asarray(value, dtype=float).ravel()
        except (TypeError, ValueError) as exc:
            raise ConfigError("energies must be numbers") from exc
    if grid.size == 0:
        raise ConfigError("energy grid is empty")
    if not np.all(np.isfinite(grid)):
        raise ConfigError("energies must be finite")
    if np.any(np.diff(grid) < 0):
        raise ConfigError("energy grid must be sorted")
    return grid


def parse_trig(value):
    if isinstance(value, dict):
        _reject_unknown(value, {"re", "im"}, "W")
        re = np.asarray(value.get("re", []), dtype=float)
        im = np.asarray(value.get("im", np.zeros_like(re)), dtype=float)
        if re.shape != im.shape:
            raise ConfigError("W.re and W.im differ in length")
        coeffs = re + 1j * im
    else:
        coeffs = np.asarray(value, dtype=complex)
    try:
        return TrigPolynomial(tuple(coeffs))
    except DomainError as exc:
        raise ConfigError(f"invalid W: {exc}") from exc


def parse_potential(value, d):
    """``{"cos": [c_1, ..., c_d]}`` for ``sum_i 2 c_i cos 2 pi x_i`` or a Fourier-map document."""
    if isinstance(value, dict) and "cos" in value:
        _reject_unknown(value, {"cos"}, "V")
        amps = np.atleast_1d(np.asarray(value["cos"], dtype=float))
        if amps.size != d:
            raise ConfigError(f"V.cos needs {d} amplitudes")
        entries = {}
        for i, a in enumerate(amps):
            for s in (1, -1):
                n = [0] * d
                n[i] = s
                entries[tuple(n)] = [[a]]
        return FourierMap.from_modes(entries, d, 1, radius=1, real=True)
    if isinstance(value, dict) and "entries" in value:
        try:
            F = FourierMap.from_json(value)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid V: {exc}") from exc
        if F.m != 1 or F.d != d:
            raise ConfigError("V must be a scalar map on T^d")
        return F
    raise ConfigError("V must be {'cos': [...]} or a Fourier-map document")


def parse_operator(section):
    if not isinstance(section, dict):
        raise ConfigError("operator must be an object")
    _reject_unknown(section, _OPERATOR_KEYS, "operator")
    try:
        alpha = FrequencyVector.coerce(section.get("alpha", "golden"))
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    W = parse_trig(section.get("W", [1.0, 0.0, 1.0]))
    V = parse_potential(section.get("V", {"cos": [1.0] * alpha.d}), alpha.d)
    lam = section.get("lambda")
    lam_inv = section.get("lambda_inv")
    if lam is not None and lam_inv is None and lam != 0:
        lam_inv = 1.0 / lam
    lam_inv = 0.0 if lam_inv is None else float(lam_inv)
    if lam_inv < 0:
        raise ConfigError("lambda_inv must be nonnegative")
    return OperatorSpec(W, V, alpha, lam_inv, None if lam is None else float(lam))


def parse_schedule(section):
    section = section or {}
    _reject_unknown(section, _SCHEDULE_KEYS, "schedule")
    try:
        return KamSchedule(**section)
    except TypeError as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc


def parse_matrix(value, where):
    if isinstance(value, dict):
        _reject_unknown(value, {"re", "im"}, where)
        re = np.asarray(value["re"], dtype=float)
        im = np.asarray(value.get("im", np.zeros_like(re)), dtype=float)
        M = re + 1j * im
    else:
        M = np.asarray(value, dtype=complex)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError(f"{where} must be a square matrix")
    return M


def load_config(source, command, seed=None):
    """Load and validate a config for ``command`` from a path, JSON string or dict."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if isinstance(source, dict):
        doc = dict(source)
    else:
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    if "command" in doc and doc["command"] != command:
        raise ConfigError(f"config is for {doc['command']!r}, not {command!r}")
    _reject_unknown(doc, _COMMON | _KEYS[command], "config")
    if seed is not None:
        doc["seed"] = int(seed)
    if doc.get("seed") is not None and (isinstance(doc["seed"], bool) or not isinstance(doc["seed"], int)):
        raise ConfigError("seed must be an integer")
    if "family" in doc and doc["family"] not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}")
    for key in ("box",):
        if key in doc:
            _number(doc, key, kind=int, minimum=1)
    for key in ("phase_samples", "n_iters", "scale_count", "max_steps"):
        if key in doc:
            _number(doc, key, kind=int, minimum=1)
    return RunConfig(command, doc)
