"""Project configuration files.

The format is INI (``configparser``). Lists use ``;`` between rows and
``,`` between columns, and polynomial strings may be quoted::

    [system]
    n = 2
    m = 1
    f = "-x1 - x1^3 + x2^2" ; "0"
    B = 0 ; 1
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .metric import GridSpec
from .polydyn import ControlAffineSystem


class ConfigError(ValueError):
    pass


def _unquote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    return s


def _rows(text: str) -> list[list[str]]:
    return [[_unquote(c) for c in r.split(",")] for r in text.split(";") if r.strip()]


def _floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()])


def _matrix(text: str, n: int) -> np.ndarray:
    if text.strip().lower() == "identity":
        return np.eye(n)
    return np.array([[float(v) for v in r] for r in _rows(text)])


def _int_list(text: str) -> list[int] | None:
    if text.strip().lower() in ("auto", ""):
        return None
    return [int(v) - 1 for v in text.split(",") if v.strip()]


@dataclass
class ProjectConfig:
    """Parsed configuration with one attribute per section."""

    system: dict
    synthesis: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    manifold: dict = field(default_factory=dict)
    text: str = ""

    # -- parsing ------------------------------------------------------------
    @classmethod
    def parse(cls, text: str) -> "ProjectConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        if not cp.has_section("system"):
            raise ConfigError("missing [system] section")
        secs = {s: dict(cp.items(s)) for s in cp.sections()}
        cfg = cls(secs["system"], secs.get("synthesis", {}), secs.get("controller", {}),
                  secs.get("simulation", {}), secs.get("manifold", {}), text)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ProjectConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self) -> str:
        out = []
        for name in ("system", "synthesis", "controller", "simulation", "manifold"):
            sec = getattr(self, name)
            if not sec:
                continue
            out.append(f"[{name}]")
            out += [f"{k} = {v}" for k, v in sec.items()]
            out.append("")
        return "\n".join(out)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def validate(self) -> None:
        sys = self.build_system()
        if "n" in self.system and int(self.system["n"]) != sys.n:
            raise ConfigError(f"n = {self.system['n']} but f has {sys.n} entries")
        if "m" in self.system and int(self.system["m"]) != sys.m:
            raise ConfigError(f"m = {self.system['m']} but B has {sys.m} columns")
        for x0 in self.x0_list():
            if x0.size != sys.n:
                raise ConfigError(f"initial condition {x0} does not have {sys.n} entries")
        if self.synthesis.get("anchor_point"):
            if _floats(self.synthesis["anchor_point"]).size != sys.n:
                raise ConfigError("anchor_point has the wrong dimension")

    # -- typed accessors ----------------------------------------------------
    def build_system(self) -> ControlAffineSystem:
        try:
            f = [_unquote(p) for p in self.system["f"].split(";") if p.strip()]
            n = len(f)
            B_txt = self.system.get("B", "").strip()
            B = _rows(B_txt) if B_txt else [[] for _ in range(n)]
            if len(B) != n:
                raise ConfigError(f"B has {len(B)} rows, expected {n}")
            if all(len(r) == 0 for r in B):
                B = None
            return ControlAffineSystem.from_strings(f, B, name=self.system.get("name", ""))
        except KeyError as exc:
            raise ConfigError(f"missing key {exc} in [system]") from exc
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad system definition: {exc}") from exc

    def _get(self, sec: dict, key: str, default):
        v = sec.get(key)
        if v is None:
            return default
        return type(default)(v) if not isinstance(default, bool) else v.lower() in ("1", "true", "yes")

    @property
    def lam(self) -> float:
        return self._get(self.synthesis, "lambda", 0.5)

    def grid(self, scale: float = 1.0) -> GridSpec:
        n = self.build_system().n
        hw = self._get(self.synthesis, "grid_half_width", 1.0)
        pts = max(1, int(round(self._get(self.synthesis, "grid_points", 11) * scale)))
        return GridSpec.box(hw, n, pts)

    def x0_list(self) -> list[np.ndarray]:
        txt = self.simulation.get("x0", "")
        return [np.array([float(v) for v in r]) for r in _rows(txt)]

    def anchor_matrices(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        sys = self.build_system()
        Q = _matrix(self.synthesis.get("Q", "identity"), sys.n)
        R = _matrix(self.synthesis.get("R", "identity"), sys.m)
        x0 = _floats(self.synthesis.get("anchor_point", ",".join(["0"] * sys.n)))
        return Q, R, x0

    def W_variables(self) -> list[int] | None:
        return _int_list(self.synthesis.get("W_variables", "auto"))

    def rho_variables(self) -> list[int] | None:
        return _int_list(self.synthesis.get("rho_variables", "auto"))
