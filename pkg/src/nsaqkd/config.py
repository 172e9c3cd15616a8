"""Scenario configuration: TOML for people, JSON for machines, one schema."""
from __future__ import annotations

import copy
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .bb84_keyrate import Bb84KeyRateConfig
from .mdi_keyrate import FLUCTUATION_FUNCTIONS, MdiKeyRateConfig
from .optics import BASES, INTENSITIES, DetectorModel, OpticalLinkModel, SourceSettings
from .optimizer import ASYMPTOTIC, Mode, ParameterVector, PsoConfig
from .report import REPETITION_RATE_HZ
from .schema import SchemaError, validate

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

CONFIG_DIR_ENV = "NSAQKD_CONFIG_DIR"


def resolve_config_path(path: str | os.PathLike) -> Path:
    """Find ``path`` as given, else under ``$NSAQKD_CONFIG_DIR``."""
    p = Path(path)
    if p.exists():
        return p
    base = os.environ.get(CONFIG_DIR_ENV)
    if base and not p.is_absolute() and (Path(base) / p).exists():
        return Path(base) / p
    raise FileNotFoundError(f"config file {path} not found" +
                            (f" (also looked in ${CONFIG_DIR_ENV}={base})" if base else ""))


def read_config_file(path: str | os.PathLike) -> dict:
    """Parse TOML or JSON by extension; syntax errors become SchemaError."""
    p = resolve_config_path(path)
    text = p.read_text()
    if p.suffix.lower() == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config {p}", [f"line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError(f"config {p}", [str(exc)]) from None


@dataclass
class WorkbenchConfig:
    """Validated scenario; ``data`` keeps the raw (schema-checked) mapping."""

    data: dict
    path: Path | None = None

    def __post_init__(self):
        validate(self.data, "workbench", f"config {self.path}" if self.path else "config")
        # Build once so semantic errors (decoy ordering, probability sums)
        # surface at load time with a clear message.
        self.source_a()
        self.source_b()
        self.link()

    @classmethod
    def load(cls, path) -> "WorkbenchConfig":
        p = resolve_config_path(path)
        return cls(read_config_file(p), p)

    # -- accessors ----------------------------------------------------------
    @property
    def protocol(self) -> str:
        return self.data["protocol"]

    @property
    def scenario(self) -> str:
        return self.data["scenario"]

    @property
    def repetition_rate(self) -> float:
        return float(self.data.get("repetition_rate_hz", REPETITION_RATE_HZ))

    @property
    def gain_convention(self) -> str:
        return self.data["link"].get("gain_convention", "pair")

    def _source(self, sec: dict) -> SourceSettings:
        mu, nu, omega = sec["mu"], sec["nu"], sec["omega"]
        if self.protocol == "MDI":
            need = ("p_mu_x", "p_mu_y", "p_nu_x", "p_nu_y", "p_omega")
            missing = [k for k in need if k not in sec]
            if missing:
                raise SchemaError("config", [f"source: MDI needs {', '.join(missing)}"])
            return SourceSettings.with_basisless_vacuum(mu, nu, omega, *(sec[k] for k in need))
        prob = {b: {i: sec.get(f"p_{i}_{b.lower()}", 0.0) for i in INTENSITIES} for b in BASES}
        return SourceSettings(mu, nu, omega, prob)

    def source_a(self) -> SourceSettings:
        return self._source(self.data["source"])

    def source_b(self) -> SourceSettings:
        return self._source(self.data.get("source_b", self.data["source"]))

    def parameters(self) -> ParameterVector:
        return ParameterVector.from_source(self.protocol, self.source_a())

    def detector(self) -> DetectorModel:
        d = self.data.get("detector", {})
        return DetectorModel(d.get("y0", 0.0), d.get("p_ap", 0.0), d.get("eta_d", 1.0))

    def link(self) -> OpticalLinkModel:
        l = self.data["link"]
        per_km = l.get("loss_db_per_km", 0.196)
        la = l.get("length_km", 0.0)
        lb = l.get("length_b_km", la)
        default_ed = 0.02 if self.protocol == "MDI" else 0.0015
        return OpticalLinkModel.from_db(la * per_km, lb * per_km,
                                        internal_loss_db=l.get("internal_loss_db", 0.0),
                                        detector=self.detector(), e_d=l.get("e_d", default_ed),
                                        theta_c=l.get("theta_c", 0.0))

    def keyrate_section(self) -> dict:
        return dict(self.data.get("keyrate", {}))

    def keyrate_options(self) -> dict:
        """Engine options other than the sources, trial count and mode."""
        k = self.keyrate_section()
        if self.protocol == "MDI":
            opts = {"f_e": k.get("f_e", 1.16), "epsilon": k.get("epsilon", 1e-10)}
            opts["fluctuation"] = FLUCTUATION_FUNCTIONS[k.get("fluctuation", "sqrt_2ln")]
            return opts
        opts = {"f_e": k.get("f_e", 1.16), "epsilon_sec": k.get("epsilon_sec", 1e-9),
                "epsilon_cor": k.get("epsilon_cor", 1e-15), "key_basis": k.get("key_basis", "X")}
        if "receiver_p_x" in k:
            opts["receiver_prob"] = {"X": k["receiver_p_x"], "Y": 1 - k["receiver_p_x"]}
        return opts

    def mdi_keyrate_config(self, n_total: float | None = None, **over) -> MdiKeyRateConfig:
        k = self.keyrate_section()
        return MdiKeyRateConfig(self.source_a(), self.source_b(), n_total=n_total,
                                asymptotic=k.get("asymptotic", False),
                                **{**self.keyrate_options(), **over})

    def bb84_keyrate_config(self, n_total: float | None = None, **over) -> Bb84KeyRateConfig:
        k = self.keyrate_section()
        return Bb84KeyRateConfig(self.source_a(), n_total=n_total, asymptotic=k.get("asymptotic", False),
                                 **{**self.keyrate_options(), **over})

    def mode(self) -> Mode:
        """Objective mode for sweeps and optimisation."""
        k = self.keyrate_section()
        pso_mode = self.data.get("pso", {}).get("mode")
        asym = k.get("asymptotic", False) if pso_mode is None else pso_mode == "asymptotic"
        if asym:
            return ASYMPTOTIC
        if "n_total" not in k:
            raise SchemaError("config", ["keyrate/n_total: finite mode needs n_total"])
        return Mode.finite(k["n_total"])

    def pso(self) -> PsoConfig:
        p = {k: v for k, v in self.data.get("pso", {}).items() if k not in ("mode", "warm_start")}
        return PsoConfig(**p)

    def with_value(self, dotted: str, value: float) -> "WorkbenchConfig":
        """Copy with one numeric field replaced (``section.key``)."""
        data = copy.deepcopy(self.data)
        sec, _, key = dotted.partition(".")
        if not key or sec not in data or not isinstance(data[sec], dict):
            raise ValueError(f"cannot vary {dotted!r}: expected section.key")
        data[sec][key] = value
        return WorkbenchConfig(data, self.path)

    def canonical(self) -> dict:
        return copy.deepcopy(self.data)
