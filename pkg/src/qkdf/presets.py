"""Named experiment presets wiring channel models to protocol parameters.

The four built-ins carry the reference receiver constants (eta_bob =
56.08%, p_dc = 1e-8/pulse, e_mis = 0.4%, 0.7 ns dead time) at four
standard channel losses; their protocol parameters are the SKR
optimizer's output for a 1e8-bit block at that loss, frozen here for
reproducibility.

Extra presets can be dropped into $QKDF_CONFIG_DIR as TOML or JSON files
({"model": {...}, "params": {...}}); they are looked up by file stem.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from qkdf.channel import ChannelDetectorModel, model_from_dict
from qkdf.finitekey import ProtocolParams, SecurityParams

CONFIG_DIR_ENV = "QKDF_CONFIG_DIR"


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    model: ChannelDetectorModel
    params: ProtocolParams


def _preset(name, fibre_km, alpha, extra_db, p_z, mu1, mu2, p_mu1):
    return ExperimentPreset(
        name=name,
        model=ChannelDetectorModel(fibre_km=fibre_km, alpha_db_per_km=alpha,
                                   extra_loss_db=extra_db),
        params=ProtocolParams(p_z=p_z, q_z=p_z, mu1=mu1, mu2=mu2, p_mu1=p_mu1),
    )


BUILTIN_PRESETS = {
    "10km": _preset("10km", 10.0, 0.19, 0.30, 0.9085, 0.5901, 0.1467, 0.8487),
    "50km": _preset("50km", 50.0, 0.19, 0.00, 0.9040, 0.5920, 0.1412, 0.8488),
    "101km": _preset("101km", 101.0, 0.19, 0.41, 0.9027, 0.5937, 0.1401, 0.8488),
    "328km": _preset("328km", 328.0, 0.168, 0.00, 0.7659, 0.5781, 0.1120, 0.7742),
}


def _params_from_dict(data: dict) -> ProtocolParams:
    data = dict(data)
    if "q_z" not in data:
        data["q_z"] = data["p_z"]
    sec = data.pop("security", None)
    if sec is not None:
        data["security"] = SecurityParams(**sec)
    return ProtocolParams(**data)


def load_preset_file(path) -> ExperimentPreset:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        data = tomllib.loads(path.read_text())
    else:
        data = json.loads(path.read_text())
    return ExperimentPreset(name=path.stem,
                            model=model_from_dict(data["model"]),
                            params=_params_from_dict(data["params"]))


def get_preset(name: str) -> ExperimentPreset:
    if name in BUILTIN_PRESETS:
        return BUILTIN_PRESETS[name]
    config_dir = os.environ.get(CONFIG_DIR_ENV)
    if config_dir:
        for suffix in (".toml", ".json"):
            path = Path(config_dir) / f"{name}{suffix}"
            if path.exists():
                return load_preset_file(path)
    raise KeyError(f"unknown preset {name!r} "
                   f"(built-ins: {', '.join(sorted(BUILTIN_PRESETS))})")
