"""Run configuration: INI-style text files (key = value under bracketed
sections) with CLI overrides. Parsing is fail-closed: unknown sections or
keys raise ConfigError rather than being ignored, and the fully resolved
configuration is echoed next to every run's outputs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .depthdist import BinSpec, make_bins
from .harness import DistillConfig
from .model import ModelSpec
from .saliency import DEFAULT_DISTILL_LAYERS
from .supervision import LossWeights


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in s.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"not an integer list: {s!r}") from e


def _parse_names(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


_SCHEMA = {
    "data": {
        "height": int, "width": int,
        "train_seed": int, "train_count": int,
        "eval_seed": int, "eval_count": int,
    },
    "model": {
        "fusion": str,
        "image_widths": _parse_ints, "radar_widths": _parse_ints,
        "decoder_widths": _parse_ints,
        "daspp": _parse_bool,
        "daspp_rates_32": _parse_ints, "daspp_rates_16": _parse_ints,
        "daspp_rates_8": _parse_ints,
    },
    "train": {
        "lr": float, "momentum": float, "epochs": int,
        "batch_size": int, "seed": int,
    },
    "distill": {
        "lambda1": float, "lambda2": float, "lambda3": float,
        "layers": _parse_names,
    },
    "bins": {
        "count": int, "tau": float, "dmin": float, "dmax": float,
    },
}

_DEFAULTS = {
    "data": {"height": 64, "width": 128, "train_seed": 1000, "train_count": 200,
             "eval_seed": 9000, "eval_count": 50},
    "model": {"fusion": "film",
              "image_widths": (4, 8, 16, 24, 32), "radar_widths": (4, 8, 16, 24, 32),
              "decoder_widths": (24, 16, 8, 4), "daspp": True,
              "daspp_rates_32": (1, 2, 4), "daspp_rates_16": (2, 4, 8),
              "daspp_rates_8": (3, 6, 12)},
    "train": {"lr": 1e-3, "momentum": 0.9, "epochs": 30, "batch_size": 4, "seed": 0},
    "distill": {"lambda1": 1.0, "lambda2": 0.5, "lambda3": 0.5,
                "layers": DEFAULT_DISTILL_LAYERS},
    "bins": {"count": 64, "tau": 2.0, "dmin": 0.5, "dmax": 80.0},
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: dict(kv) for s, kv in _DEFAULTS.items()})

    # -- construction --------------------------------------------------------

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as f:
                parser.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                cfg._set(section, key, raw, origin=str(path))
        return cfg

    def _set(self, section: str, key: str, raw: str, origin: str = "override") -> None:
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"{origin}: unknown key {section}.{key}")
        parse = _SCHEMA[section][key]
        try:
            self.values[section][key] = parse(raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"{origin}: bad value for {section}.{key}: {raw!r}") from e

    def apply_overrides(self, pairs) -> None:
        """Apply 'section.key=value' strings from the command line."""
        for pair in pairs:
            if "=" not in pair or "." not in pair.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value: {pair!r}")
            dotted, raw = pair.split("=", 1)
            section, key = dotted.split(".", 1)
            self._set(section.strip(), key.strip(), raw.strip())

    # -- rendering ------------------------------------------------------------

    def render(self) -> str:
        out = []
        for section in _SCHEMA:
            out.append(f"[{section}]")
            for key in _SCHEMA[section]:
                v = self.values[section][key]
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                out.append(f"{key} = {v}")
            out.append("")
        return "\n".join(out)

    # -- typed views ----------------------------------------------------------

    def model_spec(self) -> ModelSpec:
        m = self.values["model"]
        rates = None
        if m["daspp"]:
            rates = {32: tuple(m["daspp_rates_32"]), 16: tuple(m["daspp_rates_16"]),
                     8: tuple(m["daspp_rates_8"])}
        try:
            return ModelSpec(image_widths=tuple(m["image_widths"]),
                             radar_widths=tuple(m["radar_widths"]),
                             decoder_widths=tuple(m["decoder_widths"]),
                             fusion=m["fusion"], daspp_rates=rates,
                             input_depth_scale=self.values["bins"]["dmax"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def bin_spec(self) -> BinSpec:
        b = self.values["bins"]
        try:
            return make_bins(b["dmin"], b["dmax"], b["count"], b["tau"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def distill_config(self) -> DistillConfig:
        t, d = self.values["train"], self.values["distill"]
        try:
            return DistillConfig(
                weights=LossWeights(d["lambda1"], d["lambda2"], d["lambda3"]),
                bins=self.bin_spec(), layers=tuple(d["layers"]),
                lr=t["lr"], momentum=t["momentum"], epochs=t["epochs"],
                batch_size=t["batch_size"], seed=t["seed"])
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def data_params(self) -> dict:
        return dict(self.values["data"])
