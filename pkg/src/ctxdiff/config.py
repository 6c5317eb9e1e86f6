"""JSON run configuration with a strict schema.

A config file is one JSON object with optional sections ``data``, ``train``,
``sample``, ``nelbo`` and ``verify``. Every field has a default; unknown
sections or keys and wrongly typed values are all collected and reported
together. A RunManifest written by any command is also accepted as a config:
its ``config`` member is read back.
"""
from __future__ import annotations

import copy
import json

from .faults import KNOWN as KNOWN_FAULTS

NUM = (int, float)
OPT_STR = (str, type(None))
OPT_LIST = (list, type(None))

SECTIONS: dict[str, dict[str, tuple]] = {
    "data": {
        "generator": (str, "toy-gaussian"),
        "n": (int, 10_000),
        "n_classes": (int, 2),
        "dim": (int, 2),
        "sigma": (NUM, 0.5),
        "means": (OPT_LIST, None),
        "noise": (NUM, 0.05),
        "seed": (int, 0),
    },
    "train": {
        "dataset": (OPT_STR, None),
        "schedule": (dict, {"kind": "cosine", "T": 100}),
        "adapter": (dict, {"variant": "learned"}),
        "denoiser": (dict, {}),
        "steps": (int, 5000),
        "batch_size": (int, 128),
        "lr": (NUM, 1e-3),
        "betas": (list, [0.9, 0.999]),
        "weight_decay": (NUM, 0.0),
        "lambda_mode": (str, "unit"),
        "train_adapter": (bool, True),
        "lipschitz_every": (int, 500),
        "lipschitz_pairs": (int, 512),
        "nelbo_every": (int, 0),
        "nelbo_items": (int, 256),
        "seed": (int, 0),
    },
    "sample": {
        "checkpoint": (OPT_STR, None),
        "n_per_class": (int, 1000),
        "classes": (OPT_LIST, None),
        "mode": (str, "ddpm"),
        "stride": (int, 1),
        "eta": (NUM, 0.0),
        "clip": (OPT_LIST, None),
        "svg": (bool, False),
        "seed": (int, 0),
    },
    "nelbo": {
        "checkpoint": (OPT_STR, None),
        "dataset": (OPT_STR, None),
        "baseline": (OPT_STR, None),
        "items": (int, 2000),
        "mc_samples": (int, 1),
        "recon_std": (NUM, 1e-3),
        "n_boot": (int, 2000),
        "seed": (int, 0),
    },
    "verify": {
        "zero_adapter_only": (bool, False),
        "faults": (list, []),
        "mc_samples": (int, 1_000_000),
        "bayes_cases": (int, 1000),
        "seed": (int, 0),
    },
}

NESTED_KEYS = {
    ("train", "schedule"): {"kind", "T", "beta_start", "beta_end"},
    ("train", "adapter"): {"variant", "r", "hidden", "cond_dim", "time_dim"},
    ("train", "denoiser"): {"hidden", "depth", "cond_dim", "time_dim", "precondition", "data_std"},
}

MANIFEST_KIND = "ctxdiff-run-manifest"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def _type_ok(value, types) -> bool:
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def _type_name(types) -> str:
    types = types if isinstance(types, tuple) else (types,)
    names = {int: "integer", float: "number", str: "string", list: "array",
             dict: "object", bool: "boolean", type(None): "null"}
    return " or ".join(dict.fromkeys(names[t] for t in types))


def load_document(path) -> dict:
    """Read a config file (or a manifest) into a raw document."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    if doc.get("kind") == MANIFEST_KIND:
        doc = doc.get("config", {})
    return doc


def problems_in(doc: dict) -> list[str]:
    out = []
    for name, section in doc.items():
        if name not in SECTIONS:
            out.append(f"{name}: unknown section (expected one of {sorted(SECTIONS)})")
            continue
        if not isinstance(section, dict):
            out.append(f"{name}: must be an object")
            continue
        fields = SECTIONS[name]
        for key, value in section.items():
            if key not in fields:
                out.append(f"{name}.{key}: unknown field")
                continue
            types = fields[key][0]
            if not _type_ok(value, types):
                out.append(f"{name}.{key}: expected {_type_name(types)}, got {json.dumps(value)}")
                continue
            allowed = NESTED_KEYS.get((name, key))
            if allowed is not None:
                for sub in value:
                    if sub not in allowed:
                        out.append(f"{name}.{key}.{sub}: unknown field")
        if name == "verify":
            for f in section.get("faults", []) or []:
                if f not in KNOWN_FAULTS:
                    out.append(f"verify.faults: unknown fault {f!r} (known: {sorted(KNOWN_FAULTS)})")
    return out


def resolve(doc: dict | None, section: str, overrides: dict | None = None) -> dict:
    """Defaults, then the file's section, then non-``None`` overrides."""
    doc = {} if doc is None else doc
    problems = problems_in(doc)
    out = {k: copy.deepcopy(v[1]) for k, v in SECTIONS[section].items()}
    out.update(copy.deepcopy(doc.get(section, {})) if isinstance(doc.get(section), dict) else {})
    for key, value in (overrides or {}).items():
        if value is not None:
            out[key] = value
    if problems:
        raise ConfigError(problems)
    return out
