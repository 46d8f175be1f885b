"""JSON experiment configuration.

Every field has a default, unknown keys are rejected, and errors point at the
offending field (and its line when it can be located in the source text).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional

from conslab.engine import VARIANTS, ModelConfig, TrainSchedule
from conslab.errors import ConfigError, ConslabError
from conslab.losses import LossSpec, parse_kind
from conslab.synth import DatasetConfig


@dataclass
class LossConfig:
    kind: str = "conservative"
    a: float = math.e
    lam: float = 5.0
    alpha_t: float = 5.0
    gamma: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def to_spec(self) -> LossSpec:
        kind = parse_kind(self.kind)
        return LossSpec(
            kind=kind,
            a=self.a,
            lam=self.lam,
            alpha_t=self.alpha_t,
            gamma=self.gamma,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            alpha=self.alpha,
            beta=self.beta,
        )


@dataclass
class TrainConfig:
    variant: str = "seg_plus_gan"
    loss: LossConfig = field(default_factory=LossConfig)
    warm_start: bool = True
    warm_fraction: float = 0.5
    total_steps: int = 2000
    eval_every: Optional[int] = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    recon_weight: float = 1.0
    seed: int = 0

    def schedule(self) -> TrainSchedule:
        return TrainSchedule.make(
            self.loss.to_spec(),
            total_steps=self.total_steps,
            warm=self.warm_start,
            warm_fraction=self.warm_fraction,
            eval_every=self.eval_every,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            recon_weight=self.recon_weight,
            seed=self.seed,
        )


@dataclass
class RosterEntry:
    """One comparison row: overrides applied on top of the ``train`` section."""

    name: str = ""
    group: str = ""
    variant: Optional[str] = None
    loss: Optional[LossConfig] = None
    warm_start: Optional[bool] = None


@dataclass
class CompareConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    roster: Optional[List[RosterEntry]] = None


@dataclass
class ExportConfig:
    stride: int = 4
    split: str = "eval"  # "eval" or "train"; both domains are exported


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    export: ExportConfig = field(default_factory=ExportConfig)

    def model_config(self) -> ModelConfig:
        m = copy.copy(self.model)
        m.C, m.K = self.dataset.C, self.dataset.K
        return m

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def run_hash(self) -> str:
        """Hash of everything that determines a single training run."""
        d = self.to_dict()
        payload = {k: d[k] for k in ("dataset", "model", "train")}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_entry(self, entry: RosterEntry, seed: Optional[int] = None) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        t = cfg.train
        if entry.variant is not None:
            t.variant = entry.variant
        if entry.loss is not None:
            t.loss = copy.deepcopy(entry.loss)
        if entry.warm_start is not None:
            t.warm_start = entry.warm_start
        if seed is not None:
            t.seed = seed
        return cfg


def default_roster() -> List[RosterEntry]:
    """Component, loss-family, start-mode, base and weight ablations."""
    ce = LossConfig(kind="cross_entropy")
    rows = [
        RosterEntry("seg_only+CE", "components", "seg_only", ce, True),
        RosterEntry("seg+GAN+CE", "components", "seg_plus_gan", ce, True),
        RosterEntry("seg+GAN+CL", "components", "seg_plus_gan", LossConfig(), True),
        RosterEntry("seg+GAN+FL", "losses", "seg_plus_gan", LossConfig(kind="focal"), True),
        RosterEntry("seg+GAN+Cubic1", "homogeneous", "seg_plus_gan", LossConfig(kind="cubic1", lambda1=5.0), True),
        RosterEntry("seg+GAN+Cubic2", "homogeneous", "seg_plus_gan", LossConfig(kind="cubic2", lambda2=5.0), True),
        # branch weights matched to CL (lam=5) at p=0.1 and p=0.9
        RosterEntry("seg+GAN+Cubic3", "homogeneous", "seg_plus_gan", LossConfig(kind="cubic3", alpha=368.0, beta=60.0), True),
        RosterEntry("CL cold start", "start", "seg_plus_gan", LossConfig(), False),
    ]
    for a in (2.0, 3.0, 4.0):
        rows.append(RosterEntry(f"CL a={a:g}", "base", "seg_plus_gan", LossConfig(a=a), True))
    for lam in (1.0, 10.0, 20.0):
        rows.append(RosterEntry(f"CL lambda={lam:g}", "weight", "seg_plus_gan", LossConfig(lam=lam), True))
    return rows


# --- parsing ---------------------------------------------------------------

_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "train"): TrainConfig,
    (ExperimentConfig, "compare"): CompareConfig,
    (ExperimentConfig, "export"): ExportConfig,
    (TrainConfig, "loss"): LossConfig,
    (RosterEntry, "loss"): LossConfig,
}


def _to_plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _line_of(text: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return None if m is None else text.count("\n", 0, m.start()) + 1


def _error(msg: str, path: str, text: Optional[str]) -> ConfigError:
    key = path.rsplit(".", 1)[-1].split("[")[0]
    line = _line_of(text, key)
    where = f"{path}" + (f" (line {line})" if line else "")
    return ConfigError(f"{where}: {msg}")


def _check_scalar(value, default, path, text):
    # the default's type decides what is acceptable; bool is not an int here
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
        if ok:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "a string"
    else:
        return value
    if not ok:
        raise _error(f"expected {want}, got {json.dumps(value)}", path, text)
    return value


def _build(cls, data, path: str, text: Optional[str]):
    if not isinstance(data, dict):
        raise _error("expected an object", path, text)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise _error(f"unknown key {key!r}", f"{path}.{key}" if path else key, text)
    proto = cls()
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        default = getattr(proto, name)
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = None if value is None and default is None else _build(nested, value, sub, text)
        elif cls is CompareConfig and name == "roster":
            if value is None:
                kwargs[name] = None
            elif not isinstance(value, list):
                raise _error("expected a list of roster entries", sub, text)
            else:
                kwargs[name] = [_build(RosterEntry, v, f"{sub}[{i}]", text) for i, v in enumerate(value)]
        elif value is None:
            kwargs[name] = None
        elif default is None:
            kwargs[name] = value
        else:
            kwargs[name] = _check_scalar(value, default, sub, text)
    try:
        return cls(**kwargs)
    except ConslabError as exc:
        raise _error(str(exc), path or "<root>", text) from exc
    except (TypeError, ValueError) as exc:
        raise _error(str(exc), path or "<root>", text) from exc


def _validate(cfg: ExperimentConfig, text: Optional[str]) -> ExperimentConfig:
    t = cfg.train
    if t.variant not in VARIANTS:
        raise _error(f"variant must be one of {list(VARIANTS)}", "train.variant", text)
    entries = cfg.compare.roster or []
    for i, e in enumerate(entries):
        if e.variant is not None and e.variant not in VARIANTS:
            raise _error(f"variant must be one of {list(VARIANTS)}", f"compare.roster[{i}].variant", text)
        if not e.name:
            raise _error("roster entry needs a name", f"compare.roster[{i}].name", text)
    if not cfg.compare.seeds:
        raise _error("need at least one seed", "compare.seeds", text)
    if cfg.export.stride < 1:
        raise _error("stride must be >= 1", "export.stride", text)
    if cfg.export.split not in ("eval", "train"):
        raise _error('split must be "eval" or "train"', "export.split", text)
    for name, lc in [("train.loss", t.loss)] + [(f"compare.roster[{i}].loss", e.loss) for i, e in enumerate(entries)]:
        if lc is None:
            continue
        try:
            lc.to_spec()
        except ConslabError as exc:
            raise _error(str(exc), name, text) from exc
    try:
        cfg.train.schedule()
        cfg.model_config()
    except ConslabError as exc:
        raise _error(str(exc), "train", text) from exc
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return _validate(_build(ExperimentConfig, data, "", text), text)


def from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    return _validate(_build(ExperimentConfig, data, "", None), None)


def load_config(path) -> ExperimentConfig:
    """Read a config file; ``None`` gives the all-defaults config."""
    if path is None:
        return _validate(ExperimentConfig(), None)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
