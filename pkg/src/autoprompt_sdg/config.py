"""Pipeline configuration: one YAML file fully determines a run."""

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .agm import AgmConfig, OptimConfig
from .data import DomainStyle
from .segmenter import PromptJitter, SegmenterConfig


class ConfigError(ValueError):
    pass


def default_target_styles():
    return {
        "target_a": DomainStyle(intensity_offset=-0.1, gamma=2.2, noise_std=0.08, blur_sigma=0.0, texture_amp=0.10),
        "target_b": DomainStyle(intensity_offset=0.1, gamma=0.5, noise_std=0.04, blur_sigma=1.0, texture_amp=0.10),
    }


@dataclass
class SyntheticSpec:
    size: tuple = (128, 128)
    n_per_domain: int = 80
    train_fraction: float = 0.8
    shape_family: str = "mixed"
    distractors: int = 3
    source_name: str = "source"
    source: DomainStyle = field(default_factory=lambda: DomainStyle(noise_std=0.02, texture_amp=0.03))
    targets: dict = field(default_factory=default_target_styles)

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if isinstance(self.source, dict):
            self.source = DomainStyle(**self.source)
        self.targets = {k: DomainStyle(**v) if isinstance(v, dict) else v for k, v in self.targets.items()}
        if self.n_per_domain < 1:
            raise ConfigError("synthetic.n_per_domain must be >= 1")


@dataclass
class DataSection:
    root: str = "runs/data"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec(**self.synthetic)


@dataclass
class AgmSection:
    model: AgmConfig = field(default_factory=AgmConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(batch_size=8, iterations=300))
    sufm_enabled: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = AgmConfig(**self.model)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)


@dataclass
class SegmenterSection:
    model: SegmenterConfig = field(default_factory=SegmenterConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(batch_size=4, iterations=200))
    freeze_encoders: bool = True
    train_prompt_jitter: PromptJitter = field(default_factory=lambda: PromptJitter(probability=0.5))

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = SegmenterConfig(**self.model)
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if isinstance(self.train_prompt_jitter, dict):
            self.train_prompt_jitter = PromptJitter(**self.train_prompt_jitter)
        if not self.freeze_encoders:
            raise ConfigError("segmenter.freeze_encoders must stay true: only the decoder is fine-tuned")


@dataclass
class EvalSection:
    threshold: float = 0.5
    connectivity: int = 4
    box_padding: int = 0
    jitter_scale: float = 1.5
    jitter_shift_fraction: float = 0.1
    output_dir: str = "runs"
    overlays: int = 4  # overlay images written per domain by `eval`


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    agm: AgmSection = field(default_factory=AgmSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        for f, cls in (("data", DataSection), ("agm", AgmSection), ("segmenter", SegmenterSection), ("eval", EvalSection)):
            if isinstance(getattr(self, f), dict):
                setattr(self, f, cls(**getattr(self, f)))

    @property
    def sufm(self):
        return self.agm.model.sufm

    @property
    def out(self):
        return Path(self.eval.output_dir)

    def to_dict(self):
        return _plain(asdict(self))

    def copy(self, **changes):
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return new


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(base, override):
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _check_keys(cls, doc, where="config"):
    """Reject unknown keys so a typo never silently falls back to a default."""
    names = {f.name: f for f in fields(cls)}
    for k, v in doc.items():
        if k not in names:
            raise ConfigError(f"unknown key {where}.{k}")


def from_dict(doc):
    base = PipelineConfig().to_dict()
    # target styles replace the default set rather than merging into it
    targets = (doc.get("data") or {}).get("synthetic", {}).get("targets")
    merged = _merge(base, copy.deepcopy(doc))
    if targets is not None:
        merged["data"]["synthetic"]["targets"] = targets
    _check_keys(PipelineConfig, merged)
    try:
        return PipelineConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None):
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    return from_dict(doc)


def dump_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path

