"""Experiment configuration: one JSON file, validated before any training starts."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .federation import FLConfig
from .model import ModelConfig
from .semisup import AnnotationPolicy

BUNDLED_PATTERNS = ("imdb", "yelp")


@dataclass(frozen=True)
class SynthSpec:
    n: int = 5000
    vocab_size: int = 2000
    signal_words_per_label: int = 20
    noise_rate: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class DataSpec:
    corpus: str | None = None
    synthetic: SynthSpec | None = field(default_factory=SynthSpec)
    patterns: str = "imdb"
    val_size: int = 500
    test_size: int = 1000


@dataclass(frozen=True)
class PretrainSpec:
    steps: int = 2000
    documents: int = 20000
    batch_size: int = 32
    lr: float = 1e-3
    mask_prob: float = 0.15
    salient_prob: float = 1.0
    cue_rate: float = 1.0
    known_fraction: float = 1.0
    carriers: tuple[str, ...] = ("Simply [MASK]. {x}", "It is [MASK]! {x}", "Really [MASK]. {x}")
    seed: int = 0
    cache_dir: str | None = ".lpfl-cache"


@dataclass(frozen=True)
class ExperimentSpec:
    seed: int = 0
    out: str = "runs/default"
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=2200))
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    fl: FLConfig = field(default_factory=FLConfig)
    policy: AnnotationPolicy = field(default_factory=AnnotationPolicy)

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, seed: int | None = None, out: str | None = None, arm: str | None = None,
                       parallel_clients: int | None = None) -> ExperimentSpec:
        spec, fl = self, self.fl
        if seed is not None:
            spec, fl = replace(spec, seed=seed), replace(fl, seed=seed)
        if arm is not None:
            fl = replace(fl, arm=arm, clients=1 if arm.endswith("-ct") else fl.clients)
        if parallel_clients is not None:
            fl = replace(fl, parallel_clients=parallel_clients)
        if out is not None:
            spec = replace(spec, out=out)
        return replace(spec, fl=fl)


def _build(cls, obj: dict | None, where: str):
    if obj is None:
        return cls()
    known = {f.name for f in fields(cls)}
    extra = sorted(set(obj) - known)
    if extra:
        raise ValueError(f"{where}: unknown keys {', '.join(extra)}")
    kw = dict(obj)
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(v)
    return cls(**kw)


def spec_from_json(obj: dict) -> ExperimentSpec:
    top = {"seed", "out", "data", "model", "pretrain", "fl", "policy"}
    extra = sorted(set(obj) - top)
    if extra:
        raise ValueError(f"config: unknown keys {', '.join(extra)}")
    data = dict(obj.get("data", {}))
    synth = data.pop("synthetic", {})
    data_spec = _build(DataSpec, {**data, "synthetic": None}, "data")
    data_spec = replace(data_spec, synthetic=None if synth is None else _build(SynthSpec, synth, "data.synthetic"))
    if "vocab_size" not in obj.get("model", {}):
        raise ValueError("model.vocab_size: required")
    seed = int(obj.get("seed", 0))
    fl = _build(FLConfig, {"seed": seed, **obj.get("fl", {})}, "fl")
    return ExperimentSpec(
        seed=seed,
        out=obj.get("out", "runs/default"),
        data=data_spec,
        model=_build(ModelConfig, obj["model"], "model"),
        pretrain=_build(PretrainSpec, obj.get("pretrain"), "pretrain"),
        fl=fl,
        policy=_build(AnnotationPolicy, obj.get("policy"), "policy"),
    )


def load_spec(path: str | Path) -> ExperimentSpec:
    """Parse a config file.

    Input files (corpus, patterns) resolve against the file's directory;
    ``out`` and the pretraining cache stay relative to the working directory.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    spec = spec_from_json(obj)
    base = path.parent

    def resolve(p: str) -> str:
        return p if Path(p).is_absolute() else str(base / p)

    data = spec.data
    if data.corpus is not None:
        data = replace(data, corpus=resolve(data.corpus))
    if data.patterns not in BUNDLED_PATTERNS:
        data = replace(data, patterns=resolve(data.patterns))
    return replace(spec, data=data)


def default_spec_path() -> Path:
    from importlib import resources

    return Path(str(resources.files("lpfl.fixtures").joinpath("default.json")))


def validate_config(spec: ExperimentSpec) -> list[str]:
    """Every violated constraint as ``field: reason``; empty when the config is usable."""
    out = list(spec.model.violations()) + spec.fl.violations() + spec.policy.violations()
    if spec.fl.seed != spec.seed:
        out.append("fl.seed: must equal the top-level seed")
    d = spec.data
    if (d.corpus is None) == (d.synthetic is None):
        out.append("data: exactly one of corpus and synthetic must be set")
    if d.corpus is not None and not Path(d.corpus).is_file():
        out.append(f"data.corpus: file not found: {d.corpus}")
    if d.patterns not in BUNDLED_PATTERNS and not Path(d.patterns).is_file():
        out.append(f"data.patterns: not a bundled set ({', '.join(BUNDLED_PATTERNS)}) and no such file")
    if d.val_size < 1:
        out.append("data.val_size: must be positive")
    if d.test_size < 0:
        out.append("data.test_size: must be non-negative")
    s = d.synthetic
    if s is not None:
        if s.n < 1:
            out.append("data.synthetic.n: must be positive")
        if not 0 <= s.noise_rate < 0.5:
            out.append("data.synthetic.noise_rate: must lie in [0, 0.5)")
        if s.vocab_size <= 2 * s.signal_words_per_label:
            out.append("data.synthetic.vocab_size: must exceed the signal word count")
        elif s.n <= d.val_size + d.test_size:
            out.append("data.synthetic.n: must exceed val_size + test_size")
    p = spec.pretrain
    if p.steps < 0 or p.documents < 1 or p.batch_size < 1:
        out.append("pretrain: steps must be non-negative, documents and batch_size positive")
    if not 0 < p.mask_prob < 1:
        out.append("pretrain.mask_prob: must lie in (0, 1)")
    if not 0 < p.salient_prob <= 1:
        out.append("pretrain.salient_prob: must lie in (0, 1]")
    if not 0 <= p.known_fraction <= 1:
        out.append("pretrain.known_fraction: must lie in [0, 1]")
    if not 0 <= p.cue_rate <= 1:
        out.append("pretrain.cue_rate: must lie in [0, 1]")
    for c in p.carriers:
        if c.count("[MASK]") != 1 or c.count("{x}") != 1:
            out.append(f"pretrain.carriers: {c!r} needs one [MASK] and one {{x}}")
    target = Path(spec.out)
    probe = target
    while not probe.exists() and probe != probe.parent:
        probe = probe.parent
    if not os.access(probe, os.W_OK):
        out.append(f"out: {spec.out} is not writable")
    return out
