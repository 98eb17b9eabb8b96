"""Shared oracles for the test suite."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from lpfl import numerics as nx
from lpfl.config import DataSpec, ExperimentSpec, PretrainSpec, SynthSpec
from lpfl.federation import FLConfig
from lpfl.model import ModelConfig

REL_TOL = 1e-3
FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def grad_check(build: Callable[[Sequence[nx.Tensor]], nx.Tensor], arrays: Sequence[np.ndarray], seed: int = 0, h: float = 1e-6) -> float:
    """Worst elementwise relative error between tape and finite-difference gradients.

    The output is contracted with a fixed random tensor so every output entry
    contributes.  Errors are relative to ``max(|analytic|, |numeric|, FLOOR)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(params):
        nonlocal probe
        out = build(params)
        if probe is None:
            probe = np.random.default_rng(seed).normal(size=out.shape)
        return nx.sum(nx.mul(out, probe))

    params = [nx.parameter(a, f"p{i}") for i, a in enumerate(arrays)]
    grads = nx.backward(scalar(params))
    worst = 0.0
    for i, a in enumerate(arrays):

        def f():
            with nx.no_grad():
                return scalar([nx.Tensor(b) for b in arrays]).item()

        num = numeric_grad(f, a, h)
        ana = grads[f"p{i}"]
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), FLOOR)
        worst = max(worst, float(err.max()))
    return worst


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(vocab_size=40, d_model=16, n_layers=2, n_heads=2, d_ff=24, max_len=24, lora_rank=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_spec(out: str | Path, **fl) -> ExperimentSpec:
    """A whole experiment small enough to run in a few seconds."""
    seed = fl.pop("seed", 3)
    flc = FLConfig(clients=2, rounds=3, local_epochs=1, batch_size=8, lr=0.01, labeled_fraction=0.1, seed=seed)
    flc = replace(flc, **fl)
    return ExperimentSpec(
        seed=seed,
        out=str(out),
        data=DataSpec(synthetic=SynthSpec(n=260, vocab_size=120, signal_words_per_label=6, noise_rate=0.05, seed=0), val_size=40, test_size=40),
        model=ModelConfig(vocab_size=200, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=40, lora_rank=2),
        pretrain=PretrainSpec(steps=20, documents=200, batch_size=8, cache_dir=None),
        fl=flc,
    )
