"""Toy-scale selection experiments shared by ``scripts/`` and the acceptance suite.

Both run the pipeline stages directly so one semantic query function per
seed serves every arm of the comparison.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import generative as gen
from . import metrics
from . import pipeline as pl
from .dpcore import NoiseSource

# 20% of the 10 public clusters overlap the sensitive mixture
RQ2_CONFIG = pl.PipelineConfig(toy_n_semantics=10, toy_overlap="0,1", k=2, conditional=False)
# 20 clusters, 2 overlap: description sizes 2 / 10 / 20 give ratios 10% / 50% / 100%
RQ3_CONFIG = pl.PipelineConfig(toy_n_semantics=20, toy_overlap="0,1", k1=1, conditional=False)
RQ3_K2 = {0.1: 2, 0.5: 10, 1.0: 20}


def _pretrained_fd(cfg, src, data, seed):
    model = pl.build_model(cfg, data, 0)
    model = pl.stage_pretrain(cfg, model, data)
    synth = gen.synthesize(model, cfg.n_synth, None, cfg.sampler_steps, NoiseSource(seed).spawn(3))
    return model, metrics.frechet_between(synth.features, src.sensitive.features)


def rq2_trial(seed: int, base: pl.PipelineConfig = RQ2_CONFIG) -> dict[str, float]:
    """Fréchet distance to the sensitive set right after pretraining, selected vs full public."""
    cfg = dataclasses.replace(base, seed=seed, toy_seed=seed)
    src = pl.load_sources(cfg)
    Q = pl.stage_train_sqf(cfg, src.public, src.vocab)
    ledger = pl.new_ledger(cfg)
    noisy = pl.stage_query(cfg, Q, src.sensitive, ledger, NoiseSource(seed).spawn(1))
    _, selected = pl.stage_select(cfg, noisy, src.public)
    _, fd_sel = _pretrained_fd(cfg, src, selected, seed)
    _, fd_full = _pretrained_fd(cfg, src, src.public, seed)
    return {"selected": fd_sel, "full": fd_full, "selection_ratio": len(selected) / len(src.public)}


def rq3_trial(seed: int, base: pl.PipelineConfig = RQ3_CONFIG, ratios=RQ3_K2) -> dict[float, float]:
    """Final Fréchet distance after DP fine-tuning for each selection ratio."""
    cfg = dataclasses.replace(base, seed=seed, toy_seed=seed)
    src = pl.load_sources(cfg)
    n = len(src.sensitive)
    Q = pl.stage_train_sqf(cfg, src.public, src.vocab)
    ledger = pl.new_ledger(cfg)
    noisy = pl.stage_query(cfg, Q, src.sensitive, ledger, NoiseSource(seed).spawn(1))
    sigma1 = pl.stage_calibrate(cfg, n)
    reference = src.sensitive_test if src.sensitive_test is not None else src.sensitive
    out = {}
    for ratio, k2 in ratios.items():
        arm = dataclasses.replace(cfg, k2=k2)
        _, selected = pl.stage_select(arm, noisy, src.public)
        model = pl.stage_pretrain(arm, pl.build_model(arm, selected, 0), selected)
        ft = pl.finetune_config(arm, n, sigma1)
        model = gen.finetune_dp(model, src.sensitive, ft, NoiseSource(seed).spawn(2))
        synth = gen.synthesize(model, arm.n_synth, None, arm.sampler_steps, NoiseSource(seed).spawn(3))
        out[ratio] = metrics.frechet_between(synth.features, reference.features)
    return out


def medians(trials: list[dict]) -> dict:
    return {k: float(np.median([t[k] for t in trials])) for k in trials[0]}
