import dataclasses

import numpy as np
import pytest

from sparsevcd.config import DecodeConfig, ModelConfig, SparsifyConfig
from sparsevcd.decoding import decode
from sparsevcd.errors import ConfigError
from sparsevcd.models import ImageDescriptor, build_toy_transformer


def test_default_hyperparameters():
    s = SparsifyConfig()
    d = DecodeConfig()
    assert s.sparsity_rate == 0.8  # retained budget = ceil(0.8 * L)
    assert s.lambda_ == 0.1
    assert s.beta == 0.1
    assert d.alpha == 0.3
    assert d.visual_mask_rate == 0.5
    assert d.beam_size == 2
    assert s.w_recent == 8
    assert s.rho_merge == 0.25
    assert s.knn_k == 5
    assert s.l_min == 16


def test_validation_ranges():
    with pytest.raises(ConfigError):
        SparsifyConfig(sparsity_rate=1.2).validate()
    with pytest.raises(ConfigError):
        SparsifyConfig(lambda_=-0.1).validate()
    with pytest.raises(ConfigError):
        SparsifyConfig(sac_input="scores").validate()
    with pytest.raises(ConfigError):
        DecodeConfig(gamma_apc=1.5).validate()
    with pytest.raises(ConfigError):
        DecodeConfig(beam_size=0).validate()
    with pytest.raises(ConfigError):
        ModelConfig(kind="rnn").validate()


def _toy_run(scfg, seed=41, max_len=6):
    model = build_toy_transformer(seed, d_model=16, layers=2, heads=2, vocab=64)
    img = ImageDescriptor((4, 5), 3)
    dcfg = DecodeConfig(alpha=0.0, gamma_apc=0.0, visual_mask_rate=0.0,
                        max_len=max_len, seed=1)
    return decode(model, img, [1] * 14, scfg, dcfg)


def test_raw_score_accumulation_mode_runs_and_differs():
    base = SparsifyConfig(l_min=8, sparsity_rate=0.6)
    probs = _toy_run(base)
    raw = _toy_run(dataclasses.replace(base, sac_input="raw_scores"))
    assert probs.tokens and raw.tokens
    again = _toy_run(dataclasses.replace(base, sac_input="raw_scores"))
    assert raw.tokens == again.tokens


def test_sac_after_vats_ordering_flag():
    base = SparsifyConfig(l_min=8, sparsity_rate=0.6, beta=0.4)
    before = _toy_run(base)
    after = _toy_run(dataclasses.replace(base, sac_before_vats=False))
    assert before.tokens and after.tokens
    assert after.tokens == _toy_run(dataclasses.replace(base, sac_before_vats=False)).tokens


def test_recency_window_keeps_recent_tokens_retained():
    scfg = SparsifyConfig(l_min=8, sparsity_rate=0.5, w_recent=4)
    model = build_toy_transformer(43, d_model=16, layers=2, heads=2, vocab=64)
    img = ImageDescriptor((4,), 2)
    res = decode(model, img, [1] * 14, scfg,
                 DecodeConfig(alpha=0.0, gamma_apc=0.0, max_len=4, seed=0),
                 diag_level="full")
    checked = 0
    for rec in res.forward_records:
        for snap in rec["layers"]:
            pruned = set(snap["pruned"])
            n_rows = snap["retained"] + len(pruned)  # logical mode: all raw
            for recent in range(n_rows - 4, n_rows):
                assert recent not in pruned
            checked += 1
    assert checked > 0
