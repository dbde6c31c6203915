import math

import numpy as np
import pytest
import torch

from daffnet import checks, metrics, oracles
from daffnet.network import ArchitectureConfig, build_variant

from conftest import SMALL_ARCH


def test_dsc_examples():
    a = np.zeros((4, 4, 4), int)
    b = np.zeros((4, 4, 4), int)
    assert metrics.dsc(a, b, 1) == 100.0
    a[:2] = 1
    b[1:3] = 1
    assert metrics.dsc(a, b, 1) == 50.0
    assert metrics.dsc(a, a, 1) == 100.0


def test_dsc_matches_set_counting(rng):
    for _ in range(20):
        a, b = checks.random_label_map(rng), checks.random_label_map(rng)
        for k in (1, 2, 3):
            assert metrics.dsc(a, b, k) == oracles.dice_counts(a, b, k)


def test_assd_identical_is_zero(rng):
    a = checks.random_label_map(rng)
    assert metrics.assd(a, a, 1) == 0.0


def test_assd_shifted_cube():
    a = np.zeros((10, 10, 10), int)
    b = np.zeros((10, 10, 10), int)
    a[2:6, 2:6, 2:6] = 1
    b[3:7, 2:6, 2:6] = 1
    assert metrics.assd(a, b, 1) == oracles.assd(a, b, 1)
    assert 0 < metrics.assd(a, b, 1) <= 1.0


def test_assd_matches_all_pairs_oracle(rng):
    for _ in range(10):
        a, b = checks.random_label_map(rng), checks.random_label_map(rng)
        for k in (1, 2, 3):
            if (a == k).any() and (b == k).any():
                assert metrics.assd(a, b, k) == oracles.assd(a, b, k)


def test_assd_anisotropic_spacing(rng):
    a, b = checks.random_label_map(rng), checks.random_label_map(rng)
    sp = (1.5, 1.0, 0.7)
    assert metrics.assd(a, b, 2, sp) == pytest.approx(oracles.assd(a, b, 2, sp), rel=1e-12)


def test_assd_empty_is_nan():
    a = np.zeros((5, 5, 5), int)
    b = a.copy()
    b[2, 2, 2] = 1
    assert math.isnan(metrics.assd(a, b, 1))


def test_surface_of_single_voxel_and_border():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    assert metrics.surface_voxels(m).sum() == 1
    full = np.ones((3, 3, 3), bool)
    # only the centre has all six face neighbours inside the volume
    assert metrics.surface_voxels(full).sum() == 26


@pytest.mark.parametrize("name,field,expect", checks.njd_fold_cases(), ids=lambda x: x if isinstance(x, str) else "")
def test_njd_fold_cases(name, field, expect):
    assert metrics.njd_percent(field) == expect


def test_identity_model_eval_equals_pre_registration(tiny_corpus):
    from daffnet.synthdata import Corpus

    corpus = Corpus(tiny_corpus)
    model = build_variant(ArchitectureConfig(variant="PyramidReg", **SMALL_ARCH))
    pid = corpus.ids("test")[0]
    b = corpus.tensors(pid)
    pm = metrics.evaluate_pair(model, b["moving"], b["fixed"], b["moving_labels"], b["fixed_labels"], pid)
    assert pm.dsc == pm.pre_dsc and pm.njd == 0.0 and pm.seg_dsc is None


def test_report_and_table():
    p1 = metrics.PairMetrics("a", {1: 80.0, 2: 70.0, 3: 90.0}, {1: 1.0, 2: 2.0, 3: math.nan}, 0.5, {1: 60.0, 2: 60.0, 3: 60.0})
    p2 = metrics.PairMetrics("b", {1: 90.0, 2: 80.0, 3: 100.0}, {1: 1.0, 2: 1.0, 3: 1.0}, 0.0, {1: 70.0, 2: 70.0, 3: 70.0})
    rep = metrics.MetricsReport([p1, p2], "M")
    assert rep.mean_std("dsc") == (85.0, 5.0)
    assert rep.mean_std("njd") == (0.25, 0.25)
    assert math.isnan(rep.mean_std("seg_dsc")[0])
    lines = rep.to_jsonl().splitlines()
    assert len(lines) == 2 and '"assd": {"1": 1.0, "2": 2.0, "3": null}' in lines[0]
    table = metrics.format_table([rep.summary_row()])
    header, _, row = table.splitlines()
    assert header.split("  ")[0].strip() == "Method"
    for col in ("Reg. Dice(%)", "Seg. Dice(%)", "ASSD", "NJD(%)"):
        assert col in header
    assert "85.00(±5.00)" in row and " - " in f" {row} "
