import dataclasses

import numpy as np
import pytest

from hfgd import audit
from hfgd.audit import CLAIMS, NONZERO, VIOLATION, ZERO
from hfgd.model import HFGD, LATERAL_SITES, ModelConfig


@pytest.fixture(scope="module")
def batches():
    return audit.random_batches(6, 2, seed=0)


@pytest.fixture(scope="module")
def default_report(batches):
    return audit.grad_audit(HFGD(ModelConfig(), seed=0), batches)


def test_param_groups():
    assert audit.param_group("backbone.stage2.block0.conv1.weight") == "backbone.stage2"
    assert audit.param_group("tokens") == "tokens"
    assert audit.param_group("usfpn.merge.weight") == "usfpn"


def test_default_claims_hold(default_report):
    assert default_report.failed_claims() == []
    assert default_report.violations() == []


def test_default_expected_paths_nonzero(default_report):
    for group in audit.BACKBONE + ("cae", "tokens"):
        assert default_report.verdict("teacher_ce", group) == NONZERO
    for group in ("usfpn", "hfgm_aa"):
        assert default_report.verdict("student_ce", group) == NONZERO


def test_car_acts_on_context_not_decoder(default_report):
    for term in ("car_intra", "car_inter"):
        assert default_report.verdict(term, "cae") == NONZERO
        assert default_report.verdict(term, "backbone.stage4") == NONZERO
        assert default_report.verdict(term, "usfpn") == ZERO


def test_lateral_flag_off_opens_backbone(batches):
    cfg = ModelConfig(lateral_stop_grad_enabled=False)
    report = audit.grad_audit(HFGD(cfg, seed=0), batches[:1])
    failed = set(report.failed_claims())
    assert ("student_ce", "backbone.stage1") in failed
    assert ("student_ce", "cae") in failed
    assert ("student_ce", "tokens") not in failed
    assert report.violations() == []


def test_soundness_over_fuzzed_batches():
    model = HFGD(ModelConfig(hfgm_aa_enabled=False), seed=3)
    rng = np.random.default_rng(17)
    for _ in range(3):
        b = audit.random_batches(6, 1, seed=int(rng.integers(1 << 30)))
        report = audit.grad_audit(model, b)
        assert report.violations() == []
        for key, entry in report.entries.items():
            if not entry.reachable:
                assert entry.max_abs_grad == 0.0 and entry.verdict == ZERO


def test_mutation_each_barrier_is_load_bearing(batches):
    flipped = audit.mutation_test(HFGD(ModelConfig(), seed=0), batches[:1])
    assert set(flipped) == set(LATERAL_SITES) | {"tokens"}
    for site, claims in flipped.items():
        assert claims, f"removing {site} changed no claim"
    assert ("student_ce", "tokens") in flipped["tokens"]
    assert ("student_ce", "cae") in flipped["teacher_feat"]


def test_mutation_restores_barriers(batches):
    model = HFGD(ModelConfig(), seed=0)
    audit.mutation_test(model, batches[:1], sites=("tokens",))
    assert model.disabled_barriers == set()


def test_report_text_marks_changes(default_report, batches):
    other = audit.grad_audit(HFGD(ModelConfig(lateral_stop_grad_enabled=False), seed=0),
                             batches[:1])
    text = other.to_text(baseline=default_report)
    assert "CHANGED (was zero-by-topology)" in text
    assert text.splitlines()[1].split("\t") == ["loss", "group", "reachable",
                                               "max_abs_grad", "verdict"]


def test_verdict_rules():
    assert audit._verdict(False, 0.0) == ZERO
    assert audit._verdict(False, 1e-30) == VIOLATION
    assert audit._verdict(True, 0.0) == audit.ZERO_REACHABLE
    assert audit._verdict(True, 0.5) == NONZERO


def test_claims_cover_teacher_side():
    assert ("teacher_ce", "usfpn") in CLAIMS and ("student_ce", "backbone.stem") in CLAIMS
