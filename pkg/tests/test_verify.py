import time

import numpy as np

from aga import autodiff, verify


def test_battery_passes_quickly():
    t0 = time.perf_counter()
    results = verify.run()
    assert time.perf_counter() - t0 < 120
    assert {r.group for r in results} == {"substrate", "encoders", "grouping", "losses", "system", "evaluation"}
    assert all(r.ok for r in results), [r for r in results if not r.ok]


def test_filter_by_group_and_name():
    assert {r.group for r in verify.run("losses")} == {"losses"}
    (only,) = verify.run("gate_closed_form")
    assert only.name == "gate_closed_form" and only.ok


def test_sign_error_is_caught(monkeypatch):
    rule = autodiff.BACKWARD_RULES["matmul"]
    monkeypatch.setitem(autodiff.BACKWARD_RULES, "matmul", lambda g, out: tuple(-v for v in rule(g, out)))
    lines = []
    assert verify.main(out=lines.append) == 1
    failed = lines[-1]
    assert "substrate/matmul_gradient" in failed and "system/total_loss_gradient" in failed


def test_crashing_check_counts_as_failure(monkeypatch):
    def boom():
        raise RuntimeError("broken")
    monkeypatch.setattr(verify, "CHECKS", [("x", "boom", boom)])
    (r,) = verify.run()
    assert not r.ok and "broken" in r.detail


def test_micro_batch_respects_threshold_margin():
    model, pairs = verify.micro_batch(3)
    assert [p.text.length for p in pairs] == [3, 4]
    assert pairs[0].image.patches.shape == (6, 3) and model.encoder.dim == 4
    assert verify._clear_of_thresholds(model, pairs, 0.2, 0.3, 1e-3)
