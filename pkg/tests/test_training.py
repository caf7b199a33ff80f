import json
import pickle

import numpy as np
import pytest
import torch

from conftest import tiny_cfg
from weakcrack.config import config_from_dict, config_to_dict, loads_toml
from weakcrack.data import load_batch, scan_directory
from weakcrack.errors import CheckpointError, NumericalError
from weakcrack.training import Trainer, checkpoint_info, load_for_eval, lr_at


def _trainer(corpus_dir, run_dir=None, **overrides) -> Trainer:
    cfg = tiny_cfg(corpus_dir, **overrides)
    manifest = scan_directory(corpus_dir, "train")
    return Trainer(cfg, manifest, run_dir=run_dir)


def _batch_with_labels(tr: Trainer, wanted: list):
    """Deterministic batch with an exact crack/road composition."""
    by_label = {0: [], 1: []}
    for i, s in enumerate(tr.manifest.samples):
        by_label[s.label].append(i)
    idx = [by_label[lb].pop(0) for lb in wanted]
    return load_batch(tr.manifest, idx, tr.cfg.data.input_size,
                      tr.cfg.data.normalize_mean, tr.cfg.data.normalize_std)


def _flat_state(module) -> dict:
    return {k: v.detach().cpu().numpy().copy()
            for k, v in module.state_dict().items()}


def _states_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and \
        all(np.array_equal(a[k], b[k]) for k in a)


def test_lr_schedule_endpoints_and_shape():
    assert lr_at(0, 100, 0.05, 0.9) == 0.05
    assert lr_at(100, 100, 0.05, 0.9) == 0.0
    assert lr_at(50, 100, 0.05, 1.0) == 0.025
    prev = float("inf")
    for step in range(0, 101, 5):
        lr = lr_at(step, 100, 0.05, 0.9)
        assert lr <= prev
        prev = lr


def test_phase_alternation(corpus_dir):
    tr = _trainer(corpus_dir)
    assert [tr.phase_at(s) for s in range(4)] == ["cls", "rec", "cls", "rec"]
    tr3 = _trainer(corpus_dir, train__switch_period=3)
    assert [tr3.phase_at(s) for s in range(7)] == \
        ["cls", "cls", "cls", "rec", "rec", "rec", "cls"]
    solo = _trainer(corpus_dir, model__use_reconstructor=False)
    assert all(solo.phase_at(s) == "cls" for s in range(6))


def test_phase_modes_toggle_grads(corpus_dir):
    tr = _trainer(corpus_dir)
    tr._apply_phase_modes("cls")
    assert all(p.requires_grad for p in tr.models["cls"].parameters())
    assert not any(p.requires_grad for p in tr.models["rec_e"].parameters())
    assert not tr.models["rec_e"].training
    tr._apply_phase_modes("rec")
    assert not any(p.requires_grad for p in tr.models["cls"].parameters())
    assert all(p.requires_grad for p in tr.models["rec_d"].parameters())
    # the detector path trains in both phases
    assert all(p.requires_grad for p in tr.models["det"].parameters())


def test_frozen_side_is_bit_identical(corpus_dir):
    tr = _trainer(corpus_dir, train__warmup_steps=100)
    # step 0 updates the classifier: every reconstructor array must survive
    before = {n: _flat_state(tr.models[n]) for n in ("rec_e", "rec_d")}
    tr.train_step(tr.next_batch())
    for n in ("rec_e", "rec_d"):
        assert _states_equal(before[n], _flat_state(tr.models[n]))
    # step 1 updates the reconstructor: classifier arrays must survive
    before_cls = _flat_state(tr.models["cls"])
    tr.train_step(tr.next_batch())
    assert _states_equal(before_cls, _flat_state(tr.models["cls"]))


def test_crack_free_batch_reduces_to_classification(corpus_dir):
    tr = _trainer(corpus_dir, train__warmup_steps=0)
    batch = _batch_with_labels(tr, [0, 0])
    for phase in ("cls", "rec"):
        tr._apply_phase_modes(phase)
        out = tr._compute_losses(batch, phase)
        assert float(out["crack"]) == 0.0
        assert float(out["road"]) == 0.0
        assert float(out["consistency"]) == 0.0
        assert float(out["det"]) == 0.0 and out["n_pseudo"] == 0
        # weights on the classification term are 1.0 in both phases
        assert torch.allclose(out["adv_total"], out["bce"])


def test_detector_waits_for_warmup(corpus_dir):
    tr = _trainer(corpus_dir, train__warmup_steps=3, train__max_steps=4)
    records = [tr.train_step(tr.next_batch()) for _ in range(4)]
    for r in records[:3]:
        assert r["det"] == 0.0 and r["n_pseudo"] == 0


def test_detector_lr_scale_applies_to_detector_only(corpus_dir):
    tr = _trainer(corpus_dir, train__warmup_steps=0, train__max_steps=8,
                  detector__lr_scale=4.0)
    for _ in range(8):
        at = tr.step
        r = tr.train_step(tr.next_batch())
        if r["n_pseudo"] > 0:
            base = lr_at(at, tr.total_steps, tr.cfg.train.base_lr,
                         tr.cfg.train.lr_power)
            active = "cls" if r["phase"] == "cls" else "rec"
            assert tr.opts[active].param_groups[0]["lr"] == pytest.approx(base)
            assert tr.opts["det"].param_groups[0]["lr"] == \
                pytest.approx(4.0 * base)
            return
    pytest.fail("no step produced a valid pseudo label")


def test_invalid_pseudo_labels_never_reach_detector(corpus_dir, monkeypatch):
    def all_road(cam, image, params, mode=None, dtype=None):
        h, w = image.shape[:2]
        return np.stack([np.full((h, w), 0.9), np.full((h, w), 0.1)])

    monkeypatch.setattr("weakcrack.training.refine_cam", all_road)
    tr = _trainer(corpus_dir, train__warmup_steps=0)
    batch = _batch_with_labels(tr, [1, 1])
    tr._apply_phase_modes("cls")
    out = tr._compute_losses(batch, "cls")
    assert float(out["det"]) == 0.0 and out["n_pseudo"] == 0


def test_partial_validity_filters_per_sample(corpus_dir, monkeypatch):
    calls = {"n": 0}

    def alternating(cam, image, params, mode=None, dtype=None):
        h, w = image.shape[:2]
        calls["n"] += 1
        hot = 0.9 if calls["n"] % 2 == 1 else 0.1
        return np.stack([np.full((h, w), 1 - hot), np.full((h, w), hot)])

    monkeypatch.setattr("weakcrack.training.refine_cam", alternating)
    tr = _trainer(corpus_dir, train__warmup_steps=0, data__batch_size=4)
    batch = _batch_with_labels(tr, [1, 1, 1, 0])
    tr._apply_phase_modes("cls")
    out = tr._compute_losses(batch, "cls")
    assert calls["n"] == 3  # refinement ran once per crack image
    assert out["n_pseudo"] == 2  # calls 1 and 3 were valid


def test_seeded_rerun_reproduces_losses(corpus_dir):
    a = _trainer(corpus_dir, train__max_steps=6, train__warmup_steps=4)
    b = _trainer(corpus_dir, train__max_steps=6, train__warmup_steps=4)
    for _ in range(6):
        ra = a.train_step(a.next_batch())
        rb = b.train_step(b.next_batch())
        for key in ("total", "bce", "crack", "road", "consistency", "det"):
            assert abs(ra[key] - rb[key]) < 1e-6


def test_checkpoint_round_trip_bytes(corpus_dir, tmp_path):
    tr = _trainer(corpus_dir, train__warmup_steps=100)
    for _ in range(2):
        tr.train_step(tr.next_batch())
    p1 = tmp_path / "a.pkl"
    tr.save_checkpoint(p1)
    manifest = scan_directory(corpus_dir, "train")
    resumed = Trainer.resume(p1, manifest)
    p2 = tmp_path / "b.pkl"
    resumed.save_checkpoint(p2)
    assert p1.read_bytes() == p2.read_bytes()
    info = checkpoint_info(p1)
    assert info["step"] == 2 and info["backbone"] == "tiny_test"


def test_resume_continues_exact_trajectory(corpus_dir, tmp_path):
    full = _trainer(corpus_dir, train__max_steps=6, train__warmup_steps=4)
    records_full = [full.train_step(full.next_batch()) for _ in range(6)]

    part = _trainer(corpus_dir, train__max_steps=6, train__warmup_steps=4)
    for _ in range(3):
        part.train_step(part.next_batch())
    ckpt = tmp_path / "mid.pkl"
    part.save_checkpoint(ckpt)
    resumed = Trainer.resume(ckpt, scan_directory(corpus_dir, "train"))
    assert resumed.step == 3
    tail = [resumed.train_step(resumed.next_batch()) for _ in range(3)]
    for ref, got in zip(records_full[3:], tail):
        for key in ("total", "bce", "crack", "road", "det"):
            assert abs(ref[key] - got[key]) < 1e-6


def test_checkpoint_errors(corpus_dir, tmp_path):
    manifest = scan_directory(corpus_dir, "train")
    with pytest.raises(CheckpointError):
        Trainer.resume(tmp_path / "missing.pkl", manifest)
    bad = tmp_path / "bad.pkl"
    bad.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        Trainer.resume(bad, manifest)
    stale = tmp_path / "stale.pkl"
    stale.write_bytes(pickle.dumps({"format_version": 99}))
    with pytest.raises(CheckpointError):
        Trainer.resume(stale, manifest)

    tr = _trainer(corpus_dir)
    good = tmp_path / "good.pkl"
    tr.save_checkpoint(good)
    other_cfg = tiny_cfg(corpus_dir, model__backbone="resnet38_wide",
                         data__input_size=64)
    with pytest.raises(CheckpointError):
        Trainer.resume(good, manifest, cfg=other_cfg)


def test_nonfinite_loss_aborts_after_retries(corpus_dir):
    tr = _trainer(corpus_dir)
    tr._compute_losses = lambda batch, phase: {
        "total": torch.tensor(float("nan"))}
    with pytest.raises(NumericalError):
        tr.train_step(tr.next_batch())
    assert tr.lr_mult == 0.125  # three halvings before giving up


def test_detector_gradient_stops_at_backbones_by_default(corpus_dir,
                                                         monkeypatch):
    def all_crack(cam, image, params, mode=None, dtype=None):
        h, w = image.shape[:2]
        return np.stack([np.full((h, w), 0.1), np.full((h, w), 0.9)])

    monkeypatch.setattr("weakcrack.training.refine_cam", all_crack)

    tr = _trainer(corpus_dir, train__warmup_steps=0)
    tr._apply_phase_modes("cls")
    out = tr._compute_losses(_batch_with_labels(tr, [1, 1]), "cls")
    assert out["n_pseudo"] == 2
    probe = tr.models["cls"].backbone.stem[0].weight
    out["det"].backward()
    assert probe.grad is None

    tr2 = _trainer(corpus_dir, train__warmup_steps=0,
                   detector__backprop_into_backbones=True)
    tr2._apply_phase_modes("cls")
    out2 = tr2._compute_losses(_batch_with_labels(tr2, [1, 1]), "cls")
    assert out2["n_pseudo"] == 2
    probe2 = tr2.models["cls"].backbone.stem[0].weight
    out2["det"].backward()
    assert probe2.grad is not None and float(probe2.grad.abs().sum()) > 0


def test_run_dir_artifacts(corpus_dir, tmp_path):
    run = tmp_path / "run"
    tr = _trainer(corpus_dir, run_dir=run, train__max_steps=4,
                  train__warmup_steps=100, train__checkpoint_every=2)
    tr.run()
    tr.close()
    resolved = loads_toml((run / "config.resolved.toml").read_text())
    assert config_to_dict(config_from_dict(resolved)) \
        == config_to_dict(tr.cfg)
    rows = [json.loads(line) for line in
            (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2, 3]  # one row per step
    assert {r["phase"] for r in rows} == {"cls", "rec"}
    for key in ("total", "bce", "crack", "road", "det", "lr"):
        assert all(key in r for r in rows)
    ckpts = sorted(p.name for p in (run / "checkpoints").glob("*.pkl"))
    assert ckpts == ["step_2.pkl", "step_4.pkl"]
    assert (run / "exports").is_dir()


def test_best_loss_tracking_and_eval_loading(corpus_dir, tmp_path):
    run = tmp_path / "run"
    tr = _trainer(corpus_dir, run_dir=run, train__max_steps=4,
                  train__warmup_steps=100)
    records = []
    while tr.step < tr.total_steps:
        records.append(tr.train_step(tr.next_batch()))
    tr.save_checkpoint(tr.checkpoint_path())
    tr.close()
    assert tr.best_loss == min(r["total"] for r in records)
    assert records[tr.best_step]["total"] == tr.best_loss

    cfg, models = load_for_eval(tr.checkpoint_path())
    assert cfg.model.backbone == "tiny_test"
    assert set(models) == {"cls", "rec_e", "rec_d", "fusion", "det"}
    for name, module in models.items():
        assert _states_equal(_flat_state(module),
                             _flat_state(tr.models[name]))
    resumed = Trainer.resume(tr.checkpoint_path(),
                             scan_directory(corpus_dir, "train"))
    assert resumed.best_loss == tr.best_loss
    assert resumed.best_step == tr.best_step
